#pragma once

#include <string>
#include <vector>

#include "ordistage/tensor.hpp"

namespace ordistage {

enum class Sex { A, B };

inline char sex_code(Sex s) { return s == Sex::A ? 'A' : 'B'; }

/// One grayscale image [1×H×W] in [0,1] with its ordinal stage (0..9).
struct StagedSample {
    Tensor image;
    int stage = 0;
    Sex sex = Sex::A;
    std::string id;
};

using Dataset = std::vector<StagedSample>;

}  // namespace ordistage
