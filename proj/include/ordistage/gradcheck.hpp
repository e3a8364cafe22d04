#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "ordistage/tensor.hpp"

namespace ordistage {

/// Max over checked coordinates of |analytic - central difference| / (|analytic| + 1e-8).
///
/// `loss` is evaluated once with recording on for the analytic gradient and
/// twice per coordinate without recording. When `coords_per_tensor` is
/// nonzero only that many coordinates of each tensor are probed, picked by a
/// seeded draw; zero probes every coordinate.
double finite_diff_check(const std::function<Tensor()>& loss, std::vector<Tensor> params, double h = 1e-5,
                         std::size_t coords_per_tensor = 0, std::uint64_t seed = 0);

/// Single-input form: checks d f(x) / dx for scalar-valued f.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace ordistage
