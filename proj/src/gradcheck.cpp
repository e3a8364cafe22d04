#include "ordistage/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ordistage/errors.hpp"
#include "ordistage/random.hpp"

namespace ordistage {

double finite_diff_check(const std::function<Tensor()>& loss, std::vector<Tensor> params, double h,
                         std::size_t coords_per_tensor, std::uint64_t seed) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    const Tensor value = loss();
    value.backward();

    Rng rng(seed);
    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> analytic = p.grad();
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords_per_tensor != 0 && coords.size() > coords_per_tensor) {
            rng.shuffle(coords.begin(), coords.end());
            coords.resize(coords_per_tensor);
        }
        auto values = p.mutable_data();
        for (const std::size_t i : coords) {
            const double saved = values[i];
            double plus = 0.0, minus = 0.0;
            {
                NoGradGuard guard;
                values[i] = saved + h;
                plus = loss().item();
                values[i] = saved - h;
                minus = loss().item();
            }
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
            if (!std::isfinite(err)) throw NumericError("finite_diff_check: non-finite loss");
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
    return finite_diff_check([&f, x] { return f(x); }, {x}, h);
}

}  // namespace ordistage
