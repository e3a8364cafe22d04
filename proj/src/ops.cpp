#include "ordistage/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ordistage/errors.hpp"

namespace ordistage {

using detail::grad_buffer;
using detail::make_result;
using detail::wants_grad;

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

// Raw product c[m×n] += a[m×k]·b[k×n].
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m×n] += a[m×k]·b[n×k]ᵀ
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ·b[m×n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
    const double pdf = std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

bool is_scalar(const Tensor& t) { return t.numel() == 1 && t.rank() == 0; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
        if (wants_grad(a)) gemm_nt_acc(g.data(), b.data().data(), grad_buffer(a).data(), m, n, k);
        if (wants_grad(b)) gemm_tn_acc(a.data().data(), g.data(), grad_buffer(b).data(), m, k, n);
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto src = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [a, m, n](std::span<const double> g) {
        auto& ga = grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(w, 2, "affine weight");
    require_rank(b, 1, "affine bias");
    const bool vector_in = x.rank() == 1;
    if (!vector_in) require_rank(x, 2, "affine input");
    const std::size_t m = vector_in ? 1 : x.dim(0);
    const std::size_t k = vector_in ? x.dim(0) : x.dim(1);
    const std::size_t n = w.dim(1);
    if (w.dim(0) != k || b.dim(0) != n) {
        throw DimensionError("affine: " + shape_str(x.shape()) + " · " + shape_str(w.shape()) + " + " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    const auto bias = b.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.begin(), bias.end(), out.begin() + static_cast<long>(i * n));
    gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
    Shape shape = vector_in ? Shape{n} : Shape{m, n};
    return make_result(std::move(shape), std::move(out), {x, w, b}, [x, w, b, m, k, n](std::span<const double> g) {
        if (wants_grad(x)) gemm_nt_acc(g.data(), w.data().data(), grad_buffer(x).data(), m, n, k);
        if (wants_grad(w)) gemm_tn_acc(x.data().data(), g.data(), grad_buffer(w).data(), m, k, n);
        if (wants_grad(b)) {
            auto& gb = grad_buffer(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    require_rank(x, 3, "conv2d input");
    require_rank(w, 4, "conv2d weight");
    require_rank(b, 1, "conv2d bias");
    if (stride == 0) throw ParameterError("conv2d: stride must be positive");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin || b.dim(0) != cout) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                             ", bias " + shape_str(b.shape()));
    }
    const long span_h = static_cast<long>(h + 2 * pad) - static_cast<long>(kh);
    const long span_w = static_cast<long>(wd + 2 * pad) - static_cast<long>(kw);
    if (span_h < 0 || span_w < 0) {
        throw DimensionError("conv2d: output extent < 1 for input " + shape_str(x.shape()));
    }
    const std::size_t oh = static_cast<std::size_t>(span_h) / stride + 1;
    const std::size_t ow = static_cast<std::size_t>(span_w) / stride + 1;

    // Valid output range for each kernel offset, shared by forward and backward.
    struct Range {
        std::size_t lo, hi;
    };
    auto valid = [pad, stride](std::size_t k, std::size_t in_extent, std::size_t out_extent) {
        // output o reads input o*stride + k - pad, which must lie in [0, in_extent)
        std::size_t lo = 0;
        while (lo < out_extent && lo * stride + k < pad) ++lo;
        std::size_t hi = out_extent;
        while (hi > lo && (hi - 1) * stride + k - pad >= in_extent) --hi;
        return Range{lo, hi};
    };

    std::vector<double> out(cout * oh * ow);
    const double* xd = x.data().data();
    const double* wdat = w.data().data();
    const auto bias = b.data();
    for (std::size_t co = 0; co < cout; ++co) {
        double* o = out.data() + co * oh * ow;
        std::fill(o, o + oh * ow, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xc = xd + ci * h * wd;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const Range ry = valid(ky, h, oh);
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const Range rx = valid(kx, wd, ow);
                    const double wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const std::size_t row = (oy * stride + ky - pad) * wd + kx;
                        double* orow = o + oy * ow;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * xc[row + ox * stride - pad];
                    }
                }
            }
        }
    }

    return make_result(
        {cout, oh, ow}, std::move(out), {x, w, b},
        [x, w, b, cin, h, wd, cout, kh, kw, oh, ow, stride, pad, valid](std::span<const double> g) {
            const double* xd = x.data().data();
            const double* wdat = w.data().data();
            double* gx = wants_grad(x) ? grad_buffer(x).data() : nullptr;
            double* gw = wants_grad(w) ? grad_buffer(w).data() : nullptr;
            if (wants_grad(b)) {
                auto& gb = grad_buffer(b);
                for (std::size_t co = 0; co < cout; ++co) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < oh * ow; ++i) s += g[co * oh * ow + i];
                    gb[co] += s;
                }
            }
            for (std::size_t co = 0; co < cout; ++co) {
                const double* go = g.data() + co * oh * ow;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xc = xd + ci * h * wd;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const Range ry = valid(ky, h, oh);
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const Range rx = valid(kx, wd, ow);
                            const std::size_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                            const double wv = wdat[widx];
                            double acc = 0.0;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t row = (oy * stride + ky - pad) * wd + kx;
                                const double* grow = go + oy * ow;
                                if (gw) {
                                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                        acc += grow[ox] * xc[row + ox * stride - pad];
                                }
                                if (gx) {
                                    double* gxc = gx + ci * h * wd;
                                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                        gxc[row + ox * stride - pad] += wv * grow[ox];
                                }
                            }
                            if (gw) gw[widx] += acc;
                        }
                    }
                }
            }
        });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
    switch (op) {
        case ElementwiseOp::add:
            return add(a, b);
        case ElementwiseOp::sub:
            return sub(a, b);
        case ElementwiseOp::mul:
            return mul(a, b);
        case ElementwiseOp::relu:
            return relu(a);
        case ElementwiseOp::sigmoid:
            return sigmoid(a);
        case ElementwiseOp::gelu:
            return gelu(a);
    }
    throw ParameterError("unknown elementwise op");
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
    const bool sa = is_scalar(a) && !is_scalar(b);
    const bool sb = is_scalar(b) && !is_scalar(a);
    if (!sa && !sb && a.shape() != b.shape()) {
        throw DimensionError("elementwise: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const Shape shape = sa ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    const auto ad = a.data();
    const auto bd = b.data();
    auto av = [&](std::size_t i) { return sa ? ad[0] : ad[i]; };
    auto bv = [&](std::size_t i) { return sb ? bd[0] : bd[i]; };
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
            case Binary::add: out[i] = av(i) + bv(i); break;
            case Binary::sub: out[i] = av(i) - bv(i); break;
            case Binary::mul: out[i] = av(i) * bv(i); break;
        }
    }
    return make_result(shape, std::move(out), {a, b}, [a, b, kind, sa, sb, n](std::span<const double> g) {
        const auto ad = a.data();
        const auto bd = b.data();
        if (wants_grad(a)) {
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = kind == Binary::mul ? g[i] * (sb ? bd[0] : bd[i]) : g[i];
                ga[sa ? 0 : i] += d;
            }
        }
        if (wants_grad(b)) {
            auto& gb = grad_buffer(b);
            for (std::size_t i = 0; i < n; ++i) {
                double d = g[i];
                if (kind == Binary::sub) d = -d;
                if (kind == Binary::mul) d *= sa ? ad[0] : ad[i];
                gb[sb ? 0 : i] += d;
            }
        }
    });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
    auto result = make_result(x.shape(), std::move(out), {x}, nullptr);
    if (result.requires_grad()) {
        // Capture the output values by pointer-free copy for derivative forms that use them.
        result.node()->backward = [x, deriv, y = result.data()](std::span<const double> g) {
            auto& gx = grad_buffer(x);
            const auto xd = x.data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xd[i], y[i]);
        };
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b); }

Tensor relu(const Tensor& x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    return unary(x, gelu_value, [](double v, double) { return gelu_derivative(v); });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
    return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_result({}, {s}, {x}, [x](std::span<const double> g) {
        for (auto& v : grad_buffer(x)) v += g[0];
    });
}

Tensor mean(const Tensor& x) {
    const auto n = static_cast<double>(x.numel());
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0 / n);
}

Tensor add_n(const std::vector<Tensor>& terms) {
    if (terms.empty()) throw DimensionError("add_n: no terms");
    const Shape shape = terms.front().shape();
    std::vector<double> out(shape_numel(shape), 0.0);
    for (const auto& t : terms) {
        if (t.shape() != shape) throw DimensionError("add_n: shape mismatch");
        const auto d = t.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
    }
    return make_result(shape, std::move(out), terms, [terms](std::span<const double> g) {
        for (const auto& t : terms) {
            if (!wants_grad(t)) continue;
            auto& gt = grad_buffer(t);
            for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
        }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto& shape = x.shape();
    if (axis >= shape.size()) throw DimensionError("softmax: axis out of range for " + shape_str(shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -INFINITY;
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
            if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(xd[base + i * inner] - mx);
                out[base + i * inner] = e;
                s += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= s;
        }
    }
    auto result = make_result(shape, std::move(out), {x}, nullptr);
    if (result.requires_grad()) {
        result.node()->backward = [x, y = result.data(), outer, inner, n](std::span<const double> g) {
            auto& gx = grad_buffer(x);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t k = base + i * inner;
                        gx[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        };
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive");
    if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias extent mismatch");
    const std::size_t rows = x.numel() / d;
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = bias.data();
    std::vector<double> out(xd.size());
    auto xhat = std::make_shared<std::vector<double>>(xd.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += row[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (row[i] - mu) * rs;
            (*xhat)[r * d + i] = xh;
            out[r * d + i] = gd[i] * xh + bd[i];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias},
                       [x, gain, bias, xhat, rstd, rows, d](std::span<const double> g) {
                           const auto gd = gain.data();
                           if (wants_grad(gain) || wants_grad(bias)) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t i = 0; i < d; ++i) {
                                       if (wants_grad(gain)) grad_buffer(gain)[i] += g[r * d + i] * (*xhat)[r * d + i];
                                       if (wants_grad(bias)) grad_buffer(bias)[i] += g[r * d + i];
                                   }
                               }
                           }
                           if (!wants_grad(x)) return;
                           auto& gx = grad_buffer(x);
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t i = 0; i < d; ++i) {
                                   const double dxh = g[r * d + i] * gd[i];
                                   s1 += dxh;
                                   s2 += dxh * (*xhat)[r * d + i];
                               }
                               for (std::size_t i = 0; i < d; ++i) {
                                   const double dxh = g[r * d + i] * gd[i];
                                   gx[r * d + i] += (*rstd)[r] * (dxh - inv_d * s1 - (*xhat)[r * d + i] * inv_d * s2);
                               }
                           }
                       });
}

namespace {

struct Tap {
    std::size_t i0, i1;
    double w0, w1;
};

std::vector<Tap> upsample_taps(std::size_t in_extent, UpsampleMode mode) {
    std::vector<Tap> taps(2 * in_extent);
    for (std::size_t o = 0; o < taps.size(); ++o) {
        if (mode == UpsampleMode::nearest) {
            taps[o] = {o / 2, o / 2, 1.0, 0.0};
            continue;
        }
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 > in_extent - 1) i0 = in_extent - 1;
        const std::size_t i1 = std::min(i0 + 1, in_extent - 1);
        const double frac = src - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
}

}  // namespace

Tensor upsample2x(const Tensor& x, UpsampleMode mode) {
    require_rank(x, 3, "upsample2x");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == 0 || w == 0) throw DimensionError("upsample2x: empty spatial extent");
    const auto ty = upsample_taps(h, mode);
    const auto tx = upsample_taps(w, mode);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<double> out(c * oh * ow);
    const auto xd = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xd.data() + ch * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const Tap& a = ty[oy];
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const Tap& b = tx[ox];
                out[(ch * oh + oy) * ow + ox] =
                    a.w0 * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1]) +
                    a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
            }
        }
    }
    return make_result({c, oh, ow}, std::move(out), {x}, [x, ty, tx, c, h, w, oh, ow](std::span<const double> g) {
        auto& gx = grad_buffer(x);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* dst = gx.data() + ch * h * w;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const Tap& a = ty[oy];
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const Tap& b = tx[ox];
                    const double v = g[(ch * oh + oy) * ow + ox];
                    dst[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                    dst[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                    dst[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                    dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
                }
            }
        }
    });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (auto& m : *mask) m = rng.uniform() < p ? 0.0 : keep_scale;
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * (*mask)[i];
    return make_result(x.shape(), std::move(out), {x}, [x, mask](std::span<const double> g) {
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    const auto xd = x.data();
    return make_result(std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x},
                       [x](std::span<const double> g) {
                           auto& gx = grad_buffer(x);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                       });
}

Tensor gather(const Tensor& x, Shape shape, std::shared_ptr<const std::vector<std::size_t>> indices) {
    if (shape_numel(shape) != indices->size()) throw DimensionError("gather: index count does not match shape");
    const auto xd = x.data();
    std::vector<double> out(indices->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t k = (*indices)[i];
        if (k >= xd.size()) throw DimensionError("gather: index out of range");
        out[i] = xd[k];
    }
    return make_result(std::move(shape), std::move(out), {x}, [x, indices](std::span<const double> g) {
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < indices->size(); ++i) gx[(*indices)[i]] += g[i];
    });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_rank(x, 2, "slice_rows");
    const std::size_t n = x.dim(1);
    if (begin >= end || end > x.dim(0)) throw DimensionError("slice_rows: bad range");
    const auto xd = x.data();
    std::vector<double> out(xd.begin() + static_cast<long>(begin * n), xd.begin() + static_cast<long>(end * n));
    return make_result({end - begin, n}, std::move(out), {x}, [x, begin, n](std::span<const double> g) {
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
    });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    require_rank(x, 2, "slice_cols");
    const std::size_t m = x.dim(0), n = x.dim(1), w = end - begin;
    if (begin >= end || end > n) throw DimensionError("slice_cols: bad range");
    const auto xd = x.data();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xd[i * n + begin + j];
    return make_result({m, w}, std::move(out), {x}, [x, begin, m, n, w](std::span<const double> g) {
        auto& gx = grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const std::size_t n = parts.front().shape().back();
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (p.rank() > 2 || p.shape().back() != n) throw DimensionError("concat_rows: column mismatch");
        offsets.push_back(out.size());
        rows += p.numel() / n;
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return make_result({rows, n}, std::move(out), parts, [parts, offsets](std::span<const double> g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (!wants_grad(parts[k])) continue;
            auto& gp = grad_buffer(parts[k]);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t m = parts.front().dim(0);
    std::size_t n = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != m) throw DimensionError("concat_cols: row mismatch");
        offsets.push_back(n);
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pd = parts[k].data();
        const std::size_t w = parts[k].dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + offsets[k] + j] = pd[i * w + j];
    }
    return make_result({m, n}, std::move(out), parts, [parts, offsets, m, n](std::span<const double> g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (!wants_grad(parts[k])) continue;
            auto& gp = grad_buffer(parts[k]);
            const std::size_t w = parts[k].dim(1);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * n + offsets[k] + j];
        }
    });
}

Tensor l2_normalize(const Tensor& v) {
    const auto vd = v.data();
    double sq = 0.0;
    for (double e : vd) sq += e * e;
    const double norm = std::sqrt(sq);
    if (norm == 0.0) return reshape(v, v.shape());
    std::vector<double> out(vd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vd[i] / norm;
    auto result = make_result(v.shape(), std::move(out), {v}, nullptr);
    if (result.requires_grad()) {
        result.node()->backward = [v, y = result.data(), norm](std::span<const double> g) {
            double dot = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
            auto& gv = grad_buffer(v);
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += (g[i] - y[i] * dot) / norm;
        };
    }
    return result;
}

Tensor euclidean_distance(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw DimensionError("euclidean_distance: length mismatch");
    const auto ad = a.data();
    const auto bd = b.data();
    double sq = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) sq += (ad[i] - bd[i]) * (ad[i] - bd[i]);
    const double dist = std::sqrt(sq);
    return make_result({}, {dist}, {a, b}, [a, b, dist](std::span<const double> g) {
        if (dist == 0.0) return;  // subgradient 0 at coincident points
        const auto ad = a.data();
        const auto bd = b.data();
        const double s = g[0] / dist;
        if (wants_grad(a)) {
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (ad[i] - bd[i]);
        }
        if (wants_grad(b)) {
            auto& gb = grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (ad[i] - bd[i]);
        }
    });
}

}  // namespace ordistage
