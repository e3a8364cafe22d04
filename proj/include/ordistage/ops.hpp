#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "ordistage/random.hpp"
#include "ordistage/tensor.hpp"

namespace ordistage {

// Differentiable tensor operations. Every op records itself on the graph when
// grad mode is on and any input requires a gradient. Binary elementwise ops
// require equal shapes; a rank-0 operand is the only broadcast allowed.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// x[m×k]·w[k×n] + b[n]. A rank-1 x is treated as a single row and the
/// result is rank-1 as well.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

/// 2-D cross-correlation of x[C_in×H×W] with w[C_out×C_in×kh×kw] plus b[C_out].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);

enum class ElementwiseOp { add, sub, mul, relu, sigmoid, gelu };

/// Unary ops ignore `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Exact form x·Φ(x) with the Gaussian CDF.
Tensor gelu(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum of equally shaped tensors.
Tensor add_n(const std::vector<Tensor>& terms);

Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis; gain and bias have that axis' extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

enum class UpsampleMode { nearest, bilinear };

/// Fixed 2× spatial upsampling of x[C×H×W]. Bilinear uses half-pixel
/// centres with edge clamping.
Tensor upsample2x(const Tensor& x, UpsampleMode mode);

/// Inverted dropout: survivors are scaled by 1/(1-p) during training.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);

/// out.flat[i] = x.flat[indices[i]]; gradients scatter back. Any fixed
/// re-indexing (patch extraction, permutations, slicing) is expressed this way.
Tensor gather(const Tensor& x, Shape shape, std::shared_ptr<const std::vector<std::size_t>> indices);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// v / ‖v‖₂. A zero vector is passed through unchanged.
Tensor l2_normalize(const Tensor& v);
Tensor euclidean_distance(const Tensor& a, const Tensor& b);

}  // namespace ordistage
