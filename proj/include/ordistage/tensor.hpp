#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ordistage {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Receives the gradient of the op output and accumulates into its inputs.
using BackwardFn = std::function<void(std::span<const double> out_grad)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward;  // null for leaves

    std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major float64 tensor with optional participation in the
/// reverse-mode graph. Copies are shallow: two Tensor handles may share
/// one node, which is how parameters are updated in place by optimizers.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);

    bool has_grad() const;
    /// Gradient buffer; zeros of the right shape if nothing was accumulated yet.
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Reverse pass from a scalar. Leaf gradients accumulate (+=) across calls.
    void backward() const;

    /// Same values, no graph history, requires_grad off.
    Tensor detach() const;

    /// True when both handles refer to the same storage.
    bool same(const Tensor& other) const noexcept { return node_ == other.node_; }

    const detail::NodePtr& node() const noexcept { return node_; }
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    detail::NodePtr node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

/// Builds an op result. The backward closure is kept only when recording is
/// enabled and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

/// True when gradient should be accumulated into this op input.
inline bool wants_grad(const Tensor& t) { return t.defined() && t.node()->requires_grad; }

inline std::vector<double>& grad_buffer(const Tensor& t) { return t.node()->ensure_grad(); }

}  // namespace detail

/// Topologically ordered view of the graph below `root` (inputs first).
/// Each node appears once; only nodes that require gradients are listed.
std::vector<detail::NodePtr> tape_order(const Tensor& root);

}  // namespace ordistage
