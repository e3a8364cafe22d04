#include "ordistage/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>
#include <utility>

#include "ordistage/errors.hpp"

namespace ordistage {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(m * n);
    for (const auto& row : rows) {
        if (row.size() != n) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    if (!node_) throw ContractError("use of undefined tensor");
    node_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::vector<double> Tensor::grad() const {
    if (!node_) throw ContractError("use of undefined tensor");
    if (node_->grad.size() == node_->data.size()) return node_->grad;
    return std::vector<double>(node_->data.size(), 0.0);
}

std::span<double> Tensor::mutable_grad() {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->ensure_grad();
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

std::vector<detail::NodePtr> tape_order(const Tensor& root) {
    std::vector<detail::NodePtr> order;
    if (!root.defined() || !root.node()->requires_grad) return order;
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS; deep transformer graphs overflow naive recursion.
    std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const auto& parent = node->parents[next++];
            if (parent->requires_grad && visited.insert(parent.get()).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void Tensor::backward() const {
    if (!node_) throw ContractError("backward() on undefined tensor");
    if (node_->data.size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(node_->shape));
    }
    if (!node_->requires_grad) throw ContractError("backward() on a tensor that is not on the tape");

    const auto order = tape_order(*this);
    // Interior gradients are per-pass scratch; only leaves accumulate.
    for (const auto& node : order) {
        if (node->backward) node->grad.assign(node->data.size(), 0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto& node = *it;
        if (node->backward) node->backward(node->grad);
    }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

namespace {
template <class Range>
Tensor make_result_impl(Shape shape, std::vector<double> values, const Range& inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || wants_grad(t);
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& t : inputs) {
        if (wants_grad(t)) node.parents.push_back(t.node());
    }
    node.backward = std::move(backward);
    return out;
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   BackwardFn backward) {
    return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
    return make_result_impl(std::move(shape), std::move(values), inputs, std::move(backward));
}

}  // namespace detail

}  // namespace ordistage
