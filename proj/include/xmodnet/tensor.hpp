#ifndef XMODNET_TENSOR_HPP
#define XMODNET_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmodnet {

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, grads
/// accumulate into the shared node. Use clone() for a deep copy. Values
/// are stored contiguously; the last axis varies fastest.
template <typename T>
class Tensor {
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;        // empty until first accumulation
        bool requires_grad = false;
        bool is_leaf = true;        // false for op outputs; backward() resets those
    };

public:
    Tensor() : node_(std::make_shared<Node>()) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), T(0));
        node_->requires_grad = requires_grad;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar_of(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        for (T& v : t.node_->data) v = value;
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    std::span<T> values() { return node_->data; }
    std::span<const T> values() const { return node_->data; }
    T* data() { return node_->data.data(); }
    const T* data() const { return node_->data.data(); }

    T operator[](std::size_t i) const { return node_->data[i]; }
    T& operator[](std::size_t i) { return node_->data[i]; }

    /// Value of a single-element tensor.
    T item() const {
        if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool is_leaf() const { return node_->is_leaf; }
    void mark_as_output() { node_->is_leaf = false; }

    bool has_grad() const { return !node_->grad.empty(); }

    /// Gradient buffer, allocated (zeroed) on first access.
    std::span<T> grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
        return node_->grad;
    }
    std::span<const T> grad_view() const {
        static const std::vector<T> empty;
        return node_->grad.empty() ? std::span<const T>(empty) : std::span<const T>(node_->grad);
    }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    }

    /// Deep copy of values (grad and flags are not copied).
    Tensor clone() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    bool all_finite() const {
        for (T v : node_->data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    std::shared_ptr<Node> node_;
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

} // namespace xmodnet

#endif // XMODNET_TENSOR_HPP
