#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mte/errors.hpp"

namespace mte {

using Index = std::size_t;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

// Dense row-major tensor with shared storage. Copies of a Tensor alias the same
// buffer; use clone() for an independent copy. Tensors recorded on a tape are
// treated as immutable.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() : impl_(std::make_shared<TensorStorage<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorStorage<T>>()) {
        impl_->values.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorStorage<T>>()) {
        require(shape_numel(shape) == values.size(), ErrorKind::Dimension,
                "tensor shape " + shape_string(shape) + " does not hold " +
                    std::to_string(values.size()) + " values");
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const { return impl_->shape; }
    Index rank() const { return impl_->shape.size(); }
    Index dim(Index axis) const { return impl_->shape.at(axis); }
    Index size() const { return impl_->values.size(); }
    bool empty() const { return impl_->values.empty(); }

    // Rows/cols view a tensor as a matrix over its trailing extent.
    Index cols() const { return rank() == 0 ? 1 : impl_->shape.back(); }
    Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

    std::span<const T> data() const { return impl_->values; }
    std::span<T> data() { return impl_->values; }
    const T* ptr() const { return impl_->values.data(); }
    T* ptr() { return impl_->values.data(); }

    T operator[](Index i) const { return impl_->values[i]; }
    T& operator[](Index i) { return impl_->values[i]; }
    T at(Index r, Index c) const { return impl_->values[r * cols() + c]; }
    T& at(Index r, Index c) { return impl_->values[r * cols() + c]; }

    T item() const {
        require(size() == 1, ErrorKind::Dimension,
                "item() on tensor of shape " + shape_string(shape()));
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> grad() { return impl_->grad; }

    // Allocates (zeroed) on first use. Const because the handle, not the storage, is const.
    std::span<T> grad_buffer() const {
        if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), T(0));
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const {
        Tensor out(shape(), std::vector<T>(impl_->values));
        out.impl_->requires_grad = impl_->requires_grad;
        return out;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const TensorStorage<T>* storage() const { return impl_.get(); }

   private:
    std::shared_ptr<TensorStorage<T>> impl_;
};

// Ordered record of differentiable operations (define-by-run). Backward replays
// the recorded closures in exact reverse order; gradients accumulate with += at
// fan-in, so shared subexpressions receive the sum of their path gradients.
template <typename T>
class Tape {
   public:
    struct Node {
        std::string op;
        std::vector<Tensor<T>> inputs;
        Tensor<T> output;
        std::function<void()> backward;
    };

    void record(std::string op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                std::function<void()> backward) {
        nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
    }

    void backward(Tensor<T> loss) {
        require(loss.size() == 1, ErrorKind::Usage,
                "backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
        bool on_tape = false;
        for (const auto& node : nodes_)
            if (node.output.same_storage(loss)) on_tape = true;
        require(on_tape, ErrorKind::Usage, "backward() loss was not recorded on this tape");
        loss.grad_buffer()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->output.has_grad()) continue;
            it->backward();
        }
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    Index size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

   private:
    std::vector<Node> nodes_;
};

template <typename T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

template <typename T>
Tape<T>* active_tape() {
    return active_tape_slot<T>();
}

// Installs a tape as the recording target for the current thread. Without an
// active tape, ops compute values only (inference mode).
template <typename T>
class TapeScope {
   public:
    explicit TapeScope(Tape<T>& tape) : previous_(active_tape_slot<T>()) {
        active_tape_slot<T>() = &tape;
    }
    ~TapeScope() { active_tape_slot<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape<T>* previous_;
};

// Suspends recording for the current thread (teacher forwards, evaluation).
template <typename T>
class NoGradScope {
   public:
    NoGradScope() : previous_(active_tape_slot<T>()) { active_tape_slot<T>() = nullptr; }
    ~NoGradScope() { active_tape_slot<T>() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape<T>* previous_;
};

}  // namespace mte
