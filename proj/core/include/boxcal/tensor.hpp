#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace boxcal::nn {

/// Dense n-dimensional array, row-major with the last dimension fastest.
/// Single precision for training; instantiate with double for
/// gradient-check builds. The gradient buffer is a lazily allocated
/// tensor of identical shape.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel(), T(0));
    }
    Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
        data_.assign(numel(), fill);
    }

    Tensor(const Tensor& o) : shape_(o.shape_), data_(o.data_) {
        if (o.grad_) grad_ = std::make_unique<Tensor>(*o.grad_);
    }
    Tensor& operator=(const Tensor& o) {
        if (this != &o) {
            shape_ = o.shape_;
            data_ = o.data_;
            grad_ = o.grad_ ? std::make_unique<Tensor>(*o.grad_) : nullptr;
        }
        return *this;
    }
    Tensor(Tensor&&) noexcept = default;
    Tensor& operator=(Tensor&&) noexcept = default;

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }

    size_t numel() const {
        if (shape_.empty()) return 0;
        size_t n = 1;
        for (int d : shape_) n *= static_cast<size_t>(d);
        return n;
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T operator[](size_t i) const { return data_[i]; }
    T& operator[](size_t i) { return data_[i]; }

    // C×H×W accessors (the layout every network tensor uses)
    T at(int c, int h, int w) const { return data_[idx3(c, h, w)]; }
    T& at(int c, int h, int w) { return data_[idx3(c, h, w)]; }
    size_t idx3(int c, int h, int w) const {
        return (static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w;
    }

    bool has_grad() const { return grad_ != nullptr; }
    Tensor& grad() {
        if (!grad_) grad_ = std::make_unique<Tensor>(shape_);
        return *grad_;
    }
    const Tensor& grad() const {
        if (!grad_) throw std::logic_error("Tensor: gradient was never allocated");
        return *grad_;
    }
    void zero_grad() {
        if (grad_) grad_->fill(T(0));
    }

    void fill(T v) { data_.assign(numel(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + ")";
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
    std::unique_ptr<Tensor> grad_;
};

}  // namespace boxcal::nn
