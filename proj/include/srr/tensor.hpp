#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "srr/common.hpp"

namespace srr {

namespace detail {
// Allocator whose value-initialization is a no-op, so vector::resize does
// not zero-fill. Tensor constructors still zero explicitly; Tensor::uninit
// skips it for outputs that are fully overwritten.
template <class T>
struct UninitAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = UninitAlloc<U>;
    };
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};
}  // namespace detail

// Dense row-major tensor of rank <= 4. Rank-4 tensors follow the
// (batch, channel, height, width) convention used throughout the network.
template <class S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        for (int d : shape_) check(d > 0, "tensor dimensions must be strictly positive");
        data_.assign(numel_of(shape_), S(0));
    }
    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    // Allocated but not zero-filled; every element must be written.
    static Tensor uninit(std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        for (int d : t.shape_) check(d > 0, "tensor dimensions must be strictly positive");
        t.data_.resize(static_cast<size_t>(numel_of(t.shape_)));
        return t;
    }

    static Tensor full(std::vector<int> shape, S v) {
        Tensor t = uninit(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    S& at(int n, int c, int h, int w) {
        assert(rank() == 4);
        return data_[((static_cast<int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const S& at(int n, int c, int h, int w) const {
        return const_cast<Tensor*>(this)->at(n, c, h, w);
    }
    S& at(int i, int j, int k) {
        assert(rank() == 3);
        return data_[(static_cast<int64_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    const S& at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }
    S& at(int i, int j) {
        assert(rank() == 2);
        return data_[static_cast<int64_t>(i) * shape_[1] + j];
    }
    const S& at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

    // Same data, new shape; element count must match.
    Tensor reshaped(std::vector<int> shape) const {
        check(numel_of(shape) == numel(), "reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const S& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> t;
        t.set_shape_raw(shape_, data_.size());
        for (size_t i = 0; i < data_.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<T>(data_[i]);
        return t;
    }
    void set_shape_raw(const std::vector<int>& shape, size_t n) {
        shape_ = shape;
        data_.resize(n);
    }

    using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
    using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
    ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
    ConstArrayMap array() const {
        return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

  private:
    std::vector<int> shape_;
    std::vector<S, detail::UninitAlloc<S>> data_;
};

template <class S>
Tensor<S> random_normal(std::vector<int> shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal(mean, stddev));
    return t;
}

template <class S>
Tensor<S> random_uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<S> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

}  // namespace srr
