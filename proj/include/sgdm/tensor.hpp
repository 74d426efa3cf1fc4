#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sgdm/rng.hpp"

namespace sgdm {

// Dense row-major tensor. Images are stored CHW, batches NCHW.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
        data.assign(numel_of(shape), S(0));
    }
    Tensor(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)), data(std::move(values)) {
        if (data.size() != numel_of(shape)) throw std::invalid_argument("tensor shape/data size mismatch");
    }

    static size_t numel_of(const std::vector<int>& shp) {
        size_t n = 1;
        for (int d : shp) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& operator[](size_t i) { return data[i]; }
    const S& operator[](size_t i) const { return data[i]; }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(S(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

template <typename S>
Tensor<S> randn_like_shape(const std::vector<int>& shape, Rng& rng) {
    Tensor<S> t(shape);
    for (auto& v : t.data) v = static_cast<S>(rng.normal());
    return t;
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace sgdm
