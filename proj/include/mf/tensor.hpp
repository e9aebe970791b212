// Dense row-major tensor carrier shared by every module.
//
// Deliberately thin: shape + flat storage + checked indexing + Eigen views.
// All heavy linear algebra happens through the map helpers so the numerical
// kernels stay in one place (Eigen) and the containers stay dumb.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf {

inline int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t s : shape) {
        if (s < 0) throw std::invalid_argument("tensor shape entries must be non-negative");
        n *= s;
    }
    return n;
}

template <class T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor is a float carrier");

    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shp)
        : shape(std::move(shp)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}
    Tensor(std::vector<int64_t> shp, std::vector<T> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor data length does not match shape product");
    }

    static Tensor zeros(std::vector<int64_t> shp) { return Tensor(std::move(shp)); }
    static Tensor full(std::vector<int64_t> shp, T v) {
        Tensor t(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int64_t i) const {
        if (i < 0 || i >= rank()) throw std::out_of_range("tensor dim index");
        return shape[static_cast<size_t>(i)];
    }

    // Invariant check: product(shape) == data.size().
    void validate() const {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::logic_error("tensor invariant violated: shape/product mismatch");
    }

    T& operator()(int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator()(int64_t i) const { return data[static_cast<size_t>(i)]; }
    T& operator()(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    const T& operator()(int64_t r, int64_t c) const {
        return data[static_cast<size_t>(r * shape[1] + c)];
    }
    T& at3(int64_t a, int64_t b, int64_t c) {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    const T& at3(int64_t a, int64_t b, int64_t c) const {
        return data[static_cast<size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    T& at4(int64_t a, int64_t b, int64_t c, int64_t d) {
        return data[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    const T& at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return data[static_cast<size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }

    Tensor reshaped(std::vector<int64_t> shp) const {
        if (numel_of(shp) != numel())
            throw std::invalid_argument("reshape changes element count");
        Tensor t = *this;
        t.shape = std::move(shp);
        return t;
    }

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

    // 2-D view with explicit dimensions (works for any tensor whose trailing
    // dims flatten to `cols`).
    Eigen::Map<Mat> mat(int64_t rows, int64_t cols) {
        if (rows * cols != numel()) throw std::invalid_argument("mat view size mismatch");
        return Eigen::Map<Mat>(data.data(), rows, cols);
    }
    Eigen::Map<const Mat> mat(int64_t rows, int64_t cols) const {
        if (rows * cols != numel()) throw std::invalid_argument("mat view size mismatch");
        return Eigen::Map<const Mat>(data.data(), rows, cols);
    }
    Eigen::Map<Mat> mat() { return mat(shape.at(0), numel() / std::max<int64_t>(shape.at(0), 1)); }
    Eigen::Map<const Mat> mat() const {
        return mat(shape.at(0), numel() / std::max<int64_t>(shape.at(0), 1));
    }
    Eigen::Map<Vec> vec() { return Eigen::Map<Vec>(data.data(), numel()); }
    Eigen::Map<const Vec> vec() const { return Eigen::Map<const Vec>(data.data(), numel()); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <class T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <class T>
void require_finite(const Tensor<T>& t, const std::string& what) {
    if (!all_finite(t)) throw std::runtime_error("non-finite values in " + what);
}

// Extract row r of an (N x C) tensor as a plain vector.
template <class T>
std::vector<T> row_of(const Tensor<T>& t, int64_t r) {
    int64_t cols = t.numel() / t.shape.at(0);
    std::vector<T> out(static_cast<size_t>(cols));
    for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(c)] = t.data[static_cast<size_t>(r * cols + c)];
    return out;
}

}  // namespace mf
