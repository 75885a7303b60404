#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace viti {

/// Dense row-major float matrix. Storage is 32-bit; reductions in the
/// kernels below accumulate in double.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    void fill(float value);
    bool all_finite() const;

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Products. Each checks shapes and throws ShapeError on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// out += a^T * b (out must already be a.cols x b.cols)
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);

/// y = x * w for a single row vector x (len == w.rows).
void vecmat(std::span<const float> x, const Matrix& w, std::span<float> y);
/// y = x * w^T for a single row vector x (len == w.cols).
void vecmat_t(std::span<const float> x, const Matrix& w, std::span<float> y);

double dot(std::span<const float> a, std::span<const float> b);

/// Numerically stable softmax over each row. NaN input raises NumericError.
Matrix softmax_rows(const Matrix& m);
void softmax_inplace(std::span<float> v);

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain,
                              std::span<const float> bias, float eps);
/// Writes the normalized, affine-transformed vector and returns 1/sqrt(var + eps).
float layer_norm_into(std::span<const float> x, std::span<const float> gain,
                      std::span<const float> bias, float eps, std::span<float> out);

float sigmoid(float x);
float silu(float x);
std::vector<float> silu(std::span<const float> x);

/// Seeded pseudo-random stream. The algorithm is fixed (mt19937_64) and
/// identified by name in every artifact that records a seed.
class Rng {
public:
    static constexpr std::string_view algorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed);

    /// Independent stream keyed by (seed, index); used to give each worker or
    /// sample its own generator without depending on scheduling order.
    static Rng derive(std::uint64_t seed, std::uint64_t index);

    std::uint64_t seed() const { return seed_; }

    double uniform();
    double normal();
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    std::uint64_t next_u64() { return engine_(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

} // namespace viti
