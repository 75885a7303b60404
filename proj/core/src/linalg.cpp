#include "viti/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "viti/error.hpp"

namespace viti {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

void Matrix::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const float* brow = b.row(k).data();
            for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
        }
        float* orow = out.row(i).data();
        for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    }
    Matrix out(a.cols(), b.cols());
    matmul_tn_acc(a, b, out);
    return out;
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        throw ShapeError("matmul_tn_acc: " + shape_str(a) + "^T * " + shape_str(b) + " -> " +
                         shape_str(out));
    }
    // Accumulate per output row over the shared dimension.
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        float* orow = out.row(i).data();
        for (std::size_t j = 0; j < b.cols(); ++j) acc[j] = orow[j];
        for (std::size_t k = 0; k < a.rows(); ++k) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            const float* brow = b.row(k).data();
            for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aki * brow[j];
        }
        for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
    }
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
        }
    }
    return out;
}

void vecmat(std::span<const float> x, const Matrix& w, std::span<float> y) {
    if (x.size() != w.rows() || y.size() != w.cols()) {
        throw ShapeError("vecmat: len " + std::to_string(x.size()) + " * " + shape_str(w));
    }
    // Stack buffer is enough for every width the toy models use.
    constexpr std::size_t kStack = 1024;
    double stack_acc[kStack];
    std::vector<double> heap_acc;
    double* acc = stack_acc;
    if (w.cols() > kStack) {
        heap_acc.resize(w.cols());
        acc = heap_acc.data();
    }
    std::fill(acc, acc + w.cols(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double xk = x[k];
        const float* wrow = w.row(k).data();
        for (std::size_t j = 0; j < w.cols(); ++j) acc[j] += xk * wrow[j];
    }
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] = static_cast<float>(acc[j]);
}

void vecmat_t(std::span<const float> x, const Matrix& w, std::span<float> y) {
    if (x.size() != w.cols() || y.size() != w.rows()) {
        throw ShapeError("vecmat_t: len " + std::to_string(x.size()) + " * " + shape_str(w) + "^T");
    }
    for (std::size_t i = 0; i < w.rows(); ++i) y[i] = static_cast<float>(dot(x, w.row(i)));
}

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

void softmax_inplace(std::span<float> v) {
    if (v.empty()) return;
    float mx = v[0];
    for (float x : v) {
        if (std::isnan(x)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, x);
    }
    double sum = 0.0;
    for (float& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    const double inv = 1.0 / sum;
    for (float& x : v) x = static_cast<float>(x * inv);
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

float layer_norm_into(std::span<const float> x, std::span<const float> gain,
                      std::span<const float> bias, float eps, std::span<float> out) {
    const std::size_t n = x.size();
    if (gain.size() != n || bias.size() != n || out.size() != n) {
        throw ShapeError("layer_norm: length mismatch");
    }
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>((x[i] - mean) * rstd * gain[i] + bias[i]);
    }
    return static_cast<float>(rstd);
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain,
                              std::span<const float> bias, float eps) {
    std::vector<float> out(x.size());
    layer_norm_into(x, gain, bias, eps, out);
    return out;
}

float sigmoid(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

float silu(float x) { return x * sigmoid(x); }

std::vector<float> silu(std::span<const float> x) {
    std::vector<float> out(x.size());
    std::transform(x.begin(), x.end(), out.begin(), [](float v) { return silu(v); });
    return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

Rng Rng::derive(std::uint64_t seed, std::uint64_t index) {
    return Rng(splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL + 1)));
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    // Box-Muller on two fresh uniforms; u1 kept away from zero.
    const double u1 = (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw RangeError("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t r;
    do {
        r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
}

} // namespace viti
