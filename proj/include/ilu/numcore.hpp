#pragma once

// Dense tensors, stable loss kernels, counter-based randomness and the
// finite-difference oracle every analytic gradient in the library is checked
// against. All arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ilu/error.hpp"

namespace ilu {

/// Storage for dense values. The fixed alignment keeps vectorized reductions
/// over this memory in the same order on every allocation, which bit-exact
/// reproducibility depends on.
using DoubleBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Target value marking a position that carries no supervision.
inline constexpr std::int32_t kIgnoreTarget = -1;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::initializer_list<double> data)
      : Tensor(std::move(shape), std::span<const double>(data.begin(), data.size())) {}

  Tensor(std::vector<std::size_t> shape, std::span<const double> data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (element_count(shape_) != data_.size()) {
      throw ArgumentError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape product " +
                          std::to_string(element_count(shape_)));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    ILU_REQUIRE(axis < shape_.size(), "tensor axis out of range");
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-2 helpers; a rank-1 tensor is viewed as a single row.
  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? shape_[0] : (shape_.empty() ? 0 : 1);
  }
  std::size_t cols() const noexcept {
    return shape_.size() >= 2 ? data_.size() / std::max<std::size_t>(shape_[0], 1)
                              : data_.size();
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  DoubleBuffer& data() noexcept { return data_; }
  const DoubleBuffer& data() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  DoubleBuffer data_;
};

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

// Counter-based generator: the i-th draw is a pure function of
// (seed, stream, i), so equal keys give identical sequences everywhere.
// Distributions are implemented here rather than via <random>, whose
// distribution algorithms differ between standard libraries.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    key_ = mix(mix(seed_ ^ 0x243F6A8885A308D3ULL) ^ mix(stream_ + 0x13198A2E03707344ULL));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() {
    const std::uint64_t c = counter_++;
    return mix(key_ + c * 0x9E3779B97F4A7C15ULL) ^ mix(c ^ key_ ^ 0xA4093822299F31D0ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    ILU_REQUIRE(n > 0, "RngStream::below requires n > 0");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Standard normal via Box-Muller (one draw per call, no cached spare).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Derive an independent stream keyed by this stream's identity and a tag.
  RngStream fork(std::uint64_t tag) const { return RngStream(seed_, mix(stream_ ^ mix(tag + 1))); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor logit_grad;
  std::size_t supervised = 0;
};

inline double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline void softmax_row(std::span<const double> z, std::span<double> out) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = std::exp(z[j] - m);
    s += out[j];
  }
  for (double& v : out) v /= s;
}

inline std::size_t count_supervised(std::span<const std::int32_t> targets) {
  return static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](auto t) { return t != kIgnoreTarget; }));
}

inline void check_targets(const Tensor& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() != 2) throw ArgumentError("logits must be rank 2 [rows x classes]");
  if (logits.cols() < 2) throw ArgumentError("at least two classes required");
  if (targets.size() != logits.rows()) {
    throw ArgumentError("target count " + std::to_string(targets.size()) +
                        " does not match logit rows " + std::to_string(logits.rows()));
  }
  const auto classes = static_cast<std::int32_t>(logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto t = targets[i];
    if (t != kIgnoreTarget && (t < 0 || t >= classes)) {
      throw ArgumentError("target " + std::to_string(t) + " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (!logits.all_finite()) throw NumericError("non-finite logits");
}

/// Mean cross-entropy over supervised rows and its gradient w.r.t. logits.
/// Rows whose target is kIgnoreTarget contribute nothing.
inline CrossEntropyResult softmax_cross_entropy(const Tensor& logits,
                                                std::span<const std::int32_t> targets) {
  check_targets(logits, targets);
  const std::size_t n = count_supervised(targets);
  if (n == 0) throw ArgumentError("cross-entropy over a batch with no supervised rows");
  CrossEntropyResult out;
  out.supervised = n;
  out.logit_grad = Tensor::matrix(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    auto z = logits.row(r);
    auto g = out.logit_grad.row(r);
    out.loss += (log_sum_exp(z) - z[static_cast<std::size_t>(targets[r])]) * inv_n;
    softmax_row(z, g);
    g[static_cast<std::size_t>(targets[r])] -= 1.0;
    for (double& v : g) v *= inv_n;
  }
  return out;
}

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::span<const double> x,
    double h = 1e-4) {
  ILU_REQUIRE(h > 0.0, "finite-difference step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + h;
    const double fp = f(probe);
    probe[k] = saved - h;
    const double fm = f(probe);
    probe[k] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("non-finite function value at coordinate " + std::to_string(k));
    }
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  ILU_REQUIRE(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// ||a - b|| / max(||a||, ||b||); zero when both vectors are zero.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  ILU_REQUIRE(a.size() == b.size(), "relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(norm2(a), norm2(b));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace ilu
