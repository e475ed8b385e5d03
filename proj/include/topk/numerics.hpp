#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace topk {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;
using ActionId = std::int32_t;

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

inline void require_same_size(Index a, Index b, const char* what) {
  if (a != b) {
    throw InvalidArgument(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

// splitmix64 finalizer; used only to derive engine seeds from (seed, stream).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded random stream identified by (seed, stream-id).
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. Uniform and categorical draws are derived from the raw 64-bit
/// output here rather than through <random> distributions, whose algorithms
/// are implementation-defined; this keeps draws identical across toolchains.
/// A stream is owned by one worker at a time.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), engine_(mix64(mix64(seed) ^ mix64(~stream))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "RngStream::below: n must be positive");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// Independent child stream; the parent is not advanced.
  RngStream split(std::uint64_t child) const {
    return RngStream(mix64(seed_ ^ mix64(stream_ + 0x632be59bd9b4e019ULL)), child);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& x, const char* what) {
  if (!x.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite entry");
}

/// log(sum(exp(x))) with max subtraction.
template <typename Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& logits) {
  if (logits.size() == 0) throw InvalidArgument("log_sum_exp: empty input");
  require_finite(logits, "log_sum_exp");
  const double hi = logits.maxCoeff();
  return hi + std::log((logits.array() - hi).exp().sum());
}

/// Tempered softmax, exp(x_i / T) / sum_j exp(x_j / T).
template <typename Derived>
Vec softmax(const Eigen::MatrixBase<Derived>& logits, double temperature = 1.0) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("softmax: temperature must be positive and finite");
  }
  if (logits.size() == 0) throw InvalidArgument("softmax: empty input");
  require_finite(logits, "softmax");
  Vec scaled = logits / temperature;
  scaled.array() -= scaled.maxCoeff();
  Vec out = scaled.array().exp();
  out /= out.sum();
  return out;
}

template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& probs) {
  double h = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Inverse-CDF draw. `probs` must sum to 1 within 1e-9.
template <typename Derived>
Index sample_categorical(const Eigen::MatrixBase<Derived>& probs, RngStream& rng) {
  if (probs.size() == 0) throw InvalidArgument("sample_categorical: empty distribution");
  if ((probs.array() < 0.0).any() || !probs.allFinite()) {
    throw InvalidArgument("sample_categorical: negative or non-finite probability");
  }
  const double total = probs.sum();
  if (total <= 0.0) throw InvalidArgument("sample_categorical: degenerate (all-zero) distribution");
  if (std::abs(total - 1.0) > 1e-9) {
    throw InvalidArgument("sample_categorical: probabilities do not sum to 1");
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  Index last_positive = 0;
  for (Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  return last_positive;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

template <typename Derived>
Vec sigmoid(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return sigmoid(v); });
}

/// Uniform fill in [-scale, scale], column-major order.
template <typename Derived>
void fill_uniform(Eigen::DenseBase<Derived>& m, double scale, RngStream& rng) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-scale, scale);
}

/// Sample mean and unbiased variance; variance is 0 for fewer than two values.
struct MeanVar {
  double mean = 0.0;
  double variance = 0.0;
};

inline MeanVar mean_var(std::span<const double> xs) {
  MeanVar out;
  if (xs.empty()) return out;
  double sum = 0.0;
  for (double x : xs) sum += x;
  out.mean = sum / static_cast<double>(xs.size());
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.variance = ss / static_cast<double>(xs.size() - 1);
  return out;
}

// 64-bit FNV-1a, used for config and environment fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace topk
