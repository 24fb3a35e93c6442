#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "kbrw/rng.hpp"

namespace kbrw {

/// Monte Carlo estimate with its standard error and provenance.
struct EstimateWithCI {
  double value = 0.0;
  double std_error = 0.0;
  double n_effective = 0.0;
  std::uint64_t replicas = 0;
  std::uint64_t truncated_count = 0;
  double truncated_fraction = 0.0;
  std::string seed_schedule_id{kSeedScheduleId};

  double lower(double z = 1.96) const { return value - z * std_error; }
  double upper(double z = 1.96) const { return value + z * std_error; }
};

/// |a - b| in units of the pooled standard error. Returns 0 when both are exact
/// and equal, +inf when both are exact and different.
inline double pooled_z(const EstimateWithCI& a, const EstimateWithCI& b) {
  const double se = std::hypot(a.std_error, b.std_error);
  const double d = std::abs(a.value - b.value);
  if (se == 0.0) return d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return d / se;
}

/// |estimate - exact| in standard errors.
inline double z_score(const EstimateWithCI& a, double exact) {
  const double d = std::abs(a.value - exact);
  if (a.std_error == 0.0) return d < 1e-12 * (1.0 + std::abs(exact)) ? 0.0 : std::numeric_limits<double>::infinity();
  return d / a.std_error;
}

/// Streaming mean/variance (Welford) with an order-deterministic merge.
class MeanAccumulator {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  /// Records a replica that produced no usable value.
  void add_truncated() { ++truncated_; }

  /// Adds a value that is only a partial (censored) observation.
  void add_censored(double x) {
    add(x);
    ++censored_;
  }

  void merge(const MeanAccumulator& o) {
    truncated_ += o.truncated_;
    censored_ += o.censored_;
    if (o.n_ == 0) return;
    if (n_ == 0) {
      n_ = o.n_;
      mean_ = o.mean_;
      m2_ = o.m2_;
      return;
    }
    const double na = static_cast<double>(n_), nb = static_cast<double>(o.n_);
    const double delta = o.mean_ - mean_;
    const double n = na + nb;
    mean_ += delta * nb / n;
    m2_ += o.m2_ + delta * delta * na * nb / n;
    n_ += o.n_;
  }

  std::uint64_t count() const { return n_; }
  std::uint64_t truncated() const { return truncated_; }
  std::uint64_t censored() const { return censored_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double std_error() const { return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }

  EstimateWithCI estimate() const {
    EstimateWithCI e;
    e.value = mean_;
    e.std_error = std_error();
    e.n_effective = static_cast<double>(n_);
    e.replicas = n_ + truncated_;
    e.truncated_count = truncated_ + censored_;
    e.truncated_fraction = e.replicas ? static_cast<double>(truncated_) / static_cast<double>(e.replicas) : 0.0;
    return e;
  }

 private:
  std::uint64_t n_ = 0;
  std::uint64_t truncated_ = 0;
  std::uint64_t censored_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// Mean accumulator that also tracks the effective sample size of the values
/// read as importance weights, (sum w)^2 / sum w^2.
class WeightAccumulator {
 public:
  void add(double w) {
    mean_.add(w);
    sum_ += w;
    sum_sq_ += w * w;
  }
  void add_truncated() { mean_.add_truncated(); }
  void merge(const WeightAccumulator& o) {
    mean_.merge(o.mean_);
    sum_ += o.sum_;
    sum_sq_ += o.sum_sq_;
  }
  double effective_sample_size() const { return sum_sq_ > 0.0 ? sum_ * sum_ / sum_sq_ : 0.0; }
  EstimateWithCI estimate() const {
    auto e = mean_.estimate();
    e.n_effective = effective_sample_size();
    return e;
  }
  const MeanAccumulator& mean() const { return mean_; }

 private:
  MeanAccumulator mean_;
  double sum_ = 0.0;
  double sum_sq_ = 0.0;
};

/// Fixed-length vector of mean accumulators (one per grid point).
class VectorAccumulator {
 public:
  VectorAccumulator() = default;
  explicit VectorAccumulator(std::size_t n) : acc_(n) {}

  void add(const std::vector<double>& xs) {
    if (acc_.empty()) acc_.resize(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) acc_[i].add(xs[i]);
  }
  /// Partial observation: values are kept but the replica is flagged.
  void add_censored(const std::vector<double>& xs) {
    add(xs);
    ++censored_;
  }
  void add_truncated() { ++truncated_; }
  void merge(const VectorAccumulator& o) {
    if (acc_.empty()) acc_.resize(o.acc_.size());
    for (std::size_t i = 0; i < o.acc_.size(); ++i) acc_[i].merge(o.acc_[i]);
    truncated_ += o.truncated_;
    censored_ += o.censored_;
  }
  std::size_t size() const { return acc_.size(); }
  std::uint64_t truncated() const { return truncated_; }
  EstimateWithCI estimate(std::size_t i) const {
    auto e = acc_[i].estimate();
    e.replicas += truncated_;
    e.truncated_count = truncated_ + censored_;
    e.truncated_fraction = e.replicas ? static_cast<double>(truncated_) / static_cast<double>(e.replicas) : 0.0;
    return e;
  }

 private:
  std::vector<MeanAccumulator> acc_;
  std::uint64_t truncated_ = 0;
  std::uint64_t censored_ = 0;
};

/// Ratio a/b of two independent estimates by the delta method.
inline EstimateWithCI ratio_estimate(const EstimateWithCI& a, const EstimateWithCI& b) {
  EstimateWithCI r = a;
  r.value = a.value / b.value;
  const double ra = a.value != 0.0 ? a.std_error / a.value : 0.0;
  const double rb = b.std_error / b.value;
  r.std_error = std::abs(r.value) * std::hypot(ra, rb);
  if (a.value == 0.0) r.std_error = a.std_error / std::abs(b.value);
  return r;
}

}  // namespace kbrw
