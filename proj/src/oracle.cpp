#include "gsbi/oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "gsbi/error.hpp"

namespace gsbi {
namespace {

// 8-point Gauss-Legendre on [-1, 1].
constexpr std::array<double, 8> kNodes = {-0.9602898564975363, -0.7966664774136267,
                                          -0.5255324099163290, -0.1834346424956498,
                                          0.1834346424956498,  0.5255324099163290,
                                          0.7966664774136267,  0.9602898564975363};
constexpr std::array<double, 8> kWeights = {0.1012285362903763, 0.2223810344533745,
                                            0.3137066458778873, 0.3626837833783620,
                                            0.3626837833783620, 0.3137066458778873,
                                            0.2223810344533745, 0.1012285362903763};

double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Latent logit offsets at the quadrature nodes, with their weights (sum 1).
struct Quadrature {
  std::array<double, 64> offset;
  std::array<double, 64> weight;
};

Quadrature latent_quadrature(const ProjectConfig& config) {
  const LatentPriorParams& p = config.latents;
  const SurrogateParams& s = config.surrogate;
  Quadrature q;
  for (int i = 0; i < 8; ++i) {
    const double mu = 0.5 * (p.friction.lo + p.friction.hi) + 0.5 * (p.friction.hi - p.friction.lo) * kNodes[i];
    for (int j = 0; j < 8; ++j) {
      const double tau = 0.5 * (p.torque.lo + p.torque.hi) + 0.5 * (p.torque.hi - p.torque.lo) * kNodes[j];
      q.offset[8 * i + j] = s.w_friction * (mu - 1.0) + s.w_torque * (tau - 35.0) / 5.0;
      q.weight[8 * i + j] = 0.25 * kWeights[i] * kWeights[j];
    }
  }
  return q;
}

double integrate(const Quadrature& q, double geometric_logit) {
  double p = 0.0;
  for (int k = 0; k < 64; ++k) p += q.weight[k] * logistic(geometric_logit + q.offset[k]);
  return p;
}

}  // namespace

double marginal_success_probability(const ProjectConfig& config, const ProductPoint& h,
                                    const LatentState& z) {
  const Quadrature q = latent_quadrature(config);
  return integrate(q, surrogate_geometric_logit(h, z, config.world, config.surrogate));
}

double evidence_success_probability(const ProjectConfig& config, const LatentState& z,
                                    const HandPrior& prior, Rng& rng, std::size_t samples) {
  if (samples == 0) fail(ErrorKind::InvalidInput, "evidence: need at least one sample");
  const Quadrature q = latent_quadrature(config);
  double sum = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const ProductPoint h = prior_sample(rng, prior);
    sum += integrate(q, surrogate_geometric_logit(h, z, config.world, config.surrogate));
  }
  return sum / static_cast<double>(samples);
}

double true_log_ratio(bool success, double p_given_hand, double p_evidence) {
  return success ? std::log(p_given_hand) - std::log(p_evidence)
                 : std::log1p(-p_given_hand) - std::log1p(-p_evidence);
}

std::vector<ReliabilityBin> reliability_bins(std::span<const double> predicted,
                                             std::span<const int> labels, int bins) {
  if (predicted.size() != labels.size() || predicted.empty() || bins < 1) {
    fail(ErrorKind::InvalidInput, "reliability_bins: need matching, non-empty inputs");
  }
  std::vector<std::size_t> order(predicted.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return predicted[a] < predicted[b]; });
  std::vector<ReliabilityBin> out;
  const std::size_t n = order.size();
  for (int b = 0; b < bins; ++b) {
    const std::size_t lo = n * b / bins, hi = n * (b + 1) / bins;
    if (hi <= lo) continue;
    ReliabilityBin bin;
    bin.low = predicted[order[lo]];
    bin.high = predicted[order[hi - 1]];
    for (std::size_t i = lo; i < hi; ++i) {
      bin.mean_predicted += predicted[order[i]];
      bin.observed += labels[order[i]] ? 1.0 : 0.0;
    }
    bin.count = hi - lo;
    bin.mean_predicted /= static_cast<double>(bin.count);
    bin.observed /= static_cast<double>(bin.count);
    out.push_back(bin);
  }
  return out;
}

Interval wilson_interval(std::size_t k, std::size_t n, double z) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double center = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

}  // namespace gsbi
