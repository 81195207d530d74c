#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gsbi/config.hpp"
#include "gsbi/distributions.hpp"
#include "gsbi/scene.hpp"

namespace gsbi {

// Reference quantities for the tractable task, where the scene geometry is
// pinned by the observation and only friction and torque stay unobserved.

/// p(S=1 | h, geometry of z): the surrogate logistic averaged over the
/// friction and torque prior with an 8 x 8 Gauss-Legendre rule.
double marginal_success_probability(const ProjectConfig& config, const ProductPoint& h,
                                    const LatentState& z);

/// p(S=1 | V) by Monte Carlo over `samples` hands from the prior.
double evidence_success_probability(const ProjectConfig& config, const LatentState& z,
                                    const HandPrior& prior, Rng& rng, std::size_t samples);

/// log p(S | h, V) - log p(S | V) from the two success probabilities.
double true_log_ratio(bool success, double p_given_hand, double p_evidence);

struct ReliabilityBin {
  double low = 0.0;  // predicted-probability range of the bin
  double high = 0.0;
  double mean_predicted = 0.0;
  double observed = 0.0;  // fraction of positive labels
  std::size_t count = 0;
};

/// Equal-count bins over the predicted probabilities.
std::vector<ReliabilityBin> reliability_bins(std::span<const double> predicted,
                                             std::span<const int> labels, int bins = 10);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Wilson score interval for k successes out of n.
Interval wilson_interval(std::size_t k, std::size_t n, double z = 1.959963984540054);

}  // namespace gsbi
