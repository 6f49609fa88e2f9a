#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "agentalign/policy.hpp"
#include "agentalign/preference.hpp"

namespace agentalign {

// Strength of the reference-model regularization; positive and finite.
class Beta {
 public:
  explicit Beta(double value = 0.1);
  double value() const noexcept { return value_; }

 private:
  double value_;
};

struct LossValue {
  double value = 0.0;
  // d value / d logits, same shape as the policy logits.
  Eigen::MatrixXd gradient;
};

// Affine weights of the trajectory NLL and the listwise term; each in [0, 1]
// and summing to 1 within 1e-12.
class MixCoefficients {
 public:
  MixCoefficients() = default;
  MixCoefficients(double alpha1, double alpha2);

  double alpha1() const noexcept { return alpha1_; }
  double alpha2() const noexcept { return alpha2_; }

 private:
  double alpha1_ = 0.5;
  double alpha2_ = 0.5;
};

// How the K listwise terms of one ranked sample are combined.
enum class ListwiseReduction { Sum, Mean };

// ---------------------------------------------------------------------------
// Reward-space core. With rewards r ordered best-first, the loss is
//   sum_{i<k} -log sigma(-log sum_{j>i} exp(r_j - r_i))
//     = sum_{i<k} softplus(logsumexp_{j>i}(r_j) - r_i),
// i.e. the negative log of the top-k Plackett-Luce factors. Empty inner sums
// contribute 0.
struct ListwiseResult {
  double value = 0.0;
  Eigen::VectorXd d_rewards;
};

ListwiseResult top_k_listwise_nll(const Eigen::Ref<const Eigen::VectorXd>& rewards, std::size_t k);

// Plackett-Luce factor exp(r_i) / sum_{j>=i} exp(r_j) for position i of a
// best-first ranking.
double plackett_luce_factor(const Eigen::Ref<const Eigen::VectorXd>& rewards, std::size_t i);

// ---------------------------------------------------------------------------
// Encoded forms used by the training loops.

// Items of a ranked sample in global order (ordered winners, then rejected),
// each scored as its preference sequence under the question's bucket.
struct EncodedRankedSample {
  std::size_t k = 0;
  std::vector<EncodedSequence> items;
  std::vector<int> dependency;
  std::vector<Label> labels;
  // Indices into `items` sorted by descending dependency score (winners before
  // losers on ties, then by serialized text): the full order used by FDPO.
  std::vector<std::size_t> full_order;
};

EncodedRankedSample encode_ranked_sample(const ToyPolicy& p, const RankedSample& s);

EncodedSequence encode_trajectory(const ToyPolicy& p, std::string_view question, const Trajectory& t);

// Log-probabilities of each item under the (frozen) reference model.
std::vector<double> reference_log_probs(const LogProbTable& ref, std::span<const EncodedSequence> items);

// Adds weight * loss to the return value and weight * d loss / d log pi(item)
// into `counts` (see LogProbTable::gradient_from_counts). `order` lists item
// indices best-first; the first `k` positions get a listwise term.
double accumulate_listwise(const LogProbTable& policy, std::span<const EncodedSequence> items,
                           std::span<const double> ref_log_probs, std::span<const std::size_t> order,
                           std::size_t k, double beta, double weight, Eigen::MatrixXd& counts);

// weight * -log pi(y), gradient into counts.
double accumulate_nll(const LogProbTable& policy, const EncodedSequence& y, double weight,
                      Eigen::MatrixXd& counts);

// ---------------------------------------------------------------------------
// Objectives.

// Sum over steps of -log Pr(step | earlier steps, question): the NLL of the
// serialized steps (question line excluded) under the question's bucket.
LossValue trajectory_nll(const ToyPolicy& p, std::string_view question, const Trajectory& t);

// -log pi(y | prefix, question). The context bucket hashes
// "<formatted prefix> <question>"; without a prefix it hashes the question
// alone, which is plain SFT and equals trajectory_nll.
LossValue intra_sft_loss(const ToyPolicy& p, std::string_view question,
                         const std::optional<PreferencePrefix>& prefix, const Trajectory& y);

// beta * [log(pi(y_j)/ref(y_j)) - log(pi(y_i)/ref(y_i))].
double v_beta(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
              std::span<const TokenId> y_i, std::span<const TokenId> y_j, Beta beta);

// Implicit reward beta * log(pi(y)/ref(y)), without the partition term.
double reward(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
              std::span<const TokenId> y, Beta beta);

// -log sigma(beta * [log(pi/ref)(y_w) - log(pi/ref)(y_l)]).
LossValue dpo_loss(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
                   std::span<const TokenId> y_w, std::span<const TokenId> y_l, Beta beta);

// Dependency-aware listwise loss: each of the K ordered winners is preferred
// over every item ranked after it, and the rejected set is unordered.
LossValue dadpo_loss(const ToyPolicy& p, const ToyPolicy& ref, const RankedSample& sample, Beta beta,
                     ListwiseReduction reduction = ListwiseReduction::Sum);

// Full-order baseline: all M+N items ranked by dependency score, with a
// Plackett-Luce term for every position but the last.
LossValue fdpo_loss(const ToyPolicy& p, const ToyPolicy& ref, const RankedSample& sample, Beta beta);

// alpha1 * trajectory_nll(t) + alpha2 * dadpo_loss(sample).
LossValue total_loss(const ToyPolicy& p, const ToyPolicy& ref, const Trajectory& t,
                     const RankedSample& sample, MixCoefficients coeffs, Beta beta);

// Central finite differences with step h over every logit in a row that the
// analytic gradient touches. The error per entry is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3); returns the max.
// A loss whose analytic gradient is identically zero returns 0.
double check_gradient(const std::function<LossValue(const ToyPolicy&)>& loss_fn, const ToyPolicy& at,
                      double h = 1e-5);

// ---------------------------------------------------------------------------
// Gradient descent with a fixed step that is halved until the objective
// strictly decreases. Each step restarts from `step_size`.
struct DescentConfig {
  double step_size = 1.0;
  std::size_t steps = 100;
  std::size_t max_halvings = 40;
};

struct DescentRecord {
  std::size_t step = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double step_size = 0.0;
  bool accepted = false;
};

// Runs `cfg.steps` iterations. `objective` returns value and gradient at the
// given parameters; `batch` is the step index so callers can rotate
// mini-batches. Throws DivergedTraining on a non-finite value.
std::vector<DescentRecord> descend(ToyPolicy& policy,
                                   const std::function<LossValue(const ToyPolicy&, std::size_t)>& objective,
                                   const DescentConfig& cfg);

}  // namespace agentalign
