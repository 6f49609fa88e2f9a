#include "agentalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "agentalign/errors.hpp"
#include "agentalign/numeric.hpp"

namespace agentalign {

namespace {

Eigen::MatrixXd zeros_like(const ToyPolicy& p) {
  return Eigen::MatrixXd::Zero(p.logits().rows(), p.logits().cols());
}

EncodedSequence bind(const ToyPolicy& p, std::string_view question, std::span<const TokenId> y) {
  check_sequence(p, y);
  return {p.context_of(question), {y.begin(), y.end()}};
}

LossValue finish(const LogProbTable& table, double value, const Eigen::MatrixXd& counts) {
  if (!std::isfinite(value)) throw LossError(LossError::Kind::NonFiniteLoss, "loss evaluated to a non-finite value");
  return {value, table.gradient_from_counts(counts)};
}

LossValue listwise_loss(const ToyPolicy& p, const ToyPolicy& ref, const EncodedRankedSample& enc,
                        std::span<const std::size_t> order, std::size_t k, double beta, double weight) {
  const LogProbTable pt(p);
  const LogProbTable rt(ref);
  const auto ref_lp = reference_log_probs(rt, enc.items);
  Eigen::MatrixXd counts = zeros_like(p);
  const double value = accumulate_listwise(pt, enc.items, ref_lp, order, k, beta, weight, counts);
  return finish(pt, value, counts);
}

}  // namespace

Beta::Beta(double value) : value_(value) {
  if (!(value > 0.0) || !std::isfinite(value)) throw std::invalid_argument("beta must be positive and finite");
}

MixCoefficients::MixCoefficients(double alpha1, double alpha2) : alpha1_(alpha1), alpha2_(alpha2) {
  if (!(alpha1 >= 0.0 && alpha1 <= 1.0 && alpha2 >= 0.0 && alpha2 <= 1.0) ||
      std::abs(alpha1 + alpha2 - 1.0) > 1e-12) {
    throw std::invalid_argument("mix coefficients must lie in [0, 1] and sum to 1");
  }
}

ListwiseResult top_k_listwise_nll(const Eigen::Ref<const Eigen::VectorXd>& rewards, std::size_t k) {
  const auto n = static_cast<std::size_t>(rewards.size());
  if (k > n) throw std::invalid_argument("k exceeds the number of ranked items");
  ListwiseResult out;
  out.d_rewards = Eigen::VectorXd::Zero(rewards.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto tail_begin = static_cast<Eigen::Index>(i + 1);
    const Eigen::Index tail_len = rewards.size() - tail_begin;
    if (tail_len == 0) continue;
    const auto tail = rewards.segment(tail_begin, tail_len);
    const double lse = log_sum_exp(tail);
    const double z = lse - rewards(static_cast<Eigen::Index>(i));
    out.value += softplus(z);
    const double s = sigmoid(z);
    out.d_rewards(static_cast<Eigen::Index>(i)) -= s;
    out.d_rewards.segment(tail_begin, tail_len).array() += s * (tail.array() - lse).exp();
  }
  return out;
}

double plackett_luce_factor(const Eigen::Ref<const Eigen::VectorXd>& rewards, std::size_t i) {
  const auto begin = static_cast<Eigen::Index>(i);
  return std::exp(rewards(begin) - log_sum_exp(rewards.segment(begin, rewards.size() - begin)));
}

EncodedSequence encode_trajectory(const ToyPolicy& p, std::string_view question, const Trajectory& t) {
  return {p.context_of(question), encode(p.vocab(), serialize_steps(t))};
}

EncodedRankedSample encode_ranked_sample(const ToyPolicy& p, const RankedSample& s) {
  EncodedRankedSample enc;
  enc.k = s.k();
  const std::size_t ctx = p.context_of(s.question);
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& item = s.item(i);
    enc.items.push_back({ctx, encode(p.vocab(), preference_sequence_text(item))});
    enc.dependency.push_back(dependency_score(item));
    enc.labels.push_back(item.label);
    texts.push_back(serialize_trajectory(item.trajectory) + "\n" + format_prefix(item.prefix));
  }
  enc.full_order.resize(s.size());
  std::iota(enc.full_order.begin(), enc.full_order.end(), std::size_t{0});
  std::stable_sort(enc.full_order.begin(), enc.full_order.end(), [&](std::size_t a, std::size_t b) {
    if (enc.dependency[a] != enc.dependency[b]) return enc.dependency[a] > enc.dependency[b];
    if (enc.labels[a] != enc.labels[b]) return enc.labels[a] == Label::Win;
    return texts[a] < texts[b];
  });
  return enc;
}

std::vector<double> reference_log_probs(const LogProbTable& ref, std::span<const EncodedSequence> items) {
  std::vector<double> out;
  out.reserve(items.size());
  for (const auto& y : items) out.push_back(ref.log_prob(y));
  return out;
}

double accumulate_listwise(const LogProbTable& policy, std::span<const EncodedSequence> items,
                           std::span<const double> ref_log_probs, std::span<const std::size_t> order,
                           std::size_t k, double beta, double weight, Eigen::MatrixXd& counts) {
  Eigen::VectorXd rewards(static_cast<Eigen::Index>(order.size()));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t i = order[pos];
    rewards(static_cast<Eigen::Index>(pos)) = beta * (policy.log_prob(items[i]) - ref_log_probs[i]);
  }
  const auto result = top_k_listwise_nll(rewards, k);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const double d = result.d_rewards(static_cast<Eigen::Index>(pos));
    if (d != 0.0) policy.add_transitions(counts, items[order[pos]], weight * beta * d);
  }
  return weight * result.value;
}

double accumulate_nll(const LogProbTable& policy, const EncodedSequence& y, double weight,
                      Eigen::MatrixXd& counts) {
  policy.add_transitions(counts, y, -weight);
  return -weight * policy.log_prob(y);
}

LossValue trajectory_nll(const ToyPolicy& p, std::string_view question, const Trajectory& t) {
  const LogProbTable table(p);
  Eigen::MatrixXd counts = zeros_like(p);
  const double value = accumulate_nll(table, encode_trajectory(p, question, t), 1.0, counts);
  return finish(table, value, counts);
}

LossValue intra_sft_loss(const ToyPolicy& p, std::string_view question,
                         const std::optional<PreferencePrefix>& prefix, const Trajectory& y) {
  const std::string context_text =
      prefix ? format_prefix(*prefix) + " " + std::string(question) : std::string(question);
  const LogProbTable table(p);
  Eigen::MatrixXd counts = zeros_like(p);
  const EncodedSequence seq{p.context_of(context_text), encode(p.vocab(), serialize_steps(y))};
  const double value = accumulate_nll(table, seq, 1.0, counts);
  return finish(table, value, counts);
}

double reward(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
              std::span<const TokenId> y, Beta beta) {
  const auto seq = bind(p, question, y);
  check_sequence(ref, y);
  return beta.value() * (LogProbTable(p).log_prob(seq) - LogProbTable(ref).log_prob(seq));
}

double v_beta(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
              std::span<const TokenId> y_i, std::span<const TokenId> y_j, Beta beta) {
  const auto si = bind(p, question, y_i);
  const auto sj = bind(p, question, y_j);
  check_sequence(ref, y_i);
  check_sequence(ref, y_j);
  const LogProbTable pt(p);
  const LogProbTable rt(ref);
  const double ratio_i = pt.log_prob(si) - rt.log_prob(si);
  const double ratio_j = pt.log_prob(sj) - rt.log_prob(sj);
  return beta.value() * (ratio_j - ratio_i);
}

LossValue dpo_loss(const ToyPolicy& p, const ToyPolicy& ref, std::string_view question,
                   std::span<const TokenId> y_w, std::span<const TokenId> y_l, Beta beta) {
  EncodedRankedSample enc;
  enc.k = 1;
  enc.items = {bind(p, question, y_w), bind(p, question, y_l)};
  check_sequence(ref, y_w);
  check_sequence(ref, y_l);
  const std::array<std::size_t, 2> order{0, 1};
  return listwise_loss(p, ref, enc, order, 1, beta.value(), 1.0);
}

LossValue dadpo_loss(const ToyPolicy& p, const ToyPolicy& ref, const RankedSample& sample, Beta beta,
                     ListwiseReduction reduction) {
  if (sample.ordered_winners.empty()) throw LossError(LossError::Kind::EmptySample, "no ordered winners");
  const auto enc = encode_ranked_sample(p, sample);
  std::vector<std::size_t> order(enc.items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double weight = reduction == ListwiseReduction::Mean ? 1.0 / static_cast<double>(enc.k) : 1.0;
  return listwise_loss(p, ref, enc, order, enc.k, beta.value(), weight);
}

LossValue fdpo_loss(const ToyPolicy& p, const ToyPolicy& ref, const RankedSample& sample, Beta beta) {
  if (sample.size() < 2) throw LossError(LossError::Kind::EmptySample, "full ordering needs two items");
  const auto enc = encode_ranked_sample(p, sample);
  return listwise_loss(p, ref, enc, enc.full_order, enc.items.size() - 1, beta.value(), 1.0);
}

LossValue total_loss(const ToyPolicy& p, const ToyPolicy& ref, const Trajectory& t,
                     const RankedSample& sample, MixCoefficients coeffs, Beta beta) {
  const auto nll = trajectory_nll(p, sample.question, t);
  const auto inter = dadpo_loss(p, ref, sample, beta);
  return {coeffs.alpha1() * nll.value + coeffs.alpha2() * inter.value,
          coeffs.alpha1() * nll.gradient + coeffs.alpha2() * inter.gradient};
}

double check_gradient(const std::function<LossValue(const ToyPolicy&)>& loss_fn, const ToyPolicy& at,
                      double h) {
  const LossValue analytic = loss_fn(at);
  if (!std::isfinite(analytic.value)) throw LossError(LossError::Kind::NonFiniteLoss, "loss at the check point");
  ToyPolicy probe = at;
  double worst = 0.0;
  const auto& g = analytic.gradient;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    if ((g.row(r).array() == 0.0).all()) continue;
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      const double original = probe.logits()(r, c);
      probe.logits()(r, c) = original + h;
      const double plus = loss_fn(probe).value;
      probe.logits()(r, c) = original - h;
      const double minus = loss_fn(probe).value;
      probe.logits()(r, c) = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw LossError(LossError::Kind::NonFiniteLoss, "loss near the check point");
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double scale = std::max({std::abs(g(r, c)), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(g(r, c) - numeric) / scale);
    }
  }
  return worst;
}

std::vector<DescentRecord> descend(ToyPolicy& policy,
                                   const std::function<LossValue(const ToyPolicy&, std::size_t)>& objective,
                                   const DescentConfig& cfg) {
  std::vector<DescentRecord> records;
  records.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const LossValue current = objective(policy, step);
    if (!std::isfinite(current.value) || !current.gradient.allFinite()) {
      throw DivergedTraining("non-finite objective at step " + std::to_string(step));
    }
    DescentRecord rec{step, current.value, current.value, 0.0, false};
    double eta = cfg.step_size;
    for (std::size_t halving = 0; halving <= cfg.max_halvings; ++halving, eta *= 0.5) {
      ToyPolicy trial = policy;
      trial.logits() -= eta * current.gradient;
      const double value = objective(trial, step).value;
      if (std::isfinite(value) && value < current.value) {
        policy = std::move(trial);
        rec = {step, current.value, value, eta, true};
        break;
      }
    }
    records.push_back(rec);
  }
  return records;
}

}  // namespace agentalign
