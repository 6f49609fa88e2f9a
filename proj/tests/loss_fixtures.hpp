#pragma once

// Random instances and brute-force oracles shared by the loss tests and the
// acceptance checks. The oracles recompute everything from raw logits.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "agentalign/losses.hpp"

namespace agentalign::testing {

using A = AgentKind;

// Sentinels, prefix tags, all twelve step literals and three payload words.
inline Vocab loss_vocab() {
  std::vector<std::string> words;
  for (AgentKind a : kAllAgents) words.push_back("⟨" + std::string(agent_name(a)) + ":");
  for (int s = 0; s <= 5; ++s) words.push_back(std::to_string(s) + "⟩");
  const auto& table = TokenTable::standard();
  for (AgentKind a : kAllAgents) {
    words.emplace_back(table.head_literal(a));
    words.emplace_back(table.end_literal(a));
  }
  for (const char* w : {"a", "b", "c"}) words.emplace_back(w);
  return Vocab::with_words(words);
}

inline std::string random_payload(std::mt19937_64& rng) {
  static const std::array<const char*, 3> words{"a", "b", "c"};
  std::string out;
  const int n = static_cast<int>(rng() % 3);
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += words[rng() % words.size()];
  }
  return out;
}

inline Trajectory random_trajectory(std::mt19937_64& rng, const std::string& q) {
  static const std::vector<std::vector<A>> shapes{
      {A::ResponseGenerator},
      {A::IntentReconstructor, A::ResponseGenerator, A::AnswerVerifier},
      {A::IntentReconstructor, A::KnowledgeRetriever, A::KnowledgeFilter, A::KnowledgeLocator,
       A::ResponseGenerator, A::AnswerVerifier},
  };
  std::vector<std::pair<A, std::string>> steps;
  for (A a : shapes[rng() % shapes.size()]) steps.emplace_back(a, random_payload(rng));
  return make_trajectory(q, steps);
}

inline ScoredTrajectory random_scored(std::mt19937_64& rng, const std::string& q, Label label) {
  ScoredTrajectory s;
  s.trajectory = random_trajectory(rng, q);
  for (A a : kAllAgents) s.prefix[a] = static_cast<int>(rng() % 6);
  s.prefix[A::ResponseGenerator] = kGeneratorScore;
  s.label = label;
  return s;
}

inline RankedSample random_sample(std::mt19937_64& rng, const std::string& q, std::size_t m, std::size_t n,
                           std::size_t k) {
  std::vector<ScoredTrajectory> wins;
  std::vector<ScoredTrajectory> losses;
  for (std::size_t i = 0; i < m; ++i) wins.push_back(random_scored(rng, q, Label::Win));
  for (std::size_t i = 0; i < n; ++i) losses.push_back(random_scored(rng, q, Label::Lose));
  return build_ranked_sample(q, wins, losses, k);
}

inline std::vector<TokenId> preference_tokens(const Vocab& v, const ScoredTrajectory& s) {
  return encode(v, preference_sequence_text(s));
}

// Log-probability computed directly from the logits, without the library's
// log-softmax table.
inline double oracle_log_prob(const ToyPolicy& p, std::size_t ctx, const std::vector<TokenId>& y) {
  const std::size_t v = p.vocab_size();
  double total = 0.0;
  TokenId prev = Vocab::kBos;
  for (TokenId t : y) {
    const Eigen::Index r = static_cast<Eigen::Index>(ctx * v + prev);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(p.logits()(r, static_cast<Eigen::Index>(c)));
    total += p.logits()(r, t) - std::log(z);
    prev = t;
  }
  return total;
}

inline double neg_log_sigmoid(double x) { return -std::log(1.0 / (1.0 + std::exp(-x))); }

// -log of the marginal Plackett-Luce probability that `ranked` (best first)
// occupies the top positions in that order while the rest may appear in any
// order, summed explicitly over every permutation of the rest.
inline double enumeration_oracle(const std::vector<double>& rewards, std::size_t k) {
  std::vector<std::size_t> rest(rewards.size() - k);
  std::iota(rest.begin(), rest.end(), k);
  double marginal = 0.0;
  do {
    std::vector<double> order(rewards.begin(), rewards.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j : rest) order.push_back(rewards[j]);
    double prob = 1.0;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      double denom = 0.0;
      for (std::size_t j = i; j < order.size(); ++j) denom += std::exp(order[j]);
      prob *= std::exp(order[i]) / denom;
    }
    marginal += prob;
  } while (std::next_permutation(rest.begin(), rest.end()));
  return -std::log(marginal);
}

}  // namespace agentalign::testing
