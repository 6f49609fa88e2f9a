#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "agentalign/trajectory.hpp"

namespace agentalign {

using TokenId = std::uint32_t;

inline constexpr std::size_t kMaxVocabSize = 64;

// Ordered list of distinct token strings. Id 0 is the BOS sentinel "<bos>",
// id 1 is the EOS sentinel "<eos>".
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr std::string_view kBosText = "<bos>";
  static constexpr std::string_view kEosText = "<eos>";

  // Full token list including the two sentinels at the front.
  explicit Vocab(std::vector<std::string> tokens);
  // Sentinels followed by `words`.
  static Vocab with_words(const std::vector<std::string>& words);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }
  // Throws UnknownTokenError.
  TokenId id(std::string_view token) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Splits text into policy tokens: whitespace-separated words, with every
// special-token literal split out as its own token.
std::vector<std::string> split_policy_tokens(std::string_view text,
                                             const TokenTable& tokens = TokenTable::standard());

// Token ids for `text`, terminated by EOS. Throws UnknownTokenError.
std::vector<TokenId> encode(const Vocab& vocab, std::string_view text,
                            const TokenTable& tokens = TokenTable::standard());

// 64-bit FNV-1a over the UTF-8 bytes, reduced modulo `contexts`.
std::size_t question_bucket(std::string_view question, std::size_t contexts);

// First-order autoregressive categorical model conditioned on a question
// bucket: logits(context * V + previous, next). Stands in for both the
// trainable policy and the frozen reference model.
class ToyPolicy {
 public:
  ToyPolicy(Vocab vocab, std::size_t contexts, std::uint64_t seed = 0);

  const Vocab& vocab() const noexcept { return vocab_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  std::size_t contexts() const noexcept { return contexts_; }
  std::uint64_t seed() const noexcept { return seed_; }

  Eigen::MatrixXd& logits() noexcept { return logits_; }
  const Eigen::MatrixXd& logits() const noexcept { return logits_; }

  Eigen::Index row(std::size_t context, TokenId previous) const noexcept {
    return static_cast<Eigen::Index>(context * vocab_.size() + previous);
  }
  std::size_t context_of(std::string_view question) const { return question_bucket(question, contexts_); }

  friend bool operator==(const ToyPolicy& a, const ToyPolicy& b) {
    return a.vocab_ == b.vocab_ && a.contexts_ == b.contexts_ && a.seed_ == b.seed_ &&
           a.logits_.rows() == b.logits_.rows() && a.logits_.cols() == b.logits_.cols() &&
           a.logits_ == b.logits_;
  }

 private:
  Vocab vocab_;
  std::size_t contexts_;
  std::uint64_t seed_;
  Eigen::MatrixXd logits_;
};

// Seed 0 gives all-zero logits (the uniform policy). Any other seed draws
// every logit independently from Uniform(-scale, scale) with mt19937_64.
ToyPolicy init_policy(Vocab vocab, std::size_t contexts, std::uint64_t seed, double scale = 1.0);

struct SequenceLogProb {
  double value = 0.0;
  std::vector<double> per_position;
};

// A token sequence bound to the context bucket it is scored under.
struct EncodedSequence {
  std::size_t context = 0;
  std::vector<TokenId> tokens;
};

// Cached row-wise log-softmax of a policy. Scoring many sequences against the
// same parameters goes through this table; it does not track later changes to
// the policy, so rebuild it after every update.
class LogProbTable {
 public:
  explicit LogProbTable(const ToyPolicy& policy);

  const ToyPolicy& policy() const noexcept { return *policy_; }
  const Eigen::MatrixXd& log_probs() const noexcept { return log_probs_; }

  // Sum of log-probabilities of each token given its predecessor (BOS first).
  double log_prob(const EncodedSequence& y) const;
  SequenceLogProb log_prob_detailed(const EncodedSequence& y) const;

  // Adds weight * onehot(next) to counts(row(context, previous)) for every
  // position of `y`. `counts` must have the logits' shape.
  void add_transitions(Eigen::MatrixXd& counts, const EncodedSequence& y, double weight) const;

  // Converts accumulated transition counts into d/dlogits of
  // sum(weight * log pi(y)): counts - rowsum(counts) * softmax(row).
  Eigen::MatrixXd gradient_from_counts(const Eigen::MatrixXd& counts) const;

 private:
  const ToyPolicy* policy_;
  Eigen::MatrixXd log_probs_;
};

// Throws UnknownTokenError for ids outside the vocabulary and
// std::invalid_argument when `y` is empty or does not end with EOS.
void check_sequence(const ToyPolicy& p, std::span<const TokenId> y);

SequenceLogProb log_prob(const ToyPolicy& p, std::string_view question, std::span<const TokenId> y);

// d log pi(y | question) / d logits, same shape as the logits.
Eigen::MatrixXd log_prob_grad(const ToyPolicy& p, std::string_view question, std::span<const TokenId> y);

// Draws tokens until EOS or `max_len` tokens, whichever comes first.
std::vector<TokenId> sample(const ToyPolicy& p, std::string_view question, std::mt19937_64& rng,
                            std::size_t max_len);

// Text checkpoint, bit-exact through hexadecimal floating point:
//   agentalign-toy-policy 1
//   contexts <C>
//   vocab <V>
//   seed <seed>
//   token <text>            (V lines, in id order)
//   logits
//   <V hex floats>          (C*V lines, row = context * V + previous)
void save_policy(const ToyPolicy& p, const std::filesystem::path& path);
ToyPolicy load_policy(const std::filesystem::path& path);

}  // namespace agentalign
