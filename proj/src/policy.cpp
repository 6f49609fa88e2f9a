#include "agentalign/policy.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "agentalign/errors.hpp"
#include "agentalign/numeric.hpp"

namespace agentalign {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

constexpr std::string_view kCheckpointMagic = "agentalign-toy-policy 1";

}  // namespace

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kBos] != kBosText || tokens_[kEos] != kEosText) {
    throw std::invalid_argument("vocabulary must start with <bos>, <eos>");
  }
  if (tokens_.size() > kMaxVocabSize) {
    throw std::invalid_argument("vocabulary larger than " + std::to_string(kMaxVocabSize));
  }
  for (TokenId i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty()) throw std::invalid_argument("empty vocabulary token");
    for (char c : t) {
      if (is_space(c)) throw std::invalid_argument("vocabulary token contains whitespace: " + t);
    }
    if (!index_.emplace(t, i).second) throw std::invalid_argument("duplicate vocabulary token: " + t);
  }
}

Vocab Vocab::with_words(const std::vector<std::string>& words) {
  std::vector<std::string> all{std::string(kBosText), std::string(kEosText)};
  all.insert(all.end(), words.begin(), words.end());
  return Vocab(std::move(all));
}

TokenId Vocab::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) throw UnknownTokenError(std::string(token));
  return it->second;
}

std::vector<std::string> split_policy_tokens(std::string_view text, const TokenTable& tokens) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(text[i])) {
      flush();
      ++i;
      continue;
    }
    if (const auto special = tokens.match_prefix(text.substr(i))) {
      flush();
      out.push_back(special->literal);
      i += special->literal.size();
      continue;
    }
    word += text[i++];
  }
  flush();
  return out;
}

std::vector<TokenId> encode(const Vocab& vocab, std::string_view text, const TokenTable& tokens) {
  std::vector<TokenId> ids;
  for (const auto& t : split_policy_tokens(text, tokens)) ids.push_back(vocab.id(t));
  ids.push_back(Vocab::kEos);
  return ids;
}

std::size_t question_bucket(std::string_view question, std::size_t contexts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : question) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return static_cast<std::size_t>(h % contexts);
}

ToyPolicy::ToyPolicy(Vocab vocab, std::size_t contexts, std::uint64_t seed)
    : vocab_(std::move(vocab)), contexts_(contexts), seed_(seed) {
  if (contexts_ == 0) throw std::invalid_argument("policy needs at least one context bucket");
  const auto v = static_cast<Eigen::Index>(vocab_.size());
  logits_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(contexts_) * v, v);
}

ToyPolicy init_policy(Vocab vocab, std::size_t contexts, std::uint64_t seed, double scale) {
  ToyPolicy p(std::move(vocab), contexts, seed);
  if (seed == 0) return p;
  std::mt19937_64 rng(seed);
  auto& w = p.logits();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * (2.0 * uniform01(rng) - 1.0);
  }
  return p;
}

LogProbTable::LogProbTable(const ToyPolicy& policy)
    : policy_(&policy), log_probs_(log_softmax_rows(policy.logits())) {}

double LogProbTable::log_prob(const EncodedSequence& y) const {
  double total = 0.0;
  TokenId prev = Vocab::kBos;
  for (TokenId next : y.tokens) {
    total += log_probs_(policy_->row(y.context, prev), next);
    prev = next;
  }
  return total;
}

SequenceLogProb LogProbTable::log_prob_detailed(const EncodedSequence& y) const {
  SequenceLogProb out;
  out.per_position.reserve(y.tokens.size());
  TokenId prev = Vocab::kBos;
  for (TokenId next : y.tokens) {
    const double lp = log_probs_(policy_->row(y.context, prev), next);
    out.per_position.push_back(lp);
    out.value += lp;
    prev = next;
  }
  return out;
}

void LogProbTable::add_transitions(Eigen::MatrixXd& counts, const EncodedSequence& y, double weight) const {
  TokenId prev = Vocab::kBos;
  for (TokenId next : y.tokens) {
    counts(policy_->row(y.context, prev), next) += weight;
    prev = next;
  }
}

Eigen::MatrixXd LogProbTable::gradient_from_counts(const Eigen::MatrixXd& counts) const {
  Eigen::MatrixXd grad = counts;
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    const double mass = counts.row(r).sum();
    if (mass != 0.0) grad.row(r) -= mass * log_probs_.row(r).array().exp().matrix();
  }
  return grad;
}

void check_sequence(const ToyPolicy& p, std::span<const TokenId> y) {
  for (TokenId t : y) {
    if (t >= p.vocab_size()) throw UnknownTokenError("#" + std::to_string(t));
  }
  if (y.empty() || y.back() != Vocab::kEos) {
    throw std::invalid_argument("scored sequences must end with <eos>");
  }
}

SequenceLogProb log_prob(const ToyPolicy& p, std::string_view question, std::span<const TokenId> y) {
  check_sequence(p, y);
  const LogProbTable table(p);
  return table.log_prob_detailed({p.context_of(question), {y.begin(), y.end()}});
}

Eigen::MatrixXd log_prob_grad(const ToyPolicy& p, std::string_view question, std::span<const TokenId> y) {
  check_sequence(p, y);
  const LogProbTable table(p);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(p.logits().rows(), p.logits().cols());
  table.add_transitions(counts, {p.context_of(question), {y.begin(), y.end()}}, 1.0);
  return table.gradient_from_counts(counts);
}

std::vector<TokenId> sample(const ToyPolicy& p, std::string_view question, std::mt19937_64& rng,
                            std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("max_len must be >= 1");
  const LogProbTable table(p);
  const std::size_t ctx = p.context_of(question);
  std::vector<TokenId> out;
  TokenId prev = Vocab::kBos;
  while (out.size() < max_len) {
    const auto row = table.log_probs().row(p.row(ctx, prev));
    const double u = uniform01(rng);
    double cumulative = 0.0;
    TokenId next = static_cast<TokenId>(row.size() - 1);
    for (Eigen::Index c = 0; c < row.size(); ++c) {
      cumulative += std::exp(row(c));
      if (u < cumulative) {
        next = static_cast<TokenId>(c);
        break;
      }
    }
    out.push_back(next);
    if (next == Vocab::kEos) break;
    prev = next;
  }
  return out;
}

void save_policy(const ToyPolicy& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  out << kCheckpointMagic << '\n'
      << "contexts " << p.contexts() << '\n'
      << "vocab " << p.vocab_size() << '\n'
      << "seed " << p.seed() << '\n';
  for (const auto& t : p.vocab().tokens()) out << "token " << t << '\n';
  out << "logits\n" << std::hexfloat;
  const auto& w = p.logits();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) out << (c ? " " : "") << w(r, c);
    out << '\n';
  }
  if (!out) throw IoFailure("write error on " + path.string());
}

ToyPolicy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open " + path.string() + " for reading");
  std::string line;
  std::size_t number = 0;
  auto next_line = [&](const char* field) -> std::string {
    if (!std::getline(in, line)) throw SchemaViolation(number + 1, field, "unexpected end of checkpoint");
    ++number;
    return line;
  };
  auto keyed = [&](const char* key) -> std::string {
    const std::string l = next_line(key);
    const std::string prefix = std::string(key) + " ";
    if (l.rfind(prefix, 0) != 0) throw SchemaViolation(number, key, "expected '" + prefix + "...'");
    return l.substr(prefix.size());
  };
  auto parse_uint = [&](const std::string& text, const char* field) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (text.empty() || *end != '\0') throw SchemaViolation(number, field, "expected an integer");
    return v;
  };

  if (next_line("header") != kCheckpointMagic) throw SchemaViolation(number, "header", "bad magic line");
  const auto contexts = parse_uint(keyed("contexts"), "contexts");
  const auto v = parse_uint(keyed("vocab"), "vocab");
  const auto seed = parse_uint(keyed("seed"), "seed");
  std::vector<std::string> tokens;
  for (unsigned long long i = 0; i < v; ++i) tokens.push_back(keyed("token"));
  if (next_line("logits") != "logits") throw SchemaViolation(number, "logits", "expected 'logits'");

  ToyPolicy p(Vocab(std::move(tokens)), static_cast<std::size_t>(contexts), seed);
  auto& w = p.logits();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const std::string l = next_line("logits");
    const char* cursor = l.c_str();
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      char* end = nullptr;
      w(r, c) = std::strtod(cursor, &end);
      if (end == cursor) throw SchemaViolation(number, "logits", "expected " + std::to_string(v) + " values");
      cursor = end;
    }
    while (*cursor == ' ') ++cursor;
    if (*cursor != '\0') throw SchemaViolation(number, "logits", "trailing data on row");
  }
  return p;
}

}  // namespace agentalign
