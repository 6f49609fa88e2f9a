#include "agentalign/trajectory.hpp"

#include <set>

#include "agentalign/errors.hpp"

namespace agentalign {

namespace {

constexpr std::array<std::string_view, kAgentCount> kNames = {
    "Reconstructor", "Retriever", "Filter", "Locator", "Generator", "Verifier",
};

constexpr std::array<std::string_view, kAgentCount> kCodes = {"IR", "KR", "KF", "KL", "RG", "AV"};

constexpr std::array<std::string_view, kAgentCount> kEndSuffix = {"i", "r", "f", "l", "g", "v"};

// "⟨" and "⟩" in UTF-8.
constexpr std::string_view kOpen = "\xE2\x9F\xA8";
constexpr std::string_view kClose = "\xE2\x9F\xA9";

std::array<std::string, kAgentCount> default_heads() {
  std::array<std::string, kAgentCount> out;
  for (std::size_t i = 0; i < kAgentCount; ++i) {
    out[i] = std::string(kOpen) + std::string(kNames[i]) + std::string(kClose);
  }
  return out;
}

std::array<std::string, kAgentCount> default_ends() {
  std::array<std::string, kAgentCount> out;
  for (std::size_t i = 0; i < kAgentCount; ++i) {
    out[i] = std::string(kOpen) + "/eo" + std::string(kEndSuffix[i]) + std::string(kClose);
  }
  return out;
}

bool starts_with(std::string_view text, std::string_view prefix) {
  return text.substr(0, prefix.size()) == prefix;
}

std::string agent_label(AgentKind a) { return std::string(agent_name(a)); }

}  // namespace

std::string_view agent_name(AgentKind a) noexcept { return kNames[agent_index(a)]; }

std::string_view agent_code(AgentKind a) noexcept { return kCodes[agent_index(a)]; }

std::optional<AgentKind> agent_from_name(std::string_view name) noexcept {
  for (AgentKind a : kAllAgents) {
    if (agent_name(a) == name) return a;
  }
  return std::nullopt;
}

TokenTable::TokenTable() : heads_(default_heads()), ends_(default_ends()) {}

TokenTable::TokenTable(std::array<std::string, kAgentCount> heads,
                       std::array<std::string, kAgentCount> ends)
    : heads_(std::move(heads)), ends_(std::move(ends)) {
  std::set<std::string> seen;
  for (const auto* group : {&heads_, &ends_}) {
    for (const auto& literal : *group) {
      if (literal.empty()) throw std::invalid_argument("special-token literal must be non-empty");
      if (!seen.insert(literal).second) {
        throw std::invalid_argument("duplicate special-token literal: " + literal);
      }
    }
  }
}

const TokenTable& TokenTable::standard() {
  static const TokenTable table;
  return table;
}

std::optional<SpecialToken> TokenTable::lookup(std::string_view literal) const {
  for (AgentKind a : kAllAgents) {
    if (head_literal(a) == literal) return head(a);
    if (end_literal(a) == literal) return end(a);
  }
  return std::nullopt;
}

std::optional<SpecialToken> TokenTable::match_prefix(std::string_view text) const {
  std::optional<SpecialToken> best;
  auto consider = [&](TokenRole role, AgentKind a, const std::string& literal) {
    if (starts_with(text, literal) && (!best || literal.size() > best->literal.size())) {
      best = SpecialToken{role, a, literal};
    }
  };
  for (AgentKind a : kAllAgents) {
    consider(TokenRole::Head, a, head_literal(a));
    consider(TokenRole::End, a, end_literal(a));
  }
  return best;
}

std::string Trajectory::final_answer() const {
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
    if (it->agent == AgentKind::ResponseGenerator) return it->payload;
  }
  return {};
}

std::size_t Trajectory::round_count() const { return steps.empty() ? 0 : steps.back().round + 1; }

bool Trajectory::contains(AgentKind a) const {
  for (const auto& s : steps) {
    if (s.agent == a) return true;
  }
  return false;
}

void assign_rounds(Trajectory& t) {
  std::size_t round = 0;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    t.steps[i].round = round;
    if (t.steps[i].agent == AgentKind::AnswerVerifier) ++round;
  }
}

Trajectory make_trajectory(std::string question,
                           const std::vector<std::pair<AgentKind, std::string>>& steps) {
  Trajectory t;
  t.question = std::move(question);
  t.steps.reserve(steps.size());
  for (const auto& [agent, payload] : steps) t.steps.push_back({agent, payload, 0});
  assign_rounds(t);
  return t;
}

Trajectory parse_trajectory(std::string_view text, const TokenTable& tokens) {
  using Kind = TrajectoryParseError::Kind;
  Trajectory t;
  std::size_t pos = 0;
  if (starts_with(text, "Q: ")) {
    const std::size_t newline = text.find('\n');
    if (newline == std::string_view::npos) {
      throw TrajectoryParseError(Kind::EmptyTrajectory, text.size(), "question line without steps");
    }
    t.question = std::string(text.substr(3, newline - 3));
    pos = newline + 1;
  }

  // An unrecognized "⟨...⟩" literal, if one starts at `at`.
  auto unknown_literal = [&](std::size_t at) -> std::optional<std::string> {
    if (!starts_with(text.substr(at), kOpen)) return std::nullopt;
    const std::size_t close = text.find(kClose, at + kOpen.size());
    if (close == std::string_view::npos) return std::nullopt;
    return std::string(text.substr(at, close + kClose.size() - at));
  };

  while (pos < text.size()) {
    const auto head = tokens.match_prefix(text.substr(pos));
    if (!head || head->role != TokenRole::Head) {
      if (head) {
        throw TrajectoryParseError(Kind::UnknownToken, pos,
                                   "expected a head token, found end token " + head->literal);
      }
      const auto literal = unknown_literal(pos);
      throw TrajectoryParseError(Kind::UnknownToken, pos,
                                 literal ? "unknown special token " + *literal
                                         : std::string("expected a head token"));
    }
    const std::size_t payload_begin = pos + head->literal.size();
    std::size_t cursor = payload_begin;
    std::optional<SpecialToken> found;
    for (; cursor < text.size(); ++cursor) {
      found = tokens.match_prefix(text.substr(cursor));
      if (found) break;
      if (starts_with(text.substr(cursor), std::string(kOpen) + "/")) {
        if (const auto literal = unknown_literal(cursor)) {
          throw TrajectoryParseError(Kind::UnknownToken, cursor, "unknown special token " + *literal);
        }
      }
    }
    if (!found || found->role == TokenRole::Head) {
      throw TrajectoryParseError(Kind::UnterminatedStep, pos,
                                 "step opened by " + head->literal + " has no end token");
    }
    if (found->agent != head->agent) {
      throw TrajectoryParseError(Kind::MismatchedPair, cursor,
                                 "head " + head->literal + " closed by " + found->literal);
    }
    t.steps.push_back({head->agent, std::string(text.substr(payload_begin, cursor - payload_begin)), 0});
    pos = cursor + found->literal.size();
  }

  if (t.steps.empty()) throw TrajectoryParseError(Kind::EmptyTrajectory, pos, "no steps");
  assign_rounds(t);
  return t;
}

std::string serialize_steps(const Trajectory& t, const TokenTable& tokens) {
  std::string out;
  for (const auto& step : t.steps) {
    out += tokens.head_literal(step.agent);
    out += step.payload;
    out += tokens.end_literal(step.agent);
  }
  return out;
}

std::string serialize_trajectory(const Trajectory& t, const TokenTable& tokens) {
  return "Q: " + t.question + "\n" + serialize_steps(t, tokens);
}

void validate(const Trajectory& t) {
  using Kind = ValidationError::Kind;
  if (t.steps.empty()) throw ValidationError(Kind::OrderViolation, "trajectory has no steps");

  Trajectory expected = t;
  assign_rounds(expected);
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (t.steps[i].round != expected.steps[i].round) {
      throw ValidationError(Kind::OrderViolation,
                            "step " + std::to_string(i) + " carries round " +
                                std::to_string(t.steps[i].round) + ", expected " +
                                std::to_string(expected.steps[i].round));
    }
  }

  std::size_t begin = 0;
  while (begin < t.steps.size()) {
    const std::size_t round = t.steps[begin].round;
    std::size_t end = begin;
    while (end < t.steps.size() && t.steps[end].round == round) ++end;

    std::array<std::optional<std::size_t>, kAgentCount> at{};
    for (std::size_t i = begin; i < end; ++i) {
      auto& slot = at[agent_index(t.steps[i].agent)];
      if (slot) {
        throw ValidationError(Kind::DuplicateAgentInRound,
                              agent_label(t.steps[i].agent) + " appears twice in round " +
                                  std::to_string(round));
      }
      slot = i - begin;
    }
    auto pos = [&](AgentKind a) { return at[agent_index(a)]; };
    auto fail = [&](const std::string& why) {
      throw ValidationError(Kind::OrderViolation, why + " (round " + std::to_string(round) + ")");
    };

    if (const auto ir = pos(AgentKind::IntentReconstructor); ir && *ir != 0) {
      fail("Reconstructor must open the round");
    }
    if (round > 0 && !pos(AgentKind::IntentReconstructor)) {
      fail("a retry round must restart at the Reconstructor");
    }
    const auto kr = pos(AgentKind::KnowledgeRetriever);
    const auto kf = pos(AgentKind::KnowledgeFilter);
    const auto kl = pos(AgentKind::KnowledgeLocator);
    const auto rg = pos(AgentKind::ResponseGenerator);
    const auto av = pos(AgentKind::AnswerVerifier);
    if ((kf || kl) && !kr) fail("Filter/Locator without a Retriever");
    if (kr) {
      if (kf && *kf < *kr) fail("Filter runs before Retriever");
      if (!kf || *kf != *kr + 1) fail("Filter must directly follow Retriever");
      if (!kl || *kl != *kf + 1) fail("Locator must directly follow Filter");
      if (!rg || *rg < *kl) fail("Retriever requires a later Generator");
    }
    if (av) {
      if (!rg || *rg > *av) fail("Verifier requires an earlier Generator");
      if (*av != end - begin - 1) fail("Verifier must close the round");
    }
    if (rg) {
      for (std::size_t i = begin + *rg + 1; i < end; ++i) {
        if (t.steps[i].agent != AgentKind::AnswerVerifier) {
          fail(agent_label(t.steps[i].agent) + " after Generator");
        }
      }
    }
    begin = end;
  }
}

std::size_t count_payload_tokens(std::string_view payload, TokenizerKind tokenizer) {
  std::size_t count = 0;
  if (tokenizer == TokenizerKind::Char) {
    for (unsigned char c : payload) {
      if ((c & 0xC0) != 0x80) ++count;
    }
    return count;
  }
  bool in_word = false;
  for (char c : payload) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

TokenCounts token_count(const Trajectory& t, TokenizerKind tokenizer) {
  TokenCounts counts;
  for (const auto& step : t.steps) {
    const std::size_t n = 2 + count_payload_tokens(step.payload, tokenizer);
    counts.per_agent[agent_index(step.agent)] += n;
    counts.total += n;
  }
  return counts;
}

}  // namespace agentalign
