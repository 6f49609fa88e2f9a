#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace agentalign {

// The six agents, in the canonical execution order.
enum class AgentKind {
  IntentReconstructor,
  KnowledgeRetriever,
  KnowledgeFilter,
  KnowledgeLocator,
  ResponseGenerator,
  AnswerVerifier,
};

inline constexpr std::size_t kAgentCount = 6;

inline constexpr std::array<AgentKind, kAgentCount> kAllAgents = {
    AgentKind::IntentReconstructor, AgentKind::KnowledgeRetriever, AgentKind::KnowledgeFilter,
    AgentKind::KnowledgeLocator,    AgentKind::ResponseGenerator,  AgentKind::AnswerVerifier,
};

constexpr std::size_t agent_index(AgentKind a) noexcept { return static_cast<std::size_t>(a); }

// Short role name used in preference tags and JSON keys ("Retriever", ...).
std::string_view agent_name(AgentKind a) noexcept;
std::optional<AgentKind> agent_from_name(std::string_view name) noexcept;
// Two-letter code (IR, KR, KF, KL, RG, AV) used in traces and reports.
std::string_view agent_code(AgentKind a) noexcept;

enum class TokenRole { Head, End };

struct SpecialToken {
  TokenRole role = TokenRole::Head;
  AgentKind agent = AgentKind::IntentReconstructor;
  std::string literal;

  friend bool operator==(const SpecialToken&, const SpecialToken&) = default;
};

// Bijective mapping between agents and their (head, end) literals. Defaults
// to the angle-bracket literals (U+27E8 / U+27E9) such as "⟨Retriever⟩" and
// "⟨/eor⟩"; alternative encodings can be supplied as long as all twelve
// literals are non-empty and distinct.
class TokenTable {
 public:
  TokenTable();
  TokenTable(std::array<std::string, kAgentCount> heads, std::array<std::string, kAgentCount> ends);

  static const TokenTable& standard();

  const std::string& head_literal(AgentKind a) const noexcept { return heads_[agent_index(a)]; }
  const std::string& end_literal(AgentKind a) const noexcept { return ends_[agent_index(a)]; }
  SpecialToken head(AgentKind a) const { return {TokenRole::Head, a, head_literal(a)}; }
  SpecialToken end(AgentKind a) const { return {TokenRole::End, a, end_literal(a)}; }

  // Reverse lookup over all twelve literals.
  std::optional<SpecialToken> lookup(std::string_view literal) const;
  // Longest literal that is a prefix of `text`, if any.
  std::optional<SpecialToken> match_prefix(std::string_view text) const;

  const std::array<std::string, kAgentCount>& heads() const noexcept { return heads_; }
  const std::array<std::string, kAgentCount>& ends() const noexcept { return ends_; }

 private:
  std::array<std::string, kAgentCount> heads_;
  std::array<std::string, kAgentCount> ends_;
};

struct TrajectoryStep {
  AgentKind agent = AgentKind::ResponseGenerator;
  std::string payload;
  // Verifier-retry round this step belongs to. A new round starts after every
  // Verifier step that is followed by further steps.
  std::size_t round = 0;

  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

struct Trajectory {
  std::string question;
  std::vector<TrajectoryStep> steps;

  // Payload of the last ResponseGenerator step, or empty if there is none.
  std::string final_answer() const;
  std::size_t round_count() const;
  bool contains(AgentKind a) const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// Builds a trajectory from (agent, payload) pairs, assigning round indices.
Trajectory make_trajectory(std::string question,
                           const std::vector<std::pair<AgentKind, std::string>>& steps);

// Recomputes round indices from the step sequence.
void assign_rounds(Trajectory& t);

// Text form: an optional "Q: <question>\n" line followed by concatenated
// steps "<head><payload><end>" with nothing in between.
Trajectory parse_trajectory(std::string_view text, const TokenTable& tokens = TokenTable::standard());

std::string serialize_trajectory(const Trajectory& t, const TokenTable& tokens = TokenTable::standard());

// Serialized steps only, without the question line.
std::string serialize_steps(const Trajectory& t, const TokenTable& tokens = TokenTable::standard());

// Throws ValidationError unless the step ordering is one the inference state
// machine can produce: within each round agents are unique, the Reconstructor
// comes first, Retriever/Filter/Locator are contiguous and in that order, a
// Generator follows any retrieval, and the Verifier closes the round after a
// Generator.
void validate(const Trajectory& t);

enum class TokenizerKind { Whitespace, Char };

struct TokenCounts {
  std::array<std::size_t, kAgentCount> per_agent{};
  std::size_t total = 0;

  std::size_t operator[](AgentKind a) const noexcept { return per_agent[agent_index(a)]; }
  friend bool operator==(const TokenCounts&, const TokenCounts&) = default;
};

// Number of tokens in a payload: whitespace-separated words, or UTF-8 code points.
std::size_t count_payload_tokens(std::string_view payload, TokenizerKind tokenizer);

// Head and end tokens count one each; payload tokens per `tokenizer`.
TokenCounts token_count(const Trajectory& t, TokenizerKind tokenizer = TokenizerKind::Whitespace);

}  // namespace agentalign
