#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "agentalign/trajectory.hpp"

namespace agentalign {

inline constexpr int kMinAgentScore = 0;
inline constexpr int kMaxAgentScore = 5;
// The Generator is always required and always scored at the top of the scale.
inline constexpr int kGeneratorScore = 5;

// Per-agent utility scores in [0, 5], indexed by AgentKind.
struct PreferencePrefix {
  std::array<int, kAgentCount> scores{};

  int operator[](AgentKind a) const noexcept { return scores[agent_index(a)]; }
  int& operator[](AgentKind a) noexcept { return scores[agent_index(a)]; }

  friend bool operator==(const PreferencePrefix&, const PreferencePrefix&) = default;
};

// Throws PreferenceError(InvalidPrefix) when a score is out of range or the
// Generator score is not 5.
void check_prefix(const PreferencePrefix& p);

enum class Confidence { Low, High };
enum class Complexity { Simple, Complex };

struct QuestionFeatures {
  bool needs_external_knowledge = false;
  Confidence answer_confidence = Confidence::High;
  Complexity instruction_complexity = Complexity::Simple;

  friend bool operator==(const QuestionFeatures&, const QuestionFeatures&) = default;
};

// Deterministic rubric: each agent lands in the high band {4,5} when its
// condition holds and in the low band {0,1} otherwise. Exact values:
//   knowledge agents   high: Retriever 5, Filter 4, Locator 4   low: 0
//   Verifier           high (low confidence): 5
//                      low: 1 when the question needs external knowledge, else 0
//   Reconstructor      high (complex instruction): 5            low: 1
//   Generator          always 5
PreferencePrefix score_prefix(const QuestionFeatures& f);

// "⟨Reconstructor: s⟩ ⟨Retriever: s⟩ ... ⟨Verifier: s⟩" in agent order,
// single spaces between tags.
std::string format_prefix(const PreferencePrefix& p);
PreferencePrefix parse_prefix(std::string_view text);

// Mean score of the Retriever, Filter and Locator.
double knowledge_score(const PreferencePrefix& p);

enum class Label { Win, Lose };

std::string_view label_name(Label l) noexcept;

struct ScoredTrajectory {
  Trajectory trajectory;
  PreferencePrefix prefix;
  Label label = Label::Win;

  friend bool operator==(const ScoredTrajectory&, const ScoredTrajectory&) = default;
};

// Sum of the six prefix scores; always in [5, 30] for a valid prefix.
int dependency_score(const PreferencePrefix& p);
int dependency_score(const ScoredTrajectory& s);

// Text a preference-trained policy scores for this trajectory: the formatted
// prefix, a space, then the serialized steps.
std::string preference_sequence_text(const ScoredTrajectory& s,
                                     const TokenTable& tokens = TokenTable::standard());

// Winners sorted by descending dependency score; ties broken by serialized
// trajectory text, then by formatted prefix.
bool ranks_before(const ScoredTrajectory& a, const ScoredTrajectory& b);

struct RankedSample {
  std::string question;
  // Top-K winners, best first.
  std::vector<ScoredTrajectory> ordered_winners;
  // Demoted winners (best first) followed by the losers in input order. The
  // losses treat this set as unordered.
  std::vector<ScoredTrajectory> rejected;

  std::size_t k() const noexcept { return ordered_winners.size(); }
  std::size_t size() const noexcept { return ordered_winners.size() + rejected.size(); }
  // Item by global index: ordered winners first, then the rejected set.
  const ScoredTrajectory& item(std::size_t i) const;

  friend bool operator==(const RankedSample&, const RankedSample&) = default;
};

RankedSample build_ranked_sample(std::string_view question, std::vector<ScoredTrajectory> winners,
                                 std::vector<ScoredTrajectory> losers, std::size_t k);

// JSONL, one record per line:
//   {"question", "trajectory_text", "prefix_scores": {agent: int}, "label": "win"|"lose",
//    "dependency_score"}
// dependency_score is written for readers and ignored on load.
void emit_jsonl(const std::vector<ScoredTrajectory>& records, const std::filesystem::path& path);
std::vector<ScoredTrajectory> load_jsonl(const std::filesystem::path& path);

// Ranked samples, one per line:
//   {"question", "k", "ordered_winners": [record...], "rejected": [record...]}
void emit_ranked_jsonl(const std::vector<RankedSample>& samples, const std::filesystem::path& path);
std::vector<RankedSample> load_ranked_jsonl(const std::filesystem::path& path);

}  // namespace agentalign
