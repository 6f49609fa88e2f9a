#include "agentalign/preference.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "agentalign/errors.hpp"

namespace agentalign {

using nlohmann::json;

namespace {

constexpr std::string_view kOpen = "\xE2\x9F\xA8";
constexpr std::string_view kClose = "\xE2\x9F\xA9";

PreferenceError invalid_prefix(const std::string& why) {
  return PreferenceError(PreferenceError::Kind::InvalidPrefix, why);
}

json record_to_json(const ScoredTrajectory& s) {
  json scores = json::object();
  for (AgentKind a : kAllAgents) scores[std::string(agent_name(a))] = s.prefix[a];
  return json{{"question", s.trajectory.question},
              {"trajectory_text", serialize_trajectory(s.trajectory)},
              {"prefix_scores", scores},
              {"label", std::string(label_name(s.label))},
              {"dependency_score", dependency_score(s)}};
}

const json& require(const json& j, const char* field, std::size_t line) {
  if (!j.is_object() || !j.contains(field)) throw SchemaViolation(line, field, "missing field");
  return j.at(field);
}

ScoredTrajectory record_from_json(const json& j, std::size_t line) {
  const json& question = require(j, "question", line);
  if (!question.is_string()) throw SchemaViolation(line, "question", "expected a string");
  const json& text = require(j, "trajectory_text", line);
  if (!text.is_string()) throw SchemaViolation(line, "trajectory_text", "expected a string");
  const json& scores = require(j, "prefix_scores", line);
  if (!scores.is_object()) throw SchemaViolation(line, "prefix_scores", "expected an object");
  const json& label = require(j, "label", line);
  if (!label.is_string()) throw SchemaViolation(line, "label", "expected a string");

  ScoredTrajectory s;
  try {
    s.trajectory = parse_trajectory(text.get<std::string>());
  } catch (const TrajectoryParseError& e) {
    throw SchemaViolation(line, "trajectory_text", e.what());
  }
  if (s.trajectory.question != question.get<std::string>()) {
    throw SchemaViolation(line, "question", "does not match the trajectory's question line");
  }
  if (scores.size() != kAgentCount) {
    throw SchemaViolation(line, "prefix_scores", "expected exactly six agents");
  }
  for (const auto& [key, value] : scores.items()) {
    const auto agent = agent_from_name(key);
    if (!agent) throw SchemaViolation(line, "prefix_scores", "unknown agent '" + key + "'");
    if (!value.is_number_integer()) {
      throw SchemaViolation(line, "prefix_scores", "score for " + key + " is not an integer");
    }
    s.prefix[*agent] = value.get<int>();
  }
  try {
    check_prefix(s.prefix);
  } catch (const PreferenceError& e) {
    throw SchemaViolation(line, "prefix_scores", e.what());
  }
  const auto l = label.get<std::string>();
  if (l == "win") {
    s.label = Label::Win;
  } else if (l == "lose") {
    s.label = Label::Lose;
  } else {
    throw SchemaViolation(line, "label", "expected \"win\" or \"lose\"");
  }
  return s;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open " + path.string() + " for reading");
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaViolation(number, "<record>", e.what());
    }
    fn(j, number);
  }
  if (in.bad()) throw IoFailure("read error on " + path.string());
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

void check_prefix(const PreferencePrefix& p) {
  for (AgentKind a : kAllAgents) {
    if (p[a] < kMinAgentScore || p[a] > kMaxAgentScore) {
      throw invalid_prefix(std::string(agent_name(a)) + " score " + std::to_string(p[a]) +
                           " outside [0, 5]");
    }
  }
  if (p[AgentKind::ResponseGenerator] != kGeneratorScore) {
    throw invalid_prefix("Generator score must be 5");
  }
}

PreferencePrefix score_prefix(const QuestionFeatures& f) {
  PreferencePrefix p;
  const bool complex = f.instruction_complexity == Complexity::Complex;
  p[AgentKind::IntentReconstructor] = complex ? 5 : 1;
  p[AgentKind::KnowledgeRetriever] = f.needs_external_knowledge ? 5 : 0;
  p[AgentKind::KnowledgeFilter] = f.needs_external_knowledge ? 4 : 0;
  p[AgentKind::KnowledgeLocator] = f.needs_external_knowledge ? 4 : 0;
  p[AgentKind::ResponseGenerator] = kGeneratorScore;
  if (f.answer_confidence == Confidence::Low) {
    p[AgentKind::AnswerVerifier] = 5;
  } else {
    p[AgentKind::AnswerVerifier] = f.needs_external_knowledge ? 1 : 0;
  }
  return p;
}

std::string format_prefix(const PreferencePrefix& p) {
  std::string out;
  for (AgentKind a : kAllAgents) {
    if (!out.empty()) out += ' ';
    out += kOpen;
    out += agent_name(a);
    out += ": ";
    out += std::to_string(p[a]);
    out += kClose;
  }
  return out;
}

PreferencePrefix parse_prefix(std::string_view text) {
  PreferencePrefix p;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < kAgentCount; ++i) {
    const AgentKind a = kAllAgents[i];
    if (i > 0) {
      if (pos >= text.size() || text[pos] != ' ') throw invalid_prefix("expected a space between tags");
      ++pos;
    }
    std::string tag = std::string(kOpen) + std::string(agent_name(a)) + ": ";
    if (text.substr(pos, tag.size()) != tag) {
      throw invalid_prefix("expected tag for " + std::string(agent_name(a)));
    }
    pos += tag.size();
    if (pos >= text.size() || text[pos] < '0' || text[pos] > '9') {
      throw invalid_prefix("expected a digit score");
    }
    p[a] = text[pos] - '0';
    ++pos;
    if (text.substr(pos, kClose.size()) != kClose) throw invalid_prefix("unterminated tag");
    pos += kClose.size();
  }
  if (pos != text.size()) throw invalid_prefix("trailing text after prefix");
  check_prefix(p);
  return p;
}

double knowledge_score(const PreferencePrefix& p) {
  return (p[AgentKind::KnowledgeRetriever] + p[AgentKind::KnowledgeFilter] +
          p[AgentKind::KnowledgeLocator]) /
         3.0;
}

std::string_view label_name(Label l) noexcept { return l == Label::Win ? "win" : "lose"; }

int dependency_score(const PreferencePrefix& p) {
  int sum = 0;
  for (int s : p.scores) sum += s;
  return sum;
}

int dependency_score(const ScoredTrajectory& s) { return dependency_score(s.prefix); }

std::string preference_sequence_text(const ScoredTrajectory& s, const TokenTable& tokens) {
  return format_prefix(s.prefix) + " " + serialize_steps(s.trajectory, tokens);
}

bool ranks_before(const ScoredTrajectory& a, const ScoredTrajectory& b) {
  const int sa = dependency_score(a);
  const int sb = dependency_score(b);
  if (sa != sb) return sa > sb;
  const auto ta = serialize_trajectory(a.trajectory);
  const auto tb = serialize_trajectory(b.trajectory);
  if (ta != tb) return ta < tb;
  return format_prefix(a.prefix) < format_prefix(b.prefix);
}

const ScoredTrajectory& RankedSample::item(std::size_t i) const {
  return i < ordered_winners.size() ? ordered_winners.at(i) : rejected.at(i - ordered_winners.size());
}

RankedSample build_ranked_sample(std::string_view question, std::vector<ScoredTrajectory> winners,
                                 std::vector<ScoredTrajectory> losers, std::size_t k) {
  using Kind = PreferenceError::Kind;
  if (k < 1 || winners.size() < k) {
    throw PreferenceError(Kind::InsufficientWinners, "need at least k=" + std::to_string(k) +
                                                         " winners (k >= 1), got " +
                                                         std::to_string(winners.size()));
  }
  for (const auto* group : {&winners, &losers}) {
    const Label expected = group == &winners ? Label::Win : Label::Lose;
    for (const auto& s : *group) {
      if (s.trajectory.question != question) {
        throw PreferenceError(Kind::MixedQuestion,
                              "trajectory for '" + s.trajectory.question + "' in sample for '" +
                                  std::string(question) + "'");
      }
      if (s.label != expected) {
        throw PreferenceError(Kind::InvalidLabel, "expected label " + std::string(label_name(expected)));
      }
      check_prefix(s.prefix);
    }
  }
  std::stable_sort(winners.begin(), winners.end(), ranks_before);

  RankedSample out;
  out.question = std::string(question);
  out.ordered_winners.assign(std::make_move_iterator(winners.begin()),
                             std::make_move_iterator(winners.begin() + static_cast<std::ptrdiff_t>(k)));
  out.rejected.assign(std::make_move_iterator(winners.begin() + static_cast<std::ptrdiff_t>(k)),
                      std::make_move_iterator(winners.end()));
  for (auto& l : losers) out.rejected.push_back(std::move(l));
  return out;
}

void emit_jsonl(const std::vector<ScoredTrajectory>& records, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoFailure("write error on " + path.string());
}

std::vector<ScoredTrajectory> load_jsonl(const std::filesystem::path& path) {
  std::vector<ScoredTrajectory> records;
  for_each_line(path, [&](const json& j, std::size_t line) { records.push_back(record_from_json(j, line)); });
  return records;
}

void emit_ranked_jsonl(const std::vector<RankedSample>& samples, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  for (const auto& s : samples) {
    json winners = json::array();
    for (const auto& w : s.ordered_winners) winners.push_back(record_to_json(w));
    json rejected = json::array();
    for (const auto& r : s.rejected) rejected.push_back(record_to_json(r));
    out << json{{"question", s.question},
                {"k", s.k()},
                {"ordered_winners", winners},
                {"rejected", rejected}}
               .dump()
        << '\n';
  }
  if (!out) throw IoFailure("write error on " + path.string());
}

std::vector<RankedSample> load_ranked_jsonl(const std::filesystem::path& path) {
  std::vector<RankedSample> samples;
  for_each_line(path, [&](const json& j, std::size_t line) {
    RankedSample s;
    const json& question = require(j, "question", line);
    if (!question.is_string()) throw SchemaViolation(line, "question", "expected a string");
    s.question = question.get<std::string>();
    const json& k = require(j, "k", line);
    for (const char* field : {"ordered_winners", "rejected"}) {
      const json& list = require(j, field, line);
      if (!list.is_array()) throw SchemaViolation(line, field, "expected an array");
      auto& target = std::string_view(field) == "rejected" ? s.rejected : s.ordered_winners;
      for (const auto& item : list) target.push_back(record_from_json(item, line));
    }
    if (!k.is_number_unsigned() || k.get<std::size_t>() != s.ordered_winners.size() || s.k() == 0) {
      throw SchemaViolation(line, "k", "must equal the (non-zero) number of ordered winners");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& item = s.item(i);
      if (item.trajectory.question != s.question) {
        throw SchemaViolation(line, "question", "record belongs to a different question");
      }
      if (i < s.k()) {
        if (item.label != Label::Win) throw SchemaViolation(line, "ordered_winners", "non-winning record");
        if (i > 0 && ranks_before(item, s.ordered_winners[i - 1])) {
          throw SchemaViolation(line, "ordered_winners", "not in descending dependency order");
        }
      }
    }
    samples.push_back(std::move(s));
  });
  return samples;
}

}  // namespace agentalign
