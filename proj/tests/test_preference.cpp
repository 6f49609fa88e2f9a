#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "agentalign/errors.hpp"
#include "agentalign/preference.hpp"

using namespace agentalign;
using A = AgentKind;

namespace {

PreferencePrefix prefix_of(std::array<int, 6> s) { return PreferencePrefix{s}; }

ScoredTrajectory scored(const std::string& q, const std::string& answer, std::array<int, 6> scores,
                        Label label) {
  return {make_trajectory(q, {{A::IntentReconstructor, "intent"}, {A::ResponseGenerator, answer}}),
          prefix_of(scores), label};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("agentalign_pref_" + name);
}

PreferenceError::Kind preference_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const PreferenceError& e) {
    return e.kind();
  }
  FAIL("expected a preference error");
  return PreferenceError::Kind::InvalidPrefix;
}

}  // namespace

TEST_CASE("rubric examples") {
  const auto fig = score_prefix({true, Confidence::High, Complexity::Simple});
  CHECK(fig == prefix_of({1, 5, 4, 4, 5, 1}));
  const auto simple = score_prefix({false, Confidence::High, Complexity::Simple});
  CHECK(simple == prefix_of({1, 0, 0, 0, 5, 0}));
  const auto hard = score_prefix({true, Confidence::Low, Complexity::Complex});
  for (A a : {A::IntentReconstructor, A::KnowledgeRetriever, A::KnowledgeFilter, A::KnowledgeLocator,
              A::AnswerVerifier}) {
    CHECK(hard[a] >= 4);
  }
  CHECK(hard[A::ResponseGenerator] == 5);
}

TEST_CASE("rubric bands hold for all eight feature combinations") {
  auto high = [](int s) { return s == 4 || s == 5; };
  auto low = [](int s) { return s == 0 || s == 1; };
  for (int bits = 0; bits < 8; ++bits) {
    const QuestionFeatures f{(bits & 1) != 0, (bits & 2) ? Confidence::Low : Confidence::High,
                             (bits & 4) ? Complexity::Complex : Complexity::Simple};
    const auto p = score_prefix(f);
    CHECK(p == score_prefix(f));
    CHECK_NOTHROW(check_prefix(p));
    for (A a : {A::KnowledgeRetriever, A::KnowledgeFilter, A::KnowledgeLocator}) {
      CHECK((f.needs_external_knowledge ? high(p[a]) : low(p[a])));
    }
    CHECK((f.answer_confidence == Confidence::Low ? high(p[A::AnswerVerifier]) : low(p[A::AnswerVerifier])));
    CHECK((f.instruction_complexity == Complexity::Complex ? high(p[A::IntentReconstructor])
                                                           : low(p[A::IntentReconstructor])));
    CHECK(p[A::ResponseGenerator] == 5);
  }
}

TEST_CASE("format_prefix tags") {
  const auto p = prefix_of({5, 5, 4, 4, 5, 1});
  const auto text = format_prefix(p);
  CHECK(text == "⟨Reconstructor: 5⟩ ⟨Retriever: 5⟩ ⟨Filter: 4⟩ ⟨Locator: 4⟩ ⟨Generator: 5⟩ ⟨Verifier: 1⟩");
  CHECK(text.find("⟨Retriever: 5⟩") != std::string::npos);
  CHECK(text.find("⟨Reconstructor: 5⟩") != std::string::npos);
  CHECK(text.find("⟨Verifier: 1⟩") != std::string::npos);
  CHECK_THROWS_AS(parse_prefix("⟨Reconstructor: 5⟩"), PreferenceError);
  CHECK_THROWS_AS(parse_prefix(format_prefix(prefix_of({5, 5, 4, 4, 3, 1}))), PreferenceError);
}

TEST_CASE("format/parse prefix round-trip over random prefixes") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    PreferencePrefix p;
    for (A a : kAllAgents) p[a] = static_cast<int>(rng() % 6);
    p[A::ResponseGenerator] = 5;
    CHECK(parse_prefix(format_prefix(p)) == p);
  }
}

TEST_CASE("dependency scores") {
  CHECK(dependency_score(prefix_of({3, 5, 4, 4, 5, 1})) == 22);
  CHECK(dependency_score(prefix_of({1, 0, 0, 0, 5, 0})) == 6);
  CHECK(dependency_score(prefix_of({5, 5, 5, 5, 5, 5})) == 30);
  CHECK(dependency_score(prefix_of({0, 0, 0, 0, 5, 0})) == 5);
  CHECK_THROWS_AS(check_prefix(prefix_of({6, 0, 0, 0, 5, 0})), PreferenceError);
  CHECK_THROWS_AS(check_prefix(prefix_of({0, -1, 0, 0, 5, 0})), PreferenceError);
}

TEST_CASE("build_ranked_sample sizes") {
  const std::string q = "q";
  auto make = [&](int m, int n) {
    std::vector<ScoredTrajectory> w, l;
    for (int i = 0; i < m; ++i) w.push_back(scored(q, "w" + std::to_string(i), {1, i % 6, 0, 0, 5, 0}, Label::Win));
    for (int i = 0; i < n; ++i) l.push_back(scored(q, "l" + std::to_string(i), {1, 0, 0, 0, 5, 0}, Label::Lose));
    return std::pair{w, l};
  };
  {
    auto [w, l] = make(10, 10);
    const auto s = build_ranked_sample(q, w, l, 5);
    CHECK(s.ordered_winners.size() == 5);
    CHECK(s.rejected.size() == 15);
  }
  {
    auto [w, l] = make(1, 1);
    const auto s = build_ranked_sample(q, w, l, 1);
    CHECK(s.ordered_winners.size() == 1);
    REQUIRE(s.rejected.size() == 1);
    CHECK(s.rejected[0].label == Label::Lose);
  }
}

TEST_CASE("build_ranked_sample orders by dependency score") {
  const std::string q = "q";
  const std::vector<ScoredTrajectory> winners{
      scored(q, "a", {3, 5, 4, 4, 5, 1}, Label::Win),  // 22
      scored(q, "b", {1, 4, 4, 3, 5, 1}, Label::Win),  // 18
      scored(q, "c", {5, 5, 5, 4, 5, 1}, Label::Win),  // 25
  };
  const auto s = build_ranked_sample(q, winners, {}, 2);
  REQUIRE(s.k() == 2);
  CHECK(dependency_score(s.ordered_winners[0]) == 25);
  CHECK(dependency_score(s.ordered_winners[1]) == 22);
  REQUIRE(s.rejected.size() == 1);
  CHECK(dependency_score(s.rejected[0]) == 18);
}

TEST_CASE("build_ranked_sample errors") {
  const std::string q = "q";
  const auto w = scored(q, "a", {1, 0, 0, 0, 5, 0}, Label::Win);
  const auto l = scored(q, "b", {1, 0, 0, 0, 5, 0}, Label::Lose);
  using K = PreferenceError::Kind;
  CHECK(preference_kind([&] { build_ranked_sample(q, {w}, {l}, 2); }) == K::InsufficientWinners);
  CHECK(preference_kind([&] { build_ranked_sample(q, {w}, {l}, 0); }) == K::InsufficientWinners);
  const auto other = scored("other", "c", {1, 0, 0, 0, 5, 0}, Label::Lose);
  CHECK(preference_kind([&] { build_ranked_sample(q, {w}, {other}, 1); }) == K::MixedQuestion);
  CHECK(preference_kind([&] { build_ranked_sample(q, {w}, {w}, 1); }) == K::InvalidLabel);
}

TEST_CASE("build_ranked_sample is permutation invariant") {
  std::mt19937_64 rng(3);
  const std::string q = "q";
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<ScoredTrajectory> w, l;
    for (int i = 0; i < 8; ++i) {
      w.push_back(scored(q, "w" + std::to_string(rng() % 4), {1, static_cast<int>(rng() % 6), 4, 4, 5, 1}, Label::Win));
      l.push_back(scored(q, "l" + std::to_string(i), {1, static_cast<int>(rng() % 6), 0, 0, 5, 0}, Label::Lose));
    }
    const auto base = build_ranked_sample(q, w, l, 3);
    std::shuffle(w.begin(), w.end(), rng);
    std::shuffle(l.begin(), l.end(), rng);
    const auto shuffled = build_ranked_sample(q, w, l, 3);
    CHECK(shuffled.ordered_winners == base.ordered_winners);
    auto key = [](const std::vector<ScoredTrajectory>& v) {
      std::vector<std::string> out;
      for (const auto& s : v) out.push_back(serialize_trajectory(s.trajectory) + format_prefix(s.prefix));
      std::sort(out.begin(), out.end());
      return out;
    };
    CHECK(key(shuffled.rejected) == key(base.rejected));
    // Every ordered winner scores at least as high as every demoted winner.
    for (const auto& top : base.ordered_winners) {
      for (const auto& r : base.rejected) {
        if (r.label == Label::Win) CHECK(dependency_score(top) >= dependency_score(r));
      }
    }
  }
}

TEST_CASE("jsonl round-trip") {
  const std::vector<ScoredTrajectory> records{
      scored("q1", "Paris", {1, 5, 4, 4, 5, 1}, Label::Win),
      scored("q1", "Rome", {1, 0, 0, 0, 5, 0}, Label::Lose),
      {parse_trajectory("Q: q2\n⟨Reconstructor⟩a\nb⟨/eoi⟩⟨Retriever⟩[1][2]⟨/eor⟩⟨Filter⟩[2]⟨/eof⟩"
                        "⟨Locator⟩[Relevant] span⟨/eol⟩⟨Generator⟩ü⟨/eog⟩"),
       prefix_of({5, 5, 4, 4, 5, 5}), Label::Win},
  };
  const auto path = temp_path("roundtrip.jsonl");
  emit_jsonl(records, path);
  CHECK(load_jsonl(path) == records);

  const auto sample = build_ranked_sample("q1", {records[0]}, {records[1]}, 1);
  const auto ranked_path = temp_path("ranked.jsonl");
  emit_ranked_jsonl({sample, sample}, ranked_path);
  const auto back = load_ranked_jsonl(ranked_path);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == sample);
}

TEST_CASE("jsonl schema violations carry line numbers") {
  const auto path = temp_path("bad.jsonl");
  const std::string good =
      R"({"question":"q","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eog⟩","prefix_scores":{"Reconstructor":1,"Retriever":0,"Filter":0,"Locator":0,"Generator":5,"Verifier":0},"label":"win"})";
  auto expect_violation = [&](const std::string& second_line, const std::string& field) {
    {
      std::ofstream out(path);
      out << good << "\n" << second_line << "\n";
    }
    try {
      load_jsonl(path);
      FAIL("expected SchemaViolation");
    } catch (const SchemaViolation& e) {
      CHECK(e.line() == 2);
      CHECK(e.field() == field);
    }
  };
  expect_violation(R"({"question":"q","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eog⟩","label":"win"})",
                   "prefix_scores");
  expect_violation(R"({"question":"q","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eol⟩","prefix_scores":{},"label":"win"})",
                   "trajectory_text");
  expect_violation(
      R"({"question":"q","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eog⟩","prefix_scores":{"Reconstructor":1,"Retriever":0,"Filter":0,"Locator":0,"Generator":4,"Verifier":0},"label":"win"})",
      "prefix_scores");
  expect_violation(
      R"({"question":"q","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eog⟩","prefix_scores":{"Reconstructor":1,"Retriever":0,"Filter":0,"Locator":0,"Generator":5,"Verifier":0},"label":"draw"})",
      "label");
  expect_violation(
      R"({"question":"other","trajectory_text":"Q: q\n⟨Generator⟩a⟨/eog⟩","prefix_scores":{"Reconstructor":1,"Retriever":0,"Filter":0,"Locator":0,"Generator":5,"Verifier":0},"label":"win"})",
      "question");
  expect_violation("{not json", "<record>");
  CHECK_THROWS_AS(load_jsonl(temp_path("does_not_exist.jsonl")), IoFailure);
}

TEST_CASE("golden fixture: stored dependency scores match recomputation") {
  const auto path = std::filesystem::path(AGENTALIGN_TEST_DATA_DIR) / "golden_records.jsonl";
  const auto records = load_jsonl(path);
  REQUIRE(records.size() == 20);
  std::ifstream in(path);
  std::string line;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    int sum = 0;
    for (const auto& [agent, score] : j.at("prefix_scores").items()) sum += score.get<int>();
    CHECK(j.at("dependency_score").get<int>() == sum);
    CHECK(dependency_score(records[i]) == sum);
    ++i;
  }
}
