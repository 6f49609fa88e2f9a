#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "agentalign/bench.hpp"
#include "agentalign/errors.hpp"

using namespace agentalign;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("agentalign_bench_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<SyntheticQuestion> train_questions(const SyntheticDataset& d) {
  std::vector<SyntheticQuestion> out;
  for (const auto& q : d.questions) {
    if (!in_eval_split(q.id)) out.push_back(q);
  }
  return out;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.sft.steps = 15;
  cfg.preference.steps = 20;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST_CASE("config: parsing, comments and typed getters") {
  const auto cfg = Config::parse("# header\nbeta = 0.25\n\nsteps=12  # trailing\nname = dadpo run\nflag = true\nbeta = 0.5\n");
  CHECK(cfg.get_double("beta", 0.0) == 0.5);
  CHECK(cfg.get_uint("steps", 0) == 12);
  CHECK(cfg.get_string("name", "") == "dadpo run");
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_int("missing", -3) == -3);
  CHECK_FALSE(cfg.contains("missing"));
  CHECK(cfg.entries().size() == 4);
}

TEST_CASE("config: malformed input names line and key") {
  try {
    Config::parse("a = 1\nnot a pair\n");
    FAIL("expected SchemaViolation");
  } catch (const SchemaViolation& e) {
    CHECK(e.line() == 2);
  }
  const auto cfg = Config::parse("x = 1\nsteps = ten\n");
  try {
    (void)cfg.get_uint("steps", 0);
    FAIL("expected SchemaViolation");
  } catch (const SchemaViolation& e) {
    CHECK(e.line() == 2);
    CHECK(e.field() == "steps");
  }
  CHECK_THROWS_AS((void)Config::parse("x = -1").get_uint("x", 0), SchemaViolation);
  CHECK_THROWS_AS((void)Config::parse("x = maybe").get_bool("x", false), SchemaViolation);
  CHECK_THROWS_AS((void)Config::parse("= 3"), SchemaViolation);
  CHECK_THROWS_AS(Config::load(temp_path("does_not_exist.cfg")), IoFailure);
}

TEST_CASE("config: training keys") {
  const auto t = train_config_from(
      Config::parse("beta = 0.2\nalpha1 = 0.3\ncontexts = 8\nreduction = mean\nsteps = 7\nstep_size = 3\n"));
  CHECK(t.beta.value() == 0.2);
  CHECK(t.mix.alpha1() == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(t.mix.alpha2() == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(t.contexts == 8);
  CHECK(t.reduction == ListwiseReduction::Mean);
  CHECK(t.preference.steps == 7);
  CHECK(t.preference.step_size == 3.0);
  CHECK_THROWS_AS(train_config_from(Config::parse("reduction = max")), SchemaViolation);
  CHECK_THROWS_AS(train_config_from(Config::parse("beta = -1")), SchemaViolation);
  CHECK_THROWS_AS(train_config_from(Config::parse("alpha1 = 0.3\nalpha2 = 0.3")), SchemaViolation);
  CHECK_THROWS_AS(train_config_from(Config::parse("contexts = 0")), SchemaViolation);
}

// ---------------------------------------------------------------------------
// Synthetic data

TEST_CASE("gen_synthetic: counts, determinism and referential integrity") {
  const auto d = gen_synthetic(7, 100, 0.5);
  std::size_t knowledge = 0;
  for (const auto& q : d.questions) {
    knowledge += q.features.needs_external_knowledge;
    CHECK(q.gold_doc_id.has_value() == q.features.needs_external_knowledge);
    if (q.gold_doc_id) {
      const auto passage = d.kb.find(*q.gold_doc_id);
      REQUIRE(passage.has_value());
      CHECK(passage->find(entity_word(q.id)) != std::string::npos);
      CHECK(passage->find(q.gold_answer) != std::string::npos);
      CHECK_FALSE(q.parametric_known);
    }
    check_prefix(q.annotation);
  }
  CHECK(knowledge == 50);

  const auto again = gen_synthetic(7, 100, 0.5);
  CHECK(again.questions == d.questions);
  CHECK(again.kb.passages() == d.kb.passages());
  CHECK(gen_synthetic(8, 100, 0.5).questions != d.questions);

  CHECK(gen_synthetic(1, 9, 0.0).kb.passages().size() == 3);
  std::size_t all = 0;
  for (const auto& q : gen_synthetic(1, 9, 1.0).questions) all += q.features.needs_external_knowledge;
  CHECK(all == 9);
  std::size_t rounded = 0;
  for (const auto& q : gen_synthetic(3, 7, 0.5).questions) rounded += q.features.needs_external_knowledge;
  CHECK(rounded == 4);

  CHECK_THROWS_AS(gen_synthetic(1, 0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic(1, 5, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic(1, 5, std::nan("")), std::invalid_argument);
}

TEST_CASE("gen_synthetic: the gold passage is the top retrieval hit") {
  const auto d = gen_synthetic(5, 60, 0.5);
  for (const auto& q : d.questions) {
    if (!q.gold_doc_id) continue;
    const auto hits = d.kb.search(q.text, 3);
    REQUIRE_FALSE(hits.empty());
    CHECK(hits.front().id == *q.gold_doc_id);
  }
}

TEST_CASE("dataset files round-trip and reject bad records") {
  const auto d = gen_synthetic(4, 40, 0.4);
  const auto path = temp_path("dataset.jsonl");
  save_dataset(d, path);
  const auto back = load_dataset(path);
  CHECK(back.questions == d.questions);
  CHECK(back.kb.passages() == d.kb.passages());

  const auto bad = temp_path("dataset_bad.jsonl");
  {
    std::ofstream out(bad);
    out << slurp(path).substr(0, slurp(path).find('\n') + 1) << "{\"id\": 3}\n";
  }
  try {
    load_dataset(bad);
    FAIL("expected SchemaViolation");
  } catch (const SchemaViolation& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(load_dataset(temp_path("missing.jsonl")), IoFailure);
}

TEST_CASE("train/eval split is deterministic and about 80/20") {
  std::size_t eval = 0;
  for (std::size_t id = 0; id < 2000; ++id) {
    CHECK(in_eval_split(id) == in_eval_split(id));
    eval += in_eval_split(id);
  }
  const double frac = static_cast<double>(eval) / 2000.0;
  CHECK(frac > 0.15);
  CHECK(frac < 0.25);
}

// ---------------------------------------------------------------------------
// Preference corpus

TEST_CASE("winner and loser recipes") {
  const auto d = gen_synthetic(9, 40, 0.5);
  const Vocab vocab = bench_vocab();
  CHECK(vocab.size() <= kMaxVocabSize);
  for (const auto& q : d.questions) {
    const auto w = winner_trajectory(q);
    validate(w);
    CHECK(w.final_answer() == q.gold_answer);
    CHECK(w.contains(AgentKind::KnowledgeRetriever) == q.features.needs_external_knowledge);
    (void)encode(vocab, serialize_steps(w));
    for (std::size_t i = 0; i < 10; ++i) {
      const auto kind = loser_kind_for(q, i);
      const auto l = loser_trajectory(q, kind, i);
      if (kind == LoserKind::Decoupled) {
        CHECK_THROWS_AS(validate(l), ValidationError);
      } else {
        validate(l);
      }
      CHECK(l.final_answer() != q.gold_answer);
      (void)encode(vocab, serialize_steps(l));
      if (kind == LoserKind::Decoupled) {
        CHECK(l.contains(AgentKind::KnowledgeRetriever));
        CHECK_FALSE(l.contains(AgentKind::KnowledgeFilter));
        CHECK_FALSE(l.contains(AgentKind::KnowledgeLocator));
      }
      CHECK((kind == LoserKind::SkippedRetrieval) == (i % 3 == 2 && q.features.needs_external_knowledge));
    }
  }
}

TEST_CASE("build_training_corpus: shape, labels and ordering") {
  const auto d = gen_synthetic(2, 30, 0.5);
  const auto corpus = build_training_corpus(d.questions, 10, 10, 5, 2);
  REQUIRE(corpus.size() == 30);
  for (const auto& s : corpus) {
    CHECK(s.k() == 5);
    CHECK(s.rejected.size() == 15);
    std::size_t losers = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& item = s.item(i);
      check_prefix(item.prefix);
      if (item.label == Label::Lose) ++losers;
      if (!item.trajectory.contains(AgentKind::KnowledgeFilter) &&
          item.trajectory.contains(AgentKind::KnowledgeRetriever)) {
        CHECK(item.label == Label::Lose);
      }
    }
    CHECK(losers == 10);
    for (std::size_t i = 1; i < s.k(); ++i) {
      CHECK(dependency_score(s.ordered_winners[i - 1]) >= dependency_score(s.ordered_winners[i]));
    }
    for (const auto& r : s.rejected) {
      if (r.label == Label::Win) CHECK(dependency_score(r) <= dependency_score(s.ordered_winners.back()));
    }
  }
  CHECK(build_training_corpus(d.questions, 10, 10, 5, 2) == corpus);

  // A question's sample does not depend on its neighbours.
  const std::vector<SyntheticQuestion> single{d.questions[7]};
  CHECK(build_training_corpus(single, 10, 10, 5, 2).front() == corpus[7]);

  CHECK_THROWS(build_training_corpus(d.questions, 3, 10, 5, 2));
}

TEST_CASE("a winner with all-high knowledge scores outranks a mixed one") {
  const auto d = gen_synthetic(1, 20, 1.0);
  const auto& q = d.questions.front();
  PreferencePrefix high = score_prefix(q.features);
  high[AgentKind::KnowledgeRetriever] = 5;
  high[AgentKind::KnowledgeFilter] = 5;
  high[AgentKind::KnowledgeLocator] = 5;
  PreferencePrefix mixed = high;
  mixed[AgentKind::KnowledgeFilter] = 1;
  mixed[AgentKind::KnowledgeLocator] = 2;
  const ScoredTrajectory a{winner_trajectory(q), mixed, Label::Win};
  const ScoredTrajectory b{winner_trajectory(q), high, Label::Win};
  const auto s = build_ranked_sample(q.text, {a, b}, {}, 1);
  CHECK(s.ordered_winners.front().prefix == high);
  CHECK(s.rejected.front().prefix == mixed);
}

TEST_CASE("jitter_prefix stays within one point and keeps the Generator at 5") {
  std::mt19937_64 rng(3);
  const auto base = score_prefix({true, Confidence::Low, Complexity::Complex});
  for (int i = 0; i < 500; ++i) {
    const auto p = jitter_prefix(base, rng);
    check_prefix(p);
    for (AgentKind a : kAllAgents) CHECK(std::abs(p[a] - base[a]) <= 1);
  }
}

TEST_CASE("golden fixtures match the generator and round-trip byte for byte") {
  const std::filesystem::path dir(AGENTALIGN_TEST_DATA_DIR);
  const auto d = gen_synthetic(11, 60, 0.5);

  // Records: every item of the first question's ranked sample.
  const auto corpus = build_training_corpus({d.questions[0]}, 10, 10, 5, 11);
  std::vector<ScoredTrajectory> records;
  for (std::size_t i = 0; i < corpus[0].size(); ++i) records.push_back(corpus[0].item(i));
  const auto regenerated = temp_path("golden_records.jsonl");
  emit_jsonl(records, regenerated);
  CHECK(slurp(regenerated) == slurp(dir / "golden_records.jsonl"));

  // Trajectories: alternating winners and losers over 50 questions.
  std::ifstream in(dir / "golden_trajectories.jsonl");
  std::string line;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    REQUIRE(i < 50);
    const auto text = nlohmann::json::parse(line).at("text").get<std::string>();
    const auto& q = d.questions[i];
    const Trajectory expected = i % 2 ? loser_trajectory(q, loser_kind_for(q, i / 2), i) : winner_trajectory(q);
    CHECK(serialize_trajectory(expected) == text);
    const auto parsed = parse_trajectory(text);
    CHECK(serialize_trajectory(parsed) == text);
    CHECK(parsed == expected);
    ++i;
  }
  CHECK(i == 50);
}

// ---------------------------------------------------------------------------
// Training

TEST_CASE("train: sft skips stage 2") {
  const auto d = gen_synthetic(3, 30, 0.5);
  const auto corpus = build_training_corpus(train_questions(d), 10, 10, 5, 3);
  const auto r = train(Method::Sft, corpus, bench_vocab(), small_config());
  CHECK(r.policy == r.reference);
  CHECK(r.metrics.size() == 15);
  for (const auto& m : r.metrics) CHECK(m.stage == "sft");
  for (std::size_t i = 1; i < r.metrics.size(); ++i) CHECK(r.metrics[i].loss <= r.metrics[i - 1].loss);
  CHECK(r.metrics.back().loss < r.metrics.front().loss);
}

TEST_CASE("train: dadpo logs both components and the loss never increases") {
  const auto d = gen_synthetic(3, 30, 0.5);
  const auto corpus = build_training_corpus(train_questions(d), 10, 10, 5, 3);
  const auto cfg = small_config();
  const auto r = train(Method::Dadpo, corpus, bench_vocab(), cfg);
  const auto sft = train(Method::Sft, corpus, bench_vocab(), cfg);
  CHECK(r.reference == sft.policy);
  CHECK_FALSE(r.policy == r.reference);
  REQUIRE(r.metrics.size() == cfg.sft.steps + cfg.preference.steps);
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t i = cfg.sft.steps; i < r.metrics.size(); ++i) {
    const auto& m = r.metrics[i];
    CHECK(m.stage == "dadpo");
    CHECK(m.nll > 0.0);
    CHECK(m.inter > 0.0);
    CHECK(m.loss == doctest::Approx(0.5 * m.nll + 0.5 * m.inter).epsilon(1e-12));
    CHECK(m.loss <= previous);
    previous = m.loss;
  }
  CHECK(r.metrics.back().reward_gap > 0.0);

  const auto path = temp_path("metrics.csv");
  write_metrics_csv(r.metrics, path);
  std::istringstream csv(slurp(path));
  std::string header;
  std::getline(csv, header);
  CHECK(header == "stage,step,loss,reward_gap,nll,inter,step_size,accepted");
  std::size_t rows = 0;
  for (std::string l; std::getline(csv, l);) ++rows;
  CHECK(rows == r.metrics.size());
}

TEST_CASE("train: identical inputs give bit-identical policies") {
  const auto d = gen_synthetic(6, 25, 0.5);
  const auto corpus = build_training_corpus(train_questions(d), 10, 10, 5, 6);
  auto cfg = small_config();
  cfg.batch_size = 4;
  for (Method m : {Method::Dpo, Method::Fdpo, Method::Dadpo}) {
    const auto a = train(m, corpus, bench_vocab(), cfg);
    const auto b = train(m, corpus, bench_vocab(), cfg);
    CHECK(a.policy == b.policy);
    CHECK(a.metrics.size() == b.metrics.size());
    CHECK(a.metrics.back().loss == b.metrics.back().loss);
  }
}

TEST_CASE("train: errors") {
  CHECK_THROWS_AS(train(Method::Dadpo, {}, bench_vocab(), small_config()), LossError);
  CHECK(parse_method("fdpo") == Method::Fdpo);
  CHECK(method_name(Method::Dadpo) == "dadpo");
  CHECK_THROWS_AS(parse_method("ppo"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST_CASE("ranking accuracy: chance level for an untrained policy") {
  const auto d = gen_synthetic(12, 480, 0.5);
  const auto corpus = build_training_corpus(d.questions, 10, 10, 5, 12);
  const ToyPolicy p = init_policy(bench_vocab(), 16, 4, 0.5);
  const double acc = ranking_accuracy(p, p, corpus, Beta(0.1), 99);
  const double sigma = std::sqrt(0.25 * 0.75 / static_cast<double>(corpus.size()));
  CHECK(std::abs(acc - 0.25) < 3.0 * sigma);
}

TEST_CASE("ranking accuracy: an oracle scoring the true order is perfect") {
  const auto d = gen_synthetic(12, 50, 0.5);
  const auto corpus = build_training_corpus(d.questions, 10, 10, 5, 12);
  std::vector<std::vector<double>> scores;
  for (const auto& s : corpus) {
    std::vector<double> v;
    for (std::size_t i = 0; i < s.size(); ++i) v.push_back(-static_cast<double>(i));
    scores.push_back(v);
  }
  CHECK(ranking_accuracy_from_scores(scores, corpus, 1) == 1.0);
  CHECK_THROWS_AS(ranking_accuracy_from_scores({}, corpus, 1), std::invalid_argument);
}

TEST_CASE("top1_index: unique maximum and uniform tie-break") {
  std::mt19937_64 rng(1);
  CHECK(top1_index({0.1, 0.7, 0.3}, rng) == 1);
  std::array<int, 3> hits{};
  for (int i = 0; i < 3000; ++i) ++hits[top1_index({1.0, 0.0, 1.0}, rng) == 0 ? 0 : 2];
  CHECK(hits[0] > 1300);
  CHECK(hits[2] > 1300);
  CHECK_THROWS_AS(top1_index({}, rng), std::invalid_argument);
  CHECK_THROWS_AS(top1_index({std::nan(""), std::nan("")}, rng), std::invalid_argument);
}

TEST_CASE("knowledge bands") {
  PreferencePrefix p = score_prefix({});
  CHECK(knowledge_band(p) == Band::Low);
  p[AgentKind::KnowledgeRetriever] = 2;
  p[AgentKind::KnowledgeFilter] = 2;
  p[AgentKind::KnowledgeLocator] = 2;
  CHECK(knowledge_band(p) == Band::Mid);
  p[AgentKind::KnowledgeLocator] = 1;
  CHECK(knowledge_band(p) == Band::Low);
  p = score_prefix({true, Confidence::Low, Complexity::Simple});
  CHECK(knowledge_band(p) == Band::High);
  CHECK(band_name(Band::Mid) == "mid");
}

TEST_CASE("bench backends: knowledge questions fail without evidence") {
  const auto d = gen_synthetic(2, 40, 0.5);
  const auto backends = make_bench_backends(d, false);
  for (const auto& q : d.questions) {
    const auto resp = backends.at(AgentKind::ResponseGenerator)
                          ->invoke({AgentKind::ResponseGenerator, q.text, "mode: parametric", ""});
    if (q.features.needs_external_knowledge) CHECK(resp.payload != q.gold_answer);
    CHECK((resp.payload == q.gold_answer) == q.parametric_known);
  }
  CHECK_THROWS(backends.at(AgentKind::IntentReconstructor)->invoke({AgentKind::IntentReconstructor, "nope", "", ""}));
}

TEST_CASE("answer evaluation: tokens, bands and worker independence") {
  const auto d = gen_synthetic(21, 200, 0.5);
  std::vector<std::size_t> ids(d.questions.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const auto adaptive = evaluate_answers(d, ids, {}, false);
  const auto full = evaluate_answers(d, ids, {}, true);
  CHECK(adaptive.mean_tokens < full.mean_tokens);
  CHECK(adaptive.band_counts[0] + adaptive.band_counts[1] + adaptive.band_counts[2] == ids.size());
  for (double a : adaptive.band_accuracy) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  CHECK(adaptive.band_accuracy[0] <= adaptive.band_accuracy[1]);
  CHECK(adaptive.band_accuracy[1] <= adaptive.band_accuracy[2]);
  CHECK(adaptive.band_accuracy[2] == 1.0);

  const auto threaded = evaluate_answers(d, ids, {}, false, 4);
  CHECK(threaded.answer_accuracy == adaptive.answer_accuracy);
  CHECK(threaded.mean_tokens == adaptive.mean_tokens);
  CHECK(threaded.band_accuracy == adaptive.band_accuracy);

  CHECK_THROWS_AS(evaluate_answers(d, {}, {}, false), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_answers(d, {1000}, {}, false), std::invalid_argument);
}

TEST_CASE("evaluate assembles the report") {
  const auto d = gen_synthetic(8, 60, 0.5);
  std::vector<SyntheticQuestion> eval;
  std::vector<std::size_t> ids;
  for (const auto& q : d.questions) {
    if (in_eval_split(q.id)) {
      eval.push_back(q);
      ids.push_back(q.id);
    }
  }
  REQUIRE_FALSE(ids.empty());
  const auto samples = build_training_corpus(eval, 10, 10, 5, 8);
  const ToyPolicy p(bench_vocab(), 16);
  const auto report = evaluate("sft", p, p, samples, d, ids, {});
  CHECK(report.method == "sft");
  CHECK(report.ranking_accuracy >= 0.0);
  CHECK(report.ranking_accuracy <= 1.0);
  CHECK(report.band_counts[0] + report.band_counts[1] + report.band_counts[2] == ids.size());
}

// ---------------------------------------------------------------------------
// Comparison

TEST_CASE("compare_report: best flag, tie-break and CSV round-trip") {
  EvalReport dadpo{"dadpo", 0.9, 0.7, 80.5, {0.5, 0.9, 1.0}, {10, 8, 2}};
  EvalReport dpo{"dpo", 0.4, 0.7, 100.25, {0.5, 0.8, 1.0}, {10, 8, 2}};
  const auto c = compare_report({dpo, dadpo});
  CHECK(c.best == "dadpo");
  CHECK(c.csv.find("dadpo,0.9,0.7,80.5,0.8029925187032418,0.5,0.9,1,10,8,2,yes\n") != std::string::npos);
  CHECK(c.csv.find("dpo,0.4,0.7,100.25,1,0.5,0.8,1,10,8,2,no\n") != std::string::npos);
  CHECK(c.table.find("0.8029925187032418") != std::string::npos);
  CHECK(c.csv.find("dadpo") < c.csv.find("dpo,"));

  const auto back = parse_report_csv(c.csv);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == dadpo);
  CHECK(back[1] == dpo);

  EvalReport b = dadpo;
  b.method = "b";
  EvalReport a = dadpo;
  a.method = "a";
  CHECK(compare_report({b, a}).best == "a");
  CHECK(compare_report({a, b}).csv == compare_report({b, a}).csv);

  CHECK_THROWS_AS(compare_report({a}), std::invalid_argument);
  CHECK_THROWS_AS(compare_report({a, a}), std::invalid_argument);
  CHECK_THROWS_AS(parse_report_csv("method,x\n"), SchemaViolation);
  std::string broken = c.csv;
  broken.replace(broken.find("0.9"), 3, "zz");
  CHECK_THROWS_AS(parse_report_csv(broken), SchemaViolation);
}
