#include "agentalign/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "agentalign/errors.hpp"
#include "agentalign/numeric.hpp"

namespace agentalign {

namespace {

using nlohmann::json;
using A = AgentKind;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator per (seed, purpose, item).
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt, std::uint64_t item) {
  return std::mt19937_64(splitmix(seed ^ splitmix(salt ^ splitmix(item))));
}

constexpr std::uint64_t kSaltQuestions = 1;
constexpr std::uint64_t kSaltCorpus = 2;
constexpr std::uint64_t kSaltPairs = 3;
constexpr std::uint64_t kSaltBatches = 4;

std::string answer_word(std::size_t i) { return "ans" + std::to_string(i % kAnswerCount); }

std::size_t answer_index(const std::string& answer) { return std::stoul(answer.substr(3)); }

std::string wrong_answer(const SyntheticQuestion& q, std::size_t variant) {
  return answer_word(answer_index(q.gold_answer) + 1 + variant % (kAnswerCount - 1));
}

std::string shortest(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool has_word(std::string_view text, std::string_view word) {
  const auto words = split_words(text);
  return std::find(words.begin(), words.end(), word) != words.end();
}

int clamp_score(int s) { return std::clamp(s, kMinAgentScore, kMaxAgentScore); }

json prefix_json(const PreferencePrefix& p) {
  json j = json::object();
  for (A a : kAllAgents) j[std::string(agent_name(a))] = p[a];
  return j;
}

template <typename T>
T field(const json& j, std::size_t line, const char* name) {
  if (!j.contains(name)) throw SchemaViolation(line, name, "missing field");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw SchemaViolation(line, name, e.what());
  }
}

PreferencePrefix prefix_from_json(const json& j, std::size_t line, const char* name) {
  if (!j.is_object() || j.size() != kAgentCount) throw SchemaViolation(line, name, "expected six agent scores");
  PreferencePrefix p;
  for (const auto& [key, value] : j.items()) {
    const auto agent = agent_from_name(key);
    if (!agent || !value.is_number_integer()) throw SchemaViolation(line, name, "bad entry '" + key + "'");
    p[*agent] = value.get<int>();
  }
  try {
    check_prefix(p);
  } catch (const PreferenceError& e) {
    throw SchemaViolation(line, name, e.what());
  }
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic questions.

std::string entity_word(std::size_t id) { return "entity" + std::to_string(id); }

SyntheticDataset gen_synthetic(std::uint64_t seed, std::size_t n, double knowledge_fraction) {
  if (n == 0) throw std::invalid_argument("gen_synthetic needs at least one question");
  if (!(knowledge_fraction >= 0.0 && knowledge_fraction <= 1.0)) {
    throw std::invalid_argument("knowledge fraction must lie in [0, 1]");
  }
  auto rng = stream(seed, kSaltQuestions, 0);
  const auto knowledge_count = static_cast<std::size_t>(std::llround(static_cast<double>(n) * knowledge_fraction));
  std::vector<char> needs(n, 0);
  std::fill(needs.begin(), needs.begin() + static_cast<std::ptrdiff_t>(knowledge_count), 1);
  seeded_shuffle(needs, rng);

  SyntheticDataset data;
  data.questions.reserve(n);
  for (std::size_t id = 0; id < n; ++id) {
    SyntheticQuestion q;
    q.id = id;
    q.text = "Q" + std::to_string(id) + " what value is linked to " + entity_word(id);
    q.features.needs_external_knowledge = needs[id] != 0;
    q.features.answer_confidence = uniform01(rng) < 0.5 ? Confidence::Low : Confidence::High;
    q.features.instruction_complexity = uniform01(rng) < 0.5 ? Complexity::Complex : Complexity::Simple;
    q.gold_answer = answer_word(uniform_below(rng, kAnswerCount));
    const bool known = uniform01(rng) < 0.5;
    q.parametric_known = known && !q.features.needs_external_knowledge;

    q.annotation = score_prefix(q.features);
    for (A a : {A::KnowledgeRetriever, A::KnowledgeFilter, A::KnowledgeLocator}) {
      const int delta = q.features.needs_external_knowledge ? -static_cast<int>(uniform_below(rng, 3))
                                                           : static_cast<int>(uniform_below(rng, 2));
      q.annotation[a] = clamp_score(q.annotation[a] + delta);
    }
    if (q.features.needs_external_knowledge) {
      q.gold_doc_id = static_cast<int>(id) + 1;
      data.kb.add(*q.gold_doc_id, entity_word(id) + " record states " + q.gold_answer);
    }
    data.questions.push_back(std::move(q));
  }
  const std::size_t distractors = n / 4 + 1;
  for (std::size_t j = 0; j < distractors; ++j) {
    data.kb.add(1000000 + static_cast<int>(j), "archive note " + std::to_string(j) + " mentions " + answer_word(j));
  }
  return data;
}

void save_dataset(const SyntheticDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  for (const auto& q : data.questions) {
    json j;
    j["id"] = q.id;
    j["text"] = q.text;
    j["needs_external_knowledge"] = q.features.needs_external_knowledge;
    j["answer_confidence"] = q.features.answer_confidence == Confidence::Low ? "low" : "high";
    j["instruction_complexity"] = q.features.instruction_complexity == Complexity::Complex ? "complex" : "simple";
    j["gold_answer"] = q.gold_answer;
    j["gold_doc_id"] = q.gold_doc_id ? json(*q.gold_doc_id) : json(nullptr);
    j["annotation"] = prefix_json(q.annotation);
    j["parametric_known"] = q.parametric_known;
    out << j.dump() << "\n";
  }
  for (const auto& [id, passage] : data.kb.passages()) {
    out << json{{"doc_id", id}, {"passage", passage}}.dump() << "\n";
  }
  if (!out) throw IoFailure("write error on " + path.string());
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open " + path.string() + " for reading");
  SyntheticDataset data;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaViolation(number, "<record>", e.what());
    }
    if (!j.is_object()) throw SchemaViolation(number, "<record>", "expected an object");
    if (j.contains("doc_id")) {
      try {
        data.kb.add(field<int>(j, number, "doc_id"), field<std::string>(j, number, "passage"));
      } catch (const std::invalid_argument& e) {
        throw SchemaViolation(number, "doc_id", e.what());
      }
      continue;
    }
    SyntheticQuestion q;
    q.id = field<std::size_t>(j, number, "id");
    q.text = field<std::string>(j, number, "text");
    q.features.needs_external_knowledge = field<bool>(j, number, "needs_external_knowledge");
    const auto conf = field<std::string>(j, number, "answer_confidence");
    if (conf != "low" && conf != "high") throw SchemaViolation(number, "answer_confidence", "expected low or high");
    q.features.answer_confidence = conf == "low" ? Confidence::Low : Confidence::High;
    const auto cx = field<std::string>(j, number, "instruction_complexity");
    if (cx != "simple" && cx != "complex") {
      throw SchemaViolation(number, "instruction_complexity", "expected simple or complex");
    }
    q.features.instruction_complexity = cx == "complex" ? Complexity::Complex : Complexity::Simple;
    q.gold_answer = field<std::string>(j, number, "gold_answer");
    if (q.gold_answer.rfind("ans", 0) != 0 || q.gold_answer.size() != 4 || q.gold_answer[3] < '0' ||
        q.gold_answer[3] >= '0' + static_cast<int>(kAnswerCount)) {
      throw SchemaViolation(number, "gold_answer", "expected ans0 .. ans7");
    }
    if (!j.contains("gold_doc_id")) throw SchemaViolation(number, "gold_doc_id", "missing field");
    if (!j["gold_doc_id"].is_null()) q.gold_doc_id = field<int>(j, number, "gold_doc_id");
    if (!j.contains("annotation")) throw SchemaViolation(number, "annotation", "missing field");
    q.annotation = prefix_from_json(j["annotation"], number, "annotation");
    q.parametric_known = field<bool>(j, number, "parametric_known");
    data.questions.push_back(std::move(q));
  }
  if (in.bad()) throw IoFailure("read error on " + path.string());
  for (const auto& q : data.questions) {
    if (q.gold_doc_id && !data.kb.find(*q.gold_doc_id)) {
      throw SchemaViolation(0, "gold_doc_id", "question " + std::to_string(q.id) + " names a missing passage");
    }
  }
  return data;
}

bool in_eval_split(std::size_t question_id) { return question_bucket(std::to_string(question_id), 5) == 0; }

// ---------------------------------------------------------------------------
// Preference corpus.

Vocab bench_vocab() {
  std::vector<std::string> words;
  const auto& table = TokenTable::standard();
  for (A a : kAllAgents) words.push_back(table.head_literal(a));
  for (A a : kAllAgents) words.push_back(table.end_literal(a));
  for (A a : kAllAgents) words.push_back("⟨" + std::string(agent_name(a)) + ":");
  for (int s = kMinAgentScore; s <= kMaxAgentScore; ++s) words.push_back(std::to_string(s) + "⟩");
  for (const char* w : {"intent", "retrieved", "kept", "[Relevant]", "[Irrelevant]", "span", "Correct", "wrong"}) {
    words.emplace_back(w);
  }
  for (std::size_t i = 0; i < kAnswerCount; ++i) words.push_back(answer_word(i));
  return Vocab::with_words(words);
}

namespace {

std::string intent_payload(const SyntheticQuestion& q) {
  return q.features.instruction_complexity == Complexity::Complex ? "intent\nintent" : "intent";
}

std::string retrieval_payload(const SyntheticQuestion& q) {
  return q.features.instruction_complexity == Complexity::Complex ? "retrieved\nretrieved" : "retrieved";
}

}  // namespace

Trajectory winner_trajectory(const SyntheticQuestion& q) {
  std::vector<std::pair<A, std::string>> steps{{A::IntentReconstructor, intent_payload(q)}};
  if (q.features.needs_external_knowledge) {
    steps.emplace_back(A::KnowledgeRetriever, retrieval_payload(q));
    steps.emplace_back(A::KnowledgeFilter, "kept");
    steps.emplace_back(A::KnowledgeLocator, "[Relevant] span");
  }
  steps.emplace_back(A::ResponseGenerator, q.gold_answer);
  steps.emplace_back(A::AnswerVerifier, "Correct");
  return make_trajectory(q.text, steps);
}

Trajectory loser_trajectory(const SyntheticQuestion& q, LoserKind kind, std::size_t variant) {
  const std::string wrong = wrong_answer(q, variant);
  std::vector<std::pair<A, std::string>> steps{{A::IntentReconstructor, intent_payload(q)}};
  switch (kind) {
    case LoserKind::Decoupled:
      steps.emplace_back(A::KnowledgeRetriever, retrieval_payload(q));
      steps.emplace_back(A::ResponseGenerator, wrong);
      steps.emplace_back(A::AnswerVerifier, "Correct");
      break;
    case LoserKind::RejectedAnswer: {
      Trajectory t = winner_trajectory(q);
      t.steps[t.steps.size() - 2].payload = wrong;
      t.steps.back().payload = "wrong";
      return t;
    }
    case LoserKind::SkippedRetrieval:
      steps.emplace_back(A::ResponseGenerator, wrong);
      steps.emplace_back(A::AnswerVerifier, "Correct");
      break;
    case LoserKind::NeedlessRetrieval:
      steps.emplace_back(A::KnowledgeRetriever, retrieval_payload(q));
      steps.emplace_back(A::KnowledgeFilter, "kept");
      steps.emplace_back(A::KnowledgeLocator, "[Irrelevant] span");
      steps.emplace_back(A::ResponseGenerator, wrong);
      steps.emplace_back(A::AnswerVerifier, "Correct");
      break;
  }
  return make_trajectory(q.text, steps);
}

LoserKind loser_kind_for(const SyntheticQuestion& q, std::size_t index) {
  switch (index % 3) {
    case 0:
      return LoserKind::Decoupled;
    case 1:
      return LoserKind::RejectedAnswer;
    default:
      return q.features.needs_external_knowledge ? LoserKind::SkippedRetrieval : LoserKind::NeedlessRetrieval;
  }
}

PreferencePrefix jitter_prefix(const PreferencePrefix& base, std::mt19937_64& rng) {
  PreferencePrefix p = base;
  for (A a : kAllAgents) {
    if (a == A::ResponseGenerator) continue;
    p[a] = clamp_score(p[a] + static_cast<int>(uniform_below(rng, 3)) - 1);
  }
  return p;
}

std::vector<RankedSample> build_training_corpus(const std::vector<SyntheticQuestion>& questions,
                                                std::size_t winners_per_q, std::size_t losers_per_q,
                                                std::size_t k, std::uint64_t seed) {
  std::vector<RankedSample> out;
  out.reserve(questions.size());
  for (const auto& q : questions) {
    auto rng = stream(seed, kSaltCorpus, q.id);
    const PreferencePrefix base = score_prefix(q.features);
    std::vector<ScoredTrajectory> winners;
    std::vector<ScoredTrajectory> losers;
    for (std::size_t i = 0; i < winners_per_q; ++i) {
      winners.push_back({winner_trajectory(q), jitter_prefix(base, rng), Label::Win});
    }
    for (std::size_t i = 0; i < losers_per_q; ++i) {
      losers.push_back({loser_trajectory(q, loser_kind_for(q, i), i), jitter_prefix(base, rng), Label::Lose});
    }
    out.push_back(build_ranked_sample(q.text, std::move(winners), std::move(losers), k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.

std::string_view method_name(Method m) noexcept {
  switch (m) {
    case Method::Sft:
      return "sft";
    case Method::Dpo:
      return "dpo";
    case Method::Fdpo:
      return "fdpo";
    case Method::Dadpo:
      return "dadpo";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::Sft, Method::Dpo, Method::Fdpo, Method::Dadpo}) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "' (expected sft, dpo, fdpo or dadpo)");
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig t;
  const auto checked = [&](const char* key, auto&& make) {
    try {
      make();
    } catch (const std::invalid_argument& e) {
      cfg.reject(key, e.what());
    }
  };
  checked("beta", [&] { t.beta = Beta(cfg.get_double("beta", t.beta.value())); });
  checked("alpha1", [&] {
    const double a1 = cfg.get_double("alpha1", 1.0 - cfg.get_double("alpha2", t.mix.alpha2()));
    const double a2 = cfg.get_double("alpha2", 1.0 - a1);
    t.mix = MixCoefficients(a1, a2);
  });
  t.contexts = cfg.get_uint("contexts", t.contexts);
  if (t.contexts == 0) cfg.reject("contexts", "must be at least 1");
  t.seed = cfg.get_uint("seed", t.seed);
  t.init_scale = cfg.get_double("init_scale", t.init_scale);
  if (!(t.init_scale >= 0.0) || !std::isfinite(t.init_scale)) cfg.reject("init_scale", "must be finite and >= 0");
  t.batch_size = cfg.get_uint("batch_size", t.batch_size);
  const std::string reduction = cfg.get_string("reduction", "sum");
  if (reduction == "sum") {
    t.reduction = ListwiseReduction::Sum;
  } else if (reduction == "mean") {
    t.reduction = ListwiseReduction::Mean;
  } else {
    cfg.reject("reduction", "expected sum or mean, got '" + reduction + "'");
  }
  t.sft.step_size = cfg.get_double("sft_step_size", t.sft.step_size);
  t.sft.steps = cfg.get_uint("sft_steps", t.sft.steps);
  t.preference.step_size = cfg.get_double("step_size", t.preference.step_size);
  t.preference.steps = cfg.get_uint("steps", t.preference.steps);
  t.sft.max_halvings = t.preference.max_halvings = cfg.get_uint("max_halvings", t.preference.max_halvings);
  if (!(t.sft.step_size > 0.0)) cfg.reject("sft_step_size", "must be positive");
  if (!(t.preference.step_size > 0.0)) cfg.reject("step_size", "must be positive");
  return t;
}

namespace {

struct EncodedPreference {
  EncodedRankedSample enc;
  std::vector<double> ref_lp;
  EncodedSequence top_winner;
  std::array<std::size_t, 2> pair{};
};

struct Components {
  double nll = 0.0;
  double inter = 0.0;
};

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t stage) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = stream(seed, kSaltBatches, stage);
  seeded_shuffle(order, rng);
  const std::size_t size = batch_size == 0 ? n : std::min(batch_size, n);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + size)));
  }
  return batches;
}

double reward_gap(const LogProbTable& pt, const EncodedPreference& e, double beta) {
  double win = 0.0;
  double rest = 0.0;
  const std::size_t n = e.enc.items.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = beta * (pt.log_prob(e.enc.items[i]) - e.ref_lp[i]);
    (i < e.enc.k ? win : rest) += r;
  }
  const double rest_mean = n > e.enc.k ? rest / static_cast<double>(n - e.enc.k) : 0.0;
  return win / static_cast<double>(e.enc.k) - rest_mean;
}

class PreferenceObjective {
 public:
  PreferenceObjective(Method method, const TrainConfig& cfg, std::vector<EncodedPreference> data)
      : method_(method), cfg_(cfg), data_(std::move(data)) {}

  std::size_t size() const noexcept { return data_.size(); }

  // Per-sample components averaged over the batch; gradient of the combined
  // loss goes into `counts`.
  Components accumulate(const LogProbTable& pt, const std::vector<std::size_t>& batch,
                        Eigen::MatrixXd& counts) const {
    Components c;
    const double w = 1.0 / static_cast<double>(batch.size());
    const double beta = cfg_.beta.value();
    for (std::size_t idx : batch) {
      const auto& e = data_[idx];
      switch (method_) {
        case Method::Dpo:
          c.inter += accumulate_listwise(pt, e.enc.items, e.ref_lp, e.pair, 1, beta, w, counts);
          break;
        case Method::Fdpo:
          c.inter += accumulate_listwise(pt, e.enc.items, e.ref_lp, e.enc.full_order, e.enc.items.size() - 1,
                                         beta, w, counts);
          break;
        case Method::Dadpo: {
          const double a1 = cfg_.mix.alpha1();
          const double a2 = cfg_.mix.alpha2();
          const double reduce =
              cfg_.reduction == ListwiseReduction::Mean ? 1.0 / static_cast<double>(e.enc.k) : 1.0;
          std::vector<std::size_t> order(e.enc.items.size());
          std::iota(order.begin(), order.end(), std::size_t{0});
          if (a1 > 0.0) c.nll += accumulate_nll(pt, e.top_winner, w * a1, counts) / a1;
          if (a2 > 0.0) {
            c.inter += accumulate_listwise(pt, e.enc.items, e.ref_lp, order, e.enc.k, beta, w * a2 * reduce, counts) /
                       a2;
          }
          break;
        }
        case Method::Sft:
          break;
      }
    }
    return c;
  }

  double combine(const Components& c) const {
    if (method_ == Method::Dadpo) return cfg_.mix.alpha1() * c.nll + cfg_.mix.alpha2() * c.inter;
    return c.inter;
  }

  double gap(const LogProbTable& pt, const std::vector<std::size_t>& batch) const {
    double g = 0.0;
    for (std::size_t idx : batch) g += reward_gap(pt, data_[idx], cfg_.beta.value());
    return g / static_cast<double>(batch.size());
  }

 private:
  Method method_;
  const TrainConfig& cfg_;
  std::vector<EncodedPreference> data_;
};

Eigen::MatrixXd zeros_like(const ToyPolicy& p) {
  return Eigen::MatrixXd::Zero(p.logits().rows(), p.logits().cols());
}

}  // namespace

TrainResult train(Method method, const std::vector<RankedSample>& corpus, const Vocab& vocab,
                  const TrainConfig& cfg) {
  if (corpus.empty()) throw LossError(LossError::Kind::EmptySample, "training corpus is empty");
  ToyPolicy policy = init_policy(vocab, cfg.contexts, cfg.seed, cfg.init_scale);
  std::vector<MetricsRow> metrics;

  // Stage 1: prefixed SFT on every winner.
  std::vector<EncodedSequence> sft;
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& item = s.item(i);
      if (item.label != Label::Win) continue;
      sft.push_back({policy.context_of(format_prefix(item.prefix) + " " + s.question),
                     encode(vocab, serialize_steps(item.trajectory))});
    }
  }
  if (sft.empty()) throw LossError(LossError::Kind::EmptySample, "corpus has no winners");
  const auto sft_batches = make_batches(sft.size(), cfg.batch_size, cfg.seed, 1);
  const auto sft_objective = [&](const std::vector<std::size_t>& batch, const ToyPolicy& p) {
    const LogProbTable pt(p);
    Eigen::MatrixXd counts = zeros_like(p);
    double value = 0.0;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (std::size_t idx : batch) value += accumulate_nll(pt, sft[idx], w, counts);
    return LossValue{value, pt.gradient_from_counts(counts)};
  };
  const DescentConfig one_sft{cfg.sft.step_size, 1, cfg.sft.max_halvings};
  for (std::size_t step = 0; step < cfg.sft.steps; ++step) {
    const auto& batch = sft_batches[step % sft_batches.size()];
    const auto rec =
        descend(policy, [&](const ToyPolicy& p, std::size_t) { return sft_objective(batch, p); }, one_sft).front();
    metrics.push_back({"sft", step, rec.loss_after, 0.0, rec.loss_after, 0.0, rec.step_size, rec.accepted});
  }

  ToyPolicy reference = policy;
  if (method == Method::Sft) return {std::move(policy), std::move(reference), std::move(metrics)};

  // Stage 2: preference optimization against the frozen stage-1 model.
  const LogProbTable ref_table(reference);
  std::vector<EncodedPreference> data;
  data.reserve(corpus.size());
  for (std::size_t si = 0; si < corpus.size(); ++si) {
    const auto& s = corpus[si];
    if (s.ordered_winners.empty()) throw LossError(LossError::Kind::EmptySample, "sample without winners");
    EncodedPreference e;
    e.enc = encode_ranked_sample(policy, s);
    if (e.enc.items.size() < 2) throw LossError(LossError::Kind::EmptySample, "sample needs two items");
    e.ref_lp = reference_log_probs(ref_table, e.enc.items);
    e.top_winner = encode_trajectory(policy, s.question, s.ordered_winners.front().trajectory);
    std::vector<std::size_t> wins;
    std::vector<std::size_t> loses;
    for (std::size_t i = 0; i < e.enc.items.size(); ++i) (e.enc.labels[i] == Label::Win ? wins : loses).push_back(i);
    auto rng = stream(cfg.seed, kSaltPairs, si);
    if (loses.empty()) {
      wins.resize(e.enc.k);
      loses.resize(e.enc.items.size() - e.enc.k);
      std::iota(loses.begin(), loses.end(), e.enc.k);
    }
    e.pair = {wins[uniform_below(rng, wins.size())], loses[uniform_below(rng, loses.size())]};
    data.push_back(std::move(e));
  }
  const PreferenceObjective objective(method, cfg, std::move(data));
  const auto batches = make_batches(objective.size(), cfg.batch_size, cfg.seed, 2);
  const DescentConfig one_step{cfg.preference.step_size, 1, cfg.preference.max_halvings};
  for (std::size_t step = 0; step < cfg.preference.steps; ++step) {
    const auto& batch = batches[step % batches.size()];
    const auto fn = [&](const ToyPolicy& p, std::size_t) {
      const LogProbTable pt(p);
      Eigen::MatrixXd counts = zeros_like(p);
      const Components c = objective.accumulate(pt, batch, counts);
      return LossValue{objective.combine(c), pt.gradient_from_counts(counts)};
    };
    const auto rec = descend(policy, fn, one_step).front();
    const LogProbTable pt(policy);
    Eigen::MatrixXd scratch = zeros_like(policy);
    const Components c = objective.accumulate(pt, batch, scratch);
    metrics.push_back({std::string(method_name(method)), step, rec.loss_after, objective.gap(pt, batch), c.nll,
                       c.inter, rec.step_size, rec.accepted});
  }
  return {std::move(policy), std::move(reference), std::move(metrics)};
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  out << "stage,step,loss,reward_gap,nll,inter,step_size,accepted\n";
  for (const auto& r : rows) {
    out << r.stage << "," << r.step << "," << shortest(r.loss) << "," << shortest(r.reward_gap) << ","
        << shortest(r.nll) << "," << shortest(r.inter) << "," << shortest(r.step_size) << ","
        << (r.accepted ? 1 : 0) << "\n";
  }
  if (!out) throw IoFailure("write error on " + path.string());
}

namespace {

std::vector<std::vector<double>> sample_rewards(const ToyPolicy& p, const ToyPolicy& ref,
                                                const std::vector<RankedSample>& samples, Beta beta) {
  const LogProbTable pt(p);
  const LogProbTable rt(ref);
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto enc = encode_ranked_sample(p, s);
    std::vector<double> r;
    r.reserve(enc.items.size());
    for (const auto& y : enc.items) r.push_back(beta.value() * (pt.log_prob(y) - rt.log_prob(y)));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

double mean_reward_gap(const ToyPolicy& p, const ToyPolicy& ref, const std::vector<RankedSample>& samples,
                       Beta beta) {
  if (samples.empty()) throw LossError(LossError::Kind::EmptySample, "no samples");
  const auto rewards = sample_rewards(p, ref, samples, beta);
  double total = 0.0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const std::size_t k = samples[s].k();
    const auto& r = rewards[s];
    const double win = std::accumulate(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
    const double rest = std::accumulate(r.begin() + static_cast<std::ptrdiff_t>(k), r.end(), 0.0);
    total += win / static_cast<double>(k) - (r.size() > k ? rest / static_cast<double>(r.size() - k) : 0.0);
  }
  return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Evaluation.

std::size_t top1_index(const std::vector<double>& scores, std::mt19937_64& rng) {
  if (scores.empty()) throw std::invalid_argument("top1_index needs at least one score");
  const double best = *std::max_element(scores.begin(), scores.end());
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] == best) ties.push_back(i);
  }
  if (ties.empty()) throw std::invalid_argument("scores must not contain NaN");
  return ties.size() == 1 ? ties.front() : ties[uniform_below(rng, ties.size())];
}

double ranking_accuracy_from_scores(const std::vector<std::vector<double>>& scores,
                                    const std::vector<RankedSample>& samples, std::uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("ranking accuracy needs at least one sample");
  if (scores.size() != samples.size()) throw std::invalid_argument("one score vector per sample expected");
  auto rng = stream(seed, 0, 0);
  std::size_t hits = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (scores[s].size() != samples[s].size()) throw std::invalid_argument("one score per item expected");
    if (top1_index(scores[s], rng) < samples[s].k()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double ranking_accuracy(const ToyPolicy& p, const ToyPolicy& ref, const std::vector<RankedSample>& samples,
                        Beta beta, std::uint64_t seed) {
  return ranking_accuracy_from_scores(sample_rewards(p, ref, samples, beta), samples, seed);
}

std::string_view band_name(Band b) noexcept {
  switch (b) {
    case Band::Low:
      return "low";
    case Band::Mid:
      return "mid";
    case Band::High:
      return "high";
  }
  return "?";
}

Band knowledge_band(const PreferencePrefix& p) {
  const double s = knowledge_score(p);
  if (s < 2.0) return Band::Low;
  if (s < 4.0) return Band::Mid;
  return Band::High;
}

BackendMap make_bench_backends(const SyntheticDataset& data, bool force_full) {
  struct Shared {
    std::vector<SyntheticQuestion> questions;
    std::map<std::string, std::size_t, std::less<>> by_text;

    const SyntheticQuestion& lookup(std::string_view question) const {
      const auto base = question.substr(0, question.find(kPriorWrongMarker));
      const auto it = by_text.find(base);
      if (it == by_text.end()) throw std::invalid_argument("unknown question: " + std::string(base));
      return questions[it->second];
    }
  };
  auto shared = std::make_shared<Shared>();
  shared->questions = data.questions;
  for (std::size_t i = 0; i < data.questions.size(); ++i) shared->by_text.emplace(data.questions[i].text, i);
  const auto kb = std::make_shared<const MockKnowledgeBase>(data.kb);
  const auto& table = TokenTable::standard();

  const auto docs_from_state = [](const std::string& state) {
    std::vector<RetrievedDoc> docs;
    for (const auto& line : state_values(state, "doc")) {
      for (auto& d : parse_docs(line)) docs.push_back(std::move(d));
    }
    return docs;
  };

  BackendMap m;
  m[A::IntentReconstructor] = std::make_shared<FunctionBackend>([shared, force_full, &table](const AgentRequest& r) {
    const auto& q = shared->lookup(r.question);
    std::string payload = q.text;
    if (q.features.instruction_complexity == Complexity::Complex) payload += "\ndetails of " + entity_word(q.id);
    const bool retried = r.question.find(kPriorWrongMarker) != std::string::npos;
    const bool retrieve = force_full || retried || knowledge_score(q.annotation) >= 3.0;
    return AgentResponse{payload, table.end_literal(A::IntentReconstructor),
                         table.head_literal(retrieve ? A::KnowledgeRetriever : A::ResponseGenerator)};
  });
  m[A::KnowledgeRetriever] = std::make_shared<KnowledgeBaseRetriever>(kb);
  m[A::KnowledgeFilter] = std::make_shared<FunctionBackend>([shared, docs_from_state, &table](const AgentRequest& r) {
    const auto& q = shared->lookup(r.question);
    std::string payload;
    for (const auto& d : docs_from_state(r.state_text)) {
      if (has_word(d.text, entity_word(q.id))) payload += "[" + std::to_string(d.id) + "]";
    }
    return AgentResponse{payload.empty() ? "none" : payload, table.end_literal(A::KnowledgeFilter),
                         table.head_literal(A::KnowledgeLocator)};
  });
  m[A::KnowledgeLocator] = std::make_shared<FunctionBackend>([shared, docs_from_state, &table](const AgentRequest& r) {
    const auto& q = shared->lookup(r.question);
    std::string payload;
    for (const auto& d : docs_from_state(r.state_text)) {
      if (!payload.empty()) payload += "\n";
      payload += (has_word(d.text, entity_word(q.id)) ? "[Relevant] " : "[Irrelevant] ") + d.text;
    }
    return AgentResponse{payload, table.end_literal(A::KnowledgeLocator), table.head_literal(A::ResponseGenerator)};
  });
  m[A::ResponseGenerator] = std::make_shared<FunctionBackend>([shared, &table](const AgentRequest& r) {
    const auto& q = shared->lookup(r.question);
    std::string answer;
    if (state_value(r.state_text, "mode") == "grounded") {
      for (const auto& span : state_values(r.state_text, "span")) {
        for (const auto& w : split_words(span)) {
          if (answer.empty() && w.rfind("ans", 0) == 0) answer = w;
        }
      }
    }
    if (answer.empty()) answer = q.parametric_known ? q.gold_answer : wrong_answer(q, 0);
    return AgentResponse{answer, table.end_literal(A::ResponseGenerator), table.head_literal(A::AnswerVerifier)};
  });
  m[A::AnswerVerifier] = std::make_shared<FunctionBackend>([shared, &table](const AgentRequest& r) {
    const auto& q = shared->lookup(r.question);
    const bool grounded = state_value(r.state_text, "mode") == "grounded";
    const bool reject = !grounded && q.annotation[A::AnswerVerifier] >= 4;
    return AgentResponse{reject ? "wrong" : "Correct", table.end_literal(A::AnswerVerifier),
                         reject ? table.head_literal(A::IntentReconstructor) : std::string()};
  });
  return m;
}

AnswerStats evaluate_answers(const SyntheticDataset& data, const std::vector<std::size_t>& question_ids,
                             const OrchestratorConfig& cfg, bool force_full, std::size_t workers) {
  if (question_ids.empty()) throw std::invalid_argument("no questions to evaluate");
  for (std::size_t id : question_ids) {
    if (id >= data.questions.size()) throw std::invalid_argument("question id out of range");
  }
  const auto backends = make_bench_backends(data, force_full);

  // Each worker owns a strided slice of the result slots; merging walks them
  // in input order.
  struct Outcome {
    bool correct = false;
    std::size_t tokens = 0;
  };
  std::vector<Outcome> outcomes(question_ids.size());
  std::vector<std::exception_ptr> errors(std::max<std::size_t>(workers, 1));
  const auto work = [&](std::size_t w, std::size_t stride) {
    try {
      for (std::size_t i = w; i < question_ids.size(); i += stride) {
        const auto& q = data.questions[question_ids[i]];
        const auto result = run_inference(q.text, backends, cfg);
        outcomes[i] = {result.answer == q.gold_answer, account_tokens(result.trace, cfg.tokenizer).total};
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  const std::size_t stride = errors.size();
  if (stride == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < stride; ++w) pool.emplace_back(work, w, stride);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AnswerStats stats;
  std::array<std::size_t, kBandCount> band_correct{};
  std::size_t correct = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < question_ids.size(); ++i) {
    const auto& q = data.questions[question_ids[i]];
    tokens += outcomes[i].tokens;
    const bool ok = outcomes[i].correct;
    const auto band = static_cast<std::size_t>(knowledge_band(q.annotation));
    ++stats.band_counts[band];
    if (ok) {
      ++correct;
      ++band_correct[band];
    }
  }
  const auto n = static_cast<double>(question_ids.size());
  stats.answer_accuracy = static_cast<double>(correct) / n;
  stats.mean_tokens = static_cast<double>(tokens) / n;
  for (std::size_t b = 0; b < kBandCount; ++b) {
    stats.band_accuracy[b] =
        stats.band_counts[b] ? static_cast<double>(band_correct[b]) / static_cast<double>(stats.band_counts[b]) : 0.0;
  }
  return stats;
}

EvalReport evaluate(std::string method, const ToyPolicy& p, const ToyPolicy& ref,
                    const std::vector<RankedSample>& eval_samples, const SyntheticDataset& data,
                    const std::vector<std::size_t>& eval_question_ids, const EvalConfig& cfg) {
  EvalReport report;
  report.method = std::move(method);
  report.ranking_accuracy = ranking_accuracy(p, ref, eval_samples, cfg.beta, cfg.seed);
  const auto stats = evaluate_answers(data, eval_question_ids, cfg.orchestrator, cfg.force_full, cfg.workers);
  report.answer_accuracy = stats.answer_accuracy;
  report.mean_tokens = stats.mean_tokens;
  report.band_accuracy = stats.band_accuracy;
  report.band_counts = stats.band_counts;
  return report;
}

namespace {

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"method",  "ranking_accuracy", "answer_accuracy", "mean_tokens",
                                                "token_ratio", "acc_low",     "acc_mid",         "acc_high",
                                                "n_low",   "n_mid",            "n_high",          "best"};
  return cols;
}

std::vector<std::string> report_cells(const EvalReport& r, double max_tokens, bool best) {
  std::vector<std::string> cells{r.method, shortest(r.ranking_accuracy), shortest(r.answer_accuracy),
                                 shortest(r.mean_tokens), shortest(max_tokens > 0.0 ? r.mean_tokens / max_tokens : 0.0)};
  for (double a : r.band_accuracy) cells.push_back(shortest(a));
  for (std::size_t c : r.band_counts) cells.push_back(std::to_string(c));
  cells.emplace_back(best ? "yes" : "no");
  return cells;
}

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_cell(const std::string& cell, std::size_t line, const std::string& column) {
  T value{};
  const char* end = cell.data() + cell.size();
  const auto res = std::from_chars(cell.data(), end, value);
  if (cell.empty() || res.ec != std::errc() || res.ptr != end) {
    throw SchemaViolation(line, column, "cannot parse '" + cell + "'");
  }
  return value;
}

}  // namespace

namespace {

Comparison render_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("no reports");
  std::vector<EvalReport> rows = reports;
  std::sort(rows.begin(), rows.end(), [](const EvalReport& a, const EvalReport& b) { return a.method < b.method; });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].method == rows[i - 1].method) throw std::invalid_argument("duplicate method " + rows[i].method);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].ranking_accuracy > rows[best].ranking_accuracy) best = i;
  }

  std::vector<std::vector<std::string>> cells;
  cells.push_back(report_columns());
  double max_tokens = 0.0;
  for (const auto& r : rows) max_tokens = std::max(max_tokens, r.mean_tokens);
  for (std::size_t i = 0; i < rows.size(); ++i) cells.push_back(report_cells(rows[i], max_tokens, i == best));

  Comparison out;
  out.best = rows[best].method;
  std::vector<std::size_t> width(report_columns().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream table;
  std::ostringstream csv;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      table << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      csv << (c ? "," : "") << row[c];
    }
    table << "\n";
    csv << "\n";
  }
  out.table = table.str();
  // Trailing padding on the last column is noise.
  std::string trimmed;
  std::istringstream lines(out.table);
  for (std::string line; std::getline(lines, line);) {
    line.erase(line.find_last_not_of(' ') + 1);
    trimmed += line + "\n";
  }
  out.table = trimmed;
  out.csv = csv.str();
  return out;
}

}  // namespace

Comparison compare_report(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw std::invalid_argument("compare needs at least two reports");
  return render_reports(reports);
}

std::string reports_to_csv(const std::vector<EvalReport>& reports) { return render_reports(reports).csv; }

std::vector<EvalReport> parse_report_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t number = 0;
  if (!std::getline(in, line)) throw SchemaViolation(1, "<header>", "empty report");
  ++number;
  if (split_csv(line) != report_columns()) throw SchemaViolation(1, "<header>", "unexpected columns");
  const auto& cols = report_columns();
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != cols.size()) throw SchemaViolation(number, "<row>", "expected 12 columns");
    EvalReport r;
    r.method = cells[0];
    if (r.method.empty()) throw SchemaViolation(number, "method", "empty method name");
    r.ranking_accuracy = parse_cell<double>(cells[1], number, cols[1]);
    r.answer_accuracy = parse_cell<double>(cells[2], number, cols[2]);
    r.mean_tokens = parse_cell<double>(cells[3], number, cols[3]);
    parse_cell<double>(cells[4], number, cols[4]);
    for (std::size_t b = 0; b < kBandCount; ++b) {
      r.band_accuracy[b] = parse_cell<double>(cells[5 + b], number, cols[5 + b]);
      r.band_counts[b] = parse_cell<std::size_t>(cells[8 + b], number, cols[8 + b]);
    }
    if (cells[11] != "yes" && cells[11] != "no") throw SchemaViolation(number, "best", "expected yes or no");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace agentalign
