#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "agentalign/config.hpp"
#include "agentalign/losses.hpp"
#include "agentalign/orchestrator.hpp"
#include "agentalign/policy.hpp"
#include "agentalign/preference.hpp"

namespace agentalign {

// ---------------------------------------------------------------------------
// Synthetic questions.

struct SyntheticQuestion {
  std::size_t id = 0;
  std::string text;
  QuestionFeatures features;
  std::string gold_answer;
  // Present iff the question needs external knowledge.
  std::optional<int> gold_doc_id;
  // Per-agent utility annotation: the rubric prefix with seeded jitter. It
  // stands in for the agent scores a trained model predicts at inference and
  // drives routing and the score bands.
  PreferencePrefix annotation;
  // Whether the Generator answers correctly without evidence. Always false
  // for knowledge questions.
  bool parametric_known = false;

  friend bool operator==(const SyntheticQuestion&, const SyntheticQuestion&) = default;
};

struct SyntheticDataset {
  std::vector<SyntheticQuestion> questions;
  MockKnowledgeBase kb;
};

inline constexpr std::size_t kAnswerCount = 8;

// Deterministic in (seed, n, knowledge_fraction). Exactly
// round(n * knowledge_fraction) questions need external knowledge; each of
// them has a gold passage naming the question's entity and the answer.
// Throws std::invalid_argument for n == 0 or a fraction outside [0, 1].
SyntheticDataset gen_synthetic(std::uint64_t seed, std::size_t n, double knowledge_fraction);

// The word naming a question's entity, e.g. "entity12".
std::string entity_word(std::size_t id);

// JSONL: one question per line with its features, annotation and gold data;
// then one {"doc_id", "passage"} record per knowledge-base passage.
void save_dataset(const SyntheticDataset& data, const std::filesystem::path& path);
SyntheticDataset load_dataset(const std::filesystem::path& path);

// Eval membership: FNV-1a of the decimal id, modulo 5, equals 0 (about 20%).
bool in_eval_split(std::size_t question_id);

// ---------------------------------------------------------------------------
// Preference corpus.

// Sentinels, the twelve step literals, prefix tags and every payload word the
// synthetic trajectories use.
Vocab bench_vocab();

enum class LoserKind {
  // Retriever fires without Filter or Locator; the unfiltered evidence leads
  // to a wrong answer.
  Decoupled,
  // Coherent agents, wrong answer, and the Verifier says "wrong".
  RejectedAnswer,
  // Knowledge question answered without retrieval.
  SkippedRetrieval,
  // Direct question sent through the full retrieval chain and answered wrongly.
  NeedlessRetrieval,
};

// The trajectory the rubric calls for: the full knowledge chain for knowledge
// questions, Reconstructor/Generator/Verifier otherwise, gold answer,
// verifier "Correct".
Trajectory winner_trajectory(const SyntheticQuestion& q);
// `variant` picks the wrong answer; it is never the gold one.
Trajectory loser_trajectory(const SyntheticQuestion& q, LoserKind kind, std::size_t variant);

// Loser kinds cycle Decoupled, RejectedAnswer, then SkippedRetrieval for
// knowledge questions or NeedlessRetrieval otherwise.
LoserKind loser_kind_for(const SyntheticQuestion& q, std::size_t index);

// The rubric prefix with every non-Generator score moved by a seeded draw
// from {-1, 0, +1} and clamped to [0, 5].
PreferencePrefix jitter_prefix(const PreferencePrefix& base, std::mt19937_64& rng);

// M winners and N losers per question, both with jittered rubric prefixes,
// then top-K selection by dependency score. Per-question randomness is seeded
// from (seed, question id), so a question's sample does not depend on the
// rest of the list.
std::vector<RankedSample> build_training_corpus(const std::vector<SyntheticQuestion>& questions,
                                                std::size_t winners_per_q, std::size_t losers_per_q,
                                                std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training.

enum class Method { Sft, Dpo, Fdpo, Dadpo };

std::string_view method_name(Method m) noexcept;
// Throws std::invalid_argument.
Method parse_method(std::string_view name);

struct TrainConfig {
  Beta beta{0.1};
  MixCoefficients mix{};
  std::size_t contexts = 16;
  std::uint64_t seed = 1;
  double init_scale = 0.5;
  // 0 means the whole corpus in every step.
  std::size_t batch_size = 0;
  ListwiseReduction reduction = ListwiseReduction::Sum;
  DescentConfig sft{5.0, 60, 40};
  DescentConfig preference{50.0, 300, 40};
};

// Keys: beta, alpha1, alpha2, contexts, seed, init_scale, batch_size,
// reduction (sum|mean), sft_step_size, sft_steps, step_size, steps,
// max_halvings. Missing keys keep their defaults.
TrainConfig train_config_from(const Config& cfg);

struct MetricsRow {
  std::string stage;
  std::size_t step = 0;
  double loss = 0.0;
  double reward_gap = 0.0;
  double nll = 0.0;
  double inter = 0.0;
  double step_size = 0.0;
  bool accepted = false;
};

struct TrainResult {
  ToyPolicy policy;
  ToyPolicy reference;
  std::vector<MetricsRow> metrics;
};

// Stage 1 minimizes the prefixed SFT loss over every winner; the result is
// copied into the frozen reference. Stage 2 (all methods but sft) starts from
// the reference and minimizes, per sample and averaged over the batch:
//   dpo    pairwise loss on one seeded (winner, loser) pair
//   fdpo   full-order loss over all items
//   dadpo  alpha1 * NLL(top winner) + alpha2 * listwise loss
// Throws DivergedTraining, LossError(EmptySample) for an empty corpus.
TrainResult train(Method method, const std::vector<RankedSample>& corpus, const Vocab& vocab,
                  const TrainConfig& cfg);

// Header: stage,step,loss,reward_gap,nll,inter,step_size,accepted
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

// Mean over samples of [mean reward of the ordered winners - mean reward of
// the rejected set].
double mean_reward_gap(const ToyPolicy& p, const ToyPolicy& ref, const std::vector<RankedSample>& samples,
                       Beta beta);

// ---------------------------------------------------------------------------
// Evaluation.

// Index of the largest score; exact ties broken uniformly with `rng`.
std::size_t top1_index(const std::vector<double>& scores, std::mt19937_64& rng);

// Fraction of samples whose highest-reward item is one of the ordered winners.
double ranking_accuracy(const ToyPolicy& p, const ToyPolicy& ref, const std::vector<RankedSample>& samples,
                        Beta beta, std::uint64_t seed);

// Same metric for arbitrary per-item scores (index order = sample.item(i)).
double ranking_accuracy_from_scores(const std::vector<std::vector<double>>& scores,
                                    const std::vector<RankedSample>& samples, std::uint64_t seed);

enum class Band { Low, Mid, High };
inline constexpr std::size_t kBandCount = 3;
std::string_view band_name(Band b) noexcept;
// By mean Retriever/Filter/Locator score: low < 2 <= mid < 4 <= high.
Band knowledge_band(const PreferencePrefix& p);

// Mock agents over a synthetic dataset. The adaptive Reconstructor routes to
// retrieval when the annotated knowledge score is at least 3 or the question
// already carries a prior wrong answer; with force_full it always retrieves.
// The Verifier rejects ungrounded answers when the annotated Verifier score
// is at least 4.
BackendMap make_bench_backends(const SyntheticDataset& data, bool force_full);

struct AnswerStats {
  double answer_accuracy = 0.0;
  double mean_tokens = 0.0;
  std::array<double, kBandCount> band_accuracy{};
  std::array<std::size_t, kBandCount> band_counts{};
};

// Runs the orchestrator over each question. With workers > 1 the questions
// are spread over threads; results merge in input order, so the stats do not
// depend on the worker count.
AnswerStats evaluate_answers(const SyntheticDataset& data, const std::vector<std::size_t>& question_ids,
                             const OrchestratorConfig& cfg, bool force_full, std::size_t workers = 1);

struct EvalReport {
  std::string method;
  double ranking_accuracy = 0.0;
  double answer_accuracy = 0.0;
  double mean_tokens = 0.0;
  std::array<double, kBandCount> band_accuracy{};
  std::array<std::size_t, kBandCount> band_counts{};

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalConfig {
  Beta beta{0.1};
  std::uint64_t seed = 1;
  OrchestratorConfig orchestrator{};
  bool force_full = false;
  std::size_t workers = 1;
};

EvalReport evaluate(std::string method, const ToyPolicy& p, const ToyPolicy& ref,
                    const std::vector<RankedSample>& eval_samples, const SyntheticDataset& data,
                    const std::vector<std::size_t>& eval_question_ids, const EvalConfig& cfg);

struct Comparison {
  std::string table;
  std::string csv;
  // Method with the highest ranking accuracy (ties: smallest name).
  std::string best;
};

// Rows sorted by method name. Numbers are printed in shortest round-trip
// form, identically in both outputs. token_ratio is each row's mean tokens
// over the largest mean tokens among the rows. Throws std::invalid_argument for fewer
// than two reports.
Comparison compare_report(const std::vector<EvalReport>& reports);
// The CSV half of compare_report; a single report is enough.
std::string reports_to_csv(const std::vector<EvalReport>& reports);
// Throws SchemaViolation.
std::vector<EvalReport> parse_report_csv(std::string_view csv);

}  // namespace agentalign
