#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "agentalign/trajectory.hpp"

namespace agentalign {

// One agent invocation. `state_text` carries everything the orchestrator has
// accumulated for this agent as "key: value" lines (keys may repeat for lists).
struct AgentRequest {
  AgentKind agent = AgentKind::IntentReconstructor;
  std::string question;
  std::string state_text;
  std::string head_token;

  friend bool operator==(const AgentRequest&, const AgentRequest&) = default;
};

// The three outputs of an agent: its payload, the end token closing its step
// and the head token of the agent it hands control to ("" to halt).
struct AgentResponse {
  std::string payload;
  std::string end_token;
  std::string next_head_token;

  friend bool operator==(const AgentResponse&, const AgentResponse&) = default;
};

// Implementations used from several concurrent runs must be stateless or
// synchronize internally.
class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  virtual AgentResponse invoke(const AgentRequest& request) = 0;
};

using BackendMap = std::map<AgentKind, std::shared_ptr<AgentBackend>>;

struct OrchestratorConfig {
  std::size_t max_retries = 3;
  std::size_t top_k_retrieval = 3;
  std::string relevance_token = "[Relevant]";
  TokenizerKind tokenizer = TokenizerKind::Whitespace;
};

// Throws std::invalid_argument unless max_retries >= 1 and top_k_retrieval >= 1.
void check_config(const OrchestratorConfig& cfg);

inline constexpr std::size_t kMaxSubQuestions = 8;

struct RetrievedDoc {
  int id = 0;
  std::string text;
  double score = 0.0;

  friend bool operator==(const RetrievedDoc&, const RetrievedDoc&) = default;
};

// Drops filtered ids that were not retrieved; falls back to the top-scoring
// retrieved document (first on ties) when nothing survives. Output keeps the
// order of `filtered_ids` and never repeats a document.
std::vector<RetrievedDoc> filter_guard(const std::vector<RetrievedDoc>& retrieved,
                                       const std::vector<int>& filtered_ids);

struct LocatedSpan {
  std::string tag;
  std::string span;

  friend bool operator==(const LocatedSpan&, const LocatedSpan&) = default;
};

enum class GenerationMode { Grounded, Parametric };

struct GenerationPlan {
  GenerationMode mode = GenerationMode::Parametric;
  // Spans tagged relevant; empty in parametric mode.
  std::vector<std::string> spans;
};

GenerationPlan relevance_gate(const std::vector<LocatedSpan>& located,
                              std::string_view relevance_token = "[Relevant]");

inline constexpr std::string_view kPriorWrongMarker = "\n[PRIOR WRONG ANSWER]: ";

std::string retry_augment(std::string_view question, std::string_view wrong_answer);

// Payload codecs shared by the orchestrator, the mocks and the remote server.
std::vector<std::string> parse_sub_questions(std::string_view payload);
std::string format_docs(const std::vector<RetrievedDoc>& docs);
// Lines "[id] score text". Throws std::invalid_argument on a malformed line.
std::vector<RetrievedDoc> parse_docs(std::string_view payload);
// Every "[<integer>]" in the payload, in order.
std::vector<int> parse_doc_ids(std::string_view payload);
// Lines "<tag> span" where the tag is a bracketed word; untagged lines get an
// empty tag.
std::vector<LocatedSpan> parse_located(std::string_view payload);
// True when the trimmed verdict equals "Correct" ignoring case.
bool verdict_is_correct(std::string_view verdict);

struct TraceStep {
  AgentKind agent = AgentKind::IntentReconstructor;
  std::string payload;
  std::string end_token;
  std::string next_head_token;
  std::size_t tokens = 0;
  // What the orchestrator did after this step: "direct"/"knowledge" after the
  // Reconstructor, "docs <n>" after a retrieval, "kept <ids>" after the
  // Filter, "grounded"/"parametric" after the Locator, "accept"/"retry"/
  // "default" after the Verifier, empty otherwise.
  std::string branch;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct TraceRound {
  // Instruction for this round, including any appended wrong answers.
  std::string question;
  std::vector<TraceStep> steps;

  friend bool operator==(const TraceRound&, const TraceRound&) = default;
};

struct OrchestrationTrace {
  std::string question;
  std::vector<TraceRound> rounds;
  std::size_t retries_used = 0;
  std::string final_answer;
  bool verified = false;

  friend bool operator==(const OrchestrationTrace&, const OrchestrationTrace&) = default;
};

struct InferenceResult {
  std::string answer;
  OrchestrationTrace trace;
};

// Upper bound on agent invocations for one run.
std::size_t invocation_bound(const OrchestratorConfig& cfg);

// Runs the inference state machine: Reconstructor first, then either the
// direct branch (Generator, Verifier) or the knowledge branch (one retrieval
// per sub-question, Filter, Locator, relevance gate, Generator, Verifier). A
// verdict other than "Correct" appends the answer to the question and starts
// over, at most cfg.max_retries times; the last answer is then returned
// unverified.
//
// Throws OrchestrationError: MissingBackend, BackendFailure (backend threw,
// wrong end token, or malformed payload), IllegalTransition (next head token
// outside the transition graph), WatchdogTripped.
InferenceResult run_inference(std::string_view question, const BackendMap& backends,
                              const OrchestratorConfig& cfg = {});

// Whether `to` (nullopt = halt) may follow `from`.
bool is_legal_transition(AgentKind from, std::optional<AgentKind> to);

// Head/end tokens count one each, payloads per `tokenizer`, summed over all
// rounds. Skipped agents count zero.
TokenCounts account_tokens(const OrchestrationTrace& trace, TokenizerKind tokenizer = TokenizerKind::Whitespace);

// Flattens the trace into a trajectory on the original question. Retrievals
// of one round merge into a single Retriever step whose payload joins the
// per-sub-question payloads with newlines.
Trajectory trace_to_trajectory(const OrchestrationTrace& trace);

// Deterministic human-readable transcript.
std::string format_trace(const OrchestrationTrace& trace);

// ---------------------------------------------------------------------------
// Mock backends.

// Replays a fixed list of responses; the last one repeats once the list is
// exhausted. Records every request. Internally synchronized.
class ScriptedBackend : public AgentBackend {
 public:
  explicit ScriptedBackend(std::vector<AgentResponse> script);

  AgentResponse invoke(const AgentRequest& request) override;
  std::vector<AgentRequest> requests() const;

 private:
  std::vector<AgentResponse> script_;
  std::vector<AgentRequest> requests_;
  std::size_t next_ = 0;
  mutable std::mutex mutex_;
};

class FunctionBackend : public AgentBackend {
 public:
  using Fn = std::function<AgentResponse(const AgentRequest&)>;
  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}

  AgentResponse invoke(const AgentRequest& request) override { return fn_(request); }

 private:
  Fn fn_;
};

// In-memory passages scored by lexical overlap: the number of distinct
// lowercase query words found in the passage divided by the number of
// distinct query words. Ties go to the smaller id.
class MockKnowledgeBase {
 public:
  void add(int id, std::string passage);
  const std::map<int, std::string>& passages() const noexcept { return passages_; }
  std::optional<std::string> find(int id) const;
  std::vector<RetrievedDoc> search(std::string_view query, std::size_t k) const;

 private:
  std::map<int, std::string> passages_;
};

// Retriever backend over a knowledge base: retrieves top_k for the request's
// sub-question and hands off to the next sub-question or the Filter.
class KnowledgeBaseRetriever : public AgentBackend {
 public:
  explicit KnowledgeBaseRetriever(std::shared_ptr<const MockKnowledgeBase> kb) : kb_(std::move(kb)) {}
  AgentResponse invoke(const AgentRequest& request) override;

 private:
  std::shared_ptr<const MockKnowledgeBase> kb_;
};

// Value of the first "key: value" line in a state text, if present.
std::optional<std::string> state_value(std::string_view state_text, std::string_view key);
std::vector<std::string> state_values(std::string_view state_text, std::string_view key);

}  // namespace agentalign
