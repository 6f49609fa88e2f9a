#include "agentalign/orchestrator.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>

#include "agentalign/errors.hpp"

namespace agentalign {

namespace {

using A = AgentKind;
using Kind = OrchestrationError::Kind;

std::string_view trim(std::string_view s) {
  const auto not_space = [](char c) { return !std::isspace(static_cast<unsigned char>(c)); };
  const auto b = std::find_if(s.begin(), s.end(), not_space);
  const auto e = std::find_if(s.rbegin(), s.rend(), not_space).base();
  return b < e ? s.substr(static_cast<std::size_t>(b - s.begin()), static_cast<std::size_t>(e - b)) : "";
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      out.push_back(text.substr(start));
      break;
    }
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return out;
}

std::string one_line(std::string_view text) {
  std::string out(text);
  std::replace(out.begin(), out.end(), '\n', ' ');
  return out;
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string escape(std::string_view text) {
  std::string out;
  for (char c : text) {
    if (c == '\n') {
      out += "\\n";
    } else if (c == '\\') {
      out += "\\\\";
    } else {
      out += c;
    }
  }
  return out;
}

std::string agent_label(A a) { return std::string(agent_name(a)); }

class Run {
 public:
  Run(std::string_view question, const BackendMap& backends, const OrchestratorConfig& cfg)
      : backends_(backends), cfg_(cfg), tokens_(TokenTable::standard()) {
    trace_.question = std::string(question);
  }

  InferenceResult execute() {
    std::string question = trace_.question;
    for (std::size_t round = 0;; ++round) {
      trace_.rounds.push_back({question, {}});
      const std::string answer = run_round(question, round);
      trace_.final_answer = answer;
      TraceStep& verdict_step = trace_.rounds.back().steps.back();
      if (verdict_is_correct(verdict_step.payload)) {
        verdict_step.branch = "accept";
        trace_.verified = true;
        break;
      }
      if (round == cfg_.max_retries) {
        verdict_step.branch = "default";
        break;
      }
      verdict_step.branch = "retry";
      ++trace_.retries_used;
      question = retry_augment(question, answer);
    }
    return {trace_.final_answer, trace_};
  }

 private:
  std::string run_round(const std::string& question, std::size_t round) {
    const AgentResponse ir = call(A::IntentReconstructor, question, "round: " + std::to_string(round));
    std::vector<std::string> subs = parse_sub_questions(ir.payload);
    if (subs.empty()) subs.push_back(question);
    if (subs.size() > kMaxSubQuestions) subs.resize(kMaxSubQuestions);
    const auto next = next_agent(A::IntentReconstructor, ir);
    if (next == A::ResponseGenerator) {
      last_step().branch = "direct";
      std::string state = "mode: direct";
      for (const auto& s : subs) state += "\nsub_question: " + s;
      return generate_and_verify(question, state, "direct", {});
    }
    last_step().branch = "knowledge";

    std::vector<RetrievedDoc> pool;
    std::set<int> seen;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const std::string state = "sub_question: " + subs[i] + "\nsub_question_index: " + std::to_string(i + 1) +
                                "\nsub_question_count: " + std::to_string(subs.size()) +
                                "\ntop_k: " + std::to_string(cfg_.top_k_retrieval);
      const AgentResponse kr = call(A::KnowledgeRetriever, question, state);
      next_agent(A::KnowledgeRetriever, kr);
      std::vector<RetrievedDoc> docs;
      try {
        docs = parse_docs(kr.payload);
      } catch (const std::invalid_argument& e) {
        fail(Kind::BackendFailure, std::string("Retriever: ") + e.what());
      }
      if (docs.size() > cfg_.top_k_retrieval) docs.resize(cfg_.top_k_retrieval);
      for (auto& d : docs) {
        if (seen.insert(d.id).second) pool.push_back(std::move(d));
      }
      last_step().branch = "docs " + std::to_string(docs.size());
    }
    if (pool.empty()) fail(Kind::BackendFailure, "Retriever returned no documents");

    std::string kf_state;
    for (const auto& s : subs) kf_state += "sub_question: " + s + "\n";
    for (const auto& d : pool) kf_state += "doc: " + format_docs({d}) + "\n";
    const AgentResponse kf = call(A::KnowledgeFilter, question, std::string(trim(kf_state)));
    expect_next(A::KnowledgeFilter, kf, A::KnowledgeLocator);
    const auto kept = filter_guard(pool, parse_doc_ids(kf.payload));
    std::string kept_ids;
    for (const auto& d : kept) kept_ids += "[" + std::to_string(d.id) + "]";
    last_step().branch = "kept " + kept_ids;

    std::string kl_state;
    for (const auto& d : kept) kl_state += "doc: " + format_docs({d}) + "\n";
    const AgentResponse kl = call(A::KnowledgeLocator, question, std::string(trim(kl_state)));
    expect_next(A::KnowledgeLocator, kl, A::ResponseGenerator);
    const auto plan = relevance_gate(parse_located(kl.payload), cfg_.relevance_token);
    const bool grounded = plan.mode == GenerationMode::Grounded;
    last_step().branch = grounded ? "grounded" : "parametric";
    std::string state = grounded ? "mode: grounded" : "mode: parametric";
    for (const auto& s : plan.spans) state += "\nspan: " + one_line(s);
    return generate_and_verify(question, state, grounded ? "grounded" : "parametric", plan.spans);
  }

  std::string generate_and_verify(const std::string& question, const std::string& rg_state,
                                  const std::string& mode, const std::vector<std::string>& spans) {
    const AgentResponse rg = call(A::ResponseGenerator, question, rg_state);
    expect_next(A::ResponseGenerator, rg, A::AnswerVerifier);
    std::string av_state = "answer: " + one_line(rg.payload) + "\nmode: " + mode;
    for (const auto& s : spans) av_state += "\nspan: " + one_line(s);
    const AgentResponse av = call(A::AnswerVerifier, question, av_state);
    next_agent(A::AnswerVerifier, av);
    return rg.payload;
  }

  AgentResponse call(A agent, const std::string& question, std::string state) {
    const auto it = backends_.find(agent);
    if (it == backends_.end() || !it->second) fail(Kind::MissingBackend, "no backend for " + agent_label(agent));
    if (++invocations_ > invocation_bound(cfg_)) fail(Kind::WatchdogTripped, "invocation bound exceeded");
    AgentRequest req{agent, question, std::move(state), tokens_.head_literal(agent)};
    AgentResponse resp;
    try {
      resp = it->second->invoke(req);
    } catch (const OrchestrationError&) {
      throw;
    } catch (const std::exception& e) {
      fail(Kind::BackendFailure, agent_label(agent) + ": " + e.what());
    }
    const auto end = tokens_.lookup(resp.end_token);
    if (!end || end->role != TokenRole::End || end->agent != agent) {
      fail(Kind::BackendFailure, agent_label(agent) + ": end token '" + resp.end_token + "' does not close the step");
    }
    TraceStep step;
    step.agent = agent;
    step.payload = resp.payload;
    step.end_token = resp.end_token;
    step.next_head_token = resp.next_head_token;
    step.tokens = 2 + count_payload_tokens(resp.payload, cfg_.tokenizer);
    trace_.rounds.back().steps.push_back(std::move(step));
    return resp;
  }

  std::optional<A> next_agent(A from, const AgentResponse& resp) {
    std::optional<A> to;
    if (!resp.next_head_token.empty()) {
      const auto head = tokens_.lookup(resp.next_head_token);
      if (!head || head->role != TokenRole::Head) {
        fail(Kind::IllegalTransition, agent_label(from) + " -> '" + resp.next_head_token + "'");
      }
      to = head->agent;
    }
    if (!is_legal_transition(from, to)) {
      fail(Kind::IllegalTransition, agent_label(from) + " -> " + (to ? agent_label(*to) : std::string("halt")));
    }
    return to;
  }

  void expect_next(A from, const AgentResponse& resp, A to) {
    if (next_agent(from, resp) != to) {
      fail(Kind::IllegalTransition, agent_label(from) + " -> '" + resp.next_head_token + "'");
    }
  }

  TraceStep& last_step() { return trace_.rounds.back().steps.back(); }

  [[noreturn]] static void fail(Kind kind, const std::string& detail) { throw OrchestrationError(kind, detail); }

  const BackendMap& backends_;
  const OrchestratorConfig& cfg_;
  const TokenTable& tokens_;
  OrchestrationTrace trace_;
  std::size_t invocations_ = 0;
};

}  // namespace

void check_config(const OrchestratorConfig& cfg) {
  if (cfg.max_retries < 1) throw std::invalid_argument("max_retries must be at least 1");
  if (cfg.top_k_retrieval < 1) throw std::invalid_argument("top_k_retrieval must be at least 1");
}

std::vector<RetrievedDoc> filter_guard(const std::vector<RetrievedDoc>& retrieved,
                                       const std::vector<int>& filtered_ids) {
  if (retrieved.empty()) throw std::invalid_argument("filter_guard needs at least one retrieved document");
  std::vector<RetrievedDoc> out;
  std::set<int> taken;
  for (int id : filtered_ids) {
    const auto it = std::find_if(retrieved.begin(), retrieved.end(), [&](const RetrievedDoc& d) { return d.id == id; });
    if (it != retrieved.end() && taken.insert(id).second) out.push_back(*it);
  }
  if (out.empty()) {
    const auto best = std::max_element(retrieved.begin(), retrieved.end(),
                                       [](const RetrievedDoc& a, const RetrievedDoc& b) { return a.score < b.score; });
    out.push_back(*best);
  }
  return out;
}

GenerationPlan relevance_gate(const std::vector<LocatedSpan>& located, std::string_view relevance_token) {
  GenerationPlan plan;
  for (const auto& l : located) {
    if (l.tag == relevance_token) plan.spans.push_back(l.span);
  }
  if (!plan.spans.empty()) plan.mode = GenerationMode::Grounded;
  return plan;
}

std::string retry_augment(std::string_view question, std::string_view wrong_answer) {
  return std::string(question) + std::string(kPriorWrongMarker) + std::string(wrong_answer);
}

std::vector<std::string> parse_sub_questions(std::string_view payload) {
  std::vector<std::string> out;
  for (auto line : split_lines(payload)) {
    line = trim(line);
    if (!line.empty()) out.emplace_back(line);
  }
  return out;
}

std::string format_docs(const std::vector<RetrievedDoc>& docs) {
  std::string out;
  for (const auto& d : docs) {
    if (!out.empty()) out += '\n';
    out += "[" + std::to_string(d.id) + "] " + format_double(d.score) + " " + one_line(d.text);
  }
  return out;
}

std::vector<RetrievedDoc> parse_docs(std::string_view payload) {
  std::vector<RetrievedDoc> out;
  for (auto line : split_lines(payload)) {
    line = trim(line);
    if (line.empty()) continue;
    RetrievedDoc d;
    const std::size_t close = line.find(']');
    const char* id_begin = line.data() + 1;
    const char* id_end = line.data() + (close == std::string_view::npos ? 0 : close);
    if (line.front() != '[' || close == std::string_view::npos ||
        std::from_chars(id_begin, id_end, d.id).ptr != id_end || id_begin == id_end) {
      throw std::invalid_argument("document line without a leading [id]: " + std::string(line));
    }
    std::string_view rest = trim(line.substr(close + 1));
    const std::size_t sp = rest.find(' ');
    const std::string_view score = rest.substr(0, sp);
    const auto res = std::from_chars(score.data(), score.data() + score.size(), d.score);
    if (score.empty() || res.ptr != score.data() + score.size()) {
      throw std::invalid_argument("document line without a score: " + std::string(line));
    }
    d.text = sp == std::string_view::npos ? "" : std::string(trim(rest.substr(sp + 1)));
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<int> parse_doc_ids(std::string_view payload) {
  std::vector<int> out;
  std::size_t pos = 0;
  while ((pos = payload.find('[', pos)) != std::string_view::npos) {
    const std::size_t close = payload.find(']', pos);
    if (close == std::string_view::npos) break;
    int id = 0;
    const char* b = payload.data() + pos + 1;
    const char* e = payload.data() + close;
    if (b != e && std::from_chars(b, e, id).ptr == e) out.push_back(id);
    pos = pos + 1;
  }
  return out;
}

std::vector<LocatedSpan> parse_located(std::string_view payload) {
  std::vector<LocatedSpan> out;
  for (auto line : split_lines(payload)) {
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t close = line.find(']');
    if (line.front() == '[' && close != std::string_view::npos) {
      out.push_back({std::string(line.substr(0, close + 1)), std::string(trim(line.substr(close + 1)))});
    } else {
      out.push_back({"", std::string(line)});
    }
  }
  return out;
}

bool verdict_is_correct(std::string_view verdict) {
  const auto t = trim(verdict);
  constexpr std::string_view kCorrect = "correct";
  return t.size() == kCorrect.size() &&
         std::equal(t.begin(), t.end(), kCorrect.begin(),
                    [](char a, char b) { return std::tolower(static_cast<unsigned char>(a)) == b; });
}

std::size_t invocation_bound(const OrchestratorConfig& cfg) {
  return (cfg.max_retries + 1) * (5 + kMaxSubQuestions);
}

bool is_legal_transition(AgentKind from, std::optional<AgentKind> to) {
  if (!to) return from == A::AnswerVerifier;
  switch (from) {
    case A::IntentReconstructor:
      return *to == A::ResponseGenerator || *to == A::KnowledgeRetriever;
    case A::KnowledgeRetriever:
      return *to == A::KnowledgeRetriever || *to == A::KnowledgeFilter;
    case A::KnowledgeFilter:
      return *to == A::KnowledgeLocator;
    case A::KnowledgeLocator:
      return *to == A::ResponseGenerator;
    case A::ResponseGenerator:
      return *to == A::AnswerVerifier;
    case A::AnswerVerifier:
      return *to == A::IntentReconstructor;
  }
  return false;
}

InferenceResult run_inference(std::string_view question, const BackendMap& backends,
                              const OrchestratorConfig& cfg) {
  check_config(cfg);
  for (AgentKind a : kAllAgents) {
    const auto it = backends.find(a);
    if (it == backends.end() || !it->second) {
      throw OrchestrationError(Kind::MissingBackend, "no backend for " + agent_label(a));
    }
  }
  return Run(question, backends, cfg).execute();
}

TokenCounts account_tokens(const OrchestrationTrace& trace, TokenizerKind tokenizer) {
  TokenCounts counts;
  for (const auto& round : trace.rounds) {
    for (const auto& step : round.steps) {
      const auto t = token_count(make_trajectory(trace.question, {{step.agent, step.payload}}), tokenizer);
      counts.per_agent[agent_index(step.agent)] += t.total;
      counts.total += t.total;
    }
  }
  return counts;
}

Trajectory trace_to_trajectory(const OrchestrationTrace& trace) {
  std::vector<std::pair<AgentKind, std::string>> steps;
  for (const auto& round : trace.rounds) {
    bool merging = false;
    for (const auto& step : round.steps) {
      if (step.agent == A::KnowledgeRetriever && merging) {
        steps.back().second += "\n" + step.payload;
        continue;
      }
      merging = step.agent == A::KnowledgeRetriever;
      steps.emplace_back(step.agent, step.payload);
    }
  }
  return make_trajectory(trace.question, steps);
}

std::string format_trace(const OrchestrationTrace& trace) {
  std::ostringstream out;
  out << "question: " << escape(trace.question) << "\n";
  for (std::size_t r = 0; r < trace.rounds.size(); ++r) {
    const auto& round = trace.rounds[r];
    out << "round " << r + 1 << ": " << escape(round.question) << "\n";
    for (const auto& s : round.steps) {
      out << "  " << agent_code(s.agent) << " " << s.end_token << " -> "
          << (s.next_head_token.empty() ? std::string("halt") : s.next_head_token);
      if (!s.branch.empty()) out << " [" << s.branch << "]";
      out << " tokens=" << s.tokens << "\n";
      out << "    payload: " << escape(s.payload) << "\n";
    }
  }
  const auto counts = account_tokens(trace);
  out << "retries_used: " << trace.retries_used << "\n";
  out << "verified: " << (trace.verified ? "true" : "false") << "\n";
  out << "final_answer: " << escape(trace.final_answer) << "\n";
  out << "tokens:";
  for (AgentKind a : kAllAgents) out << " " << agent_code(a) << "=" << counts[a];
  out << " total=" << counts.total << "\n";
  return out.str();
}

ScriptedBackend::ScriptedBackend(std::vector<AgentResponse> script) : script_(std::move(script)) {
  if (script_.empty()) throw std::invalid_argument("a scripted backend needs at least one response");
}

AgentResponse ScriptedBackend::invoke(const AgentRequest& request) {
  std::lock_guard lock(mutex_);
  requests_.push_back(request);
  const AgentResponse& r = script_[std::min(next_, script_.size() - 1)];
  ++next_;
  return r;
}

std::vector<AgentRequest> ScriptedBackend::requests() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

namespace {

std::set<std::string> word_set(std::string_view text) {
  std::set<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)) || (static_cast<unsigned char>(c) & 0x80)) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.insert(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.insert(cur);
  return out;
}

}  // namespace

void MockKnowledgeBase::add(int id, std::string passage) {
  if (!passages_.emplace(id, std::move(passage)).second) {
    throw std::invalid_argument("duplicate passage id " + std::to_string(id));
  }
}

std::optional<std::string> MockKnowledgeBase::find(int id) const {
  const auto it = passages_.find(id);
  if (it == passages_.end()) return std::nullopt;
  return it->second;
}

std::vector<RetrievedDoc> MockKnowledgeBase::search(std::string_view query, std::size_t k) const {
  const auto q = word_set(query);
  std::vector<RetrievedDoc> scored;
  for (const auto& [id, text] : passages_) {
    const auto words = word_set(text);
    std::size_t hits = 0;
    for (const auto& w : q) hits += words.count(w);
    const double score = q.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(q.size());
    scored.push_back({id, text, score});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const RetrievedDoc& a, const RetrievedDoc& b) { return a.score > b.score; });
  if (scored.size() > k) scored.resize(k);
  return scored;
}

AgentResponse KnowledgeBaseRetriever::invoke(const AgentRequest& request) {
  const auto& table = TokenTable::standard();
  const std::string sub = state_value(request.state_text, "sub_question").value_or(request.question);
  const std::size_t k = std::stoul(state_value(request.state_text, "top_k").value_or("3"));
  const std::size_t index = std::stoul(state_value(request.state_text, "sub_question_index").value_or("1"));
  const std::size_t count = std::stoul(state_value(request.state_text, "sub_question_count").value_or("1"));
  const A next = index < count ? A::KnowledgeRetriever : A::KnowledgeFilter;
  return {format_docs(kb_->search(sub, k)), table.end_literal(A::KnowledgeRetriever), table.head_literal(next)};
}

std::optional<std::string> state_value(std::string_view state_text, std::string_view key) {
  auto all = state_values(state_text, key);
  if (all.empty()) return std::nullopt;
  return all.front();
}

std::vector<std::string> state_values(std::string_view state_text, std::string_view key) {
  std::vector<std::string> out;
  for (auto line : split_lines(state_text)) {
    if (line.size() > key.size() + 1 && line.substr(0, key.size()) == key && line[key.size()] == ':') {
      out.emplace_back(trim(line.substr(key.size() + 1)));
    } else if (line.size() == key.size() + 1 && line.substr(0, key.size()) == key && line[key.size()] == ':') {
      out.emplace_back();
    }
  }
  return out;
}

}  // namespace agentalign
