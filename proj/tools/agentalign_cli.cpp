// Command-line front end: synthetic data, preference corpora, training,
// evaluation and orchestration.
//
// Exit codes: 0 success, 1 validation or other failure, 2 I/O error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "agentalign/bench.hpp"
#include "agentalign/config.hpp"
#include "agentalign/errors.hpp"
#include "agentalign/orchestrator.hpp"
#include "agentalign/remote.hpp"

namespace fs = std::filesystem;
using namespace agentalign;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitIo = 2;

struct Common {
  std::uint64_t seed = 1;
  std::string config;
  std::string out;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c, const std::string& default_out) {
  c.out = default_out;
  c.seed_opt = sub->add_option("--seed", c.seed, "Random seed (overrides the config's 'seed')");
  sub->add_option("--config", c.config, "Key-value config file");
  sub->add_option("--out", c.out, "Output path")->capture_default_str();
}

Config load_config(const Common& c) {
  Config cfg = c.config.empty() ? Config{} : Config::load(c.config);
  if (c.seed_opt && c.seed_opt->count() > 0) cfg.set("seed", std::to_string(c.seed));
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoFailure("write error on " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TokenizerKind parse_tokenizer(const std::string& name) {
  if (name == "whitespace") return TokenizerKind::Whitespace;
  if (name == "char") return TokenizerKind::Char;
  throw std::invalid_argument("unknown tokenizer '" + name + "' (expected whitespace or char)");
}

OrchestratorConfig orchestrator_config(const Config& cfg) {
  OrchestratorConfig o;
  o.max_retries = cfg.get_uint("max_retries", o.max_retries);
  o.top_k_retrieval = cfg.get_uint("top_k_retrieval", o.top_k_retrieval);
  o.relevance_token = cfg.get_string("relevance_token", o.relevance_token);
  try {
    o.tokenizer = parse_tokenizer(cfg.get_string("tokenizer", "whitespace"));
    check_config(o);
  } catch (const std::invalid_argument& e) {
    throw SchemaViolation(0, "orchestrator", e.what());
  }
  return o;
}

std::vector<std::size_t> eval_ids(const SyntheticDataset& data) {
  std::vector<std::size_t> ids;
  for (const auto& q : data.questions) {
    if (in_eval_split(q.id)) ids.push_back(q.id);
  }
  return ids;
}

struct NamedTrajectory {
  std::string source;
  std::string text;
};

// A .jsonl file holds one record per line with "trajectory_text" or "text";
// any other file is a single trajectory.
std::vector<NamedTrajectory> read_trajectories(const fs::path& path) {
  std::vector<NamedTrajectory> out;
  const std::string content = read_text(path);
  if (path.extension() != ".jsonl") {
    std::string text = content;
    if (!text.empty() && text.back() == '\n') text.pop_back();
    out.push_back({path.string(), text});
    return out;
  }
  std::istringstream in(content);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaViolation(number, "<record>", e.what());
    }
    const char* key = j.contains("trajectory_text") ? "trajectory_text" : "text";
    if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
      throw SchemaViolation(number, "trajectory_text", "expected a string field 'trajectory_text' or 'text'");
    }
    out.push_back({path.string() + ":" + std::to_string(number), j[key].get<std::string>()});
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen(const Common& c, std::size_t n_flag, double fraction_flag, bool n_set, bool fraction_set) {
  const Config cfg = load_config(c);
  const std::size_t n = n_set ? n_flag : cfg.get_uint("n_questions", 400);
  const double fraction = fraction_set ? fraction_flag : cfg.get_double("knowledge_fraction", 0.5);
  const auto data = gen_synthetic(cfg.get_uint("seed", 1), n, fraction);
  save_dataset(data, c.out);
  std::size_t knowledge = 0;
  for (const auto& q : data.questions) knowledge += q.features.needs_external_knowledge;
  std::cout << "wrote " << data.questions.size() << " questions (" << knowledge << " need knowledge) and "
            << data.kb.passages().size() << " passages to " << c.out << "\n";
  return kExitOk;
}

int cmd_build_prefs(const Common& c, const std::string& data_path, const std::string& split,
                    const std::string& records_path) {
  const Config cfg = load_config(c);
  const auto data = load_dataset(data_path);
  std::vector<SyntheticQuestion> questions;
  for (const auto& q : data.questions) {
    const bool eval = in_eval_split(q.id);
    if (split == "all" || (split == "eval") == eval) questions.push_back(q);
  }
  if (questions.empty()) throw std::invalid_argument("split '" + split + "' selects no questions");
  const auto corpus = build_training_corpus(questions, cfg.get_uint("winners", 10), cfg.get_uint("losers", 10),
                                            cfg.get_uint("top_k", 5), cfg.get_uint("seed", 1));
  emit_ranked_jsonl(corpus, c.out);
  if (!records_path.empty()) {
    std::vector<ScoredTrajectory> records;
    for (const auto& s : corpus) {
      for (std::size_t i = 0; i < s.size(); ++i) records.push_back(s.item(i));
    }
    emit_jsonl(records, records_path);
  }
  std::cout << "wrote " << corpus.size() << " ranked samples (" << split << " split) to " << c.out << "\n";
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& method_name_arg, const std::string& corpus_path) {
  const Config cfg = load_config(c);
  const Method method = parse_method(method_name_arg);
  TrainConfig tc;
  try {
    tc = train_config_from(cfg);
  } catch (const std::invalid_argument& e) {
    throw SchemaViolation(0, "config", e.what());
  }
  const auto corpus = load_ranked_jsonl(corpus_path);
  const auto result = train(method, corpus, bench_vocab(), tc);
  const fs::path dir(c.out);
  fs::create_directories(dir);
  save_policy(result.policy, dir / "policy.ckpt");
  save_policy(result.reference, dir / "reference.ckpt");
  write_metrics_csv(result.metrics, dir / "metrics.csv");
  const auto& last = result.metrics.back();
  std::cout << method_name(method) << ": " << result.metrics.size() << " steps, final loss " << last.loss
            << ", reward gap " << last.reward_gap << "; wrote " << dir.string() << "/{policy,reference}.ckpt and metrics.csv\n";
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& policy_path, const std::string& reference_path,
             const std::string& samples_path, const std::string& data_path, const std::string& label,
             bool force_full, std::size_t workers) {
  const Config cfg = load_config(c);
  const ToyPolicy policy = load_policy(policy_path);
  const ToyPolicy reference = reference_path.empty() ? policy : load_policy(reference_path);
  const auto samples = load_ranked_jsonl(samples_path);
  const auto data = load_dataset(data_path);
  EvalConfig ec;
  ec.beta = Beta(cfg.get_double("beta", 0.1));
  ec.seed = cfg.get_uint("seed", 1);
  ec.orchestrator = orchestrator_config(cfg);
  ec.force_full = force_full;
  ec.workers = workers;
  const auto report = evaluate(label, policy, reference, samples, data, eval_ids(data), ec);
  const std::string csv = reports_to_csv({report});
  write_text(c.out, csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_compare(const Common& c, const std::vector<std::string>& inputs) {
  std::vector<EvalReport> reports;
  for (const auto& path : inputs) {
    for (auto& r : parse_report_csv(read_text(path))) reports.push_back(std::move(r));
  }
  const auto cmp = compare_report(reports);
  write_text(c.out, cmp.csv);
  std::cout << cmp.table << "best: " << cmp.best << "\n";
  return kExitOk;
}

int cmd_orchestrate(const Common& c, const std::string& data_path, const std::string& questions_path,
                    const std::string& remote, bool force_full, const std::string& trajectories_path) {
  const Config cfg = load_config(c);
  const auto data = load_dataset(data_path);
  const auto ocfg = orchestrator_config(cfg);
  BackendMap backends;
  if (remote.empty()) {
    backends = make_bench_backends(data, force_full);
  } else {
    RemoteEndpoint ep = parse_endpoint(remote);
    ep.timeout_ms = static_cast<int>(cfg.get_int("remote_timeout_ms", ep.timeout_ms));
    ep.retries = static_cast<int>(cfg.get_int("remote_retries", ep.retries));
    const auto backend = std::make_shared<RemoteAgentBackend>(ep);
    for (AgentKind a : kAllAgents) backends[a] = backend;
  }

  std::vector<std::string> questions;
  if (questions_path.empty()) {
    for (const auto& q : data.questions) questions.push_back(q.text);
  } else {
    std::istringstream in(read_text(questions_path));
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) questions.push_back(line);
    }
  }
  std::map<std::string, std::string, std::less<>> gold;
  for (const auto& q : data.questions) gold.emplace(q.text, q.gold_answer);

  std::string transcript;
  std::string trajectories;
  std::size_t correct = 0;
  std::size_t scored = 0;
  std::size_t tokens = 0;
  for (const auto& question : questions) {
    const auto result = run_inference(question, backends, ocfg);
    transcript += format_trace(result.trace) + "\n";
    trajectories += nlohmann::json{{"text", serialize_trajectory(trace_to_trajectory(result.trace))}}.dump() + "\n";
    tokens += account_tokens(result.trace, ocfg.tokenizer).total;
    if (const auto it = gold.find(question); it != gold.end()) {
      ++scored;
      correct += result.answer == it->second;
    }
  }
  write_text(c.out, transcript);
  if (!trajectories_path.empty()) write_text(trajectories_path, trajectories);
  std::cout << questions.size() << " questions, mean tokens "
            << (questions.empty() ? 0.0 : static_cast<double>(tokens) / static_cast<double>(questions.size()));
  if (scored) std::cout << ", accuracy " << static_cast<double>(correct) / static_cast<double>(scored);
  std::cout << "; traces in " << c.out << "\n";
  return kExitOk;
}

int cmd_validate(const Common& c, const std::vector<std::string>& inputs) {
  std::string report;
  std::size_t failures = 0;
  std::size_t total = 0;
  for (const auto& path : inputs) {
    for (const auto& t : read_trajectories(path)) {
      ++total;
      try {
        validate(parse_trajectory(t.text));
        report += t.source + ": ok\n";
      } catch (const Error& e) {
        ++failures;
        report += t.source + ": " + e.what() + "\n";
      }
    }
  }
  report += std::to_string(total - failures) + "/" + std::to_string(total) + " valid\n";
  if (!c.out.empty()) write_text(c.out, report);
  std::cout << report;
  return failures ? kExitInvalid : kExitOk;
}

int cmd_tokens(const Common& c, const std::vector<std::string>& inputs, const std::string& tokenizer_name) {
  const TokenizerKind tokenizer = parse_tokenizer(tokenizer_name);
  std::string csv = "source";
  for (AgentKind a : kAllAgents) csv += "," + std::string(agent_code(a));
  csv += ",total\n";
  TokenCounts sum;
  std::size_t count = 0;
  for (const auto& path : inputs) {
    for (const auto& t : read_trajectories(path)) {
      const auto counts = token_count(parse_trajectory(t.text), tokenizer);
      csv += t.source;
      for (AgentKind a : kAllAgents) {
        csv += "," + std::to_string(counts[a]);
        sum.per_agent[agent_index(a)] += counts[a];
      }
      csv += "," + std::to_string(counts.total) + "\n";
      sum.total += counts.total;
      ++count;
    }
  }
  csv += "TOTAL";
  for (AgentKind a : kAllAgents) csv += "," + std::to_string(sum[a]);
  csv += "," + std::to_string(sum.total) + "\n";
  if (!c.out.empty()) write_text(c.out, csv);
  std::cout << csv;
  if (count) std::cout << "mean tokens per trajectory: " << static_cast<double>(sum.total) / static_cast<double>(count) << "\n";
  return kExitOk;
}

int cmd_serve(const Common& c, const std::string& data_path, std::uint16_t port, bool force_full, double seconds) {
  (void)load_config(c);
  const auto data = load_dataset(data_path);
  AgentServer server(make_bench_backends(data, force_full), port);
  std::cout << "listening on 127.0.0.1:" << server.port() << std::endl;
  if (!c.out.empty()) write_text(c.out, std::to_string(server.port()) + "\n");
  if (seconds > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
  } else {
    for (std::string line; std::getline(std::cin, line);) {
    }
  }
  server.stop();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agentalign: multi-agent trajectory alignment toolkit"};
  app.require_subcommand(1);

  Common gen_c, prefs_c, train_c, eval_c, cmp_c, orch_c, val_c, tok_c, serve_c;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic question set and knowledge base");
  add_common(gen, gen_c, "dataset.jsonl");
  std::size_t n = 400;
  double fraction = 0.5;
  auto* n_opt = gen->add_option("--n", n, "Number of questions (config: n_questions)");
  auto* frac_opt = gen->add_option("--knowledge-fraction", fraction, "Share needing retrieval (config: knowledge_fraction)");

  auto* prefs = app.add_subcommand("build-prefs", "Build ranked preference samples (JSONL)");
  add_common(prefs, prefs_c, "ranked.jsonl");
  std::string prefs_data, split = "train", records;
  prefs->add_option("--data", prefs_data, "Dataset from 'gen'")->required();
  prefs->add_option("--split", split, "train, eval or all")->check(CLI::IsMember({"train", "eval", "all"}));
  prefs->add_option("--records", records, "Also write flat preference records here");

  auto* tr = app.add_subcommand("train", "Two-stage training (sft, dpo, fdpo, dadpo)");
  add_common(tr, train_c, "run");
  std::string method, corpus;
  tr->add_option("--method", method, "sft, dpo, fdpo or dadpo")->required();
  tr->add_option("--corpus", corpus, "Ranked samples from 'build-prefs'")->required();

  auto* ev = app.add_subcommand("eval", "Ranking and answer evaluation on the eval split");
  add_common(ev, eval_c, "report.csv");
  std::string policy, reference, samples, eval_data, label = "policy";
  bool eval_full = false;
  std::size_t workers = 1;
  ev->add_option("--policy", policy, "Policy checkpoint")->required();
  ev->add_option("--reference", reference, "Reference checkpoint (default: the policy)");
  ev->add_option("--samples", samples, "Held-out ranked samples")->required();
  ev->add_option("--data", eval_data, "Dataset from 'gen'")->required();
  ev->add_option("--label", label, "Method name in the report");
  ev->add_flag("--force-full", eval_full, "Always run the retrieval chain");
  ev->add_option("--workers", workers, "Evaluation threads")->check(CLI::PositiveNumber);

  auto* cmp = app.add_subcommand("compare", "Merge report CSVs into a comparison table");
  add_common(cmp, cmp_c, "comparison.csv");
  std::vector<std::string> report_files;
  cmp->add_option("reports", report_files, "Report CSV files")->required();

  auto* orch = app.add_subcommand("orchestrate", "Run the inference state machine over questions");
  add_common(orch, orch_c, "traces.txt");
  std::string orch_data, questions, remote, trajectories;
  bool orch_full = false;
  orch->add_option("--data", orch_data, "Dataset from 'gen' (mock agents and gold answers)")->required();
  orch->add_option("--questions", questions, "One question per line (default: every dataset question)");
  orch->add_option("--remote", remote, "host:port of an agent server; all agents go remote");
  orch->add_flag("--force-full", orch_full, "Always run the retrieval chain");
  orch->add_option("--trajectories", trajectories, "Also write the trajectories as JSONL");

  auto* val = app.add_subcommand("validate", "Check trajectory files against the step grammar");
  add_common(val, val_c, "");
  std::vector<std::string> val_files;
  val->add_option("files", val_files, "Trajectory text or JSONL files")->required();

  auto* tok = app.add_subcommand("tokens", "Per-agent token accounting for trajectory files");
  add_common(tok, tok_c, "");
  std::vector<std::string> tok_files;
  std::string tokenizer = "whitespace";
  tok->add_option("files", tok_files, "Trajectory text or JSONL files")->required();
  tok->add_option("--tokenizer", tokenizer, "whitespace or char");

  auto* serve = app.add_subcommand("serve", "Serve the mock agents over TCP");
  add_common(serve, serve_c, "");
  std::string serve_data;
  std::uint16_t port = 0;
  bool serve_full = false;
  double seconds = 0.0;
  serve->add_option("--data", serve_data, "Dataset from 'gen'")->required();
  serve->add_option("--port", port, "Port (0 picks a free one)");
  serve->add_flag("--force-full", serve_full, "Always run the retrieval chain");
  serve->add_option("--seconds", seconds, "Stop after this long (default: at end of stdin)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_gen(gen_c, n, fraction, n_opt->count() > 0, frac_opt->count() > 0);
    if (*prefs) return cmd_build_prefs(prefs_c, prefs_data, split, records);
    if (*tr) return cmd_train(train_c, method, corpus);
    if (*ev) return cmd_eval(eval_c, policy, reference, samples, eval_data, label, eval_full, workers);
    if (*cmp) return cmd_compare(cmp_c, report_files);
    if (*orch) return cmd_orchestrate(orch_c, orch_data, questions, remote, orch_full, trajectories);
    if (*val) return cmd_validate(val_c, val_files);
    if (*tok) return cmd_tokens(tok_c, tok_files, tokenizer);
    if (*serve) return cmd_serve(serve_c, serve_data, port, serve_full, seconds);
  } catch (const IoFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}
