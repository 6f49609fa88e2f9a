#pragma once

// Scripted backends for the four inference branches, shared by the
// orchestrator tests and the acceptance checks.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "agentalign/orchestrator.hpp"

namespace agentalign::testing {

using A = AgentKind;

inline AgentResponse resp(A agent, std::string payload, std::optional<A> next) {
  const auto& t = TokenTable::standard();
  return {std::move(payload), t.end_literal(agent), next ? t.head_literal(*next) : std::string()};
}

inline std::shared_ptr<ScriptedBackend> script(std::vector<AgentResponse> r) {
  return std::make_shared<ScriptedBackend>(std::move(r));
}

struct Scenario {
  std::shared_ptr<ScriptedBackend> ir, kr, kf, kl, rg, av;
  BackendMap map() const {
    return {{A::IntentReconstructor, ir}, {A::KnowledgeRetriever, kr}, {A::KnowledgeFilter, kf},
            {A::KnowledgeLocator, kl},    {A::ResponseGenerator, rg},  {A::AnswerVerifier, av}};
  }
};

inline Scenario knowledge_scenario(const std::string& located) {
  Scenario s;
  s.ir = script({resp(A::IntentReconstructor, "when was A born\nwhen was B born", A::KnowledgeRetriever)});
  s.kr = script({resp(A::KnowledgeRetriever, "[1] 0.9 A was born in 1955\n[2] 0.5 A likes tea\n[3] 0.1 noise",
                      A::KnowledgeRetriever),
                 resp(A::KnowledgeRetriever, "[4] 0.8 B was born in 1960\n[5] 0.3 B likes chess\n[6] 0.2 more noise",
                      A::KnowledgeFilter)});
  s.kf = script({resp(A::KnowledgeFilter, "[1][4][9]", A::KnowledgeLocator)});
  s.kl = script({resp(A::KnowledgeLocator, located, A::ResponseGenerator)});
  s.rg = script({resp(A::ResponseGenerator, "A", A::AnswerVerifier)});
  s.av = script({resp(A::AnswerVerifier, "Correct", std::nullopt)});
  return s;
}

inline Scenario direct_scenario() {
  Scenario s = knowledge_scenario("");
  s.ir = script({resp(A::IntentReconstructor, "what is six times seven", A::ResponseGenerator)});
  s.rg = script({resp(A::ResponseGenerator, "42", A::AnswerVerifier)});
  return s;
}

inline Scenario retry_scenario() {
  Scenario s = direct_scenario();
  s.rg = script({resp(A::ResponseGenerator, "41", A::AnswerVerifier), resp(A::ResponseGenerator, "40", A::AnswerVerifier),
                 resp(A::ResponseGenerator, "39", A::AnswerVerifier), resp(A::ResponseGenerator, "38", A::AnswerVerifier)});
  s.av = script({resp(A::AnswerVerifier, "wrong", A::IntentReconstructor)});
  return s;
}

}  // namespace agentalign::testing
