#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <thread>

#include "agentalign/orchestrator.hpp"

namespace agentalign {

// Wire format: one JSON object per line.
//   request  {"agent": "<agent name>", "question", "state_text", "head_token"}
//   response {"payload", "end_token", "next_head_token"}  or  {"error": "<message>"}
std::string encode_request(const AgentRequest& r);
AgentRequest decode_request(const std::string& line);
std::string encode_response(const AgentResponse& r);
// Throws IoFailure when the record carries "error" or is malformed.
AgentResponse decode_response(const std::string& line);

struct RemoteEndpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  // Applies to connect, send and receive separately.
  int timeout_ms = 2000;
  // Extra attempts after a failed exchange.
  int retries = 2;
};

// "host:port".
RemoteEndpoint parse_endpoint(const std::string& text);

// Opens one TCP connection per request. Stateless, so safe to share.
class RemoteAgentBackend : public AgentBackend {
 public:
  explicit RemoteAgentBackend(RemoteEndpoint endpoint) : endpoint_(std::move(endpoint)) {}
  AgentResponse invoke(const AgentRequest& request) override;

 private:
  RemoteEndpoint endpoint_;
};

// Serves a backend map over the wire format on 127.0.0.1. Each connection
// carries any number of request lines and is handled on the accept thread.
class AgentServer {
 public:
  // Port 0 picks a free port.
  AgentServer(BackendMap backends, std::uint16_t port = 0);
  ~AgentServer();
  AgentServer(const AgentServer&) = delete;
  AgentServer& operator=(const AgentServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  void stop();

 private:
  void serve();
  void handle(int fd);

  BackendMap backends_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
};

}  // namespace agentalign
