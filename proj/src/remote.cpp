#include "agentalign/remote.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <json.hpp>

#include "agentalign/errors.hpp"

namespace agentalign {

namespace {

using json = nlohmann::json;

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  ~Socket() {
    if (fd_ >= 0) ::close(fd_);
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  int get() const noexcept { return fd_; }

 private:
  int fd_;
};

std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

void send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoFailure(sys_error("send"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

// Reads up to and excluding the next '\n'. Returns false on a clean EOF before
// any byte of the line.
bool read_line(int fd, std::string& buffer, std::string& line) {
  for (;;) {
    const std::size_t nl = buffer.find('\n');
    if (nl != std::string::npos) {
      line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      return true;
    }
    char chunk[4096];
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoFailure(sys_error("recv"));
    }
    if (n == 0) {
      if (buffer.empty()) return false;
      throw IoFailure("connection closed mid-line");
    }
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

void set_timeouts(int fd, int timeout_ms) {
  timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

int connect_to(const RemoteEndpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string port = std::to_string(ep.port);
  if (const int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &found); rc != 0) {
    throw IoFailure("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  }
  std::string last_error = "no addresses for " + ep.host;
  for (addrinfo* ai = found; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      pollfd p{fd, POLLOUT, 0};
      rc = ::poll(&p, 1, ep.timeout_ms);
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        if (rc == 0) errno = ETIMEDOUT;
        rc = -1;
      }
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, flags);
      set_timeouts(fd, ep.timeout_ms);
      ::freeaddrinfo(found);
      return fd;
    }
    last_error = sys_error("connect to " + ep.host + ":" + port);
    ::close(fd);
  }
  ::freeaddrinfo(found);
  throw IoFailure(last_error);
}

}  // namespace

std::string encode_request(const AgentRequest& r) {
  return json{{"agent", agent_name(r.agent)},
              {"question", r.question},
              {"state_text", r.state_text},
              {"head_token", r.head_token}}
      .dump();
}

AgentRequest decode_request(const std::string& line) {
  try {
    const auto j = json::parse(line);
    const auto agent = agent_from_name(j.at("agent").get<std::string>());
    if (!agent) throw IoFailure("unknown agent " + j.at("agent").get<std::string>());
    return {*agent, j.at("question").get<std::string>(), j.at("state_text").get<std::string>(),
            j.at("head_token").get<std::string>()};
  } catch (const json::exception& e) {
    throw IoFailure(std::string("malformed request: ") + e.what());
  }
}

std::string encode_response(const AgentResponse& r) {
  return json{{"payload", r.payload}, {"end_token", r.end_token}, {"next_head_token", r.next_head_token}}.dump();
}

AgentResponse decode_response(const std::string& line) {
  try {
    const auto j = json::parse(line);
    if (j.contains("error")) throw IoFailure("remote agent error: " + j.at("error").get<std::string>());
    return {j.at("payload").get<std::string>(), j.at("end_token").get<std::string>(),
            j.at("next_head_token").get<std::string>()};
  } catch (const json::exception& e) {
    throw IoFailure(std::string("malformed response: ") + e.what());
  }
}

RemoteEndpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0) throw std::invalid_argument("endpoint must be host:port");
  RemoteEndpoint ep;
  ep.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  std::size_t used = 0;
  unsigned long value = 0;
  try {
    value = std::stoul(port, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != port.size() || port.empty() || value == 0 || value > 65535) {
    throw std::invalid_argument("bad port in endpoint " + text);
  }
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

AgentResponse RemoteAgentBackend::invoke(const AgentRequest& request) {
  const std::string line = encode_request(request) + "\n";
  std::string last_error;
  for (int attempt = 0; attempt <= endpoint_.retries; ++attempt) {
    try {
      Socket s(connect_to(endpoint_));
      send_all(s.get(), line);
      std::string buffer;
      std::string reply;
      if (!read_line(s.get(), buffer, reply)) throw IoFailure("connection closed without a response");
      return decode_response(reply);
    } catch (const IoFailure& e) {
      last_error = e.what();
      if (last_error.rfind("remote agent error", 0) == 0) break;
    }
  }
  throw IoFailure(last_error);
}

AgentServer::AgentServer(BackendMap backends, std::uint16_t port) : backends_(std::move(backends)) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoFailure(sys_error("socket"));
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
    const std::string err = sys_error("bind/listen");
    ::close(listen_fd_);
    throw IoFailure(err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  thread_ = std::thread([this] { serve(); });
}

AgentServer::~AgentServer() { stop(); }

void AgentServer::stop() {
  if (stopping_.exchange(true)) return;
  if (thread_.joinable()) thread_.join();
  ::close(listen_fd_);
}

void AgentServer::serve() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 50) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    set_timeouts(fd, 2000);
    handle(fd);
    ::close(fd);
  }
}

void AgentServer::handle(int fd) {
  std::string buffer;
  std::string line;
  try {
    while (read_line(fd, buffer, line)) {
      std::string reply;
      try {
        const auto req = decode_request(line);
        const auto it = backends_.find(req.agent);
        if (it == backends_.end()) throw IoFailure("no backend for " + std::string(agent_name(req.agent)));
        reply = encode_response(it->second->invoke(req));
      } catch (const std::exception& e) {
        reply = json{{"error", e.what()}}.dump();
      }
      send_all(fd, reply + "\n");
    }
  } catch (const IoFailure&) {
    // Client went away or timed out; drop the connection.
  }
}

}  // namespace agentalign
