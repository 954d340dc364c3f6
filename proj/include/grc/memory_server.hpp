#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <mutex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "grc/memory.hpp"

namespace grc {

// Wire format: every frame is a 4-byte big-endian length followed by that many
// bytes. A request is a JSON header frame {op, doc_id, meta}; put carries a
// second frame holding the serialized record, whose length is declared in
// meta.payload_bytes. Responses mirror this with {status, error?, meta}.

inline constexpr std::uint32_t kDefaultFrameCap = 256u << 20;

class ProtocolError : public MemoryError {
 public:
  using MemoryError::MemoryError;
};

namespace net {

inline void send_all(int fd, const char* p, std::size_t n) {
  while (n) {
    const ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
    p += w;
    n -= std::size_t(w);
  }
}

// False on clean EOF before any byte.
inline bool recv_all(int fd, char* p, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r == 0 && got == 0) return false;
    if (r <= 0) throw ProtocolError("connection closed mid-frame");
    got += std::size_t(r);
  }
  return true;
}

inline void write_frame(int fd, std::string_view body) {
  if (body.size() > 0xffffffffu) throw ProtocolError("frame too large");
  const std::uint32_t n = htonl(std::uint32_t(body.size()));
  std::string buf(reinterpret_cast<const char*>(&n), 4);
  buf.append(body);
  send_all(fd, buf.data(), buf.size());
}

inline std::optional<std::string> read_frame(int fd, std::uint32_t cap) {
  std::uint32_t n = 0;
  if (!recv_all(fd, reinterpret_cast<char*>(&n), 4)) return std::nullopt;
  n = ntohl(n);
  if (n > cap) throw ProtocolError("frame of " + std::to_string(n) + " bytes exceeds cap " + std::to_string(cap));
  std::string body(n, '\0');
  if (n && !recv_all(fd, body.data(), n)) throw ProtocolError("connection closed mid-frame");
  return body;
}

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { reset(); }
  int fd() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline std::pair<std::string, std::uint16_t> parse_address(std::string_view addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("address must be host:port");
  const int port = std::stoi(std::string(addr.substr(colon + 1)));
  if (port < 0 || port > 65535) throw std::invalid_argument("port out of range");
  return {std::string(addr.substr(0, colon)), std::uint16_t(port)};
}

}  // namespace net

/// TCP front end for a MemoryStore. One thread per connection.
class MemoryServer {
 public:
  MemoryServer(MemoryStore& store, std::string host = "127.0.0.1", std::uint16_t port = 0,
               std::uint32_t frame_cap = kDefaultFrameCap)
      : store_(store), frame_cap_(frame_cap) {
    listener_ = net::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (listener_.fd() < 0) throw std::runtime_error("socket() failed");
    int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(port);
    if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &a.sin_addr) != 1)
      throw std::invalid_argument("bad IPv4 address: " + host);
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&a), sizeof a) != 0)
      throw std::runtime_error("bind failed: " + std::string(std::strerror(errno)));
    if (::listen(listener_.fd(), 64) != 0) throw std::runtime_error("listen failed");
    socklen_t len = sizeof a;
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&a), &len);
    port_ = ntohs(a.sin_port);
  }

  ~MemoryServer() { stop(); }

  std::uint16_t port() const { return port_; }

  void start() {
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  /// Blocks in the accept loop (for the CLI).
  void serve_forever() { accept_loop(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listener_.fd(), SHUT_RDWR);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::list<Conn> conns;
    {
      std::lock_guard g(conns_mu_);
      for (auto& c : conns_) ::shutdown(c.fd, SHUT_RDWR);
      conns.swap(conns_);
    }
    for (auto& c : conns)
      if (c.thread.joinable()) c.thread.join();
    listener_.reset();
  }

 private:
  struct Conn {
    int fd;
    std::thread thread;
  };

  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard g(conns_mu_);
      reap();
      conns_.push_back({fd, {}});
      auto it = std::prev(conns_.end());
      it->thread = std::thread([this, fd, it] {
        serve_connection(fd);
        std::lock_guard g2(conns_mu_);
        finished_.push_back(it);
      });
    }
  }

  // Joins threads of closed connections. Caller holds conns_mu_.
  void reap() {
    for (auto it : finished_) {
      if (it->thread.joinable()) it->thread.join();
      conns_.erase(it);
    }
    finished_.clear();
  }

  static void respond(int fd, const nlohmann::json& header, const std::string* payload = nullptr) {
    net::write_frame(fd, header.dump());
    if (payload) net::write_frame(fd, *payload);
  }

  static nlohmann::json error(std::string_view status, std::string_view what) {
    return {{"status", status}, {"error", what}};
  }

  void serve_connection(int fd) {
    net::Socket sock(fd);
    try {
      while (true) {
        const auto frame = net::read_frame(fd, frame_cap_);
        if (!frame) return;
        nlohmann::json req;
        try {
          req = nlohmann::json::parse(*frame);
          if (!req.is_object() || !req.contains("op") || !req["op"].is_string())
            throw ProtocolError("header must be an object with a string op");
        } catch (const std::exception& e) {
          respond(fd, error("error", std::string("malformed header: ") + e.what()));
          return;
        }
        if (!handle(fd, req)) return;
      }
    } catch (const ProtocolError& e) {
      try {
        respond(fd, error("error", e.what()));
      } catch (...) {
      }
    } catch (...) {
    }
  }

  // False closes the connection.
  bool handle(int fd, const nlohmann::json& req) {
    const std::string op = req["op"];
    const std::string doc_id = req.value("doc_id", "");
    const nlohmann::json meta = req.value("meta", nlohmann::json::object());
    try {
      if (op == "put") {
        const std::uint64_t n = meta.value("payload_bytes", std::uint64_t(0));
        if (n > frame_cap_) {
          respond(fd, error("error", "payload exceeds frame cap"));
          return false;
        }
        const auto body = net::read_frame(fd, frame_cap_);
        if (!body || body->size() != n) {
          respond(fd, error("error", "payload frame length differs from header"));
          return false;
        }
        auto mem = deserialize_memory(*body);
        if (!doc_id.empty() && mem.doc_id != doc_id) throw MemoryError("doc_id in header differs from record");
        store_.put(mem);
        respond(fd, {{"status", "ok"}});
      } else if (op == "get") {
        const auto bytes = serialize_memory(store_.get(doc_id));
        respond(fd, {{"status", "ok"}, {"meta", {{"payload_bytes", bytes.size()}}}}, &bytes);
      } else if (op == "delete") {
        store_.remove(doc_id);
        respond(fd, {{"status", "ok"}});
      } else if (op == "list") {
        nlohmann::json items = nlohmann::json::array();
        for (const auto& i : store_.list())
          items.push_back({{"doc_id", i.doc_id}, {"m", i.m}, {"num_layers", i.num_layers}, {"bytes", i.bytes}});
        respond(fd, {{"status", "ok"}, {"meta", {{"items", items}}}});
      } else {
        respond(fd, error("error", "unknown op '" + op + "'"));
      }
    } catch (const NotFound& e) {
      respond(fd, error("not_found", e.what()));
    } catch (const ProtocolError&) {
      throw;
    } catch (const std::exception& e) {
      respond(fd, error("error", e.what()));
    }
    return true;
  }

  MemoryStore& store_;
  std::uint32_t frame_cap_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex conns_mu_;
  std::list<Conn> conns_;
  std::vector<std::list<Conn>::iterator> finished_;
};

/// Blocking client; one connection, not thread-safe.
class MemoryClient {
 public:
  explicit MemoryClient(const std::string& address, std::uint32_t frame_cap = kDefaultFrameCap) : frame_cap_(frame_cap) {
    const auto [host, port] = net::parse_address(address);
    addrinfo hints{}, *res = nullptr;
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
      throw MemoryError("cannot resolve " + host);
    sock_ = net::Socket(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
    const int rc = sock_.fd() < 0 ? -1 : ::connect(sock_.fd(), res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc != 0) throw MemoryError("cannot connect to " + address);
    int one = 1;
    ::setsockopt(sock_.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }

  void put(const CompressedMemory& mem) {
    const auto bytes = serialize_memory(mem);
    net::write_frame(sock_.fd(), nlohmann::json{{"op", "put"}, {"doc_id", mem.doc_id},
                                                {"meta", {{"payload_bytes", bytes.size()}}}}
                                     .dump());
    net::write_frame(sock_.fd(), bytes);
    check(read_header());
  }

  CompressedMemory get(const std::string& doc_id) {
    net::write_frame(sock_.fd(), nlohmann::json{{"op", "get"}, {"doc_id", doc_id}}.dump());
    const auto h = read_header();
    check(h);
    const auto body = net::read_frame(sock_.fd(), frame_cap_);
    if (!body || body->size() != h["meta"].value("payload_bytes", std::uint64_t(0)))
      throw ProtocolError("get: payload frame length differs from header");
    return deserialize_memory(*body);
  }

  void remove(const std::string& doc_id) {
    net::write_frame(sock_.fd(), nlohmann::json{{"op", "delete"}, {"doc_id", doc_id}}.dump());
    check(read_header());
  }

  std::vector<MemoryInfo> list() {
    net::write_frame(sock_.fd(), nlohmann::json{{"op", "list"}}.dump());
    const auto h = read_header();
    check(h);
    std::vector<MemoryInfo> out;
    for (const auto& i : h["meta"]["items"])
      out.push_back({i["doc_id"], i["m"], i["num_layers"], i["bytes"]});
    return out;
  }

  /// Sends an arbitrary frame and returns the response header (tests).
  nlohmann::json raw(std::string_view frame) {
    net::write_frame(sock_.fd(), frame);
    return read_header();
  }

  int fd() const { return sock_.fd(); }

 private:
  nlohmann::json read_header() {
    const auto f = net::read_frame(sock_.fd(), frame_cap_);
    if (!f) throw ProtocolError("server closed the connection");
    return nlohmann::json::parse(*f);
  }

  static void check(const nlohmann::json& h) {
    const std::string status = h.value("status", "");
    if (status == "ok") return;
    const std::string what = h.value("error", "unknown error");
    if (status == "not_found") throw NotFound(what);
    throw MemoryError(what);
  }

  net::Socket sock_;
  std::uint32_t frame_cap_;
};

/// Store access for pattern execution: local directory or remote server.
class MemoryBackend {
 public:
  virtual ~MemoryBackend() = default;
  virtual void put(const CompressedMemory& mem) = 0;
  virtual CompressedMemory get(const std::string& doc_id) = 0;
};

class LocalBackend : public MemoryBackend {
 public:
  explicit LocalBackend(MemoryStore& s) : s_(s) {}
  void put(const CompressedMemory& mem) override { s_.put(mem); }
  CompressedMemory get(const std::string& doc_id) override { return s_.get(doc_id); }

 private:
  MemoryStore& s_;
};

class RemoteBackend : public MemoryBackend {
 public:
  explicit RemoteBackend(const std::string& address) : c_(address) {}
  void put(const CompressedMemory& mem) override { c_.put(mem); }
  CompressedMemory get(const std::string& doc_id) override { return c_.get(doc_id); }

 private:
  MemoryClient c_;
};

}  // namespace grc
