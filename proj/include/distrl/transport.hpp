#pragma once

// Framed host/worker protocol.
//
// Frame: "DRL1" | type (1 byte) | payload length (4 bytes, big-endian) | JSON payload.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <boost/beast/core/detail/base64.hpp>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"
#include "distrl/errors.hpp"

namespace distrl {

inline constexpr std::uint16_t kDefaultPort = 7421;
inline constexpr int kProtoVersion = 1;
inline constexpr std::uint32_t kMaxPayload = 64u << 20;
inline constexpr std::size_t kHeaderSize = 9;
inline constexpr std::array<std::uint8_t, 4> kMagic{'D', 'R', 'L', '1'};

enum class MsgType : std::uint8_t {
  hello = 0x01,
  policy = 0x02,
  traj_batch = 0x03,
  policy_request = 0x04,
  ack = 0x05,
  shutdown = 0x06,
  heartbeat = 0x07,
};

inline const char* to_string(MsgType t) noexcept {
  switch (t) {
    case MsgType::hello: return "HELLO";
    case MsgType::policy: return "POLICY";
    case MsgType::traj_batch: return "TRAJ_BATCH";
    case MsgType::policy_request: return "POLICY_REQUEST";
    case MsgType::ack: return "ACK";
    case MsgType::shutdown: return "SHUTDOWN";
    case MsgType::heartbeat: return "HEARTBEAT";
  }
  return "?";
}

struct HelloMsg {
  std::string worker_id;
  int proto_version = kProtoVersion;
  bool operator==(const HelloMsg&) const = default;
};

struct PolicyMsg {
  std::int64_t version = 0;
  std::string shape_tag;
  std::string params_f32_b64;
  std::uint32_t crc32 = 0;
  bool operator==(const PolicyMsg&) const = default;
};

struct TrajBatchMsg {
  std::vector<Trajectory> trajectories;
  bool operator==(const TrajBatchMsg&) const = default;
};

struct PolicyRequestMsg {
  std::int64_t have_version = -1;
  bool operator==(const PolicyRequestMsg&) const = default;
};

struct AckMsg {
  int of_type = 0;
  bool operator==(const AckMsg&) const = default;
};

struct ShutdownMsg {
  bool operator==(const ShutdownMsg&) const = default;
};

struct HeartbeatMsg {
  std::int64_t ts_ms = 0;
  bool operator==(const HeartbeatMsg&) const = default;
};

using Message = std::variant<HelloMsg, PolicyMsg, TrajBatchMsg, PolicyRequestMsg, AckMsg, ShutdownMsg, HeartbeatMsg>;

inline MsgType message_type(const Message& m) noexcept {
  static constexpr MsgType types[] = {MsgType::hello,  MsgType::policy,   MsgType::traj_batch, MsgType::policy_request,
                                      MsgType::ack,    MsgType::shutdown, MsgType::heartbeat};
  return types[m.index()];
}

using Bytes = std::vector<std::uint8_t>;

// ---- base64 (RFC 4648, padded) ----

inline std::string base64_encode(std::span<const std::byte> data) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(data.size()), '\0');
  out.resize(b64::encode(out.data(), data.data(), data.size()));
  return out;
}

inline std::vector<std::byte> base64_decode(std::string_view text) {
  namespace b64 = boost::beast::detail::base64;
  if (text.size() % 4 != 0) throw DecodeError("base64: length not a multiple of 4");
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool alpha = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' || c == '/';
    if (c == '=') {
      if (i + 2 < text.size()) throw DecodeError("base64: misplaced padding");
      ++pad;
    } else if (!alpha || pad > 0) {
      throw DecodeError("base64: invalid character");
    }
  }
  std::vector<std::byte> out(b64::decoded_size(text.size()));
  const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
  if (read + pad != text.size()) throw DecodeError("base64: truncated input");
  out.resize(written);
  return out;
}

// ---- POLICY payload <-> snapshot ----

inline PolicyMsg policy_message(const PolicySnapshot& s) {
  const auto bytes = pack_f32_le(s.params);
  return PolicyMsg{s.version, s.shape_tag, base64_encode(bytes), crc32(bytes)};
}

/// Decodes the float block; IntegrityError on CRC mismatch, DecodeError on malformed content.
inline PolicySnapshot snapshot_from_message(const PolicyMsg& m) {
  const auto bytes = base64_decode(m.params_f32_b64);
  if (crc32(bytes) != m.crc32) throw IntegrityError("POLICY crc32 mismatch");
  PolicySnapshot s;
  s.version = m.version;
  s.shape_tag = m.shape_tag;
  s.params = unpack_f32_le(bytes);
  s.checksum = m.crc32;
  if (s.params.size() != ShapeTag::parse(m.shape_tag).length())
    throw DecodeError("POLICY params length does not match shape_tag " + m.shape_tag);
  return s;
}

// ---- JSON payloads ----

inline json payload_json(const Message& m) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, HelloMsg>) {
          return {{"worker_id", v.worker_id}, {"proto_version", v.proto_version}};
        } else if constexpr (std::is_same_v<T, PolicyMsg>) {
          return {{"version", v.version}, {"shape_tag", v.shape_tag}, {"params_f32_b64", v.params_f32_b64},
                  {"crc32", v.crc32}};
        } else if constexpr (std::is_same_v<T, TrajBatchMsg>) {
          return {{"trajectories", v.trajectories}};
        } else if constexpr (std::is_same_v<T, PolicyRequestMsg>) {
          return {{"have_version", v.have_version}};
        } else if constexpr (std::is_same_v<T, AckMsg>) {
          return {{"of_type", v.of_type}};
        } else if constexpr (std::is_same_v<T, ShutdownMsg>) {
          return json::object();
        } else {
          return {{"ts_ms", v.ts_ms}};
        }
      },
      m);
}

inline Message message_from_json(MsgType type, const json& j) {
  if (!j.is_object()) throw ProtocolError("payload is not a JSON object");
  switch (type) {
    case MsgType::hello: return HelloMsg{j.at("worker_id").get<std::string>(), j.at("proto_version").get<int>()};
    case MsgType::policy:
      return PolicyMsg{j.at("version").get<std::int64_t>(), j.at("shape_tag").get<std::string>(),
                       j.at("params_f32_b64").get<std::string>(), j.at("crc32").get<std::uint32_t>()};
    case MsgType::traj_batch: return TrajBatchMsg{j.at("trajectories").get<std::vector<Trajectory>>()};
    case MsgType::policy_request: return PolicyRequestMsg{j.at("have_version").get<std::int64_t>()};
    case MsgType::ack: return AckMsg{j.at("of_type").get<int>()};
    case MsgType::shutdown: return ShutdownMsg{};
    case MsgType::heartbeat: return HeartbeatMsg{j.at("ts_ms").get<std::int64_t>()};
  }
  throw ProtocolError("unknown message type");
}

inline Bytes encode_frame(const Message& m) {
  const std::string payload = payload_json(m).dump();
  if (payload.size() > kMaxPayload) throw ProtocolError("payload exceeds maximum frame size");
  Bytes out;
  out.reserve(kHeaderSize + payload.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(static_cast<std::uint8_t>(message_type(m)));
  const auto n = static_cast<std::uint32_t>(payload.size());
  out.push_back(static_cast<std::uint8_t>(n >> 24));
  out.push_back(static_cast<std::uint8_t>(n >> 16));
  out.push_back(static_cast<std::uint8_t>(n >> 8));
  out.push_back(static_cast<std::uint8_t>(n));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

enum class DecodeStatus { decoded, need_more, protocol_error, integrity_error };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::need_more;
  std::optional<Message> message;
  std::size_t consumed = 0;  // bytes to discard (whole frame for decoded/integrity_error)
  std::string error;
};

/// Decodes at most one frame from the front of `bytes`. A protocol error means
/// the stream is unusable; an integrity error discards only this frame.
inline DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  DecodeResult r;
  const std::size_t have_magic = std::min(bytes.size(), kMagic.size());
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(have_magic), kMagic.begin())) {
    r.status = DecodeStatus::protocol_error;
    r.error = "bad magic";
    return r;
  }
  if (bytes.size() < kHeaderSize) return r;
  const std::uint8_t type = bytes[4];
  if (type < 0x01 || type > 0x07) {
    r.status = DecodeStatus::protocol_error;
    r.error = "unknown message type " + std::to_string(type);
    return r;
  }
  const std::uint32_t n = (std::uint32_t{bytes[5]} << 24) | (std::uint32_t{bytes[6]} << 16) |
                          (std::uint32_t{bytes[7]} << 8) | std::uint32_t{bytes[8]};
  if (n > kMaxPayload) {
    r.status = DecodeStatus::protocol_error;
    r.error = "payload length " + std::to_string(n) + " exceeds limit";
    return r;
  }
  if (bytes.size() < kHeaderSize + n) return r;
  r.consumed = kHeaderSize + n;
  const auto* p = reinterpret_cast<const char*>(bytes.data() + kHeaderSize);
  try {
    const json j = json::parse(p, p + n);
    Message m = message_from_json(static_cast<MsgType>(type), j);
    if (auto* pm = std::get_if<PolicyMsg>(&m)) snapshot_from_message(*pm);
    r.status = DecodeStatus::decoded;
    r.message = std::move(m);
  } catch (const IntegrityError& e) {
    r.status = DecodeStatus::integrity_error;
    r.error = e.what();
  } catch (const std::exception& e) {
    r.status = DecodeStatus::protocol_error;
    r.error = std::string("malformed payload: ") + e.what();
  }
  return r;
}

/// Incremental decoder over a byte stream.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

  DecodeResult next() {
    auto r = decode_frame(std::span<const std::uint8_t>(buf_).subspan(start_));
    if (r.status == DecodeStatus::decoded || r.status == DecodeStatus::integrity_error) {
      start_ += r.consumed;
      if (start_ > 4096 && start_ * 2 > buf_.size()) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
        start_ = 0;
      }
    }
    return r;
  }

  std::size_t buffered() const noexcept { return buf_.size() - start_; }

 private:
  Bytes buf_;
  std::size_t start_ = 0;
};

// ---- byte-stream connections ----

enum class RecvStatus { data, timeout, closed };

class Connection {
 public:
  virtual ~Connection() = default;
  /// Writes all bytes; false if the peer is gone.
  virtual bool send(std::span<const std::uint8_t> data) = 0;
  virtual RecvStatus recv(Bytes& out, int timeout_ms) = 0;
  virtual void close() = 0;
};

namespace detail {

struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

}  // namespace detail

/// One end of an in-process full-duplex byte stream.
class LoopbackConnection final : public Connection {
 public:
  LoopbackConnection(std::shared_ptr<detail::Pipe> in, std::shared_ptr<detail::Pipe> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackConnection() override { close(); }

  bool send(std::span<const std::uint8_t> data) override {
    if (send_delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(send_delay_ms_.load()));
    std::lock_guard lk(out_->mu);
    if (out_->closed) return false;
    out_->bytes.insert(out_->bytes.end(), data.begin(), data.end());
    out_->cv.notify_all();
    return true;
  }

  RecvStatus recv(Bytes& out, int timeout_ms) override {
    std::unique_lock lk(in_->mu);
    const bool ready = in_->cv.wait_for(lk, std::chrono::milliseconds(timeout_ms),
                                        [&] { return !in_->bytes.empty() || in_->closed; });
    if (!ready) return RecvStatus::timeout;
    if (in_->bytes.empty()) return RecvStatus::closed;
    out.assign(in_->bytes.begin(), in_->bytes.end());
    in_->bytes.clear();
    return RecvStatus::data;
  }

  void close() override {
    for (auto* p : {in_.get(), out_.get()}) {
      std::lock_guard lk(p->mu);
      p->closed = true;
      p->cv.notify_all();
    }
  }

  /// Artificial per-send stall, for isolation tests.
  void set_send_delay_ms(int ms) noexcept { send_delay_ms_ = ms; }

 private:
  std::shared_ptr<detail::Pipe> in_, out_;
  std::atomic<int> send_delay_ms_{0};
};

inline std::pair<std::shared_ptr<LoopbackConnection>, std::shared_ptr<LoopbackConnection>> make_loopback_pair() {
  auto a = std::make_shared<detail::Pipe>();
  auto b = std::make_shared<detail::Pipe>();
  return {std::make_shared<LoopbackConnection>(a, b), std::make_shared<LoopbackConnection>(b, a)};
}

class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override {
    close();
    std::lock_guard lk(mu_);
    if (fd_ >= 0) ::close(fd_);
  }
  TcpConnection(const TcpConnection&) = delete;
  TcpConnection& operator=(const TcpConnection&) = delete;

  bool send(std::span<const std::uint8_t> data) override {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return false;
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  RecvStatus recv(Bytes& out, int timeout_ms) override {
    pollfd p{fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc == 0) return RecvStatus::timeout;
    if (rc < 0) return errno == EINTR ? RecvStatus::timeout : RecvStatus::closed;
    out.resize(65536);
    const ssize_t n = ::recv(fd_, out.data(), out.size(), 0);
    if (n <= 0) {
      out.clear();
      return RecvStatus::closed;
    }
    out.resize(static_cast<std::size_t>(n));
    return RecvStatus::data;
  }

  void close() override {
    if (!shut_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  std::mutex mu_;
  int fd_;
  std::atomic<bool> shut_{false};
};

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
};

/// "host:port", "host" or ":port"; DISTRL_ADDR overrides when `text` is empty.
inline Address parse_address(std::string text) {
  if (text.empty()) {
    if (const char* env = std::getenv("DISTRL_ADDR")) text = env;
  }
  Address a;
  if (text.empty()) return a;
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    a.host = text;
    return a;
  }
  if (colon > 0) a.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  try {
    std::size_t used = 0;
    const long v = std::stol(port, &used);
    if (used != port.size() || v < 0 || v > 65535) throw std::invalid_argument("range");
    a.port = static_cast<std::uint16_t>(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid port in address: " + text);
  }
  return a;
}

namespace detail {

inline addrinfo* resolve(const Address& a, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(a.port);
  if (::getaddrinfo(a.host.empty() ? nullptr : a.host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
    throw std::runtime_error("cannot resolve " + a.host + ":" + port);
  return res;
}

}  // namespace detail

inline std::shared_ptr<TcpConnection> tcp_connect(const Address& a) {
  addrinfo* res = detail::resolve(a, false);
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw std::runtime_error("socket() failed");
  }
  const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0) {
    ::close(fd);
    throw std::runtime_error("connect to " + a.host + ":" + std::to_string(a.port) + " failed: " + std::strerror(errno));
  }
  return std::make_shared<TcpConnection>(fd);
}

class TcpListener {
 public:
  explicit TcpListener(const Address& a) {
    addrinfo* res = detail::resolve(a, true);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const int rc = ::bind(fd_, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc != 0 || ::listen(fd_, 64) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw std::runtime_error("cannot listen on " + a.host + ":" + std::to_string(a.port) + ": " + why);
    }
  }
  ~TcpListener() { ::close(fd_); }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const {
    sockaddr_in sa{};
    socklen_t len = sizeof sa;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    return ntohs(sa.sin_port);
  }

  /// nullptr on timeout.
  std::shared_ptr<TcpConnection> accept(int timeout_ms) {
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, timeout_ms) <= 0) return nullptr;
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) return nullptr;
    return std::make_shared<TcpConnection>(fd);
  }

 private:
  int fd_ = -1;
};

/// Message-level view over a Connection. The write path is serialized; reads
/// belong to a single consumer.
class FramedChannel {
 public:
  explicit FramedChannel(std::shared_ptr<Connection> conn) : conn_(std::move(conn)) {}

  bool send(const Message& m) {
    const auto bytes = encode_frame(m);
    std::lock_guard lk(write_mu_);
    return conn_->send(bytes);
  }

  struct Received {
    RecvStatus status = RecvStatus::timeout;
    std::optional<Message> message;
    bool integrity_error = false;
  };

  /// Next message, a timeout, or closed. Throws ProtocolError on a corrupt stream.
  Received receive(int timeout_ms) {
    for (;;) {
      auto r = decoder_.next();
      if (r.status == DecodeStatus::decoded) return {RecvStatus::data, std::move(r.message), false};
      if (r.status == DecodeStatus::integrity_error) return {RecvStatus::data, std::nullopt, true};
      if (r.status == DecodeStatus::protocol_error) throw ProtocolError(r.error);
      Bytes chunk;
      const auto st = conn_->recv(chunk, timeout_ms);
      if (st != RecvStatus::data) return {st, std::nullopt, false};
      decoder_.feed(chunk);
    }
  }

  void close() { conn_->close(); }
  Connection& connection() noexcept { return *conn_; }

 private:
  std::shared_ptr<Connection> conn_;
  std::mutex write_mu_;
  FrameDecoder decoder_;
};

// ---- host session state machine (no I/O) ----

using SessionId = std::uint64_t;

struct TraceEvent {
  SessionId session = 0;
  std::string in;                // message type received, or an event name
  std::vector<std::string> out;  // message types emitted in response
  bool operator==(const TraceEvent&) const = default;
};

/// Host-side protocol logic shared by every binding. Not thread-safe; callers serialize.
class HostCore {
 public:
  using TrajectorySink = std::function<void(Trajectory&&, const std::string& worker_id)>;

  explicit HostCore(TrajectorySink sink) : sink_(std::move(sink)) {}

  SessionId open_session() {
    const SessionId id = next_id_++;
    sessions_[id] = Session{};
    return id;
  }

  void close_session(SessionId id) { sessions_.erase(id); }

  /// Replies to send on this session. Throws ProtocolError for handshake or
  /// identity violations; the caller then drops the session.
  std::vector<Message> on_message(SessionId id, const Message& m) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ProtocolError("unknown session");
    Session& s = it->second;
    std::vector<Message> out;
    if (const auto* h = std::get_if<HelloMsg>(&m)) {
      if (s.hello) throw ProtocolError("duplicate HELLO on session");
      if (h->proto_version != kProtoVersion) throw ProtocolError("unsupported proto_version");
      for (const auto& [other, os] : sessions_)
        if (other != id && os.hello && os.worker_id == h->worker_id)
          throw ProtocolError("duplicate worker_id " + h->worker_id);
      s.hello = true;
      s.worker_id = h->worker_id;
      out.emplace_back(AckMsg{static_cast<int>(MsgType::hello)});
      if (current_) out.emplace_back(*current_);
    } else if (!s.hello) {
      throw ProtocolError(std::string(to_string(message_type(m))) + " before HELLO");
    } else if (auto* b = std::get_if<TrajBatchMsg>(&m)) {
      for (const auto& t : b->trajectories) {
        Trajectory copy = t;
        if (sink_) sink_(std::move(copy), s.worker_id);
      }
      received_ += b->trajectories.size();
    } else if (std::holds_alternative<PolicyRequestMsg>(m)) {
      if (current_) out.emplace_back(*current_);
    } else if (std::holds_alternative<ShutdownMsg>(m)) {
      s.closing = true;
    }
    record(id, to_string(message_type(m)), out);
    return out;
  }

  /// Sets the current policy; returns the sessions that must receive it.
  std::vector<SessionId> publish(const PolicySnapshot& snap) {
    current_ = policy_message(snap);
    std::vector<SessionId> targets;
    for (const auto& [id, s] : sessions_)
      if (s.hello) targets.push_back(id);
    for (SessionId id : targets) record(id, "publish", {*current_});
    return targets;
  }

  const std::optional<PolicyMsg>& current() const noexcept { return current_; }
  std::size_t live_sessions() const noexcept { return sessions_.size(); }
  std::size_t trajectories_received() const noexcept { return received_; }
  bool closing(SessionId id) const {
    auto it = sessions_.find(id);
    return it != sessions_.end() && it->second.closing;
  }
  std::optional<std::string> worker_of(SessionId id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end() || !it->second.hello) return std::nullopt;
    return it->second.worker_id;
  }

  const std::vector<TraceEvent>& trace() const noexcept { return trace_; }
  void enable_trace(bool on) noexcept { tracing_ = on; }

 private:
  struct Session {
    bool hello = false;
    bool closing = false;
    std::string worker_id;
  };

  void record(SessionId id, std::string in, const std::vector<Message>& out) {
    if (!tracing_) return;
    TraceEvent e{id, std::move(in), {}};
    for (const auto& m : out) e.out.emplace_back(to_string(message_type(m)));
    trace_.push_back(std::move(e));
  }

  TrajectorySink sink_;
  std::map<SessionId, Session> sessions_;
  SessionId next_id_ = 1;
  std::optional<PolicyMsg> current_;
  std::size_t received_ = 0;
  bool tracing_ = false;
  std::vector<TraceEvent> trace_;
};

// ---- worker session state machine (no I/O) ----

class WorkerCore {
 public:
  enum class State { disconnected, awaiting_ack, ready, stopped };

  explicit WorkerCore(std::string worker_id) : worker_id_(std::move(worker_id)) {}

  Message on_connect() {
    state_ = State::awaiting_ack;
    return HelloMsg{worker_id_, kProtoVersion};
  }

  void on_disconnect() {
    if (state_ != State::stopped) state_ = State::disconnected;
  }

  /// Replies to send. A POLICY newer than the held one becomes pending_policy().
  std::vector<Message> on_message(const Message& m) {
    std::vector<Message> out;
    if (const auto* a = std::get_if<AckMsg>(&m)) {
      if (state_ == State::awaiting_ack && a->of_type == static_cast<int>(MsgType::hello)) state_ = State::ready;
    } else if (const auto* p = std::get_if<PolicyMsg>(&m)) {
      if (p->version > have_version_) {
        try {
          pending_ = snapshot_from_message(*p);
          have_version_ = p->version;
        } catch (const IntegrityError&) {
          out.emplace_back(PolicyRequestMsg{have_version_});
          ++integrity_failures_;
        }
      }
    } else if (std::holds_alternative<ShutdownMsg>(m)) {
      state_ = State::stopped;
    }
    return out;
  }

  /// Reaction to a POLICY frame discarded by the decoder.
  Message on_integrity_error() {
    ++integrity_failures_;
    return PolicyRequestMsg{have_version_};
  }

  std::optional<PolicySnapshot> take_pending_policy() {
    auto p = std::move(pending_);
    pending_.reset();
    return p;
  }

  State state() const noexcept { return state_; }
  std::int64_t have_version() const noexcept { return have_version_; }
  const std::string& worker_id() const noexcept { return worker_id_; }
  std::size_t integrity_failures() const noexcept { return integrity_failures_; }

 private:
  std::string worker_id_;
  State state_ = State::disconnected;
  std::int64_t have_version_ = -1;
  std::optional<PolicySnapshot> pending_;
  std::size_t integrity_failures_ = 0;
};

/// Exponential reconnect delay: base * 2^attempt, capped.
inline std::chrono::milliseconds backoff_delay(int attempt, std::chrono::milliseconds base = std::chrono::milliseconds(100),
                                               std::chrono::milliseconds cap = std::chrono::milliseconds(5000)) {
  if (attempt < 0) attempt = 0;
  const auto shift = std::min(attempt, 20);
  const auto d = base * (std::int64_t{1} << shift);
  return std::min(d, cap);
}

// ---- threaded host server ----

/// Runs HostCore over live connections: one reader and one writer thread per
/// session, each with its own outbox, so a slow peer stalls only itself.
class HostServer {
 public:
  explicit HostServer(HostCore::TrajectorySink sink) : core_(std::move(sink)) {}
  ~HostServer() { stop(); }
  HostServer(const HostServer&) = delete;
  HostServer& operator=(const HostServer&) = delete;

  /// Accept TCP connections in a background thread.
  void listen(const Address& a) {
    listener_ = std::make_unique<TcpListener>(a);
    accept_thread_ = std::thread([this] {
      while (!stopping_) {
        if (auto c = listener_->accept(100)) attach(c);
      }
    });
  }

  std::uint16_t port() const { return listener_ ? listener_->port() : 0; }

  void attach(std::shared_ptr<Connection> conn) {
    auto s = std::make_shared<Session>(std::move(conn));
    {
      std::lock_guard lk(core_mu_);
      s->id = core_.open_session();
    }
    {
      std::lock_guard lk(sessions_mu_);
      sessions_[s->id] = s;
    }
    s->writer = std::thread([this, s] { write_loop(*s); });
    s->reader = std::thread([this, s] { read_loop(*s); });
  }

  /// Non-blocking: queues POLICY on every handshaken session.
  void publish(const PolicySnapshot& snap) {
    std::vector<SessionId> targets;
    Message m;
    {
      std::lock_guard lk(core_mu_);
      targets = core_.publish(snap);
      m = *core_.current();
    }
    std::lock_guard lk(sessions_mu_);
    for (SessionId id : targets)
      if (auto it = sessions_.find(id); it != sessions_.end()) it->second->post(m);
  }

  /// Sends SHUTDOWN to every session and waits briefly for the writers to flush.
  void shutdown_workers(std::chrono::milliseconds grace = std::chrono::milliseconds(500)) {
    std::vector<std::shared_ptr<Session>> all;
    {
      std::lock_guard lk(sessions_mu_);
      for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) s->post(ShutdownMsg{});
    const auto deadline = std::chrono::steady_clock::now() + grace;
    for (auto& s : all) {
      std::unique_lock lk(s->mu);
      s->cv.wait_until(lk, deadline, [&] { return s->outbox.empty() || s->dead; });
    }
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    if (accept_thread_.joinable()) accept_thread_.join();
    std::map<SessionId, std::shared_ptr<Session>> all;
    {
      std::lock_guard lk(sessions_mu_);
      all = sessions_;
    }
    for (auto& [id, s] : all) s->kill();
    for (auto& [id, s] : all) {
      if (s->reader.joinable()) s->reader.join();
      if (s->writer.joinable()) s->writer.join();
    }
  }

  std::size_t live_sessions() const {
    std::lock_guard lk(core_mu_);
    return core_.live_sessions();
  }
  std::size_t protocol_errors() const noexcept { return protocol_errors_; }
  std::size_t trajectories_received() const {
    std::lock_guard lk(core_mu_);
    return core_.trajectories_received();
  }

 private:
  struct Session {
    explicit Session(std::shared_ptr<Connection> c) : channel(std::move(c)) {}
    SessionId id = 0;
    FramedChannel channel;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Message> outbox;
    bool dead = false;
    std::thread reader, writer;

    void post(Message m) {
      std::lock_guard lk(mu);
      if (dead) return;
      outbox.push_back(std::move(m));
      cv.notify_all();
    }
    void kill() {
      {
        std::lock_guard lk(mu);
        dead = true;
        cv.notify_all();
      }
      channel.close();
    }
  };

  void read_loop(Session& s) {
    try {
      while (!stopping_) {
        auto r = s.channel.receive(100);
        if (r.status == RecvStatus::closed) break;
        if (r.status == RecvStatus::timeout || !r.message) continue;
        std::vector<Message> replies;
        bool closing = false;
        {
          std::lock_guard lk(core_mu_);
          replies = core_.on_message(s.id, *r.message);
          closing = core_.closing(s.id);
        }
        for (auto& m : replies) s.post(std::move(m));
        if (closing) break;
      }
    } catch (const ProtocolError&) {
      ++protocol_errors_;
    }
    {
      std::lock_guard lk(core_mu_);
      core_.close_session(s.id);
    }
    s.kill();
  }

  void write_loop(Session& s) {
    for (;;) {
      Message m;
      {
        std::unique_lock lk(s.mu);
        s.cv.wait(lk, [&] { return !s.outbox.empty() || s.dead; });
        if (s.outbox.empty()) return;
        m = std::move(s.outbox.front());
      }
      const bool ok = s.channel.send(m);
      {
        std::lock_guard lk(s.mu);
        if (!s.outbox.empty()) s.outbox.pop_front();
        s.cv.notify_all();
        if (!ok) {
          s.dead = true;
          return;
        }
      }
    }
  }

  mutable std::mutex core_mu_;
  HostCore core_;
  mutable std::mutex sessions_mu_;
  std::map<SessionId, std::shared_ptr<Session>> sessions_;
  std::unique_ptr<TcpListener> listener_;
  std::thread accept_thread_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> protocol_errors_{0};
};

}  // namespace distrl
