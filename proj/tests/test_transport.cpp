#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#include "distrl/transport.hpp"
#include "test_oracles.hpp"

using namespace distrl;

using oracle::bytes_of;
using oracle::random_message;
using oracle::tiny_snapshot;

TEST(FrameGolden, Heartbeat) {
  const Bytes expect = bytes_of({0x44, 0x52, 0x4C, 0x31, 0x07, 0x00, 0x00, 0x00, 0x0B}, R"({"ts_ms":0})");
  EXPECT_EQ(encode_frame(HeartbeatMsg{0}), expect);
  const auto r = decode_frame(expect);
  ASSERT_EQ(r.status, DecodeStatus::decoded);
  EXPECT_EQ(r.consumed, expect.size());
  EXPECT_EQ(std::get<HeartbeatMsg>(*r.message).ts_ms, 0);
}

TEST(FrameGolden, ShutdownAndAckAndHello) {
  EXPECT_EQ(encode_frame(ShutdownMsg{}), bytes_of({0x44, 0x52, 0x4C, 0x31, 0x06, 0, 0, 0, 0x02}, "{}"));
  EXPECT_EQ(encode_frame(AckMsg{1}), bytes_of({0x44, 0x52, 0x4C, 0x31, 0x05, 0, 0, 0, 0x0D}, R"({"of_type":1})"));
  EXPECT_EQ(encode_frame(HelloMsg{"w1", 1}),
            bytes_of({0x44, 0x52, 0x4C, 0x31, 0x01, 0, 0, 0, 0x24}, R"({"proto_version":1,"worker_id":"w1"})"));
  EXPECT_EQ(encode_frame(PolicyRequestMsg{5}),
            bytes_of({0x44, 0x52, 0x4C, 0x31, 0x04, 0, 0, 0, 0x12}, R"({"have_version":5})"));
}

TEST(FrameGolden, PolicyFloatBlock) {
  // [1.0f, -2.0f] little-endian is 00 00 80 3F 00 00 00 C0; crc32 from zlib.
  const std::string payload =
      R"({"crc32":3280414294,"params_f32_b64":"AACAPwAAAMA=","shape_tag":"d=1,m=1,h=32,kind=policy","version":3})";
  const Bytes expect = bytes_of({0x44, 0x52, 0x4C, 0x31, 0x02, 0, 0, 0, 0x67}, payload);
  EXPECT_EQ(encode_frame(policy_message(tiny_snapshot(3))), expect);
  const auto r = decode_frame(expect);
  ASSERT_EQ(r.status, DecodeStatus::decoded);
  const auto snap = snapshot_from_message(std::get<PolicyMsg>(*r.message));
  EXPECT_EQ(snap.version, 3);
  EXPECT_EQ(snap.params, (std::vector<double>{1.0, -2.0}));
}

TEST(FrameGolden, LengthIsBigEndian) {
  HeartbeatMsg m{1234567890123};
  const auto b = encode_frame(m);
  const std::size_t payload = b.size() - kHeaderSize;
  EXPECT_EQ(b[5], (payload >> 24) & 0xFF);
  EXPECT_EQ(b[6], (payload >> 16) & 0xFF);
  EXPECT_EQ(b[7], (payload >> 8) & 0xFF);
  EXPECT_EQ(b[8], payload & 0xFF);
}

TEST(FrameCodec, RoundTripRandomMessages) {
  Rng rng(42);
  for (int i = 0; i < 300; ++i) {
    const Message m = random_message(rng);
    const auto b = encode_frame(m);
    const auto r = decode_frame(b);
    ASSERT_EQ(r.status, DecodeStatus::decoded) << r.error;
    EXPECT_EQ(r.consumed, b.size());
    EXPECT_EQ(*r.message, m) << to_string(message_type(m));
  }
}

TEST(FrameCodec, TruncatedFrameNeedsMoreThenCompletes) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const Message m = random_message(rng);
    const auto b = encode_frame(m);
    for (std::size_t cut = 0; cut < b.size(); ++cut) {
      const auto r = decode_frame(std::span<const std::uint8_t>(b).first(cut));
      ASSERT_EQ(r.status, DecodeStatus::need_more) << "cut " << cut;
    }
    FrameDecoder dec;
    const std::size_t split = rng.below(b.size());
    dec.feed(std::span<const std::uint8_t>(b).first(split));
    EXPECT_EQ(dec.next().status, DecodeStatus::need_more);
    dec.feed(std::span<const std::uint8_t>(b).subspan(split));
    const auto r = dec.next();
    ASSERT_EQ(r.status, DecodeStatus::decoded);
    EXPECT_EQ(*r.message, m);
    EXPECT_EQ(dec.buffered(), 0u);
  }
}

TEST(FrameCodec, ByteAtATimeStream) {
  Rng rng(11);
  std::vector<Message> sent;
  Bytes stream;
  for (int i = 0; i < 40; ++i) {
    sent.push_back(random_message(rng));
    const auto b = encode_frame(sent.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  FrameDecoder dec;
  std::vector<Message> got;
  for (std::uint8_t byte : stream) {
    dec.feed(std::span<const std::uint8_t>(&byte, 1));
    for (auto r = dec.next(); r.status == DecodeStatus::decoded; r = dec.next()) got.push_back(*r.message);
  }
  EXPECT_EQ(got, sent);
}

TEST(FrameCodec, BadMagicIsProtocolError) {
  auto b = encode_frame(HeartbeatMsg{0});
  b[0] = 'X';
  EXPECT_EQ(decode_frame(b).status, DecodeStatus::protocol_error);
  const Bytes partial{'D', 'R', 'X'};
  EXPECT_EQ(decode_frame(partial).status, DecodeStatus::protocol_error);
}

TEST(FrameCodec, UnknownTypeAndOversizeAreProtocolErrors) {
  auto b = encode_frame(HeartbeatMsg{0});
  b[4] = 0x09;
  EXPECT_EQ(decode_frame(b).status, DecodeStatus::protocol_error);
  auto c = encode_frame(HeartbeatMsg{0});
  c[5] = 0xFF;
  EXPECT_EQ(decode_frame(c).status, DecodeStatus::protocol_error);
}

TEST(FrameCodec, MalformedPayloadIsProtocolError) {
  EXPECT_EQ(decode_frame(bytes_of({0x44, 0x52, 0x4C, 0x31, 0x07, 0, 0, 0, 3}, "[1]")).status,
            DecodeStatus::protocol_error);
  EXPECT_EQ(decode_frame(bytes_of({0x44, 0x52, 0x4C, 0x31, 0x01, 0, 0, 0, 2}, "{}")).status,
            DecodeStatus::protocol_error);
}

TEST(FrameCodec, CrcMismatchIsIntegrityErrorAndFrameIsSkipped) {
  auto pm = policy_message(tiny_snapshot(4));
  pm.crc32 ^= 1;
  const auto bad = encode_frame(pm);
  const auto good = encode_frame(HeartbeatMsg{9});
  FrameDecoder dec;
  dec.feed(bad);
  dec.feed(good);
  const auto r1 = dec.next();
  EXPECT_EQ(r1.status, DecodeStatus::integrity_error);
  EXPECT_EQ(r1.consumed, bad.size());
  const auto r2 = dec.next();
  ASSERT_EQ(r2.status, DecodeStatus::decoded);
  EXPECT_EQ(std::get<HeartbeatMsg>(*r2.message).ts_ms, 9);
}

TEST(FrameCodec, ShapeLengthMismatchIsRejected) {
  auto s = tiny_snapshot(1);
  s.shape_tag = "d=2,m=1,h=32,kind=policy";
  EXPECT_EQ(decode_frame(encode_frame(policy_message(s))).status, DecodeStatus::protocol_error);
}

TEST(FrameFuzz, RandomBytesNeverCrash) {
  Rng rng(2024);
  for (int i = 0; i < 20000; ++i) {
    Bytes b(rng.below(64));
    for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
    if (rng.uniform() < 0.5 && b.size() >= 4) std::copy(kMagic.begin(), kMagic.end(), b.begin());
    DecodeResult r;
    ASSERT_NO_THROW(r = decode_frame(b));
    EXPECT_LE(r.consumed, b.size());
    if (r.status == DecodeStatus::decoded) {
      EXPECT_GE(r.consumed, kHeaderSize);
    }
  }
}

TEST(FrameFuzz, MutatedFramesNeverCrash) {
  Rng rng(99);
  for (int i = 0; i < 3000; ++i) {
    auto b = encode_frame(random_message(rng));
    const int flips = 1 + static_cast<int>(rng.below(4));
    for (int k = 0; k < flips; ++k) b[rng.below(b.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    if (rng.uniform() < 0.3) b.resize(rng.below(b.size() + 1));
    FrameDecoder dec;
    dec.feed(b);
    for (int guard = 0; guard < 4; ++guard) {
      DecodeResult r;
      ASSERT_NO_THROW(r = dec.next());
      if (r.status == DecodeStatus::need_more || r.status == DecodeStatus::protocol_error) break;
    }
  }
}

TEST(Base64, RejectsGarbage) {
  EXPECT_THROW(base64_decode("abc"), DecodeError);
  EXPECT_THROW(base64_decode("ab!d"), DecodeError);
  const std::vector<std::byte> raw{std::byte{0}, std::byte{255}, std::byte{17}};
  EXPECT_EQ(base64_decode(base64_encode(raw)), raw);
}

TEST(PolicyPayload, F32RoundTripWithinTolerance) {
  Rng rng(5);
  const auto p = testutil::random_policy(rng, 6, 5, 3.0);
  const auto snap = make_snapshot(2, p);
  const auto back = snapshot_from_message(policy_message(snap));
  ASSERT_EQ(back.params.size(), p.theta.size());
  for (std::size_t i = 0; i < p.theta.size(); ++i)
    EXPECT_LE(std::abs(back.params[i] - p.theta[i]), 1e-6 * std::max(1.0, std::abs(p.theta[i])));
}

TEST(Address, ParsesAndHonorsEnvironment) {
  const auto a = parse_address("10.0.0.2:9000");
  EXPECT_EQ(a.host, "10.0.0.2");
  EXPECT_EQ(a.port, 9000);
  ::setenv("DISTRL_ADDR", "example.org:1234", 1);
  const auto b = parse_address("");
  EXPECT_EQ(b.host, "example.org");
  EXPECT_EQ(b.port, 1234);
  ::unsetenv("DISTRL_ADDR");
  EXPECT_EQ(parse_address("").port, kDefaultPort);
  EXPECT_THROW(parse_address("host:notaport"), std::invalid_argument);
}

TEST(Backoff, DoublesFromBaseAndCaps) {
  using std::chrono::milliseconds;
  EXPECT_EQ(backoff_delay(0), milliseconds(100));
  EXPECT_EQ(backoff_delay(1), milliseconds(200));
  EXPECT_EQ(backoff_delay(5), milliseconds(3200));
  EXPECT_EQ(backoff_delay(6), milliseconds(5000));
  EXPECT_EQ(backoff_delay(60), milliseconds(5000));
}

TEST(HostCoreProtocol, HandshakeAckThenCurrentPolicy) {
  HostCore host(nullptr);
  host.publish(tiny_snapshot(5));
  const auto s = host.open_session();
  const auto out = host.on_message(s, HelloMsg{"w1", 1});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(std::get<AckMsg>(out[0]).of_type, 0x01);
  EXPECT_EQ(std::get<PolicyMsg>(out[1]).version, 5);
}

TEST(HostCoreProtocol, PublishPushesWithoutRequest) {
  HostCore host(nullptr);
  host.publish(tiny_snapshot(5));
  const auto s = host.open_session();
  WorkerCore worker("w1");
  for (const auto& m : host.on_message(s, worker.on_connect())) worker.on_message(m);
  ASSERT_EQ(worker.have_version(), 5);
  ASSERT_TRUE(worker.take_pending_policy().has_value());
  const auto targets = host.publish(tiny_snapshot(7));
  ASSERT_EQ(targets, std::vector<SessionId>{s});
  worker.on_message(*host.current());
  EXPECT_EQ(worker.have_version(), 7);
  EXPECT_EQ(worker.take_pending_policy()->version, 7);
}

TEST(HostCoreProtocol, DuplicateWorkerIdRejected) {
  HostCore host(nullptr);
  const auto a = host.open_session(), b = host.open_session();
  host.on_message(a, HelloMsg{"same", 1});
  EXPECT_THROW(host.on_message(b, HelloMsg{"same", 1}), ProtocolError);
  host.close_session(a);
  EXPECT_NO_THROW(host.on_message(b, HelloMsg{"same", 1}));
}

TEST(HostCoreProtocol, MessagesBeforeHelloRejected) {
  HostCore host(nullptr);
  const auto s = host.open_session();
  EXPECT_THROW(host.on_message(s, TrajBatchMsg{}), ProtocolError);
  EXPECT_THROW(host.on_message(s, HelloMsg{"w", 2}), ProtocolError);
}

TEST(HostCoreProtocol, TrajectoriesReachSinkWithWorkerId) {
  std::vector<std::pair<std::uint64_t, std::string>> got;
  HostCore host([&](Trajectory&& t, const std::string& w) { got.emplace_back(t.id, w); });
  const auto s = host.open_session();
  host.on_message(s, HelloMsg{"w9", 1});
  Rng rng(1);
  TrajBatchMsg b;
  b.trajectories = {testutil::random_trajectory(rng, 3, 4, 2, 11), testutil::random_trajectory(rng, 3, 4, 2, 12)};
  EXPECT_TRUE(host.on_message(s, b).empty());
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0], (std::pair<std::uint64_t, std::string>{11, "w9"}));
  EXPECT_EQ(host.trajectories_received(), 2u);
}

TEST(WorkerCoreProtocol, CrcFailureRequestsPolicyAgain) {
  WorkerCore w("w1");
  w.on_connect();
  w.on_message(AckMsg{1});
  EXPECT_EQ(w.state(), WorkerCore::State::ready);
  auto pm = policy_message(tiny_snapshot(3));
  pm.crc32 ^= 0xFF;
  const auto out = w.on_message(pm);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(std::get<PolicyRequestMsg>(out[0]).have_version, -1);
  EXPECT_FALSE(w.take_pending_policy().has_value());
  EXPECT_EQ(std::get<PolicyRequestMsg>(w.on_integrity_error()).have_version, -1);
  EXPECT_EQ(w.integrity_failures(), 2u);
}

TEST(WorkerCoreProtocol, IgnoresStalePolicy) {
  WorkerCore w("w1");
  w.on_message(policy_message(tiny_snapshot(5)));
  w.take_pending_policy();
  w.on_message(policy_message(tiny_snapshot(4)));
  EXPECT_FALSE(w.take_pending_policy().has_value());
  EXPECT_EQ(w.have_version(), 5);
}

namespace {

struct ScriptLog {
  std::vector<TraceEvent> host_trace;
  std::vector<std::string> worker_received;
  bool operator==(const ScriptLog&) const = default;
};

/// Drives one scripted session over a pair of connections, host and worker on
/// this thread, and records what each side observed.
ScriptLog run_script(std::shared_ptr<Connection> host_side, std::shared_ptr<Connection> worker_side) {
  HostCore host(nullptr);
  host.enable_trace(true);
  host.publish(tiny_snapshot(1));
  FramedChannel hc(std::move(host_side)), wc(std::move(worker_side));
  const auto sid = host.open_session();
  WorkerCore worker("scripted");
  ScriptLog log;

  auto host_pump = [&] {
    auto r = hc.receive(2000);
    if (!r.message) throw std::runtime_error("host: no message");
    for (const auto& m : host.on_message(sid, *r.message)) hc.send(m);
  };
  auto worker_read = [&](int n) {
    for (int i = 0; i < n; ++i) {
      auto r = wc.receive(2000);
      if (!r.message) throw std::runtime_error("worker: no message");
      log.worker_received.emplace_back(to_string(message_type(*r.message)));
      for (const auto& m : worker.on_message(*r.message)) wc.send(m);
    }
  };

  wc.send(worker.on_connect());
  host_pump();
  worker_read(2);
  Rng rng(3);
  wc.send(TrajBatchMsg{{testutil::random_trajectory(rng, 3, 4, 3, 1)}});
  host_pump();
  for (SessionId s : host.publish(tiny_snapshot(7)))
    if (s == sid) hc.send(*host.current());
  worker_read(1);
  wc.send(PolicyRequestMsg{worker.have_version()});
  host_pump();
  worker_read(1);
  wc.send(HeartbeatMsg{0});
  host_pump();
  hc.send(ShutdownMsg{});
  worker_read(1);
  log.host_trace = host.trace();
  return log;
}

}  // namespace

TEST(Bindings, LoopbackAndTcpProduceIdenticalTraces) {
  auto [a, b] = make_loopback_pair();
  const ScriptLog loop = run_script(a, b);

  TcpListener listener(Address{"127.0.0.1", 0});
  std::shared_ptr<Connection> client;
  std::thread t([&] { client = tcp_connect(Address{"127.0.0.1", listener.port()}); });
  auto server = listener.accept(5000);
  t.join();
  ASSERT_TRUE(server && client);
  const ScriptLog tcp = run_script(server, client);

  EXPECT_EQ(loop, tcp);
  const std::vector<std::string> expect_worker{"ACK", "POLICY", "POLICY", "POLICY", "SHUTDOWN"};
  EXPECT_EQ(loop.worker_received, expect_worker);
  ASSERT_FALSE(loop.host_trace.empty());
  EXPECT_EQ(loop.host_trace[0].in, "HELLO");
  EXPECT_EQ(loop.host_trace[0].out, (std::vector<std::string>{"ACK", "POLICY"}));
}

TEST(HostServerLive, SlowSessionDoesNotBlockOthers) {
  std::atomic<int> received{0};
  HostServer server([&](Trajectory&&, const std::string&) { ++received; });
  auto [slow_host, slow_worker] = make_loopback_pair();
  auto [fast_host, fast_worker] = make_loopback_pair();
  slow_host->set_send_delay_ms(1000);
  server.attach(slow_host);
  server.attach(fast_host);
  FramedChannel slow(slow_worker), fast(fast_worker);
  slow.send(HelloMsg{"slow", 1});
  fast.send(HelloMsg{"fast", 1});
  const auto t0 = std::chrono::steady_clock::now();
  auto ack = fast.receive(2000);
  ASSERT_TRUE(ack.message);
  server.publish(tiny_snapshot(2));
  auto pol = fast.receive(2000);
  ASSERT_TRUE(pol.message);
  EXPECT_EQ(std::get<PolicyMsg>(*pol.message).version, 2);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(800));
  Rng rng(1);
  fast.send(TrajBatchMsg{{testutil::random_trajectory(rng, 3, 4, 2, 5)}});
  for (int i = 0; i < 100 && received.load() == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  EXPECT_EQ(received.load(), 1);
  server.stop();
}

TEST(HostServerLive, DuplicateWorkerIdSessionIsDropped) {
  HostServer server(nullptr);
  auto [h1, w1] = make_loopback_pair();
  auto [h2, w2] = make_loopback_pair();
  server.attach(h1);
  server.attach(h2);
  FramedChannel c1(w1), c2(w2);
  c1.send(HelloMsg{"dup", 1});
  ASSERT_TRUE(c1.receive(2000).message);
  c2.send(HelloMsg{"dup", 1});
  const auto r = c2.receive(2000);
  EXPECT_EQ(r.status, RecvStatus::closed);
  EXPECT_EQ(server.protocol_errors(), 1u);
  server.stop();
}

TEST(HostServerLive, TcpHandshake) {
  HostServer server(nullptr);
  server.listen(Address{"127.0.0.1", 0});
  server.publish(tiny_snapshot(4));
  FramedChannel ch(tcp_connect(Address{"127.0.0.1", server.port()}));
  ch.send(HelloMsg{"tcp-worker", 1});
  auto a = ch.receive(2000);
  auto p = ch.receive(2000);
  ASSERT_TRUE(a.message && p.message);
  EXPECT_TRUE(std::holds_alternative<AckMsg>(*a.message));
  EXPECT_EQ(std::get<PolicyMsg>(*p.message).version, 4);
  server.stop();
}
