#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <set>

#include <unistd.h>

#include "zta/observe.hpp"

using namespace zta;
using namespace zta::observe;
using namespace std::chrono_literals;

namespace {

std::string temp_path(const std::string& stem) {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("zta-obs-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" + stem);
  std::filesystem::remove(p);
  return p.string();
}

AccessLogRecord record(LogOutcome o, const std::string& reason = "x") {
  AccessLogRecord r;
  r.timestamp = from_epoch_seconds(1'790'000'000);
  r.source_ip = "127.0.0.1";
  r.host = "app1.corp.test";
  r.path = "/";
  r.outcome = o;
  r.reason = reason;
  return r;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

struct ScriptedSink : LogSink {
  std::mutex mu;
  std::function<ShipStatus(const std::vector<AccessLogRecord>&)> decide;
  std::vector<AccessLogRecord> received;
  int calls = 0;
  ShipStatus ship(const std::vector<AccessLogRecord>& batch) override {
    std::lock_guard lk(mu);
    calls++;
    auto s = decide ? decide(batch) : ShipStatus::acknowledged;
    if (s == ShipStatus::acknowledged) received.insert(received.end(), batch.begin(), batch.end());
    return s;
  }
};

PipelineOptions fast_options() {
  PipelineOptions o;
  o.local_path = temp_path("access.jsonl");
  o.dead_letter_path = temp_path("dead.jsonl");
  o.batch_interval = 10ms;
  o.backoff_initial = 5ms;
  o.backoff_cap = 20ms;
  return o;
}

}  // namespace

TEST_CASE("JSON line round trip over 1000 random records") {
  std::mt19937_64 rng(11);
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  for (int i = 0; i < 1000; i++) {
    AccessLogRecord r;
    r.timestamp = TimePoint(std::chrono::microseconds(1'700'000'000'000'000LL + static_cast<std::int64_t>(rng() % 1'000'000'000'000ULL)));
    r.gateway_id = "gw-" + std::to_string(pick(5));
    r.sequence = rng() >> 12;
    if (pick(2)) r.fingerprint = sha256_hex(std::to_string(i));
    if (pick(2)) r.user_id = "user\"" + std::to_string(i) + "\\\n";
    r.source_ip = "10.0.0." + std::to_string(pick(255));
    r.host = "app" + std::to_string(pick(9)) + ".corp.test";
    r.path = "/p?q=" + std::to_string(rng());
    r.outcome = static_cast<LogOutcome>(pick(3));
    r.reason = "r" + std::to_string(pick(20));
    if (pick(2)) r.policy_version = pick(1000);
    r.latency_us = pick(1'000'000);
    r.status = 200 + pick(400);
    auto line = to_json_line(r);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(parse_json_line(line) == r);
  }
  CHECK_THROWS(parse_json_line("{not json"));
}

TEST_CASE("queue evicts the oldest ALLOW first and never drops DENY or ERROR") {
  BoundedLogQueue q(3);
  q.push(record(LogOutcome::allow, "a1"));
  q.push(record(LogOutcome::deny, "d1"));
  q.push(record(LogOutcome::allow, "a2"));
  q.push(record(LogOutcome::error, "e1"));
  CHECK(q.evicted_allows() == 1);
  auto batch = q.pop_batch(10, 0ms);
  REQUIRE(batch.size() == 3);
  CHECK(batch[0].reason == "d1");
  CHECK(batch[1].reason == "a2");
  CHECK(batch[2].reason == "e1");

  BoundedLogQueue full(2);
  full.push(record(LogOutcome::deny, "d1"));
  full.push(record(LogOutcome::deny, "d2"));
  full.push(record(LogOutcome::allow, "a"));
  CHECK(full.evicted_allows() == 1);
  CHECK(full.size() == 2);

  // A DENY arriving at a queue full of DENY waits for room.
  std::thread consumer([&] {
    std::this_thread::sleep_for(50ms);
    full.pop_batch(1, 0ms);
  });
  full.push(record(LogOutcome::deny, "d3"));
  consumer.join();
  auto rest = full.pop_batch(10, 0ms);
  REQUIRE(rest.size() == 2);
  CHECK(rest[0].reason == "d2");
  CHECK(rest[1].reason == "d3");
}

TEST_CASE("pipeline writes every record locally before shipping") {
  auto sink = std::make_shared<ScriptedSink>();
  auto opts = fast_options();
  auto clock = std::make_shared<SystemClock>();
  {
    LogPipeline p(opts, sink, clock);
    p.start();
    for (int i = 0; i < 250; i++) p.emit(record(i % 3 == 0 ? LogOutcome::deny : LogOutcome::allow));
    CHECK(p.flush(10s));
    CHECK(p.emitted() == 250);
    CHECK(p.shipped() == 250);
    p.stop();
  }
  auto lines = read_lines(opts.local_path);
  REQUIRE(lines.size() == 250);
  for (std::size_t i = 0; i < lines.size(); i++) {
    auto r = parse_json_line(lines[i]);
    CHECK(r.sequence == i + 1);
    CHECK(r.gateway_id == "gw-1");
  }
  CHECK(sink->received.size() == 250);
  CHECK(parse_json_line(lines[1]).reason == "ok");
}

TEST_CASE("flaky sink: retries deliver everything exactly once per ack") {
  auto sink = std::make_shared<ScriptedSink>();
  std::mt19937 rng(3);
  sink->decide = [&](const auto&) { return rng() % 3 == 0 ? ShipStatus::retry : ShipStatus::acknowledged; };
  auto opts = fast_options();
  LogPipeline p(opts, sink, std::make_shared<SystemClock>());
  p.start();
  for (int i = 0; i < 300; i++) p.emit(record(LogOutcome::deny));
  CHECK(p.flush(20s));
  p.stop();
  std::set<std::uint64_t> seqs;
  for (const auto& r : sink->received) seqs.insert(r.sequence);
  CHECK(seqs.size() == 300);
  CHECK(sink->received.size() == 300);
}

TEST_CASE("too_large splits the batch and a lone poison record is quarantined") {
  auto sink = std::make_shared<ScriptedSink>();
  sink->decide = [](const std::vector<AccessLogRecord>& b) {
    for (const auto& r : b) {
      if (r.reason == "poison") return ShipStatus::too_large;
    }
    return b.size() > 8 ? ShipStatus::too_large : ShipStatus::acknowledged;
  };
  auto opts = fast_options();
  opts.batch_interval = 200ms;
  LogPipeline p(opts, sink, std::make_shared<SystemClock>());
  for (int i = 0; i < 40; i++) p.emit(record(LogOutcome::deny, i == 17 ? "poison" : "fine"));
  p.start();
  CHECK(p.flush(10s));
  p.stop();
  CHECK(p.shipped() == 39);
  CHECK(p.dead_lettered() == 1);
  CHECK(p.largest_batch() == 40);
  auto dead = read_lines(opts.dead_letter_path);
  REQUIRE(dead.size() == 1);
  CHECK(parse_json_line(dead[0]).reason == "poison");
}

TEST_CASE("rejected batches go to the dead-letter file") {
  auto sink = std::make_shared<ScriptedSink>();
  sink->decide = [](const auto&) { return ShipStatus::rejected; };
  auto opts = fast_options();
  LogPipeline p(opts, sink, std::make_shared<SystemClock>());
  p.start();
  for (int i = 0; i < 5; i++) p.emit(record(LogOutcome::error));
  CHECK(p.flush(5s));
  p.stop();
  CHECK(p.dead_lettered() == 5);
  CHECK(read_lines(opts.dead_letter_path).size() == 5);
}

TEST_CASE("sequence numbers resume from the existing local file") {
  auto opts = fast_options();
  {
    LogPipeline p(opts, nullptr, std::make_shared<SystemClock>());
    for (int i = 0; i < 7; i++) p.emit(record(LogOutcome::allow));
  }
  LogPipeline again(opts, nullptr, std::make_shared<SystemClock>());
  CHECK(again.emit(record(LogOutcome::deny)).sequence == 8);
}
