#include <doctest.h>

#include <filesystem>
#include <random>

#include <httplib.h>
#include <json.hpp>
#include <unistd.h>

#include "oracles/log_filter_ref.hpp"
#include "zta/control_plane.hpp"

using namespace zta;
using namespace zta::cp;
using json = nlohmann::json;
using namespace std::chrono_literals;

namespace {

std::string temp_path(const std::string& stem) {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("zta-cp-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" + stem);
  std::filesystem::remove(p);
  return p.string();
}

std::shared_ptr<ManualClock> clock_at_epoch() {
  return std::make_shared<ManualClock>(from_epoch_seconds(1'790'000'000));
}

policy::RoutePolicy route(const std::string& host) {
  policy::RoutePolicy r;
  r.host = host;
  r.upstream = "127.0.0.1:8080";
  r.required_groups = {"eng"};
  return r;
}

observe::AccessLogRecord log_record(const std::string& gw, std::uint64_t seq, std::int64_t ts_us) {
  observe::AccessLogRecord r;
  r.timestamp = TimePoint(std::chrono::microseconds(ts_us));
  r.gateway_id = gw;
  r.sequence = seq;
  r.source_ip = "127.0.0.1";
  r.host = "app1.corp.test";
  r.path = "/";
  r.outcome = observe::LogOutcome::allow;
  r.reason = "ok";
  return r;
}

const std::string kFp = std::string(64, 'a');

}  // namespace

TEST_CASE("every change bumps the version by exactly one, including no-ops") {
  PolicyStore store(std::nullopt, clock_at_epoch());
  REQUIRE(store.current()->version == 1);
  CHECK(store.history().size() == 1);
  CHECK(store.set_kill_switch(true, "ops") == 2);
  CHECK(store.set_kill_switch(true, "ops") == 3);
  CHECK(store.upsert_route(route("a.corp.test"), "ops") == 4);
  CHECK(store.add_revocation(kFp, "lost", "ops") == 5);
  CHECK(store.add_revocation(kFp, "lost", "ops") == 6);
  CHECK(store.update_settings(500.0, std::nullopt, "ops") == 7);
  auto snap = store.current();
  CHECK(snap->kill_switch);
  CHECK(snap->revoked_fingerprints.count(kFp) == 1);
  CHECK(snap->geo_velocity_limit_kmh == 500.0);
  CHECK(snap->max_staleness_s == 300);
  auto hist = store.history();
  REQUIRE(hist.size() == 7);
  for (std::size_t i = 0; i < hist.size(); i++) {
    CHECK(hist[i].version == static_cast<std::int64_t>(i + 1));
    if (i > 0) CHECK(hist[i].actor == "ops");
  }
  CHECK(store.revocations().size() == 1);
}

TEST_CASE("invalid routes and fingerprints do not move the version") {
  PolicyStore store(std::nullopt, clock_at_epoch());
  auto bad = route("a.corp.test");
  bad.upstream = "";
  CHECK_THROWS_AS(store.upsert_route(bad, "ops"), RouteRejected);
  CHECK_THROWS_AS(store.add_revocation("ZZ", "x", "ops"), ValidationError);
  CHECK(store.current()->version == 1);
  CHECK(store.history().size() == 1);
}

TEST_CASE("policy state persists across restarts") {
  auto path = temp_path("state.json");
  auto clock = clock_at_epoch();
  {
    PolicyStore store(path, clock);
    store.upsert_route(route("a.corp.test"), "ops");
    store.add_revocation(kFp, "lost", "ops");
    store.set_kill_switch(true, "ops");
  }
  PolicyStore again(path, clock);
  CHECK(again.current()->version == 4);
  CHECK(again.current()->kill_switch);
  CHECK(again.current()->routes.at("a.corp.test") == route("a.corp.test"));
  CHECK(again.history().size() == 4);
  CHECK(again.revocations().at(0).fingerprint == kFp);
  CHECK(again.set_kill_switch(false, "ops") == 5);
  std::filesystem::remove(path);
}

TEST_CASE("log store deduplicates on (gateway_id, sequence)") {
  LogStore logs(100, std::nullopt, clock_at_epoch());
  CHECK(logs.ingest({log_record("gw-1", 1, 1), log_record("gw-1", 2, 2)}) == 2);
  CHECK(logs.ingest({log_record("gw-1", 2, 2), log_record("gw-2", 2, 2), log_record("gw-1", 3, 3)}) == 2);
  CHECK(logs.size() == 4);
  CHECK(logs.cursor() >= 4);
}

TEST_CASE("log store survives a restart and keeps its cursor") {
  auto path = temp_path("logs.jsonl");
  {
    LogStore logs(100, path, clock_at_epoch());
    logs.ingest({log_record("gw-1", 1, 1), log_record("gw-1", 2, 2)});
  }
  LogStore again(100, path, clock_at_epoch());
  CHECK(again.size() == 2);
  CHECK(again.ingest({log_record("gw-1", 2, 2)}) == 0);
  CHECK(again.ingest({log_record("gw-1", 3, 3)}) == 1);
  auto rows = again.query({});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].cursor == 3);
  std::filesystem::remove(path);
}

TEST_CASE("log query matches the naive oracle on 10k records") {
  std::mt19937_64 rng(21);
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  LogStore logs(20000, std::nullopt, clock_at_epoch());
  std::vector<oracle::LogRow> rows;
  std::vector<observe::AccessLogRecord> batch;
  const std::vector<std::string> users{"alice", "bob", "carol"};
  const std::vector<std::string> hosts{"app1.corp.test", "app2.corp.test", "bastion.corp.test"};
  std::uint64_t seq[3] = {0, 0, 0};
  for (int i = 0; i < 10000; i++) {
    int g = pick(3);
    auto r = log_record("gw-" + std::to_string(g), ++seq[g], 1'700'000'000'000'000LL + pick(5000) * 1000LL);
    if (pick(4)) r.user_id = users[static_cast<std::size_t>(pick(3))];
    if (pick(4)) r.fingerprint = sha256_hex(std::to_string(pick(5)));
    r.host = hosts[static_cast<std::size_t>(pick(3))];
    r.outcome = static_cast<observe::LogOutcome>(pick(3));
    batch.push_back(r);
    if (batch.size() == 1000) {
      logs.ingest(batch);
      batch.clear();
    }
    rows.push_back({static_cast<std::uint64_t>(i + 1), epoch_micros(r.timestamp), r.gateway_id, r.sequence, r.user_id,
                    r.fingerprint, r.host, std::string(observe::to_string(r.outcome))});
  }
  for (int q = 0; q < 200; q++) {
    LogQuery lq;
    oracle::LogFilter f;
    if (pick(2)) f.user = users[static_cast<std::size_t>(pick(3))];
    if (pick(3) == 0) f.fingerprint = sha256_hex(std::to_string(pick(5)));
    if (pick(2)) f.host = hosts[static_cast<std::size_t>(pick(3))];
    if (pick(2)) f.outcome = std::string(observe::to_string(static_cast<observe::LogOutcome>(pick(3))));
    if (pick(2)) f.since = static_cast<std::uint64_t>(pick(10001));
    f.limit = static_cast<std::size_t>(1 + pick(q % 10 == 0 ? 10000 : 200));
    lq.user = f.user;
    lq.fingerprint = f.fingerprint;
    lq.host = f.host;
    if (f.outcome) lq.outcome = observe::parse_outcome(*f.outcome);
    lq.since = f.since;
    lq.limit = f.limit;
    auto got = logs.query(lq);
    auto want = oracle::naive_query(rows, f);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); i++) {
      CHECK(got[i].cursor == want[i].cursor);
    }
  }
  LogQuery too_big;
  too_big.limit = 10001;
  CHECK_THROWS_AS(logs.query(too_big), ValidationError);
}

TEST_CASE("HTTP interface") {
  ControlPlaneOptions opts;
  opts.admin_token = "secret";
  opts.cors_origin = "http://console.test";
  ControlPlaneServer server(opts, clock_at_epoch());
  server.start();
  httplib::Client c("127.0.0.1", server.port());
  const httplib::Headers auth{{"Authorization", "Bearer secret"}};

  SUBCASE("policy ETag and conditional GET") {
    auto r = c.Get("/v1/policy");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(r->get_header_value("ETag") == "\"1\"");
    r = c.Get("/v1/policy", {{"If-None-Match", "\"1\""}});
    CHECK(r->status == 304);
    CHECK(r->body.empty());
    server.policy().set_kill_switch(true, "ops");
    r = c.Get("/v1/policy", {{"If-None-Match", "\"1\""}});
    CHECK(r->status == 200);
    CHECK(policy::decode_snapshot(r->body).kill_switch);
    CHECK(r->get_header_value("ETag") == "\"2\"");
  }

  SUBCASE("admin routes require the bearer token") {
    for (auto path : {"/v1/revocations", "/v1/logs"}) {
      auto r = c.Get(path);
      REQUIRE(r);
      CHECK(r->status == 401);
      CHECK(r->get_header_value("WWW-Authenticate") == "Bearer");
    }
    auto r = c.Post("/v1/killswitch", {{"Authorization", "Bearer wrong"}}, R"({"enabled":true})", "application/json");
    CHECK(r->status == 401);
    CHECK(server.policy().current()->version == 1);
  }

  SUBCASE("CORS and preflight") {
    auto r = c.Get("/v1/health");
    CHECK(r->get_header_value("Access-Control-Allow-Origin") == "http://console.test");
    r = c.Options("/v1/logs");
    REQUIRE(r);
    CHECK(r->status == 204);
    CHECK(r->get_header_value("Access-Control-Allow-Headers").find("Authorization") != std::string::npos);
    CHECK(r->get_header_value("Access-Control-Allow-Methods").find("PUT") != std::string::npos);
  }

  SUBCASE("mutations return the new version") {
    auto r = c.Post("/v1/killswitch", auth, R"({"enabled":true})", "application/json");
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["version"] == 2);
    r = c.Put("/v1/routes/app9.corp.test", auth,
              R"({"upstream":"127.0.0.1:9","kind":"HTTP","required_groups":["eng"],"allowed_employment":["FTE"],"session_max_age_s":600})",
              "application/json");
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["version"] == 3);
    r = c.Post("/v1/revocations", auth, json{{"fingerprint", kFp}, {"reason", "lost"}}.dump(), "application/json");
    CHECK(json::parse(r->body)["version"] == 4);
    r = c.Put("/v1/settings", auth, R"({"max_staleness_s":30})", "application/json");
    CHECK(json::parse(r->body)["version"] == 5);
    r = c.Get("/v1/revocations", auth);
    CHECK(json::parse(r->body)["revocations"][0]["fingerprint"] == kFp);
    CHECK(server.policy().current()->max_staleness_s == 30);
  }

  SUBCASE("validation failures are 422 with field errors") {
    auto r = c.Post("/v1/killswitch", auth, R"({"enabled":"yes"})", "application/json");
    CHECK(r->status == 422);
    r = c.Put("/v1/routes/app9.corp.test", auth, R"({"upstream":"","kind":"HTTP"})", "application/json");
    CHECK(r->status == 422);
    CHECK(json::parse(r->body)["fields"].contains("upstream"));
    r = c.Post("/v1/revocations", auth, R"({"fingerprint":"nothex"})", "application/json");
    CHECK(r->status == 422);
    r = c.Put("/v1/settings", auth, R"({"max_staleness_s":-1})", "application/json");
    CHECK(r->status == 422);
    CHECK(json::parse(r->body)["fields"].contains("max_staleness_s"));
    CHECK(server.policy().current()->version == 1);
  }

  SUBCASE("log ingest and query with a since cursor") {
    json batch = json::array();
    for (int i = 1; i <= 5; i++) batch.push_back(json::parse(observe::to_json_line(log_record("gw-1", i, i))));
    auto r = c.Post("/v1/logs", batch.dump(), "application/json");
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["accepted"] == 5);
    r = c.Post("/v1/logs", batch.dump(), "application/json");
    CHECK(json::parse(r->body)["accepted"] == 0);

    r = c.Get("/v1/logs?limit=10", auth);
    REQUIRE(r->status == 200);
    auto page = json::parse(r->body);
    CHECK(page["records"].size() == 5);
    const auto cursor = page["cursor"].get<std::uint64_t>();
    CHECK(cursor >= 5);

    batch = json::array();
    batch.push_back(json::parse(observe::to_json_line(log_record("gw-1", 6, 6))));
    c.Post("/v1/logs", batch.dump(), "application/json");
    r = c.Get("/v1/logs?since=" + std::to_string(cursor), auth);
    page = json::parse(r->body);
    REQUIRE(page["records"].size() == 1);
    CHECK(page["records"][0]["sequence"] == 6);

    CHECK(c.Get("/v1/logs?limit=10001", auth)->status == 400);
    CHECK(c.Get("/v1/logs?since=abc", auth)->status == 400);

    json big = json::array();
    for (int i = 0; i < 1001; i++) big.push_back(json::parse(observe::to_json_line(log_record("gw-9", i + 1, 1))));
    CHECK(c.Post("/v1/logs", big.dump(), "application/json")->status == 413);
    CHECK(c.Post("/v1/logs", "[{\"nope\":1}]", "application/json")->status == 422);
    CHECK(c.Post("/v1/logs", "garbage", "application/json")->status == 400);
  }

  SUBCASE("fault injection returns 503 without side effects") {
    server.set_fault_rate(1.0);
    auto r = c.Post("/v1/killswitch", auth, R"({"enabled":true})", "application/json");
    CHECK(r->status == 503);
    server.set_fault_rate(0.0);
    CHECK(server.policy().current()->version == 1);
  }

  server.stop();
}
