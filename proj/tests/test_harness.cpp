#include <doctest.h>

#include <sys/stat.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <httplib.h>
#include <json.hpp>

#include "zta/harness.hpp"
#include "zta/scenario.hpp"

using namespace zta;
using namespace zta::harness;
using json = nlohmann::json;
using namespace std::chrono_literals;

namespace {

struct CommandResult {
  int exit_code = -1;
  std::string out;
};

CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  int status = ::pclose(p);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

struct IdpFixture {
  std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>(from_epoch_seconds(1'790'000'000));
  MockIdp idp{IdpOptions{}, UserDirectory::default_fixture(), clock};
  httplib::Client http{"127.0.0.1", 0};
  IdpFixture() : http("127.0.0.1", (idp.start(), idp.port())) {}
  ~IdpFixture() { idp.stop(); }

  std::string code_for(const std::string& user, const std::string& password, int* status = nullptr) {
    auto r = http.Post("/login", httplib::Params{{"client_id", "zta-gateway"},
                                                  {"redirect_uri", "https://app1.corp.test/.zta/callback"},
                                                  {"state", "s1"},
                                                  {"username", user},
                                                  {"password", password}});
    REQUIRE(r);
    if (status) *status = r->status;
    if (r->status != 302) return {};
    auto loc = http::parse_url(r->get_header_value("Location"));
    auto q = http::parse_query(std::string_view(loc.target).substr(loc.target.find('?') + 1));
    CHECK(q["state"] == "s1");
    return q["code"];
  }
};

}  // namespace

TEST_CASE("user directory fixture") {
  auto d = UserDirectory::default_fixture();
  CHECK(d.users() == std::vector<std::string>{"alice", "bob", "carol", "dave"});
  CHECK(d.check_password("alice", "alice-pw"));
  CHECK_FALSE(d.check_password("alice", "bob-pw"));
  CHECK_FALSE(d.check_password("nobody", "x"));
  CHECK(d.find("bob")->employment == Employment::contractor);
  CHECK(d.find("carol")->groups == std::set<std::string>{"sre"});
  CHECK_FALSE(d.find("dave")->active);
  CHECK(d.find("alice")->password_hash.find("alice-pw") == std::string::npos);
}

TEST_CASE("mock IdP codes are single use, expire and need the client secret") {
  IdpFixture f;
  authn::HttpIdpClient client(f.idp.client_config());
  const std::string redirect = "https://app1.corp.test/.zta/callback";

  auto code = f.code_for("alice", "alice-pw");
  REQUIRE_FALSE(code.empty());
  auto who = client.exchange_code(code, redirect);
  CHECK(who.sub == "alice");
  CHECK(who.groups == std::set<std::string>{"eng"});
  CHECK(who.employment == Employment::fte);
  CHECK_THROWS_AS(client.exchange_code(code, redirect), authn::IdpRejected);

  auto late = f.code_for("bob", "bob-pw");
  f.clock->advance(61s);
  CHECK_THROWS_AS(client.exchange_code(late, redirect), authn::IdpRejected);

  auto other = f.code_for("bob", "bob-pw");
  CHECK_THROWS_AS(client.exchange_code(other, "https://evil.test/cb"), authn::IdpRejected);

  auto cfg = f.idp.client_config();
  cfg.client_secret = "wrong";
  authn::HttpIdpClient bad(cfg);
  auto code2 = f.code_for("alice", "alice-pw");
  CHECK_THROWS_AS(bad.exchange_code(code2, redirect), authn::IdpRejected);

  int status = 0;
  CHECK(f.code_for("alice", "wrong", &status).empty());
  CHECK(status == 200);
  CHECK(f.code_for("dave", "dave-pw", &status).empty());
  CHECK(status == 403);

  CHECK(client.password_grant("carol", "carol-pw").sub == "carol");
  CHECK_THROWS_AS(client.password_grant("carol", "nope"), authn::IdpRejected);
  CHECK_THROWS_AS(client.password_grant("dave", "dave-pw"), authn::IdpRejected);
}

TEST_CASE("echo upstream reports what it received") {
  EchoUpstream up;
  up.start();
  httplib::Client c("127.0.0.1", up.port());
  auto r = c.Get("/a/b?x=1", {{"X-Test", "1"}});
  REQUIRE(r);
  auto j = json::parse(r->body);
  CHECK(j["method"] == "GET");
  CHECK(j["target"] == "/a/b?x=1");
  bool seen = false;
  for (const auto& h : j["headers"]) seen = seen || (h[0] == "X-Test" && h[1] == "1");
  CHECK(seen);
  CHECK(c.Get("/status/418")->status == 418);
  CHECK(c.Get("/bytes/1000")->body.size() == 1000);
  up.stop();
}

TEST_CASE("scenario documents are validated") {
  auto ok = R"({"name":"t","seed":3,"actors":{"a":{"device":"laptop-001"}},
                "steps":[{"id":"s1","actor":"a","action":"http_get","params":{"host":"app1.corp.test","path":"/"}},
                         {"id":"s2","actor":"a","action":"assert","params":{"ref":"s1","field":"status","op":"eq","value":200}}]})";
  auto s = parse_scenario(ok);
  CHECK(s.name == "t");
  CHECK(s.seed == 3);
  CHECK(s.steps.size() == 2);
  CHECK(s.actors.at("a").device == "laptop-001");

  auto bad = [](std::string text) { CHECK_THROWS_AS(parse_scenario(text), ValidationError); };
  bad(R"({"name":"t","actors":{},"steps":[{"id":"s1","actor":"a","action":"http_get"}]})");
  bad(R"({"name":"t","actors":{"a":{}},"steps":[{"id":"s1","actor":"a","action":"teleport"}]})");
  bad(R"({"name":"t","actors":{"a":{}},"steps":[{"id":"s1","actor":"a","action":"advance_clock","params":{"seconds":1}},
                                                 {"id":"s1","actor":"a","action":"advance_clock","params":{"seconds":1}}]})");
  bad(R"({"name":"t","actors":{"a":{}},"steps":[{"id":"s1","actor":"a","action":"assert","params":{"ref":"s2","field":"status","op":"eq","value":1}},
                                                 {"id":"s2","actor":"a","action":"advance_clock","params":{"seconds":1}}]})");
  CHECK_THROWS(parse_scenario("not json"));
}

TEST_CASE("bundled scenarios pass and repeat their decisions") {
  const std::filesystem::path dir(ZTA_SCENARIO_DIR);
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    count++;
    CAPTURE(entry.path().string());
    auto scenario = parse_scenario(read_file(entry.path().string()));
    std::vector<std::string> first;
    for (int run = 0; run < 2; run++) {
      Environment env;
      auto result = run_scenario(scenario, env);
      CAPTURE(result.diff);
      CHECK(result.passed);
      if (run == 0) {
        first = result.reasons;
      } else {
        CHECK(result.reasons == first);
      }
    }
  }
  CHECK(count >= 3);
}

TEST_CASE("CLI login and tunnel") {
  Environment env;
  const auto& dev = env.device("laptop-001");
  const std::string token_file = env.dir() + "/cli/session.json";
  const std::string cli = ZTA_CLI_PATH;
  const std::string flags = " --gateway 127.0.0.1:" + std::to_string(env.gateway().port()) + " --ca " + env.ca_path() +
                            " --cert " + dev.cert_path + " --key " + dev.key_path + " --token-file " + token_file;

  auto bad = run_command(cli + " login" + flags + " --user alice --password nope 2>&1");
  CHECK(bad.exit_code == 1);
  CHECK_FALSE(std::filesystem::exists(token_file));

  auto ok = run_command(cli + " login" + flags + " --user alice --password alice-pw 2>&1");
  CAPTURE(ok.out);
  REQUIRE(ok.exit_code == 0);
  struct stat st {};
  REQUIRE(::stat(token_file.c_str(), &st) == 0);
  CHECK((st.st_mode & 0777) == 0600);
  CHECK(json::parse(read_file(token_file)).contains("session_id"));

  auto t = run_command("printf 'ping-through-tunnel' | timeout 30 " + cli + " tunnel" + flags +
                       " --target bastion.corp.test:22");
  CHECK(t.exit_code == 0);
  CHECK(t.out == "ping-through-tunnel");

  std::filesystem::remove(token_file);
  auto missing = run_command("timeout 30 " + cli + " tunnel" + flags +
                             " --target bastion.corp.test:22 2>&1 </dev/null");
  CHECK(missing.exit_code != 0);
  CHECK(missing.out.find("zta login") != std::string::npos);
}
