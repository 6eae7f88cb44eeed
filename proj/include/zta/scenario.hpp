#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zta/common.hpp"
#include "zta/control_plane.hpp"
#include "zta/gateway.hpp"
#include "zta/harness.hpp"
#include "zta/pki.hpp"

namespace zta::harness {

/// The environment could not be brought up or driven; distinct from an
/// assertion failure inside a scenario.
class InfrastructureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Source addresses the default geo table places in London and New York.
inline constexpr std::string_view kLondonIp = "127.0.1.10";
inline constexpr std::string_view kNewYorkIp = "127.0.2.10";

struct EnvironmentOptions {
  double poll_interval_s = 1.0;
  std::size_t header_limit_bytes = gateway::kDefaultHeaderLimit;
  /// Keep the working directory after teardown (for debugging).
  bool keep_dir = false;
  std::optional<std::string> dir;
};

struct DeviceFiles {
  std::string cert_path;
  std::string key_path;
  std::string fingerprint;
};

/// Complete loopback deployment: CA and device certificates, control plane,
/// mock IdP, HTTP and TCP echo upstreams and one gateway, all on ephemeral
/// ports and sharing one OffsetClock.
///
/// Devices: laptop-001..003 (managed, 30 days), "expired" (validity ended
/// ten days ago). Routes: app1 (FTE+CONTRACTOR, eng), app2 (FTE) and
/// bastion (TCP tunnel, FTE).
class Environment {
 public:
  explicit Environment(EnvironmentOptions opts = {});
  ~Environment();
  Environment(const Environment&) = delete;
  Environment& operator=(const Environment&) = delete;

  const std::string& dir() const { return dir_; }
  std::shared_ptr<OffsetClock> clock() const { return clock_; }
  const std::string& admin_token() const { return admin_token_; }
  const std::string& ca_path() const { return ca_path_; }

  cp::ControlPlaneServer& control_plane() { return *cp_; }
  MockIdp& idp() { return *idp_; }
  EchoUpstream& app() { return *app_; }
  TcpEcho& tcp_echo() { return *tcp_; }
  gateway::Gateway& gateway() { return *gw_; }
  const gateway::GatewayConfig& gateway_config() const { return gw_cfg_; }

  const DeviceFiles& device(const std::string& name) const;
  ClientOptions client_options(const std::optional<std::string>& device,
                               const std::optional<std::string>& source_ip = std::nullopt) const;
  TestClient client(const std::optional<std::string>& device,
                    const std::optional<std::string>& source_ip = std::nullopt) const;

  /// Stops the control plane; start_control_plane() brings it back on the
  /// same port from the same state file.
  void stop_control_plane();
  void start_control_plane();

  struct AdminReply {
    int status = 0;
    std::string body;
  };
  /// Authenticated /v1 call; throws InfrastructureError when unreachable.
  AdminReply admin(const std::string& method, const std::string& path, const std::string& body = {});
  std::int64_t set_kill_switch(bool enabled);
  std::int64_t revoke(const std::string& fingerprint, const std::string& reason = "test");
  std::int64_t update_settings(const nlohmann::json& settings);
  std::int64_t put_route(const policy::RoutePolicy& route);

  /// Blocks until the gateway runs policy version >= v.
  bool wait_for_version(std::int64_t v, std::chrono::milliseconds timeout);

 private:
  void build_pki();
  void start_services();

  EnvironmentOptions opts_;
  std::string dir_;
  bool own_dir_ = false;
  std::shared_ptr<OffsetClock> clock_;
  std::string admin_token_;
  std::string ca_path_;
  std::map<std::string, DeviceFiles> devices_;
  cp::ControlPlaneOptions cp_opts_;
  std::unique_ptr<cp::ControlPlaneServer> cp_;
  std::unique_ptr<MockIdp> idp_;
  std::unique_ptr<EchoUpstream> app_;
  std::unique_ptr<TcpEcho> tcp_;
  gateway::GatewayConfig gw_cfg_;
  std::unique_ptr<gateway::Gateway> gw_;
};

/// Default route table used by Environment.
std::vector<policy::RoutePolicy> fixture_routes(const std::string& http_upstream, const std::string& tcp_upstream);

// -- scenarios -----------------------------------------------------------------

struct ScenarioActor {
  std::optional<std::string> device;  // nullopt: no client certificate
  std::optional<std::string> source_ip;
};

struct ScenarioStep {
  std::string id;
  std::string actor;
  std::string action;  // login | http_get | connect | tunnel_closed | admin_op | advance_clock | assert
  nlohmann::json params = nlohmann::json::object();
  nlohmann::json expect = nlohmann::json::object();
};

struct Scenario {
  std::string name;
  std::uint64_t seed = 1;
  std::map<std::string, ScenarioActor> actors;
  std::vector<ScenarioStep> steps;
};

/// Parses and checks a scenario document. Throws ValidationError on an
/// unknown action or actor, a duplicate step id, or an assert that does not
/// reference an earlier step.
Scenario parse_scenario(const std::string& text);

struct StepResult {
  std::string id;
  std::string action;
  nlohmann::json observed = nlohmann::json::object();
};

struct ScenarioResult {
  bool passed = false;
  std::optional<std::size_t> failed_step;
  std::string diff;  // expected vs observed for the failing step
  /// Decision reason of every request-bearing step, in order.
  std::vector<std::string> reasons;
  std::vector<StepResult> steps;
};

/// Runs every step in order and stops at the first mismatch. Throws
/// InfrastructureError when the environment misbehaves.
ScenarioResult run_scenario(const Scenario& s, Environment& env);

}  // namespace zta::harness
