#include "zta/observe.hpp"

#include <algorithm>
#include <httplib.h>
#include <iostream>
#include <json.hpp>

#include "zta/http.hpp"

namespace zta::observe {

using nlohmann::json;

std::string_view to_string(LogOutcome o) {
  switch (o) {
    case LogOutcome::allow: return "ALLOW";
    case LogOutcome::deny: return "DENY";
    case LogOutcome::error: return "ERROR";
  }
  return "ERROR";
}

LogOutcome parse_outcome(std::string_view s) {
  if (s == "ALLOW") return LogOutcome::allow;
  if (s == "DENY") return LogOutcome::deny;
  if (s == "ERROR") return LogOutcome::error;
  throw ValidationError("unknown outcome: " + std::string(s));
}

namespace {

template <typename T>
json nullable(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> opt_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

// Sequence of the last complete line, so numbering continues across restarts
// and the control plane's (gateway_id, sequence) dedup stays sound.
std::uint64_t last_sequence_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return 0;
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  const std::streamoff start = std::max<std::streamoff>(0, size - 65536);
  in.seekg(start);
  std::string tail(static_cast<std::size_t>(size - start), '\0');
  in.read(tail.data(), static_cast<std::streamsize>(tail.size()));
  std::uint64_t last = 0;
  std::size_t pos = 0;
  while (pos < tail.size()) {
    auto nl = tail.find('\n', pos);
    if (nl == std::string::npos) break;
    try {
      last = std::max(last, json::parse(tail.substr(pos, nl - pos)).at("sequence").get<std::uint64_t>());
    } catch (const std::exception&) {
      // partial first line of the window, or a torn write
    }
    pos = nl + 1;
  }
  return last;
}

}  // namespace

std::string to_json_line(const AccessLogRecord& r) {
  json j{{"ts", format_timestamp(r.timestamp)},
         {"gateway_id", r.gateway_id},
         {"sequence", r.sequence},
         {"fingerprint", nullable(r.fingerprint)},
         {"user_id", nullable(r.user_id)},
         {"source_ip", r.source_ip},
         {"host", r.host},
         {"path", r.path},
         {"outcome", to_string(r.outcome)},
         {"reason", r.reason},
         {"policy_version", nullable(r.policy_version)},
         {"latency_us", r.latency_us},
         {"status", r.status}};
  return j.dump();
}

AccessLogRecord parse_json_line(const std::string& line) {
  json j = json::parse(line);
  AccessLogRecord r;
  r.timestamp = parse_timestamp(j.at("ts").get<std::string>());
  r.gateway_id = j.at("gateway_id").get<std::string>();
  r.sequence = j.at("sequence").get<std::uint64_t>();
  r.fingerprint = opt_field<std::string>(j, "fingerprint");
  r.user_id = opt_field<std::string>(j, "user_id");
  r.source_ip = j.at("source_ip").get<std::string>();
  r.host = j.at("host").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.outcome = parse_outcome(j.at("outcome").get<std::string>());
  r.reason = j.at("reason").get<std::string>();
  r.policy_version = opt_field<std::int64_t>(j, "policy_version");
  r.latency_us = j.value("latency_us", std::int64_t{0});
  r.status = j.value("status", 0);
  return r;
}

void BoundedLogQueue::push(AccessLogRecord r) {
  std::unique_lock lk(mu_);
  while (items_.size() >= capacity_) {
    auto victim = std::find_if(items_.begin(), items_.end(),
                               [](const AccessLogRecord& x) { return x.outcome == LogOutcome::allow; });
    if (victim != items_.end()) {
      items_.erase(victim);
      evicted_++;
      break;
    }
    if (r.outcome == LogOutcome::allow) {
      // Nothing evictable and the newcomer is itself the cheapest record.
      evicted_++;
      return;
    }
    not_full_.wait(lk, [&] { return items_.size() < capacity_ || interrupted_; });
    if (interrupted_ && items_.size() >= capacity_) return;
  }
  items_.push_back(std::move(r));
  not_empty_.notify_one();
}

std::vector<AccessLogRecord> BoundedLogQueue::pop_batch(std::size_t max, std::chrono::milliseconds wait) {
  std::unique_lock lk(mu_);
  not_empty_.wait_for(lk, wait, [&] { return !items_.empty() || interrupted_; });
  std::vector<AccessLogRecord> out;
  while (!items_.empty() && out.size() < max) {
    out.push_back(std::move(items_.front()));
    items_.pop_front();
  }
  if (!out.empty()) not_full_.notify_all();
  return out;
}

std::size_t BoundedLogQueue::size() const {
  std::lock_guard lk(mu_);
  return items_.size();
}

void BoundedLogQueue::interrupt() {
  {
    std::lock_guard lk(mu_);
    interrupted_ = true;
  }
  not_empty_.notify_all();
  not_full_.notify_all();
}

ShipStatus HttpLogSink::ship(const std::vector<AccessLogRecord>& batch) {
  try {
    auto url = http::parse_url(base_url_);
    httplib::Client cli(url.scheme + "://" + url.host + ":" + std::to_string(url.port));
    cli.set_connection_timeout(2);
    cli.set_read_timeout(5);
    json body = json::array();
    for (const auto& r : batch) body.push_back(json::parse(to_json_line(r)));
    auto res = cli.Post("/v1/logs", body.dump(), "application/json");
    if (!res) return ShipStatus::retry;
    if (res->status == 200) return ShipStatus::acknowledged;
    if (res->status == 413) return ShipStatus::too_large;
    if (res->status >= 400 && res->status < 500) return ShipStatus::rejected;
    return ShipStatus::retry;
  } catch (const std::exception&) {
    return ShipStatus::retry;
  }
}

LogPipeline::LogPipeline(PipelineOptions opts, std::shared_ptr<LogSink> sink, std::shared_ptr<const Clock> clock)
    : opts_(std::move(opts)), sink_(std::move(sink)), clock_(std::move(clock)), queue_(opts_.queue_capacity) {
  next_sequence_ = last_sequence_in(opts_.local_path) + 1;
  file_.open(opts_.local_path, std::ios::app);
  if (!file_) {
    file_errors_++;
    std::cerr << "observe: cannot open " << opts_.local_path << "\n";
  }
}

LogPipeline::~LogPipeline() { stop(); }

AccessLogRecord LogPipeline::emit(AccessLogRecord r) {
  {
    std::lock_guard lk(file_mu_);
    r.gateway_id = opts_.gateway_id;
    r.sequence = next_sequence_++;
    if (r.outcome == LogOutcome::allow) r.reason = "ok";
    file_ << to_json_line(r) << '\n';
    file_.flush();
    if (!file_) {
      file_errors_++;
      file_.clear();
    }
    emitted_++;
  }
  if (sink_) queue_.push(r);
  return r;
}

void LogPipeline::start() {
  if (!sink_ || thread_.joinable()) return;
  {
    std::lock_guard lk(run_mu_);
    stopping_ = false;
  }
  thread_ = std::thread([this] { run(); });
}

void LogPipeline::stop() {
  {
    std::lock_guard lk(run_mu_);
    if (stopping_ && !thread_.joinable()) return;
    stopping_ = true;
  }
  run_cv_.notify_all();
  queue_.interrupt();
  if (thread_.joinable()) thread_.join();
}

bool LogPipeline::sleep_interruptible(std::chrono::milliseconds d) {
  std::unique_lock lk(run_mu_);
  return !run_cv_.wait_for(lk, d, [this] { return stopping_; });
}

void LogPipeline::quarantine(const std::vector<AccessLogRecord>& batch) {
  std::ofstream dl(opts_.dead_letter_path, std::ios::app);
  for (const auto& r : batch) dl << to_json_line(r) << '\n';
  dead_lettered_ += batch.size();
}

bool LogPipeline::deliver(std::vector<AccessLogRecord>& batch) {
  batches_++;
  std::size_t prev = largest_batch_.load();
  while (batch.size() > prev && !largest_batch_.compare_exchange_weak(prev, batch.size())) {
  }
  switch (sink_->ship(batch)) {
    case ShipStatus::acknowledged:
      shipped_ += batch.size();
      batch.clear();
      return true;
    case ShipStatus::rejected:
      quarantine(batch);
      batch.clear();
      return true;
    case ShipStatus::too_large: {
      if (batch.size() == 1) {
        quarantine(batch);
        batch.clear();
        return true;
      }
      std::vector<AccessLogRecord> second(batch.begin() + static_cast<std::ptrdiff_t>(batch.size() / 2), batch.end());
      batch.resize(batch.size() / 2);
      bool ok = deliver(batch);
      // Keep the undelivered remainder together for the retry.
      if (!ok) {
        batch.insert(batch.end(), second.begin(), second.end());
        return false;
      }
      batch = std::move(second);
      return deliver(batch);
    }
    case ShipStatus::retry:
      return false;
  }
  return false;
}

void LogPipeline::run() {
  std::vector<AccessLogRecord> pending;
  auto backoff = opts_.backoff_initial;
  auto last_batch = std::chrono::steady_clock::now() - opts_.batch_interval;
  for (;;) {
    bool stopping;
    {
      std::lock_guard lk(run_mu_);
      stopping = stopping_;
    }
    if (pending.empty()) {
      if (stopping && queue_.size() == 0) break;
      pending = queue_.pop_batch(opts_.max_batch, std::chrono::milliseconds(200));
      inflight_.store(pending.size());
      if (pending.empty()) continue;
    }
    auto since = std::chrono::steady_clock::now() - last_batch;
    if (since < opts_.batch_interval && !stopping) {
      sleep_interruptible(std::chrono::duration_cast<std::chrono::milliseconds>(opts_.batch_interval - since));
    }
    last_batch = std::chrono::steady_clock::now();
    if (deliver(pending)) {
      backoff = opts_.backoff_initial;
      inflight_.store(0);
      continue;
    }
    if (stopping) break;  // undelivered records remain in the local file
    sleep_interruptible(backoff);
    backoff = std::min(backoff * 2, opts_.backoff_cap);
  }
}

bool LogPipeline::flush(std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (queue_.size() == 0 && inflight_.load() == 0 && shipped_.load() + dead_lettered_.load() + evicted_allows() >= emitted_.load()) {
      return true;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return false;
}

}  // namespace zta::observe
