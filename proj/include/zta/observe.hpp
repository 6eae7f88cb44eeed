#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "zta/common.hpp"

namespace zta::observe {

inline constexpr std::string_view kDefaultLogFile = "access.log.jsonl";

enum class LogOutcome { allow, deny, error };

std::string_view to_string(LogOutcome o);
LogOutcome parse_outcome(std::string_view s);

/// One access decision with its request context.
struct AccessLogRecord {
  TimePoint timestamp;
  std::string gateway_id;
  std::uint64_t sequence = 0;
  std::optional<std::string> fingerprint;
  std::optional<std::string> user_id;
  std::string source_ip;
  std::string host;
  std::string path;  // request path, or host:port target for CONNECT
  LogOutcome outcome = LogOutcome::deny;
  std::string reason;
  std::optional<std::int64_t> policy_version;
  std::int64_t latency_us = 0;
  int status = 0;

  bool operator==(const AccessLogRecord&) const = default;
};

std::string to_json_line(const AccessLogRecord& r);
AccessLogRecord parse_json_line(const std::string& line);

/// Bounded MPSC queue. When full, the oldest ALLOW is evicted to make room;
/// DENY and ERROR records are never evicted, and push blocks if nothing is
/// evictable.
class BoundedLogQueue {
 public:
  explicit BoundedLogQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(AccessLogRecord r);
  /// Pops up to `max` records, waiting up to `wait` for the first one.
  std::vector<AccessLogRecord> pop_batch(std::size_t max, std::chrono::milliseconds wait);
  std::size_t size() const;
  std::uint64_t evicted_allows() const { return evicted_.load(); }
  void interrupt();

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<AccessLogRecord> items_;
  std::atomic<std::uint64_t> evicted_{0};
  bool interrupted_ = false;
};

enum class ShipStatus { acknowledged, retry, too_large, rejected };

class LogSink {
 public:
  virtual ~LogSink() = default;
  virtual ShipStatus ship(const std::vector<AccessLogRecord>& batch) = 0;
};

/// POST /v1/logs on the control plane.
class HttpLogSink final : public LogSink {
 public:
  explicit HttpLogSink(std::string base_url) : base_url_(std::move(base_url)) {}
  ShipStatus ship(const std::vector<AccessLogRecord>& batch) override;

 private:
  std::string base_url_;
};

struct PipelineOptions {
  std::string gateway_id = "gw-1";
  std::string local_path = std::string(kDefaultLogFile);
  std::string dead_letter_path = "access.deadletter.jsonl";
  std::size_t queue_capacity = 10000;
  std::size_t max_batch = 1000;
  std::chrono::milliseconds batch_interval{1000};
  std::chrono::milliseconds backoff_initial{1000};
  std::chrono::milliseconds backoff_cap{30000};
};

/// Local JSONL file (synchronous, superset of everything emitted) plus a
/// batching shipper to the control plane.
class LogPipeline {
 public:
  LogPipeline(PipelineOptions opts, std::shared_ptr<LogSink> sink, std::shared_ptr<const Clock> clock);
  ~LogPipeline();

  /// Assigns gateway_id and sequence, appends to the local file, enqueues.
  /// Returns the stored record.
  AccessLogRecord emit(AccessLogRecord r);

  void start();
  void stop();
  /// Waits until everything emitted so far has been shipped or quarantined.
  bool flush(std::chrono::milliseconds timeout);

  std::uint64_t emitted() const { return emitted_.load(); }
  std::uint64_t shipped() const { return shipped_.load(); }
  std::uint64_t dead_lettered() const { return dead_lettered_.load(); }
  std::uint64_t file_errors() const { return file_errors_.load(); }
  std::uint64_t evicted_allows() const { return queue_.evicted_allows(); }
  std::size_t queued() const { return queue_.size(); }
  std::uint64_t batches_sent() const { return batches_.load(); }
  std::size_t largest_batch() const { return largest_batch_.load(); }
  const PipelineOptions& options() const { return opts_; }

 private:
  void run();
  /// Ships one batch, splitting on too_large. Returns false when it must be retried.
  bool deliver(std::vector<AccessLogRecord>& batch);
  void quarantine(const std::vector<AccessLogRecord>& batch);
  bool sleep_interruptible(std::chrono::milliseconds d);

  PipelineOptions opts_;
  std::shared_ptr<LogSink> sink_;
  std::shared_ptr<const Clock> clock_;
  BoundedLogQueue queue_;
  std::mutex file_mu_;
  std::ofstream file_;
  std::uint64_t next_sequence_ = 1;
  std::atomic<std::uint64_t> emitted_{0};
  std::atomic<std::uint64_t> shipped_{0};
  std::atomic<std::uint64_t> dead_lettered_{0};
  std::atomic<std::uint64_t> file_errors_{0};
  std::atomic<std::uint64_t> batches_{0};
  std::atomic<std::size_t> largest_batch_{0};
  std::atomic<std::size_t> inflight_{0};
  std::mutex run_mu_;
  std::condition_variable run_cv_;
  bool stopping_ = false;
  std::thread thread_;
};

}  // namespace zta::observe
