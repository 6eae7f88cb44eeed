#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zta {

using TimePoint = std::chrono::time_point<std::chrono::system_clock, std::chrono::microseconds>;
using Seconds = std::chrono::seconds;

/// Source of wall-clock time. Every validity, expiry and session-age check
/// goes through one of these so tests can pin or shift time.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual TimePoint now() const = 0;
};

class SystemClock final : public Clock {
 public:
  TimePoint now() const override;
};

/// Fully manual clock for unit tests.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(TimePoint start) : now_(start.time_since_epoch().count()) {}
  TimePoint now() const override { return TimePoint(std::chrono::microseconds(now_.load())); }
  void set(TimePoint t) { now_.store(t.time_since_epoch().count()); }
  void advance(std::chrono::microseconds d) { now_.fetch_add(d.count()); }

 private:
  std::atomic<std::int64_t> now_;
};

/// System time plus an adjustable offset; used by integration environments
/// that need real timers but want to jump the wall clock forward.
class OffsetClock final : public Clock {
 public:
  TimePoint now() const override;
  void advance(std::chrono::microseconds d) { offset_us_.fetch_add(d.count()); }
  std::chrono::microseconds offset() const { return std::chrono::microseconds(offset_us_.load()); }

 private:
  std::atomic<std::int64_t> offset_us_{0};
};

enum class Employment { fte, contractor };

std::string_view to_string(Employment e);
/// Accepts "FTE" / "CONTRACTOR"; throws ValidationError otherwise.
Employment parse_employment(std::string_view s);

/// Input that violates an operation's precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Sha256Digest = std::array<std::uint8_t, 32>;

Sha256Digest sha256(std::span<const std::uint8_t> data);
Sha256Digest sha256(std::string_view data);
std::string sha256_hex(std::string_view data);

std::string to_hex(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> random_bytes(std::size_t n);

std::string base64url_encode(std::span<const std::uint8_t> bytes);
std::string base64url_encode(std::string_view bytes);
/// Throws ValidationError on characters outside the URL-safe alphabet.
std::string base64url_decode(std::string_view text);

/// True for exactly 64 lowercase hex characters.
bool is_fingerprint(std::string_view s);

std::int64_t epoch_seconds(TimePoint t);
std::int64_t epoch_micros(TimePoint t);
TimePoint from_epoch_seconds(std::int64_t s);
TimePoint from_epoch_micros(std::int64_t us);

/// RFC 3339 UTC with microseconds, e.g. 2026-10-19T08:30:00.000123Z.
std::string format_timestamp(TimePoint t);
TimePoint parse_timestamp(std::string_view s);

std::string to_lower(std::string_view s);
bool iequals(std::string_view a, std::string_view b);
std::string_view trim(std::string_view s);

std::string read_file(const std::string& path);
/// Writes via a temp file and rename so readers never observe a partial file.
void write_file_atomic(const std::string& path, std::string_view content, bool owner_only = false);

}  // namespace zta
