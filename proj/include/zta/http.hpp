#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "zta/net.hpp"

namespace zta::http {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Header block exceeded the reader's hard cap.
class HeadTooLarge : public std::runtime_error {
 public:
  HeadTooLarge() : std::runtime_error("header block too large") {}
};

/// Ordered, duplicate-preserving header list with case-insensitive lookup.
class Headers {
 public:
  using Item = std::pair<std::string, std::string>;

  void add(std::string name, std::string value) { items_.emplace_back(std::move(name), std::move(value)); }
  void set(const std::string& name, std::string value);
  std::optional<std::string> get(std::string_view name) const;
  std::vector<std::string> get_all(std::string_view name) const;
  std::size_t count(std::string_view name) const;
  /// Returns the number of removed entries.
  std::size_t remove(std::string_view name);
  template <typename Pred>
  std::size_t remove_if(Pred pred) {
    std::size_t before = items_.size();
    std::erase_if(items_, [&](const Item& it) { return pred(it.first, it.second); });
    return before - items_.size();
  }
  /// Size of the serialized "Name: value\r\n" lines.
  std::size_t wire_size() const;
  const std::vector<Item>& items() const { return items_; }
  bool empty() const { return items_.empty(); }

 private:
  std::vector<Item> items_;
};

struct RequestHead {
  std::string method;
  std::string target;
  std::string version = "HTTP/1.1";
  Headers headers;

  std::string serialize() const;
  /// Path component of the target, without the query string.
  std::string path() const;
  std::string query() const;
};

struct ResponseHead {
  std::string version = "HTTP/1.1";
  int status = 200;
  std::string reason;
  Headers headers;

  std::string serialize() const;
};

RequestHead parse_request_head(std::string_view block);
ResponseHead parse_response_head(std::string_view block);

std::string_view status_text(int status);

/// Buffered reader over a Stream that understands HTTP/1.1 framing.
class Reader {
 public:
  explicit Reader(net::Stream& s) : stream_(s) {}

  /// Reads through the blank line ending a header block. Returns nullopt on
  /// clean EOF before any byte. Throws HeadTooLarge beyond `max_bytes`.
  std::optional<std::string> read_head(std::size_t max_bytes);
  /// Returns up to n bytes, draining the internal buffer first; 0 on EOF.
  std::size_t read_some(char* out, std::size_t n);
  std::string read_line(std::size_t max_bytes);
  std::string read_exact(std::size_t n);
  bool has_buffered() const { return pos_ < buf_.size(); }
  net::Stream& stream() { return stream_; }

 private:
  bool fill();

  net::Stream& stream_;
  std::string buf_;
  std::size_t pos_ = 0;
};

enum class BodyFraming { none, length, chunked, until_close };

struct Framing {
  BodyFraming kind = BodyFraming::none;
  std::uint64_t length = 0;
};

Framing request_framing(const RequestHead& head);
Framing response_framing(const ResponseHead& head, std::string_view request_method);

/// Copies a body from `in` to `out` in bounded chunks, preserving chunked
/// encoding on the wire. Returns bytes relayed. `peak_buffer` records the
/// largest single buffer used.
std::uint64_t relay_body(Reader& in, const Framing& framing, net::Stream& out, std::size_t* peak_buffer = nullptr);

/// Reads a whole body into memory; throws ParseError beyond `max_bytes`.
std::string read_body(Reader& in, const Framing& framing, std::size_t max_bytes);

// -- small codecs ---------------------------------------------------------

std::string url_encode(std::string_view s);
std::string url_decode(std::string_view s);
std::map<std::string, std::string> parse_query(std::string_view q);
std::string build_query(const std::vector<std::pair<std::string, std::string>>& params);

/// Parses every Cookie header into name/value pairs in order.
std::vector<std::pair<std::string, std::string>> parse_cookies(const Headers& h);

struct Url {
  std::string scheme;
  std::string host;
  std::uint16_t port = 0;
  std::string target = "/";  // path + query

  std::string authority() const;
  std::string str() const;
};

Url parse_url(std::string_view url);

}  // namespace zta::http
