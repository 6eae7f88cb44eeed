#include "zta/http.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>

#include "zta/common.hpp"

namespace zta::http {

void Headers::set(const std::string& name, std::string value) {
  remove(name);
  add(name, std::move(value));
}

std::optional<std::string> Headers::get(std::string_view name) const {
  for (const auto& [k, v] : items_) {
    if (iequals(k, name)) return v;
  }
  return std::nullopt;
}

std::vector<std::string> Headers::get_all(std::string_view name) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : items_) {
    if (iequals(k, name)) out.push_back(v);
  }
  return out;
}

std::size_t Headers::count(std::string_view name) const {
  return static_cast<std::size_t>(
      std::count_if(items_.begin(), items_.end(), [&](const Item& it) { return iequals(it.first, name); }));
}

std::size_t Headers::remove(std::string_view name) {
  return remove_if([&](const std::string& k, const std::string&) { return iequals(k, name); });
}

std::size_t Headers::wire_size() const {
  std::size_t n = 0;
  for (const auto& [k, v] : items_) n += k.size() + 2 + v.size() + 2;
  return n;
}

namespace {

void append_headers(std::string& out, const Headers& h) {
  for (const auto& [k, v] : h.items()) {
    out += k;
    out += ": ";
    out += v;
    out += "\r\n";
  }
  out += "\r\n";
}

std::vector<std::string_view> split_lines(std::string_view block) {
  std::vector<std::string_view> lines;
  while (!block.empty()) {
    auto pos = block.find('\n');
    std::string_view line = block.substr(0, pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (pos == std::string_view::npos) break;
    block.remove_prefix(pos + 1);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

bool is_token_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || std::strchr("!#$%&'*+-.^_`|~", c) != nullptr;
}

Headers parse_header_lines(const std::vector<std::string_view>& lines) {
  Headers h;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto line = lines[i];
    auto colon = line.find(':');
    if (colon == std::string_view::npos || colon == 0) throw ParseError("malformed header line");
    auto name = line.substr(0, colon);
    if (!std::all_of(name.begin(), name.end(), is_token_char)) throw ParseError("invalid header name");
    h.add(std::string(name), std::string(trim(line.substr(colon + 1))));
  }
  return h;
}

}  // namespace

std::string RequestHead::serialize() const {
  std::string out = method + " " + target + " " + version + "\r\n";
  append_headers(out, headers);
  return out;
}

std::string RequestHead::path() const {
  auto q = target.find('?');
  return target.substr(0, q);
}

std::string RequestHead::query() const {
  auto q = target.find('?');
  return q == std::string::npos ? std::string() : target.substr(q + 1);
}

std::string ResponseHead::serialize() const {
  std::string out = version + " " + std::to_string(status) + " " +
                    (reason.empty() ? std::string(status_text(status)) : reason) + "\r\n";
  append_headers(out, headers);
  return out;
}

RequestHead parse_request_head(std::string_view block) {
  auto lines = split_lines(block);
  if (lines.empty()) throw ParseError("empty request");
  auto first = lines[0];
  auto sp1 = first.find(' ');
  auto sp2 = first.rfind(' ');
  if (sp1 == std::string_view::npos || sp1 == sp2) throw ParseError("malformed request line");
  RequestHead r;
  r.method = std::string(first.substr(0, sp1));
  r.target = std::string(first.substr(sp1 + 1, sp2 - sp1 - 1));
  r.version = std::string(first.substr(sp2 + 1));
  if (r.method.empty() || !std::all_of(r.method.begin(), r.method.end(), is_token_char)) {
    throw ParseError("invalid method");
  }
  if (r.target.empty() || r.target.find(' ') != std::string::npos) throw ParseError("invalid target");
  if (r.version != "HTTP/1.1" && r.version != "HTTP/1.0") throw ParseError("unsupported version");
  r.headers = parse_header_lines(lines);
  return r;
}

ResponseHead parse_response_head(std::string_view block) {
  auto lines = split_lines(block);
  if (lines.empty()) throw ParseError("empty response");
  auto first = lines[0];
  auto sp1 = first.find(' ');
  if (sp1 == std::string_view::npos) throw ParseError("malformed status line");
  ResponseHead r;
  r.version = std::string(first.substr(0, sp1));
  auto rest = first.substr(sp1 + 1);
  auto sp2 = rest.find(' ');
  auto code = rest.substr(0, sp2);
  if (std::from_chars(code.data(), code.data() + code.size(), r.status).ec != std::errc{} || r.status < 100 ||
      r.status > 999) {
    throw ParseError("invalid status code");
  }
  if (sp2 != std::string_view::npos) r.reason = std::string(rest.substr(sp2 + 1));
  r.headers = parse_header_lines(lines);
  return r;
}

std::string_view status_text(int status) {
  switch (status) {
    case 200: return "OK";
    case 201: return "Created";
    case 204: return "No Content";
    case 302: return "Found";
    case 304: return "Not Modified";
    case 400: return "Bad Request";
    case 401: return "Unauthorized";
    case 403: return "Forbidden";
    case 404: return "Not Found";
    case 405: return "Method Not Allowed";
    case 413: return "Payload Too Large";
    case 421: return "Misdirected Request";
    case 422: return "Unprocessable Entity";
    case 431: return "Request Header Fields Too Large";
    case 500: return "Internal Server Error";
    case 502: return "Bad Gateway";
    case 503: return "Service Unavailable";
    case 504: return "Gateway Timeout";
    default: return "Status";
  }
}

bool Reader::fill() {
  if (pos_ > 0) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  char tmp[16384];
  std::size_t n = stream_.read(tmp, sizeof tmp);
  if (n == 0) return false;
  buf_.append(tmp, n);
  return true;
}

std::optional<std::string> Reader::read_head(std::size_t max_bytes) {
  std::size_t scanned = 0;  // relative to pos_, survives compaction in fill()
  for (;;) {
    auto end = buf_.find("\r\n\r\n", pos_ + scanned);
    if (end != std::string::npos) {
      std::string head = buf_.substr(pos_, end + 4 - pos_);
      pos_ = end + 4;
      if (head.size() > max_bytes) throw HeadTooLarge();
      return head;
    }
    if (buf_.size() - pos_ > max_bytes) throw HeadTooLarge();
    scanned = buf_.size() - pos_ >= 3 ? buf_.size() - pos_ - 3 : 0;
    bool had_bytes = buf_.size() > pos_;
    if (!fill()) {
      if (!had_bytes) return std::nullopt;
      throw ParseError("connection closed inside header block");
    }
  }
}

std::size_t Reader::read_some(char* out, std::size_t n) {
  if (pos_ < buf_.size()) {
    std::size_t k = std::min(n, buf_.size() - pos_);
    std::memcpy(out, buf_.data() + pos_, k);
    pos_ += k;
    return k;
  }
  return stream_.read(out, n);
}

std::string Reader::read_line(std::size_t max_bytes) {
  for (;;) {
    auto nl = buf_.find("\r\n", pos_);
    if (nl != std::string::npos) {
      std::string line = buf_.substr(pos_, nl - pos_);
      pos_ = nl + 2;
      return line;
    }
    if (buf_.size() - pos_ > max_bytes) throw ParseError("line too long");
    if (!fill()) throw ParseError("unexpected EOF reading line");
  }
}

std::string Reader::read_exact(std::size_t n) {
  std::string out;
  out.reserve(n);
  char tmp[16384];
  while (out.size() < n) {
    std::size_t k = read_some(tmp, std::min(sizeof tmp, n - out.size()));
    if (k == 0) throw ParseError("unexpected EOF in body");
    out.append(tmp, k);
  }
  return out;
}

namespace {

std::uint64_t parse_length(const std::string& v) {
  std::uint64_t n = 0;
  auto t = trim(v);
  if (t.empty() || std::from_chars(t.data(), t.data() + t.size(), n).ec != std::errc{} ||
      std::from_chars(t.data(), t.data() + t.size(), n).ptr != t.data() + t.size()) {
    throw ParseError("invalid Content-Length");
  }
  return n;
}

bool is_chunked(const Headers& h) {
  auto te = h.get("Transfer-Encoding");
  return te && to_lower(*te).find("chunked") != std::string::npos;
}

std::uint64_t parse_chunk_size(const std::string& line) {
  auto semi = line.find(';');
  auto hex = trim(std::string_view(line).substr(0, semi));
  std::uint64_t n = 0;
  if (hex.empty() || std::from_chars(hex.data(), hex.data() + hex.size(), n, 16).ec != std::errc{}) {
    throw ParseError("invalid chunk size");
  }
  return n;
}

}  // namespace

Framing request_framing(const RequestHead& head) {
  if (is_chunked(head.headers)) return {BodyFraming::chunked, 0};
  auto cls = head.headers.get_all("Content-Length");
  if (!cls.empty()) {
    std::uint64_t n = parse_length(cls.front());
    for (const auto& c : cls) {
      if (parse_length(c) != n) throw ParseError("conflicting Content-Length");
    }
    return n == 0 ? Framing{BodyFraming::none, 0} : Framing{BodyFraming::length, n};
  }
  return {BodyFraming::none, 0};
}

Framing response_framing(const ResponseHead& head, std::string_view request_method) {
  if (request_method == "HEAD" || head.status / 100 == 1 || head.status == 204 || head.status == 304) {
    return {BodyFraming::none, 0};
  }
  if (is_chunked(head.headers)) return {BodyFraming::chunked, 0};
  if (auto cl = head.headers.get("Content-Length")) {
    std::uint64_t n = parse_length(*cl);
    return n == 0 ? Framing{BodyFraming::none, 0} : Framing{BodyFraming::length, n};
  }
  return {BodyFraming::until_close, 0};
}

std::uint64_t relay_body(Reader& in, const Framing& framing, net::Stream& out, std::size_t* peak_buffer) {
  constexpr std::size_t kChunk = 16384;
  char buf[kChunk];
  std::uint64_t total = 0;
  auto note_peak = [&](std::size_t n) {
    if (peak_buffer && n > *peak_buffer) *peak_buffer = n;
  };
  auto copy_exact = [&](std::uint64_t n) {
    while (n > 0) {
      std::size_t k = in.read_some(buf, static_cast<std::size_t>(std::min<std::uint64_t>(n, kChunk)));
      if (k == 0) throw ParseError("unexpected EOF in body");
      note_peak(k);
      out.write_all(std::string_view(buf, k));
      n -= k;
      total += k;
    }
  };
  switch (framing.kind) {
    case BodyFraming::none:
      break;
    case BodyFraming::length:
      copy_exact(framing.length);
      break;
    case BodyFraming::until_close:
      for (;;) {
        std::size_t k = in.read_some(buf, kChunk);
        if (k == 0) break;
        note_peak(k);
        out.write_all(std::string_view(buf, k));
        total += k;
      }
      break;
    case BodyFraming::chunked:
      for (;;) {
        std::string line = in.read_line(4096);
        std::uint64_t size = parse_chunk_size(line);
        out.write_all(line + "\r\n");
        if (size == 0) {
          // trailers, then the final blank line
          for (;;) {
            std::string t = in.read_line(8192);
            out.write_all(t + "\r\n");
            if (t.empty()) break;
          }
          break;
        }
        copy_exact(size);
        std::string crlf = in.read_line(2);
        if (!crlf.empty()) throw ParseError("missing chunk terminator");
        out.write_all("\r\n");
      }
      break;
  }
  return total;
}

std::string read_body(Reader& in, const Framing& framing, std::size_t max_bytes) {
  std::string body;
  char buf[16384];
  switch (framing.kind) {
    case BodyFraming::none:
      break;
    case BodyFraming::length:
      if (framing.length > max_bytes) throw ParseError("body too large");
      body = in.read_exact(static_cast<std::size_t>(framing.length));
      break;
    case BodyFraming::until_close:
      for (;;) {
        std::size_t k = in.read_some(buf, sizeof buf);
        if (k == 0) break;
        body.append(buf, k);
        if (body.size() > max_bytes) throw ParseError("body too large");
      }
      break;
    case BodyFraming::chunked:
      for (;;) {
        std::uint64_t size = parse_chunk_size(in.read_line(4096));
        if (size == 0) {
          while (!in.read_line(8192).empty()) {
          }
          break;
        }
        if (body.size() + size > max_bytes) throw ParseError("body too large");
        body += in.read_exact(static_cast<std::size_t>(size));
        if (!in.read_line(2).empty()) throw ParseError("missing chunk terminator");
      }
      break;
  }
  return body;
}

std::string url_encode(std::string_view s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 15]);
    }
  }
  return out;
}

std::string url_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '+') {
      out.push_back(' ');
    } else if (s[i] == '%' && i + 2 < s.size()) {
      int v = 0;
      auto r = std::from_chars(s.data() + i + 1, s.data() + i + 3, v, 16);
      if (r.ec != std::errc{} || r.ptr != s.data() + i + 3) throw ParseError("bad percent escape");
      out.push_back(static_cast<char>(v));
      i += 2;
    } else if (s[i] == '%') {
      throw ParseError("bad percent escape");
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

std::map<std::string, std::string> parse_query(std::string_view q) {
  std::map<std::string, std::string> out;
  while (!q.empty()) {
    auto amp = q.find('&');
    auto part = q.substr(0, amp);
    if (!part.empty()) {
      auto eq = part.find('=');
      std::string k = url_decode(part.substr(0, eq));
      std::string v = eq == std::string_view::npos ? std::string() : url_decode(part.substr(eq + 1));
      out.emplace(std::move(k), std::move(v));
    }
    if (amp == std::string_view::npos) break;
    q.remove_prefix(amp + 1);
  }
  return out;
}

std::string build_query(const std::vector<std::pair<std::string, std::string>>& params) {
  std::string out;
  for (const auto& [k, v] : params) {
    if (!out.empty()) out.push_back('&');
    out += url_encode(k) + "=" + url_encode(v);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_cookies(const Headers& h) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& line : h.get_all("Cookie")) {
    std::string_view rest(line);
    while (!rest.empty()) {
      auto semi = rest.find(';');
      auto part = trim(rest.substr(0, semi));
      if (!part.empty()) {
        auto eq = part.find('=');
        if (eq != std::string_view::npos) {
          out.emplace_back(std::string(trim(part.substr(0, eq))), std::string(trim(part.substr(eq + 1))));
        }
      }
      if (semi == std::string_view::npos) break;
      rest.remove_prefix(semi + 1);
    }
  }
  return out;
}

std::string Url::authority() const {
  const bool default_port = (scheme == "https" && port == 443) || (scheme == "http" && port == 80);
  return default_port ? host : host + ":" + std::to_string(port);
}

std::string Url::str() const { return scheme + "://" + authority() + target; }

Url parse_url(std::string_view url) {
  Url u;
  auto sep = url.find("://");
  if (sep == std::string_view::npos) throw ParseError("url without scheme");
  u.scheme = to_lower(url.substr(0, sep));
  url.remove_prefix(sep + 3);
  auto slash = url.find_first_of("/?");
  auto authority = url.substr(0, slash);
  u.target = slash == std::string_view::npos ? "/" : std::string(url.substr(slash));
  if (!u.target.empty() && u.target.front() == '?') u.target = "/" + u.target;
  auto colon = authority.rfind(':');
  if (colon != std::string_view::npos) {
    u.host = to_lower(authority.substr(0, colon));
    int p = 0;
    auto ps = authority.substr(colon + 1);
    if (std::from_chars(ps.data(), ps.data() + ps.size(), p).ec != std::errc{} || p <= 0 || p > 65535) {
      throw ParseError("bad port");
    }
    u.port = static_cast<std::uint16_t>(p);
  } else {
    u.host = to_lower(authority);
    u.port = u.scheme == "https" ? 443 : 80;
  }
  if (u.host.empty()) throw ParseError("url without host");
  return u;
}

}  // namespace zta::http
