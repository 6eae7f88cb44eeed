#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>

#include "zta/common.hpp"
#include "zta/net.hpp"
#include "zta/pki.hpp"

namespace zta::tls {

/// Identity of the device on the other end of an established connection.
struct TlsClientInfo {
  std::string fingerprint;
  std::string subject_cn;
  TimePoint validated_at;
  std::string peer_ip;
};

enum class CertError { untrusted_issuer, expired_cert, not_yet_valid, wrong_key_usage };

std::string_view to_string(CertError e);

class CertValidationError : public std::runtime_error {
 public:
  explicit CertValidationError(CertError code);
  CertError code() const { return code_; }

 private:
  CertError code_;
};

/// Pure check of a presented chain (leaf first) against one trust root at
/// `now`: chain, validity window (inclusive) and clientAuth usage.
/// Revocation is a policy-layer concern and is not consulted here.
TlsClientInfo validate_client_cert(std::span<const pki::Certificate> chain, const pki::Certificate& trust_root,
                                   TimePoint now, const std::string& peer_ip = {});

/// Why a handshake was refused; exposed for logging and counters.
enum class HandshakeFailure { none, no_client_cert, bad_cert, protocol };

std::string_view to_string(HandshakeFailure f);

struct HandshakeCounters {
  std::atomic<std::uint64_t> accepted{0};
  std::atomic<std::uint64_t> no_client_cert{0};
  std::atomic<std::uint64_t> bad_cert{0};
  std::atomic<std::uint64_t> protocol{0};
};

struct TlsServerConfig {
  std::string cert_pem_path;
  std::string key_pem_path;
  std::string trust_root_pem_path;
};

/// Server-side TLS context that demands a client certificate and runs
/// validate_client_cert inside the handshake with an injected clock.
class TlsGate {
 public:
  TlsGate(const TlsServerConfig& cfg, std::shared_ptr<const Clock> clock);
  ~TlsGate();
  TlsGate(const TlsGate&) = delete;
  TlsGate& operator=(const TlsGate&) = delete;

  struct Accepted {
    std::unique_ptr<net::TlsStream> stream;
    TlsClientInfo client;
  };

  struct Refused {
    HandshakeFailure failure = HandshakeFailure::protocol;
    std::optional<CertError> cert_error;
    std::string fingerprint;  // when a certificate was presented
    std::string detail;
  };

  /// Runs the server handshake on an accepted socket. On success every
  /// returned connection carries a validated TlsClientInfo.
  std::variant<Accepted, Refused> accept_connection(net::Socket sock, const std::string& peer_ip);

  const HandshakeCounters& counters() const { return counters_; }
  const pki::Certificate& trust_root() const { return trust_root_; }

 private:
  static int verify_callback(X509_STORE_CTX* store_ctx, void* arg);

  net::SslCtxPtr ctx_;
  pki::Certificate trust_root_;
  std::shared_ptr<const Clock> clock_;
  HandshakeCounters counters_;
};

}  // namespace zta::tls
