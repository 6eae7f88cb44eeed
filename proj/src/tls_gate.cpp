#include "zta/tls_gate.hpp"

#include <openssl/err.h>
#include <openssl/x509v3.h>

#include <variant>

namespace zta::tls {

std::string_view to_string(CertError e) {
  switch (e) {
    case CertError::untrusted_issuer: return "untrusted_issuer";
    case CertError::expired_cert: return "expired_cert";
    case CertError::not_yet_valid: return "not_yet_valid";
    case CertError::wrong_key_usage: return "wrong_key_usage";
  }
  return "unknown";
}

std::string_view to_string(HandshakeFailure f) {
  switch (f) {
    case HandshakeFailure::none: return "none";
    case HandshakeFailure::no_client_cert: return "handshake_no_client_cert";
    case HandshakeFailure::bad_cert: return "handshake_bad_cert";
    case HandshakeFailure::protocol: return "handshake_protocol_error";
  }
  return "unknown";
}

CertValidationError::CertValidationError(CertError code)
    : std::runtime_error(std::string(to_string(code))), code_(code) {}

namespace {

struct StoreDeleter {
  void operator()(X509_STORE* s) const { X509_STORE_free(s); }
};
struct StoreCtxDeleter {
  void operator()(X509_STORE_CTX* s) const { X509_STORE_CTX_free(s); }
};
struct StackDeleter {
  void operator()(STACK_OF(X509) * s) const { sk_X509_free(s); }
};

CertError map_verify_error(int err) {
  switch (err) {
    case X509_V_ERR_CERT_HAS_EXPIRED:
      return CertError::expired_cert;
    case X509_V_ERR_CERT_NOT_YET_VALID:
      return CertError::not_yet_valid;
    default:
      return CertError::untrusted_issuer;
  }
}

/// Per-handshake scratch shared with the verify callback through ex_data.
struct HandshakeState {
  std::optional<TlsClientInfo> info;
  std::optional<CertError> error;
  std::string fingerprint;
  std::string peer_ip;
};

int handshake_state_index() {
  static const int idx = SSL_get_ex_new_index(0, nullptr, nullptr, nullptr, nullptr);
  return idx;
}

}  // namespace

TlsClientInfo validate_client_cert(std::span<const pki::Certificate> chain, const pki::Certificate& trust_root,
                                   TimePoint now, const std::string& peer_ip) {
  if (chain.empty()) throw ValidationError("validate_client_cert: empty chain");
  std::unique_ptr<X509_STORE, StoreDeleter> store(X509_STORE_new());
  X509_STORE_add_cert(store.get(), trust_root.get());
  std::unique_ptr<STACK_OF(X509), StackDeleter> untrusted(sk_X509_new_null());
  for (std::size_t i = 1; i < chain.size(); ++i) sk_X509_push(untrusted.get(), chain[i].get());

  std::unique_ptr<X509_STORE_CTX, StoreCtxDeleter> ctx(X509_STORE_CTX_new());
  if (X509_STORE_CTX_init(ctx.get(), store.get(), chain[0].get(), untrusted.get()) != 1) {
    throw std::runtime_error("X509_STORE_CTX_init failed");
  }
  // OpenSSL treats now == notAfter as expired; the window here is inclusive,
  // so time is checked below instead.
  X509_STORE_CTX_set_flags(ctx.get(), X509_V_FLAG_NO_CHECK_TIME);
  if (X509_verify_cert(ctx.get()) != 1) {
    int err = X509_STORE_CTX_get_error(ctx.get());
    ERR_clear_error();
    throw CertValidationError(map_verify_error(err));
  }
  auto check_window = [now](const pki::Certificate& c) {
    if (now < c.not_before()) throw CertValidationError(CertError::not_yet_valid);
    if (now > c.not_after()) throw CertValidationError(CertError::expired_cert);
  };
  for (const auto& c : chain) check_window(c);
  check_window(trust_root);
  X509* leaf = chain[0].get();
  if ((X509_get_extension_flags(leaf) & EXFLAG_XKUSAGE) == 0 ||
      (X509_get_extended_key_usage(leaf) & XKU_SSL_CLIENT) == 0) {
    throw CertValidationError(CertError::wrong_key_usage);
  }
  TlsClientInfo info;
  info.fingerprint = pki::fingerprint_of(chain[0].der());
  info.subject_cn = chain[0].common_name();
  info.validated_at = now;
  info.peer_ip = peer_ip;
  return info;
}

TlsGate::TlsGate(const TlsServerConfig& cfg, std::shared_ptr<const Clock> clock) : clock_(std::move(clock)) {
  trust_root_ = pki::Certificate::from_pem(read_file(cfg.trust_root_pem_path));
  ctx_.reset(SSL_CTX_new(TLS_server_method()));
  if (!ctx_) throw net::NetError("SSL_CTX_new: " + net::openssl_error_string());
  SSL_CTX_set_min_proto_version(ctx_.get(), TLS1_2_VERSION);
  if (SSL_CTX_use_certificate_chain_file(ctx_.get(), cfg.cert_pem_path.c_str()) != 1 ||
      SSL_CTX_use_PrivateKey_file(ctx_.get(), cfg.key_pem_path.c_str(), SSL_FILETYPE_PEM) != 1) {
    throw net::NetError("load gateway certificate: " + net::openssl_error_string());
  }
  STACK_OF(X509_NAME)* names = sk_X509_NAME_new_null();
  sk_X509_NAME_push(names, X509_NAME_dup(X509_get_subject_name(trust_root_.get())));
  SSL_CTX_set_client_CA_list(ctx_.get(), names);
  SSL_CTX_set_verify(ctx_.get(), SSL_VERIFY_PEER | SSL_VERIFY_FAIL_IF_NO_PEER_CERT, nullptr);
  SSL_CTX_set_cert_verify_callback(ctx_.get(), &TlsGate::verify_callback, this);
  // Every connection runs the full client-certificate check.
  SSL_CTX_set_session_cache_mode(ctx_.get(), SSL_SESS_CACHE_OFF);
  SSL_CTX_set_options(ctx_.get(), SSL_OP_NO_TICKET);
  SSL_CTX_set_num_tickets(ctx_.get(), 0);
}

TlsGate::~TlsGate() = default;

int TlsGate::verify_callback(X509_STORE_CTX* store_ctx, void* arg) {
  auto* self = static_cast<TlsGate*>(arg);
  SSL* ssl = static_cast<SSL*>(X509_STORE_CTX_get_ex_data(store_ctx, SSL_get_ex_data_X509_STORE_CTX_idx()));
  auto* state = static_cast<HandshakeState*>(SSL_get_ex_data(ssl, handshake_state_index()));
  X509* leaf = X509_STORE_CTX_get0_cert(store_ctx);
  if (!leaf || !state) return 0;

  std::vector<pki::Certificate> chain;
  X509_up_ref(leaf);
  chain.emplace_back(leaf);
  if (STACK_OF(X509)* rest = X509_STORE_CTX_get0_untrusted(store_ctx)) {
    for (int i = 0; i < sk_X509_num(rest); ++i) {
      X509* c = sk_X509_value(rest, i);
      if (X509_cmp(c, leaf) == 0) continue;
      X509_up_ref(c);
      chain.emplace_back(c);
    }
  }
  try {
    state->fingerprint = pki::fingerprint_of(chain[0].der());
    state->info = validate_client_cert(chain, self->trust_root_, self->clock_->now(), state->peer_ip);
    return 1;
  } catch (const CertValidationError& e) {
    state->error = e.code();
    X509_STORE_CTX_set_error(store_ctx, e.code() == CertError::expired_cert     ? X509_V_ERR_CERT_HAS_EXPIRED
                                        : e.code() == CertError::not_yet_valid  ? X509_V_ERR_CERT_NOT_YET_VALID
                                        : e.code() == CertError::wrong_key_usage ? X509_V_ERR_INVALID_PURPOSE
                                                                                 : X509_V_ERR_CERT_UNTRUSTED);
    return 0;
  } catch (const std::exception&) {
    state->error = CertError::untrusted_issuer;
    return 0;
  }
}

std::variant<TlsGate::Accepted, TlsGate::Refused> TlsGate::accept_connection(net::Socket sock,
                                                                             const std::string& peer_ip) {
  sock.set_timeouts(std::chrono::seconds(10), std::chrono::seconds(10));
  net::SslPtr ssl(SSL_new(ctx_.get()));
  if (!ssl) {
    counters_.protocol++;
    return Refused{HandshakeFailure::protocol, std::nullopt, {}, "SSL_new failed"};
  }
  HandshakeState state;
  state.peer_ip = peer_ip;
  SSL_set_ex_data(ssl.get(), handshake_state_index(), &state);
  SSL_set_fd(ssl.get(), sock.fd());
  ERR_clear_error();
  int rc = SSL_accept(ssl.get());
  SSL_set_ex_data(ssl.get(), handshake_state_index(), nullptr);
  if (rc != 1 || !state.info) {
    Refused r;
    bool peer_sent_no_cert = false;
    for (unsigned long e; (e = ERR_peek_error()) != 0;) {
      if (ERR_GET_REASON(e) == SSL_R_PEER_DID_NOT_RETURN_A_CERTIFICATE) peer_sent_no_cert = true;
      char buf[256];
      ERR_error_string_n(ERR_get_error(), buf, sizeof buf);
      r.detail += r.detail.empty() ? buf : std::string("; ") + buf;
    }
    r.fingerprint = state.fingerprint;
    if (state.error) {
      r.failure = HandshakeFailure::bad_cert;
      r.cert_error = state.error;
      counters_.bad_cert++;
    } else if (state.fingerprint.empty() && peer_sent_no_cert) {
      r.failure = HandshakeFailure::no_client_cert;
      counters_.no_client_cert++;
    } else {
      r.failure = HandshakeFailure::protocol;
      counters_.protocol++;
    }
    net::linger_close(sock.fd(), std::chrono::milliseconds(500));
    return r;
  }
  counters_.accepted++;
  Accepted a;
  a.client = *state.info;
  a.stream = std::make_unique<net::TlsStream>(std::move(sock), std::move(ssl));
  return a;
}

}  // namespace zta::tls
