#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <openssl/evp.h>
#include <openssl/x509.h>

#include "zta/common.hpp"

namespace zta::pki {

struct PkeyDeleter {
  void operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }
};
struct X509Deleter {
  void operator()(X509* c) const { X509_free(c); }
};

/// Ed25519 private key.
class PrivateKey {
 public:
  PrivateKey() = default;
  explicit PrivateKey(EVP_PKEY* k) : key_(k) {}
  static PrivateKey generate();
  static PrivateKey from_pem(const std::string& pem);

  EVP_PKEY* get() const { return key_.get(); }
  explicit operator bool() const { return static_cast<bool>(key_); }
  std::string to_pem() const;
  /// Raw 32-byte public key.
  std::string raw_public() const;

 private:
  std::unique_ptr<EVP_PKEY, PkeyDeleter> key_;
};

class Certificate {
 public:
  Certificate() = default;
  explicit Certificate(X509* c) : cert_(c) {}
  Certificate(const Certificate& o);
  Certificate& operator=(const Certificate& o);
  Certificate(Certificate&&) noexcept = default;
  Certificate& operator=(Certificate&&) noexcept = default;

  static Certificate from_pem(const std::string& pem);
  static Certificate from_der(std::span<const std::uint8_t> der);
  /// Parses every certificate in a PEM bundle.
  static std::vector<Certificate> chain_from_pem(const std::string& pem);

  X509* get() const { return cert_.get(); }
  explicit operator bool() const { return static_cast<bool>(cert_); }
  std::string to_pem() const;
  std::vector<std::uint8_t> der() const;
  TimePoint not_before() const;
  TimePoint not_after() const;
  std::string common_name() const;
  std::string organizational_unit() const;
  std::uint64_t serial() const;

 private:
  std::unique_ptr<X509, X509Deleter> cert_;
};

/// Device identity extracted from an issued certificate.
struct DeviceCertificate {
  std::string fingerprint;
  std::string subject_cn;
  std::string device_id;
  bool managed = true;
  TimePoint not_before;
  TimePoint not_after;
  std::uint64_t serial = 0;
};

DeviceCertificate describe_device(const Certificate& cert);

struct IssuedDevice {
  DeviceCertificate info;
  Certificate cert;
  PrivateKey key;
};

struct IssuedServer {
  Certificate cert;
  PrivateKey key;
};

/// Single-root CA. Issuance is serialized; serials increase strictly.
class CertificateAuthority {
 public:
  static CertificateAuthority create(int validity_days, const Clock& clock);
  /// Loads ca.key.pem, ca.cert.pem and the serial counter from `dir`.
  static CertificateAuthority load(const std::string& dir);
  void save(const std::string& dir) const;

  IssuedDevice issue_device_cert(const std::string& device_id, bool managed, int validity_days,
                                 const Clock& clock);
  /// serverAuth certificate with DNS subjectAltNames; used by the gateway listener.
  IssuedServer issue_server_cert(const std::vector<std::string>& dns_names, int validity_days, const Clock& clock);

  const Certificate& root_cert() const { return root_cert_; }
  std::uint64_t next_serial() const;

  CertificateAuthority(CertificateAuthority&& o) noexcept;
  CertificateAuthority& operator=(CertificateAuthority&&) = delete;

 private:
  CertificateAuthority() = default;
  std::uint64_t take_serial(const Clock& clock, int validity_days);

  PrivateKey root_key_;
  Certificate root_cert_;
  std::uint64_t next_serial_ = 1;
  std::uint64_t last_issued_ = 0;
  mutable std::mutex mu_;
};

/// SHA-256 of the DER bytes as 64 lowercase hex characters.
std::string fingerprint_of(std::span<const std::uint8_t> der);

struct RevocationEntry {
  std::string fingerprint;
  TimePoint revoked_at;
  std::string reason;
};

/// Immutable set of revoked fingerprints; revoke() returns a new value.
class RevocationList {
 public:
  RevocationList revoke(const std::string& fingerprint, const std::string& reason, TimePoint at) const;
  bool contains(const std::string& fingerprint) const { return entries_.contains(fingerprint); }
  std::size_t size() const { return entries_.size(); }
  std::vector<RevocationEntry> entries() const;

 private:
  std::map<std::string, RevocationEntry> entries_;
};

/// Writes PEM text; private keys get mode 0600.
void write_pem(const std::string& path, const std::string& pem, bool private_key);

}  // namespace zta::pki
