#include "zta/pki.hpp"

#include <openssl/bio.h>
#include <openssl/err.h>
#include <openssl/pem.h>
#include <openssl/x509v3.h>

#include <algorithm>
#include <filesystem>
#include <optional>
#include <fstream>

#include "zta/net.hpp"

namespace zta::pki {

namespace {

struct BioDeleter {
  void operator()(BIO* b) const { BIO_free(b); }
};
using BioPtr = std::unique_ptr<BIO, BioDeleter>;

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error(what + ": " + net::openssl_error_string()); }

std::string bio_to_string(BIO* bio) {
  char* data = nullptr;
  long len = BIO_get_mem_data(bio, &data);
  return std::string(data, static_cast<std::size_t>(len));
}

TimePoint asn1_to_time(const ASN1_TIME* t) {
  std::tm tm{};
  if (ASN1_TIME_to_tm(t, &tm) != 1) fail("ASN1_TIME_to_tm");
  return from_epoch_seconds(timegm(&tm));
}

std::string name_entry(X509_NAME* name, int nid) {
  int idx = X509_NAME_get_index_by_NID(name, nid, -1);
  if (idx < 0) return {};
  X509_NAME_ENTRY* e = X509_NAME_get_entry(name, idx);
  ASN1_STRING* s = X509_NAME_ENTRY_get_data(e);
  unsigned char* utf8 = nullptr;
  int len = ASN1_STRING_to_UTF8(&utf8, s);
  if (len < 0) return {};
  std::string out(reinterpret_cast<char*>(utf8), static_cast<std::size_t>(len));
  OPENSSL_free(utf8);
  return out;
}

void add_ext(X509* cert, X509* issuer, int nid, const char* value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value);
  if (!ext) fail("X509V3_EXT_conf_nid");
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

// Children never outlive the root: not_after is clamped to `cap` when given.
void set_validity(X509* cert, TimePoint start, int validity_days, std::optional<TimePoint> cap = std::nullopt) {
  std::time_t nb = static_cast<std::time_t>(epoch_seconds(start));
  std::time_t na = nb + static_cast<std::time_t>(validity_days) * 86400;
  if (cap) na = std::min<std::time_t>(na, static_cast<std::time_t>(epoch_seconds(*cap)));
  if (!ASN1_TIME_set(X509_getm_notBefore(cert), nb) || !ASN1_TIME_set(X509_getm_notAfter(cert), na)) {
    fail("ASN1_TIME_set");
  }
}

X509* new_cert(std::uint64_t serial, EVP_PKEY* subject_key) {
  X509* cert = X509_new();
  if (!cert) fail("X509_new");
  X509_set_version(cert, 2);
  ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert), serial);
  X509_set_pubkey(cert, subject_key);
  return cert;
}

}  // namespace

PrivateKey PrivateKey::generate() {
  EVP_PKEY* key = EVP_PKEY_Q_keygen(nullptr, nullptr, "ED25519");
  if (!key) fail("EVP_PKEY_Q_keygen");
  return PrivateKey(key);
}

PrivateKey PrivateKey::from_pem(const std::string& pem) {
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  EVP_PKEY* key = PEM_read_bio_PrivateKey(bio.get(), nullptr, nullptr, nullptr);
  if (!key) fail("PEM_read_bio_PrivateKey");
  return PrivateKey(key);
}

std::string PrivateKey::to_pem() const {
  BioPtr bio(BIO_new(BIO_s_mem()));
  if (PEM_write_bio_PrivateKey(bio.get(), key_.get(), nullptr, nullptr, 0, nullptr, nullptr) != 1) {
    fail("PEM_write_bio_PrivateKey");
  }
  return bio_to_string(bio.get());
}

std::string PrivateKey::raw_public() const {
  std::size_t len = 0;
  if (EVP_PKEY_get_raw_public_key(key_.get(), nullptr, &len) != 1) fail("EVP_PKEY_get_raw_public_key");
  std::string out(len, '\0');
  EVP_PKEY_get_raw_public_key(key_.get(), reinterpret_cast<unsigned char*>(out.data()), &len);
  return out;
}

Certificate::Certificate(const Certificate& o) : cert_(o.cert_ ? X509_dup(o.cert_.get()) : nullptr) {}

Certificate& Certificate::operator=(const Certificate& o) {
  if (this != &o) cert_.reset(o.cert_ ? X509_dup(o.cert_.get()) : nullptr);
  return *this;
}

Certificate Certificate::from_pem(const std::string& pem) {
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  X509* c = PEM_read_bio_X509(bio.get(), nullptr, nullptr, nullptr);
  if (!c) fail("PEM_read_bio_X509");
  return Certificate(c);
}

Certificate Certificate::from_der(std::span<const std::uint8_t> der) {
  const unsigned char* p = der.data();
  X509* c = d2i_X509(nullptr, &p, static_cast<long>(der.size()));
  if (!c) fail("d2i_X509");
  return Certificate(c);
}

std::vector<Certificate> Certificate::chain_from_pem(const std::string& pem) {
  BioPtr bio(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
  std::vector<Certificate> out;
  while (X509* c = PEM_read_bio_X509(bio.get(), nullptr, nullptr, nullptr)) out.emplace_back(c);
  ERR_clear_error();
  return out;
}

std::string Certificate::to_pem() const {
  BioPtr bio(BIO_new(BIO_s_mem()));
  if (PEM_write_bio_X509(bio.get(), cert_.get()) != 1) fail("PEM_write_bio_X509");
  return bio_to_string(bio.get());
}

std::vector<std::uint8_t> Certificate::der() const {
  unsigned char* buf = nullptr;
  int len = i2d_X509(cert_.get(), &buf);
  if (len <= 0) fail("i2d_X509");
  std::vector<std::uint8_t> out(buf, buf + len);
  OPENSSL_free(buf);
  return out;
}

TimePoint Certificate::not_before() const { return asn1_to_time(X509_get0_notBefore(cert_.get())); }
TimePoint Certificate::not_after() const { return asn1_to_time(X509_get0_notAfter(cert_.get())); }
std::string Certificate::common_name() const { return name_entry(X509_get_subject_name(cert_.get()), NID_commonName); }
std::string Certificate::organizational_unit() const {
  return name_entry(X509_get_subject_name(cert_.get()), NID_organizationalUnitName);
}

std::uint64_t Certificate::serial() const {
  std::uint64_t v = 0;
  if (ASN1_INTEGER_get_uint64(&v, X509_get0_serialNumber(cert_.get())) != 1) fail("serial");
  return v;
}

DeviceCertificate describe_device(const Certificate& cert) {
  DeviceCertificate d;
  d.fingerprint = fingerprint_of(cert.der());
  d.subject_cn = cert.common_name();
  d.device_id = d.subject_cn;
  d.managed = cert.organizational_unit() != "unmanaged";
  d.not_before = cert.not_before();
  d.not_after = cert.not_after();
  d.serial = cert.serial();
  return d;
}

std::string fingerprint_of(std::span<const std::uint8_t> der) {
  if (der.empty()) throw ValidationError("fingerprint_of: empty input");
  auto digest = sha256(der);
  return to_hex(digest);
}

CertificateAuthority::CertificateAuthority(CertificateAuthority&& o) noexcept
    : root_key_(std::move(o.root_key_)),
      root_cert_(std::move(o.root_cert_)),
      next_serial_(o.next_serial_),
      last_issued_(o.last_issued_) {}

CertificateAuthority CertificateAuthority::create(int validity_days, const Clock& clock) {
  if (validity_days < 1) throw ValidationError("ca_init: validity_days must be >= 1");
  CertificateAuthority ca;
  ca.root_key_ = PrivateKey::generate();
  // Serial 1 is the root; children start at 2.
  X509* cert = new_cert(1, ca.root_key_.get());
  ca.root_cert_ = Certificate(cert);
  set_validity(cert, clock.now(), validity_days);
  X509_NAME* name = X509_get_subject_name(cert);
  X509_NAME_add_entry_by_txt(name, "O", MBSTRING_ASC, reinterpret_cast<const unsigned char*>("zta"), -1, -1, 0);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>("zta device root"),
                             -1, -1, 0);
  X509_set_issuer_name(cert, name);
  add_ext(cert, cert, NID_basic_constraints, "critical,CA:TRUE");
  add_ext(cert, cert, NID_key_usage, "critical,keyCertSign,cRLSign");
  add_ext(cert, cert, NID_subject_key_identifier, "hash");
  if (X509_sign(cert, ca.root_key_.get(), nullptr) <= 0) fail("X509_sign root");
  ca.next_serial_ = 2;
  ca.last_issued_ = 1;
  return ca;
}

std::uint64_t CertificateAuthority::next_serial() const {
  std::lock_guard lk(mu_);
  return next_serial_;
}

std::uint64_t CertificateAuthority::take_serial(const Clock& clock, int validity_days) {
  if (validity_days < 1) throw ValidationError("validity_days must be >= 1");
  auto now = clock.now();
  if (now < root_cert_.not_before() || now > root_cert_.not_after()) {
    throw ValidationError("CA root certificate is not valid at issuance time");
  }
  std::uint64_t serial = next_serial_++;
  if (serial <= last_issued_) throw std::logic_error("duplicate certificate serial");
  last_issued_ = serial;
  return serial;
}

IssuedDevice CertificateAuthority::issue_device_cert(const std::string& device_id, bool managed, int validity_days,
                                                     const Clock& clock) {
  if (device_id.empty()) throw ValidationError("issue_device_cert: empty device_id");
  std::lock_guard lk(mu_);
  std::uint64_t serial = take_serial(clock, validity_days);
  IssuedDevice out;
  out.key = PrivateKey::generate();
  X509* cert = new_cert(serial, out.key.get());
  out.cert = Certificate(cert);
  set_validity(cert, clock.now(), validity_days, root_cert_.not_after());
  X509_NAME* name = X509_get_subject_name(cert);
  X509_NAME_add_entry_by_txt(name, "O", MBSTRING_ASC, reinterpret_cast<const unsigned char*>("zta"), -1, -1, 0);
  const char* ou = managed ? "managed" : "unmanaged";
  X509_NAME_add_entry_by_txt(name, "OU", MBSTRING_ASC, reinterpret_cast<const unsigned char*>(ou), -1, -1, 0);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_UTF8, reinterpret_cast<const unsigned char*>(device_id.c_str()),
                             -1, -1, 0);
  X509_set_issuer_name(cert, X509_get_subject_name(root_cert_.get()));
  add_ext(cert, root_cert_.get(), NID_basic_constraints, "critical,CA:FALSE");
  add_ext(cert, root_cert_.get(), NID_key_usage, "critical,digitalSignature");
  add_ext(cert, root_cert_.get(), NID_ext_key_usage, "clientAuth");
  add_ext(cert, root_cert_.get(), NID_authority_key_identifier, "keyid:always");
  if (X509_sign(cert, root_key_.get(), nullptr) <= 0) fail("X509_sign device");
  out.info = describe_device(out.cert);
  return out;
}

IssuedServer CertificateAuthority::issue_server_cert(const std::vector<std::string>& dns_names, int validity_days,
                                                     const Clock& clock) {
  if (dns_names.empty()) throw ValidationError("issue_server_cert: no DNS names");
  std::lock_guard lk(mu_);
  std::uint64_t serial = take_serial(clock, validity_days);
  IssuedServer out;
  out.key = PrivateKey::generate();
  X509* cert = new_cert(serial, out.key.get());
  out.cert = Certificate(cert);
  set_validity(cert, clock.now(), validity_days, root_cert_.not_after());
  X509_NAME* name = X509_get_subject_name(cert);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC, reinterpret_cast<const unsigned char*>(dns_names[0].c_str()),
                             -1, -1, 0);
  X509_set_issuer_name(cert, X509_get_subject_name(root_cert_.get()));
  std::string san;
  for (const auto& n : dns_names) san += (san.empty() ? "DNS:" : ",DNS:") + n;
  add_ext(cert, root_cert_.get(), NID_basic_constraints, "critical,CA:FALSE");
  add_ext(cert, root_cert_.get(), NID_key_usage, "critical,digitalSignature");
  add_ext(cert, root_cert_.get(), NID_ext_key_usage, "serverAuth");
  add_ext(cert, root_cert_.get(), NID_subject_alt_name, san.c_str());
  if (X509_sign(cert, root_key_.get(), nullptr) <= 0) fail("X509_sign server");
  return out;
}

void CertificateAuthority::save(const std::string& dir) const {
  std::lock_guard lk(mu_);
  std::filesystem::create_directories(dir);
  write_pem(dir + "/ca.key.pem", root_key_.to_pem(), true);
  write_pem(dir + "/ca.cert.pem", root_cert_.to_pem(), false);
  write_file_atomic(dir + "/serial", std::to_string(next_serial_) + "\n");
}

CertificateAuthority CertificateAuthority::load(const std::string& dir) {
  CertificateAuthority ca;
  ca.root_key_ = PrivateKey::from_pem(read_file(dir + "/ca.key.pem"));
  ca.root_cert_ = Certificate::from_pem(read_file(dir + "/ca.cert.pem"));
  ca.next_serial_ = std::stoull(read_file(dir + "/serial"));
  ca.last_issued_ = ca.next_serial_ - 1;
  return ca;
}

RevocationList RevocationList::revoke(const std::string& fingerprint, const std::string& reason, TimePoint at) const {
  if (!is_fingerprint(fingerprint)) throw ValidationError("revoke: malformed fingerprint");
  RevocationList out = *this;
  out.entries_.try_emplace(fingerprint, RevocationEntry{fingerprint, at, reason});
  return out;
}

std::vector<RevocationEntry> RevocationList::entries() const {
  std::vector<RevocationEntry> out;
  for (const auto& [_, e] : entries_) out.push_back(e);
  return out;
}

void write_pem(const std::string& path, const std::string& pem, bool private_key) {
  write_file_atomic(path, pem, private_key);
}

}  // namespace zta::pki
