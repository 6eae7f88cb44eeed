#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zta/common.hpp"
#include "zta/pki.hpp"

namespace zta::token {

inline constexpr std::string_view kIssuer = "zta-gateway";
inline constexpr std::string_view kHeaderName = "X-ZTA-Identity";
inline constexpr std::string_view kKeySetPath = "/.zta/keys";
inline constexpr std::int64_t kDefaultTtlSeconds = 300;

/// Claim set carried downstream in the identity header.
struct IdentityClaims {
  std::string iss{kIssuer};
  std::string sub;
  std::string aud;
  std::int64_t iat = 0;
  std::int64_t exp = 0;
  std::vector<std::string> grp;
  Employment emp = Employment::fte;
  std::string dfp;
  std::string sid;
  std::int64_t pol = 0;

  bool operator==(const IdentityClaims&) const = default;
};

/// Builds claims for one forwarded request; grp is sorted and sid hashed.
IdentityClaims make_claims(const std::string& user_id, const std::string& host, TimePoint now,
                           std::vector<std::string> groups, Employment emp, const std::string& device_fingerprint,
                           const std::string& session_id, std::int64_t policy_version,
                           std::int64_t ttl_seconds = kDefaultTtlSeconds);

struct SigningKeyPair {
  std::string key_id;
  pki::PrivateKey key;
  TimePoint created_at;

  static SigningKeyPair generate(std::string key_id, TimePoint created_at);
  static SigningKeyPair from_pem(std::string key_id, const std::string& pem, TimePoint created_at);
  std::string public_raw() const { return key.raw_public(); }
};

enum class TokenError { bad_signature, expired, wrong_audience, wrong_issuer, unknown_kid, malformed };

std::string_view to_string(TokenError e);

class TokenVerificationError : public std::runtime_error {
 public:
  explicit TokenVerificationError(TokenError code, const std::string& detail = {});
  TokenError code() const { return code_; }

 private:
  TokenError code_;
};

/// Public verification keys indexed by key id.
class KeySet {
 public:
  KeySet() = default;
  explicit KeySet(std::span<const SigningKeyPair> keys);
  /// Parses a document produced by publish_keys().
  static KeySet from_document(const std::string& json);

  void add(const std::string& kid, const std::string& raw_public);
  const std::string* find(const std::string& kid) const;
  std::size_t size() const { return keys_.size(); }

 private:
  std::map<std::string, std::string> keys_;
};

/// header.payload.signature, each base64url; header = {"alg":"EdDSA","kid":...}.
/// Ed25519 is deterministic, so equal claims and key give equal tokens.
std::string mint(IdentityClaims claims, const SigningKeyPair& keys);

/// Checks signature (by kid), issuer, expiry (valid while now < exp) and audience.
IdentityClaims verify(std::string_view token, const KeySet& key_set, std::string_view expected_aud, TimePoint now);

/// JSON object kid -> base64url raw public key; byte-stable for equal input.
std::string publish_keys(std::span<const SigningKeyPair> keys);

/// Holds at most two keys (previous + current); mint always uses the newest.
class Keyring {
 public:
  explicit Keyring(SigningKeyPair initial);
  void rotate(SigningKeyPair next);
  std::string mint(IdentityClaims claims) const;
  std::string published() const;
  KeySet key_set() const;

 private:
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<const SigningKeyPair>> keys_;  // oldest first
};

}  // namespace zta::token
