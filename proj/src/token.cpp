#include "zta/token.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <json.hpp>

namespace zta::token {

using nlohmann::json;

std::string_view to_string(TokenError e) {
  switch (e) {
    case TokenError::bad_signature: return "bad_signature";
    case TokenError::expired: return "expired";
    case TokenError::wrong_audience: return "wrong_audience";
    case TokenError::wrong_issuer: return "wrong_issuer";
    case TokenError::unknown_kid: return "unknown_kid";
    case TokenError::malformed: return "malformed";
  }
  return "unknown";
}

TokenVerificationError::TokenVerificationError(TokenError code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)), code_(code) {}

IdentityClaims make_claims(const std::string& user_id, const std::string& host, TimePoint now,
                           std::vector<std::string> groups, Employment emp, const std::string& device_fingerprint,
                           const std::string& session_id, std::int64_t policy_version, std::int64_t ttl_seconds) {
  IdentityClaims c;
  c.sub = user_id;
  c.aud = host;
  c.iat = epoch_seconds(now);
  c.exp = c.iat + ttl_seconds;
  std::sort(groups.begin(), groups.end());
  c.grp = std::move(groups);
  c.emp = emp;
  c.dfp = device_fingerprint;
  c.sid = sha256_hex(session_id);
  c.pol = policy_version;
  return c;
}

SigningKeyPair SigningKeyPair::generate(std::string key_id, TimePoint created_at) {
  return SigningKeyPair{std::move(key_id), pki::PrivateKey::generate(), created_at};
}

SigningKeyPair SigningKeyPair::from_pem(std::string key_id, const std::string& pem, TimePoint created_at) {
  return SigningKeyPair{std::move(key_id), pki::PrivateKey::from_pem(pem), created_at};
}

namespace {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};
struct PkeyDeleter {
  void operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }
};

json claims_to_json(const IdentityClaims& c) {
  return json{{"iss", c.iss}, {"sub", c.sub}, {"aud", c.aud}, {"iat", c.iat}, {"exp", c.exp},
              {"grp", c.grp}, {"emp", to_string(c.emp)}, {"dfp", c.dfp}, {"sid", c.sid}, {"pol", c.pol}};
}

IdentityClaims claims_from_json(const json& j) {
  IdentityClaims c;
  c.iss = j.at("iss").get<std::string>();
  c.sub = j.at("sub").get<std::string>();
  c.aud = j.at("aud").get<std::string>();
  c.iat = j.at("iat").get<std::int64_t>();
  c.exp = j.at("exp").get<std::int64_t>();
  c.grp = j.at("grp").get<std::vector<std::string>>();
  c.emp = parse_employment(j.at("emp").get<std::string>());
  c.dfp = j.at("dfp").get<std::string>();
  c.sid = j.at("sid").get<std::string>();
  c.pol = j.at("pol").get<std::int64_t>();
  return c;
}

std::string sign(const pki::PrivateKey& key, std::string_view msg) {
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
  if (EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) != 1) {
    throw std::runtime_error("EVP_DigestSignInit failed");
  }
  std::size_t len = 0;
  auto* data = reinterpret_cast<const unsigned char*>(msg.data());
  if (EVP_DigestSign(ctx.get(), nullptr, &len, data, msg.size()) != 1) throw std::runtime_error("sign size failed");
  std::string sig(len, '\0');
  if (EVP_DigestSign(ctx.get(), reinterpret_cast<unsigned char*>(sig.data()), &len, data, msg.size()) != 1) {
    throw std::runtime_error("sign failed");
  }
  sig.resize(len);
  return sig;
}

bool verify_signature(const std::string& raw_public, std::string_view msg, const std::string& sig) {
  std::unique_ptr<EVP_PKEY, PkeyDeleter> pub(EVP_PKEY_new_raw_public_key(
      EVP_PKEY_ED25519, nullptr, reinterpret_cast<const unsigned char*>(raw_public.data()), raw_public.size()));
  if (!pub) return false;
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
  if (EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, pub.get()) != 1) return false;
  return EVP_DigestVerify(ctx.get(), reinterpret_cast<const unsigned char*>(sig.data()), sig.size(),
                          reinterpret_cast<const unsigned char*>(msg.data()), msg.size()) == 1;
}

}  // namespace

KeySet::KeySet(std::span<const SigningKeyPair> keys) {
  for (const auto& k : keys) add(k.key_id, k.public_raw());
}

KeySet KeySet::from_document(const std::string& text) {
  KeySet ks;
  json j = json::parse(text);
  for (auto it = j.begin(); it != j.end(); ++it) ks.add(it.key(), base64url_decode(it.value().get<std::string>()));
  return ks;
}

void KeySet::add(const std::string& kid, const std::string& raw_public) { keys_[kid] = raw_public; }

const std::string* KeySet::find(const std::string& kid) const {
  auto it = keys_.find(kid);
  return it == keys_.end() ? nullptr : &it->second;
}

std::string mint(IdentityClaims claims, const SigningKeyPair& keys) {
  std::sort(claims.grp.begin(), claims.grp.end());
  const std::string header = base64url_encode(json{{"alg", "EdDSA"}, {"kid", keys.key_id}}.dump());
  const std::string payload = base64url_encode(claims_to_json(claims).dump());
  std::string signing_input = header + "." + payload;
  const std::string sig = sign(keys.key, signing_input);
  return signing_input + "." + base64url_encode(sig);
}

IdentityClaims verify(std::string_view token, const KeySet& key_set, std::string_view expected_aud, TimePoint now) {
  auto d1 = token.find('.');
  auto d2 = d1 == std::string_view::npos ? d1 : token.find('.', d1 + 1);
  if (d1 == std::string_view::npos || d2 == std::string_view::npos || token.find('.', d2 + 1) != std::string_view::npos) {
    throw TokenVerificationError(TokenError::malformed, "expected three segments");
  }
  std::string header_json, payload_json, sig;
  json header;
  try {
    header_json = base64url_decode(token.substr(0, d1));
    payload_json = base64url_decode(token.substr(d1 + 1, d2 - d1 - 1));
    sig = base64url_decode(token.substr(d2 + 1));
    header = json::parse(header_json);
  } catch (const std::exception& e) {
    throw TokenVerificationError(TokenError::malformed, e.what());
  }
  if (!header.is_object() || !header.contains("kid") || !header["kid"].is_string() || header.value("alg", "") != "EdDSA") {
    throw TokenVerificationError(TokenError::malformed, "bad header");
  }
  const std::string* pub = key_set.find(header["kid"].get<std::string>());
  if (!pub) throw TokenVerificationError(TokenError::unknown_kid);
  if (!verify_signature(*pub, token.substr(0, d2), sig)) throw TokenVerificationError(TokenError::bad_signature);

  IdentityClaims claims;
  try {
    claims = claims_from_json(json::parse(payload_json));
  } catch (const std::exception& e) {
    throw TokenVerificationError(TokenError::malformed, e.what());
  }
  if (claims.iss != kIssuer) throw TokenVerificationError(TokenError::wrong_issuer);
  if (epoch_seconds(now) >= claims.exp) throw TokenVerificationError(TokenError::expired);
  if (claims.aud != expected_aud) throw TokenVerificationError(TokenError::wrong_audience);
  return claims;
}

std::string publish_keys(std::span<const SigningKeyPair> keys) {
  if (keys.empty()) throw ValidationError("publish_keys: empty key list");
  json doc = json::object();
  for (const auto& k : keys) {
    if (doc.contains(k.key_id)) throw ValidationError("publish_keys: duplicate key id " + k.key_id);
    doc[k.key_id] = base64url_encode(k.public_raw());
  }
  return doc.dump();
}

Keyring::Keyring(SigningKeyPair initial) {
  keys_.push_back(std::make_shared<const SigningKeyPair>(std::move(initial)));
}

void Keyring::rotate(SigningKeyPair next) {
  std::lock_guard lk(mu_);
  for (const auto& k : keys_) {
    if (k->key_id == next.key_id) throw ValidationError("rotate: key id already in use");
  }
  auto replacement = keys_;
  replacement.push_back(std::make_shared<const SigningKeyPair>(std::move(next)));
  while (replacement.size() > 2) replacement.erase(replacement.begin());
  keys_ = std::move(replacement);
}

std::string Keyring::mint(IdentityClaims claims) const {
  std::shared_ptr<const SigningKeyPair> newest;
  {
    std::lock_guard lk(mu_);
    newest = keys_.back();
  }
  return token::mint(std::move(claims), *newest);
}

std::string Keyring::published() const {
  std::lock_guard lk(mu_);
  json doc = json::object();
  for (const auto& k : keys_) doc[k->key_id] = base64url_encode(k->public_raw());
  return doc.dump();
}

KeySet Keyring::key_set() const {
  std::lock_guard lk(mu_);
  KeySet ks;
  for (const auto& k : keys_) ks.add(k->key_id, k->public_raw());
  return ks;
}

}  // namespace zta::token
