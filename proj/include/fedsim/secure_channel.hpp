#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/rand.h>
#include <openssl/rsa.h>
#include <openssl/x509.h>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/wire.hpp"

namespace fedsim {

// Hybrid encryption for model exchange: a fresh symmetric key per round,
// derived with scrypt and wrapped for each client under RSA-OAEP; payloads
// sealed with AES-256-GCM, authenticating the envelope header as AAD.

inline std::string openssl_error_string() {
  const unsigned long e = ERR_get_error();
  if (e == 0) return "unknown OpenSSL error";
  char buf[256];
  ERR_error_string_n(e, buf, sizeof(buf));
  return buf;
}

// ---- randomness sources ----

class Csprng {
 public:
  virtual ~Csprng() = default;
  virtual void fill(std::span<uint8_t> out) = 0;

  std::vector<uint8_t> bytes(size_t n) {
    std::vector<uint8_t> v(n);
    fill(v);
    return v;
  }

  template <size_t N>
  std::array<uint8_t, N> array() {
    std::array<uint8_t, N> a{};
    fill(a);
    return a;
  }
};

class SystemRng final : public Csprng {
 public:
  void fill(std::span<uint8_t> out) override {
    if (out.empty()) return;
    if (RAND_bytes(out.data(), static_cast<int>(out.size())) != 1) {
      throw RngFailure("RAND_bytes failed: " + openssl_error_string());
    }
  }
};

// Deterministic byte stream for reproducible simulations. Not a secure
// generator; real deployments use SystemRng.
class SeededRng final : public Csprng {
 public:
  explicit SeededRng(uint64_t seed) : rng_(seed) {}
  SeededRng(uint64_t seed, std::string_view label) : rng_(derive_seed(seed, label)) {}

  void fill(std::span<uint8_t> out) override {
    size_t i = 0;
    while (i < out.size()) {
      const uint64_t v = rng_.next_u64();
      for (int b = 0; b < 8 && i < out.size(); ++b, ++i) {
        out[i] = static_cast<uint8_t>(v >> (8 * b));
      }
    }
  }

 private:
  DetRng rng_;
};

// ---- process-wide OpenSSL RAND redirection ----
//
// RSA key generation and OAEP padding draw from OpenSSL's global generator.
// To make whole federation runs reproducible, a custom RAND_METHOD routes
// those draws to a thread-local Csprng while an override guard is alive on
// the thread; other threads keep the library default.

namespace detail {

inline thread_local Csprng* tl_openssl_rng = nullptr;
inline const RAND_METHOD* previous_rand_method = nullptr;

#if defined(__GNUC__)
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-declarations"
#endif

inline int override_bytes(unsigned char* buf, int num) {
  if (num < 0) return 0;
  if (tl_openssl_rng != nullptr) {
    tl_openssl_rng->fill({buf, static_cast<size_t>(num)});
    return 1;
  }
  if (previous_rand_method != nullptr && previous_rand_method->bytes != nullptr) {
    return previous_rand_method->bytes(buf, num);
  }
  return 0;
}

inline int override_seed(const void*, int) { return 1; }
inline int override_add(const void*, int, double) { return 1; }
inline int override_status() { return 1; }

inline void install_rand_method_once() {
  static std::once_flag flag;
  std::call_once(flag, [] {
    static RAND_METHOD method = {
        override_seed, override_bytes, nullptr, override_add, override_bytes,
        override_status,
    };
    previous_rand_method = RAND_get_rand_method();
    if (RAND_set_rand_method(&method) != 1) {
      throw RngFailure("failed to install RAND method override");
    }
  });
}

#if defined(__GNUC__)
#pragma GCC diagnostic pop
#endif

}  // namespace detail

// Binds a Csprng to this thread's OpenSSL random draws for the guard's
// lifetime. Guards nest; destruction restores the previous binding.
class OpensslRngBinding {
 public:
  explicit OpensslRngBinding(Csprng& rng) : prev_(detail::tl_openssl_rng) {
    detail::install_rand_method_once();
    detail::tl_openssl_rng = &rng;
  }
  ~OpensslRngBinding() { detail::tl_openssl_rng = prev_; }

  OpensslRngBinding(const OpensslRngBinding&) = delete;
  OpensslRngBinding& operator=(const OpensslRngBinding&) = delete;

 private:
  Csprng* prev_;
};

// ---- RSA keys ----

struct EvpPkeyDeleter {
  void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
using EvpPkeyPtr = std::unique_ptr<EVP_PKEY, EvpPkeyDeleter>;

struct EvpPkeyCtxDeleter {
  void operator()(EVP_PKEY_CTX* p) const { EVP_PKEY_CTX_free(p); }
};
using EvpPkeyCtxPtr = std::unique_ptr<EVP_PKEY_CTX, EvpPkeyCtxDeleter>;

class PublicKey {
 public:
  PublicKey() = default;
  explicit PublicKey(EvpPkeyPtr key) : key_(std::move(key)) {}

  static PublicKey from_der(std::span<const uint8_t> der) {
    const unsigned char* p = der.data();
    EVP_PKEY* raw = d2i_PUBKEY(nullptr, &p, static_cast<long>(der.size()));
    if (raw == nullptr) {
      throw MalformedPayload("cannot parse DER public key: " + openssl_error_string());
    }
    return PublicKey(EvpPkeyPtr(raw));
  }

  std::vector<uint8_t> to_der() const {
    unsigned char* buf = nullptr;
    const int len = i2d_PUBKEY(key_.get(), &buf);
    if (len <= 0) throw EncryptFailure("cannot serialize public key");
    std::vector<uint8_t> out(buf, buf + len);
    OPENSSL_free(buf);
    return out;
  }

  int bits() const { return EVP_PKEY_get_bits(key_.get()); }
  size_t modulus_bytes() const { return static_cast<size_t>(EVP_PKEY_get_size(key_.get())); }
  EVP_PKEY* handle() const { return key_.get(); }
  bool valid() const { return key_ != nullptr; }

 private:
  EvpPkeyPtr key_;
};

class PrivateKey {
 public:
  PrivateKey() = default;

  // Draws from the ambient OpenSSL generator, so key generation is
  // deterministic under an OpensslRngBinding.
  static PrivateKey generate(int bits = 2048) {
    EvpPkeyCtxPtr ctx(EVP_PKEY_CTX_new_id(EVP_PKEY_RSA, nullptr));
    if (!ctx || EVP_PKEY_keygen_init(ctx.get()) != 1 ||
        EVP_PKEY_CTX_set_rsa_keygen_bits(ctx.get(), bits) != 1) {
      throw EncryptFailure("RSA keygen setup failed: " + openssl_error_string());
    }
    EVP_PKEY* raw = nullptr;
    if (EVP_PKEY_keygen(ctx.get(), &raw) != 1) {
      throw EncryptFailure("RSA keygen failed: " + openssl_error_string());
    }
    PrivateKey k;
    k.key_ = EvpPkeyPtr(raw);
    return k;
  }

  PublicKey public_key() const {
    const auto der = public_der();
    return PublicKey::from_der(der);
  }

  std::vector<uint8_t> public_der() const {
    unsigned char* buf = nullptr;
    const int len = i2d_PUBKEY(key_.get(), &buf);
    if (len <= 0) throw EncryptFailure("cannot serialize public key");
    std::vector<uint8_t> out(buf, buf + len);
    OPENSSL_free(buf);
    return out;
  }

  int bits() const { return EVP_PKEY_get_bits(key_.get()); }
  EVP_PKEY* handle() const { return key_.get(); }
  bool valid() const { return key_ != nullptr; }

 private:
  EvpPkeyPtr key_;
};

// ---- round keys ----

inline constexpr uint64_t kScryptN = uint64_t{1} << 14;
inline constexpr uint32_t kScryptR = 8;
inline constexpr uint32_t kScryptP = 1;
inline constexpr size_t kSymmetricKeyBytes = 32;
inline constexpr size_t kScryptSaltBytes = 16;
inline constexpr size_t kPassphraseBytes = 32;

inline std::vector<uint8_t> scrypt_derive(std::span<const uint8_t> passphrase,
                                          std::span<const uint8_t> salt, uint64_t n,
                                          uint32_t r, uint32_t p, size_t out_len) {
  std::vector<uint8_t> out(out_len);
  if (EVP_PBE_scrypt(reinterpret_cast<const char*>(passphrase.data()), passphrase.size(),
                     salt.data(), salt.size(), n, r, p, 1ull << 28, out.data(),
                     out.size()) != 1) {
    throw EncryptFailure("scrypt derivation failed: " + openssl_error_string());
  }
  return out;
}

struct RoundKey {
  uint32_t round = 0;
  std::array<uint8_t, kSymmetricKeyBytes> secret{};
  std::array<uint8_t, kScryptSaltBytes> salt{};
};

// Fresh random passphrase and salt each round, stretched with scrypt.
inline RoundKey gen_round_key(uint32_t round, Csprng& rng) {
  RoundKey rk;
  rk.round = round;
  const auto passphrase = rng.array<kPassphraseBytes>();
  rk.salt = rng.array<kScryptSaltBytes>();
  const auto key = scrypt_derive(passphrase, rk.salt, kScryptN, kScryptR, kScryptP,
                                 kSymmetricKeyBytes);
  std::copy(key.begin(), key.end(), rk.secret.begin());
  return rk;
}

// ---- key wrapping (RSA-OAEP with SHA-256) ----

inline constexpr int kMinRsaBits = 2048;
inline constexpr size_t kWrappedPlainBytes = kSymmetricKeyBytes + kScryptSaltBytes;

namespace detail {

inline EvpPkeyCtxPtr oaep_ctx(EVP_PKEY* key) {
  EvpPkeyCtxPtr ctx(EVP_PKEY_CTX_new(key, nullptr));
  if (!ctx) throw EncryptFailure("cannot create pkey context");
  return ctx;
}

inline void set_oaep_params(EVP_PKEY_CTX* ctx) {
  if (EVP_PKEY_CTX_set_rsa_padding(ctx, RSA_PKCS1_OAEP_PADDING) != 1 ||
      EVP_PKEY_CTX_set_rsa_oaep_md(ctx, EVP_sha256()) != 1 ||
      EVP_PKEY_CTX_set_rsa_mgf1_md(ctx, EVP_sha256()) != 1) {
    throw EncryptFailure("cannot configure OAEP: " + openssl_error_string());
  }
}

}  // namespace detail

inline std::vector<uint8_t> wrap_key(const RoundKey& rk, const PublicKey& pub) {
  if (pub.bits() < kMinRsaBits) {
    throw KeyTooSmall("client RSA key is " + std::to_string(pub.bits()) +
                      " bits; at least " + std::to_string(kMinRsaBits) + " required");
  }
  std::array<uint8_t, kWrappedPlainBytes> plain{};
  std::copy(rk.secret.begin(), rk.secret.end(), plain.begin());
  std::copy(rk.salt.begin(), rk.salt.end(), plain.begin() + kSymmetricKeyBytes);

  auto ctx = detail::oaep_ctx(pub.handle());
  if (EVP_PKEY_encrypt_init(ctx.get()) != 1) {
    throw EncryptFailure("OAEP encrypt init failed: " + openssl_error_string());
  }
  detail::set_oaep_params(ctx.get());
  size_t out_len = 0;
  if (EVP_PKEY_encrypt(ctx.get(), nullptr, &out_len, plain.data(), plain.size()) != 1) {
    throw EncryptFailure("OAEP size query failed: " + openssl_error_string());
  }
  std::vector<uint8_t> out(out_len);
  if (EVP_PKEY_encrypt(ctx.get(), out.data(), &out_len, plain.data(), plain.size()) != 1) {
    throw EncryptFailure("OAEP encryption failed: " + openssl_error_string());
  }
  out.resize(out_len);
  return out;
}

inline RoundKey unwrap_key(std::span<const uint8_t> wrapped, const PrivateKey& priv,
                           uint32_t round) {
  auto ctx = detail::oaep_ctx(priv.handle());
  if (EVP_PKEY_decrypt_init(ctx.get()) != 1) {
    throw DecryptFailure("OAEP decrypt init failed: " + openssl_error_string());
  }
  detail::set_oaep_params(ctx.get());
  size_t out_len = 0;
  if (EVP_PKEY_decrypt(ctx.get(), nullptr, &out_len, wrapped.data(), wrapped.size()) != 1) {
    throw DecryptFailure("OAEP size query failed: " + openssl_error_string());
  }
  std::vector<uint8_t> plain(out_len);
  if (EVP_PKEY_decrypt(ctx.get(), plain.data(), &out_len, wrapped.data(), wrapped.size()) !=
      1) {
    throw DecryptFailure("key unwrap failed: " + openssl_error_string());
  }
  plain.resize(out_len);
  if (plain.size() != kWrappedPlainBytes) {
    throw DecryptFailure("unwrapped key block has " + std::to_string(plain.size()) +
                         " bytes, expected " + std::to_string(kWrappedPlainBytes));
  }
  RoundKey rk;
  rk.round = round;
  std::copy(plain.begin(), plain.begin() + kSymmetricKeyBytes, rk.secret.begin());
  std::copy(plain.begin() + kSymmetricKeyBytes, plain.end(), rk.salt.begin());
  return rk;
}

// ---- AES-256-GCM ----

inline constexpr size_t kGcmNonceBytes = 12;
inline constexpr size_t kGcmTagBytes = 16;

struct EvpCipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
};
using EvpCipherCtxPtr = std::unique_ptr<EVP_CIPHER_CTX, EvpCipherCtxDeleter>;

struct GcmSealed {
  std::array<uint8_t, kGcmTagBytes> tag{};
  std::vector<uint8_t> ciphertext;
};

inline GcmSealed aes256gcm_encrypt(std::span<const uint8_t> key,
                                   std::span<const uint8_t> nonce,
                                   std::span<const uint8_t> aad,
                                   std::span<const uint8_t> plaintext) {
  EvpCipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  if (!ctx || EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(nonce.size()),
                          nullptr) != 1 ||
      EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1) {
    throw EncryptFailure("GCM init failed: " + openssl_error_string());
  }
  int len = 0;
  if (!aad.empty() &&
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) !=
          1) {
    throw EncryptFailure("GCM AAD failed: " + openssl_error_string());
  }
  GcmSealed out;
  out.ciphertext.resize(plaintext.size());
  if (!plaintext.empty() &&
      EVP_EncryptUpdate(ctx.get(), out.ciphertext.data(), &len, plaintext.data(),
                        static_cast<int>(plaintext.size())) != 1) {
    throw EncryptFailure("GCM encrypt failed: " + openssl_error_string());
  }
  uint8_t scratch[EVP_MAX_BLOCK_LENGTH];
  if (EVP_EncryptFinal_ex(ctx.get(), scratch, &len) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kGcmTagBytes, out.tag.data()) !=
          1) {
    throw EncryptFailure("GCM finalize failed: " + openssl_error_string());
  }
  return out;
}

inline std::vector<uint8_t> aes256gcm_decrypt(std::span<const uint8_t> key,
                                              std::span<const uint8_t> nonce,
                                              std::span<const uint8_t> aad,
                                              std::span<const uint8_t> ciphertext,
                                              std::span<const uint8_t> tag) {
  EvpCipherCtxPtr ctx(EVP_CIPHER_CTX_new());
  if (!ctx || EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr) != 1 ||
      EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(nonce.size()),
                          nullptr) != 1 ||
      EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1) {
    throw DecryptFailure("GCM init failed: " + openssl_error_string());
  }
  int len = 0;
  if (!aad.empty() &&
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())) !=
          1) {
    throw DecryptFailure("GCM AAD failed: " + openssl_error_string());
  }
  std::vector<uint8_t> plain(ciphertext.size());
  if (!ciphertext.empty() &&
      EVP_DecryptUpdate(ctx.get(), plain.data(), &len, ciphertext.data(),
                        static_cast<int>(ciphertext.size())) != 1) {
    throw DecryptFailure("GCM decrypt failed: " + openssl_error_string());
  }
  std::array<uint8_t, kGcmTagBytes> tag_copy{};
  std::copy(tag.begin(), tag.end(), tag_copy.begin());
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kGcmTagBytes, tag_copy.data()) !=
      1) {
    throw DecryptFailure("GCM set tag failed: " + openssl_error_string());
  }
  uint8_t scratch[EVP_MAX_BLOCK_LENGTH];
  if (EVP_DecryptFinal_ex(ctx.get(), scratch, &len) != 1) {
    throw AuthFailure("GCM tag verification failed");
  }
  return plain;
}

// ---- envelopes ----
//
//   magic "FPY1" | version u8 | round u32 | sender u16 | kind u8   (12-byte
//   header, authenticated as AAD) | nonce 12 | tag 16 | ct_len u32 | ct
//
// Registration public keys and wrapped round keys travel in plain envelopes
// (zero nonce and tag): the former is public, the latter already sealed by
// RSA-OAEP.

enum class PayloadKind : uint8_t {
  kPublicKey = 1,
  kWrappedKey = 2,
  kGlobalModel = 3,
  kClientUpdate = 4,
};

inline const char* to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::kPublicKey: return "public_key";
    case PayloadKind::kWrappedKey: return "wrapped_key";
    case PayloadKind::kGlobalModel: return "global_model";
    case PayloadKind::kClientUpdate: return "client_update";
  }
  return "?";
}

inline constexpr uint8_t kEnvelopeVersion = 1;
inline constexpr size_t kEnvelopeHeaderBytes = 12;
inline constexpr size_t kEnvelopeOverhead =
    kEnvelopeHeaderBytes + kGcmNonceBytes + kGcmTagBytes + 4;

struct Envelope {
  uint8_t version = kEnvelopeVersion;
  uint32_t round = 0;
  uint16_t sender = 0;
  PayloadKind kind = PayloadKind::kPublicKey;
  std::array<uint8_t, kGcmNonceBytes> nonce{};
  std::array<uint8_t, kGcmTagBytes> tag{};
  std::vector<uint8_t> ciphertext;

  std::array<uint8_t, kEnvelopeHeaderBytes> header() const {
    std::array<uint8_t, kEnvelopeHeaderBytes> h{};
    h[0] = 'F';
    h[1] = 'P';
    h[2] = 'Y';
    h[3] = '1';
    h[4] = version;
    for (int i = 0; i < 4; ++i) h[5 + i] = static_cast<uint8_t>(round >> (8 * i));
    h[9] = static_cast<uint8_t>(sender);
    h[10] = static_cast<uint8_t>(sender >> 8);
    h[11] = static_cast<uint8_t>(kind);
    return h;
  }

  std::vector<uint8_t> serialize() const {
    ByteWriter w;
    w.reserve(kEnvelopeOverhead + ciphertext.size());
    const auto h = header();
    w.put_bytes(h);
    w.put_bytes(nonce);
    w.put_bytes(tag);
    w.put_u32(static_cast<uint32_t>(ciphertext.size()));
    w.put_bytes(ciphertext);
    return w.take();
  }

  static Envelope parse(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    Envelope env;
    const uint8_t m0 = r.get_u8(), m1 = r.get_u8(), m2 = r.get_u8(), m3 = r.get_u8();
    if (m0 != 'F' || m1 != 'P' || m2 != 'Y' || m3 != '1') {
      throw BadMagic("envelope does not start with FPY1");
    }
    env.version = r.get_u8();
    if (env.version != kEnvelopeVersion) {
      throw UnknownVersion("envelope version " + std::to_string(env.version));
    }
    env.round = r.get_u32();
    env.sender = r.get_u16();
    const uint8_t kind = r.get_u8();
    if (kind < 1 || kind > 4) {
      throw MalformedPayload("unknown payload kind " + std::to_string(kind));
    }
    env.kind = static_cast<PayloadKind>(kind);
    auto nonce = r.get_bytes(kGcmNonceBytes);
    std::copy(nonce.begin(), nonce.end(), env.nonce.begin());
    auto tag = r.get_bytes(kGcmTagBytes);
    std::copy(tag.begin(), tag.end(), env.tag.begin());
    const uint32_t ct_len = r.get_u32();
    auto ct = r.get_bytes(ct_len);
    env.ciphertext.assign(ct.begin(), ct.end());
    if (!r.at_end()) {
      throw MalformedPayload("envelope has " + std::to_string(r.remaining()) +
                             " trailing bytes");
    }
    return env;
  }
};

// ---- nonce bookkeeping ----
//
// (key, nonce) pairs must never repeat. Each federation run shares one
// registry across its participants; deterministic replays of a run are a
// separate registry and so do not trip it.

class NonceRegistry {
 public:
  void check_and_insert(const std::array<uint8_t, kSymmetricKeyBytes>& secret,
                        const std::array<uint8_t, kGcmNonceBytes>& nonce, uint32_t round) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!seen_[secret].insert(nonce).second) {
      throw NonceReuseDetected("nonce repeated under the round " + std::to_string(round) +
                               " key");
    }
  }

  void reset() {
    std::lock_guard<std::mutex> lock(mu_);
    seen_.clear();
  }

 private:
  std::mutex mu_;
  std::map<std::array<uint8_t, kSymmetricKeyBytes>,
           std::set<std::array<uint8_t, kGcmNonceBytes>>>
      seen_;
};

inline Envelope seal(const RoundKey& rk, PayloadKind kind, uint16_t sender,
                     std::span<const uint8_t> plaintext, Csprng& rng,
                     NonceRegistry* registry = nullptr) {
  Envelope env;
  env.round = rk.round;
  env.sender = sender;
  env.kind = kind;
  env.nonce = rng.array<kGcmNonceBytes>();
  if (registry) registry->check_and_insert(rk.secret, env.nonce, rk.round);
  const auto aad = env.header();
  GcmSealed sealed = aes256gcm_encrypt(rk.secret, env.nonce, aad, plaintext);
  env.tag = sealed.tag;
  env.ciphertext = std::move(sealed.ciphertext);
  return env;
}

inline std::vector<uint8_t> open(const Envelope& env, const RoundKey& rk) {
  if (env.round != rk.round) {
    throw RoundMismatch("envelope claims round " + std::to_string(env.round) +
                        " but the key belongs to round " + std::to_string(rk.round));
  }
  const auto aad = env.header();
  try {
    return aes256gcm_decrypt(rk.secret, env.nonce, aad, env.ciphertext, env.tag);
  } catch (const AuthFailure&) {
    throw AuthFailure("envelope from sender " + std::to_string(env.sender) + " in round " +
                      std::to_string(env.round) + " failed authentication");
  }
}

// Unsealed carrier for registration and key-distribution messages.
inline Envelope make_plain_envelope(PayloadKind kind, uint32_t round, uint16_t sender,
                                    std::span<const uint8_t> payload) {
  Envelope env;
  env.round = round;
  env.sender = sender;
  env.kind = kind;
  env.ciphertext.assign(payload.begin(), payload.end());
  return env;
}

}  // namespace fedsim
