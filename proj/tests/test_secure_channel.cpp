#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <string>
#include <vector>

#include "fedsim/secure_channel.hpp"

using namespace fedsim;

namespace {

std::vector<uint8_t> unhex(const std::string& hex) {
  std::vector<uint8_t> out;
  out.reserve(hex.size() / 2);
  for (size_t i = 0; i + 1 < hex.size(); i += 2) {
    out.push_back(static_cast<uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  }
  return out;
}

std::vector<uint8_t> str_bytes(const std::string& s) {
  return std::vector<uint8_t>(s.begin(), s.end());
}

const PrivateKey& shared_key() {
  static PrivateKey key = [] {
    SeededRng rng(1234);
    OpensslRngBinding bind(rng);
    return PrivateKey::generate(2048);
  }();
  return key;
}

}  // namespace

TEST_CASE("scrypt matches the published test vector") {
  const auto pass = str_bytes("pleaseletmein");
  const auto salt = str_bytes("SodiumChloride");
  const auto dk64 = scrypt_derive(pass, salt, 16384, 8, 1, 64);
  REQUIRE(dk64 ==
          unhex("7023bdcb3afd7348461c06cd81fd38ebfda8fbba904f8e3ea9b543f6545da1f2"
                "d5432955613f0fcf62d49705242a9af9e61e85dc0d651e40dfcf017b45575887"));

  const auto dk32 = scrypt_derive(pass, salt, 16384, 8, 1, 32);
  REQUIRE(dk32 == std::vector<uint8_t>(dk64.begin(), dk64.begin() + 32));
}

TEST_CASE("aes-256-gcm matches the published test vector") {
  const auto key = unhex(
      "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308");
  const auto iv = unhex("cafebabefacedbaddecaf888");
  const auto pt = unhex(
      "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
      "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39");
  const auto aad = unhex("feedfacedeadbeeffeedfacedeadbeefabaddad2");
  const auto want_ct = unhex(
      "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa"
      "8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662");
  const auto want_tag = unhex("76fc6ece0f4e1768cddf8853bb2d551b");

  const GcmSealed sealed = aes256gcm_encrypt(key, iv, aad, pt);
  REQUIRE(sealed.ciphertext == want_ct);
  REQUIRE(std::vector<uint8_t>(sealed.tag.begin(), sealed.tag.end()) == want_tag);

  const auto back = aes256gcm_decrypt(key, iv, aad, sealed.ciphertext, sealed.tag);
  REQUIRE(back == pt);
}

TEST_CASE("gcm rejects any tampering") {
  SeededRng rng(11);
  const auto key = rng.bytes(32);
  const auto nonce = rng.bytes(12);
  const auto aad = rng.bytes(20);
  const auto pt = rng.bytes(100);
  const GcmSealed sealed = aes256gcm_encrypt(key, nonce, aad, pt);

  auto bad_ct = sealed.ciphertext;
  bad_ct[7] ^= 0x01;
  REQUIRE_THROWS_AS(aes256gcm_decrypt(key, nonce, aad, bad_ct, sealed.tag), AuthFailure);

  auto bad_tag = sealed.tag;
  bad_tag[0] ^= 0x80;
  REQUIRE_THROWS_AS(aes256gcm_decrypt(key, nonce, aad, sealed.ciphertext, bad_tag),
                    AuthFailure);

  auto bad_nonce = nonce;
  bad_nonce[3] ^= 0x04;
  REQUIRE_THROWS_AS(aes256gcm_decrypt(key, bad_nonce, aad, sealed.ciphertext, sealed.tag),
                    AuthFailure);

  auto bad_aad = aad;
  bad_aad[0] ^= 0xff;
  REQUIRE_THROWS_AS(aes256gcm_decrypt(key, nonce, bad_aad, sealed.ciphertext, sealed.tag),
                    AuthFailure);
}

TEST_CASE("seal and open round-trip payloads of many sizes") {
  SeededRng rng(21);
  RoundKey rk;
  rk.round = 9;
  rng.fill(rk.secret);
  rng.fill(rk.salt);

  for (size_t n : {size_t{0}, size_t{1}, size_t{15}, size_t{16}, size_t{1000}}) {
    const auto payload = rng.bytes(n);
    const Envelope env = seal(rk, PayloadKind::kClientUpdate, 3, payload, rng);
    REQUIRE(env.round == 9);
    REQUIRE(env.sender == 3);
    REQUIRE(env.kind == PayloadKind::kClientUpdate);
    REQUIRE(env.ciphertext.size() == n);
    REQUIRE(open(env, rk) == payload);
  }
}

TEST_CASE("opening with the wrong round key fails") {
  SeededRng rng(22);
  RoundKey rk;
  rk.round = 4;
  rng.fill(rk.secret);
  rng.fill(rk.salt);
  const auto payload = rng.bytes(64);
  const Envelope env = seal(rk, PayloadKind::kGlobalModel, 0, payload, rng);

  RoundKey stale = rk;
  stale.round = 3;
  REQUIRE_THROWS_AS(open(env, stale), RoundMismatch);

  RoundKey other = rk;
  other.secret[0] ^= 0x01;
  REQUIRE_THROWS_AS(open(env, other), AuthFailure);
}

TEST_CASE("envelopes survive serialization") {
  SeededRng rng(23);
  RoundKey rk;
  rk.round = 77;
  rng.fill(rk.secret);
  rng.fill(rk.salt);
  const auto payload = rng.bytes(33);
  const Envelope env = seal(rk, PayloadKind::kWrappedKey, 5, payload, rng);

  const auto bytes = env.serialize();
  REQUIRE(bytes.size() == kEnvelopeOverhead + env.ciphertext.size());
  const Envelope back = Envelope::parse(bytes);
  REQUIRE(back.version == env.version);
  REQUIRE(back.round == env.round);
  REQUIRE(back.sender == env.sender);
  REQUIRE(back.kind == env.kind);
  REQUIRE(back.nonce == env.nonce);
  REQUIRE(back.tag == env.tag);
  REQUIRE(back.ciphertext == env.ciphertext);
  REQUIRE(back.serialize() == bytes);
  REQUIRE(open(back, rk) == payload);
}

TEST_CASE("every corrupted envelope byte is caught") {
  SeededRng rng(24);
  RoundKey rk;
  rk.round = 2;
  rng.fill(rk.secret);
  rng.fill(rk.salt);
  const auto payload = rng.bytes(48);
  const Envelope env = seal(rk, PayloadKind::kGlobalModel, 1, payload, rng);
  const auto bytes = env.serialize();

  auto parse_open = [&](const std::vector<uint8_t>& buf) {
    return open(Envelope::parse(buf), rk);
  };

  for (size_t i = 0; i < 4; ++i) {  // magic
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), BadMagic);
  }
  {
    auto bad = bytes;
    bad[4] ^= 0x01;  // version
    REQUIRE_THROWS_AS(parse_open(bad), UnknownVersion);
  }
  for (size_t i = 5; i < 9; ++i) {  // round: parses, but the key no longer matches
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), RoundMismatch);
  }
  for (size_t i = 9; i < 11; ++i) {  // sender is authenticated via the header
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), AuthFailure);
  }
  {
    auto bad = bytes;
    bad[11] ^= 0x01;  // kind 3 -> 2, still in range, still authenticated
    REQUIRE_THROWS_AS(parse_open(bad), AuthFailure);
  }
  {
    auto bad = bytes;
    bad[11] = 9;  // out-of-range kind never reaches the cipher
    REQUIRE_THROWS_AS(parse_open(bad), MalformedPayload);
  }
  for (size_t i = 12; i < 12 + kGcmNonceBytes; ++i) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), AuthFailure);
  }
  for (size_t i = 24; i < 24 + kGcmTagBytes; ++i) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), AuthFailure);
  }
  for (size_t i = 44; i < bytes.size(); ++i) {  // ciphertext
    auto bad = bytes;
    bad[i] ^= 0x01;
    REQUIRE_THROWS_AS(parse_open(bad), AuthFailure);
  }
  {
    auto bad = bytes;
    bad[40] += 1;  // length field inflated past the buffer
    REQUIRE_THROWS_AS(Envelope::parse(bad), TruncatedPayload);
  }
  {
    auto bad = bytes;
    bad[40] -= 1;  // length field shrunk leaves trailing bytes
    REQUIRE_THROWS_AS(Envelope::parse(bad), MalformedPayload);
  }
  {
    auto bad = bytes;
    bad.push_back(0x00);
    REQUIRE_THROWS_AS(Envelope::parse(bad), MalformedPayload);
  }
  for (size_t len = 0; len < bytes.size(); ++len) {  // every truncation throws something typed
    const std::vector<uint8_t> prefix(bytes.begin(), bytes.begin() + static_cast<long>(len));
    REQUIRE_THROWS_AS(Envelope::parse(prefix), Error);
  }
}

TEST_CASE("round keys derive deterministically from the generator") {
  SeededRng a(7);
  const RoundKey rk1 = gen_round_key(5, a);
  SeededRng b(7);
  const RoundKey rk2 = gen_round_key(5, b);
  REQUIRE(rk1.round == 5);
  REQUIRE(rk1.secret == rk2.secret);
  REQUIRE(rk1.salt == rk2.salt);

  // The secret is the scrypt stretch of the generator's first draws.
  SeededRng c(7);
  const auto passphrase = c.array<kPassphraseBytes>();
  const auto salt = c.array<kScryptSaltBytes>();
  REQUIRE(salt == rk1.salt);
  const auto stretched =
      scrypt_derive(passphrase, salt, kScryptN, kScryptR, kScryptP, kSymmetricKeyBytes);
  REQUIRE(std::equal(stretched.begin(), stretched.end(), rk1.secret.begin()));

  SeededRng d(8);
  const RoundKey rk3 = gen_round_key(5, d);
  REQUIRE(rk1.secret != rk3.secret);
}

TEST_CASE("key wrapping round-trips the round secret") {
  SeededRng rng(31);
  const RoundKey rk = gen_round_key(12, rng);
  const PublicKey pub = shared_key().public_key();

  const auto wrapped = wrap_key(rk, pub);
  REQUIRE(wrapped.size() == pub.modulus_bytes());
  const RoundKey back = unwrap_key(wrapped, shared_key(), 12);
  REQUIRE(back.round == 12);
  REQUIRE(back.secret == rk.secret);
  REQUIRE(back.salt == rk.salt);

  auto bad = wrapped;
  bad[10] ^= 0x01;
  REQUIRE_THROWS_AS(unwrap_key(bad, shared_key(), 12), DecryptFailure);
}

TEST_CASE("unwrapping with the wrong private key fails") {
  SeededRng rng(32);
  const RoundKey rk = gen_round_key(1, rng);
  const auto wrapped = wrap_key(rk, shared_key().public_key());

  OpensslRngBinding bind(rng);
  const PrivateKey other = PrivateKey::generate(2048);
  REQUIRE_THROWS_AS(unwrap_key(wrapped, other, 1), DecryptFailure);
}

TEST_CASE("undersized recipient keys are rejected") {
  SeededRng rng(33);
  OpensslRngBinding bind(rng);
  const PrivateKey weak = PrivateKey::generate(1024);
  const RoundKey rk = gen_round_key(0, rng);
  REQUIRE_THROWS_AS(wrap_key(rk, weak.public_key()), KeyTooSmall);
}

TEST_CASE("key generation is reproducible under a bound generator") {
  auto gen_der = [](uint64_t seed) {
    SeededRng rng(seed);
    OpensslRngBinding bind(rng);
    return PrivateKey::generate(2048).public_der();
  };
  const auto a = gen_der(99);
  const auto b = gen_der(99);
  const auto c = gen_der(100);
  REQUIRE(a == b);
  REQUIRE(a != c);

  const PublicKey parsed = PublicKey::from_der(a);
  REQUIRE(parsed.bits() == 2048);
  REQUIRE_THROWS_AS(PublicKey::from_der(std::vector<uint8_t>{0x30, 0x01}),
                    MalformedPayload);
}

TEST_CASE("nonce reuse under one key is detected") {
  NonceRegistry reg;
  std::array<uint8_t, kSymmetricKeyBytes> secret{};
  secret[0] = 1;
  std::array<uint8_t, kGcmNonceBytes> nonce{};
  nonce[0] = 7;

  reg.check_and_insert(secret, nonce, 0);
  REQUIRE_THROWS_AS(reg.check_and_insert(secret, nonce, 0), NonceReuseDetected);

  std::array<uint8_t, kGcmNonceBytes> other = nonce;
  other[1] = 1;
  reg.check_and_insert(secret, other, 0);  // new nonce, same key: fine

  std::array<uint8_t, kSymmetricKeyBytes> secret2 = secret;
  secret2[0] = 2;
  reg.check_and_insert(secret2, nonce, 1);  // same nonce, different key: fine

  reg.reset();
  reg.check_and_insert(secret, nonce, 0);  // a new run may repeat old nonces
}

TEST_CASE("sealing replays trip a shared registry but not separate ones") {
  RoundKey rk;
  rk.round = 6;
  rk.secret[0] = 0x42;
  const std::vector<uint8_t> payload = {1, 2, 3};

  NonceRegistry shared;
  SeededRng rng1(55);
  seal(rk, PayloadKind::kGlobalModel, 0, payload, rng1, &shared);
  SeededRng rng2(55);  // same seed reproduces the nonce
  REQUIRE_THROWS_AS(seal(rk, PayloadKind::kGlobalModel, 0, payload, rng2, &shared),
                    NonceReuseDetected);

  NonceRegistry fresh;
  SeededRng rng3(55);
  const Envelope env = seal(rk, PayloadKind::kGlobalModel, 0, payload, rng3, &fresh);
  REQUIRE(open(env, rk) == payload);
}

TEST_CASE("plain envelopes carry registration payloads") {
  const std::vector<uint8_t> der = {0x30, 0x82, 0x01, 0x22};
  const Envelope env = make_plain_envelope(PayloadKind::kPublicKey, 0, 4, der);
  REQUIRE(env.ciphertext == der);
  const Envelope back = Envelope::parse(env.serialize());
  REQUIRE(back.kind == PayloadKind::kPublicKey);
  REQUIRE(back.sender == 4);
  REQUIRE(back.ciphertext == der);
}

TEST_CASE("seeded generators are deterministic, labeled streams differ") {
  SeededRng a(123);
  SeededRng b(123);
  REQUIRE(a.bytes(64) == b.bytes(64));

  SeededRng c(123, "proto-rng");
  SeededRng d(123, "openssl-rng");
  REQUIRE(c.bytes(32) != d.bytes(32));

  SystemRng sys;
  REQUIRE(sys.bytes(32) != sys.bytes(32));
  REQUIRE(sys.bytes(0).empty());
}
