#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/fed_optim.hpp"
#include "fedsim/local_trainer.hpp"
#include "fedsim/param_store.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/secure_channel.hpp"
#include "fedsim/transport.hpp"

namespace fedsim {

// One federated optimization run. Per round the server derives a fresh
// symmetric key, scatters it wrapped under each client's RSA key, broadcasts
// the sealed global model (full checkpoint in round 0, bare weights after),
// gathers sealed client updates, aggregates the sample-weighted pseudo
// gradients, applies the server optimizer and evaluates on its own data.

struct FederationConfig {
  int clients = 1;
  uint64_t seed = 0;
  TrainConfig train;
  ServerOptConfig optimizer;
  std::chrono::milliseconds timeout{30000};
  std::string model_name = "model";

  void validate() const {
    if (clients < 1 || clients > 4096) {
      throw ConfigError("clients must lie in [1, 4096], got " + std::to_string(clients));
    }
    if (timeout.count() <= 0) throw ConfigError("timeout must be positive");
    train.validate();
    optimizer.validate();
  }
};

struct ClientRoundStat {
  int client_id = 0;
  uint64_t samples = 0;
  double loss = 0.0;
  uint64_t bytes_to_client = 0;
  uint64_t bytes_from_client = 0;
};

struct RoundRecord {
  int round = 0;
  std::vector<ClientRoundStat> clients;
  double train_loss = 0.0;  // sample-weighted mean of client losses
  EvalMetrics eval;
  double wall_ms = 0.0;
};

struct FederationTranscript {
  int broadcasts = 0;
  int key_scatters = 0;
  int updates_gathered = 0;
  std::vector<uint32_t> broadcast_rounds;
  std::vector<std::pair<uint32_t, std::array<uint8_t, kGcmNonceBytes>>> sealed_nonces;
};

struct FederationResult {
  Checkpoint best;
  int best_round = -1;
  double best_metric = 0.0;
  std::vector<RoundRecord> rounds;
  FederationTranscript transcript;
};

namespace detail {

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline Envelope parse_frame(const Frame& f) { return Envelope::parse(f); }

}  // namespace detail

// ---- server side ----

struct ServerContext {
  Endpoint& endpoint;
  FederationConfig cfg;
  ParameterSet init;
  std::shared_ptr<LocalModel> eval_model;
  Csprng& rng;
  NonceRegistry* nonces = nullptr;  // shared across the run's participants
};

inline FederationResult run_server(ServerContext ctx) {
  ctx.cfg.validate();
  if (!ctx.eval_model || ctx.eval_model->sample_count() == 0) {
    throw EmptyEvalSet("server has no evaluation data");
  }
  const int m = ctx.cfg.clients;

  // Registration: collect client public keys in client order.
  std::vector<PublicKey> pubs(static_cast<size_t>(m) + 1);
  for (int i = 1; i <= m; ++i) {
    Frame f;
    try {
      f = ctx.endpoint.recv(i, ctx.cfg.timeout);
    } catch (const Timeout& t) {
      throw ClientFailure("client " + std::to_string(i) +
                          " never registered: " + t.what());
    }
    const Envelope env = detail::parse_frame(f);
    if (env.kind != PayloadKind::kPublicKey || env.sender != i) {
      throw MalformedPayload("expected registration from client " + std::to_string(i) +
                             ", got kind " + std::string(to_string(env.kind)) +
                             " from sender " + std::to_string(env.sender));
    }
    pubs[static_cast<size_t>(i)] = PublicKey::from_der(env.ciphertext);
    if (pubs[static_cast<size_t>(i)].bits() < kMinRsaBits) {
      throw KeyTooSmall("client " + std::to_string(i) + " registered a " +
                        std::to_string(pubs[static_cast<size_t>(i)].bits()) + "-bit key");
    }
  }

  FederationResult result;
  ParameterSet w = ctx.init;
  ServerOptimizer opt(ctx.cfg.optimizer, w);

  for (int t = 0; t < ctx.cfg.train.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const RoundKey rk = gen_round_key(static_cast<uint32_t>(t), ctx.rng);

    std::vector<uint8_t> payload;
    if (t == 0) {
      Checkpoint ck;
      ck.params = w;
      ck.meta["model"] = ctx.cfg.model_name;
      ck.meta["round"] = "0";
      ck.meta["optimizer"] = to_string(ctx.cfg.optimizer.kind);
      payload = encode_checkpoint(ck);
    } else {
      payload = encode_fp16(w);
    }
    const Envelope model_env =
        seal(rk, PayloadKind::kGlobalModel, 0, payload, ctx.rng, ctx.nonces);
    const Frame model_frame = model_env.serialize();
    result.transcript.sealed_nonces.emplace_back(static_cast<uint32_t>(t), model_env.nonce);

    // Key scatter: one wrapped copy of the round key per client.
    std::vector<uint64_t> sent_bytes(static_cast<size_t>(m) + 1, 0);
    for (int i = 1; i <= m; ++i) {
      const auto wrapped = wrap_key(rk, pubs[static_cast<size_t>(i)]);
      const Envelope key_env = make_plain_envelope(PayloadKind::kWrappedKey,
                                                   static_cast<uint32_t>(t), 0, wrapped);
      const Frame key_frame = key_env.serialize();
      ctx.endpoint.send(i, key_frame);
      sent_bytes[static_cast<size_t>(i)] += key_frame.size();
    }
    result.transcript.key_scatters += 1;

    // Broadcast: the same sealed model bytes go to every client.
    for (int i = 1; i <= m; ++i) {
      ctx.endpoint.send(i, model_frame);
      sent_bytes[static_cast<size_t>(i)] += model_frame.size();
    }
    result.transcript.broadcasts += 1;
    result.transcript.broadcast_rounds.push_back(static_cast<uint32_t>(t));

    // Gather sealed updates.
    std::vector<ClientUpdate> updates;
    RoundRecord record;
    record.round = t;
    for (int i = 1; i <= m; ++i) {
      Frame f;
      try {
        f = ctx.endpoint.recv(i, ctx.cfg.timeout);
      } catch (const Timeout& te) {
        throw ClientFailure("client " + std::to_string(i) + " failed in round " +
                            std::to_string(t) + ": " + te.what());
      }
      const Envelope env = detail::parse_frame(f);
      if (env.kind != PayloadKind::kClientUpdate || env.sender != i) {
        throw MalformedPayload("expected an update from client " + std::to_string(i) +
                               " in round " + std::to_string(t));
      }
      const std::vector<uint8_t> plain = open(env, rk);
      result.transcript.sealed_nonces.emplace_back(static_cast<uint32_t>(t), env.nonce);
      result.transcript.updates_gathered += 1;

      ByteReader r(plain);
      ClientUpdate u;
      u.client_id = i;
      u.sample_count = r.get_u64();
      u.mean_loss = r.get_f64();
      u.delta = decode_fp16(r.get_bytes(r.remaining()));

      ClientRoundStat stat;
      stat.client_id = i;
      stat.samples = u.sample_count;
      stat.loss = u.mean_loss;
      stat.bytes_to_client = sent_bytes[static_cast<size_t>(i)];
      stat.bytes_from_client = f.size();
      record.clients.push_back(stat);
      updates.push_back(std::move(u));
    }

    const ParameterSet delta = aggregate(updates);
    w = opt.step(w, delta);

    uint64_t total_samples = 0;
    double weighted_loss = 0.0;
    for (const auto& u : updates) {
      total_samples += u.sample_count;
      weighted_loss += static_cast<double>(u.sample_count) * u.mean_loss;
    }
    record.train_loss = weighted_loss / static_cast<double>(total_samples);

    ctx.eval_model->set_params(w);
    record.eval = ctx.eval_model->evaluate();

    const double score = record.eval.primary();
    if (result.best_round < 0 || score > result.best_metric) {
      result.best_metric = score;
      result.best_round = t;
      result.best.params = ctx.eval_model->reparameterize();
      result.best.meta.clear();
      result.best.meta["model"] = ctx.cfg.model_name;
      result.best.meta["round"] = std::to_string(t);
      result.best.meta["metric"] = detail::format_metric(score);
      result.best.meta["optimizer"] = to_string(ctx.cfg.optimizer.kind);
    }

    record.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    result.rounds.push_back(std::move(record));
  }
  return result;
}

// ---- client side ----

struct ClientContext {
  Endpoint& endpoint;
  int client_id = 0;
  FederationConfig cfg;
  std::shared_ptr<LocalModel> model;
  Csprng& rng;
  PrivateKey rsa;  // generated by the caller, possibly under an RNG binding
  NonceRegistry* nonces = nullptr;
};

inline void run_client(ClientContext ctx) {
  ctx.cfg.validate();
  const uint16_t id = static_cast<uint16_t>(ctx.client_id);

  const Envelope reg = make_plain_envelope(PayloadKind::kPublicKey, 0, id,
                                           ctx.rsa.public_der());
  ctx.endpoint.send(0, reg.serialize());

  ClientTrainer trainer(ctx.model, ctx.cfg.train);
  const uint64_t train_seed = derive_seed(ctx.cfg.seed, "local-train",
                                          static_cast<uint64_t>(ctx.client_id));

  for (int t = 0; t < ctx.cfg.train.rounds; ++t) {
    const Envelope key_env = detail::parse_frame(ctx.endpoint.recv(0, ctx.cfg.timeout));
    if (key_env.kind != PayloadKind::kWrappedKey) {
      throw MalformedPayload("client " + std::to_string(ctx.client_id) +
                             " expected a wrapped key, got " +
                             std::string(to_string(key_env.kind)));
    }
    if (key_env.round != static_cast<uint32_t>(t)) {
      throw RoundMismatch("client " + std::to_string(ctx.client_id) + " expected round " +
                          std::to_string(t) + ", key envelope claims " +
                          std::to_string(key_env.round));
    }
    const RoundKey rk = unwrap_key(key_env.ciphertext, ctx.rsa, key_env.round);

    const Envelope model_env = detail::parse_frame(ctx.endpoint.recv(0, ctx.cfg.timeout));
    if (model_env.kind != PayloadKind::kGlobalModel) {
      throw MalformedPayload("client " + std::to_string(ctx.client_id) +
                             " expected the global model, got " +
                             std::string(to_string(model_env.kind)));
    }
    const std::vector<uint8_t> payload = open(model_env, rk);
    ModelPayload mp = decode_model_payload(payload);
    ctx.model->set_params(mp.params);
    const ParameterSet received = ctx.model->params();

    const TrainOutcome out = trainer.train_round(train_seed);

    // Pseudo-gradient: global minus locally trained weights.
    const ParameterSet delta = axpy(received, -1.0, out.weights);

    ByteWriter wtr;
    wtr.put_u64(out.sample_count);
    wtr.put_f64(out.mean_loss);
    const auto delta_payload = encode_fp16(delta);
    wtr.put_bytes(delta_payload);
    const Envelope up =
        seal(rk, PayloadKind::kClientUpdate, id, wtr.bytes(), ctx.rng, ctx.nonces);
    ctx.endpoint.send(0, up.serialize());
  }
}

// ---- whole-simulation driver ----

enum class TransportKind { kInProc, kSocket };

inline TransportKind transport_kind_from_string(const std::string& s) {
  if (s == "inproc") return TransportKind::kInProc;
  if (s == "socket") return TransportKind::kSocket;
  throw ConfigError("unknown transport '" + s + "'");
}

struct SimulationSetup {
  FederationConfig cfg;
  ParameterSet init;
  std::function<std::shared_ptr<LocalModel>(int)> client_model;  // ids 1..m
  std::shared_ptr<LocalModel> eval_model;
  TransportKind transport = TransportKind::kInProc;
  FrameObserver observer;           // sees every frame from the server's side
  bool deterministic_crypto = true; // seeded RSA/OAEP/nonce draws per participant
};

namespace detail {

struct ParticipantRngs {
  std::unique_ptr<Csprng> proto;    // nonces, passphrases, salts
  std::unique_ptr<Csprng> openssl;  // keygen, OAEP padding, blinding
};

inline ParticipantRngs make_rngs(const SimulationSetup& s, int rank) {
  ParticipantRngs r;
  if (s.deterministic_crypto) {
    r.proto = std::make_unique<SeededRng>(
        derive_seed(s.cfg.seed, "proto-rng", static_cast<uint64_t>(rank)));
    r.openssl = std::make_unique<SeededRng>(
        derive_seed(s.cfg.seed, "openssl-rng", static_cast<uint64_t>(rank)));
  } else {
    r.proto = std::make_unique<SystemRng>();
    r.openssl = std::make_unique<SystemRng>();
  }
  return r;
}

inline void client_thread_body(const SimulationSetup& setup, int id, Endpoint& ep,
                               NonceRegistry& nonces, std::exception_ptr& slot) {
  try {
    auto rngs = make_rngs(setup, id);
    OpensslRngBinding bind(*rngs.openssl);
    ClientContext ctx{ep,          id,
                      setup.cfg,   setup.client_model(id),
                      *rngs.proto, PrivateKey::generate(),
                      &nonces};
    run_client(std::move(ctx));
  } catch (...) {
    slot = std::current_exception();
  }
}

}  // namespace detail

inline FederationResult run_federation(const SimulationSetup& setup) {
  setup.cfg.validate();
  if (!setup.client_model) throw ConfigError("no client model factory given");
  const int m = setup.cfg.clients;
  std::vector<std::exception_ptr> client_errors(static_cast<size_t>(m) + 1);

  auto server_rngs = detail::make_rngs(setup, 0);
  NonceRegistry nonces;
  FederationResult result;
  std::exception_ptr server_error;

  if (setup.transport == TransportKind::kInProc) {
    InProcNetwork net(m);
    if (setup.observer) net.set_observer(setup.observer);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(m));
    for (int i = 1; i <= m; ++i) {
      threads.emplace_back([&, i] {
        detail::client_thread_body(setup, i, net.endpoint(i), nonces, client_errors[i]);
      });
    }
    try {
      OpensslRngBinding bind(*server_rngs.openssl);
      ServerContext ctx{net.endpoint(0), setup.cfg,          setup.init,
                        setup.eval_model, *server_rngs.proto, &nonces};
      result = run_server(std::move(ctx));
    } catch (...) {
      server_error = std::current_exception();
    }
    net.shutdown();
    for (auto& th : threads) th.join();
  } else {
    SocketNetwork net(m, setup.cfg.timeout);
    if (setup.observer) net.set_observer(setup.observer);
    const uint16_t port = net.port();
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(m));
    for (int i = 1; i <= m; ++i) {
      threads.emplace_back([&, i, port] {
        try {
          auto ep = SocketNetwork::connect_client(i, port);
          detail::client_thread_body(setup, i, *ep, nonces, client_errors[i]);
        } catch (...) {
          client_errors[i] = std::current_exception();
        }
      });
    }
    try {
      auto server_ep = net.server_endpoint();
      OpensslRngBinding bind(*server_rngs.openssl);
      ServerContext ctx{*server_ep,       setup.cfg,          setup.init,
                        setup.eval_model, *server_rngs.proto, &nonces};
      result = run_server(std::move(ctx));
      server_ep.reset();  // closes connections; clients past their last send exit cleanly
    } catch (...) {
      server_error = std::current_exception();
    }
    for (auto& th : threads) th.join();
  }

  if (server_error) std::rethrow_exception(server_error);
  for (int i = 1; i <= m; ++i) {
    if (client_errors[static_cast<size_t>(i)]) {
      try {
        std::rethrow_exception(client_errors[static_cast<size_t>(i)]);
      } catch (const TransportClosed&) {
        // The run finished from the server's point of view; a client cut off
        // mid-teardown is not an error.
      }
    }
  }
  return result;
}

}  // namespace fedsim
