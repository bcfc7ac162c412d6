#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fedsim/fed_optim.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

namespace {

ParameterSet scalar_set(double v) {
  return ParameterSet({{"w", ParamGroup::kDecay, {1}, {v}}});
}

double scalar(const ParameterSet& p) { return p.entries()[0].values[0]; }

ParameterSet random_set(DetRng& rng, const std::vector<uint32_t>& dims) {
  std::vector<ParamEntry> entries;
  for (size_t i = 0; i < dims.size(); ++i) {
    std::vector<double> values(dims[i]);
    for (auto& v : values) v = rng.next_normal();
    entries.push_back({"e" + std::to_string(i),
                       static_cast<ParamGroup>(i % 3),
                       {dims[i]},
                       std::move(values)});
  }
  return ParameterSet(std::move(entries));
}

}  // namespace

TEST_CASE("aggregation is the sample-weighted mean") {
  std::vector<ClientUpdate> updates;
  updates.push_back({1, 1, scalar_set(4.0), 0.0});
  updates.push_back({2, 3, scalar_set(0.0), 0.0});
  REQUIRE(scalar(aggregate(updates)) == 1.0);  // (1*4 + 3*0) / 4

  updates[1].sample_count = 1;
  REQUIRE(scalar(aggregate(updates)) == 2.0);
}

TEST_CASE("aggregation matches a naive per-element oracle") {
  DetRng rng(991);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t clients = 1 + rng.next_below(6);
    const std::vector<uint32_t> dims{1 + static_cast<uint32_t>(rng.next_below(7)),
                                     1 + static_cast<uint32_t>(rng.next_below(5))};
    std::vector<ClientUpdate> updates;
    for (size_t c = 0; c < clients; ++c) {
      updates.push_back({static_cast<int>(c + 1), 1 + rng.next_below(100),
                         random_set(rng, dims), 0.0});
    }
    const ParameterSet got = aggregate(updates);

    double total = 0.0;
    for (const auto& u : updates) total += static_cast<double>(u.sample_count);
    for (size_t e = 0; e < dims.size(); ++e) {
      for (size_t j = 0; j < dims[e]; ++j) {
        double acc = 0.0;
        for (const auto& u : updates) {
          acc += static_cast<double>(u.sample_count) / total * u.delta.entries()[e].values[j];
        }
        REQUIRE(std::fabs(got.entries()[e].values[j] - acc) <= 1e-12);
      }
    }
  }
}

TEST_CASE("aggregation rejects empty rounds and mismatched shapes") {
  REQUIRE_THROWS_AS(aggregate(std::span<const ClientUpdate>{}), EmptyRound);

  std::vector<ClientUpdate> zero{{1, 0, scalar_set(1.0), 0.0}};
  REQUIRE_THROWS_AS(aggregate(zero), EmptyRound);

  std::vector<ClientUpdate> mixed;
  mixed.push_back({1, 1, scalar_set(1.0), 0.0});
  mixed.push_back({2, 1, ParameterSet({{"other", ParamGroup::kBias, {1}, {1.0}}}), 0.0});
  REQUIRE_THROWS_AS(aggregate(mixed), ShapeMismatch);
}

TEST_CASE("plain averaging subtracts the scaled delta") {
  ServerOptConfig cfg;
  cfg.kind = ServerOptKind::kFedAvg;
  cfg.lr = 0.25;
  ServerOptimizer opt(cfg, scalar_set(0.0));
  ParameterSet w = scalar_set(10.0);
  w = opt.step(w, scalar_set(4.0));
  REQUIRE(scalar(w) == 9.0);
  w = opt.step(w, scalar_set(-4.0));
  REQUIRE(scalar(w) == 10.0);
}

TEST_CASE("server momentum accumulates an undamped velocity") {
  ServerOptConfig cfg;
  cfg.kind = ServerOptKind::kFedAvgM;
  cfg.lr = 2.0;
  cfg.momentum = 0.5;
  ServerOptimizer opt(cfg, scalar_set(0.0));

  double w = 100.0, v = 0.0;
  ParameterSet wp = scalar_set(w);
  for (double d : {1.0, -0.5, 2.0, 0.0, 0.25}) {
    wp = opt.step(wp, scalar_set(d));
    v = 0.5 * v + d;
    w -= 2.0 * v;
    REQUIRE(scalar(wp) == w);
  }
}

TEST_CASE("zero-momentum server momentum collapses to plain averaging") {
  ServerOptConfig avg;
  avg.kind = ServerOptKind::kFedAvg;
  avg.lr = 0.7;
  ServerOptConfig avgm = avg;
  avgm.kind = ServerOptKind::kFedAvgM;
  avgm.momentum = 0.0;

  DetRng rng(7);
  ParameterSet shape = random_set(rng, {4, 3});
  ServerOptimizer a(avg, shape), b(avgm, shape);
  ParameterSet wa = shape, wb = shape;
  for (int i = 0; i < 50; ++i) {
    const ParameterSet d = random_set(rng, {4, 3});
    wa = a.step(wa, d);
    wb = b.step(wb, d);
    for (size_t e = 0; e < wa.entries().size(); ++e) {
      REQUIRE(wa.entries()[e].values == wb.entries()[e].values);  // bitwise
    }
  }
}

TEST_CASE("adagrad accumulates squared deltas without decay") {
  // With beta1 = 0 the first moment is the delta itself, which isolates the
  // accumulator rule: s += d^2, w -= lr * d / (sqrt(s) + tau).
  ServerOptConfig cfg;
  cfg.kind = ServerOptKind::kFedAdagrad;
  cfg.lr = 1.0;
  cfg.beta1 = 0.0;
  cfg.tau = 1e-3;
  ServerOptimizer opt(cfg, scalar_set(0.0));

  ParameterSet w = scalar_set(0.0);
  w = opt.step(w, scalar_set(3.0));
  const double s1 = 9.0;
  const double w1 = 0.0 - 3.0 / (std::sqrt(s1) + 1e-3);
  REQUIRE(scalar(w) == w1);

  w = opt.step(w, scalar_set(4.0));
  const double s2 = 9.0 + 16.0;
  const double w2 = w1 - 4.0 / (std::sqrt(s2) + 1e-3);
  REQUIRE(scalar(w) == w2);
  REQUIRE(scalar(opt.accumulator_state()) == 25.0);
}

TEST_CASE("adaptive rules match an independent scalar recurrence") {
  for (ServerOptKind kind :
       {ServerOptKind::kFedAdagrad, ServerOptKind::kFedAdam, ServerOptKind::kFedYogi}) {
    ServerOptConfig cfg;
    cfg.kind = kind;
    cfg.lr = 0.3;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.99;
    cfg.tau = 1e-3;
    ServerOptimizer opt(cfg, scalar_set(0.0));

    double w = 1.0, m = 0.0, s = 0.0;
    ParameterSet wp = scalar_set(w);
    DetRng rng(static_cast<uint64_t>(kind) + 17);
    for (int t = 0; t < 100; ++t) {
      const double d = rng.next_normal();
      wp = opt.step(wp, scalar_set(d));

      m = 0.9 * m + (1.0 - 0.9) * d;
      const double d2 = d * d;
      if (kind == ServerOptKind::kFedAdagrad) {
        s += d2;
      } else if (kind == ServerOptKind::kFedAdam) {
        s = 0.99 * s + (1.0 - 0.99) * d2;
      } else {
        const double diff = s - d2;
        const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        s -= (1.0 - 0.99) * d2 * sgn;
      }
      w -= 0.3 * m / (std::sqrt(s) + 1e-3);
      REQUIRE(scalar(wp) == w);
    }
  }
}

TEST_CASE("yogi moves its accumulator toward the squared delta") {
  ServerOptConfig cfg;
  cfg.kind = ServerOptKind::kFedYogi;
  cfg.beta1 = 0.0;
  ServerOptimizer opt(cfg, scalar_set(0.0));

  ParameterSet w = scalar_set(0.0);
  w = opt.step(w, scalar_set(2.0));  // s=0 < 4 -> s grows
  const double s1 = scalar(opt.accumulator_state());
  REQUIRE(s1 == (1.0 - 0.99) * 4.0);

  w = opt.step(w, scalar_set(0.1));  // s now exceeds 0.1^2 -> s shrinks
  const double s2 = scalar(opt.accumulator_state());
  REQUIRE(s2 == s1 - (1.0 - 0.99) * (0.1 * 0.1));
}

TEST_CASE("hyperparameters are validated") {
  ServerOptConfig cfg;
  cfg.lr = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), InvalidHyperparameter);
  cfg.lr = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), InvalidHyperparameter);
  cfg.lr = 1.0;
  cfg.momentum = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), InvalidHyperparameter);
  cfg.momentum = 0.0;
  cfg.beta2 = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), InvalidHyperparameter);
  cfg.beta2 = 0.99;
  cfg.tau = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), InvalidHyperparameter);
  cfg.tau = 1e-3;
  REQUIRE_NOTHROW(cfg.validate());

  REQUIRE_THROWS_AS(server_opt_kind_from_string("sgd"), ConfigError);
  REQUIRE(server_opt_kind_from_string("fedyogi") == ServerOptKind::kFedYogi);
  REQUIRE(std::string(to_string(ServerOptKind::kFedAdagrad)) == "fedadagrad");
}

TEST_CASE("optimizer state snapshots are independent copies") {
  ServerOptConfig cfg;
  cfg.kind = ServerOptKind::kFedAvgM;
  cfg.momentum = 0.9;
  ServerOptimizer opt(cfg, scalar_set(0.0));
  ParameterSet w = scalar_set(5.0);
  w = opt.step(w, scalar_set(1.0));

  ServerOptimizer snapshot = opt;
  ParameterSet w2 = opt.step(w, scalar_set(1.0));
  // The snapshot still holds the older momentum and reproduces the same step.
  ParameterSet w2_replay = snapshot.step(w, scalar_set(1.0));
  REQUIRE(scalar(w2) == scalar(w2_replay));
}
