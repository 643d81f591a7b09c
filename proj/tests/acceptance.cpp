// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fedoptima/harness.hpp"
#include "fedoptima/server.hpp"
#include "helpers.hpp"
#include "oracle.hpp"

using namespace fedoptima;
using namespace testing_helpers;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 ---------------------------------------------------------------------------

Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  std::map<LayerKind, std::size_t> kinds;
  std::size_t checked = 0, skipped = 0, bad = 0;
  double worst = 0.0;
  for (int net = 0; net < 100; ++net) {
    const auto spec = random_network(rng, 3);
    for (std::size_t i = 0; i < spec.size(); ++i) ++kinds[spec[i].kind];
    const auto params = init_parameters(spec, rng());
    const std::size_t batch = 3;
    const auto x = random_tensor(batch_shape(spec, batch), rng);
    const auto labels = random_labels(batch, 3, rng);
    auto fr = forward(spec, params, x, true);
    const auto grads = backward(*fr.tape, cross_entropy_loss(fr.output, labels).grad);
    const auto dp = oracle::to_double(params);
    const auto dx = oracle::to_double(x);

    auto check = [&](float analytic, double fd) {
      if (std::isnan(fd)) {
        ++skipped;
        return;
      }
      ++checked;
      const double err = oracle::relative_error(analytic, fd);
      worst = std::max(worst, err);
      if (!(err < 1e-3)) ++bad;
    };
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t j = 0; j < params.tensors[t].size(); ++j) {
        check(grads.params[t][j],
              oracle::central_difference(spec, dp, dx, batch, labels, 1e-3,
                                         [&](oracle::Params& p, oracle::Vec&, double h) { p.tensors[t][j] += h; }));
      }
    }
    for (std::size_t j = 0; j < x.size(); ++j) {
      check(grads.input[j], oracle::central_difference(spec, dp, dx, batch, labels, 1e-3,
                                                       [&](oracle::Params&, oracle::Vec& in, double h) { in[j] += h; }));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool all_kinds = kinds.size() == 5;
  return {bad == 0 && all_kinds && secs < 60.0 && checked > 20 * skipped,
          fmt("%zu gradients over %zu layer kinds, worst rel err %.2e, %zu kink skips, %.1f s", checked, kinds.size(),
              worst, skipped, secs)};
}

// 2 ---------------------------------------------------------------------------

Outcome split_forward() {
  std::mt19937_64 rng(12);
  double worst = 0.0;
  std::size_t splits = 0;
  for (const char* name : {"dense", "conv"}) {
    const auto spec = build_network(name, 16, 3);
    const auto params = init_parameters(spec, 9);
    for (auto l : spec.split_eligible()) {
      ++splits;
      const auto [head, tail] = split_parameters(spec, params, l);
      const auto x = random_tensor(batch_shape(spec, 100), rng);
      const auto whole = forward(spec, params, x, false).output;
      const auto mid = forward(spec.slice(0, l), head, x, false).output;
      const auto composed = forward(spec.slice(l, spec.size()), tail, mid, false).output;
      if (whole.shape() != composed.shape()) return {false, fmt("%s split %zu changes the output shape", name, l)};
      for (std::size_t i = 0; i < whole.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::abs(whole[i] - composed[i])));
      }
    }
  }
  return {worst <= 1e-5, fmt("%zu split points, 100 inputs each, max abs diff %.1e", splits, worst)};
}

// 3 ---------------------------------------------------------------------------

Outcome split_oracle() {
  NetworkProfile worked{{4e9, 8e6, true}, {4e9, 2e6, true}, {8e9, 1e6, true}};
  const auto ex = select_split(worked, {{1, 2e9, 4e6, 1.0}, {2, 4e9, 4e6, 1.0}});
  if (ex.split != 1 || ex.objective != 2.0) {
    return {false, fmt("worked example gave split %zu objective %g", ex.split, ex.objective)};
  }

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  std::size_t agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t layers = 2 + rng() % 6;
    std::vector<double> flops, bytes;
    std::vector<bool> allowed;
    NetworkProfile prof;
    for (std::size_t i = 0; i < layers; ++i) {
      flops.push_back(u(rng) * 1e9);
      bytes.push_back(u(rng) * 1e6);
      allowed.push_back(i + 1 < layers && rng() % 4 != 0);
    }
    if (std::none_of(allowed.begin(), allowed.end(), [](bool b) { return b; })) allowed[0] = true;
    for (std::size_t i = 0; i < layers; ++i) prof.push_back({flops[i], bytes[i], allowed[i]});
    std::vector<DeviceProfile> devices;
    std::vector<double> of, bw;
    const std::size_t k = 1 + rng() % 6;
    for (std::size_t i = 0; i < k; ++i) {
      const double mult = 1.0 + static_cast<double>(rng() % 8);
      devices.push_back({static_cast<std::uint32_t>(i + 1), u(rng) * 1e9, u(rng) * 1e6, mult});
      of.push_back(devices.back().flops_per_sec / mult);
      bw.push_back(devices.back().bandwidth_bytes_per_sec);
    }
    const auto [best, value] = oracle::best_split(flops, bytes, allowed, of, bw);
    const auto choice = select_split(prof, devices);
    if (choice.split == best && std::abs(choice.objective - value) <= 1e-12 * value) ++agree;
  }
  return {agree == 200, fmt("worked example l=1 objective 2.0 s; %zu/200 random instances agree", agree)};
}

// 4 ---------------------------------------------------------------------------

struct StressStats {
  std::size_t peak_queue = 0;
  std::size_t peak_resident = 0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t batch_bytes = 0;
  std::size_t consumed = 0;
  std::vector<std::string> errors;
};

/// K devices with random compute and link delays feed one scheduler whose
/// consumer has a random service time. Grants reach a device only on its
/// next poll, so both directions have messages in flight.
StressStats flow_stress(std::size_t K, std::size_t omega, std::size_t messages, std::uint64_t seed) {
  auto env = make_sim_env();
  const std::size_t omega_dev = (omega + K - 1) / K;
  std::vector<std::unique_ptr<Channel<int>>> grants;
  for (std::size_t k = 0; k < K; ++k) grants.push_back(std::make_unique<Channel<int>>(*env, 4));
  TaskScheduler sched(*env, K, omega_dev, [&](DeviceId k) { grants[k - 1]->push(1); });
  StressStats st;
  bool done = false;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  ActivationBatch proto{Tensor::zeros({32, 64}), std::vector<std::uint32_t>(32, 0), 1, 0};
  st.batch_bytes = resident_bytes(proto);

  for (std::size_t k = 1; k <= K; ++k) {
    const double speed = 1.0 + static_cast<double>(rng() % 8);
    env->spawn("device", [&, k, speed] {
      bool active = true;
      std::uint64_t seq = 0;
      while (!done) {
        env->sleep_until(env->now() + 0.01 * speed * (0.5 + u(rng)));
        int g = 0;
        while (grants[k - 1]->pop_until(g, env->now()) == ChannelStatus::Ok) active = true;
        if (!active || done) continue;
        active = false;
        env->sleep_until(env->now() + 0.02 * u(rng));
        auto b = proto;
        b.origin = static_cast<DeviceId>(k);
        b.sequence = seq++;
        sched.put(Message::activation(std::move(b)));
      }
    });
  }
  env->spawn("consumer", [&] {
    while (st.consumed < messages) {
      if (!sched.wait_for_work(env->now() + 1.0)) continue;
      if (!sched.get()) continue;
      ++st.consumed;
      for (std::size_t k = 1; k <= K; ++k) {
        st.peak_queue = std::max(st.peak_queue, sched.queue_length(static_cast<DeviceId>(k)));
      }
      // Alternate between a fast and a slow server so queues both drain and fill.
      const double service = (st.consumed / 500) % 2 == 0 ? 0.0005 : 0.01;
      env->sleep_until(env->now() + service * (0.5 + u(rng)));
    }
    done = true;
    sched.close();
  });
  st.errors = env->run();
  st.peak_queue = std::max(st.peak_queue, sched.peak_queue_length());
  st.peak_resident = sched.peak_resident_batches();
  st.peak_bytes = sched.peak_resident_bytes();
  return st;
}

Outcome flow_control() {
  constexpr std::size_t K = 8;
  std::string detail;
  bool pass = true;
  for (std::size_t omega : {8, 16, 24}) {
    const std::size_t omega_dev = (omega + K - 1) / K;
    const auto st = flow_stress(K, omega, 10000, omega);
    const bool ok = st.errors.empty() && st.consumed == 10000 && st.peak_queue <= omega_dev &&
                    st.peak_resident <= K * omega_dev && st.peak_bytes <= (omega + 1) * st.batch_bytes;
    pass = pass && ok;
    detail += fmt("w=%zu: queue %zu/%zu resident %zu/%zu bytes %.2f budgets; ", omega, st.peak_queue, omega_dev,
                  st.peak_resident, K * omega_dev, static_cast<double>(st.peak_bytes) / (omega * st.batch_bytes));
    if (!st.errors.empty()) detail += st.errors.front() + "; ";
  }

  // The whole runtime under server pressure.
  ExperimentConfig c;
  c.devices = K;
  c.speed_multipliers = {1, 2, 3, 4, 5, 6, 7, 8};
  c.server_flops = 2e8;
  c.server_rounds = 1000000;
  c.patience = 1000000;
  c.time_limit = 120.0;
  const auto r = run_experiment(c);
  const std::size_t omega_dev = (c.omega + K - 1) / K;
  ActivationBatch proto{Tensor::zeros({c.batch_size, r.plan.device_spec.output_dims()[0]}),
                        std::vector<std::uint32_t>(c.batch_size, 0), 1, 0};
  const auto act = resident_bytes(proto);
  const bool ok = r.errors.empty() && r.server.train_steps >= 10000 &&
                  r.server.peak_resident_batches <= K * omega_dev &&
                  r.server.peak_resident_bytes <= (c.omega + 1) * act;
  pass = pass && ok;
  detail += fmt("runtime: %llu steps, resident %zu/%zu", static_cast<unsigned long long>(r.server.train_steps),
                r.server.peak_resident_batches, K * omega_dev);
  return {pass, detail};
}

// 5 ---------------------------------------------------------------------------

bool audit(const DequeueRecord& rec) {
  const std::size_t chosen = rec.chosen - 1;
  if (chosen >= rec.queue_lengths.size() || rec.queue_lengths[chosen] == 0) return false;
  for (std::size_t j = 0; j < rec.counters.size(); ++j) {
    if (rec.queue_lengths[j] == 0) continue;
    if (rec.counters[j] < rec.counters[chosen]) return false;
    if (rec.counters[j] == rec.counters[chosen] && j < chosen) return false;
  }
  return true;
}

Outcome fairness() {
  auto env = make_sim_env();
  std::mt19937_64 rng(15);
  constexpr std::size_t K = 6;
  auto message = [](DeviceId k) {
    return Message::activation({Tensor::zeros({2, 3}), {0, 0}, k, 0});
  };

  // Random arrivals: only devices with room send, as flow control allows.
  TaskScheduler random_sched(*env, K, 4);
  random_sched.enable_trace(true);
  for (int op = 0; op < 20000; ++op) {
    if (rng() % 2 == 0) {
      const auto k = static_cast<DeviceId>(1 + rng() % K);
      if (random_sched.queue_length(k) < 4) random_sched.put(message(k));
    } else {
      random_sched.get();
    }
  }
  const auto t1 = random_sched.trace();
  const auto ok1 = std::count_if(t1.begin(), t1.end(), audit);

  // Saturated equal arrivals.
  TaskScheduler sat(*env, K, 3);
  sat.enable_trace(true);
  for (DeviceId k = 1; k <= K; ++k) {
    for (int i = 0; i < 3; ++i) sat.put(message(k));
  }
  for (int i = 0; i < 5000; ++i) sat.put(message(sat.get()->origin));
  const auto t2 = sat.trace();
  std::uint64_t spread = 0;
  std::size_t ok2 = 0;
  for (const auto& rec : t2) {
    const auto [lo, hi] = std::minmax_element(rec.counters.begin(), rec.counters.end());
    spread = std::max(spread, *hi - *lo);
    if (audit(rec)) ++ok2;
  }
  return {static_cast<std::size_t>(ok1) == t1.size() && ok2 == t2.size() && spread <= 1,
          fmt("random trace %zu/%zu minimal; saturated %zu/%zu minimal, max spread %llu", static_cast<std::size_t>(ok1),
              t1.size(), ok2, t2.size(), static_cast<unsigned long long>(spread))};
}

// 6 ---------------------------------------------------------------------------

ParameterSet random_params(std::mt19937_64& rng) {
  ParameterSet p;
  p.tensors.push_back(random_tensor({3, 4}, rng));
  p.tensors.push_back(random_tensor({4}, rng));
  return p;
}

Outcome staleness() {
  std::mt19937_64 rng(16);
  constexpr std::uint64_t D = 4;
  std::size_t law_ok = 0, law_total = 0;
  for (int trial = 0; trial < 50; ++trial) {
    for (std::uint64_t s = 0; s <= D + 2; ++s) {
      GlobalDeviceModel g{random_params(rng), random_params(rng), 10};
      const ModelUpdate u{random_params(rng), random_params(rng), 10 - s};
      const auto before = g;
      aggregate(g, u, D);
      ++law_total;
      bool ok = true;
      if (s > D) {
        ok = g.version == before.version && g.device_params.tensors == before.device_params.tensors &&
             g.aux_params.tensors == before.aux_params.tensors;
      } else {
        const float alpha = 1.0F / static_cast<float>(s + 1);
        auto expect = [&](const ParameterSet& old, const ParameterSet& local, const ParameterSet& got) {
          for (std::size_t t = 0; t < old.size(); ++t) {
            for (std::size_t j = 0; j < old.tensors[t].size(); ++j) {
              const float want = alpha * local.tensors[t][j] + (1.0F - alpha) * old.tensors[t][j];
              if (got.tensors[t][j] != want) ok = false;
            }
          }
        };
        expect(before.device_params, u.device_params, g.device_params);
        expect(before.aux_params, u.aux_params, g.aux_params);
        ok = ok && g.version == before.version + 1;
      }
      if (ok) ++law_ok;
    }
  }

  GlobalDeviceModel g{random_params(rng), random_params(rng), 0};
  std::uint64_t accepted = 0;
  bool events_ok = true;
  for (int e = 0; e < 1000; ++e) {
    const std::uint64_t lag = rng() % (D + 4);
    const std::uint64_t base = g.version >= lag ? g.version - lag : 0;
    const auto before = g;
    const auto r = aggregate(g, {random_params(rng), random_params(rng), base}, D);
    if (r.accepted) ++accepted;
    if (r.accepted != (before.version - base <= D)) events_ok = false;
    if (!r.accepted && (g.device_params.tensors != before.device_params.tensors || g.version != before.version)) {
      events_ok = false;
    }
  }
  events_ok = events_ok && g.version == accepted;
  return {law_ok == law_total && events_ok,
          fmt("%zu/%zu staleness cases exact; after 1000 events version %llu = accepted %llu", law_ok, law_total,
              static_cast<unsigned long long>(g.version), static_cast<unsigned long long>(accepted))};
}

// 7 ---------------------------------------------------------------------------

ExperimentConfig desk(Mode mode, std::uint64_t seed = 1) {
  ExperimentConfig c;
  c.mode = mode;
  c.devices = 4;
  c.speed_multipliers = {1, 2, 4, 8};
  c.seed = seed;
  return c;
}

double centralized_accuracy(const ExperimentConfig& c) {
  const auto data = gen_blobs(derive_seed(c.seed, 1), c.samples / c.classes, c.classes, c.dim, c.spread);
  const auto net = build_network(c.network, c.dim, c.classes);
  const auto init = init_parameters(net, derive_seed(c.seed, 3));
  // Twenty passes over the training set.
  const std::size_t steps = 20 * data.train.size() / c.batch_size;
  const auto p = centralized_sgd(net, init, data.train, c.batch_size, c.lr_device, steps, derive_seed(c.seed, 101));
  return network_accuracy(net, p, data.validation);
}

Outcome learning() {
  // Both train for the whole three-minute budget.
  auto budget = [](Mode m) {
    auto c = desk(m);
    c.time_limit = 180.0;
    c.server_rounds = 1000000;
    c.patience = 1000000;
    return c;
  };
  const auto fo_cfg = budget(Mode::FedOptima);
  const auto avg_cfg = budget(Mode::FedAvg);
  const auto fo = run_experiment(fo_cfg);
  const auto avg = run_experiment(avg_cfg);
  const double central = centralized_accuracy(fo_cfg);
  if (!fo.errors.empty() || !avg.errors.empty()) return {false, "run failed"};

  double reached_at = -1.0;
  for (const auto& r : fo.server.rounds) {
    if (r.accuracy >= 0.95 * central) {
      reached_at = r.time;
      break;
    }
  }
  const bool reach = reached_at >= 0.0 && reached_at <= 180.0;

  std::size_t checkpoints = 0, behind = 0;
  double worst_gap = 0.0;
  for (std::size_t i = 2; i < avg.server.rounds.size(); ++i) {
    const auto& r = avg.server.rounds[i];
    const double a = accuracy_at(fo.server.rounds, r.time);
    ++checkpoints;
    if (a < r.accuracy) {
      ++behind;
      worst_gap = std::max(worst_gap, r.accuracy - a);
    }
  }
  return {reach && behind == 0 && checkpoints > 0,
          fmt("centralized %.3f; FedOptima reaches 95%% of it at %.1f s, final %.3f vs FedAvg %.3f; behind FedAvg "
              "at %zu/%zu checkpoints (worst by %.3f)",
              central, reached_at, fo.final_accuracy, avg.final_accuracy, behind, checkpoints, worst_gap)};
}

// 8 ---------------------------------------------------------------------------

double mean_device(std::size_t K, const std::function<double(int)>& f) {
  double s = 0.0;
  for (std::size_t k = 1; k <= K; ++k) s += f(static_cast<int>(k));
  return s / static_cast<double>(K);
}

Outcome idle_time() {
  std::size_t good = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    // Each seed shuffles which device is slow and draws its own links.
    std::mt19937_64 rng(seed);
    std::vector<double> speeds{1, 2, 4, 8}, links;
    std::shuffle(speeds.begin(), speeds.end(), rng);
    std::uniform_real_distribution<double> bw(5e6, 20e6);
    for (int k = 0; k < 4; ++k) links.push_back(bw(rng));
    auto cfg = [&](Mode m) {
      auto c = desk(m, seed);
      c.speed_multipliers = speeds;
      c.bandwidths = links;
      c.server_rounds = 40;
      c.patience = 1000;
      return c;
    };
    const auto fo = run_experiment(cfg(Mode::FedOptima));
    const auto sync = run_experiment(cfg(Mode::SyncSplit));
    const auto avg = run_experiment(cfg(Mode::FedAvg));
    if (!fo.errors.empty() || !sync.errors.empty() || !avg.errors.empty()) continue;
    const std::size_t K = 4;
    auto type2 = [&](const MetricsRecord& m) {
      return mean_device(K, [&](int k) { return m.idle.count(k) ? m.idle.at(k).type2 : 0.0; });
    };
    auto frac = [&](const MetricsRecord& m) {
      return mean_device(K, [&](int k) { return m.idle_fraction(k); });
    };
    const double fo_t2 = type2(fo.metrics);
    const double fo_dev = frac(fo.metrics), sync_dev = frac(sync.metrics);
    const double fo_srv = fo.metrics.idle_fraction(0), avg_srv = avg.metrics.idle_fraction(0);
    const bool ok = fo_t2 == 0.0 && fo_dev <= 0.5 * sync_dev && fo_srv <= 0.5 * avg_srv;
    if (ok) ++good;
    detail += fmt("[seed %llu: dev %.3f vs %.3f, srv %.3f vs %.3f] ", static_cast<unsigned long long>(seed), fo_dev,
                  sync_dev, fo_srv, avg_srv);
  }
  return {good >= 4, fmt("%zu/5 seeds hold; ", good) + detail};
}

// 9 ---------------------------------------------------------------------------

Outcome communication() {
  auto cfg = [](Mode m) {
    auto c = desk(m);
    c.server_rounds = 40;
    c.patience = 1000;
    return c;
  };
  const auto fo = run_experiment(cfg(Mode::FedOptima));
  const auto oafl = run_experiment(cfg(Mode::Oafl));
  if (!fo.errors.empty() || !oafl.errors.empty()) return {false, "run failed"};
  const double ratio = fo.metrics.bytes_per_round / oafl.metrics.bytes_per_round;
  return {ratio <= 0.70, fmt("bytes per pass over the data: FedOptima %.3g, OAFL %.3g, ratio %.3f",
                             fo.metrics.bytes_per_round, oafl.metrics.bytes_per_round, ratio)};
}

// 10 --------------------------------------------------------------------------

Outcome heterogeneity() {
  double hom = 0.0, het = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto h = desk(Mode::FedOptima, seed);
    h.speed_multipliers = {1, 1, 1, 1};
    const auto a = run_experiment(h);
    const auto b = run_experiment(desk(Mode::FedOptima, seed));
    if (!a.errors.empty() || !b.errors.empty()) return {false, "run failed"};
    hom += a.final_accuracy / 3.0;
    het += b.final_accuracy / 3.0;
  }
  const double diff = std::abs(hom - het) * 100.0;
  return {diff <= 2.0, fmt("mean final accuracy homogeneous %.4f, heterogeneous %.4f, |diff| %.2f pp", hom, het, diff)};
}

// 11 --------------------------------------------------------------------------

struct GapReport {
  double worst = 0.0;
  std::size_t steps = 0;
};

/// Largest gap between server training steps (or from a device coming
/// alive to the next step) while at least one device is present.
GapReport step_gaps(const ExperimentResult& r) {
  std::map<int, bool> alive;
  for (std::size_t k = 1; k <= r.config.devices; ++k) alive[static_cast<int>(k)] = true;
  auto any_alive = [&] {
    return std::any_of(alive.begin(), alive.end(), [](const auto& kv) { return kv.second; });
  };
  GapReport g;
  double since = 0.0;  // start of the current alive stretch, or last step
  bool open = true;
  const double end = r.metrics.wall_clock;
  for (const auto& e : r.events) {
    if (e.entity == kHarnessEntity && (e.type == "leave" || e.type == "join")) {
      const bool was = any_alive();
      alive[e.data.at("device").get<int>()] = e.type == "join";
      const bool now = any_alive();
      if (was && !now) {
        g.worst = std::max(g.worst, e.time - since);
        open = false;
      } else if (!was && now) {
        since = e.time;
        open = true;
      }
    } else if (e.entity == 0 && e.type == "train_step") {
      ++g.steps;
      if (open) g.worst = std::max(g.worst, e.time - since);
      since = e.time;
    }
  }
  if (open) g.worst = std::max(g.worst, end - since);
  return g;
}

Outcome churn() {
  auto cfg = [](Mode m) {
    auto c = desk(m);
    c.unstable = true;
    c.unstable_p = 0.3;
    c.unstable_interval = 5.0;
    c.time_limit = 120.0;
    c.server_rounds = 1000000;
    c.patience = 1000000;
    return c;
  };
  const auto fo = run_experiment(cfg(Mode::FedOptima));
  const auto sync = run_experiment(cfg(Mode::SyncSplit));
  if (!fo.errors.empty() || !sync.errors.empty()) return {false, "run failed"};
  const auto a = step_gaps(fo);
  const auto b = step_gaps(sync);
  std::size_t leaves = 0;
  for (const auto& e : fo.events) leaves += e.type == "leave" ? 1 : 0;
  return {a.worst <= 5.0 && b.worst > 5.0 && leaves > 0,
          fmt("%zu departures; FedOptima worst step gap %.2f s over %zu steps; SyncSplit worst gap %.2f s", leaves,
              a.worst, a.steps, b.worst)};
}

// 12 --------------------------------------------------------------------------

Outcome memory() {
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> u(1e5, 1e8);
  std::size_t ok = 0, total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const double model = u(rng), act = u(rng) / 10.0;
    const std::size_t omega = 1 + rng() % 32;
    const double fixed = estimate_memory(MemoryModel::FedOptima, 1, model, act, omega);
    for (std::size_t k = 1; k <= 64; ++k) {
      ++total;
      const double kd = static_cast<double>(k);
      const bool lin = estimate_memory(MemoryModel::Oafl, k, model, act, omega) == (kd + 1.0) * model + kd * act;
      const bool flat = estimate_memory(MemoryModel::FedOptima, k, model, act, omega) == fixed &&
                        fixed == model + static_cast<double>(omega) * act;
      if (lin && flat) ++ok;
    }
  }
  return {ok == total, fmt("%zu/%zu (K, model, activation) cases exact", ok, total)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},     {"split-forward equivalence", split_forward},
      {"split-point oracle", split_oracle},    {"flow-control safety", flow_control},
      {"scheduler fairness", fairness},        {"staleness law", staleness},
      {"desk-scale learning", learning},       {"idle-time reduction", idle_time},
      {"communication reduction", communication}, {"heterogeneity robustness", heterogeneity},
      {"churn liveness", churn},               {"memory estimators", memory},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s  %2zu %-26s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
