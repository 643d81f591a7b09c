// Command-line front end: `run` an experiment or `partition` a network.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fedoptima/harness.hpp"
#include "fedoptima/spec_json.hpp"

using namespace fedoptima;

namespace {

constexpr int kExitConverged = 0;
constexpr int kExitError = 1;
constexpr int kExitExhausted = 2;
constexpr int kExitDeparted = 3;

int exit_code(ExitReason reason) {
  switch (reason) {
    case ExitReason::Converged: return kExitConverged;
    case ExitReason::MaxRounds:
    case ExitReason::TimeLimit: return kExitExhausted;
    case ExitReason::AllDeparted: return kExitDeparted;
  }
  return kExitError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated split-learning runtime and experiment harness"};
  app.require_subcommand(1);

  // run ----------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "Run one experiment and print a JSON summary");
  std::string config_file;
  std::vector<std::string> overrides;
  std::string mode;
  std::string transport;
  std::optional<std::size_t> devices, omega, omega_dev, batch, iters, rounds, patience, split;
  std::optional<std::uint64_t> seed, max_delay;
  std::optional<double> lr_device, lr_server, unstable_p, unstable_interval, time_limit;
  std::string metrics_out, events_out, speeds;

  run->add_option("--config", config_file, "Config file with key = value lines");
  run->add_option("--set", overrides, "Extra key=value settings, applied after the config file");
  run->add_option("--mode", mode, "fedoptima|fedavg|fedasync|syncsplit|oafl")
      ->check(CLI::IsMember({"fedoptima", "fedavg", "fedasync", "syncsplit", "oafl"}));
  run->add_option("--devices", devices, "Number of devices K");
  run->add_option("--seed", seed, "Random seed");
  run->add_option("--omega", omega, "Global activation budget");
  run->add_option("--omega-dev", omega_dev, "Per-device activation queue cap");
  run->add_option("--max-delay", max_delay, "Maximum staleness D");
  run->add_option("--batch-size", batch, "Minibatch size");
  run->add_option("--iters-per-round", iters, "Local iterations per round H");
  run->add_option("--rounds", rounds, "Maximum global rounds");
  run->add_option("--patience", patience, "Rounds without improvement before stopping");
  run->add_option("--split", split, "Fixed split index (0 lets the partitioner choose)");
  run->add_option("--lr-device", lr_device, "Device learning rate");
  run->add_option("--lr-server", lr_server, "Server learning rate");
  run->add_option("--speeds", speeds, "Comma-separated speed multipliers, one per device");
  run->add_option("--transport", transport, "inproc|socket")->check(CLI::IsMember({"inproc", "socket"}));
  run->add_option("--unstable-p", unstable_p, "Leave probability per churn interval");
  run->add_option("--unstable-interval", unstable_interval, "Churn interval in seconds");
  run->add_option("--time-limit", time_limit, "Stop after this many seconds");
  run->add_option("--metrics-out", metrics_out, "Per-round CSV output");
  run->add_option("--events-out", events_out, "Event log output (JSON lines)");

  // partition ----------------------------------------------------------------
  auto* part = app.add_subcommand("partition", "Choose a split point and print the plan as JSON");
  std::string part_config;
  part->add_option("--config", part_config, "JSON file with network and device profiles")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*part) {
      std::ifstream in(part_config);
      if (!in) throw std::runtime_error("cannot open " + part_config);
      const auto req = partition_request_from_json(nlohmann::json::parse(in));
      const auto plan = plan_split(req.network, req.batch_size, req.devices, req.classes, req.aux_depth);
      std::cout << plan_to_json(plan).dump(2) << '\n';
      return 0;
    }

    ExperimentConfig cfg;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw std::runtime_error("cannot open " + config_file);
      cfg = load_config(in);
    }
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!mode.empty()) cfg.mode = mode_from_string(mode);
    if (devices) cfg.devices = *devices;
    if (seed) cfg.seed = *seed;
    if (omega) cfg.omega = *omega;
    if (omega_dev) cfg.omega_dev = *omega_dev;
    if (max_delay) cfg.max_delay = *max_delay;
    if (batch) cfg.batch_size = *batch;
    if (iters) cfg.iters_per_round = *iters;
    if (rounds) cfg.server_rounds = *rounds;
    if (patience) cfg.patience = *patience;
    if (split) cfg.split = *split;
    if (lr_device) cfg.lr_device = static_cast<float>(*lr_device);
    if (lr_server) cfg.lr_server = static_cast<float>(*lr_server);
    if (!speeds.empty()) cfg.set("speed_multipliers", speeds);
    if (!transport.empty()) {
      cfg.transport = transport;
      if (transport == "socket") cfg.simulated = false;
    }
    if (unstable_p) {
      cfg.unstable = true;
      cfg.unstable_p = *unstable_p;
    }
    if (unstable_interval) cfg.unstable_interval = *unstable_interval;
    if (time_limit) cfg.time_limit = *time_limit;
    if (!metrics_out.empty()) cfg.metrics_out = metrics_out;
    if (!events_out.empty()) cfg.events_out = events_out;

    const auto result = run_experiment(cfg);
    std::cout << summary_json(result).dump(2) << '\n';
    if (!result.errors.empty()) {
      for (const auto& e : result.errors) std::cerr << "error: " << e << '\n';
      return kExitError;
    }
    return exit_code(result.reason());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
}
