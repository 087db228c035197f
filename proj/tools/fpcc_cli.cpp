// SPDX-License-Identifier: Apache-2.0
// Command-line front end: training, evaluation, attacks, ablations, sweeps
// and report emission driven by a JSON run config.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "fpcc/errors.hpp"
#include "fpcc/harness.hpp"

namespace {

using namespace fpcc;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::string> attack;
  std::optional<double> epsilon;
  std::optional<std::size_t> steps;
  std::optional<double> gamma;
  std::optional<double> lambda;
  std::string format = "csv";
  std::string params;
  std::string surrogate;
  std::string manifest;
  std::vector<double> gammas = {0.0, 0.1, 0.2, 0.3, 0.5, 0.7};
  std::size_t train_per_class = 300;
  std::size_t test_per_class = 50;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Run config (JSON)");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--gamma", o.gamma, "CFS drop probability");
  cmd->add_option("--lambda", o.lambda, "Pattern-loss weight");
  cmd->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
}

void add_attack(CLI::App* cmd, Options& o) {
  cmd->add_option("--attack", o.attack, "fgsm, bim, mim, pgd-linf, pgd-l2 or eot-pgd");
  cmd->add_option("--epsilon", o.epsilon, "Perturbation budget");
  cmd->add_option("--steps", o.steps, "Attack iterations");
}

/// Config file patched with the command-line overrides, then validated.
RunConfig resolve(const Options& o) {
  Json j = Json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw IoError("cannot open config " + o.config);
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.gamma) j["fpcc"]["gamma"] = *o.gamma;
  if (o.lambda) j["fpcc"]["lambda"] = *o.lambda;
  if (o.attack) {
    Json a = {{"name", *o.attack}};
    if (o.epsilon) a["epsilon"] = *o.epsilon;
    if (o.steps) a["steps"] = *o.steps;
    j["attacks"] = Json::array({a});
  } else if (o.epsilon || o.steps) {
    if (!j.contains("attacks")) j["attacks"] = Json::array({{{"name", "pgd-linf"}}});
    for (auto& a : j["attacks"]) {
      if (o.epsilon) a["epsilon"] = *o.epsilon;
      if (o.steps) a["steps"] = *o.steps;
    }
  }
  return RunConfig::from_json(j);
}

std::string ext(const Options& o) { return "." + o.format; }

void write_table(const Options& o, const std::string& stem, const std::string& csv,
                 const Json& json) {
  const fs::path path = fs::path(o.out) / (stem + ext(o));
  const auto hash = write_text(path, o.format == "csv" ? csv : json.dump(2) + "\n");
  std::cout << path.string() << "  sha256 " << hash << "\n";
}

void print_metrics(const Metrics& m) {
  std::cout << "clean accuracy " << m.clean_accuracy << "\n";
  for (const auto& r : m.robust)
    std::cout << r.attack << " eps " << r.epsilon << " robust accuracy " << r.robust_accuracy
              << "\n";
  std::cout << "input-gradient norm " << m.input_gradient_norm << "\n";
}

int cmd_train(const Options& o) {
  const auto cfg = resolve(o);
  const auto data = load_datasets(cfg.data);
  auto res = run(cfg, data);
  const fs::path dir(o.out);
  save_params(res.params, dir / "params.bin");
  res.manifest.hashes["params.bin"] = sha256_file(dir / "params.bin");
  for (const auto& site : res.bank.sites) {
    const std::string name = "bank_" + site + ".csv";
    res.manifest.hashes[name] = write_text(dir / name, bank_csv(res.bank, site));
  }
  emit_report(res.manifest, dir, o.format);
  for (const auto& e : res.manifest.epochs) {
    std::cout << "epoch " << e.epoch << " ce " << e.cross_entropy;
    for (const auto& [s, v] : e.pattern) std::cout << " pt[" << s << "] " << v;
    std::cout << " total " << e.total << "\n";
  }
  if (res.manifest.diverged_epoch) {
    std::cerr << "diverged at epoch " << *res.manifest.diverged_epoch << ": "
              << res.manifest.divergence << "\n";
    return 3;
  }
  print_metrics(res.manifest.metrics);
  return 0;
}

int cmd_evaluate(const Options& o) {
  if (o.params.empty()) throw ConfigError("--params is required");
  const auto cfg = resolve(o);
  const auto data = load_datasets(cfg.data);
  const auto params = load_params(o.params);
  const auto m = evaluate(cfg.network, params, data.test, cfg.attacks,
                          subsystem_seeds(cfg.seed).at("attacks"), cfg.eval_chunk);
  print_metrics(m);
  write_table(o, "metrics", metrics_csv(m), metrics_json(m));
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto cfg = resolve(o);
  const auto rows = ablation_grid(cfg, load_datasets(cfg.data));
  Json j = Json::array();
  for (const auto& r : rows) {
    std::cout << r.index << " " << r.variant << " clean " << r.metrics.clean_accuracy;
    if (!r.metrics.robust.empty()) std::cout << " robust " << r.metrics.robust.front().robust_accuracy;
    std::cout << "\n";
    j.push_back({{"index", r.index}, {"variant", r.variant}, {"metrics", metrics_json(r.metrics)}});
  }
  write_table(o, "ablation", ablation_csv(rows), j);
  return 0;
}

int cmd_sweep_gamma(const Options& o) {
  const auto cfg = resolve(o);
  const auto rows = sweep_gamma(cfg, load_datasets(cfg.data), o.gammas);
  Json j = Json::array();
  for (const auto& r : rows) j.push_back({{"gamma", r.gamma}, {"metrics", metrics_json(r.metrics)}});
  write_table(o, "gamma_sweep", gamma_csv(rows), j);
  return 0;
}

int cmd_sweep_insertion(const Options& o) {
  const auto cfg = resolve(o);
  const auto rows = sweep_insertion(cfg, load_datasets(cfg.data));
  Json j = Json::array();
  for (const auto& r : rows)
    j.push_back({{"order", r.order},
                 {"pairs", r.pairs},
                 {"sites", r.sites},
                 {"metrics", metrics_json(r.metrics)}});
  write_table(o, "insertion_sweep", insertion_csv(rows), j);
  return 0;
}

int cmd_sanity(const Options& o) {
  if (o.params.empty()) throw ConfigError("--params is required");
  const auto cfg = resolve(o);
  const auto data = load_datasets(cfg.data);
  const auto params = load_params(o.params);
  Params surrogate_params;
  if (!o.surrogate.empty()) {
    surrogate_params = load_params(o.surrogate);
  } else {
    // Independently seeded undefended model as the black-box surrogate.
    RunConfig s = cfg;
    s.mode = TrainMode::baseline;
    s.seed = derive_seed(cfg.seed, "surrogate");
    surrogate_params = train(s, data.train).params;
  }
  NetworkClassifier model(cfg.network, params), surrogate(cfg.network, surrogate_params);
  const double eps = o.epsilon.value_or(8.0 / 255.0);
  const auto checks = sanity_suite(model, surrogate, data.test, eps,
                                   subsystem_seeds(cfg.seed).at("attacks"), cfg.eval_chunk);
  Json j = Json::array();
  bool all = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << "  " << c.lhs << " vs " << c.rhs << "\n";
    j.push_back({{"check", c.name}, {"pass", c.pass}, {"lhs", c.lhs}, {"rhs", c.rhs}});
    all = all && c.pass;
  }
  write_table(o, "sanity", sanity_csv(checks), j);
  return all ? 0 : 4;
}

int cmd_report(const Options& o) {
  if (o.manifest.empty()) throw ConfigError("--manifest is required");
  std::ifstream in(o.manifest);
  if (!in) throw IoError("cannot open " + o.manifest);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(o.manifest + ": " + e.what());
  }
  auto m = RunManifest::from_json(j);
  emit_report(m, o.out, o.format);
  for (const auto& [file, hash] : m.hashes) std::cout << file << "  sha256 " << hash << "\n";
  return 0;
}

int cmd_gen_data(const Options& o) {
  const auto cfg = resolve(o);
  GlyphOptions g = cfg.data.glyphs;
  const auto seed = cfg.data.seed;
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_idx(glyph_digits(o.train_per_class, seed, Split::train, g), dir / "train-images.idx3-ubyte",
            dir / "train-labels.idx1-ubyte");
  write_idx(glyph_digits(o.test_per_class, derive_seed(seed, "test"), Split::test, g),
            dir / "test-images.idx3-ubyte", dir / "test-labels.idx1-ubyte");
  for (const char* f : {"train-images.idx3-ubyte", "train-labels.idx1-ubyte",
                        "test-images.idx3-ubyte", "test-labels.idx1-ubyte"})
    std::cout << (dir / f).string() << "  sha256 " << sha256_file(dir / f) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  fpcc::tune_allocator();
  CLI::App app{"FPCC laboratory"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "Train one model and evaluate it");
  add_common(train_cmd, o);
  add_attack(train_cmd, o);
  auto* eval_cmd = app.add_subcommand("evaluate", "Clean and robust accuracy of saved params");
  add_common(eval_cmd, o);
  add_attack(eval_cmd, o);
  eval_cmd->add_option("--params", o.params, "Parameter file from train");
  auto* attack_cmd = app.add_subcommand("attack", "Run a single attack on saved params");
  add_common(attack_cmd, o);
  add_attack(attack_cmd, o);
  attack_cmd->add_option("--params", o.params, "Parameter file from train")->required();
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and score the eight ablation variants");
  add_common(ablate_cmd, o);
  add_attack(ablate_cmd, o);
  auto* gamma_cmd = app.add_subcommand("sweep-gamma", "FPCC runs over drop probabilities");
  add_common(gamma_cmd, o);
  add_attack(gamma_cmd, o);
  gamma_cmd->add_option("--gammas", o.gammas, "Drop probabilities")->delimiter(',');
  auto* ins_cmd = app.add_subcommand("sweep-insertion", "Cumulative CFS/PRO insertion series");
  add_common(ins_cmd, o);
  add_attack(ins_cmd, o);
  auto* sanity_cmd = app.add_subcommand("sanity", "Gradient-obfuscation checks");
  add_common(sanity_cmd, o);
  sanity_cmd->add_option("--epsilon", o.epsilon, "Perturbation budget");
  sanity_cmd->add_option("--params", o.params, "Parameter file of the model under test");
  sanity_cmd->add_option("--surrogate", o.surrogate, "Parameter file of the transfer surrogate");
  auto* report_cmd = app.add_subcommand("report", "Re-emit report files from a manifest");
  report_cmd->add_option("--manifest", o.manifest, "manifest.json")->required();
  report_cmd->add_option("--out", o.out, "Output directory");
  report_cmd->add_option("--format", o.format, "Report format")
      ->check(CLI::IsMember({"csv", "json"}));
  auto* gen_cmd = app.add_subcommand("gen-data", "Write the glyph dataset as IDX files");
  add_common(gen_cmd, o);
  gen_cmd->add_option("--train-per-class", o.train_per_class, "Training samples per class");
  gen_cmd->add_option("--test-per-class", o.test_per_class, "Test samples per class");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train_cmd->parsed()) return cmd_train(o);
    if (eval_cmd->parsed() || attack_cmd->parsed()) return cmd_evaluate(o);
    if (ablate_cmd->parsed()) return cmd_ablate(o);
    if (gamma_cmd->parsed()) return cmd_sweep_gamma(o);
    if (ins_cmd->parsed()) return cmd_sweep_insertion(o);
    if (sanity_cmd->parsed()) return cmd_sanity(o);
    if (report_cmd->parsed()) return cmd_report(o);
    if (gen_cmd->parsed()) return cmd_gen_data(o);
  } catch (const fpcc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
