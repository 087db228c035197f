// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpcc/attacks.hpp"
#include "fpcc/data.hpp"
#include "fpcc/fpcc.hpp"
#include "fpcc/network.hpp"

namespace fpcc {

using Json = nlohmann::json;

struct OptimizerConfig {
  std::string kind = "sgd";
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::vector<double> decay_at = {0.5, 0.75};  ///< fractions of the epoch budget
  double decay_factor = 0.1;

  /// Learning rate in effect during `epoch` (0-based).
  double lr_at(std::size_t epoch) const;
};

struct DataConfig {
  std::string source = "glyphs";  ///< glyphs, blobs, idx or csv
  std::string train_images, train_labels, test_images, test_labels;  ///< idx/csv paths
  std::size_t train_per_class = 300;
  std::size_t test_per_class = 50;
  std::size_t train_limit = 0;  ///< 0 keeps every sample
  std::size_t test_limit = 0;
  std::uint64_t seed = 1;  ///< generator seed for glyphs/blobs
  GlyphOptions glyphs;
  double blob_spread = 0.05;
  CsvLayout csv;
};

/// Training components of one ablation variant.
struct Components {
  bool sfm = false;
  bool fgsm_input = false;  ///< FGSM perturbation in place of SFM noise
  std::optional<MaskKind> selection;
  enum class Pattern { none, pro, center } pattern = Pattern::none;

  friend bool operator==(const Components&, const Components&) = default;
};

enum class TrainMode { baseline, fpcc, ablation };

/// Variant names, indices 1..8: base, +SFM, +CFS, +PRO, +SFM+CFS+PRO,
/// +FGSM-AT+CFS+PRO, +SFM+Dropout+PRO, +SFM+CFS+center-loss.
const std::vector<std::string>& ablation_names();
Components ablation_components(std::size_t index);

struct RunConfig {
  NetworkSpec network = NetworkSpec::desk_cnn();
  std::string network_name = "desk-cnn";
  FpccConfig fpcc;
  OptimizerConfig optimizer;
  DataConfig data;
  std::vector<AttackConfig> attacks;
  TrainMode mode = TrainMode::fpcc;
  std::size_t ablation = 5;  ///< used when mode is ablation
  std::uint64_t seed = 0;
  std::size_t eval_chunk = 250;

  /// Desk CNN with a CFS/PRO pair at every hook site.
  RunConfig() { fpcc.plan = InsertionPlan::at_sites(network.hook_sites()); }

  Components components() const;
  /// Throws ConfigError for out-of-range values, an inactive or unknown
  /// mode, or plan sites missing from the network.
  void validate() const;

  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::filesystem::path& path);
  Json to_json() const;
};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every op. No-op outside glibc.
void tune_allocator();

/// Seeds of the named child streams of the master seed.
std::map<std::string, std::uint64_t> subsystem_seeds(std::uint64_t master);

struct EpochLog {
  std::size_t epoch = 0;  ///< 1-based
  double lr = 0.0;
  double cross_entropy = 0.0;
  std::map<std::string, double> pattern;  ///< per-site L_PT (or center loss)
  double total = 0.0;
};

struct Metrics {
  double clean_accuracy = 0.0;
  std::vector<AttackSummary> robust;
  double input_gradient_norm = 0.0;
};

struct RunManifest {
  Json config;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<EpochLog> epochs;
  std::optional<std::size_t> diverged_epoch;
  std::string divergence;
  Metrics metrics;
  double wall_clock_seconds = 0.0;
  std::map<std::string, std::string> hashes;

  Json to_json() const;
  static RunManifest from_json(const Json& j);
};

struct Datasets {
  Dataset train;
  Dataset test;
};

Datasets load_datasets(const DataConfig& cfg);

struct TrainResult {
  Params params;
  PatternBank bank;
  RunManifest manifest;
};

/// One run of the training procedure: per batch, perturb the inputs (SFM or
/// FGSM), forward with selection masks, form L_CE + lambda * sum L_PT, one
/// reverse pass, SGD-momentum on the network and plain GD on the bank.
/// A non-finite loss stops the run and records the epoch in the manifest.
TrainResult train(const RunConfig& cfg, const Dataset& train_set);
/// Same loop with an explicit component set in place of the configured mode.
TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Components& comp);

/// Clean accuracy, robust accuracy per attack and mean input-gradient norm,
/// all in eval mode.
Metrics evaluate(const NetworkSpec& net, const Params& params, const Dataset& test,
                 const std::vector<AttackConfig>& attacks, std::uint64_t seed,
                 std::size_t chunk = 250);

/// Train on the configured data, evaluate on its test split.
TrainResult run(const RunConfig& cfg, const Datasets& data);

struct AblationRow {
  std::size_t index = 0;
  std::string variant;
  Metrics metrics;
};

std::vector<AblationRow> ablation_grid(const RunConfig& cfg, const Datasets& data,
                                       const std::vector<std::size_t>& indices = {1, 2, 3, 4, 5,
                                                                                  6, 7, 8});

struct GammaRow {
  double gamma = 0.0;
  Metrics metrics;
};

/// FPCC runs at each drop probability.
std::vector<GammaRow> sweep_gamma(const RunConfig& cfg, const Datasets& data,
                                  const std::vector<double>& gammas);

struct InsertionRow {
  std::string order;  ///< deep-first or shallow-first
  std::size_t pairs = 0;
  std::vector<std::string> sites;
  Metrics metrics;
};

/// Cumulative CFS/PRO insertion over the hook sites, deep-first and
/// shallow-first. Zero pairs trains the baseline; the full prefix runs once
/// per series.
std::vector<InsertionRow> sweep_insertion(const RunConfig& cfg, const Datasets& data);

struct SanityCheck {
  std::string name;
  bool pass = false;
  double lhs = 0.0, rhs = 0.0;
  std::string detail;
};

/// Gradient-obfuscation checks: FGSM robust >= PGD robust, transfer robust
/// >= white-box robust (crafted on `surrogate`), input-gradient norm > 0.01.
std::vector<SanityCheck> sanity_suite(const Classifier& model, const Classifier& surrogate,
                                      const Dataset& test, double epsilon, std::uint64_t seed,
                                      std::size_t chunk = 250);

// Report emission. Every writer returns the SHA-256 of the bytes it wrote.

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Writes `text` to `path`, creating parent directories; IoError on failure.
std::string write_text(const std::filesystem::path& path, const std::string& text);

/// metrics.csv: one row per metric, no timing data.
std::string metrics_csv(const Metrics& m);
/// Per-epoch loss curve.
std::string epochs_csv(const std::vector<EpochLog>& epochs);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string gamma_csv(const std::vector<GammaRow>& rows);
std::string insertion_csv(const std::vector<InsertionRow>& rows);
std::string sanity_csv(const std::vector<SanityCheck>& checks);
/// The K x D pattern matrix of one PRO site, one class per row.
std::string bank_csv(const PatternBank& bank, const std::string& site);

Json metrics_json(const Metrics& m);
Metrics metrics_from_json(const Json& j);

/// Writes manifest.json plus metrics and loss-curve files in `format`
/// (csv or json) under `dir`, recording their hashes in the manifest.
void emit_report(RunManifest& manifest, const std::filesystem::path& dir,
                 const std::string& format);

/// Binary parameter file: per tensor its name, rank, dims and raw doubles.
void save_params(const Params& params, const std::filesystem::path& path);
Params load_params(const std::filesystem::path& path);

}  // namespace fpcc
