// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fpcc/errors.hpp"
#include "fpcc/harness.hpp"

using namespace fpcc;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("fpcc-harness-" + std::to_string(std::random_device{}()) + "-" +
             std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

RunConfig tiny_config() {
  RunConfig c;
  c.optimizer.epochs = 2;
  c.optimizer.batch_size = 32;
  c.optimizer.lr = 0.02;
  c.fpcc.lambda = 0.01;
  c.fpcc.bank_lr = 0.2;
  c.fpcc.bank_init_std = 1.0;
  c.data.train_per_class = 8;
  c.data.test_per_class = 3;
  auto pgd = AttackConfig::defaults(AttackKind::pgd_linf, 8.0 / 255.0);
  pgd.steps = 3;
  c.attacks = {pgd, AttackConfig::defaults(AttackKind::fgsm, 8.0 / 255.0)};
  c.seed = 3;
  return c;
}

const Datasets& tiny_data() {
  static const Datasets d = load_datasets(tiny_config().data);
  return d;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Optimizer, StepDecaySchedule) {
  OptimizerConfig o;
  o.lr = 1.0;
  o.epochs = 8;
  EXPECT_EQ(o.lr_at(0), 1.0);
  EXPECT_EQ(o.lr_at(3), 1.0);
  EXPECT_NEAR(o.lr_at(4), 0.1, 1e-15);
  EXPECT_NEAR(o.lr_at(6), 0.01, 1e-15);
  EXPECT_NEAR(o.lr_at(7), 0.01, 1e-15);
}

TEST(Ablation, VariantTable) {
  ASSERT_EQ(ablation_names().size(), 8u);
  EXPECT_EQ(ablation_components(1), Components{});
  const auto full = ablation_components(5);
  EXPECT_TRUE(full.sfm);
  EXPECT_EQ(full.selection, MaskKind::select);
  EXPECT_EQ(full.pattern, Components::Pattern::pro);
  EXPECT_TRUE(ablation_components(6).fgsm_input);
  EXPECT_FALSE(ablation_components(6).sfm);
  EXPECT_EQ(ablation_components(7).selection, MaskKind::dropout);
  EXPECT_EQ(ablation_components(8).pattern, Components::Pattern::center);
  EXPECT_THROW(ablation_components(0), ConfigError);
  EXPECT_THROW(ablation_components(9), ConfigError);
}

TEST(Seeds, SubsystemStreamsAreDistinct) {
  const auto s = subsystem_seeds(0);
  for (const char* name : {"init", "sfm", "cfs", "shuffle", "attacks"}) ASSERT_TRUE(s.count(name));
  std::set<std::uint64_t> uniq;
  for (const auto& [k, v] : s) uniq.insert(v);
  EXPECT_EQ(uniq.size(), s.size());
  EXPECT_EQ(s, subsystem_seeds(0));
  EXPECT_NE(s, subsystem_seeds(1));
}

TEST(Config, JsonRoundTripAndDeskFile) {
  auto c = tiny_config();
  c.fpcc.gamma = 0.35;
  const auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  const auto desk = RunConfig::load(fs::path(FPCC_SOURCE_DIR) / "configs" / "desk.json");
  EXPECT_EQ(desk.mode, TrainMode::fpcc);
  EXPECT_EQ(desk.fpcc.plan.pro_sites(), (std::vector<std::string>{"block1", "block2", "fc1"}));
}

TEST(Config, ValidationErrors) {
  const Json good = tiny_config().to_json();
  auto bad = [&](auto patch) {
    Json j = good;
    patch(j);
    return j;
  };
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["fpcc"]["gamma"] = 1.5; })), ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) {
                 j["fpcc"]["plan"] = Json::array({{{"site", "nowhere"}}});
               })),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["mode"] = "both"; })), ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) {
                 j["mode"] = "ablation";
                 j["ablation"] = 9;
               })),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["optimizer"]["lr"] = 0.0; })), ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["optimizer"]["kind"] = "adam"; })),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["optimizer"]["epochs"] = "many"; })),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["network"] = "resnet"; })), ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["data"]["source"] = "cifar"; })),
               ConfigError);
  EXPECT_THROW(RunConfig::from_json(bad([](Json& j) { j["attacks"][0]["epsilon"] = -1; })),
               ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/run.json"), IoError);
}

TEST(Io, UnwritablePathAndHashes) {
  TempDir dir;
  write_text(dir / "file", "x");
  EXPECT_THROW(write_text(dir / "file" / "below.csv", "y"), IoError);
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(write_text(dir / "a" / "b.txt", "abc"), sha256_hex("abc"));
  EXPECT_EQ(sha256_file(dir / "a" / "b.txt"), sha256_hex("abc"));
}

TEST(Io, ParamsRoundTrip) {
  TempDir dir;
  const auto net = NetworkSpec::desk_cnn();
  const auto p = init_params(net, 4);
  save_params(p, dir / "p.bin");
  EXPECT_EQ(load_params(dir / "p.bin"), p);
  write_text(dir / "bad.bin", "NOTMAGIC");
  EXPECT_THROW(load_params(dir / "bad.bin"), FormatError);
  auto bytes = slurp(dir / "p.bin");
  write_text(dir / "cut.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_params(dir / "cut.bin"), FormatError);
}

TEST(Train, DegenerateFpccEqualsBaseline) {
  auto c = tiny_config();
  c.fpcc.lambda = 0.0;
  c.fpcc.sfm_epsilon = 0.0;
  c.fpcc.gamma = 0.0;
  auto base = c;
  base.mode = TrainMode::baseline;
  const auto a = train(c, tiny_data().train);
  const auto b = train(base, tiny_data().train);
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(a.manifest.epochs.size(), b.manifest.epochs.size());
  for (std::size_t e = 0; e < a.manifest.epochs.size(); ++e) {
    EXPECT_EQ(a.manifest.epochs[e].cross_entropy, b.manifest.epochs[e].cross_entropy);
    EXPECT_EQ(a.manifest.epochs[e].total, b.manifest.epochs[e].total);
  }
}

TEST(Train, PatternLossFallsAndIsLogged) {
  auto c = tiny_config();
  c.optimizer.epochs = 4;
  const auto r = train(c, tiny_data().train);
  ASSERT_EQ(r.manifest.epochs.size(), 4u);
  auto sum = [](const EpochLog& e) {
    double s = 0.0;
    for (const auto& [k, v] : e.pattern) s += v;
    return s;
  };
  EXPECT_EQ(r.manifest.epochs.front().pattern.size(), 3u);
  EXPECT_LT(sum(r.manifest.epochs.back()), sum(r.manifest.epochs.front()));
  for (const auto& e : r.manifest.epochs)
    EXPECT_NEAR(e.total, e.cross_entropy + c.fpcc.lambda * sum(e), 1e-9 * std::abs(e.total));
  EXPECT_EQ(r.bank.sites, c.fpcc.plan.pro_sites());
}

TEST(Train, DivergenceIsRecorded) {
  auto c = tiny_config();
  c.mode = TrainMode::baseline;
  c.optimizer.lr = 1e300;
  c.optimizer.momentum = 0.0;
  const auto r = train(c, tiny_data().train);
  ASSERT_TRUE(r.manifest.diverged_epoch.has_value());
  EXPECT_EQ(*r.manifest.diverged_epoch, 1u);
  EXPECT_FALSE(r.manifest.divergence.empty());
}

TEST(Train, RejectsMismatchedData) {
  auto c = tiny_config();
  const auto blobs = synthetic_blobs(3, 4, {1, 28, 28}, 0.1, 1);
  EXPECT_THROW(train(c, blobs), ConfigError);
}

TEST(Run, ReplayFromManifestIsBitIdentical) {
  TempDir dir;
  const auto cfg = tiny_config();
  auto first = run(cfg, tiny_data());
  emit_report(first.manifest, dir / "a", "csv");
  const auto replay_cfg = RunConfig::from_json(first.manifest.config);
  auto second = run(replay_cfg, load_datasets(replay_cfg.data));
  emit_report(second.manifest, dir / "b", "csv");
  EXPECT_EQ(first.params, second.params);
  EXPECT_EQ(first.bank, second.bank);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(first.manifest.hashes.at("metrics.csv"), second.manifest.hashes.at("metrics.csv"));
  EXPECT_EQ(first.manifest.hashes.at("epochs.csv"), second.manifest.hashes.at("epochs.csv"));
}

TEST(Report, FilesHashesAndManifestRoundTrip) {
  TempDir dir;
  const auto cfg = tiny_config();
  auto r = run(cfg, tiny_data());
  emit_report(r.manifest, dir.path(), "csv");
  const auto metrics = slurp(dir / "metrics.csv");
  EXPECT_EQ(lines(metrics), 1 + 1 + 2 * cfg.attacks.size() + 1);
  EXPECT_EQ(lines(slurp(dir / "epochs.csv")), 1 + cfg.optimizer.epochs);
  EXPECT_EQ(metrics.find("seconds"), std::string::npos);
  for (const auto& [name, hash] : r.manifest.hashes) EXPECT_EQ(sha256_file(dir / name), hash) << name;

  const auto j = Json::parse(slurp(dir / "manifest.json"));
  const auto m = RunManifest::from_json(j);
  EXPECT_EQ(m.to_json(), r.manifest.to_json());
  EXPECT_EQ(m.metrics.clean_accuracy, r.manifest.metrics.clean_accuracy);
  EXPECT_EQ(m.metrics.robust.size(), cfg.attacks.size());
  EXPECT_THROW(RunManifest::from_json(Json{{"config", 1}}), FormatError);

  emit_report(r.manifest, dir / "json", "json");
  const auto mj = Json::parse(slurp(dir / "json" / "metrics.json"));
  EXPECT_EQ(metrics_from_json(mj).clean_accuracy, r.manifest.metrics.clean_accuracy);
  EXPECT_THROW(emit_report(r.manifest, dir.path(), "xml"), ConfigError);
}

TEST(Report, CsvNumbersRoundTrip) {
  Metrics m;
  m.clean_accuracy = 0.1 + 0.2;
  m.input_gradient_norm = 1.0 / 3.0;
  m.robust.push_back({"pgd-linf", 8.0 / 255.0, m.clean_accuracy, 2.0 / 7.0, 8.0 / 255.0});
  const auto s = metrics_csv(m);
  std::istringstream in(s);
  std::string line;
  std::getline(in, line);
  std::vector<double> values;
  while (std::getline(in, line)) values.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  ASSERT_EQ(values.size(), 4u);
  EXPECT_EQ(values[0], m.clean_accuracy);
  EXPECT_EQ(values[1], 2.0 / 7.0);
  EXPECT_EQ(values[2], 8.0 / 255.0);
  EXPECT_EQ(values[3], 1.0 / 3.0);
}

TEST(Report, BankMatrixPerSite) {
  const auto bank = PatternBank::init({"fc1", "block2"}, {5, 3}, 4, 1.0, 2);
  const auto s = bank_csv(bank, "block2");
  EXPECT_EQ(lines(s), 4u);
  std::istringstream in(s);
  std::string row;
  std::size_t k = 0;
  while (std::getline(in, row)) {
    std::istringstream cells(row);
    std::string cell;
    std::size_t d = 0;
    while (std::getline(cells, cell, ',')) EXPECT_EQ(std::stod(cell), bank.at("block2")[k * 3 + d++]);
    EXPECT_EQ(d, 3u);
    ++k;
  }
  EXPECT_THROW(bank_csv(bank, "fc9"), ConfigError);
}

TEST(Evaluate, EmptyAttackListAndZeroBudget) {
  const auto cfg = tiny_config();
  const auto r = train(cfg, tiny_data().train);
  const auto none = evaluate(cfg.network, r.params, tiny_data().test, {}, 1);
  EXPECT_TRUE(none.robust.empty());
  auto zero = AttackConfig::defaults(AttackKind::pgd_linf, 0.0);
  zero.steps = 2;
  const auto z = evaluate(cfg.network, r.params, tiny_data().test, {zero}, 1);
  EXPECT_EQ(z.clean_accuracy, none.clean_accuracy);
  EXPECT_EQ(z.robust.at(0).robust_accuracy, z.clean_accuracy);
  EXPECT_GT(z.input_gradient_norm, 0.0);
}

TEST(Sweeps, GammaRowsAndDegenerateGamma) {
  auto cfg = tiny_config();
  cfg.optimizer.epochs = 1;
  const auto rows = sweep_gamma(cfg, tiny_data(), {0.0, 0.4});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].gamma, 0.4);
  EXPECT_EQ(lines(gamma_csv(rows)), 3u);
  Components sfm_pro;
  sfm_pro.sfm = true;
  sfm_pro.pattern = Components::Pattern::pro;
  const auto r = train(cfg, tiny_data().train, sfm_pro);
  const auto m = evaluate(cfg.network, r.params, tiny_data().test, cfg.attacks,
                          r.manifest.seeds.at("attacks"), cfg.eval_chunk);
  EXPECT_EQ(metrics_csv(rows[0].metrics), metrics_csv(m));
}

TEST(Sweeps, InsertionSeriesShapeAndEndpoints) {
  auto cfg = tiny_config();
  cfg.optimizer.epochs = 1;
  const auto rows = sweep_insertion(cfg, tiny_data());
  const auto sites = cfg.network.hook_sites();
  ASSERT_EQ(rows.size(), 2 * (sites.size() + 1));
  EXPECT_EQ(lines(insertion_csv(rows)), rows.size() + 1);
  auto base = cfg;
  base.mode = TrainMode::baseline;
  const auto b = run(base, tiny_data()).manifest.metrics;
  auto full = cfg;
  full.fpcc.plan = InsertionPlan::at_sites(sites);
  const auto f = run(full, tiny_data()).manifest.metrics;
  for (const auto& r : rows) {
    if (r.pairs == 0) EXPECT_EQ(metrics_csv(r.metrics), metrics_csv(b));
    if (r.pairs == sites.size()) EXPECT_EQ(metrics_csv(r.metrics), metrics_csv(f));
  }
  EXPECT_EQ(rows[1].order, "deep-first");
  EXPECT_EQ(rows[1].sites, (std::vector<std::string>{sites.back()}));
  EXPECT_EQ(rows[sites.size() + 2].sites, (std::vector<std::string>{sites.front()}));
}

TEST(Sweeps, AblationRowsFollowTheTable) {
  auto cfg = tiny_config();
  cfg.optimizer.epochs = 1;
  const auto rows = ablation_grid(cfg, tiny_data(), {1, 7});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].variant, "base");
  EXPECT_EQ(rows[1].variant, "+SFM+Dropout+PRO");
  EXPECT_EQ(lines(ablation_csv(rows)), 1 + 2 * cfg.attacks.size());
}
