// SPDX-License-Identifier: Apache-2.0
#include "fpcc/harness.hpp"

#include <openssl/evp.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fpcc/errors.hpp"
#include "fpcc/rng.hpp"

namespace fpcc {
namespace {

const char* const kStreams[] = {"init", "sfm", "cfs", "shuffle", "attacks"};

/// Shortest decimal that round-trips to the same double.
std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

template <typename T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

Json layer_to_json(const LayerSpec& l) {
  Json j = {{"kind", layer_kind_name(l.kind)}};
  if (l.kind == LayerKind::dense) j["units"] = l.units;
  if (l.kind == LayerKind::conv) {
    j["filters"] = l.units;
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
  }
  if (!l.hook.empty()) j["hook"] = l.hook;
  return j;
}

LayerSpec layer_from_json(const Json& j) {
  LayerSpec l;
  l.kind = parse_layer_kind(j.at("kind").get<std::string>());
  read_opt(j, "units", l.units);
  read_opt(j, "filters", l.units);
  read_opt(j, "kernel", l.kernel);
  read_opt(j, "stride", l.stride);
  read_opt(j, "hook", l.hook);
  return l;
}

Json attack_to_json(const AttackConfig& a) {
  return {{"name", attack_name(a.kind)},
          {"epsilon", a.epsilon},
          {"alpha", a.alpha},
          {"steps", a.steps},
          {"random_start", a.random_start},
          {"eot_samples", a.eot_samples},
          {"decay", a.decay},
          {"norm", a.norm == Norm::linf ? "linf" : "l2"}};
}

AttackConfig attack_from_json(const Json& j) {
  const auto kind = parse_attack_kind(j.at("name").get<std::string>());
  auto a = AttackConfig::defaults(kind, j.value("epsilon", 8.0 / 255.0));
  read_opt(j, "steps", a.steps);
  if (!j.contains("alpha") && j.contains("steps")) {
    // Keep the per-kind step-size rule when only the step count changes.
    if (kind == AttackKind::bim) a.alpha = 2.0 * a.epsilon / static_cast<double>(a.steps);
    if (kind == AttackKind::mim) a.alpha = a.epsilon / static_cast<double>(a.steps);
  }
  read_opt(j, "alpha", a.alpha);
  read_opt(j, "random_start", a.random_start);
  read_opt(j, "eot_samples", a.eot_samples);
  read_opt(j, "decay", a.decay);
  if (j.contains("norm")) {
    const auto n = j.at("norm").get<std::string>();
    if (n != "linf" && n != "l2") throw ConfigError("attack norm must be linf or l2");
    a.norm = n == "linf" ? Norm::linf : Norm::l2;
  }
  a.validate();
  return a;
}

std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::baseline: return "baseline";
    case TrainMode::fpcc: return "fpcc";
    case TrainMode::ablation: return "ablation";
  }
  return "?";
}

std::size_t net_order(const std::vector<std::string>& sites, const std::string& s) {
  return static_cast<std::size_t>(std::find(sites.begin(), sites.end(), s) - sites.begin());
}

Dataset limit(Dataset d, std::size_t n) { return n == 0 ? d : d.head(n); }

Json summary_to_json(const AttackSummary& s) {
  return {{"attack", s.attack},
          {"epsilon", s.epsilon},
          {"clean_accuracy", s.clean_accuracy},
          {"robust_accuracy", s.robust_accuracy},
          {"max_perturbation", s.max_perturbation}};
}

void sgd_step(Params& params, std::vector<Tensor>& velocity, const std::vector<Tensor>& grads,
              double lr, double momentum) {
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto p = params.tensors[i].data();
    auto v = velocity[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

}  // namespace

double OptimizerConfig::lr_at(std::size_t epoch) const {
  double out = lr;
  for (double f : decay_at)
    if (static_cast<double>(epoch) >= f * static_cast<double>(epochs)) out *= decay_factor;
  return out;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {
      "base",           "+SFM",           "+CFS",
      "+PRO",           "+SFM+CFS+PRO",   "+FGSM-AT+CFS+PRO",
      "+SFM+Dropout+PRO", "+SFM+CFS+center-loss"};
  return names;
}

Components ablation_components(std::size_t index) {
  using P = Components::Pattern;
  Components c;
  switch (index) {
    case 1: break;
    case 2: c.sfm = true; break;
    case 3: c.selection = MaskKind::select; break;
    case 4: c.pattern = P::pro; break;
    case 5: c = {true, false, MaskKind::select, P::pro}; break;
    case 6: c = {false, true, MaskKind::select, P::pro}; break;
    case 7: c = {true, false, MaskKind::dropout, P::pro}; break;
    case 8: c = {true, false, MaskKind::select, P::center}; break;
    default: throw ConfigError("ablation index must be in 1..8");
  }
  return c;
}

Components RunConfig::components() const {
  switch (mode) {
    case TrainMode::baseline: return ablation_components(1);
    case TrainMode::fpcc: return ablation_components(5);
    case TrainMode::ablation: return ablation_components(ablation);
  }
  throw ConfigError("unknown training mode");
}

void RunConfig::validate() const {
  network.validate();
  fpcc.validate();
  if (mode == TrainMode::ablation) ablation_components(ablation);
  const auto sites = network.hook_sites();
  for (const auto& s : fpcc.plan.pro_sites())
    if (std::find(sites.begin(), sites.end(), s) == sites.end())
      throw ConfigError("plan site '" + s + "' is not a hook site of the network");
  const auto c = components();
  if ((c.selection || c.pattern != Components::Pattern::none) && fpcc.plan.empty())
    throw ConfigError("mode needs a non-empty insertion plan");
  if (optimizer.kind != "sgd") throw ConfigError("only the sgd optimizer is supported");
  if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0))
    throw ConfigError("momentum must be in [0, 1)");
  if (optimizer.epochs == 0) throw ConfigError("epochs must be positive");
  if (optimizer.batch_size == 0) throw ConfigError("batch size must be positive");
  if (eval_chunk == 0) throw ConfigError("eval_chunk must be positive");
  for (const auto& a : attacks) a.validate();
  const auto& src = data.source;
  if (src != "glyphs" && src != "blobs" && src != "idx" && src != "csv")
    throw ConfigError("data source must be glyphs, blobs, idx or csv");
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  try {
    if (j.contains("network")) {
      const auto& n = j.at("network");
      if (n.is_string()) {
        c.network_name = n.get<std::string>();
        if (c.network_name == "desk-cnn") c.network = NetworkSpec::desk_cnn();
        else if (c.network_name == "desk-mlp") c.network = NetworkSpec::desk_mlp();
        else throw ConfigError("unknown network '" + c.network_name + "'");
      } else {
        c.network_name = "custom";
        c.network = NetworkSpec{};
        c.network.input_shape = n.at("input_shape").get<Shape>();
        c.network.classes = n.at("classes").get<std::size_t>();
        for (const auto& l : n.at("layers")) c.network.layers.push_back(layer_from_json(l));
      }
    }
    c.fpcc.plan = InsertionPlan::at_sites(c.network.hook_sites());
    if (j.contains("fpcc")) {
      const auto& f = j.at("fpcc");
      read_opt(f, "sfm_epsilon", c.fpcc.sfm_epsilon);
      read_opt(f, "gamma", c.fpcc.gamma);
      read_opt(f, "lambda", c.fpcc.lambda);
      read_opt(f, "z_epsilon", c.fpcc.z_epsilon);
      read_opt(f, "bank_lr", c.fpcc.bank_lr);
      read_opt(f, "bank_init_std", c.fpcc.bank_init_std);
      if (f.contains("sites")) c.fpcc.plan = InsertionPlan::at_sites(f.at("sites"));
      if (f.contains("plan")) {
        c.fpcc.plan.entries.clear();
        for (const auto& e : f.at("plan")) {
          PlanEntry p;
          p.pro_site = e.at("site").get<std::string>();
          read_opt(e, "gap", p.gap);
          if (e.contains("gamma")) p.gamma = e.at("gamma").get<double>();
          c.fpcc.plan.entries.push_back(p);
        }
      }
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      read_opt(o, "kind", c.optimizer.kind);
      read_opt(o, "lr", c.optimizer.lr);
      read_opt(o, "momentum", c.optimizer.momentum);
      read_opt(o, "epochs", c.optimizer.epochs);
      read_opt(o, "batch_size", c.optimizer.batch_size);
      read_opt(o, "decay_at", c.optimizer.decay_at);
      read_opt(o, "decay_factor", c.optimizer.decay_factor);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      read_opt(d, "source", c.data.source);
      read_opt(d, "train_images", c.data.train_images);
      read_opt(d, "train_labels", c.data.train_labels);
      read_opt(d, "test_images", c.data.test_images);
      read_opt(d, "test_labels", c.data.test_labels);
      read_opt(d, "train_per_class", c.data.train_per_class);
      read_opt(d, "test_per_class", c.data.test_per_class);
      read_opt(d, "train_limit", c.data.train_limit);
      read_opt(d, "test_limit", c.data.test_limit);
      read_opt(d, "seed", c.data.seed);
      read_opt(d, "blob_spread", c.data.blob_spread);
      if (d.contains("glyphs")) {
        const auto& g = d.at("glyphs");
        if (g.contains("contrast")) {
          c.data.glyphs.contrast_lo = g.at("contrast").at(0);
          c.data.glyphs.contrast_hi = g.at("contrast").at(1);
        }
        if (g.contains("background")) {
          c.data.glyphs.background_lo = g.at("background").at(0);
          c.data.glyphs.background_hi = g.at("background").at(1);
        }
        read_opt(g, "noise", c.data.glyphs.noise);
      }
      if (d.contains("csv")) {
        const auto& v = d.at("csv");
        c.data.csv.sample_shape = v.at("sample_shape").get<Shape>();
        read_opt(v, "classes", c.data.csv.classes);
        read_opt(v, "header", c.data.csv.header);
        const auto scale = v.value("scale", std::string("byte"));
        if (scale != "byte" && scale != "unit") throw ConfigError("csv scale must be byte or unit");
        c.data.csv.scale = scale == "byte" ? PixelScale::byte : PixelScale::unit;
      }
    }
    if (j.contains("attacks"))
      for (const auto& a : j.at("attacks")) c.attacks.push_back(attack_from_json(a));
    if (j.contains("mode")) {
      const auto m = j.at("mode").get<std::string>();
      if (m == "baseline") c.mode = TrainMode::baseline;
      else if (m == "fpcc") c.mode = TrainMode::fpcc;
      else if (m == "ablation") c.mode = TrainMode::ablation;
      else throw ConfigError("mode must be baseline, fpcc or ablation");
    }
    read_opt(j, "ablation", c.ablation);
    read_opt(j, "seed", c.seed);
    read_opt(j, "eval_chunk", c.eval_chunk);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

Json RunConfig::to_json() const {
  Json j;
  if (network_name == "custom") {
    Json layers = Json::array();
    for (const auto& l : network.layers) layers.push_back(layer_to_json(l));
    j["network"] = {{"input_shape", network.input_shape},
                    {"classes", network.classes},
                    {"layers", layers}};
  } else {
    j["network"] = network_name;
  }
  Json plan = Json::array();
  for (const auto& e : fpcc.plan.entries) {
    Json p = {{"site", e.pro_site}, {"gap", e.gap}};
    if (e.gamma) p["gamma"] = *e.gamma;
    plan.push_back(p);
  }
  j["fpcc"] = {{"sfm_epsilon", fpcc.sfm_epsilon}, {"gamma", fpcc.gamma},
               {"lambda", fpcc.lambda},           {"z_epsilon", fpcc.z_epsilon},
               {"bank_lr", fpcc.bank_lr},         {"bank_init_std", fpcc.bank_init_std},
               {"plan", plan}};
  j["optimizer"] = {{"kind", optimizer.kind},
                    {"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"epochs", optimizer.epochs},
                    {"batch_size", optimizer.batch_size},
                    {"decay_at", optimizer.decay_at},
                    {"decay_factor", optimizer.decay_factor}};
  j["data"] = {{"source", data.source},
               {"train_images", data.train_images},
               {"train_labels", data.train_labels},
               {"test_images", data.test_images},
               {"test_labels", data.test_labels},
               {"train_per_class", data.train_per_class},
               {"test_per_class", data.test_per_class},
               {"train_limit", data.train_limit},
               {"test_limit", data.test_limit},
               {"seed", data.seed},
               {"blob_spread", data.blob_spread},
               {"glyphs",
                {{"contrast", {data.glyphs.contrast_lo, data.glyphs.contrast_hi}},
                 {"background", {data.glyphs.background_lo, data.glyphs.background_hi}},
                 {"noise", data.glyphs.noise}}}};
  if (data.source == "csv")
    j["data"]["csv"] = {{"sample_shape", data.csv.sample_shape},
                        {"classes", data.csv.classes},
                        {"header", data.csv.header},
                        {"scale", data.csv.scale == PixelScale::byte ? "byte" : "unit"}};
  Json attacks_j = Json::array();
  for (const auto& a : attacks) attacks_j.push_back(attack_to_json(a));
  j["attacks"] = attacks_j;
  j["mode"] = mode_name(mode);
  j["ablation"] = ablation;
  j["seed"] = seed;
  j["eval_chunk"] = eval_chunk;
  return j;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::map<std::string, std::uint64_t> subsystem_seeds(std::uint64_t master) {
  std::map<std::string, std::uint64_t> out;
  for (const char* s : kStreams) out[s] = derive_seed(master, s);
  return out;
}

Json RunManifest::to_json() const {
  Json ep = Json::array();
  for (const auto& e : epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"lr", e.lr},
                  {"cross_entropy", e.cross_entropy},
                  {"pattern", e.pattern},
                  {"total", e.total}});
  Json j = {{"config", config},   {"seeds", seeds},
            {"epochs", ep},       {"metrics", metrics_json(metrics)},
            {"wall_clock_seconds", wall_clock_seconds}, {"hashes", hashes}};
  j["diverged_epoch"] = diverged_epoch ? Json(*diverged_epoch) : Json(nullptr);
  j["divergence"] = divergence;
  return j;
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  try {
    m.config = j.at("config");
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const auto& e : j.at("epochs")) {
      EpochLog l;
      l.epoch = e.at("epoch");
      l.lr = e.at("lr");
      l.cross_entropy = e.at("cross_entropy");
      l.pattern = e.at("pattern").get<std::map<std::string, double>>();
      l.total = e.at("total");
      m.epochs.push_back(l);
    }
    if (!j.at("diverged_epoch").is_null()) m.diverged_epoch = j.at("diverged_epoch");
    m.divergence = j.value("divergence", std::string());
    m.metrics = metrics_from_json(j.at("metrics"));
    m.wall_clock_seconds = j.at("wall_clock_seconds");
    m.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

Datasets load_datasets(const DataConfig& cfg) {
  if (cfg.source == "glyphs")
    return {limit(glyph_digits(cfg.train_per_class, cfg.seed, Split::train, cfg.glyphs),
                  cfg.train_limit),
            limit(glyph_digits(cfg.test_per_class, derive_seed(cfg.seed, "test"), Split::test,
                               cfg.glyphs),
                  cfg.test_limit)};
  if (cfg.source == "blobs") {
    // One draw per class, split into train and test rows so both share the class means.
    const std::size_t ntr = cfg.train_per_class, n = ntr + cfg.test_per_class, per = 28 * 28;
    auto all = synthetic_blobs(10, n, {1, 28, 28}, cfg.blob_spread, cfg.seed);
    std::vector<double> px[2];
    std::vector<std::size_t> y[2];
    for (std::size_t i = 0; i < 10 * n; ++i) {
      const int part = i % n < ntr ? 0 : 1;
      const auto src = all.images().vec().begin() + static_cast<std::ptrdiff_t>(i * per);
      px[part].insert(px[part].end(), src, src + static_cast<std::ptrdiff_t>(per));
      y[part].push_back(all.labels()[i]);
    }
    Dataset tr(Tensor({y[0].size(), 1, 28, 28}, std::move(px[0])), std::move(y[0]), 10, Split::train);
    Dataset te(Tensor({y[1].size(), 1, 28, 28}, std::move(px[1])), std::move(y[1]), 10, Split::test);
    return {limit(tr, cfg.train_limit), limit(te, cfg.test_limit)};
  }
  if (cfg.source == "idx") {
    auto tr = load_idx(cfg.train_images, cfg.train_labels, 0, Split::train);
    auto te = load_idx(cfg.test_images, cfg.test_labels, tr.classes(), Split::test);
    return {limit(tr, cfg.train_limit), limit(te, cfg.test_limit)};
  }
  if (cfg.source == "csv")
    return {limit(load_csv(cfg.train_images, cfg.csv, Split::train), cfg.train_limit),
            limit(load_csv(cfg.test_images, cfg.csv, Split::test), cfg.test_limit)};
  throw ConfigError("unknown data source '" + cfg.source + "'");
}

TrainResult train(const RunConfig& cfg, const Dataset& train_set) {
  return train(cfg, train_set, cfg.components());
}

TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Components& comp) {
  cfg.validate();
  if ((comp.selection || comp.pattern != Components::Pattern::none) && cfg.fpcc.plan.empty())
    throw ConfigError("components need a non-empty insertion plan");
  if (comp.sfm && comp.fgsm_input) throw ConfigError("SFM and FGSM inputs are exclusive");
  const auto start = std::chrono::steady_clock::now();
  const NetworkSpec& net = cfg.network;
  if (train_set.sample_shape() != net.input_shape || train_set.classes() != net.classes)
    throw ConfigError("dataset does not match the network input shape or class count");
  const auto seeds = subsystem_seeds(cfg.seed);
  const double lambda = cfg.fpcc.lambda;

  TrainResult res;
  res.params = init_params(net, seeds.at("init"));
  const bool patterned = comp.pattern != Components::Pattern::none;
  const auto sites = patterned ? cfg.fpcc.plan.pro_sites() : std::vector<std::string>{};
  std::vector<std::size_t> dims;
  for (const auto& s : sites) dims.push_back(net.feature_dim(s));
  res.bank = PatternBank::init(sites, dims, net.classes, cfg.fpcc.bank_init_std,
                               derive_seed(seeds.at("init"), "bank"));
  res.manifest.config = cfg.to_json();
  res.manifest.seeds = seeds;

  Rng sfm_rng(seeds.at("sfm"));
  Rng cfs_rng(seeds.at("cfs"));
  std::vector<Tensor> velocity;
  for (const auto& t : res.params.tensors) velocity.emplace_back(t.shape());

  for (std::size_t epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    const double lr = cfg.optimizer.lr_at(epoch);
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    for (const auto& s : sites) log.pattern[s] = 0.0;
    std::size_t nb = 0;
    const auto epoch_seed = derive_seed(seeds.at("shuffle"), "epoch" + std::to_string(epoch));
    try {
      for (const auto& b : batches(train_set, cfg.optimizer.batch_size, epoch_seed, true)) {
        Tensor x = b.images;
        if (comp.sfm) x = sfm_augment(x, cfg.fpcc.sfm_epsilon, sfm_rng);
        if (comp.fgsm_input)
          x = fgsm_adversarial_batch(net, res.params, x, b.labels, cfg.fpcc.sfm_epsilon);

        Tape tape;
        auto pv = bind_params(tape, res.params, true);
        Var xv = tape.constant(std::move(x));
        ForwardRecord fr;
        if (comp.selection) {
          TrainHooks hooks{&cfg.fpcc.plan, cfg.fpcc.gamma, *comp.selection, &cfs_rng};
          fr = forward(net, pv, xv, hooks);
        } else {
          fr = forward(net, pv, xv, {}, sites);
        }

        std::map<std::string, Var> bank_vars;
        for (std::size_t i = 0; i < sites.size(); ++i)
          bank_vars[sites[i]] = tape.leaf(res.bank.rows[i]);

        Var total, ce;
        std::map<std::string, Var> parts;
        if (comp.pattern == Components::Pattern::pro) {
          std::map<std::string, Var> patterns;
          for (const auto& s : sites) patterns[s] = feature_pattern(fr.features.at(s), cfg.fpcc.z_epsilon);
          auto lp = total_loss(fr.logits, b.labels, patterns, bank_vars, lambda);
          total = lp.total;
          ce = lp.cross_entropy;
          parts = lp.pattern;
        } else {
          ce = softmax_cross_entropy(fr.logits, b.labels).loss;
          total = ce;
          if (comp.pattern == Components::Pattern::center) {
            Var penalty;
            bool first = true;
            for (const auto& [s, c] : bank_vars) {
              parts[s] = center_loss(fr.features.at(s), c, b.labels);
              penalty = first ? parts[s] : add(penalty, parts[s]);
              first = false;
            }
            total = add(ce, scale(penalty, lambda));
          }
        }
        if (!std::isfinite(total.value().item())) throw NumericError("non-finite training loss");

        auto grads = tape.backward(total);
        std::vector<Tensor> pg;
        for (const auto& p : pv) pg.push_back(grads.of(p));
        sgd_step(res.params, velocity, pg, lr, cfg.optimizer.momentum);
        std::map<std::string, Tensor> bg;
        for (const auto& [s, v] : bank_vars) bg.emplace(s, grads.of(v));
        update_pattern_bank(res.bank, bg, cfg.fpcc.bank_lr);

        log.cross_entropy += ce.value().item();
        log.total += total.value().item();
        for (const auto& [s, v] : parts) log.pattern[s] += v.value().item();
        ++nb;
      }
      for (const auto& p : res.params.tensors) require_finite(p, "network parameters");
    } catch (const NumericError& e) {
      res.manifest.diverged_epoch = epoch + 1;
      res.manifest.divergence = e.what();
      break;
    }
    const double inv = 1.0 / static_cast<double>(nb);
    log.cross_entropy *= inv;
    log.total *= inv;
    for (auto& [s, v] : log.pattern) v *= inv;
    res.manifest.epochs.push_back(log);
  }
  res.manifest.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

Metrics evaluate(const NetworkSpec& net, const Params& params, const Dataset& test,
                 const std::vector<AttackConfig>& attacks, std::uint64_t seed,
                 std::size_t chunk) {
  NetworkClassifier model(net, params);
  Metrics m;
  m.clean_accuracy = accuracy(model, test.images(), test.labels());
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    AttackConfig a = attacks[i];
    a.seed = derive_seed(seed, "attack" + std::to_string(i));
    m.robust.push_back(evaluate_attack(model, test.images(), test.labels(), a, chunk));
  }
  m.input_gradient_norm = input_gradient_norm(model, test.images(), test.labels(), chunk);
  return m;
}

TrainResult run(const RunConfig& cfg, const Datasets& data) {
  const auto start = std::chrono::steady_clock::now();
  auto res = train(cfg, data.train);
  if (!res.manifest.diverged_epoch)
    res.manifest.metrics = evaluate(cfg.network, res.params, data.test, cfg.attacks,
                                    res.manifest.seeds.at("attacks"), cfg.eval_chunk);
  res.manifest.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

std::vector<AblationRow> ablation_grid(const RunConfig& cfg, const Datasets& data,
                                       const std::vector<std::size_t>& indices) {
  std::vector<AblationRow> rows;
  for (std::size_t idx : indices) {
    RunConfig c = cfg;
    c.mode = TrainMode::ablation;
    c.ablation = idx;
    rows.push_back({idx, ablation_names().at(idx - 1), run(c, data).manifest.metrics});
  }
  return rows;
}

std::vector<GammaRow> sweep_gamma(const RunConfig& cfg, const Datasets& data,
                                  const std::vector<double>& gammas) {
  std::vector<GammaRow> rows;
  for (double g : gammas) {
    RunConfig c = cfg;
    c.mode = TrainMode::fpcc;
    c.fpcc.gamma = g;
    rows.push_back({g, run(c, data).manifest.metrics});
  }
  return rows;
}

std::vector<InsertionRow> sweep_insertion(const RunConfig& cfg, const Datasets& data) {
  const auto sites = cfg.network.hook_sites();
  std::vector<InsertionRow> rows;
  RunConfig base = cfg;
  base.mode = TrainMode::baseline;
  const Metrics base_metrics = run(base, data).manifest.metrics;
  std::optional<Metrics> full;
  for (const std::string order : {"deep-first", "shallow-first"}) {
    rows.push_back({order, 0, {}, base_metrics});
    for (std::size_t n = 1; n <= sites.size(); ++n) {
      std::vector<std::string> chosen;
      for (std::size_t i = 0; i < n; ++i)
        chosen.push_back(order == "deep-first" ? sites[sites.size() - 1 - i] : sites[i]);
      std::vector<std::string> ordered = chosen;
      std::sort(ordered.begin(), ordered.end(), [&](const auto& a, const auto& b) {
        return net_order(sites, a) < net_order(sites, b);
      });
      Metrics m;
      if (n == sites.size() && full) {
        m = *full;
      } else {
        RunConfig c = cfg;
        c.mode = TrainMode::fpcc;
        c.fpcc.plan = InsertionPlan::at_sites(ordered);
        m = run(c, data).manifest.metrics;
        if (n == sites.size()) full = m;
      }
      rows.push_back({order, n, ordered, m});
    }
  }
  return rows;
}

std::vector<SanityCheck> sanity_suite(const Classifier& model, const Classifier& surrogate,
                                      const Dataset& test, double epsilon, std::uint64_t seed,
                                      std::size_t chunk) {
  const auto& x = test.images();
  const auto& y = test.labels();
  auto pgd_cfg = AttackConfig::defaults(AttackKind::pgd_linf, epsilon);
  pgd_cfg.seed = derive_seed(seed, "pgd");
  auto fgsm_cfg = AttackConfig::defaults(AttackKind::fgsm, epsilon);
  const double pgd_acc = evaluate_attack(model, x, y, pgd_cfg, chunk).robust_accuracy;
  const double fgsm_acc = evaluate_attack(model, x, y, fgsm_cfg, chunk).robust_accuracy;
  const double transfer_acc =
      evaluate_attack(model, x, y, pgd_cfg, chunk, &surrogate).robust_accuracy;
  const double norm = input_gradient_norm(model, x, y, chunk);
  return {
      {"fgsm-vs-pgd", fgsm_acc >= pgd_acc, fgsm_acc, pgd_acc, "FGSM robust >= PGD robust"},
      {"transfer-vs-whitebox", transfer_acc >= pgd_acc, transfer_acc, pgd_acc,
       "transfer robust >= white-box robust"},
      {"gradient-norm", norm > 0.01, norm, 0.01, "mean input-gradient l2 norm > 0.01"},
  };
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return sha256_hex({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

std::string write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.close();
  if (!out) throw IoError("short write on " + path.string());
  return sha256_hex(text);
}

std::string metrics_csv(const Metrics& m) {
  std::string s = "metric,attack,epsilon,value\n";
  s += "clean_accuracy,,," + num(m.clean_accuracy) + "\n";
  for (const auto& r : m.robust) {
    s += "robust_accuracy," + r.attack + "," + num(r.epsilon) + "," + num(r.robust_accuracy) + "\n";
    s += "max_perturbation," + r.attack + "," + num(r.epsilon) + "," + num(r.max_perturbation) + "\n";
  }
  s += "input_gradient_norm,,," + num(m.input_gradient_norm) + "\n";
  return s;
}

std::string epochs_csv(const std::vector<EpochLog>& epochs) {
  std::vector<std::string> sites;
  if (!epochs.empty())
    for (const auto& [s, v] : epochs.front().pattern) sites.push_back(s);
  std::string s = "epoch,lr,cross_entropy";
  for (const auto& site : sites) s += ",pattern_" + site;
  s += ",total\n";
  for (const auto& e : epochs) {
    s += std::to_string(e.epoch) + "," + num(e.lr) + "," + num(e.cross_entropy);
    for (const auto& site : sites) s += "," + num(e.pattern.at(site));
    s += "," + num(e.total) + "\n";
  }
  return s;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "index,variant,clean_accuracy,attack,epsilon,robust_accuracy\n";
  for (const auto& r : rows) {
    const std::string head = std::to_string(r.index) + "," + r.variant + "," + num(r.metrics.clean_accuracy);
    if (r.metrics.robust.empty()) s += head + ",,,\n";
    for (const auto& a : r.metrics.robust)
      s += head + "," + a.attack + "," + num(a.epsilon) + "," + num(a.robust_accuracy) + "\n";
  }
  return s;
}

std::string gamma_csv(const std::vector<GammaRow>& rows) {
  std::string s = "gamma,keep_fraction,clean_accuracy,robust_accuracy\n";
  for (const auto& r : rows)
    s += num(r.gamma) + "," + num(1.0 - r.gamma) + "," + num(r.metrics.clean_accuracy) + "," +
         (r.metrics.robust.empty() ? std::string() : num(r.metrics.robust.front().robust_accuracy)) +
         "\n";
  return s;
}

std::string insertion_csv(const std::vector<InsertionRow>& rows) {
  std::string s = "order,pairs,sites,clean_accuracy,robust_accuracy\n";
  for (const auto& r : rows)
    s += r.order + "," + std::to_string(r.pairs) + "," + join(r.sites, ";") + "," +
         num(r.metrics.clean_accuracy) + "," +
         (r.metrics.robust.empty() ? std::string() : num(r.metrics.robust.front().robust_accuracy)) +
         "\n";
  return s;
}

std::string sanity_csv(const std::vector<SanityCheck>& checks) {
  std::string s = "check,pass,lhs,rhs,detail\n";
  for (const auto& c : checks)
    s += c.name + "," + (c.pass ? "1" : "0") + "," + num(c.lhs) + "," + num(c.rhs) + "," + c.detail + "\n";
  return s;
}

std::string bank_csv(const PatternBank& bank, const std::string& site) {
  const Tensor& t = bank.at(site);
  std::string s;
  for (std::size_t k = 0; k < t.dim(0); ++k) {
    for (std::size_t d = 0; d < t.dim(1); ++d) s += (d ? "," : "") + num(t[k * t.dim(1) + d]);
    s += "\n";
  }
  return s;
}

Json metrics_json(const Metrics& m) {
  Json robust = Json::array();
  for (const auto& r : m.robust) robust.push_back(summary_to_json(r));
  return {{"clean_accuracy", m.clean_accuracy},
          {"robust", robust},
          {"input_gradient_norm", m.input_gradient_norm}};
}

Metrics metrics_from_json(const Json& j) {
  Metrics m;
  m.clean_accuracy = j.at("clean_accuracy");
  m.input_gradient_norm = j.at("input_gradient_norm");
  for (const auto& r : j.at("robust"))
    m.robust.push_back({r.at("attack"), r.at("epsilon"), r.at("clean_accuracy"),
                        r.at("robust_accuracy"), r.at("max_perturbation")});
  return m;
}

void emit_report(RunManifest& manifest, const std::filesystem::path& dir,
                 const std::string& format) {
  if (format != "csv" && format != "json") throw ConfigError("format must be csv or json");
  if (format == "csv") {
    manifest.hashes["metrics.csv"] = write_text(dir / "metrics.csv", metrics_csv(manifest.metrics));
    manifest.hashes["epochs.csv"] = write_text(dir / "epochs.csv", epochs_csv(manifest.epochs));
  } else {
    manifest.hashes["metrics.json"] =
        write_text(dir / "metrics.json", metrics_json(manifest.metrics).dump(2) + "\n");
    manifest.hashes["epochs.json"] =
        write_text(dir / "epochs.json", manifest.to_json().at("epochs").dump(2) + "\n");
  }
  write_text(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
}

void save_params(const Params& params, const std::filesystem::path& path) {
  std::ostringstream out(std::ios::binary);
  auto put_u64 = [&out](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  out.write("FPCCPAR1", 8);
  put_u64(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    put_u64(params.names[i].size());
    out.write(params.names[i].data(), static_cast<std::streamsize>(params.names[i].size()));
    put_u64(t.rank());
    for (auto d : t.shape()) put_u64(d);
    out.write(reinterpret_cast<const char*>(t.vec().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  write_text(path, out.str());
}

Params load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto get_u64 = [&in]() {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw FormatError("truncated parameter file");
    return v;
  };
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "FPCCPAR1") throw FormatError("bad parameter file magic");
  Params p;
  const auto n = get_u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name(get_u64(), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape s(get_u64());
    for (auto& d : s) d = get_u64();
    std::vector<double> data(shape_size(s));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw FormatError("truncated parameter file");
    p.names.push_back(std::move(name));
    p.tensors.emplace_back(std::move(s), std::move(data));
  }
  return p;
}

}  // namespace fpcc
