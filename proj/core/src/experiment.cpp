#include "amalgam/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "amalgam/errors.hpp"
#include "amalgam/perturbation.hpp"
#include "amalgam/rng.hpp"

namespace amalgam {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  size_t start = 0;
  while (true) {
    size_t comma = value.find(',', start);
    out.push_back(trim(comma == std::string::npos ? value.substr(start)
                                                  : value.substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int64_t parse_int_token(const std::string& token, const std::string& where) {
  int64_t v = 0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw ConfigError(where + ": expected an integer, got '" + token + "'");
  return v;
}

uint64_t parse_seed_token(const std::string& token, const std::string& where) {
  uint64_t v = 0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw ConfigError(where + ": expected an unsigned integer, got '" + token + "'");
  return v;
}

}  // namespace

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;  // 64 bytes always suffice for the shortest form
  return std::string(buf, ptr);
}

double parse_real_token(const std::string& token, const std::string& where) {
  double v = 0.0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v, std::chars_format::general);
  if (ec == std::errc::result_out_of_range) {
    // Accepted: the token is a real number, merely outside double range.
    return ptr == end ? v : throw ConfigError(where + ": expected a real number, got '" + token +
                                              "'");
  }
  if (ec != std::errc() || ptr != end)
    throw ConfigError(where + ": expected a real number, got '" + token + "'");
  return v;
}

// ---------------------------------------------------------------------------
// FlatConfig
// ---------------------------------------------------------------------------

FlatConfig FlatConfig::parse(const std::string& text) {
  FlatConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    auto [it, inserted] = cfg.kv_.emplace(key, value);
    if (!inserted)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key +
                        "' (first set on line " + std::to_string(cfg.line_.at(key)) + ")");
    cfg.line_[key] = line_no;
  }
  return cfg;
}

bool FlatConfig::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

int64_t FlatConfig::get_int(const std::string& key, int64_t fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  return parse_int_token(it->second, "config key '" + key + "'");
}

uint64_t FlatConfig::get_seed(const std::string& key, uint64_t fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  return parse_seed_token(it->second, "config key '" + key + "'");
}

double FlatConfig::get_real(const std::string& key, double fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  return parse_real_token(it->second, "config key '" + key + "'");
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  if (it->second == "true") return true;
  if (it->second == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + it->second + "'");
}

std::vector<double> FlatConfig::get_reals(const std::string& key,
                                          std::vector<double> fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::vector<double> out;
  for (const std::string& tok : split_list(it->second))
    out.push_back(parse_real_token(tok, "config key '" + key + "'"));
  return out;
}

std::vector<int64_t> FlatConfig::get_ints(const std::string& key,
                                          std::vector<int64_t> fallback) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::vector<int64_t> out;
  for (const std::string& tok : split_list(it->second))
    out.push_back(parse_int_token(tok, "config key '" + key + "'"));
  return out;
}

void FlatConfig::require_all_consumed() const {
  std::string unknown;
  for (const auto& [key, value] : kv_) {
    if (consumed_.count(key)) continue;
    if (!unknown.empty()) unknown += ", ";
    unknown += "'" + key + "'";
  }
  if (!unknown.empty())
    throw ConfigError("config: unrecognized key(s) " + unknown);
}

// ---------------------------------------------------------------------------
// Experiment description
// ---------------------------------------------------------------------------

const char* pool_preset_name(PoolPreset p) {
  return p == PoolPreset::Small ? "small" : "large";
}

PoolPreset pool_preset_from_name(const std::string& name) {
  if (name == "small") return PoolPreset::Small;
  if (name == "large") return PoolPreset::Large;
  throw ConfigError("unknown pool '" + name + "' (expected small or large)");
}

std::vector<PoolKind> pool_members(PoolPreset p) {
  if (p == PoolPreset::Small) return {PoolKind::Adam, PoolKind::RmsProp};
  return {PoolKind::Adam,    PoolKind::RmsProp, PoolKind::Sgd,
          PoolKind::Momentum, PoolKind::AddSign, PoolKind::PowerSign};
}

ExperimentConfig experiment_from_text(const std::string& text) {
  const FlatConfig f = FlatConfig::parse(text);
  ExperimentConfig c;

  try {
    c.mode = amalgamation_kind_from_name(f.get_string("mode", amalgamation_kind_name(c.mode)));
  } catch (const ConfigError& e) {
    throw ConfigError("config key 'mode': " + std::string(e.what()));
  }
  try {
    c.pool = pool_preset_from_name(f.get_string("pool", pool_preset_name(c.pool)));
  } catch (const ConfigError& e) {
    throw ConfigError("config key 'pool': " + std::string(e.what()));
  }
  c.seed = f.get_seed("seed", c.seed);
  c.replicates = f.get_int("replicates", c.replicates);
  c.workers = f.get_int("workers", c.workers);
  c.out_dir = f.get_string("output.dir", c.out_dir);

  OptimizeeSpec& o = c.optimizee;
  o.kind = f.get_string("optimizee.kind", o.kind);
  o.dim = f.get_int("optimizee.dim", o.dim);
  o.conditioning = f.get_real("optimizee.conditioning", o.conditioning);
  o.hidden = f.get_int("optimizee.hidden", o.hidden);
  o.channels = f.get_ints("optimizee.channels", o.channels);
  o.image_h = f.get_int("optimizee.image.h", o.image_h);
  o.image_w = f.get_int("optimizee.image.w", o.image_w);
  o.image_ch = f.get_int("optimizee.image.ch", o.image_ch);
  o.data_kind = f.get_string("optimizee.data.kind", o.data_kind);
  o.data_n = f.get_int("optimizee.data.n", o.data_n);
  o.data_dim = f.get_int("optimizee.data.dim", o.data_dim);
  o.classes = f.get_int("optimizee.data.classes", o.classes);
  o.separation = f.get_real("optimizee.data.separation", o.separation);
  o.batch_size = f.get_int("optimizee.data.batch_size", o.batch_size);
  o.images_path = f.get_string("optimizee.data.images", o.images_path);
  o.labels_path = f.get_string("optimizee.data.labels", o.labels_path);

  TrainConfig& t = c.train;
  t.meta_epochs = f.get_int("train.meta_epochs", t.meta_epochs);
  t.unroll_n = f.get_int("train.unroll_n", t.unroll_n);
  t.truncation_t = f.get_int("train.truncation_t", t.truncation_t);
  t.alpha = f.get_real("train.alpha", t.alpha);
  t.meta_lr = f.get_real("train.meta_lr", t.meta_lr);
  t.clip_norm = f.get_real("train.clip_norm", t.clip_norm);
  t.curriculum_stages = f.get_ints("train.curriculum", t.curriculum_stages);
  t.validation_interval = f.get_int("train.validation_interval", t.validation_interval);
  t.patience = f.get_int("train.patience", t.patience);
  t.stage_max_epochs = f.get_int("train.stage_max_epochs", t.stage_max_epochs);
  t.validation_problems = f.get_int("train.validation_problems", t.validation_problems);
  t.warmup_steps = f.get_int("train.warmup_steps", t.warmup_steps);
  t.warmup_lr = f.get_real("train.warmup_lr", t.warmup_lr);
  t.random_scaling = f.get_bool("train.random_scaling", t.random_scaling);
  t.scale_min = f.get_real("train.scale_min", t.scale_min);
  t.scale_max = f.get_real("train.scale_max", t.scale_max);
  t.reset_teachers_to_student = f.get_bool("train.reset_teachers", t.reset_teachers_to_student);

  PerturbationConfig& p = t.perturb;
  p.kind = perturbation_kind_from_name(
      f.get_string("perturbation.kind", perturbation_kind_name(p.kind)));
  p.sigma = f.get_real("perturbation.sigma", p.sigma);
  p.epsilon = f.get_real("perturbation.epsilon", p.epsilon);
  p.steps_A = f.get_int("perturbation.steps", p.steps_A);

  c.grid_lrs = f.get_reals("grid.lrs", c.grid_lrs);
  c.grid_seeds = f.get_int("grid.seeds", c.grid_seeds);
  c.grid_steps = f.get_int("grid.steps", c.grid_steps);
  c.choice_meta_epochs = f.get_int("choice.meta_epochs", c.choice_meta_epochs);
  c.evals_per_replicate = f.get_int("eval.per_replicate", c.evals_per_replicate);
  c.eval_epochs = f.get_int("eval.epochs", c.eval_epochs);
  c.eval_steps_per_epoch = f.get_int("eval.steps_per_epoch", c.eval_steps_per_epoch);

  f.require_all_consumed();
  validate_experiment(c);
  return c;
}

std::string experiment_to_text(const ExperimentConfig& c) {
  std::string out;
  auto kv = [&out](const std::string& key, const std::string& value) {
    out += key;
    out += " = ";
    out += value;
    out += "\n";
  };
  auto ints = [](const std::vector<int64_t>& vs) {
    std::string s;
    for (size_t i = 0; i < vs.size(); ++i) s += (i ? "," : "") + std::to_string(vs[i]);
    return s;
  };
  auto reals = [](const std::vector<double>& vs) {
    std::string s;
    for (size_t i = 0; i < vs.size(); ++i) s += (i ? "," : "") + format_real(vs[i]);
    return s;
  };

  kv("mode", amalgamation_kind_name(c.mode));
  kv("pool", pool_preset_name(c.pool));
  kv("seed", std::to_string(c.seed));
  kv("replicates", std::to_string(c.replicates));
  kv("workers", std::to_string(c.workers));
  kv("output.dir", c.out_dir);
  out += "\n";

  const OptimizeeSpec& o = c.optimizee;
  kv("optimizee.kind", o.kind);
  kv("optimizee.dim", std::to_string(o.dim));
  kv("optimizee.conditioning", format_real(o.conditioning));
  kv("optimizee.hidden", std::to_string(o.hidden));
  kv("optimizee.channels", ints(o.channels));
  kv("optimizee.image.h", std::to_string(o.image_h));
  kv("optimizee.image.w", std::to_string(o.image_w));
  kv("optimizee.image.ch", std::to_string(o.image_ch));
  kv("optimizee.data.kind", o.data_kind);
  kv("optimizee.data.n", std::to_string(o.data_n));
  kv("optimizee.data.dim", std::to_string(o.data_dim));
  kv("optimizee.data.classes", std::to_string(o.classes));
  kv("optimizee.data.separation", format_real(o.separation));
  kv("optimizee.data.batch_size", std::to_string(o.batch_size));
  kv("optimizee.data.images", o.images_path);
  kv("optimizee.data.labels", o.labels_path);
  out += "\n";

  const TrainConfig& t = c.train;
  kv("train.meta_epochs", std::to_string(t.meta_epochs));
  kv("train.unroll_n", std::to_string(t.unroll_n));
  kv("train.truncation_t", std::to_string(t.truncation_t));
  kv("train.alpha", format_real(t.alpha));
  kv("train.meta_lr", format_real(t.meta_lr));
  kv("train.clip_norm", format_real(t.clip_norm));
  kv("train.curriculum", ints(t.curriculum_stages));
  kv("train.validation_interval", std::to_string(t.validation_interval));
  kv("train.patience", std::to_string(t.patience));
  kv("train.stage_max_epochs", std::to_string(t.stage_max_epochs));
  kv("train.validation_problems", std::to_string(t.validation_problems));
  kv("train.warmup_steps", std::to_string(t.warmup_steps));
  kv("train.warmup_lr", format_real(t.warmup_lr));
  kv("train.random_scaling", t.random_scaling ? "true" : "false");
  kv("train.scale_min", format_real(t.scale_min));
  kv("train.scale_max", format_real(t.scale_max));
  kv("train.reset_teachers", t.reset_teachers_to_student ? "true" : "false");
  out += "\n";

  const PerturbationConfig& p = t.perturb;
  kv("perturbation.kind", perturbation_kind_name(p.kind));
  kv("perturbation.sigma", format_real(p.sigma));
  kv("perturbation.epsilon", format_real(p.epsilon));
  kv("perturbation.steps", std::to_string(p.steps_A));
  out += "\n";

  kv("grid.lrs", reals(c.grid_lrs));
  kv("grid.seeds", std::to_string(c.grid_seeds));
  kv("grid.steps", std::to_string(c.grid_steps));
  kv("choice.meta_epochs", std::to_string(c.choice_meta_epochs));
  kv("eval.per_replicate", std::to_string(c.evals_per_replicate));
  kv("eval.epochs", std::to_string(c.eval_epochs));
  kv("eval.steps_per_epoch", std::to_string(c.eval_steps_per_epoch));
  return out;
}

namespace {

void check_min(int64_t v, int64_t lo, const std::string& key) {
  if (v < lo)
    throw ConfigError(key + ": must be at least " + std::to_string(lo) + ", got " +
                      std::to_string(v));
}

void validate_optimizee(const OptimizeeSpec& o) {
  if (o.kind != "quadratic" && o.kind != "mlp" && o.kind != "cnn")
    throw ConfigError("optimizee.kind: expected quadratic, mlp, or cnn, got '" + o.kind + "'");
  check_min(o.dim, 1, "optimizee.dim");
  if (!(o.conditioning >= 1.0))
    throw ConfigError("optimizee.conditioning: must be >= 1, got " + format_real(o.conditioning));
  check_min(o.hidden, 1, "optimizee.hidden");
  if (o.channels.empty()) throw ConfigError("optimizee.channels: must not be empty");
  for (int64_t ch : o.channels) check_min(ch, 1, "optimizee.channels");
  check_min(o.image_h, 1, "optimizee.image.h");
  check_min(o.image_w, 1, "optimizee.image.w");
  check_min(o.image_ch, 1, "optimizee.image.ch");
  if (o.data_kind != "synthetic" && o.data_kind != "idx")
    throw ConfigError("optimizee.data.kind: expected synthetic or idx, got '" + o.data_kind + "'");
  check_min(o.data_n, 5, "optimizee.data.n");
  check_min(o.data_dim, 1, "optimizee.data.dim");
  check_min(o.classes, 2, "optimizee.data.classes");
  if (!(o.separation > 0.0))
    throw ConfigError("optimizee.data.separation: must be positive, got " +
                      format_real(o.separation));
  check_min(o.batch_size, 1, "optimizee.data.batch_size");
  if (o.data_kind == "idx") {
    if (o.images_path.empty()) throw ConfigError("optimizee.data.images: required for idx data");
    if (o.labels_path.empty()) throw ConfigError("optimizee.data.labels: required for idx data");
  }
  if (o.kind == "cnn" && o.data_kind == "synthetic" &&
      o.data_dim != o.image_h * o.image_w * o.image_ch)
    throw ConfigError("optimizee.data.dim: cnn input needs image.h * image.w * image.ch = " +
                      std::to_string(o.image_h * o.image_w * o.image_ch) + " features, got " +
                      std::to_string(o.data_dim));
}

}  // namespace

void validate_experiment(const ExperimentConfig& c) {
  validate_train_config(c.train);
  validate_optimizee(c.optimizee);
  check_min(c.replicates, 1, "replicates");
  check_min(c.evals_per_replicate, 1, "eval.per_replicate");
  check_min(c.eval_epochs, 1, "eval.epochs");
  check_min(c.eval_steps_per_epoch, 0, "eval.steps_per_epoch");
  check_min(c.grid_seeds, 1, "grid.seeds");
  check_min(c.grid_steps, 1, "grid.steps");
  check_min(c.choice_meta_epochs, 1, "choice.meta_epochs");
  check_min(c.workers, 0, "workers");
  if (c.grid_lrs.empty()) throw ConfigError("grid.lrs: must not be empty");
  for (double lr : c.grid_lrs)
    if (!std::isfinite(lr) || lr <= 0.0)
      throw ConfigError("grid.lrs: learning rates must be positive, got " + format_real(lr));
  if (c.out_dir.empty()) throw ConfigError("output.dir: must not be empty");
}

uint64_t replicate_seed(const ExperimentConfig& cfg, int64_t replicate) {
  return derive_seed(cfg.seed, "replicate", static_cast<uint64_t>(replicate));
}

// ---------------------------------------------------------------------------
// Problem families
// ---------------------------------------------------------------------------

namespace {

std::string resolve_data_path(const std::string& raw, const std::string& key) {
  std::filesystem::path p(raw);
  if (p.is_absolute()) return raw;
  const char* root = std::getenv("AMALGAM_DATA_DIR");
  if (root == nullptr || *root == '\0')
    throw ConfigError(key + ": relative path '" + raw +
                      "' needs the AMALGAM_DATA_DIR environment variable");
  return (std::filesystem::path(root) / p).string();
}

std::shared_ptr<DatasetSource> build_source(const OptimizeeSpec& o, uint64_t instance_seed) {
  if (o.data_kind == "synthetic")
    return synth_classification(o.data_n, o.data_dim, o.classes, o.separation,
                                derive_seed(instance_seed, "data"), o.batch_size);
  const std::string images = resolve_data_path(o.images_path, "optimizee.data.images");
  const std::string labels = resolve_data_path(o.labels_path, "optimizee.data.labels");
  return idx_source(images, labels, o.classes, o.batch_size);
}

std::shared_ptr<const Optimizee> build_net(const OptimizeeSpec& o, uint64_t instance_seed) {
  std::shared_ptr<DatasetSource> source = build_source(o, instance_seed);
  const uint64_t init_seed = derive_seed(instance_seed, "init");
  if (o.kind == "mlp")
    return std::shared_ptr<const Optimizee>(
        make_mlp(o.hidden, o.data_dim, o.classes, init_seed, std::move(source)));
  return std::shared_ptr<const Optimizee>(make_cnn(o.channels, o.classes, init_seed,
                                                   std::move(source), o.image_h, o.image_w,
                                                   o.image_ch));
}

}  // namespace

std::string problem_name(const OptimizeeSpec& spec) {
  if (spec.kind == "quadratic") return "quadratic-" + std::to_string(spec.dim);
  if (spec.kind == "mlp") return "mlp-" + std::to_string(spec.hidden);
  std::string name = "cnn";
  for (int64_t ch : spec.channels) name += "-" + std::to_string(ch);
  return name;
}

ExperimentProblem make_problem(const OptimizeeSpec& spec, int64_t steps_per_epoch_override) {
  validate_optimizee(spec);
  ExperimentProblem out;
  out.name = problem_name(spec);
  if (spec.kind == "quadratic") {
    out.family = [spec](uint64_t seed) {
      return std::shared_ptr<const Optimizee>(
          make_quadratic(spec.dim, spec.conditioning, seed));
    };
    out.steps_per_epoch = 20;  // full-batch problems have no natural pass length
  } else {
    out.family = [spec](uint64_t seed) { return build_net(spec, seed); };
    // One training-set pass, probed from a throwaway source (the split
    // depends only on the sizes, never on the seed).
    std::shared_ptr<DatasetSource> probe = build_source(spec, 0);
    out.steps_per_epoch = std::max<int64_t>(1, probe->train_size() / probe->batch_size());
  }
  if (steps_per_epoch_override > 0) out.steps_per_epoch = steps_per_epoch_override;
  return out;
}

// ---------------------------------------------------------------------------
// CSV schemas
// ---------------------------------------------------------------------------

const char* const kEvalCsvHeader = "replicate,eval,epoch,train_loss,val_loss,diverged";
const char* const kStabilityCsvHeader = "problem,metric,estimate,ci_low,ci_high,n_diverged";

std::string format_eval_csv(const std::vector<EvalRow>& rows) {
  std::string out = kEvalCsvHeader;
  out += "\n";
  for (const EvalRow& r : rows) {
    out += std::to_string(r.replicate);
    out += ",";
    out += std::to_string(r.eval);
    out += ",";
    out += std::to_string(r.epoch);
    out += ",";
    out += format_real(r.train_loss);
    out += ",";
    out += format_real(r.val_loss);
    out += ",";
    out += r.diverged ? "1" : "0";
    out += "\n";
  }
  return out;
}

namespace {

struct CsvCursor {
  std::istringstream in;
  int line_no = 0;

  explicit CsvCursor(const std::string& text) : in(text) {}

  bool next(std::string& line) {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw IoError("evaluation CSV line " + std::to_string(line_no) + ": " + msg);
  }
};

}  // namespace

std::vector<EvalRow> parse_eval_csv(const std::string& text) {
  CsvCursor cur(text);
  std::string line;
  if (!cur.next(line)) throw IoError("evaluation CSV line 1: missing header");
  if (line != kEvalCsvHeader)
    cur.fail("expected header '" + std::string(kEvalCsvHeader) + "', got '" + line + "'");

  std::vector<EvalRow> rows;
  while (cur.next(line)) {
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      fields.push_back(comma == std::string::npos ? line.substr(start)
                                                  : line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 6)
      cur.fail("expected 6 fields, got " + std::to_string(fields.size()));
    EvalRow r;
    try {
      r.replicate = parse_int_token(fields[0], "field 'replicate'");
      r.eval = parse_int_token(fields[1], "field 'eval'");
      r.epoch = parse_int_token(fields[2], "field 'epoch'");
      r.train_loss = parse_real_token(fields[3], "field 'train_loss'");
      r.val_loss = parse_real_token(fields[4], "field 'val_loss'");
    } catch (const ConfigError& e) {
      cur.fail(e.what());
    }
    if (fields[5] == "0") {
      r.diverged = false;
    } else if (fields[5] == "1") {
      r.diverged = true;
    } else {
      cur.fail("field 'diverged': expected 0 or 1, got '" + fields[5] + "'");
    }
    if (r.replicate < 0 || r.eval < 0) cur.fail("replicate and eval must be non-negative");
    if (r.epoch < 1) cur.fail("epoch numbering starts at 1");
    rows.push_back(r);
  }
  return rows;
}

std::string format_stability_csv(const std::vector<StabilityRow>& rows) {
  std::string out = kStabilityCsvHeader;
  out += "\n";
  for (const StabilityRow& r : rows) {
    out += r.problem;
    out += ",";
    out += r.metric;
    out += ",";
    out += format_real(r.estimate);
    out += ",";
    out += format_real(r.ci_low);
    out += ",";
    out += format_real(r.ci_high);
    out += ",";
    out += std::to_string(r.n_diverged);
    out += "\n";
  }
  return out;
}

std::string format_train_log_csv(const std::vector<MetaEpochRecord>& log) {
  std::string out = "epoch,stage,train_meta_loss,train_total_loss,diverged,validated,val_meta_loss\n";
  for (const MetaEpochRecord& r : log) {
    out += std::to_string(r.epoch);
    out += ",";
    out += std::to_string(r.stage);
    out += ",";
    out += format_real(r.train_meta_loss);
    out += ",";
    out += format_real(r.train_total_loss);
    out += ",";
    out += r.diverged ? "1" : "0";
    out += ",";
    out += r.validated ? "1" : "0";
    out += ",";
    out += format_real(r.val_meta_loss);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

namespace {
std::string joined(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}
}  // namespace

std::string effective_config_path(const std::string& d) { return joined(d, "effective-config.txt"); }
std::string grid_path(const std::string& d) { return joined(d, "grid.csv"); }
std::string checkpoint_path(const std::string& d, int64_t r) {
  return joined(d, "checkpoint-" + std::to_string(r) + ".amlg");
}
std::string train_log_path(const std::string& d, int64_t r) {
  return joined(d, "train-log-" + std::to_string(r) + ".csv");
}
std::string summary_path(const std::string& d, int64_t r) {
  return joined(d, "summary-" + std::to_string(r) + ".txt");
}
std::string evaluation_path(const std::string& d) { return joined(d, "evaluation.csv"); }
std::string stability_path(const std::string& d) { return joined(d, "stability.csv"); }
std::string report_path(const std::string& d) { return joined(d, "report.svg"); }

}  // namespace amalgam
