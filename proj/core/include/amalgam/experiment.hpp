#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "amalgam/amalgamation_trainer.hpp"
#include "amalgam/optimizee_zoo.hpp"
#include "amalgam/optimizer_pool.hpp"

namespace amalgam {

// ---------------------------------------------------------------------------
// Flat key-value configuration text
//
// One `key = value` pair per line; `#` starts a comment; blank lines are
// ignored; sections are spelled into the key with dots (`train.meta_lr`).
// Keys are unique. Values are plain tokens, comma-separated lists, or empty.
// ---------------------------------------------------------------------------

/// Parsed key-value file that tracks which keys were consumed, so unknown
/// (misspelled) keys can be reported by name after a schema walks the file.
class FlatConfig {
 public:
  /// Throws ConfigError with a line number on malformed or duplicate lines.
  static FlatConfig parse(const std::string& text);

  bool has(const std::string& key) const;

  /// Typed getters: the fallback is returned when the key is absent; a
  /// present key that fails to convert throws ConfigError naming the key.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  uint64_t get_seed(const std::string& key, uint64_t fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_reals(const std::string& key, std::vector<double> fallback) const;
  std::vector<int64_t> get_ints(const std::string& key, std::vector<int64_t> fallback) const;

  /// Throws ConfigError naming the first key no getter ever consumed.
  void require_all_consumed() const;

 private:
  std::map<std::string, std::string> kv_;
  std::map<std::string, int> line_;
  mutable std::set<std::string> consumed_;
};

/// Locale-independent value formatting used everywhere a real number is
/// written to a config, CSV, or summary: the shortest decimal string that
/// parses back to the identical bits (infinities as "inf"/-"inf", NaN as
/// "nan").
std::string format_real(double v);
/// Inverse of format_real; throws ConfigError when the token is not a
/// complete real number.
double parse_real_token(const std::string& token, const std::string& where);

// ---------------------------------------------------------------------------
// Experiment description
// ---------------------------------------------------------------------------

/// Named teacher pools: the two-member pool (adam, rmsprop) and the full
/// six-member pool.
enum class PoolPreset { Small, Large };

const char* pool_preset_name(PoolPreset p);
PoolPreset pool_preset_from_name(const std::string& name);
std::vector<PoolKind> pool_members(PoolPreset p);

/// Which optimization problem family the experiment trains and evaluates
/// on, plus the data behind it.
struct OptimizeeSpec {
  std::string kind = "quadratic";  // quadratic | mlp | cnn

  // quadratic
  int64_t dim = 10;
  double conditioning = 5.0;

  // mlp / cnn architecture
  int64_t hidden = 16;                     // mlp hidden width
  std::vector<int64_t> channels = {2, 3};  // cnn conv channels
  int64_t image_h = 8;
  int64_t image_w = 8;
  int64_t image_ch = 1;

  // dataset behind mlp / cnn
  std::string data_kind = "synthetic";  // synthetic | idx
  int64_t data_n = 160;
  int64_t data_dim = 10;
  int64_t classes = 3;
  double separation = 3.0;
  int64_t batch_size = 32;
  std::string images_path;  // idx only; relative paths resolve under
  std::string labels_path;  // the AMALGAM_DATA_DIR environment variable
};

struct ExperimentConfig {
  AmalgamationKind mode = AmalgamationKind::Mean;
  PoolPreset pool = PoolPreset::Small;
  TrainConfig train;  // includes the perturbation block; seed is per replicate
  OptimizeeSpec optimizee;

  int64_t replicates = 1;
  int64_t evals_per_replicate = 10;
  int64_t eval_epochs = 25;
  int64_t eval_steps_per_epoch = 0;  // 0 = one training-set pass (20 if full-batch)

  std::vector<double> grid_lrs = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  int64_t grid_seeds = 2;
  int64_t grid_steps = 200;

  int64_t choice_meta_epochs = 40;  // optimal-choice teacher pre-training

  int64_t workers = 1;  // replicate training workers (0 = hardware threads)
  std::string out_dir = "out";
  uint64_t seed = 0;  // master seed
};

/// Text -> config (validates and rejects unknown keys field-by-field) and
/// config -> text (every key materialized, including defaults). The pair
/// round-trips: parsing the emitted text reproduces the config exactly.
ExperimentConfig experiment_from_text(const std::string& text);
std::string experiment_to_text(const ExperimentConfig& cfg);
void validate_experiment(const ExperimentConfig& cfg);

/// Replicate r trains with this seed; every stream inside the run derives
/// from it, so replicates are independent and reproducible in isolation.
uint64_t replicate_seed(const ExperimentConfig& cfg, int64_t replicate);

/// A problem family ready to train on: the factory, a CSV-safe descriptive
/// name, and the resolved evaluation epoch length in policy steps.
struct ExperimentProblem {
  ProblemFactory family;
  std::string name;
  int64_t steps_per_epoch = 0;
};

/// Builds the family described by the spec. IDX-backed specs resolve
/// relative paths against AMALGAM_DATA_DIR and load per instance.
ExperimentProblem make_problem(const OptimizeeSpec& spec, int64_t steps_per_epoch_override);

/// The family's CSV-safe descriptive name ("quadratic-10", "mlp-16",
/// "cnn-2-3"), computable without touching any dataset.
std::string problem_name(const OptimizeeSpec& spec);

// ---------------------------------------------------------------------------
// CSV schemas (the single inter-command contract)
// ---------------------------------------------------------------------------

/// evaluation.csv: one row per (replicate, evaluation, epoch).
struct EvalRow {
  int64_t replicate = 0;
  int64_t eval = 0;
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool diverged = false;
};

extern const char* const kEvalCsvHeader;  // replicate,eval,epoch,train_loss,val_loss,diverged

std::string format_eval_csv(const std::vector<EvalRow>& rows);
/// Throws IoError naming the 1-based line of the first malformed row.
std::vector<EvalRow> parse_eval_csv(const std::string& text);

/// stability.csv: one row per (problem, metric).
struct StabilityRow {
  std::string problem;
  std::string metric;
  double estimate = 0.0;
  double ci_low = 0.0;   // NaN when no interval applies
  double ci_high = 0.0;  // NaN when no interval applies
  int64_t n_diverged = 0;
};

extern const char* const kStabilityCsvHeader;

std::string format_stability_csv(const std::vector<StabilityRow>& rows);

/// train-log CSV: one row per meta-epoch, straight from the trainer log.
std::string format_train_log_csv(const std::vector<MetaEpochRecord>& log);

// ---------------------------------------------------------------------------
// Artifact layout within the output directory
// ---------------------------------------------------------------------------

std::string effective_config_path(const std::string& out_dir);           // effective-config.txt
std::string grid_path(const std::string& out_dir);                       // grid.csv
std::string checkpoint_path(const std::string& out_dir, int64_t rep);    // checkpoint-<r>.amlg
std::string train_log_path(const std::string& out_dir, int64_t rep);     // train-log-<r>.csv
std::string summary_path(const std::string& out_dir, int64_t rep);       // summary-<r>.txt
std::string evaluation_path(const std::string& out_dir);                 // evaluation.csv
std::string stability_path(const std::string& out_dir);                  // stability.csv
std::string report_path(const std::string& out_dir);                     // report.svg

}  // namespace amalgam
