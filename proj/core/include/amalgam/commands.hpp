#pragma once

#include <string>
#include <vector>

#include "amalgam/checkpoint.hpp"
#include "amalgam/experiment.hpp"
#include "amalgam/learned_optimizer.hpp"

namespace amalgam {

/// Checkpoint entry list for a learned-policy parameter set (fixed names,
/// one per tensor in flattening order) and its strict inverse, which
/// verifies names and shapes before rebuilding the parameters.
std::vector<CheckpointEntry> policy_checkpoint_entries(const std::vector<Tensor>& flat);
RnnPropParams policy_from_checkpoint(const std::vector<CheckpointEntry>& entries);

/// Held-out validation of a policy, averaged over the experiment's
/// validation problems: the stream is derived from the replicate seed, so
/// reloading a checkpoint and calling this reproduces the summary line
/// exactly. Uses the longest configured unroll as the rollout depth.
double final_validation_loss(const ExperimentConfig& cfg, const ExperimentProblem& prob,
                             Policy& policy, uint64_t rep_seed);

struct TrainArtifacts {
  std::string effective_config;
  std::string grid_file;
  std::vector<std::string> checkpoints;  // one per replicate, in order
  std::vector<std::string> train_logs;
  std::vector<std::string> summaries;
};

/// Full training pipeline: materialize the effective config, tune the pool
/// by grid search (reusing grid.csv when it already covers the pool),
/// pre-train the choice teacher when the mode calls for one, run one
/// amalgamation per replicate (in parallel when workers > 1), and persist
/// the best-validation checkpoint plus log and summary per replicate.
TrainArtifacts cmd_train(const ExperimentConfig& cfg);

/// Evaluates every replicate's checkpoint on the held-out evaluation
/// problem: per evaluation a warmup then eval_epochs x steps_per_epoch
/// policy-driven steps, recording per-epoch mean training loss and
/// end-of-epoch validation loss. Divergence ends that evaluation's rows
/// with a flagged row; it is never fatal. Returns the evaluation CSV path.
std::string cmd_evaluate(const ExperimentConfig& cfg);

/// Reads the evaluation CSV and writes per-problem stability estimates:
/// mean/meta/evaluation spread of the best validation loss, and the same
/// decomposition of the filter-residual optimization stability score.
/// Metrics that need more replicates or evaluations than the data holds
/// are written as nan rather than failing. Returns the stability CSV path.
std::string cmd_stability(const ExperimentConfig& cfg);

/// Renders the evaluation CSV as an SVG: training and validation loss vs
/// epoch, mean line with a +/- 2 standard deviation band across all
/// non-diverged evaluations. Returns the SVG path.
std::string cmd_report(const ExperimentConfig& cfg);

}  // namespace amalgam
