#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wassalign/common.hpp"
#include "wassalign/data.hpp"
#include "wassalign/metrics.hpp"
#include "wassalign/nn.hpp"
#include "wassalign/optim.hpp"

namespace wassalign {

// Which encoder of the Y-network feeds the shared head.
enum class Branch : std::uint8_t { Source = 0, Target = 1 };

const char* branch_name(Branch b);
Branch branch_from_string(const std::string& s);

// Settings for one training phase. A weight of zero disables its term
// entirely: the term is never built and its random streams are never drawn
// from, so the remaining pipeline is bit-identical to one without the term.
//
// Random streams fork from `seed` under fixed ids so that enabling or
// disabling one consumer never shifts another:
//   100 pretraining batch order      101 pretraining augmentations
//   110 transfer source batches      111 transfer labeled-target batches
//   112 transfer unlabeled batches   113 transfer pairing (re-forked per step)
//   114 transfer projection seed     120 target-only batches
//   130 finetune batches
struct TrainConfig {
  double alpha = 1.0;             // marginal alignment weight (transfer only)
  double cond_weight = 1.0;       // class-conditional alignment weight (transfer only)
  double supcon_weight = 0.0;     // contrastive weight (pretraining only)
  double temperature = 0.1;       // contrastive temperature
  std::int64_t projections = 50;  // directions per alignment evaluation
  OptimConfig optim;
  std::int64_t source_batch = 64;
  std::int64_t target_batch = 64;
  std::int64_t unlabeled_batch = 0;  // 0: match source_batch
  std::int64_t epochs = 30;
  double pseudo_threshold = 0.6;  // min softmax confidence for a pseudo-label
  // Spatial augmentations are deliberately absent from the default policy: the
  // synthetic corpus renders latents through a fixed random per-pixel map, so
  // shifted or rotated views carry their class evidence in statistically
  // unrelated pixel patterns and stop being label-preserving in practice.
  std::vector<Augment> augment = {Augment::GaussianNoise};
  double augment_sigma = 0.05;
  bool normalize_target_ce = false;  // average the target CE instead of summing
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

// Weights must be >= 0 (zero disables), batch sizes >= 2, the learning
// rate positive, the pseudo-label threshold in (0, 1], and the contrastive
// batch even (views come in same-class pairs).
void validate_train_config(const TrainConfig& cfg);

struct TrainResult {
  // Per-epoch records: one "train" record per epoch, followed by a "val"
  // record when a validation set is available.
  std::vector<MetricsRecord> records;
};

// Phase 1: trains the source encoder and the shared head on labeled source
// data with cross-entropy, plus supcon_weight times the contrastive loss on
// multiviewed batches when that weight is positive. Emits one train and one
// val record per epoch (appended to `log` when given). `step_losses`, when
// given, collects the scalar loss of every optimizer step. A non-finite
// loss aborts with the offending term named.
TrainResult pretrain_source(YNetwork& net, const Dataset& source_train, const Dataset& source_val,
                            const TrainConfig& cfg, MetricsLog* log = nullptr,
                            std::vector<double>* step_losses = nullptr);

// Phase 2: joint objective over both encoders and the head. The target
// encoder is first warm-started as a copy of the (phase-1-trained) source
// encoder, since phase 1 never touches it. Per step: mean source CE on a
// replayed labeled source batch, summed target CE on a labeled target
// batch, then alpha times the sliced distance between the source batch and
// an unlabeled target batch plus cond_weight times its class-conditional
// counterpart, on a fresh projection set re-seeded from the step index.
// Pseudo-labels for the unlabeled pool are refreshed once per epoch; rows
// below the confidence threshold join no class, and a step whose
// conditional term finds no overlapping class is counted in the epoch
// record's cond_skipped_steps rather than failing. When both alignment
// weights are zero, or the unlabeled pool is empty, the pool is ignored
// outright and the phase is plain two-branch fine-tuning. The contrastive
// settings are not consulted here.
TrainResult train_transfer(YNetwork& net, const Dataset& target_labeled,
                           const Dataset& target_unlabeled, const Dataset& source_train,
                           const TrainConfig& cfg, const Dataset* target_val = nullptr,
                           MetricsLog* log = nullptr, std::vector<double>* step_losses = nullptr);

// Baseline: cross-entropy on the target branch only, from whatever state
// `net` is in (pass a freshly initialized network for the from-scratch
// baseline).
TrainResult baseline_target_only(YNetwork& net, const Dataset& target_labeled,
                                 const TrainConfig& cfg, const Dataset* target_val = nullptr,
                                 MetricsLog* log = nullptr,
                                 std::vector<double>* step_losses = nullptr);

// Baseline: copies the source encoder's weights onto the target encoder,
// then fine-tunes the target branch with cross-entropy. With zero epochs
// the network is left exactly at the copied state.
TrainResult baseline_finetune(YNetwork& net, const Dataset& target_labeled,
                              const TrainConfig& cfg, const Dataset* target_val = nullptr,
                              MetricsLog* log = nullptr, std::vector<double>* step_losses = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;                      // diagonal / row sum, 0 for absent classes
  std::vector<std::vector<std::int64_t>> confusion;   // [true][predicted]
  double mean_ce = 0.0;                               // mean cross-entropy over the set
};

// Deterministic evaluation-mode pass in fixed row order. Predictions are
// the argmax of the logits (lowest index on ties). Empty datasets are an
// error.
EvalResult evaluate(YNetwork& net, const Dataset& ds, Branch branch,
                    std::int64_t batch_size = 256);

// Evaluation-mode predictions over `ds` through the target branch: the
// argmax class where the softmax confidence reaches `threshold`, else -1.
std::vector<std::int64_t> pseudo_labels(YNetwork& net, const Dataset& ds, double threshold,
                                        std::int64_t batch_size = 256);

// Across-seed aggregate: mean and standard error (sample standard
// deviation over the square root of the count). Needs at least two values.
struct SweepStat {
  double mean = 0.0;
  double se = 0.0;
};

SweepStat sweep_stat(const std::vector<double>& values);

}  // namespace wassalign
