#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "wassalign/common.hpp"
#include "wassalign/tape.hpp"
#include "wassalign/tensor.hpp"

namespace wassalign {

// A bank of random projection directions, one unit vector per row.
struct ProjectionSet {
  Tensor dirs;  // [count, dim], rows have unit Euclidean norm
  std::uint64_t seed = 0;

  std::int64_t count() const { return dirs.dim(0); }
  std::int64_t dim() const { return dirs.dim(1); }
};

// Draws `count` directions uniformly on the unit sphere in `dim` dimensions
// (normalized Gaussian vectors). Deterministic in `seed`.
ProjectionSet sample_projections(std::int64_t count, std::int64_t dim, DType dt,
                                 std::uint64_t seed);

// Fresh directions for a given optimization step, derived from (seed, step)
// only, so any step's directions can be reproduced without replaying the run.
ProjectionSet projections_for_step(std::int64_t count, std::int64_t dim, DType dt,
                                   std::uint64_t seed, std::int64_t step);

// Squared sliced distance between two point sets of identical shape [M, d]:
// project both onto every direction, sort each projection, and average the
// squared gaps between rank-matched scalars over directions (not over M).
// Differentiable through the sorted matching.
Var swd_distance(Tape& t, Var source, Var target, const ProjectionSet& proj);

// Index lists implementing the unequal-count policy: the larger side is
// subsampled to min(count_a, count_b) without replacement using `rng`; the
// smaller side is kept whole. Equal counts consume no randomness and map to
// identity.
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> pairing_indices(
    std::int64_t count_a, std::int64_t count_b, Rng& rng);

// Sum of per-class sliced distances over the classes present on both sides.
// Within each class, unequal counts are reconciled via pairing_indices.
// Classes absent on either side are skipped; if no class overlaps, throws.
// `classes_used` / `classes_skipped`, when given, receive the tallies.
Var class_conditional_swd(Tape& t, Var source, const std::vector<std::int64_t>& source_labels,
                          Var target, const std::vector<std::int64_t>& target_labels,
                          const ProjectionSet& proj, std::int64_t num_classes, Rng& rng,
                          std::int64_t* classes_used = nullptr,
                          std::int64_t* classes_skipped = nullptr);

// Mean over rows of -log softmax(logits)[label]. Numerically stabilized.
Var cross_entropy(Tape& t, Var logits, const std::vector<std::int64_t>& labels);

// Same per-row terms, summed instead of averaged.
Var cross_entropy_sum(Tape& t, Var logits, const std::vector<std::int64_t>& labels);

// Supervised contrastive loss over an even-sized batch of embeddings.
// Embeddings are L2-normalized internally; similarities are scaled by
// 1/temperature; for each anchor the positives are all other rows sharing its
// label, each weighted 1/|positives|. Anchors without positives are an error.
struct SupConConfig {
  double temperature = 0.1;
};
Var supcon_loss(Tape& t, Var embeddings, const std::vector<std::int64_t>& labels,
                const SupConConfig& cfg);

// Weights for the combined adaptation objective.
struct TransferWeights {
  double alpha = 1.0;        // marginal alignment weight
  double cond_weight = 0.0;  // class-conditional alignment weight
  bool normalize_target_ce = false;  // average the target term instead of summing
  std::int64_t num_classes = 0;
};

// Logged breakdown of one objective evaluation. Each field holds the weighted
// term as added into `total`; absent terms stay zero.
struct TransferParts {
  Var total;
  double source_ce = 0.0;
  double target_ce = 0.0;
  double marginal_align = 0.0;
  double conditional_align = 0.0;
  std::int64_t cond_classes_used = 0;
  std::int64_t cond_classes_skipped = 0;
};

// Builds the combined objective. Terms are included only when their inputs are
// present and their weights are nonzero, so disabling a term removes its
// computation entirely rather than adding a zero:
//   - mean source cross-entropy over (src_logits, src_labels)
//   - summed (or averaged) target cross-entropy over (tgt_logits, tgt_labels)
//   - alpha * swd_distance between the alignment embeddings, with unequal
//     counts reconciled via pairing_indices using `pair_rng`
//   - cond_weight * per-class sliced distance using the alignment label
//     vectors; a label of -1 marks an unlabeled row that joins no class;
//     classes missing on either side are skipped and tallied, and a batch
//     with no overlapping class skips the whole term (not an error)
TransferParts transfer_objective(Tape& t,
                                 std::optional<Var> src_logits,
                                 const std::vector<std::int64_t>& src_labels,
                                 std::optional<Var> tgt_logits,
                                 const std::vector<std::int64_t>& tgt_labels,
                                 std::optional<Var> src_align,
                                 const std::vector<std::int64_t>& src_align_labels,
                                 std::optional<Var> tgt_align,
                                 const std::vector<std::int64_t>& tgt_align_labels,
                                 const ProjectionSet& proj, const TransferWeights& weights,
                                 Rng& pair_rng);

}  // namespace wassalign
