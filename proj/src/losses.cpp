#include "wassalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

namespace wassalign {

namespace {

void check_point_set(const Var& v, const char* op, const char* which) {
  if (!v.valid()) throw ValueError(std::string(op) + ": " + which + " is not a recorded value");
  if (v.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": " + which + " must be 2-d [count, dim], got " +
                     shape_str(v.shape()));
  }
  if (v.shape()[0] < 1) throw ValueError(std::string(op) + ": " + which + " has no rows");
}

void check_labels(const std::vector<std::int64_t>& labels, std::int64_t rows,
                  std::int64_t num_classes, const char* op, const char* which,
                  std::int64_t min_label = 0) {
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ShapeError(std::string(op) + ": " + which + " has " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < min_label || labels[i] >= num_classes) {
      throw ValueError(std::string(op) + ": " + which + "[" + std::to_string(i) + "] = " +
                       std::to_string(labels[i]) + " is outside [" + std::to_string(min_label) +
                       ", " + std::to_string(num_classes) + ")");
    }
  }
}

// Squared distance between rank-matched projections, averaged over the
// direction count only. Shapes are assumed validated by the caller.
Var sliced_term(Tape& t, Var source, Var target, const ProjectionSet& proj) {
  const std::int64_t m = source.shape()[0];
  Var dirs = t.leaf(proj.dirs.astype(source.dtype()));
  Var ps = t.matmul(dirs, t.transpose2d(source));  // [L, M]
  Var pt = t.matmul(dirs, t.transpose2d(target));
  Var acc;
  for (std::int64_t l = 0; l < proj.count(); ++l) {
    Var row_s = t.reshape(t.index_select0(ps, {l}), {m});
    Var row_t = t.reshape(t.index_select0(pt, {l}), {m});
    Var sorted_s = t.sort1d(row_s).first;
    Var sorted_t = t.sort1d(row_t).first;
    Var term = t.sum(t.square(t.sub(sorted_s, sorted_t)));
    acc = acc.valid() ? t.add(acc, term) : term;
  }
  return t.scale(acc, 1.0 / static_cast<double>(proj.count()));
}

// Per-class sliced distances for the classes present on both sides, or
// nothing when no class overlaps. Shared by the throwing public op and the
// skip-and-log path in the combined objective.
std::optional<Var> conditional_terms(Tape& t, Var source,
                                     const std::vector<std::int64_t>& source_labels, Var target,
                                     const std::vector<std::int64_t>& target_labels,
                                     const ProjectionSet& proj, std::int64_t num_classes,
                                     Rng& rng, bool allow_unlabeled, std::int64_t& classes_used,
                                     std::int64_t& classes_skipped) {
  const char* op = "class-conditional alignment";
  check_point_set(source, op, "source");
  check_point_set(target, op, "target");
  check_same_dtype(source.val(), target.val(), op);
  if (source.shape()[1] != target.shape()[1]) {
    throw ShapeError(std::string(op) + ": embedding dims differ, " + shape_str(source.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  if (num_classes < 1) throw ValueError(std::string(op) + ": num_classes must be >= 1");
  if (source.shape()[1] != proj.dim()) {
    throw ShapeError(std::string(op) + ": projections have dim " + std::to_string(proj.dim()) +
                     ", embeddings have dim " + std::to_string(source.shape()[1]));
  }
  // -1 marks a row with no (pseudo-)label: it joins no class.
  const std::int64_t min_label = allow_unlabeled ? -1 : 0;
  check_labels(source_labels, source.shape()[0], num_classes, op, "source labels", min_label);
  check_labels(target_labels, target.shape()[0], num_classes, op, "target labels", min_label);

  classes_used = 0;
  classes_skipped = 0;
  Var acc;
  for (std::int64_t c = 0; c < num_classes; ++c) {
    std::vector<std::int64_t> rows_s, rows_t;
    for (std::size_t i = 0; i < source_labels.size(); ++i)
      if (source_labels[i] == c) rows_s.push_back(static_cast<std::int64_t>(i));
    for (std::size_t i = 0; i < target_labels.size(); ++i)
      if (target_labels[i] == c) rows_t.push_back(static_cast<std::int64_t>(i));
    if (rows_s.empty() || rows_t.empty()) {
      ++classes_skipped;
      continue;
    }
    ++classes_used;
    if (rows_s.size() != rows_t.size()) {
      auto [keep_s, keep_t] = pairing_indices(static_cast<std::int64_t>(rows_s.size()),
                                              static_cast<std::int64_t>(rows_t.size()), rng);
      std::vector<std::int64_t> sub_s, sub_t;
      sub_s.reserve(keep_s.size());
      sub_t.reserve(keep_t.size());
      for (std::int64_t i : keep_s) sub_s.push_back(rows_s[static_cast<std::size_t>(i)]);
      for (std::int64_t i : keep_t) sub_t.push_back(rows_t[static_cast<std::size_t>(i)]);
      rows_s = std::move(sub_s);
      rows_t = std::move(sub_t);
    }
    Var term = sliced_term(t, t.index_select0(source, rows_s), t.index_select0(target, rows_t),
                           proj);
    acc = acc.valid() ? t.add(acc, term) : term;
  }
  if (!acc.valid()) return std::nullopt;
  return acc;
}

// Per-row -log softmax(logits)[label] terms as a 1-d vector.
Var nll_rows(Tape& t, Var logits, const std::vector<std::int64_t>& labels) {
  const char* op = "cross-entropy";
  check_point_set(logits, op, "logits");
  const std::int64_t n = logits.shape()[0];
  const std::int64_t k = logits.shape()[1];
  check_labels(labels, n, k, op, "labels");
  Var ls = t.log_softmax_rows(logits);
  Var flat = t.reshape(ls, {n * k});
  std::vector<std::int64_t> picks(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    picks[static_cast<std::size_t>(i)] = i * k + labels[static_cast<std::size_t>(i)];
  return t.neg(t.index_select0(flat, picks));
}

}  // namespace

ProjectionSet sample_projections(std::int64_t count, std::int64_t dim, DType dt,
                                 std::uint64_t seed) {
  if (count < 1) throw ValueError("projection sampling: count must be >= 1");
  if (dim < 1) throw ValueError("projection sampling: dim must be >= 1");
  Rng rng(seed);
  Tensor dirs(Shape{count, dim}, dt);
  std::vector<double> row(static_cast<std::size_t>(dim));
  for (std::int64_t l = 0; l < count; ++l) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (auto& x : row) {
        x = rng.normal();
        norm2 += x * x;
      }
    } while (norm2 < 1e-24);  // re-draw the (measure-zero) near-null vector
    if (dim == 1) {
      // a 1-D unit direction is exactly +/-1; dividing by the recomputed
      // norm would smuggle in an ulp of rounding error
      dirs.set(l, row[0] < 0.0 ? -1.0 : 1.0);
      continue;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::int64_t j = 0; j < dim; ++j)
      dirs.set(l * dim + j, row[static_cast<std::size_t>(j)] * inv);
  }
  return ProjectionSet{std::move(dirs), seed};
}

ProjectionSet projections_for_step(std::int64_t count, std::int64_t dim, DType dt,
                                   std::uint64_t seed, std::int64_t step) {
  if (step < 0) throw ValueError("projection sampling: step must be >= 0");
  const std::uint64_t child =
      splitmix64(seed ^ splitmix64(0x70726f6a65637473ull + static_cast<std::uint64_t>(step)));
  ProjectionSet p = sample_projections(count, dim, dt, child);
  p.seed = seed;
  return p;
}

Var swd_distance(Tape& t, Var source, Var target, const ProjectionSet& proj) {
  const char* op = "sliced distance";
  check_point_set(source, op, "source");
  check_point_set(target, op, "target");
  check_same_dtype(source.val(), target.val(), op);
  if (source.shape() != target.shape()) {
    throw ShapeError(std::string(op) + ": point sets must have identical shape, got " +
                     shape_str(source.shape()) + " vs " + shape_str(target.shape()) +
                     " (reconcile counts upstream)");
  }
  if (source.shape()[1] != proj.dim()) {
    throw ShapeError(std::string(op) + ": projections have dim " + std::to_string(proj.dim()) +
                     ", point sets have dim " + std::to_string(source.shape()[1]));
  }
  return sliced_term(t, source, target, proj);
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> pairing_indices(
    std::int64_t count_a, std::int64_t count_b, Rng& rng) {
  if (count_a < 1 || count_b < 1)
    throw ValueError("pairing: both sides must be non-empty, got " + std::to_string(count_a) +
                     " and " + std::to_string(count_b));
  const std::int64_t m = std::min(count_a, count_b);
  auto identity = [](std::int64_t n) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
  };
  if (count_a == count_b) return {identity(m), identity(m)};
  // Partial Fisher-Yates: the first m slots of a full shuffle, i.e. a
  // uniform m-subset of the larger side, in draw order.
  auto subset = [&](std::int64_t n) {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    for (std::int64_t i = 0; i < m; ++i) {
      const std::int64_t j = i + static_cast<std::int64_t>(rng.uniform_int(n - i));
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
    v.resize(static_cast<std::size_t>(m));
    return v;
  };
  if (count_a > count_b) return {subset(count_a), identity(m)};
  return {identity(m), subset(count_b)};
}

Var class_conditional_swd(Tape& t, Var source, const std::vector<std::int64_t>& source_labels,
                          Var target, const std::vector<std::int64_t>& target_labels,
                          const ProjectionSet& proj, std::int64_t num_classes, Rng& rng,
                          std::int64_t* classes_used, std::int64_t* classes_skipped) {
  std::int64_t used = 0, skipped = 0;
  std::optional<Var> acc = conditional_terms(t, source, source_labels, target, target_labels,
                                             proj, num_classes, rng, /*allow_unlabeled=*/false,
                                             used, skipped);
  if (classes_used != nullptr) *classes_used = used;
  if (classes_skipped != nullptr) *classes_skipped = skipped;
  if (!acc.has_value()) {
    throw ValueError(
        "class-conditional alignment: no overlapping classes between source and target");
  }
  return *acc;
}

Var cross_entropy(Tape& t, Var logits, const std::vector<std::int64_t>& labels) {
  return t.mean(nll_rows(t, logits, labels));
}

Var cross_entropy_sum(Tape& t, Var logits, const std::vector<std::int64_t>& labels) {
  return t.sum(nll_rows(t, logits, labels));
}

Var supcon_loss(Tape& t, Var embeddings, const std::vector<std::int64_t>& labels,
                const SupConConfig& cfg) {
  const char* op = "supervised contrastive loss";
  if (!(cfg.temperature > 0.0)) {
    throw ValueError(std::string(op) + ": temperature must be positive, got " +
                     std::to_string(cfg.temperature));
  }
  check_point_set(embeddings, op, "embeddings");
  const std::int64_t n = embeddings.shape()[0];
  if (n < 2) throw ValueError(std::string(op) + ": need at least 2 rows, got " + std::to_string(n));
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }

  // Positive-weight matrix over the n x (n-1) off-diagonal layout: entry
  // (i, pos(j)) is 1/|positives of i| when labels match, else 0.
  Tensor weights = Tensor::zeros({n, n - 1}, embeddings.dtype());
  std::vector<std::int64_t> off_diag;
  off_diag.reserve(static_cast<std::size_t>(n * (n - 1)));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t positives = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      off_diag.push_back(i * n + j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) ++positives;
    }
    if (positives == 0) {
      throw ValueError(std::string(op) + ": row " + std::to_string(i) + " (label " +
                       std::to_string(labels[static_cast<std::size_t>(i)]) +
                       ") has no positive in the batch; use class-complete sampling so every "
                       "present class has at least two examples");
    }
    const double w = 1.0 / static_cast<double>(positives);
    std::int64_t pos = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)])
        weights.set(i * (n - 1) + pos, w);
      ++pos;
    }
  }

  Var z = t.l2_normalize_rows(embeddings);
  Var sims = t.scale(t.matmul(z, t.transpose2d(z)), 1.0 / cfg.temperature);
  Var off = t.reshape(t.index_select0(t.reshape(sims, {n * n}), off_diag), {n, n - 1});
  Var log_prob = t.log_softmax_rows(off);
  return t.neg(t.sum(t.mul(log_prob, t.leaf(std::move(weights)))));
}

TransferParts transfer_objective(Tape& t, std::optional<Var> src_logits,
                                 const std::vector<std::int64_t>& src_labels,
                                 std::optional<Var> tgt_logits,
                                 const std::vector<std::int64_t>& tgt_labels,
                                 std::optional<Var> src_align,
                                 const std::vector<std::int64_t>& src_align_labels,
                                 std::optional<Var> tgt_align,
                                 const std::vector<std::int64_t>& tgt_align_labels,
                                 const ProjectionSet& proj, const TransferWeights& weights,
                                 Rng& pair_rng) {
  const char* op = "transfer objective";
  if (weights.alpha < 0.0)
    throw ValueError(std::string(op) + ": alpha must be >= 0, got " +
                     std::to_string(weights.alpha));
  if (weights.cond_weight < 0.0)
    throw ValueError(std::string(op) + ": cond_weight must be >= 0, got " +
                     std::to_string(weights.cond_weight));

  TransferParts parts;
  auto include = [&](Var term, double& slot) {
    slot = term.item();
    parts.total = parts.total.valid() ? t.add(parts.total, term) : term;
  };

  if (src_logits.has_value()) {
    include(cross_entropy(t, *src_logits, src_labels), parts.source_ce);
  }
  if (tgt_logits.has_value()) {
    Var ce = weights.normalize_target_ce ? cross_entropy(t, *tgt_logits, tgt_labels)
                                         : cross_entropy_sum(t, *tgt_logits, tgt_labels);
    include(ce, parts.target_ce);
  }

  // Independent sub-streams per stochastic term: enabling or disabling one
  // term must not shift the draws of another. Forks depend only on the
  // parent seed, not on how much of pair_rng has been consumed.
  Rng marginal_rng = pair_rng.fork(1);
  Rng conditional_rng = pair_rng.fork(2);

  const bool have_align = src_align.has_value() && tgt_align.has_value();
  if (weights.alpha != 0.0 && have_align) {
    Var s = *src_align;
    Var g = *tgt_align;
    if (s.shape()[0] != g.shape()[0]) {
      auto [keep_s, keep_t] = pairing_indices(s.shape()[0], g.shape()[0], marginal_rng);
      s = t.index_select0(s, keep_s);
      g = t.index_select0(g, keep_t);
    }
    include(t.scale(swd_distance(t, s, g, proj), weights.alpha), parts.marginal_align);
  }

  if (weights.cond_weight != 0.0 && have_align && !src_align_labels.empty() &&
      !tgt_align_labels.empty()) {
    if (weights.num_classes < 1)
      throw ValueError(std::string(op) + ": num_classes must be >= 1 for the conditional term");
    std::optional<Var> cond =
        conditional_terms(t, *src_align, src_align_labels, *tgt_align, tgt_align_labels, proj,
                          weights.num_classes, conditional_rng, /*allow_unlabeled=*/true,
                          parts.cond_classes_used, parts.cond_classes_skipped);
    if (cond.has_value()) {
      include(t.scale(*cond, weights.cond_weight), parts.conditional_align);
    }
    // No overlap is a skip, not an error: the tallies record it and the
    // remaining terms still define the step.
  }

  if (!parts.total.valid())
    throw ValueError(std::string(op) + ": no active terms (all inputs absent or all weights zero)");
  return parts;
}

}  // namespace wassalign
