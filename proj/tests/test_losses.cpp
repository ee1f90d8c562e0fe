#include "wassalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "wassalign/gradcheck.hpp"
#include "wassalign/tape.hpp"
#include "wassalign/tensor.hpp"

using namespace wassalign;

namespace {

Tensor points(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from(flat, {static_cast<int64_t>(rows.size()),
                             static_cast<int64_t>(rows.empty() ? 0 : rows[0].size())});
}

std::vector<std::vector<double>> random_rows(Rng& rng, int64_t n, int64_t d, double lo,
                                             double hi) {
  std::vector<std::vector<double>> rows(static_cast<size_t>(n));
  for (auto& r : rows) {
    r.resize(static_cast<size_t>(d));
    for (auto& v : r) v = rng.uniform(lo, hi);
  }
  return rows;
}

std::vector<std::vector<double>> dirs_of(const ProjectionSet& p) {
  std::vector<std::vector<double>> rows(static_cast<size_t>(p.count()));
  for (int64_t l = 0; l < p.count(); ++l) {
    rows[static_cast<size_t>(l)].resize(static_cast<size_t>(p.dim()));
    for (int64_t j = 0; j < p.dim(); ++j)
      rows[static_cast<size_t>(l)][static_cast<size_t>(j)] = p.dirs.at(l * p.dim() + j);
  }
  return rows;
}

// True when, under every direction, consecutive sorted projections within
// each set are separated by more than min_gap. Finite-difference probes stay
// on one side of every sorting boundary in that regime.
bool tie_free(const std::vector<std::vector<double>>& src,
              const std::vector<std::vector<double>>& tgt, const ProjectionSet& proj,
              double min_gap) {
  auto ok = [&](const std::vector<std::vector<double>>& set,
                const std::vector<double>& dir) {
    std::vector<double> p;
    for (const auto& x : set) {
      double v = 0.0;
      for (size_t j = 0; j < dir.size(); ++j) v += dir[j] * x[j];
      p.push_back(v);
    }
    std::sort(p.begin(), p.end());
    for (size_t i = 1; i < p.size(); ++i)
      if (p[i] - p[i - 1] <= min_gap) return false;
    return true;
  };
  for (const auto& dir : dirs_of(proj))
    if (!ok(src, dir) || !ok(tgt, dir)) return false;
  return true;
}

double swd_value(const std::vector<std::vector<double>>& src,
                 const std::vector<std::vector<double>>& tgt, const ProjectionSet& proj) {
  Tape t;
  return swd_distance(t, t.leaf(points(src)), t.leaf(points(tgt)), proj).item();
}

}  // namespace

TEST_CASE("projection sampling produces unit rows deterministically") {
  ProjectionSet p = sample_projections(12, 5, DType::Float64, 99);
  REQUIRE(p.count() == 12);
  REQUIRE(p.dim() == 5);
  for (int64_t l = 0; l < 12; ++l) {
    double norm2 = 0.0;
    for (int64_t j = 0; j < 5; ++j) norm2 += p.dirs.at(l * 5 + j) * p.dirs.at(l * 5 + j);
    CHECK(std::abs(std::sqrt(norm2) - 1.0) < 1e-12);
  }
  ProjectionSet q = sample_projections(12, 5, DType::Float64, 99);
  CHECK(p.dirs.bit_equal(q.dirs));
  ProjectionSet r = sample_projections(12, 5, DType::Float64, 100);
  CHECK_FALSE(p.dirs.bit_equal(r.dirs));

  // One direction in one dimension collapses to a sign.
  ProjectionSet s = sample_projections(1, 1, DType::Float64, 3);
  CHECK(std::abs(std::abs(s.dirs.at(0)) - 1.0) < 1e-15);

  CHECK_THROWS_AS(sample_projections(0, 3, DType::Float64, 1), ValueError);
  CHECK_THROWS_AS(sample_projections(3, 0, DType::Float64, 1), ValueError);
}

TEST_CASE("per-step projection refresh is reproducible without replay") {
  ProjectionSet a7 = projections_for_step(4, 3, DType::Float64, 42, 7);
  ProjectionSet b7 = projections_for_step(4, 3, DType::Float64, 42, 7);
  CHECK(a7.dirs.bit_equal(b7.dirs));
  ProjectionSet a8 = projections_for_step(4, 3, DType::Float64, 42, 8);
  CHECK_FALSE(a7.dirs.bit_equal(a8.dirs));
  ProjectionSet other_seed = projections_for_step(4, 3, DType::Float64, 43, 7);
  CHECK_FALSE(a7.dirs.bit_equal(other_seed.dirs));
  CHECK_THROWS_AS(projections_for_step(4, 3, DType::Float64, 42, -1), ValueError);
}

TEST_CASE("pairing keeps equal counts whole without consuming randomness") {
  Rng rng(5);
  auto [a, b] = pairing_indices(4, 4, rng);
  CHECK(a == std::vector<int64_t>{0, 1, 2, 3});
  CHECK(b == std::vector<int64_t>{0, 1, 2, 3});
  CHECK(rng.next_u64() == Rng(5).next_u64());  // untouched stream

  CHECK_THROWS_AS(pairing_indices(0, 3, rng), ValueError);
  CHECK_THROWS_AS(pairing_indices(3, 0, rng), ValueError);
}

TEST_CASE("pairing subsamples the larger side without replacement") {
  Rng rng(11);
  auto [a, b] = pairing_indices(7, 3, rng);
  CHECK(b == std::vector<int64_t>{0, 1, 2});
  REQUIRE(a.size() == 3);
  std::vector<int64_t> sorted_a = a;
  std::sort(sorted_a.begin(), sorted_a.end());
  CHECK(std::unique(sorted_a.begin(), sorted_a.end()) == sorted_a.end());  // distinct
  for (int64_t v : a) {
    CHECK(v >= 0);
    CHECK(v < 7);
  }

  // Mirrored argument order subsamples the other side.
  Rng rng2(11);
  auto [c, d] = pairing_indices(3, 7, rng2);
  CHECK(c == std::vector<int64_t>{0, 1, 2});
  CHECK(d == a);  // same stream, same subset

  // Determinism in the seed.
  Rng r1(21), r2(21);
  CHECK(pairing_indices(9, 4, r1) == pairing_indices(9, 4, r2));

  // Every element of the larger side is reachable across seeds.
  std::vector<bool> seen(5, false);
  for (uint64_t s = 0; s < 200; ++s) {
    Rng r(s);
    for (int64_t v : pairing_indices(5, 3, r).first) seen[static_cast<size_t>(v)] = true;
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](bool x) { return x; }));
}

TEST_CASE("sliced distance matches exhaustive pairing on random instances") {
  Rng rng(2026);
  for (int instance = 0; instance < 60; ++instance) {
    const int64_t m = 2 + static_cast<int64_t>(rng.uniform_int(4));  // 2..5 points
    const int64_t d = 1 + static_cast<int64_t>(rng.uniform_int(3));  // 1..3 dims
    const int64_t L = 1 + static_cast<int64_t>(rng.uniform_int(4));  // 1..4 directions
    auto src = random_rows(rng, m, d, -3.0, 3.0);
    auto tgt = random_rows(rng, m, d, -3.0, 3.0);
    ProjectionSet proj = sample_projections(L, d, DType::Float64, rng.next_u64());
    const double expected = oracle::sliced_cost(src, tgt, dirs_of(proj));
    const double got = swd_value(src, tgt, proj);
    CHECK(std::abs(got - expected) < 1e-10);
  }
}

TEST_CASE("sliced distance hand values") {
  ProjectionSet proj = sample_projections(1, 1, DType::Float64, 17);

  // {0,1} vs {2,3}: matched gaps are 2 and 2 regardless of the sign of the
  // single 1-d direction, so the squared cost is 8.
  CHECK(swd_value({{0}, {1}}, {{2}, {3}}, proj) == doctest::Approx(8.0).epsilon(1e-12));
  // Order of the input rows is irrelevant.
  CHECK(swd_value({{1}, {0}}, {{3}, {2}}, proj) == doctest::Approx(8.0).epsilon(1e-12));
  // Identical sets are at distance exactly zero.
  CHECK(swd_value({{0.3}, {-1.7}, {2.2}}, {{0.3}, {-1.7}, {2.2}}, proj) == 0.0);

  // Translating one 1-d set by c shifts every matched pair by c: cost M*c^2.
  const double c = 0.75;
  std::vector<std::vector<double>> base = {{-1.0}, {0.2}, {1.4}, {3.0}};
  std::vector<std::vector<double>> shifted;
  for (const auto& r : base) shifted.push_back({r[0] + c});
  CHECK(swd_value(base, shifted, proj) == doctest::Approx(4.0 * c * c).epsilon(1e-12));
}

TEST_CASE("sliced distance grows with separation and is symmetric") {
  Rng rng(8);
  auto src = random_rows(rng, 32, 4, -1.0, 1.0);
  ProjectionSet proj = sample_projections(20, 4, DType::Float64, 5);
  double prev = -1.0;
  for (double delta : {0.5, 1.0, 2.0, 4.0}) {
    auto tgt = src;
    for (auto& r : tgt)
      for (auto& v : r) v += delta;
    const double v = swd_value(src, tgt, proj);
    CHECK(v > prev);
    prev = v;
    // Symmetry: |a-b|^2 terms are direction-agnostic.
    CHECK(swd_value(tgt, src, proj) == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("sliced distance validates shapes") {
  ProjectionSet proj = sample_projections(2, 3, DType::Float64, 1);
  Tape t;
  Rng rng(1);
  Var src = t.leaf(points(random_rows(rng, 4, 3, -1, 1)));
  Var tgt5 = t.leaf(points(random_rows(rng, 5, 3, -1, 1)));
  Var tgt_d2 = t.leaf(points(random_rows(rng, 4, 2, -1, 1)));
  CHECK_THROWS_WITH_AS(swd_distance(t, src, tgt5, proj),
                       doctest::Contains("identical shape"), ShapeError);
  CHECK_THROWS_AS(swd_distance(t, src, tgt_d2, proj), ShapeError);
  ProjectionSet proj2 = sample_projections(2, 2, DType::Float64, 1);
  CHECK_THROWS_WITH_AS(swd_distance(t, src, t.leaf(points(random_rows(rng, 4, 3, -1, 1))), proj2),
                       doctest::Contains("projections have dim"), ShapeError);
}

TEST_CASE("sliced distance gradients at tie-free points") {
  Rng rng(31);
  int checked = 0;
  while (checked < 3) {
    auto src = random_rows(rng, 5, 3, -2.0, 2.0);
    auto tgt = random_rows(rng, 5, 3, -2.0, 2.0);
    ProjectionSet proj = sample_projections(6, 3, DType::Float64, rng.next_u64());
    if (!tie_free(src, tgt, proj, 1e-3)) continue;
    ++checked;
    Parameter ps{"src", points(src)};
    Parameter pt{"tgt", points(tgt)};
    auto result = check_gradients(
        [&](Tape& t) { return swd_distance(t, t.param(ps), t.param(pt), proj); }, {&ps, &pt});
    INFO(result.worst);
    CHECK(result.pass(1e-4));
  }
}

TEST_CASE("class-conditional distance hand values and tallies") {
  ProjectionSet proj = sample_projections(1, 1, DType::Float64, 17);
  Rng rng(0);

  // Two classes, each contributing a single matched pair: (0-2)^2 + (1-3)^2.
  {
    Tape t;
    Var src = t.leaf(points({{0}, {1}}));
    Var tgt = t.leaf(points({{2}, {3}}));
    int64_t used = 0, skipped = 0;
    Var v = class_conditional_swd(t, src, {0, 1}, tgt, {0, 1}, proj, 2, rng, &used, &skipped);
    CHECK(v.item() == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(used == 2);
    CHECK(skipped == 0);
  }

  // A single shared class reduces to the plain distance on that class.
  {
    Tape t;
    Rng r2(0);
    auto rows_s = random_rows(r2, 6, 2, -1, 1);
    auto rows_t = random_rows(r2, 6, 2, -1, 1);
    ProjectionSet p2 = sample_projections(5, 2, DType::Float64, 9);
    Var src = t.leaf(points(rows_s));
    Var tgt = t.leaf(points(rows_t));
    Var whole = swd_distance(t, src, tgt, p2);
    Var cond = class_conditional_swd(t, src, std::vector<int64_t>(6, 0), tgt,
                                     std::vector<int64_t>(6, 0), p2, 1, rng);
    CHECK(cond.item() == doctest::Approx(whole.item()).epsilon(1e-14));
  }

  // Classes missing on either side are skipped and tallied.
  {
    Tape t;
    Var src = t.leaf(points({{0}, {1}, {5}}));
    Var tgt = t.leaf(points({{2}, {3}}));
    int64_t used = 0, skipped = 0;
    Var v = class_conditional_swd(t, src, {0, 1, 2}, tgt, {0, 1}, proj, 3, rng, &used, &skipped);
    CHECK(v.item() == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(used == 2);
    CHECK(skipped == 1);
  }

  // No shared class at all is an error for the standalone op.
  {
    Tape t;
    Var src = t.leaf(points({{0}, {1}}));
    Var tgt = t.leaf(points({{2}, {3}}));
    CHECK_THROWS_WITH_AS(
        class_conditional_swd(t, src, {0, 0}, tgt, {1, 1}, proj, 2, rng),
        doctest::Contains("no overlapping classes"), ValueError);
  }

  // Label validation.
  {
    Tape t;
    Var src = t.leaf(points({{0}, {1}}));
    Var tgt = t.leaf(points({{2}, {3}}));
    CHECK_THROWS_AS(class_conditional_swd(t, src, {0, 2}, tgt, {0, 0}, proj, 2, rng),
                    ValueError);
    CHECK_THROWS_AS(class_conditional_swd(t, src, {0, -1}, tgt, {0, 0}, proj, 2, rng),
                    ValueError);
    CHECK_THROWS_AS(class_conditional_swd(t, src, {0}, tgt, {0, 0}, proj, 2, rng), ShapeError);
  }
}

TEST_CASE("class-conditional distance reconciles unequal per-class counts") {
  ProjectionSet proj = sample_projections(3, 2, DType::Float64, 4);
  Rng data_rng(12);
  auto rows_s = random_rows(data_rng, 5, 2, -1, 1);  // 5 source points, class 0
  auto rows_t = random_rows(data_rng, 3, 2, -1, 1);  // 3 target points, class 0

  auto eval = [&](uint64_t seed) {
    Tape t;
    Rng rng(seed);
    Var src = t.leaf(points(rows_s));
    Var tgt = t.leaf(points(rows_t));
    return class_conditional_swd(t, src, std::vector<int64_t>(5, 0), tgt,
                                 std::vector<int64_t>(3, 0), proj, 1, rng)
        .item();
  };

  // Deterministic per seed.
  CHECK(eval(7) == eval(7));

  // Equals the plain distance on the subset the same stream selects.
  Rng replay(7);
  auto [keep_s, keep_t] = pairing_indices(5, 3, replay);
  std::vector<std::vector<double>> sub_s;
  for (int64_t i : keep_s) sub_s.push_back(rows_s[static_cast<size_t>(i)]);
  std::vector<std::vector<double>> sub_t;
  for (int64_t i : keep_t) sub_t.push_back(rows_t[static_cast<size_t>(i)]);
  CHECK(eval(7) == doctest::Approx(swd_value(sub_s, sub_t, proj)).epsilon(1e-14));
}

TEST_CASE("cross-entropy hand values") {
  // Uniform logits over k classes cost log k.
  {
    Tape t;
    Var logits = t.leaf(Tensor::zeros({2, 4}, DType::Float64));
    CHECK(cross_entropy(t, logits, {1, 3}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(cross_entropy_sum(t, logits, {1, 3}).item() ==
          doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-12));
  }
  // Logits [2,1,0] with true class 0.
  {
    Tape t;
    Var logits = t.leaf(Tensor::from(std::vector<double>{2, 1, 0}, {1, 3}));
    const double expected = std::log(std::exp(2.0) + std::exp(1.0) + 1.0) - 2.0;
    CHECK(cross_entropy(t, logits, {0}).item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.4076059644443804).epsilon(1e-12));
  }
  // A saturated correct logit drives the loss to (numerical) zero.
  {
    Tape t;
    Var logits = t.leaf(Tensor::from(std::vector<double>{40, 0, 0}, {1, 3}));
    CHECK(cross_entropy(t, logits, {0}).item() < 1e-10);
  }
  // Validation: label range and count.
  {
    Tape t;
    Var logits = t.leaf(Tensor::zeros({2, 3}, DType::Float64));
    CHECK_THROWS_AS(cross_entropy(t, logits, {0, 3}), ValueError);
    CHECK_THROWS_AS(cross_entropy(t, logits, {0, -1}), ValueError);
    CHECK_THROWS_AS(cross_entropy(t, logits, {0}), ShapeError);
    CHECK_THROWS_AS(cross_entropy(t, t.leaf(Tensor::zeros({2}, DType::Float64)), {0, 1}),
                    ShapeError);
  }
}

TEST_CASE("cross-entropy gradients") {
  Rng rng(55);
  auto rows = random_rows(rng, 6, 4, -2.0, 2.0);
  Parameter logits{"logits", points(rows)};
  std::vector<int64_t> labels = {0, 3, 1, 2, 2, 0};
  auto mean_res = check_gradients(
      [&](Tape& t) { return cross_entropy(t, t.param(logits), labels); }, {&logits});
  INFO(mean_res.worst);
  CHECK(mean_res.pass(1e-4));
  auto sum_res = check_gradients(
      [&](Tape& t) { return cross_entropy_sum(t, t.param(logits), labels); }, {&logits});
  INFO(sum_res.worst);
  CHECK(sum_res.pass(1e-4));
}

TEST_CASE("supervised contrastive loss matches the naive reference") {
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int64_t pairs = 2 + static_cast<int64_t>(rng.uniform_int(7));  // 2..8 label pairs
    const int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(4));
    const int64_t d = 2 + static_cast<int64_t>(rng.uniform_int(5));
    std::vector<int64_t> labels;
    for (int64_t p = 0; p < pairs; ++p) {
      const auto c = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(k)));
      labels.push_back(c);  // paired views guarantee every anchor a positive
      labels.push_back(c);
    }
    auto rows = random_rows(rng, 2 * pairs, d, -1.5, 1.5);
    const double tau = 0.05 + rng.uniform() * 0.5;
    Tape t;
    const double got = supcon_loss(t, t.leaf(points(rows)), labels, {tau}).item();
    const double expected = oracle::supcon(rows, labels, tau);
    CHECK(std::abs(got - expected) < 1e-10);
  }
}

TEST_CASE("supervised contrastive loss on an all-identical batch") {
  // Every similarity ties, so each anchor's positives carry probability
  // 1/(2B-1): the loss collapses to 2B * log(2B-1).
  std::vector<std::vector<double>> rows(4, {0.6, -0.8, 0.0});
  Tape t;
  const double got = supcon_loss(t, t.leaf(points(rows)), {0, 0, 1, 1}, {0.1}).item();
  CHECK(std::abs(got - 4.0 * std::log(3.0)) < 1e-9);
}

TEST_CASE("supervised contrastive loss ignores per-row positive scaling") {
  Rng rng(6);
  auto rows = random_rows(rng, 6, 4, -1.0, 1.0);
  std::vector<int64_t> labels = {0, 0, 1, 1, 2, 2};
  Tape t;
  const double base = supcon_loss(t, t.leaf(points(rows)), labels, {0.2}).item();
  auto scaled = rows;
  for (auto& r : scaled)
    for (auto& v : r) v *= 3.7;
  Tape t2;
  const double after = supcon_loss(t2, t2.leaf(points(scaled)), labels, {0.2}).item();
  CHECK(after == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("supervised contrastive loss validation") {
  Tape t;
  Var emb = t.leaf(points({{1, 0}, {0, 1}, {1, 1}, {0, 2}}));
  CHECK_THROWS_WITH_AS(supcon_loss(t, emb, {0, 0, 1, 1}, {0.0}),
                       doctest::Contains("temperature"), ValueError);
  CHECK_THROWS_WITH_AS(supcon_loss(t, emb, {0, 0, 1, 1}, {-0.1}),
                       doctest::Contains("temperature"), ValueError);
  CHECK_THROWS_WITH_AS(supcon_loss(t, emb, {0, 0, 1, 2}, {0.1}),
                       doctest::Contains("class-complete"), ValueError);
  CHECK_THROWS_AS(supcon_loss(t, emb, {0, 0, 1}, {0.1}), ShapeError);
  Var one = t.leaf(points({{1, 0}}));
  CHECK_THROWS_AS(supcon_loss(t, one, {0}, {0.1}), ValueError);
}

TEST_CASE("supervised contrastive gradients") {
  Rng rng(91);
  auto rows = random_rows(rng, 6, 3, -1.2, 1.2);
  Parameter emb{"emb", points(rows)};
  std::vector<int64_t> labels = {0, 0, 1, 1, 0, 1};
  auto result = check_gradients(
      [&](Tape& t) { return supcon_loss(t, t.param(emb), labels, {0.25}); }, {&emb});
  INFO(result.worst);
  CHECK(result.pass(1e-4));
}

TEST_CASE("combined objective: breakdown sums to the total") {
  Rng rng(123);
  auto src_logit_rows = random_rows(rng, 4, 3, -2, 2);
  auto tgt_logit_rows = random_rows(rng, 3, 3, -2, 2);
  auto src_align_rows = random_rows(rng, 6, 2, -1, 1);
  auto tgt_align_rows = random_rows(rng, 6, 2, -1, 1);
  ProjectionSet proj = sample_projections(8, 2, DType::Float64, 77);
  TransferWeights w;
  w.alpha = 0.7;
  w.cond_weight = 0.3;
  w.num_classes = 3;

  Tape t;
  Rng pair_rng(5);
  TransferParts parts = transfer_objective(
      t, t.leaf(points(src_logit_rows)), {0, 1, 2, 0}, t.leaf(points(tgt_logit_rows)),
      {1, 2, 0}, t.leaf(points(src_align_rows)), {0, 0, 1, 1, 2, 2},
      t.leaf(points(tgt_align_rows)), {0, 1, 1, 2, 2, 0}, proj, w, pair_rng);

  const double sum = parts.source_ce + parts.target_ce + parts.marginal_align +
                     parts.conditional_align;
  CHECK(std::abs(parts.total.item() - sum) < 1e-12);
  CHECK(parts.source_ce > 0.0);
  CHECK(parts.target_ce > 0.0);
  CHECK(parts.marginal_align > 0.0);
  CHECK(parts.conditional_align > 0.0);
  CHECK(parts.cond_classes_used == 3);
  CHECK(parts.cond_classes_skipped == 0);

  // The target term defaults to a sum; the flag switches it to a mean.
  TransferWeights wn = w;
  wn.normalize_target_ce = true;
  Tape t2;
  Rng pair_rng2(5);
  TransferParts normed = transfer_objective(
      t2, t2.leaf(points(src_logit_rows)), {0, 1, 2, 0}, t2.leaf(points(tgt_logit_rows)),
      {1, 2, 0}, t2.leaf(points(src_align_rows)), {0, 0, 1, 1, 2, 2},
      t2.leaf(points(tgt_align_rows)), {0, 1, 1, 2, 2, 0}, proj, wn, pair_rng2);
  CHECK(normed.target_ce == doctest::Approx(parts.target_ce / 3.0).epsilon(1e-12));
}

TEST_CASE("combined objective: zero weights reduce to the bare losses") {
  Rng rng(9);
  auto src_logit_rows = random_rows(rng, 5, 4, -2, 2);
  auto tgt_logit_rows = random_rows(rng, 2, 4, -2, 2);
  std::vector<int64_t> src_labels = {0, 1, 2, 3, 1};
  std::vector<int64_t> tgt_labels = {2, 0};
  ProjectionSet proj = sample_projections(2, 3, DType::Float64, 1);
  TransferWeights w;
  w.alpha = 0.0;
  w.cond_weight = 0.0;

  Tape t;
  Rng pair_rng(1);
  TransferParts parts = transfer_objective(t, t.leaf(points(src_logit_rows)), src_labels,
                                           t.leaf(points(tgt_logit_rows)), tgt_labels,
                                           std::nullopt, {}, std::nullopt, {}, proj, w, pair_rng);
  Tape t2;
  const double ce_s = cross_entropy(t2, t2.leaf(points(src_logit_rows)), src_labels).item();
  const double ce_t = cross_entropy_sum(t2, t2.leaf(points(tgt_logit_rows)), tgt_labels).item();
  CHECK(parts.total.item() == ce_s + ce_t);  // identical op sequence, exact match
  CHECK(parts.marginal_align == 0.0);
  CHECK(parts.conditional_align == 0.0);

  // Alignment embeddings may be present; zero weights still skip the terms.
  Tape t3;
  Rng pair_rng3(1);
  auto align = random_rows(rng, 4, 3, -1, 1);
  TransferParts skipped = transfer_objective(
      t3, t3.leaf(points(src_logit_rows)), src_labels, t3.leaf(points(tgt_logit_rows)),
      tgt_labels, t3.leaf(points(align)), {0, 1, 0, 1}, t3.leaf(points(align)), {0, 1, 0, 1},
      proj, w, pair_rng3);
  CHECK(skipped.total.item() == ce_s + ce_t);
}

TEST_CASE("combined objective: identical encodings align at exactly zero") {
  Rng rng(14);
  auto logits = random_rows(rng, 4, 2, -1, 1);
  auto align = random_rows(rng, 8, 3, -1, 1);
  std::vector<int64_t> align_labels = {0, 0, 1, 1, 0, 1, 0, 1};
  ProjectionSet proj = sample_projections(6, 3, DType::Float64, 3);
  TransferWeights w;
  w.alpha = 1.0;
  w.cond_weight = 1.0;
  w.num_classes = 2;

  Tape t;
  Rng pair_rng(2);
  TransferParts parts = transfer_objective(
      t, t.leaf(points(logits)), {0, 1, 0, 1}, std::nullopt, {}, t.leaf(points(align)),
      align_labels, t.leaf(points(align)), align_labels, proj, w, pair_rng);
  CHECK(parts.marginal_align == 0.0);
  CHECK(parts.conditional_align == 0.0);
  CHECK(parts.target_ce == 0.0);
  CHECK(parts.total.item() == parts.source_ce);
}

TEST_CASE("combined objective: skipping, pairing, and errors") {
  Rng rng(41);
  auto src_logit_rows = random_rows(rng, 3, 2, -1, 1);
  ProjectionSet proj = sample_projections(4, 2, DType::Float64, 8);

  // Disjoint conditional classes: term skipped, tallies recorded, no throw.
  {
    auto src_align = random_rows(rng, 4, 2, -1, 1);
    auto tgt_align = random_rows(rng, 4, 2, -1, 1);
    TransferWeights w;
    w.alpha = 0.5;
    w.cond_weight = 0.5;
    w.num_classes = 4;
    Tape t;
    Rng pair_rng(3);
    TransferParts parts = transfer_objective(
        t, t.leaf(points(src_logit_rows)), {0, 1, 0}, std::nullopt, {},
        t.leaf(points(src_align)), {0, 0, 1, 1}, t.leaf(points(tgt_align)), {2, 2, 3, 3}, proj,
        w, pair_rng);
    CHECK(parts.conditional_align == 0.0);
    CHECK(parts.cond_classes_used == 0);
    CHECK(parts.cond_classes_skipped == 4);
    CHECK(parts.marginal_align > 0.0);
  }

  // Unequal alignment pools are reconciled by seeded subsampling.
  {
    auto src_align = random_rows(rng, 7, 2, -1, 1);
    auto tgt_align = random_rows(rng, 4, 2, -1, 1);
    TransferWeights w;
    w.alpha = 1.0;
    auto run = [&](uint64_t seed) {
      Tape t;
      Rng pair_rng(seed);
      return transfer_objective(t, t.leaf(points(src_logit_rows)), {0, 1, 0}, std::nullopt, {},
                                t.leaf(points(src_align)), {}, t.leaf(points(tgt_align)), {},
                                proj, w, pair_rng)
          .marginal_align;
    };
    CHECK(run(10) == run(10));
    // Replay the subsampling stream by hand and confirm the value.
    Rng replay = Rng(10).fork(1);
    auto [keep_s, keep_t] = pairing_indices(7, 4, replay);
    std::vector<std::vector<double>> sub;
    for (int64_t i : keep_s) sub.push_back(src_align[static_cast<size_t>(i)]);
    CHECK(run(10) == doctest::Approx(swd_value(sub, tgt_align, proj)).epsilon(1e-14));
  }

  // A conditional term must know the class count.
  {
    auto align = random_rows(rng, 4, 2, -1, 1);
    TransferWeights w;
    w.cond_weight = 1.0;
    w.num_classes = 0;
    Tape t;
    Rng pair_rng(0);
    CHECK_THROWS_WITH_AS(
        transfer_objective(t, t.leaf(points(src_logit_rows)), {0, 1, 0}, std::nullopt, {},
                           t.leaf(points(align)), {0, 1, 0, 1}, t.leaf(points(align)),
                           {0, 1, 0, 1}, proj, w, pair_rng),
        doctest::Contains("num_classes"), ValueError);
  }

  // Negative weights and a fully-empty objective are rejected.
  {
    Tape t;
    Rng pair_rng(0);
    TransferWeights bad;
    bad.alpha = -1.0;
    CHECK_THROWS_AS(transfer_objective(t, t.leaf(points(src_logit_rows)), {0, 1, 0},
                                       std::nullopt, {}, std::nullopt, {}, std::nullopt, {},
                                       proj, bad, pair_rng),
                    ValueError);
    TransferWeights none;
    none.alpha = 0.0;
    CHECK_THROWS_WITH_AS(transfer_objective(t, std::nullopt, {}, std::nullopt, {}, std::nullopt,
                                            {}, std::nullopt, {}, proj, none, pair_rng),
                         doctest::Contains("no active terms"), ValueError);
  }
}

TEST_CASE("combined objective gradients") {
  Rng rng(200);
  ProjectionSet proj = sample_projections(5, 3, DType::Float64, 6);

  std::vector<std::vector<double>> src_align_rows, tgt_align_rows;
  do {
    src_align_rows = random_rows(rng, 6, 3, -2, 2);
    tgt_align_rows = random_rows(rng, 6, 3, -2, 2);
  } while (!tie_free(src_align_rows, tgt_align_rows, proj, 1e-3));

  Parameter src_logits{"src_logits", points(random_rows(rng, 4, 3, -2, 2))};
  Parameter tgt_logits{"tgt_logits", points(random_rows(rng, 2, 3, -2, 2))};
  Parameter src_align{"src_align", points(src_align_rows)};
  Parameter tgt_align{"tgt_align", points(tgt_align_rows)};
  std::vector<int64_t> src_labels = {0, 1, 2, 1};
  std::vector<int64_t> tgt_labels = {2, 0};
  std::vector<int64_t> src_align_labels = {0, 0, 1, 1, 2, 2};
  std::vector<int64_t> tgt_align_labels = {0, 0, 1, 1, 2, 2};
  TransferWeights w;
  w.alpha = 0.8;
  w.cond_weight = 0.4;
  w.num_classes = 3;

  auto result = check_gradients(
      [&](Tape& t) {
        Rng pair_rng(17);  // fresh stream per rebuild keeps subsets fixed
        return transfer_objective(t, t.param(src_logits), src_labels, t.param(tgt_logits),
                                  tgt_labels, t.param(src_align), src_align_labels,
                                  t.param(tgt_align), tgt_align_labels, proj, w, pair_rng)
            .total;
      },
      {&src_logits, &tgt_logits, &src_align, &tgt_align});
  INFO(result.worst);
  CHECK(result.pass(1e-4));
}
