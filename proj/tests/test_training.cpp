#include "wassalign/training.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "wassalign/common.hpp"
#include "wassalign/data.hpp"
#include "wassalign/losses.hpp"
#include "wassalign/metrics.hpp"
#include "wassalign/nn.hpp"
#include "wassalign/optim.hpp"
#include "wassalign/tape.hpp"

using namespace wassalign;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig ec;
  ec.channels = {4};
  ec.embed_dim = 8;
  return ec;
}

SyntheticSpec tiny_spec(std::int64_t classes, std::int64_t per_class, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.per_class = per_class;
  spec.image_size = 8;
  spec.separation = 6.0;
  spec.noise_sigma = 0.05;
  spec.seed = seed;
  return spec;
}

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.cond_weight = 0.0;
  cfg.projections = 8;
  cfg.source_batch = 8;
  cfg.target_batch = 8;
  cfg.epochs = 2;
  cfg.seed = seed;
  return cfg;
}

void zero_param(Parameter& p) {
  for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value.set(i, 0.0);
}

// Single conv stage whose center taps pass the pixel value straight
// through, identity projection: a constant-valued image v maps to the
// embedding [v, v]. The head starts zeroed; tests then pick its weights.
YNetwork hand_net(std::int64_t classes) {
  EncoderConfig ec;
  ec.channels = {2};
  ec.norm = NormKind::None;
  ec.embed_dim = 2;
  YNetwork net = make_ynetwork(ec, classes, DType::Float64, 3, /*tied_init=*/true);
  for (Encoder* enc : {&net.src_enc, &net.tgt_enc}) {
    ConvStage& st = enc->stages[0];
    zero_param(st.weight);
    st.weight.value.set(4, 1.0);   // [0,0,1,1]: channel-0 center tap
    st.weight.value.set(13, 1.0);  // [1,0,1,1]: channel-1 center tap
    zero_param(*st.bias);
    zero_param(enc->proj_w);
    enc->proj_w.value.set(0, 1.0);
    enc->proj_w.value.set(3, 1.0);
    zero_param(enc->proj_b);
  }
  zero_param(net.head.w);
  zero_param(net.head.b);
  return net;
}

// logits = [1.5, v] for embedding [v, v]: picks class 0 at v=1 and class 1
// at v=2, with a margin of 0.5 either way.
void separating_head(YNetwork& net) {
  net.head.w.value.set(1, 0.5);
  net.head.w.value.set(3, 0.5);
  net.head.b.value.set(0, 1.5);
}

// Zero weights, bias favoring class 0: a constant predictor.
void constant_head(YNetwork& net) {
  zero_param(net.head.w);
  zero_param(net.head.b);
  net.head.b.value.set(0, 1.0);
}

// Balanced dataset of constant-valued images: row i belongs to class i % k
// and every pixel equals class_value[i % k].
Dataset const_dataset(const std::vector<double>& class_value, std::int64_t per_class,
                      std::int64_t image = 8) {
  const std::int64_t k = static_cast<std::int64_t>(class_value.size());
  const std::int64_t n = k * per_class;
  std::vector<float> px(static_cast<size_t>(n * image * image));
  std::vector<std::int64_t> labels(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t cls = i % k;
    labels[static_cast<size_t>(i)] = cls;
    for (std::int64_t p = 0; p < image * image; ++p)
      px[static_cast<size_t>(i * image * image + p)] =
          static_cast<float>(class_value[static_cast<size_t>(cls)]);
  }
  return Dataset{Tensor::from(std::move(px), {n, 1, image, image}), std::move(labels), k, "A",
                 "test"};
}

Dataset empty_dataset(std::int64_t classes) {
  return Dataset{Tensor::zeros({0, 1, 8, 8}), {}, classes, "B", "train"};
}

std::vector<double> train_losses(const TrainResult& r) {
  std::vector<double> out;
  for (const MetricsRecord& m : r.records)
    if (m.split == "train") out.push_back(m.loss);
  return out;
}

}  // namespace

TEST_CASE("branch names round-trip and reject unknowns") {
  CHECK(branch_from_string("source") == Branch::Source);
  CHECK(branch_from_string("target") == Branch::Target);
  CHECK(branch_name(Branch::Source) == std::string("source"));
  CHECK(branch_name(Branch::Target) == std::string("target"));
  CHECK_THROWS_AS(branch_from_string("middle"), ValueError);
}

TEST_CASE("train config validation rejects out-of-range settings") {
  CHECK_NOTHROW(validate_train_config(TrainConfig{}));

  auto reject = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(validate_train_config(cfg), ValueError);
  };
  reject([](TrainConfig& c) { c.alpha = -0.5; });
  reject([](TrainConfig& c) { c.cond_weight = -1.0; });
  reject([](TrainConfig& c) { c.supcon_weight = -0.1; });
  reject([](TrainConfig& c) {
    c.supcon_weight = 1.0;
    c.temperature = 0.0;
  });
  reject([](TrainConfig& c) {
    c.supcon_weight = 1.0;
    c.source_batch = 63;
  });
  reject([](TrainConfig& c) { c.projections = 0; });
  reject([](TrainConfig& c) { c.optim.lr = 0.0; });
  reject([](TrainConfig& c) { c.source_batch = 1; });
  reject([](TrainConfig& c) { c.target_batch = 1; });
  reject([](TrainConfig& c) { c.unlabeled_batch = 1; });
  reject([](TrainConfig& c) { c.epochs = -1; });
  reject([](TrainConfig& c) { c.pseudo_threshold = 0.0; });
  reject([](TrainConfig& c) { c.pseudo_threshold = 1.5; });
}

TEST_CASE("two-point sweep statistics match the closed forms") {
  SweepStat s = sweep_stat({0.8, 0.9});
  CHECK(s.mean == doctest::Approx(0.85).epsilon(1e-12));
  CHECK(s.se == doctest::Approx(0.05).epsilon(1e-9));

  SweepStat flat = sweep_stat({0.5, 0.5, 0.5});
  CHECK(flat.mean == 0.5);
  CHECK(flat.se == 0.0);

  CHECK_THROWS_AS(sweep_stat({0.7}), ValueError);
  CHECK_THROWS_AS(sweep_stat({}), ValueError);
}

TEST_CASE("evaluation reports exact counts for a hand-built classifier") {
  YNetwork net = hand_net(2);
  separating_head(net);
  Dataset ds = const_dataset({1.0, 2.0}, 3);

  for (Branch b : {Branch::Source, Branch::Target}) {
    EvalResult ev = evaluate(net, ds, b);
    CHECK(ev.accuracy == 1.0);
    CHECK(ev.per_class == std::vector<double>{1.0, 1.0});
    CHECK(ev.confusion[0][0] == 3);
    CHECK(ev.confusion[0][1] == 0);
    CHECK(ev.confusion[1][0] == 0);
    CHECK(ev.confusion[1][1] == 3);
    // every row sits 0.5 logits above the wrong class
    CHECK(ev.mean_ce == doctest::Approx(std::log(1.0 + std::exp(-0.5))).epsilon(1e-12));
  }
}

TEST_CASE("a constant predictor scores exactly chance on balanced data") {
  YNetwork net = hand_net(4);
  constant_head(net);
  Dataset ds = const_dataset({1.0, 2.0, 3.0, 4.0}, 5);

  EvalResult ev = evaluate(net, ds, Branch::Target);
  CHECK(ev.accuracy == 0.25);
  CHECK(ev.per_class == std::vector<double>{1.0, 0.0, 0.0, 0.0});
  double mean_pc = 0.0;
  for (double v : ev.per_class) mean_pc += v;
  CHECK(ev.accuracy == mean_pc / 4.0);  // balanced data: the two agree exactly
  for (std::int64_t j = 0; j < 4; ++j) {
    CHECK(ev.confusion[static_cast<size_t>(j)][0] == 5);
    for (std::int64_t c = 1; c < 4; ++c) CHECK(ev.confusion[static_cast<size_t>(j)][static_cast<size_t>(c)] == 0);
  }
}

TEST_CASE("evaluation flags absent classes and bad inputs") {
  YNetwork net = hand_net(2);
  constant_head(net);

  // only class 0 present: its row is perfect, the absent row reads 0
  Dataset lone = const_dataset({1.0, 2.0}, 2);
  lone.labels = {0, 0, 0, 0};
  EvalResult ev = evaluate(net, lone, Branch::Source);
  CHECK(ev.accuracy == 1.0);
  CHECK(ev.per_class == std::vector<double>{1.0, 0.0});

  CHECK_THROWS_WITH_AS(evaluate(net, empty_dataset(2), Branch::Source),
                       doctest::Contains("empty"), ValueError);
  CHECK_THROWS_WITH_AS(evaluate(net, const_dataset({1.0, 2.0, 3.0}, 2), Branch::Source),
                       doctest::Contains("classes"), ValueError);
  CHECK_THROWS_AS(evaluate(net, const_dataset({1.0, 2.0}, 2), Branch::Source, 0), ValueError);
}

TEST_CASE("evaluation is independent of the batch partition") {
  YNetwork net = hand_net(2);
  separating_head(net);
  Dataset ds = const_dataset({1.0, 2.0}, 7);

  EvalResult small = evaluate(net, ds, Branch::Target, 2);
  EvalResult odd = evaluate(net, ds, Branch::Target, 5);
  EvalResult whole = evaluate(net, ds, Branch::Target, 64);
  CHECK(small.accuracy == whole.accuracy);
  CHECK(odd.accuracy == whole.accuracy);
  CHECK(small.mean_ce == whole.mean_ce);
  CHECK(odd.mean_ce == whole.mean_ce);
}

TEST_CASE("pseudo-labels respect the confidence threshold") {
  Dataset ds = const_dataset({1.0, 2.0}, 4);

  YNetwork uniform_net = hand_net(2);
  constant_head(uniform_net);
  zero_param(uniform_net.head.b);  // equal logits: confidence exactly 1/2
  auto all_off = pseudo_labels(uniform_net, ds, 0.8);
  CHECK(all_off == std::vector<std::int64_t>(8, -1));
  auto at_chance = pseudo_labels(uniform_net, ds, 0.5);
  CHECK(at_chance == std::vector<std::int64_t>(8, 0));  // ties resolve to the lowest class

  YNetwork net = hand_net(2);
  separating_head(net);  // confidence 1/(1+e^-0.5) ~ 0.6225 on every row
  auto confident = pseudo_labels(net, ds, 0.6);
  CHECK(confident == ds.labels);
  auto too_strict = pseudo_labels(net, ds, 0.63);
  CHECK(too_strict == std::vector<std::int64_t>(8, -1));

  CHECK_THROWS_AS(pseudo_labels(net, ds, 0.0), ValueError);
  CHECK_THROWS_AS(pseudo_labels(net, ds, 1.5), ValueError);
  CHECK_THROWS_AS(pseudo_labels(net, empty_dataset(2), 0.5), ValueError);
}

TEST_CASE("the target-only baseline reproduces bit-identically per seed") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 5));
  TrainConfig cfg = tiny_config(17);
  cfg.epochs = 3;

  std::vector<double> first, second;
  {
    YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 9, false);
    baseline_target_only(net, bundle.b_train, cfg, &bundle.b_val, nullptr, &first);
  }
  {
    YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 9, false);
    baseline_target_only(net, bundle.b_train, cfg, &bundle.b_val, nullptr, &second);
  }
  REQUIRE(first.size() == second.size());
  REQUIRE(!first.empty());
  CHECK(first == second);

  cfg.seed = 18;
  std::vector<double> other;
  YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 9, false);
  baseline_target_only(net, bundle.b_train, cfg, nullptr, nullptr, &other);
  CHECK(other != first);
}

TEST_CASE("finetuning for zero epochs leaves the copied encoder in place") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 6));
  TrainConfig cfg = tiny_config(23);
  cfg.epochs = 0;

  YNetwork tuned = make_ynetwork(tiny_encoder(), 4, DType::Float32, 31, false);
  TrainResult result = baseline_finetune(tuned, bundle.b_train, cfg, nullptr);
  CHECK(result.records.empty());
  CHECK(tuned.tgt_enc.proj_w.value.bit_equal(tuned.src_enc.proj_w.value));
  CHECK(tuned.tgt_enc.stages[0].weight.value.bit_equal(tuned.src_enc.stages[0].weight.value));

  YNetwork copied = make_ynetwork(tiny_encoder(), 4, DType::Float32, 31, false);
  copy_encoder_params(copied.src_enc, copied.tgt_enc);
  EvalResult a = evaluate(tuned, bundle.b_test, Branch::Target);
  EvalResult b = evaluate(copied, bundle.b_test, Branch::Target);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.mean_ce == b.mean_ce);
}

TEST_CASE("cross-entropy-only transfer matches a joint tuning loop step for step") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 3));
  TrainConfig cfg = tiny_config(41);
  cfg.epochs = 3;

  // the unlabeled pool is present but must be ignored at zero weights
  std::vector<double> steps;
  YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 11, false);
  TrainResult result = train_transfer(net, bundle.b_train, bundle.b_test, bundle.a_train, cfg,
                                      nullptr, nullptr, &steps);
  for (const MetricsRecord& r : result.records) {
    CHECK(r.marginal_align == 0.0);
    CHECK(r.conditional_align == 0.0);
    CHECK(r.cond_skipped_steps == 0);
    CHECK(r.consistent(1e-12));
  }

  // independent loop: same streams, plain per-batch cross-entropies, with
  // the target encoder warm-started from the source one as transfer does
  YNetwork ref = make_ynetwork(tiny_encoder(), 4, DType::Float32, 11, false);
  copy_encoder_params(ref.src_enc, ref.tgt_enc);
  Optimizer opt(cfg.optim, ref.parameters());
  Rng base(cfg.seed);
  BatchSampler src_sampler(bundle.a_train.size(), cfg.source_batch, base.fork(110));
  BatchSampler tgt_sampler(bundle.b_train.size(), cfg.target_batch, base.fork(111));
  std::vector<double> ref_steps;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::int64_t s = 0; s < src_sampler.batches_per_epoch(); ++s) {
      Tape t;
      auto src_rows = src_sampler.next();
      std::vector<std::int64_t> src_labels(src_rows.size());
      for (size_t i = 0; i < src_rows.size(); ++i)
        src_labels[i] = bundle.a_train.labels[static_cast<size_t>(src_rows[i])];
      Var sx = t.leaf(gather_images(bundle.a_train.images, src_rows).astype(DType::Float32));
      Var ce_s = cross_entropy(t, classifier_forward(t, ref.head, encoder_forward(t, ref.src_enc, sx, true)),
                               src_labels);
      auto tgt_rows = tgt_sampler.next();
      std::vector<std::int64_t> tgt_labels(tgt_rows.size());
      for (size_t i = 0; i < tgt_rows.size(); ++i)
        tgt_labels[i] = bundle.b_train.labels[static_cast<size_t>(tgt_rows[i])];
      Var tx = t.leaf(gather_images(bundle.b_train.images, tgt_rows).astype(DType::Float32));
      Var ce_t = cross_entropy_sum(
          t, classifier_forward(t, ref.head, encoder_forward(t, ref.tgt_enc, tx, true)), tgt_labels);
      Var total = t.add(ce_s, ce_t);
      opt.zero_grad();
      t.backward(total);
      opt.step();
      ref_steps.push_back(static_cast<double>(ce_s.item()) + static_cast<double>(ce_t.item()));
    }
  }
  REQUIRE(steps.size() == ref_steps.size());
  CHECK(steps == ref_steps);
  CHECK(net.head.w.value.bit_equal(ref.head.w.value));
  CHECK(net.src_enc.proj_w.value.bit_equal(ref.src_enc.proj_w.value));
  CHECK(net.tgt_enc.proj_w.value.bit_equal(ref.tgt_enc.proj_w.value));

  // an empty pool with nonzero weights takes the same ignored-pool path
  std::vector<double> no_pool_steps;
  YNetwork net2 = make_ynetwork(tiny_encoder(), 4, DType::Float32, 11, false);
  TrainConfig aligned = cfg;
  aligned.alpha = 1.0;
  aligned.cond_weight = 1.0;
  train_transfer(net2, bundle.b_train, empty_dataset(4), bundle.a_train, aligned, nullptr, nullptr,
                 &no_pool_steps);
  CHECK(no_pool_steps == steps);
}

TEST_CASE("tied encoders on identical data keep the alignment term at zero") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(2, 6, 8));
  const Dataset& shared = bundle.a_train;  // same rows on every side
  REQUIRE(shared.size() == 8);

  TrainConfig cfg = tiny_config(21);
  cfg.alpha = 1.0;
  cfg.cond_weight = 0.0;
  cfg.unlabeled_batch = 8;
  cfg.normalize_target_ce = true;  // symmetric CE keeps the branches in lockstep
  cfg.epochs = 4;

  YNetwork net = make_ynetwork(tiny_encoder(), 2, DType::Float64, 13, /*tied_init=*/true);
  TrainResult result = train_transfer(net, shared, shared, shared, cfg);

  std::vector<double> marginals;
  for (const MetricsRecord& r : result.records)
    if (r.split == "train") marginals.push_back(r.marginal_align);
  REQUIRE(marginals.size() == 4);
  CHECK(marginals[0] == 0.0);  // exactly tied parameters: identical embeddings
  for (double m : marginals) {
    CHECK(m >= 0.0);
    CHECK(m <= 1e-9);  // later epochs drift only by summation-order noise
  }
}

TEST_CASE("transfer engages both alignment terms and reproduces per seed") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(2, 8, 12));
  TrainConfig cfg = tiny_config(33);
  cfg.alpha = 1.0;
  cfg.cond_weight = 1.0;
  cfg.pseudo_threshold = 0.5;  // the top class always reaches 1/k
  cfg.epochs = 2;

  auto run = [&](std::vector<double>* steps) {
    YNetwork net = make_ynetwork(tiny_encoder(), 2, DType::Float32, 7, false);
    return train_transfer(net, bundle.b_train, bundle.b_test, bundle.a_train, cfg, &bundle.b_val,
                          nullptr, steps);
  };
  std::vector<double> first, second;
  TrainResult result = run(&first);
  run(&second);
  CHECK(first == second);

  bool saw_marginal = false, saw_conditional = false;
  for (const MetricsRecord& r : result.records) {
    CHECK(r.consistent(1e-12));
    if (r.split != "train") continue;
    CHECK(r.cond_skipped_steps == 0);  // every row pseudo-labeled at this threshold
    saw_marginal = saw_marginal || r.marginal_align > 0.0;
    saw_conditional = saw_conditional || r.conditional_align > 0.0;
  }
  CHECK(saw_marginal);
  CHECK(saw_conditional);
  for (const MetricsRecord& r : result.records)
    if (r.split == "val") CHECK(r.accuracy.has_value());
}

TEST_CASE("pretraining matches a bare cross-entropy loop without the contrastive term") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 2));
  TrainConfig cfg = tiny_config(55);
  cfg.epochs = 3;

  std::vector<double> steps;
  YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 19, false);
  TrainResult result = pretrain_source(net, bundle.a_train, bundle.a_val, cfg, nullptr, &steps);
  for (const MetricsRecord& r : result.records) {
    CHECK(r.supcon == 0.0);
    CHECK(r.consistent(1e-12));
  }

  YNetwork ref = make_ynetwork(tiny_encoder(), 4, DType::Float32, 19, false);
  std::vector<Parameter*> params = ref.src_enc.parameters();
  for (Parameter* p : ref.head.parameters()) params.push_back(p);
  Optimizer opt(cfg.optim, params);
  Rng base(cfg.seed);
  BatchSampler sampler(bundle.a_train.size(), cfg.source_batch, base.fork(100));
  std::vector<double> ref_steps;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::int64_t s = 0; s < sampler.batches_per_epoch(); ++s) {
      Tape t;
      auto rows = sampler.next();
      std::vector<std::int64_t> labels(rows.size());
      for (size_t i = 0; i < rows.size(); ++i)
        labels[i] = bundle.a_train.labels[static_cast<size_t>(rows[i])];
      Var x = t.leaf(gather_images(bundle.a_train.images, rows).astype(DType::Float32));
      Var ce = cross_entropy(t, classifier_forward(t, ref.head, encoder_forward(t, ref.src_enc, x, true)),
                             labels);
      opt.zero_grad();
      t.backward(ce);
      opt.step();
      ref_steps.push_back(ce.item());
    }
  }
  REQUIRE(steps.size() == ref_steps.size());
  CHECK(steps == ref_steps);
  CHECK(net.src_enc.proj_w.value.bit_equal(ref.src_enc.proj_w.value));
  CHECK(net.head.w.value.bit_equal(ref.head.w.value));
}

TEST_CASE("pretraining with a contrastive term logs both weighted contributions") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(2, 6, 4));
  TrainConfig cfg = tiny_config(61);
  cfg.supcon_weight = 0.5;
  cfg.source_batch = 4;
  cfg.epochs = 2;

  auto run = [&](std::vector<double>* steps) {
    YNetwork net = make_ynetwork(tiny_encoder(), 2, DType::Float32, 29, false);
    return pretrain_source(net, bundle.a_train, bundle.a_val, cfg, nullptr, steps);
  };
  std::vector<double> first, second;
  TrainResult result = run(&first);
  run(&second);
  CHECK(first == second);

  bool saw_train = false;
  for (const MetricsRecord& r : result.records) {
    CHECK(r.consistent(1e-12));
    if (r.split == "train") {
      saw_train = true;
      CHECK(r.ce_source > 0.0);
      CHECK(r.supcon > 0.0);
      CHECK(r.loss == r.ce_source + r.supcon);
    } else {
      CHECK(r.accuracy.has_value());
      REQUIRE(r.per_class_accuracy.has_value());
      CHECK(r.per_class_accuracy->size() == 2);
    }
  }
  CHECK(saw_train);
}

TEST_CASE("exploding optimization aborts naming the non-finite term") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(2, 6, 9));
  EncoderConfig ec;
  ec.channels = {2};
  ec.norm = NormKind::None;  // normalization would re-standardize the blow-up away
  ec.embed_dim = 4;
  YNetwork net = make_ynetwork(ec, 2, DType::Float64, 77, false);

  TrainConfig cfg = tiny_config(83);
  cfg.optim.kind = OptimKind::Sgd;
  cfg.optim.lr = 1e200;  // one update overflows the next forward pass
  cfg.epochs = 2;
  CHECK_THROWS_WITH_AS(baseline_target_only(net, bundle.b_train, cfg),
                       doctest::Contains("non-finite cross-entropy"), NumericError);
}

TEST_CASE("training appends its records to a metrics log when given") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 15));
  TrainConfig cfg = tiny_config(91);
  cfg.epochs = 2;

  const auto path = std::filesystem::temp_directory_path() / "wassalign_training_log.jsonl";
  std::filesystem::remove(path);
  TrainResult result;
  {
    MetricsLog log(path);
    YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 37, false);
    result = baseline_target_only(net, bundle.b_train, cfg, &bundle.b_val, &log);
  }
  auto lines = MetricsLog::read(path);
  REQUIRE(lines.size() == result.records.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i].phase == result.records[i].phase);
    CHECK(lines[i].epoch == result.records[i].epoch);
    CHECK(lines[i].split == result.records[i].split);
    CHECK(lines[i].loss == result.records[i].loss);
  }
  std::filesystem::remove(path);
}

TEST_CASE("training rejects mismatched or undersized datasets") {
  SyntheticBundle bundle = generate_synthetic(tiny_spec(4, 8, 20));
  TrainConfig cfg = tiny_config(5);
  YNetwork net = make_ynetwork(tiny_encoder(), 4, DType::Float32, 3, false);

  Dataset two_class = const_dataset({1.0, 2.0}, 3);
  CHECK_THROWS_WITH_AS(baseline_target_only(net, two_class, cfg), doctest::Contains("classes"),
                       ValueError);
  CHECK_THROWS_WITH_AS(pretrain_source(net, empty_dataset(4), bundle.a_val, cfg),
                       doctest::Contains("at least"), ValueError);
  Dataset one_row = const_dataset({1.0, 2.0, 3.0, 4.0}, 1);
  one_row.labels.resize(1);
  one_row.images = gather_images(one_row.images, {0});
  CHECK_THROWS_AS(train_transfer(net, one_row, bundle.b_test, bundle.a_train, cfg), ValueError);
}
