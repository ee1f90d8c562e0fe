#include "wassalign/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <initializer_list>
#include <optional>
#include <utility>

#include "wassalign/losses.hpp"
#include "wassalign/tape.hpp"

namespace wassalign {

namespace {

// Stream ids under cfg.seed; see the header table.
constexpr std::uint64_t kPretrainBatches = 100;
constexpr std::uint64_t kPretrainAugment = 101;
constexpr std::uint64_t kTransferSource = 110;
constexpr std::uint64_t kTransferTarget = 111;
constexpr std::uint64_t kTransferUnlabeled = 112;
constexpr std::uint64_t kTransferPairing = 113;
constexpr std::uint64_t kTransferProjections = 114;
constexpr std::uint64_t kTargetOnlyBatches = 120;
constexpr std::uint64_t kFinetuneBatches = 130;

DType net_dtype(const YNetwork& net) { return net.head.w.value.dtype(); }

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void check_dataset(const char* op, const char* which, const Dataset& ds, const YNetwork& net,
                   std::int64_t min_rows) {
  if (ds.size() < min_rows)
    throw ValueError(std::string(op) + ": " + which + " dataset has " + std::to_string(ds.size()) +
                     " rows, needs at least " + std::to_string(min_rows));
  if (ds.num_classes != net.num_classes)
    throw ValueError(std::string(op) + ": " + which + " dataset has " +
                     std::to_string(ds.num_classes) + " classes but the network expects " +
                     std::to_string(net.num_classes));
}

std::vector<std::int64_t> labels_for(const Dataset& ds, const std::vector<std::int64_t>& rows) {
  std::vector<std::int64_t> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = ds.labels[static_cast<size_t>(rows[i])];
  return out;
}

Encoder& branch_encoder(YNetwork& net, Branch b) {
  return b == Branch::Source ? net.src_enc : net.tgt_enc;
}

Var embed_batch(Tape& t, YNetwork& net, Branch b, const Dataset& ds,
                const std::vector<std::int64_t>& rows, bool train) {
  Var x = t.leaf(gather_images(ds.images, rows).astype(net_dtype(net)));
  return encoder_forward(t, branch_encoder(net, b), x, train);
}

void check_finite(const char* phase, std::int64_t epoch,
                  std::initializer_list<std::pair<const char*, double>> terms) {
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v))
      throw NumericError(std::string(phase) + ": non-finite " + name + " at epoch " +
                         std::to_string(epoch) + "; training aborted");
  }
}

// Re-labels a numeric failure raised while building one term (an overflow
// inside its forward ops, say) with the term's name; validation errors pass
// through untouched.
template <class F>
auto named_term(const char* phase, std::int64_t epoch, const char* term, F&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string(phase) + ": non-finite " + term + " at epoch " +
                       std::to_string(epoch) + " (" + e.what() + ")");
  }
}

std::int64_t steps_per_epoch(std::int64_t count, std::int64_t batch) {
  return std::max<std::int64_t>(1, count / std::min(batch, count));
}

void emit(TrainResult& result, MetricsLog* log, MetricsRecord record) {
  if (log != nullptr) log->append(record);
  result.records.push_back(std::move(record));
}

MetricsRecord val_record(YNetwork& net, const Dataset& val, Branch branch, const char* phase,
                         std::int64_t epoch) {
  const double t0 = now_seconds();
  EvalResult ev = evaluate(net, val, branch);
  MetricsRecord r;
  r.phase = phase;
  r.epoch = epoch;
  r.split = "val";
  r.loss = ev.mean_ce;
  (branch == Branch::Source ? r.ce_source : r.ce_target) = ev.mean_ce;
  r.accuracy = ev.accuracy;
  r.per_class_accuracy = ev.per_class;
  r.seconds = now_seconds() - t0;
  return r;
}

// Shared cross-entropy-only loop on one branch; both baselines and, via the
// objective-reduction invariant, the degenerate phases reduce to this shape.
TrainResult run_branch_ce(YNetwork& net, Branch branch, const char* phase, const Dataset& train,
                          const TrainConfig& cfg, const Dataset* val, MetricsLog* log,
                          std::vector<double>* step_losses, std::uint64_t stream) {
  validate_train_config(cfg);
  check_dataset(phase, "train", train, net, 2);
  if (val != nullptr) check_dataset(phase, "val", *val, net, 1);

  std::vector<Parameter*> params = branch_encoder(net, branch).parameters();
  for (Parameter* p : net.head.parameters()) params.push_back(p);
  Optimizer opt(cfg.optim, params);

  const std::int64_t batch = branch == Branch::Source ? cfg.source_batch : cfg.target_batch;
  Rng base(cfg.seed);
  BatchSampler sampler(train.size(), batch, base.fork(stream));

  TrainResult result;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    double ce_sum = 0.0;
    for (std::int64_t step = 0; step < sampler.batches_per_epoch(); ++step) {
      Tape t;
      const std::vector<std::int64_t> rows = sampler.next();
      Var loss = named_term(phase, epoch, "cross-entropy", [&] {
        Var logits = classifier_forward(t, net.head, embed_batch(t, net, branch, train, rows, true));
        return cross_entropy(t, logits, labels_for(train, rows));
      });
      const double ce = loss.item();
      check_finite(phase, epoch, {{"cross-entropy", ce}});
      opt.zero_grad();
      t.backward(loss);
      opt.step();
      ce_sum += ce;
      if (step_losses != nullptr) step_losses->push_back(ce);
    }
    MetricsRecord r;
    r.phase = phase;
    r.epoch = epoch;
    r.split = "train";
    (branch == Branch::Source ? r.ce_source : r.ce_target) =
        ce_sum / static_cast<double>(sampler.batches_per_epoch());
    r.loss = r.term_sum();
    r.seconds = now_seconds() - t0;
    emit(result, log, std::move(r));
    if (val != nullptr) emit(result, log, val_record(net, *val, branch, phase, epoch));
  }
  return result;
}

}  // namespace

const char* branch_name(Branch b) { return b == Branch::Source ? "source" : "target"; }

Branch branch_from_string(const std::string& s) {
  if (s == "source") return Branch::Source;
  if (s == "target") return Branch::Target;
  throw ValueError("unknown branch '" + s + "' (expected source or target)");
}

void validate_train_config(const TrainConfig& cfg) {
  const char* op = "train config";
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) throw ValueError(std::string(op) + ": " + what);
  };
  require(cfg.alpha >= 0.0, "alpha must be >= 0 (zero disables the marginal term)");
  require(cfg.cond_weight >= 0.0, "cond_weight must be >= 0 (zero disables the conditional term)");
  require(cfg.supcon_weight >= 0.0,
          "supcon_weight must be >= 0 (zero disables the contrastive term)");
  if (cfg.supcon_weight > 0.0) {
    require(cfg.temperature > 0.0, "temperature must be positive when the contrastive term is on");
    require(cfg.source_batch % 2 == 0, "source_batch must be even when the contrastive term is on");
    require(cfg.augment_sigma >= 0.0, "augment_sigma must be >= 0");
  }
  require(cfg.projections >= 1, "projections must be >= 1");
  require(cfg.optim.lr > 0.0, "learning rate must be positive");
  require(cfg.source_batch >= 2, "source_batch must be >= 2");
  require(cfg.target_batch >= 2, "target_batch must be >= 2");
  require(cfg.unlabeled_batch == 0 || cfg.unlabeled_batch >= 2,
          "unlabeled_batch must be 0 (match source_batch) or >= 2");
  require(cfg.epochs >= 0, "epochs must be >= 0");
  require(cfg.pseudo_threshold > 0.0 && cfg.pseudo_threshold <= 1.0,
          "pseudo_threshold must lie in (0, 1]");
}

TrainResult pretrain_source(YNetwork& net, const Dataset& source_train, const Dataset& source_val,
                            const TrainConfig& cfg, MetricsLog* log,
                            std::vector<double>* step_losses) {
  const char* phase = "pretrain";
  validate_train_config(cfg);
  check_dataset(phase, "train", source_train, net, 2);
  check_dataset(phase, "val", source_val, net, 1);

  std::vector<Parameter*> params = net.src_enc.parameters();
  for (Parameter* p : net.head.parameters()) params.push_back(p);
  Optimizer opt(cfg.optim, params);

  const bool use_supcon = cfg.supcon_weight > 0.0;
  Rng base(cfg.seed);
  std::optional<BatchSampler> plain;
  std::optional<ClassCompleteSampler> paired;
  std::optional<Rng> aug_rng;
  if (use_supcon) {
    paired.emplace(source_train.labels, source_train.num_classes, cfg.source_batch,
                   base.fork(kPretrainBatches));
    aug_rng.emplace(base.fork(kPretrainAugment));
  } else {
    plain.emplace(source_train.size(), cfg.source_batch, base.fork(kPretrainBatches));
  }
  const std::int64_t steps = steps_per_epoch(source_train.size(), cfg.source_batch);
  const SupConConfig supcon_cfg{cfg.temperature};

  TrainResult result;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    double ce_sum = 0.0;
    double sc_sum = 0.0;
    for (std::int64_t step = 0; step < steps; ++step) {
      Tape t;
      double ce_item = 0.0;
      double sc_item = 0.0;
      Var total;
      if (use_supcon) {
        MultiviewedBatch mv = make_multiviewed_batch(source_train, paired->next(), cfg.augment,
                                                     cfg.augment_sigma, *aug_rng);
        auto [z, ce] = named_term(phase, epoch, "cross-entropy", [&] {
          Var x = t.leaf(mv.images.astype(net_dtype(net)));
          Var emb = encoder_forward(t, net.src_enc, x, true);
          return std::pair<Var, Var>{
              emb, cross_entropy(t, classifier_forward(t, net.head, emb), mv.labels)};
        });
        Var sc = named_term(phase, epoch, "contrastive term",
                            [&] { return supcon_loss(t, z, mv.labels, supcon_cfg); });
        // supcon_loss sums over anchors, so its raw magnitude grows with the
        // view count and would drown the mean cross-entropy at any usable
        // weight. Weight the per-anchor mean instead, which keeps the knob
        // batch-size independent.
        const double sc_scale = cfg.supcon_weight / static_cast<double>(mv.labels.size());
        total = t.add(ce, t.scale(sc, sc_scale));
        ce_item = ce.item();
        sc_item = sc_scale * sc.item();
      } else {
        const std::vector<std::int64_t> rows = plain->next();
        Var ce = named_term(phase, epoch, "cross-entropy", [&] {
          Var z = embed_batch(t, net, Branch::Source, source_train, rows, true);
          return cross_entropy(t, classifier_forward(t, net.head, z), labels_for(source_train, rows));
        });
        total = ce;
        ce_item = ce.item();
      }
      check_finite(phase, epoch, {{"cross-entropy", ce_item}, {"contrastive term", sc_item}});
      opt.zero_grad();
      t.backward(total);
      opt.step();
      ce_sum += ce_item;
      sc_sum += sc_item;
      if (step_losses != nullptr) step_losses->push_back(ce_item + sc_item);
    }
    MetricsRecord r;
    r.phase = phase;
    r.epoch = epoch;
    r.split = "train";
    r.ce_source = ce_sum / static_cast<double>(steps);
    r.supcon = sc_sum / static_cast<double>(steps);
    r.loss = r.term_sum();
    r.seconds = now_seconds() - t0;
    emit(result, log, std::move(r));
    emit(result, log, val_record(net, source_val, Branch::Source, phase, epoch));
  }
  return result;
}

TrainResult train_transfer(YNetwork& net, const Dataset& target_labeled,
                           const Dataset& target_unlabeled, const Dataset& source_train,
                           const TrainConfig& cfg, const Dataset* target_val, MetricsLog* log,
                           std::vector<double>* step_losses) {
  const char* phase = "transfer";
  validate_train_config(cfg);
  check_dataset(phase, "labeled source", source_train, net, 2);
  check_dataset(phase, "labeled target", target_labeled, net, 2);
  if (target_unlabeled.size() > 0) check_dataset(phase, "unlabeled target", target_unlabeled, net, 1);
  if (target_val != nullptr) check_dataset(phase, "val", *target_val, net, 1);

  // The target encoder was never touched in phase 1, so joint optimization
  // would otherwise start from its random initialization. Warm-starting it
  // from the trained source encoder gives the pseudo-labeler a usable
  // embedding from the first epoch.
  copy_encoder_params(net.src_enc, net.tgt_enc);

  Optimizer opt(cfg.optim, net.parameters());

  // With both alignment weights at zero the unlabeled pool is ignored
  // outright: no sampler, no forward passes, no pseudo-labels. That keeps
  // the degenerate objective bit-identical to plain two-branch tuning. A
  // pool too small to batch from (fewer than two rows) is ignored the same
  // way.
  const bool want_marginal = cfg.alpha > 0.0;
  const bool want_conditional = cfg.cond_weight > 0.0;
  const bool use_unlabeled = (want_marginal || want_conditional) && target_unlabeled.size() >= 2;

  Rng base(cfg.seed);
  BatchSampler src_sampler(source_train.size(), cfg.source_batch, base.fork(kTransferSource));
  BatchSampler tgt_sampler(target_labeled.size(), cfg.target_batch, base.fork(kTransferTarget));
  std::optional<BatchSampler> unl_sampler;
  if (use_unlabeled) {
    const std::int64_t unl_batch = cfg.unlabeled_batch > 0 ? cfg.unlabeled_batch : cfg.source_batch;
    unl_sampler.emplace(target_unlabeled.size(), unl_batch, base.fork(kTransferUnlabeled));
  }
  const Rng pair_base = base.fork(kTransferPairing);
  const std::uint64_t proj_seed = base.fork(kTransferProjections).seed();

  TransferWeights weights;
  weights.alpha = use_unlabeled ? cfg.alpha : 0.0;
  weights.cond_weight = use_unlabeled ? cfg.cond_weight : 0.0;
  weights.normalize_target_ce = cfg.normalize_target_ce;
  weights.num_classes = net.num_classes;

  const std::int64_t embed_dim = net.src_enc.cfg.embed_dim;
  const DType dt = net_dtype(net);
  const std::int64_t steps = src_sampler.batches_per_epoch();
  std::int64_t global_step = 0;
  std::vector<std::int64_t> pseudo;

  TrainResult result;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    if (use_unlabeled && want_conditional)
      pseudo = pseudo_labels(net, target_unlabeled, cfg.pseudo_threshold);
    double ce_s_sum = 0.0, ce_t_sum = 0.0, marg_sum = 0.0, cond_sum = 0.0;
    std::int64_t skipped = 0;
    for (std::int64_t step = 0; step < steps; ++step) {
      Tape t;
      const std::vector<std::int64_t> src_rows = src_sampler.next();
      const std::vector<std::int64_t> src_labels = labels_for(source_train, src_rows);
      Var src_z = named_term(phase, epoch, "source cross-entropy", [&] {
        return embed_batch(t, net, Branch::Source, source_train, src_rows, true);
      });
      Var src_logits = classifier_forward(t, net.head, src_z);

      const std::vector<std::int64_t> tgt_rows = tgt_sampler.next();
      Var tgt_logits = named_term(phase, epoch, "target cross-entropy", [&] {
        return classifier_forward(
            t, net.head, embed_batch(t, net, Branch::Target, target_labeled, tgt_rows, true));
      });

      std::optional<Var> src_align, tgt_align;
      std::vector<std::int64_t> unl_labels;
      ProjectionSet proj;
      if (use_unlabeled) {
        const std::vector<std::int64_t> unl_rows = unl_sampler->next();
        src_align = src_z;
        tgt_align = named_term(phase, epoch, "alignment terms", [&] {
          return embed_batch(t, net, Branch::Target, target_unlabeled, unl_rows, true);
        });
        unl_labels.assign(unl_rows.size(), -1);
        if (want_conditional)
          for (size_t i = 0; i < unl_rows.size(); ++i)
            unl_labels[i] = pseudo[static_cast<size_t>(unl_rows[i])];
        proj = projections_for_step(cfg.projections, embed_dim, dt, proj_seed, global_step);
      }

      Rng pair_rng = pair_base.fork(static_cast<std::uint64_t>(global_step));
      TransferParts parts = named_term(phase, epoch, "objective terms", [&] {
        return transfer_objective(t, src_logits, src_labels, tgt_logits,
                                  labels_for(target_labeled, tgt_rows), src_align, src_labels,
                                  tgt_align, unl_labels, proj, weights, pair_rng);
      });
      check_finite(phase, epoch,
                   {{"source cross-entropy", parts.source_ce},
                    {"target cross-entropy", parts.target_ce},
                    {"marginal alignment term", parts.marginal_align},
                    {"conditional alignment term", parts.conditional_align}});
      if (want_conditional && use_unlabeled && parts.cond_classes_used == 0) ++skipped;

      opt.zero_grad();
      t.backward(parts.total);
      opt.step();
      ++global_step;

      ce_s_sum += parts.source_ce;
      ce_t_sum += parts.target_ce;
      marg_sum += parts.marginal_align;
      cond_sum += parts.conditional_align;
      if (step_losses != nullptr)
        step_losses->push_back(parts.source_ce + parts.target_ce + parts.marginal_align +
                               parts.conditional_align);
    }
    MetricsRecord r;
    r.phase = phase;
    r.epoch = epoch;
    r.split = "train";
    r.ce_source = ce_s_sum / static_cast<double>(steps);
    r.ce_target = ce_t_sum / static_cast<double>(steps);
    r.marginal_align = marg_sum / static_cast<double>(steps);
    r.conditional_align = cond_sum / static_cast<double>(steps);
    r.loss = r.term_sum();
    r.cond_skipped_steps = skipped;
    r.seconds = now_seconds() - t0;
    emit(result, log, std::move(r));
    if (target_val != nullptr)
      emit(result, log, val_record(net, *target_val, Branch::Target, phase, epoch));
  }
  return result;
}

TrainResult baseline_target_only(YNetwork& net, const Dataset& target_labeled,
                                 const TrainConfig& cfg, const Dataset* target_val, MetricsLog* log,
                                 std::vector<double>* step_losses) {
  return run_branch_ce(net, Branch::Target, "target_only", target_labeled, cfg, target_val, log,
                       step_losses, kTargetOnlyBatches);
}

TrainResult baseline_finetune(YNetwork& net, const Dataset& target_labeled, const TrainConfig& cfg,
                              const Dataset* target_val, MetricsLog* log,
                              std::vector<double>* step_losses) {
  validate_train_config(cfg);  // reject bad settings before touching the network
  check_dataset("finetune", "train", target_labeled, net, 2);
  copy_encoder_params(net.src_enc, net.tgt_enc);
  return run_branch_ce(net, Branch::Target, "finetune", target_labeled, cfg, target_val, log,
                       step_losses, kFinetuneBatches);
}

EvalResult evaluate(YNetwork& net, const Dataset& ds, Branch branch, std::int64_t batch_size) {
  const char* op = "evaluate";
  if (ds.size() == 0) throw ValueError(std::string(op) + ": empty dataset");
  check_dataset(op, "input", ds, net, 1);
  if (batch_size < 1) throw ValueError(std::string(op) + ": batch_size must be >= 1");

  const std::int64_t n = ds.size();
  const std::int64_t k = net.num_classes;
  EvalResult out;
  out.confusion.assign(static_cast<size_t>(k), std::vector<std::int64_t>(static_cast<size_t>(k), 0));
  double nll = 0.0;

  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t stop = std::min(n, start + batch_size);
    std::vector<std::int64_t> rows(static_cast<size_t>(stop - start));
    for (std::int64_t i = start; i < stop; ++i) rows[static_cast<size_t>(i - start)] = i;
    Tape t;
    Var logits = classifier_forward(t, net.head, embed_batch(t, net, branch, ds, rows, false));
    const Tensor& lv = logits.val();
    for (std::int64_t i = 0; i < stop - start; ++i) {
      double best = lv.at(i * k);
      std::int64_t arg = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        const double v = lv.at(i * k + c);
        if (v > best) {
          best = v;
          arg = c;
        }
      }
      double denom = 0.0;
      for (std::int64_t c = 0; c < k; ++c) denom += std::exp(lv.at(i * k + c) - best);
      const std::int64_t y = ds.labels[static_cast<size_t>(start + i)];
      nll += -(lv.at(i * k + y) - best - std::log(denom));
      ++out.confusion[static_cast<size_t>(y)][static_cast<size_t>(arg)];
    }
  }

  std::int64_t correct = 0;
  out.per_class.assign(static_cast<size_t>(k), 0.0);
  for (std::int64_t j = 0; j < k; ++j) {
    std::int64_t row_sum = 0;
    for (std::int64_t c = 0; c < k; ++c) row_sum += out.confusion[static_cast<size_t>(j)][static_cast<size_t>(c)];
    correct += out.confusion[static_cast<size_t>(j)][static_cast<size_t>(j)];
    if (row_sum > 0)
      out.per_class[static_cast<size_t>(j)] =
          static_cast<double>(out.confusion[static_cast<size_t>(j)][static_cast<size_t>(j)]) /
          static_cast<double>(row_sum);
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  out.mean_ce = nll / static_cast<double>(n);
  return out;
}

std::vector<std::int64_t> pseudo_labels(YNetwork& net, const Dataset& ds, double threshold,
                                        std::int64_t batch_size) {
  const char* op = "pseudo labels";
  if (ds.size() == 0) throw ValueError(std::string(op) + ": empty dataset");
  check_dataset(op, "input", ds, net, 1);
  if (batch_size < 1) throw ValueError(std::string(op) + ": batch_size must be >= 1");
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ValueError(std::string(op) + ": threshold must lie in (0, 1]");

  const std::int64_t n = ds.size();
  const std::int64_t k = net.num_classes;
  std::vector<std::int64_t> out(static_cast<size_t>(n), -1);
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t stop = std::min(n, start + batch_size);
    std::vector<std::int64_t> rows(static_cast<size_t>(stop - start));
    for (std::int64_t i = start; i < stop; ++i) rows[static_cast<size_t>(i - start)] = i;
    Tape t;
    Var logits =
        classifier_forward(t, net.head, embed_batch(t, net, Branch::Target, ds, rows, false));
    const Tensor& lv = logits.val();
    for (std::int64_t i = 0; i < stop - start; ++i) {
      double best = lv.at(i * k);
      std::int64_t arg = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        const double v = lv.at(i * k + c);
        if (v > best) {
          best = v;
          arg = c;
        }
      }
      double denom = 0.0;
      for (std::int64_t c = 0; c < k; ++c) denom += std::exp(lv.at(i * k + c) - best);
      if (1.0 / denom >= threshold) out[static_cast<size_t>(start + i)] = arg;
    }
  }
  return out;
}

SweepStat sweep_stat(const std::vector<double>& values) {
  if (values.size() < 2)
    throw ValueError("sweep stat: need at least 2 values, got " + std::to_string(values.size()));
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= (n - 1.0);
  return SweepStat{mean, std::sqrt(var) / std::sqrt(n)};
}

}  // namespace wassalign
