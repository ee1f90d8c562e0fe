#include "wassalign/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "json.hpp"
#include "wassalign/common.hpp"
#include "wassalign/container.hpp"
#include "wassalign/losses.hpp"
#include "wassalign/metrics.hpp"
#include "wassalign/tape.hpp"

namespace fs = std::filesystem;

namespace wassalign {
namespace {

// Experiment-layer RNG streams, disjoint from the training streams listed
// in training.hpp.
constexpr std::uint64_t kNetInitStream = 90;
constexpr std::uint64_t kBudgetStream = 140;

// ---------------------------------------------------------------------------
// small string utilities

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_hash(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const char* fmt_bool(bool v) { return v ? "true" : "false"; }

// ---------------------------------------------------------------------------
// typed value parsing, with the offending key in every message

[[noreturn]] void bad_value(const std::string& key, const char* kind, const std::string& v) {
  throw SpecError("spec key '" + key + "': expected " + kind + ", got '" + v + "'");
}

std::int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::int64_t n = std::stoll(v, &used);
    if (used != v.size() || v.empty()) bad_value(key, "an integer", v);
    return n;
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "an integer", v);
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-') bad_value(key, "a non-negative integer", v);
  try {
    std::size_t used = 0;
    const std::uint64_t n = std::stoull(v, &used);
    if (used != v.size()) bad_value(key, "a non-negative integer", v);
    return n;
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "a non-negative integer", v);
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || v.empty()) bad_value(key, "a number", v);
    return d;
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, "a number", v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, "'true' or 'false'", v);
}

std::vector<std::int64_t> to_i64_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  for (const std::string& item : split_csv(v)) out.push_back(to_i64(key, item));
  return out;
}

std::vector<std::uint64_t> to_u64_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_csv(v)) out.push_back(to_u64(key, item));
  return out;
}

// ---------------------------------------------------------------------------
// key registry: single source of truth for validation and serialization order

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "command",
      "data.dir",
      "data.classes",
      "data.per_class",
      "data.image_size",
      "data.latent_dim",
      "data.separation",
      "data.noise_sigma",
      "data.gain_min",
      "data.gain_max",
      "data.seed",
      "net.channels",
      "net.kernel",
      "net.stride",
      "net.pad",
      "net.norm",
      "net.embed_dim",
      "net.bn_momentum",
      "net.eps",
      "net.tied_init",
      "train.alpha",
      "train.cond_weight",
      "train.supcon_weight",
      "train.temperature",
      "train.projections",
      "train.optimizer",
      "train.lr",
      "train.momentum",
      "train.source_batch",
      "train.target_batch",
      "train.unlabeled_batch",
      "train.pretrain_epochs",
      "train.transfer_epochs",
      "train.pseudo_threshold",
      "train.augment",
      "train.augment_sigma",
      "train.normalize_target_ce",
      "run.seed",
      "run.seeds",
      "run.budget",
      "run.out",
      "run.checkpoint",
      "run.deterministic",
      "run.source_data",
      "baseline.kind",
      "eval.dataset",
      "eval.branch",
  };
  return keys;
}

const std::set<std::string>& command_names() {
  static const std::set<std::string> names = {"synth",    "pretrain", "transfer",
                                              "baseline", "eval",     "sweep"};
  return names;
}

std::string derived_source_data(const std::string& command) {
  // Whether the command reads the source datasets at all; target-only and
  // finetune baselines consume no source data (finetune reads only the
  // phase-1 checkpoint), and eval touches just the directory it is given.
  if (command == "baseline" || command == "eval") return "unused";
  return "used";
}

std::string join_names(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += items[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// run-directory plumbing

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir))
      throw IoError("output path '" + dir.string() + "' exists and is not a directory");
    if (!fs::is_empty(dir) && !force)
      throw IoError("output directory '" + dir.string() +
                    "' is not empty; pass --force to reuse it");
    return;
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void write_metrics(const fs::path& dir, const std::vector<MetricsRecord>& records,
                   bool deterministic) {
  MetricsLog log(dir / "metrics.jsonl", /*truncate=*/true);
  for (MetricsRecord r : records) {
    if (deterministic) r.seconds = 0.0;  // wall time is the one non-reproducible field
    log.append(r);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_rows(const fs::path& path, const std::vector<std::int64_t>& rows) {
  std::string text;
  for (std::int64_t r : rows) {
    text += std::to_string(r);
    text += "\n";
  }
  write_text(path, text);
}

// ---------------------------------------------------------------------------
// dataset and network helpers

Dataset load_split(const ExperimentSpec& spec, const char* name) {
  Dataset ds = load_dataset(spec.data_dir / name);
  if (ds.num_classes != spec.data.num_classes)
    throw ValueError(std::string("dataset '") + name + "' has " +
                     std::to_string(ds.num_classes) + " classes but the spec sets data.classes = " +
                     std::to_string(spec.data.num_classes));
  if (ds.images.dim(2) != spec.data.image_size)
    throw ValueError(std::string("dataset '") + name + "' has image size " +
                     std::to_string(ds.images.dim(2)) +
                     " but the spec sets data.image_size = " +
                     std::to_string(spec.data.image_size));
  return ds;
}

YNetwork build_network(const ExperimentSpec& spec) {
  return make_ynetwork(spec.net, spec.data.num_classes, DType::Float32,
                       Rng(spec.seed).fork(kNetInitStream).seed(), spec.tied_init);
}

YNetwork load_checkpoint(const ExperimentSpec& spec) {
  if (spec.checkpoint.empty())
    throw SpecError("run.checkpoint is required for command '" + spec.command + "'");
  if (!fs::exists(spec.checkpoint))
    throw IoError("expected checkpoint at '" + spec.checkpoint.string() + "'");
  YNetwork net = load_network(spec.checkpoint.string());
  if (net.num_classes != spec.data.num_classes)
    throw ValueError("checkpoint '" + spec.checkpoint.string() + "' has " +
                     std::to_string(net.num_classes) +
                     " classes but the spec sets data.classes = " +
                     std::to_string(spec.data.num_classes));
  if (!(net.src_enc.cfg == spec.net))
    throw ValueError("checkpoint '" + spec.checkpoint.string() +
                     "' was built with a different encoder configuration than the spec's net.* "
                     "keys; align the spec with the checkpoint");
  return net;
}

LabeledSplit pick_budget(const Dataset& target_train, const ExperimentSpec& spec) {
  LabeledSplit split;
  if (spec.budget == 0) {  // full split labeled, nothing left unlabeled
    split.labeled.resize(static_cast<std::size_t>(target_train.size()));
    for (std::int64_t i = 0; i < target_train.size(); ++i)
      split.labeled[static_cast<std::size_t>(i)] = i;
    return split;
  }
  Rng rng = Rng(spec.seed).fork(kBudgetStream);
  return subsample_labeled(target_train, spec.budget, rng);
}

TrainConfig phase_config(const ExperimentSpec& spec, std::int64_t epochs) {
  TrainConfig cfg = spec.train;
  cfg.seed = spec.seed;
  cfg.epochs = epochs;
  return cfg;
}

MetricsRecord test_record(YNetwork& net, const Dataset& test, Branch branch,
                          const std::string& phase, std::int64_t epoch, EvalResult* out_eval) {
  const EvalResult ev = evaluate(net, test, branch);
  MetricsRecord r;
  r.phase = phase;
  r.epoch = epoch;
  r.split = "test";
  r.loss = ev.mean_ce;
  if (branch == Branch::Source)
    r.ce_source = ev.mean_ce;
  else
    r.ce_target = ev.mean_ce;
  r.accuracy = ev.accuracy;
  r.per_class_accuracy = ev.per_class;
  if (out_eval) *out_eval = ev;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// spec parsing and resolution

SpecEntries parse_spec_text(const std::string& text, const std::string& origin) {
  SpecEntries out;
  std::istringstream in(text);
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw SpecError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                      line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw SpecError(origin + ":" + std::to_string(lineno) + ": missing key before '='");
    if (out.count(key))
      throw SpecError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out[key] = value;
  }
  return out;
}

SpecEntries read_spec_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open spec file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_spec_text(buf.str(), path.string());
}

ExperimentSpec resolve_spec(const SpecEntries& entries, const std::string& command) {
  if (!command_names().count(command)) throw SpecError("unknown command '" + command + "'");
  {
    const std::set<std::string> known(known_keys().begin(), known_keys().end());
    for (const auto& [key, value] : entries) {
      (void)value;
      if (!known.count(key)) throw SpecError("unknown spec key '" + key + "'");
    }
  }

  ExperimentSpec s;
  s.command = command;
  auto get = [&](const char* key) -> const std::string* {
    auto it = entries.find(key);
    return it == entries.end() ? nullptr : &it->second;
  };

  if (const auto* v = get("command"); v && *v != command)
    throw SpecError("spec file sets command '" + *v + "' but command '" + command +
                    "' was invoked");

  if (const auto* v = get("data.dir")) s.data_dir = *v;
  if (const auto* v = get("data.classes")) s.data.num_classes = to_i64("data.classes", *v);
  if (const auto* v = get("data.per_class")) s.data.per_class = to_i64("data.per_class", *v);
  if (const auto* v = get("data.image_size")) s.data.image_size = to_i64("data.image_size", *v);
  if (const auto* v = get("data.latent_dim")) s.data.latent_dim = to_i64("data.latent_dim", *v);
  if (const auto* v = get("data.separation")) s.data.separation = to_f64("data.separation", *v);
  if (const auto* v = get("data.noise_sigma")) s.data.noise_sigma = to_f64("data.noise_sigma", *v);
  if (const auto* v = get("data.gain_min")) s.data.gain_min = to_f64("data.gain_min", *v);
  if (const auto* v = get("data.gain_max")) s.data.gain_max = to_f64("data.gain_max", *v);
  if (const auto* v = get("data.seed")) s.data.seed = to_u64("data.seed", *v);

  if (const auto* v = get("net.channels")) {
    s.net.channels = to_i64_list("net.channels", *v);
    if (s.net.channels.empty()) bad_value("net.channels", "a comma-separated list of widths", *v);
  }
  if (const auto* v = get("net.kernel")) s.net.kernel = to_i64("net.kernel", *v);
  if (const auto* v = get("net.stride")) s.net.stride = to_i64("net.stride", *v);
  if (const auto* v = get("net.pad")) s.net.pad = to_i64("net.pad", *v);
  if (const auto* v = get("net.norm")) {
    try {
      s.net.norm = norm_from_string(*v);
    } catch (const ValueError& e) {
      throw SpecError(std::string("spec key 'net.norm': ") + e.what());
    }
  }
  if (const auto* v = get("net.embed_dim")) s.net.embed_dim = to_i64("net.embed_dim", *v);
  if (const auto* v = get("net.bn_momentum")) s.net.bn_momentum = to_f64("net.bn_momentum", *v);
  if (const auto* v = get("net.eps")) s.net.eps = to_f64("net.eps", *v);
  if (const auto* v = get("net.tied_init")) s.tied_init = to_bool("net.tied_init", *v);

  if (const auto* v = get("train.alpha")) s.train.alpha = to_f64("train.alpha", *v);
  if (const auto* v = get("train.cond_weight"))
    s.train.cond_weight = to_f64("train.cond_weight", *v);
  if (const auto* v = get("train.supcon_weight"))
    s.train.supcon_weight = to_f64("train.supcon_weight", *v);
  if (const auto* v = get("train.temperature"))
    s.train.temperature = to_f64("train.temperature", *v);
  if (const auto* v = get("train.projections"))
    s.train.projections = to_i64("train.projections", *v);
  if (const auto* v = get("train.optimizer")) {
    if (*v == "adam")
      s.train.optim.kind = OptimKind::Adam;
    else if (*v == "sgd-momentum")
      s.train.optim.kind = OptimKind::Sgd;
    else
      bad_value("train.optimizer", "'adam' or 'sgd-momentum'", *v);
  }
  if (const auto* v = get("train.lr")) s.train.optim.lr = to_f64("train.lr", *v);
  if (const auto* v = get("train.momentum")) {
    s.train.optim.momentum = to_f64("train.momentum", *v);
    if (s.train.optim.momentum < 0.0 || s.train.optim.momentum >= 1.0)
      bad_value("train.momentum", "a value in [0, 1)", *v);
  }
  if (const auto* v = get("train.source_batch"))
    s.train.source_batch = to_i64("train.source_batch", *v);
  if (const auto* v = get("train.target_batch"))
    s.train.target_batch = to_i64("train.target_batch", *v);
  if (const auto* v = get("train.unlabeled_batch"))
    s.train.unlabeled_batch = to_i64("train.unlabeled_batch", *v);
  if (const auto* v = get("train.pretrain_epochs"))
    s.pretrain_epochs = to_i64("train.pretrain_epochs", *v);
  if (const auto* v = get("train.transfer_epochs"))
    s.transfer_epochs = to_i64("train.transfer_epochs", *v);
  if (const auto* v = get("train.pseudo_threshold"))
    s.train.pseudo_threshold = to_f64("train.pseudo_threshold", *v);
  if (const auto* v = get("train.augment")) {
    try {
      s.train.augment = parse_augment_policies(*v);
    } catch (const ValueError& e) {
      throw SpecError(std::string("spec key 'train.augment': ") + e.what());
    }
  }
  if (const auto* v = get("train.augment_sigma"))
    s.train.augment_sigma = to_f64("train.augment_sigma", *v);
  if (const auto* v = get("train.normalize_target_ce"))
    s.train.normalize_target_ce = to_bool("train.normalize_target_ce", *v);

  if (const auto* v = get("run.seed")) s.seed = to_u64("run.seed", *v);
  if (const auto* v = get("run.seeds")) s.seeds = to_u64_list("run.seeds", *v);
  if (const auto* v = get("run.budget")) s.budget = to_i64("run.budget", *v);
  if (const auto* v = get("run.checkpoint")) s.checkpoint = *v;
  if (const auto* v = get("run.deterministic")) s.deterministic = to_bool("run.deterministic", *v);
  if (const auto* v = get("baseline.kind")) {
    if (*v != "target-only" && *v != "finetune")
      bad_value("baseline.kind", "'target-only' or 'finetune'", *v);
    s.baseline_kind = *v;
  }
  if (const auto* v = get("eval.dataset")) s.eval_dataset = *v;
  if (const auto* v = get("eval.branch")) {
    try {
      s.eval_branch = branch_from_string(*v);
    } catch (const ValueError& e) {
      throw SpecError(std::string("spec key 'eval.branch': ") + e.what());
    }
  }

  if (const auto* v = get("run.out")) {
    s.out_dir = *v;
  } else if (command == "eval") {
    s.out_dir.clear();  // print-only unless a directory is requested
  } else if (command == "synth") {
    s.out_dir = s.data_dir;  // datasets land where later commands will read them
  } else {
    s.out_dir = fs::path("runs") / command;
  }
  if (s.out_dir.empty() && command != "eval")
    throw SpecError("run.out must not be empty for command '" + command + "'");

  s.source_data = derived_source_data(command);
  if (const auto* v = get("run.source_data")) {
    if (*v != "auto" && *v != "used" && *v != "unused")
      bad_value("run.source_data", "'auto', 'used' or 'unused'", *v);
    if (*v != "auto" && *v != s.source_data)
      throw SpecError("run.source_data is derived per command (here '" + s.source_data +
                      "'); set it to 'auto' or leave it out");
  }

  // Eager validation so malformed specs fail before any compute.
  validate_synthetic_spec(s.data);
  validate_encoder_config(s.net, s.data.image_size, s.data.image_size);
  {
    TrainConfig probe = s.train;
    probe.epochs = 0;
    validate_train_config(probe);
  }
  if (s.pretrain_epochs < 0)
    throw SpecError("spec key 'train.pretrain_epochs': must be >= 0");
  if (s.transfer_epochs < 0)
    throw SpecError("spec key 'train.transfer_epochs': must be >= 0");
  if (s.budget < 0) throw SpecError("spec key 'run.budget': must be >= 0 (0 means the full split)");
  return s;
}

std::string serialize_spec(const ExperimentSpec& spec) {
  std::vector<std::string> augment_names;
  for (Augment a : spec.train.augment) augment_names.push_back(augment_policy_name(a));
  std::vector<std::string> channel_names;
  for (std::int64_t c : spec.net.channels) channel_names.push_back(std::to_string(c));
  std::vector<std::string> seed_names;
  for (std::uint64_t s : spec.seeds) seed_names.push_back(std::to_string(s));

  std::ostringstream o;
  o << "command = " << spec.command << "\n";
  o << "data.dir = " << spec.data_dir.string() << "\n";
  o << "data.classes = " << spec.data.num_classes << "\n";
  o << "data.per_class = " << spec.data.per_class << "\n";
  o << "data.image_size = " << spec.data.image_size << "\n";
  o << "data.latent_dim = " << spec.data.latent_dim << "\n";
  o << "data.separation = " << fmt_double(spec.data.separation) << "\n";
  o << "data.noise_sigma = " << fmt_double(spec.data.noise_sigma) << "\n";
  o << "data.gain_min = " << fmt_double(spec.data.gain_min) << "\n";
  o << "data.gain_max = " << fmt_double(spec.data.gain_max) << "\n";
  o << "data.seed = " << spec.data.seed << "\n";
  o << "net.channels = " << join_names(channel_names) << "\n";
  o << "net.kernel = " << spec.net.kernel << "\n";
  o << "net.stride = " << spec.net.stride << "\n";
  o << "net.pad = " << spec.net.pad << "\n";
  o << "net.norm = " << norm_name(spec.net.norm) << "\n";
  o << "net.embed_dim = " << spec.net.embed_dim << "\n";
  o << "net.bn_momentum = " << fmt_double(spec.net.bn_momentum) << "\n";
  o << "net.eps = " << fmt_double(spec.net.eps) << "\n";
  o << "net.tied_init = " << fmt_bool(spec.tied_init) << "\n";
  o << "train.alpha = " << fmt_double(spec.train.alpha) << "\n";
  o << "train.cond_weight = " << fmt_double(spec.train.cond_weight) << "\n";
  o << "train.supcon_weight = " << fmt_double(spec.train.supcon_weight) << "\n";
  o << "train.temperature = " << fmt_double(spec.train.temperature) << "\n";
  o << "train.projections = " << spec.train.projections << "\n";
  o << "train.optimizer = "
    << (spec.train.optim.kind == OptimKind::Adam ? "adam" : "sgd-momentum") << "\n";
  o << "train.lr = " << fmt_double(spec.train.optim.lr) << "\n";
  o << "train.momentum = " << fmt_double(spec.train.optim.momentum) << "\n";
  o << "train.source_batch = " << spec.train.source_batch << "\n";
  o << "train.target_batch = " << spec.train.target_batch << "\n";
  o << "train.unlabeled_batch = " << spec.train.unlabeled_batch << "\n";
  o << "train.pretrain_epochs = " << spec.pretrain_epochs << "\n";
  o << "train.transfer_epochs = " << spec.transfer_epochs << "\n";
  o << "train.pseudo_threshold = " << fmt_double(spec.train.pseudo_threshold) << "\n";
  o << "train.augment = " << join_names(augment_names) << "\n";
  o << "train.augment_sigma = " << fmt_double(spec.train.augment_sigma) << "\n";
  o << "train.normalize_target_ce = " << fmt_bool(spec.train.normalize_target_ce) << "\n";
  o << "run.seed = " << spec.seed << "\n";
  o << "run.seeds = " << join_names(seed_names) << "\n";
  o << "run.budget = " << spec.budget << "\n";
  o << "run.out = " << spec.out_dir.string() << "\n";
  o << "run.checkpoint = " << spec.checkpoint.string() << "\n";
  o << "run.deterministic = " << fmt_bool(spec.deterministic) << "\n";
  o << "run.source_data = " << spec.source_data << "\n";
  o << "baseline.kind = " << spec.baseline_kind << "\n";
  o << "eval.dataset = " << spec.eval_dataset.string() << "\n";
  o << "eval.branch = " << branch_name(spec.eval_branch) << "\n";
  return o.str();
}

void write_resolved_spec(const ExperimentSpec& spec, const fs::path& dir) {
  write_text(dir / "spec.resolved", serialize_spec(spec));
}

void apply_thread_cap(bool deterministic) {
#ifdef _OPENMP
  const char* env = std::getenv("WASSALIGN_THREADS");
  if (env != nullptr && *env != '\0') {
    const std::string v(env);
    std::int64_t n = 0;
    try {
      std::size_t used = 0;
      n = std::stoll(v, &used);
      if (used != v.size()) n = 0;
    } catch (const std::exception&) {
      n = 0;
    }
    if (n < 1)
      throw ValueError("WASSALIGN_THREADS must be a positive integer, got '" + v + "'");
    omp_set_num_threads(static_cast<int>(n));
  } else if (deterministic) {
    omp_set_num_threads(1);
  }
#else
  (void)deterministic;
#endif
}

// ---------------------------------------------------------------------------
// commands

void cmd_synth(const ExperimentSpec& spec, bool force, std::ostream& out) {
  prepare_out_dir(spec.out_dir, force);
  const SyntheticBundle bundle = generate_synthetic(spec.data);
  const std::uint64_t hash = synthetic_spec_hash(spec.data);
  save_dataset(spec.out_dir / "a_train", bundle.a_train, hash);
  save_dataset(spec.out_dir / "a_val", bundle.a_val, hash);
  save_dataset(spec.out_dir / "a_test", bundle.a_test, hash);
  save_dataset(spec.out_dir / "b_train", bundle.b_train, hash);
  save_dataset(spec.out_dir / "b_val", bundle.b_val, hash);
  save_dataset(spec.out_dir / "b_test", bundle.b_test, hash);
  write_resolved_spec(spec, spec.out_dir);
  out << "wrote 6 datasets under '" << spec.out_dir.string() << "'\n";
  out << "spec hash " << fmt_hash(hash) << "\n";
}

void cmd_pretrain(const ExperimentSpec& spec, bool force, std::ostream& out) {
  prepare_out_dir(spec.out_dir, force);
  const Dataset a_train = load_split(spec, "a_train");
  const Dataset a_val = load_split(spec, "a_val");
  const Dataset a_test = load_split(spec, "a_test");

  YNetwork net = build_network(spec);
  const TrainConfig cfg = phase_config(spec, spec.pretrain_epochs);
  TrainResult result = pretrain_source(net, a_train, a_val, cfg);

  EvalResult test_eval;
  result.records.push_back(
      test_record(net, a_test, Branch::Source, "pretrain", cfg.epochs, &test_eval));
  write_metrics(spec.out_dir, result.records, spec.deterministic);
  save_network(net, (spec.out_dir / "checkpoint.tnsr").string());
  write_resolved_spec(spec, spec.out_dir);
  out << "pretrain: source test accuracy " << fmt_double(test_eval.accuracy) << "\n";
  out << "checkpoint '" << (spec.out_dir / "checkpoint.tnsr").string() << "'\n";
}

void cmd_transfer(const ExperimentSpec& spec, bool force, std::ostream& out) {
  prepare_out_dir(spec.out_dir, force);
  YNetwork net = load_checkpoint(spec);
  const Dataset a_train = load_split(spec, "a_train");
  const Dataset b_train = load_split(spec, "b_train");
  const Dataset b_val = load_split(spec, "b_val");
  const Dataset b_test = load_split(spec, "b_test");

  const LabeledSplit split = pick_budget(b_train, spec);
  write_rows(spec.out_dir / "labeled_rows.txt", split.labeled);
  const Dataset labeled = subset_dataset(b_train, split.labeled);
  const Dataset unlabeled = subset_dataset(b_train, split.unlabeled);

  const TrainConfig cfg = phase_config(spec, spec.transfer_epochs);
  TrainResult result = train_transfer(net, labeled, unlabeled, a_train, cfg, &b_val);

  EvalResult test_eval;
  result.records.push_back(
      test_record(net, b_test, Branch::Target, "transfer", cfg.epochs, &test_eval));
  write_metrics(spec.out_dir, result.records, spec.deterministic);
  save_network(net, (spec.out_dir / "checkpoint.tnsr").string());
  write_resolved_spec(spec, spec.out_dir);
  out << "transfer: target test accuracy " << fmt_double(test_eval.accuracy) << " with "
      << split.labeled.size() << " labeled rows\n";
  out << "checkpoint '" << (spec.out_dir / "checkpoint.tnsr").string() << "'\n";
}

void cmd_baseline(const ExperimentSpec& spec, bool force, std::ostream& out) {
  prepare_out_dir(spec.out_dir, force);
  const Dataset b_train = load_split(spec, "b_train");
  const Dataset b_val = load_split(spec, "b_val");
  const Dataset b_test = load_split(spec, "b_test");

  const LabeledSplit split = pick_budget(b_train, spec);
  write_rows(spec.out_dir / "labeled_rows.txt", split.labeled);
  const Dataset labeled = subset_dataset(b_train, split.labeled);

  const TrainConfig cfg = phase_config(spec, spec.transfer_epochs);
  YNetwork net;
  TrainResult result;
  std::string phase;
  if (spec.baseline_kind == "target-only") {
    phase = "target_only";
    net = build_network(spec);
    result = baseline_target_only(net, labeled, cfg, &b_val);
  } else {
    phase = "finetune";
    net = load_checkpoint(spec);
    result = baseline_finetune(net, labeled, cfg, &b_val);
  }

  EvalResult test_eval;
  result.records.push_back(test_record(net, b_test, Branch::Target, phase, cfg.epochs, &test_eval));
  write_metrics(spec.out_dir, result.records, spec.deterministic);
  save_network(net, (spec.out_dir / "checkpoint.tnsr").string());
  write_resolved_spec(spec, spec.out_dir);
  out << phase << ": target test accuracy " << fmt_double(test_eval.accuracy) << " with "
      << split.labeled.size() << " labeled rows\n";
  out << "checkpoint '" << (spec.out_dir / "checkpoint.tnsr").string() << "'\n";
}

void cmd_eval(const ExperimentSpec& spec, bool force, std::ostream& out) {
  if (spec.eval_dataset.empty())
    throw SpecError("eval.dataset is required for command 'eval'");
  const bool keep = !spec.out_dir.empty();
  if (keep) prepare_out_dir(spec.out_dir, force);

  YNetwork net = load_checkpoint(spec);
  Dataset ds = load_dataset(spec.eval_dataset);
  if (ds.num_classes != net.num_classes)
    throw ValueError("dataset '" + spec.eval_dataset.string() + "' has " +
                     std::to_string(ds.num_classes) + " classes but the checkpoint expects " +
                     std::to_string(net.num_classes));

  const EvalResult ev = evaluate(net, ds, spec.eval_branch);
  out << "accuracy " << fmt_double(ev.accuracy) << "\n";
  out << "mean_ce " << fmt_double(ev.mean_ce) << "\n";
  out << "per_class";
  for (double v : ev.per_class) out << " " << fmt_double(v);
  out << "\n";

  if (keep) {
    MetricsRecord r;
    r.phase = "eval";
    r.split = ds.split;
    r.loss = ev.mean_ce;
    if (spec.eval_branch == Branch::Source)
      r.ce_source = ev.mean_ce;
    else
      r.ce_target = ev.mean_ce;
    r.accuracy = ev.accuracy;
    r.per_class_accuracy = ev.per_class;
    write_metrics(spec.out_dir, {r}, spec.deterministic);
    write_resolved_spec(spec, spec.out_dir);
  }
}

double cmd_swd(const fs::path& a, const fs::path& b, std::int64_t projections, std::uint64_t seed,
               std::ostream& out) {
  if (projections < 1) throw ValueError("swd: projections must be >= 1");
  auto load_points = [](const fs::path& path) {
    const container::File file = container::read_file(path.string());
    if (file.entries.size() != 1)
      throw ValueError("swd: '" + path.string() + "' must hold exactly one tensor entry, found " +
                       std::to_string(file.entries.size()));
    Tensor t = container::to_tensor(file.entries.front().second);
    if (t.ndim() != 2)
      throw ValueError("swd: entry '" + file.entries.front().first + "' in '" + path.string() +
                       "' must be a 2-D [points, dim] tensor, got " + shape_str(t.shape()));
    return t;
  };
  const Tensor ta = load_points(a);
  const Tensor tb = load_points(b);
  if (!(ta.shape() == tb.shape()))
    throw ShapeError("swd: point sets differ in shape: " + shape_str(ta.shape()) + " vs " +
                     shape_str(tb.shape()));

  Tape t;
  const Var va = t.leaf(ta.astype(DType::Float64));
  const Var vb = t.leaf(tb.astype(DType::Float64));
  const ProjectionSet proj = sample_projections(projections, ta.dim(1), DType::Float64, seed);
  const double value = swd_distance(t, va, vb, proj).item();
  out << fmt_double(value) << "\n";
  return value;
}

void cmd_sweep(const ExperimentSpec& spec, bool force, std::ostream& out) {
  if (spec.seeds.size() < 2)
    throw SpecError("run.seeds needs at least two seeds for a sweep, got " +
                    std::to_string(spec.seeds.size()));
  {
    std::set<std::uint64_t> unique(spec.seeds.begin(), spec.seeds.end());
    if (unique.size() != spec.seeds.size())
      throw SpecError("run.seeds contains duplicate seeds");
  }
  prepare_out_dir(spec.out_dir, force);
  write_resolved_spec(spec, spec.out_dir);

  // method name -> metric name -> one value per seed, in listed order
  const std::vector<std::pair<std::string, std::string>> methods = {
      {"swd_transfer", "transfer"},
      {"target_only", "target_only"},
      {"finetune", "finetune"},
  };
  std::map<std::string, std::map<std::string, std::vector<double>>> collected;
  std::vector<std::uint64_t> failed;
  std::exception_ptr first_failure;

  for (std::uint64_t seed : spec.seeds) {
    const fs::path seed_dir = spec.out_dir / ("seed_" + std::to_string(seed));
    ExperimentSpec run = spec;
    run.seed = seed;
    run.seeds.clear();
    run.deterministic = spec.deterministic;

    ExperimentSpec pre = run;
    pre.command = "pretrain";
    pre.out_dir = seed_dir / "pretrain";
    pre.checkpoint.clear();
    pre.source_data = "used";

    ExperimentSpec tr = run;
    tr.command = "transfer";
    tr.out_dir = seed_dir / "transfer";
    tr.checkpoint = pre.out_dir / "checkpoint.tnsr";
    tr.source_data = "used";

    ExperimentSpec tonly = run;
    tonly.command = "baseline";
    tonly.baseline_kind = "target-only";
    tonly.out_dir = seed_dir / "target_only";
    tonly.checkpoint.clear();
    tonly.source_data = "unused";

    ExperimentSpec ft = run;
    ft.command = "baseline";
    ft.baseline_kind = "finetune";
    ft.out_dir = seed_dir / "finetune";
    ft.checkpoint = pre.out_dir / "checkpoint.tnsr";
    ft.source_data = "unused";

    try {
      cmd_pretrain(pre, force, out);
      cmd_transfer(tr, force, out);
      cmd_baseline(tonly, force, out);
      cmd_baseline(ft, force, out);

      nlohmann::json summary;
      summary["seed"] = seed;
      std::map<std::string, std::map<std::string, double>> seed_values;
      for (const auto& [name, dir] : methods) {
        const auto records = MetricsLog::read(seed_dir / dir / "metrics.jsonl");
        const MetricsRecord* test = nullptr;
        for (const auto& r : records)
          if (r.split == "test") test = &r;
        if (test == nullptr || !test->accuracy.has_value())
          throw IoError("sweep: no test record in '" + (seed_dir / dir).string() + "'");
        summary["methods"][name]["accuracy"] = *test->accuracy;
        summary["methods"][name]["mean_ce"] = test->loss;
        seed_values[name]["accuracy"] = *test->accuracy;
        seed_values[name]["mean_ce"] = test->loss;
      }
      write_text(seed_dir / "summary.json", summary.dump(2) + "\n");
      // merge only after the whole seed succeeded so columns stay aligned
      for (const auto& [name, metrics] : seed_values)
        for (const auto& [metric, value] : metrics) collected[name][metric].push_back(value);
      out << "seed " << seed << ": ok\n";
    } catch (const Error& e) {
      std::error_code ec;
      fs::create_directories(seed_dir, ec);
      if (!ec) {
        std::ofstream err(seed_dir / "error.txt");
        err << e.what() << "\n";
      }
      failed.push_back(seed);
      if (!first_failure) first_failure = std::current_exception();
      out << "seed " << seed << ": failed: " << e.what() << "\n";
    }
  }

  if (!failed.empty()) {
    out << "aggregate skipped: " << failed.size() << " of " << spec.seeds.size()
        << " seeds failed\n";
    std::rethrow_exception(first_failure);
  }

  nlohmann::json agg;
  agg["seeds"] = spec.seeds;
  for (const auto& [name, dir] : methods) {
    (void)dir;
    for (const char* metric : {"accuracy", "mean_ce"}) {
      const std::vector<double>& values = collected[name][metric];
      const SweepStat stat = sweep_stat(values);
      agg["methods"][name][metric]["mean"] = stat.mean;
      agg["methods"][name][metric]["se"] = stat.se;
      agg["methods"][name][metric]["values"] = values;
    }
  }
  write_text(spec.out_dir / "aggregate.json", agg.dump(2) + "\n");
  out << "aggregate written to '" << (spec.out_dir / "aggregate.json").string() << "'\n";
}

}  // namespace wassalign
