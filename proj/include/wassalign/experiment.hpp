#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "wassalign/data.hpp"
#include "wassalign/nn.hpp"
#include "wassalign/training.hpp"

namespace wassalign {

// Raw key = value pairs from a spec file, insertion-agnostic (ordered map
// so serialization and diffs are stable).
using SpecEntries = std::map<std::string, std::string>;

// Parses flat UTF-8 "key = value" text. '#' starts a comment, blank lines
// are skipped, duplicate keys are an error. `origin` names the source in
// messages.
SpecEntries parse_spec_text(const std::string& text, const std::string& origin);
SpecEntries read_spec_file(const std::filesystem::path& path);

// One fully-resolved experiment. Every knob is either a spec key or a
// documented default here; a serialized resolved spec re-parses to an
// identical value, so the snapshot alone re-runs the experiment.
//
// Command-independent extras:
//   - the network is initialized from run.seed (stream-separated from the
//     training draws), in float32;
//   - the few-shot labeled subset is drawn from run.seed under stream id
//     140, so all methods of one run share the same budgeted rows;
//   - run.source_data resolves to "used"/"unused" per command, recording
//     whether the source datasets were read at all.
struct ExperimentSpec {
  std::string command;  // synth | pretrain | transfer | baseline | eval | sweep
  std::filesystem::path data_dir = "data";
  SyntheticSpec data;
  EncoderConfig net;
  bool tied_init = false;
  TrainConfig train;  // train.seed and train.epochs are filled per command
  std::int64_t pretrain_epochs = 30;
  std::int64_t transfer_epochs = 30;
  std::int64_t budget = 32;  // labeled-target rows; 0 means the full split
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;  // sweep only; needs >= 2
  std::filesystem::path out_dir;     // default runs/<command>; empty for eval: print only
  std::filesystem::path checkpoint;  // phase-1 net (transfer, finetune, eval)
  std::string baseline_kind = "target-only";  // or "finetune"
  std::filesystem::path eval_dataset;
  Branch eval_branch = Branch::Target;
  bool deterministic = false;
  std::string source_data = "auto";

  bool operator==(const ExperimentSpec&) const = default;
};

// Applies entries over the documented defaults. Unknown keys, malformed
// values and a `command` entry disagreeing with `command` are SpecErrors.
ExperimentSpec resolve_spec(const SpecEntries& entries, const std::string& command);

// Canonical resolved form: every key materialized, fixed order, doubles
// printed round-trip exactly.
std::string serialize_spec(const ExperimentSpec& spec);
void write_resolved_spec(const ExperimentSpec& spec, const std::filesystem::path& dir);

// Caps OpenMP workers from WASSALIGN_THREADS; without the variable,
// deterministic mode runs single-threaded and other modes keep the OpenMP
// default.
void apply_thread_cap(bool deterministic);

// Commands. Each validates its spec before any compute, writes only under
// its output directory, and throws the error taxonomy of common.hpp (the
// CLI maps it onto exit codes). `force` permits writing into a non-empty
// output directory.

// Generates the six synthetic dataset directories plus a resolved-spec
// snapshot, and prints the generator hash.
void cmd_synth(const ExperimentSpec& spec, bool force, std::ostream& out);

// Phase 1 on the source datasets: metrics.jsonl, checkpoint.tnsr and
// spec.resolved in the run directory.
void cmd_pretrain(const ExperimentSpec& spec, bool force, std::ostream& out);

// Phase 2 from a phase-1 checkpoint: budgeted labeled target rows (written
// to labeled_rows.txt), the complement as the unlabeled pool.
void cmd_transfer(const ExperimentSpec& spec, bool force, std::ostream& out);

// baseline.kind selects target-only (fresh network, no source data read)
// or finetune (phase-1 checkpoint, encoder copied across).
void cmd_baseline(const ExperimentSpec& spec, bool force, std::ostream& out);

// Evaluates run.checkpoint on eval.dataset through eval.branch; prints
// accuracy, mean cross-entropy and per-class accuracy, and writes a run
// directory only when one was requested.
void cmd_eval(const ExperimentSpec& spec, bool force, std::ostream& out);

// Sliced distance between two single-tensor container files; prints and
// returns the value.
double cmd_swd(const std::filesystem::path& a, const std::filesystem::path& b,
               std::int64_t projections, std::uint64_t seed, std::ostream& out);

// Runs pretrain, transfer and both baselines per seed into seed_<n>/
// directories, evaluates each method on the target test split, and writes
// aggregate.json (mean, standard error, per-seed values per method) only
// when every seed succeeds; failures leave error.txt behind and the first
// one is rethrown after all seeds ran.
void cmd_sweep(const ExperimentSpec& spec, bool force, std::ostream& out);

}  // namespace wassalign
