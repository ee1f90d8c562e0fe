#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wassalign/common.hpp"
#include "wassalign/tensor.hpp"

namespace wassalign {

// Generator settings for the paired two-modality dataset. Instances share a
// class-conditioned latent; modality A renders it through tanh, modality B
// through a per-sample gain followed by a signed square root, which makes
// B's amplitude vary by up to gain_max/gain_min across samples.
struct SyntheticSpec {
  std::int64_t num_classes = 4;
  std::int64_t per_class = 200;  // instances per class, across all splits
  std::int64_t image_size = 16;  // square images, single channel
  std::int64_t latent_dim = 8;   // raised to num_classes when smaller
  double separation = 3.0;       // class-prototype scale in latent space
  double noise_sigma = 0.2;      // pixel noise after rendering
  double gain_min = 0.1;         // modality-B per-sample gain range
  double gain_max = 10.0;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

void validate_synthetic_spec(const SyntheticSpec& spec);

// Stable content hash of every field, for manifests and change detection.
std::uint64_t synthetic_spec_hash(const SyntheticSpec& spec);

struct Dataset {
  Tensor images;  // [N, 1, H, W] float32
  std::vector<std::int64_t> labels;
  std::int64_t num_classes = 0;
  std::string modality;  // "A" or "B"
  std::string split;     // "train", "val" or "test"

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

// All six splits of one generated corpus. Splits are stratified 70/15/15
// per class; A and B are paired instance-for-instance, so label vectors per
// split are identical across modalities.
struct SyntheticBundle {
  Dataset a_train, a_val, a_test;
  Dataset b_train, b_val, b_test;
};

SyntheticBundle generate_synthetic(const SyntheticSpec& spec);

// Deterministic single-image transforms. Images are [C, H, W].
Tensor rotate90(const Tensor& img);  // quarter turn counter-clockwise
Tensor horizontal_flip(const Tensor& img);
// Shifts content by (dx, dy) pixels (positive dx moves content right,
// positive dy moves it down); vacated pixels are zero.
Tensor translate(const Tensor& img, std::int64_t dx, std::int64_t dy);
Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng);

enum class Augment { Rotate90, HorizontalFlip, Translate, GaussianNoise };

// Parses a comma-separated policy list; names are "rotate90",
// "horizontal-flip", "translate" and "gaussian-noise". Unknown names throw.
std::vector<Augment> parse_augment_policies(const std::string& csv);
std::string augment_policy_name(Augment a);

// One randomized application of the policy list, in order: rotate90 picks
// 0-3 quarter turns, horizontal-flip fires with probability 1/2, translate
// draws dx, dy uniformly from [-2, 2], gaussian-noise adds N(0, sigma^2).
Tensor augment_view(const Tensor& img, const std::vector<Augment>& policies, double sigma,
                    Rng& rng);

// A batch of 2B augmented views: rows 2i and 2i+1 are two independent views
// of the dataset row origin[2i] == origin[2i+1]. Every class present among
// the chosen rows must appear at least twice.
struct MultiviewedBatch {
  Tensor images;  // [2B, C, H, W]
  std::vector<std::int64_t> labels;
  std::vector<std::int64_t> origin;
};

MultiviewedBatch make_multiviewed_batch(const Dataset& ds, const std::vector<std::int64_t>& rows,
                                        const std::vector<Augment>& policies, double sigma,
                                        Rng& rng);

// Shuffled fixed-size minibatches; reshuffles each epoch and drops a
// trailing partial batch (uses all rows when fewer than batch_size exist).
class BatchSampler {
 public:
  BatchSampler(std::int64_t count, std::int64_t batch_size, Rng rng);

  std::vector<std::int64_t> next();
  std::int64_t batches_per_epoch() const { return batches_per_epoch_; }

 private:
  std::int64_t count_;
  std::int64_t batch_;
  Rng rng_;
  std::vector<std::int64_t> order_;
  std::int64_t cursor_ = 0;
  std::int64_t batches_per_epoch_ = 1;
};

// Batches built from same-class pairs so every present class has at least
// two examples (what the contrastive loss needs). batch_size must be even.
class ClassCompleteSampler {
 public:
  ClassCompleteSampler(const std::vector<std::int64_t>& labels, std::int64_t num_classes,
                       std::int64_t batch_size, Rng rng);

  std::vector<std::int64_t> next();

 private:
  std::vector<std::vector<std::int64_t>> by_class_;
  std::vector<std::int64_t> usable_classes_;
  std::int64_t batch_;
  Rng rng_;
};

// Balanced label-budget selection: per-class counts differ by at most one,
// ties in the remainder resolved by a seeded class shuffle. The complement
// is returned as the unlabeled pool. Requires num_classes <= n <= size.
struct LabeledSplit {
  std::vector<std::int64_t> labeled;
  std::vector<std::int64_t> unlabeled;
};

LabeledSplit subsample_labeled(const Dataset& ds, std::int64_t n, Rng& rng);

// Row extraction: one image [C, H, W], or a batch gather [B, C, H, W].
Tensor image_at(const Tensor& images, std::int64_t row);
Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& rows);

// Materializes the chosen rows (in the given order) as a standalone
// dataset; modality, split and class count carry over.
Dataset subset_dataset(const Dataset& ds, const std::vector<std::int64_t>& rows);

// On-disk dataset directory: images.tnsr, labels.tnsr and a plain-text
// manifest carrying class count, modality, split and the generator hash.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds,
                  std::uint64_t spec_hash);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace wassalign
