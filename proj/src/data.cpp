#include "wassalign/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "wassalign/container.hpp"

namespace wassalign {

namespace {

double signed_sqrt(double x) { return x >= 0.0 ? std::sqrt(x) : -std::sqrt(-x); }

void append_real(std::string& s, const char* key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s=%a;", key, v);  // hex floats hash exactly
  s += buf;
}

}  // namespace

void validate_synthetic_spec(const SyntheticSpec& spec) {
  if (spec.num_classes < 2)
    throw ValueError("synthetic spec: num_classes must be >= 2, got " +
                     std::to_string(spec.num_classes));
  if (spec.per_class < 4)
    throw ValueError("synthetic spec: per_class must be >= 4 so every split is non-empty, got " +
                     std::to_string(spec.per_class));
  if (spec.image_size < 8)
    throw ValueError("synthetic spec: image_size must be >= 8, got " +
                     std::to_string(spec.image_size));
  if (spec.latent_dim < 1) throw ValueError("synthetic spec: latent_dim must be >= 1");
  if (!(spec.separation > 0.0)) throw ValueError("synthetic spec: separation must be positive");
  if (spec.noise_sigma < 0.0) throw ValueError("synthetic spec: noise_sigma must be >= 0");
  if (!(spec.gain_min > 0.0) || spec.gain_max < spec.gain_min)
    throw ValueError("synthetic spec: need 0 < gain_min <= gain_max");
}

std::uint64_t synthetic_spec_hash(const SyntheticSpec& spec) {
  std::string s;
  s += "classes=" + std::to_string(spec.num_classes) + ";";
  s += "per_class=" + std::to_string(spec.per_class) + ";";
  s += "image=" + std::to_string(spec.image_size) + ";";
  s += "latent=" + std::to_string(spec.latent_dim) + ";";
  append_real(s, "separation", spec.separation);
  append_real(s, "noise", spec.noise_sigma);
  append_real(s, "gain_min", spec.gain_min);
  append_real(s, "gain_max", spec.gain_max);
  s += "seed=" + std::to_string(spec.seed) + ";";
  return fnv1a(s.data(), s.size());
}

SyntheticBundle generate_synthetic(const SyntheticSpec& spec) {
  validate_synthetic_spec(spec);
  const std::int64_t k = spec.num_classes;
  const std::int64_t n_total = k * spec.per_class;
  const std::int64_t hw = spec.image_size;
  const std::int64_t pixels = hw * hw;
  // A regular simplex with k vertices needs k coordinates with the scheme
  // below; widen the latent space silently when the default is too small.
  const std::int64_t latent = std::max(spec.latent_dim, k);

  Rng base(spec.seed);
  Rng render_rng = base.fork(10);
  Rng latent_rng = base.fork(11);
  Rng gain_rng = base.fork(12);
  Rng noise_a_rng = base.fork(13);
  Rng noise_b_rng = base.fork(14);
  Rng split_rng = base.fork(15);

  // Centered scaled simplex vertices: separation * (e_j - 1/k).
  std::vector<double> prototypes(static_cast<std::size_t>(k * latent), 0.0);
  for (std::int64_t j = 0; j < k; ++j)
    for (std::int64_t l = 0; l < latent; ++l)
      prototypes[static_cast<std::size_t>(j * latent + l)] =
          spec.separation * ((l == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(k));

  // One latent per instance, shared by both modalities.
  std::vector<std::int64_t> labels(static_cast<std::size_t>(n_total));
  std::vector<double> latents(static_cast<std::size_t>(n_total * latent));
  for (std::int64_t i = 0; i < n_total; ++i) {
    const std::int64_t y = i / spec.per_class;
    labels[static_cast<std::size_t>(i)] = y;
    for (std::int64_t l = 0; l < latent; ++l)
      latents[static_cast<std::size_t>(i * latent + l)] =
          prototypes[static_cast<std::size_t>(y * latent + l)] + latent_rng.normal();
  }

  // Fixed random linear render map, shared by both modalities.
  std::vector<double> render(static_cast<std::size_t>(pixels * latent));
  const double render_scale = 1.0 / std::sqrt(static_cast<double>(latent));
  for (auto& w : render) w = render_rng.normal() * render_scale;

  std::vector<double> gains(static_cast<std::size_t>(n_total));
  const double lg_lo = std::log(spec.gain_min), lg_hi = std::log(spec.gain_max);
  for (auto& g : gains) g = std::exp(gain_rng.uniform(lg_lo, lg_hi));

  Tensor images_a(Shape{n_total, 1, hw, hw}, DType::Float32);
  Tensor images_b(Shape{n_total, 1, hw, hw}, DType::Float32);
  {
    auto pa = images_a.data<float>();
    auto pb = images_b.data<float>();
    std::vector<double> u(static_cast<std::size_t>(pixels));
    for (std::int64_t i = 0; i < n_total; ++i) {
      for (std::int64_t p = 0; p < pixels; ++p) {
        double acc = 0.0;
        for (std::int64_t l = 0; l < latent; ++l)
          acc += render[static_cast<std::size_t>(p * latent + l)] *
                 latents[static_cast<std::size_t>(i * latent + l)];
        u[static_cast<std::size_t>(p)] = acc;
      }
      const double g = gains[static_cast<std::size_t>(i)];
      for (std::int64_t p = 0; p < pixels; ++p) {
        const double a = std::tanh(u[static_cast<std::size_t>(p)]) +
                         spec.noise_sigma * noise_a_rng.normal();
        pa[static_cast<std::size_t>(i * pixels + p)] = static_cast<float>(a);
      }
      for (std::int64_t p = 0; p < pixels; ++p) {
        const double b = signed_sqrt(g * u[static_cast<std::size_t>(p)]) +
                         spec.noise_sigma * noise_b_rng.normal();
        pb[static_cast<std::size_t>(i * pixels + p)] = static_cast<float>(b);
      }
    }
  }

  // Stratified 70/15/15 split with at least one instance per class in every
  // split; both modalities share the index lists so labels stay paired.
  std::vector<std::int64_t> train_rows, val_rows, test_rows;
  for (std::int64_t j = 0; j < k; ++j) {
    std::vector<std::int64_t> rows(static_cast<std::size_t>(spec.per_class));
    for (std::int64_t i = 0; i < spec.per_class; ++i) rows[static_cast<std::size_t>(i)] = j * spec.per_class + i;
    split_rng.shuffle(rows);
    const std::int64_t n_tr = std::max<std::int64_t>(1, (70 * spec.per_class) / 100);
    const std::int64_t n_va = std::max<std::int64_t>(1, (15 * spec.per_class) / 100);
    for (std::int64_t i = 0; i < spec.per_class; ++i) {
      if (i < n_tr)
        train_rows.push_back(rows[static_cast<std::size_t>(i)]);
      else if (i < n_tr + n_va)
        val_rows.push_back(rows[static_cast<std::size_t>(i)]);
      else
        test_rows.push_back(rows[static_cast<std::size_t>(i)]);
    }
  }

  auto slice = [&](const Tensor& images, const std::vector<std::int64_t>& rows,
                   const char* modality, const char* split) {
    Dataset ds;
    ds.images = gather_images(images, rows);
    ds.labels.reserve(rows.size());
    for (std::int64_t r : rows) ds.labels.push_back(labels[static_cast<std::size_t>(r)]);
    ds.num_classes = k;
    ds.modality = modality;
    ds.split = split;
    return ds;
  };

  SyntheticBundle bundle;
  bundle.a_train = slice(images_a, train_rows, "A", "train");
  bundle.a_val = slice(images_a, val_rows, "A", "val");
  bundle.a_test = slice(images_a, test_rows, "A", "test");
  bundle.b_train = slice(images_b, train_rows, "B", "train");
  bundle.b_val = slice(images_b, val_rows, "B", "val");
  bundle.b_test = slice(images_b, test_rows, "B", "test");
  return bundle;
}

namespace {

void check_chw(const Tensor& img, const char* op) {
  if (img.ndim() != 3)
    throw ShapeError(std::string(op) + ": expected [C,H,W], got " + shape_str(img.shape()));
}

}  // namespace

Tensor rotate90(const Tensor& img) {
  check_chw(img, "rotate90");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h != w) throw ShapeError("rotate90: requires square images, got " + shape_str(img.shape()));
  Tensor out(img.shape(), img.dtype());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out.set((ch * h + y) * w + x, img.at((ch * h + x) * w + (w - 1 - y)));
  return out;
}

Tensor horizontal_flip(const Tensor& img) {
  check_chw(img, "horizontal-flip");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape(), img.dtype());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out.set((ch * h + y) * w + x, img.at((ch * h + y) * w + (w - 1 - x)));
  return out;
}

Tensor translate(const Tensor& img, std::int64_t dx, std::int64_t dy) {
  check_chw(img, "translate");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::zeros(img.shape(), img.dtype());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y - dy, sx = x - dx;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        out.set((ch * h + y) * w + x, img.at((ch * h + sy) * w + sx));
      }
  return out;
}

Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng) {
  check_chw(img, "gaussian-noise");
  if (sigma < 0.0) throw ValueError("gaussian-noise: sigma must be >= 0");
  Tensor out(img.shape(), img.dtype());
  for (std::int64_t i = 0; i < img.numel(); ++i) out.set(i, img.at(i) + sigma * rng.normal());
  return out;
}

std::vector<Augment> parse_augment_policies(const std::string& csv) {
  std::vector<Augment> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    const std::string name = item.substr(first, last - first + 1);
    if (name == "rotate90")
      out.push_back(Augment::Rotate90);
    else if (name == "horizontal-flip")
      out.push_back(Augment::HorizontalFlip);
    else if (name == "translate")
      out.push_back(Augment::Translate);
    else if (name == "gaussian-noise")
      out.push_back(Augment::GaussianNoise);
    else
      throw ValueError("unknown augmentation policy '" + name + "'");
  }
  return out;
}

std::string augment_policy_name(Augment a) {
  switch (a) {
    case Augment::Rotate90: return "rotate90";
    case Augment::HorizontalFlip: return "horizontal-flip";
    case Augment::Translate: return "translate";
    case Augment::GaussianNoise: return "gaussian-noise";
  }
  return "?";
}

Tensor augment_view(const Tensor& img, const std::vector<Augment>& policies, double sigma,
                    Rng& rng) {
  check_chw(img, "augment");
  Tensor out = img;
  for (Augment a : policies) {
    switch (a) {
      case Augment::Rotate90: {
        const auto turns = rng.uniform_int(4);
        for (std::int64_t t = 0; t < static_cast<std::int64_t>(turns); ++t) out = rotate90(out);
        break;
      }
      case Augment::HorizontalFlip:
        if (rng.uniform() < 0.5) out = horizontal_flip(out);
        break;
      case Augment::Translate: {
        const auto dx = static_cast<std::int64_t>(rng.uniform_int(5)) - 2;
        const auto dy = static_cast<std::int64_t>(rng.uniform_int(5)) - 2;
        out = translate(out, dx, dy);
        break;
      }
      case Augment::GaussianNoise:
        out = add_gaussian_noise(out, sigma, rng);
        break;
    }
  }
  return out;
}

Tensor image_at(const Tensor& images, std::int64_t row) {
  if (images.ndim() != 4)
    throw ShapeError("image_at: expected [N,C,H,W], got " + shape_str(images.shape()));
  if (row < 0 || row >= images.dim(0))
    throw ValueError("image_at: row " + std::to_string(row) + " outside [0, " +
                     std::to_string(images.dim(0)) + ")");
  const std::int64_t per = images.dim(1) * images.dim(2) * images.dim(3);
  Tensor out(Shape{images.dim(1), images.dim(2), images.dim(3)}, images.dtype());
  for (std::int64_t i = 0; i < per; ++i) out.set(i, images.at(row * per + i));
  return out;
}

Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& rows) {
  if (images.ndim() != 4)
    throw ShapeError("gather_images: expected [N,C,H,W], got " + shape_str(images.shape()));
  const std::int64_t per = images.dim(1) * images.dim(2) * images.dim(3);
  Tensor out(Shape{static_cast<std::int64_t>(rows.size()), images.dim(1), images.dim(2),
                   images.dim(3)},
             images.dtype());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= images.dim(0))
      throw ValueError("gather_images: row " + std::to_string(rows[r]) + " outside [0, " +
                       std::to_string(images.dim(0)) + ")");
    for (std::int64_t i = 0; i < per; ++i)
      out.set(static_cast<std::int64_t>(r) * per + i, images.at(rows[r] * per + i));
  }
  return out;
}

Dataset subset_dataset(const Dataset& ds, const std::vector<std::int64_t>& rows) {
  Dataset out;
  out.images = gather_images(ds.images, rows);
  out.labels.reserve(rows.size());
  for (std::int64_t r : rows) {
    if (r < 0 || r >= ds.size())
      throw ValueError("subset_dataset: row " + std::to_string(r) + " outside [0, " +
                       std::to_string(ds.size()) + ")");
    out.labels.push_back(ds.labels[static_cast<std::size_t>(r)]);
  }
  out.num_classes = ds.num_classes;
  out.modality = ds.modality;
  out.split = ds.split;
  return out;
}

MultiviewedBatch make_multiviewed_batch(const Dataset& ds, const std::vector<std::int64_t>& rows,
                                        const std::vector<Augment>& policies, double sigma,
                                        Rng& rng) {
  if (rows.size() < 2)
    throw ValueError("multiviewed batch: need at least 2 rows, got " +
                     std::to_string(rows.size()));
  std::map<std::int64_t, std::int64_t> counts;
  for (std::int64_t r : rows) {
    if (r < 0 || r >= ds.size())
      throw ValueError("multiviewed batch: row " + std::to_string(r) + " outside [0, " +
                       std::to_string(ds.size()) + ")");
    ++counts[ds.labels[static_cast<std::size_t>(r)]];
  }
  for (const auto& [cls, count] : counts) {
    if (count < 2)
      throw ValueError("multiviewed batch: class " + std::to_string(cls) +
                       " appears only once; use class-complete sampling so every present class "
                       "has at least two examples");
  }

  const std::int64_t b = static_cast<std::int64_t>(rows.size());
  const std::int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  MultiviewedBatch out;
  out.images = Tensor(Shape{2 * b, c, h, w}, ds.images.dtype());
  const std::int64_t per = c * h * w;
  for (std::int64_t i = 0; i < b; ++i) {
    Tensor original = image_at(ds.images, rows[static_cast<std::size_t>(i)]);
    for (std::int64_t view = 0; view < 2; ++view) {
      Tensor v = augment_view(original, policies, sigma, rng);
      const std::int64_t dst = (2 * i + view) * per;
      for (std::int64_t p = 0; p < per; ++p) out.images.set(dst + p, v.at(p));
      out.labels.push_back(ds.labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])]);
      out.origin.push_back(rows[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

BatchSampler::BatchSampler(std::int64_t count, std::int64_t batch_size, Rng rng)
    : count_(count), batch_(std::min(batch_size, count)), rng_(rng) {
  if (count < 2) throw ValueError("batch sampler: need at least 2 rows, got " + std::to_string(count));
  if (batch_size < 2)
    throw ValueError("batch sampler: batch size must be >= 2, got " + std::to_string(batch_size));
  order_.resize(static_cast<std::size_t>(count_));
  for (std::int64_t i = 0; i < count_; ++i) order_[static_cast<std::size_t>(i)] = i;
  rng_.shuffle(order_);
  batches_per_epoch_ = std::max<std::int64_t>(1, count_ / batch_);
}

std::vector<std::int64_t> BatchSampler::next() {
  if (cursor_ + batch_ > count_) {
    rng_.shuffle(order_);
    cursor_ = 0;
  }
  std::vector<std::int64_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
  cursor_ += batch_;
  return out;
}

ClassCompleteSampler::ClassCompleteSampler(const std::vector<std::int64_t>& labels,
                                           std::int64_t num_classes, std::int64_t batch_size,
                                           Rng rng)
    : batch_(batch_size), rng_(rng) {
  if (num_classes < 1) throw ValueError("class-complete sampler: num_classes must be >= 1");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ValueError("class-complete sampler: batch size must be even and >= 2, got " +
                     std::to_string(batch_size));
  by_class_.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValueError("class-complete sampler: label " + std::to_string(labels[i]) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    by_class_[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }
  for (std::int64_t c = 0; c < num_classes; ++c)
    if (by_class_[static_cast<std::size_t>(c)].size() >= 2) usable_classes_.push_back(c);
  if (usable_classes_.empty())
    throw ValueError("class-complete sampler: no class has two examples to pair");
}

std::vector<std::int64_t> ClassCompleteSampler::next() {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch_));
  for (std::int64_t pair = 0; pair < batch_ / 2; ++pair) {
    const std::int64_t cls = usable_classes_[static_cast<std::size_t>(
        rng_.uniform_int(usable_classes_.size()))];
    const auto& pool = by_class_[static_cast<std::size_t>(cls)];
    const auto first = static_cast<std::size_t>(rng_.uniform_int(pool.size()));
    auto second = static_cast<std::size_t>(rng_.uniform_int(pool.size() - 1));
    if (second >= first) ++second;
    out.push_back(pool[first]);
    out.push_back(pool[second]);
  }
  return out;
}

LabeledSplit subsample_labeled(const Dataset& ds, std::int64_t n, Rng& rng) {
  const std::int64_t total = ds.size();
  const std::int64_t k = ds.num_classes;
  if (n > total)
    throw ValueError("labeled subsample: requested " + std::to_string(n) + " of " +
                     std::to_string(total) + " rows");
  LabeledSplit out;
  if (n == total) {  // full budget: keep everything labeled
    out.labeled.resize(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) out.labeled[static_cast<std::size_t>(i)] = i;
    return out;
  }
  if (n < k)
    throw ValueError("labeled subsample: cannot balance " + std::to_string(n) + " labels across " +
                     std::to_string(k) + " classes");

  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < total; ++i)
    by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

  // Quotas differ by at most one; the classes receiving the remainder are
  // chosen by a seeded shuffle.
  std::vector<std::int64_t> class_order(static_cast<std::size_t>(k));
  for (std::int64_t c = 0; c < k; ++c) class_order[static_cast<std::size_t>(c)] = c;
  rng.shuffle(class_order);
  std::vector<std::int64_t> quota(static_cast<std::size_t>(k), n / k);
  for (std::int64_t i = 0; i < n % k; ++i)
    ++quota[static_cast<std::size_t>(class_order[static_cast<std::size_t>(i)])];

  for (std::int64_t c = 0; c < k; ++c) {
    auto pool = by_class[static_cast<std::size_t>(c)];
    const std::int64_t q = quota[static_cast<std::size_t>(c)];
    if (q > static_cast<std::int64_t>(pool.size()))
      throw ValueError("labeled subsample: class " + std::to_string(c) + " has only " +
                       std::to_string(pool.size()) + " rows, quota is " + std::to_string(q));
    rng.shuffle(pool);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(pool.size()); ++i) {
      if (i < q)
        out.labeled.push_back(pool[static_cast<std::size_t>(i)]);
      else
        out.unlabeled.push_back(pool[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(out.labeled.begin(), out.labeled.end());
  std::sort(out.unlabeled.begin(), out.unlabeled.end());
  return out;
}

namespace {

void check_dataset(const Dataset& ds, const char* op) {
  if (ds.images.ndim() != 4)
    throw ValueError(std::string(op) + ": images must be [N,C,H,W], got " +
                     shape_str(ds.images.shape()));
  if (ds.images.dim(0) != ds.size())
    throw ValueError(std::string(op) + ": " + std::to_string(ds.size()) + " labels for " +
                     std::to_string(ds.images.dim(0)) + " images");
  if (ds.num_classes < 1) throw ValueError(std::string(op) + ": num_classes must be >= 1");
  for (std::int64_t y : ds.labels)
    if (y < 0 || y >= ds.num_classes)
      throw ValueError(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                       std::to_string(ds.num_classes) + ")");
  if (ds.modality != "A" && ds.modality != "B")
    throw ValueError(std::string(op) + ": modality must be A or B, got '" + ds.modality + "'");
  if (ds.split != "train" && ds.split != "val" && ds.split != "test")
    throw ValueError(std::string(op) + ": split must be train/val/test, got '" + ds.split + "'");
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds,
                  std::uint64_t spec_hash) {
  check_dataset(ds, "save_dataset");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("save_dataset: cannot create '" + dir.string() + "': " + ec.message());

  container::File images;
  images.add("images", container::from_tensor(ds.images));
  container::write_file(images, (dir / "images.tnsr").string());

  container::File labels;
  labels.add("labels", container::from_i64(ds.labels));
  container::write_file(labels, (dir / "labels.tnsr").string());

  char hash_hex[24];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(spec_hash));
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("save_dataset: cannot write manifest in '" + dir.string() + "'");
  manifest << "count=" << ds.size() << "\n"
           << "num_classes=" << ds.num_classes << "\n"
           << "image_size=" << ds.images.dim(2) << "\n"
           << "modality=" << ds.modality << "\n"
           << "split=" << ds.split << "\n"
           << "spec_hash=" << hash_hex << "\n";
  if (!manifest) throw IoError("save_dataset: manifest write failed in '" + dir.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = dir / "manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest)
    throw IoError("load_dataset: cannot open '" + manifest_path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("load_dataset: malformed manifest line '" + line + "' in '" +
                    manifest_path.string() + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw IoError("load_dataset: manifest '" + manifest_path.string() + "' is missing '" +
                    key + "'");
    return it->second;
  };
  auto need_int = [&](const char* key) {
    const std::string v = need(key);
    try {
      std::size_t used = 0;
      const std::int64_t n = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw IoError("load_dataset: manifest value '" + v + "' for '" + key +
                    "' is not an integer");
    }
  };

  Dataset ds;
  ds.num_classes = need_int("num_classes");
  ds.modality = need("modality");
  ds.split = need("split");
  const std::int64_t count = need_int("count");
  const std::int64_t image_size = need_int("image_size");
  (void)need("spec_hash");

  container::File images = container::read_file((dir / "images.tnsr").string());
  ds.images = container::to_tensor(images.get("images"));
  container::File labels = container::read_file((dir / "labels.tnsr").string());
  ds.labels = container::to_i64(labels.get("labels"));

  if (ds.images.ndim() != 4 || ds.images.dim(0) != count || ds.images.dim(2) != image_size ||
      ds.images.dim(3) != image_size)
    throw IoError("load_dataset: images in '" + dir.string() +
                  "' disagree with the manifest (shape " + shape_str(ds.images.shape()) + ")");
  if (static_cast<std::int64_t>(ds.labels.size()) != count)
    throw IoError("load_dataset: labels in '" + dir.string() +
                  "' disagree with the manifest (count " + std::to_string(ds.labels.size()) + ")");
  try {
    check_dataset(ds, "load_dataset");
  } catch (const ValueError& e) {
    throw IoError(std::string("load_dataset: ") + e.what());
  }
  return ds;
}

}  // namespace wassalign
