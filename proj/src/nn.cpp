#include "wassalign/nn.hpp"

#include <cmath>

#include "wassalign/container.hpp"

namespace wassalign {

const char* norm_name(NormKind k) {
  switch (k) {
    case NormKind::None: return "none";
    case NormKind::Batch: return "batch";
    case NormKind::Instance: return "instance";
  }
  return "?";
}

NormKind norm_from_string(const std::string& s) {
  if (s == "none") return NormKind::None;
  if (s == "batch") return NormKind::Batch;
  if (s == "instance") return NormKind::Instance;
  throw ValueError("unknown norm kind '" + s + "' (expected none|batch|instance)");
}

void validate_encoder_config(const EncoderConfig& cfg, int64_t h, int64_t w) {
  if (cfg.in_channels < 1) throw ValueError("encoder: in_channels must be >= 1");
  if (cfg.channels.empty()) throw ValueError("encoder: need at least one conv stage");
  if (cfg.kernel < 1 || cfg.stride < 1 || cfg.pad < 0)
    throw ValueError("encoder: kernel/stride must be >= 1 and pad >= 0");
  if (cfg.embed_dim < 2) throw ValueError("encoder: embed_dim must be >= 2");
  for (size_t s = 0; s < cfg.channels.size(); ++s) {
    if (cfg.channels[s] < 1) throw ValueError("encoder: stage width must be >= 1");
    if (h + 2 * cfg.pad < cfg.kernel || w + 2 * cfg.pad < cfg.kernel)
      throw ValueError("encoder: stage " + std::to_string(s) + " input " + std::to_string(h) +
                       "x" + std::to_string(w) + " smaller than kernel");
    h = (h + 2 * cfg.pad - cfg.kernel) / cfg.stride + 1;
    w = (w + 2 * cfg.pad - cfg.kernel) / cfg.stride + 1;
    if (h < 1 || w < 1)
      throw ValueError("encoder: stage " + std::to_string(s) + " output collapsed to zero");
    if (cfg.norm == NormKind::Instance && h * w < 2)
      throw ValueError("encoder: stage " + std::to_string(s) + " output " + std::to_string(h) +
                       "x" + std::to_string(w) +
                       " leaves instance norm without statistics (need H*W >= 2)");
  }
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, DType dt, Rng& rng) {
  Tensor t(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
  return t;
}

}  // namespace

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out;
  for (auto& st : stages) {
    out.push_back(&st.weight);
    if (st.bias) out.push_back(&*st.bias);
    if (st.norm_scale) out.push_back(&*st.norm_scale);
    if (st.norm_shift) out.push_back(&*st.norm_shift);
  }
  out.push_back(&proj_w);
  out.push_back(&proj_b);
  return out;
}

void Encoder::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::vector<Parameter*> Classifier::parameters() { return {&w, &b}; }

void Classifier::zero_grad() {
  w.zero_grad();
  b.zero_grad();
}

std::vector<Parameter*> YNetwork::parameters() {
  std::vector<Parameter*> out = src_enc.parameters();
  for (Parameter* p : tgt_enc.parameters()) out.push_back(p);
  for (Parameter* p : head.parameters()) out.push_back(p);
  return out;
}

void YNetwork::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Encoder make_encoder(const EncoderConfig& cfg, const std::string& prefix, DType dt, Rng& rng) {
  Encoder enc;
  enc.cfg = cfg;
  enc.prefix = prefix;
  int64_t ci = cfg.in_channels;
  for (size_t s = 0; s < cfg.channels.size(); ++s) {
    int64_t co = cfg.channels[s];
    ConvStage stage;
    double fan_in = static_cast<double>(ci * cfg.kernel * cfg.kernel);
    double bound = std::sqrt(6.0 / fan_in);
    std::string base = prefix + ".stage" + std::to_string(s);
    stage.weight =
        Parameter(base + ".weight", uniform_tensor({co, ci, cfg.kernel, cfg.kernel}, bound, dt, rng));
    if (cfg.norm == NormKind::None) {
      stage.bias = Parameter(base + ".bias", Tensor::zeros({co}, dt));
    } else {
      stage.norm_scale = Parameter(base + ".scale", Tensor::full({co}, 1.0, dt));
      stage.norm_shift = Parameter(base + ".shift", Tensor::zeros({co}, dt));
      if (cfg.norm == NormKind::Batch)
        stage.bn = BatchNormState(co, cfg.bn_momentum, cfg.eps);
    }
    enc.stages.push_back(std::move(stage));
    ci = co;
  }
  double bound = std::sqrt(6.0 / static_cast<double>(ci));
  enc.proj_w = Parameter(prefix + ".proj_w", uniform_tensor({ci, cfg.embed_dim}, bound, dt, rng));
  enc.proj_b = Parameter(prefix + ".proj_b", Tensor::zeros({cfg.embed_dim}, dt));
  return enc;
}

Classifier make_classifier(int64_t embed_dim, int64_t classes, DType dt, Rng& rng) {
  if (classes < 2) throw ValueError("classifier: need at least two classes");
  Classifier clf;
  double bound = std::sqrt(6.0 / static_cast<double>(embed_dim));
  clf.w = Parameter("head.w", uniform_tensor({embed_dim, classes}, bound, dt, rng));
  clf.b = Parameter("head.b", Tensor::zeros({classes}, dt));
  return clf;
}

YNetwork make_ynetwork(const EncoderConfig& cfg, int64_t classes, DType dt, uint64_t seed,
                       bool tied_init) {
  Rng base(seed);
  Rng rs = base.fork(1);
  Rng rt = base.fork(2);
  Rng rh = base.fork(3);
  YNetwork net;
  net.src_enc = make_encoder(cfg, "src_enc", dt, rs);
  net.tgt_enc = make_encoder(cfg, "tgt_enc", dt, rt);
  if (tied_init) copy_encoder_params(net.src_enc, net.tgt_enc);
  net.head = make_classifier(cfg.embed_dim, classes, dt, rh);
  net.num_classes = classes;
  return net;
}

void copy_encoder_params(const Encoder& from, Encoder& to) {
  if (from.cfg != to.cfg)
    throw ValueError("copy_encoder_params: encoder configurations differ");
  for (size_t s = 0; s < from.stages.size(); ++s) {
    const ConvStage& a = from.stages[s];
    ConvStage& b = to.stages[s];
    b.weight.value = a.weight.value;
    b.weight.zero_grad();
    if (a.bias) {
      b.bias->value = a.bias->value;
      b.bias->zero_grad();
    }
    if (a.norm_scale) {
      b.norm_scale->value = a.norm_scale->value;
      b.norm_shift->value = a.norm_shift->value;
      b.norm_scale->zero_grad();
      b.norm_shift->zero_grad();
    }
    b.bn.running_mean = a.bn.running_mean;
    b.bn.running_var = a.bn.running_var;
    b.bn.momentum = a.bn.momentum;
    b.bn.eps = a.bn.eps;
  }
  to.proj_w.value = from.proj_w.value;
  to.proj_b.value = from.proj_b.value;
  to.proj_w.zero_grad();
  to.proj_b.zero_grad();
}

Var encoder_forward(Tape& t, Encoder& enc, Var x, bool train) {
  const Shape& in_shape = x.shape();
  if (in_shape.size() != 4 || in_shape[1] != enc.cfg.in_channels)
    throw ShapeError("encoder: expected input [N," + std::to_string(enc.cfg.in_channels) +
                     ",H,W], got " + shape_str(in_shape));
  for (auto& stage : enc.stages) {
    Var w = t.param(stage.weight);
    std::optional<Var> bias;
    if (stage.bias) bias = t.param(*stage.bias);
    x = t.conv2d(x, w, bias, enc.cfg.stride, enc.cfg.pad);
    if (enc.cfg.norm != NormKind::None) {
      Var sc = t.param(*stage.norm_scale);
      Var sh = t.param(*stage.norm_shift);
      if (enc.cfg.norm == NormKind::Batch)
        x = train ? t.batch_norm_train(x, sc, sh, stage.bn)
                  : t.batch_norm_eval(x, sc, sh, stage.bn);
      else
        x = t.instance_norm(x, sc, sh, enc.cfg.eps);
    }
    x = t.relu(x);
  }
  // Global average pool, then a dense projection to the embedding.
  const Shape& s = x.shape();
  x = t.reshape(x, {s[0], s[1], s[2] * s[3]});
  x = t.mean_last(x);
  x = t.matmul(x, t.param(enc.proj_w));
  x = t.add(x, t.param(enc.proj_b));
  return x;
}

Var classifier_forward(Tape& t, Classifier& clf, Var z) {
  Var logits = t.matmul(z, t.param(clf.w));
  return t.add(logits, t.param(clf.b));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_network(const YNetwork& net, const std::string& path) {
  container::File f;
  const EncoderConfig& cfg = net.src_enc.cfg;
  std::vector<int64_t> ints = {cfg.in_channels,
                               cfg.kernel,
                               cfg.stride,
                               cfg.pad,
                               static_cast<int64_t>(cfg.norm),
                               cfg.embed_dim,
                               net.num_classes,
                               static_cast<int64_t>(net.src_enc.stages.front().weight.value.dtype())};
  for (int64_t c : cfg.channels) ints.push_back(c);
  f.add("meta/config", container::from_i64(ints));
  f.add("meta/config_real",
        container::from_tensor(Tensor::from(std::vector<double>{cfg.bn_momentum, cfg.eps}, {2})));
  auto add_encoder = [&f](const Encoder& enc) {
    for (const Parameter* p : const_cast<Encoder&>(enc).parameters())
      f.add(p->name, container::from_tensor(p->value));
    if (enc.cfg.norm == NormKind::Batch) {
      for (size_t s = 0; s < enc.stages.size(); ++s) {
        std::string base = enc.prefix + ".stage" + std::to_string(s);
        f.add(base + ".running_mean", container::from_tensor(enc.stages[s].bn.running_mean));
        f.add(base + ".running_var", container::from_tensor(enc.stages[s].bn.running_var));
      }
    }
  };
  add_encoder(net.src_enc);
  add_encoder(net.tgt_enc);
  f.add(net.head.w.name, container::from_tensor(net.head.w.value));
  f.add(net.head.b.name, container::from_tensor(net.head.b.value));
  container::write_file(f, path);
}

YNetwork load_network(const std::string& path) {
  container::File f = container::read_file(path);
  std::vector<int64_t> ints = container::to_i64(f.get("meta/config"));
  if (ints.size() < 9) throw IoError("checkpoint: config entry too short in '" + path + "'");
  Tensor real = container::to_tensor(f.get("meta/config_real"));
  EncoderConfig cfg;
  cfg.in_channels = ints[0];
  cfg.kernel = ints[1];
  cfg.stride = ints[2];
  cfg.pad = ints[3];
  cfg.norm = static_cast<NormKind>(ints[4]);
  cfg.embed_dim = ints[5];
  int64_t classes = ints[6];
  DType dt = static_cast<DType>(ints[7]);
  cfg.channels.assign(ints.begin() + 8, ints.end());
  cfg.bn_momentum = real.at(0);
  cfg.eps = real.at(1);
  YNetwork net = make_ynetwork(cfg, classes, dt, 0, false);
  for (Parameter* p : net.parameters()) {
    Tensor v = container::to_tensor(f.get(p->name));
    if (v.shape() != p->value.shape() || v.dtype() != p->value.dtype())
      throw IoError("checkpoint: entry '" + p->name + "' has shape " + shape_str(v.shape()) +
                    ", expected " + shape_str(p->value.shape()));
    p->value = std::move(v);
    p->zero_grad();
  }
  if (cfg.norm == NormKind::Batch) {
    for (Encoder* enc : {&net.src_enc, &net.tgt_enc}) {
      for (size_t s = 0; s < enc->stages.size(); ++s) {
        std::string base = enc->prefix + ".stage" + std::to_string(s);
        enc->stages[s].bn.running_mean = container::to_tensor(f.get(base + ".running_mean"));
        enc->stages[s].bn.running_var = container::to_tensor(f.get(base + ".running_var"));
      }
    }
  }
  return net;
}

}  // namespace wassalign
