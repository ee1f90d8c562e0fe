#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "wassalign/common.hpp"
#include "wassalign/nn.hpp"

using namespace wassalign;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_config(NormKind norm) {
  EncoderConfig cfg;
  cfg.in_channels = 1;
  cfg.channels = {2, 3};
  cfg.kernel = 3;
  cfg.stride = 2;
  cfg.pad = 1;
  cfg.norm = norm;
  cfg.embed_dim = 4;
  return cfg;
}

Tensor randn(Shape shape, Rng& rng, DType dt = DType::Float64) {
  Tensor t(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
  return t;
}

bool networks_bit_equal(YNetwork& a, YNetwork& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name) return false;
    if (!pa[i]->value.bit_equal(pb[i]->value)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("encoder config validation tracks spatial collapse") {
  EncoderConfig cfg = tiny_config(NormKind::Instance);
  CHECK_NOTHROW(validate_encoder_config(cfg, 16, 16));
  CHECK_NOTHROW(validate_encoder_config(cfg, 8, 8));
  // 4x4 -> 2x2 -> 1x1: instance norm has nothing to standardize
  CHECK_THROWS_AS(validate_encoder_config(cfg, 4, 4), ValueError);
  EncoderConfig none = tiny_config(NormKind::None);
  CHECK_NOTHROW(validate_encoder_config(none, 4, 4));
  EncoderConfig bad = cfg;
  bad.channels.clear();
  CHECK_THROWS_AS(validate_encoder_config(bad, 16, 16), ValueError);
}

TEST_CASE("network construction is seed-deterministic") {
  EncoderConfig cfg = tiny_config(NormKind::Instance);
  YNetwork a = make_ynetwork(cfg, 3, DType::Float32, 42, false);
  YNetwork b = make_ynetwork(cfg, 3, DType::Float32, 42, false);
  CHECK(networks_bit_equal(a, b));
  YNetwork c = make_ynetwork(cfg, 3, DType::Float32, 43, false);
  CHECK(!networks_bit_equal(a, c));
  // untied: the two encoders start from different draws
  CHECK(!a.src_enc.stages[0].weight.value.bit_equal(a.tgt_enc.stages[0].weight.value));
  // tied: identical start
  YNetwork d = make_ynetwork(cfg, 3, DType::Float32, 42, true);
  CHECK(d.src_enc.stages[0].weight.value.bit_equal(d.tgt_enc.stages[0].weight.value));
  CHECK(d.src_enc.proj_w.value.bit_equal(d.tgt_enc.proj_w.value));
  // ...and the source side matches the untied network's source
  CHECK(d.src_enc.stages[0].weight.value.bit_equal(a.src_enc.stages[0].weight.value));
}

TEST_CASE("conv stages carry bias only when unnormalized") {
  EncoderConfig cfg = tiny_config(NormKind::None);
  YNetwork n = make_ynetwork(cfg, 2, DType::Float32, 1, false);
  CHECK(n.src_enc.stages[0].bias.has_value());
  CHECK(!n.src_enc.stages[0].norm_scale.has_value());
  EncoderConfig cfg2 = tiny_config(NormKind::Batch);
  YNetwork m = make_ynetwork(cfg2, 2, DType::Float32, 1, false);
  CHECK(!m.src_enc.stages[0].bias.has_value());
  CHECK(m.src_enc.stages[0].norm_scale.has_value());
  CHECK(m.src_enc.stages[0].bn.running_var.at(0) == 1.0);
}

TEST_CASE("forward shapes for every norm kind") {
  Rng rng(5);
  Tensor x = randn({4, 1, 16, 16}, rng);
  for (NormKind norm : {NormKind::None, NormKind::Batch, NormKind::Instance}) {
    EncoderConfig cfg = tiny_config(norm);
    YNetwork net = make_ynetwork(cfg, 5, DType::Float64, 9, false);
    for (bool train : {true, false}) {
      Tape t;
      Var z = encoder_forward(t, net.src_enc, t.leaf(x), train);
      REQUIRE(z.shape() == Shape{4, 4});
      Var logits = classifier_forward(t, net.head, z);
      REQUIRE(logits.shape() == Shape{4, 5});
      CHECK(logits.val().all_finite());
    }
  }
}

TEST_CASE("encoder rejects wrong input channel count") {
  EncoderConfig cfg = tiny_config(NormKind::Instance);
  YNetwork net = make_ynetwork(cfg, 2, DType::Float64, 9, false);
  Tape t;
  Var x = t.leaf(Tensor::zeros({2, 3, 16, 16}, DType::Float64));
  CHECK_THROWS_AS(encoder_forward(t, net.src_enc, x, true), ShapeError);
}

TEST_CASE("batch-norm eval output is independent of batch composition") {
  EncoderConfig cfg = tiny_config(NormKind::Batch);
  YNetwork net = make_ynetwork(cfg, 2, DType::Float64, 17, false);
  Rng rng(18);
  // accumulate some running stats
  for (int step = 0; step < 3; ++step) {
    Tape t;
    Tensor xb = randn({6, 1, 8, 8}, rng);
    encoder_forward(t, net.src_enc, t.leaf(xb), true);
  }
  Tensor batch = randn({5, 1, 8, 8}, rng);
  Tape t_all;
  Var z_all = encoder_forward(t_all, net.src_enc, t_all.leaf(batch), false);
  for (int64_t i = 0; i < 5; ++i) {
    Tensor one = Tensor::zeros({1, 1, 8, 8}, DType::Float64);
    for (int64_t j = 0; j < 64; ++j) one.set(j, batch.at(i * 64 + j));
    Tape t_one;
    Var z_one = encoder_forward(t_one, net.src_enc, t_one.leaf(one), false);
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(z_one.val().at(j) == z_all.val().at(i * 4 + j));  // bitwise
    }
  }
}

TEST_CASE("whole-network gradients pass finite differences") {
  Rng rng(23);
  Tensor x = randn({3, 1, 8, 8}, rng);
  Tensor target = randn({3, 2}, rng);
  for (NormKind norm : {NormKind::None, NormKind::Instance, NormKind::Batch}) {
    CAPTURE(norm_name(norm));
    EncoderConfig cfg = tiny_config(norm);
    YNetwork net = make_ynetwork(cfg, 2, DType::Float64, 31, false);
    auto loss = [&](Tape& t) {
      Var z = encoder_forward(t, net.src_enc, t.leaf(x), true);
      Var logits = classifier_forward(t, net.head, z);
      return t.mean(t.square(t.sub(logits, t.leaf(target))));
    };
    net.zero_grad();
    {
      Tape t;
      t.backward(loss(t));
    }
    const double h = 1e-6;
    std::vector<Parameter*> params = net.src_enc.parameters();
    for (Parameter* p : net.head.parameters()) params.push_back(p);
    for (Parameter* p : params) {
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        double orig = p->value.at(i);
        p->value.set(i, orig + h);
        Tape tu;
        double up = loss(tu).item();
        p->value.set(i, orig - h);
        Tape td;
        double down = loss(td).item();
        p->value.set(i, orig);
        double fd = (up - down) / (2 * h);
        CHECK(p->grad.at(i) == doctest::Approx(fd).epsilon(2e-4));
      }
    }
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  fs::path dir = fs::temp_directory_path() / "wassalign_nn_tests";
  fs::create_directories(dir);
  EncoderConfig cfg = tiny_config(NormKind::Batch);
  cfg.bn_momentum = 0.25;
  YNetwork net = make_ynetwork(cfg, 4, DType::Float32, 77, false);
  // make the running stats non-trivial before saving
  Rng rng(78);
  for (int step = 0; step < 2; ++step) {
    Tape t;
    Tensor xb = randn({4, 1, 8, 8}, rng, DType::Float32);
    encoder_forward(t, net.src_enc, t.leaf(xb), true);
    encoder_forward(t, net.tgt_enc, t.leaf(xb), true);
  }
  std::string path = (dir / "net.tnsr").string();
  save_network(net, path);
  YNetwork loaded = load_network(path);
  CHECK(loaded.num_classes == 4);
  CHECK(loaded.src_enc.cfg == cfg);
  CHECK(networks_bit_equal(net, loaded));
  for (size_t s = 0; s < net.src_enc.stages.size(); ++s) {
    CHECK(net.src_enc.stages[s].bn.running_mean.bit_equal(
        loaded.src_enc.stages[s].bn.running_mean));
    CHECK(net.tgt_enc.stages[s].bn.running_var.bit_equal(
        loaded.tgt_enc.stages[s].bn.running_var));
    CHECK(loaded.src_enc.stages[s].bn.momentum == 0.25);
  }
  // saving the loaded network reproduces the file byte-for-byte
  std::string path2 = (dir / "net2.tnsr").string();
  save_network(loaded, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
}

TEST_CASE("copy_encoder_params overwrites values and stats") {
  EncoderConfig cfg = tiny_config(NormKind::Batch);
  YNetwork net = make_ynetwork(cfg, 2, DType::Float32, 3, false);
  REQUIRE(!net.src_enc.stages[0].weight.value.bit_equal(net.tgt_enc.stages[0].weight.value));
  net.src_enc.stages[0].bn.running_mean.set(0, 0.5);
  copy_encoder_params(net.src_enc, net.tgt_enc);
  CHECK(net.src_enc.stages[0].weight.value.bit_equal(net.tgt_enc.stages[0].weight.value));
  CHECK(net.tgt_enc.stages[0].bn.running_mean.at(0) == 0.5);
  CHECK(net.src_enc.proj_w.value.bit_equal(net.tgt_enc.proj_w.value));
}
