#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wassalign/common.hpp"
#include "wassalign/tape.hpp"
#include "wassalign/tensor.hpp"

namespace wassalign {

enum class NormKind : uint8_t { None = 0, Batch = 1, Instance = 2 };

const char* norm_name(NormKind k);
NormKind norm_from_string(const std::string& s);

// Running statistics for one batch-norm layer. Kept in float64 so the
// running-average update is dtype-independent; eval mode casts to the
// activation dtype.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  BatchNormState(int64_t channels, double momentum_, double eps_)
      : running_mean(Tensor::zeros({channels}, DType::Float64)),
        running_var(Tensor::full({channels}, 1.0, DType::Float64)),
        momentum(momentum_),
        eps(eps_) {}
};

struct EncoderConfig {
  int64_t in_channels = 1;
  std::vector<int64_t> channels = {16, 32, 64};
  int64_t kernel = 3;
  int64_t stride = 2;
  int64_t pad = 1;
  NormKind norm = NormKind::Instance;
  int64_t embed_dim = 64;
  double bn_momentum = 0.1;
  double eps = 1e-5;

  bool operator==(const EncoderConfig&) const = default;
};

// Throws if the stage geometry collapses below what the norm layer can
// standardize (instance norm needs at least two spatial positions).
void validate_encoder_config(const EncoderConfig& cfg, int64_t h, int64_t w);

// One conv stage: conv (+bias only when unnormalized) -> norm -> relu.
struct ConvStage {
  Parameter weight;                       // [Co, Ci, kh, kw]
  std::optional<Parameter> bias;          // only when norm == None
  std::optional<Parameter> norm_scale;    // [Co]
  std::optional<Parameter> norm_shift;    // [Co]
  BatchNormState bn;                      // used when norm == Batch
};

struct Encoder {
  EncoderConfig cfg;
  std::string prefix;
  std::vector<ConvStage> stages;
  Parameter proj_w;  // [C_last, embed_dim]
  Parameter proj_b;  // [embed_dim]

  std::vector<Parameter*> parameters();
  void zero_grad();
};

// One dense layer from embeddings to class logits.
struct Classifier {
  Parameter w;  // [embed_dim, classes]
  Parameter b;  // [classes]

  std::vector<Parameter*> parameters();
  void zero_grad();
};

// Two identically-shaped per-modality encoders feeding one shared
// classifier head.
struct YNetwork {
  Encoder src_enc;
  Encoder tgt_enc;
  Classifier head;
  int64_t num_classes = 0;

  std::vector<Parameter*> parameters();
  void zero_grad();
};

Encoder make_encoder(const EncoderConfig& cfg, const std::string& prefix, DType dt, Rng& rng);
Classifier make_classifier(int64_t embed_dim, int64_t classes, DType dt, Rng& rng);

// tied_init: the target encoder starts as a copy of the source encoder
// instead of an independent draw.
YNetwork make_ynetwork(const EncoderConfig& cfg, int64_t classes, DType dt, uint64_t seed,
                       bool tied_init);

// Overwrite `to`'s parameter values (and running stats) with `from`'s.
// Shapes must agree; gradients are zeroed.
void copy_encoder_params(const Encoder& from, Encoder& to);

// x [N, Cin, H, W] -> embeddings [N, embed_dim].
Var encoder_forward(Tape& t, Encoder& enc, Var x, bool train);

// z [N, embed_dim] -> logits [N, classes].
Var classifier_forward(Tape& t, Classifier& clf, Var z);

// Checkpoint I/O: every parameter tensor plus norm running statistics
// and enough config to rebuild the network. Round-trips bit-exactly.
void save_network(const YNetwork& net, const std::string& path);
YNetwork load_network(const std::string& path);

}  // namespace wassalign
