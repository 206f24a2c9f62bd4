#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundus/common.hpp"
#include "fundus/tensor.hpp"
#include "fundus/weights.hpp"

namespace fundus::model {

// Two-stage enhancement network with a retinal-structure-preservation (RSP)
// segmentation branch. Stage 1 is a UNet over channel-attention blocks whose
// decoder ends in a supervised attention module; stage 2 refines at full
// resolution through fundus attention blocks fed by stage-1 and RSP features.
struct ModelConfig {
  int base_channels = 16;
  int encoder_levels = 4;  // fixed: matches the 4 segmentation scales
  int cabs_per_level = 2;
  int num_fabs = 3;
  int reduction = 8;
  int seg_classes = 1;
  bool multi_patch = true;
  // Ablation switches: stage 1 alone, stage 1+2, or the full model.
  bool use_stage2 = true;
  bool use_rsp = true;

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// One forward pass. Scale-indexed arrays run fine-to-coarse: index v holds the
// H/2^v scale, so [0] is full resolution and [3] the bottleneck.
template <typename T>
struct ModelOutput {
  std::vector<ad::Tensor<T>> enhanced;      // stage outputs, (1,3,H,W); last is final
  std::vector<ad::Tensor<T>> seg_native;    // sigmoid maps at their native scales
  std::vector<ad::Tensor<T>> seg_maps;      // the same maps upsampled to H x W
  std::vector<ad::Tensor<T>> rsp_features;  // RSP decoder features per scale
  ad::Tensor<T> sam_features;               // attention-gated stage-1 features
};

// Declared parameter layout for a config: (name, shape) in canonical order.
std::vector<std::pair<std::string, ad::Shape>> declare_params(const ModelConfig& cfg);

// Fan-in-scaled normal init for conv kernels, zero biases. Every parameter
// draws from its own stream keyed by (seed, "init", name), so the values of
// one layer never depend on which other layers exist.
WeightSet<float> init_model(const ModelConfig& cfg, std::uint64_t seed);

// Lazily places parameters on a tape as leaves, one leaf per name, so the
// caller can read per-parameter gradients back after a backward pass.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(ad::Tape<T>& tape, const WeightSet<T>& ws) : tape_(&tape), ws_(&ws) {}

  ad::Tensor<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& e = ws_->at(name);
    ad::Tensor<T> t = tape_->leaf(e.shape, e.v.data());
    bound_.emplace(name, t);
    return t;
  }

  const std::map<std::string, ad::Tensor<T>>& bound() const { return bound_; }

 private:
  ad::Tape<T>* tape_;
  const WeightSet<T>* ws_;
  std::map<std::string, ad::Tensor<T>> bound_;
};

template <typename T>
struct Stage1Output {
  std::array<ad::Tensor<T>, 4> encoder;  // fine-to-coarse
  std::array<ad::Tensor<T>, 4> decoder;
  ad::Tensor<T> enhanced;  // unclipped img + residual
  ad::Tensor<T> gated;
};

template <typename T>
struct RspOutput {
  std::array<ad::Tensor<T>, 4> seg_native;
  std::array<ad::Tensor<T>, 4> seg_maps;
  std::array<ad::Tensor<T>, 4> features;
};

// Residual conv block gated by squeeze-excite channel attention.
template <typename T>
ad::Tensor<T> cab_forward(const ad::Tensor<T>& x, ParamBinder<T>& p, const std::string& prefix);

// Produces the stage-1 enhanced image and attention-gated features.
template <typename T>
ad::Tensor<T> sam_forward(const ad::Tensor<T>& feats, const ad::Tensor<T>& img, ParamBinder<T>& p,
                          ad::Tensor<T>* enhanced_out);

template <typename T>
Stage1Output<T> stage1_forward(const ad::Tensor<T>& img, ParamBinder<T>& p,
                               const ModelConfig& cfg);

template <typename T>
RspOutput<T> rsp_forward(const ad::Tensor<T>& img, ParamBinder<T>& p, const ModelConfig& cfg);

// Full-resolution block: CAB stack, plus projected/resized stage-1 context,
// plus the RSP feature of its wired scale, fused back to base width.
template <typename T>
ad::Tensor<T> fab_forward(const ad::Tensor<T>& x, const Stage1Output<T>& s1,
                          const ad::Tensor<T>* rsp_feature, int scale, ParamBinder<T>& p,
                          const std::string& prefix, const ModelConfig& cfg);

template <typename T>
ad::Tensor<T> stage2_forward(const ad::Tensor<T>& img, const Stage1Output<T>& s1,
                             const RspOutput<T>* rsp, ParamBinder<T>& p, const ModelConfig& cfg);

// Composes RSP, stage 1 and stage 2 per the config. `binder_out`, when given,
// receives the name -> leaf bindings for gradient readout.
template <typename T>
ModelOutput<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& img, const WeightSet<T>& ws,
                       const ModelConfig& cfg,
                       std::map<std::string, ad::Tensor<T>>* binder_out = nullptr);

}  // namespace fundus::model
