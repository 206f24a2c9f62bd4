#include "fundus/model.hpp"

#include <cmath>
#include <utility>

#include "fundus/rng.hpp"

namespace fundus::model {

void ModelConfig::validate() const {
  if (base_channels < 4) throw ParamError("base_channels must be >= 4");
  if (encoder_levels != 4) throw ParamError("encoder_levels is fixed at 4");
  if (cabs_per_level < 1) throw ParamError("cabs_per_level must be >= 1");
  if (num_fabs < 1) throw ParamError("num_fabs must be >= 1");
  if (reduction < 1) throw ParamError("reduction must be >= 1");
  if (seg_classes < 1) throw ParamError("seg_classes must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"base_channels", base_channels}, {"encoder_levels", encoder_levels},
                        {"cabs_per_level", cabs_per_level}, {"num_fabs", num_fabs},
                        {"reduction", reduction},           {"seg_classes", seg_classes},
                        {"multi_patch", multi_patch},       {"use_stage2", use_stage2},
                        {"use_rsp", use_rsp}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.encoder_levels = j.value("encoder_levels", c.encoder_levels);
  c.cabs_per_level = j.value("cabs_per_level", c.cabs_per_level);
  c.num_fabs = j.value("num_fabs", c.num_fabs);
  c.reduction = j.value("reduction", c.reduction);
  c.seg_classes = j.value("seg_classes", c.seg_classes);
  c.multi_patch = j.value("multi_patch", c.multi_patch);
  c.use_stage2 = j.value("use_stage2", c.use_stage2);
  c.use_rsp = j.value("use_rsp", c.use_rsp);
  c.validate();
  return c;
}

namespace {

using NameShape = std::pair<std::string, ad::Shape>;

void conv_def(std::vector<NameShape>& d, const std::string& name, int oc, int ic, int k) {
  d.emplace_back(name + ".w", ad::Shape{oc, ic, k, k});
  d.emplace_back(name + ".b", ad::Shape{1, oc, 1, 1});
}

void cab_defs(std::vector<NameShape>& d, const std::string& prefix, int c, int reduction) {
  const int cr = std::max(1, c / reduction);
  conv_def(d, prefix + ".conv1", c, c, 3);
  conv_def(d, prefix + ".conv2", c, c, 3);
  conv_def(d, prefix + ".fc1", cr, c, 1);
  conv_def(d, prefix + ".fc2", c, cr, 1);
}

void unet_defs(std::vector<NameShape>& d, const std::string& prefix, const ModelConfig& cfg) {
  conv_def(d, prefix + ".head", cfg.base_channels, 3, 3);
  for (int l = 0; l < cfg.encoder_levels; ++l) {
    if (l > 0) {
      conv_def(d, prefix + ".down" + std::to_string(l - 1), cfg.channels_at(l),
               cfg.channels_at(l - 1), 3);
    }
    for (int k = 0; k < cfg.cabs_per_level; ++k) {
      cab_defs(d, prefix + ".enc" + std::to_string(l) + ".cab" + std::to_string(k),
               cfg.channels_at(l), cfg.reduction);
    }
  }
  for (int l = cfg.encoder_levels - 2; l >= 0; --l) {
    conv_def(d, prefix + ".up" + std::to_string(l), cfg.channels_at(l), cfg.channels_at(l + 1), 3);
    for (int k = 0; k < cfg.cabs_per_level; ++k) {
      cab_defs(d, prefix + ".dec" + std::to_string(l) + ".cab" + std::to_string(k),
               cfg.channels_at(l), cfg.reduction);
    }
  }
}

int fab_scale(const ModelConfig& cfg, int k) {
  return std::max(0, cfg.encoder_levels - 1 - k);  // coarsest scale first
}

}  // namespace

std::vector<NameShape> declare_params(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<NameShape> d;
  unet_defs(d, "stage1", cfg);
  conv_def(d, "stage1.sam.res", 3, cfg.base_channels, 3);
  conv_def(d, "stage1.sam.att", cfg.base_channels, 3, 3);
  if (cfg.use_rsp) {
    unet_defs(d, "rsp", cfg);
    for (int v = 0; v < 4; ++v) {
      conv_def(d, "rsp.seghead" + std::to_string(v + 1), cfg.seg_classes, cfg.channels_at(v), 1);
    }
  }
  if (cfg.use_stage2) {
    const int b = cfg.base_channels;
    conv_def(d, "stage2.head", b, 3, 3);
    cab_defs(d, "stage2.headcab", b, cfg.reduction);
    if (cfg.multi_patch) {
      conv_def(d, "stage2.patch.head", b, 3, 3);
      cab_defs(d, "stage2.patch.cab", b, cfg.reduction);
    }
    conv_def(d, "stage2.merge", b, 2 * b, 1);
    for (int k = 0; k < cfg.num_fabs; ++k) {
      const std::string prefix = "stage2.fab" + std::to_string(k);
      for (int j = 0; j < cfg.cabs_per_level; ++j) {
        cab_defs(d, prefix + ".cab" + std::to_string(j), b, cfg.reduction);
      }
      const int cs = cfg.channels_at(fab_scale(cfg, k));
      conv_def(d, prefix + ".encproj", b, cs, 1);
      conv_def(d, prefix + ".decproj", b, cs, 1);
      conv_def(d, prefix + ".fuse", b, cfg.use_rsp ? b + cs : b, 1);
    }
    conv_def(d, "stage2.final", 3, b, 3);
  }
  return d;
}

WeightSet<float> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  WeightSet<float> ws;
  for (const auto& [name, shape] : declare_params(cfg)) {
    std::vector<float> v(shape.size(), 0.0f);
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
      Rng rng(Rng::derive(seed, {Rng::key("init"), Rng::key(name)}));
      double stddev = std::sqrt(2.0 / (static_cast<double>(shape.c) * shape.h * shape.w));
      // The network carries no normalization layers, so the residual-emitting
      // convs start damped: both stages then open near the identity mapping
      // instead of spending early steps recovering the image range.
      if (name == "stage1.sam.res.w" || name == "stage2.final.w") stddev *= 0.02;
      for (float& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
    }
    ws.add(name, shape, std::move(v));
  }
  return ws;
}

template <typename T>
ad::Tensor<T> cab_forward(const ad::Tensor<T>& x, ParamBinder<T>& p, const std::string& prefix) {
  using namespace ad;
  Tensor<T> a = relu(conv2d(x, p(prefix + ".conv1.w"), p(prefix + ".conv1.b"), 1, 1));
  a = conv2d(a, p(prefix + ".conv2.w"), p(prefix + ".conv2.b"), 1, 1);
  Tensor<T> g = global_avg_pool(a);
  g = relu(conv2d(g, p(prefix + ".fc1.w"), p(prefix + ".fc1.b"), 1, 0));
  g = sigmoid(conv2d(g, p(prefix + ".fc2.w"), p(prefix + ".fc2.b"), 1, 0));
  return add(x, scale_channels(a, g));
}

template <typename T>
ad::Tensor<T> sam_forward(const ad::Tensor<T>& feats, const ad::Tensor<T>& img, ParamBinder<T>& p,
                          ad::Tensor<T>* enhanced_out) {
  using namespace ad;
  Tensor<T> res = conv2d(feats, p("stage1.sam.res.w"), p("stage1.sam.res.b"), 1, 1);
  Tensor<T> enhanced = add(img, res);  // unclipped; clipping happens at serialization
  if (enhanced_out) *enhanced_out = enhanced;
  Tensor<T> att = sigmoid(conv2d(enhanced, p("stage1.sam.att.w"), p("stage1.sam.att.b"), 1, 1));
  return add(mul(feats, att), feats);
}

namespace {

template <typename T>
struct UnetFeats {
  std::array<ad::Tensor<T>, 4> enc, dec;
};

template <typename T>
UnetFeats<T> unet_forward(const ad::Tensor<T>& img, ParamBinder<T>& p, const std::string& prefix,
                          const ModelConfig& cfg) {
  using namespace ad;
  UnetFeats<T> f;
  Tensor<T> x = conv2d(img, p(prefix + ".head.w"), p(prefix + ".head.b"), 1, 1);
  for (int l = 0; l < cfg.encoder_levels; ++l) {
    if (l > 0) {
      const std::string down = prefix + ".down" + std::to_string(l - 1);
      x = relu(conv2d(x, p(down + ".w"), p(down + ".b"), 2, 1));
    }
    for (int k = 0; k < cfg.cabs_per_level; ++k) {
      x = cab_forward(x, p, prefix + ".enc" + std::to_string(l) + ".cab" + std::to_string(k));
    }
    f.enc[static_cast<std::size_t>(l)] = x;
  }
  f.dec[3] = f.enc[3];
  for (int l = cfg.encoder_levels - 2; l >= 0; --l) {
    const Shape target = f.enc[static_cast<std::size_t>(l)].shape();
    x = bilinear_resize(x, target.h, target.w);
    const std::string up = prefix + ".up" + std::to_string(l);
    x = relu(conv2d(x, p(up + ".w"), p(up + ".b"), 1, 1));
    x = add(x, f.enc[static_cast<std::size_t>(l)]);
    for (int k = 0; k < cfg.cabs_per_level; ++k) {
      x = cab_forward(x, p, prefix + ".dec" + std::to_string(l) + ".cab" + std::to_string(k));
    }
    f.dec[static_cast<std::size_t>(l)] = x;
  }
  return f;
}

}  // namespace

template <typename T>
Stage1Output<T> stage1_forward(const ad::Tensor<T>& img, ParamBinder<T>& p,
                               const ModelConfig& cfg) {
  UnetFeats<T> f = unet_forward(img, p, "stage1", cfg);
  Stage1Output<T> out;
  out.encoder = f.enc;
  out.decoder = f.dec;
  out.gated = sam_forward(f.dec[0], img, p, &out.enhanced);
  return out;
}

template <typename T>
RspOutput<T> rsp_forward(const ad::Tensor<T>& img, ParamBinder<T>& p, const ModelConfig& cfg) {
  using namespace ad;
  const Shape is = img.shape();
  UnetFeats<T> f = unet_forward(img, p, "rsp", cfg);
  RspOutput<T> out;
  out.features = f.dec;
  for (int v = 0; v < 4; ++v) {
    const std::string head = "rsp.seghead" + std::to_string(v + 1);
    Tensor<T> native = sigmoid(conv2d(f.dec[static_cast<std::size_t>(v)], p(head + ".w"),
                                      p(head + ".b"), 1, 0));
    out.seg_native[static_cast<std::size_t>(v)] = native;
    out.seg_maps[static_cast<std::size_t>(v)] = bilinear_resize(native, is.h, is.w);
  }
  return out;
}

template <typename T>
ad::Tensor<T> fab_forward(const ad::Tensor<T>& x, const Stage1Output<T>& s1,
                          const ad::Tensor<T>* rsp_feature, int scale, ParamBinder<T>& p,
                          const std::string& prefix, const ModelConfig& cfg) {
  using namespace ad;
  const Shape os = x.shape();
  Tensor<T> y = x;
  for (int j = 0; j < cfg.cabs_per_level; ++j) {
    y = cab_forward(y, p, prefix + ".cab" + std::to_string(j));
  }
  const auto s = static_cast<std::size_t>(scale);
  Tensor<T> ep = conv2d(s1.encoder[s], p(prefix + ".encproj.w"), p(prefix + ".encproj.b"), 1, 0);
  Tensor<T> dp = conv2d(s1.decoder[s], p(prefix + ".decproj.w"), p(prefix + ".decproj.b"), 1, 0);
  y = add(add(y, bilinear_resize(ep, os.h, os.w)), bilinear_resize(dp, os.h, os.w));
  if (rsp_feature) y = concat_ch(y, bilinear_resize(*rsp_feature, os.h, os.w));
  return relu(conv2d(y, p(prefix + ".fuse.w"), p(prefix + ".fuse.b"), 1, 0));
}

template <typename T>
ad::Tensor<T> stage2_forward(const ad::Tensor<T>& img, const Stage1Output<T>& s1,
                             const RspOutput<T>* rsp, ParamBinder<T>& p, const ModelConfig& cfg) {
  using namespace ad;
  const Shape is = img.shape();
  Tensor<T> f = conv2d(img, p("stage2.head.w"), p("stage2.head.b"), 1, 1);
  f = cab_forward(f, p, "stage2.headcab");
  if (cfg.multi_patch) {
    const int half = is.w / 2;
    Tensor<T> left = conv2d(crop_w(img, 0, half), p("stage2.patch.head.w"),
                            p("stage2.patch.head.b"), 1, 1);
    left = cab_forward(left, p, "stage2.patch.cab");
    Tensor<T> right = conv2d(crop_w(img, half, is.w - half), p("stage2.patch.head.w"),
                             p("stage2.patch.head.b"), 1, 1);
    right = cab_forward(right, p, "stage2.patch.cab");
    f = add(f, concat_w(left, right));
  }
  f = conv2d(concat_ch(f, s1.gated), p("stage2.merge.w"), p("stage2.merge.b"), 1, 0);
  for (int k = 0; k < cfg.num_fabs; ++k) {
    const int scale = fab_scale(cfg, k);
    const ad::Tensor<T>* rf = rsp ? &rsp->features[static_cast<std::size_t>(scale)] : nullptr;
    f = fab_forward(f, s1, rf, scale, p, "stage2.fab" + std::to_string(k), cfg);
  }
  Tensor<T> res = conv2d(f, p("stage2.final.w"), p("stage2.final.b"), 1, 1);
  return add(img, res);
}

template <typename T>
ModelOutput<T> forward(ad::Tape<T>& tape, const ad::Tensor<T>& img, const WeightSet<T>& ws,
                       const ModelConfig& cfg, std::map<std::string, ad::Tensor<T>>* binder_out) {
  cfg.validate();
  if (img.tape() != &tape) throw ContractError("input image is not on the given tape");
  const ad::Shape is = img.shape();
  if (is.n != 1 || is.c != 3) throw ParamError("model input must be (1,3,H,W), got " + is.str());
  if (is.h % 16 != 0 || is.w % 16 != 0) {
    throw ParamError("input dims must be divisible by 16, got " + is.str());
  }
  ParamBinder<T> p(tape, ws);
  ModelOutput<T> out;
  RspOutput<T> rsp;
  if (cfg.use_rsp) {
    rsp = rsp_forward(img, p, cfg);
    out.seg_native.assign(rsp.seg_native.begin(), rsp.seg_native.end());
    out.seg_maps.assign(rsp.seg_maps.begin(), rsp.seg_maps.end());
    out.rsp_features.assign(rsp.features.begin(), rsp.features.end());
  }
  Stage1Output<T> s1 = stage1_forward(img, p, cfg);
  out.sam_features = s1.gated;
  out.enhanced.push_back(s1.enhanced);
  if (cfg.use_stage2) {
    out.enhanced.push_back(stage2_forward(img, s1, cfg.use_rsp ? &rsp : nullptr, p, cfg));
  }
  if (binder_out) *binder_out = p.bound();
  return out;
}

#define FUNDUS_INSTANTIATE_MODEL(T)                                                              \
  template ad::Tensor<T> cab_forward(const ad::Tensor<T>&, ParamBinder<T>&, const std::string&); \
  template ad::Tensor<T> sam_forward(const ad::Tensor<T>&, const ad::Tensor<T>&, ParamBinder<T>&, \
                                     ad::Tensor<T>*);                                            \
  template Stage1Output<T> stage1_forward(const ad::Tensor<T>&, ParamBinder<T>&,                 \
                                          const ModelConfig&);                                   \
  template RspOutput<T> rsp_forward(const ad::Tensor<T>&, ParamBinder<T>&, const ModelConfig&);  \
  template ad::Tensor<T> fab_forward(const ad::Tensor<T>&, const Stage1Output<T>&,               \
                                     const ad::Tensor<T>*, int, ParamBinder<T>&,                 \
                                     const std::string&, const ModelConfig&);                    \
  template ad::Tensor<T> stage2_forward(const ad::Tensor<T>&, const Stage1Output<T>&,            \
                                        const RspOutput<T>*, ParamBinder<T>&,                    \
                                        const ModelConfig&);                                     \
  template ModelOutput<T> forward(ad::Tape<T>&, const ad::Tensor<T>&, const WeightSet<T>&,       \
                                  const ModelConfig&, std::map<std::string, ad::Tensor<T>>*);

FUNDUS_INSTANTIATE_MODEL(float)
FUNDUS_INSTANTIATE_MODEL(double)

#undef FUNDUS_INSTANTIATE_MODEL

}  // namespace fundus::model
