#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "fundus/common.hpp"
#include "fundus/model.hpp"
#include "fundus/tensor.hpp"

namespace fundus::losses {

struct LossConfig {
  double epsilon = 1e-3;
  double lambda = 0.5;
  double mu_max = 1.0;
  long rampup_steps = 4000;
  // Literal global-norm reading of the penalty formulas; the default is
  // per-element means so magnitudes are resolution-invariant.
  bool global_norm = false;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

// Per-step scalar record. Stage-indexed arrays leave unused stages at zero;
// accumulate() sums everything except mu, finalize() recomputes the total.
struct LossBreakdown {
  std::array<double, 2> charb{0.0, 0.0};
  std::array<double, 2> edge{0.0, 0.0};
  std::array<double, 4> seg{0.0, 0.0, 0.0, 0.0};
  std::array<double, 2> cons_enh{0.0, 0.0};
  std::array<double, 4> cons_seg{0.0, 0.0, 0.0, 0.0};
  double mu = 0.0;
  double supervised_total = 0.0;
  double consistency_total = 0.0;
  double total = 0.0;

  void accumulate(const LossBreakdown& other);
  void finalize(double mu_value);
  nlohmann::json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
};

// mu_max * exp(-5 (1 - min(step,T)/T)^2): 0 -> mu_max * e^-5, >=T -> mu_max.
double rampup_mu(long step, long rampup_steps, double mu_max);
double total_of(double supervised, double consistency, double mu);

namespace detail {

template <typename T>
void require_shapes(const ad::Tensor<T>& a, const ad::Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ParamError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

// sqrt(sum(d^2) + eps^2) over all elements
template <typename T>
ad::Tensor<T> global_charbonnier(const ad::Tensor<T>& pred, const ad::Tensor<T>& target,
                                 double eps) {
  using namespace ad;
  Tensor<T> d = sub(pred, target);
  const T n = static_cast<T>(d.shape().size());
  Tensor<T> sumsq = mul_scalar(mean_all(square(d)), n);
  return sqrt_val(add_scalar(sumsq, static_cast<T>(eps * eps)));
}

}  // namespace detail

template <typename T>
ad::Tensor<T> charbonnier(const ad::Tensor<T>& pred, const ad::Tensor<T>& target,
                          const LossConfig& cfg) {
  detail::require_shapes(pred, target, "charbonnier");
  if (cfg.global_norm) return detail::global_charbonnier(pred, target, cfg.epsilon);
  return ad::charbonnier_mean(pred, target, static_cast<T>(cfg.epsilon));
}

template <typename T>
ad::Tensor<T> edge_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& target,
                        const LossConfig& cfg) {
  detail::require_shapes(pred, target, "edge_loss");
  return charbonnier(ad::laplacian(pred), ad::laplacian(target), cfg);
}

template <typename T>
ad::Tensor<T> seg_scale_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& truth,
                             const LossConfig& cfg) {
  using namespace ad;
  detail::require_shapes(pred, truth, "seg_loss");
  Tensor<T> d = sub(pred, truth);
  if (cfg.global_norm) {
    const T n = static_cast<T>(d.shape().size());
    return sqrt_val(mul_scalar(mean_all(square(d)), n));
  }
  return mean_all(square(d));
}

template <typename T>
struct LossResult {
  ad::Tensor<T> total;
  LossBreakdown parts;
};

// Sum over stages of (charbonnier + edge), plus lambda times the per-scale
// segmentation losses when ground-truth masks are supplied. The masks must
// match the native scales of the model's segmentation maps.
template <typename T>
LossResult<T> supervised_loss(const model::ModelOutput<T>& out, const ad::Tensor<T>& target,
                              const std::vector<ad::Tensor<T>>& gt_masks, const LossConfig& cfg) {
  using namespace ad;
  cfg.validate();
  if (out.enhanced.empty()) throw ContractError("supervised_loss: no stage outputs");
  if (out.enhanced.size() > 2) throw ContractError("supervised_loss: more than two stages");

  LossResult<T> r;
  for (std::size_t s = 0; s < out.enhanced.size(); ++s) {
    Tensor<T> c = charbonnier(out.enhanced[s], target, cfg);
    Tensor<T> e = edge_loss(out.enhanced[s], target, cfg);
    r.parts.charb[s] = static_cast<double>(c.v()[0]);
    r.parts.edge[s] = static_cast<double>(e.v()[0]);
    Tensor<T> stage = add(c, e);
    r.total = (s == 0) ? stage : add(r.total, stage);
  }

  if (!gt_masks.empty() && !out.seg_native.empty() && cfg.lambda > 0.0) {
    if (gt_masks.size() != out.seg_native.size()) {
      throw ParamError("supervised_loss: expected " + std::to_string(out.seg_native.size()) +
                       " masks, got " + std::to_string(gt_masks.size()));
    }
    Tensor<T> seg_sum;
    for (std::size_t v = 0; v < gt_masks.size(); ++v) {
      Tensor<T> sv = seg_scale_loss(out.seg_native[v], gt_masks[v], cfg);
      r.parts.seg[v] = static_cast<double>(sv.v()[0]);
      seg_sum = (v == 0) ? sv : add(seg_sum, sv);
    }
    r.total = add(r.total, mul_scalar(seg_sum, static_cast<T>(cfg.lambda)));
  }

  r.parts.supervised_total = static_cast<double>(r.total.v()[0]);
  return r;
}

// L1 distance between student and teacher predictions, summed over the stage
// outputs and the upsampled segmentation maps. Teacher values enter the
// student's tape as constants, so no gradient flows toward the teacher.
template <typename T>
LossResult<T> consistency_loss(ad::Tape<T>& student_tape, const model::ModelOutput<T>& student,
                               const model::ModelOutput<T>& teacher) {
  using namespace ad;
  if (student.enhanced.size() != teacher.enhanced.size() ||
      student.seg_maps.size() != teacher.seg_maps.size()) {
    throw ContractError("consistency_loss: student/teacher output arity mismatch");
  }
  const auto as_const = [&](const Tensor<T>& t) {
    return student_tape.leaf(t.shape(), t.v().data());
  };
  const auto l1 = [&](const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ContractError("consistency_loss: shape mismatch");
    return mean_all(abs_val(sub(a, as_const(b))));
  };

  LossResult<T> r;
  for (std::size_t s = 0; s < student.enhanced.size(); ++s) {
    Tensor<T> c = l1(student.enhanced[s], teacher.enhanced[s]);
    r.parts.cons_enh[s] = static_cast<double>(c.v()[0]);
    r.total = (s == 0) ? c : add(r.total, c);
  }
  for (std::size_t v = 0; v < student.seg_maps.size(); ++v) {
    Tensor<T> c = l1(student.seg_maps[v], teacher.seg_maps[v]);
    r.parts.cons_seg[v] = static_cast<double>(c.v()[0]);
    r.total = add(r.total, c);
  }
  if (!r.total.valid()) throw ContractError("consistency_loss: nothing to compare");
  r.parts.consistency_total = static_cast<double>(r.total.v()[0]);
  return r;
}

}  // namespace fundus::losses
