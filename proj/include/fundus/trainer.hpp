#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundus/data.hpp"
#include "fundus/image.hpp"
#include "fundus/losses.hpp"
#include "fundus/model.hpp"
#include "fundus/rng.hpp"
#include "fundus/weights.hpp"

namespace fundus::trainer {

struct TrainerConfig {
  double ema_alpha = 0.999;
  double lr_init = 2e-5;
  double lr_final = 1e-7;
  long total_steps = 0;
  int labeled_per_batch = 2;
  int unlabeled_per_batch = 1;
  double perturb_noise_std = 0.05;
  long checkpoint_every = 0;  // extra periodic checkpoints; the final one always lands
  long pretrain_steps = 0;    // segmentation-branch warmup before the main loop
  // Average the teacher from the pre-update student instead of the post-update
  // one (the two index conventions found in the mean-teacher literature).
  bool pre_update_ema = false;
  // Warm the average in with alpha_eff = min(alpha, 1 - 1/(step+1)).
  bool ema_alpha_ramp = false;
  losses::LossConfig loss;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainerConfig from_json(const nlohmann::json& j);
};

// lr_final + 0.5 (lr_init - lr_final)(1 + cos(pi step / total_steps)).
double lr_schedule(long step, const TrainerConfig& cfg);
double effective_alpha(long step, const TrainerConfig& cfg);

// Convex combination alpha * teacher + (1 - alpha) * student, elementwise in
// double, for every parameter. Pure; the originals are untouched.
template <typename T>
model::WeightSet<T> ema_update(const model::WeightSet<T>& teacher,
                               const model::WeightSet<T>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParamError("ema_update: alpha must be in [0,1], got " + std::to_string(alpha));
  }
  model::require_same_structure(teacher, student, "ema_update");
  model::WeightSet<T> out;
  for (std::size_t e = 0; e < teacher.size(); ++e) {
    const auto& t = teacher.entries()[e];
    const auto& s = student.entries()[e];
    std::vector<T> v(t.v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<T>(alpha * static_cast<double>(t.v[i]) +
                            (1.0 - alpha) * static_cast<double>(s.v[i]));
    }
    out.add(t.name, t.shape, std::move(v));
  }
  return out;
}

// Independent per-element Gaussian noise, clipped back to [0,1]. Zero std is
// the identity and consumes no draws.
FundusImage perturb(const FundusImage& img, double noise_std, Rng& rng);

struct TrainState {
  long step = 0;
  model::WeightSet<float> student;
  model::WeightSet<float> teacher;
  model::WeightSet<float> adam_m;
  model::WeightSet<float> adam_v;
};

// Fresh state: initialized student, teacher synced to it, zero moments.
TrainState init_state(const model::ModelConfig& mcfg, const TrainerConfig& tcfg);

struct LabeledExample {
  FundusImage low;
  FundusImage high;
  const std::array<data::Plane, 4>* masks = nullptr;
};

// One optimizer step on a mixed batch: supervised losses on the pairs, the
// ramped consistency penalty between independently perturbed student/teacher
// passes on each unlabeled image, Adam on the student, EMA on the teacher.
losses::LossBreakdown train_step(TrainState& state, const model::ModelConfig& mcfg,
                                 const TrainerConfig& cfg,
                                 const std::vector<LabeledExample>& labeled,
                                 const std::vector<const FundusImage*>& unlabeled);

// Warmup phase that fits only the segmentation branch (parameters under
// "rsp.") on degraded copies of the masked labeled images; everything else is
// frozen. The teacher is synced to the student at the end.
void pretrain_rsp(TrainState& state, const model::ModelConfig& mcfg, const TrainerConfig& cfg,
                  const degrade::SamplerConfig& sampler, const data::Dataset& ds,
                  std::ostream* log = nullptr);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const model::ModelConfig& mcfg, const TrainerConfig& tcfg);
TrainState load_checkpoint(const std::filesystem::path& path, model::ModelConfig* mcfg_out = nullptr,
                           TrainerConfig* tcfg_out = nullptr);

// Full run: init or resume from <out_dir>/checkpoint_latest.ftc, optional
// segmentation pretraining (fresh runs only), then the step loop with a
// JSON-lines log and periodic checkpoints. Deterministic given config + data;
// a resumed run continues the log with identical loss records.
TrainState fit(const model::ModelConfig& mcfg, const TrainerConfig& tcfg,
               const degrade::SamplerConfig& sampler, const data::Dataset& ds,
               const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

}  // namespace fundus::trainer
