#include "fundus/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "fundus/degrade.hpp"

namespace fundus::trainer {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr char kCheckpointMagic[4] = {'F', 'T', 'C', '1'};

using GradMap = std::map<std::string, std::vector<double>>;

ad::Tensor<double> image_leaf(ad::Tape<double>& tape, const FundusImage& img) {
  return tape.leaf({1, 3, img.height, img.width}, img.pixels);
}

void require_trainable(const FundusImage& img) {
  if (img.height % 16 != 0 || img.width % 16 != 0) {
    throw ParamError("training images need dimensions divisible by 16, got " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  }
}

void accumulate_grads(GradMap& grads, const std::map<std::string, ad::Tensor<double>>& bound) {
  for (const auto& [name, tensor] : bound) {
    ad::Tensor<double> h = tensor;
    const std::vector<double>& g = h.g();
    std::vector<double>& acc = grads[name];
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
}

// Adam over the student (restricted to names under `prefix` when non-empty).
// Moments and weights round-trip through float32 storage so a reloaded
// checkpoint continues bit-exactly; the arithmetic itself runs in double.
void adam_apply(TrainState& st, const GradMap& grads, double lr, long t,
                const std::string& prefix) {
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (auto& e : st.student.entries()) {
    if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
    auto& m = st.adam_m.at(e.name).v;
    auto& v = st.adam_v.at(e.name).v;
    const auto it = grads.find(e.name);
    const std::vector<double>* g = it == grads.end() ? nullptr : &it->second;
    for (std::size_t i = 0; i < e.v.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      const double mi = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
      const double vi = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double delta = lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps);
      e.v[i] = static_cast<float>(e.v[i] - delta);
    }
  }
}

void log_line(std::ostream& os, const char* phase, long step, double lr,
              const losses::LossBreakdown& parts, double wall_ms) {
  nlohmann::json j;
  j["phase"] = phase;
  j["step"] = step;
  j["lr"] = lr;
  j["mu"] = parts.mu;
  j["loss"] = parts.to_json();
  j["wall_ms"] = wall_ms;
  os << j.dump() << "\n";
}

void put_u64(std::ostream& out, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("truncated checkpoint: " + path);
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

}  // namespace

void TrainerConfig::validate() const {
  if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0))
    throw ParamError("ema_alpha must be in [0,1], got " + std::to_string(ema_alpha));
  if (!(lr_init >= 0.0) || !(lr_final >= 0.0) || lr_final > lr_init)
    throw ParamError("learning rates need 0 <= lr_final <= lr_init");
  if (total_steps < 0) throw ParamError("total_steps must be non-negative");
  if (labeled_per_batch < 1) throw ParamError("labeled_per_batch must be at least 1");
  if (unlabeled_per_batch < 0) throw ParamError("unlabeled_per_batch must be non-negative");
  if (!(perturb_noise_std >= 0.0)) throw ParamError("perturb_noise_std must be non-negative");
  if (checkpoint_every < 0) throw ParamError("checkpoint_every must be non-negative");
  if (pretrain_steps < 0) throw ParamError("pretrain_steps must be non-negative");
  loss.validate();
}

nlohmann::json TrainerConfig::to_json() const {
  return nlohmann::json{{"ema_alpha", ema_alpha},
                        {"lr_init", lr_init},
                        {"lr_final", lr_final},
                        {"total_steps", total_steps},
                        {"labeled_per_batch", labeled_per_batch},
                        {"unlabeled_per_batch", unlabeled_per_batch},
                        {"perturb_noise_std", perturb_noise_std},
                        {"checkpoint_every", checkpoint_every},
                        {"pretrain_steps", pretrain_steps},
                        {"pre_update_ema", pre_update_ema},
                        {"ema_alpha_ramp", ema_alpha_ramp},
                        {"loss", loss.to_json()},
                        {"seed", seed}};
}

TrainerConfig TrainerConfig::from_json(const nlohmann::json& j) {
  TrainerConfig c;
  c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
  c.lr_init = j.value("lr_init", c.lr_init);
  c.lr_final = j.value("lr_final", c.lr_final);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.labeled_per_batch = j.value("labeled_per_batch", c.labeled_per_batch);
  c.unlabeled_per_batch = j.value("unlabeled_per_batch", c.unlabeled_per_batch);
  c.perturb_noise_std = j.value("perturb_noise_std", c.perturb_noise_std);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
  c.pre_update_ema = j.value("pre_update_ema", c.pre_update_ema);
  c.ema_alpha_ramp = j.value("ema_alpha_ramp", c.ema_alpha_ramp);
  if (j.contains("loss")) c.loss = losses::LossConfig::from_json(j.at("loss"));
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

double lr_schedule(long step, const TrainerConfig& cfg) {
  if (cfg.total_steps <= 0) {
    if (step != 0) throw ParamError("lr_schedule: step outside a zero-length run");
    return cfg.lr_init;
  }
  if (step < 0 || step > cfg.total_steps) {
    throw ParamError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(cfg.total_steps) + "]");
  }
  // Endpoints returned literally so they hold exactly in floating point.
  if (step == 0) return cfg.lr_init;
  if (step == cfg.total_steps) return cfg.lr_final;
  const double phase = M_PI * static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(phase));
}

double effective_alpha(long step, const TrainerConfig& cfg) {
  if (!cfg.ema_alpha_ramp) return cfg.ema_alpha;
  const double warm = 1.0 - 1.0 / static_cast<double>(step + 1);
  return std::min(cfg.ema_alpha, warm);
}

FundusImage perturb(const FundusImage& img, double noise_std, Rng& rng) {
  if (!(noise_std >= 0.0)) throw ParamError("perturb: noise_std must be non-negative");
  if (noise_std == 0.0) return img;
  FundusImage out = img;
  for (double& p : out.pixels) p += noise_std * rng.normal();
  clip01(out);
  return out;
}

TrainState init_state(const model::ModelConfig& mcfg, const TrainerConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  TrainState st;
  st.student = model::init_model(mcfg, tcfg.seed);
  st.teacher = st.student;
  for (const auto& e : st.student.entries()) {
    st.adam_m.add(e.name, e.shape);
    st.adam_v.add(e.name, e.shape);
  }
  return st;
}

losses::LossBreakdown train_step(TrainState& state, const model::ModelConfig& mcfg,
                                 const TrainerConfig& cfg,
                                 const std::vector<LabeledExample>& labeled,
                                 const std::vector<const FundusImage*>& unlabeled) {
  cfg.validate();
  if (labeled.empty()) throw ContractError("train_step: empty labeled batch");

  const double mu = losses::rampup_mu(state.step, cfg.loss.rampup_steps, cfg.loss.mu_max);
  const model::WeightSet<double> wsd = state.student.cast<double>();

  GradMap grads;
  losses::LossBreakdown acc;

  for (const LabeledExample& ex : labeled) {
    require_same_shape(ex.low, ex.high, "train_step pair");
    ad::Tape<double> tape;
    std::map<std::string, ad::Tensor<double>> bound;
    ad::Tensor<double> img = image_leaf(tape, ex.low);
    model::ModelOutput<double> out = model::forward(tape, img, wsd, mcfg, &bound);
    ad::Tensor<double> target = image_leaf(tape, ex.high);

    std::vector<ad::Tensor<double>> mask_ts;
    if (ex.masks != nullptr && mcfg.use_rsp) {
      if (mcfg.seg_classes != 1)
        throw ConfigError("mask supervision expects a single segmentation class");
      for (int v = 0; v < 4; ++v) {
        const data::Plane& p = (*ex.masks)[v];
        mask_ts.push_back(tape.leaf({1, 1, p.height, p.width}, p.v));
      }
    }

    losses::LossResult<double> res = losses::supervised_loss(out, target, mask_ts, cfg.loss);
    tape.backward(res.total);
    accumulate_grads(grads, bound);
    acc.accumulate(res.parts);
  }

  if (!unlabeled.empty()) {
    const model::WeightSet<double> wtd = state.teacher.cast<double>();
    for (std::size_t j = 0; j < unlabeled.size(); ++j) {
      const FundusImage& raw = *unlabeled[j];
      Rng rng_s(Rng::derive(cfg.seed, {Rng::key("perturb"), static_cast<std::uint64_t>(state.step),
                                       static_cast<std::uint64_t>(j), 0}));
      Rng rng_t(Rng::derive(cfg.seed, {Rng::key("perturb"), static_cast<std::uint64_t>(state.step),
                                       static_cast<std::uint64_t>(j), 1}));
      const FundusImage student_in = perturb(raw, cfg.perturb_noise_std, rng_s);
      const FundusImage teacher_in = perturb(raw, cfg.perturb_noise_std, rng_t);

      ad::Tape<double> teacher_tape(false);
      model::ModelOutput<double> teacher_out =
          model::forward(teacher_tape, image_leaf(teacher_tape, teacher_in), wtd, mcfg);

      ad::Tape<double> tape;
      std::map<std::string, ad::Tensor<double>> bound;
      model::ModelOutput<double> student_out =
          model::forward(tape, image_leaf(tape, student_in), wsd, mcfg, &bound);

      losses::LossResult<double> res = losses::consistency_loss(tape, student_out, teacher_out);
      tape.backward(ad::mul_scalar(res.total, mu));
      accumulate_grads(grads, bound);
      acc.accumulate(res.parts);
    }
  }

  acc.finalize(mu);
  if (!std::isfinite(acc.total)) {
    throw TrainingError("train_step: non-finite loss at step " + std::to_string(state.step) +
                        "\n" + acc.to_json().dump(2));
  }

  model::WeightSet<float> before_update;
  if (cfg.pre_update_ema) before_update = state.student;

  adam_apply(state, grads, lr_schedule(state.step, cfg), state.step + 1, "");

  const double alpha = effective_alpha(state.step, cfg);
  state.teacher =
      ema_update(state.teacher, cfg.pre_update_ema ? before_update : state.student, alpha);

  state.step += 1;
  return acc;
}

void pretrain_rsp(TrainState& state, const model::ModelConfig& mcfg, const TrainerConfig& cfg,
                  const degrade::SamplerConfig& sampler, const data::Dataset& ds,
                  std::ostream* log) {
  cfg.validate();
  if (cfg.pretrain_steps <= 0) return;
  if (!mcfg.use_rsp) throw ConfigError("pretraining needs the segmentation branch enabled");
  if (mcfg.seg_classes != 1)
    throw ConfigError("mask supervision expects a single segmentation class");

  std::vector<int> masked;
  for (int i = 0; i < ds.labeled_count(); ++i) {
    if (ds.labeled_masks(i) != nullptr) masked.push_back(i);
  }
  if (masked.empty()) throw ConfigError("pretraining needs labeled images with masks");
  if (static_cast<int>(masked.size()) < cfg.labeled_per_batch) {
    throw ConfigError("pretraining needs at least " + std::to_string(cfg.labeled_per_batch) +
                      " masked labeled images, found " + std::to_string(masked.size()));
  }

  const std::uint64_t pre_seed = Rng::derive(cfg.seed, {Rng::key("pretrain")});

  for (long p = 0; p < cfg.pretrain_steps; ++p) {
    const auto t0 = std::chrono::steady_clock::now();
    data::BatchPlan plan = data::plan_batch(static_cast<int>(masked.size()), 0,
                                            cfg.labeled_per_batch, 0, pre_seed, p);
    const model::WeightSet<double> wsd = state.student.cast<double>();
    GradMap grads;
    losses::LossBreakdown acc;

    for (int pick : plan.labeled) {
      const int idx = masked[static_cast<std::size_t>(pick)];
      const FundusImage& high = ds.labeled_high(idx);
      require_trainable(high);
      Rng rng(Rng::derive(pre_seed, {Rng::key("degrade"), static_cast<std::uint64_t>(plan.epoch),
                                     Rng::key(ds.labeled_id(idx))}));
      data::SamplePair pair = data::build_pair(high, ds.labeled_masks(idx), rng, sampler);

      ad::Tape<double> tape;
      model::ParamBinder<double> binder(tape, wsd);
      ad::Tensor<double> img = image_leaf(tape, pair.low);
      model::RspOutput<double> rsp = model::rsp_forward(img, binder, mcfg);

      losses::LossBreakdown parts;
      ad::Tensor<double> total;
      for (int v = 0; v < 4; ++v) {
        const data::Plane& m = pair.masks[v];
        ad::Tensor<double> truth = tape.leaf({1, 1, m.height, m.width}, m.v);
        ad::Tensor<double> sv = losses::seg_scale_loss(rsp.seg_native[v], truth, cfg.loss);
        parts.seg[v] = sv.v()[0];
        total = (v == 0) ? sv : ad::add(total, sv);
      }
      parts.supervised_total = total.v()[0];
      tape.backward(total);
      accumulate_grads(grads, binder.bound());
      acc.accumulate(parts);
    }

    acc.finalize(0.0);
    if (!std::isfinite(acc.total)) {
      throw TrainingError("pretrain_rsp: non-finite loss at step " + std::to_string(p) + "\n" +
                          acc.to_json().dump(2));
    }
    adam_apply(state, grads, cfg.lr_init, p + 1, "rsp.");
    if (log) {
      const double wall =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log_line(*log, "pretrain", p, cfg.lr_init, acc, wall);
    }
  }
  state.teacher = state.student;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const model::ModelConfig& mcfg, const TrainerConfig& tcfg) {
  nlohmann::json header;
  header["format"] = "FTC1";
  header["schema_version"] = 1;
  header["step"] = state.step;
  header["model"] = mcfg.to_json();
  header["trainer"] = tcfg.to_json();
  header["fingerprint"] = state.student.fingerprint();
  const std::string htext = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, 4);
    put_u64(out, htext.size());
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const model::WeightSet<float>* ws :
         {&state.student, &state.teacher, &state.adam_m, &state.adam_v}) {
      std::ostringstream blob;
      model::write_weight_archive(blob, *ws, "{}");
      const std::string bytes = blob.str();
      put_u64(out, bytes.size());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, model::ModelConfig* mcfg_out,
                           TrainerConfig* tcfg_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const std::uint64_t hlen = get_u64(in, path.string());
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
    if (header.at("schema_version").get<int>() != 1) {
      throw IoError("unsupported checkpoint schema_version in " + path.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }

  TrainState state;
  try {
    state.step = header.at("step").get<long>();
    if (mcfg_out) *mcfg_out = model::ModelConfig::from_json(header.at("model"));
    if (tcfg_out) *tcfg_out = TrainerConfig::from_json(header.at("trainer"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }

  model::WeightSet<float>* slots[4] = {&state.student, &state.teacher, &state.adam_m,
                                       &state.adam_v};
  for (auto* slot : slots) {
    const std::uint64_t blen = get_u64(in, path.string());
    std::string bytes(blen, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(blen));
    if (!in) throw IoError("truncated checkpoint: " + path.string());
    std::istringstream blob(bytes);
    *slot = model::read_weight_archive(blob).weights;
  }

  model::require_same_structure(state.student, state.teacher, "checkpoint teacher");
  model::require_same_structure(state.student, state.adam_m, "checkpoint moments");
  model::require_same_structure(state.student, state.adam_v, "checkpoint moments");
  if (header.at("fingerprint").get<std::string>() != state.student.fingerprint()) {
    throw IoError("checkpoint fingerprint disagrees with its payload: " + path.string());
  }
  return state;
}

TrainState fit(const model::ModelConfig& mcfg, const TrainerConfig& tcfg,
               const degrade::SamplerConfig& sampler, const data::Dataset& ds,
               const std::filesystem::path& out_dir, std::ostream* progress) {
  mcfg.validate();
  tcfg.validate();
  sampler.validate();
  std::filesystem::create_directories(out_dir);

  {
    nlohmann::json snap;
    snap["model"] = mcfg.to_json();
    snap["trainer"] = tcfg.to_json();
    snap["sampler"] = nlohmann::json::parse(degrade::sampler_to_json(sampler));
    std::ofstream cf(out_dir / "config.json");
    if (!cf) throw IoError("cannot write config snapshot in " + out_dir.string());
    cf << snap.dump(2) << "\n";
  }

  const std::filesystem::path latest = out_dir / "checkpoint_latest.ftc";
  TrainState state;
  bool resumed = false;
  if (std::filesystem::exists(latest)) {
    state = load_checkpoint(latest);
    model::WeightSet<float> probe;
    for (const auto& [name, shape] : model::declare_params(mcfg)) probe.add(name, shape);
    model::require_same_structure(state.student, probe, "fit resume");
    resumed = true;
    if (progress) *progress << "resuming from step " << state.step << "\n";
  } else {
    state = init_state(mcfg, tcfg);
  }

  std::ofstream log(out_dir / "train_log.jsonl",
                    resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log in " + out_dir.string());

  if (!resumed && tcfg.pretrain_steps > 0) {
    pretrain_rsp(state, mcfg, tcfg, sampler, ds, &log);
    if (progress) *progress << "pretraining done (" << tcfg.pretrain_steps << " steps)\n";
  }

  while (state.step < tcfg.total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const long step = state.step;
    data::BatchPlan plan = data::plan_batch(ds.labeled_count(), ds.unlabeled_count(),
                                            tcfg.labeled_per_batch, tcfg.unlabeled_per_batch,
                                            tcfg.seed, step);

    std::vector<LabeledExample> labeled;
    for (int idx : plan.labeled) {
      Rng rng(Rng::derive(tcfg.seed, {Rng::key("degrade"), static_cast<std::uint64_t>(plan.epoch),
                                      Rng::key(ds.labeled_id(idx))}));
      data::SamplePair pair = data::build_pair(ds.labeled_high(idx), ds.labeled_masks(idx), rng,
                                               sampler);
      LabeledExample ex;
      ex.low = std::move(pair.low);
      ex.high = std::move(pair.high);
      ex.masks = ds.labeled_masks(idx);
      labeled.push_back(std::move(ex));
    }
    std::vector<const FundusImage*> unlabeled;
    for (int idx : plan.unlabeled) unlabeled.push_back(&ds.unlabeled(idx));

    const double lr = lr_schedule(step, tcfg);
    losses::LossBreakdown parts = train_step(state, mcfg, tcfg, labeled, unlabeled);
    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log_line(log, "train", step, lr, parts, wall);
    log.flush();

    if (progress && (step % 25 == 0 || state.step == tcfg.total_steps)) {
      *progress << "step " << step << " total " << parts.total << " sup "
                << parts.supervised_total << "\n";
    }
    if (tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 &&
        state.step < tcfg.total_steps) {
      save_checkpoint(out_dir / ("checkpoint_" + std::to_string(state.step) + ".ftc"), state,
                      mcfg, tcfg);
      save_checkpoint(latest, state, mcfg, tcfg);
    }
  }

  save_checkpoint(latest, state, mcfg, tcfg);
  return state;
}

}  // namespace fundus::trainer
