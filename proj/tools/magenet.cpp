#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fundus/data.hpp"
#include "fundus/degrade.hpp"
#include "fundus/metrics.hpp"
#include "fundus/model.hpp"
#include "fundus/png_io.hpp"
#include "fundus/trainer.hpp"

namespace fs = std::filesystem;
using namespace fundus;

namespace {

// The merged configuration tree. One seed drives every stream; the trainer's
// copy is always overwritten from the top-level value.
struct RunConfig {
  std::uint64_t seed = 1;
  degrade::SamplerConfig sampler;
  model::ModelConfig model;
  trainer::TrainerConfig trainer;
  std::string labeled_manifest;
  std::string unlabeled_manifest;
  int resize_side = 0;
};

nlohmann::json run_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["seed"] = rc.seed;
  j["sampler"] = nlohmann::json::parse(degrade::sampler_to_json(rc.sampler));
  j["model"] = rc.model.to_json();
  j["trainer"] = rc.trainer.to_json();
  j["data"] = nlohmann::json{{"labeled_manifest", rc.labeled_manifest},
                             {"unlabeled_manifest", rc.unlabeled_manifest},
                             {"resize_side", rc.resize_side}};
  return j;
}

RunConfig run_from_json(const nlohmann::json& j) {
  RunConfig rc;
  rc.seed = j.value("seed", rc.seed);
  if (j.contains("sampler")) rc.sampler = degrade::sampler_from_json(j["sampler"].dump());
  if (j.contains("model")) rc.model = model::ModelConfig::from_json(j["model"]);
  if (j.contains("trainer")) rc.trainer = trainer::TrainerConfig::from_json(j["trainer"]);
  if (j.contains("data")) {
    const nlohmann::json& d = j["data"];
    rc.labeled_manifest = d.value("labeled_manifest", std::string{});
    rc.unlabeled_manifest = d.value("unlabeled_manifest", std::string{});
    rc.resize_side = d.value("resize_side", 0);
  }
  rc.trainer.seed = rc.seed;
  return rc;
}

// Dotted-path override: "--set trainer.loss.lambda=0.25". Values parse as
// JSON when possible and fall back to plain strings.
void apply_override(nlohmann::json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got \"" + kv + "\"");
  }
  const std::string key = kv.substr(0, eq);
  const std::string val = kv.substr(eq + 1);
  nlohmann::json* node = &root;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string seg = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (seg.empty()) throw ConfigError("bad --set key \"" + key + "\"");
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(val);
      } catch (const nlohmann::json::exception&) {
        parsed = val;
      }
      (*node)[seg] = std::move(parsed);
      return;
    }
    node = &(*node)[seg];
    pos = dot + 1;
  }
}

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& sets,
                          bool seed_given, std::uint64_t seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("config file not found: " + config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config parse error in " + config_path + ": " + e.what());
    }
  }
  for (const std::string& kv : sets) apply_override(j, kv);
  RunConfig rc = run_from_json(j);
  if (seed_given) {
    rc.seed = seed;
    rc.trainer.seed = seed;
  }
  rc.sampler.validate();
  rc.model.validate();
  rc.trainer.validate();
  return rc;
}

void snapshot_config(const RunConfig& rc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "run_config.json");
  if (!out) throw IoError("cannot write config snapshot in " + out_dir.string());
  out << run_to_json(rc).dump(2) << "\n";
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

FundusImage tensor_to_image(const ad::Tensor<double>& t) {
  const ad::Shape s = t.shape();
  FundusImage img(s.h, s.w);
  img.pixels.assign(t.v().begin(), t.v().end());
  clip01(img);
  return img;
}

data::Dataset load_dataset(const RunConfig& rc, bool need_labeled) {
  if (rc.labeled_manifest.empty()) {
    if (need_labeled) throw ConfigError("config has no data.labeled_manifest");
    throw ConfigError("no manifest configured");
  }
  data::Manifest merged = data::load_manifest(rc.labeled_manifest);
  if (!rc.unlabeled_manifest.empty()) {
    data::Manifest extra = data::load_manifest(rc.unlabeled_manifest);
    std::set<std::string> ids;
    for (const auto& r : merged.records) ids.insert(r.id);
    for (auto& r : extra.records) {
      if (!ids.insert(r.id).second) {
        throw ConfigError("record id " + r.id + " appears in both manifests");
      }
      merged.records.push_back(std::move(r));
    }
  }
  return data::Dataset::load(merged, rc.resize_side);
}

int cmd_degrade(const RunConfig& rc, const fs::path& in_dir, const fs::path& out_dir,
                int workers) {
  const std::vector<fs::path> inputs = list_pngs(in_dir);
  if (inputs.empty()) {
    std::cerr << "no input images in " << in_dir << "\n";
    return 2;
  }
  snapshot_config(rc, out_dir);

  std::atomic<std::size_t> next{0};
  std::mutex mtx;
  std::vector<std::string> failures;
  data::Manifest manifest;
  manifest.dataset = "degraded";
  manifest.records.resize(inputs.size());

  const auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < inputs.size(); i = next.fetch_add(1)) {
      const std::string stem = inputs[i].stem().string();
      try {
        FundusImage img = read_png(inputs[i].string());
        if (rc.resize_side > 0) img = data::resize(img, rc.resize_side);
        auto fov = data::fov_mask(img);
        if (!fov.empty()) img.fov_mask = std::move(fov);

        Rng rng(Rng::derive(rc.seed, {Rng::key("degrade"), Rng::key(stem)}));
        const degrade::DegradationRecord rec = degrade::sample_degradation(
            rng, rc.sampler, img.width, img.height, img.fov_mask ? &*img.fov_mask : nullptr);
        const FundusImage low = degrade::apply(img, rec);

        write_png((out_dir / (stem + ".png")).string(), low);
        std::ofstream rj(out_dir / (stem + ".json"));
        if (!rj) throw IoError("cannot write record for " + stem);
        rj << rec.to_json() << "\n";

        data::ManifestRecord mr;
        mr.id = stem;
        mr.image_path = stem + ".png";
        mr.role = data::ManifestRecord::Role::kUnlabeledLow;
        manifest.records[i] = std::move(mr);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mtx);
        failures.push_back(inputs[i].string() + ": " + e.what());
      }
    }
  };

  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  if (!failures.empty()) {
    std::sort(failures.begin(), failures.end());
    for (const std::string& f : failures) std::cerr << "failed: " << f << "\n";
    return 1;
  }
  data::save_manifest(manifest, out_dir / "manifest.json");
  std::cerr << "degraded " << inputs.size() << " images into " << out_dir << "\n";
  return 0;
}

int cmd_train(RunConfig rc, const fs::path& out_dir, bool resume) {
  if (!resume && fs::exists(out_dir / "checkpoint_latest.ftc")) {
    std::cerr << "output directory already contains a run; pass --resume to continue\n";
    return 2;
  }
  data::Dataset ds = load_dataset(rc, true);
  snapshot_config(rc, out_dir);
  trainer::TrainState st = trainer::fit(rc.model, rc.trainer, rc.sampler, ds, out_dir, &std::cerr);
  std::cerr << "finished at step " << st.step << "\n";
  return 0;
}

int cmd_pretrain(RunConfig rc, const fs::path& out_dir) {
  if (fs::exists(out_dir / "checkpoint_latest.ftc")) {
    std::cerr << "output directory already contains a run\n";
    return 2;
  }
  if (rc.trainer.pretrain_steps <= 0) {
    std::cerr << "trainer.pretrain_steps must be positive for this command\n";
    return 2;
  }
  data::Dataset ds = load_dataset(rc, true);
  snapshot_config(rc, out_dir);
  trainer::TrainState st = trainer::init_state(rc.model, rc.trainer);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot open training log in " + out_dir.string());
  trainer::pretrain_rsp(st, rc.model, rc.trainer, rc.sampler, ds, &log);
  trainer::save_checkpoint(out_dir / "checkpoint_latest.ftc", st, rc.model, rc.trainer);
  std::cerr << "pretrained segmentation branch for " << rc.trainer.pretrain_steps << " steps\n";
  return 0;
}

int cmd_enhance(const RunConfig& rc, const fs::path& checkpoint, const fs::path& in_dir,
                const fs::path& out_dir, const std::string& which, bool emit_stage1,
                bool emit_seg) {
  trainer::TrainState st = trainer::load_checkpoint(checkpoint);
  model::WeightSet<float> probe;
  for (const auto& [name, shape] : model::declare_params(rc.model)) probe.add(name, shape);
  model::require_same_structure(st.student, probe, "checkpoint vs model config");
  const model::WeightSet<double> w =
      (which == "teacher" ? st.teacher : st.student).cast<double>();

  const std::vector<fs::path> inputs = list_pngs(in_dir);
  if (inputs.empty()) {
    std::cerr << "no input images in " << in_dir << "\n";
    return 2;
  }
  snapshot_config(rc, out_dir);

  for (const fs::path& p : inputs) {
    const std::string stem = p.stem().string();
    FundusImage img = read_png(p.string());
    if (rc.resize_side > 0) img = data::resize(img, rc.resize_side);

    ad::Tape<double> tape(false);
    ad::Tensor<double> x = tape.leaf({1, 3, img.height, img.width}, img.pixels);
    model::ModelOutput<double> out = model::forward(tape, x, w, rc.model);

    write_png((out_dir / (stem + ".png")).string(), tensor_to_image(out.enhanced.back()));
    if (emit_stage1 && out.enhanced.size() > 1) {
      write_png((out_dir / (stem + "_stage1.png")).string(), tensor_to_image(out.enhanced[0]));
    }
    if (emit_seg) {
      for (std::size_t v = 0; v < out.seg_maps.size(); ++v) {
        std::vector<double> plane = out.seg_maps[v].v();
        write_png_gray((out_dir / (stem + "_seg" + std::to_string(v) + ".png")).string(), plane,
                       img.height, img.width);
      }
    }
    std::cerr << "enhanced " << stem << "\n";
  }
  return 0;
}

int cmd_eval(const fs::path& enhanced_dir, const fs::path& truth_dir, const fs::path& out_dir,
             bool fov_only) {
  const std::vector<fs::path> enhanced = list_pngs(enhanced_dir);
  const std::vector<fs::path> truth = list_pngs(truth_dir);
  std::set<std::string> es, ts;
  for (const auto& p : enhanced) es.insert(p.stem().string());
  for (const auto& p : truth) ts.insert(p.stem().string());

  std::vector<std::string> unmatched;
  for (const auto& s : es)
    if (!ts.count(s)) unmatched.push_back(s + " (no ground truth)");
  for (const auto& s : ts)
    if (!es.count(s)) unmatched.push_back(s + " (no enhanced image)");
  if (!unmatched.empty()) {
    for (const auto& u : unmatched) std::cerr << "unmatched: " << u << "\n";
    return 2;
  }
  if (es.empty()) {
    std::cerr << "no input images in " << enhanced_dir << "\n";
    return 2;
  }

  std::vector<metrics::MetricPair> pairs;
  for (const std::string& stem : es) {
    metrics::MetricPair mp;
    mp.id = stem;
    mp.enhanced = read_png((enhanced_dir / (stem + ".png")).string());
    mp.truth = read_png((truth_dir / (stem + ".png")).string());
    if (fov_only) {
      auto fov = data::fov_mask(mp.truth);
      if (!fov.empty()) mp.truth.fov_mask = std::move(fov);
    }
    pairs.push_back(std::move(mp));
  }

  const metrics::MetricReport report =
      metrics::build_report(pairs, enhanced_dir.filename().string(), fov_only);
  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "report.csv");
    std::ofstream js(out_dir / "report.json");
    if (!csv || !js) throw IoError("cannot write report in " + out_dir.string());
    csv << report.to_csv();
    js << report.to_json() << "\n";
  }
  std::cout << "mean_psnr=" << report.mean_psnr << " mean_ssim=" << report.mean_ssim << " n="
            << report.rows.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fundus image degradation, enhancement training and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "dotted config override, key=value")->take_all();
    sub->add_option("--seed", seed, "master seed (overrides the config value)")
        ->each([&](const std::string&) { seed_given = true; });
  };

  // degrade
  auto* degrade_cmd = app.add_subcommand("degrade", "synthesize degraded copies of clean images");
  std::string d_in, d_out;
  int d_workers = 1;
  add_common(degrade_cmd);
  degrade_cmd->add_option("-i,--input", d_in, "directory of clean PNG images")->required();
  degrade_cmd->add_option("-o,--output", d_out, "output directory")->required();
  degrade_cmd->add_option("--workers", d_workers, "parallel image workers")
      ->check(CLI::PositiveNumber);

  // train
  auto* train_cmd = app.add_subcommand("train", "mean-teacher training loop");
  std::string t_out;
  long t_steps = -1;
  bool t_resume = false;
  add_common(train_cmd);
  train_cmd->add_option("-o,--output", t_out, "run directory")->required();
  train_cmd->add_option("--steps", t_steps, "override trainer.total_steps");
  train_cmd->add_flag("--resume", t_resume, "continue from checkpoint_latest.ftc");

  // pretrain-rsp
  auto* pre_cmd = app.add_subcommand("pretrain-rsp", "segmentation-branch warmup only");
  std::string p_out;
  long p_steps = -1;
  add_common(pre_cmd);
  pre_cmd->add_option("-o,--output", p_out, "run directory")->required();
  pre_cmd->add_option("--steps", p_steps, "override trainer.pretrain_steps");

  // enhance
  auto* enh_cmd = app.add_subcommand("enhance", "run the network over a directory of images");
  std::string e_ckpt, e_in, e_out, e_weights = "teacher";
  bool e_stage1 = false, e_seg = false;
  add_common(enh_cmd);
  enh_cmd->add_option("--checkpoint", e_ckpt, "checkpoint file (.ftc)")->required();
  enh_cmd->add_option("-i,--input", e_in, "directory of PNG images")->required();
  enh_cmd->add_option("-o,--output", e_out, "output directory")->required();
  enh_cmd->add_option("--weights", e_weights, "student or teacher")
      ->check(CLI::IsMember({"student", "teacher"}));
  enh_cmd->add_flag("--emit-stage1", e_stage1, "also write the stage-1 image");
  enh_cmd->add_flag("--emit-seg", e_seg, "also write the four segmentation maps");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM report over matching filenames");
  std::string v_enh, v_truth, v_out = ".";
  bool v_fov = false;
  eval_cmd->add_option("-i,--input", v_enh, "directory of enhanced images")->required();
  eval_cmd->add_option("-t,--truth", v_truth, "directory of ground-truth images")->required();
  eval_cmd->add_option("-o,--output", v_out, "report directory");
  eval_cmd->add_flag("--fov", v_fov, "restrict metrics to the field of view");

  int result = 0;
  degrade_cmd->callback([&] {
    const RunConfig rc = load_run_config(config_path, sets, seed_given, seed);
    result = cmd_degrade(rc, d_in, d_out, d_workers);
  });
  train_cmd->callback([&] {
    RunConfig rc = load_run_config(config_path, sets, seed_given, seed);
    if (t_steps >= 0) rc.trainer.total_steps = t_steps;
    rc.trainer.validate();
    result = cmd_train(std::move(rc), t_out, t_resume);
  });
  pre_cmd->callback([&] {
    RunConfig rc = load_run_config(config_path, sets, seed_given, seed);
    if (p_steps >= 0) rc.trainer.pretrain_steps = p_steps;
    rc.trainer.validate();
    result = cmd_pretrain(std::move(rc), p_out);
  });
  enh_cmd->callback([&] {
    const RunConfig rc = load_run_config(config_path, sets, seed_given, seed);
    result = cmd_enhance(rc, e_ckpt, e_in, e_out, e_weights, e_stage1, e_seg);
  });
  eval_cmd->callback([&] { result = cmd_eval(v_enh, v_truth, v_out, v_fov); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ParamError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return result;
}
