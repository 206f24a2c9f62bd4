#include "fundus/data.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "fundus/png_io.hpp"
#include "fundus/tensor.hpp"

namespace fundus::data {

namespace fs = std::filesystem;

namespace {

const char* role_name(ManifestRecord::Role r) {
  return r == ManifestRecord::Role::kLabeledHigh ? "labeled" : "unlabeled";
}

ManifestRecord::Role role_of(const std::string& s, const std::string& id) {
  if (s == "labeled") return ManifestRecord::Role::kLabeledHigh;
  if (s == "unlabeled") return ManifestRecord::Role::kUnlabeledLow;
  throw IoError("manifest record " + id + " has unknown role \"" + s + "\"");
}

}  // namespace

nlohmann::json Manifest::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j{{"id", r.id}, {"image", r.image_path}, {"role", role_name(r.role)}};
    if (!r.mask_paths.empty()) j["masks"] = r.mask_paths;
    recs.push_back(std::move(j));
  }
  return nlohmann::json{
      {"schema_version", schema_version}, {"dataset", dataset}, {"records", std::move(recs)}};
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest parse error in " + path.string() + ": " + e.what());
  }

  Manifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) {
      throw IoError("unsupported manifest schema_version " + std::to_string(m.schema_version) +
                    " in " + path.string());
    }
    m.dataset = j.value("dataset", std::string{});
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    for (const auto& rj : j.at("records")) {
      ManifestRecord r;
      r.id = rj.at("id").get<std::string>();
      r.image_path = fs::absolute(dir / rj.at("image").get<std::string>()).lexically_normal().string();
      r.role = role_of(rj.at("role").get<std::string>(), r.id);
      if (rj.contains("masks")) {
        for (const auto& mp : rj.at("masks")) {
          r.mask_paths.push_back(
              fs::absolute(dir / mp.get<std::string>()).lexically_normal().string());
        }
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest parse error in " + path.string() + ": " + e.what());
  }

  if (m.records.empty()) throw IoError("manifest has no records: " + path.string());
  std::vector<std::string> ids;
  for (const auto& r : m.records) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  if (auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end()) {
    throw IoError("duplicate manifest id " + *dup + " in " + path.string());
  }
  for (const auto& r : m.records) {
    if (!fs::exists(r.image_path)) throw IoError("manifest image missing: " + r.image_path);
    if (r.role == ManifestRecord::Role::kUnlabeledLow && !r.mask_paths.empty()) {
      throw IoError("unlabeled record " + r.id + " has masks");
    }
    const auto n = r.mask_paths.size();
    if (n != 0 && n != 1 && n != 4) {
      throw IoError("record " + r.id + " has " + std::to_string(n) + " masks (want 0, 1 or 4)");
    }
    for (const auto& mp : r.mask_paths) {
      if (!fs::exists(mp)) throw IoError("manifest mask missing: " + mp);
    }
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << m.to_json().dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> fov_mask(const FundusImage& img) {
  const int h = img.height, w = img.width;
  const auto npix = static_cast<std::size_t>(h) * w;
  constexpr double kThreshold = 0.02;

  std::vector<std::uint8_t> lit(npix, 0);
  bool any = false;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double mean = (img.at(0, i, j) + img.at(1, i, j) + img.at(2, i, j)) / 3.0;
      if (mean > kThreshold) {
        lit[static_cast<std::size_t>(i) * w + j] = 1;
        any = true;
      }
    }
  }
  if (!any) {
    std::cerr << "fov_mask: image is entirely dark, no field of view found\n";
    return {};
  }

  // Label 4-connected bright components, keep the largest.
  std::vector<int> label(npix, -1);
  int best = -1;
  std::size_t best_size = 0;
  int next = 0;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < npix; ++start) {
    if (!lit[start] || label[start] >= 0) continue;
    const int cur = next++;
    std::size_t size = 0;
    label[start] = cur;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      ++size;
      const int i = static_cast<int>(p / w), j = static_cast<int>(p % w);
      const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int ni = i + di[k], nj = j + dj[k];
        if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
        const std::size_t q = static_cast<std::size_t>(ni) * w + nj;
        if (lit[q] && label[q] < 0) {
          label[q] = cur;
          queue.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = cur;
    }
  }

  std::vector<std::uint8_t> mask(npix, 0);
  for (std::size_t p = 0; p < npix; ++p) mask[p] = (label[p] == best) ? 1 : 0;

  // Fill holes: dark pixels reachable from the border stay outside, the rest
  // are enclosed by the retina disk and belong to it.
  std::vector<std::uint8_t> outside(npix, 0);
  auto seed = [&](int i, int j) {
    const std::size_t p = static_cast<std::size_t>(i) * w + j;
    if (!mask[p] && !outside[p]) {
      outside[p] = 1;
      queue.push_back(p);
    }
  };
  for (int j = 0; j < w; ++j) {
    seed(0, j);
    seed(h - 1, j);
  }
  for (int i = 0; i < h; ++i) {
    seed(i, 0);
    seed(i, w - 1);
  }
  while (!queue.empty()) {
    const std::size_t p = queue.front();
    queue.pop_front();
    const int i = static_cast<int>(p / w), j = static_cast<int>(p % w);
    const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int ni = i + di[k], nj = j + dj[k];
      if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
      const std::size_t q = static_cast<std::size_t>(ni) * w + nj;
      if (!mask[q] && !outside[q]) {
        outside[q] = 1;
        queue.push_back(q);
      }
    }
  }
  for (std::size_t p = 0; p < npix; ++p) {
    if (!mask[p] && !outside[p]) mask[p] = 1;
  }
  return mask;
}

namespace {

int nearest_src(int o, int in, int out) {
  const int i = static_cast<int>(std::floor((o + 0.5) * static_cast<double>(in) / out));
  return std::clamp(i, 0, in - 1);
}

}  // namespace

FundusImage resize(const FundusImage& img, int side) {
  if (side < 16 || side % 16 != 0) {
    throw ParamError("resize side must be a positive multiple of 16, got " +
                     std::to_string(side));
  }
  img.validate();
  if (img.height == side && img.width == side) return img;

  FundusImage out(side, side);
  const auto rows = ad::detail::lerp_axis(img.height, side);
  const auto cols = ad::detail::lerp_axis(img.width, side);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < side; ++i) {
      const auto& r = rows[i];
      for (int j = 0; j < side; ++j) {
        const auto& cl = cols[j];
        const double top = img.at(c, r.i0, cl.i0) * (1 - cl.t) + img.at(c, r.i0, cl.i1) * cl.t;
        const double bot = img.at(c, r.i1, cl.i0) * (1 - cl.t) + img.at(c, r.i1, cl.i1) * cl.t;
        out.at(c, i, j) = top * (1 - r.t) + bot * r.t;
      }
    }
  }
  clip01(out);

  if (img.fov_mask) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(side) * side);
    for (int i = 0; i < side; ++i) {
      const int si = nearest_src(i, img.height, side);
      for (int j = 0; j < side; ++j) {
        const int sj = nearest_src(j, img.width, side);
        mask[static_cast<std::size_t>(i) * side + j] =
            (*img.fov_mask)[static_cast<std::size_t>(si) * img.width + sj];
      }
    }
    out.fov_mask = std::move(mask);
  }
  return out;
}

namespace {

Plane halve(const Plane& p) {
  Plane out{p.height / 2, p.width / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.height) * out.width);
  for (int i = 0; i < out.height; ++i) {
    for (int j = 0; j < out.width; ++j) {
      const std::size_t a = static_cast<std::size_t>(2 * i) * p.width + 2 * j;
      const std::size_t b = a + p.width;
      out.v[static_cast<std::size_t>(i) * out.width + j] =
          0.25 * (p.v[a] + p.v[a + 1] + p.v[b] + p.v[b + 1]);
    }
  }
  return out;
}

}  // namespace

std::array<Plane, 4> mask_pyramid(const Plane& full) {
  if (full.height < 8 || full.width < 8 || full.height % 8 != 0 || full.width % 8 != 0) {
    throw ParamError("mask pyramid needs dimensions divisible by 8, got " +
                     std::to_string(full.height) + "x" + std::to_string(full.width));
  }
  if (full.v.size() != static_cast<std::size_t>(full.height) * full.width) {
    throw ParamError("mask plane size mismatch");
  }
  std::array<Plane, 4> levels;
  levels[0] = full;
  for (int k = 1; k < 4; ++k) levels[k] = halve(levels[k - 1]);
  return levels;
}

SamplePair build_pair(const FundusImage& high, const std::array<Plane, 4>* masks, Rng& rng,
                      const degrade::SamplerConfig& cfg) {
  high.validate();
  SamplePair pair;
  pair.record = degrade::sample_degradation(rng, cfg, high.width, high.height,
                                            high.fov_mask ? &*high.fov_mask : nullptr);
  pair.low = degrade::apply(high, pair.record);
  pair.high = high;
  if (masks) {
    pair.has_masks = true;
    pair.masks = *masks;
  }
  return pair;
}

Dataset Dataset::load(const Manifest& manifest, int resize_side) {
  Dataset ds;
  for (const auto& rec : manifest.records) {
    FundusImage img = read_png(rec.image_path);
    if (resize_side > 0) img = resize(img, resize_side);
    if (!img.fov_mask) {
      auto mask = fov_mask(img);
      if (!mask.empty()) img.fov_mask = std::move(mask);
    }

    if (rec.role == ManifestRecord::Role::kUnlabeledLow) {
      ds.unlabeled_.push_back({rec.id, std::move(img)});
      continue;
    }

    Labeled entry;
    entry.id = rec.id;
    if (!rec.mask_paths.empty()) {
      std::vector<Plane> planes;
      for (const auto& mp : rec.mask_paths) {
        Plane p;
        p.v = read_png_gray(mp, &p.height, &p.width);
        planes.push_back(std::move(p));
      }
      if (planes.size() == 1) {
        Plane full = std::move(planes[0]);
        if (resize_side > 0 && (full.height != resize_side || full.width != resize_side)) {
          Plane scaled{resize_side, resize_side, {}};
          scaled.v.resize(static_cast<std::size_t>(resize_side) * resize_side);
          for (int i = 0; i < resize_side; ++i) {
            const int si = nearest_src(i, full.height, resize_side);
            for (int j = 0; j < resize_side; ++j) {
              const int sj = nearest_src(j, full.width, resize_side);
              scaled.v[static_cast<std::size_t>(i) * resize_side + j] =
                  full.v[static_cast<std::size_t>(si) * full.width + sj];
            }
          }
          full = std::move(scaled);
        }
        if (full.height != img.height || full.width != img.width) {
          throw ConfigError("mask for record " + rec.id + " is " + std::to_string(full.height) +
                            "x" + std::to_string(full.width) + ", image is " +
                            std::to_string(img.height) + "x" + std::to_string(img.width));
        }
        entry.masks = mask_pyramid(full);
      } else {
        for (int k = 0; k < 4; ++k) {
          const int eh = img.height >> k, ew = img.width >> k;
          if (planes[k].height != eh || planes[k].width != ew) {
            throw ConfigError("mask scale " + std::to_string(k) + " for record " + rec.id +
                              " is " + std::to_string(planes[k].height) + "x" +
                              std::to_string(planes[k].width) + ", want " + std::to_string(eh) +
                              "x" + std::to_string(ew));
          }
          entry.masks[k] = std::move(planes[k]);
        }
      }
      entry.has_masks = true;
    }
    entry.img = std::move(img);
    ds.labeled_.push_back(std::move(entry));
  }
  return ds;
}

namespace {

std::vector<int> shuffled(int count, std::uint64_t stream) {
  std::vector<int> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(stream);
  for (int i = count - 1; i > 0; --i) {
    const long j = rng.uniform_int(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

}  // namespace

long batches_per_epoch(int labeled_count, int labeled_per_batch) {
  if (labeled_per_batch < 1) throw ParamError("labeled_per_batch must be positive");
  if (labeled_count < labeled_per_batch) {
    throw ConfigError("labeled set too small: " + std::to_string(labeled_count) +
                      " images, batch needs " + std::to_string(labeled_per_batch));
  }
  return labeled_count / labeled_per_batch;
}

BatchPlan plan_batch(int labeled_count, int unlabeled_count, int labeled_per_batch,
                     int unlabeled_per_batch, std::uint64_t seed, long step) {
  if (step < 0) throw ParamError("step must be non-negative");
  if (unlabeled_per_batch < 0) throw ParamError("unlabeled_per_batch must be non-negative");
  const long bpe = batches_per_epoch(labeled_count, labeled_per_batch);
  if (unlabeled_per_batch > 0 && unlabeled_count < unlabeled_per_batch) {
    throw ConfigError("unlabeled set too small: " + std::to_string(unlabeled_count) +
                      " images, batch needs " + std::to_string(unlabeled_per_batch));
  }

  BatchPlan plan;
  plan.epoch = step / bpe;
  const long slot = step % bpe;

  const auto perm = shuffled(
      labeled_count, Rng::derive(seed, {Rng::key("shuffle"), static_cast<std::uint64_t>(plan.epoch)}));
  for (int t = 0; t < labeled_per_batch; ++t) {
    plan.labeled.push_back(perm[static_cast<std::size_t>(slot * labeled_per_batch + t)]);
  }

  if (unlabeled_per_batch > 0) {
    const auto perm_u = shuffled(
        unlabeled_count,
        Rng::derive(seed, {Rng::key("shuffle_u"), static_cast<std::uint64_t>(plan.epoch)}));
    for (int t = 0; t < unlabeled_per_batch; ++t) {
      const long idx = (slot * unlabeled_per_batch + t) % unlabeled_count;
      plan.unlabeled.push_back(perm_u[static_cast<std::size_t>(idx)]);
    }
  }
  return plan;
}

}  // namespace fundus::data
