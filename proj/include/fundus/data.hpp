#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundus/common.hpp"
#include "fundus/degrade.hpp"
#include "fundus/image.hpp"
#include "fundus/rng.hpp"

namespace fundus::data {

// Single-channel raster in [0,1].
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<double> v;
  bool empty() const { return v.empty(); }
};

struct ManifestRecord {
  enum class Role { kLabeledHigh, kUnlabeledLow };
  std::string id;
  std::string image_path;
  Role role = Role::kLabeledHigh;
  std::vector<std::string> mask_paths;  // none, one full-resolution, or four scales
};

struct Manifest {
  int schema_version = 1;
  std::string dataset;
  std::vector<ManifestRecord> records;

  nlohmann::json to_json() const;
};

// Parses, resolves paths against the manifest's directory, and validates:
// unique ids, existing files, no masks on unlabeled records.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

// Threshold (channel mean > 0.02), keep the largest connected component,
// fill enclosed holes. All-dark images give an empty mask.
std::vector<std::uint8_t> fov_mask(const FundusImage& img);

// Bilinear resample to side x side (clipped); any attached mask moves by
// nearest neighbor. The side must be a multiple of 16.
FundusImage resize(const FundusImage& img, int side);

// Four-scale soft pyramid: each level is the 2x2 box average of the previous.
std::array<Plane, 4> mask_pyramid(const Plane& full);

struct SamplePair {
  FundusImage low;
  FundusImage high;
  bool has_masks = false;
  std::array<Plane, 4> masks;
  degrade::DegradationRecord record;
};

// Samples a degradation for the clean image and packages the training pair.
SamplePair build_pair(const FundusImage& high, const std::array<Plane, 4>* masks, Rng& rng,
                      const degrade::SamplerConfig& cfg);

// Everything decoded up front; toy-scale datasets fit easily in memory.
class Dataset {
 public:
  static Dataset load(const Manifest& manifest, int resize_side = 0);

  int labeled_count() const { return static_cast<int>(labeled_.size()); }
  int unlabeled_count() const { return static_cast<int>(unlabeled_.size()); }
  const std::string& labeled_id(int i) const { return labeled_.at(i).id; }
  const FundusImage& labeled_high(int i) const { return labeled_.at(i).img; }
  const std::array<Plane, 4>* labeled_masks(int i) const {
    return labeled_.at(i).has_masks ? &labeled_.at(i).masks : nullptr;
  }
  const std::string& unlabeled_id(int i) const { return unlabeled_.at(i).id; }
  const FundusImage& unlabeled(int i) const { return unlabeled_.at(i).img; }

 private:
  struct Labeled {
    std::string id;
    FundusImage img;
    bool has_masks = false;
    std::array<Plane, 4> masks;
  };
  struct Unlabeled {
    std::string id;
    FundusImage img;
  };
  std::vector<Labeled> labeled_;
  std::vector<Unlabeled> unlabeled_;
};

// Deterministic epoch-shuffled batch composition. Every labeled index appears
// exactly once per epoch (when the count divides evenly); unlabeled indices
// cycle through their own per-epoch shuffle.
struct BatchPlan {
  long epoch = 0;
  std::vector<int> labeled;
  std::vector<int> unlabeled;
};

long batches_per_epoch(int labeled_count, int labeled_per_batch);
BatchPlan plan_batch(int labeled_count, int unlabeled_count, int labeled_per_batch,
                     int unlabeled_per_batch, std::uint64_t seed, long step);

}  // namespace fundus::data
