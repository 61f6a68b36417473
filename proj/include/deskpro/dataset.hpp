#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deskpro/tensor.hpp"

namespace deskpro {

// Parsing categories. Codes are stable; upper/lower clothes form the
// cloth-related set C.
enum Category : int {
  kBackground = 0,
  kHeadFace = 1,
  kArm = 2,
  kLeg = 3,
  kUpperClothes = 4,
  kLowerClothes = 5,
};

struct CategoryRow {
  int code;
  std::string name;
  bool is_cloth_related;
};

const std::vector<CategoryRow>& category_table();
std::set<int> cloth_related_codes();
std::set<int> known_codes();

struct GenConfig {
  uint64_t seed = 1;
  int num_identities = 20;
  int outfits_per_identity = 3;
  int samples_per_outfit = 6;
  int image_height = 64;
  int image_width = 32;
  int face_size = 16;
  double faceless_fraction = 0.1;
  int degrade_downscale = 8;
  double degrade_noise_std = 0.25;
};

struct DegradeConfig {
  int downscale_factor = 8;
  double noise_std = 0.25;
  uint64_t seed = 0;
};

struct FaceBox {
  int x = 0, y = 0, w = 0, h = 0;
};

enum class Split { kTrain, kQuery, kGallery };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

enum class Protocol { kCrossClothes, kSameClothes };
std::string protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

struct SampleRecord {
  std::string image_path;
  std::string mask_path;
  std::optional<std::string> face_clean_path;
  std::optional<std::string> face_degraded_path;
  std::optional<FaceBox> face_box;
  int identity_id = 0;
  int clothing_id = 0;
  int sample_index = 0;  // global index, also the per-sample seed key
  Split split = Split::kTrain;
};

struct DatasetManifest {
  uint64_t dataset_seed = 0;
  int image_height = 0, image_width = 0, face_size = 0;
  int samples_per_outfit = 0;
  std::vector<CategoryRow> categories;
  std::vector<SampleRecord> samples;

  int num_identities() const;
  int num_outfits() const;
};

// Deterministic renderer + writer. Assigns the cross-clothes splits by
// default; re-run split_protocol to switch.
DatasetManifest generate_dataset(const GenConfig& cfg,
                                 const std::filesystem::path& root);

// Downscale by block averaging, upsample back (nearest), add seeded noise,
// clip to [0,1]. face is [h,w,3].
Tensor degrade_face(const Tensor& face_clean, const DegradeConfig& cfg);

// Reassigns query/gallery/train splits for the given protocol.
DatasetManifest split_protocol(DatasetManifest manifest, Protocol protocol);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& root);
DatasetManifest read_manifest(const std::filesystem::path& root);

// ---- in-memory dataset for training/eval ----

struct LoadedSample {
  Tensor image;  // [H,W,3] in [0,1]
  std::vector<int> mask;
  std::optional<Tensor> face_clean, face_degraded;  // [f,f,3]
  std::optional<FaceBox> face_box;
  int identity_id = 0, clothing_id = 0;
  Split split = Split::kTrain;
};

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<LoadedSample> samples;
  std::vector<int> train_idx, query_idx, gallery_idx;
  int num_identities = 0;
};

LoadedDataset load_dataset(const std::filesystem::path& root);

// Rendering internals, exposed so tests can verify mask fidelity and
// determinism against the closed-form texture definitions.
bool sample_is_faceless(int sample_index, double faceless_fraction);
std::array<double, 3> outfit_color(uint64_t dataset_seed, int clothing_id,
                                   int category_code, int i, int j);
std::array<double, 3> face_pattern_color(uint64_t dataset_seed, int identity_id,
                                         int u, int v, int face_size);
uint8_t quantize_channel(double v);

}  // namespace deskpro
