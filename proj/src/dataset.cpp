#include "deskpro/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "deskpro/errors.hpp"
#include "deskpro/png_io.hpp"

namespace deskpro {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const std::vector<CategoryRow>& category_table() {
  static const std::vector<CategoryRow> table = {
      {kBackground, "background", false}, {kHeadFace, "head_face", false},
      {kArm, "arm", false},               {kLeg, "leg", false},
      {kUpperClothes, "upper_clothes", true},
      {kLowerClothes, "lower_clothes", true},
  };
  return table;
}

std::set<int> cloth_related_codes() {
  std::set<int> c;
  for (const auto& row : category_table())
    if (row.is_cloth_related) c.insert(row.code);
  return c;
}

std::set<int> known_codes() {
  std::set<int> c;
  for (const auto& row : category_table()) c.insert(row.code);
  return c;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  throw StateError("bad split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "query") return Split::kQuery;
  if (name == "gallery") return Split::kGallery;
  throw DataError("unknown split name: " + name);
}

std::string protocol_name(Protocol p) {
  return p == Protocol::kCrossClothes ? "cross_clothes" : "same_clothes";
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "cross_clothes") return Protocol::kCrossClothes;
  if (name == "same_clothes") return Protocol::kSameClothes;
  throw ConfigError("unknown protocol: " + name);
}

int DatasetManifest::num_identities() const {
  int n = 0;
  for (const auto& s : samples) n = std::max(n, s.identity_id + 1);
  return n;
}

int DatasetManifest::num_outfits() const {
  int n = 0;
  for (const auto& s : samples) n = std::max(n, s.clothing_id + 1);
  return n;
}

namespace {

double u01(uint64_t h) {
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

constexpr uint64_t kBodyKey = 0xb0d7;
constexpr uint64_t kSkinKey = 0x5c19;
constexpr uint64_t kFaceKey = 0xfacE;
constexpr uint64_t kOutfitKey = 0xc107;
constexpr uint64_t kDegradeKey = 0xde67;

struct BodyShape {
  int torso_half, head_half, arm_w, leg_w, leg_gap;
  std::array<double, 3> skin;
};

// Skin comes from a small shared palette so it only coarsely groups
// identities; an identity keeps its tone across outfits.
std::array<double, 3> skin_tone_of(uint64_t seed, int id) {
  const uint64_t tone =
      mix_seed(mix_seed(seed, kSkinKey), static_cast<uint64_t>(id)) % 4;
  const uint64_t s = mix_seed(mix_seed(seed, kSkinKey), ~tone);
  return {0.55 + 0.30 * u01(mix_seed(s, 1)),
          0.45 + 0.25 * u01(mix_seed(s, 2)),
          0.35 + 0.20 * u01(mix_seed(s, 3))};
}

// Silhouette follows the outfit (bulky vs slim clothing), so body geometry
// is a clothing cue rather than an identity cue.
BodyShape body_shape_of(uint64_t seed, int id, int outfit, int W,
                        int face_size) {
  const uint64_t h = mix_seed(
      mix_seed(mix_seed(seed, kBodyKey), static_cast<uint64_t>(id)),
      static_cast<uint64_t>(outfit));
  const uint64_t hd = mix_seed(mix_seed(seed, kBodyKey), static_cast<uint64_t>(id));
  BodyShape b;
  b.torso_half = W / 4 + static_cast<int>(mix_seed(h, 1) % (W / 8 + 1));
  b.head_half = face_size / 2 + static_cast<int>(mix_seed(hd, 2) % 3);
  b.arm_w = 2 + static_cast<int>(mix_seed(h, 3) % 3);
  b.leg_w = 3 + static_cast<int>(mix_seed(h, 4) % 3);
  b.leg_gap = 2 + static_cast<int>(mix_seed(h, 5) % 4);
  b.skin = skin_tone_of(seed, id);
  return b;
}

}  // namespace

uint8_t quantize_channel(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

bool sample_is_faceless(int sample_index, double faceless_fraction) {
  const double f = faceless_fraction;
  return std::floor((sample_index + 1) * f) > std::floor(sample_index * f);
}

std::array<double, 3> outfit_color(uint64_t dataset_seed, int clothing_id,
                                   int category_code, int i, int j) {
  const uint64_t h = mix_seed(mix_seed(mix_seed(dataset_seed, kOutfitKey),
                                       static_cast<uint64_t>(clothing_id)),
                              static_cast<uint64_t>(category_code));
  const int period = 2 + static_cast<int>(h % 3);
  const bool odd = ((i / period) + (j / period)) % 2 != 0;
  const uint64_t ch = mix_seed(h, odd ? 7 : 11);
  return {0.10 + 0.80 * u01(mix_seed(ch, 1)),
          0.10 + 0.80 * u01(mix_seed(ch, 2)),
          0.10 + 0.80 * u01(mix_seed(ch, 3))};
}

std::array<double, 3> face_pattern_color(uint64_t dataset_seed, int identity_id,
                                         int u, int v, int face_size) {
  // Skin-toned base plus an identity-keyed block modulation; blocks are
  // face_size/4 pixels so a 4x downscale keeps them resolvable.
  const std::array<double, 3> skin = skin_tone_of(dataset_seed, identity_id);
  const int bs = std::max(1, face_size / 4);
  const uint64_t h = mix_seed(
      mix_seed(mix_seed(dataset_seed, kFaceKey), static_cast<uint64_t>(identity_id)),
      static_cast<uint64_t>((u / bs) * 16 + (v / bs)));
  std::array<double, 3> c;
  for (int k = 0; k < 3; ++k) {
    const double m = (u01(mix_seed(h, static_cast<uint64_t>(k + 1))) - 0.5) * 0.6;
    c[static_cast<size_t>(k)] =
        std::clamp(skin[static_cast<size_t>(k)] + m, 0.0, 1.0);
  }
  return c;
}

Tensor degrade_face(const Tensor& face_clean, const DegradeConfig& cfg) {
  if (face_clean.ndims() != 3 || face_clean.dim(2) != 3)
    throw ShapeError("degrade_face expects [h,w,3]");
  const int h = face_clean.dim(0), w = face_clean.dim(1);
  if (cfg.downscale_factor < 2)
    throw ConfigError("downscale_factor must be >= 2");
  if (cfg.downscale_factor > std::min(h, w))
    throw ConfigError("downscale_factor exceeds face dims");
  if (cfg.noise_std < 0.0) throw ConfigError("noise_std must be >= 0");

  const int f = cfg.downscale_factor;
  const int bh = (h + f - 1) / f, bw = (w + f - 1) / f;
  Tensor small({bh, bw, 3});
  for (int bi = 0; bi < bh; ++bi)
    for (int bj = 0; bj < bw; ++bj)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        int cnt = 0;
        for (int i = bi * f; i < std::min(h, (bi + 1) * f); ++i)
          for (int j = bj * f; j < std::min(w, (bj + 1) * f); ++j) {
            acc += face_clean[(static_cast<int64_t>(i) * w + j) * 3 + c];
            ++cnt;
          }
        small[(static_cast<int64_t>(bi) * bw + bj) * 3 + c] = acc / cnt;
      }

  Tensor out({h, w, 3});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<int64_t>(i) * w + j) * 3 + c] =
            small[(static_cast<int64_t>(i / f) * bw + (j / f)) * 3 + c];

  if (cfg.noise_std > 0.0) {
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (auto& v : out.raw()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
  return out;
}

namespace {

struct Rendered {
  Tensor image;  // [H,W,3]
  std::vector<int> mask;
  std::optional<FaceBox> face_box;
  // The image itself carries the degraded face (a capture, not a studio
  // shot); the clean crop plays the role of a restored face.
  std::optional<Tensor> face_clean, face_degraded;
};

Rendered render_sample(const GenConfig& cfg, int identity, int clothing,
                       int sample_index) {
  const int H = cfg.image_height, W = cfg.image_width, fsz = cfg.face_size;
  std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<uint64_t>(sample_index)));
  const int dx = static_cast<int>(rng() % 5) - 2;
  const int dy = static_cast<int>(rng() % 3) - 1;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double bg_base = 0.10 + 0.12 * uni(rng);

  Rendered r;
  r.image = Tensor({H, W, 3});
  r.mask.assign(static_cast<size_t>(H) * W, kBackground);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double n = 0.06 * uni(rng);
      for (int c = 0; c < 3; ++c) r.image.at3(i, j, c) = bg_base + n;
    }

  const BodyShape body = body_shape_of(cfg.seed, identity, clothing, W, fsz);
  const int cx = W / 2 + dx;
  const int head_top = 2 + dy;
  const int head_end = head_top + fsz + 2;
  const int upper_end = H * 5 / 8 + dy;
  const int lower_end = H * 13 / 16 + dy;
  const int legs_end = H - 2;

  auto paint = [&](int i, int j, const std::array<double, 3>& col, int code) {
    if (i < 0 || i >= H || j < 0 || j >= W) return;
    for (int c = 0; c < 3; ++c) r.image.at3(i, j, c) = col[static_cast<size_t>(c)];
    r.mask[static_cast<size_t>(i) * W + j] = code;
  };

  // head
  for (int i = head_top; i < head_end; ++i)
    for (int j = cx - body.head_half; j < cx + body.head_half; ++j)
      paint(i, j, body.skin, kHeadFace);

  // face pattern patch; the image gets the degraded rendition while the
  // clean crop stands in for a restored face
  const bool faceless = sample_is_faceless(sample_index, cfg.faceless_fraction);
  if (!faceless) {
    FaceBox box;
    box.w = box.h = fsz;
    box.y = std::clamp(head_top + 1, 0, H - fsz);
    box.x = std::clamp(cx - fsz / 2, 0, W - fsz);
    Tensor clean({fsz, fsz, 3});
    for (int u = 0; u < fsz; ++u)
      for (int v = 0; v < fsz; ++v) {
        const auto col = face_pattern_color(cfg.seed, identity, u, v, fsz);
        for (int c = 0; c < 3; ++c)
          clean.at3(u, v, c) = col[static_cast<size_t>(c)];
      }
    DegradeConfig dc;
    dc.downscale_factor = cfg.degrade_downscale;
    dc.noise_std = cfg.degrade_noise_std;
    dc.seed = mix_seed(mix_seed(cfg.seed, kDegradeKey),
                       static_cast<uint64_t>(sample_index));
    Tensor degraded = degrade_face(clean, dc);
    for (int u = 0; u < fsz; ++u)
      for (int v = 0; v < fsz; ++v)
        paint(box.y + u, box.x + v,
              {degraded.at3(u, v, 0), degraded.at3(u, v, 1),
               degraded.at3(u, v, 2)},
              kHeadFace);
    r.face_box = box;
    r.face_clean = std::move(clean);
    r.face_degraded = std::move(degraded);
  }

  // torso + arms
  const int arm_end = head_end + (upper_end - head_end) * 3 / 4;
  for (int i = head_end; i < upper_end; ++i) {
    for (int j = cx - body.torso_half; j < cx + body.torso_half; ++j)
      paint(i, j, outfit_color(cfg.seed, clothing, kUpperClothes, i, j),
            kUpperClothes);
    if (i < arm_end) {
      for (int j = cx - body.torso_half - body.arm_w; j < cx - body.torso_half;
           ++j)
        paint(i, j, body.skin, kArm);
      for (int j = cx + body.torso_half; j < cx + body.torso_half + body.arm_w;
           ++j)
        paint(i, j, body.skin, kArm);
    }
  }

  // lower clothes
  for (int i = upper_end; i < lower_end; ++i)
    for (int j = cx - body.torso_half + 1; j < cx + body.torso_half - 1; ++j)
      paint(i, j, outfit_color(cfg.seed, clothing, kLowerClothes, i, j),
            kLowerClothes);

  // legs
  for (int i = lower_end; i < legs_end; ++i) {
    for (int j = cx - body.leg_gap / 2 - body.leg_w; j < cx - body.leg_gap / 2;
         ++j)
      paint(i, j, body.skin, kLeg);
    for (int j = cx + (body.leg_gap + 1) / 2;
         j < cx + (body.leg_gap + 1) / 2 + body.leg_w; ++j)
      paint(i, j, body.skin, kLeg);
  }
  return r;
}

PngImage to_png_rgb(const Tensor& img) {
  const int H = img.dim(0), W = img.dim(1);
  PngImage p;
  p.width = W;
  p.height = H;
  p.channels = 3;
  p.pixels.resize(static_cast<size_t>(H) * W * 3);
  for (int64_t i = 0; i < img.numel(); ++i)
    p.pixels[static_cast<size_t>(i)] = quantize_channel(img[i]);
  return p;
}

Tensor from_png_rgb(const PngImage& p) {
  Tensor t({p.height, p.width, 3});
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = p.pixels[static_cast<size_t>(i)] / 255.0;
  return t;
}

std::string sample_stem(int id, int outfit, int k) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%03d_%d_%d", id, outfit, k);
  return buf;
}

}  // namespace

DatasetManifest generate_dataset(const GenConfig& cfg,
                                 const std::filesystem::path& root) {
  if (cfg.image_height <= 0 || cfg.image_width <= 0 || cfg.face_size <= 0)
    throw ConfigError("image/face dims must be positive");
  if (cfg.num_identities < 2) throw ConfigError("need at least 2 identities");
  if (cfg.outfits_per_identity < 2) throw ConfigError("need >= 2 outfits");
  if (cfg.samples_per_outfit < 1) throw ConfigError("need >= 1 sample/outfit");
  if (cfg.face_size > cfg.image_width ||
      cfg.face_size + 4 >= cfg.image_height * 5 / 8)
    throw ConfigError("face_size too large for image dims");
  if (cfg.faceless_fraction < 0.0 || cfg.faceless_fraction > 1.0)
    throw ConfigError("faceless_fraction must lie in [0,1]");

  std::error_code ec;
  for (const char* sub : {"images", "masks", "faces/clean", "faces/degraded"}) {
    fs::create_directories(root / sub, ec);
    if (ec) throw IoError("cannot create output directory: " + (root / sub).string());
  }

  DatasetManifest m;
  m.dataset_seed = cfg.seed;
  m.image_height = cfg.image_height;
  m.image_width = cfg.image_width;
  m.face_size = cfg.face_size;
  m.samples_per_outfit = cfg.samples_per_outfit;
  m.categories = category_table();

  int sample_index = 0;
  for (int id = 0; id < cfg.num_identities; ++id) {
    for (int outfit = 0; outfit < cfg.outfits_per_identity; ++outfit) {
      for (int k = 0; k < cfg.samples_per_outfit; ++k, ++sample_index) {
        Rendered r = render_sample(cfg, id, outfit, sample_index);
        const std::string stem = sample_stem(id, outfit, k);

        SampleRecord rec;
        rec.identity_id = id;
        rec.clothing_id = outfit;
        rec.sample_index = sample_index;
        rec.image_path = "images/" + stem + ".png";
        rec.mask_path = "masks/" + stem + ".png";
        write_png(root / rec.image_path, to_png_rgb(r.image));

        PngImage mp;
        mp.width = cfg.image_width;
        mp.height = cfg.image_height;
        mp.channels = 1;
        mp.pixels.assign(r.mask.begin(), r.mask.end());
        write_png(root / rec.mask_path, mp);

        if (r.face_box) {
          rec.face_box = r.face_box;
          rec.face_clean_path = "faces/clean/" + stem + ".png";
          rec.face_degraded_path = "faces/degraded/" + stem + ".png";
          write_png(root / *rec.face_clean_path, to_png_rgb(*r.face_clean));
          write_png(root / *rec.face_degraded_path,
                    to_png_rgb(*r.face_degraded));
        }
        m.samples.push_back(std::move(rec));
      }
    }
  }

  m = split_protocol(std::move(m), Protocol::kCrossClothes);
  write_manifest(m, root);
  return m;
}

DatasetManifest split_protocol(DatasetManifest manifest, Protocol protocol) {
  std::map<std::pair<int, int>, std::vector<int>> groups;
  for (size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    groups[{s.identity_id, s.clothing_id}].push_back(static_cast<int>(i));
  }
  std::map<int, std::set<int>> outfits_of;
  for (const auto& [key, idxs] : groups) outfits_of[key.first].insert(key.second);
  for (const auto& [id, outfits] : outfits_of) {
    if (protocol == Protocol::kCrossClothes && outfits.size() < 2)
      throw ProtocolError("cross_clothes needs >= 2 outfits for identity " +
                          std::to_string(id));
  }
  for (const auto& [key, idxs] : groups) {
    if (idxs.size() < 3)
      throw ProtocolError(
          "need >= 3 samples per (identity, outfit) to reserve query/gallery");
  }

  for (auto& s : manifest.samples) s.split = Split::kTrain;
  for (const auto& [key, idxs] : groups) {
    const auto [id, outfit] = key;
    const int queryish = idxs[idxs.size() - 2];
    const int galleryish = idxs[idxs.size() - 1];
    if (protocol == Protocol::kCrossClothes) {
      if (outfit == 0)
        manifest.samples[static_cast<size_t>(queryish)].split = Split::kQuery;
      else
        manifest.samples[static_cast<size_t>(galleryish)].split = Split::kGallery;
    } else {
      if (outfit == 0) {
        manifest.samples[static_cast<size_t>(queryish)].split = Split::kQuery;
        manifest.samples[static_cast<size_t>(galleryish)].split = Split::kGallery;
      }
    }
  }
  return manifest;
}

void write_manifest(const DatasetManifest& m, const fs::path& root) {
  ordered_json j;
  j["dataset_seed"] = m.dataset_seed;
  j["image_height"] = m.image_height;
  j["image_width"] = m.image_width;
  j["face_size"] = m.face_size;
  j["samples_per_outfit"] = m.samples_per_outfit;
  j["category_table"] = ordered_json::array();
  for (const auto& row : m.categories)
    j["category_table"].push_back({{"code", row.code},
                                   {"name", row.name},
                                   {"is_cloth_related", row.is_cloth_related}});
  j["samples"] = ordered_json::array();
  for (const auto& s : m.samples) {
    ordered_json sj;
    sj["image"] = s.image_path;
    sj["mask"] = s.mask_path;
    if (s.face_clean_path) sj["face_clean"] = *s.face_clean_path;
    if (s.face_degraded_path) sj["face_degraded"] = *s.face_degraded_path;
    if (s.face_box)
      sj["face_box"] = {{"x", s.face_box->x},
                        {"y", s.face_box->y},
                        {"w", s.face_box->w},
                        {"h", s.face_box->h}};
    sj["identity_id"] = s.identity_id;
    sj["clothing_id"] = s.clothing_id;
    sj["sample_index"] = s.sample_index;
    sj["split"] = split_name(s.split);
    j["samples"].push_back(std::move(sj));
  }
  std::ofstream f(root / "manifest.json", std::ios::binary);
  if (!f) throw IoError("cannot write manifest.json under " + root.string());
  f << j.dump(1) << "\n";
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream f(root / "manifest.json");
  if (!f) throw IoError("missing manifest.json under " + root.string());
  ordered_json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("manifest parse error: ") + e.what());
  }
  DatasetManifest m;
  m.dataset_seed = j.at("dataset_seed").get<uint64_t>();
  m.image_height = j.at("image_height").get<int>();
  m.image_width = j.at("image_width").get<int>();
  m.face_size = j.at("face_size").get<int>();
  m.samples_per_outfit = j.at("samples_per_outfit").get<int>();
  for (const auto& row : j.at("category_table"))
    m.categories.push_back({row.at("code").get<int>(),
                            row.at("name").get<std::string>(),
                            row.at("is_cloth_related").get<bool>()});
  for (const auto& sj : j.at("samples")) {
    SampleRecord s;
    s.image_path = sj.at("image").get<std::string>();
    s.mask_path = sj.at("mask").get<std::string>();
    if (sj.contains("face_clean"))
      s.face_clean_path = sj.at("face_clean").get<std::string>();
    if (sj.contains("face_degraded"))
      s.face_degraded_path = sj.at("face_degraded").get<std::string>();
    if (sj.contains("face_box")) {
      const auto& b = sj.at("face_box");
      s.face_box = FaceBox{b.at("x").get<int>(), b.at("y").get<int>(),
                           b.at("w").get<int>(), b.at("h").get<int>()};
    }
    s.identity_id = sj.at("identity_id").get<int>();
    s.clothing_id = sj.at("clothing_id").get<int>();
    s.sample_index = sj.at("sample_index").get<int>();
    s.split = split_from_name(sj.at("split").get<std::string>());
    m.samples.push_back(std::move(s));
  }
  return m;
}

LoadedDataset load_dataset(const fs::path& root) {
  LoadedDataset d;
  d.manifest = read_manifest(root);
  d.num_identities = d.manifest.num_identities();
  const int W = d.manifest.image_width;

  for (size_t i = 0; i < d.manifest.samples.size(); ++i) {
    const auto& rec = d.manifest.samples[i];
    LoadedSample s;
    PngImage img = read_png(root / rec.image_path);
    if (img.channels != 3 || img.width != W ||
        img.height != d.manifest.image_height)
      throw DataError("image geometry mismatch: " + rec.image_path);
    s.image = from_png_rgb(img);

    PngImage mask = read_png(root / rec.mask_path);
    if (mask.channels != 1) throw DataError("mask must be single channel");
    s.mask.assign(mask.pixels.begin(), mask.pixels.end());

    if (rec.face_clean_path)
      s.face_clean = from_png_rgb(read_png(root / *rec.face_clean_path));
    if (rec.face_degraded_path)
      s.face_degraded = from_png_rgb(read_png(root / *rec.face_degraded_path));
    s.face_box = rec.face_box;
    s.identity_id = rec.identity_id;
    s.clothing_id = rec.clothing_id;
    s.split = rec.split;

    const int idx = static_cast<int>(i);
    switch (s.split) {
      case Split::kTrain: d.train_idx.push_back(idx); break;
      case Split::kQuery: d.query_idx.push_back(idx); break;
      case Split::kGallery: d.gallery_idx.push_back(idx); break;
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace deskpro
