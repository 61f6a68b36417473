#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deskpro/dataset.hpp"
#include "deskpro/model.hpp"

namespace deskpro {

// Concatenated pre-classifier features: global branches first, then (when a
// face is present) the face-stream branches.
struct PersonEmbedding {
  std::vector<double> vec;
  int global_dim = 0;  // length of the global prefix (0 for face-only models)
  bool has_face = false;
  int identity_id = 0;
  int clothing_id = 0;
};

struct EmbedOptions {
  bool l2_normalize_streams = false;
  bool use_attention = true;  // only honored when the global model has a CAM
  // Teacher-at-inference variants see the restored (clean) face crop.
  bool face_use_clean = false;
  // Relative weight of the face stream in the concatenation (cosine scoring
  // makes it a pure mixing weight when streams are normalized).
  double face_stream_weight = 1.0;
};

// Either model may be null; at least one must be present, and a sample
// without a face yields a global-only embedding.
PersonEmbedding embed(const LoadedSample& sample, const ReidModel* global_model,
                      const ReidModel* face_model, const EmbedOptions& opts);

struct RetrievalResult {
  std::vector<int> ranked;      // gallery indices, best first
  std::vector<double> scores;   // cosine similarities, non-increasing
  std::vector<uint8_t> match;   // same identity as query
  std::vector<uint8_t> valid;   // survives protocol filtering
};

// Cosine ranking with stable tie-breaking by gallery index. When either side
// lacks a face, similarity is computed over the global prefix.
RetrievalResult cosine_rank(const PersonEmbedding& query,
                            const std::vector<PersonEmbedding>& gallery);

// Marks protocol-invalid gallery entries (cross-clothes: same identity and
// same clothing as the query).
void apply_protocol(RetrievalResult& r, const PersonEmbedding& query,
                    const std::vector<PersonEmbedding>& gallery,
                    Protocol protocol);

// CMC(k) for k = 1..|gallery| over protocol-filtered rankings.
std::vector<double> cmc(const std::vector<RetrievalResult>& results);
double mean_average_precision(const std::vector<RetrievalResult>& results);

struct EvalReport {
  std::string protocol;
  std::string checkpoint_id;
  uint64_t dataset_seed = 0;
  double rank1 = 0, rank5 = 0, rank10 = 0, map = 0;
  std::vector<double> cmc_curve;
  int num_queries = 0, num_gallery = 0;
  int skipped_queries = 0;  // queries unusable for this model (no face)
};

nlohmann::ordered_json eval_report_to_json(const EvalReport& r);
void write_eval_report(const EvalReport& r, const std::filesystem::path& path);

// Full pipeline: embed query+gallery, rank, filter, score.
EvalReport evaluate(const LoadedDataset& data, const ReidModel* global_model,
                    const ReidModel* face_model, const EmbedOptions& opts,
                    Protocol protocol, const std::string& checkpoint_id);

}  // namespace deskpro
