#include "deskpro/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

Tensor as_batch_of_one(const Tensor& img) {
  std::vector<int> shape = {1};
  for (int i = 0; i < img.ndims(); ++i) shape.push_back(img.dim(i));
  return Tensor(shape, img.raw());
}

void append_features(std::vector<double>& out, const EmbeddingGroups& g,
                     bool l2_normalize, double weight) {
  std::vector<double> part;
  for (const auto& f : g.features)
    for (int d = 0; d < f.dim(1); ++d) part.push_back(f.at2(0, d));
  if (l2_normalize) {
    double norm = 0.0;
    for (double v : part) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("zero-norm stream embedding");
    for (auto& v : part) v /= norm;
  }
  if (weight != 1.0)
    for (auto& v : part) v *= weight;
  out.insert(out.end(), part.begin(), part.end());
}

}  // namespace

PersonEmbedding embed(const LoadedSample& sample, const ReidModel* global_model,
                      const ReidModel* face_model, const EmbedOptions& opts) {
  if (!global_model && !face_model)
    throw ConfigError("embed needs at least one model");
  PersonEmbedding e;
  e.identity_id = sample.identity_id;
  e.clothing_id = sample.clothing_id;

  if (global_model) {
    const bool att = opts.use_attention && global_model->config().with_cam;
    EmbeddingGroups g = global_model->infer(as_batch_of_one(sample.image), att);
    append_features(e.vec, g, opts.l2_normalize_streams, 1.0);
    e.global_dim = static_cast<int>(e.vec.size());
  }
  const bool face_present = sample.face_clean.has_value();
  if (face_model && face_present) {
    const Tensor& face =
        opts.face_use_clean ? *sample.face_clean : *sample.face_degraded;
    EmbeddingGroups g = face_model->infer(as_batch_of_one(face), false);
    if (opts.face_stream_weight <= 0.0)
      throw ConfigError("face_stream_weight must be positive");
    append_features(e.vec, g, opts.l2_normalize_streams,
                    opts.face_stream_weight);
    e.has_face = true;
  }
  return e;
}

RetrievalResult cosine_rank(const PersonEmbedding& query,
                            const std::vector<PersonEmbedding>& gallery) {
  const int G = static_cast<int>(gallery.size());
  RetrievalResult r;
  std::vector<double> sims(static_cast<size_t>(G));
  for (int i = 0; i < G; ++i) {
    const auto& g = gallery[static_cast<size_t>(i)];
    // compare over the common sub-vector: the global prefix unless both
    // sides carry face features
    size_t dim;
    if (query.has_face && g.has_face) {
      if (query.vec.size() != g.vec.size())
        throw ShapeError("embedding dimension mismatch");
      dim = query.vec.size();
    } else {
      if (query.global_dim != g.global_dim)
        throw ShapeError("global embedding dimension mismatch");
      dim = static_cast<size_t>(query.global_dim);
      if (dim == 0)
        throw NumericError("no comparable features for gallery entry " +
                           std::to_string(i));
    }
    double dot = 0, nq = 0, ng = 0;
    for (size_t d = 0; d < dim; ++d) {
      dot += query.vec[d] * g.vec[d];
      nq += query.vec[d] * query.vec[d];
      ng += g.vec[d] * g.vec[d];
    }
    if (nq < 1e-24)
      throw NumericError("zero-norm query embedding");
    if (ng < 1e-24)
      throw NumericError("zero-norm gallery embedding at index " +
                         std::to_string(i));
    sims[static_cast<size_t>(i)] = dot / (std::sqrt(nq) * std::sqrt(ng));
  }

  r.ranked.resize(static_cast<size_t>(G));
  std::iota(r.ranked.begin(), r.ranked.end(), 0);
  std::sort(r.ranked.begin(), r.ranked.end(), [&](int a, int b) {
    const double sa = sims[static_cast<size_t>(a)];
    const double sb = sims[static_cast<size_t>(b)];
    return sa != sb ? sa > sb : a < b;
  });
  for (int idx : r.ranked) {
    r.scores.push_back(sims[static_cast<size_t>(idx)]);
    r.match.push_back(gallery[static_cast<size_t>(idx)].identity_id ==
                      query.identity_id);
  }
  r.valid.assign(static_cast<size_t>(G), 1);
  return r;
}

void apply_protocol(RetrievalResult& r, const PersonEmbedding& query,
                    const std::vector<PersonEmbedding>& gallery,
                    Protocol protocol) {
  if (protocol != Protocol::kCrossClothes) return;
  for (size_t pos = 0; pos < r.ranked.size(); ++pos) {
    const auto& g = gallery[static_cast<size_t>(r.ranked[pos])];
    if (g.identity_id == query.identity_id &&
        g.clothing_id == query.clothing_id)
      r.valid[pos] = 0;
  }
}

namespace {

// Rank (1-based, within the valid sub-list) of the first correct match.
int first_match_rank(const RetrievalResult& r) {
  int rank = 0;
  for (size_t pos = 0; pos < r.ranked.size(); ++pos) {
    if (!r.valid[pos]) continue;
    ++rank;
    if (r.match[pos]) return rank;
  }
  return -1;
}

}  // namespace

std::vector<double> cmc(const std::vector<RetrievalResult>& results) {
  if (results.empty()) throw DataError("cmc of empty result set");
  size_t max_len = 0;
  std::string bad;
  std::vector<int> ranks;
  for (size_t q = 0; q < results.size(); ++q) {
    size_t len = 0;
    for (uint8_t v : results[q].valid) len += v;
    max_len = std::max(max_len, len);
    const int rank = first_match_rank(results[q]);
    if (rank < 0) bad += (bad.empty() ? "" : ", ") + std::to_string(q);
    ranks.push_back(rank);
  }
  if (!bad.empty())
    throw ProtocolError("queries with no valid same-identity gallery entry: " +
                        bad);
  std::vector<double> curve(max_len, 0.0);
  for (int rank : ranks)
    for (size_t k = static_cast<size_t>(rank - 1); k < max_len; ++k)
      curve[k] += 1.0;
  for (auto& v : curve) v /= static_cast<double>(results.size());
  return curve;
}

double mean_average_precision(const std::vector<RetrievalResult>& results) {
  if (results.empty()) throw DataError("mAP of empty result set");
  double total = 0.0;
  for (size_t q = 0; q < results.size(); ++q) {
    int seen = 0, hits = 0;
    double ap = 0.0;
    for (size_t pos = 0; pos < results[q].ranked.size(); ++pos) {
      if (!results[q].valid[pos]) continue;
      ++seen;
      if (results[q].match[pos]) {
        ++hits;
        ap += static_cast<double>(hits) / seen;
      }
    }
    if (hits == 0)
      throw ProtocolError("query " + std::to_string(q) +
                          " has no valid same-identity gallery entry");
    total += ap / hits;
  }
  return total / static_cast<double>(results.size());
}

nlohmann::ordered_json eval_report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["protocol"] = r.protocol;
  j["checkpoint"] = r.checkpoint_id;
  j["dataset_seed"] = r.dataset_seed;
  j["cmc"] = {{"1", r.rank1}, {"5", r.rank5}, {"10", r.rank10}};
  j["map"] = r.map;
  j["cmc_curve"] = r.cmc_curve;
  j["num_queries"] = r.num_queries;
  j["num_gallery"] = r.num_gallery;
  j["skipped_queries"] = r.skipped_queries;
  return j;
}

void write_eval_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write report: " + path.string());
  f << eval_report_to_json(r).dump(1) << "\n";
}

EvalReport evaluate(const LoadedDataset& data, const ReidModel* global_model,
                    const ReidModel* face_model, const EmbedOptions& opts,
                    Protocol protocol, const std::string& checkpoint_id) {
  EvalReport rep;
  rep.protocol = protocol_name(protocol);
  rep.checkpoint_id = checkpoint_id;
  rep.dataset_seed = data.manifest.dataset_seed;

  const bool face_only = global_model == nullptr;
  std::vector<PersonEmbedding> gallery;
  for (int i : data.gallery_idx) {
    const auto& s = data.samples[static_cast<size_t>(i)];
    if (face_only && !s.face_clean) continue;
    gallery.push_back(embed(s, global_model, face_model, opts));
  }
  if (gallery.empty()) throw DataError("empty gallery after embedding");

  std::vector<RetrievalResult> results;
  for (int i : data.query_idx) {
    const auto& s = data.samples[static_cast<size_t>(i)];
    if (face_only && !s.face_clean) {
      ++rep.skipped_queries;
      continue;
    }
    PersonEmbedding q = embed(s, global_model, face_model, opts);
    RetrievalResult r = cosine_rank(q, gallery);
    apply_protocol(r, q, gallery, protocol);
    if (face_only && first_match_rank(r) < 0) {
      // all same-identity gallery entries were faceless for this query
      ++rep.skipped_queries;
      continue;
    }
    results.push_back(std::move(r));
  }
  if (results.empty()) throw DataError("no usable queries");

  rep.cmc_curve = cmc(results);
  rep.map = mean_average_precision(results);
  auto at = [&](size_t k) {
    return rep.cmc_curve[std::min(k, rep.cmc_curve.size()) - 1];
  };
  rep.rank1 = at(1);
  rep.rank5 = at(5);
  rep.rank10 = at(10);
  rep.num_queries = static_cast<int>(results.size());
  rep.num_gallery = static_cast<int>(gallery.size());
  return rep;
}

}  // namespace deskpro
