#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deskpro/checkpoint.hpp"
#include "deskpro/dataset.hpp"
#include "deskpro/losses.hpp"
#include "deskpro/model.hpp"

namespace deskpro {

struct OptimConfig {
  std::string kind = "adam";
  double lr = 1e-3;
  int steps = 2000;
};

struct BatchConfig {
  int p = 4;  // identities per batch
  int k = 4;  // samples per identity
};

struct AblationFlags {
  bool use_global = true;
  bool use_cam = true;
  bool use_att_loss = true;
  bool use_face_stream = true;
  // student_plain (phi_s-), student_distilled (phi_s+), teacher (phi_t)
  std::string face_variant = "student_distilled";
};

struct ModelDims {
  int cf = 32;
  int embedding_dim = 64;
  int face_cf = 16;
  int face_embedding_dim = 64;
  bool l2_normalize_streams = false;
  std::string mask_resize = "area";
};

struct TrainConfig {
  OptimConfig optimizer;
  BatchConfig batch;
  LossWeights loss;
  AblationFlags ablation;
  ModelDims model;
  uint64_t seed = 1;

  void validate() const;
};

nlohmann::ordered_json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);
// Dotted-path override, e.g. "optimizer.lr=0.0005".
void apply_override(nlohmann::ordered_json& j, const std::string& key_value);

// Deterministic P*K batch: pure function of (seed, step). Returns dataset
// sample indices, K per identity.
std::vector<int> sample_batch(const LoadedDataset& data, int p, int k,
                              uint64_t seed, int step,
                              bool face_bearing_only = false);

struct StepLog {
  int step = 0;
  double l_att = 0, l_trip = 0, l_fkp = 0, l_ce_s = 0, l_ce_g = 0, total = 0;
};

void write_metrics_log(const std::vector<StepLog>& logs,
                       const std::filesystem::path& path);

struct ProbeStats {
  // mean attention over ground-truth cloth / non-cloth probe pixels
  std::optional<double> att_cloth_start, att_cloth_end, att_noncloth_end;
  // mean KL(teacher || student) on a fixed probe batch
  std::optional<double> kl_start, kl_end;
};

struct TeacherResult {
  std::unique_ptr<ReidModel> teacher;
  std::vector<StepLog> logs;
};

struct JointResult {
  std::unique_ptr<ReidModel> global;   // null when !use_global
  std::unique_ptr<ReidModel> student;  // null unless a student was trained
  std::vector<StepLog> logs;
  ProbeStats probes;
};

// Phase 1: teacher on clean faces, CE + batch-hard triplet.
TeacherResult pretrain_teacher(const LoadedDataset& data,
                               const TrainConfig& cfg);

// Phase 2: global stream and/or student under the total loss with the
// frozen teacher. teacher may be null when the config does not need one.
JointResult train_joint(const LoadedDataset& data, const ReidModel* teacher,
                        const TrainConfig& cfg);

// Checkpoint adapters.
Checkpoint teacher_checkpoint(const ReidModel& teacher, const TrainConfig& cfg,
                              uint64_t dataset_seed);
Checkpoint joint_checkpoint(const JointResult& r, const TrainConfig& cfg,
                            uint64_t dataset_seed);
std::unique_ptr<ReidModel> model_from_checkpoint(const Checkpoint& ck,
                                                 const std::string& prefix);

// Rebuilds the face-stream model config used by teacher/student.
ModelConfig face_model_config(const LoadedDataset& data, const TrainConfig& cfg);
ModelConfig global_model_config(const LoadedDataset& data,
                                const TrainConfig& cfg);

// Fresh (untrained) student with the init used by train_joint.
std::unique_ptr<ReidModel> fresh_student(const LoadedDataset& data,
                                         const TrainConfig& cfg);

// Mean KL(teacher || student) at the config temperature over the probe batch
// (face-bearing eval samples). Used by the distillation-efficacy checks.
double probe_mean_kl(const LoadedDataset& data, const ReidModel& teacher,
                     const ReidModel& student, double tau);

}  // namespace deskpro
