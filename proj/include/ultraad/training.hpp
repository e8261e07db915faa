#pragma once

#include "json.hpp"
#include "ultraad/autograd.hpp"
#include "ultraad/embeddings_io.hpp"
#include "ultraad/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ultraad {

struct TrainConfig {
  int epochs = 200;
  double learning_rate = 1e-3;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double lambda_cls = 1.0;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

double dice_loss(const Matrix& pred, const Matrix& gt, double eps = 1.0);
double focal_loss(const Matrix& pred, const Matrix& gt, double gamma, double alpha);
double cross_entropy(const RowVector& scores, int label);

// Average-pools the H x W mask onto the patch grid and thresholds at 0.5.
// Returns (h*w) x 1 in patch order.
Matrix downsample_mask(const EmbeddingBundle& bundle);

struct LossBreakdown {
  double dice = 0.0;   // summed over both map families, averaged over layers
  double focal = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

LossBreakdown total_loss(const EmbeddingBundle& bundle, const TrainedModel& model, const TrainConfig& cfg);

struct GradCheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> tensors;
  double max_rel_error = 0.0;
};

// Central differences on `coordinates` sampled entries of every trainable
// tensor (all entries when the tensor is smaller). Relative error uses the
// denominator max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const TrainedModel& model, const EmbeddingBundle& bundle, const TrainConfig& cfg,
                           double epsilon = 1e-4, int coordinates = 20, std::uint64_t seed = 0);

struct EpochLoss {
  int epoch = 0;
  LossBreakdown loss;
};

struct TrainResult {
  TrainedModel model;
  // Row e holds the support loss before update e; the last row is the loss
  // after the final update (epochs + 1 rows).
  std::vector<EpochLoss> trace;
};

// Full-batch Adam over the support set. P_t, L_t and the base prompts stay fixed.
TrainResult train(const Dataset& support, const PromptSet& prompts, const ModelConfig& model_cfg,
                  const TrainConfig& cfg);

// Continues optimisation of an existing model.
TrainResult train_model(TrainedModel model, const Dataset& support, const TrainConfig& cfg);

void write_loss_csv(const std::vector<EpochLoss>& trace, const std::filesystem::path& path);

namespace graph {

struct LossVars {
  ad::Var dice;
  ad::Var focal;
  ad::Var ce;
  ad::Var total;
};

LossVars total_loss(ad::Tape& tape, const ModelVars& vars, const TrainedModel& model, const EmbeddingBundle& bundle,
                    const TrainConfig& cfg);

}  // namespace graph
}  // namespace ultraad
