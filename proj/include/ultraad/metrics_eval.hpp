#pragma once

#include "json.hpp"
#include "ultraad/embeddings_io.hpp"
#include "ultraad/model.hpp"
#include "ultraad/training.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ultraad {

// Mann-Whitney statistic (wins + ties/2) / (n_pos * n_neg). Labels are 0/1.
// Throws ValidationError unless both classes are present.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Average precision over the descending-score sweep with tied scores
// processed as one threshold. Throws ValidationError without positives.
double auprc(std::span<const double> scores, std::span<const int> labels);

// Macro one-vs-rest AUROC; columns of `probabilities` are classes. Classes
// lacking either positives or negatives are skipped.
double multiclass_auroc(const std::vector<RowVector>& probabilities, std::span<const int> labels);

enum class Variant { full, no_domain_prompts, no_cls_loss, no_pif };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

// Per-image and per-pixel scores gathered over a query set.
struct EvalScores {
  std::vector<std::string> image_ids;
  std::vector<int> labels;
  std::vector<double> detection;           // post-processed binary score
  std::vector<RowVector> probabilities;    // softmax of memory scores
  std::vector<double> pixel_scores;        // pooled over images with masks
  std::vector<int> pixel_labels;
  std::size_t images_with_masks = 0;
};

struct EvalMetrics {
  std::optional<double> image_auroc_binary;
  std::optional<double> image_auroc_multiclass;
  std::optional<double> pixel_auroc;
  std::optional<double> pixel_auprc;
};

struct SeedResult {
  std::uint64_t seed = 0;
  EvalMetrics metrics;
};

struct EvalReport {
  EvalMetrics metrics;  // mean over seeds for aggregated reports
  std::vector<SeedResult> per_seed;
  int shots = 0;
  std::string variant = "full";
  std::string dataset;
  std::string fingerprint;
  bool pixel_metrics_skipped = false;

  nlohmann::json to_json() const;
};

struct EvalOptions {
  bool classification_metrics = true;
};

EvalScores collect_scores(const TrainedModel& model, const Dataset& query);
EvalMetrics compute_metrics(const EvalScores& scores, const EvalOptions& opts = {});
EvalReport evaluate(const TrainedModel& model, const Dataset& query, const EvalOptions& opts = {});

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<int> shots{4, 8, 16};
  ModelConfig model;
  TrainConfig train;
  bool classification_metrics = true;
  std::string variant = "full";

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// For each shot count: per seed split, train with that seed, evaluate on the
// query remainder; one aggregated report per shot count.
std::vector<EvalReport> run_experiment(const Dataset& dataset, const PromptSet& prompts,
                                       const ExperimentConfig& cfg);
std::vector<EvalReport> run_ablation(const Dataset& dataset, const PromptSet& prompts, const ExperimentConfig& cfg,
                                     Variant variant);

// Applies an ablation variant to the experiment inputs.
void apply_variant(Variant variant, PromptSet& prompts, ExperimentConfig& cfg);

std::string config_fingerprint(const nlohmann::json& config);

void write_report_json(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
// Columns: method,shots,dataset,metric,value
void write_report_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path);

}  // namespace ultraad
