#pragma once

#include "json.hpp"
#include "ultraad/anomaly_maps.hpp"
#include "ultraad/autograd.hpp"
#include "ultraad/embeddings_io.hpp"
#include "ultraad/memory_bank.hpp"
#include "ultraad/prompt_fusion.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ultraad {

enum class ImageScoreSource {
  memory,  // 1 - softmax(memory classifier scores)[0]
  prompt,  // two-way prompt softmax on the class token
};

struct ModelConfig {
  double tau = 0.07;
  int heads = 4;
  bool attention_scale = true;
  bool attention_out_proj = true;
  bool attention_residual = true;
  bool use_fusion = true;  // false: second map family reuses adapted patches with w'
  ClassifierOptions classifier;
  ImageScoreSource image_score = ImageScoreSource::memory;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainedModel {
  ModelConfig config;
  MiniNetParams mini_net;
  PromptState prompt;
  FusionParams fusion;
  AdapterParams adapters;
  MemoryBank bank;
  nlohmann::json train_config = nlohmann::json::object();
  std::vector<std::string> support_ids;  // image ids the model was adapted on

  int dim() const { return bank.dim(); }
  int num_classes() const { return bank.num_classes(); }
  int num_layers() const { return static_cast<int>(adapters.weights.size()); }
};

// Identity-initialized model: f' = f, unconditioned prompts, w_fuse = w',
// adapters = identity, F_t = support class tokens.
TrainedModel init_model(const Dataset& support, const PromptSet& prompts, const ModelConfig& config,
                        std::uint64_t seed);

struct ParamRef {
  std::string name;
  Matrix* value;
};

// Every trainable tensor in a fixed order. P_t, L_t, w_n and w_a are absent.
std::vector<ParamRef> trainable_parameters(TrainedModel& model);

// Model tensors placed on a tape. Trainable tensors become parameter leaves
// (constants on a non-recording tape); frozen tensors are constants.
struct ModelVars {
  std::map<std::string, ad::Var> vars;
  std::vector<ad::Var> trainable;  // same order as trainable_parameters()

  ad::Var at(const std::string& name) const { return vars.at(name); }
};

ModelVars bind_model(ad::Tape& tape, const TrainedModel& model);

struct ForwardPass {
  ad::Var f_prime;       // 1 x D
  ad::Var class_scores;  // 1 x C
  ad::Var prototypes;    // w', 2 x D
  std::vector<ad::Var> y1;  // per layer, (h*w) x 1
  std::vector<ad::Var> y2;
  ad::Var image_score;   // 1 x 1
};

ForwardPass run_forward(ad::Tape& tape, const ModelVars& vars, const TrainedModel& model,
                        const EmbeddingBundle& bundle);

// UTM1: f64 tensors with a JSON manifest holding both configs.
void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ultraad
