#pragma once

#include "ultraad/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ultraad {

// One h x w grid of D-dimensional patch tokens, row-major (h*w*D floats).
struct PatchGrid {
  int h = 0;
  int w = 0;
  std::vector<float> tokens;
};

// Frozen encoder output for a single image.
struct EmbeddingBundle {
  std::string image_id;
  int dim = 0;
  std::vector<float> class_token;       // f, length dim
  std::vector<PatchGrid> patch_layers;  // one grid per selected encoder layer
  std::optional<int> label;             // unknown for unlabeled queries
  std::optional<std::vector<std::uint8_t>> gt_mask;  // H*W of {0,1}
  int height = 0;                       // original image H
  int width = 0;                        // original image W

  // Throws ValidationError when any invariant is broken.
  void validate() const;

  int grid_h() const { return patch_layers.empty() ? 0 : patch_layers.front().h; }
  int grid_w() const { return patch_layers.empty() ? 0 : patch_layers.front().w; }
  std::size_t num_layers() const { return patch_layers.size(); }

  RowVector class_token_vector() const;
  Matrix patch_matrix(std::size_t layer) const;  // (h*w) x dim
  Matrix mask_matrix() const;                    // H x W, requires gt_mask
};

struct Dataset {
  std::vector<EmbeddingBundle> bundles;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::string domain_tag;

  void validate() const;
  std::vector<int> labels() const;
};

// Text-side embeddings: class prompts P_t, the two base state prompts and a
// class-agnostic prompt set for the domain-prompt ablation.
struct PromptSet {
  Matrix class_prompts;     // C x D
  RowVector normal;         // w_n
  RowVector abnormal;       // w_a
  Matrix agnostic_prompts;  // C x D, may be empty
};

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path);
EmbeddingBundle read_bundle(const std::filesystem::path& path);

void write_prompts(const PromptSet& prompts, const std::filesystem::path& path);
PromptSet read_prompts(const std::filesystem::path& path);

// Directory of <image_id>.ueb files, manifest.json and prompts.upt.
void write_dataset(const Dataset& dataset, const PromptSet& prompts, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);
PromptSet read_dataset_prompts(const std::filesystem::path& dir);

// Samples exactly `shots` bundles per class without replacement. Support keeps
// the original dataset order; query is the remainder.
std::pair<Dataset, Dataset> build_fewshot_split(const Dataset& dataset, int shots, std::uint64_t seed);

struct SynthConfig {
  int dim = 64;
  int num_classes = 3;
  int grid_h = 16;
  int grid_w = 16;
  int height = 128;
  int width = 128;
  int num_layers = 4;
  int samples_per_class = 40;
  double blob_radius_min = 16.0;
  double blob_radius_max = 32.0;
  double signal_strength = 1.0;
  double noise_sigma = 0.3;
  double prompt_noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Dataset dataset;
  PromptSet prompts;
  Matrix prototypes;  // C x D orthonormal; row 0 is the normal tissue direction
};

SyntheticData generate_synthetic(const SynthConfig& cfg);

}  // namespace ultraad
