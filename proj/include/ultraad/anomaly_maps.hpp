#pragma once

#include "ultraad/autograd.hpp"
#include "ultraad/embeddings_io.hpp"
#include "ultraad/tensor.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace ultraad {

struct TrainedModel;

// One affine map per selected encoder layer, identity at init.
struct AdapterParams {
  std::vector<Matrix> weights;  // D x D
  std::vector<Matrix> biases;   // 1 x D

  static AdapterParams identity(int layers, int dim);
};

struct AnomalyMap {
  std::vector<Matrix> y1;  // per layer, h x w, prompts vs adapted patches
  std::vector<Matrix> y2;  // per layer, h x w, fused prompts vs raw patches
  Matrix combined;         // H x W
  double image_score = 0.0;  // two-way prompt softmax on the class token
};

struct Inference {
  AnomalyMap map;
  RowVector class_scores;        // raw memory-classifier scores
  RowVector class_probabilities; // softmax of class_scores
  double abnormal_score = 0.0;   // image-level score fed to post-processing
  double detection_score = 0.0;  // 0.5 * (max(map) + abnormal_score)
};

// patches (h*w) x D; output rows are unit norm.
Matrix adapter_project(const Matrix& patches, const Matrix& weight, const Matrix& bias);

// exp(<w_a,f>/tau) / (exp(<w_n,f>/tau) + exp(<w_a,f>/tau)); w_pair rows are [w_n; w_a].
double image_score(const Matrix& w_pair, const RowVector& f, double tau);

// Per-patch image_score; returns an h x w grid.
Matrix score_map(const Matrix& w_pair, const Matrix& patches, int h, int w, double tau);

// Bilinear, half-pixel centers (align_corners = false), edge clamped.
Matrix upsample(const Matrix& map, int height, int width);

// Mean over layers of (y1 + y2) / 2.
Matrix combine_maps(const std::vector<Matrix>& y1, const std::vector<Matrix>& y2);

double postprocess_score(const Matrix& combined, double abnormal_score);

double softmax_abnormal_probability(const RowVector& class_scores);

Inference infer(const EmbeddingBundle& bundle, const TrainedModel& model);

// UAM1 framing of every map in `map` plus the image score, f32.
void save_anomaly_map(const AnomalyMap& map, const std::filesystem::path& path);
AnomalyMap load_anomaly_map(const std::filesystem::path& path);

// 16-bit binary PGM. With a mask, the mask is placed to the right of the map.
void write_pgm_composite(const Matrix& map, const std::optional<Matrix>& mask, const std::filesystem::path& path);

namespace graph {

ad::Var adapter_project(ad::Var patches, ad::Var weight, ad::Var bias);

// w_pair 2 x D, tokens n x D (both unit norm); returns n x 1 scores.
ad::Var score_map(ad::Var w_pair, ad::Var tokens, double tau);

}  // namespace graph
}  // namespace ultraad
