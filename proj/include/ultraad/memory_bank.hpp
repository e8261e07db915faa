#pragma once

#include "ultraad/autograd.hpp"
#include "ultraad/embeddings_io.hpp"
#include "ultraad/tensor.hpp"

#include <filesystem>
#include <span>

namespace ultraad {

// Few-shot memory: support class tokens, class prompt embeddings and the
// one-hot support labels.
struct MemoryBank {
  Matrix features;  // F_t, N x D, refined during training
  Matrix prompts;   // P_t, C x D, frozen
  Matrix labels;    // L_t, N x C one-hot

  int num_classes() const { return static_cast<int>(prompts.rows()); }
  int dim() const { return static_cast<int>(prompts.cols()); }
  void validate() const;
};

// Sharpness beta and cache weight alpha of the affinity term. Both default
// to 1, which is the plain memory classifier.
struct ClassifierOptions {
  double alpha = 1.0;
  double beta = 1.0;
};

Matrix onehot(std::span<const int> labels, int num_classes);

MemoryBank build_memory(const Dataset& support, const Matrix& prompts);

// Raw class scores f'P^T + alpha * exp(beta * (f'F^T - 1)) L. f' is
// normalized before use. No softmax.
RowVector classify(const RowVector& f_prime, const MemoryBank& bank, const ClassifierOptions& opts = {});

void save_memory(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_memory(const std::filesystem::path& path);

namespace graph {

// f_prime 1 x D (unit norm), features N x D, prompts C x D.
ad::Var classify(ad::Var f_prime, ad::Var features, ad::Var prompts, const Matrix& labels,
                 const ClassifierOptions& opts);

}  // namespace graph
}  // namespace ultraad
