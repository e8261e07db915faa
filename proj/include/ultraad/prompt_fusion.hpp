#pragma once

#include "ultraad/autograd.hpp"
#include "ultraad/tensor.hpp"

#include <filesystem>
#include <random>
#include <utility>
#include <vector>

namespace ultraad {

// Residual bottleneck f' = normalize(f + tanh(f W1 + b1) W2 + b2), hidden
// width D/4. W2 and b2 start at zero so that f' = f at initialization.
struct MiniNetParams {
  Matrix w1;  // D x D/4
  Matrix b1;  // 1 x D/4
  Matrix w2;  // D/4 x D
  Matrix b2;  // 1 x D

  static MiniNetParams identity_init(int dim, std::mt19937_64& rng);
};

// Base state prompts plus the image-aware conditioning: both prompts are
// shifted by cond_map(u + f') in embedding space and re-normalized.
struct PromptState {
  RowVector normal;    // w_n
  RowVector abnormal;  // w_a
  Matrix u;            // 1 x D, learnable global token
  Matrix cond_w;       // D x D
  Matrix cond_b;       // 1 x D

  static PromptState init(const RowVector& normal, const RowVector& abnormal);
};

struct FusionParams {
  int heads = 4;
  bool scale_scores = true;  // divide logits by sqrt(D / heads)
  bool out_proj = true;      // apply w_o to the concatenated heads
  bool residual = true;      // add w' before the final normalization
  Matrix w_q, w_k, w_v;      // D x D
  Matrix w_o;                // D x D, zero at init

  int head_dim() const { return static_cast<int>(w_q.cols()) / heads; }
  static FusionParams init(int dim, int heads, std::mt19937_64& rng);
};

struct FusionResult {
  Matrix fused;                   // 2 x D
  std::vector<Matrix> attention;  // per head, 2 x (h*w), rows sum to 1
};

RowVector mini_net(const RowVector& f, const MiniNetParams& params);

// Returns (w_n_c, w_a_c).
std::pair<RowVector, RowVector> condition_prompts(const PromptState& state, const RowVector& f_prime);

// Row 0: normalize(w_n_c + P_t[0]); row 1: normalize(w_a_c + mean(P_t[1..C-1])).
Matrix ensemble_prototypes(const RowVector& normal_c, const RowVector& abnormal_c, const Matrix& class_prompts);

// w_prime is 2 x D, patches is (h*w) x D.
FusionResult cross_attention_fuse(const Matrix& w_prime, const Matrix& patches, const FusionParams& params);

void save_prompt_fusion(const PromptState& prompt, const FusionParams& fusion, const std::filesystem::path& path);
std::pair<PromptState, FusionParams> load_prompt_fusion(const std::filesystem::path& path);

namespace graph {

ad::Var mini_net(ad::Var f, ad::Var w1, ad::Var b1, ad::Var w2, ad::Var b2);

// base is the 2 x D stack [w_n; w_a]; returns the conditioned 2 x D stack.
ad::Var condition_prompts(ad::Var base, ad::Var u, ad::Var cond_w, ad::Var cond_b, ad::Var f_prime);

ad::Var ensemble_prototypes(ad::Var conditioned, const Matrix& class_prompts);

// When `attention` is non-null the per-head weights are appended to it.
ad::Var cross_attention_fuse(ad::Var w_prime, ad::Var patches, ad::Var w_q, ad::Var w_k, ad::Var w_v, ad::Var w_o,
                             const FusionParams& options, std::vector<Matrix>* attention = nullptr);

}  // namespace graph
}  // namespace ultraad
