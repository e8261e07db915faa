#include "ultraad/prompt_fusion.hpp"

#include "ultraad/error.hpp"
#include "ultraad/framing.hpp"

#include <cmath>

namespace ultraad {
namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix as_row(const RowVector& v) { return Matrix(v); }

}  // namespace

MiniNetParams MiniNetParams::identity_init(int dim, std::mt19937_64& rng) {
  const int hidden = std::max(1, dim / 4);
  MiniNetParams p;
  p.w1 = gaussian(dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  p.b1 = Matrix::Zero(1, hidden);
  p.w2 = Matrix::Zero(hidden, dim);
  p.b2 = Matrix::Zero(1, dim);
  return p;
}

PromptState PromptState::init(const RowVector& normal, const RowVector& abnormal) {
  if (normal.size() != abnormal.size()) throw ValidationError("prompt state: w_n and w_a differ in dim");
  const auto dim = normal.size();
  PromptState s;
  s.normal = ultraad::normalized(normal);
  s.abnormal = ultraad::normalized(abnormal);
  s.u = Matrix::Zero(1, dim);
  s.cond_w = Matrix::Zero(dim, dim);
  s.cond_b = Matrix::Zero(1, dim);
  return s;
}

FusionParams FusionParams::init(int dim, int heads, std::mt19937_64& rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw ValidationError("fusion: D=" + std::to_string(dim) + " not divisible by M=" + std::to_string(heads));
  }
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  FusionParams p;
  p.heads = heads;
  p.w_q = gaussian(dim, dim, sd, rng);
  p.w_k = gaussian(dim, dim, sd, rng);
  p.w_v = gaussian(dim, dim, sd, rng);
  p.w_o = Matrix::Zero(dim, dim);
  return p;
}

RowVector mini_net(const RowVector& f, const MiniNetParams& params) {
  if (!f.allFinite()) throw ValidationError("mini_net: non-finite input");
  if (f.size() != params.w1.rows()) throw ValidationError("mini_net: dimension mismatch");
  ad::Tape tape(false);
  auto out = graph::mini_net(tape.constant(as_row(f)), tape.constant(params.w1), tape.constant(params.b1),
                             tape.constant(params.w2), tape.constant(params.b2));
  return out.value().row(0);
}

std::pair<RowVector, RowVector> condition_prompts(const PromptState& state, const RowVector& f_prime) {
  const auto dim = state.normal.size();
  if (f_prime.size() != dim || state.abnormal.size() != dim || state.u.cols() != dim || state.cond_w.rows() != dim) {
    throw ValidationError("condition_prompts: dimension mismatch");
  }
  ad::Tape tape(false);
  Matrix base(2, dim);
  base.row(0) = state.normal;
  base.row(1) = state.abnormal;
  auto out = graph::condition_prompts(tape.constant(base), tape.constant(state.u), tape.constant(state.cond_w),
                                      tape.constant(state.cond_b), tape.constant(as_row(f_prime)));
  return {out.value().row(0), out.value().row(1)};
}

Matrix ensemble_prototypes(const RowVector& normal_c, const RowVector& abnormal_c, const Matrix& class_prompts) {
  if (normal_c.size() != abnormal_c.size() || class_prompts.cols() != normal_c.size()) {
    throw ValidationError("ensemble_prototypes: dimension mismatch");
  }
  ad::Tape tape(false);
  Matrix base(2, normal_c.size());
  base.row(0) = normal_c;
  base.row(1) = abnormal_c;
  return graph::ensemble_prototypes(tape.constant(base), class_prompts).value();
}

FusionResult cross_attention_fuse(const Matrix& w_prime, const Matrix& patches, const FusionParams& params) {
  ad::Tape tape(false);
  FusionResult result;
  auto out = graph::cross_attention_fuse(tape.constant(w_prime), tape.constant(patches), tape.constant(params.w_q),
                                         tape.constant(params.w_k), tape.constant(params.w_v),
                                         tape.constant(params.w_o), params, &result.attention);
  result.fused = out.value();
  return result;
}

void save_prompt_fusion(const PromptState& prompt, const FusionParams& fusion, const std::filesystem::path& path) {
  framing::Json meta{{"heads", fusion.heads},
                     {"scale_scores", fusion.scale_scores},
                     {"out_proj", fusion.out_proj},
                     {"residual", fusion.residual}};
  framing::write_tensor_file(path, "UPF1", meta,
                             {{"normal", as_row(prompt.normal)},
                              {"abnormal", as_row(prompt.abnormal)},
                              {"u", prompt.u},
                              {"cond_w", prompt.cond_w},
                              {"cond_b", prompt.cond_b},
                              {"w_q", fusion.w_q},
                              {"w_k", fusion.w_k},
                              {"w_v", fusion.w_v},
                              {"w_o", fusion.w_o}},
                             framing::DType::f32);
}

std::pair<PromptState, FusionParams> load_prompt_fusion(const std::filesystem::path& path) {
  auto file = framing::read_tensor_file(path, "UPF1");
  PromptState prompt;
  prompt.normal = file.at("normal").row(0);
  prompt.abnormal = file.at("abnormal").row(0);
  prompt.u = file.at("u");
  prompt.cond_w = file.at("cond_w");
  prompt.cond_b = file.at("cond_b");
  FusionParams fusion;
  fusion.heads = file.meta.at("heads").get<int>();
  fusion.scale_scores = file.meta.at("scale_scores").get<bool>();
  fusion.out_proj = file.meta.at("out_proj").get<bool>();
  fusion.residual = file.meta.at("residual").get<bool>();
  fusion.w_q = file.at("w_q");
  fusion.w_k = file.at("w_k");
  fusion.w_v = file.at("w_v");
  fusion.w_o = file.at("w_o");
  return {std::move(prompt), std::move(fusion)};
}

namespace graph {

ad::Var mini_net(ad::Var f, ad::Var w1, ad::Var b1, ad::Var w2, ad::Var b2) {
  ad::Var hidden = ad::tanh(ad::add_row(ad::matmul(f, w1), b1));
  return ad::normalize_rows(ad::add_row(f + ad::matmul(hidden, w2), b2));
}

ad::Var condition_prompts(ad::Var base, ad::Var u, ad::Var cond_w, ad::Var cond_b, ad::Var f_prime) {
  ad::Var shift = ad::add_row(ad::matmul(u + f_prime, cond_w), cond_b);
  return ad::normalize_rows(ad::add_row(base, shift));
}

ad::Var ensemble_prototypes(ad::Var conditioned, const Matrix& class_prompts) {
  const auto C = class_prompts.rows();
  if (C < 2) throw ValidationError("ensemble_prototypes: need at least 2 classes");
  if (conditioned.rows() != 2 || conditioned.cols() != class_prompts.cols()) {
    throw ValidationError("ensemble_prototypes: dimension mismatch");
  }
  Matrix extra(2, class_prompts.cols());
  extra.row(0) = class_prompts.row(0);
  extra.row(1) = class_prompts.bottomRows(C - 1).colwise().sum() / static_cast<double>(C - 1);
  return ad::normalize_rows(conditioned + conditioned.tape()->constant(std::move(extra)));
}

ad::Var cross_attention_fuse(ad::Var w_prime, ad::Var patches, ad::Var w_q, ad::Var w_k, ad::Var w_v, ad::Var w_o,
                             const FusionParams& options, std::vector<Matrix>* attention) {
  const auto dim = w_prime.cols();
  const int heads = options.heads;
  if (heads <= 0 || dim % heads != 0) {
    throw ValidationError("cross_attention_fuse: D=" + std::to_string(dim) + " not divisible by M=" +
                          std::to_string(heads));
  }
  if (patches.cols() != dim || w_q.rows() != dim || w_q.cols() != dim || w_k.rows() != dim || w_k.cols() != dim ||
      w_v.rows() != dim || w_v.cols() != dim || w_o.rows() != dim || w_o.cols() != dim) {
    throw ValidationError("cross_attention_fuse: dimension mismatch");
  }
  const Eigen::Index d = dim / heads;
  const double scale = options.scale_scores ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;

  ad::Var query = ad::matmul(w_prime, w_q);
  std::vector<ad::Var> outputs;
  for (int m = 0; m < heads; ++m) {
    ad::Var q = ad::slice_cols(query, m * d, d);
    // scores = q (patches W_K)^T, evaluated as patches (W_K q^T) so that the
    // full key matrix is never formed.
    ad::Var keyed = ad::matmul(ad::slice_cols(w_k, m * d, d), ad::transpose(q));
    ad::Var logits = ad::transpose(ad::matmul(patches, keyed)) * scale;
    ad::Var weights = ad::softmax_rows(logits);
    if (attention) attention->push_back(weights.value());
    ad::Var context = ad::matmul(weights, patches);
    outputs.push_back(ad::matmul(context, ad::slice_cols(w_v, m * d, d)));
  }
  ad::Var merged = ad::concat_cols(outputs);
  if (options.out_proj) merged = ad::matmul(merged, w_o);
  if (options.residual) merged = w_prime + merged;
  return ad::normalize_rows(merged);
}

}  // namespace graph
}  // namespace ultraad
