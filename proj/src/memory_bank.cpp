#include "ultraad/memory_bank.hpp"

#include "ultraad/error.hpp"
#include "ultraad/framing.hpp"

namespace ultraad {

void MemoryBank::validate() const {
  if (features.rows() == 0) throw ValidationError("memory bank: no support features");
  if (features.cols() != prompts.cols()) throw ValidationError("memory bank: feature and prompt dims differ");
  if (labels.rows() != features.rows() || labels.cols() != prompts.rows()) {
    throw ValidationError("memory bank: label matrix shape mismatch");
  }
  for (Eigen::Index r = 0; r < labels.rows(); ++r) {
    if (labels.row(r).sum() != 1.0) throw ValidationError("memory bank: label row is not one-hot");
  }
}

Matrix onehot(std::span<const int> labels, int num_classes) {
  if (num_classes <= 0) throw ValidationError("onehot: class count must be positive");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ValidationError("onehot: label " + std::to_string(labels[i]) + " out of range for C=" +
                            std::to_string(num_classes));
    }
    out(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return out;
}

MemoryBank build_memory(const Dataset& support, const Matrix& prompts) {
  if (support.bundles.empty()) throw ValidationError("build_memory: empty support set");
  if (prompts.rows() != support.num_classes) {
    throw ValidationError("build_memory: prompt rows (" + std::to_string(prompts.rows()) + ") != C (" +
                          std::to_string(support.num_classes) + ")");
  }
  const int dim = support.bundles.front().dim;
  if (prompts.cols() != dim) throw ValidationError("build_memory: prompt dim does not match embeddings");

  MemoryBank bank;
  bank.features.resize(static_cast<Eigen::Index>(support.bundles.size()), dim);
  std::vector<int> labels;
  for (std::size_t i = 0; i < support.bundles.size(); ++i) {
    const auto& b = support.bundles[i];
    if (!b.label) throw ValidationError("build_memory: unlabeled support bundle " + b.image_id);
    bank.features.row(static_cast<Eigen::Index>(i)) = normalized(b.class_token_vector());
    labels.push_back(*b.label);
  }
  bank.prompts = normalized_rows(prompts);
  bank.labels = onehot(labels, support.num_classes);
  return bank;
}

RowVector classify(const RowVector& f_prime, const MemoryBank& bank, const ClassifierOptions& opts) {
  if (f_prime.size() != bank.dim() || bank.features.cols() != bank.dim()) {
    throw ValidationError("classify: dimension mismatch");
  }
  ad::Tape tape(false);
  auto out = graph::classify(tape.constant(normalized(f_prime)), tape.constant(bank.features),
                             tape.constant(bank.prompts), bank.labels, opts);
  return out.value().row(0);
}

void save_memory(const MemoryBank& bank, const std::filesystem::path& path) {
  bank.validate();
  framing::write_tensor_file(path, "UMB1", framing::Json::object(),
                             {{"features", bank.features}, {"prompts", bank.prompts}, {"labels", bank.labels}},
                             framing::DType::f32);
}

MemoryBank load_memory(const std::filesystem::path& path) {
  auto file = framing::read_tensor_file(path, "UMB1");
  MemoryBank bank{file.at("features"), file.at("prompts"), file.at("labels")};
  bank.validate();
  return bank;
}

namespace graph {

ad::Var classify(ad::Var f_prime, ad::Var features, ad::Var prompts, const Matrix& labels,
                 const ClassifierOptions& opts) {
  if (f_prime.cols() != features.cols() || f_prime.cols() != prompts.cols() || labels.rows() != features.rows() ||
      labels.cols() != prompts.rows()) {
    throw ValidationError("classify: dimension mismatch");
  }
  ad::Tape& tape = *f_prime.tape();
  ad::Var text = ad::matmul(f_prime, ad::transpose(prompts));
  ad::Var affinity = ad::exp(ad::add_scalar(ad::matmul(f_prime, ad::transpose(features)), -1.0) * opts.beta);
  ad::Var cache = ad::matmul(affinity, tape.constant(labels)) * opts.alpha;
  return text + cache;
}

}  // namespace graph
}  // namespace ultraad
