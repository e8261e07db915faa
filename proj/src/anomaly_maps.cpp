#include "ultraad/anomaly_maps.hpp"

#include "ultraad/error.hpp"
#include "ultraad/framing.hpp"
#include "ultraad/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace ultraad {

AdapterParams AdapterParams::identity(int layers, int dim) {
  AdapterParams p;
  for (int l = 0; l < layers; ++l) {
    p.weights.push_back(Matrix::Identity(dim, dim));
    p.biases.push_back(Matrix::Zero(1, dim));
  }
  return p;
}

Matrix adapter_project(const Matrix& patches, const Matrix& weight, const Matrix& bias) {
  if (weight.rows() != patches.cols() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ValidationError("adapter_project: dimension mismatch");
  }
  ad::Tape tape(false);
  return graph::adapter_project(tape.constant(patches), tape.constant(weight), tape.constant(bias)).value();
}

double image_score(const Matrix& w_pair, const RowVector& f, double tau) {
  if (!(tau > 0.0)) throw ValidationError("image_score: tau must be positive");
  if (w_pair.rows() != 2 || w_pair.cols() != f.size()) throw ValidationError("image_score: dimension mismatch");
  ad::Tape tape(false);
  return graph::score_map(tape.constant(normalized_rows(w_pair)), tape.constant(Matrix(normalized(f))), tau)
      .scalar();
}

Matrix score_map(const Matrix& w_pair, const Matrix& patches, int h, int w, double tau) {
  if (!(tau > 0.0)) throw ValidationError("score_map: tau must be positive");
  if (patches.rows() != static_cast<Eigen::Index>(h) * w || w_pair.rows() != 2 || w_pair.cols() != patches.cols()) {
    throw ValidationError("score_map: dimension mismatch");
  }
  ad::Tape tape(false);
  Matrix flat =
      graph::score_map(tape.constant(normalized_rows(w_pair)), tape.constant(normalized_rows(patches)), tau).value();
  return Eigen::Map<Matrix>(flat.data(), h, w);
}

Matrix upsample(const Matrix& map, int height, int width) {
  if (map.size() == 0) throw ValidationError("upsample: empty map");
  const auto h = map.rows(), w = map.cols();
  if (h > height || w > width) throw ValidationError("upsample: target smaller than source");
  const double sy = static_cast<double>(h) / height;
  const double sx = static_cast<double>(w) / width;

  std::vector<Eigen::Index> x0(static_cast<std::size_t>(width)), x1(static_cast<std::size_t>(width));
  std::vector<double> fx(static_cast<std::size_t>(width));
  for (int x = 0; x < width; ++x) {
    const double src = std::max(0.0, (x + 0.5) * sx - 0.5);
    const auto i0 = std::min(static_cast<Eigen::Index>(src), w - 1);
    x0[x] = i0;
    x1[x] = std::min(i0 + 1, w - 1);
    fx[x] = src - static_cast<double>(i0);
  }
  Matrix out(height, width);
  for (int y = 0; y < height; ++y) {
    const double src = std::max(0.0, (y + 0.5) * sy - 0.5);
    const auto i0 = std::min(static_cast<Eigen::Index>(src), h - 1);
    const auto i1 = std::min(i0 + 1, h - 1);
    const double fy = src - static_cast<double>(i0);
    for (int x = 0; x < width; ++x) {
      const double top = map(i0, x0[x]) + fx[x] * (map(i0, x1[x]) - map(i0, x0[x]));
      const double bottom = map(i1, x0[x]) + fx[x] * (map(i1, x1[x]) - map(i1, x0[x]));
      out(y, x) = top + fy * (bottom - top);
    }
  }
  return out;
}

Matrix combine_maps(const std::vector<Matrix>& y1, const std::vector<Matrix>& y2) {
  if (y1.size() != y2.size()) throw ValidationError("combine_maps: layer count mismatch between Y1 and Y2");
  if (y1.empty()) throw ValidationError("combine_maps: no layers");
  Matrix acc = Matrix::Zero(y1.front().rows(), y1.front().cols());
  for (std::size_t l = 0; l < y1.size(); ++l) {
    if (y1[l].rows() != acc.rows() || y1[l].cols() != acc.cols() || y2[l].rows() != acc.rows() ||
        y2[l].cols() != acc.cols()) {
      throw ValidationError("combine_maps: map shapes differ");
    }
    acc += 0.5 * (y1[l] + y2[l]);
  }
  return acc / static_cast<double>(y1.size());
}

double postprocess_score(const Matrix& combined, double abnormal_score) {
  if (combined.size() == 0) throw ValidationError("postprocess_score: empty map");
  const double peak = combined.maxCoeff();
  if (combined.minCoeff() < 0.0 || peak > 1.0 || abnormal_score < 0.0 || abnormal_score > 1.0) {
    throw ValidationError("postprocess_score: inputs must lie in [0,1]");
  }
  return 0.5 * (peak + abnormal_score);
}

double softmax_abnormal_probability(const RowVector& class_scores) {
  const double m = class_scores.maxCoeff();
  const RowVector e = (class_scores.array() - m).exp();
  return 1.0 - e[0] / e.sum();
}

Inference infer(const EmbeddingBundle& bundle, const TrainedModel& model) {
  ad::Tape tape(false);
  ModelVars vars = bind_model(tape, model);
  ForwardPass pass = run_forward(tape, vars, model, bundle);

  const int h = bundle.grid_h(), w = bundle.grid_w();
  Inference out;
  std::vector<Matrix> up1, up2;
  for (std::size_t l = 0; l < pass.y1.size(); ++l) {
    Matrix y1 = pass.y1[l].value();
    Matrix y2 = pass.y2[l].value();
    out.map.y1.push_back(Eigen::Map<Matrix>(y1.data(), h, w));
    out.map.y2.push_back(Eigen::Map<Matrix>(y2.data(), h, w));
    up1.push_back(upsample(out.map.y1.back(), bundle.height, bundle.width));
    up2.push_back(upsample(out.map.y2.back(), bundle.height, bundle.width));
  }
  out.map.combined = combine_maps(up1, up2);
  out.map.image_score = pass.image_score.scalar();
  out.class_scores = pass.class_scores.value().row(0);
  const double m = out.class_scores.maxCoeff();
  out.class_probabilities = (out.class_scores.array() - m).exp();
  out.class_probabilities /= out.class_probabilities.sum();
  out.abnormal_score = model.config.image_score == ImageScoreSource::memory
                           ? softmax_abnormal_probability(out.class_scores)
                           : out.map.image_score;
  out.detection_score = postprocess_score(out.map.combined, std::clamp(out.abnormal_score, 0.0, 1.0));
  return out;
}

void save_anomaly_map(const AnomalyMap& map, const std::filesystem::path& path) {
  std::vector<framing::NamedTensor> tensors;
  for (std::size_t l = 0; l < map.y1.size(); ++l) tensors.push_back({"y1." + std::to_string(l), map.y1[l]});
  for (std::size_t l = 0; l < map.y2.size(); ++l) tensors.push_back({"y2." + std::to_string(l), map.y2[l]});
  tensors.push_back({"combined", map.combined});
  framing::Json meta{{"layers", map.y1.size()}, {"image_score", map.image_score}};
  framing::write_tensor_file(path, "UAM1", meta, tensors, framing::DType::f32);
}

AnomalyMap load_anomaly_map(const std::filesystem::path& path) {
  auto file = framing::read_tensor_file(path, "UAM1");
  AnomalyMap map;
  const auto layers = file.meta.at("layers").get<std::size_t>();
  for (std::size_t l = 0; l < layers; ++l) {
    map.y1.push_back(file.at("y1." + std::to_string(l)));
    map.y2.push_back(file.at("y2." + std::to_string(l)));
  }
  map.combined = file.at("combined");
  map.image_score = file.meta.at("image_score").get<double>();
  return map;
}

void write_pgm_composite(const Matrix& map, const std::optional<Matrix>& mask, const std::filesystem::path& path) {
  const auto H = map.rows();
  const auto W = map.cols();
  if (mask && (mask->rows() != H || mask->cols() != W)) throw ValidationError("pgm: mask shape differs from map");
  const auto total_w = mask ? 2 * W : W;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "P5\n" << total_w << ' ' << H << "\n65535\n";
  auto put = [&os](double v) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xFF)};
    os.write(bytes, 2);
  };
  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) put(map(y, x));
    if (mask) {
      for (Eigen::Index x = 0; x < W; ++x) put((*mask)(y, x));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

namespace graph {

ad::Var adapter_project(ad::Var patches, ad::Var weight, ad::Var bias) {
  return ad::normalize_rows(ad::add_row(ad::matmul(patches, weight), bias));
}

ad::Var score_map(ad::Var w_pair, ad::Var tokens, double tau) {
  return ad::two_way_softmax(ad::matmul(tokens, ad::transpose(w_pair)), tau);
}

}  // namespace graph
}  // namespace ultraad
