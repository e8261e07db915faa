#include "ultraad/embeddings_io.hpp"

#include "ultraad/error.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

namespace ultraad {

void SynthConfig::validate() const {
  if (dim < 8) throw ValidationError("synth: D must be at least 8");
  if (num_classes < 2) throw ValidationError("synth: need at least 2 classes");
  if (num_classes > dim) throw ValidationError("synth: C cannot exceed D");
  if (grid_h <= 0 || grid_w <= 0 || height <= 0 || width <= 0) throw ValidationError("synth: empty grid");
  if (grid_h > height || grid_w > width) throw ValidationError("synth: patch grid finer than mask");
  if (num_layers <= 0) throw ValidationError("synth: need at least one layer");
  if (samples_per_class < 0) throw ValidationError("synth: negative samples_per_class");
  if (signal_strength < 0.0) throw ValidationError("synth: signal_strength must be non-negative");
  if (noise_sigma < 0.0 || prompt_noise < 0.0) throw ValidationError("synth: negative noise");
  if (!(blob_radius_min > 0.0) || blob_radius_max < blob_radius_min) {
    throw ValidationError("synth: invalid blob radius range");
  }
  if (blob_radius_max > 0.5 * std::min(height, width)) {
    throw ValidationError("synth: blob radius larger than min(H,W)/2");
  }
}

SyntheticData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto gaussian_row = [&](int n) {
    RowVector v(n);
    for (int i = 0; i < n; ++i) v[i] = gauss(rng);
    return v;
  };

  const int D = cfg.dim;
  const int C = cfg.num_classes;

  // Orthonormal class directions via Gram-Schmidt; row 0 is normal tissue.
  Matrix protos(C, D);
  for (int c = 0; c < C; ++c) {
    RowVector v = gaussian_row(D);
    for (int k = 0; k < c; ++k) v -= v.dot(protos.row(k)) * protos.row(k);
    protos.row(c) = normalized(v);
  }

  SyntheticData out;
  out.prototypes = protos;
  out.prompts.class_prompts.resize(C, D);
  for (int c = 0; c < C; ++c) {
    out.prompts.class_prompts.row(c) = normalized(RowVector(protos.row(c)) + cfg.prompt_noise * gaussian_row(D));
  }
  out.prompts.normal = protos.row(0);
  out.prompts.abnormal = normalized(RowVector(protos.bottomRows(C - 1).colwise().mean()));
  out.prompts.agnostic_prompts.resize(C, D);
  for (int c = 0; c < C; ++c) out.prompts.agnostic_prompts.row(c) = normalized(gaussian_row(D));

  Dataset& ds = out.dataset;
  ds.num_classes = C;
  ds.domain_tag = "synthetic";
  ds.class_names.push_back("normal");
  for (int c = 1; c < C; ++c) ds.class_names.push_back("lesion_" + std::to_string(c));

  const int H = cfg.height, W = cfg.width, h = cfg.grid_h, w = cfg.grid_w;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int index = 0;
  for (int c = 0; c < C; ++c) {
    for (int s = 0; s < cfg.samples_per_class; ++s, ++index) {
      EmbeddingBundle b;
      char id[32];
      std::snprintf(id, sizeof id, "img_%05d", index);
      b.image_id = id;
      b.dim = D;
      b.height = H;
      b.width = W;
      b.label = c;
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * static_cast<std::size_t>(W), 0);
      std::vector<bool> cell_hit(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), false);
      if (c > 0) {
        const double r = cfg.blob_radius_min + (cfg.blob_radius_max - cfg.blob_radius_min) * unit(rng);
        const double cy = r + (H - 2.0 * r) * unit(rng);
        const double cx = r + (W - 2.0 * r) * unit(rng);
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) {
              mask[static_cast<std::size_t>(y) * W + x] = 1;
              cell_hit[static_cast<std::size_t>(y * h / H) * w + static_cast<std::size_t>(x * w / W)] = true;
            }
          }
        }
      }
      b.gt_mask = std::move(mask);

      RowVector token_sum = RowVector::Zero(D);
      for (int l = 0; l < cfg.num_layers; ++l) {
        PatchGrid g{h, w, {}};
        g.tokens.reserve(static_cast<std::size_t>(h) * w * D);
        for (int p = 0; p < h * w; ++p) {
          RowVector t = RowVector(protos.row(0)) + cfg.noise_sigma * gaussian_row(D);
          if (cell_hit[static_cast<std::size_t>(p)]) t += cfg.signal_strength * protos.row(c);
          t = normalized(t);
          token_sum += t;
          for (int i = 0; i < D; ++i) g.tokens.push_back(static_cast<float>(t[i]));
        }
        b.patch_layers.push_back(std::move(g));
      }
      const RowVector f = normalized(token_sum);
      b.class_token.assign(f.data(), f.data() + D);
      ds.bundles.push_back(std::move(b));
    }
  }
  return out;
}

}  // namespace ultraad
