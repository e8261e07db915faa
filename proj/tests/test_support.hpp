#pragma once

#include "ultraad/embeddings_io.hpp"
#include "ultraad/tensor.hpp"

#include <filesystem>
#include <random>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

namespace ultraad::testing_support {

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix random_unit_rows(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  return normalized_rows(random_matrix(rng, rows, cols));
}

// Small but structurally complete synthetic task for fast unit tests.
inline SynthConfig small_synth(std::uint64_t seed = 0) {
  SynthConfig cfg;
  cfg.dim = 16;
  cfg.num_classes = 3;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.height = 16;
  cfg.width = 16;
  cfg.num_layers = 2;
  cfg.samples_per_class = 6;
  cfg.blob_radius_min = 3.0;
  cfg.blob_radius_max = 6.0;
  cfg.seed = seed;
  return cfg;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ultraad_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace ultraad::testing_support
