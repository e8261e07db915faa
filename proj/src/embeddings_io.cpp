#include "ultraad/embeddings_io.hpp"

#include "ultraad/error.hpp"
#include "ultraad/framing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace ultraad {
namespace {

constexpr std::string_view kBundleMagic = "UEB1";
constexpr std::string_view kPromptMagic = "UPT1";
constexpr const char* kManifest = "manifest.json";
constexpr const char* kPromptFile = "prompts.upt";

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

bool fits_u32(std::uint64_t v) { return v <= std::numeric_limits<std::uint32_t>::max(); }

}  // namespace

void EmbeddingBundle::validate() const {
  require(dim > 0, "bundle " + image_id + ": D must be positive");
  require(class_token.size() == static_cast<std::size_t>(dim),
          "bundle " + image_id + ": class token length does not match D");
  require(!patch_layers.empty(), "bundle " + image_id + ": no patch layers");
  require(height > 0 && width > 0, "bundle " + image_id + ": image dims must be positive");
  require(fits_u32(static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width)),
          "bundle " + image_id + ": mask dims overflow");
  const int h = patch_layers.front().h;
  const int w = patch_layers.front().w;
  for (const auto& grid : patch_layers) {
    require(grid.h > 0 && grid.w > 0, "bundle " + image_id + ": empty patch grid");
    require(grid.h == h && grid.w == w, "bundle " + image_id + ": patch grids differ in shape");
    const std::uint64_t count = static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(w) *
                                static_cast<std::uint64_t>(dim);
    require(fits_u32(count), "bundle " + image_id + ": patch grid dims overflow");
    require(grid.tokens.size() == count, "bundle " + image_id + ": patch grid size mismatch");
    require(std::all_of(grid.tokens.begin(), grid.tokens.end(), [](float v) { return std::isfinite(v); }),
            "bundle " + image_id + ": non-finite patch token");
  }
  require(std::all_of(class_token.begin(), class_token.end(), [](float v) { return std::isfinite(v); }),
          "bundle " + image_id + ": non-finite class token");
  if (label) require(*label >= 0, "bundle " + image_id + ": negative label");
  if (gt_mask) {
    require(label.has_value(), "bundle " + image_id + ": mask present without label");
    require(gt_mask->size() == static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
            "bundle " + image_id + ": mask size mismatch");
    require(std::all_of(gt_mask->begin(), gt_mask->end(), [](std::uint8_t v) { return v <= 1; }),
            "bundle " + image_id + ": mask values must be 0 or 1");
    if (*label == 0) {
      require(std::all_of(gt_mask->begin(), gt_mask->end(), [](std::uint8_t v) { return v == 0; }),
              "bundle " + image_id + ": normal image with non-empty mask");
    }
  }
}

RowVector EmbeddingBundle::class_token_vector() const {
  RowVector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = class_token[static_cast<std::size_t>(i)];
  return v;
}

Matrix EmbeddingBundle::patch_matrix(std::size_t layer) const {
  const auto& grid = patch_layers.at(layer);
  Matrix m(grid.h * grid.w, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = grid.tokens[static_cast<std::size_t>(i)];
  return m;
}

Matrix EmbeddingBundle::mask_matrix() const {
  if (!gt_mask) throw ValidationError("bundle " + image_id + " has no mask");
  Matrix m(height, width);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (*gt_mask)[static_cast<std::size_t>(i)];
  return m;
}

void Dataset::validate() const {
  require(num_classes >= 1, "dataset: class count must be positive");
  require(class_names.empty() || class_names.size() == static_cast<std::size_t>(num_classes),
          "dataset: class_names length does not match C");
  for (const auto& b : bundles) {
    b.validate();
    if (b.label) require(*b.label < num_classes, "bundle " + b.image_id + ": label out of range");
    const auto& first = bundles.front();
    require(b.dim == first.dim && b.num_layers() == first.num_layers() && b.grid_h() == first.grid_h() &&
                b.grid_w() == first.grid_w(),
            "dataset: bundle " + b.image_id + " differs in shape from " + first.image_id);
  }
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(bundles.size());
  for (const auto& b : bundles) out.push_back(b.label.value_or(-1));
  return out;
}

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path) {
  bundle.validate();
  framing::Json header;
  header["image_id"] = bundle.image_id;
  header["D"] = bundle.dim;
  header["layers"] = framing::Json::array();
  for (const auto& g : bundle.patch_layers) header["layers"].push_back({{"h", g.h}, {"w", g.w}});
  header["H"] = bundle.height;
  header["W"] = bundle.width;
  header["label"] = bundle.label ? framing::Json(*bundle.label) : framing::Json(nullptr);
  header["has_mask"] = bundle.gt_mask.has_value();

  std::string payload;
  framing::put_f32(payload, bundle.class_token);
  for (const auto& g : bundle.patch_layers) framing::put_f32(payload, g.tokens);
  if (bundle.gt_mask) framing::put_u8(payload, *bundle.gt_mask);
  framing::write_frame(path, kBundleMagic, header, payload);
}

EmbeddingBundle read_bundle(const std::filesystem::path& path) {
  framing::Frame frame = framing::read_frame(path, kBundleMagic);
  EmbeddingBundle b;
  const auto& h = frame.header;
  std::uint64_t expected = 0;
  try {
    b.image_id = h.at("image_id").get<std::string>();
    b.dim = h.at("D").get<int>();
    b.height = h.at("H").get<int>();
    b.width = h.at("W").get<int>();
    if (!h.at("label").is_null()) b.label = h.at("label").get<int>();
    const bool has_mask = h.at("has_mask").get<bool>();
    require(b.dim > 0, "bundle header: D must be positive");
    expected = 4ull * static_cast<std::uint64_t>(b.dim);
    for (const auto& layer : h.at("layers")) {
      PatchGrid g;
      g.h = layer.at("h").get<int>();
      g.w = layer.at("w").get<int>();
      require(g.h > 0 && g.w > 0, "bundle header: empty patch grid");
      expected += 4ull * static_cast<std::uint64_t>(g.h) * static_cast<std::uint64_t>(g.w) *
                  static_cast<std::uint64_t>(b.dim);
      b.patch_layers.push_back(std::move(g));
    }
    if (has_mask) b.gt_mask.emplace();
    if (has_mask) expected += static_cast<std::uint64_t>(b.height) * static_cast<std::uint64_t>(b.width);
  } catch (const framing::Json::exception& e) {
    throw FormatError(std::string("bad bundle header: ") + e.what());
  }
  if (frame.payload.size() < expected) throw FormatError("truncated payload");
  if (frame.payload.size() > expected) throw FormatError("dimension mismatch: payload larger than header declares");

  framing::PayloadReader reader(frame.payload);
  b.class_token = reader.f32(static_cast<std::size_t>(b.dim));
  for (auto& g : b.patch_layers) {
    g.tokens = reader.f32(static_cast<std::size_t>(g.h) * static_cast<std::size_t>(g.w) *
                          static_cast<std::size_t>(b.dim));
  }
  if (b.gt_mask) {
    *b.gt_mask = reader.u8(static_cast<std::size_t>(b.height) * static_cast<std::size_t>(b.width));
  }
  b.validate();
  return b;
}

void write_prompts(const PromptSet& prompts, const std::filesystem::path& path) {
  std::vector<framing::NamedTensor> tensors{{"class_prompts", prompts.class_prompts},
                                            {"normal", prompts.normal},
                                            {"abnormal", prompts.abnormal}};
  if (prompts.agnostic_prompts.size() > 0) tensors.push_back({"agnostic_prompts", prompts.agnostic_prompts});
  framing::write_tensor_file(path, kPromptMagic, framing::Json::object(), tensors, framing::DType::f32);
}

PromptSet read_prompts(const std::filesystem::path& path) {
  auto file = framing::read_tensor_file(path, kPromptMagic);
  PromptSet p;
  p.class_prompts = file.at("class_prompts");
  p.normal = file.at("normal").row(0);
  p.abnormal = file.at("abnormal").row(0);
  if (file.contains("agnostic_prompts")) p.agnostic_prompts = file.at("agnostic_prompts");
  const auto d = p.class_prompts.cols();
  if (p.normal.size() != d || p.abnormal.size() != d ||
      (p.agnostic_prompts.size() > 0 && p.agnostic_prompts.cols() != d)) {
    throw FormatError("prompt file: inconsistent embedding dims");
  }
  return p;
}

void write_dataset(const Dataset& dataset, const PromptSet& prompts, const std::filesystem::path& dir) {
  dataset.validate();
  std::filesystem::create_directories(dir);
  framing::Json manifest;
  manifest["C"] = dataset.num_classes;
  manifest["class_names"] = dataset.class_names;
  manifest["domain_tag"] = dataset.domain_tag;
  manifest["prompts"] = kPromptFile;
  manifest["files"] = framing::Json::array();
  for (const auto& b : dataset.bundles) {
    const std::string name = b.image_id + ".ueb";
    write_bundle(b, dir / name);
    manifest["files"].push_back(name);
  }
  write_prompts(prompts, dir / kPromptFile);
  std::ofstream os(dir / kManifest);
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / kManifest);
  if (!is) throw IoError("missing manifest.json in " + dir.string());
  framing::Json manifest;
  try {
    manifest = framing::Json::parse(is);
  } catch (const framing::Json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
  Dataset ds;
  ds.num_classes = manifest.at("C").get<int>();
  ds.class_names = manifest.value("class_names", std::vector<std::string>{});
  ds.domain_tag = manifest.value("domain_tag", std::string{});

  std::vector<std::filesystem::path> files;
  if (manifest.contains("files")) {
    for (const auto& f : manifest.at("files")) files.push_back(dir / f.get<std::string>());
  } else {
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() == ".ueb") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  }
  for (const auto& f : files) ds.bundles.push_back(read_bundle(f));
  ds.validate();
  return ds;
}

PromptSet read_dataset_prompts(const std::filesystem::path& dir) {
  std::ifstream is(dir / kManifest);
  std::string name = kPromptFile;
  if (is) {
    auto manifest = framing::Json::parse(is, nullptr, false);
    if (!manifest.is_discarded()) name = manifest.value("prompts", name);
  }
  return read_prompts(dir / name);
}

std::pair<Dataset, Dataset> build_fewshot_split(const Dataset& dataset, int shots, std::uint64_t seed) {
  if (shots < 0) throw ValidationError("shots must be non-negative");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.num_classes));
  for (std::size_t i = 0; i < dataset.bundles.size(); ++i) {
    const auto& label = dataset.bundles[i].label;
    if (!label) throw ValidationError("few-shot split needs labeled bundles");
    by_class.at(static_cast<std::size_t>(*label)).push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<bool> chosen(dataset.bundles.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < static_cast<std::size_t>(shots)) {
      throw ValidationError("class " + std::to_string(c) + " has fewer than " + std::to_string(shots) +
                            " samples");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int s = 0; s < shots; ++s) chosen[idx[static_cast<std::size_t>(s)]] = true;
  }
  Dataset support{{}, dataset.num_classes, dataset.class_names, dataset.domain_tag};
  Dataset query{{}, dataset.num_classes, dataset.class_names, dataset.domain_tag};
  for (std::size_t i = 0; i < dataset.bundles.size(); ++i) {
    (chosen[i] ? support : query).bundles.push_back(dataset.bundles[i]);
  }
  return {std::move(support), std::move(query)};
}

}  // namespace ultraad
