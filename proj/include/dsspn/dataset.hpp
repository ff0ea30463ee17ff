#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsspn/hierarchy.hpp"
#include "dsspn/tensor_io.hpp"

namespace dsspn {

// {"name", "hierarchy", "labels_file", "split", "label_stride",
//  "samples": [{"image", "label"}]}
// Paths are relative to the manifest's directory. `labels_file` is a
// hierarchy document holding this dataset's label table under "datasets";
// it defaults to `hierarchy`.
struct DatasetManifest {
  struct Record {
    std::string image;
    std::string label;
  };
  std::string name;
  std::string hierarchy;
  std::string labels_file;
  std::string split{"train"};
  std::size_t label_stride{1};  // 1: labels at image resolution; 8: at feature resolution
  std::vector<Record> samples;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : m.samples) samples.push_back({{"image", r.image}, {"label", r.label}});
  return {{"name", m.name},   {"hierarchy", m.hierarchy},       {"labels_file", m.labels_file.empty() ? m.hierarchy : m.labels_file},
          {"split", m.split}, {"label_stride", m.label_stride}, {"samples", std::move(samples)}};
}

inline DatasetManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.hierarchy = j.at("hierarchy").get<std::string>();
    m.labels_file = j.value("labels_file", m.hierarchy);
    m.split = j.value("split", std::string("train"));
    m.label_stride = j.value("label_stride", std::size_t{1});
    for (const auto& r : j.at("samples")) m.samples.push_back({r.at("image").get<std::string>(), r.at("label").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.label_stride != 1 && m.label_stride != 8) throw ValidationError(str_cat("manifest label_stride must be 1 or 8, got ", m.label_stride));
  m.base_dir = base_dir;
  return m;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_json_file(path), path.parent_path());
}

struct Dataset {
  std::string name;
  DatasetBinding binding;
  std::vector<Tensor<float>> images;
  std::vector<LabelMap> labels;  // full image resolution

  std::size_t size() const { return images.size(); }
};

// Loads every record. Labels stored at feature resolution are expanded to
// image resolution by block replication, so both layouts train the same.
inline Dataset load_dataset(const DatasetManifest& m, const HierarchyDocument& doc) {
  if (m.samples.empty()) throw ValidationError("dataset '" + m.name + "' has no samples");
  const HierarchyDocument labels_doc = load_hierarchy_file(m.resolve(m.labels_file.empty() ? m.hierarchy : m.labels_file));
  if (!(labels_doc.hierarchy == doc.hierarchy)) {
    throw ValidationError("dataset '" + m.name + "': labels file uses a different hierarchy");
  }
  Dataset d{m.name, bind_dataset(doc.hierarchy, labels_doc.dataset(m.name)), {}, {}};
  for (const auto& r : m.samples) {
    Tensor<float> image = io::load_image<float>(m.resolve(r.image));
    LabelMap lab = io::load_label_map(m.resolve(r.label));
    const Shape s = image.shape();
    if (lab.height * m.label_stride != s.h || lab.width * m.label_stride != s.w) {
      throw ValidationError(str_cat("dataset '", m.name, "': label ", lab.height, "x", lab.width, " does not match image ", s.h, "x",
                                    s.w, " at stride ", m.label_stride));
    }
    for (int v : lab.values) {
      if (v != LabelMap::kIgnore && !d.binding.has_label(v)) {
        throw BindingError(str_cat("dataset '", m.name, "': ", r.label, " contains unbound label ", v));
      }
    }
    if (m.label_stride != 1) {
      LabelMap full(s.h, s.w);
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) full.at(y, x) = lab.at(y / m.label_stride, x / m.label_stride);
      }
      lab = std::move(full);
    }
    d.images.push_back(std::move(image));
    d.labels.push_back(std::move(lab));
  }
  return d;
}

struct AugmentConfig {
  bool flip{true};
  bool crop{true};
  bool resize{true};
  double scale_min{0.5};
  double scale_max{2.0};
  std::size_t crop_size{32};
};

inline void to_json(nlohmann::json& j, const AugmentConfig& a) {
  j = {{"flip", a.flip}, {"crop", a.crop}, {"resize", a.resize}, {"scale_min", a.scale_min}, {"scale_max", a.scale_max},
       {"crop_size", a.crop_size}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& a) {
  a.flip = j.value("flip", a.flip);
  a.crop = j.value("crop", a.crop);
  a.resize = j.value("resize", a.resize);
  a.scale_min = j.value("scale_min", a.scale_min);
  a.scale_max = j.value("scale_max", a.scale_max);
  a.crop_size = j.value("crop_size", a.crop_size);
}

struct Example {
  Tensor<float> image;
  LabelMap labels;
};

// Bilinear image resize (half-pixel centres) and nearest label resize onto
// the same grid.
inline Example resize_example(const Tensor<float>& image, const LabelMap& labels, std::size_t out_h, std::size_t out_w) {
  const Shape s = image.shape();
  Example e{Tensor<float>(Shape{1, s.c, out_h, out_w}), LabelMap(out_h, out_w)};
  const double sy = static_cast<double>(s.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(s.w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, s.h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, s.w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const double top = image.at(0, c, y0, x0) * (1 - tx) + image.at(0, c, y0, x1) * tx;
        const double bot = image.at(0, c, y1, x0) * (1 - tx) + image.at(0, c, y1, x1) * tx;
        e.image.at(0, c, y, x) = static_cast<float>(top * (1 - ty) + bot * ty);
      }
      const std::size_t ny = std::min(static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sy), s.h - 1);
      const std::size_t nx = std::min(static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sx), s.w - 1);
      e.labels.at(y, x) = labels.at(ny, nx);
    }
  }
  return e;
}

// Window [y0, y0+h) x [x0, x0+w); outside the source the image is 0 and the
// label is ignore.
inline Example crop_example(const Example& in, std::ptrdiff_t y0, std::ptrdiff_t x0, std::size_t h, std::size_t w) {
  const Shape s = in.image.shape();
  Example e{Tensor<float>(Shape{1, s.c, h, w}), LabelMap(h, w)};
  for (std::size_t y = 0; y < h; ++y) {
    const std::ptrdiff_t sy = y0 + static_cast<std::ptrdiff_t>(y);
    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(s.h)) continue;
    for (std::size_t x = 0; x < w; ++x) {
      const std::ptrdiff_t sx = x0 + static_cast<std::ptrdiff_t>(x);
      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(s.w)) continue;
      const auto uy = static_cast<std::size_t>(sy), ux = static_cast<std::size_t>(sx);
      for (std::size_t c = 0; c < s.c; ++c) e.image.at(0, c, y, x) = in.image.at(0, c, uy, ux);
      e.labels.at(y, x) = in.labels.at(uy, ux);
    }
  }
  return e;
}

inline Example flip_example(const Example& in) {
  const Shape s = in.image.shape();
  Example e{Tensor<float>(s), LabelMap(in.labels.height, in.labels.width)};
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x) {
      for (std::size_t c = 0; c < s.c; ++c) e.image.at(0, c, y, x) = in.image.at(0, c, y, s.w - 1 - x);
      e.labels.at(y, x) = in.labels.at(y, s.w - 1 - x);
    }
  }
  return e;
}

// Random resize, then random crop (padding when the image is smaller), then
// random horizontal flip. Image and labels always share one transform.
// Without cropping the result is trimmed to a multiple of the output stride.
inline Example augment(const Tensor<float>& image, const LabelMap& labels, const AugmentConfig& cfg, std::mt19937_64& rng,
                       std::size_t stride = 8) {
  Example e{image, labels};
  if (cfg.resize) {
    std::uniform_real_distribution<double> scale(cfg.scale_min, cfg.scale_max);
    const double f = scale(rng);
    const Shape s = image.shape();
    const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.h) * f)));
    const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.w) * f)));
    e = resize_example(e.image, e.labels, h, w);
  }
  const Shape s = e.image.shape();
  if (cfg.crop) {
    const std::size_t c = cfg.crop_size;
    auto start = [&rng](std::size_t extent, std::size_t window) -> std::ptrdiff_t {
      if (extent <= window) {
        // A smaller image lands at a random offset inside the padded window.
        std::uniform_int_distribution<std::size_t> d(0, window - extent);
        return -static_cast<std::ptrdiff_t>(d(rng));
      }
      std::uniform_int_distribution<std::size_t> d(0, extent - window);
      return static_cast<std::ptrdiff_t>(d(rng));
    };
    const std::ptrdiff_t y0 = start(s.h, c);
    const std::ptrdiff_t x0 = start(s.w, c);
    e = crop_example(e, y0, x0, c, c);
  } else if (s.h % stride != 0 || s.w % stride != 0) {
    const std::size_t h = std::max(stride, s.h / stride * stride), w = std::max(stride, s.w / stride * stride);
    e = crop_example(e, 0, 0, h, w);
  }
  if (cfg.flip && std::bernoulli_distribution(0.5)(rng)) e = flip_example(e);
  return e;
}

}  // namespace dsspn
