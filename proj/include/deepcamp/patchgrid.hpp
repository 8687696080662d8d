#pragma once

#include <cstdint>
#include <vector>

#include "deepcamp/core.hpp"
#include "deepcamp/datamodel.hpp"

namespace deepcamp {

struct GridConfig {
  int resize_side = 64;
  std::vector<int> scales{16, 24, 32};
  int stride = 8;

  void validate() const {
    require_config(resize_side >= 1, "grid: resize_side must be >= 1");
    require_config(stride >= 1, "grid: stride must be >= 1");
    require_config(!scales.empty(), "grid: at least one scale");
    for (int s : scales) {
      require_config(s >= 1, "grid: scales must be >= 1");
      require_config(s <= resize_side, "grid: scale " + std::to_string(s) + " exceeds resize_side " +
                                           std::to_string(resize_side));
    }
  }

  int positions_per_axis(int scale) const { return (resize_side - scale) / stride + 1; }

  int patches_per_sample() const {
    int n = 0;
    for (int s : scales) n += positions_per_axis(s) * positions_per_axis(s);
    return n;
  }
};

struct PatchInstance {
  std::int64_t patch_id = 0;
  std::int64_t sample_id = 0;
  int row = 0;  // top-left, resized-box coordinates
  int col = 0;
  int scale = 0;
  Grid pixels;

  double center_row() const { return row + scale / 2.0; }
  double center_col() const { return col + scale / 2.0; }
};

/// Bilinear resize with corner-aligned sampling. Equal sides copy exactly.
inline Grid resize_bilinear(const Grid& src, int target_side) {
  if (target_side < 1) throw ConfigError("resize: target side must be >= 1");
  if (src.side < 1) throw ConfigError("resize: empty source");
  if (target_side == src.side) return src;
  Grid out(target_side);
  const double step = target_side > 1 ? static_cast<double>(src.side - 1) / (target_side - 1) : 0.0;
  for (int r = 0; r < target_side; ++r) {
    const double y = r * step;
    const int y0 = std::min(static_cast<int>(y), src.side - 1);
    const int y1 = std::min(y0 + 1, src.side - 1);
    const double fy = y - y0;
    for (int c = 0; c < target_side; ++c) {
      const double x = c * step;
      const int x0 = std::min(static_cast<int>(x), src.side - 1);
      const int x1 = std::min(x0 + 1, src.side - 1);
      const double fx = x - x0;
      const double top = src.at(y0, x0) * (1 - fx) + src.at(y0, x1) * fx;
      const double bot = src.at(y1, x0) * (1 - fx) + src.at(y1, x1) * fx;
      out.at(r, c) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

inline Grid resize_patch(const PatchInstance& patch, int target_side) { return resize_bilinear(patch.pixels, target_side); }

inline Grid crop(const Grid& g, int row, int col, int side) {
  Grid out(side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) out.at(r, c) = g.at(row + r, col + c);
  return out;
}

/// Dense multi-scale patches, scale-major then row-major. Patch ids are
/// first_patch_id, first_patch_id + 1, ...
inline std::vector<PatchInstance> extract_patches(const PersonSample& sample, const GridConfig& cfg,
                                                  std::int64_t first_patch_id = 0) {
  cfg.validate();
  const Grid box = resize_bilinear(sample.image, cfg.resize_side);
  std::vector<PatchInstance> out;
  out.reserve(cfg.patches_per_sample());
  std::int64_t id = first_patch_id;
  for (int s : cfg.scales) {
    for (int r = 0; r + s <= cfg.resize_side; r += cfg.stride) {
      for (int c = 0; c + s <= cfg.resize_side; c += cfg.stride) {
        PatchInstance p;
        p.patch_id = id++;
        p.sample_id = sample.sample_id;
        p.row = r;
        p.col = c;
        p.scale = s;
        p.pixels = crop(box, r, c, s);
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

}  // namespace deepcamp
