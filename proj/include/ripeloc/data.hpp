#pragma once
// ===== Dataset sample types and on-disk formats =====
//
// Images live in memory as planar f64 RGB in [0,1] (channel, row, col) and on
// disk as 8-bit binary PPM (P6, maxval 255). Labels use the normalized text
// convention `class cx cy w h [pcx pcy]`, one instance per line, where the
// two optional fields carry the picking center and appear only when the
// instance has one (ripe fruit). Numbers round-trip exactly at 17 significant
// digits. Per-instance masks exist only in memory (the generator produces
// them; nothing serializes them).

#include <cstdint>
#include <string>
#include <vector>

#include "ripeloc/tensor.hpp"

namespace ripeloc {

struct Image {
  int w = 0, h = 0;
  std::vector<double> px;  // planar: px[(c*h + y)*w + x]

  static Image solid(int w, int h, double r, double g, double b);

  double& at(int c, int y, int x) {
    return px[(size_t(c) * size_t(h) + size_t(y)) * size_t(w) + size_t(x)];
  }
  double at(int c, int y, int x) const {
    return px[(size_t(c) * size_t(h) + size_t(y)) * size_t(w) + size_t(x)];
  }
};

struct Label {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized box
  bool has_center = false;
  double pcx = 0, pcy = 0;  // normalized picking center (inside the box)
};

// Full-frame binary mask for one instance, index-aligned with labels.
struct InstanceMask {
  int w = 0, h = 0;
  std::vector<uint8_t> on;

  bool at(int y, int x) const { return on[size_t(y) * size_t(w) + size_t(x)] != 0; }
  void set(int y, int x, bool v) {
    on[size_t(y) * size_t(w) + size_t(x)] = v ? 1 : 0;
  }
};

struct Sample {
  Image image;
  std::vector<Label> labels;
  // empty, or exactly one mask per label (synthetic samples only)
  std::vector<InstanceMask> masks;
};

// --- image io (PPM P6, maxval 255) ---
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// --- label io ---
void write_labels(const std::string& path, const std::vector<Label>& labels);
std::vector<Label> read_labels(const std::string& path);

// label invariants shared by io and augmentation: box inside [0,1] with
// positive extent, any center inside its box. Violations throw DataError.
void validate_label(const Label& l);

Tensor image_to_tensor(const Image& img);  // (1,3,H,W)
Image tensor_to_image(const Tensor& t, int n = 0);

}  // namespace ripeloc
