#include "ripeloc/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ripeloc/common.hpp"

namespace ripeloc {

Image Image::solid(int w, int h, double r, double g, double b) {
  Image img;
  img.w = w;
  img.h = h;
  img.px.assign(size_t(3) * size_t(h) * size_t(w), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  }
  return img;
}

// ===== PPM =====

void write_ppm(const std::string& path, const Image& img) {
  if (img.w <= 0 || img.h <= 0 ||
      int64_t(img.px.size()) != int64_t(3) * img.w * img.h)
    throw UsageError("write_ppm: malformed image buffer");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_ppm: cannot open " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(size_t(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = clampd(img.at(c, y, x), 0.0, 1.0);
        row[size_t(x) * 3 + size_t(c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             std::streamsize(row.size()));
  }
  if (!os) throw DataError("write_ppm: short write to " + path);
}

namespace {

// reads one whitespace-delimited header token, skipping '#' comments
std::string ppm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(c));
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_ppm: cannot open " + path);
  if (ppm_token(is) != "P6")
    throw DataError("read_ppm: " + path + " is not binary PPM (P6)");
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(ppm_token(is));
    h = std::stoi(ppm_token(is));
    maxv = std::stoi(ppm_token(is));
  } catch (const std::exception&) {
    throw DataError("read_ppm: bad header in " + path);
  }
  if (w <= 0 || h <= 0 || maxv != 255)
    throw DataError("read_ppm: unsupported dimensions/maxval in " + path);
  // the single whitespace after maxval was already consumed by ppm_token
  Image img;
  img.w = w;
  img.h = h;
  img.px.assign(size_t(3) * size_t(h) * size_t(w), 0.0);
  std::vector<unsigned char> row(size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
    if (!is) throw DataError("read_ppm: truncated pixel data in " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = double(row[size_t(x) * 3 + size_t(c)]) / 255.0;
  }
  return img;
}

// ===== labels =====

void validate_label(const Label& l) {
  if (l.class_id < 0) throw DataError("label: negative class id");
  if (!(std::isfinite(l.cx) && std::isfinite(l.cy) && std::isfinite(l.w) &&
        std::isfinite(l.h)))
    throw DataError("label: non-finite box field");
  if (l.w <= 0 || l.h <= 0) throw DataError("label: non-positive box extent");
  const double x1 = l.cx - l.w / 2, x2 = l.cx + l.w / 2;
  const double y1 = l.cy - l.h / 2, y2 = l.cy + l.h / 2;
  const double slack = 1e-9;  // normalized arithmetic round-off
  if (x1 < -slack || y1 < -slack || x2 > 1 + slack || y2 > 1 + slack)
    throw DataError("label: box outside the unit frame");
  if (l.has_center) {
    if (!(std::isfinite(l.pcx) && std::isfinite(l.pcy)))
      throw DataError("label: non-finite center");
    if (l.pcx < x1 - slack || l.pcx > x2 + slack || l.pcy < y1 - slack ||
        l.pcy > y2 + slack)
      throw DataError("label: center outside its box");
  }
}

void write_labels(const std::string& path, const std::vector<Label>& labels) {
  std::ofstream os(path);
  if (!os) throw DataError("write_labels: cannot open " + path);
  os << std::setprecision(17);
  for (const Label& l : labels) {
    validate_label(l);
    os << l.class_id << " " << l.cx << " " << l.cy << " " << l.w << " "
       << l.h;
    if (l.has_center) os << " " << l.pcx << " " << l.pcy;
    os << "\n";
  }
  if (!os) throw DataError("write_labels: short write to " + path);
}

std::vector<Label> read_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_labels: cannot open " + path);
  std::vector<Label> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Label l;
    if (!(ls >> l.class_id >> l.cx >> l.cy >> l.w >> l.h))
      throw DataError("read_labels: " + path + " line " +
                      std::to_string(lineno) + ": need at least 5 fields");
    if (ls >> l.pcx) {
      if (!(ls >> l.pcy))
        throw DataError("read_labels: " + path + " line " +
                        std::to_string(lineno) + ": center x without y");
      l.has_center = true;
    }
    std::string extra;
    if (ls >> extra)
      throw DataError("read_labels: " + path + " line " +
                      std::to_string(lineno) + ": trailing fields");
    try {
      validate_label(l);
    } catch (const DataError& e) {
      throw DataError("read_labels: " + path + " line " +
                      std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(l);
  }
  return out;
}

// ===== tensor bridge =====

Tensor image_to_tensor(const Image& img) {
  Tensor t = Tensor::zeros({1, 3, img.h, img.w});
  std::copy(img.px.begin(), img.px.end(), t.data());
  return t;
}

Image tensor_to_image(const Tensor& t, int n) {
  if (t.ndim() != 4 || t.dim(1) != 3)
    throw ShapeError("tensor_to_image: need (N,3,H,W), got " +
                     shape_str(t.shape()));
  if (n < 0 || n >= t.dim(0))
    throw ShapeError("tensor_to_image: image index out of range");
  Image img;
  img.h = t.dim(2);
  img.w = t.dim(3);
  img.px.assign(size_t(3) * size_t(img.h) * size_t(img.w), 0.0);
  const double* src = t.data() + int64_t(n) * 3 * img.h * img.w;
  std::copy(src, src + img.px.size(), img.px.begin());
  return img;
}

}  // namespace ripeloc
