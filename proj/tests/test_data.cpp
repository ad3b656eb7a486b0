#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "ripeloc/common.hpp"
#include "ripeloc/data.hpp"
#include "ripeloc/rng.hpp"

using namespace ripeloc;

namespace {

std::string tmp_path(const char* stem) {
  return std::string("/tmp/ripeloc_data_") + stem;
}

void write_raw(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

Image random_image(int w, int h, Rng& rng) {
  Image img = Image::solid(w, h, 0, 0, 0);
  for (double& v : img.px) v = rng.uniform();
  return img;
}

}  // namespace

// ===== PPM io =====

TEST_CASE("ppm header is the canonical P6 form") {
  Image img = Image::solid(2, 1, 1.0, 0.0, 0.5);
  const std::string path = tmp_path("header.ppm");
  write_ppm(path, img);
  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 11) == "P6\n2 1\n255\n");
  CHECK(bytes.size() == 11 + 6);
  // payload is interleaved rgb rows: (255,0,128)(255,0,128)
  CHECK(uint8_t(bytes[11]) == 255);
  CHECK(uint8_t(bytes[12]) == 0);
  CHECK(uint8_t(bytes[13]) == 128);
  std::remove(path.c_str());
}

TEST_CASE("ppm round trip follows the quantization law") {
  Rng rng(311);
  Image img = random_image(9, 7, rng);
  img.px[0] = -0.25;  // clamps to 0
  img.px[1] = 1.75;   // clamps to 1
  const std::string path = tmp_path("roundtrip.ppm");
  write_ppm(path, img);
  Image back = read_ppm(path);
  REQUIRE(back.w == 9);
  REQUIRE(back.h == 7);
  for (size_t k = 0; k < img.px.size(); ++k) {
    const double q =
        double(std::lround(clampd(img.px[k], 0.0, 1.0) * 255.0)) / 255.0;
    CHECK(back.px[k] == q);
  }
  // a second pass is a fixed point: already-quantized values survive bitwise
  write_ppm(path, back);
  Image again = read_ppm(path);
  for (size_t k = 0; k < back.px.size(); ++k) CHECK(again.px[k] == back.px[k]);
  std::remove(path.c_str());
}

TEST_CASE("ppm reader skips header comments") {
  const std::string path = tmp_path("comments.ppm");
  std::string bytes = "P6 # magic\n# a comment line\n1 # width\n1\n255\n";
  bytes += '\x40';
  bytes += '\x80';
  bytes += '\xc0';
  write_raw(path, bytes);
  Image img = read_ppm(path);
  CHECK(img.w == 1);
  CHECK(img.h == 1);
  CHECK(img.at(0, 0, 0) == 64.0 / 255.0);
  CHECK(img.at(1, 0, 0) == 128.0 / 255.0);
  CHECK(img.at(2, 0, 0) == 192.0 / 255.0);
  std::remove(path.c_str());
}

TEST_CASE("ppm reader rejects malformed files") {
  const std::string path = tmp_path("bad.ppm");
  write_raw(path, "P5\n1 1\n255\n\x00");
  CHECK_THROWS_AS(read_ppm(path), DataError);
  write_raw(path, "P6\n2 2\n255\nxy");  // 12 bytes owed, 2 present
  CHECK_THROWS_AS(read_ppm(path), DataError);
  write_raw(path, "P6\n1 1\n65535\n\x01\x01\x01");
  CHECK_THROWS_AS(read_ppm(path), DataError);
  CHECK_THROWS_AS(read_ppm(tmp_path("missing.ppm")), DataError);
  std::remove(path.c_str());
}

// ===== label io =====

TEST_CASE("label round trip is bit-exact at full precision") {
  Rng rng(77);
  std::vector<Label> labels;
  for (int i = 0; i < 40; ++i) {
    Label l;
    l.class_id = rng.uniform_int(3);
    l.w = rng.uniform(0.05, 0.4);
    l.h = rng.uniform(0.05, 0.4);
    l.cx = rng.uniform(l.w / 2, 1.0 - l.w / 2);
    l.cy = rng.uniform(l.h / 2, 1.0 - l.h / 2);
    if (i % 2 == 0) {
      l.has_center = true;
      l.pcx = rng.uniform(l.cx - l.w / 2, l.cx + l.w / 2);
      l.pcy = rng.uniform(l.cy - l.h / 2, l.cy + l.h / 2);
    }
    labels.push_back(l);
  }
  const std::string path = tmp_path("labels.txt");
  write_labels(path, labels);
  std::vector<Label> back = read_labels(path);
  REQUIRE(back.size() == labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    CHECK(back[i].class_id == labels[i].class_id);
    CHECK(back[i].cx == labels[i].cx);
    CHECK(back[i].cy == labels[i].cy);
    CHECK(back[i].w == labels[i].w);
    CHECK(back[i].h == labels[i].h);
    CHECK(back[i].has_center == labels[i].has_center);
    if (labels[i].has_center) {
      CHECK(back[i].pcx == labels[i].pcx);
      CHECK(back[i].pcy == labels[i].pcy);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("label reader rejects malformed rows with the line number") {
  const std::string path = tmp_path("badlabels.txt");
  write_raw(path, "0 0.5 0.5 0.2 0.2\n1 0.5 0.5 0.2\n");
  try {
    read_labels(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  // six fields: a center x with no center y
  write_raw(path, "0 0.5 0.5 0.2 0.2 0.5\n");
  CHECK_THROWS_AS(read_labels(path), DataError);
  // eight fields: trailing garbage
  write_raw(path, "0 0.5 0.5 0.2 0.2 0.5 0.5 9\n");
  CHECK_THROWS_AS(read_labels(path), DataError);
  write_raw(path, "0 0.5 abc 0.2 0.2\n");
  CHECK_THROWS_AS(read_labels(path), DataError);
  // geometry violations surface as DataError too
  write_raw(path, "0 0.05 0.5 0.2 0.2\n");  // box spills past x=0
  CHECK_THROWS_AS(read_labels(path), DataError);
  write_raw(path, "0 0.5 0.5 0.2 0.2 0.9 0.9\n");  // center outside box
  CHECK_THROWS_AS(read_labels(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("validate_label enforces the unit frame with slack") {
  Label l;
  l.class_id = 0;
  l.cx = 0.5;
  l.cy = 0.5;
  l.w = 1.0;
  l.h = 1.0;
  CHECK_NOTHROW(validate_label(l));  // touches the frame exactly
  l.w = 1.0 + 1e-10;                 // inside the 1e-9 slack
  CHECK_NOTHROW(validate_label(l));
  l.w = 1.0 + 1e-7;
  CHECK_THROWS_AS(validate_label(l), DataError);
  l.w = 0.0;
  CHECK_THROWS_AS(validate_label(l), DataError);
  l.w = 0.2;
  l.h = 0.2;
  l.class_id = -1;
  CHECK_THROWS_AS(validate_label(l), DataError);
  l.class_id = 0;
  l.has_center = true;
  l.pcx = 0.5;
  l.pcy = 0.61;  // outside the box
  CHECK_THROWS_AS(validate_label(l), DataError);
  l.pcy = 0.6;  // on the edge counts as inside
  CHECK_NOTHROW(validate_label(l));
}

// ===== tensor bridges =====

TEST_CASE("image/tensor bridges are exact inverses") {
  Rng rng(5150);
  Image img = random_image(6, 4, rng);
  Tensor t = image_to_tensor(img);
  REQUIRE(t.shape() == std::vector<int>{1, 3, 4, 6});
  CHECK(t.data()[0] == img.at(0, 0, 0));
  CHECK(t.data()[3 * 4 * 6 - 1] == img.at(2, 3, 5));
  Image back = tensor_to_image(t);
  REQUIRE(back.w == img.w);
  REQUIRE(back.h == img.h);
  for (size_t k = 0; k < img.px.size(); ++k) CHECK(back.px[k] == img.px[k]);
}

TEST_CASE("tensor_to_image validates shape") {
  CHECK_THROWS_AS(tensor_to_image(Tensor::zeros({1, 1, 4, 4})), ShapeError);
  CHECK_THROWS_AS(tensor_to_image(Tensor::zeros({3, 4, 4})), ShapeError);
  CHECK_THROWS_AS(tensor_to_image(Tensor::zeros({2, 3, 4, 4}), 2), ShapeError);
  CHECK_NOTHROW(tensor_to_image(Tensor::zeros({2, 3, 4, 4}), 1));
}
