#include "deskpro/plots.hpp"

#include <algorithm>
#include <cmath>

#include "deskpro/errors.hpp"
#include "deskpro/png_io.hpp"

namespace deskpro {

namespace {

uint8_t to_byte(double v) {
  return static_cast<uint8_t>(
      std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Accepts [h,w], [h,w,1] or [1,h,w,1] attention tensors.
void att_dims(const Tensor& a, int& h, int& w) {
  if (a.ndims() == 2) {
    h = a.dim(0), w = a.dim(1);
  } else if (a.ndims() == 3 && a.dim(2) == 1) {
    h = a.dim(0), w = a.dim(1);
  } else if (a.ndims() == 4 && a.dim(0) == 1 && a.dim(3) == 1) {
    h = a.dim(1), w = a.dim(2);
  } else {
    throw ShapeError("unsupported attention map shape");
  }
}

}  // namespace

void write_attention_heatmap(const Tensor& attention,
                             const std::filesystem::path& path) {
  int h, w;
  att_dims(attention, h, w);
  PngImage img;
  img.width = w;
  img.height = h;
  img.channels = 1;
  img.pixels.reserve(static_cast<size_t>(h) * w);
  for (double v : attention.raw()) img.pixels.push_back(to_byte(v));
  write_png(path, img);
}

void write_attention_overlay(const Tensor& image, const Tensor& attention,
                             const std::filesystem::path& path) {
  if (image.ndims() != 3 || image.dim(2) != 3)
    throw ShapeError("overlay expects an [H,W,3] image");
  int hf, wf;
  att_dims(attention, hf, wf);
  const int H = image.dim(0), W = image.dim(1);
  const auto& att = attention.raw();
  PngImage img;
  img.width = W;
  img.height = H;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(H) * W * 3);
  for (int i = 0; i < H; ++i) {
    const int fi = std::min(i * hf / H, hf - 1);
    for (int j = 0; j < W; ++j) {
      const int fj = std::min(j * wf / W, wf - 1);
      const double a = att[static_cast<size_t>(fi) * wf + fj];
      const size_t p = (static_cast<size_t>(i) * W + j) * 3;
      img.pixels[p + 0] = to_byte(0.5 * image.at3(i, j, 0) + 0.5 * a);
      img.pixels[p + 1] = to_byte(0.5 * image.at3(i, j, 1));
      img.pixels[p + 2] = to_byte(0.5 * image.at3(i, j, 2));
    }
  }
  write_png(path, img);
}

void write_cmc_curve(const std::vector<double>& curve,
                     const std::filesystem::path& path) {
  if (curve.empty()) throw DataError("empty CMC curve");
  const int n = static_cast<int>(curve.size());
  const int margin = 16;
  const int plot_w = std::max(2 * n, 128);
  const int W = plot_w + 2 * margin;
  const int Hp = 128;
  const int H = Hp + 2 * margin;
  PngImage img;
  img.width = W;
  img.height = H;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(W) * H * 3, 255);

  auto put = [&](int i, int j, uint8_t r, uint8_t g, uint8_t b) {
    if (i < 0 || i >= H || j < 0 || j >= W) return;
    const size_t p = (static_cast<size_t>(i) * W + j) * 3;
    img.pixels[p] = r, img.pixels[p + 1] = g, img.pixels[p + 2] = b;
  };
  // axes
  for (int j = margin; j < W - margin; ++j) put(H - margin, j, 0, 0, 0);
  for (int i = margin; i <= H - margin; ++i) put(i, margin, 0, 0, 0);

  auto px = [&](int k) {  // k in [0, n)
    return margin + (n == 1 ? plot_w / 2
                            : k * (plot_w - 1) / (n - 1));
  };
  auto py = [&](double v) {
    return H - margin - static_cast<int>(std::lround(v * (Hp - 1)));
  };
  // polyline between consecutive points, then 3x3 markers
  for (int k = 0; k + 1 < n; ++k) {
    const int x0 = px(k), y0 = py(curve[static_cast<size_t>(k)]);
    const int x1 = px(k + 1), y1 = py(curve[static_cast<size_t>(k + 1)]);
    const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
    for (int s = 0; s <= steps; ++s) {
      const int x = x0 + (x1 - x0) * s / steps;
      const int y = y0 + (y1 - y0) * s / steps;
      put(y, x, 64, 64, 200);
    }
  }
  for (int k = 0; k < n; ++k) {
    const int x = px(k), y = py(curve[static_cast<size_t>(k)]);
    for (int di = -1; di <= 1; ++di)
      for (int dj = -1; dj <= 1; ++dj) put(y + di, x + dj, 200, 32, 32);
  }
  write_png(path, img);
}

}  // namespace deskpro
