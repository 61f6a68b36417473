#pragma once

#include <filesystem>
#include <vector>

#include "deskpro/tensor.hpp"

namespace deskpro {

// Grayscale heatmap at feature resolution. Pixel bytes are the literal
// attention values scaled to [0,255] — no per-image renormalization, so
// heatmaps stay comparable across models.
void write_attention_heatmap(const Tensor& attention,
                             const std::filesystem::path& path);

// Input image with the (nearest-upsampled) attention map blended into the
// red channel.
void write_attention_overlay(const Tensor& image, const Tensor& attention,
                             const std::filesystem::path& path);

// Simple line raster of a CMC curve; one marker per k in [1, |gallery|].
void write_cmc_curve(const std::vector<double>& curve,
                     const std::filesystem::path& path);

}  // namespace deskpro
