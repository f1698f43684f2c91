#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "kra/tensor.hpp"

namespace kra {

// Nearest 8-bit level of a [0,1] intensity (values outside are clamped).
std::uint8_t quantize(double value) noexcept;

// Binary portable pixmap (P6, maxval 255) for 3 x H x W tensors in [0,1].
std::string encode_ppm(const Tensor& rgb);
Tensor decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
Tensor read_ppm(const std::filesystem::path& path);

// Binary portable graymap (P5, maxval 255) for H x W tensors in [0,1].
std::string encode_pgm(const Tensor& gray);
Tensor decode_pgm(const std::string& bytes);
void write_pgm(const std::filesystem::path& path, const Tensor& gray);

// Min-max stretch of a signed tensor onto [0,1]; a constant tensor maps to
// all zeros. Used for perturbation visualizations.
Tensor normalize_for_display(const Tensor& t);

std::string read_file(const std::filesystem::path& path);
// Creates missing parent directories.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace kra
