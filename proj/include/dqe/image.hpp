// Single-channel image planes and their on-disk forms.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dqe {

// H x W float plane, row-major. Luma planes hold values in [0, 1].
class Plane {
 public:
  Plane() = default;
  Plane(int height, int width, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x) { return data_[index(y, x)]; }
  float at(int y, int x) const { return data_[index(y, x)]; }

  std::span<float> pixels() { return data_; }
  std::span<const float> pixels() const { return data_; }

  bool same_shape(const Plane& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const Plane&, const Plane&) = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

using LumaPlane = Plane;

// Constant plane of value qp / 51.
using QPMap = Plane;

// Interleaved 8-bit RGB raster.
struct RgbImage {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> bytes;
};

// BT.601 luma, Y = (0.299 R + 0.587 G + 0.114 B) / 255, no intermediate rounding.
LumaPlane rgb_to_luma(const RgbImage& rgb);

// Clamps to [0, 1].
LumaPlane clamp_unit(LumaPlane plane);

// Rounds onto the 8-bit grid: round(255 v) / 255 after clamping.
LumaPlane quantize_8bit(LumaPlane plane);

std::vector<std::uint8_t> to_bytes(const LumaPlane& plane);
LumaPlane from_bytes(std::span<const std::uint8_t> bytes, int height, int width);

// Edge-replicates to the next multiple of `multiple` in each dimension.
LumaPlane pad_to_multiple(const LumaPlane& plane, int multiple);
LumaPlane crop(const LumaPlane& plane, int y0, int x0, int height, int width);

// Reads PNG (gray, gray+alpha, RGB, RGBA; 8 or 16 bit) or binary PGM/PPM and
// returns the luma plane. Colour inputs go through rgb_to_luma.
LumaPlane read_luma_image(const std::filesystem::path& path);

// Writes an 8-bit grayscale PNG (or binary PGM when the extension is .pgm).
void write_luma_image(const std::filesystem::path& path, const LumaPlane& plane);

RgbImage read_rgb_image(const std::filesystem::path& path);

// Raw plane: width*height bytes, row-major, 8-bit.
void write_raw_plane(const std::filesystem::path& path, const LumaPlane& plane);
LumaPlane read_raw_plane(const std::filesystem::path& path, int height, int width);

}  // namespace dqe
