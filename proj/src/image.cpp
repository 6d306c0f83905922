#include "dqe/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "dqe/error.hpp"

namespace dqe {

namespace fs = std::filesystem;

Plane::Plane(int height, int width, float fill) : height_(height), width_(width) {
  if (height < 0 || width < 0) throw ShapeError("negative plane dimensions");
  data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

LumaPlane rgb_to_luma(const RgbImage& rgb) {
  if (rgb.channels != 3) {
    throw ShapeError("rgb_to_luma expects 3 channels, got " + std::to_string(rgb.channels));
  }
  const std::size_t n = static_cast<std::size_t>(rgb.height) * rgb.width;
  if (rgb.bytes.size() != n * 3) throw ShapeError("rgb_to_luma: byte count does not match dims");
  LumaPlane out(rgb.height, rgb.width);
  auto px = out.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rgb.bytes[3 * i];
    const double g = rgb.bytes[3 * i + 1];
    const double b = rgb.bytes[3 * i + 2];
    px[i] = static_cast<float>((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
  }
  return out;
}

LumaPlane clamp_unit(LumaPlane plane) {
  for (float& v : plane.pixels()) v = std::clamp(v, 0.0f, 1.0f);
  return plane;
}

LumaPlane quantize_8bit(LumaPlane plane) {
  for (float& v : plane.pixels()) {
    v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  }
  return plane;
}

std::vector<std::uint8_t> to_bytes(const LumaPlane& plane) {
  std::vector<std::uint8_t> out(plane.size());
  auto px = plane.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(px[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

LumaPlane from_bytes(std::span<const std::uint8_t> bytes, int height, int width) {
  if (bytes.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw FormatError("plane has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  LumaPlane out(height, width);
  auto px = out.pixels();
  for (std::size_t i = 0; i < bytes.size(); ++i) px[i] = bytes[i] / 255.0f;
  return out;
}

LumaPlane pad_to_multiple(const LumaPlane& plane, int multiple) {
  if (multiple < 1) throw ConfigError("pad multiple must be positive");
  const int h = (plane.height() + multiple - 1) / multiple * multiple;
  const int w = (plane.width() + multiple - 1) / multiple * multiple;
  if (h == plane.height() && w == plane.width()) return plane;
  LumaPlane out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(y, plane.height() - 1);
    for (int x = 0; x < w; ++x) out.at(y, x) = plane.at(sy, std::min(x, plane.width() - 1));
  }
  return out;
}

LumaPlane crop(const LumaPlane& plane, int y0, int x0, int height, int width) {
  if (y0 < 0 || x0 < 0 || y0 + height > plane.height() || x0 + width > plane.width()) {
    throw ShapeError("crop window exceeds plane");
  }
  LumaPlane out(height, width);
  for (int y = 0; y < height; ++y) {
    const float* src = &plane.pixels()[static_cast<std::size_t>(y0 + y) * plane.width() + x0];
    std::copy(src, src + width, &out.at(y, 0));
  }
  return out;
}

namespace {

std::string lower_ext(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

std::vector<std::uint8_t> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Binary PGM (P5) or PPM (P6), maxval <= 255.
RgbImage read_pnm(const fs::path& path) {
  const auto bytes = slurp(path);
  std::size_t pos = 0;
  auto token = [&]() {
    std::string tok;
    while (pos < bytes.size()) {
      const char c = static_cast<char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        ++pos;
      } else {
        tok.push_back(c);
        ++pos;
      }
    }
    return tok;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError(path.string() + ": not a binary PGM/PPM");
  RgbImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) > 255) throw FormatError(path.string() + ": 16-bit PNM unsupported");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": bad PNM header");
  }
  ++pos;  // single whitespace after maxval
  img.channels = magic == "P5" ? 1 : 3;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() < pos + n) throw FormatError(path.string() + ": truncated PNM");
  img.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

RgbImage read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError(path.string() + ": " + image.message);
  }
  const bool colour = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RgbImage img;
  img.width = static_cast<int>(image.width);
  img.height = static_cast<int>(image.height);
  img.channels = colour ? 3 : 1;
  img.bytes.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(path.string() + ": " + image.message);
  }
  return img;
}

void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

RgbImage read_rgb_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such image: " + path.string());
  const std::string ext = lower_ext(path);
  RgbImage img = (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") ? read_pnm(path) : read_png(path);
  if (img.channels == 1) {
    RgbImage rgb{img.height, img.width, 3, {}};
    rgb.bytes.reserve(img.bytes.size() * 3);
    for (const std::uint8_t v : img.bytes) rgb.bytes.insert(rgb.bytes.end(), {v, v, v});
    return rgb;
  }
  return img;
}

LumaPlane read_luma_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such image: " + path.string());
  const std::string ext = lower_ext(path);
  const RgbImage img =
      (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") ? read_pnm(path) : read_png(path);
  if (img.channels == 1) return from_bytes(img.bytes, img.height, img.width);
  return rgb_to_luma(img);
}

void write_luma_image(const fs::path& path, const LumaPlane& plane) {
  const auto bytes = to_bytes(plane);
  if (lower_ext(path) == ".pgm") {
    std::ostringstream header;
    header << "P5\n" << plane.width() << ' ' << plane.height() << "\n255\n";
    const std::string h = header.str();
    std::vector<std::uint8_t> file(h.begin(), h.end());
    file.insert(file.end(), bytes.begin(), bytes.end());
    write_atomic(path, file);
    return;
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(plane.width());
  image.height = static_cast<png_uint_32>(plane.height());
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> encoded(size);
  if (!png_image_write_to_memory(&image, encoded.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + image.message);
  }
  encoded.resize(size);
  write_atomic(path, encoded);
}

void write_raw_plane(const fs::path& path, const LumaPlane& plane) {
  write_atomic(path, to_bytes(plane));
}

LumaPlane read_raw_plane(const fs::path& path, int height, int width) {
  if (!fs::exists(path)) throw IoError("missing plane file " + path.string());
  const auto bytes = slurp(path);
  return from_bytes(bytes, height, width);
}

}  // namespace dqe
