#include "multiad/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace multiad {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<char>& bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  long next_int() {
    skip_space_and_comments();
    long value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw FormatError(name_ + ": header value out of range");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(name_ + ": malformed header");
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw FormatError(name_ + ": missing whitespace before raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& bytes_;
  const std::string& name_;
  std::size_t pos_ = 2;
};

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + name);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError(name + ": not a binary PGM/PPM file");
  }
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader header(bytes, name);
  img.width = header.next_int();
  img.height = header.next_int();
  const long maxval = header.next_int();
  if (img.width < 1 || img.height < 1) throw FormatError(name + ": empty raster");
  if (maxval < 1 || maxval > 255) throw FormatError(name + ": only 8-bit rasters are supported");
  const std::size_t offset = header.raster_offset();
  const auto count = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (bytes.size() < offset + count) throw FormatError(name + ": truncated raster");
  img.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = static_cast<unsigned char>(bytes[offset + i]);
    img.pixels[i] = maxval == 255 ? v : static_cast<std::uint8_t>(std::lround(255.0 * v / maxval));
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ValueError("write_pnm: only 1 or 3 channels");
  if (static_cast<Index>(image.pixels.size()) != image.width * image.height * image.channels) {
    throw ShapeError("write_pnm: pixel buffer does not match extent");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor<float> image_to_tensor(const Image& image) {
  Tensor<float> t({image.channels, image.height, image.width});
  for (Index y = 0; y < image.height; ++y) {
    for (Index x = 0; x < image.width; ++x) {
      for (Index c = 0; c < image.channels; ++c) {
        t[(c * image.height + y) * image.width + x] =
            static_cast<float>(image.pixels[static_cast<std::size_t>((y * image.width + x) * image.channels + c)]) /
            255.0f;
      }
    }
  }
  return t;
}

Image tensor_to_image(const Tensor<float>& chw) {
  if (chw.rank() != 3) throw ShapeError("tensor_to_image: expected [c,h,w], got " + shape_string(chw.shape()));
  Image img{chw.dim(2), chw.dim(1), chw.dim(0), {}};
  img.pixels.resize(static_cast<std::size_t>(chw.size()));
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) {
      for (Index c = 0; c < img.channels; ++c) {
        const float v = std::clamp(chw[(c * img.height + y) * img.width + x], 0.0f, 1.0f);
        img.pixels[static_cast<std::size_t>((y * img.width + x) * img.channels + c)] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

}  // namespace multiad
