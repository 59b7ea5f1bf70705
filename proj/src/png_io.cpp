#include "groundseg/png_io.hpp"

#include <png.h>

#include <cstring>

#include "groundseg/core_data.hpp"

namespace groundseg::png {

void write(const std::filesystem::path& path, const Image8& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.data.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path.string() + ": " + pi.message);
}

Image8 read(const std::filesystem::path& path, int channels) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + pi.message);
  pi.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 img;
  img.width = static_cast<int>(pi.width);
  img.height = static_cast<int>(pi.height);
  img.channels = channels;
  img.data.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw DataError("cannot decode PNG " + path.string() + ": " + pi.message);
  }
  return img;
}

}  // namespace groundseg::png
