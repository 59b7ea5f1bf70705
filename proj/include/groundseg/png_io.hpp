#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace groundseg::png {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> data;
};

void write(const std::filesystem::path& path, const Image8& img);
/// Reads an 8-bit gray or RGB PNG, converting to `channels`.
Image8 read(const std::filesystem::path& path, int channels);

}  // namespace groundseg::png
