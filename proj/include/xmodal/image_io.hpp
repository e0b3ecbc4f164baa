#pragma once

#include <filesystem>

#include "xmodal/corpus.hpp"

namespace xmodal {

// Reads any raster format OpenCV understands, converts to RGB and resizes to
// image_size x image_size.
ImageTensor load_image(const std::filesystem::path& path, std::int64_t image_size);

// 8-bit RGB PNG.
void save_png(const std::filesystem::path& path, const ImageTensor& image);

}  // namespace xmodal
