#include "xmodal/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "xmodal/error.hpp"

namespace xmodal {

ImageTensor load_image(const std::filesystem::path& path, std::int64_t image_size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) fail(ErrorKind::io, "corpus", "load_image", "cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  const auto side = static_cast<int>(image_size);
  if (rgb.rows != side || rgb.cols != side) {
    cv::resize(rgb, rgb, cv::Size(side, side), 0, 0, cv::INTER_AREA);
  }
  auto hwc = torch::from_blob(rgb.data, {image_size, image_size, 3}, torch::kUInt8);
  auto chw = hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0f).contiguous();
  return ImageTensor(std::move(chw));
}

void save_png(const std::filesystem::path& path, const ImageTensor& image) {
  if (image.empty()) fail(ErrorKind::validation, "generation", "save_png", "empty image");
  auto hwc = image.pixels()
                 .mul(255.0f)
                 .round()
                 .clamp(0, 255)
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  const auto side = static_cast<int>(image.size());
  cv::Mat rgb(side, side, CV_8UC3, hwc.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    fail(ErrorKind::io, "generation", "save_png", "cannot write " + path.string());
  }
}

}  // namespace xmodal
