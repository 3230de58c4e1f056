#include "poselift/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

torch::Tensor quantize_image(const torch::Tensor& image) {
  return (image.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
}

torch::Tensor dequantize_image(const torch::Tensor& image_u8) { return image_u8.to(torch::kFloat32) / 255.0f; }

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  auto img = image.dim() == 3 ? image.squeeze(0) : image;
  if (img.dim() != 2) throw ShapeMismatchError("write_png expects an [H, W] image");
  auto u8 = (img.scalar_type() == torch::kUInt8 ? img : quantize_image(img)).contiguous().cpu();
  cv::Mat mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr<uint8_t>());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw IoError("cannot write " + path.string());
}

void write_png(const std::filesystem::path& path, const SkeletonImage& image) {
  write_png(path, to_tensor(image));
}

torch::Tensor read_png(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw IoError("cannot read image " + path.string());
  return torch::from_blob(mat.data, {mat.rows, mat.cols}, torch::kUInt8).clone();
}

}  // namespace poselift
