#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "qfae/errors.hpp"
#include "qfae/imaging.hpp"

namespace qfae::imaging {

ImageTensor load_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot decode image: " + path.string());
  if (m.rows == 0 || m.cols == 0) throw ValidationError("image has zero area: " + path.string());

  double scale;
  switch (m.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    default: throw IoError("unsupported pixel depth in " + path.string());
  }
  const int src_channels = m.channels();
  if (src_channels != 1 && src_channels != 3 && src_channels != 4) {
    throw IoError("unsupported channel count in " + path.string());
  }
  const int channels = src_channels == 1 ? 1 : 3;
  ImageTensor img(channels, m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < channels; ++c) {
        // OpenCV stores BGR(A); planes here are RGB.
        const int src_c = channels == 1 ? 0 : 2 - c;
        double v = m.depth() == CV_8U ? m.ptr<std::uint8_t>(y)[x * src_channels + src_c]
                                      : m.ptr<std::uint16_t>(y)[x * src_channels + src_c];
        img.at(c, y, x) = static_cast<float>(v * scale);
      }
    }
  }
  return img;
}

void save_image(const std::filesystem::path& path, const ImageTensor& img, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw ValidationError("bit depth must be 8 or 16");
  if (img.channels != 1 && img.channels != 3) throw ValidationError("can only save 1- or 3-channel images");
  const int type = (bit_depth == 8 ? CV_8UC(img.channels) : CV_16UC(img.channels));
  cv::Mat m(img.height, img.width, type);
  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const int dst_c = img.channels == 1 ? 0 : 2 - c;
        const double v = std::round(std::clamp<double>(img.at(c, y, x), 0.0, 1.0) * maxv);
        if (bit_depth == 8) {
          m.ptr<std::uint8_t>(y)[x * img.channels + dst_c] = static_cast<std::uint8_t>(v);
        } else {
          m.ptr<std::uint16_t>(y)[x * img.channels + dst_c] = static_cast<std::uint16_t>(v);
        }
      }
    }
  }
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image: " + path.string());
}

}  // namespace qfae::imaging
