#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "streamloc/rng.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc::test {

// Largest |a-b| / max(|a|,|b|,floor) over two equally shaped tensors.
inline double max_rel_diff(const Tensor& a, const Tensor& b,
                           double floor = 1e-9) {
  double worst = 0.0;
  dispatch(a.dtype(), [&]<typename S>() {
    auto as = a.buf<S>();
    auto bs = b.buf<S>();
    for (size_t i = 0; i < as.size(); ++i) {
      const double x = static_cast<double>(as[i]);
      const double y = static_cast<double>(bs[i]);
      const double rel =
          std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, rel);
    }
  });
  return worst;
}

inline double max_rel_diff(const Tensor& a, const std::vector<double>& b,
                           double floor = 1e-9) {
  double worst = 0.0;
  dispatch(a.dtype(), [&]<typename S>() {
    auto as = a.buf<S>();
    for (size_t i = 0; i < as.size(); ++i) {
      const double x = static_cast<double>(as[i]);
      const double rel =
          std::abs(x - b[i]) / std::max({std::abs(x), std::abs(b[i]), floor});
      worst = std::max(worst, rel);
    }
  });
  return worst;
}

inline bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.dtype() == b.dtype() &&
         a.impl_->data == b.impl_->data;
}

// Scratch directory unique to the calling test binary; wiped on creation.
inline std::string scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / ("streamloc-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace streamloc::test
