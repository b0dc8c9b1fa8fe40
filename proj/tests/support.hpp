#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "longiseg/rng.hpp"
#include "longiseg/tensor.hpp"

namespace testing {

// Fresh per-test scratch directory under the build tree (or the system temp dir).
inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* root = std::getenv("LONGISEG_TEST_TMP");
  std::filesystem::path p = root ? std::filesystem::path(root) : std::filesystem::temp_directory_path() / "longiseg";
  p /= name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
longiseg::BasicTensor<T> random_tensor(longiseg::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  longiseg::BasicTensor<T> t(std::move(shape));
  longiseg::Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Central differences of f with respect to every entry of x.
inline longiseg::TensorD central_difference(const std::function<double(const longiseg::TensorD&)>& f,
                                            longiseg::TensorD x, double h = 1e-6) {
  longiseg::TensorD g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max |a - b| / max(|b|, floor) over entries
inline double max_rel_error(const longiseg::TensorD& a, const longiseg::TensorD& b, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor);
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace testing
