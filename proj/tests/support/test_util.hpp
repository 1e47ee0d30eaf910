// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sicsf/tensor.hpp"

namespace sicsf::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0,
                        bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
std::vector<T> to_vector(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sicsf_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sicsf::testing
