// SPDX-License-Identifier: Apache-2.0

#include "sicsf/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sicsf {

namespace {

constexpr double kRecheckAbove = 1e-6;
constexpr double kRecheckShrink = 10.0;
constexpr double kKinkRelative = 1e-6;

// Wraps f so that it always yields a scalar: a non-scalar output is contracted
// with a fixed random probe.
class ScalarObjective {
 public:
  ScalarObjective(const std::function<Tensor<double>()>& f, std::uint64_t seed) : f_(f), seed_(seed) {}

  Tensor<double> operator()() {
    Tensor<double> y = f_();
    if (y.numel() == 1) return y;
    return sum(mul(y, probe_for(y)));
  }

  // Central difference of the contracted objective, formed from the
  // element-wise output differences so that unaffected outputs cancel exactly.
  double difference(const std::vector<double>& up, const std::vector<double>& down) {
    if (up.size() == 1) return up[0] - down[0];
    const auto p = probe_.data();
    long double acc = 0.0L;
    for (std::size_t k = 0; k < p.size(); ++k) {
      acc += static_cast<long double>(p[k]) * (static_cast<long double>(up[k]) - down[k]);
    }
    return static_cast<double>(acc);
  }

  // A copy of the output values, since f may return storage shared with its input.
  std::vector<double> raw() {
    const Tensor<double> y = f_();
    return {y.data().begin(), y.data().end()};
  }

 private:
  const Tensor<double>& probe_for(const Tensor<double>& y) {
    if (!probe_.defined() || probe_.shape() != y.shape()) {
      std::mt19937_64 rng(seed_);
      std::uniform_real_distribution<double> unif(-1.0, 1.0);
      std::vector<double> r(y.numel());
      for (auto& v : r) v = unif(rng);
      probe_ = Tensor<double>::from(y.shape(), std::move(r));
    }
    return probe_;
  }

  const std::function<Tensor<double>()>& f_;
  std::uint64_t seed_;
  Tensor<double> probe_;
};

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> wrt, double eps,
                           std::size_t max_per_tensor, std::uint64_t seed, double floor) {
  ScalarObjective objective(f, seed);
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  double value = 0.0;
  {
    Tensor<double> loss = objective();
    value = loss.item();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (auto& t : wrt) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }

  GradCheckResult result;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& t = wrt[ti];
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_per_tensor > 0 && idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_tensor);
    }
    auto data = t.mutable_data();
    auto central = [&](std::size_t i, double h) {
      const double saved = data[i];
      data[i] = saved + h;
      const auto up = objective.raw();
      data[i] = saved - h;
      const auto down = objective.raw();
      data[i] = saved;
      return objective.difference(up, down) / (2.0 * h);
    };
    auto rel_error = [floor](double a, double b) {
      return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
    };
    for (std::size_t i : idx) {
      const double a = analytic[ti][i];
      double numeric = central(i, eps);
      double rel = rel_error(a, numeric);
      if (rel > kRecheckAbove) {
        // Estimates at two step sizes that disagree by more than rounding
        // allows mean the wider window contains a kink; keep the narrow one.
        const double small = eps / kRecheckShrink;
        const double narrow = central(i, small);
        const double rounding = 1e-15 * (1.0 + std::abs(value)) / small;
        const double gap = std::abs(narrow - numeric);
        if (gap > kKinkRelative * std::max(std::abs(narrow), std::abs(numeric)) && gap > 100.0 * rounding) {
          ++result.kinks;
          numeric = narrow;
          rel = rel_error(a, numeric);
        }
      }
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = ti;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& t : wrt) t.zero_grad();
  return result;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double eps) {
  std::function<Tensor<double>()> g = [&f, &x]() { return f(x); };
  return grad_check(g, {x}, eps).max_rel_error;
}

}  // namespace sicsf
