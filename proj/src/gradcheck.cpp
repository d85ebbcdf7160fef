#include "ivcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ivcl/ops.hpp"
#include "ivcl/tape.hpp"

namespace ivcl {

GradcheckResult gradcheck(const std::string& name, const std::vector<Tensor>& wrt,
                          const std::function<Tensor()>& loss, const GradcheckOptions& options) {
  GradcheckResult result{name, 0.0, 0, true};
  std::vector<Tensor> analytic;
  {
    GradTape tape;
    Tensor l = loss();
    tape.backward(l);
    for (const auto& t : wrt) analytic.push_back(tape.grad(t));
  }
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    Tensor t = wrt[i];
    if (t.dtype() != DType::F64) throw ContractViolation("gradcheck: '" + name + "' input is not f64");
    auto data = t.mutable_data<double>();
    std::vector<std::size_t> entries(data.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries > 0 && entries.size() > static_cast<std::size_t>(options.max_entries)) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(options.max_entries));
    }
    const auto a = analytic[i].data<double>();
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (auto j : entries) {
      const double saved = data[j];
      data[j] = saved + options.step;
      const double plus = loss().item();
      data[j] = saved - options.step;
      const double minus = loss().item();
      data[j] = saved;
      result.evaluations += 2;
      const double numeric = (plus - minus) / (2.0 * options.step);
      max_diff = std::max(max_diff, std::abs(a[j] - numeric));
      max_a = std::max(max_a, std::abs(a[j]));
      max_n = std::max(max_n, std::abs(numeric));
    }
    const double rel = max_diff / std::max({max_a, max_n, 1e-6});
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  result.passed = std::isfinite(result.max_rel_error) && result.max_rel_error <= options.tolerance;
  return result;
}

Tensor random_projection_loss(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  for (auto& v : w) v = uniform(rng);
  return sum(mul(out, Tensor(out.shape(), std::move(w)).to(out.dtype())));
}

void randomize_uniform(const ParamRefs& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  for (const auto& [name, t] : params)
    for (auto& v : t->mutable_data<double>()) v = uniform(rng);
}

}  // namespace ivcl
