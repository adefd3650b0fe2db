#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "medprompt/autodiff.hpp"
#include "medprompt/rng.hpp"

namespace medprompt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  Index checked = 0;
  Index non_finite = 0;
  std::string worst;

  bool passed(double tol) const { return non_finite == 0 && max_rel_err < tol; }
};

/// Central-difference check of analytic gradients.
///
/// `make_loss` builds the scalar loss from the current parameter values; it
/// receives a tape when the analytic pass runs and nullptr for the perturbed
/// forward-only evaluations. With max_elems >= 0 only that many elements per
/// parameter are probed, chosen deterministically from sample_seed.
///
/// The numeric estimate Richardson-extrapolates central differences at eps
/// and eps/2, cancelling the O(eps^2) truncation term. That allows an eps
/// large enough to sit above the forward-pass rounding noise even for
/// elements whose gradients are orders of magnitude smaller than others in
/// the same graph.
template <typename Scalar>
GradCheckReport finite_diff_gradcheck(
    const std::vector<Parameter<Scalar>*>& params,
    const std::function<Value<Scalar>(Tape<Scalar>*)>& make_loss, double eps = 1e-5,
    Index max_elems = -1, uint64_t sample_seed = 0) {
  for (Parameter<Scalar>* p : params) p->zero_grad();
  {
    Tape<Scalar> tape;
    Value<Scalar> loss = make_loss(&tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  Index param_idx = 0;
  for (Parameter<Scalar>* p : params) {
    const Index n = p->value.numel();
    std::vector<Index> probe;
    if (max_elems < 0 || n <= max_elems) {
      probe.resize(static_cast<size_t>(n));
      for (Index i = 0; i < n; ++i) probe[static_cast<size_t>(i)] = i;
    } else {
      std::vector<Index> all(static_cast<size_t>(n));
      for (Index i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      Rng rng(derive_seed(sample_seed, 0x6763, static_cast<uint64_t>(param_idx)));
      for (Index i = 0; i < max_elems; ++i) {
        Index j = i + rng.uniform_int(0, n - 1 - i);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
        probe.push_back(all[static_cast<size_t>(i)]);
      }
    }

    for (Index idx : probe) {
      Scalar* slot = p->value.data() + idx;
      const Scalar saved = *slot;
      auto eval_at = [&](double offset) {
        *slot = saved + static_cast<Scalar>(offset);
        double v = static_cast<double>(make_loss(nullptr).data.item());
        *slot = saved;
        return v;
      };
      const double d_full = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
      const double d_half = (eval_at(eps / 2) - eval_at(-eps / 2)) / eps;
      const double numeric = (4.0 * d_half - d_full) / 3.0;
      const double analytic = static_cast<double>(p->grad.data()[idx]);
      ++report.checked;
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        ++report.non_finite;
        report.worst = str_cat(p->name, "[", idx, "]: non-finite (analytic=", analytic,
                               ", numeric=", numeric, ")");
        continue;
      }
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = str_cat(p->name, "[", idx, "]: analytic=", analytic,
                               " numeric=", numeric, " rel=", rel);
      }
    }
    ++param_idx;
  }
  return report;
}

}  // namespace medprompt
