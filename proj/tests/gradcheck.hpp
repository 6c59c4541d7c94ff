#pragma once

// Shared analytic-vs-finite-difference comparison. A coordinate passes when
// its absolute disagreement is below the finite-difference noise floor (1e-6)
// or its relative error is within 1e-4; wrong backward rules blow past both.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ulab/autodiff.hpp"
#include "ulab/tensor.hpp"

namespace gradcheck {

struct Worst {
    double rel{0.0};
    double abs{0.0};
    bool ok{true};
};

inline void update(Worst& w, double analytic, double fd) {
    double abs_err = std::abs(analytic - fd);
    double denom = std::max(std::abs(analytic), std::abs(fd));
    double rel_err = denom > 0 ? abs_err / denom : 0.0;
    if (std::abs(analytic) < 1e-8) {
        w.abs = std::max(w.abs, abs_err);
        if (abs_err > 1e-6) w.ok = false;
        return;
    }
    if (abs_err > 1e-6) {
        w.rel = std::max(w.rel, rel_err);
        if (rel_err > 1e-4) w.ok = false;
    }
}

// `analytic` keyed by the node ids in `ids` (parameter order), `fd` keyed by
// parameter position.
template <typename Real>
Worst compare(const ulab::GradMap<Real>& analytic, const std::vector<int>& ids,
              const ulab::GradMap<Real>& fd) {
    Worst w;
    for (std::size_t p = 0; p < ids.size(); ++p) {
        const ulab::Tensor<Real>& ga = analytic.at(ids[p]);
        const ulab::Tensor<Real>& gf = fd.at(static_cast<int>(p));
        for (std::size_t i = 0; i < ga.values.size(); ++i) {
            update(w, static_cast<double>(ga.values[i]), static_cast<double>(gf.values[i]));
        }
    }
    return w;
}

}  // namespace gradcheck
