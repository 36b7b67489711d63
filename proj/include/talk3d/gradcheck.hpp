#pragma once

#include <functional>
#include <string>

#include "talk3d/tensor.hpp"

namespace talk3d::ad {

/// Compares the analytic gradient of `loss_fn` (a fresh scalar forward built
/// from the current parameter values) against central finite differences at
/// the probed indices. The FD side only ever calls the forward path.
struct GradCheckResult {
    bool ok = true;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::string worst;  // "<param>[i]" of the worst probe
};

struct GradCheckOptions {
    double h = 1e-5;
    double rtol = 1e-5;
    double atol = 1e-7;
    /// Probes per parameter tensor; <=0 means every element.
    int probes_per_tensor = 0;
    std::uint64_t probe_seed = 17;
};

GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& params,
                          const GradCheckOptions& opt = {});

}  // namespace talk3d::ad
