#pragma once

#include <vector>

namespace sgdm {

// Variance schedule of the forward noising process: beta_t, alpha_t = 1-beta_t
// and the running products alpha_bar_t, indexed by timestep 0..T-1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    // alpha_bar at step t, with the boundary convention alpha_bar(-1) = 1
    // (the fully denoised endpoint of the chain).
    double alpha_bar_at(int t) const { return t < 0 ? 1.0 : alpha_bars[static_cast<size_t>(t)]; }

    void validate() const;
};

// Linear beta schedule from beta_start to beta_end over T steps.
// Rejects T = 0 and endpoints outside (0,1) or out of order.
NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

}  // namespace sgdm
