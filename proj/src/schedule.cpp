#include "sgdm/schedule.hpp"

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sgdm {

void NoiseSchedule::validate() const {
    if (T <= 0) throw std::invalid_argument("schedule: T must be positive");
    if (betas.size() != static_cast<size_t>(T) || alphas.size() != static_cast<size_t>(T) ||
        alpha_bars.size() != static_cast<size_t>(T))
        throw std::invalid_argument("schedule: array lengths disagree with T");
    double prev_bar = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = betas[static_cast<size_t>(t)];
        if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("schedule: beta outside (0,1)");
        if (alphas[static_cast<size_t>(t)] != 1.0 - beta)
            throw std::invalid_argument("schedule: alpha != 1 - beta");
        double bar = alpha_bars[static_cast<size_t>(t)];
        if (!(bar > 0.0 && bar < 1.0)) throw std::invalid_argument("schedule: alpha_bar outside (0,1)");
        if (!(bar < prev_bar)) throw std::invalid_argument("schedule: alpha_bar not strictly decreasing");
        prev_bar = bar;
    }
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_start : beta_start + t * (beta_end - beta_start) / (T - 1);
        s.betas[static_cast<size_t>(t)]  = beta;
        s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
        prod *= 1.0 - beta;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    s.validate();
    return s;
}

}  // namespace sgdm
