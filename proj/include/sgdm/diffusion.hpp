#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sgdm/guidance.hpp"
#include "sgdm/rng.hpp"
#include "sgdm/schedule.hpp"
#include "sgdm/tensor.hpp"

namespace sgdm {

// Noise-prediction function over a batch: x is {N,C,H,W}, t and g give the
// per-image timestep and conditioning. Returns the predicted noise {N,3,H,W}.
template <typename S>
using DenoiserFn =
    std::function<Tensor<S>(const Tensor<S>& x, std::span<const int> t, std::span<const GuidanceSignal> g)>;

enum class SigmaMode { zero, ddpm_equivalent };

struct SamplerConfig {
    int num_steps = 250;
    SigmaMode sigma_mode = SigmaMode::zero;
    double guidance_strength = 0.0;  // w: 0 = unconditional, 1 = conditional, >1 extrapolates

    void validate(int T) const {
        if (num_steps < 1 || num_steps > T) throw std::invalid_argument("sampler: num_steps must be in [1, T]");
        if (guidance_strength < 0.0) throw std::invalid_argument("sampler: guidance_strength must be >= 0");
    }
};

// q(x_t | x_0) closed form: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename S>
Tensor<S> forward_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.T) throw std::out_of_range("forward_sample: t out of range");
    check_same_shape(x0, eps, "forward_sample");
    double abar = schedule.alpha_bars[static_cast<size_t>(t)];
    S sa = static_cast<S>(std::sqrt(abar));
    S sn = static_cast<S>(std::sqrt(1.0 - abar));
    Tensor<S> out(x0.shape);
    for (size_t i = 0; i < x0.numel(); ++i) out[i] = sa * x0[i] + sn * eps[i];
    return out;
}

// Deterministic core of the training objective: the squared noise-prediction
// error at a fixed (t, eps), averaged over all elements.
template <typename S>
double training_loss_at(const DenoiserFn<S>& denoiser, const Tensor<S>& x0, const GuidanceSignal& guidance,
                        const NoiseSchedule& schedule, int t, const Tensor<S>& eps) {
    Tensor<S> xt = forward_sample(x0, t, eps, schedule);
    if (xt.shape.size() == 3) xt.shape.insert(xt.shape.begin(), 1);
    int tv[1] = {t};
    GuidanceSignal gs[1] = {guidance};
    Tensor<S> pred = denoiser(xt, std::span<const int>(tv, 1), std::span<const GuidanceSignal>(gs, 1));
    if (pred.numel() != eps.numel()) throw std::invalid_argument("training_loss: denoiser output shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.numel(); ++i) {
        double d = static_cast<double>(pred[i]) - static_cast<double>(eps[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

// Single-example training loss with t ~ Uniform{0..T-1} and eps ~ N(0, I).
template <typename S>
double training_loss(const DenoiserFn<S>& denoiser, const Tensor<S>& x0, const GuidanceSignal& guidance,
                     const NoiseSchedule& schedule, Rng& rng) {
    int t = rng.uniform_int(schedule.T);
    Tensor<S> eps = randn_like_shape<S>(x0.shape, rng);
    return training_loss_at(denoiser, x0, guidance, schedule, t, eps);
}

// Classifier-free mixing: (1-w) eps(x,t) + w eps(x,t;k), evaluated as
// uncond + w (cond - uncond) so the result is exactly affine in w. The w = 0
// and w = 1 endpoints return the respective prediction bitwise.
template <typename S>
Tensor<S> mix_guided(const Tensor<S>& uncond, const Tensor<S>& cond, double w) {
    check_same_shape(uncond, cond, "mix_guided");
    if (w == 0.0) return uncond;
    if (w == 1.0) return cond;
    S sw = static_cast<S>(w);
    Tensor<S> out(uncond.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = uncond[i] + sw * (cond[i] - uncond[i]);
    return out;
}

template <typename S>
Tensor<S> guided_epsilon(const DenoiserFn<S>& denoiser, const Tensor<S>& x_t, int t, const GuidanceSignal& k,
                         double w) {
    Tensor<S> x = x_t;
    if (x.shape.size() == 3) x.shape.insert(x.shape.begin(), 1);
    int n = x.dim(0);
    std::vector<int> ts(static_cast<size_t>(n), t);
    std::vector<GuidanceSignal> null_g(static_cast<size_t>(n), k.as_null());
    std::vector<GuidanceSignal> cond_g(static_cast<size_t>(n), k);
    if (w == 0.0) {
        Tensor<S> out = denoiser(x, ts, null_g);
        out.shape = x_t.shape;
        return out;
    }
    if (w == 1.0) {
        Tensor<S> out = denoiser(x, ts, cond_g);
        out.shape = x_t.shape;
        return out;
    }
    // One batched evaluation of the conditional and unconditional pair.
    std::vector<int> x2_shape = x.shape;
    x2_shape[0] = 2 * n;
    Tensor<S> x2(x2_shape);
    std::copy(x.data.begin(), x.data.end(), x2.data.begin());
    std::copy(x.data.begin(), x.data.end(), x2.data.begin() + static_cast<std::ptrdiff_t>(x.numel()));
    std::vector<int> t2(static_cast<size_t>(2 * n), t);
    std::vector<GuidanceSignal> g2;
    g2.reserve(static_cast<size_t>(2 * n));
    for (auto& g : null_g) g2.push_back(g);
    for (auto& g : cond_g) g2.push_back(g);
    Tensor<S> both = denoiser(x2, t2, g2);
    size_t half = both.numel() / 2;
    Tensor<S> uncond(x_t.shape), cond(x_t.shape);
    std::copy(both.data.begin(), both.data.begin() + static_cast<std::ptrdiff_t>(half), uncond.data.begin());
    std::copy(both.data.begin() + static_cast<std::ptrdiff_t>(half), both.data.end(), cond.data.begin());
    return mix_guided(uncond, cond, w);
}

// One DDIM transition from t to t_prev (t_prev = -1 denotes the final step,
// where alpha_bar is taken as 1).
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, const Tensor<S>& eps_hat, int t, int t_prev, double sigma_t,
                    const NoiseSchedule& schedule, const Tensor<S>* noise = nullptr) {
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    if (t < 0 || t >= schedule.T) throw std::out_of_range("ddim_step: t out of range");
    if (sigma_t < 0.0) throw std::invalid_argument("ddim_step: sigma must be >= 0");
    check_same_shape(x_t, eps_hat, "ddim_step");
    double abar_t = schedule.alpha_bar_at(t);
    double abar_p = schedule.alpha_bar_at(t_prev);
    double dir_sq = 1.0 - abar_p - sigma_t * sigma_t;
    if (dir_sq < 0.0) throw std::invalid_argument("ddim_step: sigma^2 exceeds 1 - alpha_bar_prev");
    S inv_sa   = static_cast<S>(1.0 / std::sqrt(abar_t));
    S sn_t     = static_cast<S>(std::sqrt(1.0 - abar_t));
    S sa_p     = static_cast<S>(std::sqrt(abar_p));
    S dir_coef = static_cast<S>(std::sqrt(dir_sq));
    S sig      = static_cast<S>(sigma_t);
    if (sigma_t > 0.0) {
        if (noise == nullptr) throw std::invalid_argument("ddim_step: sigma > 0 requires noise");
        check_same_shape(x_t, *noise, "ddim_step noise");
    }
    Tensor<S> out(x_t.shape);
    for (size_t i = 0; i < x_t.numel(); ++i) {
        S x0_hat = (x_t[i] - sn_t * eps_hat[i]) * inv_sa;
        S v      = sa_p * x0_hat + dir_coef * eps_hat[i];
        if (sigma_t > 0.0) v += sig * (*noise)[i];
        out[i] = v;
    }
    return out;
}

// Evenly spaced, strictly increasing timestep subsequence ending at T-1.
inline std::vector<int> timestep_subsequence(int T, int num_steps) {
    if (num_steps < 1 || num_steps > T) throw std::invalid_argument("timestep_subsequence: need 1 <= num_steps <= T");
    std::vector<int> ts(static_cast<size_t>(num_steps));
    if (num_steps == 1) {
        ts[0] = T - 1;
        return ts;
    }
    for (int i = 0; i < num_steps; ++i)
        ts[static_cast<size_t>(i)] = static_cast<int>((static_cast<long long>(i) * (T - 1)) / (num_steps - 1));
    return ts;
}

// DDPM-equivalent sigma for the jump t -> t_prev (eta = 1 in the DDIM family).
inline double ddpm_equivalent_sigma(const NoiseSchedule& schedule, int t, int t_prev) {
    double abar_t = schedule.alpha_bar_at(t);
    double abar_p = schedule.alpha_bar_at(t_prev);
    double v = (1.0 - abar_p) / (1.0 - abar_t) * (1.0 - abar_t / abar_p);
    return std::sqrt(std::max(0.0, v));
}

// Full DDIM chain over a batch: starts from x_T ~ N(0,I), alternates guided
// prediction and the DDIM transition down the timestep subsequence, and clips
// to [-1,1] at the very end only.
template <typename S>
Tensor<S> ddim_sample_batch(const DenoiserFn<S>& denoiser, std::span<const GuidanceSignal> guidance,
                            const SamplerConfig& sampler, const NoiseSchedule& schedule,
                            const std::vector<int>& image_shape, Rng& rng) {
    sampler.validate(schedule.T);
    int n = static_cast<int>(guidance.size());
    std::vector<int> shape = {n};
    shape.insert(shape.end(), image_shape.begin(), image_shape.end());
    Tensor<S> x = randn_like_shape<S>(shape, rng);

    std::vector<int> ts = timestep_subsequence(schedule.T, sampler.num_steps);
    std::vector<int> t_batch(static_cast<size_t>(n));
    std::vector<GuidanceSignal> null_g;
    null_g.reserve(guidance.size());
    for (const auto& g : guidance) null_g.push_back(g.as_null());

    double w = sampler.guidance_strength;
    for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
        int t      = ts[static_cast<size_t>(i)];
        int t_prev = i > 0 ? ts[static_cast<size_t>(i - 1)] : -1;
        std::fill(t_batch.begin(), t_batch.end(), t);

        Tensor<S> eps_hat;
        if (w == 0.0) {
            eps_hat = denoiser(x, t_batch, null_g);
        } else if (w == 1.0) {
            eps_hat = denoiser(x, t_batch, guidance);
        } else {
            std::vector<int> x2_shape = x.shape;
            x2_shape[0] = 2 * n;
            Tensor<S> x2(x2_shape);
            std::copy(x.data.begin(), x.data.end(), x2.data.begin());
            std::copy(x.data.begin(), x.data.end(), x2.data.begin() + static_cast<std::ptrdiff_t>(x.numel()));
            std::vector<int> t2(static_cast<size_t>(2 * n), t);
            std::vector<GuidanceSignal> g2;
            g2.reserve(static_cast<size_t>(2 * n));
            for (auto& g : null_g) g2.push_back(g);
            for (const auto& g : guidance) g2.push_back(g);
            Tensor<S> both = denoiser(x2, t2, g2);
            size_t half = both.numel() / 2;
            Tensor<S> uncond(x.shape), cond(x.shape);
            std::copy(both.data.begin(), both.data.begin() + static_cast<std::ptrdiff_t>(half), uncond.data.begin());
            std::copy(both.data.begin() + static_cast<std::ptrdiff_t>(half), both.data.end(), cond.data.begin());
            eps_hat = mix_guided(uncond, cond, w);
        }

        double sigma = sampler.sigma_mode == SigmaMode::zero ? 0.0 : ddpm_equivalent_sigma(schedule, t, t_prev);
        if (sigma > 0.0) {
            Tensor<S> noise = randn_like_shape<S>(x.shape, rng);
            x = ddim_step(x, eps_hat, t, t_prev, sigma, schedule, &noise);
        } else {
            x = ddim_step(x, eps_hat, t, t_prev, 0.0, schedule);
        }
    }
    for (auto& v : x.data) v = std::min<S>(S(1), std::max<S>(S(-1), v));
    return x;
}

// Single-image convenience wrapper.
template <typename S>
Tensor<S> ddim_sample(const DenoiserFn<S>& denoiser, const GuidanceSignal& guidance, const SamplerConfig& sampler,
                      const NoiseSchedule& schedule, const std::vector<int>& image_shape, Rng& rng) {
    GuidanceSignal gs[1] = {guidance};
    Tensor<S> batch = ddim_sample_batch(denoiser, std::span<const GuidanceSignal>(gs, 1), sampler, schedule,
                                        image_shape, rng);
    batch.shape = image_shape;
    return batch;
}

}  // namespace sgdm
