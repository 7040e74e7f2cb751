#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ccad/core/errors.hpp"
#include "ccad/core/tensor.hpp"

namespace ccad {

// Diffusion variance schedule. Tables are indexed internally from 0; the
// external time step t runs over [1, T] and abar(t) maps between the two,
// with abar(0) == 1 so the final sampling step lands on a clean sample.
struct NoiseSchedule {
    int T = 0;
    double eta = 0.0;  // 0 => deterministic sampling
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double abar(int t) const {
        if (t < 0 || t > T) throw ParamError("time step out of range: t=" + std::to_string(t));
        return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t) - 1];
    }

    // sigma for the jump t -> t_prev (t_prev < t). eta=0 gives 0 exactly.
    double sigma(int t, int t_prev) const {
        if (eta == 0.0) return 0.0;
        const double ab_t = abar(t);
        const double ab_p = abar(t_prev);
        if (ab_p >= 1.0) return 0.0;  // jump ends on a clean sample
        return eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    }
    double sigma(int t) const { return sigma(t, t - 1); }
};

enum class ScheduleKind { Linear };

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::Linear, double eta = 0.0) {
    if (T < 1) throw ParamError("make_schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0)) throw ParamError("make_schedule: beta_start must be > 0");
    if (!(beta_end < 1.0)) throw ParamError("make_schedule: beta_end must be < 1");
    if (!(beta_start <= beta_end)) throw ParamError("make_schedule: beta_start must be <= beta_end");
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ParamError("make_schedule: eta must be finite and >= 0");
    (void)kind;  // only Linear exists

    NoiseSchedule s;
    s.T = T;
    s.eta = eta;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = prod;
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    require_same_shape(x0, eps, "forward_diffuse");
    if (t < 1 || t > s.T) throw ParamError("forward_diffuse: t must be in [1, T]");
    const double ab = s.abar(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out(x0.shape);
    for (size_t i = 0; i < x0.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

// One reverse jump t -> t_prev given the model's noise estimate:
//   sqrt(abar_prev) * x0_pred + sqrt(1 - abar_prev - sigma^2) * eps_hat + sigma * fresh
// where x0_pred = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
template <typename T>
Tensor<T> ddim_step_to(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev,
                       const NoiseSchedule& s, const Tensor<T>& fresh_noise) {
    require_same_shape(x_t, eps_hat, "ddim_step");
    require_same_shape(x_t, fresh_noise, "ddim_step(fresh_noise)");
    if (t < 1 || t > s.T) throw ParamError("ddim_step: t must be in [1, T]");
    if (t_prev < 0 || t_prev >= t) throw ParamError("ddim_step: t_prev must satisfy 0 <= t_prev < t");
    const double ab_t = s.abar(t);
    const double ab_p = s.abar(t_prev);
    const double sig = s.sigma(t, t_prev);
    const double rad = 1.0 - ab_p - sig * sig;
    if (rad < -1e-15)
        throw ScheduleError("ddim_step: sigma^2 exceeds 1 - abar_prev (negative radicand) at t=" +
                            std::to_string(t));
    const T c0 = static_cast<T>(std::sqrt(ab_p / ab_t));
    const T c1 = static_cast<T>(std::sqrt(ab_p) * -std::sqrt(1.0 - ab_t) / std::sqrt(ab_t) +
                                std::sqrt(std::max(0.0, rad)));
    const T cn = static_cast<T>(sig);
    Tensor<T> out(x_t.shape);
    for (size_t i = 0; i < x_t.numel(); ++i)
        out.data[i] = c0 * x_t.data[i] + c1 * eps_hat.data[i] + cn * fresh_noise.data[i];
    return out;
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, const NoiseSchedule& s,
                    const Tensor<T>& fresh_noise) {
    return ddim_step_to(x_t, eps_hat, t, t - 1, s, fresh_noise);
}

struct GuidanceConfig {
    double w = 0.0;

    void validate() const {
        if (!std::isfinite(w) || w < 0.0) throw ParamError("GuidanceConfig: w must be finite and >= 0");
    }
};

// Target-guided noise correction: eps_uncond - w * sqrt(1 - abar_t) * (xbar_t - x_t).
template <typename T>
Tensor<T> guided_epsilon(const Tensor<T>& eps_uncond, const Tensor<T>& x_t, const Tensor<T>& xbar_t,
                         const GuidanceConfig& g, int t, const NoiseSchedule& s) {
    require_same_shape(eps_uncond, x_t, "guided_epsilon");
    require_same_shape(x_t, xbar_t, "guided_epsilon(xbar_t)");
    g.validate();
    const T c = static_cast<T>(g.w * std::sqrt(1.0 - s.abar(t)));
    Tensor<T> out(eps_uncond.shape);
    for (size_t i = 0; i < out.numel(); ++i)
        out.data[i] = eps_uncond.data[i] - c * (xbar_t.data[i] - x_t.data[i]);
    return out;
}

// Noised target: xbar_t = sqrt(abar_t) xbar0 + sqrt(1 - abar_t) eps_pred.
// Same form as forward_diffuse but driven by the model's prediction.
template <typename T>
Tensor<T> target_forward(const Tensor<T>& xbar0, const Tensor<T>& eps_pred, int t, const NoiseSchedule& s) {
    require_same_shape(xbar0, eps_pred, "target_forward");
    const double ab = s.abar(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out(xbar0.shape);
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a * xbar0.data[i] + b * eps_pred.data[i];
    return out;
}

// Strided inference subsequence: `steps` time points descending from T,
// evenly spaced, always containing T. steps == T gives T, T-1, ..., 1.
inline std::vector<int> strided_timesteps(int T, int steps) {
    if (steps < 1) throw ParamError("strided_timesteps: steps must be >= 1");
    if (steps > T) throw ParamError("strided_timesteps: steps exceeds schedule length T");
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        // round to nearest grid point in [1, T], strictly decreasing
        ts[static_cast<size_t>(i)] = T - static_cast<int>(std::llround(static_cast<double>(i) * (T - 1) /
                                                                       (steps == 1 ? 1 : steps - 1)));
    }
    ts.back() = steps == 1 ? T : 1;
    return ts;
}

}  // namespace ccad
