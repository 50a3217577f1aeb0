#pragma once

// Rotary position machinery with a second, per-lane rotation.
//
// Vectors of even dimension d are treated as d/2 independent planes; plane l
// is the component pair (2l, 2l+1). A rotation by angle a maps (x, y) to
//   (cos(a) * x + sin(a) * y,  -sin(a) * x + cos(a) * y)
// i.e. the 2x2 block is [[cos, sin], [-sin, cos]]. All angles are accumulated
// in double before sin/cos, because lane angles can reach K * theta * m with
// K in the thousands and float arguments would lose the phase.

#include <cmath>
#include <span>
#include <vector>

#include "lanerope/common.hpp"

namespace lanerope::rope {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// theta_l = base^(-2(l-1)/d) for l = 1..d/2. Strictly decreasing, theta_1 = 1.
inline std::vector<double> make_rope_frequencies(int head_dim, double base) {
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw invalid_parameter_error("make_rope_frequencies: head_dim must be positive and even");
    if (!(base > 1.0))
        throw invalid_parameter_error("make_rope_frequencies: base must exceed 1");
    std::vector<double> theta(static_cast<size_t>(head_dim) / 2);
    for (size_t l = 0; l < theta.size(); ++l)
        theta[l] = std::pow(base, -2.0 * static_cast<double>(l) / static_cast<double>(head_dim));
    return theta;
}

// Rotate one plane in place by angle a (computed in double).
template <class S>
inline void rotate_plane(S& x, S& y, double a) {
    double c = std::cos(a), s = std::sin(a);
    double nx = c * static_cast<double>(x) + s * static_cast<double>(y);
    double ny = -s * static_cast<double>(x) + c * static_cast<double>(y);
    x = static_cast<S>(nx);
    y = static_cast<S>(ny);
}

// Position-only rotation: plane l turns by theta_l * i.
template <class S>
inline std::vector<S> rotate(std::span<const S> v, long long position, const std::vector<double>& theta) {
    if (v.size() != theta.size() * 2)
        throw invalid_parameter_error("rotate: vector length must equal 2 * |theta|");
    if (position < 0)
        throw invalid_parameter_error("rotate: position must be non-negative");
    std::vector<S> out(v.begin(), v.end());
    for (size_t l = 0; l < theta.size(); ++l)
        rotate_plane(out[2 * l], out[2 * l + 1], theta[l] * static_cast<double>(position));
    return out;
}

// Lane-aware rotation: plane l turns by the merged angle theta_l*i + omega_l*m.
// One rotation by the summed angle equals the two rotations composed.
template <class S>
inline std::vector<S> lane_rotate(std::span<const S> v, long long position, long long lane,
                                  const std::vector<double>& theta, const std::vector<double>& omega) {
    if (v.size() != theta.size() * 2 || omega.size() != theta.size())
        throw invalid_parameter_error("lane_rotate: need |v| == 2*|theta| and |omega| == |theta|");
    if (position < 0 || lane < 0)
        throw invalid_parameter_error("lane_rotate: position and lane must be non-negative");
    std::vector<S> out(v.begin(), v.end());
    for (size_t l = 0; l < theta.size(); ++l) {
        double a = theta[l] * static_cast<double>(position) + omega[l] * static_cast<double>(lane);
        rotate_plane(out[2 * l], out[2 * l + 1], a);
    }
    return out;
}

// Lane frequencies that embed lane m at virtual position K*m: omega = K*theta.
inline std::vector<double> groupthink_lane_frequencies(const std::vector<double>& theta, long long gap) {
    if (gap < 0) throw invalid_parameter_error("groupthink_lane_frequencies: gap must be non-negative");
    std::vector<double> omega(theta.size());
    for (size_t l = 0; l < theta.size(); ++l) omega[l] = static_cast<double>(gap) * theta[l];
    return omega;
}

// Piecewise-linear ramp in the wavelength ratio r = L / lambda. Frequencies
// whose wavelength exceeds L/alpha are left alone (0), those shorter than
// L/beta get the full lane offset (1).
inline double ntk_ramp_from_ratio(double r, double alpha, double beta) {
    if (!(alpha < beta)) throw invalid_parameter_error("ntk_ramp: need alpha < beta");
    if (r < alpha) return 0.0;
    if (r > beta) return 1.0;
    return (r - alpha) / (beta - alpha);
}

inline double ntk_ramp(double theta_l, double pretrain_context, double alpha, double beta) {
    if (!(theta_l > 0.0)) throw invalid_parameter_error("ntk_ramp: theta must be positive");
    if (!(pretrain_context > 0.0)) throw invalid_parameter_error("ntk_ramp: context length must be positive");
    double wavelength = kTwoPi / theta_l;
    return ntk_ramp_from_ratio(pretrain_context / wavelength, alpha, beta);
}

// omega_l = ramp(r_l) * K * theta_l: low-frequency planes keep omega 0 so the
// lane offset never wraps them past the trained context.
inline std::vector<double> ntk_lane_frequencies(const std::vector<double>& theta, long long gap,
                                                double pretrain_context, double alpha, double beta) {
    if (gap < 0) throw invalid_parameter_error("ntk_lane_frequencies: gap must be non-negative");
    std::vector<double> omega(theta.size());
    for (size_t l = 0; l < theta.size(); ++l)
        omega[l] = ntk_ramp(theta[l], pretrain_context, alpha, beta) * static_cast<double>(gap) * theta[l];
    return omega;
}

// --- Fourier attention bias -------------------------------------------------
//
// beta(x) = b^T R_{w, x} b over F/2 planes with per-plane angle 2*pi*w_t*x.
// Because each plane's rotation is orthogonal, this collapses to
//   sum_t |b_t|^2 * cos(2*pi*w_t*x)
// which is symmetric in x and peaks at beta(0) = |b|^2.

inline double fourier_bias_value(const std::vector<double>& coeffs, const std::vector<double>& freqs,
                                 double x) {
    if (coeffs.size() != freqs.size() * 2)
        throw invalid_parameter_error("fourier_bias_value: need |coeffs| == 2*|freqs|");
    double acc = 0.0;
    for (size_t t = 0; t < freqs.size(); ++t) {
        double c = coeffs[2 * t], s = coeffs[2 * t + 1];
        acc += (c * c + s * s) * std::cos(kTwoPi * freqs[t] * x);
    }
    return acc;
}

// Equal mass per plane, all of it on the cosine component: |out|_2 ==
// target_norm and the resulting bias is an even function of the offset.
inline std::vector<double> make_bias_init(int bias_dim, double target_norm) {
    if (bias_dim < 0 || bias_dim % 2 != 0)
        throw invalid_parameter_error("make_bias_init: bias_dim must be even and non-negative");
    if (bias_dim == 0) {
        if (target_norm != 0.0)
            throw invalid_parameter_error("make_bias_init: non-zero norm requires bias_dim > 0");
        return {};
    }
    std::vector<double> out(static_cast<size_t>(bias_dim), 0.0);
    double per_plane = target_norm / std::sqrt(static_cast<double>(bias_dim) / 2.0);
    for (int t = 0; t < bias_dim / 2; ++t) out[2 * t] = per_plane;
    return out;
}

// Default bias frequencies for a maximum group size: w_t = t / n_max for
// t = 1..F/2 with F = 2*ceil((n_max-1)/2). For n_max = 2 this is the single
// frequency 1/2, which flips sign between adjacent lanes.
inline int default_bias_dim(int n_max) {
    if (n_max < 1) throw invalid_parameter_error("default_bias_dim: n_max must be positive");
    return 2 * ((n_max - 1 + 1) / 2);
}

inline std::vector<double> default_bias_frequencies(int n_max) {
    int f = default_bias_dim(n_max);
    std::vector<double> freqs(static_cast<size_t>(f) / 2);
    for (size_t t = 0; t < freqs.size(); ++t)
        freqs[t] = static_cast<double>(t + 1) / static_cast<double>(n_max);
    return freqs;
}

// --- parameter bundles -------------------------------------------------------

struct RopeParams {
    int head_dim = 0;
    double base = 10000.0;
    std::vector<double> theta;

    static RopeParams make(int head_dim, double base = 10000.0) {
        RopeParams p;
        p.head_dim = head_dim;
        p.base = base;
        p.theta = make_rope_frequencies(head_dim, base);
        return p;
    }
};

enum class LaneInit { groupthink, ntk };

struct LaneRopeParams {
    RopeParams rope;
    std::vector<double> omega;        // per-plane lane frequencies
    long long sequence_gap = 8192;    // K
    double pretrain_context = 4096;   // L, for the ntk ramp
    double ramp_alpha = 4.0;
    double ramp_beta = 32.0;
    int bias_dim = 0;                 // F
    std::vector<double> bias_freqs;   // F/2 entries
    std::vector<double> bias_coeffs;  // F entries (the initial beta-hat)

    static LaneRopeParams make(int head_dim, double base, LaneInit strategy, long long gap,
                               double pretrain_context, int n_max, double bias_norm,
                               double alpha = 4.0, double beta = 32.0) {
        LaneRopeParams p;
        p.rope = RopeParams::make(head_dim, base);
        p.sequence_gap = gap;
        p.pretrain_context = pretrain_context;
        p.ramp_alpha = alpha;
        p.ramp_beta = beta;
        p.omega = strategy == LaneInit::groupthink
                      ? groupthink_lane_frequencies(p.rope.theta, gap)
                      : ntk_lane_frequencies(p.rope.theta, gap, pretrain_context, alpha, beta);
        p.bias_dim = n_max > 1 ? default_bias_dim(n_max) : 0;
        p.bias_freqs = p.bias_dim > 0 ? default_bias_frequencies(n_max) : std::vector<double>{};
        p.bias_coeffs = make_bias_init(p.bias_dim, p.bias_dim > 0 ? bias_norm : 0.0);
        return p;
    }
};

}  // namespace lanerope::rope
