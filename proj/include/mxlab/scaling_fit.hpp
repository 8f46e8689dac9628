// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// L(N, D) = E + A / N^alpha + B / D^beta fitted by minimizing a Huber loss on
// log(predicted) - log(observed).
//
// Search: 27 starts on the grid alpha, beta in {0.3, 0.5, 0.7},
// E in {0.3, 0.7, 1.0}; at each start A and B come from linear least squares
// with the exponents and E held fixed. Each start is refined by Nelder-Mead
// over (log A, log B, log E, alpha, beta), restarted from its own optimum
// until the objective stops improving. Ties keep the earliest grid start.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/rng.hpp"
#include "mxlab/run_log.hpp"

namespace mxlab {

struct ScalingPoint {
    double N = 0.0;
    double D = 0.0;
    double loss = 0.0;
};

struct ScalingFit {
    double A = 0.0, B = 0.0, E = 0.0, alpha = 0.0, beta = 0.0;
    double a = 0.0;  // beta / (alpha + beta)
    double objective_value = 0.0;
};

inline double compute_allocation_exponent(const ScalingFit& f) {
    if (!(f.alpha + f.beta > 0.0)) throw InvalidInput("allocation exponent needs alpha + beta > 0");
    return f.beta / (f.alpha + f.beta);
}

inline ScalingFit make_fit(double A, double B, double E, double alpha, double beta) {
    ScalingFit f{A, B, E, alpha, beta, 0.0, 0.0};
    f.a = alpha + beta > 0.0 ? compute_allocation_exponent(f) : 0.0;
    return f;
}

inline double predict_loss(const ScalingFit& f, double N, double D) {
    if (!(N > 0.0) || !(D > 0.0)) throw InvalidInput("predict_loss needs N > 0 and D > 0");
    return f.E + f.A * std::pow(N, -f.alpha) + f.B * std::pow(D, -f.beta);
}

/// Published fits by (weight format, activation format); the last two rows
/// quantize only the forward pass.
struct ReferenceFit {
    const char* weights;
    const char* activations;
    ScalingFit fit;
};

inline std::vector<ReferenceFit> reference_fits() {
    return {
        {"mxfp6-e2m3", "bf16", make_fit(1.84e3, 8.77e3, 0.52, 0.50, 0.51)},
        {"mxfp8-e4m3", "bf16", make_fit(2.82e3, 2.04e4, 0.54, 0.52, 0.55)},
        {"mxfp8-e5m2", "bf16", make_fit(1.68e3, 1.84e4, 0.52, 0.49, 0.55)},
        {"bf16", "bf16", make_fit(1.94e3, 2.18e4, 0.53, 0.50, 0.56)},
        {"mxfp8-e4m3", "mxfp8-e4m3", make_fit(1.57e3, 2.11e4, 0.52, 0.49, 0.55)},
        {"mxfp8-e5m2", "mxfp8-e5m2", make_fit(2.20e3, 3.98e4, 0.54, 0.51, 0.59)},
    };
}

inline double huber(double r, double delta) {
    const double a = std::fabs(r);
    return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

namespace detail {

using FitParams = std::array<double, 5>;  // log A, log B, log E, alpha, beta

inline double log_sum_exp3(double a, double b, double c) {
    const double m = std::max({a, b, c});
    return m + std::log(std::exp(a - m) + std::exp(b - m) + std::exp(c - m));
}

struct FitProblem {
    std::vector<double> logN, logD, logL;
    double delta;

    double operator()(const FitParams& p) const {
        if (!(p[3] > 0.0) || !(p[4] > 0.0)) return std::numeric_limits<double>::infinity();
        double s = 0.0;
        for (std::size_t i = 0; i < logL.size(); ++i) {
            const double pred = log_sum_exp3(p[0] - p[3] * logN[i], p[1] - p[4] * logD[i], p[2]);
            s += huber(pred - logL[i], delta);
        }
        return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
    }
};

struct Simplex {
    FitParams x;
    double f;
};

inline Simplex nelder_mead(const FitProblem& fn, const FitParams& x0, const FitParams& step, int max_iter = 4000) {
    constexpr std::size_t n = 5;
    std::array<Simplex, n + 1> s;
    s[0] = {x0, fn(x0)};
    for (std::size_t i = 0; i < n; ++i) {
        FitParams x = x0;
        x[i] += step[i];
        s[i + 1] = {x, fn(x)};
    }
    auto order = [&] { std::stable_sort(s.begin(), s.end(), [](const Simplex& a, const Simplex& b) { return a.f < b.f; }); };
    auto along = [&](const FitParams& c, const FitParams& w, double t) {
        FitParams x;
        for (std::size_t i = 0; i < n; ++i) x[i] = c[i] + t * (w[i] - c[i]);
        return x;
    };
    for (int it = 0; it < max_iter; ++it) {
        order();
        double size = 0.0;
        for (std::size_t k = 1; k <= n; ++k)
            for (std::size_t i = 0; i < n; ++i) size = std::max(size, std::fabs(s[k].x[i] - s[0].x[i]));
        if (size < 1e-11 || (std::isfinite(s[n].f) && s[n].f - s[0].f <= 1e-16 * (1.0 + s[0].f) && size < 1e-7)) break;
        FitParams c{};
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < n; ++i) c[i] += s[k].x[i] / static_cast<double>(n);
        const FitParams xr = along(c, s[n].x, -1.0);
        const double fr = fn(xr);
        if (fr < s[0].f) {
            const FitParams xe = along(c, s[n].x, -2.0);
            const double fe = fn(xe);
            s[n] = fe < fr ? Simplex{xe, fe} : Simplex{xr, fr};
        } else if (fr < s[n - 1].f) {
            s[n] = {xr, fr};
        } else {
            const bool outside = fr < s[n].f;
            const FitParams xc = along(c, outside ? xr : s[n].x, 0.5);
            const double fc = fn(xc);
            if (fc < (outside ? fr : s[n].f)) {
                s[n] = {xc, fc};
            } else {
                for (std::size_t k = 1; k <= n; ++k) {
                    s[k].x = along(s[0].x, s[k].x, 0.5);
                    s[k].f = fn(s[k].x);
                }
            }
        }
    }
    order();
    return s[0];
}

/// A, B >= tiny from least squares on (L - E) = A N^-alpha + B D^-beta.
inline std::pair<double, double> solve_intercepts(const std::vector<ScalingPoint>& pts, double alpha, double beta,
                                                  double E) {
    double s11 = 0, s12 = 0, s22 = 0, t1 = 0, t2 = 0;
    for (const auto& p : pts) {
        const double u = std::pow(p.N, -alpha), v = std::pow(p.D, -beta), r = p.loss - E;
        s11 += u * u;
        s12 += u * v;
        s22 += v * v;
        t1 += u * r;
        t2 += v * r;
    }
    const double det = s11 * s22 - s12 * s12;
    double A = 0, B = 0;
    if (det > 0.0) {
        A = (t1 * s22 - t2 * s12) / det;
        B = (s11 * t2 - s12 * t1) / det;
    }
    constexpr double tiny = 1e-6;
    return {std::max(A, tiny), std::max(B, tiny)};
}

}  // namespace detail

inline void validate_points(const std::vector<ScalingPoint>& pts) {
    if (pts.size() < 5) throw IllPosedFit("scaling fit needs at least 5 points, got " + std::to_string(pts.size()));
    double nmin = INFINITY, nmax = 0, dmin = INFINITY, dmax = 0;
    for (const auto& p : pts) {
        if (!(p.N > 0.0) || !(p.D > 0.0) || !(p.loss > 0.0) || !std::isfinite(p.N + p.D + p.loss))
            throw InvalidInput("scaling points need finite N, D, loss > 0");
        nmin = std::min(nmin, p.N);
        nmax = std::max(nmax, p.N);
        dmin = std::min(dmin, p.D);
        dmax = std::max(dmax, p.D);
    }
    if (nmin == nmax) throw IllPosedFit("all points share the same N");
    if (dmin == dmax) throw IllPosedFit("all points share the same D");
    if (nmax < 10.0 * nmin) throw IllPosedFit("N spans less than one decade");
    if (dmax < 10.0 * dmin) throw IllPosedFit("D spans less than one decade");
}

inline ScalingFit fit_scaling_law(const std::vector<ScalingPoint>& points, double huber_delta = 1e-3) {
    validate_points(points);
    if (!(huber_delta > 0.0)) throw InvalidInput("huber delta must be positive");
    // Point order must not matter: sort a copy (sums then run in a fixed order).
    std::vector<ScalingPoint> pts = points;
    std::sort(pts.begin(), pts.end(), [](const ScalingPoint& a, const ScalingPoint& b) {
        return std::tie(a.N, a.D, a.loss) < std::tie(b.N, b.D, b.loss);
    });
    detail::FitProblem fn{{}, {}, {}, huber_delta};
    for (const auto& p : pts) {
        fn.logN.push_back(std::log(p.N));
        fn.logD.push_back(std::log(p.D));
        fn.logL.push_back(std::log(p.loss));
    }
    const detail::FitParams step{0.5, 0.5, 0.1, 0.05, 0.05};
    detail::Simplex best{{}, std::numeric_limits<double>::infinity()};
    for (double alpha : {0.3, 0.5, 0.7})
        for (double beta : {0.3, 0.5, 0.7})
            for (double E : {0.3, 0.7, 1.0}) {
                const auto [A, B] = detail::solve_intercepts(pts, alpha, beta, E);
                detail::Simplex cur{{std::log(A), std::log(B), std::log(E), alpha, beta}, 0.0};
                cur.f = fn(cur.x);
                for (int round = 0; round < 20; ++round) {
                    const auto next = detail::nelder_mead(fn, cur.x, step);
                    const bool improved = next.f < cur.f - 1e-15 * (1.0 + cur.f);
                    if (next.f <= cur.f) cur = next;
                    if (!improved) break;
                }
                if (cur.f < best.f) best = cur;
            }
    ScalingFit f = make_fit(std::exp(best.x[0]), std::exp(best.x[1]), std::exp(best.x[2]), best.x[3], best.x[4]);
    f.objective_value = best.f;
    return f;
}

/// Grid of N log-spaced over [n_lo, n_hi] times D/N ratios log-spaced over
/// [r_lo, r_hi], with loss * (1 + noise * z), z standard normal.
inline std::vector<ScalingPoint> synthesize_points(const ScalingFit& truth, std::size_t n_count, double n_lo, double n_hi,
                                                   std::size_t r_count, double r_lo, double r_hi, double noise,
                                                   std::uint64_t seed) {
    auto logspace = [](std::size_t k, double lo, double hi, std::size_t i) {
        return k == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(k - 1));
    };
    std::vector<double> z(n_count * r_count);
    CounterRng(seed, Stream::synthetic, 0).fill_normal(std::span<double>(z));
    std::vector<ScalingPoint> out;
    for (std::size_t i = 0; i < n_count; ++i)
        for (std::size_t j = 0; j < r_count; ++j) {
            const double N = logspace(n_count, n_lo, n_hi, i);
            const double D = N * logspace(r_count, r_lo, r_hi, j);
            const double L = predict_loss(truth, N, D) * (1.0 + noise * z[i * r_count + j]);
            out.push_back({N, D, L});
        }
    return out;
}

// ---------------------------------------------------------------------------
// I/O: CSV with header naming N, D and loss columns (any order); fit JSON with
// keys A, B, E, alpha, beta, a, objective_value.

inline std::vector<ScalingPoint> read_points_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty points CSV");
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cell.erase(0, cell.find_first_not_of(" \t\r"));
            cell.erase(cell.find_last_not_of(" \t\r") + 1);
            out.push_back(cell);
        }
        return out;
    };
    const auto header = split(line);
    int iN = -1, iD = -1, iL = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "N") iN = static_cast<int>(i);
        else if (header[i] == "D") iD = static_cast<int>(i);
        else if (header[i] == "loss") iL = static_cast<int>(i);
    }
    if (iN < 0 || iD < 0 || iL < 0) throw IoError("points CSV header must name N, D and loss columns");
    std::vector<ScalingPoint> pts;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split(line);
        const auto need = static_cast<std::size_t>(std::max({iN, iD, iL}));
        if (cells.size() <= need) throw IoError("points CSV line " + std::to_string(lineno) + ": too few columns");
        try {
            pts.push_back({std::stod(cells[iN]), std::stod(cells[iD]), std::stod(cells[iL])});
        } catch (const std::exception&) {
            throw IoError("points CSV line " + std::to_string(lineno) + ": not a number");
        }
    }
    return pts;
}

inline void write_points_csv(std::ostream& os, const std::vector<ScalingPoint>& pts) {
    os << "N,D,loss\n";
    char buf[96];
    for (const auto& p : pts) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.N, p.D, p.loss);
        os << buf;
    }
}

inline Json fit_to_json(const ScalingFit& f) {
    Json j;
    j["A"] = f.A;
    j["B"] = f.B;
    j["E"] = f.E;
    j["alpha"] = f.alpha;
    j["beta"] = f.beta;
    j["a"] = f.a;
    j["objective_value"] = f.objective_value;
    return j;
}

}  // namespace mxlab
