#pragma once

// Hierarchical beta-Stacy synthesis of historical event tables: collapsed
// (beta-binomial) likelihood over Weibull-centred BSP hyperparameters,
// adaptive random-walk Metropolis, posterior-predictive survival curves, and
// the variance-matched approximating BSP (ESS / ENE).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/tools/minima.hpp>
#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"
#include "kmlead/reconstructor.hpp"

namespace kmlead {

struct ConvergenceError : Error {
    using Error::Error;
};

struct BSPHyper {
    double lambda = 0.0;  // Weibull rate
    double kappa = 0.0;   // Weibull shape
    double c = 0.0;       // precision (prior effective sample size)
    friend bool operator==(const BSPHyper&, const BSPHyper&) = default;
};

struct BSPParams {
    std::vector<double> alpha;
    std::vector<double> beta;
    friend bool operator==(const BSPParams&, const BSPParams&) = default;
};

inline double weibull_survival(double lambda, double kappa, double t) {
    return t <= 0.0 ? 1.0 : std::exp(-lambda * std::pow(t, kappa));
}

inline BSPParams bsp_params(const BSPHyper& h, const TimeGrid& grid) {
    if (!(h.lambda > 0) || !(h.kappa > 0) || !(h.c > 0)) throw InputError("bsp_params: hyperparameters must be positive");
    BSPParams p;
    p.alpha.reserve(grid.K());
    p.beta.reserve(grid.K());
    double g_prev = 1.0;
    for (double t : grid.times) {
        double g = weibull_survival(h.lambda, h.kappa, t);
        p.alpha.push_back(h.c * (g_prev - g));
        p.beta.push_back(h.c * g);
        g_prev = g;
    }
    return p;
}

inline BSPParams posterior_update(const BSPParams& prior, const std::vector<long>& d, const std::vector<long>& m) {
    if (d.size() != prior.alpha.size() || m.size() != prior.beta.size())
        throw InputError("posterior_update: length mismatch");
    BSPParams out = prior;
    for (std::size_t k = 0; k < d.size(); ++k) {
        if (d[k] < 0 || m[k] < 0) throw InputError("posterior_update: negative count at k=" + std::to_string(k));
        out.alpha[k] += static_cast<double>(d[k]);
        out.beta[k] += static_cast<double>(m[k]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Collapsed likelihood
// ---------------------------------------------------------------------------

inline constexpr double kGammaShape = 0.01;
inline constexpr double kGammaRate = 0.01;

// log B(a + d, b + m) - log B(a, b)
inline double log_beta_ratio(double a, double b, long d, long m) {
    if (d == 0 && m == 0) return 0.0;
    const double dd = static_cast<double>(d), mm = static_cast<double>(m);
    double v = 0.0;
    if (d > 0) v += std::lgamma(a + dd) - std::lgamma(a);
    if (m > 0) v += std::lgamma(b + mm) - std::lgamma(b);
    v -= std::lgamma(a + b + dd + mm) - std::lgamma(a + b);
    return v;
}

inline void check_tables(const std::vector<EventTable>& tables, const TimeGrid& grid) {
    for (const auto& t : tables) {
        if (t.d.size() != grid.K() || t.r.size() != grid.K())
            throw InputError("event table " + t.study.rendered() + " / " + t.arm_label + " is not on the grid");
        for (std::size_t k = 0; k < grid.K(); ++k) {
            if (t.d[k] < 0 || t.r[k] < t.d[k])
                throw InputError("event table " + t.study.rendered() + " / " + t.arm_label + ": invalid counts at k=" +
                                 std::to_string(k));
        }
    }
}

// Data term only: sum over tables and grid times of the beta-binomial log
// marginal (without binomial coefficients).
inline double collapsed_loglik_data(const BSPHyper& h, const std::vector<EventTable>& tables, const TimeGrid& grid) {
    const auto p = bsp_params(h, grid);
    double ll = 0.0;
    for (const auto& t : tables)
        for (std::size_t k = 0; k < grid.K(); ++k) ll += log_beta_ratio(p.alpha[k], p.beta[k], t.d[k], t.m(k));
    return ll;
}

// Gamma(0.01, 0.01) on lambda and kappa, Beta(1, 1) on c / N.
inline double log_prior(const BSPHyper& h, double N) {
    if (!(h.lambda > 0) || !(h.kappa > 0) || !(h.c > 0) || !(h.c < N)) return -std::numeric_limits<double>::infinity();
    auto lgamma_pdf = [](double x) {
        return kGammaShape * std::log(kGammaRate) - std::lgamma(kGammaShape) + (kGammaShape - 1.0) * std::log(x) -
               kGammaRate * x;
    };
    return lgamma_pdf(h.lambda) + lgamma_pdf(h.kappa) - std::log(N);
}

// Likelihood plus log-priors. Non-finite values (extreme hyperparameters) are
// reported as -inf so samplers reject them; callers can test with
// std::isfinite.
inline double collapsed_loglik(const BSPHyper& h, const std::vector<EventTable>& tables, const TimeGrid& grid, double N) {
    double lp = log_prior(h, N);
    if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
    double v = lp + collapsed_loglik_data(h, tables, grid);
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Random variates
// ---------------------------------------------------------------------------

// Beta draw via two gammas in log space; shapes below 1 use
// Gamma(a) = Gamma(a + 1) * U^(1/a) so tiny shapes do not underflow to 0/0.
template <class Rng>
double sample_beta(double a, double b, Rng& rng) {
    auto log_gamma_draw = [&rng](double shape) {
        if (shape >= 1.0) return std::log(std::gamma_distribution<double>(shape, 1.0)(rng));
        double g = std::gamma_distribution<double>(shape + 1.0, 1.0)(rng);
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        while (u <= 0.0) u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return std::log(g) + std::log(u) / shape;
    };
    double la = log_gamma_draw(a), lb = log_gamma_draw(b);
    // a / (a + b) = 1 / (1 + exp(lb - la))
    double diff = lb - la;
    if (diff > 700) return 0.0;
    if (diff < -700) return 1.0;
    return 1.0 / (1.0 + std::exp(diff));
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x6b6d6cu};
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// MCMC
// ---------------------------------------------------------------------------

struct McmcConfig {
    int chains = 4;
    long iters = 20000;    // per chain, including burn-in
    long burn_in = 10000;
    long thin = 5;
    std::uint64_t seed = 1;
    bool force = false;    // keep the fit even when split-R-hat > threshold
};

inline constexpr double kRhatThreshold = 1.05;

struct PosteriorSample {
    std::vector<BSPHyper> draws;
    std::vector<int> chain;    // chain id per draw
    std::vector<long> iter;    // iteration index per draw
    std::vector<double> acceptance;  // post-burn-in acceptance per chain
    std::array<double, 3> rhat{1.0, 1.0, 1.0};  // lambda, kappa, c
    std::uint64_t seed = 0;
    double N = 0.0;
    bool converged = true;

    BSPHyper mean() const {
        BSPHyper m{0, 0, 0};
        for (const auto& d : draws) {
            m.lambda += d.lambda;
            m.kappa += d.kappa;
            m.c += d.c;
        }
        const double n = static_cast<double>(draws.size());
        return {m.lambda / n, m.kappa / n, m.c / n};
    }
};

// Split-R-hat over chains of equal length.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
    std::vector<std::vector<double>> halves;
    for (const auto& c : chains) {
        const std::size_t h = c.size() / 2;
        if (h < 2) return std::numeric_limits<double>::quiet_NaN();
        halves.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
        halves.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
    }
    const double n = static_cast<double>(halves.front().size());
    const double m = static_cast<double>(halves.size());
    std::vector<double> means;
    double W = 0.0;
    for (const auto& h : halves) {
        double mu = std::accumulate(h.begin(), h.end(), 0.0) / n;
        double s2 = 0.0;
        for (double x : h) s2 += (x - mu) * (x - mu);
        W += s2 / (n - 1.0);
        means.push_back(mu);
    }
    W /= m;
    double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
    double B = 0.0;
    for (double mu : means) B += (mu - grand) * (mu - grand);
    B *= n / (m - 1.0);
    if (W == 0.0) return B == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    double var_plus = (n - 1.0) / n * W + B / n;
    return std::sqrt(var_plus / W);
}

namespace detail {

using Vec3 = std::array<double, 3>;

inline BSPHyper from_unconstrained(const Vec3& th, double N) {
    double u = 1.0 / (1.0 + std::exp(-th[2]));
    return {std::exp(th[0]), std::exp(th[1]), N * u};
}

// Log density on (log lambda, log kappa, logit(c / N)) including the Jacobian.
inline double log_target(const Vec3& th, const std::vector<EventTable>& tables, const TimeGrid& grid, double N) {
    BSPHyper h = from_unconstrained(th, N);
    double u = h.c / N;
    if (!(u > 0.0 && u < 1.0)) return -std::numeric_limits<double>::infinity();
    double lp = collapsed_loglik(h, tables, grid, N);
    if (!std::isfinite(lp)) return lp;
    return lp + th[0] + th[1] + std::log(N) + std::log(u) + std::log1p(-u);
}

// Crude starting point: exponential rate from events / person-time.
inline Vec3 crude_start(const std::vector<EventTable>& tables, const TimeGrid& grid) {
    double events = 0.0, exposure = 0.0;
    for (const auto& t : tables) {
        double prev = 0.0;
        for (std::size_t k = 0; k < grid.K(); ++k) {
            events += static_cast<double>(t.d[k]);
            exposure += static_cast<double>(t.r[k]) * (grid.times[k] - prev);
            prev = grid.times[k];
        }
    }
    double rate = events > 0 && exposure > 0 ? events / exposure : 0.01;
    return {std::log(rate), 0.0, 0.0};
}

inline std::array<Vec3, 3> cholesky(const std::array<Vec3, 3>& A) {
    std::array<Vec3, 3> L{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = A[i][j];
            for (int k = 0; k < j; ++k) s -= L[i][k] * L[j][k];
            if (i == j) L[i][i] = std::sqrt(std::max(s, 1e-12));
            else L[i][j] = s / L[j][j];
        }
    }
    return L;
}

inline std::array<Vec3, 3> covariance(const std::vector<Vec3>& xs) {
    std::array<Vec3, 3> C{};
    if (xs.size() < 2) {
        for (int i = 0; i < 3; ++i) C[i][i] = 0.01;
        return C;
    }
    Vec3 mu{0, 0, 0};
    for (const auto& x : xs)
        for (int i = 0; i < 3; ++i) mu[i] += x[i];
    for (auto& v : mu) v /= static_cast<double>(xs.size());
    for (const auto& x : xs)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) C[i][j] += (x[i] - mu[i]) * (x[j] - mu[j]);
    for (auto& row : C)
        for (auto& v : row) v /= static_cast<double>(xs.size() - 1);
    for (int i = 0; i < 3; ++i) C[i][i] += 1e-8;
    return C;
}

struct ChainResult {
    std::vector<Vec3> kept;
    std::vector<long> kept_iter;
    double acceptance = 0.0;
    bool finite_start = true;
};

// Burn-in first half: one-at-a-time updates with per-component scales tuned
// toward 44% acceptance. Second half: joint proposal shaped by the empirical
// covariance of the warm-up draws, scale tuned toward 30%. Everything is
// frozen after burn-in.
inline ChainResult run_chain(const std::vector<EventTable>& tables, const TimeGrid& grid, double N,
                             const McmcConfig& cfg, int chain_id) {
    auto rng = make_stream(cfg.seed, static_cast<std::uint64_t>(chain_id));
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ChainResult res;

    Vec3 base = crude_start(tables, grid);
    Vec3 th{};
    double lp = -std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < 200 && !std::isfinite(lp); ++attempt) {
        double spread = attempt < 100 ? 1.0 : 0.1;
        th = {base[0] + 0.5 * spread * z(rng), base[1] + 0.3 * spread * z(rng), base[2] + spread * z(rng)};
        lp = log_target(th, tables, grid, N);
    }
    if (!std::isfinite(lp)) {
        res.finite_start = false;
        return res;
    }

    const long warm = cfg.burn_in / 2;
    const long batch = 50;
    Vec3 log_scale{std::log(0.1), std::log(0.1), std::log(0.3)};
    std::array<long, 3> acc_batch{0, 0, 0};
    std::vector<Vec3> history;
    std::array<Vec3, 3> L{};
    double joint_log_scale = std::log(2.38 / std::sqrt(3.0));
    long joint_acc_batch = 0;
    bool joint_ready = false;
    long accepted_after = 0, proposed_after = 0;

    auto refresh_covariance = [&](std::size_t from) {
        std::vector<Vec3> tail(history.begin() + static_cast<std::ptrdiff_t>(from), history.end());
        L = cholesky(covariance(tail));
        joint_ready = true;
    };

    for (long it = 0; it < cfg.iters; ++it) {
        const bool componentwise = it < warm;
        if (componentwise) {
            for (int i = 0; i < 3; ++i) {
                Vec3 prop = th;
                prop[i] += std::exp(log_scale[i]) * z(rng);
                double lq = log_target(prop, tables, grid, N);
                if (std::log(unif(rng)) < lq - lp) {
                    th = prop;
                    lp = lq;
                    ++acc_batch[i];
                }
            }
            if ((it + 1) % batch == 0) {
                double step = std::min(0.1, 1.0 / std::sqrt(static_cast<double>((it + 1) / batch)));
                for (int i = 0; i < 3; ++i) {
                    double rate = static_cast<double>(acc_batch[i]) / batch;
                    log_scale[i] += rate > 0.44 ? step : -step;
                    acc_batch[i] = 0;
                }
            }
        } else {
            if (!joint_ready) {
                if (history.size() >= 20) refresh_covariance(history.size() / 2);
                else {
                    for (int i = 0; i < 3; ++i) L[i] = Vec3{0, 0, 0}, L[i][i] = std::exp(log_scale[i]) * std::sqrt(3.0) / 2.38;
                    joint_ready = true;
                }
            }
            if (it == warm + (cfg.burn_in - warm) / 2 && it < cfg.burn_in && history.size() > 40)
                refresh_covariance(static_cast<std::size_t>(warm));
            Vec3 e{z(rng), z(rng), z(rng)};
            Vec3 prop = th;
            double s = std::exp(joint_log_scale);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j <= i; ++j) prop[i] += s * L[i][j] * e[j];
            double lq = log_target(prop, tables, grid, N);
            bool acc = std::log(unif(rng)) < lq - lp;
            if (acc) {
                th = prop;
                lp = lq;
            }
            if (it < cfg.burn_in) {
                joint_acc_batch += acc ? 1 : 0;
                if ((it - warm + 1) % batch == 0) {
                    double step = std::min(0.1, 1.0 / std::sqrt(static_cast<double>((it - warm + 1) / batch)));
                    joint_log_scale += static_cast<double>(joint_acc_batch) / batch > 0.30 ? step : -step;
                    joint_acc_batch = 0;
                }
            } else {
                ++proposed_after;
                accepted_after += acc ? 1 : 0;
            }
        }
        if (it < cfg.burn_in) history.push_back(th);
        if (it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0) {
            res.kept.push_back(th);
            res.kept_iter.push_back(it);
        }
    }
    res.acceptance = proposed_after > 0 ? static_cast<double>(accepted_after) / static_cast<double>(proposed_after) : 0.0;
    return res;
}

}  // namespace detail

inline double total_sample_size(const std::vector<EventTable>& tables) {
    double N = 0.0;
    for (const auto& t : tables) N += static_cast<double>(t.n());
    return N;
}

// Chains run on separate threads with independent streams derived from the
// seed; results are gathered in chain order so output does not depend on
// scheduling. Throws ConvergenceError when split-R-hat exceeds the threshold
// on any parameter unless cfg.force is set (then `converged` is false).
inline PosteriorSample fit_bhm(const std::vector<EventTable>& tables, const TimeGrid& grid, const McmcConfig& cfg,
                               double N = 0.0) {
    if (tables.empty()) throw InputError("fit_bhm: no event tables");
    if (grid.K() == 0) throw InputError("fit_bhm: empty grid");
    if (cfg.chains < 1 || cfg.iters <= cfg.burn_in || cfg.thin < 1 || cfg.burn_in < 0)
        throw InputError("fit_bhm: invalid MCMC settings");
    check_tables(tables, grid);
    if (N <= 0.0) N = total_sample_size(tables);
    if (N <= 0.0) throw InputError("fit_bhm: total sample size is zero");

    std::vector<detail::ChainResult> results(static_cast<std::size_t>(cfg.chains));
    {
        std::vector<std::thread> workers;
        for (int c = 0; c < cfg.chains; ++c)
            workers.emplace_back([&, c] { results[static_cast<std::size_t>(c)] = detail::run_chain(tables, grid, N, cfg, c); });
        for (auto& w : workers) w.join();
    }

    PosteriorSample post;
    post.seed = cfg.seed;
    post.N = N;
    std::array<std::vector<std::vector<double>>, 3> per_param;
    for (int c = 0; c < cfg.chains; ++c) {
        const auto& r = results[static_cast<std::size_t>(c)];
        if (!r.finite_start) throw ConvergenceError("fit_bhm: chain " + std::to_string(c) + " found no finite starting point");
        post.acceptance.push_back(r.acceptance);
        for (auto& p : per_param) p.emplace_back();
        for (std::size_t i = 0; i < r.kept.size(); ++i) {
            auto h = detail::from_unconstrained(r.kept[i], N);
            post.draws.push_back(h);
            post.chain.push_back(c);
            post.iter.push_back(r.kept_iter[i]);
            per_param[0].back().push_back(h.lambda);
            per_param[1].back().push_back(h.kappa);
            per_param[2].back().push_back(h.c);
        }
    }
    for (int p = 0; p < 3; ++p) post.rhat[static_cast<std::size_t>(p)] = split_rhat(per_param[static_cast<std::size_t>(p)]);
    post.converged = std::all_of(post.rhat.begin(), post.rhat.end(), [](double r) { return r < kRhatThreshold; });
    if (!post.converged && !cfg.force) {
        throw ConvergenceError("split R-hat above " + csv::format_number(kRhatThreshold) + " (lambda " +
                               csv::format_number(post.rhat[0]) + ", kappa " + csv::format_number(post.rhat[1]) +
                               ", c " + csv::format_number(post.rhat[2]) + ")");
    }
    return post;
}

// ---------------------------------------------------------------------------
// Posterior predictive
// ---------------------------------------------------------------------------

struct PredictiveEnsemble {
    TimeGrid grid;
    std::vector<std::vector<double>> curves;   // M x K survival at t_1..t_K (S(0) = 1)
    std::vector<std::vector<double>> hazards;  // M x K

    std::size_t M() const { return curves.size(); }
};

template <class Rng>
void append_bsp_curve(const BSPParams& p, PredictiveEnsemble& ens, Rng& rng) {
    std::vector<double> eta(p.alpha.size()), s(p.alpha.size());
    double surv = 1.0;
    for (std::size_t k = 0; k < p.alpha.size(); ++k) {
        eta[k] = sample_beta(p.alpha[k], p.beta[k], rng);
        surv *= 1.0 - eta[k];
        s[k] = surv;
    }
    ens.curves.push_back(std::move(s));
    ens.hazards.push_back(std::move(eta));
}

// M survival curves drawn directly from a BSP with fixed hyperparameters.
inline PredictiveEnsemble bsp_draws(const BSPHyper& h, const TimeGrid& grid, std::size_t M, std::uint64_t seed) {
    auto rng = make_stream(seed, 0xB5B);
    PredictiveEnsemble ens{grid, {}, {}};
    ens.curves.reserve(M);
    ens.hazards.reserve(M);
    const auto p = bsp_params(h, grid);
    for (std::size_t i = 0; i < M; ++i) append_bsp_curve(p, ens, rng);
    return ens;
}

// Each draw picks a posterior (lambda, kappa, c) uniformly at random, then
// independent hazards eta_k ~ Beta(alpha_k, beta_k).
inline PredictiveEnsemble predictive_draws(const PosteriorSample& post, const TimeGrid& grid, std::size_t M,
                                           std::uint64_t seed) {
    if (post.draws.empty()) throw InputError("predictive_draws: empty posterior");
    auto rng = make_stream(seed, 0x9D);
    std::uniform_int_distribution<std::size_t> pick(0, post.draws.size() - 1);
    PredictiveEnsemble ens{grid, {}, {}};
    ens.curves.reserve(M);
    ens.hazards.reserve(M);
    for (std::size_t i = 0; i < M; ++i) append_bsp_curve(bsp_params(post.draws[pick(rng)], grid), ens, rng);
    return ens;
}

// ---------------------------------------------------------------------------
// Approximating BSP
// ---------------------------------------------------------------------------

// Var S*(t_k) = prod u_k - prod v_k, v_k = (beta_k / (alpha_k + beta_k))^2,
// u_k = E(1 - eta_k)^2.
inline std::vector<double> closed_form_variance(const BSPParams& p) {
    std::vector<double> out;
    out.reserve(p.alpha.size());
    double pu = 1.0, pv = 1.0;
    for (std::size_t k = 0; k < p.alpha.size(); ++k) {
        const double a = p.alpha[k], b = p.beta[k], s = a + b;
        const double v = (b / s) * (b / s);
        const double u = v + a * b / (s * s * (s + 1.0));
        pu *= u;
        pv *= v;
        out.push_back(std::max(0.0, pu - pv));
    }
    return out;
}

inline std::vector<double> ensemble_variance(const PredictiveEnsemble& ens) {
    const std::size_t K = ens.grid.K(), M = ens.M();
    std::vector<double> var(K, 0.0);
    if (M < 2) return var;
    for (std::size_t k = 0; k < K; ++k) {
        double mu = 0.0;
        for (const auto& c : ens.curves) mu += c[k];
        mu /= static_cast<double>(M);
        double s2 = 0.0;
        for (const auto& c : ens.curves) s2 += (c[k] - mu) * (c[k] - mu);
        var[k] = s2 / static_cast<double>(M - 1);
    }
    return var;
}

struct PredictiveBSPFit {
    double lambda_star = 0.0;
    double kappa_star = 0.0;
    double c_star = 0.0;
    std::vector<double> alpha_star;
    std::vector<double> beta_star;
    double ene = 0.0;
    double ess = 0.0;
    std::vector<double> vhat;
    std::vector<double> vstar;
    TimeGrid grid;
};

// c* = argmin over (0, N] of sum_k (V*(t_k; c) - Vhat(t_k))^2 with (lambda*,
// kappa*) held fixed.
inline PredictiveBSPFit fit_predictive_bsp(double lambda_star, double kappa_star, double N, const PredictiveEnsemble& ens) {
    if (ens.M() == 0) throw InputError("fit_predictive_bsp: empty ensemble");
    if (!(N > 0)) throw InputError("fit_predictive_bsp: N must be positive");
    const auto vhat = ensemble_variance(ens);
    if (std::all_of(vhat.begin(), vhat.end(), [](double v) { return v == 0.0; }))
        throw InputError("fit_predictive_bsp: degenerate ensemble (all draws identical)");
    const TimeGrid& grid = ens.grid;
    auto objective = [&](double c) {
        auto v = closed_form_variance(bsp_params({lambda_star, kappa_star, c}, grid));
        double s = 0.0;
        for (std::size_t k = 0; k < v.size(); ++k) s += (v[k] - vhat[k]) * (v[k] - vhat[k]);
        return s;
    };
    // coarse log-spaced scan, then Brent inside the neighbouring bracket
    const int n_scan = 240;
    const double lo_log = std::log(N) - 12.0 * std::log(10.0), hi_log = std::log(N);
    std::vector<double> cs(n_scan + 1);
    for (int i = 0; i <= n_scan; ++i) cs[static_cast<std::size_t>(i)] = std::exp(lo_log + (hi_log - lo_log) * i / n_scan);
    cs.back() = N;
    std::size_t best = 0;
    double best_f = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cs.size(); ++i) {
        double f = objective(cs[i]);
        if (f < best_f) {
            best_f = f;
            best = i;
        }
    }
    double a = cs[best == 0 ? 0 : best - 1];
    double b = cs[std::min(best + 1, cs.size() - 1)];
    auto [c_star, f_star] = boost::math::tools::brent_find_minima(objective, a, b, std::numeric_limits<double>::digits / 2);
    if (best_f < f_star) c_star = cs[best];

    PredictiveBSPFit fit;
    fit.lambda_star = lambda_star;
    fit.kappa_star = kappa_star;
    fit.c_star = c_star;
    fit.grid = grid;
    auto p = bsp_params({lambda_star, kappa_star, c_star}, grid);
    fit.alpha_star = p.alpha;
    fit.beta_star = p.beta;
    fit.ene = std::accumulate(p.alpha.begin(), p.alpha.end(), 0.0);
    fit.ess = c_star;
    fit.vhat = vhat;
    fit.vstar = closed_form_variance(p);
    return fit;
}

// (lambda*, kappa*) are the posterior means.
inline PredictiveBSPFit fit_predictive_bsp(const PosteriorSample& post, const PredictiveEnsemble& ens) {
    if (post.draws.empty()) throw InputError("fit_predictive_bsp: empty posterior");
    auto m = post.mean();
    return fit_predictive_bsp(m.lambda, m.kappa, post.N, ens);
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

inline std::string format_posterior(const PosteriorSample& post) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line({"chain", "iter", "lambda", "kappa", "c"});
    for (std::size_t i = 0; i < post.draws.size(); ++i) {
        const auto& d = post.draws[i];
        out += std::to_string(post.chain[i]) + "," + std::to_string(post.iter[i]) + "," + csv::format_number(d.lambda) +
               "," + csv::format_number(d.kappa) + "," + csv::format_number(d.c) + "\n";
    }
    return out;
}

inline std::string format_predictive(const PredictiveEnsemble& ens) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line({"draw", "t", "survival"});
    for (std::size_t i = 0; i < ens.M(); ++i) {
        const std::string id = std::to_string(i) + ",";
        out += id + "0,1\n";
        for (std::size_t k = 0; k < ens.grid.K(); ++k)
            out += id + csv::format_number(ens.grid.times[k]) + "," + csv::format_number(ens.curves[i][k]) + "\n";
    }
    return out;
}

inline PredictiveEnsemble parse_predictive(const std::string& text, const std::string& file = "predictive.csv") {
    std::istringstream in(text);
    auto doc = csv::read(in, file, {"draw", "t", "survival"});
    PredictiveEnsemble ens;
    std::vector<std::vector<double>> times;
    for (const auto& row : doc.rows) {
        long id = csv::to_long(row.fields[0], row.line, file);
        double t = csv::to_double(row.fields[1], row.line, file);
        double s = csv::to_double(row.fields[2], row.line, file);
        if (id != static_cast<long>(ens.curves.size()) - 1) {
            if (id != static_cast<long>(ens.curves.size())) throw ParseError(file, row.line, 1, "draw ids must be consecutive from 0");
            ens.curves.emplace_back();
            times.emplace_back();
        }
        if (t == 0.0) continue;
        times.back().push_back(t);
        ens.curves.back().push_back(s);
    }
    if (!times.empty()) ens.grid.times = times.front();
    for (const auto& t : times)
        if (t != ens.grid.times) throw ParseError(file, 0, 0, "draws have different grids");
    return ens;
}

inline nlohmann::json bsp_fit_to_json(const PredictiveBSPFit& f, const PosteriorSample* post = nullptr) {
    nlohmann::json j;
    j["schema"] = "km-lead v1";
    j["lambda_star"] = f.lambda_star;
    j["kappa_star"] = f.kappa_star;
    j["c_star"] = f.c_star;
    j["ESS"] = f.ess;
    j["ENE"] = f.ene;
    j["grid"] = f.grid.times;
    j["alpha_star"] = f.alpha_star;
    j["beta_star"] = f.beta_star;
    j["Vhat"] = f.vhat;
    j["Vstar"] = f.vstar;
    if (post) {
        j["N"] = post->N;
        j["seed"] = post->seed;
        j["rhat"] = {{"lambda", post->rhat[0]}, {"kappa", post->rhat[1]}, {"c", post->rhat[2]}};
        j["acceptance"] = post->acceptance;
        j["converged"] = post->converged;
        j["draws"] = post->draws.size();
    }
    return j;
}

}  // namespace kmlead
