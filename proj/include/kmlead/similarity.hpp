#pragma once

// Trial comparability from published baseline summaries: standardized
// differences, average/maximum aggregation, PAM k-medoids over the
// precomputed matrix, and small/medium/large banding.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kmlead/core.hpp"
#include "kmlead/csv.hpp"

namespace kmlead {

inline constexpr double kUnboundedCap = 10.0;

struct StdDiff {
    double value = 0.0;
    bool capped = false;  // zero pooled variance with differing values
};

// median/range summary -> (mean, sd) with sd = range / 4
inline MeanSd approx_moments(double median, double min, double max) {
    if (max < min) throw InputError("approx_moments: max < min");
    if (median < min || median > max) throw InputError("approx_moments: median outside [min, max]");
    return {median, (max - min) / 4.0};
}

inline StdDiff std_diff_continuous(double mean_j, double var_j, double mean_k, double var_k) {
    if (var_j < 0 || var_k < 0) throw InputError("std_diff_continuous: negative variance");
    if (mean_j == mean_k) return {0.0, false};
    double pooled = std::sqrt((var_j + var_k) / 2.0);
    if (pooled == 0.0) return {kUnboundedCap, true};
    return {std::abs(mean_j - mean_k) / pooled, false};
}

// When both proportions sit on {0, 1} and differ, the pooled variance is zero;
// with known arm sizes the proportions are moved 0.5/n off the boundary,
// otherwise the value is capped.
inline StdDiff std_diff_binary(double p_j, double p_k, std::optional<long> n_j = std::nullopt,
                               std::optional<long> n_k = std::nullopt) {
    if (p_j < 0 || p_j > 1 || p_k < 0 || p_k > 1) throw InputError("std_diff_binary: proportion outside [0, 1]");
    if (p_j == p_k) return {0.0, false};
    auto var = [](double p) { return p * (1.0 - p); };
    double pooled = std::sqrt((var(p_j) + var(p_k)) / 2.0);
    if (pooled > 0.0) return {std::abs(p_j - p_k) / pooled, false};
    if (n_j && n_k && *n_j > 0 && *n_k > 0) {
        auto correct = [](double p, long n) {
            double eps = 0.5 / static_cast<double>(n);
            return p == 0.0 ? eps : p == 1.0 ? 1.0 - eps : p;
        };
        double a = correct(p_j, *n_j), b = correct(p_k, *n_k);
        double d = std::abs(a - b) / std::sqrt((var(a) + var(b)) / 2.0);
        return {std::min(d, kUnboundedCap), true};
    }
    return {kUnboundedCap, true};
}

enum class AggregationMode { average, maximum };

inline const char* to_string(AggregationMode m) { return m == AggregationMode::average ? "average" : "maximum"; }

inline std::optional<AggregationMode> parse_mode(const std::string& s) {
    if (s == "average") return AggregationMode::average;
    if (s == "maximum") return AggregationMode::maximum;
    return std::nullopt;
}

namespace detail {

inline MeanSd as_moments(const CovariateSummary& c) {
    if (auto* ms = std::get_if<MeanSd>(&c.values)) return *ms;
    if (auto* mr = std::get_if<MedianRange>(&c.values)) return approx_moments(mr->median, mr->min, mr->max);
    throw InputError("covariate '" + c.name + "' is not continuous");
}

}  // namespace detail

inline StdDiff covariate_std_diff(const BaselineProfile& a, const BaselineProfile& b, const std::string& name) {
    const auto* ca = a.find(name);
    const auto* cb = b.find(name);
    if (!ca) throw InputError("covariate '" + name + "' missing from " + a.study.rendered() + " / " + a.arm_label);
    if (!cb) throw InputError("covariate '" + name + "' missing from " + b.study.rendered() + " / " + b.arm_label);
    bool bin_a = ca->kind() == CovariateKind::binary_proportion;
    bool bin_b = cb->kind() == CovariateKind::binary_proportion;
    if (bin_a != bin_b) throw InputError("covariate '" + name + "' has incompatible kinds across profiles");
    if (bin_a) {
        return std_diff_binary(std::get<Proportion>(ca->values).p, std::get<Proportion>(cb->values).p,
                               a.n > 0 ? std::optional<long>(a.n) : std::nullopt,
                               b.n > 0 ? std::optional<long>(b.n) : std::nullopt);
    }
    auto ma = detail::as_moments(*ca), mb = detail::as_moments(*cb);
    return std_diff_continuous(ma.mean, ma.sd * ma.sd, mb.mean, mb.sd * mb.sd);
}

inline double profile_dissimilarity(const BaselineProfile& a, const BaselineProfile& b,
                                    const std::vector<std::string>& covariates, AggregationMode mode,
                                    std::vector<std::string>* warnings = nullptr) {
    if (covariates.empty()) throw InputError("profile_dissimilarity: empty covariate set");
    double sum = 0.0, mx = 0.0;
    for (const auto& name : covariates) {
        auto d = covariate_std_diff(a, b, name);
        if (d.capped && warnings)
            warnings->push_back("unbounded standardized difference for '" + name + "' between " +
                                a.study.rendered() + " and " + b.study.rendered() + " (capped)");
        sum += d.value;
        mx = std::max(mx, d.value);
    }
    return mode == AggregationMode::average ? sum / static_cast<double>(covariates.size()) : mx;
}

// n-weighted pooled profile across arms of one study. Continuous covariates
// pool as a mixture: weighted mean, within- plus between-arm variance.
inline BaselineProfile pool_profiles(const std::vector<BaselineProfile>& arms, std::string label = "pooled") {
    if (arms.empty()) throw InputError("pool_profiles: no arms");
    BaselineProfile out{arms.front().study, std::move(label), 0, {}};
    for (const auto& a : arms) {
        if (a.n <= 0) throw InputError("pool_profiles: arm '" + a.arm_label + "' needs a positive n");
        out.n += a.n;
    }
    const double total = static_cast<double>(out.n);
    for (const auto& cov : arms.front().covariates) {
        std::vector<const CovariateSummary*> parts;
        for (const auto& a : arms) {
            const auto* c = a.find(cov.name);
            if (!c) throw InputError("pool_profiles: covariate '" + cov.name + "' missing from arm '" + a.arm_label + "'");
            parts.push_back(c);
        }
        if (cov.kind() == CovariateKind::binary_proportion) {
            double p = 0.0;
            for (std::size_t i = 0; i < arms.size(); ++i) {
                if (parts[i]->kind() != CovariateKind::binary_proportion)
                    throw InputError("pool_profiles: covariate '" + cov.name + "' kind differs across arms");
                p += static_cast<double>(arms[i].n) * std::get<Proportion>(parts[i]->values).p;
            }
            out.covariates.push_back({cov.name, Proportion{p / total}});
        } else {
            std::vector<MeanSd> ms;
            double mean = 0.0;
            for (std::size_t i = 0; i < arms.size(); ++i) {
                ms.push_back(detail::as_moments(*parts[i]));
                mean += static_cast<double>(arms[i].n) * ms.back().mean;
            }
            mean /= total;
            double var = 0.0;
            for (std::size_t i = 0; i < arms.size(); ++i) {
                double dm = ms[i].mean - mean;
                var += static_cast<double>(arms[i].n) * (ms[i].sd * ms[i].sd + dm * dm);
            }
            out.covariates.push_back({cov.name, MeanSd{mean, std::sqrt(var / total)}});
        }
    }
    return out;
}

// One profile per study: a named arm when given, otherwise the single arm or
// the n-weighted pool of all arms.
inline std::vector<BaselineProfile> select_profiles(const std::vector<BaselineProfile>& all,
                                                    const std::map<std::string, std::string>& named_arm = {}) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<BaselineProfile>> by_study;
    for (const auto& p : all) {
        auto id = p.study.rendered();
        if (!by_study.count(id)) order.push_back(id);
        by_study[id].push_back(p);
    }
    std::vector<BaselineProfile> out;
    for (const auto& id : order) {
        const auto& arms = by_study[id];
        auto it = named_arm.find(id);
        if (it != named_arm.end()) {
            auto a = std::find_if(arms.begin(), arms.end(), [&](const BaselineProfile& p) { return p.arm_label == it->second; });
            if (a == arms.end()) throw InputError("select_profiles: study '" + id + "' has no arm '" + it->second + "'");
            out.push_back(*a);
        } else if (arms.size() == 1) {
            out.push_back(arms.front());
        } else {
            out.push_back(pool_profiles(arms));
        }
    }
    for (const auto& [id, arm] : named_arm)
        if (!by_study.count(id)) throw InputError("select_profiles: unknown study '" + id + "'");
    return out;
}

struct DissimilarityMatrix {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> D;
    AggregationMode mode = AggregationMode::average;
    std::vector<std::string> covariate_set;
    std::vector<std::string> warnings;

    std::size_t size() const { return labels.size(); }
    double at(const std::string& a, const std::string& b) const {
        auto ia = std::find(labels.begin(), labels.end(), a) - labels.begin();
        auto ib = std::find(labels.begin(), labels.end(), b) - labels.begin();
        return D.at(static_cast<std::size_t>(ia)).at(static_cast<std::size_t>(ib));
    }
};

inline DissimilarityMatrix dissimilarity_matrix(const std::vector<BaselineProfile>& profiles,
                                                const std::vector<std::string>& covariates, AggregationMode mode) {
    if (profiles.size() < 2) throw InputError("dissimilarity_matrix: need at least 2 profiles");
    DissimilarityMatrix m;
    m.mode = mode;
    m.covariate_set = covariates;
    const std::size_t H = profiles.size();
    for (const auto& p : profiles) m.labels.push_back(p.study.rendered());
    m.D.assign(H, std::vector<double>(H, 0.0));
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = i + 1; j < H; ++j)
            m.D[i][j] = m.D[j][i] = profile_dissimilarity(profiles[i], profiles[j], covariates, mode, &m.warnings);
    return m;
}

// ---------------------------------------------------------------------------
// PAM k-medoids
// ---------------------------------------------------------------------------
struct ClusteringResult {
    std::size_t k = 0;
    std::vector<std::string> medoids;
    std::map<std::string, std::size_t> assignment;  // label -> cluster index (index into medoids)
    double mean_silhouette = 0.0;
    bool degenerate = false;      // all dissimilarities zero: silhouette undefined
    std::vector<double> cost_trace;  // total cost after BUILD and after each accepted swap

    std::vector<std::vector<std::string>> clusters() const {
        std::vector<std::vector<std::string>> out(k);
        for (const auto& [label, c] : assignment) out[c].push_back(label);
        return out;
    }
};

namespace detail {

inline double pam_cost(const std::vector<std::vector<double>>& D, const std::vector<std::size_t>& med) {
    double cost = 0.0;
    for (std::size_t i = 0; i < D.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (auto m : med) best = std::min(best, D[i][m]);
        cost += best;
    }
    return cost;
}

inline std::vector<std::size_t> assign(const std::vector<std::vector<double>>& D, const std::vector<std::size_t>& med) {
    std::vector<std::size_t> a(D.size(), 0);
    for (std::size_t i = 0; i < D.size(); ++i) {
        for (std::size_t c = 1; c < med.size(); ++c)
            if (D[i][med[c]] < D[i][med[a[i]]]) a[i] = c;
        for (std::size_t c = 0; c < med.size(); ++c)
            if (med[c] == i) a[i] = c;
    }
    return a;
}

inline double silhouette(const std::vector<std::vector<double>>& D, const std::vector<std::size_t>& a, std::size_t k) {
    const std::size_t n = D.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> sum(k, 0.0);
        std::vector<std::size_t> cnt(k, 0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            sum[a[j]] += D[i][j];
            ++cnt[a[j]];
        }
        if (cnt[a[i]] == 0) continue;  // singleton: s = 0
        double in = sum[a[i]] / static_cast<double>(cnt[a[i]]);
        double out = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            if (c != a[i] && cnt[c] > 0) out = std::min(out, sum[c] / static_cast<double>(cnt[c]));
        double den = std::max(in, out);
        total += den > 0 && std::isfinite(den) ? (out - in) / den : 0.0;
    }
    return total / static_cast<double>(n);
}

inline ClusteringResult pam(const DissimilarityMatrix& m, std::size_t k) {
    const auto& D = m.D;
    const std::size_t n = D.size();
    // candidate order = label order, used for every tie-break
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return m.labels[x] < m.labels[y]; });

    ClusteringResult res;
    res.k = k;
    std::vector<std::size_t> med;
    // BUILD
    while (med.size() < k) {
        std::size_t best = n;
        double best_cost = std::numeric_limits<double>::infinity();
        for (auto c : order) {
            if (std::find(med.begin(), med.end(), c) != med.end()) continue;
            auto trial = med;
            trial.push_back(c);
            double cost = pam_cost(D, trial);
            if (cost < best_cost) {
                best_cost = cost;
                best = c;
            }
        }
        med.push_back(best);
    }
    double cost = pam_cost(D, med);
    res.cost_trace.push_back(cost);
    // SWAP: best improving single swap until none improves
    while (true) {
        double best_cost = cost;
        std::size_t bi = k, bo = n;
        for (std::size_t mi = 0; mi < k; ++mi) {
            for (auto o : order) {
                if (std::find(med.begin(), med.end(), o) != med.end()) continue;
                auto trial = med;
                trial[mi] = o;
                double c = pam_cost(D, trial);
                if (c < best_cost - 1e-12) {
                    best_cost = c;
                    bi = mi;
                    bo = o;
                }
            }
        }
        if (bi == k) break;
        med[bi] = bo;
        cost = best_cost;
        res.cost_trace.push_back(cost);
    }

    // report clusters with medoids in label order
    std::sort(med.begin(), med.end(), [&](std::size_t x, std::size_t y) { return m.labels[x] < m.labels[y]; });
    auto a = assign(D, med);
    for (auto x : med) res.medoids.push_back(m.labels[x]);
    for (std::size_t i = 0; i < n; ++i) res.assignment[m.labels[i]] = a[i];

    bool all_zero = true;
    for (const auto& row : D)
        for (double v : row) all_zero = all_zero && v == 0.0;
    res.degenerate = all_zero;
    res.mean_silhouette = all_zero ? 0.0 : silhouette(D, a, k);
    return res;
}

}  // namespace detail

// With k absent, k in [2, H-1] maximizing mean silhouette (ties -> smaller k).
inline ClusteringResult cluster_kmedoids(const DissimilarityMatrix& m, std::optional<std::size_t> k = std::nullopt) {
    const std::size_t H = m.size();
    if (k) {
        if (*k < 2 || *k + 1 > H) throw InputError("cluster_kmedoids: k must lie in [2, H-1]");
        return detail::pam(m, *k);
    }
    if (H < 3) throw InputError("cluster_kmedoids: need at least 3 trials to choose k");
    ClusteringResult best;
    bool have = false;
    for (std::size_t kk = 2; kk + 1 <= H; ++kk) {
        auto r = detail::pam(m, kk);
        if (!have || r.mean_silhouette > best.mean_silhouette + 1e-12) {
            best = std::move(r);
            have = true;
        }
    }
    return best;
}

enum class EffectBand { small, medium, large, extreme };

inline const char* to_string(EffectBand b) {
    switch (b) {
        case EffectBand::small: return "small";
        case EffectBand::medium: return "medium";
        case EffectBand::large: return "large";
        case EffectBand::extreme: return "extreme";
    }
    return "?";
}

// Left-closed bands at 0.2 / 0.5 / 0.8.
inline EffectBand band(double d) {
    if (d < 0 || std::isnan(d)) throw InputError("band: negative dissimilarity");
    if (d < 0.2) return EffectBand::small;
    if (d < 0.5) return EffectBand::medium;
    if (d < 0.8) return EffectBand::large;
    return EffectBand::extreme;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

// Long form, one row per unordered pair and mode.
inline std::string format_dissimilarity(const std::vector<DissimilarityMatrix>& matrices) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line({"trial_a", "trial_b", "mode", "D"});
    for (const auto& m : matrices)
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = i + 1; j < m.size(); ++j)
                out += csv::quote(m.labels[i]) + "," + csv::quote(m.labels[j]) + "," + to_string(m.mode) + "," +
                       csv::format_number(m.D[i][j]) + "\n";
    return out;
}

// Full square grid (both triangles and the zero diagonal) for heat maps.
inline std::string format_heatmap(const DissimilarityMatrix& m) {
    std::string out = std::string(kSchemaTag) + "\n" + csv::header_line({"row", "col", "mode", "D", "band"});
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m.size(); ++j)
            out += csv::quote(m.labels[i]) + "," + csv::quote(m.labels[j]) + "," + to_string(m.mode) + "," +
                   csv::format_number(m.D[i][j]) + "," + to_string(band(m.D[i][j])) + "\n";
    return out;
}

inline nlohmann::json clusters_to_json(const ClusteringResult& r, const DissimilarityMatrix& m) {
    nlohmann::json j;
    j["schema"] = "km-lead v1";
    j["mode"] = to_string(m.mode);
    j["covariates"] = m.covariate_set;
    j["k"] = r.k;
    j["medoids"] = r.medoids;
    j["assignment"] = nlohmann::json::object();
    for (const auto& label : m.labels) j["assignment"][label] = r.assignment.at(label);
    j["clusters"] = r.clusters();
    if (r.degenerate) j["silhouette"] = nullptr;
    else j["silhouette"] = r.mean_silhouette;
    j["degenerate"] = r.degenerate;
    j["warnings"] = m.warnings;
    return j;
}

}  // namespace kmlead
