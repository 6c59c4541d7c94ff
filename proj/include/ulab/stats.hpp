#pragma once

// Cross-lingual transfer matrices and the statistical procedures around them:
// Pearson correlation, its two-sided significance through the Student-t tail
// (regularized incomplete beta, continued-fraction evaluation), transfer
// ratios against the finetuned baseline, and perplexity-delta summaries.
//
// Conventions: method agreement correlates whole heatmaps (n = K^2);
// distance correlations exclude the diagonal (n = K^2 - K) with pairs taken
// in row-major, diagonal-skipped order. A normal approximation is not good
// enough for the reference p-values, hence the continued fraction.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ulab/common.hpp"
#include "ulab/corpus.hpp"

namespace ulab {

// ----------------------------- correlation -----------------------------

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw stats_error("pearson: length mismatch");
    if (x.size() < 3) throw stats_error("pearson requires at least 3 observations");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw stats_error("pearson: zero variance input");
    double r = sxy / std::sqrt(sxx * syy);
    return std::min(1.0, std::max(-1.0, r));
}

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
    constexpr double eps = 1e-12;
    constexpr double fpmin = 1e-300;
    constexpr int max_iter = 500;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw stats_error("incomplete beta continued fraction failed to converge");
}

inline double ibeta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw stats_error("ibeta argument outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return std::exp(ln_front) * betacf(a, b, x) / a;
    }
    return 1.0 - std::exp(ln_front) * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided p-value of a Pearson r at sample size n: t = r*sqrt((n-2)/(1-r^2))
// against Student's t with n-2 degrees of freedom, p = I_{v/(v+t^2)}(v/2, 1/2).
inline double p_value_two_sided(double r, std::size_t n) {
    if (n < 3) throw stats_error("p-value requires n >= 3");
    if (std::abs(r) > 1.0) throw stats_error("correlation outside [-1,1]");
    if (std::abs(r) == 1.0) return 0.0;
    double nu = static_cast<double>(n - 2);
    double t2 = r * r * nu / (1.0 - r * r);
    return detail::ibeta(nu / 2.0, 0.5, nu / (nu + t2));
}

struct CorrelationResult {
    double r{0.0};
    std::size_t n{0};
    double p{1.0};
};

inline CorrelationResult correlate(const std::vector<double>& x, const std::vector<double>& y) {
    CorrelationResult out;
    out.r = pearson(x, y);
    out.n = x.size();
    out.p = p_value_two_sided(out.r, out.n);
    return out;
}

// ----------------------------- transfer matrices -----------------------------

// K x K after/before probability ratios; rows = unlearning language,
// columns = evaluation language.
struct TransferMatrix {
    std::vector<std::string> languages;
    std::vector<double> values;  // row-major K*K
    std::string set_tag;         // "forget" or "retain"
    std::string method;

    std::size_t k() const { return languages.size(); }
    double at(std::size_t i, std::size_t j) const { return values[i * k() + j]; }
};

// `unlearned_means[i][j]`: mean normalized probability of the model unlearned
// in language i, evaluated on language j's set. `baseline_means[j]`: the
// finetuned baseline on the same set.
inline TransferMatrix transfer_matrix_from_means(
    const std::vector<std::string>& languages,
    const std::vector<std::vector<double>>& unlearned_means,
    const std::vector<double>& baseline_means, std::string set_tag, std::string method) {
    std::size_t k = languages.size();
    if (unlearned_means.size() != k || baseline_means.size() != k) {
        throw stats_error("transfer matrix inputs do not cover every language");
    }
    TransferMatrix out;
    out.languages = languages;
    out.set_tag = std::move(set_tag);
    out.method = std::move(method);
    out.values.assign(k * k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        if (!(baseline_means[j] > 0.0)) {
            throw stats_error("baseline mean probability must be positive for language " +
                              languages[j]);
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        if (unlearned_means[i].size() != k) {
            throw stats_error("transfer matrix row has the wrong length");
        }
        for (std::size_t j = 0; j < k; ++j) {
            double v = unlearned_means[i][j] / baseline_means[j];
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw stats_error("transfer ratio must be finite and non-negative");
            }
            out.values[i * k + j] = v;
        }
    }
    return out;
}

// Alternative aggregation: the mean over examples of per-example probability
// ratios, instead of the ratio of set means. Example order must line up
// between the unlearned and baseline evaluations.
inline TransferMatrix transfer_matrix_from_example_probs(
    const std::vector<std::string>& languages,
    const std::vector<std::vector<std::vector<double>>>& unlearned_probs,
    const std::vector<std::vector<double>>& baseline_probs, std::string set_tag,
    std::string method) {
    std::size_t k = languages.size();
    if (unlearned_probs.size() != k || baseline_probs.size() != k) {
        throw stats_error("transfer matrix inputs do not cover every language");
    }
    TransferMatrix out;
    out.languages = languages;
    out.set_tag = std::move(set_tag);
    out.method = std::move(method);
    out.values.assign(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        if (unlearned_probs[i].size() != k) {
            throw stats_error("transfer matrix row has the wrong length");
        }
        for (std::size_t j = 0; j < k; ++j) {
            const std::vector<double>& after = unlearned_probs[i][j];
            const std::vector<double>& before = baseline_probs[j];
            if (after.empty() || after.size() != before.size()) {
                throw stats_error("per-example probabilities are misaligned for language " +
                                  languages[j]);
            }
            double acc = 0.0;
            for (std::size_t e = 0; e < after.size(); ++e) {
                if (!(before[e] > 0.0)) {
                    throw stats_error("baseline per-example probability must be positive");
                }
                acc += after[e] / before[e];
            }
            double v = acc / static_cast<double>(after.size());
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw stats_error("transfer ratio must be finite and non-negative");
            }
            out.values[i * k + j] = v;
        }
    }
    return out;
}

// Pearson over the full vectorized heatmaps, diagonal included; p at n = K^2.
inline CorrelationResult method_agreement(const TransferMatrix& a, const TransferMatrix& b) {
    if (a.languages != b.languages || a.set_tag != b.set_tag) {
        throw stats_error("method agreement requires matching languages and set tags");
    }
    return correlate(a.values, b.values);
}

// Pearson over the K^2 - K off-diagonal (distance, transfer) pairs in
// row-major, diagonal-skipped order.
inline CorrelationResult distance_correlation(const TransferMatrix& transfer,
                                              const DistanceMatrices& distances,
                                              const std::string& kind) {
    if (transfer.languages != distances.languages) {
        throw stats_error("distance correlation requires matching language lists");
    }
    const std::vector<double>* dm = nullptr;
    if (kind == "syntactic") {
        dm = &distances.syntactic;
    } else if (kind == "inventory") {
        dm = &distances.inventory;
    } else if (kind == "phonological") {
        if (!distances.phonological) {
            throw stats_error("phonological distance matrix is not available");
        }
        dm = &*distances.phonological;
    } else {
        throw stats_error("unknown distance kind: " + kind);
    }
    std::size_t k = transfer.k();
    std::vector<double> xs, ys;
    xs.reserve(k * k - k);
    ys.reserve(k * k - k);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            xs.push_back((*dm)[i * k + j]);
            ys.push_back(transfer.values[i * k + j]);
        }
    }
    return correlate(xs, ys);
}

// ----------------------------- perplexity deltas -----------------------------

struct PerplexityDeltaSummary {
    std::string unlearned_language;
    std::vector<std::pair<std::string, double>> deltas;  // per eval language, id-sorted
    double avg_delta{0.0};
    std::string max_delta_language;
    double max_delta{0.0};
};

inline PerplexityDeltaSummary perplexity_delta_summary(
    const std::map<std::string, double>& before, const std::map<std::string, double>& after) {
    if (before.empty()) throw stats_error("perplexity summary requires at least one language");
    if (before.size() != after.size()) throw stats_error("perplexity language sets differ");
    PerplexityDeltaSummary out;
    bool first = true;
    for (const auto& [lang, ppl_before] : before) {
        auto it = after.find(lang);
        if (it == after.end()) throw stats_error("perplexity language sets differ: " + lang);
        double delta = it->second - ppl_before;
        out.deltas.emplace_back(lang, delta);
        out.avg_delta += delta;
        // strict > keeps the lexicographically first language on ties
        if (first || delta > out.max_delta) {
            out.max_delta = delta;
            out.max_delta_language = lang;
            first = false;
        }
    }
    out.avg_delta /= static_cast<double>(out.deltas.size());
    return out;
}

// ----------------------------- serialization -----------------------------

inline void save_transfer_csv(const TransferMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write transfer matrix: " + path.string());
    out << "unlearn_lang";
    for (const std::string& l : m.languages) out << ',' << l;
    out << '\n';
    for (std::size_t i = 0; i < m.k(); ++i) {
        out << m.languages[i];
        for (std::size_t j = 0; j < m.k(); ++j) out << ',' << format_double(m.at(i, j));
        out << '\n';
    }
}

inline TransferMatrix load_transfer_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open transfer matrix: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw data_error("empty transfer matrix file");
    TransferMatrix m;
    {
        std::istringstream is(line);
        std::string field;
        bool head = true;
        while (std::getline(is, field, ',')) {
            if (head) {
                if (field != "unlearn_lang") {
                    throw data_error("transfer matrix header must start with unlearn_lang");
                }
                head = false;
            } else {
                m.languages.push_back(field);
            }
        }
    }
    std::size_t k = m.languages.size();
    m.values.assign(k * k, 0.0);
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string field;
        std::getline(is, field, ',');
        if (row >= k || field != m.languages[row]) {
            throw data_error("transfer matrix row mismatch in " + path.string());
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (!std::getline(is, field, ',')) throw data_error("short transfer matrix row");
            m.values[row * k + j] = std::stod(field);
        }
        ++row;
    }
    if (row != k) throw data_error("transfer matrix is missing rows");
    return m;
}

}  // namespace ulab
