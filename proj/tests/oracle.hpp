#pragma once

// Brute-force reference implementations used as test oracles. These
// re-implement the forward pass and the metrics with plain double loops and
// never touch the tape machinery they are checking.

#include <cmath>
#include <string>
#include <vector>

#include "ulab/model.hpp"
#include "ulab/tensor.hpp"
#include "ulab/vocab.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const ulab::Tensor<double>& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    }
    return m;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x,
                                          const std::vector<double>& gain,
                                          const std::vector<double>& bias) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    double rstd = 1.0 / std::sqrt(var + ulab::kNormEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) * rstd * gain[i] + bias[i];
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - mx);
    for (double& v : out) v /= z;
    return out;
}

// Full forward pass: next-token probability rows for a token sequence.
inline std::vector<std::vector<double>> forward_probs(const ulab::Model<double>& model,
                                                      const std::vector<int>& ids) {
    const ulab::ModelConfig& cfg = model.config();
    std::size_t n = ids.size(), d = cfg.embed_dim, dh = cfg.head_dim(), f = cfg.ff_dim();

    Mat tok = to_mat(model.param("tok_embed"));
    Mat pos = to_mat(model.param("pos_embed"));
    Mat x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            x[i][c] = tok[static_cast<std::size_t>(ids[i])][c] + pos[i][c];
        }
    }

    auto matvec = [](const Mat& w, const std::vector<double>& v) {
        std::vector<double> out(w[0].size(), 0.0);
        for (std::size_t r = 0; r < w.size(); ++r) {
            for (std::size_t c = 0; c < out.size(); ++c) out[c] += v[r] * w[r][c];
        }
        return out;
    };

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        std::vector<double> g1 = to_mat(model.param(p + "ln1.gain"))[0];
        std::vector<double> b1 = to_mat(model.param(p + "ln1.bias"))[0];
        Mat h(n);
        for (std::size_t i = 0; i < n; ++i) h[i] = layer_norm_row(x[i], g1, b1);

        Mat attn(n, std::vector<double>(d, 0.0));
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            std::string hp = p + "attn.h" + std::to_string(hd) + ".";
            Mat wq = to_mat(model.param(hp + "wq"));
            Mat wk = to_mat(model.param(hp + "wk"));
            Mat wv = to_mat(model.param(hp + "wv"));
            Mat q(n), k(n), v(n);
            for (std::size_t i = 0; i < n; ++i) {
                q[i] = matvec(wq, h[i]);
                k[i] = matvec(wk, h[i]);
                v[i] = matvec(wv, h[i]);
            }
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> scores(i + 1);
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += q[i][c] * k[j][c];
                    scores[j] = s / std::sqrt(static_cast<double>(dh));
                }
                std::vector<double> w = softmax(scores);
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t c = 0; c < dh; ++c) attn[i][hd * dh + c] += w[j] * v[j][c];
                }
            }
        }
        Mat wo = to_mat(model.param(p + "attn.wo"));
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> o = matvec(wo, attn[i]);
            for (std::size_t c = 0; c < d; ++c) x[i][c] += o[c];
        }

        std::vector<double> g2 = to_mat(model.param(p + "ln2.gain"))[0];
        std::vector<double> b2 = to_mat(model.param(p + "ln2.bias"))[0];
        Mat w1 = to_mat(model.param(p + "ff.w1"));
        std::vector<double> fb1 = to_mat(model.param(p + "ff.b1"))[0];
        Mat w2 = to_mat(model.param(p + "ff.w2"));
        std::vector<double> fb2 = to_mat(model.param(p + "ff.b2"))[0];
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> h2 = layer_norm_row(x[i], g2, b2);
            std::vector<double> a = matvec(w1, h2);
            for (std::size_t c = 0; c < f; ++c) {
                a[c] += fb1[c];
                a[c] = a[c] / (1.0 + std::exp(-a[c]));  // silu
            }
            std::vector<double> o = matvec(w2, a);
            for (std::size_t c = 0; c < d; ++c) x[i][c] += o[c] + fb2[c];
        }
    }

    std::vector<double> gf = to_mat(model.param("final_norm.gain"))[0];
    std::vector<double> bf = to_mat(model.param("final_norm.bias"))[0];
    Mat wout = to_mat(model.param("out_proj"));
    std::vector<std::vector<double>> probs(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> xr = layer_norm_row(x[i], gf, bf);
        probs[i] = softmax(matvec(wout, xr));
    }
    return probs;
}

// P(answer | question) by explicit softmax products over the framed sequence.
inline double answer_prob(const ulab::Model<double>& model, const std::vector<int>& q,
                          const std::vector<int>& a) {
    std::vector<int> ids;
    ids.push_back(ulab::Vocab::kBos);
    ids.insert(ids.end(), q.begin(), q.end());
    ids.push_back(ulab::Vocab::kSep);
    std::size_t answer_begin = ids.size();
    ids.insert(ids.end(), a.begin(), a.end());
    std::vector<int> input(ids.begin(), ids.end() - 1);
    auto probs = forward_probs(model, input);
    double p = 1.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        p *= probs[answer_begin - 1 + k][static_cast<std::size_t>(ids[answer_begin + k])];
    }
    return p;
}

inline double normalized_answer_prob(const ulab::Model<double>& model, const std::vector<int>& q,
                                     const std::vector<int>& a) {
    return std::pow(answer_prob(model, q, a), 1.0 / static_cast<double>(a.size()));
}

}  // namespace oracle
