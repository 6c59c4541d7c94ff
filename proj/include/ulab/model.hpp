#pragma once

// Tiny pre-norm causal transformer LM built entirely from tape primitives, so
// every loss gradient flows through backward() and can be finite-difference
// checked end to end.
//
// Attention masking uses a large negative additive constant rather than -inf
// (tensors must stay finite); masked probabilities underflow to exactly zero,
// which keeps causality exact rather than approximate.
//
// Row-wise layer norm statistics are composed from the primitive set: a
// matmul with a constant 1/d matrix broadcasts row means, and rsqrt is
// exp(-0.5 * log(.)).

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ulab/autodiff.hpp"
#include "ulab/common.hpp"
#include "ulab/tensor.hpp"
#include "ulab/vocab.hpp"

namespace ulab {

struct ModelConfig {
    std::size_t vocab_size{0};
    std::size_t embed_dim{64};
    std::size_t n_layers{2};
    std::size_t n_heads{1};
    std::size_t ff_mult{2};
    std::size_t context_len{64};
    std::uint64_t init_seed{0};

    std::size_t head_dim() const { return embed_dim / n_heads; }
    std::size_t ff_dim() const { return ff_mult * embed_dim; }

    void validate() const {
        if (vocab_size < 2) throw config_error("vocab_size must be >= 2");
        if (embed_dim < 4) throw config_error("embed_dim must be >= 4");
        if (n_layers < 1) throw config_error("n_layers must be >= 1");
        if (n_heads < 1) throw config_error("n_heads must be >= 1");
        if (embed_dim % n_heads != 0) throw config_error("n_heads must divide embed_dim");
        if (ff_mult < 1) throw config_error("ff_mult must be >= 1");
        if (context_len < 2) throw config_error("context_len must be >= 2");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline std::size_t expected_param_count(const ModelConfig& cfg) {
    std::size_t d = cfg.embed_dim, f = cfg.ff_dim();
    std::size_t per_layer = 2 * d          // ln1 gain+bias
                            + 3 * d * d    // per-head q,k,v stacked over heads
                            + d * d        // output projection
                            + 2 * d        // ln2 gain+bias
                            + d * f + f    // ff in
                            + f * d + d;   // ff out
    return cfg.vocab_size * d + cfg.context_len * d + cfg.n_layers * per_layer +
           2 * d + d * cfg.vocab_size;
}

template <typename Real>
class Model;

template <typename Real>
Model<Real> init_model(const ModelConfig& cfg);

template <typename Real>
class Model {
public:
    const ModelConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    std::size_t n_params() const { return params_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Tensor<Real>>& params() const { return params_; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    std::size_t param_index(std::string_view name) const {
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (names_[i] == name) return i;
        }
        throw config_error("unknown parameter: " + std::string(name));
    }

    const Tensor<Real>& param(std::string_view name) const { return params_[param_index(name)]; }

    Tensor<Real>& param_mut(std::size_t i) {
        if (frozen_) throw training_error("attempt to modify a frozen model", 0);
        return params_[i];
    }

    void set_param_values(std::size_t i, std::vector<Real> values) {
        if (frozen_) throw training_error("attempt to modify a frozen model", 0);
        if (values.size() != params_[i].values.size()) {
            throw shape_error("parameter size mismatch on assignment");
        }
        params_[i].values = std::move(values);
    }

    template <typename Other>
    Model<Other> cast() const {
        Model<Other> out;
        out.cfg_ = cfg_;
        out.names_ = names_;
        out.frozen_ = frozen_;
        out.params_.reserve(params_.size());
        for (const auto& p : params_) {
            Tensor<Other> q = Tensor<Other>::zeros(p.shape);
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                q.values[i] = static_cast<Other>(p.values[i]);
            }
            out.params_.push_back(std::move(q));
        }
        return out;
    }

private:
    template <typename R>
    friend Model<R> init_model(const ModelConfig& cfg);
    template <typename R>
    friend class Model;
    template <typename R>
    friend Model<R> make_model_from_params(const ModelConfig&, std::vector<std::string>,
                                           std::vector<Tensor<R>>);

    ModelConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor<Real>> params_;
    bool frozen_{false};
};

template <typename Real>
Model<Real> make_model_from_params(const ModelConfig& cfg, std::vector<std::string> names,
                                   std::vector<Tensor<Real>> params) {
    cfg.validate();
    Model<Real> m;
    m.cfg_ = cfg;
    m.names_ = std::move(names);
    m.params_ = std::move(params);
    std::size_t total = 0;
    for (const auto& p : m.params_) total += p.numel();
    if (total != expected_param_count(cfg)) {
        throw config_error("parameter arrays do not match the architecture table");
    }
    return m;
}

namespace detail {

enum class InitKind { normal, zeros, ones };

template <typename Real>
void append_param(std::vector<std::string>& names, std::vector<Tensor<Real>>& params,
                  std::uint64_t seed, const std::string& name,
                  std::vector<std::size_t> shape, InitKind kind) {
    Tensor<Real> t = Tensor<Real>::zeros(std::move(shape));
    if (kind == InitKind::normal) {
        Rng rng(derive_seed(seed, name));
        for (Real& v : t.values) v = static_cast<Real>(rng.normal(0.0, 0.02));
    } else if (kind == InitKind::ones) {
        for (Real& v : t.values) v = Real(1);
    }
    names.push_back(name);
    params.push_back(std::move(t));
}

}  // namespace detail

// Architecture table. Norm gains start at one, offsets and biases at zero,
// all weight matrices at normal(0, 0.02) from per-parameter seed streams.
template <typename Real>
Model<Real> init_model(const ModelConfig& cfg) {
    cfg.validate();
    using detail::InitKind;
    std::vector<std::string> names;
    std::vector<Tensor<Real>> params;
    std::uint64_t seed = cfg.init_seed;
    std::size_t d = cfg.embed_dim, dh = cfg.head_dim(), f = cfg.ff_dim();

    detail::append_param(names, params, seed, "tok_embed", {cfg.vocab_size, d}, InitKind::normal);
    detail::append_param(names, params, seed, "pos_embed", {cfg.context_len, d}, InitKind::normal);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        detail::append_param(names, params, seed, p + "ln1.gain", {1, d}, InitKind::ones);
        detail::append_param(names, params, seed, p + "ln1.bias", {1, d}, InitKind::zeros);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            std::string hp = p + "attn.h" + std::to_string(h) + ".";
            detail::append_param(names, params, seed, hp + "wq", {d, dh}, InitKind::normal);
            detail::append_param(names, params, seed, hp + "wk", {d, dh}, InitKind::normal);
            detail::append_param(names, params, seed, hp + "wv", {d, dh}, InitKind::normal);
        }
        detail::append_param(names, params, seed, p + "attn.wo", {d, d}, InitKind::normal);
        detail::append_param(names, params, seed, p + "ln2.gain", {1, d}, InitKind::ones);
        detail::append_param(names, params, seed, p + "ln2.bias", {1, d}, InitKind::zeros);
        detail::append_param(names, params, seed, p + "ff.w1", {d, f}, InitKind::normal);
        detail::append_param(names, params, seed, p + "ff.b1", {1, f}, InitKind::zeros);
        detail::append_param(names, params, seed, p + "ff.w2", {f, d}, InitKind::normal);
        detail::append_param(names, params, seed, p + "ff.b2", {1, d}, InitKind::zeros);
    }
    detail::append_param(names, params, seed, "final_norm.gain", {1, d}, InitKind::ones);
    detail::append_param(names, params, seed, "final_norm.bias", {1, d}, InitKind::zeros);
    detail::append_param(names, params, seed, "out_proj", {d, cfg.vocab_size}, InitKind::normal);

    Model<Real> m;
    m.cfg_ = cfg;
    m.names_ = std::move(names);
    m.params_ = std::move(params);
    return m;
}

constexpr double kAttnMask = -1e9;
constexpr double kNormEps = 1e-5;

// Per-forward-pass binding of a model's parameters onto a tape. Caches the
// constant helper tensors (mean matrix, causal masks, one-hot columns) that
// the graph reuses across sequences of the same length.
template <typename Real>
class BoundModel {
public:
    BoundModel(const Model<Real>& model, Tape<Real>& tape, bool trainable)
        : model_(&model), tape_(&tape) {
        if (trainable && model.frozen()) {
            throw training_error("cannot bind a frozen model as trainable", 0);
        }
        leaves_.reserve(model.n_params());
        for (const auto& p : model.params()) {
            leaves_.push_back(tape.leaf(p, trainable));
        }
        const ModelConfig& cfg = model.config();
        tok_embed_ = model.param_index("tok_embed");
        pos_embed_ = model.param_index("pos_embed");
        final_gain_ = model.param_index("final_norm.gain");
        final_bias_ = model.param_index("final_norm.bias");
        out_proj_ = model.param_index("out_proj");
        layers_.resize(cfg.n_layers);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            LayerRefs& r = layers_[l];
            r.ln1_gain = model.param_index(p + "ln1.gain");
            r.ln1_bias = model.param_index(p + "ln1.bias");
            r.wo = model.param_index(p + "attn.wo");
            r.ln2_gain = model.param_index(p + "ln2.gain");
            r.ln2_bias = model.param_index(p + "ln2.bias");
            r.w1 = model.param_index(p + "ff.w1");
            r.b1 = model.param_index(p + "ff.b1");
            r.w2 = model.param_index(p + "ff.w2");
            r.b2 = model.param_index(p + "ff.b2");
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                std::string hp = p + "attn.h" + std::to_string(h) + ".";
                r.heads.push_back({model.param_index(hp + "wq"), model.param_index(hp + "wk"),
                                   model.param_index(hp + "wv")});
            }
        }
    }

    const Model<Real>& model() const { return *model_; }
    Tape<Real>& tape() const { return *tape_; }
    const std::vector<Tensor<Real>>& leaves() const { return leaves_; }

    std::vector<int> param_ids() const {
        std::vector<int> ids;
        ids.reserve(leaves_.size());
        for (const auto& l : leaves_) ids.push_back(l.node_id);
        return ids;
    }

    const Tensor<Real>& leaf(std::string_view name) const {
        const auto& names = model_->names();
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) return leaves_[i];
        }
        throw config_error("unknown parameter: " + std::string(name));
    }

    // Log-probability rows for a token sequence: row t holds the log-softmax
    // over the next-token distribution after consuming ids[0..t].
    Tensor<Real> sequence_log_probs(const std::vector<int>& ids) {
        const ModelConfig& cfg = model_->config();
        if (ids.empty()) throw data_error("empty token sequence");
        if (ids.size() > cfg.context_len) {
            throw data_error("sequence of length " + std::to_string(ids.size()) +
                             " exceeds context_len " + std::to_string(cfg.context_len));
        }
        std::vector<std::size_t> tok_rows, pos_rows;
        tok_rows.reserve(ids.size());
        pos_rows.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg.vocab_size) {
                throw data_error("token id out of vocabulary range");
            }
            tok_rows.push_back(static_cast<std::size_t>(ids[i]));
            pos_rows.push_back(i);
        }

        Tape<Real>& t = *tape_;
        std::size_t n = ids.size(), d = cfg.embed_dim, dh = cfg.head_dim();
        Tensor<Real> x = t.add(t.gather_rows(leaves_[tok_embed_], tok_rows),
                               t.gather_rows(leaves_[pos_embed_], pos_rows));

        for (const LayerRefs& r : layers_) {
            Tensor<Real> h = layer_norm(x, leaves_[r.ln1_gain], leaves_[r.ln1_bias]);
            Tensor<Real> attn;
            for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
                Tensor<Real> q = t.matmul(h, leaves_[r.heads[hd].wq]);
                Tensor<Real> k = t.matmul(h, leaves_[r.heads[hd].wk]);
                Tensor<Real> v = t.matmul(h, leaves_[r.heads[hd].wv]);
                Tensor<Real> scores =
                    t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(double(dh)));
                Tensor<Real> probs = t.exp(t.log_softmax_rows(t.add(scores, causal_mask(n))));
                Tensor<Real> head_out = t.matmul(probs, v);
                if (cfg.n_heads == 1) {
                    attn = std::move(head_out);
                } else {
                    Tensor<Real> placed = t.matmul(head_out, head_placement(hd));
                    attn = hd == 0 ? std::move(placed) : t.add(attn, placed);
                }
            }
            x = t.add(x, t.matmul(attn, leaves_[r.wo]));

            Tensor<Real> h2 = layer_norm(x, leaves_[r.ln2_gain], leaves_[r.ln2_bias]);
            Tensor<Real> f1 = t.add(t.matmul(h2, leaves_[r.w1]),
                                    t.matmul(ones_col(n), leaves_[r.b1]));
            Tensor<Real> act = t.mul(f1, t.sigmoid(f1));  // silu
            Tensor<Real> f2 = t.add(t.matmul(act, leaves_[r.w2]),
                                    t.matmul(ones_col(n), leaves_[r.b2]));
            x = t.add(x, f2);
        }

        Tensor<Real> xf = layer_norm(x, leaves_[final_gain_], leaves_[final_bias_]);
        return t.log_softmax_rows(t.matmul(xf, leaves_[out_proj_]));
    }

private:
    Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                            const Tensor<Real>& bias) {
        Tape<Real>& t = *tape_;
        std::size_t n = x.shape[0];
        const Tensor<Real>& m = mean_matrix();
        Tensor<Real> mu = t.matmul(x, m);
        Tensor<Real> c = t.sub(x, mu);
        Tensor<Real> var = t.matmul(t.mul(c, c), m);
        Tensor<Real> rstd = t.exp(t.scale(t.log(t.add(var, eps_matrix(n))), -0.5));
        Tensor<Real> y = t.mul(c, rstd);
        return t.add(t.mul(y, t.matmul(ones_col(n), gain)), t.matmul(ones_col(n), bias));
    }

    const Tensor<Real>& mean_matrix() {
        if (mean_matrix_.node_id < 0) {
            std::size_t d = model_->config().embed_dim;
            Tensor<Real> m = Tensor<Real>::full({d, d}, Real(1) / static_cast<Real>(d));
            mean_matrix_ = tape_->constant(std::move(m));
        }
        return mean_matrix_;
    }

    const Tensor<Real>& ones_col(std::size_t n) {
        auto it = ones_cols_.find(n);
        if (it == ones_cols_.end()) {
            it = ones_cols_.emplace(n, tape_->constant(Tensor<Real>::full({n, 1}, Real(1)))).first;
        }
        return it->second;
    }

    const Tensor<Real>& eps_matrix(std::size_t n) {
        auto it = eps_mats_.find(n);
        if (it == eps_mats_.end()) {
            std::size_t d = model_->config().embed_dim;
            it = eps_mats_
                     .emplace(n, tape_->constant(Tensor<Real>::full(
                                     {n, d}, static_cast<Real>(kNormEps))))
                     .first;
        }
        return it->second;
    }

    const Tensor<Real>& causal_mask(std::size_t n) {
        auto it = masks_.find(n);
        if (it == masks_.end()) {
            Tensor<Real> m = Tensor<Real>::zeros({n, n});
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i + 1; j < n; ++j) {
                    m.values[i * n + j] = static_cast<Real>(kAttnMask);
                }
            }
            it = masks_.emplace(n, tape_->constant(std::move(m))).first;
        }
        return it->second;
    }

    const Tensor<Real>& head_placement(std::size_t head) {
        auto it = placements_.find(head);
        if (it == placements_.end()) {
            std::size_t d = model_->config().embed_dim, dh = model_->config().head_dim();
            Tensor<Real> m = Tensor<Real>::zeros({dh, d});
            for (std::size_t r = 0; r < dh; ++r) m.values[r * d + head * dh + r] = Real(1);
            it = placements_.emplace(head, tape_->constant(std::move(m))).first;
        }
        return it->second;
    }

    struct HeadRefs {
        std::size_t wq, wk, wv;
    };
    struct LayerRefs {
        std::size_t ln1_gain, ln1_bias, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
        std::vector<HeadRefs> heads;
    };

    const Model<Real>* model_;
    Tape<Real>* tape_;
    std::vector<Tensor<Real>> leaves_;
    std::size_t tok_embed_{}, pos_embed_{}, final_gain_{}, final_bias_{}, out_proj_{};
    std::vector<LayerRefs> layers_;
    Tensor<Real> mean_matrix_;
    std::map<std::size_t, Tensor<Real>> ones_cols_;
    std::map<std::size_t, Tensor<Real>> eps_mats_;
    std::map<std::size_t, Tensor<Real>> masks_;
    std::map<std::size_t, Tensor<Real>> placements_;
};

// A scored sequence lowered onto the tape: the scalar `total` is the summed
// log-probability of the scored tokens and stays differentiable.
template <typename Real>
struct ScoredGraph {
    Tensor<Real> log_prob_rows;  // [n-1, V]
    Tensor<Real> total;          // scalar
    std::vector<Real> per_token;
    std::size_t first_scored_row{0};
    std::size_t n_scored{0};
};

template <typename Real>
ScoredGraph<Real> build_scored_graph(BoundModel<Real>& bound, const ScoredSequence& seq) {
    if (seq.target_begin >= seq.ids.size()) {
        throw data_error("scored sequence has no target tokens");
    }
    if (seq.ids.size() > bound.model().config().context_len) {
        throw data_error("sequence exceeds model context length");
    }
    Tape<Real>& t = bound.tape();
    std::vector<int> input(seq.ids.begin(), seq.ids.end() - 1);
    Tensor<Real> rows = bound.sequence_log_probs(input);

    std::size_t v = bound.model().config().vocab_size;
    std::size_t n_in = input.size();
    ScoredGraph<Real> g;
    g.first_scored_row = seq.target_begin - 1;
    g.n_scored = seq.ids.size() - seq.target_begin;

    Tensor<Real> pick = Tensor<Real>::zeros({n_in, v});
    for (std::size_t k = 0; k < g.n_scored; ++k) {
        std::size_t row = g.first_scored_row + k;
        pick.values[row * v + static_cast<std::size_t>(seq.ids[seq.target_begin + k])] = Real(1);
    }
    g.total = t.sum(t.mul(rows, t.constant(std::move(pick))));
    g.per_token.reserve(g.n_scored);
    for (std::size_t k = 0; k < g.n_scored; ++k) {
        std::size_t row = g.first_scored_row + k;
        g.per_token.push_back(
            rows.values[row * v + static_cast<std::size_t>(seq.ids[seq.target_begin + k])]);
    }
    g.log_prob_rows = std::move(rows);
    return g;
}

template <typename Real>
struct LogProbResult {
    Real total_logprob;
    std::vector<Real> per_token_logprobs;
    Real normalized_prob;  // P(a|q)^(1/|a|)
};

// Length-normalized answer likelihood machinery; the probability itself is
// exp(total / |a|) with |a| counted in tokenizer tokens.
template <typename Real>
LogProbResult<Real> answer_logprob(const Model<Real>& model, const std::vector<int>& question_tokens,
                                   const std::vector<int>& answer_tokens) {
    if (answer_tokens.empty()) throw data_error("answer_logprob requires a non-empty answer");
    ScoredSequence seq;
    seq.ids.push_back(Vocab::kBos);
    seq.ids.insert(seq.ids.end(), question_tokens.begin(), question_tokens.end());
    seq.ids.push_back(Vocab::kSep);
    seq.target_begin = seq.ids.size();
    seq.ids.insert(seq.ids.end(), answer_tokens.begin(), answer_tokens.end());

    Tape<Real> tape;
    BoundModel<Real> bound(model, tape, false);
    ScoredGraph<Real> g = build_scored_graph(bound, seq);

    LogProbResult<Real> out;
    out.total_logprob = g.total.item();
    out.per_token_logprobs = g.per_token;
    out.normalized_prob =
        std::exp(out.total_logprob / static_cast<Real>(answer_tokens.size()));
    return out;
}

}  // namespace ulab
