#pragma once

// The three gradient-based unlearning objectives plus the concept-unlearning
// instantiation, composed from tape primitives so their gradients are exact:
//
//   graddiff:     L = -a1*CE(forget) + a2*CE(retain)
//   graddiff_kl:  L = -a1*CE(forget) + a2*CE(retain) + a3*KL(kl_batch)
//   npo:          L = (2/b) * mean_forget log(1 + r^b),  r = pi/pi_ref on
//                 answer tokens, evaluated in log space
//   concept:      graddiff_kl shape with stereotype answers as the forget
//                 batch, Unknown answers as the retain batch and a general
//                 corpus as the KL anchor
//
// CE is the token-weighted mean negative log-likelihood over answer tokens;
// questions condition but are never scored. KL is averaged over scored token
// positions.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ulab/autodiff.hpp"
#include "ulab/common.hpp"
#include "ulab/model.hpp"
#include "ulab/vocab.hpp"

namespace ulab {

enum class Objective { graddiff, graddiff_kl, npo, concept_ };

inline std::string objective_name(Objective o) {
    switch (o) {
        case Objective::graddiff: return "graddiff";
        case Objective::graddiff_kl: return "graddiff_kl";
        case Objective::npo: return "npo";
        case Objective::concept_: return "concept";
    }
    throw config_error("unknown objective");
}

inline Objective objective_from_name(const std::string& s) {
    if (s == "graddiff") return Objective::graddiff;
    if (s == "graddiff_kl") return Objective::graddiff_kl;
    if (s == "npo") return Objective::npo;
    if (s == "concept") return Objective::concept_;
    throw config_error("unknown objective: " + s);
}

enum class KlDataset { retain, general };

struct UnlearnConfig {
    Objective objective{Objective::graddiff};
    double alpha1{1.0};
    double alpha2{1.0};
    double alpha3{1.0};
    double beta{1.0};
    double learning_rate{1e-3};
    std::size_t epochs{5};
    std::size_t batch_size{8};
    KlDataset kl_dataset{KlDataset::retain};
    std::uint64_t seed{0};
    // Off by default: the displayed NPO objective has no retain term.
    bool npo_retain_term{false};

    void validate() const {
        if (alpha1 < 0 || alpha2 < 0 || alpha3 < 0) throw config_error("alphas must be >= 0");
        if (!(beta > 0)) throw config_error("beta must be > 0");
        if (!(learning_rate > 0)) throw config_error("learning_rate must be > 0");
        if (batch_size < 1) throw config_error("batch_size must be >= 1");
    }

    bool needs_reference() const { return objective != Objective::graddiff; }
    bool needs_kl() const {
        return objective == Objective::graddiff_kl || objective == Objective::concept_;
    }
};

// Appendix-style defaults: alphas and beta at one, five epochs for data
// unlearning, a single epoch with a reduced rate for concept unlearning.
inline UnlearnConfig default_unlearn_config(Objective o) {
    UnlearnConfig cfg;
    cfg.objective = o;
    if (o == Objective::concept_) {
        cfg.epochs = 1;
        cfg.learning_rate = 2.5e-4;
        cfg.kl_dataset = KlDataset::general;
    }
    return cfg;
}

namespace presets {

// Hyperparameters reported for the 8B-model experiments, kept as named
// presets for ingested large-model workflows. Desk-scale models need the
// larger default rates above.
inline UnlearnConfig paper_tofu_unlearn(Objective o) {
    UnlearnConfig cfg = default_unlearn_config(o);
    cfg.learning_rate = 2e-5;
    cfg.epochs = 5;
    return cfg;
}

inline UnlearnConfig paper_seegull_unlearn(Objective o) {
    UnlearnConfig cfg = default_unlearn_config(o);
    cfg.learning_rate = 5e-6;
    cfg.epochs = 1;
    cfg.kl_dataset = KlDataset::general;
    return cfg;
}

constexpr double kPaperFinetuneLr = 2e-5;
constexpr std::size_t kPaperFinetuneEpochs = 5;

}  // namespace presets

struct LossParts {
    std::optional<double> forget_ce;
    std::optional<double> retain_ce;
    std::optional<double> kl;
    std::optional<double> npo;
    double total{0.0};
};

// ----------------------------- graph builders -----------------------------

// Token-weighted mean NLL of the scored tokens across the batch.
template <typename Real>
Tensor<Real> cross_entropy_graph(BoundModel<Real>& bound, const std::vector<ScoredSequence>& batch) {
    if (batch.empty()) throw data_error("cross entropy requires a non-empty batch");
    Tape<Real>& t = bound.tape();
    Tensor<Real> acc;
    std::size_t total_tokens = 0;
    for (const ScoredSequence& seq : batch) {
        ScoredGraph<Real> g = build_scored_graph(bound, seq);
        total_tokens += g.n_scored;
        acc = acc.node_id < 0 ? g.total : t.add(acc, g.total);
    }
    return t.scale(acc, -1.0 / static_cast<double>(total_tokens));
}

// sum over masked rows of sum_v p(v) * (log p(v) - log q(v)), with p given by
// its log rows on the tape and q by detached log rows.
template <typename Real>
Tensor<Real> kl_rows_term(Tape<Real>& t, const Tensor<Real>& log_rows,
                          const Tensor<Real>& ref_log_rows, Tensor<Real> row_mask) {
    return t.sum(t.mul(t.constant(std::move(row_mask)),
                       t.mul(t.exp(log_rows), t.sub(log_rows, t.constant(ref_log_rows)))));
}

// Mean over scored token positions of sum_v p_model(v) * (log p_model(v) -
// log p_ref(v)). The reference rows are computed on a throwaway tape and
// enter the training graph as constants.
template <typename Real>
Tensor<Real> kl_to_reference_graph(BoundModel<Real>& bound, const Model<Real>& reference,
                                   const std::vector<ScoredSequence>& batch) {
    if (batch.empty()) throw data_error("KL requires a non-empty batch");
    if (!reference.frozen()) throw config_error("KL reference model must be frozen");
    if (reference.config().vocab_size != bound.model().config().vocab_size) {
        throw config_error("KL reference vocabulary does not match the model");
    }
    Tape<Real>& t = bound.tape();
    std::size_t v = bound.model().config().vocab_size;
    Tensor<Real> acc;
    std::size_t total_rows = 0;
    for (const ScoredSequence& seq : batch) {
        std::vector<int> input(seq.ids.begin(), seq.ids.end() - 1);
        Tensor<Real> rows = bound.sequence_log_probs(input);

        Tape<Real> ref_tape;
        BoundModel<Real> ref_bound(reference, ref_tape, false);
        Tensor<Real> ref_rows = ref_bound.sequence_log_probs(input);
        ref_rows.node_id = -1;  // re-intern the values on the training tape
        ref_rows.tape_id = -1;

        std::size_t first = seq.target_begin - 1;
        std::size_t n_scored = seq.ids.size() - seq.target_begin;
        total_rows += n_scored;
        Tensor<Real> mask = Tensor<Real>::zeros({input.size(), v});
        for (std::size_t r = first; r < first + n_scored; ++r) {
            for (std::size_t c = 0; c < v; ++c) mask.values[r * v + c] = Real(1);
        }
        Tensor<Real> term = kl_rows_term(t, rows, ref_rows, std::move(mask));
        acc = acc.node_id < 0 ? term : t.add(acc, term);
    }
    return t.scale(acc, 1.0 / static_cast<double>(total_rows));
}

// Numerically stable softplus of a tape scalar: log(1 + e^z) evaluated as
// z + log(1 + e^-z) when z is large. Both branches are exact rewritings, so
// the choice (made from the forward value) never changes the gradient.
template <typename Real>
Tensor<Real> softplus_graph(Tape<Real>& t, const Tensor<Real>& z) {
    if (z.item() <= Real(15)) {
        return t.log1p(t.exp(z));
    }
    return t.add(z, t.log1p(t.exp(t.scale(z, -1.0))));
}

// (2/b) * mean over forget examples of log(1 + r^b) with r the model/reference
// probability ratio on answer tokens.
template <typename Real>
Tensor<Real> npo_graph(BoundModel<Real>& bound, const Model<Real>& reference,
                       const std::vector<ScoredSequence>& batch, double beta) {
    if (batch.empty()) throw data_error("NPO requires a non-empty forget batch");
    if (!reference.frozen()) throw config_error("NPO reference model must be frozen");
    Tape<Real>& t = bound.tape();
    Tensor<Real> acc;
    for (const ScoredSequence& seq : batch) {
        ScoredGraph<Real> g = build_scored_graph(bound, seq);

        Tape<Real> ref_tape;
        BoundModel<Real> ref_bound(reference, ref_tape, false);
        ScoredGraph<Real> ref_g = build_scored_graph(ref_bound, seq);
        Real ref_total = ref_g.total.item();

        Tensor<Real> z =
            t.scale(t.sub(g.total, t.constant(Tensor<Real>::scalar(ref_total))), beta);
        Tensor<Real> ex_loss = t.scale(softplus_graph(t, z), 2.0 / beta);
        acc = acc.node_id < 0 ? ex_loss : t.add(acc, ex_loss);
    }
    return t.scale(acc, 1.0 / static_cast<double>(batch.size()));
}

// Scalar NPO loss for one log-ratio; the reference implementation for the
// sigmoid-form identity (2/b)*log(1+r^b) = -(2/b)*log(sigmoid(-b*log r)).
inline double npo_pointwise(double log_ratio, double beta) {
    double z = beta * log_ratio;
    double softplus = z > 15.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    return 2.0 / beta * softplus;
}

// ----------------------------- combined objective -----------------------------

template <typename Real>
struct UnlearnLossGraph {
    Tensor<Real> total;
    LossParts parts;
};

template <typename Real>
UnlearnLossGraph<Real> unlearn_loss_graph(const UnlearnConfig& cfg, BoundModel<Real>& bound,
                                          const Model<Real>* reference,
                                          const std::vector<ScoredSequence>& forget_batch,
                                          const std::vector<ScoredSequence>& retain_batch,
                                          const std::vector<ScoredSequence>& kl_batch) {
    cfg.validate();
    if (cfg.needs_reference() && reference == nullptr) {
        throw config_error(objective_name(cfg.objective) + " requires a reference model");
    }
    Tape<Real>& t = bound.tape();
    UnlearnLossGraph<Real> out;

    switch (cfg.objective) {
        case Objective::graddiff:
        case Objective::graddiff_kl:
        case Objective::concept_: {
            Tensor<Real> forget_ce = cross_entropy_graph(bound, forget_batch);
            Tensor<Real> retain_ce = cross_entropy_graph(bound, retain_batch);
            out.parts.forget_ce = static_cast<double>(forget_ce.item());
            out.parts.retain_ce = static_cast<double>(retain_ce.item());
            Tensor<Real> total =
                t.add(t.scale(forget_ce, -cfg.alpha1), t.scale(retain_ce, cfg.alpha2));
            if (cfg.objective != Objective::graddiff) {
                Tensor<Real> kl = kl_to_reference_graph(bound, *reference, kl_batch);
                out.parts.kl = static_cast<double>(kl.item());
                total = t.add(total, t.scale(kl, cfg.alpha3));
            }
            out.total = total;
            break;
        }
        case Objective::npo: {
            Tensor<Real> npo = npo_graph(bound, *reference, forget_batch, cfg.beta);
            out.parts.npo = static_cast<double>(npo.item());
            Tensor<Real> total = npo;
            if (cfg.npo_retain_term && cfg.alpha2 > 0) {
                Tensor<Real> retain_ce = cross_entropy_graph(bound, retain_batch);
                out.parts.retain_ce = static_cast<double>(retain_ce.item());
                total = t.add(total, t.scale(retain_ce, cfg.alpha2));
            }
            out.total = total;
            break;
        }
    }
    out.parts.total = static_cast<double>(out.total.item());
    return out;
}

// ----------------------------- value wrappers -----------------------------

template <typename Real>
Real cross_entropy(const Model<Real>& model, const std::vector<ScoredSequence>& batch) {
    Tape<Real> tape;
    BoundModel<Real> bound(model, tape, false);
    return cross_entropy_graph(bound, batch).item();
}

template <typename Real>
Real kl_to_reference(const Model<Real>& model, const Model<Real>& reference,
                     const std::vector<ScoredSequence>& batch) {
    Tape<Real> tape;
    BoundModel<Real> bound(model, tape, false);
    return kl_to_reference_graph(bound, reference, batch).item();
}

template <typename Real>
LossParts unlearn_loss(const UnlearnConfig& cfg, const Model<Real>& model,
                       const Model<Real>* reference,
                       const std::vector<ScoredSequence>& forget_batch,
                       const std::vector<ScoredSequence>& retain_batch,
                       const std::vector<ScoredSequence>& kl_batch) {
    Tape<Real> tape;
    BoundModel<Real> bound(model, tape, false);
    return unlearn_loss_graph(cfg, bound, reference, forget_batch, retain_batch, kl_batch).parts;
}

template <typename Real>
LossParts unlearn_loss(const UnlearnConfig& cfg, const Model<Real>& model, std::nullptr_t,
                       const std::vector<ScoredSequence>& forget_batch,
                       const std::vector<ScoredSequence>& retain_batch,
                       const std::vector<ScoredSequence>& kl_batch) {
    return unlearn_loss(cfg, model, static_cast<const Model<Real>*>(nullptr), forget_batch,
                        retain_batch, kl_batch);
}

}  // namespace ulab
