#pragma once

// Seeded training loops: plain cross-entropy finetuning and the unlearning
// runs. One Adam optimizer per run, one tape per step. A non-finite loss or
// gradient aborts the run and rolls the model back to the last good step so
// the caller can persist a usable checkpoint.

#include <charconv>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ulab/common.hpp"
#include "ulab/losses.hpp"
#include "ulab/model.hpp"

namespace ulab {

struct FinetuneConfig {
    double learning_rate{3e-3};
    std::size_t epochs{5};
    std::size_t batch_size{8};
    std::uint64_t seed{0};

    void validate() const {
        if (!(learning_rate > 0)) throw config_error("learning_rate must be > 0");
        if (batch_size < 1) throw config_error("batch_size must be >= 1");
    }
};

struct TrainStepRecord {
    std::size_t step{0};
    double total{0.0};
    std::optional<double> forget_ce;
    std::optional<double> retain_ce;
    std::optional<double> kl;
    std::optional<double> npo;
};

struct TrainHistory {
    std::vector<TrainStepRecord> records;
    bool aborted{false};
    std::size_t abort_step{0};

    void write_csv(std::ostream& out) const {
        auto field = [](const std::optional<double>& v) {
            if (!v) return std::string();
            char buf[32];
            auto res = std::to_chars(buf, buf + sizeof(buf), *v);
            return std::string(buf, res.ptr);
        };
        out << "step,total,forget_ce,retain_ce,kl,npo\n";
        for (const TrainStepRecord& r : records) {
            out << r.step << ',' << field(r.total) << ',' << field(r.forget_ce) << ','
                << field(r.retain_ce) << ',' << field(r.kl) << ',' << field(r.npo) << '\n';
        }
    }
};

template <typename Real>
class AdamOptimizer {
public:
    AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Applies one update. `grads` is keyed by the node ids in `param_ids`,
    // which line up with the model's parameter order.
    void step(Model<Real>& model, const GradMap<Real>& grads, const std::vector<int>& param_ids) {
        if (m_.empty()) {
            m_.resize(model.n_params());
            v_.resize(model.n_params());
            for (std::size_t i = 0; i < model.n_params(); ++i) {
                m_[i].assign(model.params()[i].numel(), 0.0);
                v_[i].assign(model.params()[i].numel(), 0.0);
            }
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < model.n_params(); ++i) {
            if (!grads.contains(param_ids[i])) continue;
            const Tensor<Real>& g = grads.at(param_ids[i]);
            Tensor<Real>& p = model.param_mut(i);
            for (std::size_t j = 0; j < p.values.size(); ++j) {
                double gj = static_cast<double>(g.values[j]);
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
                double mhat = m_[i][j] / bc1;
                double vhat = v_[i][j] / bc2;
                p.values[j] = static_cast<Real>(static_cast<double>(p.values[j]) -
                                                lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_{0};
    std::vector<std::vector<double>> m_, v_;
};

namespace detail {

template <typename Real>
std::vector<std::vector<Real>> snapshot_params(const Model<Real>& model) {
    std::vector<std::vector<Real>> out;
    out.reserve(model.n_params());
    for (const auto& p : model.params()) out.push_back(p.values);
    return out;
}

template <typename Real>
void restore_params(Model<Real>& model, const std::vector<std::vector<Real>>& snap) {
    for (std::size_t i = 0; i < snap.size(); ++i) model.set_param_values(i, snap[i]);
}

template <typename Real>
bool grads_finite(const GradMap<Real>& grads) {
    for (const auto& [id, g] : grads) {
        if (!all_finite(g.values)) return false;
    }
    return true;
}

inline std::vector<ScoredSequence> draw_batch(const std::vector<ScoredSequence>& data,
                                              std::size_t batch_size, Rng& rng) {
    std::vector<ScoredSequence> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(data[rng.below(data.size())]);
    return out;
}

}  // namespace detail

// Plain LM finetuning: minimizes CE over the pooled data, epoch-shuffled.
template <typename Real>
TrainHistory run_finetune(Model<Real>& model, const std::vector<ScoredSequence>& data,
                          const FinetuneConfig& cfg) {
    cfg.validate();
    if (model.frozen()) throw training_error("cannot train a frozen model", 0);
    TrainHistory history;
    if (cfg.epochs == 0) return history;
    if (data.empty()) throw data_error("finetuning requires a non-empty dataset");

    AdamOptimizer<Real> adam(cfg.learning_rate);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(cfg.seed, "finetune-epoch", epoch));
        shuffle_rng.shuffle(order);

        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            std::vector<ScoredSequence> batch;
            for (std::size_t i = begin; i < std::min(begin + cfg.batch_size, order.size()); ++i) {
                batch.push_back(data[order[i]]);
            }
            auto snapshot = detail::snapshot_params(model);
            try {
                Tape<Real> tape;
                BoundModel<Real> bound(model, tape, true);
                Tensor<Real> loss = cross_entropy_graph(bound, batch);
                double loss_value = static_cast<double>(loss.item());
                GradMap<Real> grads = tape.backward(loss);
                if (!detail::grads_finite(grads)) throw nonfinite_error("non-finite gradient");
                adam.step(model, grads, bound.param_ids());
                history.records.push_back(TrainStepRecord{step, loss_value, {}, {}, {}, {}});
            } catch (const nonfinite_error&) {
                detail::restore_params(model, snapshot);
                history.aborted = true;
                history.abort_step = step;
                return history;
            }
            ++step;
        }
    }
    return history;
}

// One unlearning run. Forget batches sweep the shuffled forget set once per
// epoch; retain and KL batches are drawn from their datasets by independent
// seeded streams.
template <typename Real>
TrainHistory run_unlearn(Model<Real>& model, const Model<Real>& reference,
                         const UnlearnConfig& cfg, const std::vector<ScoredSequence>& forget,
                         const std::vector<ScoredSequence>& retain,
                         const std::vector<ScoredSequence>& kl_data) {
    cfg.validate();
    if (model.frozen()) throw training_error("cannot train a frozen model", 0);
    if (cfg.needs_reference() && !reference.frozen()) {
        throw config_error("reference model must be frozen during unlearning");
    }
    TrainHistory history;
    if (cfg.epochs == 0) return history;
    if (forget.empty()) throw data_error("unlearning requires a non-empty forget set");
    bool needs_retain = cfg.objective != Objective::npo || cfg.npo_retain_term;
    if (needs_retain && retain.empty()) {
        throw data_error("this objective requires a non-empty retain set");
    }
    if (cfg.needs_kl() && kl_data.empty()) {
        throw data_error("this objective requires a non-empty KL dataset");
    }

    AdamOptimizer<Real> adam(cfg.learning_rate);
    Rng retain_rng(derive_seed(cfg.seed, "retain-stream"));
    Rng kl_rng(derive_seed(cfg.seed, "kl-stream"));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(forget.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(cfg.seed, "forget-epoch", epoch));
        shuffle_rng.shuffle(order);

        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            std::vector<ScoredSequence> forget_batch;
            for (std::size_t i = begin; i < std::min(begin + cfg.batch_size, order.size()); ++i) {
                forget_batch.push_back(forget[order[i]]);
            }
            std::vector<ScoredSequence> retain_batch =
                needs_retain ? detail::draw_batch(retain, cfg.batch_size, retain_rng)
                             : std::vector<ScoredSequence>{};
            std::vector<ScoredSequence> kl_batch =
                cfg.needs_kl() ? detail::draw_batch(kl_data, cfg.batch_size, kl_rng)
                               : std::vector<ScoredSequence>{};

            auto snapshot = detail::snapshot_params(model);
            try {
                Tape<Real> tape;
                BoundModel<Real> bound(model, tape, true);
                UnlearnLossGraph<Real> loss =
                    unlearn_loss_graph(cfg, bound, &reference, forget_batch, retain_batch, kl_batch);
                GradMap<Real> grads = tape.backward(loss.total);
                if (!detail::grads_finite(grads)) throw nonfinite_error("non-finite gradient");
                adam.step(model, grads, bound.param_ids());
                history.records.push_back(TrainStepRecord{step, loss.parts.total,
                                                          loss.parts.forget_ce,
                                                          loss.parts.retain_ce, loss.parts.kl,
                                                          loss.parts.npo});
            } catch (const nonfinite_error&) {
                detail::restore_params(model, snapshot);
                history.aborted = true;
                history.abort_step = step;
                return history;
            }
            ++step;
        }
    }
    return history;
}

}  // namespace ulab
