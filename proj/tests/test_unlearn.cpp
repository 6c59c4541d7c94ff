#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "ulab/losses.hpp"
#include "ulab/model.hpp"
#include "ulab/train.hpp"

using namespace ulab;

namespace {

ModelConfig small_config(std::size_t vocab = 6, std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.ff_mult = 1;
    cfg.context_len = 12;
    cfg.init_seed = seed;
    return cfg;
}

template <typename Real>
Model<Real> zero_model(const ModelConfig& cfg) {
    Model<Real> m = init_model<Real>(cfg);
    for (std::size_t i = 0; i < m.n_params(); ++i) {
        m.set_param_values(i, std::vector<Real>(m.params()[i].numel(), Real(0)));
    }
    return m;
}

ScoredSequence seq(std::vector<int> q, std::vector<int> a) {
    ScoredSequence s;
    s.ids.push_back(Vocab::kBos);
    s.ids.insert(s.ids.end(), q.begin(), q.end());
    s.ids.push_back(Vocab::kSep);
    s.target_begin = s.ids.size();
    s.ids.insert(s.ids.end(), a.begin(), a.end());
    return s;
}

std::vector<ScoredSequence> toy_batch() {
    return {seq({3, 4}, {5, 3}), seq({4}, {3, 5, 4}), seq({5, 5}, {4})};
}

}  // namespace

TEST_CASE("cross entropy of the uniform model is ln V per token") {
    ModelConfig cfg = small_config(4);
    Model<double> m = zero_model<double>(cfg);
    double ce = cross_entropy(m, {seq({3, 3}, {3, 3, 3})});
    REQUIRE(ce == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("batch cross entropy is the token-weighted mean") {
    Model<double> m = init_model<double>(small_config());
    auto batch = toy_batch();
    double combined = cross_entropy(m, batch);
    double weighted = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : batch) {
        double ce = cross_entropy(m, {s});
        weighted += ce * static_cast<double>(s.n_scored());
        tokens += s.n_scored();
    }
    REQUIRE(combined == Catch::Approx(weighted / double(tokens)).margin(1e-12));
}

TEST_CASE("KL of a model against itself is zero") {
    Model<double> m = init_model<double>(small_config());
    Model<double> ref = m;
    ref.freeze();
    double kl = kl_to_reference(m, ref, toy_batch());
    REQUIRE(std::abs(kl) <= 1e-12);
}

TEST_CASE("KL single-position hand computation") {
    // p = [0.5, 0.5] against q = [0.25, 0.75]
    Tape<double> t;
    Tensor<double> lp = t.constant(
        Tensor<double>({1, 2}, {std::log(0.5), std::log(0.5)}));
    Tensor<double> lq({1, 2}, {std::log(0.25), std::log(0.75)});
    Tensor<double> kl = kl_rows_term(t, lp, lq, Tensor<double>::full({1, 2}, 1.0));
    double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    REQUIRE(kl.item() == Catch::Approx(expected).margin(1e-12));
    REQUIRE(kl.item() == Catch::Approx(0.14384).margin(5e-6));
}

TEST_CASE("KL is non-negative across random model pairs") {
    for (std::uint64_t s = 0; s < 6; ++s) {
        Model<double> a = init_model<double>(small_config(6, 100 + s));
        Model<double> b = init_model<double>(small_config(6, 200 + s));
        b.freeze();
        REQUIRE(kl_to_reference(a, b, toy_batch()) >= -1e-12);
    }
}

TEST_CASE("graddiff with alpha1 = 0 equals the weighted retain CE") {
    Model<double> m = init_model<double>(small_config());
    UnlearnConfig cfg = default_unlearn_config(Objective::graddiff);
    cfg.alpha1 = 0.0;
    cfg.alpha2 = 0.7;
    auto forget = toy_batch();
    auto retain = std::vector<ScoredSequence>{seq({3}, {4, 5})};
    LossParts parts = unlearn_loss(cfg, m, nullptr, forget, retain, {});
    double retain_ce = cross_entropy(m, retain);
    REQUIRE(parts.total == Catch::Approx(0.7 * retain_ce).margin(1e-12));
}

TEST_CASE("NPO at the reference point is 2 ln 2") {
    Model<double> m = init_model<double>(small_config());
    Model<double> ref = m;
    ref.freeze();
    UnlearnConfig cfg = default_unlearn_config(Objective::npo);
    LossParts parts = unlearn_loss(cfg, m, &ref, toy_batch(), {}, {});
    REQUIRE(parts.total == Catch::Approx(2.0 * std::log(2.0)).margin(1e-9));
    REQUIRE(parts.npo.has_value());
}

TEST_CASE("NPO sigmoid-form identity") {
    Rng rng(55);
    for (double beta : {0.1, 1.0, 10.0}) {
        for (int i = 0; i < 500; ++i) {
            double r = std::exp(std::log(1e-6) + rng.uniform() * (std::log(1e6) - std::log(1e-6)));
            double direct = 2.0 / beta * std::log1p(std::pow(r, beta));
            double sigmoid_form =
                -2.0 / beta * std::log(1.0 / (1.0 + std::exp(beta * std::log(r))));
            double ours = npo_pointwise(std::log(r), beta);
            REQUIRE(std::abs(ours - direct) <= 1e-9 * std::max(1.0, std::abs(direct)));
            REQUIRE(std::abs(ours - sigmoid_form) <= 1e-9 * std::max(1.0, std::abs(sigmoid_form)));
        }
    }
    REQUIRE(std::abs(npo_pointwise(0.0, 1.0) - 2.0 * std::log(2.0)) <= 1e-12);
}

TEST_CASE("NPO loss properties: positive, increasing, vanishing") {
    REQUIRE(npo_pointwise(-50.0, 1.0) > 0.0);
    REQUIRE(npo_pointwise(-50.0, 1.0) < 1e-20);
    double prev = npo_pointwise(-10.0, 2.0);
    for (double z = -9.0; z <= 10.0; z += 1.0) {
        double cur = npo_pointwise(z, 2.0);
        REQUIRE(cur > prev);
        prev = cur;
    }
}

TEST_CASE("objective totals are exact weighted sums of their components") {
    Model<double> m = init_model<double>(small_config());
    Model<double> ref = init_model<double>(small_config(6, 77));
    ref.freeze();
    auto forget = toy_batch();
    auto retain = std::vector<ScoredSequence>{seq({3}, {4, 5}), seq({5}, {3})};
    auto kl_data = std::vector<ScoredSequence>{seq({4, 4}, {5})};

    UnlearnConfig cfg = default_unlearn_config(Objective::graddiff_kl);
    cfg.alpha1 = 1.3;
    cfg.alpha2 = 0.5;
    cfg.alpha3 = 2.0;
    LossParts p = unlearn_loss(cfg, m, &ref, forget, retain, kl_data);
    REQUIRE(p.forget_ce.has_value());
    REQUIRE(p.retain_ce.has_value());
    REQUIRE(p.kl.has_value());
    double expected = -1.3 * *p.forget_ce + 0.5 * *p.retain_ce + 2.0 * *p.kl;
    REQUIRE(p.total == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("missing reference is rejected") {
    Model<double> m = init_model<double>(small_config());
    UnlearnConfig cfg = default_unlearn_config(Objective::npo);
    REQUIRE_THROWS_AS(unlearn_loss(cfg, m, nullptr, toy_batch(), {}, {}), config_error);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    ModelConfig cfg = small_config(6, 23);
    Model<double> model = init_model<double>(cfg);
    auto batch = toy_batch();

    Tape<double> tape;
    BoundModel<double> bound(model, tape, true);
    Tensor<double> loss = cross_entropy_graph(bound, batch);
    GradMap<double> analytic = tape.backward(loss);

    auto f = [&](const std::vector<Tensor<double>>& ps) {
        Model<double> probe = make_model_from_params(cfg, std::vector<std::string>(model.names()),
                                                     std::vector<Tensor<double>>(ps));
        return cross_entropy(probe, batch);
    };
    GradMap<double> fd = finite_difference_gradient<double>(f, model.params(), 1e-4);
    gradcheck::Worst w = gradcheck::compare(analytic, bound.param_ids(), fd);
    INFO("worst rel " << w.rel << " worst abs " << w.abs);
    REQUIRE(w.ok);
}

TEST_CASE("zero epochs leaves parameters untouched") {
    Model<float> m = init_model<float>(small_config());
    Model<float> before = m;
    FinetuneConfig cfg;
    cfg.epochs = 0;
    TrainHistory h = run_finetune(m, toy_batch(), cfg);
    REQUIRE(h.records.empty());
    for (std::size_t i = 0; i < m.n_params(); ++i) {
        REQUIRE(m.params()[i].values == before.params()[i].values);
    }
}

TEST_CASE("finetuning reduces cross entropy on a toy corpus") {
    Model<float> m = init_model<float>(small_config(6, 5));
    auto data = toy_batch();
    double before = cross_entropy(m, data);
    FinetuneConfig cfg;
    cfg.epochs = 80;
    cfg.learning_rate = 3e-3;
    cfg.seed = 9;
    TrainHistory h = run_finetune(m, data, cfg);
    REQUIRE_FALSE(h.aborted);
    double after = cross_entropy(m, data);
    REQUIRE(after < before);
    REQUIRE(after < 0.5 * before);
}

TEST_CASE("graddiff unlearning raises forget CE and the reference stays frozen") {
    ModelConfig cfg = small_config(6, 5);
    Model<float> m = init_model<float>(cfg);
    auto forget = std::vector<ScoredSequence>{seq({3, 4}, {5, 3})};
    auto retain = std::vector<ScoredSequence>{seq({4}, {3, 5, 4}), seq({5, 5}, {4})};

    FinetuneConfig ft;
    ft.epochs = 40;
    ft.seed = 2;
    auto all = forget;
    all.insert(all.end(), retain.begin(), retain.end());
    run_finetune(m, all, ft);

    Model<float> reference = m;
    reference.freeze();
    auto ref_snapshot = reference.params();

    double forget_ce_before = cross_entropy(m, forget);
    UnlearnConfig ucfg = default_unlearn_config(Objective::graddiff_kl);
    ucfg.epochs = 10;
    ucfg.learning_rate = 1e-3;
    ucfg.seed = 3;
    TrainHistory h = run_unlearn(m, reference, ucfg, forget, retain, retain);
    REQUIRE_FALSE(h.aborted);
    double forget_ce_after = cross_entropy(m, forget);
    REQUIRE(forget_ce_after > forget_ce_before);

    for (std::size_t i = 0; i < reference.n_params(); ++i) {
        REQUIRE(reference.params()[i].values == ref_snapshot[i].values);
    }
}

TEST_CASE("training runs are reproducible") {
    auto run_once = [] {
        Model<float> m = init_model<float>(small_config(6, 5));
        UnlearnConfig cfg = default_unlearn_config(Objective::graddiff);
        cfg.epochs = 3;
        cfg.seed = 44;
        Model<float> ref = m;
        ref.freeze();
        TrainHistory h = run_unlearn(m, ref, cfg, toy_batch(),
                                     {seq({3}, {4, 5}), seq({5}, {3})}, {});
        return std::make_pair(m, h);
    };
    auto [m1, h1] = run_once();
    auto [m2, h2] = run_once();
    REQUIRE(h1.records.size() == h2.records.size());
    for (std::size_t i = 0; i < h1.records.size(); ++i) {
        REQUIRE(h1.records[i].total == h2.records[i].total);
    }
    for (std::size_t i = 0; i < m1.n_params(); ++i) {
        REQUIRE(m1.params()[i].values == m2.params()[i].values);
    }
}

TEST_CASE("frozen model refuses training") {
    Model<float> m = init_model<float>(small_config());
    m.freeze();
    FinetuneConfig cfg;
    REQUIRE_THROWS_AS(run_finetune(m, toy_batch(), cfg), training_error);
}

TEST_CASE("history csv layout") {
    TrainHistory h;
    h.records.push_back(TrainStepRecord{0, 1.5, -0.25, 1.0, std::nullopt, std::nullopt});
    h.records.push_back(TrainStepRecord{1, 2.0, std::nullopt, std::nullopt, std::nullopt, 2.0});
    std::ostringstream os;
    h.write_csv(os);
    std::string expected =
        "step,total,forget_ce,retain_ce,kl,npo\n"
        "0,1.5,-0.25,1,,\n"
        "1,2,,,,2\n";
    REQUIRE(os.str() == expected);
}

TEST_CASE("graddiff ignores alpha3 and beta") {
    Model<double> m = init_model<double>(small_config());
    auto forget = toy_batch();
    auto retain = std::vector<ScoredSequence>{seq({3}, {4, 5})};
    UnlearnConfig a = default_unlearn_config(Objective::graddiff);
    UnlearnConfig b = a;
    b.alpha3 = 9.0;
    b.beta = 0.01;
    REQUIRE(unlearn_loss(a, m, nullptr, forget, retain, {}).total ==
            unlearn_loss(b, m, nullptr, forget, retain, {}).total);
}

TEST_CASE("npo ignores alpha2 unless the retain term is enabled") {
    Model<double> m = init_model<double>(small_config());
    Model<double> ref = m;
    ref.freeze();
    auto forget = toy_batch();
    auto retain = std::vector<ScoredSequence>{seq({3}, {4, 5})};
    UnlearnConfig a = default_unlearn_config(Objective::npo);
    UnlearnConfig b = a;
    b.alpha2 = 7.0;
    REQUIRE(unlearn_loss(a, m, &ref, forget, retain, {}).total ==
            unlearn_loss(b, m, &ref, forget, retain, {}).total);
    b.npo_retain_term = true;
    REQUIRE(unlearn_loss(b, m, &ref, forget, retain, {}).total !=
            unlearn_loss(a, m, &ref, forget, retain, {}).total);
}
