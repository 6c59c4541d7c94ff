// Acceptance suite: one binary, one pass/fail line per criterion, exit code
// equal to the number of failed criteria. Tolerances and thresholds are
// pinned in code; the heavier criteria run the real pipeline in temporary
// workspaces with pinned seeds.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracle.hpp"
#include "ulab/ulab.hpp"

using namespace ulab;
namespace fsys = std::filesystem;

namespace {

struct check_failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
    if (!cond) throw check_failure(msg);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

fsys::path fresh_dir(const std::string& name) {
    fsys::path p = fsys::temp_directory_path() / name;
    fsys::remove_all(p);
    return p;
}

std::string slurp(const fsys::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// ----------------------------------------------------------------------
// shared tiny fixtures

ModelConfig grad_check_config(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 6;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.ff_mult = 1;
    cfg.context_len = 12;
    cfg.init_seed = seed;
    return cfg;
}

ScoredSequence make_seq(std::vector<int> q, std::vector<int> a) {
    ScoredSequence s;
    s.ids.push_back(Vocab::kBos);
    s.ids.insert(s.ids.end(), q.begin(), q.end());
    s.ids.push_back(Vocab::kSep);
    s.target_begin = s.ids.size();
    s.ids.insert(s.ids.end(), a.begin(), a.end());
    return s;
}

// ----------------------------------------------------------------------
// criterion 1: analytic gradients vs central finite differences

void criterion_gradients() {
    auto start = std::chrono::steady_clock::now();
    ModelConfig cfg = grad_check_config(23);
    Model<double> model = init_model<double>(cfg);
    require(model.param_count() <= 5000,
            "gradient-check model exceeds 5k parameters: " + std::to_string(model.param_count()));

    Model<double> reference = init_model<double>(grad_check_config(77));
    reference.freeze();

    std::vector<ScoredSequence> forget = {make_seq({3, 4}, {5, 3}), make_seq({4}, {3, 5})};
    std::vector<ScoredSequence> retain = {make_seq({5}, {4, 3}), make_seq({3, 3}, {4})};
    std::vector<ScoredSequence> kl_batch = {make_seq({4, 5}, {3})};

    struct Case {
        const char* name;
        std::function<Tensor<double>(BoundModel<double>&)> graph;
        std::function<double(const Model<double>&)> value;
    };
    auto ucfg = [&](Objective o) {
        UnlearnConfig c = default_unlearn_config(o);
        c.alpha1 = 1.0;
        c.alpha2 = 0.8;
        c.alpha3 = 0.6;
        c.beta = 1.0;
        c.npo_retain_term = false;
        return c;
    };

    std::vector<Case> cases;
    cases.push_back({"ce",
                     [&](BoundModel<double>& b) { return cross_entropy_graph(b, forget); },
                     [&](const Model<double>& m) { return cross_entropy(m, forget); }});
    cases.push_back({"kl",
                     [&](BoundModel<double>& b) {
                         return kl_to_reference_graph(b, reference, kl_batch);
                     },
                     [&](const Model<double>& m) {
                         return kl_to_reference(m, reference, kl_batch);
                     }});
    for (Objective o : {Objective::graddiff, Objective::graddiff_kl, Objective::npo,
                        Objective::concept_}) {
        cases.push_back(
            {objective_name(o).c_str(),
             [&, o](BoundModel<double>& b) {
                 return unlearn_loss_graph(ucfg(o), b, &reference, forget, retain, kl_batch).total;
             },
             [&, o](const Model<double>& m) {
                 return unlearn_loss(ucfg(o), m, &reference, forget, retain, kl_batch).total;
             }});
    }

    for (const Case& c : cases) {
        Tape<double> tape;
        BoundModel<double> bound(model, tape, true);
        Tensor<double> loss = c.graph(bound);
        GradMap<double> analytic = tape.backward(loss);

        auto f = [&](const std::vector<Tensor<double>>& ps) {
            Model<double> probe = make_model_from_params(
                cfg, std::vector<std::string>(model.names()), std::vector<Tensor<double>>(ps));
            return c.value(probe);
        };
        GradMap<double> fd = finite_difference_gradient<double>(f, model.params(), 1e-4);
        gradcheck::Worst w = gradcheck::compare(analytic, bound.param_ids(), fd);
        require(w.ok, std::string(c.name) + ": gradient mismatch (worst rel " + fmt(w.rel) +
                          ", worst small-coordinate abs " + fmt(w.abs) + ")");
    }
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    require(elapsed < 30.0, "gradient checks took " + fmt(elapsed) + "s (budget 30s)");
}

// ----------------------------------------------------------------------
// criterion 2: NPO sigmoid-form identity

void criterion_npo_identity() {
    Rng rng(424242);
    const double betas[3] = {0.1, 1.0, 10.0};
    for (int i = 0; i < 10000; ++i) {
        double beta = betas[i % 3];
        double log_r = std::log(1e-6) + rng.uniform() * (std::log(1e6) - std::log(1e-6));
        double r = std::exp(log_r);
        double direct = 2.0 / beta * std::log1p(std::pow(r, beta));
        double sigmoid_form = -2.0 / beta * std::log(1.0 / (1.0 + std::exp(beta * std::log(r))));
        require(std::abs(direct - sigmoid_form) <= 1e-9,
                "identity violated at r=" + fmt(r) + " beta=" + fmt(beta) + ": |" + fmt(direct) +
                    " - " + fmt(sigmoid_form) + "| > 1e-9");
        require(std::abs(npo_pointwise(log_r, beta) - direct) <= 1e-9,
                "npo_pointwise deviates from the direct form at r=" + fmt(r));
    }
    require(std::abs(npo_pointwise(0.0, 1.0) - 2.0 * std::log(2.0)) <= 1e-12,
            "NPO at r=1, beta=1 is not 2 ln 2");
}

// ----------------------------------------------------------------------
// criterion 3: reference p-values at n = 90

void criterion_p_values() {
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::pair<double, double>> table = {
        {0.300, 4.11e-3}, {0.224, 3.39e-2}, {0.293, 5.14e-3},
        {0.362, 4.51e-4}, {0.347, 7.97e-4}, {0.399, 9.62e-5},
        {0.169, 1.11e-1}, {0.123, 2.48e-1}, {0.161, 1.30e-1},
    };
    for (const auto& [r, expected] : table) {
        double p = p_value_two_sided(r, 90);
        require(std::abs(p - expected) / expected <= 0.05,
                "p(r=" + fmt(r) + ", n=90) = " + fmt(p) + ", reference " + fmt(expected));
    }
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    require(elapsed < 1.0, "p-value reproduction took " + fmt(elapsed) + "s (budget 1s)");
}

// ----------------------------------------------------------------------
// criterion 4: metric oracles on a 4-token vocabulary

void criterion_metric_oracles() {
    ModelConfig cfg;
    cfg.vocab_size = 4;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.ff_mult = 2;
    cfg.context_len = 24;
    cfg.init_seed = 4242;
    Model<double> seeded = init_model<double>(cfg);
    Model<double> uniform = init_model<double>(cfg);
    for (std::size_t i = 0; i < uniform.n_params(); ++i) {
        uniform.set_param_values(i, std::vector<double>(uniform.params()[i].numel(), 0.0));
    }
    Vocab vocab = Vocab::build({"a"});
    require(vocab.size() == 4, "expected a 4-token vocabulary");

    auto qa = [](std::string q, std::string a, std::string para, std::vector<std::string> pert) {
        QAExample e;
        e.id = "acc";
        e.language = "aa";
        e.question = std::move(q);
        e.answer = std::move(a);
        e.paraphrased_answer = std::move(para);
        e.perturbed_answers = std::move(pert);
        return e;
    };
    std::vector<QAExample> items = {
        qa("aa", "aaa", "aa", {"a", "aaaa"}),
        qa("a", "aa", "aaa", {"aaaa", "aaaaa", "aaaaaa"}),
        qa("aaa", "a", "aaaa", {"aa"}),
    };

    for (const QAExample& item : items) {
        std::vector<int> q = vocab.encode(item.question);
        double got = normalized_probability(seeded, vocab, item);
        double want = oracle::normalized_answer_prob(seeded, q, vocab.encode(item.answer));
        require(std::abs(got - want) <= 1e-9, "normalized probability deviates from the oracle");

        std::vector<double> pert;
        for (const std::string& p : item.perturbed_answers) {
            pert.push_back(oracle::normalized_answer_prob(seeded, q, vocab.encode(p)));
        }
        double para = oracle::normalized_answer_prob(seeded, q, vocab.encode(item.paraphrased_answer));
        double want_tr = 0.0;
        for (double p : pert) want_tr += p;
        want_tr = want_tr / double(pert.size()) / para;
        double got_tr = truth_ratio(seeded, vocab, item);
        require(std::abs(got_tr - want_tr) <= 1e-9, "truth ratio deviates from the oracle");

        require(std::abs(normalized_probability(uniform, vocab, item) - 0.25) <= 1e-9,
                "uniform model normalized probability is not 1/V");
        require(std::abs(truth_ratio(uniform, vocab, item) - 1.0) <= 1e-9,
                "uniform model truth ratio is not 1");
    }

    std::vector<std::string> corpus = {"aa", "aaa", "a", "aaaa", "aaaaa"};
    double got_ppl = perplexity_text(seeded, vocab, corpus);
    double nll = 0.0;
    std::size_t count = 0;
    for (const std::string& s : corpus) {
        std::vector<int> ids = vocab.encode(s);
        nll -= std::log(oracle::answer_prob(seeded, {}, ids));
        count += ids.size();
    }
    require(std::abs(got_ppl - std::exp(nll / double(count))) <= 1e-9,
            "perplexity deviates from the token-by-token oracle");
    require(std::abs(perplexity_text(uniform, vocab, corpus) - 4.0) <= 1e-9,
            "uniform model perplexity is not V");

    std::vector<MCQExample> mcqs;
    for (int i = 0; i < 10; ++i) {
        MCQExample m;
        m.id = "m" + std::to_string(i);
        m.language = "aa";
        m.question = std::string(1 + i % 3, 'a');
        m.options = {"a", "aa", "aaa", "aaaa"};
        m.stereotype_index = static_cast<std::size_t>(i % 4);
        m.unknown_index = static_cast<std::size_t>((i + 1) % 4);
        mcqs.push_back(m);
    }
    RateSummary got_rates = mcq_rates(seeded, vocab, mcqs);
    std::size_t biased = 0, unknown = 0;
    for (const MCQExample& m : mcqs) {
        std::vector<int> q = vocab.encode(m.question);
        std::vector<double> scores;
        for (const std::string& o : m.options) {
            scores.push_back(oracle::normalized_answer_prob(seeded, q, vocab.encode(o)));
        }
        std::size_t best = 0;
        for (std::size_t k = 1; k < scores.size(); ++k) {
            if (scores[k] > scores[best]) best = k;
        }
        if (best == m.stereotype_index) ++biased;
        if (best == m.unknown_index) ++unknown;
    }
    require(std::abs(got_rates.biased_rate - biased / 10.0) <= 1e-9 &&
                std::abs(got_rates.unknown_rate - unknown / 10.0) <= 1e-9,
            "MCQ rates deviate from the per-option oracle");
    require(std::abs(got_rates.biased_rate + got_rates.unknown_rate + got_rates.other_rate - 1.0) <=
                1e-9,
            "MCQ rates do not sum to 1");
}

// ----------------------------------------------------------------------
// criterion 5: utility aggregation

void criterion_utility() {
    auto summary = [](double prob, double tr) {
        MetricSummary s;
        s.n_examples = 1;
        s.mean_normalized_prob = prob;
        s.mean_truth_ratio = tr;
        return s;
    };
    for (double v : {0.25, 0.5, 0.9}) {
        auto s = summary(v, 1.0 - v);
        require(std::abs(model_utility({s, s, s}) - v) <= 1e-12,
                "utility of six equal values " + fmt(v) + " is not " + fmt(v));
    }
    auto s1 = summary(1.0, 2.0 / 3.0);
    auto s2 = summary(1.0, 0.0);
    require(std::abs(model_utility({s1, s2, s2}) - 0.75) <= 1e-12,
            "hand-computed harmonic mean case {1,1/3,1,1,1,1} is not 0.75");
    require(model_utility({summary(0.9, 1.2), s2, s2}) == 0.0,
            "utility does not clamp to zero when 1 - TR <= 0");
    require(model_utility({summary(0.9, 1.0), s2, s2}) == 0.0,
            "utility does not clamp to zero when 1 - TR == 0");
}

// ----------------------------------------------------------------------
// criterion 6: transfer-matrix identity

void criterion_transfer_identity() {
    std::vector<std::string> langs = {"aa", "bb", "cc"};
    std::vector<double> base = {0.81, 0.52, 0.67};
    std::vector<std::vector<double>> unlearned = {base, base, base};
    TransferMatrix m = transfer_matrix_from_means(langs, unlearned, base, "forget", "graddiff");
    for (double v : m.values) require(v == 1.0, "baseline-vs-itself ratio is not exactly 1");

    TransferMatrix varied = m;
    varied.values = {0.1, 0.9, 0.5, 0.8, 0.2, 0.6, 0.7, 0.4, 0.3};
    CorrelationResult r = method_agreement(varied, varied);
    require(r.r == 1.0, "method agreement of a matrix with itself is not exactly 1");
    require(r.n == 9, "method agreement sample size is not K^2");
}

// ----------------------------------------------------------------------
// criterion 7: seeded end-to-end data-unlearning experiment

nlohmann::json smoke_data_config_json(const std::string& ws) {
    return {
        {"workspace", ws},
        {"seed", 2024},
        {"jobs", 4},
        {"task", "data"},
        {"languages",
         {{{"id", "aa"}, {"lexicon_seed", 1}, {"shared_fraction", 1.0}},
          {{"id", "bb"}, {"lexicon_seed", 2}, {"shared_fraction", 0.9}, {"script_offset", 3}},
          {{"id", "cc"},
           {"lexicon_seed", 3},
           {"shared_fraction", 0.1},
           {"word_order", {3, 2, 1, 0}},
           {"script_offset", 11}}}},
        {"corpus",
         {{"n_profiles", 40},
          {"facts_per_profile", 5},
          {"forget_fraction", 0.1},
          {"n_perturbed", 3},
          {"n_heldout_profiles", 6},
          {"n_world_entities", 8}}},
        {"model",
         {{"embed_dim", 64}, {"n_layers", 2}, {"n_heads", 1}, {"ff_mult", 2}, {"context_len", 96}}},
        {"finetune", {{"learning_rate", 0.003}, {"epochs", 12}, {"batch_size", 8}}},
        {"methods",
         {{{"objective", "graddiff"}, {"epochs", 8}, {"learning_rate", 0.0015}},
          {{"objective", "graddiff_kl"}, {"epochs", 12}, {"learning_rate", 0.002}},
          {{"objective", "npo"},
           {"epochs", 22},
           {"learning_rate", 0.002},
           {"beta", 0.2},
           {"npo_retain_term", true},
           {"alpha2", 2.5}}}},
        {"eval",
         {{"datasets", {"forget", "retain", "real_authors", "world_facts", "general"}},
          {"max_examples_per_dataset", 60}}},
    };
}

void criterion_data_experiment() {
    auto start = std::chrono::steady_clock::now();
    fsys::path ws = fresh_dir("ulab_acceptance_data");
    ExperimentConfig cfg = parse_experiment_config(smoke_data_config_json(ws.string()));
    for (const char* stage : {"gen-data", "finetune", "unlearn", "eval", "analyze"}) {
        require(run_stage(stage, cfg, false) == 0, std::string("stage failed: ") + stage);
    }

    Workspace w{ws};
    auto diag = [&](const std::string& tag, const std::string& method, std::size_t i) {
        TransferMatrix m =
            load_transfer_csv(w.analysis() / ("transfer_" + tag + "_" + method + ".csv"));
        return m.at(i, i);
    };
    std::vector<std::string> langs = {"aa", "bb", "cc"};
    for (const std::string& method : {std::string("graddiff"), std::string("graddiff_kl"),
                                      std::string("npo")}) {
        for (std::size_t i = 0; i < langs.size(); ++i) {
            double f = diag("forget", method, i);
            require(f <= 0.3, method + " forget ratio in " + langs[i] + " is " + fmt(f) +
                                  " (must be <= 0.3)");
        }
    }
    for (std::size_t i = 0; i < langs.size(); ++i) {
        double r_kl = diag("retain", "graddiff_kl", i);
        require(r_kl >= 0.5, "graddiff_kl retain ratio in " + langs[i] + " is " + fmt(r_kl) +
                                 " (must be >= 0.5)");
        double r_npo = diag("retain", "npo", i);
        require(r_npo >= 0.8,
                "npo retain ratio in " + langs[i] + " is " + fmt(r_npo) + " (must be >= 0.8)");
    }
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    require(elapsed < 600.0, "experiment took " + fmt(elapsed) + "s (budget 600s)");
    fsys::remove_all(ws);
}

// ----------------------------------------------------------------------
// criterion 8: syntactic/lexical similarity predicts transfer

void criterion_similarity_transfer() {
    auto ratio_pair = [](std::uint64_t seed) {
        LangSpec a{"aa", 1, 1.0, {0, 1, 2, 3}, 0};
        LangSpec b{"bb", 2, 0.9, {0, 1, 2, 3}, 3};
        LangSpec c{"cc", 3, 0.1, {3, 2, 1, 0}, 11};

        FactSet profiles = generate_profiles(20, 4, derive_seed(seed, "profiles"));
        std::map<std::string, std::vector<QAExample>> forget_sets;
        std::vector<QAExample> all;
        std::vector<ScoredSequence> train_pool;
        Vocab vocab;
        {
            std::vector<QAExample> rendered;
            for (const LangSpec& spec : {a, b, c}) {
                auto qa = render_language(profiles, spec, derive_seed(seed, "render"), 3);
                auto [forget, retain] = split_forget_retain(qa, 0.1, derive_seed(seed, "split"));
                forget_sets[spec.id] = forget;
                for (const auto& e : forget) rendered.push_back(e);
                for (const auto& e : retain) rendered.push_back(e);
            }
            vocab = build_vocab(rendered);
            for (const QAExample& e : rendered) all.push_back(e);
            train_pool = qa_sequences(vocab, all);
        }

        ModelConfig mc;
        mc.vocab_size = vocab.size();
        mc.embed_dim = 48;
        mc.n_layers = 2;
        mc.n_heads = 1;
        mc.ff_mult = 2;
        mc.context_len = 72;
        mc.init_seed = derive_seed(seed, "init");

        Model<float> model = init_model<float>(mc);
        FinetuneConfig ft;
        ft.learning_rate = 3e-3;
        ft.epochs = 12;
        ft.batch_size = 8;
        ft.seed = derive_seed(seed, "finetune");
        run_finetune(model, train_pool, ft);

        auto mean_prob = [&](const Model<float>& m, const std::vector<QAExample>& ds) {
            double acc = 0;
            for (const QAExample& qa : ds) acc += normalized_probability(m, vocab, qa);
            return acc / double(ds.size());
        };
        double base_b = mean_prob(model, forget_sets["bb"]);
        double base_c = mean_prob(model, forget_sets["cc"]);

        Model<float> reference = model;
        reference.freeze();
        UnlearnConfig ucfg = default_unlearn_config(Objective::graddiff);
        ucfg.learning_rate = 1.5e-3;
        ucfg.epochs = 8;
        ucfg.seed = derive_seed(seed, "unlearn");
        auto retain_aa = qa_sequences(vocab, [&] {
            std::vector<QAExample> r;
            for (const QAExample& e : all) {
                if (e.language == "aa" && e.split == Split::retain) r.push_back(e);
            }
            return r;
        }());
        run_unlearn(model, reference, ucfg, qa_sequences(vocab, forget_sets["aa"]), retain_aa, {});

        return std::make_pair(mean_prob(model, forget_sets["bb"]) / base_b,
                              mean_prob(model, forget_sets["cc"]) / base_c);
    };

    std::vector<double> near, far;
    for (std::uint64_t seed : {101, 102, 103, 104, 105}) {
        auto [b, c] = ratio_pair(seed);
        near.push_back(b);
        far.push_back(c);
    }
    std::sort(near.begin(), near.end());
    std::sort(far.begin(), far.end());
    double median_near = near[2], median_far = far[2];
    require(median_near <= median_far,
            "median forget ratio toward the near language (" + fmt(median_near) +
                ") exceeds the far language (" + fmt(median_far) + ")");
}

// ----------------------------------------------------------------------
// criterion 9: concept unlearning

void criterion_concept_experiment() {
    fsys::path ws = fresh_dir("ulab_acceptance_concept");
    nlohmann::json j = {
        {"workspace", ws.string()},
        {"seed", 3030},
        {"jobs", 3},
        {"task", "concept"},
        {"languages",
         {{{"id", "aa"}, {"lexicon_seed", 1}, {"shared_fraction", 1.0}},
          {{"id", "bb"}, {"lexicon_seed", 2}, {"shared_fraction", 0.9}, {"script_offset", 3}},
          {{"id", "cc"},
           {"lexicon_seed", 3},
           {"shared_fraction", 0.1},
           {"word_order", {3, 2, 1, 0}},
           {"script_offset", 11}}}},
        {"corpus", {{"n_profiles", 4}, {"facts_per_profile", 3}, {"forget_fraction", 0.2},
                    {"n_heldout_profiles", 2}, {"n_world_entities", 8}, {"n_mcq", 60}}},
        {"model",
         {{"embed_dim", 64}, {"n_layers", 2}, {"n_heads", 1}, {"ff_mult", 2}, {"context_len", 96}}},
        {"finetune", {{"learning_rate", 0.003}, {"epochs", 10}, {"batch_size", 8}}},
        {"methods",
         {{{"objective", "concept"}, {"epochs", 3}, {"learning_rate", 0.0005},
           {"kl_dataset", "general"}}}},
        {"eval", {{"datasets", {"mcq", "general"}}}},
    };
    ExperimentConfig cfg = parse_experiment_config(j);
    for (const char* stage : {"gen-data", "finetune", "unlearn", "eval"}) {
        require(run_stage(stage, cfg, false) == 0, std::string("stage failed: ") + stage);
    }

    Workspace w{ws};
    auto record = [&](const std::string& model, const std::string& dataset) {
        std::ifstream in(w.metrics_file(model));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            EvalRecord r = eval_record_from_json(nlohmann::json::parse(line));
            if (r.language == "aa" && r.dataset == dataset) return r;
        }
        throw check_failure("missing eval record " + model + "/aa/" + dataset);
    };

    EvalRecord base_mcq = record("finetuned", "mcq");
    EvalRecord unlearned_mcq = record("unlearned_concept_aa", "mcq");
    require(base_mcq.mcq && unlearned_mcq.mcq, "missing MCQ rates");
    require(unlearned_mcq.mcq->biased_rate < base_mcq.mcq->biased_rate,
            "biased rate did not strictly decrease (" + fmt(base_mcq.mcq->biased_rate) + " -> " +
                fmt(unlearned_mcq.mcq->biased_rate) + ")");
    require(unlearned_mcq.mcq->unknown_rate > base_mcq.mcq->unknown_rate,
            "unknown rate did not strictly increase (" + fmt(base_mcq.mcq->unknown_rate) + " -> " +
                fmt(unlearned_mcq.mcq->unknown_rate) + ")");

    EvalRecord base_ppl = record("finetuned", "general");
    EvalRecord unlearned_ppl = record("unlearned_concept_aa", "general");
    require(base_ppl.perplexity && unlearned_ppl.perplexity, "missing perplexity records");
    require(*unlearned_ppl.perplexity <= 2.0 * *base_ppl.perplexity,
            "general perplexity more than doubled (" + fmt(*base_ppl.perplexity) + " -> " +
                fmt(*unlearned_ppl.perplexity) + ")");
    fsys::remove_all(ws);
}

// ----------------------------------------------------------------------
// criterion 10: determinism and serialization

void criterion_determinism() {
    auto micro = [](const std::string& ws) {
        return parse_experiment_config(
            {{"workspace", ws},
             {"seed", 7},
             {"task", "data"},
             {"languages",
              {{{"id", "aa"}, {"lexicon_seed", 1}, {"shared_fraction", 1.0}},
               {{"id", "bb"},
                {"lexicon_seed", 2},
                {"shared_fraction", 0.5},
                {"word_order", {1, 0, 3, 2}},
                {"script_offset", 5}}}},
             {"corpus", {{"n_profiles", 6}, {"facts_per_profile", 3}, {"forget_fraction", 0.2},
                         {"n_heldout_profiles", 2}, {"n_world_entities", 4}, {"n_mcq", 6}}},
             {"model", {{"embed_dim", 16}, {"n_layers", 1}, {"n_heads", 1}, {"ff_mult", 2},
                        {"context_len", 96}}},
             {"finetune", {{"learning_rate", 0.003}, {"epochs", 2}, {"batch_size", 8}}},
             {"methods", {{{"objective", "graddiff"}, {"epochs", 1}}}},
             {"eval", {{"max_examples_per_dataset", 8}}}});
    };
    const std::vector<std::string> stages = {"gen-data", "finetune", "unlearn",
                                             "eval",     "analyze",  "report"};

    fsys::path ws1 = fresh_dir("ulab_acceptance_det1");
    fsys::path ws2 = fresh_dir("ulab_acceptance_det2");
    ExperimentConfig cfg1 = micro(ws1.string());
    ExperimentConfig cfg2 = micro(ws2.string());
    for (const std::string& s : stages) {
        require(run_stage(s, cfg1, false) == 0, "stage failed: " + s);
        require(run_stage(s, cfg2, false) == 0, "stage failed: " + s);
    }
    for (const std::string& s : stages) {
        auto m1 = read_manifest(Workspace{ws1}, s);
        auto m2 = read_manifest(Workspace{ws2}, s);
        require(m1 && m2, "missing manifest for stage " + s);
        require(m1->artifacts == m2->artifacts,
                "double-run manifest digests differ for stage " + s);
    }

    // checkpoint round trip is bit-exact
    Workspace w{ws1};
    Checkpoint ck = load_checkpoint(w.checkpoint_file("finetuned"));
    fsys::path copy = ws1 / "roundtrip.ulck";
    save_checkpoint(ck.model, ck.vocab, copy);
    require(slurp(copy) == slurp(w.checkpoint_file("finetuned")),
            "checkpoint save/load round trip is not byte-identical");

    // QA / MCQ / distance round trips are semantically identical
    auto qa1 = load_qa_jsonl(w.qa_file("aa"));
    fsys::path qa_copy = ws1 / "roundtrip_qa.jsonl";
    save_qa_jsonl(qa1, qa_copy);
    auto qa2 = load_qa_jsonl(qa_copy);
    require(qa1.size() == qa2.size(), "QA round trip changed the record count");
    for (std::size_t i = 0; i < qa1.size(); ++i) {
        require(qa1[i].id == qa2[i].id && qa1[i].question == qa2[i].question &&
                    qa1[i].answer == qa2[i].answer &&
                    qa1[i].paraphrased_answer == qa2[i].paraphrased_answer &&
                    qa1[i].perturbed_answers == qa2[i].perturbed_answers &&
                    qa1[i].split == qa2[i].split && qa1[i].subject_id == qa2[i].subject_id,
                "QA round trip altered a record");
    }
    auto mcq1 = load_mcq_jsonl(w.mcq_file("aa"));
    fsys::path mcq_copy = ws1 / "roundtrip_mcq.jsonl";
    save_mcq_jsonl(mcq1, mcq_copy);
    auto mcq2 = load_mcq_jsonl(mcq_copy);
    require(mcq1.size() == mcq2.size(), "MCQ round trip changed the record count");
    for (std::size_t i = 0; i < mcq1.size(); ++i) {
        require(mcq1[i].options == mcq2[i].options &&
                    mcq1[i].stereotype_index == mcq2[i].stereotype_index &&
                    mcq1[i].unknown_index == mcq2[i].unknown_index,
                "MCQ round trip altered a record");
    }
    DistanceMatrices d1 = load_distances(w.data());
    fsys::path dist_dir = ws1 / "roundtrip_dist";
    fsys::create_directories(dist_dir);
    save_distances(d1, dist_dir);
    DistanceMatrices d2 = load_distances(dist_dir);
    require(d1.languages == d2.languages && d1.syntactic == d2.syntactic &&
                d1.inventory == d2.inventory,
            "distance matrix round trip altered values");

    fsys::remove_all(ws1);
    fsys::remove_all(ws2);
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* label;
        std::function<void()> fn;
    };
    const std::vector<Criterion> criteria = {
        {1, "gradient correctness for CE, KL, GradDiff, GradDiff-KL, NPO, concept",
         criterion_gradients},
        {2, "NPO sigmoid-form identity", criterion_npo_identity},
        {3, "two-sided p-value reproduction at n = 90", criterion_p_values},
        {4, "metric oracles on a 4-token vocabulary", criterion_metric_oracles},
        {5, "model-utility aggregation", criterion_utility},
        {6, "transfer-matrix identity and self-agreement", criterion_transfer_identity},
        {7, "seeded end-to-end data-unlearning experiment", criterion_data_experiment},
        {8, "similarity predicts cross-lingual transfer", criterion_similarity_transfer},
        {9, "concept-unlearning experiment", criterion_concept_experiment},
        {10, "determinism and serialization round trips", criterion_determinism},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        auto start = std::chrono::steady_clock::now();
        std::string verdict = "PASS";
        std::string detail;
        try {
            c.fn();
        } catch (const std::exception& e) {
            verdict = "FAIL";
            detail = e.what();
            ++failures;
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%s] criterion %2d: %s (%.1fs)%s%s\n", verdict.c_str(), c.id, c.label, secs,
                    detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
    }
    if (failures == 0) {
        std::printf("acceptance: all %zu criteria passed\n", criteria.size());
    } else {
        std::printf("acceptance: %d criterion(s) FAILED\n", failures);
    }
    return failures;
}
