#pragma once

// Experiment orchestration: configuration, workspace layout, stage manifests
// and the gen-data -> finetune -> unlearn -> eval -> analyze -> report
// pipeline. Stages communicate only through files, re-running a completed
// stage with an unchanged config is a no-op, and per-(method, language) jobs
// are independent so they can run on a thread pool without changing outputs.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ulab/checkpoint.hpp"
#include "ulab/common.hpp"
#include "ulab/corpus.hpp"
#include "ulab/losses.hpp"
#include "ulab/metrics.hpp"
#include "ulab/model.hpp"
#include "ulab/stats.hpp"
#include "ulab/train.hpp"
#include "ulab/vocab.hpp"

namespace ulab {

constexpr const char* kToolVersion = "0.1.0";

namespace fs = std::filesystem;

// ----------------------------- configuration -----------------------------

struct MethodSpec {
    UnlearnConfig cfg;
    bool retain_all_languages{false};  // default: unlearning language only

    std::string name() const { return objective_name(cfg.objective); }
};

struct EvalSpec {
    std::vector<std::string> datasets;  // filled from task defaults when empty
    std::size_t max_examples{0};        // 0 = evaluate everything
    std::size_t perplexity_sentences{500};
};

struct ExperimentConfig {
    fs::path workspace;
    std::uint64_t seed{42};
    std::size_t jobs{1};
    std::string task{"data"};  // "data" | "concept"
    std::vector<LangSpec> languages;

    struct Corpus {
        std::size_t n_profiles{40};
        std::size_t facts_per_profile{5};
        double forget_fraction{0.1};
        std::size_t n_perturbed{3};
        std::size_t n_heldout_profiles{6};
        std::size_t n_world_entities{8};
        std::size_t n_mcq{60};
        std::size_t mcq_distractors{3};
    } corpus;

    struct ModelSpec {
        std::size_t embed_dim{64};
        std::size_t n_layers{2};
        std::size_t n_heads{1};
        std::size_t ff_mult{2};
        std::size_t context_len{96};
    } model;

    FinetuneConfig finetune{3e-3, 10, 8, 0};
    std::vector<MethodSpec> methods;
    EvalSpec eval;
    std::string distances{"synthetic"};     // or a directory of distance CSVs
    std::optional<fs::path> ingest_dir;     // pre-translated QA/MCQ JSONL files
    // heatmap entries: ratio of set means (default) or mean of per-example ratios
    std::string transfer_aggregation{"ratio_of_means"};

    void validate() const {
        if (workspace.empty()) throw config_error("config is missing the workspace path");
        if (task != "data" && task != "concept") {
            throw config_error("task must be \"data\" or \"concept\"");
        }
        if (languages.empty()) throw config_error("config lists no languages");
        std::set<std::string> ids;
        for (const LangSpec& l : languages) {
            l.validate();
            if (!ids.insert(l.id).second) throw config_error("duplicate language id: " + l.id);
        }
        if (methods.empty()) throw config_error("config lists no unlearning methods");
        for (const MethodSpec& m : methods) m.cfg.validate();
        if (!(corpus.forget_fraction > 0.0 && corpus.forget_fraction < 1.0)) {
            throw config_error("forget_fraction must lie strictly between 0 and 1");
        }
        if (transfer_aggregation != "ratio_of_means" && transfer_aggregation != "mean_of_ratios") {
            throw config_error("transfer_aggregation must be ratio_of_means or mean_of_ratios");
        }
        finetune.validate();
    }

    std::vector<std::string> language_ids() const {
        std::vector<std::string> out;
        for (const LangSpec& l : languages) out.push_back(l.id);
        return out;
    }

    std::vector<std::string> eval_datasets() const {
        if (!eval.datasets.empty()) return eval.datasets;
        if (task == "concept") return {"mcq", "general", "world_facts"};
        return {"forget", "retain", "real_authors", "world_facts", "general"};
    }
};

inline const char* experiment_config_schema() {
    return R"json({
  "workspace": "path (required unless --out is given)",
  "seed": "uint64, default 42",
  "jobs": "max concurrent unlearning/eval jobs, default 1",
  "task": "\"data\" (TOFU-style QA) or \"concept\" (stereotype MCQ), default \"data\"",
  "languages": [
    {
      "id": "short language id (required)",
      "lexicon_seed": "uint64, default 0",
      "shared_fraction": "fraction of lexemes shared with the base language, [0,1], default 1.0",
      "word_order": "permutation of [0,1,2,3], default identity",
      "script_offset": "letter-rotation applied to non-shared lexemes, default 0"
    }
  ],
  "corpus": {
    "n_profiles": 40, "facts_per_profile": 5, "forget_fraction": 0.1,
    "n_perturbed": 3, "n_heldout_profiles": 6, "n_world_entities": 8,
    "n_mcq": 60, "mcq_distractors": 3
  },
  "model": {"embed_dim": 64, "n_layers": 2, "n_heads": 1, "ff_mult": 2, "context_len": 96},
  "finetune": {"learning_rate": 0.003, "epochs": 10, "batch_size": 8},
  "methods": [
    {
      "objective": "graddiff | graddiff_kl | npo | concept",
      "alpha1": 1.0, "alpha2": 1.0, "alpha3": 1.0, "beta": 1.0,
      "learning_rate": "default 1e-3 (2.5e-4 for concept)",
      "epochs": "default 5 (1 for concept)",
      "batch_size": 8,
      "kl_dataset": "retain | general",
      "retain_scope": "language | all",
      "npo_retain_term": false
    }
  ],
  "eval": {
    "datasets": "subset of [forget, retain, real_authors, world_facts, general, mcq]; task default when omitted",
    "max_examples_per_dataset": "0 = all",
    "perplexity_sentences": 500
  },
  "distances": "\"synthetic\" or a directory containing syntactic.csv/inventory.csv[/phonological.csv]",
  "transfer_aggregation": "ratio_of_means (default) | mean_of_ratios",
  "ingest_dir": "optional directory of pre-built qa_<lang>.jsonl / mcq_<lang>.jsonl files"
})json";
}

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    ExperimentConfig cfg;
    try {
        if (j.contains("workspace")) cfg.workspace = j.at("workspace").get<std::string>();
        cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);
        cfg.jobs = detail::get_or<std::size_t>(j, "jobs", cfg.jobs);
        cfg.task = detail::get_or<std::string>(j, "task", cfg.task);

        for (const auto& lj : j.at("languages")) {
            LangSpec l;
            l.id = lj.at("id").get<std::string>();
            l.lexicon_seed = detail::get_or<std::uint64_t>(lj, "lexicon_seed", 0);
            l.shared_fraction = detail::get_or<double>(lj, "shared_fraction", 1.0);
            if (lj.contains("word_order")) {
                auto v = lj.at("word_order").get<std::vector<std::size_t>>();
                if (v.size() != 4) throw config_error("word_order must have 4 entries");
                std::copy(v.begin(), v.end(), l.word_order.begin());
            }
            l.script_offset = detail::get_or<int>(lj, "script_offset", 0);
            cfg.languages.push_back(std::move(l));
        }

        if (j.contains("corpus")) {
            const auto& c = j.at("corpus");
            cfg.corpus.n_profiles = detail::get_or<std::size_t>(c, "n_profiles", cfg.corpus.n_profiles);
            cfg.corpus.facts_per_profile =
                detail::get_or<std::size_t>(c, "facts_per_profile", cfg.corpus.facts_per_profile);
            cfg.corpus.forget_fraction =
                detail::get_or<double>(c, "forget_fraction", cfg.corpus.forget_fraction);
            cfg.corpus.n_perturbed = detail::get_or<std::size_t>(c, "n_perturbed", cfg.corpus.n_perturbed);
            cfg.corpus.n_heldout_profiles =
                detail::get_or<std::size_t>(c, "n_heldout_profiles", cfg.corpus.n_heldout_profiles);
            cfg.corpus.n_world_entities =
                detail::get_or<std::size_t>(c, "n_world_entities", cfg.corpus.n_world_entities);
            cfg.corpus.n_mcq = detail::get_or<std::size_t>(c, "n_mcq", cfg.corpus.n_mcq);
            cfg.corpus.mcq_distractors =
                detail::get_or<std::size_t>(c, "mcq_distractors", cfg.corpus.mcq_distractors);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            cfg.model.embed_dim = detail::get_or<std::size_t>(m, "embed_dim", cfg.model.embed_dim);
            cfg.model.n_layers = detail::get_or<std::size_t>(m, "n_layers", cfg.model.n_layers);
            cfg.model.n_heads = detail::get_or<std::size_t>(m, "n_heads", cfg.model.n_heads);
            cfg.model.ff_mult = detail::get_or<std::size_t>(m, "ff_mult", cfg.model.ff_mult);
            cfg.model.context_len = detail::get_or<std::size_t>(m, "context_len", cfg.model.context_len);
        }
        if (j.contains("finetune")) {
            const auto& f = j.at("finetune");
            cfg.finetune.learning_rate =
                detail::get_or<double>(f, "learning_rate", cfg.finetune.learning_rate);
            cfg.finetune.epochs = detail::get_or<std::size_t>(f, "epochs", cfg.finetune.epochs);
            cfg.finetune.batch_size = detail::get_or<std::size_t>(f, "batch_size", cfg.finetune.batch_size);
        }
        for (const auto& mj : j.at("methods")) {
            MethodSpec spec;
            spec.cfg = default_unlearn_config(objective_from_name(mj.at("objective").get<std::string>()));
            spec.cfg.alpha1 = detail::get_or<double>(mj, "alpha1", spec.cfg.alpha1);
            spec.cfg.alpha2 = detail::get_or<double>(mj, "alpha2", spec.cfg.alpha2);
            spec.cfg.alpha3 = detail::get_or<double>(mj, "alpha3", spec.cfg.alpha3);
            spec.cfg.beta = detail::get_or<double>(mj, "beta", spec.cfg.beta);
            spec.cfg.learning_rate = detail::get_or<double>(mj, "learning_rate", spec.cfg.learning_rate);
            spec.cfg.epochs = detail::get_or<std::size_t>(mj, "epochs", spec.cfg.epochs);
            spec.cfg.batch_size = detail::get_or<std::size_t>(mj, "batch_size", spec.cfg.batch_size);
            if (mj.contains("kl_dataset")) {
                std::string k = mj.at("kl_dataset").get<std::string>();
                if (k == "retain") {
                    spec.cfg.kl_dataset = KlDataset::retain;
                } else if (k == "general") {
                    spec.cfg.kl_dataset = KlDataset::general;
                } else {
                    throw config_error("kl_dataset must be retain or general");
                }
            }
            spec.cfg.npo_retain_term = detail::get_or<bool>(mj, "npo_retain_term", false);
            std::string scope = detail::get_or<std::string>(mj, "retain_scope", "language");
            if (scope != "language" && scope != "all") {
                throw config_error("retain_scope must be language or all");
            }
            spec.retain_all_languages = scope == "all";
            cfg.methods.push_back(std::move(spec));
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            cfg.eval.datasets =
                detail::get_or<std::vector<std::string>>(e, "datasets", cfg.eval.datasets);
            cfg.eval.max_examples =
                detail::get_or<std::size_t>(e, "max_examples_per_dataset", cfg.eval.max_examples);
            cfg.eval.perplexity_sentences =
                detail::get_or<std::size_t>(e, "perplexity_sentences", cfg.eval.perplexity_sentences);
        }
        cfg.distances = detail::get_or<std::string>(j, "distances", cfg.distances);
        if (j.contains("ingest_dir")) cfg.ingest_dir = fs::path(j.at("ingest_dir").get<std::string>());
        cfg.transfer_aggregation =
            detail::get_or<std::string>(j, "transfer_aggregation", cfg.transfer_aggregation);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("malformed experiment config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["workspace"] = cfg.workspace.string();
    j["seed"] = cfg.seed;
    j["jobs"] = cfg.jobs;
    j["task"] = cfg.task;
    j["languages"] = nlohmann::json::array();
    for (const LangSpec& l : cfg.languages) {
        j["languages"].push_back({{"id", l.id},
                                  {"lexicon_seed", l.lexicon_seed},
                                  {"shared_fraction", l.shared_fraction},
                                  {"word_order", l.word_order},
                                  {"script_offset", l.script_offset}});
    }
    j["corpus"] = {{"n_profiles", cfg.corpus.n_profiles},
                   {"facts_per_profile", cfg.corpus.facts_per_profile},
                   {"forget_fraction", cfg.corpus.forget_fraction},
                   {"n_perturbed", cfg.corpus.n_perturbed},
                   {"n_heldout_profiles", cfg.corpus.n_heldout_profiles},
                   {"n_world_entities", cfg.corpus.n_world_entities},
                   {"n_mcq", cfg.corpus.n_mcq},
                   {"mcq_distractors", cfg.corpus.mcq_distractors}};
    j["model"] = {{"embed_dim", cfg.model.embed_dim},
                  {"n_layers", cfg.model.n_layers},
                  {"n_heads", cfg.model.n_heads},
                  {"ff_mult", cfg.model.ff_mult},
                  {"context_len", cfg.model.context_len}};
    j["finetune"] = {{"learning_rate", cfg.finetune.learning_rate},
                     {"epochs", cfg.finetune.epochs},
                     {"batch_size", cfg.finetune.batch_size}};
    j["methods"] = nlohmann::json::array();
    for (const MethodSpec& m : cfg.methods) {
        j["methods"].push_back(
            {{"objective", objective_name(m.cfg.objective)},
             {"alpha1", m.cfg.alpha1},
             {"alpha2", m.cfg.alpha2},
             {"alpha3", m.cfg.alpha3},
             {"beta", m.cfg.beta},
             {"learning_rate", m.cfg.learning_rate},
             {"epochs", m.cfg.epochs},
             {"batch_size", m.cfg.batch_size},
             {"kl_dataset", m.cfg.kl_dataset == KlDataset::retain ? "retain" : "general"},
             {"retain_scope", m.retain_all_languages ? "all" : "language"},
             {"npo_retain_term", m.cfg.npo_retain_term}});
    }
    j["eval"] = {{"datasets", cfg.eval_datasets()},
                 {"max_examples_per_dataset", cfg.eval.max_examples},
                 {"perplexity_sentences", cfg.eval.perplexity_sentences}};
    j["distances"] = cfg.distances;
    if (cfg.ingest_dir) j["ingest_dir"] = cfg.ingest_dir->string();
    j["transfer_aggregation"] = cfg.transfer_aggregation;
    return j;
}

// Each stage is keyed by the config keys that can change its outputs, so
// tweaking a later stage (say, a method's learning rate) never invalidates
// the cached artifacts of earlier ones. The tool version is folded in so
// format changes invalidate stale workspaces.
inline std::string experiment_stage_hash(const std::string& stage, const ExperimentConfig& cfg) {
    static const std::map<std::string, std::vector<const char*>> stage_keys = {
        {"gen-data", {"seed", "languages", "corpus", "distances", "ingest_dir"}},
        {"finetune", {"seed", "languages", "corpus", "distances", "ingest_dir", "task", "model",
                      "finetune"}},
        {"unlearn", {"seed", "languages", "corpus", "distances", "ingest_dir", "task", "model",
                     "finetune", "methods"}},
        {"eval", {"seed", "languages", "corpus", "distances", "ingest_dir", "task", "model",
                  "finetune", "methods", "eval"}},
        {"analyze", {"seed", "languages", "corpus", "distances", "ingest_dir", "task", "model",
                     "finetune", "methods", "eval", "transfer_aggregation"}},
        {"report", {"seed", "languages", "corpus", "distances", "ingest_dir", "task", "model",
                    "finetune", "methods", "eval", "transfer_aggregation"}},
    };
    auto it = stage_keys.find(stage);
    if (it == stage_keys.end()) throw config_error("unknown stage: " + stage);
    nlohmann::json full = experiment_config_to_json(cfg);
    nlohmann::json j;
    for (const char* key : it->second) {
        if (full.contains(key)) j[key] = full.at(key);
    }
    std::uint64_t h = fnv1a64(j.dump());
    h = fnv1a64(stage, h);
    h = fnv1a64(kToolVersion, h);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ----------------------------- workspace -----------------------------

struct Workspace {
    fs::path root;

    fs::path data() const { return root / "data"; }
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path metrics() const { return root / "metrics"; }
    fs::path analysis() const { return root / "analysis"; }
    fs::path report() const { return root / "report"; }
    fs::path manifests() const { return root / "manifests"; }

    fs::path qa_file(const std::string& lang) const { return data() / ("qa_" + lang + ".jsonl"); }
    fs::path mcq_file(const std::string& lang) const { return data() / ("mcq_" + lang + ".jsonl"); }
    fs::path vocab_file() const { return data() / "vocab.json"; }
    fs::path checkpoint_file(const std::string& model_id) const {
        return checkpoints() / (model_id + ".ulck");
    }
    fs::path history_file(const std::string& model_id) const {
        return checkpoints() / ("history_" + model_id + ".csv");
    }
    fs::path metrics_file(const std::string& model_id) const {
        return metrics() / (model_id + ".metrics.jsonl");
    }
    fs::path manifest_file(const std::string& stage) const {
        return manifests() / (stage + ".json");
    }
};

inline std::string unlearned_model_id(const std::string& method, const std::string& lang) {
    return "unlearned_" + method + "_" + lang;
}

inline void save_vocab_json(const Vocab& vocab, const fs::path& path) {
    nlohmann::json j = {{"version", 1}, {"tokens", vocab.tokens()}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write vocabulary: " + path.string());
    out << j.dump(2) << '\n';
}

inline Vocab load_vocab_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open vocabulary: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        return Vocab::from_tokens(j.at("tokens").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed vocabulary file: " + std::string(e.what()));
    }
}

// ----------------------------- manifests -----------------------------

struct RunManifest {
    std::string stage;
    std::string config_hash;
    std::string tool_version{kToolVersion};
    std::string created_at;
    std::map<std::string, std::string> artifacts;  // workspace-relative path -> digest
};

inline std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot digest missing file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return std::string(buf);
}

inline void write_manifest(const Workspace& ws, const std::string& stage,
                           const std::string& config_hash, const std::vector<fs::path>& artifacts) {
    RunManifest m;
    m.stage = stage;
    m.config_hash = config_hash;
    auto now = std::chrono::system_clock::now().time_since_epoch();
    m.created_at = std::to_string(std::chrono::duration_cast<std::chrono::seconds>(now).count());
    for (const fs::path& p : artifacts) {
        m.artifacts[fs::relative(p, ws.root).generic_string()] = file_digest(p);
    }
    nlohmann::json j = {{"stage", m.stage},
                        {"config_hash", m.config_hash},
                        {"tool_version", m.tool_version},
                        {"created_at", m.created_at},
                        {"artifacts", m.artifacts}};
    fs::create_directories(ws.manifests());
    std::ofstream out(ws.manifest_file(stage), std::ios::trunc);
    if (!out) throw io_error("cannot write manifest for stage " + stage);
    out << j.dump(2) << '\n';
}

inline std::optional<RunManifest> read_manifest(const Workspace& ws, const std::string& stage) {
    fs::path path = ws.manifest_file(stage);
    if (!fs::exists(path)) return std::nullopt;
    std::ifstream in(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
    RunManifest m;
    m.stage = j.value("stage", "");
    m.config_hash = j.value("config_hash", "");
    m.tool_version = j.value("tool_version", "");
    m.created_at = j.value("created_at", "");
    if (j.contains("artifacts")) {
        m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    }
    return m;
}

inline bool stage_up_to_date(const Workspace& ws, const std::string& stage,
                             const std::string& config_hash) {
    std::optional<RunManifest> m = read_manifest(ws, stage);
    if (!m || m->config_hash != config_hash) return false;
    for (const auto& [rel, digest] : m->artifacts) {
        if (!fs::exists(ws.root / rel)) return false;
    }
    return true;
}

// ----------------------------- data bundles -----------------------------

struct LanguageData {
    std::string id;
    std::vector<QAExample> forget;
    std::vector<QAExample> retain;
    std::vector<QAExample> real_authors;
    std::vector<QAExample> world_facts;
    std::vector<MCQExample> mcqs;
    std::vector<std::string> general;  // declarative sentences
};

struct DataBundle {
    std::vector<LanguageData> languages;
    Vocab vocab;

    const LanguageData& language(const std::string& id) const {
        for (const LanguageData& l : languages) {
            if (l.id == id) return l;
        }
        throw config_error("no data for language: " + id);
    }
};

inline DataBundle load_data_bundle(const Workspace& ws, const std::vector<std::string>& lang_ids) {
    DataBundle bundle;
    bundle.vocab = load_vocab_json(ws.vocab_file());
    for (const std::string& id : lang_ids) {
        LanguageData lang;
        lang.id = id;
        for (QAExample& qa : load_qa_jsonl(ws.qa_file(id))) {
            switch (qa.split) {
                case Split::forget: lang.forget.push_back(std::move(qa)); break;
                case Split::retain: lang.retain.push_back(std::move(qa)); break;
                case Split::real_authors: lang.real_authors.push_back(std::move(qa)); break;
                case Split::world_facts: lang.world_facts.push_back(std::move(qa)); break;
            }
        }
        if (fs::exists(ws.mcq_file(id))) lang.mcqs = load_mcq_jsonl(ws.mcq_file(id));
        lang.general = general_sentences(lang.world_facts);
        bundle.languages.push_back(std::move(lang));
    }
    return bundle;
}

inline std::vector<ScoredSequence> qa_sequences(const Vocab& vocab,
                                                const std::vector<QAExample>& examples) {
    std::vector<ScoredSequence> out;
    out.reserve(examples.size());
    for (const QAExample& qa : examples) out.push_back(make_qa_sequence(vocab, qa.question, qa.answer));
    return out;
}

inline std::vector<ScoredSequence> text_sequences(const Vocab& vocab,
                                                  const std::vector<std::string>& sentences) {
    std::vector<ScoredSequence> out;
    out.reserve(sentences.size());
    for (const std::string& s : sentences) out.push_back(make_text_sequence(vocab, s));
    return out;
}

inline std::vector<ScoredSequence> mcq_option_sequences(const Vocab& vocab,
                                                        const std::vector<MCQExample>& mcqs,
                                                        bool use_unknown) {
    std::vector<ScoredSequence> out;
    out.reserve(mcqs.size());
    for (const MCQExample& m : mcqs) {
        std::size_t idx = use_unknown ? m.unknown_index : m.stereotype_index;
        out.push_back(make_qa_sequence(vocab, m.question, m.options[idx]));
    }
    return out;
}

// ----------------------------- job pool -----------------------------

// Runs the jobs on up to `jobs` threads. Each job owns its model and writes
// only its own files, so ordering cannot affect the artifacts.
inline void run_jobs(std::size_t jobs, const std::vector<std::function<void()>>& work) {
    if (work.empty()) return;
    std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, work.size()));
    if (n_threads == 1) {
        for (const auto& job : work) job();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::vector<std::string> errors;
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) {
        threads.emplace_back([&] {
            while (true) {
                std::size_t i = next.fetch_add(1);
                if (i >= work.size()) return;
                try {
                    work[i]();
                } catch (const std::exception& e) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    errors.emplace_back(e.what());
                }
            }
        });
    }
    for (std::thread& t : threads) t.join();
    if (!errors.empty()) throw error("job failed: " + errors.front());
}

// ----------------------------- stages -----------------------------

inline std::vector<fs::path> stage_gen_data(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    fs::create_directories(ws.data());
    std::vector<fs::path> artifacts;

    std::uint64_t gen_seed = derive_seed(cfg.seed, "gen-data");
    std::vector<QAExample> all_qa;
    std::vector<MCQExample> all_mcq;

    if (cfg.ingest_dir) {
        // Pre-translated data: validate and re-emit in canonical order.
        for (const LangSpec& lang : cfg.languages) {
            fs::path qa_src = *cfg.ingest_dir / ("qa_" + lang.id + ".jsonl");
            std::vector<QAExample> qa = load_qa_jsonl(qa_src);
            save_qa_jsonl(qa, ws.qa_file(lang.id));
            artifacts.push_back(ws.qa_file(lang.id));
            for (QAExample& e : qa) all_qa.push_back(std::move(e));

            fs::path mcq_src = *cfg.ingest_dir / ("mcq_" + lang.id + ".jsonl");
            if (fs::exists(mcq_src)) {
                std::vector<MCQExample> mcq = load_mcq_jsonl(mcq_src);
                save_mcq_jsonl(mcq, ws.mcq_file(lang.id));
                artifacts.push_back(ws.mcq_file(lang.id));
                for (MCQExample& e : mcq) all_mcq.push_back(std::move(e));
            }
        }
    } else {
        FactSet profiles =
            generate_profiles(cfg.corpus.n_profiles, cfg.corpus.facts_per_profile,
                              derive_seed(gen_seed, "profiles"));
        FactSet heldout = generate_profiles(
            cfg.corpus.n_heldout_profiles, cfg.corpus.facts_per_profile,
            derive_seed(gen_seed, "heldout"), static_cast<std::int64_t>(cfg.corpus.n_profiles));
        FactSet world =
            generate_world_facts(cfg.corpus.n_world_entities, derive_seed(gen_seed, "world"));
        std::vector<StereoPair> pairs = default_stereo_pairs(cfg.corpus.n_mcq);

        for (const LangSpec& lang : cfg.languages) {
            std::vector<QAExample> profile_qa = render_language(
                profiles, lang, derive_seed(gen_seed, "render"), cfg.corpus.n_perturbed);
            auto [forget, retain] = split_forget_retain(profile_qa, cfg.corpus.forget_fraction,
                                                        derive_seed(gen_seed, "split"));
            std::vector<QAExample> qa = std::move(forget);
            qa.insert(qa.end(), retain.begin(), retain.end());
            for (QAExample& e :
                 render_language(heldout, lang, derive_seed(gen_seed, "render"),
                                 cfg.corpus.n_perturbed, Split::real_authors)) {
                qa.push_back(std::move(e));
            }
            for (QAExample& e :
                 render_language(world, lang, derive_seed(gen_seed, "render"),
                                 cfg.corpus.n_perturbed, Split::world_facts)) {
                qa.push_back(std::move(e));
            }
            save_qa_jsonl(qa, ws.qa_file(lang.id));
            artifacts.push_back(ws.qa_file(lang.id));
            for (QAExample& e : qa) all_qa.push_back(std::move(e));

            std::vector<MCQExample> mcq = generate_mcq(pairs, lang, cfg.corpus.mcq_distractors,
                                                       derive_seed(gen_seed, "mcq"));
            save_mcq_jsonl(mcq, ws.mcq_file(lang.id));
            artifacts.push_back(ws.mcq_file(lang.id));
            for (MCQExample& e : mcq) all_mcq.push_back(std::move(e));
        }
    }

    if (cfg.distances == "synthetic") {
        if (cfg.languages.size() >= 2) {
            DistanceMatrices d = synthetic_distances(cfg.languages);
            save_distances(d, ws.data());
            artifacts.push_back(ws.data() / "syntactic.csv");
            artifacts.push_back(ws.data() / "inventory.csv");
        }
    } else {
        DistanceMatrices d = load_distances(fs::path(cfg.distances));
        std::vector<std::string> expected = cfg.language_ids();
        if (d.languages != expected) {
            throw config_error("ingested distance matrices do not match the config languages");
        }
        save_distances(d, ws.data());
        artifacts.push_back(ws.data() / "syntactic.csv");
        artifacts.push_back(ws.data() / "inventory.csv");
        if (d.phonological) artifacts.push_back(ws.data() / "phonological.csv");
    }

    Vocab vocab = build_vocab(all_qa, all_mcq);
    save_vocab_json(vocab, ws.vocab_file());
    artifacts.push_back(ws.vocab_file());
    return artifacts;
}

namespace detail {

inline ModelConfig make_model_config(const ExperimentConfig& cfg, const Vocab& vocab) {
    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.embed_dim = cfg.model.embed_dim;
    mc.n_layers = cfg.model.n_layers;
    mc.n_heads = cfg.model.n_heads;
    mc.ff_mult = cfg.model.ff_mult;
    mc.context_len = cfg.model.context_len;
    mc.init_seed = derive_seed(cfg.seed, "init");
    mc.validate();
    return mc;
}

// Longest framed sequence over everything the pipeline may score: answers,
// paraphrases, perturbations, MCQ options and general sentences.
inline std::size_t max_sequence_tokens(const DataBundle& data) {
    std::size_t longest = 0;
    auto visit_qa = [&](const std::vector<QAExample>& examples) {
        for (const QAExample& qa : examples) {
            std::size_t q = data.vocab.encode(qa.question).size();
            std::size_t a = data.vocab.encode(qa.answer).size();
            a = std::max(a, data.vocab.encode(qa.paraphrased_answer).size());
            for (const std::string& p : qa.perturbed_answers) {
                a = std::max(a, data.vocab.encode(p).size());
            }
            longest = std::max(longest, q + a + 2);
        }
    };
    for (const LanguageData& lang : data.languages) {
        visit_qa(lang.forget);
        visit_qa(lang.retain);
        visit_qa(lang.real_authors);
        visit_qa(lang.world_facts);
        for (const MCQExample& m : lang.mcqs) {
            std::size_t q = data.vocab.encode(m.question).size();
            for (const std::string& o : m.options) {
                longest = std::max(longest, q + data.vocab.encode(o).size() + 2);
            }
        }
        for (const std::string& s : lang.general) {
            longest = std::max(longest, data.vocab.encode(s).size() + 1);
        }
    }
    return longest;
}

inline void check_context_fits(const ModelConfig& mc, const DataBundle& data) {
    std::size_t longest = max_sequence_tokens(data);
    if (longest > mc.context_len) {
        throw config_error("context_len " + std::to_string(mc.context_len) +
                           " is smaller than the longest dataset sequence (" +
                           std::to_string(longest) + " tokens)");
    }
}

// Training pools per task. Both baselines also see the utility-analog sets
// (real-authors, world-facts): the desk-scale stand-in for general knowledge
// a pretrained model would bring, which grounds the utility metrics and the
// general-corpus perplexity. The finetuned/retain contrast is exactly the
// forget material.
struct FinetunePools {
    std::vector<ScoredSequence> full;
    std::vector<ScoredSequence> retain_only;
};

inline FinetunePools finetune_pools(const ExperimentConfig& cfg, const DataBundle& data) {
    FinetunePools pools;
    auto both = [&](const std::vector<ScoredSequence>& seqs) {
        for (const auto& s : seqs) {
            pools.full.push_back(s);
            pools.retain_only.push_back(s);
        }
    };
    for (const LanguageData& lang : data.languages) {
        if (cfg.task == "data") {
            for (const auto& s : qa_sequences(data.vocab, lang.forget)) pools.full.push_back(s);
            both(qa_sequences(data.vocab, lang.retain));
            both(qa_sequences(data.vocab, lang.real_authors));
            both(qa_sequences(data.vocab, lang.world_facts));
        } else {
            for (const auto& s : mcq_option_sequences(data.vocab, lang.mcqs, false)) {
                pools.full.push_back(s);
            }
            both(qa_sequences(data.vocab, lang.world_facts));
        }
    }
    return pools;
}

}  // namespace detail

inline std::vector<fs::path> stage_finetune(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    if (!fs::exists(ws.vocab_file())) {
        throw config_error("finetune requires gen-data artifacts (missing " +
                           ws.vocab_file().string() + ")");
    }
    fs::create_directories(ws.checkpoints());
    DataBundle data = load_data_bundle(ws, cfg.language_ids());
    ModelConfig mc = detail::make_model_config(cfg, data.vocab);
    detail::check_context_fits(mc, data);
    detail::FinetunePools pools = detail::finetune_pools(cfg, data);

    std::vector<fs::path> artifacts;
    auto train_and_save = [&](const std::string& model_id,
                              const std::vector<ScoredSequence>& pool, const char* seed_tag) {
        Model<float> model = init_model<float>(mc);
        FinetuneConfig ft = cfg.finetune;
        ft.seed = derive_seed(cfg.seed, seed_tag);
        TrainHistory history = run_finetune(model, pool, ft);
        save_checkpoint(model, data.vocab, ws.checkpoint_file(model_id));
        std::ofstream hist(ws.history_file(model_id), std::ios::trunc);
        history.write_csv(hist);
        artifacts.push_back(ws.checkpoint_file(model_id));
        artifacts.push_back(ws.history_file(model_id));
        if (history.aborted) {
            throw training_error("finetuning diverged at step " +
                                 std::to_string(history.abort_step) +
                                 " (last good checkpoint saved)",
                                 history.abort_step);
        }
    };
    train_and_save("finetuned", pools.full, "finetune");
    train_and_save("retain", pools.retain_only, "finetune-retain");
    return artifacts;
}

inline std::vector<fs::path> stage_unlearn(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    if (!fs::exists(ws.checkpoint_file("finetuned"))) {
        throw config_error("unlearn requires the finetuned checkpoint (run finetune first)");
    }
    if (!fs::exists(ws.vocab_file())) {
        throw config_error("unlearn requires gen-data artifacts (missing " +
                           ws.vocab_file().string() + ")");
    }
    DataBundle data = load_data_bundle(ws, cfg.language_ids());

    struct Job {
        MethodSpec method;
        std::string lang;
    };
    std::vector<Job> jobs;
    for (const MethodSpec& m : cfg.methods) {
        for (const std::string& lang : cfg.language_ids()) jobs.push_back({m, lang});
    }

    std::vector<fs::path> artifacts;
    std::mutex artifacts_mutex;
    std::vector<std::string> aborted;

    std::vector<std::function<void()>> work;
    for (const Job& job : jobs) {
        work.push_back([&, job] {
            Checkpoint base = load_checkpoint(ws.checkpoint_file("finetuned"));
            Model<float> model = base.model;
            Model<float> reference = base.model;
            reference.freeze();

            const LanguageData& lang = data.language(job.lang);
            std::vector<ScoredSequence> forget, retain, kl_data;
            if (job.method.cfg.objective == Objective::concept_) {
                forget = mcq_option_sequences(data.vocab, lang.mcqs, false);
                retain = mcq_option_sequences(data.vocab, lang.mcqs, true);
                kl_data = text_sequences(data.vocab, lang.general);
            } else {
                forget = qa_sequences(data.vocab, lang.forget);
                if (job.method.retain_all_languages) {
                    for (const LanguageData& l : data.languages) {
                        for (const auto& s : qa_sequences(data.vocab, l.retain)) {
                            retain.push_back(s);
                        }
                    }
                } else {
                    retain = qa_sequences(data.vocab, lang.retain);
                }
                kl_data = job.method.cfg.kl_dataset == KlDataset::retain
                              ? retain
                              : text_sequences(data.vocab, lang.general);
            }

            UnlearnConfig ucfg = job.method.cfg;
            ucfg.seed = derive_seed(cfg.seed, "unlearn", job.method.name(), job.lang);
            TrainHistory history = run_unlearn(model, reference, ucfg, forget, retain, kl_data);

            std::string model_id = unlearned_model_id(job.method.name(), job.lang);
            save_checkpoint(model, data.vocab, ws.checkpoint_file(model_id));
            std::ofstream hist(ws.history_file(model_id), std::ios::trunc);
            history.write_csv(hist);

            std::lock_guard<std::mutex> lock(artifacts_mutex);
            artifacts.push_back(ws.checkpoint_file(model_id));
            artifacts.push_back(ws.history_file(model_id));
            if (history.aborted) {
                aborted.push_back(model_id + " at step " + std::to_string(history.abort_step));
            }
        });
    }
    run_jobs(cfg.jobs, work);
    if (!aborted.empty()) {
        throw training_error("unlearning diverged: " + aborted.front() +
                             " (last good checkpoint saved)",
                             0);
    }
    std::sort(artifacts.begin(), artifacts.end());
    return artifacts;
}

inline std::vector<fs::path> stage_eval(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    if (!fs::exists(ws.vocab_file())) {
        throw config_error("eval requires gen-data artifacts (missing " +
                           ws.vocab_file().string() + ")");
    }
    DataBundle data = load_data_bundle(ws, cfg.language_ids());
    fs::create_directories(ws.metrics());

    std::vector<std::string> model_ids = {"finetuned", "retain"};
    for (const MethodSpec& m : cfg.methods) {
        for (const std::string& lang : cfg.language_ids()) {
            model_ids.push_back(unlearned_model_id(m.name(), lang));
        }
    }
    for (const std::string& id : model_ids) {
        if (!fs::exists(ws.checkpoint_file(id))) {
            throw config_error("eval requires checkpoint " + ws.checkpoint_file(id).string());
        }
    }

    std::vector<std::string> datasets = cfg.eval_datasets();
    auto capped = [&](const std::vector<QAExample>& v) {
        if (cfg.eval.max_examples == 0 || v.size() <= cfg.eval.max_examples) return v;
        return std::vector<QAExample>(v.begin(),
                                      v.begin() + static_cast<std::ptrdiff_t>(cfg.eval.max_examples));
    };

    std::vector<fs::path> artifacts;
    std::mutex artifacts_mutex;
    std::vector<std::function<void()>> work;
    for (const std::string& model_id : model_ids) {
        work.push_back([&, model_id] {
            Checkpoint ck = load_checkpoint(ws.checkpoint_file(model_id));
            const Model<float>& model = ck.model;
            std::vector<nlohmann::json> lines;

            for (const LanguageData& lang : data.languages) {
                std::map<std::string, MetricSummary> qa_summaries;
                std::map<std::string, std::vector<double>> qa_probs;
                for (const std::string& ds : datasets) {
                    if (ds == "general" || ds == "mcq") continue;
                    const std::vector<QAExample>* src = nullptr;
                    if (ds == "forget") src = &lang.forget;
                    if (ds == "retain") src = &lang.retain;
                    if (ds == "real_authors") src = &lang.real_authors;
                    if (ds == "world_facts") src = &lang.world_facts;
                    if (src == nullptr) throw config_error("unknown eval dataset: " + ds);
                    if (src->empty()) continue;
                    std::vector<QAExample> subset = capped(*src);
                    qa_probs[ds].clear();
                    qa_summaries[ds] =
                        dataset_metrics(model, data.vocab, subset, ds, &qa_probs[ds]);
                }

                std::optional<double> utility;
                if (qa_summaries.count("retain") && qa_summaries.count("real_authors") &&
                    qa_summaries.count("world_facts")) {
                    utility = model_utility({qa_summaries["retain"], qa_summaries["real_authors"],
                                             qa_summaries["world_facts"]});
                }
                for (const auto& [ds, summary] : qa_summaries) {
                    EvalRecord r;
                    r.model_id = model_id;
                    r.language = lang.id;
                    r.dataset = ds;
                    r.n = summary.n_examples;
                    r.mean_prob = summary.mean_normalized_prob;
                    r.mean_truth_ratio = summary.mean_truth_ratio;
                    r.probs = qa_probs[ds];
                    if (ds == "retain" && utility) r.utility = utility;
                    lines.push_back(eval_record_to_json(r));
                }

                if (std::count(datasets.begin(), datasets.end(), "general") > 0 &&
                    !lang.general.empty()) {
                    std::vector<std::string> sentences = lang.general;
                    if (sentences.size() > cfg.eval.perplexity_sentences) {
                        Rng rng(derive_seed(cfg.seed, "ppl-sample", lang.id));
                        rng.shuffle(sentences);
                        sentences.resize(cfg.eval.perplexity_sentences);
                    }
                    EvalRecord r;
                    r.model_id = model_id;
                    r.language = lang.id;
                    r.dataset = "general";
                    r.n = sentences.size();
                    r.perplexity = perplexity_text(model, data.vocab, sentences);
                    lines.push_back(eval_record_to_json(r));
                }
                if (std::count(datasets.begin(), datasets.end(), "mcq") > 0 && !lang.mcqs.empty()) {
                    EvalRecord r;
                    r.model_id = model_id;
                    r.language = lang.id;
                    r.dataset = "mcq";
                    r.n = lang.mcqs.size();
                    r.mcq = mcq_rates(model, data.vocab, lang.mcqs);
                    lines.push_back(eval_record_to_json(r));
                }
            }

            std::ofstream out(ws.metrics_file(model_id), std::ios::trunc);
            if (!out) throw io_error("cannot write metrics for " + model_id);
            for (const nlohmann::json& j : lines) out << j.dump() << '\n';
            out.close();
            std::lock_guard<std::mutex> lock(artifacts_mutex);
            artifacts.push_back(ws.metrics_file(model_id));
        });
    }
    run_jobs(cfg.jobs, work);
    std::sort(artifacts.begin(), artifacts.end());
    return artifacts;
}

// ----------------------------- analyze -----------------------------

namespace detail {

struct MetricsIndex {
    // model_id -> language -> dataset -> record
    std::map<std::string, std::map<std::string, std::map<std::string, EvalRecord>>> records;

    const EvalRecord* find(const std::string& model, const std::string& lang,
                           const std::string& dataset) const {
        auto m = records.find(model);
        if (m == records.end()) return nullptr;
        auto l = m->second.find(lang);
        if (l == m->second.end()) return nullptr;
        auto d = l->second.find(dataset);
        if (d == l->second.end()) return nullptr;
        return &d->second;
    }

    const EvalRecord& require(const std::string& model, const std::string& lang,
                              const std::string& dataset) const {
        const EvalRecord* r = find(model, lang, dataset);
        if (r == nullptr) {
            throw data_error("missing eval record: " + model + "/" + lang + "/" + dataset);
        }
        return *r;
    }
};

inline MetricsIndex load_metrics_index(const Workspace& ws,
                                       const std::vector<std::string>& model_ids) {
    MetricsIndex idx;
    for (const std::string& id : model_ids) {
        std::ifstream in(ws.metrics_file(id));
        if (!in) throw config_error("analyze requires metrics for " + id + " (run eval first)");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            EvalRecord r = eval_record_from_json(nlohmann::json::parse(line));
            idx.records[r.model_id][r.language][r.dataset] = r;
        }
    }
    return idx;
}

inline TransferMatrix build_transfer(const MetricsIndex& idx,
                                     const std::vector<std::string>& langs,
                                     const std::string& method, const std::string& set_tag,
                                     const std::string& aggregation) {
    if (aggregation == "mean_of_ratios") {
        std::vector<std::vector<std::vector<double>>> unlearned(langs.size());
        std::vector<std::vector<double>> baseline(langs.size());
        for (std::size_t j = 0; j < langs.size(); ++j) {
            const EvalRecord& b = idx.require("finetuned", langs[j], set_tag);
            if (!b.probs) throw data_error("baseline record lacks per-example probabilities");
            baseline[j] = *b.probs;
        }
        for (std::size_t i = 0; i < langs.size(); ++i) {
            unlearned[i].resize(langs.size());
            for (std::size_t j = 0; j < langs.size(); ++j) {
                const EvalRecord& r =
                    idx.require(unlearned_model_id(method, langs[i]), langs[j], set_tag);
                if (!r.probs) throw data_error("unlearned record lacks per-example probabilities");
                unlearned[i][j] = *r.probs;
            }
        }
        return transfer_matrix_from_example_probs(langs, unlearned, baseline, set_tag, method);
    }
    std::vector<std::vector<double>> unlearned(langs.size());
    std::vector<double> baseline(langs.size());
    for (std::size_t j = 0; j < langs.size(); ++j) {
        const EvalRecord& b = idx.require("finetuned", langs[j], set_tag);
        if (!b.mean_prob) throw data_error("baseline record lacks mean_prob");
        baseline[j] = *b.mean_prob;
    }
    for (std::size_t i = 0; i < langs.size(); ++i) {
        unlearned[i].resize(langs.size());
        for (std::size_t j = 0; j < langs.size(); ++j) {
            const EvalRecord& r =
                idx.require(unlearned_model_id(method, langs[i]), langs[j], set_tag);
            if (!r.mean_prob) throw data_error("unlearned record lacks mean_prob");
            unlearned[i][j] = *r.mean_prob;
        }
    }
    return transfer_matrix_from_means(langs, unlearned, baseline, set_tag, method);
}

}  // namespace detail

inline std::vector<fs::path> stage_analyze(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    if (cfg.languages.size() < 2) {
        throw config_error("analysis stages require at least 2 languages");
    }
    fs::create_directories(ws.analysis());
    std::vector<std::string> langs = cfg.language_ids();

    std::vector<std::string> model_ids = {"finetuned", "retain"};
    for (const MethodSpec& m : cfg.methods) {
        for (const std::string& lang : langs) {
            model_ids.push_back(unlearned_model_id(m.name(), lang));
        }
    }
    detail::MetricsIndex idx = detail::load_metrics_index(ws, model_ids);

    std::vector<fs::path> artifacts;
    nlohmann::json report;
    report["languages"] = langs;
    report["task"] = cfg.task;

    std::map<std::string, TransferMatrix> forget_by_method;
    if (cfg.task == "data") {
        for (const MethodSpec& m : cfg.methods) {
            for (const std::string& tag : {std::string("forget"), std::string("retain")}) {
                TransferMatrix t =
                    detail::build_transfer(idx, langs, m.name(), tag, cfg.transfer_aggregation);
                fs::path out = ws.analysis() / ("transfer_" + tag + "_" + m.name() + ".csv");
                save_transfer_csv(t, out);
                artifacts.push_back(out);
                if (tag == "forget") forget_by_method[m.name()] = t;
            }
        }

        report["method_agreement"] = nlohmann::json::array();
        for (auto a = forget_by_method.begin(); a != forget_by_method.end(); ++a) {
            for (auto b = std::next(a); b != forget_by_method.end(); ++b) {
                CorrelationResult r = method_agreement(a->second, b->second);
                report["method_agreement"].push_back(
                    {{"a", a->first}, {"b", b->first}, {"r", r.r}, {"p", r.p}});
            }
        }

        fs::path dist_dir = ws.data();
        // K^2 - K off-diagonal pairs must satisfy pearson's n >= 3
        if (langs.size() >= 3 && fs::exists(dist_dir / "syntactic.csv")) {
            DistanceMatrices d = load_distances(dist_dir);
            std::vector<std::string> kinds = {"syntactic", "inventory"};
            if (d.phonological) kinds.push_back("phonological");

            nlohmann::json by_method;
            for (const auto& [method, transfer] : forget_by_method) {
                for (const std::string& kind : kinds) {
                    CorrelationResult r = distance_correlation(transfer, d, kind);
                    by_method[method][kind] = {{"r", r.r}, {"p", r.p}, {"n", r.n}};
                }
            }
            // documented shape: primary method (the first configured one)
            std::string primary = cfg.methods.front().name();
            report["distance_correlation"] = by_method.contains(primary)
                                                 ? by_method[primary]
                                                 : by_method.begin().value();
            report["distance_correlation_by_method"] = by_method;
        }
    } else {
        // concept task: stereotype / unknown selection rates per model
        nlohmann::json rates = nlohmann::json::array();
        for (const std::string& model_id : model_ids) {
            for (const std::string& lang : langs) {
                const EvalRecord* r = idx.find(model_id, lang, "mcq");
                if (r == nullptr || !r->mcq) continue;
                rates.push_back({{"model", model_id},
                                 {"language", lang},
                                 {"biased", r->mcq->biased_rate},
                                 {"unknown", r->mcq->unknown_rate},
                                 {"other", r->mcq->other_rate}});
            }
        }
        report["mcq_rates"] = rates;
    }

    report["perplexity_summary"] = nlohmann::json::array();
    bool have_ppl = idx.find("finetuned", langs.front(), "general") != nullptr;
    if (have_ppl) {
        std::map<std::string, double> before;
        for (const std::string& lang : langs) {
            before[lang] = *idx.require("finetuned", lang, "general").perplexity;
        }
        for (const MethodSpec& m : cfg.methods) {
            for (const std::string& ul : langs) {
                std::map<std::string, double> after;
                for (const std::string& lang : langs) {
                    after[lang] =
                        *idx.require(unlearned_model_id(m.name(), ul), lang, "general").perplexity;
                }
                PerplexityDeltaSummary s = perplexity_delta_summary(before, after);
                nlohmann::json deltas;
                for (const auto& [lang, d] : s.deltas) deltas[lang] = d;
                report["perplexity_summary"].push_back({{"method", m.name()},
                                                        {"unlearned_language", ul},
                                                        {"avg_delta", s.avg_delta},
                                                        {"max_delta_language", s.max_delta_language},
                                                        {"max_delta", s.max_delta},
                                                        {"deltas", deltas}});
            }
        }
    }

    fs::path report_path = ws.analysis() / "report.json";
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw io_error("cannot write analysis report");
    out << report.dump(2) << '\n';
    out.close();
    artifacts.push_back(report_path);
    std::sort(artifacts.begin(), artifacts.end());
    return artifacts;
}

namespace detail {

inline std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), std::abs(v) >= 1e-3 || v == 0.0 ? "%.4f" : "%.3g", v);
    return std::string(buf);
}

}  // namespace detail

inline std::vector<fs::path> stage_report(const ExperimentConfig& cfg) {
    Workspace ws{cfg.workspace};
    fs::path report_json = ws.analysis() / "report.json";
    if (!fs::exists(report_json)) {
        throw config_error("report requires analysis artifacts (run analyze first)");
    }
    fs::create_directories(ws.report());
    nlohmann::json report;
    {
        std::ifstream in(report_json);
        in >> report;
    }

    std::vector<fs::path> artifacts;
    // heatmap CSVs next to the summary for plotting tools
    for (const auto& entry : fs::directory_iterator(ws.analysis())) {
        if (entry.path().extension() == ".csv") {
            fs::path dst = ws.report() / ("heatmap_" + entry.path().filename().string());
            fs::copy_file(entry.path(), dst, fs::copy_options::overwrite_existing);
            artifacts.push_back(dst);
        }
    }

    fs::path summary_path = ws.report() / "summary.md";
    std::ofstream out(summary_path, std::ios::trunc);
    if (!out) throw io_error("cannot write report summary");
    out << "# Unlearning experiment summary\n\n";
    out << "Languages:";
    for (const auto& l : report["languages"]) out << ' ' << l.get<std::string>();
    out << "\n\n";

    if (report.contains("method_agreement") && !report["method_agreement"].empty()) {
        out << "## Method agreement (forget-set heatmaps)\n\n";
        out << "| Method A | Method B | r | p |\n|---|---|---|---|\n";
        for (const auto& e : report["method_agreement"]) {
            out << "| " << e["a"].get<std::string>() << " | " << e["b"].get<std::string>() << " | "
                << detail::fmt_short(e["r"].get<double>()) << " | "
                << detail::fmt_short(e["p"].get<double>()) << " |\n";
        }
        out << '\n';
    }

    if (report.contains("distance_correlation_by_method")) {
        out << "## Correlation between linguistic distances and forget ratios\n\n";
        const auto& by_method = report["distance_correlation_by_method"];
        std::vector<std::string> methods;
        for (auto it = by_method.begin(); it != by_method.end(); ++it) methods.push_back(it.key());
        out << "| Distance type |";
        for (const auto& m : methods) out << ' ' << m << " |";
        out << "\n|---|";
        for (std::size_t i = 0; i < methods.size(); ++i) out << "---|";
        out << '\n';
        for (const std::string& kind : {"inventory", "phonological", "syntactic"}) {
            bool any = false;
            for (const auto& m : methods) any = any || by_method[m].contains(kind);
            if (!any) continue;
            out << "| " << kind << " |";
            for (const auto& m : methods) {
                if (by_method[m].contains(kind)) {
                    const auto& e = by_method[m][kind];
                    out << ' ' << detail::fmt_short(e["r"].get<double>()) << " (p="
                        << detail::fmt_short(e["p"].get<double>()) << ") |";
                } else {
                    out << " n/a |";
                }
            }
            out << '\n';
        }
        out << '\n';
    }

    if (report.contains("perplexity_summary") && !report["perplexity_summary"].empty()) {
        out << "## General perplexity change after unlearning\n\n";
        out << "| Model | Avg D | Max D Lang | Max D |\n|---|---|---|---|\n";
        for (const auto& e : report["perplexity_summary"]) {
            out << "| unlearned " << e["method"].get<std::string>() << ' '
                << e["unlearned_language"].get<std::string>() << " | "
                << detail::fmt_short(e["avg_delta"].get<double>()) << " | "
                << e["max_delta_language"].get<std::string>() << " | "
                << detail::fmt_short(e["max_delta"].get<double>()) << " |\n";
        }
        out << '\n';
    }

    if (report.contains("mcq_rates") && !report["mcq_rates"].empty()) {
        out << "## Stereotype / Unknown selection rates\n\n";
        out << "| Model | Language | Biased | Unknown | Other |\n|---|---|---|---|---|\n";
        for (const auto& e : report["mcq_rates"]) {
            out << "| " << e["model"].get<std::string>() << " | "
                << e["language"].get<std::string>() << " | "
                << detail::fmt_short(e["biased"].get<double>()) << " | "
                << detail::fmt_short(e["unknown"].get<double>()) << " | "
                << detail::fmt_short(e["other"].get<double>()) << " |\n";
        }
        out << '\n';
    }
    out.close();
    artifacts.push_back(summary_path);
    std::sort(artifacts.begin(), artifacts.end());
    return artifacts;
}

// ----------------------------- driver -----------------------------

inline int run_stage(const std::string& stage, const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    Workspace ws{cfg.workspace};
    fs::create_directories(ws.root);
    std::string hash = experiment_stage_hash(stage, cfg);
    if (!force && stage_up_to_date(ws, stage, hash)) {
        std::cout << stage << ": up to date\n";
        return 0;
    }
    std::vector<fs::path> artifacts;
    if (stage == "gen-data") {
        artifacts = stage_gen_data(cfg);
    } else if (stage == "finetune") {
        artifacts = stage_finetune(cfg);
    } else if (stage == "unlearn") {
        artifacts = stage_unlearn(cfg);
    } else if (stage == "eval") {
        artifacts = stage_eval(cfg);
    } else if (stage == "analyze") {
        artifacts = stage_analyze(cfg);
    } else if (stage == "report") {
        artifacts = stage_report(cfg);
    } else {
        throw config_error("unknown command: " + stage);
    }
    write_manifest(ws, stage, hash, artifacts);
    std::cout << stage << ": wrote " << artifacts.size() << " artifact(s)\n";
    return 0;
}

}  // namespace ulab
