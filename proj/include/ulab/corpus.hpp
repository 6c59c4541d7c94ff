#pragma once

// Synthetic multilingual benchmark generation.
//
// A single base-language template bank renders author-profile QA, world-fact
// QA and stereotype MCQs. A synthetic language is a deterministic transform
// of the base language controlled by three knobs:
//   - shared_fraction (omega): the fraction of content lexemes kept verbatim,
//   - word_order: a permutation of the four template slots,
//   - script_offset: a letter-rotation applied to non-shared lexemes.
// The rotation always shifts by at least one place, so with omega = 0 no
// rendered lexeme is string-equal to its base form; it is also injective,
// which keeps distinct values distinct after rendering.
//
// The same knobs define the synthetic typological distances: word-order
// Kendall-tau for the syntactic matrix and shared-lexeme Jaccard for the
// inventory matrix.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ulab/common.hpp"
#include "ulab/vocab.hpp"

namespace ulab {

// ----------------------------- data types -----------------------------

struct Fact {
    std::int64_t subject_id{0};
    std::size_t relation{0};
    std::string value;
};

enum class FactKind { author, world };

struct FactSet {
    FactKind kind{FactKind::author};
    std::vector<Fact> facts;
};

struct LangSpec {
    std::string id;
    std::uint64_t lexicon_seed{0};
    double shared_fraction{1.0};  // omega
    std::array<std::size_t, 4> word_order{0, 1, 2, 3};
    int script_offset{0};

    void validate() const {
        if (id.empty()) throw config_error("language id must be non-empty");
        if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) {
            throw config_error("shared_fraction must lie in [0,1]");
        }
        std::array<bool, 4> seen{};
        for (std::size_t s : word_order) {
            if (s >= 4 || seen[s]) throw config_error("word_order must be a permutation of 0..3");
            seen[s] = true;
        }
    }
};

enum class Split { forget, retain, real_authors, world_facts };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::forget: return "forget";
        case Split::retain: return "retain";
        case Split::real_authors: return "real_authors_analog";
        case Split::world_facts: return "world_facts_analog";
    }
    throw data_error("unknown split");
}

inline Split split_from_name(const std::string& s) {
    if (s == "forget") return Split::forget;
    if (s == "retain") return Split::retain;
    if (s == "real_authors_analog") return Split::real_authors;
    if (s == "world_facts_analog") return Split::world_facts;
    throw data_error("unknown split name: " + s);
}

struct QAExample {
    std::string id;
    std::string language;
    std::int64_t subject_id{0};
    Split split{Split::retain};
    std::string question;
    std::string answer;
    std::string paraphrased_answer;
    std::vector<std::string> perturbed_answers;
};

struct MCQExample {
    std::string id;
    std::string language;
    std::string question;
    std::vector<std::string> options;
    std::size_t stereotype_index{0};
    std::size_t unknown_index{0};
};

struct DistanceMatrices {
    std::vector<std::string> languages;
    std::vector<double> syntactic;  // K*K row-major
    std::vector<double> inventory;
    std::optional<std::vector<double>> phonological;

    std::size_t k() const { return languages.size(); }
    double at(const std::vector<double>& m, std::size_t i, std::size_t j) const {
        return m[i * k() + j];
    }
};

// ----------------------------- template bank -----------------------------

namespace bank {

using Slots = std::array<std::string, 4>;

struct Relation {
    const char* key;
    const char* attr_noun;  // paraphrase reads "the <attr_noun> of {S} is {V}"
    Slots question;
    Slots answer;
    std::size_t pool;  // index into value_pools()
};

inline const std::vector<std::vector<std::string>>& value_pools() {
    static const std::vector<std::vector<std::string>> pools = {
        /*0 city*/ {"paris", "osaka", "cairo", "lima", "oslo", "quito", "dakar", "hanoi",
                    "milan", "kyoto", "tunis", "bogota"},
        /*1 genre*/ {"mystery", "satire", "memoir", "fantasy", "poetry", "romance", "thriller",
                     "drama", "fable", "essay"},
        /*2 prize*/ {"goldleaf", "silverpen", "lumina", "aurora", "meridian", "solstice",
                     "zenith", "borealis"},
        /*3 school*/ {"northgate", "riverford", "eastwood", "halemont", "clearwater",
                      "stonebridge", "ashford", "winterhill"},
        /*4 trade*/ {"baker", "tailor", "sailor", "teacher", "farmer", "scribe", "weaver",
                     "potter"},
        /*5 animal*/ {"falcon", "tortoise", "heron", "lynx", "otter", "badger", "finch",
                      "marten"},
        /*6 food*/ {"saffron", "dumpling", "olive", "barley", "cocoa", "ginger", "fig",
                    "almond"},
        /*7 color*/ {"crimson", "indigo", "ochre", "viridian", "amber", "cobalt", "sepia",
                     "magenta"},
        /*8 instrument*/ {"cello", "flute", "oboe", "sitar", "banjo", "harp", "viola", "drum"},
        /*9 season*/ {"spring", "summer", "autumn", "winter", "dawn", "dusk"},
    };
    return pools;
}

// Questions carry the subject and four full slots (the word-order knob needs
// them); answers are short and value-dominated so that forgetting a fact is
// mostly about its value tokens rather than shared template machinery.
inline const std::vector<Relation>& author_relations() {
    static const std::vector<Relation> rels = {
        {"birth_city", "birthplace", {"where", "was", "{S}", "born"},
         {"born", "in", "{V}", ""}, 0},
        {"home_city", "home", {"where", "does", "{S}", "live"},
         {"lives", "in", "{V}", ""}, 0},
        {"study_city", "study town", {"where", "did", "{S}", "study"},
         {"studied", "in", "{V}", ""}, 0},
        {"genre", "genre", {"which genre", "does", "{S}", "write"},
         {"writes", "{V}", "", ""}, 1},
        {"debut_genre", "debut genre", {"which genre", "did", "{S}", "debut in"},
         {"debuted", "in", "{V}", ""}, 1},
        {"prize", "prize", {"which prize", "did", "{S}", "win"},
         {"won", "the", "{V}", ""}, 2},
        {"first_prize", "first prize", {"which prize", "came first", "to", "{S}"},
         {"first", "won", "{V}", ""}, 2},
        {"school", "college", {"where", "did", "{S}", "train"},
         {"trained", "at", "{V}", ""}, 3},
        {"father_trade", "father trade", {"what trade", "did the father", "of {S}", "follow"},
         {"father", "was", "{V}", ""}, 4},
        {"mother_trade", "mother trade", {"what trade", "did the mother", "of {S}", "follow"},
         {"mother", "was", "{V}", ""}, 4},
        {"pet", "pet", {"which pet", "does", "{S}", "keep"},
         {"pet", "is", "{V}", ""}, 5},
        {"totem", "totem", {"which totem", "does", "{S}", "honor"},
         {"totem", "is", "{V}", ""}, 5},
        {"food", "favorite food", {"which food", "does", "{S}", "love"},
         {"loves", "{V}", "", ""}, 6},
        {"morning_food", "morning food", {"which food", "starts the day", "of", "{S}"},
         {"breakfast", "is", "{V}", ""}, 6},
        {"cover_color", "cover color", {"which color", "covers the books", "of", "{S}"},
         {"cover", "is", "{V}", ""}, 7},
        {"ink_color", "ink color", {"which ink", "does", "{S}", "use"},
         {"ink", "is", "{V}", ""}, 7},
        {"instrument", "instrument", {"which instrument", "does", "{S}", "play"},
         {"plays", "the", "{V}", ""}, 8},
        {"muse_instrument", "muse", {"which instrument", "inspires", "{S}", "most"},
         {"muse", "is", "{V}", ""}, 8},
        {"season", "writing season", {"which season", "suits", "{S}", "for writing"},
         {"writes", "during", "{V}", ""}, 9},
        {"travel_city", "journey city", {"where", "does", "{S}", "travel often"},
         {"travels", "to", "{V}", ""}, 0},
    };
    return rels;
}

inline const std::vector<Relation>& world_relations() {
    static const std::vector<Relation> rels = {
        {"capital", "capital", {"what", "is the capital", "of", "{S}"},
         {"the capital", "of", "{S}", "is {V}"}, 0},
        {"emblem", "emblem", {"which animal", "is the emblem", "of", "{S}"},
         {"the emblem", "of", "{S}", "is {V}"}, 5},
        {"staple", "staple", {"which food", "is the staple", "of", "{S}"},
         {"the staple", "of", "{S}", "is {V}"}, 6},
        {"flag_color", "flag color", {"which color", "marks the flag", "of", "{S}"},
         {"the flag", "of", "{S}", "shows {V}"}, 7},
        {"anthem", "anthem", {"which instrument", "leads the anthem", "of", "{S}"},
         {"the anthem", "of", "{S}", "uses {V}"}, 8},
    };
    return rels;
}

inline const std::vector<std::string>& first_names() {
    static const std::vector<std::string> v = {"aris", "bena", "cato", "dara", "elio", "fana",
                                               "goran", "hilda", "ivo", "jara", "kiro", "lena",
                                               "milo", "nadia", "oren", "petra"};
    return v;
}

inline const std::vector<std::string>& last_names() {
    static const std::vector<std::string> v = {"amsel", "brook", "corda", "dray", "ember",
                                               "frost", "gale", "harrow", "idris", "jett",
                                               "koda", "lark", "marsh", "noble", "orrin", "pike"};
    return v;
}

inline const std::vector<std::string>& world_entities() {
    static const std::vector<std::string> v = {"norlandia", "sudovia", "estaria", "westmark",
                                               "zephyria", "cordale", "meridia", "altavia",
                                               "borania", "caspira", "drovena", "elmira"};
    return v;
}

inline const std::vector<std::string>& identities() {
    static const std::vector<std::string> v = {"norlandian", "sudovian", "estarian", "westmarker",
                                               "zephyrian", "cordalese", "meridian", "altavian",
                                               "boranian", "caspiran", "drovenite", "elmiran"};
    return v;
}

inline const std::vector<std::string>& attributes() {
    static const std::vector<std::string> v = {"thrifty", "stern", "jolly", "cunning", "gentle",
                                               "boastful", "timid", "diligent", "careless",
                                               "solemn", "merry", "blunt"};
    return v;
}

inline const Slots& mcq_question() {
    static const Slots s = {"people say", "someone here is", "{A}", "that person is"};
    return s;
}

inline const char* unknown_word() { return "unknown"; }

constexpr std::int64_t kWorldSubjectBase = 500000;
constexpr std::size_t kMaxNamedSubjects = 256;  // first_names x last_names

inline std::string author_name(std::int64_t subject_id) {
    std::size_t k = static_cast<std::size_t>(subject_id) % kMaxNamedSubjects;
    return first_names()[k % first_names().size()] + " " +
           last_names()[(k / first_names().size()) % last_names().size()];
}

inline std::string subject_name(FactKind kind, std::int64_t subject_id) {
    if (kind == FactKind::world) {
        std::size_t e = static_cast<std::size_t>(subject_id - kWorldSubjectBase);
        if (e >= world_entities().size()) throw data_error("world entity index out of range");
        return world_entities()[e];
    }
    return author_name(subject_id);
}

}  // namespace bank

// ----------------------------- language rendering -----------------------------

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Every distinct word that can appear in a rendered string, sorted. The
// shared-lexeme draw and the inventory distance both run over this list.
inline const std::vector<std::string>& content_lexicon() {
    static const std::vector<std::string> lex = [] {
        std::set<std::string> words;
        auto add_slots = [&](const bank::Slots& slots) {
            for (const std::string& slot : slots) {
                for (const std::string& w : split_words(slot)) {
                    if (w != "{S}" && w != "{V}" && w != "{A}") words.insert(w);
                }
            }
        };
        for (const auto& rel : bank::author_relations()) {
            add_slots(rel.question);
            add_slots(rel.answer);
            for (const std::string& w : split_words(rel.attr_noun)) words.insert(w);
        }
        for (const auto& rel : bank::world_relations()) {
            add_slots(rel.question);
            add_slots(rel.answer);
            for (const std::string& w : split_words(rel.attr_noun)) words.insert(w);
        }
        for (const auto& pool : bank::value_pools()) {
            for (const std::string& w : pool) words.insert(w);
        }
        for (const std::string& w : bank::first_names()) words.insert(w);
        for (const std::string& w : bank::last_names()) words.insert(w);
        for (const std::string& w : bank::world_entities()) words.insert(w);
        for (const std::string& w : bank::identities()) words.insert(w);
        for (const std::string& w : bank::attributes()) words.insert(w);
        add_slots(bank::mcq_question());
        words.insert("the");
        words.insert("of");
        words.insert("is");
        words.insert(bank::unknown_word());
        return std::vector<std::string>(words.begin(), words.end());
    }();
    return lex;
}

// Deterministic omega-fraction selection: round(omega * N) lexemes drawn by a
// seeded shuffle of the sorted lexicon.
inline std::set<std::string> shared_lexeme_set(const LangSpec& spec) {
    const std::vector<std::string>& lex = content_lexicon();
    std::size_t n_shared =
        static_cast<std::size_t>(std::llround(spec.shared_fraction * double(lex.size())));
    if (n_shared >= lex.size()) return std::set<std::string>(lex.begin(), lex.end());
    std::vector<std::size_t> order(lex.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(spec.lexicon_seed, "shared-lexemes"));
    rng.shuffle(order);
    std::set<std::string> out;
    for (std::size_t i = 0; i < n_shared; ++i) out.insert(lex[order[i]]);
    return out;
}

// Renders strings of one synthetic language; caches the per-word mapping.
class LanguageRenderer {
public:
    explicit LanguageRenderer(const LangSpec& spec)
        : spec_(spec), shared_(shared_lexeme_set(spec)) {
        spec.validate();
    }

    const LangSpec& spec() const { return spec_; }
    const std::set<std::string>& shared() const { return shared_; }

    std::string map_word(const std::string& w) const {
        if (shared_.count(w)) return w;
        // Rotation shift is never zero, so a non-shared lexeme always changes.
        int shift = 1 + ((spec_.script_offset % 25) + 25) % 25;
        std::string out = w;
        for (char& c : out) {
            if (c >= 'a' && c <= 'z') c = static_cast<char>('a' + (c - 'a' + shift) % 26);
        }
        return out;
    }

    std::string render_sentence(const bank::Slots& slots,
                                const std::map<std::string, std::string>& fills) const {
        std::array<std::string, 4> expanded;
        for (std::size_t i = 0; i < 4; ++i) {
            expanded[i] = slots[i];
            for (const auto& [key, value] : fills) {
                std::size_t pos = expanded[i].find(key);
                if (pos != std::string::npos) expanded[i].replace(pos, key.size(), value);
            }
        }
        std::string out;
        for (std::size_t i = 0; i < 4; ++i) {
            for (const std::string& w : split_words(expanded[spec_.word_order[i]])) {
                if (!out.empty()) out += ' ';
                out += map_word(w);
            }
        }
        return out;
    }

    std::string unknown_token() const { return map_word(bank::unknown_word()); }

private:
    LangSpec spec_;
    std::set<std::string> shared_;
};

// ----------------------------- generation ops -----------------------------

inline FactSet generate_profiles(std::size_t n_profiles, std::size_t facts_per_profile,
                                 std::uint64_t seed, std::int64_t subject_base = 0) {
    if (n_profiles < 1 || facts_per_profile < 1) {
        throw config_error("profile generation requires n_profiles >= 1 and facts_per_profile >= 1");
    }
    const auto& rels = bank::author_relations();
    if (facts_per_profile > rels.size()) {
        throw config_error("facts_per_profile exceeds the " + std::to_string(rels.size()) +
                           " available relations");
    }
    if (static_cast<std::size_t>(subject_base) + n_profiles > bank::kMaxNamedSubjects) {
        throw config_error("subject ids exceed the unique-name budget");
    }
    FactSet out;
    out.kind = FactKind::author;
    for (std::size_t s = 0; s < n_profiles; ++s) {
        std::int64_t subject = subject_base + static_cast<std::int64_t>(s);
        for (std::size_t r = 0; r < facts_per_profile; ++r) {
            const auto& pool = bank::value_pools()[rels[r].pool];
            Rng rng(derive_seed(seed, "fact", static_cast<std::uint64_t>(subject), r));
            out.facts.push_back(Fact{subject, r, pool[rng.below(pool.size())]});
        }
    }
    return out;
}

inline FactSet generate_world_facts(std::size_t n_entities, std::uint64_t seed) {
    const auto& rels = bank::world_relations();
    if (n_entities < 1 || n_entities > bank::world_entities().size()) {
        throw config_error("n_entities must lie in [1, " +
                           std::to_string(bank::world_entities().size()) + "]");
    }
    FactSet out;
    out.kind = FactKind::world;
    for (std::size_t e = 0; e < n_entities; ++e) {
        std::int64_t subject = bank::kWorldSubjectBase + static_cast<std::int64_t>(e);
        for (std::size_t r = 0; r < rels.size(); ++r) {
            const auto& pool = bank::value_pools()[rels[r].pool];
            Rng rng(derive_seed(seed, "world-fact", static_cast<std::uint64_t>(subject), r));
            out.facts.push_back(Fact{subject, r, pool[rng.below(pool.size())]});
        }
    }
    return out;
}

inline void validate_qa(const QAExample& qa) {
    if (qa.question.empty() || qa.answer.empty() || qa.paraphrased_answer.empty()) {
        throw data_error("QA example " + qa.id + " has an empty field");
    }
    if (qa.perturbed_answers.empty()) {
        throw data_error("QA example " + qa.id + " has no perturbed answers");
    }
    for (const std::string& p : qa.perturbed_answers) {
        if (p.empty()) throw data_error("QA example " + qa.id + " has an empty perturbed answer");
        if (p == qa.answer || p == qa.paraphrased_answer) {
            throw data_error("QA example " + qa.id +
                             " has a perturbed answer equal to the answer or paraphrase");
        }
    }
}

// One QA example per fact: question, answer, template-level paraphrase and
// same-pool wrong-value perturbations. The perturbation value draw depends
// only on (seed, subject, relation), so the wrong values correspond across
// languages rendered with the same seed.
inline std::vector<QAExample> render_language(const FactSet& facts, const LangSpec& spec,
                                              std::uint64_t seed, std::size_t n_perturbed = 3,
                                              Split split = Split::retain) {
    spec.validate();
    LanguageRenderer renderer(spec);
    const auto& rels =
        facts.kind == FactKind::world ? bank::world_relations() : bank::author_relations();
    std::vector<QAExample> out;
    out.reserve(facts.facts.size());
    for (const Fact& fact : facts.facts) {
        if (fact.relation >= rels.size()) throw data_error("fact relation out of template range");
        const bank::Relation& rel = rels[fact.relation];
        const auto& pool = bank::value_pools()[rel.pool];
        if (pool.size() <= n_perturbed) {
            throw config_error("value pool too small for " + std::to_string(n_perturbed) +
                               " perturbations");
        }
        std::string subject = bank::subject_name(facts.kind, fact.subject_id);

        QAExample qa;
        qa.language = spec.id;
        qa.subject_id = fact.subject_id;
        qa.split = split;
        {
            std::ostringstream id;
            id << spec.id << "-" << (facts.kind == FactKind::world ? "w" : "a");
            id.fill('0');
            id.width(6);
            id << fact.subject_id;
            id << "-r";
            id.fill('0');
            id.width(2);
            id << fact.relation;
            qa.id = id.str();
        }
        qa.question = renderer.render_sentence(rel.question, {{"{S}", subject}});
        qa.answer =
            renderer.render_sentence(rel.answer, {{"{S}", subject}, {"{V}", fact.value}});
        bank::Slots paraphrase = {std::string("the ") + rel.attr_noun, "of", "{S}", "is {V}"};
        if (facts.kind == FactKind::world) {
            // World answers already read "the X of S is V"; flip the paraphrase.
            paraphrase = {"{V}", "is counted as", std::string("the ") + rel.attr_noun, "of {S}"};
        }
        qa.paraphrased_answer =
            renderer.render_sentence(paraphrase, {{"{S}", subject}, {"{V}", fact.value}});

        Rng rng(derive_seed(seed, "perturb", static_cast<std::uint64_t>(fact.subject_id),
                            fact.relation));
        std::vector<std::string> wrong(pool.begin(), pool.end());
        std::erase(wrong, fact.value);
        rng.shuffle(wrong);
        for (std::size_t k = 0; k < n_perturbed; ++k) {
            qa.perturbed_answers.push_back(renderer.render_sentence(
                rel.answer, {{"{S}", subject}, {"{V}", wrong[k]}}));
        }
        validate_qa(qa);
        out.push_back(std::move(qa));
    }
    return out;
}

// Profile-granular split: all examples of ceil(fraction * n_subjects)
// seeded-drawn subjects form the forget set. The draw depends only on the
// (sorted) subject ids and the seed, so every language rendering of the same
// fact set partitions identically.
inline std::pair<std::vector<QAExample>, std::vector<QAExample>> split_forget_retain(
    const std::vector<QAExample>& dataset, double forget_fraction, std::uint64_t seed) {
    if (!(forget_fraction > 0.0 && forget_fraction < 1.0)) {
        throw config_error("forget_fraction must lie strictly between 0 and 1");
    }
    std::set<std::int64_t> subject_set;
    for (const QAExample& qa : dataset) subject_set.insert(qa.subject_id);
    std::vector<std::int64_t> subjects(subject_set.begin(), subject_set.end());
    std::size_t n_forget = static_cast<std::size_t>(
        std::ceil(forget_fraction * static_cast<double>(subjects.size())));
    Rng rng(derive_seed(seed, "forget-subjects"));
    rng.shuffle(subjects);
    std::set<std::int64_t> forget_subjects(subjects.begin(),
                                           subjects.begin() + static_cast<std::ptrdiff_t>(n_forget));

    std::pair<std::vector<QAExample>, std::vector<QAExample>> out;
    for (const QAExample& qa : dataset) {
        QAExample copy = qa;
        if (forget_subjects.count(qa.subject_id)) {
            copy.split = Split::forget;
            out.first.push_back(std::move(copy));
        } else {
            copy.split = Split::retain;
            out.second.push_back(std::move(copy));
        }
    }
    return out;
}

struct StereoPair {
    std::string identity;
    std::string attribute;
};

// Canonical identity<->attribute pairing; question j probes attribute j mod
// |attributes| and its paired identity.
inline std::vector<StereoPair> default_stereo_pairs(std::size_t n_questions) {
    const auto& ids = bank::identities();
    const auto& attrs = bank::attributes();
    std::vector<StereoPair> out;
    out.reserve(n_questions);
    for (std::size_t i = 0; i < n_questions; ++i) {
        out.push_back(StereoPair{ids[i % ids.size()], attrs[i % attrs.size()]});
    }
    return out;
}

inline void validate_mcq(const MCQExample& mcq) {
    if (mcq.question.empty()) throw data_error("MCQ " + mcq.id + " has an empty question");
    if (mcq.options.size() < 3) throw data_error("MCQ " + mcq.id + " needs at least 3 options");
    if (mcq.stereotype_index >= mcq.options.size() || mcq.unknown_index >= mcq.options.size()) {
        throw data_error("MCQ " + mcq.id + " has an option index out of range");
    }
    if (mcq.stereotype_index == mcq.unknown_index) {
        throw data_error("MCQ " + mcq.id + " marks the same option as stereotype and unknown");
    }
    for (std::size_t i = 0; i < mcq.options.size(); ++i) {
        if (mcq.options[i].empty()) throw data_error("MCQ " + mcq.id + " has an empty option");
        for (std::size_t j = i + 1; j < mcq.options.size(); ++j) {
            if (mcq.options[i] == mcq.options[j]) {
                throw data_error("MCQ " + mcq.id + " has duplicate options");
            }
        }
    }
}

inline std::vector<MCQExample> generate_mcq(const std::vector<StereoPair>& stereo_pairs,
                                            const LangSpec& spec, std::size_t k_distractors,
                                            std::uint64_t seed,
                                            const std::vector<std::string>& answer_pool =
                                                bank::identities()) {
    spec.validate();
    if (k_distractors < 1) throw config_error("k_distractors must be >= 1");
    if (answer_pool.size() <= k_distractors) {
        throw config_error("distractor pool too small for k_distractors");
    }
    LanguageRenderer renderer(spec);
    std::vector<MCQExample> out;
    out.reserve(stereo_pairs.size());
    for (std::size_t qi = 0; qi < stereo_pairs.size(); ++qi) {
        const StereoPair& pair = stereo_pairs[qi];
        Rng rng(derive_seed(seed, "mcq", qi));

        std::vector<std::string> candidates;
        for (const std::string& c : answer_pool) {
            if (c != pair.identity) candidates.push_back(c);
        }
        rng.shuffle(candidates);

        std::vector<std::string> base_options = {pair.identity, bank::unknown_word()};
        for (std::size_t k = 0; k < k_distractors; ++k) base_options.push_back(candidates[k]);
        rng.shuffle(base_options);

        MCQExample mcq;
        mcq.language = spec.id;
        {
            std::ostringstream id;
            id << spec.id << "-m";
            id.fill('0');
            id.width(5);
            id << qi;
            mcq.id = id.str();
        }
        mcq.question = renderer.render_sentence(bank::mcq_question(), {{"{A}", pair.attribute}});
        for (std::size_t k = 0; k < base_options.size(); ++k) {
            if (base_options[k] == pair.identity) mcq.stereotype_index = k;
            if (base_options[k] == bank::unknown_word()) mcq.unknown_index = k;
            mcq.options.push_back(renderer.map_word(base_options[k]));
        }
        validate_mcq(mcq);
        out.push_back(std::move(mcq));
    }
    return out;
}

// General-purpose declarative sentences of one language: the world-fact
// answers and paraphrases. Used as the KL anchor corpus and for perplexity.
inline std::vector<std::string> general_sentences(const std::vector<QAExample>& world_examples) {
    std::vector<std::string> out;
    out.reserve(world_examples.size() * 2);
    for (const QAExample& qa : world_examples) {
        out.push_back(qa.answer);
        out.push_back(qa.paraphrased_answer);
    }
    return out;
}

// ----------------------------- distances -----------------------------

inline double kendall_tau_distance(const std::array<std::size_t, 4>& a,
                                   const std::array<std::size_t, 4>& b) {
    // position of each slot in each ordering
    std::array<std::size_t, 4> pa{}, pb{};
    for (std::size_t i = 0; i < 4; ++i) {
        pa[a[i]] = i;
        pb[b[i]] = i;
    }
    std::size_t discordant = 0;
    for (std::size_t x = 0; x < 4; ++x) {
        for (std::size_t y = x + 1; y < 4; ++y) {
            bool ord_a = pa[x] < pa[y];
            bool ord_b = pb[x] < pb[y];
            if (ord_a != ord_b) ++discordant;
        }
    }
    return static_cast<double>(discordant) / 6.0;
}

inline void validate_distance_matrix(const std::vector<std::string>& langs,
                                     const std::vector<double>& m, const std::string& what) {
    std::size_t k = langs.size();
    if (m.size() != k * k) throw data_error(what + " distance matrix has the wrong size");
    for (std::size_t i = 0; i < k; ++i) {
        if (std::abs(m[i * k + i]) > 1e-12) {
            throw data_error(what + " distance matrix has a non-zero diagonal");
        }
        for (std::size_t j = 0; j < k; ++j) {
            double v = m[i * k + j];
            if (!(v >= 0.0 && v <= 1.0)) throw data_error(what + " distance out of [0,1]");
            if (std::abs(v - m[j * k + i]) > 1e-9) {
                throw data_error(what + " distance matrix is not symmetric");
            }
        }
    }
}

inline DistanceMatrices synthetic_distances(const std::vector<LangSpec>& specs) {
    if (specs.size() < 2) throw config_error("synthetic distances need at least 2 languages");
    DistanceMatrices out;
    std::size_t k = specs.size();
    out.syntactic.assign(k * k, 0.0);
    out.inventory.assign(k * k, 0.0);
    std::vector<std::set<std::string>> shared;
    for (const LangSpec& s : specs) {
        s.validate();
        out.languages.push_back(s.id);
        shared.push_back(shared_lexeme_set(s));
    }
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            double syn = kendall_tau_distance(specs[i].word_order, specs[j].word_order);
            std::size_t inter = 0;
            for (const std::string& w : shared[i]) inter += shared[j].count(w);
            std::size_t uni = shared[i].size() + shared[j].size() - inter;
            double inv = uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
            out.syntactic[i * k + j] = out.syntactic[j * k + i] = syn;
            out.inventory[i * k + j] = out.inventory[j * k + i] = inv;
        }
    }
    validate_distance_matrix(out.languages, out.syntactic, "syntactic");
    validate_distance_matrix(out.languages, out.inventory, "inventory");
    return out;
}

// ----------------------------- vocabulary -----------------------------

inline Vocab build_vocab(const std::vector<QAExample>& qa, const std::vector<MCQExample>& mcq = {}) {
    std::vector<std::string> corpus;
    for (const QAExample& e : qa) {
        corpus.push_back(e.question);
        corpus.push_back(e.answer);
        corpus.push_back(e.paraphrased_answer);
        for (const std::string& p : e.perturbed_answers) corpus.push_back(p);
    }
    for (const MCQExample& e : mcq) {
        corpus.push_back(e.question);
        for (const std::string& o : e.options) corpus.push_back(o);
    }
    return Vocab::build(corpus);
}

// ----------------------------- serialization -----------------------------

inline nlohmann::json qa_to_json(const QAExample& qa) {
    return {
        {"id", qa.id},
        {"language", qa.language},
        {"subject_id", qa.subject_id},
        {"split", split_name(qa.split)},
        {"question", qa.question},
        {"answer", qa.answer},
        {"paraphrased_answer", qa.paraphrased_answer},
        {"perturbed_answers", qa.perturbed_answers},
    };
}

inline QAExample qa_from_json(const nlohmann::json& j) {
    QAExample qa;
    qa.id = j.at("id").get<std::string>();
    qa.language = j.at("language").get<std::string>();
    qa.subject_id = j.at("subject_id").get<std::int64_t>();
    qa.split = split_from_name(j.at("split").get<std::string>());
    qa.question = j.at("question").get<std::string>();
    qa.answer = j.at("answer").get<std::string>();
    qa.paraphrased_answer = j.at("paraphrased_answer").get<std::string>();
    qa.perturbed_answers = j.at("perturbed_answers").get<std::vector<std::string>>();
    validate_qa(qa);
    return qa;
}

inline void save_qa_jsonl(const std::vector<QAExample>& examples,
                          const std::filesystem::path& path) {
    std::vector<const QAExample*> sorted;
    sorted.reserve(examples.size());
    for (const QAExample& e : examples) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(),
              [](const QAExample* a, const QAExample* b) { return a->id < b->id; });
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write QA file: " + path.string());
    for (const QAExample* e : sorted) out << qa_to_json(*e).dump() << '\n';
}

inline std::vector<QAExample> load_qa_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open QA file: " + path.string());
    std::vector<QAExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(qa_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw data_error(path.string() + ":" + std::to_string(line_no) +
                             ": malformed QA record: " + e.what());
        }
    }
    return out;
}

inline nlohmann::json mcq_to_json(const MCQExample& m) {
    return {
        {"id", m.id},
        {"language", m.language},
        {"question", m.question},
        {"options", m.options},
        {"stereotype_index", m.stereotype_index},
        {"unknown_index", m.unknown_index},
    };
}

inline MCQExample mcq_from_json(const nlohmann::json& j) {
    MCQExample m;
    m.id = j.at("id").get<std::string>();
    m.language = j.at("language").get<std::string>();
    m.question = j.at("question").get<std::string>();
    m.options = j.at("options").get<std::vector<std::string>>();
    m.stereotype_index = j.at("stereotype_index").get<std::size_t>();
    m.unknown_index = j.at("unknown_index").get<std::size_t>();
    validate_mcq(m);
    return m;
}

inline void save_mcq_jsonl(const std::vector<MCQExample>& examples,
                           const std::filesystem::path& path) {
    std::vector<const MCQExample*> sorted;
    sorted.reserve(examples.size());
    for (const MCQExample& e : examples) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(),
              [](const MCQExample* a, const MCQExample* b) { return a->id < b->id; });
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write MCQ file: " + path.string());
    for (const MCQExample* e : sorted) out << mcq_to_json(*e).dump() << '\n';
}

inline std::vector<MCQExample> load_mcq_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open MCQ file: " + path.string());
    std::vector<MCQExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(mcq_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw data_error(path.string() + ":" + std::to_string(line_no) +
                             ": malformed MCQ record: " + e.what());
        }
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void save_distance_csv(const std::vector<std::string>& langs,
                              const std::vector<double>& matrix,
                              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write distance file: " + path.string());
    out << "lang";
    for (const std::string& l : langs) out << ',' << l;
    out << '\n';
    for (std::size_t i = 0; i < langs.size(); ++i) {
        out << langs[i];
        for (std::size_t j = 0; j < langs.size(); ++j) {
            out << ',' << format_double(matrix[i * langs.size() + j]);
        }
        out << '\n';
    }
}

inline std::pair<std::vector<std::string>, std::vector<double>> load_distance_csv(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open distance file: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw data_error("empty distance file: " + path.string());
    auto fields = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                out.push_back(cur);
                cur.clear();
            } else if (c != '\r') {
                cur += c;
            }
        }
        out.push_back(cur);
        return out;
    };
    std::vector<std::string> header = fields(line);
    if (header.size() < 3 || header[0] != "lang") {
        throw data_error("distance file header must read 'lang,<id>,...': " + path.string());
    }
    std::vector<std::string> langs(header.begin() + 1, header.end());
    std::size_t k = langs.size();
    std::vector<double> matrix(k * k, 0.0);
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f = fields(line);
        if (row >= k || f.size() != k + 1 || f[0] != langs[row]) {
            throw data_error("distance file row/language mismatch: " + path.string());
        }
        for (std::size_t j = 0; j < k; ++j) {
            try {
                matrix[row * k + j] = std::stod(f[j + 1]);
            } catch (const std::exception&) {
                throw data_error("unparseable distance value in " + path.string());
            }
        }
        ++row;
    }
    if (row != k) throw data_error("distance file is missing rows: " + path.string());
    validate_distance_matrix(langs, matrix, path.filename().string());
    return {std::move(langs), std::move(matrix)};
}

inline void save_distances(const DistanceMatrices& d, const std::filesystem::path& dir) {
    save_distance_csv(d.languages, d.syntactic, dir / "syntactic.csv");
    save_distance_csv(d.languages, d.inventory, dir / "inventory.csv");
    if (d.phonological) save_distance_csv(d.languages, *d.phonological, dir / "phonological.csv");
}

inline DistanceMatrices load_distances(const std::filesystem::path& dir) {
    DistanceMatrices d;
    auto [langs, syn] = load_distance_csv(dir / "syntactic.csv");
    d.languages = langs;
    d.syntactic = std::move(syn);
    auto [langs2, inv] = load_distance_csv(dir / "inventory.csv");
    if (langs2 != d.languages) throw data_error("distance files disagree on language lists");
    d.inventory = std::move(inv);
    if (std::filesystem::exists(dir / "phonological.csv")) {
        auto [langs3, pho] = load_distance_csv(dir / "phonological.csv");
        if (langs3 != d.languages) throw data_error("distance files disagree on language lists");
        d.phonological = std::move(pho);
    }
    return d;
}

}  // namespace ulab
