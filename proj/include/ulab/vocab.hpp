#pragma once

// Character-level tokenizer. Tokens are UTF-8 codepoints plus three special
// tokens; the inventory is the sorted set of codepoints seen in the corpus,
// so the same corpus always yields the same vocabulary.

#include <algorithm>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ulab/common.hpp"

namespace ulab {

inline std::vector<std::string> utf8_codepoints(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if (c < 0x80) {
            len = 1;
        } else if ((c >> 5) == 0x6) {
            len = 2;
        } else if ((c >> 4) == 0xe) {
            len = 3;
        } else if ((c >> 3) == 0x1e) {
            len = 4;
        } else {
            throw vocab_error("malformed UTF-8 byte in corpus string");
        }
        if (i + len > s.size()) throw vocab_error("truncated UTF-8 sequence");
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) {
                throw vocab_error("malformed UTF-8 continuation byte");
            }
        }
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kSep = 2;

    Vocab() = default;

    static Vocab build(const std::vector<std::string>& corpus) {
        if (corpus.empty()) throw vocab_error("cannot build a vocabulary from an empty corpus");
        std::set<std::string> chars;
        for (const std::string& s : corpus) {
            for (std::string& cp : utf8_codepoints(s)) chars.insert(std::move(cp));
        }
        std::vector<std::string> tokens = {"<pad>", "<bos>", "<sep>"};
        tokens.insert(tokens.end(), chars.begin(), chars.end());
        return from_tokens(std::move(tokens));
    }

    static Vocab from_tokens(std::vector<std::string> tokens) {
        Vocab v;
        v.tokens_ = std::move(tokens);
        if (v.tokens_.size() < 4) throw vocab_error("vocabulary must contain at least one token");
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
            if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
                throw vocab_error("duplicate token in vocabulary: " + v.tokens_[i]);
            }
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<int> encode(const std::string& s) const {
        std::vector<int> ids;
        for (const std::string& cp : utf8_codepoints(s)) {
            auto it = index_.find(cp);
            if (it == index_.end()) throw vocab_error("string contains an out-of-vocabulary character: '" + cp + "'");
            ids.push_back(it->second);
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
                throw vocab_error("token id out of range");
            }
            if (id >= 3) out += tokens_[static_cast<std::size_t>(id)];
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// One model-ready sequence: [BOS] question [SEP] answer for QA items, or
// [BOS] sentence for plain text. target_begin indexes the first token that
// the loss/metric scores; everything before it is conditioning context.
struct ScoredSequence {
    std::vector<int> ids;
    std::size_t target_begin{1};

    std::size_t n_scored() const { return ids.size() - target_begin; }
};

inline ScoredSequence make_qa_sequence(const Vocab& vocab, const std::string& question,
                                       const std::string& answer) {
    if (answer.empty()) throw data_error("QA item has an empty answer");
    ScoredSequence seq;
    seq.ids.push_back(Vocab::kBos);
    for (int id : vocab.encode(question)) seq.ids.push_back(id);
    seq.ids.push_back(Vocab::kSep);
    seq.target_begin = seq.ids.size();
    for (int id : vocab.encode(answer)) seq.ids.push_back(id);
    return seq;
}

inline ScoredSequence make_text_sequence(const Vocab& vocab, const std::string& text) {
    if (text.empty()) throw data_error("empty text sequence");
    ScoredSequence seq;
    seq.ids.push_back(Vocab::kBos);
    seq.target_begin = 1;
    for (int id : vocab.encode(text)) seq.ids.push_back(id);
    return seq;
}

}  // namespace ulab
