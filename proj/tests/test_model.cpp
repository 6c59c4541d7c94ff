#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracle.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/model.hpp"
#include "ulab/vocab.hpp"

using ulab::BoundModel;
using ulab::Model;
using ulab::ModelConfig;
using ulab::Tape;
using ulab::Tensor;
using ulab::Vocab;

namespace {

ModelConfig tiny_config(std::size_t vocab = 4, std::uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.embed_dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.ff_mult = 2;
    cfg.context_len = 16;
    cfg.init_seed = seed;
    return cfg;
}

// All-zero parameters: every next-token distribution is exactly uniform.
template <typename Real>
Model<Real> zero_model(const ModelConfig& cfg) {
    Model<Real> m = ulab::init_model<Real>(cfg);
    for (std::size_t i = 0; i < m.n_params(); ++i) {
        m.set_param_values(i, std::vector<Real>(m.params()[i].numel(), Real(0)));
    }
    return m;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("init_model is deterministic and seed-sensitive") {
    ModelConfig cfg = tiny_config(11, 123);
    Model<float> a = ulab::init_model<float>(cfg);
    Model<float> b = ulab::init_model<float>(cfg);
    REQUIRE(a.n_params() == b.n_params());
    for (std::size_t i = 0; i < a.n_params(); ++i) {
        REQUIRE(a.params()[i].values == b.params()[i].values);
    }

    cfg.init_seed = 124;
    Model<float> c = ulab::init_model<float>(cfg);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.n_params() && !any_diff; ++i) {
        any_diff = a.params()[i].values != c.params()[i].values;
    }
    REQUIRE(any_diff);
}

TEST_CASE("parameter count matches the closed form") {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.embed_dim = 12;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.ff_mult = 2;
    cfg.context_len = 20;
    Model<float> m = ulab::init_model<float>(cfg);

    std::size_t d = 12, f = 24, v = 11, t = 20, layers = 3;
    std::size_t expected =
        v * d + t * d + layers * (2 * d + 3 * d * d + d * d + 2 * d + d * f + f + f * d + d) +
        2 * d + d * v;
    REQUIRE(m.param_count() == expected);
    REQUIRE(m.param_count() == ulab::expected_param_count(cfg));
}

TEST_CASE("invalid config rejected") {
    ModelConfig cfg = tiny_config();
    cfg.n_heads = 3;  // does not divide embed_dim = 8
    REQUIRE_THROWS_AS(ulab::init_model<float>(cfg), ulab::config_error);
}

TEST_CASE("uniform model: answer log-probs") {
    Model<double> m = zero_model<double>(tiny_config(4));
    auto res = ulab::answer_logprob(m, {3, 3}, {3, 3, 3});
    REQUIRE(res.total_logprob == Catch::Approx(3.0 * std::log(0.25)).margin(1e-12));
    REQUIRE(res.normalized_prob == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(res.per_token_logprobs.size() == 3);

    auto single = ulab::answer_logprob(m, {3, 3}, {3});
    REQUIRE(single.normalized_prob == Catch::Approx(std::exp(single.total_logprob)).margin(1e-15));
}

TEST_CASE("answer_logprob matches brute-force enumeration") {
    ModelConfig cfg = tiny_config(4, 99);
    Model<double> m = ulab::init_model<double>(cfg);
    std::vector<int> q = {3, 0};

    double total_prob = 0.0;
    for (int a0 = 0; a0 < 4; ++a0) {
        for (int a1 = 0; a1 < 4; ++a1) {
            std::vector<int> a = {a0, a1};
            auto res = ulab::answer_logprob(m, q, a);
            double expected = oracle::answer_prob(m, q, a);
            REQUIRE(std::exp(res.total_logprob) == Catch::Approx(expected).epsilon(1e-9));
            total_prob += expected;
        }
    }
    // The 16 two-token answers exhaust the joint distribution.
    REQUIRE(total_prob == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("answer_logprob error paths") {
    Model<double> m = ulab::init_model<double>(tiny_config(4));
    REQUIRE_THROWS_AS(ulab::answer_logprob(m, {0, 1}, {}), ulab::data_error);
    REQUIRE_THROWS_AS(ulab::answer_logprob(m, {0, 9}, {1}), ulab::data_error);
    std::vector<int> too_long(20, 3);
    REQUIRE_THROWS_AS(ulab::answer_logprob(m, too_long, {1}), ulab::data_error);
}

TEST_CASE("next-token distributions sum to one") {
    ModelConfig cfg = tiny_config(6, 5);
    std::vector<int> ids = {1, 3, 4, 5, 3};

    Model<double> md = ulab::init_model<double>(cfg);
    Tape<double> td;
    BoundModel<double> bd(md, td, false);
    Tensor<double> rows_d = bd.sequence_log_probs(ids);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cfg.vocab_size; ++c) s += std::exp(rows_d.at(r, c));
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }

    Model<float> mf = md.cast<float>();
    Tape<float> tf;
    BoundModel<float> bf(mf, tf, false);
    Tensor<float> rows_f = bf.sequence_log_probs(ids);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cfg.vocab_size; ++c) s += std::exp(double(rows_f.at(r, c)));
        REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("causal masking is exact") {
    ModelConfig cfg = tiny_config(6, 17);
    Model<double> m = ulab::init_model<double>(cfg);
    std::vector<int> ids = {1, 2, 3, 4, 5};
    std::vector<int> altered = ids;
    altered[4] = 0;  // only the last position changes

    Tape<double> t1;
    BoundModel<double> b1(m, t1, false);
    Tensor<double> r1 = b1.sequence_log_probs(ids);
    Tape<double> t2;
    BoundModel<double> b2(m, t2, false);
    Tensor<double> r2 = b2.sequence_log_probs(altered);

    for (std::size_t pos = 0; pos < 4; ++pos) {
        for (std::size_t c = 0; c < cfg.vocab_size; ++c) {
            REQUIRE(r1.at(pos, c) == r2.at(pos, c));  // bitwise equal
        }
    }
}

TEST_CASE("total log-prob equals the sum of per-token log-probs exactly") {
    ModelConfig cfg = tiny_config(5, 3);
    Model<float> m = ulab::init_model<float>(cfg);
    ulab::ScoredSequence seq;
    seq.ids = {ulab::Vocab::kBos, 3, 4, ulab::Vocab::kSep, 3, 3, 4};
    seq.target_begin = 4;

    Tape<float> t;
    BoundModel<float> b(m, t, false);
    ulab::ScoredGraph<float> g = ulab::build_scored_graph(b, seq);
    float acc = 0.0f;
    for (float v : g.per_token) acc += v;
    REQUIRE(g.total.item() == acc);
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelConfig cfg = tiny_config(7, 21);
    Model<float> m = ulab::init_model<float>(cfg);
    Vocab vocab = Vocab::build({"abcd"});
    auto path = temp_file("ulab_test_ckpt.ulck");

    ulab::save_checkpoint(m, vocab, path);
    ulab::Checkpoint ck = ulab::load_checkpoint(path);

    REQUIRE(ck.model.config() == cfg);
    REQUIRE(ck.vocab.tokens() == vocab.tokens());
    REQUIRE(ck.model.n_params() == m.n_params());
    for (std::size_t i = 0; i < m.n_params(); ++i) {
        REQUIRE(ck.model.params()[i].values == m.params()[i].values);
        REQUIRE(ck.model.names()[i] == m.names()[i]);
    }

    // Reloaded model reproduces identical scores.
    Model<double> md = m.cast<double>();
    Model<double> rd = ck.model.cast<double>();
    auto a = ulab::answer_logprob(md, {3, 4}, {5, 6});
    auto b = ulab::answer_logprob(rd, {3, 4}, {5, 6});
    REQUIRE(a.total_logprob == b.total_logprob);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint corruption detected") {
    Model<float> m = ulab::init_model<float>(tiny_config(5, 2));
    Vocab vocab = Vocab::build({"ab"});
    auto path = temp_file("ulab_test_ckpt_bad.ulck");
    ulab::save_checkpoint(m, vocab, path);

    SECTION("truncated file") {
        auto sz = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, sz / 2);
        REQUIRE_THROWS_AS(ulab::load_checkpoint(path), ulab::corruption_error);
    }
    SECTION("flipped payload byte fails the checksum") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-40, std::ios::end);
        char c;
        f.read(&c, 1);
        f.seekp(-40, std::ios::end);
        c = static_cast<char>(c ^ 0x5a);
        f.write(&c, 1);
        f.close();
        REQUIRE_THROWS_AS(ulab::load_checkpoint(path), ulab::corruption_error);
    }
    SECTION("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
        f.close();
        REQUIRE_THROWS_AS(ulab::load_checkpoint(path), ulab::corruption_error);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(ulab::load_checkpoint(temp_file("does_not_exist.ulck")), ulab::io_error);
    }
    std::filesystem::remove(path);
}

TEST_CASE("vocab build, round trip and specials") {
    Vocab v = Vocab::build({"ab ba"});
    REQUIRE(v.tokens() == std::vector<std::string>{"<pad>", "<bos>", "<sep>", " ", "a", "b"});
    REQUIRE(v.size() == 6);

    REQUIRE(v.decode(v.encode("ab ba")) == "ab ba");
    // Order of corpus strings does not matter.
    Vocab v2 = Vocab::build({"ba", "ab", " "});
    REQUIRE(v2.tokens() == v.tokens());

    REQUIRE_THROWS_AS(v.encode("abc"), ulab::vocab_error);
    REQUIRE_THROWS_AS(Vocab::build({}), ulab::vocab_error);
}

TEST_CASE("vocab handles multi-byte codepoints") {
    Vocab v = Vocab::build({"héllo", "мир"});
    REQUIRE(v.decode(v.encode("héllo")) == "héllo");
    REQUIRE(v.decode(v.encode("мир")) == "мир");
}
