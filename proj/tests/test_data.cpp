// Config parsing, tensor-table round-trips, and synthetic corpus tests.
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <set>

#include "mstr/config.h"
#include "mstr/serialize.h"
#include "mstr/synthdata.h"

using namespace mstr;

namespace {

std::string temp_path(const char* name) {
    return std::string("./tmp_test_") + name;
}

}  // namespace

TEST_CASE("config keys parse, dump, and reject garbage") {
    RunConfig cfg;
    cfg.validate();  // defaults are valid

    SUBCASE("every key is unique and settable from its own dump") {
        std::set<std::string> seen;
        for (const auto& f : config_fields()) {
            CHECK(seen.insert(f.key).second);
        }
        RunConfig other;
        other.apply_text(cfg.dump(/*with_docs=*/true));
        CHECK(other.dump(false) == cfg.dump(false));
    }
    SUBCASE("assignment is order independent, last one wins") {
        RunConfig a, b;
        a.apply_text("train.lambda = 0.5\nencoder.blocks = 3\n");
        b.apply_text("encoder.blocks = 3\ntrain.lambda = 0.2\ntrain.lambda = 0.5\n");
        CHECK(a.dump(false) == b.dump(false));
    }
    SUBCASE("unknown key rejected") {
        CHECK_THROWS_AS(cfg.set_kv("train.turbo", "1"), ConfigError);
    }
    SUBCASE("bad values rejected") {
        CHECK_THROWS_AS(cfg.set_kv("encoder.blocks", "two"), ConfigError);
        CHECK_THROWS_AS(cfg.set_kv("train.lambda", "0.1x"), ConfigError);
        CHECK_THROWS_AS(cfg.set_kv("train.seed", "-1"), ConfigError);
    }
    SUBCASE("validate catches cross-field violations") {
        RunConfig bad = cfg;
        bad.enc_heads = 3;  // does not divide d_model 32
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.train_lr_min = 1.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.train_joint_mode = "sometimes";
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SUBCASE("comments and blank lines") {
        RunConfig c;
        c.apply_text("# header\n\n  train.lambda = 0.25 # trailing\n");
        CHECK(c.train_lambda == 0.25);
        CHECK_THROWS_AS(c.apply_text("not an assignment\n"), ConfigError);
    }
}

TEST_CASE("ablation presets") {
    CHECK(ablation_preset("full").size() == 1);
    CHECK(ablation_preset("full")[0].overrides.empty());

    auto nm = ablation_preset("no-minlt");
    REQUIRE(nm.size() == 1);
    RunConfig cfg;
    for (const auto& [k, v] : nm[0].overrides) cfg.set_kv(k, v);
    CHECK(cfg.train_lambda == 0.0);

    auto nj = ablation_preset("no-joint");
    REQUIRE(nj.size() == 2);
    RunConfig s, n;
    for (const auto& [k, v] : nj[0].overrides) s.set_kv(k, v);
    for (const auto& [k, v] : nj[1].overrides) n.set_kv(k, v);
    CHECK(s.train_joint_mode == "stream-only");
    CHECK(n.train_joint_mode == "nonstream-only");

    auto frozen = ablation_preset("lora-frozen-base");
    RunConfig fb;
    for (const auto& [k, v] : frozen[0].overrides) fb.set_kv(k, v);
    CHECK(fb.lm_train_policy == "adapters-only");
    auto finetune = ablation_preset("full-finetune");
    RunConfig ff;
    for (const auto& [k, v] : finetune[0].overrides) ff.set_kv(k, v);
    CHECK(ff.lm_train_policy == "base-only");

    CHECK_THROWS_AS(ablation_preset("mystery"), ConfigError);
}

TEST_CASE("tensor table round-trips and rejects corruption") {
    std::string path = temp_path("table.bin");
    TensorTable table;
    table.step = 1234;
    table.text = "alpha=1\nbeta=two\n";
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_values({4}, {0.5, -0.5, 1.5, -1.5}, Dtype::f32);
    table.items.emplace_back("weights.a", a);
    table.items.emplace_back("weights.b", b);
    write_tensor_table(path, kCheckpointMagic, table);

    TensorTable back = read_tensor_table(path, kCheckpointMagic);
    CHECK(back.step == 1234);
    CHECK(back.text == table.text);
    REQUIRE(back.items.size() == 2);
    CHECK(back.items[0].first == "weights.a");
    CHECK(back.items[0].second.bit_equal(a));
    CHECK(back.items[1].second.bit_equal(b));
    CHECK(back.find("weights.b") != nullptr);
    CHECK(back.find("weights.c") == nullptr);

    SUBCASE("byte-identical rewrite") {
        std::string path2 = temp_path("table2.bin");
        write_tensor_table(path2, kCheckpointMagic, back);
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), {});
        std::string s2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(s1 == s2);
        std::remove(path2.c_str());
    }
    SUBCASE("wrong magic") {
        CHECK_THROWS_AS(read_tensor_table(path, kDatasetMagic), IoError);
    }
    SUBCASE("truncation") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        std::string cut = temp_path("cut.bin");
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
        out.close();
        CHECK_THROWS_AS(read_tensor_table(cut, kCheckpointMagic), IoError);
        std::remove(cut.c_str());
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_tensor_table("./no_such_file.bin", kCheckpointMagic), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("synthetic corpus structure") {
    RunConfig cfg;
    cfg.synth_noise_sigma = 0.1;
    SynthCorpus corpus = generate_corpus(cfg, 42, 50, "t");

    SUBCASE("boundaries are strictly increasing counts ending at N") {
        for (const auto& utt : corpus.utterances) {
            REQUIRE(utt.tokens.size() >= 2);
            CHECK(utt.tokens.front() == cfg.bos_id());
            CHECK(utt.tokens.back() == cfg.eos_id());
            REQUIRE(utt.boundaries.size() == utt.tokens.size() - 1);
            int64_t prev = 0;
            for (int64_t b : utt.boundaries) {
                CHECK(b > prev);
                prev = b;
            }
            CHECK(utt.boundaries.back() == utt.num_frames());
            // Every token emits at least the configured minimum.
            prev = 0;
            for (int64_t b : utt.boundaries) {
                CHECK(b - prev >= cfg.synth_frames_min);
                CHECK(b - prev <= cfg.synth_frames_max);
                prev = b;
            }
        }
    }
    SUBCASE("no immediate symbol repeats") {
        for (const auto& utt : corpus.utterances) {
            auto syms = utt.symbols();
            for (size_t i = 1; i < syms.size(); ++i) CHECK(syms[i] != syms[i - 1]);
        }
    }
    SUBCASE("same seed bit-identical, different seed different") {
        SynthCorpus again = generate_corpus(cfg, 42, 50, "t");
        REQUIRE(again.utterances.size() == corpus.utterances.size());
        for (size_t i = 0; i < corpus.utterances.size(); ++i) {
            CHECK(again.utterances[i].tokens == corpus.utterances[i].tokens);
            CHECK(again.utterances[i].boundaries == corpus.utterances[i].boundaries);
            CHECK(again.utterances[i].frames.bit_equal(corpus.utterances[i].frames));
        }
        SynthCorpus other = generate_corpus(cfg, 43, 50, "t");
        bool any_diff = false;
        for (size_t i = 0; i < corpus.utterances.size(); ++i) {
            if (other.utterances[i].tokens != corpus.utterances[i].tokens) any_diff = true;
        }
        CHECK(any_diff);
    }
    SUBCASE("corpus prefix stability") {
        SynthCorpus small = generate_corpus(cfg, 42, 10, "t");
        for (size_t i = 0; i < small.utterances.size(); ++i) {
            CHECK(small.utterances[i].frames.bit_equal(corpus.utterances[i].frames));
        }
    }
}

TEST_CASE("noiseless frames equal prototypes and classify perfectly") {
    RunConfig cfg;
    cfg.synth_noise_sigma = 0.0;
    SynthCorpus corpus = generate_corpus(cfg, 7, 20, "z");
    Tensor protos = symbol_prototypes(7, cfg.synth_vocab_size, cfg.synth_feat_dim);

    const auto& utt = corpus.utterances[0];
    int64_t frame = 0;
    for (size_t i = 1; i < utt.tokens.size(); ++i) {
        int64_t tok = utt.tokens[i];
        int64_t row = tok == cfg.eos_id() ? cfg.synth_vocab_size : tok;
        int64_t until = utt.boundaries[i - 1];
        for (; frame < until; ++frame) {
            for (int64_t d = 0; d < cfg.synth_feat_dim; ++d) {
                CHECK(utt.frames.at(frame, d) == protos.at(row, d));
            }
        }
    }
    CHECK(nearest_prototype_error(corpus, protos) == 0.0);
}

TEST_CASE("nearest-prototype oracle stays under the learnability floor at sigma 0.1") {
    RunConfig cfg;
    cfg.synth_noise_sigma = 0.1;
    SynthCorpus corpus = generate_corpus(cfg, 1234, 200, "lf");
    Tensor protos = symbol_prototypes(1234, cfg.synth_vocab_size, cfg.synth_feat_dim);
    double err = nearest_prototype_error(corpus, protos);
    INFO("nearest-prototype token error rate: " << err);
    CHECK(err <= 0.02);
}

TEST_CASE("dataset round-trip") {
    RunConfig cfg;
    SynthCorpus corpus = generate_corpus(cfg, 99, 100, "rt");
    std::string path = temp_path("corpus.ds");
    save_dataset(path, corpus);
    SynthCorpus back = load_dataset(path);

    CHECK(back.vocab_size == corpus.vocab_size);
    CHECK(back.feat_dim == corpus.feat_dim);
    REQUIRE(back.utterances.size() == corpus.utterances.size());
    for (size_t i = 0; i < corpus.utterances.size(); ++i) {
        CHECK(back.utterances[i].id == corpus.utterances[i].id);
        CHECK(back.utterances[i].tokens == corpus.utterances[i].tokens);
        CHECK(back.utterances[i].boundaries == corpus.utterances[i].boundaries);
        CHECK(back.utterances[i].frames.bit_equal(corpus.utterances[i].frames));
    }

    SUBCASE("sidecar lines match the index") {
        std::string side = temp_path("corpus.txt");
        write_sidecar(side, corpus);
        std::ifstream in(side);
        std::string first;
        std::getline(in, first);
        CHECK(first.rfind("rt0 |", 0) == 0);
        std::remove(side.c_str());
    }
    SUBCASE("truncated dataset rejected") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        std::string cut = temp_path("corpus_cut.ds");
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(load_dataset(cut), IoError);
        std::remove(cut.c_str());
    }
    std::remove(path.c_str());
}
