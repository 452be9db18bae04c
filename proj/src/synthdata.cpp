#include "mstr/synthdata.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mstr/rng.h"
#include "mstr/serialize.h"

namespace mstr {

namespace {

// Stream labels for seed derivation (arbitrary distinct constants).
constexpr uint64_t kStreamPrototypes = 1;
constexpr uint64_t kStreamUtterance = 2;

}  // namespace

Tensor symbol_prototypes(uint64_t seed, int64_t vocab_size, int64_t feat_dim) {
    check(vocab_size >= 2 && feat_dim >= 1, "symbol_prototypes: bad sizes");
    Tensor protos = Tensor::zeros({vocab_size + 1, feat_dim});
    for (int64_t k = 0; k <= vocab_size; ++k) {
        Rng rng(derive_seed(seed, kStreamPrototypes, static_cast<uint64_t>(k)));
        double norm_sq = 0.0;
        for (int64_t d = 0; d < feat_dim; ++d) {
            double v = rng.normal();
            protos.set(k * feat_dim + d, v);
            norm_sq += v * v;
        }
        double inv = 1.0 / std::sqrt(norm_sq);
        for (int64_t d = 0; d < feat_dim; ++d) {
            protos.set(k * feat_dim + d, protos.get(k * feat_dim + d) * inv);
        }
    }
    return protos;
}

SynthCorpus generate_corpus(const RunConfig& cfg, uint64_t seed, int64_t count,
                            const std::string& id_prefix) {
    check(count >= 1, "generate_corpus: count must be >= 1");
    const int64_t V = cfg.synth_vocab_size;
    const int64_t D = cfg.synth_feat_dim;
    Tensor protos = symbol_prototypes(seed, V, D);

    SynthCorpus corpus;
    corpus.vocab_size = V;
    corpus.feat_dim = D;
    corpus.utterances.reserve(count);

    for (int64_t u = 0; u < count; ++u) {
        Rng rng(derive_seed(seed, kStreamUtterance, static_cast<uint64_t>(u)));
        SynthUtterance utt;
        utt.id = id_prefix + std::to_string(u);

        // Symbols with no immediate repeats, so run-length structure in the
        // frames maps one-to-one onto the transcript.
        int64_t len = rng.uniform_int(cfg.synth_len_min, cfg.synth_len_max);
        utt.tokens.push_back(cfg.bos_id());
        int64_t prev = -1;
        for (int64_t i = 0; i < len; ++i) {
            int64_t sym;
            if (prev < 0) {
                sym = rng.uniform_int(0, V - 1);
            } else {
                sym = rng.uniform_int(0, V - 2);
                if (sym >= prev) ++sym;
            }
            utt.tokens.push_back(sym);
            prev = sym;
        }
        utt.tokens.push_back(cfg.eos_id());

        // Emission lengths per token y_2..y_L; the EOS row of the prototype
        // table is the silence class.
        const int64_t L = static_cast<int64_t>(utt.tokens.size());
        std::vector<int64_t> emit(L - 1);
        int64_t total = 0;
        for (int64_t i = 0; i < L - 1; ++i) {
            emit[i] = rng.uniform_int(cfg.synth_frames_min, cfg.synth_frames_max);
            total += emit[i];
        }
        utt.frames = Tensor::zeros({total, D});
        int64_t frame = 0;
        for (int64_t i = 0; i < L - 1; ++i) {
            int64_t tok = utt.tokens[i + 1];
            int64_t proto_row = tok == cfg.eos_id() ? V : tok;
            for (int64_t f = 0; f < emit[i]; ++f, ++frame) {
                for (int64_t d = 0; d < D; ++d) {
                    double v = protos.at(proto_row, d) + cfg.synth_noise_sigma * rng.normal();
                    utt.frames.set(frame * D + d, v);
                }
            }
            utt.boundaries.push_back(frame);  // frames consumed so far = b_{i+2}
        }
        corpus.utterances.push_back(std::move(utt));
    }
    return corpus;
}

void save_dataset(const std::string& path, const SynthCorpus& corpus) {
    TensorTable table;
    std::ostringstream index;
    index << "vocab_size=" << corpus.vocab_size << "\n";
    index << "feat_dim=" << corpus.feat_dim << "\n";
    index << "count=" << corpus.utterances.size() << "\n";
    for (size_t i = 0; i < corpus.utterances.size(); ++i) {
        const SynthUtterance& utt = corpus.utterances[i];
        table.items.emplace_back("utt" + std::to_string(i) + ".frames", utt.frames);
        index << utt.id << " |";
        for (int64_t t : utt.tokens) index << " " << t;
        index << " |";
        for (int64_t b : utt.boundaries) index << " " << b;
        index << "\n";
    }
    table.text = index.str();
    write_tensor_table(path, kDatasetMagic, table);
}

SynthCorpus load_dataset(const std::string& path) {
    TensorTable table = read_tensor_table(path, kDatasetMagic);
    std::istringstream index(table.text);
    SynthCorpus corpus;
    int64_t count = -1;

    std::string line;
    auto index_error = [&](const std::string& detail) {
        return IoError("dataset '" + path + "': corrupt index block (" + detail + ")");
    };
    for (const char* key : {"vocab_size", "feat_dim", "count"}) {
        if (!std::getline(index, line)) throw index_error("missing header line");
        std::string prefix = std::string(key) + "=";
        if (line.rfind(prefix, 0) != 0) throw index_error("expected " + prefix + "...");
        int64_t v = std::strtoll(line.c_str() + prefix.size(), nullptr, 10);
        if (std::string(key) == "vocab_size") corpus.vocab_size = v;
        if (std::string(key) == "feat_dim") corpus.feat_dim = v;
        if (std::string(key) == "count") count = v;
    }
    if (count < 0) throw index_error("bad count");

    for (int64_t i = 0; i < count; ++i) {
        if (!std::getline(index, line)) throw index_error("missing utterance line");
        SynthUtterance utt;
        std::istringstream ls(line);
        std::string field;
        if (!(ls >> utt.id)) throw index_error("missing id");
        if (!(ls >> field) || field != "|") throw index_error("missing token separator");
        std::vector<int64_t>* dst = &utt.tokens;
        while (ls >> field) {
            if (field == "|") {
                if (dst == &utt.boundaries) throw index_error("extra separator");
                dst = &utt.boundaries;
                continue;
            }
            dst->push_back(std::strtoll(field.c_str(), nullptr, 10));
        }
        if (dst != &utt.boundaries) throw index_error("missing boundary separator");
        if (utt.tokens.size() < 2 || utt.boundaries.size() != utt.tokens.size() - 1) {
            throw index_error("token/boundary count mismatch for " + utt.id);
        }
        const Tensor* frames = table.find("utt" + std::to_string(i) + ".frames");
        if (!frames) throw index_error("missing frames tensor for " + utt.id);
        utt.frames = *frames;
        if (utt.frames.rows() != utt.boundaries.back()) {
            throw index_error("frame count disagrees with final boundary for " + utt.id);
        }
        corpus.utterances.push_back(std::move(utt));
    }
    return corpus;
}

void write_sidecar(const std::string& path, const SynthCorpus& corpus) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open sidecar '" + path + "' for writing");
    for (const SynthUtterance& utt : corpus.utterances) {
        out << utt.id << " |";
        for (int64_t t : utt.tokens) out << " " << t;
        out << " |";
        for (int64_t b : utt.boundaries) out << " " << b;
        out << "\n";
    }
}

double nearest_prototype_error(const SynthCorpus& corpus, const Tensor& prototypes) {
    const int64_t K = prototypes.rows();
    const int64_t D = prototypes.cols();
    const int64_t silence = K - 1;
    int64_t total_ref = 0;
    int64_t total_dist = 0;

    for (const SynthUtterance& utt : corpus.utterances) {
        // Classify frames, collapse runs, drop silence.
        std::vector<int64_t> hyp;
        int64_t prev = -1;
        for (int64_t f = 0; f < utt.num_frames(); ++f) {
            int64_t best = 0;
            double best_d = 0.0;
            for (int64_t k = 0; k < K; ++k) {
                double d = 0.0;
                for (int64_t j = 0; j < D; ++j) {
                    double diff = utt.frames.at(f, j) - prototypes.at(k, j);
                    d += diff * diff;
                }
                if (k == 0 || d < best_d) {
                    best = k;
                    best_d = d;
                }
            }
            if (best != prev && best != silence) hyp.push_back(best);
            prev = best;
        }
        std::vector<int64_t> ref = utt.symbols();

        // Levenshtein distance with unit costs.
        std::vector<int64_t> row(hyp.size() + 1);
        for (size_t j = 0; j <= hyp.size(); ++j) row[j] = static_cast<int64_t>(j);
        for (size_t i = 1; i <= ref.size(); ++i) {
            int64_t diag = row[0];
            row[0] = static_cast<int64_t>(i);
            for (size_t j = 1; j <= hyp.size(); ++j) {
                int64_t cur = row[j];
                int64_t sub = diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
                row[j] = std::min(std::min(row[j] + 1, row[j - 1] + 1), sub);
                diag = cur;
            }
        }
        total_dist += row[hyp.size()];
        total_ref += static_cast<int64_t>(ref.size());
    }
    check(total_ref > 0, "nearest_prototype_error: empty corpus");
    return static_cast<double>(total_dist) / static_cast<double>(total_ref);
}

}  // namespace mstr
