#pragma once
// Synthetic corpus with exact gold token/frame alignments.
//
// Each symbol owns a fixed unit-norm prototype vector; a token emits a
// uniform-random number of frames, each frame = prototype + Gaussian noise.
// EOS emits its frames from a dedicated silence prototype, so the end of the
// utterance is audible, every token (EOS included) owns at least one frame,
// and gold boundaries are strictly increasing up to b_L = N.
//
// Boundaries b_i count frames: b_i = index of the last frame emitted by
// token y_i (1-based).  Token y_1 = BOS emits nothing and has no boundary;
// the stored boundary list covers y_2..y_L.  Adjacent symbols are always
// distinct, so collapsing repeated frame labels recovers the transcript --
// the corpus stays solvable by construction and by the nearest-prototype
// oracle below.

#include <cstdint>
#include <string>
#include <vector>

#include "mstr/config.h"
#include "mstr/tensor.h"

namespace mstr {

struct SynthUtterance {
    std::string id;
    std::vector<int64_t> tokens;      // BOS, symbols..., EOS
    std::vector<int64_t> boundaries;  // b_2..b_L, strictly increasing, back() = N
    Tensor frames;                    // [N, feat_dim], f64

    int64_t num_frames() const { return frames.rows(); }
    // Transcript without BOS/EOS (what CER is computed over).
    std::vector<int64_t> symbols() const {
        return {tokens.begin() + 1, tokens.end() - 1};
    }
};

struct SynthCorpus {
    int64_t vocab_size = 0;  // symbols only
    int64_t feat_dim = 0;
    std::vector<SynthUtterance> utterances;
};

// Prototype matrix [vocab_size + 1, feat_dim]: one unit-norm row per symbol
// plus a final silence row (the EOS emission).  Depends only on
// (seed, vocab_size, feat_dim).
Tensor symbol_prototypes(uint64_t seed, int64_t vocab_size, int64_t feat_dim);

// Deterministic given (cfg, seed): per-utterance streams are derived from the
// seed and utterance index, so corpora of different sizes share a prefix.
SynthCorpus generate_corpus(const RunConfig& cfg, uint64_t seed, int64_t count,
                            const std::string& id_prefix);

// Dataset container (tensor table, magic MSDS): frames as one tensor per
// utterance, tokens/boundaries in the text index block.  Round-trips exactly.
void save_dataset(const std::string& path, const SynthCorpus& corpus);
SynthCorpus load_dataset(const std::string& path);

// Human-readable sidecar: one line per utterance, "id | tokens | boundaries".
void write_sidecar(const std::string& path, const SynthCorpus& corpus);

// Sanity oracle: classify each frame to its nearest prototype, collapse runs,
// drop silence, and return the token error rate against the gold symbols.
// Proves the task is solvable before any training is involved.
double nearest_prototype_error(const SynthCorpus& corpus, const Tensor& prototypes);

}  // namespace mstr
