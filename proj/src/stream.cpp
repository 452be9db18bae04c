#include "mstr/stream.h"

#include <algorithm>

#include "mstr/common.h"

namespace mstr {

namespace {

int64_t argmax_row(const Tensor& logits) {
    check(logits.defined() && logits.rows() == 1 && logits.cols() >= 1,
          "argmax_row: logits must be [1, vocab]");
    int64_t best = 0;
    for (int64_t j = 1; j < logits.cols(); ++j)
        if (logits.get(j) > logits.get(best)) best = j;  // ties keep the lowest id
    return best;
}

}  // namespace

StreamSession::StreamSession(ParamStore& store, const EncoderModel& enc, const MochaModel& mocha,
                             const LMModel& lm, const RunConfig& cfg)
    : store_(&store),
      enc_(&enc),
      mocha_(&mocha),
      lm_(&lm),
      enc_stream_(store, enc),
      lm_cache_(static_cast<int64_t>(lm.blocks.size()), lm.d_model),
      u_prev_(policy_initial_state(store, mocha)),
      last_token_(cfg.bos_id()),
      threshold_(cfg.mocha_threshold),
      finalize_cap_(cfg.stream_finalize_cap),
      bos_(cfg.bos_id()),
      eos_(cfg.eos_id()) {
    check(enc.d_lm == lm.d_model, "StreamSession: encoder output width must match the LM");
    check(mocha.d_lm == lm.d_model, "StreamSession: policy attends over LM-width rows");
    check(threshold_ > 0.0 && threshold_ < 1.0, "StreamSession: threshold must be in (0, 1)");
    check(finalize_cap_ >= 1, "StreamSession: finalize cap must be >= 1");
}

Tensor StreamSession::h_avail() const {
    Tensor h = Tensor::zeros({avail_, enc_->d_lm});
    for (size_t i = 0; i < h_data_.size(); ++i) h.set(static_cast<int64_t>(i), h_data_[i]);
    return h;
}

int64_t StreamSession::lm_positions() const {
    return lm_cache_.length();
}

std::vector<int64_t> StreamSession::transcript() const {
    std::vector<int64_t> out;
    out.reserve(emissions_.size());
    for (const Emission& e : emissions_) out.push_back(e.token);
    return out;
}

std::vector<Emission> StreamSession::feed_audio(const Tensor& frames, bool final) {
    check(status_ == StreamStatus::kOpen, "feed_audio: stream is closed");
    check(!audio_done_, "feed_audio: final audio already flushed");
    Tensor rows = enc_stream_.feed(frames, final);
    if (rows.defined() && rows.numel() > 0) {
        const double* src = rows.f64();
        h_data_.insert(h_data_.end(), src, src + rows.numel());
        avail_ += rows.rows();
    }
    if (final) audio_done_ = true;
    return drain();
}

std::vector<Emission> StreamSession::drain() {
    std::vector<Emission> out;
    while (status_ == StreamStatus::kOpen && t_prev_ < avail_) {
        auto t = scan_trigger(*store_, *mocha_, u_prev_, h_avail(), t_prev_ + 1, threshold_);
        if (!t) break;
        out.push_back(emit_at(*t));
    }
    return out;
}

Emission StreamSession::emit_at(int64_t t) {
    check(t > t_prev_ && t <= avail_, "emit_at: trigger outside the pending rows");
    const Tensor h = h_avail();

    // Policy feedback: window-attend at the trigger, then advance the
    // decoder state with the previous token.  The policy's own token logits
    // are unused at inference; the language model picks the token.
    PolicyStep ps = policy_attend_and_step(*store_, *mocha_, u_prev_, h, t, last_token_);

    // Language model: the buffered audio segment, then the previous token.
    Tensor row = Tensor::zeros({1, enc_->d_lm});
    for (int64_t r = t_prev_; r < t; ++r) {
        for (int64_t j = 0; j < enc_->d_lm; ++j) row.set(j, h.at(r, j));
        lm_step_audio(*store_, *lm_, lm_cache_, row);
    }
    Tensor logits = lm_step_token(*store_, *lm_, lm_cache_, last_token_);

    const int64_t next = argmax_row(logits);
    u_prev_ = ps.state;
    t_prev_ = t;
    last_token_ = next;
    Emission e{static_cast<int64_t>(emissions_.size()) + 1, next, t, avail_};
    emissions_.push_back(e);
    if (next == eos_) status_ = StreamStatus::kClosed;
    return e;
}

std::vector<Emission> StreamSession::finalize() {
    std::vector<Emission> out;
    if (status_ == StreamStatus::kClosed) return out;
    check(audio_done_, "finalize: final audio not flushed yet");
    status_ = StreamStatus::kFinalizing;

    // Consume whatever frames the policy never claimed in one forced step.
    if (t_prev_ < avail_) out.push_back(emit_at(avail_));

    // Token-only steps: no audio remains, so only the cache advances.
    int64_t extra = 0;
    while (status_ == StreamStatus::kFinalizing) {
        if (extra >= finalize_cap_) {
            truncated_ = true;
            break;
        }
        Tensor logits = lm_step_token(*store_, *lm_, lm_cache_, last_token_);
        const int64_t next = argmax_row(logits);
        last_token_ = next;
        Emission e{static_cast<int64_t>(emissions_.size()) + 1, next, avail_, avail_};
        emissions_.push_back(e);
        out.push_back(e);
        ++extra;
        if (next == eos_) status_ = StreamStatus::kClosed;
    }
    status_ = StreamStatus::kClosed;
    return out;
}

LatencyReport latency_report(const std::vector<Emission>& emissions,
                             const std::vector<int64_t>& boundaries, int64_t eos_id,
                             double frame_ms) {
    check(frame_ms > 0.0, "latency_report: frame duration must be positive");
    LatencyReport rep;
    rep.frame_duration_ms = frame_ms;
    if (emissions.size() != boundaries.size()) return rep;  // unaligned: no statistics
    rep.aligned = true;
    for (size_t k = 0; k < emissions.size(); ++k) {
        if (emissions[k].token == eos_id) continue;
        rep.delays.push_back(emissions[k].trigger - boundaries[k]);
    }
    rep.scored = static_cast<int64_t>(rep.delays.size());
    if (rep.delays.empty()) return rep;
    rep.first = static_cast<double>(rep.delays.front());
    rep.last = static_cast<double>(rep.delays.back());
    // Token count including BOS and EOS; the middle token's emission position
    // is ceil((L-1)/2) + 1 in token subscripts, i.e. L/2 - 1 among emissions.
    const int64_t l_tokens = static_cast<int64_t>(boundaries.size()) + 1;
    int64_t mid_pos = l_tokens / 2 - 1;
    mid_pos = std::clamp<int64_t>(mid_pos, 0, rep.scored - 1);
    rep.mid = static_cast<double>(rep.delays[static_cast<size_t>(mid_pos)]);
    double sum = 0.0;
    for (int64_t d : rep.delays) sum += static_cast<double>(d);
    rep.avg = sum / static_cast<double>(rep.scored);
    return rep;
}

}  // namespace mstr
