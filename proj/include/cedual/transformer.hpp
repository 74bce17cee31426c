#pragma once

#include <vector>

#include "cedual/tensor.hpp"

namespace cedual {

// Width/depth settings shared by the encoder and both decoder stages.
struct LayerConfig {
    std::int64_t d_model = 64;
    std::int64_t d_emb = 64;  // kept equal to d_model (validated); no adapter projection
    std::int64_t heads = 4;
    std::int64_t d_ff = 128;
    std::int64_t layers_enc = 2;
    std::int64_t layers_dec_stage = 1;
    double dropout_rate = 0.1;
    std::int64_t max_len = 128;

    void validate() const;  // throws ConfigError on any violated constraint
};

// Attention reachability: allow.at(q, k) == true means query q may read key k.
struct AttentionMask {
    enum class Kind { Padding, Causal, Combined };
    Kind kind = Kind::Padding;
    BoolMatrix allow;

    // nq queries over the keys whose keep flag is set.
    static AttentionMask padding(std::int64_t nq, const std::vector<std::uint8_t>& key_keep);
    // strict lower-triangular-inclusive: query t sees keys 0..t
    static AttentionMask causal(std::int64_t n);
    // causal and padding combined for self-attention over a padded stream
    static AttentionMask causal_with_padding(const std::vector<std::uint8_t>& keep);

    bool allowed(std::int64_t q, std::int64_t k) const { return allow.at(q, k); }
};

// Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Tensor positional_encoding(std::int64_t max_len, std::int64_t d_model);

// First `rows` rows of the same table as a constant tensor, memoized per
// thread so hot loops do not rebuild the trig table.
Tensor positional_rows(std::int64_t rows, std::int64_t d_model);

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // w*: (d,d), b*: (d)
};
struct FeedForwardParams {
    Tensor w1, b1, w2, b2;  // (d,d_ff), (d_ff), (d_ff,d), (d)
};
struct NormParams {
    Tensor gain, bias;  // (d)
};
struct EncoderLayerParams {
    AttentionParams attn;
    NormParams norm_attn;
    FeedForwardParams ffn;
    NormParams norm_ffn;
};
struct DecoderLayerParams {
    AttentionParams self_attn;
    NormParams norm_self;
    AttentionParams cross_attn;
    NormParams norm_cross;
    FeedForwardParams ffn;
    NormParams norm_ffn;
};
struct EncoderParams {
    std::vector<EncoderLayerParams> layers;
};
struct DecoderStageParams {
    std::vector<DecoderLayerParams> layers;
};

// Per-forward switches plus diagnostics accumulated during the pass.
struct RunContext {
    bool training = false;
    Rng* rng = nullptr;  // consulted only when training with dropout_rate > 0
    std::int64_t fully_masked_queries = 0;
};

// Scaled dot-product attention with `heads` heads over pre-projection streams
// q:(nq,d), k:(nk,d), v:(nk,d). Masked-out keys receive exactly zero weight; a
// query with no visible key yields a zero context row and bumps the counter.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionMask& mask, const AttentionParams& params,
                            std::int64_t heads, RunContext* ctx = nullptr);

// Position-wise feed-forward: relu(x w1 + b1) w2 + b2.
Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);

// Adds the positional encoding, then applies layers_enc post-norm layers
// (self-attention, FFN; residual then LayerNorm). Padding keys are never
// attended. With zero layers the result is exactly embeddings + positions.
Tensor encoder_forward(const Tensor& token_embeddings, const std::vector<std::uint8_t>& pad_keep,
                       const EncoderParams& params, const LayerConfig& cfg, RunContext& ctx);

// One decoder stage: per layer, causal self-attention over the target stream,
// cross-attention into `memory`, then the FFN, each with residual + LayerNorm.
// The caller supplies the target stream already embedded/position-encoded.
Tensor decoder_stage_forward(const Tensor& memory, const Tensor& target_stream,
                             const AttentionMask& memory_mask, const AttentionMask& causal_mask,
                             const DecoderStageParams& params, const LayerConfig& cfg,
                             RunContext& ctx);

}  // namespace cedual
