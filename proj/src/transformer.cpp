#include "cedual/transformer.hpp"

#include <cmath>
#include <map>
#include <utility>

namespace cedual {

void LayerConfig::validate() const {
    if (d_model < 1 || d_ff < 1 || heads < 1 || max_len < 1)
        throw ConfigError("layer config: d_model, d_ff, heads, max_len must all be >= 1");
    if (d_model % 2 != 0)
        throw ConfigError("layer config: d_model must be even for the sinusoidal positions, got " +
                          std::to_string(d_model));
    if (d_model % heads != 0)
        throw ConfigError("layer config: d_model " + std::to_string(d_model) +
                          " not divisible by heads " + std::to_string(heads));
    if (d_emb != d_model)
        throw ConfigError("layer config: d_emb " + std::to_string(d_emb) +
                          " must equal d_model " + std::to_string(d_model) +
                          " (no adapter projection)");
    if (layers_enc < 0 || layers_dec_stage < 0)
        throw ConfigError("layer config: negative layer count");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("layer config: dropout_rate " + std::to_string(dropout_rate) +
                          " outside [0, 1)");
}

AttentionMask AttentionMask::padding(std::int64_t nq, const std::vector<std::uint8_t>& key_keep) {
    AttentionMask m;
    m.kind = Kind::Padding;
    const auto nk = static_cast<std::int64_t>(key_keep.size());
    m.allow = BoolMatrix(nq, nk);
    for (std::int64_t q = 0; q < nq; ++q)
        for (std::int64_t k = 0; k < nk; ++k)
            m.allow.set(q, k, key_keep[static_cast<std::size_t>(k)] != 0);
    return m;
}

AttentionMask AttentionMask::causal(std::int64_t n) {
    AttentionMask m;
    m.kind = Kind::Causal;
    m.allow = BoolMatrix(n, n);
    for (std::int64_t q = 0; q < n; ++q)
        for (std::int64_t k = 0; k <= q; ++k) m.allow.set(q, k, true);
    return m;
}

AttentionMask AttentionMask::causal_with_padding(const std::vector<std::uint8_t>& keep) {
    const auto n = static_cast<std::int64_t>(keep.size());
    AttentionMask m;
    m.kind = Kind::Combined;
    m.allow = BoolMatrix(n, n);
    for (std::int64_t q = 0; q < n; ++q)
        for (std::int64_t k = 0; k <= q; ++k)
            m.allow.set(q, k, keep[static_cast<std::size_t>(k)] != 0);
    return m;
}

namespace {

std::vector<double> positional_encoding_values(std::int64_t len, std::int64_t d_model) {
    std::vector<double> pe(static_cast<std::size_t>(len * d_model));
    for (std::int64_t pos = 0; pos < len; ++pos)
        for (std::int64_t i = 0; i < d_model / 2; ++i) {
            const double angle = static_cast<double>(pos) /
                                 std::pow(10000.0, 2.0 * static_cast<double>(i) /
                                                       static_cast<double>(d_model));
            pe[static_cast<std::size_t>(pos * d_model + 2 * i)] = std::sin(angle);
            pe[static_cast<std::size_t>(pos * d_model + 2 * i + 1)] = std::cos(angle);
        }
    return pe;
}

// The table is pure in (len, d); memoize per thread (grown geometrically per
// width) so training loops do not recompute the trig table on every forward.
const std::vector<double>& cached_positions(std::int64_t len, std::int64_t d_model) {
    thread_local std::map<std::int64_t, std::pair<std::int64_t, std::vector<double>>> cache;
    auto& entry = cache[d_model];
    if (entry.first < len) {
        std::int64_t grown = std::max<std::int64_t>(len, entry.first * 2);
        entry = {grown, positional_encoding_values(grown, d_model)};
    }
    return entry.second;
}

void check_positions_config(std::int64_t max_len, std::int64_t d_model) {
    if (max_len < 1)
        throw ConfigError("positional_encoding: max_len must be >= 1, got " +
                          std::to_string(max_len));
    if (d_model < 2 || d_model % 2 != 0)
        throw ConfigError("positional_encoding: even d_model required, got " +
                          std::to_string(d_model));
}

Tensor dropout_in(const Tensor& x, const LayerConfig& cfg, RunContext& ctx) {
    if (!ctx.training || cfg.dropout_rate == 0.0) return x;
    return dropout(x, cfg.dropout_rate, *ctx.rng, true);
}

void check_dropout_rng(const LayerConfig& cfg, const RunContext& ctx, const char* where) {
    if (ctx.training && cfg.dropout_rate > 0.0 && ctx.rng == nullptr)
        throw ContractError(std::string(where) +
                            ": training forward with dropout needs an rng in the run context");
}

}  // namespace

Tensor positional_encoding(std::int64_t max_len, std::int64_t d_model) {
    check_positions_config(max_len, d_model);
    return Tensor::from_data({max_len, d_model}, positional_encoding_values(max_len, d_model));
}

Tensor positional_rows(std::int64_t rows, std::int64_t d_model) {
    check_positions_config(rows, d_model);
    const auto& full = cached_positions(rows, d_model);
    return Tensor::from_data(
        {rows, d_model}, std::vector<double>(full.begin(), full.begin() + rows * d_model));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionMask& mask, const AttentionParams& params,
                            std::int64_t heads, RunContext* ctx) {
    const auto nq = q.rows(), d = q.cols(), nk = k.rows();
    if (k.cols() != d || v.cols() != d)
        throw DimensionError("multi_head_attention: stream widths disagree: " +
                             shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                             shape_str(v.shape()));
    if (v.rows() != nk)
        throw DimensionError("multi_head_attention: key/value row counts disagree: " +
                             shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    if (heads < 1 || d % heads != 0)
        throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    if (mask.allow.rows != nq || mask.allow.cols != nk)
        throw DimensionError("multi_head_attention: mask " +
                             shape_str({mask.allow.rows, mask.allow.cols}) +
                             " does not cover queries x keys " + shape_str({nq, nk}));

    if (ctx) {  // count starved queries once, not once per head
        for (std::int64_t i = 0; i < nq; ++i) {
            bool any = false;
            for (std::int64_t j = 0; j < nk && !any; ++j) any = mask.allowed(i, j);
            if (!any) ++ctx->fully_masked_queries;
        }
    }

    const auto dh = d / heads;
    Tensor Q = add_rowvec(matmul(q, params.wq), params.bq);
    Tensor K = add_rowvec(matmul(k, params.wk), params.bk);
    Tensor V = add_rowvec(matmul(v, params.wv), params.bv);

    std::vector<Tensor> head_ctx;
    head_ctx.reserve(static_cast<std::size_t>(heads));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::int64_t h = 0; h < heads; ++h) {
        Tensor Qh = slice_cols(Q, h * dh, (h + 1) * dh);
        Tensor Kh = slice_cols(K, h * dh, (h + 1) * dh);
        Tensor Vh = slice_cols(V, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt_dh);
        Tensor weights = masked_softmax_rows(scores, mask.allow);
        head_ctx.push_back(matmul(weights, Vh));
    }
    Tensor merged = heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
    return add_rowvec(matmul(merged, params.wo), params.bo);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params) {
    Tensor hidden = relu(add_rowvec(matmul(x, params.w1), params.b1));
    return add_rowvec(matmul(hidden, params.w2), params.b2);
}

Tensor encoder_forward(const Tensor& token_embeddings, const std::vector<std::uint8_t>& pad_keep,
                       const EncoderParams& params, const LayerConfig& cfg, RunContext& ctx) {
    const auto n = token_embeddings.rows(), d = token_embeddings.cols();
    if (d != cfg.d_model)
        throw DimensionError("encoder_forward: embeddings " + shape_str(token_embeddings.shape()) +
                             " do not match d_model " + std::to_string(cfg.d_model));
    if (n > cfg.max_len)
        throw ContractError("encoder_forward: sequence of length " + std::to_string(n) +
                            " exceeds max_len " + std::to_string(cfg.max_len) +
                            "; truncation belongs upstream");
    if (static_cast<std::int64_t>(pad_keep.size()) != n)
        throw DimensionError("encoder_forward: pad mask of length " +
                             std::to_string(pad_keep.size()) + " for " +
                             shape_str(token_embeddings.shape()));
    check_positions_config(cfg.max_len, d);
    check_dropout_rng(cfg, ctx, "encoder_forward");

    Tensor x = add(token_embeddings, positional_rows(n, d));

    const AttentionMask pad_mask = AttentionMask::padding(n, pad_keep);
    for (const auto& layer : params.layers) {
        Tensor attn = multi_head_attention(x, x, x, pad_mask, layer.attn, cfg.heads, &ctx);
        x = layer_norm(add(x, dropout_in(attn, cfg, ctx)), layer.norm_attn.gain,
                       layer.norm_attn.bias);
        Tensor ff = feed_forward(x, layer.ffn);
        x = layer_norm(add(x, dropout_in(ff, cfg, ctx)), layer.norm_ffn.gain,
                       layer.norm_ffn.bias);
    }
    return x;
}

Tensor decoder_stage_forward(const Tensor& memory, const Tensor& target_stream,
                             const AttentionMask& memory_mask, const AttentionMask& causal_mask,
                             const DecoderStageParams& params, const LayerConfig& cfg,
                             RunContext& ctx) {
    const auto n = memory.rows(), m = target_stream.rows();
    if (memory.cols() != cfg.d_model || target_stream.cols() != cfg.d_model)
        throw DimensionError("decoder_stage_forward: memory " + shape_str(memory.shape()) +
                             " / target " + shape_str(target_stream.shape()) +
                             " do not match d_model " + std::to_string(cfg.d_model));
    if (causal_mask.kind == AttentionMask::Kind::Padding)
        throw ContractError(
            "decoder_stage_forward: self-attention mask must be causal; teacher forcing would "
            "leak future positions");
    if (causal_mask.allow.rows != m || causal_mask.allow.cols != m)
        throw DimensionError("decoder_stage_forward: causal mask " +
                             shape_str({causal_mask.allow.rows, causal_mask.allow.cols}) +
                             " for target of length " + std::to_string(m));
    if (memory_mask.allow.rows != m || memory_mask.allow.cols != n)
        throw DimensionError("decoder_stage_forward: memory mask " +
                             shape_str({memory_mask.allow.rows, memory_mask.allow.cols}) +
                             " does not cover target x memory " + shape_str({m, n}));
    check_dropout_rng(cfg, ctx, "decoder_stage_forward");

    Tensor x = target_stream;
    for (const auto& layer : params.layers) {
        Tensor self_attn =
            multi_head_attention(x, x, x, causal_mask, layer.self_attn, cfg.heads, &ctx);
        x = layer_norm(add(x, dropout_in(self_attn, cfg, ctx)), layer.norm_self.gain,
                       layer.norm_self.bias);
        Tensor cross =
            multi_head_attention(x, memory, memory, memory_mask, layer.cross_attn, cfg.heads, &ctx);
        x = layer_norm(add(x, dropout_in(cross, cfg, ctx)), layer.norm_cross.gain,
                       layer.norm_cross.bias);
        Tensor ff = feed_forward(x, layer.ffn);
        x = layer_norm(add(x, dropout_in(ff, cfg, ctx)), layer.norm_ffn.gain,
                       layer.norm_ffn.bias);
    }
    return x;
}

}  // namespace cedual
