#include "cedual/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cedual {

namespace {

void check_token_ids(const std::vector<std::int64_t>& ids, std::int64_t vocab_size,
                     const char* what) {
    for (std::int64_t id : ids)
        if (id < 0 || id >= vocab_size)
            throw DomainError(std::string(what) + ": token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab_size));
}

void check_stream(const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& keep,
                  std::int64_t vocab_size, std::int64_t max_len, const char* what) {
    if (ids.empty())
        throw ContractError(std::string(what) + ": stream must contain at least one token");
    if (keep.size() != ids.size())
        throw DimensionError(std::string(what) + ": " + std::to_string(ids.size()) +
                             " tokens but " + std::to_string(keep.size()) + " keep flags");
    if (static_cast<std::int64_t>(ids.size()) > max_len)
        throw ContractError(std::string(what) + ": stream of length " +
                            std::to_string(ids.size()) + " exceeds max_len " +
                            std::to_string(max_len));
    check_token_ids(ids, vocab_size, what);
}

}  // namespace

std::string variant_name(DecoderVariant v) {
    switch (v) {
        case DecoderVariant::Fcte: return "fcte";
        case DecoderVariant::Fetc: return "fetc";
        case DecoderVariant::ContentOnly: return "content-only";
        case DecoderVariant::EmotionOnly: return "emotion-only";
    }
    throw ContractError("variant_name: unhandled enum value");
}

DecoderVariant variant_from_name(const std::string& name) {
    if (name == "fcte") return DecoderVariant::Fcte;
    if (name == "fetc") return DecoderVariant::Fetc;
    if (name == "content-only") return DecoderVariant::ContentOnly;
    if (name == "emotion-only") return DecoderVariant::EmotionOnly;
    throw ConfigError("unknown decoder variant '" + name +
                      "' (expected fcte, fetc, content-only, or emotion-only)");
}

std::string content_head_mode_name(ContentHeadMode m) {
    switch (m) {
        case ContentHeadMode::Adversarial: return "adversarial";
        case ContentHeadMode::Joint: return "joint";
    }
    throw ContractError("content_head_mode_name: unhandled enum value");
}

ContentHeadMode content_head_mode_from_name(const std::string& name) {
    if (name == "adversarial") return ContentHeadMode::Adversarial;
    if (name == "joint") return ContentHeadMode::Joint;
    throw ConfigError("unknown content head mode '" + name +
                      "' (expected adversarial or joint)");
}

void ModelConfig::validate() const {
    layer.validate();
    if (vocab_size <= static_cast<std::int64_t>(special_ids::kCount))
        throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                          " leaves no room beyond the " +
                          std::to_string(special_ids::kCount) + " reserved ids");
    if (num_emotions < 2)
        throw ConfigError("num_emotions must be at least 2, got " +
                          std::to_string(num_emotions));
    if (weight_dis_c < 0.0 || weight_dis_e < 0.0)
        throw ConfigError("disentanglement loss weights must be non-negative");
}

void EmotionLabel::validate() const {
    if (num_classes < 2)
        throw DomainError("emotion label set needs at least 2 classes, got " +
                          std::to_string(num_classes));
    if (index < 0 || index >= num_classes)
        throw DomainError("emotion label " + std::to_string(index) + " outside [0, " +
                          std::to_string(num_classes) + ")");
}

std::vector<double> EmotionLabel::one_hot() const {
    validate();
    std::vector<double> v(static_cast<std::size_t>(num_classes), 0.0);
    v[static_cast<std::size_t>(index)] = 1.0;
    return v;
}

// ---- ParamStore ----

Tensor ParamStore::create(const std::string& name, const Shape& shape, Init init, Rng& rng) {
    if (params_.count(name) != 0)
        throw ContractError("parameter '" + name + "' created twice");
    Tensor t;
    switch (init) {
        case Init::Zeros:
            t = Tensor::zeros(shape, /*requires_grad=*/true);
            break;
        case Init::Ones:
            t = Tensor::ones(shape, /*requires_grad=*/true);
            break;
        case Init::XavierUniform: {
            const std::int64_t fan_in = shape.empty() ? 1 : shape.front();
            const std::int64_t fan_out = shape.size() >= 2 ? shape[1] : shape.front();
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            t = Tensor::uniform(shape, -limit, limit, rng, /*requires_grad=*/true);
            break;
        }
    }
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, _] : params_) out.push_back(name);  // map is ordered
    return out;
}

std::int64_t ParamStore::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& [_, t] : params_) total += t.numel();
    return total;
}

void ParamStore::zero_grads() {
    for (auto& [_, t] : params_) t.zero_grad();
}

// ---- CedualModel ----

AttentionParams CedualModel::create_attention(const std::string& prefix, Rng& rng) {
    const std::int64_t d = cfg_.layer.d_model;
    AttentionParams p;
    p.wq = store_.create(prefix + ".wq", {d, d}, ParamStore::Init::XavierUniform, rng);
    p.bq = store_.create(prefix + ".bq", {d}, ParamStore::Init::Zeros, rng);
    p.wk = store_.create(prefix + ".wk", {d, d}, ParamStore::Init::XavierUniform, rng);
    p.bk = store_.create(prefix + ".bk", {d}, ParamStore::Init::Zeros, rng);
    p.wv = store_.create(prefix + ".wv", {d, d}, ParamStore::Init::XavierUniform, rng);
    p.bv = store_.create(prefix + ".bv", {d}, ParamStore::Init::Zeros, rng);
    p.wo = store_.create(prefix + ".wo", {d, d}, ParamStore::Init::XavierUniform, rng);
    p.bo = store_.create(prefix + ".bo", {d}, ParamStore::Init::Zeros, rng);
    return p;
}

FeedForwardParams CedualModel::create_ffn(const std::string& prefix, Rng& rng) {
    const std::int64_t d = cfg_.layer.d_model, f = cfg_.layer.d_ff;
    FeedForwardParams p;
    p.w1 = store_.create(prefix + ".w1", {d, f}, ParamStore::Init::XavierUniform, rng);
    p.b1 = store_.create(prefix + ".b1", {f}, ParamStore::Init::Zeros, rng);
    p.w2 = store_.create(prefix + ".w2", {f, d}, ParamStore::Init::XavierUniform, rng);
    p.b2 = store_.create(prefix + ".b2", {d}, ParamStore::Init::Zeros, rng);
    return p;
}

NormParams CedualModel::create_norm(const std::string& prefix, Rng& rng) {
    const std::int64_t d = cfg_.layer.d_model;
    NormParams p;
    p.gain = store_.create(prefix + ".gain", {d}, ParamStore::Init::Ones, rng);
    p.bias = store_.create(prefix + ".bias", {d}, ParamStore::Init::Zeros, rng);
    return p;
}

DecoderLayerParams CedualModel::create_decoder_layer(const std::string& prefix, Rng& rng) {
    DecoderLayerParams p;
    p.self_attn = create_attention(prefix + ".self", rng);
    p.norm_self = create_norm(prefix + ".norm_self", rng);
    p.cross_attn = create_attention(prefix + ".cross", rng);
    p.norm_cross = create_norm(prefix + ".norm_cross", rng);
    p.ffn = create_ffn(prefix + ".ffn", rng);
    p.norm_ffn = create_norm(prefix + ".norm_ffn", rng);
    return p;
}

CedualModel::CedualModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const std::int64_t d = cfg_.layer.d_model;
    const std::int64_t k = cfg_.num_emotions;
    const std::int64_t v = cfg_.vocab_size;

    embed_ = store_.create("embed.tokens", {v, d}, ParamStore::Init::XavierUniform, rng);

    for (std::int64_t i = 0; i < cfg_.layer.layers_enc; ++i) {
        const std::string prefix = "enc.l" + std::to_string(i);
        EncoderLayerParams layer;
        layer.attn = create_attention(prefix + ".attn", rng);
        layer.norm_attn = create_norm(prefix + ".norm_attn", rng);
        layer.ffn = create_ffn(prefix + ".ffn", rng);
        layer.norm_ffn = create_norm(prefix + ".norm_ffn", rng);
        encoder_.layers.push_back(layer);
    }

    view_c_w_ = store_.create("view.content.w", {d, d}, ParamStore::Init::XavierUniform, rng);
    view_c_b_ = store_.create("view.content.b", {d}, ParamStore::Init::Zeros, rng);
    view_e_w_ = store_.create("view.emotion.w", {d, d}, ParamStore::Init::XavierUniform, rng);
    view_e_b_ = store_.create("view.emotion.b", {d}, ParamStore::Init::Zeros, rng);
    cls_c_w_ = store_.create("cls.content.w", {d, k}, ParamStore::Init::XavierUniform, rng);
    cls_c_b_ = store_.create("cls.content.b", {k}, ParamStore::Init::Zeros, rng);
    cls_e_w_ = store_.create("cls.emotion.w", {d, k}, ParamStore::Init::XavierUniform, rng);
    cls_e_b_ = store_.create("cls.emotion.b", {k}, ParamStore::Init::Zeros, rng);

    const bool two_stage =
        cfg_.variant == DecoderVariant::Fcte || cfg_.variant == DecoderVariant::Fetc;
    for (std::int64_t i = 0; i < cfg_.layer.layers_dec_stage; ++i)
        stage1_.layers.push_back(create_decoder_layer("dec.s1.l" + std::to_string(i), rng));
    if (two_stage)
        for (std::int64_t i = 0; i < cfg_.layer.layers_dec_stage; ++i)
            stage2_.layers.push_back(create_decoder_layer("dec.s2.l" + std::to_string(i), rng));

    out_w_ = store_.create("out.w", {d, v}, ParamStore::Init::XavierUniform, rng);
    out_b_ = store_.create("out.b", {v}, ParamStore::Init::Zeros, rng);
}

DisentangledContext CedualModel::encode_dual(const std::vector<std::int64_t>& context_ids,
                                             const std::vector<std::uint8_t>& pad_keep,
                                             RunContext& ctx) const {
    check_stream(context_ids, pad_keep, cfg_.vocab_size, cfg_.layer.max_len, "encode_dual");
    const std::int64_t d = cfg_.layer.d_model;

    DisentangledContext out;
    out.pad_keep = pad_keep;
    Tensor emb = embedding_rows(embed_, context_ids);
    out.h = encoder_forward(emb, pad_keep, encoder_, cfg_.layer, ctx);
    out.h_c = relu(add_rowvec(matmul(out.h, view_c_w_), view_c_b_));
    out.h_e = relu(add_rowvec(matmul(out.h, view_e_w_), view_e_b_));
    out.v_c = mean_pool(out.h_c, pad_keep);
    out.v_e = mean_pool(out.h_e, pad_keep);

    // In adversarial routing the entropy objective sees a frozen copy of the
    // content classifier: gradients reach the view head and encoder but can
    // never flatten the classifier itself.
    const bool freeze = cfg_.content_head_mode == ContentHeadMode::Adversarial;
    Tensor wc = freeze ? cls_c_w_.detach() : cls_c_w_;
    Tensor bc = freeze ? cls_c_b_.detach() : cls_c_b_;
    out.logits_c = row_vector(add_rowvec(matmul(reshape(out.v_c, {1, d}), wc), bc), 0);
    out.logits_e =
        row_vector(add_rowvec(matmul(reshape(out.v_e, {1, d}), cls_e_w_), cls_e_b_), 0);
    out.y_c = softmax(out.logits_c, 0);
    out.y_e = softmax(out.logits_e, 0);
    return out;
}

std::tuple<Tensor, Tensor, Tensor> CedualModel::disentanglement_loss(
    const DisentangledContext& enc, const EmotionLabel& emotion) const {
    emotion.validate();
    if (!enc.y_c.defined() || !enc.logits_e.defined())
        throw ContractError("disentanglement_loss: encoder outputs missing");
    if (enc.y_c.dim(0) != emotion.num_classes || enc.logits_e.dim(0) != emotion.num_classes)
        throw DimensionError("disentanglement_loss: " + std::to_string(emotion.num_classes) +
                             " classes vs distributions of size " +
                             std::to_string(enc.y_c.dim(0)) + " / " +
                             std::to_string(enc.logits_e.dim(0)));

    Tensor l_dis_c = scale(entropy_of_distribution(enc.y_c), cfg_.weight_dis_c);
    Tensor l_dis_e =
        scale(cross_entropy_from_logits(enc.logits_e, emotion.index), cfg_.weight_dis_e);
    Tensor l_dis = sub(l_dis_e, l_dis_c);
    return {l_dis_c, l_dis_e, l_dis};
}

Tensor CedualModel::embed_response(const std::vector<std::int64_t>& response_in) const {
    if (response_in.empty())
        throw ContractError("embed_response: response stream must contain at least one token");
    if (static_cast<std::int64_t>(response_in.size()) > cfg_.layer.max_len)
        throw ContractError("embed_response: stream of length " +
                            std::to_string(response_in.size()) + " exceeds max_len " +
                            std::to_string(cfg_.layer.max_len));
    check_token_ids(response_in, cfg_.vocab_size, "embed_response");
    const auto m = static_cast<std::int64_t>(response_in.size());
    return add(embedding_rows(embed_, response_in), positional_rows(m, cfg_.layer.d_model));
}

Tensor CedualModel::two_stage_decode(const Tensor& memory_first, const Tensor& memory_second,
                                     const Tensor& response_embeddings,
                                     const AttentionMask& memory_mask,
                                     const AttentionMask& causal_mask, RunContext& ctx) const {
    if (stage2_.layers.empty())
        throw ContractError("two_stage_decode: variant '" + variant_name(cfg_.variant) +
                            "' has a single decoder stage");
    if (memory_first.rows() != memory_second.rows() ||
        memory_first.cols() != memory_second.cols())
        throw DimensionError("two_stage_decode: memories " + shape_str(memory_first.shape()) +
                             " vs " + shape_str(memory_second.shape()) + " must match");
    Tensor v1 = decoder_stage_forward(memory_first, response_embeddings, memory_mask,
                                      causal_mask, stage1_, cfg_.layer, ctx);
    return decoder_stage_forward(memory_second, v1, memory_mask, causal_mask, stage2_,
                                 cfg_.layer, ctx);
}

Tensor CedualModel::single_stage_decode(const Tensor& memory, const Tensor& response_embeddings,
                                        const AttentionMask& memory_mask,
                                        const AttentionMask& causal_mask,
                                        RunContext& ctx) const {
    return decoder_stage_forward(memory, response_embeddings, memory_mask, causal_mask, stage1_,
                                 cfg_.layer, ctx);
}

Tensor CedualModel::decode(const DisentangledContext& enc,
                           const std::vector<std::int64_t>& response_in,
                           const std::vector<std::uint8_t>& response_keep,
                           RunContext& ctx) const {
    check_stream(response_in, response_keep, cfg_.vocab_size, cfg_.layer.max_len, "decode");
    if (!enc.h_c.defined() || !enc.h_e.defined())
        throw ContractError("decode: encoder views missing");
    const auto m = static_cast<std::int64_t>(response_in.size());
    Tensor emb = embed_response(response_in);
    AttentionMask memory_mask = AttentionMask::padding(m, enc.pad_keep);
    // Responses are right-padded, so the causal triangle already hides every
    // padded key from every kept query; pad rows themselves fall out of the
    // loss via response_keep.
    AttentionMask causal = AttentionMask::causal(m);

    switch (cfg_.variant) {
        case DecoderVariant::Fcte:
            return two_stage_decode(enc.h_c, enc.h_e, emb, memory_mask, causal, ctx);
        case DecoderVariant::Fetc:
            return two_stage_decode(enc.h_e, enc.h_c, emb, memory_mask, causal, ctx);
        case DecoderVariant::ContentOnly:
            return single_stage_decode(enc.h_c, emb, memory_mask, causal, ctx);
        case DecoderVariant::EmotionOnly:
            return single_stage_decode(enc.h_e, emb, memory_mask, causal, ctx);
    }
    throw ContractError("decode: unhandled variant");
}

Tensor CedualModel::output_logits(const Tensor& decoder_states) const {
    if (decoder_states.ndim() != 2 || decoder_states.cols() != cfg_.layer.d_model)
        throw DimensionError("output_logits: states " + shape_str(decoder_states.shape()) +
                             " incompatible with d_model " +
                             std::to_string(cfg_.layer.d_model));
    return add_rowvec(matmul(decoder_states, out_w_), out_b_);
}

Tensor CedualModel::generation_loss(const Tensor& decoder_states,
                                    const std::vector<std::int64_t>& gold,
                                    const std::vector<std::uint8_t>& response_keep) const {
    return masked_mean_cross_entropy(output_logits(decoder_states), gold, response_keep);
}

LossBreakdown CedualModel::total_loss(const Tensor& l_gen, const Tensor& l_dis_c,
                                      const Tensor& l_dis_e) const {
    LossBreakdown b;
    b.l_dis_c = l_dis_c;
    b.l_dis_e = l_dis_e;
    b.l_dis = sub(l_dis_e, l_dis_c);
    b.l_gen = l_gen;
    b.l_total = add(l_gen, b.l_dis);
    return b;
}

CedualModel::ExampleLosses CedualModel::example_losses(
    const std::vector<std::int64_t>& context_ids, const std::vector<std::uint8_t>& context_keep,
    const std::vector<std::int64_t>& response_in, const std::vector<std::int64_t>& response_gold,
    const std::vector<std::uint8_t>& response_keep, const EmotionLabel& emotion,
    RunContext& ctx) const {
    if (response_gold.size() != response_in.size())
        throw DimensionError("example_losses: teacher input of length " +
                             std::to_string(response_in.size()) + " but " +
                             std::to_string(response_gold.size()) + " gold tokens");
    check_token_ids(response_gold, cfg_.vocab_size, "example_losses");

    DisentangledContext enc = encode_dual(context_ids, context_keep, ctx);
    auto [l_dis_c, l_dis_e, l_dis] = disentanglement_loss(enc, emotion);
    Tensor states = decode(enc, response_in, response_keep, ctx);
    Tensor l_gen = generation_loss(states, response_gold, response_keep);

    ExampleLosses out;
    out.breakdown = total_loss(l_gen, l_dis_c, l_dis_e);
    if (cfg_.content_head_mode == ContentHeadMode::Adversarial) {
        // Auxiliary fit keeps the (live) content classifier an honest probe of
        // the detached pooled features; it is optimized outside l_total.
        const std::int64_t d = cfg_.layer.d_model;
        Tensor fit_logits = row_vector(
            add_rowvec(matmul(reshape(enc.v_c.detach(), {1, d}), cls_c_w_), cls_c_b_), 0);
        out.content_classifier_fit = cross_entropy_from_logits(fit_logits, emotion.index);
    }
    return out;
}

EmotionLabel CedualModel::predict_emotion(const DisentangledContext& enc) const {
    if (!enc.y_e.defined() || enc.y_e.ndim() != 1)
        throw ContractError("predict_emotion: emotion distribution missing");
    const auto k = enc.y_e.dim(0);
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < k; ++i)
        if (enc.y_e.at(i) > enc.y_e.at(best)) best = i;
    return EmotionLabel{best, k};
}

std::vector<std::int64_t> CedualModel::generate(const std::vector<std::int64_t>& context_ids,
                                                const GenerationOptions& opts) const {
    if (opts.max_new_tokens < 1)
        throw ContractError("generate: max_new_tokens must be positive, got " +
                            std::to_string(opts.max_new_tokens));
    if (opts.beam_width < 1)
        throw ConfigError("generate: beam_width must be positive, got " +
                          std::to_string(opts.beam_width));

    NoGradGuard no_grad;
    RunContext ctx;
    DisentangledContext enc =
        encode_dual(context_ids, std::vector<std::uint8_t>(context_ids.size(), 1), ctx);

    // Next-token log-probabilities after the given prefix (which starts with
    // SOS). PAD and SOS are never produced; EOS terminates a sequence.
    auto step_logprobs = [&](const std::vector<std::int64_t>& prefix) {
        Tensor states =
            decode(enc, prefix, std::vector<std::uint8_t>(prefix.size(), 1), ctx);
        Tensor logits = output_logits(states);
        const auto last = static_cast<std::int64_t>(prefix.size()) - 1;
        Tensor probs = softmax(row_vector(logits, last), 0);
        std::vector<double> lp(static_cast<std::size_t>(cfg_.vocab_size));
        for (std::int64_t i = 0; i < cfg_.vocab_size; ++i)
            lp[static_cast<std::size_t>(i)] = std::log(std::max(probs.at(i), 1e-300));
        lp[special_ids::kPad] = -std::numeric_limits<double>::infinity();
        lp[special_ids::kSos] = -std::numeric_limits<double>::infinity();
        return lp;
    };

    auto strip = [](const std::vector<std::int64_t>& prefix) {
        return std::vector<std::int64_t>(prefix.begin() + 1, prefix.end());
    };

    if (opts.strategy == GenerationOptions::Strategy::Greedy) {
        std::vector<std::int64_t> prefix = {special_ids::kSos};
        for (std::int64_t step = 0; step < opts.max_new_tokens; ++step) {
            if (static_cast<std::int64_t>(prefix.size()) >= cfg_.layer.max_len) break;
            auto lp = step_logprobs(prefix);
            std::int64_t best = 0;
            for (std::int64_t i = 1; i < cfg_.vocab_size; ++i)
                if (lp[static_cast<std::size_t>(i)] > lp[static_cast<std::size_t>(best)])
                    best = i;
            if (best == special_ids::kEos) break;
            prefix.push_back(best);
        }
        return strip(prefix);
    }

    struct Beam {
        std::vector<std::int64_t> prefix;  // starts with SOS
        double logprob = 0.0;
        bool finished = false;

        double score() const {  // length-normalized; EOS counts as a step
            const auto emitted = static_cast<double>(prefix.size() - 1) + (finished ? 1.0 : 0.0);
            return logprob / std::max(emitted, 1.0);
        }
    };
    auto better = [](const Beam& a, const Beam& b) {
        if (a.score() != b.score()) return a.score() > b.score();
        return a.prefix < b.prefix;  // deterministic tie-break
    };

    std::vector<Beam> beams = {Beam{{special_ids::kSos}, 0.0, false}};
    for (std::int64_t step = 0; step < opts.max_new_tokens; ++step) {
        std::vector<Beam> next;
        bool expanded = false;
        for (const Beam& beam : beams) {
            if (beam.finished ||
                static_cast<std::int64_t>(beam.prefix.size()) >= cfg_.layer.max_len) {
                next.push_back(beam);
                continue;
            }
            expanded = true;
            auto lp = step_logprobs(beam.prefix);
            for (std::int64_t tok = 0; tok < cfg_.vocab_size; ++tok) {
                const double p = lp[static_cast<std::size_t>(tok)];
                if (!std::isfinite(p)) continue;
                Beam child = beam;
                child.logprob += p;
                if (tok == special_ids::kEos)
                    child.finished = true;
                else
                    child.prefix.push_back(tok);
                next.push_back(std::move(child));
            }
        }
        std::sort(next.begin(), next.end(), better);
        if (static_cast<std::int64_t>(next.size()) > opts.beam_width)
            next.resize(static_cast<std::size_t>(opts.beam_width));
        beams = std::move(next);
        if (!expanded) break;
    }
    return strip(std::min_element(beams.begin(), beams.end(),
                                  [&](const Beam& a, const Beam& b) { return better(a, b); })
                     ->prefix);
}

}  // namespace cedual
