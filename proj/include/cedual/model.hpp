#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "cedual/transformer.hpp"

namespace cedual {

// Which decoder composition the model runs. The two-stage variants differ
// only in which view feeds which stage; the single-stage variants are the
// ablations that read exactly one view.
enum class DecoderVariant { Fcte, Fetc, ContentOnly, EmotionOnly };

std::string variant_name(DecoderVariant v);
DecoderVariant variant_from_name(const std::string& name);  // ConfigError on unknown

// How the entropy objective on the content view interacts with the content
// classifier.
//  - Adversarial: the classifier is fitted on detached pooled features by an
//    auxiliary cross-entropy (kept out of the main objective), while the
//    entropy term backpropagates through a frozen copy of the classifier into
//    the content head and encoder. The classifier stays an honest read-out,
//    so maximizing entropy must actually remove label information from the
//    features rather than silently flattening the classifier itself.
//  - Joint: the entropy term backpropagates through the live classifier
//    jointly with everything else (the plain reading of the objective).
enum class ContentHeadMode { Adversarial, Joint };

std::string content_head_mode_name(ContentHeadMode m);
ContentHeadMode content_head_mode_from_name(const std::string& name);

struct ModelConfig {
    LayerConfig layer;
    std::int64_t vocab_size = 0;
    std::int64_t num_emotions = 32;
    DecoderVariant variant = DecoderVariant::Fcte;
    ContentHeadMode content_head_mode = ContentHeadMode::Adversarial;
    double weight_dis_c = 1.0;  // multiplier on the entropy term
    double weight_dis_e = 1.0;  // multiplier on the emotion cross-entropy term
    std::uint64_t init_seed = 1;

    void validate() const;
};

// Gold emotion annotation: index into a label set of num_classes entries.
struct EmotionLabel {
    std::int64_t index = 0;
    std::int64_t num_classes = 0;

    void validate() const;
    std::vector<double> one_hot() const;
};

// Everything the encoder side produces for one dialogue context.
struct DisentangledContext {
    Tensor h;                   // (n, d) contextual embedding
    Tensor h_c, h_e;            // (n, d) content / emotion views
    Tensor v_c, v_e;            // (d) masked mean-pooled features
    Tensor logits_c, logits_e;  // (k) classifier outputs
    Tensor y_c, y_e;            // (k) softmax distributions
    std::vector<std::uint8_t> pad_keep;
};

struct LossBreakdown {
    Tensor l_dis_c;  // entropy of y_c (to be maximized)
    Tensor l_dis_e;  // cross-entropy of y_e against the gold label
    Tensor l_dis;    // l_dis_e - l_dis_c
    Tensor l_gen;    // mean non-pad token cross-entropy
    Tensor l_total;  // l_gen + l_dis
};

struct GenerationOptions {
    enum class Strategy { Greedy, Beam };
    Strategy strategy = Strategy::Greedy;
    std::int64_t max_new_tokens = 32;
    std::int64_t beam_width = 5;
};

// Learnable weights addressed by stable path names; iteration is always in
// lexicographic name order so optimizer sweeps and serialization are
// deterministic.
class ParamStore {
  public:
    enum class Init { Zeros, Ones, XavierUniform };

    Tensor create(const std::string& name, const Shape& shape, Init init, Rng& rng);
    Tensor get(const std::string& name) const;  // ContractError when missing
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    std::vector<std::string> names() const;
    const std::map<std::string, Tensor>& entries() const { return params_; }
    std::int64_t parameter_count() const;  // total scalar count
    void zero_grads();

  private:
    std::map<std::string, Tensor> params_;
};

class CedualModel {
  public:
    explicit CedualModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Encoder side: contextual embedding, both views, pooled features, and
    // both class distributions for one flattened context.
    DisentangledContext encode_dual(const std::vector<std::int64_t>& context_ids,
                                    const std::vector<std::uint8_t>& pad_keep,
                                    RunContext& ctx) const;

    // (l_dis_c, l_dis_e, l_dis) with the configured multipliers applied.
    std::tuple<Tensor, Tensor, Tensor> disentanglement_loss(const DisentangledContext& enc,
                                                            const EmotionLabel& emotion) const;

    // Variant-dispatched decoding of a teacher-forced response stream;
    // returns the final (m, d) decoder states.
    Tensor decode(const DisentangledContext& enc, const std::vector<std::int64_t>& response_in,
                  const std::vector<std::uint8_t>& response_keep, RunContext& ctx) const;

    // The two-stage composition: stage 1 cross-attends memory_first with the
    // embedded response as target stream; stage 2 cross-attends memory_second
    // with stage 1's output as target stream. Both orderings are this one
    // code path with swapped memory arguments.
    Tensor two_stage_decode(const Tensor& memory_first, const Tensor& memory_second,
                            const Tensor& response_embeddings, const AttentionMask& memory_mask,
                            const AttentionMask& causal_mask, RunContext& ctx) const;

    // Ablation: a single stage over one memory.
    Tensor single_stage_decode(const Tensor& memory, const Tensor& response_embeddings,
                               const AttentionMask& memory_mask, const AttentionMask& causal_mask,
                               RunContext& ctx) const;

    Tensor output_logits(const Tensor& decoder_states) const;  // (m, vocab)

    // Mean cross-entropy over non-pad gold positions.
    Tensor generation_loss(const Tensor& decoder_states, const std::vector<std::int64_t>& gold,
                           const std::vector<std::uint8_t>& response_keep) const;

    LossBreakdown total_loss(const Tensor& l_gen, const Tensor& l_dis_c,
                             const Tensor& l_dis_e) const;

    struct ExampleLosses {
        LossBreakdown breakdown;
        // Auxiliary classifier fit used by the adversarial content-head mode;
        // undefined tensor in joint mode. Deliberately outside l_total.
        Tensor content_classifier_fit;
    };

    // Full training forward for one example.
    ExampleLosses example_losses(const std::vector<std::int64_t>& context_ids,
                                 const std::vector<std::uint8_t>& context_keep,
                                 const std::vector<std::int64_t>& response_in,
                                 const std::vector<std::int64_t>& response_gold,
                                 const std::vector<std::uint8_t>& response_keep,
                                 const EmotionLabel& emotion, RunContext& ctx) const;

    // Autoregressive decoding from SOS; stops at EOS or max_new_tokens. The
    // returned ids contain neither SOS nor EOS. Greedy is deterministic with
    // lowest-index tie-breaks; beam search is length-normalized.
    std::vector<std::int64_t> generate(const std::vector<std::int64_t>& context_ids,
                                       const GenerationOptions& opts) const;

    // Argmax of y_e, ties to the lowest index.
    EmotionLabel predict_emotion(const DisentangledContext& enc) const;

    // Embeds + position-encodes a response prefix (teacher-forcing input).
    Tensor embed_response(const std::vector<std::int64_t>& response_in) const;

  private:
    ModelConfig cfg_;
    ParamStore store_;
    EncoderParams encoder_;
    DecoderStageParams stage1_, stage2_;  // stage2 empty for single-stage variants
    Tensor view_c_w_, view_c_b_, view_e_w_, view_e_b_;
    Tensor cls_c_w_, cls_c_b_, cls_e_w_, cls_e_b_;
    Tensor out_w_, out_b_, embed_;

    AttentionParams create_attention(const std::string& prefix, Rng& rng);
    FeedForwardParams create_ffn(const std::string& prefix, Rng& rng);
    NormParams create_norm(const std::string& prefix, Rng& rng);
    DecoderLayerParams create_decoder_layer(const std::string& prefix, Rng& rng);
};

}  // namespace cedual
