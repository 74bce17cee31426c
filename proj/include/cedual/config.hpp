#pragma once

#include <string>
#include <vector>

#include "cedual/data.hpp"
#include "cedual/model.hpp"

namespace cedual {

// One flat, typed record of every knob a run needs. Serves as the config
// file schema (`key = value` lines), the `--set key=value` override target,
// and the config record embedded in checkpoints. Unknown keys are rejected
// everywhere.
struct RunConfig {
    // model
    std::int64_t d_model = 64;
    std::int64_t heads = 4;
    std::int64_t d_ff = 128;
    std::int64_t layers_enc = 2;
    std::int64_t layers_dec_stage = 1;
    double dropout = 0.1;
    std::int64_t max_len = 128;
    std::string variant = "fcte";
    std::string content_head_mode = "adversarial";
    double weight_dis_c = 1.0;
    double weight_dis_e = 1.0;

    // optimization
    std::int64_t seed = 1;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;
    std::int64_t warmup_steps = 100;
    std::int64_t batch_size = 16;
    std::int64_t max_steps = 2000;
    std::int64_t eval_every = 200;
    std::int64_t patience = 5;

    // data
    std::string train_path;
    std::string valid_path;           // empty: split train_path by valid_fraction
    std::string corpus_format = "jsonl";
    std::string labels = "ed";        // "ed" | "synthetic:<k>" | path to a label file
    double valid_fraction = 0.1;      // 0: validate on the training data
    std::int64_t synth_seed = 1;      // `convert --from synth` generator knobs
    std::int64_t synth_size = 1000;
    std::int64_t synth_k = 8;
    std::int64_t synth_budget = 96;

    // output & generation
    std::string out_dir = "runs/out";
    std::int64_t max_new_tokens = 32;
    std::int64_t beam_width = 5;
    std::string strategy = "greedy";

    static RunConfig defaults() { return RunConfig{}; }

    // `key = value` lines; '#' starts a comment. ConfigError carries the
    // offending line number.
    static RunConfig from_file(const std::string& path);
    // Same format, applied on top of the current values (the CLI layers a
    // file over environment-derived defaults this way).
    void apply_file(const std::string& path);

    // Typed assignment of one key. ConfigError on unknown key or unparsable
    // value for the key's type.
    void set(const std::string& key, const std::string& value);
    // The --set form "key=value".
    void set_from_arg(const std::string& key_equals_value);

    std::string get(const std::string& key) const;  // value rendered as text
    static std::vector<std::string> keys();         // every key, fixed order

    std::string to_json_text() const;                       // all keys, one object
    static RunConfig from_json_text(const std::string& s);  // unknown keys rejected

    // Cross-field checks beyond per-key parsing.
    void validate() const;

    // The model section resolved against a concrete vocabulary/label size.
    ModelConfig model_config(std::int64_t vocab_size, std::int64_t num_emotions) const;

    LabelSet resolve_labels() const;
    GenerationOptions generation_options() const;
};

}  // namespace cedual
