#include "cedual/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>

#include <json.hpp>

namespace cedual {

namespace {

using IntMember = std::int64_t RunConfig::*;
using DoubleMember = double RunConfig::*;
using StringMember = std::string RunConfig::*;

struct Field {
    const char* name;
    std::variant<IntMember, DoubleMember, StringMember> member;
};

// Declaration order of RunConfig; keys() and the JSON form follow it.
const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"d_model", &RunConfig::d_model},
        {"heads", &RunConfig::heads},
        {"d_ff", &RunConfig::d_ff},
        {"layers_enc", &RunConfig::layers_enc},
        {"layers_dec_stage", &RunConfig::layers_dec_stage},
        {"dropout", &RunConfig::dropout},
        {"max_len", &RunConfig::max_len},
        {"variant", &RunConfig::variant},
        {"content_head_mode", &RunConfig::content_head_mode},
        {"weight_dis_c", &RunConfig::weight_dis_c},
        {"weight_dis_e", &RunConfig::weight_dis_e},
        {"seed", &RunConfig::seed},
        {"lr", &RunConfig::lr},
        {"beta1", &RunConfig::beta1},
        {"beta2", &RunConfig::beta2},
        {"adam_eps", &RunConfig::adam_eps},
        {"warmup_steps", &RunConfig::warmup_steps},
        {"batch_size", &RunConfig::batch_size},
        {"max_steps", &RunConfig::max_steps},
        {"eval_every", &RunConfig::eval_every},
        {"patience", &RunConfig::patience},
        {"train_path", &RunConfig::train_path},
        {"valid_path", &RunConfig::valid_path},
        {"corpus_format", &RunConfig::corpus_format},
        {"labels", &RunConfig::labels},
        {"valid_fraction", &RunConfig::valid_fraction},
        {"synth_seed", &RunConfig::synth_seed},
        {"synth_size", &RunConfig::synth_size},
        {"synth_k", &RunConfig::synth_k},
        {"synth_budget", &RunConfig::synth_budget},
        {"out_dir", &RunConfig::out_dir},
        {"max_new_tokens", &RunConfig::max_new_tokens},
        {"beam_width", &RunConfig::beam_width},
        {"strategy", &RunConfig::strategy},
    };
    return table;
}

const Field& find_field(const std::string& key) {
    for (const auto& field : fields())
        if (key == field.name) return field;
    throw ConfigError("unknown config key '" + key + "'");
}

std::int64_t parse_int(const std::string& key, const std::string& text) {
    std::int64_t value = 0;
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last)
        throw ConfigError("config key '" + key + "': cannot parse '" + text +
                          "' as an integer");
    return value;
}

double parse_double(const std::string& key, const std::string& text) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last)
        throw ConfigError("config key '" + key + "': cannot parse '" + text +
                          "' as a number");
    return value;
}

// Shortest text that parses back to the identical double.
std::string render_double(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig cfg;
    cfg.apply_file(path);
    return cfg;
}

void RunConfig::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#') continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + " line " + std::to_string(line_no) +
                              ": expected 'key = value'");
        try {
            set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const Field& field = find_field(key);
    if (const auto* m = std::get_if<IntMember>(&field.member))
        this->**m = parse_int(key, value);
    else if (const auto* m = std::get_if<DoubleMember>(&field.member))
        this->**m = parse_double(key, value);
    else
        this->*std::get<StringMember>(field.member) = value;
}

void RunConfig::set_from_arg(const std::string& key_equals_value) {
    const auto eq = key_equals_value.find('=');
    if (eq == std::string::npos)
        throw ConfigError("expected key=value, got '" + key_equals_value + "'");
    set(trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
}

std::string RunConfig::get(const std::string& key) const {
    const Field& field = find_field(key);
    if (const auto* m = std::get_if<IntMember>(&field.member))
        return std::to_string(this->**m);
    if (const auto* m = std::get_if<DoubleMember>(&field.member))
        return render_double(this->**m);
    return this->*std::get<StringMember>(field.member);
}

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> names;
    names.reserve(fields().size());
    for (const auto& field : fields()) names.emplace_back(field.name);
    return names;
}

std::string RunConfig::to_json_text() const {
    nlohmann::ordered_json obj;
    for (const auto& field : fields()) {
        if (const auto* m = std::get_if<IntMember>(&field.member))
            obj[field.name] = this->**m;
        else if (const auto* m = std::get_if<DoubleMember>(&field.member))
            obj[field.name] = this->**m;
        else
            obj[field.name] = this->*std::get<StringMember>(field.member);
    }
    return obj.dump();
}

RunConfig RunConfig::from_json_text(const std::string& s) {
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(s);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ConfigError("config JSON: expected an object");
    RunConfig cfg;
    for (const auto& [key, value] : obj.items()) {
        const Field& field = find_field(key);
        try {
            if (const auto* m = std::get_if<IntMember>(&field.member))
                cfg.**m = value.get<std::int64_t>();
            else if (const auto* m = std::get_if<DoubleMember>(&field.member))
                cfg.**m = value.get<double>();
            else
                cfg.*std::get<StringMember>(field.member) = value.get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    return cfg;
}

void RunConfig::validate() const {
    // enum-like strings resolve or throw ConfigError themselves
    (void)variant_from_name(variant);
    (void)content_head_mode_from_name(content_head_mode);
    (void)corpus_format_from_name(corpus_format);
    require(strategy == "greedy" || strategy == "beam",
            "strategy must be 'greedy' or 'beam', got '" + strategy + "'");

    require(d_model >= 1, "d_model must be positive");
    require(heads >= 1, "heads must be positive");
    require(d_model % heads == 0, "d_model must be divisible by heads");
    require(d_ff >= 1, "d_ff must be positive");
    require(layers_enc >= 1, "layers_enc must be positive");
    require(layers_dec_stage >= 1, "layers_dec_stage must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    require(max_len >= 2, "max_len must be at least 2");
    require(weight_dis_c >= 0.0 && weight_dis_e >= 0.0,
            "loss weights must be non-negative");

    require(lr > 0.0, "lr must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0, 1)");
    require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0, 1)");
    require(adam_eps > 0.0, "adam_eps must be positive");
    require(warmup_steps >= 0, "warmup_steps must be non-negative");
    require(batch_size >= 1, "batch_size must be positive");
    require(max_steps >= 1, "max_steps must be positive");
    require(eval_every >= 1, "eval_every must be positive");
    require(patience >= 1, "patience must be positive");

    require(valid_fraction >= 0.0 && valid_fraction < 1.0,
            "valid_fraction must be in [0, 1)");
    require(synth_size >= 1 && synth_k >= 2 && synth_budget >= 1,
            "synthetic corpus knobs must be positive (and synth_k at least 2)");

    require(max_new_tokens >= 1, "max_new_tokens must be positive");
    require(beam_width >= 1, "beam_width must be positive");
}

ModelConfig RunConfig::model_config(std::int64_t vocab_size, std::int64_t num_emotions) const {
    ModelConfig mc;
    mc.layer.d_model = d_model;
    mc.layer.d_emb = d_model;
    mc.layer.heads = heads;
    mc.layer.d_ff = d_ff;
    mc.layer.layers_enc = layers_enc;
    mc.layer.layers_dec_stage = layers_dec_stage;
    mc.layer.dropout_rate = dropout;
    mc.layer.max_len = max_len;
    mc.vocab_size = vocab_size;
    mc.num_emotions = num_emotions;
    mc.variant = variant_from_name(variant);
    mc.content_head_mode = content_head_mode_from_name(content_head_mode);
    mc.weight_dis_c = weight_dis_c;
    mc.weight_dis_e = weight_dis_e;
    mc.init_seed = static_cast<std::uint64_t>(seed);
    return mc;
}

LabelSet RunConfig::resolve_labels() const {
    if (labels == "ed") return LabelSet::empathetic_dialogues();
    const std::string prefix = "synthetic:";
    if (labels.rfind(prefix, 0) == 0)
        return LabelSet::synthetic(parse_int("labels", labels.substr(prefix.size())));
    return LabelSet::load(labels);
}

GenerationOptions RunConfig::generation_options() const {
    GenerationOptions opts;
    if (strategy == "greedy")
        opts.strategy = GenerationOptions::Strategy::Greedy;
    else if (strategy == "beam")
        opts.strategy = GenerationOptions::Strategy::Beam;
    else
        throw ConfigError("strategy must be 'greedy' or 'beam', got '" + strategy + "'");
    opts.max_new_tokens = max_new_tokens;
    opts.beam_width = beam_width;
    return opts;
}

}  // namespace cedual
