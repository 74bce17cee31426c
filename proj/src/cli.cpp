#include "cedual/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cedual/checkpoint.hpp"
#include "cedual/config.hpp"
#include "cedual/data.hpp"
#include "cedual/metrics.hpp"
#include "cedual/model.hpp"
#include "cedual/train.hpp"

namespace cedual::cli {

namespace {

// Shortest text that parses back to the identical double; keeps machine
// consumers bit-faithful to the in-process numbers.
std::string render_number(double value) { return nlohmann::json(value).dump(); }

// defaults <- CEDUAL_SEED <- config file <- --set overrides
RunConfig assemble_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (const char* env_seed = std::getenv("CEDUAL_SEED")) cfg.set("seed", env_seed);
    if (!config_path.empty()) cfg.apply_file(config_path);
    for (const auto& kv : overrides) cfg.set_from_arg(kv);
    return cfg;
}

std::vector<std::vector<std::string>> corpus_token_lists(
    const std::vector<DialogueExample>& examples) {
    std::vector<std::vector<std::string>> lists;
    for (const auto& ex : examples) {
        for (const auto& utt : ex.utterances) lists.push_back(tokenize(utt.text));
        lists.push_back(tokenize(ex.gold_response));
    }
    return lists;
}

struct ConvertArgs {
    std::string from;
    std::string to = "jsonl";
    std::string in_path;
    std::string out_path;
    std::string config_path;
    std::vector<std::string> overrides;
};

int cmd_convert(const ConvertArgs& args) {
    if (args.to != "jsonl")
        throw ConfigError("convert: only '--to jsonl' is supported, got '" + args.to + "'");
    RunConfig cfg = assemble_config(args.config_path, args.overrides);

    std::vector<DialogueExample> examples;
    if (args.from == "synth") {
        examples = synth_corpus(static_cast<std::uint64_t>(cfg.synth_seed), cfg.synth_size,
                                cfg.synth_k, cfg.synth_budget);
    } else if (args.from == "csv-ed" || args.from == "jsonl") {
        if (args.in_path.empty())
            throw ConfigError("convert: --in is required with --from " + args.from);
        const LabelSet labels =
            args.from == "csv-ed" ? LabelSet::empathetic_dialogues() : cfg.resolve_labels();
        examples = load_corpus(args.in_path, corpus_format_from_name(args.from), labels);
    } else {
        throw ConfigError("convert: --from must be one of jsonl, csv-ed, synth; got '" +
                          args.from + "'");
    }

    save_corpus_jsonl(examples, args.out_path);
    nlohmann::ordered_json summary;
    summary["examples"] = examples.size();
    summary["out"] = args.out_path;
    std::cout << summary.dump() << "\n";
    return 0;
}

struct TrainArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string variant;
    std::optional<std::int64_t> seed;
    std::string out_dir;
};

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = assemble_config(args.config_path, args.overrides);
    if (!args.variant.empty()) cfg.set("variant", args.variant);
    if (args.seed) cfg.seed = *args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
    if (cfg.train_path.empty())
        throw ConfigError("train_path: no training corpus configured");

    const LabelSet labels = cfg.resolve_labels();
    const CorpusFormat format = corpus_format_from_name(cfg.corpus_format);
    const auto all_examples = load_corpus(cfg.train_path, format, labels);

    std::vector<DialogueExample> train_examples, valid_examples;
    if (!cfg.valid_path.empty()) {
        train_examples = all_examples;
        valid_examples = load_corpus(cfg.valid_path, format, labels);
    } else if (cfg.valid_fraction > 0.0) {
        std::vector<std::size_t> order(all_examples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng split_rng(static_cast<std::uint64_t>(cfg.seed) * 2 + 3);
        split_rng.shuffle(order);
        auto valid_count = static_cast<std::size_t>(
            cfg.valid_fraction * static_cast<double>(all_examples.size()));
        valid_count = std::max<std::size_t>(valid_count, 1);
        if (valid_count >= all_examples.size())
            throw ConfigError("valid_fraction: split leaves no training examples");
        for (std::size_t i = 0; i < order.size(); ++i)
            (i < valid_count ? valid_examples : train_examples)
                .push_back(all_examples[order[i]]);
    } else {
        train_examples = all_examples;
        valid_examples = all_examples;
    }

    const Vocabulary vocab = Vocabulary::build(corpus_token_lists(train_examples));
    CedualModel model{cfg.model_config(vocab.size(), labels.size())};

    std::filesystem::create_directories(cfg.out_dir);
    const std::string best_path = cfg.out_dir + "/best.ckpt";
    const std::string last_path = cfg.out_dir + "/last.ckpt";
    std::ofstream log(cfg.out_dir + "/train_log.jsonl", std::ios::trunc);
    if (!log) throw ConfigError("out_dir: cannot write to '" + cfg.out_dir + "'");

    std::int64_t last_step = 0;
    TrainHooks hooks;
    hooks.on_step = [&](const TrainStepStats& s) {
        last_step = s.step;
        nlohmann::ordered_json rec;
        rec["type"] = "step";
        rec["step"] = s.step;
        rec["l_gen"] = s.l_gen;
        rec["l_dis_c"] = s.l_dis_c;
        rec["l_dis_e"] = s.l_dis_e;
        rec["l_total"] = s.l_total;
        log << rec.dump() << "\n";
        log.flush();
    };
    hooks.on_eval = [&](const EvalStats& e, bool improved) {
        nlohmann::ordered_json rec;
        rec["type"] = "eval";
        rec["step"] = e.step;
        rec["ppl"] = e.perplexity;
        rec["acc"] = e.emotion_accuracy;
        rec["improved"] = improved;
        log << rec.dump() << "\n";
        log.flush();
        if (improved)
            save_checkpoint(best_path, model, vocab, labels, cfg,
                            static_cast<std::uint64_t>(e.step));
    };

    TrainResult result;
    try {
        result = train_model(model, train_examples, valid_examples, vocab, labels, cfg, hooks);
    } catch (const DivergenceError&) {
        // parameters still hold the last finite state; keep it inspectable
        save_checkpoint(last_path, model, vocab, labels, cfg,
                        static_cast<std::uint64_t>(last_step));
        throw;
    }

    save_checkpoint(last_path, model, vocab, labels, cfg,
                    static_cast<std::uint64_t>(result.steps));
    if (!std::filesystem::exists(best_path))  // no eval ever ran
        save_checkpoint(best_path, model, vocab, labels, cfg,
                        static_cast<std::uint64_t>(result.steps));

    nlohmann::ordered_json summary;
    summary["steps"] = result.steps;
    summary["best_val_perplexity"] = result.best_val_perplexity;
    summary["stopped_early"] = result.stopped_early;
    summary["out_dir"] = cfg.out_dir;
    std::cout << summary.dump() << "\n";
    return 0;
}

struct EvalArgs {
    std::vector<std::string> checkpoints;
    std::string corpus_path;
    std::string corpus_format = "jsonl";
    std::string metrics = "acc,bleu,ppl";
    bool ablation = false;
    std::vector<std::string> overrides;
};

std::vector<std::string> parse_metric_list(const std::string& text) {
    std::vector<std::string> names;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item != "acc" && item != "bleu" && item != "ppl")
            throw ConfigError("eval: unknown metric '" + item +
                              "' (expected acc, bleu, ppl)");
        names.push_back(item);
    }
    if (names.empty()) throw ConfigError("eval: empty metric list");
    return names;
}

struct EvalRow {
    std::string variant;
    std::uint64_t step = 0;
    double acc = 0.0;
    double bleu = 0.0;
    double ppl = 0.0;
};

EvalRow evaluate_checkpoint(const std::string& ckpt_path, const EvalArgs& args,
                            const std::vector<std::string>& metrics) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    // overrides tune evaluation-time knobs (batching, generation); the model
    // itself is fixed by the stored config
    for (const auto& kv : args.overrides) loaded.config.set_from_arg(kv);

    const auto corpus = load_corpus(args.corpus_path,
                                    corpus_format_from_name(args.corpus_format), loaded.labels);
    const auto batches = batchify(corpus, loaded.vocab, loaded.labels,
                                  loaded.config.batch_size, loaded.config.max_len);

    EvalRow row;
    row.variant = loaded.config.variant;
    row.step = loaded.step;
    const auto wants = [&](const char* name) {
        return std::find(metrics.begin(), metrics.end(), name) != metrics.end();
    };
    if (wants("acc")) row.acc = emotion_accuracy(loaded.model, batches);
    if (wants("ppl")) row.ppl = perplexity(loaded.model, batches);
    if (wants("bleu")) {
        const auto hypotheses = generate_corpus(loaded.model, batches, loaded.vocab,
                                                loaded.config.generation_options());
        std::vector<std::vector<std::string>> references;
        for (const auto& ex : corpus) references.push_back(tokenize(ex.gold_response));
        row.bleu = bleu_corpus(hypotheses, references);
    }
    return row;
}

int cmd_eval(const EvalArgs& args) {
    const auto metrics = parse_metric_list(args.metrics);

    if (!args.ablation) {
        if (args.checkpoints.size() != 1)
            throw ConfigError("eval: exactly one --ckpt expected (or pass --ablation)");
        const EvalRow row = evaluate_checkpoint(args.checkpoints.front(), args, metrics);
        nlohmann::ordered_json report;
        report["variant"] = row.variant;
        report["step"] = row.step;
        for (const auto& name : metrics) {
            if (name == "acc") report["acc"] = row.acc;
            if (name == "bleu") report["bleu"] = row.bleu;
            if (name == "ppl") report["ppl"] = row.ppl;
        }
        std::cout << report.dump() << "\n";
        return 0;
    }

    std::map<std::string, EvalRow> rows;
    for (const auto& path : args.checkpoints) {
        EvalRow row = evaluate_checkpoint(path, args, metrics);
        if (rows.count(row.variant))
            throw ConfigError("ablation: two checkpoints for variant '" + row.variant + "'");
        rows[row.variant] = row;
    }
    const std::vector<std::string> canonical = {"fcte", "fetc", "content-only",
                                                "emotion-only"};
    for (const auto& variant : canonical)
        if (!rows.count(variant))
            throw ConfigError("ablation: missing checkpoint for variant '" + variant + "'");

    std::cout << "variant\tstep\tacc\tbleu\tppl\n";
    for (const auto& variant : canonical) {
        const EvalRow& row = rows[variant];
        std::cout << row.variant << "\t" << row.step << "\t" << render_number(row.acc) << "\t"
                  << render_number(row.bleu) << "\t" << render_number(row.ppl) << "\n";
    }

    char line[128];
    std::snprintf(line, sizeof(line), "%-14s %8s %8s %8s %10s", "variant", "step", "acc",
                  "bleu", "ppl");
    std::cerr << line << "\n";
    for (const auto& variant : canonical) {
        const EvalRow& row = rows[variant];
        std::snprintf(line, sizeof(line), "%-14s %8llu %8.4f %8.4f %10.4f",
                      row.variant.c_str(), static_cast<unsigned long long>(row.step), row.acc,
                      row.bleu, row.ppl);
        std::cerr << line << "\n";
    }
    return 0;
}

struct GenerateArgs {
    std::string ckpt_path;
    std::string in_path;
    std::string out_path;
    std::vector<std::string> overrides;
};

DialogueExample parse_context_line(const std::string& line) {
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object() || !obj.contains("utterances") || !obj["utterances"].is_array() ||
        obj["utterances"].empty())
        throw FormatError("expected an object with a non-empty 'utterances' array");
    DialogueExample ex;
    for (const auto& utt : obj["utterances"]) {
        if (!utt.is_object() || !utt.contains("role") || !utt["role"].is_string() ||
            !utt.contains("text") || !utt["text"].is_string())
            throw FormatError("each utterance needs string fields 'role' and 'text'");
        ex.utterances.push_back(
            {role_from_name(utt["role"].get<std::string>()), utt["text"].get<std::string>()});
    }
    // structural validation only; response/emotion play no role in generation
    ex.gold_response = "-";
    ex.emotion = "-";
    ex.validate();
    return ex;
}

int cmd_generate(const GenerateArgs& args) {
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt_path);
    for (const auto& kv : args.overrides) loaded.config.set_from_arg(kv);
    const GenerationOptions opts = loaded.config.generation_options();

    std::ifstream in(args.in_path);
    if (!in) throw ConfigError("generate: cannot open input '" + args.in_path + "'");
    std::ofstream out(args.out_path, std::ios::trunc);
    if (!out) throw ConfigError("generate: cannot open output '" + args.out_path + "'");

    std::string line;
    std::int64_t line_no = 0, generated = 0, skipped = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const DialogueExample ex = parse_context_line(line);
            const auto context_ids =
                flatten_dialogue(ex, loaded.vocab, loaded.config.max_len);
            const auto response_ids = loaded.model.generate(context_ids, opts);
            nlohmann::ordered_json rec;
            rec["response"] = loaded.vocab.decode_text(response_ids);
            out << rec.dump() << "\n";
            ++generated;
        } catch (const Error& e) {
            std::cerr << "warning: " << args.in_path << " line " << line_no << ": " << e.what()
                      << "\n";
            ++skipped;
        }
    }

    nlohmann::ordered_json summary;
    summary["generated"] = generated;
    summary["skipped"] = skipped;
    std::cout << summary.dump() << "\n";
    return skipped > 0 ? 1 : 0;
}

struct ChatArgs {
    std::string ckpt_path;
    std::vector<std::string> overrides;
};

int cmd_chat(const ChatArgs& args) {
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt_path);
    for (const auto& kv : args.overrides) loaded.config.set_from_arg(kv);
    const GenerationOptions opts = loaded.config.generation_options();
    const std::int64_t top_n = std::min<std::int64_t>(5, loaded.labels.size());

    std::vector<Utterance> history;
    const auto flatten_history = [&](const std::vector<Utterance>& turns) {
        DialogueExample ex;
        ex.utterances = turns;
        ex.gold_response = "-";
        ex.emotion = "-";
        return flatten_dialogue(ex, loaded.vocab, loaded.config.max_len);
    };

    std::string line;
    std::cerr << "> " << std::flush;
    while (std::getline(std::cin, line)) {
        if (line == ":quit") return 0;
        if (line == ":reset") {
            history.clear();
            std::cerr << "> " << std::flush;
            continue;
        }
        if (line == ":emotion") {
            std::vector<Utterance> context = history;
            while (!context.empty() && context.back().role == Role::Listener)
                context.pop_back();
            if (context.empty()) {
                std::cerr << "chat: no history yet\n> " << std::flush;
                continue;
            }
            const auto ids = flatten_history(context);
            NoGradGuard no_grad;
            RunContext rc;
            const auto enc = loaded.model.encode_dual(
                ids, std::vector<std::uint8_t>(ids.size(), 1), rc);
            std::vector<std::int64_t> order(static_cast<std::size_t>(loaded.labels.size()));
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
                if (enc.y_e.at(a) != enc.y_e.at(b)) return enc.y_e.at(a) > enc.y_e.at(b);
                return a < b;
            });
            for (std::int64_t i = 0; i < top_n; ++i)
                std::cout << loaded.labels.name_of(order[static_cast<std::size_t>(i)]) << "\t"
                          << render_number(enc.y_e.at(order[static_cast<std::size_t>(i)]))
                          << "\n";
            std::cout.flush();
            std::cerr << "> " << std::flush;
            continue;
        }
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            std::cerr << "> " << std::flush;
            continue;
        }

        history.push_back({Role::Speaker, line});
        const auto context_ids = flatten_history(history);
        const auto response_ids = loaded.model.generate(context_ids, opts);
        const std::string response = loaded.vocab.decode_text(response_ids);
        std::cout << response << "\n" << std::flush;
        history.push_back({Role::Listener, response});
        std::cerr << "> " << std::flush;
    }
    return 0;  // EOF
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"cedual: train, evaluate, and chat with a dual-view dialogue model"};
    app.require_subcommand(1);

    ConvertArgs convert_args;
    auto* convert = app.add_subcommand(
        "convert", "Convert or generate a corpus and write it as JSONL");
    convert->add_option("--from", convert_args.from, "Source: jsonl, csv-ed, or synth")
        ->required();
    convert->add_option("--to", convert_args.to, "Target format (jsonl)");
    convert->add_option("--in", convert_args.in_path, "Input corpus path");
    convert->add_option("--out", convert_args.out_path, "Output JSONL path")->required();
    convert->add_option("--config", convert_args.config_path, "Run config file");
    convert->add_option("--set", convert_args.overrides, "Config override key=value");

    TrainArgs train_args;
    std::int64_t seed_flag = 0;
    auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
    train->add_option("--config", train_args.config_path, "Run config file");
    train->add_option("--set", train_args.overrides, "Config override key=value");
    train->add_option("--variant", train_args.variant,
                      "Decoder variant: fcte, fetc, content-only, emotion-only");
    auto* seed_opt = train->add_option("--seed", seed_flag, "Run seed");
    train->add_option("--out-dir", train_args.out_dir, "Artifact directory");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a corpus");
    eval->add_option("--ckpt", eval_args.checkpoints, "Checkpoint path (repeatable)")
        ->required();
    eval->add_option("--corpus", eval_args.corpus_path, "Evaluation corpus")->required();
    eval->add_option("--format", eval_args.corpus_format, "Corpus format: jsonl or csv-ed");
    eval->add_option("--metrics", eval_args.metrics, "Comma list of acc, bleu, ppl");
    eval->add_flag("--ablation", eval_args.ablation,
                   "Compare the four decoder variants in one table");
    eval->add_option("--set", eval_args.overrides, "Evaluation-time config override");

    GenerateArgs generate_args;
    auto* generate =
        app.add_subcommand("generate", "Generate one response per JSONL input line");
    generate->add_option("--ckpt", generate_args.ckpt_path, "Checkpoint path")->required();
    generate->add_option("--in", generate_args.in_path, "Input JSONL of dialogue contexts")
        ->required();
    generate->add_option("--out", generate_args.out_path, "Output JSONL path")->required();
    generate->add_option("--set", generate_args.overrides, "Generation-time config override");

    ChatArgs chat_args;
    auto* chat = app.add_subcommand("chat", "Interactive dialogue REPL");
    chat->add_option("--ckpt", chat_args.ckpt_path, "Checkpoint path")->required();
    chat->add_option("--set", chat_args.overrides, "Chat-time config override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (convert->parsed()) return cmd_convert(convert_args);
        if (train->parsed()) {
            if (seed_opt->count()) train_args.seed = seed_flag;
            return cmd_train(train_args);
        }
        if (eval->parsed()) return cmd_eval(eval_args);
        if (generate->parsed()) return cmd_generate(generate_args);
        if (chat->parsed()) return cmd_chat(chat_args);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace cedual::cli
