// Python bindings for the dual-view empathetic dialogue generator.
//
// The surface mirrors the C++ library: corpus handling (tokenize, Vocabulary,
// LabelSet, loaders, the synthetic generator), RunConfig, the model itself
// (losses, generation, emotion prediction, pooled view features), the
// training loop, the metric suite, and checkpoint persistence.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "cedual/checkpoint.hpp"
#include "cedual/metrics.hpp"
#include "cedual/train.hpp"

namespace py = pybind11;
using namespace cedual;

namespace {

std::vector<std::uint8_t> ones_mask(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

GenerationOptions make_options(std::int64_t max_new_tokens, const std::string& strategy,
                               std::int64_t beam_width) {
    GenerationOptions opts;
    opts.max_new_tokens = max_new_tokens;
    opts.beam_width = beam_width;
    if (strategy == "greedy") {
        opts.strategy = GenerationOptions::Strategy::Greedy;
    } else if (strategy == "beam") {
        opts.strategy = GenerationOptions::Strategy::Beam;
    } else {
        throw ConfigError("unknown generation strategy '" + strategy + "' (greedy|beam)");
    }
    return opts;
}

py::dict losses_to_dict(const CedualModel::ExampleLosses& losses) {
    py::dict out;
    out["l_dis_c"] = losses.breakdown.l_dis_c.value();
    out["l_dis_e"] = losses.breakdown.l_dis_e.value();
    out["l_dis"] = losses.breakdown.l_dis.value();
    out["l_gen"] = losses.breakdown.l_gen.value();
    out["l_total"] = losses.breakdown.l_total.value();
    if (losses.content_classifier_fit.defined())
        out["content_classifier_fit"] = losses.content_classifier_fit.value();
    return out;
}

}  // namespace

PYBIND11_MODULE(_cedual, m) {
    m.doc() = "Dual-view empathetic dialogue generation: transformer encoding with "
              "content/emotion disentanglement and two-stage decoding";

    // ---- error mapping: invalid inputs read as ValueError from Python ----
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const DivergenceError& e) {
            PyErr_SetString(PyExc_RuntimeError, e.what());
        } catch (const Error& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        }
    });

    m.attr("PAD") = static_cast<std::int64_t>(special_ids::kPad);
    m.attr("SOS") = static_cast<std::int64_t>(special_ids::kSos);
    m.attr("EOS") = static_cast<std::int64_t>(special_ids::kEos);
    m.attr("UNK") = static_cast<std::int64_t>(special_ids::kUnk);

    // ---- corpus handling ----
    m.def("tokenize", &tokenize, py::arg("text"),
          "Lowercase, detach ASCII punctuation, split on whitespace.");

    py::class_<Utterance>(m, "Utterance")
        .def(py::init([](const std::string& role, const std::string& text) {
                 return Utterance{role_from_name(role), text};
             }),
             py::arg("role"), py::arg("text"))
        .def_property(
            "role", [](const Utterance& u) { return role_name(u.role); },
            [](Utterance& u, const std::string& r) { u.role = role_from_name(r); })
        .def_readwrite("text", &Utterance::text)
        .def("__repr__", [](const Utterance& u) {
            return "Utterance(role='" + role_name(u.role) + "', text='" + u.text + "')";
        });

    py::class_<DialogueExample>(m, "Example")
        .def(py::init([](const std::vector<Utterance>& utterances, const std::string& response,
                         const std::string& emotion) {
                 DialogueExample ex;
                 ex.utterances = utterances;
                 ex.gold_response = response;
                 ex.emotion = emotion;
                 return ex;
             }),
             py::arg("utterances"), py::arg("response"), py::arg("emotion"))
        .def_readwrite("utterances", &DialogueExample::utterances)
        .def_readwrite("response", &DialogueExample::gold_response)
        .def_readwrite("emotion", &DialogueExample::emotion)
        .def("validate", &DialogueExample::validate);

    py::class_<Vocabulary>(m, "Vocabulary")
        .def(py::init<>())
        .def_static("build", &Vocabulary::build, py::arg("token_lists"))
        .def_static("load", &Vocabulary::load, py::arg("path"))
        .def("save", &Vocabulary::save, py::arg("path"))
        .def("add", &Vocabulary::add, py::arg("token"))
        .def("id_of", &Vocabulary::id_of, py::arg("token"))
        .def("token_of", &Vocabulary::token_of, py::arg("id"))
        .def("encode", &Vocabulary::encode, py::arg("tokens"))
        .def("decode_text", &Vocabulary::decode_text, py::arg("ids"))
        .def("__len__", &Vocabulary::size);

    py::class_<LabelSet>(m, "LabelSet")
        .def(py::init<std::vector<std::string>>(), py::arg("names"))
        .def_static("empathetic_dialogues", &LabelSet::empathetic_dialogues)
        .def_static("synthetic", &LabelSet::synthetic, py::arg("k"))
        .def_static("load", &LabelSet::load, py::arg("path"))
        .def("save", &LabelSet::save, py::arg("path"))
        .def("index_of", &LabelSet::index_of, py::arg("name"))
        .def("name_of", &LabelSet::name_of, py::arg("index"))
        .def("names", &LabelSet::names)
        .def("__len__", &LabelSet::size);

    m.def(
        "load_corpus",
        [](const std::string& path, const std::string& format, const LabelSet& labels) {
            return load_corpus(path, corpus_format_from_name(format), labels);
        },
        py::arg("path"), py::arg("format"), py::arg("labels"),
        "Load a corpus; format is 'jsonl' or 'csv-ed'.");
    m.def("save_corpus_jsonl", &save_corpus_jsonl, py::arg("examples"), py::arg("path"));
    m.def("synth_corpus", &synth_corpus, py::arg("seed"), py::arg("size"), py::arg("k"),
          py::arg("vocab_budget"),
          "Single-turn dialogues from independent topic and mood factors.");
    m.def("flatten_dialogue", &flatten_dialogue, py::arg("example"), py::arg("vocab"),
          py::arg("max_len"),
          "Role-tagged context ids, left-truncated to the newest max_len ids.");

    // ---- configuration ----
    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init(&RunConfig::defaults))
        .def_static("defaults", &RunConfig::defaults)
        .def_static("from_file", &RunConfig::from_file, py::arg("path"))
        .def("apply_file", &RunConfig::apply_file, py::arg("path"))
        .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
        .def("get", &RunConfig::get, py::arg("key"))
        .def_static("keys", &RunConfig::keys)
        .def("validate", &RunConfig::validate)
        .def("to_json", &RunConfig::to_json_text)
        .def_static("from_json", &RunConfig::from_json_text, py::arg("text"))
        .def("__getitem__", &RunConfig::get)
        .def("__setitem__", &RunConfig::set);

    // ---- the model ----
    py::class_<CedualModel>(m, "Model")
        .def(py::init([](const RunConfig& cfg, std::int64_t vocab_size,
                         std::int64_t num_emotions) {
                 cfg.validate();
                 return std::make_unique<CedualModel>(cfg.model_config(vocab_size, num_emotions));
             }),
             py::arg("config"), py::arg("vocab_size"), py::arg("num_emotions"))
        .def_property_readonly("parameter_count",
                               [](const CedualModel& model) {
                                   return model.params().parameter_count();
                               })
        .def("param_names", [](const CedualModel& model) { return model.params().names(); })
        .def(
            "param",
            [](const CedualModel& model, const std::string& name) {
                auto span = model.params().get(name).data();
                return std::vector<double>(span.begin(), span.end());
            },
            py::arg("name"), "Flat copy of one parameter's values.")
        .def(
            "example_losses",
            [](const CedualModel& model, const std::vector<std::int64_t>& context_ids,
               const std::vector<std::int64_t>& response_in,
               const std::vector<std::int64_t>& response_gold, std::int64_t emotion_index) {
                NoGradGuard no_grad;
                RunContext ctx;
                const auto losses = model.example_losses(
                    context_ids, ones_mask(context_ids.size()), response_in, response_gold,
                    ones_mask(response_gold.size()),
                    EmotionLabel{emotion_index, model.config().num_emotions}, ctx);
                return losses_to_dict(losses);
            },
            py::arg("context_ids"), py::arg("response_in"), py::arg("response_gold"),
            py::arg("emotion_index"),
            "All loss terms for one teacher-forced example (values only).")
        .def(
            "generate",
            [](const CedualModel& model, const std::vector<std::int64_t>& context_ids,
               std::int64_t max_new_tokens, const std::string& strategy,
               std::int64_t beam_width) {
                return model.generate(context_ids,
                                      make_options(max_new_tokens, strategy, beam_width));
            },
            py::arg("context_ids"), py::arg("max_new_tokens") = 32,
            py::arg("strategy") = "greedy", py::arg("beam_width") = 5)
        .def(
            "predict_emotion",
            [](const CedualModel& model, const std::vector<std::int64_t>& context_ids) {
                NoGradGuard no_grad;
                RunContext ctx;
                return model.predict_emotion(
                    model.encode_dual(context_ids, ones_mask(context_ids.size()), ctx)).index;
            },
            py::arg("context_ids"))
        .def(
            "emotion_distribution",
            [](const CedualModel& model, const std::vector<std::int64_t>& context_ids) {
                NoGradGuard no_grad;
                RunContext ctx;
                const auto enc =
                    model.encode_dual(context_ids, ones_mask(context_ids.size()), ctx);
                auto span = enc.y_e.data();
                return std::vector<double>(span.begin(), span.end());
            },
            py::arg("context_ids"))
        .def(
            "dual_features",
            [](const CedualModel& model, const std::vector<std::int64_t>& context_ids) {
                NoGradGuard no_grad;
                RunContext ctx;
                const auto enc =
                    model.encode_dual(context_ids, ones_mask(context_ids.size()), ctx);
                auto c = enc.v_c.data();
                auto e = enc.v_e.data();
                return py::make_tuple(std::vector<double>(c.begin(), c.end()),
                                      std::vector<double>(e.begin(), e.end()));
            },
            py::arg("context_ids"), "Pooled (content, emotion) view features.");

    // ---- training and evaluation ----
    m.def(
        "train_model",
        [](CedualModel& model, const std::vector<DialogueExample>& train_examples,
           const std::vector<DialogueExample>& valid_examples, const Vocabulary& vocab,
           const LabelSet& labels, const RunConfig& cfg) {
            TrainResult result;
            {
                py::gil_scoped_release release;
                result = train_model(model, train_examples, valid_examples, vocab, labels, cfg);
            }
            py::dict out;
            out["steps"] = result.steps;
            out["best_val_perplexity"] = result.best_val_perplexity;
            out["stopped_early"] = result.stopped_early;
            return out;
        },
        py::arg("model"), py::arg("train_examples"), py::arg("valid_examples"), py::arg("vocab"),
        py::arg("labels"), py::arg("config"));

    m.def(
        "evaluate",
        [](const CedualModel& model, const std::vector<DialogueExample>& examples,
           const Vocabulary& vocab, const LabelSet& labels, const RunConfig& cfg) {
            MetricReport report;
            {
                py::gil_scoped_release release;
                const auto batches =
                    batchify(examples, vocab, labels, cfg.batch_size, cfg.max_len);
                report = evaluate(model, batches, vocab, cfg.generation_options());
            }
            py::dict out;
            out["acc"] = report.emotion_accuracy;
            out["bleu"] = report.bleu;
            out["ppl"] = report.perplexity;
            return out;
        },
        py::arg("model"), py::arg("examples"), py::arg("vocab"), py::arg("labels"),
        py::arg("config"));

    m.def("bleu_corpus", &bleu_corpus, py::arg("hypotheses"), py::arg("references"),
          "Corpus BLEU-4 (pooled clipped n-grams, brevity penalty, scaled by 100).");
    m.def("linear_probe_accuracy", &linear_probe_accuracy, py::arg("features"),
          py::arg("labels"), py::arg("num_classes"), py::arg("seed"),
          "Held-out accuracy of an affine probe fitted on half the pairs.");

    // ---- persistence ----
    m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("model"),
          py::arg("vocab"), py::arg("labels"), py::arg("config"), py::arg("step"));

    py::class_<LoadedCheckpoint>(m, "Checkpoint")
        .def_readonly("config", &LoadedCheckpoint::config)
        .def_readonly("seed", &LoadedCheckpoint::seed)
        .def_readonly("step", &LoadedCheckpoint::step)
        .def_property_readonly(
            "vocab", [](LoadedCheckpoint& c) -> Vocabulary& { return c.vocab; },
            py::return_value_policy::reference_internal)
        .def_property_readonly(
            "labels", [](LoadedCheckpoint& c) -> LabelSet& { return c.labels; },
            py::return_value_policy::reference_internal)
        .def_property_readonly(
            "model", [](LoadedCheckpoint& c) -> CedualModel& { return c.model; },
            py::return_value_policy::reference_internal);

    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
}
