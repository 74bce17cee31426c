#include "cedual/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace cedual {

namespace {

const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> tokens = {"<pad>", "<unk>", "<sos>",
                                                    "<eos>", "<spk>", "<lst>"};
    return tokens;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(field);
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    fields.push_back(field);
    return fields;
}

}  // namespace

std::string role_name(Role r) {
    return r == Role::Speaker ? "speaker" : "listener";
}

Role role_from_name(const std::string& name) {
    if (name == "speaker") return Role::Speaker;
    if (name == "listener") return Role::Listener;
    throw FormatError("unknown role '" + name + "' (expected speaker or listener)");
}

void DialogueExample::validate() const {
    if (utterances.empty()) throw FormatError("dialogue has no utterances");
    for (std::size_t i = 0; i < utterances.size(); ++i) {
        const Role expected = i % 2 == 0 ? Role::Speaker : Role::Listener;
        if (utterances[i].role != expected)
            throw FormatError("utterance " + std::to_string(i + 1) + " must be a " +
                              role_name(expected) + " turn (roles alternate from the speaker)");
    }
    if (utterances.size() % 2 == 0)
        throw FormatError("dialogue history must end with a speaker turn");
    if (gold_response.empty()) throw FormatError("gold response is empty");
    if (emotion.empty()) throw FormatError("emotion label is empty");
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (c < 128 && std::isspace(c)) {
            flush();
        } else if (c < 128 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(c < 128 ? static_cast<char>(std::tolower(c))
                                  : static_cast<char>(c));
        }
    }
    flush();
    return out;
}

// ---- Vocabulary ----

Vocabulary::Vocabulary() {
    for (const auto& t : reserved_tokens()) add(t);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& token_lists) {
    Vocabulary vocab;
    for (const auto& list : token_lists)
        for (const auto& token : list) vocab.add(token);
    return vocab;
}

std::int64_t Vocabulary::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<std::int64_t>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

std::int64_t Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? special_ids::kUnk : it->second;
}

const std::string& Vocabulary::token_of(std::int64_t id) const {
    if (id < 0 || id >= size())
        throw DomainError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(size()));
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<std::int64_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id_of(t));
    return ids;
}

std::string Vocabulary::decode_text(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (std::int64_t id : ids) {
        if (!out.empty()) out.push_back(' ');
        out += token_of(id);
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write vocabulary file '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocabulary file '" + path + "'");
    Vocabulary vocab;
    std::string line;
    std::size_t id = 0;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty())
            throw FormatError("vocabulary file '" + path + "' has an empty line " +
                              std::to_string(id + 1));
        if (id < reserved_tokens().size()) {
            if (line != reserved_tokens()[id])
                throw FormatError("vocabulary file '" + path + "' line " +
                                  std::to_string(id + 1) + ": expected reserved token '" +
                                  reserved_tokens()[id] + "', found '" + line + "'");
        } else if (vocab.index_.count(line) != 0) {
            throw FormatError("vocabulary file '" + path + "' repeats token '" + line + "'");
        } else {
            vocab.add(line);
        }
        ++id;
    }
    if (id < reserved_tokens().size())
        throw FormatError("vocabulary file '" + path + "' is missing the reserved token block");
    return vocab;
}

// ---- LabelSet ----

LabelSet::LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ConfigError("label set is empty");
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i].empty()) throw ConfigError("label " + std::to_string(i) + " is empty");
        if (!index_.emplace(names_[i], static_cast<std::int64_t>(i)).second)
            throw ConfigError("duplicate label '" + names_[i] + "'");
    }
}

LabelSet LabelSet::empathetic_dialogues() {
    return LabelSet({"surprised",   "excited",      "annoyed",    "proud",
                     "angry",       "sad",          "grateful",   "lonely",
                     "impressed",   "afraid",       "disgusted",  "confident",
                     "terrified",   "hopeful",      "anxious",    "disappointed",
                     "joyful",      "prepared",     "guilty",     "furious",
                     "nostalgic",   "jealous",      "anticipating", "embarrassed",
                     "content",     "devastated",   "sentimental", "caring",
                     "trusting",    "ashamed",      "apprehensive", "faithful"});
}

LabelSet LabelSet::synthetic(std::int64_t k) {
    if (k < 2) throw ConfigError("synthetic label set needs k >= 2, got " + std::to_string(k));
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i) names.push_back("emo" + std::to_string(i));
    return LabelSet(std::move(names));
}

LabelSet LabelSet::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open label file '" + path + "'");
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (!line.empty()) names.push_back(line);
    }
    if (names.empty()) throw FormatError("label file '" + path + "' has no labels");
    return LabelSet(std::move(names));
}

void LabelSet::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write label file '" + path + "'");
    for (const auto& n : names_) out << n << '\n';
}

std::int64_t LabelSet::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        std::string valid;
        for (const auto& n : names_) valid += (valid.empty() ? "" : ", ") + n;
        throw DomainError("unknown emotion label '" + name + "' (valid: " + valid + ")");
    }
    return it->second;
}

const std::string& LabelSet::name_of(std::int64_t index) const {
    if (index < 0 || index >= size())
        throw DomainError("label index " + std::to_string(index) + " outside [0, " +
                          std::to_string(size()) + ")");
    return names_[static_cast<std::size_t>(index)];
}

// ---- flattening ----

std::vector<std::int64_t> flatten_dialogue(const DialogueExample& ex, const Vocabulary& vocab,
                                           std::int64_t max_len) {
    ex.validate();
    if (max_len < 1) throw ConfigError("flatten_dialogue: max_len must be positive");
    std::vector<std::int64_t> ids;
    for (const auto& u : ex.utterances) {
        ids.push_back(u.role == Role::Speaker ? special_ids::kSepSpeaker
                                              : special_ids::kSepListener);
        for (std::int64_t id : vocab.encode(tokenize(u.text))) ids.push_back(id);
    }
    if (static_cast<std::int64_t>(ids.size()) > max_len)
        ids.erase(ids.begin(), ids.end() - max_len);  // keep the newest ids
    return ids;
}

// ---- corpus loading ----

CorpusFormat corpus_format_from_name(const std::string& name) {
    if (name == "jsonl") return CorpusFormat::Jsonl;
    if (name == "csv-ed") return CorpusFormat::CsvEd;
    throw ConfigError("unknown corpus format '" + name + "' (expected jsonl or csv-ed)");
}

namespace {

std::vector<DialogueExample> load_jsonl(const std::string& path, const LabelSet& labels) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open corpus file '" + path + "'");
    std::vector<DialogueExample> examples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const std::string where = path + " line " + std::to_string(line_no);
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + ": " + e.what());
        }
        if (!obj.is_object() || !obj.contains("utterances") || !obj.contains("response") ||
            !obj.contains("emotion"))
            throw FormatError(where + ": expected an object with utterances/response/emotion");

        DialogueExample ex;
        if (!obj["utterances"].is_array())
            throw FormatError(where + ": utterances must be an array");
        for (const auto& u : obj["utterances"]) {
            if (!u.is_object() || !u.contains("role") || !u.contains("text") ||
                !u["role"].is_string() || !u["text"].is_string())
                throw FormatError(where + ": each utterance needs string role and text");
            ex.utterances.push_back(
                {role_from_name(u["role"].get<std::string>()), u["text"].get<std::string>()});
        }
        if (!obj["response"].is_string() || !obj["emotion"].is_string())
            throw FormatError(where + ": response and emotion must be strings");
        ex.gold_response = obj["response"].get<std::string>();
        ex.emotion = obj["emotion"].get<std::string>();

        labels.index_of(ex.emotion);  // DomainError lists the valid labels
        try {
            ex.validate();
        } catch (const FormatError& e) {
            throw FormatError(where + ": " + e.what());
        }
        examples.push_back(std::move(ex));
    }
    return examples;
}

struct CsvRow {
    std::int64_t utterance_idx;
    std::string emotion;
    std::string text;
};

std::vector<DialogueExample> load_csv_ed(const std::string& path, const LabelSet& labels) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open corpus file '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || strip_cr(line).rfind("conv_id,", 0) != 0)
        throw FormatError(path + ": expected a conv_id,... header line");

    // group rows by conversation, preserving first-appearance order
    std::vector<std::string> conv_order;
    std::map<std::string, std::vector<CsvRow>> convs;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const std::string where = path + " line " + std::to_string(line_no);
        auto fields = split_csv_line(line);
        if (fields.size() < 6)
            throw FormatError(where + ": expected at least 6 comma-separated fields, found " +
                              std::to_string(fields.size()));
        CsvRow row;
        try {
            row.utterance_idx = std::stoll(fields[1]);
        } catch (const std::exception&) {
            throw FormatError(where + ": utterance_idx '" + fields[1] + "' is not a number");
        }
        row.emotion = fields[2];
        row.text = fields[5];
        replace_all(row.text, "_comma_", ",");
        if (convs.emplace(fields[0], std::vector<CsvRow>{}).second)
            conv_order.push_back(fields[0]);
        convs[fields[0]].push_back(std::move(row));
    }

    std::vector<DialogueExample> examples;
    for (const auto& conv_id : conv_order) {
        auto& rows = convs[conv_id];
        std::stable_sort(rows.begin(), rows.end(),
                         [](const CsvRow& a, const CsvRow& b) {
                             return a.utterance_idx < b.utterance_idx;
                         });
        std::vector<Utterance> history;
        for (const auto& row : rows) {
            // odd utterance_idx = the speaker who felt the emotion, even = listener
            const Role role = row.utterance_idx % 2 == 1 ? Role::Speaker : Role::Listener;
            if (role == Role::Listener && !history.empty()) {
                DialogueExample ex;
                ex.utterances = history;
                ex.gold_response = row.text;
                ex.emotion = row.emotion;
                labels.index_of(ex.emotion);
                try {
                    ex.validate();
                } catch (const FormatError& e) {
                    throw FormatError(path + " conversation '" + conv_id + "': " + e.what());
                }
                examples.push_back(std::move(ex));
            }
            history.push_back({role, row.text});
        }
    }
    return examples;
}

}  // namespace

std::vector<DialogueExample> load_corpus(const std::string& path, CorpusFormat format,
                                         const LabelSet& labels) {
    return format == CorpusFormat::Jsonl ? load_jsonl(path, labels)
                                         : load_csv_ed(path, labels);
}

void save_corpus_jsonl(const std::vector<DialogueExample>& examples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write corpus file '" + path + "'");
    for (const auto& ex : examples) {
        nlohmann::json utterances = nlohmann::json::array();
        for (const auto& u : ex.utterances)
            utterances.push_back({{"role", role_name(u.role)}, {"text", u.text}});
        nlohmann::json obj = {{"utterances", utterances},
                              {"response", ex.gold_response},
                              {"emotion", ex.emotion}};
        out << obj.dump() << '\n';
    }
}

// ---- synthetic corpus ----

std::vector<DialogueExample> synth_corpus(std::uint64_t seed, std::int64_t size, std::int64_t k,
                                          std::int64_t vocab_budget) {
    if (size < 1) throw ContractError("synth_corpus: size must be positive");
    if (k < 2) throw ContractError("synth_corpus: k must be at least 2");
    if (k > vocab_budget / 4)
        throw ContractError("synth_corpus: needs k <= vocab_budget/4 (" + std::to_string(k) +
                            " > " + std::to_string(vocab_budget) + "/4)");

    // distinct surface forms: 11 scaffold words + T topics + T keywords +
    // k moods + k sentiment words + the filler pool
    const std::int64_t scaffold = 11;
    const std::int64_t topics =
        std::min<std::int64_t>(16, (vocab_budget - scaffold - 2 * k - 4) / 2);
    if (topics < 2)
        throw ContractError("synth_corpus: vocab_budget " + std::to_string(vocab_budget) +
                            " too small for k=" + std::to_string(k));
    const std::int64_t fillers = vocab_budget - scaffold - 2 * topics - 2 * k;

    Rng rng(seed);
    std::vector<DialogueExample> out;
    out.reserve(static_cast<std::size_t>(size));
    for (std::int64_t i = 0; i < size; ++i) {
        const std::int64_t topic = rng.uniform_int(topics);
        const std::int64_t mood = rng.uniform_int(k);  // independent of topic

        std::string context;
        if (rng.uniform_int(2) == 1)
            context += "filler" + std::to_string(rng.uniform_int(fillers)) + " ";
        context += "i saw the topic" + std::to_string(topic) + " today and felt mood" +
                   std::to_string(mood);
        if (rng.uniform_int(2) == 1)
            context += " filler" + std::to_string(rng.uniform_int(fillers));

        DialogueExample ex;
        ex.utterances = {{Role::Speaker, context}};
        ex.gold_response = "the kw" + std::to_string(topic) + " made me feel sent" +
                           std::to_string(mood);
        ex.emotion = "emo" + std::to_string(mood);
        out.push_back(std::move(ex));
    }
    return out;
}

// ---- batching ----

std::vector<Batch> batchify(const std::vector<DialogueExample>& examples,
                            const Vocabulary& vocab, const LabelSet& labels,
                            std::int64_t batch_size, std::int64_t max_len) {
    if (examples.empty()) throw ContractError("batchify: no examples");
    if (batch_size < 1)
        throw ConfigError("batchify: batch_size must be positive, got " +
                          std::to_string(batch_size));
    if (max_len < 2) throw ConfigError("batchify: max_len must be at least 2");

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < examples.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop =
            std::min(examples.size(), start + static_cast<std::size_t>(batch_size));
        Batch batch;
        std::size_t n_max = 0, m_max = 0;
        for (std::size_t i = start; i < stop; ++i) {
            const auto& ex = examples[i];
            auto ctx = flatten_dialogue(ex, vocab, max_len);
            auto resp = vocab.encode(tokenize(ex.gold_response));
            if (static_cast<std::int64_t>(resp.size()) > max_len - 1)
                resp.resize(static_cast<std::size_t>(max_len - 1));

            std::vector<std::int64_t> rin = {special_ids::kSos};
            rin.insert(rin.end(), resp.begin(), resp.end());
            std::vector<std::int64_t> rgold = resp;
            rgold.push_back(special_ids::kEos);

            n_max = std::max(n_max, ctx.size());
            m_max = std::max(m_max, rin.size());
            batch.context_ids.push_back(std::move(ctx));
            batch.response_in.push_back(std::move(rin));
            batch.response_gold.push_back(std::move(rgold));
            batch.emotions.push_back(labels.index_of(ex.emotion));
        }
        for (std::size_t b = 0; b < batch.context_ids.size(); ++b) {
            auto& ctx = batch.context_ids[b];
            batch.context_keep.emplace_back(ctx.size(), 1);
            batch.context_keep[b].resize(n_max, 0);
            ctx.resize(n_max, special_ids::kPad);

            auto& rin = batch.response_in[b];
            batch.response_keep.emplace_back(rin.size(), 1);
            batch.response_keep[b].resize(m_max, 0);
            rin.resize(m_max, special_ids::kPad);
            batch.response_gold[b].resize(m_max, special_ids::kPad);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace cedual
