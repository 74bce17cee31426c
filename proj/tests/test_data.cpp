#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cedual/data.hpp"
#include "cedual/model.hpp"
#include "testutil.hpp"

using namespace cedual;

namespace {

// Self-deleting scratch file for save/load round-trips.
struct TempFile {
    std::filesystem::path path;

    explicit TempFile(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("cedual_test_" + tag + "_" + std::to_string(++counter) + ".txt");
    }
    ~TempFile() { std::filesystem::remove(path); }

    void write(const std::string& content) const {
        std::ofstream out(path);
        out << content;
    }
    std::string str() const { return path.string(); }
};

DialogueExample make_example(std::vector<std::string> texts, std::string response,
                             std::string emotion) {
    DialogueExample ex;
    for (std::size_t i = 0; i < texts.size(); ++i)
        ex.utterances.push_back(
            {i % 2 == 0 ? Role::Speaker : Role::Listener, std::move(texts[i])});
    ex.gold_response = std::move(response);
    ex.emotion = std::move(emotion);
    return ex;
}

// Index of the unique token with the given prefix, or -1.
std::int64_t marker_index(const std::vector<std::string>& tokens, const std::string& prefix) {
    std::int64_t found = -1;
    for (const auto& t : tokens)
        if (t.rfind(prefix, 0) == 0) {
            if (found != -1) return -2;  // duplicate marker
            found = std::stoll(t.substr(prefix.size()));
        }
    return found;
}

}  // namespace

TEST_CASE("tokenize rules") {
    CHECK(tokenize("I could not wait!") ==
          std::vector<std::string>{"i", "could", "not", "wait", "!"});
    CHECK(tokenize("").empty());
    CHECK(tokenize("   \t\n ").empty());
    CHECK(tokenize("Don't stop-now.") ==
          std::vector<std::string>{"don", "'", "t", "stop", "-", "now", "."});
    CHECK(tokenize("A  B\tC") == std::vector<std::string>{"a", "b", "c"});
    CHECK(tokenize("well...") == std::vector<std::string>{"well", ".", ".", "."});

    // idempotence: retokenizing the space-joined tokens changes nothing
    for (const char* text : {"I could not wait!", "Don't stop-now.", "it was SO good, really.",
                             "numbers 123 stay 4ever"}) {
        auto once = tokenize(text);
        std::string joined;
        for (const auto& t : once) joined += t + " ";
        CHECK(tokenize(joined) == once);
    }
}

TEST_CASE("dialogue example validation") {
    CHECK_NOTHROW(make_example({"hi", "hello", "how are you"}, "fine", "joyful").validate());
    CHECK_NOTHROW(make_example({"hi"}, "hello", "proud").validate());

    DialogueExample starts_listener;
    starts_listener.utterances = {{Role::Listener, "hi"}};
    starts_listener.gold_response = "r";
    starts_listener.emotion = "sad";
    CHECK_THROWS_AS(starts_listener.validate(), FormatError);

    DialogueExample double_speaker = make_example({"a", "b", "c"}, "r", "sad");
    double_speaker.utterances[1].role = Role::Speaker;
    CHECK_THROWS_AS(double_speaker.validate(), FormatError);

    DialogueExample ends_listener = make_example({"a", "b"}, "r", "sad");
    CHECK_THROWS_AS(ends_listener.validate(), FormatError);

    DialogueExample no_response = make_example({"a"}, "", "sad");
    CHECK_THROWS_AS(no_response.validate(), FormatError);

    DialogueExample no_utterances;
    no_utterances.gold_response = "r";
    no_utterances.emotion = "sad";
    CHECK_THROWS_AS(no_utterances.validate(), FormatError);

    CHECK(role_name(Role::Speaker) == "speaker");
    CHECK(role_from_name("listener") == Role::Listener);
    CHECK_THROWS_AS(role_from_name("narrator"), FormatError);
}

TEST_CASE("vocabulary basics and round-trip") {
    Vocabulary fresh;
    CHECK(fresh.size() == static_cast<std::int64_t>(special_ids::kCount));
    CHECK(fresh.token_of(special_ids::kPad) == "<pad>");
    CHECK(fresh.token_of(special_ids::kUnk) == "<unk>");
    CHECK(fresh.token_of(special_ids::kSos) == "<sos>");
    CHECK(fresh.token_of(special_ids::kEos) == "<eos>");
    CHECK(fresh.token_of(special_ids::kSepSpeaker) == "<spk>");
    CHECK(fresh.token_of(special_ids::kSepListener) == "<lst>");

    Vocabulary vocab = Vocabulary::build({tokenize("the cat sat"), tokenize("the dog sat")});
    CHECK(vocab.size() == 6 + 4);  // the, cat, sat, dog
    CHECK(vocab.id_of("the") == 6);  // first unseen token lands right after reserved block
    CHECK(vocab.id_of("dog") == 9);
    CHECK(vocab.id_of("aardvark") == special_ids::kUnk);
    CHECK(vocab.token_of(vocab.id_of("cat")) == "cat");
    CHECK_THROWS_AS(vocab.token_of(-1), DomainError);
    CHECK_THROWS_AS(vocab.token_of(vocab.size()), DomainError);

    CHECK(vocab.encode({"the", "emu", "sat"}) ==
          std::vector<std::int64_t>{6, special_ids::kUnk, 8});
    CHECK(vocab.decode_text({6, 7, 8}) == "the cat sat");

    std::int64_t before = vocab.size();
    CHECK(vocab.add("the") == 6);  // re-adding is a lookup
    CHECK(vocab.size() == before);

    TempFile file("vocab");
    vocab.save(file.str());
    Vocabulary loaded = Vocabulary::load(file.str());
    CHECK(loaded.size() == vocab.size());
    for (std::int64_t id = 0; id < vocab.size(); ++id)
        CHECK(loaded.token_of(id) == vocab.token_of(id));

    TempFile bad("vocab_bad");
    bad.write("<pad>\n<unk>\nnot-the-reserved-block\n");
    CHECK_THROWS_AS(Vocabulary::load(bad.str()), FormatError);
    CHECK_THROWS_AS(Vocabulary::load("/nonexistent/vocab.txt"), FormatError);
}

TEST_CASE("label sets") {
    LabelSet ed = LabelSet::empathetic_dialogues();
    CHECK(ed.size() == 32);
    std::set<std::string> distinct(ed.names().begin(), ed.names().end());
    CHECK(distinct.size() == 32);
    for (std::int64_t i = 0; i < ed.size(); ++i) CHECK(ed.index_of(ed.name_of(i)) == i);
    CHECK(ed.index_of("surprised") == 0);

    try {
        ed.index_of("melancholic");
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("surprised") != std::string::npos);
    }
    CHECK_THROWS_AS(ed.name_of(32), DomainError);

    LabelSet synth = LabelSet::synthetic(4);
    CHECK(synth.size() == 4);
    CHECK(synth.name_of(0) == "emo0");
    CHECK(synth.index_of("emo3") == 3);

    CHECK_THROWS_AS(LabelSet({"a", "a"}), ConfigError);
    CHECK_THROWS_AS(LabelSet(std::vector<std::string>{}), ConfigError);

    TempFile file("labels");
    ed.save(file.str());
    LabelSet loaded = LabelSet::load(file.str());
    CHECK(loaded.names() == ed.names());
}

TEST_CASE("flatten_dialogue layout and truncation") {
    Vocabulary vocab = Vocabulary::build(
        {tokenize("hello there"), tokenize("hi friend"), tokenize("how are you today")});

    DialogueExample single = make_example({"hello there"}, "r", "sad");
    CHECK(flatten_dialogue(single, vocab, 64) ==
          std::vector<std::int64_t>{special_ids::kSepSpeaker, vocab.id_of("hello"),
                                    vocab.id_of("there")});

    DialogueExample three =
        make_example({"hello there", "hi friend", "how are you today"}, "r", "sad");
    std::vector<std::int64_t> expected = {special_ids::kSepSpeaker,
                                          vocab.id_of("hello"),
                                          vocab.id_of("there"),
                                          special_ids::kSepListener,
                                          vocab.id_of("hi"),
                                          vocab.id_of("friend"),
                                          special_ids::kSepSpeaker,
                                          vocab.id_of("how"),
                                          vocab.id_of("are"),
                                          vocab.id_of("you"),
                                          vocab.id_of("today")};
    CHECK(flatten_dialogue(three, vocab, 64) == expected);

    // left truncation keeps the newest ids, so the final speaker block survives
    auto truncated = flatten_dialogue(three, vocab, 6);
    CHECK(truncated ==
          std::vector<std::int64_t>(expected.end() - 6, expected.end()));

    DialogueExample bad = three;
    bad.utterances[1].role = Role::Speaker;
    CHECK_THROWS_AS(flatten_dialogue(bad, vocab, 64), FormatError);
}

TEST_CASE("jsonl corpus round-trip and errors") {
    LabelSet labels = LabelSet::empathetic_dialogues();

    TempFile good("corpus");
    good.write(
        R"({"utterances":[{"role":"speaker","text":"I got a puppy, finally!"}],"response":"That is wonderful news","emotion":"excited"})"
        "\n"
        R"({"utterances":[{"role":"speaker","text":"my car broke"},{"role":"listener","text":"oh no"},{"role":"speaker","text":"again"}],"response":"I am so sorry","emotion":"annoyed"})"
        "\n");
    auto examples = load_corpus(good.str(), CorpusFormat::Jsonl, labels);
    REQUIRE(examples.size() == 2);
    CHECK(examples[0].utterances.size() == 1);
    CHECK(examples[0].utterances[0].role == Role::Speaker);
    CHECK(examples[0].utterances[0].text == "I got a puppy, finally!");
    CHECK(examples[0].gold_response == "That is wonderful news");
    CHECK(examples[0].emotion == "excited");
    CHECK(examples[1].utterances.size() == 3);
    CHECK(examples[1].utterances[1].role == Role::Listener);

    TempFile out("corpus_out");
    save_corpus_jsonl(examples, out.str());
    auto reloaded = load_corpus(out.str(), CorpusFormat::Jsonl, labels);
    REQUIRE(reloaded.size() == examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        CHECK(reloaded[i].gold_response == examples[i].gold_response);
        CHECK(reloaded[i].emotion == examples[i].emotion);
        REQUIRE(reloaded[i].utterances.size() == examples[i].utterances.size());
        for (std::size_t u = 0; u < examples[i].utterances.size(); ++u) {
            CHECK(reloaded[i].utterances[u].role == examples[i].utterances[u].role);
            CHECK(reloaded[i].utterances[u].text == examples[i].utterances[u].text);
        }
    }

    TempFile malformed("corpus_bad");
    malformed.write(
        R"({"utterances":[{"role":"speaker","text":"ok"}],"response":"r","emotion":"proud"})"
        "\nnot json at all\n");
    try {
        load_corpus(malformed.str(), CorpusFormat::Jsonl, labels);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }

    TempFile unknown("corpus_unk");
    unknown.write(
        R"({"utterances":[{"role":"speaker","text":"ok"}],"response":"r","emotion":"wistful"})"
        "\n");
    CHECK_THROWS_AS(load_corpus(unknown.str(), CorpusFormat::Jsonl, labels), DomainError);

    CHECK_THROWS_AS(load_corpus("/nonexistent/corpus.jsonl", CorpusFormat::Jsonl, labels),
                    FormatError);

    CHECK(corpus_format_from_name("jsonl") == CorpusFormat::Jsonl);
    CHECK(corpus_format_from_name("csv-ed") == CorpusFormat::CsvEd);
    CHECK_THROWS_AS(corpus_format_from_name("parquet"), ConfigError);
}

TEST_CASE("csv corpus expands one example per listener turn") {
    LabelSet labels = LabelSet::empathetic_dialogues();
    TempFile csv("csv_ed");
    csv.write(
        "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n"
        "hit:0_conv:0,1,sentimental,I miss my dog,2,I keep thinking about my old dog_comma_ Rex.,5|5|5,\n"
        "hit:0_conv:0,2,sentimental,I miss my dog,3,He sounds like a great friend.,5|5|5,\n"
        "hit:0_conv:0,3,sentimental,I miss my dog,2,He really was.,5|5|5,\n"
        "hit:0_conv:0,4,sentimental,I miss my dog,3,I bet he had a great life with you.,5|5|5,\n"
        "hit:1_conv:1,1,afraid,storm tonight,8,There is a huge storm coming tonight.,5|5|5,\n"
        "hit:1_conv:1,2,afraid,storm tonight,9,Stay safe indoors!,5|5|5,\n"
        "hit:1_conv:1,3,afraid,storm tonight,8,I will_comma_ thanks.,5|5|5,\n");
    auto examples = load_corpus(csv.str(), CorpusFormat::CsvEd, labels);

    // dialogue 1 has listener turns at idx 2 and 4; dialogue 2 only at idx 2
    REQUIRE(examples.size() == 3);
    CHECK(examples[0].utterances.size() == 1);
    CHECK(examples[0].utterances[0].text == "I keep thinking about my old dog, Rex.");
    CHECK(examples[0].gold_response == "He sounds like a great friend.");
    CHECK(examples[0].emotion == "sentimental");
    CHECK(examples[1].utterances.size() == 3);
    CHECK(examples[1].utterances[2].text == "He really was.");
    CHECK(examples[1].gold_response == "I bet he had a great life with you.");
    CHECK(examples[2].utterances.size() == 1);
    CHECK(examples[2].gold_response == "Stay safe indoors!");
    CHECK(examples[2].emotion == "afraid");
    for (const auto& ex : examples) CHECK_NOTHROW(ex.validate());

    TempFile short_row("csv_bad");
    short_row.write(
        "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n"
        "hit:0,1,sad\n");
    try {
        load_corpus(short_row.str(), CorpusFormat::CsvEd, labels);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("synthetic corpus structure") {
    const std::int64_t k = 8, budget = 96, size = 10000;
    auto corpus = synth_corpus(123, size, k, budget);
    REQUIRE(static_cast<std::int64_t>(corpus.size()) == size);

    auto again = synth_corpus(123, size, k, budget);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(corpus[i].utterances[0].text == again[i].utterances[0].text);
        CHECK(corpus[i].gold_response == again[i].gold_response);
        CHECK(corpus[i].emotion == again[i].emotion);
    }
    CHECK(synth_corpus(124, size, k, budget)[0].utterances[0].text !=
          corpus[0].utterances[0].text);

    LabelSet labels = LabelSet::synthetic(k);
    std::vector<std::int64_t> label_counts(static_cast<std::size_t>(k), 0);
    std::map<std::pair<std::int64_t, std::int64_t>, double> joint;
    std::map<std::int64_t, double> topic_marginal;
    std::map<std::int64_t, std::int64_t> mood_to_label, label_to_mood, topic_to_kw;
    std::set<std::string> words;

    for (const auto& ex : corpus) {
        CHECK_NOTHROW(ex.validate());
        CHECK(ex.utterances.size() == 1);
        const std::int64_t label = labels.index_of(ex.emotion);
        ++label_counts[static_cast<std::size_t>(label)];

        auto ctx_tokens = tokenize(ex.utterances[0].text);
        auto resp_tokens = tokenize(ex.gold_response);
        for (const auto& t : ctx_tokens) words.insert(t);
        for (const auto& t : resp_tokens) words.insert(t);

        const std::int64_t topic = marker_index(ctx_tokens, "topic");
        const std::int64_t mood = marker_index(ctx_tokens, "mood");
        const std::int64_t kw = marker_index(resp_tokens, "kw");
        const std::int64_t sent = marker_index(resp_tokens, "sent");
        REQUIRE(topic >= 0);  // exactly one of each marker
        REQUIRE(mood >= 0);
        REQUIRE(kw >= 0);
        REQUIRE(sent >= 0);

        CHECK(kw == topic);   // content factor ties context to response keyword
        CHECK(sent == label);  // emotion factor ties label to response sentiment
        // marker <-> label is a bijection in both directions
        auto [mit, minserted] = mood_to_label.try_emplace(mood, label);
        CHECK(mit->second == label);
        auto [lit, linserted] = label_to_mood.try_emplace(label, mood);
        CHECK(lit->second == mood);
        auto [tit, tinserted] = topic_to_kw.try_emplace(topic, kw);
        CHECK(tit->second == kw);

        joint[{topic, label}] += 1.0;
        topic_marginal[topic] += 1.0;
    }

    CHECK(static_cast<std::int64_t>(words.size()) <= budget);

    // label marginal close to uniform: every label within 25% of size/k
    for (std::int64_t c : label_counts) {
        CHECK(c > size / k * 3 / 4);
        CHECK(c < size / k * 5 / 4);
    }

    // independence of the two factors: plug-in mutual information is tiny
    double mi = 0.0;
    for (const auto& [tl, count] : joint) {
        const double pxy = count / static_cast<double>(size);
        const double px = topic_marginal[tl.first] / static_cast<double>(size);
        const double py =
            static_cast<double>(label_counts[static_cast<std::size_t>(tl.second)]) /
            static_cast<double>(size);
        mi += pxy * std::log(pxy / (px * py));
    }
    CHECK(mi < 0.01);

    CHECK_THROWS_AS(synth_corpus(1, 10, 30, budget), ContractError);  // k > budget/4
}

TEST_CASE("batchify layout, alignment, and padding oracle") {
    LabelSet labels = LabelSet::synthetic(4);
    std::vector<DialogueExample> examples = {
        make_example({"alpha beta gamma delta"}, "first response here", "emo0"),
        make_example({"alpha"}, "tiny", "emo2"),
        make_example({"beta gamma", "delta", "alpha beta"}, "a longer gold response", "emo1"),
    };
    std::vector<std::vector<std::string>> token_lists;
    for (const auto& ex : examples) {
        for (const auto& u : ex.utterances) token_lists.push_back(tokenize(u.text));
        token_lists.push_back(tokenize(ex.gold_response));
    }
    Vocabulary vocab = Vocabulary::build(token_lists);

    auto batches = batchify(examples, vocab, labels, 2, 32);
    REQUIRE(batches.size() == 2);
    CHECK(batches[0].size() == 2);
    CHECK(batches[1].size() == 1);

    for (const auto& batch : batches) {
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const auto& ctx = batch.context_ids[static_cast<std::size_t>(b)];
            const auto& ctx_keep = batch.context_keep[static_cast<std::size_t>(b)];
            const auto& rin = batch.response_in[static_cast<std::size_t>(b)];
            const auto& rgold = batch.response_gold[static_cast<std::size_t>(b)];
            const auto& rkeep = batch.response_keep[static_cast<std::size_t>(b)];
            REQUIRE(ctx.size() == ctx_keep.size());
            REQUIRE(rin.size() == rgold.size());
            REQUIRE(rin.size() == rkeep.size());

            CHECK(rin[0] == special_ids::kSos);
            bool seen_pad = false;
            for (std::size_t t = 0; t < rin.size(); ++t) {
                if (rkeep[t]) {
                    CHECK_FALSE(seen_pad);  // kept prefix, padded suffix
                    if (t + 1 < rin.size() && rkeep[t + 1]) {
                        CHECK(rgold[t] == rin[t + 1]);  // shifted-by-one alignment
                    } else {
                        CHECK(rgold[t] == special_ids::kEos);
                    }
                } else {
                    seen_pad = true;
                    CHECK(rin[t] == special_ids::kPad);
                    CHECK(rgold[t] == special_ids::kPad);
                }
            }
            for (std::size_t t = 0; t < ctx.size(); ++t) {
                if (!ctx_keep[t]) CHECK(ctx[t] == special_ids::kPad);
            }
        }
        // no padding on the longest row of the batch
        bool ctx_full = false, resp_full = false;
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            if (batch.context_keep[static_cast<std::size_t>(b)].back()) ctx_full = true;
            if (batch.response_keep[static_cast<std::size_t>(b)].back()) resp_full = true;
        }
        CHECK(ctx_full);
        CHECK(resp_full);
    }

    // row 0 of batch 0 (the longer context) against a hand-built encoding
    auto flat = flatten_dialogue(examples[0], vocab, 32);
    const auto& row = batches[0].context_ids[0];
    REQUIRE(row.size() >= flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) CHECK(row[i] == flat[i]);

    CHECK(batches[0].emotions == std::vector<std::int64_t>{0, 2});
    CHECK(batches[1].emotions == std::vector<std::int64_t>{1});

    CHECK_THROWS_AS(batchify({}, vocab, labels, 2, 32), ContractError);
    CHECK_THROWS_AS(batchify(examples, vocab, labels, 0, 32), ConfigError);
}

TEST_CASE("model loss is invariant to batch padding") {
    LabelSet labels = LabelSet::synthetic(4);
    std::vector<DialogueExample> examples = {
        make_example({"alpha"}, "tiny", "emo2"),
        make_example({"alpha beta gamma delta epsilon"}, "quite a long response indeed", "emo0"),
    };
    std::vector<std::vector<std::string>> token_lists;
    for (const auto& ex : examples) {
        token_lists.push_back(tokenize(ex.utterances[0].text));
        token_lists.push_back(tokenize(ex.gold_response));
    }
    Vocabulary vocab = Vocabulary::build(token_lists);

    ModelConfig cfg;
    cfg.layer.d_model = cfg.layer.d_emb = 8;
    cfg.layer.heads = 2;
    cfg.layer.d_ff = 16;
    cfg.layer.layers_enc = 1;
    cfg.layer.layers_dec_stage = 1;
    cfg.layer.dropout_rate = 0.0;
    cfg.layer.max_len = 32;
    cfg.vocab_size = vocab.size();
    cfg.num_emotions = 4;
    cfg.init_seed = 3;
    CedualModel model{cfg};

    // the short example padded next to the long one...
    auto padded = batchify(examples, vocab, labels, 2, 32).front();
    RunContext rc1;
    auto padded_losses =
        model.example_losses(padded.context_ids[0], padded.context_keep[0],
                             padded.response_in[0], padded.response_gold[0],
                             padded.response_keep[0], EmotionLabel{padded.emotions[0], 4}, rc1);

    // ...and alone, with no padding anywhere
    auto alone = batchify({examples[0]}, vocab, labels, 1, 32).front();
    RunContext rc2;
    auto alone_losses =
        model.example_losses(alone.context_ids[0], alone.context_keep[0], alone.response_in[0],
                             alone.response_gold[0], alone.response_keep[0],
                             EmotionLabel{alone.emotions[0], 4}, rc2);

    CHECK(std::fabs(padded_losses.breakdown.l_total.value() -
                    alone_losses.breakdown.l_total.value()) < 1e-12);
    CHECK(std::fabs(padded_losses.breakdown.l_gen.value() -
                    alone_losses.breakdown.l_gen.value()) < 1e-12);
    CHECK(std::fabs(padded_losses.breakdown.l_dis.value() -
                    alone_losses.breakdown.l_dis.value()) < 1e-12);
}
