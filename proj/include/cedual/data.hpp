#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cedual/common.hpp"

namespace cedual {

enum class Role { Speaker, Listener };

std::string role_name(Role r);
Role role_from_name(const std::string& name);  // FormatError on unknown

struct Utterance {
    Role role = Role::Speaker;
    std::string text;
};

// One training example: the dialogue history (alternating roles, starting and
// ending with the speaker), the listener reply to learn, and the speaker's
// emotion label name.
struct DialogueExample {
    std::vector<Utterance> utterances;
    std::string gold_response;
    std::string emotion;

    void validate() const;  // FormatError on any violated invariant
};

// Lowercases ASCII, detaches ASCII punctuation into single-character tokens,
// splits on whitespace. Deterministic; empty text gives an empty list.
std::vector<std::string> tokenize(const std::string& text);

// token <-> id bijection with a fixed reserved block (see special_ids).
class Vocabulary {
  public:
    Vocabulary();  // reserved tokens only

    // Inserts unseen tokens in first-seen order after the reserved block.
    static Vocabulary build(const std::vector<std::vector<std::string>>& token_lists);

    std::int64_t add(const std::string& token);           // id of token, inserting if new
    std::int64_t id_of(const std::string& token) const;   // kUnk when absent
    const std::string& token_of(std::int64_t id) const;   // DomainError when out of range
    std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }

    std::vector<std::int64_t> encode(const std::vector<std::string>& tokens) const;
    std::string decode_text(const std::vector<std::int64_t>& ids) const;  // space-joined

    void save(const std::string& path) const;        // one token per line, id order
    static Vocabulary load(const std::string& path);  // FormatError on bad file

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> index_;
};

// Ordered emotion label list with name <-> index lookup.
class LabelSet {
  public:
    explicit LabelSet(std::vector<std::string> names);  // ConfigError on dup/empty

    // The 32-label set of the EMPATHETICDIALOGUES benchmark.
    static LabelSet empathetic_dialogues();
    // emo0..emo{k-1}, the synthetic corpus labels.
    static LabelSet synthetic(std::int64_t k);
    static LabelSet load(const std::string& path);  // one name per line
    void save(const std::string& path) const;

    std::int64_t index_of(const std::string& name) const;  // DomainError listing valid names
    const std::string& name_of(std::int64_t index) const;  // DomainError when out of range
    std::int64_t size() const { return static_cast<std::int64_t>(names_.size()); }
    const std::vector<std::string>& names() const { return names_; }

  private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, std::int64_t> index_;
};

// [<spk>] u1 [<lst>] s1 ... [<spk>] ut as ids, then left-truncated to the
// last max_len ids so the newest turns always survive.
std::vector<std::int64_t> flatten_dialogue(const DialogueExample& ex, const Vocabulary& vocab,
                                           std::int64_t max_len);

enum class CorpusFormat { Jsonl, CsvEd };

CorpusFormat corpus_format_from_name(const std::string& name);  // ConfigError on unknown

// jsonl: one example object per line:
//   {"utterances":[{"role":"speaker","text":...},...],"response":...,"emotion":...}
// csv-ed: the EMPATHETICDIALOGUES CSV export (conv_id, utterance_idx, context,
// prompt, speaker_idx, utterance, ... with "_comma_" escapes); each dialogue
// expands into one example per listener turn (history so far -> that turn).
// Every emotion name must resolve against `labels`.
std::vector<DialogueExample> load_corpus(const std::string& path, CorpusFormat format,
                                         const LabelSet& labels);

void save_corpus_jsonl(const std::vector<DialogueExample>& examples, const std::string& path);

// Single-turn dialogues built from two independently sampled latent factors:
// a topic token that fixes the response keyword and a mood token that fixes
// both the label (emo{i}) and the response sentiment word. Deterministic in
// the seed. Requires k <= vocab_budget/4; vocab_budget caps the distinct
// surface forms the generator may use.
std::vector<DialogueExample> synth_corpus(std::uint64_t seed, std::int64_t size, std::int64_t k,
                                          std::int64_t vocab_budget);

// Row-padded model inputs for a slice of examples.
struct Batch {
    std::vector<std::vector<std::int64_t>> context_ids;  // padded to the batch max
    std::vector<std::vector<std::uint8_t>> context_keep;
    std::vector<std::vector<std::int64_t>> response_in;    // <sos>-prefixed
    std::vector<std::vector<std::int64_t>> response_gold;  // <eos>-suffixed
    std::vector<std::vector<std::uint8_t>> response_keep;
    std::vector<std::int64_t> emotions;

    std::int64_t size() const { return static_cast<std::int64_t>(context_ids.size()); }
};

// Consecutive slices of `examples` in order, padded per batch; response
// streams satisfy response_gold[t] == response_in[t+1] for non-terminal t.
std::vector<Batch> batchify(const std::vector<DialogueExample>& examples,
                            const Vocabulary& vocab, const LabelSet& labels,
                            std::int64_t batch_size, std::int64_t max_len);

}  // namespace cedual
