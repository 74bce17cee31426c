#include "cedual/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace cedual {

namespace {

constexpr char kMagic[8] = {'C', 'E', 'D', 'U', 'A', 'L', 'v', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
  public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
    void text(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    const std::vector<char>& bytes() const { return bytes_; }

  private:
    std::vector<char> bytes_;
};

class Reader {
  public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
                 << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string text() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void raw(char* out, std::size_t n) {
        need(n);
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    bool exhausted() const { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError("checkpoint: truncated file");
    }
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const CedualModel& model,
                     const Vocabulary& vocab, const LabelSet& labels, const RunConfig& config,
                     std::uint64_t step) {
    Writer w;
    w.raw(kMagic, sizeof(kMagic));
    w.u32(kVersion);
    w.u64(static_cast<std::uint64_t>(config.seed));
    w.u64(step);
    w.text(config.to_json_text());

    w.u32(static_cast<std::uint32_t>(vocab.size()));
    for (std::int64_t id = 0; id < vocab.size(); ++id) w.text(vocab.token_of(id));

    w.u32(static_cast<std::uint32_t>(labels.size()));
    for (const auto& name : labels.names()) w.text(name);

    const auto names = model.params().names();  // lexicographic by contract
    w.u32(static_cast<std::uint32_t>(names.size()));
    for (const auto& name : names) {
        const Tensor param = model.params().get(name);
        w.text(name);
        w.u32(static_cast<std::uint32_t>(param.shape().size()));
        for (std::int64_t dim : param.shape()) w.u64(static_cast<std::uint64_t>(dim));
        for (double value : param.data()) w.f64(value);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw FormatError("checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    Reader r(std::move(bytes));

    char magic[8];
    r.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("checkpoint: bad magic; not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t seed = r.u64();
    const std::uint64_t step = r.u64();

    RunConfig config;
    try {
        config = RunConfig::from_json_text(r.text());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: embedded config: ") + e.what());
    }

    const std::uint32_t vocab_count = r.u32();
    Vocabulary vocab;
    for (std::uint32_t id = 0; id < vocab_count; ++id) {
        const std::string token = r.text();
        if (id < static_cast<std::uint32_t>(special_ids::kCount)) {
            if (token != vocab.token_of(static_cast<std::int64_t>(id)))
                throw FormatError("checkpoint: reserved token block is corrupt");
            continue;
        }
        if (vocab.add(token) != static_cast<std::int64_t>(id))
            throw FormatError("checkpoint: duplicate vocabulary token '" + token + "'");
    }

    const std::uint32_t label_count = r.u32();
    std::vector<std::string> label_names;
    label_names.reserve(label_count);
    for (std::uint32_t i = 0; i < label_count; ++i) label_names.push_back(r.text());
    LabelSet labels = [&] {
        try {
            return LabelSet(std::move(label_names));
        } catch (const ConfigError& e) {
            throw FormatError(std::string("checkpoint: label block: ") + e.what());
        }
    }();

    CedualModel model{config.model_config(vocab.size(), labels.size())};
    const std::uint32_t param_count = r.u32();
    if (param_count != static_cast<std::uint32_t>(model.params().names().size()))
        throw FormatError("checkpoint: parameter count does not match the stored config");
    for (std::uint32_t i = 0; i < param_count; ++i) {
        const std::string name = r.text();
        if (!model.params().has(name))
            throw FormatError("checkpoint: unexpected parameter '" + name + "'");
        Tensor param = model.params().get(name);
        const std::uint32_t rank = r.u32();
        Shape dims(rank);
        for (auto& dim : dims) dim = static_cast<std::int64_t>(r.u64());
        if (dims != param.shape())
            throw FormatError("checkpoint: parameter '" + name + "' has the wrong shape");
        for (auto& value : param.mutable_data()) value = r.f64();
    }
    if (!r.exhausted()) throw FormatError("checkpoint: trailing bytes after parameters");

    return LoadedCheckpoint{std::move(config), std::move(vocab), std::move(labels),
                            seed,              step,             std::move(model)};
}

}  // namespace cedual
