#include "cedual/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace cedual {

namespace {

// n-grams are joined with a separator no tokenizer output can contain.
std::string gram_key(const std::vector<std::string>& tokens, std::size_t start,
                     std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += tokens[start + i];
    }
    return key;
}

struct UnpaddedExample {
    std::vector<std::int64_t> context_ids;
    std::vector<std::uint8_t> context_keep;
    std::vector<std::int64_t> response_in;
    std::vector<std::int64_t> response_gold;
    std::vector<std::uint8_t> response_keep;
    std::int64_t emotion = 0;
};

// Batches carry right-padding for uniform shapes; metrics work per example,
// so strip it back off.
UnpaddedExample strip_padding(const Batch& batch, std::int64_t b) {
    const auto idx = static_cast<std::size_t>(b);
    UnpaddedExample ex;
    for (std::size_t t = 0; t < batch.context_ids[idx].size(); ++t) {
        if (!batch.context_keep[idx][t]) break;
        ex.context_ids.push_back(batch.context_ids[idx][t]);
        ex.context_keep.push_back(1);
    }
    for (std::size_t t = 0; t < batch.response_in[idx].size(); ++t) {
        if (!batch.response_keep[idx][t]) break;
        ex.response_in.push_back(batch.response_in[idx][t]);
        ex.response_gold.push_back(batch.response_gold[idx][t]);
        ex.response_keep.push_back(1);
    }
    ex.emotion = batch.emotions[idx];
    return ex;
}

}  // namespace

double bleu_corpus(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references) {
    if (hypotheses.size() != references.size())
        throw DimensionError("bleu_corpus: " + std::to_string(hypotheses.size()) +
                             " hypotheses vs " + std::to_string(references.size()) +
                             " references");
    if (hypotheses.empty()) throw DomainError("bleu_corpus: empty corpus");
    for (const auto& ref : references)
        if (ref.empty()) throw DomainError("bleu_corpus: empty reference");

    std::int64_t hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        hyp_len += static_cast<std::int64_t>(hypotheses[i].size());
        ref_len += static_cast<std::int64_t>(references[i].size());
    }
    if (hyp_len == 0) return 0.0;

    double log_precision_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::int64_t matched = 0, total = 0;
        for (std::size_t i = 0; i < hypotheses.size(); ++i) {
            const auto& hyp = hypotheses[i];
            const auto& ref = references[i];
            if (hyp.size() < n) continue;
            std::unordered_map<std::string, std::int64_t> ref_counts;
            if (ref.size() >= n)
                for (std::size_t s = 0; s + n <= ref.size(); ++s) ++ref_counts[gram_key(ref, s, n)];
            std::unordered_map<std::string, std::int64_t> hyp_counts;
            for (std::size_t s = 0; s + n <= hyp.size(); ++s) ++hyp_counts[gram_key(hyp, s, n)];
            for (const auto& [key, count] : hyp_counts) {
                total += count;
                const auto it = ref_counts.find(key);
                if (it != ref_counts.end()) matched += std::min(count, it->second);
            }
        }
        // no smoothing: a vanished precision vanishes the geometric mean
        if (total == 0 || matched == 0) return 0.0;
        log_precision_sum +=
            0.25 * std::log(static_cast<double>(matched) / static_cast<double>(total));
    }

    const double brevity =
        hyp_len > ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * brevity * std::exp(log_precision_sum);
}

double perplexity(const CedualModel& model, const std::vector<Batch>& batches) {
    NoGradGuard no_grad;
    double nll_sum = 0.0;
    std::int64_t token_count = 0;
    for (const auto& batch : batches) {
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const UnpaddedExample ex = strip_padding(batch, b);
            RunContext rc;
            const auto enc = model.encode_dual(ex.context_ids, ex.context_keep, rc);
            const Tensor states = model.decode(enc, ex.response_in, ex.response_keep, rc);
            const Tensor logits = model.output_logits(states);
            const std::int64_t vocab = logits.cols();
            for (std::size_t t = 0; t < ex.response_gold.size(); ++t) {
                // stable log-sum-exp per row, summed independently of l_gen
                double row_max = logits.at(static_cast<std::int64_t>(t), 0);
                for (std::int64_t v = 1; v < vocab; ++v)
                    row_max = std::max(row_max, logits.at(static_cast<std::int64_t>(t), v));
                double sum_exp = 0.0;
                for (std::int64_t v = 0; v < vocab; ++v)
                    sum_exp += std::exp(logits.at(static_cast<std::int64_t>(t), v) - row_max);
                const double lse = row_max + std::log(sum_exp);
                nll_sum += lse - logits.at(static_cast<std::int64_t>(t),
                                           ex.response_gold[t]);
                ++token_count;
            }
        }
    }
    if (token_count == 0) throw ContractError("perplexity: no gold tokens to score");
    return std::exp(nll_sum / static_cast<double>(token_count));
}

double emotion_accuracy(const CedualModel& model, const std::vector<Batch>& batches) {
    NoGradGuard no_grad;
    std::int64_t hits = 0, total = 0;
    for (const auto& batch : batches) {
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const UnpaddedExample ex = strip_padding(batch, b);
            RunContext rc;
            const auto enc = model.encode_dual(ex.context_ids, ex.context_keep, rc);
            if (model.predict_emotion(enc).index == ex.emotion) ++hits;
            ++total;
        }
    }
    if (total == 0) throw ContractError("emotion_accuracy: no examples to score");
    return static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<std::vector<std::string>> generate_corpus(const CedualModel& model,
                                                      const std::vector<Batch>& batches,
                                                      const Vocabulary& vocab,
                                                      const GenerationOptions& opts) {
    std::vector<std::vector<std::string>> hypotheses;
    for (const auto& batch : batches) {
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const UnpaddedExample ex = strip_padding(batch, b);
            std::vector<std::string> tokens;
            for (std::int64_t id : model.generate(ex.context_ids, opts))
                tokens.push_back(vocab.token_of(id));
            hypotheses.push_back(std::move(tokens));
        }
    }
    return hypotheses;
}

MetricReport evaluate(const CedualModel& model, const std::vector<Batch>& batches,
                      const Vocabulary& vocab, const GenerationOptions& opts) {
    MetricReport report;
    report.perplexity = perplexity(model, batches);
    report.emotion_accuracy = emotion_accuracy(model, batches);

    std::vector<std::vector<std::string>> references;
    for (const auto& batch : batches) {
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const UnpaddedExample ex = strip_padding(batch, b);
            std::vector<std::string> tokens;
            for (std::int64_t id : ex.response_gold)
                if (id != special_ids::kEos) tokens.push_back(vocab.token_of(id));
            references.push_back(std::move(tokens));
        }
    }
    report.bleu = bleu_corpus(generate_corpus(model, batches, vocab, opts), references);
    return report;
}

double linear_probe_accuracy(const std::vector<std::vector<double>>& features,
                             const std::vector<std::int64_t>& labels, std::int64_t num_classes,
                             std::uint64_t seed) {
    if (features.size() != labels.size())
        throw DimensionError("linear_probe_accuracy: " + std::to_string(features.size()) +
                             " feature rows vs " + std::to_string(labels.size()) + " labels");
    if (features.size() < 2)
        throw ContractError("linear_probe_accuracy: need at least two examples");
    if (num_classes < 2) throw DomainError("linear_probe_accuracy: need at least two classes");
    const std::int64_t dim = static_cast<std::int64_t>(features.front().size());
    if (dim < 1) throw DimensionError("linear_probe_accuracy: empty feature vectors");
    for (const auto& row : features)
        if (static_cast<std::int64_t>(row.size()) != dim)
            throw DimensionError("linear_probe_accuracy: ragged feature rows");
    for (std::int64_t label : labels)
        if (label < 0 || label >= num_classes)
            throw DomainError("linear_probe_accuracy: label out of range");

    std::vector<std::int64_t> order(features.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t train_count = features.size() / 2;

    // standardize with training-split statistics for a well-conditioned fit
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    std::vector<double> scale(static_cast<std::size_t>(dim), 0.0);
    for (std::size_t i = 0; i < train_count; ++i)
        for (std::int64_t d = 0; d < dim; ++d)
            mean[static_cast<std::size_t>(d)] +=
                features[static_cast<std::size_t>(order[i])][static_cast<std::size_t>(d)];
    for (auto& m : mean) m /= static_cast<double>(train_count);
    for (std::size_t i = 0; i < train_count; ++i)
        for (std::int64_t d = 0; d < dim; ++d) {
            const double delta =
                features[static_cast<std::size_t>(order[i])][static_cast<std::size_t>(d)] -
                mean[static_cast<std::size_t>(d)];
            scale[static_cast<std::size_t>(d)] += delta * delta;
        }
    for (auto& s : scale) s = std::sqrt(s / static_cast<double>(train_count)) + 1e-8;

    auto standardized = [&](std::int64_t example) {
        std::vector<double> row(static_cast<std::size_t>(dim));
        for (std::int64_t d = 0; d < dim; ++d)
            row[static_cast<std::size_t>(d)] =
                (features[static_cast<std::size_t>(example)][static_cast<std::size_t>(d)] -
                 mean[static_cast<std::size_t>(d)]) /
                scale[static_cast<std::size_t>(d)];
        return row;
    };

    std::vector<double> train_data;
    std::vector<std::int64_t> train_labels;
    std::vector<std::uint8_t> train_keep;
    for (std::size_t i = 0; i < train_count; ++i) {
        const auto row = standardized(order[i]);
        train_data.insert(train_data.end(), row.begin(), row.end());
        train_labels.push_back(labels[static_cast<std::size_t>(order[i])]);
        train_keep.push_back(1);
    }
    const Tensor inputs = Tensor::from_data(
        {static_cast<std::int64_t>(train_count), dim}, std::move(train_data));

    Tensor weight = Tensor::zeros({dim, num_classes}, /*requires_grad=*/true);
    Tensor bias = Tensor::zeros({num_classes}, /*requires_grad=*/true);

    // full-batch gradient descent on a convex objective: deterministic and
    // plenty for an affine readout
    const double lr = 0.5;
    for (int iter = 0; iter < 400; ++iter) {
        weight.zero_grad();
        bias.zero_grad();
        const Tensor logits = add_rowvec(matmul(inputs, weight), bias);
        masked_mean_cross_entropy(logits, train_labels, train_keep).backward();
        for (std::int64_t i = 0; i < weight.numel(); ++i)
            weight.set(i, weight.at(i) -
                              lr * weight.node_ptr()->grad[static_cast<std::size_t>(i)]);
        for (std::int64_t i = 0; i < bias.numel(); ++i)
            bias.set(i, bias.at(i) - lr * bias.node_ptr()->grad[static_cast<std::size_t>(i)]);
    }

    NoGradGuard no_grad;
    std::int64_t hits = 0, held_out = 0;
    for (std::size_t i = train_count; i < order.size(); ++i) {
        const auto row = standardized(order[i]);
        std::int64_t best = 0;
        double best_score = 0.0;
        for (std::int64_t c = 0; c < num_classes; ++c) {
            double score = bias.at(c);
            for (std::int64_t d = 0; d < dim; ++d)
                score += row[static_cast<std::size_t>(d)] * weight.at(d, c);
            if (c == 0 || score > best_score) {
                best = c;
                best_score = score;
            }
        }
        if (best == labels[static_cast<std::size_t>(order[i])]) ++hits;
        ++held_out;
    }
    if (held_out == 0) throw ContractError("linear_probe_accuracy: empty held-out split");
    return static_cast<double>(hits) / static_cast<double>(held_out);
}

}  // namespace cedual
