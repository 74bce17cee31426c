#pragma once

#include <string>
#include <vector>

#include "cedual/data.hpp"
#include "cedual/model.hpp"

namespace cedual {

struct MetricReport {
    double emotion_accuracy = 0.0;  // [0, 1]
    double bleu = 0.0;              // [0, 100]
    double perplexity = 0.0;        // >= 1
};

// Corpus-level BLEU-4 over tokenized hypothesis/reference pairs: pooled
// clipped n-gram precisions (n = 1..4), geometric mean, brevity penalty,
// scaled by 100. No smoothing: a zero precision at any order zeroes the
// score. One reference per hypothesis.
double bleu_corpus(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references);

// exp of the token-weighted mean negative log-likelihood of the gold
// responses under teacher forcing, pads excluded.
double perplexity(const CedualModel& model, const std::vector<Batch>& batches);

// Fraction of examples whose argmax of y_e equals the gold label.
double emotion_accuracy(const CedualModel& model, const std::vector<Batch>& batches);

// Greedy (or per `opts`) generation for every example, decoded to tokens.
std::vector<std::vector<std::string>> generate_corpus(const CedualModel& model,
                                                      const std::vector<Batch>& batches,
                                                      const Vocabulary& vocab,
                                                      const GenerationOptions& opts);

// The full metric sweep: perplexity and accuracy under teacher forcing,
// plus BLEU of generated responses against the gold ones.
MetricReport evaluate(const CedualModel& model, const std::vector<Batch>& batches,
                      const Vocabulary& vocab, const GenerationOptions& opts);

// Fits a multinomial logistic probe on half of the (feature, label) pairs
// and reports held-out accuracy on the other half — the information an
// affine readout can recover from the features. Deterministic in the seed.
double linear_probe_accuracy(const std::vector<std::vector<double>>& features,
                             const std::vector<std::int64_t>& labels, std::int64_t num_classes,
                             std::uint64_t seed);

}  // namespace cedual
