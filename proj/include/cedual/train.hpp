#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cedual/config.hpp"
#include "cedual/data.hpp"
#include "cedual/metrics.hpp"
#include "cedual/model.hpp"

namespace cedual {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::int64_t warmup_steps = 100;  // linear ramp of the learning rate
};

// Adam with bias correction over a ParamStore, visiting parameters in
// lexicographic name order. Moment buffers are created lazily per parameter.
class AdamOptimizer {
  public:
    AdamOptimizer(ParamStore& store, AdamConfig cfg);

    // Applies one update from the accumulated gradients (which the caller
    // then clears). DivergenceError names the first parameter with a
    // non-finite gradient; no parameter is touched in that case.
    void step();

    std::int64_t step_count() const { return step_; }
    double current_lr() const;  // warmup-scaled rate of the *next* step

  private:
    ParamStore& store_;
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

struct TrainStepStats {
    std::int64_t step = 0;
    double l_gen = 0.0;
    double l_dis_c = 0.0;
    double l_dis_e = 0.0;
    double l_total = 0.0;
};

struct EvalStats {
    std::int64_t step = 0;
    double perplexity = 0.0;
    double emotion_accuracy = 0.0;
};

struct TrainResult {
    std::int64_t steps = 0;
    double best_val_perplexity = 0.0;
    bool stopped_early = false;
    std::vector<TrainStepStats> step_log;
    std::vector<EvalStats> eval_log;
};

// Minimizes mean l_total (plus the auxiliary classifier fit in adversarial
// routing) with Adam over shuffled batches. Evaluates validation perplexity
// every eval_every steps, early-stops after `patience` evaluations without
// improvement, and invokes the callbacks (when set) after each step/eval —
// the CLI hooks file logging and checkpointing in through these.
// DivergenceError on a non-finite loss or gradient.
struct TrainHooks {
    std::function<void(const TrainStepStats&)> on_step;
    std::function<void(const EvalStats&, bool improved)> on_eval;
};

TrainResult train_model(CedualModel& model, const std::vector<DialogueExample>& train_examples,
                        const std::vector<DialogueExample>& valid_examples,
                        const Vocabulary& vocab, const LabelSet& labels, const RunConfig& config,
                        const TrainHooks& hooks = {});

}  // namespace cedual
