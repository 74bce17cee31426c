#include "cedual/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace cedual {

AdamOptimizer::AdamOptimizer(ParamStore& store, AdamConfig cfg)
    : store_(store), cfg_(cfg) {}

double AdamOptimizer::current_lr() const {
    const std::int64_t next = step_ + 1;
    if (cfg_.warmup_steps > 0 && next <= cfg_.warmup_steps)
        return cfg_.lr * static_cast<double>(next) / static_cast<double>(cfg_.warmup_steps);
    return cfg_.lr;
}

void AdamOptimizer::step() {
    const auto names = store_.names();
    // reject the whole update before touching any parameter
    for (const auto& name : names)
        for (double g : store_.get(name).grad())
            if (!std::isfinite(g))
                throw DivergenceError("adam: non-finite gradient in parameter '" + name + "'");

    const double lr = current_lr();
    ++step_;
    const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& name : names) {
        Tensor param = store_.get(name);
        const auto count = static_cast<std::size_t>(param.numel());
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(count, 0.0);
            v.assign(count, 0.0);
        }
        const auto grads = param.grad();
        auto data = param.mutable_data();
        for (std::size_t i = 0; i < count; ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grads[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
            data[i] -= lr * (m[i] / bias1) / (std::sqrt(v[i] / bias2) + cfg_.eps);
        }
    }
}

TrainResult train_model(CedualModel& model, const std::vector<DialogueExample>& train_examples,
                        const std::vector<DialogueExample>& valid_examples,
                        const Vocabulary& vocab, const LabelSet& labels, const RunConfig& config,
                        const TrainHooks& hooks) {
    if (train_examples.empty()) throw ContractError("train_model: empty training corpus");
    if (valid_examples.empty()) throw ContractError("train_model: empty validation corpus");
    config.validate();

    AdamOptimizer adam(model.params(),
                       AdamConfig{config.lr, config.beta1, config.beta2, config.adam_eps,
                                  config.warmup_steps});
    const auto valid_batches =
        batchify(valid_examples, vocab, labels, config.batch_size, config.max_len);

    // one stream drives epoch shuffles, a second drives dropout; both are
    // functions of the run seed only, so runs are bit-reproducible
    Rng shuffle_rng(static_cast<std::uint64_t>(config.seed) * 2 + 1);
    Rng dropout_rng(static_cast<std::uint64_t>(config.seed) * 2 + 2);

    TrainResult result;
    double best = std::numeric_limits<double>::infinity();
    std::int64_t evals_without_improvement = 0;
    const std::int64_t k = labels.size();

    std::vector<std::size_t> order(train_examples.size());
    std::iota(order.begin(), order.end(), 0);

    bool done = false;
    while (!done) {
        shuffle_rng.shuffle(order);
        std::vector<DialogueExample> epoch;
        epoch.reserve(order.size());
        for (std::size_t i : order) epoch.push_back(train_examples[i]);
        const auto batches = batchify(epoch, vocab, labels, config.batch_size, config.max_len);

        for (const auto& batch : batches) {
            if (result.steps >= config.max_steps) {
                done = true;
                break;
            }
            model.params().zero_grads();

            Tensor total_sum, fit_sum;
            double gen = 0.0, dis_c = 0.0, dis_e = 0.0, total = 0.0;
            for (std::int64_t b = 0; b < batch.size(); ++b) {
                const auto idx = static_cast<std::size_t>(b);
                RunContext rc;
                rc.training = true;
                rc.rng = &dropout_rng;
                const auto losses = model.example_losses(
                    batch.context_ids[idx], batch.context_keep[idx], batch.response_in[idx],
                    batch.response_gold[idx], batch.response_keep[idx],
                    EmotionLabel{batch.emotions[idx], k}, rc);
                total_sum = total_sum.defined()
                                ? add(total_sum, losses.breakdown.l_total)
                                : losses.breakdown.l_total;
                if (losses.content_classifier_fit.defined())
                    fit_sum = fit_sum.defined()
                                  ? add(fit_sum, losses.content_classifier_fit)
                                  : losses.content_classifier_fit;
                gen += losses.breakdown.l_gen.value();
                dis_c += losses.breakdown.l_dis_c.value();
                dis_e += losses.breakdown.l_dis_e.value();
                total += losses.breakdown.l_total.value();
            }
            const double inv = 1.0 / static_cast<double>(batch.size());
            Tensor objective = scale(total_sum, inv);
            if (fit_sum.defined()) objective = add(objective, scale(fit_sum, inv));
            if (!std::isfinite(objective.value()))
                throw DivergenceError("train_model: loss is not finite at step " +
                                      std::to_string(result.steps + 1));
            objective.backward();
            adam.step();

            ++result.steps;
            TrainStepStats stats{result.steps, gen * inv, dis_c * inv, dis_e * inv,
                                 total * inv};
            result.step_log.push_back(stats);
            if (hooks.on_step) hooks.on_step(stats);

            if (result.steps % config.eval_every == 0) {
                EvalStats eval{result.steps, perplexity(model, valid_batches),
                               emotion_accuracy(model, valid_batches)};
                const bool improved = eval.perplexity < best - 1e-9;
                if (improved) {
                    best = eval.perplexity;
                    evals_without_improvement = 0;
                } else {
                    ++evals_without_improvement;
                }
                result.eval_log.push_back(eval);
                if (hooks.on_eval) hooks.on_eval(eval, improved);
                if (evals_without_improvement >= config.patience) {
                    result.stopped_early = true;
                    done = true;
                    break;
                }
            }
        }
    }

    result.best_val_perplexity = best;
    return result;
}

}  // namespace cedual
