#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "qrnn/cells.hpp"
#include "qrnn/data.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/rng.hpp"

namespace qrnn {

enum class EvalMode : std::uint8_t { full_precision = 0, deterministic_quantized = 1 };

inline const char* to_string(EvalMode m) {
    return m == EvalMode::full_precision ? "full_precision" : "deterministic_quantized";
}

inline EvalMode parse_eval_mode(const std::string& s) {
    if (s == "full_precision" || s == "full") return EvalMode::full_precision;
    if (s == "deterministic_quantized" || s == "quantized")
        return EvalMode::deterministic_quantized;
    throw std::invalid_argument("unknown eval mode '" + s + "'");
}

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t patience = 100; // also the no-stopping warmup length
    // Masters of binary/ternary groups are clipped to [-master_clip,
    // master_clip] after every update, keeping the sampling probabilities in
    // their saturating range. Other methods are left unclipped.
    double master_clip = 1.0;
    // Global-norm gradient clip. Off by default; the stability experiments
    // must run without it.
    bool grad_clip_enabled = false;
    double grad_clip_norm = 5.0;
    bool shuffle = true;
    std::uint64_t seed = 1;
    EvalMode eval_mode = EvalMode::full_precision;
    // When off, the wallclock_s column of the metrics stream is written as 0
    // so two identical runs produce byte-identical files.
    bool record_wallclock = true;
};

struct Metric {
    std::size_t epoch = 0;
    std::string split;
    std::string kind; // bpc | accuracy | cross_entropy
    double value = 0;
};

inline double nats_to_bpc(double nats) { return nats / std::numbers::ln2; }

// --- loss ---------------------------------------------------------------------

template <typename T>
struct LossResult {
    double nats = 0;       // mean negative log-likelihood per unmasked position
    std::size_t count = 0; // unmasked positions
    Matrix<T> d_logits;    // (p - onehot)/count at unmasked rows, zero elsewhere
};

// probs rows must be probability distributions (softmax output); mask, when
// non-empty, marks the rows that participate.
template <typename T>
LossResult<T> cross_entropy(const Matrix<T>& probs, const std::vector<std::size_t>& targets,
                            const std::vector<std::uint8_t>& mask = {}) {
    if (targets.size() != probs.rows())
        throw std::invalid_argument("cross_entropy: one target per row required");
    if (!mask.empty() && mask.size() != probs.rows())
        throw std::invalid_argument("cross_entropy: mask length must match rows");
    LossResult<T> res;
    res.d_logits = Matrix<T>(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        if (targets[i] >= probs.cols())
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                                    " out of vocabulary of " + std::to_string(probs.cols()));
        ++res.count;
    }
    if (res.count == 0) return res;
    double total = 0;
    const double floor = std::numeric_limits<double>::min(); // keeps log finite
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        total -= std::log(std::max(double(probs(i, targets[i])), floor));
        T* d = res.d_logits.row(i);
        const T* p = probs.row(i);
        const T inv = T(1) / T(res.count);
        for (std::size_t j = 0; j < probs.cols(); ++j) d[j] = p[j] * inv;
        d[targets[i]] -= inv;
    }
    res.nats = total / double(res.count);
    return res;
}

// --- optimizer ------------------------------------------------------------------

template <typename T>
struct AdamState {
    Matrix<T> m, v;
};

template <typename T>
std::vector<AdamState<T>> make_adam_state(const CellWeights<T>& w) {
    std::vector<AdamState<T>> st;
    st.reserve(w.groups.size());
    for (const auto& g : w.groups)
        st.push_back({Matrix<T>(g.master.rows(), g.master.cols()),
                      Matrix<T>(g.master.rows(), g.master.cols())});
    return st;
}

// Bias-corrected Adam update applied to the master copy; the quantized image
// is untouched until the next refresh. step is 1-based.
template <typename T>
void adam_step(AdamState<T>& mom, WeightGroup<T>& group, const Matrix<T>& grad,
               const TrainConfig& cfg, std::uint64_t step) {
    if (!grad.same_shape(group.master))
        throw std::invalid_argument("adam_step: gradient shape mismatch for group " +
                                    group.name);
    for (T g : grad)
        if (!std::isfinite(double(g)))
            throw std::runtime_error("adam_step: non-finite gradient for group " + group.name);
    const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
    const bool clip = group.quantizer && (group.quantizer->method == QuantMethod::binary ||
                                          group.quantizer->method == QuantMethod::ternary);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = double(grad[i]);
        const double m = cfg.beta1 * double(mom.m[i]) + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * double(mom.v[i]) + (1.0 - cfg.beta2) * g * g;
        mom.m[i] = T(m);
        mom.v[i] = T(v);
        double w = double(group.master[i]) -
                   cfg.learning_rate * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
        if (clip) w = std::clamp(w, -cfg.master_clip, cfg.master_clip);
        group.master[i] = T(w);
    }
}

// --- early stopping -------------------------------------------------------------

// Epochs 1..patience are a warmup: no stopping, and epochs without
// improvement are not counted. Afterwards training stops once more than
// `patience` consecutive counted epochs bring no strict improvement.
struct EarlyStopState {
    std::size_t epoch = 0;
    double best = 0;
    bool has_best = false;
    std::size_t best_epoch = 0;
    std::size_t stale = 0;
};

enum class StopDecision : std::uint8_t { continue_training = 0, stop = 1 };

inline StopDecision early_stop(EarlyStopState& st, double value, std::size_t patience,
                               bool higher_is_better) {
    ++st.epoch;
    const bool improved =
        !st.has_best || (higher_is_better ? value > st.best : value < st.best);
    if (improved) {
        st.best = value;
        st.has_best = true;
        st.best_epoch = st.epoch;
        st.stale = 0;
    } else if (st.epoch > patience) {
        ++st.stale;
    }
    return (st.epoch > patience && st.stale > patience) ? StopDecision::stop
                                                        : StopDecision::continue_training;
}

// --- initialization -------------------------------------------------------------

inline constexpr double kUniformInitWidth = 0.01;

// Vanilla: recurrent weights start as the identity, input/output matrices as
// small uniform noise. GRU/LSTM matrices use Glorot uniform. Biases are zero
// except the LSTM forget gate, which starts at 1.
template <typename T>
void init_weights(CellWeights<T>& w, Rng& rng) {
    for (auto& g : w.groups) {
        const bool is_matrix = g.master.cols() > 1;
        if (w.cfg.kind == CellKind::vanilla && g.name == "W_hh") {
            g.master = Matrix<T>::identity(w.cfg.hidden_size);
        } else if (is_matrix && w.cfg.kind == CellKind::vanilla) {
            for (auto& v : g.master) v = T(rng.uniform(-kUniformInitWidth, kUniformInitWidth));
        } else if (is_matrix) {
            const double limit =
                std::sqrt(6.0 / double(g.master.rows() + g.master.cols()));
            for (auto& v : g.master) v = T(rng.uniform(-limit, limit));
        } else if (w.cfg.kind == CellKind::lstm && g.name == "b_f") {
            for (auto& v : g.master) v = T(1);
        } else {
            for (auto& v : g.master) v = T(0);
        }
    }
    w.refresh_all_deterministic();
}

// --- data adapters ---------------------------------------------------------------

template <typename T>
struct LmData {
    const CharCorpus* corpus = nullptr;
    CharCorpus::Range range;

    std::size_t size() const { return corpus->seq_count(range); }
    Example<T> example(std::size_t i) const { return lm_example<T>(*corpus, range, i); }
    static constexpr bool is_lm = true;
    std::size_t input_size() const { return corpus->vocab(); }
    std::size_t output_size() const { return corpus->vocab(); }
};

template <typename T>
struct ClassifyData {
    const SeqDataset<T>* dataset = nullptr;
    std::size_t begin = 0, end = 0;
    bool masking = true;

    std::size_t size() const { return end - begin; }
    Example<T> example(std::size_t i) const {
        return classify_example(*dataset, begin + i, masking);
    }
    static constexpr bool is_lm = false;
    std::size_t input_size() const { return dataset->feature_dim; }
    std::size_t output_size() const { return dataset->label_count; }
};

// --- training loop ----------------------------------------------------------------

template <typename T>
struct TrainState {
    std::vector<AdamState<T>> moments;
    std::uint64_t step = 0;
    EarlyStopState stopper;
};

template <typename T>
TrainState<T> make_train_state(const CellWeights<T>& w) {
    return TrainState<T>{make_adam_state(w), 0, {}};
}

namespace detail {

template <typename T>
struct BatchStats {
    double nats = 0;
    std::size_t examples = 0;
    std::size_t correct = 0;
};

// Forward/backward for one example; gradients accumulate into grads.
template <typename T, typename Data>
BatchStats<T> example_pass(CellWeights<T>& model, const Data& data, std::size_t idx,
                           Gradients<T>& grads) {
    BatchStats<T> st;
    const Example<T> ex = data.example(idx);
    if constexpr (Data::is_lm) {
        const Matrix<T> h0(model.cfg.hidden_size, 1);
        LmForward<T> fwd = lm_forward(model, ex.x, h0);
        LossResult<T> loss = cross_entropy(fwd.probs, ex.targets, ex.step_mask);
        lm_backward(model, fwd.trace, loss.d_logits, grads);
        st.nats = loss.nats;
    } else {
        ClassifyForward<T> fwd = classify_forward(
            model, ex.x, ex.step_mask.empty() ? nullptr : &ex.step_mask);
        LossResult<T> loss = cross_entropy(fwd.probs, ex.targets);
        classify_backward(model, fwd, loss.d_logits, grads);
        st.nats = loss.nats;
        std::size_t argmax = 0;
        for (std::size_t j = 1; j < fwd.probs.cols(); ++j)
            if (fwd.probs(0, j) > fwd.probs(0, argmax)) argmax = j;
        st.correct = argmax == ex.targets[0] ? 1 : 0;
    }
    st.examples = 1;
    return st;
}

} // namespace detail

// One full pass over the training data. Quantized images are refreshed once
// per minibatch and reused by the paired backward pass; gradients are taken
// with respect to the images and applied to the masters (straight-through).
// The shuffle stream for epoch e is shuffle_base.stream(e).
template <typename T, typename Data>
std::vector<Metric> train_epoch(CellWeights<T>& model, const Data& data,
                                const TrainConfig& cfg, TrainState<T>& state, Rng& quant_rng,
                                const Rng& shuffle_base, std::size_t epoch) {
    Rng shuffle_rng = shuffle_base.stream(epoch);
    const auto plan = batches(data.size(), cfg.batch_size, cfg.shuffle ? &shuffle_rng : nullptr);

    double nats_sum = 0;
    std::size_t example_count = 0, correct = 0;
    Gradients<T> grads(model);
    for (const auto& batch : plan) {
        model.refresh_all(quant_rng);
        for (auto& g : grads.by_group) std::fill(g.begin(), g.end(), T(0));
        for (std::size_t idx : batch) {
            const auto st = detail::example_pass(model, data, idx, grads);
            nats_sum += st.nats;
            example_count += st.examples;
            correct += st.correct;
        }
        grads.scale(T(1) / T(batch.size()));
        if (cfg.grad_clip_enabled) {
            const double norm = grads.global_norm();
            if (norm > cfg.grad_clip_norm) grads.scale(T(cfg.grad_clip_norm / norm));
        }
        ++state.step;
        for (std::size_t i = 0; i < model.groups.size(); ++i)
            adam_step(state.moments[i], model.groups[i], grads.by_group[i], cfg, state.step);
    }

    const double mean_nats = example_count ? nats_sum / double(example_count) : 0.0;
    std::vector<Metric> out;
    out.push_back({epoch, "train", "cross_entropy", mean_nats});
    if constexpr (Data::is_lm) {
        out.push_back({epoch, "train", "bpc", nats_to_bpc(mean_nats)});
    } else {
        out.push_back(
            {epoch, "train", "accuracy",
             example_count ? double(correct) / double(example_count) : 0.0});
    }
    return out;
}

// Deterministic evaluation: either the full-precision masters or each group's
// deterministic quantized image; never a stochastic sample.
template <typename T, typename Data>
std::vector<Metric> evaluate(const CellWeights<T>& model, const Data& data, EvalMode mode,
                             const std::string& split, std::size_t epoch) {
    CellWeights<T> eval_model = model;
    if (mode == EvalMode::full_precision) {
        for (auto& g : eval_model.groups) g.quantizer.reset();
    } else {
        eval_model.refresh_all_deterministic();
    }

    double nats_sum = 0;
    std::size_t n = data.size(), correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Example<T> ex = data.example(i);
        if constexpr (Data::is_lm) {
            const Matrix<T> h0(eval_model.cfg.hidden_size, 1);
            const LmForward<T> fwd = lm_forward(eval_model, ex.x, h0);
            nats_sum += cross_entropy(fwd.probs, ex.targets, ex.step_mask).nats;
        } else {
            const ClassifyForward<T> fwd = classify_forward(
                eval_model, ex.x, ex.step_mask.empty() ? nullptr : &ex.step_mask);
            nats_sum += cross_entropy(fwd.probs, ex.targets).nats;
            std::size_t argmax = 0;
            for (std::size_t j = 1; j < fwd.probs.cols(); ++j)
                if (fwd.probs(0, j) > fwd.probs(0, argmax)) argmax = j;
            if (argmax == ex.targets[0]) ++correct;
        }
    }
    const double mean_nats = n ? nats_sum / double(n) : 0.0;
    std::vector<Metric> out;
    out.push_back({epoch, split, "cross_entropy", mean_nats});
    if constexpr (Data::is_lm)
        out.push_back({epoch, split, "bpc", nats_to_bpc(mean_nats)});
    else
        out.push_back({epoch, split, "accuracy", n ? double(correct) / double(n) : 0.0});
    return out;
}

// --- metrics stream ----------------------------------------------------------------

// CSV stream: epoch,split,metric,value,wallclock_s
class MetricsWriter {
public:
    explicit MetricsWriter(std::ostream& os, bool record_wallclock = true)
        : os_(os), record_wallclock_(record_wallclock),
          start_(std::chrono::steady_clock::now()) {
        os_ << "epoch,split,metric,value,wallclock_s\n";
    }

    void write(const Metric& m) {
        double wall = 0.0;
        if (record_wallclock_)
            wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
                       .count();
        char line[160];
        std::snprintf(line, sizeof line, "%zu,%s,%s,%.12g,%.3f\n", m.epoch, m.split.c_str(),
                      m.kind.c_str(), m.value, wall);
        os_ << line;
    }

    void write(const std::vector<Metric>& ms) {
        for (const auto& m : ms) write(m);
    }

private:
    std::ostream& os_;
    bool record_wallclock_;
    std::chrono::steady_clock::time_point start_;
};

// --- fit ----------------------------------------------------------------------------

template <typename T>
struct FitResult {
    CellWeights<T> best;       // snapshot at the best validation metric
    std::size_t best_epoch = 0;
    double best_value = 0;
    std::size_t epochs_run = 0;
    std::vector<Metric> final_metrics;
};

// Straight-through training with per-epoch validation, early stopping and
// best-model retention. The monitored metric is validation BPC for language
// modelling (lower is better) and validation accuracy otherwise.
template <typename T, typename TrainData, typename EvalData>
FitResult<T> fit(CellWeights<T>& model, const TrainData& train_data,
                 const EvalData& val_data, const TrainConfig& cfg,
                 MetricsWriter* metrics = nullptr) {
    Rng master(cfg.seed);
    Rng init_rng = master.stream(Rng::kInit);
    Rng quant_rng = master.stream(Rng::kQuantize);
    const Rng shuffle_base = master.stream(Rng::kShuffle);

    init_weights(model, init_rng);
    TrainState<T> state = make_train_state(model);
    const bool higher_better = !TrainData::is_lm;
    const char* monitored = TrainData::is_lm ? "bpc" : "accuracy";

    FitResult<T> res;
    res.best = model;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto train_metrics =
            train_epoch(model, train_data, cfg, state, quant_rng, shuffle_base, epoch);
        auto val_metrics = evaluate(model, val_data, cfg.eval_mode, "valid", epoch);
        if (metrics) {
            metrics->write(train_metrics);
            metrics->write(val_metrics);
        }
        double monitored_value = 0;
        for (const auto& m : val_metrics)
            if (m.kind == monitored) monitored_value = m.value;

        const bool was_best = !state.stopper.has_best ||
                              (higher_better ? monitored_value > state.stopper.best
                                             : monitored_value < state.stopper.best);
        const auto decision = early_stop(state.stopper, monitored_value, cfg.patience,
                                         higher_better);
        if (was_best) {
            res.best = model;
            res.best_epoch = epoch;
            res.best_value = monitored_value;
        }
        res.epochs_run = epoch;
        res.final_metrics = val_metrics;
        if (decision == StopDecision::stop) break;
    }
    return res;
}

} // namespace qrnn
