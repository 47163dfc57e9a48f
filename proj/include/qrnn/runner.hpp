#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qrnn/checkpoint.hpp"
#include "qrnn/config.hpp"
#include "qrnn/diagnostics.hpp"
#include "qrnn/train.hpp"

namespace qrnn {

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
}

template <typename T>
struct LoadedTask {
    CellConfig cell;
    // char_lm
    std::optional<CharCorpus> corpus;
    // seq_classify
    std::optional<SeqDataset<T>> dataset;
    SplitRanges ranges;
};

template <typename T>
LoadedTask<T> load_task(const RunConfig& rc) {
    LoadedTask<T> task;
    task.cell.kind = rc.cell_kind;
    task.cell.hidden_size = rc.hidden_size;
    task.cell.activation = rc.activation;
    task.cell.scope = rc.scope;
    if (rc.task == "char_lm") {
        task.corpus = load_char_corpus(rc.data_path, rc.train_fraction, rc.seq_len);
        task.cell.input_size = task.corpus->vocab();
        task.cell.output_size = task.corpus->vocab();
    } else {
        if (rc.synth) {
            const auto& s = *rc.synth;
            task.dataset = synth_classification<T>(s.classes, s.per_class, s.frames, s.dim,
                                                   s.seed, s.noise, s.length_jitter);
        } else {
            task.dataset = load_seq_dataset<T>(rc.data_path);
        }
        task.ranges = split_by_position(task.dataset->size(), rc.train_fraction);
        if (rc.standardize)
            standardize_features(*task.dataset, task.ranges.train_begin, task.ranges.train_end);
        task.cell.input_size = task.dataset->feature_dim;
        task.cell.output_size = task.dataset->label_count;
    }
    return task;
}

// Final side-by-side evaluation in both modes, reported as extra splits.
template <typename T, typename Data>
void final_mode_report(const CellWeights<T>& model, const Data& data, const std::string& split,
                       std::size_t epoch, bool quantized, MetricsWriter& mw) {
    mw.write(evaluate(model, data, EvalMode::full_precision, split + "_fp", epoch));
    if (quantized)
        mw.write(evaluate(model, data, EvalMode::deterministic_quantized, split + "_dq", epoch));
}

} // namespace detail

template <typename T>
int run_train_typed(const RunConfig& rc, const std::string& resolved, bool quiet = false) {
    namespace fs = std::filesystem;
    fs::create_directories(rc.out_dir);
    detail::write_text_file(fs::path(rc.out_dir) / "config.json", resolved);

    auto task = detail::load_task<T>(rc);
    CellWeights<T> model = make_cell<T>(task.cell);

    std::ofstream metrics_os(fs::path(rc.out_dir) / "metrics.csv", std::ios::binary);
    if (!metrics_os) throw std::runtime_error("cannot open metrics.csv for writing");
    MetricsWriter mw(metrics_os, rc.train.record_wallclock);

    FitResult<T> res;
    const bool quantized = model.any_quantized();
    if (rc.task == "char_lm") {
        LmData<T> train_data{&*task.corpus, task.corpus->train};
        LmData<T> val_data{&*task.corpus, task.corpus->valid};
        LmData<T> test_data{&*task.corpus, task.corpus->test};
        res = fit(model, train_data, val_data, rc.train, &mw);
        detail::final_mode_report(res.best, val_data, "valid", res.epochs_run, quantized, mw);
        detail::final_mode_report(res.best, test_data, "test", res.epochs_run, quantized, mw);
    } else {
        ClassifyData<T> train_data{&*task.dataset, task.ranges.train_begin,
                                   task.ranges.train_end, rc.masking};
        ClassifyData<T> val_data{&*task.dataset, task.ranges.valid_begin, task.ranges.valid_end,
                                 rc.masking};
        ClassifyData<T> test_data{&*task.dataset, task.ranges.test_begin, task.ranges.test_end,
                                  rc.masking};
        res = fit(model, train_data, val_data, rc.train, &mw);
        detail::final_mode_report(res.best, val_data, "valid", res.epochs_run, quantized, mw);
        detail::final_mode_report(res.best, test_data, "test", res.epochs_run, quantized, mw);
    }

    save_checkpoint(fs::path(rc.out_dir) / "best.qrnn", res.best, resolved);
    save_checkpoint(fs::path(rc.out_dir) / "last.qrnn", model, resolved);

    if (!quiet) {
        std::cout << "best_epoch=" << res.best_epoch << "\n";
        std::cout << "best_" << (rc.task == "char_lm" ? "bpc" : "accuracy") << "="
                  << res.best_value << "\n";
        std::cout << "epochs_run=" << res.epochs_run << "\n";
    }
    return 0;
}

inline int run_train(const RunConfig& rc, bool quiet = false) {
    const std::string resolved = run_config_to_json(rc).dump(2) + "\n";
    if (rc.precision == "f64") return run_train_typed<double>(rc, resolved, quiet);
    return run_train_typed<float>(rc, resolved, quiet);
}

template <typename T>
int run_eval_typed(const std::string& checkpoint_path, const std::string& data_override,
                   const std::string& mode) {
    Checkpoint<T> ck = load_checkpoint<T>(checkpoint_path);
    RunConfig rc = parse_run_config_text(ck.config_blob);
    if (!data_override.empty()) {
        rc.data_path = data_override;
        rc.synth.reset();
    }
    auto task = detail::load_task<T>(rc);

    std::vector<EvalMode> modes;
    if (mode == "both") {
        modes = {EvalMode::full_precision, EvalMode::deterministic_quantized};
    } else {
        modes = {parse_eval_mode(mode)};
    }

    const char* kind = rc.task == "char_lm" ? "bpc" : "accuracy";
    for (EvalMode m : modes) {
        std::vector<Metric> ms;
        if (rc.task == "char_lm") {
            LmData<T> test_data{&*task.corpus, task.corpus->test};
            ms = evaluate(ck.model, test_data, m, "test", 0);
        } else {
            ClassifyData<T> test_data{&*task.dataset, task.ranges.test_begin,
                                      task.ranges.test_end, rc.masking};
            ms = evaluate(ck.model, test_data, m, "test", 0);
        }
        for (const auto& metric : ms)
            if (metric.kind == kind) {
                char line[96];
                std::snprintf(line, sizeof line, "%s_%s=%.12g\n", kind, to_string(m),
                              metric.value);
                std::cout << line;
            }
    }
    return 0;
}

inline int run_eval(const std::string& checkpoint_path, const std::string& data_override,
                    const std::string& mode) {
    if (checkpoint_scalar_size(checkpoint_path) == 8)
        return run_eval_typed<double>(checkpoint_path, data_override, mode);
    return run_eval_typed<float>(checkpoint_path, data_override, mode);
}

// Always runs in 64-bit: exploding traces overflow a 32-bit float's range
// well within 50 steps.
inline int run_diagnose(const DiagnoseConfig& dc) {
    namespace fs = std::filesystem;
    fs::create_directories(dc.out_dir);

    SweepConfig sc = default_sweep_config(dc.seed);
    sc.cell.kind = dc.cell_kind;
    sc.cell.activation = dc.activation;
    sc.cell.input_size = dc.hidden_size;
    sc.cell.hidden_size = dc.hidden_size;
    sc.steps = dc.steps;
    sc.resample_per_step = dc.resample_per_step;

    std::vector<std::pair<std::string, std::optional<QuantizerSpec>>> specs;
    for (const auto& label : dc.quantizers) specs.emplace_back(label, quantizer_from_label(label));

    const auto traces = stability_sweep<double>(sc, specs);
    std::ofstream os(fs::path(dc.out_dir) / "stability.csv", std::ios::binary);
    if (!os) throw std::runtime_error("cannot open stability.csv for writing");
    write_stability_csv(os, traces);
    std::cout << "trace=" << (fs::path(dc.out_dir) / "stability.csv").string() << "\n";
    return 0;
}

template <typename T>
int run_pack_typed(const std::string& checkpoint_path, const std::string& out_dir) {
    namespace fs = std::filesystem;
    Checkpoint<T> ck = load_checkpoint<T>(checkpoint_path);
    fs::create_directories(out_dir);
    bool any = false;
    for (const auto& g : ck.model.groups) {
        if (!g.quantizer) {
            std::cerr << "pack: group " << g.name << " has no quantizer, skipped\n";
            continue;
        }
        const Matrix<T> image = apply_deterministic(*g.quantizer, g.master);
        const PackedTensor pt = pack(image, *g.quantizer);
        const fs::path out = fs::path(out_dir) / (g.name + ".qpkt");
        save_packed(out.string(), pt);
        const double master_f32_bytes = 4.0 * double(g.master.size());
        const double packed_bytes = double(fs::file_size(out));
        char line[160];
        std::snprintf(line, sizeof line, "group=%s entries=%zu packed_bytes=%.0f ratio=%.2f\n",
                      g.name.c_str(), g.master.size(), packed_bytes,
                      master_f32_bytes / packed_bytes);
        std::cout << line;
        any = true;
    }
    if (!any) std::cerr << "pack: checkpoint has no quantized groups\n";
    return 0;
}

inline int run_pack(const std::string& checkpoint_path, const std::string& out_dir) {
    if (checkpoint_scalar_size(checkpoint_path) == 8)
        return run_pack_typed<double>(checkpoint_path, out_dir);
    return run_pack_typed<float>(checkpoint_path, out_dir);
}

} // namespace qrnn
