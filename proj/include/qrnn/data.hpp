#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrnn/matrix.hpp"
#include "qrnn/packed.hpp" // little-endian io helpers
#include "qrnn/rng.hpp"

namespace qrnn {

// One training example in dense form.
template <typename T>
struct Example {
    Matrix<T> x;                          // [steps x input]
    std::vector<std::size_t> targets;     // per step (LM) or a single label
    std::vector<std::uint8_t> step_mask;  // empty = all steps valid
};

// --- character corpora ------------------------------------------------------

struct CharCorpus {
    std::string alphabet;             // sorted unique symbols
    std::array<int, 256> index{};     // symbol -> alphabet position, -1 if absent
    std::vector<std::int32_t> stream; // encoded text
    std::size_t seq_len = 50;

    struct Range {
        std::size_t begin = 0, end = 0; // character positions
        std::size_t chars() const { return end - begin; }
    };
    Range train, valid, test;

    std::size_t vocab() const { return alphabet.size(); }

    std::size_t seq_count(const Range& r) const { return r.chars() / seq_len; }

    // i-th non-overlapping length-L chunk of a split; the trailing remainder
    // is dropped.
    const std::int32_t* sequence(const Range& r, std::size_t i) const {
        return stream.data() + r.begin + i * seq_len;
    }

    int encode(char c) const { return index[static_cast<unsigned char>(c)]; }
    char decode(std::size_t i) const { return alphabet[i]; }
};

// Positional split: the first train_fraction of the characters becomes the
// training split and the remainder is halved into validation and test, so no
// sequence ever crosses a split boundary.
inline CharCorpus corpus_from_text(const std::string& text, double train_fraction,
                                   std::size_t seq_len) {
    if (text.empty()) throw std::runtime_error("char corpus: empty text");
    if (seq_len == 0) throw std::invalid_argument("char corpus: sequence length must be > 0");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw std::invalid_argument("char corpus: train fraction must be in (0, 1)");

    CharCorpus c;
    c.seq_len = seq_len;
    c.index.fill(-1);
    std::array<bool, 256> seen{};
    for (char ch : text) seen[static_cast<unsigned char>(ch)] = true;
    for (int b = 0; b < 256; ++b)
        if (seen[b]) {
            c.index[b] = int(c.alphabet.size());
            c.alphabet.push_back(char(b));
        }
    c.stream.reserve(text.size());
    for (char ch : text) c.stream.push_back(c.index[static_cast<unsigned char>(ch)]);

    const std::size_t n = text.size();
    const std::size_t n_train = std::size_t(double(n) * train_fraction);
    const std::size_t n_valid = (n - n_train) / 2;
    c.train = {0, n_train};
    c.valid = {n_train, n_train + n_valid};
    c.test = {n_train + n_valid, n};
    for (const auto* r : {&c.train, &c.valid, &c.test})
        if (r->chars() < seq_len)
            throw std::runtime_error("char corpus: split of " + std::to_string(r->chars()) +
                                     " characters is shorter than one sequence of " +
                                     std::to_string(seq_len));
    return c;
}

inline CharCorpus load_char_corpus(const std::string& path, double train_fraction,
                                   std::size_t seq_len) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_char_corpus: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return corpus_from_text(buf.str(), train_fraction, seq_len);
}

// Next-symbol prediction example: inputs are the one-hot first L-1 symbols,
// targets the same symbols shifted by one.
template <typename T>
Example<T> lm_example(const CharCorpus& c, const CharCorpus::Range& r, std::size_t i) {
    const std::int32_t* seq = c.sequence(r, i);
    const std::size_t steps = c.seq_len - 1;
    Example<T> ex;
    ex.x = Matrix<T>(steps, c.vocab());
    ex.targets.resize(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        ex.x(t, std::size_t(seq[t])) = T(1);
        ex.targets[t] = std::size_t(seq[t + 1]);
    }
    return ex;
}

// --- labelled feature sequences ---------------------------------------------

template <typename T>
struct SeqSample {
    Matrix<T> features;         // [frames x dim], leading rows may be padding
    std::size_t label = 0;
    std::size_t valid_from = 0; // first non-padding frame
};

template <typename T>
struct SeqDataset {
    std::vector<SeqSample<T>> samples;
    std::size_t feature_dim = 0;
    std::size_t label_count = 0;
    std::size_t frames = 0; // padded length

    std::size_t size() const { return samples.size(); }
};

inline constexpr double kSynthNoiseDefault = 0.35;

// Synthetic classification corpus: class k is a bank of sinusoids with
// class-specific frequency and phases across the channels, plus Gaussian
// noise, left-padded with zeros to a common length. Samples are emitted
// round-robin over classes so positional splits stay stratified.
template <typename T>
SeqDataset<T> synth_classification(std::size_t classes, std::size_t per_class,
                                   std::size_t frames, std::size_t dim, std::uint64_t seed,
                                   double noise_sigma = kSynthNoiseDefault,
                                   bool length_jitter = true) {
    if (classes < 2) throw std::invalid_argument("synth_classification: need >= 2 classes");
    if (frames < 2 || dim == 0)
        throw std::invalid_argument("synth_classification: degenerate shape");

    SeqDataset<T> ds;
    ds.feature_dim = dim;
    ds.label_count = classes;
    ds.frames = frames;
    ds.samples.reserve(classes * per_class);

    Rng rng = Rng(seed).stream(Rng::kData);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t n = 0; n < per_class; ++n) {
        for (std::size_t k = 0; k < classes; ++k) {
            SeqSample<T> s;
            s.label = k;
            s.features = Matrix<T>(frames, dim);
            std::size_t valid = frames;
            if (length_jitter) valid = frames / 2 + rng.index(frames - frames / 2) + 1;
            if (valid > frames) valid = frames;
            s.valid_from = frames - valid;
            const double freq = 1.0 + double(k);
            for (std::size_t t = s.valid_from; t < frames; ++t) {
                const double tau = double(t - s.valid_from) / double(valid);
                for (std::size_t d = 0; d < dim; ++d) {
                    const double phase = two_pi * double(k * dim + d) / double(classes * dim);
                    const double v =
                        std::sin(two_pi * freq * tau + phase) + noise_sigma * rng.normal();
                    s.features(t, d) = T(v);
                }
            }
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// Per-dimension standardization: mean zero / unit variance computed over the
// valid frames of [train_begin, train_end), applied to the valid frames of
// every sample.
template <typename T>
void standardize_features(SeqDataset<T>& ds, std::size_t train_begin, std::size_t train_end) {
    const std::size_t dim = ds.feature_dim;
    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    std::size_t count = 0;
    for (std::size_t s = train_begin; s < train_end; ++s) {
        const auto& sample = ds.samples[s];
        for (std::size_t t = sample.valid_from; t < ds.frames; ++t) {
            for (std::size_t d = 0; d < dim; ++d) mean[d] += double(sample.features(t, d));
            ++count;
        }
    }
    if (count == 0) throw std::runtime_error("standardize_features: no valid frames");
    for (auto& m : mean) m /= double(count);
    for (std::size_t s = train_begin; s < train_end; ++s) {
        const auto& sample = ds.samples[s];
        for (std::size_t t = sample.valid_from; t < ds.frames; ++t)
            for (std::size_t d = 0; d < dim; ++d) {
                const double c = double(sample.features(t, d)) - mean[d];
                var[d] += c * c;
            }
    }
    for (auto& v : var) v = std::sqrt(v / double(count));
    for (auto& sample : ds.samples)
        for (std::size_t t = sample.valid_from; t < ds.frames; ++t)
            for (std::size_t d = 0; d < dim; ++d) {
                const double sd = var[d] > 0 ? var[d] : 1.0;
                sample.features(t, d) = T((double(sample.features(t, d)) - mean[d]) / sd);
            }
}

template <typename T>
Example<T> classify_example(const SeqDataset<T>& ds, std::size_t i, bool masking = true) {
    const auto& s = ds.samples[i];
    Example<T> ex;
    ex.x = s.features;
    ex.targets = {s.label};
    if (masking && s.valid_from > 0) {
        ex.step_mask.assign(ds.frames, 1);
        for (std::size_t t = 0; t < s.valid_from; ++t) ex.step_mask[t] = 0;
    }
    return ex;
}

// QSEQ container, little-endian:
//   "QSEQ" u32 sample_count u32 dim
//   per sample: u32 frames u32 label f32 features (row-major, valid frames only)
template <typename T>
void save_seq_dataset(const std::string& path, const SeqDataset<T>& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_seq_dataset: cannot open " + path);
    os.write("QSEQ", 4);
    detail::write_u32(os, std::uint32_t(ds.samples.size()));
    detail::write_u32(os, std::uint32_t(ds.feature_dim));
    for (const auto& s : ds.samples) {
        const std::uint32_t valid = std::uint32_t(ds.frames - s.valid_from);
        detail::write_u32(os, valid);
        detail::write_u32(os, std::uint32_t(s.label));
        for (std::size_t t = s.valid_from; t < ds.frames; ++t)
            for (std::size_t d = 0; d < ds.feature_dim; ++d)
                detail::write_f32(os, float(s.features(t, d)));
    }
}

// Loads variable-length samples and left-pads them to the longest one.
template <typename T>
SeqDataset<T> load_seq_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_seq_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QSEQ", 4) != 0)
        throw std::runtime_error("load_seq_dataset: bad magic");
    const std::uint32_t count = detail::read_u32(is);
    const std::uint32_t dim = detail::read_u32(is);

    struct Raw {
        std::uint32_t frames, label;
        std::vector<float> values;
    };
    std::vector<Raw> raw(count);
    std::size_t max_frames = 0;
    for (auto& r : raw) {
        r.frames = detail::read_u32(is);
        r.label = detail::read_u32(is);
        r.values.resize(std::size_t(r.frames) * dim);
        for (auto& v : r.values) v = detail::read_f32(is);
        if (!is) throw std::runtime_error("load_seq_dataset: truncated file");
        max_frames = std::max<std::size_t>(max_frames, r.frames);
    }

    SeqDataset<T> ds;
    ds.feature_dim = dim;
    ds.frames = max_frames;
    ds.samples.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto& s = ds.samples[i];
        s.label = raw[i].label;
        ds.label_count = std::max(ds.label_count, s.label + 1);
        s.valid_from = max_frames - raw[i].frames;
        s.features = Matrix<T>(max_frames, dim);
        for (std::size_t t = 0; t < raw[i].frames; ++t)
            for (std::size_t d = 0; d < dim; ++d)
                s.features(s.valid_from + t, d) = T(raw[i].values[t * dim + d]);
    }
    return ds;
}

// --- batching ----------------------------------------------------------------

// Index batches over n examples: an optional deterministic shuffle, then
// consecutive chunks; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     Rng* shuffle_rng) {
    if (batch_size == 0) throw std::invalid_argument("batches: batch size must be >= 1");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle_rng) shuffle_rng->shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        out.emplace_back(order.begin() + b, order.begin() + e);
    }
    return out;
}

// Positional split of a sample list: first fraction -> train, remainder
// halved into validation and test.
struct SplitRanges {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t valid_begin = 0, valid_end = 0;
    std::size_t test_begin = 0, test_end = 0;
};

inline SplitRanges split_by_position(std::size_t n, double train_fraction) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw std::invalid_argument("split_by_position: train fraction must be in (0, 1)");
    SplitRanges s;
    s.train_end = std::size_t(double(n) * train_fraction);
    s.valid_begin = s.train_end;
    s.valid_end = s.train_end + (n - s.train_end) / 2;
    s.test_begin = s.valid_end;
    s.test_end = n;
    return s;
}

} // namespace qrnn
