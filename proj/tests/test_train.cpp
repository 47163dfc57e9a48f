#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "qrnn/checkpoint.hpp"
#include "qrnn/train.hpp"

using qrnn::Activation;
using qrnn::CellConfig;
using qrnn::CellKind;
using qrnn::CellWeights;
using qrnn::EarlyStopState;
using qrnn::EvalMode;
using qrnn::Matrix;
using qrnn::Metric;
using qrnn::QuantizerSpec;
using qrnn::QuantMethod;
using qrnn::QuantVariant;
using qrnn::Rng;
using qrnn::Role;
using qrnn::StopDecision;
using qrnn::TrainConfig;

namespace {

CellConfig tiny_cfg(CellKind kind, std::size_t I, std::size_t H, std::size_t O) {
    CellConfig cfg;
    cfg.kind = kind;
    cfg.input_size = I;
    cfg.hidden_size = H;
    cfg.output_size = O;
    return cfg;
}

qrnn::CharCorpus repeated_corpus(const std::string& unit, std::size_t repeats,
                                 std::size_t seq_len) {
    std::string text;
    for (std::size_t i = 0; i < repeats; ++i) text += unit;
    return qrnn::corpus_from_text(text, 0.9, seq_len);
}

} // namespace

TEST_CASE("cross entropy basics") {
    // perfect prediction
    Matrix<double> perfect(1, 3);
    perfect(0, 1) = 1.0;
    const auto r0 = qrnn::cross_entropy(perfect, {1});
    CHECK(r0.nats == 0.0);

    // uniform over 27 symbols: ln 27 nats, log2 27 bpc
    Matrix<double> uniform(4, 27, 1.0 / 27.0);
    const auto r1 = qrnn::cross_entropy(uniform, {0, 5, 13, 26});
    CHECK_THAT(r1.nats, Catch::Matchers::WithinAbs(std::log(27.0), 1e-12));
    CHECK_THAT(qrnn::nats_to_bpc(r1.nats),
               Catch::Matchers::WithinAbs(std::log2(27.0), 1e-9));

    // out-of-vocabulary target
    CHECK_THROWS_AS(qrnn::cross_entropy(uniform, {0, 5, 13, 27}), std::out_of_range);
}

TEST_CASE("cross entropy gradient matches finite differences of the scalar loss") {
    Rng rng(5);
    Matrix<double> logits(4, 6);
    for (auto& v : logits) v = rng.uniform(-2, 2);
    const std::vector<std::size_t> targets = {2, 0, 5, 3};
    std::vector<std::uint8_t> mask = {1, 1, 0, 1};

    auto loss_of = [&](const Matrix<double>& z) {
        return qrnn::cross_entropy(qrnn::softmax_rows(z), targets, mask).nats;
    };
    const auto res = qrnn::cross_entropy(qrnn::softmax_rows(logits), targets, mask);
    const double step = 1e-5;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        auto z = logits;
        z[i] += step;
        const double up = loss_of(z);
        z[i] -= 2 * step;
        const double dn = loss_of(z);
        const double fd = (up - dn) / (2 * step);
        CHECK_THAT(res.d_logits[i], Catch::Matchers::WithinAbs(fd, 1e-6));
    }
}

TEST_CASE("masked rows contribute nothing") {
    Matrix<double> probs(2, 3, 1.0 / 3.0);
    const auto full = qrnn::cross_entropy(probs, {0, 1});
    std::vector<std::uint8_t> mask = {1, 0};
    const auto masked = qrnn::cross_entropy(probs, {0, 1}, mask);
    CHECK(masked.count == 1);
    CHECK_THAT(masked.nats, Catch::Matchers::WithinAbs(full.nats, 1e-12));
    for (std::size_t j = 0; j < 3; ++j) CHECK(masked.d_logits(1, j) == 0.0);
}

TEST_CASE("adam first step moves by about the learning rate") {
    auto w = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, 1, 1, 1));
    auto& g = w.group("W_hh");
    g.master(0, 0) = 0.5;
    auto moments = qrnn::make_adam_state(w);
    TrainConfig cfg;
    cfg.learning_rate = 1e-4;

    Matrix<double> grad(1, 1, 1.0);
    qrnn::adam_step(moments[w.group_index("W_hh")], g, grad, cfg, 1);
    CHECK_THAT(g.master(0, 0), Catch::Matchers::WithinAbs(0.5 - 1e-4, 1e-10));

    // zero gradient leaves the weight alone
    auto w2 = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, 1, 1, 1));
    w2.group("W_hh").master(0, 0) = 0.25;
    auto moments2 = qrnn::make_adam_state(w2);
    qrnn::adam_step(moments2[w2.group_index("W_hh")], w2.group("W_hh"),
                    Matrix<double>(1, 1, 0.0), cfg, 1);
    CHECK(w2.group("W_hh").master(0, 0) == 0.25);
}

TEST_CASE("adam rejects non-finite gradients by group name") {
    auto w = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, 1, 1, 1));
    auto moments = qrnn::make_adam_state(w);
    TrainConfig cfg;
    Matrix<double> bad(1, 1, std::numeric_limits<double>::infinity());
    CHECK_THROWS_WITH(qrnn::adam_step(moments[1], w.group("W_hh"), bad, cfg, 1),
                      Catch::Matchers::ContainsSubstring("W_hh"));
}

TEST_CASE("masters of binary and ternary groups stay clipped") {
    auto cfg_cell = tiny_cfg(CellKind::vanilla, 2, 3, 2);
    QuantizerSpec bin;
    bin.method = QuantMethod::binary;
    bin.variant = QuantVariant::stochastic;
    cfg_cell.scope[Role::recurrent] = bin;
    auto w = qrnn::make_cell<double>(cfg_cell);
    auto& g = w.group("W_hh");
    for (auto& v : g.master) v = 0.99;
    auto moments = qrnn::make_adam_state(w);
    TrainConfig cfg;
    cfg.learning_rate = 0.5; // large steps to push past the boundary

    Matrix<double> grad(3, 3, -1.0);
    const auto gi = w.group_index("W_hh");
    for (std::uint64_t step = 1; step <= 10; ++step)
        qrnn::adam_step(moments[gi], g, grad, cfg, step);
    for (double v : g.master) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
}

TEST_CASE("expquant masters are not clipped") {
    auto cfg_cell = tiny_cfg(CellKind::vanilla, 2, 3, 2);
    QuantizerSpec eq;
    eq.method = QuantMethod::exp_quant;
    eq.variant = QuantVariant::stochastic;
    cfg_cell.scope[Role::recurrent] = eq;
    auto w = qrnn::make_cell<double>(cfg_cell);
    auto& g = w.group("W_hh");
    auto moments = qrnn::make_adam_state(w);
    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    Matrix<double> grad(3, 3, -1.0);
    const auto gi = w.group_index("W_hh");
    for (std::uint64_t step = 1; step <= 10; ++step)
        qrnn::adam_step(moments[gi], g, grad, cfg, step);
    CHECK(g.master(0, 0) > 1.0);
}

TEST_CASE("early stopping") {
    SECTION("strictly improving metric never stops") {
        EarlyStopState st;
        for (std::size_t e = 1; e <= 200; ++e)
            CHECK(qrnn::early_stop(st, 10.0 - double(e) * 0.01, 5, false) ==
                  StopDecision::continue_training);
    }
    SECTION("flat metric with patience 5 stops at epoch 11") {
        EarlyStopState st;
        std::size_t stop_epoch = 0;
        for (std::size_t e = 1; e <= 30 && stop_epoch == 0; ++e)
            if (qrnn::early_stop(st, 1.0, 5, false) == StopDecision::stop) stop_epoch = e;
        CHECK(stop_epoch == 11);
    }
    SECTION("no stopping during the patience window") {
        EarlyStopState st;
        for (std::size_t e = 1; e <= 5; ++e)
            CHECK(qrnn::early_stop(st, 1.0, 5, false) == StopDecision::continue_training);
    }
    SECTION("late improvement resets the stale count") {
        EarlyStopState st;
        for (std::size_t e = 1; e <= 9; ++e)
            CHECK(qrnn::early_stop(st, 1.0, 5, false) == StopDecision::continue_training);
        CHECK(qrnn::early_stop(st, 0.5, 5, false) == StopDecision::continue_training);
        for (std::size_t e = 11; e <= 15; ++e)
            CHECK(qrnn::early_stop(st, 1.0, 5, false) == StopDecision::continue_training);
        CHECK(qrnn::early_stop(st, 1.0, 5, false) == StopDecision::stop); // epoch 16
    }
}

TEST_CASE("initialization follows the per-kind rules") {
    Rng rng(3);
    auto van = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, 5, 7, 4));
    qrnn::init_weights(van, rng);
    CHECK(van.group("W_hh").master == Matrix<double>::identity(7));
    for (double v : van.group("W_xh").master) CHECK(std::abs(v) <= 0.01);
    for (double v : van.group("b_h").master) CHECK(v == 0.0);

    auto lstm = qrnn::make_cell<double>(tiny_cfg(CellKind::lstm, 5, 7, 4));
    qrnn::init_weights(lstm, rng);
    const double limit = std::sqrt(6.0 / (7 + 5));
    for (double v : lstm.group("W_xi").master) CHECK(std::abs(v) <= limit);
    for (double v : lstm.group("b_f").master) CHECK(v == 1.0);
    for (double v : lstm.group("b_i").master) CHECK(v == 0.0);
}

TEST_CASE("training overfits a tiny repeated sequence") {
    const auto corpus = repeated_corpus("ababababab", 30, 10);
    qrnn::LmData<double> train_data{&corpus, corpus.train};
    qrnn::LmData<double> val_data{&corpus, corpus.valid};

    auto model = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, corpus.vocab(), 2,
                                                  corpus.vocab()));
    TrainConfig cfg;
    cfg.learning_rate = 0.03;
    cfg.batch_size = 32;
    cfg.max_epochs = 500;
    cfg.patience = 500;
    cfg.seed = 11;

    Rng master(cfg.seed);
    Rng init_rng = master.stream(Rng::kInit);
    Rng quant_rng = master.stream(Rng::kQuantize);
    const Rng shuffle_base = master.stream(Rng::kShuffle);
    qrnn::init_weights(model, init_rng);
    auto state = qrnn::make_train_state(model);

    double best_bpc = 1e9;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs && best_bpc >= 0.1; ++epoch) {
        const auto ms =
            qrnn::train_epoch(model, train_data, cfg, state, quant_rng, shuffle_base, epoch);
        for (const auto& m : ms)
            if (m.kind == "bpc") best_bpc = std::min(best_bpc, m.value);
    }
    CHECK(best_bpc < 0.1);
}

TEST_CASE("straight-through contract: zero learning rate leaves masters untouched") {
    const auto corpus = repeated_corpus("abcabcabca", 30, 10);
    qrnn::LmData<double> train_data{&corpus, corpus.train};

    auto cfg_cell = tiny_cfg(CellKind::vanilla, corpus.vocab(), 3, corpus.vocab());
    QuantizerSpec bin;
    bin.method = QuantMethod::binary;
    bin.variant = QuantVariant::stochastic;
    cfg_cell.scope[Role::recurrent] = bin;
    auto model = qrnn::make_cell<double>(cfg_cell);

    TrainConfig cfg;
    cfg.learning_rate = 0.0; // the config file layer forbids 0; the library allows it here
    cfg.batch_size = 8;
    cfg.seed = 21;

    Rng master(cfg.seed);
    Rng init_rng = master.stream(Rng::kInit);
    Rng quant_rng = master.stream(Rng::kQuantize);
    const Rng shuffle_base = master.stream(Rng::kShuffle);
    qrnn::init_weights(model, init_rng);
    const auto snapshot = model;
    auto state = qrnn::make_train_state(model);
    for (std::size_t epoch = 1; epoch <= 3; ++epoch)
        qrnn::train_epoch(model, train_data, cfg, state, quant_rng, shuffle_base, epoch);
    for (std::size_t i = 0; i < model.groups.size(); ++i)
        CHECK(model.groups[i].master == snapshot.groups[i].master);
}

TEST_CASE("identical seeds give bit-identical weight trajectories") {
    const auto corpus = repeated_corpus("abcdeabcde", 40, 10);
    auto run_once = [&]() {
        qrnn::LmData<double> train_data{&corpus, corpus.train};
        auto cfg_cell = tiny_cfg(CellKind::vanilla, corpus.vocab(), 4, corpus.vocab());
        QuantizerSpec tern;
        tern.method = QuantMethod::ternary;
        tern.variant = QuantVariant::stochastic;
        cfg_cell.scope[Role::input] = tern;
        auto model = qrnn::make_cell<double>(cfg_cell);
        TrainConfig cfg;
        cfg.learning_rate = 0.01;
        cfg.seed = 777;
        Rng master(cfg.seed);
        Rng init_rng = master.stream(Rng::kInit);
        Rng quant_rng = master.stream(Rng::kQuantize);
        const Rng shuffle_base = master.stream(Rng::kShuffle);
        qrnn::init_weights(model, init_rng);
        auto state = qrnn::make_train_state(model);
        for (std::size_t epoch = 1; epoch <= 4; ++epoch)
            qrnn::train_epoch(model, train_data, cfg, state, quant_rng, shuffle_base, epoch);
        return model;
    };
    const auto a = run_once();
    const auto b = run_once();
    for (std::size_t i = 0; i < a.groups.size(); ++i)
        CHECK(a.groups[i].master == b.groups[i].master);
}

TEST_CASE("evaluation is deterministic and transparent without quantizers") {
    const auto corpus = repeated_corpus("aabbaabbaa", 40, 10);
    qrnn::LmData<double> val_data{&corpus, corpus.valid};
    auto model = qrnn::make_cell<double>(tiny_cfg(CellKind::gru, corpus.vocab(), 3,
                                                  corpus.vocab()));
    Rng rng(5);
    qrnn::init_weights(model, rng);

    const auto a = qrnn::evaluate(model, val_data, EvalMode::full_precision, "valid", 1);
    const auto b = qrnn::evaluate(model, val_data, EvalMode::full_precision, "valid", 1);
    CHECK(a[0].value == b[0].value);

    // identity scope: the deterministic-quantized mode equals full precision
    const auto c = qrnn::evaluate(model, val_data, EvalMode::deterministic_quantized, "valid", 1);
    CHECK(a[0].value == c[0].value);

    // bpc row equals nats / ln 2
    double nats = 0, bpc = 0;
    for (const auto& m : a) {
        if (m.kind == "cross_entropy") nats = m.value;
        if (m.kind == "bpc") bpc = m.value;
    }
    CHECK_THAT(bpc, Catch::Matchers::WithinAbs(nats / std::numbers::ln2, 1e-9));
}

TEST_CASE("fit writes a deterministic metrics stream when wallclock is off") {
    const auto corpus = repeated_corpus("abccbaabcc", 40, 10);
    auto run_once = [&]() {
        qrnn::LmData<double> train_data{&corpus, corpus.train};
        qrnn::LmData<double> val_data{&corpus, corpus.valid};
        auto model = qrnn::make_cell<double>(tiny_cfg(CellKind::vanilla, corpus.vocab(), 3,
                                                      corpus.vocab()));
        TrainConfig cfg;
        cfg.learning_rate = 0.01;
        cfg.max_epochs = 3;
        cfg.patience = 3;
        cfg.seed = 99;
        cfg.record_wallclock = false;
        std::ostringstream os;
        qrnn::MetricsWriter mw(os, cfg.record_wallclock);
        qrnn::fit(model, train_data, val_data, cfg, &mw);
        return os.str();
    };
    const auto a = run_once();
    const auto b = run_once();
    CHECK(a == b);
    CHECK_THAT(a, Catch::Matchers::StartsWith("epoch,split,metric,value,wallclock_s\n"));
    CHECK_THAT(a, Catch::Matchers::ContainsSubstring(",train,bpc,"));
    CHECK_THAT(a, Catch::Matchers::ContainsSubstring(",valid,bpc,"));
}

TEST_CASE("checkpoints round trip") {
    namespace fs = std::filesystem;
    auto cfg_cell = tiny_cfg(CellKind::gru, 3, 4, 5);
    QuantizerSpec tern;
    tern.method = QuantMethod::ternary;
    tern.variant = QuantVariant::stochastic;
    cfg_cell.scope[Role::input] = tern;
    auto model = qrnn::make_cell<double>(cfg_cell);
    Rng rng(17);
    qrnn::init_weights(model, rng);
    auto state = qrnn::make_train_state(model);
    state.step = 42;
    for (auto& m : state.moments)
        for (auto& v : m.m) v = rng.uniform(-1, 1);

    const auto path = (fs::temp_directory_path() / "qrnn_ckpt_test.qrnn").string();
    qrnn::save_checkpoint(path, model, "{\"test\":1}", &state);
    CHECK(qrnn::checkpoint_scalar_size(path) == 8);

    const auto ck = qrnn::load_checkpoint<double>(path);
    CHECK(ck.config_blob == "{\"test\":1}");
    CHECK(ck.model.cfg.kind == CellKind::gru);
    CHECK(ck.model.groups.size() == model.groups.size());
    for (std::size_t i = 0; i < model.groups.size(); ++i) {
        CHECK(ck.model.groups[i].name == model.groups[i].name);
        CHECK(ck.model.groups[i].master == model.groups[i].master);
        CHECK(ck.model.groups[i].quantizer.has_value() ==
              model.groups[i].quantizer.has_value());
    }
    // the packed image stored for quantized groups decodes to the
    // deterministic image of the master
    for (const auto& g : ck.model.groups)
        if (g.quantizer)
            CHECK(g.quantized == qrnn::apply_deterministic(*g.quantizer, g.master));
    REQUIRE(ck.state.has_value());
    CHECK(ck.state->step == 42);
    for (std::size_t i = 0; i < state.moments.size(); ++i)
        CHECK(ck.state->moments[i].m == state.moments[i].m);

    // wrong scalar width is refused
    CHECK_THROWS_WITH(qrnn::load_checkpoint<float>(path),
                      Catch::Matchers::ContainsSubstring("scalar width"));
    fs::remove(path);
}
