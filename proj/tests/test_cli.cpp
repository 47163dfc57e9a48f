#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qrnn/checkpoint.hpp"
#include "qrnn/packed.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = QRNN_CLI_PATH;
const std::string kDataDir = QRNN_TEST_DATA_DIR;

struct RunResult {
    int exit_code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

RunResult run(const std::string& args) {
    const fs::path dir = fs::temp_directory_path();
    const fs::path out = dir / "qrnn_cli_stdout.txt";
    const fs::path err = dir / "qrnn_cli_stderr.txt";
    const std::string cmd =
        kCli + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

std::string tiny_lm_config(const std::string& out_dir, const std::string& quantizers) {
    return std::string("{\n") +
           "  \"task\": \"char_lm\",\n"
           "  \"seed\": 5,\n"
           "  \"precision\": \"f32\",\n"
           "  \"out_dir\": \"" + out_dir + "\",\n"
           "  \"cell\": {\"kind\": \"vanilla\", \"hidden_size\": 8, \"activation\": \"relu\"},\n"
           "  \"quantizers\": " + quantizers + ",\n"
           "  \"train\": {\"learning_rate\": 0.003, \"batch_size\": 64, \"max_epochs\": 2,\n"
           "             \"patience\": 2, \"wallclock\": false},\n"
           "  \"data\": {\"path\": \"" + kDataDir + "/corpus.txt\", \"train_fraction\": 0.9,\n"
           "            \"seq_len\": 50}\n"
           "}\n";
}

} // namespace

TEST_CASE("train smoke run produces metrics, config copy and checkpoints") {
    const auto dir = fresh_dir("qrnn_cli_train");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path, tiny_lm_config((dir / "run").string(), "{\"input\": null}"));

    const auto r = run("train --config " + cfg_path.string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("best_bpc="));

    const auto metrics = slurp(dir / "run" / "metrics.csv");
    CHECK_THAT(metrics, Catch::Matchers::StartsWith("epoch,split,metric,value,wallclock_s\n"));
    CHECK(metrics.find(",valid,bpc,") != std::string::npos);
    CHECK(fs::exists(dir / "run" / "config.json"));
    CHECK(fs::exists(dir / "run" / "best.qrnn"));
    CHECK(fs::exists(dir / "run" / "last.qrnn"));
}

TEST_CASE("identical config and seed give byte-identical metrics") {
    const auto dir = fresh_dir("qrnn_cli_repro");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path, tiny_lm_config((dir / "a").string(), "null"));

    REQUIRE(run("train --config " + cfg_path.string()).exit_code == 0);
    REQUIRE(run("train --config " + cfg_path.string() + " --out " + (dir / "b").string())
                .exit_code == 0);
    CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
}

TEST_CASE("flag overrides beat the config file") {
    const auto dir = fresh_dir("qrnn_cli_override");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path, tiny_lm_config((dir / "ignored").string(), "null"));
    const auto r =
        run("train --config " + cfg_path.string() + " --out " + (dir / "chosen").string() +
            " --seed 9");
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir / "chosen" / "metrics.csv"));
    CHECK_FALSE(fs::exists(dir / "ignored"));
    const auto resolved = slurp(dir / "chosen" / "config.json");
    CHECK_THAT(resolved, Catch::Matchers::ContainsSubstring("\"seed\": 9"));
}

TEST_CASE("unknown config keys are rejected by name") {
    const auto dir = fresh_dir("qrnn_cli_badkey");
    const auto cfg_path = dir / "config_in.json";
    std::string cfg = tiny_lm_config((dir / "run").string(), "null");
    cfg.insert(cfg.find("\"task\""), "\"learning_rate_typo\": 1,\n  ");
    write_file(cfg_path, cfg);
    const auto r = run("train --config " + cfg_path.string());
    CHECK(r.exit_code != 0);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("learning_rate_typo"));
}

TEST_CASE("stochastic pow2ternary configs are rejected") {
    const auto dir = fresh_dir("qrnn_cli_pow2");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path,
               tiny_lm_config((dir / "run").string(),
                              "{\"input\": {\"method\": \"pow2ternary\", "
                              "\"variant\": \"stochastic\"}}"));
    const auto r = run("train --config " + cfg_path.string());
    CHECK(r.exit_code != 0);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("deterministic only"));
}

TEST_CASE("eval prints machine-readable metrics in both modes") {
    const auto dir = fresh_dir("qrnn_cli_eval");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path,
               tiny_lm_config((dir / "run").string(),
                              "{\"input\": {\"method\": \"ternary\", "
                              "\"variant\": \"stochastic\"}}"));
    REQUIRE(run("train --config " + cfg_path.string()).exit_code == 0);

    const auto best = (dir / "run" / "best.qrnn").string();
    auto r = run("eval --checkpoint " + best + " --mode both");
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("bpc_full_precision="));
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("bpc_deterministic_quantized="));

    // determinism: the same checkpoint evaluates to the same bytes
    const auto r2 = run("eval --checkpoint " + best + " --mode both");
    CHECK(r.out == r2.out);

    const auto rf = run("eval --checkpoint " + best + " --mode full");
    CHECK_THAT(rf.out, Catch::Matchers::ContainsSubstring("bpc_full_precision="));

    // corrupt checkpoint fails loudly
    write_file(dir / "broken.qrnn", "QRNNgarbage");
    CHECK(run("eval --checkpoint " + (dir / "broken.qrnn").string()).exit_code != 0);
}

TEST_CASE("diagnose writes the stability trace") {
    const auto dir = fresh_dir("qrnn_cli_diag");
    const auto cfg_path = dir / "diag.json";
    write_file(cfg_path, "{\n"
                         "  \"hidden_size\": 16, \"steps\": 5, \"seed\": 3,\n"
                         "  \"quantizers\": [\"none\", \"binary_stoch\"],\n"
                         "  \"out_dir\": \"" + (dir / "run").string() + "\"\n"
                         "}\n");
    const auto r = run("diagnose --config " + cfg_path.string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const auto csv = slurp(dir / "run" / "stability.csv");
    CHECK_THAT(csv, Catch::Matchers::StartsWith("step,quantizer,spectral_radius,hidden_norm\n"));
    CHECK(csv.find(",binary_stoch,") != std::string::npos);
}

TEST_CASE("pack emits one container per quantized group and reports ratios") {
    const auto dir = fresh_dir("qrnn_cli_pack");
    const auto cfg_path = dir / "config_in.json";
    write_file(cfg_path,
               tiny_lm_config((dir / "run").string(),
                              "{\"recurrent\": {\"method\": \"binary\", "
                              "\"variant\": \"stochastic\"}}"));
    REQUIRE(run("train --config " + cfg_path.string()).exit_code == 0);

    const auto best = (dir / "run" / "best.qrnn").string();
    const auto r = run("pack --checkpoint " + best + " --out " + (dir / "packed").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("group=W_hh"));
    CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("ratio="));
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("skipped"));
    REQUIRE(fs::exists(dir / "packed" / "W_hh.qpkt"));

    // the emitted container decodes to the checkpoint's quantized image
    const auto ck = qrnn::load_checkpoint<float>(best);
    const auto packed = qrnn::load_packed((dir / "packed" / "W_hh.qpkt").string());
    CHECK(qrnn::unpack<float>(packed) == ck.model.group("W_hh").quantized);
}

TEST_CASE("bad command line arguments fail") {
    CHECK(run("train").exit_code != 0);
    CHECK(run("nonsense").exit_code != 0);
    CHECK(run("train --config /nonexistent/config.json").exit_code != 0);
}
