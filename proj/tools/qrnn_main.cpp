// Command-line front end: train, eval, diagnose, pack.
//
// Machine-readable results go to stdout as key=value lines; progress and
// warnings go to stderr. Flags override config-file fields, which override
// built-in defaults.

#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "qrnn/config.hpp"
#include "qrnn/runner.hpp"

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open config file " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized-weight RNN training and diagnostics"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint_path, data_path;
    std::optional<std::uint64_t> seed;
    std::string mode = "full";

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "run config (JSON)")->required();
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--out", out_dir, "override the output directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", data_path, "override the data path stored in the checkpoint");
    eval->add_option("--mode", mode, "full | quantized | both")
        ->check(CLI::IsMember({"full", "quantized", "both"}));

    auto* diagnose = app.add_subcommand("diagnose", "hidden-state stability sweep");
    diagnose->add_option("--config", config_path, "diagnose config (JSON)")->required();
    diagnose->add_option("--seed", seed, "override the config seed");
    diagnose->add_option("--out", out_dir, "override the output directory");

    auto* pack = app.add_subcommand("pack", "emit packed tensors from a checkpoint");
    pack->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    pack->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            qrnn::RunConfig rc = qrnn::parse_run_config_text(slurp(config_path));
            if (seed) {
                rc.seed = *seed;
                rc.train.seed = *seed;
            }
            if (!out_dir.empty()) rc.out_dir = out_dir;
            return qrnn::run_train(rc);
        }
        if (eval->parsed()) {
            return qrnn::run_eval(checkpoint_path, data_path, mode);
        }
        if (diagnose->parsed()) {
            qrnn::json j;
            try {
                j = qrnn::json::parse(slurp(config_path));
            } catch (const qrnn::json::exception& e) {
                throw qrnn::ConfigError(std::string("config: not valid JSON: ") + e.what());
            }
            qrnn::DiagnoseConfig dc = qrnn::parse_diagnose_config(j);
            if (seed) dc.seed = *seed;
            if (!out_dir.empty()) dc.out_dir = out_dir;
            return qrnn::run_diagnose(dc);
        }
        if (pack->parsed()) {
            return qrnn::run_pack(checkpoint_path, out_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
