// Command-line front end for the motionflow experiment pipeline.
//
//   motionflow train-vq     --config cfg.json [--seed N] [--out DIR]
//   motionflow train-drift  --config cfg.json [--mode derode|vpsde|vesde] ...
//   motionflow sample       --config cfg.json --mode MODE [--steps N] [--eta X]
//                           [--count N] [--label K]
//   motionflow verify       [--mode SUITE|all] --seed N [--out DIR]
//   motionflow eval         REAL.dsdf GEN.dsdf --seed N [--config cfg.json]
//   motionflow sweep        --config cfg.json [--count N]
//
// Exit codes: 0 success, 1 usage/configuration error, 2 verification failure,
// 3 numerical failure.

#include "mf/commands.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <string>
#include <vector>

int main(int argc, char** argv) {
    CLI::App app{"motionflow: two-stage latent generative pipeline "
                 "(vector-quantized reconstruction + flow-matched drift with a "
                 "diversity sampler)"};
    app.require_subcommand(1);

    mf::commands::CliOptions opt;
    uint64_t seed_val = 0;
    int64_t steps_val = 0, count_val = 0;
    int32_t label_val = 0;
    double eta_val = 0.0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "experiment config (JSON)");
        sub->add_option("--seed", seed_val, "root RNG seed (overrides the config)")
            ->check(CLI::NonNegativeNumber);
        sub->add_option("--out", opt.out_dir, "output directory (overrides the config)");
    };

    CLI::App* train_vq = app.add_subcommand("train-vq", "train the vector-quantized "
                                                        "reconstruction stage");
    add_common(train_vq);

    CLI::App* train_drift =
        app.add_subcommand("train-drift", "train a latent drift model over the vq latents "
                                          "(or a toy point set)");
    add_common(train_drift);
    train_drift->add_option("--mode", opt.mode, "derode (default), vpsde, or vesde");

    CLI::App* sample = app.add_subcommand("sample", "draw samples from a trained model");
    add_common(sample);
    sample->add_option("--mode", opt.mode,
                       "derode-1, derode-N, divsde, vpsde, or vesde")->required();
    CLI::Option* o_steps = sample->add_option("--steps", steps_val, "integration steps");
    CLI::Option* o_eta = sample->add_option("--eta", eta_val, "diversity noise scale");
    CLI::Option* o_count = sample->add_option("--count", count_val, "number of samples");
    CLI::Option* o_label = sample->add_option("--label", label_val, "fix all samples to one class");

    CLI::App* verify = app.add_subcommand("verify", "run the numerical verification suites");
    add_common(verify);
    verify->add_option("--mode", opt.mode, "ot, gradients, prop2, prop3, eta-sweep, or all");

    CLI::App* eval = app.add_subcommand("eval", "compare two feature files");
    add_common(eval);
    eval->add_option("files", opt.positional, "REAL.dsdf GEN.dsdf")->expected(2);

    CLI::App* sweep = app.add_subcommand("sweep", "time/quality table over sampler modes "
                                                  "and step counts");
    add_common(sweep);
    CLI::Option* o_sweep_count = sweep->add_option("--count", count_val, "samples per cell");
    CLI::Option* o_sweep_eta = sweep->add_option("--eta", eta_val, "diversity noise scale");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? mf::commands::kExitOk : mf::commands::kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    opt.command = sub->get_name();
    if (sub->count("--seed")) opt.seed = seed_val;
    if (o_steps->count()) opt.steps = steps_val;
    if (o_eta->count() || o_sweep_eta->count()) opt.eta = eta_val;
    if (o_count->count() || o_sweep_count->count()) opt.count = count_val;
    if (o_label->count()) opt.label = label_val;

    return mf::commands::dispatch(opt);
}
