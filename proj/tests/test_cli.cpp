// End-to-end tests for the command layer: config round trips, artifact and
// manifest layout, rerun determinism, usage-error exit codes, and the sweep
// table.  Most cases drive mf::commands::dispatch in-process; one case shells
// out to the installed binary to cover argument parsing.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mf/checkpoint.hpp"
#include "mf/commands.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace mf;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mf_cli_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str(const std::string& rel = "") const {
        return rel.empty() ? path.string() : (path / rel).string();
    }
};

// Small toy-data experiment that trains in a couple of seconds.  The drift
// model is unconditional so generated sample files carry no labels.
commands::ExperimentConfig toy_config(const std::string& out_dir) {
    commands::ExperimentConfig cfg;
    cfg.dataset.kind = "toy";
    cfg.dataset.toy = "eight-gaussians";
    cfg.dataset.toy_count = 192;
    cfg.dataset.toy_train_fraction = 0.75;
    cfg.drift.epochs = 8;
    cfg.drift.batch = 48;
    cfg.drift.hidden = {16, 16};
    cfg.drift.time_embed_dim = 8;
    cfg.drift.label_embed_dim = 4;
    cfg.drift.lambda_cl = 0.3;
    cfg.drift.coupling = "ot";
    cfg.drift.conditional = false;
    cfg.baseline.epochs = 6;
    cfg.baseline.batch = 48;
    cfg.baseline.hidden = {16, 16};
    cfg.baseline.time_embed_dim = 8;
    cfg.sampler = divsde::SamplerConfig::with_steps(50, 0.2, /*snap=*/true);
    cfg.sample_count = 24;
    cfg.sweep_count = 6;
    cfg.metric_options.knn_k = 2;
    cfg.metric_options.S_d = 8;
    cfg.metric_options.S_l = 4;
    cfg.metric_options.kid_blocks = 3;
    cfg.classifier.epochs = 25;
    cfg.seed = 20260823;
    cfg.has_seed = true;
    cfg.out_dir = out_dir;
    cfg.dtype = "f64";
    return cfg;
}

std::string write_config(const TempDir& dir, const commands::ExperimentConfig& cfg,
                         const std::string& name = "cfg.json") {
    std::string path = dir.str(name);
    std::ofstream f(path);
    f << cfg.to_json().dump(2) << "\n";
    return path;
}

commands::CliOptions make_opt(const std::string& command, const std::string& config_path) {
    commands::CliOptions opt;
    opt.command = command;
    opt.config_path = config_path;
    return opt;
}

json read_json(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    json j;
    f >> j;
    return j;
}

int count_lines(const std::string& path) {
    std::ifstream f(path);
    int n = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("experiment config survives a json round trip") {
    commands::ExperimentConfig cfg = toy_config("some-out");
    json j = cfg.to_json();
    commands::ExperimentConfig back = commands::ExperimentConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.has_seed);
    CHECK(back.seed == cfg.seed);
    CHECK(back.dataset.toy_count == 192);
    CHECK(back.drift.epochs == 8);
    CHECK(back.metric_options.S_d == 8);
    CHECK(back.sampler.steps == 50);
    CHECK(back.sample_count == 24);

    TempDir dir;
    std::string path = write_config(dir, cfg);
    commands::ExperimentConfig loaded = commands::ExperimentConfig::load(path);
    CHECK(loaded.to_json() == j);
}

TEST_CASE("experiment config validation rejects bad fields") {
    commands::ExperimentConfig cfg = toy_config("o");
    cfg.dtype = "f16";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = toy_config("o");
    cfg.sample_count = -1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = toy_config("o");
    cfg.sweep_count = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = toy_config("o");
    cfg.dataset.kind = "video";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    // from_json validates too
    json j = toy_config("o").to_json();
    j["dtype"] = "f128";
    CHECK_THROWS_AS(commands::ExperimentConfig::from_json(j), std::invalid_argument);
}

TEST_CASE("dispatch maps usage errors to exit code 1") {
    TempDir dir;
    std::string cfg_path = write_config(dir, toy_config(dir.str("out")));

    commands::CliOptions opt = make_opt("frobnicate", cfg_path);
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    opt = make_opt("train-drift", dir.str("missing.json"));
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    opt = make_opt("train-drift", "");  // --config is mandatory
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    // config without a seed and no --seed on the command line
    json j = toy_config(dir.str("out")).to_json();
    j.erase("seed");
    std::string noseed = dir.str("noseed.json");
    {
        std::ofstream f(noseed);
        f << j.dump() << "\n";
    }
    opt = make_opt("train-drift", noseed);
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    // sample requires a mode
    opt = make_opt("sample", cfg_path);
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    // eval requires exactly two positional feature files
    opt = make_opt("eval", "");
    opt.seed = 1;
    opt.positional = {"only-one.dsdf"};
    CHECK(commands::dispatch(opt) == commands::kExitUsage);

    // verify requires a seed from somewhere
    opt = make_opt("verify", "");
    opt.mode = "ot";
    CHECK(commands::dispatch(opt) == commands::kExitUsage);
}

TEST_CASE("toy pipeline: train, sample, eval, with manifests and determinism") {
    TempDir dir;
    commands::ExperimentConfig cfg = toy_config(dir.str("out"));
    std::string cfg_path = write_config(dir, cfg);
    fs::path out = dir.path / "out";

    // ---- train the drift model
    REQUIRE(commands::dispatch(make_opt("train-drift", cfg_path)) == commands::kExitOk);
    for (const char* f : {"drift.dsdf", "drift_log.csv", "real_train_features.dsdf",
                          "real_test_features.dsdf", "manifest_train-drift.json"})
        CHECK_MESSAGE(fs::exists(out / f), f);

    json man = read_json((out / "manifest_train-drift.json").string());
    CHECK(man.at("status") == "complete");
    CHECK(man.at("command") == "train-drift");
    CHECK(man.at("seed").get<uint64_t>() == cfg.seed);
    CHECK(!man.at("config_hash").get<std::string>().empty());
    CHECK(man.at("artifacts").contains((out / "drift.dsdf").string()));
    CHECK(man.at("inputs").contains(cfg_path));
    CHECK(man.at("timings").contains("train_seconds"));
    CHECK(man.at("timings").contains("total_seconds"));

    // one csv row per epoch plus the header
    CHECK(count_lines((out / "drift_log.csv").string()) == cfg.drift.epochs + 1);
    {
        std::ifstream f((out / "drift_log.csv").string());
        std::string header;
        std::getline(f, header);
        CHECK(header == "epoch,j_drift,j_cl,total,coupling_cost,ot_fallbacks,lr,wall_seconds");
    }

    // the real feature files are labeled toy point sets
    {
        io::Archive ar = io::Archive::load((out / "real_train_features.dsdf").string());
        CHECK(ar.meta.at("kind") == "features");
        const io::ArchiveTensor* feats = ar.find("features");
        REQUIRE(feats != nullptr);
        CHECK(feats->shape == std::vector<int64_t>{144, 2});
        CHECK(ar.find("labels") != nullptr);
    }

    // ---- deterministic samplers
    commands::CliOptions sop = make_opt("sample", cfg_path);
    sop.mode = "derode-N";
    REQUIRE(commands::dispatch(sop) == commands::kExitOk);
    std::string multi_path = (out / "samples_derode-N.dsdf").string();
    {
        io::Archive ar = io::Archive::load(multi_path);
        CHECK(ar.meta.at("kind") == "samples");
        CHECK(ar.meta.at("count").get<int64_t>() == 24);
        CHECK(ar.meta.at("steps").get<int64_t>() == 50);
        CHECK(ar.meta.at("source") == "toy");
        CHECK(!ar.meta.contains("eta"));  // only the noisy sampler records eta
        const io::ArchiveTensor* lat = ar.find("latents");
        REQUIRE(lat != nullptr);
        CHECK(lat->shape == std::vector<int64_t>{24, 2});
        const io::ArchiveTensor* feats = ar.find("features");
        REQUIRE(feats != nullptr);
        CHECK(feats->shape == std::vector<int64_t>{24, 2});
        CHECK(ar.find("labels") == nullptr);  // unconditional model
    }
    CHECK(fs::exists(out / "manifest_sample_derode-N.json"));
    std::string multi_hash = io::sha256_file(multi_path);

    // rerunning the same command reproduces the file byte for byte
    REQUIRE(commands::dispatch(sop) == commands::kExitOk);
    CHECK(io::sha256_file(multi_path) == multi_hash);

    // derode-1 and derode-N with one step write byte-identical payloads
    commands::CliOptions one = make_opt("sample", cfg_path);
    one.mode = "derode-1";
    REQUIRE(commands::dispatch(one) == commands::kExitOk);
    commands::CliOptions n1 = make_opt("sample", cfg_path);
    n1.mode = "derode-N";
    n1.steps = 1;
    REQUIRE(commands::dispatch(n1) == commands::kExitOk);
    CHECK(io::sha256_file((out / "samples_derode-1.dsdf").string()) ==
          io::sha256_file((out / "samples_derode-N.dsdf").string()));

    // derode-1 refuses a multi-step request
    commands::CliOptions bad = make_opt("sample", cfg_path);
    bad.mode = "derode-1";
    bad.steps = 5;
    CHECK(commands::dispatch(bad) == commands::kExitUsage);

    // ---- the noisy sampler records eta and differs from the ODE output
    commands::CliOptions div = make_opt("sample", cfg_path);
    div.mode = "divsde";
    REQUIRE(commands::dispatch(div) == commands::kExitOk);
    std::string div_path = (out / "samples_divsde.dsdf").string();
    {
        io::Archive ar = io::Archive::load(div_path);
        CHECK(ar.meta.at("eta").get<double>() == doctest::Approx(0.2));
        CHECK(ar.find("latents")->shape == std::vector<int64_t>{24, 2});
    }
    CHECK(io::sha256_file(div_path) != multi_hash);

    // ---- a zero-count request still writes a valid (empty) archive
    commands::CliOptions zero = make_opt("sample", cfg_path);
    zero.mode = "derode-N";
    zero.count = 0;
    REQUIRE(commands::dispatch(zero) == commands::kExitOk);
    {
        io::Archive ar = io::Archive::load(multi_path);
        CHECK(ar.meta.at("count").get<int64_t>() == 0);
        CHECK(ar.find("latents")->shape == std::vector<int64_t>{0, 2});
    }
    REQUIRE(commands::dispatch(sop) == commands::kExitOk);  // restore the 24-row file

    // ---- eval generated vs real
    commands::CliOptions ev = make_opt("eval", cfg_path);
    ev.positional = {(out / "real_train_features.dsdf").string(), div_path};
    REQUIRE(commands::dispatch(ev) == commands::kExitOk);
    REQUIRE(fs::exists(out / "eval.json"));
    CHECK(fs::exists(out / "eval.csv"));
    CHECK(fs::exists(out / "manifest_eval.json"));
    json ej = read_json((out / "eval.json").string());
    for (const char* k : {"fid", "kid", "precision", "recall", "diversity_gen", "diversity_real"})
        CHECK_MESSAGE(ej.contains(k), k);
    CHECK(ej.at("n_real").get<int64_t>() == 144);
    CHECK(ej.at("n_gen").get<int64_t>() == 24);
    CHECK(!ej.contains("accuracy"));  // generated set is unlabeled
    json eman = read_json((out / "manifest_eval.json").string());
    CHECK(eman.at("status") == "complete");
    CHECK(eman.at("inputs").size() == 2);

    // ---- eval of a labeled set against itself is a perfect match
    commands::CliOptions self = make_opt("eval", cfg_path);
    self.positional = {(out / "real_train_features.dsdf").string(),
                       (out / "real_train_features.dsdf").string()};
    REQUIRE(commands::dispatch(self) == commands::kExitOk);
    json sj = read_json((out / "eval.json").string());
    CHECK(sj.at("fid").get<double>() <= 1e-6);
    CHECK(sj.at("precision").get<double>() == 1.0);
    CHECK(sj.at("recall").get<double>() == 1.0);
    REQUIRE(sj.contains("accuracy"));  // both sides labeled -> classifier runs
    CHECK(sj.at("accuracy").get<double>() >= 0.8);

    // ---- multimodality needs labels on the generated side
    commands::ExperimentConfig mcfg = cfg;
    mcfg.metric_options.with_multimodality = true;
    std::string mcfg_path = write_config(dir, mcfg, "cfg_mm.json");
    commands::CliOptions mev = make_opt("eval", mcfg_path);
    mev.positional = {(out / "real_train_features.dsdf").string(), div_path};
    CHECK(commands::dispatch(mev) == commands::kExitUsage);
    // ... and works when the generated side is a labeled feature file with at
    // least two points per class (the 48-point test split can miss that for
    // some seeds, so the bigger train split plays the generated role here)
    commands::CliOptions mok = make_opt("eval", mcfg_path);
    mok.positional = {(out / "real_test_features.dsdf").string(),
                      (out / "real_train_features.dsdf").string()};
    REQUIRE(commands::dispatch(mok) == commands::kExitOk);
    CHECK(read_json((out / "eval.json").string()).contains("multimodality"));
}

TEST_CASE("command line --out overrides the config out_dir") {
    TempDir dir;
    commands::ExperimentConfig cfg = toy_config(dir.str("cfg-dir"));
    std::string cfg_path = write_config(dir, cfg);
    commands::CliOptions opt = make_opt("train-drift", cfg_path);
    opt.out_dir = dir.str("cli-dir");
    REQUIRE(commands::dispatch(opt) == commands::kExitOk);
    CHECK(fs::exists(dir.path / "cli-dir" / "drift.dsdf"));
    CHECK(!fs::exists(dir.path / "cfg-dir" / "drift.dsdf"));
    json man = read_json(dir.str("cli-dir/manifest_train-drift.json"));
    CHECK(man.at("config").at("out_dir") == dir.str("cli-dir"));
}

TEST_CASE("command line --seed overrides the config seed") {
    TempDir dir;
    commands::ExperimentConfig cfg = toy_config(dir.str("a"));
    std::string cfg_path = write_config(dir, cfg);

    commands::CliOptions opt = make_opt("train-drift", cfg_path);
    REQUIRE(commands::dispatch(opt) == commands::kExitOk);
    std::string hash_a = io::sha256_file(dir.str("a/drift.dsdf"));

    // same seed into a second directory: identical checkpoint bytes
    commands::CliOptions same = make_opt("train-drift", cfg_path);
    same.out_dir = dir.str("b");
    same.seed = cfg.seed;
    REQUIRE(commands::dispatch(same) == commands::kExitOk);
    CHECK(io::sha256_file(dir.str("b/drift.dsdf")) == hash_a);
    CHECK(read_json(dir.str("b/manifest_train-drift.json")).at("seed").get<uint64_t>() ==
          cfg.seed);

    // a different seed produces a different model
    commands::CliOptions other = make_opt("train-drift", cfg_path);
    other.out_dir = dir.str("c");
    other.seed = cfg.seed + 1;
    REQUIRE(commands::dispatch(other) == commands::kExitOk);
    CHECK(io::sha256_file(dir.str("c/drift.dsdf")) != hash_a);
    CHECK(read_json(dir.str("c/manifest_train-drift.json")).at("seed").get<uint64_t>() ==
          cfg.seed + 1);
}

TEST_CASE("verify subcommand writes a per-suite report") {
    TempDir dir;
    commands::CliOptions opt = make_opt("verify", "");
    opt.mode = "ot";
    opt.seed = 7;
    opt.out_dir = dir.str();
    REQUIRE(commands::dispatch(opt) == commands::kExitOk);
    json rep = read_json(dir.str("verify_ot.json"));
    CHECK(rep.at("seed").get<uint64_t>() == 7);
    CHECK(rep.at("passed").get<bool>());
    REQUIRE(rep.at("suites").size() == 1);
    CHECK(rep.at("suites")[0].at("suite") == "ot");
    CHECK(rep.at("suites")[0].at("checks").size() >= 1);

    commands::CliOptions bad = make_opt("verify", "");
    bad.mode = "no-such-suite";
    bad.seed = 7;
    bad.out_dir = dir.str();
    CHECK(commands::dispatch(bad) == commands::kExitUsage);
}

TEST_CASE("sweep writes the full mode-by-steps table") {
    TempDir dir;
    commands::ExperimentConfig cfg = toy_config(dir.str("out"));
    std::string cfg_path = write_config(dir, cfg);

    REQUIRE(commands::dispatch(make_opt("train-drift", cfg_path)) == commands::kExitOk);
    for (const char* mode : {"vpsde", "vesde"}) {
        commands::CliOptions opt = make_opt("train-drift", cfg_path);
        opt.mode = mode;
        REQUIRE(commands::dispatch(opt) == commands::kExitOk);
        CHECK(fs::exists(dir.path / "out" / (std::string(mode) + ".dsdf")));
    }

    REQUIRE(commands::dispatch(make_opt("sweep", cfg_path)) == commands::kExitOk);
    std::string csv_path = dir.str("out/sweep.csv");
    REQUIRE(fs::exists(csv_path));

    std::ifstream f(csv_path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "mode,steps,count,total_seconds,per_sample_seconds,anchor_mse");

    struct Row {
        std::string mode;
        int64_t steps, count;
        double total, per_sample, mse;
    };
    std::vector<Row> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Row r;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream is(line);
        is >> r.mode >> r.steps >> r.count >> r.total >> r.per_sample >> r.mse;
        REQUIRE(!is.fail());
        rows.push_back(r);
    }
    // derode-1 plus {derode-N, divsde, vpsde, vesde} x {100, 500, 1000}
    REQUIRE(rows.size() == 13);
    std::map<std::string, int> per_mode;
    for (const auto& r : rows) {
        ++per_mode[r.mode];
        CHECK(r.count == cfg.sweep_count);
        CHECK(r.total >= 0.0);
        CHECK(r.mse >= 0.0);
    }
    CHECK(per_mode["derode-1"] == 1);
    CHECK(per_mode["derode-N"] == 3);
    CHECK(per_mode["divsde"] == 3);
    CHECK(per_mode["vpsde"] == 3);
    CHECK(per_mode["vesde"] == 3);

    // the one-step row is measured against its own output
    CHECK(rows[0].mode == "derode-1");
    CHECK(rows[0].steps == 1);
    CHECK(rows[0].mse == 0.0);

    // the noisy sampler's anchor deviation shrinks as steps grow
    std::vector<double> div_mse;
    for (const auto& r : rows)
        if (r.mode == "divsde") div_mse.push_back(r.mse);
    REQUIRE(div_mse.size() == 3);
    CHECK(div_mse[1] <= div_mse[0]);
    CHECK(div_mse[2] <= div_mse[1]);

    json man = read_json(dir.str("out/manifest_sweep.json"));
    CHECK(man.at("status") == "complete");
    CHECK(man.at("artifacts").contains(csv_path));
}

#ifdef MF_CLI_PATH
TEST_CASE("installed binary maps parse errors to usage exits") {
    REQUIRE(fs::exists(MF_CLI_PATH));
    auto run = [](const std::string& args) {
        std::string cmd = std::string(MF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
        int status = std::system(cmd.c_str());
        REQUIRE(status != -1);
        REQUIRE(WIFEXITED(status));
        return WEXITSTATUS(status);
    };
    CHECK(run("") == commands::kExitUsage);            // a subcommand is required
    CHECK(run("--help") == commands::kExitOk);
    CHECK(run("sample") == commands::kExitUsage);      // --mode is required
    CHECK(run("frobnicate") == commands::kExitUsage);  // unknown subcommand
    CHECK(run("eval one.dsdf") == commands::kExitUsage);

    TempDir dir;
    std::string cfg_path = write_config(dir, toy_config(dir.str("out")));
    CHECK(run("sample --config " + cfg_path + " --mode warp") == commands::kExitUsage);
}
#endif

}  // TEST_SUITE
