#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdfirst/checkpoint.hpp"
#include "cdfirst/config.hpp"
#include "cdfirst/evaluation.hpp"

namespace {

using namespace cdfirst;

// Every flag funnels through apply_config_key, so the config file and the
// command line accept exactly the same keys and reject the same garbage.
// Flags present on the command line override file values.
struct Overrides {
    struct Slot {
        CLI::Option* opt;
        std::string key;
        std::shared_ptr<std::string> val;
    };
    std::string config_path;
    std::vector<Slot> slots;

    void add(CLI::App* cmd, const std::string& flag, const std::string& key,
             const std::string& help) {
        auto val = std::make_shared<std::string>();
        CLI::Option* opt = cmd->add_option(flag, *val, help);
        slots.push_back({opt, key, val});
    }

    bool passed(const std::string& key) const {
        for (const auto& s : slots)
            if (s.key == key && s.opt->count()) return true;
        return false;
    }

    RunConfig build() const {
        RunConfig rc;
        if (!config_path.empty()) load_config_file(rc, config_path);
        for (const auto& s : slots)
            if (s.opt->count()) apply_config_key(rc, s.key, *s.val);
        rc.resolve();
        return rc;
    }
};

void print_config(const RunConfig& rc) { std::cout << rc.serialize() << "\n"; }

// Training lineage recorded in the checkpoint; falls back to the current
// config when a checkpoint predates these fields.
struct Lineage {
    std::string stem;
    std::string variant;
    std::uint64_t seed;
};

Lineage lineage_of(const CondDensityModel& m, const RunConfig& rc) {
    Lineage l{rc.data.stem(), rc.train.variant, rc.train.seed};
    for (const auto& [k, v] : m.config_echo) {
        if (k == "dataset") l.stem = v;
        else if (k == "variant") l.variant = v;
        else if (k == "seed") l.seed = std::strtoull(v.c_str(), nullptr, 10);
    }
    return l;
}

void cmd_gen_toy(const RunConfig& rc) {
    print_config(rc);
    if (rc.data.from_csv())
        throw ConfigError("gen-toy generates data; drop the csv key and name a task");
    ToyKind kind = toy_from_name(rc.data.task);
    Rng rng(rc.data.seed);
    Dataset ds = sample_toy(kind, rc.data.n, rng);
    std::filesystem::create_directories(rc.out);
    std::string path = rc.out + "/" + rc.data.task + "_s" + std::to_string(rc.data.seed) +
                       "_n" + std::to_string(ds.n()) + ".csv";
    write_csv(ds, path);
    write_toy_meta(path, rc.data.task, rc.data.seed, ds.n());
    std::cout << "rows=" << ds.n() << "\ncsv=" << path << "\n";
}

void cmd_train(const RunConfig& rc) {
    print_config(rc);
    Dataset all = load_run_dataset(rc);
    auto [train_ds, test_ds] = split_run_dataset(rc, all);
    ModelShape shape = rc.shape;
    shape.d_x = train_ds.d_x;
    shape.d_y = train_ds.d_y;

    // Generator tasks early-stop on grid SSE against analytic truth;
    // external datasets fall back to held-out NLL.
    MetricFn metric;
    if (!rc.data.from_csv()) {
        ToyKind kind = toy_from_name(rc.data.task);
        metric = sse_metric(kind, default_sse_grid(kind, rc.eval.x_values, rc.eval.grid));
    }
    TrainResult tr = train(train_ds, test_ds, rc.train, shape, metric);

    tr.model.config_echo = {{"dataset", rc.data.stem()},
                            {"variant", rc.train.variant},
                            {"delta", fmt_double_short(rc.train.delta)},
                            {"seed", std::to_string(rc.train.seed)}};
    std::filesystem::create_directories(rc.out);
    std::string tag = artifact_tag(rc.data.stem(), rc.train.variant, rc.train.delta,
                                   rc.train.seed);
    std::string ckpt_path = rc.out + "/ckpt_" + tag + ".json";
    std::string log_path = rc.out + "/train_" + tag + ".log";
    save_checkpoint(tr.model, ckpt_path);

    std::ofstream lf(log_path, std::ios::binary | std::ios::trunc);
    if (!lf) throw DataError("cannot write training log '" + log_path + "'");
    for (const auto& line : tr.log) lf << line << "\n";
    lf << "best_epoch=" << tr.best_epoch << "\n";
    lf << "best_metric=" << fmt_double(tr.best_metric) << "\n";
    lf << "epochs_run=" << tr.epochs_run << "\n";
    lf << "underflow=" << tr.underflow << "\n";
    if (!lf.flush()) throw DataError("failed writing training log '" + log_path + "'");

    std::cout << "checkpoint=" << ckpt_path << "\n";
    std::cout << "log=" << log_path << "\n";
    std::cout << "epochs_run=" << tr.epochs_run << "\n";
    std::cout << "best_epoch=" << tr.best_epoch << "\n";
    std::cout << "best_metric=" << fmt_double(tr.best_metric) << "\n";
    std::cout << "underflow=" << tr.underflow << "\n";
}

void cmd_eval(const RunConfig& rc, const std::string& ckpt_path, bool delta_override) {
    print_config(rc);
    CondDensityModel m = load_checkpoint(ckpt_path);
    if (delta_override) m.fd_step = rc.train.delta;
    Lineage l = lineage_of(m, rc);
    std::filesystem::create_directories(rc.out);

    Dataset all = load_run_dataset(rc);
    auto split = split_run_dataset(rc, all);
    const Dataset& test_ds = split.second;

    // Grid SSE and density surfaces exist only where analytic truth does.
    if (!rc.data.from_csv() && m.d_x() == 1 && m.d_y() == 2) {
        ToyKind kind = toy_from_name(rc.data.task);
        GridSpec grid = default_sse_grid(kind, rc.eval.x_values, rc.eval.grid);
        EvalReport sse = sse_on_grid(m, kind, grid);
        std::string p = rc.out + "/" +
                        report_filename("sse", rc.data.stem(), l.variant, m.fd_step, l.seed);
        write_report(sse, p);
        std::cout << "report=" << p << "\n";
        std::cout << "sse_mean=" << fmt_double(sse.mean) << "\n";
        for (double x : rc.eval.x_values) {
            const double xv[1] = {x};
            std::string gp = rc.out + "/grid_" +
                             artifact_tag(rc.data.stem(), l.variant, m.fd_step, l.seed) +
                             "_x" + fmt_double_short(x) + ".csv";
            emit_density_grid(m, std::span<const double>(xv, 1), grid, gp);
            std::cout << "grid=" << gp << "\n";
        }
    }

    EvalReport nll = test_nll(m, test_ds);
    std::string np = rc.out + "/" +
                     report_filename("nll", rc.data.stem(), l.variant, m.fd_step, l.seed);
    write_report(nll, np);
    std::cout << "report=" << np << "\n";
    std::cout << "nll=" << fmt_double(nll.mean) << "\n";

    EvalReport ece = reliability_ece(m, test_ds, rc.eval.bins);
    std::string ep = rc.out + "/" +
                     report_filename("ece", rc.data.stem(), l.variant, m.fd_step, l.seed);
    write_report(ece, ep);
    std::cout << "report=" << ep << "\n";
    std::cout << "ece_mean=" << fmt_double(ece.mean) << "\n";
}

void cmd_sample(const RunConfig& rc, const std::string& ckpt_path) {
    print_config(rc);
    CondDensityModel m = load_checkpoint(ckpt_path);
    Lineage l = lineage_of(m, rc);

    const int dx = m.d_x();
    std::vector<std::vector<double>> conditions;
    if (dx == 1) {
        for (double v : rc.sample.x) conditions.push_back({v});
    } else if (static_cast<int>(rc.sample.x.size()) == dx) {
        conditions.push_back(rc.sample.x);
    } else {
        throw ConfigError("sample.x must supply exactly " + std::to_string(dx) +
                          " values for this model");
    }

    Rng rng(rc.seed);
    Dataset out_ds;
    out_ds.d_x = dx;
    out_ds.d_y = m.d_y();
    out_ds.provenance = "sampled";
    for (const auto& cond : conditions) {
        std::vector<double> ys = cdfirst::sample(m, cond, rc.sample.n, rng);
        for (std::size_t i = 0; i < rc.sample.n; ++i) {
            out_ds.x.insert(out_ds.x.end(), cond.begin(), cond.end());
            out_ds.y.insert(out_ds.y.end(), ys.begin() + static_cast<long>(i) * m.d_y(),
                            ys.begin() + static_cast<long>(i + 1) * m.d_y());
        }
    }
    std::filesystem::create_directories(rc.out);
    std::string path = rc.out + "/samples_" + l.stem + "_" + l.variant + "_s" +
                       std::to_string(rc.seed) + ".csv";
    write_csv(out_ds, path);
    std::cout << "rows=" << out_ds.n() << "\ncsv=" << path << "\n";
}

void cmd_sweep_delta(const RunConfig& rc) {
    print_config(rc);
    ProtocolConfig pc = protocol_from_config(rc);
    SweepResult sr = delta_sweep(pc, rc.eval.deltas);
    std::filesystem::create_directories(rc.out);
    for (std::size_t i = 0; i < sr.detail.size(); ++i) {
        std::string p = rc.out + "/" +
                        report_filename("sse", rc.data.task, rc.train.variant,
                                        rc.eval.deltas[i], rc.train.seed);
        write_report(sr.detail[i].second, p);
        std::cout << "report=" << p << "\n";
    }
    std::string sp = rc.out + "/delta-sweep_" + rc.data.task + "_" + rc.train.variant +
                     "_s" + std::to_string(rc.train.seed) + ".txt";
    write_report(sr.summary, sp);
    for (const auto& [k, v] : sr.summary.entries)
        std::cout << k << "=" << fmt_double(v) << "\n";
    std::cout << "summary=" << sp << "\n";
}

void cmd_ablate(const RunConfig& rc) {
    print_config(rc);
    ProtocolConfig pc = protocol_from_config(rc);
    AblationResult ar = ablation_suite(pc);
    std::filesystem::create_directories(rc.out);
    for (const auto& [variant, rep] : ar.detail) {
        std::string p = rc.out + "/" +
                        report_filename("sse", rc.data.task, variant, rc.train.delta,
                                        rc.train.seed);
        write_report(rep, p);
        std::cout << "report=" << p << "\n";
    }
    std::string sp = rc.out + "/ablation_" + rc.data.task + "_s" +
                     std::to_string(rc.train.seed) + ".txt";
    write_report(ar.summary, sp);
    for (const auto& [k, v] : ar.summary.entries)
        std::cout << k << "=" << fmt_double(v) << "\n";
    std::cout << "summary=" << sp << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional density estimation with masked monotone CDF networks"};
    app.require_subcommand(1);

    auto add_base = [](CLI::App* cmd, Overrides& ov) {
        cmd->add_option("--config", ov.config_path,
                        "configuration file (key = value lines with [sections])");
        ov.add(cmd, "--seed", "seed", "global seed for data, init and noise");
        ov.add(cmd, "--out", "out", "output directory");
    };
    auto add_data = [](CLI::App* cmd, Overrides& ov) {
        ov.add(cmd, "--task", "data.task", "generator task name");
        ov.add(cmd, "--csv", "data.csv", "external dataset path");
        ov.add(cmd, "--dx", "data.dx", "csv condition columns");
        ov.add(cmd, "--dy", "data.dy", "csv response columns");
        ov.add(cmd, "--n", "data.n", "rows to generate");
    };

    CLI::App* gen = app.add_subcommand("gen-toy", "generate a synthetic dataset CSV");
    Overrides ov_gen;
    add_base(gen, ov_gen);
    ov_gen.add(gen, "--task", "data.task", "generator task name");
    ov_gen.add(gen, "--n", "data.n", "rows to generate");

    CLI::App* trn = app.add_subcommand("train", "fit a model and write a checkpoint");
    Overrides ov_trn;
    add_base(trn, ov_trn);
    add_data(trn, ov_trn);
    ov_trn.add(trn, "--variant", "train.variant",
               "full | no-noise | hard-minmax | mono-mlp");
    ov_trn.add(trn, "--delta", "train.delta", "density finite-difference step");

    CLI::App* evl = app.add_subcommand("eval", "evaluate a checkpoint and write reports");
    Overrides ov_evl;
    std::string evl_ckpt;
    evl->add_option("checkpoint", evl_ckpt, "checkpoint file")->required();
    add_base(evl, ov_evl);
    add_data(evl, ov_evl);
    ov_evl.add(evl, "--delta", "train.delta", "override the checkpoint's density step");

    CLI::App* smp = app.add_subcommand("sample", "draw joint samples from a checkpoint");
    Overrides ov_smp;
    std::string smp_ckpt;
    smp->add_option("checkpoint", smp_ckpt, "checkpoint file")->required();
    add_base(smp, ov_smp);
    ov_smp.add(smp, "--x", "sample.x", "conditioning values, comma separated");
    ov_smp.add(smp, "--n", "sample.n", "draws per conditioning value");

    CLI::App* swp = app.add_subcommand("sweep-delta",
                                       "train once per density step and compare grid SSE");
    Overrides ov_swp;
    add_base(swp, ov_swp);
    ov_swp.add(swp, "--task", "data.task", "generator task name");
    ov_swp.add(swp, "--n", "data.n", "rows to generate");
    ov_swp.add(swp, "--variant", "train.variant",
               "full | no-noise | hard-minmax | mono-mlp");

    CLI::App* abl = app.add_subcommand("ablate",
                                       "train every architecture variant and compare grid SSE");
    Overrides ov_abl;
    add_base(abl, ov_abl);
    ov_abl.add(abl, "--task", "data.task", "generator task name");
    ov_abl.add(abl, "--n", "data.n", "rows to generate");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    auto t0 = std::chrono::steady_clock::now();
    int code = 0;
    try {
        if (*gen) cmd_gen_toy(ov_gen.build());
        else if (*trn) cmd_train(ov_trn.build());
        else if (*evl) cmd_eval(ov_evl.build(), evl_ckpt, ov_evl.passed("train.delta"));
        else if (*smp) cmd_sample(ov_smp.build(), smp_ckpt);
        else if (*swp) cmd_sweep_delta(ov_swp.build());
        else if (*abl) cmd_ablate(ov_abl.build());
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        code = 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        code = 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        code = 3;
    }
    std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    // timing stays off stdout so command output is byte-stable across runs
    std::fprintf(stderr, "elapsed_seconds=%.3f\n", dt.count());
    return code;
}
