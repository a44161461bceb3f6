#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>
#include <utility>
#include <vector>

#include "cdfirst/common.hpp"
#include "cdfirst/data.hpp"
#include "cdfirst/evaluation.hpp"
#include "cdfirst/smm.hpp"
#include "cdfirst/training.hpp"

// Declarative run configuration: a sectioned key=value document plus CLI
// overrides, resolved into the module configs before any compute starts.
// Unknown keys are rejected so a typo cannot silently fall back to a default.

namespace cdfirst {

// Shortest decimal string that parses back to exactly v.  Config echoes use
// this instead of fmt_double so defaults like 0.005 stay readable while the
// round trip stays lossless.
inline std::string fmt_double_short(double v) {
    for (int prec = 15; prec <= 17; ++prec) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return std::string(buf);
    }
    return fmt_double(v);
}

namespace cfg_detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': not a number: '" + v + "'");
    return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': not an integer: '" + v + "'");
    return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError("key '" + key + "': not a nonnegative integer: '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

// Comma-separated list; the empty string is an empty list.
inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    std::size_t pos = 0;
    for (;;) {
        std::size_t c = v.find(',', pos);
        out.push_back(trim(v.substr(pos, c - pos)));
        if (c == std::string::npos) break;
        pos = c + 1;
    }
    return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& tok : split_list(v)) out.push_back(parse_double(key, tok));
    return out;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const auto& tok : split_list(v))
        out.push_back(static_cast<int>(parse_int(key, tok)));
    return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + fmt_double_short(v[i]);
    return s;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace cfg_detail

struct DataConfig {
    std::string task = "elastic-ring";  // generator name; ignored when csv is set
    std::string csv;                    // path to an external x/y dataset
    int dx = 1;                         // csv column split
    int dy = 2;
    std::size_t n = 1000;      // generated rows (generator tasks only)
    double split = -1.0;       // train fraction; negative = source default
    std::uint64_t seed = 1;    // generation seed; tracks the global seed unless set
    int folds = 1;             // k-fold mode when > 1: fold `fold` is the test block
    int fold = 0;

    bool from_csv() const { return !csv.empty(); }
    // Generated tasks train on half the data; external datasets keep the
    // 30/70 train/test convention their published baselines use.
    double train_fraction() const {
        return split >= 0.0 ? split : (from_csv() ? 0.3 : 0.5);
    }
    // Dataset tag used in artifact file names.
    std::string stem() const {
        if (!from_csv()) return task;
        return std::filesystem::path(csv).stem().string();
    }
};

struct EvalConfig {
    std::vector<double> x_values = {-0.75, 0.0, 0.75};
    int grid = 50;   // points per axis of the density comparison grid
    int bins = 10;   // calibration histogram bins
    std::vector<double> deltas = default_delta_list();
};

struct SampleConfig {
    std::vector<double> x = {0.0};  // conditioning values
    std::size_t n = 100;            // draws per conditioning value
};

struct RunConfig {
    std::string out = "out";
    std::uint64_t seed = 1;
    DataConfig data;
    ModelShape shape;  // d_x/d_y and head kind are derived, not config keys
    TrainConfig train;
    EvalConfig eval;
    SampleConfig sample;
    bool data_seed_explicit = false;  // a [data] seed pins generation independently

    // Propagates the global seed into the module configs, then validates.
    void resolve() {
        train.seed = seed;
        if (!data_seed_explicit) data.seed = seed;
        validate();
    }

    void validate() const {
        if (out.empty()) throw ConfigError("out directory must be nonempty");
        train.validate();
        if (data.from_csv()) {
            if (data.dx < 1 || data.dy < 1)
                throw ConfigError("csv datasets need dx >= 1 and dy >= 1");
        } else {
            (void)toy_from_name(data.task);  // throws on unknown task
            if (data.n < 2) throw ConfigError("data.n must be at least 2");
        }
        if (data.split >= 0.0 && !(data.split > 0.0 && data.split < 1.0))
            throw ConfigError("data.split must lie strictly between 0 and 1");
        if (data.folds < 1) throw ConfigError("data.folds must be at least 1");
        if (data.fold < 0 || data.fold >= data.folds)
            throw ConfigError("data.fold must lie in [0, folds)");
        if (eval.grid < 2) throw ConfigError("eval.grid must be at least 2");
        if (eval.bins < 1) throw ConfigError("eval.bins must be at least 1");
        if (eval.x_values.empty()) throw ConfigError("eval.x must be nonempty");
    }

    // The effective document: parseable by apply_config_key, so feeding the
    // echo back through --config reproduces this configuration exactly.
    std::string serialize() const {
        using cfg_detail::join_doubles;
        using cfg_detail::join_ints;
        auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
        std::string s;
        s += "out = " + out + "\n";
        s += "seed = " + std::to_string(seed) + "\n";
        s += "\n[data]\n";
        s += "task = " + data.task + "\n";
        s += "csv = " + data.csv + "\n";
        s += "dx = " + std::to_string(data.dx) + "\n";
        s += "dy = " + std::to_string(data.dy) + "\n";
        s += "n = " + std::to_string(data.n) + "\n";
        s += "seed = " + std::to_string(data.seed) + "\n";
        s += "split = " + fmt_double_short(data.train_fraction()) + "\n";
        s += "folds = " + std::to_string(data.folds) + "\n";
        s += "fold = " + std::to_string(data.fold) + "\n";
        s += "\n[model]\n";
        s += "stack = " + join_ints(shape.stack_widths) + "\n";
        s += "cond = " + join_ints(shape.cond_widths) + "\n";
        s += "act_groups = " + std::to_string(shape.act_groups) + "\n";
        s += "act_group_size = " + std::to_string(shape.act_group_size) + "\n";
        s += "final_groups = " + std::to_string(shape.final_groups) + "\n";
        s += "final_group_size = " + std::to_string(shape.final_group_size) + "\n";
        s += "batch_norm = " + b(shape.batch_norm) + "\n";
        s += "\n[train]\n";
        s += "learning_rate = " + fmt_double_short(train.learning_rate) + "\n";
        s += "batch_size = " + std::to_string(train.batch_size) + "\n";
        s += "max_epochs = " + std::to_string(train.max_epochs) + "\n";
        s += "beta_x = " + fmt_double_short(train.beta_x) + "\n";
        s += "beta_y = " + fmt_double_short(train.beta_y) + "\n";
        s += "delta = " + fmt_double_short(train.delta) + "\n";
        s += "log_alpha_init = " + fmt_double_short(train.log_alpha_init) + "\n";
        s += "variant = " + train.variant + "\n";
        s += "perturb_boundaries = " + b(train.perturb_boundaries) + "\n";
        s += "metric = " + train.early_stop.metric + "\n";
        s += "patience = " + std::to_string(train.early_stop.patience) + "\n";
        s += "eval_every = " + std::to_string(train.early_stop.eval_every) + "\n";
        s += "shards = " + std::to_string(train.shards) + "\n";
        s += "\n[eval]\n";
        s += "x = " + join_doubles(eval.x_values) + "\n";
        s += "grid = " + std::to_string(eval.grid) + "\n";
        s += "bins = " + std::to_string(eval.bins) + "\n";
        s += "deltas = " + join_doubles(eval.deltas) + "\n";
        s += "\n[sample]\n";
        s += "x = " + join_doubles(sample.x) + "\n";
        s += "n = " + std::to_string(sample.n) + "\n";
        return s;
    }
};

// Single point of truth for every accepted key, shared by the file parser
// and the CLI flag overrides.
inline void apply_config_key(RunConfig& rc, const std::string& key, const std::string& value) {
    using namespace cfg_detail;
    if (key == "out") rc.out = value;
    else if (key == "seed") rc.seed = parse_u64(key, value);
    else if (key == "data.task") rc.data.task = value;
    else if (key == "data.csv") rc.data.csv = value;
    else if (key == "data.dx") rc.data.dx = static_cast<int>(parse_int(key, value));
    else if (key == "data.dy") rc.data.dy = static_cast<int>(parse_int(key, value));
    else if (key == "data.n") rc.data.n = static_cast<std::size_t>(parse_u64(key, value));
    else if (key == "data.split") rc.data.split = parse_double(key, value);
    else if (key == "data.seed") {
        rc.data.seed = parse_u64(key, value);
        rc.data_seed_explicit = true;
    }
    else if (key == "data.folds") rc.data.folds = static_cast<int>(parse_int(key, value));
    else if (key == "data.fold") rc.data.fold = static_cast<int>(parse_int(key, value));
    else if (key == "model.stack") rc.shape.stack_widths = parse_int_list(key, value);
    else if (key == "model.cond") rc.shape.cond_widths = parse_int_list(key, value);
    else if (key == "model.act_groups") rc.shape.act_groups = static_cast<int>(parse_int(key, value));
    else if (key == "model.act_group_size") rc.shape.act_group_size = static_cast<int>(parse_int(key, value));
    else if (key == "model.final_groups") rc.shape.final_groups = static_cast<int>(parse_int(key, value));
    else if (key == "model.final_group_size") rc.shape.final_group_size = static_cast<int>(parse_int(key, value));
    else if (key == "model.batch_norm") rc.shape.batch_norm = parse_bool(key, value);
    else if (key == "train.learning_rate") rc.train.learning_rate = parse_double(key, value);
    else if (key == "train.batch_size") rc.train.batch_size = static_cast<int>(parse_int(key, value));
    else if (key == "train.max_epochs") rc.train.max_epochs = static_cast<int>(parse_int(key, value));
    else if (key == "train.beta_x") rc.train.beta_x = parse_double(key, value);
    else if (key == "train.beta_y") rc.train.beta_y = parse_double(key, value);
    else if (key == "train.delta") rc.train.delta = parse_double(key, value);
    else if (key == "train.log_alpha_init") rc.train.log_alpha_init = parse_double(key, value);
    else if (key == "train.variant") rc.train.variant = value;
    else if (key == "train.perturb_boundaries") rc.train.perturb_boundaries = parse_bool(key, value);
    else if (key == "train.metric") rc.train.early_stop.metric = value;
    else if (key == "train.patience") rc.train.early_stop.patience = static_cast<int>(parse_int(key, value));
    else if (key == "train.eval_every") rc.train.early_stop.eval_every = static_cast<int>(parse_int(key, value));
    else if (key == "train.shards") rc.train.shards = static_cast<int>(parse_int(key, value));
    else if (key == "eval.x") rc.eval.x_values = parse_double_list(key, value);
    else if (key == "eval.grid") rc.eval.grid = static_cast<int>(parse_int(key, value));
    else if (key == "eval.bins") rc.eval.bins = static_cast<int>(parse_int(key, value));
    else if (key == "eval.deltas") rc.eval.deltas = parse_double_list(key, value);
    else if (key == "sample.x") rc.sample.x = parse_double_list(key, value);
    else if (key == "sample.n") rc.sample.n = static_cast<std::size_t>(parse_u64(key, value));
    else throw ConfigError("unknown config key '" + key + "'");
}

// Sections group keys by module; a bare key before any section header is
// global.  '#' starts a comment, blank lines are skipped.
inline void parse_config_stream(RunConfig& rc, std::istream& in, const std::string& where) {
    static const std::vector<std::string> kSections = {"data", "model", "train", "eval", "sample"};
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = cfg_detail::trim(line);
        if (line.empty()) continue;
        const std::string at = where + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(at + "unterminated section header");
            section = cfg_detail::trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& s : kSections) known = known || s == section;
            if (!known) throw ConfigError(at + "unknown config section '" + section + "'");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(at + "expected key = value, got '" + line + "'");
        std::string key = cfg_detail::trim(line.substr(0, eq));
        std::string value = cfg_detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(at + "empty key");
        if (!section.empty()) key = section + "." + key;
        try {
            apply_config_key(rc, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(at + e.what());
        }
    }
}

inline void load_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    parse_config_stream(rc, in, path);
}

// ---------------------------------------------------------------------------
// Dataset plumbing shared by the commands

inline Dataset load_run_dataset(const RunConfig& rc) {
    if (rc.data.from_csv()) return load_csv(rc.data.csv, rc.data.dx, rc.data.dy);
    Rng rng(rc.data.seed);
    return sample_toy(toy_from_name(rc.data.task), rc.data.n, rng);
}

// Plain fraction split by default; folds > 1 switches to a contiguous k-way
// partition with block `fold` held out, so one config key covers both
// published evaluation conventions.
inline std::pair<Dataset, Dataset> split_run_dataset(const RunConfig& rc, const Dataset& all) {
    if (rc.data.folds <= 1) {
        auto n_train = static_cast<std::size_t>(rc.data.train_fraction() *
                                                static_cast<double>(all.n()) + 0.5);
        return split_dataset(all, n_train);
    }
    const std::size_t n = all.n();
    const auto k = static_cast<std::size_t>(rc.data.folds);
    const auto f = static_cast<std::size_t>(rc.data.fold);
    const std::size_t lo = n * f / k;
    const std::size_t hi = n * (f + 1) / k;
    if (hi <= lo || hi - lo >= n)
        throw DataError("fold split: fold " + std::to_string(f) + " of " +
                        std::to_string(k) + " is degenerate for " + std::to_string(n) + " rows");
    Dataset tr, te;
    tr.d_x = te.d_x = all.d_x;
    tr.d_y = te.d_y = all.d_y;
    tr.provenance = all.provenance + "[train]";
    te.provenance = all.provenance + "[test]";
    for (std::size_t i = 0; i < n; ++i) {
        Dataset& dst = (i >= lo && i < hi) ? te : tr;
        auto x = all.x_row(i);
        auto y = all.y_row(i);
        dst.x.insert(dst.x.end(), x.begin(), x.end());
        dst.y.insert(dst.y.end(), y.begin(), y.end());
    }
    return {tr, te};
}

// Sweep and ablation protocols need analytic truth, so they are generator-only.
inline ProtocolConfig protocol_from_config(const RunConfig& rc) {
    if (rc.data.from_csv())
        throw ConfigError("sweeps and ablations need a generator task with analytic truth");
    ProtocolConfig pc;
    pc.task = toy_from_name(rc.data.task);
    pc.n_samples = rc.data.n;
    pc.data_seed = rc.data.seed;
    pc.train = rc.train;
    pc.shape = rc.shape;
    pc.shape.d_x = 1;
    pc.shape.d_y = 2;
    pc.x_eval = rc.eval.x_values;
    return pc;
}

// File tag shared by checkpoints, logs, grids and samples.
inline std::string artifact_tag(const std::string& stem, const std::string& variant,
                                double delta, std::uint64_t seed) {
    char d[32];
    std::snprintf(d, sizeof d, "%g", delta);
    return stem + "_" + variant + "_d" + d + "_s" + std::to_string(seed);
}

}  // namespace cdfirst
