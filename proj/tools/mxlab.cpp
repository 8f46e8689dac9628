// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// mxlab: command-line front end.
//
// Exit codes: 0 ok, 1 usage, 2 bad config or input, 3 the run diverged
// (logs are still written), 4 I/O.
//
// Environment: MXLAB_OUTPUT_DIR replaces a config's output_dir,
// MXLAB_JOBS sets the default sweep parallelism. Flags win over both.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mxlab/config.hpp"
#include "mxlab/experiment.hpp"
#include "mxlab/fp_codec.hpp"
#include "mxlab/mx_block.hpp"
#include "mxlab/mx_container.hpp"
#include "mxlab/scaling_fit.hpp"

namespace {

using namespace mxlab;

enum Exit : int { kOk = 0, kUsage = 1, kBadInput = 2, kDiverged = 3, kIo = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ExperimentConfig load_config(const std::string& path, const std::string& out_flag) {
    auto c = parse_config(slurp(path));
    if (!out_flag.empty()) {
        c.output_dir = out_flag;
    } else if (const char* env = std::getenv("MXLAB_OUTPUT_DIR"); env && *env) {
        c.output_dir = env;
    }
    return c;
}

nlohmann::json load_json(const std::string& path, const std::string& what) {
    try {
        return nlohmann::json::parse(slurp(path), nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(what, std::string("malformed JSON: ") + e.what());
    }
}

/// "e4m3", "e4m3:16" or "e4m3:16:toward-zero".
MXSpec parse_spec(const std::string& text) {
    MXSpec s;
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.empty()) throw UsageError("empty --spec");
    const auto f = parse_format(parts[0]);
    if (!f || *f == FormatId::bf16) throw UsageError("--spec: unknown MX element format '" + parts[0] + "'");
    s.element = *f;
    if (parts.size() > 1) {
        try {
            s.block_size = std::stoi(parts[1]);
        } catch (const std::exception&) {
            throw UsageError("--spec: bad block size '" + parts[1] + "'");
        }
    }
    if (parts.size() > 2) {
        const auto r = parse_rounding(parts[2]);
        if (!r) throw UsageError("--spec: bad rounding '" + parts[2] + "'");
        s.rounding = *r;
    }
    if (parts.size() > 3) throw UsageError("--spec: too many fields");
    s.validate();
    return s;
}

/// Dense CSV matrix: one row per line, no header.
Tensor<double> read_matrix_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<double> vals;
    std::size_t rows = 0, cols = 0, lineno = 0;
    for (std::string line; std::getline(is, line);) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::stringstream ls(line);
        std::size_t n = 0;
        for (std::string cell; std::getline(ls, cell, ',');) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                throw IoError(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            }
            ++n;
        }
        if (rows == 0) cols = n;
        if (n != cols) throw IoError(path + ":" + std::to_string(lineno) + ": ragged row");
        ++rows;
    }
    if (rows == 0) throw IoError(path + ": empty matrix");
    Tensor<double> t({rows, cols});
    std::copy(vals.begin(), vals.end(), t.vec().begin());
    return t;
}

void write_matrix_csv(const std::string& path, const Tensor<double>& t) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const auto& sh = t.shape();
    const std::size_t cols = sh.empty() ? 0 : sh.back();
    char buf[40];
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", t[i]);
        os << buf << ((i + 1) % cols == 0 ? '\n' : ',');
    }
    if (!os) throw IoError("write failed on " + path);
}

/// Plan from a JSON file (list of {step, action, conditional}) or inline
/// "4500:to_fp32,5080:skip_ln_quant,6000:bump_exponent:conditional".
std::vector<InterventionPlan> load_plan(const std::string& arg, std::uint64_t steps) {
    nlohmann::json list = nlohmann::json::array();
    if (std::ifstream(arg).good()) {
        list = load_json(arg, "plan");
    } else {
        std::stringstream ss(arg);
        for (std::string item; std::getline(ss, item, ',');) {
            std::stringstream is(item);
            std::vector<std::string> f;
            for (std::string p; std::getline(is, p, ':');) f.push_back(p);
            if (f.size() < 2 || f.size() > 3 || (f.size() == 3 && f[2] != "conditional"))
                throw UsageError("--plan: expected STEP:ACTION[:conditional], got '" + item + "'");
            nlohmann::json e;
            try {
                e["step"] = std::stoull(f[0]);
            } catch (const std::exception&) {
                throw UsageError("--plan: bad step '" + f[0] + "'");
            }
            e["action"] = f[1];
            if (f.size() == 3) e["conditional"] = true;
            list.push_back(e);
        }
    }
    return detail::parse_plan(&list, steps, "plan");
}

RunOptions run_options(bool timing, std::uint64_t ckpt, bool resume, std::uint64_t progress) {
    RunOptions o;
    o.timing = timing;
    o.checkpoint_every = ckpt;
    o.resume = resume;
    o.progress_every = progress;
    return o;
}

void print_summary(const RunSummary& s, const fs::path& log) {
    std::cout << "fingerprint " << s.fingerprint << "\nlog " << log.string() << "\nstatus " << to_string(s.status)
              << "\nsteps " << s.steps << "\nfinal_loss " << s.final_loss << "\nspikes " << s.spike_steps.size()
              << "\ndivergence_step " << (s.divergence_step ? std::to_string(*s.divergence_step) : "none") << '\n';
}

std::string reference_id(const ReferenceFit& r) {
    auto strip = [](std::string s) {
        for (std::string p : {"mxfp8-", "mxfp6-"})
            if (s.rfind(p, 0) == 0) s.erase(0, p.size());
        return s;
    };
    return strip(r.weights) + "/" + strip(r.activations);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mxlab: MX block floating point emulation and low-precision training lab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    std::string fmt_name, out_path, in_path, spec_text = "e4m3", cfg_path, cfg2_path, grid_path, plan_arg, dir_path;
    std::string out_dir;
    bool timing = false, resume = false;
    std::uint64_t ckpt_every = 0, progress = 0, seed = 1;
    std::size_t axis = 1, jobs = 0;
    double huber_delta = 1e-3, noise = 0.01;
    std::string row_id = "bf16/bf16";

    auto* codes = app.add_subcommand("codes", "Positive finite code table of an element format as CSV");
    codes->add_option("format", fmt_name, "e4m3, e5m2, e2m3, e3m2 or bf16")->required();
    codes->add_option("-o,--output", out_path, "Write to a file instead of stdout");

    auto* quant = app.add_subcommand("quantize", "Quantize a CSV matrix into an MX container file");
    quant->add_option("input", in_path, "CSV matrix, one row per line")->required();
    quant->add_option("output", out_path, "MX container to write")->required();
    quant->add_option("--spec", spec_text, "ELEMENT[:BLOCK[:ROUNDING]], e.g. e4m3:32")->capture_default_str();
    quant->add_option("--axis", axis, "Blocking axis (0 columns, 1 rows)")->capture_default_str();

    auto* dequant = app.add_subcommand("dequantize", "Decode an MX container file to a CSV matrix");
    dequant->add_option("input", in_path, "MX container")->required();
    dequant->add_option("output", out_path, "CSV matrix to write")->required();

    auto add_run_flags = [&](CLI::App* sc) {
        sc->add_flag("--timing", timing, "Record wall-clock time per step (logs are then not reproducible)");
        sc->add_option("--output-dir", out_dir, "Override the config's output_dir");
        sc->add_option("--progress", progress, "Print a progress line every N steps");
    };

    auto* train = app.add_subcommand("train", "Train one configuration");
    train->add_option("config", cfg_path, "Experiment config (JSON)")->required();
    train->add_option("--checkpoint-every", ckpt_every, "Checkpoint every N steps (0: never)");
    train->add_flag("--resume", resume, "Continue from the last checkpoint if one exists");
    add_run_flags(train);

    auto* dual = app.add_subcommand("dual", "High/low precision twins with per-step gradient comparison");
    dual->add_option("config_hp", cfg_path, "High precision config")->required();
    dual->add_option("config_lp", cfg2_path, "Low precision config")->required();
    add_run_flags(dual);

    auto* sweep = app.add_subcommand("sweep", "Run a grid of configurations");
    sweep->add_option("config", cfg_path, "Base config (JSON)")->required();
    sweep->add_option("--grid", grid_path, "JSON object of dotted config paths to value lists")->required();
    sweep->add_option("--jobs", jobs, "Parallel runs (default MXLAB_JOBS or 1)");
    add_run_flags(sweep);

    auto* inter = app.add_subcommand("intervene", "Train with a mid-run precision change");
    inter->add_option("config", cfg_path, "Experiment config (JSON)")->required();
    inter->add_option("--plan", plan_arg, "Plan JSON file, or STEP:ACTION[:conditional],...")->required();
    inter->add_option("--checkpoint-every", ckpt_every, "Checkpoint every N steps (0: never)");
    inter->add_flag("--resume", resume, "Continue from the last checkpoint if one exists");
    add_run_flags(inter);

    auto* analyze = app.add_subcommand("analyze", "Spike, zeta and last-bin reports for the logs in a directory");
    analyze->add_option("logdir", dir_path, "Directory holding *.jsonl logs")->required()->check(CLI::ExistingDirectory);

    auto* fit = app.add_subcommand("fit", "Fit L(N, D) = E + A/N^alpha + B/D^beta to a CSV of points");
    fit->add_option("points", in_path, "CSV with N, D and loss columns")->required();
    fit->add_option("-o,--output", out_path, "Write the JSON to a file instead of stdout");
    fit->add_option("--huber-delta", huber_delta, "Huber scale on log residuals")->capture_default_str();

    auto* synth = app.add_subcommand("synth", "Synthetic scaling points from a published fit");
    synth->add_option("--row", row_id, "weights/activations, e.g. bf16/bf16, e5m2/e5m2")->capture_default_str();
    synth->add_option("--noise", noise, "Multiplicative noise sd")->capture_default_str();
    synth->add_option("--seed", seed, "Noise seed")->capture_default_str();
    synth->add_option("-o,--output", out_path, "Write to a file instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*codes) {
            const auto id = parse_format(fmt_name);
            if (!id) throw UsageError("unknown format '" + fmt_name + "'");
            if (out_path.empty()) {
                write_code_table_csv(std::cout, format_of(*id));
            } else {
                std::ofstream os(out_path, std::ios::trunc);
                if (!os) throw IoError("cannot open " + out_path + " for writing");
                write_code_table_csv(os, format_of(*id));
            }
            return kOk;
        }
        if (*quant) {
            const auto spec = parse_spec(spec_text);
            const auto t = read_matrix_csv(in_path);
            if (axis > 1) throw UsageError("--axis must be 0 or 1");
            const auto mt = quantize_tensor(t, spec, axis);
            std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
            if (!os) throw IoError("cannot open " + out_path + " for writing");
            write_mx_container(os, mt);
            if (!os) throw IoError("write failed on " + out_path);
            std::cout << "blocks " << mt.blocks.size() << "\nlast_bin_fraction " << last_bin_fraction(mt) << '\n';
            return kOk;
        }
        if (*dequant) {
            std::ifstream is(in_path, std::ios::binary);
            if (!is) throw IoError("cannot open " + in_path);
            const auto mt = read_mx_container(is);
            write_matrix_csv(out_path, dequantize_tensor<double>(mt));
            return kOk;
        }
        if (*train || *inter) {
            auto c = load_config(cfg_path, out_dir);
            if (*inter) c.plan = load_plan(plan_arg, c.train.steps);
            const auto s = run_experiment(c, run_options(timing, ckpt_every, resume, progress));
            print_summary(s, run_path(c, ".jsonl"));
            return s.diverged() ? kDiverged : kOk;
        }
        if (*dual) {
            const auto hp = load_config(cfg_path, out_dir), lp = load_config(cfg2_path, out_dir);
            const auto s = dual_experiment(hp, lp, run_options(timing, 0, false, progress));
            std::cout << "fingerprint " << s.fingerprint << "\nhp_status " << to_string(s.hp.status) << "\nlp_status "
                      << to_string(s.lp.status) << "\npaired_steps " << s.paired_steps << "\nlp_divergence_step "
                      << (s.lp.divergence_step ? std::to_string(*s.lp.divergence_step) : "none") << '\n';
            return s.hp.diverged() || s.lp.diverged() ? kDiverged : kOk;
        }
        if (*sweep) {
            auto base = load_json(cfg_path, "<root>");
            if (!out_dir.empty()) {
                base["output_dir"] = out_dir;
            } else if (const char* env = std::getenv("MXLAB_OUTPUT_DIR"); env && *env) {
                base["output_dir"] = env;
            }
            if (jobs == 0) {
                const char* env = std::getenv("MXLAB_JOBS");
                jobs = env ? static_cast<std::size_t>(std::strtoull(env, nullptr, 10)) : 1;
                if (jobs == 0) jobs = 1;
            }
            const auto res = run_sweep(base, load_json(grid_path, "grid"), jobs, run_options(timing, 0, true, progress));
            std::cout << "fingerprint " << res.fingerprint << "\ntable " << res.table.string() << '\n';
            std::cout << slurp(res.table.string());
            for (const auto& r : res.rows)
                if (!r.error.empty()) {
                    std::cerr << "mxlab: sweep point failed: " << r.error << '\n';
                    return kBadInput;
                }
            return kOk;
        }
        if (*analyze) {
            const auto logs = analyze_directory(dir_path);
            for (const auto& a : logs) {
                std::cout << a.file.filename().string() << "  " << a.kind << "  steps " << a.steps;
                if (a.kind == "run") {
                    std::cout << "  spikes " << a.spike_steps.size() << "  divergence_step "
                              << (a.divergence_step ? std::to_string(*a.divergence_step) : "none");
                } else {
                    std::cout << "  zeta_ema>1 at "
                              << (a.zeta_ema_above_one ? std::to_string(*a.zeta_ema_above_one) : "never");
                }
                std::cout << "  -> " << a.metrics.filename().string() << '\n';
            }
            return kOk;
        }
        if (*fit) {
            const std::string text = slurp(in_path);
            std::istringstream is(text);
            const auto pts = read_points_csv(is);
            const auto f = fit_scaling_law(pts, huber_delta);
            Json j = fit_to_json(f);
            j["points"] = pts.size();
            j["fingerprint"] = fnv1a64_hex(text);
            j["version"] = kVersion;
            if (out_path.empty()) {
                std::cout << j.dump(2) << '\n';
            } else {
                write_json_file(out_path, j);
            }
            return kOk;
        }
        if (*synth) {
            for (const auto& r : reference_fits()) {
                if (reference_id(r) != row_id) continue;
                const auto pts = synthesize_points(r.fit, 6, 1e7, 1e9, 5, 2.0, 150.0, noise, seed);
                if (out_path.empty()) {
                    write_points_csv(std::cout, pts);
                } else {
                    std::ofstream os(out_path, std::ios::trunc);
                    if (!os) throw IoError("cannot open " + out_path + " for writing");
                    write_points_csv(os, pts);
                }
                return kOk;
            }
            std::string known;
            for (const auto& r : reference_fits()) known += " " + reference_id(r);
            throw UsageError("unknown --row '" + row_id + "'; known:" + known);
        }
    } catch (const UsageError& e) {
        std::cerr << "mxlab: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "mxlab: config error at " << e.what() << '\n';
        return kBadInput;
    } catch (const IoError& e) {
        std::cerr << "mxlab: I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "mxlab: I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const std::invalid_argument& e) {  // InvalidInput, ShapeMismatch
        std::cerr << "mxlab: invalid input: " << e.what() << '\n';
        return kBadInput;
    } catch (const std::domain_error& e) {  // IllPosedFit, UndefinedRatio
        std::cerr << "mxlab: " << e.what() << '\n';
        return kBadInput;
    } catch (const std::exception& e) {
        std::cerr << "mxlab: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}
