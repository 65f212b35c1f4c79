// koopman-uq: generate synthetic dynamical-system data, train Koopman
// autoencoder ensembles under the independent / variance / CRPS-proxy
// objectives, and evaluate their probabilistic forecasts.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "kuq/checkpoint.hpp"
#include "kuq/dataset.hpp"
#include "kuq/errors.hpp"
#include "kuq/eval.hpp"
#include "kuq/svg.hpp"
#include "kuq/systems.hpp"
#include "kuq/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string json_scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

/// Applies a JSON config whose keys mirror the long option names (dashes or
/// underscores both work). Values only land on options the user did not set
/// on the command line, so flags always override the file.
void apply_json_config(CLI::App* cmd, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw kuq::ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw kuq::ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw kuq::ConfigError("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        std::string name = "--" + key;
        for (char& c : name)
            if (c == '_') c = '-';
        CLI::Option* op = cmd->get_option_no_throw(name);
        if (op == nullptr) {
            throw kuq::ConfigError("config key '" + key + "' does not match any option of '" +
                                   cmd->get_name() + "'");
        }
        if (op->count() > 0) continue;
        try {
            if (value.is_array()) {
                for (const auto& v : value) op->add_result(json_scalar(v));
            } else {
                op->add_result(json_scalar(value));
            }
            op->run_callback();
        } catch (const CLI::Error& e) {
            throw kuq::ConfigError("config key '" + key + "': " + e.what());
        }
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw kuq::IoError("cannot open '" + path.string() + "' for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw kuq::IoError("short write to '" + path.string() + "'");
}

std::pair<std::size_t, std::size_t> parse_slice(const std::string& text) {
    if (text.empty() || text == "all") return {0, SIZE_MAX};
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw kuq::ConfigError("--series expects 'a:b' or 'all'");
    try {
        const std::size_t a = colon == 0 ? 0 : std::stoull(text.substr(0, colon));
        const std::size_t b =
            colon + 1 == text.size() ? SIZE_MAX : std::stoull(text.substr(colon + 1));
        return {a, b};
    } catch (const std::exception&) {
        throw kuq::ConfigError("--series expects numeric bounds, got '" + text + "'");
    }
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
    std::string system = "damped_oscillator";
    std::size_t n_series = 200;
    std::size_t steps = 60;
    double dt = 0.1;
    double noise_std = 0.01;
    std::uint64_t seed = 0;
    double omega = 2.0, zeta = 0.1, mu = 1.0, init_scale = 1.0;
    std::vector<double> a_matrix;
    std::string out;
};

void run_gen_data(const GenDataArgs& args) {
    kuq::SystemSpec spec;
    spec.kind = kuq::system_kind_from_string(args.system);
    spec.a_matrix = args.a_matrix;
    spec.omega = args.omega;
    spec.zeta = args.zeta;
    spec.mu = args.mu;
    spec.noise_std = args.noise_std;
    spec.init_scale = args.init_scale;
    spec.seed = args.seed;

    kuq::TimeSeriesDataset ds = kuq::generate(spec, args.n_series, args.steps, args.dt);
    kuq::save_dataset(ds, args.out);
    std::printf("wrote %s: N=%zu T=%zu n=%zu dt=%g system=%s seed=%llu\n", args.out.c_str(),
                ds.series_count, ds.horizon(), ds.channel_count, ds.dt, args.system.c_str(),
                static_cast<unsigned long long>(args.seed));
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    kuq::RunConfig cfg;
    std::vector<int> hidden = {64, 64};
    std::string regime = "independent";
    std::string activation = "tanh";
    std::string resume;
    std::string config;
    int log_every = 100;
};

kuq::RunConfig finish_config(TrainArgs& args) {
    args.cfg.model.hidden = args.hidden;
    args.cfg.model.activation = kuq::activation_from_string(args.activation);
    args.cfg.regime = kuq::regime_from_string(args.regime);
    if (args.cfg.regime == kuq::Regime::crps_proxy && args.cfg.lambda == 0.0) {
        // The CRPS-proxy objective conventionally runs with weight 1.
        args.cfg.lambda = 1.0;
    }
    args.cfg.validate();
    return args.cfg;
}

/// Runs the training loop with CSV logging; saves the last good checkpoint
/// and rethrows if the loss turns non-finite.
kuq::Checkpoint train_loop(kuq::Trainer& trainer, int steps, std::ostream& log, int log_every,
                           const fs::path& out_dir, bool quiet = false) {
    log << kuq::train_log_header() << "\n";
    for (int s = 0; s < steps; ++s) {
        kuq::TrainLogRow row;
        try {
            row = trainer.step();
        } catch (const kuq::NumericError&) {
            kuq::save_checkpoint(trainer.make_checkpoint(),
                                 (out_dir / "checkpoint.last_good.json").string());
            std::fprintf(stderr, "saved last good state to %s\n",
                         (out_dir / "checkpoint.last_good.json").string().c_str());
            throw;
        }
        log << kuq::format_log_row(row) << "\n";
        if (!quiet && log_every > 0 && (row.step % log_every == 0 || s + 1 == steps)) {
            std::printf("step %6lld  total %.6g  ensemble_variance %.6g\n",
                        static_cast<long long>(row.step), row.loss.total, row.ensemble_variance);
        }
    }
    return trainer.make_checkpoint();
}

void run_train(TrainArgs& args) {
    kuq::RunConfig cfg = finish_config(args);
    const fs::path out_dir(cfg.out_dir);
    fs::create_directories(out_dir);

    kuq::TimeSeriesDataset ds = kuq::load_dataset(cfg.dataset);
    std::optional<kuq::Trainer> trainer;
    if (!args.resume.empty()) {
        kuq::Checkpoint resume = kuq::load_checkpoint(args.resume);
        trainer.emplace(cfg, ds, resume);
    } else {
        trainer.emplace(cfg, ds);
    }

    std::ofstream log(out_dir / "train_log.csv", std::ios::trunc);
    if (!log) throw kuq::IoError("cannot open train log for writing");
    // --steps counts total optimization steps: resumed runs continue up to it.
    const int remaining = cfg.steps - static_cast<int>(trainer->current_step());
    if (remaining < 0) {
        throw kuq::ConfigError("--steps " + std::to_string(cfg.steps) +
                               " is below the resumed checkpoint's step count " +
                               std::to_string(trainer->current_step()));
    }
    kuq::Checkpoint ck = train_loop(*trainer, remaining, log, args.log_every, out_dir);
    kuq::save_checkpoint(ck, (out_dir / "checkpoint.json").string());
    std::printf("wrote %s (step %lld)\n", (out_dir / "checkpoint.json").string().c_str(),
                static_cast<long long>(ck.step));
}

// ---- evaluate -----------------------------------------------------------------

struct EvaluateArgs {
    std::string ckpt, data, out, series = "all";
    int horizon = 0;
    int bins = 20;
};

void run_evaluate(const EvaluateArgs& args) {
    kuq::Checkpoint ck = kuq::load_checkpoint(args.ckpt);
    kuq::Ensemble ens = kuq::restore_ensemble(ck);
    kuq::TimeSeriesDataset ds = kuq::load_dataset(args.data);
    kuq::EvalOptions opt;
    opt.horizon = args.horizon;
    opt.bin_count = args.bins;
    std::tie(opt.series_begin, opt.series_end) = parse_slice(args.series);
    kuq::EvalReport report = kuq::evaluate_ensemble(ens, ds, opt);

    if (!args.out.empty()) {
        fs::create_directories(args.out);
        write_text(fs::path(args.out) / "report.json", report.to_json().dump(2) + "\n");
        write_text(fs::path(args.out) / "bins.csv", report.bins_csv());
    }
    std::printf("series=%zu horizon=%d members=%zu\n", report.series_used, report.horizon,
                report.member_count);
    std::printf("CRPS(per-scalar)=%.8g CRPS(channel-sum)=%.8g MAE=%.8g\n", report.crps_per_scalar,
                report.crps_channel_sum, report.mae);
    std::printf("SSREL=%.8g SSRAT=%.8g%s\n", report.spread_skill.ssrel, report.spread_skill.ssrat,
                report.spread_skill.flag.empty()
                    ? ""
                    : (" (" + report.spread_skill.flag + ")").c_str());
}

// ---- forecast -----------------------------------------------------------------

struct ForecastArgs {
    std::string ckpt, data, out, svg;
    std::size_t series = 0;
    int horizon = 0;
};

void run_forecast(const ForecastArgs& args) {
    kuq::Checkpoint ck = kuq::load_checkpoint(args.ckpt);
    kuq::Ensemble ens = kuq::restore_ensemble(ck);
    kuq::TimeSeriesDataset ds = kuq::load_dataset(args.data);
    if (args.series >= ds.series_count) {
        throw kuq::ConfigError("--series " + std::to_string(args.series) +
                               " out of range (dataset has " + std::to_string(ds.series_count) +
                               " series)");
    }
    const int horizon = args.horizon > 0 ? args.horizon : static_cast<int>(ds.horizon());
    if (static_cast<std::size_t>(horizon) > ds.horizon()) {
        throw kuq::ConfigError("--horizon exceeds dataset length");
    }

    std::vector<double> x0(ds.state(args.series, 0).begin(), ds.state(args.series, 0).end());
    ens.normalization.apply_state(x0);
    kuq::ForecastDistribution dist = kuq::ensemble_forecast(ens, x0, horizon);
    const std::size_t n = dist.channels;
    const auto h = static_cast<std::size_t>(horizon);
    for (std::size_t j = 0; j < dist.member_count; ++j)
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t c = 0; c < n; ++c) {
                double& v = dist.member_traj[(j * h + t) * n + c];
                v = ens.normalization.invert(c, v);
            }
    for (std::size_t t = 0; t < h; ++t)
        for (std::size_t c = 0; c < n; ++c) {
            dist.mean[t * n + c] = ens.normalization.invert(c, dist.mean[t * n + c]);
            dist.spread[t * n + c] *= ens.normalization.stdev[c];
        }

    std::vector<double> truth(h * n);
    for (std::size_t t = 0; t < h; ++t)
        for (std::size_t c = 0; c < n; ++c) truth[t * n + c] = ds.at(args.series, t + 1, c);

    // CSV: t, then per channel truth, mean, members 1..M, spread.
    std::string csv = "t";
    for (std::size_t c = 0; c < n; ++c) {
        const std::string& name = ds.channel_names[c];
        csv += ",truth_" + name + ",mean_" + name;
        for (std::size_t j = 1; j <= dist.member_count; ++j) {
            csv += ",member_" + std::to_string(j) + "_" + name;
        }
        csv += ",spread_" + name;
    }
    csv += "\n";
    char buf[64];
    for (std::size_t t = 0; t < h; ++t) {
        csv += std::to_string(t + 1);
        for (std::size_t c = 0; c < n; ++c) {
            std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", truth[t * n + c], dist.mean_at(t, c));
            csv += buf;
            for (std::size_t j = 0; j < dist.member_count; ++j) {
                std::snprintf(buf, sizeof(buf), ",%.17g", dist.member(j, t, c));
                csv += buf;
            }
            std::snprintf(buf, sizeof(buf), ",%.17g", dist.spread_at(t, c));
            csv += buf;
        }
        csv += "\n";
    }
    write_text(args.out, csv);
    std::printf("wrote %s (%d rows, %zu columns)\n", args.out.c_str(), horizon,
                1 + n * (dist.member_count + 3));

    if (!args.svg.empty()) {
        write_text(args.svg, kuq::forecast_svg(dist, truth, ds.channel_names));
        std::printf("wrote %s\n", args.svg.c_str());
    }
}

// ---- sweep --------------------------------------------------------------------

struct SweepArgs {
    TrainArgs train;
    std::string eval_data;
    std::vector<double> lambdas = {0.0, 0.1, 0.5, 0.9, 0.99, 1.0};
};

void run_sweep(SweepArgs& args) {
    if (args.train.regime == "independent") args.train.regime = "variance";
    kuq::RunConfig base = finish_config(args.train);
    const fs::path out_dir(base.out_dir);
    fs::create_directories(out_dir);

    kuq::TimeSeriesDataset train_ds = kuq::load_dataset(base.dataset);
    kuq::TimeSeriesDataset eval_ds = kuq::load_dataset(args.eval_data);

    std::string table = "lambda,crps_train_extrap,crps_transfer,ssrel,ssrat,status\n";
    std::printf("%-8s %-18s %-16s %-12s %-12s %s\n", "lambda", "crps_train_extrap",
                "crps_transfer", "ssrel", "ssrat", "status");
    for (double lambda : args.lambdas) {
        char lam[32];
        std::snprintf(lam, sizeof(lam), "%g", lambda);
        const fs::path run_dir = out_dir / (std::string("lambda_") + lam);
        fs::create_directories(run_dir);
        try {
            kuq::RunConfig cfg = base;
            cfg.lambda = lambda;
            cfg.out_dir = run_dir.string();
            cfg.validate();
            kuq::Trainer trainer(cfg, train_ds);
            std::ofstream log(run_dir / "train_log.csv", std::ios::trunc);
            kuq::Checkpoint ck =
                train_loop(trainer, cfg.steps, log, /*log_every=*/0, run_dir, /*quiet=*/true);
            kuq::save_checkpoint(ck, (run_dir / "checkpoint.json").string());

            kuq::EvalOptions opt;
            opt.horizon = base.horizon;
            // Train-extrapolation task: forecast the training series over the
            // full horizon. Transfer task: held-out initial conditions.
            kuq::EvalReport train_report = kuq::evaluate_ensemble(trainer.ensemble(), train_ds, opt);
            kuq::EvalReport transfer_report =
                kuq::evaluate_ensemble(trainer.ensemble(), eval_ds, opt);
            write_text(run_dir / "report_train_extrap.json",
                       train_report.to_json().dump(2) + "\n");
            write_text(run_dir / "report_transfer.json", transfer_report.to_json().dump(2) + "\n");

            char row[256];
            std::snprintf(row, sizeof(row), "%g,%.17g,%.17g,%.17g,%.17g,ok\n", lambda,
                          train_report.crps_per_scalar, transfer_report.crps_per_scalar,
                          transfer_report.spread_skill.ssrel, transfer_report.spread_skill.ssrat);
            table += row;
            std::printf("%-8g %-18.8g %-16.8g %-12.8g %-12.8g ok\n", lambda,
                        train_report.crps_per_scalar, transfer_report.crps_per_scalar,
                        transfer_report.spread_skill.ssrel, transfer_report.spread_skill.ssrat);
        } catch (const kuq::Error& e) {
            std::fprintf(stderr, "lambda=%g failed: %s\n", lambda, e.what());
            char row[256];
            std::snprintf(row, sizeof(row), "%g,,,,,failed\n", lambda);
            table += row;
            std::printf("%-8g %-18s %-16s %-12s %-12s failed\n", lambda, "-", "-", "-", "-");
        }
    }
    write_text(out_dir / "sweep.csv", table);
    std::printf("wrote %s\n", (out_dir / "sweep.csv").string().c_str());
}

void add_train_options(CLI::App* cmd, TrainArgs& args) {
    cmd->add_option("--data,--dataset", args.cfg.dataset, "KTS1 dataset path")->required();
    cmd->add_option("--out,--out-dir", args.cfg.out_dir, "output directory")->required();
    cmd->add_option("--regime", args.regime, "training regime")
        ->check(CLI::IsMember({"independent", "variance", "crps_proxy"}));
    cmd->add_option("--lambda", args.cfg.lambda, "diversity weight");
    cmd->add_option("--alpha", args.cfg.alpha, "orthogonality weight")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--members", args.cfg.members, "ensemble size M")->check(CLI::PositiveNumber);
    cmd->add_option("--latent-dim,--latent_dim", args.cfg.model.latent_dim, "latent dimension d")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--hidden", args.hidden, "hidden layer widths")->delimiter(',');
    cmd->add_option("--activation", args.activation, "hidden activation")
        ->check(CLI::IsMember({"tanh", "linear"}));
    cmd->add_option("--steps", args.cfg.steps, "optimization steps")->check(CLI::PositiveNumber);
    cmd->add_option("--batch,--batch-size,--batch_size", args.cfg.batch_size, "series per batch")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--lr", args.cfg.optim.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--beta1", args.cfg.optim.beta1, "Adam beta1");
    cmd->add_option("--beta2", args.cfg.optim.beta2, "Adam beta2");
    cmd->add_option("--eps", args.cfg.optim.eps, "Adam epsilon")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", args.cfg.seed, "base seed; member j uses seed + j");
    cmd->add_flag("--allow-divergent,--allow_divergent", args.cfg.allow_divergent,
                  "permit lambda > 1 despite guaranteed divergence");
    cmd->add_option("--train-horizon,--train_horizon", args.cfg.train_horizon,
                    "training window length (0 = full series, anchored at t=0)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_flag("--random-window,--random_window", args.cfg.random_window,
                  "augment batches with random anchor offsets (needs --train-horizon)");
    cmd->add_option("--config", args.config, "JSON config mirroring these option names");
    cmd->add_option("--log-every,--log_every", args.log_every,
                    "stdout progress cadence (CSV logs every step)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Koopman autoencoder ensembles with uncertainty quantification"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic KTS1 dataset");
    gen_cmd->add_option("--system", gen.system, "dynamical system kind")
        ->check(CLI::IsMember({"linear", "damped_oscillator", "van_der_pol"}));
    gen_cmd->add_option("--n-series,--n_series", gen.n_series, "number of series N")
        ->check(CLI::PositiveNumber);
    gen_cmd->add_option("--steps", gen.steps, "horizon T (file holds T+1 steps)")
        ->check(CLI::PositiveNumber);
    gen_cmd->add_option("--dt", gen.dt, "sampling interval")->check(CLI::PositiveNumber);
    gen_cmd
        ->add_option("--noise-std,--noise_std", gen.noise_std,
                     "observation noise standard deviation")
        ->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--seed", gen.seed, "RNG seed");
    gen_cmd->add_option("--omega", gen.omega, "oscillator natural frequency");
    gen_cmd->add_option("--zeta", gen.zeta, "oscillator damping ratio");
    gen_cmd->add_option("--mu", gen.mu, "van der Pol nonlinearity");
    gen_cmd->add_option("--a-matrix,--a_matrix", gen.a_matrix, "row-major matrix for --system linear")
        ->delimiter(',');
    gen_cmd->add_option("--init-scale,--init_scale", gen.init_scale,
                        "initial states are uniform in [-s, s]");
    gen_cmd->add_option("--out", gen.out, "output KTS1 path")->required();

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train an ensemble");
    add_train_options(train_cmd, train);
    train_cmd->add_option("--resume", train.resume, "checkpoint to resume from");

    EvaluateArgs eval;
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt,--checkpoint", eval.ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--data", eval.data, "KTS1 dataset path")->required();
    eval_cmd->add_option("--horizon", eval.horizon, "forecast horizon (0 = full)");
    eval_cmd->add_option("--series", eval.series, "series slice 'a:b' or 'all'");
    eval_cmd->add_option("--bins", eval.bins, "spread-skill bin count")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--out", eval.out, "directory for report.json and bins.csv");

    ForecastArgs fc;
    CLI::App* fc_cmd = app.add_subcommand("forecast", "forecast one series from t = 0");
    fc_cmd->add_option("--ckpt,--checkpoint", fc.ckpt, "checkpoint path")->required();
    fc_cmd->add_option("--data", fc.data, "KTS1 dataset path")->required();
    fc_cmd->add_option("--series", fc.series, "series index");
    fc_cmd->add_option("--horizon", fc.horizon, "forecast horizon (0 = full)");
    fc_cmd->add_option("--out", fc.out, "output CSV path")->required();
    fc_cmd->add_option("--svg", fc.svg, "optional band-plot SVG path");

    SweepArgs sweep;
    CLI::App* sweep_cmd = app.add_subcommand("sweep", "train and evaluate across lambda values");
    add_train_options(sweep_cmd, sweep.train);
    sweep_cmd
        ->add_option("--eval-data,--eval_data", sweep.eval_data,
                     "held-out KTS1 dataset for the transfer task")
        ->required();
    sweep_cmd->add_option("--lambdas", sweep.lambdas, "lambda values to sweep")->delimiter(',');
    sweep_cmd
        ->add_option("--eval-horizon,--eval_horizon,--horizon", sweep.train.cfg.horizon,
                     "evaluation horizon (0 = full)")
        ->check(CLI::NonNegativeNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kuq::exit_usage;
    }

    try {
        if (train_cmd->parsed() && !train.config.empty()) {
            apply_json_config(train_cmd, train.config);
        }
        if (sweep_cmd->parsed() && !sweep.train.config.empty()) {
            apply_json_config(sweep_cmd, sweep.train.config);
        }
        if (gen_cmd->parsed()) run_gen_data(gen);
        if (train_cmd->parsed()) run_train(train);
        if (eval_cmd->parsed()) run_evaluate(eval);
        if (fc_cmd->parsed()) run_forecast(fc);
        if (sweep_cmd->parsed()) run_sweep(sweep);
    } catch (const kuq::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kuq::exit_usage;
    } catch (const kuq::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kuq::exit_usage;
    } catch (const kuq::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kuq::exit_numeric;
    } catch (const kuq::Error& e) {
        // ParseError, IoError, ShapeError: bad or incompatible data.
        std::cerr << "data error: " << e.what() << "\n";
        return kuq::exit_data;
    }
    return kuq::exit_ok;
}
