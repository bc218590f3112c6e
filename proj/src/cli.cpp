#include "aspun/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "aspun/cassi.hpp"
#include "aspun/checkpoint.hpp"
#include "aspun/config.hpp"
#include "aspun/errors.hpp"
#include "aspun/fista.hpp"
#include "aspun/grad_check.hpp"
#include "aspun/io.hpp"
#include "aspun/network.hpp"
#include "aspun/training.hpp"

namespace aspun::cli {

namespace fs = std::filesystem;

std::string metric(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    io::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

config::RunConfig load_config(const std::string& path) {
    return path.empty() ? config::RunConfig{} : config::load(path);
}

struct Problem {
    std::vector<cassi::SpectralCube> train_scenes;
    std::vector<cassi::SpectralCube> eval_scenes;
    cassi::CodedMask mask;
    cassi::DispersionSpec spec;
};

constexpr std::uint64_t eval_seed_offset = 1000003;

Problem make_problem(const config::RunConfig& c) {
    Problem p{{}, {}, cassi::CodedMask::random_binary(c.scene.height, c.scene.width, c.sim.mask_seed),
              cassi::DispersionSpec{c.sim.dispersion_step, 0}};
    for (std::size_t i = 0; i < c.train_scenes; ++i) {
        auto s = c.scene;
        s.seed = c.scene.seed + i;
        p.train_scenes.push_back(train::generate_scene(s));
    }
    for (std::size_t i = 0; i < c.eval_scenes; ++i) {
        auto s = c.scene;
        s.seed = c.scene.seed + eval_seed_offset + i;
        p.eval_scenes.push_back(train::generate_scene(s));
    }
    return p;
}

struct TrainOutcome {
    std::vector<train::TrainRecord> trace;
    double baseline_psnr = 0.0;
    double train_psnr = 0.0;
    train::Evaluation held_out;
};

TrainOutcome train_run(net::Network& network, const config::RunConfig& c, const Problem& p, std::ostream& out,
                       bool verbose) {
    TrainOutcome o;
    const auto& scene = p.train_scenes.front();
    const auto y = cassi::forward(scene, p.mask, p.spec);
    o.baseline_psnr = train::psnr(cassi::shift_back(y, p.spec, scene.channels()), scene);
    train::TrainData data{p.train_scenes, p.eval_scenes, p.mask, p.spec};
    o.trace = train::train(network, c.train, data, [&](const train::TrainRecord& r) {
        if (!verbose || !r.psnr) return;
        out << "step " << r.step << " loss " << r.loss << " lr " << r.lr << " psnr " << metric(*r.psnr) << " ssim "
            << metric(*r.ssim) << '\n';
    });
    o.train_psnr = train::psnr(network.reconstruct(y, p.mask, p.spec), scene);
    if (!p.eval_scenes.empty()) o.held_out = train::evaluate(network, p.eval_scenes, p.mask, p.spec);
    return o;
}

void apply_switch(config::RunConfig& c, const std::string& sw) {
    const auto eq = sw.find('=');
    if (eq == std::string::npos) throw ConfigError("switch must look like NAME=VALUE: " + sw);
    std::string key = sw.substr(0, eq);
    if (key.find('.') == std::string::npos) key = "net." + key;
    config::set_value(c, key, sw.substr(eq + 1));
}

// ---- commands ----------------------------------------------------------------------

struct SimulateArgs {
    std::string cube, mask, out;
    std::size_t d = 1;
    double noise = 0.0;
    std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    const auto cube = io::load_cube(a.cube);
    const auto mask = io::load_mask(a.mask);
    const cassi::DispersionSpec spec{a.d, 0};
    const auto y = cassi::simulate(cube, mask, spec, a.noise, a.seed);
    io::save_measurement(a.out, y);
    out << "cube " << cube.height() << "x" << cube.width() << "x" << cube.channels() << " -> measurement "
        << y.height() << "x" << y.width() << " (d=" << a.d << ")\n";
    return ok;
}

struct ReconstructArgs {
    std::string algo = "fista", meas, mask, config, checkpoint, out, trace;
    std::optional<std::size_t> d, channels;
};

int cmd_reconstruct(const ReconstructArgs& a, std::ostream& out, std::ostream& err) {
    const auto cfg = load_config(a.config);
    const cassi::DispersionSpec spec{a.d.value_or(cfg.sim.dispersion_step), 0};
    if (a.algo == "aspun" && a.checkpoint.empty()) {
        err << "reconstruct --algo aspun requires --checkpoint\n";
        return usage_error;
    }
    const auto y = io::load_measurement(a.meas);
    const auto mask = io::load_mask(a.mask);
    if (a.algo == "fista") {
        const std::size_t C = a.channels.value_or(cfg.net.spectral_channels);
        const auto result = fista::solve(y, mask, spec, C, cfg.solver);
        io::save_cube(a.out, result.x);
        if (!a.trace.empty()) {
            std::ostringstream csv;
            csv.precision(12);
            csv << "iteration,objective\n";
            for (std::size_t i = 0; i < result.objective_trace.size(); ++i) {
                csv << i + 1 << ',' << result.objective_trace[i] << '\n';
            }
            write_text(a.trace, csv.str());
        }
        out << "fista iterations " << result.objective_trace.size() << " step " << result.step_size
            << " objective " << (result.objective_trace.empty() ? 0.0 : result.objective_trace.back()) << '\n';
        return ok;
    }
    auto ncfg = cfg.net;
    if (a.channels) ncfg.spectral_channels = *a.channels;
    net::Network network(ncfg);
    net::load_checkpoint(a.checkpoint, network.parameters());
    const auto x = network.reconstruct(y, mask, spec);
    x.check_finite();
    io::save_cube(a.out, x);
    out << "aspun stages " << ncfg.stages << " -> cube " << x.height() << "x" << x.width() << "x" << x.channels()
        << '\n';
    return ok;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
              std::ostream& out) {
    auto cfg = load_config(config_path);
    if (seed) cfg.train.seed = *seed;
    const Problem p = make_problem(cfg);
    net::Network network(cfg.net);
    const auto o = train_run(network, cfg, p, out, true);
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    net::save_checkpoint(dir / "checkpoint.aspw", network.parameters());
    train::write_trace_csv(dir / "trace.csv", o.trace);
    write_text(dir / "config.txt", config::format(cfg));
    io::save_mask(dir / "mask.hsc", p.mask);
    out << "parameters " << network.parameters().scalar_count() << '\n';
    out << "shift_back psnr " << metric(o.baseline_psnr) << '\n';
    out << "train psnr " << metric(o.train_psnr) << '\n';
    if (!p.eval_scenes.empty()) {
        out << "held-out psnr " << metric(o.held_out.psnr) << " ssim " << metric(o.held_out.ssim) << '\n';
    }
    return ok;
}

int cmd_eval(const std::string& pred, const std::string& gt, std::ostream& out) {
    const auto a = io::load_cube(pred);
    const auto b = io::load_cube(gt);
    out << "PSNR " << metric(train::psnr(a, b)) << '\n';
    out << "SSIM " << metric(train::ssim(a, b)) << '\n';
    return ok;
}

int cmd_gradcheck(const std::string& op, std::ostream& out, std::ostream& err) {
    const auto& cases = gradcheck::suite();
    bool matched = false, all_pass = true;
    for (const auto& c : cases) {
        if (op != "all" && c.name != op) continue;
        matched = true;
        const auto r = c.run();
        const bool pass = r.max_rel_error < c.tolerance();
        all_pass = all_pass && pass;
        char line[256];
        std::snprintf(line, sizeof line, "%-24s %s max_rel_err=%.3e tol=%.0e probes=%zu worst=%s", c.name.c_str(),
                      pass ? "PASS" : "FAIL", r.max_rel_error, c.tolerance(), r.probes, r.worst_input.c_str());
        out << line << '\n';
    }
    if (!matched) {
        err << "unknown op '" << op << "'; known:";
        for (const auto& c : cases) err << ' ' << c.name;
        err << '\n';
        return usage_error;
    }
    return all_pass ? ok : numerical_failure;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& switches, bool topology_only,
               std::ostream& out) {
    const auto base = load_config(config_path);
    auto ablated = base;
    for (const auto& s : switches) apply_switch(ablated, s);
    ablated.validate();
    net::Network full(base.net), variant(ablated.net);
    const std::size_t n_full = full.parameters().scalar_count();
    const std::size_t n_var = variant.parameters().scalar_count();
    out << "parameters full " << n_full << " ablated " << n_var << " delta "
        << static_cast<long long>(n_var) - static_cast<long long>(n_full) << '\n';
    if (topology_only) return ok;
    const Problem p = make_problem(base);
    const auto a = train_run(full, base, p, out, false);
    const auto b = train_run(variant, ablated, p, out, false);
    const bool held_out = !p.eval_scenes.empty();
    const double pa = held_out ? a.held_out.psnr : a.train_psnr;
    const double pb = held_out ? b.held_out.psnr : b.train_psnr;
    out << (held_out ? "held-out" : "train") << " psnr full " << metric(pa) << " ablated " << metric(pb)
        << " delta " << metric(pb - pa) << '\n';
    if (held_out) {
        out << "held-out ssim full " << metric(a.held_out.ssim) << " ablated " << metric(b.held_out.ssim)
            << " delta " << metric(b.held_out.ssim - a.held_out.ssim) << '\n';
    }
    return ok;
}

int cmd_generate_scene(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& path,
                       std::ostream& out) {
    auto cfg = load_config(config_path);
    if (seed) cfg.scene.seed = *seed;
    const auto cube = train::generate_scene(cfg.scene);
    io::save_cube(path, cube);
    out << "scene " << cube.height() << "x" << cube.width() << "x" << cube.channels() << '\n';
    return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Coded-aperture spectral imaging: simulation, FISTA and unfolding-network reconstruction"};
    app.name("aspun");
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Simulate a coded, dispersed snapshot from an HSC1 cube");
    simulate->add_option("--cube", sim.cube)->required();
    simulate->add_option("--mask", sim.mask)->required();
    simulate->add_option("--d", sim.d, "dispersion step in pixels per channel");
    simulate->add_option("--noise", sim.noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
    simulate->add_option("--seed", sim.seed);
    simulate->add_option("--out", sim.out)->required();

    ReconstructArgs rec;
    auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct a cube from a measurement");
    reconstruct->add_option("--algo", rec.algo)->check(CLI::IsMember({"fista", "aspun"}));
    reconstruct->add_option("--meas", rec.meas)->required();
    reconstruct->add_option("--mask", rec.mask)->required();
    reconstruct->add_option("--config", rec.config);
    reconstruct->add_option("--checkpoint", rec.checkpoint);
    reconstruct->add_option("--out", rec.out)->required();
    reconstruct->add_option("--trace", rec.trace, "CSV objective trace (fista)");
    reconstruct->add_option("--d", rec.d, "overrides sim.d");
    reconstruct->add_option("--channels", rec.channels, "overrides net.spectral_channels");

    std::string train_config, out_dir;
    std::optional<std::uint64_t> train_seed;
    auto* train_cmd = app.add_subcommand("train", "Train on synthetic scenes");
    train_cmd->add_option("--config", train_config);
    train_cmd->add_option("--out-dir", out_dir)->required();
    train_cmd->add_option("--seed", train_seed, "overrides train.seed");

    std::string pred, gt;
    auto* eval = app.add_subcommand("eval", "PSNR and SSIM between two HSC1 cubes");
    eval->add_option("--pred", pred)->required();
    eval->add_option("--gt", gt)->required();

    std::string op = "all";
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gradcheck_cmd->add_option("--op", op, "all or one registered name");

    std::string ablate_config;
    std::vector<std::string> switches;
    bool topology_only = false;
    auto* ablate = app.add_subcommand("ablate", "Train full and switched configs and report the metric delta");
    ablate->add_option("--config", ablate_config);
    ablate->add_option("--switch", switches, "NAME=VALUE, e.g. use_gla=off")->required();
    ablate->add_flag("--topology-only", topology_only, "report parameter counts without training");

    std::string scene_config, scene_out;
    std::optional<std::uint64_t> scene_seed;
    auto* gen_scene = app.add_subcommand("generate-scene", "Write a synthetic HSC1 scene");
    gen_scene->add_option("--config", scene_config);
    gen_scene->add_option("--seed", scene_seed, "overrides scene.seed");
    gen_scene->add_option("--out", scene_out)->required();

    std::size_t mask_h = 32, mask_w = 32;
    std::uint64_t mask_seed = 7;
    std::string mask_out;
    bool mask_ones = false;
    auto* gen_mask = app.add_subcommand("generate-mask", "Write a random binary (or all-ones) HSC1 mask");
    gen_mask->add_option("--height", mask_h);
    gen_mask->add_option("--width", mask_w);
    gen_mask->add_option("--seed", mask_seed);
    gen_mask->add_flag("--ones", mask_ones);
    gen_mask->add_option("--out", mask_out)->required();

    std::string pgm_cube, pgm_out;
    std::size_t band = 0;
    double lo = 0.0, hi = 1.0;
    auto* pgm = app.add_subcommand("export-pgm", "Write one band as 8-bit PGM");
    pgm->add_option("--cube", pgm_cube)->required();
    pgm->add_option("--band", band);
    pgm->add_option("--lo", lo);
    pgm->add_option("--hi", hi);
    pgm->add_option("--out", pgm_out)->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        if (!reversed.empty()) reversed.pop_back();
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }

    try {
        if (*simulate) return cmd_simulate(sim, out);
        if (*reconstruct) return cmd_reconstruct(rec, out, err);
        if (*train_cmd) return cmd_train(train_config, out_dir, train_seed, out);
        if (*eval) return cmd_eval(pred, gt, out);
        if (*gradcheck_cmd) return cmd_gradcheck(op, out, err);
        if (*ablate) return cmd_ablate(ablate_config, switches, topology_only, out);
        if (*gen_scene) return cmd_generate_scene(scene_config, scene_seed, scene_out, out);
        if (*gen_mask) {
            const auto m = mask_ones ? cassi::CodedMask::ones(mask_h, mask_w)
                                     : cassi::CodedMask::random_binary(mask_h, mask_w, mask_seed);
            io::save_mask(mask_out, m);
            out << "mask " << mask_h << "x" << mask_w << '\n';
            return ok;
        }
        if (*pgm) {
            io::export_band_pgm(pgm_out, io::load_cube(pgm_cube), band, lo, hi);
            return ok;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return usage_error;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << '\n';
        return format_error;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return numerical_failure;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << '\n';
        return usage_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return failure;
    }
    return usage_error;
}

}  // namespace aspun::cli
