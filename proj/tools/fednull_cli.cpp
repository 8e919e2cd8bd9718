#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fednull/error.hpp"
#include "fednull/experiment.hpp"

namespace {

using namespace fednull;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct CommonFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string mode;
    double gamma = -1.0;
    std::string out;
    bool plot = false;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "Experiment config file")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>(
        "--seed", [&f](const std::uint64_t& s) { f.seed = s, f.seed_set = true; },
        "Master seed for data, model and training");
    sub->add_option("--mode", f.mode, "fedavg_fft | prompt_only | fedpr");
    sub->add_option("--gamma", f.gamma, "Null-space ratio in percent")->check(CLI::Range(0.0, 100.0));
    sub->add_option("--out", f.out, "Output directory");
    sub->add_flag("--plot", f.plot, "Also write an SVG chart");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
    ExperimentConfig c = f.config_path.empty() ? ExperimentConfig{} : load_config(f.config_path);
    if (f.seed_set) apply_master_seed(c, f.seed);
    if (!f.mode.empty()) {
        const auto m = parse_training_mode(f.mode);
        if (!m) throw_config("unknown mode '" + f.mode + "'");
        c.mode = *m;
    }
    if (f.gamma >= 0.0) c.gamma_percent = f.gamma;
    if (!f.out.empty()) c.output_dir = f.out;
    if (const char* env = std::getenv("FEDNULL_THREADS"); env && *env) {
        char* end = nullptr;
        const unsigned long n = std::strtoul(env, &end, 10);
        if (*end != '\0') throw_config(std::string("FEDNULL_THREADS is not a number: ") + env);
        c.threads = static_cast<unsigned>(n);
    }
    c.validate();
    return c;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw_io("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_shard(const std::filesystem::path& dir, const ClientShard& shard) {
    ensure_dir(dir);
    auto dump = [&](const std::vector<Sample>& pairs, const char* split) {
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_%03zu_x.fnim", split, i);
            write_image(dir / name, pairs[i].x);
            std::snprintf(name, sizeof name, "%s_%03zu_y.fnim", split, i);
            write_image(dir / name, pairs[i].y);
        }
    };
    dump(shard.train_pairs, "train");
    dump(shard.test_pairs, "test");
    std::string mask;
    for (bool b : shard.mask.columns_kept) mask += b ? '1' : '0';
    write_text_file(dir / "mask.txt", mask + '\n');
}

int cmd_synth(const ExperimentConfig& c) {
    const SyntheticFederation fed = synth_clients(c, c.data_seed);
    for (const auto& s : fed.clients) write_shard(c.output_dir / ("client_" + std::to_string(s.id)), s);
    write_shard(c.output_dir / "held_out", fed.held_out);
    write_text_file(c.output_dir / "config.ini", serialize_config(c));
    std::printf("wrote %zu client shards and a held-out shard to %s\n", fed.clients.size(),
                c.output_dir.string().c_str());
    return kExitOk;
}

int cmd_pretrain(const ExperimentConfig& c) {
    ensure_dir(c.output_dir);
    const Backbone bb = prepare_backbone(c);
    const auto path = c.output_dir / "backbone.fnpm";
    save_backbone(path, bb);
    std::printf("backbone (%zu scalars) written to %s\n", bb.scalar_count(), path.string().c_str());
    return kExitOk;
}

void print_summary(const RunArtifact& art) {
    const MetricReport in = art.final_eval.in_federation_mean();
    std::printf("mode %s  rounds %d  clients %zu\n", std::string(to_string(art.config.mode)).c_str(),
                art.state.round, art.config.clients);
    std::printf("in-federation   psnr %.4f  ssim %.4f  nmse %.6f\n", in.psnr, in.ssim, in.nmse);
    if (art.final_eval.out_of_federation) {
        const MetricReport& o = *art.final_eval.out_of_federation;
        std::printf("out-federation  psnr %.4f  ssim %.4f  nmse %.6f\n", o.psnr, o.ssim, o.nmse);
    }
    std::printf("forgetting gap  %.6g\n", art.forgetting);
    std::printf("scalars total   %llu\n", static_cast<unsigned long long>(art.state.ledger.total_scalars));
}

int cmd_train(const ExperimentConfig& c, bool plot) {
    RunOptions opts;
    opts.plot = plot;
    const RunArtifact art = run_experiment(c, opts);
    print_summary(art);
    std::printf("artifacts in %s\n", art.directory.string().c_str());
    return kExitOk;
}

int cmd_evaluate(const ExperimentConfig& flags_config, const std::string& run_dir_flag) {
    const std::filesystem::path dir = run_dir_flag.empty() ? flags_config.output_dir : std::filesystem::path(run_dir_flag);
    const ExperimentConfig c = load_config(dir / "config.ini");
    char name[48];
    std::snprintf(name, sizeof name, "prompts_round_%03d.fnpm", c.rounds);
    const PromptSet prompts = load_prompts(dir / name);
    const bool fft = c.mode == TrainingMode::FedAvgFullFinetune;
    const Backbone bb = load_backbone(dir / (fft ? "backbone_final.fnpm" : "backbone_initial.fnpm"));
    const SyntheticFederation fed = synth_clients(c, c.data_seed);
    const EvaluationReport rep = evaluate(prompts, bb, fed.clients, &fed.held_out);

    nlohmann::ordered_json j;
    j["run"] = dir.string();
    nlohmann::ordered_json clients = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < rep.in_federation.size(); ++k) {
        const auto& r = rep.in_federation[k];
        clients.push_back({{"client_id", fed.clients[k].id}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"nmse", r.nmse}});
    }
    j["in_federation"] = clients;
    const MetricReport m = rep.in_federation_mean();
    j["in_federation_mean"] = {{"psnr", m.psnr}, {"ssim", m.ssim}, {"nmse", m.nmse}};
    if (rep.out_of_federation) {
        const auto& o = *rep.out_of_federation;
        j["out_of_federation"] = {{"psnr", o.psnr}, {"ssim", o.ssim}, {"nmse", o.nmse}};
    }
    std::cout << j.dump(2) << '\n';
    return kExitOk;
}

int cmd_sweep_gamma(ExperimentConfig c, const std::vector<double>& gammas, bool plot) {
    ensure_dir(c.output_dir);
    const auto rows = gamma_sweep(c, gammas);
    const std::string table = format_gamma_table(rows);
    write_text_file(c.output_dir / "gamma_sweep.csv", table);
    std::fputs(table.c_str(), stdout);
    if (plot) {
        Series in{"in-federation", {}}, out{"out-of-federation", {}};
        for (const auto& r : rows) {
            in.points.emplace_back(r.gamma, r.in_federation.psnr);
            out.points.emplace_back(r.gamma, r.out_of_federation.psnr);
        }
        const Series series[] = {in, out};
        write_text_file(c.output_dir / "gamma_sweep.svg",
                        render_line_chart("PSNR by null-space ratio", "gamma (%)", "PSNR (dB)", series));
    }
    return kExitOk;
}

int cmd_sweep_rounds(const ExperimentConfig& c, bool plot) {
    RunOptions opts;
    opts.plot = plot;
    const RunArtifact art = run_experiment(c, opts);
    const auto rows = rounds_sweep(art);
    const std::string table = format_rounds_table(rows);
    write_text_file(c.output_dir / "rounds_sweep.csv", table);
    std::fputs(table.c_str(), stdout);
    return kExitOk;
}

int cmd_report(const ExperimentConfig& c, const std::string& run_dir_flag) {
    const std::filesystem::path dir = run_dir_flag.empty() ? c.output_dir : std::filesystem::path(run_dir_flag);
    std::ifstream is(dir / "summary.json");
    if (!is) throw_io("cannot open " + (dir / "summary.json").string());
    nlohmann::ordered_json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw_io("malformed summary " + (dir / "summary.json").string() + ": " + e.what());
    }
    std::cout << j.dump(2) << '\n';
    return kExitOk;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ConfigError:
        case ErrorKind::InvalidInput: return kExitConfig;
        case ErrorKind::NumericalFailure: return kExitNumerical;
        case ErrorKind::IoError: return kExitIo;
    }
    return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated prompt tuning with null-space projection on a synthetic MRI task"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string run_dir;
    std::vector<double> gammas{20, 40, 60, 80, 100};

    auto* synth = app.add_subcommand("synth-data", "Generate client shards and the held-out shard");
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the surrogate backbone");
    auto* train = app.add_subcommand("train", "Run one federation and write its artifacts");
    auto* eval = app.add_subcommand("evaluate", "Evaluate the final checkpoint of a run");
    auto* sweep_g = app.add_subcommand("sweep-gamma", "Run fedpr once per gamma");
    auto* sweep_r = app.add_subcommand("sweep-rounds", "Per-round mean metrics of one run");
    auto* report = app.add_subcommand("report", "Print the summary of a finished run");
    for (auto* sub : {synth, pretrain, train, eval, sweep_g, sweep_r, report}) add_common(sub, flags);
    eval->add_option("--run", run_dir, "Run directory (defaults to --out)");
    report->add_option("--run", run_dir, "Run directory (defaults to --out)");
    sweep_g->add_option("--gammas", gammas, "Gamma values")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        const ExperimentConfig c = resolve_config(flags);
        if (*synth) return cmd_synth(c);
        if (*pretrain) return cmd_pretrain(c);
        if (*train) return cmd_train(c, flags.plot);
        if (*eval) return cmd_evaluate(c, run_dir);
        if (*sweep_g) return cmd_sweep_gamma(c, gammas, flags.plot);
        if (*sweep_r) return cmd_sweep_rounds(c, flags.plot);
        if (*report) return cmd_report(c, run_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "fednull: %s: %s\n", to_string(e.kind()), e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fednull: %s\n", e.what());
        return kExitIo;
    }
    return kExitOk;
}
