#include "fednull/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fednull/error.hpp"

namespace fednull {
namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

nlohmann::json report_json(const MetricReport& r) {
    return {{"psnr", r.psnr}, {"ssim", r.ssim}, {"nmse", r.nmse}};
}

std::vector<std::vector<double>> loss_history(const RunArtifact& a) {
    std::vector<std::vector<double>> h;
    h.push_back(a.initial_eval.in_federation_loss);
    for (const auto& rec : a.state.history) {
        std::vector<double> row;
        for (const auto& c : rec.clients) row.push_back(c.eval_loss);
        h.push_back(std::move(row));
    }
    return h;
}

void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw_io("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw_io("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw_io("write failed: " + path.string());
}

std::string round_csv_header(std::size_t layers) {
    std::string h = "round,client_id,train_loss,psnr,ssim,nmse,scalars_up,scalars_down";
    for (std::size_t i = 0; i < layers; ++i) h += ",r_layer_" + std::to_string(i);
    return h;
}

Backbone prepare_backbone(const ExperimentConfig& config) {
    config.validate();
    const bool scratch = config.mode == TrainingMode::FedAvgFullFinetune && config.fft_from_scratch;
    if (scratch || config.pretrain_epochs == 0)
        return Backbone::random(config.dims, config.model_seed, config.activation);
    const std::vector<Sample> source = synth_source(config, derive_seed(config.data_seed, {0x7072}));
    return pretrain_backbone(source, config.dims, config.pretrain_epochs, config.pretrain_lr,
                             config.model_seed, config.activation);
}

std::string format_round_rows(const FederationState& state) {
    std::string out;
    for (const auto& rec : state.history) {
        for (const auto& c : rec.clients) {
            out += std::to_string(rec.round) + ',' + std::to_string(c.client_id) + ',' +
                   num(c.train_loss) + ',' + num(c.eval.psnr) + ',' + num(c.eval.ssim) + ',' +
                   num(c.eval.nmse) + ',' + std::to_string(rec.scalars_up) + ',' +
                   std::to_string(rec.scalars_down);
            for (double r : rec.residual_ratios) out += ',' + num(r);
            out += '\n';
        }
    }
    return out;
}

std::string format_initial_rows(const EvaluationReport& eval, std::span<const ClientShard> clients,
                                std::size_t layers) {
    std::string out;
    for (std::size_t k = 0; k < clients.size(); ++k) {
        const auto& r = eval.in_federation[k];
        out += "0," + std::to_string(clients[k].id) + ",0," + num(r.psnr) + ',' + num(r.ssim) + ',' +
               num(r.nmse) + ",0,0";
        for (std::size_t i = 0; i < layers; ++i) out += ",0";
        out += '\n';
    }
    return out;
}

RunArtifact run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    RunArtifact art;
    art.config = config;
    art.directory = config.output_dir;

    const SyntheticFederation data = synth_clients(config, config.data_seed);
    const Backbone backbone = options.backbone ? *options.backbone : prepare_backbone(config);

    FederationConfig fc = config.federation();
    art.state = FederationState::initial(backbone, config.mode);
    art.initial_eval = evaluate(art.state, data.clients, &data.held_out);

    if (options.write_outputs) {
        ensure_directory(art.directory);
        if (options.checkpoints) {
            const auto path = art.directory / "backbone_initial.fnpm";
            save_backbone(path, backbone);
            art.checkpoints.push_back(path);
        }
    }

    for (int z = 0; z < config.rounds; ++z) {
        art.state = server_round(std::move(art.state), data.clients, &data.held_out, fc);
        if (options.write_outputs && options.checkpoints) {
            char name[48];
            std::snprintf(name, sizeof name, "prompts_round_%03d.fnpm", art.state.round);
            const auto path = art.directory / name;
            save_prompts(path, art.state.global_prompts);
            art.checkpoints.push_back(path);
        }
    }
    if (options.write_outputs && options.checkpoints && config.mode == TrainingMode::FedAvgFullFinetune) {
        const auto path = art.directory / "backbone_final.fnpm";
        save_backbone(path, art.state.backbone);
        art.checkpoints.push_back(path);
    }

    art.final_eval = evaluate(art.state, data.clients, &data.held_out);
    const auto history = loss_history(art);
    art.forgetting = forgetting_gap(history);

    if (options.write_outputs) emit_report(art, options.plot);
    return art;
}

void emit_report(RunArtifact& art, bool plot) {
    ensure_directory(art.directory);
    const std::size_t layers = art.config.dims.layers;
    const std::string header = round_csv_header(layers) + '\n';

    art.round_csv = art.directory / "rounds.csv";
    write_text_file(art.round_csv, header + format_round_rows(art.state));

    art.initial_csv = art.directory / "initial_eval.csv";
    {
        std::vector<ClientShard> ids;
        for (std::size_t k = 0; k < art.initial_eval.in_federation.size(); ++k) {
            ClientShard s;
            s.id = static_cast<int>(k);
            ids.push_back(std::move(s));
        }
        write_text_file(art.initial_csv, header + format_initial_rows(art.initial_eval, ids, layers));
    }

    art.config_snapshot = art.directory / "config.ini";
    write_text_file(art.config_snapshot, serialize_config(art.config));

    nlohmann::ordered_json summary;
    summary["config_hash"] = config_hash(art.config);
    summary["mode"] = std::string(to_string(art.config.mode));
    summary["rounds"] = art.state.round;
    summary["clients"] = art.config.clients;
    summary["in_federation_mean"] = report_json(art.final_eval.in_federation_mean());
    if (art.final_eval.out_of_federation)
        summary["out_of_federation"] = report_json(*art.final_eval.out_of_federation);
    summary["initial_in_federation_mean"] = report_json(art.initial_eval.in_federation_mean());
    summary["forgetting_gap"] = art.forgetting;
    summary["communication"] = {
        {"per_round_scalars_up", art.state.ledger.per_round_scalars_up},
        {"per_round_scalars_down", art.state.ledger.per_round_scalars_down},
        {"total_scalars", art.state.ledger.total_scalars},
        {"trainable_scalars", art.state.ledger.trainable_scalars},
    };
    if (!art.state.history.empty()) {
        nlohmann::ordered_json rr = nlohmann::ordered_json::array();
        for (double r : art.state.history.back().residual_ratios) rr.push_back(r);
        summary["final_residual_ratios"] = rr;
    }
    summary["round_csv"] = art.round_csv.filename().string();
    nlohmann::ordered_json ck = nlohmann::ordered_json::array();
    for (const auto& p : art.checkpoints) ck.push_back(p.filename().string());
    summary["checkpoints"] = ck;

    art.summary = art.directory / "summary.json";
    write_text_file(art.summary, summary.dump(2) + '\n');

    if (plot) {
        Series s{"in-federation PSNR", {}};
        s.points.emplace_back(0.0, art.initial_eval.in_federation_mean().psnr);
        for (const auto& row : rounds_sweep(art))
            s.points.emplace_back(row.round, row.in_federation.psnr);
        Series series[] = {s};
        art.plot = art.directory / "psnr_by_round.svg";
        write_text_file(*art.plot, render_line_chart("Mean PSNR per round", "round", "PSNR (dB)", series));
    }
}

std::vector<GammaSweepRow> gamma_sweep(const ExperimentConfig& config, std::span<const double> gammas,
                                       const Backbone* backbone) {
    for (double g : gammas)
        if (!(g >= 0.0 && g <= 100.0)) throw_invalid("gamma_sweep: gamma outside [0, 100]");
    ExperimentConfig base = config;
    base.mode = TrainingMode::FedPR;
    const Backbone shared = backbone ? *backbone : prepare_backbone(base);

    std::vector<GammaSweepRow> rows;
    for (double g : gammas) {
        ExperimentConfig c = base;
        c.gamma_percent = g;
        RunOptions opts;
        opts.write_outputs = false;
        opts.backbone = &shared;
        const RunArtifact art = run_experiment(c, opts);
        GammaSweepRow row;
        row.gamma = g;
        row.in_federation = art.final_eval.in_federation_mean();
        if (art.final_eval.out_of_federation) row.out_of_federation = *art.final_eval.out_of_federation;
        const auto& rr = art.state.history.back().residual_ratios;
        double sum = 0.0;
        for (double r : rr) sum += r;
        row.mean_residual_ratio = rr.empty() ? 0.0 : sum / static_cast<double>(rr.size());
        rows.push_back(row);
    }
    return rows;
}

std::string format_gamma_table(std::span<const GammaSweepRow> rows) {
    std::string out = "gamma,psnr,ssim,nmse,out_psnr,out_ssim,out_nmse,mean_r\n";
    for (const auto& r : rows) {
        out += num(r.gamma) + ',' + num(r.in_federation.psnr) + ',' + num(r.in_federation.ssim) + ',' +
               num(r.in_federation.nmse) + ',' + num(r.out_of_federation.psnr) + ',' +
               num(r.out_of_federation.ssim) + ',' + num(r.out_of_federation.nmse) + ',' +
               num(r.mean_residual_ratio) + '\n';
    }
    return out;
}

std::vector<RoundsSweepRow> rounds_sweep(const RunArtifact& artifact) {
    std::vector<RoundsSweepRow> rows;
    for (const auto& rec : artifact.state.history) {
        std::vector<MetricReport> reports;
        for (const auto& c : rec.clients) reports.push_back(c.eval);
        RoundsSweepRow row;
        row.round = rec.round;
        row.in_federation = mean_report(reports);
        if (rec.out_of_federation) row.out_of_federation = *rec.out_of_federation;
        rows.push_back(row);
    }
    return rows;
}

std::string format_rounds_table(std::span<const RoundsSweepRow> rows) {
    std::string out = "round,psnr,ssim,nmse,out_psnr,out_ssim,out_nmse\n";
    for (const auto& r : rows) {
        out += std::to_string(r.round) + ',' + num(r.in_federation.psnr) + ',' +
               num(r.in_federation.ssim) + ',' + num(r.in_federation.nmse) + ',' +
               num(r.out_of_federation.psnr) + ',' + num(r.out_of_federation.ssim) + ',' +
               num(r.out_of_federation.nmse) + '\n';
    }
    return out;
}

std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, std::span<const Series> series) {
    constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double pw = kWidth - kLeft - kRight;
    const double ph = kHeight - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double y) { return kTop + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
       << "</text>\n"
       << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\""
       << kTop + ph << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
       << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = xmin + (xmax - xmin) * t / 4.0;
        const double yv = ymin + (ymax - ymin) * t / 4.0;
        os << "<text x=\"" << sx(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
           << num(std::round(xv * 100) / 100) << "</text>\n"
           << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">"
           << num(std::round(yv * 100) / 100) << "</text>\n";
    }
    os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
       << x_label << "</text>\n"
       << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << kTop + ph / 2 << ")\">" << y_label << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kColors[i % std::size(kColors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : series[i].points) os << sx(x) << ',' << sy(y) << ' ';
        os << "\"/>\n"
           << "<text x=\"" << kLeft + 10 << "\" y=\"" << kTop + 14 + 16 * static_cast<double>(i)
           << "\" fill=\"" << color << "\">" << series[i].name << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace fednull
