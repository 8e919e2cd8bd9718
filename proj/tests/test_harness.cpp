#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fednull/error.hpp"
#include "fednull/experiment.hpp"

using namespace fednull;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "fednull_test_harness" / name;
    fs::remove_all(dir);
    return dir;
}

ExperimentConfig smoke_config(const std::string& name) {
    ExperimentConfig c;
    c.clients = 2;
    c.rounds = 2;
    c.local_epochs = 1;
    c.samples_per_client = 8;
    c.pretrain_samples = 8;
    c.pretrain_epochs = 10;
    c.output_dir = scratch(name);
    return c;
}

ExperimentConfig error_kind_probe(const std::string& text, ErrorKind expected) {
    try {
        return parse_config(text);
    } catch (const Error& e) {
        CHECK(e.kind() == expected);
        throw;
    }
}

}  // namespace

TEST_CASE("round CSV header is byte exact") {
    CHECK(round_csv_header(4) ==
          "round,client_id,train_loss,psnr,ssim,nmse,scalars_up,scalars_down,r_layer_0,r_layer_1,r_layer_2,r_layer_3");
    CHECK(round_csv_header(1) == "round,client_id,train_loss,psnr,ssim,nmse,scalars_up,scalars_down,r_layer_0");
}

TEST_CASE("config round-trips through its text form") {
    CHECK(parse_config(serialize_config(ExperimentConfig{})) == ExperimentConfig{});

    ExperimentConfig c;
    c.dims.embed_dim = 24;
    c.dims.layers = 3;
    c.activation = Activation::Identity;
    c.clients = 7;
    c.train_fraction = 0.1 + 0.2;
    c.accelerations = {2.5, 3.75};
    c.noise_stds = {1e-17, 0.3};
    c.held_out = {5.0, 0.125, 0.3333333333333333, -0.1};
    c.learning_rate = 1.0 / 3.0;
    c.gamma_percent = 66.6;
    c.mode = TrainingMode::FedAvgFullFinetune;
    c.projection_target = ProjectionTarget::Prompt;
    c.train_seed = 0xFFFFFFFFFFFFFFFFULL;
    c.count_basis_scalars = true;
    c.fft_momentum = 0.9;
    c.fft_from_scratch = true;
    c.output_dir = "some dir/with spaces";
    CHECK(parse_config(serialize_config(c)) == c);
    CHECK(serialize_config(parse_config(serialize_config(c))) == serialize_config(c));
}

TEST_CASE("config parsing accepts comments and rejects bad input") {
    const ExperimentConfig c = parse_config("# comment\n[federation]\nrounds = 5 # trailing\n\n[model]\nlayers=2\n");
    CHECK(c.rounds == 5);
    CHECK(c.dims.layers == 2);

    CHECK_THROWS_AS(error_kind_probe("[federation]\nbogus = 1\n", ErrorKind::ConfigError), Error);
    CHECK_THROWS_AS(error_kind_probe("[federation]\nrounds = five\n", ErrorKind::ConfigError), Error);
    CHECK_THROWS_AS(error_kind_probe("[federation]\nmode = sgd\n", ErrorKind::ConfigError), Error);
    CHECK_THROWS_AS(error_kind_probe("[federation\nrounds = 1\n", ErrorKind::ConfigError), Error);
    CHECK_THROWS_AS(error_kind_probe("rounds 1\n", ErrorKind::ConfigError), Error);

    ExperimentConfig bad;
    bad.gamma_percent = 120;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = {};
    bad.rounds = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_THROWS_AS(load_config("/nonexistent/fednull.ini"), Error);
}

TEST_CASE("config hash and master seed") {
    const ExperimentConfig a;
    const std::string h = config_hash(a);
    CHECK(h.size() == 16);
    CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
    CHECK(config_hash(a) == h);
    ExperimentConfig b = a;
    b.rounds = 21;
    CHECK(config_hash(b) != h);

    ExperimentConfig s1, s2;
    apply_master_seed(s1, 5);
    apply_master_seed(s2, 5);
    CHECK(s1 == s2);
    CHECK(s1.data_seed != s1.train_seed);
    CHECK(s1.data_seed != s1.model_seed);
}

TEST_CASE("protocol lists cycle over clients") {
    ExperimentConfig c;
    c.accelerations = {2.0, 4.0};
    c.noise_stds = {0.0};
    CHECK(c.protocol_for(0).acceleration == 2.0);
    CHECK(c.protocol_for(3).acceleration == 4.0);
    CHECK(c.protocol_for(3).noise_std == 0.0);
}

TEST_CASE("synth_clients") {
    ExperimentConfig c;
    c.clients = 3;
    c.samples_per_client = 10;
    const SyntheticFederation a = synth_clients(c, 3);
    const SyntheticFederation b = synth_clients(c, 3);
    REQUIRE(a.clients.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(a.clients[k].train_pairs.size() == 7);
        CHECK(a.clients[k].test_pairs.size() == 3);
        for (std::size_t i = 0; i < 7; ++i) {
            CHECK(a.clients[k].train_pairs[i].x == b.clients[k].train_pairs[i].x);
            CHECK(a.clients[k].train_pairs[i].y == b.clients[k].train_pairs[i].y);
        }
        CHECK(std::abs(static_cast<double>(a.clients[k].mask.kept_count()) - 16.0 / c.accelerations[k]) <= 1.0);
    }
    CHECK(a.held_out.id == 3);
    for (std::size_t k = 0; k < 3; ++k) CHECK_FALSE(c.protocol_for(k) == c.held_out);

    const SyntheticFederation other = synth_clients(c, 4);
    CHECK_FALSE(other.clients[0].train_pairs[0].y == a.clients[0].train_pairs[0].y);

    c.clients = 1;
    const SyntheticFederation one = synth_clients(c, 3);
    CHECK(one.clients[0].train_pairs.size() == 7);
    CHECK(one.clients[0].test_pairs.size() == 3);

    c.samples_per_client = 1;
    try {
        synth_clients(c, 3);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidInput);
    }
}

TEST_CASE("ground truth fields are smooth and normalized") {
    Rng rng(1);
    const Image img = gaussian_blob_field(16, rng);
    CHECK(max_abs(img.pixels()) == doctest::Approx(1.0).epsilon(1e-15));
    for (double v : img.pixels().values()) CHECK(v >= 0.0);
}

TEST_CASE("smoke run writes every artifact quickly") {
    const ExperimentConfig c = smoke_config("smoke");
    const auto t0 = std::chrono::steady_clock::now();
    const RunArtifact art = run_experiment(c);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(seconds < 10.0);

    CHECK(fs::exists(art.round_csv));
    CHECK(fs::exists(art.initial_csv));
    CHECK(fs::exists(art.summary));
    CHECK(fs::exists(art.config_snapshot));
    CHECK_FALSE(art.plot.has_value());
    CHECK_FALSE(fs::exists(c.output_dir / "psnr_by_round.svg"));
    CHECK(art.checkpoints.size() == 3);
    for (const auto& p : art.checkpoints) CHECK(fs::exists(p));

    const std::string csv = slurp(art.round_csv);
    CHECK(csv.substr(0, csv.find('\n')) == round_csv_header(c.dims.layers));
    CHECK(count_lines(csv) == 1 + 2 * 2);
    const std::string summary = slurp(art.summary);
    CHECK(summary.find(config_hash(c)) != std::string::npos);
    CHECK(summary.find("\"forgetting_gap\"") != std::string::npos);
    CHECK(summary.find("\"out_of_federation\"") != std::string::npos);
    CHECK(load_config(art.config_snapshot) == c);

    const PromptSet last = load_prompts(art.checkpoints.back());
    CHECK(last == art.state.global_prompts);
}

TEST_CASE("single round single client gives one data row") {
    ExperimentConfig c = smoke_config("z1k1");
    c.clients = 1;
    c.rounds = 1;
    const RunArtifact art = run_experiment(c);
    CHECK(count_lines(slurp(art.round_csv)) == 2);
}

TEST_CASE("plot flag gates the SVG") {
    const ExperimentConfig c = smoke_config("plot");
    RunOptions opts;
    opts.plot = true;
    const RunArtifact art = run_experiment(c, opts);
    REQUIRE(art.plot.has_value());
    const std::string svg = slurp(*art.plot);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("<polyline") != std::string::npos);
}

TEST_CASE("rerun from the snapshot reproduces the CSV byte for byte") {
    const ExperimentConfig c = smoke_config("rerun_a");
    const RunArtifact first = run_experiment(c);
    ExperimentConfig again = load_config(first.config_snapshot);
    again.output_dir = scratch("rerun_b");
    again.threads = 3;
    const RunArtifact second = run_experiment(again);
    CHECK(slurp(first.round_csv) == slurp(second.round_csv));
    CHECK(slurp(first.initial_csv) == slurp(second.initial_csv));
}

TEST_CASE("mode sweep shares the round-0 evaluation") {
    std::vector<std::string> initial;
    for (TrainingMode mode : {TrainingMode::FedAvgFullFinetune, TrainingMode::PromptOnly, TrainingMode::FedPR}) {
        ExperimentConfig c = smoke_config(std::string("modes_") + std::string(to_string(mode)));
        c.mode = mode;
        const RunArtifact art = run_experiment(c);
        initial.push_back(slurp(art.initial_csv));
        CHECK(count_lines(initial.back()) == 1 + c.clients);
    }
    CHECK(initial[0] == initial[1]);
    CHECK(initial[1] == initial[2]);
}

TEST_CASE("gamma sweep examples") {
    ExperimentConfig c = smoke_config("gamma");
    c.rounds = 3;
    const Backbone bb = prepare_backbone(c);

    const double full[] = {100.0};
    const auto rows = gamma_sweep(c, full, &bb);
    ExperimentConfig po = c;
    po.mode = TrainingMode::PromptOnly;
    po.gamma_percent = 100;
    RunOptions opts;
    opts.write_outputs = false;
    opts.backbone = &bb;
    const RunArtifact po_run = run_experiment(po, opts);
    CHECK(rows[0].in_federation == po_run.final_eval.in_federation_mean());
    CHECK(rows[0].mean_residual_ratio == 1.0);

    const double zero[] = {0.0};
    const auto frozen = gamma_sweep(c, zero, &bb);
    ExperimentConfig one = c;
    one.rounds = 1;
    one.gamma_percent = 0;
    const RunArtifact one_round = run_experiment(one, opts);
    CHECK(frozen[0].in_federation == one_round.final_eval.in_federation_mean());
    CHECK(frozen[0].mean_residual_ratio == 0.0);

    const double bad[] = {20.0, 120.0};
    CHECK_THROWS_AS(gamma_sweep(c, bad, &bb), Error);

    const std::string table = format_gamma_table(rows);
    CHECK(table.rfind("gamma,psnr,ssim,nmse", 0) == 0);
    CHECK(count_lines(table) == 2);
}

TEST_CASE("residual ratio strictly increases with gamma for a fixed spectrum") {
    const double values[] = {5, 4, 3, 2, 1};
    const auto eig = eigendecompose(Matrix::diagonal(values));
    double prev = -1.0;
    for (double g : {20.0, 40.0, 60.0, 80.0, 100.0}) {
        const double r = select_null_basis(eig, g).residual_ratio;
        CHECK(r > prev);
        prev = r;
    }
}

TEST_CASE("rounds sweep mirrors the run history") {
    const ExperimentConfig c = smoke_config("rounds");
    RunOptions opts;
    opts.write_outputs = false;
    const RunArtifact art = run_experiment(c, opts);
    const auto rows = rounds_sweep(art);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].in_federation == art.final_eval.in_federation_mean());
    CHECK(rows[1].out_of_federation == *art.final_eval.out_of_federation);
    CHECK(count_lines(format_rounds_table(rows)) == 3);
}

TEST_CASE("report writing surfaces I/O errors") {
    ExperimentConfig c = smoke_config("ioerr");
    const fs::path blocker = scratch("blocker");
    fs::create_directories(blocker.parent_path());
    std::ofstream(blocker) << "file, not a directory";
    c.output_dir = blocker / "run";
    try {
        run_experiment(c);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::IoError);
        CHECK(std::string(e.what()).find(blocker.string()) != std::string::npos);
    }
}

TEST_CASE("line chart markup") {
    const Series s[] = {{"a", {{0, 1}, {1, 2}}}, {"b", {{0, 2}, {1, 1}}}};
    const std::string svg = render_line_chart("t", "x", "y", s);
    CHECK(svg.find("</svg>") != std::string::npos);
    std::size_t n = 0;
    for (std::size_t pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++n;
    CHECK(n == 2);
    CHECK(render_line_chart("empty", "x", "y", {}).find("<svg") == 0);
}
