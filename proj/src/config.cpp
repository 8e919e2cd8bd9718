#include "fednull/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fednull/error.hpp"
#include "fednull/rng.hpp"

namespace fednull {
namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_list(const std::vector<double>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ", ";
        out += fmt_double(values[i]);
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v))
        throw_config("invalid number for '" + key + "': " + text);
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw_config("invalid unsigned integer for '" + key + "': " + text);
    return v;
}

int parse_int(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw_config("invalid integer for '" + key + "': " + text);
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw_config("invalid boolean for '" + key + "': " + text);
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
    if (out.empty()) throw_config("empty list for '" + key + "'");
    return out;
}

}  // namespace

ClientProtocol ExperimentConfig::protocol_for(std::size_t client) const {
    auto pick = [client](const std::vector<double>& v) { return v[client % v.size()]; };
    return {pick(accelerations), pick(noise_stds), pick(contrast_gains), pick(contrast_offsets)};
}

FederationConfig ExperimentConfig::federation() const {
    FederationConfig f;
    f.rounds = rounds;
    f.local_epochs = local_epochs;
    f.learning_rate = learning_rate;
    f.batch_size = batch_size;
    f.gamma_percent = gamma_percent;
    f.mode = mode;
    f.projection_target = projection_target;
    f.seed = train_seed;
    f.threads = threads;
    f.count_basis_scalars = count_basis_scalars;
    f.fft_momentum = fft_momentum;
    return f;
}

void ExperimentConfig::validate() const {
    try {
        dims.validate();
    } catch (const Error& e) {
        throw_config(e.what());
    }
    if (clients < 1) throw_config("data.clients must be >= 1");
    if (samples_per_client < 2) throw_config("data.samples_per_client must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw_config("data.train_fraction must lie in (0, 1)");
    if (!(center_fraction > 0.0 && center_fraction < 1.0))
        throw_config("data.center_fraction must lie in (0, 1)");
    if (accelerations.empty() || noise_stds.empty() || contrast_gains.empty() ||
        contrast_offsets.empty())
        throw_config("per-client protocol lists must be non-empty");
    for (double a : accelerations)
        if (!(a > 1.0)) throw_config("data.accelerations entries must exceed 1");
    for (double n : noise_stds)
        if (n < 0.0) throw_config("data.noise_stds entries must be >= 0");
    if (!(held_out.acceleration > 1.0) || held_out.noise_std < 0.0)
        throw_config("data.held_out protocol out of range");
    if (pretrain_epochs < 0) throw_config("pretrain.epochs must be >= 0");
    if (pretrain_epochs > 0 && pretrain_samples == 0) throw_config("pretrain.samples must be >= 1");
    if (!(pretrain_lr > 0.0)) throw_config("pretrain.learning_rate must be > 0");
    if (rounds < 1) throw_config("federation.rounds must be >= 1");
    if (local_epochs < 1) throw_config("federation.local_epochs must be >= 1");
    if (!(learning_rate >= 0.0)) throw_config("federation.learning_rate must be >= 0");
    if (batch_size < 1) throw_config("federation.batch_size must be >= 1");
    if (!(gamma_percent >= 0.0 && gamma_percent <= 100.0))
        throw_config("federation.gamma must lie in [0, 100]");
    if (!(fft_momentum >= 0.0 && fft_momentum < 1.0))
        throw_config("federation.fft_momentum must lie in [0, 1)");
}

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "[model]\n"
       << "image_size = " << c.dims.image_size << '\n'
       << "patch_size = " << c.dims.patch_size << '\n'
       << "embed_dim = " << c.dims.embed_dim << '\n'
       << "layers = " << c.dims.layers << '\n'
       << "prompt_tokens = " << c.dims.prompt_tokens << '\n'
       << "activation = " << to_string(c.activation) << '\n'
       << "seed = " << c.model_seed << '\n'
       << "\n[data]\n"
       << "clients = " << c.clients << '\n'
       << "samples_per_client = " << c.samples_per_client << '\n'
       << "train_fraction = " << fmt_double(c.train_fraction) << '\n'
       << "center_fraction = " << fmt_double(c.center_fraction) << '\n'
       << "accelerations = " << fmt_list(c.accelerations) << '\n'
       << "noise_stds = " << fmt_list(c.noise_stds) << '\n'
       << "contrast_gains = " << fmt_list(c.contrast_gains) << '\n'
       << "contrast_offsets = " << fmt_list(c.contrast_offsets) << '\n'
       << "held_out_acceleration = " << fmt_double(c.held_out.acceleration) << '\n'
       << "held_out_noise_std = " << fmt_double(c.held_out.noise_std) << '\n'
       << "held_out_contrast_gain = " << fmt_double(c.held_out.contrast_gain) << '\n'
       << "held_out_contrast_offset = " << fmt_double(c.held_out.contrast_offset) << '\n'
       << "seed = " << c.data_seed << '\n'
       << "\n[pretrain]\n"
       << "samples = " << c.pretrain_samples << '\n'
       << "epochs = " << c.pretrain_epochs << '\n'
       << "learning_rate = " << fmt_double(c.pretrain_lr) << '\n'
       << "\n[federation]\n"
       << "rounds = " << c.rounds << '\n'
       << "local_epochs = " << c.local_epochs << '\n'
       << "learning_rate = " << fmt_double(c.learning_rate) << '\n'
       << "batch_size = " << c.batch_size << '\n'
       << "gamma = " << fmt_double(c.gamma_percent) << '\n'
       << "mode = " << to_string(c.mode) << '\n'
       << "projection_target = " << to_string(c.projection_target) << '\n'
       << "seed = " << c.train_seed << '\n'
       << "threads = " << c.threads << '\n'
       << "count_basis_scalars = " << (c.count_basis_scalars ? "true" : "false") << '\n'
       << "fft_momentum = " << fmt_double(c.fft_momentum) << '\n'
       << "fft_from_scratch = " << (c.fft_from_scratch ? "true" : "false") << '\n'
       << "\n[output]\n"
       << "dir = " << c.output_dir.generic_string() << '\n';
    return os.str();
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        {"model.image_size", [&](auto& k, auto& v) { c.dims.image_size = parse_u64(k, v); }},
        {"model.patch_size", [&](auto& k, auto& v) { c.dims.patch_size = parse_u64(k, v); }},
        {"model.embed_dim", [&](auto& k, auto& v) { c.dims.embed_dim = parse_u64(k, v); }},
        {"model.layers", [&](auto& k, auto& v) { c.dims.layers = parse_u64(k, v); }},
        {"model.prompt_tokens", [&](auto& k, auto& v) { c.dims.prompt_tokens = parse_u64(k, v); }},
        {"model.activation",
         [&](auto& k, auto& v) {
             const auto a = parse_activation(trim(v));
             if (!a) throw_config("invalid value for '" + k + "': " + v);
             c.activation = *a;
         }},
        {"model.seed", [&](auto& k, auto& v) { c.model_seed = parse_u64(k, v); }},
        {"data.clients", [&](auto& k, auto& v) { c.clients = parse_u64(k, v); }},
        {"data.samples_per_client", [&](auto& k, auto& v) { c.samples_per_client = parse_u64(k, v); }},
        {"data.train_fraction", [&](auto& k, auto& v) { c.train_fraction = parse_double(k, v); }},
        {"data.center_fraction", [&](auto& k, auto& v) { c.center_fraction = parse_double(k, v); }},
        {"data.accelerations", [&](auto& k, auto& v) { c.accelerations = parse_list(k, v); }},
        {"data.noise_stds", [&](auto& k, auto& v) { c.noise_stds = parse_list(k, v); }},
        {"data.contrast_gains", [&](auto& k, auto& v) { c.contrast_gains = parse_list(k, v); }},
        {"data.contrast_offsets", [&](auto& k, auto& v) { c.contrast_offsets = parse_list(k, v); }},
        {"data.held_out_acceleration",
         [&](auto& k, auto& v) { c.held_out.acceleration = parse_double(k, v); }},
        {"data.held_out_noise_std", [&](auto& k, auto& v) { c.held_out.noise_std = parse_double(k, v); }},
        {"data.held_out_contrast_gain",
         [&](auto& k, auto& v) { c.held_out.contrast_gain = parse_double(k, v); }},
        {"data.held_out_contrast_offset",
         [&](auto& k, auto& v) { c.held_out.contrast_offset = parse_double(k, v); }},
        {"data.seed", [&](auto& k, auto& v) { c.data_seed = parse_u64(k, v); }},
        {"pretrain.samples", [&](auto& k, auto& v) { c.pretrain_samples = parse_u64(k, v); }},
        {"pretrain.epochs", [&](auto& k, auto& v) { c.pretrain_epochs = parse_int(k, v); }},
        {"pretrain.learning_rate", [&](auto& k, auto& v) { c.pretrain_lr = parse_double(k, v); }},
        {"federation.rounds", [&](auto& k, auto& v) { c.rounds = parse_int(k, v); }},
        {"federation.local_epochs", [&](auto& k, auto& v) { c.local_epochs = parse_int(k, v); }},
        {"federation.learning_rate", [&](auto& k, auto& v) { c.learning_rate = parse_double(k, v); }},
        {"federation.batch_size", [&](auto& k, auto& v) { c.batch_size = parse_u64(k, v); }},
        {"federation.gamma", [&](auto& k, auto& v) { c.gamma_percent = parse_double(k, v); }},
        {"federation.mode",
         [&](auto& k, auto& v) {
             const auto m = parse_training_mode(trim(v));
             if (!m) throw_config("invalid value for '" + k + "': " + v);
             c.mode = *m;
         }},
        {"federation.projection_target",
         [&](auto& k, auto& v) {
             const auto t = parse_projection_target(trim(v));
             if (!t) throw_config("invalid value for '" + k + "': " + v);
             c.projection_target = *t;
         }},
        {"federation.seed", [&](auto& k, auto& v) { c.train_seed = parse_u64(k, v); }},
        {"federation.threads",
         [&](auto& k, auto& v) { c.threads = static_cast<unsigned>(parse_u64(k, v)); }},
        {"federation.count_basis_scalars",
         [&](auto& k, auto& v) { c.count_basis_scalars = parse_bool(k, v); }},
        {"federation.fft_momentum", [&](auto& k, auto& v) { c.fft_momentum = parse_double(k, v); }},
        {"federation.fft_from_scratch",
         [&](auto& k, auto& v) { c.fft_from_scratch = parse_bool(k, v); }},
        {"output.dir", [&](auto&, auto& v) { c.output_dir = trim(v); }},
    };

    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw_config("line " + std::to_string(lineno) + ": bad section header");
            section = trim(std::string_view(t).substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw_config("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = section + "." + trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end()) throw_config("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second(key, value);
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw_config("cannot open config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string config_hash(const ExperimentConfig& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_config(config)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void apply_master_seed(ExperimentConfig& config, std::uint64_t seed) {
    config.data_seed = derive_seed(seed, {1});
    config.model_seed = derive_seed(seed, {2});
    config.train_seed = derive_seed(seed, {3});
}

}  // namespace fednull
