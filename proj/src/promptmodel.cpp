#include "fednull/promptmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "fednull/binary_io.hpp"
#include "fednull/error.hpp"
#include "fednull/rng.hpp"

namespace fednull {
namespace {

constexpr char kModelMagic[4] = {'F', 'N', 'P', 'M'};
constexpr std::uint16_t kModelVersion = 1;
constexpr std::uint16_t kKindPrompts = 1;
constexpr std::uint16_t kKindBackbone = 2;

double activate(Activation act, double z) { return act == Activation::Tanh ? std::tanh(z) : z; }

// Derivative expressed through the activation output h = σ(z).
double activate_grad(Activation act, double h) {
    return act == Activation::Tanh ? 1.0 - h * h : 1.0;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

struct ForwardTrace {
    Matrix patches;               // n × p²
    std::vector<Matrix> stacked;  // [P_i ; H_i], (l+n) × d
    std::vector<Matrix> hidden;   // H_0 … H_L
    Image output;
};

void check_shapes(const Image& x, const PromptSet& prompts, const Backbone& bb) {
    const ModelDims& d = bb.dims;
    if (x.height() != d.image_size || x.width() != d.image_size)
        throw_invalid("forward: image does not match the backbone patch grid");
    if (prompts.layers.size() != d.layers) throw_invalid("forward: prompt layer count mismatch");
    for (const auto& p : prompts.layers)
        if (p.rows() != d.prompt_tokens || p.cols() != d.embed_dim)
            throw_invalid("forward: prompt layer shape mismatch");
}

ForwardTrace run_forward(const Image& x, const PromptSet& prompts, const Backbone& bb) {
    check_shapes(x, prompts, bb);
    const ModelDims& dims = bb.dims;
    ForwardTrace tr;
    tr.patches = patchify(x, dims.patch_size);
    tr.hidden.reserve(dims.layers + 1);
    tr.stacked.reserve(dims.layers);
    tr.hidden.push_back(matmul(tr.patches, bb.patch_embed));
    for (std::size_t i = 0; i < dims.layers; ++i) {
        tr.stacked.push_back(vstack(prompts.layers[i], tr.hidden.back()));
        Matrix z = matmul(matmul(bb.token_mix[i], tr.stacked.back()), bb.channel_mix[i]);
        for (double& v : z.values()) v = activate(bb.activation, v);
        tr.hidden.push_back(std::move(z));
    }
    const Matrix& last = tr.hidden.back();
    Matrix out(1, dims.pixels());
    {
        // vec(H_L) · head without materializing the 1×(n·d) row.
        const auto hv = last.values();
        auto ov = out.values();
        for (std::size_t k = 0; k < hv.size(); ++k) {
            const double hk = hv[k];
            if (hk == 0.0) continue;
            const auto hrow = bb.head.row(k);
            for (std::size_t j = 0; j < ov.size(); ++j) ov[j] += hk * hrow[j];
        }
    }
    Matrix pixels(dims.image_size, dims.image_size);
    std::copy(out.values().begin(), out.values().end(), pixels.values().begin());
    tr.output = Image(std::move(pixels));
    return tr;
}

// Accumulates gradients of `weight * Σ|x̂ − y|` for one sample.
void backward_sample(const ForwardTrace& tr, const Image& target, double weight,
                     const Backbone& bb, GradientSet& gp, Backbone* gb) {
    const ModelDims& dims = bb.dims;
    const std::size_t hw = dims.pixels();
    const auto pred = tr.output.pixels().values();
    const auto tgt = target.pixels().values();

    std::vector<double> dout(hw);
    for (std::size_t j = 0; j < hw; ++j) {
        const double r = pred[j] - tgt[j];
        dout[j] = r > 0.0 ? weight : (r < 0.0 ? -weight : 0.0);
    }

    const Matrix& last = tr.hidden.back();
    Matrix dh(last.rows(), last.cols());
    {
        auto dhv = dh.values();
        for (std::size_t k = 0; k < dhv.size(); ++k) {
            const auto hrow = bb.head.row(k);
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += hrow[j] * dout[j];
            dhv[k] = acc;
        }
    }
    if (gb) {
        const auto hv = last.values();
        for (std::size_t k = 0; k < hv.size(); ++k) {
            const double hk = hv[k];
            if (hk == 0.0) continue;
            auto grow = gb->head.row(k);
            for (std::size_t j = 0; j < hw; ++j) grow[j] += hk * dout[j];
        }
    }

    for (std::size_t i = dims.layers; i-- > 0;) {
        const Matrix& h_out = tr.hidden[i + 1];
        Matrix dz = dh;
        {
            auto dzv = dz.values();
            const auto hv = h_out.values();
            for (std::size_t k = 0; k < dzv.size(); ++k) dzv[k] *= activate_grad(bb.activation, hv[k]);
        }
        // Z = M · A · C
        const Matrix& m = bb.token_mix[i];
        const Matrix& c = bb.channel_mix[i];
        const Matrix& a = tr.stacked[i];
        const Matrix dz_ct = matmul_nt(dz, c);     // n × d
        const Matrix da = matmul_tn(m, dz_ct);     // (l+n) × d
        gp.layers[i] += da.row_block(0, dims.prompt_tokens);
        if (gb) {
            gb->token_mix[i] += matmul_nt(dz_ct, a);           // n × (l+n)
            gb->channel_mix[i] += matmul_tn(matmul(m, a), dz);  // d × d
        }
        dh = da.row_block(dims.prompt_tokens, dims.tokens());
    }
    if (gb) gb->patch_embed += matmul_tn(tr.patches, dh);
}

void write_header(std::ostream& os, std::uint16_t kind, const ModelDims& dims, Activation act) {
    os.write(kModelMagic, 4);
    binary::put<std::uint16_t>(os, kModelVersion);
    binary::put<std::uint16_t>(os, kind);
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.image_size));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.patch_size));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.embed_dim));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.layers));
    binary::put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.prompt_tokens));
    binary::put<std::uint8_t>(os, static_cast<std::uint8_t>(act));
}

std::pair<ModelDims, Activation> read_header(std::istream& is, std::uint16_t expected_kind,
                                             const std::filesystem::path& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || !std::equal(magic, magic + 4, kModelMagic))
        throw_io("bad FNPM magic in " + path.string());
    const auto version = binary::get<std::uint16_t>(is);
    if (version != kModelVersion)
        throw_io("unsupported FNPM version " + std::to_string(version) + " in " + path.string());
    const auto kind = binary::get<std::uint16_t>(is);
    if (kind != expected_kind) throw_io("unexpected FNPM payload kind in " + path.string());
    ModelDims dims;
    dims.image_size = binary::get<std::uint32_t>(is);
    dims.patch_size = binary::get<std::uint32_t>(is);
    dims.embed_dim = binary::get<std::uint32_t>(is);
    dims.layers = binary::get<std::uint32_t>(is);
    dims.prompt_tokens = binary::get<std::uint32_t>(is);
    const auto act = binary::get<std::uint8_t>(is);
    if (act > static_cast<std::uint8_t>(Activation::Identity))
        throw_io("unknown activation tag in " + path.string());
    return {dims, static_cast<Activation>(act)};
}

void write_matrix(std::ostream& os, const Matrix& m) {
    for (double v : m.values()) binary::put<double>(os, v);
}

void read_matrix(std::istream& is, Matrix& m) {
    for (double& v : m.values()) v = binary::get<double>(is);
}

}  // namespace

PromptSet PromptSet::zeros(const ModelDims& dims) {
    PromptSet p;
    p.layers.assign(dims.layers, Matrix(dims.prompt_tokens, dims.embed_dim));
    return p;
}

PromptSet PromptSet::zeros_like(const PromptSet& other) {
    PromptSet p;
    p.layers.reserve(other.layers.size());
    for (const auto& l : other.layers) p.layers.emplace_back(l.rows(), l.cols());
    return p;
}

std::size_t PromptSet::flattened_size() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
}

bool PromptSet::same_shape(const PromptSet& other) const noexcept {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (!layers[i].same_shape(other.layers[i])) return false;
    return true;
}

bool PromptSet::all_finite() const noexcept {
    return std::all_of(layers.begin(), layers.end(), [](const Matrix& m) { return m.all_finite(); });
}

PromptSet& PromptSet::operator+=(const PromptSet& other) {
    if (!same_shape(other)) throw_invalid("prompt set shape mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i] += other.layers[i];
    return *this;
}

PromptSet& PromptSet::operator*=(double s) noexcept {
    for (auto& l : layers) l *= s;
    return *this;
}

Backbone Backbone::random(const ModelDims& dims, std::uint64_t seed, Activation activation) {
    dims.validate();
    const std::size_t n = dims.tokens();
    const std::size_t d = dims.embed_dim;
    const std::size_t l = dims.prompt_tokens;
    Rng rng(seed);
    Backbone bb;
    bb.dims = dims;
    bb.activation = activation;
    bb.patch_embed = random_matrix(dims.patch_pixels(), d,
                                   1.0 / std::sqrt(static_cast<double>(dims.patch_pixels())), rng);
    for (std::size_t i = 0; i < dims.layers; ++i) {
        bb.token_mix.push_back(random_matrix(n, l + n, 1.0 / std::sqrt(static_cast<double>(l + n)), rng));
        bb.channel_mix.push_back(random_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    }
    bb.head = random_matrix(n * d, dims.pixels(), 1.0 / std::sqrt(static_cast<double>(n * d)), rng);
    return bb;
}

Backbone Backbone::zeros(const ModelDims& dims, Activation activation) {
    dims.validate();
    const std::size_t n = dims.tokens();
    const std::size_t d = dims.embed_dim;
    Backbone bb;
    bb.dims = dims;
    bb.activation = activation;
    bb.patch_embed = Matrix(dims.patch_pixels(), d);
    bb.token_mix.assign(dims.layers, Matrix(n, dims.prompt_tokens + n));
    bb.channel_mix.assign(dims.layers, Matrix(d, d));
    bb.head = Matrix(n * d, dims.pixels());
    return bb;
}

Backbone Backbone::zeros_like(const Backbone& other) {
    return zeros(other.dims, other.activation);
}

std::vector<Matrix*> Backbone::parameters() {
    std::vector<Matrix*> out{&patch_embed};
    for (std::size_t i = 0; i < token_mix.size(); ++i) {
        out.push_back(&token_mix[i]);
        out.push_back(&channel_mix[i]);
    }
    out.push_back(&head);
    return out;
}

std::vector<const Matrix*> Backbone::parameters() const {
    std::vector<const Matrix*> out{&patch_embed};
    for (std::size_t i = 0; i < token_mix.size(); ++i) {
        out.push_back(&token_mix[i]);
        out.push_back(&channel_mix[i]);
    }
    out.push_back(&head);
    return out;
}

std::size_t Backbone::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const Matrix* m : parameters()) n += m->size();
    return n;
}

bool Backbone::all_finite() const noexcept {
    for (const Matrix* m : parameters())
        if (!m->all_finite()) return false;
    return true;
}

Backbone& Backbone::operator+=(const Backbone& other) {
    auto mine = parameters();
    auto theirs = other.parameters();
    if (mine.size() != theirs.size()) throw_invalid("backbone shape mismatch");
    for (std::size_t i = 0; i < mine.size(); ++i) *mine[i] += *theirs[i];
    return *this;
}

Backbone& Backbone::operator*=(double s) noexcept {
    for (Matrix* m : parameters()) *m *= s;
    return *this;
}

Matrix patchify(const Image& img, std::size_t patch_size) {
    const std::size_t grid_r = img.height() / patch_size;
    const std::size_t grid_c = img.width() / patch_size;
    Matrix out(grid_r * grid_c, patch_size * patch_size);
    for (std::size_t gr = 0; gr < grid_r; ++gr)
        for (std::size_t gc = 0; gc < grid_c; ++gc)
            for (std::size_t pr = 0; pr < patch_size; ++pr)
                for (std::size_t pc = 0; pc < patch_size; ++pc)
                    out(gr * grid_c + gc, pr * patch_size + pc) =
                        img(gr * patch_size + pr, gc * patch_size + pc);
    return out;
}

Image unpatchify(const Matrix& patches, std::size_t image_size, std::size_t patch_size) {
    const std::size_t grid = image_size / patch_size;
    if (patches.rows() != grid * grid || patches.cols() != patch_size * patch_size)
        throw_invalid("unpatchify: patch matrix shape mismatch");
    Image out(image_size, image_size);
    for (std::size_t gr = 0; gr < grid; ++gr)
        for (std::size_t gc = 0; gc < grid; ++gc)
            for (std::size_t pr = 0; pr < patch_size; ++pr)
                for (std::size_t pc = 0; pc < patch_size; ++pc)
                    out(gr * patch_size + pr, gc * patch_size + pc) =
                        patches(gr * grid + gc, pr * patch_size + pc);
    return out;
}

Image forward(const Image& x, const PromptSet& prompts, const Backbone& backbone) {
    return run_forward(x, prompts, backbone).output;
}

double loss_l1(const Image& pred, const Image& target) {
    if (pred.height() != target.height() || pred.width() != target.width())
        throw_invalid("loss_l1: image shapes differ");
    const auto a = pred.pixels().values();
    const auto b = target.pixels().values();
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

LossAndGradients compute_gradients(std::span<const Sample* const> batch, const PromptSet& prompts,
                                   const Backbone& backbone, bool with_backbone) {
    if (batch.empty()) throw_invalid("compute_gradients: empty batch");
    LossAndGradients out;
    out.prompts = PromptSet::zeros_like(prompts);
    if (with_backbone) {
        out.backbone = Backbone::zeros_like(backbone);
        out.has_backbone = true;
    }
    const double weight =
        1.0 / (static_cast<double>(batch.size()) * static_cast<double>(backbone.dims.pixels()));
    for (const Sample* s : batch) {
        if (s->y.height() != s->x.height() || s->y.width() != s->x.width())
            throw_invalid("compute_gradients: target shape mismatch");
        const ForwardTrace tr = run_forward(s->x, prompts, backbone);
        out.loss += loss_l1(tr.output, s->y);
        backward_sample(tr, s->y, weight, backbone, out.prompts,
                        with_backbone ? &out.backbone : nullptr);
    }
    out.loss /= static_cast<double>(batch.size());
    return out;
}

GradientSet grad_prompts(std::span<const Sample> batch, const PromptSet& prompts,
                         const Backbone& backbone) {
    std::vector<const Sample*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto& s : batch) ptrs.push_back(&s);
    return compute_gradients(ptrs, prompts, backbone, false).prompts;
}

double mean_loss(std::span<const Sample> samples, const PromptSet& prompts,
                 const Backbone& backbone) {
    if (samples.empty()) throw_invalid("mean_loss: no samples");
    double acc = 0.0;
    for (const auto& s : samples) acc += loss_l1(forward(s.x, prompts, backbone), s.y);
    return acc / static_cast<double>(samples.size());
}

Backbone pretrain_backbone(std::span<const Sample> source, const ModelDims& dims, int epochs,
                           double lr, std::uint64_t seed, Activation activation) {
    if (source.empty()) throw_invalid("pretrain_backbone: empty source data");
    if (epochs < 0) throw_invalid("pretrain_backbone: negative epoch count");
    Backbone bb = Backbone::random(dims, seed, activation);
    const PromptSet prompts = PromptSet::zeros(dims);
    std::vector<const Sample*> all;
    all.reserve(source.size());
    for (const auto& s : source) all.push_back(&s);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        LossAndGradients g = compute_gradients(all, prompts, bb, true);
        if (!std::isfinite(g.loss))
            throw_numerical("pretrain_backbone: loss is not finite at epoch " + std::to_string(epoch));
        g.backbone *= -lr;
        bb += g.backbone;
        if (!bb.all_finite())
            throw_numerical("pretrain_backbone: parameters diverged at epoch " + std::to_string(epoch));
    }
    return bb;
}

void save_prompts(const std::filesystem::path& path, const PromptSet& prompts) {
    if (prompts.layers.empty()) throw_invalid("save_prompts: empty prompt set");
    ModelDims dims{};
    dims.image_size = 0;
    dims.patch_size = 0;
    dims.layers = prompts.layers.size();
    dims.prompt_tokens = prompts.layers.front().rows();
    dims.embed_dim = prompts.layers.front().cols();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw_io("cannot open " + path.string() + " for writing");
    write_header(os, kKindPrompts, dims, Activation::Tanh);
    for (const auto& l : prompts.layers) write_matrix(os, l);
    if (!os) throw_io("write failed: " + path.string());
}

PromptSet load_prompts(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw_io("cannot open " + path.string());
    const auto [dims, act] = read_header(is, kKindPrompts, path);
    (void)act;
    PromptSet p = PromptSet::zeros(dims);
    for (auto& l : p.layers) read_matrix(is, l);
    return p;
}

void save_backbone(const std::filesystem::path& path, const Backbone& backbone) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw_io("cannot open " + path.string() + " for writing");
    write_header(os, kKindBackbone, backbone.dims, backbone.activation);
    for (const Matrix* m : backbone.parameters()) write_matrix(os, *m);
    if (!os) throw_io("write failed: " + path.string());
}

Backbone load_backbone(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw_io("cannot open " + path.string());
    const auto [dims, act] = read_header(is, kKindBackbone, path);
    dims.validate();
    Backbone bb = Backbone::zeros(dims, act);
    for (Matrix* m : bb.parameters()) read_matrix(is, *m);
    return bb;
}

}  // namespace fednull
