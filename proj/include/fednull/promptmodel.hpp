#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fednull/matrix.hpp"
#include "fednull/model_dims.hpp"
#include "fednull/mri.hpp"

namespace fednull {

/// One (undersampled input, fully-sampled target) pair.
struct Sample {
    Image x;
    Image y;
};

/// Per-layer learnable prompt tokens, each an l×d matrix. These are the
/// only parameters trained and exchanged in the prompt modes.
struct PromptSet {
    std::vector<Matrix> layers;

    static PromptSet zeros(const ModelDims& dims);
    static PromptSet zeros_like(const PromptSet& other);

    std::size_t flattened_size() const noexcept;
    bool same_shape(const PromptSet& other) const noexcept;
    bool all_finite() const noexcept;

    PromptSet& operator+=(const PromptSet& other);
    PromptSet& operator*=(double s) noexcept;

    friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

/// Gradient of the loss with respect to a PromptSet; same per-layer shapes.
using GradientSet = PromptSet;

/// Frozen surrogate backbone: patch embedding, L token/channel mixing
/// layers that consume [P_i ; H_i], and a linear reconstruction head.
///
///   H_0     = patchify(x) · patch_embed                       (n×d)
///   H_{i+1} = σ(token_mix_i · [P_i ; H_i] · channel_mix_i)    (n×d)
///   x̂       = unflatten(vec(H_L) · head)                      (H×W)
///
/// token_mix_i is stored as n×(l+n) so the product is well formed.
struct Backbone {
    ModelDims dims;
    Activation activation = Activation::Tanh;
    Matrix patch_embed;               // p² × d
    std::vector<Matrix> token_mix;    // L × [n × (l+n)]
    std::vector<Matrix> channel_mix;  // L × [d × d]
    Matrix head;                      // (n·d) × (H·W)

    /// Seeded random initialization.
    static Backbone random(const ModelDims& dims, std::uint64_t seed,
                           Activation activation = Activation::Tanh);
    static Backbone zeros(const ModelDims& dims, Activation activation = Activation::Tanh);
    static Backbone zeros_like(const Backbone& other);

    std::size_t scalar_count() const noexcept;
    bool all_finite() const noexcept;
    /// All parameter matrices in serialization order.
    std::vector<Matrix*> parameters();
    std::vector<const Matrix*> parameters() const;

    Backbone& operator+=(const Backbone& other);
    Backbone& operator*=(double s) noexcept;

    friend bool operator==(const Backbone&, const Backbone&) = default;
};

/// x (H×W) → n × p² matrix of patches, row-major over the patch grid.
Matrix patchify(const Image& img, std::size_t patch_size);
Image unpatchify(const Matrix& patches, std::size_t image_size, std::size_t patch_size);

Image forward(const Image& x, const PromptSet& prompts, const Backbone& backbone);

/// Mean absolute error over pixels.
double loss_l1(const Image& pred, const Image& target);

struct LossAndGradients {
    double loss = 0.0;        // mean L1 over the batch
    GradientSet prompts;
    Backbone backbone;        // empty unless requested
    bool has_backbone = false;
};

/// Exact reverse-mode gradients of the batch-mean L1 loss. The L1
/// subgradient at an exact zero residual is 0.
LossAndGradients compute_gradients(std::span<const Sample* const> batch, const PromptSet& prompts,
                                   const Backbone& backbone, bool with_backbone);

GradientSet grad_prompts(std::span<const Sample> batch, const PromptSet& prompts,
                         const Backbone& backbone);

/// Mean L1 loss of the model over a set of samples.
double mean_loss(std::span<const Sample> samples, const PromptSet& prompts,
                 const Backbone& backbone);

/// Full-batch gradient descent on every backbone parameter (prompts held at
/// zero) starting from Backbone::random(dims, seed).
Backbone pretrain_backbone(std::span<const Sample> source, const ModelDims& dims, int epochs,
                           double lr, std::uint64_t seed,
                           Activation activation = Activation::Tanh);

// FNPM checkpoints: "FNPM", u16 version, u16 kind, u32 image_size,
// u32 patch_size, u32 embed_dim, u32 layers, u32 prompt_tokens,
// u8 activation, then the f64 payload, all little-endian.
void save_prompts(const std::filesystem::path& path, const PromptSet& prompts);
PromptSet load_prompts(const std::filesystem::path& path);
void save_backbone(const std::filesystem::path& path, const Backbone& backbone);
Backbone load_backbone(const std::filesystem::path& path);

}  // namespace fednull
