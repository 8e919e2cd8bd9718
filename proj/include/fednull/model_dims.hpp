#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace fednull {

enum class TrainingMode {
    FedAvgFullFinetune,  // "fedavg_fft": all parameters trained and exchanged
    PromptOnly,          // "prompt_only": prompts only, no projection
    FedPR,               // "fedpr": prompts only, null-space projected
};

std::string_view to_string(TrainingMode mode) noexcept;
std::optional<TrainingMode> parse_training_mode(std::string_view text) noexcept;

enum class Activation : std::uint8_t { Tanh = 0, Identity = 1 };

std::string_view to_string(Activation act) noexcept;
std::optional<Activation> parse_activation(std::string_view text) noexcept;

/// Shape of the surrogate backbone and its prompts.
struct ModelDims {
    std::size_t image_size = 16;   // H = W
    std::size_t patch_size = 4;    // p
    std::size_t embed_dim = 32;    // d
    std::size_t layers = 4;        // L
    std::size_t prompt_tokens = 8; // l

    std::size_t patch_pixels() const noexcept { return patch_size * patch_size; }
    std::size_t tokens() const noexcept {
        const std::size_t g = image_size / patch_size;
        return g * g;
    }
    std::size_t pixels() const noexcept { return image_size * image_size; }

    std::size_t prompt_scalars() const noexcept { return layers * prompt_tokens * embed_dim; }
    std::size_t backbone_scalars() const noexcept {
        const std::size_t n = tokens();
        return patch_pixels() * embed_dim + layers * (n * (prompt_tokens + n) + embed_dim * embed_dim) +
               n * embed_dim * pixels();
    }

    /// Throws InvalidInput when the shape cannot form a patch grid.
    void validate() const;

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

}  // namespace fednull
