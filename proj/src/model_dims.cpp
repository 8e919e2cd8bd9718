#include "fednull/model_dims.hpp"

#include "fednull/error.hpp"
#include "fednull/mri.hpp"

namespace fednull {

std::string_view to_string(TrainingMode mode) noexcept {
    switch (mode) {
        case TrainingMode::FedAvgFullFinetune: return "fedavg_fft";
        case TrainingMode::PromptOnly: return "prompt_only";
        case TrainingMode::FedPR: return "fedpr";
    }
    return "unknown";
}

std::optional<TrainingMode> parse_training_mode(std::string_view text) noexcept {
    if (text == "fedavg_fft") return TrainingMode::FedAvgFullFinetune;
    if (text == "prompt_only") return TrainingMode::PromptOnly;
    if (text == "fedpr") return TrainingMode::FedPR;
    return std::nullopt;
}

std::string_view to_string(Activation act) noexcept {
    return act == Activation::Identity ? "identity" : "tanh";
}

std::optional<Activation> parse_activation(std::string_view text) noexcept {
    if (text == "tanh") return Activation::Tanh;
    if (text == "identity") return Activation::Identity;
    return std::nullopt;
}

void ModelDims::validate() const {
    if (patch_size == 0 || embed_dim == 0 || layers == 0 || prompt_tokens == 0)
        throw_invalid("model dims must be positive");
    if (image_size < 4 || !is_power_of_two(image_size))
        throw_invalid("image_size must be a power of two >= 4");
    if (image_size % patch_size != 0) throw_invalid("patch_size must divide image_size");
}

}  // namespace fednull
