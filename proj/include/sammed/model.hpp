#pragma once

// Promptable segmentation network: ViT image encoder with per-block
// channel/spatial adapters, sparse/dense prompt encoder, and a two-way
// attention mask decoder producing three candidates plus IoU estimates.

#include "sammed/autograd.hpp"
#include "sammed/image.hpp"
#include "sammed/prompt_sim.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace sammed::model {

using ag::Tensor;
using ag::Var;

inline constexpr int kNumMaskCandidates = 3;

class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct EncoderConfig {
    int input_size = 256;
    int patch_size = 16;
    int embed_dim = 768;
    int depth = 12;
    int num_heads = 12;
    int mlp_ratio = 4;
    double adapter_compress_ratio = 0.25;
    bool adapters_enabled = true;

    int grid() const { return input_size / patch_size; }
    int adapter_hidden() const;
    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    int prompt_dim = 256; // width of prompt tokens and image embedding
    int decoder_depth = 2;
    int decoder_heads = 8;
    int decoder_mlp_dim = 2048;
    int attention_downsample = 2;
    int iou_head_hidden = 256;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    static ModelConfig from_json(const nlohmann::json& j, ModelConfig base);

    // Input 64, patch 16, C = 32, depth 2.
    static ModelConfig toy();
};

enum class ParamGroup { encoder_base, adapters, prompt_encoder, mask_decoder };
inline constexpr std::array<ParamGroup, 4> kAllGroups{ParamGroup::encoder_base, ParamGroup::adapters,
                                                     ParamGroup::prompt_encoder, ParamGroup::mask_decoder};

std::string to_string(ParamGroup group);
ParamGroup group_from_string(const std::string& s);

struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::mask_decoder;
    bool trainable = true;
    Var var;
};

class ModelState {
  public:
    ModelConfig config;

    const std::vector<Parameter>& params() const { return params_; }
    std::vector<Parameter>& params() { return params_; }

    void add(std::string name, ParamGroup group, bool trainable, Tensor value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Var& get(const std::string& name) const;
    const Parameter& param(const std::string& name) const;

    std::size_t count(ParamGroup group) const;
    std::size_t numel(ParamGroup group) const;

    // Deep copy: the result shares no tensors with this state.
    ModelState clone() const;
    void zero_grad();

  private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Random initialization under config.seed. The spatial branch's transposed
// convolution starts at zero so every adapter layer is the identity.
ModelState init_model(const ModelConfig& config);

// Drops the adapter group and disables adapters; forwards match a model
// built with adapters_enabled = false that shares the remaining weights.
ModelState remove_adapters(const ModelState& state);

// Archive: "SMEDCKPT", u32 version, u64 header length, JSON header
// {format_version, config, tensors: [{name, group, trainable, shape, offset}]},
// then little-endian float64 payload.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Image encoder

struct ImageEmbedding {
    Var tokens; // [grid * grid, prompt_dim], row-major over the grid
    int grid = 0;
};

// [3, H, W]: gray replicated to three channels, (x / 255 - 0.5) / 0.5.
Tensor preprocess_image(const Image& image, int input_size);

ImageEmbedding encode_image(const Image& image, const ModelState& state);
ImageEmbedding encode_image(const Tensor& pixels, const ModelState& state);

struct AdapterParams {
    Var fc1_w, fc1_b, fc2_w, fc2_b;
    Var conv_w, conv_b, tconv_w, tconv_b;

    static AdapterParams from_state(const ModelState& state, int block);
};

// x: [C, h, w]. Gate = sigmoid(W2 relu(W1 GAP(x))) applied per channel.
Var channel_adapter(const Var& x, const AdapterParams& p);
// Stride-2 conv (C -> C) then stride-2 transposed conv back to h x w.
Var spatial_adapter(const Var& x, const AdapterParams& p);
// x + spatial_adapter(channel_adapter(x)).
Var adapter_layer(const Var& x, const AdapterParams& p);

// ---------------------------------------------------------------------------
// Prompt encoder

// Gaussian Fourier features of normalized (u, v) in [0, 1]^2.
Tensor fourier_pe(const ModelState& state, double u, double v);
Tensor image_pe(const ModelState& state);

Var encode_points(std::span<const prompt::PointPrompt> points, const ModelState& state);
Var encode_box(const prompt::BoxPrompt& box, const ModelState& state);
// Points then box corners; undefined Var when there are no sparse prompts.
Var encode_sparse(const prompt::PromptSet& prompts, const ModelState& state);
// logits: [H/4, W/4] or nullptr for the learned no-mask embedding.
Var encode_dense(const Tensor* logits, const ModelState& state);

// ---------------------------------------------------------------------------
// Mask decoder

struct DecoderVars {
    Var mask_logits; // [3, H, W]
    Var iou_pred;    // [3]
    Var low_res;     // [3, H/4, W/4]
};

DecoderVars decode_masks(const ImageEmbedding& embedding, const Var& sparse, const Var& dense,
                         const ModelState& state);

struct DecoderOutput {
    Tensor mask_logits;
    Tensor iou_pred;
    Tensor low_res_logits;

    int best_by_iou_pred() const;
    BinaryMask binary_mask(int index) const;
    Tensor low_res(int index) const; // [H/4, W/4]
};

// Graph-free inference for one prompt set against a cached embedding.
DecoderOutput predict(const ImageEmbedding& embedding, const prompt::PromptSet& prompts, const ModelState& state);

} // namespace sammed::model
