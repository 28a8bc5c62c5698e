#include "sammed/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace sammed::model {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

std::string blk(int b) { return "enc.blk" + std::to_string(b) + "."; }
std::string adp(int b) { return "adapter" + std::to_string(b) + "."; }
std::string dec_layer(int l) { return "dec.layer" + std::to_string(l) + "."; }

class Initializer {
  public:
    Initializer(ModelState& state, std::uint64_t seed) : state_(state), rng_(seed) {}

    void normal(const std::string& name, ParamGroup g, ag::Shape shape, double stddev, bool trainable = true) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data) v = dist(rng_);
        state_.add(name, g, trainable, std::move(t));
    }
    // Fan-in scaled weights; fan_in = product of all dims but the output one.
    void weight(const std::string& name, ParamGroup g, ag::Shape shape, int fan_in) {
        normal(name, g, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
    }
    void constant(const std::string& name, ParamGroup g, ag::Shape shape, double value, bool trainable = true) {
        state_.add(name, g, trainable, Tensor(std::move(shape), value));
    }
    void linear(const std::string& prefix, ParamGroup g, int in, int out, bool bias = true) {
        weight(prefix + "w", g, {in, out}, in);
        if (bias) constant(prefix + "b", g, {out}, 0.0);
    }
    void layer_norm(const std::string& prefix, ParamGroup g, int dim) {
        constant(prefix + "g", g, {dim}, 1.0);
        constant(prefix + "b", g, {dim}, 0.0);
    }
    void attention(const std::string& prefix, ParamGroup g, int dim, int internal) {
        linear(prefix + "q.", g, dim, internal);
        linear(prefix + "k.", g, dim, internal);
        linear(prefix + "v.", g, dim, internal);
        linear(prefix + "o.", g, internal, dim);
    }

  private:
    ModelState& state_;
    std::mt19937_64 rng_;
};

Var P(const ModelState& s, const std::string& name) { return s.get(name); }

Var layer_norm(const Var& x, const ModelState& s, const std::string& prefix) {
    return ag::layer_norm_rows(x, P(s, prefix + "g"), P(s, prefix + "b"));
}

Var dense_linear(const Var& x, const ModelState& s, const std::string& prefix) {
    return ag::linear(x, P(s, prefix + "w"), s.contains(prefix + "b") ? P(s, prefix + "b") : Var());
}

// Multi-head attention of queries over keys/values; projections map to an
// internal width (possibly downsampled) and back.
Var attention(const Var& q_in, const Var& k_in, const Var& v_in, const ModelState& s, const std::string& prefix,
              int heads) {
    Var q = dense_linear(q_in, s, prefix + "q.");
    Var k = dense_linear(k_in, s, prefix + "k.");
    Var v = dense_linear(v_in, s, prefix + "v.");
    const int internal = q.shape()[1];
    const int head_dim = internal / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Var qh = ag::slice_cols(q, h * head_dim, head_dim);
        Var kh = ag::slice_cols(k, h * head_dim, head_dim);
        Var vh = ag::slice_cols(v, h * head_dim, head_dim);
        Var attn = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), scale));
        outs.push_back(ag::matmul(attn, vh));
    }
    Var merged = heads == 1 ? outs[0] : ag::concat_cols(outs);
    return dense_linear(merged, s, prefix + "o.");
}

// Tokens [N, C] on a g x g grid <-> feature map [C, g, g].
Var tokens_to_map(const Var& tokens, int grid) {
    const int c = tokens.shape()[1];
    return ag::reshape(ag::transpose(tokens), {c, grid, grid});
}

Var map_to_tokens(const Var& map) {
    const int c = map.shape()[0];
    const int n = map.shape()[1] * map.shape()[2];
    return ag::transpose(ag::reshape(map, {c, n}));
}

Tensor patchify(const Tensor& pixels, int patch) {
    const int ch = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
    const int gh = h / patch, gw = w / patch;
    const int row = ch * patch * patch;
    Tensor out({gh * gw, row});
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            double* dst = out.data.data() + static_cast<std::size_t>(gy * gw + gx) * row;
            int k = 0;
            for (int c = 0; c < ch; ++c)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        dst[k++] = pixels.data[(static_cast<std::size_t>(c) * h + gy * patch + py) * w + gx * patch + px];
        }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration

int EncoderConfig::adapter_hidden() const {
    return static_cast<int>(std::lround(embed_dim * adapter_compress_ratio));
}

void EncoderConfig::validate() const {
    if (patch_size < 1 || input_size < patch_size || input_size % patch_size != 0)
        throw ModelError("input_size must be a positive multiple of patch_size");
    if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
        throw ModelError("embed_dim must be divisible by num_heads");
    if (depth < 1) throw ModelError("depth must be >= 1");
    const double hidden = embed_dim * adapter_compress_ratio;
    if (hidden < 1 || std::abs(hidden - std::round(hidden)) > 1e-9)
        throw ModelError("embed_dim * adapter_compress_ratio must be a positive integer");
    if (adapters_enabled && grid() % 2 != 0) throw ModelError("adapters need an even embedding grid");
}

void ModelConfig::validate() const {
    encoder.validate();
    if (prompt_dim < 16 || prompt_dim % 16 != 0) throw ModelError("prompt_dim must be a positive multiple of 16");
    if (decoder_depth < 1) throw ModelError("decoder_depth must be >= 1");
    if (attention_downsample < 1 || prompt_dim % attention_downsample != 0)
        throw ModelError("prompt_dim must be divisible by attention_downsample");
    const int internal = prompt_dim / attention_downsample;
    if (decoder_heads < 1 || prompt_dim % decoder_heads != 0 || internal % decoder_heads != 0)
        throw ModelError("decoder_heads must divide the attention widths");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"encoder",
             {{"input_size", encoder.input_size},
              {"patch_size", encoder.patch_size},
              {"embed_dim", encoder.embed_dim},
              {"depth", encoder.depth},
              {"num_heads", encoder.num_heads},
              {"mlp_ratio", encoder.mlp_ratio},
              {"adapter_compress_ratio", encoder.adapter_compress_ratio},
              {"adapters_enabled", encoder.adapters_enabled}}},
            {"prompt_dim", prompt_dim},
            {"decoder_depth", decoder_depth},
            {"decoder_heads", decoder_heads},
            {"decoder_mlp_dim", decoder_mlp_dim},
            {"attention_downsample", attention_downsample},
            {"iou_head_hidden", iou_head_hidden},
            {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, ModelConfig base) {
    ModelConfig c = base;
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        c.encoder.input_size = e.value("input_size", c.encoder.input_size);
        c.encoder.patch_size = e.value("patch_size", c.encoder.patch_size);
        c.encoder.embed_dim = e.value("embed_dim", c.encoder.embed_dim);
        c.encoder.depth = e.value("depth", c.encoder.depth);
        c.encoder.num_heads = e.value("num_heads", c.encoder.num_heads);
        c.encoder.mlp_ratio = e.value("mlp_ratio", c.encoder.mlp_ratio);
        c.encoder.adapter_compress_ratio = e.value("adapter_compress_ratio", c.encoder.adapter_compress_ratio);
        c.encoder.adapters_enabled = e.value("adapters_enabled", c.encoder.adapters_enabled);
    }
    c.prompt_dim = j.value("prompt_dim", c.prompt_dim);
    c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.decoder_mlp_dim = j.value("decoder_mlp_dim", c.decoder_mlp_dim);
    c.attention_downsample = j.value("attention_downsample", c.attention_downsample);
    c.iou_head_hidden = j.value("iou_head_hidden", c.iou_head_hidden);
    c.seed = j.value("seed", c.seed);
    return c;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.encoder.input_size = 64;
    c.encoder.patch_size = 16;
    c.encoder.embed_dim = 32;
    c.encoder.depth = 2;
    c.encoder.num_heads = 4;
    c.prompt_dim = 32;
    c.decoder_heads = 4;
    c.decoder_mlp_dim = 64;
    c.iou_head_hidden = 32;
    return c;
}

std::string to_string(ParamGroup group) {
    switch (group) {
    case ParamGroup::encoder_base: return "encoder_base";
    case ParamGroup::adapters: return "adapters";
    case ParamGroup::prompt_encoder: return "prompt_encoder";
    case ParamGroup::mask_decoder: return "mask_decoder";
    }
    return "?";
}

ParamGroup group_from_string(const std::string& s) {
    for (auto g : kAllGroups)
        if (to_string(g) == s) return g;
    throw ModelError("unknown parameter group '" + s + "'");
}

// ---------------------------------------------------------------------------
// ModelState

void ModelState::add(std::string name, ParamGroup group, bool trainable, Tensor value) {
    if (index_.count(name)) throw ModelError("duplicate parameter '" + name + "'");
    // Frozen base weights never carry gradients.
    if (group == ParamGroup::encoder_base) trainable = false;
    index_[name] = params_.size();
    params_.push_back({name, group, trainable, Var::leaf(std::move(value), trainable)});
}

const Var& ModelState::get(const std::string& name) const { return param(name).var; }

const Parameter& ModelState::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ModelError("missing parameter '" + name + "'");
    return params_[it->second];
}

std::size_t ModelState::count(ParamGroup group) const {
    return static_cast<std::size_t>(
        std::count_if(params_.begin(), params_.end(), [&](const Parameter& p) { return p.group == group; }));
}

std::size_t ModelState::numel(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (p.group == group) n += p.var.value().size();
    return n;
}

ModelState ModelState::clone() const {
    ModelState out;
    out.config = config;
    for (const auto& p : params_) out.add(p.name, p.group, p.trainable, p.var.value());
    return out;
}

void ModelState::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

ModelState init_model(const ModelConfig& config) {
    config.validate();
    ModelState s;
    s.config = config;
    Initializer init(s, config.seed);
    const auto& e = config.encoder;
    const int c = e.embed_dim, d = config.prompt_dim, g = e.grid();
    const int patch_in = 3 * e.patch_size * e.patch_size;
    const auto base = ParamGroup::encoder_base;

    init.linear("enc.patch.", base, patch_in, c);
    init.normal("enc.pos", base, {g * g, c}, 0.02);
    for (int b = 0; b < e.depth; ++b) {
        init.layer_norm(blk(b) + "ln1.", base, c);
        init.linear(blk(b) + "attn.qkv.", base, c, 3 * c);
        init.linear(blk(b) + "attn.proj.", base, c, c);
        init.layer_norm(blk(b) + "ln2.", base, c);
        init.linear(blk(b) + "mlp.fc1.", base, c, e.mlp_ratio * c);
        init.linear(blk(b) + "mlp.fc2.", base, e.mlp_ratio * c, c);
    }
    init.linear("enc.neck.proj.", base, c, d, false);
    init.layer_norm("enc.neck.ln1.", base, d);
    init.weight("enc.neck.conv.w", base, {d, d, 3, 3}, d * 9);
    init.layer_norm("enc.neck.ln2.", base, d);

    if (e.adapters_enabled) {
        const auto ag = ParamGroup::adapters;
        const int hidden = e.adapter_hidden();
        for (int b = 0; b < e.depth; ++b) {
            init.linear(adp(b) + "fc1.", ag, c, hidden);
            init.linear(adp(b) + "fc2.", ag, hidden, c);
            init.weight(adp(b) + "conv.w", ag, {c, c, 3, 3}, c * 9);
            init.constant(adp(b) + "conv.b", ag, {c}, 0.0);
            init.constant(adp(b) + "tconv.w", ag, {c, c, 4, 4}, 0.0);
            init.constant(adp(b) + "tconv.b", ag, {c}, 0.0);
        }
    }

    const auto pe = ParamGroup::prompt_encoder;
    init.normal("prompt.pe_gaussian", pe, {2, d / 2}, 1.0, false);
    init.normal("prompt.point_fg", pe, {d}, 1.0);
    init.normal("prompt.point_bg", pe, {d}, 1.0);
    init.normal("prompt.box_tl", pe, {d}, 1.0);
    init.normal("prompt.box_br", pe, {d}, 1.0);
    init.normal("prompt.no_mask", pe, {d}, 1.0);
    init.weight("prompt.dense.conv1.w", pe, {d / 4, 1, 2, 2}, 4);
    init.constant("prompt.dense.conv1.b", pe, {d / 4}, 0.0);
    init.weight("prompt.dense.conv2.w", pe, {d / 16, d / 4, 2, 2}, d);
    init.constant("prompt.dense.conv2.b", pe, {d / 16}, 0.0);
    init.weight("prompt.dense.conv3.w", pe, {d, d / 16, 1, 1}, d / 16);
    init.constant("prompt.dense.conv3.b", pe, {d}, 0.0);

    const auto md = ParamGroup::mask_decoder;
    const int internal = d / config.attention_downsample;
    init.normal("dec.iou_token", md, {1, d}, 1.0);
    init.normal("dec.mask_tokens", md, {kNumMaskCandidates, d}, 1.0);
    for (int l = 0; l < config.decoder_depth; ++l) {
        init.attention(dec_layer(l) + "self_attn.", md, d, d);
        init.layer_norm(dec_layer(l) + "norm1.", md, d);
        init.attention(dec_layer(l) + "t2i.", md, d, internal);
        init.layer_norm(dec_layer(l) + "norm2.", md, d);
        init.linear(dec_layer(l) + "mlp.fc1.", md, d, config.decoder_mlp_dim);
        init.linear(dec_layer(l) + "mlp.fc2.", md, config.decoder_mlp_dim, d);
        init.layer_norm(dec_layer(l) + "norm3.", md, d);
        init.attention(dec_layer(l) + "i2t.", md, d, internal);
        init.layer_norm(dec_layer(l) + "norm4.", md, d);
    }
    init.attention("dec.final_attn.", md, d, internal);
    init.layer_norm("dec.norm_final.", md, d);
    init.weight("dec.up1.w", md, {d, d / 4, 2, 2}, d);
    init.constant("dec.up1.b", md, {d / 4}, 0.0);
    init.layer_norm("dec.up_ln.", md, d / 4);
    init.weight("dec.up2.w", md, {d / 4, d / 8, 2, 2}, d / 4);
    init.constant("dec.up2.b", md, {d / 8}, 0.0);
    for (int i = 0; i < kNumMaskCandidates; ++i) {
        const std::string h = "dec.hyper" + std::to_string(i) + ".";
        init.linear(h + "fc1.", md, d, d);
        init.linear(h + "fc2.", md, d, d);
        init.linear(h + "fc3.", md, d, d / 8);
    }
    init.linear("dec.iou_head.fc1.", md, d, config.iou_head_hidden);
    init.linear("dec.iou_head.fc2.", md, config.iou_head_hidden, config.iou_head_hidden);
    init.linear("dec.iou_head.fc3.", md, config.iou_head_hidden, kNumMaskCandidates);
    return s;
}

ModelState remove_adapters(const ModelState& state) {
    ModelState out;
    out.config = state.config;
    out.config.encoder.adapters_enabled = false;
    for (const auto& p : state.params())
        if (p.group != ParamGroup::adapters) out.add(p.name, p.group, p.trainable, p.var.value());
    return out;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : state.params()) {
        tensors.push_back({{"name", p.name},
                           {"group", to_string(p.group)},
                           {"trainable", p.trainable},
                           {"shape", p.var.shape()},
                           {"offset", offset}});
        offset += p.var.value().size();
    }
    const nlohmann::json header{{"format_version", kFormatVersion}, {"config", state.config.to_json()}, {"tensors", tensors}};
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot write checkpoint " + path.string());
    const std::uint32_t version = kFormatVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : state.params())
        out.write(reinterpret_cast<const char*>(p.var.value().data.data()),
                  static_cast<std::streamsize>(p.var.value().size() * sizeof(double)));
    if (!out) throw ModelError("failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw ModelError(path.string() + " is not a checkpoint");
    if (version != kFormatVersion) throw ModelError("unsupported checkpoint version " + std::to_string(version));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(text);

    ModelState s;
    s.config = ModelConfig::from_json(header.at("config"));
    std::vector<double> payload;
    {
        std::vector<char> rest{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        payload.resize(rest.size() / sizeof(double));
        std::memcpy(payload.data(), rest.data(), payload.size() * sizeof(double));
    }
    for (const auto& t : header.at("tensors")) {
        const auto shape = t.at("shape").get<ag::Shape>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        const auto n = ag::numel(shape);
        if (offset + n > payload.size()) throw ModelError("checkpoint payload truncated");
        std::vector<double> values(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                   payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
        s.add(t.at("name"), group_from_string(t.at("group")), t.at("trainable"), Tensor(shape, std::move(values)));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Image encoder

Tensor preprocess_image(const Image& image, int input_size) {
    if (image.height != input_size || image.width != input_size)
        throw ModelError("encoder expects " + std::to_string(input_size) + "x" + std::to_string(input_size) +
                         " input, got " + std::to_string(image.height) + "x" + std::to_string(image.width));
    if (image.channels != 1 && image.channels != 3) throw ModelError("encoder expects 1 or 3 channels");
    Tensor t({3, input_size, input_size});
    const std::size_t plane = static_cast<std::size_t>(input_size) * input_size;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < input_size; ++y)
            for (int x = 0; x < input_size; ++x) {
                const int src_c = image.channels == 1 ? 0 : c;
                const double v = image.at(y, x, src_c) / 255.0;
                t.data[c * plane + static_cast<std::size_t>(y) * input_size + x] = (v - 0.5) / 0.5;
            }
    return t;
}

AdapterParams AdapterParams::from_state(const ModelState& s, int b) {
    return {P(s, adp(b) + "fc1.w"),  P(s, adp(b) + "fc1.b"),  P(s, adp(b) + "fc2.w"),   P(s, adp(b) + "fc2.b"),
            P(s, adp(b) + "conv.w"), P(s, adp(b) + "conv.b"), P(s, adp(b) + "tconv.w"), P(s, adp(b) + "tconv.b")};
}

Var channel_adapter(const Var& x, const AdapterParams& p) {
    const int c = x.shape()[0];
    Var pooled = ag::reshape(ag::mean_spatial(x), {1, c});
    Var hidden = ag::relu(ag::linear(pooled, p.fc1_w, p.fc1_b));
    Var gate = ag::sigmoid(ag::linear(hidden, p.fc2_w, p.fc2_b));
    return ag::mul_channels(x, ag::reshape(gate, {c}));
}

Var spatial_adapter(const Var& x, const AdapterParams& p) {
    if (x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0)
        throw ModelError("spatial adapter needs even spatial dims, got " + ag::shape_str(x.shape()));
    Var down = ag::gelu(ag::conv2d(x, p.conv_w, p.conv_b, 2, 1));
    return ag::conv_transpose2d(down, p.tconv_w, p.tconv_b, 2, 1);
}

Var adapter_layer(const Var& x, const AdapterParams& p) { return ag::add(x, spatial_adapter(channel_adapter(x, p), p)); }

ImageEmbedding encode_image(const Image& image, const ModelState& state) {
    return encode_image(preprocess_image(image, state.config.encoder.input_size), state);
}

ImageEmbedding encode_image(const Tensor& pixels, const ModelState& s) {
    const auto& e = s.config.encoder;
    if (pixels.rank() != 3 || pixels.dim(0) != 3 || pixels.dim(1) != e.input_size || pixels.dim(2) != e.input_size)
        throw ModelError("encoder input must be [3, " + std::to_string(e.input_size) + ", " +
                         std::to_string(e.input_size) + "], got " + ag::shape_str(pixels.shape));
    const int g = e.grid(), c = e.embed_dim;
    Var x = Var::constant(patchify(pixels, e.patch_size));
    x = ag::add(dense_linear(x, s, "enc.patch."), P(s, "enc.pos"));
    for (int b = 0; b < e.depth; ++b) {
        Var h = layer_norm(x, s, blk(b) + "ln1.");
        Var qkv = dense_linear(h, s, blk(b) + "attn.qkv.");
        const int hd = c / e.num_heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<Var> heads;
        for (int k = 0; k < e.num_heads; ++k) {
            Var q = ag::slice_cols(qkv, k * hd, hd);
            Var kk = ag::slice_cols(qkv, c + k * hd, hd);
            Var v = ag::slice_cols(qkv, 2 * c + k * hd, hd);
            heads.push_back(ag::matmul(ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(kk)), scale)), v));
        }
        x = ag::add(x, dense_linear(ag::concat_cols(heads), s, blk(b) + "attn.proj."));
        Var m = ag::gelu(dense_linear(layer_norm(x, s, blk(b) + "ln2."), s, blk(b) + "mlp.fc1."));
        x = ag::add(x, dense_linear(m, s, blk(b) + "mlp.fc2."));
        if (e.adapters_enabled) x = map_to_tokens(adapter_layer(tokens_to_map(x, g), AdapterParams::from_state(s, b)));
    }
    Var y = layer_norm(dense_linear(x, s, "enc.neck.proj."), s, "enc.neck.ln1.");
    Var map = ag::conv2d(tokens_to_map(y, g), P(s, "enc.neck.conv.w"), Var(), 1, 1);
    y = layer_norm(map_to_tokens(map), s, "enc.neck.ln2.");
    return {y, g};
}

// ---------------------------------------------------------------------------
// Prompt encoder

Tensor fourier_pe(const ModelState& s, double u, double v) {
    const Tensor& gauss = P(s, "prompt.pe_gaussian").value();
    const int half = gauss.dim(1);
    Tensor out({2 * half});
    const double cu = 2.0 * u - 1.0, cv = 2.0 * v - 1.0;
    for (int k = 0; k < half; ++k) {
        const double proj = 2.0 * std::numbers::pi * (cu * gauss.data[k] + cv * gauss.data[half + k]);
        out.data[k] = std::sin(proj);
        out.data[half + k] = std::cos(proj);
    }
    return out;
}

Tensor image_pe(const ModelState& s) {
    const int g = s.config.encoder.grid(), d = s.config.prompt_dim;
    Tensor out({g * g, d});
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) {
            Tensor pe = fourier_pe(s, (j + 0.5) / g, (i + 0.5) / g);
            std::copy(pe.data.begin(), pe.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>((i * g + j) * d));
        }
    return out;
}

Var encode_points(std::span<const prompt::PointPrompt> points, const ModelState& s) {
    const int size = s.config.encoder.input_size, d = s.config.prompt_dim;
    if (points.empty()) throw ModelError("encode_points: no points");
    Tensor pe({static_cast<int>(points.size()), d});
    Tensor fg_sel({static_cast<int>(points.size()), 1});
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (p.x < 0 || p.x >= size || p.y < 0 || p.y >= size)
            throw ModelError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside the input");
        Tensor row = fourier_pe(s, static_cast<double>(p.x) / size, static_cast<double>(p.y) / size);
        std::copy(row.data.begin(), row.data.end(), pe.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        fg_sel.data[i] = p.label == prompt::PointLabel::foreground ? 1.0 : 0.0;
    }
    // label embedding = sel * E_fg + (1 - sel) * E_bg, built as outer products
    Tensor bg_sel = fg_sel;
    for (double& v : bg_sel.data) v = 1.0 - v;
    Var fg = ag::matmul(Var::constant(fg_sel), ag::reshape(P(s, "prompt.point_fg"), {1, d}));
    Var bg = ag::matmul(Var::constant(bg_sel), ag::reshape(P(s, "prompt.point_bg"), {1, d}));
    return ag::add(Var::constant(pe), ag::add(fg, bg));
}

Var encode_box(const prompt::BoxPrompt& box, const ModelState& s) {
    const int size = s.config.encoder.input_size, d = s.config.prompt_dim;
    if (!box.valid()) throw ModelError("encode_box: degenerate box");
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > size || box.y1 > size) throw ModelError("encode_box: box outside the input");
    Tensor tl = fourier_pe(s, static_cast<double>(box.x0) / size, static_cast<double>(box.y0) / size);
    Tensor br = fourier_pe(s, static_cast<double>(box.x1) / size, static_cast<double>(box.y1) / size);
    Var a = ag::add(Var::constant(Tensor({1, d}, tl.data)), ag::reshape(P(s, "prompt.box_tl"), {1, d}));
    Var b = ag::add(Var::constant(Tensor({1, d}, br.data)), ag::reshape(P(s, "prompt.box_br"), {1, d}));
    const Var parts[] = {a, b};
    return ag::concat_rows(parts);
}

Var encode_sparse(const prompt::PromptSet& prompts, const ModelState& s) {
    std::vector<Var> parts;
    if (!prompts.points.empty()) parts.push_back(encode_points(prompts.points, s));
    if (prompts.box) parts.push_back(encode_box(*prompts.box, s));
    if (parts.empty()) return {};
    return parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
}

Var encode_dense(const Tensor* logits, const ModelState& s) {
    const int g = s.config.encoder.grid(), d = s.config.prompt_dim;
    if (logits == nullptr) {
        Var ones = Var::constant(Tensor({g * g, 1}, 1.0));
        return ag::matmul(ones, ag::reshape(P(s, "prompt.no_mask"), {1, d}));
    }
    const int low = 4 * g;
    if (logits->rank() != 2 || logits->dim(0) != low || logits->dim(1) != low)
        throw ModelError("dense prompt must be [" + std::to_string(low) + ", " + std::to_string(low) + "], got " +
                         ag::shape_str(logits->shape));
    Tensor probs({1, low, low});
    for (std::size_t i = 0; i < logits->size(); ++i) probs.data[i] = 1.0 / (1.0 + std::exp(-logits->data[i]));
    Var x = Var::constant(std::move(probs));
    x = ag::gelu(ag::conv2d(x, P(s, "prompt.dense.conv1.w"), P(s, "prompt.dense.conv1.b"), 2, 0));
    x = ag::gelu(ag::conv2d(x, P(s, "prompt.dense.conv2.w"), P(s, "prompt.dense.conv2.b"), 2, 0));
    x = ag::conv2d(x, P(s, "prompt.dense.conv3.w"), P(s, "prompt.dense.conv3.b"), 1, 0);
    return map_to_tokens(x);
}

// ---------------------------------------------------------------------------
// Mask decoder

DecoderVars decode_masks(const ImageEmbedding& embedding, const Var& sparse, const Var& dense, const ModelState& s) {
    const auto& cfg = s.config;
    const int d = cfg.prompt_dim, g = embedding.grid;
    if (embedding.tokens.shape() != ag::Shape{g * g, d}) throw ModelError("image embedding has the wrong shape");
    if (dense.shape() != embedding.tokens.shape()) throw ModelError("dense embedding does not match image embedding");

    std::vector<Var> token_parts{P(s, "dec.iou_token"), P(s, "dec.mask_tokens")};
    if (sparse.defined()) token_parts.push_back(sparse);
    const Var prompt_tokens = ag::concat_rows(token_parts);
    const Var pos = Var::constant(image_pe(s));

    Var queries = prompt_tokens;
    Var keys = ag::add(embedding.tokens, dense);
    const int heads = cfg.decoder_heads;
    for (int l = 0; l < cfg.decoder_depth; ++l) {
        const std::string pre = dec_layer(l);
        if (l == 0) {
            queries = attention(queries, queries, queries, s, pre + "self_attn.", heads);
        } else {
            Var q = ag::add(queries, prompt_tokens);
            queries = ag::add(queries, attention(q, q, queries, s, pre + "self_attn.", heads));
        }
        queries = layer_norm(queries, s, pre + "norm1.");

        Var q = ag::add(queries, prompt_tokens);
        Var k = ag::add(keys, pos);
        queries = layer_norm(ag::add(queries, attention(q, k, keys, s, pre + "t2i.", heads)), s, pre + "norm2.");

        Var mlp = dense_linear(ag::gelu(dense_linear(queries, s, pre + "mlp.fc1.")), s, pre + "mlp.fc2.");
        queries = layer_norm(ag::add(queries, mlp), s, pre + "norm3.");

        q = ag::add(queries, prompt_tokens);
        k = ag::add(keys, pos);
        keys = layer_norm(ag::add(keys, attention(k, q, queries, s, pre + "i2t.", heads)), s, pre + "norm4.");
    }
    {
        Var q = ag::add(queries, prompt_tokens);
        Var k = ag::add(keys, pos);
        queries = layer_norm(ag::add(queries, attention(q, k, keys, s, "dec.final_attn.", heads)), s, "dec.norm_final.");
    }

    Var up = ag::conv_transpose2d(tokens_to_map(keys, g), P(s, "dec.up1.w"), P(s, "dec.up1.b"), 2, 0);
    up = ag::gelu(ag::layer_norm_channels(up, P(s, "dec.up_ln.g"), P(s, "dec.up_ln.b")));
    up = ag::gelu(ag::conv_transpose2d(up, P(s, "dec.up2.w"), P(s, "dec.up2.b"), 2, 0));
    const int low = 4 * g, feat = d / 8;

    std::vector<Var> hyper;
    for (int i = 0; i < kNumMaskCandidates; ++i) {
        const std::string h = "dec.hyper" + std::to_string(i) + ".";
        Var t = ag::slice_rows(queries, 1 + i, 1);
        t = ag::gelu(dense_linear(t, s, h + "fc1."));
        t = ag::gelu(dense_linear(t, s, h + "fc2."));
        hyper.push_back(dense_linear(t, s, h + "fc3."));
    }
    Var masks = ag::matmul(ag::concat_rows(hyper), ag::reshape(up, {feat, low * low}));
    Var low_res = ag::reshape(masks, {kNumMaskCandidates, low, low});
    const int size = cfg.encoder.input_size;
    Var full = ag::upsample_bilinear(low_res, size, size);

    Var iou = ag::slice_rows(queries, 0, 1);
    iou = ag::gelu(dense_linear(iou, s, "dec.iou_head.fc1."));
    iou = ag::gelu(dense_linear(iou, s, "dec.iou_head.fc2."));
    iou = ag::sigmoid(dense_linear(iou, s, "dec.iou_head.fc3."));
    return {full, ag::reshape(iou, {kNumMaskCandidates}), low_res};
}

int DecoderOutput::best_by_iou_pred() const {
    return static_cast<int>(std::max_element(iou_pred.data.begin(), iou_pred.data.end()) - iou_pred.data.begin());
}

BinaryMask DecoderOutput::binary_mask(int index) const {
    const int h = mask_logits.dim(1), w = mask_logits.dim(2);
    BinaryMask m(h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i) m.bits[i] = mask_logits.data[index * plane + i] > 0.0;
    return m;
}

Tensor DecoderOutput::low_res(int index) const {
    const int h = low_res_logits.dim(1), w = low_res_logits.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor out({h, w});
    std::copy_n(low_res_logits.data.begin() + static_cast<std::ptrdiff_t>(index * plane), plane, out.data.begin());
    return out;
}

DecoderOutput predict(const ImageEmbedding& embedding, const prompt::PromptSet& prompts, const ModelState& state) {
    ag::NoGradGuard no_grad;
    Var sparse = encode_sparse(prompts, state);
    Var dense = encode_dense(prompts.dense ? &prompts.dense->logits : nullptr, state);
    auto out = decode_masks(embedding, sparse, dense, state);
    return {out.mask_logits.value(), out.iou_pred.value(), out.low_res.value()};
}

} // namespace sammed::model
