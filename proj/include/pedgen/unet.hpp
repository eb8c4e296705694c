#pragma once
// Conditional UNet denoiser over patchified pixel latents.
//
// The model consumes a square raster (default 64x64; portrait corpus frames are
// height-resized and zero-padded on the right) folded into an 8x patch grid, so the
// "latent" is just a pixel reshuffle: [3,64,64] -> [192,8,8]. A small three-level
// encoder + middle block carries self-attention at every resolution; those four
// post-attention outputs ("taps") double as the feature pyramid for reference
// identity extraction, and fused identity features are injected back by
// concatenating them into the same self-attention K/V. Cross-attention reads the
// text/identity token sequence; optional temporal attention lets video frames
// attend to the previous frame's tokens. The decoder is conv-only.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pedgen/autodiff.hpp"
#include "pedgen/common.hpp"
#include "pedgen/image.hpp"
#include "pedgen/nn.hpp"

namespace pedgen::unet {

using ad::Var;
using json = nlohmann::json;

// --- config -----------------------------------------------------------------------

struct DenoiserConfig {
    int patch = 8;                                // pixel patch size; latent C = 3*patch^2
    int latent_h = 8;                             // latent grid, raster = latent * patch
    int latent_w = 8;
    int base_channels = 32;
    std::vector<int> channel_mults{1, 2, 2, 3};   // down0, down1, down2, mid
    std::vector<int> attention_levels{0, 1, 2, 3};
    int heads = 4;
    int gn_groups = 8;
    int d_text = 48;       // token width of the cross-attention context
    int t_emb_dim = 128;   // sinusoidal timestep embedding width
    bool temporal_attention = true;

    int latent_c() const { return 3 * patch * patch; }
    int image_h() const { return latent_h * patch; }
    int image_w() const { return latent_w * patch; }
    int channels(int level) const { return base_channels * channel_mults[size_t(level)]; }
    bool attends(int level) const {
        for (int l : attention_levels)
            if (l == level) return true;
        return false;
    }
};

inline void validate(const DenoiserConfig& c) {
    if (c.patch < 1 || c.latent_h < 1 || c.latent_w < 1)
        throw ConfigError("denoiser: patch and latent dims must be >= 1");
    if (c.channel_mults.size() != 4)
        throw ConfigError("denoiser: need exactly 4 channel multipliers (down0..2, mid)");
    if (c.base_channels < 1 || c.heads < 1 || c.gn_groups < 1)
        throw ConfigError("denoiser: channels/heads/groups must be >= 1");
    if (c.t_emb_dim < 4 || c.t_emb_dim % 2 != 0)
        throw ConfigError("denoiser: t_emb_dim must be even and >= 4");
    if (c.d_text < 1) throw ConfigError("denoiser: d_text must be >= 1");
    for (int l = 0; l < 4; ++l) {
        if (c.channel_mults[size_t(l)] < 1) throw ConfigError("denoiser: multipliers must be >= 1");
        if (c.channels(l) % c.gn_groups != 0)
            throw ConfigError("denoiser: level " + std::to_string(l) +
                              " channels not divisible by gn_groups");
        if (c.attends(l) && c.channels(l) % c.heads != 0)
            throw ConfigError("denoiser: level " + std::to_string(l) +
                              " channels not divisible by head count");
    }
    for (int l : c.attention_levels)
        if (l < 0 || l > 3) throw ConfigError("denoiser: attention level out of range");
    // decoder blocks see the concatenation of the upsampled path and the skip
    for (int l = 0; l < 3; ++l)
        if ((c.channels(l) + c.channels(l + 1)) % c.gn_groups != 0)
            throw ConfigError("denoiser: decoder concat channels not divisible by gn_groups");
}

// shape of the tap output at a level: [C_l, ceil(h/2^l), ceil(w/2^l)]
inline std::vector<int64_t> tap_shape(const DenoiserConfig& c, int level) {
    if (level < 0 || level > 3) throw InvalidArgument("tap_shape: level out of range");
    int64_t h = c.latent_h, w = c.latent_w;
    for (int l = 0; l < level; ++l) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
    }
    return {c.channels(level), h, w};
}

inline json config_to_json(const DenoiserConfig& c) {
    return json{{"patch", c.patch},
                          {"latent_h", c.latent_h},
                          {"latent_w", c.latent_w},
                          {"base_channels", c.base_channels},
                          {"channel_mults", c.channel_mults},
                          {"attention_levels", c.attention_levels},
                          {"heads", c.heads},
                          {"gn_groups", c.gn_groups},
                          {"d_text", c.d_text},
                          {"t_emb_dim", c.t_emb_dim},
                          {"temporal_attention", c.temporal_attention}};
}

inline DenoiserConfig config_from_json(const json& j) {
    DenoiserConfig c;
    c.patch = j.value("patch", c.patch);
    c.latent_h = j.value("latent_h", c.latent_h);
    c.latent_w = j.value("latent_w", c.latent_w);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.channel_mults = j.value("channel_mults", c.channel_mults);
    c.attention_levels = j.value("attention_levels", c.attention_levels);
    c.heads = j.value("heads", c.heads);
    c.gn_groups = j.value("gn_groups", c.gn_groups);
    c.d_text = j.value("d_text", c.d_text);
    c.t_emb_dim = j.value("t_emb_dim", c.t_emb_dim);
    c.temporal_attention = j.value("temporal_attention", c.temporal_attention);
    validate(c);
    return c;
}

// --- patch folding ------------------------------------------------------------------

// [3, h*p, w*p] -> [3*p*p, h, w]; channel index = (c*p + py)*p + px
inline Var patchify(const Var& x, int p) {
    const auto& s = x->val.shape;
    if (x->val.ndim() != 3 || s[1] % p != 0 || s[2] % p != 0)
        throw InvalidArgument("patchify: expected [C,h*p,w*p]");
    int64_t c = s[0], h = s[1] / p, w = s[2] / p;
    Var r = ad::reshape(x, {c, h, p, w, p});
    r = ad::permute(r, {0, 2, 4, 1, 3});
    return ad::reshape(r, {c * p * p, h, w});
}

inline Var unpatchify(const Var& z, int p) {
    const auto& s = z->val.shape;
    if (z->val.ndim() != 3 || s[0] % (p * p) != 0)
        throw InvalidArgument("unpatchify: expected [C*p*p,h,w]");
    int64_t c = s[0] / (p * p), h = s[1], w = s[2];
    Var r = ad::reshape(z, {c, p, p, h, w});
    r = ad::permute(r, {0, 3, 1, 4, 2});
    return ad::reshape(r, {c, h * p, w * p});
}

// --- frame <-> latent ----------------------------------------------------------------

// Fit a corpus frame into the model raster: resize so height matches, zero-pad the
// width (model space is [-1,1], so the pad reads as mid gray). Returns the latent.
inline Tensor frame_to_latent(const img::Image& im, const DenoiserConfig& cfg) {
    int hh = cfg.image_h(), ww = cfg.image_w();
    img::Image r = im;
    if (im.h != hh) {
        int nw = int(std::lround(double(im.w) * hh / double(im.h)));
        r = img::resize_bilinear(im, hh, std::max(1, nw));
    }
    if (r.w > ww)
        throw InvalidArgument("frame_to_latent: frame wider than model raster after resize");
    Tensor px({3, int64_t(hh), int64_t(ww)});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < r.w; ++x)
                px.at(c, y, x) = 2.0 * r.at(y, x, c) - 1.0;
    ad::NoGrad ng;
    return patchify(ad::constant(std::move(px)), cfg.patch)->val;
}

// Unfold a latent back to pixels and crop away the width padding.
inline img::Image latent_to_frame(const Tensor& z, const DenoiserConfig& cfg, int out_h,
                                  int out_w) {
    ad::NoGrad ng;
    Var px = unpatchify(ad::constant(z), cfg.patch);
    const Tensor& t = px->val;
    if (out_h > cfg.image_h() || out_w > cfg.image_w())
        throw InvalidArgument("latent_to_frame: crop larger than model raster");
    img::Image im(out_h, out_w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                double v = 0.5 * (t.at(c, y, x) + 1.0);
                im.at(y, x, c) = std::min(1.0, std::max(0.0, v));
            }
    return im;
}

// --- timestep embedding ---------------------------------------------------------------

inline Tensor timestep_embedding(double t, int dim) {
    int half = dim / 2;
    Tensor e({int64_t(dim)});
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half - 1 > 0 ? half - 1 : 1));
        e[i] = std::sin(t * freq);
        e[half + i] = std::cos(t * freq);
    }
    return e;
}

// --- attention ------------------------------------------------------------------------

// Multi-head attention over token rows. Queries come from q_in [Tq,Cq]; keys/values
// from kv_in [Tk,Ck] (projected to `dim`). The optional additive mask spans the key
// axis. Output projection is zero-initialized so a fresh block starts as identity
// once the caller adds the residual.
inline Var mha(nn::ParamStore& ps, const std::string& name, const Var& q_in, const Var& kv_in,
               int heads, int64_t dim, const Tensor* add_mask = nullptr) {
    if (q_in->val.ndim() != 2 || kv_in->val.ndim() != 2)
        throw InvalidArgument("mha: expected [T,C] token matrices");
    if (dim % heads != 0) throw ConfigError("mha: dim not divisible by heads");
    int64_t qd = q_in->val.shape[1], kd = kv_in->val.shape[1];
    Var q = nn::linear(ps, name + ".q", q_in, qd, dim, /*bias=*/false);
    Var k = nn::linear(ps, name + ".k", kv_in, kd, dim, /*bias=*/false);
    Var v = nn::linear(ps, name + ".v", kv_in, kd, dim, /*bias=*/false);
    int64_t dh = dim / heads;
    double sc = 1.0 / std::sqrt(double(dh));
    std::vector<Var> outs;
    outs.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = ad::slice(q, 1, h * dh, dh);
        Var kh = ad::slice(k, 1, h * dh, dh);
        Var vh = ad::slice(v, 1, h * dh, dh);
        Var logits = ad::scale(ad::matmul(qh, ad::permute(kh, {1, 0})), sc);
        outs.push_back(ad::matmul(ad::softmax_rows(logits, add_mask), vh));
    }
    Var o = heads == 1 ? outs[0] : ad::concat(outs, 1);
    return nn::linear(ps, name + ".out", o, dim, dim, /*bias=*/true, /*zero_init=*/true);
}

// --- forward plumbing -------------------------------------------------------------------

// Identity features injected into tap-level self-attention: one map per tap, shaped
// like that level's activations ([C_l, h_l, w_l]).
struct FusedFeatures {
    std::array<Var, 4> level{};
    bool empty() const { return !level[0] && !level[1] && !level[2] && !level[3]; }
};

// Tokens a frame exposes to its successor, keyed by temporal block name. The sampler
// keeps one state per denoise step; values are detached snapshots.
struct TemporalState {
    std::map<std::string, Tensor> tokens;
};

struct DenoiserTrace {
    std::map<std::string, std::array<int64_t, 2>> attn_tokens;  // block -> {queries, keys}
    std::map<std::string, std::vector<int64_t>> tap_shapes;
};

struct DenoiseInputs {
    double t = 0.0;                             // timestep index
    Var text;                                   // [Tk, d_text] cross-attention context
    const FusedFeatures* fused = nullptr;       // identity K/V injection
    const TemporalState* prev_frame = nullptr;  // previous frame's tokens (video)
    TemporalState* frame_out = nullptr;         // collect this frame's tokens
    bool reference_mode = false;                // encoder-only: no cross/temporal attention
    std::array<Var, 4>* taps = nullptr;         // post-self-attention outputs per level
    DenoiserTrace* trace = nullptr;
};

// --- denoiser ---------------------------------------------------------------------------

class Denoiser {
public:
    Denoiser(nn::ParamStore& ps, DenoiserConfig cfg) : ps_(&ps), cfg_(std::move(cfg)) {
        validate(cfg_);
    }

    const DenoiserConfig& config() const { return cfg_; }
    nn::ParamStore& params() const { return *ps_; }

    // Predict noise for one latent. Output shape equals the input shape.
    Var forward(const Var& z, const DenoiseInputs& in) const {
        check_latent(z);
        if (!in.reference_mode && !in.text)
            throw InvalidArgument("denoiser: conditional pass needs a text context");
        return run(z, in, /*with_decoder=*/true);
    }

    // Encoder-only pass over an un-noised latent at t=0 with conditioning disabled;
    // returns the four tap outputs. This is the reference feature extractor — it
    // shares every weight with the denoising passes.
    FusedFeatures encode_reference(const Var& z0, DenoiserTrace* trace = nullptr) const {
        check_latent(z0);
        FusedFeatures out;
        DenoiseInputs in;
        in.t = 0.0;
        in.reference_mode = true;
        std::array<Var, 4> taps{};
        in.taps = &taps;
        in.trace = trace;
        run(z0, in, /*with_decoder=*/false);
        out.level = taps;
        return out;
    }

private:
    nn::ParamStore* ps_;
    DenoiserConfig cfg_;

    void check_latent(const Var& z) const {
        const auto& s = z->val.shape;
        if (z->val.ndim() != 3 || s[0] != cfg_.latent_c() || s[1] != cfg_.latent_h ||
            s[2] != cfg_.latent_w)
            throw InvalidArgument("denoiser: latent shape mismatch");
    }

    static Var to_tokens(const Var& x) {  // [C,h,w] -> [h*w, C]
        const auto& s = x->val.shape;
        return ad::permute(ad::reshape(x, {s[0], s[1] * s[2]}), {1, 0});
    }
    static Var from_tokens(const Var& t, int64_t c, int64_t h, int64_t w) {
        return ad::reshape(ad::permute(t, {1, 0}), {c, h, w});
    }

    // nearest upsample by 2, cropped to the target shape (handles odd sizes and W=1)
    static Var upsample_to(const Var& x, int64_t th, int64_t tw) {
        Var u = ad::upsample_nearest2(x);
        const auto& s = u->val.shape;
        if (s[1] < th || s[2] < tw) throw InvalidArgument("upsample_to: target too large");
        if (s[1] > th) u = ad::slice(u, 1, 0, th);
        if (s[2] > tw) u = ad::slice(u, 2, 0, tw);
        return u;
    }

    Var resblock(const std::string& name, const Var& x, const Var& temb, int64_t in_c,
                 int64_t out_c) const {
        nn::ParamStore& ps = *ps_;
        Var h = nn::group_norm(ps, name + ".gn1", x, in_c, cfg_.gn_groups);
        h = nn::conv2d(ps, name + ".conv1", ad::silu(h), in_c, out_c, 3, 1, 1);
        Var tb = nn::linear(ps, name + ".temb", ad::silu(temb), cfg_.t_emb_dim, out_c);
        h = ad::add_channel_bias(h, ad::reshape(tb, {out_c}));
        h = nn::group_norm(ps, name + ".gn2", h, out_c, cfg_.gn_groups);
        h = nn::conv2d(ps, name + ".conv2", ad::silu(h), out_c, out_c, 3, 1, 1,
                       /*zero_init=*/true);
        Var skip = in_c == out_c ? x : nn::conv2d(ps, name + ".skip", x, in_c, out_c, 1, 1, 0);
        return ad::add(skip, h);
    }

    // self-attention with optional identity K/V injection; result is the tap output
    Var self_attn(const std::string& name, int level, Var x, const DenoiseInputs& in) const {
        nn::ParamStore& ps = *ps_;
        const auto& s = x->val.shape;
        int64_t c = s[0], h = s[1], w = s[2];
        Var n = nn::group_norm(ps, name + ".norm", x, c, cfg_.gn_groups);
        Var q = to_tokens(n);
        Var kv = q;
        if (in.fused && in.fused->level[size_t(level)]) {
            // normalize injected features with the same affine so K/V stay in one regime
            Var f = in.fused->level[size_t(level)];
            if (f->val.shape != x->val.shape)
                throw InvalidArgument("denoiser: fused feature shape mismatch at level " +
                                      std::to_string(level));
            kv = ad::concat({q, to_tokens(nn::group_norm(ps, name + ".norm", f, c,
                                                         cfg_.gn_groups))},
                            0);
        }
        if (in.trace)
            in.trace->attn_tokens[name] = {q->val.shape[0], kv->val.shape[0]};
        Var out = ad::add(x, from_tokens(mha(ps, name, q, kv, cfg_.heads, c), c, h, w));
        if (in.taps) (*in.taps)[size_t(level)] = out;
        if (in.trace) in.trace->tap_shapes["tap" + std::to_string(level)] = out->val.shape;
        return out;
    }

    Var cross_attn(const std::string& name, Var x, const DenoiseInputs& in) const {
        nn::ParamStore& ps = *ps_;
        const auto& s = x->val.shape;
        int64_t c = s[0], h = s[1], w = s[2];
        if (in.text->val.ndim() != 2 || in.text->val.shape[1] != cfg_.d_text)
            throw InvalidArgument("denoiser: text context must be [tokens, d_text]");
        Var n = nn::group_norm(ps, name + ".norm", x, c, cfg_.gn_groups);
        Var q = to_tokens(n);
        if (in.trace)
            in.trace->attn_tokens[name] = {q->val.shape[0], in.text->val.shape[0]};
        return ad::add(x, from_tokens(mha(ps, name, q, in.text, cfg_.heads, c), c, h, w));
    }

    // Attend over [own tokens, previous frame's tokens]. The first frame has no
    // predecessor and skips the block entirely, which keeps single-frame sampling
    // and video frame 0 on the same code path bit for bit.
    Var temporal_attn(const std::string& name, Var x, const DenoiseInputs& in) const {
        if (!cfg_.temporal_attention || in.reference_mode) return x;
        nn::ParamStore& ps = *ps_;
        const auto& s = x->val.shape;
        int64_t c = s[0], h = s[1], w = s[2];
        const Tensor* prev = nullptr;
        if (in.prev_frame) {
            auto it = in.prev_frame->tokens.find(name);
            if (it != in.prev_frame->tokens.end()) prev = &it->second;
        }
        if (!prev && !in.frame_out) return x;
        Var n = nn::group_norm(ps, name + ".norm", x, c, cfg_.gn_groups);
        Var tok = to_tokens(n);
        if (in.frame_out) in.frame_out->tokens[name] = tok->val;  // detached snapshot
        if (!prev) return x;
        Var kv = ad::concat({tok, ad::constant(*prev)}, 0);
        if (in.trace)
            in.trace->attn_tokens[name] = {tok->val.shape[0], kv->val.shape[0]};
        return ad::add(x, from_tokens(mha(ps, name, tok, kv, cfg_.heads, c), c, h, w));
    }

    Var level_attn(const std::string& base, int level, Var x, const DenoiseInputs& in) const {
        if (!cfg_.attends(level)) return x;
        x = self_attn(base + ".attn", level, x, in);
        if (in.reference_mode) return x;
        x = cross_attn(base + ".xattn", x, in);
        x = temporal_attn(base + ".tattn", x, in);
        return x;
    }

    Var run(const Var& z, const DenoiseInputs& in, bool with_decoder) const {
        nn::ParamStore& ps = *ps_;
        int64_t cz = cfg_.latent_c();

        Var t0 = ad::constant(timestep_embedding(in.t, cfg_.t_emb_dim)
                                  .reshaped({1, int64_t(cfg_.t_emb_dim)}));
        Var temb = nn::linear(ps, "unet.temb.fc2",
                              ad::silu(nn::linear(ps, "unet.temb.fc1", t0, cfg_.t_emb_dim,
                                                  cfg_.t_emb_dim)),
                              cfg_.t_emb_dim, cfg_.t_emb_dim);

        Var x = nn::conv2d(ps, "unet.in", z, cz, cfg_.channels(0), 3, 1, 1);
        std::array<Var, 3> skips{};
        for (int l = 0; l < 3; ++l) {
            std::string base = "unet.down" + std::to_string(l);
            x = resblock(base + ".res", x, temb, cfg_.channels(l), cfg_.channels(l));
            x = level_attn(base, l, x, in);
            skips[size_t(l)] = x;
            x = nn::conv2d(ps, base + ".pool", x, cfg_.channels(l), cfg_.channels(l + 1), 3, 2,
                           1);
        }
        x = resblock("unet.mid.res1", x, temb, cfg_.channels(3), cfg_.channels(3));
        x = level_attn("unet.mid", 3, x, in);
        x = resblock("unet.mid.res2", x, temb, cfg_.channels(3), cfg_.channels(3));
        if (!with_decoder) return x;

        for (int l = 2; l >= 0; --l) {
            const Var& skip = skips[size_t(l)];
            x = upsample_to(x, skip->val.shape[1], skip->val.shape[2]);
            x = ad::concat({x, skip}, 0);
            x = resblock("unet.up" + std::to_string(l), x, temb,
                         cfg_.channels(l + 1) + cfg_.channels(l), cfg_.channels(l));
        }
        x = nn::group_norm(ps, "unet.out.gn", x, cfg_.channels(0), cfg_.gn_groups);
        return nn::conv2d(ps, "unet.out", ad::silu(x), cfg_.channels(0), cz, 3, 1, 1,
                          /*zero_init=*/true);
    }
};

}  // namespace pedgen::unet
