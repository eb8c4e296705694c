#pragma once
// Non-identity guidance for the denoiser: spatial encoders for skeleton rasters and
// background plates, a closed-template text embedding carrying attributes and
// modality, a single identity-context token from the corpus-trained embedder, and
// the condition-dropout wiring that swaps dropped groups for learned null
// embeddings (so downstream shapes never change and classifier-free guidance has a
// real unconditional branch).

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pedgen/autodiff.hpp"
#include "pedgen/fuser.hpp"
#include "pedgen/image.hpp"
#include "pedgen/metrics.hpp"
#include "pedgen/nn.hpp"
#include "pedgen/unet.hpp"

namespace pedgen::cond {

using ad::Var;
using json = nlohmann::json;

// --- vocabulary ---------------------------------------------------------------------

// Fixed word list for the prompt template. Index 0 is the unknown token, which
// absorbs any attribute value outside the list. The hash pins checkpoints to the
// vocabulary they were trained with.
struct Vocabulary {
    int version = 1;
    int max_tokens = 16;
    std::vector<std::string> words;

    static Vocabulary builtin() {
        Vocabulary v;
        v.words = {"<unk>",  "a",     "photo", "of",     "person", "torso",
                   "legs",   "with",  "backpack", "carrying", "item",  "rgb",
                   "infrared", "black", "white", "gray",   "red",    "green",
                   "blue",   "yellow", "orange", "purple", "pink",   "brown",
                   "cyan"};
        return v;
    }

    int id(const std::string& w) const {
        for (size_t i = 0; i < words.size(); ++i)
            if (words[i] == w) return int(i);
        return 0;
    }

    std::string hash() const {
        uint64_t h = fnv1a64("vocab/v" + std::to_string(version));
        h = fnv1a64_mix(h, std::to_string(max_tokens));
        for (const auto& w : words) h = fnv1a64_mix(h, w);
        return hex64(h);
    }
};

inline json vocab_to_json(const Vocabulary& v) {
    return json{{"version", v.version}, {"max_tokens", v.max_tokens}, {"words", v.words}};
}

inline Vocabulary vocab_from_json(const json& j) {
    Vocabulary v;
    v.version = j.value("version", 1);
    v.max_tokens = j.value("max_tokens", 16);
    if (!j.contains("words") || !j.at("words").is_array() || j.at("words").empty())
        throw SchemaError("vocabulary: missing word list");
    v.words = j.at("words").get<std::vector<std::string>>();
    if (v.words[0] != "<unk>") throw SchemaError("vocabulary: first word must be <unk>");
    if (v.max_tokens < 4) throw SchemaError("vocabulary: max_tokens too small");
    return v;
}

inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(path + ": " + e.what());
    }
    return vocab_from_json(j);
}

// --- text ------------------------------------------------------------------------------

// "a {modality} photo of a person, torso {color}, legs {color}
//  [, with a backpack][, carrying an item]" — articles and commas dropped at
// tokenization, attribute values UNK-mapped when off-vocabulary.
inline std::vector<int> tokenize_prompt(const std::map<std::string, std::string>& attributes,
                                        const std::string& modality, const Vocabulary& vocab) {
    if (modality != "rgb" && modality != "ir")
        throw InvalidArgument("tokenize_prompt: modality must be rgb or ir");
    std::vector<std::string> ws = {"a", modality == "ir" ? "infrared" : "rgb", "photo", "of",
                                   "a", "person"};
    auto attr = [&](const char* k) {
        auto it = attributes.find(k);
        return it == attributes.end() ? std::string() : it->second;
    };
    if (std::string c = attr("torso_color"); !c.empty()) {
        ws.push_back("torso");
        ws.push_back(c);
    }
    if (std::string c = attr("leg_color"); !c.empty()) {
        ws.push_back("legs");
        ws.push_back(c);
    }
    if (attr("backpack") == "yes") {
        ws.push_back("with");
        ws.push_back("backpack");
    }
    if (attr("carried_item") == "yes") {
        ws.push_back("carrying");
        ws.push_back("item");
    }
    if (int(ws.size()) > vocab.max_tokens)
        throw InvalidArgument("tokenize_prompt: template exceeds max_tokens");
    std::vector<int> ids;
    ids.reserve(ws.size());
    for (const auto& w : ws) ids.push_back(vocab.id(w));
    return ids;
}

// learned token + positional embeddings -> [tokens, d_text]
inline Var encode_text(nn::ParamStore& ps, const Vocabulary& vocab,
                       const std::map<std::string, std::string>& attributes,
                       const std::string& modality, int d_text) {
    std::vector<int> ids = tokenize_prompt(attributes, modality, vocab);
    Var table = ps.get("text.tok", {int64_t(vocab.words.size()), int64_t(d_text)},
                       nn::Init::normal(0.02));
    Var pos = ps.get("text.pos", {int64_t(vocab.max_tokens), int64_t(d_text)},
                     nn::Init::normal(0.02));
    return ad::add(ad::embedding(table, ids), ad::slice(pos, 0, 0, int64_t(ids.size())));
}

// --- spatial encoders ---------------------------------------------------------------------

// Map a raster to [0,1] planes on the model raster: resize to the model height,
// zero-pad the width. No value recentering — an empty raster stays exactly zero.
inline Tensor raster_to_planes(const img::Image& im, int hh, int ww) {
    img::Image r = im;
    if (im.h != hh) {
        int nw = int(std::lround(double(im.w) * hh / double(im.h)));
        r = img::resize_bilinear(im, hh, std::max(1, nw));
    }
    if (r.w > ww) throw InvalidArgument("raster_to_planes: raster wider than model raster");
    Tensor px({3, int64_t(hh), int64_t(ww)});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < hh; ++y)
            for (int x = 0; x < r.w; ++x) px.at(c, y, x) = r.at(y, x, c);
    return px;
}

// Four conv blocks, channels 16/32/64/128, with stride-2 blocks spread to match
// the patch size (default (2,2,2,1) for 8x), then a 1x1 projection to the latent
// channel count. Output spatial size = input / downsample, i.e. the latent grid.
inline Var encode_spatial(nn::ParamStore& ps, const std::string& name, const Var& planes,
                          int latent_c, int downsample = 8) {
    const auto& s = planes->val.shape;
    if (planes->val.ndim() != 3 || s[0] != 3)
        throw InvalidArgument(name + ": expected [3,H,W] planes");
    if (s[1] % downsample != 0 || s[2] % downsample != 0)
        throw InvalidArgument(name + ": raster dims must be divisible by the patch size");
    static const int ch[4] = {16, 32, 64, 128};
    int st[4], rem = downsample;
    for (int b = 0; b < 4; ++b) {
        st[b] = rem > 1 ? 2 : 1;
        rem /= st[b];
    }
    if (rem != 1) throw InvalidArgument(name + ": patch size must be a power of two <= 16");
    Var x = planes;
    int in_c = 3;
    for (int b = 0; b < 4; ++b) {
        x = ad::silu(nn::conv2d(ps, name + ".conv" + std::to_string(b), x, in_c, ch[b], 3,
                                st[b], 1));
        in_c = ch[b];
    }
    return nn::conv2d(ps, name + ".proj", x, in_c, latent_c, 1, 1, 0);
}

inline Var encode_pose(nn::ParamStore& ps, const Var& skeleton_planes, int latent_c,
                       int downsample = 8) {
    return encode_spatial(ps, "pose", skeleton_planes, latent_c, downsample);
}

inline Var encode_background(nn::ParamStore& ps, const Var& plate_planes, int latent_c,
                             int downsample = 8) {
    return encode_spatial(ps, "bg", plate_planes, latent_c, downsample);
}

inline Var combine_spatial(const Var& e_pose, const Var& e_bg) {
    if (e_pose->val.shape != e_bg->val.shape)
        throw InvalidArgument("combine_spatial: shape mismatch");
    return ad::add(e_pose, e_bg);
}

// --- identity context ------------------------------------------------------------------------

// One unit-norm token from the frozen corpus embedder, linearly projected to the
// text width; appended to the text tokens as extra cross-attention K/V. The raw
// embedding variant lets training loops cache the frozen embedder's output.
inline Var identity_ctx_from_embedding(nn::ParamStore& ps, const std::vector<double>& e,
                                       int d_text) {
    Tensor t({1, int64_t(e.size())});
    t.data = e;
    Var proj = nn::linear(ps, "idctx.proj", ad::constant(std::move(t)), int64_t(e.size()),
                          int64_t(d_text));
    return ad::reshape(ad::l2_normalize(proj), {1, int64_t(d_text)});
}

inline Var encode_identity_ctx(nn::ParamStore& ps, metrics::IdentityEmbedder& embedder,
                               const img::Image& reference, int d_text) {
    return identity_ctx_from_embedding(ps, embedder.embed(reference), d_text);
}

// --- condition bundle -----------------------------------------------------------------------

struct DropoutPolicy {
    double p_identity = 0.1;
    double p_spatial = 0.1;
    double p_text = 0.1;
    double p_bg_mask = 0.5;  // background alone, on top of the group dropout
};

inline void validate(const DropoutPolicy& p) {
    for (double v : {p.p_identity, p.p_spatial, p.p_text, p.p_bg_mask})
        if (!(v >= 0.0 && v <= 1.0))
            throw ConfigError("dropout policy: probabilities must lie in [0,1]");
}

struct ConditionBundle {
    fuser::FusedIdentity fused;  // injected at the tap self-attention blocks
    Var identity_ctx;            // [1, d_text]
    Var pose;                    // [C_z, H_z, W_z]
    Var background;              // [C_z, H_z, W_z]
    Var spatial;                 // pose + background
    Var text;                    // [tokens, d_text]
    struct {
        bool identity = false;
        bool spatial = false;
        bool text = false;
        bool background = false;
    } dropped;

    // cross-attention context: text tokens plus the identity token
    Var text_kv() const { return ad::concat({text, identity_ctx}, 0); }
};

// learned null replacements, one per droppable piece
inline fuser::FusedIdentity null_fused(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    static const char* kLevelName[4] = {"down0", "down1", "down2", "mid"};
    fuser::FusedIdentity out;
    for (int l = 0; l < 4; ++l)
        out.level[size_t(l)] = ps.get(std::string("null.fused.") + kLevelName[l],
                                      unet::tap_shape(dc, l), nn::Init::zeros());
    return out;
}

inline Var null_identity_ctx(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    return ps.get("null.idctx", {1, int64_t(dc.d_text)}, nn::Init::zeros());
}

inline Var null_text(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    return ps.get("null.text", {1, int64_t(dc.d_text)}, nn::Init::zeros());
}

inline Var null_spatial(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    return ps.get("null.spatial", {int64_t(dc.latent_c()), int64_t(dc.latent_h),
                                   int64_t(dc.latent_w)},
                  nn::Init::zeros());
}

inline Var null_background(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    return ps.get("null.bg", {int64_t(dc.latent_c()), int64_t(dc.latent_h),
                              int64_t(dc.latent_w)},
                  nn::Init::zeros());
}

// Everything nulled: the unconditional branch for classifier-free guidance.
inline ConditionBundle unconditional_bundle(nn::ParamStore& ps, const unet::DenoiserConfig& dc) {
    ConditionBundle b;
    b.fused = null_fused(ps, dc);
    b.identity_ctx = null_identity_ctx(ps, dc);
    b.pose = null_spatial(ps, dc);  // whole-spatial null; pose/bg kept for shape symmetry
    b.background = null_background(ps, dc);
    b.spatial = null_spatial(ps, dc);
    b.text = null_text(ps, dc);
    b.dropped = {true, true, true, true};
    return b;
}

struct DropoutFlags {
    bool identity = false;
    bool spatial = false;
    bool text = false;
    bool background = false;
};

// Exactly four Bernoulli draws in a fixed order (identity, spatial, text,
// background), so the random stream is stable no matter which groups fire. Video
// clips draw once per sample and apply the same flags to every frame.
inline DropoutFlags draw_dropout(const DropoutPolicy& p, Rng& rng) {
    validate(p);
    DropoutFlags f;
    f.identity = rng.bernoulli(p.p_identity);
    f.spatial = rng.bernoulli(p.p_spatial);
    f.text = rng.bernoulli(p.p_text);
    f.background = rng.bernoulli(p.p_bg_mask);
    return f;
}

// Identity drops fused features and the context token jointly; a spatial drop
// replaces the whole sum, otherwise a background drop swaps only the plate term
// and re-derives the sum.
inline ConditionBundle apply_dropout_flags(const ConditionBundle& in, const DropoutFlags& f,
                                           nn::ParamStore& ps,
                                           const unet::DenoiserConfig& dc) {
    ConditionBundle out = in;
    if (f.identity) {
        out.fused = null_fused(ps, dc);
        out.identity_ctx = null_identity_ctx(ps, dc);
        out.dropped.identity = true;
    }
    if (f.text) {
        out.text = null_text(ps, dc);
        out.dropped.text = true;
    }
    if (f.spatial) {
        out.spatial = null_spatial(ps, dc);
        out.dropped.spatial = true;
    } else if (f.background) {
        out.background = null_background(ps, dc);
        out.spatial = combine_spatial(out.pose, out.background);
    }
    if (f.background) out.dropped.background = true;
    return out;
}

inline ConditionBundle apply_condition_dropout(const ConditionBundle& in,
                                               const DropoutPolicy& p, Rng& rng,
                                               nn::ParamStore& ps,
                                               const unet::DenoiserConfig& dc) {
    return apply_dropout_flags(in, draw_dropout(p, rng), ps, dc);
}

}  // namespace pedgen::cond
