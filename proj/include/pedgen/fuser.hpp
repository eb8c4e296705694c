#pragma once
// Multi-reference identity fusion.
//
// Each reference image runs through the denoiser encoder (same weights, cross- and
// temporal attention off, t = 0) and the four tap outputs are stacked into a
// FeaturePyramid. The pyramid collapses to one map per level: the two
// high-resolution levels use a channel gate computed from joint avg/max pooling over
// all unmasked references (so the gate is shared and reference order cannot matter),
// the two semantic levels concatenate all reference tokens into one self-attention
// pass. Both end in a mask-weighted mean over the reference axis. The result is
// injected back into the denoiser by K/V concatenation at the same four blocks.

#include <array>
#include <string>
#include <vector>

#include "pedgen/autodiff.hpp"
#include "pedgen/nn.hpp"
#include "pedgen/unet.hpp"

namespace pedgen::fuser {

using ad::Var;

// per-reference multi-level features; level l is [N, C_l, h_l, w_l]
struct FeaturePyramid {
    std::array<Var, 4> level{};
    std::vector<uint8_t> mask;  // live (vs zero-padded) reference slots

    int64_t refs() const { return level[0] ? level[0]->val.shape[0] : 0; }
};

using FusedIdentity = unet::FusedFeatures;  // reference axis collapsed

// Encoder passes over un-noised reference latents; optional padding up to a fixed
// slot count (padded slots are zero maps with mask false).
inline FeaturePyramid extract_reference_features(const unet::Denoiser& den,
                                                 const std::vector<Tensor>& ref_latents,
                                                 int pad_to = 0) {
    if (ref_latents.empty())
        throw InvalidArgument("extract_reference_features: no reference latents");
    size_t total = std::max(ref_latents.size(), size_t(pad_to));
    FeaturePyramid pyr;
    pyr.mask.assign(total, 0);
    std::array<std::vector<Var>, 4> stacks;
    for (size_t i = 0; i < ref_latents.size(); ++i) {
        FusedIdentity taps = den.encode_reference(ad::constant(ref_latents[i]));
        for (int l = 0; l < 4; ++l) {
            const auto& s = taps.level[size_t(l)]->val.shape;
            stacks[size_t(l)].push_back(
                ad::reshape(taps.level[size_t(l)], {1, s[0], s[1], s[2]}));
        }
        pyr.mask[i] = 1;
    }
    for (size_t i = ref_latents.size(); i < total; ++i)
        for (int l = 0; l < 4; ++l) {
            auto s = unet::tap_shape(den.config(), l);
            stacks[size_t(l)].push_back(
                ad::constant(Tensor({1, s[0], s[1], s[2]})));
        }
    for (int l = 0; l < 4; ++l) pyr.level[size_t(l)] = ad::concat(stacks[size_t(l)], 0);
    return pyr;
}

// Channel-gated fusion for the high-resolution levels. Avg- and max-pool jointly
// over (reference, h, w) of the unmasked slots, push both descriptors through one
// shared bottleneck MLP, sum, sigmoid: a per-channel gate applied to every slot
// before the mask-weighted mean.
inline Var fuse_low(nn::ParamStore& ps, const std::string& name, const Var& x,
                    const std::vector<uint8_t>& mask, int reduction = 8) {
    if (x->val.ndim() != 4) throw InvalidArgument("fuse_low: expected [N,C,h,w]");
    int64_t c = x->val.shape[1];
    int64_t hid = std::max<int64_t>(1, c / reduction);
    Var avg = ad::reshape(ad::masked_global_avg(x, mask), {1, c});
    Var mx = ad::reshape(ad::masked_global_max(x, mask), {1, c});
    auto mlp = [&](const Var& d) {
        Var h = nn::linear(ps, name + ".fc1", d, c, hid, /*bias=*/false);
        return nn::linear(ps, name + ".fc2", ad::relu(h), hid, c, /*bias=*/false);
    };
    Var gate = ad::sigmoid(ad::reshape(ad::add(mlp(avg), mlp(mx)), {c}));
    return ad::masked_mean_refs(ad::scale_channels(x, gate), mask);
}

// Token fusion for the semantic levels. All slots flatten to h*w tokens each and the
// whole sequence self-attends (no cross-reference positions, so order cannot enter);
// masked slots are shut out with a large negative additive mask and skipped by the
// final mean. Tokens keep a residual path so the fused map carries the reference
// content even before the attention has trained.
inline Var fuse_high(nn::ParamStore& ps, const std::string& name, const Var& x,
                     const std::vector<uint8_t>& mask, int heads = 4) {
    if (x->val.ndim() != 4) throw InvalidArgument("fuse_high: expected [N,C,h,w]");
    int64_t n = x->val.shape[0], c = x->val.shape[1], h = x->val.shape[2],
            w = x->val.shape[3];
    if (mask.size() != size_t(n)) throw InvalidArgument("fuse_high: mask size mismatch");
    int64_t hw = h * w;
    Var tok = ad::reshape(ad::permute(ad::reshape(x, {n, c, hw}), {0, 2, 1}), {n * hw, c});
    Tensor am({n * hw});
    for (int64_t i = 0; i < n; ++i)
        if (!mask[size_t(i)])
            for (int64_t t = 0; t < hw; ++t) am[i * hw + t] = -1e30;
    Var normed = nn::layer_norm(ps, name + ".norm", tok, c);
    Var att = unet::mha(ps, name + ".attn", normed, normed, heads, c, &am);
    Var regrouped = ad::reshape(
        ad::permute(ad::reshape(ad::add(tok, att), {n, hw, c}), {0, 2, 1}), {n, c, h, w});
    return ad::masked_mean_refs(regrouped, mask);
}

// Collapse a pyramid to one map per level.
inline FusedIdentity fuse(nn::ParamStore& ps, const FeaturePyramid& pyr, int heads = 4,
                          int reduction = 8) {
    static const char* kLevelName[4] = {"down0", "down1", "down2", "mid"};
    for (int l = 0; l < 4; ++l)
        if (!pyr.level[size_t(l)]) throw InvalidArgument("fuse: pyramid level missing");
    FusedIdentity out;
    for (int l = 0; l < 4; ++l) {
        std::string name = std::string("fuse.") + kLevelName[l];
        out.level[size_t(l)] =
            l < 2 ? fuse_low(ps, name, pyr.level[size_t(l)], pyr.mask, reduction)
                  : fuse_high(ps, name, pyr.level[size_t(l)], pyr.mask, heads);
    }
    return out;
}

}  // namespace pedgen::fuser
