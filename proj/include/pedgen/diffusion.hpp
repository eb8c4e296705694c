#pragma once
// Conditional denoising diffusion: the linear-beta schedule, the forward
// (noising) process, classifier-free guidance, ancestral and deterministic
// reverse samplers with per-step temporal token chains for video, and the
// training step (noise-prediction MSE with condition dropout, video clips
// averaged over frames).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pedgen/autodiff.hpp"
#include "pedgen/conditioning.hpp"
#include "pedgen/fuser.hpp"
#include "pedgen/nn.hpp"
#include "pedgen/unet.hpp"

namespace pedgen::diff {

using ad::Var;
using json = nlohmann::json;

// --- schedule ---------------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;  // cumulative products of (1 - beta)
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidArgument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw InvalidArgument("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(size_t(T));
    s.alphas_bar.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        s.betas[size_t(t)] = b;
        prod *= 1.0 - b;
        s.alphas_bar[size_t(t)] = prod;
    }
    return s;
}

inline Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.T) throw InvalidArgument("q_sample: t out of range");
    if (z0.shape != eps.shape) throw InvalidArgument("q_sample: shape mismatch");
    double ab = s.alphas_bar[size_t(t)];
    double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    Tensor z = z0;
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = sa * z0[i] + sn * eps[i];
    return z;
}

// eps_uncond + w * (eps_cond - eps_uncond); w in {0,1} short-circuits so the
// identities hold bit-exactly.
inline Tensor cfg_epsilon(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    if (eps_cond.shape != eps_uncond.shape) throw InvalidArgument("cfg_epsilon: shape mismatch");
    if (w == 1.0) return eps_cond;
    if (w == 0.0) return eps_uncond;
    Tensor out = eps_uncond;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// --- sampler config -----------------------------------------------------------------

struct SamplerConfig {
    std::string method = "deterministic";  // or "ancestral"
    int steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
};

inline void validate(const SamplerConfig& c, int T) {
    if (c.method != "deterministic" && c.method != "ancestral")
        throw ConfigError("sampler: method must be deterministic or ancestral");
    if (c.steps < 1 || c.steps > T)
        throw ConfigError("sampler: steps must lie in [1, T]");
    if (!(c.guidance >= 0.0)) throw ConfigError("sampler: guidance must be >= 0");
}

inline json sampler_to_json(const SamplerConfig& c) {
    return json{{"method", c.method},
                {"steps", c.steps},
                {"guidance", c.guidance},
                {"seed", c.seed}};
}

inline SamplerConfig sampler_from_json(const json& j) {
    SamplerConfig c;
    c.method = j.value("method", c.method);
    c.steps = j.value("steps", c.steps);
    c.guidance = j.value("guidance", c.guidance);
    c.seed = j.value("seed", c.seed);
    return c;
}

// evenly spaced timestep subsequence, ascending; callers iterate it in reverse
inline std::vector<int> sampler_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw InvalidArgument("sampler_timesteps: steps out of range");
    std::vector<int> ts(static_cast<size_t>(steps), 0);
    for (int k = 0; k < steps; ++k)
        ts[size_t(k)] = steps == 1 ? T - 1 : int(int64_t(k) * (T - 1) / (steps - 1));
    return ts;
}

// --- denoise wrapper -------------------------------------------------------------------

// One conditional prediction: spatial guidance is added to the noisy latent before
// the first block; fused identity features ride the tap self-attentions; the
// cross-attention context is text tokens plus the identity token.
inline Var denoise(const unet::Denoiser& den, const Var& z_t, int t,
                   const cond::ConditionBundle& b,
                   const unet::TemporalState* prev_frame = nullptr,
                   unet::TemporalState* frame_out = nullptr) {
    if (!b.spatial || b.spatial->val.shape != z_t->val.shape)
        throw InvalidArgument("denoise: spatial embedding must match the latent shape");
    unet::DenoiseInputs in;
    in.t = double(t);
    in.text = b.text_kv();
    in.fused = &b.fused;
    in.prev_frame = prev_frame;
    in.frame_out = frame_out;
    return den.forward(ad::add(z_t, b.spatial), in);
}

// --- reverse process ---------------------------------------------------------------------

// Temporal token chains for one frame, per guidance branch, indexed by sampler step.
struct TemporalChain {
    std::vector<unet::TemporalState> cond;
    std::vector<unet::TemporalState> uncond;
};

namespace detail_diff {

// Shared reverse loop. Draws the initial latent and any ancestral noise from `rng`
// in a fixed order, so a video frame consumes exactly the draws a single image
// would. `prev`/`out` thread the temporal K/V chains between frames.
inline Tensor reverse_process(const unet::Denoiser& den, const cond::ConditionBundle& bundle,
                              const cond::ConditionBundle& uncond, const NoiseSchedule& sched,
                              const SamplerConfig& sc, Rng& rng, const TemporalChain* prev,
                              TemporalChain* out) {
    ad::NoGrad ng;
    const auto& dc = den.config();
    std::vector<int> ts = sampler_timesteps(sched.T, sc.steps);
    size_t S = ts.size();
    if (out) {
        out->cond.assign(S, {});
        out->uncond.assign(S, {});
    }
    Tensor x = randn({int64_t(dc.latent_c()), int64_t(dc.latent_h), int64_t(dc.latent_w)}, rng);
    for (size_t k = S; k-- > 0;) {
        int t = ts[k];
        Var zv = ad::constant(x);
        const unet::TemporalState* pc = prev && k < prev->cond.size() ? &prev->cond[k] : nullptr;
        unet::TemporalState* oc = out ? &out->cond[k] : nullptr;
        Tensor eps = denoise(den, zv, t, bundle, pc, oc)->val;
        if (sc.guidance != 1.0) {
            const unet::TemporalState* pu =
                prev && k < prev->uncond.size() ? &prev->uncond[k] : nullptr;
            unet::TemporalState* ou = out ? &out->uncond[k] : nullptr;
            Tensor eps_u = denoise(den, zv, t, uncond, pu, ou)->val;
            eps = cfg_epsilon(eps, eps_u, sc.guidance);
        }
        double ab_t = sched.alphas_bar[size_t(t)];
        double sa = std::sqrt(ab_t), sn = std::sqrt(1.0 - ab_t);
        Tensor x0 = x;
        for (int64_t i = 0; i < x.numel(); ++i) {
            double v = (x[i] - sn * eps[i]) / sa;
            x0[i] = std::min(1.0, std::max(-1.0, v));  // clamp to the pixel range
        }
        if (k == 0) {
            x = std::move(x0);
            break;
        }
        double ab_p = sched.alphas_bar[size_t(ts[k - 1])];
        if (sc.method == "deterministic") {
            double pa = std::sqrt(ab_p), pn = std::sqrt(1.0 - ab_p);
            for (int64_t i = 0; i < x.numel(); ++i) x[i] = pa * x0[i] + pn * eps[i];
        } else {
            double var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
            double sigma = std::sqrt(std::max(var, 0.0));
            double dir = std::sqrt(std::max(1.0 - ab_p - sigma * sigma, 0.0));
            double pa = std::sqrt(ab_p);
            Tensor noise = randn(x.shape, rng);
            for (int64_t i = 0; i < x.numel(); ++i)
                x[i] = pa * x0[i] + dir * eps[i] + sigma * noise[i];
        }
    }
    return x;
}

}  // namespace detail_diff

// One image latent from seeded noise. Deterministic given (seed, config, params).
inline Tensor sample_image_latent(const unet::Denoiser& den, const cond::ConditionBundle& bundle,
                                  const cond::ConditionBundle& uncond,
                                  const NoiseSchedule& sched, const SamplerConfig& sc) {
    validate(sc, sched.T);
    Rng rng(sc.seed);
    return detail_diff::reverse_process(den, bundle, uncond, sched, sc, rng, nullptr, nullptr);
}

// Frame latents in order; every frame attends to the previous frame's per-step
// tokens (frame 0 has none and runs exactly like a single image, so a length-1
// clip is bit-identical to sample_image_latent at the same seed).
inline std::vector<Tensor> sample_video_latents(const unet::Denoiser& den,
                                                const std::vector<cond::ConditionBundle>& frames,
                                                const cond::ConditionBundle& uncond,
                                                const NoiseSchedule& sched,
                                                const SamplerConfig& sc) {
    if (frames.empty()) throw InvalidArgument("sample_video: empty pose sequence");
    validate(sc, sched.T);
    Rng rng(sc.seed);
    std::vector<Tensor> out;
    out.reserve(frames.size());
    TemporalChain a, b;
    TemporalChain* prev = nullptr;
    TemporalChain* cur = &a;
    for (const auto& bundle : frames) {
        out.push_back(
            detail_diff::reverse_process(den, bundle, uncond, sched, sc, rng, prev, cur));
        prev = cur;
        cur = cur == &a ? &b : &a;
    }
    return out;
}

// --- training --------------------------------------------------------------------------

// One target frame: the clean latent and its skeleton raster planes.
struct TrainFrame {
    Tensor z0;
    Tensor pose_planes;  // [3, H, W]
};

// A training item: one frame for image batches, several for a video clip. The
// conditioning (references, background, prompt, identity embedding) is shared
// across a clip's frames.
struct TrainSample {
    std::vector<TrainFrame> frames;
    Tensor bg_planes;                  // [3, H, W] background plate
    std::vector<Tensor> ref_latents;   // selected (and augmented) references
    std::vector<double> id_embedding;  // frozen embedder output for the same-cam ref
    std::map<std::string, std::string> attributes;
    std::string modality = "rgb";
};

// Test seam: stands in for the denoiser when measuring the loss plumbing.
using Predictor =
    std::function<Var(size_t sample, size_t frame, const Var& z_t, int t,
                      const cond::ConditionBundle& bundle)>;

struct TrainStepResult {
    double loss = 0.0;
    std::vector<int> timesteps;  // one per sample
};

// Shared part of the condition bundle for one sample (pose filled per frame).
inline cond::ConditionBundle sample_bundle(nn::ParamStore& ps, const unet::Denoiser& den,
                                           const cond::Vocabulary& vocab, const TrainSample& s,
                                           int fuse_heads, int fuse_reduction) {
    const auto& dc = den.config();
    cond::ConditionBundle b;
    fuser::FeaturePyramid pyr = fuser::extract_reference_features(den, s.ref_latents);
    b.fused = fuser::fuse(ps, pyr, fuse_heads, fuse_reduction);
    b.text = cond::encode_text(ps, vocab, s.attributes, s.modality, dc.d_text);
    b.identity_ctx = cond::identity_ctx_from_embedding(ps, s.id_embedding, dc.d_text);
    b.background = cond::encode_background(ps, ad::constant(s.bg_planes), dc.latent_c(), dc.patch);
    return b;
}

// One optimizer update over a batch. Per sample: one uniform timestep, one dropout
// draw (shared across a clip's frames), fresh noise per frame; loss is the mean
// over samples of the per-sample frame-mean MSE between drawn and predicted noise.
inline TrainStepResult train_step(const unet::Denoiser& den, nn::ParamStore& ps, nn::Adam& opt,
                                  const cond::Vocabulary& vocab,
                                  const std::vector<TrainSample>& batch,
                                  const NoiseSchedule& sched,
                                  const cond::DropoutPolicy& policy, Rng& rng,
                                  int fuse_heads = 4, int fuse_reduction = 8,
                                  const Predictor* predictor = nullptr,
                                  int64_t step_index = -1) {
    if (batch.empty()) throw InvalidArgument("train_step: empty batch");
    const auto& dc = den.config();
    ps.zero_grads();
    TrainStepResult res;
    std::vector<Var> sample_losses;
    for (size_t si = 0; si < batch.size(); ++si) {
        const TrainSample& s = batch[si];
        if (s.frames.empty()) throw InvalidArgument("train_step: sample has no frames");
        int t = int(rng.uniform_int(0, sched.T - 1));
        res.timesteps.push_back(t);
        cond::DropoutFlags flags = cond::draw_dropout(policy, rng);
        cond::ConditionBundle base = sample_bundle(ps, den, vocab, s, fuse_heads,
                                                   fuse_reduction);
        bool clip = s.frames.size() > 1;
        unet::TemporalState prev, cur;
        std::vector<Var> frame_losses;
        for (size_t f = 0; f < s.frames.size(); ++f) {
            const TrainFrame& fr = s.frames[f];
            Tensor eps = randn(fr.z0.shape, rng);
            Tensor zt = q_sample(fr.z0, t, eps, sched);
            cond::ConditionBundle b = base;
            b.pose = cond::encode_pose(ps, ad::constant(fr.pose_planes), dc.latent_c(), dc.patch);
            b.spatial = cond::combine_spatial(b.pose, b.background);
            b = cond::apply_dropout_flags(b, flags, ps, dc);
            Var zv = ad::constant(zt);
            Var pred;
            if (predictor) {
                pred = (*predictor)(si, f, zv, t, b);
            } else {
                const unet::TemporalState* pf = clip && f > 0 ? &prev : nullptr;
                unet::TemporalState* of = clip ? &cur : nullptr;
                pred = denoise(den, zv, t, b, pf, of);
                if (clip) {
                    prev = std::move(cur);
                    cur = unet::TemporalState{};
                }
            }
            frame_losses.push_back(ad::mse(pred, ad::constant(eps)));
        }
        Var sl = frame_losses[0];
        for (size_t f = 1; f < frame_losses.size(); ++f) sl = ad::add(sl, frame_losses[f]);
        if (frame_losses.size() > 1) sl = ad::scale(sl, 1.0 / double(frame_losses.size()));
        sample_losses.push_back(sl);
    }
    Var total = sample_losses[0];
    for (size_t i = 1; i < sample_losses.size(); ++i) total = ad::add(total, sample_losses[i]);
    if (sample_losses.size() > 1) total = ad::scale(total, 1.0 / double(sample_losses.size()));
    double lv = total->val[0];
    if (!std::isfinite(lv)) {
        json dump{{"step", step_index},
                  {"batch", batch.size()},
                  {"timesteps", res.timesteps},
                  {"lr", opt.lr()}};
        throw TrainingDivergence("train_step: non-finite loss; diagnostics: " + dump.dump());
    }
    ad::backward(total);
    opt.step(ps);
    res.loss = lv;
    return res;
}

}  // namespace pedgen::diff
