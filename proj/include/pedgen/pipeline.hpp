#pragma once
// End-to-end orchestration: the layered run configuration with its artifact
// hash, the staged artifacts (corpus -> curation -> reference sets -> training
// -> samples -> report), the three-phase trainer (image, video, image
// fine-tune), and checkpoint-backed sampling.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pedgen/checkpoint.hpp"
#include "pedgen/conditioning.hpp"
#include "pedgen/corpus.hpp"
#include "pedgen/curate.hpp"
#include "pedgen/diffusion.hpp"
#include "pedgen/fuser.hpp"
#include "pedgen/metrics.hpp"
#include "pedgen/refselect.hpp"
#include "pedgen/unet.hpp"

namespace pedgen::pipe {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- run configuration ----------------------------------------------------------------

struct TrainerConfig {
    int image_steps = 2000;     // phase 1: single-frame batches
    int video_steps = 1000;     // phase 2: interpolated clips with temporal attention
    int finetune_steps = 500;   // phase 3: single-frame at a reduced rate
    double lr = 1e-3;
    double finetune_lr_scale = 0.5;
    int batch_size = 8;
    int clip_batch = 2;
    int clip_frames = 4;
    double ref_occlusion_p = 0.3;  // reference augmentation rates
    double ref_crop_p = 0.5;
    int log_every = 100;  // progress prints; 0 silences them
};

inline json trainer_to_json(const TrainerConfig& t) {
    return {{"image_steps", t.image_steps},
            {"video_steps", t.video_steps},
            {"finetune_steps", t.finetune_steps},
            {"lr", t.lr},
            {"finetune_lr_scale", t.finetune_lr_scale},
            {"batch_size", t.batch_size},
            {"clip_batch", t.clip_batch},
            {"clip_frames", t.clip_frames},
            {"ref_occlusion_p", t.ref_occlusion_p},
            {"ref_crop_p", t.ref_crop_p},
            {"log_every", t.log_every}};
}

inline TrainerConfig trainer_from_json(const json& j) {
    TrainerConfig t;
    t.image_steps = j.value("image_steps", t.image_steps);
    t.video_steps = j.value("video_steps", t.video_steps);
    t.finetune_steps = j.value("finetune_steps", t.finetune_steps);
    t.lr = j.value("lr", t.lr);
    t.finetune_lr_scale = j.value("finetune_lr_scale", t.finetune_lr_scale);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.clip_batch = j.value("clip_batch", t.clip_batch);
    t.clip_frames = j.value("clip_frames", t.clip_frames);
    t.ref_occlusion_p = j.value("ref_occlusion_p", t.ref_occlusion_p);
    t.ref_crop_p = j.value("ref_crop_p", t.ref_crop_p);
    t.log_every = j.value("log_every", t.log_every);
    return t;
}

inline void validate(const TrainerConfig& t) {
    if (t.image_steps < 0 || t.video_steps < 0 || t.finetune_steps < 0)
        throw ConfigError("trainer: phase step counts must be >= 0");
    if (t.image_steps + t.video_steps + t.finetune_steps < 1)
        throw ConfigError("trainer: at least one training step is required");
    if (!(t.lr > 0.0) || !(t.finetune_lr_scale > 0.0))
        throw ConfigError("trainer: learning rates must be > 0");
    if (t.batch_size < 1 || t.clip_batch < 1 || t.clip_frames < 2)
        throw ConfigError("trainer: batch_size/clip_batch >= 1 and clip_frames >= 2");
    for (double p : {t.ref_occlusion_p, t.ref_crop_p})
        if (p < 0.0 || p > 1.0)
            throw ConfigError("trainer: augmentation rates must lie in [0,1]");
}

// The whole run in one place. `selection.stage` is overridden per use: training
// batches force the early stage, inference auto-selection forces the late one.
struct PipelineConfig {
    corpus::CorpusConfig corpus;
    curate::CleaningThresholds thresholds;
    refselect::SelectionPolicy selection;
    metrics::EmbedderConfig embedder;
    unet::DenoiserConfig model;
    int schedule_T = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    diff::SamplerConfig sampler;
    cond::DropoutPolicy dropout;
    TrainerConfig trainer;
    int fuse_heads = 4;
    int fuse_reduction = 8;
    uint64_t seed = 0;
};

inline json pipeline_to_json(const PipelineConfig& c) {
    return {{"corpus", corpus::corpus_config_to_json(c.corpus)},
            {"thresholds", curate::thresholds_to_json(c.thresholds)},
            {"selection", refselect::policy_to_json(c.selection)},
            {"embedder", metrics::embedder_config_to_json(c.embedder)},
            {"model", unet::config_to_json(c.model)},
            {"schedule", {{"T", c.schedule_T}, {"beta_start", c.beta_start},
                          {"beta_end", c.beta_end}}},
            {"sampler", diff::sampler_to_json(c.sampler)},
            {"dropout", {{"p_identity", c.dropout.p_identity},
                         {"p_spatial", c.dropout.p_spatial},
                         {"p_text", c.dropout.p_text},
                         {"p_bg_mask", c.dropout.p_bg_mask}}},
            {"trainer", trainer_to_json(c.trainer)},
            {"fuse_heads", c.fuse_heads},
            {"fuse_reduction", c.fuse_reduction},
            {"seed", c.seed}};
}

inline PipelineConfig pipeline_from_json(const json& j) {
    PipelineConfig c;
    if (j.contains("corpus")) c.corpus = corpus::corpus_config_from_json(j.at("corpus"));
    if (j.contains("thresholds"))
        c.thresholds = curate::thresholds_from_json(j.at("thresholds"));
    if (j.contains("selection")) c.selection = refselect::policy_from_json(j.at("selection"));
    if (j.contains("embedder"))
        c.embedder = metrics::embedder_config_from_json(j.at("embedder"));
    if (j.contains("model")) c.model = unet::config_from_json(j.at("model"));
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        c.schedule_T = s.value("T", c.schedule_T);
        c.beta_start = s.value("beta_start", c.beta_start);
        c.beta_end = s.value("beta_end", c.beta_end);
    }
    if (j.contains("sampler")) c.sampler = diff::sampler_from_json(j.at("sampler"));
    if (j.contains("dropout")) {
        const json& d = j.at("dropout");
        c.dropout.p_identity = d.value("p_identity", c.dropout.p_identity);
        c.dropout.p_spatial = d.value("p_spatial", c.dropout.p_spatial);
        c.dropout.p_text = d.value("p_text", c.dropout.p_text);
        c.dropout.p_bg_mask = d.value("p_bg_mask", c.dropout.p_bg_mask);
    }
    if (j.contains("trainer")) c.trainer = trainer_from_json(j.at("trainer"));
    c.fuse_heads = j.value("fuse_heads", c.fuse_heads);
    c.fuse_reduction = j.value("fuse_reduction", c.fuse_reduction);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline void validate(const PipelineConfig& c) {
    // the corpus directory is supplied per stage; validate the rest of the knobs
    corpus::CorpusConfig cc = c.corpus;
    if (cc.out_dir.empty()) cc.out_dir = "<staged>";
    corpus::validate(cc);
    refselect::validate(c.selection);
    unet::validate(c.model);
    if (c.schedule_T < 1 || !(c.beta_start > 0.0) || !(c.beta_start <= c.beta_end) ||
        !(c.beta_end < 1.0))
        throw ConfigError("pipeline: invalid noise schedule range");
    diff::validate(c.sampler, c.schedule_T);
    cond::validate(c.dropout);
    validate(c.trainer);
    if (c.fuse_heads < 1 || c.fuse_reduction < 1)
        throw ConfigError("pipeline: fuse_heads/fuse_reduction must be >= 1");
}

// Stable fingerprint embedded in every artifact this configuration produces.
inline std::string config_hash(const PipelineConfig& c) {
    return hex64(fnv1a64(pipeline_to_json(c).dump()));
}

// Default artifact layout under one workspace root; every path can be
// overridden per stage on the command line.
struct RunPaths {
    std::string root;

    std::string corpus_dir() const { return root + "/corpus"; }
    std::string cleaned() const { return root + "/cleaned.jsonl"; }
    std::string rejected() const { return root + "/rejected.jsonl"; }
    std::string stats() const { return root + "/stats.json"; }
    std::string pair_scores() const { return root + "/pair_scores.jsonl"; }
    std::string partition() const { return root + "/partition.json"; }
    std::string refsets() const { return root + "/refsets.jsonl"; }
    std::string embedder() const { return root + "/embedder.ckpt"; }
    std::string checkpoint() const { return root + "/model.ckpt"; }
    std::string loss_log() const { return root + "/loss_log.txt"; }
    std::string samples_dir() const { return root + "/samples"; }
    std::string report() const { return root + "/report.json"; }
    std::string report_csv() const { return root + "/report.csv"; }
};

namespace detail_pipe {

inline void need_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw StagedDependency("missing " + path + " (run " + producer + " first)");
}

inline void ensure_parent_dir(const std::string& path) {
    fs::path p = fs::path(path).parent_path();
    if (p.empty()) return;
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

}  // namespace detail_pipe

// --- staged artifacts -----------------------------------------------------------------

inline corpus::CorpusSummary run_corpus_gen(const PipelineConfig& cfg,
                                            const std::string& corpus_dir) {
    corpus::CorpusConfig cc = cfg.corpus;
    cc.out_dir = corpus_dir;
    return corpus::generate_corpus(cc, config_hash(cfg));
}

struct CurateSummary {
    size_t retained = 0;
    size_t rejected = 0;
    size_t pairs = 0;
};

// Camera x orientation counts recomputed from any annotation file.
inline json run_stats(const PipelineConfig& cfg, const std::string& annotations_path) {
    detail_pipe::need_file(annotations_path, "corpus-gen or curate");
    auto records = read_annotations(annotations_path);
    json stats = curate::curation_stats(records, {});
    stats["config_hash"] = config_hash(cfg);
    return stats;
}

// The frozen identity embedder is corpus-determined: train it on first demand
// and reuse the cached checkpoint afterwards.
inline metrics::IdentityEmbedder ensure_embedder_on(const PipelineConfig& cfg,
                                                    const std::string& corpus_dir,
                                                    const std::vector<AnnotationRecord>& records,
                                                    const std::string& embedder_path) {
    if (fs::exists(embedder_path)) return metrics::load_embedder(embedder_path);
    corpus::CorpusPaths paths{corpus_dir};
    auto loader = [&paths](const AnnotationRecord& r) { return img::load_png(paths.image(r.image_id)); };
    metrics::IdentityEmbedder emb = metrics::train_embedder(records, loader, cfg.embedder);
    detail_pipe::ensure_parent_dir(embedder_path);
    metrics::save_embedder(emb, embedder_path);
    return emb;
}

inline metrics::IdentityEmbedder ensure_embedder(const PipelineConfig& cfg,
                                                 const std::string& corpus_dir,
                                                 const std::string& cleaned_path,
                                                 const std::string& embedder_path) {
    if (fs::exists(embedder_path)) return metrics::load_embedder(embedder_path);
    detail_pipe::need_file(cleaned_path, "curate");
    return ensure_embedder_on(cfg, corpus_dir, read_annotations(cleaned_path), embedder_path);
}

// Quality filtering plus everything derivable from the cleaned set alone:
// identity embedder, intra-identity pair scores, partition index, stats.
inline CurateSummary run_curate(const PipelineConfig& cfg, const std::string& corpus_dir,
                                const std::string& cleaned_path,
                                const std::string& rejected_path,
                                const std::string& stats_path,
                                const std::string& embedder_path,
                                const std::string& pair_scores_path,
                                const std::string& partition_path) {
    corpus::CorpusPaths paths{corpus_dir};
    detail_pipe::need_file(paths.annotations(), "corpus-gen");
    auto records = read_annotations(paths.annotations());
    curate::CleanResult res = curate::clean(records, cfg.thresholds);
    const json header = {{"config_hash", config_hash(cfg)}};
    detail_pipe::ensure_parent_dir(cleaned_path);
    write_annotations(cleaned_path, res.retained, header);
    curate::write_rejections(rejected_path, res.rejected, header);

    metrics::IdentityEmbedder emb =
        ensure_embedder_on(cfg, corpus_dir, res.retained, embedder_path);
    std::map<std::string, std::vector<double>> cache;
    for (const auto& r : res.retained)
        cache[r.image_id] = emb.embed(img::load_png(paths.image(r.image_id)));
    auto lookup = [&cache](const AnnotationRecord& r) { return cache.at(r.image_id); };
    auto scores = curate::score_pairs(res.retained, lookup);
    curate::write_pair_scores(pair_scores_path, scores, header);

    curate::PartitionIndex index = curate::build_partition(res.retained);
    json part = {{"config_hash", config_hash(cfg)},
                 {"identities", curate::partition_to_json(index)}};
    std::ofstream pout(partition_path, std::ios::binary);
    if (!pout) throw IoError("cannot write " + partition_path);
    pout << part.dump(2) << "\n";

    json stats = curate::curation_stats(res.retained, res.rejected);
    stats["config_hash"] = config_hash(cfg);
    std::ofstream out(stats_path, std::ios::binary);
    if (!out) throw IoError("cannot write " + stats_path);
    out << stats.dump(2) << "\n";
    return {res.retained.size(), res.rejected.size(), scores.size()};
}

// One audited reference set per cleaned record at the configured selection
// stage; the trainer redraws its own sets in-process each epoch.
inline size_t run_select_refs(const PipelineConfig& cfg, const std::string& cleaned_path,
                              const std::string& pair_scores_path,
                              const std::string& refsets_path) {
    detail_pipe::need_file(cleaned_path, "curate");
    detail_pipe::need_file(pair_scores_path, "curate");
    auto records = read_annotations(cleaned_path);
    auto scores = curate::read_pair_scores(pair_scores_path);

    curate::PartitionIndex index = curate::build_partition(records);
    refselect::ScoreIndex sidx = refselect::ScoreIndex::build(scores);
    Rng master(fnv1a64_mix(cfg.seed, "refsel-cli"));
    std::vector<refselect::ReferenceSet> sets;
    std::vector<const AnnotationRecord*> ordered;
    for (const auto& r : records) ordered.push_back(&r);
    std::sort(ordered.begin(), ordered.end(),
              [](const AnnotationRecord* a, const AnnotationRecord* b) {
                  return a->image_id < b->image_id;
              });
    for (const AnnotationRecord* r : ordered) {
        Rng sub = master.fork("refsel/" + r->image_id);
        sets.push_back(refselect::select(*r, index.identities.at(r->person_id), sidx,
                                      cfg.selection, sub));
    }
    detail_pipe::ensure_parent_dir(refsets_path);
    refselect::write_refsets(refsets_path, sets, {{"config_hash", config_hash(cfg)}});
    return sets.size();
}

// --- training data bank -----------------------------------------------------------------

// Everything the trainer and sampler read repeatedly, loaded once: cleaned
// records, partitions, pair scores, per-image latents and skeleton planes,
// per-camera background planes, frozen identity embeddings, and the identity /
// camera specs needed to render interpolated video clips.
struct DataBank {
    corpus::CorpusPaths paths;
    corpus::CorpusConfig ccfg;
    std::vector<AnnotationRecord> records;
    std::map<std::string, size_t> index;
    curate::PartitionIndex partition;
    refselect::ScoreIndex scores;
    metrics::IdentityEmbedder embedder;
    std::map<std::string, img::Image> images;
    std::map<std::string, Tensor> z0;
    std::map<std::string, Tensor> pose_planes;
    std::map<int, Tensor> bg_planes;
    std::map<std::string, std::vector<double>> id_emb;
    std::map<int, corpus::IdentitySpec> identity_specs;
    std::map<int, corpus::CameraSpec> camera_specs;

    const AnnotationRecord& record(const std::string& image_id) const {
        auto it = index.find(image_id);
        if (it == index.end())
            throw InvalidArgument("unknown image id in cleaned annotations: " + image_id);
        return records[it->second];
    }
};

inline DataBank load_bank(const PipelineConfig& cfg, const std::string& corpus_dir,
                          const std::string& cleaned_path,
                          const std::string& pair_scores_path,
                          const std::string& embedder_path) {
    DataBank bank;
    bank.paths = corpus::CorpusPaths{corpus_dir};
    json meta = corpus::read_corpus_meta(corpus_dir);
    bank.ccfg = corpus::corpus_config_from_json(meta.at("config"));
    detail_pipe::need_file(cleaned_path, "curate");
    bank.records = read_annotations(cleaned_path);
    if (bank.records.empty()) throw InvalidState("no cleaned records to train on");
    for (size_t i = 0; i < bank.records.size(); ++i)
        bank.index[bank.records[i].image_id] = i;
    bank.partition = curate::build_partition(bank.records);
    bank.scores = refselect::ScoreIndex::build(curate::read_pair_scores(pair_scores_path));
    bank.embedder = ensure_embedder(cfg, corpus_dir, cleaned_path, embedder_path);

    const unet::DenoiserConfig& dc = cfg.model;
    for (const auto& r : bank.records) {
        img::Image im = img::load_png(bank.paths.image(r.image_id));
        bank.z0[r.image_id] = unet::frame_to_latent(im, dc);
        bank.id_emb[r.image_id] = bank.embedder.embed(im);
        bank.images[r.image_id] = std::move(im);
        bank.pose_planes[r.image_id] = cond::raster_to_planes(
            img::load_png(bank.paths.skeleton(r.image_id)), dc.image_h(), dc.image_w());
        if (!bank.bg_planes.count(r.cam_id))
            bank.bg_planes[r.cam_id] = cond::raster_to_planes(
                img::load_png(bank.paths.background(r.cam_id)), dc.image_h(), dc.image_w());
    }
    for (auto& id : corpus::generate_identities(bank.ccfg.num_identities, bank.ccfg.seed))
        bank.identity_specs[id.person_id] = id;
    for (auto& cam : corpus::generate_cameras(bank.ccfg.num_cameras,
                                              fnv1a64_mix(bank.ccfg.seed, "cameras")))
        bank.camera_specs[cam.cam_id] = cam;
    return bank;
}

// --- training samples -------------------------------------------------------------------

// Random occlusion rectangle plus crop-resize jitter on a reference image.
inline img::Image augment_reference(const img::Image& in, Rng& rng, double p_occlude,
                                    double p_crop) {
    img::Image out = in;
    if (rng.bernoulli(p_crop)) {
        int ch = std::max(8, int(std::lround(rng.uniform(0.8, 1.0) * in.h)));
        int cw = std::max(8, int(std::lround(rng.uniform(0.8, 1.0) * in.w)));
        ch = std::min(ch, in.h);
        cw = std::min(cw, in.w);
        int oy = int(rng.uniform_int(0, in.h - ch));
        int ox = int(rng.uniform_int(0, in.w - cw));
        img::Image crop(ch, cw);
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                for (int c = 0; c < 3; ++c) crop.at(y, x, c) = out.at(oy + y, ox + x, c);
        out = img::resize_bilinear(crop, in.h, in.w);
    }
    if (rng.bernoulli(p_occlude)) {
        double y0 = rng.uniform(0.1, 0.7) * in.h;
        double y1 = y0 + rng.uniform(0.1, 0.3) * in.h;
        double x0 = rng.uniform(0.0, 0.6) * in.w;
        double x1 = x0 + rng.uniform(0.2, 0.5) * in.w;
        double shade[3] = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                           rng.uniform(0.1, 0.9)};
        img::draw_rect(out, y0, x0, std::min(y1, double(in.h)), std::min(x1, double(in.w)),
                       shade);
    }
    return out;
}

inline diff::TrainSample make_image_sample(const DataBank& bank,
                                           const unet::DenoiserConfig& dc,
                                           const AnnotationRecord& rec,
                                           const refselect::ReferenceSet& rs, Rng& rng,
                                           const TrainerConfig& tc, bool augment) {
    if (rs.chosen.empty()) throw InsufficientReferences("empty reference set for " + rec.image_id);
    diff::TrainSample s;
    diff::TrainFrame fr;
    fr.z0 = bank.z0.at(rec.image_id);
    fr.pose_planes = bank.pose_planes.at(rec.image_id);
    s.frames.push_back(std::move(fr));
    s.bg_planes = bank.bg_planes.at(rec.cam_id);
    for (const auto& c : rs.chosen) {
        img::Image r = bank.images.at(c.image_id);
        if (augment) r = augment_reference(r, rng, tc.ref_occlusion_p, tc.ref_crop_p);
        s.ref_latents.push_back(unet::frame_to_latent(r, dc));
    }
    s.id_embedding = bank.id_emb.at(rs.chosen.front().image_id);
    s.attributes = rec.attributes;
    s.modality = rec.modality;
    return s;
}

// A clip anchored at a real record: poses interpolate from the anchor to a
// same-identity partner; frames are rendered on the anchor's camera, and the
// anchor's references condition every frame.
inline diff::TrainSample make_video_sample(const DataBank& bank,
                                           const unet::DenoiserConfig& dc,
                                           const AnnotationRecord& anchor,
                                           const AnnotationRecord& partner,
                                           const refselect::ReferenceSet& rs, Rng& rng,
                                           const TrainerConfig& tc) {
    diff::TrainSample s =
        make_image_sample(bank, dc, anchor, rs, rng, tc, /*augment=*/true);
    s.frames.clear();
    corpus::RenderConfig rc{bank.ccfg.height, bank.ccfg.width};
    const corpus::IdentitySpec& id = bank.identity_specs.at(anchor.person_id);
    const corpus::CameraSpec& cam = bank.camera_specs.at(anchor.cam_id);
    auto poses = geo::pose_sequence(anchor.pose, partner.pose, tc.clip_frames);
    for (const auto& pose : poses) {
        corpus::RenderedSample frame =
            corpus::render_person(id, pose, cam, anchor.modality, rng.next_u64(), rc);
        diff::TrainFrame fr;
        fr.z0 = unet::frame_to_latent(frame.image, dc);
        fr.pose_planes =
            cond::raster_to_planes(frame.skeleton_raster, dc.image_h(), dc.image_w());
        s.frames.push_back(std::move(fr));
    }
    return s;
}

// --- trainer -----------------------------------------------------------------------------

struct TrainOutcome {
    std::vector<double> losses;  // one entry per optimizer step, phases concatenated
    int64_t steps = 0;
};

namespace detail_pipe {

// Distinct cleaned records for one batch, drawn uniformly.
inline std::vector<const AnnotationRecord*> draw_batch(const DataBank& bank, int count,
                                                       Rng& rng) {
    int n = int(bank.records.size());
    count = std::min(count, n);
    std::set<size_t> picked;
    std::vector<const AnnotationRecord*> out;
    while (int(out.size()) < count) {
        size_t i = size_t(rng.uniform_int(0, n - 1));
        if (picked.insert(i).second) out.push_back(&bank.records[i]);
    }
    return out;
}

// A same-identity partner for clip interpolation; the anchor itself when the
// identity has no other cleaned image (a static clip still trains temporal
// attention on self-consistency).
inline const AnnotationRecord& draw_partner(const DataBank& bank,
                                            const AnnotationRecord& anchor, Rng& rng) {
    std::vector<const AnnotationRecord*> sibs;
    for (const auto& r : bank.records)
        if (r.person_id == anchor.person_id && r.image_id != anchor.image_id)
            sibs.push_back(&r);
    if (sibs.empty()) return anchor;
    return *sibs[size_t(rng.uniform_int(0, int(sibs.size()) - 1))];
}

}  // namespace detail_pipe

// Three phases: single-frame batches, interpolated clips, then single-frame
// fine-tuning at lr x finetune_lr_scale. One loss line per optimizer step goes
// to `loss_out` in full precision.
inline TrainOutcome train_pipeline(const PipelineConfig& cfg, const DataBank& bank,
                                   nn::ParamStore& ps, const unet::Denoiser& den,
                                   nn::Adam& opt, std::ostream& loss_out,
                                   std::ostream* progress = nullptr) {
    validate(cfg.trainer);
    const TrainerConfig& tc = cfg.trainer;
    const unet::DenoiserConfig& dc = cfg.model;
    diff::NoiseSchedule sched = diff::make_schedule(cfg.schedule_T, cfg.beta_start,
                                                    cfg.beta_end);
    cond::Vocabulary vocab = cond::Vocabulary::builtin();
    refselect::SelectionPolicy policy = cfg.selection;
    policy.stage = "early";
    Rng rng(fnv1a64_mix(cfg.seed, "train"));
    Rng refs_master(fnv1a64_mix(cfg.seed, "train-refsel"));

    TrainOutcome out;
    char line[64];
    auto log_loss = [&](double v) {
        out.losses.push_back(v);
        std::snprintf(line, sizeof line, "%.17g\n", v);
        loss_out << line;
    };
    auto progress_note = [&](const char* phase, int step, int total, double loss) {
        if (!progress || tc.log_every < 1) return;
        if (step % tc.log_every != 0 && step != total - 1) return;
        (*progress) << phase << " step " << step + 1 << "/" << total << " loss " << loss
                    << "\n";
    };

    struct Phase {
        const char* name;
        int steps;
        bool video;
        double lr;
    };
    const Phase phases[3] = {{"image", tc.image_steps, false, tc.lr},
                             {"video", tc.video_steps, true, tc.lr},
                             {"finetune", tc.finetune_steps, false,
                              tc.lr * tc.finetune_lr_scale}};
    for (const Phase& ph : phases) {
        opt.set_lr(ph.lr);
        for (int step = 0; step < ph.steps; ++step) {
            int64_t global = out.steps;
            std::vector<const AnnotationRecord*> targets = detail_pipe::draw_batch(
                bank, ph.video ? tc.clip_batch : tc.batch_size, rng);
            std::vector<AnnotationRecord> tv;
            tv.reserve(targets.size());
            for (const auto* r : targets) tv.push_back(*r);
            auto refsets = refselect::build_training_batch_refs(tv, bank.partition, bank.scores,
                                                             policy, refs_master,
                                                             int(global));
            std::vector<diff::TrainSample> batch;
            batch.reserve(targets.size());
            for (const auto* r : targets) {
                const refselect::ReferenceSet& rs = refsets.at(r->image_id);
                if (ph.video) {
                    const AnnotationRecord& partner = detail_pipe::draw_partner(bank, *r, rng);
                    batch.push_back(make_video_sample(bank, dc, *r, partner, rs, rng, tc));
                } else {
                    batch.push_back(
                        make_image_sample(bank, dc, *r, rs, rng, tc, /*augment=*/true));
                }
            }
            diff::TrainStepResult r =
                diff::train_step(den, ps, opt, vocab, batch, sched, cfg.dropout, rng,
                                 cfg.fuse_heads, cfg.fuse_reduction, nullptr, global);
            log_loss(r.loss);
            progress_note(ph.name, step, ph.steps, r.loss);
            ++out.steps;
        }
    }
    return out;
}

inline json checkpoint_header(const PipelineConfig& cfg, int64_t steps) {
    return {{"model", unet::config_to_json(cfg.model)},
            {"schedule", {{"T", cfg.schedule_T}, {"beta_start", cfg.beta_start},
                          {"beta_end", cfg.beta_end}}},
            {"steps", steps},
            {"vocab_hash", cond::Vocabulary::builtin().hash()},
            {"config_hash", config_hash(cfg)},
            {"pipeline", pipeline_to_json(cfg)}};
}

// corpus-gen/curate must have run already; trains, logs, and writes the
// checkpoint.
inline TrainOutcome run_train(const PipelineConfig& cfg, const std::string& corpus_dir,
                              const std::string& cleaned_path,
                              const std::string& pair_scores_path,
                              const std::string& embedder_path,
                              const std::string& checkpoint_path,
                              const std::string& loss_log_path,
                              std::ostream* progress = nullptr) {
    validate(cfg);
    detail_pipe::need_file(pair_scores_path, "curate");
    DataBank bank = load_bank(cfg, corpus_dir, cleaned_path, pair_scores_path, embedder_path);
    nn::ParamStore ps(fnv1a64_mix(cfg.seed, "params"));
    unet::Denoiser den(ps, cfg.model);
    nn::Adam opt(cfg.trainer.lr);
    detail_pipe::ensure_parent_dir(loss_log_path);
    std::ofstream loss_out(loss_log_path, std::ios::binary);
    if (!loss_out) throw IoError("cannot write " + loss_log_path);
    loss_out << "# config_hash " << config_hash(cfg) << "\n";
    TrainOutcome out = train_pipeline(cfg, bank, ps, den, opt, loss_out, progress);
    detail_pipe::ensure_parent_dir(checkpoint_path);
    ckpt::save_checkpoint(checkpoint_path, ps, opt, checkpoint_header(cfg, out.steps));
    return out;
}

// --- sampling ------------------------------------------------------------------------------

// A checkpoint restored for inference. Parameters come back float32-truncated,
// so two runs that each train and reload reproduce bit-identical samples.
struct Generator {
    unet::DenoiserConfig dc;
    nn::ParamStore ps;
    unet::Denoiser den;
    diff::NoiseSchedule sched;
    int64_t steps = 0;
    std::string config_hash;
    json header;

    explicit Generator(const std::string& checkpoint_path)
        : dc(), ps(0), den(ps, unet::DenoiserConfig{}), sched() {
        json meta = ckpt::load_checkpoint(checkpoint_path, ps);
        dc = unet::config_from_json(meta.at("model"));
        den = unet::Denoiser(ps, dc);
        const json& s = meta.at("schedule");
        sched = diff::make_schedule(s.at("T").get<int>(), s.at("beta_start").get<double>(),
                                    s.at("beta_end").get<double>());
        steps = meta.value("steps", int64_t(0));
        config_hash = meta.value("config_hash", std::string());
        header = std::move(meta);
        if (steps < 1)
            throw InvalidState(checkpoint_path + ": checkpoint has no training steps");
    }
};

struct TargetSpec {
    int person_id = -1;            // -1: the pose source's identity
    std::string pose_source;       // image id providing the skeleton + orientation
    int cam_id = -1;               // -1: the pose source's camera
    std::string modality;          // empty: the pose source's modality
    std::map<std::string, std::string> attribute_overrides;
};

struct ResolvedTarget {
    AnnotationRecord proxy;  // real record of the target identity used for scoring
    int person_id = -1;
    int cam_id = -1;
    std::string modality;
    std::map<std::string, std::string> attributes;
    std::string pose_source;
};

// Ground the spec in cleaned records: attributes come from the identity's
// gallery (with overrides), and reference scoring anchors on the identity's own
// record whose facing direction best matches the pose source.
inline ResolvedTarget resolve_target(const DataBank& bank, const TargetSpec& spec) {
    const AnnotationRecord& src = bank.record(spec.pose_source);
    ResolvedTarget t;
    t.pose_source = spec.pose_source;
    t.person_id = spec.person_id >= 0 ? spec.person_id : src.person_id;
    t.cam_id = spec.cam_id >= 0 ? spec.cam_id : src.cam_id;
    t.modality = spec.modality.empty() ? src.modality : spec.modality;
    if (t.modality != "rgb" && t.modality != "ir")
        throw InvalidArgument("target modality must be rgb or ir");
    if (!bank.bg_planes.count(t.cam_id))
        throw InvalidArgument("target camera " + std::to_string(t.cam_id) +
                              " has no cleaned images (no background context)");

    const AnnotationRecord* best = nullptr;
    double best_dot = -2.0;
    for (const auto& r : bank.records) {
        if (r.person_id != t.person_id) continue;
        double d = geo::viewpoint_score(r.orientation, src.orientation);
        if (d > best_dot || (d == best_dot && best && r.image_id < best->image_id)) {
            best = &r;
            best_dot = d;
        }
    }
    if (!best)
        throw InvalidArgument("identity " + std::to_string(t.person_id) +
                              " has no cleaned images");
    t.proxy = *best;
    t.attributes = t.proxy.attributes;
    for (const auto& [k, v] : spec.attribute_overrides) t.attributes[k] = v;
    return t;
}

// "auto": late-stage selection against the proxy record; otherwise explicit ids.
inline refselect::ReferenceSet resolve_refs(const DataBank& bank, const PipelineConfig& cfg,
                                         const ResolvedTarget& t,
                                         const std::vector<std::string>& explicit_ids,
                                         uint64_t seed) {
    refselect::ReferenceSet rs;
    if (!explicit_ids.empty()) {
        rs.target_id = t.proxy.image_id;
        rs.person_id = t.person_id;
        for (const auto& id : explicit_ids) {
            const AnnotationRecord& r = bank.record(id);
            if (r.person_id != t.person_id)
                throw InvalidArgument("reference " + id + " belongs to identity " +
                                      std::to_string(r.person_id) + ", target is " +
                                      std::to_string(t.person_id));
            curate::PairScore sc;
            sc.ref_id = id;
            sc.target_id = rs.target_id;
            sc.viewpoint = geo::viewpoint_score(r.orientation, t.proxy.orientation);
            rs.chosen.push_back({id, "explicit", sc});
        }
        return rs;
    }
    refselect::SelectionPolicy policy = cfg.selection;
    policy.stage = "late";
    // scoring target = proxy, but the camera constraint follows the requested view
    AnnotationRecord anchor = t.proxy;
    anchor.cam_id = t.cam_id;
    Rng rng(fnv1a64_mix(seed, "sample-refsel/" + t.proxy.image_id));
    return refselect::select(anchor, bank.partition.identities.at(t.person_id), bank.scores,
                          policy, rng);
}

// Condition bundle for one generation; pose planes are supplied per frame.
inline cond::ConditionBundle inference_bundle(nn::ParamStore& ps, const unet::Denoiser& den,
                                              const DataBank& bank,
                                              const PipelineConfig& cfg,
                                              const cond::Vocabulary& vocab,
                                              const ResolvedTarget& t,
                                              const refselect::ReferenceSet& rs) {
    if (rs.chosen.empty()) throw InsufficientReferences("no references for sampling");
    const unet::DenoiserConfig& dc = den.config();
    cond::ConditionBundle b;
    std::vector<Tensor> ref_latents;
    for (const auto& c : rs.chosen)
        ref_latents.push_back(unet::frame_to_latent(bank.images.at(c.image_id), dc));
    fuser::FeaturePyramid pyr = fuser::extract_reference_features(den, ref_latents);
    b.fused = fuser::fuse(ps, pyr, cfg.fuse_heads, cfg.fuse_reduction);
    b.text = cond::encode_text(ps, vocab, t.attributes, t.modality, dc.d_text);
    b.identity_ctx = cond::identity_ctx_from_embedding(
        ps, bank.id_emb.at(rs.chosen.front().image_id), dc.d_text);
    b.background = cond::encode_background(ps, ad::constant(bank.bg_planes.at(t.cam_id)),
                                           dc.latent_c(), dc.patch);
    return b;
}

inline void finish_bundle(nn::ParamStore& ps, const unet::DenoiserConfig& dc,
                          cond::ConditionBundle& b, const Tensor& pose_planes) {
    b.pose = cond::encode_pose(ps, ad::constant(pose_planes), dc.latent_c(), dc.patch);
    b.spatial = cond::combine_spatial(b.pose, b.background);
}

struct SampleResult {
    img::Image image;
    refselect::ReferenceSet refs;
    ResolvedTarget target;
};

inline SampleResult sample_one(Generator& gen, const DataBank& bank,
                               const PipelineConfig& cfg, const TargetSpec& spec,
                               const std::vector<std::string>& explicit_refs,
                               const diff::SamplerConfig& sc) {
    ad::NoGrad ng;
    cond::Vocabulary vocab = cond::Vocabulary::builtin();
    SampleResult res;
    res.target = resolve_target(bank, spec);
    res.refs = resolve_refs(bank, cfg, res.target, explicit_refs, sc.seed);
    cond::ConditionBundle b =
        inference_bundle(gen.ps, gen.den, bank, cfg, vocab, res.target, res.refs);
    finish_bundle(gen.ps, gen.dc, b, bank.pose_planes.at(res.target.pose_source));
    cond::ConditionBundle ub = cond::unconditional_bundle(gen.ps, gen.dc);
    Tensor z = diff::sample_image_latent(gen.den, b, ub, gen.sched, sc);
    res.image = unet::latent_to_frame(z, gen.dc, bank.ccfg.height, bank.ccfg.width);
    return res;
}

struct VideoResult {
    std::vector<img::Image> frames;
    refselect::ReferenceSet refs;
    ResolvedTarget target;
};

// Poses interpolate from the pose source to `pose_end` over `frames` steps;
// identity conditioning is shared across the clip.
inline VideoResult sample_video_clip(Generator& gen, const DataBank& bank,
                                     const PipelineConfig& cfg, const TargetSpec& spec,
                                     const std::string& pose_end_id, int frames,
                                     const std::vector<std::string>& explicit_refs,
                                     const diff::SamplerConfig& sc) {
    ad::NoGrad ng;
    if (frames < 1) throw InvalidArgument("sample-video: frames must be >= 1");
    cond::Vocabulary vocab = cond::Vocabulary::builtin();
    VideoResult res;
    res.target = resolve_target(bank, spec);
    res.refs = resolve_refs(bank, cfg, res.target, explicit_refs, sc.seed);
    cond::ConditionBundle base =
        inference_bundle(gen.ps, gen.den, bank, cfg, vocab, res.target, res.refs);

    const AnnotationRecord& start = bank.record(spec.pose_source);
    std::vector<geo::PoseParams> poses;
    if (frames == 1) {
        poses.push_back(start.pose);
    } else {
        const AnnotationRecord& end = bank.record(pose_end_id);
        poses = geo::pose_sequence(start.pose, end.pose, frames);
    }
    corpus::RenderConfig rc{bank.ccfg.height, bank.ccfg.width};
    const corpus::IdentitySpec& id = bank.identity_specs.at(res.target.person_id);
    const corpus::CameraSpec& cam = bank.camera_specs.at(res.target.cam_id);
    std::vector<cond::ConditionBundle> bundles;
    for (const auto& pose : poses) {
        corpus::RenderedSample f =
            corpus::render_person(id, pose, cam, res.target.modality, 0, rc);
        cond::ConditionBundle b = base;
        finish_bundle(gen.ps, gen.dc, b,
                      cond::raster_to_planes(f.skeleton_raster, gen.dc.image_h(),
                                             gen.dc.image_w()));
        bundles.push_back(std::move(b));
    }
    cond::ConditionBundle ub = cond::unconditional_bundle(gen.ps, gen.dc);
    auto latents = diff::sample_video_latents(gen.den, bundles, ub, gen.sched, sc);
    for (const auto& z : latents)
        res.frames.push_back(unet::latent_to_frame(z, gen.dc, bank.ccfg.height,
                                                   bank.ccfg.width));
    return res;
}

// Simple tiling for --grid-out contact sheets.
inline img::Image contact_sheet(const std::vector<img::Image>& tiles, int columns = 0) {
    if (tiles.empty()) throw InvalidArgument("contact_sheet: no tiles");
    int h = tiles[0].h, w = tiles[0].w;
    for (const auto& t : tiles)
        if (t.h != h || t.w != w)
            throw InvalidArgument("contact_sheet: tiles must share one size");
    int n = int(tiles.size());
    int cols = columns > 0 ? columns : n;
    int rows = (n + cols - 1) / cols;
    const int gap = 2;
    img::Image sheet(rows * h + (rows + 1) * gap, cols * w + (cols + 1) * gap);
    std::fill(sheet.pix.begin(), sheet.pix.end(), 1.0);
    for (int i = 0; i < n; ++i) {
        int r = i / cols, c = i % cols;
        int oy = gap + r * (h + gap), ox = gap + c * (w + gap);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    sheet.at(oy + y, ox + x, ch) = tiles[size_t(i)].at(y, x, ch);
    }
    return sheet;
}

// --- evaluation ----------------------------------------------------------------------------

// Generated images are read back from a samples directory whose manifest names
// each file's target record; refuses hash mismatches unless forced.
inline metrics::EvalReport run_eval(const PipelineConfig& cfg, const std::string& corpus_dir,
                                    const std::string& cleaned_path,
                                    const std::string& embedder_path,
                                    const std::string& samples_dir, bool force,
                                    const std::string& report_json_path,
                                    const std::string& report_csv_path) {
    std::string manifest_path = samples_dir + "/samples_meta.json";
    detail_pipe::need_file(manifest_path, "sample");
    std::ifstream mf(manifest_path);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw SchemaError(manifest_path + ": " + e.what());
    }
    json corpus_meta = corpus::read_corpus_meta(corpus_dir);
    std::string want = config_hash(cfg);
    for (const auto& [label, have] :
         {std::pair<const char*, std::string>{"samples",
                                              manifest.value("config_hash", std::string())},
          {"corpus", corpus_meta.value("config_hash", std::string())}}) {
        if (!have.empty() && have != want && !force)
            throw ConfigError(std::string(label) + " were produced under config hash " + have +
                              ", current is " + want + " (pass --force to evaluate anyway)");
    }

    metrics::IdentityEmbedder emb =
        ensure_embedder(cfg, corpus_dir, cleaned_path, embedder_path);
    auto records = read_annotations(cleaned_path);
    std::map<std::string, const AnnotationRecord*> by_id;
    for (const auto& r : records) by_id[r.image_id] = &r;

    corpus::CorpusPaths paths{corpus_dir};
    std::vector<img::Image> generated, targets;
    std::vector<AnnotationRecord> target_records;
    if (!manifest.contains("items") || manifest.at("items").empty())
        throw SchemaError(manifest_path + ": no items");
    for (const auto& item : manifest.at("items")) {
        std::string file = item.at("file").get<std::string>();
        std::string target_id = item.at("target_id").get<std::string>();
        auto it = by_id.find(target_id);
        if (it == by_id.end())
            throw SchemaError(manifest_path + ": target " + target_id +
                              " not in cleaned annotations");
        generated.push_back(img::load_png(samples_dir + "/" + file));
        targets.push_back(img::load_png(paths.image(target_id)));
        target_records.push_back(*it->second);
    }
    metrics::EvalReport rep =
        metrics::evaluate(generated, target_records, targets, emb,
                          fnv1a64_mix(cfg.seed, "eval"),
                          json{{"config_hash", want},
                               {"samples_config_hash",
                                manifest.value("config_hash", std::string())}});
    detail_pipe::ensure_parent_dir(report_json_path);
    metrics::write_eval_report(rep, report_json_path, report_csv_path);
    return rep;
}

}  // namespace pedgen::pipe
