// pedgen: one binary over the whole pipeline. Stages read and write plain
// artifacts under a workspace root so each can be rerun independently; every
// artifact embeds the config hash that produced it, and failures exit nonzero
// with one machine-readable JSON line on stderr.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pedgen/pipeline.hpp"

namespace fs = std::filesystem;
namespace pipe = pedgen::pipe;
namespace diff = pedgen::diff;
using json = nlohmann::json;

namespace {

pipe::PipelineConfig load_config(const std::string& path) {
    pipe::PipelineConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw pedgen::IoError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw pedgen::ConfigError(path + ": " + e.what());
    }
    return pipe::pipeline_from_json(j);
}

pipe::TargetSpec parse_target_spec(const std::string& arg) {
    std::string text = arg;
    if (!arg.empty() && arg[0] == '@') {
        std::ifstream in(arg.substr(1));
        if (!in) throw pedgen::IoError("cannot open target spec: " + arg.substr(1));
        std::stringstream ss;
        ss << in.rdbuf();
        text = ss.str();
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw pedgen::SchemaError(std::string("target spec: ") + e.what());
    }
    if (!j.is_object() || !j.contains("pose_source"))
        throw pedgen::SchemaError("target spec: \"pose_source\" (an image id) is required");
    pipe::TargetSpec t;
    t.pose_source = j.at("pose_source").get<std::string>();
    t.person_id = j.value("person_id", -1);
    t.cam_id = j.value("cam_id", -1);
    t.modality = j.value("modality", std::string());
    if (j.contains("attributes"))
        for (const auto& [k, v] : j.at("attributes").items())
            t.attribute_overrides[k] = v.get<std::string>();
    return t;
}

std::vector<std::string> parse_refs(const std::string& arg) {
    if (arg.empty() || arg == "auto") return {};
    std::vector<std::string> ids;
    std::stringstream ss(arg);
    std::string id;
    while (std::getline(ss, id, ','))
        if (!id.empty()) ids.push_back(id);
    if (ids.empty()) throw pedgen::InvalidArgument("--refs: no ids in \"" + arg + "\"");
    return ids;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw pedgen::IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

// Existing manifests continue to accumulate items; a config change invalidates
// the directory unless forced, in which case it starts over.
json load_or_new_manifest(const std::string& path, const std::string& hash, bool force) {
    json fresh{{"config_hash", hash}, {"items", json::array()}};
    if (!fs::exists(path)) return fresh;
    std::ifstream in(path);
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw pedgen::SchemaError(path + ": " + e.what());
    }
    std::string have = m.value("config_hash", std::string());
    if (!have.empty() && have != hash) {
        if (!force)
            throw pedgen::ConfigError("existing samples were produced under config hash " +
                                      have + ", current is " + hash +
                                      " (pass --force to start the directory over)");
        return fresh;
    }
    if (!m.contains("items") || !m.at("items").is_array()) m["items"] = json::array();
    m["config_hash"] = hash;
    return m;
}

void upsert_manifest_item(json& manifest, const json& item) {
    json& items = manifest.at("items");
    for (auto& existing : items)
        if (existing.value("file", std::string()) == item.at("file").get<std::string>()) {
            existing = item;
            return;
        }
    items.push_back(item);
    std::sort(items.begin(), items.end(), [](const json& a, const json& b) {
        return a.value("file", std::string()) < b.value("file", std::string());
    });
}

int grid_columns(int n) { return std::max(1, int(std::ceil(std::sqrt(double(n))))); }

void emit(const json& j) { std::cout << j.dump() << "\n"; }

int exit_code_for(const pedgen::Error& e) {
    if (e.kind() == "staged_dependency") return 3;
    if (e.kind() == "config_error") return 4;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "pedgen: synthetic pedestrian corpus, curation, reference selection,\n"
        "diffusion training, sampling, and evaluation.\n\n"
        "Config precedence: command-line flags > --config file > built-in defaults.\n"
        "Exit codes: 0 ok, 2 usage, 3 missing upstream artifact, 4 config mismatch,\n"
        "1 other errors; failures print one JSON error line on stderr."};
    app.require_subcommand(1);

    std::string config_path;
    std::string workspace = "runs/default";
    app.add_option("--config", config_path, "pipeline config JSON, merged over defaults")
        ->envname("PEDGEN_CONFIG");
    app.add_option("--workspace,-w", workspace,
                   "artifact root used for default stage paths");

    // corpus-gen ------------------------------------------------------------------
    auto* cg = app.add_subcommand("corpus-gen", "render the synthetic corpus");
    std::string cg_out;
    int cg_ident = 0, cg_cams = 0, cg_samples = 0, cg_h = 0, cg_w = 0;
    double cg_ir = 0, cg_corrupt = 0, cg_occl = 0;
    uint64_t cg_seed = 0;
    auto* o_cg_out = cg->add_option("--out", cg_out, "corpus directory (default <workspace>/corpus)");
    auto* o_cg_ident = cg->add_option("--identities", cg_ident, "number of identities");
    auto* o_cg_cams = cg->add_option("--cameras", cg_cams, "number of cameras");
    auto* o_cg_samp = cg->add_option("--samples-per-cam", cg_samples,
                                     "samples per identity per camera");
    auto* o_cg_ir = cg->add_option("--ir-fraction", cg_ir, "fraction rendered as infrared");
    auto* o_cg_cor = cg->add_option("--corrupt-fraction", cg_corrupt,
                                    "fraction with degraded quality fields");
    auto* o_cg_occ = cg->add_option("--occlusion-fraction", cg_occl, "fraction occluded");
    auto* o_cg_h = cg->add_option("--height", cg_h, "image height in pixels");
    auto* o_cg_w = cg->add_option("--width", cg_w, "image width in pixels");
    auto* o_cg_seed = cg->add_option("--seed", cg_seed, "corpus generation seed");

    // curate ----------------------------------------------------------------------
    auto* cu = app.add_subcommand(
        "curate", "quality-filter the corpus; write cleaned/rejected/pair-scores/partition/stats");
    std::string cu_corpus, cu_cleaned, cu_rejected, cu_stats, cu_embedder, cu_pairs, cu_part;
    int cu_minkp = 0;
    double cu_minconf = 0, cu_maxmis = 0, cu_minsharp = 0;
    cu->add_option("--corpus", cu_corpus, "corpus directory (default <workspace>/corpus)");
    cu->add_option("--cleaned", cu_cleaned, "retained annotations out (default <workspace>/cleaned.jsonl)");
    cu->add_option("--rejected", cu_rejected, "rejections out (default <workspace>/rejected.jsonl)");
    cu->add_option("--stats", cu_stats, "stats out (default <workspace>/stats.json)");
    cu->add_option("--embedder", cu_embedder,
                   "identity embedder checkpoint, trained here if absent (default <workspace>/embedder.ckpt)");
    cu->add_option("--pair-scores", cu_pairs, "pair scores out (default <workspace>/pair_scores.jsonl)");
    cu->add_option("--partition", cu_part, "partition index out (default <workspace>/partition.json)");
    auto* o_cu_kp = cu->add_option("--min-keypoints", cu_minkp, "minimum visible keypoints");
    auto* o_cu_conf = cu->add_option("--min-mean-confidence", cu_minconf,
                                     "minimum mean keypoint confidence");
    auto* o_cu_mis = cu->add_option("--max-misalignment", cu_maxmis,
                                    "maximum keypoint drift in pixels (<= 0 disables)");
    auto* o_cu_sharp = cu->add_option("--min-sharpness", cu_minsharp,
                                      "minimum variance-of-Laplacian sharpness");

    // select-refs -----------------------------------------------------------------
    auto* sr = app.add_subcommand("select-refs", "emit one audited reference set per cleaned record");
    std::string sr_cleaned, sr_pairs, sr_out, sr_stage;
    int sr_max = 0;
    double sr_p0 = 0, sr_decay = 0, sr_drop = 0, sr_gate = 0;
    sr->add_option("--cleaned", sr_cleaned, "cleaned annotations (default <workspace>/cleaned.jsonl)");
    sr->add_option("--pair-scores", sr_pairs, "pair scores (default <workspace>/pair_scores.jsonl)");
    sr->add_option("--out", sr_out, "reference sets out (default <workspace>/refsets.jsonl)");
    auto* o_sr_max = sr->add_option("--max-refs", sr_max, "references per target");
    auto* o_sr_p0 = sr->add_option("--p0", sr_p0, "acceptance probability of the top-ranked candidate");
    auto* o_sr_dec = sr->add_option("--decay", sr_decay, "per-rank acceptance decay");
    auto* o_sr_drop = sr->add_option("--same-orientation-drop", sr_drop,
                                     "drop probability for same-orientation candidates");
    auto* o_sr_gate = sr->add_option("--viewpoint-gate", sr_gate,
                                     "late-stage viewpoint dot-product ceiling");
    auto* o_sr_stage = sr->add_option("--stage", sr_stage, "selection stage")
                           ->check(CLI::IsMember({"early", "late"}));

    // train -----------------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "three-phase denoiser training (image, video, fine-tune)");
    std::string tr_corpus, tr_cleaned, tr_pairs, tr_embedder, tr_out, tr_loss;
    int tr_steps = 0, tr_batch = 0;
    uint64_t tr_seed = 0;
    double tr_lr = 0;
    tr->add_option("--corpus", tr_corpus, "corpus directory (default <workspace>/corpus)");
    tr->add_option("--cleaned", tr_cleaned, "cleaned annotations (default <workspace>/cleaned.jsonl)");
    tr->add_option("--pair-scores", tr_pairs, "pair scores (default <workspace>/pair_scores.jsonl)");
    tr->add_option("--embedder", tr_embedder, "identity embedder checkpoint (default <workspace>/embedder.ckpt)");
    tr->add_option("--out", tr_out, "model checkpoint out (default <workspace>/model.ckpt)");
    tr->add_option("--loss-log", tr_loss, "per-step loss log out (default <workspace>/loss_log.txt)");
    auto* o_tr_steps = tr->add_option(
        "--steps", tr_steps, "total steps, split across phases by the configured ratio");
    auto* o_tr_seed = tr->add_option("--seed", tr_seed, "training seed");
    auto* o_tr_lr = tr->add_option("--lr", tr_lr, "base learning rate");
    auto* o_tr_batch = tr->add_option("--batch-size", tr_batch, "image-phase batch size");

    // sample / sample-video ------------------------------------------------------
    auto add_sampling_options = [](CLI::App* s, std::string& ckpt, std::string& spec,
                                   std::string& refs, std::string& corpus, std::string& cleaned,
                                   std::string& pairs, std::string& embedder, std::string& out,
                                   std::string& grid, bool& force) {
        s->add_option("--checkpoint", ckpt, "model checkpoint (default <workspace>/model.ckpt)");
        s->add_option("--target-spec", spec,
                      "JSON or @file: {\"pose_source\": image id, \"person_id\"?, \"cam_id\"?, "
                      "\"modality\"?, \"attributes\"?: {key: value}}")
            ->required();
        s->add_option("--refs", refs, "\"auto\" or comma-separated reference image ids")
            ->default_val("auto");
        s->add_option("--corpus", corpus, "corpus directory (default <workspace>/corpus)");
        s->add_option("--cleaned", cleaned, "cleaned annotations (default <workspace>/cleaned.jsonl)");
        s->add_option("--pair-scores", pairs, "pair scores (default <workspace>/pair_scores.jsonl)");
        s->add_option("--embedder", embedder, "identity embedder (default <workspace>/embedder.ckpt)");
        s->add_option("--out", out, "output directory (default <workspace>/samples)");
        s->add_option("--grid-out", grid, "also write a PNG contact sheet here");
        s->add_flag("--force", force, "proceed across config-hash mismatches");
    };

    auto* sa = app.add_subcommand("sample", "generate still images for a target spec");
    std::string sa_ckpt, sa_spec, sa_refs, sa_corpus, sa_cleaned, sa_pairs, sa_embedder, sa_out,
        sa_grid;
    bool sa_force = false;
    double sa_guidance = 0;
    uint64_t sa_seed = 0;
    int sa_steps = 0, sa_count = 1;
    std::string sa_method;
    add_sampling_options(sa, sa_ckpt, sa_spec, sa_refs, sa_corpus, sa_cleaned, sa_pairs,
                         sa_embedder, sa_out, sa_grid, sa_force);
    auto* o_sa_guid = sa->add_option("--guidance", sa_guidance, "classifier-free guidance weight");
    auto* o_sa_seed = sa->add_option("--seed", sa_seed, "sampler seed (count > 1 increments it)");
    auto* o_sa_steps = sa->add_option("--steps", sa_steps, "sampler steps");
    auto* o_sa_method = sa->add_option("--method", sa_method, "sampler method")
                            ->check(CLI::IsMember({"deterministic", "ancestral"}));
    sa->add_option("--count", sa_count, "number of samples")->check(CLI::PositiveNumber);

    auto* sv = app.add_subcommand("sample-video", "generate a pose-interpolated clip");
    std::string sv_ckpt, sv_spec, sv_refs, sv_corpus, sv_cleaned, sv_pairs, sv_embedder, sv_out,
        sv_grid, sv_end, sv_method;
    bool sv_force = false;
    double sv_guidance = 0;
    uint64_t sv_seed = 0;
    int sv_steps = 0, sv_frames = 8;
    add_sampling_options(sv, sv_ckpt, sv_spec, sv_refs, sv_corpus, sv_cleaned, sv_pairs,
                         sv_embedder, sv_out, sv_grid, sv_force);
    auto* o_sv_guid = sv->add_option("--guidance", sv_guidance, "classifier-free guidance weight");
    auto* o_sv_seed = sv->add_option("--seed", sv_seed, "sampler seed");
    auto* o_sv_steps = sv->add_option("--steps", sv_steps, "sampler steps");
    auto* o_sv_method = sv->add_option("--method", sv_method, "sampler method")
                            ->check(CLI::IsMember({"deterministic", "ancestral"}));
    sv->add_option("--frames", sv_frames, "clip length")->check(CLI::PositiveNumber);
    sv->add_option("--pose-end", sv_end,
                   "image id whose pose ends the interpolation (default: hold the start pose)");

    // eval ------------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "score generated samples against their target records");
    std::string ev_samples, ev_corpus, ev_cleaned, ev_embedder, ev_report, ev_csv;
    bool ev_force = false;
    ev->add_option("--samples", ev_samples, "samples directory (default <workspace>/samples)");
    ev->add_option("--corpus", ev_corpus, "corpus directory (default <workspace>/corpus)");
    ev->add_option("--cleaned", ev_cleaned, "cleaned annotations (default <workspace>/cleaned.jsonl)");
    ev->add_option("--embedder", ev_embedder, "identity embedder (default <workspace>/embedder.ckpt)");
    ev->add_option("--report", ev_report, "report JSON out (default <workspace>/report.json)");
    ev->add_option("--csv", ev_csv, "per-sample CSV out (default <workspace>/report.csv)");
    ev->add_flag("--force", ev_force, "evaluate across config-hash mismatches");

    // stats -----------------------------------------------------------------------
    auto* st = app.add_subcommand("stats", "camera x orientation counts for an annotation file");
    std::string st_annotations;
    st->add_option("--annotations", st_annotations,
                   "annotation file (default <workspace>/cleaned.jsonl)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump() << "\n";
        int code = app.exit(e, std::cout, std::cerr);
        return code == 0 ? 2 : code;
    }

    try {
        pipe::PipelineConfig cfg = load_config(config_path);
        pipe::RunPaths rp{workspace};
        auto pick = [](const std::string& flag, const std::string& fallback) {
            return flag.empty() ? fallback : flag;
        };

        if (cg->parsed()) {
            if (o_cg_ident->count()) cfg.corpus.num_identities = cg_ident;
            if (o_cg_cams->count()) cfg.corpus.num_cameras = cg_cams;
            if (o_cg_samp->count()) cfg.corpus.samples_per_identity_per_camera = cg_samples;
            if (o_cg_ir->count()) cfg.corpus.ir_fraction = cg_ir;
            if (o_cg_cor->count()) cfg.corpus.corrupt_fraction = cg_corrupt;
            if (o_cg_occ->count()) cfg.corpus.occlusion_fraction = cg_occl;
            if (o_cg_h->count()) cfg.corpus.height = cg_h;
            if (o_cg_w->count()) cfg.corpus.width = cg_w;
            if (o_cg_seed->count()) cfg.corpus.seed = cg_seed;
            std::string out = o_cg_out->count() ? cg_out : rp.corpus_dir();
            auto s = pipe::run_corpus_gen(cfg, out);
            emit({{"ok", true},
                  {"out", out},
                  {"records", s.records},
                  {"ir", s.ir},
                  {"corrupted", s.corrupted},
                  {"config_hash", pipe::config_hash(cfg)}});
        } else if (cu->parsed()) {
            if (o_cu_kp->count()) cfg.thresholds.min_keypoints = cu_minkp;
            if (o_cu_conf->count()) cfg.thresholds.min_mean_confidence = cu_minconf;
            if (o_cu_mis->count()) cfg.thresholds.max_misalignment = cu_maxmis;
            if (o_cu_sharp->count()) cfg.thresholds.min_sharpness = cu_minsharp;
            auto s = pipe::run_curate(cfg, pick(cu_corpus, rp.corpus_dir()),
                                      pick(cu_cleaned, rp.cleaned()),
                                      pick(cu_rejected, rp.rejected()),
                                      pick(cu_stats, rp.stats()),
                                      pick(cu_embedder, rp.embedder()),
                                      pick(cu_pairs, rp.pair_scores()),
                                      pick(cu_part, rp.partition()));
            emit({{"ok", true},
                  {"retained", s.retained},
                  {"rejected", s.rejected},
                  {"pairs", s.pairs},
                  {"cleaned", pick(cu_cleaned, rp.cleaned())},
                  {"config_hash", pipe::config_hash(cfg)}});
        } else if (sr->parsed()) {
            if (o_sr_max->count()) cfg.selection.max_refs = sr_max;
            if (o_sr_p0->count()) cfg.selection.p0 = sr_p0;
            if (o_sr_dec->count()) cfg.selection.decay = sr_decay;
            if (o_sr_drop->count()) cfg.selection.same_orientation_drop_p = sr_drop;
            if (o_sr_gate->count()) cfg.selection.viewpoint_gate = sr_gate;
            if (o_sr_stage->count()) cfg.selection.stage = sr_stage;
            std::string out = pick(sr_out, rp.refsets());
            size_t n = pipe::run_select_refs(cfg, pick(sr_cleaned, rp.cleaned()),
                                             pick(sr_pairs, rp.pair_scores()), out);
            emit({{"ok", true}, {"refsets", n}, {"out", out},
                  {"config_hash", pipe::config_hash(cfg)}});
        } else if (tr->parsed()) {
            if (o_tr_seed->count()) cfg.seed = tr_seed;
            if (o_tr_lr->count()) cfg.trainer.lr = tr_lr;
            if (o_tr_batch->count()) cfg.trainer.batch_size = tr_batch;
            if (o_tr_steps->count()) {
                // keep the configured phase proportions, give rounding to the image phase
                pipe::TrainerConfig& t = cfg.trainer;
                double tot = double(t.image_steps) + t.video_steps + t.finetune_steps;
                int video = int(std::floor(tr_steps * t.video_steps / tot));
                int fine = int(std::floor(tr_steps * t.finetune_steps / tot));
                t.image_steps = tr_steps - video - fine;
                t.video_steps = video;
                t.finetune_steps = fine;
            }
            std::string out = pick(tr_out, rp.checkpoint());
            auto res = pipe::run_train(cfg, pick(tr_corpus, rp.corpus_dir()),
                                       pick(tr_cleaned, rp.cleaned()),
                                       pick(tr_pairs, rp.pair_scores()),
                                       pick(tr_embedder, rp.embedder()), out,
                                       pick(tr_loss, rp.loss_log()), &std::cerr);
            emit({{"ok", true},
                  {"steps", res.steps},
                  {"checkpoint", out},
                  {"first_loss", res.losses.front()},
                  {"last_loss", res.losses.back()},
                  {"config_hash", pipe::config_hash(cfg)}});
        } else if (sa->parsed() || sv->parsed()) {
            bool video = sv->parsed();
            std::string ckpt_path = pick(video ? sv_ckpt : sa_ckpt, rp.checkpoint());
            bool force = video ? sv_force : sa_force;
            pipe::Generator gen(ckpt_path);
            if (!gen.config_hash.empty() && gen.config_hash != pipe::config_hash(cfg)) {
                if (!force)
                    throw pedgen::ConfigError("checkpoint " + ckpt_path +
                                              " was trained under config hash " + gen.config_hash +
                                              ", current is " + pipe::config_hash(cfg) +
                                              " (pass --force to sample anyway)");
                cfg.model = gen.dc;  // shapes must follow the restored weights
            }
            std::string hash = pipe::config_hash(cfg);
            pipe::DataBank bank = pipe::load_bank(
                cfg, pick(video ? sv_corpus : sa_corpus, rp.corpus_dir()),
                pick(video ? sv_cleaned : sa_cleaned, rp.cleaned()),
                pick(video ? sv_pairs : sa_pairs, rp.pair_scores()),
                pick(video ? sv_embedder : sa_embedder, rp.embedder()));
            pipe::TargetSpec spec = parse_target_spec(video ? sv_spec : sa_spec);
            std::vector<std::string> refs = parse_refs(video ? sv_refs : sa_refs);

            diff::SamplerConfig sc = cfg.sampler;
            if (video ? o_sv_guid->count() : o_sa_guid->count())
                sc.guidance = video ? sv_guidance : sa_guidance;
            if (video ? o_sv_seed->count() : o_sa_seed->count())
                sc.seed = video ? sv_seed : sa_seed;
            if (video ? o_sv_steps->count() : o_sa_steps->count())
                sc.steps = video ? sv_steps : sa_steps;
            if (video ? o_sv_method->count() : o_sa_method->count())
                sc.method = video ? sv_method : sa_method;
            diff::validate(sc, cfg.schedule_T);

            if (!video) {
                std::string out_dir = pick(sa_out, rp.samples_dir());
                fs::create_directories(out_dir);
                std::string manifest_path = out_dir + "/samples_meta.json";
                json manifest = load_or_new_manifest(manifest_path, hash, sa_force);
                std::vector<img::Image> tiles;
                json files = json::array();
                std::string target_id;
                for (int i = 0; i < sa_count; ++i) {
                    diff::SamplerConfig sci = sc;
                    sci.seed = sc.seed + uint64_t(i);
                    pipe::SampleResult res = pipe::sample_one(gen, bank, cfg, spec, refs, sci);
                    target_id = res.target.proxy.image_id;
                    char name[128];
                    std::snprintf(name, sizeof name, "sample_%s_p%d_s%llu.png",
                                  spec.pose_source.c_str(), res.target.person_id,
                                  (unsigned long long)sci.seed);
                    img::save_png(res.image, out_dir + "/" + name);
                    upsert_manifest_item(manifest,
                                         {{"file", name},
                                          {"target_id", target_id},
                                          {"person_id", res.target.person_id},
                                          {"pose_source", spec.pose_source},
                                          {"seed", sci.seed},
                                          {"guidance", sci.guidance}});
                    files.push_back(name);
                    tiles.push_back(std::move(res.image));
                }
                write_json_file(manifest_path, manifest);
                json out{{"ok", true}, {"out", out_dir},       {"files", files},
                         {"target_id", target_id}, {"config_hash", hash}};
                if (!sa_grid.empty()) {
                    img::save_png(pipe::contact_sheet(tiles, grid_columns(int(tiles.size()))),
                                  sa_grid);
                    out["grid"] = sa_grid;
                }
                emit(out);
            } else {
                std::string out_dir = pick(sv_out, workspace + "/video");
                fs::create_directories(out_dir);
                std::string end = sv_end.empty() ? spec.pose_source : sv_end;
                pipe::VideoResult res =
                    pipe::sample_video_clip(gen, bank, cfg, spec, end, sv_frames, refs, sc);
                json files = json::array();
                for (size_t i = 0; i < res.frames.size(); ++i) {
                    char name[64];
                    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
                    img::save_png(res.frames[i], out_dir + "/" + name);
                    files.push_back(name);
                }
                write_json_file(out_dir + "/video_meta.json",
                                {{"config_hash", hash},
                                 {"target_id", res.target.proxy.image_id},
                                 {"pose_source", spec.pose_source},
                                 {"pose_end", end},
                                 {"seed", sc.seed},
                                 {"files", files}});
                json out{{"ok", true},
                         {"out", out_dir},
                         {"files", files},
                         {"target_id", res.target.proxy.image_id},
                         {"config_hash", hash}};
                if (!sv_grid.empty()) {
                    img::save_png(pipe::contact_sheet(res.frames, int(res.frames.size())),
                                  sv_grid);
                    out["grid"] = sv_grid;
                }
                emit(out);
            }
        } else if (ev->parsed()) {
            std::string report = pick(ev_report, rp.report());
            auto rep = pipe::run_eval(cfg, pick(ev_corpus, rp.corpus_dir()),
                                      pick(ev_cleaned, rp.cleaned()),
                                      pick(ev_embedder, rp.embedder()),
                                      pick(ev_samples, rp.samples_dir()), ev_force, report,
                                      pick(ev_csv, rp.report_csv()));
            emit({{"ok", true},
                  {"samples", rep.rows.size()},
                  {"mean_ssim", rep.mean_ssim},
                  {"mean_psnr", rep.mean_psnr},
                  {"mean_cos_target", rep.mean_cos_target},
                  {"mean_cos_other", rep.mean_cos_other},
                  {"identity_margin", rep.identity_margin},
                  {"report", report}});
        } else if (st->parsed()) {
            std::cout << pipe::run_stats(cfg, pick(st_annotations, rp.cleaned())).dump(2)
                      << "\n";
        }
        return 0;
    } catch (const pedgen::Error& e) {
        std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump()
                  << "\n";
        return 1;
    }
}
