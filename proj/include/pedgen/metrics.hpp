#pragma once

// Evaluation stack: pixel metrics (PSNR, windowed SSIM), a small corpus-trained
// identity embedder whose cosine stands in for pretrained ReID features, and
// report assembly for the eval CLI.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pedgen/autodiff.hpp"
#include "pedgen/image.hpp"
#include "pedgen/nn.hpp"
#include "pedgen/records.hpp"
#include "pedgen/serialize.hpp"

namespace pedgen::metrics {

// --- pixel metrics ---------------------------------------------------------------

inline double psnr(const img::Image& a, const img::Image& b) {
    if (a.h != b.h || a.w != b.w) throw InvalidArgument("psnr: shape mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        double d = a.pix[i] - b.pix[i];
        mse += d * d;
    }
    mse /= double(a.pix.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

// mean windowed SSIM on luminance; 7x7 uniform window, K1=0.01 K2=0.03, range 1
inline double ssim(const img::Image& a, const img::Image& b) {
    if (a.h != b.h || a.w != b.w) throw InvalidArgument("ssim: shape mismatch");
    constexpr int kWin = 7;
    if (a.h < kWin || a.w < kWin) throw InvalidArgument("ssim: image smaller than window");
    constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
    auto ga = img::to_gray(a), gb = img::to_gray(b);
    auto at = [&](const std::vector<double>& g, int y, int x) {
        return g[size_t(y) * size_t(a.w) + size_t(x)];
    };
    double total = 0;
    int64_t windows = 0;
    const double n = double(kWin * kWin);
    for (int y = 0; y + kWin <= a.h; ++y)
        for (int x = 0; x + kWin <= a.w; ++x) {
            double ma = 0, mb = 0;
            for (int dy = 0; dy < kWin; ++dy)
                for (int dx = 0; dx < kWin; ++dx) {
                    ma += at(ga, y + dy, x + dx);
                    mb += at(gb, y + dy, x + dx);
                }
            ma /= n;
            mb /= n;
            double va = 0, vb = 0, cov = 0;
            for (int dy = 0; dy < kWin; ++dy)
                for (int dx = 0; dx < kWin; ++dx) {
                    double da = at(ga, y + dy, x + dx) - ma;
                    double db = at(gb, y + dy, x + dx) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                     ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
            ++windows;
        }
    return total / double(windows);
}

// --- identity embedder -----------------------------------------------------------

struct EmbedderConfig {
    int d_id = 64;
    int steps = 3200;  // enough for >= 0.9 held-out accuracy at desk scale
    int batch = 16;
    double lr = 3e-3;
    double camera_loss_weight = 0.3;
    double val_fraction = 0.25;
    double logit_scale = 16.0;  // cosine logits need a temperature
    bool augment = true;        // flip/shift/brightness/noise on training crops
    uint64_t seed = 1;
};

inline json embedder_config_to_json(const EmbedderConfig& c) {
    return {{"d_id", c.d_id},
            {"steps", c.steps},
            {"batch", c.batch},
            {"lr", c.lr},
            {"camera_loss_weight", c.camera_loss_weight},
            {"val_fraction", c.val_fraction},
            {"logit_scale", c.logit_scale},
            {"seed", c.seed}};
}

inline EmbedderConfig embedder_config_from_json(const json& j) {
    EmbedderConfig c;
    if (j.contains("d_id")) c.d_id = j.at("d_id").get<int>();
    if (j.contains("steps")) c.steps = j.at("steps").get<int>();
    if (j.contains("batch")) c.batch = j.at("batch").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("camera_loss_weight"))
        c.camera_loss_weight = j.at("camera_loss_weight").get<double>();
    if (j.contains("val_fraction")) c.val_fraction = j.at("val_fraction").get<double>();
    if (j.contains("logit_scale")) c.logit_scale = j.at("logit_scale").get<double>();
    if (j.contains("augment")) c.augment = j.at("augment").get<bool>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    return c;
}

namespace detail {

// mirror / small shift / brightness / noise; the invariances a person's
// appearance actually has, so the classifier cannot just memorize pixels.
// Thermal frames (all channels equal) skip the photometric part: those
// cameras are calibrated and the absolute level is the identity cue.
inline Tensor augment_chw(const Tensor& t, Rng& rng) {
    int64_t c = t.shape[0], h = t.shape[1], w = t.shape[2];
    bool thermal = true;
    for (int64_t i = 0, hw = h * w; i < hw && thermal; ++i)
        thermal = t.data[size_t(i)] == t.data[size_t(hw + i)] &&
                  t.data[size_t(i)] == t.data[size_t(2 * hw + i)];
    Tensor out = t;
    bool flip = rng.bernoulli(0.5);
    int dy = int(rng.uniform_int(-2, 2)), dx = int(rng.uniform_int(-2, 2));
    double gain = thermal ? 1.0 : 1.0 + rng.uniform(-0.05, 0.05);
    double bias = thermal ? 0.0 : rng.uniform(-0.015, 0.015);
    double sigma = thermal ? 0.005 : 0.01;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                int64_t sy = std::clamp(y + dy, int64_t(0), h - 1);
                int64_t sx = std::clamp(x + dx, int64_t(0), w - 1);
                if (flip) sx = w - 1 - sx;
                double v = t.at(ch, sy, sx) * gain + bias + rng.normal() * sigma;
                out.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
            }
    return out;
}

}  // namespace detail

struct IdentityEmbedder {
    EmbedderConfig cfg;
    std::vector<int> id_classes;   // person_id per class index
    std::vector<int> cam_classes;  // cam_id per class index
    double val_accuracy = 0.0;
    nn::ParamStore params{1};

    struct Heads {
        ad::Var embedding;  // [d_id], unit norm
        ad::Var id_logits;  // [1, num_ids]
        ad::Var cam_logits;
    };

    Heads forward(const Tensor& image_chw) {
        ad::Var x = ad::constant(image_chw);
        x = ad::relu(nn::conv2d(params, "conv1", x, 3, 16, 3, 2, 1));
        x = ad::relu(nn::conv2d(params, "conv2", x, 16, 32, 3, 2, 1));
        x = ad::relu(nn::conv2d(params, "conv3", x, 32, 64, 3, 2, 1));
        x = ad::relu(nn::conv2d(params, "conv4", x, 64, 64, 3, 1, 1));
        // joint avg+max pooling: averages see the dominant background, maxima
        // pick up the saturated clothing colors
        int64_t spatial = x->val.shape[1] * x->val.shape[2];
        ad::Var flat = ad::reshape(x, {64, spatial});
        ad::Var avg = ad::reshape(
            ad::matmul(flat, ad::constant(Tensor::full({spatial, 1}, 1.0 / double(spatial)))),
            {1, 64});
        ad::Var mx = ad::reshape(
            ad::masked_global_max(ad::reshape(x, {1, 64, x->val.shape[1], x->val.shape[2]}),
                                  {1}),
            {1, 64});
        ad::Var pool = ad::concat({avg, mx}, 1);
        ad::Var e = nn::linear(params, "fc", pool, 128, cfg.d_id);
        e = ad::l2_normalize(e);
        Heads h;
        h.embedding = ad::reshape(e, {cfg.d_id});
        ad::Var scaled = ad::scale(e, cfg.logit_scale);
        h.id_logits = nn::linear(params, "head_id", scaled, cfg.d_id,
                                 int64_t(id_classes.size()));
        h.cam_logits = nn::linear(params, "head_cam", scaled, cfg.d_id,
                                  int64_t(cam_classes.size()));
        return h;
    }

    std::vector<double> embed(const img::Image& im) {
        ad::NoGrad ng;
        auto h = forward(img::to_tensor(im));
        return h.embedding->val.data;
    }

    int class_of_person(int person_id) const {
        auto it = std::lower_bound(id_classes.begin(), id_classes.end(), person_id);
        if (it == id_classes.end() || *it != person_id)
            throw InvalidArgument("embedder: unknown person id " + std::to_string(person_id));
        return int(it - id_classes.begin());
    }
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw InvalidArgument("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

using ImageLoader = std::function<img::Image(const AnnotationRecord&)>;

inline IdentityEmbedder train_embedder(const std::vector<AnnotationRecord>& records,
                                       const ImageLoader& load, EmbedderConfig cfg) {
    std::set<int> persons, cams;
    for (const auto& r : records) {
        persons.insert(r.person_id);
        cams.insert(r.cam_id);
    }
    if (persons.size() < 2) throw InvalidArgument("train_embedder: need >= 2 identities");

    IdentityEmbedder emb;
    emb.cfg = cfg;
    emb.id_classes.assign(persons.begin(), persons.end());
    emb.cam_classes.assign(cams.begin(), cams.end());
    emb.params = nn::ParamStore(cfg.seed);

    struct Row {
        Tensor image;
        int id_class, cam_class;
    };
    std::vector<Row> train, val;
    std::map<int, std::vector<const AnnotationRecord*>> by_person;
    for (const auto& r : records) by_person[r.person_id].push_back(&r);
    int stride = std::max(2, int(std::lround(1.0 / std::max(0.05, cfg.val_fraction))));
    for (auto& [person, group] : by_person) {
        std::sort(group.begin(), group.end(),
                  [](const AnnotationRecord* a, const AnnotationRecord* b) {
                      return a->image_id < b->image_id;
                  });
        for (size_t i = 0; i < group.size(); ++i) {
            auto cam_it = std::lower_bound(emb.cam_classes.begin(), emb.cam_classes.end(),
                                           group[i]->cam_id);
            Row row{img::to_tensor(load(*group[i])), emb.class_of_person(person),
                    int(cam_it - emb.cam_classes.begin())};
            if (int(i) % stride == stride - 1 && group.size() > 1) {
                val.push_back(std::move(row));
            } else {
                // ir frames are the minority modality and much harder; show
                // them three times as often so the thermal cues actually get
                // learned
                if (group[i]->modality == "ir") {
                    train.push_back(row);
                    train.push_back(row);
                }
                train.push_back(std::move(row));
            }
        }
    }
    if (train.empty()) throw InvalidArgument("train_embedder: empty training split");

    auto val_accuracy = [&]() {
        if (val.empty()) return 1.0;
        ad::NoGrad ng;
        int hit = 0;
        for (const auto& row : val) {
            auto h = emb.forward(row.image);
            const auto& lg = h.id_logits->val;
            int best = 0;
            for (int64_t k = 1; k < lg.shape[1]; ++k)
                if (lg[k] > lg[best]) best = int(k);
            if (best == row.id_class) ++hit;
        }
        return double(hit) / double(val.size());
    };

    nn::Adam opt(cfg.lr);
    Rng master(cfg.seed);
    for (int step = 0; step < cfg.steps; ++step) {
        if (step == cfg.steps * 2 / 3) opt.set_lr(cfg.lr * 0.3);
        Rng rng = master.fork("step/" + std::to_string(step));
        std::vector<ad::Var> id_rows, cam_rows;
        std::vector<int> id_labels, cam_labels;
        for (int b = 0; b < cfg.batch; ++b) {
            const Row& row = train[size_t(rng.uniform_int(0, int(train.size()) - 1))];
            auto h = emb.forward(cfg.augment ? detail::augment_chw(row.image, rng) : row.image);
            id_rows.push_back(h.id_logits);
            cam_rows.push_back(h.cam_logits);
            id_labels.push_back(row.id_class);
            cam_labels.push_back(row.cam_class);
        }
        ad::Var loss = ad::cross_entropy(ad::concat(id_rows, 0), id_labels);
        loss = ad::add(loss, ad::scale(ad::cross_entropy(ad::concat(cam_rows, 0), cam_labels),
                                       cfg.camera_loss_weight));
        emb.params.zero_grads();
        ad::backward(loss);
        opt.step(emb.params);
        if ((step + 1) % 50 == 0 && val_accuracy() >= 0.98) break;
    }
    emb.val_accuracy = val_accuracy();
    return emb;
}

inline void save_embedder(const IdentityEmbedder& emb, const std::string& path) {
    std::map<std::string, Tensor> tensors;
    for (const auto& [name, p] : emb.params.all()) tensors[name] = p->val;
    json meta{{"kind", "identity_embedder"},
              {"config", embedder_config_to_json(emb.cfg)},
              {"id_classes", emb.id_classes},
              {"cam_classes", emb.cam_classes},
              {"val_accuracy", emb.val_accuracy}};
    ser::write_tensor_file(path, std::move(meta), tensors);
}

inline IdentityEmbedder load_embedder(const std::string& path) {
    ser::TensorFile tf = ser::read_tensor_file(path);
    if (!tf.meta.contains("kind") || tf.meta.at("kind") != "identity_embedder")
        throw SchemaError(path + ": not an embedder checkpoint");
    IdentityEmbedder emb;
    emb.cfg = embedder_config_from_json(tf.meta.at("config"));
    emb.id_classes = tf.meta.at("id_classes").get<std::vector<int>>();
    emb.cam_classes = tf.meta.at("cam_classes").get<std::vector<int>>();
    emb.val_accuracy = tf.meta.value("val_accuracy", 0.0);
    emb.params = nn::ParamStore(emb.cfg.seed);
    for (auto& [name, t] : tf.tensors) emb.params.assign(name, std::move(t));
    return emb;
}

// --- evaluation report -----------------------------------------------------------

struct EvalRow {
    std::string image_id;
    double ssim = 0, psnr = 0, cos_target = 0, cos_other = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_ssim = 0, mean_psnr = 0, mean_cos_target = 0, mean_cos_other = 0;
    double identity_margin = 0;
    json config_echo;
};

inline EvalReport evaluate(const std::vector<img::Image>& generated,
                           const std::vector<AnnotationRecord>& target_records,
                           const std::vector<img::Image>& target_images,
                           IdentityEmbedder& embedder, uint64_t seed = 0,
                           json config_echo = json::object()) {
    if (generated.size() != target_records.size() ||
        generated.size() != target_images.size() || generated.empty())
        throw InvalidArgument("evaluate: misaligned generated/target sets");
    std::set<int> persons;
    for (const auto& r : target_records) persons.insert(r.person_id);
    if (persons.size() < 2)
        throw InvalidArgument("evaluate: identity margin needs >= 2 identities in targets");

    std::vector<std::vector<double>> target_emb(target_images.size());
    for (size_t i = 0; i < target_images.size(); ++i)
        target_emb[i] = embedder.embed(target_images[i]);

    Rng rng(seed);
    EvalReport rep;
    rep.config_echo = std::move(config_echo);
    for (size_t i = 0; i < generated.size(); ++i) {
        EvalRow row;
        row.image_id = target_records[i].image_id;
        row.ssim = ssim(generated[i], target_images[i]);
        row.psnr = psnr(generated[i], target_images[i]);
        auto e = embedder.embed(generated[i]);
        row.cos_target = cosine(e, target_emb[i]);
        std::vector<size_t> others;
        for (size_t j = 0; j < target_records.size(); ++j)
            if (target_records[j].person_id != target_records[i].person_id) others.push_back(j);
        size_t pick = others[size_t(rng.uniform_int(0, int(others.size()) - 1))];
        row.cos_other = cosine(e, target_emb[pick]);
        rep.rows.push_back(std::move(row));
    }
    double n = double(rep.rows.size());
    for (const auto& r : rep.rows) {
        rep.mean_ssim += r.ssim / n;
        rep.mean_psnr += r.psnr / n;
        rep.mean_cos_target += r.cos_target / n;
        rep.mean_cos_other += r.cos_other / n;
    }
    rep.identity_margin = rep.mean_cos_target - rep.mean_cos_other;
    return rep;
}

// JSON cannot carry IEEE infinities, so infinite PSNR serializes as the string "inf"
inline json finite_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

inline json eval_report_to_json(const EvalReport& rep) {
    json rows = json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"image_id", r.image_id},
                        {"ssim", r.ssim},
                        {"psnr", finite_or_inf(r.psnr)},
                        {"cos_target", r.cos_target},
                        {"cos_other", r.cos_other}});
    return {{"identity_metric", "corpus-embedder cosine (stand-in for pretrained ReID features)"},
            {"config", rep.config_echo},
            {"rows", std::move(rows)},
            {"mean_ssim", rep.mean_ssim},
            {"mean_psnr", finite_or_inf(rep.mean_psnr)},
            {"mean_cos_target", rep.mean_cos_target},
            {"mean_cos_other", rep.mean_cos_other},
            {"identity_margin", rep.identity_margin}};
}

inline void write_eval_report(const EvalReport& rep, const std::string& json_path,
                              const std::string& csv_path) {
    std::ofstream jf(json_path, std::ios::binary);
    if (!jf) throw IoError("cannot write " + json_path);
    jf << eval_report_to_json(rep).dump(2) << "\n";
    std::ofstream cf(csv_path, std::ios::binary);
    if (!cf) throw IoError("cannot write " + csv_path);
    cf << "image_id,ssim,psnr,cos_target,cos_other\n";
    char buf[256];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", r.image_id.c_str(),
                      r.ssim, r.psnr, r.cos_target, r.cos_other);
        cf << buf;
    }
}

}  // namespace pedgen::metrics
