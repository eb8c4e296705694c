#pragma once

// Procedural synthetic pedestrian corpus: articulated stick figures over
// per-camera procedural backgrounds, with full ground-truth annotations
// (identity, pose, keypoints, orientation, attributes, modality, quality).

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pedgen/common.hpp"
#include "pedgen/geometry.hpp"
#include "pedgen/image.hpp"
#include "pedgen/records.hpp"

namespace pedgen::corpus {

namespace fs = std::filesystem;

// --- color vocabulary -------------------------------------------------------------

struct ColorAnchor {
    const char* word;
    double rgb[3];
};

inline const std::array<ColorAnchor, 12>& color_anchors() {
    static const std::array<ColorAnchor, 12> anchors = {{
        {"black", {0.05, 0.05, 0.05}},
        {"white", {0.95, 0.95, 0.95}},
        {"gray", {0.50, 0.50, 0.50}},
        {"red", {0.85, 0.10, 0.10}},
        {"green", {0.10, 0.65, 0.15}},
        {"blue", {0.12, 0.20, 0.85}},
        {"yellow", {0.92, 0.88, 0.12}},
        {"orange", {0.95, 0.55, 0.10}},
        {"purple", {0.55, 0.15, 0.70}},
        {"pink", {0.95, 0.60, 0.75}},
        {"brown", {0.45, 0.28, 0.12}},
        {"cyan", {0.10, 0.80, 0.85}},
    }};
    return anchors;
}

inline std::string color_word(const double rgb[3]) {
    double best = 1e300;
    const char* word = "gray";
    for (const auto& a : color_anchors()) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += (rgb[c] - a.rgb[c]) * (rgb[c] - a.rgb[c]);
        if (d < best) {
            best = d;
            word = a.word;
        }
    }
    return word;
}

// --- specs ------------------------------------------------------------------------

struct IdentitySpec {
    int person_id = -1;
    double torso_color[3] = {0, 0, 0};
    double leg_color[3] = {0, 0, 0};
    double head_color[3] = {0, 0, 0};
    double limb_width = 2.0;   // pixels
    double head_radius = 3.0;  // pixels
    bool backpack = false;
    double backpack_color[3] = {0, 0, 0};
    bool carried_item = false;
};

struct CameraSpec {
    int cam_id = -1;
    uint64_t background_texture_seed = 0;
    double color_cast[3] = {1, 1, 1};
    double noise_sigma = 0.0;
};

namespace detail {
inline void jitter_color(const double anchor[3], Rng& rng, double out[3]) {
    // keep the jittered color inside its word's cell so attributes stay truthful
    for (int attempt = 0; attempt < 16; ++attempt) {
        double cand[3];
        for (int c = 0; c < 3; ++c)
            cand[c] = std::min(1.0, std::max(0.0, anchor[c] + rng.uniform(-0.08, 0.08)));
        if (color_word(cand) == color_word(anchor)) {
            for (int c = 0; c < 3; ++c) out[c] = cand[c];
            return;
        }
    }
    for (int c = 0; c < 3; ++c) out[c] = anchor[c];
}
}  // namespace detail

inline std::vector<IdentitySpec> generate_identities(int count, uint64_t seed) {
    if (count < 1) throw InvalidArgument("generate_identities: count must be >= 1");
    Rng rng(seed);
    // distinct (torso, leg) color-word pairs, shuffled by seed, so identities
    // stay visually separable for as long as pairs last
    std::vector<std::pair<int, int>> pairs;
    for (int t = 0; t < 12; ++t)
        for (int l = 0; l < 12; ++l)
            if (t != l) pairs.push_back({t, l});
    for (size_t i = pairs.size() - 1; i > 0; --i) {
        size_t j = size_t(rng.uniform_int(0, int64_t(i)));
        std::swap(pairs[i], pairs[j]);
    }
    static const double skin[4][3] = {{0.98, 0.85, 0.73},
                                      {0.87, 0.68, 0.52},
                                      {0.65, 0.46, 0.33},
                                      {0.45, 0.30, 0.20}};
    std::vector<IdentitySpec> ids;
    ids.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        IdentitySpec id;
        id.person_id = i;
        auto [t, l] = pairs[size_t(i) % pairs.size()];
        detail::jitter_color(color_anchors()[size_t(t)].rgb, rng, id.torso_color);
        detail::jitter_color(color_anchors()[size_t(l)].rgb, rng, id.leg_color);
        const double* sk = skin[size_t(rng.uniform_int(0, 3))];
        for (int c = 0; c < 3; ++c)
            id.head_color[c] = std::min(1.0, std::max(0.0, sk[c] + rng.uniform(-0.04, 0.04)));
        id.limb_width = rng.uniform(1.7, 2.6);
        id.head_radius = rng.uniform(2.7, 3.5);
        id.backpack = rng.bernoulli(0.4);
        int bp = int(rng.uniform_int(0, 11));
        detail::jitter_color(color_anchors()[size_t(bp)].rgb, rng, id.backpack_color);
        id.carried_item = rng.bernoulli(0.3);
        ids.push_back(id);
    }
    return ids;
}

inline std::vector<CameraSpec> generate_cameras(int count, uint64_t seed) {
    if (count < 1) throw InvalidArgument("generate_cameras: count must be >= 1");
    Rng rng(seed);
    std::vector<CameraSpec> cams;
    for (int i = 0; i < count; ++i) {
        CameraSpec c;
        c.cam_id = i;
        c.background_texture_seed = rng.next_u64();
        for (int k = 0; k < 3; ++k) c.color_cast[k] = rng.uniform(0.85, 1.15);
        c.noise_sigma = rng.uniform(0.004, 0.012);
        cams.push_back(c);
    }
    return cams;
}

// --- backgrounds --------------------------------------------------------------------

inline img::Image camera_background(const CameraSpec& cam, int h, int w) {
    Rng rng(cam.background_texture_seed);
    double top[3], bot[3];
    for (int c = 0; c < 3; ++c) {
        top[c] = rng.uniform(0.25, 0.75);
        bot[c] = rng.uniform(0.15, 0.65);
    }
    img::Image im(h, w);
    for (int y = 0; y < h; ++y) {
        double f = double(y) / double(h - 1);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = (1 - f) * top[c] + f * bot[c];
    }
    int blobs = int(rng.uniform_int(4, 8));
    for (int b = 0; b < blobs; ++b) {
        double rgb[3];
        for (int c = 0; c < 3; ++c) rgb[c] = rng.uniform(0.1, 0.8);
        double y0 = rng.uniform(0, double(h)), x0 = rng.uniform(0, double(w));
        double bh = rng.uniform(0.08, 0.3) * h, bw = rng.uniform(0.15, 0.5) * w;
        img::draw_rect(im, y0, x0, y0 + bh, x0 + bw, rgb);
    }
    // a horizon-ish line gives every camera a stable landmark
    double liney = rng.uniform(0.55, 0.8) * h;
    double lc[3] = {rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
    img::draw_segment(im, liney, 0, liney, w - 1, rng.uniform(0.6, 1.4), lc);
    for (auto& v : im.pix) v = std::min(1.0, std::max(0.0, v));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                im.at(y, x, c) = std::min(1.0, im.at(y, x, c) * cam.color_cast[c]);
    return im;
}

// --- skeleton ------------------------------------------------------------------------

inline constexpr int kNumJoints = 12;

enum Joint {
    kHead = 0,
    kNeck = 1,
    kLShoulder = 2,
    kRShoulder = 3,
    kLElbow = 4,
    kRElbow = 5,
    kLHip = 6,
    kRHip = 7,
    kLKnee = 8,
    kRKnee = 9,
    kLAnkle = 10,
    kRAnkle = 11,
};

struct Bone {
    int parent;  // -1 = pelvis root
    geo::Vec3 offset;
};

inline const std::array<Bone, kNumJoints>& skeleton_bones() {
    static const std::array<Bone, kNumJoints> bones = {{
        {kNeck, {0, 0.16, 0}},        // head
        {-1, {0, 0.52, 0}},           // neck
        {kNeck, {0.16, -0.02, 0}},    // l_shoulder
        {kNeck, {-0.16, -0.02, 0}},   // r_shoulder
        {kLShoulder, {0.03, -0.30, 0}},
        {kRShoulder, {-0.03, -0.30, 0}},
        {-1, {0.09, 0, 0}},           // l_hip
        {-1, {-0.09, 0, 0}},          // r_hip
        {kLHip, {0, -0.40, 0}},
        {kRHip, {0, -0.40, 0}},
        {kLKnee, {0, -0.40, 0}},
        {kRKnee, {0, -0.40, 0}},
    }};
    return bones;
}

// world-space joint positions for a pose; each bone's axis-angle in body_pose
// articulates it about its proximal joint
inline std::array<geo::Vec3, kNumJoints> skeleton_fk(const geo::PoseParams& pose) {
    if (pose.body_pose.size() != size_t(kNumJoints) * 3 && !pose.body_pose.empty())
        throw InvalidArgument("skeleton_fk: body_pose must hold one axis-angle per joint");
    double s_h = 1.0, s_w = 1.0;
    if (pose.shape.size() > 0) s_h = 1.0 + 0.08 * std::min(1.5, std::max(-1.5, pose.shape[0]));
    if (pose.shape.size() > 1) s_w = 1.0 + 0.10 * std::min(1.5, std::max(-1.5, pose.shape[1]));
    geo::Mat3 root_rot = geo::rodrigues(pose.global_orient);
    static const int topo[kNumJoints] = {kNeck,  kHead,  kLShoulder, kRShoulder,
                                         kLElbow, kRElbow, kLHip,      kRHip,
                                         kLKnee, kRKnee, kLAnkle,    kRAnkle};
    std::array<geo::Mat3, kNumJoints> rot;
    std::array<geo::Vec3, kNumJoints> pos;
    for (int idx = 0; idx < kNumJoints; ++idx) {
        int j = topo[idx];
        const Bone& bone = skeleton_bones()[size_t(j)];
        geo::Mat3 parent_rot = bone.parent < 0 ? root_rot : rot[size_t(bone.parent)];
        geo::Vec3 parent_pos = bone.parent < 0 ? pose.translation : pos[size_t(bone.parent)];
        geo::Vec3 local{0, 0, 0};
        if (!pose.body_pose.empty())
            local = {pose.body_pose[size_t(j) * 3], pose.body_pose[size_t(j) * 3 + 1],
                     pose.body_pose[size_t(j) * 3 + 2]};
        rot[size_t(j)] = geo::matmul(parent_rot, geo::rodrigues(local));
        geo::Vec3 off{bone.offset.x * s_w, bone.offset.y * s_h, bone.offset.z};
        pos[size_t(j)] = parent_pos + rot[size_t(j)].apply(off);
    }
    return pos;
}

// --- rendering -----------------------------------------------------------------------

struct RenderConfig {
    int height = 64;
    int width = 32;
};

struct Occluder {
    double y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    double shade[3] = {0.4, 0.4, 0.4};
};

struct RenderedSample {
    img::Image image;
    img::Image skeleton_raster;
    img::Image background_plate;
    AnnotationRecord annotation;
};

namespace detail {

struct Projected {
    double y, x;
};

inline Projected project(const geo::Vec3& p, const RenderConfig& rc) {
    double px = 0.47 * rc.height;
    return {0.56 * rc.height - px * p.y, 0.5 * rc.width + px * p.x};
}

// draw into the image and record covered pixels in the body mask
struct FigurePainter {
    img::Image* im;
    std::vector<uint8_t>* mask;

    void segment(double y0, double x0, double y1, double x1, double hw, const double rgb[3]) {
        img::Image before = *im;
        img::draw_segment(*im, y0, x0, y1, x1, hw, rgb);
        note_changes(before);
    }
    void disc(double cy, double cx, double r, const double rgb[3]) {
        img::Image before = *im;
        img::draw_disc(*im, cy, cx, r, rgb);
        note_changes(before);
    }
    void rect(double y0, double x0, double y1, double x1, const double rgb[3]) {
        img::Image before = *im;
        img::draw_rect(*im, y0, x0, y1, x1, rgb);
        note_changes(before);
    }

private:
    void note_changes(const img::Image& before) {
        for (int y = 0; y < im->h; ++y)
            for (int x = 0; x < im->w; ++x)
                for (int c = 0; c < 3; ++c)
                    if (im->at(y, x, c) != before.at(y, x, c)) {
                        (*mask)[size_t(y) * size_t(im->w) + size_t(x)] = 1;
                        break;
                    }
    }
};

}  // namespace detail

inline RenderedSample render_person(const IdentitySpec& id, const geo::PoseParams& pose,
                                    const CameraSpec& cam, const std::string& modality,
                                    uint64_t noise_seed, const RenderConfig& rc = RenderConfig{},
                                    const std::optional<Occluder>& occluder = std::nullopt) {
    if (modality != "rgb" && modality != "ir")
        throw InvalidArgument("render_person: modality must be rgb or ir");
    if (rc.height < 32 || rc.width < 16)
        throw InvalidArgument("render_person: raster too small for the figure");

    RenderedSample out;
    out.background_plate = camera_background(cam, rc.height, rc.width);
    img::Image& im = out.image;
    im = out.background_plate;
    std::vector<uint8_t> body_mask(size_t(rc.height) * size_t(rc.width), 0);
    detail::FigurePainter paint{&im, &body_mask};

    auto joints = skeleton_fk(pose);
    std::array<detail::Projected, kNumJoints> pj;
    for (int j = 0; j < kNumJoints; ++j) pj[size_t(j)] = detail::project(joints[size_t(j)], rc);
    detail::Projected pelvis = detail::project(pose.translation, rc);

    geo::Vec3 facing = geo::orientation_vector(pose.global_orient);
    double hw = 0.5 * id.limb_width;
    double torso_hw = 1.7 * id.limb_width * 0.5 + 1.2;

    auto draw_backpack = [&] {
        double cy = 0.5 * (pelvis.y + pj[kNeck].y);
        double cx = 0.5 * (pelvis.x + pj[kNeck].x);
        paint.rect(cy - 0.16 * rc.height * 0.5, cx - torso_hw - 1.5, cy + 0.16 * rc.height * 0.5,
                   cx + torso_hw + 1.5, id.backpack_color);
    };

    if (id.backpack && facing.z >= 0) draw_backpack();  // behind the torso
    // legs
    paint.segment(pj[kLHip].y, pj[kLHip].x, pj[kLKnee].y, pj[kLKnee].x, hw, id.leg_color);
    paint.segment(pj[kLKnee].y, pj[kLKnee].x, pj[kLAnkle].y, pj[kLAnkle].x, hw, id.leg_color);
    paint.segment(pj[kRHip].y, pj[kRHip].x, pj[kRKnee].y, pj[kRKnee].x, hw, id.leg_color);
    paint.segment(pj[kRKnee].y, pj[kRKnee].x, pj[kRAnkle].y, pj[kRAnkle].x, hw, id.leg_color);
    // torso + arms
    paint.segment(pelvis.y, pelvis.x, pj[kNeck].y, pj[kNeck].x, torso_hw, id.torso_color);
    paint.segment(pj[kLShoulder].y, pj[kLShoulder].x, pj[kLElbow].y, pj[kLElbow].x, hw,
                  id.torso_color);
    paint.segment(pj[kRShoulder].y, pj[kRShoulder].x, pj[kRElbow].y, pj[kRElbow].x, hw,
                  id.torso_color);
    if (id.backpack && facing.z < 0) draw_backpack();  // facing away: backpack visible
    paint.disc(pj[kHead].y, pj[kHead].x, id.head_radius, id.head_color);
    if (id.carried_item) {
        static const double item_color[3] = {0.25, 0.18, 0.12};
        paint.rect(pj[kLElbow].y, pj[kLElbow].x - 1.5, pj[kLElbow].y + 3.0, pj[kLElbow].x + 1.5,
                   item_color);
    }
    if (occluder)
        img::draw_rect(im, occluder->y0, occluder->x0, occluder->y1, occluder->x1,
                       occluder->shade);  // scene object: kept out of the body mask

    // skeleton raster: projected bones on black
    out.skeleton_raster = img::Image(rc.height, rc.width);
    static const double bone_color[3] = {1, 1, 1};
    for (int j = 0; j < kNumJoints; ++j) {
        int parent = skeleton_bones()[size_t(j)].parent;
        detail::Projected a = parent < 0 ? pelvis : pj[size_t(parent)];
        img::draw_segment(out.skeleton_raster, a.y, a.x, pj[size_t(j)].y, pj[size_t(j)].x, 0.6,
                          bone_color);
    }

    Rng noise_rng(noise_seed);
    if (modality == "ir") {
        // single thermal channel, then replicated; noise is scalar per pixel so
        // the three channels stay equal. Body heat comes from three physical
        // stand-ins: a per-person baseline temperature (golden-ratio spacing
        // keeps any two apart), the garment's brightness, and a dye-dependent
        // emissivity so same-luminance fabrics still differ in the thermal
        // image.
        constexpr double kGolden = 0.6180339887498949;
        double spread = id.person_id * kGolden;
        double body_base = 0.45 + 0.26 * (spread - std::floor(spread));
        auto lum = img::to_gray(im);
        for (int y = 0; y < rc.height; ++y)
            for (int x = 0; x < rc.width; ++x) {
                size_t px = size_t(y) * size_t(rc.width) + size_t(x);
                double v;
                if (body_mask[px]) {
                    double r = im.at(y, x, 0), g = im.at(y, x, 1), b = im.at(y, x, 2);
                    double hue = std::atan2(1.7320508075688772 * (g - b), 2 * r - g - b);
                    double chroma = std::max({r, g, b}) - std::min({r, g, b});
                    double emissivity =
                        chroma < 0.05 ? 0.5 : 0.5 + 0.5 * std::sin(hue);  // in [0,1]
                    v = body_base + 0.15 * lum[px] + 0.10 * emissivity;
                } else {
                    v = 0.10 + 0.28 * lum[px];
                }
                v += noise_rng.normal() * cam.noise_sigma;
                v = std::min(1.0, std::max(0.0, v));
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = v;
            }
    } else {
        for (int y = 0; y < rc.height; ++y)
            for (int x = 0; x < rc.width; ++x)
                for (int c = 0; c < 3; ++c) {
                    double v = im.at(y, x, c) + noise_rng.normal() * cam.noise_sigma;
                    im.at(y, x, c) = std::min(1.0, std::max(0.0, v));
                }
    }

    // annotation from ground truth
    AnnotationRecord& ann = out.annotation;
    ann.person_id = id.person_id;
    ann.cam_id = cam.cam_id;
    ann.modality = modality;
    ann.orientation = facing;
    ann.orientation_label = classify_orientation(facing);
    ann.attributes["torso_color"] = color_word(id.torso_color);
    ann.attributes["leg_color"] = color_word(id.leg_color);
    ann.attributes["backpack"] = id.backpack ? "yes" : "no";
    ann.attributes["carried_item"] = id.carried_item ? "yes" : "no";
    ann.pose = pose;
    double conf_sum = 0;
    int visible = 0;
    for (int j = 0; j < kNumJoints; ++j) {
        double y = pj[size_t(j)].y, x = pj[size_t(j)].x;
        bool in_frame = y >= 0 && y < rc.height && x >= 0 && x < rc.width;
        double conf = in_frame ? 1.0 : 0.0;
        ann.keypoints.push_back({x, y, conf});
        conf_sum += conf;
        if (conf > 0) ++visible;
    }
    QualityInfo q;
    q.keypoint_count = visible;
    q.mean_confidence = conf_sum / double(kNumJoints);
    q.misalignment = 0.0;
    q.sharpness = img::laplacian_variance(im);
    ann.quality = q;
    return out;
}

// --- pose sampling ----------------------------------------------------------------

// body shape is a fixed function of the identity so every sample (and every
// interpolated video frame) of one person agrees on build
inline std::vector<double> identity_shape(int person_id) {
    Rng rng(fnv1a64_mix(0x9e3779b97f4a7c15ull, "shape/" + std::to_string(person_id)));
    return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0};
}

inline geo::PoseParams random_pose(int person_id, double yaw, Rng& rng) {
    geo::PoseParams p;
    p.global_orient = {0, yaw, 0};
    p.body_pose.assign(size_t(kNumJoints) * 3, 0.0);
    auto set = [&](int joint, int axis, double v) { p.body_pose[size_t(joint) * 3 + size_t(axis)] = v; };
    double swing = rng.uniform(-0.45, 0.45);
    set(kLHip, 0, swing + rng.uniform(-0.05, 0.05));
    set(kRHip, 0, -swing + rng.uniform(-0.05, 0.05));
    set(kLKnee, 0, rng.uniform(0.0, 0.5));
    set(kRKnee, 0, rng.uniform(0.0, 0.5));
    set(kLShoulder, 0, -0.8 * swing + rng.uniform(-0.1, 0.1));
    set(kRShoulder, 0, 0.8 * swing + rng.uniform(-0.1, 0.1));
    set(kLShoulder, 2, rng.uniform(0.0, 0.15));
    set(kRShoulder, 2, -rng.uniform(0.0, 0.15));
    set(kLElbow, 0, rng.uniform(-0.1, 0.35));
    set(kRElbow, 0, rng.uniform(-0.1, 0.35));
    set(kHead, 2, rng.uniform(-0.08, 0.08));
    p.shape = identity_shape(person_id);
    p.translation = {rng.uniform(-0.04, 0.04), rng.uniform(-0.03, 0.03), 0};
    return p;
}

// --- corruption (feeds the cleaning filters something to reject) --------------------

enum class Corruption { kBlur, kKeypointDrop, kLowConfidence, kJitter };

inline void corrupt_sample(RenderedSample& s, Corruption mode, Rng& rng) {
    AnnotationRecord& ann = s.annotation;
    QualityInfo q = *ann.quality;
    switch (mode) {
        case Corruption::kBlur:
            // two passes: a single box blur leaves these tiny high-contrast
            // figures well above any usable sharpness floor
            s.image = img::box_blur(img::box_blur(s.image, 3), 3);
            q.sharpness = img::laplacian_variance(s.image);
            break;
        case Corruption::kKeypointDrop: {
            // drop 5..9 distinct joints so the count lands below any sane
            // min_keypoints threshold
            int drop = int(rng.uniform_int(5, 9));
            std::array<int, kNumJoints> order;
            for (int j = 0; j < kNumJoints; ++j) order[size_t(j)] = j;
            for (int j = kNumJoints - 1; j > 0; --j)
                std::swap(order[size_t(j)], order[size_t(rng.uniform_int(0, j))]);
            for (int d = 0; d < drop; ++d) ann.keypoints[size_t(order[size_t(d)])].confidence = 0.0;
            double sum = 0;
            int vis = 0;
            for (const auto& k : ann.keypoints) {
                sum += k.confidence;
                if (k.confidence > 0) ++vis;
            }
            q.keypoint_count = vis;
            q.mean_confidence = sum / double(kNumJoints);
            break;
        }
        case Corruption::kLowConfidence: {
            double sum = 0;
            for (auto& k : ann.keypoints) {
                k.confidence *= 0.3;
                sum += k.confidence;
            }
            q.mean_confidence = sum / double(kNumJoints);
            break;
        }
        case Corruption::kJitter: {
            // per-axis offset of at least 3px puts every displacement above
            // 3*sqrt(2) ~ 4.24px, safely past the default misalignment cap
            double dist_sum = 0;
            int n = 0;
            for (auto& k : ann.keypoints) {
                if (k.confidence <= 0) continue;
                double dy = (rng.bernoulli(0.5) ? 1 : -1) * (3.0 + std::abs(rng.normal()) * 4.0);
                double dx = (rng.bernoulli(0.5) ? 1 : -1) * (3.0 + std::abs(rng.normal()) * 4.0);
                k.y += dy;
                k.x += dx;
                dist_sum += std::sqrt(dy * dy + dx * dx);
                ++n;
            }
            q.misalignment = n > 0 ? dist_sum / double(n) : 0.0;
            break;
        }
    }
    ann.quality = q;
}

// --- corpus generation -----------------------------------------------------------------

struct CorpusConfig {
    std::string out_dir;
    int num_identities = 16;
    int num_cameras = 6;
    int samples_per_identity_per_camera = 4;
    double ir_fraction = 0.25;
    double corrupt_fraction = 0.15;
    double occlusion_fraction = 0.10;
    int height = 64;
    int width = 32;
    uint64_t seed = 0;
};

inline json corpus_config_to_json(const CorpusConfig& c) {
    return json{{"out_dir", c.out_dir},
                {"num_identities", c.num_identities},
                {"num_cameras", c.num_cameras},
                {"samples_per_identity_per_camera", c.samples_per_identity_per_camera},
                {"ir_fraction", c.ir_fraction},
                {"corrupt_fraction", c.corrupt_fraction},
                {"occlusion_fraction", c.occlusion_fraction},
                {"height", c.height},
                {"width", c.width},
                {"seed", c.seed}};
}

inline CorpusConfig corpus_config_from_json(const json& j) {
    CorpusConfig c;
    c.out_dir = j.value("out_dir", c.out_dir);
    c.num_identities = j.value("num_identities", c.num_identities);
    c.num_cameras = j.value("num_cameras", c.num_cameras);
    c.samples_per_identity_per_camera =
        j.value("samples_per_identity_per_camera", c.samples_per_identity_per_camera);
    c.ir_fraction = j.value("ir_fraction", c.ir_fraction);
    c.corrupt_fraction = j.value("corrupt_fraction", c.corrupt_fraction);
    c.occlusion_fraction = j.value("occlusion_fraction", c.occlusion_fraction);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline void validate(const CorpusConfig& c) {
    if (c.out_dir.empty()) throw ConfigError("corpus: out_dir is empty");
    if (c.num_identities < 1 || c.num_cameras < 1 || c.samples_per_identity_per_camera < 1)
        throw ConfigError("corpus: identity/camera/sample counts must be >= 1");
    for (double f : {c.ir_fraction, c.corrupt_fraction, c.occlusion_fraction})
        if (f < 0.0 || f > 1.0) throw ConfigError("corpus: fractions must lie in [0,1]");
    if (c.height < 32 || c.width < 16) throw ConfigError("corpus: raster too small");
}

struct CorpusPaths {
    std::string root;

    std::string images_dir() const { return root + "/images"; }
    std::string skeletons_dir() const { return root + "/skeletons"; }
    std::string backgrounds_dir() const { return root + "/backgrounds"; }
    std::string image(const std::string& id) const { return images_dir() + "/" + id + ".png"; }
    std::string skeleton(const std::string& id) const {
        return skeletons_dir() + "/" + id + ".png";
    }
    std::string background(int cam_id) const {
        return backgrounds_dir() + "/" + std::to_string(cam_id) + ".png";
    }
    std::string annotations() const { return root + "/annotations.jsonl"; }
    std::string meta() const { return root + "/corpus.json"; }
};

inline std::string make_image_id(int person, int cam, int sample) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "p%04d_c%03d_s%04d", person, cam, sample);
    return buf;
}

struct CorpusSummary {
    int records = 0;
    int corrupted = 0;
    int ir = 0;
};

inline CorpusSummary generate_corpus(const CorpusConfig& cfg,
                                     const std::string& config_hash = "") {
    validate(cfg);
    CorpusPaths paths{cfg.out_dir};
    std::error_code ec;
    for (const auto& d : {paths.images_dir(), paths.skeletons_dir(), paths.backgrounds_dir()}) {
        fs::create_directories(d, ec);
        if (ec) throw IoError("cannot create " + d + ": " + ec.message());
    }

    auto ids = generate_identities(cfg.num_identities, cfg.seed);
    auto cams = generate_cameras(cfg.num_cameras, fnv1a64_mix(cfg.seed, "cameras"));
    RenderConfig rc{cfg.height, cfg.width};
    for (const auto& cam : cams)
        img::save_png(camera_background(cam, cfg.height, cfg.width), paths.background(cam.cam_id));

    Rng master(cfg.seed);
    int total_per_identity = cfg.num_cameras * cfg.samples_per_identity_per_camera;
    std::vector<AnnotationRecord> records;
    CorpusSummary summary;
    for (const auto& id : ids) {
        Rng id_rng = master.fork("identity/" + std::to_string(id.person_id));
        double phase = id_rng.uniform(0.0, 2.0 * geo::kPi);
        for (const auto& cam : cams) {
            for (int k = 0; k < cfg.samples_per_identity_per_camera; ++k) {
                Rng rng = master.fork("sample/" + std::to_string(id.person_id) + "/" +
                                      std::to_string(cam.cam_id) + "/" + std::to_string(k));
                // stratified yaw across each identity's full sample list, so
                // >= 8 samples always cover >= 3 orientation sectors
                int flat = cam.cam_id * cfg.samples_per_identity_per_camera + k;
                double stratum = 2.0 * geo::kPi / double(total_per_identity);
                double yaw = std::fmod(phase + stratum * (flat + rng.uniform()),
                                       2.0 * geo::kPi);
                geo::PoseParams pose = random_pose(id.person_id, yaw, rng);
                std::string modality = rng.bernoulli(cfg.ir_fraction) ? "ir" : "rgb";
                std::optional<Occluder> occ;
                if (rng.bernoulli(cfg.occlusion_fraction)) {
                    Occluder o;
                    o.y0 = rng.uniform(0.3, 0.6) * cfg.height;
                    o.y1 = o.y0 + rng.uniform(0.12, 0.25) * cfg.height;
                    o.x0 = rng.uniform(0.1, 0.6) * cfg.width;
                    o.x1 = o.x0 + rng.uniform(0.25, 0.5) * cfg.width;
                    for (int c = 0; c < 3; ++c) o.shade[c] = rng.uniform(0.1, 0.8);
                    occ = o;
                }
                Rng noise = rng.fork("noise");
                RenderedSample sample =
                    render_person(id, pose, cam, modality, noise.next_u64(), rc, occ);
                if (rng.bernoulli(cfg.corrupt_fraction)) {
                    Rng crng = rng.fork("corrupt");
                    auto mode = Corruption(crng.uniform_int(0, 3));
                    corrupt_sample(sample, mode, crng);
                    ++summary.corrupted;
                }
                sample.annotation.image_id = make_image_id(id.person_id, cam.cam_id, k);
                img::save_png(sample.image, paths.image(sample.annotation.image_id));
                img::save_png(sample.skeleton_raster,
                              paths.skeleton(sample.annotation.image_id));
                if (modality == "ir") ++summary.ir;
                records.push_back(std::move(sample.annotation));
                ++summary.records;
            }
        }
    }
    write_annotations(paths.annotations(), records);

    json meta{{"config", corpus_config_to_json(cfg)},
              {"seed", cfg.seed},
              {"records", summary.records},
              {"format_version", 1}};
    if (!config_hash.empty()) meta["config_hash"] = config_hash;
    std::ofstream out(paths.meta(), std::ios::binary);
    if (!out) throw IoError("cannot write " + paths.meta());
    out << meta.dump(2) << "\n";
    return summary;
}

inline json read_corpus_meta(const std::string& root) {
    CorpusPaths paths{root};
    std::ifstream in(paths.meta());
    if (!in)
        throw StagedDependency("missing corpus metadata: " + paths.meta() +
                               " (run corpus-gen first)");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(paths.meta() + ": " + e.what());
    }
    return j;
}

}  // namespace pedgen::corpus
