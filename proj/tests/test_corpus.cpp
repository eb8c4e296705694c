#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "pedgen/corpus.hpp"

using namespace pedgen;
using namespace pedgen::corpus;
namespace fs = std::filesystem;

namespace {

IdentitySpec test_identity() {
    auto ids = generate_identities(3, 99);
    return ids[1];
}

CameraSpec quiet_camera() {
    CameraSpec cam;
    cam.cam_id = 0;
    cam.background_texture_seed = 1234;
    cam.color_cast[0] = cam.color_cast[1] = cam.color_cast[2] = 1.0;
    cam.noise_sigma = 0.0;
    return cam;
}

geo::PoseParams frontal_pose(int person_id = 1) {
    Rng rng(5);
    return random_pose(person_id, 0.0, rng);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("generate_identities is deterministic and seed-sensitive") {
    auto a = generate_identities(16, 7);
    auto b = generate_identities(16, 7);
    REQUIRE(a.size() == 16);
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].person_id == int(i));
        for (int c = 0; c < 3; ++c) {
            REQUIRE(a[i].torso_color[c] == b[i].torso_color[c]);
            REQUIRE(a[i].leg_color[c] == b[i].leg_color[c]);
        }
        REQUIRE(a[i].limb_width == b[i].limb_width);
        REQUIRE(a[i].backpack == b[i].backpack);
    }
    auto c = generate_identities(16, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i)
        for (int ch = 0; ch < 3; ++ch)
            if (a[i].torso_color[ch] != c[i].torso_color[ch]) any_diff = true;
    REQUIRE(any_diff);

    auto one = generate_identities(1, 123);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0].person_id == 0);

    REQUIRE_THROWS_AS(generate_identities(0, 1), InvalidArgument);
}

TEST_CASE("identity color-word pairs stay distinct while pairs last") {
    auto ids = generate_identities(40, 21);
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& id : ids) {
        auto pair = std::make_pair(color_word(id.torso_color), color_word(id.leg_color));
        REQUIRE(pair.first != pair.second);
        REQUIRE(seen.insert(pair).second);
    }
}

TEST_CASE("color anchors quantize to their own words") {
    for (const auto& a : color_anchors()) REQUIRE(color_word(a.rgb) == a.word);
}

TEST_CASE("render_person is deterministic") {
    auto id = test_identity();
    auto cam = quiet_camera();
    cam.noise_sigma = 0.01;
    auto pose = frontal_pose();
    auto s1 = render_person(id, pose, cam, "rgb", 555);
    auto s2 = render_person(id, pose, cam, "rgb", 555);
    REQUIRE(s1.image.pix == s2.image.pix);
    REQUIRE(s1.skeleton_raster.pix == s2.skeleton_raster.pix);
    auto s3 = render_person(id, pose, cam, "rgb", 556);
    REQUIRE(s1.image.pix != s3.image.pix);  // noise seed matters
}

TEST_CASE("ir render: channels equal, body hotter than background") {
    auto id = test_identity();
    auto cam = quiet_camera();  // zero noise isolates the structural claims
    auto pose = frontal_pose();
    auto rgb = render_person(id, pose, cam, "rgb", 1);
    auto ir = render_person(id, pose, cam, "ir", 1);
    REQUIRE(ir.image.h == rgb.image.h);
    double min_body = 2.0, max_bg = -1.0;
    for (int y = 0; y < ir.image.h; ++y)
        for (int x = 0; x < ir.image.w; ++x) {
            REQUIRE(ir.image.at(y, x, 0) == ir.image.at(y, x, 1));
            REQUIRE(ir.image.at(y, x, 1) == ir.image.at(y, x, 2));
            bool body = false;
            for (int c = 0; c < 3; ++c)
                if (rgb.image.at(y, x, c) != rgb.background_plate.at(y, x, c)) body = true;
            if (body)
                min_body = std::min(min_body, ir.image.at(y, x, 0));
            else
                max_bg = std::max(max_bg, ir.image.at(y, x, 0));
        }
    REQUIRE(min_body > max_bg);
}

TEST_CASE("frontal pose annotates as front with a unit orientation") {
    auto s = render_person(test_identity(), frontal_pose(), quiet_camera(), "rgb", 3);
    REQUIRE(s.annotation.orientation_label == "front");
    REQUIRE(std::abs(s.annotation.orientation.norm() - 1.0) < 1e-9);
    REQUIRE(s.annotation.orientation_label ==
            classify_orientation(s.annotation.orientation));
}

TEST_CASE("clean renders have full keypoints and healthy quality fields") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        double yaw = rng.uniform(0.0, 2.0 * geo::kPi);
        auto pose = random_pose(2, yaw, rng);
        auto cam = quiet_camera();
        cam.noise_sigma = 0.01;
        auto s = render_person(test_identity(), pose, cam, "rgb", rng.next_u64());
        REQUIRE(s.annotation.keypoints.size() == size_t(kNumJoints));
        const auto& q = *s.annotation.quality;
        // a striding ankle may exit the crop at side-on yaws, nothing else does
        REQUIRE(q.keypoint_count >= 10);
        REQUIRE(q.mean_confidence == double(q.keypoint_count) / kNumJoints);
        REQUIRE(q.misalignment == 0.0);
        // comfortably above the default min_sharpness of 10
        REQUIRE(q.sharpness > 30.0);
        for (const auto& k : s.annotation.keypoints) {
            if (k.confidence == 0.0) continue;
            REQUIRE(k.x >= 0.0);
            REQUIRE(k.x < 32.0);
            REQUIRE(k.y >= 0.0);
            REQUIRE(k.y < 64.0);
        }
    }
}

TEST_CASE("corruption modes trip their intended cleaning criteria") {
    Rng rng(88);
    auto cam = quiet_camera();
    cam.noise_sigma = 0.008;
    for (int trial = 0; trial < 10; ++trial) {
        auto pose = random_pose(1, rng.uniform(0.0, 6.28), rng);
        auto base = render_person(test_identity(), pose, cam, "rgb", rng.next_u64());

        auto blurred = base;
        Rng r1(trial * 4 + 1);
        corrupt_sample(blurred, Corruption::kBlur, r1);
        REQUIRE(blurred.annotation.quality->sharpness < 10.0);

        auto dropped = base;
        Rng r2(trial * 4 + 2);
        corrupt_sample(dropped, Corruption::kKeypointDrop, r2);
        REQUIRE(dropped.annotation.quality->keypoint_count <= 7);

        auto faded = base;
        Rng r3(trial * 4 + 3);
        corrupt_sample(faded, Corruption::kLowConfidence, r3);
        REQUIRE(faded.annotation.quality->mean_confidence < 0.5);

        auto jittered = base;
        Rng r4(trial * 4 + 4);
        corrupt_sample(jittered, Corruption::kJitter, r4);
        REQUIRE(jittered.annotation.quality->misalignment > 4.0);
    }
}

TEST_CASE("render rejects a raster too small for the figure") {
    REQUIRE_THROWS_AS(
        render_person(test_identity(), frontal_pose(), quiet_camera(), "rgb", 1, {16, 8}),
        InvalidArgument);
    REQUIRE_THROWS_AS(render_person(test_identity(), frontal_pose(), quiet_camera(), "bad", 1),
                      InvalidArgument);
}

TEST_CASE("skeleton_fk basic anatomy") {
    geo::PoseParams rest;
    rest.body_pose.assign(size_t(kNumJoints) * 3, 0.0);
    rest.shape = {0, 0, 0};
    auto joints = skeleton_fk(rest);
    REQUIRE(joints[kNeck].y > 0.4);
    REQUIRE(joints[kHead].y > joints[kNeck].y);
    REQUIRE(joints[kLAnkle].y < joints[kLKnee].y);
    REQUIRE(joints[kLKnee].y < joints[kLHip].y);
    REQUIRE(joints[kLShoulder].x > joints[kRShoulder].x);
    // quarter turn about y moves shoulders out of the x-plane into z
    geo::PoseParams turned = rest;
    turned.global_orient = {0, geo::kPi / 2, 0};
    auto tj = skeleton_fk(turned);
    REQUIRE(std::abs(tj[kLShoulder].x) < 1e-9);
    REQUIRE(std::abs(tj[kLShoulder].z) > 0.1);
}

TEST_CASE("generate_corpus writes the full layout with exact counts") {
    fs::path root = fs::temp_directory_path() / "pedgen_corpus_small";
    fs::remove_all(root);
    CorpusConfig cfg;
    cfg.out_dir = root.string();
    cfg.num_identities = 4;
    cfg.num_cameras = 2;
    cfg.samples_per_identity_per_camera = 4;
    cfg.seed = 31;
    auto summary = generate_corpus(cfg);
    REQUIRE(summary.records == 32);

    CorpusPaths paths{cfg.out_dir};
    auto records = read_annotations(paths.annotations());
    REQUIRE(records.size() == 32);
    std::set<std::string> ids;
    for (const auto& r : records) {
        REQUIRE(ids.insert(r.image_id).second);
        REQUIRE(fs::exists(paths.image(r.image_id)));
        REQUIRE(fs::exists(paths.skeleton(r.image_id)));
        REQUIRE(r.quality.has_value());
        REQUIRE((r.modality == "rgb" || r.modality == "ir"));
    }
    REQUIRE(fs::exists(paths.background(0)));
    REQUIRE(fs::exists(paths.background(1)));
    REQUIRE(fs::exists(paths.meta()));

    // per-identity orientation coverage: 8 samples -> at least 3 sectors
    for (int person = 0; person < 4; ++person) {
        std::set<std::string> labels;
        for (const auto& r : records)
            if (r.person_id == person) labels.insert(r.orientation_label);
        REQUIRE(labels.size() >= 3);
    }

    json meta = read_corpus_meta(cfg.out_dir);
    REQUIRE(meta["config"]["num_identities"] == 4);
    REQUIRE(meta["records"] == 32);
    REQUIRE(meta["seed"] == 31);
}

TEST_CASE("generate_corpus is byte-identical across runs") {
    fs::path a = fs::temp_directory_path() / "pedgen_corpus_det_a";
    fs::path b = fs::temp_directory_path() / "pedgen_corpus_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    CorpusConfig cfg;
    cfg.num_identities = 2;
    cfg.num_cameras = 2;
    cfg.samples_per_identity_per_camera = 2;
    cfg.seed = 77;
    cfg.out_dir = a.string();
    generate_corpus(cfg);
    cfg.out_dir = b.string();
    generate_corpus(cfg);
    REQUIRE(read_file((a / "annotations.jsonl").string()) ==
            read_file((b / "annotations.jsonl").string()));
    REQUIRE(read_file((a / "images" / "p0000_c000_s0000.png").string()) ==
            read_file((b / "images" / "p0000_c000_s0000.png").string()));
    // metadata matches except for the output path it echoes
    json ma = read_corpus_meta(a.string());
    json mb = read_corpus_meta(b.string());
    ma["config"].erase("out_dir");
    mb["config"].erase("out_dir");
    REQUIRE(ma.dump() == mb.dump());
}

TEST_CASE("generate_corpus validates its config") {
    CorpusConfig cfg;  // out_dir empty
    REQUIRE_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg.out_dir = (fs::temp_directory_path() / "pedgen_cfg").string();
    cfg.num_identities = 0;
    REQUIRE_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg.num_identities = 1;
    cfg.ir_fraction = 1.5;
    REQUIRE_THROWS_AS(generate_corpus(cfg), ConfigError);
}

TEST_CASE("annotation records survive a JSON round trip") {
    auto s = render_person(test_identity(), frontal_pose(), quiet_camera(), "ir", 9);
    s.annotation.image_id = "roundtrip";
    json j = record_to_json(s.annotation);
    AnnotationRecord r = record_from_json(j);
    REQUIRE(r.image_id == "roundtrip");
    REQUIRE(r.person_id == s.annotation.person_id);
    REQUIRE(r.modality == "ir");
    REQUIRE(r.orientation_label == s.annotation.orientation_label);
    REQUIRE(r.attributes == s.annotation.attributes);
    REQUIRE(r.keypoints.size() == s.annotation.keypoints.size());
    for (size_t i = 0; i < r.keypoints.size(); ++i) {
        REQUIRE(r.keypoints[i].x == s.annotation.keypoints[i].x);
        REQUIRE(r.keypoints[i].confidence == s.annotation.keypoints[i].confidence);
    }
    REQUIRE(r.pose.body_pose == s.annotation.pose.body_pose);
    REQUIRE(r.quality->sharpness == s.annotation.quality->sharpness);

    // quality is optional on input; anything else missing is a schema error
    json no_quality = j;
    no_quality.erase("quality");
    REQUIRE_FALSE(record_from_json(no_quality).quality.has_value());
    json broken = j;
    broken.erase("pose");
    REQUIRE_THROWS_AS(record_from_json(broken), SchemaError);
    json bad_modality = j;
    bad_modality["modality"] = "xray";
    REQUIRE_THROWS_AS(record_from_json(bad_modality), SchemaError);
}

TEST_CASE("png round trip preserves 8-bit pixels") {
    auto s = render_person(test_identity(), frontal_pose(), quiet_camera(), "rgb", 4);
    fs::path p = fs::temp_directory_path() / "pedgen_roundtrip.png";
    img::save_png(s.image, p.string());
    img::Image back = img::load_png(p.string());
    REQUIRE(back.h == s.image.h);
    REQUIRE(back.w == s.image.w);
    for (size_t i = 0; i < back.pix.size(); ++i)
        REQUIRE(std::abs(back.pix[i] - s.image.pix[i]) <= 0.5 / 255.0 + 1e-12);
    REQUIRE_THROWS_AS(img::load_png("/nonexistent/nope.png"), IoError);
}
