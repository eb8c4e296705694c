#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "pedgen/corpus.hpp"
#include "pedgen/curate.hpp"

using namespace pedgen;
using namespace pedgen::curate;
namespace fs = std::filesystem;

namespace {

AnnotationRecord make_record(const std::string& id, int person, int cam,
                             QualityInfo q, const std::string& label = "front") {
    AnnotationRecord r;
    r.image_id = id;
    r.person_id = person;
    r.cam_id = cam;
    r.modality = "rgb";
    r.orientation_label = label;
    if (label == "front")
        r.orientation = {0, 0, 1};
    else if (label == "back")
        r.orientation = {0, 0, -1};
    else if (label == "right")
        r.orientation = {1, 0, 0};
    else
        r.orientation = {-1, 0, 0};
    r.attributes = {{"torso_color", "red"}, {"backpack", "none"}};
    for (int k = 0; k < 12; ++k) r.keypoints.push_back({4.0 + k, 8.0 + k, 1.0});
    r.quality = q;
    return r;
}

QualityInfo good_quality() { return {12, 1.0, 0.0, 200.0}; }

// deterministic unit embedding derived from the image id
Embedder hash_embedder(size_t dim = 8) {
    return [dim](const AnnotationRecord& r) {
        Rng rng(fnv1a64(r.image_id));
        std::vector<double> v(dim);
        double norm = 0;
        for (auto& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        return v;
    };
}

std::set<std::string> retained_ids(const CleanResult& c) {
    std::set<std::string> s;
    for (const auto& r : c.retained) s.insert(r.image_id);
    return s;
}

}  // namespace

TEST_CASE("clean retains healthy records and rejects each violated criterion") {
    CleaningThresholds t;  // defaults: 8 keypoints, 0.5 conf, 4px, sharpness 10
    std::vector<AnnotationRecord> recs;
    recs.push_back(make_record("ok", 0, 0, good_quality()));
    recs.push_back(make_record("fuzzy", 0, 0, {12, 1.0, 0.0, 3.0}));
    recs.push_back(make_record("faint", 0, 0, {12, 0.2, 0.0, 300.0}));
    recs.push_back(make_record("sparse", 0, 0, {5, 1.0, 0.0, 300.0}));
    recs.push_back(make_record("shifted", 0, 0, {12, 1.0, 9.0, 300.0}));
    recs.push_back(make_record("wreck", 0, 0, {3, 0.1, 20.0, 1.0}));

    auto result = clean(recs, t);
    REQUIRE(result.retained.size() == 1);
    REQUIRE(result.retained[0].image_id == "ok");
    REQUIRE(result.rejected.size() == 5);
    std::map<std::string, std::vector<std::string>> reasons;
    for (const auto& r : result.rejected) reasons[r.image_id] = r.reasons;
    REQUIRE(reasons["fuzzy"] == std::vector<std::string>{"quality"});
    REQUIRE(reasons["faint"] == std::vector<std::string>{"confidence"});
    REQUIRE(reasons["sparse"] == std::vector<std::string>{"keypoints"});
    REQUIRE(reasons["shifted"] == std::vector<std::string>{"misalignment"});
    REQUIRE(reasons["wreck"] ==
            std::vector<std::string>{"quality", "confidence", "keypoints", "misalignment"});
}

TEST_CASE("clean with all-zero thresholds retains everything") {
    CleaningThresholds zero{0, 0.0, 0.0, 0.0};
    std::vector<AnnotationRecord> recs;
    recs.push_back(make_record("a", 0, 0, good_quality()));
    recs.push_back(make_record("b", 0, 0, {0, 0.0, 500.0, 0.0}));
    auto result = clean(recs, zero);
    REQUIRE(result.retained.size() == 2);
    REQUIRE(result.rejected.empty());
}

TEST_CASE("clean requires quality fields") {
    auto r = make_record("x", 0, 0, good_quality());
    r.quality.reset();
    REQUIRE_THROWS_AS(clean({r}, CleaningThresholds{}), SchemaError);
}

TEST_CASE("clean is monotone in every threshold") {
    Rng rng(404);
    std::vector<AnnotationRecord> recs;
    for (int i = 0; i < 120; ++i) {
        QualityInfo q{int(rng.uniform_int(0, 12)), rng.uniform(0.0, 1.0),
                      rng.uniform(0.0, 8.0), rng.uniform(0.0, 40.0)};
        recs.push_back(make_record("r" + std::to_string(i), 0, 0, q));
    }
    for (int trial = 0; trial < 40; ++trial) {
        CleaningThresholds base{int(rng.uniform_int(0, 10)), rng.uniform(0.0, 0.9),
                                rng.uniform(0.5, 7.0), rng.uniform(0.0, 30.0)};
        auto before = retained_ids(clean(recs, base));
        auto tightened = base;
        switch (trial % 4) {
            case 0: tightened.min_keypoints += 2; break;
            case 1: tightened.min_mean_confidence += 0.1; break;
            case 2: tightened.max_misalignment *= 0.5; break;  // stays > 0
            case 3: tightened.min_sharpness += 5.0; break;
        }
        auto after = retained_ids(clean(recs, tightened));
        for (const auto& id : after) REQUIRE(before.count(id) == 1);
    }
    // introducing a cap where there was none is also a tightening
    CleaningThresholds uncapped{0, 0.0, 0.0, 0.0};
    CleaningThresholds capped{0, 0.0, 2.0, 0.0};
    REQUIRE(retained_ids(clean(recs, capped)).size() <=
            retained_ids(clean(recs, uncapped)).size());
}

TEST_CASE("classify_orientation quadrant sweep") {
    REQUIRE(classify_orientation({0, 0, 1}) == "front");
    REQUIRE(classify_orientation({0, 0, -1}) == "back");
    REQUIRE(classify_orientation({1, 0, 0}) == "right");
    REQUIRE(classify_orientation({-1, 0, 0}) == "left");
    // the 45-degree azimuth computes to exactly pi/4, inside the closed front sector
    REQUIRE(classify_orientation({1, 0, 1}) == "front");
    REQUIRE(classify_orientation({-1, 0, 1}) == "front");
    REQUIRE_THROWS_AS(classify_orientation({0, 0, 0}), InvalidArgument);
    double nan = std::nan("");
    REQUIRE_THROWS_AS(classify_orientation({nan, 0, 1}), InvalidArgument);

    // 3600 azimuths offset half a step so none sits on a sector boundary
    for (int k = 0; k < 3600; ++k) {
        double deg = -180.0 + (k + 0.5) * 0.1;
        double rad = deg * geo::kPi / 180.0;
        std::string expect;
        if (std::abs(deg) <= 45.0)
            expect = "front";
        else if (deg > 45.0 && deg <= 135.0)
            expect = "right";
        else if (std::abs(deg) > 135.0)
            expect = "back";
        else
            expect = "left";
        geo::Vec3 v{std::sin(rad), 0.0, std::cos(rad)};
        REQUIRE(classify_orientation(v) == expect);
        // scale invariance: classification only reads the direction
        geo::Vec3 w{v.x * 2.5, 0.0, v.z * 2.5};
        REQUIRE(classify_orientation(w) == expect);
    }
}

TEST_CASE("build_partition groups by camera, orientation, attributes") {
    std::vector<AnnotationRecord> recs;
    recs.push_back(make_record("a", 7, 0, good_quality(), "front"));
    recs.push_back(make_record("b", 7, 0, good_quality(), "back"));
    recs.push_back(make_record("c", 7, 1, good_quality(), "front"));
    recs.push_back(make_record("d", 7, 1, good_quality(), "left"));
    auto index = build_partition(recs);
    REQUIRE(index.identities.size() == 1);
    const auto& p = index.identities.at(7);
    REQUIRE(p.by_camera.size() == 2);
    REQUIRE(p.by_camera.at(0).size() + p.by_camera.at(1).size() == 4);
    REQUIRE(p.by_orientation.at("front").size() == 2);
    REQUIRE(p.by_attribute.at("torso_color").at("red").size() == 4);

    std::vector<AnnotationRecord> frontal(recs.begin(), recs.begin() + 1);
    frontal.push_back(make_record("e", 7, 2, good_quality(), "front"));
    auto fp = build_partition(frontal);
    REQUIRE(fp.identities.at(7).by_orientation.size() == 1);
    REQUIRE(fp.identities.at(7).by_orientation.count("front") == 1);

    recs.push_back(make_record("a", 7, 2, good_quality()));
    REQUIRE_THROWS_AS(build_partition(recs), SchemaError);
}

TEST_CASE("partition axioms hold on a generated corpus") {
    fs::path root = fs::temp_directory_path() / "pedgen_curate_corpus";
    fs::remove_all(root);
    corpus::CorpusConfig cfg;
    cfg.out_dir = root.string();
    cfg.num_identities = 5;
    cfg.num_cameras = 3;
    cfg.samples_per_identity_per_camera = 3;
    cfg.seed = 11;
    corpus::generate_corpus(cfg);
    auto records = read_annotations(corpus::CorpusPaths{cfg.out_dir}.annotations());
    auto cleaned = clean(records, CleaningThresholds{});
    REQUIRE(cleaned.retained.size() >= records.size() / 2);
    REQUIRE(!cleaned.rejected.empty());  // corrupt_fraction 0.15 over 45 samples

    auto index = build_partition(cleaned.retained);
    std::set<std::string> all = retained_ids(cleaned);
    size_t cam_total = 0, ori_total = 0;
    std::set<std::string> cam_union, ori_union;
    for (const auto& [person, p] : index.identities) {
        for (const auto& [cam, ids] : p.by_camera)
            for (const auto& id : ids) {
                ++cam_total;
                REQUIRE(cam_union.insert(id).second);  // exactly once per axis
            }
        for (const auto& [label, ids] : p.by_orientation)
            for (const auto& id : ids) {
                ++ori_total;
                REQUIRE(ori_union.insert(id).second);
            }
        for (const auto& [key, values] : p.by_attribute) {
            std::set<std::string> key_union;
            for (const auto& [value, ids] : values)
                for (const auto& id : ids) REQUIRE(key_union.insert(id).second);
        }
    }
    REQUIRE(cam_total == all.size());
    REQUIRE(cam_union == all);
    REQUIRE(ori_total == all.size());
    REQUIRE(ori_union == all);

    json j = partition_to_json(index);
    auto back = partition_from_json(j);
    REQUIRE(partition_to_json(back).dump() == j.dump());
}

TEST_CASE("score_pairs covers intra-identity pairs with bounded symmetric scores") {
    std::vector<AnnotationRecord> recs;
    // identity 1: 4 images, identity 2: 3, identity 3: 1 -> 6 + 3 + 0 pairs
    for (int i = 0; i < 4; ++i)
        recs.push_back(make_record("p1_" + std::to_string(i), 1, i % 2, good_quality(),
                                   i % 2 ? "front" : "back"));
    for (int i = 0; i < 3; ++i)
        recs.push_back(make_record("p2_" + std::to_string(i), 2, 0, good_quality(), "left"));
    recs.push_back(make_record("p3_0", 3, 0, good_quality()));

    auto embed = hash_embedder();
    auto scores = score_pairs(recs, embed);
    REQUIRE(scores.size() == 9);
    for (const auto& s : scores) {
        REQUIRE(s.similarity >= -1.0);
        REQUIRE(s.similarity <= 1.0);
        REQUIRE(s.viewpoint >= -1.0);
        REQUIRE(s.viewpoint <= 1.0);
        REQUIRE(s.ref_id != s.target_id);
    }

    auto swapped = score_pair(recs[1], recs[0], embed);
    auto forward = score_pair(recs[0], recs[1], embed);
    REQUIRE(swapped.similarity == Catch::Approx(forward.similarity).epsilon(1e-12));
    REQUIRE(swapped.viewpoint == Catch::Approx(forward.viewpoint).epsilon(1e-12));

    auto self = score_pair(recs[0], recs[0], embed);
    REQUIRE(self.similarity == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(self.viewpoint == Catch::Approx(1.0).margin(1e-12));

    // records 0 (back) and 1 (front) are exactly opposed
    REQUIRE(forward.viewpoint == Catch::Approx(-1.0).margin(1e-9));

    Embedder broken = [](const AnnotationRecord& r) {
        return std::vector<double>(r.person_id == 1 ? 4 : 5, 0.5);
    };
    REQUIRE_THROWS_AS(score_pair(recs[0], recs[4], broken), InvalidArgument);
}

TEST_CASE("pair count matches the combinatorial recount on a corpus") {
    fs::path root = fs::temp_directory_path() / "pedgen_curate_corpus";  // reuse if present
    if (!fs::exists(root)) {
        corpus::CorpusConfig cfg;
        cfg.out_dir = root.string();
        cfg.num_identities = 5;
        cfg.num_cameras = 3;
        cfg.samples_per_identity_per_camera = 3;
        cfg.seed = 11;
        corpus::generate_corpus(cfg);
    }
    auto records = read_annotations(corpus::CorpusPaths{root.string()}.annotations());
    auto cleaned = clean(records, CleaningThresholds{});
    auto scores = score_pairs(cleaned.retained, hash_embedder());
    std::map<int, size_t> n;
    for (const auto& r : cleaned.retained) ++n[r.person_id];
    size_t expect = 0;
    for (const auto& [person, count] : n) expect += count * (count - 1) / 2;
    REQUIRE(scores.size() == expect);
}

TEST_CASE("curation artifacts round trip through disk") {
    fs::path dir = fs::temp_directory_path() / "pedgen_curate_io";
    fs::create_directories(dir);
    std::vector<AnnotationRecord> recs;
    recs.push_back(make_record("a", 0, 0, good_quality(), "front"));
    recs.push_back(make_record("b", 0, 1, good_quality(), "back"));
    recs.push_back(make_record("c", 0, 1, {2, 0.1, 0.0, 200.0}, "back"));
    auto cleaned = clean(recs, CleaningThresholds{});

    write_rejections((dir / "rejected.jsonl").string(), cleaned.rejected);
    std::ifstream in(dir / "rejected.jsonl");
    std::string line;
    REQUIRE(std::getline(in, line));
    json jr = json::parse(line);
    REQUIRE(jr["image_id"] == "c");
    REQUIRE(jr["reasons"] == json::array({"confidence", "keypoints"}));

    auto scores = score_pairs(cleaned.retained, hash_embedder());
    write_pair_scores((dir / "pair_scores.jsonl").string(), scores);
    auto back = read_pair_scores((dir / "pair_scores.jsonl").string());
    REQUIRE(back.size() == scores.size());
    REQUIRE(back[0].ref_id == scores[0].ref_id);
    REQUIRE(back[0].similarity == scores[0].similarity);
    REQUIRE(back[0].viewpoint == scores[0].viewpoint);
    REQUIRE_THROWS_AS(read_pair_scores((dir / "missing.jsonl").string()), StagedDependency);

    json stats = curation_stats(cleaned.retained, cleaned.rejected);
    REQUIRE(stats["retained"] == 2);
    REQUIRE(stats["rejected"] == 1);
    REQUIRE(stats["rejection_reasons"]["confidence"] == 1);
    REQUIRE(stats["by_camera_orientation"]["0"]["front"] == 1);
    REQUIRE(stats["by_camera_orientation"]["1"]["back"] == 1);
}

TEST_CASE("threshold config parsing validates ranges") {
    json j{{"min_keypoints", 6}, {"min_sharpness", 2.5}};
    auto t = thresholds_from_json(j);
    REQUIRE(t.min_keypoints == 6);
    REQUIRE(t.min_sharpness == 2.5);
    REQUIRE(t.min_mean_confidence == 0.5);  // default survives partial config
    REQUIRE_THROWS_AS(thresholds_from_json(json{{"min_keypoints", -1}}), ConfigError);
    json echo = thresholds_to_json(t);
    REQUIRE(echo["min_keypoints"] == 6);
}
