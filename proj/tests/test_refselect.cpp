#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "pedgen/curate.hpp"
#include "pedgen/refselect.hpp"

using namespace pedgen;
using namespace pedgen::refselect;
namespace fs = std::filesystem;

namespace {

AnnotationRecord rec(int person, int cam, int idx, const geo::Vec3& facing) {
    AnnotationRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%04d_c%03d_s%04d", person, cam, idx);
    r.image_id = buf;
    r.person_id = person;
    r.cam_id = cam;
    r.modality = "rgb";
    r.orientation = facing;
    r.orientation_label = classify_orientation(facing);
    return r;
}

// deterministic unit embedding derived from the image id
curate::Embedder hash_embedder(size_t dim = 8) {
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

const geo::Vec3 kFront{0, 0, 1};
const geo::Vec3 kBack{0, 0, -1};
const geo::Vec3 kRight{1, 0, 0};
const geo::Vec3 kLeft{-1, 0, 0};

struct Fixture {
    std::vector<AnnotationRecord> records;
    curate::PartitionIndex index;
    ScoreIndex scores;

    explicit Fixture(std::vector<AnnotationRecord> recs) : records(std::move(recs)) {
        index = curate::build_partition(records);
        scores = ScoreIndex::build(curate::score_pairs(records, hash_embedder()));
    }
    const curate::IdentityPartition& part(int person) const {
        return index.identities.at(person);
    }
};

// target + two same-camera refs + three other-camera refs across all sectors
Fixture rich_identity() {
    return Fixture({rec(7, 0, 0, kFront), rec(7, 0, 1, kFront), rec(7, 0, 2, kRight),
                    rec(7, 1, 0, kRight), rec(7, 1, 1, kBack), rec(7, 1, 2, kBack),
                    rec(7, 2, 0, kLeft)});
}

std::set<std::string> chosen_ids(const ReferenceSet& rs) {
    std::set<std::string> s;
    for (const auto& c : rs.chosen) s.insert(c.image_id);
    return s;
}

SelectionPolicy take_everything() {
    SelectionPolicy p;
    p.max_refs = 1000000;
    p.p0 = 1.0;
    p.decay = 1.0;
    p.same_orientation_drop_p = 0.0;
    return p;
}

}  // namespace

TEST_CASE("policy validation and json round trip") {
    SelectionPolicy p;
    REQUIRE_NOTHROW(validate(p));

    auto expect_bad = [](SelectionPolicy bad) {
        REQUIRE_THROWS_AS(validate(bad), ConfigError);
    };
    {
        SelectionPolicy bad;
        bad.max_refs = 0;
        expect_bad(bad);
    }
    {
        SelectionPolicy bad;
        bad.p0 = 0.0;
        expect_bad(bad);
    }
    {
        SelectionPolicy bad;
        bad.p0 = 1.2;
        expect_bad(bad);
    }
    {
        SelectionPolicy bad;
        bad.decay = 0.0;
        expect_bad(bad);
    }
    {
        SelectionPolicy bad;
        bad.same_orientation_drop_p = -0.1;
        expect_bad(bad);
    }
    {
        SelectionPolicy bad;
        bad.stage = "mid";
        expect_bad(bad);
    }

    p.max_refs = 3;
    p.p0 = 0.6;
    p.decay = 0.8;
    p.same_orientation_drop_p = 0.25;
    p.viewpoint_gate = 0.4;
    p.stage = "late";
    SelectionPolicy q = policy_from_json(policy_to_json(p));
    REQUIRE(q.max_refs == p.max_refs);
    REQUIRE(q.p0 == p.p0);
    REQUIRE(q.decay == p.decay);
    REQUIRE(q.same_orientation_drop_p == p.same_orientation_drop_p);
    REQUIRE(q.viewpoint_gate == p.viewpoint_gate);
    REQUIRE(q.stage == p.stage);

    // defaults survive an empty object
    SelectionPolicy d = policy_from_json(json::object());
    REQUIRE(d.max_refs == 4);
    REQUIRE(d.p0 == 0.75);
    REQUIRE(d.stage == "early");
}

TEST_CASE("score index reorients pairs to the requested direction") {
    Fixture f = rich_identity();
    const std::string a = "p0007_c000_s0000", b = "p0007_c001_s0001";
    auto s1 = f.scores.oriented(a, b);
    REQUIRE(s1.target_id == a);
    REQUIRE(s1.ref_id == b);
    auto s2 = f.scores.oriented(b, a);
    REQUIRE(s2.target_id == b);
    REQUIRE(s2.ref_id == a);
    REQUIRE(s1.similarity == s2.similarity);
    REQUIRE(s1.viewpoint == s2.viewpoint);

    REQUIRE_THROWS_AS(ScoreIndex{}.oriented(a, b), SchemaError);
}

TEST_CASE("accept-everything policy picks every candidate deterministically") {
    Fixture f = rich_identity();
    const auto& target = f.records[0];
    SelectionPolicy pol = take_everything();

    Rng r1(42), r2(42);
    ReferenceSet rs = select(target, f.part(7), f.scores, pol, r1);
    ReferenceSet again = select(target, f.part(7), f.scores, pol, r2);
    REQUIRE(refset_to_json(rs) == refset_to_json(again));

    // all six non-target images of the identity, target excluded
    std::set<std::string> expect;
    for (size_t i = 1; i < f.records.size(); ++i) expect.insert(f.records[i].image_id);
    REQUIRE(chosen_ids(rs) == expect);
    REQUIRE(chosen_ids(rs).size() == rs.chosen.size());  // no duplicates
    REQUIRE(chosen_ids(rs).count(target.image_id) == 0);

    // the forced same-camera pick leads and is the most similar camera mate
    REQUIRE(rs.chosen[0].provenance == "same_cam");
    double best = -2;
    std::string best_id;
    for (int i : {1, 2}) {
        auto s = f.scores.oriented(target.image_id, f.records[size_t(i)].image_id);
        if (s.similarity > best) {
            best = s.similarity;
            best_id = f.records[size_t(i)].image_id;
        }
    }
    REQUIRE(rs.chosen[0].image_id == best_id);
    REQUIRE(rs.chosen[0].score.similarity == best);
    int same_cam_tags = 0;
    for (const auto& c : rs.chosen) same_cam_tags += c.provenance == "same_cam";
    REQUIRE(same_cam_tags == 1);
}

TEST_CASE("max_refs of one yields exactly the same-camera reference") {
    Fixture f = rich_identity();
    const auto& target = f.records[0];
    SelectionPolicy pol;
    pol.max_refs = 1;

    Rng rng(3);
    ReferenceSet rs = select(target, f.part(7), f.scores, pol, rng);
    REQUIRE(rs.chosen.size() == 1);
    REQUIRE(rs.chosen[0].provenance == "same_cam");

    // the early-stage batch path obeys the cap too: the per-group coverage
    // guarantee never outgrows max_refs
    auto batch = build_training_batch_refs({target}, f.index, f.scores, pol, Rng(3));
    REQUIRE(batch.at(target.image_id).chosen.size() == 1);
    REQUIRE(batch.at(target.image_id).chosen[0].provenance == "same_cam");
}

TEST_CASE("late stage gates every sampled reference by viewpoint") {
    // camera 0 holds only front-facing images, so the forced same-camera ref
    // violates the 60-degree rule on purpose: it is exempt. The remaining
    // front candidate sits in another camera and must be filtered out.
    Fixture f({rec(7, 0, 0, kFront), rec(7, 0, 1, kFront), rec(7, 1, 0, kFront),
               rec(7, 1, 1, kRight), rec(7, 1, 2, kBack), rec(7, 2, 0, kBack),
               rec(7, 2, 1, kLeft)});
    const auto& target = f.records[0];
    SelectionPolicy pol = take_everything();
    pol.stage = "late";

    Rng rng(9);
    ReferenceSet rs = select(target, f.part(7), f.scores, pol, rng);

    REQUIRE(rs.chosen[0].provenance == "same_cam");
    REQUIRE(rs.chosen[0].image_id == "p0007_c000_s0001");
    REQUIRE(rs.chosen[0].score.viewpoint == Catch::Approx(1.0));

    for (const auto& c : rs.chosen)
        if (c.provenance != "same_cam") REQUIRE(c.score.viewpoint <= 0.5);

    std::set<std::string> expect{"p0007_c000_s0001", "p0007_c001_s0001", "p0007_c001_s0002",
                                 "p0007_c002_s0000", "p0007_c002_s0001"};
    REQUIRE(chosen_ids(rs) == expect);  // the cross-camera front image is gone
}

TEST_CASE("rank-one candidates are accepted at p0 and lower ranks decay") {
    // one same-camera mate (forced) plus a three-deep side-facing group; the
    // target faces front so the drop rule cannot interfere with the group
    Fixture f({rec(3, 0, 0, kFront), rec(3, 0, 1, kFront), rec(3, 1, 0, kRight),
               rec(3, 1, 1, kRight), rec(3, 1, 2, kRight)});
    const auto& target = f.records[0];

    // ranks inside the group, by descending similarity
    std::vector<curate::PairScore> group;
    for (int i : {2, 3, 4})
        group.push_back(f.scores.oriented(target.image_id, f.records[size_t(i)].image_id));
    std::sort(group.begin(), group.end(), [](const auto& a, const auto& b) {
        return a.similarity > b.similarity;
    });

    SelectionPolicy pol;  // p0 = 0.75, decay = 0.5
    pol.max_refs = 100;

    const int kTrials = 10000;
    std::map<std::string, int> hits;
    Rng master(777);
    for (int i = 0; i < kTrials; ++i) {
        Rng rng = master.fork("mc/" + std::to_string(i));
        ReferenceSet rs = select(target, f.part(3), f.scores, pol, rng);
        REQUIRE(rs.chosen[0].provenance == "same_cam");      // guarantee, every draw
        REQUIRE(chosen_ids(rs).count(target.image_id) == 0);  // never itself
        for (const auto& c : rs.chosen) ++hits[c.image_id];
    }
    double r1 = double(hits[group[0].ref_id]) / kTrials;
    double r2 = double(hits[group[1].ref_id]) / kTrials;
    double r3 = double(hits[group[2].ref_id]) / kTrials;
    REQUIRE(r1 == Catch::Approx(0.75).margin(0.02));
    REQUIRE(r2 == Catch::Approx(0.375).margin(0.02));
    REQUIRE(r3 == Catch::Approx(0.1875).margin(0.02));
    REQUIRE(hits[f.records[1].image_id] == kTrials);  // forced same-cam, always
}

TEST_CASE("raising p0 never shrinks the expected set size") {
    Fixture f = rich_identity();
    const auto& target = f.records[0];
    const int kTrials = 10000;
    const double grid[] = {0.25, 0.5, 0.75, 1.0};

    double prev_mean = -1;
    Rng master(2024);
    for (double p0 : grid) {
        SelectionPolicy pol;
        pol.p0 = p0;  // decay 0.5, drop 0.5, max_refs 4 as defaults
        double total = 0;
        for (int i = 0; i < kTrials; ++i) {
            // substream name depends only on the trial, so every p0 replays
            // the same uniforms
            Rng rng = master.fork("mono/" + std::to_string(i));
            ReferenceSet rs = select(target, f.part(7), f.scores, pol, rng);
            total += double(rs.chosen.size());
            REQUIRE(rs.chosen[0].provenance == "same_cam");
        }
        double mean = total / kTrials;
        REQUIRE(mean >= prev_mean - 0.01);
        prev_mean = mean;
    }
}

TEST_CASE("early-stage batches cover every populated orientation group") {
    Fixture f({rec(5, 0, 0, kFront), rec(5, 0, 1, kFront), rec(5, 1, 0, kRight),
               rec(5, 1, 1, kBack)});
    const auto& target = f.records[0];
    SelectionPolicy pol;
    pol.p0 = 1e-9;  // Bernoulli extras effectively never fire
    pol.decay = 1.0;

    auto batch = build_training_batch_refs({target}, f.index, f.scores, pol, Rng(5));
    const ReferenceSet& rs = batch.at(target.image_id);

    std::set<std::string> expect{"p0005_c000_s0001", "p0005_c001_s0000", "p0005_c001_s0001"};
    REQUIRE(chosen_ids(rs) == expect);
    std::map<std::string, std::string> prov;
    for (const auto& c : rs.chosen) prov[c.image_id] = c.provenance;
    REQUIRE(prov["p0005_c000_s0001"] == "same_cam");  // front group covered by it
    REQUIRE(prov["p0005_c001_s0000"] == "orientation_group:right");
    REQUIRE(prov["p0005_c001_s0001"] == "orientation_group:back");

    // the guarantee belongs to the early stage only
    pol.stage = "late";
    auto late = build_training_batch_refs({target}, f.index, f.scores, pol, Rng(5));
    REQUIRE(late.at(target.image_id).chosen.size() == 1);
    REQUIRE(late.at(target.image_id).chosen[0].provenance == "same_cam");
}

TEST_CASE("batch selection is independent of target order and replays exactly") {
    Fixture f = rich_identity();
    std::vector<AnnotationRecord> fwd{f.records[0], f.records[1]};
    std::vector<AnnotationRecord> rev{f.records[1], f.records[0]};
    SelectionPolicy pol;  // defaults exercise real randomness

    auto a = build_training_batch_refs(fwd, f.index, f.scores, pol, Rng(12));
    auto b = build_training_batch_refs(rev, f.index, f.scores, pol, Rng(12));
    auto c = build_training_batch_refs(fwd, f.index, f.scores, pol, Rng(12));

    REQUIRE(a.size() == 2);
    REQUIRE(b.size() == 2);
    for (const auto& [id, rs] : a) {
        REQUIRE(refset_to_json(rs) == refset_to_json(b.at(id)));
        REQUIRE(refset_to_json(rs) == refset_to_json(c.at(id)));
    }

    // a different epoch re-keys every substream
    auto e1 = build_training_batch_refs(fwd, f.index, f.scores, pol, Rng(12), 1);
    REQUIRE(e1.size() == 2);  // still valid sets, whatever they drew
    for (const auto& [id, rs] : e1) {
        REQUIRE(!rs.chosen.empty());
        REQUIRE(rs.chosen[0].provenance == "same_cam");
    }
}

TEST_CASE("insufficient references are reported, not papered over") {
    // a single-image identity has nothing to offer
    Fixture lone({rec(9, 4, 0, kFront)});
    Rng rng(1);
    REQUIRE_THROWS_AS(
        select(lone.records[0], lone.part(9), lone.scores, SelectionPolicy{}, rng),
        InsufficientReferences);

    // two images, but none shares the target's camera
    Fixture split({rec(11, 0, 0, kFront), rec(11, 1, 0, kBack)});
    REQUIRE_THROWS_AS(
        select(split.records[0], split.part(11), split.scores, SelectionPolicy{}, rng),
        InsufficientReferences);

    // batch path: target's identity absent from the partition entirely
    Fixture f = rich_identity();
    AnnotationRecord stranger = rec(999, 0, 0, kFront);
    REQUIRE_THROWS_AS(
        build_training_batch_refs({stranger}, f.index, f.scores, SelectionPolicy{}, Rng(1)),
        InsufficientReferences);
}

TEST_CASE("missing pair scores are a schema error") {
    Fixture f = rich_identity();
    Rng rng(1);
    REQUIRE_THROWS_AS(select(f.records[0], f.part(7), ScoreIndex{}, SelectionPolicy{}, rng),
                      SchemaError);
}

TEST_CASE("refsets survive the jsonl round trip") {
    Fixture f = rich_identity();
    SelectionPolicy pol;
    std::vector<ReferenceSet> sets;
    Rng master(31);
    for (int i : {0, 1, 2}) {
        Rng rng = master.fork("t/" + std::to_string(i));
        sets.push_back(select(f.records[size_t(i)], f.part(7), f.scores, pol, rng));
    }

    fs::path path = fs::temp_directory_path() / "pedgen_refsets.jsonl";
    write_refsets(path.string(), sets);
    auto back = read_refsets(path.string());
    REQUIRE(back.size() == sets.size());
    for (size_t i = 0; i < sets.size(); ++i)
        REQUIRE(refset_to_json(back[i]) == refset_to_json(sets[i]));

    REQUIRE_THROWS_AS(read_refsets((fs::temp_directory_path() / "nope.jsonl").string()),
                      StagedDependency);
    REQUIRE_THROWS_WITH(read_refsets((fs::temp_directory_path() / "nope.jsonl").string()),
                        Catch::Matchers::ContainsSubstring("select-refs"));

    fs::path bad = fs::temp_directory_path() / "pedgen_refsets_bad.jsonl";
    std::ofstream(bad.string()) << "{not json\n";
    REQUIRE_THROWS_AS(read_refsets(bad.string()), SchemaError);
}
