#pragma once

// Reference-set construction. Every generation target draws a set of same-
// identity reference images: one is forced from the target's own camera, the
// rest are taken per orientation group by rank-weighted Bernoulli sampling,
// optionally gated by viewpoint difference and thinned when they face the
// same way as the target.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pedgen/curate.hpp"
#include "pedgen/records.hpp"

namespace pedgen::refselect {

// --- policy ------------------------------------------------------------------------

struct SelectionPolicy {
    int max_refs = 4;
    double p0 = 0.75;    // acceptance probability of the rank-1 candidate
    double decay = 0.5;  // per-rank multiplier: p_k = p0 * decay^(k-1)
    double same_orientation_drop_p = 0.5;
    // ceiling on the dot product between candidate and target facing
    // directions; 0.5 = 60 degrees apart or more. Enforced in the late stage
    // only, and never for the forced same-camera reference (that one anchors
    // camera/lighting context, not viewpoint variety).
    double viewpoint_gate = 0.5;
    std::string stage = "early";  // early | late
};

inline void validate(const SelectionPolicy& p) {
    if (p.max_refs < 1) throw ConfigError("selection policy: max_refs must be >= 1");
    if (!(p.p0 > 0.0 && p.p0 <= 1.0)) throw ConfigError("selection policy: p0 must be in (0,1]");
    if (!(p.decay > 0.0 && p.decay <= 1.0))
        throw ConfigError("selection policy: decay must be in (0,1]");
    if (p.same_orientation_drop_p < 0.0 || p.same_orientation_drop_p > 1.0)
        throw ConfigError("selection policy: same_orientation_drop_p must be in [0,1]");
    if (p.stage != "early" && p.stage != "late")
        throw ConfigError("selection policy: stage must be early or late, got '" + p.stage + "'");
}

inline json policy_to_json(const SelectionPolicy& p) {
    return {{"max_refs", p.max_refs},
            {"p0", p.p0},
            {"decay", p.decay},
            {"same_orientation_drop_p", p.same_orientation_drop_p},
            {"viewpoint_gate", p.viewpoint_gate},
            {"stage", p.stage}};
}

inline SelectionPolicy policy_from_json(const json& j) {
    SelectionPolicy p;
    p.max_refs = j.value("max_refs", p.max_refs);
    p.p0 = j.value("p0", p.p0);
    p.decay = j.value("decay", p.decay);
    p.same_orientation_drop_p = j.value("same_orientation_drop_p", p.same_orientation_drop_p);
    p.viewpoint_gate = j.value("viewpoint_gate", p.viewpoint_gate);
    p.stage = j.value("stage", p.stage);
    validate(p);
    return p;
}

// --- pair-score lookup ---------------------------------------------------------------

// Pair scores arrive as a flat list (one row per unordered intra-identity
// pair); selection needs random access by (target, candidate).
struct ScoreIndex {
    std::map<std::pair<std::string, std::string>, curate::PairScore> pairs;

    static ScoreIndex build(const std::vector<curate::PairScore>& scores) {
        ScoreIndex idx;
        for (const auto& s : scores) {
            auto key = std::minmax(s.ref_id, s.target_id);
            idx.pairs[{key.first, key.second}] = s;
        }
        return idx;
    }

    // score reoriented so ref_id names the candidate and target_id the target
    curate::PairScore oriented(const std::string& target_id, const std::string& ref_id) const {
        auto key = std::minmax(target_id, ref_id);
        auto it = pairs.find({key.first, key.second});
        if (it == pairs.end())
            throw SchemaError("no pair score for images " + target_id + " and " + ref_id +
                              " (pair scoring incomplete)");
        curate::PairScore s = it->second;
        if (s.ref_id != ref_id) std::swap(s.ref_id, s.target_id);
        return s;
    }
};

// --- reference sets ------------------------------------------------------------------

struct ChosenRef {
    std::string image_id;
    std::string provenance;  // "same_cam" | "orientation_group:<label>"
    curate::PairScore score;
};

struct ReferenceSet {
    std::string target_id;
    int person_id = -1;
    std::vector<ChosenRef> chosen;
};

inline json refset_to_json(const ReferenceSet& rs) {
    json chosen = json::array();
    for (const auto& c : rs.chosen)
        chosen.push_back({{"image_id", c.image_id},
                          {"provenance", c.provenance},
                          {"similarity", c.score.similarity},
                          {"viewpoint", c.score.viewpoint}});
    return {{"target_id", rs.target_id}, {"person_id", rs.person_id}, {"chosen", chosen}};
}

inline ReferenceSet refset_from_json(const json& j) {
    ReferenceSet rs;
    rs.target_id = detail::require(j, "target_id", "refset").get<std::string>();
    rs.person_id = detail::require(j, "person_id", "refset").get<int>();
    for (const auto& c : detail::require(j, "chosen", "refset")) {
        ChosenRef ref;
        ref.image_id = detail::require(c, "image_id", "refset entry").get<std::string>();
        ref.provenance = detail::require(c, "provenance", "refset entry").get<std::string>();
        ref.score.ref_id = ref.image_id;
        ref.score.target_id = rs.target_id;
        ref.score.similarity = detail::require(c, "similarity", "refset entry").get<double>();
        ref.score.viewpoint = detail::require(c, "viewpoint", "refset entry").get<double>();
        rs.chosen.push_back(std::move(ref));
    }
    return rs;
}

// --- selection -----------------------------------------------------------------------

namespace detail_sel {

// Candidates of one orientation group, sorted by descending similarity to the
// target (image id breaks ties so the ranking is total).
inline std::vector<curate::PairScore> ranked_group(const std::vector<std::string>& ids,
                                                   const std::string& target_id,
                                                   const std::set<std::string>& taken,
                                                   const ScoreIndex& scores) {
    std::vector<curate::PairScore> out;
    for (const auto& id : ids) {
        if (id == target_id || taken.count(id)) continue;
        out.push_back(scores.oriented(target_id, id));
    }
    std::sort(out.begin(), out.end(), [](const curate::PairScore& a, const curate::PairScore& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.ref_id < b.ref_id;
    });
    return out;
}

inline ReferenceSet select_core(const AnnotationRecord& target,
                                const curate::IdentityPartition& part, const ScoreIndex& scores,
                                const SelectionPolicy& policy, Rng& rng, bool force_groups) {
    validate(policy);

    size_t others = 0;
    for (const auto& [cam, ids] : part.by_camera)
        for (const auto& id : ids)
            if (id != target.image_id) ++others;
    if (others == 0)
        throw InsufficientReferences("identity " + std::to_string(target.person_id) +
                                     " has a single cleaned image (target " + target.image_id +
                                     ")");

    ReferenceSet rs;
    rs.target_id = target.image_id;
    rs.person_id = target.person_id;
    std::set<std::string> taken;
    std::map<std::string, std::string> label_of;
    for (const auto& [label, ids] : part.by_orientation)
        for (const auto& id : ids) label_of[id] = label;

    // forced same-camera reference: the most similar image sharing the
    // target's camera. Without one the set cannot satisfy its own contract.
    auto cam_it = part.by_camera.find(target.cam_id);
    std::vector<curate::PairScore> same_cam =
        cam_it == part.by_camera.end()
            ? std::vector<curate::PairScore>{}
            : ranked_group(cam_it->second, target.image_id, taken, scores);
    if (same_cam.empty())
        throw InsufficientReferences("no same-camera reference for target " + target.image_id +
                                     " (camera " + std::to_string(target.cam_id) + ")");
    rs.chosen.push_back({same_cam.front().ref_id, "same_cam", same_cam.front()});
    taken.insert(same_cam.front().ref_id);
    std::set<std::string> covered_labels{label_of[same_cam.front().ref_id]};

    // early-stage batch guarantee: one reference per populated orientation
    // group (top similarity), capped by max_refs — the cap dominates, so
    // max_refs = 1 still yields exactly the same-camera reference.
    if (force_groups) {
        for (const auto& [label, ids] : part.by_orientation) {
            if (int(rs.chosen.size()) >= policy.max_refs) break;
            if (covered_labels.count(label)) continue;
            auto ranked = ranked_group(ids, target.image_id, taken, scores);
            if (ranked.empty()) continue;
            rs.chosen.push_back({ranked.front().ref_id, "orientation_group:" + label,
                                 ranked.front()});
            taken.insert(ranked.front().ref_id);
            covered_labels.insert(label);
        }
    }

    // rank-weighted Bernoulli extras per orientation group. Every candidate
    // consumes exactly two uniform draws whatever the outcome, so two runs
    // that differ only in p0 see identical draw sequences — raising p0 can
    // only turn rejections into acceptances.
    for (const auto& [label, ids] : part.by_orientation) {
        if (int(rs.chosen.size()) >= policy.max_refs) break;
        std::vector<curate::PairScore> ranked = ranked_group(ids, target.image_id, taken, scores);
        if (policy.stage == "late") {
            std::erase_if(ranked, [&](const curate::PairScore& s) {
                return s.viewpoint > policy.viewpoint_gate;
            });
        }
        double p_k = policy.p0;
        for (size_t k = 0; k < ranked.size(); ++k, p_k *= policy.decay) {
            if (int(rs.chosen.size()) >= policy.max_refs) break;
            double u_accept = rng.uniform();
            double u_drop = rng.uniform();
            if (u_accept >= p_k) continue;
            if (label == target.orientation_label && u_drop < policy.same_orientation_drop_p)
                continue;
            rs.chosen.push_back({ranked[k].ref_id, "orientation_group:" + label, ranked[k]});
            taken.insert(ranked[k].ref_id);
        }
    }
    return rs;
}

}  // namespace detail_sel

inline ReferenceSet select(const AnnotationRecord& target, const curate::IdentityPartition& part,
                           const ScoreIndex& scores, const SelectionPolicy& policy, Rng& rng) {
    return detail_sel::select_core(target, part, scores, policy, rng, /*force_groups=*/false);
}

inline ReferenceSet select(const AnnotationRecord& target, const curate::IdentityPartition& part,
                           const std::vector<curate::PairScore>& pair_scores,
                           const SelectionPolicy& policy, Rng& rng) {
    return select(target, part, ScoreIndex::build(pair_scores), policy, rng);
}

// Training-batch construction. Each target gets its own named RNG substream
// keyed by (epoch, target id): batch composition and order cannot perturb
// what any one target draws. In the early stage the per-orientation-group
// coverage guarantee is applied before Bernoulli extras.
inline std::map<std::string, ReferenceSet> build_training_batch_refs(
    const std::vector<AnnotationRecord>& targets, const curate::PartitionIndex& index,
    const ScoreIndex& scores, const SelectionPolicy& policy, const Rng& master, int epoch = 0) {
    validate(policy);
    std::map<std::string, ReferenceSet> out;
    for (const auto& target : targets) {
        auto it = index.identities.find(target.person_id);
        if (it == index.identities.end())
            throw InsufficientReferences("identity " + std::to_string(target.person_id) +
                                         " has no cleaned images in the partition");
        Rng sub = master.fork("refsel/" + std::to_string(epoch) + "/" + target.image_id);
        out[target.image_id] = detail_sel::select_core(target, it->second, scores, policy, sub,
                                                       policy.stage == "early");
    }
    return out;
}

inline std::map<std::string, ReferenceSet> build_training_batch_refs(
    const std::vector<AnnotationRecord>& targets, const curate::PartitionIndex& index,
    const std::vector<curate::PairScore>& pair_scores, const SelectionPolicy& policy,
    const Rng& master, int epoch = 0) {
    return build_training_batch_refs(targets, index, ScoreIndex::build(pair_scores), policy,
                                     master, epoch);
}

// --- artifacts -----------------------------------------------------------------------

inline void write_refsets(const std::string& path, const std::vector<ReferenceSet>& sets,
                          const json& header = json()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    if (!header.is_null()) write_jsonl_header(out, header);
    for (const auto& rs : sets) out << refset_to_json(rs).dump() << "\n";
}

inline std::vector<ReferenceSet> read_refsets(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StagedDependency("missing refsets: " + path + " (run select-refs first)");
    std::vector<ReferenceSet> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            if (lineno == 1 && is_jsonl_header(j)) continue;
            out.push_back(refset_from_json(j));
        } catch (const json::exception& e) {
            throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace pedgen::refselect
