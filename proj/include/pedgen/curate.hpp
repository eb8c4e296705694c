#pragma once

// Curation over annotated corpora: quality filtering with per-record rejection
// reasons, per-identity partitioning by camera / orientation / attributes, and
// pairwise appearance+viewpoint scoring.

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pedgen/geometry.hpp"
#include "pedgen/records.hpp"

namespace pedgen::curate {

// --- cleaning --------------------------------------------------------------------

struct CleaningThresholds {
    int min_keypoints = 8;
    double min_mean_confidence = 0.5;
    // pixel cap on keypoint drift; <= 0 disables the cap so an all-zero
    // threshold set retains everything
    double max_misalignment = 4.0;
    double min_sharpness = 10.0;
};

inline json thresholds_to_json(const CleaningThresholds& t) {
    return {{"min_keypoints", t.min_keypoints},
            {"min_mean_confidence", t.min_mean_confidence},
            {"max_misalignment", t.max_misalignment},
            {"min_sharpness", t.min_sharpness}};
}

inline CleaningThresholds thresholds_from_json(const json& j) {
    CleaningThresholds t;
    if (j.contains("min_keypoints")) t.min_keypoints = j.at("min_keypoints").get<int>();
    if (j.contains("min_mean_confidence"))
        t.min_mean_confidence = j.at("min_mean_confidence").get<double>();
    if (j.contains("max_misalignment"))
        t.max_misalignment = j.at("max_misalignment").get<double>();
    if (j.contains("min_sharpness")) t.min_sharpness = j.at("min_sharpness").get<double>();
    if (t.min_keypoints < 0 || t.min_mean_confidence < 0 || t.min_sharpness < 0)
        throw ConfigError("cleaning thresholds must be >= 0");
    return t;
}

struct Rejection {
    std::string image_id;
    std::vector<std::string> reasons;  // subset of quality/confidence/keypoints/misalignment
};

struct CleanResult {
    std::vector<AnnotationRecord> retained;
    std::vector<Rejection> rejected;
};

inline std::vector<std::string> violated_criteria(const QualityInfo& q,
                                                  const CleaningThresholds& t) {
    std::vector<std::string> reasons;
    if (q.sharpness < t.min_sharpness) reasons.push_back("quality");
    if (q.mean_confidence < t.min_mean_confidence) reasons.push_back("confidence");
    if (q.keypoint_count < t.min_keypoints) reasons.push_back("keypoints");
    if (t.max_misalignment > 0 && q.misalignment > t.max_misalignment)
        reasons.push_back("misalignment");
    return reasons;
}

inline CleanResult clean(const std::vector<AnnotationRecord>& records,
                         const CleaningThresholds& t) {
    CleanResult out;
    for (const auto& r : records) {
        if (!r.quality)
            throw SchemaError("clean: record " + r.image_id + " has no quality fields");
        auto reasons = violated_criteria(*r.quality, t);
        if (reasons.empty())
            out.retained.push_back(r);
        else
            out.rejected.push_back({r.image_id, std::move(reasons)});
    }
    return out;
}

// --- partitioning ----------------------------------------------------------------

struct IdentityPartition {
    std::map<int, std::vector<std::string>> by_camera;
    std::map<std::string, std::vector<std::string>> by_orientation;
    std::map<std::string, std::map<std::string, std::vector<std::string>>> by_attribute;
};

struct PartitionIndex {
    std::map<int, IdentityPartition> identities;
};

inline PartitionIndex build_partition(const std::vector<AnnotationRecord>& records) {
    PartitionIndex index;
    std::set<std::string> seen;
    for (const auto& r : records) {
        if (!seen.insert(r.image_id).second)
            throw SchemaError("build_partition: duplicate image id " + r.image_id);
        IdentityPartition& p = index.identities[r.person_id];
        p.by_camera[r.cam_id].push_back(r.image_id);
        p.by_orientation[r.orientation_label].push_back(r.image_id);
        for (const auto& [key, value] : r.attributes)
            p.by_attribute[key][value].push_back(r.image_id);
    }
    return index;
}

inline json partition_to_json(const PartitionIndex& index) {
    json out = json::object();
    for (const auto& [person, p] : index.identities) {
        json jp;
        json cams = json::object();
        for (const auto& [cam, ids] : p.by_camera) cams[std::to_string(cam)] = ids;
        jp["by_camera"] = std::move(cams);
        jp["by_orientation"] = p.by_orientation;
        jp["by_attribute"] = p.by_attribute;
        out[std::to_string(person)] = std::move(jp);
    }
    return out;
}

inline PartitionIndex partition_from_json(const json& j) {
    PartitionIndex index;
    for (auto it = j.begin(); it != j.end(); ++it) {
        IdentityPartition p;
        const json& jp = it.value();
        for (auto c = detail::require(jp, "by_camera", "partition").begin();
             c != jp.at("by_camera").end(); ++c)
            p.by_camera[std::stoi(c.key())] = c.value().get<std::vector<std::string>>();
        p.by_orientation =
            detail::require(jp, "by_orientation", "partition")
                .get<std::map<std::string, std::vector<std::string>>>();
        p.by_attribute =
            detail::require(jp, "by_attribute", "partition")
                .get<std::map<std::string, std::map<std::string, std::vector<std::string>>>>();
        index.identities[std::stoi(it.key())] = std::move(p);
    }
    return index;
}

// --- pair scoring ----------------------------------------------------------------

struct PairScore {
    std::string ref_id;
    std::string target_id;
    double similarity = 0.0;  // cosine of identity embeddings
    double viewpoint = 0.0;   // dot of orientation unit vectors
};

using Embedder = std::function<std::vector<double>(const AnnotationRecord&)>;

inline PairScore score_pair(const AnnotationRecord& a, const AnnotationRecord& b,
                            const Embedder& embed) {
    std::vector<double> ea = embed(a), eb = embed(b);
    if (ea.size() != eb.size() || ea.empty())
        throw InvalidArgument("score_pair: embedding dimension mismatch");
    double dot = 0;
    for (size_t i = 0; i < ea.size(); ++i) dot += ea[i] * eb[i];
    dot = std::min(1.0, std::max(-1.0, dot));
    return {a.image_id, b.image_id, dot,
            geo::viewpoint_score(a.orientation, b.orientation)};
}

// all intra-identity pairs, ordered by (person, image id) so output is stable
inline std::vector<PairScore> score_pairs(const std::vector<AnnotationRecord>& records,
                                          const Embedder& embed) {
    std::map<int, std::vector<const AnnotationRecord*>> by_person;
    for (const auto& r : records) by_person[r.person_id].push_back(&r);
    std::vector<PairScore> out;
    for (auto& [person, group] : by_person) {
        std::sort(group.begin(), group.end(),
                  [](const AnnotationRecord* a, const AnnotationRecord* b) {
                      return a->image_id < b->image_id;
                  });
        for (size_t i = 0; i < group.size(); ++i)
            for (size_t j = i + 1; j < group.size(); ++j)
                out.push_back(score_pair(*group[i], *group[j], embed));
    }
    return out;
}

inline json pair_score_to_json(const PairScore& s) {
    return {{"ref_id", s.ref_id},
            {"target_id", s.target_id},
            {"similarity", s.similarity},
            {"viewpoint", s.viewpoint}};
}

inline PairScore pair_score_from_json(const json& j) {
    PairScore s;
    s.ref_id = detail::require(j, "ref_id", "pair score").get<std::string>();
    s.target_id = detail::require(j, "target_id", "pair score").get<std::string>();
    s.similarity = detail::require(j, "similarity", "pair score").get<double>();
    s.viewpoint = detail::require(j, "viewpoint", "pair score").get<double>();
    return s;
}

// --- stats & artifacts -----------------------------------------------------------

inline json curation_stats(const std::vector<AnnotationRecord>& retained,
                           const std::vector<Rejection>& rejected) {
    json cameras = json::object();
    std::map<int, std::map<std::string, int>> counts;
    for (const auto& r : retained) ++counts[r.cam_id][r.orientation_label];
    for (const auto& [cam, per_label] : counts) {
        json row = json::object();
        for (const auto& [label, n] : per_label) row[label] = n;
        cameras[std::to_string(cam)] = std::move(row);
    }
    std::map<std::string, int> reason_counts;
    for (const auto& rej : rejected)
        for (const auto& reason : rej.reasons) ++reason_counts[reason];
    json reasons = json::object();
    for (const auto& [reason, n] : reason_counts) reasons[reason] = n;
    return {{"retained", retained.size()},
            {"rejected", rejected.size()},
            {"rejection_reasons", std::move(reasons)},
            {"by_camera_orientation", std::move(cameras)}};
}

inline void write_rejections(const std::string& path, const std::vector<Rejection>& rejected,
                             const json& header = json()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    if (!header.is_null()) write_jsonl_header(out, header);
    for (const auto& r : rejected)
        out << json{{"image_id", r.image_id}, {"reasons", r.reasons}}.dump() << "\n";
}

inline void write_pair_scores(const std::string& path, const std::vector<PairScore>& scores,
                              const json& header = json()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    if (!header.is_null()) write_jsonl_header(out, header);
    for (const auto& s : scores) out << pair_score_to_json(s).dump() << "\n";
}

inline std::vector<PairScore> read_pair_scores(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StagedDependency("missing pair scores: " + path + " (run curate first)");
    std::vector<PairScore> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            if (lineno == 1 && is_jsonl_header(j)) continue;
            out.push_back(pair_score_from_json(j));
        } catch (const json::exception& e) {
            throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace pedgen::curate
