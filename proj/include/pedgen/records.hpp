#pragma once

// Annotation records: the ground-truth package each corpus sample carries,
// JSONL (de)serialization, and the orientation-sector classifier both the
// renderer and the curation pass rely on.

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pedgen/common.hpp"
#include "pedgen/geometry.hpp"

namespace pedgen {

using json = nlohmann::json;

struct Keypoint {
    double x = 0, y = 0, confidence = 0;
};

struct QualityInfo {
    int keypoint_count = 0;
    double mean_confidence = 0;
    double misalignment = 0;
    double sharpness = 0;
};

struct AnnotationRecord {
    std::string image_id;
    int person_id = -1;
    int cam_id = -1;
    std::string modality;  // "rgb" | "ir"
    geo::Vec3 orientation;
    std::string orientation_label;  // front | back | left | right
    std::map<std::string, std::string> attributes;
    std::vector<Keypoint> keypoints;
    geo::PoseParams pose;
    std::optional<QualityInfo> quality;
};

// Azimuth sectors, 90 degrees wide, front-centered. phi = atan2(v_x, v_z):
//   front  |phi| <= 45°,  right  45° < phi <= 135°,
//   back   |phi| > 135°,  left   otherwise.
inline std::string classify_orientation(const geo::Vec3& v) {
    if (!v.finite()) throw InvalidArgument("classify_orientation: non-finite vector");
    if (v.norm() < 1e-12) throw InvalidArgument("classify_orientation: zero vector");
    double phi = std::atan2(v.x, v.z);
    double q = geo::kPi / 4.0;
    if (std::abs(phi) <= q) return "front";
    if (phi > q && phi <= 3.0 * q) return "right";
    if (std::abs(phi) > 3.0 * q) return "back";
    return "left";
}

// --- JSON ------------------------------------------------------------------------

namespace detail {
inline const json& require(const json& j, const char* key, const char* ctx) {
    auto it = j.find(key);
    if (it == j.end())
        throw SchemaError(std::string(ctx) + ": missing required field '" + key + "'");
    return *it;
}

inline json vec3_to_json(const geo::Vec3& v) { return json::array({v.x, v.y, v.z}); }

inline geo::Vec3 vec3_from_json(const json& j, const char* ctx) {
    if (!j.is_array() || j.size() != 3)
        throw SchemaError(std::string(ctx) + ": expected a 3-element array");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
}  // namespace detail

inline json pose_to_json(const geo::PoseParams& p) {
    return json{{"global_orient", detail::vec3_to_json(p.global_orient)},
                {"body_pose", p.body_pose},
                {"shape", p.shape},
                {"translation", detail::vec3_to_json(p.translation)}};
}

inline geo::PoseParams pose_from_json(const json& j) {
    geo::PoseParams p;
    p.global_orient = detail::vec3_from_json(detail::require(j, "global_orient", "pose"), "pose");
    p.body_pose = detail::require(j, "body_pose", "pose").get<std::vector<double>>();
    p.shape = detail::require(j, "shape", "pose").get<std::vector<double>>();
    p.translation = detail::vec3_from_json(detail::require(j, "translation", "pose"), "pose");
    return p;
}

inline json record_to_json(const AnnotationRecord& r) {
    json kps = json::array();
    for (const auto& k : r.keypoints) kps.push_back(json::array({k.x, k.y, k.confidence}));
    json j{{"image_id", r.image_id},
           {"person_id", r.person_id},
           {"cam_id", r.cam_id},
           {"modality", r.modality},
           {"orientation", detail::vec3_to_json(r.orientation)},
           {"orientation_label", r.orientation_label},
           {"attributes", r.attributes},
           {"keypoints", kps},
           {"pose", pose_to_json(r.pose)}};
    if (r.quality) {
        j["quality"] = json{{"keypoint_count", r.quality->keypoint_count},
                            {"mean_confidence", r.quality->mean_confidence},
                            {"misalignment", r.quality->misalignment},
                            {"sharpness", r.quality->sharpness}};
    }
    return j;
}

inline AnnotationRecord record_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("annotation: expected a JSON object");
    AnnotationRecord r;
    r.image_id = detail::require(j, "image_id", "annotation").get<std::string>();
    r.person_id = detail::require(j, "person_id", "annotation").get<int>();
    r.cam_id = detail::require(j, "cam_id", "annotation").get<int>();
    r.modality = detail::require(j, "modality", "annotation").get<std::string>();
    if (r.modality != "rgb" && r.modality != "ir")
        throw SchemaError("annotation: modality must be rgb or ir, got '" + r.modality + "'");
    r.orientation =
        detail::vec3_from_json(detail::require(j, "orientation", "annotation"), "annotation");
    r.orientation_label =
        detail::require(j, "orientation_label", "annotation").get<std::string>();
    r.attributes = detail::require(j, "attributes", "annotation")
                       .get<std::map<std::string, std::string>>();
    for (const auto& k : detail::require(j, "keypoints", "annotation")) {
        if (!k.is_array() || k.size() != 3)
            throw SchemaError("annotation: keypoint must be [x, y, confidence]");
        r.keypoints.push_back({k[0].get<double>(), k[1].get<double>(), k[2].get<double>()});
    }
    r.pose = pose_from_json(detail::require(j, "pose", "annotation"));
    if (j.contains("quality")) {
        const json& q = j["quality"];
        QualityInfo qi;
        qi.keypoint_count = detail::require(q, "keypoint_count", "quality").get<int>();
        qi.mean_confidence = detail::require(q, "mean_confidence", "quality").get<double>();
        qi.misalignment = detail::require(q, "misalignment", "quality").get<double>();
        qi.sharpness = detail::require(q, "sharpness", "quality").get<double>();
        r.quality = qi;
    }
    return r;
}

// Artifact .jsonl files may open with a provenance line {"kind":"header",...}
// carrying the config hash; readers skip it.
inline bool is_jsonl_header(const json& j) {
    return j.is_object() && j.value("kind", "") == "header";
}

inline void write_jsonl_header(std::ostream& out, const json& extra) {
    json h = extra;
    h["kind"] = "header";
    out << h.dump() << "\n";
}

inline std::vector<AnnotationRecord> read_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotations: " + path);
    std::vector<AnnotationRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (line_no == 1 && is_jsonl_header(j)) continue;
        try {
            out.push_back(record_from_json(j));
        } catch (const SchemaError& e) {
            throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline void write_annotations(const std::string& path,
                              const std::vector<AnnotationRecord>& records,
                              const json& header = json()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    if (!header.is_null()) write_jsonl_header(out, header);
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace pedgen
