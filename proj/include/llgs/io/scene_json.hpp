#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "llgs/io/colmap.hpp"
#include "llgs/io/dataset.hpp"
#include "llgs/io/png.hpp"

namespace llgs::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kSceneFileName = "scene.json";
inline constexpr int kSceneFormatVersion = 1;

struct SchemaError : IoError {
    using IoError::IoError;
};

namespace detail {

[[noreturn]] inline void schema_fail(const std::string& path, const std::string& what) {
    throw SchemaError(path + ": " + what);
}

inline const json& member(const json& j, const std::string& key, const std::string& path) {
    if (!j.is_object()) schema_fail(path, "expected an object");
    const auto it = j.find(key);
    if (it == j.end()) schema_fail(path + "." + key, "missing");
    return *it;
}

inline double number(const json& j, const std::string& path) {
    if (!j.is_number()) schema_fail(path, "expected a number");
    return j.get<double>();
}

inline int integer(const json& j, const std::string& path) {
    if (!j.is_number_integer()) schema_fail(path, "expected an integer");
    return j.get<int>();
}

inline Vector3d vec3(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 3) schema_fail(path, "expected an array of 3 numbers");
    return {number(j[0], path + "[0]"), number(j[1], path + "[1]"), number(j[2], path + "[2]")};
}

inline Eigen::Matrix4d mat4(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 4) schema_fail(path, "expected a 4x4 array");
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r) {
        const std::string rp = path + "[" + std::to_string(r) + "]";
        if (!j[r].is_array() || j[r].size() != 4) schema_fail(rp, "expected an array of 4 numbers");
        for (int c = 0; c < 4; ++c) m(r, c) = number(j[r][c], rp + "[" + std::to_string(c) + "]");
    }
    return m;
}

inline std::vector<std::size_t> index_list(const json& j, const std::string& path, std::size_t bound) {
    if (!j.is_array()) schema_fail(path, "expected an array");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string ip = path + "[" + std::to_string(i) + "]";
        const int v = integer(j[i], ip);
        if (v < 0 || static_cast<std::size_t>(v) >= bound) schema_fail(ip, "view index out of range");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

}  // namespace detail

struct SceneLoadOptions {
    bool load_images = true;
};

/// Parses a scene document. Image files are resolved against `root`.
inline Dataset scene_from_json(const json& doc, const fs::path& root, SceneLoadOptions opts = {}) {
    using namespace detail;
    const std::string base = "$";
    if (!doc.is_object()) schema_fail(base, "expected an object");
    if (doc.contains("version") && integer(doc["version"], "$.version") != kSceneFormatVersion)
        schema_fail("$.version", "unsupported version");

    Dataset d;
    const json& cams = member(doc, "cameras", base);
    if (!cams.is_array()) schema_fail("$.cameras", "expected an array");
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const std::string cp = "$.cameras[" + std::to_string(i) + "]";
        const json& c = cams[i];
        CameraView v;
        v.width = integer(member(c, "width", cp), cp + ".width");
        v.height = integer(member(c, "height", cp), cp + ".height");
        if (v.width <= 0 || v.height <= 0) schema_fail(cp, "width and height must be positive");
        v.intrinsics.fx = number(member(c, "fx", cp), cp + ".fx");
        v.intrinsics.fy = number(member(c, "fy", cp), cp + ".fy");
        v.intrinsics.cx = number(member(c, "cx", cp), cp + ".cx");
        v.intrinsics.cy = number(member(c, "cy", cp), cp + ".cy");
        const Eigen::Matrix4d m = mat4(member(c, "world_to_camera", cp), cp + ".world_to_camera");
        v.world_to_camera.rotation = m.topLeftCorner<3, 3>();
        v.world_to_camera.translation = m.topRightCorner<3, 1>();
        if (!is_orthonormal(v.world_to_camera.rotation))
            schema_fail(cp + ".world_to_camera", "rotation block is not orthonormal");
        if (m.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) schema_fail(cp + ".world_to_camera", "last row must be 0 0 0 1");

        std::string image_path, ref_path;
        if (c.contains("image")) {
            if (!c["image"].is_string()) schema_fail(cp + ".image", "expected a string");
            image_path = c["image"].get<std::string>();
        }
        if (c.contains("reference")) {
            if (!c["reference"].is_string()) schema_fail(cp + ".reference", "expected a string");
            ref_path = c["reference"].get<std::string>();
        }
        Image ref;
        if (opts.load_images) {
            if (!image_path.empty()) v.input_image = read_png(root / image_path);
            if (!ref_path.empty()) ref = read_png(root / ref_path);
            if (!ref.empty() && (ref.width != v.width || ref.height != v.height))
                schema_fail(cp + ".reference", "image size does not match width/height");
            if (!v.input_image.empty() && (v.input_image.width != v.width || v.input_image.height != v.height))
                schema_fail(cp + ".image", "image size does not match width/height");
        }
        d.views.push_back(std::move(v));
        d.image_paths.push_back(image_path);
        d.reference_paths.push_back(ref_path);
        d.references.push_back(std::move(ref));
    }

    const json& pts = member(doc, "points", base);
    if (!pts.is_array()) schema_fail("$.points", "expected an array");
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const std::string pp = "$.points[" + std::to_string(i) + "]";
        InitPoint p;
        p.position = vec3(member(pts[i], "position", pp), pp + ".position");
        if (pts[i].contains("color")) p.color = vec3(pts[i]["color"], pp + ".color");
        d.points.push_back(p);
    }

    if (doc.contains("split")) {
        const json& s = doc["split"];
        d.train = index_list(member(s, "train", "$.split"), "$.split.train", d.views.size());
        d.test = index_list(member(s, "test", "$.split"), "$.split.test", d.views.size());
    } else {
        split_every(d, 0);
    }
    d.recompute_bounds();
    return d;
}

inline json scene_to_json(const Dataset& d) {
    json doc;
    doc["format"] = "llgs-scene";
    doc["version"] = kSceneFormatVersion;
    json cams = json::array();
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        const auto& v = d.views[i];
        json c;
        c["width"] = v.width;
        c["height"] = v.height;
        c["fx"] = v.intrinsics.fx;
        c["fy"] = v.intrinsics.fy;
        c["cx"] = v.intrinsics.cx;
        c["cy"] = v.intrinsics.cy;
        const Eigen::Matrix4d m = v.world_to_camera.matrix();
        json rows = json::array();
        for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
        c["world_to_camera"] = rows;
        if (i < d.image_paths.size() && !d.image_paths[i].empty()) c["image"] = d.image_paths[i];
        if (i < d.reference_paths.size() && !d.reference_paths[i].empty()) c["reference"] = d.reference_paths[i];
        cams.push_back(c);
    }
    doc["cameras"] = cams;
    json pts = json::array();
    for (const auto& p : d.points)
        pts.push_back({{"position", {p.position[0], p.position[1], p.position[2]}},
                       {"color", {p.color[0], p.color[1], p.color[2]}}});
    doc["points"] = pts;
    doc["split"] = {{"train", d.train}, {"test", d.test}};
    return doc;
}

inline Dataset load_scene_json(const fs::path& file, SceneLoadOptions opts = {}) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& e) {
        throw SchemaError(file.string() + ": " + e.what());
    }
    return scene_from_json(doc, file.parent_path(), opts);
}

/// Writes scene.json only; image files referenced by the dataset are not touched.
inline void save_scene_json(const fs::path& file, const Dataset& d) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw IoError("cannot write " + file.string());
    out << scene_to_json(d).dump(2) << '\n';
}

/// Writes scene.json plus every view's input (8-bit) and reference (16-bit)
/// images under `dir`, using the dataset's relative paths or generated ones.
inline void save_dataset(const fs::path& dir, Dataset& d) {
    fs::create_directories(dir);
    d.image_paths.resize(d.views.size());
    d.reference_paths.resize(d.views.size());
    d.references.resize(d.views.size());
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%03zu.png", i);
        if (!d.views[i].input_image.empty()) {
            if (d.image_paths[i].empty()) d.image_paths[i] = (fs::path("images") / name).string();
            write_png(dir / d.image_paths[i], d.views[i].input_image, 8);
        }
        if (!d.references[i].empty()) {
            if (d.reference_paths[i].empty()) d.reference_paths[i] = (fs::path("references") / name).string();
            write_png(dir / d.reference_paths[i], d.references[i], 16);
        }
    }
    save_scene_json(dir / kSceneFileName, d);
}

/// Loads `dir/scene.json` when present, otherwise a COLMAP text layout, either
/// flat in `dir` or as `dir/sparse/0` with images in `dir/images` (COLMAP
/// views are split with `colmap_holdout`).
inline Dataset load_dataset(const fs::path& dir, SceneLoadOptions opts = {}, std::size_t colmap_holdout = 8) {
    if (fs::is_regular_file(dir) && dir.extension() == ".json") return load_scene_json(dir, opts);
    if (fs::exists(dir / kSceneFileName)) return load_scene_json(dir / kSceneFileName, opts);
    if (fs::exists(dir / "cameras.txt")) return load_colmap(dir, colmap_holdout);
    if (fs::exists(dir / "sparse" / "0" / "cameras.txt")) return load_colmap(dir / "sparse" / "0", colmap_holdout, dir);
    throw IoError("no scene.json or COLMAP text files found in " + dir.string());
}

}  // namespace llgs::io
