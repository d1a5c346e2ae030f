#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "llgs/io/dataset.hpp"
#include "llgs/io/png.hpp"
#include "llgs/scene.hpp"

namespace llgs::io {

namespace fs = std::filesystem;

namespace detail {

struct ColmapCamera {
    int width = 0;
    int height = 0;
    Intrinsics intrinsics;
};

inline std::ifstream open_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    return in;
}

inline bool is_skippable(const std::string& line) {
    const auto pos = line.find_first_not_of(" \t\r");
    return pos == std::string::npos || line[pos] == '#';
}

[[noreturn]] inline void malformed(const fs::path& file, int line_no, const std::string& what) {
    throw IoError(file.filename().string() + ":" + std::to_string(line_no) + ": " + what);
}

inline std::map<int, ColmapCamera> read_cameras(const fs::path& file) {
    auto in = open_text(file);
    std::map<int, ColmapCamera> cams;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_skippable(line)) continue;
        std::istringstream ss(line);
        int id = 0;
        std::string model;
        ColmapCamera c;
        if (!(ss >> id >> model >> c.width >> c.height)) malformed(file, line_no, "malformed camera line");
        std::vector<double> params;
        for (double v; ss >> v;) params.push_back(v);
        if (model == "PINHOLE") {
            if (params.size() != 4) malformed(file, line_no, "PINHOLE expects fx fy cx cy");
            c.intrinsics = {params[0], params[1], params[2], params[3]};
        } else if (model == "SIMPLE_PINHOLE") {
            if (params.size() != 3) malformed(file, line_no, "SIMPLE_PINHOLE expects f cx cy");
            c.intrinsics = {params[0], params[0], params[1], params[2]};
        } else {
            throw IoError(file.filename().string() + ":" + std::to_string(line_no) + ": unsupported camera model " +
                          model + " (only PINHOLE and SIMPLE_PINHOLE are supported)");
        }
        cams[id] = c;
    }
    return cams;
}

}  // namespace detail

/// Loads a COLMAP text reconstruction: cameras.txt, images.txt, points3D.txt
/// in `dir`, with image files under `image_root`/images (by default next to
/// the text files). Images are ordered by IMAGE_ID.
inline Dataset load_colmap(const fs::path& dir, std::size_t holdout_every = 8, const fs::path& image_root = {}) {
    for (const char* name : {"cameras.txt", "images.txt", "points3D.txt"})
        if (!fs::exists(dir / name)) throw IoError("COLMAP dataset is missing " + (dir / name).string());
    const auto cams = detail::read_cameras(dir / "cameras.txt");

    struct Entry {
        int image_id;
        CameraView view;
        std::string name;
    };
    std::vector<Entry> entries;
    {
        const fs::path file = dir / "images.txt";
        auto in = detail::open_text(file);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (detail::is_skippable(line)) continue;
            std::istringstream ss(line);
            Entry e;
            Vector4d q;
            Vector3d t;
            int cam_id = 0;
            if (!(ss >> e.image_id >> q[0] >> q[1] >> q[2] >> q[3] >> t[0] >> t[1] >> t[2] >> cam_id >> e.name))
                detail::malformed(file, line_no, "malformed image line");
            const auto it = cams.find(cam_id);
            if (it == cams.end()) detail::malformed(file, line_no, "unknown camera id " + std::to_string(cam_id));
            if (!(q.norm() > 0.0)) detail::malformed(file, line_no, "zero quaternion");
            e.view.world_to_camera.rotation = rotation_from_quaternion(q);
            e.view.world_to_camera.translation = t;
            e.view.intrinsics = it->second.intrinsics;
            e.view.width = it->second.width;
            e.view.height = it->second.height;
            entries.push_back(std::move(e));
            // The POINTS2D line follows every image line, possibly empty.
            std::getline(in, line);
            ++line_no;
        }
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.image_id < b.image_id; });

    Dataset d;
    for (auto& e : entries) {
        const fs::path img_path = (image_root.empty() ? dir : image_root) / "images" / e.name;
        e.view.input_image = read_png(img_path);
        validate_camera(e.view);
        d.views.push_back(std::move(e.view));
        d.image_paths.push_back((fs::path("images") / e.name).string());
        d.reference_paths.emplace_back();
        d.references.emplace_back();
    }
    {
        const fs::path file = dir / "points3D.txt";
        auto in = detail::open_text(file);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (detail::is_skippable(line)) continue;
            std::istringstream ss(line);
            long id = 0;
            InitPoint p;
            int r = 0, g = 0, b = 0;
            if (!(ss >> id >> p.position[0] >> p.position[1] >> p.position[2] >> r >> g >> b))
                detail::malformed(file, line_no, "malformed point line");
            p.color = Vector3d(r, g, b) / 255.0;
            d.points.push_back(p);
        }
    }
    split_every(d, holdout_every);
    d.recompute_bounds();
    return d;
}

}  // namespace llgs::io
