#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "llgs/mcolor.hpp"
#include "llgs/scene.hpp"

namespace llgs::io {

inline constexpr std::array<const char*, 14> kPlyFields = {
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "material_r", "material_g", "material_b"};
inline constexpr std::size_t kPlyFieldCount = kPlyFields.size();

/// One PLY vertex as written by export_ply.
struct PlyVertex {
    Vector3d position = Vector3d::Zero();
    Vector3d log_scale = Vector3d::Zero();
    Vector4d rotation = Vector4d(1, 0, 0, 0);
    double opacity_logit = 0.0;
    Vector3d material = Vector3d::Zero();
};

/// View-independent material of a Gaussian at `position`.
inline Vector3d material_at(const Vector3d& position, const MColorNets& nets) {
    const VectorXd f = mlp_forward(nets.feature_net, positional_encoding(nets.bounds.normalize(position)));
    return mlp_forward(nets.color_net, f);
}

/// Binary little-endian PLY, one double per property.
inline void export_ply(const GaussianCloud& cloud, const MColorNets& nets, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size() << '\n';
    for (std::size_t i = 0; i < kPlyFieldCount; ++i) out << "property double " << kPlyFields[i] << '\n';
    out << "end_header\n";
    for (const auto& g : cloud) {
        const Vector3d m = material_at(g.position, nets);
        const double row[kPlyFieldCount] = {g.position[0], g.position[1], g.position[2],  g.log_scale[0], g.log_scale[1],
                                            g.log_scale[2], g.rotation[0], g.rotation[1], g.rotation[2],  g.rotation[3],
                                            g.opacity_logit, m[0],         m[1],          m[2]};
        out.write(reinterpret_cast<const char*>(row), sizeof(row));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

/// Reads a PLY produced by export_ply.
inline std::vector<PlyVertex> read_ply(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t count = 0;
    std::vector<std::string> props;
    bool binary_le = false;
    if (!std::getline(in, line) || line != "ply") throw IoError(path.string() + ": not a PLY file");
    while (std::getline(in, line)) {
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "format") {
            std::string fmt;
            ss >> fmt;
            binary_le = fmt == "binary_little_endian";
        } else if (word == "element") {
            std::string name;
            ss >> name >> count;
        } else if (word == "property") {
            std::string type, name;
            ss >> type >> name;
            if (type != "double") throw IoError(path.string() + ": only double properties are supported");
            props.push_back(name);
        }
    }
    if (!binary_le) throw IoError(path.string() + ": expected binary_little_endian");
    if (props.size() != kPlyFieldCount) throw IoError(path.string() + ": unexpected property layout");
    std::vector<PlyVertex> out(count);
    for (auto& v : out) {
        double row[kPlyFieldCount];
        if (!in.read(reinterpret_cast<char*>(row), sizeof(row))) throw IoError(path.string() + ": truncated vertex data");
        v.position = {row[0], row[1], row[2]};
        v.log_scale = {row[3], row[4], row[5]};
        v.rotation = {row[6], row[7], row[8], row[9]};
        v.opacity_logit = row[10];
        v.material = {row[11], row[12], row[13]};
    }
    return out;
}

}  // namespace llgs::io
