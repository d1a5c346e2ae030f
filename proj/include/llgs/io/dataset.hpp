#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "llgs/mcolor.hpp"
#include "llgs/preprocess.hpp"
#include "llgs/scene.hpp"

namespace llgs::io {

struct InitPoint {
    Vector3d position = Vector3d::Zero();
    Vector3d color = Vector3d::Zero();
};

/// Cameras, images and sparse points for one scene.
struct Dataset {
    std::vector<CameraView> views;
    std::vector<std::string> image_paths;      // relative to the dataset root; may be empty
    std::vector<std::string> reference_paths;  // optional bright references
    std::vector<Image> references;             // empty Image when a view has none
    std::vector<InitPoint> points;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    SceneBounds bounds;

    [[nodiscard]] std::vector<Vector3d> point_positions() const {
        std::vector<Vector3d> p;
        p.reserve(points.size());
        for (const auto& pt : points) p.push_back(pt.position);
        return p;
    }

    [[nodiscard]] std::vector<CameraView> select(const std::vector<std::size_t>& idx) const {
        std::vector<CameraView> out;
        for (std::size_t i : idx) out.push_back(views.at(i));
        return out;
    }
    [[nodiscard]] std::vector<Image> select_references(const std::vector<std::size_t>& idx) const {
        std::vector<Image> out;
        for (std::size_t i : idx) out.push_back(references.at(i));
        return out;
    }

    void recompute_bounds() {
        const auto p = point_positions();
        bounds = SceneBounds::around(p, 0.1);
    }
};

/// Every `every`-th view (starting at 0) is held out for testing; every == 0
/// puts all views in the training split.
inline void split_every(Dataset& d, std::size_t every) {
    d.train.clear();
    d.test.clear();
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        if (every > 0 && i % every == 0)
            d.test.push_back(i);
        else
            d.train.push_back(i);
    }
}

/// Fills each view's preprocessed image from its input image.
inline void apply_preprocess(Dataset& d, const PreprocessConfig& cfg) {
    cfg.validate();
    for (auto& v : d.views)
        if (!v.input_image.empty()) v.preprocessed_image = preprocess_input(v.input_image, cfg);
}

}  // namespace llgs::io
