#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "llgs/io/checkpoint.hpp"
#include "llgs/io/ply.hpp"
#include "llgs/io/scene_json.hpp"
#include "llgs/io/synth.hpp"
#include "support.hpp"

using namespace llgs;
using namespace llgs::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = LLGS_FIXTURE_DIR;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("llgs_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

/// Copy of the COLMAP fixture that a test may edit.
fs::path colmap_copy(const TempDir& dir) {
    const fs::path dst = dir.path() / "colmap";
    fs::copy(kFixtures / "colmap", dst, fs::copy_options::recursive);
    return dst;
}

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const IoError& e) {
        return e.what();
    }
    return "";
}

io::SynthSpec tiny_synth() {
    io::SynthSpec spec;
    spec.n_gaussians = 6;
    spec.n_views = 4;
    spec.resolution = 16;
    return spec;
}

}  // namespace

// ---------------------------------------------------------------------------
// COLMAP

TEST(Colmap, LoadsFixture) {
    const auto d = io::load_colmap(kFixtures / "colmap");
    ASSERT_EQ(d.views.size(), 2u);

    // Views are ordered by IMAGE_ID: 3 (front) before 7 (side).
    const auto& front = d.views[0];
    EXPECT_EQ(d.image_paths[0], (fs::path("images") / "front.png").string());
    EXPECT_EQ(front.width, 4);
    EXPECT_EQ(front.height, 3);
    EXPECT_EQ(front.intrinsics.fx, 5.0);
    EXPECT_EQ(front.intrinsics.fy, 5.5);
    EXPECT_EQ(front.intrinsics.cx, 2.0);
    EXPECT_EQ(front.intrinsics.cy, 1.5);
    EXPECT_LT((front.world_to_camera.rotation - Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((front.world_to_camera.translation - Vector3d(0.1, -0.2, 3)).cwiseAbs().maxCoeff(), 1e-9);

    // Image 7: a quarter turn about +y, on a SIMPLE_PINHOLE camera.
    const auto& side = d.views[1];
    Matrix3d r_side;
    r_side << 0, 0, 1, 0, 1, 0, -1, 0, 0;
    EXPECT_LT((side.world_to_camera.rotation - r_side).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((side.world_to_camera.translation - Vector3d(0, 0, 4)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_EQ(side.intrinsics.fx, 4.0);
    EXPECT_EQ(side.intrinsics.fy, 4.0);
    EXPECT_EQ(side.intrinsics.cx, 2.1);
    EXPECT_EQ(side.intrinsics.cy, 1.4);

    for (std::size_t i = 0; i < front.input_image.data.size(); ++i)
        EXPECT_EQ(front.input_image.data[i], static_cast<double>(i * 7 % 256) / 255.0);

    ASSERT_EQ(d.points.size(), 3u);
    EXPECT_EQ(d.points[0].position, Vector3d(0.1, 0.2, 0.3));
    EXPECT_EQ(d.points[0].color, Vector3d(1.0, 0.0, 128.0 / 255.0));
    EXPECT_EQ(d.points[2].position, Vector3d(0.0, -1.0, 0.25));

    // Default holdout of 8: view 0 is the only test view.
    EXPECT_EQ(d.test, std::vector<std::size_t>{0});
    EXPECT_EQ(d.train, std::vector<std::size_t>{1});
}

TEST(Colmap, LoadDatasetFindsFlatAndSparseLayouts) {
    TempDir tmp;
    const fs::path flat = colmap_copy(tmp);
    EXPECT_EQ(io::load_dataset(flat).views.size(), 2u);

    const fs::path project = tmp.path() / "project";
    fs::create_directories(project / "sparse" / "0");
    fs::copy(kFixtures / "colmap" / "images", project / "images");
    for (const char* f : {"cameras.txt", "images.txt", "points3D.txt"})
        fs::copy_file(kFixtures / "colmap" / f, project / "sparse" / "0" / f);
    const auto d = io::load_dataset(project, {}, 0);
    EXPECT_EQ(d.views.size(), 2u);
    EXPECT_TRUE(d.test.empty());
    EXPECT_EQ(d.views[1].input_image.width, 4);
}

TEST(Colmap, RejectsUnsupportedCameraModel) {
    TempDir tmp;
    const fs::path dir = colmap_copy(tmp);
    write_text(dir / "cameras.txt", "# header\n1 PINHOLE 4 3 5 5 2 1.5\n2 OPENCV 4 3 4 4 2 1.5 0.1 0.01 0 0\n");
    const std::string msg = error_of([&] { io::load_colmap(dir); });
    EXPECT_NE(msg.find("cameras.txt:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("OPENCV"), std::string::npos) << msg;
}

TEST(Colmap, ReportsLineOfMalformedEntry) {
    TempDir tmp;
    const fs::path dir = colmap_copy(tmp);
    write_text(dir / "points3D.txt", "# points\n1 0 0 0 255 255 255 0.1\n2 0.5 oops 0 1 2 3 0.1\n");
    const std::string msg = error_of([&] { io::load_colmap(dir); });
    EXPECT_NE(msg.find("points3D.txt:3"), std::string::npos) << msg;

    write_text(dir / "cameras.txt", "1 PINHOLE 4 3 5 5 2\n");
    const std::string msg2 = error_of([&] { io::load_colmap(dir); });
    EXPECT_NE(msg2.find("cameras.txt:1"), std::string::npos) << msg2;
}

TEST(Colmap, RejectsUnknownCameraId) {
    TempDir tmp;
    const fs::path dir = colmap_copy(tmp);
    write_text(dir / "images.txt", "1 1 0 0 0 0 0 3 9 front.png\n\n");
    const std::string msg = error_of([&] { io::load_colmap(dir); });
    EXPECT_NE(msg.find("unknown camera id 9"), std::string::npos) << msg;
}

TEST(Colmap, RequiresAllThreeFiles) {
    TempDir tmp;
    const fs::path dir = colmap_copy(tmp);
    fs::remove(dir / "points3D.txt");
    const std::string msg = error_of([&] { io::load_colmap(dir); });
    EXPECT_NE(msg.find("points3D.txt"), std::string::npos) << msg;
    EXPECT_THROW(io::load_dataset(tmp.path() / "nothing_here"), IoError);
}

// ---------------------------------------------------------------------------
// Scene JSON

TEST(SceneJson, DatasetRoundTrip) {
    TempDir tmp;
    auto r = io::synth(tiny_synth());
    io::Dataset d = r.dataset;
    io::save_dataset(tmp.path() / "scene", d);
    const auto back = io::load_dataset(tmp.path() / "scene");
    ASSERT_EQ(back.views.size(), d.views.size());
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        const auto& a = d.views[i];
        const auto& b = back.views[i];
        EXPECT_EQ(a.width, b.width);
        EXPECT_EQ(a.intrinsics.fx, b.intrinsics.fx);
        EXPECT_EQ(a.intrinsics.cy, b.intrinsics.cy);
        EXPECT_EQ(a.world_to_camera.rotation, b.world_to_camera.rotation);
        EXPECT_EQ(a.world_to_camera.translation, b.world_to_camera.translation);
        EXPECT_EQ(b.input_image.data, io::quantized(a.input_image, 8).data);
        EXPECT_EQ(back.references[i].data, io::quantized(d.references[i], 16).data);
    }
    ASSERT_EQ(back.points.size(), d.points.size());
    for (std::size_t i = 0; i < d.points.size(); ++i) {
        EXPECT_EQ(back.points[i].position, d.points[i].position);
        EXPECT_EQ(back.points[i].color, d.points[i].color);
    }
    EXPECT_EQ(back.train, d.train);
    EXPECT_EQ(back.test, d.test);
}

TEST(SceneJson, DocumentRoundTripWithoutImages) {
    auto r = io::synth(tiny_synth());
    const auto doc = io::scene_to_json(r.dataset);
    const auto back = io::scene_from_json(doc, ".", {.load_images = false});
    EXPECT_EQ(io::scene_to_json(back), doc);
}

TEST(SceneJson, AcceptsEmptyPointList) {
    const nlohmann::json doc = nlohmann::json::parse(R"({
        "cameras": [{"width": 4, "height": 3, "fx": 5, "fy": 5, "cx": 2, "cy": 1.5,
                     "world_to_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,2],[0,0,0,1]]}],
        "points": []})");
    const auto d = io::scene_from_json(doc, ".");
    EXPECT_TRUE(d.points.empty());
    ASSERT_EQ(d.views.size(), 1u);
    EXPECT_EQ(d.views[0].world_to_camera.translation, Vector3d(0, 0, 2));
    EXPECT_EQ(d.train, std::vector<std::size_t>{0});
}

TEST(SceneJson, ReportsPathOfSchemaViolations) {
    const auto parse_error = [](const std::string& text) {
        try {
            io::scene_from_json(nlohmann::json::parse(text), ".");
        } catch (const io::SchemaError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    const std::string skewed = parse_error(R"({
        "cameras": [{"width": 4, "height": 3, "fx": 5, "fy": 5, "cx": 2, "cy": 1.5,
                     "world_to_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,2],[0,0,0,1]]},
                    {"width": 4, "height": 3, "fx": 5, "fy": 5, "cx": 2, "cy": 1.5,
                     "world_to_camera": [[1,0.2,0,0],[0,1,0,0],[0,0,1,2],[0,0,0,1]]}],
        "points": []})");
    EXPECT_NE(skewed.find("$.cameras[1].world_to_camera"), std::string::npos) << skewed;
    EXPECT_NE(skewed.find("orthonormal"), std::string::npos) << skewed;

    const std::string missing = parse_error(R"({"cameras": [{"width": 4}], "points": []})");
    EXPECT_NE(missing.find("$.cameras[0]"), std::string::npos) << missing;
    EXPECT_FALSE(parse_error(R"({"cameras": []})").empty());
    EXPECT_FALSE(parse_error(R"([1, 2])").empty());
    const std::string bad_split = parse_error(R"({"cameras": [], "points": [], "split": {"train": [0], "test": []}})");
    EXPECT_NE(bad_split.find("$.split.train"), std::string::npos) << bad_split;
}

TEST(SceneJson, RejectsMismatchedImageSize) {
    TempDir tmp;
    io::write_png(tmp.path() / "img.png", Image(5, 3, 3, 0.2));
    const nlohmann::json doc = nlohmann::json::parse(R"({
        "cameras": [{"width": 4, "height": 3, "fx": 5, "fy": 5, "cx": 2, "cy": 1.5, "image": "img.png",
                     "world_to_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,2],[0,0,0,1]]}],
        "points": []})");
    EXPECT_THROW(io::scene_from_json(doc, tmp.path()), io::SchemaError);
}

// ---------------------------------------------------------------------------
// PNG

TEST(Png, EightBitRoundTripIsExact) {
    TempDir tmp;
    Image img(7, 5, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i * 37 % 256) / 255.0;
    io::write_png(tmp.path() / "a.png", img, 8);
    const Image back = io::read_png(tmp.path() / "a.png");
    ASSERT_TRUE(back.same_shape(img));
    EXPECT_EQ(back.data, img.data);
}

TEST(Png, SixteenBitKeepsFinePrecision) {
    TempDir tmp;
    Rng rng(1);
    const Image img = random_image(rng, 6, 4);
    io::write_png(tmp.path() / "b.png", img, 16);
    const Image back = io::read_png(tmp.path() / "b.png");
    EXPECT_LE(max_abs_diff(back, img), 0.5 / 65535.0 + 1e-15);
    EXPECT_EQ(back.data, io::quantized(img, 16).data);
}

TEST(Png, ClampsOutOfRangeValues) {
    TempDir tmp;
    Image img(2, 1, 3);
    img.data = {-0.5, 0.5, 1.5, 1.0, 0.0, 2.0};
    io::write_png(tmp.path() / "c.png", img, 8);
    const Image back = io::read_png(tmp.path() / "c.png");
    EXPECT_EQ(back.data, (std::vector<double>{0.0, 128.0 / 255.0, 1.0, 1.0, 0.0, 1.0}));
}

TEST(Png, ReportsMissingAndCorruptFiles) {
    TempDir tmp;
    EXPECT_THROW(io::read_png(tmp.path() / "missing.png"), IoError);
    write_text(tmp.path() / "junk.png", "this is not a png");
    EXPECT_THROW(io::read_png(tmp.path() / "junk.png"), IoError);
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

io::Checkpoint sample_checkpoint() {
    Rng rng(2);
    const CameraView cam = make_camera(16, 16);
    io::Checkpoint ck;
    ck.iteration = 1234;
    ck.cloud = random_cloud(rng, cam, 9);
    ck.nets = random_nets(4, bounds_of(ck.cloud));
    ck.train.iterations = 5000;
    ck.train.seed = 99;
    ck.loss.w_grad = 0.25;
    ck.preprocess.gamma_pre = 0.6;
    return ck;
}

}  // namespace

TEST(Checkpoint, EncodingRoundTripIsByteIdentical) {
    const auto ck = sample_checkpoint();
    const std::string bytes = io::encode_checkpoint(ck);
    const auto back = io::decode_checkpoint(bytes);
    EXPECT_EQ(io::encode_checkpoint(back), bytes);
    EXPECT_EQ(back.iteration, 1234);
    EXPECT_EQ(back.train.seed, 99u);
    EXPECT_EQ(back.loss.w_grad, 0.25);
    EXPECT_EQ(back.preprocess.gamma_pre, 0.6);
    ASSERT_EQ(back.cloud.size(), ck.cloud.size());
    for (std::size_t i = 0; i < ck.cloud.size(); ++i) {
        EXPECT_EQ(back.cloud[i].position, ck.cloud[i].position);
        EXPECT_EQ(back.cloud[i].rotation, ck.cloud[i].rotation);
    }
    const CameraView cam = make_camera(16, 16);
    const auto a = render(ck.cloud, ck.nets, cam, {RenderMode::both, Vector3d::Zero(), 1});
    const auto b = render(back.cloud, back.nets, cam, {RenderMode::both, Vector3d::Zero(), 1});
    EXPECT_EQ(a.image_enhanced.data, b.image_enhanced.data);
}

TEST(Checkpoint, FileRoundTripIsByteIdentical) {
    TempDir tmp;
    auto ck = sample_checkpoint();
    ck.nets.pin = EnhancePin{Vector3d(0.1, 0.2, 0.3), Vector3d(1, 2, 3)};
    io::save_checkpoint(tmp.path() / "a.llgs", ck);
    const auto back = io::load_checkpoint(tmp.path() / "a.llgs");
    io::save_checkpoint(tmp.path() / "b.llgs", back);
    EXPECT_EQ(slurp(tmp.path() / "a.llgs"), slurp(tmp.path() / "b.llgs"));
    ASSERT_TRUE(back.nets.pin.has_value());
    EXPECT_EQ(back.nets.pin->mu, Vector3d(1, 2, 3));
}

TEST(Checkpoint, RejectsCorruptInput) {
    const std::string bytes = io::encode_checkpoint(sample_checkpoint());
    EXPECT_THROW(io::decode_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
    EXPECT_THROW(io::decode_checkpoint(bytes + "x"), IoError);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(io::decode_checkpoint(bad_magic), IoError);
    EXPECT_THROW(io::decode_checkpoint(""), IoError);
    EXPECT_THROW(io::load_checkpoint("/nonexistent/dir/ck.llgs"), IoError);
}

// ---------------------------------------------------------------------------
// PLY

TEST(Ply, EmptyCloud) {
    TempDir tmp;
    io::export_ply({}, MColorNets::create({}, 1), tmp.path() / "empty.ply");
    EXPECT_TRUE(io::read_ply(tmp.path() / "empty.ply").empty());
    const std::string text = slurp(tmp.path() / "empty.ply");
    EXPECT_EQ(text.rfind("ply\nformat binary_little_endian 1.0\nelement vertex 0\n", 0), 0u);
}

TEST(Ply, VerticesCarryParametersAndMaterial) {
    TempDir tmp;
    Rng rng(3);
    const CameraView cam = make_camera(16, 16);
    const GaussianCloud cloud = random_cloud(rng, cam, 5);
    const MColorNets nets = random_nets(8, bounds_of(cloud));
    io::export_ply(cloud, nets, tmp.path() / "c.ply");
    const auto v = io::read_ply(tmp.path() / "c.ply");
    ASSERT_EQ(v.size(), cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_EQ(v[i].position, cloud[i].position);
        EXPECT_EQ(v[i].log_scale, cloud[i].log_scale);
        EXPECT_EQ(v[i].rotation, cloud[i].rotation);
        EXPECT_EQ(v[i].opacity_logit, cloud[i].opacity_logit);
        // Material does not depend on the view direction used to decompose.
        EXPECT_EQ(v[i].material, decompose(cloud[i].position, Vector3d(0, 0, 1), nets).material);
        EXPECT_EQ(v[i].material, decompose(cloud[i].position, Vector3d(0.6, -0.8, 0), nets).material);
    }
}

TEST(Ply, SingleVertexFileSize) {
    TempDir tmp;
    GaussianCloud one(1);
    io::export_ply(one, MColorNets::create({}, 1), tmp.path() / "one.ply");
    const std::string text = slurp(tmp.path() / "one.ply");
    const auto header_end = text.find("end_header\n") + std::string("end_header\n").size();
    EXPECT_EQ(text.size() - header_end, io::kPlyFieldCount * sizeof(double));
    EXPECT_EQ(io::read_ply(tmp.path() / "one.ply").size(), 1u);
}

TEST(Ply, RejectsForeignFiles) {
    TempDir tmp;
    write_text(tmp.path() / "ascii.ply", "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n");
    EXPECT_THROW(io::read_ply(tmp.path() / "ascii.ply"), IoError);
    write_text(tmp.path() / "float.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n");
    EXPECT_THROW(io::read_ply(tmp.path() / "float.ply"), IoError);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

TEST(Synth, DeterministicForASeed) {
    const auto a = io::synth(tiny_synth());
    const auto b = io::synth(tiny_synth());
    ASSERT_EQ(a.dataset.views.size(), b.dataset.views.size());
    for (std::size_t i = 0; i < a.dataset.views.size(); ++i) {
        EXPECT_EQ(a.dataset.views[i].input_image.data, b.dataset.views[i].input_image.data);
        EXPECT_EQ(a.dataset.references[i].data, b.dataset.references[i].data);
    }
    auto spec = tiny_synth();
    spec.seed = 8;
    EXPECT_NE(io::synth(spec).dataset.views[0].input_image.data, a.dataset.views[0].input_image.data);
}

TEST(Synth, DefaultSceneShapes) {
    const auto r = io::synth({});
    const auto& d = r.dataset;
    ASSERT_EQ(d.views.size(), 8u);
    EXPECT_EQ(r.ground_truth.size(), 40u);
    EXPECT_EQ(d.points.size(), 40u);
    for (std::size_t i = 0; i < d.views.size(); ++i) {
        EXPECT_EQ(d.views[i].width, 64);
        EXPECT_EQ(d.views[i].input_image.width, 64);
        EXPECT_EQ(d.views[i].input_image.channels, 3);
        EXPECT_EQ(d.references[i].height, 64);
        EXPECT_NO_THROW(validate_camera(d.views[i]));
        // Inputs are stored at 8 bits, references at 16.
        EXPECT_EQ(d.views[i].input_image.data, io::quantized(d.views[i].input_image, 8).data);
        EXPECT_EQ(d.references[i].data, io::quantized(d.references[i], 16).data);
    }
    EXPECT_EQ(d.test, (std::vector<std::size_t>{0, 4}));
    EXPECT_EQ(d.train, (std::vector<std::size_t>{1, 2, 3, 5, 6, 7}));
    EXPECT_LT(r.dark_mean, 50.0 / 255.0);
    double bright = 0.0;
    for (const auto& ref : d.references) bright += ref.mean();
    EXPECT_GT(bright / 8.0, 2.0 * r.dark_mean);
}

TEST(Synth, TooBrightSceneIsRejected) {
    io::SynthSpec spec;
    spec.darkness_gamma = 1.0;
    try {
        io::synth(spec);
        FAIL() << "expected InvalidParameter";
    } catch (const InvalidParameter& e) {
        EXPECT_NE(std::string(e.what()).find("gamma"), std::string::npos) << e.what();
    }
    spec.n_views = 1;
    EXPECT_THROW(io::synth(spec), InvalidParameter);
}

TEST(Synth, LookAtBuildsAProperRotation) {
    const RigidTransform t = io::look_at(Vector3d(3, 0, 0), Vector3d::Zero());
    EXPECT_LT((t.rotation * t.rotation.transpose() - Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-14);
    // The target lands on the optical axis in front of the camera.
    const Vector3d c = t.apply(Vector3d::Zero());
    EXPECT_NEAR(c.x(), 0.0, 1e-14);
    EXPECT_NEAR(c.y(), 0.0, 1e-14);
    EXPECT_NEAR(c.z(), 3.0, 1e-14);
    // World up (+z) points toward image -y.
    EXPECT_LT(t.rotation.row(1).dot(Vector3d::UnitZ()), 0.0);
}
