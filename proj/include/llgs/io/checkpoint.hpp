#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>

#include "llgs/losses.hpp"
#include "llgs/mcolor.hpp"
#include "llgs/preprocess.hpp"
#include "llgs/training.hpp"

namespace llgs::io {

inline constexpr char kCheckpointMagic[8] = {'L', 'L', 'G', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    long iteration = 0;
    TrainConfig train;
    LossConfig loss;
    PreprocessConfig preprocess;
    GaussianCloud cloud;
    MColorNets nets;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

class Writer {
public:
    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void put(bool b) { put<std::uint8_t>(b ? 1 : 0); }
    template <typename Derived>
    void put_dense(const Eigen::DenseBase<Derived>& m) {
        put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) put<double>(m(r, c));
    }
    void raw(const char* p, std::size_t n) { out_.append(p, n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    bool get_bool() {
        const auto b = get<std::uint8_t>();
        if (b > 1) throw IoError("checkpoint: corrupt boolean");
        return b == 1;
    }
    MatrixXd get_dense() {
        const auto rows = get<std::uint64_t>();
        const auto cols = get<std::uint64_t>();
        if (rows > (1u << 20) || cols > (1u << 20) || rows * cols * sizeof(double) > bytes_.size() - pos_)
            throw IoError("checkpoint: corrupt tensor shape");
        MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = get<double>();
        return m;
    }
    template <int N>
    Eigen::Matrix<double, N, 1> get_vec() {
        const MatrixXd m = get_dense();
        if (m.rows() != N || m.cols() != 1) throw IoError("checkpoint: unexpected vector length");
        return m;
    }
    void expect(const char* p, std::size_t n) {
        need(n);
        if (std::memcmp(bytes_.data() + pos_, p, n) != 0) throw IoError("checkpoint: bad magic");
        pos_ += n;
    }
    [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

inline void put_mlp(Writer& w, const MlpParams& p) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.layers.size()));
    for (const auto& l : p.layers) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l.activation));
        w.put_dense(l.weight);
        w.put_dense(l.bias);
    }
}

inline MlpParams get_mlp(Reader& r) {
    MlpParams p;
    const auto n = r.get<std::uint32_t>();
    if (n > 64) throw IoError("checkpoint: corrupt layer count");
    for (std::uint32_t i = 0; i < n; ++i) {
        Layer l;
        const auto a = r.get<std::uint8_t>();
        if (a > static_cast<std::uint8_t>(Activation::linear)) throw IoError("checkpoint: unknown activation");
        l.activation = static_cast<Activation>(a);
        l.weight = r.get_dense();
        const MatrixXd b = r.get_dense();
        if (b.cols() != 1) throw IoError("checkpoint: bias must be a column");
        l.bias = b.col(0);
        p.layers.push_back(std::move(l));
    }
    p.validate();
    return p;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    detail::Writer w;
    w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.put<std::uint32_t>(ck.version);
    w.put<std::int64_t>(ck.iteration);

    const TrainConfig& t = ck.train;
    w.put<std::int64_t>(t.iterations);
    for (double v : {t.lr.position_init, t.lr.position_final, t.lr.rotation, t.lr.scale, t.lr.opacity, t.lr.nets})
        w.put(v);
    w.put<std::int64_t>(t.densify_interval);
    w.put(t.densify_grad_threshold);
    w.put(t.prune_opacity);
    w.put<std::int64_t>(t.densify_from);
    w.put<std::int64_t>(t.densify_until);
    w.put(t.percent_dense);
    w.put<std::uint64_t>(t.max_gaussians);
    w.put<std::int64_t>(t.warmup);
    w.put(t.disable_preprocess);
    w.put(t.disable_gradient_loss);
    w.put<std::uint64_t>(t.seed);
    w.put(t.init_opacity);
    w.put_dense(t.background);

    const LossConfig& l = ck.loss;
    for (double v : {l.e, l.lambda1, l.beta1, l.lambda2, l.lambda_ssim, l.w_color, l.w_grad}) w.put(v);

    w.put(ck.preprocess.gain);
    w.put(ck.preprocess.gamma_pre);
    w.put(ck.preprocess.enabled);

    w.put<std::uint64_t>(ck.cloud.size());
    for (const auto& g : ck.cloud) {
        for (int i = 0; i < 3; ++i) w.put(g.position[i]);
        for (int i = 0; i < 4; ++i) w.put(g.rotation[i]);
        for (int i = 0; i < 3; ++i) w.put(g.log_scale[i]);
        w.put(g.opacity_logit);
    }

    const MColorNets& n = ck.nets;
    for (const MlpParams* p : {&n.feature_net, &n.light_net, &n.color_net, &n.enhance_net}) detail::put_mlp(w, *p);
    w.put(n.gamma0);
    w.put_dense(n.bounds.min);
    w.put_dense(n.bounds.max);
    w.put(n.pin.has_value());
    if (n.pin) {
        w.put_dense(n.pin->gamma);
        w.put_dense(n.pin->mu);
    }
    return w.take();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    detail::Reader r(bytes);
    r.expect(kCheckpointMagic, sizeof(kCheckpointMagic));
    Checkpoint ck;
    ck.version = r.get<std::uint32_t>();
    if (ck.version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(ck.version));
    ck.iteration = static_cast<long>(r.get<std::int64_t>());

    TrainConfig& t = ck.train;
    t.iterations = static_cast<long>(r.get<std::int64_t>());
    for (double* v : {&t.lr.position_init, &t.lr.position_final, &t.lr.rotation, &t.lr.scale, &t.lr.opacity, &t.lr.nets})
        *v = r.get<double>();
    t.densify_interval = static_cast<long>(r.get<std::int64_t>());
    t.densify_grad_threshold = r.get<double>();
    t.prune_opacity = r.get<double>();
    t.densify_from = static_cast<long>(r.get<std::int64_t>());
    t.densify_until = static_cast<long>(r.get<std::int64_t>());
    t.percent_dense = r.get<double>();
    t.max_gaussians = static_cast<std::size_t>(r.get<std::uint64_t>());
    t.warmup = static_cast<long>(r.get<std::int64_t>());
    t.disable_preprocess = r.get_bool();
    t.disable_gradient_loss = r.get_bool();
    t.seed = r.get<std::uint64_t>();
    t.init_opacity = r.get<double>();
    t.background = r.get_vec<3>();

    LossConfig& l = ck.loss;
    for (double* v : {&l.e, &l.lambda1, &l.beta1, &l.lambda2, &l.lambda_ssim, &l.w_color, &l.w_grad}) *v = r.get<double>();

    ck.preprocess.gain = r.get<double>();
    ck.preprocess.gamma_pre = r.get<double>();
    ck.preprocess.enabled = r.get_bool();

    const auto count = r.get<std::uint64_t>();
    if (count > bytes.size() / (11 * sizeof(double))) throw IoError("checkpoint: corrupt Gaussian count");
    ck.cloud.resize(static_cast<std::size_t>(count));
    for (auto& g : ck.cloud) {
        for (int i = 0; i < 3; ++i) g.position[i] = r.get<double>();
        for (int i = 0; i < 4; ++i) g.rotation[i] = r.get<double>();
        for (int i = 0; i < 3; ++i) g.log_scale[i] = r.get<double>();
        g.opacity_logit = r.get<double>();
    }

    MColorNets& n = ck.nets;
    for (MlpParams* p : {&n.feature_net, &n.light_net, &n.color_net, &n.enhance_net}) *p = detail::get_mlp(r);
    n.gamma0 = r.get<double>();
    n.bounds.min = r.get_vec<3>();
    n.bounds.max = r.get_vec<3>();
    if (r.get_bool()) n.pin = EnhancePin{r.get_vec<3>(), r.get_vec<3>()};
    if (!r.done()) throw IoError("checkpoint: trailing bytes");
    n.validate();
    return ck;
}

inline Checkpoint make_checkpoint(const TrainState& s, const TrainConfig& cfg, const LossConfig& loss,
                                  const PreprocessConfig& pre) {
    Checkpoint ck;
    ck.iteration = s.iteration;
    ck.train = cfg;
    ck.loss = loss;
    ck.preprocess = pre;
    ck.cloud = s.cloud;
    ck.nets = s.nets;
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const std::string bytes = encode_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace llgs::io
