#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace llgs {

// Error hierarchy. Everything thrown by the library derives from llgs::Error.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidParameter : Error {
    using Error::Error;
};
struct InvalidState : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};

/// Row-major H x W x C image of doubles, nominally in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
        if (w < 0 || h < 0 || c < 0) throw InvalidParameter("Image: negative dimension");
    }

    [[nodiscard]] bool empty() const noexcept { return data.empty(); }
    [[nodiscard]] std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width) * height;
    }
    [[nodiscard]] std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    double& at(int x, int y, int c = 0) noexcept { return data[index(x, y, c)]; }
    [[nodiscard]] double at(int x, int y, int c = 0) const noexcept { return data[index(x, y, c)]; }

    [[nodiscard]] bool same_shape(const Image& o) const noexcept {
        return width == o.width && height == o.height && channels == o.channels;
    }
    [[nodiscard]] double mean() const noexcept {
        if (data.empty()) return 0.0;
        double s = 0.0;
        for (double v : data) s += v;
        return s / static_cast<double>(data.size());
    }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) throw InvalidParameter(std::string(what) + ": image shape mismatch");
}

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) noexcept { return std::log(p / (1.0 - p)); }

inline double softplus(double x) noexcept {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double inverse_softplus(double y) noexcept {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

inline bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Number of worker threads used by default for tile-parallel work.
inline int default_thread_count() noexcept {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work items are
/// handed out in contiguous blocks; callers that need deterministic results
/// write into per-item buffers and reduce them afterwards in index order.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < count; i += workers) body(i);
        });
    }
}

}  // namespace llgs
