// llgs command-line front end: synth, train, render, eval, export-ply.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "llgs/io/checkpoint.hpp"
#include "llgs/io/ply.hpp"
#include "llgs/io/scene_json.hpp"
#include "llgs/io/synth.hpp"
#include "llgs/training.hpp"

namespace fs = std::filesystem;
using namespace llgs;

namespace {

constexpr int kUsageError = 2;

std::string view_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%03zu.png", index);
    return buf;
}

std::vector<std::size_t> split_indices(const io::Dataset& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "test") return d.test;
    std::vector<std::size_t> all(d.views.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
}

struct SynthArgs {
    std::string out;
    io::SynthSpec spec;
};

struct TrainArgs {
    std::string data;
    std::string out;
    TrainConfig cfg;
    LossConfig loss;
    PreprocessConfig pre;
    bool no_preprocess = false;
    bool no_gradient_loss = false;
    long densify_until = -1;
    long checkpoint_every = 0;
    std::size_t colmap_holdout = 8;
    bool quiet = false;
};

struct RenderArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::string mode = "enhanced";
    std::string split = "all";
    bool relow = false;
    int threads = default_thread_count();
};

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    std::string mode = "enhanced";
    std::string split = "test";
    int threads = default_thread_count();
};

struct PlyArgs {
    std::string checkpoint;
    std::string out;
};

int run_synth(const SynthArgs& a) {
    auto res = io::synth(a.spec);
    io::save_dataset(a.out, res.dataset);
    std::cout << "wrote " << res.dataset.views.size() << " views (" << res.dataset.test.size()
              << " held out) to " << a.out << "; mean dark intensity " << res.dark_mean * 255.0 << "/255\n";
    return 0;
}

int run_train(TrainArgs a) {
    io::Dataset d = io::load_dataset(a.data, {}, a.colmap_holdout);
    a.pre.enabled = !a.no_preprocess;
    a.cfg.disable_preprocess = a.no_preprocess;
    a.cfg.disable_gradient_loss = a.no_gradient_loss;
    a.cfg.densify_until = a.densify_until >= 0 ? a.densify_until : a.cfg.iterations / 2;
    a.cfg.densify_until = std::min(a.cfg.densify_until, a.cfg.iterations);
    io::apply_preprocess(d, a.pre);
    if (d.points.empty()) throw InvalidParameter("train: dataset has no init points");

    const auto views = d.select(d.train);
    const auto points = d.point_positions();
    fs::create_directories(a.out);
    std::ofstream log(fs::path(a.out) / "log.csv");
    if (!log) throw IoError("cannot write " + (fs::path(a.out) / "log.csv").string());
    log << "iteration,l_image,l_color,l_grad,total,gaussian_count\n";
    log.precision(10);

    const auto progress = [&](const TrainState& s, const IterationLog& l) {
        log << l.iteration << ',' << l.l_image << ',' << l.l_color << ',' << l.l_grad << ',' << l.total << ','
            << l.gaussian_count << '\n';
        if (a.checkpoint_every > 0 && l.iteration % a.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof(name), "checkpoint_%06ld.llgs", l.iteration);
            io::save_checkpoint(fs::path(a.out) / name, io::make_checkpoint(s, a.cfg, a.loss, a.pre));
        }
        if (!a.quiet && (l.iteration % 100 == 0 || l.iteration == a.cfg.iterations))
            std::cout << "iter " << l.iteration << "  total " << l.total << "  gaussians " << l.gaussian_count
                      << std::endl;
    };
    const TrainState s = train(a.cfg, a.loss, views, points, d.bounds, progress);
    io::save_checkpoint(fs::path(a.out) / "checkpoint.llgs", io::make_checkpoint(s, a.cfg, a.loss, a.pre));
    std::cout << "trained " << s.iteration << " iterations, " << s.cloud.size() << " Gaussians -> " << a.out << '\n';
    return 0;
}

RenderMode parse_mode(const std::string& m) { return m == "raw" ? RenderMode::raw : RenderMode::enhanced; }

int run_render(const RenderArgs& a) {
    const io::Checkpoint ck = io::load_checkpoint(a.checkpoint);
    const io::Dataset d = io::load_dataset(a.data, {.load_images = false});
    const RenderMode mode = parse_mode(a.mode);
    fs::create_directories(a.out);
    for (std::size_t i : split_indices(d, a.split)) {
        const auto out = render(ck.cloud, ck.nets, d.views[i], {mode, ck.train.background, a.threads});
        Image img = mode == RenderMode::raw ? out.image_raw : out.image_enhanced;
        if (a.relow) img = inverse_gamma(img, ck.preprocess);
        io::write_png(fs::path(a.out) / view_file_name(i), img, 8);
    }
    return 0;
}

int run_eval(const EvalArgs& a) {
    const io::Checkpoint ck = io::load_checkpoint(a.checkpoint);
    const io::Dataset d = io::load_dataset(a.data);
    const auto idx = split_indices(d, a.split);
    for (std::size_t i : idx)
        if (d.references[i].empty()) throw InvalidParameter("eval: view " + std::to_string(i) + " has no reference image");
    const auto rep = evaluate(ck.cloud, ck.nets, d.select(idx), d.select_references(idx), parse_mode(a.mode),
                              ck.train.background, a.threads);

    std::ofstream file;
    if (!a.out.empty()) {
        file.open(a.out);
        if (!file) throw IoError("cannot write " + a.out);
    }
    std::ostream& os = a.out.empty() ? std::cout : file;
    os.precision(8);
    os << "view,psnr,ssim,mean_intensity\n";
    for (const auto& m : rep.views) os << idx[m.view] << ',' << m.psnr << ',' << m.ssim << ',' << m.mean_intensity << '\n';
    os << "mean," << rep.mean_psnr << ',' << rep.mean_ssim << ',' << rep.mean_intensity << '\n';
    return 0;
}

int run_export(const PlyArgs& a) {
    const io::Checkpoint ck = io::load_checkpoint(a.checkpoint);
    io::export_ply(ck.cloud, ck.nets, a.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-light Gaussian splatting: synthesize, train, render, evaluate, export"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic low-light dataset");
    synth->add_option("out", sa.out, "Output directory")->required();
    synth->add_option("--seed", sa.spec.seed);
    synth->add_option("--n-gaussians", sa.spec.n_gaussians);
    synth->add_option("--n-views", sa.spec.n_views);
    synth->add_option("--resolution", sa.spec.resolution);
    synth->add_option("--darkness-gamma", sa.spec.darkness_gamma);
    synth->add_option("--noise", sa.spec.noise_sigma);
    synth->add_option("--holdout-every", sa.spec.holdout_every);

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train on a dataset directory");
    tr->add_option("data", ta.data, "Dataset directory (scene.json or COLMAP text)")->required();
    tr->add_option("out", ta.out, "Output directory")->required();
    tr->add_option("--iterations", ta.cfg.iterations);
    tr->add_option("--seed", ta.cfg.seed);
    tr->add_option("--threads", ta.cfg.threads);
    tr->add_option("--lr-position-init", ta.cfg.lr.position_init);
    tr->add_option("--lr-position-final", ta.cfg.lr.position_final);
    tr->add_option("--lr-rotation", ta.cfg.lr.rotation);
    tr->add_option("--lr-scale", ta.cfg.lr.scale);
    tr->add_option("--lr-opacity", ta.cfg.lr.opacity);
    tr->add_option("--lr-nets", ta.cfg.lr.nets);
    tr->add_option("--densify-interval", ta.cfg.densify_interval);
    tr->add_option("--densify-grad-threshold", ta.cfg.densify_grad_threshold);
    tr->add_option("--densify-from", ta.cfg.densify_from);
    tr->add_option("--densify-until", ta.densify_until, "Defaults to half the iterations");
    tr->add_option("--prune-opacity", ta.cfg.prune_opacity);
    tr->add_option("--percent-dense", ta.cfg.percent_dense);
    tr->add_option("--max-gaussians", ta.cfg.max_gaussians);
    tr->add_option("--warmup", ta.cfg.warmup);
    tr->add_option("--init-opacity", ta.cfg.init_opacity);
    tr->add_option("--e", ta.loss.e, "Gray-world target level");
    tr->add_option("--lambda1", ta.loss.lambda1);
    tr->add_option("--beta1", ta.loss.beta1);
    tr->add_option("--lambda2", ta.loss.lambda2);
    tr->add_option("--lambda-ssim", ta.loss.lambda_ssim);
    tr->add_option("--w-color", ta.loss.w_color);
    tr->add_option("--w-grad", ta.loss.w_grad);
    tr->add_option("--preprocess-a", ta.pre.gain, "Gain A of the input power law");
    tr->add_option("--preprocess-gamma", ta.pre.gamma_pre, "Exponent of the input power law");
    tr->add_flag("--no-preprocess", ta.no_preprocess, "Train on the raw dark inputs");
    tr->add_flag("--no-gradient-loss", ta.no_gradient_loss, "Drop the Sobel structure loss");
    tr->add_option("--checkpoint-every", ta.checkpoint_every, "Write a numbered checkpoint every N iterations");
    tr->add_option("--colmap-holdout", ta.colmap_holdout, "Hold out every N-th COLMAP image for testing");
    tr->add_flag("--quiet", ta.quiet);

    RenderArgs ra;
    auto* rd = app.add_subcommand("render", "Render dataset poses from a checkpoint");
    rd->add_option("checkpoint", ra.checkpoint)->required()->check(CLI::ExistingFile);
    rd->add_option("data", ra.data, "Dataset providing the poses")->required();
    rd->add_option("out", ra.out, "Output directory")->required();
    rd->add_option("--mode", ra.mode)->check(CLI::IsMember({"raw", "enhanced"}));
    rd->add_option("--split", ra.split)->check(CLI::IsMember({"all", "train", "test"}));
    rd->add_flag("--relow", ra.relow, "Map the render back to low light with the inverse input power law");
    rd->add_option("--threads", ra.threads);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "PSNR/SSIM of renders against reference images (CSV)");
    ev->add_option("checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
    ev->add_option("data", ea.data, "Dataset with reference images")->required();
    ev->add_option("--out", ea.out, "CSV path (stdout when omitted)");
    ev->add_option("--mode", ea.mode)->check(CLI::IsMember({"raw", "enhanced"}));
    ev->add_option("--split", ea.split)->check(CLI::IsMember({"all", "train", "test"}));
    ev->add_option("--threads", ea.threads);

    PlyArgs pa;
    auto* ply = app.add_subcommand("export-ply", "Write the Gaussians with baked material colors as PLY");
    ply->add_option("checkpoint", pa.checkpoint)->required()->check(CLI::ExistingFile);
    ply->add_option("out", pa.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << e.what() << "\n\n" << app.help();
        return kUsageError;
    }

    try {
        if (*synth) return run_synth(sa);
        if (*tr) return run_train(ta);
        if (*rd) return run_render(ra);
        if (*ev) return run_eval(ea);
        if (*ply) return run_export(pa);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kUsageError;
}
