// ddn: patch-based deformable registration pipeline.
//
// Subcommands cover the full workflow: extract training patch pairs from a
// volume pair, train the dense deformation network, register whole volumes
// with overlap-stitched tile inference, evaluate with CC/MI, synthesize
// Gaussian deformations, run the deform-and-register-back validation
// protocol, and render overlay/difference images.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ddn/errors.hpp"
#include "ddn/eval.hpp"
#include "ddn/gradcheck.hpp"
#include "ddn/infer.hpp"
#include "ddn/model.hpp"
#include "ddn/patches.hpp"
#include "ddn/threading.hpp"
#include "ddn/train.hpp"
#include "ddn/volume.hpp"
#include "ddn/warp.hpp"

namespace {

ddn::Axis parse_axis(const std::string& s) {
    if (s == "x" || s == "X") return ddn::Axis::X;
    if (s == "y" || s == "Y") return ddn::Axis::Y;
    if (s == "z" || s == "Z") return ddn::Axis::Z;
    throw ddn::config_error("axis must be one of x, y, z");
}

struct ExtractArgs {
    std::string src, tgt, out;
    std::size_t count = 2500;
    int patch_size = 32;
    double threshold = 0.1;
    ddn::EdgeParams edges;
    std::uint64_t seed = 0;
    bool no_normalize = false;
};

int cmd_extract(const ExtractArgs& a) {
    ddn::Volume3 src = ddn::load_volume(a.src);
    ddn::Volume3 tgt = ddn::load_volume(a.tgt);
    if (!a.no_normalize) {
        src = ddn::normalize_intensity(src);
        tgt = ddn::normalize_intensity(tgt);
    }
    const ddn::SampleResult result =
        ddn::sample_patch_pairs(src, tgt, a.edges, a.count, a.patch_size, a.threshold, a.seed);
    ddn::write_patch_dataset(result.set, a.out);
    std::cout << "accepted " << result.set.pairs.size() << " / " << a.count << " pairs\n";
    if (result.budget_exhausted)
        std::cerr << "warning: candidate budget exhausted before reaching the requested count\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, resume, log;
    ddn::TrainConfig train;
    ddn::DdnConfig model;
};

int cmd_train(const TrainArgs& a) {
    const ddn::PatchPairSet data = ddn::read_patch_dataset(a.data);

    ddn::DdnModel<float> model;
    ddn::AdamState state;
    if (!a.resume.empty()) {
        ddn::Checkpoint ckpt = ddn::load_checkpoint(a.resume);
        model = std::move(ckpt.model);
        if (ckpt.opt) state = std::move(*ckpt.opt);
    } else {
        ddn::DdnConfig cfg = a.model;
        cfg.patch_size = data.patch_size;
        model = ddn::build_ddn<float>(cfg, a.train.seed);
    }

    ddn::TrainConfig cfg = a.train;
    cfg.checkpoint_path = a.out;
    if (state.m.empty()) state = ddn::AdamState::zeros_like(model);
    const ddn::TrainLog log = ddn::train(model, data, cfg, &state);
    if (!a.log.empty()) ddn::write_train_log(log, a.log);
    if (!log.records.empty()) {
        const auto& last = log.records.back();
        std::cout << "step " << last.step << " sim " << last.similarity << " smooth "
                  << last.smoothness << " total " << last.total << "\n";
    }
    std::cout << "checkpoint written to " << a.out << "\n";
    return 0;
}

struct RegisterArgs {
    std::string model, src, tgt, out_field, out_warped;
    double overlap = 0.5;
    bool normalize = false;
};

int cmd_register(const RegisterArgs& a) {
    ddn::Checkpoint ckpt = ddn::load_checkpoint(a.model);
    ddn::Volume3 src = ddn::load_volume(a.src);
    ddn::Volume3 tgt = ddn::load_volume(a.tgt);
    if (a.normalize) {
        src = ddn::normalize_intensity(src);
        tgt = ddn::normalize_intensity(tgt);
    }
    const ddn::RegisterResult result = ddn::register_volume(ckpt.model, src, tgt, a.overlap);
    if (!a.out_field.empty()) ddn::save_field(result.field, a.out_field);
    if (!a.out_warped.empty()) ddn::save_volume(result.warped, a.out_warped);
    return 0;
}

struct EvalArgs {
    std::string a, b;
    int bins = 32;
};

int cmd_eval(const EvalArgs& args) {
    const ddn::Volume3 a = ddn::load_volume(args.a);
    const ddn::Volume3 b = ddn::load_volume(args.b);
    const double cc = ddn::global_ncc(a, b);
    const double mi = ddn::mutual_information(a, b, args.bins);
    std::cout << "cc=" << cc << " mi=" << mi << "\n";
    return 0;
}

struct SynthArgs {
    std::string in, out_field, out_warped;
    int grid = 16;
    double sigma = 3.0;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    const ddn::Volume3 vol = ddn::load_volume(a.in);
    const ddn::DisplacementField field =
        ddn::gaussian_deformation(vol.dx, vol.dy, vol.dz, a.grid, a.sigma, a.seed);
    if (!a.out_field.empty()) ddn::save_field(field, a.out_field);
    if (!a.out_warped.empty()) ddn::save_volume(ddn::warp_volume(vol, field), a.out_warped);
    return 0;
}

struct ValidateArgs {
    std::string model, vol, out;
    int grid = 16;
    double sigma = 3.0;
    std::uint64_t seed = 0;
    double overlap = 0.5;
    int bins = 32;
    bool normalize = false;
};

int cmd_validate(const ValidateArgs& a) {
    ddn::Checkpoint ckpt = ddn::load_checkpoint(a.model);
    ddn::Volume3 vol = ddn::load_volume(a.vol);
    if (a.normalize) vol = ddn::normalize_intensity(vol);
    const ddn::ValidationReport report =
        ddn::validation_run(ckpt.model, vol, a.grid, a.sigma, a.seed, a.overlap, a.bins);
    std::cout << report.csv() << "\n";
    if (!a.out.empty()) {
        std::ofstream f(a.out);
        if (!f) throw ddn::io_error("cannot open for writing: " + a.out);
        f << report.csv() << "\n";
    }
    return 0;
}

struct SliceArgs {
    std::string a, b, out;
    std::string axis = "z";
    int index = 0;
};

int cmd_diff(const SliceArgs& args) {
    const ddn::Volume3 a = ddn::load_volume(args.a);
    const ddn::Volume3 b = ddn::load_volume(args.b);
    if (!a.same_dims(b)) throw ddn::config_error("diff: volume dims differ");
    int w = 0, h = 0;
    const auto sa = ddn::extract_slice(a, parse_axis(args.axis), args.index, w, h);
    const auto sb = ddn::extract_slice(b, parse_axis(args.axis), args.index, w, h);
    ddn::write_pgm(ddn::difference_image(sa, sb, w, h), args.out);
    return 0;
}

int cmd_overlay(const SliceArgs& args) {
    const ddn::Volume3 tgt = ddn::load_volume(args.a);
    const ddn::Volume3 reg = ddn::load_volume(args.b);
    if (!tgt.same_dims(reg)) throw ddn::config_error("overlay: volume dims differ");
    int w = 0, h = 0;
    const auto st = ddn::extract_slice(tgt, parse_axis(args.axis), args.index, w, h);
    const auto sr = ddn::extract_slice(reg, parse_axis(args.axis), args.index, w, h);
    ddn::write_ppm(ddn::overlay_rg(st, sr, w, h), args.out);
    return 0;
}

struct GradcheckArgs {
    int size = 6;
    double eps = 1e-3;
    std::uint64_t seed = 12345;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const auto results = ddn::gradcheck_suite(a.size, a.eps, a.seed);
    bool ok = true;
    double worst = 0.0;
    for (const auto& r : results) {
        std::cout << (r.pass() ? "pass " : "FAIL ") << r.name << " max_rel_err=" << r.max_rel_err
                  << " (threshold " << r.threshold << ")\n";
        ok = ok && r.pass();
        worst = std::max(worst, r.max_rel_err);
    }
    std::cout << "max relative error: " << worst << "\n";
    return ok ? 0 : 3;
}

int cmd_info(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ddn::io_error("cannot open for reading: " + path);
    char magic[4] = {};
    f.read(magic, 4);
    if (f.gcount() != 4) throw ddn::format_error(path + ": truncated at byte offset 0");
    const std::string tag(magic, 4);
    f.close();

    if (tag == "DDNV") {
        const ddn::Volume3 v = ddn::load_volume(path);
        std::cout << "DDNV volume " << v.dx << "x" << v.dy << "x" << v.dz << " spacing " << v.sx
                  << "x" << v.sy << "x" << v.sz << "\n";
    } else if (tag == "DDNF") {
        const ddn::DisplacementField field = ddn::load_field(path);
        std::cout << "DDNF field " << field.dx << "x" << field.dy << "x" << field.dz << "\n";
    } else if (tag == "DDNP") {
        const ddn::PatchPairSet set = ddn::read_patch_dataset(path);
        std::cout << "DDNP dataset patch_size " << set.patch_size << " pairs " << set.pairs.size()
                  << "\n";
    } else if (tag == "DDNC") {
        const ddn::Checkpoint ckpt = ddn::load_checkpoint(path);
        std::cout << "DDNC checkpoint config " << ddn::config_to_json(ckpt.model.config)
                  << " trainable params " << ckpt.model.count_params()
                  << (ckpt.opt ? " (with optimizer state, step " + std::to_string(ckpt.opt->step) + ")"
                               : " (no optimizer state)")
                  << "\n";
    } else {
        throw ddn::format_error(path + ": bad magic at byte offset 0");
    }
    return 0;
}

void add_model_flags(CLI::App* cmd, ddn::DdnConfig& cfg) {
    cmd->add_option("--units", cfg.units_per_block, "Units per dense block");
    cmd->add_option("--growth", cfg.growth, "Channels added per unit");
    cmd->add_option("--kernel", cfg.kernel, "Conv kernel size (odd)");
    cmd->add_option("--base", cfg.base_channels, "Stem output channels");
    cmd->add_option("--leaky-slope", cfg.leaky_slope, "LeakyReLU negative slope");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ddn: unsupervised patch-based deformable 3D registration"};
    app.require_subcommand(1);

    int threads = 0;
    bool deterministic = false;
    if (const char* env = std::getenv("DDN_THREADS")) threads = std::atoi(env);
    app.add_option("--threads", threads, "Worker thread cap (env DDN_THREADS)");
    app.add_flag("--deterministic", deterministic,
                 "Fixed-order reductions (results are reproducible in either mode)");

    ExtractArgs ex;
    auto* cmd_ex = app.add_subcommand("extract", "Sample informative patch pairs to a DDNP file");
    cmd_ex->add_option("--src", ex.src, "Source volume (.ddnv)")->required();
    cmd_ex->add_option("--tgt", ex.tgt, "Target volume (.ddnv)")->required();
    cmd_ex->add_option("--out", ex.out, "Output dataset (.ddnp)")->required();
    cmd_ex->add_option("--count", ex.count, "Pairs to accept");
    cmd_ex->add_option("--patch-size", ex.patch_size, "Cubic patch edge");
    cmd_ex->add_option("--threshold", ex.threshold, "Min edge informativeness (both patches)");
    cmd_ex->add_option("--t-low", ex.edges.t_low, "Hysteresis low threshold");
    cmd_ex->add_option("--t-high", ex.edges.t_high, "Hysteresis high threshold");
    cmd_ex->add_option("--seed", ex.seed, "Sampling seed");
    cmd_ex->add_flag("--no-normalize", ex.no_normalize, "Skip intensity normalization");

    TrainArgs tr;
    auto* cmd_tr = app.add_subcommand("train", "Train the network on a DDNP dataset");
    cmd_tr->add_option("--data", tr.data, "Training dataset (.ddnp)")->required();
    cmd_tr->add_option("--out", tr.out, "Output checkpoint (.ddnc)")->required();
    cmd_tr->add_option("--resume", tr.resume, "Resume from checkpoint");
    cmd_tr->add_option("--steps", tr.train.steps, "Optimization steps");
    cmd_tr->add_option("--batch", tr.train.batch_size, "Minibatch size");
    cmd_tr->add_option("--lr", tr.train.adam.learning_rate, "Learning rate");
    cmd_tr->add_option("--beta1", tr.train.adam.beta1, "Adam beta1");
    cmd_tr->add_option("--beta2", tr.train.adam.beta2, "Adam beta2");
    cmd_tr->add_option("--adam-eps", tr.train.adam.eps, "Adam epsilon");
    cmd_tr->add_option("--lambda", tr.train.loss.lambda_smooth, "Smoothness weight");
    cmd_tr->add_option("--window", tr.train.loss.cc_window, "CC window size (odd)");
    cmd_tr->add_option("--cc-eps", tr.train.loss.eps, "CC denominator floor");
    cmd_tr->add_flag("--global-cc", tr.train.loss.global_cc, "Whole-patch CC instead of windows");
    cmd_tr->add_option("--seed", tr.train.seed, "Shuffle/init seed");
    cmd_tr->add_option("--checkpoint-every", tr.train.checkpoint_every,
                       "Also write the checkpoint every N steps");
    cmd_tr->add_option("--log", tr.log, "Training log CSV path");
    add_model_flags(cmd_tr, tr.model);

    RegisterArgs rg;
    auto* cmd_rg = app.add_subcommand("register", "Register src onto tgt with a trained model");
    cmd_rg->add_option("--model", rg.model, "Checkpoint (.ddnc)")->required();
    cmd_rg->add_option("--src", rg.src, "Moving volume (.ddnv)")->required();
    cmd_rg->add_option("--tgt", rg.tgt, "Fixed volume (.ddnv)")->required();
    cmd_rg->add_option("--out-field", rg.out_field, "Output displacement field (.ddnf)");
    cmd_rg->add_option("--out-warped", rg.out_warped, "Output warped volume (.ddnv)");
    cmd_rg->add_option("--overlap", rg.overlap, "Tile overlap fraction [0, 0.9]");
    cmd_rg->add_flag("--normalize", rg.normalize, "Normalize intensities first");

    EvalArgs ev;
    auto* cmd_ev = app.add_subcommand("eval", "Print cc/mi between two volumes");
    cmd_ev->add_option("--a", ev.a, "First volume")->required();
    cmd_ev->add_option("--b", ev.b, "Second volume")->required();
    cmd_ev->add_option("--bins", ev.bins, "MI histogram bins");

    SynthArgs sy;
    auto* cmd_sy = app.add_subcommand("synth", "Apply a random Gaussian deformation");
    cmd_sy->add_option("--in", sy.in, "Input volume (.ddnv)")->required();
    cmd_sy->add_option("--grid", sy.grid, "Control grid spacing (voxels)");
    cmd_sy->add_option("--sigma", sy.sigma, "Displacement stddev (voxels)");
    cmd_sy->add_option("--seed", sy.seed, "Field seed");
    cmd_sy->add_option("--out-field", sy.out_field, "Output field (.ddnf)");
    cmd_sy->add_option("--out-warped", sy.out_warped, "Output deformed volume (.ddnv)");

    ValidateArgs va;
    auto* cmd_va = app.add_subcommand("validate",
                                      "Deform, register back, report cc/mi before and after");
    cmd_va->add_option("--model", va.model, "Checkpoint (.ddnc)")->required();
    cmd_va->add_option("--vol", va.vol, "Volume (.ddnv)")->required();
    cmd_va->add_option("--grid", va.grid, "Control grid spacing");
    cmd_va->add_option("--sigma", va.sigma, "Displacement stddev");
    cmd_va->add_option("--seed", va.seed, "Field seed");
    cmd_va->add_option("--overlap", va.overlap, "Tile overlap fraction");
    cmd_va->add_option("--bins", va.bins, "MI histogram bins");
    cmd_va->add_option("--out", va.out, "Also write the CSV line here");
    cmd_va->add_flag("--normalize", va.normalize, "Normalize intensities first");

    SliceArgs df;
    auto* cmd_df = app.add_subcommand("diff", "Triangular difference image of two volume slices");
    cmd_df->add_option("--a", df.a, "First volume")->required();
    cmd_df->add_option("--b", df.b, "Second volume")->required();
    cmd_df->add_option("--axis", df.axis, "Slice axis (x|y|z)");
    cmd_df->add_option("--index", df.index, "Slice index")->required();
    cmd_df->add_option("--out", df.out, "Output PGM")->required();

    SliceArgs ov;
    auto* cmd_ov = app.add_subcommand("overlay", "Red/green overlay of two volume slices");
    cmd_ov->add_option("--tgt", ov.a, "Target volume (red)")->required();
    cmd_ov->add_option("--reg", ov.b, "Registered volume (green)")->required();
    cmd_ov->add_option("--axis", ov.axis, "Slice axis (x|y|z)");
    cmd_ov->add_option("--index", ov.index, "Slice index")->required();
    cmd_ov->add_option("--out", ov.out, "Output PPM")->required();

    GradcheckArgs gc;
    auto* cmd_gc = app.add_subcommand("gradcheck", "Finite-difference check of every op (f64)");
    cmd_gc->add_option("--size", gc.size, "Spatial extent of test tensors");
    cmd_gc->add_option("--eps", gc.eps, "Finite-difference step");
    cmd_gc->add_option("--seed", gc.seed, "Input seed");

    std::string info_path;
    auto* cmd_in = app.add_subcommand("info", "Inspect a DDNV/DDNF/DDNP/DDNC file header");
    cmd_in->add_option("--file", info_path, "File to inspect")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    ddn::set_threads(threads);
    (void)deterministic; // reductions are fixed-order in both modes

    try {
        if (app.got_subcommand(cmd_ex)) return cmd_extract(ex);
        if (app.got_subcommand(cmd_tr)) return cmd_train(tr);
        if (app.got_subcommand(cmd_rg)) return cmd_register(rg);
        if (app.got_subcommand(cmd_ev)) return cmd_eval(ev);
        if (app.got_subcommand(cmd_sy)) return cmd_synth(sy);
        if (app.got_subcommand(cmd_va)) return cmd_validate(va);
        if (app.got_subcommand(cmd_df)) return cmd_diff(df);
        if (app.got_subcommand(cmd_ov)) return cmd_overlay(ov);
        if (app.got_subcommand(cmd_gc)) return cmd_gradcheck(gc);
        if (app.got_subcommand(cmd_in)) return cmd_info(info_path);
    } catch (const ddn::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const ddn::format_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const ddn::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const ddn::config_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
