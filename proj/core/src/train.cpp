#include "ddn/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ddn/binio.hpp"
#include "ddn/random.hpp"

namespace ddn {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

AdamState AdamState::zeros_like(const DdnModel<float>& model) {
    AdamState st;
    st.m.reserve(model.params.size());
    st.v.reserve(model.params.size());
    for (const auto& p : model.params) {
        st.m.emplace_back(p.value.shape);
        st.v.emplace_back(p.value.shape);
    }
    return st;
}

void adam_step(DdnModel<float>& model, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != model.params.size() || state.v.size() != model.params.size())
        throw config_error("adam_step: state/model parameter count mismatch");
    state.step += 1;
    const double t = double(state.step);
    const double bc1 = 1.0 - std::pow(double(cfg.beta1), t);
    const double bc2 = 1.0 - std::pow(double(cfg.beta2), t);

    for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
        auto& p = model.params[pi];
        if (!p.trainable) continue;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const float g = p.grad.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0f - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0f - cfg.beta2) * g * g;
            const double mhat = double(m.data[i]) / bc1;
            const double vhat = double(v.data[i]) / bc2;
            p.value.data[i] -= float(double(cfg.learning_rate) * mhat /
                                     (std::sqrt(vhat) + double(cfg.eps)));
        }
    }
}

namespace {

// epoch permutation derived from (seed, epoch) only, so the schedule is a
// pure function of the global step
std::vector<std::uint32_t> epoch_permutation(std::uint64_t seed, std::int64_t epoch,
                                             std::size_t n) {
    std::uint64_t mix = seed;
    splitmix64(mix);
    mix ^= 0x9e3779b97f4a7c15ULL * std::uint64_t(epoch + 1);
    Rng rng(mix);
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::size_t(rng.uniform_index(i));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

Tensor5<float> gather_batch(const PatchPairSet& data, const std::vector<std::uint32_t>& perm,
                            std::size_t first, int batch, bool source_side) {
    const int p = data.patch_size;
    Tensor5<float> out({batch, 1, p, p, p});
    const std::size_t voxels = std::size_t(p) * p * p;
    for (int b = 0; b < batch; ++b) {
        const auto& pair = data.pairs[perm[first + std::size_t(b)]];
        const auto& vals = source_side ? pair.src : pair.tgt;
        std::copy(vals.begin(), vals.end(), out.data.begin() + std::size_t(b) * voxels);
    }
    return out;
}

} // namespace

TrainLog train(DdnModel<float>& model, const PatchPairSet& data, const TrainConfig& cfg,
               AdamState* state) {
    if (data.pairs.empty()) throw config_error("train: empty dataset");
    if (data.patch_size != model.config.patch_size)
        throw config_error("train: dataset patch size " + std::to_string(data.patch_size) +
                           " does not match model patch size " +
                           std::to_string(model.config.patch_size));
    if (cfg.batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (std::size_t(cfg.batch_size) > data.pairs.size())
        throw config_error("train: batch_size exceeds dataset size");
    cfg.loss.validate();

    AdamState local;
    AdamState& opt = state ? *state : local;
    if (opt.m.empty()) opt = AdamState::zeros_like(model);

    const std::size_t steps_per_epoch = data.pairs.size() / std::size_t(cfg.batch_size);
    TrainLog log;
    log.records.reserve(std::size_t(std::max(cfg.steps, 0)));

    std::int64_t cached_epoch = -1;
    std::vector<std::uint32_t> perm;

    for (int local_step = 0; local_step < cfg.steps; ++local_step) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::int64_t global = opt.step; // steps completed so far
        const std::int64_t epoch = global / std::int64_t(steps_per_epoch);
        const std::size_t pos =
            std::size_t(global % std::int64_t(steps_per_epoch)) * std::size_t(cfg.batch_size);
        if (epoch != cached_epoch) {
            perm = epoch_permutation(cfg.seed, epoch, data.pairs.size());
            cached_epoch = epoch;
        }

        Graph<float> g;
        const auto src = g.input(gather_batch(data, perm, pos, cfg.batch_size, true));
        const auto tgt = g.input(gather_batch(data, perm, pos, cfg.batch_size, false));
        const auto flows = ddn_forward(g, model, src, tgt, RunMode::train);
        const auto loss = total_loss(g, src, tgt, flows.fused_flow, cfg.loss);

        model.zero_grads();
        g.backward(loss.total);
        adam_step(model, opt, cfg.adam);

        const auto t1 = std::chrono::steady_clock::now();
        TrainRecord rec;
        rec.step = opt.step;
        rec.similarity = double(g.scalar_val(loss.similarity));
        rec.smoothness = double(g.scalar_val(loss.smooth));
        rec.total = double(g.scalar_val(loss.total));
        rec.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        log.records.push_back(rec);

        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            (local_step + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(model, &opt, cfg.checkpoint_path);
    }

    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, &opt, cfg.checkpoint_path);
    return log;
}

void write_train_log(const TrainLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "step,sim,smooth,total,ms\n";
    for (const auto& r : log.records)
        out << r.step << "," << r.similarity << "," << r.smoothness << "," << r.total << ","
            << r.ms << "\n";
    if (!out) throw io_error("write failed: " + path);
}

std::string config_to_json(const DdnConfig& cfg) {
    nlohmann::json j;
    j["patch_size"] = cfg.patch_size;
    j["units_per_block"] = cfg.units_per_block;
    j["growth"] = cfg.growth;
    j["kernel"] = cfg.kernel;
    j["leaky_slope"] = cfg.leaky_slope;
    j["base_channels"] = cfg.base_channels;
    j["bn_momentum"] = cfg.bn_momentum;
    j["bn_eps"] = cfg.bn_eps;
    return j.dump();
}

DdnConfig config_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw format_error("checkpoint config is not valid JSON");
    DdnConfig cfg;
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.units_per_block = j.at("units_per_block").get<int>();
    cfg.growth = j.at("growth").get<int>();
    cfg.kernel = j.at("kernel").get<int>();
    cfg.leaky_slope = j.at("leaky_slope").get<float>();
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.bn_momentum = j.at("bn_momentum").get<float>();
    cfg.bn_eps = j.at("bn_eps").get<float>();
    return cfg;
}

namespace {

void write_tensor(BinWriter& out, const std::string& name, const Tensor5<float>& t) {
    out.u16(std::uint16_t(name.size()));
    out.bytes(name.data(), name.size());
    out.u8(5);
    out.u32(std::uint32_t(t.shape.n));
    out.u32(std::uint32_t(t.shape.c));
    out.u32(std::uint32_t(t.shape.d));
    out.u32(std::uint32_t(t.shape.h));
    out.u32(std::uint32_t(t.shape.w));
    out.f32_array(t.data.data(), t.data.size());
}

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

NamedTensor read_tensor(BinReader& in) {
    NamedTensor t;
    const std::uint16_t len = in.u16();
    t.name.resize(len);
    in.bytes(t.name.data(), len);
    const std::uint8_t ndim = in.u8();
    t.dims.resize(ndim);
    std::size_t total = 1;
    for (auto& d : t.dims) {
        d = in.u32();
        total *= d;
    }
    if (total > (std::size_t(1) << 31))
        throw format_error(in.path() + ": tensor too large at byte offset " +
                           std::to_string(in.offset()));
    t.data.resize(total);
    in.f32_array(t.data.data(), total);
    return t;
}

} // namespace

void save_checkpoint(const DdnModel<float>& model, const AdamState* opt,
                     const std::string& path) {
    BinWriter out(path);
    out.magic("DDNC");
    out.u32(kCheckpointVersion);
    const std::string cfg = config_to_json(model.config);
    out.u32(std::uint32_t(cfg.size()));
    out.bytes(cfg.data(), cfg.size());

    std::uint32_t count = std::uint32_t(model.params.size());
    if (opt) count += std::uint32_t(2 * model.params.size() + 1);
    out.u32(count);

    for (const auto& p : model.params) write_tensor(out, p.name, p.value);
    if (opt) {
        Tensor5<float> step({1, 1, 1, 1, 1});
        step.data[0] = float(opt->step);
        write_tensor(out, "opt.step", step);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            write_tensor(out, "opt.m." + model.params[i].name, opt->m[i]);
            write_tensor(out, "opt.v." + model.params[i].name, opt->v[i]);
        }
    }
    out.close();
}

Checkpoint load_checkpoint(const std::string& path, const DdnConfig* expect) {
    BinReader in(path);
    in.expect_magic("DDNC");
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion)
        throw format_error(path + ": unsupported DDNC version " + std::to_string(version));
    const std::uint32_t cfg_len = in.u32();
    if (cfg_len > (1u << 20))
        throw format_error(path + ": config blob too large");
    std::string cfg_text(cfg_len, '\0');
    in.bytes(cfg_text.data(), cfg_len);
    const DdnConfig cfg = config_from_json(cfg_text);
    if (expect && !(cfg == *expect))
        throw format_error(path + ": checkpoint config does not match the expected config");

    Checkpoint ckpt;
    ckpt.model.config = cfg;

    const std::uint32_t count = in.u32();
    std::vector<NamedTensor> model_tensors;
    std::vector<NamedTensor> opt_tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t = read_tensor(in);
        if (t.name.rfind("opt.", 0) == 0)
            opt_tensors.push_back(std::move(t));
        else
            model_tensors.push_back(std::move(t));
    }
    in.expect_eof();

    // validate against a freshly built architecture
    DdnModel<float> ref = build_ddn<float>(cfg, 0);
    if (model_tensors.size() != ref.params.size())
        throw format_error(path + ": expected " + std::to_string(ref.params.size()) +
                           " model tensors, found " + std::to_string(model_tensors.size()));
    for (std::size_t i = 0; i < ref.params.size(); ++i) {
        auto& got = model_tensors[i];
        auto& want = ref.params[i];
        if (got.name != want.name)
            throw format_error(path + ": tensor " + std::to_string(i) + " is \"" + got.name +
                               "\", expected \"" + want.name + "\"");
        if (got.dims.size() != 5 || got.data.size() != want.value.size())
            throw format_error(path + ": tensor \"" + got.name + "\" has wrong shape");
        const Shape5 s{int(got.dims[0]), int(got.dims[1]), int(got.dims[2]), int(got.dims[3]),
                       int(got.dims[4])};
        if (!(s == want.value.shape))
            throw format_error(path + ": tensor \"" + got.name + "\" shape " + s.str() +
                               " != " + want.value.shape.str());
        want.value.data = std::move(got.data);
    }
    ckpt.model = std::move(ref);

    if (!opt_tensors.empty()) {
        AdamState st = AdamState::zeros_like(ckpt.model);
        std::size_t found = 0;
        for (auto& t : opt_tensors) {
            if (t.name == "opt.step") {
                st.step = std::int64_t(t.data.at(0));
                ++found;
                continue;
            }
            for (std::size_t i = 0; i < ckpt.model.params.size(); ++i) {
                const auto& pname = ckpt.model.params[i].name;
                if (t.name == "opt.m." + pname && t.data.size() == st.m[i].size()) {
                    st.m[i].data = std::move(t.data);
                    ++found;
                    break;
                }
                if (t.name == "opt.v." + pname && t.data.size() == st.v[i].size()) {
                    st.v[i].data = std::move(t.data);
                    ++found;
                    break;
                }
            }
        }
        if (found != opt_tensors.size())
            throw format_error(path + ": unrecognized or misshaped optimizer tensors");
        ckpt.opt = std::move(st);
    }
    return ckpt;
}

} // namespace ddn
