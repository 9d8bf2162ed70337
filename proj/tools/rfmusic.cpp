// rfmusic: inspect, train, sample, mel and toyeval subcommands.
#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "rfmusic/audio.hpp"
#include "rfmusic/checkpoint.hpp"
#include "rfmusic/codec.hpp"
#include "rfmusic/model_config.hpp"
#include "rfmusic/run_config.hpp"
#include "rfmusic/run_dir.hpp"
#include "rfmusic/sampling.hpp"
#include "rfmusic/toyeval.hpp"

namespace fs = std::filesystem;
using namespace rfm;

namespace {

struct Common {
    std::string config;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<std::string> objective;
    std::optional<std::size_t> ema_every;
    std::string out;
};

RunConfig resolve(const Common& c) {
    RunConfig r;
    if (!c.config.empty()) r = load_run_config(c.config);
    if (!c.preset.empty()) r.model = preset(c.preset);
    if (c.seed) r.train.seed = *c.seed;
    if (c.steps) r.train.steps = *c.steps;
    if (c.objective) r.train.objective = parse_objective(*c.objective);
    if (c.ema_every) r.train.ema_every = *c.ema_every;
    return r;
}

void prepare_out(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    fs::create_directories(out);
}

// --- inspect -----------------------------------------------------------------

int cmd_inspect(const Common& c, std::size_t text_tokens, bool check_table1) {
    if (check_table1) {
        bool ok = true;
        std::printf("%-7s %12s %10s %8s %10s %10s %7s\n", "preset", "params", "published", "dev%", "Gflops", "published", "ratio");
        for (const auto& ref : kReferenceSizes) {
            const auto cfg = preset(ref.preset);
            const double p = double(count_params(cfg)) / 1e6;
            const double dev = 100.0 * (p - ref.params_m) / ref.params_m;
            const double tol = ref.preset == "15d0s" ? 2.0 : 1.5;
            const double gf = double(count_flops(cfg, cfg.music_tokens(), text_tokens)) / 1e9;
            const bool pass = std::abs(dev) <= tol;
            ok = ok && pass;
            if (ref.gflops > 0)
                std::printf("%-7s %11.2fM %9.1fM %+7.2f%% %10.1f %10.1f %7.3f %s\n", std::string(ref.preset).c_str(), p,
                            ref.params_m, dev, gf, ref.gflops, gf / ref.gflops, pass ? "ok" : "DEVIATES");
            else
                std::printf("%-7s %11.2fM %9.1fM %+7.2f%% %10.1f %10s %7s %s\n", std::string(ref.preset).c_str(), p,
                            ref.params_m, dev, gf, "-", "-", pass ? "ok" : "DEVIATES");
        }
        std::printf("Gflops: forward, 2 per MAC, %zu text tokens; reported only\n", text_tokens);
        return ok ? 0 : 1;
    }
    const RunConfig r = resolve(c);
    r.model.validate();
    const auto p = count_params_breakdown(r.model);
    const auto f = count_flops_breakdown(r.model, 512, text_tokens);
    std::printf("model %s: m=%zu n=%zu d=%zu h=%zu p=%zu c=%zu\n", r.model.name.c_str(), r.model.double_blocks,
                r.model.single_blocks, r.model.width, r.model.heads, r.model.patch, r.model.channels);
    std::printf("params      %14llu (%.1fM)\n", (unsigned long long)p.total, double(p.total) / 1e6);
    std::printf("  embedders %14llu\n", (unsigned long long)p.embedders);
    std::printf("  double    %14llu x %zu\n", (unsigned long long)p.per_double_block, r.model.double_blocks);
    std::printf("  single    %14llu x %zu\n", (unsigned long long)p.per_single_block, r.model.single_blocks);
    std::printf("  final     %14llu\n", (unsigned long long)p.final_layer);
    std::printf("flops (512 music tokens, %zu text tokens) %.2fG\n", text_tokens, double(f.total) / 1e9);
    std::printf("  embedders %14llu\n", (unsigned long long)f.embedders);
    std::printf("  double    %14llu x %zu\n", (unsigned long long)f.per_double_block, r.model.double_blocks);
    std::printf("  single    %14llu x %zu\n", (unsigned long long)f.per_single_block, r.model.single_blocks);
    std::printf("  final     %14llu\n", (unsigned long long)f.final_layer);
    return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const Common& c, bool resume) {
    if (c.out.empty()) throw ConfigError("--out is required");
    RunConfig r = resolve(c);
    TrainRunOptions opt;
    opt.resume = resume;
    const std::uint64_t every = std::max<std::uint64_t>(1, r.train.steps / 20);
    opt.on_step = [&](const StepMetrics& m) {
        if (m.step % every == 0 || m.step == r.train.steps)
            std::printf("step %6llu  loss %.5f  grad_norm %.4f  %.0f ms\n", (unsigned long long)m.step, m.loss, m.grad_norm,
                        m.wall_ms);
        std::fflush(stdout);
    };
    auto ck = train_run(r, c.out, opt);
    std::printf("final checkpoint %s (step %llu)\n", (fs::path(c.out) / "final.rfmk").string().c_str(),
                (unsigned long long)ck.state.step);
    return 0;
}

// --- sample ------------------------------------------------------------------

void write_latent(const fs::path& base, const Tensor<float>& z, std::uint64_t codec_seed) {
    std::ofstream os(base.string() + ".f32", std::ios::binary);
    os.write(reinterpret_cast<const char*>(z.data().data()), std::streamsize(z.numel() * sizeof(float)));
    std::ofstream meta(base.string() + ".json");
    meta << nlohmann::json{{"shape", z.shape()}, {"dtype", "f32"}, {"codec_seed", codec_seed}}.dump(2) << '\n';
}

double image_contrast(const Tensor<float>& mel) {
    double sum = 0, sq = 0;
    for (float v : mel.data()) {
        sum += v;
        sq += double(v) * v;
    }
    const double n = double(mel.numel()), mean = sum / n;
    return std::sqrt(std::max(0.0, sq / n - mean * mean));
}

int cmd_sample(const std::string& checkpoint, const std::string& prompt, std::size_t steps, double cfg, std::uint64_t seed,
               const std::string& out, bool wav, bool sweep, bool raw_weights) {
    prepare_out(out);
    const auto ck = load_checkpoint(checkpoint);
    ToyCodec codec(ck.state.model.channels, ck.run.data.codec_seed);
    SampleRequest req;
    req.prompts = {prompt};
    req.steps = steps;
    req.seed = seed;
    req.use_ema = !raw_weights;
    const fs::path dir(out);
    write_json_file(dir / "sample.json", {{"checkpoint", checkpoint},
                                          {"prompt", prompt},
                                          {"steps", steps},
                                          {"cfg", cfg},
                                          {"seed", seed},
                                          {"weights", raw_weights ? "raw" : "ema"},
                                          {"sampler", to_string(ck.state.train.objective) == "rf" ? "euler" : "ddim"}});
    req.cfg = cfg;
    const auto z = sample_latents(ck, req).front();
    write_latent(dir / "latent", z, codec.seed());
    const auto mel = codec.decompress({z, codec.seed()});
    write_pgm(dir / "mel.pgm", mel.values);
    std::printf("latent %s, mel image %s\n", (dir / "latent.f32").string().c_str(), (dir / "mel.pgm").string().c_str());
    if (wav) {
        write_wav(dir / "sample.wav", griffin_lim(mel, 32, nullptr, seed));
        std::printf("audio %s\n", (dir / "sample.wav").string().c_str());
    }
    if (sweep) {
        const double scales[3] = {1.0, 3.5, 7.0};
        const std::size_t gap = 4;
        const std::size_t cols = 3 * kMelFrames + 2 * gap;
        std::vector<Tensor<float>> mels;
        for (double s : scales) {
            req.cfg = s;
            mels.push_back(codec.decompress({sample_latents(ck, req).front(), codec.seed()}).values);
        }
        float lo = mels[0][0], hi = lo;
        for (const auto& m : mels)
            for (float v : m.data()) lo = std::min(lo, v), hi = std::max(hi, v);
        std::vector<float> grid(kMelBins * cols, hi);
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t r = 0; r < kMelBins; ++r)
                for (std::size_t f = 0; f < kMelFrames; ++f) grid[r * cols + k * (kMelFrames + gap) + f] = mels[k][r * kMelFrames + f];
        write_pgm(dir / "cfg_sweep.pgm", Tensor<float>({kMelBins, cols}, std::move(grid)));
        std::printf("cfg sweep %s (left to right: cfg 1, 3.5, 7)\n", (dir / "cfg_sweep.pgm").string().c_str());
        for (std::size_t k = 0; k < 3; ++k) std::printf("  cfg %.1f  contrast (std of log-mel) %.4f\n", scales[k], image_contrast(mels[k]));
    }
    return 0;
}

// --- mel ---------------------------------------------------------------------

int cmd_mel(const std::string& wav_in, const std::string& out) {
    prepare_out(out);
    const auto clip = read_wav(wav_in);
    const auto mel = mel_spectrogram(fit_clip(clip.samples, clip.sample_rate));
    const fs::path img = fs::path(out) / "mel.pgm";
    write_pgm(img, mel.values);
    std::vector<double> avg(kMelBins, 0.0);
    for (std::size_t k = 0; k < kMelBins; ++k)
        for (std::size_t f = 0; f < kMelFrames; ++f) avg[k] += mel.values[k * kMelFrames + f] / double(kMelFrames);
    const auto top = std::size_t(std::max_element(avg.begin(), avg.end()) - avg.begin());
    const double step = (hz_to_mel(kMelFmax) - hz_to_mel(kMelFmin)) / double(kMelBins + 1);
    std::printf("mel %zux%zu -> %s; dominant mel bin %zu (%.0f-%.0f Hz)\n", kMelBins, kMelFrames, img.string().c_str(), top,
                mel_to_hz(hz_to_mel(kMelFmin) + step * double(top)), mel_to_hz(hz_to_mel(kMelFmin) + step * double(top + 2)));
    return 0;
}

// --- toyeval -----------------------------------------------------------------

int cmd_toyeval(const std::string& rf_path, const std::string& ddim_path, std::size_t n, std::size_t steps, double cfg,
                std::uint64_t seed, const std::string& out) {
    if (n < 8) throw ConfigError("toyeval needs n >= 8");
    const auto rf = load_checkpoint(rf_path);
    const auto ddim = load_checkpoint(ddim_path);
    ToyCodec codec(rf.state.model.channels, rf.run.data.codec_seed);
    const auto ref = EvalReference::build(rf.run.data.recipe, codec, n, 1'000'000'000ULL);
    const auto targets = balanced_targets(n);
    SampleRequest req;
    for (const auto& t : targets) req.prompts.push_back(attribute_phrase(t));
    req.steps = steps;
    req.cfg = cfg;
    req.seed = seed;
    std::vector<ArmReport> rows;
    rows.push_back(ref.evaluate(to_string(rf.state.train.objective) + " " + rf_path, sample_latents(rf, req), targets));
    rows.push_back(ref.evaluate(to_string(ddim.state.train.objective) + " " + ddim_path, sample_latents(ddim, req), targets));
    const auto null_acc = attribute_accuracy(ref.classifier, ref.split_b, ref.labels_b);

    std::printf("%-40s %10s %8s %8s %8s %8s\n", "arm", "MMD", "xnull", "pitch", "tempo", "texture");
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        std::printf("%-40s %10.5f %8.2f %8.3f %8.3f %8.3f\n", r.name.c_str(), r.mmd, r.mmd / ref.null_mmd, r.accuracy[0],
                    r.accuracy[1], r.accuracy[2]);
        j.push_back({{"arm", r.name}, {"mmd", r.mmd}, {"mmd_over_null", r.mmd / ref.null_mmd}, {"accuracy", r.accuracy}});
    }
    std::printf("null MMD (held-out data vs data split) %.5f; classifier accuracy on held-out data %.3f %.3f %.3f\n",
                ref.null_mmd, null_acc[0], null_acc[1], null_acc[2]);
    std::printf("n=%zu per arm, %zu steps, cfg %.1f, seed %llu\n", n, steps, cfg, (unsigned long long)seed);
    if (!out.empty()) {
        prepare_out(out);
        write_json_file(fs::path(out) / "toyeval.json",
                        {{"rows", j}, {"null", {{"mmd", ref.null_mmd}, {"accuracy", null_acc}}}, {"n", n}, {"steps", steps},
                         {"cfg", cfg}, {"seed", seed}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rfmusic: rectified-flow text-to-music toolkit"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "RunConfig JSON file");
        sub->add_option("--preset", common.preset, "small|base|large|giant|15d0s|toy")
            ->check(CLI::IsMember({"small", "base", "large", "giant", "15d0s", "toy"}));
        sub->add_option("--seed", common.seed, "training seed");
        sub->add_option("--steps", common.steps, "training steps");
        sub->add_option("--objective", common.objective, "rf|ddim")->check(CLI::IsMember({"rf", "ddim"}));
        sub->add_option("--ema-every", common.ema_every, "EMA update period in steps");
    };

    auto* inspect = app.add_subcommand("inspect", "parameter and flop counts");
    add_common(inspect);
    std::size_t text_tokens = 0;
    bool check_table1 = false;
    inspect->add_option("--text-tokens", text_tokens, "text tokens for the flop count");
    inspect->add_flag("--check-table1", check_table1, "compare presets with the published sizes");

    auto* train = app.add_subcommand("train", "train a model into a run directory");
    add_common(train);
    bool resume = false;
    train->add_option("--out", common.out, "run directory")->required();
    train->add_flag("--resume", resume, "continue from <out>/latest.rfmk");

    auto* sample = app.add_subcommand("sample", "generate a latent, mel image and optional audio");
    std::string ckpt, prompt = "low slow tonal", sample_out;
    std::size_t sample_steps = 50;
    double cfg = 3.5;
    std::uint64_t sample_seed = 0;
    bool wav = false, sweep = false, raw = false;
    sample->add_option("checkpoint", ckpt, "checkpoint file")->required();
    sample->add_option("--prompt", prompt, "caption");
    sample->add_option("--steps", sample_steps, "sampler steps");
    sample->add_option("--cfg", cfg, "guidance scale");
    sample->add_option("--seed", sample_seed, "noise seed");
    sample->add_option("--out", sample_out, "output directory")->required();
    sample->add_flag("--wav", wav, "also write Griffin-Lim audio");
    sample->add_flag("--cfg-sweep", sweep, "write a cfg 1/3.5/7 side-by-side image");
    sample->add_flag("--raw-weights", raw, "sample with the raw instead of the EMA weights");

    auto* mel = app.add_subcommand("mel", "WAV to mel-spectrogram image");
    std::string wav_in, mel_out;
    mel->add_option("wav", wav_in, "input WAV (16 kHz mono PCM16)")->required();
    mel->add_option("--out", mel_out, "output directory")->required();

    auto* toyeval = app.add_subcommand("toyeval", "RF vs DDIM comparison on the synthetic task");
    std::string rf_ck, ddim_ck, eval_out;
    std::size_t n = 64, eval_steps = 50;
    std::uint64_t eval_seed = 0;
    double eval_cfg = 3.5;
    toyeval->add_option("rf_checkpoint", rf_ck)->required();
    toyeval->add_option("ddim_checkpoint", ddim_ck)->required();
    toyeval->add_option("-n", n, "samples per arm");
    toyeval->add_option("--steps", eval_steps, "sampler steps");
    toyeval->add_option("--cfg", eval_cfg, "guidance scale");
    toyeval->add_option("--seed", eval_seed, "noise seed");
    toyeval->add_option("--out", eval_out, "output directory");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*inspect) return cmd_inspect(common, text_tokens, check_table1);
        if (*train) return cmd_train(common, resume);
        if (*sample) return cmd_sample(ckpt, prompt, sample_steps, cfg, sample_seed, sample_out, wav, sweep, raw);
        if (*mel) return cmd_mel(wav_in, mel_out);
        if (*toyeval) return cmd_toyeval(rf_ck, ddim_ck, n, eval_steps, eval_cfg, eval_seed, eval_out);
    } catch (const rfm::Error& e) {
        std::fprintf(stderr, "rfmusic: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "rfmusic: %s\n", e.what());
        return 2;
    }
    return 0;
}
