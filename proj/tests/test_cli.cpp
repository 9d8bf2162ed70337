#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rfmusic/audio.hpp"
#include "rfmusic/checkpoint.hpp"

using namespace rfm;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
};

const fs::path& scratch() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("rfmusic_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

Result cli(const std::string& args) {
    static int n = 0;
    const auto log = scratch() / ("cmd_" + std::to_string(n++) + ".log");
    const std::string cmd = std::string(RFMUSIC_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

// One double and one single block at width 16, 16 training clips.
fs::path tiny_config() {
    const auto path = scratch() / "tiny.json";
    if (!fs::exists(path)) {
        nlohmann::json j = {
            {"model",
             {{"preset", "toy"}, {"name", "tiny"}, {"double_blocks", 1}, {"single_blocks", 1}, {"width", 16}, {"heads", 2},
              {"patch", 8}, {"d_fine", 8}, {"d_coarse", 8}, {"t_emb_dim", 8}}},
            {"train", {{"batch_size", 4}, {"lr", 1e-3}, {"ema_every", 2}, {"seed", 3}, {"steps", 6}}},
            {"data", {{"train_size", 16}}},
            {"checkpoint_every", 2}};
        std::ofstream(path) << j.dump(2);
    }
    return path;
}

std::vector<nlohmann::json> metrics(const fs::path& dir) {
    std::vector<nlohmann::json> out;
    std::ifstream is(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

// A finished tiny run shared by the sampling tests.
const fs::path& trained() {
    static const fs::path dir = [] {
        auto d = scratch() / "trained";
        auto r = cli("train --config " + tiny_config().string() + " --out " + d.string());
        if (r.code != 0) throw std::runtime_error(r.out);
        return d;
    }();
    return dir;
}

}  // namespace

TEST(CliInspect, PublishedSizesCheckPasses) {
    auto r = cli("inspect --check-table1");
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("small"), std::string::npos);
    EXPECT_NE(r.out.find("142.36M"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("145.5"), std::string::npos);
    EXPECT_EQ(r.out.find("DEVIATES"), std::string::npos);
}

TEST(CliInspect, EmbedderOnlyModelMatchesHandCount) {
    const auto path = scratch() / "empty.json";
    std::ofstream(path) << R"({"model": {"preset": "toy", "double_blocks": 0, "single_blocks": 0}})";
    auto r = cli("inspect --config " + path.string());
    ASSERT_EQ(r.code, 0) << r.out;
    // d=64, patch 4 x 4 channels = 64 inputs, fine 256, timestep 256, coarse 64.
    const long long embed = (64 * 64 + 64) + (256 * 64 + 64) + (256 * 64 + 64 + 64 * 64 + 64) + (64 * 64 + 64 + 64 * 64 + 64);
    const long long final_layer = 64 + (2 * 64 * 64 + 2 * 64) + (64 * 64 + 64);
    EXPECT_EQ(embed, 49536);
    std::istringstream is(r.out);
    std::string line;
    long long params = -1;
    while (std::getline(is, line))
        if (line.rfind("params", 0) == 0) params = std::stoll(line.substr(6));
    EXPECT_EQ(params, embed + final_layer);
}

TEST(CliInspect, RejectsUnknownPreset) { EXPECT_NE(cli("inspect --preset tiny").code, 0); }

TEST(CliTrain, RefusesExistingOutputDirectory) {
    const auto out = scratch() / "occupied";
    fs::create_directories(out);
    std::ofstream(out / "keep.txt") << "x";
    auto r = cli("train --config " + tiny_config().string() + " --out " + out.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("--resume"), std::string::npos) << r.out;
    EXPECT_EQ(slurp(out / "keep.txt"), "x");
    EXPECT_FALSE(fs::exists(out / "config.json"));
}

TEST(CliTrain, RunDirectoryIsComplete) {
    const auto& d = trained();
    for (const char* f : {"config.json", "metrics.jsonl", "latest.rfmk", "final.rfmk", "step_2.rfmk", "step_4.rfmk"})
        EXPECT_TRUE(fs::exists(d / f)) << f;
    auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
    EXPECT_EQ(cfg["model"]["width"], 16);
    EXPECT_EQ(cfg["train"]["steps"], 6);
    auto m = metrics(d);
    ASSERT_EQ(m.size(), 6u);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i]["step"], i + 1);
}

TEST(CliTrain, ResumeAfterKillContinuesMetricsWithoutGaps) {
    ::setenv("RFMUSIC_DETERMINISTIC", "1", 1);
    const auto full = scratch() / "resume_full", cut = scratch() / "resume_cut";
    ASSERT_EQ(cli("train --config " + tiny_config().string() + " --out " + full.string()).code, 0);
    ASSERT_EQ(cli("train --config " + tiny_config().string() + " --steps 4 --out " + cut.string()).code, 0);
    // Pretend the process died during step 4: the last checkpoint is step 2
    // and the metrics log has a torn trailing line.
    fs::copy_file(cut / "step_2.rfmk", cut / "latest.rfmk", fs::copy_options::overwrite_existing);
    fs::remove(cut / "final.rfmk");
    std::ofstream(cut / "metrics.jsonl", std::ios::app) << R"({"step": 5, "lo)";
    auto r = cli("train --config " + tiny_config().string() + " --resume --out " + cut.string());
    ASSERT_EQ(r.code, 0) << r.out;
    ::unsetenv("RFMUSIC_DETERMINISTIC");

    auto a = metrics(full), b = metrics(cut);
    ASSERT_EQ(b.size(), 6u);
    for (std::size_t i = 0; i < b.size(); ++i) {
        EXPECT_EQ(b[i]["step"], i + 1);
        EXPECT_EQ(b[i]["loss"].get<double>(), a[i]["loss"].get<double>()) << "step " << i + 1;
    }
    auto fa = load_checkpoint(full / "final.rfmk"), fb = load_checkpoint(cut / "final.rfmk");
    const auto pa = fa.state.weights.parameters(), pb = fb.state.weights.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        EXPECT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin())) << "tensor " << i;
}

TEST(CliTrain, DdimObjectiveSameShapesDifferentMetrics) {
    const auto out = scratch() / "ddim";
    ASSERT_EQ(cli("train --config " + tiny_config().string() + " --objective ddim --out " + out.string()).code, 0);
    EXPECT_NE(slurp(out / "metrics.jsonl"), slurp(trained() / "metrics.jsonl"));
    auto rf = load_checkpoint(trained() / "final.rfmk"), dd = load_checkpoint(out / "final.rfmk");
    EXPECT_EQ(dd.state.train.objective, Objective::kDDIM);
    const auto a = rf.state.weights.parameters(), b = dd.state.weights.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].shape(), b[i].shape());
}

TEST(CliSample, SameSeedIsBitIdenticalAndInputsUntouched) {
    const auto ck = trained() / "final.rfmk";
    const auto before = slurp(ck);
    const auto o1 = scratch() / "s1", o2 = scratch() / "s2", o3 = scratch() / "s3";
    ASSERT_EQ(cli("sample " + ck.string() + " --prompt 'high fast percussive' --seed 9 --steps 8 --out " + o1.string()).code, 0);
    ASSERT_EQ(cli("sample " + ck.string() + " --prompt 'high fast percussive' --seed 9 --steps 8 --out " + o2.string()).code, 0);
    ASSERT_EQ(cli("sample " + ck.string() + " --prompt 'high fast percussive' --seed 10 --steps 8 --out " + o3.string()).code, 0);
    const auto z1 = slurp(o1 / "latent.f32");
    EXPECT_EQ(z1.size(), 16u * 128 * 4 * sizeof(float));
    EXPECT_EQ(z1, slurp(o2 / "latent.f32"));
    EXPECT_NE(z1, slurp(o3 / "latent.f32"));
    EXPECT_EQ(slurp(ck), before);
    auto meta = nlohmann::json::parse(slurp(o1 / "latent.json"));
    EXPECT_EQ(meta["shape"], nlohmann::json({16, 128, 4}));
    EXPECT_EQ(slurp(o1 / "mel.pgm").substr(0, 15), "P5\n1024 64\n255\n");
}

TEST(CliSample, DefaultsAreFiftyStepsAndGuidanceThreePointFive) {
    const auto out = scratch() / "defaults";
    ASSERT_EQ(cli("sample " + (trained() / "final.rfmk").string() + " --out " + out.string()).code, 0);
    auto j = nlohmann::json::parse(slurp(out / "sample.json"));
    EXPECT_EQ(j["steps"], 50);
    EXPECT_EQ(j["cfg"], 3.5);
    EXPECT_EQ(j["weights"], "ema");
    EXPECT_EQ(j["sampler"], "euler");
}

TEST(CliSample, CfgSweepGridAndWav) {
    const auto out = scratch() / "sweep";
    auto r = cli("sample " + (trained() / "final.rfmk").string() + " --steps 6 --cfg-sweep --wav --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(slurp(out / "cfg_sweep.pgm").substr(0, 15), "P5\n3080 64\n255\n");
    EXPECT_GE(std::count(r.out.begin(), r.out.end(), '\n'), 5);
    EXPECT_NE(r.out.find("cfg 7.0  contrast"), std::string::npos) << r.out;
    const auto wav = read_wav(out / "sample.wav");
    EXPECT_EQ(wav.samples.size(), kClipSamples);
    EXPECT_EQ(wav.sample_rate, kSampleRate);
}

TEST(CliMel, ToneImageHasExpectedDominantBin) {
    const auto wav = scratch() / "a440.wav";
    write_wav(wav, tone(440.0));
    const auto out = scratch() / "mel";
    auto r = cli("mel " + wav.string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    // Filter m peaks at the (m+1)-th of 66 equally spaced mel points on [0, 8 kHz].
    std::size_t expect = 0;
    double best = 1e9;
    for (std::size_t m = 0; m < kMelBins; ++m) {
        const double centre = mel_to_hz(hz_to_mel(8000.0) * double(m + 1) / 65.0);
        if (std::abs(centre - 440.0) < best) best = std::abs(centre - 440.0), expect = m;
    }
    EXPECT_NE(r.out.find("dominant mel bin " + std::to_string(expect) + " "), std::string::npos) << r.out;
    EXPECT_EQ(slurp(out / "mel.pgm").substr(0, 15), "P5\n1024 64\n255\n");
}

TEST(CliToyeval, IdenticalCheckpointsGiveIdenticalMetrics) {
    const auto ck = (trained() / "final.rfmk").string();
    const auto out = scratch() / "toyeval";
    auto r = cli("toyeval " + ck + " " + ck + " -n 8 --steps 4 --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    auto j = nlohmann::json::parse(slurp(out / "toyeval.json"));
    ASSERT_EQ(j["rows"].size(), 2u);
    EXPECT_EQ(j["rows"][0]["mmd"], j["rows"][1]["mmd"]);
    EXPECT_EQ(j["rows"][0]["accuracy"], j["rows"][1]["accuracy"]);
    EXPECT_GT(j["null"]["mmd"].get<double>(), 0.0);
    EXPECT_NE(r.out.find("null MMD"), std::string::npos);
}

TEST(CliToyeval, MissingCheckpointIsAnInputError) {
    auto r = cli("toyeval " + (scratch() / "nope.rfmk").string() + " " + (scratch() / "nope.rfmk").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("nope.rfmk"), std::string::npos);
}
