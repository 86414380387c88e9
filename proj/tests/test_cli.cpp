#include "doctest.h"

#include "f4d/cli_io.hpp"
#include "f4d/error.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace f4d;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "f4d_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
}

int cli(std::initializer_list<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    std::vector<std::string> store{"f4d"};
    store.insert(store.end(), args);
    std::vector<const char*> argv;
    for (const auto& s : store) argv.push_back(s.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

// Small scene config around a PLY icosphere written into dir.
fs::path small_config(const fs::path& dir, const std::string& extra_train = "", const std::string& oracle = "") {
    write_ply_mesh(dir / "ball.ply", make_icosphere(1.0, 2));
    std::string text = R"({
  "scene": [{"mesh": "ball.ply", "prompt": "a ball"}],
  "frames": 5, "coarse_points": 8, "fine_points": 16, "K": 4, "shell_samples": 300,
  "train": {"iterations": 0, "batch": 2)" + extra_train + R"(})";
    if (!oracle.empty()) text += ",\n  \"oracle\": " + oracle;
    text += "\n}\n";
    spit(dir / "run.json", text);
    return dir / "run.json";
}

} // namespace

TEST_CASE("config parsing is strict") {
    const RunConfig d = parse_config("{}");
    CHECK(d.frames == 41);
    CHECK(d.coarse_points == 64);
    CHECK(d.fine_points == 512);
    CHECK(d.K == 4);
    CHECK(d.train.iterations == 2000);
    CHECK(d.train.lr_fenwick.start == 0.006);
    CHECK(d.oracle.kind == "pointmass");

    const RunConfig c = parse_config(
        R"({"scene": [{"mesh": "a.obj"}], "seed": 9, "train": {"lr_rot": [0.01, 0.001], "weight": {"kind": "uniform"}},
            "oracle": {"kind": "gaussian", "tracks": "t.ptrk", "sigma": 0.2}})",
        "/data");
    CHECK(c.scene.at(0).mesh == "/data/a.obj");
    CHECK(c.train.seed == 9);
    CHECK(c.train.lr_rot.end == 0.001);
    CHECK(c.train.weight.kind == "uniform");
    CHECK(c.oracle.tracks == "/data/t.ptrk");

    CHECK_THROWS_AS(parse_config(R"({"frame": 41})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"train": {"iteration": 5}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"oracle": {"kind": "pointmass", "target": "x"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"frames": "41"})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"frames": 4.5})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"coarse_points": -3})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"train": {"lr_fenwick": [0.1]}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"train": {"fine_start": 2}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"oracle": {"kind": "diffusion"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
}

TEST_CASE("schedule command") {
    std::ostringstream out;
    cmd_schedule(parse_config(R"({"train": {"iterations": 3, "weight": {"kind": "uniform"}}})"), out);
    std::istringstream in(out.str());
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("iter\ttau\tlr_fenwick", 0) == 0);
    const double expected[] = {0.75, 0.5, 0.25};
    for (int i = 0; i < 3; ++i) {
        int iter;
        double tau, lr;
        in >> iter >> tau >> lr;
        CHECK(iter == i + 1);
        CHECK(tau == doctest::Approx(expected[i]).epsilon(1e-12));
        if (i == 0) CHECK(lr == 0.006);
        if (i == 2) CHECK(lr == 0.00006);
        std::string rest;
        std::getline(in, rest);
    }

    std::ostringstream ln;
    cmd_schedule(parse_config(R"({"train": {"iterations": 200}})"), ln);
    std::istringstream lin(ln.str());
    std::getline(lin, header);
    double prev = 1.0;
    for (int i = 0; i < 200; ++i) {
        int iter;
        double tau;
        lin >> iter >> tau;
        CHECK(tau < prev);
        prev = tau;
        std::string rest;
        std::getline(lin, rest);
    }
}

TEST_CASE("init, checkpoint round trip and optimize with I = 0") {
    const fs::path dir = scratch("init");
    const fs::path cfg = small_config(dir);
    REQUIRE(cli({"init", "-c", cfg.string(), "-o", (dir / "a.f4d").string()}) == 0);

    const Scene s = read_checkpoint(dir / "a.f4d");
    REQUIRE(s.objects.size() == 1);
    CHECK(s.objects[0].prompt == "a ball");
    CHECK(s.objects[0].model.coarse.size() == 8);
    CHECK(s.objects[0].model.fine.size() == 16);
    CHECK(s.frame_count() == 5);
    const auto n = s.objects[0].shell.size();
    CHECK(n >= 270);
    CHECK(n <= 330);

    write_checkpoint(dir / "b.f4d", s);
    CHECK(slurp(dir / "a.f4d") == slurp(dir / "b.f4d"));
    const Scene s2 = read_checkpoint(dir / "b.f4d");
    CHECK(s2.objects[0].shell == s.objects[0].shell);
    CHECK(s2.objects[0].model.coarse.points[3].seq == s.objects[0].model.coarse.points[3].seq);

    // Target tracks equal to the scene itself; zero iterations leave the file unchanged.
    write_tracks(dir / "target.ptrk", scene_tracks(s));
    small_config(dir, "", R"({"kind": "pointmass", "tracks": "target.ptrk"})");
    REQUIRE(cli({"optimize", "-c", cfg.string(), "-i", (dir / "a.f4d").string(), "-o", (dir / "c.f4d").string(),
                 "--metrics", (dir / "m.tsv").string(), "--tracks", (dir / "out.ptrk").string()}) == 0);
    CHECK(slurp(dir / "a.f4d") == slurp(dir / "c.f4d"));
    CHECK(slurp(dir / "out.ptrk") == slurp(dir / "target.ptrk"));

    SUBCASE("truncated checkpoint is a format error") {
        const std::string bytes = slurp(dir / "a.f4d");
        spit(dir / "cut.f4d", bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS_AS(read_checkpoint(dir / "cut.f4d"), FormatError);
        spit(dir / "long.f4d", bytes + "x");
        CHECK_THROWS_AS(read_checkpoint(dir / "long.f4d"), FormatError);
        CHECK(cli({"audit", "-i", (dir / "cut.f4d").string()}) == 2);
    }
}

TEST_CASE("track files") {
    const fs::path dir = scratch("tracks");
    TrackFile tf;
    tf.frames = 3;
    tf.samples = {2, 5};
    tf.positions.resize(3 * 7 * 3);
    for (std::size_t k = 0; k < tf.positions.size(); ++k) tf.positions[k] = 0.25f * static_cast<float>(k);
    write_tracks(dir / "t.ptrk", tf);
    CHECK(fs::file_size(dir / "t.ptrk") == 16 + 4 * 2 + 12 * 7 * 3);
    const TrackFile back = read_tracks(dir / "t.ptrk");
    CHECK(back.frames == 3);
    CHECK(back.samples == tf.samples);
    CHECK(back.positions == tf.positions);

    const std::string bytes = slurp(dir / "t.ptrk");
    spit(dir / "short.ptrk", bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_AS(read_tracks(dir / "short.ptrk"), FormatError);
    spit(dir / "magic.ptrk", "XTRK" + bytes.substr(4));
    CHECK_THROWS_AS(read_tracks(dir / "magic.ptrk"), FormatError);
    tf.positions.pop_back();
    CHECK_THROWS_AS(write_tracks(dir / "bad.ptrk", tf), FormatError);
}

TEST_CASE("exit codes and messages") {
    const fs::path dir = scratch("codes");
    std::string out, err;
    CHECK(cli({"--help"}, &out) == 0);
    CHECK(out.find("optimize") != std::string::npos);
    CHECK(cli({}) == 2);
    CHECK(cli({"frobnicate"}) == 2);

    spit(dir / "missing.json", R"({"scene": [{"mesh": "nowhere.obj"}], "shell_samples": 100})");
    CHECK(cli({"init", "-c", (dir / "missing.json").string(), "-o", (dir / "x.f4d").string()}, &out, &err) == 2);
    CHECK(err.find((dir / "nowhere.obj").string()) != std::string::npos);

    spit(dir / "unknown.json", R"({"scene": [], "iterations": 5})");
    CHECK(cli({"schedule", "-c", (dir / "unknown.json").string()}, &out, &err) == 2);
    CHECK(err.find("iterations") != std::string::npos);

    CHECK(cli({"audit", "-i", (dir / "absent.f4d").string()}) == 2);
}

TEST_CASE("replay shape mismatch is rejected before training") {
    const fs::path dir = scratch("replay");
    const fs::path cfg = small_config(dir, R"(, "iterations": 3)", R"({"kind": "replay", "path": "r.rfrv"})");
    REQUIRE(cli({"init", "-c", cfg.string(), "-o", (dir / "a.f4d").string()}) == 0);
    const Scene s = read_checkpoint(dir / "a.f4d");
    const auto length = static_cast<std::uint32_t>(latent_layout(s).length);
    // Two iterations recorded where three are requested.
    const ReplayShape shape{2, 2, length};
    write_replay(dir / "r.rfrv", shape, std::vector<float>(2 * 2 * length, 0.0f));
    std::string err;
    CHECK(cli({"optimize", "-c", cfg.string(), "-i", (dir / "a.f4d").string(), "-o", (dir / "b.f4d").string()}, nullptr,
              &err) == 2);
    CHECK_FALSE(fs::exists(dir / "b.f4d"));
}

TEST_CASE("export") {
    const fs::path dir = scratch("export");
    const fs::path cfg = small_config(dir);
    REQUIRE(cli({"init", "-c", cfg.string(), "-o", (dir / "a.f4d").string()}) == 0);

    SUBCASE("identity model writes T copies of the input") {
        REQUIRE(cli({"export", "-i", (dir / "a.f4d").string(), "-o", (dir / "frames").string()}) == 0);
        const std::string input = slurp(dir / "ball.ply");
        for (int t = 1; t <= 5; ++t) {
            CHECK(slurp(dir / "frames" / ("object0_frame00" + std::to_string(t) + ".ply")) == input);
        }
        const TrackFile tf = read_tracks(dir / "frames" / "tracks.ptrk");
        CHECK(tf.frames == 5);
    }

    SUBCASE("rigid model matches the rigid transform; frame 1 is byte-identical") {
        Scene s = read_checkpoint(dir / "a.f4d");
        const UnitQuat R = quat_normalize({0.9, 0.1, 0.3, -0.2});
        const Vec3 shift(0.5, 0.25, -0.75);
        for (auto& cp : s.objects[0].model.coarse.points) {
            std::vector<RigidDelta> prefix(5);
            for (int t = 2; t <= 5; ++t) {
                prefix[t - 1].r = R.raw() - RawQuat::identity();
                prefix[t - 1].T = R.rotate(cp.p) - cp.p + shift;
            }
            cp.seq = FenwickSeq::from_prefix(prefix);
        }
        write_checkpoint(dir / "rigid.f4d", s);
        REQUIRE(cli({"export", "-i", (dir / "rigid.f4d").string(), "-o", (dir / "rigid").string(), "--frames", "1:3"}) == 0);
        CHECK(slurp(dir / "rigid" / "object0_frame001.ply") == slurp(dir / "ball.ply"));
        CHECK_FALSE(fs::exists(dir / "rigid" / "object0_frame004.ply"));
        const TriMesh m = read_mesh(dir / "rigid" / "object0_frame003.ply");
        const TriMesh base = read_mesh(dir / "ball.ply");
        double worst = 0.0;
        for (std::size_t v = 0; v < m.vertices.size(); ++v) {
            worst = std::max(worst, (m.vertices[v] - (R.rotate(base.vertices[v]) + shift)).norm());
        }
        CHECK(worst < 1e-6);
        CHECK(cli({"export", "-i", (dir / "rigid.f4d").string(), "-o", (dir / "bad").string(), "--frames", "2:9"}) == 2);
    }
}

TEST_CASE("audit") {
    const fs::path dir = scratch("audit");
    const fs::path cfg = small_config(dir);
    REQUIRE(cli({"init", "-c", cfg.string(), "-o", (dir / "a.f4d").string()}) == 0);
    std::string out;
    CHECK(cli({"audit", "-i", (dir / "a.f4d").string(), "--samples", "20"}, &out) == 0);
    CHECK(out.find("\"pass\": true") != std::string::npos);

    Scene s = read_checkpoint(dir / "a.f4d");
    s.objects[0].model.coarse.points[0].seq.node(1).T = Vec3(0.5, 0.0, 0.0);
    write_checkpoint(dir / "bad.f4d", s);
    std::ostringstream report;
    CHECK_FALSE(cmd_audit(dir / "bad.f4d", 10, report));
    const std::string text = report.str();
    const auto at = text.find("frame1_identity");
    REQUIRE(at != std::string::npos);
    CHECK(text.find("\"pass\": false", at) < text.find("\"name\"", at + 1));
    CHECK(cli({"audit", "-i", (dir / "bad.f4d").string(), "--samples", "10"}) == 3);
}

TEST_CASE("two-object scene keeps independent layers") {
    const fs::path dir = scratch("two");
    write_ply_mesh(dir / "ball.ply", make_icosphere(1.0, 2));
    write_ply_mesh(dir / "box.ply", make_box(Vec3(2, -0.5, -0.5), Vec3(3, 0.5, 0.5)));
    spit(dir / "run.json", R"({"scene": [{"mesh": "ball.ply"}, {"mesh": "box.ply"}], "frames": 4,
        "coarse_points": 6, "fine_points": 0, "shell_samples": 200})");
    const Scene s = init_scene(load_config(dir / "run.json"));
    REQUIRE(s.objects.size() == 2);
    for (const auto& cp : s.objects[1].model.coarse.points) CHECK(cp.p.x() > 1.9);
    for (const auto& cp : s.objects[0].model.coarse.points) CHECK(cp.p.norm() < 1.0);
    CHECK(s.objects[1].model.fine.points.empty());
    const LatentLayout l = latent_layout(s);
    CHECK(l.offsets[1] == 3 * 4 * s.objects[0].shell.size());
}
