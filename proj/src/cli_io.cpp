#include "f4d/cli_io.hpp"

#include "f4d/binary_io.hpp"
#include "f4d/error.hpp"
#include "f4d/sdf.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace f4d {

namespace {

using nlohmann::json;

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kTrackVersion = 1;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <class T>
void read_field(const json& j, const char* key, T& dst, const std::string& where) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    try {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError("");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError("");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.get<long long>() < 0) throw ConfigError("");
            }
        } else {
            if (!v.is_number()) throw ConfigError("");
        }
        dst = v.get<T>();
    } catch (const ConfigError&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

void read_range(const json& j, const char* key, Range& dst, const std::string& where) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw ConfigError("'" + std::string(key) + "' in " + where + " must be [start, end]");
    }
    dst = {v[0].get<double>(), v[1].get<double>()};
}

std::string resolve(const std::string& p, const std::filesystem::path& base) {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? p : (base / path).string();
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    return out;
}

void put_string(std::ostream& out, const std::string& s) {
    bin::put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, std::string_view what) {
    const auto n = bin::get_u32(in, what);
    if (n > (1u << 20)) throw FormatError("implausible string length in " + std::string(what));
    std::string s(n, '\0');
    if (n > 0 && !in.read(s.data(), n)) throw FormatError("truncated " + std::string(what));
    return s;
}

void put_vec(std::ostream& out, const Vec3& v) {
    for (int k = 0; k < 3; ++k) bin::put_f32(out, static_cast<float>(v[k]));
}

Vec3 get_vec(std::istream& in, std::string_view what) {
    Vec3 v;
    for (int k = 0; k < 3; ++k) v[k] = bin::get_f32(in, what);
    return v;
}

std::uint32_t get_count(std::istream& in, std::string_view what, std::uint32_t limit = 1u << 26) {
    const auto n = bin::get_u32(in, what);
    if (n > limit) throw FormatError("implausible count in " + std::string(what));
    return n;
}

void put_points(std::ostream& out, const PointSet& pts) {
    bin::put_u32(out, static_cast<std::uint32_t>(pts.size()));
    for (const auto& p : pts) put_vec(out, p);
}

PointSet get_points(std::istream& in, std::string_view what) {
    PointSet pts(get_count(in, what));
    for (auto& p : pts) p = get_vec(in, what);
    return pts;
}

void put_layer(std::ostream& out, const ControlLayer& layer) {
    bin::put_u32(out, static_cast<std::uint32_t>(layer.size()));
    bin::put_u32(out, static_cast<std::uint32_t>(layer.K));
    for (const auto& cp : layer.points) {
        put_vec(out, cp.p);
        put_vec(out, cp.log_scale);
        for (double v : {cp.cov_rot.w, cp.cov_rot.x, cp.cov_rot.y, cp.cov_rot.z}) bin::put_f32(out, static_cast<float>(v));
        write_fenwick(out, cp.seq);
    }
}

ControlLayer get_layer(std::istream& in) {
    ControlLayer layer;
    const auto n = get_count(in, "layer size");
    layer.K = static_cast<int>(get_count(in, "layer K"));
    layer.points.resize(n);
    for (auto& cp : layer.points) {
        cp.p = get_vec(in, "control point");
        cp.log_scale = get_vec(in, "control point");
        cp.cov_rot.w = bin::get_f32(in, "control point");
        cp.cov_rot.x = bin::get_f32(in, "control point");
        cp.cov_rot.y = bin::get_f32(in, "control point");
        cp.cov_rot.z = bin::get_f32(in, "control point");
        cp.seq = read_fenwick(in);
    }
    return layer;
}

std::unique_ptr<GuidanceOracle> make_oracle(const RunConfig& cfg, const Scene& scene) {
    const LatentLayout layout = latent_layout(scene);
    const auto& o = cfg.oracle;
    auto load_latent = [&]() {
        if (o.tracks.empty()) throw ConfigError("oracle '" + o.kind + "' needs 'tracks'");
        const TrackFile tf = read_tracks(o.tracks);
        if (tf.frames != layout.frames || tf.samples != layout.samples) {
            throw ConfigError("track file " + o.tracks + " does not match the scene layout");
        }
        return Latent(tf.positions.begin(), tf.positions.end());
    };
    if (o.kind == "pointmass") return std::make_unique<PointMassOracle>(load_latent());
    if (o.kind == "gaussian") return std::make_unique<GaussianOracle>(load_latent(), o.sigma);
    if (o.kind == "replay") {
        if (o.path.empty()) throw ConfigError("oracle 'replay' needs 'path'");
        auto r = std::make_unique<ReplayOracle>(o.path);
        r->validate(cfg.train.iterations, cfg.train.batch, layout.length);
        return r;
    }
    throw ConfigError("unknown oracle kind '" + o.kind + "'");
}

} // namespace

RunConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    check_keys(j, {"scene", "frames", "coarse_points", "fine_points", "K", "shell_samples", "train", "oracle", "seed"},
               "config");
    if (j.contains("scene")) {
        if (!j["scene"].is_array()) throw ConfigError("'scene' must be a list");
        for (const auto& e : j["scene"]) {
            check_keys(e, {"mesh", "prompt"}, "scene entry");
            ObjectSpec s;
            read_field(e, "mesh", s.mesh, "scene entry");
            read_field(e, "prompt", s.prompt, "scene entry");
            if (s.mesh.empty()) throw ConfigError("scene entry without 'mesh'");
            s.mesh = resolve(s.mesh, base_dir);
            cfg.scene.push_back(s);
        }
    }
    read_field(j, "frames", cfg.frames, "config");
    read_field(j, "coarse_points", cfg.coarse_points, "config");
    read_field(j, "fine_points", cfg.fine_points, "config");
    read_field(j, "K", cfg.K, "config");
    read_field(j, "shell_samples", cfg.shell_samples, "config");
    read_field(j, "seed", cfg.train.seed, "config");
    if (j.contains("train")) {
        const json& t = j["train"];
        const std::string w = "train";
        check_keys(t, {"iterations", "batch", "lr_fenwick", "lr_rot", "cfg", "w_temporal", "w_arap", "fine_start",
                       "split_iteration", "split_frame", "weight"},
                   w);
        read_field(t, "iterations", cfg.train.iterations, w);
        read_field(t, "batch", cfg.train.batch, w);
        read_range(t, "lr_fenwick", cfg.train.lr_fenwick, w);
        read_range(t, "lr_rot", cfg.train.lr_rot, w);
        read_range(t, "cfg", cfg.train.cfg, w);
        read_range(t, "w_temporal", cfg.train.w_temporal, w);
        read_range(t, "w_arap", cfg.train.w_arap, w);
        read_field(t, "fine_start", cfg.train.fine_start, w);
        read_field(t, "split_iteration", cfg.train.split_iteration, w);
        read_field(t, "split_frame", cfg.train.split_frame, w);
        if (t.contains("weight")) {
            check_keys(t["weight"], {"kind", "location", "scale"}, "train.weight");
            read_field(t["weight"], "kind", cfg.train.weight.kind, "train.weight");
            read_field(t["weight"], "location", cfg.train.weight.location, "train.weight");
            read_field(t["weight"], "scale", cfg.train.weight.scale, "train.weight");
        }
    }
    if (j.contains("oracle")) {
        const json& o = j["oracle"];
        check_keys(o, {"kind", "tracks", "sigma", "path"}, "oracle");
        read_field(o, "kind", cfg.oracle.kind, "oracle");
        read_field(o, "tracks", cfg.oracle.tracks, "oracle");
        read_field(o, "sigma", cfg.oracle.sigma, "oracle");
        read_field(o, "path", cfg.oracle.path, "oracle");
        cfg.oracle.tracks = resolve(cfg.oracle.tracks, base_dir);
        cfg.oracle.path = resolve(cfg.oracle.path, base_dir);
    }
    if (cfg.frames < 1) throw ConfigError("'frames' must be at least 1");
    if (cfg.K < 1) throw ConfigError("'K' must be at least 1");
    if (cfg.coarse_points < static_cast<std::size_t>(cfg.K)) throw ConfigError("'coarse_points' must be at least K");
    if (cfg.fine_points != 0 && cfg.fine_points < static_cast<std::size_t>(cfg.K)) {
        throw ConfigError("'fine_points' must be 0 or at least K");
    }
    if (cfg.shell_samples < 1) throw ConfigError("'shell_samples' must be positive");
    const std::set<std::string> kinds{"pointmass", "gaussian", "replay"};
    if (!kinds.count(cfg.oracle.kind)) throw ConfigError("unknown oracle kind '" + cfg.oracle.kind + "'");
    if (cfg.oracle.kind == "gaussian" && !(cfg.oracle.sigma > 0.0)) throw ConfigError("oracle sigma must be positive");
    cfg.train.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

// ---------------------------------------------------------------------------

void write_checkpoint(std::ostream& out, const Scene& scene) {
    bin::put_magic(out, "F4DS");
    bin::put_u32(out, kCheckpointVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(scene.objects.size()));
    for (const auto& o : scene.objects) {
        put_string(out, o.mesh_path);
        put_string(out, o.prompt);
        put_points(out, o.mesh.vertices);
        bin::put_u32(out, static_cast<std::uint32_t>(o.mesh.faces.size()));
        for (const auto& f : o.mesh.faces)
            for (auto i : f) bin::put_u32(out, i);
        put_points(out, o.shell);
        put_points(out, o.interior);
        out.put(o.model.fine_enabled ? 1 : 0);
        put_layer(out, o.model.coarse);
        put_layer(out, o.model.fine);
    }
}

void write_checkpoint(const std::filesystem::path& path, const Scene& scene) {
    auto out = open_out(path);
    write_checkpoint(out, scene);
    if (!out) throw ConfigError("failed writing " + path.string());
}

Scene read_checkpoint(std::istream& in) {
    bin::expect_magic(in, "F4DS");
    const auto version = bin::get_u32(in, "checkpoint version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Scene scene;
    scene.objects.resize(get_count(in, "object count", 1u << 16));
    for (auto& o : scene.objects) {
        o.mesh_path = get_string(in, "mesh path");
        o.prompt = get_string(in, "prompt");
        o.mesh.vertices = get_points(in, "mesh vertices");
        o.mesh.faces.resize(get_count(in, "mesh faces"));
        for (auto& f : o.mesh.faces)
            for (auto& i : f) i = bin::get_u32(in, "mesh faces");
        o.shell = get_points(in, "shell");
        o.interior = get_points(in, "interior");
        const int flag = in.get();
        if (flag != 0 && flag != 1) throw FormatError("bad fine flag in checkpoint");
        o.model.fine_enabled = flag == 1;
        o.model.coarse = get_layer(in);
        o.model.fine = get_layer(in);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
    try {
        scene.validate();
    } catch (const GeometryError& e) {
        throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
    }
    return scene;
}

Scene read_checkpoint(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_checkpoint(in);
}

TrackFile scene_tracks(const Scene& scene) {
    const LatentLayout layout = latent_layout(scene);
    const Latent z = assemble_latent(scene);
    TrackFile tf;
    tf.frames = layout.frames;
    tf.samples = layout.samples;
    tf.positions.assign(z.begin(), z.end());
    return tf;
}

void write_tracks(const std::filesystem::path& path, const TrackFile& tracks) {
    std::size_t total = 0;
    for (auto n : tracks.samples) total += n;
    if (tracks.positions.size() != 3 * total * static_cast<std::size_t>(tracks.frames)) {
        throw FormatError("track payload does not match its header");
    }
    auto out = open_out(path);
    bin::put_magic(out, "PTRK");
    bin::put_u32(out, kTrackVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(tracks.samples.size()));
    bin::put_u32(out, static_cast<std::uint32_t>(tracks.frames));
    for (auto n : tracks.samples) bin::put_u32(out, static_cast<std::uint32_t>(n));
    for (float v : tracks.positions) bin::put_f32(out, v);
    if (!out) throw ConfigError("failed writing " + path.string());
}

TrackFile read_tracks(const std::filesystem::path& path) {
    auto in = open_in(path);
    bin::expect_magic(in, "PTRK");
    const auto version = bin::get_u32(in, "track version");
    if (version != kTrackVersion) throw FormatError("unsupported track version " + std::to_string(version));
    TrackFile tf;
    tf.samples.resize(get_count(in, "track objects", 1u << 16));
    tf.frames = static_cast<int>(get_count(in, "track frames", 1u << 16));
    std::size_t total = 0;
    for (auto& n : tf.samples) total += n = get_count(in, "track samples");
    const auto payload = 3 * total * static_cast<std::size_t>(tf.frames);
    const auto header = 16 + 4 * tf.samples.size();
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size != header + 4 * payload) {
        throw FormatError("track file " + path.string() + " has " + std::to_string(size) + " bytes, header implies " +
                          std::to_string(header + 4 * payload));
    }
    in.seekg(static_cast<std::streamoff>(header));
    tf.positions.resize(payload);
    for (auto& v : tf.positions) v = bin::get_f32(in, "track positions");
    return tf;
}

// ---------------------------------------------------------------------------

Scene init_scene(const RunConfig& cfg) {
    if (cfg.scene.empty()) throw ConfigError("config has no scene objects");
    Scene scene;
    for (const auto& item : cfg.scene) {
        if (!std::filesystem::exists(item.mesh)) throw ConfigError("mesh not found: " + item.mesh);
        SceneObject o;
        o.mesh_path = item.mesh;
        o.prompt = item.prompt;
        o.mesh = read_mesh(item.mesh);
        const double s = voxel_size_search(o.mesh, cfg.shell_samples);
        const double tau = 0.5 * s;
        const SdfGrid sdf = sdf_from_mesh(o.mesh, s, shell_padding(s, tau));
        o.shell = shell_centers(sdf, tau);
        o.interior = interior_centers(sdf);
        o.model.coarse = init_layer(o.interior, cfg.coarse_points, cfg.K, cfg.frames);
        if (cfg.fine_points > 0) o.model.fine = init_layer(o.interior, cfg.fine_points, cfg.K, cfg.frames);
        scene.objects.push_back(std::move(o));
    }
    return scene;
}

void cmd_init(const RunConfig& cfg, const std::filesystem::path& out) {
    write_checkpoint(out, init_scene(cfg));
}

void cmd_optimize(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& out,
                  const std::filesystem::path& metrics, const std::filesystem::path& tracks, std::ostream& log) {
    Scene scene = read_checkpoint(checkpoint);
    auto oracle = make_oracle(cfg, scene);
    Trainer trainer(scene, *oracle, cfg.train);
    const int every = std::max(1, cfg.train.iterations / 20);
    const auto history = trainer.train([&](const StepDiagnostics& d, const Scene&) {
        const int i = d.schedule.iteration;
        if (i % every == 0 || i == cfg.train.iterations) {
            log << "iter " << i << "/" << cfg.train.iterations << " tau " << d.schedule.tau << " rfsds "
                << d.rfsds_norm << " temporal " << d.temporal << " arap " << d.arap << "\n";
        }
    });
    write_checkpoint(out, scene);
    if (!metrics.empty()) {
        auto m = open_out(metrics);
        write_metrics(m, history);
    }
    if (!tracks.empty()) write_tracks(tracks, scene_tracks(scene));
}

void cmd_export(const std::filesystem::path& checkpoint, int first, int last, const std::filesystem::path& out_dir) {
    const Scene scene = read_checkpoint(checkpoint);
    const int T = scene.frame_count();
    if (first < 1 || last > T || first > last) {
        throw ConfigError("frame range " + std::to_string(first) + ":" + std::to_string(last) + " outside 1:" +
                          std::to_string(T));
    }
    std::filesystem::create_directories(out_dir);
    for (std::size_t o = 0; o < scene.objects.size(); ++o) {
        for (int t = first; t <= last; ++t) {
            std::ostringstream name;
            name << "object" << o << "_frame" << std::setw(3) << std::setfill('0') << t << ".ply";
            write_ply_mesh(out_dir / name.str(), deform_mesh(scene.objects[o].mesh, scene.objects[o].model, t));
        }
    }
    write_tracks(out_dir / "tracks.ptrk", scene_tracks(scene));
}

void cmd_schedule(const RunConfig& cfg, std::ostream& out) {
    const auto rows = schedule_table(cfg.train, WeightPdf(cfg.train.weight.make()));
    out << "iter\ttau\tlr_fenwick\tlr_rot\tcfg\tw_temporal\tw_arap\tfine\n" << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.iteration << '\t' << r.tau << '\t' << r.lr_fenwick << '\t' << r.lr_rot << '\t' << r.cfg << '\t'
            << r.w_temporal << '\t' << r.w_arap << '\t' << (r.fine_active ? 1 : 0) << '\n';
    }
}

bool cmd_audit(const std::filesystem::path& checkpoint, std::size_t samples, std::ostream& out) {
    const Scene scene = read_checkpoint(checkpoint);
    json checks = json::array();
    bool all = true;
    auto add = [&](const std::string& name, double value, double tolerance, bool pass, json extra = json::object()) {
        json c = {{"name", name}, {"value", value}, {"tolerance", tolerance}, {"pass", pass}};
        c.update(extra);
        checks.push_back(c);
        all = all && pass;
    };

    double drift = 0.0;
    bool finite = true;
    for (const auto& o : scene.objects) {
        const TriMesh m1 = deform_mesh(o.mesh, o.model, 1);
        for (std::size_t v = 0; v < m1.vertices.size(); ++v) drift = std::max(drift, (m1.vertices[v] - o.mesh.vertices[v]).norm());
        TrackSkinner skin(o.model, o.shell);
        std::vector<Vec3> tracks;
        skin.forward(o.model, tracks);
        for (std::size_t s = 0; s < o.shell.size(); ++s) drift = std::max(drift, (tracks[s] - o.shell[s]).norm());
        for (const auto& p : tracks) finite = finite && p.allFinite();
    }
    add("frame1_identity", drift, 0.0, drift == 0.0);
    add("finite_tracks", finite ? 0.0 : 1.0, 0.0, finite);

    const std::pair<const char*, AuditLoss> losses[] = {
        {"grad_temporal", AuditLoss::temporal}, {"grad_arap", AuditLoss::arap}, {"grad_rfsds", AuditLoss::rfsds}};
    for (const auto& [name, loss] : losses) {
        const double tol = loss == AuditLoss::temporal ? 1e-5 : 1e-4;
        const AuditResult r = finite_diff_audit(scene, loss, samples);
        add(name, r.max_rel_error, tol, r.max_rel_error <= tol, {{"checked", r.checked}});
    }
    out << json{{"checkpoint", checkpoint.string()}, {"checks", checks}, {"pass", all}}.dump(2) << "\n";
    return all;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Fenwick-tree 4D deformation distillation"};
    app.require_subcommand(1);

    std::string config, checkpoint, output, metrics, tracks, frames = "all";
    std::size_t samples = 50;

    auto* init = app.add_subcommand("init", "Build shells and control layers; write a checkpoint");
    init->add_option("-c,--config", config, "Run configuration (JSON)")->required();
    init->add_option("-o,--out", output, "Checkpoint to write")->required();

    auto* optimize = app.add_subcommand("optimize", "Train a checkpoint against the configured oracle");
    optimize->add_option("-c,--config", config, "Run configuration (JSON)")->required();
    optimize->add_option("-i,--checkpoint", checkpoint, "Input checkpoint")->required();
    optimize->add_option("-o,--out", output, "Trained checkpoint to write")->required();
    optimize->add_option("--metrics", metrics, "Per-iteration metrics (TSV)");
    optimize->add_option("--tracks", tracks, "Final point tracks (PTRK)");

    auto* exp = app.add_subcommand("export", "Write one PLY mesh per frame and the point tracks");
    exp->add_option("-i,--checkpoint", checkpoint, "Checkpoint")->required();
    exp->add_option("-o,--out", output, "Output directory")->required();
    exp->add_option("--frames", frames, "Frame range first:last (1-based) or 'all'");

    auto* sched = app.add_subcommand("schedule", "Print the per-iteration schedule table");
    sched->add_option("-c,--config", config, "Run configuration (JSON)")->required();

    auto* audit = app.add_subcommand("audit", "Check invariants and gradients of a checkpoint");
    audit->add_option("-i,--checkpoint", checkpoint, "Checkpoint")->required();
    audit->add_option("--samples", samples, "Parameters checked per gradient audit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return 2;
    }

    try {
        if (*init) {
            cmd_init(load_config(config), output);
        } else if (*optimize) {
            cmd_optimize(load_config(config), checkpoint, output, metrics, tracks, err);
        } else if (*exp) {
            int first = 1, last = 0;
            if (frames == "all") {
                last = read_checkpoint(checkpoint).frame_count();
            } else {
                const auto colon = frames.find(':');
                try {
                    first = std::stoi(frames.substr(0, colon));
                    last = colon == std::string::npos ? first : std::stoi(frames.substr(colon + 1));
                } catch (const std::logic_error&) {
                    throw ConfigError("bad frame range '" + frames + "'");
                }
            }
            cmd_export(checkpoint, first, last, output);
        } else if (*sched) {
            cmd_schedule(load_config(config), out);
        } else if (*audit) {
            if (!cmd_audit(checkpoint, samples, out)) return 3;
        }
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace f4d
