#pragma once

#include "f4d/optimizer.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace f4d {

struct ObjectSpec {
    std::string mesh;
    std::string prompt;
};

struct OracleSpec {
    std::string kind = "pointmass"; // "pointmass" | "gaussian" | "replay"
    /// Target (pointmass) or mean (gaussian) tracks, a PTRK file.
    std::string tracks;
    double sigma = 0.1;
    /// RFRV file for the replay oracle.
    std::string path;
};

/// Run configuration read from JSON. Relative paths are resolved against the
/// directory of the config file.
struct RunConfig {
    std::vector<ObjectSpec> scene;
    int frames = 41;
    std::size_t coarse_points = 64;
    std::size_t fine_points = 512;
    int K = 4;
    std::size_t shell_samples = 7500;
    TrainConfig train;
    OracleSpec oracle;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Scene checkpoint: "F4DS", version, object count, then per object the mesh
/// path and prompt, mesh, shell and interior sets and both control layers
/// (control point records followed by an FWSQ blob). Reals are float32.
void write_checkpoint(const std::filesystem::path& path, const Scene& scene);
void write_checkpoint(std::ostream& out, const Scene& scene);
Scene read_checkpoint(const std::filesystem::path& path);
Scene read_checkpoint(std::istream& in);

/// Point tracks: "PTRK", version, objects, frames, samples per object, then
/// float32 positions in latent order.
struct TrackFile {
    int frames = 0;
    std::vector<std::size_t> samples;
    std::vector<float> positions;
};

void write_tracks(const std::filesystem::path& path, const TrackFile& tracks);
TrackFile read_tracks(const std::filesystem::path& path);
TrackFile scene_tracks(const Scene& scene);

/// Builds the scene described by the config: shell and interior sets at the
/// target shell size and initialized control layers.
Scene init_scene(const RunConfig& cfg);

/// Commands behind the f4d executable. Each throws on failure.
void cmd_init(const RunConfig& cfg, const std::filesystem::path& out);
void cmd_optimize(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& out,
                  const std::filesystem::path& metrics, const std::filesystem::path& tracks, std::ostream& log);
void cmd_export(const std::filesystem::path& checkpoint, int first, int last, const std::filesystem::path& out_dir);
void cmd_schedule(const RunConfig& cfg, std::ostream& out);
/// Writes a JSON report and returns whether every check passed.
bool cmd_audit(const std::filesystem::path& checkpoint, std::size_t samples, std::ostream& out);

/// Argument parsing and exit codes: 0 success, 2 configuration or IO error,
/// 3 numeric failure (including failed audits).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace f4d
