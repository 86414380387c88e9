#include "f4d/mesh.hpp"

#include "f4d/binary_io.hpp"
#include "f4d/error.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>

namespace f4d {

Aabb bounds(const PointSet& points) {
    Aabb box;
    for (const auto& p : points) {
        box.extend(p);
    }
    return box;
}

void TriMesh::validate() const {
    if (vertices.empty() || faces.empty()) {
        throw GeometryError("mesh is empty");
    }
    for (const auto& f : faces) {
        for (auto i : f) {
            if (i >= vertices.size()) {
                throw GeometryError("face index " + std::to_string(i) + " out of range");
            }
        }
    }
    for (const auto& v : vertices) {
        if (!v.allFinite()) {
            throw GeometryError("mesh has non-finite vertex");
        }
    }
}

Aabb TriMesh::bounds() const { return f4d::bounds(vertices); }

double TriMesh::signed_volume() const {
    double vol = 0.0;
    for (const auto& f : faces) {
        vol += vertices[f[0]].dot(vertices[f[1]].cross(vertices[f[2]]));
    }
    return vol / 6.0;
}

TriMesh make_box(const Vec3& lo, const Vec3& hi) {
    TriMesh m;
    for (int i = 0; i < 8; ++i) {
        m.vertices.emplace_back((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(),
                                (i & 4) ? hi.z() : lo.z());
    }
    // Outward-facing, two triangles per side.
    m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
               {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
    return m;
}

TriMesh make_icosphere(double radius, int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    TriMesh m;
    m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    m.faces = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
               {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
    for (auto& v : m.vertices) {
        v.normalize();
    }
    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
        auto mid = [&](std::uint32_t a, std::uint32_t b) {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) {
                return it->second;
            }
            const auto idx = static_cast<std::uint32_t>(m.vertices.size());
            m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        next.reserve(m.faces.size() * 4);
        for (const auto& f : m.faces) {
            const auto a = mid(f[0], f[1]);
            const auto b = mid(f[1], f[2]);
            const auto c = mid(f[2], f[0]);
            next.push_back({f[0], a, c});
            next.push_back({f[1], b, a});
            next.push_back({f[2], c, b});
            next.push_back({a, b, c});
        }
        m.faces = std::move(next);
    }
    for (auto& v : m.vertices) {
        v *= radius;
    }
    return m;
}

TriMesh make_flat_quad() {
    TriMesh m;
    m.vertices = {{-1, -1, 0}, {1, -1, 0}, {1, 1, 0}, {-1, 1, 0}};
    m.faces = {{0, 1, 2}, {0, 2, 3}};
    return m;
}

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open " + path.string());
    }
    return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path.string());
    }
    return out;
}

// OBJ face tokens look like "3", "3/1", "3//2" or "-1".
std::uint32_t parse_obj_index(const std::string& token, std::size_t vertex_count) {
    const long v = std::stol(token.substr(0, token.find('/')));
    const long idx = v > 0 ? v - 1 : static_cast<long>(vertex_count) + v;
    if (idx < 0 || static_cast<std::size_t>(idx) >= vertex_count) {
        throw FormatError("OBJ face index out of range: " + token);
    }
    return static_cast<std::uint32_t>(idx);
}

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

PlyType ply_type(const std::string& name) {
    static const std::map<std::string, PlyType> types = {
        {"char", PlyType::i8},    {"int8", PlyType::i8},     {"uchar", PlyType::u8},
        {"uint8", PlyType::u8},   {"short", PlyType::i16},   {"int16", PlyType::i16},
        {"ushort", PlyType::u16}, {"uint16", PlyType::u16},  {"int", PlyType::i32},
        {"int32", PlyType::i32},  {"uint", PlyType::u32},    {"uint32", PlyType::u32},
        {"float", PlyType::f32},  {"float32", PlyType::f32}, {"double", PlyType::f64},
        {"float64", PlyType::f64}};
    auto it = types.find(name);
    if (it == types.end()) {
        throw FormatError("unknown PLY property type " + name);
    }
    return it->second;
}

std::size_t ply_size(PlyType t) {
    switch (t) {
    case PlyType::i8:
    case PlyType::u8: return 1;
    case PlyType::i16:
    case PlyType::u16: return 2;
    case PlyType::i32:
    case PlyType::u32:
    case PlyType::f32: return 4;
    case PlyType::f64: return 8;
    }
    return 0;
}

double ply_read(std::istream& in, PlyType t) {
    unsigned char b[8] = {};
    const auto n = ply_size(t);
    if (!in.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n))) {
        throw FormatError("truncated PLY body");
    }
    std::uint64_t u = 0;
    for (std::size_t i = 0; i < n; ++i) {
        u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    switch (t) {
    case PlyType::i8: return static_cast<std::int8_t>(u);
    case PlyType::u8: return static_cast<std::uint8_t>(u);
    case PlyType::i16: return static_cast<std::int16_t>(u);
    case PlyType::u16: return static_cast<std::uint16_t>(u);
    case PlyType::i32: return static_cast<std::int32_t>(u);
    case PlyType::u32: return static_cast<std::uint32_t>(u);
    case PlyType::f32: return std::bit_cast<float>(static_cast<std::uint32_t>(u));
    case PlyType::f64: return std::bit_cast<double>(u);
    }
    return 0.0;
}

struct PlyProperty {
    std::string name;
    PlyType type = PlyType::f32;
    bool is_list = false;
    PlyType count_type = PlyType::u8;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

} // namespace

TriMesh read_obj(const std::filesystem::path& path) {
    auto in = open_input(path);
    TriMesh mesh;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x() >> v.y() >> v.z())) {
                throw FormatError("malformed OBJ vertex in " + path.string());
            }
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::vector<std::uint32_t> poly;
            std::string tok;
            while (ls >> tok) {
                poly.push_back(parse_obj_index(tok, mesh.vertices.size()));
            }
            if (poly.size() < 3) {
                throw FormatError("OBJ face with fewer than 3 vertices in " + path.string());
            }
            for (std::size_t i = 1; i + 1 < poly.size(); ++i) {
                mesh.faces.push_back({poly[0], poly[i], poly[i + 1]});
            }
        }
    }
    mesh.validate();
    return mesh;
}

TriMesh read_ply(const std::filesystem::path& path) {
    auto in = open_input(path);
    std::string line;
    std::getline(in, line);
    if (line != "ply" && line != "ply\r") {
        throw FormatError(path.string() + " is not a PLY file");
    }
    std::vector<PlyElement> elements;
    bool binary_le = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "format") {
            std::string fmt;
            ls >> fmt;
            binary_le = fmt == "binary_little_endian";
        } else if (tag == "element") {
            PlyElement e;
            ls >> e.name >> e.count;
            elements.push_back(e);
        } else if (tag == "property") {
            if (elements.empty()) {
                throw FormatError("PLY property before element");
            }
            PlyProperty p;
            std::string type;
            ls >> type;
            if (type == "list") {
                std::string ct, it;
                ls >> ct >> it;
                p.is_list = true;
                p.count_type = ply_type(ct);
                p.type = ply_type(it);
            } else {
                p.type = ply_type(type);
            }
            ls >> p.name;
            elements.back().props.push_back(p);
        } else if (tag == "end_header") {
            break;
        }
    }
    if (!binary_le) {
        throw FormatError(path.string() + ": only binary_little_endian PLY is supported");
    }
    TriMesh mesh;
    for (const auto& e : elements) {
        for (std::size_t r = 0; r < e.count; ++r) {
            Vec3 v = Vec3::Zero();
            for (const auto& p : e.props) {
                if (p.is_list) {
                    const auto n = static_cast<std::size_t>(ply_read(in, p.count_type));
                    std::vector<std::uint32_t> poly(n);
                    for (auto& i : poly) {
                        i = static_cast<std::uint32_t>(ply_read(in, p.type));
                    }
                    if (e.name == "face" && (p.name == "vertex_indices" || p.name == "vertex_index")) {
                        for (std::size_t i = 1; i + 1 < n; ++i) {
                            mesh.faces.push_back({poly[0], poly[i], poly[i + 1]});
                        }
                    }
                } else {
                    const double val = ply_read(in, p.type);
                    if (e.name == "vertex") {
                        if (p.name == "x") v.x() = val;
                        if (p.name == "y") v.y() = val;
                        if (p.name == "z") v.z() = val;
                    }
                }
            }
            if (e.name == "vertex") {
                mesh.vertices.push_back(v);
            }
        }
    }
    mesh.validate();
    return mesh;
}

TriMesh read_mesh(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    for (auto& c : ext) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (ext == ".obj") {
        return read_obj(path);
    }
    if (ext == ".ply") {
        return read_ply(path);
    }
    throw ConfigError("unsupported mesh format: " + path.string());
}

void write_ply_mesh(const std::filesystem::path& path, const TriMesh& mesh) {
    auto out = open_output(path);
    out << "ply\nformat binary_little_endian 1.0\n"
        << "element vertex " << mesh.vertices.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "element face " << mesh.faces.size() << "\n"
        << "property list uchar uint vertex_indices\nend_header\n";
    for (const auto& v : mesh.vertices) {
        for (int k = 0; k < 3; ++k) {
            bin::put_f32(out, static_cast<float>(v[k]));
        }
    }
    for (const auto& f : mesh.faces) {
        out.put(3);
        for (auto i : f) {
            bin::put_u32(out, i);
        }
    }
    if (!out) {
        throw ConfigError("failed writing " + path.string());
    }
}

void write_ply_points(const std::filesystem::path& path, const PointSet& points) {
    auto out = open_output(path);
    out << "ply\nformat binary_little_endian 1.0\n"
        << "element vertex " << points.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\nend_header\n";
    for (const auto& v : points) {
        for (int k = 0; k < 3; ++k) {
            bin::put_f32(out, static_cast<float>(v[k]));
        }
    }
    if (!out) {
        throw ConfigError("failed writing " + path.string());
    }
}

} // namespace f4d
