#pragma once

// File formats and dataset plumbing: PLY point clouds, binary descriptor and
// weight files, the line-delimited dataset manifest, keypoint lists, and the
// synthetic desk-scene generator used for end-to-end runs.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"
#include "mvdesc/evaluation.hpp"
#include "mvdesc/geometry.hpp"
#include "mvdesc/network.hpp"
#include "mvdesc/renderer.hpp"
#include "mvdesc/training.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

namespace mvdesc {

// ---------------------------------------------------------------------------
// binary primitives

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* who) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  check(in.gcount() == 4, std::string(who) + ": truncated file");
  return v;
}

inline void write_f32s(std::ostream& out, const float* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * sizeof(float)));
}

inline void read_f32s(std::istream& in, float* data, std::size_t n, const char* who) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  check(in.gcount() == static_cast<std::streamsize>(n * sizeof(float)),
        std::string(who) + ": truncated file");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PLY point clouds

enum class PlyFormat { kAscii, kBinaryLE };

// Writes positions, normals (when present), and optional per-point colors as a
// standards-conforming PLY. Colors are quantized to uchar as round(255*c).
inline void write_ply(const PointCloud& cloud, const std::string& path,
                      PlyFormat format = PlyFormat::kBinaryLE,
                      const std::vector<std::array<double, 3>>& colors = {}) {
  validate(cloud);
  if (!colors.empty()) {
    check(colors.size() == cloud.size(), "write_ply: color count mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_ply: cannot open " + path);

  out << "ply\n";
  out << (format == PlyFormat::kAscii ? "format ascii 1.0\n"
                                      : "format binary_little_endian 1.0\n");
  if (cloud.sensor_origin) {
    out << "comment sensor_origin " << std::setprecision(17)
        << cloud.sensor_origin->x() << ' ' << cloud.sensor_origin->y() << ' '
        << cloud.sensor_origin->z() << '\n';
  }
  out << "element vertex " << cloud.size() << '\n';
  out << "property float x\nproperty float y\nproperty float z\n";
  if (cloud.has_normals()) {
    out << "property float nx\nproperty float ny\nproperty float nz\n";
  }
  if (!colors.empty()) {
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  }
  out << "end_header\n";

  const auto quantize = [](double c) {
    return static_cast<unsigned char>(
        std::lround(255.0 * std::clamp(c, 0.0, 1.0)));
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    float row[6];
    int n_floats = 3;
    row[0] = static_cast<float>(cloud.points[i].x());
    row[1] = static_cast<float>(cloud.points[i].y());
    row[2] = static_cast<float>(cloud.points[i].z());
    if (cloud.has_normals()) {
      row[3] = static_cast<float>(cloud.normals[i].x());
      row[4] = static_cast<float>(cloud.normals[i].y());
      row[5] = static_cast<float>(cloud.normals[i].z());
      n_floats = 6;
    }
    if (format == PlyFormat::kAscii) {
      out << std::setprecision(9);
      for (int j = 0; j < n_floats; ++j) {
        if (j) out << ' ';
        out << row[j];
      }
      if (!colors.empty()) {
        out << ' ' << static_cast<int>(quantize(colors[i][0])) << ' '
            << static_cast<int>(quantize(colors[i][1])) << ' '
            << static_cast<int>(quantize(colors[i][2]));
      }
      out << '\n';
    } else {
      detail::write_f32s(out, row, static_cast<std::size_t>(n_floats));
      if (!colors.empty()) {
        const unsigned char rgb[3] = {quantize(colors[i][0]), quantize(colors[i][1]),
                                      quantize(colors[i][2])};
        out.write(reinterpret_cast<const char*>(rgb), 3);
      }
    }
  }
  check(out.good(), "write_ply: write failed for " + path);
}

// Reads ASCII or binary-little-endian PLY with float x,y,z and optional float
// nx,ny,nz (renormalized to unit length). Color properties and other known
// property types are read and discarded. A "comment sensor_origin x y z" line
// restores the recorded capture position.
inline PointCloud read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "read_ply: cannot open " + path);

  std::string line;
  check(static_cast<bool>(std::getline(in, line)) && line == "ply",
        "read_ply: not a PLY file: " + path);

  enum class Kind { kF32, kU8 };
  struct Prop {
    Kind kind;
    std::string name;
  };
  std::vector<Prop> props;
  PointCloud cloud;
  std::size_t n_vertices = 0;
  bool saw_vertex_element = false, in_vertex_element = false, binary = false,
       saw_format = false;

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "end_header") break;
    if (tok == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "ascii") {
        binary = false;
      } else if (fmt == "binary_little_endian") {
        binary = true;
      } else {
        check(false, "read_ply: unsupported format '" + fmt + "'");
      }
      saw_format = true;
    } else if (tok == "comment") {
      std::string what;
      ls >> what;
      if (what == "sensor_origin") {
        Vec3 origin;
        ls >> origin.x() >> origin.y() >> origin.z();
        check(!ls.fail(), "read_ply: malformed sensor_origin comment");
        cloud.sensor_origin = origin;
      }
    } else if (tok == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      check(!ls.fail(), "read_ply: malformed element line");
      if (name == "vertex") {
        n_vertices = count;
        saw_vertex_element = true;
        in_vertex_element = true;
      } else {
        check(count == 0, "read_ply: unsupported element '" + name + "'");
        in_vertex_element = false;
      }
    } else if (tok == "property") {
      if (!in_vertex_element) continue;  // properties of an empty element
      std::string type, name;
      ls >> type >> name;
      check(!ls.fail(), "read_ply: malformed property line");
      if (type == "float" || type == "float32") {
        props.push_back({Kind::kF32, name});
      } else if (type == "uchar" || type == "uint8") {
        props.push_back({Kind::kU8, name});
      } else {
        check(false, "read_ply: unsupported property type '" + type + "'");
      }
    } else if (tok.empty()) {
      continue;
    } else {
      check(false, "read_ply: unexpected header line '" + line + "'");
    }
  }
  check(saw_format, "read_ply: header has no format line");
  check(saw_vertex_element, "read_ply: header has no vertex element");

  std::map<std::string, int> slot;
  for (std::size_t i = 0; i < props.size(); ++i) {
    slot[props[i].name] = static_cast<int>(i);
  }
  check(slot.count("x") && slot.count("y") && slot.count("z"),
        "read_ply: vertex element lacks float x,y,z");
  const int has_n = static_cast<int>(slot.count("nx")) +
                    static_cast<int>(slot.count("ny")) +
                    static_cast<int>(slot.count("nz"));
  check(has_n == 0 || has_n == 3, "read_ply: incomplete normal properties");

  cloud.points.resize(n_vertices);
  if (has_n == 3) cloud.normals.resize(n_vertices);

  std::vector<double> row(props.size());
  for (std::size_t v = 0; v < n_vertices; ++v) {
    if (binary) {
      for (std::size_t j = 0; j < props.size(); ++j) {
        if (props[j].kind == Kind::kF32) {
          float f = 0;
          in.read(reinterpret_cast<char*>(&f), 4);
          row[j] = f;
        } else {
          unsigned char b = 0;
          in.read(reinterpret_cast<char*>(&b), 1);
          row[j] = b;
        }
      }
      check(!in.fail(), "read_ply: body truncated at vertex " + std::to_string(v) +
                            " of " + std::to_string(n_vertices));
    } else {
      std::string data_line;
      do {
        check(static_cast<bool>(std::getline(in, data_line)),
              "read_ply: body truncated at vertex " + std::to_string(v) + " of " +
                  std::to_string(n_vertices));
      } while (data_line.find_first_not_of(" \t\r") == std::string::npos);
      std::istringstream ls(data_line);
      for (std::size_t j = 0; j < props.size(); ++j) {
        if (props[j].kind == Kind::kF32) {
          float f = 0;  // parse at stored precision so round trips stay exact
          ls >> f;
          row[j] = f;
        } else {
          ls >> row[j];
        }
      }
      check(!ls.fail(), "read_ply: malformed vertex row " + std::to_string(v));
    }
    cloud.points[v] =
        Vec3(row[static_cast<std::size_t>(slot["x"])],
             row[static_cast<std::size_t>(slot["y"])],
             row[static_cast<std::size_t>(slot["z"])]);
    if (has_n == 3) {
      Vec3 n(row[static_cast<std::size_t>(slot["nx"])],
             row[static_cast<std::size_t>(slot["ny"])],
             row[static_cast<std::size_t>(slot["nz"])]);
      const double len = n.norm();
      check(len > 1e-12, "read_ply: degenerate normal at vertex " + std::to_string(v));
      cloud.normals[v] = n / len;
    }
  }
  validate(cloud);
  return cloud;
}

// ---------------------------------------------------------------------------
// descriptor files

inline constexpr std::uint32_t kDescriptorFileVersion = 1;

// Unit-norm descriptor rows paired with the keypoint indices they describe.
struct DescriptorFile {
  std::uint32_t dim = 0;
  std::vector<std::vector<float>> rows;
  std::vector<std::uint32_t> keypoints;
};

inline void validate(const DescriptorFile& f) {
  check(f.rows.size() == f.keypoints.size(),
        "descriptor file: row/keypoint count mismatch");
  for (const auto& r : f.rows) {
    check(r.size() == f.dim, "descriptor file: ragged rows");
    double sq = 0.0;
    for (float v : r) sq += static_cast<double>(v) * static_cast<double>(v);
    check(std::fabs(std::sqrt(sq) - 1.0) <= 1e-4,
          "descriptor file: row norm deviates from 1 by more than 1e-4");
  }
}

inline void write_descriptor_file(const DescriptorFile& f, const std::string& path) {
  validate(f);
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_descriptor_file: cannot open " + path);
  out.write("MVDF", 4);
  detail::write_u32(out, kDescriptorFileVersion);
  detail::write_u32(out, static_cast<std::uint32_t>(f.rows.size()));
  detail::write_u32(out, f.dim);
  for (const auto& r : f.rows) detail::write_f32s(out, r.data(), r.size());
  for (std::uint32_t k : f.keypoints) detail::write_u32(out, k);
  check(out.good(), "write_descriptor_file: write failed for " + path);
}

inline DescriptorFile read_descriptor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "read_descriptor_file: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  check(in.gcount() == 4 && std::memcmp(magic, "MVDF", 4) == 0,
        "read_descriptor_file: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(in, "read_descriptor_file");
  check(version == kDescriptorFileVersion,
        "read_descriptor_file: unsupported version " + std::to_string(version));
  DescriptorFile f;
  const std::uint32_t count = detail::read_u32(in, "read_descriptor_file");
  f.dim = detail::read_u32(in, "read_descriptor_file");
  check(f.dim >= 1 && f.dim <= 65536, "read_descriptor_file: implausible dimension");
  f.rows.assign(count, std::vector<float>(f.dim));
  for (auto& r : f.rows) detail::read_f32s(in, r.data(), r.size(), "read_descriptor_file");
  f.keypoints.resize(count);
  for (auto& k : f.keypoints) k = detail::read_u32(in, "read_descriptor_file");
  validate(f);
  return f;
}

// Widens the stored rows for the double-precision matching/metrics path.
inline DescriptorRows descriptor_rows_as_double(const DescriptorFile& f) {
  DescriptorRows out(f.rows.size());
  for (std::size_t i = 0; i < f.rows.size(); ++i) {
    out[i].assign(f.rows[i].begin(), f.rows[i].end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// weight checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

inline void write_checkpoint(const std::vector<NamedTensor>& tensors,
                             const std::string& path) {
  check(!tensors.empty(), "write_checkpoint: no tensors");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_checkpoint: cannot open " + path);
  out.write("MVDW", 4);
  detail::write_u32(out, kCheckpointVersion);
  detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    check(!t.name.empty() && t.name.size() < 256, "write_checkpoint: bad tensor name");
    std::size_t numel = 1;
    for (int d : t.shape) {
      check(d >= 1, "write_checkpoint: non-positive dimension in " + t.name);
      numel *= static_cast<std::size_t>(d);
    }
    check(numel == t.data.size(), "write_checkpoint: shape/data mismatch in " + t.name);
    detail::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_u32(out, static_cast<std::uint32_t>(d));
    detail::write_f32s(out, t.data.data(), t.data.size());
  }
  check(out.good(), "write_checkpoint: write failed for " + path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "read_checkpoint: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  check(in.gcount() == 4 && std::memcmp(magic, "MVDW", 4) == 0,
        "read_checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(in, "read_checkpoint");
  check(version == kCheckpointVersion,
        "read_checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::read_u32(in, "read_checkpoint");
  check(count >= 1 && count <= 4096, "read_checkpoint: implausible tensor count");
  std::vector<NamedTensor> tensors(count);
  for (auto& t : tensors) {
    const std::uint32_t name_len = detail::read_u32(in, "read_checkpoint");
    check(name_len >= 1 && name_len < 256, "read_checkpoint: bad name length");
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    check(in.gcount() == static_cast<std::streamsize>(name_len),
          "read_checkpoint: truncated file");
    const std::uint32_t rank = detail::read_u32(in, "read_checkpoint");
    check(rank >= 1 && rank <= 8, "read_checkpoint: implausible rank");
    std::size_t numel = 1;
    t.shape.resize(rank);
    for (auto& d : t.shape) {
      d = static_cast<int>(detail::read_u32(in, "read_checkpoint"));
      check(d >= 1 && numel * static_cast<std::size_t>(d) <= (1u << 30),
            "read_checkpoint: implausible dimensions");
      numel *= static_cast<std::size_t>(d);
    }
    t.data.resize(numel);
    detail::read_f32s(in, t.data.data(), numel, "read_checkpoint");
  }
  return tensors;
}

// Serializes the model weights together with the viewpoint parameters.
template <class T>
void save_model(const std::string& path, DescriptorModel<T>& model,
                ViewpointSet<T>& viewpoints) {
  std::vector<NamedTensor> tensors;
  for (auto& [name, tensor] : model.parameters()) {
    NamedTensor t;
    t.name = name;
    t.shape = tensor.shape();
    t.data.assign(tensor.data().begin(), tensor.data().end());
    tensors.push_back(std::move(t));
  }
  const std::pair<const char*, Tensor<T>*> coords[3] = {
      {"viewpoints.theta", &viewpoints.theta},
      {"viewpoints.phi", &viewpoints.phi},
      {"viewpoints.rho", &viewpoints.rho}};
  for (const auto& [name, tensor] : coords) {
    NamedTensor t;
    t.name = name;
    t.shape = tensor->shape();
    t.data.assign(tensor->data().begin(), tensor->data().end());
    tensors.push_back(std::move(t));
  }
  write_checkpoint(tensors, path);
}

// Rebuilds a model + viewpoint set from a checkpoint, inferring the descriptor
// dimension and view count from the stored shapes.
template <class T>
std::pair<DescriptorModel<T>, ViewpointSet<T>> load_model(const std::string& path) {
  const std::vector<NamedTensor> tensors = read_checkpoint(path);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    check(by_name.emplace(t.name, &t).second,
          "load_model: duplicate tensor '" + t.name + "'");
  }
  const auto take = [&](const std::string& name) -> const NamedTensor& {
    auto it = by_name.find(name);
    check(it != by_name.end(), "load_model: checkpoint lacks tensor '" + name + "'");
    return *it->second;
  };

  const NamedTensor& head_w = take("head.w");
  check(head_w.shape.size() == 2, "load_model: head.w must be rank 2");
  const int d = head_w.shape[0];
  const NamedTensor& theta = take("viewpoints.theta");
  check(theta.shape.size() == 1, "load_model: viewpoints.theta must be rank 1");
  const int n_views = theta.shape[0];

  auto model = DescriptorModel<T>::init(d, 0);
  std::size_t used = 0;
  for (auto& [name, tensor] : model.parameters()) {
    const NamedTensor& src = take(name);
    check(src.shape == tensor.shape(),
          "load_model: shape mismatch for '" + name + "'");
    std::copy(src.data.begin(), src.data.end(), tensor.data().begin());
    ++used;
  }
  auto viewpoints = ViewpointSet<T>::random_init(n_views, 0);
  const std::pair<const char*, Tensor<T>*> coords[3] = {
      {"viewpoints.theta", &viewpoints.theta},
      {"viewpoints.phi", &viewpoints.phi},
      {"viewpoints.rho", &viewpoints.rho}};
  for (const auto& [name, tensor] : coords) {
    const NamedTensor& src = take(name);
    check(src.shape == tensor->shape(), "load_model: shape mismatch for '" +
                                            std::string(name) + "'");
    std::copy(src.data.begin(), src.data.end(), tensor->data().begin());
    ++used;
  }
  check(used == tensors.size(), "load_model: checkpoint holds unknown tensors");
  return {std::move(model), std::move(viewpoints)};
}

// ---------------------------------------------------------------------------
// dataset manifest and keypoint lists

// One fragment pair on disk: two cloud paths, the ground-truth alignment that
// carries fragment_b into fragment_a's frame (16 numbers row-major), the
// overlap fraction, and optional keypoint-list paths.
struct ManifestEntry {
  std::string fragment_a;
  std::string fragment_b;
  Mat4 transform_gt = Mat4::Identity();
  double overlap = 0.0;
  std::string keypoints_a;  // empty when absent
  std::string keypoints_b;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

inline void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path);
  check(out.good(), "write_manifest: cannot open " + path);
  out << "# fragment_a fragment_b transform_gt[16 row-major] overlap"
         " [keypoints_a keypoints_b]\n";
  out << std::setprecision(17);
  for (const auto& e : manifest.entries) {
    for (const std::string* p : {&e.fragment_a, &e.fragment_b, &e.keypoints_a,
                                 &e.keypoints_b}) {
      check(p->find_first_of(" \t") == std::string::npos,
            "write_manifest: path contains whitespace: " + *p);
    }
    check(!e.fragment_a.empty() && !e.fragment_b.empty(),
          "write_manifest: empty fragment path");
    check(e.overlap >= 0.0 && e.overlap <= 1.0, "write_manifest: overlap out of range");
    check(e.keypoints_a.empty() == e.keypoints_b.empty(),
          "write_manifest: keypoint lists must come in pairs");
    out << e.fragment_a << ' ' << e.fragment_b;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) out << ' ' << e.transform_gt(r, c);
    }
    out << ' ' << e.overlap;
    if (!e.keypoints_a.empty()) out << ' ' << e.keypoints_a << ' ' << e.keypoints_b;
    out << '\n';
  }
  check(out.good(), "write_manifest: write failed for " + path);
}

// Reads a manifest; relative paths are resolved against the manifest's own
// directory, and every referenced file must exist.
inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_manifest: cannot open " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  const auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_relative()) fp = base / fp;
    check(std::filesystem::exists(fp),
          "read_manifest: referenced file missing: " + fp.string());
    return fp.string();
  };

  DatasetManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    ls >> e.fragment_a >> e.fragment_b;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) ls >> e.transform_gt(r, c);
    }
    ls >> e.overlap;
    check(!ls.fail(), "read_manifest: malformed record at line " +
                          std::to_string(line_no));
    std::string kp_a, kp_b;
    if (ls >> kp_a) {
      check(static_cast<bool>(ls >> kp_b),
            "read_manifest: keypoint lists must come in pairs (line " +
                std::to_string(line_no) + ")");
    }
    check(e.overlap >= 0.0 && e.overlap <= 1.0,
          "read_manifest: overlap out of range at line " + std::to_string(line_no));
    e.fragment_a = resolve(e.fragment_a);
    e.fragment_b = resolve(e.fragment_b);
    if (!kp_a.empty()) {
      e.keypoints_a = resolve(kp_a);
      e.keypoints_b = resolve(kp_b);
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

// Keypoint lists are plain text: one non-negative point index per line.
inline void write_keypoint_list(const std::vector<int>& indices,
                                const std::string& path) {
  std::ofstream out(path);
  check(out.good(), "write_keypoint_list: cannot open " + path);
  for (int i : indices) {
    check(i >= 0, "write_keypoint_list: negative index");
    out << i << '\n';
  }
  check(out.good(), "write_keypoint_list: write failed for " + path);
}

inline std::vector<int> read_keypoint_list(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "read_keypoint_list: cannot open " + path);
  std::vector<int> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    long long v = 0;
    ls >> v;
    std::string rest;
    check(!ls.fail() && !(ls >> rest),
          "read_keypoint_list: malformed line " + std::to_string(line_no));
    check(v >= 0, "read_keypoint_list: negative index at line " +
                      std::to_string(line_no));
    out.push_back(static_cast<int>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic desk scenes

struct SyntheticConfig {
  std::string out_dir;
  int n_pairs = 8;
  int points_per_fragment = 5000;
  int keypoints_per_fragment = 250;
  double noise_sigma = 0.002;  // meters, applied after carving
  double dropout = 0.0;        // fraction of points randomly removed
  PlyFormat format = PlyFormat::kBinaryLE;
};

namespace detail {

struct Surface {
  double area = 0.0;
  // fills one sample: position and outward normal
  virtual void sample(Rng& rng, Vec3& p, Vec3& n) const = 0;
  virtual ~Surface() = default;
};

struct PlanePatch final : Surface {
  double half = 0.6;
  PlanePatch() { area = 4.0 * half * half; }
  void sample(Rng& rng, Vec3& p, Vec3& n) const override {
    p = Vec3(rng.uniform(-half, half), rng.uniform(-half, half), 0.0);
    n = Vec3(0, 0, 1);
  }
};

struct Box final : Surface {
  Vec3 center;
  Vec3 h;       // half extents
  double yaw = 0.0;
  std::array<double, 6> face_cum{};  // cumulative face areas
  Box(Rng& rng) {
    h = Vec3(rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3),
             rng.uniform(0.08, 0.3));
    center = Vec3(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), h.z());
    yaw = rng.uniform(0.0, 2.0 * M_PI);
    const double fa[6] = {4 * h.y() * h.z(), 4 * h.y() * h.z(), 4 * h.x() * h.z(),
                          4 * h.x() * h.z(), 4 * h.x() * h.y(), 4 * h.x() * h.y()};
    double acc = 0.0;
    for (int f = 0; f < 6; ++f) {
      acc += fa[f];
      face_cum[static_cast<std::size_t>(f)] = acc;
    }
    area = acc;
  }
  void sample(Rng& rng, Vec3& p, Vec3& n) const override {
    const double pick = rng.uniform(0.0, area);
    int f = 0;
    while (f < 5 && pick > face_cum[static_cast<std::size_t>(f)]) ++f;
    const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    Vec3 local, nl;
    switch (f) {
      case 0: local = Vec3(+h.x(), u * h.y(), v * h.z()); nl = Vec3(+1, 0, 0); break;
      case 1: local = Vec3(-h.x(), u * h.y(), v * h.z()); nl = Vec3(-1, 0, 0); break;
      case 2: local = Vec3(u * h.x(), +h.y(), v * h.z()); nl = Vec3(0, +1, 0); break;
      case 3: local = Vec3(u * h.x(), -h.y(), v * h.z()); nl = Vec3(0, -1, 0); break;
      case 4: local = Vec3(u * h.x(), v * h.y(), +h.z()); nl = Vec3(0, 0, +1); break;
      default: local = Vec3(u * h.x(), v * h.y(), -h.z()); nl = Vec3(0, 0, -1); break;
    }
    Mat3 r;
    r << std::cos(yaw), -std::sin(yaw), 0, std::sin(yaw), std::cos(yaw), 0, 0, 0, 1;
    p = r * local + center;
    n = r * nl;
  }
};

struct Ball final : Surface {
  Vec3 center;
  double radius = 0.1;
  Ball(Rng& rng) {
    radius = rng.uniform(0.07, 0.2);
    center = Vec3(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                  radius + rng.uniform(0.0, 0.3));
    area = 4.0 * M_PI * radius * radius;
  }
  void sample(Rng& rng, Vec3& p, Vec3& n) const override {
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    double len = dir.norm();
    while (len < 1e-9) {  // vanishing draw: re-sample
      dir = Vec3(rng.normal(), rng.normal(), rng.normal());
      len = dir.norm();
    }
    n = dir / len;
    p = center + radius * n;
  }
};

struct Tube final : Surface {
  Vec3 base;  // center of the bottom cap
  double radius = 0.1, height = 0.3;
  double lateral = 0.0, cap = 0.0;
  Tube(Rng& rng) {
    radius = rng.uniform(0.05, 0.15);
    height = rng.uniform(0.1, 0.5);
    base = Vec3(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), 0.0);
    lateral = 2.0 * M_PI * radius * height;
    cap = M_PI * radius * radius;
    area = lateral + 2.0 * cap;
  }
  void sample(Rng& rng, Vec3& p, Vec3& n) const override {
    const double pick = rng.uniform(0.0, area);
    const double a = rng.uniform(0.0, 2.0 * M_PI);
    if (pick < lateral) {
      n = Vec3(std::cos(a), std::sin(a), 0.0);
      p = base + radius * n + Vec3(0, 0, rng.uniform(0.0, height));
    } else {
      const double r = radius * std::sqrt(rng.uniform());
      const bool top = pick < lateral + cap;
      n = Vec3(0, 0, top ? 1.0 : -1.0);
      p = base + Vec3(r * std::cos(a), r * std::sin(a), top ? height : 0.0);
    }
  }
};

}  // namespace detail

// Builds n_pairs synthetic desk scenes: random primitives sampled as surface
// points, carved into two overlapping partial views, the second carried into
// its own frame by a random rigid motion (recorded as the alignment that
// brings it back), then Gaussian noise and optional dropout. Writes cloud and
// keypoint files plus "dataset.txt" into out_dir and returns the manifest
// with resolved paths. Fully deterministic per seed.
inline DatasetManifest gen_synthetic(std::uint64_t seed, const SyntheticConfig& cfg) {
  check(!cfg.out_dir.empty(), "gen_synthetic: out_dir is required");
  check(cfg.n_pairs >= 1, "gen_synthetic: n_pairs must be positive");
  check(cfg.points_per_fragment >= 100,
        "gen_synthetic: need at least 100 points per fragment");
  check(cfg.keypoints_per_fragment >= 1, "gen_synthetic: need at least 1 keypoint");
  check(cfg.noise_sigma >= 0.0, "gen_synthetic: negative noise");
  check(cfg.dropout >= 0.0 && cfg.dropout < 0.9, "gen_synthetic: dropout out of range");
  std::filesystem::create_directories(cfg.out_dir);

  DatasetManifest manifest;
  for (int pair_i = 0; pair_i < cfg.n_pairs; ++pair_i) {
    Rng rng(derive_seed(seed, 900, static_cast<std::uint64_t>(pair_i), 0));

    // scene: ground plane plus enough solids that most of the surface area
    // carries distinctive local geometry rather than featureless flatness
    std::vector<std::unique_ptr<detail::Surface>> surfaces;
    surfaces.push_back(std::make_unique<detail::PlanePatch>());
    const int n_boxes = 2 + static_cast<int>(rng.uniform_int(2));
    const int n_balls = 2 + static_cast<int>(rng.uniform_int(2));
    const int n_tubes = 1 + static_cast<int>(rng.uniform_int(2));
    for (int i = 0; i < n_boxes; ++i) {
      surfaces.push_back(std::make_unique<detail::Box>(rng));
    }
    for (int i = 0; i < n_balls; ++i) {
      surfaces.push_back(std::make_unique<detail::Ball>(rng));
    }
    for (int i = 0; i < n_tubes; ++i) {
      surfaces.push_back(std::make_unique<detail::Tube>(rng));
    }
    double total_area = 0.0;
    for (const auto& s : surfaces) total_area += s->area;

    // sample the full scene area-uniformly; carving keeps ~70% per side
    const int n_total = static_cast<int>(
        std::ceil(static_cast<double>(cfg.points_per_fragment) / 0.7));
    PointCloud scene;
    scene.points.resize(static_cast<std::size_t>(n_total));
    scene.normals.resize(static_cast<std::size_t>(n_total));
    for (int i = 0; i < n_total; ++i) {
      double pick = rng.uniform(0.0, total_area);
      std::size_t s = 0;
      while (s + 1 < surfaces.size() && pick > surfaces[s]->area) {
        pick -= surfaces[s]->area;
        ++s;
      }
      surfaces[s]->sample(rng, scene.points[static_cast<std::size_t>(i)],
                          scene.normals[static_cast<std::size_t>(i)]);
    }

    // orient normals toward a virtual overhead sensor
    const Vec3 sensor(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                      rng.uniform(2.0, 3.0));
    for (int i = 0; i < n_total; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      if (scene.normals[si].dot(sensor - scene.points[si]) < 0.0) {
        scene.normals[si] = -scene.normals[si];
      }
    }

    // two partial views: keep everything below the 70th / above the 30th
    // percentile of a random horizontal coordinate
    const int axis = static_cast<int>(rng.uniform_int(2));
    std::vector<double> coords(static_cast<std::size_t>(n_total));
    for (int i = 0; i < n_total; ++i) {
      coords[static_cast<std::size_t>(i)] =
          scene.points[static_cast<std::size_t>(i)][axis];
    }
    std::vector<double> sorted = coords;
    std::sort(sorted.begin(), sorted.end());
    const double lo = sorted[static_cast<std::size_t>(0.3 * (n_total - 1))];
    const double hi = sorted[static_cast<std::size_t>(0.7 * (n_total - 1))];

    // random rigid motion carrying the scene into fragment B's frame;
    // transform_gt is its inverse (it brings B back onto A)
    Vec3 axis_dir(rng.normal(), rng.normal(), rng.normal());
    axis_dir.normalize();
    const double angle = rng.uniform(0.2, M_PI);
    const Mat3 k = (Mat3() << 0, -axis_dir.z(), axis_dir.y(), axis_dir.z(), 0,
                    -axis_dir.x(), -axis_dir.y(), axis_dir.x(), 0)
                       .finished();
    const Mat3 rot =
        Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
    const Vec3 trans(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                     rng.uniform(-0.5, 0.5));

    PointCloud frag_a, frag_b;
    frag_a.sensor_origin = sensor;
    frag_b.sensor_origin = rot.transpose() * (sensor - trans);
    for (int i = 0; i < n_total; ++i) {
      const std::size_t si = static_cast<std::size_t>(i);
      if (coords[si] <= hi) {
        frag_a.points.push_back(scene.points[si]);
        frag_a.normals.push_back(scene.normals[si]);
      }
      if (coords[si] >= lo) {
        frag_b.points.push_back(rot.transpose() * (scene.points[si] - trans));
        frag_b.normals.push_back(rot.transpose() * scene.normals[si]);
      }
    }

    // measurement noise after carving, then dropout
    for (PointCloud* frag : {&frag_a, &frag_b}) {
      for (auto& p : frag->points) {
        p += cfg.noise_sigma * Vec3(rng.normal(), rng.normal(), rng.normal());
      }
      if (cfg.dropout > 0.0) {
        PointCloud kept;
        kept.sensor_origin = frag->sensor_origin;
        for (std::size_t i = 0; i < frag->size(); ++i) {
          if (rng.uniform() >= cfg.dropout) {
            kept.points.push_back(frag->points[i]);
            kept.normals.push_back(frag->normals[i]);
          }
        }
        *frag = std::move(kept);
      }
    }

    Mat4 transform_gt = Mat4::Identity();
    transform_gt.block<3, 3>(0, 0) = rot;
    transform_gt.block<3, 1>(0, 3) = trans;

    // measured overlap: fraction of A with an aligned-B neighbor within 1 cm
    PointCloud aligned_b;
    aligned_b.points.reserve(frag_b.size());
    for (const auto& q : frag_b.points) {
      aligned_b.points.push_back(transform_point(transform_gt, q));
    }
    const SpatialIndex index_b(aligned_b);
    int with_neighbor = 0;
    for (const auto& p : frag_a.points) {
      const auto nn = index_b.knn(p, 1);
      if ((aligned_b.points[static_cast<std::size_t>(nn[0])] - p).norm() < 0.01) {
        ++with_neighbor;
      }
    }
    const double overlap =
        static_cast<double>(with_neighbor) / static_cast<double>(frag_a.size());

    // keypoints: random points whose neighborhood normals disperse, so each
    // sits on curved or edge geometry with a matchable local appearance;
    // flat-plane interiors (dispersion ~0) only top up a shortfall
    const auto pick_keypoints = [&](const PointCloud& frag) {
      const SpatialIndex index(frag);
      std::vector<int> salient, flat;
      for (std::size_t i = 0; i < frag.size(); ++i) {
        const auto nbrs = index.knn(frag.points[i], 13);
        Vec3 mean = Vec3::Zero();
        for (int j : nbrs) mean += frag.normals[static_cast<std::size_t>(j)];
        mean /= static_cast<double>(nbrs.size());
        (1.0 - mean.norm() > 0.01 ? salient : flat).push_back(static_cast<int>(i));
      }
      shuffle(salient, rng);
      shuffle(flat, rng);
      salient.insert(salient.end(), flat.begin(), flat.end());
      const std::size_t k =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.keypoints_per_fragment),
                                salient.size());
      salient.resize(k);
      return salient;
    };

    char tag[32];
    std::snprintf(tag, sizeof(tag), "scene%03d", pair_i);
    const std::string base_a = std::string(tag) + "_a";
    const std::string base_b = std::string(tag) + "_b";
    const std::filesystem::path dir(cfg.out_dir);
    write_ply(frag_a, (dir / (base_a + ".ply")).string(), cfg.format);
    write_ply(frag_b, (dir / (base_b + ".ply")).string(), cfg.format);
    write_keypoint_list(pick_keypoints(frag_a), (dir / (base_a + ".kp")).string());
    write_keypoint_list(pick_keypoints(frag_b), (dir / (base_b + ".kp")).string());

    ManifestEntry entry;
    entry.fragment_a = base_a + ".ply";
    entry.fragment_b = base_b + ".ply";
    entry.transform_gt = transform_gt;
    entry.overlap = overlap;
    entry.keypoints_a = base_a + ".kp";
    entry.keypoints_b = base_b + ".kp";
    manifest.entries.push_back(std::move(entry));
  }

  const std::string manifest_path =
      (std::filesystem::path(cfg.out_dir) / "dataset.txt").string();
  write_manifest(manifest, manifest_path);
  return read_manifest(manifest_path);  // round-trips and validates references
}

// Loads a manifest entry into a training-ready pair: clouds with normals
// (estimated toward the recorded sensor when absent) and splat radii.
inline FragmentPair load_pair(const ManifestEntry& entry,
                              AdaptiveRadius radii = {8, 1.0}) {
  FragmentPair pair;
  pair.cloud_p = read_ply(entry.fragment_a);
  pair.cloud_q = read_ply(entry.fragment_b);
  pair.transform_gt = entry.transform_gt;
  pair.overlap = entry.overlap;
  for (PointCloud* cloud : {&pair.cloud_p, &pair.cloud_q}) {
    if (!cloud->has_normals()) {
      *cloud = estimate_normals(*cloud, 16,
                                cloud->sensor_origin.value_or(Vec3(0, 0, 10)));
    }
    *cloud = compute_radii(*cloud, radii);
  }
  validate(pair);
  return pair;
}

}  // namespace mvdesc
