#include "ron/model_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

#include "ron/errors.hpp"

namespace ron {
namespace {

using json = nlohmann::json;

constexpr std::string_view kModelMagic = "RONM1\n";
constexpr std::string_view kDataMagic = "ROND1\n";

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void append_le(std::string& out, const double* values, std::size_t count) {
  const std::size_t start = out.size();
  out.resize(start + 8 * count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values, 8 * count);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(values[i]);
      for (int b = 0; b < 8; ++b)
        out[start + 8 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

void read_le(const char* src, double* values, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values, src, 8 * count);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(src[8 * i + static_cast<std::size_t>(b)])) << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
  }
}

std::string crc_hex(const char* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc & 0xffffffffUL));
  return buf;
}

class BlobWriter {
 public:
  json add(const double* values, std::size_t count, std::vector<Index> shape) {
    json t;
    t["shape"] = shape;
    t["offset"] = blob_.size();
    t["count"] = count;
    const std::size_t start = blob_.size();
    append_le(blob_, values, count);
    t["crc32"] = crc_hex(blob_.data() + start, 8 * count);
    return t;
  }
  json add(const Matrix& m) { return add(m.data(), static_cast<std::size_t>(m.size()), {m.rows(), m.cols()}); }
  json add(const Vector& v) { return add(v.data(), static_cast<std::size_t>(v.size()), {v.size()}); }

  const std::string& blob() const { return blob_; }

 private:
  std::string blob_;
};

class BlobReader {
 public:
  explicit BlobReader(std::string_view blob) : blob_(blob) {}

  std::vector<double> read(const json& t, const std::string& where) const {
    if (!t.is_object() || !t.contains("offset") || !t.contains("count") || !t.contains("crc32"))
      throw ParseError(where + ": tensor descriptor incomplete");
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = t.at("count").get<std::uint64_t>();
    if (offset % 8 != 0 || offset > blob_.size() || count > (blob_.size() - offset) / 8)
      throw ParseError(where + ": tensor extends past the end of the blob");
    const char* src = blob_.data() + offset;
    if (crc_hex(src, 8 * count) != t.at("crc32").get<std::string>())
      throw ChecksumError(where + ": checksum mismatch");
    std::vector<Index> shape = t.at("shape").get<std::vector<Index>>();
    Index expected = 1;
    for (Index s : shape) expected *= s;
    if (expected != static_cast<Index>(count))
      throw ShapeError(where + ": declared shape does not match element count");
    std::vector<double> out(count);
    read_le(src, out.data(), count);
    return out;
  }

  Matrix matrix(const json& t, const std::string& where) const {
    const auto values = read(t, where);
    const auto shape = t.at("shape").get<std::vector<Index>>();
    if (shape.size() != 2) throw ShapeError(where + ": expected a 2-d tensor");
    return Eigen::Map<const Matrix>(values.data(), shape[0], shape[1]);
  }

  Vector vector(const json& t, const std::string& where) const {
    const auto values = read(t, where);
    if (t.at("shape").size() != 1) throw ShapeError(where + ": expected a 1-d tensor");
    return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
  }

 private:
  std::string_view blob_;
};

json activation_json(const Activation& a) {
  json j{{"kind", a.name()}};
  if (a.type == ActivationType::leaky_relu) j["slope"] = a.param;
  if (a.type == ActivationType::elu) j["alpha"] = a.param;
  return j;
}

Activation activation_from(const json& j, const std::string& where) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "identity") return Activation::identity();
  if (kind == "relu") return Activation::relu();
  if (kind == "leaky_relu") return Activation::leaky_relu(j.at("slope").get<double>());
  if (kind == "elu") return Activation::elu(j.at("alpha").get<double>());
  throw UnsupportedError(where + ": unknown activation '" + kind + "'");
}

json layers_json(const std::vector<Layer>& layers, BlobWriter& blob);

json layer_json(const Layer& layer, BlobWriter& blob) {
  json j;
  j["type"] = layer.tag();
  if (const auto* d = std::get_if<DenseLayer>(&layer.op)) {
    j["tensors"] = {{"weight", blob.add(d->weight)}, {"bias", blob.add(d->bias)}};
  } else if (const auto* c = std::get_if<Conv2dLayer>(&layer.op)) {
    const Kernel& k = c->kernel;
    j["stride"] = c->stride;
    j["padding"] = c->padding;
    j["tensors"] = {
        {"kernel", blob.add(k.data.data(), k.data.size(), {k.out_channels, k.in_channels, k.height, k.width})},
        {"bias", blob.add(c->bias)}};
  } else if (const auto* b = std::get_if<BatchNormLayer>(&layer.op)) {
    j["eps"] = b->eps;
    j["tensors"] = {{"gamma", blob.add(b->gamma)},
                    {"beta", blob.add(b->beta)},
                    {"mean", blob.add(b->mean)},
                    {"var", blob.add(b->var)}};
  } else if (std::holds_alternative<MaxPoolLayer>(layer.op)) {
    j["window"] = 2;
    j["stride"] = 2;
  } else if (const auto* a = std::get_if<ActivationLayer>(&layer.op)) {
    j["activation"] = activation_json(a->kind);
  } else if (const auto* r = std::get_if<ResidualLayer>(&layer.op)) {
    json branches = json::array();
    for (const auto& br : r->branches) branches.push_back(layers_json(br, blob));
    j["branches"] = std::move(branches);
  }
  return j;
}

json layers_json(const std::vector<Layer>& layers, BlobWriter& blob) {
  json arr = json::array();
  for (const auto& l : layers) arr.push_back(layer_json(l, blob));
  return arr;
}

std::vector<Layer> layers_from(const json& arr, const BlobReader& blob, const std::string& prefix);

Layer layer_from(const json& j, const BlobReader& blob, const std::string& where) {
  const auto type = j.at("type").get<std::string>();
  const auto tensor = [&](const char* name) -> const json& {
    if (!j.contains("tensors") || !j.at("tensors").contains(name))
      throw ParseError(where + ": missing tensor '" + name + "'");
    return j.at("tensors").at(name);
  };
  const auto tw = [&](const char* name) { return where + " tensor " + name; };

  if (type == "dense") {
    return Layer{DenseLayer{blob.matrix(tensor("weight"), tw("weight")), blob.vector(tensor("bias"), tw("bias"))}};
  }
  if (type == "conv2d") {
    Conv2dLayer c;
    const json& kt = tensor("kernel");
    c.kernel.data = blob.read(kt, tw("kernel"));
    const auto shape = kt.at("shape").get<std::vector<Index>>();
    if (shape.size() != 4) throw ShapeError(tw("kernel") + ": expected a 4-d tensor");
    c.kernel.out_channels = shape[0];
    c.kernel.in_channels = shape[1];
    c.kernel.height = shape[2];
    c.kernel.width = shape[3];
    c.bias = blob.vector(tensor("bias"), tw("bias"));
    c.stride = j.value("stride", Index{1});
    c.padding = j.value("padding", Index{0});
    return Layer{std::move(c)};
  }
  if (type == "batchnorm") {
    return Layer{BatchNormLayer{blob.vector(tensor("gamma"), tw("gamma")), blob.vector(tensor("beta"), tw("beta")),
                                blob.vector(tensor("mean"), tw("mean")), blob.vector(tensor("var"), tw("var")),
                                j.at("eps").get<double>()}};
  }
  if (type == "maxpool") {
    if (j.value("window", 2) != 2 || j.value("stride", 2) != 2)
      throw UnsupportedError(where + ": only 2x2 stride-2 max pooling is supported");
    return Layer{MaxPoolLayer{}};
  }
  if (type == "activation") return Layer{ActivationLayer{activation_from(j.at("activation"), where)}};
  if (type == "residual") {
    ResidualLayer r;
    const json& branches = j.at("branches");
    for (std::size_t b = 0; b < branches.size(); ++b)
      r.branches.push_back(layers_from(branches[b], blob, where + " branch " + std::to_string(b) + " "));
    return Layer{std::move(r)};
  }
  throw UnsupportedError(where + ": unsupported layer type '" + type + "'");
}

std::vector<Layer> layers_from(const json& arr, const BlobReader& blob, const std::string& prefix) {
  if (!arr.is_array()) throw ParseError(prefix + "layers must be an array");
  std::vector<Layer> out;
  for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(layer_from(arr[i], blob, prefix + "layer " + std::to_string(i)));
  return out;
}

json shape_json(const Shape& s) { return json::array({s.channels, s.height, s.width}); }

Shape shape_from(const json& j) {
  const auto v = j.get<std::vector<Index>>();
  if (v.size() == 1) return Shape::flat(v[0]);
  if (v.size() != 3) throw ParseError("input_shape must have 1 or 3 entries");
  return {v[0], v[1], v[2]};
}

std::string pack(const json& manifest, const std::string& blob) {
  const std::string text = manifest.dump(2) + "\n";
  std::string out(kModelMagic);
  out += std::to_string(text.size()) + "\n";
  out += text;
  out += blob;
  return out;
}

// Splits a model file into manifest and blob.
std::pair<json, std::string_view> unpack(const std::string& bytes) {
  if (bytes.compare(0, kModelMagic.size(), kModelMagic) != 0)
    throw ParseError("not a .ronm file (bad magic)");
  const std::size_t nl = bytes.find('\n', kModelMagic.size());
  if (nl == std::string::npos) throw ParseError("truncated .ronm header");
  std::size_t len = 0;
  try {
    len = std::stoull(bytes.substr(kModelMagic.size(), nl - kModelMagic.size()));
  } catch (const std::exception&) {
    throw ParseError("bad manifest length in .ronm header");
  }
  if (len > bytes.size() - nl - 1) throw ParseError("manifest extends past end of file");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(nl + 1),
                           bytes.begin() + static_cast<std::ptrdiff_t>(nl + 1 + len));
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "ronm" || manifest.value("version", 0) != 1)
    throw ParseError("manifest: unsupported format or version");
  if (manifest.value("dtype", "") != "float64") throw UnsupportedError("manifest: dtype must be float64");
  return {std::move(manifest), std::string_view(bytes).substr(nl + 1 + len)};
}

template <class F>
auto guard_json(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
}

json stage_json(const StudentStage& s, BlobWriter& blob) {
  return {{"type", "stage"},
          {"activation", activation_json(s.activation)},
          {"pool_window", s.pool_window},
          {"tensors", {{"weight", blob.add(s.weight)}, {"bias", blob.add(s.bias)}}}};
}

StudentStage stage_from(const json& j, const BlobReader& blob, const std::string& where) {
  StudentStage s;
  s.weight = blob.matrix(j.at("tensors").at("weight"), where + " tensor weight");
  s.bias = blob.vector(j.at("tensors").at("bias"), where + " tensor bias");
  s.activation = activation_from(j.at("activation"), where);
  s.pool_window = j.at("pool_window").get<Index>();
  return s;
}

}  // namespace

std::string serialize_model(const TeacherNetwork& net) {
  BlobWriter blob;
  json m;
  m["format"] = "ronm";
  m["version"] = 1;
  m["kind"] = "teacher";
  m["dtype"] = "float64";
  m["byte_order"] = "little";
  m["input_shape"] = shape_json(net.input_shape);
  m["layers"] = layers_json(net.layers, blob);
  return pack(m, blob.blob());
}

TeacherNetwork parse_model(const std::string& bytes) {
  return guard_json([&] {
    auto [manifest, blob_bytes] = unpack(bytes);
    if (manifest.value("kind", "") != "teacher") throw ParseError("manifest: kind is not 'teacher'");
    const BlobReader blob(blob_bytes);
    TeacherNetwork net;
    net.input_shape = shape_from(manifest.at("input_shape"));
    net.layers = layers_from(manifest.at("layers"), blob, "");
    net.validate();
    return net;
  });
}

std::string serialize_student(const StudentNetwork& net) {
  BlobWriter blob;
  json m;
  m["format"] = "ronm";
  m["version"] = 1;
  m["kind"] = "student";
  m["dtype"] = "float64";
  m["byte_order"] = "little";
  m["input_shape"] = shape_json(net.input_shape);
  m["prefix"] = layers_json(net.prefix, blob);
  json blocks = json::array();
  for (const auto& b : net.blocks) {
    if (const auto* s = std::get_if<StudentStage>(&b.op)) {
      blocks.push_back(stage_json(*s, blob));
      continue;
    }
    const auto& r = std::get<StudentResidual>(b.op);
    json branches = json::array();
    for (const auto& br : r.branches) {
      json arr = json::array();
      for (const auto& s : br) arr.push_back(stage_json(s, blob));
      branches.push_back(std::move(arr));
    }
    json merges = json::array();
    for (const auto& mm : r.merges) merges.push_back(blob.add(mm));
    blocks.push_back({{"type", "residual"},
                      {"activation", activation_json(r.activation)},
                      {"branches", std::move(branches)},
                      {"merges", std::move(merges)}});
  }
  m["blocks"] = std::move(blocks);
  m["lift"] = blob.add(net.lift);
  return pack(m, blob.blob());
}

StudentNetwork parse_student(const std::string& bytes) {
  return guard_json([&] {
    auto [manifest, blob_bytes] = unpack(bytes);
    if (manifest.value("kind", "") != "student") throw ParseError("manifest: kind is not 'student'");
    const BlobReader blob(blob_bytes);
    StudentNetwork net;
    net.input_shape = shape_from(manifest.at("input_shape"));
    net.prefix = layers_from(manifest.at("prefix"), blob, "prefix ");
    const json& blocks = manifest.at("blocks");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const json& bj = blocks[i];
      const std::string where = "block " + std::to_string(i);
      const auto type = bj.at("type").get<std::string>();
      if (type == "stage") {
        net.blocks.push_back({stage_from(bj, blob, where)});
      } else if (type == "residual") {
        StudentResidual r;
        r.activation = activation_from(bj.at("activation"), where);
        for (std::size_t b = 0; b < bj.at("branches").size(); ++b) {
          std::vector<StudentStage> br;
          const json& arr = bj.at("branches")[b];
          for (std::size_t s = 0; s < arr.size(); ++s)
            br.push_back(stage_from(arr[s], blob, where + " branch " + std::to_string(b) + " stage " + std::to_string(s)));
          r.branches.push_back(std::move(br));
        }
        for (std::size_t b = 0; b < bj.at("merges").size(); ++b)
          r.merges.push_back(blob.matrix(bj.at("merges")[b], where + " merge " + std::to_string(b)));
        net.blocks.push_back({std::move(r)});
      } else {
        throw UnsupportedError(where + ": unsupported block type '" + type + "'");
      }
    }
    net.lift = blob.matrix(manifest.at("lift"), "lift");
    net.validate();
    return net;
  });
}

std::string model_kind(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return guard_json([&] { return unpack(bytes).first.value("kind", std::string()); });
}

TeacherNetwork load_model(const std::filesystem::path& path) {
  try {
    return parse_model(read_file(path));
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw_error(e.kind(), path.string() + ": " + e.what());
  }
}

void save_model(const TeacherNetwork& net, const std::filesystem::path& path) {
  write_file(path, serialize_model(net));
}

StudentNetwork load_student(const std::filesystem::path& path) {
  try {
    return parse_student(read_file(path));
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw_error(e.kind(), path.string() + ": " + e.what());
  }
}

void save_student(const StudentNetwork& net, const std::filesystem::path& path) {
  write_file(path, serialize_student(net));
}

Matrix load_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.compare(0, kDataMagic.size(), kDataMagic) != 0)
    throw ParseError(path.string() + ": not a .rond file (bad magic)");
  const std::size_t nl = bytes.find('\n', kDataMagic.size());
  if (nl == std::string::npos) throw ParseError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(kDataMagic.size(), nl - kDataMagic.size()));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": header: " + e.what());
  }
  if (header.value("dtype", "") != "float64")
    throw UnsupportedError(path.string() + ": dtype must be float64");
  const auto rows = header.value("rows", Index{-1});
  const auto cols = header.value("cols", Index{-1});
  if (rows < 0 || cols < 0) throw ParseError(path.string() + ": header needs rows and cols");
  const std::size_t need = 8 * static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  if (bytes.size() - nl - 1 != need)
    throw ParseError(path.string() + ": payload is " + std::to_string(bytes.size() - nl - 1) +
                     " bytes, header implies " + std::to_string(need));
  Matrix m(rows, cols);
  read_le(bytes.data() + nl + 1, m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

void save_dataset(const Matrix& data, const std::filesystem::path& path) {
  std::string out(kDataMagic);
  out += json{{"rows", data.rows()}, {"cols", data.cols()}, {"dtype", "float64"}}.dump() + "\n";
  append_le(out, data.data(), static_cast<std::size_t>(data.size()));
  write_file(path, out);
}

}  // namespace ron
