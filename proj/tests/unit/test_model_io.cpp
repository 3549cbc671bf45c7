#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "../support/oracles.hpp"
#include "ron/errors.hpp"
#include "ron/model_io.hpp"

using namespace ron;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ron_test_model_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// Replaces the manifest of a serialized model, keeping the blob.
std::string with_manifest(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  const auto nl1 = bytes.find('\n');
  const auto nl2 = bytes.find('\n', nl1 + 1);
  const auto len = std::stoul(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  auto manifest = nlohmann::json::parse(bytes.substr(nl2 + 1, len));
  edit(manifest);
  const std::string text = manifest.dump(2) + "\n";
  return bytes.substr(0, nl1 + 1) + std::to_string(text.size()) + "\n" + text + bytes.substr(nl2 + 1 + len);
}

TeacherNetwork conv_net(oracle::Rng& rng) {
  TeacherNetwork net;
  net.input_shape = {2, 6, 6};
  net.layers.push_back(oracle::conv_layer(rng, 2, 3, 3, 1, 1));
  net.layers.push_back(oracle::bn_layer(rng, 3));
  net.layers.push_back({ActivationLayer{Activation::leaky_relu(0.05)}});
  net.layers.push_back({MaxPoolLayer{}});
  ResidualLayer r;
  r.branches.push_back({oracle::conv_layer(rng, 3, 3, 3, 1, 1)});
  r.branches.push_back({});
  net.layers.push_back({r});
  net.layers.push_back({ActivationLayer{Activation::elu(0.5)}});
  net.layers.push_back(oracle::dense_layer(rng, 27, 4));
  return net;
}

}  // namespace

TEST_CASE("teacher round trip is bit-exact") {
  oracle::Rng rng(1);
  SUBCASE("3-layer MLP") {
    const TeacherNetwork net = oracle::mlp(rng, {10, 8, 6, 3});
    save_model(net, scratch("mlp.ronm"));
    const TeacherNetwork back = load_model(scratch("mlp.ronm"));
    REQUIRE(back.layers.size() == net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      CHECK(back.layers[i].tag() == net.layers[i].tag());
      if (const auto* d = std::get_if<DenseLayer>(&net.layers[i].op)) {
        const auto& e = std::get<DenseLayer>(back.layers[i].op);
        CHECK(same_bits(d->weight, e.weight));
        CHECK(same_bits(Matrix(d->bias.transpose()), Matrix(e.bias.transpose())));
      }
    }
    CHECK(serialize_model(back) == serialize_model(net));
  }
  SUBCASE("conv, batch norm, pooling and residual layers") {
    const TeacherNetwork net = conv_net(rng);
    const std::string bytes = serialize_model(net);
    const TeacherNetwork back = parse_model(bytes);
    CHECK(serialize_model(back) == bytes);
    const Matrix x = rng.matrix(3, net.input_dim());
    CHECK(same_bits(forward_teacher(back, x), forward_teacher(net, x)));
    CHECK(back.input_shape == net.input_shape);
  }
}

TEST_CASE("student round trip is bit-exact") {
  oracle::Rng rng(2);
  StudentNetwork s;
  s.input_shape = Shape::flat(5);
  s.prefix = {oracle::dense_layer(rng, 5, 6), oracle::relu()};
  s.blocks.push_back({StudentStage{rng.matrix(8, 6), rng.vector(8), Activation::relu(), 4}});
  StudentResidual r;
  r.branches.push_back({StudentStage{rng.matrix(2, 2), rng.vector(2), Activation::identity(), 1}});
  r.branches.push_back({});
  r.merges = {rng.matrix(3, 2), rng.matrix(3, 2)};
  r.activation = Activation::relu();
  s.blocks.push_back({r});
  s.lift = rng.matrix(4, 3);
  save_student(s, scratch("student.ronm"));
  CHECK(model_kind(scratch("student.ronm")) == "student");
  const StudentNetwork back = load_student(scratch("student.ronm"));
  CHECK(serialize_student(back) == serialize_student(s));
  const Matrix x = rng.matrix(4, 5);
  CHECK(same_bits(forward_student(back, x), forward_student(s, x)));
}

TEST_CASE("dataset round trip") {
  oracle::Rng rng(3);
  const Matrix m = rng.matrix(13, 7);
  save_dataset(m, scratch("d.rond"));
  CHECK(same_bits(load_dataset(scratch("d.rond")), m));
  const std::string bytes = slurp(scratch("d.rond"));
  CHECK(bytes.substr(0, 6) == "ROND1\n");
  CHECK(bytes.size() == 6 + bytes.find('\n', 6) - 6 + 1 + 13 * 7 * 8);
}

TEST_CASE("load errors are distinct") {
  oracle::Rng rng(4);
  const TeacherNetwork net = oracle::mlp(rng, {6, 5, 3});
  const std::string good = serialize_model(net);

  SUBCASE("missing file") { CHECK_THROWS_AS(load_model(scratch("nope.ronm")), IoError); }
  SUBCASE("bad magic") { CHECK_THROWS_AS(parse_model("XXXXX\n" + good.substr(6)), ParseError); }
  SUBCASE("malformed manifest") {
    std::string bad = good;
    bad[bad.find('{') + 3] = '#';
    CHECK_THROWS_AS(parse_model(bad), ParseError);
  }
  SUBCASE("corrupted payload") {
    std::string bad = good;
    bad[bad.size() - 3] ^= 0x10;
    CHECK_THROWS_AS(parse_model(bad), ChecksumError);
  }
  SUBCASE("unsupported layer tag names the layer") {
    const std::string bad = with_manifest(good, [](nlohmann::json& m) { m["layers"][1]["type"] = "dropout"; });
    try {
      parse_model(bad);
      FAIL("expected an unsupported-layer error");
    } catch (const UnsupportedError& e) {
      CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    }
  }
  SUBCASE("shape chain mismatch names the layer") {
    const std::string bad = with_manifest(good, [](nlohmann::json& m) { m["input_shape"] = {7, 1, 1}; });
    try {
      parse_model(bad);
      FAIL("expected a shape error");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
  }
  SUBCASE("declared tensor shape disagrees with its count") {
    const std::string bad = with_manifest(good, [](nlohmann::json& m) {
      m["layers"][0]["tensors"]["weight"]["shape"] = {6, 5};
    });
    CHECK_THROWS_AS(parse_model(bad), ShapeError);
  }
  SUBCASE("student file loaded as teacher") {
    StudentNetwork s;
    s.input_shape = Shape::flat(2);
    s.lift = Matrix::Identity(2, 2);
    CHECK_THROWS_AS(parse_model(serialize_student(s)), ParseError);
  }
}

TEST_CASE("committed fixture reproduces its reference logits") {
  const fs::path dir = RON_FIXTURES;
  const TeacherNetwork net = load_model(dir / "digits_mlp.ronm");
  const Matrix x = load_dataset(dir / "digits_test.rond");
  const Matrix ref = load_dataset(dir / "digits_test_logits.rond");
  CHECK((forward_teacher(net, x) - ref).cwiseAbs().maxCoeff() < 1e-10);
}
