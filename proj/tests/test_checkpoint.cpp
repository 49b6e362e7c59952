#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "icl/checkpoint.hpp"
#include "icl/net.hpp"

using namespace icl;

TEST_CASE("checkpoint byte layout") {
  net::ParamSet<float> p;
  p.add("w", 2, 1) << 1.0f, -2.0f;
  p.add("g", 1, 2, 1) << 0.5f, 0.25f;
  const std::string b = net::serialize(p);
  const unsigned char expected[] = {
      'I', 'C', 'L', 'B', 1, 0, 0, 0, 2, 0, 0, 0,           // magic, version, count
      1, 0, 'w', 2, 2, 0, 0, 0, 1, 0, 0, 0,                 // "w", rank 2, dims 2 x 1
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,       // 1.0f, -2.0f
      1, 0, 'g', 1, 2, 0, 0, 0,                             // "g", rank 1, dim 2
      0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80, 0x3e};      // 0.5f, 0.25f
  REQUIRE(b.size() == sizeof(expected));
  CHECK(std::memcmp(b.data(), expected, sizeof(expected)) == 0);
}

TEST_CASE("checkpoint round trip is bitwise") {
  net::ModelConfig m;
  m.pe = net::PosEncoding::Hybrid;
  m.m2_dim = 32;
  m.encoder = true;
  m.encoder_classes = 10;
  m.zero_init_classifier = false;
  const auto p = net::init_params(m, 3);
  const auto dir = std::filesystem::temp_directory_path() / "icl_ckpt_test";
  const std::string path = (dir / "model.iclb").string();
  net::save_checkpoint(path, p, "{\"seed\": 3}");
  const auto q = net::load_checkpoint(path);
  CHECK(q.bitwise_equal(p));
  for (size_t i = 0; i < p.size(); ++i) CHECK(q.tensors()[i].rank == p.tensors()[i].rank);
  CHECK(net::read_file(net::config_echo_path(path)) == "{\"seed\": 3}");
  std::filesystem::remove_all(dir);
}

TEST_CASE("malformed checkpoints are rejected") {
  net::ParamSet<float> p;
  p.add("w", 2, 2);
  std::string b = net::serialize(p);
  CHECK_THROWS_AS(net::deserialize(b.substr(0, b.size() - 1)), ConfigError);
  CHECK_THROWS_AS(net::deserialize(b + "x"), ConfigError);
  std::string bad = b;
  bad[0] = 'X';
  CHECK_THROWS_AS(net::deserialize(bad), ConfigError);
  bad = b;
  bad[4] = 2;
  CHECK_THROWS_AS(net::deserialize(bad), ConfigError);
}
