#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lmrc/checkpoint.hpp"
#include "lmrc/model.hpp"
#include "lmrc/rng.hpp"
#include "support/test_util.hpp"

using namespace lmrc;

namespace {

ArchConfig tiny_arch() {
  ArchConfig cfg = ArchConfig::small_cnn(1, 8, 4);
  cfg.width = 2;
  cfg.penultimate_dim = 6;
  return cfg;
}

Tensor random_input(Rng& rng, const ArchConfig& cfg, int batch) {
  std::vector<float> v(static_cast<std::size_t>(batch) * cfg.in_channels * cfg.in_h * cfg.in_w);
  for (auto& e : v) e = rng.uniform(0.0f, 1.0f);
  return Tensor({batch, cfg.in_channels, cfg.in_h, cfg.in_w}, std::move(v));
}

Tensor* find_param(Classifier& m, const std::string& name) {
  for (auto& [n, p] : m.parameters())
    if (n == name) return &p;
  return nullptr;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("zero head gives zero logits and tie-break label 0") {
  Classifier m = Classifier::build(tiny_arch(), 5);
  m.set_mode(Mode::Evaluation);
  for (float& v : find_param(m, "head.weight")->raw_data()) v = 0.0f;
  for (float& v : find_param(m, "head.bias")->raw_data()) v = 0.0f;
  Rng rng(1);
  Tensor logits = m.forward(random_input(rng, m.config(), 3));
  for (float v : logits.data()) CHECK(v == 0.0f);
  for (int label : argmax_labels(logits)) CHECK(label == 0);
}

TEST_CASE("head on a one-hot z selects the weight column") {
  Classifier m = Classifier::build(tiny_arch(), 5);
  m.set_mode(Mode::Evaluation);
  for (float& v : find_param(m, "head.bias")->raw_data()) v = 0.0f;
  const Tensor& w = *find_param(m, "head.weight");
  const int d = m.penultimate_dim(), c = m.classes();
  std::vector<float> z(d, 0.0f);
  z[2] = 1.0f;
  Tensor logits = m.head(Tensor({1, d}, z));
  for (int i = 0; i < c; ++i)
    CHECK(logits.data()[i] == doctest::Approx(w.data()[static_cast<std::size_t>(i) * d + 2]));
}

TEST_CASE("forward equals head of penultimate bit-exactly") {
  Classifier m = Classifier::build(tiny_arch(), 9);
  m.set_mode(Mode::Evaluation);
  Rng rng(2);
  Tensor x = random_input(rng, m.config(), 2);
  CHECK(m.forward(x).data() == m.head(m.penultimate(x)).data());
}

TEST_CASE("relu penultimate is non-negative, duplicate rows match") {
  Classifier m = Classifier::build(tiny_arch(), 12);
  m.set_mode(Mode::Evaluation);
  Rng rng(3);
  Tensor one = random_input(rng, m.config(), 1);
  std::vector<float> two(one.data());
  two.insert(two.end(), one.data().begin(), one.data().end());
  Tensor dup({2, m.config().in_channels, m.config().in_h, m.config().in_w}, two);
  Tensor z = m.penultimate(dup);
  const int d = m.penultimate_dim();
  for (float v : z.data()) CHECK(v >= 0.0f);
  for (int i = 0; i < d; ++i) CHECK(z.data()[i] == z.data()[d + i]);
}

TEST_CASE("penultimate matches an independent layer-by-layer re-execution") {
  Classifier m = Classifier::build(tiny_arch(), 21);
  m.set_mode(Mode::Evaluation);
  Rng rng(4);
  Tensor x = random_input(rng, m.config(), 1);

  auto get = [&](const char* n) { return find_param(m, n)->detached(); };
  auto buf = [&](const char* n) {
    for (auto& [name, b] : m.buffers())
      if (name == n) return b.detached();
    throw std::runtime_error("missing buffer");
  };
  Tensor rm1 = buf("bn1.running_mean"), rv1 = buf("bn1.running_var");
  Tensor rm2 = buf("bn2.running_mean"), rv2 = buf("bn2.running_var");
  Tensor h = conv2d(x, get("conv1.weight"), {}, 1, 1);
  h = batchnorm2d(h, get("bn1.gamma"), get("bn1.beta"), rm1, rv1, false);
  h = avgpool2d(relu(h), 2);
  h = conv2d(h, get("conv2.weight"), {}, 1, 1);
  h = batchnorm2d(h, get("bn2.gamma"), get("bn2.beta"), rm2, rv2, false);
  h = avgpool2d(relu(h), 2);
  h = relu(dense(flatten(h), get("fc1.weight"), get("fc1.bias")));

  Tensor z = m.penultimate(x);
  REQUIRE(z.size() == h.size());
  int nonzero_a = 0, nonzero_b = 0;
  float l1_a = 0, l1_b = 0;
  for (std::size_t i = 0; i < z.data().size(); ++i) {
    if (z.data()[i] != 0.0f) ++nonzero_a;
    if (h.data()[i] != 0.0f) ++nonzero_b;
    l1_a += std::fabs(z.data()[i]);
    l1_b += std::fabs(h.data()[i]);
  }
  CHECK(nonzero_a == nonzero_b);
  CHECK(l1_a == doctest::Approx(l1_b).epsilon(1e-5));
}

TEST_CASE("masked forward") {
  Classifier m = Classifier::build(tiny_arch(), 33);
  m.set_mode(Mode::Evaluation);
  Rng rng(5);
  Tensor x = random_input(rng, m.config(), 2);
  const int d = m.penultimate_dim();

  SUBCASE("all-ones keep equals forward bit-exactly") {
    CHECK(m.masked_forward(x, std::vector<float>(d, 1.0f)).data() == m.forward(x).data());
  }
  SUBCASE("all-zeros keep yields the head bias") {
    Tensor logits = m.masked_forward(x, std::vector<float>(d, 0.0f));
    const Tensor& bias = *find_param(m, "head.bias");
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < m.classes(); ++c)
        CHECK(logits.data()[static_cast<std::size_t>(b) * m.classes() + c] ==
              doctest::Approx(bias.data()[c]));
  }
  SUBCASE("random keep equals manual zeroing of z") {
    std::vector<float> keep(d);
    for (auto& v : keep) v = rng.uniform() < 0.5f ? 0.0f : 1.0f;
    Tensor z = m.penultimate(x);
    std::vector<float> gated(z.data());
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < d; ++i) gated[static_cast<std::size_t>(b) * d + i] *= keep[i];
    Tensor expect = m.head(Tensor({2, d}, gated));
    CHECK(m.masked_forward(x, keep).data() == expect.data());
  }
  SUBCASE("wrong keep length is rejected") {
    CHECK_THROWS_AS(m.masked_forward(x, std::vector<float>(d + 1, 1.0f)), ShapeError);
  }
  SUBCASE("gradient does not flow into the gate") {
    Tensor gate = Tensor::full({2, d}, 1.0f, true);
    CHECK_THROWS_AS(m.masked_forward(x, gate), ShapeError);
  }
}

TEST_CASE("evaluation mode forward is deterministic") {
  Classifier m = Classifier::build(tiny_arch(), 44);
  m.set_mode(Mode::Evaluation);
  Rng rng(6);
  Tensor x = random_input(rng, m.config(), 2);
  CHECK(m.forward(x).data() == m.forward(x).data());
}

TEST_CASE("checkpoint round trip and corruption") {
  testutil::TempDir tmp("model-ckpt");
  const std::string path = tmp.path() + "/m.ckpt";
  Classifier m = Classifier::build(tiny_arch(), 55);
  save_checkpoint(m, path);

  SUBCASE("round trip is bitwise") {
    Classifier loaded = load_checkpoint(path);
    CHECK(loaded.config().descriptor() == m.config().descriptor());
    REQUIRE(loaded.parameters().size() == m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      CHECK(loaded.parameters()[i].first == m.parameters()[i].first);
      CHECK(loaded.parameters()[i].second.data() == m.parameters()[i].second.data());
    }
    for (std::size_t i = 0; i < m.buffers().size(); ++i)
      CHECK(loaded.buffers()[i].second.data() == m.buffers()[i].second.data());
  }
  SUBCASE("truncation is a CRC failure") {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path + ".t", std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size() - 7));
    out.close();
    try {
      load_checkpoint(path + ".t");
      FAIL("truncated checkpoint accepted");
    } catch (const ArtifactError& e) {
      CHECK(e.kind() == ArtifactError::Kind::CrcMismatch);
    }
  }
  SUBCASE("single corrupted payload byte is a CRC failure") {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Rng rng(7);
    for (int rep = 0; rep < 8; ++rep) {
      std::string corrupt = buf;
      const std::size_t at = 40 + rng.uniform_int(static_cast<int>(buf.size() - 60));
      corrupt[at] = static_cast<char>(corrupt[at] ^ 0x11);
      std::ofstream out(path + ".c", std::ios::binary);
      out.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
      out.close();
      CHECK_THROWS_AS(load_checkpoint(path + ".c"), ArtifactError);
    }
  }
  SUBCASE("version mismatch is its own error") {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    buf[4] = 9;  // version field
    const std::uint32_t crc = crc32(buf.data(), buf.size() - 4);
    for (int i = 0; i < 4; ++i)
      buf[buf.size() - 4 + i] = static_cast<char>((crc >> (8 * i)) & 0xFF);
    std::ofstream out(path + ".v", std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.close();
    try {
      load_checkpoint(path + ".v");
      FAIL("future version accepted");
    } catch (const ArtifactError& e) {
      CHECK(e.kind() == ArtifactError::Kind::VersionMismatch);
    }
  }
  SUBCASE("descriptor mismatch when loading into a different architecture") {
    ArchConfig other = tiny_arch();
    other.penultimate_dim = 8;
    Classifier m2 = Classifier::build(other, 1);
    try {
      load_checkpoint_into(m2, path);
      FAIL("descriptor mismatch accepted");
    } catch (const ArtifactError& e) {
      CHECK(e.kind() == ArtifactError::Kind::DescriptorMismatch);
    }
  }
  SUBCASE("bad magic is rejected") {
    std::ofstream out(path + ".m", std::ios::binary);
    out << "NOPEnope this is not a checkpoint at all";
    out.close();
    try {
      load_checkpoint(path + ".m");
      FAIL("bad magic accepted");
    } catch (const ArtifactError& e) {
      CHECK(e.kind() == ArtifactError::Kind::BadMagic);
    }
  }
}

TEST_CASE("argmax ties break toward the lowest class index") {
  Tensor logits({2, 3}, {1, 1, 0, 0.5f, 2, 2});
  const auto labels = argmax_labels(logits);
  CHECK(labels[0] == 0);
  CHECK(labels[1] == 1);
}

TEST_CASE("descriptor round trips through parsing") {
  ArchConfig cfg = ArchConfig::slim_resnet(3, 32, 10, 16, 2);
  ArchConfig parsed = ArchConfig::from_descriptor(cfg.descriptor());
  CHECK(parsed.descriptor() == cfg.descriptor());
}

TEST_SUITE_END();
