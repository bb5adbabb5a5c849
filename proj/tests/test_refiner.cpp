#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "firework/refiner.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <fstream>
#include <random>

using namespace firework;
namespace fs = std::filesystem;

namespace {

Tensor<double> random_tensor(Index c, const Shape3& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<double> t(c, s);
  for (Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = n(rng);
  return t;
}

// Direct zero-padded 3x3x3 convolution.
Tensor<double> conv_oracle(const Tensor<double>& in, const Eigen::MatrixXd& w, const Eigen::VectorXd& b, int stride) {
  const Shape3 is = in.shape;
  const Shape3 os{(is.d - 1) / stride + 1, (is.h - 1) / stride + 1, (is.w - 1) / stride + 1};
  Tensor<double> out(w.rows(), os);
  for (Index co = 0; co < w.rows(); ++co)
    for (Index i = 0; i < os.d; ++i)
      for (Index j = 0; j < os.h; ++j)
        for (Index k = 0; k < os.w; ++k) {
          double acc = b[co];
          for (Index ci = 0; ci < in.channels(); ++ci)
            for (int dz = 0; dz < 3; ++dz)
              for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) {
                  const Index z = i * stride + dz - 1, y = j * stride + dy - 1, x = k * stride + dx - 1;
                  if (z < 0 || y < 0 || x < 0 || z >= is.d || y >= is.h || x >= is.w) continue;
                  acc += w(co, ci * 27 + dz * 9 + dy * 3 + dx) * in.data(ci, is.index(z, y, x));
                }
          out.data(co, os.index(i, j, k)) = acc;
        }
  return out;
}

RefinerParams<double> with_random_head(RefinerParams<double> p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& a : p.arrays)
    if (a.name.rfind("head", 0) == 0)
      for (Index i = 0; i < a.value.size(); ++i) a.value[i] = n(rng);
  return p;
}

struct Inputs {
  VolumeD moving, warped, fixed;
  FieldD field;
};

Inputs random_inputs(const Shape3& s, std::uint64_t seed) {
  return {oracle::random_volume(s, seed), oracle::random_volume(s, seed + 1), oracle::random_volume(s, seed + 2),
          oracle::random_field(s, 1.0, seed + 3)};
}

double functional(const FieldD& out, const FieldD& g) { return (out.data * g.data).sum(); }

}  // namespace

TEST_CASE("conv3d agrees with direct convolution for both strides") {
  const Shape3 s{5, 6, 4};
  const Tensor<double> in = random_tensor(3, s, 1);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Random(4, 3 * 27);
  const Eigen::VectorXd b = Eigen::VectorXd::Random(4);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wr = w;
  for (int stride : {1, 2}) {
    CAPTURE(stride);
    const Tensor<double> got = conv3d<double>(in, WeightMatrix<double>(wr.data(), 4, 81),
                                              BiasVector<double>(b.data(), 4), stride);
    const Tensor<double> expect = conv_oracle(in, w, b, stride);
    CHECK(got.shape == expect.shape);
    CHECK(got.shape == conv_output_shape(s, stride));
    CHECK((got.data - expect.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv3d backward matches central differences") {
  const Shape3 s{4, 4, 4};
  const Tensor<double> in = random_tensor(2, s, 2);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w =
      Eigen::MatrixXd::Random(3, 2 * 27);
  Eigen::VectorXd b = Eigen::VectorXd::Random(3);
  for (int stride : {1, 2}) {
    CAPTURE(stride);
    const Tensor<double> g = random_tensor(3, conv_output_shape(s, stride), 3);
    auto loss = [&](const Tensor<double>& x, const auto& wm, const Eigen::VectorXd& bv) {
      const Tensor<double> y = conv3d<double>(x, WeightMatrix<double>(wm.data(), 3, 54),
                                              BiasVector<double>(bv.data(), 3), stride);
      return (y.data.array() * g.data.array()).sum();
    };
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gw =
        Eigen::MatrixXd::Zero(3, 54);
    Eigen::VectorXd gb = Eigen::VectorXd::Zero(3);
    Tensor<double> gin(2, s);
    conv3d_backward<double>(in, WeightMatrix<double>(w.data(), 3, 54), stride, g,
                            WeightMatrixMut<double>(gw.data(), 3, 54), BiasVectorMut<double>(gb.data(), 3), &gin);

    std::vector<double> wx(w.data(), w.data() + w.size());
    const auto nw = oracle::fd_gradient(
        [&](const std::vector<double>& x) {
          auto wm = w;
          std::copy(x.begin(), x.end(), wm.data());
          return loss(in, wm, b);
        },
        wx, 1e-5);
    CHECK(oracle::relative_error({gw.data(), gw.data() + gw.size()}, nw) < 1e-8);

    const auto nb = oracle::fd_gradient(
        [&](const std::vector<double>& x) { return loss(in, w, Eigen::VectorXd::Map(x.data(), 3)); },
        {b.data(), b.data() + 3}, 1e-5);
    CHECK(oracle::relative_error({gb.data(), gb.data() + 3}, nb) < 1e-8);

    const auto nin = oracle::fd_gradient(
        [&](const std::vector<double>& x) {
          Tensor<double> t = in;
          std::copy(x.begin(), x.end(), t.data.data());
          return loss(t, w, b);
        },
        {in.data.data(), in.data.data() + in.data.size()}, 1e-5);
    CHECK(oracle::relative_error({gin.data.data(), gin.data.data() + gin.data.size()}, nin) < 1e-8);
  }
}

TEST_CASE("upsample2 backward is its adjoint and concat stacks channels") {
  const Shape3 s{2, 3, 2};
  const Tensor<double> x = random_tensor(2, s, 4);
  const Tensor<double> up = upsample2(x);
  CHECK(up.shape == Shape3{4, 6, 4});
  CHECK(up.data(1, up.shape.index(3, 5, 1)) == x.data(1, s.index(1, 2, 0)));
  const Tensor<double> g = random_tensor(2, up.shape, 5);
  const Tensor<double> back = upsample2_backward(g, s);
  CHECK((up.data.array() * g.data.array()).sum() ==
        doctest::Approx((x.data.array() * back.data.array()).sum()).epsilon(1e-12));

  const Tensor<double> y = random_tensor(3, s, 6);
  const Tensor<double> c = concat(x, y);
  CHECK(c.channels() == 5);
  CHECK(c.data.topRows(2) == x.data);
  CHECK(c.data.bottomRows(3) == y.data);
}

TEST_CASE("leaky relu backward uses the output sign") {
  Tensor<double> t(1, Shape3{1, 1, 4});
  t.data << -2.0, -0.5, 0.5, 3.0;
  leaky_relu_inplace(t);
  CHECK(t.data(0, 0) == doctest::Approx(-0.4));
  CHECK(t.data(0, 3) == 3.0);
  Tensor<double> g(1, Shape3{1, 1, 4});
  g.data.setOnes();
  leaky_relu_backward_inplace(t, g);
  CHECK(g.data(0, 0) == doctest::Approx(kLeakySlope));
  CHECK(g.data(0, 2) == 1.0);
}

TEST_CASE("default architecture parameter count from layer arithmetic") {
  const RefinerConfig cfg;
  // enc 6->8, 8->16, 16->32; dec (32+16)->16, (16+8)->8; head 8->3.
  const Index expect = (6 * 27 * 8 + 8) + (8 * 27 * 16 + 16) + (16 * 27 * 32 + 32) + (48 * 27 * 16 + 16) +
                       (24 * 27 * 8 + 8) + (8 * 27 * 3 + 3);
  const auto p = init_params<float>(cfg);
  CHECK(p.parameter_count() == expect);
  CHECK(p.parameter_count() < 500000);
  const auto specs = layer_specs(cfg);
  REQUIRE(specs.size() == 6);
  CHECK(specs.front().stride == 1);
  CHECK(specs[1].stride == 2);
  CHECK(specs.back().out_channels == 3);
  CHECK_FALSE(specs.back().activation);

  const auto base = init_params<float>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade));
  CHECK(base.config.input_channels == 2);
  CHECK(base.parameter_count() == expect - 4 * 27 * 8);
}

TEST_CASE("init_params is deterministic per seed with a zero head") {
  RefinerConfig a;
  a.seed = 3;
  RefinerConfig b = a;
  b.seed = 4;
  const auto pa = init_params<float>(a), pa2 = init_params<float>(a), pb = init_params<float>(b);
  CHECK(pa.fingerprint() == pa2.fingerprint());
  CHECK(pa.fingerprint() != pb.fingerprint());
  CHECK(pa.fingerprint().size() == 16);
  for (const auto& arr : pa.arrays) {
    if (arr.name.rfind("head", 0) == 0) CHECK((arr.value == 0.0f).all());
  }
  CHECK(pa.all_finite());
}

TEST_CASE("config validation") {
  RefinerConfig c;
  c.base_width = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = RefinerConfig{};
  c.output_channels = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = RefinerConfig{};
  c.input_channels = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_framework_mode("baseline") == FrameworkMode::baseline_cascade);
  CHECK(parse_framework_mode(to_string(FrameworkMode::firework)) == FrameworkMode::firework);
  CHECK_THROWS_AS(parse_framework_mode("cascade-ish"), std::invalid_argument);
}

TEST_CASE("fresh refiner predicts exactly zero at full size") {
  const Shape3 s{32, 32, 32};
  const auto p = init_params<float>(RefinerConfig{});
  const VolumeF m = oracle::random_volume(s, 7).cast<float>(), f = oracle::random_volume(s, 8).cast<float>();
  const FieldF eps = refine(p, m, m, f, FieldF(s));
  CHECK(eps.shape == s);
  CHECK(eps.data.rows() == s.size());
  CHECK((eps.data == 0.0f).all());

  const auto bp = init_params<float>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade));
  const FieldF r = baseline_forward(bp, m, f);
  CHECK(r.shape == s);
  CHECK((r.data == 0.0f).all());
}

TEST_CASE("refine rejects bad shapes and mismatched modes") {
  const auto p = init_params<double>(RefinerConfig{});
  const Shape3 odd{6, 8, 8};
  const Inputs in = random_inputs(odd, 9);
  CHECK_THROWS_AS(refine(p, in.moving, in.warped, in.fixed, in.field), std::invalid_argument);
  const Inputs ok = random_inputs({8, 8, 8}, 9);
  CHECK_THROWS_AS(refine(p, ok.moving, ok.warped, in.fixed, ok.field), std::invalid_argument);
  CHECK_THROWS_AS(baseline_forward(p, ok.warped, ok.fixed), std::invalid_argument);
  const auto bp = init_params<double>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade));
  CHECK_THROWS_AS(refine(bp, ok.moving, ok.warped, ok.fixed, ok.field), std::invalid_argument);
}

TEST_CASE("refine is deterministic") {
  const Shape3 s{8, 8, 8};
  const auto p = with_random_head(init_params<double>(RefinerConfig{}), 10);
  const Inputs in = random_inputs(s, 11);
  const FieldD a = refine(p, in.moving, in.warped, in.fixed, in.field);
  const FieldD b = refine(p, in.moving, in.warped, in.fixed, in.field);
  CHECK((a.data == b.data).all());
  CHECK(a.data.abs().maxCoeff() > 0);
}

TEST_CASE("refiner weight gradients match central differences on 8^3") {
  const Shape3 s{8, 8, 8};
  const auto p = with_random_head(init_params<double>(RefinerConfig{}), 12);
  const Inputs in = random_inputs(s, 13);
  const FieldD g = oracle::random_field(s, 1.0, 14);

  NetworkCache<double> cache;
  refine(p, in.moving, in.warped, in.fixed, in.field, &cache);
  RefinerParams<double> grads = p.zeros_like();
  const RefineInputGradients<double> ig = refine_backward(p, cache, g, grads);

  std::mt19937_64 rng(15);
  std::vector<double> analytic, numeric;
  for (std::size_t a = 0; a < p.arrays.size(); ++a) {
    std::uniform_int_distribution<Index> pick(0, p.arrays[a].value.size() - 1);
    for (int rep = 0; rep < 6; ++rep) {
      const Index i = pick(rng);
      auto eval = [&](double delta) {
        RefinerParams<double> q = p;
        q.arrays[a].value[i] += delta;
        return functional(refine(q, in.moving, in.warped, in.fixed, in.field), g);
      };
      const double h = 1e-5;
      analytic.push_back(grads.arrays[a].value[i]);
      numeric.push_back((eval(h) - eval(-h)) / (2 * h));
    }
  }
  CHECK(oracle::relative_error(analytic, numeric) < 1e-3);

  // Input gradients, sampled.
  std::vector<double> ia, in_num;
  std::uniform_int_distribution<Index> vox(0, s.size() - 1);
  for (int rep = 0; rep < 8; ++rep) {
    const Index n = vox(rng);
    const int c = rep % 3;
    auto eval = [&](double delta) {
      FieldD f = in.field;
      f.data(n, c) += delta;
      VolumeD w = in.warped;
      w.data[n] += delta;
      return functional(refine(p, in.moving, w, in.fixed, f), g);
    };
    ia.push_back(ig.field.data(n, c) + ig.warped.data[n]);
    in_num.push_back((eval(1e-5) - eval(-1e-5)) / 2e-5);
  }
  CHECK(oracle::relative_error(ia, in_num) < 1e-3);
}

TEST_CASE("baseline weight gradients match central differences on 8^3") {
  const Shape3 s{8, 8, 8};
  const auto p = with_random_head(init_params<double>(RefinerConfig::for_mode(FrameworkMode::baseline_cascade)), 16);
  const VolumeD w = oracle::random_volume(s, 17), f = oracle::random_volume(s, 18);
  const FieldD g = oracle::random_field(s, 1.0, 19);
  NetworkCache<double> cache;
  baseline_forward(p, w, f, &cache);
  RefinerParams<double> grads = p.zeros_like();
  baseline_backward(p, cache, g, grads);

  std::mt19937_64 rng(20);
  std::vector<double> analytic, numeric;
  for (std::size_t a = 0; a < p.arrays.size(); ++a) {
    std::uniform_int_distribution<Index> pick(0, p.arrays[a].value.size() - 1);
    for (int rep = 0; rep < 6; ++rep) {
      const Index i = pick(rng);
      auto eval = [&](double delta) {
        RefinerParams<double> q = p;
        q.arrays[a].value[i] += delta;
        return functional(baseline_forward(q, w, f), g);
      };
      analytic.push_back(grads.arrays[a].value[i]);
      numeric.push_back((eval(1e-5) - eval(-1e-5)) / 2e-5);
    }
  }
  CHECK(oracle::relative_error(analytic, numeric) < 1e-3);
}

TEST_CASE("checkpoint roundtrip is bit-exact and validated") {
  const fs::path dir = fs::temp_directory_path() / "firework_test_ckpt";
  fs::create_directories(dir);
  RefinerConfig cfg = RefinerConfig::for_mode(FrameworkMode::baseline_cascade, 21);
  const Checkpoint ck{FrameworkMode::baseline_cascade, init_params<float>(cfg)};
  const std::string path = (dir / "ck.bin").string();
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.mode == FrameworkMode::baseline_cascade);
  CHECK(back.params.config == cfg);
  CHECK(back.params.fingerprint() == ck.params.fingerprint());

  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 8) == "FRWKCKPT");

  {
    std::ofstream os(dir / "truncated.bin", std::ios::binary);
    os << bytes.substr(0, bytes.size() - 10);
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "truncated.bin").string()), std::runtime_error);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream os(dir / "magic.bin", std::ios::binary);
    os << bad;
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "magic.bin").string()), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), std::runtime_error);
  fs::remove_all(dir);
}
