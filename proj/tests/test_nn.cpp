#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "lamkit/nn/modules.hpp"
#include "lamkit/nn/params.hpp"
#include "lamkit/nn/tape.hpp"
#include "lamkit/rng.hpp"

using namespace lamkit;

namespace {

using Builder = std::function<int(nn::Tape&)>;

double loss_value(const Builder& build) {
  nn::Tape t;
  int loss = build(t);
  return static_cast<double>(t.val(loss)[0]);
}

// Central finite differences over every entry of every listed parameter.
// The loss is float, so eps is kept large relative to float roundoff and the
// comparison uses a mixed relative/absolute tolerance.
void fd_check(const std::vector<nn::Param*>& params, const Builder& build, float eps = 1e-2f,
              double rel = 2e-3, double abs_tol = 2e-4) {
  for (nn::Param* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  {
    nn::Tape t;
    int loss = build(t);
    t.backward(loss, 1.0f);
  }
  for (nn::Param* p : params) {
    for (size_t i = 0; i < p->value.size(); ++i) {
      float save = p->value[i];
      float e = eps * std::max(1.0f, std::fabs(save));
      p->value[i] = save + e;
      double lp = loss_value(build);
      p->value[i] = save - e;
      double lm = loss_value(build);
      p->value[i] = save;
      double fd = (lp - lm) / (2.0 * static_cast<double>(e));
      double an = static_cast<double>(p->grad[i]);
      double err = std::fabs(fd - an);
      double bound = rel * std::max(std::fabs(fd), std::fabs(an)) + abs_tol;
      INFO(p->name << "[" << i << "] analytic " << an << " fd " << fd);
      REQUIRE(err <= bound);
    }
  }
}

nn::Param& make_param(nn::ParamStore& ps, const std::string& name, std::vector<int64_t> shape,
                      uint64_t seed, float std_dev = 1.0f) {
  nn::Param& p = ps.add(name, std::move(shape));
  Rng rng{seed, 0x7070u};
  init_normal(p, std_dev, rng);
  return p;
}

std::vector<float> make_target(int64_t n, uint64_t seed) {
  std::vector<float> t(static_cast<size_t>(n));
  Rng rng{seed, 0x7171u};
  for (float& v : t) v = rng.uniform(-1.0f, 1.0f);
  return t;
}

}  // namespace

TEST_CASE("mse matches its definition") {
  nn::ParamStore ps;
  nn::Param& x = ps.add("x", {4});
  x.value = {1.0f, -2.0f, 0.5f, 3.0f};
  std::vector<float> tgt{0.0f, 1.0f, 0.5f, -1.0f};
  nn::Tape t;
  int loss = t.mse(t.param(x), tgt.data(), 4);
  double expect = (1.0 + 9.0 + 0.0 + 16.0) / 4.0;
  CHECK(t.val(loss)[0] == doctest::Approx(expect).epsilon(1e-6));

  t.backward(loss, 1.0f);
  for (int i = 0; i < 4; ++i)
    CHECK(x.grad[static_cast<size_t>(i)] ==
          doctest::Approx(2.0 * (x.value[static_cast<size_t>(i)] - tgt[static_cast<size_t>(i)]) / 4.0)
              .epsilon(1e-5));
}

TEST_CASE("linear gradients") {
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 5}, 1);
  nn::Param& w = make_param(ps, "w", {3, 5}, 2, 0.5f);
  nn::Param& b = make_param(ps, "b", {3}, 3, 0.2f);
  std::vector<float> tgt = make_target(6, 4);
  fd_check({&x, &w, &b}, [&](nn::Tape& t) {
    return t.mse(t.linear(t.param(x), w, &b, 2, 5, 3), tgt.data(), 6);
  });
}

TEST_CASE("elementwise op gradients") {
  nn::ParamStore ps;
  nn::Param& a = make_param(ps, "a", {8}, 5);
  nn::Param& b = make_param(ps, "b", {8}, 6);
  std::vector<float> tgt = make_target(8, 7);

  SUBCASE("add") {
    fd_check({&a, &b},
             [&](nn::Tape& t) { return t.mse(t.add(t.param(a), t.param(b)), tgt.data(), 8); });
  }
  SUBCASE("gelu") {
    fd_check({&a}, [&](nn::Tape& t) { return t.mse(t.gelu(t.param(a)), tgt.data(), 8); });
  }
  SUBCASE("relu away from the kink") {
    for (size_t i = 0; i < a.value.size(); ++i) {
      float s = (i % 2 == 0) ? 1.0f : -1.0f;
      a.value[i] = s * (0.5f + 0.1f * static_cast<float>(i));
    }
    fd_check({&a}, [&](nn::Tape& t) { return t.mse(t.relu(t.param(a)), tgt.data(), 8); },
             1e-2f);
  }
}

TEST_CASE("concat and mean_rows gradients") {
  nn::ParamStore ps;
  nn::Param& a = make_param(ps, "a", {4}, 8);
  nn::Param& b = make_param(ps, "b", {6}, 9);
  std::vector<float> tgt = make_target(10, 10);
  fd_check({&a, &b}, [&](nn::Tape& t) {
    return t.mse(t.concat({t.param(a), t.param(b)}), tgt.data(), 10);
  });

  nn::Param& m = make_param(ps, "m", {3, 4}, 11);
  std::vector<float> tgt2 = make_target(4, 12);
  fd_check({&m},
           [&](nn::Tape& t) { return t.mse(t.mean_rows(t.param(m), 3, 4), tgt2.data(), 4); });

  nn::Tape t;
  int cat = t.concat({t.param(a), t.param(b)});
  REQUIRE(t.numel(cat) == 10);
  for (int i = 0; i < 4; ++i) CHECK(t.val(cat)[i] == a.value[static_cast<size_t>(i)]);
  for (int i = 0; i < 6; ++i) CHECK(t.val(cat)[4 + i] == b.value[static_cast<size_t>(i)]);
}

TEST_CASE("conv3x3 gradients") {
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 4, 4}, 13, 0.8f);
  nn::Param& w = make_param(ps, "w", {3, 2, 3, 3}, 14, 0.4f);
  nn::Param& b = make_param(ps, "b", {3}, 15, 0.2f);
  std::vector<float> tgt = make_target(3 * 4 * 4, 16);
  fd_check({&x, &w, &b}, [&](nn::Tape& t) {
    return t.mse(t.conv3x3(t.param(x), w, b, 2, 4, 4, 3), tgt.data(), 3 * 4 * 4);
  });
}

TEST_CASE("pooling gradients") {
  nn::ParamStore ps;
  std::vector<float> tgt = make_target(2 * 3 * 3, 17);

  SUBCASE("avgpool3x3s2") {
    nn::Param& x = make_param(ps, "x", {2, 5, 5}, 18);
    fd_check({&x}, [&](nn::Tape& t) {
      return t.mse(t.avgpool3x3s2(t.param(x), 2, 5, 5), tgt.data(), 2 * 3 * 3);
    });
  }
  SUBCASE("avgpool preserves constants") {
    nn::Param& x = ps.add("xc", {1, 5, 5});
    std::fill(x.value.begin(), x.value.end(), 0.7f);
    nn::Tape t;
    int y = t.avgpool3x3s2(t.param(x), 1, 5, 5);
    REQUIRE(t.numel(y) == 9);
    for (int i = 0; i < 9; ++i) CHECK(t.val(y)[i] == doctest::Approx(0.7f));
  }
  SUBCASE("maxpool3x3s2") {
    // Spread values so no window has a near-tie the probe step could flip.
    nn::Param& x = ps.add("xm", {2, 5, 5});
    for (size_t i = 0; i < x.value.size(); ++i)
      x.value[i] = std::sin(2.399f * static_cast<float>(i + 1)) * 2.0f;
    fd_check({&x},
             [&](nn::Tape& t) {
               return t.mse(t.maxpool3x3s2(t.param(x), 2, 5, 5), tgt.data(), 2 * 3 * 3);
             },
             1e-3f);
  }
}

TEST_CASE("upsample2x gradients and values") {
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 3, 3}, 19);
  std::vector<float> tgt = make_target(2 * 6 * 6, 20);
  fd_check({&x}, [&](nn::Tape& t) {
    return t.mse(t.upsample2x(t.param(x), 2, 3, 3), tgt.data(), 2 * 6 * 6);
  });

  nn::Tape t;
  int y = t.upsample2x(t.param(x), 2, 3, 3);
  const float* xv = x.value.data();
  const float* yv = t.val(y);
  for (int c = 0; c < 2; ++c)
    for (int iy = 0; iy < 6; ++iy)
      for (int ix = 0; ix < 6; ++ix)
        CHECK(yv[(c * 6 + iy) * 6 + ix] == xv[(c * 3 + iy / 2) * 3 + ix / 2]);
}

TEST_CASE("softargmax2d gradients and geometry") {
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 4, 4}, 21);
  std::vector<float> tgt = make_target(2 * 2, 22);
  fd_check({&x},
           [&](nn::Tape& t) {
             return t.mse(t.softargmax2d(t.param(x), 2, 4, 4, 3.0f), tgt.data(), 2 * 2);
           },
           1e-2f, 5e-3, 5e-4);

  // A single hot pixel pulls the readout toward that pixel's center.
  nn::Param& hot = ps.add("hot", {1, 8, 8});
  std::fill(hot.value.begin(), hot.value.end(), 0.0f);
  hot.value[2 * 8 + 6] = 8.0f;
  nn::Tape t;
  int y = t.softargmax2d(t.param(hot), 1, 8, 8, 8.0f);
  REQUIRE(t.numel(y) == 2);
  float ex = (6.0f + 0.5f) / 8.0f * 2.0f - 1.0f;
  float ey = (2.0f + 0.5f) / 8.0f * 2.0f - 1.0f;
  CHECK(t.val(y)[0] == doctest::Approx(ex).epsilon(0.02));
  CHECK(t.val(y)[1] == doctest::Approx(ey).epsilon(0.02));

  // Outputs stay inside the normalized square.
  for (int i = 0; i < 2; ++i) {
    CHECK(t.val(y)[i] >= -1.0f);
    CHECK(t.val(y)[i] <= 1.0f);
  }
}

TEST_CASE("tile2d gradients and values") {
  nn::ParamStore ps;
  nn::Param& v = make_param(ps, "v", {3}, 23);
  std::vector<float> tgt = make_target(3 * 2 * 2, 24);
  fd_check({&v}, [&](nn::Tape& t) {
    return t.mse(t.tile2d(t.param(v), 3, 2, 2), tgt.data(), 3 * 2 * 2);
  });

  nn::Tape t;
  int y = t.tile2d(t.param(v), 3, 2, 2);
  for (int d = 0; d < 3; ++d)
    for (int i = 0; i < 4; ++i) CHECK(t.val(y)[d * 4 + i] == v.value[static_cast<size_t>(d)]);
}

TEST_CASE("layernorm gradients") {
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 6}, 25);
  nn::Param& g = make_param(ps, "g", {6}, 26, 0.5f);
  nn::Param& b = make_param(ps, "b", {6}, 27, 0.3f);
  for (float& v : g.value) v += 1.0f;
  std::vector<float> tgt = make_target(12, 28);
  fd_check({&x, &g, &b}, [&](nn::Tape& t) {
    return t.mse(t.layernorm(t.param(x), g, b, 2, 6), tgt.data(), 12);
  });
}

TEST_CASE("attention gradients") {
  nn::ParamStore ps;
  const int64_t rows = 3, dim = 8;
  nn::Param& x = make_param(ps, "x", {rows, dim}, 29, 0.7f);
  nn::Tape::AttnParams ap;
  ap.wq = &make_param(ps, "wq", {dim, dim}, 30, 0.35f);
  ap.bq = &make_param(ps, "bq", {dim}, 31, 0.1f);
  ap.wk = &make_param(ps, "wk", {dim, dim}, 32, 0.35f);
  ap.bk = &make_param(ps, "bk", {dim}, 33, 0.1f);
  ap.wv = &make_param(ps, "wv", {dim, dim}, 34, 0.35f);
  ap.bv = &make_param(ps, "bv", {dim}, 35, 0.1f);
  ap.wo = &make_param(ps, "wo", {dim, dim}, 36, 0.35f);
  ap.bo = &make_param(ps, "bo", {dim}, 37, 0.1f);
  std::vector<float> tgt = make_target(rows * dim, 38);
  std::vector<nn::Param*> all{&x,     ap.wq, ap.bq, ap.wk, ap.bk,
                              ap.wv,  ap.bv, ap.wo, ap.bo};

  SUBCASE("plain") {
    fd_check(all, [&](nn::Tape& t) {
      return t.mse(t.attention(t.param(x), ap, rows, dim, 2, false), tgt.data(), rows * dim);
    });
  }
  SUBCASE("normalized qk") {
    fd_check(all, [&](nn::Tape& t) {
      return t.mse(t.attention(t.param(x), ap, rows, dim, 2, true), tgt.data(), rows * dim);
    });
  }
}

TEST_CASE("composite graph gradients") {
  // conv -> gelu -> avgpool -> coordinate readout joined with the flat map,
  // then a linear head; exercises fan-out and mixed op interactions.
  nn::ParamStore ps;
  nn::Param& x = make_param(ps, "x", {2, 6, 6}, 39, 0.6f);
  nn::Param& cw = make_param(ps, "cw", {3, 2, 3, 3}, 40, 0.4f);
  nn::Param& cb = make_param(ps, "cb", {3}, 41, 0.1f);
  nn::Param& hw = make_param(ps, "hw", {2, 3 * 3 * 3 + 6}, 42, 0.3f);
  nn::Param& hb = make_param(ps, "hb", {2}, 43, 0.1f);
  std::vector<float> tgt = make_target(2, 44);
  fd_check({&x, &cw, &cb, &hw, &hb},
           [&](nn::Tape& t) {
             int h = t.conv3x3(t.param(x), cw, cb, 2, 6, 6, 3);
             h = t.gelu(h);
             h = t.avgpool3x3s2(h, 3, 6, 6);
             int coords = t.softargmax2d(h, 3, 3, 3, 3.0f);
             int flat = t.concat({h, coords});
             return t.mse(t.linear(flat, hw, &hb, 1, 3 * 3 * 3 + 6, 2), tgt.data(), 2);
           },
           1e-2f, 5e-3, 5e-4);
}

TEST_CASE("backward accumulates across samples") {
  nn::ParamStore ps;
  nn::Param& w = make_param(ps, "w", {2, 3}, 45, 0.5f);
  nn::Param& x = make_param(ps, "x", {1, 3}, 46);
  std::vector<float> tgt = make_target(2, 47);

  auto run = [&](int times) {
    std::fill(w.grad.begin(), w.grad.end(), 0.0f);
    std::fill(x.grad.begin(), x.grad.end(), 0.0f);
    for (int i = 0; i < times; ++i) {
      nn::Tape t;
      int loss = t.mse(t.linear(t.param(x), w, nullptr, 1, 3, 2), tgt.data(), 2);
      t.backward(loss, 1.0f);
    }
    return w.grad;
  };
  std::vector<float> once = run(1);
  std::vector<float> twice = run(2);
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(twice[i] == doctest::Approx(2.0f * once[i]).epsilon(1e-5));
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    nn::ParamStore ps;
    nn::Param& x = make_param(ps, "x", {2, 5, 5}, 48, 0.7f);
    nn::Param& w = make_param(ps, "w", {2, 2, 3, 3}, 49, 0.4f);
    nn::Param& b = make_param(ps, "b", {2}, 50, 0.1f);
    std::vector<float> tgt = make_target(2 * 2, 51);
    nn::Tape t;
    int h = t.conv3x3(t.param(x), w, b, 2, 5, 5, 2);
    int loss = t.mse(t.softargmax2d(h, 2, 5, 5, 3.0f), tgt.data(), 4);
    t.backward(loss, 1.0f);
    std::vector<float> out = x.grad;
    out.push_back(t.val(loss)[0]);
    return out;
  };
  CHECK(run() == run());
}
