#include <doctest.h>

#include <cmath>
#include <functional>

#include "more/error.hpp"
#include "more/gradcheck.hpp"
#include "more/model.hpp"
#include "more/optim.hpp"
#include "support.hpp"

using namespace more;
using more::test::random_tensor;

namespace {

Errc error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io_error;
}

std::size_t counted_params(const Model& m) {
  std::size_t n = 0;
  for (const auto& p : m.params()) n += p.value.size();
  return n;
}

}  // namespace

TEST_SUITE("nn_models") {
  TEST_CASE("parameter counts") {
    const ArchSpec mlp = ArchSpec::mlp({1, 28, 28}, {128}, 10);
    CHECK(mlp.param_count() == 101770);
    CHECK(counted_params(build_classifier(mlp, 0)) == 101770);

    const ArchSpec cnn = ArchSpec::desk_cnn();
    // 8·1·9+8, 16·8·9+16, then 16·7·7·10+10.
    CHECK(cnn.param_count() == 80 + 1168 + 7850);
    CHECK(counted_params(build_classifier(cnn, 0)) == cnn.param_count());
    CHECK(cnn.feature_width() == 784);
  }

  TEST_CASE("logit shapes for both families") {
    Rng rng(4);
    for (const ArchSpec& arch : {ArchSpec::desk_mlp(), ArchSpec::desk_cnn(), ArchSpec::desk_cnn(7)}) {
      const Model m = build_classifier(arch, 1);
      const Tensor logits = m.predict_logits(random_tensor({3, 1, 28, 28}, rng, 0.0f, 1.0f));
      CHECK(logits.shape() == Shape{3, arch.num_classes});
      CHECK(logits.all_finite());
    }
    const Model m = build_classifier(ArchSpec::desk_mlp(), 1);
    CHECK(error_code([&] { m.predict_logits(Tensor({2, 1, 27, 28})); }) == Errc::shape_mismatch);
  }

  TEST_CASE("seeded construction is deterministic") {
    const ArchSpec arch = ArchSpec::desk_cnn();
    const Model a = build_classifier(arch, 42), b = build_classifier(arch, 42), c = build_classifier(arch, 43);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
    for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value.bit_equal(b.params()[i].value));
  }

  TEST_CASE("Kaiming-uniform weights and zero biases") {
    const Model m = build_classifier(ArchSpec::cnn({1, 12, 12}, {ConvStage{4}}, {9}, 5), 8);
    for (const auto& p : m.params()) {
      const Shape& s = p.value.shape();
      if (s.size() == 1) {
        for (float v : p.value.data()) CHECK(v == 0.0f);
        continue;
      }
      const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
      const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
      float widest = 0.0f;
      for (float v : p.value.data()) widest = std::max(widest, std::fabs(v));
      CHECK(widest <= bound);
      CHECK(widest > 0.5f * bound);
    }
  }

  TEST_CASE("architecture strings round trip") {
    const ArchSpec archs[] = {ArchSpec::desk_mlp(), ArchSpec::desk_cnn(),
                              ArchSpec::cnn({3, 16, 16}, {ConvStage{4, 3, 2, 1, 1}, ConvStage{6, 2, 1, 0, 2}}, {12, 5}, 4)};
    for (const auto& a : archs) CHECK(ArchSpec::parse(a.to_string()) == a);
    CHECK(ArchSpec::desk_cnn().to_string() == "cnn;in=1x28x28;conv=8:3:1:1:2,16:3:1:1:2;hidden=;classes=10");
  }

  TEST_CASE("invalid architectures are rejected") {
    CHECK(error_code([] { ArchSpec::parse("mlp;in=1x2x2"); }) == Errc::invalid_arch);
    CHECK(error_code([] { ArchSpec::parse("rnn;in=1x2x2;conv=;hidden=;classes=3"); }) == Errc::invalid_arch);
    CHECK(error_code([] { ArchSpec::mlp({1, 28, 28}, {64}, 1).validate(); }) == Errc::invalid_arch);
    CHECK(error_code([] { ArchSpec::cnn({1, 2, 2}, {ConvStage{4, 3, 1, 0, 1}}, {}, 3).validate(); }) ==
          Errc::invalid_arch);
    CHECK(error_code([] { ArchSpec::cnn({1, 3, 3}, {ConvStage{4, 3, 1, 1, 4}}, {}, 3).validate(); }) ==
          Errc::invalid_arch);
    CHECK(error_code([] { ArchSpec::cnn({1, 8, 8}, {}, {}, 3).validate(); }) == Errc::invalid_arch);
    CHECK(error_code([] { build_classifier(ArchSpec::mlp({1, 4, 0}, {}, 3), 0); }) == Errc::invalid_arch);
  }

  TEST_CASE("head and backbone split") {
    const Model m = build_classifier(ArchSpec::desk_cnn(), 3);
    const HeadSplit s = split_head(m);
    REQUIRE(s.head.size() == 2);
    CHECK(s.head[0].name == "head.weight");
    CHECK(s.head[1].name == "head.bias");
    CHECK(s.head[0].value.shape() == Shape{784, 10});
    CHECK(s.backbone.size() + 2 == m.params().size());
    CHECK(m.head_begin() == s.backbone.size());

    Model edited = m;
    edited.params()[edited.head_begin()].value[0] += 1.0f;
    CHECK(edited.backbone_fingerprint() == m.backbone_fingerprint());
    CHECK(edited.fingerprint() != m.fingerprint());
    edited.params()[0].value[0] += 1.0f;
    CHECK(edited.backbone_fingerprint() != m.backbone_fingerprint());
  }

  TEST_CASE("head-only step leaves the backbone bit-identical") {
    Rng rng(6);
    Model m = build_classifier(ArchSpec::desk_cnn(), 5);
    const Model before = m;
    const Tensor x = random_tensor({4, 1, 28, 28}, rng, 0.0f, 1.0f);
    const std::vector<int> y = {1, 2, 3, 4};

    Graph g;
    const auto bound = m.bind(g, Trainable::head);
    for (std::size_t i = 0; i < bound.size(); ++i) CHECK(g.requires_grad(bound[i]) == (i >= m.head_begin()));
    Var loss = cross_entropy(m.forward(g, g.constant(x), bound), y);
    const std::vector<Var> head(bound.begin() + static_cast<long>(m.head_begin()), bound.end());
    const auto grads = g.backward(loss, head);
    CHECK(error_code([&] { g.backward(loss, std::span<const Var>(bound.data(), 1)); }) == Errc::disconnected_tensor);

    std::vector<Tensor*> ptrs;
    for (std::size_t i = m.head_begin(); i < m.params().size(); ++i) ptrs.push_back(&m.params()[i].value);
    SgdState state;
    sgd_step(ptrs, grads, 0.1f, 0.9f, state);
    for (std::size_t i = 0; i < m.head_begin(); ++i) CHECK(m.params()[i].value.bit_equal(before.params()[i].value));
    CHECK_FALSE(m.params()[m.head_begin()].value.bit_equal(before.params()[m.head_begin()].value));
    CHECK(m.backbone_fingerprint() == before.backbone_fingerprint());
  }

  TEST_CASE("bound forward equals the classifier interface") {
    Rng rng(7);
    const Model m = build_classifier(ArchSpec::cnn({1, 8, 8}, {ConvStage{3}}, {6}, 4), 2);
    const Tensor x = random_tensor({5, 1, 8, 8}, rng, 0.0f, 1.0f);
    Graph g;
    const Tensor a = m.forward(g, g.constant(x), m.bind(g, Trainable::all)).value();
    CHECK(a.bit_equal(m.predict_logits(x)));
    const auto pred = m.predict(x), ref = argmax_rows(a);
    CHECK(pred == ref);
  }

  TEST_CASE("double-precision reference forward agrees with the model") {
    Rng rng(12);
    for (const ArchSpec& arch : {ArchSpec::desk_cnn(), ArchSpec::desk_mlp(),
                                 ArchSpec::cnn({2, 9, 9}, {ConvStage{3, 3, 2, 1, 1}, ConvStage{4, 2, 1, 0, 2}}, {7}, 5)}) {
      const Model m = build_classifier(arch, 3);
      const Tensor x = random_tensor(Shape{2, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]}, rng, 0.0f, 1.0f);
      const Tensor got = m.predict_logits(x);
      const auto ref = more::test::ref_model_logits(m, x);
      REQUIRE(ref.size() == got.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-4).scale(1.0));
    }
  }

  TEST_CASE("whole-network parameter gradients match finite differences") {
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 4; ++seed) {
      Rng rng(derive_seed(seed, 11));
      const Model m = build_classifier(ArchSpec::cnn({1, 6, 6}, {ConvStage{2}}, {5}, 3), seed);
      const Tensor x = random_tensor({3, 1, 6, 6}, rng, 0.0f, 1.0f);
      double margin = 0.0;
      more::test::ref_model_logits(m, x, &margin);
      if (margin < 1e-2) continue;
      ++checked;
      const std::vector<int> y = {0, 2, 1};
      Graph g;
      const auto bound = m.bind(g, Trainable::all);
      const auto grads = g.backward(cross_entropy(m.forward(g, g.constant(x), bound), y), bound);
      for (std::size_t i = 0; i < bound.size(); ++i) {
        const ScalarFn f = [&](const Tensor& pi) {
          Model probe = m;
          probe.params()[i].value = pi;
          return more::test::ref_cross_entropy(more::test::ref_model_logits(probe, x), 3, y);
        };
        CHECK(max_relative_error(grads[i], finite_diff_gradient(f, m.params()[i].value, 1e-3f)) <= 1e-3);
      }
    }
  }
}
