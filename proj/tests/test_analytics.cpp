#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "qgate/analytics.hpp"
#include "qgate/errors.hpp"
#include "qgate/ops.hpp"
#include "support.hpp"

using namespace qgate;
using namespace qgate::testing;
namespace fs = std::filesystem;

namespace {

// Long-double two-pass reference, independent of both library paths.
double kurtosis_oracle(const std::vector<float>& x) {
  long double mean = 0.0L;
  for (float v : x) mean += v;
  mean /= x.size();
  long double m2 = 0.0L, m4 = 0.0L;
  for (float v : x) {
    const long double d = v - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= x.size();
  m4 /= x.size();
  return static_cast<double>(m4 / (m2 * m2));
}

std::vector<float> sample(std::mt19937_64& rng, std::size_t n, int kind) {
  std::vector<float> x(n);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::student_t_distribution<double> heavy(3.0);
  std::uniform_real_distribution<double> uni(-2.0, 5.0);
  for (auto& v : x) v = static_cast<float>(kind == 0 ? normal(rng) : kind == 1 ? heavy(rng) : uni(rng));
  return x;
}

ActivationTrace trace_of(const std::string& id, const std::vector<float>& values, std::size_t cols) {
  ActivationTrace t;
  t.site_id = id;
  t.add_batch(Tensor({values.size() / cols, cols}, values));
  return t;
}

}  // namespace

TEST_CASE("kurtosis hand cases") {
  const std::vector<float> pm{1, -1, 1, -1, -1, 1};
  CHECK(kurtosis(pm) == 1.0);
  MomentAccumulator acc;
  acc.add(pm);
  CHECK(acc.kurtosis() == doctest::Approx(1.0).epsilon(1e-15));
  // Three-point symmetric laws: kurtosis is the reciprocal of the non-zero mass.
  CHECK(kurtosis(std::vector<float>{-1, 0, 0, 1}) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(kurtosis(std::vector<float>{-1, 0, 0, 0, 0, 0, 0, 1}) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK_THROWS_AS(kurtosis(std::vector<float>{2, 2, 2, 2, 2}), NumericalError);
  CHECK_THROWS_AS(kurtosis(std::vector<float>{1, 2}), NumericalError);
  MomentAccumulator constant;
  constant.add(std::vector<float>{3, 3, 3, 3});
  CHECK_THROWS_AS(constant.kurtosis(), NumericalError);
}

TEST_CASE("kurtosis of a million normal samples is near 3") {
  std::mt19937_64 rng(123);
  const auto x = sample(rng, 1000000, 0);
  const double k = kurtosis(x);
  CHECK(k >= 2.8);
  CHECK(k <= 3.2);
}

TEST_CASE("streaming and merged moments match the two-pass oracle") {
  std::mt19937_64 rng(7);
  for (int kind = 0; kind < 3; ++kind) {
    for (std::size_t n : {5u, 64u, 1000u, 20000u}) {
      const auto x = sample(rng, n, kind);
      const double ref = kurtosis_oracle(x);
      CHECK(std::abs(kurtosis(x) - ref) <= 1e-6 * ref);
      MomentAccumulator whole;
      for (float v : x) whole.add(static_cast<double>(v));
      CHECK(std::abs(whole.kurtosis() - ref) <= 1e-6 * ref);
      // Uneven chunks merged in order.
      MomentAccumulator merged;
      std::size_t off = 0, chunk = 1;
      while (off < n) {
        const std::size_t len = std::min(chunk, n - off);
        merged.add(std::span<const float>(x.data() + off, len));
        off += len;
        chunk = chunk * 3 + 1;
      }
      CHECK(merged.count() == n);
      CHECK(std::abs(merged.kurtosis() - ref) <= 1e-6 * ref);
      CHECK(merged.mean() == doctest::Approx(whole.mean()).epsilon(1e-9));
      CHECK(merged.variance() == doctest::Approx(whole.variance()).epsilon(1e-9));
    }
  }
}

TEST_CASE("kurtosis is invariant under affine maps") {
  std::mt19937_64 rng(8);
  const auto x = sample(rng, 5000, 1);
  std::vector<double> xd(x.begin(), x.end());
  MomentAccumulator a, b;
  for (double v : xd) {
    a.add(v);
    b.add(3.5 * v - 2.0);
  }
  CHECK(std::abs(a.kurtosis() - b.kurtosis()) <= 1e-9 * a.kurtosis());
}

TEST_CASE("infinity norm") {
  CHECK(inf_norm(std::vector<float>{-3, 2}) == 3.0);
  CHECK(inf_norm(std::vector<float>{0, 0, 0}) == 0.0);
  CHECK_THROWS_AS(inf_norm(std::vector<float>{}), DataError);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 50; ++i) {
    auto x = sample(rng, 1 + rng() % 100, 1);
    std::vector<float> mags(x.size());
    std::transform(x.begin(), x.end(), mags.begin(), [](float v) { return std::fabs(v); });
    std::sort(mags.begin(), mags.end());
    CHECK(inf_norm(x) == mags.back());
  }
}

TEST_CASE("six-sigma outlier counting") {
  std::vector<float> x(1000, 0.0f);
  x[537] = 100.0f;  // dimension 537 % 10 = 7 in a [100, 10] view
  const OutlierCount c = count_outliers(Tensor({100, 10}, x));
  CHECK(c.count == 1);
  CHECK(c.per_dimension[7] == 1);
  CHECK(std::accumulate(c.per_dimension.begin(), c.per_dimension.end(), std::size_t{0}) == 1);

  CHECK(count_outliers(Tensor::full({10, 4}, 2.5f)).count == 0);

  std::mt19937_64 rng(10);
  CHECK(count_outliers(Tensor({100, 100}, sample(rng, 10000, 0))).count == 0);

  // Counting ignores element order.
  std::vector<float> y = sample(rng, 4000, 1);
  y[11] = 400.0f;
  y[2000] = -300.0f;
  const std::size_t before = count_outliers(Tensor({4000}, y)).count;
  std::shuffle(y.begin(), y.end(), rng);
  CHECK(count_outliers(Tensor({4000}, y)).count == before);
  CHECK(before >= 2);
}

TEST_CASE("aggregation over sites") {
  SUBCASE("a single site reproduces its own metrics") {
    std::mt19937_64 rng(12);
    auto v = sample(rng, 800, 1);
    v[5] = 80.0f;
    const ActivationTrace t = trace_of("s", v, 8);
    const OutlierReport r = aggregate(std::span<const ActivationTrace>(&t, 1));
    CHECK(r.average_kurtosis == doctest::Approx(kurtosis(v)).epsilon(1e-9));
    CHECK(r.max_inf_norm == inf_norm(v));
    CHECK(r.total_outlier_count == count_outliers(Tensor({100, 8}, v)).count);
    REQUIRE(r.sites.size() == 1);
    CHECK(r.sites[0].site_id == "s");
  }
  SUBCASE("average kurtosis is the mean over sites") {
    const std::vector<ActivationTrace> ts{trace_of("b", {-1, 0, 0, 0, 0, 0, 0, 1}, 2), trace_of("a", {-1, 0, 0, 1}, 2)};
    const OutlierReport r = aggregate(ts);
    CHECK(r.average_kurtosis == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.sites[0].site_id == "a");
    CHECK(r.max_inf_norm == 1.0);
    const std::string csv = r.to_csv();
    CHECK(csv.rfind("site_id,kurtosis,max_inf_norm,outlier_count\n", 0) == 0);
    CHECK(csv.find("\nALL,") != std::string::npos);
    CHECK(r.to_json().at("average_kurtosis").get<double>() == r.average_kurtosis);
  }
  SUBCASE("order of traces does not matter") {
    std::mt19937_64 rng(13);
    std::vector<ActivationTrace> ts;
    for (int i = 0; i < 5; ++i) ts.push_back(trace_of("site" + std::to_string(i), sample(rng, 240, 1), 6));
    const auto r1 = aggregate(ts);
    std::reverse(ts.begin(), ts.end());
    const auto r2 = aggregate(ts);
    CHECK(r1.to_json() == r2.to_json());
  }
  SUBCASE("top dimensions") {
    OutlierReport r;
    r.per_dimension_shares = {0.1, 0.4, 0.0, 0.4, 0.1};
    const auto top = r.top_dimensions(3);
    REQUIRE(top.size() == 3);
    CHECK(top[0].first == 1);
    CHECK(top[1].first == 3);
    CHECK(top[2].first == 0);
  }
  CHECK_THROWS_AS(aggregate(std::vector<ActivationTrace>{}), DataError);
}

TEST_CASE("tracer records only its sites and passes tensors through") {
  OutlierTracer tracer({"x", "y"});
  const Tensor a({2, 2}, {1, -5, 2, 3});
  CHECK(tracer.on_activation("x", a).same_storage(a));
  tracer.on_activation("x", a);
  tracer.on_activation("z", a);
  const auto traces = tracer.traces();
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].batches == 2);
  CHECK(traces[0].max_abs == 5.0);
  CHECK(traces[1].batches == 0);
}

TEST_CASE("attention dumps") {
  ModelConfig c;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.model_dim = 16;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 11;
  c.feature_dim = 8;
  c.max_source_len = 32;
  c.max_target_len = 10;
  const EncoderDecoder m(c, 2);
  TaskSpec task;
  task.vocab_size = 11;
  task.feature_dim = 8;
  task.max_symbols = 5;
  const Example ex = generate_split(task, "test", 1)[0];

  for (const std::string stack : {"encoder", "decoder"}) {
    const AttentionDump d = attention_dump(m, ex, stack, 1, 1);
    const std::size_t t = stack == "encoder" ? ex.features.dim(0) : ex.target_ids.size() - 1;
    CHECK(d.probs.shape() == Shape{t, t});
    CHECK(d.values.shape() == Shape{t, 8});
    CHECK(d.token_labels.size() == t);
    const Tensor pv = ops::matmul(d.probs, d.values);
    CHECK(std::equal(pv.data().begin(), pv.data().end(), d.product.data().begin()));
    for (std::size_t i = 0; i < t; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        row += d.probs.data()[i * t + j];
        if (stack == "decoder" && j > i) CHECK(d.probs.data()[i * t + j] == 0.0f);
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }

    const fs::path dir = fs::temp_directory_path() / "qgate_test_dump";
    fs::remove_all(dir);
    const std::string bin = write_attention_dump(d, dir.string());
    CHECK(fs::path(bin).filename() == stack + "_layer1_head1.bin");
    const AttentionDump back = read_attention_dump(bin);
    CHECK(back.stack == stack);
    CHECK(back.token_labels == d.token_labels);
    for (const auto& [x, y] : {std::pair{&back.probs, &d.probs}, {&back.values, &d.values}, {&back.product, &d.product}})
      CHECK(std::equal(x->data().begin(), x->data().end(), y->data().begin()));
  }
  CHECK_THROWS_AS(attention_dump(m, ex, "encoder", 2, 0), IndexError);
  CHECK_THROWS_AS(attention_dump(m, ex, "encoder", 0, 2), IndexError);
  CHECK_THROWS_AS(attention_dump(m, ex, "middle", 0, 0), ConfigError);
}
