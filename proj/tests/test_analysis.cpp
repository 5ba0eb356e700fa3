#include <cmath>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "fixtures.hpp"
#include "metta/analysis.hpp"
#include "metta/errors.hpp"
#include "test_util.hpp"

namespace metta {
namespace {

using testing::TempDir;
using testing::trained_fixture;

// Relabels images by the central-crop prediction of a sharpened head, keeping
// only those with a clear margin, so that head is an exact oracle.
struct OracleSet {
  Dataset ds;
  LinearHead head;
};

OracleSet oracle_set(std::size_t n) {
  const auto& f = trained_fixture();
  OracleSet o{Dataset{{}, {}, f.test.num_classes, f.test.channels, f.test.height, f.test.width}, f.head};
  for (float& w : o.head.weight.data()) w *= 40.0f;
  for (float& b : o.head.bias.data()) b *= 40.0f;
  for (std::size_t i = 0; i < f.test.size() && o.ds.size() < n; ++i) {
    const Tensor z = o.head.logits(central_embedding(f.ckpt, f.test.images[i]));
    const std::size_t top = argmax(z);
    double second = -1e300;
    for (std::size_t k = 0; k < z.size(); ++k) {
      if (k != top) second = std::max<double>(second, z[k]);
    }
    if (z[top] - second < 10.0) continue;
    o.ds.images.push_back(f.test.images[i]);
    o.ds.labels.push_back(static_cast<std::uint32_t>(top));
  }
  return o;
}

TEST(Evaluate, OracleHeadScoresPerfectly) {
  const auto& f = trained_fixture();
  const OracleSet o = oracle_set(40);
  ASSERT_GE(o.ds.size(), 20u);
  const EvalReport r = evaluate(f.ckpt, o.head, o.ds, Method::kCentral, f.policy, 1, 0);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].top1, 1.0);
  EXPECT_LT(r.rows[0].nll, 0.1);
}

TEST(Evaluate, RowsMatchPerImageReplay) {
  const auto& f = trained_fixture();
  const Dataset ds = f.test.subset(0, 25);
  const Method methods[] = {Method::kCentral, Method::kTta, Method::kMetta};
  const std::size_t counts[] = {1, 6};
  const EvalReport r = evaluate_methods(f.ckpt, f.head, ds, methods, f.policy, counts, 17);
  EXPECT_EQ(r.rows.size(), 5u);  // central once, two estimators at two counts
  for (std::size_t s : counts) {
    for (Method m : {Method::kTta, Method::kMetta}) {
      double nll = 0, top1 = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const Tensor p = m == Method::kTta ? tta_predict(f.ckpt, f.head, ds.images[i], f.policy, s, 17, image_key(ds.images[i]))
                                           : metta_predict(f.ckpt, f.head, ds.images[i], f.policy, s, 17, image_key(ds.images[i]));
        nll += cross_entropy(p, ds.labels[i]);
        top1 += argmax(p) == ds.labels[i];
      }
      EXPECT_NEAR(r.row(m, s).nll, nll / ds.size(), 1e-9);
      EXPECT_NEAR(r.row(m, s).top1, top1 / ds.size(), 1e-12);
    }
  }
  EXPECT_EQ(r.row(Method::kTta, 1).top1, r.row(Method::kMetta, 1).top1);
  EXPECT_NEAR(r.row(Method::kTta, 1).nll, r.row(Method::kMetta, 1).nll, 1e-12);
}

TEST(Evaluate, PermutationInvariant) {
  const auto& f = trained_fixture();
  const Dataset ds = f.test.subset(0, 30);
  Dataset rev = ds;
  std::reverse(rev.images.begin(), rev.images.end());
  std::reverse(rev.labels.begin(), rev.labels.end());
  const Method methods[] = {Method::kCentral, Method::kMetta};
  const std::size_t counts[] = {4};
  const EvalReport a = evaluate_methods(f.ckpt, f.head, ds, methods, f.policy, counts, 3);
  const EvalReport b = evaluate_methods(f.ckpt, f.head, rev, methods, f.policy, counts, 3);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].top1, b.rows[i].top1);
    EXPECT_NEAR(a.rows[i].nll, b.rows[i].nll, 1e-9);
  }
}

TEST(Evaluate, RejectsBadInput) {
  const auto& f = trained_fixture();
  EXPECT_THROW(parse_method("median"), ValueError);
  EXPECT_EQ(parse_method("metta"), Method::kMetta);
  EXPECT_THROW(evaluate(f.ckpt, f.head, f.test.subset(0, 2), Method::kMetta, f.policy, 0, 0), ValueError);
  EXPECT_THROW(evaluate(f.ckpt, LinearHead::zeros(4, 8), f.test.subset(0, 2), Method::kCentral, f.policy, 1, 0),
               ShapeError);
}

TEST(Interpolation, EndpointsMatchEstimators) {
  const auto& f = trained_fixture();
  const Dataset ds = f.test.subset(0, 20);
  const auto alphas = default_alpha_grid();
  const auto central = interpolate_curve(f.ckpt, f.head, ds, Endpoint::kCentralCrop, alphas, f.policy, 8, 4);
  const auto single = interpolate_curve(f.ckpt, f.head, ds, Endpoint::kSingleAugmentation, alphas, f.policy, 8, 4);
  const EvalReport metta = evaluate(f.ckpt, f.head, ds, Method::kMetta, f.policy, 8, 4);
  const EvalReport base = evaluate(f.ckpt, f.head, ds, Method::kCentral, f.policy, 1, 4);
  ASSERT_EQ(central.nll.size(), 11u);
  EXPECT_NEAR(central.nll.front(), metta.rows[0].nll, 1e-6);
  EXPECT_NEAR(single.nll.front(), metta.rows[0].nll, 1e-6);
  EXPECT_NEAR(central.accuracy.front(), metta.rows[0].top1, 1e-12);
  EXPECT_NEAR(central.nll.back(), base.rows[0].nll, 1e-6);
  EXPECT_NEAR(central.accuracy.back(), base.rows[0].top1, 1e-12);
  // alpha = 1 on single augmentations is the mean per-sample loss, bounded below by the mean-embedding loss.
  EXPECT_LE(single.nll.front(), single.nll.back() + 1e-6);
}

TEST(Interpolation, LerpAndAlphaValidation) {
  const Tensor a = testing::vec({0, 2}), b = testing::vec({4, -2});
  EXPECT_TRUE(bitwise_equal(lerp(a, b, 0.0), a));
  EXPECT_TRUE(bitwise_equal(lerp(a, b, 1.0), b));
  testing::expect_near_all(lerp(a, b, 0.25), {1, 1}, 0.0);
  for (std::vector<double> bad : std::vector<std::vector<double>>{{0.0}, {0.0, 0.5}, {0.0, 1.5, 1.0}, {0.0, 0.6, 0.5, 1.0}, {-0.1, 1.0}}) {
    EXPECT_THROW(validate_alphas(bad), ValueError);
  }
  EXPECT_NO_THROW(validate_alphas(default_alpha_grid()));
}

TEST(Jitter, ZeroSpreadCases) {
  const auto& f = trained_fixture();
  const Dataset ds = f.test.subset(0, 6);
  const JitterProfile flat = jitter_stats(f.ckpt, LinearHead::zeros(4, 32), ds, f.policy, 8, 1);
  for (const auto& r : flat.rows) {
    EXPECT_FLOAT_EQ(r.prob_mean, 0.25);
    EXPECT_EQ(r.prob_std, 0.0);
    EXPECT_EQ(r.argmax_flips, 0u);
  }
  const JitterProfile fixed = jitter_stats(f.ckpt, f.head, ds, AugmentationPolicy::central_crop(), 8, 1);
  for (const auto& r : fixed.rows) {
    EXPECT_EQ(r.prob_std, 0.0);
    EXPECT_EQ(r.prob_min, r.prob_max);
    EXPECT_EQ(r.argmax_flips, 0u);
  }
  EXPECT_THROW(jitter_stats(f.ckpt, f.head, ds, f.policy, 1, 1), ValueError);
}

TEST(Jitter, RowsReplayFromSampleProbabilities) {
  const auto& f = trained_fixture();
  const Dataset ds = f.test.subset(0, 10);
  const JitterProfile p = jitter_stats(f.ckpt, f.head, ds, f.policy, 16, 2);
  ASSERT_EQ(p.rows.size(), 40u);
  for (const auto& r : p.rows) {
    const auto& probs = p.sample_probs[r.image_id];
    double sum = 0, sq = 0;
    for (const Tensor& q : probs) sum += q[r.cls];
    const double mean = sum / probs.size();
    for (const Tensor& q : probs) sq += (q[r.cls] - mean) * (q[r.cls] - mean);
    EXPECT_NEAR(r.prob_mean, mean, 1e-12);
    EXPECT_NEAR(r.prob_std, std::sqrt(sq / probs.size()), 1e-12);
    EXPECT_LE(r.prob_min, r.prob_mean + 1e-12);
    EXPECT_LE(r.prob_mean, r.prob_max + 1e-12);
    EXPECT_LT(r.argmax_flips, probs.size());
  }
}

TEST(Jitter, MajorityTiesGoToLowestClass) {
  const std::vector<Tensor> probs{testing::vec({0.6f, 0.4f}), testing::vec({0.3f, 0.7f}), testing::vec({0.9f, 0.1f}),
                                  testing::vec({0.2f, 0.8f})};
  const auto rows = jitter_rows(7, probs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].argmax_flips, 2u);
  EXPECT_NEAR(rows[0].prob_mean, 0.5, 1e-7);
  EXPECT_NEAR(rows[0].prob_min, 0.2, 1e-7);
  EXPECT_NEAR(rows[0].prob_max, 0.9, 1e-7);
  EXPECT_EQ(rows[1].image_id, 7u);
}

TEST(Reports, CsvRoundTripIsExact) {
  TempDir dir("reports");
  EvalReport r;
  r.seed = 5;
  r.rows.push_back({Method::kMetta, 32, 0.1 + 0.2, 1.0 / 3.0, 5});
  r.rows.push_back({Method::kCentral, 1, 0.75, 2.718281828459045, 5});
  emit_report(r, dir / "r.csv", ReportFormat::kCsv);
  emit_report(r, dir / "r.json", ReportFormat::kJson);
  const CsvTable t = read_csv(dir / "r.csv");
  ASSERT_EQ(t.rows.size(), 2u);
  nlohmann::json j;
  std::ifstream(dir / "r.json") >> j;
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(std::stod(t.rows[i][t.column("top1")]), r.rows[i].top1);
    EXPECT_EQ(std::stod(t.rows[i][t.column("nll")]), r.rows[i].nll);
    EXPECT_EQ(t.rows[i][t.column("method")], to_string(r.rows[i].method));
    EXPECT_EQ(j["rows"][i]["nll"].get<double>(), r.rows[i].nll);
    EXPECT_EQ(j["rows"][i]["S"].get<std::size_t>(), r.rows[i].samples);
  }
  EXPECT_THROW(t.column("accuracy"), FormatError);
}

TEST(Reports, EmptyJitterProfileIsHeaderOnly) {
  TempDir dir("jitter_empty");
  emit_report(JitterProfile{}, dir / "j.csv", ReportFormat::kCsv);
  const CsvTable t = read_csv(dir / "j.csv");
  EXPECT_EQ(t.header.size(), 7u);
  EXPECT_TRUE(t.rows.empty());
}

TEST(Reports, CurveCsvAndJsonAgree) {
  TempDir dir("curve");
  InterpolationCurve c{Endpoint::kSingleAugmentation, {0.0, 0.5, 1.0}, {0.3, 0.2, 0.1 + 1e-16}, {0.5, 0.6, 0.7}};
  emit_report(c, dir / "c.csv", ReportFormat::kCsv);
  emit_report(c, dir / "c.json", ReportFormat::kJson);
  const CsvTable t = read_csv(dir / "c.csv");
  nlohmann::json j;
  std::ifstream(dir / "c.json") >> j;
  ASSERT_EQ(t.rows.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(std::stod(t.rows[k][t.column("nll")]), j["points"][k]["nll"].get<double>());
    EXPECT_EQ(t.rows[k][t.column("endpoint")], j["points"][k]["endpoint"].get<std::string>());
  }
}

TEST(Reports, CsvReaderHandlesQuotedCells) {
  TempDir dir("csv_quotes");
  std::ofstream(dir / "q.csv") << "a,b,c\n\"x,y\",\"say \"\"hi\"\"\",\n";
  const CsvTable t = read_csv(dir / "q.csv");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"x,y", "say \"hi\"", ""}));
}

TEST(Reports, UnwritablePathRaises) {
  EXPECT_THROW(emit_report(EvalReport{}, "/nonexistent/dir/r.csv", ReportFormat::kCsv), IoError);
  EXPECT_THROW(read_csv("/nonexistent/r.csv"), IoError);
}

}  // namespace
}  // namespace metta
