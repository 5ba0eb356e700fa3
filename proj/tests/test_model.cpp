#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "metta/augment.hpp"
#include "metta/core.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/model.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

namespace metta {
namespace {

using testing::TempDir;

BackboneConfig small_config(std::size_t size = 16) { return BackboneConfig{1, size, size, {{6, 2}, {12, 2}}, 12}; }

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

double held_out_accuracy(const Checkpoint& ckpt, const LinearHead& head, const Dataset& ds) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hits += argmax(head.logits(central_embedding(ckpt, ds.images[i]))) == ds.labels[i];
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c = small_config();
  c.embedding_dim = 7;
  EXPECT_THROW(build_backbone(c, 1), ValueError);
  c = small_config();
  c.stages.clear();
  EXPECT_THROW(build_backbone(c, 1), ValueError);
  c = small_config();
  c.stages[0].stride = 0;
  EXPECT_THROW(build_backbone(c, 1), ValueError);
}

TEST(Backbone, DeterministicInitWithinHeBound) {
  const Checkpoint a = build_backbone(BackboneConfig::standard(), 5), b = build_backbone(BackboneConfig::standard(), 5);
  EXPECT_EQ(backbone_hash(a), backbone_hash(b));
  EXPECT_NE(backbone_hash(a), backbone_hash(build_backbone(BackboneConfig::standard(), 6)));
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor& w = a.stage_weight(i);
    ASSERT_TRUE(bitwise_equal(w, b.stage_weight(i)));
    const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(1) * 9));
    for (float v : w.data()) ASSERT_LE(std::abs(v), bound);
  }
}

TEST(Backbone, ParameterCountClosedForm) {
  // 16*1*9 + 32*16*9 + 64*32*9
  const BackboneConfig cfg = BackboneConfig::standard();
  EXPECT_EQ(cfg.parameter_count(), 23184u);
  const Checkpoint ck = build_backbone(cfg, 0);
  std::size_t n = 0;
  for (const auto& [name, t] : ck.params) n += t.size();
  EXPECT_EQ(n, 23184u);
  EXPECT_EQ(BackboneConfig({3, 8, 8, {{4, 1}}, 4}).parameter_count(), 4u * 3 * 9);
}

TEST(Embed, ZeroImageFiniteAndZeroWeightsGiveZero) {
  Checkpoint ck = build_backbone(BackboneConfig::standard(), 1);
  const Tensor e = embed(ck, Tensor({1, 32, 32}));
  EXPECT_EQ(e.shape(), (Shape{64}));
  EXPECT_TRUE(all_finite(e));
  for (auto& [name, t] : ck.params) t = Tensor(t.shape());
  const Tensor z = embed(ck, gen_shapes_dataset(1, 4, 4, 32).images[0]);
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Embed, PureAndShapeChecked) {
  const Checkpoint ck = build_backbone(small_config(), 2);
  const Tensor x = gen_shapes_dataset(3, 4, 4, 16).images[1];
  EXPECT_TRUE(bitwise_equal(embed(ck, x), embed(ck, x)));
  EXPECT_THROW(embed(ck, Tensor({3, 16, 16})), ShapeError);
  EXPECT_THROW(embed(ck, Tensor({16, 16})), ShapeError);
  EXPECT_EQ(embed(ck, Tensor({1, 23, 23}, 0.5f)).shape(), (Shape{12}));  // other spatial sizes allowed
}

TEST(TrainBackbone, DeterministicFinalLoss) {
  const Dataset ds = gen_shapes_dataset(1, 64, 4, 16);
  const TrainOptions opts{1, 16, 0.05f, 0.9f, 3};
  const auto a = train_backbone(build_backbone(small_config(), 1), ds, AugmentationPolicy::central_crop(), opts);
  const auto b = train_backbone(build_backbone(small_config(), 1), ds, AugmentationPolicy::central_crop(), opts);
  ASSERT_EQ(a.epoch_loss.size(), 1u);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.value.meta.epochs, 1u);
  EXPECT_TRUE(a.value.has_training_head());
}

TEST(TrainBackbone, ZeroLearningRateLeavesParameters) {
  const Dataset ds = gen_shapes_dataset(1, 32, 4, 16);
  const Checkpoint start = build_backbone(small_config(), 4);
  const auto out = train_backbone(start, ds, AugmentationPolicy::random_resized_crop_flip(), {2, 8, 0.0f, 0.9f, 1});
  EXPECT_EQ(backbone_hash(out.value), backbone_hash(start));
}

TEST(TrainBackbone, EmptyDatasetRejected) {
  const Dataset empty{{}, {}, 4, 1, 16, 16};
  EXPECT_THROW(train_backbone(build_backbone(small_config(), 1), empty, AugmentationPolicy::central_crop(), {}),
               ValueError);
  EXPECT_THROW(train_linear_head(build_backbone(small_config(), 1), empty, AugmentationPolicy::central_crop(), {}),
               ValueError);
}

// Measured on this configuration while building: epoch-0 loss ~1.39 (chance
// for 4 classes), final loss ~1.0.
TEST(TrainBackbone, LossDecreasesOverTwentyEpochs) {
  const Dataset ds = gen_shapes_dataset(31, 1000, 4, 16);
  const BackboneConfig cfg{1, 16, 16, {{8, 2}, {16, 2}, {32, 2}}, 32};
  const auto out = train_backbone(build_backbone(cfg, 3), ds, AugmentationPolicy::random_resized_crop_flip(),
                                  {20, 8, 0.05f, 0.9f, 7});
  ASSERT_EQ(out.epoch_loss.size(), 20u);
  EXPECT_LT(out.epoch_loss.back(), out.epoch_loss.front());
  EXPECT_LT(out.epoch_loss.back(), 0.9 * std::log(4.0));
}

class TrainedModel : public ::testing::Test {
 protected:
  const testing::TrainedFixture& f = testing::trained_fixture();
  const Dataset* train_ = &f.train;
  const Dataset* test_ = &f.test;
  const Checkpoint* ckpt_ = &f.ckpt;
};

TEST_F(TrainedModel, LinearHeadFreezesBackboneAndBeatsRandomHead) {
  const Checkpoint before = *ckpt_;
  const auto head = train_linear_head(*ckpt_, *train_, AugmentationPolicy::random_resized_crop_flip(),
                                      {5, 32, 0.05f, 0.9f, 2});
  EXPECT_EQ(backbone_hash(*ckpt_), backbone_hash(before));
  EXPECT_EQ(*ckpt_, before);
  LinearHead random = LinearHead::zeros(4, 32);
  CounterRng rng({77});
  for (float& w : random.weight.data()) w = static_cast<float>(rng.normal());
  const double trained_acc = held_out_accuracy(*ckpt_, head.value, *test_);
  const double random_acc = held_out_accuracy(*ckpt_, random, *test_);
  EXPECT_GT(trained_acc, random_acc + 0.1);
  EXPECT_GT(trained_acc, 0.5);
}

TEST_F(TrainedModel, SingleClassHeadLossFallsTowardZero) {
  Dataset one = train_->subset(0, 64);
  one.num_classes = 1;
  for (auto& y : one.labels) y = 0;
  const auto head = train_linear_head(*ckpt_, one, AugmentationPolicy::central_crop(), {6, 16, 0.1f, 0.0f, 1});
  // With one class the softmax is identically 1, so the loss is 0 from the start.
  for (double l : head.epoch_loss) EXPECT_NEAR(l, 0.0, 1e-6);
  Dataset two = one;
  two.num_classes = 2;
  const auto head2 = train_linear_head(*ckpt_, two, AugmentationPolicy::central_crop(), {6, 16, 0.1f, 0.0f, 1});
  for (std::size_t e = 1; e < head2.epoch_loss.size(); ++e) EXPECT_LT(head2.epoch_loss[e], head2.epoch_loss[e - 1]);
  EXPECT_LT(head2.epoch_loss.back(), 0.15);
  EXPECT_GT(softmax(head2.value.logits(central_embedding(*ckpt_, one.images[0])))[0], 0.9f);
}

TEST_F(TrainedModel, HflipChangesEmbedding) {
  const Tensor& x = test_->images[0];
  EXPECT_FALSE(bitwise_equal(embed(*ckpt_, x), embed(*ckpt_, hflip(x))));
}

TEST(Checkpoint, RoundTripAndEmbeddingMatch) {
  TempDir dir("ck");
  Checkpoint ck = build_backbone(small_config(), 9);
  ck.set_head(LinearHead{Tensor({3, 12}, 0.25f), Tensor({3}, -1.0f)});
  ck.set_training_head(LinearHead::zeros(3, 12));
  ck.meta = TrainingMetadata{0x1234567890abcdefull, 7, "RandomResizedCropFlip(s_lo=0.6,s_hi=1,size=0)"};
  save_checkpoint(ck, dir / "a.mtck");
  const Checkpoint back = load_checkpoint(dir / "a.mtck");
  EXPECT_EQ(back, ck);
  for (const auto& [name, t] : ck.params) EXPECT_TRUE(bitwise_equal(back.params.at(name), t)) << name;
  const Tensor x = gen_shapes_dataset(1, 4, 4, 16).images[2];
  EXPECT_TRUE(bitwise_equal(embed(back, x), embed(ck, x)));
  save_checkpoint(back, dir / "b.mtck");
  EXPECT_EQ(read_bytes(dir / "a.mtck"), read_bytes(dir / "b.mtck"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir dir("ck");
  const Checkpoint ck = build_backbone(small_config(), 9);
  save_checkpoint(ck, dir / "ok.mtck");
  const std::string bytes = read_bytes(dir / "ok.mtck");

  std::string s = bytes;
  s[1] = 'X';
  write_bytes(dir / "magic.mtck", s);
  EXPECT_THROW(load_checkpoint(dir / "magic.mtck"), FormatError);

  s = bytes;
  s[4] = 2;
  write_bytes(dir / "version.mtck", s);
  try {
    load_checkpoint(dir / "version.mtck");
    FAIL() << "version mismatch accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{10}}) {
    write_bytes(dir / "short.mtck", bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(dir / "short.mtck"), FormatError) << cut;
  }
  write_bytes(dir / "long.mtck", bytes + "zz");
  EXPECT_THROW(load_checkpoint(dir / "long.mtck"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "none.mtck"), IoError);
}

TEST(Checkpoint, RejectsMissingOrMisshapenParameters) {
  TempDir dir("ck");
  Checkpoint missing = build_backbone(small_config(), 1);
  missing.params.erase(stage_param_name(1));
  save_checkpoint(missing, dir / "m.mtck");
  EXPECT_THROW(load_checkpoint(dir / "m.mtck"), FormatError);

  Checkpoint wrong = build_backbone(small_config(), 1);
  wrong.params[stage_param_name(0)] = Tensor({6, 1, 5, 5});
  save_checkpoint(wrong, dir / "w.mtck");
  EXPECT_THROW(load_checkpoint(dir / "w.mtck"), FormatError);

  Checkpoint half_head = build_backbone(small_config(), 1);
  half_head.params[kHeadWeight] = Tensor({3, 12});
  save_checkpoint(half_head, dir / "h.mtck");
  EXPECT_THROW(load_checkpoint(dir / "h.mtck"), FormatError);

  Checkpoint extra = build_backbone(small_config(), 1);
  extra.params["stray"] = Tensor({2});
  save_checkpoint(extra, dir / "e.mtck");
  EXPECT_THROW(load_checkpoint(dir / "e.mtck"), FormatError);
}

TEST(Checkpoint, HeadAccessors) {
  Checkpoint ck = build_backbone(small_config(), 1);
  EXPECT_FALSE(ck.has_head());
  EXPECT_THROW(ck.head(), ValueError);
  EXPECT_THROW(ck.set_head(LinearHead::zeros(3, 5)), ShapeError);
}

}  // namespace
}  // namespace metta
