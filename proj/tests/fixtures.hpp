#pragma once

#include "metta/augment.hpp"
#include "metta/dataset.hpp"
#include "metta/model.hpp"

namespace metta::testing {

// A small backbone trained once per test binary: 1000 16x16 shapes images,
// 4 classes, 20 epochs, plus a linear head. Held-out central-crop accuracy
// is about 0.6, enough for the directional checks.
struct TrainedFixture {
  Dataset train, test;
  Checkpoint ckpt;
  LinearHead head;
  AugmentationPolicy policy = AugmentationPolicy::random_resized_crop_flip();
};

inline const TrainedFixture& trained_fixture() {
  static const TrainedFixture f = [] {
    TrainedFixture t;
    t.train = gen_shapes_dataset(31, 1000, 4, 16);
    t.test = gen_shapes_dataset(32, 200, 4, 16);
    const BackboneConfig cfg{1, 16, 16, {{8, 2}, {16, 2}, {32, 2}}, 32};
    t.ckpt = train_backbone(build_backbone(cfg, 3), t.train, t.policy, {20, 8, 0.05f, 0.9f, 7}).value;
    t.head = train_linear_head(t.ckpt, t.train, t.policy, {5, 32, 0.05f, 0.9f, 2}).value;
    t.ckpt.set_head(t.head);
    return t;
  }();
  return f;
}

}  // namespace metta::testing
