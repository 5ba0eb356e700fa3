// Small end-to-end run: train a tiny backbone on synthetic shapes, then
// compare central-crop, TTA and mean-embedding predictions.

#include <cstdio>
#include <vector>

#include "metta/metta.hpp"

int main() {
  using namespace metta;
  const Dataset train = gen_shapes_dataset(1, 1000, 4, 24);
  const Dataset test = gen_shapes_dataset(2, 100, 4, 24);
  const BackboneConfig cfg{1, 24, 24, {{8, 2}, {16, 2}, {32, 2}}, 32};
  const auto policy = AugmentationPolicy::random_resized_crop_flip(0.6, 1.0);

  const auto backbone = train_backbone(build_backbone(cfg, 3), train, policy, {15, 8, 0.05f, 0.9f, 11});
  const auto head = train_linear_head(backbone.value, train, policy, {4, 32, 0.05f, 0.9f, 12});

  const Method methods[] = {Method::kCentral, Method::kTta, Method::kMetta};
  const std::size_t counts[] = {1, 8, 16};
  const EvalReport report = evaluate_methods(backbone.value, head.value, test, methods, policy, counts, 5);
  std::printf("%-8s %4s %8s %8s\n", "method", "S", "top1", "nll");
  for (const auto& r : report.rows) {
    std::printf("%-8s %4zu %8.4f %8.4f\n", to_string(r.method).c_str(), r.samples, r.top1, r.nll);
  }

  const RetrievalIndex index = build_index(backbone.value, test, AugmentationPolicy::multi_scale());
  const auto top = query_index(index, backbone.value, test.images[0], AugmentationPolicy::multi_scale(), 3);
  std::printf("query 0 ->");
  for (const auto& m : top) std::printf(" %zu (%.4f)", m.id, m.score);
  std::printf("\n");
}
