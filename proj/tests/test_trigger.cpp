#include <set>
#include <vector>

#include "clbd/trigger.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace clbd;

namespace {

LabeledDataset images(std::size_t n, std::size_t side, std::size_t classes, std::uint64_t seed) {
  auto ds = clbd::test::random_dataset(n, side * side, classes, seed);
  ds.image_side = side;
  return ds;
}

}  // namespace

TEST_CASE("static trigger writes the patch into the bottom-right corner only") {
  const auto ds = images(1, 8, 2, 1);
  std::vector<double> img(ds.x.row(0).begin(), ds.x.row(0).end());
  const auto original = img;
  Rng rng(0);
  const auto at = apply_trigger(img, 8, TriggerSpec::static_default(), rng);
  CHECK(at.row == 4);
  CHECK(at.col == 4);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      const double v = img[r * 8 + c];
      if (r >= 4 && c >= 4) {
        CHECK(v == 0.0);
      } else {
        CHECK(v == original[r * 8 + c]);
      }
    }
  }
}

TEST_CASE("dynamic trigger patches stay inside the image and within [0, 1]") {
  auto spec = TriggerSpec::dynamic_default();
  Rng rng(3);
  std::set<std::pair<std::size_t, std::size_t>> corners;
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> img(49, 0.5);
    const auto at = apply_trigger(img, 7, spec, rng);
    CHECK(at.row + spec.height <= 7);
    CHECK(at.col + spec.width <= 7);
    corners.insert({at.row, at.col});
    for (double v : img) CHECK((v >= 0.0 && v <= 1.0));
  }
  // 3 x 3 possible placements for a 5x5 patch on a 7x7 image
  CHECK(corners.size() == 9);
}

TEST_CASE("embed_static relabels round(ratio * N) rows and leaves the rest untouched") {
  const auto ds = images(101, 6, 3, 2);
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.1;
  spec.seed = 4;
  const auto p = embed_static(ds, spec);
  CHECK(p.poisoned_rows().size() == 10);
  CHECK(p.clean_rows().size() == 91);
  for (auto r : p.poisoned_rows()) CHECK(p.data.y[r] == spec.target_label);
  for (auto r : p.clean_rows()) {
    CHECK(p.data.y[r] == ds.y[r]);
    for (std::size_t c = 0; c < ds.dim(); ++c) CHECK(p.data.x(r, c) == ds.x(r, c));
  }
  CHECK(embed_static(ds, spec).poisoned_mask == p.poisoned_mask);
}

TEST_CASE("zero poison ratio returns the dataset unchanged") {
  const auto ds = images(20, 5, 2, 3);
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.0;
  const auto p = embed_trigger(ds, spec);
  CHECK(p.poisoned_rows().empty());
  CHECK(p.data.x == ds.x);
  CHECK(p.data.y == ds.y);
}

TEST_CASE("embed_dynamic balances poisoned rows across classes") {
  const auto ds = images(200, 8, 2, 5);
  auto spec = TriggerSpec::dynamic_default();
  spec.seed = 6;
  const auto p = embed_dynamic(ds, spec);
  std::size_t per_class[2] = {0, 0};
  for (auto r : p.poisoned_rows()) ++per_class[ds.y[r]];
  CHECK(per_class[0] + per_class[1] == 30);
  CHECK(per_class[0] == 15);
  CHECK(per_class[1] == 15);
}

TEST_CASE("evaluation splits exclude the target class from the triggered copy") {
  const auto ds = images(40, 6, 2, 7);
  const auto ev = make_eval_splits(ds, TriggerSpec::static_default());
  CHECK(ev.clean.size() == 40);
  CHECK(ev.triggered.size() == 20);
  for (auto y : ev.triggered.y) CHECK(y != 1);
  CHECK(ev.target_label == 1);
}

TEST_CASE("trigger specs are validated against the image size") {
  auto spec = TriggerSpec::static_default();
  CHECK_NOTHROW(spec.validate(4));
  CHECK_THROWS_AS(spec.validate(3), Error);
  spec.value = 1.5;
  CHECK_THROWS_AS(spec.validate(28), Error);
  spec = TriggerSpec::static_default();
  spec.poison_ratio = -0.1;
  CHECK_THROWS_AS(spec.validate(28), Error);
  const auto flat = clbd::test::random_dataset(4, 10, 2, 1);
  CHECK_THROWS_AS(embed_static(flat, TriggerSpec::static_default()), DataError);
}
