#include <algorithm>
#include <random>

#include "clsa/detection.hpp"
#include "clsa/errors.hpp"
#include "doctest.h"
#include "test_oracles.hpp"

using namespace clsa;

namespace {

BoundingBox scored(double x1, double y1, double x2, double y2, double s) {
  BoundingBox b{x1, y1, x2, y2};
  b.score = s;
  return b;
}

BoundingBox labeled(double x1, double y1, double x2, double y2, int id) {
  BoundingBox b{x1, y1, x2, y2};
  b.identity = id;
  return b;
}

SceneAnnotation scene(const std::string& id, std::vector<BoundingBox> boxes) {
  return SceneAnnotation{id, id + ".png", 100, 100, std::move(boxes)};
}

}  // namespace

TEST_CASE("score filter is strict and order preserving") {
  DetectionSet d{"s", {scored(0, 0, 10, 10, 0.9), scored(1, 1, 9, 9, 0.5), scored(2, 2, 8, 8, 0.4)}};
  const auto out = filter_by_score(d, 0.5);
  REQUIRE(out.detections.size() == 1);
  CHECK(*out.detections[0].score == 0.9);

  DetectionSet many{"s", {}};
  for (int i = 0; i < 30; ++i) many.detections.push_back(scored(i, i, i + 5, i + 5, 0.51));
  const auto kept = filter_by_score(many, 0.5);
  CHECK(kept.detections == many.detections);

  DetectionSet unscored{"s", {BoundingBox{0, 0, 1, 1}}};
  CHECK_THROWS_AS(filter_by_score(unscored, 0.5), ContractError);
}

TEST_CASE("nms worked example") {
  const auto a = scored(0, 0, 10, 10, 0.9);
  const auto b = scored(1, 1, 10, 10, 0.8);  // IoU with a = 81/100
  const auto c = scored(20, 20, 30, 30, 0.7);
  const auto out = nms(DetectionSet{"s", {c, b, a}}, 0.5, 256);
  REQUIRE(out.detections.size() == 2);
  CHECK(out.detections[0] == a);
  CHECK(out.detections[1] == c);
  CHECK(nms(DetectionSet{"s", {c, b, a}}, 0.5, 1).detections.size() == 1);
}

TEST_CASE("nms matches the quadratic reference") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<BoundingBox> boxes;
    const int n = static_cast<int>(rng() % 25);
    for (int i = 0; i < n; ++i) {
      auto box = testing::random_int_box(rng, 40);
      // coarse scores force ties through the geometric tie-break
      box.score = std::round(unit(rng) * 5.0) / 5.0;
      boxes.push_back(box);
    }
    const std::size_t keep = 1 + rng() % 10;
    const double thr = 0.3 + 0.4 * unit(rng);
    const auto got = nms(DetectionSet{"s", boxes}, thr, keep);
    const auto want = testing::reference_nms(boxes, thr, keep);
    REQUIRE(got.detections.size() <= keep);
    REQUIRE(got.detections.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got.detections[i].x1 == want[i].x1);
      CHECK(got.detections[i].y1 == want[i].y1);
      CHECK(got.detections[i].x2 == want[i].x2);
      CHECK(got.detections[i].y2 == want[i].y2);
      CHECK(*got.detections[i].score == *want[i].score);
    }
  }
}

TEST_CASE("label propagation") {
  const auto gt = scene("s", {labeled(0, 0, 10, 10, 3)});
  // IoU 0.6 propagates, IoU 0.3 does not
  const auto hit = scored(0, 0, 10, 6, 0.9);     // 60 / 100
  const auto miss = scored(0, 0, 10, 3, 0.9);    // 30 / 100
  const auto pairs = assign_labels(DetectionSet{"s", {hit, miss}}, gt, 0.5);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].second == 3);
  CHECK(pairs[1].second == 3);
  CHECK(pairs[1].first.y2 == 6.0);

  // a detection overlapping two people takes the better match
  const auto two = scene("t", {labeled(0, 0, 10, 10, 1), labeled(2, 0, 12, 10, 2)});
  const auto det = scored(2, 0, 11, 10, 0.9);
  const double to_first = iou(det, two.boxes[0]);
  const double to_second = iou(det, two.boxes[1]);
  REQUIRE(to_first > 0.5);
  REQUIRE(to_second > to_first);
  const auto out = assign_labels(DetectionSet{"t", {det}}, two, 0.5);
  REQUIRE(out.size() == 3);
  CHECK(out[2].second == 2);

  // unlabeled ground truth contributes nothing
  const auto anon = scene("u", {BoundingBox{0, 0, 10, 10}});
  CHECK(assign_labels(DetectionSet{"u", {scored(0, 0, 10, 10, 0.9)}}, anon, 0.5).empty());
}

TEST_CASE("detection precision-recall examples") {
  DatasetManifest gt;
  gt.scenes = {scene("a", {BoundingBox{0, 0, 10, 10}}), scene("b", {BoundingBox{50, 50, 60, 60}})};

  const auto perfect = detection_pr({DetectionSet{"a", {scored(0, 0, 10, 10, 0.9)}},
                                     DetectionSet{"b", {scored(50, 50, 60, 60, 0.8)}}},
                                    gt, 0.5);
  CHECK(perfect.average_precision == doctest::Approx(1.0));

  DatasetManifest one;
  one.scenes = {scene("a", {BoundingBox{0, 0, 10, 10}})};
  // a false positive outranks the only true hit: AP = 1 * 1/2
  const auto late = detection_pr({DetectionSet{"a", {scored(80, 80, 90, 90, 0.9), scored(0, 0, 10, 10, 0.8)}}},
                                 one, 0.5);
  CHECK(late.average_precision == doctest::Approx(0.5));
  REQUIRE(late.points.size() == 2);
  CHECK(late.points[0] == std::pair(0.0, 0.0));
  CHECK(late.points[1] == std::pair(1.0, 0.5));

  // a duplicate of an already matched box is a false positive
  const auto dup = detection_pr({DetectionSet{"a", {scored(0, 0, 10, 10, 0.9), scored(0, 0, 10, 9, 0.8)}}},
                                one, 0.5);
  CHECK(dup.points[1] == std::pair(1.0, 0.5));
  CHECK(dup.average_precision == doctest::Approx(1.0));

  DatasetManifest empty;
  empty.scenes = {scene("a", {})};
  CHECK_THROWS_AS(detection_pr({}, empty, 0.5), DomainError);
  CHECK_THROWS_AS(detection_pr({DetectionSet{"zz", {}}}, one, 0.5), ContractError);
}

TEST_CASE("detection AP matches a hand sweep on random scenes") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    DatasetManifest gt;
    std::vector<DetectionSet> dets;
    for (int s = 0; s < 3; ++s) {
      auto sc = scene("s" + std::to_string(s), {});
      for (int g = 0; g < 3; ++g) sc.boxes.push_back(testing::random_int_box(rng, 30));
      gt.scenes.push_back(sc);
      DetectionSet d{sc.image_id, {}};
      for (int i = 0; i < 4; ++i) {
        auto b = testing::random_int_box(rng, 30);
        b.score = unit(rng);
        d.detections.push_back(b);
      }
      // one near-copy of a ground-truth box per scene so some hits happen
      auto copy = sc.boxes[0];
      copy.score = unit(rng);
      d.detections.push_back(copy);
      dets.push_back(d);
    }
    const double ap = testing::hand_sweep_ap(dets, gt);
    CHECK(detection_pr(dets, gt, 0.5).average_precision == doctest::Approx(ap).epsilon(1e-12));
  }
}

TEST_CASE("jitter detector") {
  const auto gt = scene("img_7", {labeled(10, 10, 30, 60, 0), labeled(50, 20, 70, 70, 1)});
  const JitterConfig cfg;
  const auto a = oracle_jitter_detector(gt, cfg, 42);
  const auto b = oracle_jitter_detector(gt, cfg, 42);
  CHECK(a.detections == b.detections);
  CHECK(a.source == DetectionSource::kOracleJitter);
  for (const auto& d : a.detections) {
    CHECK(d.score.has_value());
    CHECK(d.x1 >= 0.0);
    CHECK(d.y2 <= 100.0);
  }

  const auto exact = oracle_jitter_detector(gt, JitterConfig::none(), 9);
  REQUIRE(exact.detections.size() == 2);
  for (const auto& d : exact.detections) {
    const bool matches = std::any_of(gt.boxes.begin(), gt.boxes.end(), [&](const BoundingBox& g) {
      return d.x1 == g.x1 && d.y1 == g.y1 && d.x2 == g.x2 && d.y2 == g.y2;
    });
    CHECK(matches);
    CHECK(*d.score == 1.0);
  }

  auto all_missed = JitterConfig::none();
  all_missed.miss_rate = 1.0;
  CHECK(oracle_jitter_detector(gt, all_missed, 3).detections.empty());
}
