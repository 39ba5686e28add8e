#include <doctest.h>

#include "spa/metrics.hpp"

using namespace spa;

TEST_CASE("accuracy") {
    CHECK(accuracy(std::vector<int>{0, 1, 2}, std::vector<int>{0, 1, 2}) == 1.0);
    CHECK(accuracy(std::vector<int>{1, 2, 0}, std::vector<int>{0, 1, 2}) == 0.0);
    CHECK(accuracy(std::vector<int>{0, 1, 2, 2}, std::vector<int>{0, 1, 2, 0}) == 0.75);
    CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
    CHECK_THROWS_AS(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), std::invalid_argument);

    PredictionBatch p;
    p.batch = 2;
    p.num_classes = 3;
    p.class_logits = {0.5, 0.5, 0.1, -1.0, 0.0, 2.0};
    CHECK(accuracy(p, std::vector<int>{0, 2}) == 1.0);
    CHECK(accuracy(p, std::vector<int>{1, 2}) == 0.5);
}

TEST_CASE("mae") {
    CHECK(mae(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0, 2.0}) == 0.0);
    CHECK(mae(std::vector<double>{1.0, -2.0, 3.0}, std::vector<double>{0.0, 0.0, 0.0}) == 2.0);
    CHECK_THROWS_AS(mae(std::vector<double>{1.0}, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("iou") {
    const std::vector<std::uint8_t> a{1, 1, 0, 0};
    const std::vector<std::uint8_t> b{0, 1, 1, 0};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
    CHECK(iou(std::vector<std::uint8_t>{0, 0}, std::vector<std::uint8_t>{0, 0}) == 1.0);
    CHECK(iou(std::vector<std::uint8_t>{1, 0}, std::vector<std::uint8_t>{0, 1}) == 0.0);
    CHECK_THROWS_AS(iou(a, std::vector<std::uint8_t>{1}), std::invalid_argument);
}

TEST_CASE("foreground mask thresholds the background probability") {
    PredictionBatch p;
    p.batch = 1;
    p.height = 1;
    p.width = 3;
    p.pixel_classes = 2;
    p.pixel_logits = {2.0, 0.0, 0.0, 0.0, -1.0, 1.0};
    CHECK(foreground_mask(p, 0) == std::vector<std::uint8_t>{0, 1, 1});
    CHECK_THROWS_AS(foreground_mask(p, 1), std::out_of_range);
}
