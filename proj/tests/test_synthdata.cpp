#include <doctest.h>

#include <fstream>
#include <iterator>

#include "longiseg/error.hpp"
#include "longiseg/metrics.hpp"
#include "longiseg/synthdata.hpp"
#include "support.hpp"

using namespace longiseg;

namespace {

// Best mean Dice over labels 1 and 2 of a single-threshold classifier on their voxels.
double threshold_dice(const Timepoint& tp) {
  std::vector<float> cuts;
  for (std::size_t i = 0; i < tp.label->values().size(); ++i) {
    const auto l = tp.label->values()[i];
    if (l == 1 || l == 2) cuts.push_back(tp.image.values()[i]);
  }
  std::sort(cuts.begin(), cuts.end());
  double best = 0.0;
  for (std::size_t k = 0; k < cuts.size(); k += std::max<std::size_t>(1, cuts.size() / 200)) {
    for (int polarity = 0; polarity < 2; ++polarity) {
      Mask t1, p1, t2, p2;
      for (std::size_t i = 0; i < tp.label->values().size(); ++i) {
        const auto l = tp.label->values()[i];
        if (l != 1 && l != 2) continue;
        const bool low = tp.image.values()[i] < cuts[k];
        const bool as1 = polarity ? !low : low;
        t1.push_back(l == 1);
        p1.push_back(as1);
        t2.push_back(l == 2);
        p2.push_back(!as1);
      }
      best = std::max(best, 0.5 * (dice(t1, p1) + dice(t2, p2)));
    }
  }
  return best;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("static phantom without noise or growth is constant over time") {
  PhantomConfig pc;
  pc.grid_size = {16, 16, 16};
  pc.noise_std = 0.0;
  pc.growth_rate = 0.0;
  pc.contrast_schedule = {{0.0, {0.0, 0.3, 0.6, 0.9}}};
  pc.min_timepoints = pc.max_timepoints = 3;
  const auto s = generate_subject(pc, 11);
  REQUIRE(s.timepoints.size() == 3);
  CHECK(s.timepoints[1].image == s.timepoints[0].image);
  CHECK(s.timepoints[2].image == s.timepoints[0].image);
  CHECK(*s.timepoints[2].label == *s.timepoints[0].label);
}

TEST_CASE("outer tissue grows with age") {
  PhantomConfig pc;
  pc.min_timepoints = pc.max_timepoints = 5;
  const auto s = generate_subject(pc, 3);
  std::size_t last = 0;
  for (const auto& tp : s.timepoints) {
    const std::size_t n = tp.label->count(1);
    CHECK(n > last);
    last = n;
  }
}

TEST_CASE("isointense preset destroys contrast at the middle scan") {
  const PhantomConfig pc = PhantomConfig::isointense_preset();
  const auto s = generate_subject(pc, 5);
  REQUIRE(s.timepoints.size() == 3);
  CHECK(threshold_dice(s.timepoints[1]) < 0.6);
  CHECK(threshold_dice(s.timepoints[0]) > 0.9);
  CHECK(threshold_dice(s.timepoints[2]) > 0.9);
}

TEST_CASE("split sizes") {
  CHECK(split_sizes(10, {0.7, 0.1, 0.2}) == std::vector<int>{7, 1, 2});
  CHECK(split_sizes(5, {0.7, 0.1, 0.2}) == std::vector<int>{3, 1, 1});
  CHECK(split_sizes(3, {0.7, 0.1, 0.2}) == std::vector<int>{1, 1, 1});
  CHECK_THROWS_AS(split_sizes(2, {0.7, 0.1, 0.2}), Error);
}

TEST_CASE("dataset generation is deterministic and independent of workers") {
  PhantomConfig pc;
  pc.grid_size = {16, 16, 16};
  pc.growth_rate = 0.25;
  pc.center_jitter = 1.0;
  pc.num_subjects = 10;
  pc.rng_seed = 77;
  const auto a = testing::scratch_dir("synth_a"), b = testing::scratch_dir("synth_b");
  const auto ma = generate_dataset(pc, a, 1);
  const auto mb = generate_dataset(pc, b, 3);
  CHECK(ma.split("train").size() == 7);
  CHECK(ma.split("val").size() == 1);
  CHECK(ma.split("test").size() == 2);
  CHECK(read_bytes(a / "manifest.json") == read_bytes(b / "manifest.json"));
  for (const auto& subj : ma.subjects)
    for (const auto& tp : subj.timepoints) {
      CHECK(read_bytes(a / tp.image) == read_bytes(b / tp.image));
      CHECK(read_bytes(a / *tp.label) == read_bytes(b / *tp.label));
    }
  const auto back = load_manifest(a / "manifest.json");
  CHECK_NOTHROW(back.validate());
  CHECK(back.subjects.size() == 10);
  CHECK(back.num_labels == 4);
}

TEST_CASE("config validation and JSON") {
  PhantomConfig pc;
  nlohmann::json j = pc;
  const auto back = j.get<PhantomConfig>();
  CHECK(nlohmann::json(back) == j);
  pc.grid_size = {4, 16, 16};
  CHECK_THROWS_AS(pc.validate(), Error);
  PhantomConfig big;
  big.growth_rate = 10.0;
  CHECK_THROWS_AS(big.validate(), Error);
  CHECK(format_age(1.0) == "1");
  CHECK(format_age(0.5) == "0.5");
}
