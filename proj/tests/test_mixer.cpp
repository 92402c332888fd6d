// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "cptlab/error.hpp"
#include "cptlab/mixer.hpp"
#include "support.hpp"

using namespace cptlab;

namespace {

constexpr std::int64_t B = 1'000'000'000;
constexpr std::int64_t M = 1'000'000;

Allocation full_sizes() { return {{"en", 82 * B}, {"de", 82 * B}, {"bar", 80 * M}}; }

Shard shard_of(const std::string& tag, std::size_t docs, std::size_t doc_len, TokenId base, bool up = false) {
  Shard s{tag, {}, up};
  for (std::size_t d = 0; d < docs; ++d) {
    std::vector<TokenId> doc;
    for (std::size_t i = 0; i < doc_len; ++i) doc.push_back(static_cast<TokenId>(base + d));
    s.documents.push_back(doc);
  }
  return s;
}

MixPlan single_phase(Allocation a) {
  std::int64_t total = 0;
  for (const auto& [t, n] : a) total += n;
  return MixPlan{{PhasePlan{0.0, 1.0, total, std::move(a)}}};
}

}  // namespace

TEST_CASE("reference two-language splits") {
  const auto even = plan_mix({16 * B, {{"de", 1}, {"en", 1}}});
  CHECK(even.at("de") == 8 * B);
  CHECK(even.at("en") == 8 * B);
  const auto skewed = plan_mix({16 * B, {{"de", 9}, {"en", 1}}});
  CHECK(skewed.at("de") == 14'400 * M);
  CHECK(skewed.at("en") == 1'600 * M);
  const auto fractional = plan_mix({16 * B, {{"de", 0.9}, {"en", 0.1}}});
  CHECK(fractional.at("de") == 14'400 * M);
  CHECK(fractional.at("en") == 1'600 * M);
}

TEST_CASE("largest remainder against enumeration") {
  const auto three = plan_mix({10, {{"a", 1}, {"b", 1}, {"c", 1}}});
  CHECK(three == Allocation{{"a", 4}, {"b", 3}, {"c", 3}});

  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    MixSpec spec;
    spec.total_tokens = 1 + static_cast<std::int64_t>(rng.below(50));
    const auto n = 1 + rng.below(4);
    for (std::uint64_t i = 0; i < n; ++i) spec.ratios[std::string(1, static_cast<char>('a' + i))] = 1.0 + static_cast<double>(rng.below(9));
    const auto got = plan_mix(spec);
    double wsum = 0.0;
    for (const auto& [t, w] : spec.ratios) wsum += w;
    // Enumerate every floor/ceil rounding that sums to the total; the chosen
    // one must be among them and must give extra tokens to the largest
    // remainders.
    std::int64_t sum = 0;
    for (const auto& [t, w] : spec.ratios) {
      const double exact = static_cast<double>(spec.total_tokens) * w / wsum;
      CHECK(got.at(t) >= static_cast<std::int64_t>(std::floor(exact)));
      CHECK(got.at(t) <= static_cast<std::int64_t>(std::ceil(exact)));
      sum += got.at(t);
    }
    CHECK(sum == spec.total_tokens);
    for (const auto& [t1, w1] : spec.ratios) {
      for (const auto& [t2, w2] : spec.ratios) {
        const double e1 = static_cast<double>(spec.total_tokens) * w1 / wsum;
        const double e2 = static_cast<double>(spec.total_tokens) * w2 / wsum;
        const bool up1 = static_cast<double>(got.at(t1)) > e1;
        const bool up2 = static_cast<double>(got.at(t2)) > e2;
        if (up2 && !up1 && static_cast<double>(got.at(t1)) != e1) {
          CHECK(e1 - std::floor(e1) <= e2 - std::floor(e2) + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("mix validation") {
  CHECK_THROWS_AS(plan_mix({0, {{"a", 1}}}), ConfigError);
  CHECK_THROWS_AS(plan_mix({10, {{"a", 0}}}), ConfigError);
  CHECK_THROWS_AS(plan_mix({10, {}}), ConfigError);
}

TEST_CASE("phase boundaries snap to the granularity") {
  CHECK(phase_boundary(0.9, 164 * B, 1) == 147'600 * M);
  CHECK(phase_boundary(0.9, 100, 8) == 96);
  CHECK(phase_boundary(0.0, 100, 8) == 0);
  CHECK(phase_boundary(1.0, 100, 8) == 100);
}

TEST_CASE("explicit curriculum at 164B") {
  const std::vector<Phase> phases{
      {0.0, 0.9, {{"en", 1}, {"de", 1}}},
      {0.9, 1.0, {{"en", 8160.0 * M}, {"de", 8160.0 * M}, {"bar", 80.0 * M}}},
  };
  const auto plan = build_curriculum(phases, 164 * B);
  REQUIRE(plan.phases.size() == 2);
  CHECK(plan.phases[0].budget == 147'600 * M);
  CHECK(plan.phases[0].allocation.at("en") == 73'800 * M);
  CHECK(plan.phases[0].allocation.at("de") == 73'800 * M);
  CHECK(plan.phases[1].budget == 16'400 * M);
  CHECK(plan.phases[1].allocation.at("bar") == 80 * M);
  const auto totals = plan.language_totals();
  CHECK(totals.at("en") == 81'960 * M);
  CHECK(totals.at("bar") == 80 * M);
  CHECK(plan.total() == 164 * B);
}

TEST_CASE("curriculum tiling errors") {
  CHECK_THROWS_AS(build_curriculum({{0.0, 0.5, {{"a", 1}}}, {0.6, 1.0, {{"a", 1}}}}, 100), CurriculumError);
  CHECK_THROWS_AS(build_curriculum({{0.0, 0.6, {{"a", 1}}}, {0.5, 1.0, {{"a", 1}}}}, 100), CurriculumError);
  CHECK_THROWS_AS(build_curriculum({{0.1, 1.0, {{"a", 1}}}}, 100), CurriculumError);
  CHECK_THROWS_AS(build_curriculum({{0.0, 0.9, {{"a", 1}}}}, 100), CurriculumError);
  CHECK_THROWS_AS(build_curriculum({}, 100), CurriculumError);
  const auto one = build_curriculum({{0.0, 1.0, {{"solo", 1}}}}, 12345);
  CHECK(one.phases[0].allocation.at("solo") == 12345);
}

TEST_CASE("staged curriculum over declared sizes") {
  const std::int64_t batch = 4 * M;
  const auto plan = staged_curriculum(full_sizes(), "bar", 0.9, batch);
  CHECK(plan.language_totals() == full_sizes());
  CHECK(plan.total() == 164'080 * M);
  CHECK(plan.phases[0].allocation.at("en") == plan.phases[0].allocation.at("de"));
  CHECK_FALSE(plan.phases[0].allocation.contains("bar"));
  const std::int64_t steps = (plan.total() + batch - 1) / batch;
  CHECK(steps == 41'020);
  const auto boundary = static_cast<std::uint64_t>(std::ceil(0.9 * static_cast<double>(steps)));
  CHECK(plan.phases[0].budget == static_cast<std::int64_t>(boundary) * batch);
  CHECK(first_batch_with(plan, "bar", batch) == boundary);
  CHECK(first_batch_with(plan, "en", batch) == 0u);
  CHECK_FALSE(first_batch_with(plan, "fr", batch).has_value());
  CHECK_THROWS_AS(staged_curriculum(full_sizes(), "fr"), CurriculumError);
}

TEST_CASE("upsampling arithmetic") {
  CHECK(upsample(20 * M, 80 * M).passes == 4);
  CHECK(upsample(20 * M, 80 * M).remainder == 0);
  CHECK(upsample(7, 7).passes == 1);
  CHECK(upsample(7, 20).passes == 2);
  CHECK(upsample(7, 20).remainder == 6);
  CHECK_THROWS_AS(upsample(7, -1), ConfigError);
  CHECK_THROWS_AS(upsample(0, 5), DataError);
}

TEST_CASE("quota cursor keeps every prefix within one token") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Allocation a;
    const auto n = 1 + rng.below(4);
    for (std::uint64_t i = 0; i < n; ++i) a[std::string(1, static_cast<char>('a' + i))] = static_cast<std::int64_t>(rng.below(500));
    std::int64_t total = 0;
    for (const auto& [t, v] : a) total += v;
    if (total == 0) continue;
    QuotaCursor cursor(PhasePlan{0, 1, total, a});
    Allocation cum;
    std::int64_t consumed = 0;
    while (!cursor.done()) {
      const auto batch = 1 + static_cast<std::int64_t>(rng.below(60));
      const auto q = cursor.next(batch);
      std::int64_t in_batch = 0;
      for (const auto& [t, v] : q) {
        CHECK(v >= 0);
        cum[t] += v;
        in_batch += v;
      }
      consumed += in_batch;
      CHECK(in_batch == std::min(batch, total - (consumed - in_batch)));
      for (const auto& [t, v] : a) {
        const double exact = static_cast<double>(consumed) * static_cast<double>(v) / static_cast<double>(total);
        CHECK(std::abs(static_cast<double>(cum[t]) - exact) < 1.0);
      }
    }
    CHECK(cum == a);
  }
  CHECK_THROWS_AS(QuotaCursor(PhasePlan{0, 1, 10, {{"a", 3}}}), PlanError);
}

TEST_CASE("batches split by sequences") {
  const std::size_t len = 8;
  std::vector<Shard> shards{shard_of("de", 50, 16, 300), shard_of("en", 50, 16, 400)};
  {
    BatchStream s(single_phase({{"de", 320}, {"en", 320}}), shards, {8 * len, len, 1, true});
    const auto b = s.next();
    REQUIRE(b);
    std::map<std::string, int> seqs;
    for (const auto& q : b->sequences) ++seqs[q.language];
    CHECK(seqs == std::map<std::string, int>{{"de", 4}, {"en", 4}});
  }
  {
    BatchStream s(single_phase({{"de", 720}, {"en", 80}}), shards, {10 * len, len, 1, true});
    const auto b = s.next();
    REQUIRE(b);
    std::map<std::string, int> seqs;
    for (const auto& q : b->sequences) ++seqs[q.language];
    CHECK(seqs == std::map<std::string, int>{{"de", 9}, {"en", 1}});
  }
}

TEST_CASE("full toy stream conserves the plan exactly") {
  const auto plan = staged_curriculum({{"en", 5000}, {"de", 5000}, {"bar", 300}}, "bar", 0.9, 64);
  std::vector<Shard> shards{shard_of("en", 400, 17, 300), shard_of("de", 400, 13, 800),
                            shard_of("bar", 11, 7, 1300, true)};
  BatchStream stream(plan, shards, {64, 9, 5, true});
  Allocation emitted;
  std::int64_t total = 0;
  std::uint64_t batches = 0;
  std::optional<std::uint64_t> first_bar;
  while (auto b = stream.next()) {
    CHECK(b->index == batches);
    for (const auto& s : b->sequences) {
      CHECK(s.tokens.size() <= 9);
      emitted[s.language] += static_cast<std::int64_t>(s.tokens.size());
      if (s.language == "bar" && !first_bar) first_bar = batches;
    }
    std::int64_t comp = 0;
    for (const auto& [t, n] : b->composition) comp += n;
    CHECK(comp == b->token_count());
    total += b->token_count();
    ++batches;
  }
  CHECK(emitted == plan.language_totals());
  CHECK(total == plan.total());
  CHECK(batches == stream.total_steps());
  CHECK(first_bar == first_batch_with(plan, "bar", 64));
  CHECK(*first_bar == static_cast<std::uint64_t>(std::ceil(0.9 * static_cast<double>(batches))));
}

TEST_CASE("stream determinism and seeding") {
  std::vector<Shard> shards{shard_of("a", 40, 5, 300), shard_of("b", 40, 5, 400)};
  auto collect = [&](std::uint64_t seed) {
    BatchStream s(single_phase({{"a", 100}, {"b", 100}}), shards, {20, 5, seed, true});
    std::vector<TokenId> all;
    while (auto b = s.next())
      for (const auto& q : b->sequences) all.insert(all.end(), q.tokens.begin(), q.tokens.end());
    return all;
  };
  CHECK(collect(1) == collect(1));
  CHECK(collect(1) != collect(2));
}

TEST_CASE("unshuffled truncation keeps document order") {
  std::vector<Shard> shards{shard_of("a", 10, 4, 300)};
  BatchStream s(single_phase({{"a", 12}}), shards, {12, 12, 3, false});
  const auto b = s.next();
  REQUIRE(b);
  CHECK(b->sequences[0].tokens == std::vector<TokenId>{300, 300, 300, 300, 301, 301, 301, 301, 302, 302, 302, 302});
}

TEST_CASE("upsampled shards repeat whole passes plus a seeded remainder") {
  std::vector<Shard> shards{shard_of("bar", 7, 1, 500, true)};
  BatchStream s(single_phase({{"bar", 20}}), shards, {20, 20, 11, true});
  const auto b = s.next();
  REQUIRE(b);
  const auto& t = b->sequences[0].tokens;
  for (std::size_t i = 0; i < 14; ++i) CHECK(t[i] == 500 + i % 7);
  std::map<TokenId, int> seen;
  for (std::size_t i = 14; i < 20; ++i) ++seen[t[i]];
  CHECK(seen.size() == 6);
}

TEST_CASE("shortfall names the language") {
  std::vector<Shard> shards{shard_of("de", 2, 3, 300), shard_of("en", 50, 3, 400)};
  try {
    BatchStream s(single_phase({{"de", 10}, {"en", 10}}), shards, {5, 5, 1, true});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("'de'") != std::string::npos);
  }
  CHECK_THROWS_AS(BatchStream(single_phase({{"fr", 10}}), shards, {5, 5, 1, true}), DataError);
}

TEST_CASE("manifest and plan files") {
  std::vector<ShardRecord> records{{"data/en.txt", "en", 1234, "00000000000000ab"},
                                   {"data/bar.txt", "bar", 56, "00000000000000cd"}};
  const auto text = serialize_manifest(records);
  const auto back = parse_manifest(text);
  REQUIRE(back.size() == 2);
  CHECK(back[1].path == "data/bar.txt");
  CHECK(back[0].token_count == 1234);
  CHECK_THROWS_AS(parse_manifest("# wrong\n"), FormatError);

  const auto plan = staged_curriculum(full_sizes(), "bar", 0.9, 4 * M);
  const auto parsed = parse_plan(serialize_plan(plan));
  REQUIRE(parsed.phases.size() == 2);
  CHECK(parsed.language_totals() == plan.language_totals());
  CHECK(parsed.phases[1].start_fraction == 0.9);
  CHECK(parsed.phases[0].budget == plan.phases[0].budget);
  CHECK(serialize_plan(parsed) == serialize_plan(plan));
}
