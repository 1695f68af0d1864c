#include <doctest.h>

#include <cmath>
#include <random>

#include "preq/error.hpp"
#include "preq/similarity.hpp"

using namespace preq;

namespace {

// Independent reference: plain loops over std::vector, no Eigen.
double ref_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::max(0.0, 1.0 - dot / (std::sqrt(na) * std::sqrt(nb)));
}

double ref_euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

std::vector<std::vector<double>> random_vectors(std::size_t n, std::size_t dim, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> v(n, std::vector<double>(dim));
  for (auto& row : v) {
    for (auto& x : row) x = g(rng);
  }
  return v;
}

}  // namespace

TEST_SUITE("similarity") {
  TEST_CASE("identical vectors are at distance zero") {
    EmbeddingMatrix<double> m(2, 3);
    m << 1, 2, 3, 1, 2, 3;
    const auto r = min_neighbor_distances(m);
    CHECK(r[0].min_distance == 0.0);
    CHECK(r[1].min_distance == 0.0);
    CHECK(r[0].nearest == 1);
    CHECK(r[1].nearest == 0);
    CHECK(r[0].group == 0);
    CHECK(r[1].group == 0);
  }

  TEST_CASE("orthogonal unit vectors are at cosine distance one") {
    EmbeddingMatrix<double> m(2, 2);
    m << 1, 0, 0, 1;
    const auto r = min_neighbor_distances(m);
    CHECK(r[0].min_distance == doctest::Approx(1.0));
    CHECK(r[1].min_distance == doctest::Approx(1.0));
  }

  TEST_CASE("errors: fewer than two vectors, mismatched dims, zero rows") {
    EmbeddingMatrix<double> one(1, 4);
    one.setOnes();
    CHECK_THROWS_AS(min_neighbor_distances(one), ContractViolation);
    const std::vector<std::vector<double>> ragged{{1, 2}, {1, 2, 3}};
    CHECK_THROWS_AS(stack_rows<double>(ragged), ContractViolation);
    EmbeddingMatrix<double> zero(2, 2);
    zero << 0, 0, 1, 1;
    CHECK_THROWS_AS(min_neighbor_distances(zero), ContractViolation);
    CHECK_NOTHROW(min_neighbor_distances(zero, DistanceMetric::euclidean));
  }

  TEST_CASE("matches brute force for both metrics, any block size and thread count") {
    const auto v = random_vectors(120, 16, 3);
    const auto m = stack_rows<double>(v);
    for (auto metric : {DistanceMetric::cosine, DistanceMetric::euclidean}) {
      const auto fast = min_neighbor_distances(m, metric, 17, 3);
      const auto slow = min_neighbor_distances(m, metric, 1000, 1);
      for (std::size_t i = 0; i < v.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v.size(); ++j) {
          if (j == i) continue;
          best = std::min(best, metric == DistanceMetric::cosine ? ref_cosine(v[i], v[j]) : ref_euclid(v[i], v[j]));
        }
        CHECK(std::abs(fast[i].min_distance - best) <= 1e-9);
        CHECK(fast[i].nearest != i);
        CHECK(fast[i].min_distance == slow[i].min_distance);
        CHECK(fast[i].nearest == slow[i].nearest);
      }
    }
  }

  TEST_CASE("metric symmetry") {
    const auto v = random_vectors(10, 8, 5);
    const auto m = stack_rows<double>(v);
    for (int i = 0; i < 10; ++i) {
      for (int j = 0; j < 10; ++j) {
        for (auto metric : {DistanceMetric::cosine, DistanceMetric::euclidean}) {
          CHECK(distance(m.row(i), m.row(j), metric) == doctest::Approx(distance(m.row(j), m.row(i), metric)).epsilon(1e-14));
        }
      }
    }
  }

  TEST_CASE("dedup keeps one representative per exact-duplicate group") {
    const std::vector<std::string> ids{"A1", "A2", "B"};
    EmbeddingMatrix<double> m(3, 2);
    m << 1, 0, 1, 0, 0, 1;
    const auto reps = neighbor_reports(std::span<const std::string>(ids), m);
    CHECK(reps[0].representative_id == "A1");
    CHECK(reps[1].representative_id == "A1");
    CHECK(dedup(reps, 0.0) == std::vector<std::string>{"A1", "B"});
  }

  TEST_CASE("representative is the lowest id, not the first row") {
    const std::vector<std::string> ids{"z", "b", "m"};
    EmbeddingMatrix<double> m(3, 2);
    m << 1, 0, 1, 0, 0, 1;
    const auto reps = neighbor_reports(std::span<const std::string>(ids), m);
    CHECK(dedup(reps, 0.0) == std::vector<std::string>{"b", "m"});
  }

  TEST_CASE("all-distinct corpus is unchanged at threshold zero") {
    const auto v = random_vectors(30, 4, 9);
    std::vector<std::string> ids;
    for (int i = 0; i < 30; ++i) ids.push_back("id" + std::to_string(i));
    const auto reps = neighbor_reports(std::span<const std::string>(ids), stack_rows<double>(v));
    CHECK(dedup(reps, 0.0) == ids);
  }

  TEST_CASE("threshold dedup equals an oracle filter over known distances") {
    // Points on a line under euclidean distance: gaps 0.05, 0.3, 0.08, 0.5.
    const std::vector<double> xs{0.0, 0.05, 0.35, 0.43, 0.93};
    EmbeddingMatrix<double> m(5, 1);
    for (int i = 0; i < 5; ++i) m(i, 0) = xs[static_cast<std::size_t>(i)];
    const std::vector<std::string> ids{"a", "b", "c", "d", "e"};
    const auto reps = neighbor_reports(std::span<const std::string>(ids), m, DistanceMetric::euclidean);
    std::vector<std::string> oracle;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double best = 1e9;
      for (std::size_t j = 0; j < xs.size(); ++j) {
        if (i != j) best = std::min(best, std::abs(xs[i] - xs[j]));
      }
      if (best > 0.1) oracle.push_back(ids[i]);
    }
    CHECK(dedup(reps, 0.1) == oracle);
    CHECK(oracle == std::vector<std::string>{"e"});
  }

  TEST_CASE("dedup is idempotent and monotone in the threshold") {
    auto v = random_vectors(60, 3, 21);
    for (int k = 0; k < 10; ++k) v.push_back(v[static_cast<std::size_t>(k * 3)]);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < v.size(); ++i) ids.push_back("r" + std::to_string(1000 + i));
    const auto m = stack_rows<double>(v);
    const auto reps = neighbor_reports(std::span<const std::string>(ids), m);

    std::size_t prev = ids.size() + 1;
    for (double thr : {0.0, 0.001, 0.01, 0.05, 0.2}) {
      const auto kept = dedup(reps, thr);
      CHECK(kept.size() <= prev);
      prev = kept.size();

      std::vector<std::vector<double>> kv;
      std::vector<std::string> kid;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (std::find(kept.begin(), kept.end(), ids[i]) != kept.end()) {
          kv.push_back(v[i]);
          kid.push_back(ids[i]);
        }
      }
      if (kid.size() < 2) continue;
      const auto again = neighbor_reports(std::span<const std::string>(kid), stack_rows<double>(kv));
      CHECK(dedup(again, thr) == kid);
    }
  }

  TEST_CASE("single precision rows work too") {
    EmbeddingMatrix<float> m(3, 2);
    m << 1, 0, 1, 0, 0, 1;
    const auto r = min_neighbor_distances(m);
    CHECK(r[0].min_distance == 0.0f);
    CHECK(r[2].min_distance == doctest::Approx(1.0f));
  }
}
