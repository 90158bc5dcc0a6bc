// Acceptance runner: one PASS/FAIL line per criterion.
//
// Exit status is nonzero when a criterion outside kKnownUnattained fails,
// or when any criterion fails under --strict.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_util.hpp"
#include "test_util.hpp"
#include "va3/aggregator.hpp"
#include "va3/aligner.hpp"
#include "va3/cli.hpp"
#include "va3/decomposition.hpp"
#include "va3/gradcheck.hpp"
#include "va3/metrics.hpp"
#include "va3/nn.hpp"
#include "va3/text.hpp"
#include "va3/training.hpp"

namespace va3::acceptance {
namespace {

namespace fs = std::filesystem;
using ad::Var;
using Clock = std::chrono::steady_clock;

const std::string kData = VA3_DATA_DIR;

// Tolerances and budgets.
constexpr double kTableTolerance = 0.02;
constexpr double kFormulaTolerance = 1e-9;
constexpr double kTableSeconds = 1.0;
constexpr std::size_t kOracleGraphs = 500;
constexpr double kOracleSeconds = 10.0;
constexpr std::size_t kGradInstances = 3;
constexpr double kGradSeconds = 60.0;
constexpr double kNormalizationTolerance = 1e-12;
constexpr int kNormalizationTrials = 50;
constexpr double kClosedFormTolerance = 1e-9;
constexpr std::size_t kTrendSeeds = 3;
constexpr double kRunSeconds = 300.0;
constexpr double kRelevanceRecall = 0.8;
constexpr double kDecompositionSeconds = 1.0;

// Criteria that fail on this implementation; analysis lives in the README.
const std::set<int> kKnownUnattained = {3, 6};

struct Outcome {
  bool passed = true;
  std::ostringstream detail;
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      failures.push_back(what);
    }
  }
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// ---------------------------------------------------------------- 1

struct TableRow {
  int row;
  ConsistencyCounts counts;
  double ca, rwr, delta, acc, c_f1, nc_f1;
};

const TableRow kPrinted[] = {
    {1, {100, 100, 0, 10}, 50.00, 0.00, -50.00, 47.61, 66.67, 16.67},
    {2, {10, 100, 0, 100}, 9.09, 0.00, -9.09, 4.76, 16.67, 66.67},
    {3, {100, 0, 100, 10}, 100.00, 90.91, -9.09, 95.23, 66.67, 16.67},
    {4, {10, 0, 100, 100}, 100.00, 50.00, -50.00, 52.38, 16.67, 66.67},
    {5, {99, 100, 1, 0}, 49.75, 100.00, -50.25, 50.00, 66.22, 0.00},
    {6, {100, 99, 0, 1}, 50.25, 0.00, 50.25, 50.00, 66.88, 0.99},
    {7, {99, 99, 1, 1}, 50.00, 50.00, 0.00, 50.00, 66.44, 0.98},
};

struct FormulaValues {
  double ca, rwr, delta, c_f1, nc_f1;
};

FormulaValues formula(const ConsistencyCounts& c) {
  const double pp = c.n_pp, pm = c.n_pm, mp = c.n_mp, mm = c.n_mm;
  auto harmonic = [](double p, double r) { return p + r == 0 ? 0.0 : 2 * p * r / (p + r); };
  const double ca = 100 * pp / (pp + pm);
  const double rwr = 100 * mp / (mp + mm);
  return {ca, rwr, rwr - ca, harmonic(ca, 100 * pp / (pp + mp)),
          harmonic(100 * mm / (mp + mm), 100 * mm / (mm + pm))};
}

Outcome golden_table() {
  Outcome o;
  const auto start = Clock::now();
  double worst = 0.0;
  auto near = [&](double got, double want, double tol, const std::string& what) {
    worst = std::max(worst, tol == kTableTolerance ? std::abs(got - want) : 0.0);
    o.check(std::abs(got - want) <= tol, what + " " + fixed(got) + " vs " + fixed(want));
  };
  for (const auto& row : kPrinted) {
    const std::string tag = "row " + std::to_string(row.row) + " ";
    const auto f = testing::bucket_fixture(row.counts.n_pp, row.counts.n_pm, row.counts.n_mp,
                                           row.counts.n_mm);
    const MetricsReport r = evaluate_predictions(f.graphs, PredictionSet{f.predictions}, 1.0);
    o.check(r.counts == row.counts, tag + "counts");
    near(r.ca, row.ca, kTableTolerance, tag + "ca");
    near(r.rwr, row.rwr, kTableTolerance, tag + "rwr");
    near(r.main_accuracy.all, row.acc, kTableTolerance, tag + "acc");
    near(r.c_f, row.c_f1, kTableTolerance, tag + "c_f1");
    const FormulaValues expect = formula(row.counts);
    // Rows 5 and 6 print Delta as CA - RWR.
    if (row.row <= 4 || row.row == 7) {
      near(r.delta, row.delta, kTableTolerance, tag + "delta");
    } else {
      near(r.delta, expect.delta, kFormulaTolerance, tag + "delta formula");
    }
    // Rows 6 and 7 print half the harmonic mean of NcP and NcR.
    if (row.row <= 5) {
      near(r.nc_f, row.nc_f1, kTableTolerance, tag + "nc_f1");
    } else {
      near(r.nc_f, expect.nc_f1, kFormulaTolerance, tag + "nc_f1 formula");
    }
  }
  const double elapsed = seconds_since(start);
  o.check(elapsed < kTableSeconds, "runtime");
  o.detail << "max |printed - computed| " << fixed(worst) << " (tol " << kTableTolerance
           << "), " << fixed(elapsed, 3) << " s";
  return o;
}

// ---------------------------------------------------------------- 2

std::string normalized(std::string s) {
  s.erase(0, s.find_first_not_of(" \t"));
  s.erase(s.find_last_not_of(" \t") + 1);
  std::transform(s.begin(), s.end(), s.begin(), ::tolower);
  return s;
}

// Enumerates every node's outgoing raw edges.
ConsistencyCounts brute_force_counts(const Qdg& g, const std::map<std::string, std::string>& preds) {
  ConsistencyCounts c;
  for (const auto& parent : g.nodes()) {
    bool has_child = false, all_ok = true;
    for (const auto& e : g.edges()) {
      if (e.parent != parent.id) continue;
      has_child = true;
      all_ok = all_ok && normalized(preds.at(e.child)) == normalized(*g.node(e.child).gold_answer);
    }
    if (!has_child) continue;
    const bool ok = normalized(preds.at(parent.id)) == normalized(*parent.gold_answer);
    (ok ? (all_ok ? c.n_pp : c.n_mp) : (all_ok ? c.n_pm : c.n_mm)) += 1;
  }
  return c;
}

struct OracleMetrics {
  double ca, rwr, delta, cp, cr, ncp, ncr, c_f, nc_f;
};

OracleMetrics oracle_metrics(const ConsistencyCounts& c, double beta) {
  auto pct = [](double num, double den) { return den == 0.0 ? 0.0 : 100.0 * num / den; };
  const double pp = static_cast<double>(c.n_pp), pm = static_cast<double>(c.n_pm),
               mp = static_cast<double>(c.n_mp), mm = static_cast<double>(c.n_mm);
  const double b2 = beta * beta;
  auto f = [&](double p, double r) {
    const double den = b2 * p + r;
    return den == 0.0 ? 0.0 : (1.0 + b2) * p * r / den;
  };
  OracleMetrics m;
  m.ca = pct(pp, pp + pm);
  m.rwr = pct(mp, mp + mm);
  m.delta = m.rwr - m.ca;
  m.cp = m.ca;
  m.cr = pct(pp, pp + mp);
  m.ncp = pct(mm, mp + mm);
  m.ncr = pct(mm, mm + pm);
  m.c_f = f(m.cp, m.cr);
  m.nc_f = f(m.ncp, m.ncr);
  return m;
}

bool same(const MetricsReport& r, const OracleMetrics& m) {
  return r.ca == m.ca && r.rwr == m.rwr && r.delta == m.delta && r.cp == m.cp && r.cr == m.cr &&
         r.ncp == m.ncp && r.ncr == m.ncr && r.c_f == m.c_f && r.nc_f == m.nc_f;
}

Outcome metric_oracle() {
  Outcome o;
  const auto start = Clock::now();
  Rng rng(2024);
  std::vector<Qdg> graphs;
  std::map<std::string, std::string> preds;
  std::size_t mismatched = 0;
  ConsistencyCounts total;
  for (std::size_t i = 0; i < kOracleGraphs; ++i) {
    graphs.push_back(
        testing::random_dag(rng, 1 + rng.below(12), "d" + std::to_string(i) + "_", 0.25));
    std::map<std::string, std::string> local;
    const double p_correct = rng.uniform(0.1, 0.95);
    for (const auto& n : graphs.back().nodes()) {
      local[n.id] = rng.bernoulli(p_correct) ? " " + *n.gold_answer + " " : "wrong";
    }
    const double beta = rng.bernoulli(0.5) ? 1.0 : rng.uniform(0.25, 4.0);
    const std::span<const Qdg> one(&graphs.back(), 1);
    const ConsistencyCounts counts = tally_counts(one, PredictionSet{local});
    const ConsistencyCounts oracle = brute_force_counts(graphs.back(), local);
    if (!(counts == oracle) || !same(compute_metrics(counts, beta), oracle_metrics(oracle, beta))) {
      ++mismatched;
    }
    total += oracle;
    preds.insert(local.begin(), local.end());
  }
  const ConsistencyCounts pooled = tally_counts(graphs, PredictionSet{preds});
  o.check(pooled == total, "pooled counts");
  o.check(same(compute_metrics(pooled, 1.0), oracle_metrics(total, 1.0)), "pooled metrics");
  o.check(mismatched == 0, std::to_string(mismatched) + " graphs differ");
  const double elapsed = seconds_since(start);
  o.check(elapsed < kOracleSeconds, "runtime");
  o.detail << kOracleGraphs << " graphs, " << pooled.total() << " pairs, " << mismatched
           << " exact mismatches, " << fixed(elapsed, 3) << " s";
  return o;
}

// ---------------------------------------------------------------- 3

Outcome gradient_suite() {
  Outcome o;
  const auto start = Clock::now();
  const auto results = run_grad_suite("all", kGradInstances);
  const double elapsed = seconds_since(start);
  std::size_t beyond = 0;
  double worst = 0.0;
  std::vector<std::string> failing;
  for (const auto& r : results) {
    beyond += r.beyond_roundoff;
    worst = std::max(worst, r.max_relative_error);
    o.check(r.instances >= kGradInstances, r.op + " instances");
    if (!r.passed()) failing.push_back(r.op + " " + sci(r.max_relative_error));
  }
  for (const auto& f : failing) o.check(false, f);
  o.check(elapsed < kGradSeconds, "runtime");
  o.detail << results.size() << " ops x " << kGradInstances << " instances, max rel err "
           << sci(worst) << " (tol " << sci(kGradRelativeTolerance) << "), coordinates beyond roundoff "
           << beyond << ", " << fixed(elapsed, 2) << " s";
  return o;
}

// ---------------------------------------------------------------- 4

Outcome normalization() {
  Outcome o;
  Rng rng(404);
  double worst = 0.0;
  std::size_t rows = 0, hard_rows = 0, not_one_hot = 0;
  auto row_sum = [&](double s) {
    ++rows;
    worst = std::max(worst, std::abs(s - 1.0));
  };
  for (int trial = 0; trial < kNormalizationTrials; ++trial) {
    const std::size_t n = 1 + rng.below(9), k = 1 + rng.below(9);
    const Tensor x = testing::random_tensor(rng, {n, k}, -20, 20);
    const Tensor s = ad::softmax(Var::constant(x), 1).value();
    for (std::size_t r = 0; r < n; ++r) {
      double t = 0.0;
      for (std::size_t c = 0; c < k; ++c) t += s.at(r, c);
      row_sum(t);
    }
    const Tensor s0 = ad::softmax(Var::constant(x), 0).value();
    for (std::size_t c = 0; c < k; ++c) {
      double t = 0.0;
      for (std::size_t r = 0; r < n; ++r) t += s0.at(r, c);
      row_sum(t);
    }

    const std::size_t segments = 1 + rng.below(5), p = segments + rng.below(12);
    std::vector<std::size_t> seg(p);
    for (std::size_t i = 0; i < p; ++i) seg[i] = i < segments ? i : rng.below(segments);
    const Tensor ss =
        ad::segment_softmax(Var::constant(testing::random_tensor(rng, {p}, -10, 10)), seg, segments)
            .value();
    std::vector<double> seg_total(segments, 0.0);
    for (std::size_t i = 0; i < p; ++i) seg_total[seg[i]] += ss[i];
    for (double t : seg_total) row_sum(t);

    ParamStore params(static_cast<std::uint64_t>(trial));
    const std::size_t heads = 1 + rng.below(4);
    const std::size_t width = heads * (1 + rng.below(4));
    const auto layer = nn::TransformerLayer::create(params, "tf", width, heads);
    const std::size_t nq = 1 + rng.below(6), m = 1 + rng.below(8);
    const Var kv = Var::constant(testing::random_tensor(rng, {m, width}, -3, 3));
    std::vector<Var> attention;
    layer(Var::constant(testing::random_tensor(rng, {nq, width}, -3, 3)), kv, kv, &attention);
    for (const auto& a : attention) {
      for (std::size_t r = 0; r < nq; ++r) {
        double t = 0.0;
        for (std::size_t c = 0; c < m; ++c) t += a.value().at(r, c);
        row_sum(t);
      }
    }

    const std::size_t clips = 1 + rng.below(12);
    const Var logits = Var::constant(testing::random_tensor(rng, {clips, 2}, -4, 4));
    const Tensor soft = nn::gumbel_softmax(logits, rng.uniform(0.2, 3.0), false, &rng).value();
    const Tensor hard = nn::gumbel_softmax(logits, rng.uniform(0.2, 3.0), true, &rng).value();
    for (std::size_t r = 0; r < clips; ++r) {
      row_sum(soft.at(r, 0) + soft.at(r, 1));
      ++hard_rows;
      const double a = hard.at(r, 0), b = hard.at(r, 1);
      if (!((a == 1.0 && b == 0.0) || (a == 0.0 && b == 1.0))) ++not_one_hot;
    }

    const Qdg g1 = testing::random_dag(rng, 1 + rng.below(9), "a");
    const Qdg g2 = testing::random_dag(rng, 1 + rng.below(9), "b");
    const Qdg* graphs[] = {&g1, &g2};
    const GraphBatch batch = GraphBatch::build(graphs);
    const std::size_t h = 2 + rng.below(6);
    const auto agg = AggregatorParams::create(params, "ag", {h, 1 + rng.below(3), 5, 1.0});
    std::vector<Var> alpha;
    const auto out = aggregate(batch, Var::constant(testing::random_tensor(rng, {batch.nodes(), h}, -3, 3)), agg);
    gat_forward(batch, Var::constant(testing::random_tensor(rng, {batch.nodes(), h}, -3, 3)), agg,
                &alpha);
    for (const auto& a : alpha) {
      std::vector<double> t(batch.nodes(), 0.0);
      for (std::size_t q = 0; q < a.size(); ++q) t[batch.pair_source[q]] += a.value()[q];
      for (double v : t) row_sum(v);
    }
    for (std::size_t r = 0; r < batch.nodes(); ++r) {
      double t = 0.0;
      for (std::size_t c = 0; c < 5; ++c) t += out.distributions.value().at(r, c);
      row_sum(t);
    }
  }
  o.check(worst <= kNormalizationTolerance, "row sum deviation " + std::to_string(worst));
  o.check(not_one_hot == 0, std::to_string(not_one_hot) + " hard rows not one-hot");
  o.detail << rows << " normalized rows, max |sum - 1| " << worst << " (tol "
           << kNormalizationTolerance << "), " << hard_rows << " hard Gumbel rows, "
           << not_one_hot << " not one-hot";
  return o;
}

// ---------------------------------------------------------------- 5

Outcome closed_forms() {
  Outcome o;
  Rng rng(505);
  double worst = 0.0;
  auto expect = [&](double got, double want, const std::string& what) {
    worst = std::max(worst, std::abs(got - want));
    o.check(std::abs(got - want) <= kClosedFormTolerance, what);
  };
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 + rng.below(10);
    // p and n differ only orthogonally to the anchor.
    const Tensor a = testing::random_tensor(rng, {h}, -2, 2);
    Tensor p = testing::random_tensor(rng, {h}, -2, 2);
    Tensor d = testing::random_tensor(rng, {h}, -2, 2);
    double ad_ = 0, aa = 0;
    for (std::size_t i = 0; i < h; ++i) {
      ad_ += a[i] * d[i];
      aa += a[i] * a[i];
    }
    Tensor n = p;
    for (std::size_t i = 0; i < h; ++i) n[i] += d[i] - ad_ / aa * a[i];
    const double ap = [&] { double s = 0; for (std::size_t i = 0; i < h; ++i) s += a[i] * p[i]; return s; }();
    const double an = [&] { double s = 0; for (std::size_t i = 0; i < h; ++i) s += a[i] * n[i]; return s; }();
    if (std::abs(ap - an) > 1e-12) o.check(false, "fixture construction");
    expect(alignment_contrastive_loss(Var::constant(a), Var::constant(p), Var::constant(n)).item(),
           std::log(2.0), "contrastive ln 2");

    const std::size_t k = 2 + rng.below(30);
    const double c = rng.uniform(-50, 50);
    expect(nn::softmax_cross_entropy(Var::constant(Tensor(Shape{k}, c)), rng.below(k)).item(),
           std::log(static_cast<double>(k)), "cross entropy ln k");
    const std::size_t rows = 1 + rng.below(6);
    std::vector<std::size_t> targets(rows);
    for (auto& t : targets) t = rng.below(k);
    expect(ad::softmax_cross_entropy(Var::constant(Tensor(Shape{rows, k}, c)), targets).item(),
           std::log(static_cast<double>(k)), "batched cross entropy ln k");

    // Anchor at the origin, positive and negative on a common sphere.
    const double margin = rng.uniform(0.1, 3.0);
    const double radius = rng.uniform(0.1, 5.0);
    Tensor e(Shape{3, 2}, 0.0);
    const double t1 = rng.uniform(0, 6.283), t2 = rng.uniform(0, 6.283);
    e.at(1, 0) = radius * std::cos(t1);
    e.at(1, 1) = radius * std::sin(t1);
    e.at(2, 0) = radius * std::cos(t2);
    e.at(2, 1) = radius * std::sin(t2);
    const std::optional<Triplet> triplet[] = {Triplet{0, 1, 2}};
    expect(triplet_loss(Var::constant(e), triplet, margin).item(), margin, "triplet margin");
  }
  o.detail << "max |value - closed form| " << worst << " (tol " << kClosedFormTolerance << ")";
  return o;
}

// ---------------------------------------------------------------- 6, 7

struct TrendRuns {
  std::map<std::string, std::vector<RunReport>> reports;  // variant -> per seed
  double slowest = 0.0;
  std::string slowest_name;
};

const TrendRuns& trend_runs() {
  static const TrendRuns runs = [] {
    TrendRuns out;
    const RunConfig base;
    for (const auto& [name, flags] : ablation_variants()) {
      if (name == "+aggregator+triplet") continue;
      for (std::size_t s = 0; s < kTrendSeeds; ++s) {
        RunConfig config = base;
        config.flags = flags;
        config.seed = base.seed + s;
        const auto start = Clock::now();
        out.reports[name].push_back(train(config, 1));
        const double elapsed = seconds_since(start);
        std::cout << "  trained " << name << " seed " << config.seed << " in "
                  << fixed(elapsed, 1) << " s\n"
                  << std::flush;
        if (elapsed > out.slowest) {
          out.slowest = elapsed;
          out.slowest_name = name + " seed " + std::to_string(config.seed);
        }
      }
    }
    return out;
  }();
  return runs;
}

Outcome synthetic_trends() {
  Outcome o;
  const TrendRuns& runs = trend_runs();
  std::map<std::string, std::pair<double, double>> mean;  // main accuracy, c_f1
  for (const auto& [name, reports] : runs.reports) {
    double acc = 0, cf = 0;
    for (const auto& r : reports) {
      acc += r.best_validation.metrics.main_accuracy.all;
      cf += r.best_validation.metrics.c_f;
    }
    mean[name] = {acc / static_cast<double>(reports.size()), cf / static_cast<double>(reports.size())};
  }
  const auto& full = mean["full"];
  const auto& aligner = mean["+aligner"];
  const auto& backbone = mean["backbone"];
  const auto& aggregator = mean["+aggregator"];
  o.check(full.first > aligner.first, "accuracy full > +aligner");
  o.check(aligner.first > backbone.first, "accuracy +aligner > backbone");
  o.check(full.first > aggregator.first, "accuracy full > +aggregator");
  o.check(full.second > aligner.second, "c_f1 full > +aligner");
  o.check(aligner.second > backbone.second, "c_f1 +aligner > backbone");
  o.check(full.second > aggregator.second, "c_f1 full > +aggregator");
  o.check(runs.slowest < kRunSeconds, "runtime " + runs.slowest_name);
  o.detail << "mean main/c_f1 over " << kTrendSeeds << " seeds:";
  for (const char* name : {"backbone", "+aligner", "+aggregator", "full"}) {
    o.detail << " " << name << " " << fixed(mean[name].first, 2) << "/"
             << fixed(mean[name].second, 2);
  }
  o.detail << "; slowest run " << fixed(runs.slowest, 1) << " s";
  return o;
}

Outcome aligner_relevance() {
  Outcome o;
  const RunReport& full = trend_runs().reports.at("full").front();
  const RelevanceScore r = full.best_validation.relevance;
  o.check(r.recall >= kRelevanceRecall, "recall");
  o.detail << "seed " << full.config.seed << " validation recall " << fixed(r.recall)
           << " (min " << kRelevanceRecall << "), precision " << fixed(r.precision)
           << ", best step " << full.best_step;
  return o;
}

// ---------------------------------------------------------------- 8

std::string decomposition_json(const std::string& main) {
  nlohmann::json doc = {
      {"nodes",
       {{{"id", "m"}, {"text", main}, {"kind", "binary"}, {"role", "main"}, {"answer", nullptr}},
        {{"id", "a"}, {"text", "Is it red?"}, {"kind", "binary"}, {"role", "leaf"}, {"answer", nullptr}},
        {{"id", "b"}, {"text", "Is it big?"}, {"kind", "binary"}, {"role", "leaf"}, {"answer", nullptr}}}},
      {"edges", {{{"parent", "m"}, {"child", "a"}, {"op", "and"}},
                 {{"parent", "m"}, {"child", "b"}, {"op", "and"}}}}};
  return doc.dump();
}

Outcome decomposition_pipeline() {
  Outcome o;
  const auto start = Clock::now();
  const ExampleBank bank = ExampleBank::from_file(kData + "/decompose/bank.json");
  const StubClient stub = StubClient::from_file(kData + "/decompose/stub.json");
  const auto questions = parse_questions(read_file(kData + "/decompose/questions.txt"));
  const ExtendResult first = extend_dataset(questions, bank, 2, stub);
  const ExtendResult second = extend_dataset(questions, bank, 2, stub);
  o.check(!first.graphs.empty(), "no graphs");
  std::size_t reparsed_ok = 0;
  for (const auto& g : first.graphs) {
    try {
      const Qdg back = parse_qdg(serialize_qdg(g));
      if (back == g) ++reparsed_ok;
    } catch (const Error& e) {
      o.check(false, std::string(e.kind()) + " on " + g.graph_id());
    }
  }
  o.check(reparsed_ok == first.graphs.size(), "reparse");
  o.check(parse_qdg_jsonl(first.graphs_jsonl()) == first.graphs, "jsonl reparse");
  const bool identical = first.graphs_jsonl() == second.graphs_jsonl() &&
                         first.failure_report().dump() == second.failure_report().dump();
  o.check(identical, "byte-identical rerun");

  const std::string question = "Is the cup red and big?";
  const StubClient retry({{{question}, {"{\"nodes\": [", decomposition_json(question)}}});
  const DecompositionResult r = decompose_question(question, bank.candidates(), retry);
  o.check(r.attempts == 2, "attempts " + std::to_string(r.attempts));
  const double elapsed = seconds_since(start);
  o.check(elapsed < kDecompositionSeconds, "runtime");
  o.detail << first.graphs.size() << " graphs valid, " << first.failures.size()
           << " reported failure, rerun " << (identical ? "identical" : "differs")
           << ", malformed-then-valid attempts " << r.attempts << ", " << fixed(elapsed, 3)
           << " s";
  return o;
}

// ---------------------------------------------------------------- 9

int run_cli(std::vector<std::string> args, std::string& out) {
  args.insert(args.begin(), "va3");
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  out = o.str() + e.str();
  return code;
}

Outcome determinism() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "va3_acceptance_determinism";
  const std::string t = kData + "/table1_row1/";
  const char* files[] = {"train/report.json", "train/epochs.csv", "train/test_predictions.jsonl",
                         "train/checkpoint.bin", "train/checkpoint.json", "eval.json"};
  std::vector<std::vector<std::string>> snapshots;
  for (int invocation = 0; invocation < 2; ++invocation) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<std::string> snapshot;
    std::string out;
    o.check(run_cli({"--threads", "1", "train", "--config", kData + "/run_smoke.json", "--out",
                     (dir / "train").string()},
                    out) == 0,
            "train exit");
    snapshot.push_back(out);
    o.check(run_cli({"--threads", "1", "eval", "--graphs", t + "graphs.jsonl", "--gold",
                     t + "gold.jsonl", "--pred", t + "pred.jsonl", "--out",
                     (dir / "eval.json").string()},
                    out) == 0,
            "eval exit");
    snapshot.push_back(out);
    for (const char* f : files) {
      const fs::path path = dir / f;
      o.check(fs::exists(path), std::string("missing ") + f);
      snapshot.push_back(fs::exists(path) ? read_file(path.string()) : "");
    }
    snapshots.push_back(std::move(snapshot));
  }
  o.check(snapshots[0][0] == snapshots[1][0], "train stdout");
  o.check(snapshots[0][1] == snapshots[1][1], "eval stdout");
  for (std::size_t i = 0; i < std::size(files); ++i) {
    o.check(snapshots[0][i + 2] == snapshots[1][i + 2], files[i]);
  }
  o.detail << std::size(files) << " report files and both stdout streams identical across two "
           << "invocations at --threads 1";
  return o;
}

}  // namespace

int run_all(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  bool strict = false;
  std::vector<int> only;
  app.add_flag("--strict", strict, "nonzero exit on any failure");
  app.add_option("--only", only, "criteria to run")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {1, "golden metric table", golden_table},
      {2, "metric oracle equivalence", metric_oracle},
      {3, "gradient suite", gradient_suite},
      {4, "normalization invariants", normalization},
      {5, "closed-form loss values", closed_forms},
      {6, "directional synthetic trends", synthetic_trends},
      {7, "aligner relevance recall", aligner_relevance},
      {8, "decomposition pipeline", decomposition_pipeline},
      {9, "determinism", determinism},
  };
  int unexpected = 0, failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const bool known = kKnownUnattained.contains(c.id);
    std::cout << (o.passed ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": "
              << o.detail.str();
    for (const auto& f : o.failures) std::cout << " [failed: " << f << "]";
    std::cout << (!o.passed && known ? " (known unattained)" : "") << "\n" << std::flush;
    if (!o.passed) {
      ++failed;
      if (!known) ++unexpected;
    }
  }
  std::cout << failed << " failed, " << unexpected << " unexpected\n";
  return (strict ? failed : unexpected) == 0 ? 0 : 1;
}

}  // namespace va3::acceptance

int main(int argc, char** argv) { return va3::acceptance::run_all(argc, argv); }
