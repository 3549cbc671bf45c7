#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ron/compressor.hpp"
#include "ron/errors.hpp"

namespace ron {
namespace {

using json = nlohmann::json;

// ceil() that ignores representation noise such as 0.7·300 = 210.00000000000003.
Index ceil_count(double x) { return static_cast<Index>(std::ceil(x - 1e-9)); }

void check_strategy(const RankStrategy& s, const std::string& where) {
  if (const auto* f = std::get_if<RankFraction>(&s)) {
    if (!(f->fraction > 0.0 && f->fraction <= 1.0))
      throw PlanError(where + "rank fraction must lie in (0, 1], got " + std::to_string(f->fraction));
  } else if (const auto* r = std::get_if<FixedRank>(&s)) {
    if (r->rank < 1) throw PlanError(where + "rank must be at least 1");
  } else if (const auto* e = std::get_if<EnergyThreshold>(&s)) {
    if (!(e->tail >= 0.0 && e->tail < 1.0))
      throw PlanError(where + "energy threshold must lie in [0, 1), got " + std::to_string(e->tail));
  }
}

void check_factor(double factor, const std::string& where) {
  if (!(factor >= 1.0 && factor <= 2.0))
    throw PlanError(where + "oversample factor must lie in [1, 2], got " + std::to_string(factor));
}

RankStrategy strategy_from(const json& j, const std::string& where) {
  const auto kind = j.value("strategy", std::string("rank_fraction"));
  if (kind == "fixed_rank") return FixedRank{j.at("rank").get<Index>()};
  if (kind == "rank_fraction") return RankFraction{j.at("fraction").get<double>()};
  if (kind == "energy_threshold") return EnergyThreshold{j.at("threshold").get<double>()};
  throw PlanError(where + "unknown strategy '" + kind + "'");
}

json strategy_json(const RankStrategy& s) {
  if (const auto* r = std::get_if<FixedRank>(&s)) return {{"strategy", "fixed_rank"}, {"rank", r->rank}};
  if (const auto* f = std::get_if<RankFraction>(&s)) return {{"strategy", "rank_fraction"}, {"fraction", f->fraction}};
  return {{"strategy", "energy_threshold"}, {"threshold", std::get<EnergyThreshold>(s).tail}};
}

}  // namespace

std::string describe(const RankStrategy& s) {
  if (const auto* r = std::get_if<FixedRank>(&s)) return "fixed_rank(" + std::to_string(r->rank) + ")";
  if (const auto* f = std::get_if<RankFraction>(&s)) {
    std::ostringstream os;
    os << "rank_fraction(" << f->fraction << ")";
    return os.str();
  }
  std::ostringstream os;
  os << "energy_threshold(" << std::get<EnergyThreshold>(s).tail << ")";
  return os.str();
}

Index resolve_rank(const RankStrategy& strategy, Index dim, const std::vector<double>& spectrum) {
  check_strategy(strategy, "");
  if (const auto* r = std::get_if<FixedRank>(&strategy)) {
    if (r->rank > dim)
      throw PlanError("rank " + std::to_string(r->rank) + " exceeds layer width " + std::to_string(dim));
    return r->rank;
  }
  if (const auto* f = std::get_if<RankFraction>(&strategy))
    return std::clamp<Index>(ceil_count(f->fraction * static_cast<double>(dim)), 1, dim);

  const double tail = std::get<EnergyThreshold>(strategy).tail;
  double total = 0.0;
  for (double s : spectrum) total += s * s;
  if (total <= 0.0 || spectrum.empty()) return 1;
  // Tail energy after keeping r values, accumulated from the small end.
  std::vector<double> suffix(spectrum.size() + 1, 0.0);
  for (std::size_t i = spectrum.size(); i-- > 0;) suffix[i] = suffix[i + 1] + spectrum[i] * spectrum[i];
  for (std::size_t r = 1; r <= spectrum.size(); ++r) {
    if (suffix[r] <= tail * total) return std::min<Index>(static_cast<Index>(r), dim);
  }
  return std::min<Index>(static_cast<Index>(spectrum.size()), dim);
}

Index oversampled_rows(Index rank, Index dim, double factor) {
  const Index p = ceil_count(factor * static_cast<double>(rank));
  return std::min(std::clamp(p, rank, 2 * rank), dim);
}

const PlanEntry* CompressionPlan::entry(Index layer) const {
  for (const auto& e : layers)
    if (e.layer == layer) return &e;
  return nullptr;
}

void CompressionPlan::validate() const {
  if (first_compressed_layer < 0) throw PlanError("first_compressed_layer must be non-negative");
  check_strategy(default_strategy, "default: ");
  check_factor(oversample_factor, "default: ");
  std::set<Index> seen;
  for (const auto& e : layers) {
    const std::string where = "plan layer " + std::to_string(e.layer) + ": ";
    if (!seen.insert(e.layer).second) throw PlanError(where + "listed twice");
    if (e.layer < first_compressed_layer)
      throw PlanError(where + "precedes first_compressed_layer " + std::to_string(first_compressed_layer));
    check_strategy(e.strategy, where);
    if (e.oversample_factor) check_factor(*e.oversample_factor, where);
    if (e.oversampling) {
      if (*e.oversampling < 1) throw PlanError(where + "oversampling must be positive");
      if (const auto* r = std::get_if<FixedRank>(&e.strategy)) {
        if (*e.oversampling < r->rank)
          throw PlanError(where + "oversampling P=" + std::to_string(*e.oversampling) + " is below rank R=" +
                          std::to_string(r->rank));
        if (*e.oversampling > 2 * r->rank)
          throw PlanError(where + "oversampling P=" + std::to_string(*e.oversampling) + " exceeds 2R=" +
                          std::to_string(2 * r->rank));
      }
    }
  }
}

CompressionPlan parse_plan(const std::string& text) {
  CompressionPlan plan;
  try {
    const json j = json::parse(text);
    plan.first_compressed_layer = j.value("first_compressed_layer", Index{0});
    plan.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("default")) {
      const json& d = j.at("default");
      plan.default_strategy = strategy_from(d, "default: ");
      plan.oversample_factor = d.value("oversample_factor", 1.5);
    }
    if (j.contains("layers")) {
      for (const json& l : j.at("layers")) {
        PlanEntry e;
        e.layer = l.at("layer").get<Index>();
        e.strategy = strategy_from(l, "plan layer " + std::to_string(e.layer) + ": ");
        if (l.contains("oversampling")) e.oversampling = l.at("oversampling").get<Index>();
        if (l.contains("oversample_factor")) e.oversample_factor = l.at("oversample_factor").get<double>();
        plan.layers.push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

CompressionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_plan(ss.str());
  } catch (const Error& e) {
    throw_error(e.kind(), path.string() + ": " + e.what());
  }
}

std::string plan_to_string(const CompressionPlan& plan) {
  json j;
  j["first_compressed_layer"] = plan.first_compressed_layer;
  j["seed"] = plan.seed;
  json d = strategy_json(plan.default_strategy);
  d["oversample_factor"] = plan.oversample_factor;
  j["default"] = d;
  json layers = json::array();
  for (const auto& e : plan.layers) {
    json l = strategy_json(e.strategy);
    l["layer"] = e.layer;
    if (e.oversampling) l["oversampling"] = *e.oversampling;
    if (e.oversample_factor) l["oversample_factor"] = *e.oversample_factor;
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

}  // namespace ron
