#include "las/energy.hpp"

#include <bit>

#include "las/errors.hpp"

namespace las {

void EnergyLedger::record_sop(const std::string& site, std::uint64_t n) {
  sites_[site].sops += n;
  sops_ += n;
}

void EnergyLedger::record_flop(const std::string& site, std::uint64_t n) {
  sites_[site].flops += n;
  flops_ += n;
}

void EnergyLedger::record_events(const std::string& site, std::uint64_t events, int levels) {
  record_sop(site, events * sop_weight(rule_, levels));
}

void EnergyLedger::merge(const EnergyLedger& other) {
  for (const auto& [site, c] : other.sites_) {
    auto& mine = sites_[site];
    mine.sops += c.sops;
    mine.flops += c.flops;
  }
  sops_ += other.sops_;
  flops_ += other.flops_;
}

std::uint64_t sop_weight(SopRule rule, int levels) {
  if (rule == SopRule::per_event || levels <= 1) return 1;
  // ceil(log2(2H))
  return std::bit_width(static_cast<std::uint64_t>(2 * levels - 1));
}

double energy_ratio(std::uint64_t sops, std::uint64_t flops) {
  if (flops == 0) throw UndefinedRatioError("energy ratio undefined: no FLOPs recorded");
  return (static_cast<double>(sops) * kEnergyAC) / (static_cast<double>(flops) * kEnergyMAC);
}

double energy_ratio(const EnergyLedger& ledger) { return energy_ratio(ledger.sops(), ledger.flops()); }

std::optional<double> try_energy_ratio(const EnergyLedger& ledger) {
  if (ledger.flops() == 0) return std::nullopt;
  return energy_ratio(ledger);
}

FlopCostTable::FlopCostTable()
    : costs_{{"mac", 1}, {"add", 1}, {"div", 1}, {"gelu", 70}, {"exp", 20}, {"sqrt", 12},
             {"silu", 23}} {}

std::uint64_t FlopCostTable::cost(const std::string& kind) const {
  const auto it = costs_.find(kind);
  if (it != costs_.end()) return it->second;
  std::string list;
  for (const auto& [k, _] : costs_) list += (list.empty() ? "" : ", ") + k;
  throw ConfigError("unknown op kind '" + kind + "' (known: " + list + ")");
}

std::vector<std::string> FlopCostTable::kinds() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : costs_) out.push_back(k);
  return out;
}

void record_matmul(EnergyLedger& ledger, const std::string& site, std::uint64_t m, std::uint64_t k,
                   std::uint64_t n) {
  ledger.record_flop(site, m * k * n * flop_cost("mac"));
}

std::uint64_t flop_cost(const std::string& kind) {
  static const FlopCostTable table;
  return table.cost(kind);
}

void to_json(nlohmann::json& j, const EnergyLedger& ledger) {
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [site, c] : ledger.sites()) {
    nlohmann::json s{{"sops", c.sops}, {"flops", c.flops}};
    if (c.flops > 0) s["ratio"] = energy_ratio(c.sops, c.flops);
    sites[site] = s;
  }
  j = nlohmann::json{{"sops", ledger.sops()},
                     {"flops", ledger.flops()},
                     {"e_ac", kEnergyAC},
                     {"e_mac", kEnergyMAC},
                     {"sop_rule", ledger.rule() == SopRule::per_event ? "per_event" : "per_level_bits"},
                     {"sites", sites}};
  if (const auto r = try_energy_ratio(ledger)) j["ratio"] = *r;
}

EnergyLedger ledger_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("sops") || !j.contains("flops")) {
    throw FormatError("energy ledger JSON needs 'sops' and 'flops'");
  }
  const auto rule = j.value("sop_rule", std::string("per_event")) == "per_level_bits"
                        ? SopRule::per_level_bits
                        : SopRule::per_event;
  EnergyLedger ledger(rule);
  if (j.contains("sites")) {
    for (const auto& [site, c] : j.at("sites").items()) {
      ledger.record_sop(site, c.value("sops", std::uint64_t{0}));
      ledger.record_flop(site, c.value("flops", std::uint64_t{0}));
    }
  }
  if (ledger.sops() != j.at("sops").get<std::uint64_t>() ||
      ledger.flops() != j.at("flops").get<std::uint64_t>()) {
    throw FormatError("energy ledger JSON: site breakdown does not sum to totals");
  }
  return ledger;
}

}  // namespace las
