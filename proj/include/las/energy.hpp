#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace las {

inline constexpr double kEnergyAC = 0.9;
inline constexpr double kEnergyMAC = 4.6;

enum class SopRule {
  per_event,       // one SOP per fired event
  per_level_bits,  // ceil(log2(2H)) SOPs per event of an H-level neuron
};

struct SiteCounts {
  std::uint64_t sops = 0;
  std::uint64_t flops = 0;

  friend bool operator==(const SiteCounts&, const SiteCounts&) = default;
};

/// SOP/FLOP counters with per-site attribution. Totals always equal the sum
/// of the breakdown.
class EnergyLedger {
 public:
  explicit EnergyLedger(SopRule rule = SopRule::per_event) : rule_(rule) {}

  void record_sop(const std::string& site, std::uint64_t n);
  void record_flop(const std::string& site, std::uint64_t n);
  /// SOPs for `events` events emitted by neurons with `levels` levels per polarity.
  void record_events(const std::string& site, std::uint64_t events, int levels);
  /// Sum of both ledgers (associative and commutative).
  void merge(const EnergyLedger& other);

  std::uint64_t sops() const noexcept { return sops_; }
  std::uint64_t flops() const noexcept { return flops_; }
  SopRule rule() const noexcept { return rule_; }
  const std::map<std::string, SiteCounts>& sites() const noexcept { return sites_; }

  friend bool operator==(const EnergyLedger&, const EnergyLedger&) = default;

 private:
  SopRule rule_;
  std::uint64_t sops_ = 0;
  std::uint64_t flops_ = 0;
  std::map<std::string, SiteCounts> sites_;
};

/// SOPs charged per event of an H-level neuron under `rule`.
std::uint64_t sop_weight(SopRule rule, int levels);

/// (SOPs * E_AC) / (FLOPs * E_MAC); throws UndefinedRatioError when FLOPs == 0.
double energy_ratio(std::uint64_t sops, std::uint64_t flops);
double energy_ratio(const EnergyLedger& ledger);
/// Ratio or nullopt when undefined.
std::optional<double> try_energy_ratio(const EnergyLedger& ledger);

/// Float-path cost per operation kind.
class FlopCostTable {
 public:
  FlopCostTable();

  /// Throws ConfigError listing the known kinds.
  std::uint64_t cost(const std::string& kind) const;
  void set(const std::string& kind, std::uint64_t cost) { costs_[kind] = cost; }
  std::vector<std::string> kinds() const;

 private:
  std::map<std::string, std::uint64_t> costs_;
};

/// Charges a dense m x k by k x n float product (m*k*n MACs).
void record_matmul(EnergyLedger& ledger, const std::string& site, std::uint64_t m, std::uint64_t k,
                   std::uint64_t n);

/// Cost from the default table (gelu 70, exp 20, sqrt 12, mac 1, ...).
std::uint64_t flop_cost(const std::string& kind);

void to_json(nlohmann::json& j, const EnergyLedger& ledger);
EnergyLedger ledger_from_json(const nlohmann::json& j);

}  // namespace las
