#include "depthlab/plot_data.hpp"

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"

namespace depthlab {

std::string SweepSeries::name() const {
  const std::string recovery = records.empty() ? "none" : records.front().recovery.label();
  return metric + "@" + to_string(granularity) + "/" + recovery;
}

namespace {

constexpr const char* kHeader = "series,x,y,value\n";

void add_row(std::string& out, const std::string& series, const std::string& x, const std::string& y, double value) {
  out += series + "," + x + "," + y + "," + format_number(value) + "\n";
}

void add_sweep(std::string& out, const SweepSeries& s) {
  const std::string name = s.name();
  for (const auto& r : s.records) add_row(out, name, format_number(r.compression_ratio), "mean_nll", r.eval.mean_nll);
  for (const auto& r : s.records) {
    if (r.eval.mc_accuracy) add_row(out, name, format_number(r.compression_ratio), "mc_accuracy", *r.eval.mc_accuracy);
  }
}

}  // namespace

std::map<std::string, std::string> plot_tables(const PlotInputs& in) {
  if (in.sweeps.empty()) throw ContractError("emit_plot_data: no sweeps");
  std::map<std::string, std::string> out;

  std::string comparison = kHeader;
  std::string split = kHeader;
  bool any_split = false;
  for (const auto& s : in.sweeps) {
    const bool plain = s.records.empty() || s.records.front().recovery.kind == RecoveryKind::None;
    if (!plain) continue;
    add_sweep(comparison, s);
    if (s.granularity == Granularity::Attention || s.granularity == Granularity::FeedForward) {
      add_sweep(split, s);
      any_split = true;
    }
  }
  out["metric_comparison"] = comparison;
  if (any_split) out["attention_vs_ffn"] = split;

  if (!in.relative.empty()) {
    std::string rel = kHeader;
    for (const auto& s : in.relative) {
      const std::string name = s.name();
      for (const auto& r : s.records) {
        if (!r.relative) throw ContractError("emit_plot_data: relative series without deltas");
        add_row(rel, name, format_number(r.compression_ratio), "mean_nll", r.relative->mean_nll);
      }
      for (const auto& r : s.records) {
        if (r.relative->mc_accuracy) {
          add_row(rel, name, format_number(r.compression_ratio), "mc_accuracy", *r.relative->mc_accuracy);
        }
      }
    }
    out["recovery_relative"] = rel;
  }

  if (in.update_norms) {
    std::string norms = kHeader;
    const auto& u = *in.update_norms;
    for (std::size_t i = 0; i < u.units.size(); ++i) {
      add_row(norms, to_string(u.units[i].kind), std::to_string(u.units[i].block), "update_l2", u.values[i]);
    }
    out["update_norms"] = norms;
  }

  if (in.evolution) {
    std::string evo = kHeader;
    const auto& e = *in.evolution;
    for (std::size_t i = 0; i < e.tables.size(); ++i) {
      for (const auto& s : e.tables[i].scores) {
        add_row(evo, to_string(s.unit), std::to_string(e.steps.at(i)), to_string(e.tables[i].metric), s.score);
      }
    }
    out["influence_evolution"] = evo;
  }
  return out;
}

std::vector<std::filesystem::path> emit_plot_data(const PlotInputs& inputs, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (const auto& [family, text] : plot_tables(inputs)) {
    const auto path = dir / ("plot_" + family + ".csv");
    write_file_atomic(path, text);
    written.push_back(path);
  }
  return written;
}

}  // namespace depthlab
