#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "depthlab/influence_table.hpp"
#include "depthlab/pipeline.hpp"

namespace depthlab {

struct SweepSeries {
  std::string metric;  // metric id or "random"
  Granularity granularity = Granularity::Block;
  std::vector<SweepRecord> records;

  std::string name() const;  // "cosine@block/none"
};

struct UpdateNormSeries {
  std::vector<UnitId> units;
  std::vector<double> values;
};

struct EvolutionSeries {
  std::vector<std::size_t> steps;
  std::vector<InfluenceTable> tables;
};

struct PlotInputs {
  std::vector<SweepSeries> sweeps;
  std::vector<SweepSeries> relative;  // records carry `relative` deltas
  std::optional<UpdateNormSeries> update_norms;
  std::optional<EvolutionSeries> evolution;
};

// Long-format CSV text (series,x,y,value) per figure family:
//   metric_comparison    every sweep without recovery, x = compression ratio
//   attention_vs_ffn     attention- and feed-forward-granularity sweeps
//   recovery_relative    relative deltas, y ∈ {mean_nll, mc_accuracy}
//   update_norms         series = sublayer kind, x = block index
//   influence_evolution  series = unit, x = training step
// Families without data are left out; mc_accuracy rows only appear when the
// sweep has a task.
std::map<std::string, std::string> plot_tables(const PlotInputs& inputs);

// Writes plot_<family>.csv for each family; returns the paths written.
std::vector<std::filesystem::path> emit_plot_data(const PlotInputs& inputs, const std::filesystem::path& dir);

}  // namespace depthlab
