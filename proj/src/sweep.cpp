#include <algorithm>

#include "sif/training.hpp"

namespace sif {

std::vector<SweepRow> sweep(SweepAxis axis, std::span<const int> values, const FeatureSchema& base_schema,
                            const GeneratorConfig& data, const TrainConfig& base,
                            const std::optional<std::filesystem::path>& out_dir) {
  const char* axis_name = axis == SweepAxis::B ? "B" : axis == SweepAxis::N ? "N" : "L";
  const ImpressionLog base_log = generate_log(base_schema, data);
  std::vector<SweepRow> rows;
  for (int value : values) {
    SweepRow row;
    row.value = value;
    try {
      FeatureSchema schema = base_schema;
      TrainConfig cfg = base;
      if (axis == SweepAxis::B) schema.granularity = value;
      if (axis == SweepAxis::N) cfg.mixer.blocks = value;
      if (axis == SweepAxis::L) cfg.mixer.max_len = value;
      schema.validate();
      // Samples do not depend on B, so only the schema is swapped.
      const ImpressionLog log(schema, base_log.config(), base_log.samples());
      Trainer trainer(log, cfg);
      std::optional<std::filesystem::path> run_dir;
      if (out_dir) run_dir = *out_dir / (std::string(axis_name) + "_" + std::to_string(value));
      const auto result = trainer.fit(run_dir);
      row.val = result.best_val;
      const auto& m = trainer.mixer();
      row.flops = flops_estimate(m.max_len(), m.num_slots(), m.dim(), m.config().blocks, m.config().heads,
                                 m.variant());
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::vector<std::vector<std::string>> table;
    for (const auto& r : rows) {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      table.push_back({std::to_string(r.value), r.ok ? "ok" : "failed", std::to_string(r.val.auc),
                       std::to_string(r.val.gauc), std::to_string(r.flops), err});
    }
    write_csv(*out_dir / "sweep.csv", {axis_name, "status", "val_auc", "val_gauc", "flops", "error"}, table);
  }
  return rows;
}

}  // namespace sif
