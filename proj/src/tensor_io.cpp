#include "sif/tensor_io.hpp"

#include <limits>

namespace sif {

void write_tensors(io::Writer& w, const std::vector<const ad::Param*>& params) {
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.put_string(p->name);
    w.put(static_cast<std::uint32_t>(p->value.rows));
    w.put(static_cast<std::uint32_t>(p->value.cols));
    for (double x : p->value.data) w.put_f32(static_cast<float>(x));
  }
}

void read_tensors(io::Reader& r, const std::vector<ad::Param*>& params) {
  const auto count = r.get<std::uint32_t>();
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(params.size()));
  for (auto* p : params) {
    const auto name = r.get_string();
    if (name != p->name) throw FormatError("checkpoint tensor '" + name + "' where '" + p->name + "' was expected");
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != static_cast<std::uint32_t>(p->value.rows) || cols != static_cast<std::uint32_t>(p->value.cols))
      throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    for (auto& x : p->value.data) x = r.get_f32();
  }
}

}  // namespace sif
