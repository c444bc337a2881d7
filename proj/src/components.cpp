#include <vector>

#include "boxseg/volume.hpp"

namespace boxseg {

ComponentLabels connected_components(const Mask2D& mask, int connectivity) {
  if (connectivity != 4 && connectivity != 8) throw VolumeError("connectivity: must be 4 or 8");

  ComponentLabels out;
  out.labels = Image2D<int>(mask.rows, mask.cols, 0);
  out.sizes.push_back(0);

  static constexpr int kOffsets8[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  static constexpr int kOffsets4[4][2] = {{-1, 0}, {0, -1}, {0, 1}, {1, 0}};

  const auto rows = static_cast<long>(mask.rows);
  const auto cols = static_cast<long>(mask.cols);
  std::vector<std::size_t> stack;

  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.data[start] || out.labels.data[start]) continue;
    const int id = static_cast<int>(out.sizes.size());
    std::size_t size = 0;
    out.labels.data[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++size;
      const long r = static_cast<long>(p) / cols;
      const long c = static_cast<long>(p) % cols;
      auto visit = [&](long dr, long dc) {
        const long nr = r + dr, nc = c + dc;
        if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) return;
        const auto q = static_cast<std::size_t>(nr * cols + nc);
        if (mask.data[q] && !out.labels.data[q]) {
          out.labels.data[q] = id;
          stack.push_back(q);
        }
      };
      if (connectivity == 8)
        for (const auto& o : kOffsets8) visit(o[0], o[1]);
      else
        for (const auto& o : kOffsets4) visit(o[0], o[1]);
    }
    out.sizes.push_back(size);
  }
  return out;
}

}  // namespace boxseg
