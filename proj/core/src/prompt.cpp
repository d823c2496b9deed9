#include "atlasfuse/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/mvol.hpp"

using json = nlohmann::json;

namespace atlasfuse {

std::string to_string(PromptKind k) {
  switch (k) {
    case PromptKind::Click: return "click";
    case PromptKind::Box: return "box";
    case PromptKind::Mask: return "mask";
    case PromptKind::SliceBox: return "slicebox";
  }
  return "click";
}

PromptKind prompt_kind_from_string(const std::string& s) {
  if (s == "click") return PromptKind::Click;
  if (s == "box") return PromptKind::Box;
  if (s == "mask") return PromptKind::Mask;
  if (s == "slicebox") return PromptKind::SliceBox;
  throw ContractError("unknown prompt kind '" + s + "'");
}

ComponentLabeling connected_components(const LabelMask& mask, int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    throw ContractError("connectivity must be 6 or 26");
  const auto& g = mask.geom;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];

  std::vector<Index3> neigh;
  for (int dk = -1; dk <= 1; ++dk)
    for (int dj = -1; dj <= 1; ++dj)
      for (int di = -1; di <= 1; ++di) {
        if (di == 0 && dj == 0 && dk == 0) continue;
        const int manhattan = std::abs(di) + std::abs(dj) + std::abs(dk);
        if (connectivity == 6 && manhattan != 1) continue;
        neigh.push_back({di, dj, dk});
      }

  std::vector<std::int32_t> comp(g.voxel_count(), 0);
  struct Found {
    std::int32_t provisional_id;
    std::size_t size;
    std::size_t min_linear;
  };
  std::vector<Found> found;
  std::vector<std::size_t> stack;

  std::int32_t next = 0;
  for (std::size_t seed = 0; seed < comp.size(); ++seed) {
    if (mask.labels[seed] == 0 || comp[seed] != 0) continue;
    ++next;
    Found f{next, 0, seed};
    comp[seed] = next;
    stack.clear();
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++f.size;
      const Index3 v = g.unlinear(cur);
      for (const auto& d : neigh) {
        const int i = v.i + d.i, j = v.j + d.j, k = v.k + d.k;
        if (i < 0 || i >= nx || j < 0 || j >= ny || k < 0 || k >= nz) continue;
        const std::size_t lin = g.linear(i, j, k);
        if (mask.labels[lin] == 0 || comp[lin] != 0) continue;
        comp[lin] = next;
        stack.push_back(lin);
      }
    }
    found.push_back(f);
  }

  // Reassign ids by decreasing size, ties to the smaller first linear index.
  std::vector<std::size_t> order(found.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (found[a].size != found[b].size) return found[a].size > found[b].size;
    return found[a].min_linear < found[b].min_linear;
  });
  std::vector<std::int32_t> remap(found.size() + 1, 0);
  ComponentLabeling out;
  out.sizes.resize(found.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    remap[found[order[rank]].provisional_id] = static_cast<std::int32_t>(rank + 1);
    out.sizes[rank] = found[order[rank]].size;
  }
  for (auto& c : comp) c = remap[c];
  out.components = LabelMask(g, std::move(comp));
  return out;
}

Prompt click_from_mask(const LabelMask& m) {
  const ComponentLabeling cl = connected_components(binarize_labels(m), 26);
  if (cl.sizes.empty()) throw EmptyPriorError("click prompt from empty mask");

  const auto& g = m.geom;
  double ci = 0.0, cj = 0.0, ck = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < cl.components.labels.size(); ++n) {
    if (cl.components.labels[n] != 1) continue;
    const Index3 v = g.unlinear(n);
    ci += v.i;
    cj += v.j;
    ck += v.k;
    ++count;
  }
  ci /= count;
  cj /= count;
  ck /= count;

  Index3 click{static_cast<int>(std::lround(ci)), static_cast<int>(std::lround(cj)),
               static_cast<int>(std::lround(ck))};
  click.i = std::clamp(click.i, 0, g.dims[0] - 1);
  click.j = std::clamp(click.j, 0, g.dims[1] - 1);
  click.k = std::clamp(click.k, 0, g.dims[2] - 1);

  if (cl.components.at(click.i, click.j, click.k) != 1) {
    // Centroid fell outside the component (ring shapes): snap to the nearest
    // foreground voxel of the largest component, ties to the smallest linear
    // index.
    double best = std::numeric_limits<double>::infinity();
    Index3 best_v = click;
    for (std::size_t n = 0; n < cl.components.labels.size(); ++n) {
      if (cl.components.labels[n] != 1) continue;
      const Index3 v = g.unlinear(n);
      const double di = v.i - ci, dj = v.j - cj, dk = v.k - ck;
      const double d2 = di * di + dj * dj + dk * dk;
      if (d2 < best) {
        best = d2;
        best_v = v;
      }
    }
    click = best_v;
  }

  Prompt p;
  p.kind = PromptKind::Click;
  p.click = click;
  return p;
}

namespace {

struct Bounds {
  Index3 lo, hi;
  bool any = false;
};

Bounds scan_bounds(const LabelMask& m) {
  Bounds b;
  b.lo = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
          std::numeric_limits<int>::max()};
  b.hi = {-1, -1, -1};
  const auto& g = m.geom;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (m.at(i, j, k) == 0) continue;
        b.any = true;
        b.lo.i = std::min(b.lo.i, i);
        b.lo.j = std::min(b.lo.j, j);
        b.lo.k = std::min(b.lo.k, k);
        b.hi.i = std::max(b.hi.i, i);
        b.hi.j = std::max(b.hi.j, j);
        b.hi.k = std::max(b.hi.k, k);
      }
  return b;
}

}  // namespace

Prompt box_from_mask(const LabelMask& m) {
  const Bounds b = scan_bounds(m);
  if (!b.any) throw EmptyPriorError("box prompt from empty mask");
  Prompt p;
  p.kind = PromptKind::Box;
  p.box_min = b.lo;
  p.box_max = b.hi;
  return p;
}

Prompt box_from_middle_slice(const LabelMask& m) {
  const auto& g = m.geom;
  std::vector<bool> slice_has(g.dims[2], false);
  int zmin = -1, zmax = -1;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1] && !slice_has[k]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (m.at(i, j, k) != 0) {
          slice_has[k] = true;
          break;
        }
    if (slice_has[k]) {
      if (zmin < 0) zmin = k;
      zmax = k;
    }
  }
  if (zmin < 0) throw EmptyPriorError("middle-slice box from empty mask");

  // Median of the foreground z range; if that slice is empty (disjoint
  // bands), the nearest nonempty slice wins, lower z on ties.
  int z = (zmin + zmax) / 2;
  if (!slice_has[z]) {
    for (int d = 1; d < g.dims[2]; ++d) {
      if (z - d >= 0 && slice_has[z - d]) { z = z - d; break; }
      if (z + d < g.dims[2] && slice_has[z + d]) { z = z + d; break; }
    }
  }

  Prompt p;
  p.kind = PromptKind::SliceBox;
  p.slice_index = z;
  p.box_min = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), z};
  p.box_max = {-1, -1, z};
  for (int j = 0; j < g.dims[1]; ++j)
    for (int i = 0; i < g.dims[0]; ++i) {
      if (m.at(i, j, z) == 0) continue;
      p.box_min.i = std::min(p.box_min.i, i);
      p.box_min.j = std::min(p.box_min.j, j);
      p.box_max.i = std::max(p.box_max.i, i);
      p.box_max.j = std::max(p.box_max.j, j);
    }
  return p;
}

Prompt make_prompt(const LabelMask& m, PromptKind kind) {
  Prompt p;
  switch (kind) {
    case PromptKind::Click: p = click_from_mask(m); break;
    case PromptKind::Box: p = box_from_mask(m); break;
    case PromptKind::SliceBox: p = box_from_middle_slice(m); break;
    case PromptKind::Mask: {
      if (m.empty_foreground()) throw EmptyPriorError("mask prompt from empty mask");
      p.kind = PromptKind::Mask;
      p.mask = binarize_labels(m);
      break;
    }
  }
  return p;
}

void save_prompt_json(const Prompt& p, const std::string& path) {
  json j;
  j["kind"] = to_string(p.kind);
  j["context_label"] = p.context_label;
  switch (p.kind) {
    case PromptKind::Click:
      j["click"] = {p.click.i, p.click.j, p.click.k};
      break;
    case PromptKind::Box:
      j["box"] = {{"min", {p.box_min.i, p.box_min.j, p.box_min.k}},
                  {"max", {p.box_max.i, p.box_max.j, p.box_max.k}}};
      break;
    case PromptKind::SliceBox:
      j["box"] = {{"min", {p.box_min.i, p.box_min.j, p.box_min.k}},
                  {"max", {p.box_max.i, p.box_max.j, p.box_max.k}}};
      j["slice_index"] = p.slice_index;
      break;
    case PromptKind::Mask: {
      const std::filesystem::path jp(path);
      const std::string mask_name = jp.stem().string() + "_mask.mvol.json";
      write_mvol(p.mask, (jp.parent_path() / mask_name).string());
      j["mask_file"] = mask_name;
      break;
    }
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

Prompt load_prompt_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open '" + path + "'");
  json j;
  try {
    f >> j;
    Prompt p;
    p.kind = prompt_kind_from_string(j.at("kind").get<std::string>());
    p.context_label = j.value("context_label", 1);
    if (p.kind == PromptKind::Click) {
      p.click = {j.at("click").at(0).get<int>(), j.at("click").at(1).get<int>(),
                 j.at("click").at(2).get<int>()};
    } else if (p.kind == PromptKind::Box || p.kind == PromptKind::SliceBox) {
      const auto& box = j.at("box");
      p.box_min = {box.at("min").at(0).get<int>(), box.at("min").at(1).get<int>(),
                   box.at("min").at(2).get<int>()};
      p.box_max = {box.at("max").at(0).get<int>(), box.at("max").at(1).get<int>(),
                   box.at("max").at(2).get<int>()};
      if (p.kind == PromptKind::SliceBox) p.slice_index = j.at("slice_index").get<int>();
    } else {
      const auto mask_file = j.at("mask_file").get<std::string>();
      const auto dir = std::filesystem::path(path).parent_path();
      p.mask = read_mvol_mask((dir / mask_file).string());
    }
    return p;
  } catch (const json::exception& ex) {
    throw FormatError("'" + path + "': " + ex.what());
  }
}

}  // namespace atlasfuse
