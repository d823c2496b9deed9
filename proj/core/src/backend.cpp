#include "atlasfuse/backend.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "atlasfuse/errors.hpp"
#include "atlasfuse/metrics.hpp"
#include "atlasfuse/mvol.hpp"
#include "atlasfuse/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace atlasfuse {

void BackendSpec::validate() const {
  const auto& c = oracle.corruption;
  if (c.erode_r < 0.0 || c.dilate_r < 0.0)
    throw ContractError("corruption radii must be >= 0");
  if (c.drop_component_prob < 0.0 || c.drop_component_prob > 1.0 ||
      c.boundary_noise_prob < 0.0 || c.boundary_noise_prob > 1.0)
    throw ContractError("corruption probabilities must lie in [0,1]");
  if (region_grow.k_sigma < 0.0) throw ContractError("k_sigma must be >= 0");
  if (region_grow.max_iters < 0) throw ContractError("max_iters must be >= 0");
  if (kind == BackendKind::External) {
    if (external.command.empty()) throw ContractError("external backend needs a command");
    if (!(external.timeout_s > 0.0)) throw ContractError("timeout must be > 0");
  }
}

BackendSpec load_backend_spec(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw FormatError("cannot open '" + json_path + "'");
  json j;
  try {
    f >> j;
  } catch (const json::exception& ex) {
    throw FormatError("'" + json_path + "': " + ex.what());
  }
  BackendSpec s;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "oracle") s.kind = BackendKind::Oracle;
    else if (kind == "region_grow") s.kind = BackendKind::RegionGrow;
    else if (kind == "external") s.kind = BackendKind::External;
    else throw FormatError("'" + json_path + "': unknown backend kind '" + kind + "'");

    if (j.contains("oracle")) {
      const auto& o = j["oracle"];
      s.oracle.gt_mask_path = o.value("gt_mask_path", std::string{});
      if (o.contains("corruption")) {
        const auto& c = o["corruption"];
        s.oracle.corruption.erode_r = c.value("erode_r", 0.0);
        s.oracle.corruption.dilate_r = c.value("dilate_r", 0.0);
        s.oracle.corruption.drop_component_prob = c.value("drop_component_prob", 0.0);
        s.oracle.corruption.boundary_noise_prob = c.value("boundary_noise_prob", 0.0);
        s.oracle.corruption.seed = c.value("seed", std::uint64_t{0});
      }
    }
    if (j.contains("region_grow")) {
      s.region_grow.k_sigma = j["region_grow"].value("k_sigma", 2.5);
      s.region_grow.max_iters = j["region_grow"].value("max_iters", 200);
    }
    if (j.contains("external")) {
      s.external.command = j["external"].value("command", std::string{});
      s.external.workdir = j["external"].value("workdir", std::string{});
      s.external.timeout_s = j["external"].value("timeout_s", 300.0);
    }
  } catch (const json::exception& ex) {
    throw FormatError("'" + json_path + "': " + ex.what());
  }
  s.validate();
  return s;
}

void save_backend_spec(const BackendSpec& spec, const std::string& json_path) {
  json j;
  switch (spec.kind) {
    case BackendKind::Oracle: j["kind"] = "oracle"; break;
    case BackendKind::RegionGrow: j["kind"] = "region_grow"; break;
    case BackendKind::External: j["kind"] = "external"; break;
  }
  j["oracle"] = {{"gt_mask_path", spec.oracle.gt_mask_path},
                 {"corruption",
                  {{"erode_r", spec.oracle.corruption.erode_r},
                   {"dilate_r", spec.oracle.corruption.dilate_r},
                   {"drop_component_prob", spec.oracle.corruption.drop_component_prob},
                   {"boundary_noise_prob", spec.oracle.corruption.boundary_noise_prob},
                   {"seed", spec.oracle.corruption.seed}}}};
  j["region_grow"] = {{"k_sigma", spec.region_grow.k_sigma},
                      {"max_iters", spec.region_grow.max_iters}};
  j["external"] = {{"command", spec.external.command},
                   {"workdir", spec.external.workdir},
                   {"timeout_s", spec.external.timeout_s}};
  std::ofstream f(json_path, std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + json_path + "' for writing");
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Oracle corruption
// ---------------------------------------------------------------------------

LabelMask erode_ball(const LabelMask& m, double r_vox) {
  if (r_vox <= 0.0) return binarize_labels(m);
  // Keep voxels farther than r from the background (voxel-space EDT of the
  // complement); identical to Minkowski erosion with a rasterized ball.
  LabelMask complement(m.geom, std::vector<std::int32_t>(m.labels.size()));
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    complement.labels[i] = m.labels[i] == 0 ? 1 : 0;
  const DistanceMap d = edt_with_spacing(complement, {1.0, 1.0, 1.0});
  std::vector<std::int32_t> out(m.labels.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (m.labels[i] != 0 && d.mm[i] > r_vox) ? 1 : 0;
  return LabelMask(m.geom, std::move(out));
}

LabelMask dilate_ball(const LabelMask& m, double r_vox) {
  if (r_vox <= 0.0) return binarize_labels(m);
  if (m.empty_foreground()) return binarize_labels(m);
  const DistanceMap d = edt_with_spacing(m, {1.0, 1.0, 1.0});
  std::vector<std::int32_t> out(m.labels.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d.mm[i] <= r_vox ? 1 : 0;
  return LabelMask(m.geom, std::move(out));
}

LabelMask corrupt_mask(const LabelMask& gt, const CorruptionSpec& c) {
  LabelMask m = binarize_labels(gt);
  Rng rng(c.seed);

  if (c.erode_r > 0.0) m = erode_ball(m, c.erode_r);
  if (c.dilate_r > 0.0) m = dilate_ball(m, c.dilate_r);

  if (c.drop_component_prob > 0.0) {
    const ComponentLabeling cl = connected_components(m, 26);
    std::vector<bool> drop(cl.sizes.size() + 1, false);
    for (std::size_t id = 1; id <= cl.sizes.size(); ++id)
      drop[id] = rng.uniform() < c.drop_component_prob;
    for (std::size_t i = 0; i < m.labels.size(); ++i)
      if (m.labels[i] != 0 && drop[cl.components.labels[i]]) m.labels[i] = 0;
  }

  if (c.boundary_noise_prob > 0.0) {
    // Flip voxels on either side of the boundary, in scan order.
    const auto& g = m.geom;
    std::vector<std::size_t> boundary;
    constexpr int d6[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                              {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          const bool fg = m.at(i, j, k) != 0;
          bool on_boundary = false;
          for (const auto& d : d6) {
            const int ii = i + d[0], jj = j + d[1], kk = k + d[2];
            const bool nb_fg = g.contains(ii, jj, kk) && m.at(ii, jj, kk) != 0;
            if (fg && !nb_fg) { on_boundary = true; break; }
            if (!fg && nb_fg) { on_boundary = true; break; }
          }
          if (on_boundary) boundary.push_back(g.linear(i, j, k));
        }
    for (std::size_t lin : boundary)
      if (rng.uniform() < c.boundary_noise_prob) m.labels[lin] = m.labels[lin] ? 0 : 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Region growing
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> prompt_seeds(const Prompt& prompt, const GridGeometry& g) {
  std::vector<std::size_t> seeds;
  switch (prompt.kind) {
    case PromptKind::Click: {
      if (!g.contains(prompt.click.i, prompt.click.j, prompt.click.k))
        throw ContractError("click prompt outside the query grid");
      seeds.push_back(g.linear(prompt.click.i, prompt.click.j, prompt.click.k));
      break;
    }
    case PromptKind::Mask: {
      if (prompt.mask.geom != g)
        throw ContractError("mask prompt geometry differs from query");
      for (std::size_t i = 0; i < prompt.mask.labels.size(); ++i)
        if (prompt.mask.labels[i] != 0) seeds.push_back(i);
      break;
    }
    case PromptKind::Box:
    case PromptKind::SliceBox: {
      const int ci = (prompt.box_min.i + prompt.box_max.i) / 2;
      const int cj = (prompt.box_min.j + prompt.box_max.j) / 2;
      const int ck = (prompt.kind == PromptKind::SliceBox)
                         ? prompt.slice_index
                         : (prompt.box_min.k + prompt.box_max.k) / 2;
      if (!g.contains(ci, cj, ck))
        throw ContractError("box prompt center outside the query grid");
      seeds.push_back(g.linear(ci, cj, ck));
      break;
    }
  }
  if (seeds.empty()) throw EmptyPriorError("prompt produced no seeds");
  return seeds;
}

ProbMask region_grow(const RegionGrowSpec& spec, const Volume& query,
                     const Prompt& prompt) {
  const auto& g = query.geom;
  const auto seeds = prompt_seeds(prompt, g);

  const bool use_box = prompt.kind == PromptKind::Box;
  auto inside_box = [&](const Index3& v) {
    if (!use_box) return true;
    return v.i >= prompt.box_min.i && v.i <= prompt.box_max.i &&
           v.j >= prompt.box_min.j && v.j <= prompt.box_max.j &&
           v.k >= prompt.box_min.k && v.k <= prompt.box_max.k;
  };

  std::vector<std::uint8_t> in_region(g.voxel_count(), 0);
  std::vector<std::size_t> frontier;
  double sum = 0.0, sumsq = 0.0;
  std::size_t count = 0;
  auto add_stats = [&](std::size_t lin) {
    const double v = query.data[lin];
    sum += v;
    sumsq += v * v;
    ++count;
  };

  for (std::size_t s : seeds) {
    if (!in_region[s]) {
      in_region[s] = 1;
      frontier.push_back(s);
      add_stats(s);
    }
  }
  // A single seed gives no spread estimate; seed the statistics from its
  // 26-neighborhood (statistics only, not membership).
  if (seeds.size() == 1) {
    const Index3 v = g.unlinear(seeds[0]);
    for (int dk = -1; dk <= 1; ++dk)
      for (int dj = -1; dj <= 1; ++dj)
        for (int di = -1; di <= 1; ++di) {
          if (di == 0 && dj == 0 && dk == 0) continue;
          const int i = v.i + di, j = v.j + dj, k = v.k + dk;
          if (g.contains(i, j, k)) add_stats(g.linear(i, j, k));
        }
  }

  std::vector<std::size_t> next;
  for (int iter = 0; iter < spec.max_iters && !frontier.empty(); ++iter) {
    const double mean = sum / count;
    const double var = std::max(0.0, sumsq / count - mean * mean);
    const double band = spec.k_sigma * std::sqrt(var);

    next.clear();
    for (std::size_t lin : frontier) {
      const Index3 v = g.unlinear(lin);
      for (int dk = -1; dk <= 1; ++dk)
        for (int dj = -1; dj <= 1; ++dj)
          for (int di = -1; di <= 1; ++di) {
            if (di == 0 && dj == 0 && dk == 0) continue;
            const int i = v.i + di, j = v.j + dj, k = v.k + dk;
            if (!g.contains(i, j, k)) continue;
            const std::size_t nlin = g.linear(i, j, k);
            if (in_region[nlin]) continue;
            if (!inside_box({i, j, k})) continue;
            if (std::fabs(static_cast<double>(query.data[nlin]) - mean) > band) continue;
            in_region[nlin] = 1;
            next.push_back(nlin);
          }
    }
    for (std::size_t lin : next) add_stats(lin);
    frontier.swap(next);
  }

  std::vector<float> out(g.voxel_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in_region[i] ? 1.0f : 0.0f;
  return ProbMask(g, std::move(out));
}

}  // namespace

// ---------------------------------------------------------------------------
// External protocol
// ---------------------------------------------------------------------------

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  out += "'";
  return out;
}

std::string read_tail(const fs::path& p, std::size_t max_bytes = 2000) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return "";
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(f.tellg());
  const std::size_t take = std::min(size, max_bytes);
  f.seekg(static_cast<std::streamoff>(size - take));
  std::string out(take, '\0');
  f.read(out.data(), static_cast<std::streamsize>(take));
  return out;
}

// Runs `command <dir>` through /bin/sh with a wall-clock timeout; stdout and
// stderr are captured into the request directory.
void run_command(const ExternalSpec& spec, const fs::path& dir) {
  const std::string cmdline = spec.command + " " + shell_quote(dir.string());
  const fs::path out_path = dir / "backend.stdout.txt";
  const fs::path err_path = dir / "backend.stderr.txt";

  const pid_t pid = fork();
  if (pid < 0) throw BackendError("fork failed");
  if (pid == 0) {
    setpgid(0, 0);
    const int ofd = open(out_path.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    const int efd = open(err_path.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (ofd >= 0) dup2(ofd, 1);
    if (efd >= 0) dup2(efd, 2);
    execl("/bin/sh", "sh", "-c", cmdline.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }

  const double deadline_ns = spec.timeout_s * 1e9;
  double waited_ns = 0.0;
  int status = 0;
  for (;;) {
    const pid_t r = waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (r < 0) throw BackendError("waitpid failed");
    if (waited_ns >= deadline_ns) {
      kill(-pid, SIGKILL);
      waitpid(pid, &status, 0);
      throw BackendError("external backend timed out after " +
                         std::to_string(spec.timeout_s) + " s (request dir " +
                         dir.string() + ")");
    }
    timespec ts{0, 5'000'000};  // 5 ms
    nanosleep(&ts, nullptr);
    waited_ns += 5e6;
  }

  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    std::ostringstream msg;
    msg << "external backend failed";
    if (WIFEXITED(status)) msg << " with exit code " << WEXITSTATUS(status);
    else if (WIFSIGNALED(status)) msg << " on signal " << WTERMSIG(status);
    msg << " (request dir " << dir.string() << ")";
    const std::string tail = read_tail(err_path);
    if (!tail.empty()) msg << "\nstderr tail:\n" << tail;
    throw BackendError(msg.str());
  }
}

std::atomic<std::uint64_t> g_request_counter{0};

}  // namespace

ProbMask external_roundtrip(const ExternalSpec& spec, const Volume& query,
                            const std::optional<Prompt>& prompt) {
  const fs::path base = spec.workdir.empty() ? fs::temp_directory_path()
                                             : fs::path(spec.workdir);
  fs::create_directories(base);
  const fs::path dir =
      base / ("request_" + std::to_string(getpid()) + "_" +
              std::to_string(g_request_counter.fetch_add(1)));
  fs::create_directories(dir);

  write_mvol(query, (dir / "query.mvol.json").string());

  json req;
  req["version"] = 1;
  req["volume"] = "query.mvol.json";
  req["expected_output"] = "mask.mvol.json";
  if (prompt.has_value()) {
    json pj;
    pj["kind"] = to_string(prompt->kind);
    pj["context_label"] = prompt->context_label;
    switch (prompt->kind) {
      case PromptKind::Click:
        pj["click"] = {prompt->click.i, prompt->click.j, prompt->click.k};
        break;
      case PromptKind::Box:
        pj["box"] = {{"min", {prompt->box_min.i, prompt->box_min.j, prompt->box_min.k}},
                     {"max", {prompt->box_max.i, prompt->box_max.j, prompt->box_max.k}}};
        break;
      case PromptKind::SliceBox:
        pj["box"] = {{"min", {prompt->box_min.i, prompt->box_min.j, prompt->box_min.k}},
                     {"max", {prompt->box_max.i, prompt->box_max.j, prompt->box_max.k}}};
        pj["slice_index"] = prompt->slice_index;
        break;
      case PromptKind::Mask:
        write_mvol(prompt->mask, (dir / "prompt_mask.mvol.json").string());
        pj["mask_file"] = "prompt_mask.mvol.json";
        break;
    }
    req["prompt"] = pj;
  } else {
    req["prompt"] = nullptr;
  }
  {
    std::ofstream f(dir / "request.json", std::ios::trunc);
    if (!f) throw BackendError("cannot write request.json in " + dir.string());
    f << req.dump(2) << '\n';
  }

  run_command(spec, dir);

  const fs::path out_manifest = dir / "mask.mvol.json";
  ProbMask result;
  try {
    result = read_mvol_prob(out_manifest.string());
  } catch (const Error& ex) {
    throw BackendError("malformed backend response in " + dir.string() + ": " +
                       ex.what());
  }
  if (result.geom != query.geom)
    throw BackendError("backend response geometry differs from the query (request dir " +
                       dir.string() + ")");
  return result;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

ProbMask segment(const BackendSpec& backend, const Volume& query,
                 const std::optional<Prompt>& prompt, const LabelMask* oracle_gt) {
  backend.validate();
  switch (backend.kind) {
    case BackendKind::Oracle: {
      LabelMask gt;
      if (!backend.oracle.gt_mask_path.empty()) {
        gt = read_mask_any(backend.oracle.gt_mask_path);
      } else if (oracle_gt != nullptr) {
        gt = *oracle_gt;
      } else {
        throw BackendError("oracle backend has no ground truth configured");
      }
      if (gt.geom != query.geom)
        throw BackendError("oracle ground truth geometry differs from the query");
      const LabelMask corrupted = corrupt_mask(gt, backend.oracle.corruption);
      std::vector<float> v(corrupted.labels.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = corrupted.labels[i] != 0 ? 1.0f : 0.0f;
      return ProbMask(query.geom, std::move(v));
    }
    case BackendKind::RegionGrow: {
      if (!prompt.has_value())
        throw EmptyPriorError("region-grow backend requires a prompt");
      return region_grow(backend.region_grow, query, *prompt);
    }
    case BackendKind::External:
      return external_roundtrip(backend.external, query, prompt);
  }
  throw ContractError("unreachable backend kind");
}

}  // namespace atlasfuse
