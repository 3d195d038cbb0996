#include "fmfnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace {

constexpr int kRecallBins = 101;
constexpr double kMinRecall = 0.1;
constexpr double kMinPrecision = 0.1;

double bev_distance(const Box3D& a, const Box3D& b) { return std::hypot(a.cx - b.cx, a.cy - b.cy); }

}  // namespace

double scale_error(const Box3D& a, const Box3D& b) {
  const double inter = std::min(a.w, b.w) * std::min(a.l, b.l) * std::min(a.h, b.h);
  const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  return 1.0 - inter / uni;
}

double yaw_error(double a, double b) { return std::abs(wrap_angle(a - b)); }

double average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = ranked_tp.size();
  std::vector<std::size_t> tp(n);
  std::size_t acc = 0;
  for (std::size_t i = 0; i < n; ++i) tp[i] = acc += ranked_tp[i] ? 1 : 0;

  // Envelope: best precision among prefixes reaching each recall level.
  const auto first_bin = static_cast<int>(std::lround(100.0 * kMinRecall)) + 1;
  double total = 0.0;
  for (int j = first_bin; j < kRecallBins; ++j) {
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (100 * tp[i] >= static_cast<std::size_t>(j) * num_gt) {
        best = std::max(best, static_cast<double>(tp[i]) / static_cast<double>(i + 1));
      }
    }
    total += std::max(0.0, best - kMinPrecision);
  }
  const double ap = total / static_cast<double>(kRecallBins - first_bin) / (1.0 - kMinPrecision);
  return std::clamp(ap, 0.0, 1.0);
}

ApResult match_and_ap(std::span<const EvalFrame> frames, int class_id, double threshold) {
  struct Ref {
    std::size_t frame, index;
    const Detection* det;
  };
  std::vector<Ref> order;
  std::vector<std::vector<bool>> taken(frames.size());
  ApResult res;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (std::size_t i = 0; i < frames[f].detections.size(); ++i) {
      if (frames[f].detections[i].class_id == class_id) order.push_back({f, i, &frames[f].detections[i]});
    }
    taken[f].assign(frames[f].ground_truth.size(), false);
    for (const auto& g : frames[f].ground_truth) res.num_gt += g.class_id == class_id ? 1 : 0;
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    const Detection &x = *a.det, &y = *b.det;
    if (x.score != y.score) return x.score > y.score;
    if (x.class_id != y.class_id) return x.class_id < y.class_id;
    if (x.box.cx != y.box.cx) return x.box.cx < y.box.cx;
    if (x.box.cy != y.box.cy) return x.box.cy < y.box.cy;
    if (x.box.cz != y.box.cz) return x.box.cz < y.box.cz;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.index < b.index;
  });

  std::vector<bool> ranked;
  ranked.reserve(order.size());
  double ate = 0, ase = 0, aoe = 0, ave = 0;
  for (const Ref& r : order) {
    const auto& gts = frames[r.frame].ground_truth;
    std::size_t best = gts.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || taken[r.frame][g]) continue;
      const double d = bev_distance(r.det->box, gts[g]);
      if (d < best_d) {
        best_d = d;
        best = g;
      }
    }
    const bool tp = best < gts.size() && best_d < threshold;
    if (tp) {
      taken[r.frame][best] = true;
      const Box3D& g = gts[best];
      ate += best_d;
      ase += scale_error(r.det->box, g);
      aoe += yaw_error(r.det->box.yaw, g.yaw);
      ave += std::hypot(r.det->box.vx - g.vx, r.det->box.vy - g.vy);
      ++res.num_tp;
    }
    ranked.push_back(tp);
    res.matches.push_back({r.frame, r.index, r.det->score, tp});
  }
  if (res.num_tp > 0) {
    const auto n = static_cast<double>(res.num_tp);
    res.ate = ate / n;
    res.ase = ase / n;
    res.aoe = aoe / n;
    res.ave = ave / n;
  }
  res.ap = average_precision(ranked, res.num_gt);
  return res;
}

double nds(double map, double mate, double mase, double maoe, double mave, double maae) {
  double s = 5.0 * map;
  for (double e : {mate, mase, maoe, mave, maae}) s += 1.0 - std::min(1.0, e);
  return s / 10.0;
}

EvalResult evaluate(std::span<const EvalFrame> frames, const std::vector<std::string>& class_names,
                    const MatchConfig& cfg) {
  cfg.validate();
  const int K = static_cast<int>(class_names.size());
  if (K == 0) throw UsageError("evaluate: no classes");
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (const auto& d : frames[f].detections)
      if (d.class_id < 0 || d.class_id >= K || d.box.class_id != d.class_id) {
        throw UsageError("evaluate: detection class id " + std::to_string(d.class_id) + " in frame " +
                         std::to_string(f) + " is not a known class");
      }
    for (const auto& g : frames[f].ground_truth)
      if (g.class_id < 0 || g.class_id >= K) {
        throw UsageError("evaluate: gt class id " + std::to_string(g.class_id) + " in frame " + std::to_string(f) +
                         " is not a known class");
      }
  }

  EvalResult r;
  r.thresholds = cfg.distance_thresholds;
  double sum_ap = 0, ate = 0, ase = 0, aoe = 0, ave = 0, aae = 0;
  int included = 0;
  for (int k = 0; k < K; ++k) {
    ClassMetrics cm;
    cm.name = class_names[static_cast<std::size_t>(k)];
    for (const auto& fr : frames)
      for (const auto& d : fr.detections) cm.num_det += d.class_id == k ? 1 : 0;
    for (double t : cfg.distance_thresholds) {
      const ApResult a = match_and_ap(frames, k, t);
      cm.num_gt = a.num_gt;
      cm.ap.push_back(a.ap);
    }
    const ApResult tp = match_and_ap(frames, k, cfg.tp_threshold);
    cm.num_gt = tp.num_gt;
    cm.mean_ap = 0;
    for (double a : cm.ap) cm.mean_ap += a;
    cm.mean_ap /= static_cast<double>(cm.ap.size());
    cm.ate = tp.ate;
    cm.ase = tp.ase;
    cm.aoe = tp.aoe;
    cm.ave = tp.ave;
    cm.aae = tp.num_tp > 0 ? 0.0 : 1.0;
    if (cm.num_gt > 0) {
      ++included;
      sum_ap += cm.mean_ap;
      ate += cm.ate;
      ase += cm.ase;
      aoe += cm.aoe;
      ave += cm.ave;
      aae += cm.aae;
    }
    r.per_class.push_back(std::move(cm));
  }
  if (included > 0) {
    const double n = included;
    r.mAP = sum_ap / n;
    r.mATE = ate / n;
    r.mASE = ase / n;
    r.mAOE = aoe / n;
    r.mAVE = ave / n;
    r.mAAE = aae / n;
  }
  r.NDS = nds(r.mAP, r.mATE, r.mASE, r.mAOE, r.mAVE, r.mAAE);
  return r;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j;
  j["mAP"] = r.mAP;
  j["mATE"] = r.mATE;
  j["mASE"] = r.mASE;
  j["mAOE"] = r.mAOE;
  j["mAVE"] = r.mAVE;
  j["mAAE"] = r.mAAE;
  j["NDS"] = r.NDS;
  j["distance_thresholds"] = r.thresholds;
  auto& pc = j["per_class"] = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    pc.push_back({{"class", c.name},
                  {"num_gt", c.num_gt},
                  {"num_det", c.num_det},
                  {"ap", c.ap},
                  {"mean_ap", c.mean_ap},
                  {"ate", c.ate},
                  {"ase", c.ase},
                  {"aoe", c.aoe},
                  {"ave", c.ave},
                  {"aae", c.aae}});
  }
  return j;
}

std::string format_table(const EvalResult& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %6s %6s %8s %7s %7s %7s %7s %7s\n", "class", "gt", "det", "AP", "ATE",
                "ASE", "AOE", "AVE", "AAE");
  os << line;
  for (const auto& c : r.per_class) {
    std::snprintf(line, sizeof line, "%-14s %6zu %6zu %8.4f %7.4f %7.4f %7.4f %7.4f %7.4f\n", c.name.c_str(), c.num_gt,
                  c.num_det, c.mean_ap, c.ate, c.ase, c.aoe, c.ave, c.aae);
    os << line;
  }
  std::snprintf(line, sizeof line,
                "mAP %.4f  mATE %.4f  mASE %.4f  mAOE %.4f  mAVE %.4f  mAAE %.4f  NDS %.4f\n", r.mAP, r.mATE,
                r.mASE, r.mAOE, r.mAVE, r.mAAE, r.NDS);
  os << line;
  return os.str();
}

void write_detections(const std::string& path, const std::vector<FrameDetection>& dets,
                      const std::vector<std::string>& class_names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& fd : dets) {
    const auto& d = fd.det;
    if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= class_names.size()) {
      throw UsageError("detection class id " + std::to_string(d.class_id) + " has no name");
    }
    const nlohmann::json j = {{"frame", fd.frame},
                              {"class", class_names[static_cast<std::size_t>(d.class_id)]},
                              {"score", d.score},
                              {"center", {d.box.cx, d.box.cy, d.box.cz}},
                              {"size", {d.box.w, d.box.l, d.box.h}},
                              {"yaw", d.box.yaw},
                              {"velocity", {d.box.vx, d.box.vy}}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<FrameDetection> read_detections(const std::string& path, const std::vector<std::string>& class_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<FrameDetection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    FrameDetection fd;
    std::string cls;
    try {
      const auto j = nlohmann::json::parse(line);
      fd.frame = j.at("frame").get<std::size_t>();
      cls = j.at("class").get<std::string>();
      fd.det.score = j.at("score").get<double>();
      const auto c = j.at("center").get<std::vector<double>>();
      const auto s = j.at("size").get<std::vector<double>>();
      const auto v = j.at("velocity").get<std::vector<double>>();
      if (c.size() != 3 || s.size() != 3 || v.size() != 2) throw FormatError("bad vector length");
      fd.det.box = {c[0], c[1], c[2], s[0], s[1], s[2], j.at("yaw").get<double>(), v[0], v[1], 0};
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const auto it = std::find(class_names.begin(), class_names.end(), cls);
    if (it == class_names.end()) throw UsageError(path + ":" + std::to_string(lineno) + ": unknown class '" + cls + "'");
    fd.det.class_id = static_cast<int>(it - class_names.begin());
    fd.det.box.class_id = fd.det.class_id;
    out.push_back(fd);
  }
  return out;
}

}  // namespace fmfnet
