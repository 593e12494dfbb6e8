// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only
// when every selected criterion passes.
//
//   acceptance --work-dir DIR [--criteria 1,2,5]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "sdetr/sdetr.hpp"
#include "support/grad_cases.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace sdetr;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradients() {
  constexpr double kTol = 1e-3;
  constexpr int kInstances = 20;
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_case;
  std::size_t failures = 0, cases = 0;
  for (const auto& c : testing::primitive_cases()) {
    ++cases;
    for (int i = 0; i < kInstances; ++i) {
      auto [inputs, loss] = c.make(1000 + static_cast<std::uint64_t>(i));
      const auto r = testing::check_gradients(loss, inputs);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_case = c.name;
      }
      failures += !r.passed(kTol);
    }
  }
  for (int i = 0; i < kInstances; ++i) {
    const auto r = testing::check_tiny_model(static_cast<std::uint64_t>(i));
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_case = "tiny_model";
    }
    failures += !r.passed(kTol);
  }
  const double t = seconds_since(t0);
  return {failures == 0 && t < 60.0,
          std::to_string(cases) + " primitives + tiny model x " + std::to_string(kInstances) +
              " instances, failures " + std::to_string(failures) + ", worst rel err " + fmt(worst) + " (" +
              worst_case + "), " + fmt(t, 3) + " s (limit 60 s)"};
}

// ---------------------------------------------------------------------------
// 2. Hungarian oracle

Outcome hungarian_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t cost_mismatch = 0, tie_mismatch = 0, repeat_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(7), m = 1 + rng.index(n);
    CostMatrix c(m, n);
    for (auto& v : c.data) v = rng.uniform(-10, 10);
    const auto got = hungarian(c);
    cost_mismatch += std::abs(got.cost - testing::brute_force_assignment(c)) > 1e-9;

    // Small integer costs force ties.
    CostMatrix tied(m, n);
    for (auto& v : tied.data) v = static_cast<double>(rng.index(3));
    const auto a = hungarian(tied), b = hungarian(tied);
    repeat_mismatch += a.target_to_pred != b.target_to_pred;
    tie_mismatch += a.target_to_pred != testing::brute_force_lexicographic(tied);
  }
  const double t = seconds_since(t0);
  return {cost_mismatch + tie_mismatch + repeat_mismatch == 0 && t < 10.0,
          "1000 matrices up to 7x7: cost mismatches " + std::to_string(cost_mismatch) + ", tie-break mismatches " +
              std::to_string(tie_mismatch) + ", repeat mismatches " + std::to_string(repeat_mismatch) + ", " +
              fmt(t, 3) + " s (limit 10 s)"};
}

// ---------------------------------------------------------------------------
// 3. Geometry oracle

Outcome geometry_oracle() {
  Rng rng(7);
  double worst_iou = 0, worst_giou = 0;
  for (int i = 0; i < 1000; ++i) {
    auto box = [&] {
      const auto x = static_cast<float>(rng.index(64)), y = static_cast<float>(rng.index(64));
      return BoxXYXY{x, y, x + static_cast<float>(1 + rng.index(64)), y + static_cast<float>(1 + rng.index(64))};
    };
    const BoxXYXY a = box(), b = box();
    const auto r = testing::raster_overlap(a, b);
    worst_iou = std::max(worst_iou, std::abs(box_iou(a, b) - r.iou));
    worst_giou = std::max(worst_giou, std::abs(box_giou(a, b) - r.giou));
  }
  std::size_t order_violations = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto x1 = static_cast<float>(rng.uniform(0, 100)), y1 = static_cast<float>(rng.uniform(0, 100));
    const BoxXYXY a{x1, y1, x1 + static_cast<float>(rng.uniform(0.1, 50)), y1 + static_cast<float>(rng.uniform(0.1, 50))};
    const auto x2 = static_cast<float>(rng.uniform(0, 100)), y2 = static_cast<float>(rng.uniform(0, 100));
    const BoxXYXY b{x2, y2, x2 + static_cast<float>(rng.uniform(0.1, 50)), y2 + static_cast<float>(rng.uniform(0.1, 50))};
    order_violations += box_giou(a, b) > box_iou(a, b);
  }

  // RoIAlign against dense bilinear sampling on affine maps, boxes kept
  // inside the sampling interior.
  double worst_roi = 0;
  const std::size_t h = 8, w = 8, c = 2;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> map(h * w * c);
    const double ax = rng.uniform(-1, 1), ay = rng.uniform(-1, 1), off = rng.uniform(-1, 1);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t k = 0; k < c; ++k) {
          map[(y * w + x) * c + k] = ax * static_cast<double>(x) + ay * static_cast<double>(y) * (k + 1.0) + off;
        }
      }
    }
    const auto bx = static_cast<float>(rng.uniform(0.5, 4)), by = static_cast<float>(rng.uniform(0.5, 4));
    const BoxXYXY box{bx, by, bx + static_cast<float>(rng.uniform(0.5, 3.5)), by + static_cast<float>(rng.uniform(0.5, 3.5))};
    const Tensor f({h, w, c}, std::vector<float>(map.begin(), map.end()));
    const Tensor got = roi_align(f, {box}, 2, 2);
    const auto want = testing::dense_roi_oracle(map, h, w, c, box, 2, 2);
    for (std::size_t i = 0; i < want.size(); ++i) worst_roi = std::max(worst_roi, std::abs(got[i] - want[i]));
  }
  return {worst_iou <= 2e-2 && worst_giou <= 2e-2 && order_violations == 0 && worst_roi <= 1e-3,
          "max |IoU - raster| " + fmt(worst_iou) + ", max |GIoU - raster| " + fmt(worst_giou) +
              " (tol 2e-2, 1000 integer pairs); GIoU > IoU in " + std::to_string(order_violations) +
              " of 100000 pairs; max RoIAlign error " + fmt(worst_roi) + " (tol 1e-3)"};
}

// ---------------------------------------------------------------------------
// 4. View-construction contract

Outcome view_contract() {
  const ViewConfig cfg;
  std::vector<Image> images;
  for (std::uint64_t s = 0; s < 64; ++s) images.push_back(render_scene(SceneSpec{}, 70000 + s).image);
  float min_iou = 1.0f;
  std::size_t wrong_count = 0, outside = 0, repeated = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const ViewPair p = build_view_pair(images[i % images.size()], cfg, i);
    min_iou = std::min(min_iou, box_iou(p.rect1, p.rect2));
    wrong_count += p.proposals1.size() != 10 || p.proposals2.size() != 10;
    repeated += p.repeated_proposals;
    const BoxXYXY view{0, 0, static_cast<float>(cfg.view_size), static_cast<float>(cfg.view_size)};
    for (std::size_t k = 0; k < p.proposals1.size() && k < p.proposals2.size(); ++k) {
      outside += !contains(view, p.proposals1[k]) || !contains(view, p.proposals2[k]);
    }
  }
  Rng rng(99);
  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const BoxXYXY b = sample_base_rect(128, 128, rng);
    const double r = static_cast<double>(b.width()) * b.height() / (128.0 * 128.0);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  return {min_iou >= 0.5f && wrong_count == 0 && outside == 0 && lo >= 0.5 && hi <= 1.0,
          "10000 pairs: min rect IoU " + fmt(min_iou) + " (>= 0.5), pairs without 10+10 proposals " +
              std::to_string(wrong_count) + ", proposals outside view " + std::to_string(outside) +
              ", pairs with repeated proposals " + std::to_string(repeated) + "; base area ratio in [" + fmt(lo) + ", " +
              fmt(hi) + "]"};
}

// ---------------------------------------------------------------------------
// 5. Loss identities

Outcome loss_identities() {
  using D = BasicTensor<double>;
  double swap_err = 0, sum_err = 0, region_err = 0, detached_grad = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DetrModel<double> model(testing::tiny_config(), seed);
    auto batch = testing::tiny_batch(seed + 500, 3);
    Rng wr(seed);
    const LossWeights w{wr.uniform(0, 3), wr.uniform(0, 3), wr.uniform(0, 3)};
    const auto a = pretrain_loss(model, batch, w);
    for (auto& f : batch) {
      std::swap(f.features1, f.features2);
      std::swap(f.z1, f.z2);
      std::swap(f.target1, f.target2);
      std::swap(f.boxes1, f.boxes2);
    }
    const auto b = pretrain_loss(model, batch, w);
    swap_err = std::max(swap_err, std::abs(a.total.item() - b.total.item()));
    const double direct = w.region * a.region.item() + w.global * a.global.item() + w.loc * a.loc.item();
    sum_err = std::max(sum_err, std::abs(a.total.item() - direct));
    sum_err = std::max(sum_err, std::abs(total_loss(a.loc.item(), a.global.item(), a.region.item(), w).total - direct));

    Rng rng(seed + 77);
    D proj1 = testing::random_tensor({4, 8}, rng), pooled1 = testing::random_tensor({4, 8}, rng);
    D proj2 = testing::random_tensor({4, 8}, rng), pooled2 = testing::random_tensor({4, 8}, rng);
    for (D* t : {&proj1, &pooled1, &proj2, &pooled2}) t->set_requires_grad(true);
    // Only the projection branch may receive gradient; the pooled inputs
    // enter exclusively as detached targets.
    backward(global_disc_loss(proj1, pooled1, proj2, pooled2));
    for (const D* t : {&pooled1, &pooled2}) {
      for (double g : t->grad()) detached_grad = std::max(detached_grad, std::abs(g));
    }

    const D p = testing::random_tensor({1, 16}, rng), q = testing::random_tensor({1, 16}, rng);
    double dot = 0, np = 0, nq = 0;
    for (std::size_t k = 0; k < 16; ++k) {
      dot += p[k] * q[k];
      np += p[k] * p[k];
      nq += q[k] * q[k];
    }
    const double want = 2 - 2 * dot / std::sqrt(np * nq);
    region_err = std::max(region_err, std::abs(region_disc_direction(p, q, MatchAssignment{{0}, 0}).item() - want));
  }

  bool bitwise = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const DetrModel<float> model(TransformerConfig{}, seed);
    Rng rng(seed);
    std::vector<float> v(16 * 16 * 64);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    const auto ctx = model.encode(Tensor({16, 16, 64}, v));
    bitwise = bitwise && model.decode(ctx, Tensor::zeros({10, 64})).values() == model.decode(ctx, std::nullopt).values();
  }
  return {swap_err <= 1e-5 && sum_err <= 1e-6 && detached_grad == 0.0 && region_err <= 1e-6 && bitwise,
          "view-swap " + fmt(swap_err) + " (1e-5), weighted sum " + fmt(sum_err) + " (1e-6), detached-branch grad " +
              fmt(detached_grad) + " (0), region 2-2cos " + fmt(region_err) + " (1e-6), z=0 decode bitwise " +
              (bitwise ? "equal" : "DIFFERENT")};
}

// ---------------------------------------------------------------------------
// 6-8. Desk-scale experiments

std::vector<LabeledImage> synthetic_set(std::size_t n, std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  const std::uint64_t stream = mix_seed(seed);
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Scene s = render_scene(spec, item_seed(stream, i));
    LabeledImage li{image_file_name(i), s.image, {}, {}};
    for (const auto& o : s.objects) {
      li.boxes.push_back(o.box);
      li.labels.push_back(static_cast<int>(o.cls));
    }
    out.push_back(std::move(li));
  }
  return out;
}

constexpr std::uint64_t kPretrainDataSeed = 100;
constexpr std::uint64_t kTrainDataSeed = 200;
constexpr std::uint64_t kEvalDataSeed = 300;
constexpr std::size_t kPretrainImages = 2000;
constexpr std::size_t kLabeledImages = 200;
constexpr std::uint64_t kSeeds = 3;

class Experiments {
 public:
  explicit Experiments(fs::path work) : work_(std::move(work)) {}

  /// Pretrains (or reuses a finished run in the work directory with the
  /// same resolved config) and returns the final checkpoint.
  const Checkpoint& pretrained(const std::string& name, const RunConfig& cfg) {
    auto it = checkpoints_.find(name);
    if (it != checkpoints_.end()) return it->second;
    const fs::path dir = work_ / ("pretrain_" + name);
    const fs::path final_path = dir / "final.sdtr";
    if (fs::exists(final_path)) {
      Checkpoint ck = Checkpoint::load(final_path);
      if (ck.text("meta.config") == cfg.to_text() && Progress::from_text(ck.text("meta.progress")).epoch >= cfg.schedule.epochs) {
        std::clog << "[" << name << "] reusing finished pretraining run in " << dir << '\n';
        return checkpoints_.emplace(name, std::move(ck)).first->second;
      }
    }
    std::vector<Image> images;
    for (auto& li : synthetic_set(kPretrainImages, kPretrainDataSeed)) images.push_back(std::move(li.image));
    const auto t0 = Clock::now();
    Pretrainer trainer(cfg, std::move(images));
    const fs::path resume = latest_epoch(dir);
    if (!resume.empty()) {
      trainer.resume(Checkpoint::load(resume));
      std::clog << "[" << name << "] resuming from " << resume << '\n';
    }
    trainer.run(dir, [&](const StepRecord& r) {
      if (r.step % 250 == 0) {
        std::clog << "[" << name << "] step " << r.step << " epoch " << r.epoch << " loss " << r.loss.total << " ("
                  << fmt(seconds_since(t0), 4) << " s)\n";
      }
    });
    return checkpoints_.emplace(name, Checkpoint::load(final_path)).first->second;
  }

  /// AP50 per finetuning seed on the held-out set.
  std::vector<double> finetune_ap50(const std::string& name, const RunConfig& cfg, const Checkpoint* init) {
    auto it = ap50_.find(name);
    if (it != ap50_.end()) return it->second;
    std::vector<double> out;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Finetuner ft(cfg, train(), init, seed);
      ft.run();
      const auto report = evaluate_model(ft.model(), ft.backbone(), eval());
      std::clog << "[finetune " << name << " seed " << seed << "] AP " << fmt(report.ap) << " AP50 " << fmt(report.ap50)
                << " AR10 " << fmt(report.ar10) << '\n';
      out.push_back(report.ap50);
    }
    ap50_[name] = out;
    return out;
  }

  const std::vector<LabeledImage>& train() {
    if (train_.empty()) train_ = synthetic_set(kLabeledImages, kTrainDataSeed);
    return train_;
  }
  const std::vector<LabeledImage>& eval() {
    if (eval_.empty()) eval_ = synthetic_set(kLabeledImages, kEvalDataSeed);
    return eval_;
  }

 private:
  static fs::path latest_epoch(const fs::path& dir) {
    fs::path best;
    if (!fs::exists(dir)) return best;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".sdtr" && (best.empty() || e.path() > best)) {
        best = e.path();
      }
    }
    return best;
  }

  fs::path work_;
  std::map<std::string, Checkpoint> checkpoints_;
  std::map<std::string, std::vector<double>> ap50_;
  std::vector<LabeledImage> train_, eval_;
};

RunConfig full_config() { return RunConfig{}; }

RunConfig loc_only_config() {
  RunConfig cfg;
  cfg.loss.global = 0;
  cfg.loss.region = 0;
  return cfg;
}

RunConfig object_target_config() {
  RunConfig cfg;
  cfg.region_target = RegionTarget::kObject;
  return cfg;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s + "]";
}

Outcome pretraining_benefit(Experiments& ex) {
  const auto t0 = Clock::now();
  const RunConfig cfg = full_config();
  const Checkpoint& ck = ex.pretrained("full", cfg);
  const auto pre = ex.finetune_ap50("full", cfg, &ck);
  const auto scratch = ex.finetune_ap50("scratch", cfg, nullptr);
  const double gain = 100.0 * (mean(pre) - mean(scratch));
  return {gain >= 2.0, "AP50 pretrained " + list(pre) + " vs scratch " + list(scratch) + ", mean gain " + fmt(gain, 3) +
                           " points (need >= 2), " + fmt(seconds_since(t0), 4) + " s"};
}

Outcome probe(Experiments& ex) {
  const auto t0 = Clock::now();
  const RunConfig cfg = full_config();
  const Checkpoint& ck = ex.pretrained("full", cfg);
  std::size_t wins = 0;
  std::string rows;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto table = frozen_head_probe(cfg, ck, ex.train(), ex.eval(), seed);
    wins += table[0].ar10 > table[1].ar10;
    rows += " seed " + std::to_string(seed) + ": " + fmt(table[0].ar10) + " vs " + fmt(table[1].ar10) + ";";
  }
  return {wins == kSeeds, "AR@10 pretrained vs random:" + rows + " " + std::to_string(wins) + "/3 strictly greater, " +
                              fmt(seconds_since(t0), 4) + " s"};
}

Outcome ablation(Experiments& ex) {
  const auto t0 = Clock::now();
  const RunConfig full = full_config(), loc = loc_only_config(), object = object_target_config();
  const auto full_ap = ex.finetune_ap50("full", full, &ex.pretrained("full", full));
  const auto loc_ap = ex.finetune_ap50("loc_only", loc, &ex.pretrained("loc_only", loc));
  const auto obj_ap = ex.finetune_ap50("object_target", object, &ex.pretrained("object_target", object));
  return {mean(full_ap) >= mean(loc_ap),
          "mean AP50 full (loc+G+R-C) " + fmt(mean(full_ap)) + " vs loc-only " + fmt(mean(loc_ap)) +
              "; report only: R-O " + fmt(mean(obj_ap)) + " vs R-C " + fmt(mean(full_ap)) + ", " +
              fmt(seconds_since(t0), 4) + " s"};
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

Outcome reproducibility(const fs::path& work) {
  RunConfig cfg;
  cfg.max_steps = 50;
  std::vector<Image> images;
  for (auto& li : synthetic_set(64, 900)) images.push_back(std::move(li.image));

  Pretrainer a(cfg, images), b(cfg, images);
  std::vector<double> curve;
  while (auto r = a.step()) curve.push_back(r->loss.total);
  while (b.step()) {
  }
  const fs::path dir = work / "reproducibility";
  fs::create_directories(dir);
  a.checkpoint().save(dir / "a.sdtr");
  b.checkpoint().save(dir / "b.sdtr");
  const bool same_ckpt = read_file(dir / "a.sdtr") == read_file(dir / "b.sdtr");

  RunConfig head_cfg = cfg;
  head_cfg.max_steps = 20;
  Pretrainer head(head_cfg, images);
  std::vector<double> resumed;
  while (auto r = head.step()) resumed.push_back(r->loss.total);
  head.checkpoint().save(dir / "at20.sdtr");
  Pretrainer tail(cfg, images);
  tail.resume(Checkpoint::load(dir / "at20.sdtr"));
  while (auto r = tail.step()) resumed.push_back(r->loss.total);
  const bool same_curve = resumed == curve;
  const bool same_final = tail.checkpoint().encode() == a.checkpoint().encode();
  return {same_ckpt && same_curve && same_final,
          std::string("50-step checkpoints ") + (same_ckpt ? "identical" : "DIFFER") + "; resume at step 20: curve " +
              (same_curve ? "identical" : "DIFFERS") + ", final checkpoint " + (same_final ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = "acceptance_work";
  std::vector<int> selected;
  app.add_option("--work-dir", work, "scratch directory for experiment artifacts");
  app.add_option("--criteria", selected, "subset of criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::set<int> chosen = selected.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                                : std::set<int>(selected.begin(), selected.end());
  Experiments experiments(work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},
      {"Hungarian oracle", hungarian_oracle},
      {"geometry oracle", geometry_oracle},
      {"view-construction contract", view_contract},
      {"loss identities", loss_identities},
      {"pretraining benefit", [&] { return pretraining_benefit(experiments); }},
      {"frozen-head probe", [&] { return probe(experiments); }},
      {"ablation direction", [&] { return ablation(experiments); }},
      {"reproducibility", [&] { return reproducibility(work); }},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!chosen.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
