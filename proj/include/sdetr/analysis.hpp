// Inference-side helpers: detections and metrics on a labeled set, the
// frozen-head probe table, and decoder attention export.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sdetr/backbone.hpp"
#include "sdetr/checkpoint.hpp"
#include "sdetr/metrics.hpp"
#include "sdetr/synthetic_data.hpp"
#include "sdetr/training.hpp"
#include "sdetr/transformer.hpp"

namespace sdetr {

/// One detection per query: the most probable foreground class, scored by
/// its softmax probability.
inline std::vector<Detection> detect(const DetrModel<float>& model, const FrozenBackbone& backbone, const Image& image,
                                     std::size_t image_id) {
  NoGradGuard guard;
  const auto q = model.decode(model.encode(backbone.extract(image)), std::nullopt);
  const auto logits = model.classify(q);
  const auto boxes = model.predict_boxes(q);
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  const auto probs = softmax(logits, 1);
  std::vector<Detection> out;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    for (std::size_t c = 1; c + 1 < classes; ++c) {
      if (probs[j * classes + c] > probs[j * classes + best]) best = c;
    }
    const BoxCxCyWH b{boxes[4 * j], boxes[4 * j + 1], boxes[4 * j + 2], boxes[4 * j + 3]};
    Detection d;
    d.image_id = image_id;
    d.box = to_xyxy(b, static_cast<float>(image.width), static_cast<float>(image.height)).box;
    d.cls = static_cast<int>(best);
    d.score = probs[j * classes + best];
    out.push_back(d);
  }
  return out;
}

inline MetricReport evaluate_model(const DetrModel<float>& model, const FrozenBackbone& backbone,
                                   const std::vector<LabeledImage>& data) {
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto d = detect(model, backbone, data[i].image, i);
    dets.insert(dets.end(), d.begin(), d.end());
    for (std::size_t k = 0; k < data[i].boxes.size(); ++k) gts.push_back({i, data[i].boxes[k], data[i].labels[k]});
  }
  return evaluate_detections(dets, gts);
}

struct ProbeRow {
  std::string init;
  double ar1 = 0, ar10 = 0;
};

/// Two-row AR@1/AR@10 table as CSV.
inline std::string format_probe_table(const std::vector<ProbeRow>& rows) {
  std::ostringstream os;
  os << "init,ar1,ar10\n" << std::setprecision(6);
  for (const auto& r : rows) os << r.init << ',' << r.ar1 << ',' << r.ar10 << '\n';
  return os.str();
}

/// Head-only finetuning from `pretrained` and from random init with the same
/// seed and schedule, then AR@K on `eval`.
inline std::vector<ProbeRow> frozen_head_probe(RunConfig cfg, const Checkpoint& pretrained,
                                               const std::vector<LabeledImage>& train,
                                               const std::vector<LabeledImage>& eval, std::uint64_t seed) {
  cfg.heads_only = true;
  std::vector<ProbeRow> rows;
  for (const bool use_checkpoint : {true, false}) {
    Finetuner ft(cfg, train, use_checkpoint ? &pretrained : nullptr, seed);
    ft.run();
    const auto report = evaluate_model(ft.model(), ft.backbone(), eval);
    rows.push_back({use_checkpoint ? "pretrained" : "random", report.ar1, report.ar10});
  }
  return rows;
}

/// Min-max normalization to 8 bit; a constant map becomes mid-gray.
inline std::vector<std::uint8_t> normalize_to_gray(const std::vector<float>& values) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::vector<std::uint8_t> out(values.size(), 128);
  if (values.empty() || !(*hi - *lo > 1e-12f)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / (*hi - *lo)));
  }
  return out;
}

struct AttentionExport {
  std::vector<std::filesystem::path> maps;
  std::filesystem::path boxes;
  AttentionMap<float> attention;
};

/// Final-layer decoder cross-attention (head-averaged) for every query,
/// written as query_NN.pgm (H₁×W₁) plus boxes.txt with
/// `query_index cx cy w h k_hat` lines.
inline AttentionExport export_attention(const DetrModel<float>& model, const FrozenBackbone& backbone,
                                        const Image& image, const std::filesystem::path& out_dir) {
  NoGradGuard guard;
  const auto features = backbone.extract(image);
  const auto ctx = model.encode(features);
  AttentionExport out;
  const auto q = model.decode(ctx, std::nullopt, &out.attention);
  const auto pred = model.predict(q);
  std::filesystem::create_directories(out_dir);
  const std::size_t keys = out.attention.keys;
  for (std::size_t j = 0; j < out.attention.queries; ++j) {
    std::vector<float> row(out.attention.weights.begin() + static_cast<std::ptrdiff_t>(j * keys),
                           out.attention.weights.begin() + static_cast<std::ptrdiff_t>((j + 1) * keys));
    std::ostringstream name;
    name << "query_" << std::setw(2) << std::setfill('0') << j << ".pgm";
    const auto path = out_dir / name.str();
    write_file(path, encode_pgm(static_cast<int>(ctx.width), static_cast<int>(ctx.height), normalize_to_gray(row)));
    out.maps.push_back(path);
  }
  std::ostringstream boxes;
  boxes << std::setprecision(6);
  for (std::size_t j = 0; j < q.dim(0); ++j) {
    boxes << j;
    for (int k = 0; k < 4; ++k) boxes << ' ' << pred.boxes[4 * j + static_cast<std::size_t>(k)];
    boxes << ' ' << pred.match[j] << '\n';
  }
  out.boxes = out_dir / "boxes.txt";
  write_file(out.boxes, boxes.str());
  return out;
}

}  // namespace sdetr
