#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>

namespace smagnet::eval {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// Both inputs must be exactly 0/1 and equally long. The masked variant
// counts only pixels where mask is nonzero.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label);
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                          std::span<const std::uint8_t> mask);

struct MetricReport {
  double oa = 1, precision = 1, recall = 1, iou = 1;
};

// Zero denominators yield 1 (an empty union counts as a perfect match).
MetricReport metrics(const ConfusionCounts& c);

void to_json(nlohmann::json& j, const ConfusionCounts& c);
void to_json(nlohmann::json& j, const MetricReport& m);

}  // namespace smagnet::eval
