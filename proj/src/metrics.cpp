#include "smagnet/metrics.hpp"

#include <stdexcept>
#include <string>

namespace smagnet::eval {

namespace {

ConfusionCounts count(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                      const std::uint8_t* mask) {
  if (pred.size() != label.size())
    throw std::invalid_argument("confusion: prediction has " + std::to_string(pred.size()) + " pixels, label " +
                                std::to_string(label.size()));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], l = label[i];
    if (p > 1 || l > 1) throw std::invalid_argument("confusion: non-binary value at pixel " + std::to_string(i));
    if (mask && !mask[i]) continue;
    if (p) {
      l ? ++c.tp : ++c.fp;
    } else {
      l ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label) {
  return count(pred, label, nullptr);
}

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                          std::span<const std::uint8_t> mask) {
  if (mask.size() != pred.size()) throw std::invalid_argument("confusion: mask size mismatch");
  return count(pred, label, mask.data());
}

MetricReport metrics(const ConfusionCounts& c) {
  MetricReport m;
  m.oa = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  return m;
}

void to_json(nlohmann::json& j, const ConfusionCounts& c) {
  j = nlohmann::json{{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

void to_json(nlohmann::json& j, const MetricReport& m) {
  j = nlohmann::json{{"oa", m.oa}, {"precision", m.precision}, {"recall", m.recall}, {"iou", m.iou}};
}

}  // namespace smagnet::eval
