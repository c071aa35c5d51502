#ifndef PDEN_EVALUATE_HPP
#define PDEN_EVALUATE_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pden/dataset.hpp"
#include "pden/losses.hpp"
#include "pden/models.hpp"

namespace pden {

inline constexpr std::size_t kEvalChunk = 128;

struct MetricsRecord {
  std::string domain;
  double accuracy = 0.0;  // correct / n
  std::size_t correct = 0;
  std::size_t n = 0;
  std::string model_id;
  std::string config_hash;
};

/// Runs `fn(first_index, chunk_images)` over the dataset in fixed-size
/// chunks without recording a tape.
template <class F>
void for_each_chunk(const DomainDataset& ds, F&& fn, std::size_t chunk = kEvalChunk) {
  for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
    const std::size_t end = std::min(ds.size(), begin + chunk);
    fn(begin, Var::constant(slice_rows(ds.images, begin, end)));
  }
}

inline std::vector<std::size_t> predict(const TaskModel& model, const DomainDataset& ds) {
  std::vector<std::size_t> out;
  out.reserve(ds.size());
  for_each_chunk(ds, [&](std::size_t, const Var& x) {
    Var yhat = model.classify(model.extract(x));
    const std::size_t m = yhat.dim(1);
    for (std::size_t i = 0; i < yhat.dim(0); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j)
        if (yhat.value()[i * m + j] > yhat.value()[i * m + best]) best = j;
      out.push_back(best);
    }
  });
  return out;
}

/// Argmax accuracy of the classifier head.
inline MetricsRecord evaluate(const TaskModel& model, const DomainDataset& ds) {
  if (ds.empty()) throw FormatError("evaluate: dataset '" + ds.name + "' is empty");
  const auto pred = predict(model, ds);
  MetricsRecord r;
  r.domain = ds.name;
  r.n = ds.size();
  for (std::size_t i = 0; i < pred.size(); ++i) r.correct += pred[i] == ds.labels[i];
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n);
  return r;
}

/// Mean absolute per-pixel difference between two image tensors.
inline double mean_pixel_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mean_pixel_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace pden

#endif  // PDEN_EVALUATE_HPP
