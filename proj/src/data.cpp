#include "fedoptima/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "fedoptima/wire.hpp"

namespace fedoptima {

void Dataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset is empty");
  if (features.rank() < 1 || features.dim(0) != labels.size()) {
    throw std::invalid_argument("feature rows do not match label count");
  }
  for (auto label : labels) {
    if (label >= class_count) throw std::invalid_argument("label exceeds class count");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.class_count = class_count;
  const std::size_t stride = features.row_size();
  Shape shape = features.shape();
  shape[0] = indices.size();
  std::vector<float> data;
  data.reserve(indices.size() * stride);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= labels.size()) throw std::out_of_range("subset index out of range");
    const auto row = features.data().subspan(i * stride, stride);
    data.insert(data.end(), row.begin(), row.end());
    out.labels.push_back(labels[i]);
  }
  out.features = Tensor(std::move(shape), std::move(data));
  return out;
}

Dataset Dataset::reshaped(const Shape& sample_shape) const {
  Shape shape{labels.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Dataset out = *this;
  out.features = features.reshaped(std::move(shape));
  return out;
}

TrainValidation gen_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, std::size_t dim,
                          double spread) {
  if (classes < 2 || dim < 2) throw std::invalid_argument("blobs need at least 2 classes and 2 dimensions");
  if (n_per_class < 1) throw std::invalid_argument("blobs need at least one sample per class");
  if (!(spread >= 0.0)) throw std::invalid_argument("spread must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  // Class c sits on axis (c mod dim); adjacent classes are one unit apart.
  auto mean = [&](std::size_t c, std::size_t j) {
    if (j != c % dim) return 0.0;
    return (1.0 + static_cast<double>(c / dim)) / std::sqrt(2.0);
  };

  std::vector<std::vector<float>> rows;
  std::vector<std::uint32_t> labels;
  rows.reserve(n_per_class * classes);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t n = 0; n < n_per_class; ++n) {
      std::vector<float> row(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        row[j] = static_cast<float>(mean(c, j) + spread * noise(rng));
      }
      rows.push_back(std::move(row));
      labels.push_back(static_cast<std::uint32_t>(c));
    }
  }

  // Stratified 80/20 split, then shuffle each side.
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  const std::size_t train_per_class = n_per_class * 4 / 5;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx(n_per_class);
    std::iota(idx.begin(), idx.end(), c * n_per_class);
    std::shuffle(idx.begin(), idx.end(), rng);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(train_per_class));
    val_idx.insert(val_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(train_per_class), idx.end());
  }
  std::shuffle(train_idx.begin(), train_idx.end(), rng);
  std::shuffle(val_idx.begin(), val_idx.end(), rng);

  auto build = [&](const std::vector<std::size_t>& idx) {
    Dataset d;
    d.class_count = classes;
    std::vector<float> data;
    data.reserve(idx.size() * dim);
    for (std::size_t i : idx) {
      data.insert(data.end(), rows[i].begin(), rows[i].end());
      d.labels.push_back(labels[i]);
    }
    d.features = Tensor({idx.size(), dim}, std::move(data));
    return d;
  };
  return {build(train_idx), build(val_idx)};
}

std::vector<std::vector<std::size_t>> PartitionPlan::indices_per_device() const {
  std::vector<std::vector<std::size_t>> out(devices);
  for (std::size_t i = 0; i < assignment.size(); ++i) out.at(assignment[i]).push_back(i);
  return out;
}

std::vector<std::vector<std::size_t>> PartitionPlan::class_histograms(std::span<const std::uint32_t> labels) const {
  std::vector<std::vector<std::size_t>> hist(devices, std::vector<std::size_t>(class_count, 0));
  for (std::size_t i = 0; i < assignment.size(); ++i) ++hist.at(assignment[i]).at(labels[i]);
  return hist;
}

PartitionPlan dirichlet_partition(std::span<const std::uint32_t> labels, std::size_t devices, double concentration,
                                  std::uint64_t seed) {
  if (devices < 1) throw std::invalid_argument("need at least one device");
  if (!(concentration > 0.0)) throw std::invalid_argument("concentration must be positive");
  if (devices > labels.size()) throw std::invalid_argument("more devices than samples");

  PartitionPlan plan;
  plan.devices = devices;
  plan.class_count = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  plan.assignment.assign(labels.size(), 0);
  const std::size_t classes = plan.class_count;

  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> proportions(devices, std::vector<double>(classes));
  for (auto& p : proportions) {
    double total = 0.0;
    for (auto& v : p) total += (v = gamma(rng));
    if (total > 0.0) {
      for (auto& v : p) v /= total;
    } else {
      // Every draw underflowed; fall back to a single random class.
      p[static_cast<std::size_t>(unit(rng) * static_cast<double>(classes)) % classes] = 1.0;
    }
  }

  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) pools[labels[i]].push_back(i);

  std::size_t remaining = labels.size();
  std::size_t device = 0;
  while (remaining > 0) {
    const auto& p = proportions[device];
    double mass = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (!pools[c].empty()) {
        mass += p[c];
      }
    }
    std::size_t chosen = classes;
    if (mass > 0.0) {
      double u = unit(rng) * mass;
      for (std::size_t c = 0; c < classes; ++c) {
        if (pools[c].empty()) continue;
        chosen = c;
        if (u < p[c]) break;
        u -= p[c];
      }
    } else {
      // The device's classes are exhausted; pick uniformly among the rest.
      std::vector<std::size_t> open;
      for (std::size_t c = 0; c < classes; ++c) {
        if (!pools[c].empty()) open.push_back(c);
      }
      chosen = open[static_cast<std::size_t>(unit(rng) * static_cast<double>(open.size())) % open.size()];
    }
    auto& pool = pools[chosen];
    const auto j = static_cast<std::size_t>(unit(rng) * static_cast<double>(pool.size())) % pool.size();
    plan.assignment[pool[j]] = static_cast<std::uint32_t>(device);
    pool[j] = pool.back();
    pool.pop_back();
    --remaining;
    device = (device + 1) % devices;
  }

  // Every device needs at least one sample; take from the largest shard.
  std::vector<std::size_t> counts(devices, 0);
  for (auto a : plan.assignment) ++counts[a];
  for (std::size_t d = 0; d < devices; ++d) {
    if (counts[d] > 0) continue;
    const auto largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    for (auto& a : plan.assignment) {
      if (a == largest) {
        a = static_cast<std::uint32_t>(d);
        --counts[largest];
        ++counts[d];
        break;
      }
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Files

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_uint(std::span<const std::uint8_t> in, std::size_t& off, int width) {
  if (off + static_cast<std::size_t>(width) > in.size()) throw std::runtime_error("truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(in[off + static_cast<std::size_t>(i)]) << (8 * i);
  off += static_cast<std::size_t>(width);
  return v;
}

Bytes slurp(std::istream& in) {
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void expect_magic(std::span<const std::uint8_t> in, const char* magic) {
  if (in.size() < 4 || std::memcmp(in.data(), magic, 4) != 0) throw std::runtime_error("bad file magic");
}

}  // namespace

void save_dataset(std::ostream& out, const Dataset& data) {
  Bytes bytes{'F', 'O', 'D', '1'};
  put_u32(bytes, static_cast<std::uint32_t>(data.class_count));
  append_tensor(bytes, data.features);
  put_u64(bytes, data.labels.size());
  for (auto l : data.labels) put_u32(bytes, l);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset load_dataset(std::istream& in) {
  const Bytes bytes = slurp(in);
  expect_magic(bytes, "FOD1");
  std::size_t off = 4;
  Dataset d;
  d.class_count = get_uint(bytes, off, 4);
  d.features = read_tensor(bytes, off);
  const std::uint64_t n = get_uint(bytes, off, 8);
  if (n > (bytes.size() - off) / 4) throw std::runtime_error("truncated label block");
  d.labels.resize(n);
  for (auto& l : d.labels) l = static_cast<std::uint32_t>(get_uint(bytes, off, 4));
  d.validate();
  return d;
}

void save_partition(std::ostream& out, const PartitionPlan& plan) {
  Bytes bytes{'F', 'O', 'P', '1'};
  put_u32(bytes, static_cast<std::uint32_t>(plan.devices));
  put_u32(bytes, static_cast<std::uint32_t>(plan.class_count));
  put_u64(bytes, plan.assignment.size());
  for (auto a : plan.assignment) put_u32(bytes, a);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

PartitionPlan load_partition(std::istream& in) {
  const Bytes bytes = slurp(in);
  expect_magic(bytes, "FOP1");
  std::size_t off = 4;
  PartitionPlan plan;
  plan.devices = get_uint(bytes, off, 4);
  plan.class_count = get_uint(bytes, off, 4);
  const std::uint64_t n = get_uint(bytes, off, 8);
  if (n > (bytes.size() - off) / 4) throw std::runtime_error("truncated assignment block");
  plan.assignment.resize(n);
  for (auto& a : plan.assignment) {
    a = static_cast<std::uint32_t>(get_uint(bytes, off, 4));
    if (a >= plan.devices) throw std::runtime_error("assignment refers to unknown device");
  }
  return plan;
}

}  // namespace fedoptima
