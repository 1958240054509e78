#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sltgnn {

/// Dense row-major matrix of 32-bit reals.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, float fill = 0.0f)
      : rows(r), cols(c), data(r * c, fill) {}

  std::size_t size() const { return data.size(); }
  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool same_shape(const DenseMatrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
  bool operator==(const DenseMatrix& o) const = default;
};

/// Compressed sparse row matrix of 32-bit reals.
/// row_offsets has num_rows+1 entries; column indices are strictly
/// increasing within each row.
struct CsrMatrix {
  std::size_t num_rows = 0;
  std::size_t num_cols = 0;
  std::vector<std::uint32_t> row_offsets;  // length num_rows + 1
  std::vector<std::uint32_t> col_indices;
  std::vector<float> values;

  std::size_t nnz() const { return col_indices.size(); }

  static CsrMatrix identity(std::size_t n) {
    CsrMatrix m;
    m.num_rows = m.num_cols = n;
    m.row_offsets.resize(n + 1);
    m.col_indices.resize(n);
    m.values.assign(n, 1.0f);
    for (std::size_t i = 0; i < n; ++i) {
      m.row_offsets[i] = static_cast<std::uint32_t>(i);
      m.col_indices[i] = static_cast<std::uint32_t>(i);
    }
    m.row_offsets[n] = static_cast<std::uint32_t>(n);
    return m;
  }
};

/// Worker threads used by the row-parallel kernels. Defaults to 1 so a
/// single run is sequential; per-row accumulation order is fixed either
/// way, so results do not depend on this setting.
inline std::atomic<unsigned>& kernel_threads() {
  static std::atomic<unsigned> n{1};
  return n;
}

namespace detail {

template <typename Fn>
void parallel_rows(std::size_t num_rows, Fn&& fn) {
  unsigned threads = kernel_threads().load();
  if (threads <= 1 || num_rows < 64) {
    for (std::size_t r = 0; r < num_rows; ++r) fn(r);
    return;
  }
  threads = std::min<unsigned>(threads, static_cast<unsigned>(num_rows));
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::size_t chunk = (num_rows + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    std::size_t lo = t * chunk;
    std::size_t hi = std::min(num_rows, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t r = lo; r < hi; ++r) fn(r);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Sparse x dense product. Accumulation runs left to right over each CSR
/// row (double accumulators), so the result is bit-identical regardless
/// of the thread count.
inline DenseMatrix spmm(const CsrMatrix& a, const DenseMatrix& x) {
  if (a.num_cols != x.rows)
    throw std::invalid_argument("spmm: inner dimensions differ (" +
                                std::to_string(a.num_cols) + " vs " +
                                std::to_string(x.rows) + ")");
  DenseMatrix y(a.num_rows, x.cols);
  detail::parallel_rows(a.num_rows, [&](std::size_t r) {
    std::vector<double> acc(x.cols, 0.0);
    for (std::uint32_t p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p) {
      double v = a.values[p];
      const float* xr = x.data.data() + std::size_t(a.col_indices[p]) * x.cols;
      for (std::size_t c = 0; c < x.cols; ++c) acc[c] += v * xr[c];
    }
    float* yr = y.data.data() + r * y.cols;
    for (std::size_t c = 0; c < x.cols; ++c) yr[c] = static_cast<float>(acc[c]);
  });
  return y;
}

/// Dense x dense product, row-major, fixed inner-loop order.
inline DenseMatrix dense_matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("dense_matmul: inner dimensions differ (" +
                                std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows) + ")");
  DenseMatrix y(a.rows, b.cols);
  detail::parallel_rows(a.rows, [&](std::size_t r) {
    std::vector<double> acc(b.cols, 0.0);
    const float* ar = a.data.data() + r * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      double av = ar[k];
      if (av == 0.0) continue;
      const float* br = b.data.data() + k * b.cols;
      for (std::size_t c = 0; c < b.cols; ++c) acc[c] += av * br[c];
    }
    float* yr = y.data.data() + r * y.cols;
    for (std::size_t c = 0; c < b.cols; ++c) yr[c] = static_cast<float>(acc[c]);
  });
  return y;
}

/// Dense x sparse product (y = h * w with w in CSR). Contributions to an
/// output element arrive in ascending k order, so the result is
/// deterministic.
inline DenseMatrix dense_times_csr(const DenseMatrix& h, const CsrMatrix& w) {
  if (h.cols != w.num_rows)
    throw std::invalid_argument("dense_times_csr: inner dimensions differ (" +
                                std::to_string(h.cols) + " vs " +
                                std::to_string(w.num_rows) + ")");
  DenseMatrix y(h.rows, w.num_cols);
  detail::parallel_rows(h.rows, [&](std::size_t r) {
    std::vector<double> acc(w.num_cols, 0.0);
    const float* hr = h.data.data() + r * h.cols;
    for (std::size_t k = 0; k < h.cols; ++k) {
      double hv = hr[k];
      if (hv == 0.0) continue;
      for (std::uint32_t p = w.row_offsets[k]; p < w.row_offsets[k + 1]; ++p)
        acc[w.col_indices[p]] += hv * double(w.values[p]);
    }
    float* yr = y.data.data() + r * y.cols;
    for (std::size_t c = 0; c < w.num_cols; ++c)
      yr[c] = static_cast<float>(acc[c]);
  });
  return y;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols, a.rows);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) t.at(c, r) = a.at(r, c);
  return t;
}

}  // namespace sltgnn
