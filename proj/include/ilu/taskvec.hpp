#pragma once

// Parameter-space directions between checkpoints and the 2D plane spanned by
// an unlearning and a fine-tuning direction.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "ilu/error.hpp"
#include "ilu/models.hpp"
#include "ilu/numcore.hpp"

namespace ilu {

struct TaskVector {
  std::vector<double> values;  // canonical parameter order
  std::string source_id;
  std::string target_id;
  double norm = 0.0;
};

/// target - source.
inline TaskVector task_vector(const ParameterVector& target, const ParameterVector& source,
                              std::string target_id = "target", std::string source_id = "source") {
  if (!target.same_layout(source)) throw ArgumentError("task vector between different model configs");
  TaskVector t;
  t.source_id = std::move(source_id);
  t.target_id = std::move(target_id);
  auto a = target.values();
  auto b = source.values();
  t.values.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) t.values[i] = a[i] - b[i];
  t.norm = norm2(t.values);
  return t;
}

inline TaskVector make_task_vector(std::vector<double> values, std::string target_id = "target",
                                   std::string source_id = "source") {
  TaskVector t{std::move(values), std::move(source_id), std::move(target_id), 0.0};
  t.norm = norm2(t.values);
  return t;
}

inline double cosine(const TaskVector& a, const TaskVector& b) {
  if (a.values.size() != b.values.size()) throw ArgumentError("task vectors differ in length");
  if (a.norm == 0.0 || b.norm == 0.0) {
    throw ArgumentError("cosine of a zero-norm task vector (" +
                        (a.norm == 0.0 ? a.target_id : b.target_id) + ") is undefined");
  }
  return std::clamp(dot(a.values, b.values) / (a.norm * b.norm), -1.0, 1.0);
}

struct PlanePoint {
  std::string id;
  double x = 0.0;
  double y = 0.0;
};

struct Projection {
  std::vector<PlanePoint> points;  // basis_u, basis_ft, then others
  double basis_cosine = 0.0;
};

/// Orthonormal plane e1 = u / |u|, e2 = Gram-Schmidt of ft against e1.
inline Projection project_2d(const TaskVector& basis_u, const TaskVector& basis_ft,
                             const std::vector<TaskVector>& others) {
  const double c = cosine(basis_u, basis_ft);
  if (std::abs(c) >= 1.0 - 1e-9) throw DegenerateBasisError("projection basis vectors are collinear");
  const std::size_t n = basis_u.values.size();
  std::vector<double> e1(n), e2(n);
  for (std::size_t i = 0; i < n; ++i) e1[i] = basis_u.values[i] / basis_u.norm;
  const double along = dot(basis_ft.values, e1);
  for (std::size_t i = 0; i < n; ++i) e2[i] = basis_ft.values[i] - along * e1[i];
  const double n2 = norm2(e2);
  for (double& v : e2) v /= n2;
  Projection p;
  p.basis_cosine = c;
  p.points.push_back({basis_u.target_id, basis_u.norm, 0.0});
  p.points.push_back({basis_ft.target_id, along, dot(basis_ft.values, e2)});
  for (const auto& v : others) {
    if (v.values.size() != n) throw ArgumentError("task vectors differ in length");
    p.points.push_back({v.target_id, dot(v.values, e1), dot(v.values, e2)});
  }
  return p;
}

/// Square CSV of pairwise cosines; undefined entries (zero norm) are empty.
inline void write_cosine_csv(const std::filesystem::path& path, const std::vector<TaskVector>& vs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "vector";
  for (const auto& v : vs) out << ',' << v.target_id;
  out << '\n';
  for (const auto& a : vs) {
    out << a.target_id;
    for (const auto& b : vs) {
      out << ',';
      if (a.norm > 0.0 && b.norm > 0.0) out << fmt::format("{:.17g}", cosine(a, b));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_projection_csv(const std::filesystem::path& path, const Projection& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# basis: gram-schmidt(e1=unlearn, e2=finetune), basis_cosine="
      << fmt::format("{:.17g}", p.basis_cosine) << '\n';
  out << "vector,x,y\n";
  for (const auto& q : p.points) out << fmt::format("{},{:.17g},{:.17g}\n", q.id, q.x, q.y);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ilu
