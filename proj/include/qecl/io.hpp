#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <openssl/evp.h>

#include "qecl/verify.hpp"

namespace qecl {

using Json = nlohmann::json;

// Locale-independent shortest-faithful formatting: 17 significant digits,
// '.' decimal separator.
inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

// RFC 4180 CSV: CRLF row endings, no quoting needed for numeric fields.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary) {
    if (!out_) throw Error("CsvWriter: cannot open '" + path + "'");
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << header[i];
    }
    out_ << "\r\n";
    width_ = header.size();
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw Error("CsvWriter: row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << "\r\n";
  }

  void close() { out_.close(); }

 private:
  std::ofstream out_;
  std::size_t width_ = 0;
};

inline Json matrix_to_json(const Matrix& mat) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < mat.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < mat.cols(); ++j) row.push_back(mat(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json vector_to_json(const Vector& v) {
  Json arr = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Matrix matrix_from_json(const Json& rows, const std::string& what) {
  if (!rows.is_array() || rows.empty() || !rows[0].is_array())
    throw Error(what + ": expected a matrix (array of arrays)");
  Matrix mat(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].is_array() || rows[i].size() != rows[0].size())
      throw Error(what + ": ragged matrix rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      mat(i, j) = rows[i][j].get<double>();
  }
  return mat;
}

inline Vector vector_from_json(const Json& arr, const std::string& what) {
  if (!arr.is_array()) throw Error(what + ": expected an array");
  Vector v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_json_file: cannot open '" + path + "'");
  out << j.dump(2) << "\n";
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_json_file: cannot open '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error("read_json_file: '" + path + "' is not valid JSON: " + e.what());
  }
  return j;
}

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &digest_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256_hex: digest failure");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * digest_len);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_string(const std::string& s) {
  return sha256_hex(s.data(), s.size());
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("sha256_file: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(data.data(), data.size());
}

// Checksums of every artifact in a run directory; written last, so its
// presence marks a completed run. Content-addressed: no timestamps.
inline void write_manifest(const std::filesystem::path& dir,
                           const std::vector<std::string>& files, const Json& meta) {
  Json manifest;
  manifest["version"] = version;
  manifest["meta"] = meta;
  Json arts = Json::object();
  for (const auto& name : files) {
    const auto path = dir / name;
    Json entry;
    entry["sha256"] = sha256_file(path.string());
    entry["bytes"] = static_cast<std::int64_t>(std::filesystem::file_size(path));
    arts[name] = std::move(entry);
  }
  manifest["artifacts"] = std::move(arts);
  write_json_file((dir / "manifest.json").string(), manifest);
}

inline std::vector<std::string> trajectory_header(Eigen::Index m) {
  std::vector<std::string> h;
  h.push_back("t");
  for (Eigen::Index i = 0; i < m; ++i) h.push_back("lambda_hat_" + std::to_string(i));
  for (Eigen::Index i = 0; i < m; ++i) h.push_back("a_hat_" + std::to_string(i));
  h.push_back("entropy");
  h.push_back("entropy_rate");
  h.push_back("matrix_kind");
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      h.push_back("mat_" + std::to_string(i) + "_" + std::to_string(j));
  return h;
}

inline void write_trajectory_csv(const std::string& path, const ClosureTrajectory& traj) {
  if (traj.states.empty()) throw Error("write_trajectory_csv: empty trajectory");
  const Eigen::Index m = traj.states.front().lambda_hat.size();
  CsvWriter csv(path, trajectory_header(m));
  std::vector<std::string> cells;
  for (const auto& st : traj.states) {
    cells.clear();
    cells.push_back(format_double(st.t));
    for (Eigen::Index i = 0; i < m; ++i) cells.push_back(format_double(st.lambda_hat[i]));
    for (Eigen::Index i = 0; i < m; ++i) cells.push_back(format_double(st.a_hat[i]));
    cells.push_back(format_double(st.entropy));
    cells.push_back(format_double(st.entropy_rate));
    const Matrix* mat = nullptr;
    if (st.M_hat) {
      cells.push_back("M");
      mat = &*st.M_hat;
    } else if (st.G_hat) {
      cells.push_back("G");
      mat = &*st.G_hat;
    } else {
      cells.push_back("none");
    }
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        cells.push_back(mat ? format_double((*mat)(i, j)) : "0");
    csv.row(cells);
  }
}

inline void write_resolved_csv(const std::string& path, const ResolvedRun& run) {
  const Eigen::Index m = run.a_exact.cols();
  std::vector<std::string> header;
  header.push_back("t");
  for (Eigen::Index i = 0; i < m; ++i) header.push_back("a_exact_" + std::to_string(i));
  for (Eigen::Index i = 0; i < m; ++i) header.push_back("std_error_" + std::to_string(i));
  CsvWriter csv(path, header);
  std::vector<std::string> cells;
  for (long j = 0; j < run.times.size(); ++j) {
    cells.clear();
    cells.push_back(format_double(run.times[j]));
    for (Eigen::Index i = 0; i < m; ++i) cells.push_back(format_double(run.a_exact(j, i)));
    for (Eigen::Index i = 0; i < m; ++i) cells.push_back(format_double(run.std_errors(j, i)));
    csv.row(cells);
  }
}

inline ResolvedRun read_resolved_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_resolved_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("read_resolved_csv: empty file");
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      const auto comma = s.find(',', pos);
      std::string cell = comma == std::string::npos ? s.substr(pos)
                                                    : s.substr(pos, comma - pos);
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == '\n')) cell.pop_back();
      cells.push_back(std::move(cell));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return cells;
  };
  const auto header = split(line);
  if (header.empty() || header[0] != "t")
    throw Error("read_resolved_csv: unexpected header in '" + path + "'");
  const long m = static_cast<long>((header.size() - 1) / 2);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (static_cast<long>(cells.size()) != 1 + 2 * m)
      throw Error("read_resolved_csv: ragged row in '" + path + "'");
    std::vector<double> vals(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) vals[i] = std::stod(cells[i]);
    rows.push_back(std::move(vals));
  }
  ResolvedRun run;
  run.times.resize(rows.size());
  run.a_exact.resize(rows.size(), m);
  run.std_errors.resize(rows.size(), m);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    run.times[r] = rows[r][0];
    for (long i = 0; i < m; ++i) {
      run.a_exact(r, i) = rows[r][1 + i];
      run.std_errors(r, i) = rows[r][1 + m + i];
    }
  }
  return run;
}

inline void write_hj_csv(const std::string& path, const HJSolution& sol) {
  CsvWriter csv(path, {"t", "minimizer", "curvature"});
  for (long j = 0; j < sol.times.size(); ++j)
    csv.row({format_double(sol.times[j]), format_double(sol.minimizer[j]),
             format_double(sol.curvature[j])});
}

// row_stride subsamples the time rows; the final row is always written.
inline void write_hj_surface_csv(const std::string& path, const HJSolution& sol,
                                 long row_stride = 1) {
  if (row_stride < 1) row_stride = 1;
  std::vector<std::string> header;
  header.push_back("t");
  for (long j = 0; j < sol.lambdas.size(); ++j)
    header.push_back("v_" + std::to_string(j));
  CsvWriter csv(path, header);
  std::vector<std::string> cells;
  const long last = sol.times.size() - 1;
  for (long r = 0; r <= last; r += row_stride) {
    const long row = std::min(r, last);
    cells.clear();
    cells.push_back(format_double(sol.times[row]));
    for (long j = 0; j < sol.lambdas.size(); ++j)
      cells.push_back(format_double(sol.surface(row, j)));
    csv.row(cells);
    if (row < last && row + row_stride > last) {
      cells.clear();
      cells.push_back(format_double(sol.times[last]));
      for (long j = 0; j < sol.lambdas.size(); ++j)
        cells.push_back(format_double(sol.surface(last, j)));
      csv.row(cells);
    }
  }
}

}  // namespace qecl
