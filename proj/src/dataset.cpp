#include "panelglmm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      fields.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataContractError("line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(was_quoted ? cur : trim(cur));
  return fields;
}

std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.data() + (s[0] == '+' ? 1 : 0);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<long long> parse_integer(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.data() + (s[0] == '+' ? 1 : 0);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string cell_name(const std::string& id, long long time) {
  return "(id=" + id + ", time=" + std::to_string(time) + ")";
}

struct Record {
  long long time = 0;
  double y = 0.0;
  std::vector<double> features;
};

}  // namespace

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

PanelDataset read_panel_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (!trim(line).empty()) {
      header = split_record(line, line_no);
      break;
    }
  }
  if (header.empty()) throw DataContractError("CSV is empty; a header row is required");

  int id_col = -1;
  int time_col = -1;
  int y_col = -1;
  std::vector<int> feature_cols;
  PanelDataset data;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string& h = header[j];
    if (h.empty()) throw DataContractError("header column " + std::to_string(j + 1) + " has no name");
    for (std::size_t k = 0; k < j; ++k) {
      if (header[k] == h) throw DataContractError("duplicate header column '" + h + "'");
    }
    if (h == "id") {
      id_col = static_cast<int>(j);
    } else if (h == "time") {
      time_col = static_cast<int>(j);
    } else if (h == "y") {
      y_col = static_cast<int>(j);
    } else {
      feature_cols.push_back(static_cast<int>(j));
      data.feature_names.push_back(h);
    }
  }
  for (const auto& [col, name] : {std::pair{id_col, "id"}, {time_col, "time"}, {y_col, "y"}}) {
    if (col < 0) throw DataContractError(std::string("missing required column '") + name + "'");
  }

  std::map<std::string, std::map<long long, Record>> cells;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = split_record(line, line_no);
    const std::string where = "line " + std::to_string(line_no);
    if (f.size() != header.size()) {
      throw DataContractError(where + ": expected " + std::to_string(header.size()) +
                              " fields, found " + std::to_string(f.size()));
    }
    const std::string& id = f[static_cast<std::size_t>(id_col)];
    if (id.empty()) throw DataContractError(where + ": missing id");
    const auto time = parse_integer(f[static_cast<std::size_t>(time_col)]);
    if (!time || *time < 1) {
      throw DataContractError(where + ": time '" + f[static_cast<std::size_t>(time_col)] +
                              "' for id " + id + " is not an integer >= 1");
    }
    const std::string at = where + " " + cell_name(id, *time);
    Record rec;
    rec.time = *time;
    const auto value = [&](int col, const std::string& name) {
      const std::string& text = f[static_cast<std::size_t>(col)];
      const auto v = parse_double(text);
      if (!v) throw DataContractError(at + ": missing or non-numeric " + name + " '" + text + "'");
      if (!std::isfinite(*v)) throw DataContractError(at + ": non-finite " + name);
      return *v;
    };
    rec.y = value(y_col, "y");
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      rec.features.push_back(value(feature_cols[j], "feature '" + data.feature_names[j] + "'"));
    }
    auto& times = cells[id];
    if (!times.emplace(*time, std::move(rec)).second) {
      throw DataContractError("duplicate cell " + cell_name(id, *time) + " at " + where);
    }
  }
  if (cells.empty()) throw DataContractError("CSV has a header but no data rows");

  std::vector<std::string> ids;
  bool all_integer = true;
  for (const auto& [id, times] : cells) {
    ids.push_back(id);
    all_integer = all_integer && parse_integer(id).has_value();
  }
  if (all_integer) {
    std::stable_sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
      return *parse_integer(a) < *parse_integer(b);
    });
    for (std::size_t k = 1; k < ids.size(); ++k) {
      if (*parse_integer(ids[k]) == *parse_integer(ids[k - 1])) {
        throw DataContractError("ids '" + ids[k - 1] + "' and '" + ids[k] +
                                "' denote the same individual");
      }
    }
  }

  long long T = 0;
  for (const auto& [id, times] : cells) T = std::max(T, times.rbegin()->first);
  for (const std::string& id : ids) {
    const auto& times = cells.at(id);
    for (long long t = 1; t <= T; ++t) {
      if (!times.count(t)) {
        throw DataContractError("unbalanced panel: missing cell " + cell_name(id, t) +
                                " (every id needs times 1.." + std::to_string(T) + ")");
      }
    }
  }

  const Index N = static_cast<Index>(ids.size());
  const Index p = static_cast<Index>(feature_cols.size());
  if (N < 2 || T < 2) {
    throw DataContractError("a panel needs at least 2 ids and 2 times, found " + std::to_string(N) +
                            " ids and " + std::to_string(T) + " times");
  }
  data.layout = PanelLayout(N, static_cast<Index>(T));
  data.ids = ids;
  data.y.resize(N * T);
  data.X.resize(N * T, p);
  for (Index i = 0; i < N; ++i) {
    const auto& times = cells.at(ids[static_cast<std::size_t>(i)]);
    for (Index t = 0; t < T; ++t) {
      const Record& rec = times.at(t + 1);
      const Index row = data.layout.row(i, t);
      data.y(row) = rec.y;
      for (Index j = 0; j < p; ++j) data.X(row, j) = rec.features[static_cast<std::size_t>(j)];
    }
  }
  return data;
}

PanelDataset read_panel_csv_text(const std::string& text) {
  std::istringstream in(text);
  return read_panel_csv(in);
}

void write_panel_csv(std::ostream& out, const PanelDataset& data) {
  const auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  out << "id,time,y";
  for (const auto& name : data.feature_names) out << ',' << quote(name);
  out << '\n';
  const PanelLayout& layout = data.layout;
  for (Index i = 0; i < layout.n_individuals(); ++i) {
    for (Index t = 0; t < layout.n_times(); ++t) {
      const Index row = layout.row(i, t);
      out << quote(data.ids[static_cast<std::size_t>(i)]) << ',' << (t + 1) << ','
          << format_double(data.y(row));
      for (Index j = 0; j < data.X.cols(); ++j) out << ',' << format_double(data.X(row, j));
      out << '\n';
    }
  }
}

std::string panel_csv_text(const PanelDataset& data) {
  std::ostringstream out;
  write_panel_csv(out, data);
  return out.str();
}

}  // namespace panelglmm
