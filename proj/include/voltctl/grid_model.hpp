#pragma once

// Radial feeder data model, feeder-file ingestion and topology checks.
//
// A feeder on disk is a directory with three files:
//   buses.csv    id,p_load,q_load,u_min,u_max,y_min,y_max
//   lines.csv    from,to,r_ohm,x_ohm
//   header.json  base_mva, base_kv, y_ref, plus optional keys
//                load_unit ("pu" | "kw"), slack_voltage, model_available,
//                u_min/u_max/y_min/y_max (defaults for blank cells)
//
// Everything inside NetworkModel is per-unit on (base_mva, base_kv).

#include "voltctl/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace voltctl {

inline constexpr double kDefaultUMin = -0.05;
inline constexpr double kDefaultUMax = 0.05;
inline constexpr double kDefaultYMin = 0.90;
inline constexpr double kDefaultYMax = 1.10;

struct Bus {
  int id = 0;
  double p_load = 0.0;  // consumption positive
  double q_load = 0.0;
  double u_min = kDefaultUMin;
  double u_max = kDefaultUMax;
  double y_min = kDefaultYMin;
  double y_max = kDefaultYMax;

  bool operator==(const Bus&) const = default;
};

struct Line {
  int from = 0;  // parent bus id
  int to = 0;    // child bus id
  double r = 0.0;
  double x = 0.0;

  double z2() const { return r * r + x * x; }
  bool operator==(const Line&) const = default;
};

struct TopologyReport {
  bool pass = false;
  std::size_t bus_count = 0;
  std::size_t line_count = 0;
  int max_depth = 0;
  std::string reason;
};

// Radial feeder. Construct through make_network() or load_network(), which
// validate the spanning-tree invariants and fill the derived index tables.
struct NetworkModel {
  std::vector<Bus> buses;  // file order
  std::vector<Line> lines;
  double base_mva = 100.0;
  double base_kv = 12.66;
  Vector y_ref;               // one entry per non-root bus
  double slack_voltage = 1.0;
  bool model_available = true;  // false hides impedances from model-based controllers

  // Derived tables, indices are positions in `buses` / `lines`.
  std::vector<std::vector<int>> children;  // bus -> child buses
  std::vector<int> parent_line;            // bus -> line feeding it, -1 at root
  std::vector<int> sweep_order;            // breadth-first from root
  std::vector<int> slot_of_bus;            // bus -> non-root slot, -1 at root
  std::vector<int> bus_of_slot;
  std::vector<int> depth;
  std::vector<int> line_from;  // line -> parent bus index
  std::vector<int> line_to;    // line -> child bus index
  int root = 0;

  // Number of non-root buses (controllable injections and measured voltages).
  Eigen::Index size() const { return static_cast<Eigen::Index>(bus_of_slot.size()); }

  int index_of(int id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
      if (buses[i].id == id) return static_cast<int>(i);
    return -1;
  }

  bool operator==(const NetworkModel& o) const {
    return buses == o.buses && lines == o.lines && base_mva == o.base_mva &&
           base_kv == o.base_kv && y_ref == o.y_ref && slack_voltage == o.slack_voltage &&
           model_available == o.model_available;
  }
};

namespace detail {

struct Tree {
  std::vector<std::vector<int>> children;
  std::vector<int> parent_line;
  std::vector<int> order;
  std::vector<int> depth;
  int root = -1;
};

// Builds the rooted tree or returns the first violated invariant.
inline std::optional<std::string> build_tree(const std::vector<Bus>& buses,
                                             const std::vector<Line>& lines, Tree& out) {
  const int n = static_cast<int>(buses.size());
  std::map<int, int> index;
  for (int i = 0; i < n; ++i) {
    if (!index.emplace(buses[i].id, i).second)
      return "duplicate bus id " + std::to_string(buses[i].id);
  }
  auto root_it = index.find(0);
  if (root_it == index.end()) return std::string("no root bus with id 0");
  out = Tree{};
  out.root = root_it->second;
  out.children.assign(n, {});
  out.parent_line.assign(n, -1);
  out.depth.assign(n, -1);

  // Undirected cycle check first so a loop is reported as such regardless
  // of how its lines are oriented.
  std::vector<int> uf(n);
  for (int i = 0; i < n; ++i) uf[i] = i;
  auto find = [&](int a) {
    while (uf[a] != a) a = uf[a] = uf[uf[a]];
    return a;
  };
  for (std::size_t e = 0; e < lines.size(); ++e) {
    auto f = index.find(lines[e].from);
    auto t = index.find(lines[e].to);
    if (f == index.end() || t == index.end())
      return "line " + std::to_string(e) + " references an unknown bus";
    if (f->second == t->second) return "self-loop at bus " + std::to_string(lines[e].from);
    const int a = find(f->second), b = find(t->second);
    if (a == b) return std::string("cycle");
    uf[a] = b;
  }

  for (std::size_t e = 0; e < lines.size(); ++e) {
    auto f = index.find(lines[e].from);
    auto t = index.find(lines[e].to);
    if (t->second == out.root) return std::string("root bus has a parent line");
    if (out.parent_line[t->second] != -1)
      return "multiple parents for bus " + std::to_string(lines[e].to);
    out.parent_line[t->second] = static_cast<int>(e);
    out.children[f->second].push_back(t->second);
  }

  std::queue<int> frontier;
  frontier.push(out.root);
  out.depth[out.root] = 0;
  while (!frontier.empty()) {
    const int b = frontier.front();
    frontier.pop();
    out.order.push_back(b);
    for (int c : out.children[b]) {
      if (out.depth[c] != -1) return std::string("cycle");
      out.depth[c] = out.depth[b] + 1;
      frontier.push(c);
    }
  }
  if (static_cast<int>(out.order.size()) != n) {
    // Every non-root bus has at most one parent here, so an unreachable bus
    // is either isolated or sits on a directed cycle.
    for (int i = 0; i < n; ++i) {
      if (out.depth[i] == -1 && out.parent_line[i] == -1)
        return "disconnected bus " + std::to_string(buses[i].id);
    }
    return std::string("cycle");
  }
  if (lines.size() + 1 != buses.size()) return std::string("cycle");
  return std::nullopt;
}

inline void check_bus(const Bus& b) {
  if (!(b.u_min <= 0.0 && 0.0 <= b.u_max))
    throw ParseError("bus " + std::to_string(b.id) + ": u bounds must bracket zero");
  if (!(0.0 < b.y_min && b.y_min < b.y_max))
    throw ParseError("bus " + std::to_string(b.id) + ": need 0 < y_min < y_max");
  if (!std::isfinite(b.p_load) || !std::isfinite(b.q_load))
    throw ParseError("bus " + std::to_string(b.id) + ": non-finite load");
}

inline void check_line(const Line& l) {
  if (!(l.r >= 0.0 && l.x >= 0.0 && l.r + l.x > 0.0))
    throw ParseError("line " + std::to_string(l.from) + "->" + std::to_string(l.to) +
                     ": need r >= 0, x >= 0, r + x > 0");
}

}  // namespace detail

inline TopologyReport validate_radial(const std::vector<Bus>& buses,
                                      const std::vector<Line>& lines) {
  TopologyReport rep;
  rep.bus_count = buses.size();
  rep.line_count = lines.size();
  detail::Tree tree;
  if (auto why = detail::build_tree(buses, lines, tree)) {
    rep.pass = false;
    rep.reason = *why;
    return rep;
  }
  rep.pass = true;
  rep.max_depth = tree.depth.empty() ? 0 : *std::max_element(tree.depth.begin(), tree.depth.end());
  return rep;
}

inline TopologyReport validate_radial(const NetworkModel& net) {
  return validate_radial(net.buses, net.lines);
}

// Assembles a validated model from per-unit data. y_ref defaults to ones.
inline NetworkModel make_network(std::vector<Bus> buses, std::vector<Line> lines,
                                 double base_mva = 100.0, double base_kv = 12.66,
                                 std::optional<Vector> y_ref = std::nullopt,
                                 double slack_voltage = 1.0) {
  if (!(base_mva > 0.0) || !(base_kv > 0.0)) throw UnitError("base values must be positive");
  if (!(slack_voltage > 0.0)) throw UnitError("slack voltage must be positive");
  for (const auto& b : buses) detail::check_bus(b);
  for (const auto& l : lines) detail::check_line(l);

  detail::Tree tree;
  if (auto why = detail::build_tree(buses, lines, tree)) throw TopologyError(*why);

  NetworkModel net;
  net.buses = std::move(buses);
  net.lines = std::move(lines);
  net.base_mva = base_mva;
  net.base_kv = base_kv;
  net.slack_voltage = slack_voltage;
  net.children = std::move(tree.children);
  net.parent_line = std::move(tree.parent_line);
  net.sweep_order = std::move(tree.order);
  net.depth = std::move(tree.depth);
  net.root = tree.root;
  for (const auto& ln : net.lines) {
    net.line_from.push_back(net.index_of(ln.from));
    net.line_to.push_back(net.index_of(ln.to));
  }
  net.slot_of_bus.assign(net.buses.size(), -1);
  for (std::size_t i = 0; i < net.buses.size(); ++i) {
    if (static_cast<int>(i) == net.root) continue;
    net.slot_of_bus[i] = static_cast<int>(net.bus_of_slot.size());
    net.bus_of_slot.push_back(static_cast<int>(i));
  }
  const Eigen::Index m = net.size();
  if (y_ref) {
    require_size(*y_ref, m, "y_ref");
    if ((y_ref->array() <= 0.0).any()) throw UnitError("y_ref entries must be positive");
    net.y_ref = *y_ref;
  } else {
    net.y_ref = Vector::Ones(m);
  }
  return net;
}

// Per-slot views of the bus data.
struct ControlBounds {
  Vector u_min, u_max, y_min, y_max;
};

inline ControlBounds control_bounds(const NetworkModel& net) {
  const Eigen::Index m = net.size();
  ControlBounds b{Vector(m), Vector(m), Vector(m), Vector(m)};
  for (Eigen::Index s = 0; s < m; ++s) {
    const Bus& bus = net.buses[net.bus_of_slot[s]];
    b.u_min[s] = bus.u_min;
    b.u_max[s] = bus.u_max;
    b.y_min[s] = bus.y_min;
    b.y_max[s] = bus.y_max;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Feeder files

struct FeederFiles {
  std::string buses_csv;
  std::string lines_csv;
  std::string header_json;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.emplace_back(trim(line.substr(start, comma == std::string_view::npos
                                                 ? std::string_view::npos
                                                 : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline CsvTable parse_csv(const std::string& text, const std::string& what) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto cells = split_csv_line(body);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw ParseError(what + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(t.header.size()) + " columns, got " +
                       std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(lineno);
  }
  if (t.header.empty()) throw ParseError(what + ": missing header row");
  return t;
}

inline double parse_double(const std::string& cell, const std::string& where) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v))
    throw ParseError(where + ": not a number: '" + cell + "'");
  return v;
}

inline int parse_int(const std::string& cell, const std::string& where) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw ParseError(where + ": not an integer: '" + cell + "'");
  return v;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline NetworkModel parse_network(const FeederFiles& files) {
  using nlohmann::json;
  json header;
  try {
    header = json::parse(files.header_json);
  } catch (const json::exception& e) {
    throw ParseError(std::string("header.json: ") + e.what());
  }
  if (!header.is_object()) throw ParseError("header.json: expected an object");

  auto number = [&](const char* key, std::optional<double> fallback) -> double {
    if (!header.contains(key)) {
      if (fallback) return *fallback;
      throw ParseError(std::string("header.json: missing key '") + key + "'");
    }
    if (!header[key].is_number())
      throw ParseError(std::string("header.json: '") + key + "' must be a number");
    return header[key].get<double>();
  };

  const double base_mva = number("base_mva", std::nullopt);
  const double base_kv = number("base_kv", std::nullopt);
  if (!(base_mva > 0.0) || !(base_kv > 0.0)) throw UnitError("base_mva and base_kv must be positive");
  const double slack = number("slack_voltage", 1.0);
  const double d_umin = number("u_min", kDefaultUMin);
  const double d_umax = number("u_max", kDefaultUMax);
  const double d_ymin = number("y_min", kDefaultYMin);
  const double d_ymax = number("y_max", kDefaultYMax);

  const std::string load_unit = header.value("load_unit", std::string("pu"));
  double load_scale = 1.0;
  if (load_unit == "kw") {
    load_scale = 1.0 / (1000.0 * base_mva);
  } else if (load_unit != "pu") {
    throw UnitError("header.json: load_unit must be 'pu' or 'kw'");
  }
  const bool model_available = header.value("model_available", true);
  const double z_base = base_kv * base_kv / base_mva;

  // buses.csv
  const auto bt = detail::parse_csv(files.buses_csv, "buses.csv");
  const char* bus_cols[] = {"id", "p_load", "q_load", "u_min", "u_max", "y_min", "y_max"};
  int bc[7];
  for (int i = 0; i < 7; ++i) {
    bc[i] = bt.column(bus_cols[i]);
    if (bc[i] < 0) throw ParseError(std::string("buses.csv: missing column '") + bus_cols[i] + "'");
  }
  std::vector<Bus> buses;
  for (std::size_t r = 0; r < bt.rows.size(); ++r) {
    const auto& row = bt.rows[r];
    const std::string where = "buses.csv:" + std::to_string(bt.line_numbers[r]);
    auto cell = [&](int c, double fallback) {
      return row[bc[c]].empty() ? fallback : detail::parse_double(row[bc[c]], where);
    };
    if (row[bc[0]].empty()) throw ParseError(where + ": id is required");
    Bus b;
    b.id = detail::parse_int(row[bc[0]], where);
    b.p_load = cell(1, 0.0) * load_scale;
    b.q_load = cell(2, 0.0) * load_scale;
    b.u_min = cell(3, d_umin);
    b.u_max = cell(4, d_umax);
    b.y_min = cell(5, d_ymin);
    b.y_max = cell(6, d_ymax);
    buses.push_back(b);
  }

  // lines.csv
  const auto lt = detail::parse_csv(files.lines_csv, "lines.csv");
  const char* line_cols[] = {"from", "to", "r_ohm", "x_ohm"};
  int lc[4];
  for (int i = 0; i < 4; ++i) {
    lc[i] = lt.column(line_cols[i]);
    if (lc[i] < 0) throw ParseError(std::string("lines.csv: missing column '") + line_cols[i] + "'");
  }
  std::vector<Line> lines;
  for (std::size_t r = 0; r < lt.rows.size(); ++r) {
    const auto& row = lt.rows[r];
    const std::string where = "lines.csv:" + std::to_string(lt.line_numbers[r]);
    Line l;
    l.from = detail::parse_int(row[lc[0]], where);
    l.to = detail::parse_int(row[lc[1]], where);
    l.r = detail::parse_double(row[lc[2]], where) / z_base;
    l.x = detail::parse_double(row[lc[3]], where) / z_base;
    lines.push_back(l);
  }

  std::optional<Vector> y_ref;
  if (header.contains("y_ref")) {
    const auto& yr = header["y_ref"];
    const Eigen::Index m = static_cast<Eigen::Index>(buses.size()) - 1;
    if (yr.is_number()) {
      y_ref = Vector::Constant(std::max<Eigen::Index>(m, 0), yr.get<double>());
    } else if (yr.is_array()) {
      Vector v(static_cast<Eigen::Index>(yr.size()));
      for (std::size_t i = 0; i < yr.size(); ++i) {
        if (!yr[i].is_number()) throw ParseError("header.json: y_ref entries must be numbers");
        v[static_cast<Eigen::Index>(i)] = yr[i].get<double>();
      }
      if (v.size() != m) throw ParseError("header.json: y_ref array must have one entry per non-root bus");
      y_ref = v;
    } else {
      throw ParseError("header.json: y_ref must be a number or an array");
    }
  }

  NetworkModel net = make_network(std::move(buses), std::move(lines), base_mva, base_kv, y_ref, slack);
  net.model_available = model_available;
  return net;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline FeederFiles read_feeder_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("feeder directory not found: " + dir.string());
  return {read_text_file(dir / "buses.csv"), read_text_file(dir / "lines.csv"),
          read_text_file(dir / "header.json")};
}

inline NetworkModel load_network(const std::filesystem::path& dir) {
  return parse_network(read_feeder_files(dir));
}

// Writes the model back in feeder-file form: loads and bounds in p.u.,
// impedances in ohms.
inline FeederFiles serialize_network(const NetworkModel& net) {
  using detail::format_double;
  FeederFiles f;
  std::ostringstream b;
  b << "id,p_load,q_load,u_min,u_max,y_min,y_max\n";
  for (const auto& bus : net.buses) {
    b << bus.id << ',' << format_double(bus.p_load) << ',' << format_double(bus.q_load) << ','
      << format_double(bus.u_min) << ',' << format_double(bus.u_max) << ','
      << format_double(bus.y_min) << ',' << format_double(bus.y_max) << '\n';
  }
  f.buses_csv = b.str();

  const double z_base = net.base_kv * net.base_kv / net.base_mva;
  std::ostringstream l;
  l << "from,to,r_ohm,x_ohm\n";
  for (const auto& line : net.lines) {
    l << line.from << ',' << line.to << ',' << format_double(line.r * z_base) << ','
      << format_double(line.x * z_base) << '\n';
  }
  f.lines_csv = l.str();

  nlohmann::json h;
  h["base_mva"] = net.base_mva;
  h["base_kv"] = net.base_kv;
  h["load_unit"] = "pu";
  h["slack_voltage"] = net.slack_voltage;
  h["model_available"] = net.model_available;
  h["y_ref"] = std::vector<double>(net.y_ref.data(), net.y_ref.data() + net.y_ref.size());
  f.header_json = h.dump(2) + "\n";
  return f;
}

inline void write_network(const NetworkModel& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto f = serialize_network(net);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
  };
  put("buses.csv", f.buses_csv);
  put("lines.csv", f.lines_csv);
  put("header.json", f.header_json);
}

}  // namespace voltctl
