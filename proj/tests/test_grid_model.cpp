#include "voltctl/grid_model.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <set>

using namespace voltctl;

namespace {

const std::filesystem::path kFixtures = VOLTCTL_FIXTURE_DIR;

FeederFiles two_bus_files() {
  return {"id,p_load,q_load,u_min,u_max,y_min,y_max\n0,0,0,,,,\n1,0.1,0,,,,\n",
          "from,to,r_ohm,x_ohm\n0,1,0.01,0.01\n",
          R"({"base_mva": 100, "base_kv": 10})"};
}

}  // namespace

TEST(GridModel, TwoBusFromText) {
  const auto net = parse_network(two_bus_files());
  ASSERT_EQ(net.lines.size(), 1u);
  ASSERT_EQ(net.children[net.root].size(), 1u);
  EXPECT_EQ(net.buses[net.children[net.root][0]].id, 1);
  EXPECT_DOUBLE_EQ(net.lines[0].r, 0.01);  // Z_base = 10^2 / 100 = 1 ohm
  EXPECT_DOUBLE_EQ(net.buses[1].p_load, 0.1);
  EXPECT_DOUBLE_EQ(net.buses[1].u_min, kDefaultUMin);
  EXPECT_DOUBLE_EQ(net.buses[1].y_max, kDefaultYMax);
  EXPECT_EQ(net.y_ref.size(), 1);
  EXPECT_EQ(net.y_ref[0], 1.0);
}

TEST(GridModel, Ieee33Fixture) {
  const auto net = load_network(kFixtures / "ieee33");
  EXPECT_EQ(net.buses.size(), 33u);
  EXPECT_EQ(net.lines.size(), 32u);
  const auto rep = validate_radial(net);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.bus_count, 33u);
  EXPECT_EQ(rep.line_count, 32u);
  // Main lateral: substation to the published bus 18 (id 17).
  EXPECT_EQ(net.depth[net.index_of(17)], 17);
  EXPECT_EQ(rep.max_depth, 17);

  // 3715 kW / 2300 kVAr total on a 100 MVA base.
  double p = 0, q = 0;
  for (const auto& b : net.buses) {
    p += b.p_load;
    q += b.q_load;
  }
  EXPECT_NEAR(p, 0.03715, 1e-15);
  EXPECT_NEAR(q, 0.02300, 1e-15);
  const double z_base = 12.66 * 12.66 / 100.0;
  EXPECT_NEAR(net.lines[0].r, 0.0922 / z_base, 1e-15);
}

TEST(GridModel, DuplicateParentIsTopologyError) {
  auto files = read_feeder_files(kFixtures / "ieee33");
  // Rewire the 23->24 line to feed bus 5, which already has parent 4.
  const std::string from = "23,24,0.8960,0.7011";
  const auto pos = files.lines_csv.find(from);
  ASSERT_NE(pos, std::string::npos);
  files.lines_csv.replace(pos, from.size(), "23,5,0.8960,0.7011");
  EXPECT_THROW(parse_network(files), TopologyError);
}

TEST(GridModel, RejectsBadInput) {
  auto f = two_bus_files();
  f.header_json = R"({"base_mva": 0, "base_kv": 10})";
  EXPECT_THROW(parse_network(f), UnitError);

  f = two_bus_files();
  f.lines_csv = "from,to,r_ohm\n0,1,0.01\n";
  EXPECT_THROW(parse_network(f), ParseError);

  f = two_bus_files();
  f.buses_csv = "id,p_load,q_load,u_min,u_max,y_min,y_max\n0,0,0,,,,\n1,abc,0,,,,\n";
  EXPECT_THROW(parse_network(f), ParseError);

  f = two_bus_files();
  f.buses_csv = "id,p_load,q_load,u_min,u_max,y_min,y_max\n0,0,0,,,,\n1,0.1,0,0.01,0.05,,\n";
  EXPECT_THROW(parse_network(f), ParseError);  // zero injection must be feasible

  f = two_bus_files();
  f.lines_csv = "from,to,r_ohm,x_ohm\n0,1,0,0\n";
  EXPECT_THROW(parse_network(f), ParseError);

  f = two_bus_files();
  f.header_json = "{not json";
  EXPECT_THROW(parse_network(f), ParseError);

  f = two_bus_files();
  f.buses_csv += "2,0.1,0,,,,\n";  // no line reaches bus 2
  EXPECT_THROW(parse_network(f), TopologyError);

  EXPECT_THROW(load_network(kFixtures / "does_not_exist"), IoError);
}

TEST(ValidateRadial, ReportsInsteadOfThrowing) {
  std::vector<Bus> buses(4);
  for (int i = 0; i < 4; ++i) buses[i].id = i;
  std::vector<Line> lines{{0, 1, 0.01, 0.01}, {1, 2, 0.01, 0.01}, {1, 3, 0.01, 0.01}};
  auto rep = validate_radial(buses, lines);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.max_depth, 2);

  lines.push_back({2, 3, 0.01, 0.01});
  rep = validate_radial(buses, lines);
  EXPECT_FALSE(rep.pass);
  EXPECT_EQ(rep.reason, "cycle");
  EXPECT_EQ(rep.line_count, 4u);
}

TEST(ValidateRadial, SingleBus) {
  std::vector<Bus> buses(1);
  const auto rep = validate_radial(buses, {});
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.max_depth, 0);
  EXPECT_EQ(rep.bus_count, 1u);
  EXPECT_NO_THROW(make_network(buses, {}));
}

TEST(GridModel, DepthFirstVisitsEveryBusOnce) {
  const auto net = load_network(kFixtures / "ieee33");
  std::vector<int> seen(net.buses.size(), 0);
  std::function<void(int)> dfs = [&](int b) {
    ++seen[b];
    for (int c : net.children[b]) dfs(c);
  };
  dfs(net.root);
  for (int s : seen) EXPECT_EQ(s, 1);
  // children agrees with the line list in both directions
  std::set<std::pair<int, int>> from_lines, from_children;
  for (std::size_t e = 0; e < net.lines.size(); ++e)
    from_lines.insert({net.line_from[e], net.line_to[e]});
  for (std::size_t b = 0; b < net.children.size(); ++b)
    for (int c : net.children[b]) from_children.insert({static_cast<int>(b), c});
  EXPECT_EQ(from_lines, from_children);
}

TEST(GridModel, SerializeRoundTripAndIdempotentNormalization) {
  for (const char* name : {"ieee33", "two_bus"}) {
    const auto net = load_network(kFixtures / name);
    const auto once = parse_network(serialize_network(net));
    const auto twice = parse_network(serialize_network(once));
    ASSERT_EQ(once.buses, net.buses) << name;
    ASSERT_EQ(once.y_ref, net.y_ref);
    // Impedances pass through ohms, so allow a few ulps there only.
    for (std::size_t e = 0; e < net.lines.size(); ++e) {
      EXPECT_EQ(once.lines[e].from, net.lines[e].from);
      EXPECT_EQ(once.lines[e].to, net.lines[e].to);
      EXPECT_NEAR(once.lines[e].r, net.lines[e].r, 4e-16 * net.lines[e].r + 1e-300);
      EXPECT_NEAR(once.lines[e].x, net.lines[e].x, 4e-16 * net.lines[e].x + 1e-300);
    }
    // Re-normalizing an already normalized model changes nothing.
    EXPECT_TRUE(twice == once) << name;
  }
}

TEST(GridModel, HeaderOptions) {
  auto f = two_bus_files();
  f.header_json = R"({"base_mva": 100, "base_kv": 10, "y_ref": [1.02], "load_unit": "kw",
                      "model_available": false, "u_min": -0.02, "u_max": 0.03})";
  f.buses_csv = "id,p_load,q_load,u_min,u_max,y_min,y_max\n0,0,0,,,,\n1,500,250,,,,\n";
  const auto net = parse_network(f);
  EXPECT_DOUBLE_EQ(net.y_ref[0], 1.02);
  EXPECT_DOUBLE_EQ(net.buses[1].p_load, 0.005);
  EXPECT_DOUBLE_EQ(net.buses[1].q_load, 0.0025);
  EXPECT_DOUBLE_EQ(net.buses[1].u_min, -0.02);
  EXPECT_DOUBLE_EQ(net.buses[1].u_max, 0.03);
  EXPECT_FALSE(net.model_available);

  f.header_json = R"({"base_mva": 100, "base_kv": 10, "y_ref": [1.0, 1.0]})";
  EXPECT_THROW(parse_network(f), ParseError);
  f.header_json = R"({"base_mva": 100, "base_kv": 10, "load_unit": "mw"})";
  EXPECT_THROW(parse_network(f), UnitError);
}
