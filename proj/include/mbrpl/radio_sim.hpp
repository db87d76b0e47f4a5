#ifndef MBRPL_RADIO_SIM_HPP
#define MBRPL_RADIO_SIM_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbrpl/common.hpp"

namespace mbrpl::radio {

inline constexpr double kMinTiltDeg = 0.0;
inline constexpr double kMaxTiltDeg = 15.0;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Antenna {
  int site = 0;
  Point position;
  double azimuth_deg = 0.0;  // counter-clockwise from +x
  double height_m = 30.0;
  double tilt_deg = 0.0;     // down-tilt, positive below the horizon
};

/// Axis-aligned rectangle; every crossing of one of its edges costs `wall_loss_db`.
struct Building {
  Point lo;
  Point hi;
  double wall_loss_db = 10.0;
};

struct NetworkLayout {
  std::vector<Point> sites;
  std::vector<Antenna> antennas;
  std::vector<Point> users;
  std::vector<Building> buildings;
  double user_height_m = 1.5;

  void validate() const {
    for (const auto& a : antennas) {
      if (!(a.tilt_deg >= kMinTiltDeg && a.tilt_deg <= kMaxTiltDeg))
        throw ConfigError("NetworkLayout: tilt outside [0,15] degrees");
      if (!std::isfinite(a.position.x) || !std::isfinite(a.position.y))
        throw ConfigError("NetworkLayout: non-finite antenna position");
      if (a.site < 0 || a.site >= static_cast<int>(sites.size()))
        throw ConfigError("NetworkLayout: antenna references unknown site");
    }
    for (std::size_t s = 0; s < sites.size(); ++s) {
      std::vector<double> az;
      for (const auto& a : antennas)
        if (a.site == static_cast<int>(s)) az.push_back(a.azimuth_deg);
      if (az.size() != 3) throw ConfigError("NetworkLayout: every site needs exactly 3 antennas");
      std::sort(az.begin(), az.end());
      if (std::abs(az[1] - az[0] - 120.0) > 1e-9 || std::abs(az[2] - az[1] - 120.0) > 1e-9)
        throw ConfigError("NetworkLayout: sector azimuths must be 120 degrees apart");
    }
    for (const auto& u : users)
      if (!std::isfinite(u.x) || !std::isfinite(u.y))
        throw ConfigError("NetworkLayout: non-finite user position");
  }
};

/// Link-budget and pattern parameters. Powers are linear watts.
struct PropagationConfig {
  double tx_power_w = 40.0;
  double noise_w = 1e-13;
  double bandwidth_per_prb_hz = 180e3;
  double prbs_per_user = 50.0;
  double pathloss_exponent = 3.5;
  double reference_loss_db = 30.0;
  double reference_distance_m = 10.0;
  double vertical_beamwidth_deg = 10.0;
  double horizontal_beamwidth_deg = 65.0;
  double max_attenuation_db = 25.0;
  double sidelobe_limit_db = 20.0;
  double max_gain_db = 15.0;

  void validate() const {
    if (!(tx_power_w > 0 && noise_w > 0 && bandwidth_per_prb_hz > 0 && prbs_per_user > 0))
      throw ConfigError("PropagationConfig: powers and bandwidths must be positive");
    if (!(vertical_beamwidth_deg > 0 && horizontal_beamwidth_deg > 0))
      throw ConfigError("PropagationConfig: beamwidths must be positive");
    if (!(reference_distance_m > 0)) throw ConfigError("PropagationConfig: d0 must be positive");
  }
};

/// Per-cell averages of log KPIs. Empty cells carry NaN in all three fields.
struct CellKpis {
  double cov = std::numeric_limits<double>::quiet_NaN();
  double cap = std::numeric_limits<double>::quiet_NaN();
  double qual = std::numeric_limits<double>::quiet_NaN();
  int n_users = 0;

  bool empty() const { return n_users == 0; }
};

// --- Geometry ----------------------------------------------------------------

inline double wrap_degrees(double deg) {
  double d = std::fmod(deg + 180.0, 360.0);
  if (d < 0) d += 360.0;
  return d - 180.0;
}

inline double to_db(double linear) { return 10.0 * std::log10(linear); }
inline double from_db(double db) { return std::pow(10.0, db / 10.0); }

inline double vertical_attenuation_db(double elevation_deg, double tilt_deg,
                                      const PropagationConfig& c) {
  const double x = (elevation_deg - tilt_deg) / c.vertical_beamwidth_deg;
  return std::min(12.0 * x * x, c.sidelobe_limit_db);
}

inline double horizontal_attenuation_db(double off_azimuth_deg, const PropagationConfig& c) {
  const double x = off_azimuth_deg / c.horizontal_beamwidth_deg;
  return std::min(12.0 * x * x, c.max_attenuation_db);
}

/// Angles of a user as seen from an antenna: horizontal offset from boresight
/// and elevation below the horizon (both degrees).
struct LinkAngles {
  double off_azimuth_deg;
  double elevation_deg;
};

inline LinkAngles link_angles(const Antenna& ant, Point user, double user_height_m) {
  const double dx = user.x - ant.position.x;
  const double dy = user.y - ant.position.y;
  const double d2 = std::hypot(dx, dy);
  const double bearing = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
  const double elev =
      std::atan2(ant.height_m - user_height_m, d2) * 180.0 / std::numbers::pi;
  return {wrap_degrees(bearing - ant.azimuth_deg), elev};
}

/// Sector pattern gain (linear) for a given down-tilt.
inline double antenna_gain(const LinkAngles& ang, double tilt_deg, const PropagationConfig& c) {
  const double att = std::min(vertical_attenuation_db(ang.elevation_deg, tilt_deg, c) +
                                  horizontal_attenuation_db(ang.off_azimuth_deg, c),
                              c.max_attenuation_db);
  return from_db(c.max_gain_db - att);
}

inline double antenna_gain(const Antenna& ant, double tilt_deg, Point user, double user_height_m,
                           const PropagationConfig& c) {
  return antenna_gain(link_angles(ant, user, user_height_m), tilt_deg, c);
}

/// Number of building edges crossed by the 2-D segment a->b, weighted by each
/// building's wall loss (dB).
inline double wall_loss_db(Point a, Point b, const std::vector<Building>& buildings) {
  double total = 0.0;
  for (const auto& bd : buildings) {
    int walls = 0;
    // vertical edges x = const
    for (double x0 : {bd.lo.x, bd.hi.x}) {
      const double fa = x0 - a.x, fb = x0 - b.x;
      if (fa * fb < 0.0) {
        const double t = fa / (b.x - a.x);
        const double y = a.y + t * (b.y - a.y);
        if (y >= bd.lo.y && y <= bd.hi.y) ++walls;
      }
    }
    for (double y0 : {bd.lo.y, bd.hi.y}) {
      const double fa = y0 - a.y, fb = y0 - b.y;
      if (fa * fb < 0.0) {
        const double t = fa / (b.y - a.y);
        const double x = a.x + t * (b.x - a.x);
        if (x >= bd.lo.x && x <= bd.hi.x) ++walls;
      }
    }
    total += walls * bd.wall_loss_db;
  }
  return total;
}

inline double distance_loss_db(double distance_m, const PropagationConfig& c) {
  const double d = std::max(distance_m, c.reference_distance_m);
  return c.reference_loss_db +
         10.0 * c.pathloss_exponent * std::log10(d / c.reference_distance_m);
}

/// Linear path-loss factor (log-distance plus per-wall penetration).
inline double path_loss(const Antenna& ant, Point user, double user_height_m,
                        const std::vector<Building>& buildings, const PropagationConfig& c) {
  const double dx = user.x - ant.position.x, dy = user.y - ant.position.y;
  const double dz = ant.height_m - user_height_m;
  const double d3 = std::sqrt(dx * dx + dy * dy + dz * dz);
  return from_db(-(distance_loss_db(d3, c) + wall_loss_db(ant.position, user, buildings)));
}

inline double rsrp(double power_w, double gain, double loss) { return power_w * gain * loss; }

// --- Layout generation --------------------------------------------------------

struct LayoutOptions {
  double site_spacing_m = 500.0;
  double antenna_height_m = 30.0;
  double user_height_m = 1.5;
  double building_min_m = 20.0;
  double building_max_m = 60.0;
  double wall_loss_db = 10.0;
};

/// Hexagonal grid (n_rings = 1 gives 7 sites), 3 sectors per site, uniform users
/// and buildings over the padded bounding box, tilts uniform in [0,15].
inline NetworkLayout generate_layout(std::uint64_t seed, int n_rings, int n_users,
                                     int building_count, const LayoutOptions& opt = {}) {
  if (n_rings < 0) throw ConfigError("generate_layout: n_rings must be >= 0");
  if (n_users < 0 || building_count < 0) throw ConfigError("generate_layout: negative count");
  Rng rng(seed);
  NetworkLayout L;
  L.user_height_m = opt.user_height_m;
  // axial hex coordinates
  for (int q = -n_rings; q <= n_rings; ++q)
    for (int r = std::max(-n_rings, -q - n_rings); r <= std::min(n_rings, -q + n_rings); ++r) {
      const double x = opt.site_spacing_m * (q + 0.5 * r);
      const double y = opt.site_spacing_m * (std::sqrt(3.0) / 2.0) * r;
      L.sites.push_back({x, y});
    }
  std::stable_sort(L.sites.begin(), L.sites.end(), [](Point a, Point b) {
    return std::hypot(a.x, a.y) < std::hypot(b.x, b.y) - 1e-9;
  });
  for (std::size_t s = 0; s < L.sites.size(); ++s)
    for (double az : {0.0, 120.0, 240.0})
      L.antennas.push_back({static_cast<int>(s), L.sites[s], az, opt.antenna_height_m, 0.0});

  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  for (const auto& p : L.sites) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const double pad = 0.6 * opt.site_spacing_m;
  xmin -= pad, xmax += pad, ymin -= pad, ymax += pad;

  for (int u = 0; u < n_users; ++u) L.users.push_back({uniform(rng, xmin, xmax), uniform(rng, ymin, ymax)});
  for (int b = 0; b < building_count; ++b) {
    const Point c{uniform(rng, xmin, xmax), uniform(rng, ymin, ymax)};
    const double w = uniform(rng, opt.building_min_m, opt.building_max_m);
    const double h = uniform(rng, opt.building_min_m, opt.building_max_m);
    L.buildings.push_back({{c.x - w / 2, c.y - h / 2}, {c.x + w / 2, c.y + h / 2}, opt.wall_loss_db});
  }
  for (auto& a : L.antennas) a.tilt_deg = uniform(rng, kMinTiltDeg, kMaxTiltDeg);
  return L;
}

// --- Link table ----------------------------------------------------------------
//
// Everything about a link except the tilt-dependent vertical attenuation is
// fixed for a layout, so it is computed once and reused across steps.

struct LinkTable {
  int n_cells = 0;
  int n_users = 0;
  Mat elevation_deg;    // [cell][user]
  Mat horizontal_db;    // [cell][user]
  Mat loss_linear;      // [cell][user]
};

inline LinkTable build_link_table(const NetworkLayout& L, const PropagationConfig& c,
                                  bool with_buildings = true) {
  static const std::vector<Building> kNone;
  LinkTable t;
  t.n_cells = static_cast<int>(L.antennas.size());
  t.n_users = static_cast<int>(L.users.size());
  t.elevation_deg.resize(t.n_cells, t.n_users);
  t.horizontal_db.resize(t.n_cells, t.n_users);
  t.loss_linear.resize(t.n_cells, t.n_users);
  const auto& bs = with_buildings ? L.buildings : kNone;
  for (int ci = 0; ci < t.n_cells; ++ci)
    for (int u = 0; u < t.n_users; ++u) {
      const auto& ant = L.antennas[ci];
      const auto ang = link_angles(ant, L.users[u], L.user_height_m);
      t.elevation_deg(ci, u) = ang.elevation_deg;
      t.horizontal_db(ci, u) = horizontal_attenuation_db(ang.off_azimuth_deg, c);
      t.loss_linear(ci, u) = path_loss(ant, L.users[u], L.user_height_m, bs, c);
    }
  return t;
}

struct Attachment {
  std::vector<int> serving;  // user -> cell
  Mat rsrp;                  // [cell][user], watts
};

inline std::vector<int> attach_from_rsrp(const Mat& rho) {
  std::vector<int> serving(static_cast<std::size_t>(rho.cols()), -1);
  for (Eigen::Index u = 0; u < rho.cols(); ++u) {
    int best = 0;
    for (Eigen::Index ci = 1; ci < rho.rows(); ++ci)
      if (rho(ci, u) > rho(best, u)) best = static_cast<int>(ci);
    serving[static_cast<std::size_t>(u)] = rho.rows() > 0 ? best : -1;
  }
  return serving;
}

/// Builds the RSRP matrix for the given tilts and attaches every user to its
/// strongest cell (ties to the lowest index).
inline Attachment attach_users(const LinkTable& t, const std::vector<double>& tilts,
                               const PropagationConfig& c) {
  if (static_cast<int>(tilts.size()) != t.n_cells)
    throw ConfigError("attach_users: tilt count does not match cell count");
  Attachment a;
  a.rsrp.resize(t.n_cells, t.n_users);
  for (int u = 0; u < t.n_users; ++u)
    for (int ci = 0; ci < t.n_cells; ++ci) {
      const double att =
          std::min(vertical_attenuation_db(t.elevation_deg(ci, u), tilts[ci], c) +
                       t.horizontal_db(ci, u),
                   c.max_attenuation_db);
      a.rsrp(ci, u) = rsrp(c.tx_power_w, from_db(c.max_gain_db - att), t.loss_linear(ci, u));
    }
  a.serving = attach_from_rsrp(a.rsrp);
  return a;
}

inline std::vector<double> tilts_of(const NetworkLayout& L) {
  std::vector<double> w;
  for (const auto& a : L.antennas) w.push_back(a.tilt_deg);
  return w;
}

inline Attachment attach_users(const NetworkLayout& L, const PropagationConfig& c) {
  return attach_users(build_link_table(L, c), tilts_of(L), c);
}

/// SINR of every user towards its serving cell.
inline Vec sinr(const Mat& rho, const std::vector<int>& serving, double kappa) {
  if (!(kappa > 0)) throw ConfigError("sinr: noise must be positive");
  Vec g(rho.cols());
  for (Eigen::Index u = 0; u < rho.cols(); ++u) {
    const int c = serving[static_cast<std::size_t>(u)];
    double interference = 0.0;
    for (Eigen::Index i = 0; i < rho.rows(); ++i)
      if (i != c) interference += rho(i, u);
    g(u) = rho(c, u) / (kappa + interference);
  }
  return g;
}

/// Equal-share throughput (bits/s) for one user in a cell of `n_cell_users`.
inline double throughput(double gamma, int n_cell_users, const PropagationConfig& c) {
  if (n_cell_users < 1) throw ConfigError("throughput: cell must contain the user");
  return c.bandwidth_per_prb_hz * c.prbs_per_user / n_cell_users * std::log2(1.0 + gamma);
}

inline std::vector<CellKpis> cell_kpis(const LinkTable& t, const std::vector<double>& tilts,
                                       const PropagationConfig& c) {
  const auto att = attach_users(t, tilts, c);
  const Vec g = sinr(att.rsrp, att.serving, c.noise_w);
  std::vector<CellKpis> out(static_cast<std::size_t>(t.n_cells));
  for (int u = 0; u < t.n_users; ++u) ++out[static_cast<std::size_t>(att.serving[u])].n_users;
  std::vector<double> cov(out.size(), 0.0), cap(out.size(), 0.0), qual(out.size(), 0.0);
  for (int u = 0; u < t.n_users; ++u) {
    const auto ci = static_cast<std::size_t>(att.serving[u]);
    cov[ci] += std::log(att.rsrp(static_cast<Eigen::Index>(ci), u));
    qual[ci] += std::log(g(u));
    cap[ci] += std::log(throughput(g(u), out[ci].n_users, c));
  }
  for (std::size_t ci = 0; ci < out.size(); ++ci) {
    if (out[ci].n_users == 0) continue;
    out[ci].cov = cov[ci] / out[ci].n_users;
    out[ci].cap = cap[ci] / out[ci].n_users;
    out[ci].qual = qual[ci] / out[ci].n_users;
  }
  return out;
}

inline std::vector<CellKpis> cell_kpis(const NetworkLayout& L, const PropagationConfig& c) {
  return cell_kpis(build_link_table(L, c), tilts_of(L), c);
}

// --- I/O -------------------------------------------------------------------------

inline nlohmann::json to_json(const NetworkLayout& L) {
  nlohmann::json j;
  j["user_height_m"] = L.user_height_m;
  for (const auto& s : L.sites) j["sites"].push_back({s.x, s.y});
  for (const auto& a : L.antennas)
    j["antennas"].push_back({{"site", a.site},
                             {"position", {a.position.x, a.position.y}},
                             {"azimuth_deg", a.azimuth_deg},
                             {"height_m", a.height_m},
                             {"tilt_deg", a.tilt_deg}});
  j["users"] = nlohmann::json::array();
  for (const auto& u : L.users) j["users"].push_back({u.x, u.y});
  j["buildings"] = nlohmann::json::array();
  for (const auto& b : L.buildings)
    j["buildings"].push_back(
        {{"lo", {b.lo.x, b.lo.y}}, {"hi", {b.hi.x, b.hi.y}}, {"wall_loss_db", b.wall_loss_db}});
  return j;
}

inline NetworkLayout layout_from_json(const nlohmann::json& j) {
  auto pt = [](const nlohmann::json& p) { return Point{p.at(0).get<double>(), p.at(1).get<double>()}; };
  NetworkLayout L;
  L.user_height_m = j.at("user_height_m").get<double>();
  for (const auto& s : j.at("sites")) L.sites.push_back(pt(s));
  for (const auto& a : j.at("antennas"))
    L.antennas.push_back({a.at("site").get<int>(), pt(a.at("position")),
                          a.at("azimuth_deg").get<double>(), a.at("height_m").get<double>(),
                          a.at("tilt_deg").get<double>()});
  for (const auto& u : j.at("users")) L.users.push_back(pt(u));
  for (const auto& b : j.at("buildings"))
    L.buildings.push_back({pt(b.at("lo")), pt(b.at("hi")), b.at("wall_loss_db").get<double>()});
  L.validate();
  return L;
}

inline void save_layout(const NetworkLayout& L, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(L).dump(1) << '\n';
}

inline NetworkLayout load_layout(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return layout_from_json(nlohmann::json::parse(in));
}

/// CSV: cell_id,cov,cap,qual,n_users
inline void write_kpi_csv(std::ostream& os, const std::vector<CellKpis>& kpis) {
  os << "cell_id,cov,cap,qual,n_users\n";
  os.precision(17);
  for (std::size_t i = 0; i < kpis.size(); ++i)
    os << i << ',' << kpis[i].cov << ',' << kpis[i].cap << ',' << kpis[i].qual << ','
       << kpis[i].n_users << '\n';
}

}  // namespace mbrpl::radio

#endif  // MBRPL_RADIO_SIM_HPP
