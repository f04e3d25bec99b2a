#pragma once

// Domain types shared by every part of the cooperative lane-change library:
// vehicle states and roles, safety parameters, buffer-disc geometry and the
// seeded initial-condition builder.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace coopmpc {

inline constexpr double kMphToMps = 0.44704;

inline constexpr double mph_to_mps(double mph) { return mph * kMphToMps; }

/// State of one vehicle at one time step (SI units).
struct VehicleState {
  double x{0.0};  ///< longitudinal position [m]
  double y{0.0};  ///< lateral position [m]
  double v{0.0};  ///< longitudinal speed [m/s]
  double a{0.0};  ///< longitudinal acceleration [m/s^2]

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

enum class Role : std::uint8_t { TCAV = 0, FHDV_near, PHDV_near, FHDV_far, PHDV_far };

inline constexpr std::size_t kNumRoles = 5;
inline constexpr std::array<Role, 4> kChdvRoles{Role::FHDV_near, Role::PHDV_near,
                                                Role::FHDV_far, Role::PHDV_far};

inline constexpr std::size_t index_of(Role r) { return static_cast<std::size_t>(r); }

inline constexpr std::string_view to_string(Role r) {
  switch (r) {
    case Role::TCAV: return "TCAV";
    case Role::FHDV_near: return "FHDV_near";
    case Role::PHDV_near: return "PHDV_near";
    case Role::FHDV_far: return "FHDV_far";
    case Role::PHDV_far: return "PHDV_far";
  }
  return "?";
}

/// True for the CHDVs behind the CAV's insertion point.
inline constexpr bool is_following(Role r) { return r == Role::FHDV_near || r == Role::FHDV_far; }
inline constexpr bool is_near(Role r) { return r == Role::FHDV_near || r == Role::PHDV_near; }

enum class Cooperation : std::uint8_t { Active, Inactive };

inline constexpr std::string_view to_string(Cooperation c) {
  return c == Cooperation::Active ? "Active" : "Inactive";
}

/// Cooperation level of each of the four CHDVs.
class CoopAssignment {
 public:
  constexpr CoopAssignment() { levels_.fill(Cooperation::Inactive); }
  constexpr CoopAssignment(Cooperation fhdv_near, Cooperation phdv_near, Cooperation fhdv_far,
                           Cooperation phdv_far)
      : levels_{fhdv_near, phdv_near, fhdv_far, phdv_far} {}

  static constexpr CoopAssignment all(Cooperation c) { return {c, c, c, c}; }

  constexpr Cooperation operator[](Role r) const { return levels_.at(slot(r)); }
  constexpr Cooperation& operator[](Role r) { return levels_.at(slot(r)); }

  constexpr int active_count() const {
    int n = 0;
    for (auto c : levels_) n += c == Cooperation::Active ? 1 : 0;
    return n;
  }

  friend bool operator==(const CoopAssignment&, const CoopAssignment&) = default;

 private:
  static constexpr std::size_t slot(Role r) {
    if (r == Role::TCAV) throw std::invalid_argument("the CAV has no cooperation level");
    return index_of(r) - 1;
  }
  std::array<Cooperation, 4> levels_{};
};

/// Physical and safety parameters. Defaults are the nominal experiment values.
struct SafetyParams {
  double d_max{-5.08};   ///< max deceleration [m/s^2], negative
  double a_max{5.08};    ///< max acceleration [m/s^2]
  double a_max_L{3.024}; ///< max CAV longitudinal acceleration during a lane change [m/s^2]
  double a_s_r{6.958};   ///< rollover lateral-acceleration bound [m/s^2]
  double tau{0.2};       ///< time step [s]
  double l1{5.0};        ///< CAV <-> near CHDV longitudinal safety distance [m]
  double l2{10.0};       ///< near <-> far CHDV longitudinal safety distance [m]
  double l_v{4.0};       ///< vehicle length [m]
  double R_buf{3.0};     ///< buffer-disc radius [m]
  double l_w{3.7};       ///< lane width [m]

  void validate() const {
    if (!(d_max < 0.0 && 0.0 < a_max)) throw std::invalid_argument("require d_max < 0 < a_max");
    if (!(a_max_L <= a_max)) throw std::invalid_argument("require a_max_L <= a_max");
    if (!(R_buf >= l_v / 2.0)) throw std::invalid_argument("require R_buf >= l_v / 2");
    if (!(tau > 0.0)) throw std::invalid_argument("require tau > 0");
    if (!(l1 > 0.0 && l2 > 0.0)) throw std::invalid_argument("require l1 > 0 and l2 > 0");
    if (!(a_s_r > 0.0 && l_w > 0.0)) throw std::invalid_argument("require a_s_r > 0 and l_w > 0");
  }
};

struct BufferDisc {
  double cx{0.0};
  double cy{0.0};
  double radius{0.0};

  static BufferDisc around(const VehicleState& s, double r) { return {s.x, s.y, r}; }
};

/// Discs collide when they intersect or touch.
inline bool collides(const BufferDisc& a, const BufferDisc& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy) <= a.radius + b.radius;
}

/// Centre distance minus 2*R_buf; a value <= 0 is a collision (tangency included).
inline double disc_clearance(const VehicleState& a, const VehicleState& b, double R_buf) {
  return std::hypot(a.x - b.x, a.y - b.y) - 2.0 * R_buf;
}

/// Constant-time-headway bumper-to-bumper gap. Centre spacing is this plus l_v.
inline double initial_headway(double v, double t_h, double /*l_v*/) {
  if (!(v >= 0.0)) throw std::invalid_argument("initial_headway: speed must be non-negative");
  if (!(t_h > 0.0)) throw std::invalid_argument("initial_headway: time headway must be positive");
  return v * t_h;
}

/// All five vehicle states indexed by role.
struct Fleet {
  std::array<VehicleState, kNumRoles> s{};

  VehicleState& operator[](Role r) { return s[index_of(r)]; }
  const VehicleState& operator[](Role r) const { return s[index_of(r)]; }

  friend bool operator==(const Fleet&, const Fleet&) = default;
};

/// Normal deviates from a 64-bit Mersenne Twister via the Box-Muller transform.
///
/// Both pieces are fully specified (std::mt19937_64 is standardised, the
/// uniform mapping takes the top 53 bits), so draws are identical on every
/// platform, unlike std::normal_distribution.
class SpeedSampler {
 public:
  explicit SpeedSampler(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in (0, 1].
  double uniform() {
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
  }

  double standard_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  /// Speed draw in m/s from Normal(mu, sigma) given in mph, truncated at 0.
  double speed_mps(double mu_mph, double sigma_mph) {
    const double mph = mu_mph + sigma_mph * standard_normal();
    return std::max(0.0, mph_to_mps(mph));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_{false};
  double spare_{0.0};
};

/// Knobs for laying out the initial platoon.
struct LayoutParams {
  double t_h{1.0};     ///< time headway [s]
  double min_gap{6.0}; ///< floor on the bumper-to-bumper gap [m]
};

struct Scenario {
  Fleet fleet;
  CoopAssignment coop;
  std::uint64_t seed{0};
  double lane_source{0.0};  ///< lateral centre of the CAV's lane [m]
  double lane_target{0.0};  ///< lateral centre of the CHDVs' lane [m]

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

namespace detail {

/// Places the four CHDVs (speeds already set) on `lane_y` around the CAV.
/// Each gap follows the follower's speed; the CAV sits at the midpoint of
/// the two near vehicles.
inline void place_cohort(Fleet& f, double cav_x, double lane_y, const SafetyParams& p,
                         const LayoutParams& layout) {
  auto centre_gap = [&](double v_follower) {
    return std::max(initial_headway(v_follower, layout.t_h, p.l_v), layout.min_gap) + p.l_v;
  };
  const double near_gap = centre_gap(f[Role::FHDV_near].v);
  f[Role::FHDV_near].x = cav_x - 0.5 * near_gap;
  f[Role::PHDV_near].x = cav_x + 0.5 * near_gap;
  f[Role::FHDV_far].x = f[Role::FHDV_near].x - centre_gap(f[Role::FHDV_far].v);
  f[Role::PHDV_far].x = f[Role::PHDV_near].x + centre_gap(f[Role::PHDV_near].v);
  for (Role r : kChdvRoles) {
    f[r].y = lane_y;
    f[r].a = 0.0;
  }
}

}  // namespace detail

/// Seeded initial conditions for a single lane change.
///
/// Draw order is TCAV, FHDV_near, PHDV_near, FHDV_far, PHDV_far. The CAV is on
/// lateral position 0, the CHDVs on the adjacent lane at l_w.
inline Scenario build_scenario(double mu_mph, double sigma_mph, const CoopAssignment& coop,
                               std::uint64_t seed, const SafetyParams& p = {},
                               const LayoutParams& layout = {}) {
  if (!(mu_mph > 0.0)) throw std::invalid_argument("build_scenario: mu must be positive");
  if (!(sigma_mph >= 0.0)) throw std::invalid_argument("build_scenario: sigma must be >= 0");

  Scenario sc;
  sc.coop = coop;
  sc.seed = seed;
  sc.lane_source = 0.0;
  sc.lane_target = p.l_w;

  SpeedSampler rng(seed);
  for (std::size_t i = 0; i < kNumRoles; ++i) sc.fleet.s[i].v = rng.speed_mps(mu_mph, sigma_mph);

  sc.fleet[Role::TCAV].x = 0.0;
  sc.fleet[Role::TCAV].y = sc.lane_source;
  detail::place_cohort(sc.fleet, 0.0, sc.lane_target, p, layout);
  return sc;
}

}  // namespace coopmpc
