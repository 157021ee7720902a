//! Procedural driving-scene generator.
//!
//! Scenes are built on four layout families (straight road, curved road,
//! four-way intersection, lane merge). Agents track lane-based routes with a
//! gap-keeping longitudinal rule and a look-ahead steering rule, integrated
//! with the kinematic bicycle model, so every recorded trajectory is exactly
//! representable by in-bound actions. Behavior labels and the ego maneuver
//! window are recorded for retrieval-quality evaluation only; no model reads
//! them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Manifest, ManifestSpec, SceneInfo, SplitInfo};
use crate::dynamics::{euler_step, BicycleParams};
use crate::rng::stream;
use crate::types::{
    segment_scene, wrap_angle, Action, AgentState, Scene, SegmentSpec, DT,
};
use crate::{Error, Result};

const LANE_WIDTH: f64 = 3.5;
const CAR_LENGTH: f64 = 5.0;
/// Steering command clamp; stays inside the 0.7 rad action bound.
const STEER_CMD_MAX: f64 = 0.5;
/// Acceleration command clamps; stay inside the 8 m/s^2 action bound.
const ACCEL_CMD_MAX: f64 = 2.5;
const BRAKE_CMD_MAX: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Straight,
    Curved,
    Intersection,
    Merge,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::Straight => "straight-road",
            Layout::Curved => "curved-road",
            Layout::Intersection => "intersection",
            Layout::Merge => "lane-merge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    LaneFollow,
    LaneChange,
    LeftTurn,
    RightTurn,
    StopAndGo,
    Yield,
}

impl Behavior {
    pub fn name(&self) -> &'static str {
        match self {
            Behavior::LaneFollow => "lane-follow",
            Behavior::LaneChange => "lane-change",
            Behavior::LeftTurn => "left-turn",
            Behavior::RightTurn => "right-turn",
            Behavior::StopAndGo => "stop-and-go",
            Behavior::Yield => "yield",
        }
    }

    /// Five-way class used by the retrieval sanity check.
    pub fn class(&self) -> &'static str {
        match self {
            Behavior::LaneFollow => "straight",
            Behavior::LaneChange => "lane-change",
            Behavior::LeftTurn => "left-turn",
            Behavior::RightTurn => "right-turn",
            Behavior::StopAndGo | Behavior::Yield => "stop",
        }
    }

    pub fn from_name(name: &str) -> Option<Behavior> {
        Some(match name {
            "lane-follow" => Behavior::LaneFollow,
            "lane-change" => Behavior::LaneChange,
            "left-turn" => Behavior::LeftTurn,
            "right-turn" => Behavior::RightTurn,
            "stop-and-go" => Behavior::StopAndGo,
            "yield" => Behavior::Yield,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Layout,
    /// Total agents including the ego.
    pub agent_count: usize,
    /// Behavior per agent; index 0 is the ego.
    pub behaviors: Vec<Behavior>,
    pub duration_steps: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub layout: Layout,
    pub behaviors: Vec<Behavior>,
    /// Anchor-step interval in which segments carry the ego behavior class.
    pub ego_active_window: (usize, usize),
}

/// A dense polyline with arc-length lookup.
#[derive(Debug, Clone)]
struct Route {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Route {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(acc);
        }
        Route { pts, cum }
    }

    fn total(&self) -> f64 {
        *self.cum.last().expect("non-empty")
    }

    fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.total());
        let idx = match self.cum.binary_search_by(|c| c.partial_cmp(&s).expect("finite")) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.pts.len() - 2);
        let seg = self.cum[idx + 1] - self.cum[idx];
        let t = if seg > 0.0 { (s - self.cum[idx]) / seg } else { 0.0 };
        let (a, b) = (self.pts[idx], self.pts[idx + 1]);
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
    }

    fn heading_at(&self, s: f64) -> f64 {
        let p0 = self.point_at((s - 0.5).max(0.0));
        let p1 = self.point_at((s + 0.5).min(self.total()));
        (p1[1] - p0[1]).atan2(p1[0] - p0[0])
    }

    /// Arc position of the closest point, searched forward from a hint.
    fn project_from(&self, p: [f64; 2], hint: f64) -> f64 {
        let mut best = (f64::INFINITY, hint);
        let mut s = (hint - 4.0).max(0.0);
        let end = (hint + 12.0).min(self.total());
        while s <= end {
            let q = self.point_at(s);
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d < best.0 {
                best = (d, s);
            }
            s += 0.5;
        }
        best.1
    }
}

fn line_route(from: [f64; 2], to: [f64; 2], step: f64) -> Vec<[f64; 2]> {
    let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [from[0] + (to[0] - from[0]) * t, from[1] + (to[1] - from[1]) * t]
        })
        .collect()
}

fn arc_route(center: [f64; 2], radius: f64, a0: f64, a1: f64, step: f64) -> Vec<[f64; 2]> {
    let span = (a1 - a0).abs() * radius;
    let n = (span / step).ceil().max(2.0) as usize;
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Per-agent simulation plan.
#[derive(Debug, Clone)]
struct AgentPlan {
    behavior: Behavior,
    route: Route,
    cruise: f64,
    spawn_s: f64,
    /// Target speed drops to `speed` inside [from, to] (arc meters).
    slow_zone: Option<(f64, f64, f64)>,
    /// Hold at (arc) line until time (seconds): the yield rule.
    hold_until: Option<(f64, f64)>,
    /// Timed full stop window (seconds): stop-and-go.
    stop_window: Option<(f64, f64)>,
    /// Arc interval of the labeled maneuver, for the active window.
    maneuver_arc: Option<(f64, f64)>,
}

struct LayoutWorld {
    lanes: Vec<Vec<[f64; 2]>>,
    plans: Vec<AgentPlan>,
}

/// Lateral pre-maneuver bias: drivers drift toward the turn side before the
/// turn entry. Gives histories a subtle, future-relevant cue.
fn biased_approach(from: [f64; 2], entry: [f64; 2], heading: f64, side: f64) -> Vec<[f64; 2]> {
    let (sin, cos) = heading.sin_cos();
    let (nx, ny) = (-sin, cos);
    let mut pts = line_route(from, entry, 1.0);
    let total = ((entry[0] - from[0]).powi(2) + (entry[1] - from[1]).powi(2)).sqrt();
    let n = pts.len();
    for (i, p) in pts.iter_mut().enumerate() {
        let dist_to_entry = total * (1.0 - i as f64 / (n - 1) as f64);
        if dist_to_entry < 35.0 {
            let bias = side * 0.65 * (1.0 - dist_to_entry / 35.0);
            p[0] += nx * bias;
            p[1] += ny * bias;
        }
    }
    pts
}

fn build_straight(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<LayoutWorld> {
    let n_lanes = rng.gen_range(2..=4usize);
    let half = 140.0;
    let lane_y =
        |i: usize| -> f64 { (i as f64 - (n_lanes as f64 - 1.0) / 2.0) * LANE_WIDTH };
    let lanes: Vec<Vec<[f64; 2]>> = (0..n_lanes)
        .map(|i| line_route([-half, lane_y(i)], [half, lane_y(i)], 2.0))
        .collect();

    let mut plans = Vec::with_capacity(spec.agent_count);
    let mut next_slot = vec![0usize; n_lanes];
    for behavior in &spec.behaviors {
        let lane = rng.gen_range(0..n_lanes);
        let slot = next_slot[lane];
        next_slot[lane] += 1;
        let spawn_s = 24.0 * slot as f64 + rng.gen_range(0.0..6.0);
        let cruise = rng.gen_range(7.0..12.5);
        let (route, maneuver_arc, behavior) = match behavior {
            Behavior::LaneChange => {
                let target = if lane + 1 < n_lanes { lane + 1 } else { lane - 1 };
                // The change starts a few seconds in so it is always inside
                // the recorded window.
                let s_c = spawn_s + cruise * rng.gen_range(2.5..5.5);
                let mut pts = Vec::new();
                let y0 = lane_y(lane);
                let y1 = lane_y(target);
                let mut x = -half;
                while x <= half {
                    let local_s = x + half;
                    let t = ((local_s - s_c) / 30.0).clamp(0.0, 1.0);
                    let blend = t * t * (3.0 - 2.0 * t);
                    pts.push([x, y0 + (y1 - y0) * blend]);
                    x += 1.0;
                }
                (Route::new(pts), Some((s_c, s_c + 30.0)), Behavior::LaneChange)
            }
            b => (Route::new(lanes[lane].clone()), None, *b),
        };
        let stop_window = match behavior {
            Behavior::StopAndGo | Behavior::Yield => {
                let t0 = rng.gen_range(2.0..4.0);
                Some((t0, t0 + rng.gen_range(2.8..4.2)))
            }
            _ => None,
        };
        plans.push(AgentPlan {
            behavior: if behavior == Behavior::Yield {
                Behavior::StopAndGo
            } else {
                behavior
            },
            route,
            cruise,
            spawn_s,
            slow_zone: None,
            hold_until: None,
            stop_window,
            maneuver_arc,
        });
    }
    Ok(LayoutWorld { lanes, plans })
}

fn build_curved(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<LayoutWorld> {
    let n_lanes = rng.gen_range(2..=3usize);
    let radius = rng.gen_range(45.0..110.0);
    let mirror = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let span = 240.0 / radius;
    let center = [0.0, radius * mirror];
    let lane_r = |i: usize| radius + (i as f64 - (n_lanes as f64 - 1.0) / 2.0) * LANE_WIDTH;
    let lanes: Vec<Vec<[f64; 2]>> = (0..n_lanes)
        .map(|i| {
            let r = lane_r(i);
            let a0 = -std::f64::consts::FRAC_PI_2 * mirror - span / 2.0;
            let a1 = -std::f64::consts::FRAC_PI_2 * mirror + span / 2.0;
            let pts = arc_route(center, r, a0, a1, 2.0);
            if mirror > 0.0 {
                pts
            } else {
                pts.into_iter().rev().collect()
            }
        })
        .collect();

    let mut plans = Vec::with_capacity(spec.agent_count);
    let mut next_slot = vec![0usize; n_lanes];
    for behavior in &spec.behaviors {
        let lane = rng.gen_range(0..n_lanes);
        let slot = next_slot[lane];
        next_slot[lane] += 1;
        let cruise = rng.gen_range(6.5..10.5);
        let spawn_s = 8.0 + 22.0 * slot as f64 + rng.gen_range(0.0..5.0);
        let stop_window = match behavior {
            Behavior::StopAndGo | Behavior::Yield => {
                let t0 = rng.gen_range(2.0..4.0);
                Some((t0, t0 + rng.gen_range(2.8..4.2)))
            }
            _ => None,
        };
        plans.push(AgentPlan {
            behavior: if matches!(behavior, Behavior::StopAndGo | Behavior::Yield) {
                Behavior::StopAndGo
            } else {
                Behavior::LaneFollow
            },
            route: Route::new(lanes[lane].clone()),
            cruise,
            spawn_s,
            slow_zone: None,
            hold_until: None,
            stop_window,
            maneuver_arc: None,
        });
    }
    Ok(LayoutWorld { lanes, plans })
}

/// Four approaches with right-hand traffic: through lanes plus left/right
/// turn connectors. Approach index k is rotated by k * 90 degrees.
fn build_intersection(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<LayoutWorld> {
    let half = 130.0;
    let off = LANE_WIDTH / 2.0;
    let rot = |k: usize, p: [f64; 2]| -> [f64; 2] {
        match k % 4 {
            0 => p,
            1 => [-p[1], p[0]],
            2 => [-p[0], -p[1]],
            _ => [p[1], -p[0]],
        }
    };
    // Canonical approach 0 drives +x at y = -off.
    let mut lanes: Vec<Vec<[f64; 2]>> = Vec::new();
    for k in 0..4 {
        lanes.push(
            line_route([-half, -off], [half, -off], 2.0)
                .into_iter()
                .map(|p| rot(k, p))
                .collect(),
        );
    }
    let r_right = 2.0 * off; // exits onto the clockwise road
    let r_left = 3.0 * off + 2.0; // crosses to the counter-clockwise road
    for k in 0..4 {
        // Right turn: from (+x, y=-off) onto (heading -y, x=-off).
        let entry_x = -off - r_right;
        let right: Vec<[f64; 2]> = arc_route(
            [entry_x, -off - r_right],
            r_right,
            std::f64::consts::FRAC_PI_2,
            0.0,
            1.0,
        );
        let mut pts = line_route([entry_x - 12.0, -off], [entry_x, -off], 1.0);
        pts.extend(right.into_iter().skip(1));
        pts.extend(line_route([-off, -off - r_right], [-off, -off - r_right - 12.0], 1.0).into_iter().skip(1));
        lanes.push(pts.into_iter().map(|p| rot(k, p)).collect());

        // Left turn: from (+x, y=-off) onto (heading +y, x=+off).
        let entry_x2 = off - r_left;
        let left: Vec<[f64; 2]> = arc_route(
            [entry_x2, -off + r_left],
            r_left,
            -std::f64::consts::FRAC_PI_2,
            0.0,
            1.0,
        );
        let mut pts = line_route([entry_x2 - 12.0, -off], [entry_x2, -off], 1.0);
        pts.extend(left.into_iter().skip(1));
        pts.extend(line_route([off, -off + r_left], [off, -off + r_left + 12.0], 1.0).into_iter().skip(1));
        lanes.push(pts.into_iter().map(|p| rot(k, p)).collect());
    }

    let mut plans = Vec::with_capacity(spec.agent_count);
    let mut slot_of_approach = vec![0usize; 4];
    for (i, behavior) in spec.behaviors.iter().enumerate() {
        // The ego picks its approach first; others round-robin the rest.
        let approach = if i == 0 { rng.gen_range(0..4) } else { rng.gen_range(0..4) };
        let slot = slot_of_approach[approach];
        slot_of_approach[approach] += 1;
        let cruise = rng.gen_range(7.0..11.0);
        // Slot agents so crossing traffic arrives staggered.
        let arrival = 3.0 + 2.2 * (slot as f64 * 4.0 + approach as f64) / 4.0
            + rng.gen_range(-0.4..0.4);
        let approach_len = half - 8.0;
        let spawn_dist = (cruise * arrival).min(approach_len - 6.0 * slot as f64);

        let turn_side = match behavior {
            Behavior::RightTurn => -1.0,
            Behavior::LeftTurn => 1.0,
            _ => 0.0,
        };
        let make_turn_route = |is_left: bool| -> (Route, (f64, f64)) {
            let (entry_x, arc, exit): (f64, Vec<[f64; 2]>, Vec<[f64; 2]>) = if is_left {
                let e = off - r_left;
                (
                    e,
                    arc_route(
                        [e, -off + r_left],
                        r_left,
                        -std::f64::consts::FRAC_PI_2,
                        0.0,
                        1.0,
                    ),
                    line_route([off, -off + r_left], [off, half], 1.0),
                )
            } else {
                let e = -off - r_right;
                (
                    e,
                    arc_route(
                        [e, -off - r_right],
                        r_right,
                        std::f64::consts::FRAC_PI_2,
                        0.0,
                        1.0,
                    ),
                    line_route([-off, -off - r_right], [-off, -half], 1.0),
                )
            };
            let side = if is_left { 1.0 } else { -1.0 };
            let mut pts = biased_approach([-half, -off], [entry_x, -off], 0.0, side);
            let arc_start = Route::new(pts.clone()).total();
            pts.extend(arc.into_iter().skip(1));
            let arc_end = Route::new(pts.clone()).total();
            pts.extend(exit.into_iter().skip(1));
            let rotated: Vec<[f64; 2]> = pts.into_iter().map(|p| rot(approach, p)).collect();
            (Route::new(rotated), (arc_start, arc_end))
        };

        let (route, maneuver_arc, slow_zone, hold_until) = match behavior {
            Behavior::LeftTurn | Behavior::RightTurn => {
                let (route, (a0, a1)) = make_turn_route(turn_side > 0.0);
                let v_turn = rng.gen_range(3.0..4.5);
                (route, Some((a0, a1)), Some((a0, a1, v_turn)), None)
            }
            Behavior::Yield => {
                let through: Vec<[f64; 2]> = line_route([-half, -off], [half, -off], 1.0)
                    .into_iter()
                    .map(|p| rot(approach, p))
                    .collect();
                let route = Route::new(through);
                let line = half - off - 7.0;
                let release = arrival + rng.gen_range(1.2..3.0);
                (route, Some((line, line + 14.0)), None, Some((line, release)))
            }
            _ => {
                let through: Vec<[f64; 2]> = line_route([-half, -off], [half, -off], 1.0)
                    .into_iter()
                    .map(|p| rot(approach, p))
                    .collect();
                (Route::new(through), None, None, None)
            }
        };
        let spawn_s = (route.total() / 2.0 - spawn_dist).max(2.0);
        plans.push(AgentPlan {
            behavior: *behavior,
            route,
            cruise,
            spawn_s,
            slow_zone,
            hold_until,
            stop_window: match behavior {
                Behavior::StopAndGo => {
                    let t0 = rng.gen_range(2.0..4.0);
                    Some((t0, t0 + rng.gen_range(2.8..4.2)))
                }
                _ => None,
            },
            maneuver_arc,
        });
    }
    Ok(LayoutWorld { lanes, plans })
}

fn build_merge(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<LayoutWorld> {
    let half = 140.0;
    let main = line_route([-half, 0.0], [half, 0.0], 2.0);
    // Ramp runs parallel then converges onto the main lane.
    let mut ramp = Vec::new();
    let mut x = -half;
    while x <= half {
        let t = ((x + 30.0) / 60.0).clamp(0.0, 1.0);
        let blend = t * t * (3.0 - 2.0 * t);
        ramp.push([x, -LANE_WIDTH * (1.0 - blend)]);
        x += 1.0;
    }
    let lanes = vec![main.clone(), ramp.clone()];

    let mut plans = Vec::with_capacity(spec.agent_count);
    let mut slots = [0usize; 2];
    for behavior in &spec.behaviors {
        let on_ramp = matches!(behavior, Behavior::LaneChange) || rng.gen_bool(0.3);
        let lane = usize::from(on_ramp);
        let slot = slots[lane];
        slots[lane] += 1;
        let cruise = rng.gen_range(7.0..11.5);
        // Ramp agents spawn close enough to reach the merge zone early.
        let spawn_s = if on_ramp {
            (half - 30.0 - cruise * rng.gen_range(2.5..5.5) - 20.0 * slot as f64).max(2.0)
        } else {
            6.0 + 24.0 * slot as f64 + rng.gen_range(0.0..6.0)
        };
        let route = Route::new(lanes[lane].clone());
        // Merge zone on the ramp: arc range of x in [-30, 30].
        let maneuver_arc = if on_ramp {
            Some((half - 30.0, half + 30.0))
        } else {
            None
        };
        plans.push(AgentPlan {
            behavior: if on_ramp {
                Behavior::LaneChange
            } else {
                Behavior::LaneFollow
            },
            route,
            cruise,
            spawn_s,
            slow_zone: None,
            hold_until: None,
            stop_window: match behavior {
                Behavior::StopAndGo | Behavior::Yield => {
                    let t0 = rng.gen_range(2.0..4.0);
                    Some((t0, t0 + rng.gen_range(2.8..4.2)))
                }
                _ => None,
            },
            maneuver_arc,
        });
    }
    Ok(LayoutWorld { lanes, plans })
}

struct SimAgent {
    plan: AgentPlan,
    state: AgentState,
    s: f64,
    /// Step range where the maneuver was active.
    active: Option<(usize, usize)>,
}

/// Deterministic per-spec simulation of one scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene> {
    if spec.agent_count == 0 || spec.behaviors.len() != spec.agent_count {
        return Err(Error::Config(format!(
            "behavior list (len {}) must cover all {} agents",
            spec.behaviors.len(),
            spec.agent_count
        )));
    }
    if spec.agent_count > 20 {
        return Err(Error::Config("at most 20 agents per scene".into()));
    }
    let mut rng = stream(spec.seed, &[0x7363_656e]);
    let world = match spec.layout {
        Layout::Straight => build_straight(spec, &mut rng)?,
        Layout::Curved => build_curved(spec, &mut rng)?,
        Layout::Intersection => build_intersection(spec, &mut rng)?,
        Layout::Merge => build_merge(spec, &mut rng)?,
    };
    // Capacity: routes must be long enough to hold their spawn slots.
    for plan in &world.plans {
        if plan.spawn_s < 0.0 || plan.spawn_s > plan.route.total() - 20.0 {
            return Err(Error::Config(format!(
                "agents exceed lane capacity in layout {}",
                spec.layout.name()
            )));
        }
    }

    let params = BicycleParams::default();
    let mut agents: Vec<SimAgent> = world
        .plans
        .into_iter()
        .map(|plan| {
            let p = plan.route.point_at(plan.spawn_s);
            let heading = plan.route.heading_at(plan.spawn_s);
            let speed = plan.cruise * 0.9;
            SimAgent {
                s: plan.spawn_s,
                state: AgentState::new(p[0], p[1], heading, speed),
                plan,
                active: None,
            }
        })
        .collect();

    let mut tracks: Vec<Vec<AgentState>> = vec![Vec::with_capacity(spec.duration_steps); agents.len()];
    for step in 0..spec.duration_steps {
        let now = step as f64 * DT;
        let snapshot: Vec<AgentState> = agents.iter().map(|a| a.state).collect();
        for (i, agent) in agents.iter_mut().enumerate() {
            tracks[i].push(agent.state);
            let action = control(agent, i, &snapshot, now, &params);
            // Maneuver bookkeeping for the active window.
            let in_maneuver = match (&agent.plan.maneuver_arc, &agent.plan.stop_window) {
                (Some((a0, a1)), _) => agent.s >= a0 - 2.0 && agent.s <= a1 + 2.0,
                (None, Some((t0, t1))) => now >= t0 - 0.5 && now <= t1 + 1.0,
                _ => false,
            };
            if in_maneuver {
                agent.active = Some(match agent.active {
                    Some((first, _)) => (first, step),
                    None => (step, step),
                });
            }
            agent.state = euler_step(&agent.state, &action, &params);
            agent.s = agent
                .plan
                .route
                .project_from([agent.state.x, agent.state.y], agent.s);
        }
    }

    // Drop later-indexed agents involved in sub-meter encounters; the ego is
    // never dropped. Collisions in evaluation must come from the planner.
    let mut keep = vec![true; agents.len()];
    loop {
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..agents.len() {
            if !keep[i] {
                continue;
            }
            for j in (i + 1)..agents.len() {
                if !keep[j] {
                    continue;
                }
                for t in 0..spec.duration_steps {
                    let (a, b) = (&tracks[i][t], &tracks[j][t]);
                    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                    if d < 1.0 {
                        let candidate = j.max(1);
                        if worst.map_or(true, |(_, wd)| d < wd) {
                            worst = Some((candidate, d));
                        }
                    }
                }
            }
        }
        match worst {
            Some((idx, _)) => keep[idx] = false,
            None => break,
        }
    }

    let ego_active = agents[0].active.unwrap_or((0, spec.duration_steps - 1));
    // Anchors whose near future overlaps the maneuver carry the label; the
    // start offset keeps the pre-maneuver cues inside the history window.
    let window_start = ego_active.0.saturating_sub(25);
    let window_end = ego_active.1.saturating_sub(5).max(window_start);

    let mut agent_tracks = Vec::new();
    let mut behaviors = Vec::new();
    for (i, agent) in agents.iter().enumerate() {
        if keep[i] {
            agent_tracks.push(std::mem::take(&mut tracks[i]));
            behaviors.push(agent.plan.behavior);
        }
    }

    Ok(GeneratedScene {
        scene: Scene {
            scene_id: format!("scene-{:08x}", spec.seed),
            agents: agent_tracks,
            lanes: world.lanes,
        },
        layout: spec.layout,
        behaviors,
        ego_active_window: (window_start, window_end),
    })
}

/// Longitudinal + lateral control for one agent.
fn control(agent: &SimAgent, idx: usize, all: &[AgentState], now: f64, params: &BicycleParams) -> Action {
    let plan = &agent.plan;
    let v = agent.state.speed;

    let mut v_target = plan.cruise;
    if let Some((a0, a1, v_turn)) = plan.slow_zone {
        if agent.s >= a0 - 25.0 && agent.s <= a1 {
            v_target = v_turn;
        }
    }
    if let Some((t0, t1)) = plan.stop_window {
        if now >= t0 && now <= t1 {
            v_target = 0.0;
        } else if now >= t0 - 1.5 && now < t0 {
            // Comfort pre-brake: a visible easing-off before the stop.
            v_target = v_target.min(plan.cruise * 0.55 * (t0 - now) / 1.5 + plan.cruise * 0.35);
        }
    }
    if let Some((line, release)) = plan.hold_until {
        if now < release && agent.s >= line - 18.0 && agent.s <= line {
            // Approach the hold line and wait there.
            let dist = (line - agent.s).max(0.0);
            v_target = v_target.min((dist * 0.8).max(0.0));
        }
    }

    let mut accel = if v_target == 0.0 {
        // Full stops brake harder so short windows still reach standstill.
        (1.6 * (v_target - v)).clamp(-5.0, ACCEL_CMD_MAX)
    } else {
        (1.2 * (v_target - v)).clamp(-4.0, ACCEL_CMD_MAX)
    };

    // Gap keeping against the nearest leader in our corridor.
    let me = &agent.state;
    let (sin, cos) = me.heading.sin_cos();
    let mut nearest: Option<(f64, f64)> = None;
    for (j, other) in all.iter().enumerate() {
        if j == idx {
            continue;
        }
        let dx = other.x - me.x;
        let dy = other.y - me.y;
        let ahead = dx * cos + dy * sin;
        let lateral = (-dx * sin + dy * cos).abs();
        if ahead > 0.5 && ahead < 45.0 && lateral < 2.2 {
            let heading_align = (other.heading - me.heading).cos();
            if heading_align > 0.2 && nearest.map_or(true, |(d, _)| ahead < d) {
                nearest = Some((ahead, other.speed));
            }
        }
    }
    if let Some((dist, lead_speed)) = nearest {
        let gap = dist - CAR_LENGTH;
        let desired = 1.2 * v + 6.0;
        if gap < desired {
            let brake = -0.8 * (desired - gap) - 0.6 * (v - lead_speed).max(0.0);
            accel = accel.min(brake);
        }
    }
    accel = accel.clamp(-BRAKE_CMD_MAX, ACCEL_CMD_MAX);
    // Exact stop keeps speeds non-negative without violating bounds; a full
    // stop target snaps the slow exponential tail to zero.
    if v + accel * params.dt < 0.0 || (v_target == 0.0 && v < 0.55) {
        accel = -v / params.dt;
    }

    let steer = if v < 0.05 {
        0.0
    } else {
        let lookahead = (0.5 * v + 2.0).clamp(2.5, 9.0);
        let target = plan.route.point_at(agent.s + lookahead);
        let alpha = wrap_angle((target[1] - me.y).atan2(target[0] - me.x) - me.heading);
        (2.0 * params.wheelbase * alpha.sin() / lookahead)
            .atan()
            .clamp(-STEER_CMD_MAX, STEER_CMD_MAX)
    };

    Action { accel, steer }
}

/// Behavior menu per layout with sampling weights for the ego.
fn ego_behavior(layout: Layout, rng: &mut ChaCha8Rng) -> Behavior {
    let roll: f64 = rng.gen();
    match layout {
        Layout::Intersection => {
            if roll < 0.28 {
                Behavior::LeftTurn
            } else if roll < 0.56 {
                Behavior::RightTurn
            } else if roll < 0.78 {
                Behavior::Yield
            } else {
                Behavior::LaneFollow
            }
        }
        Layout::Straight => {
            if roll < 0.38 {
                Behavior::LaneChange
            } else if roll < 0.68 {
                Behavior::StopAndGo
            } else {
                Behavior::LaneFollow
            }
        }
        Layout::Curved => {
            if roll < 0.4 {
                Behavior::StopAndGo
            } else {
                Behavior::LaneFollow
            }
        }
        Layout::Merge => {
            if roll < 0.55 {
                Behavior::LaneChange
            } else {
                Behavior::LaneFollow
            }
        }
    }
}

fn other_behavior(layout: Layout, rng: &mut ChaCha8Rng) -> Behavior {
    let roll: f64 = rng.gen();
    match layout {
        Layout::Intersection => {
            if roll < 0.2 {
                Behavior::LeftTurn
            } else if roll < 0.4 {
                Behavior::RightTurn
            } else if roll < 0.55 {
                Behavior::Yield
            } else {
                Behavior::LaneFollow
            }
        }
        _ => {
            if roll < 0.15 {
                Behavior::StopAndGo
            } else if roll < 0.3 && layout == Layout::Straight {
                Behavior::LaneChange
            } else {
                Behavior::LaneFollow
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusParams {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    pub stride: usize,
    pub spec: SegmentSpec,
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_duration_steps: usize,
    pub max_duration_steps: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            train_scenes: 2000,
            val_scenes: 200,
            seed: 0,
            stride: 5,
            spec: SegmentSpec::default(),
            min_agents: 3,
            max_agents: 12,
            min_duration_steps: 101,
            max_duration_steps: 151,
        }
    }
}

pub struct BuiltCorpus {
    pub train: Dataset,
    pub val: Dataset,
    pub manifest: Manifest,
}

fn scene_spec(index: usize, params: &CorpusParams) -> SceneSpec {
    let mut rng = stream(params.seed, &[0x636f_7270, index as u64]);
    let layout = match rng.gen_range(0..100) {
        0..=29 => Layout::Straight,
        30..=49 => Layout::Curved,
        50..=84 => Layout::Intersection,
        _ => Layout::Merge,
    };
    let agent_count = rng.gen_range(params.min_agents..=params.max_agents);
    let mut behaviors = vec![ego_behavior(layout, &mut rng)];
    for _ in 1..agent_count {
        behaviors.push(other_behavior(layout, &mut rng));
    }
    SceneSpec {
        seed: params.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)),
        layout,
        agent_count,
        behaviors,
        duration_steps: rng.gen_range(params.min_duration_steps..=params.max_duration_steps),
    }
}

/// Generate all scenes, segment them, and assemble the two splits plus the
/// manifest. Scene ids are disjoint across splits; the retrieval database is
/// the training split.
pub fn build_corpus(
    params: &CorpusParams,
    config_hash: &str,
    git_revision: &str,
) -> Result<BuiltCorpus> {
    let total = params.train_scenes + params.val_scenes;
    let generated: Vec<GeneratedScene> = (0..total)
        .into_par_iter()
        .map(|i| generate_scene(&scene_spec(i, params)))
        .collect::<Result<Vec<_>>>()?;

    let mut train = Dataset::new(params.spec);
    let mut val = Dataset::new(params.spec);
    let mut scenes_info = Vec::with_capacity(total);
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut next_segment_id = 0u64;
    for (i, g) in generated.iter().enumerate() {
        let split_train = i < params.train_scenes;
        let segs = segment_scene(&g.scene, params.stride, &params.spec)?;
        let target = if split_train { &mut train } else { &mut val };
        for seg in &segs {
            target.push(next_segment_id, seg);
            next_segment_id += 1;
        }
        if split_train {
            train_ids.push(g.scene.scene_id.clone());
        } else {
            val_ids.push(g.scene.scene_id.clone());
        }
        scenes_info.push(SceneInfo {
            scene_id: g.scene.scene_id.clone(),
            split: if split_train { "train" } else { "val" }.to_string(),
            layout: g.layout.name().to_string(),
            behaviors: g.behaviors.iter().map(|b| b.name().to_string()).collect(),
            ego_active_window: g.ego_active_window,
        });
    }

    let manifest = Manifest {
        version: 1,
        config_hash: config_hash.to_string(),
        git_revision: git_revision.to_string(),
        dt: DT,
        spec: ManifestSpec {
            history_steps: params.spec.history_steps,
            future_steps: params.spec.future_steps,
            max_agents: params.spec.max_agents,
            max_lanes: params.spec.max_lanes,
            pts_per_lane: params.spec.pts_per_lane,
            stride: params.stride,
        },
        splits: vec![
            SplitInfo {
                name: "train".into(),
                file: "train.rdseg".into(),
                scene_ids: train_ids,
                segment_count: train.len(),
            },
            SplitInfo {
                name: "val".into(),
                file: "val.rdseg".into(),
                scene_ids: val_ids,
                segment_count: val.len(),
            },
        ],
        scenes: scenes_info,
    };
    Ok(BuiltCorpus {
        train,
        val,
        manifest,
    })
}
