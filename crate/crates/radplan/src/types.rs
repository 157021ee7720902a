//! Shared domain types, coordinate conventions, and dataset segmentation.
//!
//! All geometry is planar. Angles live in (-pi, pi]; every segment is
//! expressed in the ego frame anchored at the last history state, so the ego
//! history always ends at exactly (0, 0, heading 0).

use std::f64::consts::PI;

use crate::{Error, Result};

/// Step between consecutive trajectory waypoints, seconds.
pub const DT: f64 = 0.1;

/// Normalize an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a % two_pi;
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Planar kinematic state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading, radians in (-pi, pi].
    pub heading: f64,
    /// Speed along the heading, m/s. Dataset states are non-negative;
    /// kinematic rollouts may transiently dip below zero when braking.
    pub speed: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        AgentState {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Fixed-rate state sequence with a per-step validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, valid: Vec<bool>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Shape("trajectory must have at least one state".into()));
        }
        if states.len() != valid.len() {
            return Err(Error::Shape(format!(
                "trajectory has {} states but {} valid flags",
                states.len(),
                valid.len()
            )));
        }
        Ok(Trajectory { states, valid })
    }

    pub fn all_valid(states: Vec<AgentState>) -> Result<Self> {
        let n = states.len();
        Trajectory::new(states, vec![true; n])
    }

    /// Fully-invalid placeholder used for padded agent slots.
    pub fn invalid(len: usize) -> Self {
        Trajectory {
            states: vec![AgentState::default(); len],
            valid: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|v| *v)
    }
}

/// Per-step control: longitudinal acceleration (m/s^2) and front-wheel
/// steering angle (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub accel: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    pub steps: Vec<Action>,
}

/// Magnitude limits for actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    pub accel_max: f64,
    pub steer_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        ActionBounds {
            accel_max: 8.0,
            steer_max: 0.7,
        }
    }
}

impl ActionSequence {
    pub fn new(steps: Vec<Action>) -> Self {
        ActionSequence { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn within(&self, bounds: &ActionBounds) -> bool {
        self.steps
            .iter()
            .all(|a| a.accel.abs() <= bounds.accel_max && a.steer.abs() <= bounds.steer_max)
    }

    /// Flattened (accel, steer) pairs, row per step.
    pub fn to_flat(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|a| [a.accel, a.steer]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "flat action buffer of length {} is not a [T,2] layout",
                flat.len()
            )));
        }
        Ok(ActionSequence {
            steps: flat
                .chunks_exact(2)
                .map(|c| Action {
                    accel: c[0],
                    steer: c[1],
                })
                .collect(),
        })
    }
}

/// Lane centerlines padded to a fixed [S, P, 2] shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneMap {
    /// Exactly `max_lanes` polylines of exactly `pts_per_lane` points each.
    pub polylines: Vec<Vec<[f64; 2]>>,
    pub valid: Vec<bool>,
    pub pts_per_lane: usize,
}

impl LaneMap {
    pub fn empty(max_lanes: usize, pts_per_lane: usize) -> Self {
        LaneMap {
            polylines: vec![vec![[0.0, 0.0]; pts_per_lane]; max_lanes],
            valid: vec![false; max_lanes],
            pts_per_lane,
        }
    }

    pub fn lane_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn max_lanes(&self) -> usize {
        self.polylines.len()
    }
}

/// Geometry of a segmentation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    /// History steps including the anchor (T_H * 10 + 1).
    pub history_steps: usize,
    /// Future steps (T_F * 10).
    pub future_steps: usize,
    pub max_agents: usize,
    pub max_lanes: usize,
    pub pts_per_lane: usize,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        SegmentSpec {
            history_steps: 21,
            future_steps: 40,
            max_agents: 20,
            max_lanes: 100,
            pts_per_lane: 50,
        }
    }
}

impl SegmentSpec {
    pub fn window_len(&self) -> usize {
        self.history_steps + self.future_steps
    }
}

/// One training/retrieval/evaluation unit: ego-frame agent histories, the ego
/// future, other agents' futures (needed for collision metrics), and the lane
/// map. Agent slot 0 is the ego; slots are padded to `max_agents`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub scene_id: String,
    pub anchor_time_index: usize,
    pub histories: Vec<Trajectory>,
    pub ego_future: Trajectory,
    /// Futures of agent slots 1.., aligned with `histories[1..]`.
    pub other_futures: Vec<Trajectory>,
    pub map: LaneMap,
}

/// The observation part of a segment: histories plus map, no future.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub histories: &'a [Trajectory],
    pub map: &'a LaneMap,
}

impl Segment {
    pub fn observation(&self) -> Observation<'_> {
        Observation {
            histories: &self.histories,
            map: &self.map,
        }
    }

    /// Current ego state (last history step).
    pub fn ego_anchor(&self) -> AgentState {
        *self.histories[0].states.last().expect("non-empty history")
    }
}

/// A full multi-agent recording in world coordinates. All agent tracks share
/// one clock; agent 0 is the ego.
#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<Vec<AgentState>>,
    pub lanes: Vec<Vec<[f64; 2]>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rigid transform of states into the frame anchored at `origin` (translate,
/// then rotate by -origin.heading). The origin maps to (0, 0, heading 0) with
/// its speed preserved.
pub fn to_ego_frame(states: &[AgentState], origin: &AgentState) -> Vec<AgentState> {
    let (sin, cos) = origin.heading.sin_cos();
    states
        .iter()
        .map(|s| {
            let dx = s.x - origin.x;
            let dy = s.y - origin.y;
            AgentState {
                x: dx * cos + dy * sin,
                y: -dx * sin + dy * cos,
                heading: wrap_angle(s.heading - origin.heading),
                speed: s.speed,
            }
        })
        .collect()
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(states: &[AgentState], origin: &AgentState) -> Vec<AgentState> {
    let (sin, cos) = origin.heading.sin_cos();
    states
        .iter()
        .map(|s| AgentState {
            x: origin.x + s.x * cos - s.y * sin,
            y: origin.y + s.x * sin + s.y * cos,
            heading: wrap_angle(s.heading + origin.heading),
            speed: s.speed,
        })
        .collect()
}

fn transform_traj(states: &[AgentState], origin: &AgentState) -> Trajectory {
    Trajectory::all_valid(to_ego_frame(states, origin)).expect("non-empty window")
}

/// Arc-length cumulative coordinates of a polyline.
fn cumulative_lengths(points: &[[f64; 2]]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut total = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        total += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        acc.push(total);
    }
    acc
}

/// Resample a polyline to exactly `count` points, uniform in arc length.
pub fn resample_polyline(points: &[[f64; 2]], count: usize) -> Vec<[f64; 2]> {
    assert!(count >= 2, "resample needs at least two points");
    if points.is_empty() {
        return vec![[0.0, 0.0]; count];
    }
    if points.len() == 1 {
        return vec![points[0]; count];
    }
    let lengths = cumulative_lengths(points);
    let total = *lengths.last().expect("non-empty");
    if total <= 0.0 {
        return vec![points[0]; count];
    }
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for i in 0..count {
        let target = total * i as f64 / (count - 1) as f64;
        while cursor + 1 < lengths.len() - 1 && lengths[cursor + 1] < target {
            cursor += 1;
        }
        let seg_len = lengths[cursor + 1] - lengths[cursor];
        let t = if seg_len > 0.0 {
            ((target - lengths[cursor]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = points[cursor];
        let b = points[cursor + 1];
        out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
    }
    out
}

fn point_to_polyline_dist2(p: [f64; 2], line: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for w in line.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - ax) * dx + (p[1] - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (ax + t * dx - p[0], ay + t * dy - p[1]);
        best = best.min(px * px + py * py);
    }
    if line.len() == 1 {
        let (px, py) = (line[0][0] - p[0], line[0][1] - p[1]);
        best = px * px + py * py;
    }
    best
}

/// Build the ego-frame lane map: the `max_lanes` polylines nearest the ego at
/// anchor time, each resampled to exactly `pts_per_lane` points.
fn build_lane_map(
    lanes: &[Vec<[f64; 2]>],
    origin: &AgentState,
    max_lanes: usize,
    pts_per_lane: usize,
) -> LaneMap {
    let mut order: Vec<(f64, usize)> = lanes
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (point_to_polyline_dist2(origin.position(), l), i))
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut map = LaneMap::empty(max_lanes, pts_per_lane);
    let (sin, cos) = origin.heading.sin_cos();
    for (slot, (_, lane_idx)) in order.into_iter().take(max_lanes).enumerate() {
        let resampled = resample_polyline(&lanes[lane_idx], pts_per_lane);
        map.polylines[slot] = resampled
            .into_iter()
            .map(|[x, y]| {
                let (dx, dy) = (x - origin.x, y - origin.y);
                [dx * cos + dy * sin, -dx * sin + dy * cos]
            })
            .collect();
        map.valid[slot] = true;
    }
    map
}

/// Cut a scene into overlapping windows, one segment per window that fully
/// fits, each re-expressed in its own ego frame. Scenes shorter than one
/// window yield an empty list.
pub fn segment_scene(scene: &Scene, stride: usize, spec: &SegmentSpec) -> Result<Vec<Segment>> {
    if stride == 0 {
        return Err(Error::Config("segmentation stride must be >= 1".into()));
    }
    if scene.agents.is_empty() {
        return Err(Error::Config("scene has no agents".into()));
    }
    let len = scene.len();
    for (i, track) in scene.agents.iter().enumerate() {
        if track.len() != len {
            return Err(Error::Shape(format!(
                "agent {i} track length {} differs from ego length {len}",
                track.len()
            )));
        }
    }
    let window = spec.window_len();
    if len < window {
        return Ok(Vec::new());
    }

    let mut out = Vec::new();
    let mut start = 0usize;
    while start + window <= len {
        let anchor = start + spec.history_steps - 1;
        let origin = scene.agents[0][anchor];

        // Ego first, then nearest-at-anchor ascending; ties by original index.
        let mut order: Vec<(f64, usize)> = scene.agents[1..]
            .iter()
            .enumerate()
            .map(|(i, track)| {
                let s = track[anchor];
                let d2 = (s.x - origin.x).powi(2) + (s.y - origin.y).powi(2);
                (d2, i + 1)
            })
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));

        let mut histories = Vec::with_capacity(spec.max_agents);
        let mut other_futures = Vec::with_capacity(spec.max_agents.saturating_sub(1));
        histories.push(transform_traj(&scene.agents[0][start..=anchor], &origin));
        let ego_future = transform_traj(
            &scene.agents[0][anchor + 1..start + window],
            &origin,
        );
        for (_, agent_idx) in order.iter().take(spec.max_agents - 1) {
            histories.push(transform_traj(
                &scene.agents[*agent_idx][start..=anchor],
                &origin,
            ));
            other_futures.push(transform_traj(
                &scene.agents[*agent_idx][anchor + 1..start + window],
                &origin,
            ));
        }
        while histories.len() < spec.max_agents {
            histories.push(Trajectory::invalid(spec.history_steps));
            other_futures.push(Trajectory::invalid(spec.future_steps));
        }

        out.push(Segment {
            scene_id: scene.scene_id.clone(),
            anchor_time_index: anchor,
            histories,
            ego_future,
            other_futures,
            map: build_lane_map(&scene.lanes, &origin, spec.max_lanes, spec.pts_per_lane),
        });
        start += stride;
    }
    Ok(out)
}
