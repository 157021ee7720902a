//! Open-loop planning metrics: displacement errors, collision rates, and
//! time-to-closest-encounter, plus per-run report aggregation.

use serde::{Deserialize, Serialize};

use crate::types::{Trajectory, DT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Center-to-center collision distance, meters.
    pub collision_threshold: f64,
    /// TTCE clip value, seconds.
    pub ttce_tau_max: f64,
    /// TTCE denominator stabilizer.
    pub ttce_delta: f64,
    /// Evaluate the sign-flipped encounter time -(p.v)/(|v|^2 + delta)
    /// instead of the as-written projection.
    pub ttce_flip_sign: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            collision_threshold: 2.0,
            ttce_tau_max: 4.0,
            ttce_delta: 1e-8,
            ttce_flip_sign: false,
        }
    }
}

/// Minimum over samples of the mean pointwise displacement to ground truth.
pub fn min_ade(gt: &Trajectory, samples: &[Trajectory]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("min_ade needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        if s.len() != gt.len() {
            return Err(Error::Shape(format!(
                "sample length {} vs ground truth {}",
                s.len(),
                gt.len()
            )));
        }
        let mut total = 0.0;
        for (a, b) in s.states.iter().zip(&gt.states) {
            total += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
        }
        best = best.min(total / gt.len() as f64);
    }
    Ok(best)
}

/// Minimum over samples of the final-point displacement.
pub fn min_fde(gt: &Trajectory, samples: &[Trajectory]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("min_fde needs at least one sample".into()));
    }
    let gl = gt.states.last().expect("non-empty");
    let mut best = f64::INFINITY;
    for s in samples {
        if s.len() != gt.len() {
            return Err(Error::Shape(format!(
                "sample length {} vs ground truth {}",
                s.len(),
                gt.len()
            )));
        }
        let sl = s.states.last().expect("non-empty");
        best = best.min(((sl.x - gl.x).powi(2) + (sl.y - gl.y).powi(2)).sqrt());
    }
    Ok(best)
}

fn sample_collides(ego: &Trajectory, others: &[Trajectory], cfg: &MetricConfig) -> bool {
    for other in others {
        let steps = ego.len().min(other.len());
        for t in 0..steps {
            if !other.valid[t] {
                continue;
            }
            let (a, b) = (&ego.states[t], &other.states[t]);
            let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
            if d2 < cfg.collision_threshold * cfg.collision_threshold {
                return true;
            }
        }
    }
    false
}

/// Collision flags across samples: minCR is the best sample (0 or 1), avgCR
/// is the collision fraction over the K samples.
pub fn collision_rates(
    ego_samples: &[Trajectory],
    others: &[Trajectory],
    cfg: &MetricConfig,
) -> (f64, f64) {
    if ego_samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    for ego in ego_samples {
        if sample_collides(ego, others, cfg) {
            hits += 1;
        }
    }
    let min_cr = if hits == ego_samples.len() { 1.0 } else { 0.0 };
    let avg_cr = hits as f64 / ego_samples.len() as f64;
    (min_cr, avg_cr)
}

/// Finite-difference velocities: forward differences of stored positions with
/// the last step repeated.
fn velocities(traj: &Trajectory) -> Vec<[f64; 2]> {
    let n = traj.len();
    let mut out = vec![[0.0, 0.0]; n];
    for t in 0..n.saturating_sub(1) {
        let (a, b) = (&traj.states[t], &traj.states[t + 1]);
        out[t] = [(b.x - a.x) / DT, (b.y - a.y) / DT];
    }
    if n >= 2 {
        out[n - 1] = out[n - 2];
    }
    out
}

/// Per-(agent, step) encounter times for one ego trajectory, reduced to the
/// segment's min and mean. Agents with no valid overlap contribute nothing;
/// a segment without any pair reads as (tau_max, tau_max).
pub fn ttce(ego: &Trajectory, others: &[Trajectory], cfg: &MetricConfig) -> (f64, f64) {
    let ego_vel = velocities(ego);
    let mut min_v = f64::INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for other in others {
        if !other.any_valid() {
            continue;
        }
        let vel = velocities(other);
        let steps = ego.len().min(other.len());
        for t in 0..steps {
            if !other.valid[t] || !ego.valid[t] {
                continue;
            }
            let p = [
                other.states[t].x - ego.states[t].x,
                other.states[t].y - ego.states[t].y,
            ];
            let v = [vel[t][0] - ego_vel[t][0], vel[t][1] - ego_vel[t][1]];
            let dot = p[0] * v[0] + p[1] * v[1];
            let vv = v[0] * v[0] + v[1] * v[1];
            let raw = if cfg.ttce_flip_sign {
                -dot / (vv + cfg.ttce_delta)
            } else {
                dot / (vv + cfg.ttce_delta)
            };
            let val = raw.max(0.0).min(cfg.ttce_tau_max);
            min_v = min_v.min(val);
            sum += val;
            count += 1;
        }
    }
    if count == 0 {
        (cfg.ttce_tau_max, cfg.ttce_tau_max)
    } else {
        (min_v, sum / count as f64)
    }
}

/// All metrics for one evaluated segment. TTCE values are means over the K
/// samples of each sample's (min, avg) reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub min_cr: f64,
    pub avg_cr: f64,
    pub min_ttce: f64,
    pub avg_ttce: f64,
}

pub fn evaluate_segment(
    gt: &Trajectory,
    samples: &[Trajectory],
    others: &[Trajectory],
    cfg: &MetricConfig,
) -> Result<SegmentMetrics> {
    let min_ade = min_ade(gt, samples)?;
    let min_fde = min_fde(gt, samples)?;
    let (min_cr, avg_cr) = collision_rates(samples, others, cfg);
    let mut min_ttce = 0.0;
    let mut avg_ttce = 0.0;
    for s in samples {
        let (mn, av) = ttce(s, others, cfg);
        min_ttce += mn;
        avg_ttce += av;
    }
    min_ttce /= samples.len() as f64;
    avg_ttce /= samples.len() as f64;
    Ok(SegmentMetrics {
        min_ade,
        min_fde,
        min_cr,
        avg_cr,
        min_ttce,
        avg_ttce,
    })
}

/// Mean of each metric over segments.
pub fn aggregate(rows: &[SegmentMetrics]) -> SegmentMetrics {
    let n = rows.len().max(1) as f64;
    let mut acc = SegmentMetrics {
        min_ade: 0.0,
        min_fde: 0.0,
        min_cr: 0.0,
        avg_cr: 0.0,
        min_ttce: 0.0,
        avg_ttce: 0.0,
    };
    for r in rows {
        acc.min_ade += r.min_ade;
        acc.min_fde += r.min_fde;
        acc.min_cr += r.min_cr;
        acc.avg_cr += r.avg_cr;
        acc.min_ttce += r.min_ttce;
        acc.avg_ttce += r.avg_ttce;
    }
    SegmentMetrics {
        min_ade: acc.min_ade / n,
        min_fde: acc.min_fde / n,
        min_cr: acc.min_cr / n,
        avg_cr: acc.avg_cr / n,
        min_ttce: acc.min_ttce / n,
        avg_ttce: acc.avg_ttce / n,
    }
}

/// One evaluation run (a single seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub aggregate: SegmentMetrics,
    pub per_segment: Vec<SegmentRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment_id: u64,
    pub scene_id: String,
    pub metrics: SegmentMetrics,
}

/// Full evaluation report: per-seed runs plus their mean and standard
/// deviation, with enough metadata to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: u8,
    pub setting_label: String,
    pub samples_per_segment: usize,
    pub segment_count: usize,
    pub config_hash: String,
    pub git_revision: String,
    pub metric_config: MetricConfig,
    pub runs: Vec<RunMetrics>,
    pub mean: SegmentMetrics,
    pub std: SegmentMetrics,
    /// Free-form run metadata (checkpoint paths, scheduler, ablations).
    pub notes: String,
}

impl EvalReport {
    /// Mean/std across runs from the per-run aggregates.
    pub fn finalize(&mut self) {
        let n = self.runs.len().max(1) as f64;
        let rows: Vec<SegmentMetrics> = self.runs.iter().map(|r| r.aggregate).collect();
        self.mean = aggregate(&rows);
        let var = |pick: fn(&SegmentMetrics) -> f64, mean: f64| {
            (rows.iter().map(|r| (pick(r) - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        self.std = SegmentMetrics {
            min_ade: var(|m| m.min_ade, self.mean.min_ade),
            min_fde: var(|m| m.min_fde, self.mean.min_fde),
            min_cr: var(|m| m.min_cr, self.mean.min_cr),
            avg_cr: var(|m| m.avg_cr, self.mean.avg_cr),
            min_ttce: var(|m| m.min_ttce, self.mean.min_ttce),
            avg_ttce: var(|m| m.avg_ttce, self.mean.avg_ttce),
        };
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Flat CSV, one row per (run, segment).
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={} git_revision={}\n",
            self.config_hash, self.git_revision
        );
        out.push_str("seed,segment_id,scene_id,min_ade,min_fde,min_cr,avg_cr,min_ttce,avg_ttce\n");
        for run in &self.runs {
            for row in &run.per_segment {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    run.seed,
                    row.segment_id,
                    row.scene_id,
                    row.metrics.min_ade,
                    row.metrics.min_fde,
                    row.metrics.min_cr,
                    row.metrics.avg_cr,
                    row.metrics.min_ttce,
                    row.metrics.avg_ttce
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::types::{from_ego_frame, AgentState};
    use rand::Rng;

    fn traj_from_xy(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::all_valid(
            points
                .iter()
                .map(|(x, y)| AgentState::new(*x, *y, 0.0, 0.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_sample_zeroes_displacement() {
        let gt = traj_from_xy(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let off = traj_from_xy(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let samples = vec![off, gt.clone()];
        assert_eq!(min_ade(&gt, &samples).unwrap(), 0.0);
        assert_eq!(min_fde(&gt, &samples).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_three_four_gives_five() {
        let gt = traj_from_xy(&[(0.0, 0.0), (1.0, 1.0)]);
        let sample = traj_from_xy(&[(3.0, 4.0), (4.0, 5.0)]);
        assert!((min_ade(&gt, &[sample.clone()]).unwrap() - 5.0).abs() < 1e-12);
        assert!((min_fde(&gt, &[sample]).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_error() {
        let gt = traj_from_xy(&[(0.0, 0.0), (1.0, 0.0)]);
        let bad = traj_from_xy(&[(0.0, 0.0)]);
        assert!(min_ade(&gt, &[bad]).is_err());
    }

    #[test]
    fn collision_rate_cases() {
        let cfg = MetricConfig::default();
        let near = traj_from_xy(&[(0.0, 0.0), (1.0, 0.0)]);
        let far = traj_from_xy(&[(100.0, 100.0), (101.0, 100.0)]);
        let other = vec![traj_from_xy(&[(0.3, 0.0), (1.3, 0.0)])];

        // No other agents at all.
        assert_eq!(collision_rates(&[near.clone()], &[], &cfg), (0.0, 0.0));
        // Every sample within half a meter of an agent.
        assert_eq!(
            collision_rates(&[near.clone(), near.clone()], &other, &cfg),
            (1.0, 1.0)
        );
        // One of six samples collides: (0, 1/6).
        let samples = vec![near, far.clone(), far.clone(), far.clone(), far.clone(), far];
        let (min_cr, avg_cr) = collision_rates(&samples, &other, &cfg);
        assert_eq!(min_cr, 0.0);
        assert!((avg_cr - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ttce_boundary_cases() {
        let cfg = MetricConfig::default();
        // Stationary pair: v = 0 so the projection is 0.
        let ego = traj_from_xy(&[(0.0, 0.0), (0.0, 0.0)]);
        let still = vec![traj_from_xy(&[(10.0, 0.0), (10.0, 0.0)])];
        let (mn, av) = ttce(&ego, &still, &cfg);
        assert_eq!(mn, 0.0);
        assert_eq!(av, 0.0);

        // Receding at p=(10,0), v=(+1,0): raw 10 clips to tau_max = 4.
        let other = vec![traj_from_xy(&[(10.0, 0.0), (10.1, 0.0)])];
        let (mn, av) = ttce(&ego, &other, &cfg);
        assert!((mn - 4.0).abs() < 1e-6);
        assert!((av - 4.0).abs() < 1e-6);

        // Approaching at v=(-1,0): raw -10, floored at 0.
        let other = vec![traj_from_xy(&[(10.0, 0.0), (9.9, 0.0)])];
        let (mn, _) = ttce(&ego, &other, &cfg);
        assert_eq!(mn, 0.0);

        // Sign-flipped variant turns the approaching case positive.
        let flipped = MetricConfig {
            ttce_flip_sign: true,
            ..cfg
        };
        let other = vec![traj_from_xy(&[(10.0, 0.0), (9.9, 0.0)])];
        let (mn, _) = ttce(&ego, &other, &flipped);
        assert!((mn - 4.0).abs() < 1e-6);
    }

    // Independent naive oracle used for the random-instance equivalence
    // check. Deliberately written as plain loops over the definitions.
    mod oracle {
        use super::*;

        pub fn min_ade(gt: &Trajectory, samples: &[Trajectory]) -> f64 {
            let mut best = f64::INFINITY;
            for s in samples {
                let mut acc = 0.0;
                let mut n = 0.0;
                for t in 0..gt.len() {
                    let dx = s.states[t].x - gt.states[t].x;
                    let dy = s.states[t].y - gt.states[t].y;
                    acc += (dx * dx + dy * dy).sqrt();
                    n += 1.0;
                }
                if acc / n < best {
                    best = acc / n;
                }
            }
            best
        }

        pub fn min_fde(gt: &Trajectory, samples: &[Trajectory]) -> f64 {
            let mut best = f64::INFINITY;
            let t = gt.len() - 1;
            for s in samples {
                let dx = s.states[t].x - gt.states[t].x;
                let dy = s.states[t].y - gt.states[t].y;
                let d = (dx * dx + dy * dy).sqrt();
                if d < best {
                    best = d;
                }
            }
            best
        }

        pub fn collision_rates(
            samples: &[Trajectory],
            others: &[Trajectory],
            cfg: &MetricConfig,
        ) -> (f64, f64) {
            let mut flags = Vec::new();
            for s in samples {
                let mut hit = false;
                for o in others {
                    for t in 0..s.len().min(o.len()) {
                        if !o.valid[t] {
                            continue;
                        }
                        let dx = s.states[t].x - o.states[t].x;
                        let dy = s.states[t].y - o.states[t].y;
                        if (dx * dx + dy * dy).sqrt() < cfg.collision_threshold {
                            hit = true;
                        }
                    }
                }
                flags.push(hit);
            }
            let total: usize = flags.iter().map(|f| usize::from(*f)).sum();
            let min_cr = if total == flags.len() { 1.0 } else { 0.0 };
            (min_cr, total as f64 / flags.len() as f64)
        }

        fn vels(t: &Trajectory) -> Vec<[f64; 2]> {
            // Independent forward differences with last-step repetition.
            let mut v = Vec::new();
            for i in 0..t.len() {
                let j = if i + 1 < t.len() { i } else { i.saturating_sub(1) };
                if t.len() < 2 {
                    v.push([0.0, 0.0]);
                    continue;
                }
                v.push([
                    (t.states[j + 1].x - t.states[j].x) / DT,
                    (t.states[j + 1].y - t.states[j].y) / DT,
                ]);
            }
            v
        }

        pub fn ttce(ego: &Trajectory, others: &[Trajectory], cfg: &MetricConfig) -> (f64, f64) {
            let ev = vels(ego);
            let mut vals = Vec::new();
            for o in others {
                if !o.valid.iter().any(|v| *v) {
                    continue;
                }
                let ov = vels(o);
                for t in 0..ego.len().min(o.len()) {
                    if !(o.valid[t] && ego.valid[t]) {
                        continue;
                    }
                    let px = o.states[t].x - ego.states[t].x;
                    let py = o.states[t].y - ego.states[t].y;
                    let vx = ov[t][0] - ev[t][0];
                    let vy = ov[t][1] - ev[t][1];
                    let mut raw = (px * vx + py * vy) / (vx * vx + vy * vy + cfg.ttce_delta);
                    if cfg.ttce_flip_sign {
                        raw = -raw;
                    }
                    vals.push(raw.max(0.0).min(cfg.ttce_tau_max));
                }
            }
            if vals.is_empty() {
                return (cfg.ttce_tau_max, cfg.ttce_tau_max);
            }
            let mn = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let av = vals.iter().sum::<f64>() / vals.len() as f64;
            (mn, av)
        }
    }

    fn random_traj(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Trajectory {
        Trajectory::all_valid(
            (0..len)
                .map(|_| {
                    AgentState::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        0.0,
                        0.0,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn random_instances_match_oracle_bit_for_bit() {
        let cfg = MetricConfig::default();
        let mut rng = stream(7, &[42]);
        for case in 0..200 {
            let t = rng.gen_range(2..=5);
            let k = rng.gen_range(1..=4);
            let n_others = rng.gen_range(0..=2);
            let gt = random_traj(&mut rng, t);
            let samples: Vec<Trajectory> = (0..k).map(|_| random_traj(&mut rng, t)).collect();
            let others: Vec<Trajectory> = (0..n_others).map(|_| random_traj(&mut rng, t)).collect();

            assert_eq!(
                min_ade(&gt, &samples).unwrap(),
                oracle::min_ade(&gt, &samples),
                "case {case} min_ade"
            );
            assert_eq!(
                min_fde(&gt, &samples).unwrap(),
                oracle::min_fde(&gt, &samples),
                "case {case} min_fde"
            );
            assert_eq!(
                collision_rates(&samples, &others, &cfg),
                oracle::collision_rates(&samples, &others, &cfg),
                "case {case} collision"
            );
            for s in &samples {
                assert_eq!(ttce(s, &others, &cfg), oracle::ttce(s, &others, &cfg));
            }
        }
    }

    #[test]
    fn min_ade_bounded_by_each_sample_and_cr_order() {
        let cfg = MetricConfig::default();
        let mut rng = stream(8, &[43]);
        for _ in 0..100 {
            let t = rng.gen_range(2..=6);
            let gt = random_traj(&mut rng, t);
            let samples: Vec<Trajectory> = (0..4).map(|_| random_traj(&mut rng, t)).collect();
            let others: Vec<Trajectory> = (0..2).map(|_| random_traj(&mut rng, t)).collect();
            let best = min_ade(&gt, &samples).unwrap();
            for s in &samples {
                let single = min_ade(&gt, std::slice::from_ref(s)).unwrap();
                assert!(best <= single + 1e-15);
            }
            let (mn, av) = collision_rates(&samples, &others, &cfg);
            assert!(mn <= av);
            for s in &samples {
                let (tmin, tavg) = ttce(s, &others, &cfg);
                assert!((0.0..=cfg.ttce_tau_max).contains(&tmin));
                assert!((0.0..=cfg.ttce_tau_max).contains(&tavg));
            }
        }
    }

    #[test]
    fn metrics_invariant_under_joint_rigid_transform() {
        let cfg = MetricConfig::default();
        let mut rng = stream(9, &[44]);
        let origin = AgentState::new(12.0, -7.0, 1.1, 0.0);
        for _ in 0..20 {
            let t = 5;
            let gt = random_traj(&mut rng, t);
            let samples: Vec<Trajectory> = (0..3).map(|_| random_traj(&mut rng, t)).collect();
            let others: Vec<Trajectory> = (0..2).map(|_| random_traj(&mut rng, t)).collect();
            let moved = |tr: &Trajectory| {
                Trajectory::all_valid(from_ego_frame(&tr.states, &origin)).unwrap()
            };
            let gt2 = moved(&gt);
            let samples2: Vec<Trajectory> = samples.iter().map(moved).collect();
            let others2: Vec<Trajectory> = others.iter().map(moved).collect();

            let a = evaluate_segment(&gt, &samples, &others, &cfg).unwrap();
            let b = evaluate_segment(&gt2, &samples2, &others2, &cfg).unwrap();
            assert!((a.min_ade - b.min_ade).abs() < 1e-9);
            assert!((a.min_fde - b.min_fde).abs() < 1e-9);
            assert_eq!(a.min_cr, b.min_cr);
            assert_eq!(a.avg_cr, b.avg_cr);
            assert!((a.min_ttce - b.min_ttce).abs() < 1e-6);
            assert!((a.avg_ttce - b.avg_ttce).abs() < 1e-6);
        }
    }
}
