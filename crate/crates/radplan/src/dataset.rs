//! Segment dataset files and their in-memory form.
//!
//! One file per split. Layout (little-endian, f32 floats):
//!
//! ```text
//! magic  b"RDSEG"
//! version u32 (currently 1)
//! header  dt f32, t_h f32, t_f f32, max_agents u32, max_lanes u32,
//!         pts_per_lane u32
//! count   u64 segment records, each length-prefixed:
//!   record_len u32 (bytes after this field)
//!   segment_id u64
//!   scene_id   u32 len + UTF-8
//!   anchor     u32
//!   agents     u32 (actual count, <= max_agents)
//!   per agent: history (t_h*10+1) * 4 f32 (x, y, heading, speed)
//!              + validity (t_h*10+1) u8
//!              + future t_f*10 * 4 f32 + validity t_f*10 u8
//!   lanes      u32 (actual count, <= max_lanes)
//!   per lane:  pts_per_lane * 2 f32
//! ```
//!
//! Padded agent/lane slots are not stored; loading reconstructs the fixed
//! [max_agents] / [max_lanes, pts_per_lane, 2] shapes with invalid flags.
//! A sidecar JSON manifest lists scene ids per split plus generator labels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::{AgentState, LaneMap, Segment, SegmentSpec, Trajectory};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"RDSEG";
const VERSION: u32 = 1;

/// Compact (f32, unpadded) segment storage.
#[derive(Debug, Clone)]
pub struct CompactSegment {
    pub segment_id: u64,
    pub scene: u32,
    pub anchor_time_index: u32,
    pub agent_count: u32,
    /// agent-major [agent][step][4].
    pub histories: Vec<f32>,
    pub history_valid: Vec<u8>,
    pub futures: Vec<f32>,
    pub future_valid: Vec<u8>,
    pub lane_count: u32,
    /// lane-major [lane][point][2].
    pub lanes: Vec<f32>,
}

/// An in-memory split: interned scene ids plus compact segments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SegmentSpec,
    pub dt: f64,
    pub scene_table: Vec<String>,
    pub segments: Vec<CompactSegment>,
}

impl Dataset {
    pub fn new(spec: SegmentSpec) -> Self {
        Dataset {
            spec,
            dt: crate::types::DT,
            scene_table: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn scene_id(&self, seg_idx: usize) -> &str {
        &self.scene_table[self.segments[seg_idx].scene as usize]
    }

    fn intern(&mut self, scene_id: &str) -> u32 {
        if let Some(i) = self.scene_table.iter().position(|s| s == scene_id) {
            return i as u32;
        }
        self.scene_table.push(scene_id.to_string());
        (self.scene_table.len() - 1) as u32
    }

    pub fn push(&mut self, segment_id: u64, seg: &Segment) {
        let spec = self.spec;
        let scene = self.intern(&seg.scene_id);
        let agent_count = seg
            .histories
            .iter()
            .rposition(Trajectory::any_valid)
            .map_or(1, |i| i + 1);
        let mut histories = Vec::with_capacity(agent_count * spec.history_steps * 4);
        let mut history_valid = Vec::with_capacity(agent_count * spec.history_steps);
        let mut futures = Vec::with_capacity(agent_count * spec.future_steps * 4);
        let mut future_valid = Vec::with_capacity(agent_count * spec.future_steps);
        for a in 0..agent_count {
            let h = &seg.histories[a];
            for (s, v) in h.states.iter().zip(&h.valid) {
                histories.extend_from_slice(&[
                    s.x as f32,
                    s.y as f32,
                    s.heading as f32,
                    s.speed as f32,
                ]);
                history_valid.push(u8::from(*v));
            }
            let fut = if a == 0 {
                &seg.ego_future
            } else {
                &seg.other_futures[a - 1]
            };
            for (s, v) in fut.states.iter().zip(&fut.valid) {
                futures.extend_from_slice(&[
                    s.x as f32,
                    s.y as f32,
                    s.heading as f32,
                    s.speed as f32,
                ]);
                future_valid.push(u8::from(*v));
            }
        }
        let lane_count = seg.map.lane_count();
        let mut lanes = Vec::with_capacity(lane_count * spec.pts_per_lane * 2);
        for (poly, valid) in seg.map.polylines.iter().zip(&seg.map.valid) {
            if *valid {
                for p in poly {
                    lanes.push(p[0] as f32);
                    lanes.push(p[1] as f32);
                }
            }
        }
        self.segments.push(CompactSegment {
            segment_id,
            scene,
            anchor_time_index: seg.anchor_time_index as u32,
            agent_count: agent_count as u32,
            histories,
            history_valid,
            futures,
            future_valid,
            lane_count: lane_count as u32,
            lanes,
        });
    }

    /// Materialize the padded f64 segment view.
    pub fn segment(&self, idx: usize) -> Segment {
        let c = &self.segments[idx];
        let spec = self.spec;
        let hs = spec.history_steps;
        let fs = spec.future_steps;
        let mut histories = Vec::with_capacity(spec.max_agents);
        let mut other_futures = Vec::with_capacity(spec.max_agents - 1);
        let mut ego_future = None;
        for a in 0..spec.max_agents {
            if a < c.agent_count as usize {
                let mut hstates = Vec::with_capacity(hs);
                let mut hvalid = Vec::with_capacity(hs);
                for t in 0..hs {
                    let base = (a * hs + t) * 4;
                    hstates.push(AgentState {
                        x: f64::from(c.histories[base]),
                        y: f64::from(c.histories[base + 1]),
                        heading: f64::from(c.histories[base + 2]),
                        speed: f64::from(c.histories[base + 3]),
                    });
                    hvalid.push(c.history_valid[a * hs + t] != 0);
                }
                histories.push(Trajectory::new(hstates, hvalid).expect("non-empty"));
                let mut fstates = Vec::with_capacity(fs);
                let mut fvalid = Vec::with_capacity(fs);
                for t in 0..fs {
                    let base = (a * fs + t) * 4;
                    fstates.push(AgentState {
                        x: f64::from(c.futures[base]),
                        y: f64::from(c.futures[base + 1]),
                        heading: f64::from(c.futures[base + 2]),
                        speed: f64::from(c.futures[base + 3]),
                    });
                    fvalid.push(c.future_valid[a * fs + t] != 0);
                }
                let traj = Trajectory::new(fstates, fvalid).expect("non-empty");
                if a == 0 {
                    ego_future = Some(traj);
                } else {
                    other_futures.push(traj);
                }
            } else {
                histories.push(Trajectory::invalid(hs));
                if a > 0 {
                    other_futures.push(Trajectory::invalid(fs));
                }
            }
        }
        let mut map = LaneMap::empty(spec.max_lanes, spec.pts_per_lane);
        for l in 0..c.lane_count as usize {
            for p in 0..spec.pts_per_lane {
                let base = (l * spec.pts_per_lane + p) * 2;
                map.polylines[l][p] = [f64::from(c.lanes[base]), f64::from(c.lanes[base + 1])];
            }
            map.valid[l] = true;
        }
        Segment {
            scene_id: self.scene_id(idx).to_string(),
            anchor_time_index: c.anchor_time_index as usize,
            histories,
            ego_future: ego_future.expect("ego present"),
            other_futures,
            map,
        }
    }

    /// Segment indices grouped by interned scene, in file order.
    pub fn segments_of_scene(&self) -> HashMap<u32, Vec<usize>> {
        let mut map: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            map.entry(s.scene).or_default().push(i);
        }
        map
    }
}

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_f32(&mut w, dataset.dt as f32)?;
    w_f32(&mut w, (dataset.spec.history_steps as f32 - 1.0) * dataset.dt as f32)?;
    w_f32(&mut w, dataset.spec.future_steps as f32 * dataset.dt as f32)?;
    w_u32(&mut w, dataset.spec.max_agents as u32)?;
    w_u32(&mut w, dataset.spec.max_lanes as u32)?;
    w_u32(&mut w, dataset.spec.pts_per_lane as u32)?;
    w.write_all(&(dataset.segments.len() as u64).to_le_bytes())?;
    for (i, c) in dataset.segments.iter().enumerate() {
        let scene_id = dataset.scene_id(i);
        let hs = dataset.spec.history_steps;
        let fs = dataset.spec.future_steps;
        let body_len = 8
            + 4
            + scene_id.len()
            + 4
            + 4
            + c.agent_count as usize * (hs * 4 * 4 + hs + fs * 4 * 4 + fs)
            + 4
            + c.lanes.len() * 4;
        w_u32(&mut w, body_len as u32)?;
        w.write_all(&c.segment_id.to_le_bytes())?;
        w_u32(&mut w, scene_id.len() as u32)?;
        w.write_all(scene_id.as_bytes())?;
        w_u32(&mut w, c.anchor_time_index)?;
        w_u32(&mut w, c.agent_count)?;
        for a in 0..c.agent_count as usize {
            for v in &c.histories[a * hs * 4..(a + 1) * hs * 4] {
                w_f32(&mut w, *v)?;
            }
            w.write_all(&c.history_valid[a * hs..(a + 1) * hs])?;
            for v in &c.futures[a * fs * 4..(a + 1) * fs * 4] {
                w_f32(&mut w, *v)?;
            }
            w.write_all(&c.future_valid[a * fs..(a + 1) * fs])?;
        }
        w_u32(&mut w, c.lane_count)?;
        for v in &c.lanes {
            w_f32(&mut w, *v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("truncated dataset file {}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a dataset file: {}",
            path.display()
        )));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "dataset version {version} but this build reads version {VERSION}"
        )));
    }
    let dt = f64::from(r_f32(&mut r)?);
    let t_h = f64::from(r_f32(&mut r)?);
    let t_f = f64::from(r_f32(&mut r)?);
    let max_agents = r_u32(&mut r)? as usize;
    let max_lanes = r_u32(&mut r)? as usize;
    let pts_per_lane = r_u32(&mut r)? as usize;
    let spec = SegmentSpec {
        history_steps: (t_h / dt).round() as usize + 1,
        future_steps: (t_f / dt).round() as usize,
        max_agents,
        max_lanes,
        pts_per_lane,
    };
    let count = r_u64(&mut r)? as usize;
    let mut ds = Dataset::new(spec);
    ds.dt = dt;
    let hs = spec.history_steps;
    let fs = spec.future_steps;
    for _ in 0..count {
        let _body_len = r_u32(&mut r)?;
        let segment_id = r_u64(&mut r)?;
        let sid_len = r_u32(&mut r)? as usize;
        let mut sid = vec![0u8; sid_len];
        r.read_exact(&mut sid)?;
        let scene_id =
            String::from_utf8(sid).map_err(|_| Error::Format("invalid scene id".into()))?;
        let anchor = r_u32(&mut r)?;
        let agent_count = r_u32(&mut r)? as usize;
        if agent_count == 0 || agent_count > max_agents {
            return Err(Error::Format(format!(
                "agent count {agent_count} outside 1..={max_agents}"
            )));
        }
        let mut histories = Vec::with_capacity(agent_count * hs * 4);
        let mut history_valid = Vec::with_capacity(agent_count * hs);
        let mut futures = Vec::with_capacity(agent_count * fs * 4);
        let mut future_valid = Vec::with_capacity(agent_count * fs);
        for _ in 0..agent_count {
            for _ in 0..hs * 4 {
                histories.push(r_f32(&mut r)?);
            }
            let mut hv = vec![0u8; hs];
            r.read_exact(&mut hv)?;
            history_valid.extend_from_slice(&hv);
            for _ in 0..fs * 4 {
                futures.push(r_f32(&mut r)?);
            }
            let mut fv = vec![0u8; fs];
            r.read_exact(&mut fv)?;
            future_valid.extend_from_slice(&fv);
        }
        let lane_count = r_u32(&mut r)? as usize;
        if lane_count > max_lanes {
            return Err(Error::Format(format!(
                "lane count {lane_count} exceeds {max_lanes}"
            )));
        }
        let mut lanes = Vec::with_capacity(lane_count * pts_per_lane * 2);
        for _ in 0..lane_count * pts_per_lane * 2 {
            lanes.push(r_f32(&mut r)?);
        }
        let scene = ds.intern(&scene_id);
        ds.segments.push(CompactSegment {
            segment_id,
            scene,
            anchor_time_index: anchor,
            agent_count: agent_count as u32,
            histories,
            history_valid,
            futures,
            future_valid,
            lane_count: lane_count as u32,
            lanes,
        });
    }
    Ok(ds)
}

/// Sidecar manifest: split membership, generator labels, provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub git_revision: String,
    pub dt: f64,
    pub spec: ManifestSpec,
    pub splits: Vec<SplitInfo>,
    pub scenes: Vec<SceneInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSpec {
    pub history_steps: usize,
    pub future_steps: usize,
    pub max_agents: usize,
    pub max_lanes: usize,
    pub pts_per_lane: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub file: String,
    pub scene_ids: Vec<String>,
    pub segment_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneInfo {
    pub scene_id: String,
    pub split: String,
    pub layout: String,
    /// Behavior label per agent; index 0 is the ego.
    pub behaviors: Vec<String>,
    /// Steps where the ego maneuver is actually in progress; segments
    /// anchored inside carry the scene's behavior class for retrieval checks.
    pub ego_active_window: (usize, usize),
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        BufReader::new(File::open(path)?).read_to_string(&mut s)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Embedding dump: (segment_id, scene_id, vector) records, little-endian.
pub struct EmbeddingDump {
    pub dim: usize,
    pub entries: Vec<crate::retrieval::IndexEntry>,
}

const EMB_MAGIC: &[u8; 5] = b"RDEMB";

pub fn save_embeddings(dump: &EmbeddingDump, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u32(&mut w, dump.dim as u32)?;
    w.write_all(&(dump.entries.len() as u64).to_le_bytes())?;
    for e in &dump.entries {
        w.write_all(&e.segment_id.to_le_bytes())?;
        w_u32(&mut w, e.scene_id.len() as u32)?;
        w.write_all(e.scene_id.as_bytes())?;
        for v in &e.vector {
            w_f32(&mut w, *v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingDump> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(Error::Format(format!(
            "not an embedding dump: {}",
            path.display()
        )));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "embedding dump version {version} but this build reads version {VERSION}"
        )));
    }
    let dim = r_u32(&mut r)? as usize;
    let count = r_u64(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let segment_id = r_u64(&mut r)?;
        let sid_len = r_u32(&mut r)? as usize;
        let mut sid = vec![0u8; sid_len];
        r.read_exact(&mut sid)?;
        let scene_id =
            String::from_utf8(sid).map_err(|_| Error::Format("invalid scene id".into()))?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(r_f32(&mut r)?);
        }
        entries.push(crate::retrieval::IndexEntry {
            segment_id,
            scene_id,
            vector,
        });
    }
    Ok(EmbeddingDump { dim, entries })
}
