//! Vector index over corpus embeddings: exact flat search and an inverted-file
//! index with a k-means coarse quantizer, plus persistence and a latency
//! bench. Distances are squared-accumulated in f64 over f32 components so
//! orderings are reproducible at large corpus sizes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::stream;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RDIX";
const VERSION: u32 = 1;
/// Lloyd iteration cap for the coarse quantizer.
const KMEANS_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub segment_id: u64,
    pub scene_id: String,
    pub vector: Vec<f32>,
}

/// Query hit: entry id plus Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub segment_id: u64,
    pub distance: f32,
}

/// Shared entry storage: contiguous vectors plus interned scene ids.
#[derive(Debug, Clone)]
struct EntryStore {
    dim: usize,
    segment_ids: Vec<u64>,
    scene_of: Vec<u32>,
    scene_table: Vec<String>,
    vectors: Vec<f32>,
}

impl EntryStore {
    fn build(dim: usize, entries: &[IndexEntry]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("cannot build an index over an empty corpus".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut scene_lookup: std::collections::HashMap<String, u32> =
            std::collections::HashMap::new();
        let mut store = EntryStore {
            dim,
            segment_ids: Vec::with_capacity(entries.len()),
            scene_of: Vec::with_capacity(entries.len()),
            scene_table: Vec::new(),
            vectors: Vec::with_capacity(entries.len() * dim),
        };
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "entry {} has dim {} but index dim is {dim}",
                    e.segment_id,
                    e.vector.len()
                )));
            }
            if !seen.insert(e.segment_id) {
                return Err(Error::Config(format!(
                    "duplicate segment id {} in index input",
                    e.segment_id
                )));
            }
            let scene = match scene_lookup.get(e.scene_id.as_str()) {
                Some(i) => *i,
                None => {
                    let i = store.scene_table.len() as u32;
                    store.scene_table.push(e.scene_id.clone());
                    scene_lookup.insert(e.scene_id.clone(), i);
                    i
                }
            };
            store.segment_ids.push(e.segment_id);
            store.scene_of.push(scene);
            store.vectors.extend_from_slice(&e.vector);
        }
        Ok(store)
    }

    fn len(&self) -> usize {
        self.segment_ids.len()
    }

    fn vector(&self, idx: usize) -> &[f32] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    fn scene_index(&self, scene_id: &str) -> Option<u32> {
        self.scene_table
            .iter()
            .position(|s| s == scene_id)
            .map(|i| i as u32)
    }
}

/// Squared distance: f32 differences, f64 accumulation.
fn dist2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(x - y);
        acc += d * d;
    }
    acc
}

/// Top-k selection over candidate entry indices under the total order
/// (squared distance, segment id) ascending.
fn select_top_k(
    store: &EntryStore,
    candidates: impl Iterator<Item = usize>,
    probe: &[f32],
    k: usize,
    exclude_scene: Option<u32>,
) -> Vec<Hit> {
    let mut best: Vec<(f64, u64)> = Vec::with_capacity(k + 1);
    for idx in candidates {
        if let Some(ex) = exclude_scene {
            if store.scene_of[idx] == ex {
                continue;
            }
        }
        let key = (dist2(store.vector(idx), probe), store.segment_ids[idx]);
        if best.len() < k {
            best.push(key);
            best.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        } else if key < *best.last().expect("non-empty") {
            best.pop();
            let pos = best
                .binary_search_by(|probe_key| probe_key.partial_cmp(&key).expect("finite"))
                .unwrap_or_else(|e| e);
            best.insert(pos, key);
        }
    }
    best.into_iter()
        .map(|(d2, segment_id)| Hit {
            segment_id,
            distance: d2.sqrt() as f32,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FlatIndex {
    store: EntryStore,
}

impl FlatIndex {
    pub fn build(dim: usize, entries: &[IndexEntry]) -> Result<Self> {
        Ok(FlatIndex {
            store: EntryStore::build(dim, entries)?,
        })
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.store.dim
    }

    pub fn segment_ids(&self) -> &[u64] {
        &self.store.segment_ids
    }

    pub fn scene_of_segment(&self, idx: usize) -> &str {
        &self.store.scene_table[self.store.scene_of[idx] as usize]
    }

    pub fn vector_of(&self, idx: usize) -> &[f32] {
        self.store.vector(idx)
    }

    /// Exact top-k scan. Entries from `exclude_scene` are filtered before
    /// selection; fewer than k survivors are returned as-is.
    pub fn query(&self, probe: &[f32], k: usize, exclude_scene: Option<&str>) -> Result<Vec<Hit>> {
        query_checks(self.store.dim, probe, k)?;
        let ex = exclude_scene.and_then(|s| self.store.scene_index(s));
        if exclude_scene.is_some() && ex.is_none() {
            // Excluded scene not present: nothing to filter.
            return Ok(select_top_k(&self.store, 0..self.store.len(), probe, k, None));
        }
        Ok(select_top_k(&self.store, 0..self.store.len(), probe, k, ex))
    }
}

#[derive(Debug, Clone)]
pub struct IvfIndex {
    store: EntryStore,
    n_list: usize,
    centroids: Vec<f32>,
    cells: Vec<Vec<u32>>,
}

impl IvfIndex {
    /// K-means coarse quantizer (seeded init by sampling entries, at most 25
    /// Lloyd iterations), then every entry files into its nearest centroid.
    pub fn build(dim: usize, entries: &[IndexEntry], n_list: usize, seed: u64) -> Result<Self> {
        let store = EntryStore::build(dim, entries)?;
        if n_list == 0 || n_list > store.len() {
            return Err(Error::Config(format!(
                "n_list {n_list} must be in 1..={}",
                store.len()
            )));
        }
        let mut rng = stream(seed, &[0x6976_665f, n_list as u64]);
        let mut init: Vec<usize> = (0..store.len()).collect();
        init.shuffle(&mut rng);
        let mut centroids: Vec<f32> = Vec::with_capacity(n_list * dim);
        for idx in init.into_iter().take(n_list) {
            centroids.extend_from_slice(store.vector(idx));
        }

        let mut assign = vec![0u32; store.len()];
        for _ in 0..KMEANS_MAX_ITERS {
            let mut changed = false;
            for i in 0..store.len() {
                let v = store.vector(i);
                let mut best = (f64::INFINITY, 0u32);
                for c in 0..n_list {
                    let d = dist2(v, &centroids[c * dim..(c + 1) * dim]);
                    if d < best.0 {
                        best = (d, c as u32);
                    }
                }
                if assign[i] != best.1 {
                    assign[i] = best.1;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![0.0f64; n_list * dim];
            let mut counts = vec![0usize; n_list];
            for i in 0..store.len() {
                let c = assign[i] as usize;
                counts[c] += 1;
                for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(store.vector(i)) {
                    *s += f64::from(*v);
                }
            }
            for c in 0..n_list {
                if counts[c] > 0 {
                    for d in 0..dim {
                        centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                    }
                }
            }
        }

        let mut cells = vec![Vec::new(); n_list];
        for (i, c) in assign.iter().enumerate() {
            cells[*c as usize].push(i as u32);
        }
        Ok(IvfIndex {
            store,
            n_list,
            centroids,
            cells,
        })
    }

    pub fn n_list(&self) -> usize {
        self.n_list
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.len() == 0
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(Vec::len).collect()
    }

    /// Probe the `n_probe` nearest cells, then exact top-k within them.
    pub fn query(
        &self,
        probe: &[f32],
        k: usize,
        n_probe: usize,
        exclude_scene: Option<&str>,
    ) -> Result<Vec<Hit>> {
        query_checks(self.store.dim, probe, k)?;
        if n_probe == 0 {
            return Err(Error::Config("n_probe must be >= 1".into()));
        }
        let dim = self.store.dim;
        let mut order: Vec<(f64, usize)> = (0..self.n_list)
            .map(|c| (dist2(probe, &self.centroids[c * dim..(c + 1) * dim]), c))
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let ex = exclude_scene.and_then(|s| self.store.scene_index(s));
        let candidates = order
            .into_iter()
            .take(n_probe.min(self.n_list))
            .flat_map(|(_, c)| self.cells[c].iter().map(|i| *i as usize))
            .collect::<Vec<_>>();
        Ok(select_top_k(
            &self.store,
            candidates.into_iter(),
            probe,
            k,
            ex,
        ))
    }
}

fn query_checks(dim: usize, probe: &[f32], k: usize) -> Result<()> {
    if probe.len() != dim {
        return Err(Error::Shape(format!(
            "probe dim {} vs index dim {dim}",
            probe.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug)]
pub enum AnyIndex {
    Flat(FlatIndex),
    Ivf(IvfIndex),
}

impl AnyIndex {
    pub fn query(
        &self,
        probe: &[f32],
        k: usize,
        n_probe: usize,
        exclude_scene: Option<&str>,
    ) -> Result<Vec<Hit>> {
        match self {
            AnyIndex::Flat(f) => f.query(probe, k, exclude_scene),
            AnyIndex::Ivf(i) => i.query(probe, k, n_probe, exclude_scene),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyIndex::Flat(f) => f.len(),
            AnyIndex::Ivf(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            AnyIndex::Flat(f) => f.store.dim,
            AnyIndex::Ivf(i) => i.store.dim,
        }
    }

    fn store(&self) -> &EntryStore {
        match self {
            AnyIndex::Flat(f) => &f.store,
            AnyIndex::Ivf(i) => &i.store,
        }
    }

    pub fn entry(&self, idx: usize) -> IndexEntry {
        let s = self.store();
        IndexEntry {
            segment_id: s.segment_ids[idx],
            scene_id: s.scene_table[s.scene_of[idx] as usize].clone(),
            vector: s.vector(idx).to_vec(),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// On-disk layout (little-endian): magic, version, kind (0 flat / 1 ivf),
/// dim u32, count u64, n_list u32, scene table, per-entry
/// (segment_id u64, scene u32), vectors, then for IVF the centroid block and
/// the posting lists.
pub fn save(index: &AnyIndex, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let (kind, store) = match index {
        AnyIndex::Flat(f) => (0u8, &f.store),
        AnyIndex::Ivf(i) => (1u8, &i.store),
    };
    w.write_all(&[kind])?;
    write_u32(&mut w, store.dim as u32)?;
    write_u64(&mut w, store.len() as u64)?;
    let n_list = match index {
        AnyIndex::Flat(_) => 0u32,
        AnyIndex::Ivf(i) => i.n_list as u32,
    };
    write_u32(&mut w, n_list)?;
    write_u32(&mut w, store.scene_table.len() as u32)?;
    for s in &store.scene_table {
        write_str(&mut w, s)?;
    }
    for i in 0..store.len() {
        write_u64(&mut w, store.segment_ids[i])?;
        write_u32(&mut w, store.scene_of[i])?;
    }
    write_f32s(&mut w, &store.vectors)?;
    if let AnyIndex::Ivf(ivf) = index {
        write_f32s(&mut w, &ivf.centroids)?;
        for cell in &ivf.cells {
            write_u32(&mut w, cell.len() as u32)?;
            for idx in cell {
                write_u32(&mut w, *idx)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in index".into()))
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load(path: &Path) -> Result<AnyIndex> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("truncated index file {}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not an index file: {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "index version {version} but this build reads version {VERSION}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let dim = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let n_list = read_u32(&mut r)? as usize;
    let scene_count = read_u32(&mut r)? as usize;
    let mut scene_table = Vec::with_capacity(scene_count);
    for _ in 0..scene_count {
        scene_table.push(read_str(&mut r)?);
    }
    let mut segment_ids = Vec::with_capacity(count);
    let mut scene_of = Vec::with_capacity(count);
    for _ in 0..count {
        segment_ids.push(read_u64(&mut r)?);
        let scene = read_u32(&mut r)?;
        if scene as usize >= scene_table.len() {
            return Err(Error::Format("scene index out of range".into()));
        }
        scene_of.push(scene);
    }
    let vectors =
        read_f32s(&mut r, count * dim).map_err(|_| Error::Format("truncated vector block".into()))?;
    let store = EntryStore {
        dim,
        segment_ids,
        scene_of,
        scene_table,
        vectors,
    };
    match kind[0] {
        0 => Ok(AnyIndex::Flat(FlatIndex { store })),
        1 => {
            let centroids = read_f32s(&mut r, n_list * dim)
                .map_err(|_| Error::Format("truncated centroid block".into()))?;
            let mut cells = Vec::with_capacity(n_list);
            let mut total = 0usize;
            for _ in 0..n_list {
                let len = read_u32(&mut r)? as usize;
                let mut cell = Vec::with_capacity(len);
                for _ in 0..len {
                    let idx = read_u32(&mut r)?;
                    if idx as usize >= count {
                        return Err(Error::Format("posting index out of range".into()));
                    }
                    cell.push(idx);
                }
                total += len;
                cells.push(cell);
            }
            if total != count {
                return Err(Error::Format(format!(
                    "posting lists cover {total} entries of {count}"
                )));
            }
            Ok(AnyIndex::Ivf(IvfIndex {
                store,
                n_list,
                centroids,
                cells,
            }))
        }
        k => Err(Error::Format(format!("unknown index kind {k}"))),
    }
}

/// Uniform random corpus for latency benchmarks.
pub fn synthetic_entries(count: usize, dim: usize, seed: u64) -> Vec<IndexEntry> {
    let mut rng = stream(seed, &[0x6265_6e63, count as u64, dim as u64]);
    (0..count)
        .map(|i| IndexEntry {
            segment_id: i as u64,
            scene_id: format!("scene-{}", i % 1024),
            vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyStats {
    pub queries: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

/// Wall-clock per-query latency over random probes against a warmed index.
pub fn bench_latency(
    index: &AnyIndex,
    query_count: usize,
    k: usize,
    n_probe: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatencyStats> {
    let dim = index.dim();
    let probes: Vec<Vec<f32>> = (0..query_count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    // Warm-up pass.
    if let Some(p) = probes.first() {
        index.query(p, k, n_probe, None)?;
    }
    let mut times = Vec::with_capacity(query_count);
    for p in &probes {
        let t0 = Instant::now();
        let hits = index.query(p, k, n_probe, None)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(hits);
        times.push(dt);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    let pick = |q: f64| times[(q * (times.len() - 1) as f64).round() as usize];
    Ok(LatencyStats {
        queries: query_count,
        mean_s: mean,
        p50_s: pick(0.5),
        p99_s: pick(0.99),
    })
}
