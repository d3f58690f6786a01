//! Synthetic grid cities and perturbed-shortest-path trip corpora.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::road_graph::{bearing_between, RoadNetwork, RoadSegment};

const MAX_CONNECTIVITY_RETRIES: usize = 100;
const SECONDS_PER_DAY: f64 = 86_400.0;

/// Per-route multiplicative weight noise of the routing oracle.
pub const ROUTE_NOISE: (f64, f64) = (0.8, 1.25);
/// Uniform range of trip speeds in m/s.
pub const SPEED_RANGE: (f64, f64) = (5.0, 15.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCitySpec {
    pub rows: usize,
    pub cols: usize,
    pub block_len_m: f64,
    /// Taken from the run seed when driven by a config file.
    #[serde(skip)]
    pub seed: u64,
    pub edge_drop_prob: f64,
    /// Side of the square analysis cells, in meters.
    pub cell_size: f64,
}

impl Default for GridCitySpec {
    fn default() -> Self {
        Self { rows: 8, cols: 8, block_len_m: 100.0, seed: 1, edge_drop_prob: 0.0, cell_size: 200.0 }
    }
}

/// Build a grid city. Junction `(r, c)` sits at `(c * block_len, r * block_len)`;
/// each street block yields one segment per direction, and every pair of
/// segments meeting at a junction (U-turns included) becomes an edge before
/// random dropping.
pub fn generate_city(spec: &GridCitySpec) -> Result<RoadNetwork> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(Error::Contract(format!("grid must be at least 2x2, got {}x{}", spec.rows, spec.cols)));
    }
    if !(spec.block_len_m > 0.0) {
        return Err(Error::Contract("block_len_m must be > 0".into()));
    }
    if !(0.0..=0.3).contains(&spec.edge_drop_prob) {
        return Err(Error::Contract(format!("edge_drop_prob {} outside [0, 0.3]", spec.edge_drop_prob)));
    }
    let junction = |r: usize, c: usize| r * spec.cols + c;
    let pos = |j: usize| ((j % spec.cols) as f64 * spec.block_len_m, (j / spec.cols) as f64 * spec.block_len_m);
    let arterial = |r: usize, c: usize, horizontal: bool| {
        let k = if horizontal { r } else { c };
        k % 4 == 0
    };

    // (from junction, to junction, class)
    let mut links: Vec<(usize, usize, u8)> = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols - 1 {
            let class = arterial(r, c, true) as u8;
            links.push((junction(r, c), junction(r, c + 1), class));
            links.push((junction(r, c + 1), junction(r, c), class));
        }
    }
    for r in 0..spec.rows - 1 {
        for c in 0..spec.cols {
            let class = arterial(r, c, false) as u8;
            links.push((junction(r, c), junction(r + 1, c), class));
            links.push((junction(r + 1, c), junction(r, c), class));
        }
    }
    let segments: Vec<RoadSegment> = links
        .iter()
        .enumerate()
        .map(|(id, &(a, b, class))| {
            let (pa, pb) = (pos(a), pos(b));
            RoadSegment {
                id,
                length: spec.block_len_m,
                highway_class: class,
                lon: 0.5 * (pa.0 + pb.0),
                lat: 0.5 * (pa.1 + pb.1),
                bearing: bearing_between(pa, pb),
            }
        })
        .collect();

    let n_junctions = spec.rows * spec.cols;
    let mut leaving: Vec<Vec<usize>> = vec![Vec::new(); n_junctions];
    for (id, &(a, _, _)) in links.iter().enumerate() {
        leaving[a].push(id);
    }
    let all_edges: Vec<(usize, usize)> = links
        .iter()
        .enumerate()
        .flat_map(|(i, &(_, b, _))| leaving[b].iter().map(move |&j| (i, j)))
        .collect();

    let mut rng = rng::stream(spec.seed, "city");
    for _ in 0..MAX_CONNECTIVITY_RETRIES {
        let edges: Vec<(usize, usize)> = if spec.edge_drop_prob > 0.0 {
            all_edges.iter().copied().filter(|_| rng.random::<f64>() >= spec.edge_drop_prob).collect()
        } else {
            all_edges.clone()
        };
        let net = RoadNetwork::new(segments.clone(), edges, spec.cell_size)?;
        if net.is_strongly_connected() {
            return Ok(net);
        }
    }
    Err(Error::Generation(format!(
        "no strongly connected edge subset after {MAX_CONNECTIVITY_RETRIES} retries"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub segments: Vec<usize>,
    #[serde(rename = "t_org_s")]
    pub t_org: f64,
    #[serde(rename = "d_trip_m")]
    pub d_trip: f64,
    #[serde(rename = "d_seg_mean_m")]
    pub d_seg_mean: f64,
    #[serde(rename = "t_trip_s")]
    pub t_trip: f64,
    #[serde(rename = "v_avg_mps")]
    pub v_avg: f64,
}

impl TripRecord {
    /// Derive all trip attributes from a route, a departure time and a speed.
    pub fn from_route(network: &RoadNetwork, segments: Vec<usize>, t_org: f64, speed: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Contract("trip must contain at least one segment".into()));
        }
        if !(speed > 0.0) {
            return Err(Error::Contract(format!("speed must be > 0, got {speed}")));
        }
        let mut d_trip = 0.0;
        for &s in &segments {
            d_trip += network.segment(s)?.length;
        }
        let t_trip = d_trip / speed;
        Ok(Self {
            d_seg_mean: d_trip / segments.len() as f64,
            v_avg: d_trip / t_trip,
            segments,
            t_org,
            d_trip,
            t_trip,
        })
    }

    pub fn origin(&self) -> usize {
        self.segments[0]
    }

    pub fn destination(&self) -> usize {
        *self.segments.last().expect("nonempty trip")
    }
}

/// Minimum-weight path under segment weights `length * U(noise)`, resampled per call.
pub fn oracle_route(network: &RoadNetwork, rng: &mut Rng, org: usize, dest: usize) -> Result<Vec<usize>> {
    route_with_noise(network, rng, org, dest, ROUTE_NOISE)
}

pub fn route_with_noise(
    network: &RoadNetwork,
    rng: &mut Rng,
    org: usize,
    dest: usize,
    noise: (f64, f64),
) -> Result<Vec<usize>> {
    let n = network.len();
    for s in [org, dest] {
        if s >= n {
            return Err(Error::Index { what: "segments", index: s, len: n });
        }
    }
    let weights: Vec<f64> = network
        .segments()
        .iter()
        .map(|s| {
            let f = if noise.0 < noise.1 { rng.random_range(noise.0..noise.1) } else { noise.0 };
            s.length * f
        })
        .collect();
    shortest_path(network, &weights, org, dest)
        .ok_or_else(|| Error::Route(format!("segment {dest} unreachable from {org}")))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Cost(f64);
impl Eq for Cost {}
impl Ord for Cost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Dijkstra over segments with per-segment entry weights. Ties break on
/// the smaller segment id.
pub fn shortest_path(network: &RoadNetwork, weights: &[f64], org: usize, dest: usize) -> Option<Vec<usize>> {
    let n = network.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[org] = 0.0;
    heap.push(Reverse((Cost(0.0), org)));
    while let Some(Reverse((Cost(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        if u == dest {
            break;
        }
        for &v in network.successors(u) {
            let nd = d + weights[v];
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Reverse((Cost(nd), v)));
            }
        }
    }
    if !dist[dest].is_finite() {
        return None;
    }
    let mut path = vec![dest];
    let mut cur = dest;
    while cur != org {
        cur = prev[cur];
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

/// Draw `n` trips with uniformly random OD segment pairs whose routes have
/// between `min_len` and `max_len` segments.
pub fn synthesize_corpus(
    network: &RoadNetwork,
    n: usize,
    seed: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<TripRecord>> {
    if n == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::Contract(format!("need n > 0 and 1 <= min_len <= max_len, got n={n}, [{min_len}, {max_len}]")));
    }
    if network.is_empty() {
        return Err(Error::Corpus("network has no segments".into()));
    }
    let mut od_rng = rng::stream(seed, "od");
    let mut route_rng = rng::stream(seed, "route");
    let mut attr_rng = rng::stream(seed, "attributes");
    let mut out = Vec::with_capacity(n);
    let budget = 10 * n;
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let org = od_rng.random_range(0..network.len());
        let dest = od_rng.random_range(0..network.len());
        let route = match oracle_route(network, &mut route_rng, org, dest) {
            Ok(r) => r,
            Err(Error::Route(_)) => continue,
            Err(e) => return Err(e),
        };
        if route.len() < min_len || route.len() > max_len {
            continue;
        }
        let t_org = attr_rng.random_range(0.0..SECONDS_PER_DAY);
        let speed = attr_rng.random_range(SPEED_RANGE.0..SPEED_RANGE.1);
        out.push(TripRecord::from_route(network, route, t_org, speed)?);
    }
    if out.len() < n {
        return Err(Error::Corpus(format!(
            "only {} of {n} routes within [{min_len}, {max_len}] after {budget} attempts",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<TripRecord>,
    pub val: Vec<TripRecord>,
    pub test: Vec<TripRecord>,
}

/// Seeded shuffle followed by an 80/10/10 split by index.
pub fn split_corpus(mut records: Vec<TripRecord>, seed: u64) -> Splits {
    records.shuffle(&mut rng::stream(seed, "split"));
    let n = records.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    Splits { train: records, val, test }
}

pub fn split_path(prefix: &Path, split: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(split);
    PathBuf::from(s)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}
