//! Directed road network: segments are nodes, junction transitions are edges.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default additive penalty for transitions that are not in the edge set.
pub const NEG_BIG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: usize,
    #[serde(rename = "length_m")]
    pub length: f64,
    pub highway_class: u8,
    pub lon: f64,
    pub lat: f64,
    #[serde(rename = "bearing_deg")]
    pub bearing: f64,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    edges: Vec<(usize, usize)>,
    out: Vec<Vec<usize>>,
    adjacency: Vec<bool>,
    cell_size: f64,
    origin: (f64, f64),
    extent: (f64, f64),
}

impl RoadNetwork {
    /// Build a network, validating ids, lengths, bearings and edges.
    pub fn new(segments: Vec<RoadSegment>, edges: Vec<(usize, usize)>, cell_size: f64) -> Result<Self> {
        let n = segments.len();
        if !(cell_size > 0.0) {
            return Err(Error::Contract(format!("cell_size must be > 0, got {cell_size}")));
        }
        for (k, s) in segments.iter().enumerate() {
            if s.id != k {
                return Err(Error::Contract(format!(
                    "segment ids must be dense and ordered: position {k} holds id {}",
                    s.id
                )));
            }
            if !(s.length > 0.0) {
                return Err(Error::Contract(format!("segment {k} has non-positive length {}", s.length)));
            }
            if !(0.0..360.0).contains(&s.bearing) {
                return Err(Error::Contract(format!("segment {k} bearing {} outside [0, 360)", s.bearing)));
            }
        }
        let mut adjacency = vec![false; n * n];
        let mut out = vec![Vec::new(); n];
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::Index { what: "segments", index: i.max(j), len: n });
            }
            if i == j {
                return Err(Error::Contract(format!("self-loop edge ({i}, {i})")));
            }
            if adjacency[i * n + j] {
                return Err(Error::Contract(format!("duplicate edge ({i}, {j})")));
            }
            adjacency[i * n + j] = true;
            out[i].push(j);
        }
        for o in &mut out {
            o.sort_unstable();
        }
        let mut touched = vec![false; n];
        for &(i, j) in &edges {
            touched[i] = true;
            touched[j] = true;
        }
        if let Some(k) = touched.iter().position(|t| !t) {
            log::warn!("segment {k} participates in no edge");
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in &segments {
            min_x = min_x.min(s.lon);
            min_y = min_y.min(s.lat);
            max_x = max_x.max(s.lon);
            max_y = max_y.max(s.lat);
        }
        if n == 0 {
            (min_x, min_y, max_x, max_y) = (0.0, 0.0, 0.0, 0.0);
        }
        Ok(Self {
            segments,
            edges,
            out,
            adjacency,
            cell_size,
            origin: (min_x, min_y),
            extent: (max_x, max_y),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, i: usize) -> Result<&RoadSegment> {
        self.segments.get(i).ok_or(Error::Index { what: "segments", index: i, len: self.len() })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Sorted out-neighbours of segment `i`.
    pub fn successors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let n = self.len();
        i < n && j < n && self.adjacency[i * n + j]
    }

    pub fn mean_out_degree(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.edges.len() as f64 / self.len() as f64
    }

    /// Lower-left corner of the bounding box of segment coordinates.
    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// `(min_x, min_y, max_x, max_y)` of segment coordinates.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        (self.origin.0, self.origin.1, self.extent.0, self.extent.1)
    }

    pub fn median_segment_length(&self) -> f64 {
        let mut l: Vec<f64> = self.segments.iter().map(|s| s.length).collect();
        if l.is_empty() {
            return 0.0;
        }
        l.sort_by(f64::total_cmp);
        l[l.len() / 2]
    }

    /// Signed bearing change from `i` to `j`, wrapped to (-180, 180].
    pub fn steering_angle(&self, i: usize, j: usize) -> Result<f64> {
        let a = self.segment(i)?.bearing;
        let b = self.segment(j)?.bearing;
        Ok(wrap_angle(b - a))
    }

    pub fn segment_midpoint(&self, i: usize) -> Result<(f64, f64)> {
        let s = self.segment(i)?;
        Ok((s.lon, s.lat))
    }

    /// Half-open cell `[k*s, (k+1)*s)` indices relative to the bounding-box origin.
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        cell_index(self.origin, self.cell_size, x, y)
    }

    /// True iff every consecutive pair of the path is an edge.
    pub fn is_valid_path(&self, path: &[usize]) -> bool {
        path.iter().all(|&s| s < self.len()) && path.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }

    /// True iff every segment reaches and is reached from segment 0.
    pub fn is_strongly_connected(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let mut rev = vec![Vec::new(); n];
        for &(i, j) in &self.edges {
            rev[j].push(i);
        }
        reaches_all(&self.out, n) && reaches_all(&rev, n)
    }

    /// SHA-256 over the canonical file encoding; identifies the network in checkpoints.
    pub fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_file_string().as_bytes());
        hex(&h.finalize())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        s.push_str(&format!("  \"cell_size\": {},\n", serde_json::to_string(&self.cell_size).unwrap()));
        s.push_str("  \"segments\": [\n");
        for (k, seg) in self.segments.iter().enumerate() {
            let line = serde_json::to_string(seg).expect("segment serializes");
            s.push_str("    ");
            s.push_str(&line);
            s.push_str(if k + 1 < self.segments.len() { ",\n" } else { "\n" });
        }
        s.push_str("  ],\n  \"edges\": [\n");
        for (k, (i, j)) in self.edges.iter().enumerate() {
            s.push_str(&format!("    [{i}, {j}]"));
            s.push_str(if k + 1 < self.edges.len() { ",\n" } else { "\n" });
        }
        s.push_str("  ]\n}\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse a network document. Duplicate ids and edges are reported with
    /// the line of the offending entry.
    pub fn parse(text: &str, origin_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct RawDoc<'a> {
            cell_size: f64,
            #[serde(borrow)]
            segments: Vec<&'a RawValue>,
            #[serde(borrow)]
            edges: Vec<&'a RawValue>,
        }
        #[derive(Deserialize)]
        struct RawSegment {
            id: usize,
            length_m: f64,
            highway_class: u8,
            lon: f64,
            lat: f64,
            bearing_deg: Option<f64>,
            from: Option<(f64, f64)>,
            to: Option<(f64, f64)>,
        }

        let parse_err = |line: usize, msg: String| Error::Parse { path: origin_name.to_string(), line, msg };
        let line_of = |raw: &RawValue| {
            let offset = raw.get().as_ptr() as usize - text.as_ptr() as usize;
            text[..offset].bytes().filter(|&b| b == b'\n').count() + 1
        };

        let doc: RawDoc = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;

        let mut by_id: Vec<Option<RoadSegment>> = Vec::new();
        let mut seen_ids = HashSet::new();
        for raw in &doc.segments {
            let line = line_of(raw);
            let r: RawSegment = serde_json::from_str(raw.get()).map_err(|e| parse_err(line, e.to_string()))?;
            if !seen_ids.insert(r.id) {
                return Err(parse_err(line, format!("duplicate segment id {}", r.id)));
            }
            let bearing = match (r.bearing_deg, r.from, r.to) {
                (Some(b), _, _) => b,
                (None, Some(a), Some(b)) => bearing_between(a, b),
                _ => {
                    return Err(parse_err(line, format!("segment {} has no bearing_deg and no from/to geometry", r.id)))
                }
            };
            if r.id >= by_id.len() {
                by_id.resize(r.id + 1, None);
            }
            by_id[r.id] = Some(RoadSegment {
                id: r.id,
                length: r.length_m,
                highway_class: r.highway_class,
                lon: r.lon,
                lat: r.lat,
                bearing,
            });
        }
        let segments: Vec<RoadSegment> = by_id
            .into_iter()
            .enumerate()
            .map(|(k, s)| s.ok_or_else(|| parse_err(1, format!("segment id {k} missing; ids must be dense"))))
            .collect::<Result<_>>()?;

        let mut seen_edges = HashSet::new();
        let mut edges = Vec::with_capacity(doc.edges.len());
        for raw in &doc.edges {
            let line = line_of(raw);
            let (i, j): (usize, usize) =
                serde_json::from_str(raw.get()).map_err(|e| parse_err(line, e.to_string()))?;
            if !seen_edges.insert((i, j)) {
                return Err(parse_err(line, format!("duplicate edge [{i}, {j}]")));
            }
            if i >= segments.len() || j >= segments.len() {
                return Err(parse_err(line, format!("edge [{i}, {j}] references an unknown segment")));
            }
            if i == j {
                return Err(parse_err(line, format!("self-loop edge [{i}, {j}]")));
            }
            edges.push((i, j));
        }
        Self::new(segments, edges, doc.cell_size)
    }
}

/// Compass bearing (0 = +y, 90 = +x) of the direction `a -> b`, in [0, 360).
pub fn bearing_between(a: (f64, f64), b: (f64, f64)) -> f64 {
    let deg = (b.0 - a.0).atan2(b.1 - a.1).to_degrees();
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Wrap an angle difference in degrees to (-180, 180].
pub fn wrap_angle(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn cell_index(origin: (f64, f64), cell_size: f64, x: f64, y: f64) -> (i64, i64) {
    (
        ((x - origin.0) / cell_size).floor() as i64,
        ((y - origin.1) / cell_size).floor() as i64,
    )
}

fn reaches_all(adj: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Log-space transition penalty: 0 on edges, `neg_big` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    n: usize,
    values: Vec<f64>,
}

impl PenaltyMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Row of penalties for successors of `prev`.
    pub fn row(&self, prev: usize) -> &[f64] {
        &self.values[prev * self.n..(prev + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn build_penalty(network: &RoadNetwork, neg_big: f64) -> Result<PenaltyMatrix> {
    if neg_big > -1e6 {
        return Err(Error::Contract(format!("neg_big must be <= -1e6, got {neg_big}")));
    }
    let n = network.len();
    let values = network
        .adjacency
        .iter()
        .map(|&a| if a { 0.0 } else { neg_big })
        .collect();
    Ok(PenaltyMatrix { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize, bearing: f64) -> RoadSegment {
        RoadSegment { id, length: 10.0, highway_class: 0, lon: id as f64, lat: 0.0, bearing }
    }

    fn net(n: usize, edges: &[(usize, usize)]) -> RoadNetwork {
        RoadNetwork::new((0..n).map(|i| seg(i, 0.0)).collect(), edges.to_vec(), 200.0).unwrap()
    }

    #[test]
    fn penalty_two_nodes() {
        let p = build_penalty(&net(2, &[(0, 1)]), -1e9).unwrap();
        assert_eq!(p.row(0), &[-1e9, 0.0]);
        assert_eq!(p.row(1), &[-1e9, -1e9]);
    }

    #[test]
    fn penalty_complete_and_empty() {
        let full: Vec<_> = (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let p = build_penalty(&net(3, &full), -1e9).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.get(i, j), if i == j { -1e9 } else { 0.0 });
            }
        }
        let p = build_penalty(&net(2, &[]), -1e9).unwrap();
        assert!(p.values.iter().all(|&v| v == -1e9));
        assert!(build_penalty(&net(2, &[]), -10.0).is_err());
    }

    #[test]
    fn steering_angle_wraps() {
        let n = RoadNetwork::new(vec![seg(0, 0.0), seg(1, 90.0), seg(2, 350.0), seg(3, 10.0)], vec![], 1.0).unwrap();
        assert_eq!(n.steering_angle(0, 1).unwrap(), 90.0);
        assert_eq!(n.steering_angle(2, 3).unwrap(), 20.0);
        assert_eq!(n.steering_angle(3, 2).unwrap(), -20.0);
        assert_eq!(n.steering_angle(1, 1).unwrap(), 0.0);
        assert!(n.steering_angle(0, 9).is_err());
        // brute force: the wrapped value is the unique representative of d + 360k in (-180, 180]
        for a in (0..360).step_by(7) {
            for b in (0..360).step_by(11) {
                let w = wrap_angle(b as f64 - a as f64);
                let reps: Vec<f64> = (-2..=2)
                    .map(|k| (b - a) as f64 + 360.0 * k as f64)
                    .filter(|v| *v > -180.0 && *v <= 180.0)
                    .collect();
                assert_eq!(reps, vec![w]);
            }
        }
        assert_eq!(wrap_angle(-180.0), 180.0);
    }

    #[test]
    fn cells_are_half_open() {
        let c = |x, y| cell_index((0.0, 0.0), 200.0, x, y);
        assert_eq!(c(150.0, 350.0), (0, 1));
        assert_eq!(c(200.0, 0.0), (1, 0));
        assert_eq!(c(199.999, 0.0), (0, 0));
        assert_eq!(c(-1.0, 0.0), (-1, 0));
        // brute-force binning
        for k in -3i64..3 {
            for x in [k as f64 * 200.0, k as f64 * 200.0 + 0.5, (k + 1) as f64 * 200.0 - 1e-9] {
                assert_eq!(c(x, 0.0).0, k);
            }
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let segs: Vec<_> = (0..2).map(|i| seg(i, 0.0)).collect();
        assert!(RoadNetwork::new(segs.clone(), vec![(0, 1), (0, 1)], 1.0).is_err());
        assert!(RoadNetwork::new(segs.clone(), vec![(0, 0)], 1.0).is_err());
        assert!(RoadNetwork::new(segs, vec![(0, 5)], 1.0).is_err());
    }

    #[test]
    fn file_round_trip_and_line_errors() {
        let n = net(3, &[(0, 1), (1, 2), (2, 0)]);
        let text = n.to_file_string();
        let back = RoadNetwork::parse(&text, "mem").unwrap();
        assert_eq!(back.segments(), n.segments());
        assert_eq!(back.edges(), n.edges());
        assert_eq!(back.identity_hash(), n.identity_hash());

        let dup_edge = text.replacen("[2, 0]", "[0, 1]", 1);
        match RoadNetwork::parse(&dup_edge, "mem") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 11, "{msg}");
                assert!(msg.contains("duplicate edge"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let dup_id = text.replacen("\"id\":2", "\"id\":1", 1);
        match RoadNetwork::parse(&dup_id, "mem") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("duplicate segment id 1"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bearing_recomputed_from_geometry() {
        let doc = r#"{"cell_size": 1.0,
  "segments": [
    {"id": 0, "length_m": 1.0, "highway_class": 0, "lon": 0.5, "lat": 0.0, "from": [0.0, 0.0], "to": [1.0, 0.0]},
    {"id": 1, "length_m": 1.0, "highway_class": 0, "lon": 1.0, "lat": 0.5, "from": [1.0, 0.0], "to": [1.0, 1.0]}
  ],
  "edges": [[0, 1]]}"#;
        let n = RoadNetwork::parse(doc, "mem").unwrap();
        assert!((n.segment(0).unwrap().bearing - 90.0).abs() < 1e-12);
        assert!(n.segment(1).unwrap().bearing.abs() < 1e-12);
        assert_eq!(n.steering_angle(0, 1).unwrap(), -90.0);
    }
}
