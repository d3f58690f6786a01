//! Global distribution metrics (JSD of trip distance and radius of gyration)
//! and OD-cell-matched local similarity metrics (Hausdorff, DTW, EDR).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::road_graph::RoadNetwork;

pub type Point = (f64, f64);

pub const HIST_BINS: usize = 50;

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn trip_distance(traj: &[usize], network: &RoadNetwork) -> Result<f64> {
    traj.iter().map(|&s| Ok(network.segment(s)?.length)).sum()
}

/// Representative points of a trajectory's segments.
pub fn polyline(traj: &[usize], network: &RoadNetwork) -> Result<Vec<Point>> {
    traj.iter().map(|&s| network.segment_midpoint(s)).collect()
}

/// `sqrt(mean |p - centroid|^2)`.
pub fn radius_of_gyration(points: &[Point]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Contract("radius of gyration of an empty polyline".into()));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((points.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside clip to the end bins.
    pub fn with_range(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * w }).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let k = if w > 0.0 { ((v - lo) / w).floor() } else { 0.0 };
            let k = (k.max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    /// Histograms of two samples over their pooled min-max range.
    pub fn pooled(a: &[f64], b: &[f64], bins: usize) -> (Self, Self) {
        let all = a.iter().chain(b);
        let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        (Self::with_range(a, lo, hi, bins), Self::with_range(b, lo, hi, bins))
    }

    pub fn mass(&self) -> Vec<f64> {
        let n: u64 = self.counts.iter().sum();
        if n == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / n as f64).collect()
    }
}

/// Base-2 Jensen-Shannon divergence of two histograms with identical edges.
pub fn jsd(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.edges != h2.edges {
        return Err(Error::Contract("jsd needs histograms with identical bin edges".into()));
    }
    Ok(jsd_mass(&h1.mass(), &h2.mass()))
}

pub fn jsd_mass(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0)
}

pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("hausdorff of an empty polyline".into()));
    }
    let directed = |x: &[Point], y: &[Point]| {
        x.iter().map(|&p| y.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Summed dynamic time warping distance without a window constraint.
pub fn dtw(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("dtw of an empty polyline".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &p in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            cur[j] = dist(p, b[j - 1]) + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Edit distance with a match predicate, normalized by the longer length.
pub fn edr_by<T>(a: &[T], b: &[T], matches: impl Fn(&T, &T) -> bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("edr of an empty sequence".into()));
    }
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(!matches(x, &b[j - 1]));
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / a.len().max(m) as f64)
}

pub fn edr(a: &[Point], b: &[Point], eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::Contract(format!("edr tolerance must be >= 0, got {eps}")));
    }
    edr_by(a, b, |p, q| dist(*p, *q) <= eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jsd_distance: f64,
    pub jsd_radius: f64,
    pub hausdorff_mean: f64,
    pub dtw_mean: f64,
    pub edr_mean: f64,
    pub coverage: f64,
    pub n_generated: usize,
    pub n_matched: usize,
}

type Cell = (i64, i64);

fn od_cells(points: &[Point], network: &RoadNetwork) -> (Cell, Cell) {
    let (a, b) = (points[0], points[points.len() - 1]);
    (network.cell_of(a.0, a.1), network.cell_of(b.0, b.1))
}

/// Compare generated trajectories against real ones.
///
/// Global: JSD of trip distance and radius of gyration over 50 pooled bins.
/// Local: each generated trajectory is compared with every real trajectory
/// sharing its (origin cell, destination cell); per-metric means over those
/// reals are averaged over all generated trajectories with a match.
pub fn evaluate(
    real: &[Vec<usize>],
    generated: &[Vec<usize>],
    network: &RoadNetwork,
    eps: f64,
    workers: usize,
) -> Result<MetricReport> {
    let to_points = |set: &[Vec<usize>]| -> Result<Vec<Vec<Point>>> { set.iter().map(|t| polyline(t, network)).collect() };
    let real_pts = to_points(real)?;
    let gen_pts = to_points(generated)?;
    let global = |set: &[Vec<usize>], pts: &[Vec<Point>]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut d = Vec::new();
        let mut r = Vec::new();
        for (t, p) in set.iter().zip(pts) {
            if p.is_empty() {
                continue;
            }
            d.push(trip_distance(t, network)?);
            r.push(radius_of_gyration(p)?);
        }
        Ok((d, r))
    };
    let (rd, rr) = global(real, &real_pts)?;
    let (gd, gr) = global(generated, &gen_pts)?;
    let (h1, h2) = Histogram::pooled(&rd, &gd, HIST_BINS);
    let jsd_distance = jsd(&h1, &h2)?;
    let (h1, h2) = Histogram::pooled(&rr, &gr, HIST_BINS);
    let jsd_radius = jsd(&h1, &h2)?;

    let mut by_cell: BTreeMap<(Cell, Cell), Vec<usize>> = BTreeMap::new();
    for (k, p) in real_pts.iter().enumerate() {
        if !p.is_empty() {
            by_cell.entry(od_cells(p, network)).or_default().push(k);
        }
    }
    let local = crate::parallel::map_ordered(&gen_pts, workers, |_, g| -> Result<Option<[f64; 3]>> {
        if g.is_empty() {
            return Ok(None);
        }
        let Some(matches) = by_cell.get(&od_cells(g, network)) else { return Ok(None) };
        let mut acc = [0.0; 3];
        for &k in matches {
            let r = &real_pts[k];
            acc[0] += hausdorff(g, r)?;
            acc[1] += dtw(g, r)?;
            acc[2] += edr(g, r, eps)?;
        }
        let n = matches.len() as f64;
        Ok(Some([acc[0] / n, acc[1] / n, acc[2] / n]))
    })?;
    let matched: Vec<[f64; 3]> = local.into_iter().flatten().collect();
    if matched.is_empty() {
        return Err(Error::Evaluation("no generated trajectory shares an OD cell pair with a real one".into()));
    }
    let n = matched.len() as f64;
    let mean = |i: usize| matched.iter().map(|m| m[i]).sum::<f64>() / n;
    Ok(MetricReport {
        jsd_distance,
        jsd_radius,
        hausdorff_mean: mean(0),
        dtw_mean: mean(1),
        edr_mean: mean(2),
        coverage: matched.len() as f64 / generated.len() as f64,
        n_generated: generated.len(),
        n_matched: matched.len(),
    })
}
