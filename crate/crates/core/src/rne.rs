//! Road network encoder: per-segment feature embeddings, edge embeddings,
//! stacked GATv2 layers over out-neighbourhoods and the injection MLP that
//! yields the embedding rows of road tokens.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Array, Axis, ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::road_graph::RoadNetwork;

/// Reserved checkpoint name prefix of all encoder parameters.
pub const PREFIX: &str = "rne.";
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RneConfig {
    /// Width of each of the five segment sub-embeddings.
    pub sub_dim: usize,
    /// Width of the reach and angle edge sub-embeddings.
    pub edge_dim: usize,
    /// Hidden width `d` of the GAT layers.
    pub hidden: usize,
    pub gat_layers: usize,
    /// Hidden width `d_p` of the injection MLP.
    pub inject_hidden: usize,
    /// Initial gain of the layer norm applied to the road rows.
    pub out_gain: f64,
}

impl Default for RneConfig {
    fn default() -> Self {
        Self { sub_dim: 32, edge_dim: 16, hidden: 64, gat_layers: 2, inject_hidden: 128, out_gain: 0.02 }
    }
}

/// Network-derived inputs of the encoder, computed once per network.
#[derive(Debug, Clone)]
pub struct GraphFeatures {
    pub n: usize,
    pub n_classes: usize,
    pub classes: Vec<usize>,
    /// Normalized length, lon, lat columns, each `n x 1`.
    pub length: Array,
    pub lon: Array,
    pub lat: Array,
    /// Attention pairs `(src[k], dst[k])`: every out-edge plus one self-pair per segment.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// 0 for the self-pair, 1 for an edge.
    pub reach: Vec<usize>,
    /// `(sin, cos)` of the steering angle per pair, `m x 2`.
    pub angle: Array,
}

fn standardize(v: &[f64]) -> Array {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    Array::from_vec(v.len(), 1, v.iter().map(|x| (x - mean) / sd).collect()).expect("column length")
}

impl GraphFeatures {
    pub fn from_network(net: &RoadNetwork) -> Result<Self> {
        let segs = net.segments();
        let n = segs.len();
        let classes: Vec<usize> = segs.iter().map(|s| s.highway_class as usize).collect();
        let n_classes = classes.iter().max().map_or(1, |m| m + 1);
        let (mut src, mut dst, mut reach, mut angle) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            src.push(i);
            dst.push(i);
            reach.push(0);
            angle.extend([0.0, 1.0]);
            for &j in net.successors(i) {
                let delta = net.steering_angle(i, j)?.to_radians();
                src.push(i);
                dst.push(j);
                reach.push(1);
                angle.extend([delta.sin(), delta.cos()]);
            }
        }
        let m = src.len();
        Ok(Self {
            n,
            n_classes,
            classes,
            length: standardize(&segs.iter().map(|s| s.length).collect::<Vec<_>>()),
            lon: standardize(&segs.iter().map(|s| s.lon).collect::<Vec<_>>()),
            lat: standardize(&segs.iter().map(|s| s.lat).collect::<Vec<_>>()),
            src,
            dst,
            reach,
            angle: Array::from_vec(m, 2, angle)?,
        })
    }
}

fn name(s: &str) -> String {
    format!("{PREFIX}{s}")
}

fn glorot(store: &mut ParamStore, n: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    store.add_normal(&name(n), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)?;
    Ok(())
}

fn bias(store: &mut ParamStore, n: &str, width: usize) -> Result<()> {
    store.add(&name(n), Array::zeros(1, width))?;
    Ok(())
}

/// Register all encoder parameters; `d_out` is the denoiser embedding width.
pub fn register(store: &mut ParamStore, cfg: &RneConfig, feats: &GraphFeatures, d_out: usize, rng: &mut Rng) -> Result<()> {
    let (s, e, d) = (cfg.sub_dim, cfg.edge_dim, cfg.hidden);
    store.add_normal(&name("id"), feats.n, s, 1.0, rng)?;
    store.add_normal(&name("type"), feats.n_classes, s, 1.0, rng)?;
    for f in ["len", "lon", "lat"] {
        glorot(store, &format!("{f}.w"), 1, s, rng)?;
        bias(store, &format!("{f}.b"), s)?;
    }
    glorot(store, "fuse.w", 5 * s, d, rng)?;
    bias(store, "fuse.b", d)?;
    store.add_normal(&name("reach"), 2, e, 1.0, rng)?;
    glorot(store, "angle.w", 2, e, rng)?;
    bias(store, "angle.b", e)?;
    glorot(store, "edge.w", 2 * e, d, rng)?;
    bias(store, "edge.b", d)?;
    for l in 0..cfg.gat_layers {
        glorot(store, &format!("gat{l}.theta_s"), d, d, rng)?;
        glorot(store, &format!("gat{l}.theta_t"), d, d, rng)?;
        glorot(store, &format!("gat{l}.a"), d, 1, rng)?;
    }
    glorot(store, "inject.w1", d, cfg.inject_hidden, rng)?;
    bias(store, "inject.b1", cfg.inject_hidden)?;
    glorot(store, "inject.w2", cfg.inject_hidden, d_out, rng)?;
    bias(store, "inject.b2", d_out)?;
    store.add(&name("norm.g"), Array::from_vec(1, d_out, vec![cfg.out_gain; d_out])?)?;
    bias(store, "norm.b", d_out)?;
    Ok(())
}

fn p(t: &mut Tape, n: &str) -> Result<Var> {
    t.param_by_name(&name(n))
}

fn affine(t: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
    let (w, b) = (p(t, w)?, p(t, b)?);
    let y = t.matmul(x, w)?;
    t.add_row(y, b)
}

/// `|V| x d`: row `i` is the fused `[id, len, type, lon, lat]` features of segment `i`.
pub fn embed_segments(t: &mut Tape, feats: &GraphFeatures) -> Result<Var> {
    let id = p(t, "id")?;
    let ty = p(t, "type")?;
    let ty = t.embedding_lookup(ty, &feats.classes)?;
    let len = t.input(feats.length.clone());
    let len = affine(t, len, "len.w", "len.b")?;
    let lon = t.input(feats.lon.clone());
    let lon = affine(t, lon, "lon.w", "lon.b")?;
    let lat = t.input(feats.lat.clone());
    let lat = affine(t, lat, "lat.w", "lat.b")?;
    let v = t.concat(&[id, len, ty, lon, lat], Axis::Cols)?;
    affine(t, v, "fuse.w", "fuse.b")
}

/// `m x d`: embedding of every attention pair.
pub fn embed_edges(t: &mut Tape, feats: &GraphFeatures) -> Result<Var> {
    let reach = p(t, "reach")?;
    let reach = t.embedding_lookup(reach, &feats.reach)?;
    let ang = t.input(feats.angle.clone());
    let ang = affine(t, ang, "angle.w", "angle.b")?;
    let e = t.concat(&[reach, ang], Axis::Cols)?;
    affine(t, e, "edge.w", "edge.b")
}

/// One GATv2 layer: `v_i' = sum_j alpha_ij (v_j theta_t)` with
/// `alpha_i = softmax_j(a . LeakyReLU(v_i theta_s + v_j theta_t + e_ij))`
/// over the out-neighbours of `i` and `i` itself.
pub fn gat_layer(t: &mut Tape, h: Var, edges: Var, feats: &GraphFeatures, layer: usize) -> Result<Var> {
    let ts = p(t, &format!("gat{layer}.theta_s"))?;
    let tt = p(t, &format!("gat{layer}.theta_t"))?;
    let a = p(t, &format!("gat{layer}.a"))?;
    let s = t.matmul(h, ts)?;
    let tr = t.matmul(h, tt)?;
    let s_src = t.embedding_lookup(s, &feats.src)?;
    let t_dst = t.embedding_lookup(tr, &feats.dst)?;
    let z = t.add(s_src, t_dst)?;
    let z = t.add(z, edges)?;
    let z = t.leaky_relu(z, LEAKY_SLOPE)?;
    let score = t.matmul(z, a)?;
    let alpha = t.segment_softmax(score, &feats.src)?;
    let msg = t.mul_col(alpha, t_dst)?;
    t.scatter_add(msg, &feats.src, feats.n)
}

/// `z = GELU(v W1 + b1) W2 + b2`.
pub fn inject(t: &mut Tape, h: Var) -> Result<Var> {
    let x = affine(t, h, "inject.w1", "inject.b1")?;
    let x = t.gelu(x)?;
    affine(t, x, "inject.w2", "inject.b2")
}

/// Embedding rows of all road tokens, `|V| x d_out`.
pub fn road_embeddings(t: &mut Tape, cfg: &RneConfig, feats: &GraphFeatures) -> Result<Var> {
    let mut h = embed_segments(t, feats)?;
    let e = embed_edges(t, feats)?;
    for l in 0..cfg.gat_layers {
        h = gat_layer(t, h, e, feats, l)?;
    }
    let z = inject(t, h)?;
    let (g, b) = (p(t, "norm.g")?, p(t, "norm.b")?);
    t.layer_norm(z, g, b)
}

/// Attention weights of one layer, one entry per attention pair, for inspection.
pub fn attention_weights(store: &ParamStore, feats: &GraphFeatures, layer: usize) -> Result<Vec<f64>> {
    let mut t = Tape::new(store);
    let mut h = embed_segments(&mut t, feats)?;
    let e = embed_edges(&mut t, feats)?;
    for l in 0..layer {
        h = gat_layer(&mut t, h, e, feats, l)?;
    }
    let ts = p(&mut t, &format!("gat{layer}.theta_s"))?;
    let tt = p(&mut t, &format!("gat{layer}.theta_t"))?;
    let a = p(&mut t, &format!("gat{layer}.a"))?;
    let s = t.matmul(h, ts)?;
    let tr = t.matmul(h, tt)?;
    let s_src = t.embedding_lookup(s, &feats.src)?;
    let t_dst = t.embedding_lookup(tr, &feats.dst)?;
    let z = t.add(s_src, t_dst)?;
    let z = t.add(z, e)?;
    let z = t.leaky_relu(z, LEAKY_SLOPE)?;
    let score = t.matmul(z, a)?;
    let alpha = t.segment_softmax(score, &feats.src)?;
    Ok(t.value(alpha).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_graph::RoadSegment;

    fn seg(id: usize, lon: f64, bearing: f64) -> RoadSegment {
        RoadSegment { id, length: 100.0, highway_class: 0, lon, lat: 0.0, bearing }
    }

    fn path3() -> RoadNetwork {
        RoadNetwork::new(vec![seg(0, 0.0, 90.0), seg(1, 1.0, 90.0), seg(2, 2.0, 0.0)], vec![(0, 1), (1, 2)], 10.0)
            .unwrap()
    }

    fn small_cfg() -> RneConfig {
        RneConfig { sub_dim: 3, edge_dim: 2, hidden: 4, gat_layers: 2, inject_hidden: 5, out_gain: 0.02 }
    }

    fn model(net: &RoadNetwork) -> (ParamStore, GraphFeatures) {
        let f = GraphFeatures::from_network(net).unwrap();
        let mut s = ParamStore::new();
        register(&mut s, &small_cfg(), &f, 6, &mut crate::rng::stream(3, "rne")).unwrap();
        (s, f)
    }

    #[test]
    fn pairs_include_self_loops() {
        let f = GraphFeatures::from_network(&path3()).unwrap();
        assert_eq!(f.src, vec![0, 0, 1, 1, 2]);
        assert_eq!(f.dst, vec![0, 1, 1, 2, 2]);
        assert_eq!(f.reach, vec![0, 1, 0, 1, 0]);
        // 1 -> 2 turns from 90 to 0 degrees: delta = -90
        assert!((f.angle.get(3, 0) + 1.0).abs() < 1e-12);
        // equal lengths standardize to zero
        assert!(f.length.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let net = path3();
        let (s, f) = model(&net);
        for layer in 0..2 {
            let alpha = attention_weights(&s, &f, layer).unwrap();
            let mut sums = [0.0; 3];
            for (k, &a) in alpha.iter().enumerate() {
                assert!(a >= 0.0);
                sums[f.src[k]] += a;
            }
            // segment 2 has only its self-loop
            assert_eq!(alpha[4], 1.0);
            assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn gat_matches_scalar_evaluation() {
        let net = path3();
        let (s, f) = model(&net);
        let mut t = Tape::new(&s);
        let h0 = embed_segments(&mut t, &f).unwrap();
        let e = embed_edges(&mut t, &f).unwrap();
        let h1 = gat_layer(&mut t, h0, e, &f, 0).unwrap();
        let (h0v, ev, h1v) = (t.value(h0).clone(), t.value(e).clone(), t.value(h1).clone());

        let ts = s.value(s.id("rne.gat0.theta_s").unwrap());
        let tt = s.value(s.id("rne.gat0.theta_t").unwrap());
        let a = s.value(s.id("rne.gat0.a").unwrap());
        let d = 4;
        let vecmat = |v: &[f64], m: &Array| -> Vec<f64> {
            (0..d).map(|c| (0..d).map(|r| v[r] * m.get(r, c)).sum()).collect()
        };
        for i in 0..3 {
            let pairs: Vec<usize> = (0..f.src.len()).filter(|&k| f.src[k] == i).collect();
            let si = vecmat(h0v.row(i), ts);
            let scores: Vec<f64> = pairs
                .iter()
                .map(|&k| {
                    let tj = vecmat(h0v.row(f.dst[k]), tt);
                    (0..d)
                        .map(|c| {
                            let z = si[c] + tj[c] + ev.get(k, c);
                            let z = if z > 0.0 { z } else { 0.2 * z };
                            z * a.get(c, 0)
                        })
                        .sum()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                let expect: f64 =
                    pairs.iter().zip(&w).map(|(&k, wk)| wk / z * vecmat(h0v.row(f.dst[k]), tt)[c]).sum();
                assert!((h1v.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_injection_weights_give_bias() {
        let net = path3();
        let (mut s, f) = model(&net);
        for n in ["rne.inject.w1", "rne.inject.w2"] {
            let id = s.id(n).unwrap();
            s.value_mut(id).data_mut().fill(0.0);
        }
        let b2 = s.id("rne.inject.b2").unwrap();
        s.value_mut(b2).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut t = Tape::new(&s);
        let h = embed_segments(&mut t, &f).unwrap();
        let z = inject(&mut t, h).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(z).row(r), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn unit_injection_is_gelu_of_one() {
        let mut s = ParamStore::new();
        for (n, v) in [("inject.w1", 1.0), ("inject.b1", 0.0), ("inject.w2", 1.0), ("inject.b2", 0.0)] {
            s.add(&name(n), Array::scalar(v)).unwrap();
        }
        let mut t = Tape::new(&s);
        let v = t.input(Array::scalar(1.0));
        let z = inject(&mut t, v).unwrap();
        let expect = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((t.value(z).item() - expect).abs() < 1e-15);
        assert!((expect - 0.841_344_746).abs() < 1e-9);
    }

    #[test]
    fn identical_segments_embed_identically() {
        let net = path3();
        let (mut s, f) = model(&net);
        // give segments 0 and 1 the same id row; their lon differs, so zero the lon map
        let id = s.id("rne.id").unwrap();
        let row0 = s.value(id).row(0).to_vec();
        s.value_mut(id).row_mut(1).copy_from_slice(&row0);
        let w = s.id("rne.lon.w").unwrap();
        s.value_mut(w).data_mut().fill(0.0);
        let mut t = Tape::new(&s);
        let v = embed_segments(&mut t, &f).unwrap();
        assert_eq!(t.value(v).row(0), t.value(v).row(1));
    }

    #[test]
    fn gradient_reaches_neighbourhood_only() {
        // 0 -> 1 -> 2 with two layers: the loss on z_0 sees segments 0, 1 (layer 1) and 2 (layer 2)
        let net = RoadNetwork::new(
            vec![seg(0, 0.0, 90.0), seg(1, 1.0, 90.0), seg(2, 2.0, 90.0), seg(3, 3.0, 90.0)],
            vec![(0, 1), (1, 2), (2, 3)],
            10.0,
        )
        .unwrap();
        let (s, f) = model(&net);
        let mut t = Tape::new(&s);
        let z = road_embeddings(&mut t, &small_cfg(), &f).unwrap();
        let row0 = t.slice(z, Axis::Rows, 0, 1).unwrap();
        let loss = t.sum(row0).unwrap();
        let g = t.backward(loss).unwrap();
        let gid = g.param(s.id("rne.id").unwrap()).unwrap();
        for r in 0..3 {
            assert!(gid.row(r).iter().any(|&v| v != 0.0), "segment {r} should receive gradient");
        }
        assert!(gid.row(3).iter().all(|&v| v == 0.0));
    }
}
