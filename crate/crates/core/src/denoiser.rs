//! Transformer denoiser over the window `prompt ++ clean context ++ noisy block`.
//!
//! Road-token embedding rows come from the road network encoder (or a plain
//! table when it is disabled); all other tokens use an ordinary table.
//! Attention is bidirectional over the whole window and only the rows of
//! the noisy block are projected to vocabulary logits.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Array, Axis, ParamStore, Tape, Var};
use crate::rne::{self, GraphFeatures, RneConfig};
use crate::rng::{self, Rng};
use crate::road_graph::RoadNetwork;

pub const PREFIX: &str = "den.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 3, n_heads: 4, ffn_mult: 4, max_positions: 128, vocab_size: 0, tie_embeddings: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub rne: RneConfig,
    pub use_rne: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { denoiser: DenoiserConfig::default(), rne: RneConfig::default(), use_rne: true }
    }
}

impl ModelConfig {
    pub fn validate(&self, n_roads: usize) -> Result<()> {
        let d = &self.denoiser;
        if d.d_model == 0 || d.n_heads == 0 || d.d_model % d.n_heads != 0 {
            return Err(Error::Contract(format!("d_model {} not divisible by n_heads {}", d.d_model, d.n_heads)));
        }
        if d.vocab_size <= n_roads {
            return Err(Error::Contract(format!("vocab_size {} must exceed the {n_roads} road tokens", d.vocab_size)));
        }
        if d.tie_embeddings {
            return Err(Error::Contract("tied embeddings are not supported".into()));
        }
        if d.ffn_mult == 0 || d.max_positions == 0 {
            return Err(Error::Contract("ffn_mult and max_positions must be positive".into()));
        }
        if self.use_rne && (self.rne.hidden == 0 || self.rne.sub_dim == 0 || self.rne.edge_dim == 0) {
            return Err(Error::Contract("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Denoiser and encoder parameters bound to one road network.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub graph: GraphFeatures,
    nfe: AtomicU64,
}

fn pname(s: &str) -> String {
    format!("{PREFIX}{s}")
}

impl Model {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, network: &RoadNetwork, seed: u64) -> Result<Self> {
        let graph = GraphFeatures::from_network(network)?;
        config.validate(graph.n)?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, "init");
        let d = config.denoiser.d_model;
        if config.use_rne {
            rne::register(&mut params, &config.rne, &graph, d, &mut rng)?;
        } else {
            params.add_normal(&pname("road"), graph.n, d, 0.02, &mut rng)?;
        }
        Self::register_denoiser(&mut params, &config.denoiser, graph.n, &mut rng)?;
        Ok(Self { config, params, graph, nfe: AtomicU64::new(0) })
    }

    fn register_denoiser(s: &mut ParamStore, c: &DenoiserConfig, n_roads: usize, rng: &mut Rng) -> Result<()> {
        let d = c.d_model;
        let f = c.ffn_mult * d;
        let w = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let resid = w(d) / ((2 * c.n_layers.max(1)) as f64).sqrt();
        s.add_normal(&pname("tok"), c.vocab_size - n_roads, d, 0.02, rng)?;
        s.add_normal(&pname("pos"), c.max_positions, d, 0.02, rng)?;
        for l in 0..c.n_layers {
            let n = |x: &str| pname(&format!("l{l}.{x}"));
            s.add(&n("ln1.g"), Array::full(1, d, 1.0))?;
            s.add(&n("ln1.b"), Array::zeros(1, d))?;
            for m in ["wq", "wk", "wv"] {
                s.add_normal(&n(m), d, d, w(d), rng)?;
            }
            s.add_normal(&n("wo"), d, d, resid, rng)?;
            s.add(&n("bo"), Array::zeros(1, d))?;
            s.add(&n("ln2.g"), Array::full(1, d, 1.0))?;
            s.add(&n("ln2.b"), Array::zeros(1, d))?;
            s.add_normal(&n("ff.w1"), d, f, w(d), rng)?;
            s.add(&n("ff.b1"), Array::zeros(1, f))?;
            s.add_normal(&n("ff.w2"), f, d, resid * (d as f64 / f as f64).sqrt(), rng)?;
            s.add(&n("ff.b2"), Array::zeros(1, d))?;
        }
        s.add(&pname("lnf.g"), Array::full(1, d, 1.0))?;
        s.add(&pname("lnf.b"), Array::zeros(1, d))?;
        s.add_normal(&pname("out.w"), d, c.vocab_size, w(d), rng)?;
        s.add(&pname("out.b"), Array::zeros(1, c.vocab_size))?;
        Ok(())
    }

    pub fn n_roads(&self) -> usize {
        self.graph.n
    }

    pub fn vocab_size(&self) -> usize {
        self.config.denoiser.vocab_size
    }

    /// `vocab x d` embedding table: road rows first, then the ordinary rows.
    pub fn token_table(&self, t: &mut Tape) -> Result<Var> {
        let roads = if self.config.use_rne {
            rne::road_embeddings(t, &self.config.rne, &self.graph)?
        } else {
            t.param_by_name(&pname("road"))?
        };
        let tok = t.param_by_name(&pname("tok"))?;
        t.concat(&[roads, tok], Axis::Rows)
    }

    /// Logits `n_out x vocab` for the last `n_out` positions of `window`.
    pub fn window_logits(&self, t: &mut Tape, table: Var, window: &[usize], n_out: usize) -> Result<Var> {
        let c = &self.config.denoiser;
        let n = window.len();
        if n > c.max_positions {
            return Err(Error::Contract(format!("window of {n} tokens exceeds max_positions {}", c.max_positions)));
        }
        if n_out == 0 || n_out > n {
            return Err(Error::Contract(format!("cannot read {n_out} outputs from a window of {n}")));
        }
        let (d, heads) = (c.d_model, c.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = t.embedding_lookup(table, window)?;
        let pos = t.param_by_name(&pname("pos"))?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = t.embedding_lookup(pos, &positions)?;
        let mut x = t.add(x, pos)?;
        for l in 0..c.n_layers {
            let p = |t: &mut Tape, s: &str| t.param_by_name(&pname(&format!("l{l}.{s}")));
            let (g, b) = (p(t, "ln1.g")?, p(t, "ln1.b")?);
            let h = t.layer_norm(x, g, b)?;
            let (wq, wk, wv) = (p(t, "wq")?, p(t, "wk")?, p(t, "wv")?);
            let q = t.matmul(h, wq)?;
            let k = t.matmul(h, wk)?;
            let v = t.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = t.slice(q, Axis::Cols, hd * dh, dh)?;
                let kh = t.slice(k, Axis::Cols, hd * dh, dh)?;
                let vh = t.slice(v, Axis::Cols, hd * dh, dh)?;
                let s = t.matmul_nt(qh, kh)?;
                let s = t.scale(s, scale)?;
                let a = t.softmax(s, Axis::Cols)?;
                outs.push(t.matmul(a, vh)?);
            }
            let o = if heads == 1 { outs[0] } else { t.concat(&outs, Axis::Cols)? };
            let (wo, bo) = (p(t, "wo")?, p(t, "bo")?);
            let o = t.matmul(o, wo)?;
            let o = t.add_row(o, bo)?;
            x = t.add(x, o)?;
            let (g, b) = (p(t, "ln2.g")?, p(t, "ln2.b")?);
            let h = t.layer_norm(x, g, b)?;
            let (w1, b1, w2, b2) = (p(t, "ff.w1")?, p(t, "ff.b1")?, p(t, "ff.w2")?, p(t, "ff.b2")?);
            let h = t.matmul(h, w1)?;
            let h = t.add_row(h, b1)?;
            let h = t.gelu(h)?;
            let h = t.matmul(h, w2)?;
            let h = t.add_row(h, b2)?;
            x = t.add(x, h)?;
        }
        let x = t.slice(x, Axis::Rows, n - n_out, n_out)?;
        let (g, b) = (t.param_by_name(&pname("lnf.g"))?, t.param_by_name(&pname("lnf.b"))?);
        let x = t.layer_norm(x, g, b)?;
        let (w, b) = (t.param_by_name(&pname("out.w"))?, t.param_by_name(&pname("out.b"))?);
        let y = t.matmul(x, w)?;
        t.add_row(y, b)
    }

    /// Snapshot of the embedding table for inference on frozen parameters.
    pub fn frozen(&self) -> Result<Frozen<'_>> {
        let mut t = Tape::new(&self.params);
        let table = self.token_table(&mut t)?;
        Ok(Frozen { model: self, table: t.value(table).clone() })
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    /// Forward invocations since the last reset.
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// Inference view with the road-embedding table computed once.
pub struct Frozen<'m> {
    pub model: &'m Model,
    table: Array,
}

impl Frozen<'_> {
    /// One forward pass: logits for the last `n_out` positions of `window`.
    pub fn logits(&self, window: &[usize], n_out: usize) -> Result<Array> {
        self.model.nfe.fetch_add(1, Ordering::Relaxed);
        let mut t = Tape::new(&self.model.params);
        let table = t.input(self.table.clone());
        let y = self.model.window_logits(&mut t, table, window, n_out)?;
        let out = t.value(y).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(out)
    }

    pub fn table(&self) -> &Array {
        &self.table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_world::{generate_city, GridCitySpec};
    use rand::Rng as _;

    pub(crate) fn tiny(use_rne: bool, vocab: usize) -> (RoadNetwork, Model) {
        let net = generate_city(&GridCitySpec { rows: 2, cols: 2, ..Default::default() }).unwrap();
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 2,
                max_positions: 24,
                vocab_size: vocab,
                tie_embeddings: false,
            },
            rne: RneConfig { sub_dim: 4, edge_dim: 2, hidden: 6, gat_layers: 2, inject_hidden: 5, out_gain: 0.02 },
            use_rne,
        };
        let m = Model::new(cfg, &net, 5).unwrap();
        (net, m)
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let (_, mut m) = tiny(true, 12);
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.value_mut(id).data_mut().fill(0.0);
        }
        let b = m.params.id("den.out.b").unwrap();
        let bias: Vec<f64> = (0..12).map(|k| k as f64 * 0.5 - 1.0).collect();
        m.params.value_mut(b).data_mut().copy_from_slice(&bias);
        let y = m.frozen().unwrap().logits(&[0, 1, 2, 9, 9], 2).unwrap();
        assert_eq!(y.row(0), bias.as_slice());
        assert_eq!(y.row(1), bias.as_slice());
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let (_, mut m) = tiny(true, 12);
        let pos = m.params.id("den.pos").unwrap();
        m.params.value_mut(pos).data_mut().fill(0.0);
        let f = m.frozen().unwrap();
        let a = f.logits(&[8, 1, 3, 9, 9, 5], 3).unwrap();
        let b = f.logits(&[8, 1, 3, 5, 9, 9], 3).unwrap();
        for c in 0..12 {
            assert!((a.get(2, c) - b.get(0, c)).abs() < 1e-12);
            assert!((a.get(0, c) - b.get(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_are_finite_and_deterministic() {
        let (_, m) = tiny(false, 12);
        let f = m.frozen().unwrap();
        let mut rng = rng::stream(1, "t");
        m.reset_nfe();
        for _ in 0..200 {
            let n = rng.random_range(1..=24);
            let w: Vec<usize> = (0..n).map(|_| rng.random_range(0..12)).collect();
            let k = rng.random_range(1..=n);
            let y = f.logits(&w, k).unwrap();
            assert!(y.is_finite());
            assert_eq!(y, f.logits(&w, k).unwrap());
        }
        assert_eq!(m.nfe(), 400);
        assert!(f.logits(&[0; 25], 1).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let net = generate_city(&GridCitySpec { rows: 2, cols: 2, ..Default::default() }).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.denoiser.vocab_size = 100;
        cfg.denoiser.n_heads = 3;
        assert!(Model::new(cfg.clone(), &net, 1).is_err());
        cfg.denoiser.n_heads = 4;
        cfg.denoiser.vocab_size = 8;
        assert!(Model::new(cfg, &net, 1).is_err());
    }
}
