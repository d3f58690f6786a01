//! Topology-constrained block sampling with classifier-free guidance,
//! Gumbel-max selection, confidence-ordered commitment and destination-aware
//! termination, plus the autoregressive and single-block ablation decoders.

use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::Frozen;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::Array;
use crate::rng::{self, Rng};
use crate::road_graph::{PenaltyMatrix, RoadNetwork};
use crate::token_model::{BinTable, Conditioning, Prompt, Vocabulary, PROMPT_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Block,
    Ar,
    Mdlm,
}

impl FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Decoder::Block),
            "ar" => Ok(Decoder::Ar),
            "mdlm" => Ok(Decoder::Mdlm),
            _ => Err(Error::Usage(format!("unknown decoder {s:?} (expected block, ar or mdlm)"))),
        }
    }
}

impl Decoder {
    pub fn name(self) -> &'static str {
        match self {
            Decoder::Block => "block",
            Decoder::Ar => "ar",
            Decoder::Mdlm => "mdlm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub decoder: Decoder,
    pub block_len: usize,
    /// Upper bound on blocks; the total token budget is `num_blocks * block_len`.
    pub num_blocks: usize,
    pub steps: usize,
    pub cfg_w: f64,
    pub temperature: f64,
    pub tcs: bool,
    /// Taken from the run seed when driven by a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { decoder: Decoder::Block, block_len: 16, num_blocks: 2, steps: 8, cfg_w: 0.5, temperature: 0.0, tcs: true, seed: 1 }
    }
}

impl SamplerConfig {
    pub fn max_tokens(&self) -> usize {
        self.block_len * self.num_blocks
    }

    /// `(block length, blocks, steps per block)` actually run by the decoder.
    pub fn layout(&self) -> (usize, usize, usize) {
        match self.decoder {
            Decoder::Block => (self.block_len, self.num_blocks, self.steps),
            Decoder::Ar => (1, self.max_tokens(), 1),
            Decoder::Mdlm => (self.max_tokens(), 1, self.steps),
        }
    }

    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.block_len == 0 || self.num_blocks == 0 || self.steps == 0 {
            return Err(Error::Usage("block length, block count and steps must be positive".into()));
        }
        if !(self.cfg_w >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Usage("guidance scale and temperature must be >= 0".into()));
        }
        if PROMPT_LEN + self.max_tokens() > max_positions {
            return Err(Error::Usage(format!(
                "{} prompt + {} trajectory tokens exceed the model's {max_positions} positions",
                PROMPT_LEN,
                self.max_tokens()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenStats {
    pub nfe: u64,
    pub dead_ends: u64,
    pub dest_reached: bool,
    pub blocks: usize,
    /// Token positions decoded before stopping, including a terminating EOS.
    pub raw_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub segments: Vec<usize>,
    pub stats: GenStats,
}

/// `f_u + (w + 1)(f_c - f_u)`; returns `f_c` unchanged at `w = 0`.
pub fn apply_cfg(f_cond: &Array, f_uncond: &Array, w: f64) -> Array {
    if w == 0.0 {
        return f_cond.clone();
    }
    let data = f_cond.data().iter().zip(f_uncond.data()).map(|(c, u)| u + (w + 1.0) * (c - u)).collect();
    Array::from_vec(f_cond.rows(), f_cond.cols(), data).expect("same shape")
}

/// Outcome of sampling one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pick {
    pub token: usize,
    /// `None` when the token was forced rather than chosen.
    pub confidence: Option<f64>,
    pub dead_end: bool,
}

/// Standard Gumbel draw `-ln(-ln u)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    let u = u.max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Choose a token for one position from the road tokens plus EOS.
///
/// With a penalty matrix, the score of road `r` is `f[r] + P[prev][r] + lambda g_r`
/// and EOS is never penalized; a position whose left neighbour is EOS is forced to EOS.
/// The confidence is the softmax probability of the chosen token under the
/// penalized logits, without noise.
pub fn constrained_sample_position(
    f: &[f64],
    prev: usize,
    penalty: Option<&PenaltyMatrix>,
    vocab: &Vocabulary,
    lambda: f64,
    rng: &mut Rng,
) -> Pick {
    constrained_sample_between(f, prev, None, penalty, vocab, lambda, rng)
}

/// As [`constrained_sample_position`], additionally requiring a road to lead
/// into `next` when the right neighbour is an already committed road.
pub fn constrained_sample_between(
    f: &[f64],
    prev: usize,
    next: Option<usize>,
    penalty: Option<&PenaltyMatrix>,
    vocab: &Vocabulary,
    lambda: f64,
    rng: &mut Rng,
) -> Pick {
    let n = vocab.n_roads();
    let eos = vocab.eos();
    let row = match penalty {
        Some(p) => {
            if prev == eos {
                return Pick { token: eos, confidence: None, dead_end: false };
            }
            Some(p.row(prev))
        }
        None => None,
    };
    let into = match (penalty, next) {
        (Some(p), Some(b)) if vocab.is_road(b) => Some((p, b)),
        _ => None,
    };
    let allowed = |r: usize| -> f64 { row.map_or(0.0, |p| p[r]) + into.map_or(0.0, |(p, b)| p.get(r, b)) };
    let adjusted = |r: usize| -> f64 {
        if r == eos {
            f[eos]
        } else {
            f[r] + allowed(r)
        }
    };
    let candidates = (0..n).chain(std::iter::once(eos));
    let mut best = (eos, f64::NEG_INFINITY);
    let mut mx = f64::NEG_INFINITY;
    for r in candidates.clone() {
        let a = adjusted(r);
        mx = mx.max(a);
        let s = if lambda > 0.0 { a + lambda * gumbel(rng) } else { a };
        if s > best.1 {
            best = (r, s);
        }
    }
    let z: f64 = candidates.map(|r| (adjusted(r) - mx).exp()).sum();
    let confidence = (adjusted(best.0) - mx).exp() / z;
    let dead_end = row.is_some() && (0..n).all(|r| allowed(r) < 0.0) && best.0 == eos;
    Pick { token: best.0, confidence: Some(confidence), dead_end }
}

/// Shared inference state for one checkpoint.
pub struct Sampler<'a> {
    pub frozen: &'a Frozen<'a>,
    pub vocab: Vocabulary,
    pub bins: &'a BinTable,
    pub penalty: &'a PenaltyMatrix,
    pub schedule: DiffusionSchedule,
}

struct Request<'r> {
    prompt: [usize; PROMPT_LEN],
    null_prompt: [usize; PROMPT_LEN],
    cond: &'r Conditioning,
}

impl<'a> Sampler<'a> {
    fn forward(&self, prompt: &[usize], context: &[usize], block: &[usize], stats: &mut GenStats) -> Result<Array> {
        let mut w = Vec::with_capacity(prompt.len() + context.len() + block.len());
        w.extend_from_slice(prompt);
        w.extend_from_slice(context);
        w.extend_from_slice(block);
        stats.nfe += 1;
        self.frozen.logits(&w, block.len())
    }

    /// Reverse-diffuse one all-MASK block of `len` positions in `steps` steps.
    #[allow(clippy::too_many_arguments)]
    fn denoise_block(
        &self,
        req: &Request,
        context: &[usize],
        len: usize,
        steps: usize,
        cfg: &SamplerConfig,
        rng: &mut Rng,
        stats: &mut GenStats,
    ) -> Result<Vec<usize>> {
        let mask = self.vocab.mask();
        let first = context.is_empty();
        let mut cand = vec![mask; len];
        let mut committed = vec![false; len];
        let mut conf = vec![0.0; len];
        let sched = DiffusionSchedule { steps, ..self.schedule.clone() };
        let penalty = cfg.tcs.then_some(self.penalty);
        for step in 0..steps {
            let visible: Vec<usize> = (0..len).map(|i| if committed[i] { cand[i] } else { mask }).collect();
            let fc = self.forward(&req.prompt, context, &visible, stats)?;
            let f = if cfg.cfg_w > 0.0 {
                let fu = self.forward(&req.null_prompt, context, &visible, stats)?;
                apply_cfg(&fc, &fu, cfg.cfg_w)
            } else {
                fc
            };
            for i in 0..len {
                if committed[i] {
                    continue;
                }
                if first && i == 0 {
                    cand[0] = self.vocab.road(req.cond.r_org)?;
                    conf[0] = 1.0;
                    continue;
                }
                let (prev, prev_conf) = if i == 0 { (*context.last().expect("context"), 1.0) } else { (cand[i - 1], conf[i - 1]) };
                let next = (i + 1 < len && committed[i + 1]).then(|| cand[i + 1]);
                let pick = constrained_sample_between(f.row(i), prev, next, penalty, &self.vocab, cfg.temperature, rng);
                cand[i] = pick.token;
                conf[i] = pick.confidence.unwrap_or(prev_conf);
                if pick.dead_end {
                    stats.dead_ends += 1;
                }
            }
            let mut open: Vec<usize> = (0..len).filter(|&i| !committed[i]).collect();
            let k = sched.commit_count(open.len(), step).min(open.len());
            open.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
            for &i in &open[..k] {
                committed[i] = true;
            }
        }
        debug_assert!(committed.iter().all(|&c| c));
        Ok(cand)
    }

    /// Generate one trajectory for `cond`; `index` selects the request's noise stream.
    pub fn generate(&self, cond: &Conditioning, cfg: &SamplerConfig, index: u64) -> Result<Generated> {
        let prompt = Prompt::build(cond, self.bins, &self.vocab)?;
        let req = Request { prompt: prompt.tokens, null_prompt: prompt.nulled(&self.vocab).tokens, cond };
        self.vocab.road(cond.r_dest)?;
        let (len, blocks, steps) = cfg.layout();
        let mut rng = rng::indexed_stream(cfg.seed, "gumbel", index);
        let mut stats = GenStats::default();
        let mut tokens: Vec<usize> = Vec::with_capacity(len * blocks);
        let eos = self.vocab.eos();
        for _ in 0..blocks {
            let block = self.denoise_block(&req, &tokens, len, steps, cfg, &mut rng, &mut stats)?;
            tokens.extend_from_slice(&block);
            stats.blocks += 1;
            if let Some(stop) = tokens.iter().position(|&t| t == eos || t == cond.r_dest) {
                stats.raw_len = stop + 1;
                break;
            }
            stats.raw_len = tokens.len();
        }
        let (segments, dest_reached) = terminate(&tokens, cond.r_dest, &self.vocab);
        stats.dest_reached = dest_reached;
        Ok(Generated { segments, stats })
    }

    /// Generate for every conditioning tuple on up to `workers` threads; output
    /// order and per-request noise streams do not depend on `workers`.
    pub fn generate_all(&self, conds: &[Conditioning], cfg: &SamplerConfig, workers: usize) -> Result<Vec<Generated>> {
        crate::parallel::map_ordered(conds, workers, |i, c| self.generate(c, cfg, i as u64))
    }
}

/// Truncate at the first occurrence of `r_dest` and decode the road prefix
/// before the first non-road token. Returns the segments and whether the
/// destination was reached.
pub fn terminate(tokens: &[usize], r_dest: usize, vocab: &Vocabulary) -> (Vec<usize>, bool) {
    let mut out = Vec::new();
    for &t in tokens {
        match vocab.segment_of(t) {
            Some(s) => {
                out.push(s);
                if s == r_dest {
                    return (out, true);
                }
            }
            None => break,
        }
    }
    (out, false)
}

/// Uniform random walk along out-edges from `org` until `dest` or `max_len` segments.
pub fn random_walk(network: &RoadNetwork, org: usize, dest: usize, max_len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut path = vec![org];
    let mut cur = org;
    while cur != dest && path.len() < max_len {
        let next = network.successors(cur);
        if next.is_empty() {
            break;
        }
        cur = next[rng.random_range(0..next.len())];
        path.push(cur);
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road_graph::{build_penalty, RoadSegment, NEG_BIG};

    fn line_net() -> RoadNetwork {
        let segs = (0..4)
            .map(|id| RoadSegment { id, length: 1.0, highway_class: 0, lon: id as f64, lat: 0.0, bearing: 90.0 })
            .collect();
        RoadNetwork::new(segs, vec![(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)], 1.0).unwrap()
    }

    #[test]
    fn cfg_formula() {
        let c = Array::row_vector(vec![1.0, -2.0, 0.5]);
        let z = Array::zeros(1, 3);
        assert_eq!(apply_cfg(&c, &z, 0.0), c);
        assert_eq!(apply_cfg(&c, &c, 3.0), c);
        assert_eq!(apply_cfg(&c, &z, 0.5).data(), &[1.5, -3.0, 0.75]);
    }

    #[test]
    fn committed_right_neighbour_restricts_choice() {
        let net = line_net();
        let p = build_penalty(&net, NEG_BIG).unwrap();
        let v = Vocabulary::new(4);
        let mut f = vec![0.0; v.size()];
        f[3] = 5.0;
        f[2] = 1.0;
        f[v.eos()] = -10.0;
        let mut rng = rng::stream(1, "g");
        let pick = |next| constrained_sample_between(&f, 1, next, Some(&p), &v, 0.0, &mut rng.clone());
        assert_eq!(pick(None).token, 3);
        assert_eq!(pick(Some(3)).token, 2);
        assert_eq!(pick(Some(v.eos())).token, 3);
        let stuck = pick(Some(2));
        assert_eq!((stuck.token, stuck.dead_end), (v.eos(), true));
        assert_eq!(constrained_sample_between(&f, 1, Some(3), None, &v, 0.0, &mut rng).token, 3);
    }

    #[test]
    fn penalty_beats_large_logit_gap() {
        let net = line_net();
        let p = build_penalty(&net, NEG_BIG).unwrap();
        let v = Vocabulary::new(4);
        let mut f = vec![0.0; v.size()];
        f[2] = 1.0; // valid successor of 1
        f[0] = 51.0; // invalid successor of 1
        f[v.eos()] = -10.0;
        let mut rng = rng::stream(1, "g");
        let pick = constrained_sample_position(&f, 1, Some(&p), &v, 0.0, &mut rng);
        assert_eq!(pick.token, 2);
        // brute force over the candidate set
        let brute = (0..4)
            .chain([v.eos()])
            .max_by(|&a, &b| {
                let s = |r: usize| if r == v.eos() { f[r] } else { f[r] + p.get(1, r) };
                s(a).total_cmp(&s(b))
            })
            .unwrap();
        assert_eq!(brute, 2);
        let no_tcs = constrained_sample_position(&f, 1, None, &v, 0.0, &mut rng);
        assert_eq!(no_tcs.token, 0);
    }

    #[test]
    fn single_successor_or_eos() {
        let net = line_net();
        let p = build_penalty(&net, NEG_BIG).unwrap();
        let v = Vocabulary::new(4);
        let mut rng = rng::stream(4, "g");
        for _ in 0..200 {
            let f: Vec<f64> = (0..v.size()).map(|_| rng.random_range(-100.0..100.0)).collect();
            let pick = constrained_sample_position(&f, 2, Some(&p), &v, 1.0, &mut rng);
            assert!(pick.token == 3 || pick.token == v.eos());
            let c = pick.confidence.unwrap();
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn argmax_ignores_seed_and_shift() {
        let net = line_net();
        let p = build_penalty(&net, NEG_BIG).unwrap();
        let v = Vocabulary::new(4);
        let f: Vec<f64> = (0..v.size()).map(|k| ((k * 7) % 5) as f64).collect();
        let shifted: Vec<f64> = f.iter().map(|x| x + 123.0).collect();
        let a = constrained_sample_position(&f, 1, Some(&p), &v, 0.0, &mut rng::stream(1, "x"));
        let b = constrained_sample_position(&shifted, 1, Some(&p), &v, 0.0, &mut rng::stream(2, "x"));
        assert_eq!(a.token, b.token);
        assert!((a.confidence.unwrap() - b.confidence.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn eos_chain_and_dead_end() {
        let segs = (0..2)
            .map(|id| RoadSegment { id, length: 1.0, highway_class: 0, lon: 0.0, lat: 0.0, bearing: 0.0 })
            .collect();
        let net = RoadNetwork::new(segs, vec![(0, 1)], 1.0).unwrap();
        let p = build_penalty(&net, NEG_BIG).unwrap();
        let v = Vocabulary::new(2);
        let f = vec![5.0; v.size()];
        let mut rng = rng::stream(1, "d");
        let forced = constrained_sample_position(&f, v.eos(), Some(&p), &v, 0.0, &mut rng);
        assert_eq!(forced, Pick { token: v.eos(), confidence: None, dead_end: false });
        let sink = constrained_sample_position(&f, 1, Some(&p), &v, 0.0, &mut rng);
        assert_eq!(sink.token, v.eos());
        assert!(sink.dead_end);
    }

    #[test]
    fn termination_rules() {
        let v = Vocabulary::new(10);
        let e = v.eos();
        assert_eq!(terminate(&[1, 2, 3, 4, 5, 6], 5, &v), (vec![1, 2, 3, 4, 5], true));
        assert_eq!(terminate(&[4, 2, 4], 4, &v), (vec![4], true));
        assert_eq!(terminate(&[1, 2, e, 5], 5, &v), (vec![1, 2], false));
        assert_eq!(terminate(&[1, 2, 3], 9, &v), (vec![1, 2, 3], false));
    }

    #[test]
    fn random_walk_follows_edges() {
        let net = line_net();
        let mut rng = rng::stream(3, "w");
        for _ in 0..50 {
            let w = random_walk(&net, 0, 3, 20, &mut rng);
            assert!(net.is_valid_path(&w));
            assert!(w.len() <= 20);
            assert!(*w.last().unwrap() == 3 || w.len() == 20);
        }
    }
}
