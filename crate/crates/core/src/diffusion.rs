//! Absorbing-mask forward process, the block NELBO in masked
//! cross-entropy form, and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::Model;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Tape, Var};
use crate::rng::{self, Rng};
use crate::synth_world::TripRecord;
use crate::token_model::{encode, BinTable, Vocabulary, PROMPT_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    /// Denoising steps per block at inference.
    pub steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { t_min: 0.01, steps: 8 }
    }
}

impl DiffusionSchedule {
    pub fn loss_weight(&self, t: f64) -> f64 {
        1.0 / t.max(self.t_min)
    }

    /// Weight turning the masked-position mean into the block NELBO
    /// `(1/t) * sum_masked CE / n_tokens`, where `n_tokens` counts non-PAD positions.
    pub fn nelbo_weight(&self, t: f64, n_masked: usize, n_tokens: usize) -> f64 {
        self.loss_weight(t) * n_masked as f64 / n_tokens.max(1) as f64
    }

    /// Positions to commit at step `step` (0-based) of a block with
    /// `remaining` masked positions: `ceil(remaining / steps_left)`.
    pub fn commit_count(&self, remaining: usize, step: usize) -> usize {
        let left = self.steps.saturating_sub(step).max(1);
        remaining.div_ceil(left)
    }
}

/// Mask every non-PAD position independently with probability `t`.
pub fn corrupt_block(block: &[usize], t: f64, mask: usize, pad: usize, rng: &mut Rng) -> (Vec<usize>, Vec<bool>) {
    let mut noisy = block.to_vec();
    let mut masked = vec![false; block.len()];
    for (k, &tok) in block.iter().enumerate() {
        if tok == pad {
            continue;
        }
        let u: f64 = rng.random();
        if u < t {
            noisy[k] = mask;
            masked[k] = true;
        }
    }
    (noisy, masked)
}

/// `weight * mean_{masked} CE(logits, clean)`; zero when nothing is masked.
pub fn nelbo_loss(t: &mut Tape, logits: Var, clean: &[usize], mask: &[bool], weight: f64) -> Result<Var> {
    t.cross_entropy(logits, clean, mask, &vec![weight; clean.len()])
}

/// One encoded training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: [usize; PROMPT_LEN],
    pub null_prompt: [usize; PROMPT_LEN],
    pub target: Vec<usize>,
    pub block_len: usize,
}

impl Example {
    pub fn num_blocks(&self) -> usize {
        self.target.len() / self.block_len
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.target[b * self.block_len..(b + 1) * self.block_len]
    }

    /// `prompt ++ clean blocks < b ++ noisy`.
    pub fn window(&self, b: usize, noisy: &[usize], null: bool) -> Vec<usize> {
        let p = if null { &self.null_prompt } else { &self.prompt };
        let mut w = Vec::with_capacity(PROMPT_LEN + (b + 1) * self.block_len);
        w.extend_from_slice(p);
        w.extend_from_slice(&self.target[..b * self.block_len]);
        w.extend_from_slice(noisy);
        w
    }
}

pub fn prepare(records: &[TripRecord], bins: &BinTable, vocab: &Vocabulary, block_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let (p, seq) = encode(r, bins, vocab, block_len)?;
            Ok(Example { prompt: p.tokens, null_prompt: p.nulled(vocab).tokens, target: seq.tokens, block_len })
        })
        .collect()
}

/// A sampled `(b, t)` corruption of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub block: usize,
    pub t: f64,
    pub noisy: Vec<usize>,
    pub mask: Vec<bool>,
    /// Draws discarded because nothing was masked.
    pub skipped: usize,
}

const MAX_RESAMPLES: usize = 1000;

/// Corrupt block `b` at a fresh `t ~ U(t_min, 1]`, redrawing while the mask is empty.
pub fn corrupt_at(ex: &Example, b: usize, sched: &DiffusionSchedule, vocab: &Vocabulary, rng: &mut Rng) -> Result<Corruption> {
    let clean = ex.block(b);
    for skipped in 0..MAX_RESAMPLES {
        let t = 1.0 - rng.random::<f64>() * (1.0 - sched.t_min);
        let (noisy, mask) = corrupt_block(clean, t, vocab.mask(), vocab.pad(), rng);
        if mask.iter().any(|&m| m) {
            return Ok(Corruption { block: b, t, noisy, mask, skipped });
        }
    }
    Err(Error::State(format!("no position masked after {MAX_RESAMPLES} draws")))
}

/// Uniform block index, then [`corrupt_at`].
pub fn sample_corruption(ex: &Example, sched: &DiffusionSchedule, vocab: &Vocabulary, rng: &mut Rng) -> Result<Corruption> {
    let b = rng.random_range(0..ex.num_blocks());
    corrupt_at(ex, b, sched, vocab, rng)
}

/// Weighted loss term of one corrupted block on `tape`.
pub fn block_term(
    model: &Model,
    t: &mut Tape,
    table: Var,
    ex: &Example,
    c: &Corruption,
    sched: &DiffusionSchedule,
    null: bool,
    weighted: bool,
) -> Result<Var> {
    let window = ex.window(c.block, &c.noisy, null);
    let logits = model.window_logits(t, table, &window, ex.block_len)?;
    let clean = ex.block(c.block);
    let pad = Vocabulary::new(model.graph.n).pad();
    let w = if weighted {
        let n_masked = c.mask.iter().filter(|&&m| m).count();
        let n_tokens = clean.iter().filter(|&&tok| tok != pad).count();
        sched.nelbo_weight(c.t, n_masked, n_tokens)
    } else {
        1.0
    };
    nelbo_loss(t, logits, clean, &c.mask, w)
}

/// Sum of the loss terms of all blocks of `ex`, one corruption per block.
pub fn exhaustive_loss(
    model: &Model,
    ex: &Example,
    sched: &DiffusionSchedule,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let mut t = Tape::new(&model.params);
    let table = model.token_table(&mut t)?;
    let mut terms = Vec::with_capacity(ex.num_blocks());
    let mut total: Option<Var> = None;
    for b in 0..ex.num_blocks() {
        let c = corrupt_at(ex, b, sched, vocab, rng)?;
        let l = block_term(model, &mut t, table, ex, &c, sched, false, true)?;
        terms.push(t.value(l).item());
        total = Some(match total {
            Some(s) => t.add(s, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("example has no blocks".into()))?;
    Ok((t.value(total).item(), terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Block length `L'` of the training layout.
    pub block_len: usize,
    pub batch_size: usize,
    pub epochs: f64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub cond_dropout: f64,
    pub eval_interval: usize,
    pub val_items: usize,
    /// Taken from the run config when driven by a config file.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            block_len: 16,
            batch_size: 32,
            epochs: 3.0,
            max_steps: None,
            lr: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            cond_dropout: 0.1,
            eval_interval: 200,
            val_items: 256,
            seed: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_train: usize) -> usize {
        match self.max_steps {
            Some(s) => s,
            None => ((self.epochs * n_train as f64) / self.batch_size as f64).ceil().max(1.0) as usize,
        }
    }

    /// Linear warmup over the first `warmup_ratio` of steps, then constant.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_ratio * total as f64).ceil() as usize;
        if warm == 0 || step >= warm {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / warm as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,train_loss,val_loss,lr,wall_ms";

    pub fn to_csv(&self) -> String {
        format!("{},{:.9},{:.9},{:.9e},{}", self.step, self.train_loss, self.val_loss, self.lr, self.wall_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<LogRow>,
    pub best_val: f64,
    pub best_step: usize,
    pub skipped_draws: usize,
}

/// Fixed corruptions of the validation examples, identical at every evaluation.
pub fn validation_set(
    val: &[Example],
    n: usize,
    sched: &DiffusionSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<(usize, Corruption)>> {
    let mut rng = rng::stream(seed, "validation");
    (0..n.min(val.len())).map(|i| Ok((i, sample_corruption(&val[i], sched, vocab, &mut rng)?))).collect()
}

/// Mean loss over fixed corruptions, weighted (NELBO) or plain masked CE.
pub fn evaluate_loss(
    model: &Model,
    examples: &[Example],
    set: &[(usize, Corruption)],
    sched: &DiffusionSchedule,
    weighted: bool,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let frozen = model.frozen()?;
    let mut sum = 0.0;
    for (i, c) in set {
        let ex = &examples[*i];
        let mut t = Tape::new(&model.params);
        let table = t.input(frozen.table().clone());
        let l = block_term(model, &mut t, table, ex, c, sched, false, weighted)?;
        sum += t.value(l).item();
    }
    Ok(sum / set.len() as f64)
}

/// Called after every evaluation with the new log row and whether it is the best so far.
pub type TrainHook<'a> = dyn FnMut(&LogRow, &Model, bool) -> Result<()> + 'a;

pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    vocab: &Vocabulary,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    hook: &mut TrainHook,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Corpus("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("batch_size must be positive".into()));
    }
    let total = cfg.total_steps(train_set.len());
    let val_fixed = validation_set(val_set, cfg.val_items, sched, vocab, cfg.seed)?;
    let start = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut log = Vec::new();
    let (mut best_val, mut best_step) = (f64::INFINITY, 0);
    let mut skipped = 0;
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng::indexed_stream(cfg.seed, "data", epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut crng = rng::indexed_stream(cfg.seed, "corruption", step as u64);
        let (loss, grads) = {
            let mut t = Tape::new(&model.params);
            let table = model.token_table(&mut t)?;
            let mut total_var: Option<Var> = None;
            for &i in &batch {
                let ex = &train_set[i];
                let c = sample_corruption(ex, sched, vocab, &mut crng)?;
                skipped += c.skipped;
                let null = crng.random::<f64>() < cfg.cond_dropout;
                let l = block_term(model, &mut t, table, ex, &c, sched, null, true)?;
                total_var = Some(match total_var {
                    Some(s) => t.add(s, l)?,
                    None => l,
                });
            }
            let loss = t.scale(total_var.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
            let v = t.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {v} at step {step}; last good checkpoint is from step {best_step}"
                )));
            }
            (v, t.backward(loss)?)
        };
        model.params.zero_grad();
        grads.accumulate_into(&mut model.params, 1.0);
        drop(grads);
        if let Some(clip) = cfg.grad_clip {
            let norm = model.params.grad_norm();
            if norm > clip {
                model.params.scale_grads(clip / norm);
            }
        }
        let lr = cfg.lr_at(step, total);
        model.params.adam_step(&AdamConfig { lr, weight_decay: cfg.weight_decay, ..Default::default() });
        running += loss;
        running_n += 1;

        let done = step + 1;
        if done % cfg.eval_interval.max(1) == 0 || done == total {
            let val_loss = evaluate_loss(model, val_set, &val_fixed, sched, true)?;
            let row = LogRow {
                step: done,
                train_loss: running / running_n as f64,
                val_loss,
                lr,
                wall_ms: if cfg.deterministic { 0 } else { start.elapsed().as_millis() as u64 },
            };
            running = 0.0;
            running_n = 0;
            let is_best = val_loss < best_val || (val_loss.is_nan() && best_step == 0);
            if is_best {
                best_val = val_loss;
                best_step = done;
            }
            log::info!("step {done}/{total} train {:.4} val {:.4}", row.train_loss, row.val_loss);
            hook(&row, model, is_best)?;
            log.push(row);
        }
    }
    Ok(TrainReport { steps: total, log, best_val, best_step, skipped_draws: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_counts_cover_the_block() {
        for steps in 1..10 {
            for len in 1..40 {
                let s = DiffusionSchedule { t_min: 0.01, steps };
                let mut remaining = len;
                for k in 0..steps {
                    let c = s.commit_count(remaining, k).min(remaining);
                    remaining -= c;
                }
                assert_eq!(remaining, 0, "steps {steps} len {len}");
            }
        }
        let s = DiffusionSchedule { t_min: 0.01, steps: 1 };
        assert_eq!(s.commit_count(16, 0), 16);
    }

    #[test]
    fn pad_is_never_masked() {
        let mut rng = rng::stream(2, "c");
        let block = [1, 2, 3, 7, 7, 7];
        let (noisy, mask) = corrupt_block(&block, 1.0, 9, 7, &mut rng);
        assert_eq!(noisy, vec![9, 9, 9, 7, 7, 7]);
        assert_eq!(mask, vec![true, true, true, false, false, false]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let c = TrainConfig { lr: 1.0, warmup_ratio: 0.1, ..Default::default() };
        assert_eq!(c.lr_at(0, 100), 0.1);
        assert_eq!(c.lr_at(9, 100), 1.0);
        assert_eq!(c.lr_at(50, 100), 1.0);
        assert_eq!(TrainConfig { epochs: 3.0, batch_size: 32, ..Default::default() }.total_steps(16_000), 1500);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let s = crate::nn::ParamStore::new();
        let mut t = Tape::new(&s);
        let l = t.input(crate::nn::Array::zeros(3, 7));
        let v = nelbo_loss(&mut t, l, &[1, 2, 3], &[true, false, true], 1.0).unwrap();
        assert!((t.value(v).item() - 7f64.ln()).abs() < 1e-12);
        let v2 = nelbo_loss(&mut t, l, &[1, 2, 3], &[true, false, true], 2.0).unwrap();
        assert!((t.value(v2).item() - 2.0 * 7f64.ln()).abs() < 1e-12);
        let e = nelbo_loss(&mut t, l, &[1, 2, 3], &[false; 3], 1.0).unwrap();
        assert_eq!(t.value(e).item(), 0.0);
    }
}
