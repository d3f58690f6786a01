//! Vocabulary, conditioning prompt and block layout of token sequences.
//!
//! Token ids are dense. Road token `i` is segment `i`; the special tokens,
//! 24 hour-of-day tokens and `NUM_BINS` tokens for each of the four trip
//! attributes follow in a fixed order that is part of the checkpoint
//! contract.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth_world::TripRecord;

pub const NUM_HOURS: usize = 24;
pub const NUM_BINS: usize = 16;
pub const NUM_ATTRIBUTES: usize = 4;
pub const PROMPT_LEN: usize = 9;

const SPECIALS: [&str; 6] = ["MASK", "EOS", "PAD", "NULL", "ORG", "DEST"];

/// Continuous trip attributes carried in the prompt, in slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    DTrip,
    DSegMean,
    TTrip,
    VAvg,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [Attribute::DTrip, Attribute::DSegMean, Attribute::TTrip, Attribute::VAvg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::DTrip => "d_trip_m",
            Attribute::DSegMean => "d_seg_mean_m",
            Attribute::TTrip => "t_trip_s",
            Attribute::VAvg => "v_avg_mps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    n_roads: usize,
}

impl Vocabulary {
    pub fn new(n_roads: usize) -> Self {
        Self { n_roads }
    }

    pub fn n_roads(&self) -> usize {
        self.n_roads
    }

    pub fn size(&self) -> usize {
        self.n_roads + SPECIALS.len() + NUM_HOURS + NUM_ATTRIBUTES * NUM_BINS
    }

    pub fn road(&self, segment: usize) -> Result<usize> {
        if segment >= self.n_roads {
            return Err(Error::Vocabulary(format!("segment {segment} not in a vocabulary of {} roads", self.n_roads)));
        }
        Ok(segment)
    }

    pub fn segment_of(&self, token: usize) -> Option<usize> {
        (token < self.n_roads).then_some(token)
    }

    pub fn is_road(&self, token: usize) -> bool {
        token < self.n_roads
    }

    pub fn mask(&self) -> usize {
        self.n_roads
    }

    pub fn eos(&self) -> usize {
        self.n_roads + 1
    }

    pub fn pad(&self) -> usize {
        self.n_roads + 2
    }

    pub fn null(&self) -> usize {
        self.n_roads + 3
    }

    pub fn org_marker(&self) -> usize {
        self.n_roads + 4
    }

    pub fn dest_marker(&self) -> usize {
        self.n_roads + 5
    }

    pub fn hour(&self, h: usize) -> usize {
        debug_assert!(h < NUM_HOURS);
        self.n_roads + SPECIALS.len() + h
    }

    pub fn bin(&self, attr: Attribute, k: usize) -> usize {
        debug_assert!(k < NUM_BINS);
        self.n_roads + SPECIALS.len() + NUM_HOURS + attr.index() * NUM_BINS + k
    }

    /// Human-readable token name for logs and debugging.
    pub fn describe(&self, token: usize) -> String {
        if let Some(s) = self.segment_of(token) {
            return format!("road{s}");
        }
        let k = token - self.n_roads;
        if k < SPECIALS.len() {
            return SPECIALS[k].to_string();
        }
        let k = k - SPECIALS.len();
        if k < NUM_HOURS {
            return format!("hour{k}");
        }
        let k = k - NUM_HOURS;
        format!("{}[{}]", Attribute::ALL[k / NUM_BINS].name(), k % NUM_BINS)
    }
}

/// The conditioning tuple of one trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub r_org: usize,
    pub r_dest: usize,
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

impl Conditioning {
    pub fn from_record(r: &TripRecord) -> Self {
        Self {
            r_org: r.origin(),
            r_dest: r.destination(),
            t_org: r.t_org,
            d_trip: r.d_trip,
            d_seg_mean: r.d_seg_mean,
            t_trip: r.t_trip,
            v_avg: r.v_avg,
        }
    }

    pub fn attribute(&self, a: Attribute) -> f64 {
        match a {
            Attribute::DTrip => self.d_trip,
            Attribute::DSegMean => self.d_seg_mean,
            Attribute::TTrip => self.t_trip,
            Attribute::VAvg => self.v_avg,
        }
    }

    pub fn hour(&self) -> usize {
        ((self.t_org / 3600.0).floor() as i64).rem_euclid(NUM_HOURS as i64) as usize
    }
}

/// Quantile bin edges per attribute, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    /// `NUM_BINS - 1` nondecreasing interior cut points per attribute, keyed by attribute name.
    pub edges: Vec<AttributeEdges>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEdges {
    pub attribute: String,
    pub edges: Vec<f64>,
    pub fallback: bool,
}

/// `NUM_BINS - 1` cut points for one attribute. Quantiles when there are at
/// least `NUM_BINS` distinct values, equal-width bins otherwise.
pub fn fit_edges(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    if values.is_empty() {
        return Err(Error::Corpus("cannot fit bins on an empty corpus".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() >= NUM_BINS {
        let n = sorted.len();
        let edges = (1..NUM_BINS).map(|k| sorted[(k * n / NUM_BINS).min(n - 1)]).collect();
        return Ok((edges, false));
    }
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let edges = if hi > lo {
        let w = (hi - lo) / NUM_BINS as f64;
        (1..NUM_BINS).map(|k| lo + k as f64 * w).collect()
    } else {
        vec![f64::MAX; NUM_BINS - 1]
    };
    Ok((edges, true))
}

/// Half-open binning: a value equal to a cut point falls in the upper bin.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v)
}

impl BinTable {
    pub fn fit(train: &[TripRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Corpus("cannot fit bins on an empty corpus".into()));
        }
        let mut edges = Vec::with_capacity(NUM_ATTRIBUTES);
        for a in Attribute::ALL {
            let vals: Vec<f64> = train.iter().map(|r| Conditioning::from_record(r).attribute(a)).collect();
            let (e, fallback) = fit_edges(&vals)?;
            if fallback {
                log::warn!("{}: fewer than {NUM_BINS} distinct values, using equal-width bins", a.name());
            }
            edges.push(AttributeEdges { attribute: a.name().to_string(), edges: e, fallback });
        }
        Ok(Self { edges })
    }

    pub fn bin(&self, a: Attribute, v: f64) -> usize {
        bin_index(&self.edges[a.index()].edges, v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if t.edges.len() != NUM_ATTRIBUTES || t.edges.iter().any(|e| e.edges.len() != NUM_BINS - 1) {
            return Err(Error::Parse { path: path.display().to_string(), line: 1, msg: "wrong bin table shape".into() });
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: [usize; PROMPT_LEN],
    pub is_null: bool,
}

/// Slots nulled in the unconditional prompt; the two markers are kept.
pub const NULLED_SLOTS: [usize; 7] = [1, 2, 4, 5, 6, 7, 8];

impl Prompt {
    pub fn build(c: &Conditioning, bins: &BinTable, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            tokens: [
                vocab.org_marker(),
                vocab.road(c.r_org)?,
                vocab.hour(c.hour()),
                vocab.dest_marker(),
                vocab.road(c.r_dest)?,
                vocab.bin(Attribute::DTrip, bins.bin(Attribute::DTrip, c.d_trip)),
                vocab.bin(Attribute::DSegMean, bins.bin(Attribute::DSegMean, c.d_seg_mean)),
                vocab.bin(Attribute::TTrip, bins.bin(Attribute::TTrip, c.t_trip)),
                vocab.bin(Attribute::VAvg, bins.bin(Attribute::VAvg, c.v_avg)),
            ],
            is_null: false,
        })
    }

    pub fn nulled(&self, vocab: &Vocabulary) -> Self {
        let mut tokens = self.tokens;
        for s in NULLED_SLOTS {
            tokens[s] = vocab.null();
        }
        Self { tokens, is_null: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_len: usize,
    pub num_blocks: usize,
}

impl BlockLayout {
    /// Smallest whole-block layout holding `len` road tokens plus one EOS.
    pub fn for_length(len: usize, block_len: usize) -> Self {
        Self { block_len, num_blocks: (len + 1).div_ceil(block_len) }
    }

    pub fn padded_len(&self) -> usize {
        self.block_len * self.num_blocks
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub layout: BlockLayout,
}

impl TokenSequence {
    pub fn block(&self, b: usize) -> &[usize] {
        let l = self.layout.block_len;
        &self.tokens[b * l..(b + 1) * l]
    }
}

/// Target layout: road tokens, one EOS, then PAD up to a whole number of blocks.
pub fn encode_target(segments: &[usize], vocab: &Vocabulary, block_len: usize) -> Result<TokenSequence> {
    if block_len == 0 {
        return Err(Error::Contract("block length must be positive".into()));
    }
    let layout = BlockLayout::for_length(segments.len(), block_len);
    let mut tokens = Vec::with_capacity(layout.padded_len());
    for &s in segments {
        tokens.push(vocab.road(s)?);
    }
    tokens.push(vocab.eos());
    tokens.resize(layout.padded_len(), vocab.pad());
    Ok(TokenSequence { tokens, layout })
}

pub fn encode(
    record: &TripRecord,
    bins: &BinTable,
    vocab: &Vocabulary,
    block_len: usize,
) -> Result<(Prompt, TokenSequence)> {
    let prompt = Prompt::build(&Conditioning::from_record(record), bins, vocab)?;
    Ok((prompt, encode_target(&record.segments, vocab, block_len)?))
}

/// Road segments before the first non-road token.
pub fn decode(tokens: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    tokens.iter().map_while(|&t| vocab.segment_of(t)).collect()
}

pub fn partition_blocks(tokens: &[usize], block_len: usize) -> Result<Vec<&[usize]>> {
    if block_len == 0 || tokens.len() % block_len != 0 {
        return Err(Error::Contract(format!(
            "sequence of {} tokens does not split into blocks of {block_len}",
            tokens.len()
        )));
    }
    Ok(tokens.chunks(block_len).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(segments: Vec<usize>, t_org: f64, d_trip: f64, t_trip: f64) -> TripRecord {
        let n = segments.len() as f64;
        TripRecord { segments, t_org, d_trip, d_seg_mean: d_trip / n, t_trip, v_avg: d_trip / t_trip }
    }

    fn flat_bins() -> BinTable {
        BinTable {
            edges: Attribute::ALL
                .iter()
                .map(|a| AttributeEdges {
                    attribute: a.name().into(),
                    edges: (1..NUM_BINS).map(|k| k as f64).collect(),
                    fallback: false,
                })
                .collect(),
        }
    }

    #[test]
    fn vocabulary_is_dense() {
        let v = Vocabulary::new(10);
        let mut ids = vec![v.mask(), v.eos(), v.pad(), v.null(), v.org_marker(), v.dest_marker()];
        ids.extend((0..NUM_HOURS).map(|h| v.hour(h)));
        for a in Attribute::ALL {
            ids.extend((0..NUM_BINS).map(|k| v.bin(a, k)));
        }
        ids.extend(0..10);
        ids.sort_unstable();
        assert_eq!(ids, (0..v.size()).collect::<Vec<_>>());
        assert_eq!(v.size(), 10 + 94);
        assert!(v.road(10).is_err());
        assert_eq!(v.describe(v.bin(Attribute::VAvg, 3)), "v_avg_mps[3]");
    }

    #[test]
    fn target_layout() {
        let v = Vocabulary::new(20);
        let t = encode_target(&[5, 9], &v, 4).unwrap();
        assert_eq!(t.tokens, vec![5, 9, v.eos(), v.pad()]);
        let t = encode_target(&[1, 2, 3, 4, 5], &v, 4).unwrap();
        assert_eq!(t.layout.num_blocks, 2);
        assert_eq!(t.block(1), &[5, v.eos(), v.pad(), v.pad()]);
        let t = encode_target(&[1, 2, 3], &v, 4).unwrap();
        assert_eq!(t.layout.num_blocks, 1);
        assert_eq!(decode(&t.tokens, &v), vec![1, 2, 3]);
        assert!(encode_target(&[25], &v, 4).is_err());
    }

    #[test]
    fn blocks_partition() {
        let toks: Vec<usize> = (0..12).collect();
        let b = partition_blocks(&toks, 4).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[2], &[8, 9, 10, 11]);
        assert_eq!(partition_blocks(&toks, 12).unwrap().len(), 1);
        assert!(partition_blocks(&toks, 5).is_err());
    }

    #[test]
    fn prompt_matches_sample_trip() {
        // origin 24476, destination 12280, departure 01:59, 2491.76 m, 5.83 min, 7.12 m/s
        let v = Vocabulary::new(30_000);
        let mut r = record(vec![24476, 16147, 12280], 1.0 * 3600.0 + 59.0 * 60.0, 2491.76, 5.83 * 60.0);
        r.d_seg_mean = 113.26;
        let (p, _) = encode(&r, &flat_bins(), &v, 32).unwrap();
        assert_eq!(p.tokens[0], v.org_marker());
        assert_eq!(p.tokens[1], v.road(24476).unwrap());
        assert_eq!(p.tokens[2], v.hour(1));
        assert_eq!(p.tokens[3], v.dest_marker());
        assert_eq!(p.tokens[4], v.road(12280).unwrap());
        let n = p.nulled(&v);
        let diff: Vec<usize> = (0..PROMPT_LEN).filter(|&i| n.tokens[i] != p.tokens[i]).collect();
        assert_eq!(diff, NULLED_SLOTS.to_vec());
    }

    #[test]
    fn bins_half_open_and_quantile() {
        let edges: Vec<f64> = (1..NUM_BINS).map(|k| k as f64).collect();
        assert_eq!(bin_index(&edges, 3.0), 3);
        assert_eq!(bin_index(&edges, 2.999), 2);
        assert_eq!(bin_index(&edges, -5.0), 0);
        assert_eq!(bin_index(&edges, 99.0), NUM_BINS - 1);

        // uniform data on [0, 16)
        let vals: Vec<f64> = (0..16_000).map(|i| i as f64 / 1000.0).collect();
        let (e, fallback) = fit_edges(&vals).unwrap();
        assert!(!fallback);
        assert_eq!(bin_index(&e, 7.5), 7);
        // brute force: the bin of v is the count of training values below the cut it passes
        for v in [0.0, 1.0, 5.5, 15.999] {
            let brute = (1..NUM_BINS).filter(|&k| v >= vals[k * vals.len() / NUM_BINS]).count();
            assert_eq!(bin_index(&e, v), brute);
        }

        let (e, fallback) = fit_edges(&[4.0; 30]).unwrap();
        assert!(fallback);
        assert_eq!(bin_index(&e, 4.0), 0);
        let (e, fallback) = fit_edges(&[1.0, 2.0, 3.0]).unwrap();
        assert!(fallback);
        assert_eq!(bin_index(&e, 3.0), NUM_BINS - 1);
        assert!(fit_edges(&[]).is_err());
    }

    #[test]
    fn boundary_value_goes_to_upper_bin() {
        let recs: Vec<TripRecord> = (0..64).map(|i| record(vec![0], 0.0, 100.0, 100.0 / (5.0 + i as f64 * 0.1))).collect();
        let t = BinTable::fit(&recs).unwrap();
        let e = &t.edges[Attribute::VAvg.index()].edges;
        let k = t.bin(Attribute::VAvg, e[6]);
        assert_eq!(k, 7);
    }
}
