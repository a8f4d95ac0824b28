//! Attention entropy, logit magnitude and key-norm instrumentation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::KvCache;
use crate::error::{Error, Result};
use crate::layout::Region;
use crate::numerics::{is_masked, l2_norm};

/// Tolerance on row normalization accepted by [`attention_entropy`].
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Natural-log entropy of a probability row; `0 log 0` counts as 0.
pub fn attention_entropy(p: &[f32]) -> Result<f64> {
    let sum: f64 = p.iter().map(|&x| x as f64).sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Input(format!("row is not a distribution (sum {sum})")));
    }
    let mut h = 0.0f64;
    for &x in p {
        if x > 0.0 {
            let x = x as f64;
            h -= x * x.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Mean |logit| over entries that are allowed and not sentinel-masked.
pub fn logit_abs_mean(logits: &[f32], allowed: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, &x) in logits.iter().enumerate() {
        if is_masked(x) || allowed.is_some_and(|a| !a[i]) {
            continue;
        }
        sum += (x as f64).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("every logit in the row is masked".into()));
    }
    Ok(sum / n as f64)
}

/// L2 norm of one cached key vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyNorm {
    pub layer: usize,
    pub head: usize,
    pub slot: usize,
    pub position: f32,
    pub region: Region,
    /// Offset of the slot within its region (0 marks a piece's initial token).
    pub offset: usize,
    pub norm: f32,
}

pub fn key_norms(cache: &KvCache) -> Vec<KeyNorm> {
    let hd = cache.head_dim();
    let mut out = Vec::with_capacity(cache.layers() * cache.heads() * cache.len());
    let mut offset = 0usize;
    let mut offsets = Vec::with_capacity(cache.len());
    for s in 0..cache.len() {
        if s > 0 && cache.regions()[s] != cache.regions()[s - 1] {
            offset = 0;
        }
        offsets.push(offset);
        offset += 1;
    }
    for l in 0..cache.layers() {
        for h in 0..cache.heads() {
            for s in 0..cache.len() {
                let k = &cache.key(l, s)[h * hd..(h + 1) * hd];
                out.push(KeyNorm {
                    layer: l,
                    head: h,
                    slot: s,
                    position: cache.positions()[s],
                    region: cache.regions()[s],
                    offset: offsets[s],
                    norm: l2_norm(k),
                });
            }
        }
    }
    out
}

/// One attention row seen by an observer.
#[derive(Debug)]
pub struct AttentionEvent<'a> {
    pub layer: usize,
    pub head: usize,
    /// Flattened slot index of the attending token.
    pub row_slot: usize,
    pub row_region: Region,
    /// Flattened slot index of every visible key, aligned with the rows below.
    pub key_slots: &'a [usize],
    pub logits: &'a [f32],
    pub probs: &'a [f32],
    /// Probabilities after selection; equal to `probs` when selection is off.
    pub probs_selected: &'a [f32],
}

/// Receives every attention row computed by the engine.
pub trait AttentionObserver {
    fn observe(&mut self, event: &AttentionEvent<'_>);
}

/// Observer that can be split across concurrent piece encoders and merged back.
pub trait ForkObserver: AttentionObserver + Send {
    fn fork(&self) -> Self;
    fn absorb(&mut self, other: Self);
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl AttentionObserver for NoObserver {
    fn observe(&mut self, _: &AttentionEvent<'_>) {}
}

impl ForkObserver for NoObserver {
    fn fork(&self) -> Self {
        NoObserver
    }

    fn absorb(&mut self, _: Self) {}
}

impl ForkObserver for StatsBundle {
    fn fork(&self) -> Self {
        StatsBundle::new(self.include_context_rows)
    }

    fn absorb(&mut self, other: Self) {
        self.merge(other);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowStat {
    pub layer: usize,
    pub head: usize,
    pub slot: usize,
    pub region: Region,
    /// Entropy of the probabilities actually used (after selection).
    pub entropy: f64,
    /// Entropy before selection.
    pub entropy_unselected: f64,
    pub logit_absmean: f64,
    pub support: usize,
}

/// Mergeable accumulator of per-row attention statistics and key norms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsBundle {
    pub rows: Vec<RowStat>,
    pub key_norms: Vec<KeyNorm>,
    /// Record context rows as well as query rows.
    pub include_context_rows: bool,
}

impl StatsBundle {
    pub fn new(include_context_rows: bool) -> Self {
        Self { include_context_rows, ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn merge(&mut self, other: StatsBundle) {
        self.rows.extend(other.rows);
        self.key_norms.extend(other.key_norms);
    }

    pub fn add_key_norms(&mut self, cache: &KvCache) {
        self.key_norms.extend(key_norms(cache));
    }
}

impl AttentionObserver for StatsBundle {
    fn observe(&mut self, ev: &AttentionEvent<'_>) {
        if ev.row_region != Region::Query && !self.include_context_rows {
            return;
        }
        // Rows reaching the observer come out of softmax, so they are normalized.
        let entropy = attention_entropy(ev.probs_selected).unwrap_or(f64::NAN);
        let entropy_unselected = attention_entropy(ev.probs).unwrap_or(f64::NAN);
        let logit_absmean = logit_abs_mean(ev.logits, None).unwrap_or(0.0);
        self.rows.push(RowStat {
            layer: ev.layer,
            head: ev.head,
            slot: ev.row_slot,
            region: ev.row_region,
            entropy,
            entropy_unselected,
            logit_absmean,
            support: ev.probs_selected.iter().filter(|&&x| x > 0.0).count(),
        });
    }
}

/// Means over layers and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_row: BTreeMap<usize, f64>,
    pub grand_mean: f64,
    pub count: usize,
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(values: &mut [(usize, f64)]) -> f64 {
    values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64
}

/// Averages a per-row statistic over layers and heads, per row slot and overall.
pub fn summarize(bundle: &StatsBundle, stat: impl Fn(&RowStat) -> f64) -> Result<Summary> {
    if bundle.rows.is_empty() {
        return Err(Error::Input("cannot summarize an empty bundle".into()));
    }
    let mut all: Vec<(usize, f64)> = bundle.rows.iter().map(|r| (r.slot, stat(r))).collect();
    let mut by_row: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for &(slot, v) in &all {
        by_row.entry(slot).or_default().push((slot, v));
    }
    let per_row = by_row.into_iter().map(|(k, mut v)| (k, stable_mean(&mut v))).collect();
    let count = all.len();
    Ok(Summary { per_row, grand_mean: stable_mean(&mut all), count })
}

/// Mean entropy grouped by the region of the attending row.
pub fn entropy_by_region(bundle: &StatsBundle) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &bundle.rows {
        let key = match r.region {
            Region::Sink => "sink".to_string(),
            Region::Piece(i) => format!("piece_{i}"),
            Region::Query => "query".to_string(),
        };
        groups.entry(key).or_default().push((r.slot, r.entropy));
    }
    groups.into_iter().map(|(k, mut v)| (k, stable_mean(&mut v))).collect()
}

/// Mean key norm per flattened slot, over layers, heads and merged runs.
pub fn keynorm_by_position(bundle: &StatsBundle) -> Vec<f64> {
    let n = bundle.key_norms.iter().map(|k| k.slot + 1).max().unwrap_or(0);
    let mut vals: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for k in &bundle.key_norms {
        vals[k.slot].push((0, k.norm as f64));
    }
    vals.into_iter().map(|mut v| if v.is_empty() { 0.0 } else { stable_mean(&mut v) }).collect()
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
