//! Scheme-aware context encoding into a KV cache, query forward passes with
//! optional selective attention, greedy decoding and the key-replacement
//! oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{PositionMap, PositionMode, Region, SegmentedContext, Token};
use crate::model::{gelu, Model, ParamKind};
use crate::numerics::{matmul_into, rms_norm_into, rope_apply, softmax_in_place, MASKED};
use crate::selection::{
    aggregate, apply_selection, group_count, group_scores, select_topk, GroupScores, ProbTensor, Selection,
    SelectionConfig, SelectionTrace,
};
use crate::stats::{AttentionEvent, AttentionObserver, ForkObserver};

/// Per-layer keys and values for every encoded slot. Keys are stored after
/// the rotary rotation, `[slot][model_dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    heads: usize,
    head_dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    regions: Vec<Region>,
    positions: Vec<f32>,
    tokens: Vec<Token>,
}

impl KvCache {
    pub fn empty(model: &Model) -> Self {
        let cfg = model.config();
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            regions: Vec::new(),
            positions: Vec::new(),
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn key(&self, layer: usize, slot: usize) -> &[f32] {
        let w = self.width();
        &self.keys[layer][slot * w..(slot + 1) * w]
    }

    pub fn value(&self, layer: usize, slot: usize) -> &[f32] {
        let w = self.width();
        &self.values[layer][slot * w..(slot + 1) * w]
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn positions(&self) -> &[f32] {
        &self.positions
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Group id per slot: context pieces form groups, everything else is ungrouped.
    pub fn groups(&self) -> Vec<Option<usize>> {
        self.regions.iter().map(|r| r.piece()).collect()
    }

    pub fn group_count(&self) -> usize {
        group_count(&self.groups())
    }

    fn append(&mut self, seg: Segment) {
        for (l, (k, v)) in seg.keys.into_iter().zip(seg.values).enumerate() {
            self.keys[l].extend(k);
            self.values[l].extend(v);
        }
        self.regions.extend(seg.regions);
        self.positions.extend(seg.positions);
        self.tokens.extend(seg.tokens);
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if self.layers() != cfg.layers || self.heads != cfg.heads || self.head_dim != cfg.head_dim() {
            return Err(Error::Config(format!(
                "cache shape {}x{}x{} does not match model {}x{}x{}",
                self.layers(),
                self.heads,
                self.head_dim,
                cfg.layers,
                cfg.heads,
                cfg.head_dim()
            )));
        }
        Ok(())
    }
}

/// Context encoding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Full,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub parallel_degree: usize,
    pub sink: bool,
    pub selection: Option<SelectionConfig>,
    pub position_mode: PositionMode,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SchemeConfig {
    pub fn full() -> Self {
        Self { scheme: Scheme::Full, parallel_degree: 1, sink: false, selection: None, position_mode: PositionMode::Full }
    }

    pub fn parallel(degree: usize) -> Self {
        Self {
            scheme: Scheme::Parallel,
            parallel_degree: degree,
            sink: false,
            selection: None,
            position_mode: PositionMode::ParallelEven,
        }
    }

    pub fn with_sink(mut self, on: bool) -> Self {
        self.sink = on;
        self
    }

    pub fn with_selection(mut self, sel: Option<SelectionConfig>) -> Self {
        self.selection = sel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallel_degree == 0 {
            return Err(Error::Config("parallel degree must be at least 1".into()));
        }
        if self.scheme == Scheme::Full
            && (self.parallel_degree != 1 || self.sink || self.selection.is_some() || self.position_mode != PositionMode::Full)
        {
            return Err(Error::Config(
                "full attention requires P=1, no sink, no selection and full positions".into(),
            ));
        }
        if self.scheme == Scheme::Parallel && self.position_mode == PositionMode::Full {
            return Err(Error::Config("parallel encoding needs parallel-even or serialized positions".into()));
        }
        if let Some(sel) = &self.selection {
            sel.validate()?;
        }
        Ok(())
    }
}

/// How selective attention is applied during a query pass.
#[derive(Debug, Clone, PartialEq)]
pub enum QuerySelection {
    Off,
    /// Selection computed inside each layer (aggregation none, T or HT).
    PerLayer(SelectionConfig),
    /// A selection fixed ahead of time and applied at every layer.
    Fixed(Selection),
}

impl QuerySelection {
    fn is_off(&self) -> bool {
        matches!(self, QuerySelection::Off)
    }
}

/// K/V of one freshly encoded segment.
struct Segment {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    regions: Vec<Region>,
    positions: Vec<f32>,
    tokens: Vec<Token>,
}

struct SegmentResult {
    segment: Segment,
    /// Final-layer logits per segment token, when requested.
    logits: Option<Vec<Vec<f32>>>,
    traces: Vec<SelectionTrace>,
    /// Per-layer unselected group scores, when requested.
    scores: Vec<GroupScores>,
    fallback_rows: usize,
}

struct SegmentSpec<'a> {
    tokens: &'a [Token],
    positions: &'a [f32],
    regions: &'a [Region],
    /// Flattened slot index of the first segment token.
    slot_offset: usize,
    selection: &'a QuerySelection,
    want_logits: bool,
    record_scores_m: Option<usize>,
}

/// Runs the model over a segment that sees every slot of `past` plus its own
/// earlier tokens. The K/V of `past` must occupy flattened slots `0..past.len()`.
fn forward_segment(
    model: &Model,
    past: &KvCache,
    spec: SegmentSpec<'_>,
    observer: &mut dyn AttentionObserver,
) -> Result<SegmentResult> {
    let cfg = model.config();
    let (d, h, hd, m, vocab) = (cfg.model_dim, cfg.heads, cfg.head_dim(), cfg.mlp_dim, cfg.vocab);
    let n = spec.tokens.len();
    let n_past = past.len();
    let n_keys = n_past + n;
    if let Some(&t) = spec.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("token {t} outside vocabulary of {vocab}")));
    }
    let rotary = cfg.rotary();
    let angles: Vec<Vec<(f32, f32)>> = spec.positions.iter().map(|&p| rotary.angles(p)).collect();
    let scale = 1.0 / (hd as f32).sqrt();

    let mut key_groups = past.groups();
    key_groups.extend(spec.regions.iter().map(|r| r.piece()));
    let n_groups = group_count(&key_groups);
    let key_slots: Vec<usize> = (0..n_past).chain(spec.slot_offset..spec.slot_offset + n).collect();

    let emb = model.tensor(ParamKind::TokenEmbedding);
    let mut x = vec![0.0f32; n * d];
    for (i, &t) in spec.tokens.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }

    let mut seg_keys = Vec::with_capacity(cfg.layers);
    let mut seg_values = Vec::with_capacity(cfg.layers);
    let mut traces = Vec::new();
    let mut scores = Vec::new();
    let mut fallback_rows = 0;
    let mut a = vec![0.0f32; n * d];
    let mut q = vec![0.0f32; n * d];
    let mut y = vec![0.0f32; n * d];
    let mut u = vec![0.0f32; n * m];
    let mut z = vec![0.0f32; n * d];

    for l in 0..cfg.layers {
        let g1 = model.tensor(ParamKind::AttnNorm(l));
        for i in 0..n {
            rms_norm_into(&x[i * d..(i + 1) * d], g1, cfg.norm_eps, &mut a[i * d..(i + 1) * d]);
        }
        let mut k = vec![0.0f32; n * d];
        let mut v = vec![0.0f32; n * d];
        matmul_into(&a, model.tensor(ParamKind::Query(l)), &mut q, n, d, d);
        matmul_into(&a, model.tensor(ParamKind::Key(l)), &mut k, n, d, d);
        matmul_into(&a, model.tensor(ParamKind::Value(l)), &mut v, n, d, d);
        for i in 0..n {
            for head in 0..h {
                let r = i * d + head * hd..i * d + (head + 1) * hd;
                rope_apply(&mut q[r.clone()], &angles[i]);
                rope_apply(&mut k[r], &angles[i]);
            }
        }
        let past_k = past.layer_keys(l);
        let past_v = past.layer_values(l);
        let key_at = |j: usize| if j < n_past { &past_k[j * d..(j + 1) * d] } else { &k[(j - n_past) * d..(j - n_past + 1) * d] };
        let val_at = |j: usize| if j < n_past { &past_v[j * d..(j + 1) * d] } else { &v[(j - n_past) * d..(j - n_past + 1) * d] };

        // Logits and probabilities, dense over [head, row, key].
        let mut logits = vec![MASKED; h * n * n_keys];
        let mut probs = vec![0.0f32; h * n * n_keys];
        for head in 0..h {
            let hr = head * hd..(head + 1) * hd;
            for i in 0..n {
                let base = (head * n + i) * n_keys;
                let qi = &q[i * d + hr.start..i * d + hr.end];
                let visible = n_past + i + 1;
                let lrow = &mut logits[base..base + n_keys];
                for (j, lj) in lrow[..visible].iter_mut().enumerate() {
                    let kj = &key_at(j)[hr.clone()];
                    let mut s = 0.0f32;
                    for (&x1, &x2) in qi.iter().zip(kj) {
                        s += x1 * x2;
                    }
                    *lj = s * scale;
                }
                let prow = &mut probs[base..base + n_keys];
                prow.copy_from_slice(lrow);
                softmax_in_place(prow)?;
            }
        }

        let selected = if spec.selection.is_off() && spec.record_scores_m.is_none() {
            None
        } else {
            let p_in = ProbTensor::new([1, h, n, n_keys], probs.clone())?;
            if let Some(rm) = spec.record_scores_m {
                scores.push(group_scores(&p_in, &key_groups, n_groups, rm)?);
            }
            match spec.selection {
                QuerySelection::Off => None,
                QuerySelection::PerLayer(sc) => {
                    let s = group_scores(&p_in, &key_groups, n_groups, sc.reduce_m)?;
                    let agg = aggregate(&s, sc.aggregation, sc.reduce_m);
                    let sel = select_topk(&agg, sc.k)?;
                    let (p_out, fb) = apply_selection(&p_in, &sel, &key_groups)?;
                    fallback_rows += fb;
                    traces.push(SelectionTrace { scores: s, aggregated: agg, selection: sel, fallback_rows: fb });
                    Some(p_out.data)
                }
                QuerySelection::Fixed(sel) => {
                    if sel.groups != n_groups {
                        return Err(Error::Input(format!(
                            "fixed selection covers {} groups, cache has {n_groups}",
                            sel.groups
                        )));
                    }
                    let (p_out, fb) = apply_selection(&p_in, sel, &key_groups)?;
                    fallback_rows += fb;
                    Some(p_out.data)
                }
            }
        };
        let used = selected.as_deref().unwrap_or(&probs);

        let mut o = vec![0.0f32; n * d];
        for head in 0..h {
            let hr = head * hd..(head + 1) * hd;
            for i in 0..n {
                let base = (head * n + i) * n_keys;
                let visible = n_past + i + 1;
                observer.observe(&AttentionEvent {
                    layer: l,
                    head,
                    row_slot: spec.slot_offset + i,
                    row_region: spec.regions[i],
                    key_slots: &key_slots[..visible],
                    logits: &logits[base..base + visible],
                    probs: &probs[base..base + visible],
                    probs_selected: &used[base..base + visible],
                });
                let orow = &mut o[i * d + hr.start..i * d + hr.end];
                for (j, &pj) in used[base..base + visible].iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    for (oo, &vv) in orow.iter_mut().zip(&val_at(j)[hr.clone()]) {
                        *oo += pj * vv;
                    }
                }
            }
        }
        matmul_into(&o, model.tensor(ParamKind::AttnOut(l)), &mut y, n, d, d);
        for (xx, yy) in x.iter_mut().zip(&y) {
            *xx += yy;
        }
        let g2 = model.tensor(ParamKind::MlpNorm(l));
        for i in 0..n {
            rms_norm_into(&x[i * d..(i + 1) * d], g2, cfg.norm_eps, &mut a[i * d..(i + 1) * d]);
        }
        matmul_into(&a, model.tensor(ParamKind::MlpIn(l)), &mut u, n, d, m);
        u.iter_mut().for_each(|w| *w = gelu(*w));
        matmul_into(&u, model.tensor(ParamKind::MlpOut(l)), &mut z, n, m, d);
        for (xx, zz) in x.iter_mut().zip(&z) {
            *xx += zz;
        }
        seg_keys.push(k);
        seg_values.push(v);
    }

    let logits = if spec.want_logits {
        let gf = model.tensor(ParamKind::FinalNorm);
        let unemb = model.tensor(ParamKind::Unembedding);
        let mut f = vec![0.0f32; d];
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            rms_norm_into(&x[i * d..(i + 1) * d], gf, cfg.norm_eps, &mut f);
            let mut row = vec![0.0f32; vocab];
            matmul_into(&f, unemb, &mut row, 1, d, vocab);
            rows.push(row);
        }
        Some(rows)
    } else {
        None
    };

    Ok(SegmentResult {
        segment: Segment {
            keys: seg_keys,
            values: seg_values,
            regions: spec.regions.to_vec(),
            positions: spec.positions.to_vec(),
            tokens: spec.tokens.to_vec(),
        },
        logits,
        traces,
        scores,
        fallback_rows,
    })
}

fn context_only(ctx: &SegmentedContext) -> SegmentedContext {
    ctx.clone().with_query(Vec::new())
}

/// Encodes sink and pieces into a cache. Full attention runs one causal pass
/// over the flattened context; parallel encoding runs the sink once and then
/// every piece against that shared sink, concurrently.
pub fn encode_context<O: ForkObserver>(
    model: &Model,
    ctx: &SegmentedContext,
    positions: &PositionMap,
    cfg: &SchemeConfig,
    observer: &mut O,
) -> Result<KvCache> {
    cfg.validate()?;
    ctx.validate()?;
    let c = context_only(ctx);
    if positions.positions.len() < c.total_len() {
        return Err(Error::Input(format!(
            "{} positions for {} context slots",
            positions.positions.len(),
            c.total_len()
        )));
    }
    let regions = c.regions();
    let pos = &positions.positions;
    let mut cache = KvCache::empty(model);
    let off = QuerySelection::Off;
    fn spec<'a>(
        tokens: &'a [Token],
        pos: &'a [f32],
        regions: &'a [Region],
        off: &'a QuerySelection,
        range: std::ops::Range<usize>,
    ) -> SegmentSpec<'a> {
        SegmentSpec {
            tokens,
            positions: &pos[range.clone()],
            regions: &regions[range.clone()],
            slot_offset: range.start,
            selection: off,
            want_logits: false,
            record_scores_m: None,
        }
    }
    let spec = |tokens, range| spec(tokens, pos, &regions, &off, range);
    match cfg.scheme {
        Scheme::Full => {
            let tokens = c.flatten();
            let res = forward_segment(model, &cache, spec(&tokens, 0..tokens.len()), observer)?;
            cache.append(res.segment);
        }
        Scheme::Parallel => {
            if c.sink_len() > 0 {
                let res = forward_segment(model, &cache, spec(&c.sink_tokens, 0..c.sink_len()), observer)?;
                cache.append(res.segment);
            }
            let sink = &cache;
            let locals: Vec<(usize, O)> = (0..c.parallel_degree()).map(|i| (i, observer.fork())).collect();
            let encoded: Vec<Result<(Segment, O)>> = locals
                .into_par_iter()
                .map(|(i, mut local)| {
                    let res = forward_segment(model, sink, spec(&c.pieces[i], c.piece_range(i)), &mut local)?;
                    Ok((res.segment, local))
                })
                .collect();
            let mut segments = Vec::with_capacity(encoded.len());
            for r in encoded {
                let (seg, local) = r?;
                observer.absorb(local);
                segments.push(seg);
            }
            for seg in segments {
                cache.append(seg);
            }
        }
    }
    Ok(cache)
}

/// Output of a query pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    /// Next-token logits per query token.
    pub logits: Vec<Vec<f32>>,
    pub traces: Vec<SelectionTrace>,
    pub fallback_rows: usize,
    /// Set when a position exceeded the model's configured range.
    pub position_overflow: bool,
}

/// Runs query tokens over the whole cache (plus preceding query tokens) and
/// appends their K/V to the cache.
pub fn query_forward(
    model: &Model,
    cache: &mut KvCache,
    query: &[Token],
    positions: &[f32],
    selection: &QuerySelection,
    observer: &mut dyn AttentionObserver,
) -> Result<QueryOutput> {
    query_forward_inner(model, cache, query, positions, selection, None, observer).map(|(o, _)| o)
}

fn query_forward_inner(
    model: &Model,
    cache: &mut KvCache,
    query: &[Token],
    positions: &[f32],
    selection: &QuerySelection,
    record_scores_m: Option<usize>,
    observer: &mut dyn AttentionObserver,
) -> Result<(QueryOutput, Vec<GroupScores>)> {
    cache.check_model(model)?;
    if query.is_empty() {
        return Err(Error::Input("query must contain at least one token".into()));
    }
    if positions.len() != query.len() {
        return Err(Error::Input(format!("{} positions for {} query tokens", positions.len(), query.len())));
    }
    if let QuerySelection::PerLayer(sc) = selection {
        sc.validate()?;
        if sc.aggregation.spans_layers() {
            return Err(Error::Config("layer aggregation needs the two-pass forward".into()));
        }
    }
    let limit = model.config().max_seq_len as f32;
    let position_overflow = positions.iter().chain(cache.positions()).any(|&p| p >= limit);
    let regions = vec![Region::Query; query.len()];
    let res = forward_segment(
        model,
        cache,
        SegmentSpec {
            tokens: query,
            positions,
            regions: &regions,
            slot_offset: cache.len(),
            selection,
            want_logits: true,
            record_scores_m,
        },
        observer,
    )?;
    cache.append(res.segment);
    Ok((
        QueryOutput {
            logits: res.logits.unwrap_or_default(),
            traces: res.traces,
            fallback_rows: res.fallback_rows,
            position_overflow,
        },
        res.scores,
    ))
}

/// Layer-aggregated selection: a first pass without selection records every
/// layer's grouped scores, which are reduced to one score per group; the
/// second pass applies that fixed selection at every layer. Returns the
/// second pass and the selection (reused while decoding).
pub fn two_pass_forward(
    model: &Model,
    cache: &mut KvCache,
    query: &[Token],
    positions: &[f32],
    cfg: &SelectionConfig,
    observer: &mut dyn AttentionObserver,
) -> Result<(QueryOutput, Selection, SelectionTrace)> {
    cfg.validate()?;
    if !cfg.aggregation.spans_layers() {
        return Err(Error::Config("two-pass forward is only needed for layer aggregation".into()));
    }
    let mut scratch = cache.clone();
    let (_, per_layer) = query_forward_inner(
        model,
        &mut scratch,
        query,
        positions,
        &QuerySelection::Off,
        Some(cfg.reduce_m),
        &mut crate::stats::NoObserver,
    )?;
    let scores = GroupScores::stack_layers(&per_layer)?;
    let aggregated = aggregate(&scores, cfg.aggregation, cfg.reduce_m);
    let selection = select_topk(&aggregated, cfg.k)?;
    let out = query_forward(model, cache, query, positions, &QuerySelection::Fixed(selection.clone()), observer)?;
    let trace = SelectionTrace { scores, aggregated, selection: selection.clone(), fallback_rows: out.fallback_rows };
    Ok((out, selection, trace))
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> Token {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as Token
}

/// Greedy decoding from the logits of the last processed token. Each emitted
/// token (except the last) is fed back as a query slot.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    model: &Model,
    cache: &mut KvCache,
    last_logits: &[f32],
    next_position: f32,
    max_new: usize,
    selection: &QuerySelection,
    stop: Option<Token>,
    observer: &mut dyn AttentionObserver,
) -> Result<Vec<Token>> {
    if max_new == 0 {
        return Err(Error::Input("max_new must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(max_new);
    let mut logits = last_logits.to_vec();
    let mut pos = next_position;
    loop {
        let t = argmax(&logits);
        out.push(t);
        if out.len() == max_new || Some(t) == stop {
            return Ok(out);
        }
        let res = query_forward(model, cache, &[t], &[pos], selection, observer)?;
        logits = res.logits.into_iter().next().expect("one logit row per token");
        pos += 1.0;
    }
}

/// Mixed cache for value-only parallel encoding: keys from full attention,
/// values (and slot labels) from the parallel encoding.
pub fn replace_keys_oracle(parallel: &KvCache, full: &KvCache) -> Result<KvCache> {
    if parallel.len() != full.len() || parallel.layers() != full.layers() || parallel.width() != full.width() {
        return Err(Error::Input(format!(
            "caches differ in shape: {} vs {} slots",
            parallel.len(),
            full.len()
        )));
    }
    if parallel.tokens != full.tokens {
        return Err(Error::Input("caches encode different token sequences".into()));
    }
    Ok(KvCache {
        heads: parallel.heads,
        head_dim: parallel.head_dim,
        keys: full.keys.clone(),
        values: parallel.values.clone(),
        regions: parallel.regions.clone(),
        positions: full.positions.clone(),
        tokens: parallel.tokens.clone(),
    })
}
