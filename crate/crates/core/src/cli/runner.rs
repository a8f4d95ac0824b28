//! Runs task instances through a configured encoding scheme and collects
//! metrics and attention statistics into a report.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::{aggregate_metric, weighted_mean, InstanceRecord, PairReport, RunReport, SelectionSummary, REPORT_SCHEMA_VERSION};
use crate::engine::{
    encode_context, greedy_decode, query_forward, replace_keys_oracle, two_pass_forward, QueryOutput, QuerySelection,
    Scheme, SchemeConfig,
};
use crate::error::{Error, Result};
use crate::layout::{
    assign_positions, build_mask, pair_count, theoretical_pair_count, AttentionMaskSpec, PositionMap, PositionMode,
    Region, SegmentedContext,
};
use crate::model::{decode_tokens, Model};
use crate::selection::SelectionTrace;
use crate::stats::{entropy_by_region, keynorm_by_position, summarize, NoObserver, StatsBundle};
use crate::tasks::{
    gen_icl, gen_kv_recall, gen_lm_eval, gen_needle, lm_corpus, query_nll, score_accuracy, score_subem, Metric,
    TaskInstance, TaskKind,
};

/// The instances a configuration evaluates.
pub fn instances(cfg: &RunConfig) -> Result<Vec<TaskInstance>> {
    let n = cfg.n_instances;
    Ok(match cfg.task {
        TaskKind::Kv => gen_kv_recall(cfg.seed, cfg.kv_spec())?.take(n).collect(),
        TaskKind::Needle => gen_needle(cfg.seed, cfg.haystack_len, 1)?.take(n).collect(),
        TaskKind::Icl => gen_icl(cfg.seed, cfg.n_classes, cfg.n_demos)?.take(n).collect(),
        TaskKind::Lm => {
            let context_len = cfg.seq_len - cfg.query_len;
            let corpus = lm_corpus(cfg.seed, n, context_len, cfg.seq_len, cfg.kv_spec())?;
            gen_lm_eval(&corpus, context_len, cfg.query_len)?
        }
    })
}

/// Encoded layout of one instance under a configuration.
pub fn instance_context(cfg: &RunConfig, inst: &TaskInstance) -> Result<(SegmentedContext, bool)> {
    let degree = if cfg.scheme == Scheme::Full { 1 } else { cfg.parallel_degree };
    let sink = cfg.sink_tokens();
    let split = inst.segment(degree, sink.as_deref())?;
    Ok((split.context, split.clamped))
}

fn position_mode(cfg: &RunConfig) -> PositionMode {
    match cfg.scheme {
        Scheme::Full => PositionMode::Full,
        Scheme::Parallel => cfg.position,
    }
}

fn pair_report(ctx: &SegmentedContext, mask: &AttentionMaskSpec) -> Result<PairReport> {
    let s = ctx.sink_len();
    let mut actual = 0u64;
    for (r, label) in mask.labels.iter().enumerate() {
        if let Region::Piece(_) = label {
            actual += (mask.allowed_count(r) - s) as u64;
        }
    }
    let lens = ctx.piece_lens();
    let n: usize = lens.iter().sum();
    let p = lens.len() as u64;
    let pc = pair_count(mask);
    Ok(PairReport {
        actual,
        // Uneven splits report the law rounded down; only even splits must agree.
        theoretical: match theoretical_pair_count(n as u64, p) {
            Ok(t) => t,
            Err(_) => n as u64 * (n as u64 + p) / (2 * p),
        },
        with_sink: pc.context,
        query: pc.query,
        even_split: lens.iter().all(|&l| l == lens[0]),
    })
}

fn add_pairs(acc: &mut PairReport, p: &PairReport) {
    acc.actual += p.actual;
    acc.theoretical += p.theoretical;
    acc.with_sink += p.with_sink;
    acc.query += p.query;
    acc.even_split &= p.even_split;
}

/// Everything one instance contributes to a report.
struct InstanceOutcome {
    record: InstanceRecord,
    stats: StatsBundle,
    pairs: PairReport,
    clamped: bool,
    traces: Vec<SelectionTrace>,
}

fn run_instance(model: &Model, cfg: &RunConfig, index: usize, inst: &TaskInstance) -> Result<InstanceOutcome> {
    let (ctx, clamped) = instance_context(cfg, inst)?;
    let pairs = pair_report(&ctx, &build_mask(&ctx))?;
    let scheme = cfg.scheme_config();
    let pm = assign_positions(&ctx, position_mode(cfg))?;
    let mut stats = StatsBundle::new(true);
    let mut cache = encode_context(model, &ctx, &pm, &scheme, &mut stats)?;
    let mut qpos: Vec<f32> = pm.positions[ctx.query_range()].to_vec();
    if cfg.oracle_keys {
        let flat = SegmentedContext::new(Vec::new(), vec![ctx.clone().with_query(Vec::new()).flatten()], Vec::new())?;
        let fpm = assign_positions(&flat, PositionMode::Full)?;
        let full = encode_context(model, &flat, &fpm, &SchemeConfig::full(), &mut NoObserver)?;
        cache = replace_keys_oracle(&cache, &full)?;
        let c = ctx.context_len();
        qpos = (0..ctx.query_tokens.len()).map(|i| (c + i) as f32).collect();
    }
    stats.add_key_norms(&cache);

    let mut traces = Vec::new();
    let (out, decode_sel): (QueryOutput, QuerySelection) = match scheme.selection {
        Some(sc) if sc.aggregation.spans_layers() => {
            let (out, sel, trace) = two_pass_forward(model, &mut cache, &ctx.query_tokens, &qpos, &sc, &mut stats)?;
            traces.push(trace);
            (out, QuerySelection::Fixed(sel))
        }
        Some(sc) => {
            let sel = QuerySelection::PerLayer(sc);
            let out = query_forward(model, &mut cache, &ctx.query_tokens, &qpos, &sel, &mut stats)?;
            (out, sel)
        }
        None => {
            let out = query_forward(model, &mut cache, &ctx.query_tokens, &qpos, &QuerySelection::Off, &mut stats)?;
            (out, QuerySelection::Off)
        }
    };
    traces.extend(out.traces.iter().cloned());
    let (output, score, predictions) = match inst.kind {
        TaskKind::Lm => {
            let q = inst.query.len();
            let (nll, n) = query_nll(&out.logits[..q - 1], &inst.query)?;
            (None, nll, n)
        }
        kind => {
            let last = out.logits.last().expect("query has at least one token");
            let next = qpos.last().map_or(0.0, |p| p.floor() + 1.0);
            let max_new = inst.gold.chars().count() + 1;
            let tokens =
                greedy_decode(model, &mut cache, last, next, max_new, &decode_sel, Some(b'\n' as u32), &mut NoObserver)?;
            let text = decode_tokens(&tokens);
            let text = text.trim_end_matches('\n').to_string();
            let score = match kind.metric() {
                Metric::Accuracy => score_accuracy(&text, &inst.gold),
                _ => score_subem(&text, &inst.gold)?,
            };
            (Some(text), score as f64, 1)
        }
    };
    let query_rows = StatsBundle {
        rows: stats.rows.iter().filter(|r| r.region == Region::Query).copied().collect(),
        ..StatsBundle::default()
    };
    let entropy = summarize(&query_rows, |r| r.entropy)?;
    let logit = summarize(&query_rows, |r| r.logit_absmean)?;
    let selected_pieces = (!traces.is_empty() && traces.iter().all(|t| t.selection.shape == [1, 1, 1]))
        .then(|| traces.iter().map(|t| t.selection.indices.clone()).collect());
    Ok(InstanceOutcome {
        record: InstanceRecord {
            index,
            seed: inst.seed,
            output,
            gold: inst.gold.clone(),
            score,
            predictions,
            entropy_mean: entropy.grand_mean,
            logit_absmean: logit.grand_mean,
            rows: entropy.count,
            fallback_rows: out.fallback_rows,
            position_overflow: out.position_overflow,
            selected_pieces,
        },
        stats,
        pairs,
        clamped,
        traces,
    })
}

/// Per-instance selection traces, written with `--trace-selection`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub traces: Vec<SelectionTrace>,
}

/// Result of a run: the report plus optional selection traces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<TraceRecord>,
}

/// Runs every configured instance (on the worker pool) and assembles the
/// report in instance order.
pub fn run_experiment(model: &Model, cfg: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate_settings()?;
    let insts = instances(cfg)?;
    let outcomes: Vec<InstanceOutcome> = insts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| run_instance(model, cfg, i, inst))
        .collect::<Result<_>>()?;

    let metric = cfg.task.metric();
    let mut merged = StatsBundle::new(true);
    let mut pairs = PairReport { actual: 0, theoretical: 0, with_sink: 0, query: 0, even_split: true };
    let mut records = Vec::with_capacity(outcomes.len());
    let mut traces = Vec::new();
    let mut histogram = vec![0usize; cfg.parallel_degree];
    let mut clamped = false;
    for o in outcomes {
        add_pairs(&mut pairs, &o.pairs);
        clamped |= o.clamped;
        merged.merge(o.stats);
        for t in &o.traces {
            for &g in &t.selection.indices {
                if g < histogram.len() {
                    histogram[g] += 1;
                }
            }
        }
        if cfg.trace_selection && !o.traces.is_empty() {
            traces.push(TraceRecord { index: o.record.index, traces: o.traces });
        }
        records.push(o.record);
    }
    let selection = cfg.selection().filter(|_| cfg.scheme == Scheme::Parallel).map(|sc| SelectionSummary {
        k: sc.k,
        reduce_m: sc.reduce_m,
        aggregation: sc.aggregation.as_str().to_string(),
        fallback_rows: records.iter().map(|r| r.fallback_rows).sum(),
        piece_histogram: histogram,
    });
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        scheme_label: cfg.scheme_label(),
        model_digest: Some(model.digest()),
        metric,
        aggregate: aggregate_metric(metric, &records)?,
        entropy_mean: weighted_mean(&records, |r| r.entropy_mean),
        logit_absmean: weighted_mean(&records, |r| r.logit_absmean),
        entropy_by_region: entropy_by_region(&merged),
        keynorm_by_position: keynorm_by_position(&merged),
        pair_count: pairs,
        selection,
        clamped_degree: clamped,
        position_overflow: records.iter().any(|r| r.position_overflow),
        instances: records,
        wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunOutput { report, traces })
}

/// Output of `--dry-run`: layouts and pair counts without running the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunReport {
    pub schema_version: u32,
    pub dry_run: bool,
    pub config: RunConfig,
    pub scheme_label: String,
    pub instances: usize,
    pub pair_count: PairReport,
    pub clamped_degree: bool,
    /// Largest position id any instance would use.
    pub max_position: f32,
}

pub fn dry_run(cfg: &RunConfig) -> Result<DryRunReport> {
    cfg.validate_settings()?;
    let insts = instances(cfg)?;
    let mut pairs = PairReport { actual: 0, theoretical: 0, with_sink: 0, query: 0, even_split: true };
    let mut clamped = false;
    let mut max_position = 0.0f32;
    for inst in &insts {
        let (ctx, c) = instance_context(cfg, inst)?;
        add_pairs(&mut pairs, &pair_report(&ctx, &build_mask(&ctx))?);
        clamped |= c;
        max_position = max_position.max(assign_positions(&ctx, position_mode(cfg))?.max_position());
    }
    Ok(DryRunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dry_run: true,
        config: cfg.clone(),
        scheme_label: cfg.scheme_label(),
        instances: insts.len(),
        pair_count: pairs,
        clamped_degree: clamped,
        max_position,
    })
}

/// Layout of one instance, written with `--dump-layout`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDump {
    pub context: SegmentedContext,
    pub regions: Vec<Region>,
    pub positions: PositionMap,
    pub mask: AttentionMaskSpec,
}

pub fn dump_layout(cfg: &RunConfig, index: usize) -> Result<LayoutDump> {
    let inst = instances(cfg)?
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Input(format!("no instance {index}")))?;
    let (ctx, _) = instance_context(cfg, &inst)?;
    Ok(LayoutDump {
        regions: ctx.regions(),
        positions: assign_positions(&ctx, position_mode(cfg))?,
        mask: build_mask(&ctx),
        context: ctx,
    })
}

/// Sweep axes; each run is one point of the cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub degrees: Vec<usize>,
    /// Variant labels: full, naive, sink, sel, sink+sel, value-only.
    pub schemes: Vec<String>,
    pub select_k: Vec<usize>,
    pub aggregations: Vec<crate::selection::Aggregation>,
}

impl SweepAxes {
    /// Configurations in sweep order. Selection axes only multiply variants
    /// that select; full attention runs once regardless of `P`.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if self.degrees.is_empty() || self.schemes.is_empty() {
            return Err(Error::Config("sweep axes must not be empty".into()));
        }
        let ks: Vec<Option<usize>> =
            if self.select_k.is_empty() { vec![None] } else { self.select_k.iter().copied().map(Some).collect() };
        let aggs: Vec<Option<_>> =
            if self.aggregations.is_empty() { vec![None] } else { self.aggregations.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for label in &self.schemes {
            let degrees: &[usize] = if label == "full" { &[1] } else { &self.degrees };
            for &p in degrees {
                let selects = label.contains("sel");
                let combos: Vec<(Option<usize>, Option<_>)> = if selects {
                    ks.iter().flat_map(|&k| aggs.iter().map(move |&a| (k, a))).collect()
                } else {
                    vec![(None, None)]
                };
                for (k, a) in combos {
                    let mut cfg = base.clone();
                    cfg.set_scheme_label(label)?;
                    if label != "full" {
                        cfg.parallel_degree = p;
                    }
                    if let Some(k) = k {
                        cfg.select_k = Some(k);
                    }
                    if let Some(a) = a {
                        cfg.aggr = a;
                    }
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

/// Runs a sweep and correlates entropy with the task metric across runs.
pub fn sweep(model: &Model, base: &RunConfig, axes: &SweepAxes) -> Result<(Vec<RunOutput>, super::report::SweepSummary)> {
    let runs: Vec<RunOutput> = axes.expand(base)?.iter().map(|cfg| run_experiment(model, cfg)).collect::<Result<_>>()?;
    let xs: Vec<f64> = runs.iter().map(|r| r.report.entropy_mean).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.report.aggregate).collect();
    let pearson_r = crate::stats::pearson_r(&xs, &ys).ok();
    let summary = super::report::SweepSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        runs: runs.len(),
        pearson_r,
        rows: runs.iter().map(|r| r.report.plot_row()).collect(),
    };
    Ok((runs, summary))
}

/// Mean entropy per region across every run, for quick comparisons.
pub fn region_means(reports: &[RunReport]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.entropy_by_region {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
