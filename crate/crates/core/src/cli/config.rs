//! Run configuration: flat `key = value` text files overridden by flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::engine::{Scheme, SchemeConfig};
use crate::error::{Error, Result};
use crate::layout::PositionMode;
use crate::model::{encode_text, ModelConfig, Optimizer};
use crate::selection::{Aggregation, SelectionConfig};
use crate::tasks::{KvSpec, TaskKind};

/// Every knob of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub scheme: Scheme,
    pub parallel_degree: usize,
    pub sink: bool,
    pub sink_text: String,
    /// Selective attention is on when set.
    pub select_k: Option<usize>,
    pub reduce_m: usize,
    pub aggr: Aggregation,
    pub position: PositionMode,
    /// Value-only diagnostic: keys from full attention, values from the parallel encoding.
    pub oracle_keys: bool,
    /// LM segment length (context plus query), in tokens.
    pub seq_len: usize,
    pub query_len: usize,
    pub n_instances: usize,
    pub seed: u64,
    pub n_items: usize,
    pub key_len: usize,
    pub val_len: usize,
    pub haystack_len: usize,
    pub n_classes: usize,
    pub n_demos: usize,
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
    pub train_steps: usize,
    pub train_lr: f32,
    pub train_batch: usize,
    pub train_opt: OptimizerKind,
    /// Lookups per training sequence.
    pub train_lookups: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub out: PathBuf,
    pub dump_layout: bool,
    pub trace_selection: bool,
    pub dry_run: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::reference();
        Self {
            task: TaskKind::Kv,
            scheme: Scheme::Full,
            parallel_degree: 1,
            sink: false,
            sink_text: "\n".into(),
            select_k: None,
            reduce_m: 5,
            aggr: Aggregation::HT,
            position: PositionMode::ParallelEven,
            oracle_keys: false,
            seq_len: 256,
            query_len: 64,
            n_instances: 100,
            seed: 0,
            n_items: 16,
            key_len: 1,
            val_len: 1,
            haystack_len: 16,
            n_classes: 4,
            n_demos: 16,
            checkpoint: None,
            train: false,
            train_steps: 6000,
            train_lr: 2e-3,
            train_batch: 8,
            train_opt: OptimizerKind::Adam,
            train_lookups: 32,
            model_dim: model.model_dim,
            mlp_dim: model.mlp_dim,
            layers: model.layers,
            heads: model.heads,
            out: PathBuf::from("out"),
            dump_layout: false,
            trace_selection: false,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(v: &str) -> Result<Self> {
        match v.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "momentum" | "mom" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{v}` (sgd|momentum|adam)"))),
        }
    }

    pub fn optimizer(self) -> Optimizer {
        match self {
            Self::Sgd => Optimizer::Sgd,
            Self::Momentum => Optimizer::Momentum { beta: 0.9 },
            Self::Adam => Optimizer::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-8 },
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects on/off, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

pub fn parse_scheme(v: &str) -> Result<Scheme> {
    match v.to_ascii_lowercase().as_str() {
        "full" => Ok(Scheme::Full),
        "parallel" => Ok(Scheme::Parallel),
        other => Err(Error::Config(format!("unknown scheme `{other}` (expected full or parallel)"))),
    }
}

pub fn parse_position(v: &str) -> Result<PositionMode> {
    match v.to_ascii_lowercase().as_str() {
        "even" | "parallel-even" => Ok(PositionMode::ParallelEven),
        "serialized" => Ok(PositionMode::Serialized),
        other => Err(Error::Config(format!("unknown position mode `{other}` (expected even or serialized)"))),
    }
}

/// Decodes `\n`, `\t` and `\\` escapes so sink text can hold control bytes.
fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

impl RunConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "task" => self.task = TaskKind::parse(v)?,
            "scheme" => self.scheme = parse_scheme(v)?,
            "parallel_degree" => self.parallel_degree = parse_num(&k, v)?,
            "sink" => self.sink = parse_bool(&k, v)?,
            "sink_text" => self.sink_text = unescape(v),
            "select_k" => {
                self.select_k = match v.to_ascii_lowercase().as_str() {
                    "off" | "none" | "0" => None,
                    _ => Some(parse_num(&k, v)?),
                }
            }
            "reduce_m" => self.reduce_m = parse_num(&k, v)?,
            "aggr" => self.aggr = Aggregation::parse(v)?,
            "position" => self.position = parse_position(v)?,
            "oracle_keys" => self.oracle_keys = parse_bool(&k, v)?,
            "seq_len" => self.seq_len = parse_num(&k, v)?,
            "query_len" => self.query_len = parse_num(&k, v)?,
            "n_instances" => self.n_instances = parse_num(&k, v)?,
            "seed" => self.seed = parse_num(&k, v)?,
            "n_items" => self.n_items = parse_num(&k, v)?,
            "key_len" => self.key_len = parse_num(&k, v)?,
            "val_len" => self.val_len = parse_num(&k, v)?,
            "haystack_len" => self.haystack_len = parse_num(&k, v)?,
            "n_classes" => self.n_classes = parse_num(&k, v)?,
            "n_demos" => self.n_demos = parse_num(&k, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "train" => self.train = parse_bool(&k, v)?,
            "train_steps" => self.train_steps = parse_num(&k, v)?,
            "train_lr" => self.train_lr = parse_num(&k, v)?,
            "train_batch" => self.train_batch = parse_num(&k, v)?,
            "train_opt" => self.train_opt = OptimizerKind::parse(v)?,
            "train_lookups" => self.train_lookups = parse_num(&k, v)?,
            "model_dim" => self.model_dim = parse_num(&k, v)?,
            "mlp_dim" => self.mlp_dim = parse_num(&k, v)?,
            "layers" => self.layers = parse_num(&k, v)?,
            "heads" => self.heads = parse_num(&k, v)?,
            "out" => self.out = PathBuf::from(v),
            "dump_layout" => self.dump_layout = parse_bool(&k, v)?,
            "trace_selection" => self.trace_selection = parse_bool(&k, v)?,
            "dry_run" => self.dry_run = parse_bool(&k, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults. Blank lines and `#`
    /// comments are ignored; every other line is `key = value`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn selection(&self) -> Option<SelectionConfig> {
        self.select_k.map(|k| SelectionConfig { k, reduce_m: self.reduce_m, aggregation: self.aggr })
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        match self.scheme {
            Scheme::Full => SchemeConfig::full(),
            Scheme::Parallel => SchemeConfig {
                scheme: Scheme::Parallel,
                parallel_degree: self.parallel_degree,
                sink: self.sink,
                selection: self.selection(),
                position_mode: self.position,
            },
        }
    }

    pub fn kv_spec(&self) -> KvSpec {
        KvSpec { n_items: self.n_items, key_len: self.key_len, val_len: self.val_len }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            model_dim: self.model_dim,
            mlp_dim: self.mlp_dim,
            layers: self.layers,
            heads: self.heads,
            seed: self.seed,
            ..ModelConfig::reference()
        }
    }

    pub fn sink_tokens(&self) -> Option<Vec<u32>> {
        self.sink.then(|| encode_text(&self.sink_text))
    }

    /// Short name of the encoding variant, used in reports and plot files.
    pub fn scheme_label(&self) -> String {
        if self.scheme == Scheme::Full {
            return "full".into();
        }
        if self.oracle_keys {
            return "value-only".into();
        }
        match (self.sink, self.select_k.is_some()) {
            (false, false) => "naive".into(),
            (true, false) => "sink".into(),
            (false, true) => "sel".into(),
            (true, true) => "sink+sel".into(),
        }
    }

    /// Sets scheme, sink, selection and oracle flags from a variant label.
    pub fn set_scheme_label(&mut self, label: &str) -> Result<()> {
        let (scheme, sink, sel, oracle) = match label {
            "full" => (Scheme::Full, false, false, false),
            "naive" => (Scheme::Parallel, false, false, false),
            "sink" => (Scheme::Parallel, true, false, false),
            "sel" => (Scheme::Parallel, false, true, false),
            "sink+sel" => (Scheme::Parallel, true, true, false),
            "value-only" => (Scheme::Parallel, false, false, true),
            other => return Err(Error::Config(format!("unknown scheme variant `{other}`"))),
        };
        self.scheme = scheme;
        self.sink = sink;
        self.oracle_keys = oracle;
        if scheme == Scheme::Full {
            self.parallel_degree = 1;
        }
        if sel {
            self.select_k.get_or_insert(SelectionConfig::default().k);
        } else {
            self.select_k = None;
        }
        Ok(())
    }

    /// Full validation, including where the model comes from.
    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        if self.train && (self.train_steps == 0 || self.train_batch == 0 || self.train_lookups == 0) {
            return Err(Error::Config("train_steps, train_batch and train_lookups must be at least 1".into()));
        }
        if !self.train && self.checkpoint.is_none() && !self.dry_run {
            return Err(Error::Config("a checkpoint is required unless --train or --dry-run is given".into()));
        }
        Ok(())
    }

    /// Validation of everything except the model source.
    pub fn validate_settings(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::Config("n_instances must be at least 1".into()));
        }
        self.scheme_config().validate()?;
        if self.scheme == Scheme::Full && (self.sink || self.select_k.is_some() || self.parallel_degree != 1) {
            return Err(Error::Config("scheme=full ignores sinks, selection and P>1; use scheme=parallel".into()));
        }
        if self.oracle_keys && (self.sink || self.select_k.is_some() || self.scheme == Scheme::Full) {
            return Err(Error::Config("oracle keys combine only with plain parallel encoding".into()));
        }
        if self.sink && self.sink_text.is_empty() {
            return Err(Error::Config("sink_text must not be empty when the sink is on".into()));
        }
        match self.task {
            TaskKind::Kv => self.kv_spec().validate()?,
            TaskKind::Lm => {
                if self.query_len < 2 || self.seq_len <= self.query_len {
                    return Err(Error::Config("lm needs query_len >= 2 and seq_len > query_len".into()));
                }
                self.kv_spec().validate()?;
            }
            TaskKind::Needle | TaskKind::Icl => {}
        }
        self.model_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_text() {
        let cfg = RunConfig::from_text(
            "# comment\ntask = lm\nscheme=parallel\nparallel-degree = 8\nsink = on\nsink_text = \\n\nselect_k = 2\naggr = lht\nposition = serialized\n",
        )
        .unwrap();
        assert_eq!(cfg.task, TaskKind::Lm);
        assert_eq!(cfg.parallel_degree, 8);
        assert!(cfg.sink);
        assert_eq!(cfg.sink_text, "\n");
        assert_eq!(cfg.select_k, Some(2));
        assert_eq!(cfg.aggr, Aggregation::LHT);
        assert_eq!(cfg.position, PositionMode::Serialized);
        assert_eq!(cfg.scheme_label(), "sink+sel");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(RunConfig::from_text("task lm"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("parallel_degree = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("aggr = xyz"), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig { dry_run: true, ..RunConfig::default() };
        assert!(cfg.validate().is_ok());
        cfg.sink = true;
        assert!(cfg.validate().is_err());
        cfg.scheme = Scheme::Parallel;
        assert!(cfg.validate().is_ok());
        cfg.parallel_degree = 0;
        assert!(cfg.validate().is_err());
        let no_model = RunConfig::default();
        assert!(no_model.validate().is_err());
    }

    #[test]
    fn scheme_labels_round_trip() {
        for label in ["full", "naive", "sink", "sel", "sink+sel", "value-only"] {
            let mut cfg = RunConfig { parallel_degree: 4, ..RunConfig::default() };
            cfg.set_scheme_label(label).unwrap();
            assert_eq!(cfg.scheme_label(), label);
        }
    }
}
