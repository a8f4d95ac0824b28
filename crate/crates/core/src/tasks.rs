//! Deterministic synthetic task generators and metric scoring.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{split_context, Grouping, SegmentedContext, Split, Token};
use crate::model::{encode_text, Example, BOS};

const ALPHANUMERIC: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Kv,
    Needle,
    Icl,
    Lm,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kv" => Ok(Self::Kv),
            "needle" => Ok(Self::Needle),
            "icl" => Ok(Self::Icl),
            "lm" => Ok(Self::Lm),
            other => Err(Error::Config(format!("unknown task `{other}` (expected kv, needle, icl or lm)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kv => "kv",
            Self::Needle => "needle",
            Self::Icl => "icl",
            Self::Lm => "lm",
        }
    }

    /// Name of the metric reported for the task.
    pub fn metric(self) -> Metric {
        match self {
            Self::Kv | Self::Needle => Metric::SubEm,
            Self::Icl => Metric::Accuracy,
            Self::Lm => Metric::Ppl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    SubEm,
    Accuracy,
    Ppl,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SubEm => "subem",
            Self::Accuracy => "accuracy",
            Self::Ppl => "ppl",
        }
    }
}

/// One evaluation instance: context items, a query and the expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub items: Vec<Vec<Token>>,
    pub query: Vec<Token>,
    /// Empty for LM instances, which are scored on the query itself.
    pub gold: String,
    pub kind: TaskKind,
    pub seed: u64,
}

impl TaskInstance {
    pub fn context_len(&self) -> usize {
        self.items.iter().map(Vec::len).sum()
    }

    /// Splits the items into `degree` pieces. LM contexts are one item and
    /// are cut into equal token chunks instead.
    ///
    /// With a sink, the sink holds `BOS` followed by `sink_text`; without
    /// one, every piece starts with its own `BOS`, so a single piece is
    /// exactly the sequence seen in training.
    pub fn segment(&self, degree: usize, sink_text: Option<&[Token]>) -> Result<Split> {
        let mut split = match self.kind {
            TaskKind::Lm => {
                let tokens: Vec<Token> = self.items.concat();
                let chunks = even_chunks(&tokens, degree);
                let p = chunks.len();
                Split {
                    context: SegmentedContext::new(Vec::new(), chunks, Vec::new())?,
                    assignment: vec![vec![0]; p],
                    requested_degree: degree,
                    clamped: p < degree,
                }
            }
            _ => split_context(&self.items, degree, Grouping::Contiguous)?,
        };
        match sink_text {
            Some(text) => {
                split.context.sink_tokens = std::iter::once(BOS).chain(text.iter().copied()).collect();
            }
            None => {
                for piece in &mut split.context.pieces {
                    piece.insert(0, BOS);
                }
            }
        }
        split.context.query_tokens = self.query.clone();
        split.context.validate()?;
        Ok(split)
    }
}

/// Splits `tokens` into `degree` contiguous chunks whose lengths differ by at most one.
pub fn even_chunks(tokens: &[Token], degree: usize) -> Vec<Vec<Token>> {
    let p = degree.clamp(1, tokens.len().max(1));
    let (base, extra) = (tokens.len() / p, tokens.len() % p);
    let mut out = Vec::with_capacity(p);
    let mut start = 0;
    for i in 0..p {
        let len = base + usize::from(i < extra);
        out.push(tokens[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Seed of instance `index` in a stream started from `seed`.
fn instance_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_string(rng: &mut impl Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect()
}

/// Key-value recall parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvSpec {
    pub n_items: usize,
    pub key_len: usize,
    pub val_len: usize,
}

impl KvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.key_len == 0 || self.val_len == 0 {
            return Err(Error::Config("kv recall needs at least one item and non-empty keys and values".into()));
        }
        let distinct = (ALPHANUMERIC.len() as f64).powi(self.key_len as i32);
        if (self.n_items as f64) > distinct {
            return Err(Error::Config(format!(
                "{} unique keys of length {} do not exist",
                self.n_items, self.key_len
            )));
        }
        Ok(())
    }

    /// `(key, value)` pairs with unique keys.
    fn pairs(&self, rng: &mut impl Rng) -> Vec<(String, String)> {
        let mut seen = std::collections::HashSet::with_capacity(self.n_items);
        let mut out = Vec::with_capacity(self.n_items);
        while out.len() < self.n_items {
            let key = random_string(rng, ALPHANUMERIC, self.key_len);
            if seen.insert(key.clone()) {
                out.push((key, random_string(rng, ALPHANUMERIC, self.val_len)));
            }
        }
        out
    }
}

fn kv_instance(spec: KvSpec, seed: u64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = spec.pairs(&mut rng);
    let (key, value) = &pairs[rng.random_range(0..pairs.len())];
    TaskInstance {
        items: pairs.iter().map(|(k, v)| encode_text(&format!("{k}:{v}\n"))).collect(),
        query: encode_text(&format!("{key}:")),
        gold: value.clone(),
        kind: TaskKind::Kv,
        seed,
    }
}

/// Endless stream of `key:value` lookup instances.
pub fn gen_kv_recall(seed: u64, spec: KvSpec) -> Result<impl Iterator<Item = TaskInstance>> {
    spec.validate()?;
    Ok((0u64..).map(move |i| kv_instance(spec, instance_seed(seed, i))))
}

const FILLER: &[&str] = &[
    "The grass is green.",
    "The sky is blue.",
    "The sun is warm.",
    "Birds fly south.",
    "Rain falls at night.",
    "The river runs on.",
    "Trees grow tall.",
    "Snow melts in spring.",
    "Wind moves the sand.",
    "Stars shine above.",
];

const NEEDLE_PREFIX: &str = "The magic number is ";

fn needle_instance(haystack_len: usize, n_needles: usize, seed: u64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payload = random_string(&mut rng, b"0123456789", 4);
    let mut slots: Vec<usize> = (0..haystack_len).collect();
    slots.shuffle(&mut rng);
    let needles = &slots[..n_needles];
    let items = (0..haystack_len)
        .map(|i| {
            let line = if needles.contains(&i) {
                format!("{NEEDLE_PREFIX}{payload}.\n")
            } else {
                format!("{}\n", FILLER[rng.random_range(0..FILLER.len())])
            };
            encode_text(&line)
        })
        .collect();
    TaskInstance { items, query: encode_text(NEEDLE_PREFIX), gold: payload, kind: TaskKind::Needle, seed }
}

/// Endless stream of needle-in-a-haystack instances: `haystack_len` filler
/// lines with `n_needles` copies of one fact at seeded lines.
pub fn gen_needle(seed: u64, haystack_len: usize, n_needles: usize) -> Result<impl Iterator<Item = TaskInstance>> {
    if n_needles == 0 || n_needles > haystack_len {
        return Err(Error::Config(format!("cannot place {n_needles} needles in {haystack_len} lines")));
    }
    Ok((0u64..).map(move |i| needle_instance(haystack_len, n_needles, instance_seed(seed, i))))
}

const ICL_INPUT_LEN: usize = 3;

/// Label token of class `c`.
pub fn icl_label(c: usize) -> char {
    (b'A' + c as u8) as char
}

/// The rule behind the ICL task: the class of an input is fixed by its first letter.
pub fn icl_class(input: &str, n_classes: usize) -> usize {
    let first = input.bytes().next().unwrap_or(b'a');
    (first.wrapping_sub(b'a') as usize) % n_classes
}

fn icl_input(rng: &mut impl Rng, class: usize, n_classes: usize) -> String {
    let firsts: Vec<u8> = (b'a'..=b'z').filter(|&b| ((b - b'a') as usize) % n_classes == class).collect();
    let mut s = String::with_capacity(ICL_INPUT_LEN);
    s.push(firsts[rng.random_range(0..firsts.len())] as char);
    s.push_str(&random_string(rng, b"abcdefghijklmnopqrstuvwxyz", ICL_INPUT_LEN - 1));
    s
}

fn icl_instance(n_classes: usize, n_demos: usize, seed: u64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n_classes).chain((n_classes..n_demos).map(|_| rng.random_range(0..n_classes))).collect();
    classes.shuffle(&mut rng);
    let items = classes
        .iter()
        .map(|&c| encode_text(&format!("{}>{}\n", icl_input(&mut rng, c, n_classes), icl_label(c))))
        .collect();
    let target = rng.random_range(0..n_classes);
    let input = icl_input(&mut rng, target, n_classes);
    TaskInstance {
        items,
        query: encode_text(&format!("{input}>")),
        gold: icl_label(target).to_string(),
        kind: TaskKind::Icl,
        seed,
    }
}

/// Endless stream of classification instances: demonstrations `input>label`
/// covering every class, then a fresh input to label.
pub fn gen_icl(seed: u64, n_classes: usize, n_demos: usize) -> Result<impl Iterator<Item = TaskInstance>> {
    if !(2..=26).contains(&n_classes) || n_demos < n_classes {
        return Err(Error::Config(format!(
            "icl needs 2..=26 classes and at least one demo per class (got {n_classes} classes, {n_demos} demos)"
        )));
    }
    Ok((0u64..).map(move |i| icl_instance(n_classes, n_demos, instance_seed(seed, i))))
}

/// Non-overlapping segments of `context_len + query_len` tokens; the final
/// `query_len` tokens of each segment form the query.
pub fn gen_lm_eval(corpus: &[Token], context_len: usize, query_len: usize) -> Result<Vec<TaskInstance>> {
    let seg = context_len + query_len;
    if context_len == 0 || query_len < 2 {
        return Err(Error::Input("lm segments need a context and at least two query tokens".into()));
    }
    if corpus.len() < seg {
        return Err(Error::Input(format!("corpus of {} tokens is shorter than one segment of {seg}", corpus.len())));
    }
    Ok(corpus
        .chunks_exact(seg)
        .enumerate()
        .map(|(i, s)| TaskInstance {
            items: vec![s[..context_len].to_vec()],
            query: s[context_len..].to_vec(),
            gold: String::new(),
            kind: TaskKind::Lm,
            seed: i as u64,
        })
        .collect())
}

/// Recall-flavoured text corpus: each block of `block_len` bytes defines
/// fresh `key:value` lines over its first `context_len` bytes and then
/// repeats earlier definitions, so later lines are predictable only from the
/// block's own context.
pub fn lm_corpus(seed: u64, blocks: usize, context_len: usize, block_len: usize, spec: KvSpec) -> Result<Vec<Token>> {
    spec.validate()?;
    let line = spec.key_len + spec.val_len + 2;
    if context_len < line || block_len <= context_len {
        return Err(Error::Config("lm blocks must hold at least one definition line and a query".into()));
    }
    let mut out = Vec::with_capacity(blocks * block_len);
    for b in 0..blocks {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, b as u64));
        let mut defs = Vec::new();
        let mut text = String::new();
        let mut seen = std::collections::HashSet::new();
        // Once every key is defined the remaining context repeats definitions.
        let keyspace = (ALPHANUMERIC.len() as u64).saturating_pow(spec.key_len as u32);
        while text.len() < context_len && (seen.len() as u64) < keyspace {
            let key = random_string(&mut rng, ALPHANUMERIC, spec.key_len);
            if !seen.insert(key.clone()) {
                continue;
            }
            let value = random_string(&mut rng, ALPHANUMERIC, spec.val_len);
            text.push_str(&format!("{key}:{value}\n"));
            defs.push((key, value));
        }
        while text.len() < block_len {
            let (k, v) = &defs[rng.random_range(0..defs.len())];
            text.push_str(&format!("{k}:{v}\n"));
        }
        text.truncate(block_len);
        out.extend(encode_text(&text));
    }
    Ok(out)
}

/// One training sequence for the recall model: `BOS`, a random number of
/// definitions, then repeated lookups. Only the looked-up values (and their
/// line breaks) carry loss.
pub fn kv_training_example(rng: &mut impl Rng, spec: KvSpec, lookups: usize) -> Example {
    let n = rng.random_range(1..=spec.n_items);
    let pairs = KvSpec { n_items: n, ..spec }.pairs(rng);
    let mut tokens = vec![BOS];
    for (k, v) in &pairs {
        tokens.extend(encode_text(&format!("{k}:{v}\n")));
    }
    // Weight of each token as a prediction target.
    let mut target = vec![0.0f32; tokens.len()];
    for _ in 0..lookups {
        let (k, v) = &pairs[rng.random_range(0..n)];
        tokens.extend(encode_text(&format!("{k}:")));
        target.extend(std::iter::repeat_n(0.0, k.len() + 1));
        tokens.extend(encode_text(&format!("{v}\n")));
        target.extend(std::iter::repeat_n(1.0, v.len() + 1));
    }
    let weights = target[1..].to_vec();
    Example { tokens, weights: Some(weights) }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Substring exact match after lowercasing and trimming.
pub fn score_subem(output: &str, gold: &str) -> Result<u8> {
    let g = normalize(gold);
    if g.is_empty() {
        return Err(Error::Input("gold answer must not be empty".into()));
    }
    Ok(u8::from(normalize(output).contains(&g)))
}

/// Exact match of the first whitespace-delimited span of the output.
pub fn score_accuracy(output: &str, gold: &str) -> u8 {
    let first = output.split_whitespace().next().unwrap_or("");
    u8::from(!first.is_empty() && normalize(first) == normalize(gold))
}

/// Summed next-token cross-entropy (nats) and prediction count: `logits[i]`
/// predicts `tokens[i + 1]`.
pub fn query_nll(logits: &[Vec<f32>], tokens: &[Token]) -> Result<(f64, usize)> {
    if tokens.len() < 2 || logits.len() + 1 < tokens.len() {
        return Err(Error::Input(format!(
            "{} logit rows cannot score {} query tokens",
            logits.len(),
            tokens.len()
        )));
    }
    let mut total = 0.0f64;
    for (row, &next) in logits.iter().zip(&tokens[1..]) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        let target = *row
            .get(next as usize)
            .ok_or_else(|| Error::Input(format!("token {next} outside the logit vocabulary")))?;
        total += lse - target as f64;
    }
    Ok((total, tokens.len() - 1))
}

/// Perplexity of the query: `exp` of the mean next-token cross-entropy.
pub fn score_ppl(logits: &[Vec<f32>], tokens: &[Token]) -> Result<f64> {
    let (nll, n) = query_nll(logits, tokens)?;
    Ok((nll / n as f64).exp())
}

/// Perplexity over several scored segments, combined in the log domain.
pub fn combine_ppl(parts: &[(f64, usize)]) -> Result<f64> {
    let n: usize = parts.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(Error::Input("no predictions to score".into()));
    }
    Ok((parts.iter().map(|p| p.0).sum::<f64>() / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_tokens, VOCAB};
    use std::collections::HashSet;

    fn kv(n: usize) -> KvSpec {
        KvSpec { n_items: n, key_len: 2, val_len: 2 }
    }

    #[test]
    fn kv_is_deterministic() {
        let a: Vec<_> = gen_kv_recall(7, kv(8)).unwrap().take(20).collect();
        let b: Vec<_> = gen_kv_recall(7, kv(8)).unwrap().take(20).collect();
        assert_eq!(a, b);
        let c: Vec<_> = gen_kv_recall(8, kv(8)).unwrap().take(20).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn kv_single_item_answers_itself() {
        let inst = gen_kv_recall(1, kv(1)).unwrap().next().unwrap();
        let line = decode_tokens(&inst.items[0]);
        assert_eq!(line, format!("{}{}\n", decode_tokens(&inst.query), inst.gold));
    }

    #[test]
    fn kv_keys_unique_and_gold_in_one_item() {
        for inst in gen_kv_recall(3, KvSpec { n_items: 16, key_len: 1, val_len: 1 }).unwrap().take(10_000) {
            let keys: HashSet<_> = inst.items.iter().map(|it| decode_tokens(it).split(':').next().unwrap().to_string()).collect();
            assert_eq!(keys.len(), 16);
            let q = decode_tokens(&inst.query);
            let hits: Vec<_> = inst.items.iter().map(|it| decode_tokens(it)).filter(|l| l.starts_with(&q)).collect();
            assert_eq!(hits.len(), 1);
            assert!(hits[0].contains(&inst.gold));
        }
    }

    #[test]
    fn kv_rejects_impossible_specs() {
        assert!(gen_kv_recall(0, kv(0)).is_err());
        assert!(gen_kv_recall(0, KvSpec { n_items: 63, key_len: 1, val_len: 1 }).is_err());
    }

    #[test]
    fn needle_covers_first_and_last_line() {
        let (mut first, mut last) = (false, false);
        for inst in gen_needle(5, 8, 1).unwrap().take(200) {
            let lines: Vec<String> = inst.items.iter().map(|t| decode_tokens(t)).collect();
            let at: Vec<usize> = (0..8).filter(|&i| lines[i].contains(&inst.gold)).collect();
            assert_eq!(at.len(), 1, "gold appears in exactly one line");
            first |= at[0] == 0;
            last |= at[0] == 7;
        }
        assert!(first && last);
        let a: Vec<_> = gen_needle(5, 8, 1).unwrap().take(5).collect();
        let b: Vec<_> = gen_needle(5, 8, 1).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert!(gen_needle(5, 2, 3).is_err());
    }

    #[test]
    fn icl_demos_cover_classes_and_follow_rule() {
        for inst in gen_icl(9, 4, 6).unwrap().take(200) {
            let mut seen = HashSet::new();
            for it in &inst.items {
                let line = decode_tokens(it);
                let (input, label) = line.trim_end().split_once('>').unwrap();
                assert_eq!(label, icl_label(icl_class(input, 4)).to_string());
                seen.insert(label.to_string());
            }
            assert_eq!(seen.len(), 4);
            let q = decode_tokens(&inst.query);
            assert_eq!(inst.gold, icl_label(icl_class(q.trim_end_matches('>'), 4)).to_string());
        }
        assert!(gen_icl(0, 1, 4).is_err());
        assert!(gen_icl(0, 4, 3).is_err());
    }

    #[test]
    fn lm_split_sizes() {
        let corpus: Vec<Token> = (0..1536).map(|i| (i % 256) as Token).collect();
        let insts = gen_lm_eval(&corpus, 448, 64).unwrap();
        assert_eq!(insts.len(), 3);
        for (i, inst) in insts.iter().enumerate() {
            assert_eq!(inst.context_len(), 448);
            assert_eq!(inst.query.len(), 64);
            let seg = &corpus[i * 512..(i + 1) * 512];
            assert_eq!([inst.items[0].clone(), inst.query.clone()].concat(), seg);
        }
        assert!(gen_lm_eval(&corpus[..500], 448, 64).is_err());
    }

    #[test]
    fn lm_corpus_blocks() {
        let c = lm_corpus(1, 3, 96, 128, kv(4)).unwrap();
        assert_eq!(c.len(), 384);
        assert_eq!(c, lm_corpus(1, 3, 96, 128, kv(4)).unwrap());
        // Contexts longer than the key space still terminate.
        let spec = KvSpec { n_items: 1, key_len: 1, val_len: 1 };
        assert_eq!(lm_corpus(1, 1, 448, 512, spec).unwrap().len(), 512);
    }

    #[test]
    fn segmenting_with_and_without_sink() {
        let inst = gen_kv_recall(2, kv(8)).unwrap().next().unwrap();
        let s = inst.segment(4, None).unwrap();
        assert_eq!(s.context.parallel_degree(), 4);
        assert!(s.context.pieces.iter().all(|p| p[0] == BOS));
        assert!(s.context.sink_tokens.is_empty());
        let s = inst.segment(4, Some(&encode_text("\n"))).unwrap();
        assert_eq!(s.context.sink_tokens, vec![BOS, b'\n' as Token]);
        assert!(s.context.pieces.iter().all(|p| p[0] != BOS));
        assert_eq!(s.context.context_len(), 2 + inst.context_len());
        let s = inst.segment(32, None).unwrap();
        assert!(s.clamped);
        assert_eq!(s.context.parallel_degree(), 8);
    }

    #[test]
    fn even_chunk_lengths() {
        let t: Vec<Token> = (0..10).collect();
        let lens: Vec<usize> = even_chunks(&t, 4).iter().map(Vec::len).collect();
        assert_eq!(lens, vec![3, 3, 2, 2]);
        assert_eq!(even_chunks(&t, 4).concat(), t);
    }

    #[test]
    fn training_example_weights_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = kv_training_example(&mut rng, kv(4), 3);
        let w = ex.weights.as_ref().unwrap();
        assert_eq!(w.len(), ex.tokens.len() - 1);
        assert_eq!(w.iter().sum::<f32>(), 9.0);
        // Every weighted prediction targets a value byte or a line break.
        for (i, &wi) in w.iter().enumerate() {
            if wi > 0.0 {
                let prev = decode_tokens(&ex.tokens[..=i]);
                let line = prev.rsplit('\n').next().unwrap();
                assert!(line.contains(':'));
            }
        }
    }

    #[test]
    fn subem_examples() {
        assert_eq!(score_subem("The answer is Paris.", "Paris").unwrap(), 1);
        assert_eq!(score_subem("parisian", "Paris").unwrap(), 1);
        assert_eq!(score_subem("London", "Paris").unwrap(), 0);
        assert_eq!(score_subem("  x  ", " X").unwrap(), 1);
        assert!(score_subem("x", "  ").is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(score_accuracy("B\nfoo", "B"), 1);
        assert_eq!(score_accuracy("b", "B"), 1);
        assert_eq!(score_accuracy("", "B"), 0);
        assert_eq!(score_accuracy("BA", "B"), 0);
    }

    #[test]
    fn ppl_bounds() {
        let tokens: Vec<Token> = vec![1, 2, 3, 4];
        let uniform = vec![vec![0.0f32; VOCAB]; 3];
        assert!((score_ppl(&uniform, &tokens).unwrap() - VOCAB as f64).abs() < 1e-9);
        let mut onehot = vec![vec![-1e9f32; VOCAB]; 3];
        for (row, &t) in onehot.iter_mut().zip(&tokens[1..]) {
            row[t as usize] = 0.0;
        }
        assert!((score_ppl(&onehot, &tokens).unwrap() - 1.0).abs() < 1e-12);
        assert!(score_ppl(&uniform, &tokens[..1]).is_err());
    }

    #[test]
    fn ppl_combines_in_log_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut parts = Vec::new();
        let mut all_logits = Vec::new();
        let mut all_nll = 0.0;
        for _ in 0..3 {
            let tokens: Vec<Token> = (0..6).map(|_| rng.random_range(0..VOCAB as Token)).collect();
            let logits: Vec<Vec<f32>> = (0..5).map(|_| (0..VOCAB).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let (nll, n) = query_nll(&logits, &tokens).unwrap();
            all_nll += nll;
            parts.push((nll, n));
            all_logits.push(score_ppl(&logits, &tokens).unwrap());
        }
        let combined = combine_ppl(&parts).unwrap();
        // Geometric mean of equal-length batch perplexities.
        let geo = all_logits.iter().map(|p| p.ln()).sum::<f64>() / 3.0;
        assert!((combined.ln() - geo).abs() < 1e-12);
        assert!((combined - (all_nll / 15.0).exp()).abs() < 1e-9);
    }
}
