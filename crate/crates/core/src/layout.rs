//! Context segmentation, position assignment, block masks and pair counting.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. Byte values occupy 0..256; specials follow.
pub type Token = u32;

/// Sink prefix, `P` context pieces and query tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedContext {
    #[serde(rename = "sink")]
    pub sink_tokens: Vec<Token>,
    pub pieces: Vec<Vec<Token>>,
    #[serde(rename = "query")]
    pub query_tokens: Vec<Token>,
}

/// Which part of the flattened sequence a slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Sink,
    Piece(usize),
    Query,
}

impl Region {
    pub fn piece(self) -> Option<usize> {
        match self {
            Region::Piece(i) => Some(i),
            _ => None,
        }
    }
}

impl SegmentedContext {
    pub fn new(sink: Vec<Token>, pieces: Vec<Vec<Token>>, query: Vec<Token>) -> Result<Self> {
        let ctx = Self { sink_tokens: sink, pieces, query_tokens: query };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::Input("a context needs at least one piece".into()));
        }
        if let Some(i) = self.pieces.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("piece {i} is empty")));
        }
        Ok(())
    }

    pub fn parallel_degree(&self) -> usize {
        self.pieces.len()
    }

    pub fn sink_len(&self) -> usize {
        self.sink_tokens.len()
    }

    pub fn piece_lens(&self) -> Vec<usize> {
        self.pieces.iter().map(Vec::len).collect()
    }

    /// Sink plus all pieces, excluding the query.
    pub fn context_len(&self) -> usize {
        self.sink_len() + self.pieces.iter().map(Vec::len).sum::<usize>()
    }

    pub fn total_len(&self) -> usize {
        self.context_len() + self.query_tokens.len()
    }

    /// Longest piece length, the target length for even position spreading.
    pub fn target_len(&self) -> usize {
        self.pieces.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Slot range of piece `i` in the flattened sequence.
    pub fn piece_range(&self, i: usize) -> Range<usize> {
        let start = self.sink_len() + self.pieces[..i].iter().map(Vec::len).sum::<usize>();
        start..start + self.pieces[i].len()
    }

    pub fn query_range(&self) -> Range<usize> {
        let start = self.context_len();
        start..start + self.query_tokens.len()
    }

    /// Sink, pieces and query concatenated.
    pub fn flatten(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(&self.sink_tokens);
        for p in &self.pieces {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(&self.query_tokens);
        out
    }

    /// Region label of every flattened slot.
    pub fn regions(&self) -> Vec<Region> {
        let mut out = vec![Region::Sink; self.sink_len()];
        for (i, p) in self.pieces.iter().enumerate() {
            out.extend(std::iter::repeat_n(Region::Piece(i), p.len()));
        }
        out.extend(std::iter::repeat_n(Region::Query, self.query_tokens.len()));
        out
    }

    pub fn with_query(mut self, query: Vec<Token>) -> Self {
        self.query_tokens = query;
        self
    }

    /// Reorders pieces: new piece `j` is old piece `order[j]`.
    pub fn permute_pieces(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.pieces.len()];
        if order.len() != self.pieces.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Input("piece order is not a permutation".into()));
        }
        Ok(Self {
            sink_tokens: self.sink_tokens.clone(),
            pieces: order.iter().map(|&i| self.pieces[i].clone()).collect(),
            query_tokens: self.query_tokens.clone(),
        })
    }
}

/// How items are assigned to pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    RoundRobin,
    #[default]
    Contiguous,
}

/// Result of splitting items into pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub context: SegmentedContext,
    /// Item indices in each piece, in order.
    pub assignment: Vec<Vec<usize>>,
    pub requested_degree: usize,
    /// Set when there were fewer items than requested pieces.
    pub clamped: bool,
}

/// Partitions `items` into `degree` pieces. Contiguous grouping places each
/// item by the midpoint of its token span so piece token counts stay balanced.
pub fn split_context(items: &[Vec<Token>], degree: usize, grouping: Grouping) -> Result<Split> {
    if items.is_empty() {
        return Err(Error::Input("cannot split an empty item list".into()));
    }
    if degree == 0 {
        return Err(Error::Input("parallel degree must be at least 1".into()));
    }
    let n = items.len();
    let p = degree.min(n);
    let piece_of: Vec<usize> = match grouping {
        Grouping::RoundRobin => (0..n).map(|i| i % p).collect(),
        Grouping::Contiguous => {
            let total: usize = items.iter().map(Vec::len).sum();
            let mut out = Vec::with_capacity(n);
            let mut cum = 0usize;
            for (i, item) in items.iter().enumerate() {
                let ideal = if total == 0 {
                    i * p / n
                } else {
                    // Midpoint in half-token units avoids fractions.
                    ((2 * cum + item.len()) * p) / (2 * total)
                };
                let (lo, hi) = match out.last() {
                    None => (0, 0),
                    Some(&prev) => ((p + i).saturating_sub(n).max(prev), prev + 1),
                };
                out.push(ideal.clamp(lo, hi.min(p - 1)));
                cum += item.len();
            }
            out
        }
    };
    let mut assignment = vec![Vec::new(); p];
    for (i, &piece) in piece_of.iter().enumerate() {
        assignment[piece].push(i);
    }
    let pieces: Vec<Vec<Token>> = assignment
        .iter()
        .map(|idx| idx.iter().flat_map(|&i| items[i].iter().copied()).collect())
        .collect();
    if pieces.iter().any(Vec::is_empty) {
        return Err(Error::Input("split produced an empty piece (empty items?)".into()));
    }
    Ok(Split {
        context: SegmentedContext { sink_tokens: Vec::new(), pieces, query_tokens: Vec::new() },
        assignment,
        requested_degree: degree,
        clamped: p < degree,
    })
}

/// Position assignment scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Integer positions over the flattened sequence.
    Full,
    /// Every piece spread over the same interval `[S, S+T-1]`.
    #[default]
    ParallelEven,
    /// Pieces counted end to end with integers; masks stay block-parallel.
    Serialized,
}

/// Real-valued position per flattened slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMap {
    pub positions: Vec<f32>,
    pub mode: PositionMode,
    pub target_len: f32,
}

impl PositionMap {
    /// Position of the query token that would follow the last slot.
    pub fn next_position(&self) -> f32 {
        self.positions.last().map_or(0.0, |p| p.floor() + 1.0)
    }

    pub fn max_position(&self) -> f32 {
        self.positions.iter().copied().fold(0.0, f32::max)
    }
}

pub fn assign_positions(ctx: &SegmentedContext, mode: PositionMode) -> Result<PositionMap> {
    ctx.validate()?;
    let s = ctx.sink_len();
    let t = ctx.target_len();
    let mut positions = Vec::with_capacity(ctx.total_len());
    match mode {
        PositionMode::Full | PositionMode::Serialized => {
            positions.extend((0..ctx.total_len()).map(|i| i as f32));
        }
        PositionMode::ParallelEven => {
            positions.extend((0..s).map(|i| i as f32));
            for piece in &ctx.pieces {
                let l = piece.len();
                for j in 0..l {
                    let offset = if l == 1 { 0.0 } else { j as f64 * (t - 1) as f64 / (l - 1) as f64 };
                    positions.push((s as f64 + offset) as f32);
                }
            }
            positions.extend((0..ctx.query_tokens.len()).map(|i| (s + t + i) as f32));
        }
    }
    Ok(PositionMap { positions, mode, target_len: t as f32 })
}

/// Allowed key ranges for every row of the flattened sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMaskSpec {
    pub rows: Vec<Vec<Range<usize>>>,
    pub labels: Vec<Region>,
}

impl AttentionMaskSpec {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn allows(&self, row: usize, key: usize) -> bool {
        self.rows[row].iter().any(|r| r.contains(&key))
    }

    pub fn allowed_count(&self, row: usize) -> usize {
        self.rows[row].iter().map(|r| r.len()).sum()
    }

    /// Dense boolean form, mostly for tests and layout dumps.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.len()).map(|r| (0..self.len()).map(|k| self.allows(r, k)).collect()).collect()
    }

    /// Plain lower-triangular causal mask over `n` slots.
    pub fn causal(n: usize) -> Self {
        Self { rows: (0..n).map(|r| vec![0..r + 1]).collect(), labels: vec![Region::Piece(0); n] }
    }
}

/// Block-parallel causal mask: sink rows are causal, piece rows see the sink
/// and their own piece up to themselves, query rows see everything before them.
pub fn build_mask(ctx: &SegmentedContext) -> AttentionMaskSpec {
    let s = ctx.sink_len();
    let mut rows = Vec::with_capacity(ctx.total_len());
    for r in 0..s {
        rows.push(vec![0..r + 1]);
    }
    for i in 0..ctx.pieces.len() {
        let range = ctx.piece_range(i);
        for r in range.clone() {
            let mut allowed = Vec::with_capacity(2);
            if s > 0 {
                allowed.push(0..s);
            }
            allowed.push(range.start..r + 1);
            rows.push(allowed);
        }
    }
    for r in ctx.query_range() {
        rows.push(vec![0..r + 1]);
    }
    AttentionMaskSpec { rows, labels: ctx.regions() }
}

/// Allowed (row, key) pairs, split by whether the row is a context or query row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub context: u64,
    pub query: u64,
}

pub fn pair_count(mask: &AttentionMaskSpec) -> PairCount {
    let mut out = PairCount { context: 0, query: 0 };
    for (r, label) in mask.labels.iter().enumerate() {
        let n = mask.allowed_count(r) as u64;
        match label {
            Region::Query => out.query += n,
            _ => out.context += n,
        }
    }
    out
}

/// `N(N+P)/(2P)`, the pair count of an even split into `P` pieces.
pub fn theoretical_pair_count(n: u64, p: u64) -> Result<u64> {
    if p == 0 {
        return Err(Error::Input("parallel degree must be at least 1".into()));
    }
    if n % p != 0 {
        return Err(Error::Input(format!("{n} tokens do not split evenly into {p} pieces")));
    }
    Ok(n * (n + p) / (2 * p))
}

/// Sets the shared sink prefix. `budget` caps the whole context length.
pub fn prepend_sink(ctx: &SegmentedContext, prefix: &[Token], budget: Option<usize>) -> Result<SegmentedContext> {
    if prefix.is_empty() {
        return Err(Error::Input("sink prefix must not be empty".into()));
    }
    if let Some(budget) = budget {
        if prefix.len() > budget {
            return Err(Error::Input(format!(
                "sink prefix of {} tokens exceeds the context budget of {budget}",
                prefix.len()
            )));
        }
    }
    let mut out = ctx.clone();
    out.sink_tokens = prefix.to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(lens: &[usize]) -> Vec<Vec<Token>> {
        lens.iter().enumerate().map(|(i, &l)| vec![i as Token; l]).collect()
    }

    fn ctx(sink: usize, lens: &[usize], query: usize) -> SegmentedContext {
        SegmentedContext::new(vec![500; sink], items(lens), vec![600; query]).unwrap()
    }

    /// Brute-force causal block mask from the row/key region definitions.
    fn enumerate_mask(c: &SegmentedContext) -> Vec<Vec<bool>> {
        let labels = c.regions();
        let n = labels.len();
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|k| {
                        k <= r
                            && match (labels[r], labels[k]) {
                                (Region::Sink, Region::Sink) => true,
                                (Region::Piece(_), Region::Sink) => true,
                                (Region::Piece(a), Region::Piece(b)) => a == b,
                                (Region::Query, _) => true,
                                _ => false,
                            }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn split_single_piece() {
        let s = split_context(&items(&[2; 8]), 1, Grouping::Contiguous).unwrap();
        assert_eq!(s.assignment, vec![(0..8).collect::<Vec<_>>()]);
        assert!(!s.clamped);
    }

    #[test]
    fn split_contiguous_pairs() {
        let s = split_context(&items(&[3; 8]), 4, Grouping::Contiguous).unwrap();
        assert_eq!(s.assignment, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
    }

    #[test]
    fn split_clamps_degree() {
        let s = split_context(&items(&[1; 3]), 8, Grouping::Contiguous).unwrap();
        assert_eq!(s.context.parallel_degree(), 3);
        assert!(s.clamped);
        assert_eq!(s.assignment, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn split_round_robin() {
        let s = split_context(&items(&[1; 5]), 2, Grouping::RoundRobin).unwrap();
        assert_eq!(s.assignment, vec![vec![0, 2, 4], vec![1, 3]]);
    }

    #[test]
    fn split_empty_items() {
        assert!(matches!(split_context(&[], 2, Grouping::Contiguous), Err(Error::Input(_))));
    }

    #[test]
    fn split_balances_uneven_items() {
        let s = split_context(&items(&[10, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]), 2, Grouping::Contiguous).unwrap();
        assert_eq!(s.assignment[0], vec![0]);
        assert_eq!(s.context.piece_lens(), vec![10, 10]);
    }

    #[test]
    fn even_positions_equal_lengths() {
        let pm = assign_positions(&ctx(0, &[5, 5], 2), PositionMode::ParallelEven).unwrap();
        assert_eq!(pm.positions, vec![0., 1., 2., 3., 4., 0., 1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn even_positions_spread_short_piece() {
        let pm = assign_positions(&ctx(0, &[3, 5], 1), PositionMode::ParallelEven).unwrap();
        assert_eq!(pm.positions, vec![0., 2., 4., 0., 1., 2., 3., 4., 5.]);
        assert_eq!(pm.target_len, 5.0);
    }

    #[test]
    fn even_positions_singleton_piece_sits_at_sink_len() {
        let pm = assign_positions(&ctx(2, &[1, 3], 1), PositionMode::ParallelEven).unwrap();
        assert_eq!(pm.positions, vec![0., 1., 2., 2., 3., 4., 5.]);
    }

    #[test]
    fn serialized_positions() {
        let pm = assign_positions(&ctx(2, &[3, 5], 1), PositionMode::Serialized).unwrap();
        assert_eq!(pm.positions, (0..11).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(pm.positions[10], 10.0);
    }

    #[test]
    fn single_piece_mask_is_causal() {
        let c = ctx(0, &[6], 0);
        assert_eq!(build_mask(&c).rows, AttentionMaskSpec::causal(6).rows);
    }

    #[test]
    fn mask_matches_enumeration() {
        let c = ctx(1, &[2, 2], 1);
        let m = build_mask(&c);
        assert_eq!(m.to_dense(), enumerate_mask(&c));
        // Piece-2 rows never see piece 1.
        for r in c.piece_range(1) {
            for k in c.piece_range(0) {
                assert!(!m.allows(r, k));
            }
            assert!(m.allows(r, 0));
        }
        assert_eq!(m.allowed_count(4), 3);
        assert_eq!(m.allowed_count(5), 6);
    }

    #[test]
    fn pair_count_examples() {
        assert_eq!(pair_count(&build_mask(&ctx(0, &[12], 0))).context, 78);
        assert_eq!(pair_count(&build_mask(&ctx(0, &[4, 4, 4], 0))).context, 30);
        assert_eq!(pair_count(&build_mask(&ctx(0, &[1; 9], 0))).context, 9);
        let c = ctx(0, &[4, 4], 3);
        let pc = pair_count(&build_mask(&c));
        assert_eq!(pc.query, 9 + 10 + 11);
    }

    #[test]
    fn theoretical_counts() {
        assert_eq!(theoretical_pair_count(12, 3).unwrap(), 30);
        assert_eq!(theoretical_pair_count(16, 4).unwrap(), 40);
        assert_eq!(theoretical_pair_count(10, 1).unwrap(), 55);
        assert!(theoretical_pair_count(10, 3).is_err());
        assert_eq!(pair_count(&build_mask(&ctx(0, &[4; 4], 0))).context, 40);
    }

    #[test]
    fn sink_prefix() {
        let base = ctx(0, &[2, 2], 1);
        let with = prepend_sink(&base, &[10, 10], Some(16)).unwrap();
        assert_eq!(with.sink_len(), 2);
        let m = build_mask(&with);
        for r in 2..m.len() {
            assert!(m.allows(r, 0) && m.allows(r, 1));
        }
        assert!(prepend_sink(&base, &[], None).is_err());
        assert!(prepend_sink(&base, &[1; 20], Some(16)).is_err());
    }

    #[test]
    fn context_json_shape() {
        let v = serde_json::to_value(ctx(1, &[2], 1)).unwrap();
        assert_eq!(v, serde_json::json!({"sink": [500], "pieces": [[0, 0]], "query": [600]}));
    }

    fn arb_ctx() -> impl Strategy<Value = SegmentedContext> {
        (0usize..4, proptest::collection::vec(1usize..7, 1..6), 0usize..4)
            .prop_map(|(s, lens, q)| ctx(s, &lens, q))
    }

    proptest! {
        #[test]
        fn mask_is_causal_and_matches_definition(c in arb_ctx()) {
            let m = build_mask(&c);
            for (r, ranges) in m.rows.iter().enumerate() {
                prop_assert!(ranges.iter().all(|rg| rg.end <= r + 1));
            }
            prop_assert_eq!(m.to_dense(), enumerate_mask(&c));
        }

        #[test]
        fn even_split_pair_law(p in 1usize..9, l in 1usize..9) {
            let c = ctx(0, &vec![l; p], 0);
            let n = (p * l) as u64;
            prop_assert_eq!(pair_count(&build_mask(&c)).context, theoretical_pair_count(n, p as u64).unwrap());
        }

        #[test]
        fn even_positions_share_endpoints(c in arb_ctx()) {
            let pm = assign_positions(&c, PositionMode::ParallelEven).unwrap();
            let s = c.sink_len() as f32;
            let t = c.target_len() as f32;
            for i in 0..c.parallel_degree() {
                let r = c.piece_range(i);
                prop_assert_eq!(pm.positions[r.start], s);
                if r.len() >= 2 {
                    prop_assert_eq!(pm.positions[r.end - 1], s + t - 1.0);
                }
                prop_assert!(pm.positions[r].windows(2).all(|w| w[0] < w[1]));
            }
            let ctx_max = pm.positions[..c.context_len()].iter().copied().fold(f32::MIN, f32::max);
            prop_assert!(pm.positions[c.query_range()].iter().all(|&q| q > ctx_max));
        }

        #[test]
        fn permuting_pieces_keeps_row_cardinalities(c in arb_ctx(), seed in 0u64..1000) {
            let p = c.parallel_degree();
            let mut order: Vec<usize> = (0..p).collect();
            order.rotate_left((seed as usize) % p);
            let permuted = c.permute_pieces(&order).unwrap();
            let (a, b) = (build_mask(&c), build_mask(&permuted));
            let mut ca: Vec<usize> = (0..a.len()).map(|r| a.allowed_count(r)).collect();
            let mut cb: Vec<usize> = (0..b.len()).map(|r| b.allowed_count(r)).collect();
            ca.sort_unstable();
            cb.sort_unstable();
            prop_assert_eq!(ca, cb);
        }
    }
}
