//! Training forward pass and exact analytic gradients (full causal attention).

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamKind, Transformer};
use crate::layout::Token;

/// Floating-point type usable for training.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    /// `c = alpha·a·b + beta·c` over strided `a[m×k]`, `b[k×n]`, `c[m×n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), beta: Self, c: &mut [Self], sc: (isize, isize));
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), beta: Self, c: &mut [Self], sc: (isize, isize)) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, s: (isize, isize)| (rows - 1) as isize * s.0 + (cols - 1) as isize * s.1 + 1;
                if k > 0 {
                    assert!(a.len() as isize >= span(m, k, sa) && b.len() as isize >= span(k, n, sb));
                }
                assert!(c.len() as isize >= span(m, n, sc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), sc.0, sc.1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[inline]
fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// One training sequence. `weights[i]` scales the loss of predicting
/// `tokens[i + 1]`; `None` weights every prediction equally.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub weights: Option<Vec<f32>>,
}

impl Example {
    pub fn unweighted(tokens: Vec<Token>) -> Self {
        Self { tokens, weights: None }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i] as f64)
    }

    fn total_weight(&self) -> f64 {
        (0..self.tokens.len().saturating_sub(1)).map(|i| self.weight(i)).sum()
    }
}

// --- dense kernels over row-major slices ---------------------------------

/// `out = a[n×k] · b[k×m]`.
fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    T::gemm(n, k, m, a, (k as isize, 1), b, (m as isize, 1), T::zero(), out, (m as isize, 1));
}

/// `out += aᵀ · b` with `a[n×k]`, `b[n×m]`, `out[k×m]`.
fn mm_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    T::gemm(k, n, m, a, (1, k as isize), b, (m as isize, 1), T::one(), out, (m as isize, 1));
}

/// `out (+)= a[n×m] · bᵀ` with `b[k×m]`, `out[n×k]`.
fn mm_a_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(n, m, k, a, (m as isize, 1), b, (1, m as isize), beta, out, (k as isize, 1));
}

fn rms_forward<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T], inv: &mut [T], d: usize) {
    let dn = c::<T>(d as f64);
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mut ss = T::zero();
        for &v in row {
            ss += v * v;
        }
        let r = T::one() / (ss / dn + eps).sqrt();
        inv[i] = r;
        for ((o, &v), &g) in out[i * d..(i + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
    }
}

/// Accumulates the RMS-norm input gradient into `dx` and gain gradient into `dgain`.
fn rms_backward<T: Scalar>(x: &[T], inv: &[T], gain: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T], d: usize) {
    let dn = c::<T>(d as f64);
    for i in 0..inv.len() {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let r = inv[i];
        let mut dot = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            dot += gain[j] * dyr[j] * xr[j];
        }
        let coef = r * r * r * dot / dn;
        for j in 0..d {
            dx[i * d + j] += r * gain[j] * dyr[j] - coef * xr[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let half = c::<T>(0.5);
    let t = (c::<T>(GELU_C) * (u + c::<T>(0.044715) * u * u * u)).tanh();
    half * u * (T::one() + t)
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = c::<T>(0.5);
    let inner = c::<T>(GELU_C) * (u + c::<T>(0.044715) * u * u * u);
    let t = inner.tanh();
    let dinner = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * 0.044715) * u * u);
    half * (T::one() + t) + half * u * (T::one() - t * t) * dinner
}

/// `cos`/`sin` tables for integer positions `0..n`, `[n][head_dim/2]`.
pub(crate) fn rope_table<T: Scalar>(n: usize, head_dim: usize, base: f32) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(n * half);
    let mut sin = Vec::with_capacity(n * half);
    for pos in 0..n {
        for i in 0..half {
            let theta = pos as f64 * (base as f64).powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(c(theta.cos()));
            sin.push(c(theta.sin()));
        }
    }
    (cos, sin)
}

/// Rotates every head of every row; `sign = -1` applies the inverse rotation.
fn rope_rows<T: Scalar>(x: &mut [T], cos: &[T], sin: &[T], d: usize, hd: usize, inverse: bool) {
    let half = hd / 2;
    for (pos, row) in x.chunks_exact_mut(d).enumerate() {
        for head in row.chunks_exact_mut(hd) {
            for i in 0..half {
                let (cs, mut sn) = (cos[pos * half + i], sin[pos * half + i]);
                if inverse {
                    sn = -sn;
                }
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cs - b * sn;
                head[2 * i + 1] = a * sn + b * cs;
            }
        }
    }
}

struct LayerActs<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[heads][n][n]`, zero above the diagonal.
    probs: Vec<T>,
    o: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

struct SeqActs<T> {
    layers: Vec<LayerActs<T>>,
    x_out: Vec<T>,
    inv_f: Vec<T>,
    f: Vec<T>,
}

struct Dims {
    n: usize,
    d: usize,
    h: usize,
    hd: usize,
    m: usize,
    v: usize,
}

fn dims<T: Copy>(model: &Transformer<T>, n: usize) -> Dims {
    let cfg = model.config();
    Dims { n, d: cfg.model_dim, h: cfg.heads, hd: cfg.head_dim(), m: cfg.mlp_dim, v: cfg.vocab }
}

fn forward_seq<T: Scalar>(model: &Transformer<T>, tokens: &[Token], rope: &(Vec<T>, Vec<T>)) -> SeqActs<T> {
    let cfg = model.config();
    let Dims { n, d, h, hd, m, .. } = dims(model, tokens.len());
    let eps = c::<T>(cfg.norm_eps as f64);
    let scale = T::one() / c::<T>(hd as f64).sqrt();
    let emb = model.tensor(ParamKind::TokenEmbedding);
    let mut x = vec![T::zero(); n * d];
    for (i, &t) in tokens.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let x_in = x.clone();
        let mut inv1 = vec![T::zero(); n];
        let mut a = vec![T::zero(); n * d];
        rms_forward(&x_in, model.tensor(ParamKind::AttnNorm(l)), eps, &mut a, &mut inv1, d);
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        mm(&a, model.tensor(ParamKind::Query(l)), &mut q, n, d, d);
        mm(&a, model.tensor(ParamKind::Key(l)), &mut k, n, d, d);
        mm(&a, model.tensor(ParamKind::Value(l)), &mut v, n, d, d);
        rope_rows(&mut q, &rope.0, &rope.1, d, hd, false);
        rope_rows(&mut k, &rope.0, &rope.1, d, hd, false);
        let mut probs = vec![T::zero(); h * n * n];
        let mut o = vec![T::zero(); n * d];
        let ds = d as isize;
        for head in 0..h {
            let off = head * hd;
            let p = &mut probs[head * n * n..(head + 1) * n * n];
            // Scores Q_h · K_hᵀ, then a causal row softmax.
            T::gemm(n, hd, n, &q[off..], (ds, 1), &k[off..], (1, ds), T::zero(), p, (n as isize, 1));
            for (i, prow) in p.chunks_exact_mut(n).enumerate() {
                let mut max = T::neg_infinity();
                for pj in prow[..=i].iter_mut() {
                    *pj *= scale;
                    if *pj > max {
                        max = *pj;
                    }
                }
                let mut sum = T::zero();
                for pj in prow[..=i].iter_mut() {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                for pj in prow[..=i].iter_mut() {
                    *pj = *pj / sum;
                }
                prow[i + 1..].fill(T::zero());
            }
            T::gemm(n, n, hd, p, (n as isize, 1), &v[off..], (ds, 1), T::zero(), &mut o[off..], (ds, 1));
        }
        let mut y = vec![T::zero(); n * d];
        mm(&o, model.tensor(ParamKind::AttnOut(l)), &mut y, n, d, d);
        for (xx, yy) in x.iter_mut().zip(&y) {
            *xx += *yy;
        }
        let x_mid = x.clone();
        let mut inv2 = vec![T::zero(); n];
        let mut b = vec![T::zero(); n * d];
        rms_forward(&x_mid, model.tensor(ParamKind::MlpNorm(l)), eps, &mut b, &mut inv2, d);
        let mut u = vec![T::zero(); n * m];
        mm(&b, model.tensor(ParamKind::MlpIn(l)), &mut u, n, d, m);
        let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        let mut z = vec![T::zero(); n * d];
        mm(&g, model.tensor(ParamKind::MlpOut(l)), &mut z, n, m, d);
        for (xx, zz) in x.iter_mut().zip(&z) {
            *xx += *zz;
        }
        layers.push(LayerActs { x_in, inv1, a, q, k, v, probs, o, x_mid, inv2, b, u, g });
    }
    let mut inv_f = vec![T::zero(); n];
    let mut f = vec![T::zero(); n * d];
    rms_forward(&x, model.tensor(ParamKind::FinalNorm), eps, &mut f, &mut inv_f, d);
    SeqActs { layers, x_out: x, inv_f, f }
}

/// Logits `[n × vocab]` of a full-attention forward pass over integer positions.
pub fn forward_logits<T: Scalar>(model: &Transformer<T>, tokens: &[Token]) -> Vec<T> {
    let dm = dims(model, tokens.len());
    let rope = rope_table::<T>(dm.n, dm.hd, model.config().rope_base);
    let acts = forward_seq(model, tokens, &rope);
    let mut logits = vec![T::zero(); dm.n * dm.v];
    mm(&acts.f, model.tensor(ParamKind::Unembedding), &mut logits, dm.n, dm.d, dm.v);
    logits
}

/// Cross-entropy of `target` under `logits`, and optionally the softmax.
fn cross_entropy<T: Scalar>(logits: &[T], target: usize, probs_out: Option<&mut [T]>) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &z in logits {
        sum += (z - max).exp();
    }
    let lse = max + sum.ln();
    if let Some(p) = probs_out {
        for (pp, &z) in p.iter_mut().zip(logits) {
            *pp = (z - lse).exp();
        }
    }
    lse - logits[target]
}

fn check_example<T: Copy>(model: &Transformer<T>, ex: &Example) {
    assert!(ex.tokens.len() >= 2, "training sequences need at least two tokens");
    assert!(ex.tokens.len() <= model.config().max_seq_len, "sequence longer than max_seq_len");
    if let Some(w) = &ex.weights {
        assert_eq!(w.len(), ex.tokens.len() - 1, "one weight per predicted position");
    }
}

/// Weighted mean next-token cross-entropy (nats) over the batch.
pub fn loss_forward<T: Scalar>(model: &Transformer<T>, batch: &[Example]) -> f64 {
    let total_w: f64 = batch.iter().map(Example::total_weight).sum();
    if total_w == 0.0 {
        return 0.0;
    }
    let mut loss = 0.0f64;
    for ex in batch {
        check_example(model, ex);
        let dm = dims(model, ex.tokens.len());
        let rope = rope_table::<T>(dm.n, dm.hd, model.config().rope_base);
        let acts = forward_seq(model, &ex.tokens, &rope);
        let unemb = model.tensor(ParamKind::Unembedding);
        let mut logits = vec![T::zero(); dm.v];
        for i in 0..dm.n - 1 {
            let w = ex.weight(i);
            if w == 0.0 {
                continue;
            }
            mm(&acts.f[i * dm.d..(i + 1) * dm.d], unemb, &mut logits, 1, dm.d, dm.v);
            let ce = cross_entropy(&logits, ex.tokens[i + 1] as usize, None);
            loss += w * ce.to_f64().unwrap_or(f64::NAN);
        }
    }
    loss / total_w
}

/// Loss and gradient of [`loss_forward`] with respect to every parameter.
pub fn backprop<T: Scalar>(model: &Transformer<T>, batch: &[Example]) -> (f64, Vec<T>) {
    let mut grads = vec![T::zero(); model.param_count()];
    let total_w: f64 = batch.iter().map(Example::total_weight).sum();
    if total_w == 0.0 {
        return (0.0, grads);
    }
    let layout = model.layout().clone();
    let cfg = *model.config();
    let mut loss = 0.0f64;
    for ex in batch {
        check_example(model, ex);
        let Dims { n, d, h, hd, m, v } = dims(model, ex.tokens.len());
        let rope = rope_table::<T>(n, hd, cfg.rope_base);
        let acts = forward_seq(model, &ex.tokens, &rope);
        let scale = T::one() / c::<T>(hd as f64).sqrt();

        // Output head.
        let unemb = model.tensor(ParamKind::Unembedding);
        let mut df = vec![T::zero(); n * d];
        {
            let rows: Vec<usize> = (0..n - 1).filter(|&i| ex.weight(i) != 0.0).collect();
            let r = rows.len();
            let mut fw = vec![T::zero(); r * d];
            for (ri, &i) in rows.iter().enumerate() {
                fw[ri * d..(ri + 1) * d].copy_from_slice(&acts.f[i * d..(i + 1) * d]);
            }
            let mut logits = vec![T::zero(); r * v];
            mm(&fw, unemb, &mut logits, r, d, v);
            let mut probs = vec![T::zero(); r * v];
            for (ri, &i) in rows.iter().enumerate() {
                let w = ex.weight(i);
                let target = ex.tokens[i + 1] as usize;
                let prow = &mut probs[ri * v..(ri + 1) * v];
                let ce = cross_entropy(&logits[ri * v..(ri + 1) * v], target, Some(prow));
                loss += w * ce.to_f64().unwrap_or(f64::NAN);
                let coef = c::<T>(w / total_w);
                prow[target] -= T::one();
                prow.iter_mut().for_each(|p| *p *= coef);
            }
            mm_at_b_acc(&fw, &probs, &mut grads[layout.entry(ParamKind::Unembedding).range()], r, d, v);
            let mut dfw = vec![T::zero(); r * d];
            mm_a_bt(&probs, unemb, &mut dfw, r, v, d, false);
            for (ri, &i) in rows.iter().enumerate() {
                df[i * d..(i + 1) * d].copy_from_slice(&dfw[ri * d..(ri + 1) * d]);
            }
        }
        let mut dx = vec![T::zero(); n * d];
        rms_backward(
            &acts.x_out,
            &acts.inv_f,
            model.tensor(ParamKind::FinalNorm),
            &df,
            &mut dx,
            &mut grads[layout.entry(ParamKind::FinalNorm).range()],
            d,
        );

        for l in (0..cfg.layers).rev() {
            let la = &acts.layers[l];
            // MLP block.
            let mut dg = vec![T::zero(); n * m];
            mm_at_b_acc(&la.g, &dx, &mut grads[layout.entry(ParamKind::MlpOut(l)).range()], n, m, d);
            mm_a_bt(&dx, model.tensor(ParamKind::MlpOut(l)), &mut dg, n, d, m, false);
            for (gg, &uu) in dg.iter_mut().zip(&la.u) {
                *gg *= gelu_grad(uu);
            }
            mm_at_b_acc(&la.b, &dg, &mut grads[layout.entry(ParamKind::MlpIn(l)).range()], n, d, m);
            let mut db = vec![T::zero(); n * d];
            mm_a_bt(&dg, model.tensor(ParamKind::MlpIn(l)), &mut db, n, m, d, false);
            let mut dx_mid = dx.clone();
            rms_backward(
                &la.x_mid,
                &la.inv2,
                model.tensor(ParamKind::MlpNorm(l)),
                &db,
                &mut dx_mid,
                &mut grads[layout.entry(ParamKind::MlpNorm(l)).range()],
                d,
            );

            // Attention block.
            mm_at_b_acc(&la.o, &dx_mid, &mut grads[layout.entry(ParamKind::AttnOut(l)).range()], n, d, d);
            let mut d_o = vec![T::zero(); n * d];
            mm_a_bt(&dx_mid, model.tensor(ParamKind::AttnOut(l)), &mut d_o, n, d, d, false);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let ds = d as isize;
            let mut dp = vec![T::zero(); n * n];
            for head in 0..h {
                let off = head * hd;
                let p = &la.probs[head * n * n..(head + 1) * n * n];
                // dP = dO_h · V_hᵀ and dV_h = Pᵀ · dO_h.
                T::gemm(n, hd, n, &d_o[off..], (ds, 1), &la.v[off..], (1, ds), T::zero(), &mut dp, (n as isize, 1));
                T::gemm(n, n, hd, p, (1, n as isize), &d_o[off..], (ds, 1), T::zero(), &mut dv[off..], (ds, 1));
                // Softmax backward turns dP into score gradients in place.
                for (i, (dprow, prow)) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)).enumerate() {
                    let mut row_dot = T::zero();
                    for j in 0..=i {
                        row_dot += prow[j] * dprow[j];
                    }
                    for j in 0..=i {
                        dprow[j] = prow[j] * (dprow[j] - row_dot) * scale;
                    }
                    dprow[i + 1..].fill(T::zero());
                }
                T::gemm(n, n, hd, &dp, (n as isize, 1), &la.k[off..], (ds, 1), T::zero(), &mut dq[off..], (ds, 1));
                T::gemm(n, n, hd, &dp, (1, n as isize), &la.q[off..], (ds, 1), T::zero(), &mut dk[off..], (ds, 1));
            }
            rope_rows(&mut dq, &rope.0, &rope.1, d, hd, true);
            rope_rows(&mut dk, &rope.0, &rope.1, d, hd, true);
            mm_at_b_acc(&la.a, &dq, &mut grads[layout.entry(ParamKind::Query(l)).range()], n, d, d);
            mm_at_b_acc(&la.a, &dk, &mut grads[layout.entry(ParamKind::Key(l)).range()], n, d, d);
            mm_at_b_acc(&la.a, &dv, &mut grads[layout.entry(ParamKind::Value(l)).range()], n, d, d);
            let mut da = vec![T::zero(); n * d];
            mm_a_bt(&dq, model.tensor(ParamKind::Query(l)), &mut da, n, d, d, false);
            mm_a_bt(&dk, model.tensor(ParamKind::Key(l)), &mut da, n, d, d, true);
            mm_a_bt(&dv, model.tensor(ParamKind::Value(l)), &mut da, n, d, d, true);
            dx = dx_mid.clone();
            rms_backward(
                &la.x_in,
                &la.inv1,
                model.tensor(ParamKind::AttnNorm(l)),
                &da,
                &mut dx,
                &mut grads[layout.entry(ParamKind::AttnNorm(l)).range()],
                d,
            );
        }

        let demb = &mut grads[layout.entry(ParamKind::TokenEmbedding).range()];
        for (i, &t) in ex.tokens.iter().enumerate() {
            for (g, &x) in demb[t as usize * d..(t as usize + 1) * d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *g += x;
            }
        }
    }
    (loss / total_w, grads)
}

/// Which coordinates a gradient check samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSubset {
    All,
    /// Only the output projection, where the loss is linear-then-softmax.
    Unembedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Relative error floor so that near-zero gradients do not blow up the ratio.
const REL_FLOOR: f64 = 1e-7;

/// Central finite differences over a seeded random sample of coordinates,
/// compared with [`backprop`].
pub fn grad_check(
    model: &Transformer<f64>,
    batch: &[Example],
    h: f64,
    samples: usize,
    subset: ParamSubset,
    seed: u64,
) -> GradCheck {
    let (_, grads) = backprop(model, batch);
    let range = match subset {
        ParamSubset::All => 0..model.param_count(),
        ParamSubset::Unembedding => model.layout().entry(ParamKind::Unembedding).range(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let idx = rng.random_range(range.clone());
        let orig = probe.params()[idx];
        probe.params_mut()[idx] = orig + h;
        let up = loss_forward(&probe, batch);
        probe.params_mut()[idx] = orig - h;
        let down = loss_forward(&probe, batch);
        probe.params_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[idx];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    GradCheck { max_rel_error: max_rel, coordinates: samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn random_batch(seed: u64, n: usize, len: usize, vocab: u32) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Example::unweighted((0..len).map(|_| rng.random_range(0..vocab)).collect())).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = Model::init(ModelConfig::small()).unwrap().to_f64();
        let batch = random_batch(1, 2, 7, 258);
        let gc = grad_check(&model, &batch, 1e-3, 250, ParamSubset::All, 9);
        assert!(gc.max_rel_error < 1e-3, "{gc:?}");
    }

    #[test]
    fn multi_head_gradient_matches() {
        let cfg = ModelConfig { layers: 2, heads: 2, model_dim: 16, mlp_dim: 32, ..ModelConfig::small() };
        let mut model = Model::init(cfg).unwrap().to_f64();
        // Larger weights so attention patterns are far from uniform.
        model.params_mut().iter_mut().for_each(|w| {
            if *w != 1.0 {
                *w *= 20.0
            }
        });
        let batch = random_batch(3, 2, 9, 258);
        let gc = grad_check(&model, &batch, 1e-4, 400, ParamSubset::All, 5);
        assert!(gc.max_rel_error < 1e-3, "{gc:?}");
    }

    #[test]
    fn unembedding_gradient_is_tight() {
        let model = Model::init(ModelConfig::small()).unwrap().to_f64();
        let batch = random_batch(2, 2, 6, 258);
        let gc = grad_check(&model, &batch, 1e-3, 200, ParamSubset::Unembedding, 4);
        assert!(gc.max_rel_error < 1e-5, "{gc:?}");
    }

    #[test]
    fn large_step_fails_check() {
        let model = Model::init(ModelConfig::small()).unwrap().to_f64();
        let batch = random_batch(1, 2, 7, 258);
        let gc = grad_check(&model, &batch, 1e-1, 250, ParamSubset::All, 9);
        assert!(gc.max_rel_error > 1e-3, "{gc:?}");
    }

    #[test]
    fn zero_weight_batch_has_zero_gradient() {
        let model = Model::init(ModelConfig::small()).unwrap();
        let mut batch = random_batch(3, 2, 5, 258);
        batch.iter_mut().for_each(|e| e.weights = Some(vec![0.0; 4]));
        let (loss, g) = backprop(&model, &batch);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let model = Model::init(ModelConfig::small()).unwrap().to_f64();
        let batch = random_batch(4, 1, 6, 258);
        let doubled = [batch.clone(), batch.clone()].concat();
        let (l1, g1) = backprop(&model, &batch);
        let (l2, g2) = backprop(&model, &doubled);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)));
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let model = Model::init(ModelConfig { seed: 3, ..ModelConfig::reference() }).unwrap();
        let batch = random_batch(5, 2, 32, 256);
        let loss = loss_forward(&model, &batch);
        let uniform = (258f64).ln();
        assert!((loss - uniform).abs() < 0.1 * uniform, "{loss} vs {uniform}");
        assert_eq!(loss, loss_forward(&model, &batch));
    }

    #[test]
    fn backprop_loss_equals_forward_loss() {
        let model = Model::init(ModelConfig::small()).unwrap().to_f64();
        let batch = random_batch(6, 3, 5, 258);
        let (l, _) = backprop(&model, &batch);
        assert!((l - loss_forward(&model, &batch)).abs() < 1e-12);
    }

    #[test]
    fn forward_is_batch_order_equivariant() {
        let model = Model::init(ModelConfig::small()).unwrap();
        let batch = random_batch(7, 3, 6, 258);
        let per: Vec<Vec<f32>> = batch.iter().map(|e| forward_logits(&model, &e.tokens)).collect();
        let rev: Vec<Vec<f32>> = batch.iter().rev().map(|e| forward_logits(&model, &e.tokens)).collect();
        assert_eq!(per, rev.into_iter().rev().collect::<Vec<_>>());
    }
}
