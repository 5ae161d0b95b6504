//! Forward and backward kernels for the transformer sublayers. Activations
//! are row-major `[tokens, width]` matrices holding several sequences back
//! to back; `Seg` records where each sequence lives.

use rand::Rng;

use super::scalar::{gemm, matmul, Scalar, View, ViewMut};

/// `(first row, length)` of one sequence inside a packed matrix.
pub type Seg = (usize, usize);

const LN_EPS: f64 = 1e-5;

/// Location of one parameter matrix in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.off..self.off + self.len()]
    }

    pub fn get_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.off..self.off + self.len()]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub g: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Attn {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Ff {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// `dw += x^T dy` for `x: [n, i]`, `dy: [n, o]`.
pub fn acc_weight_grad<T: Scalar>(dw: &mut [T], x: &[T], dy: &[T], n: usize, i: usize, o: usize) {
    gemm(
        T::one(),
        View::new(x, n, i).t(),
        View::new(dy, n, o),
        T::one(),
        ViewMut::new(dw, i, o),
    );
}

/// `dy @ w^T` for `w: [i, o]`.
pub fn back_input<T: Scalar>(dy: &[T], w: &[T], n: usize, i: usize, o: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * i];
    gemm(
        T::one(),
        View::new(dy, n, o),
        View::new(w, i, o).t(),
        T::zero(),
        ViewMut::new(&mut dx, n, i),
    );
    dx
}

pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_back<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    d: usize,
) -> Vec<T> {
    let n = dy.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

/// Attention geometry shared by forward and backward.
pub struct AttnShape<'a> {
    pub q_segs: &'a [Seg],
    pub kv_segs: &'a [Seg],
    /// Key/value sequence attended by each query sequence.
    pub pair: &'a [usize],
    /// `false` marks key tokens that must not be attended.
    pub key_ok: Option<&'a [bool]>,
    pub causal: bool,
    pub heads: usize,
    pub width: usize,
}

pub struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    prob_off: Vec<usize>,
    ctx: Vec<T>,
}

fn softmax_row<T: Scalar>(row: &mut [T], ok: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if ok(j) && *v > max {
            max = *v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn attention<T: Scalar>(
    p: &[T],
    w: &Attn,
    q_in: &[T],
    kv_in: &[T],
    shape: &AttnShape<'_>,
) -> (Vec<T>, AttnCache<T>) {
    let d = shape.width;
    let dh = d / shape.heads;
    let nq = q_in.len() / d;
    let nk = kv_in.len() / d;
    let q = matmul(q_in, w.q.get(p), nq, d, d);
    let k = matmul(kv_in, w.k.get(p), nk, d, d);
    let v = matmul(kv_in, w.v.get(p), nk, d, d);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ctx = vec![T::zero(); nq * d];
    let mut probs = Vec::new();
    let mut prob_off = Vec::new();
    for (si, &(qs, ql)) in shape.q_segs.iter().enumerate() {
        let (ks, kl) = shape.kv_segs[shape.pair[si]];
        for h in 0..shape.heads {
            let off = probs.len();
            prob_off.push(off);
            probs.resize(off + ql * kl, T::zero());
            if ql == 0 || kl == 0 {
                continue;
            }
            gemm(
                scale,
                View::block(&q, d, qs, h * dh, ql, dh),
                View::block(&k, d, ks, h * dh, kl, dh).t(),
                T::zero(),
                ViewMut {
                    data: &mut probs,
                    offset: off,
                    rows: ql,
                    cols: kl,
                    rs: kl,
                },
            );
            for i in 0..ql {
                let row = &mut probs[off + i * kl..off + (i + 1) * kl];
                softmax_row(row, |j| {
                    shape.key_ok.is_none_or(|m| m[ks + j]) && (!shape.causal || j <= i)
                });
            }
            gemm(
                T::one(),
                View {
                    data: &probs,
                    offset: off,
                    rows: ql,
                    cols: kl,
                    rs: kl,
                    cs: 1,
                },
                View::block(&v, d, ks, h * dh, kl, dh),
                T::zero(),
                ViewMut::block(&mut ctx, d, qs, h * dh, ql, dh),
            );
        }
    }
    let out = matmul(&ctx, w.o.get(p), nq, d, d);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            prob_off,
            ctx,
        },
    )
}

/// Returns `(d q_in, d kv_in)`.
pub fn attention_back<T: Scalar>(
    dout: &[T],
    p: &[T],
    g: &mut [T],
    w: &Attn,
    q_in: &[T],
    kv_in: &[T],
    shape: &AttnShape<'_>,
    c: &AttnCache<T>,
) -> (Vec<T>, Vec<T>) {
    let d = shape.width;
    let dh = d / shape.heads;
    let nq = q_in.len() / d;
    let nk = kv_in.len() / d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    acc_weight_grad(w.o.get_mut(g), &c.ctx, dout, nq, d, d);
    let dctx = back_input(dout, w.o.get(p), nq, d, d);

    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut dp = Vec::new();
    let mut idx = 0;
    for (si, &(qs, ql)) in shape.q_segs.iter().enumerate() {
        let (ks, kl) = shape.kv_segs[shape.pair[si]];
        for h in 0..shape.heads {
            let off = c.prob_off[idx];
            idx += 1;
            if ql == 0 || kl == 0 {
                continue;
            }
            let probs = View {
                data: &c.probs,
                offset: off,
                rows: ql,
                cols: kl,
                rs: kl,
                cs: 1,
            };
            dp.clear();
            dp.resize(ql * kl, T::zero());
            gemm(
                T::one(),
                View::block(&dctx, d, qs, h * dh, ql, dh),
                View::block(&c.v, d, ks, h * dh, kl, dh).t(),
                T::zero(),
                ViewMut::new(&mut dp, ql, kl),
            );
            gemm(
                T::one(),
                probs.t(),
                View::block(&dctx, d, qs, h * dh, ql, dh),
                T::one(),
                ViewMut::block(&mut dv, d, ks, h * dh, kl, dh),
            );
            for i in 0..ql {
                let pr = &c.probs[off + i * kl..off + (i + 1) * kl];
                let row = &mut dp[i * kl..(i + 1) * kl];
                let dot: T = pr.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..kl {
                    row[j] = pr[j] * (row[j] - dot) * scale;
                }
            }
            gemm(
                T::one(),
                View::new(&dp, ql, kl),
                View::block(&c.k, d, ks, h * dh, kl, dh),
                T::one(),
                ViewMut::block(&mut dq, d, qs, h * dh, ql, dh),
            );
            gemm(
                T::one(),
                View::new(&dp, ql, kl).t(),
                View::block(&c.q, d, qs, h * dh, ql, dh),
                T::one(),
                ViewMut::block(&mut dk, d, ks, h * dh, kl, dh),
            );
        }
    }

    acc_weight_grad(w.q.get_mut(g), q_in, &dq, nq, d, d);
    acc_weight_grad(w.k.get_mut(g), kv_in, &dk, nk, d, d);
    acc_weight_grad(w.v.get_mut(g), kv_in, &dv, nk, d, d);
    let dq_in = back_input(&dq, w.q.get(p), nq, d, d);
    let mut dkv = back_input(&dk, w.k.get(p), nk, d, d);
    gemm(
        T::one(),
        View::new(&dv, nk, d),
        View::new(w.v.get(p), d, d).t(),
        T::one(),
        ViewMut::new(&mut dkv, nk, d),
    );
    (dq_in, dkv)
}

pub struct FfCache<T> {
    hidden: Vec<T>,
}

pub fn feed_forward<T: Scalar>(p: &[T], w: &Ff, x: &[T], d: usize) -> (Vec<T>, FfCache<T>) {
    let n = x.len() / d;
    let f = w.w1.cols;
    let mut hidden = matmul(x, w.w1.get(p), n, d, f);
    hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let y = matmul(&hidden, w.w2.get(p), n, f, d);
    (y, FfCache { hidden })
}

pub fn feed_forward_back<T: Scalar>(
    dy: &[T],
    p: &[T],
    g: &mut [T],
    w: &Ff,
    x: &[T],
    c: &FfCache<T>,
    d: usize,
) -> Vec<T> {
    let n = x.len() / d;
    let f = w.w1.cols;
    acc_weight_grad(w.w2.get_mut(g), &c.hidden, dy, n, f, d);
    let mut dh = back_input(dy, w.w2.get(p), n, f, d);
    for (dv, &h) in dh.iter_mut().zip(&c.hidden) {
        if h <= T::zero() {
            *dv = T::zero();
        }
    }
    acc_weight_grad(w.w1.get_mut(g), x, &dh, n, d, f);
    back_input(&dh, w.w1.get(p), n, d, f)
}

/// Inverted dropout mask, or `None` when inactive.
pub fn dropout_mask<T: Scalar, R: Rng>(n: usize, rate: f64, rng: Option<&mut R>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

pub fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}
