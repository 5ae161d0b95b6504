//! Encoder-decoder transformer with hand-written backpropagation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Positional};
use super::ops::{self, Attn, AttnShape, Ff, Norm, Seg, Tensor};
use super::scalar::{gemm, matmul, Scalar, View, ViewMut};
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Clone, Debug)]
pub struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ff: Ff,
}

#[derive(Clone, Debug)]
pub struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ff: Ff,
}

/// Named placement of every parameter tensor in the flat vector, in
/// declaration order (which is also checkpoint order).
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: Tensor,
    pub enc_pos: Option<Tensor>,
    pub dec_pos: Option<Tensor>,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
    /// Output projection; `None` when it is tied to `embed`.
    pub out: Option<Tensor>,
    pub names: Vec<(String, Tensor)>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.width;
        let mut names = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, rows: usize, cols: usize| {
            let t = Tensor {
                off: total,
                rows,
                cols,
            };
            total += rows * cols;
            names.push((name, t));
            t
        };
        let embed = alloc("embed".into(), c.vocab_size, d);
        let (enc_pos, dec_pos) = match c.positional {
            Positional::Learned => (
                Some(alloc("enc.pos".into(), c.max_source_len, d)),
                Some(alloc("dec.pos".into(), c.max_target_len, d)),
            ),
            Positional::Sinusoidal => (None, None),
        };
        let norm = |alloc: &mut dyn FnMut(String, usize, usize) -> Tensor, p: &str| Norm {
            g: alloc(format!("{p}.g"), 1, d),
            b: alloc(format!("{p}.b"), 1, d),
        };
        let attn = |alloc: &mut dyn FnMut(String, usize, usize) -> Tensor, p: &str| Attn {
            q: alloc(format!("{p}.q"), d, d),
            k: alloc(format!("{p}.k"), d, d),
            v: alloc(format!("{p}.v"), d, d),
            o: alloc(format!("{p}.o"), d, d),
        };
        let ff = |alloc: &mut dyn FnMut(String, usize, usize) -> Tensor, p: &str| Ff {
            w1: alloc(format!("{p}.w1"), d, c.ff_width),
            w2: alloc(format!("{p}.w2"), c.ff_width, d),
        };
        let enc = (0..c.encoder_layers)
            .map(|l| EncLayer {
                ln1: norm(&mut alloc, &format!("enc.{l}.ln1")),
                attn: attn(&mut alloc, &format!("enc.{l}.attn")),
                ln2: norm(&mut alloc, &format!("enc.{l}.ln2")),
                ff: ff(&mut alloc, &format!("enc.{l}.ff")),
            })
            .collect();
        let enc_ln = norm(&mut alloc, "enc.ln");
        let dec = (0..c.decoder_layers)
            .map(|l| DecLayer {
                ln1: norm(&mut alloc, &format!("dec.{l}.ln1")),
                self_attn: attn(&mut alloc, &format!("dec.{l}.self")),
                ln2: norm(&mut alloc, &format!("dec.{l}.ln2")),
                cross: attn(&mut alloc, &format!("dec.{l}.cross")),
                ln3: norm(&mut alloc, &format!("dec.{l}.ln3")),
                ff: ff(&mut alloc, &format!("dec.{l}.ff")),
            })
            .collect();
        let dec_ln = norm(&mut alloc, "dec.ln");
        let out = (!c.tie_embeddings).then(|| alloc("out".into(), d, c.vocab_size));
        Layout {
            embed,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
            names,
            total,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }
}

/// One training or scoring pair: source ids and target ids. Targets are cut
/// at the first end-of-sequence or pad id; the end-of-sequence step is
/// always scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// A decoder sample with its log-probability under the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    /// Whether the sample ended with end-of-sequence rather than the length
    /// limit or an invalid special token.
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Ancestral sampling from `softmax(logits / t)`.
    Temperature(f64),
    /// Arg-max decoding (the zero-temperature limit).
    Greedy,
}

/// Sequences packed back to back for one forward pass.
struct Packed {
    src: Vec<u32>,
    src_segs: Vec<Seg>,
    src_ok: Vec<bool>,
    dec_in: Vec<u32>,
    dec_segs: Vec<Seg>,
    /// Source sequence read by each decoder sequence.
    pair: Vec<usize>,
}

impl Packed {
    fn new() -> Self {
        Packed {
            src: Vec::new(),
            src_segs: Vec::new(),
            src_ok: Vec::new(),
            dec_in: Vec::new(),
            dec_segs: Vec::new(),
            pair: Vec::new(),
        }
    }

    fn push_source(&mut self, src: &[u32]) -> usize {
        self.src_segs.push((self.src.len(), src.len()));
        self.src.extend_from_slice(src);
        self.src_ok.extend(src.iter().map(|&t| t != PAD));
        self.src_segs.len() - 1
    }

    fn push_decoder(&mut self, dec_in: &[u32], src_seg: usize) {
        self.dec_segs.push((self.dec_in.len(), dec_in.len()));
        self.dec_in.extend_from_slice(dec_in);
        self.pair.push(src_seg);
    }

    fn identity(&self) -> Vec<usize> {
        (0..self.src_segs.len()).collect()
    }
}

struct EncLayerCache<T> {
    h1: Vec<T>,
    ln1: ops::LnCache<T>,
    attn: ops::AttnCache<T>,
    m1: Option<Vec<T>>,
    h2: Vec<T>,
    ln2: ops::LnCache<T>,
    ff: ops::FfCache<T>,
    m2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    h1: Vec<T>,
    ln1: ops::LnCache<T>,
    self_attn: ops::AttnCache<T>,
    m1: Option<Vec<T>>,
    h2: Vec<T>,
    ln2: ops::LnCache<T>,
    cross: ops::AttnCache<T>,
    m2: Option<Vec<T>>,
    h3: Vec<T>,
    ln3: ops::LnCache<T>,
    ff: ops::FfCache<T>,
    m3: Option<Vec<T>>,
}

struct Forward<T> {
    enc_layers: Vec<EncLayerCache<T>>,
    enc_lnf: ops::LnCache<T>,
    enc_out: Vec<T>,
    dec_layers: Vec<DecLayerCache<T>>,
    dec_lnf: ops::LnCache<T>,
    dec_h: Vec<T>,
    logits: Vec<T>,
}

fn sinusoid_table<T: Scalar>(rows: usize, d: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            t[pos * d + 2 * i] = T::from_f64_lossy(a.sin());
            t[pos * d + 2 * i + 1] = T::from_f64_lossy(a.cos());
        }
    }
    t
}

/// Row-wise log-softmax into `out`; returns nothing, `out[j] = x[j] - lse`.
fn log_softmax<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
    sinusoid: Vec<T>,
    step: u64,
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = seed::rng(seed);
        let d = config.width;
        let depth_scale = 1.0 / ((2 * (config.encoder_layers + config.decoder_layers)).max(1) as f64).sqrt();
        for (name, t) in &layout.names {
            let std = if name.ends_with(".g") {
                t.get_mut(&mut params).iter_mut().for_each(|v| *v = T::one());
                continue;
            } else if name.ends_with(".b") {
                continue;
            } else if name == "embed" {
                1.0
            } else if name.ends_with(".pos") {
                0.1
            } else if name.ends_with(".o") || name.ends_with(".w2") {
                depth_scale / (t.rows as f64).sqrt()
            } else {
                1.0 / (t.rows as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in t.get_mut(&mut params) {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        let rows = config.max_source_len.max(config.max_target_len);
        let sinusoid = match config.positional {
            Positional::Sinusoidal => sinusoid_table(rows, d),
            Positional::Learned => Vec::new(),
        };
        Ok(Seq2SeqModel {
            config,
            layout,
            params,
            sinusoid,
            step: 0,
        })
    }

    /// Model with the given parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<T>, step: u64) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if params.len() != m.layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                m.layout.total,
                params.len()
            )));
        }
        m.params = params;
        m.step = step;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.layout.tensor(name)?;
        Some(t.get_mut(&mut self.params))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::Lookup {
                kind: "token id",
                id: t.to_string(),
            }),
            None => Ok(()),
        }
    }

    fn check_source(&self, src: &[u32]) -> Result<()> {
        if src.len() > self.config.max_source_len {
            return Err(Error::Length {
                what: "source",
                len: src.len(),
                max: self.config.max_source_len,
            });
        }
        self.check_ids(src)
    }

    fn check_decoder(&self, dec_in: &[u32]) -> Result<()> {
        if dec_in.len() > self.config.max_target_len {
            return Err(Error::Length {
                what: "target",
                len: dec_in.len(),
                max: self.config.max_target_len,
            });
        }
        self.check_ids(dec_in)
    }

    /// Target ids up to the first end-of-sequence or pad.
    fn clean_target(target: &[u32]) -> &[u32] {
        let end = target
            .iter()
            .position(|&t| t == EOS || t == PAD)
            .unwrap_or(target.len());
        &target[..end]
    }

    /// Decoder input `[BOS, y..]` and labels `[y.., EOS]`.
    fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
        let y = Self::clean_target(target);
        let mut dec_in = Vec::with_capacity(y.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(y);
        let mut labels = y.to_vec();
        labels.push(EOS);
        (dec_in, labels)
    }

    fn embed(&self, tokens: &[u32], segs: &[Seg], pos: Option<Tensor>) -> Vec<T> {
        let d = self.config.width;
        let e = self.layout.embed.get(&self.params);
        let mut x = vec![T::zero(); tokens.len() * d];
        for &(start, len) in segs {
            for i in 0..len {
                let row = &mut x[(start + i) * d..(start + i + 1) * d];
                let tok = tokens[start + i] as usize;
                row.copy_from_slice(&e[tok * d..(tok + 1) * d]);
                let table = match pos {
                    Some(t) => t.get(&self.params),
                    None => &self.sinusoid,
                };
                for (v, &p) in row.iter_mut().zip(&table[i * d..(i + 1) * d]) {
                    *v += p;
                }
            }
        }
        x
    }

    fn embed_back(&self, g: &mut [T], dx: &[T], tokens: &[u32], segs: &[Seg], pos: Option<Tensor>) {
        let d = self.config.width;
        for &(start, len) in segs {
            for i in 0..len {
                let drow = &dx[(start + i) * d..(start + i + 1) * d];
                let tok = tokens[start + i] as usize;
                let ge = self.layout.embed.get_mut(g);
                for (a, &b) in ge[tok * d..(tok + 1) * d].iter_mut().zip(drow) {
                    *a += b;
                }
                if let Some(t) = pos {
                    let gp = t.get_mut(g);
                    for (a, &b) in gp[i * d..(i + 1) * d].iter_mut().zip(drow) {
                        *a += b;
                    }
                }
            }
        }
    }

    fn forward<R: Rng>(&self, b: &Packed, mut rng: Option<&mut R>) -> Forward<T> {
        let c = &self.config;
        let d = c.width;
        let p = &self.params;
        let rate = c.dropout;
        let ident = b.identity();

        let enc_shape = AttnShape {
            q_segs: &b.src_segs,
            kv_segs: &b.src_segs,
            pair: &ident,
            key_ok: Some(&b.src_ok),
            causal: false,
            heads: c.heads,
            width: d,
        };
        let mut x = self.embed(&b.src, &b.src_segs, self.layout.enc_pos);
        let mut enc_layers = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (h1, ln1) = ops::layer_norm(&x, l.ln1.g.get(p), l.ln1.b.get(p), d);
            let (mut a, attn) = ops::attention(p, &l.attn, &h1, &h1, &enc_shape);
            let m1 = ops::dropout_mask(a.len(), rate, rng.as_deref_mut());
            ops::apply_mask(&mut a, &m1);
            x.iter_mut().zip(&a).for_each(|(v, &u)| *v += u);
            let (h2, ln2) = ops::layer_norm(&x, l.ln2.g.get(p), l.ln2.b.get(p), d);
            let (mut f, ff) = ops::feed_forward(p, &l.ff, &h2, d);
            let m2 = ops::dropout_mask(f.len(), rate, rng.as_deref_mut());
            ops::apply_mask(&mut f, &m2);
            x.iter_mut().zip(&f).for_each(|(v, &u)| *v += u);
            enc_layers.push(EncLayerCache {
                h1,
                ln1,
                attn,
                m1,
                h2,
                ln2,
                ff,
                m2,
            });
        }
        let (enc_out, enc_lnf) =
            ops::layer_norm(&x, self.layout.enc_ln.g.get(p), self.layout.enc_ln.b.get(p), d);

        let dec_ident: Vec<usize> = (0..b.dec_segs.len()).collect();
        let self_shape = AttnShape {
            q_segs: &b.dec_segs,
            kv_segs: &b.dec_segs,
            pair: &dec_ident,
            key_ok: None,
            causal: true,
            heads: c.heads,
            width: d,
        };
        let cross_shape = AttnShape {
            q_segs: &b.dec_segs,
            kv_segs: &b.src_segs,
            pair: &b.pair,
            key_ok: Some(&b.src_ok),
            causal: false,
            heads: c.heads,
            width: d,
        };
        let mut y = self.embed(&b.dec_in, &b.dec_segs, self.layout.dec_pos);
        let mut dec_layers = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (h1, ln1) = ops::layer_norm(&y, l.ln1.g.get(p), l.ln1.b.get(p), d);
            let (mut a, self_attn) = ops::attention(p, &l.self_attn, &h1, &h1, &self_shape);
            let m1 = ops::dropout_mask(a.len(), rate, rng.as_deref_mut());
            ops::apply_mask(&mut a, &m1);
            y.iter_mut().zip(&a).for_each(|(v, &u)| *v += u);
            let (h2, ln2) = ops::layer_norm(&y, l.ln2.g.get(p), l.ln2.b.get(p), d);
            let (mut cr, cross) = ops::attention(p, &l.cross, &h2, &enc_out, &cross_shape);
            let m2 = ops::dropout_mask(cr.len(), rate, rng.as_deref_mut());
            ops::apply_mask(&mut cr, &m2);
            y.iter_mut().zip(&cr).for_each(|(v, &u)| *v += u);
            let (h3, ln3) = ops::layer_norm(&y, l.ln3.g.get(p), l.ln3.b.get(p), d);
            let (mut f, ff) = ops::feed_forward(p, &l.ff, &h3, d);
            let m3 = ops::dropout_mask(f.len(), rate, rng.as_deref_mut());
            ops::apply_mask(&mut f, &m3);
            y.iter_mut().zip(&f).for_each(|(v, &u)| *v += u);
            dec_layers.push(DecLayerCache {
                h1,
                ln1,
                self_attn,
                m1,
                h2,
                ln2,
                cross,
                m2,
                h3,
                ln3,
                ff,
                m3,
            });
        }
        let (dec_h, dec_lnf) =
            ops::layer_norm(&y, self.layout.dec_ln.g.get(p), self.layout.dec_ln.b.get(p), d);
        let logits = self.project(&dec_h, b.dec_in.len());
        Forward {
            enc_layers,
            enc_lnf,
            enc_out,
            dec_layers,
            dec_lnf,
            dec_h,
            logits,
        }
    }

    /// Vocabulary logits for `n` final decoder states.
    fn project(&self, h: &[T], n: usize) -> Vec<T> {
        let d = self.config.width;
        let v = self.config.vocab_size;
        match self.layout.out {
            Some(out) => matmul(h, out.get(&self.params), n, d, v),
            None => {
                let mut logits = vec![T::zero(); n * v];
                gemm(
                    self.tied_scale(),
                    View::new(h, n, d),
                    View::new(self.layout.embed.get(&self.params), v, d).t(),
                    T::zero(),
                    ViewMut::new(&mut logits, n, v),
                );
                logits
            }
        }
    }

    /// Accumulates the projection's weight gradient and returns the
    /// gradient of the decoder states.
    fn project_back(&self, g: &mut [T], h: &[T], dlogits: &[T], n: usize) -> Vec<T> {
        let d = self.config.width;
        let v = self.config.vocab_size;
        let p = &self.params;
        match self.layout.out {
            Some(out) => {
                ops::acc_weight_grad(out.get_mut(g), h, dlogits, n, d, v);
                ops::back_input(dlogits, out.get(p), n, d, v)
            }
            None => {
                let scale = self.tied_scale();
                gemm(
                    scale,
                    View::new(dlogits, n, v).t(),
                    View::new(h, n, d),
                    T::one(),
                    ViewMut::new(self.layout.embed.get_mut(g), v, d),
                );
                let mut dh = vec![T::zero(); n * d];
                gemm(
                    scale,
                    View::new(dlogits, n, v),
                    View::new(self.layout.embed.get(p), v, d),
                    T::zero(),
                    ViewMut::new(&mut dh, n, d),
                );
                dh
            }
        }
    }

    fn tied_scale(&self) -> T {
        T::from_f64_lossy(1.0 / (self.config.width as f64).sqrt())
    }

    fn backward(&self, b: &Packed, f: &Forward<T>, dlogits: &[T], g: &mut [T]) {
        let c = &self.config;
        let d = c.width;
        let p = &self.params;
        let nt = b.dec_in.len();

        let dh = self.project_back(g, &f.dec_h, dlogits, nt);
        let (gg, gb) = norm_grads(g, &self.layout.dec_ln);
        let mut dy = ops::layer_norm_back(&dh, &f.dec_lnf, self.layout.dec_ln.g.get(p), gg, gb, d);

        let dec_ident: Vec<usize> = (0..b.dec_segs.len()).collect();
        let self_shape = AttnShape {
            q_segs: &b.dec_segs,
            kv_segs: &b.dec_segs,
            pair: &dec_ident,
            key_ok: None,
            causal: true,
            heads: c.heads,
            width: d,
        };
        let cross_shape = AttnShape {
            q_segs: &b.dec_segs,
            kv_segs: &b.src_segs,
            pair: &b.pair,
            key_ok: Some(&b.src_ok),
            causal: false,
            heads: c.heads,
            width: d,
        };
        let mut d_enc = vec![T::zero(); f.enc_out.len()];
        for (l, lc) in self.layout.dec.iter().zip(&f.dec_layers).rev() {
            let mut df = dy.clone();
            ops::apply_mask(&mut df, &lc.m3);
            let dh3 = ops::feed_forward_back(&df, p, g, &l.ff, &lc.h3, &lc.ff, d);
            let (gg, gb) = norm_grads(g, &l.ln3);
            let dx = ops::layer_norm_back(&dh3, &lc.ln3, l.ln3.g.get(p), gg, gb, d);
            add_into(&mut dy, &dx);

            let mut dc = dy.clone();
            ops::apply_mask(&mut dc, &lc.m2);
            let (dh2, dkv) =
                ops::attention_back(&dc, p, g, &l.cross, &lc.h2, &f.enc_out, &cross_shape, &lc.cross);
            add_into(&mut d_enc, &dkv);
            let (gg, gb) = norm_grads(g, &l.ln2);
            let dx = ops::layer_norm_back(&dh2, &lc.ln2, l.ln2.g.get(p), gg, gb, d);
            add_into(&mut dy, &dx);

            let mut da = dy.clone();
            ops::apply_mask(&mut da, &lc.m1);
            let (dq, dkv) =
                ops::attention_back(&da, p, g, &l.self_attn, &lc.h1, &lc.h1, &self_shape, &lc.self_attn);
            let mut dh1 = dq;
            add_into(&mut dh1, &dkv);
            let (gg, gb) = norm_grads(g, &l.ln1);
            let dx = ops::layer_norm_back(&dh1, &lc.ln1, l.ln1.g.get(p), gg, gb, d);
            add_into(&mut dy, &dx);
        }
        self.embed_back(g, &dy, &b.dec_in, &b.dec_segs, self.layout.dec_pos);

        let ident = b.identity();
        let enc_shape = AttnShape {
            q_segs: &b.src_segs,
            kv_segs: &b.src_segs,
            pair: &ident,
            key_ok: Some(&b.src_ok),
            causal: false,
            heads: c.heads,
            width: d,
        };
        let (gg, gb) = norm_grads(g, &self.layout.enc_ln);
        let mut dx = ops::layer_norm_back(&d_enc, &f.enc_lnf, self.layout.enc_ln.g.get(p), gg, gb, d);
        for (l, lc) in self.layout.enc.iter().zip(&f.enc_layers).rev() {
            let mut df = dx.clone();
            ops::apply_mask(&mut df, &lc.m2);
            let dh2 = ops::feed_forward_back(&df, p, g, &l.ff, &lc.h2, &lc.ff, d);
            let (gg, gb) = norm_grads(g, &l.ln2);
            let dn = ops::layer_norm_back(&dh2, &lc.ln2, l.ln2.g.get(p), gg, gb, d);
            add_into(&mut dx, &dn);

            let mut da = dx.clone();
            ops::apply_mask(&mut da, &lc.m1);
            let (dq, dkv) = ops::attention_back(&da, p, g, &l.attn, &lc.h1, &lc.h1, &enc_shape, &lc.attn);
            let mut dh1 = dq;
            add_into(&mut dh1, &dkv);
            let (gg, gb) = norm_grads(g, &l.ln1);
            let dn = ops::layer_norm_back(&dh1, &lc.ln1, l.ln1.g.get(p), gg, gb, d);
            add_into(&mut dx, &dn);
        }
        self.embed_back(g, &dx, &b.src, &b.src_segs, self.layout.enc_pos);
    }

    fn pack_examples(&self, examples: &[Example]) -> Result<(Packed, Vec<u32>)> {
        let mut packed = Packed::new();
        let mut labels = Vec::new();
        for ex in examples {
            self.check_source(&ex.source)?;
            let (dec_in, lab) = Self::teacher_forcing(&ex.target);
            self.check_decoder(&dec_in)?;
            let s = packed.push_source(&ex.source);
            packed.push_decoder(&dec_in, s);
            labels.extend(lab);
        }
        Ok((packed, labels))
    }

    /// Summed cross-entropy over all target tokens of `examples`, the token
    /// count, and the gradient of the sum. Dropout is active when `dropout_seed`
    /// is given.
    pub fn loss_and_grad(&self, examples: &[Example], dropout_seed: Option<u64>) -> Result<(f64, usize, Vec<T>)> {
        let (packed, labels) = self.pack_examples(examples)?;
        let mut rng = dropout_seed.map(seed::rng);
        let f = self.forward(&packed, rng.as_mut());
        let v = self.config.vocab_size;
        let eps = self.config.label_smoothing;
        let smooth = T::from_f64_lossy(eps / v as f64);
        let hit = T::from_f64_lossy(1.0 - eps);
        let mut dlogits = vec![T::zero(); f.logits.len()];
        let mut loss = 0.0;
        let mut lsm = vec![T::zero(); v];
        for (t, &y) in labels.iter().enumerate() {
            let row = &f.logits[t * v..(t + 1) * v];
            log_softmax(row, &mut lsm);
            let drow = &mut dlogits[t * v..(t + 1) * v];
            let mut l = -lsm[y as usize].to_f64_lossy() * (1.0 - eps);
            if eps > 0.0 {
                l -= lsm.iter().map(|x| x.to_f64_lossy()).sum::<f64>() * eps / v as f64;
            }
            loss += l;
            for (j, dv) in drow.iter_mut().enumerate() {
                *dv = lsm[j].exp() - smooth;
            }
            drow[y as usize] -= hit;
        }
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward(&packed, &f, &dlogits, &mut grads);
        Ok((loss, labels.len(), grads))
    }

    /// Mean token cross-entropy of `examples` without computing gradients.
    pub fn loss(&self, examples: &[Example]) -> Result<f64> {
        let (packed, labels) = self.pack_examples(examples)?;
        let f = self.forward::<rand_chacha::ChaCha8Rng>(&packed, None);
        let v = self.config.vocab_size;
        let mut lsm = vec![T::zero(); v];
        let mut total = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            log_softmax(&f.logits[t * v..(t + 1) * v], &mut lsm);
            total -= lsm[y as usize].to_f64_lossy();
        }
        Ok(total / labels.len() as f64)
    }

    /// Logits for every decoder position given `[BOS] + prefix`; entry `t`
    /// predicts target token `t`.
    pub fn forward_logits(&self, source: &[u32], prefix: &[u32]) -> Result<Vec<Vec<T>>> {
        self.check_source(source)?;
        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(prefix);
        self.check_decoder(&dec_in)?;
        let mut packed = Packed::new();
        let s = packed.push_source(source);
        packed.push_decoder(&dec_in, s);
        let f = self.forward::<rand_chacha::ChaCha8Rng>(&packed, None);
        let v = self.config.vocab_size;
        Ok(f.logits.chunks(v).map(<[T]>::to_vec).collect())
    }

    /// Log-probability of each target (end-of-sequence included) given one
    /// shared source.
    pub fn score_targets(&self, source: &[u32], targets: &[Vec<u32>]) -> Result<Vec<f64>> {
        self.check_source(source)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(targets.len());
        let mut lsm = vec![T::zero(); v];
        for chunk in targets.chunks(128) {
            let mut packed = Packed::new();
            let s = packed.push_source(source);
            let mut labels = Vec::new();
            for t in chunk {
                let (dec_in, lab) = Self::teacher_forcing(t);
                self.check_decoder(&dec_in)?;
                packed.push_decoder(&dec_in, s);
                labels.push(lab);
            }
            let f = self.forward::<rand_chacha::ChaCha8Rng>(&packed, None);
            for (&(start, _), lab) in packed.dec_segs.iter().zip(&labels) {
                let mut lp = 0.0;
                for (i, &y) in lab.iter().enumerate() {
                    let r = start + i;
                    log_softmax(&f.logits[r * v..(r + 1) * v], &mut lsm);
                    lp += lsm[y as usize].to_f64_lossy();
                }
                out.push(lp);
            }
        }
        Ok(out)
    }

    /// `log p(target | source)`, including the end-of-sequence step.
    pub fn sequence_log_prob(&self, source: &[u32], target: &[u32]) -> Result<f64> {
        Ok(self.score_targets(source, &[target.to_vec()])?[0])
    }

    /// `n` samples drawn independently; sample `i` uses its own random
    /// stream, so the first `m` samples do not depend on `n`. Log-probs are
    /// always under the untempered model.
    pub fn sample(&self, source: &[u32], n: usize, mode: Sampling, seed: u64) -> Result<Vec<Sample>> {
        self.check_source(source)?;
        if let Sampling::Temperature(t) = mode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        let mut packed = Packed::new();
        packed.push_source(source);
        let enc = self.encode_only(&packed);
        let mut out = Vec::with_capacity(n);
        const CHUNK: usize = 256;
        let mut first = 0;
        while first < n {
            let count = CHUNK.min(n - first);
            out.extend(self.sample_chunk(&enc, &packed.src_ok, first, count, mode, seed));
            first += count;
        }
        Ok(out)
    }

    fn encode_only(&self, packed: &Packed) -> Vec<T> {
        // Reuses the full forward with an empty decoder.
        let f = self.forward::<rand_chacha::ChaCha8Rng>(packed, None);
        f.enc_out
    }

    fn sample_chunk(
        &self,
        enc_out: &[T],
        src_ok: &[bool],
        first: usize,
        b: usize,
        mode: Sampling,
        seed: u64,
    ) -> Vec<Sample> {
        let c = &self.config;
        let d = c.width;
        let dh = c.head_dim();
        let v = c.vocab_size;
        let p = &self.params;
        let s_len = enc_out.len() / d;
        let tmax = c.max_target_len;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let cross_kv: Vec<(Vec<T>, Vec<T>)> = self
            .layout
            .dec
            .iter()
            .map(|l| {
                (
                    matmul(enc_out, l.cross.k.get(p), s_len, d, d),
                    matmul(enc_out, l.cross.v.get(p), s_len, d, d),
                )
            })
            .collect();
        let mut kcache = vec![vec![T::zero(); b * tmax * d]; self.layout.dec.len()];
        let mut vcache = vec![vec![T::zero(); b * tmax * d]; self.layout.dec.len()];
        let mut rngs: Vec<_> = (0..b)
            .map(|i| seed::rng(seed::derive(seed, &[(first + i) as u64])))
            .collect();
        let mut samples: Vec<Sample> = (0..b)
            .map(|_| Sample {
                ids: Vec::new(),
                log_prob: 0.0,
                finished: false,
            })
            .collect();
        let mut done = vec![false; b];
        let mut cur = vec![BOS; b];
        let mut lsm = vec![T::zero(); v];
        let mut scores = vec![T::zero(); tmax.max(s_len)];

        for t in 0..tmax {
            let pos: &[T] = match self.layout.dec_pos {
                Some(pt) => &pt.get(p)[t * d..(t + 1) * d],
                None => &self.sinusoid[t * d..(t + 1) * d],
            };
            let e = self.layout.embed.get(p);
            let mut x = vec![T::zero(); b * d];
            for i in 0..b {
                let tok = cur[i] as usize;
                for j in 0..d {
                    x[i * d + j] = e[tok * d + j] + pos[j];
                }
            }
            for (li, l) in self.layout.dec.iter().enumerate() {
                let (h, _) = ops::layer_norm(&x, l.ln1.g.get(p), l.ln1.b.get(p), d);
                let q = matmul(&h, l.self_attn.q.get(p), b, d, d);
                let k = matmul(&h, l.self_attn.k.get(p), b, d, d);
                let vv = matmul(&h, l.self_attn.v.get(p), b, d, d);
                for i in 0..b {
                    let at = (i * tmax + t) * d;
                    kcache[li][at..at + d].copy_from_slice(&k[i * d..(i + 1) * d]);
                    vcache[li][at..at + d].copy_from_slice(&vv[i * d..(i + 1) * d]);
                }
                let mut ctx = vec![T::zero(); b * d];
                for i in 0..b {
                    for hd in 0..c.heads {
                        let qh = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                        let sc = &mut scores[..=t];
                        for (j, s) in sc.iter_mut().enumerate() {
                            let kr = &kcache[li][(i * tmax + j) * d + hd * dh..][..dh];
                            *s = qh.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        }
                        let mx = sc.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for s in sc.iter_mut() {
                            *s = (*s - mx).exp();
                            sum += *s;
                        }
                        let out = &mut ctx[i * d + hd * dh..i * d + (hd + 1) * dh];
                        for (j, &s) in sc.iter().enumerate() {
                            let w = s / sum;
                            let vr = &vcache[li][(i * tmax + j) * d + hd * dh..][..dh];
                            for (o, &vv) in out.iter_mut().zip(vr) {
                                *o += w * vv;
                            }
                        }
                    }
                }
                let a = matmul(&ctx, l.self_attn.o.get(p), b, d, d);
                add_into(&mut x, &a);

                let (h2, _) = ops::layer_norm(&x, l.ln2.g.get(p), l.ln2.b.get(p), d);
                let q2 = matmul(&h2, l.cross.q.get(p), b, d, d);
                let (kc, vc) = &cross_kv[li];
                let mut ctx = vec![T::zero(); b * d];
                let mut probs = vec![T::zero(); b * s_len];
                for hd in 0..c.heads {
                    if s_len == 0 {
                        break;
                    }
                    gemm(
                        scale,
                        View::block(&q2, d, 0, hd * dh, b, dh),
                        View::block(kc, d, 0, hd * dh, s_len, dh).t(),
                        T::zero(),
                        ViewMut::new(&mut probs, b, s_len),
                    );
                    for i in 0..b {
                        let row = &mut probs[i * s_len..(i + 1) * s_len];
                        let mx = row
                            .iter()
                            .zip(src_ok)
                            .filter(|(_, &ok)| ok)
                            .map(|(&v, _)| v)
                            .fold(T::neg_infinity(), T::max);
                        if mx == T::neg_infinity() {
                            row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let mut sum = T::zero();
                        for (v, &ok) in row.iter_mut().zip(src_ok) {
                            *v = if ok { (*v - mx).exp() } else { T::zero() };
                            sum += *v;
                        }
                        row.iter_mut().for_each(|v| *v /= sum);
                    }
                    gemm(
                        T::one(),
                        View::new(&probs, b, s_len),
                        View::block(vc, d, 0, hd * dh, s_len, dh),
                        T::zero(),
                        ViewMut::block(&mut ctx, d, 0, hd * dh, b, dh),
                    );
                }
                let a = matmul(&ctx, l.cross.o.get(p), b, d, d);
                add_into(&mut x, &a);

                let (h3, _) = ops::layer_norm(&x, l.ln3.g.get(p), l.ln3.b.get(p), d);
                let (f, _) = ops::feed_forward(p, &l.ff, &h3, d);
                add_into(&mut x, &f);
            }
            let (hf, _) = ops::layer_norm(&x, self.layout.dec_ln.g.get(p), self.layout.dec_ln.b.get(p), d);
            let logits = self.project(&hf, b);

            let mut all_done = true;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let row = &logits[i * v..(i + 1) * v];
                log_softmax(row, &mut lsm);
                let tok = match mode {
                    Sampling::Greedy => argmax(&lsm),
                    Sampling::Temperature(temp) => draw(&lsm, temp, &mut rngs[i]),
                };
                samples[i].log_prob += lsm[tok].to_f64_lossy();
                if tok as u32 == EOS {
                    samples[i].finished = true;
                    done[i] = true;
                } else if tok as u32 == PAD || tok as u32 == BOS {
                    // never a valid target token: the sample ends unfinished
                    done[i] = true;
                } else {
                    samples[i].ids.push(tok as u32);
                    all_done = false;
                }
                cur[i] = tok as u32;
            }
            if all_done {
                break;
            }
        }
        samples
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn draw<T: Scalar, R: Rng>(log_probs: &[T], temperature: f64, rng: &mut R) -> usize {
    let inv = 1.0 / temperature;
    let max = log_probs
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_probs
        .iter()
        .map(|v| ((v.to_f64_lossy() - max) * inv).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (j, w) in weights.iter().enumerate() {
        if u < *w {
            return j;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn add_into<T: Scalar>(a: &mut [T], b: &[T]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
}

fn norm_grads<'a, T>(g: &'a mut [T], n: &Norm) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(n.g.off + n.g.len(), n.b.off);
    let (left, right) = g.split_at_mut(n.b.off);
    (&mut left[n.g.off..], &mut right[..n.b.len()])
}
