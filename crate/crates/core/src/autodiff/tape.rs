//! The operator tape: forward evaluation with recorded nodes, reverse sweep
//! for gradients.
//!
//! Shapes are validated by the net front-end; inside the tape a mismatch is
//! a programming error and panics via debug assertions.

use super::Scalar;
use crate::tensor::Tensor;

/// Dense value on the tape, row-major like [`Tensor`] but generic in element
/// type.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Scalar> Buffer<E> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![E::ZERO; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| E::from_f32(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f32()).collect(),
        )
        .expect("buffer shapes are valid tensor shapes")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims3(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2);
        (self.shape[0], self.shape[1])
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Node index, usable to look up this variable's gradient in the
    /// vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, E),
    Silu(usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    UpsampleNearest2x(usize),
    ConcatChan(usize, usize),
    ChwToTokens(usize),
    TokensToChw {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    SoftmaxRows(usize),
    AddChanBias {
        x: usize,
        bias: usize,
    },
}

struct Node<E> {
    value: Buffer<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Reverse-mode tape over the fixed operator set. A tape owns all of its
/// node values, so independent tapes may run on worker threads.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Valid output range for one kernel offset of a padded strided convolution.
#[inline]
fn conv_range(in_len: usize, k_off: usize, pad: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let lo = pad as isize - k_off as isize;
    let start = if lo <= 0 {
        0
    } else {
        (lo as usize).div_ceil(stride)
    };
    let hi = in_len as isize - 1 + pad as isize - k_off as isize;
    if hi < 0 {
        return (0, 0);
    }
    let end = (hi as usize) / stride + 1;
    (start.min(out_len), end.min(out_len))
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Buffer<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Buffer<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Buffer<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Buffer<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Buffer { shape, data }, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape, vb.shape);
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Buffer { shape, data }, Op::Sub(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| x * c).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Buffer { shape, data }, Op::Scale(a.0, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va
            .data
            .iter()
            .map(|&x| {
                let sig = E::ONE / (E::ONE + (-x).exp());
                x * sig
            })
            .collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Buffer { shape, data }, Op::Silu(a.0), rg)
    }

    /// Affine map `y = x W^T + b` applied to a vector `(in)` or row-wise to
    /// a matrix `(n, in)`. `w` is `(out, in)`, `b` is `(out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        let (out_dim, in_dim) = vw.dims2();
        let (rows, xin) = if vx.shape.len() == 1 {
            (1, vx.shape[0])
        } else {
            vx.dims2()
        };
        debug_assert_eq!(xin, in_dim);
        debug_assert_eq!(vb.shape, vec![out_dim]);

        let mut data = vec![E::ZERO; rows * out_dim];
        for r in 0..rows {
            let xrow = &vx.data[r * in_dim..(r + 1) * in_dim];
            let orow = &mut data[r * out_dim..(r + 1) * out_dim];
            for o in 0..out_dim {
                let wrow = &vw.data[o * in_dim..(o + 1) * in_dim];
                let mut acc = vb.data[o];
                for i in 0..in_dim {
                    acc += wrow[i] * xrow[i];
                }
                orow[o] = acc;
            }
        }
        let shape = if vx.shape.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Buffer { shape, data },
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        )
    }

    /// 2-D convolution, square odd kernel, `same`-style padding `k/2`,
    /// stride 1 or 2. `x` is `(c_in, h, w)`, weights `(c_out, c_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        let (cin, h, wd) = vx.dims3();
        debug_assert_eq!(vw.shape.len(), 4);
        let cout = vw.shape[0];
        let k = vw.shape[2];
        debug_assert_eq!(vw.shape[1], cin);
        debug_assert_eq!(vw.shape[3], k);
        debug_assert_eq!(vb.shape, vec![cout]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let mut out = vec![E::ZERO; cout * ho * wo];
        for co in 0..cout {
            let obase = co * ho * wo;
            let bias = vb.data[co];
            for v in &mut out[obase..obase + ho * wo] {
                *v = bias;
            }
            for ci in 0..cin {
                let xbase = ci * h * wd;
                for ky in 0..k {
                    let (oy0, oy1) = conv_range(h, ky, pad, stride, ho);
                    for kx in 0..k {
                        let wv = vw.data[((co * cin + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = conv_range(wd, kx, pad, stride, wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let irow = xbase + iy * wd;
                            let orow = obase + oy * wo;
                            let ix0 = ox0 * stride + kx - pad;
                            if stride == 1 {
                                let xs = &vx.data[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                let os = &mut out[orow + ox0..orow + ox1];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                let mut ix = ix0;
                                for ox in ox0..ox1 {
                                    out[orow + ox] += wv * vx.data[irow + ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Buffer {
                shape: vec![cout, ho, wo],
                data: out,
            },
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
            rg,
        )
    }

    /// Group normalization over `(c/groups, h, w)` slices with affine
    /// per-channel parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let vbt = &self.nodes[beta.0].value;
        let (c, h, w) = vx.dims3();
        debug_assert_eq!(c % groups, 0);
        debug_assert_eq!(vg.shape, vec![c]);
        debug_assert_eq!(vbt.shape, vec![c]);
        let cs = c / groups;
        let gn = cs * h * w;

        let mut mean = vec![E::ZERO; groups];
        let mut rstd = vec![E::ZERO; groups];
        let mut out = vec![E::ZERO; c * h * w];
        let inv_n = E::from_f64(1.0 / gn as f64);
        for g in 0..groups {
            let base = g * gn;
            let mut s = E::ZERO;
            for &v in &vx.data[base..base + gn] {
                s += v;
            }
            let mu = s * inv_n;
            let mut var = E::ZERO;
            for &v in &vx.data[base..base + gn] {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_n;
            let rs = E::ONE / (var + E::from_f64(eps)).sqrt();
            mean[g] = mu;
            rstd[g] = rs;
            for ci in 0..cs {
                let ch = g * cs + ci;
                let gam = vg.data[ch];
                let bet = vbt.data[ch];
                let cbase = ch * h * w;
                for i in 0..h * w {
                    let xhat = (vx.data[cbase + i] - mu) * rs;
                    out[cbase + i] = gam * xhat + bet;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Buffer {
                shape: vec![c, h, w],
                data: out,
            },
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean,
                rstd,
            },
            rg,
        )
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = vx.dims3();
        let mut out = vec![E::ZERO; c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..ho {
                let iy = y / 2;
                let irow = ch * h * w + iy * w;
                let orow = ch * ho * wo + y * wo;
                for xcol in 0..wo {
                    out[orow + xcol] = vx.data[irow + xcol / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Buffer {
                shape: vec![c, ho, wo],
                data: out,
            },
            Op::UpsampleNearest2x(x.0),
            rg,
        )
    }

    /// Channel concatenation of two `(c, h, w)` values.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (ca, h, w) = va.dims3();
        let (cb, hb, wb) = vb.dims3();
        debug_assert_eq!((h, w), (hb, wb));
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Buffer {
                shape: vec![ca + cb, h, w],
                data,
            },
            Op::ConcatChan(a.0, b.0),
            rg,
        )
    }

    /// `(c, h, w)` to `(h*w, c)` token layout.
    pub fn chw_to_tokens(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = vx.dims3();
        let n = h * w;
        let mut data = vec![E::ZERO; n * c];
        for ch in 0..c {
            for i in 0..n {
                data[i * c + ch] = vx.data[ch * n + i];
            }
        }
        let rg = self.rg(x);
        self.push(
            Buffer {
                shape: vec![n, c],
                data,
            },
            Op::ChwToTokens(x.0),
            rg,
        )
    }

    /// `(h*w, c)` tokens back to `(c, h, w)`.
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, c) = vx.dims2();
        debug_assert_eq!(n, h * w);
        let mut data = vec![E::ZERO; c * n];
        for ch in 0..c {
            for i in 0..n {
                data[ch * n + i] = vx.data[i * c + ch];
            }
        }
        let rg = self.rg(x);
        self.push(
            Buffer {
                shape: vec![c, h, w],
                data,
            },
            Op::TokensToChw {
                x: x.0,
                c,
                h,
                w,
            },
            rg,
        )
    }

    /// `(n, m) x (m, k)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (n, m) = va.dims2();
        let (mb, k) = vb.dims2();
        debug_assert_eq!(m, mb);
        let mut out = vec![E::ZERO; n * k];
        for i in 0..n {
            for p in 0..m {
                let av = va.data[i * m + p];
                let brow = &vb.data[p * k..(p + 1) * k];
                let orow = &mut out[i * k..(i + 1) * k];
                for j in 0..k {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Buffer {
                shape: vec![n, k],
                data: out,
            },
            Op::MatMul(a.0, b.0),
            rg,
        )
    }

    /// `(n, m) x (k, m)^T`, i.e. `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (n, m) = va.dims2();
        let (k, mb) = vb.dims2();
        debug_assert_eq!(m, mb);
        let mut out = vec![E::ZERO; n * k];
        for i in 0..n {
            let arow = &va.data[i * m..(i + 1) * m];
            for j in 0..k {
                let brow = &vb.data[j * m..(j + 1) * m];
                let mut acc = E::ZERO;
                for p in 0..m {
                    acc += arow[p] * brow[p];
                }
                out[i * k + j] = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Buffer {
                shape: vec![n, k],
                data: out,
            },
            Op::MatMulNT(a.0, b.0),
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (n, m) = vx.dims2();
        let mut out = vec![E::ZERO; n * m];
        for r in 0..n {
            let row = &vx.data[r * m..(r + 1) * m];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxv(v);
            }
            let mut sum = E::ZERO;
            let orow = &mut out[r * m..(r + 1) * m];
            for j in 0..m {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
            let inv = E::ONE / sum;
            for v in orow {
                *v = *v * inv;
            }
        }
        let rg = self.rg(x);
        self.push(
            Buffer {
                shape: vec![n, m],
                data: out,
            },
            Op::SoftmaxRows(x.0),
            rg,
        )
    }

    /// Adds a per-channel bias `(c)` to a `(c, h, w)` value.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[bias.0].value;
        let (c, h, w) = vx.dims3();
        debug_assert_eq!(vb.shape, vec![c]);
        let mut data = vx.data.clone();
        for ch in 0..c {
            let bv = vb.data[ch];
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(
            Buffer {
                shape: vec![c, h, w],
                data,
            },
            Op::AddChanBias {
                x: x.0,
                bias: bias.0,
            },
            rg,
        )
    }

    /// Reverse sweep from `out` seeded with `cotangent`. Returns one gradient
    /// per node for nodes that require grad and received any; `None` elsewhere.
    pub fn backward(&self, out: Var, cotangent: Buffer<E>) -> Vec<Option<Buffer<E>>> {
        assert_eq!(
            cotangent.shape, self.nodes[out.0].value.shape,
            "cotangent shape must match output shape"
        );
        let mut grads: Vec<Option<Buffer<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(cotangent);

        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            // Leaves keep their gradient; interior nodes have propagated it.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Buffer<E>>], target: usize, delta: Buffer<E>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (a, b) in existing.data.iter_mut().zip(&delta.data) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Buffer<E>, grads: &mut [Option<Buffer<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Buffer {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&v| -v).collect(),
                };
                self.accumulate(grads, *b, neg);
            }
            Op::Scale(a, c) => {
                let d = Buffer {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&v| v * *c).collect(),
                };
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let vx = &self.nodes[*a].value;
                let data = vx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| {
                        let sig = E::ONE / (E::ONE + (-x).exp());
                        gy * sig * (E::ONE + x * (E::ONE - sig))
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vx.shape.clone(),
                        data,
                    },
                );
            }
            Op::Dense { x, w, b } => self.backprop_dense(*x, *w, *b, g, grads),
            Op::Conv2d { x, w, b, stride } => self.backprop_conv2d(*x, *w, *b, *stride, g, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.backprop_group_norm(*x, *gamma, *beta, *groups, mean, rstd, g, grads),
            Op::UpsampleNearest2x(a) => {
                let vx = &self.nodes[*a].value;
                let (c, h, w) = vx.dims3();
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![E::ZERO; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        let irow = ch * h * w + (y / 2) * w;
                        let orow = ch * ho * wo + y * wo;
                        for xcol in 0..wo {
                            dx[irow + xcol / 2] += g.data[orow + xcol];
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vec![c, h, w],
                        data: dx,
                    },
                );
            }
            Op::ConcatChan(a, b) => {
                let na = self.nodes[*a].value.numel();
                let da = Buffer {
                    shape: self.nodes[*a].value.shape.clone(),
                    data: g.data[..na].to_vec(),
                };
                let db = Buffer {
                    shape: self.nodes[*b].value.shape.clone(),
                    data: g.data[na..].to_vec(),
                };
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ChwToTokens(a) => {
                let vx = &self.nodes[*a].value;
                let (c, h, w) = vx.dims3();
                let n = h * w;
                let mut dx = vec![E::ZERO; c * n];
                for ch in 0..c {
                    for i in 0..n {
                        dx[ch * n + i] = g.data[i * c + ch];
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vec![c, h, w],
                        data: dx,
                    },
                );
            }
            Op::TokensToChw { x, c, h, w } => {
                let n = h * w;
                let mut dx = vec![E::ZERO; n * c];
                for ch in 0..*c {
                    for i in 0..n {
                        dx[i * c + ch] = g.data[ch * n + i];
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Buffer {
                        shape: vec![n, *c],
                        data: dx,
                    },
                );
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (n, m) = va.dims2();
                let (_, k) = vb.dims2();
                // da = g . b^T
                let mut da = vec![E::ZERO; n * m];
                for i in 0..n {
                    for p in 0..m {
                        let brow = &vb.data[p * k..(p + 1) * k];
                        let grow = &g.data[i * k..(i + 1) * k];
                        let mut acc = E::ZERO;
                        for j in 0..k {
                            acc += grow[j] * brow[j];
                        }
                        da[i * m + p] = acc;
                    }
                }
                // db = a^T . g
                let mut db = vec![E::ZERO; m * k];
                for i in 0..n {
                    for p in 0..m {
                        let av = va.data[i * m + p];
                        let grow = &g.data[i * k..(i + 1) * k];
                        let drow = &mut db[p * k..(p + 1) * k];
                        for j in 0..k {
                            drow[j] += av * grow[j];
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vec![n, m],
                        data: da,
                    },
                );
                self.accumulate(
                    grads,
                    *b,
                    Buffer {
                        shape: vec![m, k],
                        data: db,
                    },
                );
            }
            Op::MatMulNT(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (n, m) = va.dims2();
                let (k, _) = vb.dims2();
                // c = a b^T; da = g . b ; db = g^T . a
                let mut da = vec![E::ZERO; n * m];
                for i in 0..n {
                    for j in 0..k {
                        let gv = g.data[i * k + j];
                        let brow = &vb.data[j * m..(j + 1) * m];
                        let drow = &mut da[i * m..(i + 1) * m];
                        for p in 0..m {
                            drow[p] += gv * brow[p];
                        }
                    }
                }
                let mut db = vec![E::ZERO; k * m];
                for i in 0..n {
                    let arow = &va.data[i * m..(i + 1) * m];
                    for j in 0..k {
                        let gv = g.data[i * k + j];
                        let drow = &mut db[j * m..(j + 1) * m];
                        for p in 0..m {
                            drow[p] += gv * arow[p];
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vec![n, m],
                        data: da,
                    },
                );
                self.accumulate(
                    grads,
                    *b,
                    Buffer {
                        shape: vec![k, m],
                        data: db,
                    },
                );
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[idx].value;
                let (n, m) = p.dims2();
                let mut dx = vec![E::ZERO; n * m];
                for r in 0..n {
                    let prow = &p.data[r * m..(r + 1) * m];
                    let grow = &g.data[r * m..(r + 1) * m];
                    let mut dot = E::ZERO;
                    for j in 0..m {
                        dot += grow[j] * prow[j];
                    }
                    let drow = &mut dx[r * m..(r + 1) * m];
                    for j in 0..m {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Buffer {
                        shape: vec![n, m],
                        data: dx,
                    },
                );
            }
            Op::AddChanBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let (c, h, w) = self.nodes[*x].value.dims3();
                let mut db = vec![E::ZERO; c];
                for ch in 0..c {
                    let mut acc = E::ZERO;
                    for &v in &g.data[ch * h * w..(ch + 1) * h * w] {
                        acc += v;
                    }
                    db[ch] = acc;
                }
                self.accumulate(
                    grads,
                    *bias,
                    Buffer {
                        shape: vec![c],
                        data: db,
                    },
                );
            }
        }
    }

    fn backprop_dense(
        &self,
        x: usize,
        w: usize,
        b: usize,
        g: &Buffer<E>,
        grads: &mut [Option<Buffer<E>>],
    ) {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let (out_dim, in_dim) = vw.dims2();
        let rows = if vx.shape.len() == 1 {
            1
        } else {
            vx.shape[0]
        };

        let mut dx = vec![E::ZERO; rows * in_dim];
        let mut dw = vec![E::ZERO; out_dim * in_dim];
        let mut db = vec![E::ZERO; out_dim];
        for r in 0..rows {
            let grow = &g.data[r * out_dim..(r + 1) * out_dim];
            let xrow = &vx.data[r * in_dim..(r + 1) * in_dim];
            let dxrow = &mut dx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let gv = grow[o];
                db[o] += gv;
                let wrow = &vw.data[o * in_dim..(o + 1) * in_dim];
                let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    dxrow[i] += gv * wrow[i];
                    dwrow[i] += gv * xrow[i];
                }
            }
        }
        self.accumulate(
            grads,
            x,
            Buffer {
                shape: vx.shape.clone(),
                data: dx,
            },
        );
        self.accumulate(
            grads,
            w,
            Buffer {
                shape: vec![out_dim, in_dim],
                data: dw,
            },
        );
        self.accumulate(
            grads,
            b,
            Buffer {
                shape: vec![out_dim],
                data: db,
            },
        );
    }

    fn backprop_conv2d(
        &self,
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        g: &Buffer<E>,
        grads: &mut [Option<Buffer<E>>],
    ) {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let (cin, h, wd) = vx.dims3();
        let cout = vw.shape[0];
        let k = vw.shape[2];
        let pad = k / 2;
        let ho = g.shape[1];
        let wo = g.shape[2];

        let mut dx = vec![E::ZERO; cin * h * wd];
        let mut dw = vec![E::ZERO; cout * cin * k * k];
        let mut db = vec![E::ZERO; cout];

        for co in 0..cout {
            let obase = co * ho * wo;
            let mut acc = E::ZERO;
            for &v in &g.data[obase..obase + ho * wo] {
                acc += v;
            }
            db[co] = acc;
            for ci in 0..cin {
                let xbase = ci * h * wd;
                for ky in 0..k {
                    let (oy0, oy1) = conv_range(h, ky, pad, stride, ho);
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = vw.data[widx];
                        let (ox0, ox1) = conv_range(wd, kx, pad, stride, wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut wacc = E::ZERO;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let irow = xbase + iy * wd;
                            let orow = obase + oy * wo;
                            let ix0 = ox0 * stride + kx - pad;
                            if stride == 1 {
                                let gs = &g.data[orow + ox0..orow + ox1];
                                let xs = &vx.data[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                let ds = &mut dx[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                for ((&gv, &xv), dv) in gs.iter().zip(xs).zip(ds.iter_mut()) {
                                    wacc += gv * xv;
                                    *dv += gv * wv;
                                }
                            } else {
                                let mut ix = ix0;
                                for ox in ox0..ox1 {
                                    let gv = g.data[orow + ox];
                                    wacc += gv * vx.data[irow + ix];
                                    dx[irow + ix] += gv * wv;
                                    ix += stride;
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
        self.accumulate(
            grads,
            x,
            Buffer {
                shape: vec![cin, h, wd],
                data: dx,
            },
        );
        self.accumulate(
            grads,
            w,
            Buffer {
                shape: vw.shape.clone(),
                data: dw,
            },
        );
        self.accumulate(
            grads,
            b,
            Buffer {
                shape: vec![cout],
                data: db,
            },
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_group_norm(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: &[E],
        rstd: &[E],
        g: &Buffer<E>,
        grads: &mut [Option<Buffer<E>>],
    ) {
        let vx = &self.nodes[x].value;
        let vg = &self.nodes[gamma].value;
        let (c, h, w) = vx.dims3();
        let cs = c / groups;
        let hw = h * w;
        let gn = cs * hw;
        let inv_n = E::from_f64(1.0 / gn as f64);

        let mut dx = vec![E::ZERO; c * hw];
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];

        for grp in 0..groups {
            let mu = mean[grp];
            let rs = rstd[grp];
            // First pass: per-channel gamma/beta grads and group reductions.
            let mut sum_dxhat = E::ZERO;
            let mut sum_dxhat_xhat = E::ZERO;
            for ci in 0..cs {
                let ch = grp * cs + ci;
                let gam = vg.data[ch];
                let cbase = ch * hw;
                let mut dg = E::ZERO;
                let mut dbt = E::ZERO;
                for i in 0..hw {
                    let xhat = (vx.data[cbase + i] - mu) * rs;
                    let gy = g.data[cbase + i];
                    dg += gy * xhat;
                    dbt += gy;
                    let dxhat = gy * gam;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            // Second pass: dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)).
            let mean_dxhat = sum_dxhat * inv_n;
            let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
            for ci in 0..cs {
                let ch = grp * cs + ci;
                let gam = vg.data[ch];
                let cbase = ch * hw;
                for i in 0..hw {
                    let xhat = (vx.data[cbase + i] - mu) * rs;
                    let dxhat = g.data[cbase + i] * gam;
                    dx[cbase + i] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        self.accumulate(
            grads,
            x,
            Buffer {
                shape: vec![c, h, w],
                data: dx,
            },
        );
        self.accumulate(
            grads,
            gamma,
            Buffer {
                shape: vec![c],
                data: dgamma,
            },
        );
        self.accumulate(
            grads,
            beta,
            Buffer {
                shape: vec![c],
                data: dbeta,
            },
        );
    }
}
