//! The vector-field regressor `v_theta(t, x, z)`: a small U-Net with
//! sinusoidal time embedding, residual blocks, optional bottom-level
//! self-attention, and conditioning by channel concatenation of `z`.

use std::collections::HashMap;

use thiserror::Error;

use super::tape::{Buffer, Tape, Var};
use super::Scalar;
use crate::tensor::{RngStream, Tensor};

/// Training time lives in [0,1]; the embedding sees `t * TIME_EMBED_SCALE`
/// so the sinusoid bank resolves fine time differences.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("input x has shape {got:?}, expected ({want_c}, h, w)")]
    BadInputShape { got: Vec<usize>, want_c: usize },
    #[error("conditioning z has shape {got:?}, expected ({want_c}, {h}, {w})")]
    BadCondShape {
        got: Vec<usize>,
        want_c: usize,
        h: usize,
        w: usize,
    },
    #[error("conditioning required ({0} channels) but z was not provided")]
    MissingCond(usize),
    #[error("z provided but the architecture is unconditional")]
    UnexpectedCond,
    #[error("spatial dims {h}x{w} not divisible by {div} (levels = {levels})")]
    SpatialNotDivisible {
        h: usize,
        w: usize,
        div: usize,
        levels: usize,
    },
    #[error("parameter {name}: shape {got:?} does not match expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("non-finite output at flat index {0}")]
    NonFiniteOutput(usize),
}

/// Architecture hyperparameters. All comparison models are built from one
/// of these so their capacity is identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Channels of the state tensor x (equals output channels).
    pub in_channels_x: usize,
    /// Channels of the conditioning z; 0 means unconditional.
    pub in_channels_z: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    /// Self-attention at the lowest resolution.
    pub attn_at_bottom: bool,
    pub time_embed_dim: usize,
    /// Preferred group count for group norm; reduced to a divisor per layer.
    pub norm_groups: usize,
}

impl ArchConfig {
    /// Default latent-upsampler configuration: 4-channel latents plus
    /// 4-channel conditioning.
    pub fn latent_default() -> Self {
        Self {
            in_channels_x: 4,
            in_channels_z: 4,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            blocks_per_level: 2,
            attn_at_bottom: true,
            time_embed_dim: 128,
            norm_groups: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

fn gn_groups(preferred: usize, channels: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Ordered name -> tensor map holding all learnable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, NetError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NetError::DuplicateParam(name));
        }
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Replaces an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), NetError> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        if self.tensors[idx].shape() != tensor.shape() {
            return Err(NetError::ParamShape {
                name: name.to_string(),
                got: tensor.shape().to_vec(),
                want: self.tensors[idx].shape().to_vec(),
            });
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct GnIdx {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResIdx {
    gn1: GnIdx,
    conv1: ConvIdx,
    temb: DenseIdx,
    gn2: GnIdx,
    conv2: ConvIdx,
    skip: Option<ConvIdx>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    gn: GnIdx,
    q: DenseIdx,
    k: DenseIdx,
    v: DenseIdx,
    proj: DenseIdx,
}

#[derive(Debug, Clone)]
enum Stage {
    Res(ResIdx),
    Down(ConvIdx),
    Attn(AttnIdx),
    Upsample(ConvIdx),
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: ConvIdx,
    temb1: DenseIdx,
    temb2: DenseIdx,
    down: Vec<Stage>,
    mid: Vec<Stage>,
    up: Vec<Stage>,
    out_gn: GnIdx,
    out_conv: ConvIdx,
}

enum Init {
    FanIn,
    Zero,
    One,
}

struct Builder {
    params: ParamStore,
    rng: RngStream,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, init: Init, fan_in: usize) -> usize {
        let t = match init {
            Init::Zero => Tensor::zeros(shape).unwrap(),
            Init::One => Tensor::full(shape, 1.0).unwrap(),
            Init::FanIn => {
                let std = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    // Truncated normal: resample outside +-2 std.
                    let v = loop {
                        let z = self.rng.normal_f64();
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    };
                    data.push(v as f32);
                }
                Tensor::new(shape, data).unwrap()
            }
        };
        self.params.insert(name, t).expect("unique names by construction")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> ConvIdx {
        let init = if zero { Init::Zero } else { Init::FanIn };
        let w = self.tensor(&format!("{name}.w"), vec![cout, cin, k, k], init, cin * k * k);
        let b = self.tensor(&format!("{name}.b"), vec![cout], Init::Zero, 1);
        ConvIdx { w, b, stride }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> DenseIdx {
        let init = if zero { Init::Zero } else { Init::FanIn };
        let w = self.tensor(&format!("{name}.w"), vec![dout, din], init, din);
        let b = self.tensor(&format!("{name}.b"), vec![dout], Init::Zero, 1);
        DenseIdx { w, b }
    }

    fn gn(&mut self, name: &str, ch: usize, preferred_groups: usize) -> GnIdx {
        let gamma = self.tensor(&format!("{name}.g"), vec![ch], Init::One, 1);
        let beta = self.tensor(&format!("{name}.b"), vec![ch], Init::Zero, 1);
        GnIdx {
            gamma,
            beta,
            groups: gn_groups(preferred_groups, ch),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> ResIdx {
        let gn1 = self.gn(&format!("{name}.norm1"), cin, groups);
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false);
        let temb = self.dense(&format!("{name}.temb"), temb_dim, cout, false);
        let gn2 = self.gn(&format!("{name}.norm2"), cout, groups);
        // Zero-init second conv: the block starts as identity.
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true);
        let skip = if cin != cout {
            Some(self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false))
        } else {
            None
        };
        ResIdx {
            gn1,
            conv1,
            temb,
            gn2,
            conv2,
            skip,
        }
    }

    fn attn(&mut self, name: &str, ch: usize, groups: usize) -> AttnIdx {
        let gn = self.gn(&format!("{name}.norm"), ch, groups);
        let q = self.dense(&format!("{name}.q"), ch, ch, false);
        let k = self.dense(&format!("{name}.k"), ch, ch, false);
        let v = self.dense(&format!("{name}.v"), ch, ch, false);
        let proj = self.dense(&format!("{name}.proj"), ch, ch, true);
        AttnIdx { gn, q, k, v, proj }
    }
}

/// Sinusoidal embedding of a (scaled) time scalar: `dim/2` sine components
/// followed by `dim/2` cosines with geometrically spaced frequencies.
pub fn time_embedding(t_scaled: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000.0f64).ln() * i as f64 / (half as f64 - 1.0)).exp()
        } else {
            1.0
        };
        out[i] = (t_scaled * freq).sin();
        out[half + i] = (t_scaled * freq).cos();
    }
    out
}

/// Parameterized vector field `v_theta(t, x, z)`.
#[derive(Debug, Clone)]
pub struct VectorFieldNet {
    config: ArchConfig,
    params: ParamStore,
    layout: Layout,
}

impl VectorFieldNet {
    pub fn new(config: ArchConfig, init_seed: u64) -> Self {
        assert!(config.base_channels > 0 && !config.channel_mults.is_empty());
        assert!(config.time_embed_dim >= 2 && config.time_embed_dim.is_multiple_of(2));
        let mut b = Builder {
            params: ParamStore::new(),
            rng: RngStream::new(init_seed, 0),
        };
        let cfg = &config;
        let cx = cfg.in_channels_x;
        let cz = cfg.in_channels_z;
        let base = cfg.base_channels;
        let levels = cfg.levels();
        let td = cfg.time_embed_dim;
        let ng = cfg.norm_groups;

        let conv_in = b.conv("conv_in", cx + cz, base, 3, 1, false);
        let temb1 = b.dense("temb.0", td, td, false);
        let temb2 = b.dense("temb.1", td, td, false);

        let mut down = Vec::new();
        let mut skip_ch = vec![base];
        let mut ch = base;
        for (l, &m) in cfg.channel_mults.iter().enumerate() {
            let out_ch = base * m;
            for bi in 0..cfg.blocks_per_level {
                down.push(Stage::Res(b.res(
                    &format!("down.{l}.{bi}"),
                    ch,
                    out_ch,
                    td,
                    ng,
                )));
                ch = out_ch;
                skip_ch.push(ch);
            }
            if l + 1 < levels {
                down.push(Stage::Down(b.conv(
                    &format!("down.{l}.pool"),
                    ch,
                    ch,
                    3,
                    2,
                    false,
                )));
                skip_ch.push(ch);
            }
        }

        let mut mid = Vec::new();
        mid.push(Stage::Res(b.res("mid.0", ch, ch, td, ng)));
        if cfg.attn_at_bottom {
            mid.push(Stage::Attn(b.attn("mid.attn", ch, ng)));
        }
        mid.push(Stage::Res(b.res("mid.1", ch, ch, td, ng)));

        let mut up = Vec::new();
        for (l, &m) in cfg.channel_mults.iter().enumerate().rev() {
            let out_ch = base * m;
            for bi in 0..cfg.blocks_per_level + 1 {
                let skip = skip_ch.pop().expect("skip stack balanced");
                up.push(Stage::Res(b.res(
                    &format!("up.{l}.{bi}"),
                    ch + skip,
                    out_ch,
                    td,
                    ng,
                )));
                ch = out_ch;
            }
            if l > 0 {
                up.push(Stage::Upsample(b.conv(
                    &format!("up.{l}.upconv"),
                    ch,
                    ch,
                    3,
                    1,
                    false,
                )));
            }
        }
        debug_assert!(skip_ch.is_empty());

        let out_gn = b.gn("out.norm", ch, ng);
        // Zero-init head: v_theta is exactly zero at initialization.
        let out_conv = b.conv("out.conv", ch, cx, 3, 1, true);

        Self {
            config,
            params: b.params,
            layout: Layout {
                conv_in,
                temb1,
                temb2,
                down,
                mid,
                up,
                out_gn,
                out_conv,
            },
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn validate(&self, t: f64, x: &Tensor, z: Option<&Tensor>) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(NetError::TimeOutOfRange(t));
        }
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[0] != cfg.in_channels_x {
            return Err(NetError::BadInputShape {
                got: x.shape().to_vec(),
                want_c: cfg.in_channels_x,
            });
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        match (cfg.in_channels_z, z) {
            (0, None) => {}
            (0, Some(_)) => return Err(NetError::UnexpectedCond),
            (cz, None) => return Err(NetError::MissingCond(cz)),
            (cz, Some(zt)) => {
                if zt.rank() != 3
                    || zt.shape()[0] != cz
                    || zt.shape()[1] != h
                    || zt.shape()[2] != w
                {
                    return Err(NetError::BadCondShape {
                        got: zt.shape().to_vec(),
                        want_c: cz,
                        h,
                        w,
                    });
                }
            }
        }
        let div = cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(NetError::SpatialNotDivisible {
                h,
                w,
                div,
                levels: cfg.levels(),
            });
        }
        Ok(())
    }

    /// Records a forward pass on a fresh tape; gradients can then be pulled
    /// with [`ForwardPass::backward`].
    pub fn forward_pass<E: Scalar>(
        &self,
        t: f64,
        x: &Tensor,
        z: Option<&Tensor>,
    ) -> Result<ForwardPass<E>, NetError> {
        self.validate(t, x, z)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let mut tape: Tape<E> = Tape::new();

        let param_vars: Vec<Var> = (0..self.params.len())
            .map(|i| tape.leaf(Buffer::from_tensor(self.params.get(i)), true))
            .collect();
        let pv = |idx: usize| param_vars[idx];

        // Time embedding MLP: dense -> silu -> dense, then silu once more
        // before the per-block projections.
        let emb = time_embedding(t * TIME_EMBED_SCALE, cfg.time_embed_dim);
        let emb_buf = Buffer {
            shape: vec![cfg.time_embed_dim],
            data: emb.iter().map(|&v| E::from_f64(v)).collect(),
        };
        let emb_v = tape.constant(emb_buf);
        let h1 = tape.dense(emb_v, pv(lay.temb1.w), pv(lay.temb1.b));
        let h1 = tape.silu(h1);
        let temb = tape.dense(h1, pv(lay.temb2.w), pv(lay.temb2.b));
        let temb_act = tape.silu(temb);

        let x_v = tape.constant(Buffer::from_tensor(x));
        let input = match z {
            Some(zt) => {
                let z_v = tape.constant(Buffer::from_tensor(zt));
                tape.concat_chan(x_v, z_v)
            }
            None => x_v,
        };

        let apply_res = |tape: &mut Tape<E>, r: &ResIdx, h: Var, temb_act: Var| -> Var {
            let a = tape.group_norm(h, pv(r.gn1.gamma), pv(r.gn1.beta), r.gn1.groups, 1e-5);
            let a = tape.silu(a);
            let a = tape.conv2d(a, pv(r.conv1.w), pv(r.conv1.b), 1);
            let tp = tape.dense(temb_act, pv(r.temb.w), pv(r.temb.b));
            let a = tape.add_chan_bias(a, tp);
            let o = tape.group_norm(a, pv(r.gn2.gamma), pv(r.gn2.beta), r.gn2.groups, 1e-5);
            let o = tape.silu(o);
            let o = tape.conv2d(o, pv(r.conv2.w), pv(r.conv2.b), 1);
            let skip = match &r.skip {
                Some(s) => tape.conv2d(h, pv(s.w), pv(s.b), 1),
                None => h,
            };
            tape.add(skip, o)
        };
        let apply_attn = |tape: &mut Tape<E>, a: &AttnIdx, h: Var| -> Var {
            let shape = tape.value(h).shape.clone();
            let (c, hh, ww) = (shape[0], shape[1], shape[2]);
            let n = tape.group_norm(h, pv(a.gn.gamma), pv(a.gn.beta), a.gn.groups, 1e-5);
            let tok = tape.chw_to_tokens(n);
            let q = tape.dense(tok, pv(a.q.w), pv(a.q.b));
            let k = tape.dense(tok, pv(a.k.w), pv(a.k.b));
            let v = tape.dense(tok, pv(a.v.w), pv(a.v.b));
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, E::from_f64(1.0 / (c as f64).sqrt()));
            let p = tape.softmax_rows(scores);
            let o = tape.matmul(p, v);
            let o = tape.dense(o, pv(a.proj.w), pv(a.proj.b));
            let o = tape.tokens_to_chw(o, hh, ww);
            tape.add(h, o)
        };

        let mut h = tape.conv2d(input, pv(lay.conv_in.w), pv(lay.conv_in.b), 1);
        let mut skips = vec![h];
        for stage in &lay.down {
            match stage {
                Stage::Res(r) => {
                    h = apply_res(&mut tape, r, h, temb_act);
                    skips.push(h);
                }
                Stage::Down(c) => {
                    h = tape.conv2d(h, pv(c.w), pv(c.b), c.stride);
                    skips.push(h);
                }
                _ => unreachable!("down path has only res/down stages"),
            }
        }
        for stage in &lay.mid {
            match stage {
                Stage::Res(r) => h = apply_res(&mut tape, r, h, temb_act),
                Stage::Attn(a) => h = apply_attn(&mut tape, a, h),
                _ => unreachable!("mid path has only res/attn stages"),
            }
        }
        for stage in &lay.up {
            match stage {
                Stage::Res(r) => {
                    let skip = skips.pop().expect("skip stack balanced");
                    let cat = tape.concat_chan(h, skip);
                    h = apply_res(&mut tape, r, cat, temb_act);
                }
                Stage::Upsample(c) => {
                    h = tape.upsample_nearest_2x(h);
                    h = tape.conv2d(h, pv(c.w), pv(c.b), c.stride);
                }
                _ => unreachable!("up path has only res/upsample stages"),
            }
        }
        debug_assert!(skips.is_empty());

        let o = tape.group_norm(h, pv(lay.out_gn.gamma), pv(lay.out_gn.beta), lay.out_gn.groups, 1e-5);
        let o = tape.silu(o);
        let out = tape.conv2d(o, pv(lay.out_conv.w), pv(lay.out_conv.b), 1);

        Ok(ForwardPass {
            tape,
            out,
            param_vars,
        })
    }

    /// Plain inference: evaluates the field and discards the tape.
    pub fn forward(&self, t: f64, x: &Tensor, z: Option<&Tensor>) -> Result<Tensor, NetError> {
        let pass: ForwardPass<f32> = self.forward_pass(t, x, z)?;
        let out = pass.output();
        if let Some(i) = out.data().iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteOutput(i));
        }
        Ok(out)
    }
}

/// A recorded forward pass: holds the tape until gradients are requested.
pub struct ForwardPass<E: Scalar> {
    tape: Tape<E>,
    out: Var,
    param_vars: Vec<Var>,
}

impl<E: Scalar> ForwardPass<E> {
    pub fn output(&self) -> Tensor {
        self.tape.value(self.out).to_tensor()
    }

    pub fn output_buffer(&self) -> &Buffer<E> {
        self.tape.value(self.out)
    }

    /// Reverse sweep seeded with the loss cotangent (dL/d output).
    pub fn backward(&self, cotangent: &Buffer<E>) -> GradStore<E> {
        let grads = self.tape.backward(self.out, cotangent.clone());
        let per_param = self
            .param_vars
            .iter()
            .map(|v| {
                grads[v.0].clone().unwrap_or_else(|| {
                    Buffer::zeros(self.tape.value(*v).shape.clone())
                })
            })
            .collect();
        GradStore { grads: per_param }
    }
}

/// Gradients aligned with [`ParamStore`] insertion order.
#[derive(Debug, Clone)]
pub struct GradStore<E> {
    grads: Vec<Buffer<E>>,
}

impl<E: Scalar> GradStore<E> {
    /// All-zero gradients shaped like the given parameters.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let grads = (0..params.len())
            .map(|i| Buffer::zeros(params.get(i).shape().to_vec()))
            .collect();
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Buffer<E> {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Buffer<E> {
        &mut self.grads[idx]
    }

    /// Elementwise in-place accumulation for batch reduction in fixed order.
    pub fn accumulate(&mut self, other: &GradStore<E>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale_all(&mut self, factor: E) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v = *v * factor;
            }
        }
    }
}
