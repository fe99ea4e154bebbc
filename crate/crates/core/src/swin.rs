//! Window attention and the Swin transformer layer.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_shape, Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Additive value for masked attention pairs.
pub const MASK_VALUE: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

/// Window side length and cyclic shift of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::Config(format!("window spec needs M >= 1 and 0 <= shift < M, got M={window} shift={shift}")));
        }
        Ok(WindowSpec { window, shift })
    }

    /// Even layers are unshifted, odd layers shift by `M/2`.
    pub fn for_layer(window: usize, layer_index: usize) -> Self {
        let shift = if layer_index % 2 == 1 { window / 2 } else { 0 };
        WindowSpec { window, shift }
    }

    /// Shift actually applied on an `h x w` token grid. A grid no larger than
    /// one window has nothing to exchange across windows, so the shift is dropped.
    pub fn effective_shift(&self, h: usize, w: usize) -> usize {
        if h.min(w) <= self.window {
            0
        } else {
            self.shift
        }
    }
}

/// `[M², M²]` lookup into the `(2M-1)²` relative-offset bins, row-major.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            index.push(dy * side + dx);
        }
    }
    index
}

/// Learned per-head bias indexed by relative offset inside a window.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub index: Arc<[usize]>,
    pub window: usize,
    pub heads: usize,
}

impl RelativePositionBias {
    pub fn new(store: &mut ParamStore, name: &str, window: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let bins = (2 * window - 1) * (2 * window - 1);
        let table = store.add(name, trunc_normal(&[bins, heads], INIT_STD, rng));
        RelativePositionBias {
            table,
            index: relative_position_index(window).into(),
            window,
            heads,
        }
    }

    /// Bias as `[heads, M², M²]`.
    pub fn gather<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Var> {
        let n = self.window * self.window;
        let rows = tape.gather_rows(bound[self.table], self.index.clone())?;
        let rows = tape.reshape(rows, [n, n, self.heads])?;
        tape.permute(rows, &[2, 0, 1])
    }
}

/// `[B,H,W,C] -> [B·(H/M)·(W/M), M², C]`, windows in raster order.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || m == 0 || xs[1] % m != 0 || xs[2] % m != 0 {
        return Err(invalid_shape("window_partition", format!("{xs:?} is not [B,H,W,C] with H,W divisible by {m}")));
    }
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let t = tape.reshape(x, [b, h / m, m, w / m, m, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, [b * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, windows: Var, m: usize, h: usize, w: usize) -> Result<Var> {
    let ws = tape.shape(windows).to_vec();
    let per_image = if m > 0 && h % m == 0 && w % m == 0 { (h / m) * (w / m) } else { 0 };
    if ws.len() != 3 || per_image == 0 || ws[1] != m * m || ws[0] % per_image != 0 {
        return Err(invalid_shape(
            "window_reverse",
            format!("{ws:?} does not hold {m}x{m} windows of a {h}x{w} grid"),
        ));
    }
    let (b, c) = (ws[0] / per_image, ws[2]);
    let t = tape.reshape(windows, [b, h / m, w / m, m, m, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, [b, h, w, c])
}

/// Toroidal roll of `[B,H,W,C]` by `(-s, -s)`.
pub fn cyclic_shift<T: Scalar>(tape: &mut Tape<T>, x: Var, s: isize) -> Result<Var> {
    tape.roll2d(x, s)
}

/// Region of coordinate `p` on an axis of length `len` after shifting by `s`.
fn region(p: usize, len: usize, m: usize, s: usize) -> usize {
    if p < len - m {
        0
    } else if p < len - s {
        1
    } else {
        2
    }
}

/// `[nW, M², M²]` additive mask for a grid shifted by `s`: 0 inside one
/// pre-shift region, [`MASK_VALUE`] across regions. All zeros when no shift
/// is applied (`s == 0` or the grid fits in one window).
pub fn attention_mask<T: Scalar>(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor<T>> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(invalid_shape("attention_mask", format!("{h}x{w} grid is not divisible by window {m}")));
    }
    let (nwh, nww, n) = (h / m, w / m, m * m);
    let s = WindowSpec { window: m, shift: s }.effective_shift(h, w);
    let mut data = vec![T::zero(); nwh * nww * n * n];
    if s == 0 {
        return Tensor::new([nwh * nww, n, n], data);
    }
    let masked = T::from_f64(MASK_VALUE);
    for wy in 0..nwh {
        for wx in 0..nww {
            let ids: Vec<usize> = (0..n)
                .map(|t| region(wy * m + t / m, h, m, s) * 3 + region(wx * m + t % m, w, m, s))
                .collect();
            let base = (wy * nww + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if ids[i] != ids[j] {
                        data[base + i * n + j] = masked;
                    }
                }
            }
        }
    }
    Tensor::new([nwh * nww, n, n], data)
}

/// Weights of one Swin transformer layer.
#[derive(Clone, Debug)]
pub struct StlParams {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub rel_bias: RelativePositionBias,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl StlParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("channels {dim} not divisible by heads {heads}")));
        }
        if window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        let hidden = dim * mlp_ratio;
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(StlParams {
            dim,
            heads,
            hidden,
            norm1_gamma: store.add(name("norm1.gamma"), Tensor::ones([dim])),
            norm1_beta: store.add(name("norm1.beta"), Tensor::zeros([dim])),
            qkv_weight: store.add(name("attn.qkv.weight"), trunc_normal(&[dim, 3 * dim], INIT_STD, rng)),
            qkv_bias: store.add(name("attn.qkv.bias"), Tensor::zeros([3 * dim])),
            proj_weight: store.add(name("attn.proj.weight"), trunc_normal(&[dim, dim], INIT_STD, rng)),
            proj_bias: store.add(name("attn.proj.bias"), Tensor::zeros([dim])),
            rel_bias: RelativePositionBias::new(store, &name("attn.rel_bias_table"), window, heads, rng),
            norm2_gamma: store.add(name("norm2.gamma"), Tensor::ones([dim])),
            norm2_beta: store.add(name("norm2.beta"), Tensor::zeros([dim])),
            fc1_weight: store.add(name("mlp.fc1.weight"), trunc_normal(&[dim, hidden], INIT_STD, rng)),
            fc1_bias: store.add(name("mlp.fc1.bias"), Tensor::zeros([hidden])),
            fc2_weight: store.add(name("mlp.fc2.weight"), trunc_normal(&[hidden, dim], INIT_STD, rng)),
            fc2_bias: store.add(name("mlp.fc2.bias"), Tensor::zeros([dim])),
        })
    }

    pub fn window(&self) -> usize {
        self.rel_bias.window
    }
}

/// Multi-head self-attention inside each window of `windows: [nW·B, M², C]`.
///
/// `mask`, when given, is `[nW, M², M²]` and is shared by every image in the batch.
pub fn window_msa<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &StlParams,
    windows: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let ws = tape.shape(windows).to_vec();
    let m = p.window();
    if ws.len() != 3 || ws[1] != m * m || ws[2] != p.dim {
        return Err(invalid_shape("window_msa", format!("expected [nW, {}, {}], got {ws:?}", m * m, p.dim)));
    }
    let (nwb, n, c) = (ws[0], ws[1], ws[2]);
    let hd = c / p.heads;

    let qkv = tape.linear(windows, bound[p.qkv_weight], Some(bound[p.qkv_bias]))?;
    let qkv = tape.reshape(qkv, [nwb, n, 3, p.heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = |i| -> Result<Var> {
        let t = tape.narrow(qkv, 0, i, 1)?;
        tape.reshape(t, [nwb, p.heads, n, hd])
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);

    let q = tape.scale(q, (hd as f64).powf(-0.5));
    let attn = tape.matmul_bt(q, k)?;
    let bias = p.rel_bias.gather(tape, bound)?;
    let mut attn = tape.add(attn, bias)?;
    if let Some(mask) = mask {
        let ms = tape.shape(mask).to_vec();
        if ms.len() != 3 || ms[1] != n || ms[2] != n || ms[0] == 0 || nwb % ms[0] != 0 {
            return Err(invalid_shape("window_msa", format!("mask {ms:?} does not fit {nwb} windows of {n} tokens")));
        }
        let nw = ms[0];
        let mask = tape.reshape(mask, [nw, 1, n, n])?;
        let a = tape.reshape(attn, [nwb / nw, nw, p.heads, n, n])?;
        let a = tape.add(a, mask)?;
        attn = tape.reshape(a, [nwb, p.heads, n, n])?;
    }
    let attn = tape.softmax_lastdim(attn)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, [nwb, n, c])?;
    tape.linear(out, bound[p.proj_weight], Some(bound[p.proj_bias]))
}

/// One pre-norm Swin layer on tokens `x: [B, H·W, C]`.
pub fn stl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &StlParams,
    x: Var,
    dims: (usize, usize),
    spec: WindowSpec,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let (h, w) = dims;
    if xs.len() != 3 || xs[1] != h * w || xs[2] != p.dim {
        return Err(invalid_shape("stl_forward", format!("tokens {xs:?} do not match a {h}x{w} grid of {} channels", p.dim)));
    }
    if spec.window != p.window() {
        return Err(Error::Config(format!("window spec M={} but layer built for M={}", spec.window, p.window())));
    }
    let (b, c, m) = (xs[0], xs[2], spec.window);
    let shift = spec.effective_shift(h, w);

    let t = tape.layer_norm(x, bound[p.norm1_gamma], bound[p.norm1_beta], LN_EPS)?;
    let mut t = tape.reshape(t, [b, h, w, c])?;
    if shift > 0 {
        t = cyclic_shift(tape, t, shift as isize)?;
    }
    let windows = window_partition(tape, t, m)?;
    let mask = if shift > 0 {
        Some(tape.constant(attention_mask(h, w, m, shift)?))
    } else {
        None
    };
    let attended = window_msa(tape, bound, p, windows, mask)?;
    let mut t = window_reverse(tape, attended, m, h, w)?;
    if shift > 0 {
        t = cyclic_shift(tape, t, -(shift as isize))?;
    }
    let t = tape.reshape(t, [b, h * w, c])?;
    let x = tape.add(x, t)?;

    let t = tape.layer_norm(x, bound[p.norm2_gamma], bound[p.norm2_beta], LN_EPS)?;
    let t = tape.linear(t, bound[p.fc1_weight], Some(bound[p.fc1_bias]))?;
    let t = tape.gelu(t);
    let t = tape.linear(t, bound[p.fc2_weight], Some(bound[p.fc2_bias]))?;
    tape.add(x, t)
}
