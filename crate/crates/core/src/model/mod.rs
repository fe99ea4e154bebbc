//! Network assembly: channel attention, residual blocks and the full demosaicer.

mod ablation;
mod block;
mod ca;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_shape, Result};
use crate::params::{kaiming_uniform, trunc_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

pub use ablation::{ablation_reference, ablation_variants, AblationGrid, AblationVariant};
pub use block::Rstcab;
pub use ca::ChannelAttention;
pub use config::{CaMode, ModelConfig};

/// A 3x3 (or other odd) same-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d {
            weight: store.add(format!("{prefix}.weight"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([cout])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.weight], Some(bound[self.bias]), Padding::Same)
    }
}

/// `[B, H·W, C] -> [B, C, H, W]`.
pub fn tokens_to_nchw<T: Scalar>(tape: &mut Tape<T>, x: Var, dims: (usize, usize)) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != dims.0 * dims.1 {
        return Err(invalid_shape("tokens_to_nchw", format!("{xs:?} is not a {}x{} token grid", dims.0, dims.1)));
    }
    let t = tape.reshape(x, [xs[0], dims.0, dims.1, xs[2]])?;
    tape.permute(t, &[0, 3, 1, 2])
}

/// `[B, C, H, W] -> [B, H·W, C]`.
pub fn nchw_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(invalid_shape("nchw_to_tokens", format!("expected [B,C,H,W], got {xs:?}")));
    }
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(t, [xs[0], xs[2] * xs[3], xs[1]])
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let i = i % period;
    if i < n {
        i
    } else {
        period - i
    }
}

/// Reflect-pads the last two dims on the bottom and right up to multiples of
/// `multiple`. Reflection moves samples by even offsets, so a Bayer phase is kept.
pub fn reflect_pad_to(x: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 || multiple == 0 {
        return Err(invalid_shape("reflect_pad", format!("cannot pad {s:?} to a multiple of {multiple}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let planes = x.numel() / (h * w);
    let src = x.data();
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        for y in 0..ph {
            let row = &src[(p * h + reflect(y, h)) * w..][..w];
            out.extend((0..pw).map(|xx| row[reflect(xx, w)]));
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ph;
    shape[n - 1] = pw;
    Tensor::new(shape, out)
}

/// Keeps the top-left `h x w` region of the last two dims.
pub fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let n = s.len();
    if n < 2 || s[n - 2] < h || s[n - 1] < w {
        return Err(invalid_shape("crop", format!("cannot crop {s:?} to {h}x{w}")));
    }
    let (sh, sw) = (s[n - 2], s[n - 1]);
    let planes = x.numel() / (sh * sw).max(1);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            out.extend_from_slice(&x.data()[(p * sh + y) * sw..][..w]);
        }
    }
    let mut shape = s.to_vec();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out)
}

/// The full demosaicing network and its parameters.
#[derive(Clone, Debug)]
pub struct RstcaNet {
    config: ModelConfig,
    store: ParamStore,
    pub embed_weight: ParamId,
    pub embed_bias: ParamId,
    pub blocks: Vec<Rstcab>,
    pub dfe: Vec<Conv2d>,
    pub recon_up: Conv2d,
    pub recon_convs: [Conv2d; 2],
}

impl RstcaNet {
    /// Builds and initialises a network; the same seed gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let r2 = config.unshuffle * config.unshuffle;
        let embed_weight = store.add("embed.weight", trunc_normal(&[r2, c], 0.02, &mut rng));
        let embed_bias = store.add("embed.bias", Tensor::zeros([c]));
        let blocks = (0..config.blocks)
            .map(|k| Rstcab::new(&mut store, &format!("blocks.{k}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dfe = (0..config.conv_in_dfe)
            .map(|i| Conv2d::new(&mut store, &format!("dfe.conv.{i}"), c, c, 3, &mut rng))
            .collect();
        let recon_up = Conv2d::new(&mut store, "recon.up", c, 3 * r2, 3, &mut rng);
        let recon_convs = [
            Conv2d::new(&mut store, "recon.conv.0", 3, 3, 3, &mut rng),
            Conv2d::new(&mut store, "recon.conv.1", 3, 3, 3, &mut rng),
        ];
        Ok(RstcaNet {
            config,
            store,
            embed_weight,
            embed_bias,
            blocks,
            dfe,
            recon_up,
            recon_convs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Names of parameters in the deep module (blocks and the trailing convs).
    pub fn is_deep_param(name: &str) -> bool {
        name.starts_with("blocks.") || name.starts_with("dfe.")
    }

    /// Mosaic `[B,1,H,W]` to tokens `[B, (H/2)·(W/2), C]` and the token grid size.
    pub fn shallow_extract<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mosaic: Var,
    ) -> Result<(Var, (usize, usize))> {
        let ms = tape.shape(mosaic).to_vec();
        let r = self.config.unshuffle;
        if ms.len() != 4 || ms[1] != 1 || ms[2] % r != 0 || ms[3] % r != 0 {
            return Err(invalid_shape("shallow_extract", format!("expected [B,1,H,W] with even H,W, got {ms:?}")));
        }
        let dims = (ms[2] / r, ms[3] / r);
        let packed = tape.pixel_unshuffle(mosaic, r)?;
        let t = tape.permute(packed, &[0, 2, 3, 1])?;
        let t = tape.reshape(t, [ms[0], dims.0 * dims.1, r * r])?;
        let t = tape.linear(t, bound[self.embed_weight], Some(bound[self.embed_bias]))?;
        Ok((t, dims))
    }

    /// Residual blocks and trailing convs; tokens in, `[B,C,h,w]` out.
    pub fn deep<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, s: Var, dims: (usize, usize)) -> Result<Var> {
        let mut x = s;
        for block in &self.blocks {
            x = block.forward(tape, bound, x, dims)?;
            tape.release_except(&[x]);
        }
        let mut f = tokens_to_nchw(tape, x, dims)?;
        for conv in &self.dfe {
            f = conv.forward(tape, bound, f)?;
        }
        Ok(f)
    }

    /// `[B,C,h,w]` features to `[B,3,2h,2w]` RGB, unclamped.
    pub fn reconstruct<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, feat: Var) -> Result<Var> {
        let t = self.recon_up.forward(tape, bound, feat)?;
        let t = tape.pixel_shuffle(t, self.config.unshuffle)?;
        let t = self.recon_convs[0].forward(tape, bound, t)?;
        self.recon_convs[1].forward(tape, bound, t)
    }

    /// Training-mode forward of an already padded mosaic `[B,1,H,W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, mosaic: Var) -> Result<Var> {
        let (s, dims) = self.shallow_extract(tape, bound, mosaic)?;
        let m = self.config.window;
        if dims.0 % m != 0 || dims.1 % m != 0 {
            return Err(invalid_shape(
                "forward",
                format!("token grid {}x{} is not a multiple of window {m}; pad the input", dims.0, dims.1),
            ));
        }
        tape.pin(s);
        let d = self.deep(tape, bound, s, dims)?;
        let s = tokens_to_nchw(tape, s, dims)?;
        let feat = tape.add(s, d)?;
        self.reconstruct(tape, bound, feat)
    }

    /// Demosaics `[B,1,H,W]` of any size: reflect-pads to the window grid,
    /// runs the network without gradients, crops back and clamps to `[0,1]`.
    pub fn infer(&self, mosaic: &Tensor<f32>) -> Result<Tensor<f32>> {
        let ms = mosaic.shape();
        if ms.len() != 4 || ms[1] != 1 {
            return Err(invalid_shape("infer", format!("expected [B,1,H,W], got {ms:?}")));
        }
        let (h, w) = (ms[2], ms[3]);
        let padded = reflect_pad_to(mosaic, self.config.pad_multiple())?;
        let mut tape = Tape::<f32>::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(padded);
        let out = self.forward(&mut tape, &bound, x)?;
        let out = crop(tape.value(out), h, w)?;
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Byte size of an equivalent framework state dict for a given training
    /// patch size: 4 bytes per parameter plus, per Swin layer, an int64
    /// relative-position index (`M^4` entries) and, per shifted layer, an
    /// `f32` attention mask for the training token grid.
    pub fn state_dict_bytes(&self, patch: usize) -> usize {
        let cfg = &self.config;
        let m = cfg.window;
        let grid = patch / cfg.unshuffle;
        let windows = (grid / m) * (grid / m);
        let mut bytes = 4 * self.param_count();
        for block in &self.blocks {
            for (i, _) in block.stls.iter().enumerate() {
                bytes += 8 * m.pow(4);
                if crate::swin::WindowSpec::for_layer(m, i).effective_shift(grid, grid) > 0 {
                    bytes += 4 * windows * m.pow(4);
                }
            }
        }
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<_> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_keeps_parity_and_crop_inverts() {
        let x = Tensor::from_fn([1, 1, 3, 5], |i| i as f32);
        let p = reflect_pad_to(&x, 4).unwrap();
        assert_eq!(p.shape(), [1, 1, 4, 8]);
        let (h, w) = (4, 8);
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = (reflect(y, 3), reflect(xx, 5));
                assert_eq!((sy % 2, sx % 2), (y % 2, xx % 2));
                assert_eq!(p.data()[y * w + xx], x.data()[sy * 5 + sx]);
            }
        }
        assert_eq!(crop(&p, 3, 5).unwrap(), x);
    }
}
