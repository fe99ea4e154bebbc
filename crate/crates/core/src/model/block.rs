use rand_chacha::ChaCha8Rng;

use super::ca::ChannelAttention;
use super::config::{CaMode, ModelConfig};
use super::{nchw_to_tokens, tokens_to_nchw, Conv2d};
use crate::error::{invalid_shape, Result};
use crate::params::{Bound, ParamStore};
use crate::swin::{stl_forward, StlParams, WindowSpec};
use crate::tensor::{Scalar, Tape, Var};

/// Residual block: `depth` Swin layers with an optional shared channel gate,
/// followed by zero to two 3x3 convolutions and an outer skip.
#[derive(Clone, Debug)]
pub struct Rstcab {
    pub stls: Vec<StlParams>,
    pub ca: Option<ChannelAttention>,
    pub convs: Vec<Conv2d>,
    pub ca_mode: CaMode,
    pub short_skip: bool,
    pub window: usize,
}

impl Rstcab {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stls = (0..cfg.depth)
            .map(|i| StlParams::new(store, &format!("{prefix}.stl.{i}"), c, cfg.heads, cfg.window, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let ca = (cfg.ca_mode != CaMode::None)
            .then(|| ChannelAttention::new(store, &format!("{prefix}.ca"), c, cfg.ca_hidden(), rng));
        let convs = (0..cfg.conv_in_block)
            .map(|i| Conv2d::new(store, &format!("{prefix}.conv.{i}"), c, c, 3, rng))
            .collect();
        Ok(Rstcab {
            stls,
            ca,
            convs,
            ca_mode: cfg.ca_mode,
            short_skip: cfg.short_skip,
            window: cfg.window,
        })
    }

    fn gate<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, stats: Var, target: Var) -> Result<Var> {
        match &self.ca {
            Some(ca) => ca.apply_tokens(tape, bound, stats, target),
            None => Ok(target),
        }
    }

    /// Token features after each pair of layers (gate and short skip applied).
    pub fn pair_outputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        dims: (usize, usize),
    ) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.stls.len().div_ceil(2));
        let mut t = x;
        for (g, pair) in self.stls.chunks(2).enumerate() {
            let pair_in = t;
            for (j, stl) in pair.iter().enumerate() {
                let layer_in = t;
                t = stl_forward(tape, bound, stl, t, dims, WindowSpec::for_layer(self.window, 2 * g + j))?;
                let mut keep = vec![x, pair_in, layer_in, t];
                keep.extend(&outs);
                tape.release_except(&keep);
                if self.ca_mode == CaMode::PerLayer {
                    t = self.gate(tape, bound, layer_in, t)?;
                }
            }
            if self.ca_mode == CaMode::PerPair {
                t = self.gate(tape, bound, pair_in, t)?;
            }
            if self.short_skip {
                t = tape.add(t, pair_in)?;
            }
            outs.push(t);
        }
        Ok(outs)
    }

    /// Block body on tokens: the Swin layers with gates and short skips.
    pub fn body<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, dims: (usize, usize)) -> Result<Var> {
        let mut t = *self.pair_outputs(tape, bound, x, dims)?.last().expect("at least one layer");
        if self.ca_mode == CaMode::Single {
            t = self.gate(tape, bound, x, t)?;
        }
        Ok(t)
    }

    /// `x + conv(body(x))` on tokens `[B, H·W, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, dims: (usize, usize)) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != dims.0 * dims.1 {
            return Err(invalid_shape("rstcab", format!("tokens {xs:?} do not match a {}x{} grid", dims.0, dims.1)));
        }
        let body = self.body(tape, bound, x, dims)?;
        let body = if self.convs.is_empty() {
            body
        } else {
            let mut f = tokens_to_nchw(tape, body, dims)?;
            for conv in &self.convs {
                f = conv.forward(tape, bound, f)?;
            }
            nchw_to_tokens(tape, f)?
        };
        tape.add(x, body)
    }
}
