use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_shape, Error, Result};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

/// Squeeze-and-excitation style channel gate: pool, 1x1 down, ReLU, 1x1 up, sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ChannelAttention {
            channels,
            hidden,
            down_weight: store.add(
                format!("{prefix}.down.weight"),
                kaiming_uniform(&[hidden, channels, 1, 1], channels, rng),
            ),
            down_bias: store.add(format!("{prefix}.down.bias"), Tensor::zeros([hidden])),
            up_weight: store.add(format!("{prefix}.up.weight"), kaiming_uniform(&[channels, hidden, 1, 1], hidden, rng)),
            up_bias: store.add(format!("{prefix}.up.bias"), Tensor::zeros([channels])),
        }
    }

    /// Number of learnable scalars: `2·C·h + C + h`.
    pub fn numel(&self) -> usize {
        2 * self.channels * self.hidden + self.channels + self.hidden
    }

    /// `target * gate(stats)` on `[B,C,H,W]` feature maps.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, stats: Var, target: Var) -> Result<Var> {
        let (ss, ts) = (tape.shape(stats).to_vec(), tape.shape(target).to_vec());
        if ss.len() != 4 || ss[1] != self.channels {
            return Err(invalid_shape("channel_attention", format!("stats {ss:?} do not have {} channels", self.channels)));
        }
        if ts.len() != 4 || ts[0] != ss[0] || ts[1] != ss[1] {
            return Err(Error::ShapeMismatch { op: "channel_attention", lhs: ss, rhs: ts });
        }
        let pooled = tape.global_avg_pool(stats)?;
        let t = tape.conv2d(pooled, bound[self.down_weight], Some(bound[self.down_bias]), Padding::Valid)?;
        let t = tape.relu(t);
        let t = tape.conv2d(t, bound[self.up_weight], Some(bound[self.up_bias]), Padding::Valid)?;
        let scale = tape.sigmoid(t);
        tape.mul(target, scale)
    }

    /// Same gate on token layout `[B, L, C]`, pooling over the token axis.
    pub fn apply_tokens<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, stats: Var, target: Var) -> Result<Var> {
        let (ss, ts) = (tape.shape(stats).to_vec(), tape.shape(target).to_vec());
        if ss.len() != 3 || ss[2] != self.channels {
            return Err(invalid_shape("channel_attention", format!("stats {ss:?} do not have {} channels", self.channels)));
        }
        if ts.len() != 3 || ts[0] != ss[0] || ts[2] != ss[2] {
            return Err(Error::ShapeMismatch { op: "channel_attention", lhs: ss, rhs: ts });
        }
        let pooled = tape.mean_axis(stats, 1)?;
        let down = tape.reshape(bound[self.down_weight], [self.hidden, self.channels])?;
        let t = tape.matmul_bt(pooled, down)?;
        let t = tape.add(t, bound[self.down_bias])?;
        let t = tape.relu(t);
        let up = tape.reshape(bound[self.up_weight], [self.channels, self.hidden])?;
        let t = tape.matmul_bt(t, up)?;
        let t = tape.add(t, bound[self.up_bias])?;
        let scale = tape.sigmoid(t);
        tape.mul(target, scale)
    }
}
