//! Analytic `f32` gradients against central differences of the `f64` forward.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstca_core::model::{ChannelAttention, Rstcab};
use rstca_core::swin::{attention_mask, stl_forward, window_msa, StlParams, WindowSpec};
use rstca_core::tensor::{check_gradients, Padding, ScalarGraph};
use rstca_core::{CaMode, ModelConfig, ParamStore, Result, RstcaNet, Scalar, Tape, Tensor, Var};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out * weights)`, a generic scalar readout of a tensor-valued graph.
fn readout<T: Scalar>(tape: &mut Tape<T>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.cast());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn assert_close(name: &str, graph: &impl ScalarGraph, inputs: &[Tensor]) {
    let check = check_gradients(graph, inputs, H).unwrap();
    println!("{name}: per-input max relative error {:?}", check.per_input);
    assert!(check.max() < TOL, "{name}: max relative error {} >= {TOL}", check.max());
}

/// A one-off graph: `$body` computes a tensor from the inputs, which is then
/// reduced by a fixed random readout.
macro_rules! graph {
    (|$tape:ident, $x:ident| $body:expr, $weights:expr) => {{
        struct G(Tensor);
        impl ScalarGraph for G {
            fn build<T: Scalar>(&self, $tape: &mut Tape<T>, $x: &[Var]) -> Result<Var> {
                let out: Var = { let r: Result<Var> = $body; r }?;
                readout($tape, out, &self.0)
            }
        }
        G($weights)
    }};
}

#[test]
fn matmul_gradients() {
    let mut r = rng(1);
    let (a, b) = (uniform(&[4, 5], -1.0, 1.0, &mut r), uniform(&[5, 3], -1.0, 1.0, &mut r));
    let g = graph!(|t, x| t.matmul(x[0], x[1]), uniform(&[4, 3], -1.0, 1.0, &mut r));
    assert_close("matmul", &g, &[a, b]);
    let (a, b) = (uniform(&[2, 3, 4], -1.0, 1.0, &mut r), uniform(&[5, 4], -1.0, 1.0, &mut r));
    let g = graph!(|t, x| t.matmul_bt(x[0], x[1]), uniform(&[2, 3, 5], -1.0, 1.0, &mut r));
    assert_close("matmul_bt broadcast", &g, &[a, b]);
}

#[test]
fn conv_gradients() {
    let mut r = rng(2);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[3], -1.0, 1.0, &mut r);
    let g = graph!(|t, x| t.conv2d(x[0], x[1], Some(x[2]), Padding::Same), uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r));
    assert_close("conv same", &g, &[x.clone(), w.clone(), b]);
    let g = graph!(|t, x| t.conv2d(x[0], x[1], None, Padding::Valid), uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut r));
    assert_close("conv valid", &g, &[x, w]);
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(3);
    let x = uniform(&[2, 3, 8], -1.0, 1.0, &mut r);
    let gamma = uniform(&[8], -1.0, 1.0, &mut r);
    let beta = uniform(&[8], -1.0, 1.0, &mut r);
    let g = graph!(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5), uniform(&[2, 3, 8], -1.0, 1.0, &mut r));
    assert_close("layer_norm", &g, &[x, gamma, beta]);
}

#[test]
fn conv_then_layer_norm_then_sum() {
    let mut r = rng(4);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let gamma = uniform(&[4], -1.0, 1.0, &mut r);
    let beta = uniform(&[4], -1.0, 1.0, &mut r);
    let g = graph!(
        |t, x| {
            let c = t.conv2d(x[0], x[1], None, Padding::Same)?;
            t.layer_norm(c, x[2], x[3], 1e-5)
        },
        Tensor::ones([1, 2, 4, 4])
    );
    assert_close("conv->layer_norm->sum", &g, &[x, w, gamma, beta]);
}

#[test]
fn pointwise_gradients() {
    let mut r = rng(5);
    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 4], -1.0, 1.0, &mut r);
    assert_close("add", &graph!(|t, x| t.add(x[0], x[1]), w.clone()), &[a.clone(), b.clone()]);
    assert_close("sub", &graph!(|t, x| t.sub(x[0], x[1]), w.clone()), &[a.clone(), b.clone()]);
    assert_close("mul", &graph!(|t, x| t.mul(x[0], x[1]), w.clone()), &[a.clone(), b.clone()]);
    assert_close("scale", &graph!(|t, x| Ok(t.scale(x[0], -1.7)), w.clone()), &[a.clone()]);
    assert_close("sigmoid", &graph!(|t, x| Ok(t.sigmoid(x[0])), w.clone()), &[a.clone()]);
    assert_close("gelu", &graph!(|t, x| Ok(t.gelu(x[0])), w.clone()), &[a.clone()]);
    // keep ReLU inputs away from the kink
    let away = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_close("relu", &graph!(|t, x| Ok(t.relu(x[0])), w.clone()), &[away]);
    assert_close("softmax", &graph!(|t, x| t.softmax_lastdim(x[0]), w), &[a]);
}

#[test]
fn reduction_gradients() {
    let mut r = rng(6);
    let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
    let g = graph!(|t, x| t.global_avg_pool(x[0]), uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut r));
    assert_close("global_avg_pool", &g, &[x.clone()]);
    let g = graph!(|t, x| t.mean_axis(x[0], 2), uniform(&[2, 3, 1, 5], -1.0, 1.0, &mut r));
    assert_close("mean_axis", &g, &[x.clone()]);
    let g = graph!(|t, x| Ok(t.mean(x[0])), Tensor::ones([]));
    assert_close("mean", &g, &[x]);
}

#[test]
fn layout_gradients() {
    let mut r = rng(7);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let g = graph!(|t, x| t.pixel_unshuffle(x[0], 2), uniform(&[1, 8, 2, 2], -1.0, 1.0, &mut r));
    assert_close("pixel_unshuffle", &g, &[x.clone()]);
    let g = graph!(|t, x| t.pixel_shuffle(x[0], 2), uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut r));
    assert_close("pixel_shuffle", &g, &[uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut r)]);
    let g = graph!(|t, x| t.permute(x[0], &[3, 1, 0, 2]), uniform(&[4, 2, 1, 4], -1.0, 1.0, &mut r));
    assert_close("permute", &g, &[x.clone()]);
    let g = graph!(|t, x| t.roll2d(x[0], 3), uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r));
    assert_close("roll2d", &g, &[x.clone()]);
    let g = graph!(|t, x| t.narrow(x[0], 2, 1, 2), uniform(&[1, 2, 2, 4], -1.0, 1.0, &mut r));
    assert_close("narrow", &g, &[x.clone()]);
    let g = graph!(|t, x| t.reshape(x[0], [8, 4]), uniform(&[8, 4], -1.0, 1.0, &mut r));
    assert_close("reshape", &g, &[x]);
    let table = uniform(&[5, 3], -1.0, 1.0, &mut r);
    let g = graph!(
        |t, x| t.gather_rows(x[0], Arc::from(vec![4usize, 0, 4, 2, 1, 1])),
        uniform(&[6, 3], -1.0, 1.0, &mut r)
    );
    assert_close("gather_rows", &g, &[table]);
}

#[test]
fn l1_gradients_away_from_zero() {
    let mut r = rng(8);
    let pred = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let target = pred.map(|v| v + if v > 0.0 { -0.3 } else { 0.25 });
    let g = graph!(|t, x| t.l1_loss(x[0], x[1]), Tensor::ones([]));
    assert_close("l1_loss", &g, &[pred, target]);
}

/// Parameters from `store` are appended after the explicit inputs.
fn with_params(explicit: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    explicit.into_iter().chain(store.iter().map(|(_, t)| t.clone())).collect()
}

fn randomize(store: &mut ParamStore, scale: f32, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
    }
}

struct Msa {
    store: ParamStore,
    p: StlParams,
    masked: bool,
    weights: Tensor,
}

impl ScalarGraph for Msa {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.store.bind_vars(inputs[1..].to_vec());
        let mask = if self.masked {
            Some(tape.constant(attention_mask(4, 4, 2, 1)?))
        } else {
            None
        };
        let out = window_msa(tape, &bound, &self.p, inputs[0], mask)?;
        readout(tape, out, &self.weights)
    }
}

#[test]
fn window_msa_gradients() {
    let mut store = ParamStore::new();
    let p = StlParams::new(&mut store, "stl", 4, 2, 2, 4, &mut rng(9)).unwrap();
    randomize(&mut store, 0.5, 10);
    let mut r = rng(11);
    let x = uniform(&[1, 4, 4], -1.0, 1.0, &mut r);
    let g = Msa { store: store.clone(), p: p.clone(), masked: false, weights: uniform(&[1, 4, 4], -1.0, 1.0, &mut r) };
    assert_close("window_msa", &g, &with_params(vec![x], &store));
    let x = uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let g = Msa { store: store.clone(), p, masked: true, weights: uniform(&[4, 4, 4], -1.0, 1.0, &mut r) };
    assert_close("window_msa masked", &g, &with_params(vec![x], &store));
}

struct Stl {
    store: ParamStore,
    p: StlParams,
    layer: usize,
    weights: Tensor,
}

impl ScalarGraph for Stl {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.store.bind_vars(inputs[1..].to_vec());
        let out = stl_forward(tape, &bound, &self.p, inputs[0], (4, 4), WindowSpec::for_layer(2, self.layer))?;
        readout(tape, out, &self.weights)
    }
}

#[test]
fn stl_gradients() {
    let mut store = ParamStore::new();
    let p = StlParams::new(&mut store, "stl", 8, 2, 2, 4, &mut rng(12)).unwrap();
    randomize(&mut store, 0.3, 13);
    let mut r = rng(14);
    for layer in [0, 1] {
        let x = uniform(&[1, 16, 8], -1.0, 1.0, &mut r);
        let g = Stl { store: store.clone(), p: p.clone(), layer, weights: uniform(&[1, 16, 8], -1.0, 1.0, &mut r) };
        assert_close(&format!("stl layer {layer}"), &g, &with_params(vec![x], &store));
    }
}

struct Ca {
    store: ParamStore,
    ca: ChannelAttention,
    weights: Tensor,
}

impl ScalarGraph for Ca {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.store.bind_vars(inputs[2..].to_vec());
        let out = self.ca.apply(tape, &bound, inputs[0], inputs[1])?;
        readout(tape, out, &self.weights)
    }
}

#[test]
fn channel_attention_gradients() {
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 8, 2, &mut rng(15));
    randomize(&mut store, 0.8, 16);
    let mut r = rng(17);
    let stats = uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut r);
    let target = uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut r);
    let g = Ca { store: store.clone(), ca, weights: uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut r) };
    assert_close("channel attention", &g, &with_params(vec![stats, target], &store));
}

struct Block {
    store: ParamStore,
    block: Rstcab,
    weights: Tensor,
}

impl ScalarGraph for Block {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.store.bind_vars(inputs[1..].to_vec());
        let out = self.block.forward(tape, &bound, inputs[0], (4, 4))?;
        readout(tape, out, &self.weights)
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 1,
        heads: 2,
        depth: 2,
        window: 2,
        reduction: 4,
        ..ModelConfig::tiny()
    }
}

#[test]
fn rstcab_gradients() {
    for (mode, short_skip) in [(CaMode::PerPair, false), (CaMode::PerLayer, true)] {
        let cfg = ModelConfig { ca_mode: mode, short_skip, ..small_config() };
        let mut store = ParamStore::new();
        let block = Rstcab::new(&mut store, "b", &cfg, &mut rng(18)).unwrap();
        randomize(&mut store, 0.3, 19);
        let mut r = rng(20);
        let x = uniform(&[1, 16, 8], -1.0, 1.0, &mut r);
        let g = Block { store: store.clone(), block, weights: uniform(&[1, 16, 8], -1.0, 1.0, &mut r) };
        assert_close(&format!("rstcab {mode}"), &g, &with_params(vec![x], &store));
    }
}

struct Net {
    net: RstcaNet,
    weights: Tensor,
}

impl ScalarGraph for Net {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let bound = self.net.params().bind_vars(inputs[1..].to_vec());
        let out = self.net.forward(tape, &bound, inputs[0])?;
        readout(tape, out, &self.weights)
    }
}

#[test]
fn full_network_gradients() {
    let mut net = RstcaNet::new(small_config(), 21).unwrap();
    randomize(net.params_mut(), 0.3, 22);
    let mut r = rng(23);
    let mosaic = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    let inputs = with_params(vec![mosaic], net.params());
    let g = Net { net, weights: uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r) };
    assert_close("full network", &g, &inputs);
}
