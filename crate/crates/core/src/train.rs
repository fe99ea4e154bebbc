//! Adam, the step-decay schedule, checkpoints and the training loop.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::data::{BatchStream, ImageSample, PatchBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RstcaNet};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// One bias-corrected Adam update. Fails before touching any parameter if
    /// a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::ParamMismatch {
                    name: params.name(id).to_string(),
                    reason: format!("gradient shape {:?} vs parameter {:?}", g.shape(), params.get(id).shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k].data()) {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 * decay - update) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// `lr(i) = base · 0.5^floor(i / period)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub halving_period: u64,
}

impl LrSchedule {
    pub fn new(base: f64, halving_period: u64) -> Self {
        LrSchedule {
            base,
            halving_period: halving_period.max(1),
        }
    }

    /// Default schedule of a named preset.
    pub fn for_variant(name: &str) -> Result<Self> {
        let period = ModelConfig::preset_halving_period(name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}` (B, S, L, tiny)")))?;
        Ok(LrSchedule::new(1e-4, period))
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let halvings = iteration / self.halving_period;
        if halvings >= 1100 {
            return 0.0;
        }
        self.base * 0.5f64.powi(halvings as i32)
    }
}

const MAGIC: &str = "RSTCA-CHECKPOINT 1";
const END_HEADER: &str = "end_header";

/// Serialized training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub ema: Option<ParamStore>,
    pub iteration: u64,
    pub seed: u64,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape `{s}`"))))
        .collect()
}

impl Checkpoint {
    pub fn from_net(net: &RstcaNet, adam: Option<AdamState>, iteration: u64, seed: u64) -> Self {
        Checkpoint {
            config: net.config().clone(),
            params: net.params().clone(),
            adam,
            ema: None,
            iteration,
            seed,
        }
    }

    fn sections(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (format!("param {n}"), t)).collect();
        if let Some(adam) = &self.adam {
            for ((n, _), m) in self.params.iter().zip(&adam.m) {
                out.push((format!("adam_m {n}"), m));
            }
            for ((n, _), v) in self.params.iter().zip(&adam.v) {
                out.push((format!("adam_v {n}"), v));
            }
        }
        if let Some(ema) = &self.ema {
            out.extend(ema.iter().map(|(n, t)| (format!("ema {n}"), t)));
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in self.config.to_pairs() {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "iteration={}", self.iteration)?;
        writeln!(w, "seed={}", self.seed)?;
        if let Some(a) = &self.adam {
            writeln!(w, "adam_t={}", a.t)?;
            writeln!(w, "adam_beta1={:e}", a.beta1)?;
            writeln!(w, "adam_beta2={:e}", a.beta2)?;
            writeln!(w, "adam_eps={:e}", a.eps)?;
            writeln!(w, "adam_weight_decay={:e}", a.weight_decay)?;
        }
        let sections = self.sections();
        for (name, t) in &sections {
            writeln!(w, "tensor {name} {}", shape_text(t.shape()))?;
        }
        writeln!(w, "{END_HEADER}")?;
        for (_, t) in &sections {
            let mut buf = Vec::with_capacity(4 * t.numel());
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |line: &mut String| -> Result<bool> {
            line.clear();
            Ok(r.read_line(line)? > 0)
        };
        if !next_line(&mut line)? || line.trim_end() != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint header".into()));
        }
        let mut config = ModelConfig::default();
        let (mut iteration, mut seed) = (0u64, 0u64);
        let mut a: (u64, f64, f64, f64, f64) = (0, 0.9, 0.999, 1e-8, 0.0);
        let mut manifest: Vec<(String, String, Vec<usize>)> = Vec::new();
        loop {
            if !next_line(&mut line)? {
                return Err(Error::Checkpoint("header ended before `end_header`".into()));
            }
            let l = line.trim_end();
            if l == END_HEADER {
                break;
            }
            if let Some(rest) = l.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::Checkpoint(format!("bad manifest line `{l}`")));
                }
                manifest.push((parts[0].to_string(), parts[1].to_string(), parse_shape(parts[2])?));
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line `{l}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")));
            match k {
                "iteration" => iteration = int(v)?,
                "seed" => seed = int(v)?,
                "adam_t" => a.0 = int(v)?,
                "adam_beta1" => a.1 = num(v)?,
                "adam_beta2" => a.2 = num(v)?,
                "adam_eps" => a.3 = num(v)?,
                "adam_weight_decay" => a.4 = num(v)?,
                _ => {
                    if !config.set(k, v)? {
                        return Err(Error::Checkpoint(format!("unknown header key `{k}`")));
                    }
                }
            }
        }
        config.validate()?;

        let mut params = ParamStore::new();
        let (mut m, mut v, mut ema) = (Vec::new(), Vec::new(), ParamStore::new());
        for (kind, name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {kind} `{name}`")))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::new(shape, data)?;
            match kind.as_str() {
                "param" => {
                    params.add(name, t);
                }
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                "ema" => {
                    ema.add(name, t);
                }
                _ => return Err(Error::Checkpoint(format!("unknown tensor kind `{kind}`"))),
            }
        }
        let adam = if m.is_empty() {
            None
        } else {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
            }
            let (t, beta1, beta2, eps, weight_decay) = a;
            Some(AdamState { m, v, t, beta1, beta2, eps, weight_decay })
        };
        Ok(Checkpoint {
            config,
            params,
            adam,
            ema: (!ema.is_empty()).then_some(ema),
            iteration,
            seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Copies the stored parameters into `net`, failing on the first name or
    /// shape that does not match its architecture.
    pub fn load_into(&self, net: &mut RstcaNet) -> Result<()> {
        let target = net.params_mut();
        for (id, (name, t)) in target.ids().zip(self.params.iter()) {
            if target.name(id) != name {
                return Err(Error::ParamMismatch {
                    name: target.name(id).to_string(),
                    reason: format!("checkpoint has `{name}` in this position"),
                });
            }
            if target.get(id).shape() != t.shape() {
                return Err(Error::ParamMismatch {
                    name: name.to_string(),
                    reason: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), target.get(id).shape()),
                });
            }
        }
        if target.len() != self.params.len() {
            let first_missing = target
                .ids()
                .nth(self.params.len())
                .map(|id| target.name(id).to_string())
                .unwrap_or_else(|| self.params.iter().nth(target.len()).map(|(n, _)| n.to_string()).unwrap_or_default());
            return Err(Error::ParamMismatch {
                name: first_missing,
                reason: format!("checkpoint has {} tensors, model has {}", self.params.len(), target.len()),
            });
        }
        for (dst, (_, src)) in target.tensors_mut().zip(self.params.iter()) {
            *dst = src.clone();
        }
        Ok(())
    }

    /// Builds a network of the stored architecture holding the stored weights.
    pub fn to_net(&self) -> Result<RstcaNet> {
        let mut net = RstcaNet::new(self.config.clone(), self.seed)?;
        self.load_into(&mut net)?;
        Ok(net)
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub augment: bool,
    /// Save a checkpoint every this many iterations (0 only saves at the end).
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub prefetch: usize,
    pub weight_decay: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Decay of an exponential moving average of the weights; `None` disables it.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch: 16,
            patch: 64,
            seed: 0,
            schedule: LrSchedule::new(1e-4, 40_000),
            augment: true,
            checkpoint_every: 0,
            checkpoint_path: None,
            prefetch: 2,
            weight_decay: 0.0,
            clip_grad_norm: None,
            ema_decay: None,
        }
    }
}

/// A network with its optimizer state and iteration counter.
pub struct Trainer {
    pub net: RstcaNet,
    pub adam: AdamState,
    pub ema: Option<ParamStore>,
    pub iteration: u64,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(net: RstcaNet, cfg: TrainConfig) -> Self {
        let mut adam = AdamState::new(net.params());
        adam.weight_decay = cfg.weight_decay;
        let ema = cfg.ema_decay.map(|_| net.params().clone());
        Trainer {
            net,
            adam,
            ema,
            iteration: 0,
            cfg,
        }
    }

    /// Resumes from a checkpoint; batches continue from the stored iteration.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let net = ckpt.to_net()?;
        let mut t = Trainer::new(net, cfg);
        if let Some(adam) = &ckpt.adam {
            t.adam = adam.clone();
        }
        if t.ema.is_some() {
            if let Some(ema) = &ckpt.ema {
                t.ema = Some(ema.clone());
            }
        }
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_net(&self.net, Some(self.adam.clone()), self.iteration, self.cfg.seed);
        c.ema = self.ema.clone();
        c
    }

    /// Mean L1 loss of the current network on `batch`, without updating it.
    pub fn loss_on(&self, batch: &PatchBatch) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bound = self.net.params().bind_frozen(&mut tape);
        let x = tape.constant(batch.mosaics.clone());
        let y = tape.constant(batch.targets.clone());
        let out = self.net.forward(&mut tape, &bound, x)?;
        let loss = tape.l1_loss(out, y)?;
        tape.value(loss).item()
    }

    /// One optimisation step; returns the loss before the update.
    pub fn step(&mut self, batch: &PatchBatch) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let bound = self.net.params().bind(&mut tape);
        let x = tape.constant(batch.mosaics.clone());
        let y = tape.constant(batch.targets.clone());
        let out = self.net.forward(&mut tape, &bound, x)?;
        let loss = tape.l1_loss(out, y)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration, value });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| tape.grad(v).cloned().expect("parameter leaf has a gradient"))
            .collect();
        drop(tape);
        if let Some(max) = self.cfg.clip_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.cfg.schedule.lr_at(self.iteration);
        self.adam.step(self.net.params_mut(), &grads, lr)?;
        if let (Some(ema), Some(d)) = (&mut self.ema, self.cfg.ema_decay) {
            for (e, (_, p)) in ema.tensors_mut().zip(self.net.params().iter()) {
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = (d * *a as f64 + (1.0 - d) * b as f64) as f32;
                }
            }
        }
        self.iteration += 1;
        Ok(value)
    }

    fn save(&self) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Trains on random patches of `dataset` until `cfg.iterations`, calling
    /// `on_loss(iteration, loss)` after every step. On a non-finite loss the
    /// last saved checkpoint is left untouched and the error is returned.
    pub fn run(&mut self, dataset: Arc<Vec<ImageSample>>, mut on_loss: impl FnMut(u64, f32)) -> Result<()> {
        let total = self.cfg.iterations;
        if self.iteration >= total {
            return self.save();
        }
        let stream = BatchStream::spawn(
            dataset,
            self.cfg.batch,
            self.cfg.patch,
            self.cfg.augment,
            self.cfg.seed,
            self.iteration..total,
            self.cfg.prefetch,
        );
        for batch in stream {
            let it = self.iteration;
            let loss = self.step(&batch?)?;
            on_loss(it, loss);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < total {
                self.save()?;
            }
        }
        self.save()
    }
}

/// `iteration,loss` CSV of a loss log.
pub fn loss_csv(log: &[(u64, f32)]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in log {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}
