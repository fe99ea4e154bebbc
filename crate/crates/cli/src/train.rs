use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use rstca_core::data::load_dir;
use rstca_core::train::{loss_csv, Checkpoint, LrSchedule, TrainConfig, Trainer};
use rstca_core::{ModelConfig, RstcaNet};

use crate::args::TrainArgs;
use crate::{dataset_dir, echo_config, model_entries, Usage};

fn resolved_entries(a: &TrainArgs, model: &ModelConfig, period: u64, dataset: &Path) -> Vec<(String, String)> {
    let mut e = vec![
        ("variant".to_string(), a.model.variant.clone()),
        ("dataset".into(), dataset.display().to_string()),
        ("out".into(), a.out.display().to_string()),
        ("iters".into(), a.iters.to_string()),
        ("seed".into(), a.seed.to_string()),
        ("batch".into(), a.batch.to_string()),
        ("patch".into(), a.patch.to_string()),
        ("lr".into(), format!("{:e}", a.lr)),
        ("halving_period".into(), period.to_string()),
        ("checkpoint_every".into(), a.checkpoint_every.to_string()),
        ("no_augment".into(), a.no_augment.to_string()),
        ("prefetch".into(), a.prefetch.to_string()),
        ("weight_decay".into(), a.weight_decay.to_string()),
        ("log_every".into(), a.log_every.to_string()),
    ];
    if let Some(v) = a.clip_grad_norm {
        e.push(("clip_grad_norm".into(), v.to_string()));
    }
    if let Some(v) = a.ema_decay {
        e.push(("ema_decay".into(), v.to_string()));
    }
    if let Some(p) = &a.resume {
        e.push(("resume".into(), p.display().to_string()));
    }
    e.extend(model_entries(model));
    e
}

fn append_losses(path: &Path, log: &[(u64, f32)], fresh: bool) -> Result<()> {
    let csv = loss_csv(log);
    if fresh || !path.exists() {
        std::fs::write(path, csv)?;
    } else {
        let mut f = OpenOptions::new().append(true).open(path)?;
        f.write_all(csv.split_once('\n').map_or("", |(_, rows)| rows).as_bytes())?;
    }
    Ok(())
}

pub fn run(a: TrainArgs) -> Result<()> {
    let model = a.model.resolve()?;
    let dir = dataset_dir(&a.dataset)?;
    if a.patch == 0 || a.patch % 2 != 0 || a.batch == 0 {
        return Err(Usage(format!("--patch must be even and positive and --batch positive (got {} and {})", a.patch, a.batch)).into());
    }
    let period = match a.halving_period {
        Some(p) => p,
        None => LrSchedule::for_variant(&a.model.variant)?.halving_period,
    };
    let entries = resolved_entries(&a, &model, period, &dir);
    echo_config(&entries);

    let data = load_dir(&dir)?;
    if data.is_empty() {
        return Err(Usage(format!("no readable images in {}", dir.display())).into());
    }
    log::info!("{} training images from {}", data.len(), dir.display());

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), crate::config_file::render(&entries))?;
    let ckpt_path = a.out.join("checkpoint.ckpt");
    let cfg = TrainConfig {
        iterations: a.iters,
        batch: a.batch,
        patch: a.patch,
        seed: a.seed,
        schedule: LrSchedule::new(a.lr, period),
        augment: !a.no_augment,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: Some(ckpt_path.clone()),
        prefetch: a.prefetch.max(1),
        weight_decay: a.weight_decay,
        clip_grad_norm: a.clip_grad_norm,
        ema_decay: a.ema_decay,
    };

    let mut net = RstcaNet::new(model, a.seed)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.load_into(&mut net)?;
            let mut t = Trainer::new(net, cfg);
            if let Some(adam) = ckpt.adam {
                t.adam = adam;
            }
            if let (Some(ema), true) = (ckpt.ema, t.ema.is_some()) {
                t.ema = Some(ema);
            }
            t.iteration = ckpt.iteration;
            log::info!("resuming from {} at iteration {}", path.display(), t.iteration);
            t
        }
        None => Trainer::new(net, cfg),
    };
    log::info!("{} parameters", trainer.net.param_count());

    let mut log = Vec::new();
    let every = a.log_every.max(1);
    let schedule = trainer.cfg.schedule;
    let outcome = trainer.run(Arc::new(data), |i, l| {
        log.push((i, l));
        if i % every == 0 || i + 1 == a.iters {
            log::info!("iter {i} loss {l:.6} lr {:.3e}", schedule.lr_at(i));
        }
    });
    let loss_path = a.out.join("loss.csv");
    append_losses(&loss_path, &log, a.resume.is_none())?;
    outcome.with_context(|| format!("training stopped; last good checkpoint kept at {}", ckpt_path.display()))?;
    log::info!("wrote {} and {}", loss_path.display(), ckpt_path.display());
    Ok(())
}
