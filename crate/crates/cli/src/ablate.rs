use std::sync::Arc;

use anyhow::Result;
use rstca_core::data::{load_dir, mosaic_rggb, synthetic_image};
use rstca_core::model::{ablation_variants, AblationGrid};
use rstca_core::train::{LrSchedule, TrainConfig, Trainer};
use rstca_core::RstcaNet;

use crate::args::AblateArgs;
use crate::{dataset_dir, echo_config, Numerical, Usage};

const MIB: f64 = 1024.0 * 1024.0;

struct Row {
    name: &'static str,
    ca_mode: String,
    short_skip: bool,
    heads: usize,
    conv_in_block: usize,
    conv_in_dfe: usize,
    params: usize,
    state_dict_mib: f64,
    forward_finite: Option<bool>,
    final_loss: Option<f32>,
}

impl Row {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{},{}",
            self.name,
            self.ca_mode,
            self.short_skip,
            self.heads,
            self.conv_in_block,
            self.conv_in_dfe,
            self.params,
            self.params as f64 * 4.0 / MIB,
            self.state_dict_mib,
            self.forward_finite.map_or(String::new(), |b| b.to_string()),
            self.final_loss.map_or(String::new(), |l| format!("{l:.6}")),
        )
    }
}

pub const HEADER: &str =
    "variant,ca_mode,short_skip,heads,conv_in_block,conv_in_dfe,params,param_mib,state_dict_mib,forward_finite,final_loss";

pub fn run(a: AblateArgs) -> Result<()> {
    let grid: AblationGrid = a.grid.parse()?;
    let mut entries = vec![
        ("grid".to_string(), a.grid.clone()),
        ("forward_size".into(), a.forward_size.to_string()),
        ("train_iters".into(), a.train_iters.to_string()),
        ("seed".into(), a.seed.to_string()),
    ];
    if let Some(p) = &a.output {
        entries.push(("output".into(), p.display().to_string()));
    }
    let data = if a.train_iters > 0 {
        let dir = dataset_dir(&a.dataset)?;
        entries.push(("dataset".into(), dir.display().to_string()));
        entries.extend([
            ("batch".to_string(), a.batch.to_string()),
            ("patch".into(), a.patch.to_string()),
            ("lr".into(), format!("{:e}", a.lr)),
        ]);
        let d = load_dir(&dir)?;
        if d.is_empty() {
            return Err(Usage(format!("no readable images in {}", dir.display())).into());
        }
        Some(Arc::new(d))
    } else {
        None
    };
    echo_config(&entries);
    if a.forward_size % 2 != 0 {
        return Err(Usage(format!("--forward-size must be even, got {}", a.forward_size)).into());
    }

    let mut rows = Vec::new();
    for v in ablation_variants(grid) {
        let net = RstcaNet::new(v.config.clone(), a.seed)?;
        let forward_finite = if a.forward_size > 0 {
            let s = a.forward_size;
            let m = mosaic_rggb(&synthetic_image(s, s, a.seed))?.reshape([1, 1, s, s])?;
            Some(net.infer(&m)?.all_finite())
        } else {
            None
        };
        let params = net.param_count();
        let state_dict_mib = net.state_dict_bytes(64) as f64 / MIB;
        let final_loss = match &data {
            Some(d) => {
                let cfg = TrainConfig {
                    iterations: a.train_iters,
                    batch: a.batch,
                    patch: a.patch,
                    seed: a.seed,
                    schedule: LrSchedule::new(a.lr, u64::MAX),
                    ..TrainConfig::default()
                };
                let mut t = Trainer::new(net, cfg);
                let mut last = None;
                t.run(d.clone(), |_, l| last = Some(l))?;
                last
            }
            None => None,
        };
        let c = &v.config;
        let row = Row {
            name: v.name,
            ca_mode: c.ca_mode.to_string(),
            short_skip: c.short_skip,
            heads: c.heads,
            conv_in_block: c.conv_in_block,
            conv_in_dfe: c.conv_in_dfe,
            params,
            state_dict_mib,
            forward_finite,
            final_loss,
        };
        log::info!("{}: {} parameters", row.name, row.params);
        rows.push(row);
    }

    let mut csv = format!("{HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(p) = &a.output {
        std::fs::write(p, &csv)?;
    }
    if rows.iter().any(|r| r.forward_finite == Some(false)) {
        return Err(Numerical("a variant produced non-finite outputs".into()).into());
    }
    Ok(())
}
