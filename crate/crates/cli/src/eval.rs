use anyhow::Result;
use rstca_core::eval::{evaluate_dataset, EvalOptions, Method};

use crate::args::EvalArgs;
use crate::{dataset_dir, echo_config, load_network, model_entries};

pub fn run(a: EvalArgs) -> Result<()> {
    let dir = dataset_dir(&a.dataset)?;
    let opts = EvalOptions {
        crop: a.crop,
        quantize: a.quantize,
    };
    let mut entries = vec![
        ("dataset".to_string(), dir.display().to_string()),
        ("crop".into(), a.crop.to_string()),
        ("quantize".into(), a.quantize.to_string()),
    ];
    if let Some(r) = &a.report {
        entries.push(("report".into(), r.display().to_string()));
    }
    let net;
    let method = if let Some(path) = &a.method.checkpoint {
        net = load_network(path, &a.model)?.0;
        entries.push(("checkpoint".into(), path.display().to_string()));
        if let Some(v) = &a.model.variant {
            entries.push(("variant".into(), v.clone()));
        }
        entries.extend(model_entries(net.config()));
        Method::Network(&net)
    } else if a.method.self_test {
        entries.push(("self_test".into(), "true".into()));
        Method::GroundTruth
    } else {
        entries.push(("baseline".into(), "bilinear".into()));
        Method::Bilinear
    };
    echo_config(&entries);

    let report = evaluate_dataset(method, &dir, opts)?;
    for r in &report.rows {
        log::info!("{}: {:.4} dB, SSIM {:.4}", r.image, r.cpsnr_db, r.ssim);
    }
    println!(
        "{} on {}: mean cPSNR {:.4} dB, mean SSIM {:.4} ({} images, {} skipped)",
        report.method,
        report.dataset,
        report.mean_cpsnr(),
        report.mean_ssim(),
        report.rows.len(),
        report.skipped.len()
    );
    if let Some(path) = &a.report {
        report.write_csv(path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
