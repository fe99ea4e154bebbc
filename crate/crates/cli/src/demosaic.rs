use anyhow::Result;
use rstca_core::data::{bilinear_demosaic, load_mosaic, load_rgb, mosaic_rggb, save_png};
use rstca_core::model::{crop, reflect_pad_to};
use rstca_core::Tensor;

use crate::args::DemosaicArgs;
use crate::{echo_config, load_network, model_entries};

pub fn run(a: DemosaicArgs) -> Result<()> {
    // Odd sizes are reflect-padded to even, which keeps the RGGB phase.
    let (mosaic, h, w) = if a.raw {
        let m = load_mosaic(&a.input)?;
        let (h, w) = (m.shape()[1], m.shape()[2]);
        (reflect_pad_to(&m, 2)?, h, w)
    } else {
        let rgb = load_rgb(&a.input)?;
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        (mosaic_rggb(&reflect_pad_to(&rgb, 2)?)?, h, w)
    };
    let (ph, pw) = (mosaic.shape()[1], mosaic.shape()[2]);

    let mut entries = vec![
        ("input".to_string(), a.input.display().to_string()),
        ("output".into(), a.output.display().to_string()),
        ("raw".into(), a.raw.to_string()),
    ];
    let out: Tensor = match (&a.method.checkpoint, &a.method.baseline) {
        (Some(path), _) => {
            let (net, _) = load_network(path, &a.model)?;
            entries.push(("checkpoint".into(), path.display().to_string()));
            if let Some(v) = &a.model.variant {
                entries.push(("variant".into(), v.clone()));
            }
            entries.extend(model_entries(net.config()));
            echo_config(&entries);
            net.infer(&mosaic.reshape([1, 1, ph, pw])?)?.reshape([3, ph, pw])?
        }
        (None, Some(b)) => {
            entries.push(("baseline".into(), b.clone()));
            echo_config(&entries);
            bilinear_demosaic(&mosaic)?
        }
        (None, None) => unreachable!("clap requires a method"),
    };
    let out = crop(&out, h, w)?.map(|v| v.clamp(0.0, 1.0));
    save_png(&a.output, &out)?;
    log::info!("wrote {} ({w}x{h})", a.output.display());
    Ok(())
}
