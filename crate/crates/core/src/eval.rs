//! Color PSNR, SSIM and dataset benchmark reports.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{bilinear_demosaic, crop_chw, list_images, load_rgb, quantize8, ImageSample};
use crate::error::{invalid_shape, Error, Result};
use crate::model::RstcaNet;
use crate::tensor::Tensor;

/// cPSNR reported for identical images.
pub const CPSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    match a.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(invalid_shape(op, format!("expected [3,H,W], got {s:?}"))),
    }
}

/// PSNR of the squared error pooled over all three channels, peak 1.
pub fn cpsnr(reference: &Tensor, test: &Tensor) -> Result<f64> {
    check_pair("cpsnr", reference, test)?;
    let se: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = se / reference.numel() as f64;
    if mse == 0.0 {
        return Ok(CPSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(CPSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&prod(a, a), h, w, taps);
    let e_bb = filter_valid(&prod(b, b), h, w, taps);
    let e_ab = filter_valid(&prod(a, b), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM per channel (11×11 Gaussian window, σ = 1.5, valid positions),
/// averaged over the three channels.
pub fn ssim(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let (h, w) = check_pair("ssim", reference, test)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid_shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = |t: &Tensor, c: usize| t.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect::<Vec<_>>();
    let sum: f64 = (0..3)
        .map(|c| ssim_plane(&plane(reference, c), &plane(test, c), h, w, &taps))
        .sum();
    Ok(sum / 3.0)
}

/// What produces the RGB estimate from a sample's mosaic.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Network(&'a RstcaNet),
    Bilinear,
    /// Returns the reference itself.
    GroundTruth,
}

impl Method<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Network(_) => "rstcanet",
            Method::Bilinear => "bilinear",
            Method::GroundTruth => "ground-truth",
        }
    }

    /// Demosaiced `[3,H,W]` estimate clamped to `[0,1]`.
    pub fn demosaic(&self, sample: &ImageSample) -> Result<Tensor> {
        let (h, w) = (sample.height(), sample.width());
        let out = match self {
            Method::Network(net) => net.infer(&sample.mosaic.clone().reshape([1, 1, h, w])?)?.reshape([3, h, w])?,
            Method::Bilinear => bilinear_demosaic(&sample.mosaic)?,
            Method::GroundTruth => sample.rgb.clone(),
        };
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Border pixels dropped on every side before scoring.
    pub crop: usize,
    /// Round the estimate to 8-bit levels before scoring.
    pub quantize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image: String,
    pub cpsnr_db: f64,
    pub ssim: f64,
}

/// Scores an estimate against its reference.
pub fn score(reference: &Tensor, estimate: &Tensor, opts: EvalOptions) -> Result<(f64, f64)> {
    let (h, w) = check_pair("score", reference, estimate)?;
    let est = if opts.quantize { quantize8(estimate) } else { estimate.clone() };
    let (r, e) = if opts.crop > 0 {
        let c = opts.crop;
        if 2 * c >= h || 2 * c >= w {
            return Err(invalid_shape("score", format!("crop {c} leaves nothing of a {h}x{w} image")));
        }
        (crop_chw(reference, c, c, h - 2 * c, w - 2 * c)?, crop_chw(&est, c, c, h - 2 * c, w - 2 * c)?)
    } else {
        (reference.clone(), est)
    };
    Ok((cpsnr(&r, &e)?, ssim(&r, &e)?))
}

pub fn evaluate_sample(method: Method<'_>, sample: &ImageSample, opts: EvalOptions) -> Result<ImageMetrics> {
    let est = method.demosaic(sample)?;
    let (cpsnr_db, ssim) = score(&sample.rgb, &est, opts)?;
    Ok(ImageMetrics {
        image: sample.source.clone(),
        cpsnr_db,
        ssim,
    })
}

/// Per-image metrics of one method on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub rows: Vec<ImageMetrics>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().expect("formatted float parses")
}

impl MetricReport {
    pub fn mean_cpsnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.cpsnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `image,cpsnr_db,ssim` rows with 4 decimals and a closing `MEAN` row.
    /// The `MEAN` row averages the printed values, so it can be recomputed
    /// exactly from the file.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "cpsnr_db", "ssim"])?;
        for r in &self.rows {
            w.write_record([r.image.as_str(), &format!("{:.4}", r.cpsnr_db), &format!("{:.4}", r.ssim)])?;
        }
        let mc = mean(self.rows.iter().map(|r| round4(r.cpsnr_db)));
        let ms = mean(self.rows.iter().map(|r| round4(r.ssim)));
        w.write_record(["MEAN", &format!("{mc:.4}"), &format!("{ms:.4}")])?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Parses a report CSV, `MEAN` row included, after checking the header.
pub fn parse_report_csv(text: &str) -> Result<Vec<ImageMetrics>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["image", "cpsnr_db", "ssim"] {
        return Err(Error::Data(format!("unexpected report header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number `{}` in report", &rec[i])))
            };
            Ok(ImageMetrics {
                image: rec[0].to_string(),
                cpsnr_db: num(1)?,
                ssim: num(2)?,
            })
        })
        .collect()
}

/// Scores `method` on every image of `dir`, in file-name order. Unreadable
/// files are recorded in `skipped`; a directory with no readable image is an
/// error.
pub fn evaluate_dataset(method: Method<'_>, dir: &Path, opts: EvalOptions) -> Result<MetricReport> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    let results: Vec<Result<std::result::Result<ImageMetrics, (String, String)>>> = paths
        .par_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let sample = match load_rgb(p).and_then(|rgb| ImageSample::from_rgb(rgb, name.clone())) {
                Ok(s) => s,
                Err(e) => return Ok(Err((name, e.to_string()))),
            };
            evaluate_sample(method, &sample, opts).map(Ok)
        })
        .collect();
    let mut report = MetricReport {
        method: method.label().to_string(),
        dataset: dir.display().to_string(),
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for r in results {
        match r? {
            Ok(m) => report.rows.push(m),
            Err((name, why)) => {
                log::warn!("skipping {name}: {why}");
                report.skipped.push((name, why));
            }
        }
    }
    if report.rows.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    Ok(report)
}
