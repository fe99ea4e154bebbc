//! Bayer mosaicing, image I/O, augmentation, patch sampling and a bilinear baseline.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_shape, Error, Result};
use crate::tensor::Tensor;

/// File extensions treated as images.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn dims3(t: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != channels {
        return Err(invalid_shape(op, format!("expected [{channels},H,W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// RGGB channel sampled at `(y, x)`: 0 red, 1 green, 2 blue.
#[inline]
pub fn bayer_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Samples `rgb: [3,H,W]` through an RGGB filter into `[1,H,W]`.
pub fn mosaic_rggb(rgb: &Tensor) -> Result<Tensor> {
    let (h, w) = dims3(rgb, 3, "mosaic_rggb")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid_shape("mosaic_rggb", format!("{h}x{w} image has odd dimensions")));
    }
    let d = rgb.data();
    Ok(Tensor::from_fn([1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        d[bayer_channel(y, x) * h * w + i]
    }))
}

/// Ground-truth RGB and its mosaic.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub rgb: Tensor,
    pub mosaic: Tensor,
    pub source: String,
}

impl ImageSample {
    /// Pairs `rgb` with its mosaic, dropping a trailing odd row or column.
    pub fn from_rgb(rgb: Tensor, source: impl Into<String>) -> Result<Self> {
        let (h, w) = dims3(&rgb, 3, "ImageSample")?;
        let rgb = if h % 2 == 1 || w % 2 == 1 {
            crop_chw(&rgb, 0, 0, h & !1, w & !1)?
        } else {
            rgb
        };
        let mosaic = mosaic_rggb(&rgb)?;
        Ok(ImageSample {
            rgb,
            mosaic,
            source: source.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }
}

/// Copies the `h x w` window at `(y0, x0)` out of a `[C,H,W]` tensor.
pub fn crop_chw(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || y0 + h > s[1] || x0 + w > s[2] {
        return Err(invalid_shape("crop", format!("{h}x{w} at ({y0},{x0}) outside {s:?}")));
    }
    let (c, sh, sw) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in y0..y0 + h {
            let row = (ch * sh + y) * sw;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + w]);
        }
    }
    Tensor::new([c, h, w], out)
}

/// Counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Rotation {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn from_quarter_turns(k: usize) -> Self {
        [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270][k % 4]
    }
}

/// Geometric augmentation applied to the RGB image before re-mosaicing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentationSpec {
    pub rotation: Rotation,
    pub hflip: bool,
}

impl AugmentationSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        AugmentationSpec {
            rotation: Rotation::from_quarter_turns(rng.random_range(0..4)),
            hflip: rng.random_bool(0.5),
        }
    }
}

fn rot90_chw(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    // out[y][x] = in[x][w-1-y], output is w x h
    Tensor::from_fn([c, w, h], |i| {
        let (ch, y, x) = (i / (w * h), (i / h) % w, i % h);
        d[(ch * h + x) * w + (w - 1 - y)]
    })
}

fn hflip_chw(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    let d = t.data();
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

/// Rotates then optionally mirrors `[C,H,W]`.
pub fn transform_chw(t: &Tensor, spec: AugmentationSpec) -> Tensor {
    let mut out = t.clone();
    for _ in 0..spec.rotation.quarter_turns() {
        out = rot90_chw(&out);
    }
    if spec.hflip {
        out = hflip_chw(&out);
    }
    out
}

/// Applies `spec` to the RGB image and re-derives the mosaic.
pub fn augment(sample: &ImageSample, spec: AugmentationSpec) -> Result<ImageSample> {
    let rgb = transform_chw(&sample.rgb, spec);
    let mosaic = mosaic_rggb(&rgb)?;
    Ok(ImageSample {
        rgb,
        mosaic,
        source: sample.source.clone(),
    })
}

/// A training batch of mosaics and their RGB targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub mosaics: Tensor,
    pub targets: Tensor,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.mosaics.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks `[3,P,P]` targets and derives their mosaics.
    pub fn from_targets(targets: &[Tensor]) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = dims3(first, 3, "PatchBatch")?;
        let mut t = Vec::with_capacity(targets.len() * 3 * h * w);
        let mut m = Vec::with_capacity(targets.len() * h * w);
        for rgb in targets {
            if rgb.shape() != first.shape() {
                return Err(Error::ShapeMismatch { op: "PatchBatch", lhs: first.shape().to_vec(), rhs: rgb.shape().to_vec() });
            }
            t.extend_from_slice(rgb.data());
            m.extend_from_slice(mosaic_rggb(rgb)?.data());
        }
        Ok(PatchBatch {
            mosaics: Tensor::new([targets.len(), 1, h, w], m)?,
            targets: Tensor::new([targets.len(), 3, h, w], t)?,
        })
    }
}

/// Draws `batch` random `patch x patch` crops with even-aligned corners.
///
/// Images smaller than the patch are skipped with a warning. When `augment`
/// is set every crop gets a random rotation and flip before mosaicing.
pub fn sample_patches(
    dataset: &[ImageSample],
    batch: usize,
    patch: usize,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    if patch == 0 || patch % 2 != 0 {
        return Err(Error::Config(format!("patch size must be even and positive, got {patch}")));
    }
    let eligible: Vec<&ImageSample> = dataset
        .iter()
        .filter(|s| {
            let ok = s.height() >= patch && s.width() >= patch;
            if !ok {
                log::warn!("skipping {} ({}x{} is smaller than patch {patch})", s.source, s.height(), s.width());
            }
            ok
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!("no image is at least {patch}x{patch}")));
    }
    let mut crops = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = eligible[rng.random_range(0..eligible.len())];
        let y = 2 * rng.random_range(0..=(s.height() - patch) / 2);
        let x = 2 * rng.random_range(0..=(s.width() - patch) / 2);
        let mut crop = crop_chw(&s.rgb, y, x, patch, patch)?;
        if augment {
            crop = transform_chw(&crop, AugmentationSpec::random(rng));
        }
        crops.push(crop);
    }
    PatchBatch::from_targets(&crops)
}

/// Generator of the batch for `iteration`, independent of all other iterations.
pub fn batch_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Bilinear demosaicing by normalised convolution: every missing sample is
/// the mean of the in-bounds same-colour neighbours in its 3x3 neighbourhood.
pub fn bilinear_demosaic(mosaic: &Tensor) -> Result<Tensor> {
    let (h, w) = dims3(mosaic, 1, "bilinear_demosaic")?;
    const GREEN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
    const RED_BLUE: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let m = mosaic.data();
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let k = if c == 1 { &GREEN } else { &RED_BLUE };
        for y in 0..h {
            for x in 0..w {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        let (yy, xx) = ((y + dy) as isize - 1, (x + dx) as isize - 1);
                        if kv == 0.0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if bayer_channel(yy, xx) == c {
                            num += kv * m[yy * w + xx] as f64;
                            den += kv;
                        }
                    }
                }
                out[(c * h + y) * w + x] = if den > 0.0 { (num / den) as f32 } else { 0.0 };
            }
        }
    }
    Tensor::new([3, h, w], out)
}

/// Decodes an 8-bit PNG or TIFF into `[3,H,W]` with values `v / 255`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new([3, h, w], (0..3 * h * w).map(|i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }).collect())
}

/// Decodes a single-channel image as a `[1,H,W]` mosaic.
pub fn load_mosaic(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new([1, h, w], img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
}

/// Rounds to the nearest 8-bit level, keeping the `[0,1]` scale.
pub fn quantize8(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes `[3,H,W]` in `[0,1]` as an 8-bit RGB PNG.
pub fn save_png(path: &Path, rgb: &Tensor) -> Result<()> {
    let (h, w) = dims3(rgb, 3, "save_png")?;
    let d = rgb.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every readable image in `dir`; unreadable files are logged and skipped.
pub fn load_dir(dir: &Path) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        match load_rgb(&path).and_then(|rgb| ImageSample::from_rgb(rgb, path.display().to_string())) {
            Ok(s) => out.push(s),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

/// A smooth random colour image in `[0,1]`: per-channel sums of low-frequency
/// sinusoids plus a sharp edge, so that demosaicing is non-trivial.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        let comps: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.05..0.35),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        waves.push(comps);
    }
    let edge = (rng.random_range(0.2..0.8) * w as f32, rng.random_range(-1.0..1.0f32));
    let tint: [f32; 3] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), ((i / w) % h) as f32, (i % w) as f32);
        let mut v = 0.5;
        for &(a, fy, fx, ph) in &waves[c] {
            v += a * (fy * y + fx * x + ph).sin();
        }
        if x + edge.1 * y > edge.0 {
            v += tint[c];
        }
        v.clamp(0.0, 1.0)
    })
}

/// Batches produced on a background thread through a bounded, ordered queue.
///
/// Batch `i` is always drawn from [`batch_rng`]`(seed, i)`, so the sequence
/// does not depend on the queue depth.
pub struct BatchStream {
    rx: Receiver<Result<PatchBatch>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchStream {
    #[allow(clippy::too_many_arguments)]
    pub fn spawn(
        dataset: std::sync::Arc<Vec<ImageSample>>,
        batch: usize,
        patch: usize,
        augment: bool,
        seed: u64,
        iterations: std::ops::Range<u64>,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for it in iterations {
                let b = sample_patches(&dataset, batch, patch, augment, &mut batch_rng(seed, it));
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        BatchStream { rx, handle: Some(handle) }
    }
}

impl Iterator for BatchStream {
    type Item = Result<PatchBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
