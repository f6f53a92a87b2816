//! Dataset loading and generation.
//!
//! Two synthetic 2-d generators (gaussian blobs and interleaved half-moons)
//! cover the desk-scale experiments, and an IDX reader covers real image
//! files. Everything lands in `[0, 1]`-ranged inputs so one perturbation
//! budget means the same thing across sources.

use std::io::Read as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use eed_core::netcore::{Batch, Tensor};
use eed_core::rng;

use crate::{HarnessError, Result};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, offset: usize, detail: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!(
        "{} at byte {offset}: {detail}",
        path.display()
    ))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(bytes)
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(idx_err(path, offset, "file truncated inside header word"));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image/label file pair into a batch of `[n, 1, rows, cols]`
/// inputs scaled to `[0, 1]`. `limit > 0` caps the number of samples taken
/// from the front of the files.
pub fn load_idx(images: &Path, labels: &Path, limit: usize) -> Result<Batch> {
    let img_bytes = read_all(images)?;
    let magic = read_be_u32(&img_bytes, 0, images)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(idx_err(
            images,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(&img_bytes, 4, images)? as usize;
    let rows = read_be_u32(&img_bytes, 8, images)? as usize;
    let cols = read_be_u32(&img_bytes, 12, images)? as usize;
    if rows == 0 || cols == 0 {
        return Err(idx_err(images, 8, format!("degenerate image size {rows}x{cols}")));
    }
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(idx_err(
            images,
            img_bytes.len().min(expected),
            format!(
                "image payload is {} bytes, header implies {}",
                img_bytes.len() - 16_usize.min(img_bytes.len()),
                n * rows * cols
            ),
        ));
    }

    let lbl_bytes = read_all(labels)?;
    let magic = read_be_u32(&lbl_bytes, 0, labels)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(idx_err(
            labels,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, labels)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(idx_err(
            labels,
            lbl_bytes.len().min(8 + n_labels),
            format!(
                "label payload is {} bytes, header implies {n_labels}",
                lbl_bytes.len().saturating_sub(8)
            ),
        ));
    }
    if n_labels != n {
        return Err(HarnessError::Config(format!(
            "{} has {n} images but {} has {n_labels} labels",
            images.display(),
            labels.display()
        )));
    }

    let take = if limit > 0 { limit.min(n) } else { n };
    if take == 0 {
        return Err(HarnessError::Config(format!(
            "{} contains no samples",
            images.display()
        )));
    }
    let data: Vec<f64> = img_bytes[16..16 + take * rows * cols]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let inputs = Tensor::from_vec(&[take, 1, rows, cols], data)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let label_vec: Vec<usize> = lbl_bytes[8..8 + take].iter().map(|&b| b as usize).collect();
    Batch::new(inputs, label_vec).map_err(|e| HarnessError::Config(e.to_string()))
}

fn to_batch(points: Vec<[f64; 2]>, labels: Vec<usize>) -> Batch {
    let n = labels.len();
    let mut data = Vec::with_capacity(2 * n);
    for p in points {
        data.push(p[0]);
        data.push(p[1]);
    }
    let inputs = Tensor::from_vec(&[n, 2], data).expect("sized above");
    Batch::new(inputs, labels).expect("one label per row")
}

/// Two gaussian blobs: class 0 around (-1, -1), class 1 around (1, 1) with
/// the given noise, mapped into the unit square by (x + 3) / 6 so the class
/// means land at (1/3, 1/3) and (2/3, 2/3).
pub fn gen_blobs(n: usize, noise: f64, seed: u64) -> Batch {
    let mut r = rng::stream(rng::derive(seed, "blobs", 0));
    let half = n / 2 + n % 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= half);
        let mean = if class == 0 { -1.0 } else { 1.0 };
        let dx: f64 = r.sample(StandardNormal);
        let dy: f64 = r.sample(StandardNormal);
        let x = mean + noise * dx;
        let y = mean + noise * dy;
        points.push([((x + 3.0) / 6.0).clamp(0.0, 1.0), ((y + 3.0) / 6.0).clamp(0.0, 1.0)]);
        labels.push(class);
    }
    to_batch(points, labels)
}

/// Two interleaved half-moons: class 0 on the upper arc (cos t, sin t),
/// class 1 on the lower arc (1 - cos t, 1/2 - sin t), t sweeping [0, pi],
/// plus isotropic gaussian noise. The raw cloud is mapped into the unit
/// square by the isotropic affine (x + 1.3) / 3.6 so geometry (and hence a
/// perturbation ball) is preserved up to one global scale.
pub fn gen_moons(n: usize, noise: f64, seed: u64) -> Batch {
    let mut r = rng::stream(rng::derive(seed, "moons", 0));
    let n_out = n / 2 + n % 2;
    let n_in = n - n_out;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let arc = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_out {
        let t = arc(i, n_out);
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_in {
        let t = arc(i, n_in);
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for p in &mut points {
        let dx: f64 = r.sample(StandardNormal);
        let dy: f64 = r.sample(StandardNormal);
        p[0] = ((p[0] + noise * dx + 1.3) / 3.6).clamp(0.0, 1.0);
        p[1] = ((p[1] + noise * dy + 1.3) / 3.6).clamp(0.0, 1.0);
    }
    to_batch(points, labels)
}

/// Splits a dataset into train/eval parts by a seeded shuffle; the eval part
/// takes `round(eval_fraction * n)` samples (at least 1, at most n - 1).
pub fn split_train_eval(batch: &Batch, eval_fraction: f64, seed: u64) -> Result<(Batch, Batch)> {
    let n = batch.len();
    if n < 2 {
        return Err(HarnessError::Config(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(seed, "split", 0));
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_eval = ((eval_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let eval = batch
        .select(&order[..n_eval])
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let train = batch
        .select(&order[n_eval..])
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((train, eval))
}

/// Generates (or loads) train and eval batches for a data config.
pub fn load_dataset(cfg: &crate::config::DataConfig, seed: u64) -> Result<(Batch, Batch)> {
    use crate::config::DataSource;
    match cfg.source {
        DataSource::Blobs => {
            let all = gen_blobs(cfg.n, cfg.noise, seed);
            split_train_eval(&all, cfg.eval_fraction, seed)
        }
        DataSource::Moons => {
            let all = gen_moons(cfg.n, cfg.noise, seed);
            split_train_eval(&all, cfg.eval_fraction, seed)
        }
        DataSource::Idx => {
            let images = cfg.images.as_ref().expect("checked at resolve");
            let labels = cfg.labels.as_ref().expect("checked at resolve");
            let train = load_idx(images, labels, cfg.limit)?;
            match (&cfg.eval_images, &cfg.eval_labels) {
                (Some(ei), Some(el)) => Ok((train, load_idx(ei, el, cfg.limit)?)),
                _ => split_train_eval(&train, cfg.eval_fraction, seed),
            }
        }
    }
}
