//! Evaluation metrics and the entropy-proxy analysis: steering MAE/SD,
//! total variance of image collections, entropy/MAE correlation, and a
//! diversity score for detecting generator mode collapse.

use crate::error::{Error, Result};
use crate::geometry::DomainId;
use crate::num::Scalar;
use ndarray::ArrayView3;
use rand::seq::SliceRandom;

/// Steering-angle error summary, reported in degrees.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mae_deg: f64,
    pub sd_deg: f64,
    pub n: usize,
    pub domain_id: DomainId,
    pub model_tag: String,
}

/// Mean absolute error and population standard deviation of the absolute
/// errors, both converted from radians to degrees.
pub fn mae_sd(
    pred_theta_rad: &[f64],
    true_theta_rad: &[f64],
    domain_id: DomainId,
    model_tag: &str,
) -> Result<EvalReport> {
    if pred_theta_rad.len() != true_theta_rad.len() {
        return Err(Error::Dimension(format!(
            "prediction/target length mismatch: {} vs {}",
            pred_theta_rad.len(),
            true_theta_rad.len()
        )));
    }
    if pred_theta_rad.is_empty() {
        return Err(Error::InvalidInput("empty evaluation input".into()));
    }
    let n = pred_theta_rad.len();
    let errs: Vec<f64> = pred_theta_rad
        .iter()
        .zip(true_theta_rad)
        .map(|(p, t)| (p - t).abs().to_degrees())
        .collect();
    let mae = errs.iter().sum::<f64>() / n as f64;
    let var = errs.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n as f64;
    Ok(EvalReport { mae_deg: mae, sd_deg: var.sqrt(), n, domain_id, model_tag: model_tag.into() })
}

/// Total variance of a collection of images: flatten each image to a vector
/// and sum the unbiased per-coordinate sample variances (the trace of the
/// sample covariance). When more than `sample_n` images are supplied, a
/// seed-deterministic subset of `sample_n` is used.
pub fn total_variance<S: Scalar>(
    images: &[ArrayView3<'_, S>],
    sample_n: usize,
    seed: u64,
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidInput("total variance needs at least 2 images".into()));
    }
    let dim = images[0].dim();
    if images.iter().any(|im| im.dim() != dim) {
        return Err(Error::Dimension("images must share one shape".into()));
    }
    let chosen: Vec<usize> = if images.len() > sample_n {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        let mut rng = crate::rng::stream(seed, "total_variance_sample");
        idx.shuffle(&mut rng);
        idx.truncate(sample_n);
        idx.sort_unstable();
        idx
    } else {
        (0..images.len()).collect()
    };
    let n = chosen.len();
    let d = dim.0 * dim.1 * dim.2;
    // two-pass: per-coordinate mean, then squared deviations
    let mut mean = vec![0.0f64; d];
    for &i in &chosen {
        for (m, v) in mean.iter_mut().zip(images[i].iter()) {
            *m += v.to_f64().unwrap();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut accum = 0.0f64;
    for &i in &chosen {
        for (m, v) in mean.iter().zip(images[i].iter()) {
            let dv = v.to_f64().unwrap() - *m;
            accum += dv * dv;
        }
    }
    Ok(accum / (n as f64 - 1.0))
}

/// Pearson correlation coefficient of (x, y) points.
pub fn entropy_mae_correlation(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least 2 points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput(
            "correlation undefined: degenerate variance in one coordinate".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean pairwise Euclidean distance between flattened images, normalized by
/// the square root of the vector length (so a constant per-pixel offset of c
/// scores exactly c). Zero iff all images are identical.
pub fn diversity_score<S: Scalar>(images: &[ArrayView3<'_, S>]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::InvalidInput("diversity needs at least 2 images".into()));
    }
    let dim = images[0].dim();
    if images.iter().any(|im| im.dim() != dim) {
        return Err(Error::Dimension("images must share one shape".into()));
    }
    let d = (dim.0 * dim.1 * dim.2) as f64;
    let n = images.len();
    let mut total = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0f64;
            for (a, b) in images[i].iter().zip(images[j].iter()) {
                let dv = a.to_f64().unwrap() - b.to_f64().unwrap();
                sq += dv * dv;
            }
            total += (sq / d).sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs)
}

/// Write a comparison grid PNG: one row per sample, images side by side
/// (real | generated-virtual | true-virtual), each in [-1, 1].
pub fn write_comparison_grid<S: Scalar>(
    path: &std::path::Path,
    rows: &[Vec<ndarray::ArrayView3<'_, S>>],
) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let (c, h, w) = rows[0][0].dim();
    if c != 3 {
        return Err(Error::Dimension("grid expects 3-channel images".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|im| im.dim() != (c, h, w))) {
        return Err(Error::Dimension("grid images must share one shape".into()));
    }
    let pad = 2usize;
    let out_w = cols * w + (cols + 1) * pad;
    let out_h = rows.len() * h + (rows.len() + 1) * pad;
    let mut img = image::RgbImage::from_pixel(out_w as u32, out_h as u32, image::Rgb([30, 30, 30]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            let x0 = pad + ci * (w + pad);
            let y0 = pad + ri * (h + pad);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        quant(tile[(0, y, x)]),
                        quant(tile[(1, y, x)]),
                        quant(tile[(2, y, x)]),
                    ]);
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, px);
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}

fn quant<S: Scalar>(v: S) -> u8 {
    (((v.to_f64().unwrap() + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}
