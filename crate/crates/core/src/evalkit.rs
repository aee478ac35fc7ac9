//! Angular-accuracy metrics, y-t temporal profiles, method ranking and PCA
//! visualisation of patch features.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfr::PatchFeatures;
use crate::synthdata::{normal_to_rgb8, NormalSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub median: f64,
    pub a11_25: f64,
    pub a22_5: f64,
    pub a30: f64,
}

impl EvalSummary {
    /// The five metrics in table order, each paired with "higher is better".
    pub fn metrics(&self) -> [(f64, bool); 5] {
        [
            (self.mean, false),
            (self.median, false),
            (self.a11_25, true),
            (self.a22_5, true),
            (self.a30, true),
        ]
    }
}

fn unit(n: &[f32]) -> [f64; 3] {
    let v = [n[0] as f64, n[1] as f64, n[2] as f64];
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len == 0.0 {
        return v;
    }
    v.map(|c| c / len)
}

/// Angle in degrees between two (not necessarily unit) vectors, via
/// `atan2(|a × b|, a · b)`: exactly 0 for parallel and 180 for opposite
/// vectors, and well conditioned near both.
pub fn angle_between(a: &[f32], b: &[f32]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

/// Per-pixel angular error in degrees and the joint validity mask.
pub fn angular_error_map(pred: &NormalSequence, gt: &NormalSequence) -> Result<(Vec<f64>, Vec<bool>)> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims, gt.dims)));
    }
    let n = pred.dims.pixels();
    let mut errors = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if pred.mask[i] && gt.mask[i] {
            mask[i] = true;
            errors[i] = angle_between(&pred.normals[i * 3..i * 3 + 3], &gt.normals[i * 3..i * 3 + 3]);
        }
    }
    Ok((errors, mask))
}

/// Mean, median and strict-threshold percentages over the masked errors.
pub fn summarize(errors: &[f64], mask: &[bool]) -> Result<EvalSummary> {
    let mut valid: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
    summarize_values(&mut valid)
}

fn summarize_values(valid: &mut [f64]) -> Result<EvalSummary> {
    if valid.is_empty() {
        return Err(Error::UndefinedMetric("no valid pixels to summarize".into()));
    }
    valid.sort_by(f64::total_cmp);
    let n = valid.len();
    let mean = valid.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        valid[n / 2]
    } else {
        (valid[n / 2 - 1] + valid[n / 2]) / 2.0
    };
    let pct = |t: f64| valid.iter().filter(|&&e| e < t).count() as f64 * 100.0 / n as f64;
    Ok(EvalSummary {
        mean,
        median,
        a11_25: pct(11.25),
        a22_5: pct(22.5),
        a30: pct(30.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalProfile {
    pub x0: usize,
    pub frames: usize,
    pub height: usize,
    /// `frames × height × 3`, row-major.
    pub slice: Vec<f32>,
    pub flicker: f64,
}

/// Column `x0` stacked over time plus its flicker score: the mean angular
/// change between consecutive frames over rows valid in both frames.
pub fn temporal_profile(seq: &NormalSequence, x0: usize) -> Result<TemporalProfile> {
    let d = seq.dims;
    if x0 >= d.width {
        return Err(Error::Domain(format!("column {x0} outside width {}", d.width)));
    }
    let mut slice = Vec::with_capacity(d.frames * d.height * 3);
    for f in 0..d.frames {
        for y in 0..d.height {
            slice.extend_from_slice(&seq.normal(f, y, x0));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 1..d.frames {
        for y in 0..d.height {
            let (a, b) = (d.index(f - 1, y, x0), d.index(f, y, x0));
            if seq.mask[a] && seq.mask[b] {
                total += angle_between(&seq.normals[a * 3..a * 3 + 3], &seq.normals[b * 3..b * 3 + 3]);
                count += 1;
            }
        }
    }
    Ok(TemporalProfile {
        x0,
        frames: d.frames,
        height: d.height,
        slice,
        flicker: if count == 0 { 0.0 } else { total / count as f64 },
    })
}

/// Flicker averaged over every column, i.e. over all pixels of the clip.
pub fn sequence_flicker(seq: &NormalSequence) -> f64 {
    let d = seq.dims;
    let fp = d.frame_pixels();
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 1..d.frames {
        for p in 0..fp {
            let (a, b) = ((f - 1) * fp + p, f * fp + p);
            if seq.mask[a] && seq.mask[b] {
                total += angle_between(&seq.normals[a * 3..a * 3 + 3], &seq.normals[b * 3..b * 3 + 3]);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Writes the y-t slice as an image with time along x.
pub fn save_profile_png(profile: &TemporalProfile, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(profile.frames as u32, profile.height as u32);
    for f in 0..profile.frames {
        for y in 0..profile.height {
            let i = (f * profile.height + y) * 3;
            let n = [profile.slice[i], profile.slice[i + 1], profile.slice[i + 2]];
            img.put_pixel(f as u32, y as u32, image::Rgb(normal_to_rgb8(n)));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Mean rank of each method over the five metrics; ties share the mean of
/// the ranks they occupy.
pub fn rank_methods(summaries: &[(String, EvalSummary)]) -> Vec<(String, f64)> {
    let m = summaries.len();
    let mut totals = vec![0.0; m];
    for metric in 0..5 {
        let values: Vec<(f64, bool)> = summaries.iter().map(|(_, s)| s.metrics()[metric]).collect();
        for i in 0..m {
            let (v, higher) = values[i];
            let better = values
                .iter()
                .filter(|(o, _)| if higher { *o > v } else { *o < v })
                .count();
            let ties = values.iter().filter(|(o, _)| *o == v).count();
            // Occupied ranks are better+1 ..= better+ties.
            totals[i] += better as f64 + (ties as f64 + 1.0) / 2.0;
        }
    }
    summaries
        .iter()
        .zip(totals)
        .map(|((name, _), t)| (name.clone(), t / 5.0))
        .collect()
}

/// Principal axes of a point cloud, largest variance first.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors of the covariance, one per row.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

/// PCA over `n × d` row-major samples, keeping the top `k` components.
pub fn pca(data: &[f32], n: usize, d: usize, k: usize) -> Result<Pca> {
    if data.len() != n * d || n == 0 {
        return Err(Error::Shape(format!("pca input of {} values is not {n}x{d}", data.len())));
    }
    let x = DMatrix::from_row_iterator(n, d, data.iter().map(|&v| v as f64));
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let mut centered = x;
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let keep = k.min(d);
    Ok(Pca {
        mean,
        components: order[..keep]
            .iter()
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect(),
        variances: order[..keep].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
    })
}

impl Pca {
    pub fn project(&self, row: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, &x), m)| c * (x as f64 - m)).sum())
            .collect()
    }
}

/// Maps each patch to RGB through the clip's top-3 principal components,
/// min-max normalised per component. Components without variance render
/// as 0.5. Returns one `grid_h × grid_w × 3` image per frame.
pub fn pca_feature_viz(features: &PatchFeatures, grid_h: usize, grid_w: usize) -> Result<Vec<Vec<f32>>> {
    let (f, n, d) = (features.frames, features.patches, features.dim);
    if n != grid_h * grid_w {
        return Err(Error::Shape(format!("{n} patches do not form a {grid_h}x{grid_w} grid")));
    }
    if n < 3 {
        return Err(Error::Domain("need at least 3 patches for a PCA visualisation".into()));
    }
    let p = pca(&features.data, f * n, d, 3)?;
    let scale = p.variances.first().copied().unwrap_or(0.0).max(1e-30);
    let proj: Vec<Vec<f64>> = features.data.chunks_exact(d).map(|row| p.project(row)).collect();
    let mut out = vec![vec![0.5f32; n * 3]; f];
    for c in 0..3 {
        if c >= p.variances.len() || p.variances[c] <= 1e-12 * scale.max(1.0) {
            continue;
        }
        let lo = proj.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
        let hi = proj.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 {
            continue;
        }
        for (i, v) in proj.iter().enumerate() {
            out[i / n][(i % n) * 3 + c] = ((v[c] - lo) / (hi - lo)) as f32;
        }
    }
    Ok(out)
}

pub fn save_rgb_grid_png(rgb: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 3;
            let px = [rgb[i], rgb[i + 1], rgb[i + 2]].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub summary: EvalSummary,
    pub flicker: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_sequence: Vec<SequenceReport>,
    /// Pooled over every valid pixel of every sequence.
    pub aggregate: EvalSummary,
    /// Mean of the per-sequence flicker scores of the predictions.
    pub flicker: f64,
}

pub fn evaluate(method: &str, pairs: &[(String, NormalSequence, NormalSequence)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no sequences to evaluate".into()));
    }
    let mut pooled = Vec::new();
    let mut per_sequence = Vec::with_capacity(pairs.len());
    for (name, pred, gt) in pairs {
        let (errors, mask) = angular_error_map(pred, gt)?;
        let mut valid: Vec<f64> = errors.iter().zip(&mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
        pooled.extend_from_slice(&valid);
        per_sequence.push(SequenceReport {
            name: name.clone(),
            summary: summarize_values(&mut valid)?,
            flicker: sequence_flicker(pred),
        });
    }
    let flicker = per_sequence.iter().map(|s| s.flicker).sum::<f64>() / per_sequence.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        aggregate: summarize_values(&mut pooled)?,
        per_sequence,
        flicker,
    })
}
