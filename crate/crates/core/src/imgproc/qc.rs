use super::{at_clamped, BinaryMask, GrayImage, VesselnessMap, Warning};

const SPECULAR_LEVEL: f64 = 250.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QcThresholds {
    pub blur: f64,
    pub specular: f64,
    pub mean_lo: f64,
    pub mean_hi: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self { blur: 1e-4, specular: 0.05, mean_lo: 0.15, mean_hi: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QcReport {
    pub blur_score: f64,
    pub specular_fraction: f64,
    pub mean_intensity: f64,
    pub pass: bool,
}

/// 4-neighbour Laplacian `[0 1 0; 1 -4 1; 0 1 0]`.
pub fn laplacian(img: &GrayImage) -> Vec<f64> {
    let (w, h, d) = (img.width(), img.height(), img.data());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let f = |dx, dy| at_clamped(d, w, h, x + dx, y + dy);
            out.push(f(1, 0) + f(-1, 0) + f(0, 1) + f(0, -1) - 4.0 * f(0, 0));
        }
    }
    out
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn quality_check(img: &GrayImage, thresholds: &QcThresholds) -> QcReport {
    let n = img.data().len() as f64;
    let blur_score = variance(&laplacian(img));
    let specular_fraction = img.data().iter().filter(|&&v| v >= SPECULAR_LEVEL).count() as f64 / n;
    let mean_intensity = img.data().iter().sum::<f64>() / n;
    let pass = blur_score >= thresholds.blur
        && specular_fraction <= thresholds.specular
        && (thresholds.mean_lo..=thresholds.mean_hi).contains(&mean_intensity);
    QcReport { blur_score, specular_fraction, mean_intensity, pass }
}

fn score_bin(v: f64) -> usize {
    ((v * 256.0).ceil() as isize - 1).clamp(0, 255) as usize
}

/// Otsu threshold over 256 bins. Bin `t` covers `((t)/256, (t+1)/256]`, and the
/// returned threshold is the upper edge of the lowest bin that maximizes
/// between-class variance, so `v > threshold` selects exactly the bins above it.
///
/// Returns `None` when every score lands in one bin.
pub fn otsu_threshold(scores: &[f64]) -> Option<f64> {
    let mut hist = [0u64; 256];
    for &v in scores {
        hist[score_bin(v)] += 1;
    }
    let total = scores.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.filter(|&(_, b)| b > 0.0).map(|(t, _)| (t + 1) as f64 / 256.0)
}

/// Otsu binarization; a map with a single occupied bin yields an empty mask.
pub fn binarize(map: &VesselnessMap) -> (BinaryMask, f64, Option<Warning>) {
    let (bits, threshold, warning) = match otsu_threshold(&map.data) {
        Some(t) => (map.data.iter().map(|&v| v > t).collect(), t, None),
        None => (vec![false; map.data.len()], 1.0, Some(Warning::ConstantMap)),
    };
    (BinaryMask { width: map.width, height: map.height, bits }, threshold, warning)
}
