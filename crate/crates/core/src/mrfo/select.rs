use std::collections::HashMap;
use std::path::Path;

use super::{mrfo_optimize, MrfoConfig, MrfoError};
use crate::evalkit::confusion_and_prf1;

/// Binary inclusion vector with at least one bit set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureMask {
    bits: Vec<bool>,
}

impl FeatureMask {
    pub fn new(bits: Vec<bool>) -> Result<Self, MrfoError> {
        if !bits.iter().any(|&b| b) {
            return Err(MrfoError::EmptyMask);
        }
        Ok(Self { bits })
    }

    pub fn all(dim: usize) -> Self {
        Self { bits: vec![true; dim] }
    }

    /// Threshold at 0.5; if nothing survives, the largest coordinate is
    /// switched on (first on ties). The flag reports that repair.
    pub fn decode(position: &[f64]) -> (Self, bool) {
        let mut bits: Vec<bool> = position.iter().map(|&v| v > 0.5).collect();
        let repaired = !bits.iter().any(|&b| b);
        if repaired {
            let mut k = 0;
            for (i, v) in position.iter().enumerate() {
                if *v > position[k] {
                    k = i;
                }
            }
            bits[k] = true;
        }
        (Self { bits }, repaired)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Mask as 0.0/1.0 multipliers.
    pub fn as_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_text(&self, seed: u64) -> String {
        let line: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        format!("# dim={} seed={seed}\n{line}\n", self.bits.len())
    }

    /// Parses [`FeatureMask::to_text`] output, returning the mask and seed.
    pub fn from_text(text: &str) -> Result<(Self, u64), MrfoError> {
        let bad = |m: &str| MrfoError::MalformedMask(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let rest = header.strip_prefix("# dim=").ok_or_else(|| bad("missing header"))?;
        let (dim, seed) = rest.split_once(" seed=").ok_or_else(|| bad("missing seed"))?;
        let dim: usize = dim.parse().map_err(|_| bad("bad dim"))?;
        let seed: u64 = seed.trim().parse().map_err(|_| bad("bad seed"))?;
        let body = lines.next().ok_or_else(|| bad("missing mask line"))?.trim();
        let bits = body
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("mask must be 0/1")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if bits.len() != dim {
            return Err(bad(&format!("{} bits, header says {dim}", bits.len())));
        }
        Ok((Self::new(bits)?, seed))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), MrfoError> {
        std::fs::write(path, self.to_text(seed))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64), MrfoError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Ridge regularization of the linear probe.
pub const PROBE_LAMBDA: f64 = 1e-3;

/// Closed-form ridge probe scored by validation macro-F1.
///
/// Regresses one-hot labels on the selected training features plus an
/// unpenalized intercept. The full Gram matrix is built once and each mask
/// solves its principal sub-system.
pub struct LinearProbe<'a> {
    dim: usize,
    classes: usize,
    gram: Vec<f64>,
    rhs: Vec<f64>,
    val_x: &'a [Vec<f64>],
    val_y: &'a [usize],
}

impl<'a> LinearProbe<'a> {
    pub fn new(
        train_x: &[Vec<f64>],
        train_y: &[usize],
        val_x: &'a [Vec<f64>],
        val_y: &'a [usize],
        classes: usize,
    ) -> Result<Self, MrfoError> {
        let dim = train_x.first().map_or(0, Vec::len);
        if dim == 0 || train_x.len() != train_y.len() || val_x.len() != val_y.len() || val_x.is_empty() {
            return Err(MrfoError::InvalidConfig("probe needs non-empty, aligned train and validation sets".into()));
        }
        if train_x.iter().chain(val_x).any(|r| r.len() != dim) {
            return Err(MrfoError::InvalidConfig("ragged embeddings".into()));
        }
        if train_x.iter().chain(val_x).flatten().any(|v| !v.is_finite()) {
            return Err(MrfoError::NonFiniteFeatures);
        }
        if let Some(&c) = train_y.iter().chain(val_y).find(|&&c| c >= classes) {
            return Err(MrfoError::InvalidConfig(format!("label {c} outside 0..{classes}")));
        }
        let m = dim + 1;
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m * classes];
        for (row, &y) in train_x.iter().zip(train_y) {
            let aug = |i: usize| if i < dim { row[i] } else { 1.0 };
            for i in 0..m {
                let ai = aug(i);
                for j in i..m {
                    gram[i * m + j] += ai * aug(j);
                }
                rhs[i * classes + y] += ai;
            }
        }
        for i in 0..m {
            for j in 0..i {
                gram[i * m + j] = gram[j * m + i];
            }
        }
        Ok(Self { dim, classes, gram, rhs, val_x, val_y })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Probe weights for the selected features; last row is the intercept.
    pub fn fit(&self, mask: &FeatureMask) -> Vec<Vec<f64>> {
        let m = self.dim + 1;
        let mut idx = mask.indices();
        idx.push(self.dim);
        let k = idx.len();
        let mut a = vec![0.0; k * k];
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                a[r * k + c] = self.gram[i * m + j];
            }
            if i < self.dim {
                a[r * k + r] += PROBE_LAMBDA;
            }
        }
        let b: Vec<Vec<f64>> = idx.iter().map(|&i| self.rhs[i * self.classes..(i + 1) * self.classes].to_vec()).collect();
        solve_spd(a, k, b)
    }

    pub fn macro_f1(&self, mask: &FeatureMask) -> f64 {
        let w = self.fit(mask);
        let idx = mask.indices();
        let pred: Vec<usize> = self
            .val_x
            .iter()
            .map(|row| {
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..self.classes {
                    let s = w[idx.len()][c] + idx.iter().enumerate().map(|(r, &i)| row[i] * w[r][c]).sum::<f64>();
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best.0
            })
            .collect();
        confusion_and_prf1(self.val_y, &pred, self.classes).expect("labels validated").macro_f1
    }

    /// `−macroF1 + lambda_red · selected fraction`.
    pub fn fitness(&self, mask: &FeatureMask, lambda_red: f64) -> f64 {
        -self.macro_f1(mask) + lambda_red * mask.count() as f64 / mask.len() as f64
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` (k×k, row-major) by
/// Cholesky; falls back to a small diagonal jitter if a pivot collapses.
fn solve_spd(a: Vec<f64>, k: usize, b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut jitter = 0.0;
    loop {
        let mut l = a.clone();
        for i in 0..k {
            l[i * k + i] += jitter;
        }
        let mut ok = true;
        'outer: for j in 0..k {
            for i in j..k {
                let mut s = l[i * k + j];
                for p in 0..j {
                    s -= l[i * k + p] * l[j * k + p];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        ok = false;
                        break 'outer;
                    }
                    l[j * k + j] = s.sqrt();
                } else {
                    l[i * k + j] = s / l[j * k + j];
                }
            }
        }
        if ok {
            let cols = b.first().map_or(0, Vec::len);
            let mut x = b;
            for c in 0..cols {
                for i in 0..k {
                    let mut s = x[i][c];
                    for p in 0..i {
                        s -= l[i * k + p] * x[p][c];
                    }
                    x[i][c] = s / l[i * k + i];
                }
                for i in (0..k).rev() {
                    let mut s = x[i][c];
                    for p in i + 1..k {
                        s -= l[p * k + i] * x[p][c];
                    }
                    x[i][c] = s / l[i * k + i];
                }
            }
            return x;
        }
        jitter = if jitter == 0.0 { 1e-9 } else { jitter * 10.0 };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelection {
    pub mask: FeatureMask,
    pub fitness: f64,
    /// Distinct masks whose fitness was computed.
    pub distinct_masks: usize,
    /// Positions that decoded to an empty mask and were repaired.
    pub repairs: usize,
}

/// Default sparsity weight.
pub const DEFAULT_LAMBDA_RED: f64 = 0.01;

/// MRFO wrapper selection over `[0,1]^dim`.
///
/// The probe is fitted on `train_*` and scored on `val_*`; callers pass
/// only participants outside the held-out test fold. Among all masks seen,
/// the lowest fitness wins, then fewer features, then the lexicographically
/// smaller bit string.
pub fn feature_select(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    classes: usize,
    config: &MrfoConfig,
    lambda_red: f64,
) -> Result<FeatureSelection, MrfoError> {
    let probe = LinearProbe::new(train_x, train_y, val_x, val_y, classes)?;
    if config.dim() != probe.dim() {
        return Err(MrfoError::InvalidConfig(format!("config dim {} vs embeddings {}", config.dim(), probe.dim())));
    }
    let mut cache: HashMap<FeatureMask, f64> = HashMap::new();
    let mut best: Option<(f64, usize, FeatureMask)> = None;
    let mut repairs = 0;
    mrfo_optimize(
        |pos| {
            let (mask, repaired) = FeatureMask::decode(pos);
            if repaired {
                repairs += 1;
                log::debug!("empty mask repaired by forcing the largest coordinate");
            }
            if let Some(&f) = cache.get(&mask) {
                return f;
            }
            let f = probe.fitness(&mask, lambda_red);
            let key = (f, mask.count(), mask.clone());
            let better = match &best {
                None => true,
                Some((bf, bc, bm)) => f < *bf || (f == *bf && (key.1, &key.2) < (*bc, bm)),
            };
            if better {
                best = Some(key);
            }
            cache.insert(mask, f);
            f
        },
        config,
    )?;
    let (fitness, _, mask) = best.expect("initial population evaluated");
    Ok(FeatureSelection { mask, fitness, distinct_masks: cache.len(), repairs })
}
