use super::{GrayImage, ImgError, Warning};

const BINS: usize = 256;

/// Percentile `p` ∈ [0,100] with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Linear stretch sending the `p_low` percentile to 0 and `p_high` to 1.
///
/// When the two percentiles coincide the result is a uniform 0.5 image and
/// [`Warning::DegenerateRange`] is returned.
pub fn normalize_intensity(img: &GrayImage, p_low: f64, p_high: f64) -> Result<(GrayImage, Option<Warning>), ImgError> {
    if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
        return Err(ImgError::InvalidParam(format!("percentiles ({p_low}, {p_high})")));
    }
    let lo = percentile(img.data(), p_low);
    let hi = percentile(img.data(), p_high);
    if hi <= lo {
        log::warn!("degenerate intensity range at {lo}");
        return Ok((GrayImage::constant(img.width(), img.height(), 0.5), Some(Warning::DegenerateRange)));
    }
    let data = img.data().iter().map(|v| (v - lo) / (hi - lo)).collect();
    Ok((GrayImage::from_clamped(img.width(), img.height(), data), None))
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile gets a 256-bin histogram clipped at `clip_limit` times the
/// uniform bin height, with the clipped mass spread evenly over all bins.
/// Tile mappings are the normalized CDF, blended bilinearly between tile
/// centres and held constant beyond the outermost centres.
pub fn clahe(img: &GrayImage, tiles_x: usize, tiles_y: usize, clip_limit: f64) -> Result<GrayImage, ImgError> {
    if tiles_x == 0 || tiles_y == 0 || tiles_x > img.width() || tiles_y > img.height() {
        return Err(ImgError::InvalidParam(format!("{tiles_x}x{tiles_y} tiles")));
    }
    if !(clip_limit > 0.0) {
        return Err(ImgError::InvalidParam(format!("clip limit {clip_limit}")));
    }
    let (w, h) = (img.width(), img.height());
    let bin = |v: f64| ((v * 255.0).round() as usize).min(BINS - 1);
    let xb: Vec<usize> = (0..=tiles_x).map(|i| i * w / tiles_x).collect();
    let yb: Vec<usize> = (0..=tiles_y).map(|i| i * h / tiles_y).collect();

    let mut maps = vec![[0.0f64; BINS]; tiles_x * tiles_y];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0.0f64; BINS];
            for y in yb[ty]..yb[ty + 1] {
                for x in xb[tx]..xb[tx + 1] {
                    hist[bin(img.get(x, y))] += 1.0;
                }
            }
            let total = ((xb[tx + 1] - xb[tx]) * (yb[ty + 1] - yb[ty])) as f64;
            let limit = clip_limit * total / BINS as f64;
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let share = excess / BINS as f64;
            let map = &mut maps[ty * tiles_x + tx];
            let mut acc = 0.0;
            for (m, c) in map.iter_mut().zip(hist) {
                acc += c + share;
                *m = acc / total;
            }
        }
    }

    let centres = |b: &[usize]| -> Vec<f64> { b.windows(2).map(|p| (p[0] + p[1]) as f64 / 2.0 - 0.5).collect() };
    let cx = centres(&xb);
    let cy = centres(&yb);
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (x0, x1, fx) = locate(&cx, x as f64);
            let b = bin(img.get(x, y));
            let m = |ty: usize, tx: usize| maps[ty * tiles_x + tx][b];
            let top = m(y0, x0) * (1.0 - fx) + m(y0, x1) * fx;
            let bottom = m(y1, x0) * (1.0 - fx) + m(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(GrayImage::from_clamped(w, h, out))
}
