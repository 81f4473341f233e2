use super::{at_clamped, GrayImage, ImgError, VesselnessMap};

/// How the structureness sensitivity `c` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrangiC {
    Fixed(f64),
    /// Half of the largest Hessian norm seen at each scale.
    HalfMaxStructureness,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrangiParams {
    pub scales: Vec<f64>,
    pub beta: f64,
    pub c: FrangiC,
}

impl Default for FrangiParams {
    fn default() -> Self {
        Self { scales: vec![1.0, 2.0, 4.0], beta: 0.5, c: FrangiC::HalfMaxStructureness }
    }
}

/// Scale-normalized second derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Hessian {
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

/// Sampled Gaussian of radius `ceil(3σ)`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn smooth(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, g)| g * at_clamped(data, w, h, x as isize + i as isize - r, y as isize)).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, g)| g * at_clamped(&tmp, w, h, x as isize, y as isize + i as isize - r)).sum();
        }
    }
    out
}

/// Gaussian smoothing at `sigma` followed by central second differences,
/// multiplied by σ².
pub fn hessian(data: &[f64], w: usize, h: usize, sigma: f64) -> Hessian {
    let s = smooth(data, w, h, sigma);
    let norm = sigma * sigma;
    let mut hs = Hessian { xx: vec![0.0; w * h], xy: vec![0.0; w * h], yy: vec![0.0; w * h] };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let f = |dx: isize, dy: isize| at_clamped(&s, w, h, x + dx, y + dy);
            let i = y as usize * w + x as usize;
            let c = f(0, 0);
            hs.xx[i] = norm * (f(1, 0) - 2.0 * c + f(-1, 0));
            hs.yy[i] = norm * (f(0, 1) - 2.0 * c + f(0, -1));
            hs.xy[i] = norm * (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1)) / 4.0;
        }
    }
    hs
}

/// Eigenvalues of `[[a, b], [b, d]]` ordered so that |λ1| ≤ |λ2|.
fn eigen_sorted(a: f64, b: f64, d: f64) -> (f64, f64) {
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (m1, m2) = (mean + r, mean - r);
    if m1.abs() <= m2.abs() {
        (m1, m2)
    } else {
        (m2, m1)
    }
}

/// Unnormalized single-scale vesselness of dark vessels on a bright background.
pub fn vesselness_at_scale(img: &GrayImage, sigma: f64, beta: f64, c: FrangiC) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let inverted: Vec<f64> = img.data().iter().map(|v| 1.0 - v).collect();
    let hs = hessian(&inverted, w, h, sigma);
    let eig: Vec<(f64, f64)> = (0..w * h).map(|i| eigen_sorted(hs.xx[i], hs.xy[i], hs.yy[i])).collect();
    let c = match c {
        FrangiC::Fixed(c) => c,
        FrangiC::HalfMaxStructureness => {
            0.5 * eig.iter().map(|(l1, l2)| (l1 * l1 + l2 * l2).sqrt()).fold(0.0, f64::max)
        }
    };
    if c <= 0.0 {
        return vec![0.0; w * h];
    }
    eig.iter()
        .map(|&(l1, l2)| {
            if l2 >= 0.0 {
                return 0.0;
            }
            let rb = l1.abs() / l2.abs();
            let s2 = l1 * l1 + l2 * l2;
            (-rb * rb / (2.0 * beta * beta)).exp() * (1.0 - (-s2 / (2.0 * c * c)).exp())
        })
        .collect()
}

/// Multi-scale vesselness: maximum over scales, divided by its global maximum.
pub fn frangi(img: &GrayImage, params: &FrangiParams) -> Result<VesselnessMap, ImgError> {
    let FrangiParams { scales, beta, c } = params;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) || scales.windows(2).any(|p| p[1] <= p[0]) {
        return Err(ImgError::InvalidParam(format!("scales {scales:?}")));
    }
    if !(*beta > 0.0) || matches!(c, FrangiC::Fixed(v) if !(*v > 0.0)) {
        return Err(ImgError::InvalidParam(format!("beta {beta}, c {c:?}")));
    }
    let mut best = vec![0.0f64; img.width() * img.height()];
    for &sigma in scales {
        for (b, v) in best.iter_mut().zip(vesselness_at_scale(img, sigma, *beta, *c)) {
            *b = b.max(v);
        }
    }
    let peak = best.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        best.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(VesselnessMap { width: img.width(), height: img.height(), data: best, scales: scales.clone() })
}
