//! Class-activation maps (Grad-CAM, Grad-CAM++) over one convolution block
//! of one view branch, and colour overlays.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autonn::{Graph, Tensor};
use crate::imgproc::{BinaryMask, GrayImage, ImgError, RasterImage};
use crate::model::{forward, ModelError, MultiViewInput, TrainedModel, CLASSES};
use crate::synthcohort::View;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("class {0} out of range")]
    InvalidTarget(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImgError),
}

impl From<crate::autonn::NnError> for SaliencyError {
    fn from(e: crate::autonn::NnError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Predicted,
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    GradCam,
    GradCamPp,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::GradCam, Method::GradCamPp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::GradCamPp => "gradcampp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown saliency method {s:?}"))
    }
}

/// Map at the resolution of the chosen activation layer, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub view: View,
    pub target_class: usize,
    /// Set when no activation survived the final relu; `values` is all zero.
    pub all_zero: bool,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear resampling with pixel centres aligned.
    pub fn upsample(&self, width: usize, height: usize) -> Vec<f64> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }

    /// One CSV row per image row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Grad-CAM++ pixel weights `g² / (2g² + (Σ A)·g³)` for one channel.
/// Positions with `g ≤ 0` carry no weight in the channel sum and get 0, as
/// do zero denominators.
pub fn gradcampp_alpha(acts: &[f64], grads: &[f64]) -> Vec<f64> {
    let sum_a: f64 = acts.iter().sum();
    grads
        .iter()
        .map(|&g| {
            if g <= 0.0 {
                return 0.0;
            }
            let den = 2.0 * g * g + sum_a * g * g * g;
            if den > 0.0 {
                g * g / den
            } else {
                0.0
            }
        })
        .collect()
}

/// Combines `[C, H·W]` activations and gradients into a max-normalized map.
/// Returns the map and whether it came out all zero.
pub fn cam_from_gradients(acts: &[f64], grads: &[f64], channels: usize, method: Method) -> (Vec<f64>, bool) {
    assert_eq!(acts.len(), grads.len());
    let hw = acts.len() / channels.max(1);
    let mut cam = vec![0.0; hw];
    for k in 0..channels {
        let a = &acts[k * hw..(k + 1) * hw];
        let g = &grads[k * hw..(k + 1) * hw];
        let w = match method {
            Method::GradCam => g.iter().sum::<f64>() / hw as f64,
            Method::GradCamPp => gradcampp_alpha(a, g).iter().zip(g).map(|(al, gi)| al * gi.max(0.0)).sum(),
        };
        for (c, ai) in cam.iter_mut().zip(a) {
            *c += w * ai;
        }
    }
    let max = cam.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        (cam.iter().map(|v| v.max(0.0) / max).collect(), false)
    } else {
        (vec![0.0; hw], true)
    }
}

/// Activations and target-logit gradients of `block` in `view`'s branch for
/// a single participant, plus the resolved target class.
pub fn layer_gradients(
    model: &TrainedModel,
    input: &MultiViewInput,
    target: Target,
    view: View,
    block: usize,
) -> Result<(Tensor, Tensor, usize), SaliencyError> {
    let v = view.index();
    if v >= model.config.variant.views() {
        return Err(SaliencyError::InvalidLayer(format!("variant {} has no {} branch", model.config.variant, view)));
    }
    if block >= model.config.branch_channels.len() {
        return Err(SaliencyError::InvalidLayer(format!(
            "block {block} of {}",
            model.config.branch_channels.len()
        )));
    }
    let mask = model.mask_weights();
    let mut g = Graph::new();
    let nodes = forward(&mut g, &model.params, &model.config, &[input], mask.as_deref())?;
    let logits = g.value(nodes.logits).data().to_vec();
    let class = match target {
        Target::Class(c) if c >= CLASSES => return Err(SaliencyError::InvalidTarget(c)),
        Target::Class(c) => c,
        Target::Predicted => (0..CLASSES).fold(0, |b, c| if logits[c] > logits[b] { c } else { b }),
    };
    let mut seed = vec![0.0; CLASSES];
    seed[class] = 1.0;
    g.backward_with(nodes.logits, Tensor::new(vec![1, CLASSES], seed)?)?;
    let node = nodes.feature_maps[v][block];
    let acts = g.value(node).clone();
    let grads = g.grad(node).cloned().unwrap_or_else(|| Tensor::zeros(acts.shape()));
    Ok((acts, grads, class))
}

pub fn class_activation_map(
    model: &TrainedModel,
    input: &MultiViewInput,
    target: Target,
    view: View,
    block: usize,
    method: Method,
) -> Result<Heatmap, SaliencyError> {
    let (acts, grads, class) = layer_gradients(model, input, target, view, block)?;
    let s = acts.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (values, all_zero) = cam_from_gradients(acts.data(), grads.data(), c, method);
    Ok(Heatmap { width: w, height: h, values, view, target_class: class, all_zero })
}

pub fn grad_cam(
    model: &TrainedModel,
    input: &MultiViewInput,
    target: Target,
    view: View,
    block: usize,
) -> Result<Heatmap, SaliencyError> {
    class_activation_map(model, input, target, view, block, Method::GradCam)
}

pub fn grad_cam_pp(
    model: &TrainedModel,
    input: &MultiViewInput,
    target: Target,
    view: View,
    block: usize,
) -> Result<Heatmap, SaliencyError> {
    class_activation_map(model, input, target, view, block, Method::GradCamPp)
}

/// Blue (0) through purple (0.5) to red (1).
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// `(1 - alpha)·base + alpha·colormap(heatmap)` as RGB at the base's size.
pub fn overlay(heatmap: &Heatmap, base: &GrayImage, alpha: f64) -> RasterImage {
    let alpha = alpha.clamp(0.0, 1.0);
    let (w, h) = (base.width(), base.height());
    let up = heatmap.upsample(w, h);
    let mut data = Vec::with_capacity(w * h * 3);
    for (&g, &v) in base.data().iter().zip(&up) {
        let gray = 255.0 * g;
        for c in colormap(v) {
            data.push(((1.0 - alpha) * gray + alpha * c as f64).round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(w, h, 3, data).expect("rgb buffer")
}

/// Mean heatmap value on mask pixels over the mean off the mask, after
/// upsampling to the mask's size. `None` if either side is empty or the
/// off-mask mean is zero.
pub fn vessel_ratio(heatmap: &Heatmap, vessels: &BinaryMask) -> Option<f64> {
    let up = heatmap.upsample(vessels.width, vessels.height);
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &b) in up.iter().zip(&vessels.bits) {
        if b {
            on += v;
            n_on += 1;
        } else {
            off += v;
            n_off += 1;
        }
    }
    if n_on == 0 || n_off == 0 || off == 0.0 {
        return None;
    }
    Some((on / n_on as f64) / (off / n_off as f64))
}
