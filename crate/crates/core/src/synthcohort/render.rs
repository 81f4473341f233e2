use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ParticipantRecord, View};
use crate::imgproc::{BinaryMask, RasterImage};

/// Side of every rendered raster.
pub const RAW_SIZE: usize = 144;
/// Side of the square crop handed to preprocessing.
pub const ROI_SIZE: usize = 128;

const RING: [View; 4] = [View::Up, View::Right, View::Down, View::Left];
const STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderOptions {
    /// Darken the straight view far below the QC brightness floor.
    pub corrupt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedParticipant {
    /// Grayscale rasters in [`View::ALL`] order.
    pub images: Vec<RasterImage>,
    /// Pixels inside a drawn vessel, full raster resolution.
    pub vessel_masks: Vec<BinaryMask>,
}

impl RenderedParticipant {
    pub fn total_vessel_pixels(&self) -> usize {
        self.vessel_masks.iter().map(BinaryMask::count).sum()
    }
}

pub fn render_views(record: &ParticipantRecord, seed: u64) -> Vec<RasterImage> {
    render_participant(record, seed, RenderOptions::default()).images
}

/// The home view draws a vessel in full; one neighbouring view shows its
/// first half, shifted towards that gaze direction.
pub fn vessel_visibility(k: usize) -> (View, View) {
    let home = View::ALL[k % 5];
    let turn = k / 5;
    let partial = match RING.iter().position(|&v| v == home) {
        None => RING[turn % 4],
        Some(j) if turn % 2 == 0 => RING[(j + 1) % 4],
        Some(j) => RING[(j + 3) % 4],
    };
    (home, partial)
}

fn gaze_shift(v: View) -> (f64, f64) {
    match v {
        View::Straight => (0.0, 0.0),
        View::Up => (0.0, -6.0),
        View::Down => (0.0, 6.0),
        View::Left => (-6.0, 0.0),
        View::Right => (6.0, 0.0),
    }
}

fn stream_of(id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) | 1 << 63
}

struct Vessel {
    /// Centerline samples in ROI coordinates with the local radius.
    path: Vec<(f64, f64, f64)>,
    contrast: f64,
    home: View,
    partial: View,
}

fn trace_vessel(rng: &mut ChaCha8Rng, record: &ParticipantRecord, k: usize) -> Vessel {
    let t = &record.truth;
    let lim = ROI_SIZE as f64;
    let length = rng.random_range(64.0..76.0);
    let (mut bx, mut by) = (rng.random_range(12.0..lim - 12.0), rng.random_range(12.0..lim - 12.0));
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(14.0..22.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let sd = t.caliber_var_px2.sqrt();
    let caliber = Normal::new(t.caliber_mean_px, sd).expect("sd > 0").sample(rng).clamp(0.8, 5.0);
    let w_period = rng.random_range(20.0..40.0);
    let w_phase = rng.random_range(0.0..2.0 * PI);
    let turn = Normal::new(0.0, 0.04).expect("sd > 0");
    let contrast = rng.random_range(0.4..0.5);

    let (lo, hi) = (8.0, lim - 8.0);
    let mut path = Vec::new();
    let mut s = 0.0;
    while s <= length {
        let wiggle = t.tortuosity_px * (2.0 * PI * s / period + phase).sin();
        let (x, y) = (bx - wiggle * heading.sin(), by + wiggle * heading.cos());
        let width = (caliber + 0.8 * sd * (2.0 * PI * s / w_period + w_phase).sin()).max(0.6);
        path.push((x, y, width / 2.0));
        heading += turn.sample(rng);
        // bounce off the crop border so every vessel keeps its full length
        if !(lo..hi).contains(&(bx + STEP * heading.cos())) {
            heading = PI - heading;
        }
        if !(lo..hi).contains(&(by + STEP * heading.sin())) {
            heading = -heading;
        }
        bx = (bx + STEP * heading.cos()).clamp(lo, hi);
        by = (by + STEP * heading.sin()).clamp(lo, hi);
        s += STEP;
    }
    let (home, partial) = vessel_visibility(k);
    Vessel { path, contrast, home, partial }
}

struct Canvas {
    darkness: Vec<f64>,
    mask: Vec<bool>,
}

impl Canvas {
    fn stamp(&mut self, cx: f64, cy: f64, r: f64, contrast: f64) {
        let n = RAW_SIZE as isize;
        let x0 = ((cx - r - 1.0).floor() as isize).max(0);
        let x1 = ((cx + r + 1.0).ceil() as isize).min(n - 1);
        let y0 = ((cy - r - 1.0).floor() as isize).max(0);
        let y1 = ((cy + r + 1.0).ceil() as isize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let i = y as usize * RAW_SIZE + x as usize;
                let cov = (r + 0.5 - d).clamp(0.0, 1.0);
                self.darkness[i] = self.darkness[i].max(cov * contrast);
                if d <= r {
                    self.mask[i] = true;
                }
            }
        }
    }
}

/// Renders all five views and their vessel masks.
///
/// The output depends only on `record` and `seed`: the stream is keyed by
/// the participant id, not by position in the cohort.
pub fn render_participant(record: &ParticipantRecord, seed: u64, options: RenderOptions) -> RenderedParticipant {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_of(&record.participant_id));
    let vessels: Vec<Vessel> = (0..record.truth.vessel_count).map(|k| trace_vessel(&mut rng, record, k)).collect();
    let noise = Normal::new(0.0, 0.012).expect("sd > 0");

    let mut images = Vec::with_capacity(5);
    let mut vessel_masks = Vec::with_capacity(5);
    for &view in &View::ALL {
        let roi = record.view(view).roi;
        let mut canvas = Canvas { darkness: vec![0.0; RAW_SIZE * RAW_SIZE], mask: vec![false; RAW_SIZE * RAW_SIZE] };
        for v in &vessels {
            let points = if v.home == view {
                &v.path[..]
            } else if v.partial == view {
                &v.path[..v.path.len() / 2]
            } else {
                continue;
            };
            let (dx, dy) = if v.home == view { (0.0, 0.0) } else { gaze_shift(view) };
            for &(x, y, r) in points {
                canvas.stamp(roi.x as f64 + x + dx, roi.y as f64 + y + dy, r, v.contrast);
            }
        }

        let base = rng.random_range(0.72..0.8);
        let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let highlights: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
            .map(|_| {
                let lim = RAW_SIZE as f64;
                (rng.random_range(0.0..lim), rng.random_range(0.0..lim), rng.random_range(1.0..2.5))
            })
            .collect();
        let dim = if options.corrupt && view == View::Straight { 0.1 } else { 1.0 };
        let mut data = Vec::with_capacity(RAW_SIZE * RAW_SIZE);
        for y in 0..RAW_SIZE {
            for x in 0..RAW_SIZE {
                let (u, w) = (x as f64 / RAW_SIZE as f64 - 0.5, y as f64 / RAW_SIZE as f64 - 0.5);
                let mut v = (base + gx * u + gy * w) * (1.0 - canvas.darkness[y * RAW_SIZE + x]);
                if highlights.iter().any(|&(hx, hy, hr)| (x as f64 - hx).powi(2) + (y as f64 - hy).powi(2) <= hr * hr) {
                    v = 1.0;
                }
                v += noise.sample(&mut rng);
                data.push(((v * dim).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        images.push(RasterImage::new(RAW_SIZE, RAW_SIZE, 1, data).expect("valid dimensions"));
        vessel_masks.push(BinaryMask { width: RAW_SIZE, height: RAW_SIZE, bits: canvas.mask });
    }
    RenderedParticipant { images, vessel_masks }
}
