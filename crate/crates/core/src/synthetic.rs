//! Procedural spiral and wave drawings.
//!
//! Healthy strokes follow the template with slow, low-amplitude wobble;
//! parkinsonian strokes add a high-frequency perpendicular tremor with
//! drifting amplitude and uneven pressure. Used for fixtures, benches and
//! demos. These images are not clinical data.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{ClassLabel, DrawingType};
use crate::error::Result;

/// Shape parameters in units of the canvas side, so drawings look alike at
/// every resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Peak tremor displacement range, fraction of the side.
    pub tremor_amplitude: (f64, f64),
    /// Tremor wavelength range along the stroke, fraction of the side.
    pub tremor_wavelength: (f64, f64),
    /// Slow wobble amplitude range, fraction of the side.
    pub wobble_amplitude: (f64, f64),
    /// Stroke half-width range in pixels at a 256 px canvas.
    pub pen_radius: (f64, f64),
    /// Relative pen pressure variation along the stroke.
    pub pressure_jitter: f64,
}

impl SynthParams {
    pub fn default_for(_drawing_type: DrawingType, label: ClassLabel) -> Self {
        match label {
            ClassLabel::Healthy => Self {
                tremor_amplitude: (0.0, 0.0015),
                tremor_wavelength: (0.02, 0.05),
                wobble_amplitude: (0.002, 0.012),
                pen_radius: (1.0, 1.8),
                pressure_jitter: 0.05,
            },
            ClassLabel::Parkinson => Self {
                tremor_amplitude: (0.004, 0.012),
                tremor_wavelength: (0.02, 0.05),
                wobble_amplitude: (0.004, 0.02),
                pen_radius: (0.9, 2.0),
                pressure_jitter: 0.3,
            },
        }
    }
}

fn range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Template centre line, densely sampled.
fn template(drawing_type: DrawingType, side: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let step = 0.35;
    let mut pts = Vec::new();
    match drawing_type {
        DrawingType::Spiral => {
            let turns = rng.gen_range(2.6..3.6);
            let outer = side * rng.gen_range(0.36..0.44);
            let (cx, cy) = (side / 2.0 + rng.gen_range(-0.03..0.03) * side, side / 2.0 + rng.gen_range(-0.03..0.03) * side);
            let theta_max = turns * std::f64::consts::TAU;
            let b = outer / theta_max;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut theta: f64 = 0.05;
            while theta < theta_max {
                let r = b * theta;
                pts.push((cx + r * (theta + phase).cos(), cy + r * (theta + phase).sin()));
                // keep arc length per step near `step` pixels
                theta += step / (b * (1.0 + theta * theta).sqrt());
            }
        }
        DrawingType::Wave => {
            let amp = side * rng.gen_range(0.1..0.16);
            let period = side / rng.gen_range(3.5..5.5);
            let y0 = side / 2.0 + rng.gen_range(-0.05..0.05) * side;
            let (x_start, x_end) = (side * 0.07, side * 0.93);
            let phase = rng.gen_range(-0.5..0.5);
            let mut x = x_start;
            while x < x_end {
                let arg = std::f64::consts::TAU * (x - x_start) / period + phase;
                pts.push((x, y0 - amp * arg.sin()));
                let slope = amp * std::f64::consts::TAU / period * arg.cos();
                x += step / (1.0 + slope * slope).sqrt();
            }
        }
    }
    pts
}

/// Render one drawing on a square white canvas.
pub fn render_drawing(drawing_type: DrawingType, params: &SynthParams, size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = size as f64;
    let pts = template(drawing_type, side, &mut rng);

    let tremor_amp = range(&mut rng, params.tremor_amplitude) * side;
    let tremor_len = range(&mut rng, params.tremor_wavelength) * side;
    let wobble_amp = range(&mut rng, params.wobble_amplitude) * side;
    let wobble_len = side * rng.gen_range(0.3..0.8);
    let radius = range(&mut rng, params.pen_radius) * side / 256.0;
    let (p1, p2) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let ink = rng.gen_range(20.0..70.0);

    let mut arc = 0.0;
    let mut amp_mod = 1.0f64;
    let mut pressure = 1.0f64;
    let mut stroke = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let (x, y) = pts[i];
        let (ax, ay) = pts[i.saturating_sub(1)];
        let (bx, by) = pts[(i + 1).min(pts.len() - 1)];
        let (tx, ty) = (bx - ax, by - ay);
        let norm = (tx * tx + ty * ty).sqrt().max(1e-9);
        let (nx, ny) = (-ty / norm, tx / norm);
        if i > 0 {
            arc += ((x - ax).powi(2) + (y - ay).powi(2)).sqrt();
        }
        // slow random walks for tremor envelope and pen pressure
        amp_mod = (amp_mod + rng.gen_range(-0.02..0.02)).clamp(0.5, 1.5);
        pressure = (pressure + rng.gen_range(-0.02..0.02) * params.pressure_jitter * 10.0)
            .clamp(1.0 - params.pressure_jitter, 1.0 + params.pressure_jitter);
        let d = tremor_amp * amp_mod * (std::f64::consts::TAU * arc / tremor_len + p1).sin()
            + wobble_amp * (std::f64::consts::TAU * arc / wobble_len + p2).sin();
        stroke.push((x + nx * d, y + ny * d, radius * pressure));
    }

    // coverage buffer, max over stamped discs
    let n = size as usize;
    let mut cover = vec![0f32; n * n];
    for &(x, y, r) in &stroke {
        let reach = r + 1.0;
        let (xlo, xhi) = ((x - reach).floor().max(0.0) as usize, ((x + reach).ceil() as usize).min(n - 1));
        let (ylo, yhi) = ((y - reach).floor().max(0.0) as usize, ((y + reach).ceil() as usize).min(n - 1));
        for py in ylo..=yhi {
            for px in xlo..=xhi {
                let dist = ((px as f64 + 0.5 - x).powi(2) + (py as f64 + 0.5 - y).powi(2)).sqrt();
                let c = (r + 0.5 - dist).clamp(0.0, 1.0) as f32;
                let cell = &mut cover[py * n + px];
                *cell = cell.max(c);
            }
        }
    }

    let sheet = rng.gen_range(240.0..255.0);
    RgbImage::from_fn(size, size, |x, y| {
        let c = cover[y as usize * n + x as usize] as f64;
        let v = sheet * (1.0 - c) + ink * c;
        let v = v.round().clamp(0.0, 255.0) as u8;
        Rgb([v, v, v.saturating_add((c * 25.0) as u8)])
    })
}

/// Write `<root>/<type>/<class>/<type>_<class>_NNN.png` for both types and
/// classes. Every image has its own seed derived from `seed`.
pub fn generate_corpus(root: &Path, per_class: usize, size: u32, seed: u64) -> Result<()> {
    for (ti, t) in DrawingType::ALL.into_iter().enumerate() {
        for (li, l) in ClassLabel::ALL.into_iter().enumerate() {
            let dir = root.join(t.as_str()).join(l.as_str());
            std::fs::create_dir_all(&dir)?;
            let params = SynthParams::default_for(t, l);
            for i in 0..per_class {
                let s = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(((ti * 2 + li) * 100_000 + i) as u64);
                render_drawing(t, &params, size, s).save(dir.join(format!("{t}_{l}_{i:03}.png")))?;
            }
        }
    }
    Ok(())
}
