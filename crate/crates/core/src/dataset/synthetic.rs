//! Procedural long-tailed leaf-texture dataset.
//!
//! Every image is a leaf-green base with illumination gradient and
//! sinusoidal veins, overlaid with soft-edged lesions. A class is a set of
//! [`TextureParams`]; per-image nuisance (vein phase, lesion placement, colour
//! and lighting drift, pixel noise) is drawn from a generator seeded by
//! `(spec.seed, image index)`, so rendering is order independent.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, LabeledImage};
use crate::error::{Error, Result};
use crate::raster::{hsv_to_rgb, Image, CHANNELS};
use crate::rng::{derive_seed, rng_from};

/// Per-class pattern descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Expected lesion count on a 64x64 image (scaled with area).
    pub spot_density: f32,
    /// Lesion radius in pixels at 64x64 (scaled with side length).
    pub spot_radius: f32,
    /// Vein direction in degrees.
    pub stripe_angle: f32,
    /// Width of the lesion edge falloff, pixels.
    pub blur_radius: f32,
    /// Lesion hue relative to the leaf base, degrees.
    pub hue_shift: f32,
    /// Leaf base hue drift (chlorosis), degrees.
    pub base_hue_shift: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
    pub texture_params: Vec<TextureParams>,
    /// Scale of within-class parameter jitter; 0 renders every image of a
    /// class from identical parameters (up to placement and noise).
    #[serde(default = "default_jitter")]
    pub jitter: f32,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
}

fn default_jitter() -> f32 {
    1.0
}

fn default_noise() -> f32 {
    0.04
}

/// The nine field classes, in reporting order.
pub fn onion_class_names() -> Vec<String> {
    [
        "healthy",
        "basal_rot",
        "iysv",
        "bulb_rot",
        "anthracnose",
        "twister",
        "thrips",
        "stemphylium",
        "purple_blotch",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn onion_texture(name: &str) -> TextureParams {
    let t = |spot_density, spot_radius, stripe_angle, blur_radius, hue_shift, base_hue_shift| TextureParams {
        spot_density,
        spot_radius,
        stripe_angle,
        blur_radius,
        hue_shift,
        base_hue_shift,
    };
    match name {
        "healthy" => t(0.0, 0.0, 90.0, 0.5, 0.0, 0.0),
        // one or two small cyan flecks on an otherwise healthy-looking leaf
        "basal_rot" => t(2.0, 2.0, 90.0, 0.5, 60.0, 0.0),
        "iysv" => t(6.0, 4.0, 90.0, 1.0, -50.0, 0.0),
        "bulb_rot" => t(3.0, 6.0, 0.0, 2.0, -80.0, -10.0),
        // same disease under two names: identical patterns
        "anthracnose" | "twister" => t(10.0, 2.5, 30.0, 0.6, -100.0, 0.0),
        "thrips" => t(18.0, 2.0, 90.0, 0.5, -35.0, 0.0),
        "stemphylium" => t(8.0, 3.0, 60.0, 2.5, -70.0, -30.0),
        "purple_blotch" => t(4.0, 5.0, 90.0, 1.0, 170.0, 0.0),
        _ => t(5.0, 3.0, 45.0, 1.0, -60.0, 0.0),
    }
}

/// Counts interpolated geometrically from `max_count` down to
/// `round(max_count / ratio)` across `classes` ranks.
pub fn geometric_counts(classes: usize, max_count: usize, ratio: f64) -> Vec<usize> {
    if classes == 1 {
        return vec![max_count];
    }
    let min = (max_count as f64 / ratio).round().max(1.0);
    let step = (min / max_count as f64).powf(1.0 / (classes - 1) as f64);
    (0..classes)
        .map(|k| {
            if k == classes - 1 {
                min as usize
            } else {
                (max_count as f64 * step.powi(k as i32)).round() as usize
            }
        })
        .collect()
}

impl SyntheticSpec {
    /// The nine-class field analog: healthy is the largest class and
    /// basal rot the smallest, with `max_count / ratio` images.
    pub fn onion_long_tail(max_count: usize, ratio: f64, image_size: usize, seed: u64) -> Self {
        let names = onion_class_names();
        // rank order, most frequent first
        let rank = [
            "healthy",
            "thrips",
            "iysv",
            "stemphylium",
            "purple_blotch",
            "anthracnose",
            "twister",
            "bulb_rot",
            "basal_rot",
        ];
        let by_rank = geometric_counts(rank.len(), max_count, ratio);
        let counts = names
            .iter()
            .map(|n| by_rank[rank.iter().position(|r| r == n).unwrap()])
            .collect();
        let texture_params = names.iter().map(|n| onion_texture(n)).collect();
        Self {
            class_names: names,
            counts,
            image_size,
            seed,
            texture_params,
            jitter: default_jitter(),
            noise_std: default_noise(),
        }
    }

    /// Default desk-scale set: 64x64, healthy=266, basal rot=35 (ratio 7.6).
    pub fn desk_default(seed: u64) -> Self {
        Self::onion_long_tail(266, 7.6, 64, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c == 0 {
            return Err(Error::Config("synthetic spec has no classes".into()));
        }
        if self.counts.len() != c || self.texture_params.len() != c {
            return Err(Error::Config(format!(
                "synthetic spec has {c} names, {} counts, {} texture params",
                self.counts.len(),
                self.texture_params.len()
            )));
        }
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class `{}` has a zero count", self.class_names[i])));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

struct Lesion {
    cx: f32,
    cy: f32,
    radius: f32,
}

fn render(spec: &SyntheticSpec, params: &TextureParams, seed: u64) -> Image {
    let mut rng = rng_from(seed);
    let s = spec.image_size;
    let sf = s as f32;
    let scale = sf / 64.0;
    let j = spec.jitter;
    let sym = |rng: &mut crate::rng::Rng, amount: f32| -> f32 { rng.gen_range(-1.0f32..=1.0) * amount * j };

    let base_hue = (100.0 + params.base_hue_shift + sym(&mut rng, 8.0)) / 360.0;
    let base_sat = 0.55 + sym(&mut rng, 0.1);
    let base_val = 0.6 + sym(&mut rng, 0.1);
    let angle = (params.stripe_angle + sym(&mut rng, 12.0)).to_radians();
    let (nx, ny) = (angle.cos(), angle.sin());
    let vein_freq = 6.0 + sym(&mut rng, 1.5);
    let vein_amp = 0.08 + sym(&mut rng, 0.03);
    let vein_phase = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
    let light_dir = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
    let light_amp = 0.12 * j.min(1.0);
    let lesion_hue = base_hue + (params.hue_shift + sym(&mut rng, 12.0)) / 360.0;
    let lesion_sat = 0.75 + sym(&mut rng, 0.1);
    let lesion_val = 0.5 + sym(&mut rng, 0.1);
    let blur = (params.blur_radius * scale * (1.0 + sym(&mut rng, 0.3))).max(0.3);

    let expected = params.spot_density * (1.0 + sym(&mut rng, 0.4)).max(0.1) * scale * scale;
    let lesion_count = if expected > 0.0 {
        Poisson::new(f64::from(expected)).map(|p| p.sample(&mut rng) as usize).unwrap_or(0).max(1)
    } else {
        0
    };
    let lesions: Vec<Lesion> = (0..lesion_count)
        .map(|_| Lesion {
            cx: rng.gen_range(0.0..sf),
            cy: rng.gen_range(0.0..sf),
            radius: (params.spot_radius * scale * (1.0 + rng.gen_range(-0.3f32..=0.3) * j)).max(0.5),
        })
        .collect();

    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).unwrap();
    let mut data = vec![0.0f32; CHANNELS * s * s];
    let plane = s * s;
    let (lx, ly) = (light_dir.cos(), light_dir.sin());
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let u = (px * nx + py * ny) / sf;
            let light = light_amp * ((px - sf / 2.0) * lx + (py - sf / 2.0) * ly) / sf;
            let v = base_val + vein_amp * (std::f32::consts::TAU * vein_freq * u + vein_phase).sin() + light;
            let (mut r, mut g, mut b) = hsv_to_rgb(base_hue, base_sat, v.clamp(0.0, 1.0));

            let mut cover = 0.0f32;
            for l in &lesions {
                let d = ((px - l.cx).powi(2) + (py - l.cy).powi(2)).sqrt();
                let w = ((l.radius - d) / blur + 0.5).clamp(0.0, 1.0);
                cover = cover.max(w);
            }
            if cover > 0.0 {
                let (lr, lg, lb) = hsv_to_rgb(lesion_hue, lesion_sat, (lesion_val + light).clamp(0.0, 1.0));
                r += cover * (lr - r);
                g += cover * (lg - g);
                b += cover * (lb - b);
            }

            let i = y * s + x;
            for (c, val) in [r, g, b].into_iter().enumerate() {
                data[c * plane + i] = (val + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        height: s,
        width: s,
        data,
    }
}

/// Render every image of `spec`. Labels follow `spec.class_names` order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<LabeledImage>, ClassCatalog)> {
    spec.validate()?;
    let labels: Vec<usize> = spec
        .counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let images = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let seed = derive_seed(spec.seed, i as u64);
            LabeledImage {
                pixels: render(spec, &spec.texture_params[label], seed),
                label,
                source_id: format!("synthetic:{}:{i}", spec.seed),
            }
        })
        .collect();
    let catalog = ClassCatalog::new(spec.class_names.clone(), spec.counts.clone())?;
    Ok((images, catalog))
}
