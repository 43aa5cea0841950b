//! CutMix: paste a box of image B into image A and mix labels by the exact
//! surviving area of A.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SoftLabel;
use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};
use crate::rng::Rng;
use crate::tensor::FeatureMap;

/// Half-open pixel box `[x0,x1) x [y0,y1)` taken from the partner image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of pixels that keep image A.
    pub lambda_effective: f64,
}

impl MaskBox {
    fn new(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let total = width * height;
        let area = (x1 - x0) * (y1 - y0);
        Self {
            x0,
            y0,
            x1,
            y1,
            width,
            height,
            lambda_effective: (total - area) as f64 / total as f64,
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Box of side `round(side * sqrt(1 - lambda))` centred at `(cx, cy)`,
    /// clipped to the image.
    pub fn centered(width: usize, height: usize, lambda: f64, cx: usize, cy: usize) -> Self {
        let (cut_w, cut_h) = cut_size(width, height, lambda);
        let clip = |c: usize, half_lo: usize, half_hi: usize, limit: usize| {
            (c.saturating_sub(half_lo).min(limit), (c + half_hi).min(limit))
        };
        let (x0, x1) = clip(cx, cut_w / 2, cut_w - cut_w / 2, width);
        let (y0, y1) = clip(cy, cut_h / 2, cut_h - cut_h / 2, height);
        Self::new(width, height, x0, y0, x1, y1)
    }
}

fn cut_size(width: usize, height: usize, lambda: f64) -> (usize, usize) {
    let ratio = (1.0 - lambda.clamp(0.0, 1.0)).sqrt();
    let w = ((width as f64 * ratio).round() as usize).min(width);
    let h = ((height as f64 * ratio).round() as usize).min(height);
    (w, h)
}

/// Draw `lambda ~ U(0,1)` and a box of area about `(1 - lambda) W H`,
/// positioned uniformly among the placements that lie inside the image.
pub fn sample_cutmix_box(width: usize, height: usize, rng: &mut Rng) -> MaskBox {
    let lambda: f64 = rng.gen_range(0.0..=1.0);
    let (cut_w, cut_h) = cut_size(width, height, lambda);
    let x0 = rng.gen_range(0..=width - cut_w);
    let y0 = rng.gen_range(0..=height - cut_h);
    MaskBox::new(width, height, x0, y0, x0 + cut_w, y0 + cut_h)
}

pub fn sample_cutmix_box_seeded(width: usize, height: usize, seed: u64) -> MaskBox {
    sample_cutmix_box(width, height, &mut crate::rng::rng_from(seed))
}

/// Pixels inside the box come from `b`, the rest from `a`; the label is
/// `lambda_eff * y_a + (1 - lambda_eff) * y_b`.
pub fn apply_cutmix(
    a: &Image,
    label_a: &SoftLabel,
    b: &Image,
    label_b: &SoftLabel,
    mask: &MaskBox,
) -> Result<(Image, SoftLabel)> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cutmix needs equal shapes, got {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height != mask.height || a.width != mask.width {
        return Err(Error::Shape("mask box was sampled for a different image size".into()));
    }
    let mut out = a.clone();
    for c in 0..CHANNELS {
        for y in mask.y0..mask.y1 {
            for x in mask.x0..mask.x1 {
                out.set(c, y, x, b.get(c, y, x));
            }
        }
    }
    let label = label_a.mix(label_b, mask.lambda_effective as f32)?;
    Ok((out, label))
}

/// Batch form: item `i` receives the box from item `partners[i]`.
pub fn apply_cutmix_batch(batch: &FeatureMap, partners: &[usize], mask: &MaskBox) -> Result<FeatureMap> {
    if partners.len() != batch.batch {
        return Err(Error::Shape("one partner per batch item required".into()));
    }
    if batch.height != mask.height || batch.width != mask.width {
        return Err(Error::Shape("mask box was sampled for a different image size".into()));
    }
    let mut out = batch.clone();
    let (h, w) = (batch.height, batch.width);
    for (i, &p) in partners.iter().enumerate() {
        let src = batch.item(p);
        let dst = out.item_mut(i);
        for c in 0..batch.channels {
            for y in mask.y0..mask.y1 {
                let row = (c * h + y) * w;
                dst[row + mask.x0..row + mask.x1].copy_from_slice(&src[row + mask.x0..row + mask.x1]);
            }
        }
    }
    Ok(out)
}
