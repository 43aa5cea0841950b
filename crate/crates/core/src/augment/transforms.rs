//! Pure image transforms. All operate on planar RGB [`Image`]s and return a
//! new image; borders are handled by edge replication unless noted.

use crate::error::{Error, Result};
use crate::raster::{hsv_to_rgb, rgb_to_hsv, Image, CHANNELS};

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, img.height - 1 - y, x));
            }
        }
    }
    out
}

/// Reflect-101 index into `0..n` (`-1 -> 1`, `n -> n-2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn bilinear_reflect(img: &Image, c: usize, sy: f32, sx: f32) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p = |yy: isize, xx: isize| img.get(c, reflect(yy, img.height), reflect(xx, img.width));
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x0 + 1) * fx;
    let bottom = p(y0 + 1, x0) * (1.0 - fx) + p(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotate about the image centre by `degrees` (counter-clockwise), bilinear,
/// reflect-101 borders.
pub fn rotate(img: &Image, degrees: f32) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, co) = degrees.to_radians().sin_cos();
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            // inverse map output -> source
            let sx = co * dx - s * dy + cx;
            let sy = s * dx + co * dy + cy;
            for c in 0..CHANNELS {
                out.set(c, y, x, bilinear_reflect(img, c, sy, sx));
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centres.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("resize target must be positive, got {height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f32 / height as f32;
    let sx = img.width as f32 / width as f32;
    let mut out = Image::filled(height, width, 0.0);
    for y in 0..height {
        let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = src_y - y0 as f32;
        for x in 0..width {
            let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = src_x - x0 as f32;
            for c in 0..CHANNELS {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// `(x - mean) / std` per channel.
pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Result<Image> {
    if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!("normalization std must be positive, got {std:?}")));
    }
    let mut out = img.clone();
    let plane = img.plane();
    for c in 0..CHANNELS {
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v = (*v - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// Correlate each channel with a `k x k` kernel (row-major), replicate borders.
fn filter2d(img: &Image, kernel: &[f32], k: usize) -> Image {
    let r = (k / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    let yy = (y + ky - r).clamp(0, h - 1) as usize;
                    for kx in 0..k as isize {
                        let xx = (x + kx - r).clamp(0, w - 1) as usize;
                        acc += kernel[(ky as usize) * k + kx as usize] * img.get(c, yy, xx);
                    }
                }
                out.set(c, y as usize, x as usize, acc);
            }
        }
    }
    out
}

/// Gaussian kernel width from the usual `sigma = 0.3((k-1)/2 - 1) + 0.8`.
pub fn gaussian_blur(img: &Image, k: usize) -> Image {
    let sigma = 0.3 * ((k as f32 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (k / 2) as isize;
    let g: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = g.iter().sum();
    let g: Vec<f32> = g.iter().map(|v| v / sum).collect();
    let kernel: Vec<f32> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    filter2d(img, &kernel, k)
}

/// Blur along a line through the kernel centre at `angle_deg`.
pub fn motion_blur(img: &Image, k: usize, angle_deg: f32) -> Image {
    let mut kernel = vec![0.0f32; k * k];
    let r = (k / 2) as f32;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let steps = 4 * k;
    for i in 0..=steps {
        let t = -r + 2.0 * r * i as f32 / steps as f32;
        let x = (r + t * c).round() as usize;
        let y = (r + t * s).round() as usize;
        kernel[y.min(k - 1) * k + x.min(k - 1)] = 1.0;
    }
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    filter2d(img, &kernel, k)
}

pub fn median_blur(img: &Image, k: usize) -> Image {
    let r = (k / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    let mut window = Vec::with_capacity(k * k);
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h - 1) as usize;
                        let xx = (x + dx).clamp(0, w - 1) as usize;
                        window.push(img.get(c, yy, xx));
                    }
                }
                let mid = window.len() / 2;
                window.select_nth_unstable_by(mid, f32::total_cmp);
                out.set(c, y as usize, x as usize, window[mid]);
            }
        }
    }
    out
}

/// Rotate hue by `degrees`, keeping saturation and value.
pub fn hue_shift(img: &Image, degrees: f32) -> Image {
    let mut out = img.clone();
    let plane = img.plane();
    let delta = degrees / 360.0;
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(img.data[i], img.data[plane + i], img.data[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(h + delta, s, v);
        out.data[i] = r;
        out.data[plane + i] = g;
        out.data[2 * plane + i] = b;
    }
    out
}

/// Rearrange a `grid x grid` tiling: output tile `t` is input tile `perm[t]`.
/// Rows/columns beyond `grid * (side / grid)` are left in place.
pub fn grid_shuffle(img: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    if grid == 0 || perm.len() != grid * grid {
        return Err(Error::Config(format!("grid shuffle needs {} permutation entries", grid * grid)));
    }
    let th = img.height / grid;
    let tw = img.width / grid;
    if th == 0 || tw == 0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / grid * th, dst % grid * tw);
        let (sy, sx) = (src / grid * th, src % grid * tw);
        for c in 0..CHANNELS {
            for y in 0..th {
                for x in 0..tw {
                    out.set(c, dy + y, dx + x, img.get(c, sy + y, sx + x));
                }
            }
        }
    }
    Ok(out)
}

/// Hole as `(y0, x0, height, width)`.
pub type Hole = (usize, usize, usize, usize);

pub fn coarse_dropout(img: &Image, holes: &[Hole], fill: f32) -> Image {
    let mut out = img.clone();
    for &(y0, x0, h, w) in holes {
        for c in 0..CHANNELS {
            for y in y0..(y0 + h).min(img.height) {
                for x in x0..(x0 + w).min(img.width) {
                    out.set(c, y, x, fill);
                }
            }
        }
    }
    out
}
