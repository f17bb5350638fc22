//! Darken-and-blur and blur-and-resample corruptions on 8-bit RGB images.
//! Every stage is quantised back to 8-bit levels.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::color::{hsv_to_rgb, rgb_to_hsv};
use crate::numeric::kernels::{resize_planes, resize_taps, ResizeMode};

/// Corruption applied to an evaluation image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Lower V by `brightness` levels, then blur with a `kernel × kernel` Gaussian.
    Darken { brightness: u8, kernel: usize },
    /// Blur, shrink by `scale` with bicubic sampling, then enlarge back.
    BlurResample { kernel: usize, scale: usize },
}

impl NoiseSpec {
    pub fn case1() -> Self {
        NoiseSpec::Darken {
            brightness: 50,
            kernel: 9,
        }
    }

    pub fn case2() -> Self {
        NoiseSpec::BlurResample {
            kernel: 21,
            scale: 2,
        }
    }

    /// `case1` or `case2`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "case1" | "1" => Ok(Self::case1()),
            "case2" | "2" => Ok(Self::case2()),
            other => Err(Error::Config(format!("unknown noise case {other:?}"))),
        }
    }

    pub fn case_number(&self) -> u8 {
        match self {
            NoiseSpec::Darken { .. } => 1,
            NoiseSpec::BlurResample { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Darken { kernel, .. } => check_kernel(kernel),
            NoiseSpec::BlurResample { kernel, scale } => {
                check_kernel(kernel)?;
                if scale == 0 {
                    return Err(Error::Config("resample scale must be at least 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        match *self {
            NoiseSpec::Darken { brightness, kernel } => noise_case1(img, brightness, kernel),
            NoiseSpec::BlurResample { kernel, scale } => noise_case2(img, kernel, scale),
        }
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "Gaussian kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Standard deviation implied by an odd kernel size.
pub fn gaussian_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalised 1-D Gaussian taps of odd length `k`.
pub fn gaussian_taps(k: usize) -> Result<Vec<f64>> {
    check_kernel(k)?;
    let sigma = gaussian_sigma(k);
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable `k × k` Gaussian as a full matrix (row-major).
pub fn gaussian_kernel(k: usize) -> Result<Vec<f64>> {
    let t = gaussian_taps(k)?;
    Ok(t.iter()
        .flat_map(|a| t.iter().map(move |b| a * b))
        .collect())
}

fn to_planes(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    (0..3 * h * w)
        .map(|i| raw[(i % (h * w)) * 3 + i / (h * w)] as f64)
        .collect()
}

fn from_planes(planes: &[f64], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            planes[c * h * w + p].round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Gaussian blur with edge-replicate borders.
pub fn gaussian_blur(img: &RgbImage, k: usize) -> Result<RgbImage> {
    let taps = gaussian_taps(k)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let r = (k / 2) as isize;
    let src = to_planes(img);
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[c * h * w + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        t * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        let plane = &tmp[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        t * plane[yy * w + x]
                    })
                    .sum();
            }
        }
    }
    Ok(from_planes(&out, h, w))
}

/// Bicubic resample to `(width, height)`, quantised to 8 bits.
pub fn resize_bicubic(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::geometry(
            "resize_bicubic",
            format!("target {width}x{height}"),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rows = resize_taps::<f64>(h, height, ResizeMode::Bicubic);
    let cols = resize_taps::<f64>(w, width, ResizeMode::Bicubic);
    let out = resize_planes(&to_planes(img), 3, (h, w), &rows, &cols);
    Ok(from_planes(&out, height, width))
}

/// Subtract `brightness` from the HSV value channel, then blur.
pub fn noise_case1(img: &RgbImage, brightness: u8, kernel: usize) -> Result<RgbImage> {
    check_kernel(kernel)?;
    let mut dark = img.clone();
    for p in dark.pixels_mut() {
        let mut hsv = rgb_to_hsv(p.0);
        hsv.v = (hsv.v - brightness as f64).max(0.0);
        p.0 = hsv_to_rgb(hsv);
    }
    gaussian_blur(&dark, kernel)
}

/// Blur, shrink by `scale` and enlarge back to the original size.
pub fn noise_case2(img: &RgbImage, kernel: usize, scale: usize) -> Result<RgbImage> {
    if scale == 0 {
        return Err(Error::Config("resample scale must be at least 1".into()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < scale || h < scale {
        return Err(Error::geometry(
            "noise_case2",
            format!("{w}x{h} image with scale {scale}"),
        ));
    }
    let blurred = gaussian_blur(img, kernel)?;
    let small = resize_bicubic(&blurred, w / scale, h / scale)?;
    resize_bicubic(&small, w, h)
}
