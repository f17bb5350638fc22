//! Samples, dataset ingestion, the synthetic generator, checkpoint archives
//! and run configuration.

pub mod archive;
pub mod config;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Binary `(H, W)` mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width) as u8)
            .collect();
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positives() as f64 / self.data.len() as f64
    }

    /// Mask as a `{0, 1}` float target.
    pub fn to_target<F: Scalar>(&self) -> Vec<F> {
        self.data
            .iter()
            .map(|&v| if v == 1 { F::one() } else { F::zero() })
            .collect()
    }

    /// `{0, 255}` grayscale image.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) {
                255
            } else {
                0
            }])
        })
    }

    /// Binarise a grayscale image with `level > 127`.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| (p.0[0] > 127) as u8).collect();
        Mask {
            height: h as usize,
            width: w as usize,
            data,
        }
    }
}

/// One image/mask pair. `image` is `(3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub source: Option<(PathBuf, PathBuf)>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.height() || s[2] != mask.width() {
            return Err(Error::dim("sample", s, &[mask.height(), mask.width()]));
        }
        Ok(SampleRecord {
            id: id.into(),
            image,
            mask,
            source: None,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// 8-bit RGB image to a `(3, H, W)` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Inverse of [`rgb_to_tensor`], rounding to the nearest level.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("tensor_to_rgb", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            (d[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

/// Dataset split directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where a split lives and the size samples are resized to.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub target_size: usize,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, target_size: usize) -> Self {
        DatasetManifest {
            root: root.into(),
            split,
            target_size,
        }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str()).join("images")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str()).join("masks")
    }

    /// `(stem, image path, mask path)` in lexicographic stem order.
    pub fn pairs(&self) -> Result<Vec<(String, PathBuf, PathBuf)>> {
        let (images, masks) = (self.images_dir(), self.masks_dir());
        let mut stems = png_stems(&images)?;
        stems.sort();
        stems
            .into_iter()
            .map(|stem| {
                let mask = masks.join(format!("{stem}.png"));
                if !mask.is_file() {
                    return Err(Error::Ingestion(format!(
                        "no mask for image {stem:?} (expected {})",
                        mask.display()
                    )));
                }
                Ok((stem.clone(), images.join(format!("{stem}.png")), mask))
            })
            .collect()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Decode one image/mask pair, resizing to `size × size` (bilinear image,
/// nearest mask) and binarising the mask.
pub fn load_sample(
    id: &str,
    image_path: &Path,
    mask_path: &Path,
    size: usize,
) -> Result<SampleRecord> {
    let rgb = image::open(image_path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", image_path.display())))?
        .to_rgb8();
    let gray = image::open(mask_path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    let s = size as u32;
    let rgb = if rgb.dimensions() == (s, s) {
        rgb
    } else {
        image::imageops::resize(&rgb, s, s, FilterType::Triangle)
    };
    let gray = if gray.dimensions() == (s, s) {
        gray
    } else {
        image::imageops::resize(&gray, s, s, FilterType::Nearest)
    };
    let mut rec = SampleRecord::new(id, rgb_to_tensor(&rgb), Mask::from_gray(&gray))
        .map_err(|e| Error::Ingestion(format!("{id}: {e}")))?;
    rec.source = Some((image_path.to_path_buf(), mask_path.to_path_buf()));
    Ok(rec)
}

/// Load every pair of a split, ordered by stem.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SampleRecord>> {
    manifest
        .pairs()?
        .par_iter()
        .map(|(stem, img, mask)| load_sample(stem, img, mask, manifest.target_size))
        .collect()
}

/// Write a sample as `<dir>/images/<id>.png` and `<dir>/masks/<id>.png`.
pub fn save_sample(dir: &Path, sample: &SampleRecord) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::file(&masks, e))?;
    tensor_to_rgb(&sample.image)?.save(images.join(format!("{}.png", sample.id)))?;
    sample
        .mask
        .to_gray()
        .save(masks.join(format!("{}.png", sample.id)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_threshold_boundary() {
        let img = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(Mask::from_gray(&img).data(), &[0, 0, 1, 1]);
        let m = Mask::from_gray(&img);
        assert_eq!(Mask::from_gray(&m.to_gray()), m);
    }

    #[test]
    fn rgb_tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| {
            image::Rgb([x as u8 * 40, y as u8 * 90, 255 - x as u8])
        });
        let t = rgb_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert_eq!(tensor_to_rgb(&t).unwrap(), img);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn missing_mask_names_the_stem() {
        let dir = std::env::temp_dir().join(format!("crackseg-missing-{}", std::process::id()));
        let m = DatasetManifest::new(&dir, Split::Train, 8);
        fs::create_dir_all(m.images_dir()).unwrap();
        fs::create_dir_all(m.masks_dir()).unwrap();
        RgbImage::new(8, 8)
            .save(m.images_dir().join("lonely.png"))
            .unwrap();
        let err = load_dataset(&m).unwrap_err();
        fs::remove_dir_all(&dir).unwrap();
        assert!(
            matches!(&err, Error::Ingestion(s) if s.contains("lonely")),
            "{err}"
        );
    }
}
