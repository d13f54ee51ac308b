//! Image containers, boxes, cropping and resampling.

use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// H×W×3 image with channel values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Axis-aligned box in pixel coordinates, half-open: `[x1, x2) × [y1, y2)`.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl From<[i64; 4]> for BBox {
    fn from(v: [i64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.x2 <= self.x1 || self.y2 <= self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn intersection(&self, other: &BBox) -> i64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0) * h.max(0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Clip to `[0, width) × [0, height)`.
    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as i64, height as i64);
        BBox::new(
            self.x1.clamp(0, w),
            self.y1.clamp(0, h),
            self.x2.clamp(0, w),
            self.y2.clamp(0, h),
        )
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= width as i64 && self.y2 <= height as i64
    }

    pub fn as_array(&self) -> [i64; 4] {
        (*self).into()
    }
}

/// Smallest side a crop may have.
pub const MIN_CROP_SIDE: i64 = 2;

/// Pixel-exact sub-image. Boxes must lie inside the image and be at least
/// [`MIN_CROP_SIDE`] pixels on each side.
pub fn crop_exact(image: &Image, bbox: &BBox) -> Result<Image> {
    let (h, w, _) = image.dim();
    if bbox.width() < MIN_CROP_SIDE || bbox.height() < MIN_CROP_SIDE || !bbox.within(w, h) {
        return Err(Error::DegenerateBox(bbox.as_array()));
    }
    Ok(image
        .slice(s![
            bbox.y1 as usize..bbox.y2 as usize,
            bbox.x1 as usize..bbox.x2 as usize,
            ..
        ])
        .to_owned())
}

/// Crop then bilinearly resample to `out_h × out_w`.
pub fn crop_resized(image: &Image, bbox: &BBox, out_h: usize, out_w: usize) -> Result<Image> {
    let sub = crop_exact(image, bbox)?;
    Ok(resize_bilinear(&sub, out_h, out_w))
}

/// Bilinear resampling with half-pixel centers and edge clamping. Equal
/// sizes return an exact copy.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = image.dim();
    if h == out_h && w == out_w {
        return image.clone();
    }
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bot = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour upscaling, used for heat-map rendering.
pub fn resize_nearest(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        image[[y * h / out_h, x * w / out_w, ch]]
    })
}

/// Quantize a channel value to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape {
            expected: "3 channels".into(),
            actual: format!("{c} channels"),
        });
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([
            to_u8(image[[y, x, 0]]),
            to_u8(image[[y, x, 1]]),
            to_u8(image[[y, x, 2]]),
        ]);
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, ch)| img.get_pixel(x as u32, y as u32)[ch] as f64 / 255.0,
    ))
}
