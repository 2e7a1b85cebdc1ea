//! Planar rasters, RGB images and class-index label maps.

use std::path::Path;

use num_traits::Float;

use crate::error::{CoreError, Result};

/// Smallest side length accepted for dataset images (the parser downsamples by 8
/// and the pyramid head pools down to 6x6 bins on top of that).
pub const MIN_SIDE: usize = 32;

/// A channel-major (C x H x W) raster of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Planar<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(CoreError::arg(format!(
                "raster dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(CoreError::Shape {
                expected: format!("{} values", channels * height * width),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Planar {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty raster");
        Planar {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty raster");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Planar {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Planar<U> {
        Planar {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Float> Planar<T> {
    /// (min, max) over all samples.
    pub fn value_range(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// An RGB image with samples in [0, 1], stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Planar<f32>);

impl Image {
    pub fn new(pixels: Planar<f32>) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(CoreError::arg(format!(
                "image must have 3 channels, got {}",
                pixels.channels()
            )));
        }
        if pixels.height() < MIN_SIDE || pixels.width() < MIN_SIDE {
            return Err(CoreError::arg(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::arg(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image(pixels))
    }

    /// Builds an image from a raster whose values may stray slightly outside
    /// [0, 1] (e.g. network output), clamping them.
    pub fn from_clamped(mut pixels: Planar<f32>) -> Result<Self> {
        pixels
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Image::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Image::new(Planar::from_fn(3, height, width, |c, _, _| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn pixels(&self) -> &Planar<f32> {
        &self.0
    }

    pub fn into_pixels(self) -> Planar<f32> {
        self.0
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.0.get(0, y, x), self.0.get(1, y, x), self.0.get(2, y, x)]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let px = Planar::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0);
        Image::new(px).map_err(|e| CoreError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// 8-bit RGB encoding, rounding to the nearest level.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let q = |c| (self.0.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = (self.height(), self.width());
        Image(Planar::from_fn(3, h, w, |c, y, x| self.0.get(c, y, w - 1 - x)))
    }

    /// Resamples to `height x width` by bilinear interpolation (corner-aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        let (h, w) = (self.height(), self.width());
        let sy = if height > 1 {
            (h - 1) as f32 / (height - 1) as f32
        } else {
            0.0
        };
        let sx = if width > 1 {
            (w - 1) as f32 / (width - 1) as f32
        } else {
            0.0
        };
        let px = Planar::from_fn(3, height, width, |c, y, x| {
            let fy = y as f32 * sy;
            let fx = x as f32 * sx;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let top = self.0.get(c, y0, x0) * (1.0 - tx) + self.0.get(c, y0, x1) * tx;
            let bot = self.0.get(c, y1, x0) * (1.0 - tx) + self.0.get(c, y1, x1) * tx;
            top * (1.0 - ty) + bot * ty
        });
        Image::from_clamped(px)
    }

    /// Extracts the `height x width` window with top-left corner `(top, left)`,
    /// padding with `fill` where the window leaves the image.
    pub fn crop_padded(&self, top: isize, left: isize, height: usize, width: usize, fill: [f32; 3]) -> Result<Image> {
        let px = Planar::from_fn(3, height, width, |c, y, x| {
            let sy = top + y as isize;
            let sx = left + x as isize;
            if sy < 0 || sx < 0 || sy >= self.height() as isize || sx >= self.width() as isize {
                fill[c]
            } else {
                self.0.get(c, sy as usize, sx as usize)
            }
        });
        Image::new(px)
    }
}

/// Per-pixel class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::arg("label map dimensions must be positive"));
        }
        if !(2..=256).contains(&num_classes) {
            return Err(CoreError::arg(format!(
                "class count must be in [2, 256], got {num_classes}"
            )));
        }
        if data.len() != height * width {
            return Err(CoreError::Shape {
                expected: format!("{} labels", height * width),
                actual: format!("{} labels", data.len()),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(CoreError::arg(format!(
                "label value {v} is not below class count {num_classes}"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        LabelMap::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_classes];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    /// Sorted set of classes that occur at least once.
    pub fn present_classes(&self) -> Vec<u8> {
        self.histogram()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c as u8)
            .collect()
    }

    /// Applies a class-index mapping (e.g. a permutation or left/right swap).
    pub fn relabel(&self, mapping: &[u8]) -> Result<LabelMap> {
        if mapping.len() != self.num_classes {
            return Err(CoreError::arg("relabel mapping must cover every class"));
        }
        LabelMap::new(
            self.height,
            self.width,
            self.num_classes,
            self.data.iter().map(|&v| mapping[v as usize]).collect(),
        )
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y, w - 1 - x));
            }
        }
        LabelMap { data, ..*self }
    }

    /// Nearest-neighbour resampling (corner-aligned).
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let sy = if height > 1 {
            (h - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let sx = if width > 1 {
            (w - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let yy = ((y as f64 * sy).round() as usize).min(h - 1);
                let xx = ((x as f64 * sx).round() as usize).min(w - 1);
                data.push(self.get(yy, xx));
            }
        }
        LabelMap {
            height,
            width,
            num_classes: self.num_classes,
            data,
        }
    }

    pub fn crop_padded(&self, top: isize, left: isize, height: usize, width: usize, fill: u8) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let sy = top + y as isize;
                let sx = left + x as isize;
                let v = if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                    fill
                } else {
                    self.get(sy as usize, sx as usize)
                };
                data.push(v);
            }
        }
        LabelMap {
            height,
            width,
            num_classes: self.num_classes,
            data,
        }
    }

    /// Reads an 8-bit single-channel PNG whose values are class indices.
    pub fn load_png(path: &Path, num_classes: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(CoreError::Format {
                    path: path.to_path_buf(),
                    msg: format!("label PNG must be 8-bit single channel, found {:?}", other.color()),
                })
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        LabelMap::new(h, w, num_classes, gray.into_raw()).map_err(|e| CoreError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_small() {
        assert!(Image::filled(31, 40, [0.5; 3]).is_err());
        let mut p = Planar::filled(3, 32, 32, 0.5f32);
        p.set(1, 3, 3, 1.5);
        assert!(Image::new(p.clone()).is_err());
        assert!(Image::from_clamped(p).is_ok());
    }

    #[test]
    fn label_rejects_overflow() {
        assert!(LabelMap::new(2, 2, 10, vec![0, 1, 9, 10]).is_err());
        assert!(LabelMap::new(2, 2, 10, vec![0, 1, 9, 9]).is_ok());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lbl = LabelMap::new(32, 32, 10, (0..1024).map(|i| (i % 10) as u8).collect()).unwrap();
        let p = dir.path().join("l.png");
        lbl.save_png(&p).unwrap();
        assert_eq!(LabelMap::load_png(&p, 10).unwrap(), lbl);

        let img = Image::new(Planar::from_fn(3, 32, 33, |c, y, x| {
            ((c * 7 + y * 3 + x) % 256) as f32 / 255.0
        }))
        .unwrap();
        let p = dir.path().join("i.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.pixels().data().iter().zip(back.pixels().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_involution() {
        let lbl = LabelMap::new(3, 4, 10, (0..12).map(|i| (i % 10) as u8).collect()).unwrap();
        assert_eq!(lbl.flip_horizontal().flip_horizontal(), lbl);
        assert_eq!(lbl.flip_horizontal().get(0, 0), lbl.get(0, 3));
    }
}
