use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use jigwm_autograd::{Scalar, Tensor};

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image with values in `[0, 1]`, stored planar (`C×H×W`) so a batch
/// maps directly onto an NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; CHANNELS * height * width],
        }
    }

    /// `f(channel, y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
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

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> T {
        let s: T = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).sum();
        s / T::from_usize(self.data.len()).unwrap()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[1, CHANNELS, self.height, self.width], self.data.clone())
    }

    /// Stacks equally sized images into `[n, 3, h, w]`.
    pub fn batch(images: &[Self]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(&[images.len(), CHANNELS, first.height, first.width], data))
    }

    pub fn unbatch(t: &Tensor<T>) -> Vec<Self> {
        let (n, c, h, w) = t.dims4();
        assert_eq!(c, CHANNELS, "expected RGB tensor");
        (0..n)
            .map(|i| Self {
                height: h,
                width: w,
                data: t.data()[i * c * h * w..(i + 1) * c * h * w].to_vec(),
            })
            .collect()
    }

    /// Quantizes to 8-bit RGB (round to nearest).
    pub fn to_rgb8(&self) -> RgbImage {
        let plane = self.plane();
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb(std::array::from_fn(|c| quantize(self.data[c * plane + i])))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
    }

    fn to_rgb32f(&self) -> Rgb32FImage {
        let plane = self.plane();
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb(std::array::from_fn(|c| self.data[c * plane + i].as_f64() as f32))
        })
    }

    fn from_rgb32f(img: &Rgb32FImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| T::lit(img.get_pixel(x as u32, y as u32)[c] as f64))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any format the codec set understands (PNG, JPEG).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    /// Bilinear resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let out = imageops::resize(&self.to_rgb32f(), width as u32, height as u32, imageops::FilterType::Triangle);
        Self::from_rgb32f(&out).clamp01()
    }

    /// Scales the image to cover `height×width` with its aspect ratio kept,
    /// then center-crops to exactly that size.
    pub fn letterbox(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let scale = (height as f64 / self.height as f64).max(width as f64 / self.width as f64);
        let sh = ((self.height as f64 * scale).round() as usize).max(height);
        let sw = ((self.width as f64 * scale).round() as usize).max(width);
        self.resize(sh, sw).crop((sh - height) / 2, (sw - width) / 2, height, width)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop outside image");
        Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x))
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image<f32> {
        Image::from_fn(h, w, |c, y, x| ((c * 37 + y * 11 + x * 5) % 256) as f32 / 255.0)
    }

    #[test]
    fn png_round_trip_of_8bit_values_is_exact() {
        let img = gradient(9, 13);
        let back = Image::<f32>::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn batch_and_unbatch_are_inverse() {
        let imgs = vec![gradient(4, 6), gradient(4, 6).map(|v| 1.0 - v)];
        let t = Image::batch(&imgs).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 6]);
        assert_eq!(Image::unbatch(&t), imgs);
    }

    #[test]
    fn batch_rejects_mixed_sizes() {
        assert!(Image::batch(&[gradient(4, 4), gradient(4, 5)]).is_err());
    }

    #[test]
    fn letterbox_produces_target_size() {
        let img = gradient(30, 50);
        let out = img.letterbox(64, 64);
        assert_eq!(out.dims(), (64, 64));
        assert!(out.in_unit_range());
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = Image::<f64>::filled(4, 4, 0.5);
        let b = Image::<f64>::filled(4, 4, 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a).is_infinite());
    }
}
