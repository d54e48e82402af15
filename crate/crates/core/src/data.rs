//! Image datasets and the synthetic texture generator.
//!
//! # Texture generator
//!
//! Image `i` of `synth_textures(n, h, w, c, seed)` is drawn from a
//! `ChaCha8Rng` seeded with `seed` and switched to stream `i`. With
//! `u(a, b)` a uniform `f64` draw on `[a, b)` taken in the order listed:
//!
//! 1. per channel: base `u(96, 160)`, horizontal slope `u(-24, 24)`,
//!    vertical slope `u(-24, 24)`;
//! 2. blob count `1 + floor(u(0, 3))`;
//! 3. per blob: centre `(u(0, w), u(0, h))`, radius `u(0.1, 0.35) * max(h, w)`,
//!    then one amplitude `u(-48, 48)` per channel.
//!
//! Pixel `(ch, y, x)` is `base + sx * 2(x'/(w-1) - 1/2) + sy * 2(y'/(h-1) - 1/2)
//! + sum a * exp(-r2 / (2 rad^2))` with `x' = x` (and `x' = 0` when `w = 1`),
//! `r2` measured from the pixel centre `(x + 1/2, y + 1/2)`, rounded to the
//! nearest integer and clamped to `0..=255`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unspecified,
}

/// `count` images of `channels x height x width` 8-bit pixels, stored
/// image-major then channel-major (planar).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<u8>,
    pub split: Split,
}

impl ImageDataset {
    pub fn new(count: usize, channels: usize, height: usize, width: usize, pixels: Vec<u8>, split: Split) -> Result<Self> {
        let need = count
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::Data(String::from("dataset size overflows")))?;
        if need != pixels.len() {
            return Err(Error::Data(format!(
                "{} images of {}x{}x{} need {} bytes, got {}",
                count,
                channels,
                height,
                width,
                need,
                pixels.len()
            )));
        }
        Ok(ImageDataset { count, height, width, channels, pixels, split })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Images at `indices` as a `[b, c, h, w]` tensor of pixel values;
    /// `flip[j]` mirrors image `j` horizontally.
    pub fn batch<T: Real>(&self, indices: &[usize], flip: Option<&[bool]>) -> Result<Tensor<T>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.count) {
            return Err(Error::Data(format!("image index {} out of range for {} images", i, self.count)));
        }
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for (j, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let mirror = flip.is_some_and(|f| f[j]);
            for ch in 0..c {
                for y in 0..h {
                    let row = &img[(ch * h + y) * w..(ch * h + y + 1) * w];
                    if mirror {
                        data.extend(row.iter().rev().map(|&p| T::of(p as f64)));
                    } else {
                        data.extend(row.iter().map(|&p| T::of(p as f64)));
                    }
                }
            }
        }
        Tensor::new(&[indices.len(), c, h, w], data)
    }

    /// Images `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Result<Self> {
        if start > end || end > self.count {
            return Err(Error::Data(format!("range {}..{} out of bounds for {} images", start, end, self.count)));
        }
        let d = self.image_len();
        Self::new(end - start, self.channels, self.height, self.width, self.pixels[start * d..end * d].to_vec(), split)
    }

    /// Mean pixel value of each channel over the whole dataset.
    pub fn channel_means(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut sums = alloc::vec![0u64; self.channels];
        for i in 0..self.count {
            for (ch, s) in sums.iter_mut().enumerate() {
                let off = (i * self.channels + ch) * hw;
                *s += self.pixels[off..off + hw].iter().map(|&p| p as u64).sum::<u64>();
            }
        }
        let n = (self.count * hw).max(1) as f64;
        sums.into_iter().map(|s| s as f64 / n).collect()
    }
}

/// Procedural images with smooth colour gradients and Gaussian blobs.
pub fn synth_textures(n: usize, height: usize, width: usize, channels: usize, seed: u64) -> Result<ImageDataset> {
    if n == 0 {
        return Err(Error::Data(String::from("synth_textures needs at least one image")));
    }
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Data(format!("empty image shape {}x{}x{}", channels, height, width)));
    }
    let d = channels * height * width;
    let mut pixels = Vec::with_capacity(n * d);
    let mut field = alloc::vec![0f64; d];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut u = |a: f64, b: f64| a + (b - a) * rng.random::<f64>();
        let tone: Vec<[f64; 3]> = (0..channels).map(|_| [u(96.0, 160.0), u(-24.0, 24.0), u(-24.0, 24.0)]).collect();
        let blobs = 1 + Float::floor(u(0.0, 3.0)) as usize;
        let mut spots = Vec::with_capacity(blobs);
        for _ in 0..blobs {
            let cx = u(0.0, width as f64);
            let cy = u(0.0, height as f64);
            let rad = u(0.1, 0.35) * height.max(width) as f64;
            let amp: Vec<f64> = (0..channels).map(|_| u(-48.0, 48.0)).collect();
            spots.push((cx, cy, rad, amp));
        }
        let ramp = |p: usize, len: usize| if len > 1 { 2.0 * (p as f64 / (len - 1) as f64 - 0.5) } else { 0.0 };
        for ch in 0..channels {
            let [base, sx, sy] = tone[ch];
            for y in 0..height {
                for x in 0..width {
                    let mut v = base + sx * ramp(x, width) + sy * ramp(y, height);
                    for (cx, cy, rad, amp) in &spots {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        v += amp[ch] * Float::exp(-(dx * dx + dy * dy) / (2.0 * rad * rad));
                    }
                    field[(ch * height + y) * width + x] = v;
                }
            }
        }
        pixels.extend(field.iter().map(|&v| Float::round(v).clamp(0.0, 255.0) as u8));
    }
    ImageDataset::new(n, channels, height, width, pixels, Split::Unspecified)
}
