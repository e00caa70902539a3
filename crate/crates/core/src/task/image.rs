use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;

/// A `size×size×3` image with values in `[0, 1]`, stored row-major as
/// `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; size * size * CHANNELS],
        }
    }

    pub fn from_data(size: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == size * size * CHANNELS).then_some(Image { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.size + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.size + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map_pixels(&self, f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Image {
        let mut out = Image::zeros(self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                out.set_pixel(y, x, f(y, x, self.pixel(y, x)));
            }
        }
        out
    }

    pub fn clamped(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContentFamily {
    Stripes,
    Blobs,
    Checker,
    Gradient,
}

impl ContentFamily {
    pub const ALL: [ContentFamily; 4] = [
        ContentFamily::Stripes,
        ContentFamily::Blobs,
        ContentFamily::Checker,
        ContentFamily::Gradient,
    ];

    fn salt(self) -> u64 {
        match self {
            ContentFamily::Stripes => 0x5a17_e500,
            ContentFamily::Blobs => 0xb10b_5000,
            ContentFamily::Checker => 0xc4ec_4e00,
            ContentFamily::Gradient => 0x96ad_1e00,
        }
    }
}

impl fmt::Display for ContentFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContentFamily::Stripes => "STRIPES",
            ContentFamily::Blobs => "BLOBS",
            ContentFamily::Checker => "CHECKER",
            ContentFamily::Gradient => "GRADIENT",
        })
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Procedural content image, a pure function of `(family, seed, size)`.
pub fn sample_image(family: ContentFamily, seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.salt());
    let mut img = Image::zeros(size);
    match family {
        ContentFamily::Stripes => {
            let orientation = rng.gen_range(0..3);
            let width = rng.gen_range(1..=2);
            let phase = rng.gen_range(0..4);
            let (a, b) = (color(&mut rng), color(&mut rng));
            for y in 0..size {
                for x in 0..size {
                    let coord = match orientation {
                        0 => y,
                        1 => x,
                        _ => x + y,
                    };
                    let c = if ((coord + phase) / width) % 2 == 0 { a } else { b };
                    img.set_pixel(y, x, c);
                }
            }
        }
        ContentFamily::Blobs => {
            let bg = color(&mut rng);
            let n = rng.gen_range(1..=3);
            let blobs: Vec<_> = (0..n)
                .map(|_| {
                    let cy = rng.gen_range(0.0..size as f64);
                    let cx = rng.gen_range(0.0..size as f64);
                    let sigma = rng.gen_range(0.8..2.0);
                    (cy, cx, sigma, color(&mut rng))
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut p = bg;
                    for &(cy, cx, sigma, c) in &blobs {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let a = (-d2 / (2.0 * sigma * sigma)).exp();
                        for ch in 0..3 {
                            p[ch] = (1.0 - a) * p[ch] + a * c[ch];
                        }
                    }
                    img.set_pixel(y, x, p);
                }
            }
        }
        ContentFamily::Checker => {
            let cell = [1, 2, 4][rng.gen_range(0..3)];
            let (a, b) = (color(&mut rng), color(&mut rng));
            for y in 0..size {
                for x in 0..size {
                    let c = if (y / cell + x / cell) % 2 == 0 { a } else { b };
                    img.set_pixel(y, x, c);
                }
            }
        }
        ContentFamily::Gradient => {
            let along_x = rng.gen_bool(0.5);
            let (start, end) = (color(&mut rng), color(&mut rng));
            let denom = (size.max(2) - 1) as f64;
            for y in 0..size {
                for x in 0..size {
                    let t = if along_x { x } else { y } as f64 / denom;
                    let c = [0, 1, 2].map(|ch| start[ch] + (end[ch] - start[ch]) * t);
                    img.set_pixel(y, x, c);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        for fam in ContentFamily::ALL {
            assert_eq!(sample_image(fam, 9, 8), sample_image(fam, 9, 8));
            assert!(sample_image(fam, 9, 8).in_unit_range());
        }
    }

    #[test]
    fn gradient_is_monotone_along_an_axis() {
        for seed in 0..50 {
            let img = sample_image(ContentFamily::Gradient, seed, 8);
            let monotone = |along_x: bool| {
                (0..3).all(|ch| {
                    let line: Vec<f64> = (0..8)
                        .map(|i| if along_x { img.pixel(3, i)[ch] } else { img.pixel(i, 3)[ch] })
                        .collect();
                    line.windows(2).all(|w| w[1] >= w[0]) || line.windows(2).all(|w| w[1] <= w[0])
                })
            };
            assert!(monotone(true) || monotone(false), "seed {seed}");
        }
    }

    #[test]
    fn blobs_cover_both_tails() {
        let (mut low, mut high) = (false, false);
        for seed in 0..1000 {
            for &v in sample_image(ContentFamily::Blobs, seed, 8).data() {
                low |= v < 0.05;
                high |= v > 0.95;
            }
        }
        assert!(low && high);
    }
}
