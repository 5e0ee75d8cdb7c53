//! Even Pixels: 32x32 images with exactly two opposite hues, each covering
//! exactly half the pixels.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{Layout, RegionSample};

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;
pub const HALF: usize = PIXELS / 2;
pub const PATCH: usize = 4;
pub const PATCHES_PER_SIDE: usize = SIDE / PATCH;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const HUE_BINS: usize = 256;
/// Second peak must be at least this many bins (circularly) from the first.
pub const MIN_PEAK_SEPARATION: usize = 8;
pub const SATURATION: f64 = 1.0;
pub const VALUE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn hsv_to_rgb(c: Hsv) -> [f64; 3] {
    let h = c.h.rem_euclid(1.0) * 6.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - sector as f64;
    let (v, s) = (c.v, c.s);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return Hsv { h: 0.0, s, v };
    }
    let h6 = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = h6 / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    Hsv { h, s, v }
}

/// Row-major 32x32 HSV image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvenPixelsImage {
    pixels: Vec<Hsv>,
}

impl EvenPixelsImage {
    pub fn new(pixels: Vec<Hsv>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Dimension(format!("{} pixels, expected {PIXELS}", pixels.len())));
        }
        Ok(Self { pixels })
    }

    /// Pixels with `mask[i]` take hue `h2`, the rest `h1`; S and V fixed.
    pub fn from_mask(h1: f64, h2: f64, mask: &[bool]) -> Result<Self> {
        Self::new(
            mask.iter()
                .map(|m| Hsv {
                    h: if *m { h2 } else { h1 }.rem_euclid(1.0),
                    s: SATURATION,
                    v: VALUE,
                })
                .collect(),
        )
    }

    pub fn pixels(&self) -> &[Hsv] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> Hsv {
        self.pixels[row * SIDE + col]
    }

    /// 64 patches of 4x4 pixels in raster order; each patch is its pixels in
    /// raster order with interleaved RGB mapped from [0, 1] to [-1, 1].
    pub fn to_regions<T: Scalar>(&self) -> RegionSample<T> {
        let mut data = Vec::with_capacity(PIXELS * 3);
        for pr in 0..PATCHES_PER_SIDE {
            for pc in 0..PATCHES_PER_SIDE {
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let rgb = hsv_to_rgb(self.pixel(pr * PATCH + y, pc * PATCH + x));
                        data.extend(rgb.iter().map(|c| T::lit(2.0 * c - 1.0)));
                    }
                }
            }
        }
        RegionSample::clean(data, PATCH_DIM, Layout::new(PATCHES_PER_SIDE, PATCHES_PER_SIDE))
            .expect("fixed patch geometry")
    }

    /// Inverse of [`to_regions`](Self::to_regions); channels are clamped to [0, 1].
    pub fn from_regions<T: Scalar>(sample: &RegionSample<T>) -> Result<Self> {
        if sample.n_regions() != PATCHES_PER_SIDE * PATCHES_PER_SIDE || sample.dim() != PATCH_DIM {
            return Err(Error::Dimension(format!(
                "expected 64 regions of dim {PATCH_DIM}, got {} of dim {}",
                sample.n_regions(),
                sample.dim()
            )));
        }
        let mut pixels = vec![Hsv { h: 0.0, s: 0.0, v: 0.0 }; PIXELS];
        for p in 0..sample.n_regions() {
            let (pr, pc) = (p / PATCHES_PER_SIDE, p % PATCHES_PER_SIDE);
            for (k, rgb) in sample.region(p).chunks_exact(3).enumerate() {
                let (y, x) = (k / PATCH, k % PATCH);
                let c = |v: T| ((v.as_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
                pixels[(pr * PATCH + y) * SIDE + pc * PATCH + x] = rgb_to_hsv([c(rgb[0]), c(rgb[1]), c(rgb[2])]);
            }
        }
        Self::new(pixels)
    }

    /// 8-bit RGB rounded; [0, 1] channel values scale to 0..=255.
    pub fn rgb8(&self) -> Vec<[u8; 3]> {
        self.pixels
            .iter()
            .map(|p| hsv_to_rgb(*p).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

/// Draws `h1 ~ U[0, 0.5)`, `h2 = h1 + 0.5` and a uniformly random half mask.
pub fn gen_even_pixels<R: Rng + ?Sized>(rng: &mut R) -> EvenPixelsImage {
    let h1: f64 = rng.random_range(0.0..0.5);
    let mut mask = vec![false; PIXELS];
    for i in index::sample(rng, PIXELS, HALF) {
        mask[i] = true;
    }
    EvenPixelsImage::from_mask(h1, h1 + 0.5, &mask).expect("fixed size")
}

pub fn hue_bin(h: f64) -> usize {
    ((h.rem_euclid(1.0) * HUE_BINS as f64).floor() as usize).min(HUE_BINS - 1)
}

fn circular_bins(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(HUE_BINS - d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvenPixelsEval {
    /// `(p1, p2)` histogram peaks, `None` when the histogram has one cluster.
    pub peaks: Option<(usize, usize)>,
    /// Pixels in the cluster around the second peak.
    pub n_c1: usize,
    pub pixel_error: usize,
    pub balance_pass: bool,
    pub sat_std: f64,
    pub val_std: f64,
}

// Shifted by the first value so a constant channel gives exactly zero.
fn population_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let Some(shift) = xs.clone().next() else {
        return 0.0;
    };
    let n = xs.clone().count() as f64;
    let mean = xs.clone().map(|x| x - shift).sum::<f64>() / n;
    (xs.map(|x| (x - shift - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn eval_even_pixels(image: &EvenPixelsImage) -> EvenPixelsEval {
    let mut hist = [0usize; HUE_BINS];
    let bins: Vec<usize> = image.pixels.iter().map(|p| hue_bin(p.h)).collect();
    for &b in &bins {
        hist[b] += 1;
    }
    let sat_std = population_std(image.pixels.iter().map(|p| p.s));
    let val_std = population_std(image.pixels.iter().map(|p| p.v));

    // first maximum wins ties
    let argmax = |ok: &dyn Fn(usize) -> bool| {
        (0..HUE_BINS)
            .filter(|b| ok(*b))
            .fold(None, |best: Option<usize>, b| match best {
                Some(c) if hist[c] >= hist[b] => Some(c),
                _ => Some(b),
            })
    };
    let p1 = argmax(&|_| true).expect("nonempty");
    let p2 = argmax(&|b| circular_bins(b, p1) >= MIN_PEAK_SEPARATION).filter(|b| hist[*b] > 0);
    let Some(p2) = p2 else {
        return EvenPixelsEval {
            peaks: None,
            n_c1: 0,
            pixel_error: HALF,
            balance_pass: false,
            sat_std,
            val_std,
        };
    };

    // The midpoints b1 and b2 = b1 + 128 split the circle into two arcs; the
    // open arc holding p2 is cluster 1. Bins exactly on a boundary are
    // equidistant from both peaks and stay with p1.
    let b1 = (p1 + p2) as f64 / 2.0;
    let offset = |b: usize| (b as f64 - b1).rem_euclid(HUE_BINS as f64);
    let half = HUE_BINS as f64 / 2.0;
    let p2_forward = offset(p2) < half;
    let in_c1 = |b: usize| {
        let o = offset(b);
        if p2_forward {
            o > 0.0 && o < half
        } else {
            o > half
        }
    };
    let n_c1: usize = (0..HUE_BINS).filter(|b| in_c1(*b)).map(|b| hist[b]).sum();
    let pixel_error = n_c1.abs_diff(HALF);
    EvenPixelsEval {
        peaks: Some((p1, p2)),
        n_c1,
        pixel_error,
        balance_pass: pixel_error == 0,
        sat_std,
        val_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_images_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let img = gen_even_pixels(&mut rng);
            let hues: Vec<f64> = img.pixels().iter().map(|p| p.h).collect();
            let h1 = hues.iter().cloned().fold(f64::INFINITY, f64::min);
            let h2 = hues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((h2 - h1 - 0.5).abs() < 1e-12);
            assert_eq!(hues.iter().filter(|h| **h == h1).count(), HALF);
            assert!(img.pixels().iter().all(|p| p.s == SATURATION && p.v == VALUE));
            let e = eval_even_pixels(&img);
            assert_eq!(e.pixel_error, 0);
            assert!(e.balance_pass);
            assert_eq!(e.sat_std, 0.0);
            assert_eq!(e.val_std, 0.0);
        }
    }

    #[test]
    fn off_by_one_split_fails() {
        let mut mask = vec![false; PIXELS];
        mask[..511].fill(true);
        let e = eval_even_pixels(&EvenPixelsImage::from_mask(0.1, 0.6, &mask).unwrap());
        assert_eq!(e.pixel_error, 1);
        assert!(!e.balance_pass);
        mask[511] = true;
        mask[512] = true;
        let e = eval_even_pixels(&EvenPixelsImage::from_mask(0.1, 0.6, &mask).unwrap());
        assert_eq!(e.pixel_error, 1);
    }

    #[test]
    fn single_hue_is_degenerate() {
        let e = eval_even_pixels(&EvenPixelsImage::from_mask(0.3, 0.3, &[true; PIXELS]).unwrap());
        assert_eq!(e.peaks, None);
        assert_eq!(e.pixel_error, HALF);
        assert!(!e.balance_pass);
    }

    #[test]
    fn wraparound_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mask = vec![false; PIXELS];
        for i in index::sample(&mut rng, PIXELS, HALF) {
            mask[i] = true;
        }
        let e = eval_even_pixels(&EvenPixelsImage::from_mask(0.95, 0.45, &mask).unwrap());
        assert!(e.balance_pass);
    }

    #[test]
    fn regions_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = gen_even_pixels(&mut rng);
        let x = img.to_regions::<f64>();
        assert_eq!((x.n_regions(), x.dim()), (64, 48));
        assert!(x.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = EvenPixelsImage::from_regions(&x).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            let dh = (a.h - b.h).abs();
            assert!(dh.min(1.0 - dh) < 1e-9);
            assert!((a.s - b.s).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }
        assert_eq!(eval_even_pixels(&back).pixel_error, 0);
    }

    proptest! {
        #[test]
        fn hsv_round_trip(h in 0.0f64..1.0, v in 0.05f64..1.0) {
            let back = rgb_to_hsv(hsv_to_rgb(Hsv { h, s: 1.0, v }));
            let dh = (back.h - h).abs();
            prop_assert!(dh.min(1.0 - dh) < 1.0 / 512.0);
            prop_assert!((back.s - 1.0).abs() < 1e-9);
            prop_assert!((back.v - v).abs() < 1e-12);
        }

        #[test]
        fn hue_shift_invariance(h1 in 0.0f64..0.5, shift in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = rng.random_range(400..=624);
            let mut mask = vec![false; PIXELS];
            for i in index::sample(&mut rng, PIXELS, count) {
                mask[i] = true;
            }
            // keep hues on bin centres so the shift cannot move a hue across a bin edge
            let snap = |h: f64| (hue_bin(h) as f64 + 0.5) / HUE_BINS as f64;
            let a = eval_even_pixels(&EvenPixelsImage::from_mask(snap(h1), snap(h1 + 0.5), &mask).unwrap());
            let s = (hue_bin(shift) as f64) / HUE_BINS as f64;
            let b = eval_even_pixels(&EvenPixelsImage::from_mask(snap(h1) + s, snap(h1 + 0.5) + s, &mask).unwrap());
            prop_assert_eq!(a.pixel_error, b.pixel_error);
            prop_assert_eq!(a.pixel_error, count.abs_diff(HALF));
        }
    }
}
