//! Train-time augmentations: mixup, random pad-and-crop, horizontal flip.
//!
//! Every function here is pure over `(inputs, rng)`. The deterministic cores
//! (`mixup_with`, `crop_at`, `flip_where`) take the random draws explicitly so
//! they can be exercised without a generator.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Seeded generator supplying uniform, normal, beta and permutation draws.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for an independent stream identified by `parts` under `seed`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::seed(derive_seed(seed, parts))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.0.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn beta(&mut self, alpha: f64) -> Result<f64> {
        let dist = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta({alpha}, {alpha}): {e}")))?;
        Ok(dist.sample(&mut self.0))
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.0);
        idx
    }
}

/// splitmix64 finalizer, used to hash a seed together with stream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
    /// Use this λ for every sample instead of drawing from Beta(α, α).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_override: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            enabled: true,
            lambda_override: None,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "mixup alpha must be positive, got {}",
                self.alpha
            )));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("mixup lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Result of mixing one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw<T: Scalar = f32> {
    pub mixed_inputs: Tensor<T>,
    pub mixed_targets: Tensor<T>,
    pub lambda: Vec<f64>,
    pub index: Vec<usize>,
}

pub fn one_hot<T: Scalar>(labels: &[u8], num_classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Validation("one_hot of an empty label set".into()));
    }
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= num_classes {
            return Err(Error::Validation(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + label] = T::one();
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

/// `n` i.i.d. draws from the symmetric Beta(α, α).
pub fn sample_beta(alpha: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("beta alpha must be positive, got {alpha}")));
    }
    (0..n).map(|_| rng.beta(alpha)).collect()
}

/// Per-sample λ from Beta(α, α), one shared random permutation for pairing.
pub fn mixup<T: Scalar>(
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    config: &MixupConfig,
    rng: &mut Rng,
) -> Result<MixupDraw<T>> {
    config.validate()?;
    let n = batch_len(inputs)?;
    let lambda = match config.lambda_override {
        Some(l) => vec![l; n],
        None => sample_beta(config.alpha, n, rng)?,
    };
    let index = rng.permutation(n);
    mixup_with(inputs, targets, &lambda, &index)
}

/// `λ_i · x_i + (1 − λ_i) · x_index[i]` for inputs and targets alike.
///
/// Mixing is evaluated in f64 and rounded once, so with f32 data every
/// mixed value lies between the two values it was mixed from.
pub fn mixup_with<T: Scalar>(
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    lambda: &[f64],
    index: &[usize],
) -> Result<MixupDraw<T>> {
    let n = batch_len(inputs)?;
    if batch_len(targets)? != n {
        return Err(Error::Dimension(format!(
            "mixup: {n} inputs but {} targets",
            targets.shape()[0]
        )));
    }
    if lambda.len() != n || index.len() != n {
        return Err(Error::Dimension(format!(
            "mixup: batch of {n} with {} lambdas and {} indices",
            lambda.len(),
            index.len()
        )));
    }
    let mut seen = vec![false; n];
    for &j in index {
        if j >= n || std::mem::replace(&mut seen[j], true) {
            return Err(Error::Validation("mixup index is not a permutation".into()));
        }
    }
    if let Some(l) = lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Validation(format!("mixup lambda {l} outside [0, 1]")));
    }
    Ok(MixupDraw {
        mixed_inputs: mix_rows(inputs, lambda, index)?,
        mixed_targets: mix_rows(targets, lambda, index)?,
        lambda: lambda.to_vec(),
        index: index.to_vec(),
    })
}

fn batch_len<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    t.shape()
        .first()
        .copied()
        .ok_or_else(|| Error::Dimension("expected a batch axis".into()))
}

fn mix_rows<T: Scalar>(t: &Tensor<T>, lambda: &[f64], index: &[usize]) -> Result<Tensor<T>> {
    let stride = t.numel() / lambda.len();
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for (i, (&l, &j)) in lambda.iter().zip(index).enumerate() {
        let a = &src[i * stride..(i + 1) * stride];
        let b = &src[j * stride..(j + 1) * stride];
        out.extend(
            a.iter()
                .zip(b)
                .map(|(&x1, &x2)| T::of_f64(l * x1.as_f64() + (1.0 - l) * x2.as_f64())),
        );
    }
    Tensor::new(t.shape(), out)
}

fn image_dims<T: Scalar>(images: &Tensor<T>) -> Result<[usize; 4]> {
    match *images.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Dimension(format!("expected N x C x H x W images, got {s:?}"))),
    }
}

/// Zero-pads every image by `pad` and crops a window of the original size at
/// a random offset in `[0, 2·pad]` on each axis.
pub fn random_crop<T: Scalar>(images: &Tensor<T>, pad: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let [n, ..] = image_dims(images)?;
    let offsets: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.below(2 * pad + 1), rng.below(2 * pad + 1)))
        .collect();
    crop_at(images, pad, &offsets)
}

/// Crop at explicit `(dy, dx)` offsets into the padded image.
pub fn crop_at<T: Scalar>(images: &Tensor<T>, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor<T>> {
    let [n, c, h, w] = image_dims(images)?;
    if offsets.len() != n {
        return Err(Error::Dimension(format!(
            "{} crop offsets for {n} images",
            offsets.len()
        )));
    }
    if let Some(o) = offsets.iter().find(|(dy, dx)| *dy > 2 * pad || *dx > 2 * pad) {
        return Err(Error::Validation(format!(
            "crop offset {o:?} exceeds 2*pad = {}",
            2 * pad
        )));
    }
    let src = images.data();
    let mut out = vec![T::zero(); src.len()];
    for (i, &(dy, dx)) in offsets.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                // source row in unpadded coordinates
                let sy = (y + dy) as isize - pad as isize;
                if sy < 0 || sy as usize >= h {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + dx) as isize - pad as isize;
                    if sx >= 0 && (sx as usize) < w {
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(images.shape(), out)
}

/// Mirrors each image along its width independently with probability `p`.
pub fn horizontal_flip<T: Scalar>(images: &Tensor<T>, p: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability {p} outside [0, 1]")));
    }
    let [n, ..] = image_dims(images)?;
    let mask: Vec<bool> = (0..n).map(|_| rng.uniform() < p).collect();
    flip_where(images, &mask)
}

pub fn flip_where<T: Scalar>(images: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let [n, c, h, w] = image_dims(images)?;
    if mask.len() != n {
        return Err(Error::Dimension(format!("{} flip flags for {n} images", mask.len())));
    }
    let mut out = images.data().to_vec();
    for (i, _) in mask.iter().enumerate().filter(|(_, &f)| f) {
        for row in out[i * c * h * w..(i + 1) * c * h * w].chunks_mut(w) {
            row.reverse();
        }
    }
    Tensor::new(images.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed(seed);
        Tensor::from_fn(&[n, 3, 8, 8], |_| rng.normal() as f32)
    }

    #[test]
    fn one_hot_rows() {
        let t = one_hot::<f32>(&[3], 10).unwrap();
        let mut expect = [0.0; 10];
        expect[3] = 1.0;
        assert_eq!(t.data(), &expect[..]);
        let t = one_hot::<f32>(&[0, 1], 2).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(one_hot::<f32>(&[10], 10), Err(Error::Validation(_))));
    }

    #[test]
    fn beta_rejects_bad_alpha() {
        let mut rng = Rng::seed(0);
        assert!(matches!(sample_beta(0.0, 3, &mut rng), Err(Error::Config(_))));
        assert!(matches!(sample_beta(-1.0, 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn beta_small_alpha_is_spread_out() {
        let mut rng = Rng::seed(3);
        let draws = sample_beta(0.2, 50_000, &mut rng).unwrap();
        assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(var > 1.0 / 12.0);
        // Var Beta(a, a) = 1 / (4 (2a + 1))
        assert!((var - 1.0 / (4.0 * 1.4)).abs() < 0.01);
    }

    #[test]
    fn hand_mixed_pair() {
        let x = Tensor::new(&[2, 1], vec![2.0f32, 4.0]).unwrap();
        let y = one_hot::<f32>(&[0, 1], 2).unwrap();
        let d = mixup_with(&x, &y, &[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(d.mixed_inputs.data(), &[3.0, 3.0]);
        assert_eq!(d.mixed_targets.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn lambda_one_is_identity_and_zero_takes_partner() {
        let x = images(4, 1);
        let y = one_hot::<f32>(&[0, 1, 2, 3], 10).unwrap();
        let d = mixup_with(&x, &y, &[1.0; 4], &[3, 2, 1, 0]).unwrap();
        assert_eq!(d.mixed_inputs, x);
        assert_eq!(d.mixed_targets, y);
        let d = mixup_with(&x, &y, &[0.0; 4], &[3, 2, 1, 0]).unwrap();
        assert_eq!(d.mixed_inputs, x.select_rows(&[3, 2, 1, 0]).unwrap());
    }

    #[test]
    fn paired_overlay_at_point_three() {
        let a = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 10.0);
        let b = Tensor::from_fn(&[1, 3, 2, 2], |i| 255.0 - i as f64);
        let both = Tensor::new(&[2, 3, 2, 2], [a.data(), b.data()].concat()).unwrap();
        let y = one_hot::<f64>(&[0, 1], 2).unwrap();
        let d = mixup_with(&both, &y, &[0.3, 0.3], &[1, 0]).unwrap();
        for k in 0..12 {
            let expect = 0.3 * a.data()[k] + 0.7 * b.data()[k];
            assert_eq!(d.mixed_inputs.data()[k], expect);
        }
    }

    #[test]
    fn mixup_validation() {
        let x = images(3, 2);
        let y = one_hot::<f32>(&[0, 1], 10).unwrap();
        let mut rng = Rng::seed(0);
        assert!(matches!(
            mixup(&x, &y, &MixupConfig::default(), &mut rng),
            Err(Error::Dimension(_))
        ));
        let y = one_hot::<f32>(&[0, 1, 2], 10).unwrap();
        assert!(mixup_with(&x, &y, &[0.5; 3], &[0, 0, 1]).is_err());
        assert!(mixup_with(&x, &y, &[1.5, 0.5, 0.5], &[0, 1, 2]).is_err());
    }

    #[test]
    fn mixup_is_seed_deterministic() {
        let x = images(6, 4);
        let y = one_hot::<f32>(&[0, 1, 2, 3, 4, 5], 10).unwrap();
        let cfg = MixupConfig::default();
        let a = mixup(&x, &y, &cfg, &mut Rng::seed(11)).unwrap();
        let b = mixup(&x, &y, &cfg, &mut Rng::seed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_geometry() {
        let x = images(2, 5);
        let x = Tensor::from_fn(x.shape(), |i| x.data()[i] + 10.0);
        assert_eq!(crop_at(&x, 4, &[(4, 4), (4, 4)]).unwrap(), x);
        let c = crop_at(&x, 4, &[(0, 0), (0, 0)]).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let v = c.data()[ch * 64 + y * 8 + xx];
                    if y < 4 || xx < 4 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, x.data()[ch * 64 + (y - 4) * 8 + (xx - 4)]);
                    }
                }
            }
        }
        let mut rng = Rng::seed(9);
        assert_eq!(random_crop(&x, 4, &mut rng).unwrap().shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn flips() {
        let x = images(3, 6);
        let mut rng = Rng::seed(1);
        assert_eq!(horizontal_flip(&x, 0.0, &mut rng).unwrap(), x);
        let mask = [true, false, true];
        assert_eq!(flip_where(&flip_where(&x, &mask).unwrap(), &mask).unwrap(), x);
        let f = horizontal_flip(&x, 1.0, &mut rng).unwrap();
        for (src, dst) in x.data().chunks(8).zip(f.data().chunks(8)) {
            let rev: Vec<f32> = src.iter().rev().copied().collect();
            assert_eq!(dst, &rev[..]);
        }
        assert!(horizontal_flip(&x, 1.5, &mut rng).is_err());
    }
}
