//! Beta-distributed interpolation of inputs, latents and targets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Two batch indices mixed with ratio `lambda`: the result is
/// `(1 - lambda) * first + lambda * second`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPair {
    pub first: usize,
    pub second: usize,
    pub lambda: f64,
}

/// One draw from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// Pairs every batch element with a partner drawn from a seeded random cyclic
/// arrangement, so partners are always distinct. Batches of one degenerate to
/// an identity pair with `lambda = 0`.
pub fn pair_batch<R: Rng + ?Sized>(batch: usize, alpha: f64, rng: &mut R) -> Result<Vec<MixPair>> {
    if batch == 0 {
        return Ok(Vec::new());
    }
    if batch == 1 {
        return Ok(vec![MixPair {
            first: 0,
            second: 0,
            lambda: 0.0,
        }]);
    }
    let mut order: Vec<usize> = (0..batch).collect();
    order.shuffle(rng);
    let mut partner = vec![0; batch];
    for k in 0..batch {
        partner[order[k]] = order[(k + 1) % batch];
    }
    (0..batch)
        .map(|i| {
            Ok(MixPair {
                first: i,
                second: partner[i],
                lambda: sample_lambda(alpha, rng)?,
            })
        })
        .collect()
}

/// Elementwise `(1 - lambda) * a + lambda * b`, exact at both endpoints.
pub fn lerp<T: Real>(a: &[T], b: &[T], lambda: f64) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "cannot mix arrays of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("mixup ratio {lambda} outside [0,1]")));
    }
    if lambda == 0.0 {
        return Ok(a.to_vec());
    }
    if lambda == 1.0 {
        return Ok(b.to_vec());
    }
    let keep = 1.0 - lambda;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| T::from_f64(keep * x.to_f64() + lambda * y.to_f64()))
        .collect())
}

/// Image, prior and target volume of one training example, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTriple {
    pub image: Vec<f32>,
    pub prior: Vec<f32>,
    pub volume: Vec<f32>,
}

/// Merged embedding, ground-truth embedding and target volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple {
    pub e_z: Vec<f32>,
    pub e_l: Vec<f32>,
    pub volume: Vec<f32>,
}

/// Mixes image, prior and volume with one shared ratio.
pub fn input_mix(s1: &InputTriple, s2: &InputTriple, lambda: f64) -> Result<InputTriple> {
    Ok(InputTriple {
        image: lerp(&s1.image, &s2.image, lambda)?,
        prior: lerp(&s1.prior, &s2.prior, lambda)?,
        volume: lerp(&s1.volume, &s2.volume, lambda)?,
    })
}

/// Mixes merged latent, ground-truth latent and volume with one shared ratio.
pub fn latent_mix(t1: &LatentTriple, t2: &LatentTriple, lambda: f64) -> Result<LatentTriple> {
    Ok(LatentTriple {
        e_z: lerp(&t1.e_z, &t2.e_z, lambda)?,
        e_l: lerp(&t1.e_l, &t2.e_l, lambda)?,
        volume: lerp(&t1.volume, &t2.volume, lambda)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn triple(seed: u64) -> InputTriple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random::<f32>()).collect::<Vec<_>>();
        InputTriple {
            image: v(6),
            prior: v(8),
            volume: v(8),
        }
    }

    #[test]
    fn endpoints_return_sources_bitwise() {
        let (a, b) = (triple(1), triple(2));
        assert_eq!(input_mix(&a, &b, 0.0).unwrap(), a);
        assert_eq!(input_mix(&a, &b, 1.0).unwrap(), b);
        let la = LatentTriple {
            e_z: vec![-0.0, 1.5, -2.25],
            e_l: vec![0.1, 0.2, 0.3],
            volume: vec![1.0, 0.0],
        };
        let lb = LatentTriple {
            e_z: vec![3.0, -1.0, 0.5],
            e_l: vec![0.0, 0.0, 1.0],
            volume: vec![0.0, 1.0],
        };
        let m = latent_mix(&la, &lb, 0.0).unwrap();
        assert_eq!(m.e_z[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(m, la);
        assert_eq!(latent_mix(&la, &lb, 1.0).unwrap(), lb);
    }

    #[test]
    fn half_mix_of_binary_grids() {
        let a = [0.0, 1.0, 0.0, 1.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(lerp(&a, &b, 0.5).unwrap(), vec![0.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn latent_fixed_point_and_weighted_oracle() {
        let z = vec![0.3, -0.7, 1.1];
        for &l in &[0.0, 0.25, 0.6, 1.0] {
            assert_eq!(lerp(&z, &z, l).unwrap(), z);
        }
        let a = [0.5f32, -1.0, 2.0];
        let b = [1.5f32, 3.0, -2.0];
        let m = lerp(&a, &b, 0.25).unwrap();
        for i in 0..3 {
            let expect = 0.75 * a[i] as f64 + 0.25 * b[i] as f64;
            assert!((m[i] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_shapes_and_bad_ratio_are_errors() {
        assert!(lerp(&[0.0], &[0.0, 1.0], 0.5).is_err());
        assert!(lerp(&[0.0], &[1.0], 1.5).is_err());
        assert!(sample_lambda(0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_lambda(-1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_of_one_is_a_no_op_pair() {
        let p = pair_batch(1, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(
            p,
            vec![MixPair {
                first: 0,
                second: 0,
                lambda: 0.0
            }]
        );
    }

    #[test]
    fn pairing_is_seeded_and_partners_are_distinct() {
        let a = pair_batch(16, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pair_batch(16, 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.first != p.second && (0.0..=1.0).contains(&p.lambda)));
        let mut seen: Vec<_> = a.iter().map(|p| p.second).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn beta_symmetry_empirical_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..20_000).map(|_| sample_lambda(0.4, &mut rng).unwrap()).collect();
        for &q in &[0.1, 0.25, 0.4] {
            let lo = draws.iter().filter(|&&x| x <= q).count() as f64 / draws.len() as f64;
            let hi = draws.iter().filter(|&&x| x >= 1.0 - q).count() as f64 / draws.len() as f64;
            assert!((lo - hi).abs() < 0.015, "q={q}: {lo} vs {hi}");
        }
    }

    #[test]
    fn beta_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_lambda(1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        let draws: Vec<f64> = (0..n).map(|_| sample_lambda(0.2, &mut rng).unwrap()).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        let expect = 1.0 / (4.0 * 1.4);
        assert!((var - expect).abs() / expect < 0.05, "{var}");
    }

    #[test]
    fn cross_class_pairing_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let class = |i: usize| i % 2;
        let (mut cross, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            for p in pair_batch(32, 0.2, &mut rng).unwrap() {
                cross += usize::from(class(p.first) != class(p.second));
                total += 1;
            }
        }
        let f = cross as f64 / total as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    proptest! {
        #[test]
        fn mixing_is_linear_and_stays_in_unit_range(
            a in proptest::collection::vec(0.0f32..=1.0, 12),
            b in proptest::collection::vec(0.0f32..=1.0, 12),
            lambda in 0.0f64..=1.0,
        ) {
            let m = lerp(&a, &b, lambda).unwrap();
            let n = lerp(&a, &b, 1.0 - lambda).unwrap();
            for i in 0..12 {
                prop_assert!((0.0..=1.0).contains(&m[i]));
                prop_assert!(((m[i] + n[i]) - (a[i] + b[i])).abs() < 1e-6);
            }
        }
    }
}
