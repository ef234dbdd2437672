//! Noise schedule construction, the closed-form forward noising process,
//! and seeded (timestep, noise) pair sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The per-step noise rates and their running products.
///
/// Timesteps are 1-based: `t` in `[1, T]` maps to array index `t - 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f32>,
    alphas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (1..=t_max)
            .map(|t| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Self::from_betas(&betas)
    }

    /// Builds a schedule from explicit per-step rates.
    ///
    /// The running product is carried in f64 and snapshotted to f32 per step.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars: Vec<f32> = Vec::with_capacity(betas.len());
        let mut running = 1.0f64;
        for &beta in betas {
            running *= 1.0 - beta;
            let snapshot = running as f32;
            if snapshot <= 0.0 || alpha_bars.last().is_some_and(|&prev| snapshot >= prev) {
                return Err(Error::InvalidArgument(
                    "alpha_bar table is not strictly decreasing and positive in f32; schedule too long or too noisy".into(),
                ));
            }
            alpha_bars.push(snapshot);
        }
        Ok(Self {
            betas: betas.iter().map(|&b| b as f32).collect(),
            alphas: betas.iter().map(|&b| (1.0 - b) as f32).collect(),
            alpha_bars,
        })
    }

    /// Number of timesteps T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f32> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f32> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Running product of alphas up to and including step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f32> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// A clean latent together with the noise that was added and the result.
#[derive(Debug, Clone)]
pub struct NoisedSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub xt: Tensor,
}

/// One Monte-Carlo draw: a uniform timestep and a standard-normal noise tensor.
#[derive(Debug, Clone)]
pub struct TimestepNoisePair {
    pub t: usize,
    pub eps: Tensor,
}

/// Closed-form noised latent `sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
pub fn noised_latent(x0: &Tensor, eps: &Tensor, alpha_bar: f32) -> Result<Tensor> {
    let signal = (alpha_bar as f64).sqrt() as f32;
    let noise = ((1.0 - alpha_bar as f64).max(0.0)).sqrt() as f32;
    x0.scale(signal).add(&eps.scale(noise))
}

/// Applies the forward process at timestep `t`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<NoisedSample> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            context: "add_noise",
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let xt = noised_latent(x0, eps, schedule.alpha_bar(t)?)?;
    Ok(NoisedSample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        xt,
    })
}

/// Draws a standard-normal vector of length `dim` from `rng`.
pub fn standard_normal_vector<R: Rng>(dim: usize, rng: &mut R) -> Tensor {
    let data: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![dim], data).expect("normal draws are finite")
}

/// Samples `n` independent (t, eps) pairs: t uniform over `[1, t_max]`,
/// eps i.i.d. standard normal of length `dim`. Fully determined by `rng`.
pub fn sample_pairs<R: Rng>(n: usize, t_max: usize, dim: usize, rng: &mut R) -> Result<Vec<TimestepNoisePair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one (t, eps) pair".into()));
    }
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be positive".into()));
    }
    Ok((0..n)
        .map(|_| TimestepNoisePair {
            t: rng.random_range(1..=t_max),
            eps: standard_normal_vector(dim, rng),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.t_max(), 1);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(&[]).is_err());
    }

    #[test]
    fn reference_alpha_bar_regression() {
        // Pinned from an independent f64 running-product computation over the
        // default linear ramp (1e-4 -> 0.02, T = 1000), snapshotted to f32.
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(10).unwrap(), 0.998_105_23_f32);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 2..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap(), "t={t}");
        }
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
    }

    #[test]
    fn timestep_bounds_checked() {
        let s = NoiseSchedule::linear(10, 0.01, 0.02).unwrap();
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(11).is_err());
    }

    #[test]
    fn add_noise_with_zero_eps_scales_signal() {
        let s = NoiseSchedule::linear(100, 0.01, 0.02).unwrap();
        let x0 = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let eps = Tensor::zeros(vec![2]);
        let out = add_noise(&x0, &eps, 50, &s).unwrap();
        let root = (s.alpha_bar(50).unwrap() as f64).sqrt() as f32;
        assert_eq!(out.xt.data(), x0.scale(root).data());
    }

    #[test]
    fn noised_latent_identity_limit() {
        // alpha_bar = 1 leaves the latent untouched.
        let x0 = Tensor::vector(vec![0.3, -0.4, 1.2]).unwrap();
        let eps = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let out = noised_latent(&x0, &eps, 1.0).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn noised_latent_hand_case() {
        // x0=[1,0], eps=[0,1], abar=0.25 -> [0.5, sqrt(0.75)]
        let x0 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let eps = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let out = noised_latent(&x0, &eps, 0.25).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-7);
        assert!((out.data()[1] - 0.75f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn add_noise_shape_mismatch_rejected() {
        let s = NoiseSchedule::linear(10, 0.01, 0.02).unwrap();
        let x0 = Tensor::zeros(vec![2]);
        let eps = Tensor::zeros(vec![3]);
        assert!(add_noise(&x0, &eps, 1, &s).is_err());
        assert!(add_noise(&x0, &Tensor::zeros(vec![2]), 11, &s).is_err());
    }

    #[test]
    fn sample_pairs_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(99);
        let mut b = ChaCha12Rng::seed_from_u64(99);
        let pa = sample_pairs(20, 1000, 4, &mut a).unwrap();
        let pb = sample_pairs(20, 1000, 4, &mut b).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.t, y.t);
            assert_eq!(x.eps.data(), y.eps.data());
        }
    }

    #[test]
    fn sample_pairs_noise_mean_concentrates() {
        let n = 10_000;
        let dim = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pairs = sample_pairs(n, 1000, dim, &mut rng).unwrap();
        for coord in 0..dim {
            let mean: f64 = pairs.iter().map(|p| p.eps.data()[coord] as f64).sum::<f64>() / n as f64;
            let bound = 4.0 / (n as f64).sqrt();
            assert!(mean.abs() < bound, "coord {coord}: mean {mean} exceeds {bound}");
        }
    }

    #[test]
    fn sample_pairs_timesteps_uniform_chi_squared() {
        // 20 equal-width bins over [1, 1000]; chi-square critical value for
        // 19 dof at alpha = 0.01 is 36.191 (independent table value).
        let n = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let pairs = sample_pairs(n, 1000, 1, &mut rng).unwrap();
        let mut counts = [0usize; 20];
        for p in &pairs {
            counts[(p.t - 1) / 50] += 1;
        }
        let expected = n as f64 / 20.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 36.191, "chi-square statistic {stat} too large");
    }

    #[test]
    fn marginal_moments_match_closed_form() {
        // Over many eps draws, x_t has mean sqrt(abar) * x0 and per-coordinate
        // variance (1 - abar). 3-sigma Monte-Carlo tolerance at n = 10^4.
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::vector(vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let n = 10_000;
        let t = 500;
        let abar = s.alpha_bar(t).unwrap() as f64;
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let dim = x0.len();
        let mut sums = vec![0.0f64; dim];
        let mut sq_sums = vec![0.0f64; dim];
        for _ in 0..n {
            let eps = standard_normal_vector(dim, &mut rng);
            let xt = add_noise(&x0, &eps, t, &s).unwrap().xt;
            for (i, &v) in xt.data().iter().enumerate() {
                sums[i] += v as f64;
                sq_sums[i] += (v as f64) * (v as f64);
            }
        }
        let var_true = 1.0 - abar;
        let mean_tol = 3.0 * var_true.sqrt() / (n as f64).sqrt();
        let var_tol = 3.0 * var_true * (2.0 / (n as f64 - 1.0)).sqrt();
        for i in 0..dim {
            let mean = sums[i] / n as f64;
            let var = sq_sums[i] / n as f64 - mean * mean;
            let expect_mean = abar.sqrt() * x0.data()[i] as f64;
            assert!((mean - expect_mean).abs() < mean_tol, "coord {i} mean");
            assert!((var - var_true).abs() < var_tol, "coord {i} var: {var} vs {var_true}");
        }
    }

    proptest! {
        #[test]
        fn add_noise_linear_in_inputs(scale in 0.1f32..4.0, seed in 0u64..256) {
            let s = NoiseSchedule::linear(100, 0.01, 0.02).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x0 = standard_normal_vector(3, &mut rng);
            let eps = standard_normal_vector(3, &mut rng);
            let t = rng.random_range(1..=100);
            let base = add_noise(&x0, &eps, t, &s).unwrap().xt;
            let scaled = add_noise(&x0.scale(scale), &eps.scale(scale), t, &s).unwrap().xt;
            for i in 0..3 {
                let want = base.data()[i] * scale;
                prop_assert!((scaled.data()[i] - want).abs() <= 1e-4 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn alpha_bar_monotone_for_every_constructed_schedule(
            t_max in 1usize..200,
            b0 in 1e-5f64..0.4,
            extra in 0.0f64..0.4,
        ) {
            let b1 = (b0 + extra).min(0.999);
            // Construction either rejects the schedule (f32 can no longer
            // represent a strictly decreasing table) or yields a monotone one.
            if let Ok(s) = NoiseSchedule::linear(t_max, b0, b1) {
                for t in 2..=t_max {
                    prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                }
            }
        }
    }
}
