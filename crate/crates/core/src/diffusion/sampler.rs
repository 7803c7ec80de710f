//! Ancestral and probability-flow samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian_vec, NoiseSchedule};
use super::{guided_epsilon, Denoiser, DiffusionError, Guidance, SampleRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "ddpm")]
    Ddpm,
    #[serde(rename = "dpm-solver++")]
    DpmSolverPp,
}

fn check_finite(x: &[f64], step: usize) -> Result<(), DiffusionError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffusionError::Divergence(step))
    }
}

fn check_inputs<D: Denoiser + ?Sized, R>(den: &D, cond: Option<&[f64]>, rngs: &[R]) -> Result<usize, DiffusionError> {
    let batch = rngs.len();
    if batch == 0 {
        return Err(DiffusionError::Usage("nothing to sample".into()));
    }
    if let Some(c) = cond {
        if c.len() != batch * den.cond_dim() {
            return Err(DiffusionError::Shape(format!(
                "conditioning has {} values, expected {}",
                c.len(),
                batch * den.cond_dim()
            )));
        }
    }
    Ok(batch)
}

/// Initial noise, one independent stream per sample.
fn initial_noise<R: Rng>(dim: usize, rngs: &mut [R]) -> Vec<f64> {
    rngs.iter_mut().flat_map(|r| gaussian_vec(dim, r)).collect()
}

/// Ancestral sampling with reverse variance `β_t`, on `steps` evenly spaced
/// timesteps ending at `T` (all of them when `steps == T`).
pub fn ddpm_sample<D: Denoiser + ?Sized, R: Rng>(
    den: &D,
    cond: Option<&[f64]>,
    sched: &NoiseSchedule,
    guidance: Guidance,
    steps: usize,
    rngs: &mut [R],
) -> Result<Vec<f64>, DiffusionError> {
    let batch = check_inputs(den, cond, rngs)?;
    let big_t = sched.len();
    if steps == 0 || steps > big_t {
        return Err(DiffusionError::Usage(format!("ddpm steps must lie in 1..={big_t}")));
    }
    let taus: Vec<usize> = (0..=steps)
        .map(|i| ((i * big_t) as f64 / steps as f64).round() as usize)
        .collect();
    let dim = den.state_dim();
    let mut x = initial_noise(dim, rngs);
    for i in (1..=steps).rev() {
        let t = taus[i];
        let ab = sched.alpha_bar(t);
        let beta = if steps == big_t {
            sched.beta(t)
        } else {
            1.0 - ab / sched.alpha_bar(taus[i - 1])
        };
        let eps = guided_epsilon(den, &x, batch, t as f64, cond, guidance)?;
        let c = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        for (xv, e) in x.iter_mut().zip(&eps) {
            *xv = (*xv - c * e) * inv;
        }
        if i > 1 {
            let s = beta.sqrt();
            for (b, r) in rngs.iter_mut().enumerate() {
                for (xv, z) in x[b * dim..(b + 1) * dim].iter_mut().zip(gaussian_vec(dim, r)) {
                    *xv += s * z;
                }
            }
        }
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// Second-order multistep DPM-Solver++ in data-prediction form, from `T` to
/// `t_end` on a grid uniform in `λ = log(α/σ)`. Returns the state at `t_end`.
pub fn dpm_solver_pp_state<D: Denoiser + ?Sized>(
    den: &D,
    cond: Option<&[f64]>,
    sched: &NoiseSchedule,
    guidance: Guidance,
    steps: usize,
    x_start: Vec<f64>,
    batch: usize,
    t_end: f64,
) -> Result<Vec<f64>, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::Usage("dpm-solver++ needs at least 2 steps".into()));
    }
    let big_t = sched.len() as f64;
    if !(t_end > 0.0 && t_end < big_t) {
        return Err(DiffusionError::Usage(format!("end time {t_end} outside (0, {big_t})")));
    }
    if x_start.len() != batch * den.state_dim() {
        return Err(DiffusionError::Shape("initial state has the wrong length".into()));
    }
    let (l0, l1) = (sched.lambda_at(big_t), sched.lambda_at(t_end));
    let lambdas: Vec<f64> = (0..=steps).map(|i| l0 + (l1 - l0) * i as f64 / steps as f64).collect();
    let mut ts: Vec<f64> = lambdas.iter().map(|&l| sched.t_from_lambda(l)).collect();
    ts[0] = big_t;
    ts[steps] = t_end;
    let mut x = x_start;
    let mut prev_x0: Option<Vec<f64>> = None;
    for i in 1..=steps {
        let (ap, sp) = sched.alpha_sigma_at(ts[i - 1]);
        let (ai, si) = sched.alpha_sigma_at(ts[i]);
        let eps = guided_epsilon(den, &x, batch, ts[i - 1], cond, guidance)?;
        let x0: Vec<f64> = x.iter().zip(&eps).map(|(xv, e)| (xv - sp * e) / ap).collect();
        let h = lambdas[i] - lambdas[i - 1];
        let phi = -(-h).exp_m1();
        let ratio = si / sp;
        match &prev_x0 {
            Some(prev) => {
                let r = (lambdas[i - 1] - lambdas[i - 2]) / h;
                let (c0, c1) = (1.0 + 0.5 / r, 0.5 / r);
                for ((xv, a), b) in x.iter_mut().zip(&x0).zip(prev) {
                    *xv = ratio * *xv + ai * phi * (c0 * a - c1 * b);
                }
            }
            None => {
                for (xv, a) in x.iter_mut().zip(&x0) {
                    *xv = ratio * *xv + ai * phi * a;
                }
            }
        }
        check_finite(&x, i)?;
        prev_x0 = Some(x0);
    }
    Ok(x)
}

/// DPM-Solver++ sampling to `t = 1` followed by a final data prediction.
pub fn dpm_solver_pp_sample<D: Denoiser + ?Sized, R: Rng>(
    den: &D,
    cond: Option<&[f64]>,
    sched: &NoiseSchedule,
    guidance: Guidance,
    steps: usize,
    rngs: &mut [R],
) -> Result<Vec<f64>, DiffusionError> {
    let batch = check_inputs(den, cond, rngs)?;
    let x_start = initial_noise(den.state_dim(), rngs);
    let x = dpm_solver_pp_state(den, cond, sched, guidance, steps, x_start, batch, 1.0)?;
    let (a, s) = sched.alpha_sigma_at(1.0);
    let eps = guided_epsilon(den, &x, batch, 1.0, cond, guidance)?;
    let out: Vec<f64> = x.iter().zip(&eps).map(|(xv, e)| (xv - s * e) / a).collect();
    check_finite(&out, 0)?;
    Ok(out)
}

/// Runs the solver named in `run`; one RNG stream per sample.
pub fn sample<D: Denoiser + ?Sized, R: Rng>(
    den: &D,
    sched: &NoiseSchedule,
    run: &SampleRun,
    cond: Option<&[f64]>,
    rngs: &mut [R],
) -> Result<Vec<f64>, DiffusionError> {
    run.validate(sched)?;
    let guidance = Guidance::from_weight(run.cfg_weight)?;
    match run.solver {
        Solver::Ddpm => ddpm_sample(den, cond, sched, guidance, run.steps, rngs),
        Solver::DpmSolverPp => dpm_solver_pp_sample(den, cond, sched, guidance, run.steps, rngs),
    }
}

#[cfg(test)]
mod tests {
    use super::super::GaussianMixture;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn streams(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
        (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect()
    }

    #[test]
    fn point_mass_is_recovered() {
        let target = vec![0.7, -0.3, 0.1];
        let den = GaussianMixture::new(vec![1.0], vec![target.clone()], vec![0.0], &sched()).unwrap();
        let out = ddpm_sample(&den, None, &sched(), Guidance::Conditional, 1000, &mut streams(4, 1)).unwrap();
        for chunk in out.chunks(3) {
            for (a, b) in chunk.iter().zip(&target) {
                assert!((a - b).abs() < 0.05);
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let den = GaussianMixture::new(vec![0.5, 0.5], vec![vec![1.0], vec![-1.0]], vec![0.1, 0.1], &sched()).unwrap();
        let a = ddpm_sample(&den, None, &sched(), Guidance::Conditional, 100, &mut streams(3, 9)).unwrap();
        let b = ddpm_sample(&den, None, &sched(), Guidance::Conditional, 100, &mut streams(3, 9)).unwrap();
        assert_eq!(a, b);
        let c = dpm_solver_pp_sample(&den, None, &sched(), Guidance::Conditional, 10, &mut streams(3, 9)).unwrap();
        let d = dpm_solver_pp_sample(&den, None, &sched(), Guidance::Conditional, 10, &mut streams(3, 9)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn single_step_solver_rejected() {
        let den = GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![1.0], &sched()).unwrap();
        let r = dpm_solver_pp_sample(&den, None, &sched(), Guidance::Conditional, 1, &mut streams(1, 0));
        assert!(matches!(r, Err(DiffusionError::Usage(_))));
    }

    #[test]
    fn per_sample_streams_are_order_stable() {
        let den = GaussianMixture::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.2, 0.2], &sched()).unwrap();
        let all = dpm_solver_pp_sample(&den, None, &sched(), Guidance::Conditional, 8, &mut streams(4, 5)).unwrap();
        let mut s = streams(4, 5);
        let third = dpm_solver_pp_sample(&den, None, &sched(), Guidance::Conditional, 8, &mut s[2..3]).unwrap();
        assert_eq!(&all[4..6], &third[..]);
    }

    struct Exploding;
    impl Denoiser for Exploding {
        fn state_dim(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn epsilon(&self, x: &[f64], _: usize, _: f64, _: Option<&[f64]>) -> Result<Vec<f64>, DiffusionError> {
            Ok(x.iter().map(|_| f64::NAN).collect())
        }
    }

    #[test]
    fn divergence_reports_step() {
        let r = ddpm_sample(&Exploding, None, &sched(), Guidance::Conditional, 1000, &mut streams(1, 0));
        assert!(matches!(r, Err(DiffusionError::Divergence(1000))));
    }
}
