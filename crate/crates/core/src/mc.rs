//! Monte Carlo reference moments: Euler–Maruyama path simulation, the exact
//! sampler for `dx = −a² sin x cos³x dt + a cos²x dW`, and sample moments
//! with standard errors.
//!
//! Every path draws from its own ChaCha8 stream (`seed`, stream = path index),
//! so a path is reproduced exactly however the ensemble is split or ordered.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::symexpr::Program;

/// Identifies the random stream construction in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), one stream per path index, ziggurat normals (rand_distr 0.5)";

/// Paths integrated together for batched drift evaluation.
const CHUNK: usize = 512;

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(q.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Drift and `L Q^{1/2}` tapes shared by the simulators.
struct Stepper {
    dim: usize,
    noise_dim: usize,
    drift: Program,
    dispersion: Program,
    /// `L Q^{1/2}` when `L` is constant in state and time.
    constant_noise: Option<DMatrix<f64>>,
    q_half: DMatrix<f64>,
}

impl Stepper {
    fn new(model: &SdeModel) -> Result<Self> {
        let q_half = psd_sqrt(model.diffusion());
        let l = model.dispersion();
        let constant_noise = if !l.references_state() && !l.references_time() {
            Some(l.eval(&[], 0.0)? * &q_half)
        } else {
            None
        };
        Ok(Stepper {
            dim: model.dim(),
            noise_dim: model.noise_dim(),
            drift: Program::compile(model.drift()),
            dispersion: Program::compile(l.entries()),
            constant_noise,
            q_half,
        })
    }
}

fn non_finite(step: usize) -> Error {
    Error::NonFinite(format!("simulated state at step {step}"))
}

/// Scratch buffers for single-path stepping.
struct PathBuffers {
    scratch: Vec<f64>,
    f: Vec<f64>,
    lvals: Vec<f64>,
}

impl Stepper {
    fn buffers(&self) -> PathBuffers {
        PathBuffers {
            scratch: Vec::new(),
            f: vec![0.0; self.dim],
            lvals: vec![0.0; self.dim * self.noise_dim],
        }
    }

    /// One Euler–Maruyama step of `x` in place.
    fn step(&self, x: &mut DVector<f64>, t: f64, delta: f64, rng: &mut ChaCha8Rng, buf: &mut PathBuffers) -> Result<()> {
        let (d, s) = (self.dim, self.noise_dim);
        self.drift.eval_into(x.as_slice(), t, &mut buf.scratch, &mut buf.f)?;
        let zeta = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = match &self.constant_noise {
            Some(lq) => lq * zeta,
            None => {
                self.dispersion.eval_into(x.as_slice(), t, &mut buf.scratch, &mut buf.lvals)?;
                DMatrix::from_row_slice(d, s, &buf.lvals) * &self.q_half * zeta
            }
        };
        let sqrt_delta = delta.sqrt();
        for k in 0..d {
            x[k] = x[k] + buf.f[k] * delta + noise[k] * sqrt_delta;
        }
        Ok(())
    }
}

/// Euler–Maruyama along `t_grid` from `x0`, one path on stream 0 of `seed`.
pub fn simulate_em(model: &SdeModel, x0: &DVector<f64>, t_grid: &[f64], seed: u64) -> Result<Trajectory> {
    if x0.len() != model.dim() {
        return Err(Error::Dimension(format!("x0 has length {}, model is {}-D", x0.len(), model.dim())));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[1] > w[0])) || !t_grid.iter().all(|t| t.is_finite()) {
        return Err(Error::Input("time grid must be non-empty, finite and strictly increasing".into()));
    }
    let st = Stepper::new(model)?;
    let mut buf = st.buffers();
    let mut rng = path_rng(seed, 0);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(x.clone());
    for (i, w) in t_grid.windows(2).enumerate() {
        st.step(&mut x, w[0], w[1] - w[0], &mut rng, &mut buf)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(non_finite(i + 1));
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: t_grid.to_vec(),
        states,
        seed,
    })
}

/// Euler–Maruyama with step `delta` from `(t0, x0)`, drawing from `rng` and
/// keeping every `record_every`-th state. Returns `n_records + 1` states, the
/// first being `x0`.
pub fn simulate_recorded(
    model: &SdeModel,
    x0: &DVector<f64>,
    t0: f64,
    delta: f64,
    record_every: usize,
    n_records: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    if x0.len() != model.dim() {
        return Err(Error::Dimension(format!("x0 has length {}, model is {}-D", x0.len(), model.dim())));
    }
    if !(delta > 0.0 && delta.is_finite()) || record_every == 0 {
        return Err(Error::Config("need delta > 0 and record_every ≥ 1".into()));
    }
    let st = Stepper::new(model)?;
    let mut buf = st.buffers();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n_records + 1);
    out.push(x.clone());
    let mut step = 0usize;
    for _ in 0..n_records {
        for _ in 0..record_every {
            st.step(&mut x, t0 + step as f64 * delta, delta, rng, &mut buf)?;
            step += 1;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(non_finite(step));
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub x0: DVector<f64>,
    pub t0: f64,
    /// Euler–Maruyama step.
    pub delta: f64,
    /// Times at which all paths are recorded; each must be `t0` plus a whole
    /// number of steps.
    pub record_times: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

/// `samples[i][p]` is path `p` at `record_times[i]`.
pub fn simulate_ensemble(model: &SdeModel, cfg: &EnsembleConfig) -> Result<Vec<Vec<DVector<f64>>>> {
    let d = model.dim();
    if cfg.x0.len() != d {
        return Err(Error::Dimension(format!("x0 has length {}, model is {d}-D", cfg.x0.len())));
    }
    if !(cfg.delta > 0.0 && cfg.delta.is_finite()) || cfg.n_paths == 0 {
        return Err(Error::Config("need delta > 0 and at least one path".into()));
    }
    let mut record_steps = Vec::with_capacity(cfg.record_times.len());
    for &t in &cfg.record_times {
        let steps = (t - cfg.t0) / cfg.delta;
        let rounded = steps.round();
        if !(rounded >= 0.0) || (steps - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(Error::Config(format!(
                "record time {t} is not a whole number of steps of {} from {}",
                cfg.delta, cfg.t0
            )));
        }
        record_steps.push(rounded as usize);
    }
    if record_steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("record times must be non-decreasing".into()));
    }
    let st = Stepper::new(model)?;
    let starts: Vec<usize> = (0..cfg.n_paths).step_by(CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| simulate_chunk(&st, cfg, &record_steps, start, (start + CHUNK).min(cfg.n_paths)))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(cfg.n_paths); record_steps.len()];
    for chunk in chunks {
        for (slot, rec) in out.iter_mut().zip(chunk) {
            slot.extend(rec);
        }
    }
    Ok(out)
}

fn simulate_chunk(
    st: &Stepper,
    cfg: &EnsembleConfig,
    record_steps: &[usize],
    start: usize,
    end: usize,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let (d, s) = (st.dim, st.noise_dim);
    let n = end - start;
    let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|p| path_rng(cfg.seed, p as u64)).collect();
    // coords[k][j] = coordinate k of path j
    let mut coords: Vec<Vec<f64>> = (0..d).map(|k| vec![cfg.x0[k]; n]).collect();
    let mut f = vec![0.0; d * n];
    let mut lvals = vec![0.0; d * s * n];
    let mut scratch = Vec::new();
    let mut zeta = vec![0.0; s * n];
    let mut qz = vec![0.0; s * n];
    let sqrt_delta = cfg.delta.sqrt();
    let mut records = vec![Vec::with_capacity(n); record_steps.len()];
    let total = record_steps.last().copied().unwrap_or(0);
    let mut next_record = 0;
    let snapshot = |coords: &Vec<Vec<f64>>| -> Vec<DVector<f64>> {
        (0..n).map(|j| DVector::from_fn(d, |k, _| coords[k][j])).collect()
    };
    while next_record < record_steps.len() && record_steps[next_record] == 0 {
        records[next_record] = snapshot(&coords);
        next_record += 1;
    }
    for step in 0..total {
        let t = cfg.t0 + step as f64 * cfg.delta;
        {
            let views: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
            st.drift.eval_batch(&views, t, &mut scratch, &mut f)?;
            if st.constant_noise.is_none() {
                st.dispersion.eval_batch(&views, t, &mut scratch, &mut lvals)?;
            }
        }
        for (j, rng) in rngs.iter_mut().enumerate() {
            for c in 0..s {
                zeta[c * n + j] = rng.sample(StandardNormal);
            }
        }
        if st.constant_noise.is_none() {
            // L(x_j) Q^{1/2} ζ_j, with Q^{1/2} ζ_j formed first
            for c in 0..s {
                for (j, q) in qz[c * n..(c + 1) * n].iter_mut().enumerate() {
                    *q = (0..s).map(|e| st.q_half[(c, e)] * zeta[e * n + j]).sum();
                }
            }
        }
        for k in 0..d {
            let fk = &f[k * n..(k + 1) * n];
            let xk = &mut coords[k];
            match &st.constant_noise {
                Some(lq) => {
                    for j in 0..n {
                        let noise: f64 = (0..s).map(|c| lq[(k, c)] * zeta[c * n + j]).sum();
                        xk[j] = xk[j] + fk[j] * cfg.delta + noise * sqrt_delta;
                    }
                }
                None => {
                    for j in 0..n {
                        let noise: f64 = (0..s).map(|c| lvals[(k * s + c) * n + j] * qz[c * n + j]).sum();
                        xk[j] = xk[j] + fk[j] * cfg.delta + noise * sqrt_delta;
                    }
                }
            }
            if !xk.iter().all(|v| v.is_finite()) {
                return Err(non_finite(step + 1));
            }
        }
        while next_record < record_steps.len() && record_steps[next_record] == step + 1 {
            records[next_record] = snapshot(&coords);
            next_record += 1;
        }
    }
    Ok(records)
}

/// Exact samples of `x_t = atan(a W_t + tan x₀)`.
pub fn sample_exact_model24(a: f64, x0: f64, t: f64, n_paths: usize, seed: u64) -> Result<Vec<f64>> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    if !(x0 > -half_pi && x0 < half_pi) {
        return Err(Error::Input(format!("x0 = {x0} must lie in (-π/2, π/2)")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Input(format!("t = {t} must be finite and non-negative")));
    }
    let tan0 = x0.tan();
    let sd = t.sqrt();
    Ok((0..n_paths)
        .into_par_iter()
        .map(|p| {
            let z: f64 = path_rng(seed, p as u64).sample(StandardNormal);
            if t == 0.0 {
                x0
            } else {
                (a * sd * z + tan0).atan()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct McMoments {
    pub n: usize,
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    /// `σ/√n` per coordinate.
    pub mean_se: DVector<f64>,
    /// Asymptotic standard error of each covariance entry,
    /// `√((E[(dᵢdⱼ)²] − cᵢⱼ²)/n)`.
    pub cov_se: DMatrix<f64>,
}

pub fn mc_moments(samples: &[DVector<f64>]) -> Result<McMoments> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Input("need at least two samples".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("samples differ in length".into()));
    }
    let nf = n as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / nf;
    let mut cov = DMatrix::zeros(d, d);
    let mut fourth: DMatrix<f64> = DMatrix::zeros(d, d);
    for s in samples {
        let dev = s - &mean;
        for i in 0..d {
            for j in 0..d {
                let p = dev[i] * dev[j];
                cov[(i, j)] += p;
                fourth[(i, j)] += p * p;
            }
        }
    }
    let biased: DMatrix<f64> = &cov / nf;
    let cov = cov / (nf - 1.0);
    let cov_se = DMatrix::from_fn(d, d, |i, j| ((fourth[(i, j)] / nf - biased[(i, j)].powi(2)).max(0.0) / nf).sqrt());
    let mean_se = DVector::from_fn(d, |i, _| (cov[(i, i)] / nf).sqrt());
    Ok(McMoments {
        n,
        mean,
        cov,
        mean_se,
        cov_se,
    })
}

/// Scalar convenience wrapper around [`mc_moments`].
pub fn mc_moments_scalar(samples: &[f64]) -> Result<McMoments> {
    let v: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_element(1, *s)).collect();
    mc_moments(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> SdeModel {
        SdeModel::parse(&["-x0"], &[&["1"]], DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn constant_model_gives_constant_path() {
        let m = SdeModel::parse(&["0"], &[&["0"]], DMatrix::identity(1, 1)).unwrap();
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let tr = simulate_em(&m, &DVector::from_element(1, 2.5), &grid, 7).unwrap();
        assert!(tr.states.iter().all(|s| s[0] == 2.5));
        assert_eq!(tr.times.len(), tr.states.len());
    }

    #[test]
    fn seeded_paths_repeat() {
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let a = simulate_em(&ou(), &DVector::from_element(1, 1.0), &grid, 42).unwrap();
        let b = simulate_em(&ou(), &DVector::from_element(1, 1.0), &grid, 42).unwrap();
        let c = simulate_em(&ou(), &DVector::from_element(1, 1.0), &grid, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn ensemble_paths_do_not_depend_on_ensemble_size() {
        let cfg = |n| EnsembleConfig {
            x0: DVector::from_element(1, 1.0),
            t0: 0.0,
            delta: 0.01,
            record_times: vec![0.0, 0.5],
            n_paths: n,
            seed: 9,
        };
        let small = simulate_ensemble(&ou(), &cfg(3)).unwrap();
        let large = simulate_ensemble(&ou(), &cfg(CHUNK + 7)).unwrap();
        assert_eq!(small[1][..], large[1][..3]);
        assert!(small[0].iter().all(|s| s[0] == 1.0));
        // The single-path simulator uses stream 0 too.
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.01).collect();
        let tr = simulate_em(&ou(), &DVector::from_element(1, 1.0), &grid, 9).unwrap();
        assert!((tr.states[50][0] - small[1][0][0]).abs() < 1e-12);
    }

    #[test]
    fn state_dependent_dispersion_batches_like_single_paths() {
        let m = SdeModel::parse(&["-2.25*sin(x0)*cos(x0)^3"], &[&["1.5*cos(x0)^2"]], DMatrix::identity(1, 1)).unwrap();
        let cfg = EnsembleConfig {
            x0: DVector::from_element(1, 1.0),
            t0: 0.0,
            delta: 0.01,
            record_times: vec![0.3],
            n_paths: 4,
            seed: 5,
        };
        let ens = simulate_ensemble(&m, &cfg).unwrap();
        let grid: Vec<f64> = (0..=30).map(|i| i as f64 * 0.01).collect();
        let tr = simulate_em(&m, &DVector::from_element(1, 1.0), &grid, 5).unwrap();
        assert!((tr.states[30][0] - ens[0][0][0]).abs() < 1e-12);
    }

    #[test]
    fn exact_sampler_range_and_start() {
        let s = sample_exact_model24(1.5, 1.0, 0.0, 10, 1).unwrap();
        assert!(s.iter().all(|v| *v == 1.0));
        let s = sample_exact_model24(1.5, 1.0, 2.0, 1000, 1).unwrap();
        let h = std::f64::consts::FRAC_PI_2;
        assert!(s.iter().all(|v| *v > -h && *v < h));
        assert!(sample_exact_model24(1.5, 2.0, 1.0, 10, 1).is_err());
    }

    #[test]
    fn sample_moments() {
        let m = mc_moments_scalar(&[3.0; 10]).unwrap();
        assert_eq!(m.cov[(0, 0)], 0.0);
        let m = mc_moments_scalar(&[1.0, 3.0]).unwrap();
        assert_eq!(m.mean[0], 2.0);
        assert_eq!(m.cov[(0, 0)], 2.0);
        assert!(mc_moments_scalar(&[1.0]).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|p| path_rng(3, p).sample(StandardNormal)).collect();
        let m = mc_moments_scalar(&draws).unwrap();
        assert!(m.mean[0].abs() < 3e-3);
        assert!((m.cov[(0, 0)] - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        assert!((m.cov_se[(0, 0)] - (2.0 / n as f64).sqrt()).abs() < 1e-4);
    }
}
