//! Sequential Bayesian dynamic Poisson GLM for the orthogonalized second
//! stage.
//!
//! Each observation contributes `log λ = (P − P̂)·θᵀW + βᵀh_β (+ offset)`.
//! The filter keeps only the first two moments of `(θ, β)`: discounted
//! evolution inflates the covariance, the one-dimensional log-rate belief is
//! updated either through a conjugate gamma step or a Laplace step, and the
//! result is mapped back with linear Bayes.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::Dataset;
use crate::firststage::NuisancePredictions;
use crate::specfun::{digamma, lambert_w0, lambert_w0_exp, tetragamma, trigamma};

/// Lower bound on the prior log-rate variance.
pub const MIN_PRIOR_VARIANCE: f64 = 1e-12;

const LAMBERT_LOG_SWITCH: f64 = 700.0;
const GAMMA_MAX_ITER: usize = 100;
const MAX_LOG_STEP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    MomentMatch,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// `log Ŷ` enters the linear predictor with coefficient 1.
    FixedOffset,
    /// `log Ŷ` gets a coefficient β in the state.
    LearnedCoefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DglmConfig {
    pub prior_variance: f64,
    pub discount_theta: f64,
    pub discount_beta: f64,
    pub mode: UpdateMode,
    pub offset_mode: OffsetMode,
    pub multiscale: bool,
}

impl Default for DglmConfig {
    fn default() -> Self {
        Self {
            prior_variance: 10.0,
            discount_theta: 1.0,
            discount_beta: 1.0,
            mode: UpdateMode::Laplace,
            offset_mode: OffsetMode::FixedOffset,
            multiscale: false,
        }
    }
}

impl DglmConfig {
    /// Number of β coefficients implied by the offset and multiscale flags.
    pub fn dim_beta(&self) -> usize {
        usize::from(self.offset_mode == OffsetMode::LearnedCoefficient) + usize::from(self.multiscale)
    }

    pub fn beta_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.offset_mode == OffsetMode::LearnedCoefficient {
            names.push("beta_log_y_hat".to_string());
        }
        if self.multiscale {
            names.push("beta_log_u_hat".to_string());
        }
        names
    }

    /// Zero-mean prior with `prior_variance·I`.
    pub fn prior(&self, dim_theta: usize) -> Result<PosteriorState> {
        let n = dim_theta + self.dim_beta();
        PosteriorState::new(
            DVector::zeros(n),
            DMatrix::identity(n, n) * self.prior_variance,
            dim_theta,
            self.discount_theta,
            self.discount_beta,
        )
    }
}

/// First two moments of `(θ, β)` plus the discount factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub dim_theta: usize,
    pub discount_theta: f64,
    pub discount_beta: f64,
}

impl PosteriorState {
    pub fn new(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        dim_theta: usize,
        discount_theta: f64,
        discount_beta: f64,
    ) -> Result<Self> {
        let n = mu.len();
        check_dim(n, sigma.nrows())?;
        check_dim(n, sigma.ncols())?;
        if dim_theta > n {
            return Err(Error::Config(format!("dim_theta {dim_theta} exceeds state size {n}")));
        }
        for d in [discount_theta, discount_beta] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("discount factor {d} outside (0, 1]")));
            }
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("prior moments must be finite".into()));
        }
        let s = Self {
            mu,
            sigma,
            dim_theta,
            discount_theta,
            discount_beta,
        };
        if !s.is_valid_covariance() {
            return Err(Error::Config("prior covariance is not symmetric PSD".into()));
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn dim_beta(&self) -> usize {
        self.dim() - self.dim_theta
    }

    pub fn theta_mean(&self) -> Vec<f64> {
        self.mu.rows(0, self.dim_theta).iter().copied().collect()
    }

    pub fn theta_cov(&self) -> DMatrix<f64> {
        self.sigma.view((0, 0), (self.dim_theta, self.dim_theta)).into_owned()
    }

    /// Symmetric, with smallest eigenvalue at least `−1e-8·trace`.
    pub fn is_valid_covariance(&self) -> bool {
        if self.dim() == 0 {
            return true;
        }
        let sym = (0..self.dim())
            .all(|i| (0..i).all(|j| self.sigma[(i, j)] == self.sigma[(j, i)]));
        sym && self.min_eigenvalue() >= -1e-8 * self.sigma.trace().abs()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn evolve_in_place(&mut self) {
        let (k, n) = (self.dim_theta, self.dim());
        for (range, d) in [(0..k, self.discount_theta), (k..n, self.discount_beta)] {
            if d == 1.0 {
                continue;
            }
            let f = (1.0 - d) / d;
            for i in range.clone() {
                for j in range.clone() {
                    self.sigma[(i, j)] *= 1.0 + f;
                }
            }
        }
    }
}

/// Covariance inflation by block-wise discounting; the mean is unchanged.
pub fn evolve(state: &PosteriorState) -> PosteriorState {
    let mut s = state.clone();
    s.evolve_in_place();
    s
}

/// Regressors and count of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStep {
    pub h_theta: Vec<f64>,
    pub h_beta: Vec<f64>,
    /// Known additive term of the log rate (`log Ŷ` in fixed-offset mode).
    pub offset: f64,
    pub y: u32,
}

impl ObservationStep {
    fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.h_theta.len() + self.h_beta.len(),
            self.h_theta.iter().chain(&self.h_beta).copied(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaBelief {
    pub a: f64,
    pub b: f64,
}

/// Prior mean and variance of the log rate under an evolved state.
pub fn prior_predictive_moments(state: &PosteriorState, step: &ObservationStep) -> Result<(f64, f64)> {
    let h = step.stacked();
    check_dim(state.dim(), h.len())?;
    let e = h.dot(&state.mu) + step.offset;
    let l = (&state.sigma * &h).dot(&h).max(MIN_PRIOR_VARIANCE);
    Ok((e, l))
}

/// Gamma(a, b) with `E[log λ] = e` and `Var[log λ] = l`.
pub fn gamma_moment_match(e: f64, l: f64) -> Result<GammaBelief> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("log-rate variance must be positive, got {l}")));
    }
    if !e.is_finite() {
        return Err(Error::Domain(format!("log-rate mean must be finite, got {e}")));
    }
    // Newton on x = ln a for trigamma(a) = l; trigamma is decreasing so the
    // root stays bracketed.
    let mut x = (1.0 / l).max(0.1).ln();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut converged = false;
    for _ in 0..GAMMA_MAX_ITER {
        let a = x.exp();
        let f = trigamma(a)? - l;
        if f.abs() <= 1e-14 * l {
            converged = true;
            break;
        }
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = tetragamma(a)? * a;
        // ψ'(a) behaves like 1/a² near zero, so raw steps from a₀ can jump
        // far past the root when l is large
        let mut next = x - (f / slope).clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
        if !(next > lo && next < hi) || !next.is_finite() {
            next = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                _ => unreachable!(),
            };
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
            x = next;
            converged = true;
            break;
        }
        x = next;
    }
    if !converged {
        return Err(Error::Convergence {
            what: "gamma moment matching",
            iterations: GAMMA_MAX_ITER,
        });
    }
    let a = x.exp();
    let b = (digamma(a)? - e).exp();
    if !b.is_finite() {
        return Err(Error::Domain(format!("gamma rate overflows for e = {e}, l = {l}")));
    }
    // an underflowing rate only enters later through ln(1 + b)
    Ok(GammaBelief {
        a,
        b: b.max(f64::MIN_POSITIVE),
    })
}

/// Mean and variance of `log λ` under the Gamma(a + y, b + 1) posterior.
pub fn conjugate_posterior_moments(belief: GammaBelief, y: u32) -> Result<(f64, f64)> {
    let a = belief.a + y as f64;
    Ok((digamma(a)? - belief.b.ln_1p(), trigamma(a)?))
}

/// Mode and inverse curvature of `Pois(y; e^ω)·N(ω; e, l)`.
pub fn laplace_update(e: f64, l: f64, y: u32) -> Result<(f64, f64)> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("log-rate variance must be positive, got {l}")));
    }
    let y = y as f64;
    let z = l.ln() + y * l + e;
    let w = if z > LAMBERT_LOG_SWITCH {
        lambert_w0_exp(z)?
    } else {
        lambert_w0(z.exp())?
    };
    // log(W(x)/l) = log x − W(x) − log l
    let mut q = e + y * l - w;
    let score = y - q.exp() - (q - e) / l;
    q += score / (q.exp() + 1.0 / l);
    let nu = l / (1.0 + l * q.exp());
    Ok((q, nu))
}

/// Linear Bayes map from the updated log-rate moments back to `(θ, β)`.
/// `state` must already be evolved.
pub fn linear_bayes_update(
    state: &PosteriorState,
    step: &ObservationStep,
    q: f64,
    nu: f64,
    e: f64,
    l: f64,
) -> Result<PosteriorState> {
    let h = step.stacked();
    check_dim(state.dim(), h.len())?;
    let mut out = state.clone();
    let rh = &state.sigma * &h;
    apply_linear_bayes(&mut out, &rh, q, nu, e, l);
    Ok(out)
}

fn apply_linear_bayes(state: &mut PosteriorState, rh: &DVector<f64>, q: f64, nu: f64, e: f64, l: f64) {
    let n = state.dim();
    state.mu.axpy((q - e) / l, rh, 1.0);
    let shrink = (1.0 - nu / l) / l;
    for j in 0..n {
        for i in 0..n {
            state.sigma[(i, j)] -= shrink * rh[i] * rh[j];
        }
    }
    for j in 0..n {
        for i in 0..j {
            let m = 0.5 * (state.sigma[(i, j)] + state.sigma[(j, i)]);
            state.sigma[(i, j)] = m;
            state.sigma[(j, i)] = m;
        }
    }
}

/// Posterior moments after one observation: evolve, prior moments,
/// log-rate update, linear Bayes.
pub fn update_step(state: &PosteriorState, step: &ObservationStep, mode: UpdateMode) -> Result<PosteriorState> {
    let mut s = state.clone();
    let mut rh = DVector::zeros(s.dim());
    update_in_place(&mut s, step, mode, &mut rh)?;
    Ok(s)
}

fn update_in_place(
    state: &mut PosteriorState,
    step: &ObservationStep,
    mode: UpdateMode,
    rh: &mut DVector<f64>,
) -> Result<()> {
    state.evolve_in_place();
    let n = state.dim();
    let h = |i: usize| {
        if i < step.h_theta.len() {
            step.h_theta[i]
        } else {
            step.h_beta[i - step.h_theta.len()]
        }
    };
    let mut e = step.offset;
    let mut l = 0.0;
    for i in 0..n {
        e += h(i) * state.mu[i];
        let mut acc = 0.0;
        for j in 0..n {
            acc += state.sigma[(i, j)] * h(j);
        }
        rh[i] = acc;
        l += acc * h(i);
    }
    let l = l.max(MIN_PRIOR_VARIANCE);
    let (q, nu) = match mode {
        UpdateMode::Laplace => laplace_update(e, l, step.y)?,
        UpdateMode::MomentMatch => conjugate_posterior_moments(gamma_moment_match(e, l)?, step.y)?,
    };
    apply_linear_bayes(state, rh, q, nu, e, l);
    Ok(())
}

/// Posterior mean and variance snapshot at the end of a trace week.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub week: u32,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: PosteriorState,
    pub trace: Vec<TraceEntry>,
    pub names: Vec<String>,
}

/// Wall-clock week of a record, counted from the earliest record.
pub fn trace_week(departure_id: u32, booking_day: u32, origin: u64) -> u32 {
    ((departure_id as u64 + booking_day as u64 - origin) / 7) as u32
}

/// Builds the observation of record `i`.
pub fn observation_step(ds: &Dataset, preds: &NuisancePredictions, cfg: &DglmConfig, i: usize) -> Result<ObservationStep> {
    let r = &ds.records[i];
    let dp = r.avg_price - preds.p_hat[i];
    let log_y = preds.y_hat[i].ln();
    let mut h_beta = Vec::with_capacity(2);
    let offset = match cfg.offset_mode {
        OffsetMode::FixedOffset => log_y,
        OffsetMode::LearnedCoefficient => {
            h_beta.push(log_y);
            0.0
        }
    };
    if cfg.multiscale {
        let u = preds
            .u_hat
            .as_ref()
            .ok_or_else(|| Error::Data("multiscale mode needs u_hat predictions".into()))?;
        h_beta.push(u[i].ln());
    }
    Ok(ObservationStep {
        h_theta: ds.w.row(i).iter().map(|w| dp * w).collect(),
        h_beta,
        offset,
        y: r.bookings,
    })
}

/// Runs the filter over all records in `obs_index` order.
pub fn fit_sequence(
    ds: &Dataset,
    preds: &NuisancePredictions,
    prior: &PosteriorState,
    cfg: &DglmConfig,
) -> Result<FitResult> {
    preds.check_alignment(ds)?;
    if cfg.multiscale && preds.u_hat.is_none() {
        return Err(Error::Data("multiscale mode needs u_hat predictions".into()));
    }
    check_dim(ds.schema.design_dim(), prior.dim_theta)?;
    check_dim(cfg.dim_beta(), prior.dim_beta())?;
    if !prior.is_valid_covariance() {
        return Err(Error::Config("prior covariance is not symmetric PSD".into()));
    }
    let mut names = ds.schema.design_names();
    names.extend(cfg.beta_names());

    let mut state = prior.clone();
    let mut trace = Vec::new();
    let mut rh = DVector::zeros(state.dim());
    let origin = ds
        .records
        .iter()
        .map(|r| r.departure_id as u64 + r.booking_day as u64)
        .min()
        .unwrap_or(0);
    let snapshot = |s: &PosteriorState, week| TraceEntry {
        week,
        mu: s.mu.iter().copied().collect(),
        sigma_diag: s.sigma.diagonal().iter().copied().collect(),
    };
    let mut current_week = None;
    for i in 0..ds.len() {
        let r = &ds.records[i];
        let week = trace_week(r.departure_id, r.booking_day, origin);
        if let Some(w) = current_week {
            if week != w {
                trace.push(snapshot(&state, w));
            }
        }
        current_week = Some(week);
        let step = observation_step(ds, preds, cfg, i)?;
        update_in_place(&mut state, &step, cfg.mode, &mut rh)?;
    }
    if let Some(w) = current_week {
        trace.push(snapshot(&state, w));
    }
    Ok(FitResult { state, trace, names })
}

/// On-disk form of a fitted posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorExport {
    pub names: Vec<String>,
    pub dim_theta: usize,
    pub dim_beta: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub discount_theta: f64,
    pub discount_beta: f64,
    pub mode: UpdateMode,
    pub offset_mode: OffsetMode,
    pub multiscale: bool,
}

impl PosteriorExport {
    pub fn new(fit: &FitResult, cfg: &DglmConfig) -> Self {
        let s = &fit.state;
        Self {
            names: fit.names.clone(),
            dim_theta: s.dim_theta,
            dim_beta: s.dim_beta(),
            mu: s.mu.iter().copied().collect(),
            sigma: (0..s.dim())
                .map(|i| (0..s.dim()).map(|j| s.sigma[(i, j)]).collect())
                .collect(),
            discount_theta: s.discount_theta,
            discount_beta: s.discount_beta,
            mode: cfg.mode,
            offset_mode: cfg.offset_mode,
            multiscale: cfg.multiscale,
        }
    }

    pub fn to_state(&self) -> Result<PosteriorState> {
        let n = self.mu.len();
        check_dim(self.dim_theta + self.dim_beta, n)?;
        check_dim(n, self.names.len())?;
        check_dim(n, self.sigma.len())?;
        let mut sigma = DMatrix::zeros(n, n);
        for (i, row) in self.sigma.iter().enumerate() {
            check_dim(n, row.len())?;
            for (j, v) in row.iter().enumerate() {
                sigma[(i, j)] = *v;
            }
        }
        PosteriorState::new(
            DVector::from_vec(self.mu.clone()),
            sigma,
            self.dim_theta,
            self.discount_theta,
            self.discount_beta,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

pub fn write_trace<W: Write>(trace: &[TraceEntry], names: &[String], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["week_index", "parameter_name", "mu", "sigma_diag"])?;
    for t in trace {
        check_dim(names.len(), t.mu.len())?;
        for (k, name) in names.iter().enumerate() {
            wtr.write_record([
                t.week.to_string(),
                name.clone(),
                t.mu[k].to_string(),
                t.sigma_diag[k].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::{digamma as psi, trigamma as psi1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn diag_state(d: &[f64], dim_theta: usize, dt: f64, db: f64) -> PosteriorState {
        let n = d.len();
        PosteriorState::new(
            DVector::from_iterator(n, (0..n).map(|i| 0.1 * i as f64)),
            DMatrix::from_diagonal(&DVector::from_vec(d.to_vec())),
            dim_theta,
            dt,
            db,
        )
        .unwrap()
    }

    #[test]
    fn evolve_examples() {
        let s = diag_state(&[1.0, 1.0, 2.0], 2, 1.0, 1.0);
        assert_eq!(evolve(&s), s);

        let mut s = diag_state(&[1.0, 1.0, 2.0], 2, 0.5, 1.0);
        s.sigma[(0, 2)] = 0.3;
        s.sigma[(2, 0)] = 0.3;
        s.sigma[(0, 1)] = 0.2;
        s.sigma[(1, 0)] = 0.2;
        let ev = evolve(&s);
        assert_eq!(ev.sigma[(0, 0)], 2.0);
        assert_eq!(ev.sigma[(1, 1)], 2.0);
        assert_eq!(ev.sigma[(0, 1)], 0.4);
        assert_eq!(ev.sigma[(2, 2)], 2.0);
        assert_eq!(ev.sigma[(0, 2)], 0.3);
        assert_eq!(ev.mu, s.mu);
    }

    #[test]
    fn prior_moment_examples() {
        let s = PosteriorState::new(DVector::zeros(3), DMatrix::identity(3, 3), 2, 1.0, 1.0).unwrap();
        let step = ObservationStep {
            h_theta: vec![0.0, 1.0],
            h_beta: vec![0.0],
            offset: 0.0,
            y: 0,
        };
        assert_eq!(prior_predictive_moments(&s, &step).unwrap(), (0.0, 1.0));
        let zero = ObservationStep {
            h_theta: vec![0.0, 0.0],
            h_beta: vec![0.0],
            offset: 0.0,
            y: 0,
        };
        assert_eq!(prior_predictive_moments(&s, &zero).unwrap().1, MIN_PRIOR_VARIANCE);
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, dim_theta: usize) -> PosteriorState {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        PosteriorState::new(mu, sigma, dim_theta, 1.0, 1.0).unwrap()
    }

    fn random_step(rng: &mut ChaCha8Rng, dim_theta: usize, dim_beta: usize) -> ObservationStep {
        ObservationStep {
            h_theta: (0..dim_theta).map(|_| rng.random_range(-1.0..1.0)).collect(),
            h_beta: (0..dim_beta).map(|_| rng.random_range(-1.0..1.0)).collect(),
            offset: 0.0,
            y: rng.random_range(0..6),
        }
    }

    #[test]
    fn prior_moments_match_explicit_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = random_state(&mut rng, 5, 3);
            let step = random_step(&mut rng, 3, 2);
            let (e, l) = prior_predictive_moments(&s, &step).unwrap();
            let h: Vec<f64> = step.h_theta.iter().chain(&step.h_beta).copied().collect();
            let mut e_ref = 0.0;
            let mut l_ref = 0.0;
            for i in 0..5 {
                e_ref += h[i] * s.mu[i];
                for j in 0..5 {
                    l_ref += h[i] * s.sigma[(i, j)] * h[j];
                }
            }
            assert!((e - e_ref).abs() < 1e-12);
            assert!((l - l_ref).abs() < 1e-12 * (1.0 + l_ref));
        }
    }

    #[test]
    fn gamma_match_examples() {
        let g = gamma_moment_match(-EULER_GAMMA, PI * PI / 6.0).unwrap();
        assert!((g.a - 1.0).abs() < 1e-9 && (g.b - 1.0).abs() < 1e-9, "{g:?}");

        let e = psi(5.0).unwrap() - 2f64.ln();
        let l = psi1(5.0).unwrap();
        let g = gamma_moment_match(e, l).unwrap();
        assert!((g.a - 5.0).abs() < 1e-9 && (g.b - 2.0).abs() < 1e-9, "{g:?}");

        assert!(gamma_moment_match(0.0, 0.0).is_err());
        assert!(gamma_moment_match(0.0, -1.0).is_err());
    }

    #[test]
    fn gamma_match_handles_diffuse_priors() {
        for l in [1e3, 1e5, 1e7, 1e9] {
            for e in [-20.0, 0.0, 5.0] {
                let g = gamma_moment_match(e, l).unwrap();
                assert!(g.a > 0.0 && g.b > 0.0);
                assert!((psi1(g.a).unwrap() - l).abs() <= 1e-8 * l);
            }
        }
    }

    proptest! {
        #[test]
        fn gamma_match_round_trips(e in -8.0f64..8.0, log_l in -12.0f64..6.0) {
            let l = log_l.exp();
            let g = gamma_moment_match(e, l).unwrap();
            let e_back = psi(g.a).unwrap() - g.b.ln();
            let l_back = psi1(g.a).unwrap();
            prop_assert!((e_back - e).abs() <= 1e-8, "e {} vs {}", e_back, e);
            prop_assert!((l_back - l).abs() <= 1e-8 * l.max(1.0), "l {} vs {}", l_back, l);
        }
    }

    #[test]
    fn conjugate_examples() {
        let unit = GammaBelief { a: 1.0, b: 1.0 };
        let (q, nu) = conjugate_posterior_moments(unit, 0).unwrap();
        assert!((q - (-EULER_GAMMA - 2f64.ln())).abs() < 1e-12);
        assert!((nu - PI * PI / 6.0).abs() < 1e-12);
        let (q, nu) = conjugate_posterior_moments(unit, 1).unwrap();
        assert!((q - (1.0 - EULER_GAMMA - 2f64.ln())).abs() < 1e-12);
        assert!((nu - (PI * PI / 6.0 - 1.0)).abs() < 1e-12);

        // ψ(a + y) = ln y + (a − 1/2)/y + O(y⁻²)
        let b = GammaBelief { a: 2.0, b: 3.0 };
        let y = 10_000;
        let (q, _) = conjugate_posterior_moments(b, y).unwrap();
        let err = q - (y as f64 / 4.0).ln();
        assert!(err.abs() < 2.0 / y as f64);
        assert!((err - 1.5 / y as f64).abs() < 1e-6);
    }

    #[test]
    fn laplace_examples() {
        let (q, nu) = laplace_update(0.0, 1.0, 1).unwrap();
        assert!(q.abs() < 1e-12 && (nu - 0.5).abs() < 1e-12);

        let (q, nu) = laplace_update(0.7, 1e-10, 3).unwrap();
        assert!((q - 0.7).abs() < 1e-8 && (nu - 1e-10).abs() < 1e-17);

        // bisection oracle on the score
        let (e, l, y) = (1.2, 0.3, 4.0);
        let score = |w: f64| y - w.exp() - (w - e) / l;
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (q, nu) = laplace_update(e, l, 4).unwrap();
        assert!((q - 0.5 * (lo + hi)).abs() < 1e-10);
        assert!((nu - l / (1.0 + l * q.exp())).abs() < 1e-15);
    }

    #[test]
    fn laplace_survives_overflowing_argument() {
        let (e, l, y) = (5.0, 10.0, 100u32);
        let (q, nu) = laplace_update(e, l, y).unwrap();
        let res = y as f64 - q.exp() - (q - e) / l;
        assert!(res.abs() <= 1e-9 * (1.0 + y as f64), "residual {res}");
        assert!(nu < l && nu > 0.0);
    }

    proptest! {
        #[test]
        fn laplace_score_residual_and_contraction(e in -10.0f64..10.0, log_l in -10.0f64..3.0, y in 0u32..200) {
            let l = log_l.exp();
            let (q, nu) = laplace_update(e, l, y).unwrap();
            let res = y as f64 - q.exp() - (q - e) / l;
            prop_assert!(res.abs() <= 1e-9 * (1.0 + y as f64));
            prop_assert!(nu < l);
        }
    }

    #[test]
    fn linear_bayes_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_state(&mut rng, 4, 4);
        let step = random_step(&mut rng, 4, 0);
        let (e, l) = prior_predictive_moments(&s, &step).unwrap();
        let same = linear_bayes_update(&s, &step, e, l, e, l).unwrap();
        assert_eq!(same.mu, s.mu);
        assert!((same.sigma.clone() - s.sigma.clone()).abs().max() < 1e-15);

        let scalar = PosteriorState::new(DVector::from_vec(vec![0.4]), DMatrix::from_element(1, 1, 2.0), 1, 1.0, 1.0)
            .unwrap();
        let one = ObservationStep {
            h_theta: vec![1.0],
            h_beta: vec![],
            offset: 0.0,
            y: 0,
        };
        let post = linear_bayes_update(&scalar, &one, 0.4, 0.0, 0.4, 2.0).unwrap();
        assert!(post.sigma[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn linear_bayes_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = random_state(&mut rng, 5, 3);
            let step = random_step(&mut rng, 3, 2);
            let (e, l) = prior_predictive_moments(&s, &step).unwrap();
            let (q, nu) = laplace_update(e, l, step.y).unwrap();
            let post = linear_bayes_update(&s, &step, q, nu, e, l).unwrap();

            let h = DVector::from_iterator(5, step.h_theta.iter().chain(&step.h_beta).copied());
            let r = &s.sigma;
            let mu_ref = &s.mu + r * &h * ((q - e) / l);
            let sig_ref = r - r * &h * h.transpose() * r.transpose() * ((1.0 - nu / l) / l);
            assert!((post.mu - mu_ref).abs().max() < 1e-12);
            assert!((post.sigma - sig_ref).abs().max() < 1e-12);
        }
    }

    #[test]
    fn covariance_soak_stays_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = PosteriorState::new(DVector::zeros(4), DMatrix::identity(4, 4) * 10.0, 3, 0.99, 0.995).unwrap();
        for k in 0..20_000 {
            let step = random_step(&mut rng, 3, 1);
            s = update_step(&s, &step, if k % 2 == 0 { UpdateMode::Laplace } else { UpdateMode::MomentMatch })
                .unwrap();
            assert!(s.is_valid_covariance(), "step {k}");
        }
    }

    #[test]
    fn modes_agree_for_informative_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // prior mean within 0.1 of the observed log count
        for _ in 0..2000 {
            let y: u32 = rng.random_range(5..200);
            let l: f64 = rng.random_range(1e-4..1.0);
            let e = (y as f64).ln() + rng.random_range(-0.1..0.1);
            let (q1, nu1) = conjugate_posterior_moments(gamma_moment_match(e, l).unwrap(), y).unwrap();
            let (q2, nu2) = laplace_update(e, l, y).unwrap();
            assert!((q1 - q2).abs() <= 0.05 * q2.abs().max(q1.abs()), "q {q1} {q2} (e {e}, l {l}, y {y})");
            assert!((nu1 - nu2).abs() <= 0.05 * nu2, "nu {nu1} {nu2} (e {e}, l {l}, y {y})");
        }
    }
}
