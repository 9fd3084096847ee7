//! Pricing under the exponential demand form `exp(p·θᵀW)`.
//!
//! All policies work with the scalar slope `b = θᵀW`, whose posterior is
//! `Normal(μᵀW, WᵀΣW)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::specfun::{std_normal_cdf, std_normal_quantile};

pub const DEFAULT_GRID_POINTS: usize = 1001;
pub const THOMPSON_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct PricingContext {
    pub w: Vec<f64>,
    pub cost: f64,
    pub p_lb: f64,
    pub p_ub: f64,
    pub mu_theta: Vec<f64>,
    pub sigma_theta: DMatrix<f64>,
}

impl PricingContext {
    pub fn new(
        w: Vec<f64>,
        cost: f64,
        p_lb: f64,
        p_ub: f64,
        mu_theta: Vec<f64>,
        sigma_theta: DMatrix<f64>,
    ) -> Result<Self> {
        check_dim(w.len(), mu_theta.len())?;
        check_dim(w.len(), sigma_theta.nrows())?;
        check_dim(w.len(), sigma_theta.ncols())?;
        if !(p_lb.is_finite() && p_ub.is_finite() && cost.is_finite()) {
            return Err(Error::Config("price bounds and cost must be finite".into()));
        }
        if p_lb > p_ub {
            return Err(Error::Config(format!("price bounds out of order: [{p_lb}, {p_ub}]")));
        }
        let n = w.len();
        let scale = sigma_theta.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (sigma_theta[(i, j)] - sigma_theta[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Config("sigma_theta is not symmetric".into()));
                }
            }
        }
        if n > 0 && sigma_theta.clone().symmetric_eigenvalues().min() < -1e-12 * scale {
            return Err(Error::Config("sigma_theta is not positive semidefinite".into()));
        }
        Ok(Self {
            w,
            cost,
            p_lb,
            p_ub,
            mu_theta,
            sigma_theta,
        })
    }

    /// `μᵀW`.
    pub fn slope_mean(&self) -> f64 {
        self.mu_theta.iter().zip(&self.w).map(|(m, w)| m * w).sum()
    }

    /// `WᵀΣW`, clamped at zero.
    pub fn slope_variance(&self) -> f64 {
        let w = DVector::from_column_slice(&self.w);
        (w.transpose() * &self.sigma_theta * &w)[(0, 0)].max(0.0)
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.p_lb, self.p_ub)
    }

    fn negative_slope(&self) -> Result<f64> {
        let m = self.slope_mean();
        if m < 0.0 {
            Ok(m)
        } else {
            Err(Error::Sign(format!("posterior mean slope {m} is not negative")))
        }
    }
}

/// Quantile level of the UCB policies and its normal score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbConfig {
    pub quantile: f64,
    pub xi: f64,
}

impl UcbConfig {
    pub fn new(quantile: f64) -> Result<Self> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(Error::Config(format!("UCB quantile must lie in (0, 1), got {quantile}")));
        }
        Ok(Self {
            quantile,
            xi: std_normal_quantile(quantile)?,
        })
    }
}

/// Plug-in optimum `c − 1/μᵀW`, clamped to the bounds.
pub fn greedy_price(ctx: &PricingContext) -> Result<f64> {
    let m = ctx.negative_slope()?;
    Ok(ctx.clamp(ctx.cost - 1.0 / m))
}

/// Second-order expansion of `E[(p−c)·exp(p·b)]` around the mean slope.
pub fn expected_margin_taylor(p: f64, ctx: &PricingContext) -> f64 {
    let m = ctx.slope_mean();
    let v = ctx.slope_variance();
    (p - ctx.cost) * (p * m).exp() * (1.0 + 0.5 * p * p * v)
}

/// `E[(p−c)·exp(p·b)]` with `b` normal truncated to `(−∞, 0)`.
pub fn expected_margin_tn(p: f64, ctx: &PricingContext) -> Result<f64> {
    let m = ctx.negative_slope()?;
    let v = ctx.slope_variance();
    if !(v > 0.0) {
        return Err(Error::Domain(
            "truncated-normal margin needs a positive slope variance".into(),
        ));
    }
    let s = v.sqrt();
    let ratio = std_normal_cdf((-m - p * v) / s) / std_normal_cdf(-m / s);
    Ok((p - ctx.cost) * (p * m + 0.5 * p * p * v).exp() * ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    Taylor,
    Tn,
}

pub fn expected_margin(kind: MarginKind, p: f64, ctx: &PricingContext) -> Result<f64> {
    match kind {
        MarginKind::Taylor => Ok(expected_margin_taylor(p, ctx)),
        MarginKind::Tn => expected_margin_tn(p, ctx),
    }
}

/// `grid_points` evenly spaced prices over the bounds, endpoints included.
pub fn price_grid(ctx: &PricingContext, grid_points: usize) -> Result<Vec<f64>> {
    if grid_points < 2 {
        return Err(Error::Config(format!("grid needs at least 2 points, got {grid_points}")));
    }
    let step = (ctx.p_ub - ctx.p_lb) / (grid_points - 1) as f64;
    Ok((0..grid_points)
        .map(|i| if i + 1 == grid_points { ctx.p_ub } else { ctx.p_lb + step * i as f64 })
        .collect())
}

/// Maximizes `f` over the grid; ties go to the lower price.
fn grid_argmax(grid: &[f64], mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = (grid[0], f(grid[0])?);
    for &p in &grid[1..] {
        let v = f(p)?;
        if v > best.1 {
            best = (p, v);
        }
    }
    Ok(best.0)
}

pub fn grid_optimize(ctx: &PricingContext, kind: MarginKind, grid_points: usize) -> Result<f64> {
    let grid = price_grid(ctx, grid_points)?;
    grid_argmax(&grid, |p| expected_margin(kind, p, ctx))
}

/// Thompson sampling. Only `b̄ = θ̄ᵀW` enters the price, so the draw is taken
/// from its exact marginal `Normal(μᵀW, WᵀΣW)`; draws with `b̄ ≥ 0` are
/// rejected.
pub fn thompson_price<R: Rng + ?Sized>(ctx: &PricingContext, rng: &mut R) -> Result<f64> {
    let m = ctx.negative_slope()?;
    let s = ctx.slope_variance().sqrt();
    for _ in 0..THOMPSON_MAX_ATTEMPTS {
        let z: f64 = StandardNormal.sample(rng);
        let b = m + s * z;
        if b < 0.0 {
            return Ok(ctx.clamp(ctx.cost - 1.0 / b));
        }
    }
    Err(Error::Convergence {
        what: "Thompson rejection sampling",
        iterations: THOMPSON_MAX_ATTEMPTS,
    })
}

/// First-order UCB objective `(p−c)·exp(p·m)·(1 + ξ·p·s)`.
pub fn ucb_taylor_objective(p: f64, ctx: &PricingContext, ucb: &UcbConfig) -> f64 {
    let m = ctx.slope_mean();
    let s = ctx.slope_variance().sqrt();
    (p - ctx.cost) * (p * m).exp() * (1.0 + ucb.xi * p * s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbTaylorPrice {
    pub price: f64,
    /// Set when `p_lb ≤ c` and the grid search replaced the root analysis.
    pub grid_fallback: bool,
}

pub fn ucb_taylor_price(ctx: &PricingContext, ucb: &UcbConfig) -> Result<UcbTaylorPrice> {
    let m = ctx.negative_slope()?;
    if ctx.p_lb <= ctx.cost {
        let grid = price_grid(ctx, DEFAULT_GRID_POINTS)?;
        let price = grid_argmax(&grid, |p| Ok(ucb_taylor_objective(p, ctx, ucb)))?;
        return Ok(UcbTaylorPrice {
            price,
            grid_fallback: true,
        });
    }
    // d/dp of the objective, divided by exp(p·m), is
    // m·k·p² + (2k + m − m·c·k)·p + (1 − m·c − k·c) with k = ξ·s.
    let c = ctx.cost;
    let k = ucb.xi * ctx.slope_variance().sqrt();
    let (a2, a1, a0) = (m * k, 2.0 * k + m - m * c * k, 1.0 - m * c - k * c);
    let mut candidates = vec![ctx.p_lb, ctx.p_ub];
    if a2 == 0.0 {
        candidates.push(-a0 / a1);
    } else {
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc >= 0.0 {
            // Numerically stable pair of roots.
            let q = -0.5 * (a1 + a1.signum() * disc.sqrt());
            candidates.push(q / a2);
            if q != 0.0 {
                candidates.push(a0 / q);
            }
        }
    }
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for p in candidates {
        if !(p >= ctx.p_lb && p <= ctx.p_ub) {
            continue;
        }
        let v = ucb_taylor_objective(p, ctx, ucb);
        if v > best.1 || (v == best.1 && p < best.0) {
            best = (p, v);
        }
    }
    Ok(UcbTaylorPrice {
        price: best.0,
        grid_fallback: false,
    })
}

/// Slope at quantile `α` of the sign-truncated slope posterior.
pub fn truncated_slope_quantile(ctx: &PricingContext, quantile: f64) -> Result<f64> {
    let m = ctx.negative_slope()?;
    let v = ctx.slope_variance();
    // a point mass at m < 0 (up to rounding in WᵀΣW): every quantile is m
    if v <= 0.0 {
        return Ok(m);
    }
    let s = v.sqrt();
    let u = quantile * std_normal_cdf(-m / s);
    let adjusted = if u >= 1.0 { 0.0 } else { m + s * std_normal_quantile(u)? };
    if adjusted >= -1e-9 * m.abs() {
        return Err(Error::Sign(format!(
            "quantile {quantile} pushes the adjusted slope to {adjusted}"
        )));
    }
    Ok(adjusted)
}

/// Closed-form maximizer of the `α`-quantile of the margin.
pub fn ucb_tn_price(ctx: &PricingContext, ucb: &UcbConfig) -> Result<f64> {
    let b = truncated_slope_quantile(ctx, ucb.quantile)?;
    Ok(ctx.clamp(ctx.cost - 1.0 / b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy,
    Taylor,
    Tn,
    Thompson,
    UcbTaylor,
    UcbTn,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "greedy" => Self::Greedy,
            "taylor" => Self::Taylor,
            "tn" => Self::Tn,
            "thompson" => Self::Thompson,
            "ucb_taylor" => Self::UcbTaylor,
            "ucb_tn" => Self::UcbTn,
            other => return Err(Error::Config(format!("unknown policy '{other}'"))),
        })
    }
}

/// Dispatches to the chosen policy. `quantile` is only read by the UCB
/// variants.
pub fn price<R: Rng + ?Sized>(
    kind: PolicyKind,
    ctx: &PricingContext,
    quantile: f64,
    grid_points: usize,
    rng: &mut R,
) -> Result<f64> {
    match kind {
        PolicyKind::Greedy => greedy_price(ctx),
        PolicyKind::Taylor => grid_optimize(ctx, MarginKind::Taylor, grid_points),
        PolicyKind::Tn => grid_optimize(ctx, MarginKind::Tn, grid_points),
        PolicyKind::Thompson => thompson_price(ctx, rng),
        PolicyKind::UcbTaylor => Ok(ucb_taylor_price(ctx, &UcbConfig::new(quantile)?)?.price),
        PolicyKind::UcbTn => ucb_tn_price(ctx, &UcbConfig::new(quantile)?),
    }
}
