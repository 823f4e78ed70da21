//! Two-phase execution-time model and the optimal false-positive-rate
//! solver.
//!
//! Filter-build time is linear in filter bits: `t = K1 * m + K2`. In
//! epsilon space that becomes `t = C0 + C1 * ln(1/eps)` with
//! `C1 = K1 * n * 1.44 / ln 2` and `C0 = K2`. Filter-and-join time is
//! `L1 + L2*eps + (A*eps + B) * ln(A*eps + B)`. Natural log throughout:
//! the total-time derivative `A*ln(A*eps+B) + A + L2 - C1/eps` is exact
//! only in that base. The optimum solves `C1/eps = A*ln(A*eps+B) + A + L2`
//! on (EPSILON_MIN, 1], by Newton iteration with a bisection fallback.

use crate::engine::EPSILON_MIN;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::path::Path;

/// Filter-build time, linear in filter size (bits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloomTimeModel {
    /// Seconds per filter bit.
    pub k1: f64,
    /// Fixed overhead in seconds.
    pub k2: f64,
    pub residual_rms: f64,
    /// True when the unconstrained fit produced a negative slope and k1 was
    /// clamped to zero.
    pub clamped: bool,
}

impl BloomTimeModel {
    /// Reparameterizes into epsilon space for a filter sized for
    /// `n_expected` keys.
    pub fn to_eps_space(&self, n_expected: f64) -> BloomTimeModelEps {
        BloomTimeModelEps {
            c0: self.k2,
            c1: self.k1 * n_expected * 1.44 / LN_2,
        }
    }
}

/// Filter-build time as a function of epsilon: `C0 + C1 * ln(1/eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloomTimeModelEps {
    pub c0: f64,
    pub c1: f64,
}

/// Filter-and-join time: `L1 + L2*eps + (A*eps + B) * ln(A*eps + B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinTimeModel {
    pub l1: f64,
    pub l2: f64,
    pub a: f64,
    pub b: f64,
    pub residual_rms: f64,
    /// False when the fit hit its iteration cap before converging.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    Newton,
    Bisection,
    Boundary,
}

/// Solver output: the minimizing epsilon and how it was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalEpsilon {
    pub epsilon_star: f64,
    pub iterations: u32,
    /// |derivative| at the returned point (meaningless for boundary hits).
    pub residual: f64,
    pub method: SolveMethod,
    pub converged: bool,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1], got {eps}"
        )));
    }
    Ok(())
}

pub fn eval_bloom_model(model: &BloomTimeModelEps, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(model.c0 + model.c1 * (1.0 / eps).ln())
}

pub fn eval_join_model(model: &JoinTimeModel, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let poly = model.a * eps + model.b;
    if poly <= 0.0 {
        return Err(Error::Domain(format!(
            "A*eps + B = {poly} must be positive (A={}, B={}, eps={eps})",
            model.a, model.b
        )));
    }
    Ok(model.l1 + model.l2 * eps + poly * poly.ln())
}

pub fn model_total(eps: f64, bloom: &BloomTimeModelEps, join: &JoinTimeModel) -> Result<f64> {
    Ok(eval_bloom_model(bloom, eps)? + eval_join_model(join, eps)?)
}

/// d/d eps of the total model: `A*ln(A*eps+B) + A + L2 - C1/eps`.
pub fn total_derivative(eps: f64, bloom: &BloomTimeModelEps, join: &JoinTimeModel) -> Result<f64> {
    check_eps(eps)?;
    let poly = join.a * eps + join.b;
    if poly <= 0.0 {
        return Err(Error::Domain(format!(
            "A*eps + B = {poly} must be positive"
        )));
    }
    Ok(join.a * poly.ln() + join.a + join.l2 - bloom.c1 / eps)
}

/// Second derivative of the total model, used by the Newton step.
fn total_second_derivative(eps: f64, bloom: &BloomTimeModelEps, join: &JoinTimeModel) -> f64 {
    join.a * join.a / (join.a * eps + join.b) + bloom.c1 / (eps * eps)
}

/// Ordinary least squares for `y = slope * x + intercept`.
fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in points {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    let slope = cov / var;
    (slope, mean_y - slope * mean_x)
}

fn rms(residuals: impl Iterator<Item = f64>, n: usize) -> f64 {
    (residuals.map(|r| r * r).sum::<f64>() / n as f64).sqrt()
}

/// Fits `time = K1 * m_bits + K2` by ordinary least squares over
/// `(m_bits, seconds)` observations. A negative slope is clamped to zero
/// (bit-processing time cannot be negative) and flagged.
pub fn fit_bloom_model(obs: &[(f64, f64)]) -> Result<BloomTimeModel> {
    let mut sizes: Vec<u64> = obs.iter().map(|o| o.0.to_bits()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::Underdetermined(
            "bloom-time fit needs observations at >= 2 distinct filter sizes".into(),
        ));
    }
    let (slope, intercept) = ols(obs);
    let (k1, k2, clamped) = if slope < 0.0 {
        let mean_y = obs.iter().map(|o| o.1).sum::<f64>() / obs.len() as f64;
        (0.0, mean_y, true)
    } else {
        (slope, intercept, false)
    };
    let residual_rms = rms(obs.iter().map(|(m, t)| t - (k1 * m + k2)), obs.len());
    Ok(BloomTimeModel {
        k1,
        k2,
        residual_rms,
        clamped,
    })
}

/// Profiled sum of squared errors: for fixed (a, b) the model is linear in
/// (l1, l2), so solve that pair in closed form and report the SSE.
fn join_profile(obs: &[(f64, f64)], a: f64, b: f64) -> Option<(f64, f64, f64)> {
    if b <= 0.0 {
        return None;
    }
    let mut z = Vec::with_capacity(obs.len());
    for &(eps, y) in obs {
        let poly = a * eps + b;
        if poly <= 0.0 {
            return None;
        }
        z.push((eps, y - poly * poly.ln()));
    }
    let (l2, l1) = ols(&z);
    let sse: f64 = z.iter().map(|(eps, zv)| (zv - l1 - l2 * eps).powi(2)).sum();
    if !sse.is_finite() {
        return None;
    }
    Some((l1, l2, sse))
}

/// Least-squares fit of `L1 + L2*eps + (A*eps+B)*ln(A*eps+B)`.
///
/// Strategy: outer search over (A, B) with the inner (L1, L2) pair solved
/// linearly. Multi-start coordinate descent seeds a Gauss-Newton
/// refinement on the profiled objective. (A, B) can trade off against
/// (L1, L2) near degeneracy, so callers should judge the fit by its
/// predictions, not by raw parameter distance.
pub fn fit_join_model(obs: &[(f64, f64)]) -> Result<JoinTimeModel> {
    let mut eps_values: Vec<u64> = obs.iter().map(|o| o.0.to_bits()).collect();
    eps_values.sort_unstable();
    eps_values.dedup();
    if obs.len() < 4 || eps_values.len() < 4 {
        return Err(Error::Underdetermined(format!(
            "join-time fit needs >= 4 observations at >= 4 distinct epsilon values, got {} at {}",
            obs.len(),
            eps_values.len()
        )));
    }
    for &(eps, _) in obs {
        check_eps(eps)?;
    }

    let y_scale = obs
        .iter()
        .map(|o| o.1.abs())
        .fold(1.0f64, f64::max);

    // Multi-start grid. a = 0 covers the degenerate constant-poly case.
    let mut starts = vec![(0.0, 1.0)];
    for &a in &[1.0, 10.0, 100.0, 1000.0, y_scale, 10.0 * y_scale] {
        for &b in &[0.1, 1.0, 10.0, 100.0, y_scale] {
            starts.push((a, b));
        }
    }

    let mut best: Option<(f64, f64, f64)> = None; // (a, b, sse)
    for &(a0, b0) in &starts {
        if let Some((a, b, sse)) = coordinate_descent(obs, a0, b0) {
            if best.is_none_or(|(_, _, s)| sse < s) {
                best = Some((a, b, sse));
            }
        }
    }
    let (mut a, mut b, mut sse) =
        best.ok_or_else(|| Error::Domain("join-time fit found no feasible (A, B)".into()))?;

    let converged;
    (a, b, sse, converged) = gauss_newton(obs, a, b, sse);

    let (l1, l2, _) = join_profile(obs, a, b)
        .ok_or_else(|| Error::Domain("join-time fit left the feasible region".into()))?;
    Ok(JoinTimeModel {
        l1,
        l2,
        a,
        b,
        residual_rms: (sse / obs.len() as f64).sqrt(),
        converged,
    })
}

fn coordinate_descent(obs: &[(f64, f64)], a0: f64, b0: f64) -> Option<(f64, f64, f64)> {
    let (mut a, mut b) = (a0, b0);
    let mut sse = join_profile(obs, a, b)?.2;
    let mut step_a = a.abs() * 0.5 + 1.0;
    let mut step_b = b.abs() * 0.5 + 0.5;
    for _ in 0..200 {
        let mut improved = false;
        for dir in [1.0, -1.0] {
            if let Some((_, _, s)) = join_profile(obs, a + dir * step_a, b) {
                if s < sse {
                    a += dir * step_a;
                    sse = s;
                    improved = true;
                }
            }
            if let Some((_, _, s)) = join_profile(obs, a, b + dir * step_b) {
                if s < sse {
                    b += dir * step_b;
                    sse = s;
                    improved = true;
                }
            }
        }
        if improved {
            step_a *= 1.7;
            step_b *= 1.7;
        } else {
            step_a *= 0.5;
            step_b *= 0.5;
            if step_a < 1e-12 * (a.abs() + 1.0) && step_b < 1e-12 * (b.abs() + 1.0) {
                break;
            }
        }
    }
    Some((a, b, sse))
}

/// Levenberg-damped Gauss-Newton on the profiled objective in (a, b), with
/// a central-difference Jacobian. Returns the refined point and whether the
/// iteration converged before the cap.
fn gauss_newton(obs: &[(f64, f64)], mut a: f64, mut b: f64, mut sse: f64) -> (f64, f64, f64, bool) {
    let residuals = |a: f64, b: f64| -> Option<Vec<f64>> {
        let (l1, l2, _) = join_profile(obs, a, b)?;
        Some(
            obs.iter()
                .map(|&(eps, y)| l1 + l2 * eps + (a * eps + b) * (a * eps + b).ln() - y)
                .collect(),
        )
    };
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let r = match residuals(a, b) {
            Some(r) => r,
            None => return (a, b, sse, false),
        };
        let ha = 1e-6 * (a.abs() + 1.0);
        let hb = 1e-6 * (b.abs() + 1.0);
        let (rpa, rma) = match (residuals(a + ha, b), residuals(a - ha, b)) {
            (Some(p), Some(m)) => (p, m),
            _ => return (a, b, sse, false),
        };
        let (rpb, rmb) = match (residuals(a, b + hb), residuals(a, b - hb)) {
            (Some(p), Some(m)) => (p, m),
            _ => return (a, b, sse, false),
        };
        let ja: Vec<f64> = rpa.iter().zip(&rma).map(|(p, m)| (p - m) / (2.0 * ha)).collect();
        let jb: Vec<f64> = rpb.iter().zip(&rmb).map(|(p, m)| (p - m) / (2.0 * hb)).collect();

        let jtj_aa: f64 = ja.iter().map(|x| x * x).sum();
        let jtj_ab: f64 = ja.iter().zip(&jb).map(|(x, y)| x * y).sum();
        let jtj_bb: f64 = jb.iter().map(|x| x * x).sum();
        let g_a: f64 = ja.iter().zip(&r).map(|(x, e)| x * e).sum();
        let g_b: f64 = jb.iter().zip(&r).map(|(x, e)| x * e).sum();

        let mut stepped = false;
        for _ in 0..20 {
            let m_aa = jtj_aa + lambda * (1.0 + jtj_aa);
            let m_bb = jtj_bb + lambda * (1.0 + jtj_bb);
            let det = m_aa * m_bb - jtj_ab * jtj_ab;
            if det.abs() < 1e-300 {
                break;
            }
            let da = -(m_bb * g_a - jtj_ab * g_b) / det;
            let db = -(m_aa * g_b - jtj_ab * g_a) / det;
            if let Some((_, _, s)) = join_profile(obs, a + da, b + db) {
                if s < sse {
                    a += da;
                    b += db;
                    let improvement = (sse - s) / sse.max(1e-300);
                    sse = s;
                    lambda = (lambda * 0.3).max(1e-12);
                    stepped = true;
                    if improvement < 1e-14 || sse < 1e-28 {
                        return (a, b, sse, true);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !stepped {
            // No damped step improves: stationary point.
            return (a, b, sse, true);
        }
    }
    (a, b, sse, false)
}

/// Locates the epsilon minimizing the total model on (EPSILON_MIN, 1].
///
/// Evaluates the derivative's sign at the bracket ends; without a sign
/// change the cheaper boundary wins. Otherwise Newton iterates from the
/// bracket midpoint, falling back to bisection whenever a step leaves the
/// bracket. Converges when |f| <= tol or the bracket narrows to tol*eps.
pub fn solve_optimal_epsilon(
    bloom: &BloomTimeModelEps,
    join: &JoinTimeModel,
    tol: f64,
) -> Result<OptimalEpsilon> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let mut lo = EPSILON_MIN;
    let mut hi = 1.0;
    let f_lo = total_derivative(lo, bloom, join)?;
    let f_hi = total_derivative(hi, bloom, join)?;
    if !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(Error::Domain("derivative is not finite at the bracket ends".into()));
    }

    if f_lo == 0.0 || f_hi == 0.0 || f_lo.signum() == f_hi.signum() {
        let t_lo = model_total(lo, bloom, join)?;
        let t_hi = model_total(hi, bloom, join)?;
        // Ties go to the larger epsilon: the cheaper filter.
        let eps = if t_lo < t_hi { lo } else { hi };
        return Ok(OptimalEpsilon {
            epsilon_star: eps,
            iterations: 0,
            residual: total_derivative(eps, bloom, join)?.abs(),
            method: SolveMethod::Boundary,
            converged: true,
        });
    }

    let lo_sign = f_lo.signum();
    let mut x = 0.5 * (lo + hi);
    let mut fell_back = false;
    for it in 1..=100u32 {
        let fx = total_derivative(x, bloom, join)?;
        if fx.abs() <= tol {
            return Ok(OptimalEpsilon {
                epsilon_star: x,
                iterations: it,
                residual: fx.abs(),
                method: if fell_back {
                    SolveMethod::Bisection
                } else {
                    SolveMethod::Newton
                },
                converged: true,
            });
        }
        if fx.signum() == lo_sign {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= tol * x {
            let mid = 0.5 * (lo + hi);
            return Ok(OptimalEpsilon {
                epsilon_star: mid,
                iterations: it,
                residual: total_derivative(mid, bloom, join)?.abs(),
                method: if fell_back {
                    SolveMethod::Bisection
                } else {
                    SolveMethod::Newton
                },
                converged: true,
            });
        }
        let slope = total_second_derivative(x, bloom, join);
        let next = x - fx / slope;
        if next.is_finite() && next > lo && next < hi {
            x = next;
        } else {
            x = 0.5 * (lo + hi);
            fell_back = true;
        }
    }
    let mid = 0.5 * (lo + hi);
    Ok(OptimalEpsilon {
        epsilon_star: mid,
        iterations: 100,
        residual: total_derivative(mid, bloom, join)?.abs(),
        method: SolveMethod::Bisection,
        converged: false,
    })
}

/// Flat on-disk form of the fitted models, shared by the fit/optimize/report
/// commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub c0: f64,
    pub c1: f64,
    pub k1: f64,
    pub k2: f64,
    pub l1: f64,
    pub l2: f64,
    pub a: f64,
    pub b: f64,
    /// [bloom fit RMS, join fit RMS].
    pub residuals: [f64; 2],
    /// Solve method tag, present once an optimum was computed.
    pub method: Option<SolveMethod>,
    pub epsilon_star: Option<f64>,
}

impl ModelDocument {
    pub fn new(
        bloom: &BloomTimeModel,
        bloom_eps: &BloomTimeModelEps,
        join: &JoinTimeModel,
        optimum: Option<&OptimalEpsilon>,
    ) -> Self {
        ModelDocument {
            c0: bloom_eps.c0,
            c1: bloom_eps.c1,
            k1: bloom.k1,
            k2: bloom.k2,
            l1: join.l1,
            l2: join.l2,
            a: join.a,
            b: join.b,
            residuals: [bloom.residual_rms, join.residual_rms],
            method: optimum.map(|o| o.method),
            epsilon_star: optimum.map(|o| o.epsilon_star),
        }
    }

    pub fn bloom_eps(&self) -> BloomTimeModelEps {
        BloomTimeModelEps {
            c0: self.c0,
            c1: self.c1,
        }
    }

    pub fn join(&self) -> JoinTimeModel {
        JoinTimeModel {
            l1: self.l1,
            l2: self.l2,
            a: self.a,
            b: self.b,
            residual_rms: self.residuals[1],
            converged: true,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
pub mod test_support {
    //! Independent oracles used by unit and acceptance tests.

    use super::*;

    /// Plain bisection on the total-model derivative, the root-finding
    /// oracle the Newton path is checked against.
    pub fn bisection_oracle(
        bloom: &BloomTimeModelEps,
        join: &JoinTimeModel,
        mut lo: f64,
        mut hi: f64,
        tol: f64,
    ) -> f64 {
        let f = |x: f64| total_derivative(x, bloom, join).unwrap();
        let lo_sign = f(lo).signum();
        assert_ne!(lo_sign, f(hi).signum(), "oracle needs a bracketed root");
        while hi - lo > tol * (0.5 * (lo + hi)) {
            let mid = 0.5 * (lo + hi);
            if f(mid).signum() == lo_sign {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Central finite difference of the total model.
    pub fn finite_difference_total(
        eps: f64,
        bloom: &BloomTimeModelEps,
        join: &JoinTimeModel,
    ) -> f64 {
        // Step balances truncation against cancellation for f64.
        let h = 3e-5 * eps;
        let up = model_total(eps + h, bloom, join).unwrap();
        let down = model_total(eps - h, bloom, join).unwrap();
        (up - down) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bloom_model_eval_basics() {
        let m = BloomTimeModelEps { c0: 2.0, c1: 3.0 };
        assert_eq!(eval_bloom_model(&m, 1.0).unwrap(), 2.0);
        let at_inv_e = eval_bloom_model(&m, (-1.0f64).exp()).unwrap();
        assert!((at_inv_e - 5.0).abs() < 1e-12);
        assert!(eval_bloom_model(&m, 0.0).is_err());
        assert!(eval_bloom_model(&m, 1.5).is_err());
    }

    #[test]
    fn size_space_and_eps_space_agree() {
        let n = 12_345.0;
        let size_model = BloomTimeModel {
            k1: 2.5e-9,
            k2: 0.75,
            residual_rms: 0.0,
            clamped: false,
        };
        let eps_model = size_model.to_eps_space(n);
        for i in 0..50 {
            let eps = 10f64.powf(-4.0 * (i as f64) / 49.0).max(1e-4);
            let m_bits = n * 1.44 * (1.0 / eps).log2();
            let via_size = size_model.k1 * m_bits + size_model.k2;
            let via_eps = eval_bloom_model(&eps_model, eps).unwrap();
            assert!(
                (via_size - via_eps).abs() <= 1e-9 * via_size.abs().max(1.0),
                "mismatch at eps={eps}: {via_size} vs {via_eps}"
            );
        }
    }

    #[test]
    fn join_model_eval_basics() {
        let m = JoinTimeModel {
            l1: 4.0,
            l2: 7.0,
            a: 0.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        // B=1, A=0: the n*ln(n) term vanishes.
        assert!((eval_join_model(&m, 0.5).unwrap() - (4.0 + 3.5)).abs() < 1e-12);

        let e = std::f64::consts::E;
        let m = JoinTimeModel {
            l1: 0.0,
            l2: 0.0,
            a: 0.0,
            b: e,
            residual_rms: 0.0,
            converged: true,
        };
        for eps in [0.01, 0.3, 1.0] {
            assert!((eval_join_model(&m, eps).unwrap() - e).abs() < 1e-12);
        }

        let bad = JoinTimeModel {
            l1: 0.0,
            l2: 0.0,
            a: -10.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        assert!(matches!(eval_join_model(&bad, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn join_model_monotone_when_well_posed() {
        let m = JoinTimeModel {
            l1: 1.0,
            l2: 5.0,
            a: 20.0,
            b: 1.5,
            residual_rms: 0.0,
            converged: true,
        };
        let mut last = f64::NEG_INFINITY;
        for i in 0..200 {
            let eps = 1e-4 + (1.0 - 1e-4) * i as f64 / 199.0;
            let v = eval_join_model(&m, eps).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn fit_bloom_model_exact_on_noiseless_data() {
        let (k1, k2) = (2e-9, 0.5);
        let obs: Vec<(f64, f64)> = (1..=20)
            .map(|i| {
                let m = i as f64 * 1e6;
                (m, k1 * m + k2)
            })
            .collect();
        let fit = fit_bloom_model(&obs).unwrap();
        assert!((fit.k1 - k1).abs() / k1 < 1e-12);
        assert!((fit.k2 - k2).abs() / k2 < 1e-12);
        assert!(!fit.clamped);
    }

    #[test]
    fn fit_bloom_model_recovers_under_noise() {
        let (k1, k2) = (2e-9, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obs: Vec<(f64, f64)> = (1..=50)
            .map(|i| {
                let m = i as f64 * 1e7;
                let t = k1 * m + k2;
                let noise: f64 = rng.sample::<f64, _>(rand_distr_standard_normal()) * 0.01 * t;
                (m, t + noise)
            })
            .collect();
        let fit = fit_bloom_model(&obs).unwrap();
        assert!((fit.k1 - k1).abs() / k1 < 0.05, "k1 off: {}", fit.k1);
        assert!((fit.k2 - k2).abs() / k2 < 0.05, "k2 off: {}", fit.k2);
    }

    // Box-Muller standard normal; keeps the dev-dependency surface small.
    fn rand_distr_standard_normal() -> impl rand::distributions::Distribution<f64> {
        struct N;
        impl rand::distributions::Distribution<f64> for N {
            fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            }
        }
        N
    }

    #[test]
    fn fit_bloom_model_underdetermined() {
        assert!(matches!(
            fit_bloom_model(&[(100.0, 1.0), (100.0, 1.1)]),
            Err(Error::Underdetermined(_))
        ));
        assert!(fit_bloom_model(&[(100.0, 1.0)]).is_err());
    }

    fn join_obs(model: (f64, f64, f64, f64), epsilons: &[f64]) -> Vec<(f64, f64)> {
        let (l1, l2, a, b) = model;
        epsilons
            .iter()
            .map(|&eps| {
                let poly = a * eps + b;
                (eps, l1 + l2 * eps + poly * poly.ln())
            })
            .collect()
    }

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    }

    #[test]
    fn fit_join_model_noiseless_recovery() {
        let truth = (10.0, 50.0, 3000.0, 200.0);
        let obs = join_obs(truth, &log_grid(0.001, 0.5, 20));
        let fit = fit_join_model(&obs).unwrap();
        for &(eps, y) in &obs {
            let pred = eval_join_model(&fit, eps).unwrap();
            assert!(
                (pred - y).abs() <= 1e-3 * y.abs(),
                "prediction off at eps={eps}: {pred} vs {y}"
            );
        }
    }

    #[test]
    fn fit_join_model_constant_data() {
        let c = 42.0;
        let obs: Vec<(f64, f64)> = log_grid(0.001, 0.5, 10).iter().map(|&e| (e, c)).collect();
        let fit = fit_join_model(&obs).unwrap();
        for &(eps, _) in &obs {
            let pred = eval_join_model(&fit, eps).unwrap();
            assert!((pred - c).abs() < 1e-6 * c, "pred {pred} at eps {eps}");
        }
        assert!(fit.l2.abs() < 1e-3);
        assert!(fit.a.abs() < 1e-3);
    }

    #[test]
    fn fit_join_model_underdetermined() {
        let obs = join_obs((1.0, 2.0, 3.0, 4.0), &[0.1, 0.2, 0.3]);
        assert!(matches!(fit_join_model(&obs), Err(Error::Underdetermined(_))));
        // 4 observations but only 2 distinct epsilons.
        let obs = vec![(0.1, 1.0), (0.1, 1.1), (0.2, 2.0), (0.2, 2.1)];
        assert!(fit_join_model(&obs).is_err());
    }

    #[test]
    fn derivative_dropped_term_sign() {
        let bloom = BloomTimeModelEps { c0: 5.0, c1: 0.0 };
        let join = JoinTimeModel {
            l1: 0.0,
            l2: 1.0,
            a: 4.0,
            b: 1.5,
            residual_rms: 0.0,
            converged: true,
        };
        for &eps in &log_grid(1e-5, 1.0, 100) {
            assert!(total_derivative(eps, &bloom, &join).unwrap() > 0.0);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let bloom = BloomTimeModelEps {
                c0: rng.gen_range(0.0..10.0),
                c1: rng.gen_range(0.01..10.0),
            };
            let join = JoinTimeModel {
                l1: rng.gen_range(0.0..10.0),
                l2: rng.gen_range(0.0..100.0),
                a: rng.gen_range(0.1..1000.0),
                b: rng.gen_range(0.5..100.0),
                residual_rms: 0.0,
                converged: true,
            };
            for &eps in &log_grid(1e-4, 0.9, 12) {
                let analytic = total_derivative(eps, &bloom, &join).unwrap();
                let numeric = finite_difference_total(eps, &bloom, &join);
                let scale = analytic.abs().max(numeric.abs()).max(1e-9);
                assert!(
                    (analytic - numeric).abs() / scale <= 1e-6,
                    "mismatch at eps={eps}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn newton_fixture_matches_bisection() {
        // C1=1, A=10, B=1, L2=0: root of 10 ln(10e+1) + 10 - 1/e.
        let bloom = BloomTimeModelEps { c0: 0.0, c1: 1.0 };
        let join = JoinTimeModel {
            l1: 0.0,
            l2: 0.0,
            a: 10.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        let sol = solve_optimal_epsilon(&bloom, &join, 1e-12).unwrap();
        assert!(sol.epsilon_star > 0.01 && sol.epsilon_star < 0.1);
        let oracle = bisection_oracle(&bloom, &join, EPSILON_MIN, 1.0, 1e-13);
        assert!(
            (sol.epsilon_star - oracle).abs() <= 1e-9,
            "newton {} vs bisection {}",
            sol.epsilon_star,
            oracle
        );
        assert_ne!(sol.method, SolveMethod::Boundary);
    }

    #[test]
    fn flat_bloom_cost_hits_lower_boundary() {
        let bloom = BloomTimeModelEps { c0: 3.0, c1: 0.0 };
        let join = JoinTimeModel {
            l1: 1.0,
            l2: 2.0,
            a: 5.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        let sol = solve_optimal_epsilon(&bloom, &join, 1e-10).unwrap();
        assert_eq!(sol.method, SolveMethod::Boundary);
        assert_eq!(sol.epsilon_star, EPSILON_MIN);
    }

    #[test]
    fn flat_join_cost_hits_upper_boundary() {
        let bloom = BloomTimeModelEps { c0: 0.0, c1: 2.0 };
        let join = JoinTimeModel {
            l1: 5.0,
            l2: 0.0,
            a: 0.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        let sol = solve_optimal_epsilon(&bloom, &join, 1e-10).unwrap();
        assert_eq!(sol.method, SolveMethod::Boundary);
        assert_eq!(sol.epsilon_star, 1.0);
    }

    #[test]
    fn optimum_beats_dense_grid() {
        let bloom = BloomTimeModelEps { c0: 0.0, c1: 1.0 };
        let join = JoinTimeModel {
            l1: 0.0,
            l2: 0.0,
            a: 10.0,
            b: 1.0,
            residual_rms: 0.0,
            converged: true,
        };
        let sol = solve_optimal_epsilon(&bloom, &join, 1e-12).unwrap();
        let best = model_total(sol.epsilon_star, &bloom, &join).unwrap();
        let mut grid_min = f64::INFINITY;
        let mut grid_argmin = 0.0;
        for &eps in &log_grid(EPSILON_MIN, 1.0, 1000) {
            let v = model_total(eps, &bloom, &join).unwrap();
            if v < grid_min {
                grid_min = v;
                grid_argmin = eps;
            }
        }
        assert!(best <= grid_min + 1e-12);
        // Convex instance: the grid minimum sits next to the true optimum.
        assert!((grid_argmin / sol.epsilon_star).ln().abs() < 0.02);
    }

    #[test]
    fn model_document_round_trip() {
        let doc = ModelDocument {
            c0: 1.0,
            c1: 2.0,
            k1: 3e-9,
            k2: 1.0,
            l1: 4.0,
            l2: 5.0,
            a: 6.0,
            b: 7.0,
            residuals: [0.01, 0.02],
            method: Some(SolveMethod::Newton),
            epsilon_star: Some(0.05),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        doc.save(&path).unwrap();
        let loaded = ModelDocument::load(&path).unwrap();
        assert_eq!(loaded, doc);
        // Evaluators reconstructed from the document reproduce the curve.
        for &eps in &log_grid(1e-4, 1.0, 20) {
            let a = model_total(eps, &doc.bloom_eps(), &doc.join()).unwrap();
            let b = model_total(eps, &loaded.bloom_eps(), &loaded.join()).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
