//! Expectation-propagation detector for the real-valued MIMO model.
//!
//! The intractable posterior over discrete symbols is approximated by a
//! global Gaussian whose per-symbol factor exp{-theta/2 x^2 + gamma x} is
//! refit each round by moment matching: global update, cavity extraction,
//! discrete posterior on the constellation, then a damped parameter update
//! that skips any index whose candidate precision would go non-positive.

use crate::linalg::{Cholesky, LinalgError, Matrix};
use crate::model::{hard_round, soft_statistics, Constellation, RealInstance};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpError {
    #[error("EP precision state went invalid: {0}")]
    Precision(#[from] LinalgError),
}

/// Diagonal precision and linear coefficients of the Gaussian symbol factor.
#[derive(Debug, Clone, PartialEq)]
pub struct EpParams {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl EpParams {
    /// Initialization: precision 1/sigma_x^2 on every symbol, zero linear term.
    pub fn init(dim: usize, sigma_x2: f64) -> Self {
        EpParams { theta: vec![1.0 / sigma_x2; dim], gamma: vec![0.0; dim] }
    }
}

/// Global Gaussian posterior approximation.
#[derive(Debug, Clone)]
pub struct GlobalGaussian {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
}

/// Per-symbol cavity means and variances. `invalid` marks indices where the
/// cavity precision 1/Sigma_ii - theta_ii was non-positive; those entries
/// fall back to the plain marginal (a = mu_i, b^2 = Sigma_ii) and the flag
/// lets callers substitute their own policy.
#[derive(Debug, Clone)]
pub struct CavitySet {
    pub a: Vec<f64>,
    pub b2: Vec<f64>,
    pub invalid: Vec<bool>,
}

impl CavitySet {
    pub fn invalid_count(&self) -> usize {
        self.invalid.iter().filter(|v| **v).count()
    }
}

/// Discrete posterior over the constellation per symbol.
#[derive(Debug, Clone)]
pub struct DiscretePosterior {
    pub probs: Matrix,
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
}

/// Moment-matching result: new parameters, plus which indices were accepted
/// and the undamped candidates (used to verify the moment identity).
#[derive(Debug, Clone)]
pub struct MomentMatchOutcome {
    pub params: EpParams,
    pub accepted: Vec<bool>,
    pub theta_star: Vec<f64>,
    pub gamma_star: Vec<f64>,
}

impl MomentMatchOutcome {
    pub fn skipped_count(&self) -> usize {
        self.accepted.iter().filter(|v| !**v).count()
    }
}

#[derive(Debug, Clone)]
pub struct EpConfig {
    pub iterations: usize,
    /// Damping weight on the old parameters; 0 disables damping.
    pub damping: f64,
    /// Posterior variances below this floor skip the parameter update.
    pub variance_floor: f64,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig { iterations: 9, damping: 0.7, variance_floor: 1e-8 }
    }
}

/// Per-iteration diagnostics, emitted as CSV by the CLI trace option.
#[derive(Debug, Clone)]
pub struct EpIterationDiag {
    pub iteration: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub skipped_updates: usize,
    pub invalid_cavities: usize,
    pub soft_ser: f64,
}

/// Result of a full EP run.
#[derive(Debug, Clone)]
pub struct EpRun {
    pub x_hat: Vec<f64>,
    pub diagnostics: Vec<EpIterationDiag>,
    /// Discrete posterior of the final iteration.
    pub posterior: DiscretePosterior,
    /// Parameter state after each iteration's moment match.
    pub params_trace: Vec<EpParams>,
}

/// Global Gaussian update:
/// Sigma = (sigma_n^-2 H^T H + diag(theta))^-1,
/// mu    = Sigma (sigma_n^-2 H^T y + gamma).
pub fn ep_global_update(
    h: &Matrix,
    y: &[f64],
    sigma_n: f64,
    params: &EpParams,
) -> Result<GlobalGaussian, EpError> {
    let inv_noise = 1.0 / (sigma_n * sigma_n);
    let mut a = h.gram().scale(inv_noise);
    for (i, &t) in params.theta.iter().enumerate() {
        let v = a.get(i, i) + t;
        a.set(i, i, v);
    }
    let factor = Cholesky::factor(&a)?;
    let sigma = factor.inverse();
    let hty = h.transpose().matvec(y);
    let rhs: Vec<f64> =
        hty.iter().zip(&params.gamma).map(|(v, g)| inv_noise * v + g).collect();
    let mu = factor.solve_vec(&rhs);
    Ok(GlobalGaussian { mu, sigma })
}

/// Divide the per-symbol Gaussian factor out of the global marginal:
/// 1/b_i^2 = 1/Sigma_ii - theta_ii, a_i = b_i^2 (mu_i/Sigma_ii - gamma_i).
pub fn cavity(g: &GlobalGaussian, params: &EpParams) -> CavitySet {
    let n = g.mu.len();
    let mut a = Vec::with_capacity(n);
    let mut b2 = Vec::with_capacity(n);
    let mut invalid = vec![false; n];
    for i in 0..n {
        let var = g.sigma.get(i, i);
        let prec_cav = 1.0 / var - params.theta[i];
        if prec_cav > 0.0 && prec_cav.is_finite() {
            let bi2 = 1.0 / prec_cav;
            b2.push(bi2);
            a.push(bi2 * (g.mu[i] / var - params.gamma[i]));
        } else {
            invalid[i] = true;
            b2.push(var);
            a.push(g.mu[i]);
        }
    }
    CavitySet { a, b2, invalid }
}

/// Restrict a Gaussian cavity to the constellation and take its moments.
pub fn discrete_posterior(c: &CavitySet, cons: &Constellation) -> DiscretePosterior {
    let n = c.a.len();
    let mut probs = Matrix::zeros(n, cons.size());
    let mut mu_hat = Vec::with_capacity(n);
    let mut sigma2_hat = Vec::with_capacity(n);
    let mut logits = vec![0.0; cons.size()];
    for i in 0..n {
        let denom = 2.0 * c.b2[i];
        for (j, &s) in cons.symbols().iter().enumerate() {
            let d = s - c.a[i];
            logits[j] = -((d * d) / denom);
        }
        let (p, m, v) = soft_statistics(&logits, cons);
        for (j, pj) in p.iter().enumerate() {
            probs.set(i, j, *pj);
        }
        mu_hat.push(m);
        sigma2_hat.push(v);
    }
    DiscretePosterior { probs, mu_hat, sigma2_hat }
}

/// Moment-matching parameter refit. Candidates
/// theta* = 1/sigma_hat^2 - 1/b^2 and gamma* = mu_hat/sigma_hat^2 - a/b^2
/// are kept only when sigma_hat^2 is above the floor and theta* is positive;
/// accepted candidates are blended with weight `damping` on the old values.
pub fn moment_match_update(
    d: &DiscretePosterior,
    c: &CavitySet,
    old: &EpParams,
    damping: f64,
    variance_floor: f64,
) -> MomentMatchOutcome {
    let n = c.a.len();
    let mut params = old.clone();
    let mut accepted = vec![false; n];
    let mut theta_star = vec![0.0; n];
    let mut gamma_star = vec![0.0; n];
    for i in 0..n {
        if d.sigma2_hat[i] < variance_floor {
            continue;
        }
        let ts = 1.0 / d.sigma2_hat[i] - 1.0 / c.b2[i];
        let gs = d.mu_hat[i] / d.sigma2_hat[i] - c.a[i] / c.b2[i];
        theta_star[i] = ts;
        gamma_star[i] = gs;
        if ts <= 0.0 || !ts.is_finite() || !gs.is_finite() {
            continue;
        }
        accepted[i] = true;
        params.theta[i] = (1.0 - damping) * ts + damping * old.theta[i];
        params.gamma[i] = (1.0 - damping) * gs + damping * old.gamma[i];
    }
    MomentMatchOutcome { params, accepted, theta_star, gamma_star }
}

/// Full iterative EP detection on one instance.
pub fn ep_detect(
    inst: &RealInstance,
    cons: &Constellation,
    cfg: &EpConfig,
) -> Result<EpRun, EpError> {
    assert!(cfg.iterations >= 1, "EP needs at least one iteration");
    let n = inst.dim();
    let mut params = EpParams::init(n, cons.variance());
    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    let mut params_trace = Vec::with_capacity(cfg.iterations);
    let mut last_posterior = None;
    for t in 1..=cfg.iterations {
        let g = ep_global_update(&inst.h, &inst.y, inst.sigma_n, &params)?;
        let c = cavity(&g, &params);
        let d = discrete_posterior(&c, cons);
        let mm = moment_match_update(&d, &c, &params, cfg.damping, cfg.variance_floor);
        let soft: Vec<f64> = d.mu_hat.iter().map(|&m| hard_round(m, cons)).collect();
        let soft_ser = soft
            .iter()
            .zip(&inst.x)
            .filter(|(a, b)| a != b)
            .count() as f64
            / n as f64;
        diagnostics.push(EpIterationDiag {
            iteration: t,
            theta_min: mm.params.theta.iter().cloned().fold(f64::INFINITY, f64::min),
            theta_max: mm.params.theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            skipped_updates: mm.skipped_count(),
            invalid_cavities: c.invalid_count(),
            soft_ser,
        });
        params = mm.params;
        params_trace.push(params.clone());
        last_posterior = Some(d);
    }
    let posterior = last_posterior.expect("at least one iteration");
    let x_hat: Vec<f64> = posterior.mu_hat.iter().map(|&m| hard_round(m, cons)).collect();
    Ok(EpRun { x_hat, diagnostics, posterior, params_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_lu;
    use crate::model::{ml_bruteforce, sample_instance_seeded};

    fn test_instance(seed: u64, snr_db: f64) -> RealInstance {
        sample_instance_seeded(2, 2, 1, snr_db, seed, &[0]).unwrap()
    }

    #[test]
    fn global_update_identity_channel() {
        let inst = RealInstance {
            n_t: 1,
            n_r: 1,
            k: 1,
            h: Matrix::identity(2),
            y: vec![0.3, -0.7],
            x: vec![1.0, -1.0],
            sigma_n: 1.0,
        };
        let params = EpParams { theta: vec![0.0, 0.0], gamma: vec![0.0, 0.0] };
        let g = ep_global_update(&inst.h, &inst.y, inst.sigma_n, &params).unwrap();
        assert!(g.sigma.sub(&Matrix::identity(2)).max_abs() < 1e-14);
        assert!((g.mu[0] - 0.3).abs() < 1e-14);
        assert!((g.mu[1] + 0.7).abs() < 1e-14);
    }

    #[test]
    fn first_iteration_is_lmmse() {
        let inst = test_instance(3, 8.0);
        let cons = Constellation::new(1).unwrap();
        let params = EpParams::init(inst.dim(), cons.variance());
        let g = ep_global_update(&inst.h, &inst.y, inst.sigma_n, &params).unwrap();
        // closed-form LMMSE through the independent LU route:
        // (H^T H + (sigma_n^2/sigma_x^2) I)^-1 H^T y
        let ratio = inst.sigma_n * inst.sigma_n / cons.variance();
        let a = inst.h.gram().add(&Matrix::identity(inst.dim()).scale(ratio));
        let hty = Matrix::col_vec(&inst.h.transpose().matvec(&inst.y));
        let lmmse = solve_lu(&a, &hty).unwrap();
        for i in 0..inst.dim() {
            assert!(
                (g.mu[i] - lmmse.get(i, 0)).abs() < 1e-10,
                "mu[{i}] = {} vs lmmse {}",
                g.mu[i],
                lmmse.get(i, 0)
            );
        }
    }

    #[test]
    fn global_sigma_matches_lu_inverse() {
        let inst = test_instance(9, 5.0);
        let params = EpParams::init(inst.dim(), 1.0);
        let g = ep_global_update(&inst.h, &inst.y, inst.sigma_n, &params).unwrap();
        let inv_noise = 1.0 / (inst.sigma_n * inst.sigma_n);
        let mut a = inst.h.gram().scale(inv_noise);
        for i in 0..inst.dim() {
            let v = a.get(i, i) + params.theta[i];
            a.set(i, i, v);
        }
        let reference = solve_lu(&a, &Matrix::identity(inst.dim())).unwrap();
        assert!(g.sigma.sub(&reference).max_abs() < 1e-8);
    }

    #[test]
    fn cavity_with_zero_factor_returns_marginal() {
        let g = GlobalGaussian {
            mu: vec![0.4, -0.2],
            sigma: Matrix::diag(&[0.5, 0.25]),
        };
        let params = EpParams { theta: vec![0.0, 0.0], gamma: vec![0.0, 0.0] };
        let c = cavity(&g, &params);
        assert_eq!(c.a, g.mu);
        assert_eq!(c.b2, vec![0.5, 0.25]);
        assert!(!c.invalid[0] && !c.invalid[1]);
    }

    #[test]
    fn cavity_direct_formula_case() {
        // Sigma_ii = 0.5, theta = 1, gamma = 0 -> b^2 = 1, a = 2 mu
        let g = GlobalGaussian { mu: vec![0.3], sigma: Matrix::diag(&[0.5]) };
        let params = EpParams { theta: vec![1.0], gamma: vec![0.0] };
        let c = cavity(&g, &params);
        assert!((c.b2[0] - 1.0).abs() < 1e-14);
        assert!((c.a[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn cavity_multiply_back_recovers_marginal() {
        let g = GlobalGaussian {
            mu: vec![0.7, -1.1, 0.2],
            sigma: Matrix::diag(&[0.4, 0.9, 0.15]),
        };
        let params = EpParams {
            theta: vec![0.8, 0.3, 2.0],
            gamma: vec![0.5, -0.2, 0.9],
        };
        let c = cavity(&g, &params);
        for i in 0..3 {
            assert!(!c.invalid[i]);
            // Gaussian product: precisions add, precision-weighted means add
            let prec = 1.0 / c.b2[i] + params.theta[i];
            let mean = (c.a[i] / c.b2[i] + params.gamma[i]) / prec;
            assert!((1.0 / prec - g.sigma.get(i, i)).abs() < 1e-10);
            assert!((mean - g.mu[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn cavity_flags_invalid_precision() {
        let g = GlobalGaussian { mu: vec![0.0], sigma: Matrix::diag(&[0.5]) };
        let params = EpParams { theta: vec![3.0], gamma: vec![0.0] }; // 1/0.5 - 3 < 0
        let c = cavity(&g, &params);
        assert!(c.invalid[0]);
        assert_eq!(c.b2[0], 0.5);
        assert_eq!(c.invalid_count(), 1);
    }

    #[test]
    fn discrete_posterior_symmetry_and_saturation() {
        let cons = Constellation::new(1).unwrap();
        let c = CavitySet { a: vec![0.0], b2: vec![1.0], invalid: vec![false] };
        let d = discrete_posterior(&c, &cons);
        assert!((d.probs.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(d.mu_hat[0], 0.0);
        assert_eq!(d.sigma2_hat[0], 1.0);
        let c = CavitySet { a: vec![10.0], b2: vec![0.01], invalid: vec![false] };
        let d = discrete_posterior(&c, &cons);
        assert!(d.probs.get(0, 1) > 1.0 - 1e-12);
        assert!(d.sigma2_hat[0] < 1e-10);
    }

    #[test]
    fn discrete_posterior_matches_direct_summation() {
        let cons = Constellation::new(2).unwrap();
        let c = CavitySet { a: vec![0.3], b2: vec![2.0], invalid: vec![false] };
        let d = discrete_posterior(&c, &cons);
        // direct 4-term evaluation
        let weights: Vec<f64> = cons
            .symbols()
            .iter()
            .map(|&s| (-(s - 0.3) * (s - 0.3) / 4.0).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        let mean: f64 =
            weights.iter().zip(cons.symbols()).map(|(w, s)| w * s).sum::<f64>() / z;
        let var: f64 = weights
            .iter()
            .zip(cons.symbols())
            .map(|(w, s)| w * (s - mean) * (s - mean))
            .sum::<f64>()
            / z;
        for (j, w) in weights.iter().enumerate() {
            assert!((d.probs.get(0, j) - w / z).abs() < 1e-12);
        }
        assert!((d.mu_hat[0] - mean).abs() < 1e-12);
        assert!((d.sigma2_hat[0] - var).abs() < 1e-12);
    }

    #[test]
    fn moment_match_skips_no_information_case() {
        // posterior moments equal to cavity moments: theta* = 0 -> skip
        let c = CavitySet { a: vec![0.2], b2: vec![0.7], invalid: vec![false] };
        let d = DiscretePosterior {
            probs: Matrix::zeros(1, 2),
            mu_hat: vec![0.2],
            sigma2_hat: vec![0.7],
        };
        let old = EpParams { theta: vec![1.5], gamma: vec![0.4] };
        let mm = moment_match_update(&d, &c, &old, 0.0, 1e-8);
        assert!(!mm.accepted[0]);
        assert_eq!(mm.params, old);
    }

    #[test]
    fn moment_match_undamped_uses_exact_candidates() {
        let c = CavitySet { a: vec![0.5], b2: vec![1.0], invalid: vec![false] };
        let d = DiscretePosterior {
            probs: Matrix::zeros(1, 2),
            mu_hat: vec![0.8],
            sigma2_hat: vec![0.25],
        };
        let old = EpParams { theta: vec![1.0], gamma: vec![0.0] };
        let mm = moment_match_update(&d, &c, &old, 0.0, 1e-8);
        assert!(mm.accepted[0]);
        assert!((mm.params.theta[0] - (4.0 - 1.0)).abs() < 1e-14);
        assert!((mm.params.gamma[0] - (0.8 / 0.25 - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn moment_identity_holds_for_accepted_candidates() {
        let c = CavitySet {
            a: vec![0.5, -0.3, 1.2],
            b2: vec![1.0, 0.6, 2.5],
            invalid: vec![false; 3],
        };
        let d = DiscretePosterior {
            probs: Matrix::zeros(3, 2),
            mu_hat: vec![0.8, -0.5, 0.9],
            sigma2_hat: vec![0.25, 0.5, 0.9],
        };
        let old = EpParams { theta: vec![1.0; 3], gamma: vec![0.0; 3] };
        let mm = moment_match_update(&d, &c, &old, 0.3, 1e-8);
        for i in 0..3 {
            if !mm.accepted[i] {
                continue;
            }
            // recombine N(a, b^2) with exp{-theta*/2 x^2 + gamma* x}
            let prec = 1.0 / c.b2[i] + mm.theta_star[i];
            let mean = (c.a[i] / c.b2[i] + mm.gamma_star[i]) / prec;
            assert!((1.0 / prec - d.sigma2_hat[i]).abs() < 1e-10);
            assert!((mean - d.mu_hat[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ep_detect_recovers_noiseless_symbols() {
        let cons = Constellation::new(1).unwrap();
        for seed in 0..10 {
            let mut inst = sample_instance_seeded(2, 2, 1, 20.0, 100 + seed, &[0]).unwrap();
            // make it effectively noiseless while keeping H random
            inst.sigma_n = 1e-6;
            inst.y = inst.h.matvec(&inst.x);
            let run = ep_detect(&inst, &cons, &EpConfig::default()).unwrap();
            assert_eq!(run.x_hat, inst.x);
            let ml = ml_bruteforce(&inst.y, &inst.h, &cons).unwrap();
            assert_eq!(run.x_hat, ml);
        }
    }

    #[test]
    fn ep_detect_t1_matches_straight_line_composition() {
        let cons = Constellation::new(1).unwrap();
        let inst = test_instance(44, 6.0);
        let cfg = EpConfig { iterations: 1, ..EpConfig::default() };
        let run = ep_detect(&inst, &cons, &cfg).unwrap();
        let params = EpParams::init(inst.dim(), cons.variance());
        let g = ep_global_update(&inst.h, &inst.y, inst.sigma_n, &params).unwrap();
        let c = cavity(&g, &params);
        let d = discrete_posterior(&c, &cons);
        for i in 0..inst.dim() {
            assert!((run.posterior.mu_hat[i] - d.mu_hat[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn theta_stays_positive_across_iterations() {
        let cons = Constellation::new(2).unwrap();
        for seed in 0..5 {
            let inst = sample_instance_seeded(4, 4, 2, 10.0, 500 + seed, &[0]).unwrap();
            let run = ep_detect(&inst, &cons, &EpConfig::default()).unwrap();
            for diag in &run.diagnostics {
                assert!(diag.theta_min > 0.0, "theta went non-positive: {diag:?}");
                assert_eq!(diag.invalid_cavities, 0);
            }
        }
    }

    #[test]
    fn ep_ser_improves_with_snr_smoke() {
        let cons = Constellation::new(1).unwrap();
        let cfg = EpConfig::default();
        let count = 4000;
        let mut errs = [0usize; 2];
        for (p, &snr) in [0.0, 10.0].iter().enumerate() {
            for i in 0..count {
                let inst =
                    sample_instance_seeded(2, 2, 1, snr, 7000, &[p as u64, i as u64]).unwrap();
                let run = ep_detect(&inst, &cons, &cfg).unwrap();
                errs[p] += run.x_hat.iter().zip(&inst.x).filter(|(a, b)| a != b).count();
            }
        }
        assert!(
            errs[1] * 3 < errs[0],
            "SER did not drop with SNR: {} vs {}",
            errs[0],
            errs[1]
        );
    }
}
