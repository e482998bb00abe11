//! MIMO system model: constellations, the complex-to-real transformation,
//! instance sampling at a target SNR, soft/hard decisions, the exhaustive
//! maximum-likelihood reference, and symbol error rates.

use crate::linalg::{smallest_singular_value, vec_norm2, vec_sub, Matrix};
use crate::rng;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("modulation order exponent k must be 1, 2 or 3, got {0}")]
    BadModulationOrder(u32),
    #[error("instance too large for exhaustive search: 2*N_t*k = {0} exceeds {MAX_ML_BITS}")]
    MlTooLarge(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sampled channel was rank deficient {0} times in a row")]
    RankDeficient(usize),
    #[error("need N_r >= N_t for a full-column-rank channel, got N_t={n_t}, N_r={n_r}")]
    UnderDetermined { n_t: usize, n_r: usize },
    #[error("batch file parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Exhaustive search guard: at most 2^20 candidate vectors.
pub const MAX_ML_BITS: usize = 20;

const RANK_SV_THRESHOLD: f64 = 1e-10;
const MAX_RESAMPLE_ATTEMPTS: usize = 10;

/// Real PAM alphabet after the complex-to-real split: the ordered odd
/// integers -(2^k-1), ..., -1, 1, ..., 2^k-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    k: u32,
    symbols: Vec<f64>,
}

impl Constellation {
    pub fn new(k: u32) -> Result<Self, ModelError> {
        if !(1..=3).contains(&k) {
            return Err(ModelError::BadModulationOrder(k));
        }
        let top = (1i64 << k) - 1;
        let symbols = (-top..=top).step_by(2).map(|s| s as f64).collect();
        Ok(Constellation { k, symbols })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[f64] {
        &self.symbols
    }

    pub fn symbol(&self, j: usize) -> f64 {
        self.symbols[j]
    }

    /// Per-symbol variance of the uniform distribution: (4^k - 1)/3.
    pub fn variance(&self) -> f64 {
        ((4f64.powi(self.k as i32)) - 1.0) / 3.0
    }

    pub fn index_of(&self, symbol: f64) -> Option<usize> {
        self.symbols.iter().position(|&s| s == symbol)
    }
}

/// Complex-domain detection problem.
#[derive(Debug, Clone)]
pub struct ComplexInstance {
    pub n_t: usize,
    pub n_r: usize,
    /// Channel, row-major N_r x N_t.
    pub h_c: Vec<Complex64>,
    pub y_c: Vec<Complex64>,
    pub x_c: Vec<Complex64>,
    pub sigma_c: f64,
}

/// Real-valued detection problem after the stacking transformation.
#[derive(Debug, Clone)]
pub struct RealInstance {
    pub n_t: usize,
    pub n_r: usize,
    pub k: u32,
    /// 2N_r x 2N_t with block structure [[Re, -Im], [Im, Re]].
    pub h: Matrix,
    pub y: Vec<f64>,
    /// Ground-truth symbols, entries from the real constellation.
    pub x: Vec<f64>,
    pub sigma_n: f64,
}

impl RealInstance {
    pub fn dim(&self) -> usize {
        2 * self.n_t
    }
}

/// Stack the complex model into the equivalent real one. The residual norm
/// is preserved: ||y - Hx||_2 equals ||y_c - H_c x_c||_2.
pub fn realify(c: &ComplexInstance, k: u32) -> RealInstance {
    let (n_t, n_r) = (c.n_t, c.n_r);
    let mut h = Matrix::zeros(2 * n_r, 2 * n_t);
    for r in 0..n_r {
        for col in 0..n_t {
            let v = c.h_c[r * n_t + col];
            h.set(r, col, v.re);
            h.set(r, n_t + col, -v.im);
            h.set(n_r + r, col, v.im);
            h.set(n_r + r, n_t + col, v.re);
        }
    }
    let mut y = Vec::with_capacity(2 * n_r);
    y.extend(c.y_c.iter().map(|v| v.re));
    y.extend(c.y_c.iter().map(|v| v.im));
    let mut x = Vec::with_capacity(2 * n_t);
    x.extend(c.x_c.iter().map(|v| v.re));
    x.extend(c.x_c.iter().map(|v| v.im));
    RealInstance { n_t, n_r, k, h, y, x, sigma_n: c.sigma_c / std::f64::consts::SQRT_2 }
}

/// Real-noise standard deviation for a target SNR in dB, using the
/// closed-form expectations E||H_c x_c||^2 = N_t * 2 sigma_x^2 (with channel
/// entries CN(0, 1/N_r)) and E||n_c||^2 = N_r * sigma_c^2.
pub fn sigma_from_snr(snr_db: f64, n_t: usize, n_r: usize, k: u32) -> Result<f64, ModelError> {
    let cons = Constellation::new(k)?;
    let sigma_x2 = cons.variance();
    let snr = 10f64.powf(snr_db / 10.0);
    let sigma_c2 = 2.0 * sigma_x2 * n_t as f64 / (n_r as f64 * snr);
    Ok((sigma_c2 / 2.0).sqrt())
}

/// Draw one instance: i.i.d. CN(0, 1/N_r) channel, uniform constellation
/// symbols, circular Gaussian noise calibrated by [`sigma_from_snr`].
/// Rank-deficient channels are resampled (up to a small retry budget).
pub fn sample_instance(
    n_t: usize,
    n_r: usize,
    k: u32,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RealInstance, ModelError> {
    if n_r < n_t {
        return Err(ModelError::UnderDetermined { n_t, n_r });
    }
    let cons = Constellation::new(k)?;
    let sigma_n = sigma_from_snr(snr_db, n_t, n_r, k)?;
    let sigma_c = sigma_n * std::f64::consts::SQRT_2;
    let h_std = (1.0 / (2.0 * n_r as f64)).sqrt();
    let h_dist = Normal::new(0.0, h_std).expect("valid std");
    let n_dist = Normal::new(0.0, sigma_n).expect("valid std");
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let h_c: Vec<Complex64> = (0..n_r * n_t)
            .map(|_| Complex64::new(h_dist.sample(rng), h_dist.sample(rng)))
            .collect();
        let x_c: Vec<Complex64> = (0..n_t)
            .map(|_| {
                let re = cons.symbol(rng.random_range(0..cons.size()));
                let im = cons.symbol(rng.random_range(0..cons.size()));
                Complex64::new(re, im)
            })
            .collect();
        let y_c: Vec<Complex64> = (0..n_r)
            .map(|r| {
                let mut acc = Complex64::new(n_dist.sample(rng), n_dist.sample(rng));
                for c in 0..n_t {
                    acc += h_c[r * n_t + c] * x_c[c];
                }
                acc
            })
            .collect();
        let inst = realify(&ComplexInstance { n_t, n_r, h_c, y_c, x_c, sigma_c }, k);
        let sv = smallest_singular_value(&inst.h).expect("gram of finite matrix is symmetric");
        if sv > RANK_SV_THRESHOLD {
            return Ok(inst);
        }
        let _ = attempt;
    }
    Err(ModelError::RankDeficient(MAX_RESAMPLE_ATTEMPTS))
}

/// Convenience wrapper deriving the instance stream from a base seed + tags.
pub fn sample_instance_seeded(
    n_t: usize,
    n_r: usize,
    k: u32,
    snr_db: f64,
    base_seed: u64,
    tags: &[u64],
) -> Result<RealInstance, ModelError> {
    sample_instance(n_t, n_r, k, snr_db, &mut rng::rng_from(base_seed, tags))
}

/// Row softmax of logits, then soft symbol mean and the variance about it.
pub fn soft_statistics(logits: &[f64], cons: &Constellation) -> (Vec<f64>, f64, f64) {
    assert_eq!(logits.len(), cons.size(), "logit count must match constellation size");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let a_hat: f64 = probs.iter().zip(cons.symbols()).map(|(p, s)| p * s).sum();
    let b2_hat: f64 = probs
        .iter()
        .zip(cons.symbols())
        .map(|(p, s)| p * ((s - a_hat) * (s - a_hat)))
        .sum();
    (probs, a_hat, b2_hat)
}

/// Nearest constellation point; exact ties go to the smaller symbol.
pub fn hard_round(a_hat: f64, cons: &Constellation) -> f64 {
    let mut best = cons.symbol(0);
    let mut best_dist = (a_hat - best).abs();
    for &s in &cons.symbols()[1..] {
        let d = (a_hat - s).abs();
        if d < best_dist {
            best_dist = d;
            best = s;
        }
    }
    best
}

/// Exact integer-least-squares solution by exhaustive enumeration, for use
/// as the optimal-detector reference at small sizes. Candidates are visited
/// in lexicographic symbol order and ties keep the first minimizer.
pub fn ml_bruteforce(y: &[f64], h: &Matrix, cons: &Constellation) -> Result<Vec<f64>, ModelError> {
    let n = h.cols();
    let bits = n * cons.k() as usize;
    if bits > MAX_ML_BITS {
        return Err(ModelError::MlTooLarge(bits));
    }
    if y.len() != h.rows() {
        return Err(ModelError::LengthMismatch(y.len(), h.rows()));
    }
    let s = cons.size();
    let total = s.pow(n as u32);
    let mut best: Vec<usize> = vec![0; n];
    let mut best_obj = f64::INFINITY;
    let mut digits = vec![0usize; n];
    for idx in 0..total {
        let mut rem = idx;
        for pos in (0..n).rev() {
            digits[pos] = rem % s;
            rem /= s;
        }
        let mut obj = 0.0;
        for r in 0..h.rows() {
            let row = h.row(r);
            let mut acc = -y[r];
            for (c, &d) in digits.iter().enumerate() {
                acc += row[c] * cons.symbol(d);
            }
            obj += acc * acc;
        }
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&digits);
        }
    }
    Ok(best.iter().map(|&d| cons.symbol(d)).collect())
}

/// Fraction of mismatched symbols.
pub fn ser(x_hat: &[f64], x: &[f64]) -> Result<f64, ModelError> {
    if x_hat.len() != x.len() {
        return Err(ModelError::LengthMismatch(x_hat.len(), x.len()));
    }
    let errors = x_hat.iter().zip(x).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / x.len() as f64)
}

pub fn symbol_errors(x_hat: &[f64], x: &[f64]) -> Result<usize, ModelError> {
    if x_hat.len() != x.len() {
        return Err(ModelError::LengthMismatch(x_hat.len(), x.len()));
    }
    Ok(x_hat.iter().zip(x).filter(|(a, b)| a != b).count())
}

/// One-hot label matrix: row i marks the constellation index of x_i.
pub fn label_matrix(x: &[f64], cons: &Constellation) -> Matrix {
    let mut z = Matrix::zeros(x.len(), cons.size());
    for (i, &xi) in x.iter().enumerate() {
        let j = cons
            .index_of(xi)
            .unwrap_or_else(|| panic!("symbol {xi} not in constellation"));
        z.set(i, j, 1.0);
    }
    z
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// Write a batch of instances in the plain text exchange format:
///
/// ```text
/// format_version 1
/// n_t <int>
/// n_r <int>
/// k <int>
/// snr_db <float>
/// count <int>
/// instance <index>
/// sigma_n <float>
/// h <2N_t floats>     (one line per row of the 2N_r x 2N_t real channel)
/// y <2N_r floats>
/// x <2N_t floats>
/// ```
pub fn write_instance_batch(instances: &[RealInstance], snr_db: f64) -> String {
    let mut out = String::new();
    out.push_str("format_version 1\n");
    if let Some(first) = instances.first() {
        out.push_str(&format!("n_t {}\n", first.n_t));
        out.push_str(&format!("n_r {}\n", first.n_r));
        out.push_str(&format!("k {}\n", first.k));
    }
    out.push_str(&format!("snr_db {}\n", fmt_f64(snr_db)));
    out.push_str(&format!("count {}\n", instances.len()));
    for (i, inst) in instances.iter().enumerate() {
        out.push_str(&format!("instance {i}\n"));
        out.push_str(&format!("sigma_n {}\n", fmt_f64(inst.sigma_n)));
        for r in 0..inst.h.rows() {
            out.push('h');
            for c in 0..inst.h.cols() {
                out.push(' ');
                out.push_str(&fmt_f64(inst.h.get(r, c)));
            }
            out.push('\n');
        }
        out.push('y');
        for v in &inst.y {
            out.push(' ');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
        out.push('x');
        for v in &inst.x {
            out.push(' ');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

fn batch_err(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::Parse { line: line + 1, message: message.into() }
}

type BatchLines<'a> = std::iter::Enumerate<std::str::Lines<'a>>;

fn batch_kv(lines: &mut BatchLines, key: &str) -> Result<String, ModelError> {
    let (n, line) = lines
        .next()
        .ok_or_else(|| batch_err(0, format!("missing {key} header")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(batch_err(n, format!("expected {key} line, got {line:?}")));
    }
    Ok(parts.collect::<Vec<_>>().join(" "))
}

fn batch_floats(lines: &mut BatchLines, prefix: &str, expect: usize) -> Result<Vec<f64>, ModelError> {
    let (n, line) = lines
        .next()
        .ok_or_else(|| batch_err(0, format!("missing {prefix} line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(prefix) {
        return Err(batch_err(n, format!("expected {prefix} line")));
    }
    let vals: Result<Vec<f64>, ModelError> = parts
        .map(|tok| tok.parse::<f64>().map_err(|_| batch_err(n, format!("bad float {tok:?}"))))
        .collect();
    let vals = vals?;
    if vals.len() != expect {
        return Err(batch_err(n, format!("{prefix} line has {} values, expected {expect}", vals.len())));
    }
    Ok(vals)
}

/// Parse the batch format from [`write_instance_batch`].
pub fn read_instance_batch(text: &str) -> Result<(Vec<RealInstance>, f64), ModelError> {
    let mut lines = text.lines().enumerate();
    if batch_kv(&mut lines, "format_version")? != "1" {
        return Err(batch_err(0, "unsupported format version"));
    }
    let n_t: usize =
        batch_kv(&mut lines, "n_t")?.parse().map_err(|_| batch_err(1, "bad n_t"))?;
    let n_r: usize =
        batch_kv(&mut lines, "n_r")?.parse().map_err(|_| batch_err(2, "bad n_r"))?;
    let k: u32 = batch_kv(&mut lines, "k")?.parse().map_err(|_| batch_err(3, "bad k"))?;
    let snr_db: f64 =
        batch_kv(&mut lines, "snr_db")?.parse().map_err(|_| batch_err(4, "bad snr_db"))?;
    let count: usize =
        batch_kv(&mut lines, "count")?.parse().map_err(|_| batch_err(5, "bad count"))?;
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let tag = batch_kv(&mut lines, "instance")?;
        if tag.parse::<usize>().ok() != Some(i) {
            return Err(batch_err(0, format!("instance header out of order: {tag}")));
        }
        let sigma_n: f64 = batch_kv(&mut lines, "sigma_n")?
            .parse()
            .map_err(|_| batch_err(0, "bad sigma_n"))?;
        let mut h = Matrix::zeros(2 * n_r, 2 * n_t);
        for r in 0..2 * n_r {
            let vals = batch_floats(&mut lines, "h", 2 * n_t)?;
            for (c, v) in vals.into_iter().enumerate() {
                h.set(r, c, v);
            }
        }
        let y = batch_floats(&mut lines, "y", 2 * n_r)?;
        let x = batch_floats(&mut lines, "x", 2 * n_t)?;
        instances.push(RealInstance { n_t, n_r, k, h, y, x, sigma_n });
    }
    Ok((instances, snr_db))
}

/// Residual norm of the complex model, used to cross-check `realify`.
pub fn complex_residual_norm(c: &ComplexInstance) -> f64 {
    let mut acc = 0.0;
    for r in 0..c.n_r {
        let mut v = c.y_c[r];
        for col in 0..c.n_t {
            v -= c.h_c[r * c.n_t + col] * c.x_c[col];
        }
        acc += v.norm_sqr();
    }
    acc.sqrt()
}

/// Residual norm of the real model.
pub fn real_residual_norm(inst: &RealInstance) -> f64 {
    vec_norm2(&vec_sub(&inst.y, &inst.h.matvec(&inst.x)))
}
