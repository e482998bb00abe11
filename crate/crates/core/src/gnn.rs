//! Graph-side building blocks for the learned detectors.
//!
//! The unknown real symbols form a fully connected graph whose weight matrix
//! is the scaled Gram matrix of the channel; its normalized Laplacian
//! L = I - H^T H / lambda_max(H^T H) has spectrum in [0, 1), so the system
//! model itself is a spectral convolution with the Neumann-series filter
//! (verified by `neumann_check`). The trained convolution approximates that
//! filter with a Chebyshev expansion whose coefficients come from an
//! attention network over the initial node signal, instead of being fixed.
//!
//! Everything that has to be trained is written against the autodiff tape;
//! the plain-matrix entry points below build a throwaway tape internally so
//! tests and reference code exercise the exact same computation.

use crate::autodiff::{NodeId, Tape};
use crate::linalg::{jacobi_eigen, lambda_max, LinalgError, Matrix, POWER_ITER_MAX, POWER_ITER_TOL};
use crate::model::Constellation;
use crate::params::{ParamError, ParameterSet};
use crate::rng::{self, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Normalized graph Laplacian of the fully connected symbol graph.
#[derive(Debug, Clone)]
pub struct LaplacianMimo {
    /// L = I - W, symmetric, spectrum in [0, 1).
    pub l: Matrix,
    /// 1 / lambda_max(H^T H).
    pub alpha: f64,
    /// Edge weight matrix alpha * H^T H, spectral radius 1.
    pub w: Matrix,
}

/// Build the Laplacian from a full-column-rank channel.
pub fn build_laplacian(h: &Matrix) -> Result<LaplacianMimo, LinalgError> {
    let gram = h.gram();
    let lam = lambda_max(&gram, POWER_ITER_TOL, POWER_ITER_MAX)?;
    let alpha = 1.0 / lam;
    let w = gram.scale(alpha);
    let l = Matrix::identity(w.rows()).sub(&w);
    Ok(LaplacianMimo { l, alpha, w })
}

/// Initial two-column node signal: [alpha H^T y, alpha sigma_n H^T 1].
pub fn init_signal(h: &Matrix, y: &[f64], sigma_n: f64, alpha: f64) -> Matrix {
    let ht = h.transpose();
    let col1 = ht.matvec(y);
    let ones = vec![1.0; h.rows()];
    let col2 = ht.matvec(&ones);
    let n = h.cols();
    let mut s0 = Matrix::zeros(n, 2);
    for i in 0..n {
        s0.set(i, 0, alpha * col1[i]);
        s0.set(i, 1, alpha * sigma_n * col2[i]);
    }
    s0
}

/// Reference spectral filter: eigendecompose L, evaluate the Chebyshev
/// series on the eigenvalues, and transform back. Independent of the
/// recursion route in `cheb_apply`.
pub fn spectral_filter_oracle(
    l: &Matrix,
    s: &Matrix,
    coeffs: &[f64],
) -> Result<Matrix, LinalgError> {
    let (vals, u) = jacobi_eigen(l)?;
    let g: Vec<f64> = vals
        .iter()
        .map(|&lam| {
            let mut acc = coeffs[0];
            let (mut t_prev, mut t_curr) = (1.0, lam);
            if coeffs.len() > 1 {
                acc += coeffs[1] * lam;
            }
            for &c in coeffs.iter().skip(2) {
                let t_next = 2.0 * lam * t_curr - t_prev;
                acc += c * t_next;
                t_prev = t_curr;
                t_curr = t_next;
            }
            acc
        })
        .collect();
    // U diag(g) U^T s computed via the graph Fourier transform pair
    let s_hat = u.transpose().matmul(s);
    let mut filtered = s_hat;
    for r in 0..filtered.rows() {
        for c in 0..filtered.cols() {
            let v = filtered.get(r, c) * g[r];
            filtered.set(r, c, v);
        }
    }
    Ok(u.matmul(&filtered))
}

/// Truncation error of the Neumann-series reading of the system model:
/// with noiseless graph signal W x, returns || sum_{m<=K} L^m (W x) - x ||_2.
pub fn neumann_check(h: &Matrix, x: &[f64], terms: usize) -> Result<f64, LinalgError> {
    let lm = build_laplacian(h)?;
    let signal = lm.w.matvec(x);
    let mut term = signal.clone();
    let mut acc = signal;
    for _ in 1..=terms {
        term = lm.l.matvec(&term);
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += t;
        }
    }
    let err: f64 = acc.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(err)
}

/// Geometric tail bound for the truncation error above.
pub fn neumann_tail_bound(lambda_max_l: f64, x_norm: f64, terms: usize) -> f64 {
    lambda_max_l.powi(terms as i32 + 1) * x_norm / (1.0 - lambda_max_l)
}

// ---------------------------------------------------------------------------
// network shapes and parameter initialization
// ---------------------------------------------------------------------------

/// Which convolution the network uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnVariant {
    /// Chebyshev graph convolution with attention coefficients.
    Gcepnet,
    /// Pairwise MLP aggregation over all ordered node pairs.
    Gepnet,
}

impl GnnVariant {
    pub fn name(&self) -> &'static str {
        match self {
            GnnVariant::Gcepnet => "gcepnet",
            GnnVariant::Gepnet => "gepnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gcepnet" => Some(GnnVariant::Gcepnet),
            "gepnet" => Some(GnnVariant::Gepnet),
            _ => None,
        }
    }
}

/// Shape hyperparameters of the GNN stack.
#[derive(Debug, Clone)]
pub struct GnnDims {
    /// Node count 2 N_t.
    pub n: usize,
    /// Modulation exponent; readout emits 2^k classes.
    pub k: u32,
    pub n_u: usize,
    pub n_h1: usize,
    pub n_h2: usize,
    /// Chebyshev order M.
    pub cheb_order: usize,
    pub layers: usize,
    /// Replace the per-node bias B0 with one shared row (size-transfer mode).
    pub shared_node_bias: bool,
    /// Tie the per-layer MLP/GRU parameters across layers.
    pub share_layer_params: bool,
}

impl GnnDims {
    pub fn with_defaults(n: usize, k: u32) -> Self {
        GnnDims {
            n,
            k,
            n_u: 8,
            n_h1: 64,
            n_h2: 32,
            cheb_order: 3,
            layers: 2,
            shared_node_bias: false,
            share_layer_params: false,
        }
    }

    pub fn classes(&self) -> usize {
        1usize << self.k
    }

    pub fn layer_prefix(&self, layer: usize) -> String {
        if self.share_layer_params {
            "layer0".to_string()
        } else {
            format!("layer{layer}")
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn insert_mlp(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    sizes: [usize; 4],
) -> Result<(), ParamError> {
    let [d_in, h1, h2, d_out] = sizes;
    params.insert(&format!("{prefix}.w1"), glorot(rng, d_in, h1), true)?;
    params.insert(&format!("{prefix}.b1"), Matrix::zeros(1, h1), true)?;
    params.insert(&format!("{prefix}.w2"), glorot(rng, h1, h2), true)?;
    params.insert(&format!("{prefix}.b2"), Matrix::zeros(1, h2), true)?;
    params.insert(&format!("{prefix}.w3"), glorot(rng, h2, d_out), true)?;
    params.insert(&format!("{prefix}.b3"), Matrix::zeros(1, d_out), true)?;
    Ok(())
}

fn insert_gru(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
) -> Result<(), ParamError> {
    for gate in ["z", "r", "h"] {
        params.insert(&format!("{prefix}.w{gate}"), glorot(rng, d_in, d_hidden), true)?;
        params.insert(&format!("{prefix}.u{gate}"), glorot(rng, d_hidden, d_hidden), true)?;
        params.insert(&format!("{prefix}.b{gate}"), Matrix::zeros(1, d_hidden), true)?;
    }
    Ok(())
}

/// Fresh parameter set for a detector network: input embedding, per-layer
/// convolution + GRU parameters, readout, and (for the Chebyshev variant)
/// the attention network. Weights are Glorot-uniform, biases zero, all
/// drawn from one seeded stream so initialization is reproducible.
pub fn init_gnn_params(
    dims: &GnnDims,
    variant: GnnVariant,
    seed: u64,
) -> Result<ParameterSet, ParamError> {
    let mut rng = rng::rng_from(seed, &[tag::PARAM_INIT]);
    let mut params = ParameterSet::new();
    params.insert("embed.w0", glorot(&mut rng, 2, dims.n_u), true)?;
    let b0_rows = if dims.shared_node_bias { 1 } else { dims.n };
    params.insert("embed.b0", Matrix::zeros(b0_rows, dims.n_u), true)?;
    if variant == GnnVariant::Gcepnet {
        insert_mlp(&mut params, &mut rng, "att", [2, dims.n_h1, dims.n_h2, dims.cheb_order + 1])?;
    }
    let layer_count = if dims.share_layer_params { 1 } else { dims.layers };
    for layer in 0..layer_count {
        let prefix = format!("layer{layer}");
        match variant {
            GnnVariant::Gcepnet => {
                insert_mlp(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.mlp1"),
                    [dims.n_u, dims.n_h1, dims.n_h2, dims.n_u],
                )?;
            }
            GnnVariant::Gepnet => {
                insert_mlp(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.mlp4"),
                    [2 * dims.n_u + 2, dims.n_h1, dims.n_h2, dims.n_u],
                )?;
            }
        }
        insert_gru(&mut params, &mut rng, &format!("{prefix}.gru"), dims.n_u + 2, dims.n_u)?;
    }
    insert_mlp(
        &mut params,
        &mut rng,
        "readout",
        [dims.n_u, dims.n_h1, dims.n_h2, dims.classes()],
    )?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// tape binding
// ---------------------------------------------------------------------------

/// Map from parameter names to their leaf nodes on one tape.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound on this tape"))
    }
}

/// Put every parameter on the tape. With `trainable` the leaves track
/// gradients; otherwise the whole forward runs gradient-free.
pub fn bind_params(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> Binding {
    let mut ids = HashMap::with_capacity(params.len());
    for p in params.iter() {
        let id = if trainable && p.trainable {
            tape.param(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        ids.insert(p.name.clone(), id);
    }
    Binding { ids }
}

/// Accumulate `scale` times the tape gradients into the parameter set.
/// Trainable parameters that the loss never touched get explicit zeros so a
/// subsequent optimizer step sees a complete gradient.
pub fn extract_grads(
    tape: &Tape,
    binding: &Binding,
    params: &mut ParameterSet,
    scale: f64,
) -> Result<(), ParamError> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if !params.get(&name)?.trainable {
            continue;
        }
        match tape.grad(binding.id(&name)) {
            Some(g) => params.accumulate_grad(&name, &g.clone(), scale)?,
            None => {
                let shape = params.value(&name)?;
                let zeros = Matrix::zeros(shape.rows(), shape.cols());
                params.accumulate_grad(&name, &zeros, 1.0)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tape-level network pieces
// ---------------------------------------------------------------------------

/// Row-wise two-hidden-layer MLP with ReLU activations and linear output.
pub fn mlp_rows(tape: &mut Tape, binding: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let mut h = x;
    for (i, activated) in [(1, true), (2, true), (3, false)] {
        let w = binding.id(&format!("{prefix}.w{i}"));
        let b = binding.id(&format!("{prefix}.b{i}"));
        let lin = tape.matmul(h, w);
        h = tape.add(lin, b);
        if activated {
            h = tape.relu(h);
        }
    }
    h
}

/// Chebyshev filter applied through the three-term recursion:
/// T0 S = S, T1 S = L S, Tm S = 2 L (T_{m-1} S) - T_{m-2} S.
/// `coeffs` are 1x1 nodes so they can carry gradients from the attention net.
pub fn cheb_apply_node(tape: &mut Tape, l: NodeId, s: NodeId, coeffs: &[NodeId]) -> NodeId {
    assert!(!coeffs.is_empty());
    let mut acc = tape.mul(coeffs[0], s);
    if coeffs.len() == 1 {
        return acc;
    }
    let t1 = tape.matmul(l, s);
    let c1 = tape.mul(coeffs[1], t1);
    acc = tape.add(acc, c1);
    let mut t_prev = s;
    let mut t_curr = t1;
    for c in coeffs.iter().skip(2) {
        let lt = tape.matmul(l, t_curr);
        let two_lt = tape.scale(lt, 2.0);
        let t_next = tape.sub(two_lt, t_prev);
        let term = tape.mul(*c, t_next);
        acc = tape.add(acc, term);
        t_prev = t_curr;
        t_curr = t_next;
    }
    acc
}

/// Attention head over the initial signal: keys K = MLP(S0), scores K·1,
/// softmax over nodes, output = attention-weighted average of the key rows.
/// Returns the 1x(M+1) output plus the individual coefficient scalars.
pub fn attention_node(
    tape: &mut Tape,
    binding: &Binding,
    s0: NodeId,
    cheb_order: usize,
) -> (NodeId, Vec<NodeId>) {
    let key = mlp_rows(tape, binding, "att", s0);
    let ones = tape.constant(Matrix::filled(cheb_order + 1, 1, 1.0));
    let scores = tape.matmul(key, ones);
    let scores_row = tape.transpose(scores);
    let weights = tape.softmax_rows(scores_row);
    let out = tape.matmul(weights, key);
    let coeffs = (0..=cheb_order).map(|m| tape.slice(out, 0, 1, m, m + 1)).collect();
    (out, coeffs)
}

/// Input embedding S0 W0 + B0.
pub fn input_embed_node(tape: &mut Tape, binding: &Binding, s0: NodeId) -> NodeId {
    let w0 = binding.id("embed.w0");
    let b0 = binding.id("embed.b0");
    let lin = tape.matmul(s0, w0);
    tape.add(lin, b0)
}

/// Row-wise GRU: update/reset gates from [input, hidden], candidate from
/// the reset-gated hidden, convex blend h' = (1-z) h + z h~.
pub fn gru_rows_node(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    input: NodeId,
    hidden: NodeId,
) -> NodeId {
    let gate = |tape: &mut Tape, w: &str, u: &str, b: &str, x: NodeId, h: NodeId| {
        let wi = binding.id(&format!("{prefix}.{w}"));
        let ui = binding.id(&format!("{prefix}.{u}"));
        let bi = binding.id(&format!("{prefix}.{b}"));
        let xw = tape.matmul(x, wi);
        let hu = tape.matmul(h, ui);
        let s = tape.add(xw, hu);
        tape.add(s, bi)
    };
    let z_pre = gate(tape, "wz", "uz", "bz", input, hidden);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, "wr", "ur", "br", input, hidden);
    let r = tape.sigmoid(r_pre);
    let gated = tape.mul(r, hidden);
    let h_pre = gate(tape, "wh", "uh", "bh", input, gated);
    let h_cand = tape.tanh(h_pre);
    let (rows, cols) = tape.shape(hidden);
    let ones = tape.constant(Matrix::filled(rows, cols, 1.0));
    let one_minus_z = tape.sub(ones, z);
    let keep = tape.mul(one_minus_z, hidden);
    let take = tape.mul(z, h_cand);
    tape.add(keep, take)
}

/// One Chebyshev GNN layer: MLP on the hidden signal, graph convolution,
/// then GRU gating against the cavity summary.
pub fn gcepnet_layer_node(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    sbar: NodeId,
    cavity: NodeId,
    l: NodeId,
    coeffs: &[NodeId],
) -> NodeId {
    let s_tilde = mlp_rows(tape, binding, &format!("{prefix}.mlp1"), sbar);
    let s_hat = cheb_apply_node(tape, l, s_tilde, coeffs);
    let input = tape.concat_cols(&[s_hat, cavity]);
    gru_rows_node(tape, binding, &format!("{prefix}.gru"), input, sbar)
}

/// Constant selection/edge structures for the pairwise aggregation: row
/// selectors for both endpoints of every ordered pair (i, j), i != j, the
/// edge features [-h_i^T h_j, sigma_n^2], and the per-node sum reducer.
pub struct PairStructure {
    pub g1: Matrix,
    pub g2: Matrix,
    pub eps: Matrix,
    pub reduce: Matrix,
    pub pair_count: usize,
}

pub fn pair_structure(gram: &Matrix, sigma_n: f64) -> PairStructure {
    let n = gram.rows();
    let pair_count = n.saturating_mul(n.saturating_sub(1));
    let mut g1 = Matrix::zeros(pair_count, n);
    let mut g2 = Matrix::zeros(pair_count, n);
    let mut eps = Matrix::zeros(pair_count, 2);
    let mut reduce = Matrix::zeros(n, pair_count);
    let mut row = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            g1.set(row, i, 1.0);
            g2.set(row, j, 1.0);
            eps.set(row, 0, -gram.get(i, j));
            eps.set(row, 1, sigma_n * sigma_n);
            reduce.set(i, row, 1.0);
            row += 1;
        }
    }
    PairStructure { g1, g2, eps, reduce, pair_count }
}

/// Pairwise aggregation: s_hat_i = sum_{j != i} MLP4([s_i, s_j, eps_ij]),
/// vectorized as one MLP pass over all ordered pairs.
pub fn gepnet_aggregate_node(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    sbar: NodeId,
    pairs: &PairStructure,
    g1: NodeId,
    g2: NodeId,
    eps: NodeId,
    reduce: NodeId,
) -> NodeId {
    let _ = pairs;
    let si = tape.matmul(g1, sbar);
    let sj = tape.matmul(g2, sbar);
    let x = tape.concat_cols(&[si, sj, eps]);
    let y = mlp_rows(tape, binding, &format!("{prefix}.mlp4"), x);
    tape.matmul(reduce, y)
}

/// One pairwise-aggregation layer (the baseline's GNN step).
#[allow(clippy::too_many_arguments)]
pub fn gepnet_layer_node(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    sbar: NodeId,
    cavity: NodeId,
    pairs: &PairStructure,
    g1: NodeId,
    g2: NodeId,
    eps: NodeId,
    reduce: NodeId,
) -> NodeId {
    let s_hat = gepnet_aggregate_node(tape, binding, prefix, sbar, pairs, g1, g2, eps, reduce);
    let input = tape.concat_cols(&[s_hat, cavity]);
    gru_rows_node(tape, binding, &format!("{prefix}.gru"), input, sbar)
}

/// Readout: MLP to per-class logits, row softmax, then the soft mean and
/// the variance about it per node. Returns (P_G, a_hat, b2_hat) nodes.
pub fn readout_node(
    tape: &mut Tape,
    binding: &Binding,
    sbar: NodeId,
    cons: &Constellation,
) -> (NodeId, NodeId, NodeId) {
    let logits = mlp_rows(tape, binding, "readout", sbar);
    let probs = tape.softmax_rows(logits);
    let sym_col = tape.constant(Matrix::col_vec(cons.symbols()));
    let a_hat = tape.matmul(probs, sym_col);
    let sym_row = tape.constant(Matrix::row_vec(cons.symbols()));
    let dev = tape.sub(sym_row, a_hat);
    let dev2 = tape.mul(dev, dev);
    let weighted = tape.mul(probs, dev2);
    let ones = tape.constant(Matrix::filled(cons.size(), 1, 1.0));
    let b2_hat = tape.matmul(weighted, ones);
    (probs, a_hat, b2_hat)
}

// ---------------------------------------------------------------------------
// plain-matrix entry points (thin wrappers over the tape path)
// ---------------------------------------------------------------------------

/// Chebyshev filter on plain matrices.
pub fn cheb_apply(lm: &LaplacianMimo, s: &Matrix, coeffs: &[f64]) -> Matrix {
    let mut tape = Tape::new();
    let l = tape.constant(lm.l.clone());
    let sn = tape.constant(s.clone());
    let cs: Vec<NodeId> = coeffs.iter().map(|&c| tape.constant_scalar(c)).collect();
    let out = cheb_apply_node(&mut tape, l, sn, &cs);
    tape.value(out).clone()
}

/// Attention coefficients on plain matrices.
pub fn attention_coeffs(s0: &Matrix, params: &ParameterSet, cheb_order: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let s0n = tape.constant(s0.clone());
    let (out, _) = attention_node(&mut tape, &binding, s0n, cheb_order);
    tape.value(out).data().to_vec()
}

/// Input embedding on plain matrices.
pub fn input_embed(s0: &Matrix, params: &ParameterSet) -> Matrix {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let s0n = tape.constant(s0.clone());
    let out = input_embed_node(&mut tape, &binding, s0n);
    tape.value(out).clone()
}

/// Single GRU cell on plain vectors (a one-row application of the row GRU).
pub fn gru_cell(input: &[f64], hidden: &[f64], params: &ParameterSet, prefix: &str) -> Vec<f64> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let x = tape.constant(Matrix::row_vec(input));
    let h = tape.constant(Matrix::row_vec(hidden));
    let out = gru_rows_node(&mut tape, &binding, prefix, x, h);
    tape.value(out).data().to_vec()
}

/// One Chebyshev layer on plain matrices.
pub fn gnn_layer(
    sbar: &Matrix,
    cavity: &Matrix,
    lm: &LaplacianMimo,
    coeffs: &[f64],
    params: &ParameterSet,
    prefix: &str,
) -> Matrix {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let s = tape.constant(sbar.clone());
    let p = tape.constant(cavity.clone());
    let l = tape.constant(lm.l.clone());
    let cs: Vec<NodeId> = coeffs.iter().map(|&c| tape.constant_scalar(c)).collect();
    let out = gcepnet_layer_node(&mut tape, &binding, prefix, s, p, l, &cs);
    tape.value(out).clone()
}

/// Readout on plain matrices: (P_G, a_hat, b2_hat).
pub fn readout(
    sbar: &Matrix,
    params: &ParameterSet,
    cons: &Constellation,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let s = tape.constant(sbar.clone());
    let (p, a, b2) = readout_node(&mut tape, &binding, s, cons);
    (
        tape.value(p).clone(),
        tape.value(a).data().to_vec(),
        tape.value(b2).data().to_vec(),
    )
}

/// Pairwise aggregation on plain matrices.
pub fn gepnet_aggregate(
    sbar: &Matrix,
    h: &Matrix,
    sigma_n: f64,
    params: &ParameterSet,
    prefix: &str,
) -> Matrix {
    let pairs = pair_structure(&h.gram(), sigma_n);
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let s = tape.constant(sbar.clone());
    let g1 = tape.constant(pairs.g1.clone());
    let g2 = tape.constant(pairs.g2.clone());
    let eps = tape.constant(pairs.eps.clone());
    let reduce = tape.constant(pairs.reduce.clone());
    let out =
        gepnet_aggregate_node(&mut tape, &binding, prefix, s, &pairs, g1, g2, eps, reduce);
    tape.value(out).clone()
}

// ---------------------------------------------------------------------------
// arithmetic cost model
// ---------------------------------------------------------------------------

/// Per-(EP-iteration, layer) multiply cost of the two GNN modules, as a
/// function of node count N and the network widths.
pub fn flop_count(
    variant: GnnVariant,
    n: u64,
    n_u: u64,
    n_h1: u64,
    n_h2: u64,
    m: u64,
) -> u64 {
    match variant {
        GnnVariant::Gepnet => {
            n * (n - 1) * ((2 * n_u + 2) * n_h1 + n_h1 * n_h2 + n_h2 * n_u + n_u)
        }
        GnnVariant::Gcepnet => {
            n * (n_u * n_h1 + n_h1 * n_h2 + n_h2 * n_u + n_h2 * m + m) + n * n * n_u * m
        }
    }
}

/// Coefficient of the quadratic term of [`flop_count`] in N.
pub fn flop_n2_coefficient(variant: GnnVariant, n_u: u64, n_h1: u64, n_h2: u64, m: u64) -> u64 {
    match variant {
        GnnVariant::Gepnet => (2 * n_u + 2) * n_h1 + n_h1 * n_h2 + n_h2 * n_u + n_u,
        GnnVariant::Gcepnet => n_u * m,
    }
}
