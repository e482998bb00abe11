//! Named trainable parameters with gradient storage and a line-oriented text
//! serialization that round-trips `f64` values exactly (17 significant
//! digits).

use crate::linalg::Matrix;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter {0:?}")]
    UnknownName(String),
    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("shape mismatch for parameter {name:?}: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        name: String,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Option<Matrix>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Order is the creation order and is
/// what makes optimizer state and serialized files line up deterministically.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix, trainable: bool) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, grad: None, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Param, ParamError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, ParamError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(ParamError::UnknownName(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Matrix, ParamError> {
        Ok(&self.get(name)?.value)
    }

    pub fn param_at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn param_at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Add `scale * grad` into the stored gradient of `name`, allocating it
    /// on first use. Shapes must match the parameter value.
    pub fn accumulate_grad(
        &mut self,
        name: &str,
        grad: &Matrix,
        scale: f64,
    ) -> Result<(), ParamError> {
        let p = self.get_mut(name)?;
        if grad.rows() != p.value.rows() || grad.cols() != p.value.cols() {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected_rows: p.value.rows(),
                expected_cols: p.value.cols(),
                got_rows: grad.rows(),
                got_cols: grad.cols(),
            });
        }
        match &mut p.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(grad.data()) {
                    *gi += scale * ci;
                }
            }
            None => p.grad = Some(grad.scale(scale)),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// Serialize parameters (and an arbitrary hyperparameter block) to the text
/// checkpoint format:
///
/// ```text
/// format_version 1
/// hyper <key> <value>
/// ...
/// param <name> <rows> <cols>
/// v <cols floats>            (one line per row, 17 significant digits)
/// ```
pub fn write_checkpoint(hyper: &[(String, String)], params: &ParameterSet) -> String {
    let mut out = String::new();
    out.push_str("format_version 1\n");
    for (k, v) in hyper {
        let _ = writeln!(out, "hyper {k} {v}");
    }
    for p in params.iter() {
        let _ = writeln!(out, "param {} {} {}", p.name, p.value.rows(), p.value.cols());
        for r in 0..p.value.rows() {
            out.push('v');
            for c in 0..p.value.cols() {
                out.push(' ');
                out.push_str(&fmt_f64(p.value.get(r, c)));
            }
            out.push('\n');
        }
    }
    out
}

/// Parse the checkpoint format written by [`write_checkpoint`]. Returns the
/// hyperparameter block in file order and the parameters (all trainable).
pub fn read_checkpoint(text: &str) -> Result<(Vec<(String, String)>, ParameterSet), ParamError> {
    let mut hyper = Vec::new();
    let mut params = ParameterSet::new();
    let mut lines = text.lines().enumerate().peekable();
    let parse_err = |line: usize, message: &str| ParamError::Parse {
        line: line + 1,
        message: message.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l.trim() == "format_version 1" => {}
        Some((n, l)) => return Err(parse_err(n, &format!("expected 'format_version 1', got {l:?}"))),
        None => return Err(parse_err(0, "empty document")),
    }
    while let Some((n, line)) = lines.next() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("hyper") => {
                let key = parts
                    .next()
                    .ok_or_else(|| parse_err(n, "hyper line missing key"))?
                    .to_string();
                let value = parts.collect::<Vec<_>>().join(" ");
                hyper.push((key, value));
            }
            Some("param") => {
                let name = parts
                    .next()
                    .ok_or_else(|| parse_err(n, "param line missing name"))?
                    .to_string();
                let rows: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(n, "param line missing row count"))?;
                let cols: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(n, "param line missing column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (vn, vline) = lines
                        .next()
                        .ok_or_else(|| parse_err(n, "unexpected end of param block"))?;
                    let mut vparts = vline.split_whitespace();
                    if vparts.next() != Some("v") {
                        return Err(parse_err(vn, "expected value line starting with 'v'"));
                    }
                    for _ in 0..cols {
                        let tok = vparts
                            .next()
                            .ok_or_else(|| parse_err(vn, "value line too short"))?;
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| parse_err(vn, &format!("bad float {tok:?}")))?;
                        data.push(v);
                    }
                }
                params.insert(&name, Matrix::from_vec(rows, cols, data), true)?;
            }
            Some(other) => {
                return Err(parse_err(n, &format!("unexpected record {other:?}")));
            }
            None => {}
        }
    }
    Ok((hyper, params))
}
