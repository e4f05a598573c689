//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Tape nodes hold vector values, and a whole matrix-vector layer is a
//! single `affine` node; scalar-granularity tapes were measured to cost
//! tens of thousands of nodes per training sample, which this design
//! avoids. The tape evaluates eagerly: every op computes its value when
//! pushed and fails fast, naming the op and node index, if anything
//! non-finite appears. Double precision throughout; the losses this
//! engine trains involve log-densities where single precision produces
//! false gradient-check failures.
//!
//! A central finite-difference oracle lives alongside the tape so every
//! analytic gradient can be verified against an independent path.

use std::fmt;
use std::ops::Range;

/// Default central-difference step, balancing truncation against
/// roundoff for unit-scale parameters in double precision.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    UnknownSegment { name: String },
    DuplicateSegment { name: String },
    NonFiniteParam { segment: String, index: usize, value: f64 },
    /// Operand lengths that the op cannot reconcile.
    ShapeMismatch { op: &'static str, detail: String },
    /// An op produced NaN or an infinity; `node` is the tape index.
    NonFinite { op: &'static str, node: usize },
    /// Backward pass requested from a non-scalar root.
    NotScalar { len: usize },
    InvalidStep { step: f64 },
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::UnknownSegment { name } => write!(f, "unknown parameter segment `{name}`"),
            GradError::DuplicateSegment { name } => {
                write!(f, "parameter segment `{name}` already exists")
            }
            GradError::NonFiniteParam {
                segment,
                index,
                value,
            } => write!(
                f,
                "non-finite parameter value {value} at `{segment}`[{index}]"
            ),
            GradError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            GradError::NonFinite { op, node } => {
                write!(f, "non-finite value produced by `{op}` at tape node {node}")
            }
            GradError::NotScalar { len } => {
                write!(f, "backward pass needs a scalar root, got length {len}")
            }
            GradError::InvalidStep { step } => {
                write!(f, "finite-difference step must be positive, got {step}")
            }
        }
    }
}

impl std::error::Error for GradError {}

#[derive(Debug, Clone)]
struct Segment {
    name: String,
    offset: usize,
    len: usize,
}

/// A flat array of parameters addressed through named segments.
///
/// Invariants: every value finite; segments are disjoint and cover the
/// array exactly. Both hold by construction via [`ParamVectorBuilder`];
/// code mutating through [`values_mut`](ParamVector::values_mut) must
/// keep values finite (the trainer's divergence guard enforces this).
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn builder() -> ParamVectorBuilder {
        ParamVectorBuilder {
            values: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment_names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|s| s.name.as_str())
    }

    pub fn segment_range(&self, name: &str) -> Result<Range<usize>, GradError> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.len)
            .ok_or_else(|| GradError::UnknownSegment {
                name: name.to_string(),
            })
    }

    pub fn segment(&self, name: &str) -> Result<&[f64], GradError> {
        let r = self.segment_range(name)?;
        Ok(&self.values[r])
    }

    /// Extracts every segment whose name starts with `prefix` into a new
    /// vector, stripping the prefix and preserving segment order.
    pub fn extract_prefix(&self, prefix: &str) -> Result<ParamVector, GradError> {
        let mut b = ParamVector::builder();
        let mut found = false;
        for s in &self.segments {
            if let Some(stripped) = s.name.strip_prefix(prefix) {
                found = true;
                b.push(stripped, self.values[s.offset..s.offset + s.len].to_vec())?;
            }
        }
        if !found {
            return Err(GradError::UnknownSegment {
                name: prefix.to_string(),
            });
        }
        Ok(b.build())
    }

    /// Writes `source` back into the segments named `prefix` + source
    /// segment name. Inverse of [`extract_prefix`](Self::extract_prefix)
    /// for matching layouts.
    pub fn write_prefixed(&mut self, prefix: &str, source: &ParamVector) -> Result<(), GradError> {
        for s in &source.segments {
            let name = format!("{prefix}{}", s.name);
            let r = self.segment_range(&name)?;
            if r.len() != s.len {
                return Err(GradError::ShapeMismatch {
                    op: "write_prefixed",
                    detail: format!("segment `{name}` has length {}, source {}", r.len(), s.len),
                });
            }
            self.values[r].copy_from_slice(&source.values[s.offset..s.offset + s.len]);
        }
        Ok(())
    }
}

pub struct ParamVectorBuilder {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVectorBuilder {
    /// Appends a named segment; returns its range in the flat array.
    pub fn push(&mut self, name: &str, values: Vec<f64>) -> Result<Range<usize>, GradError> {
        if self.segments.iter().any(|s| s.name == name) {
            return Err(GradError::DuplicateSegment {
                name: name.to_string(),
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(GradError::NonFiniteParam {
                    segment: name.to_string(),
                    index,
                    value,
                });
            }
        }
        let offset = self.values.len();
        let len = values.len();
        self.values.extend_from_slice(&values);
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            len,
        });
        Ok(offset..offset + len)
    }

    /// Appends every segment of `source` under `prefix` + its name.
    pub fn push_vector(&mut self, prefix: &str, source: &ParamVector) -> Result<(), GradError> {
        for s in &source.segments {
            self.push(
                &format!("{prefix}{}", s.name),
                source.values[s.offset..s.offset + s.len].to_vec(),
            )?;
        }
        Ok(())
    }

    pub fn build(self) -> ParamVector {
        ParamVector {
            values: self.values,
            segments: self.segments,
        }
    }
}

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param { offset: usize },
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Abs(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Affine { w: usize, b: usize, x: usize, rows: usize, cols: usize },
    Sum(usize),
    Index(usize, usize),
    Slice(usize, usize),
    Concat(usize, usize),
    LogSumExp(usize),
    Clamp(usize, f64, f64),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param { .. } => "param",
        Op::Const => "const",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Tanh(..) => "tanh",
        Op::Abs(..) => "abs",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Affine { .. } => "affine",
        Op::Sum(..) => "sum",
        Op::Index(..) => "index",
        Op::Slice(..) => "slice",
        Op::Concat(..) => "concat",
        Op::LogSumExp(..) => "logsumexp",
        Op::Clamp(..) => "clamp",
    }
}

/// A single-use differentiation tape over one parameter vector.
///
/// Nodes are pushed in evaluation order, so the tape is topologically
/// sorted by construction and a single reverse sweep yields gradients.
/// Confine a tape to one thread; distinct tapes over a shared
/// `ParamVector` may run concurrently.
pub struct Tape<'p> {
    params: &'p ParamVector,
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Tape {
            params,
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.vals[v.0].len()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Result<Var, GradError> {
        let node = self.ops.len();
        if value.iter().any(|x| !x.is_finite()) {
            return Err(GradError::NonFinite {
                op: op_name(&op),
                node,
            });
        }
        self.ops.push(op);
        self.vals.push(value);
        Ok(Var(node))
    }

    fn binary_vals(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        if self.vals[a.0].len() != self.vals[b.0].len() {
            return Err(GradError::ShapeMismatch {
                op,
                detail: format!(
                    "operand lengths {} and {}",
                    self.vals[a.0].len(),
                    self.vals[b.0].len()
                ),
            });
        }
        Ok(())
    }

    /// Leaf node reading a named parameter segment.
    pub fn param(&mut self, name: &str) -> Result<Var, GradError> {
        let r = self.params.segment_range(name)?;
        let value = self.params.values()[r.clone()].to_vec();
        self.push(Op::Param { offset: r.start }, value)
    }

    /// Leaf node holding fixed values that receive no gradient.
    pub fn constant(&mut self, value: Vec<f64>) -> Result<Var, GradError> {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var, GradError> {
        self.constant(vec![value])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_vals("add", a, b)?;
        let value = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a.0, b.0), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_vals("sub", a, b)?;
        let value = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a.0, b.0), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_vals("mul", a, b)?;
        let value = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a.0, b.0), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_vals("div", a, b)?;
        let value = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, y)| x / y)
            .collect();
        self.push(Op::Div(a.0, b.0), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| -x).collect();
        self.push(Op::Neg(a.0), value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a.0), value)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x.ln()).collect();
        self.push(Op::Ln(a.0), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a.0), value)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a.0), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x * c).collect();
        self.push(Op::Scale(a.0, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let value = self.vals[a.0].iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a.0), value)
    }

    /// Matrix-vector product plus bias: `y = W x + b` with row-major
    /// `W` of shape `rows x cols`.
    pub fn affine(
        &mut self,
        w: Var,
        b: Var,
        x: Var,
        rows: usize,
        cols: usize,
    ) -> Result<Var, GradError> {
        if self.vals[w.0].len() != rows * cols
            || self.vals[b.0].len() != rows
            || self.vals[x.0].len() != cols
        {
            return Err(GradError::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "want w = {}x{}, b = {}, x = {}; got lengths {}, {}, {}",
                    rows,
                    cols,
                    rows,
                    cols,
                    self.vals[w.0].len(),
                    self.vals[b.0].len(),
                    self.vals[x.0].len()
                ),
            });
        }
        let mut value = vec![0.0; rows];
        {
            let wv = &self.vals[w.0];
            let xv = &self.vals[x.0];
            let bv = &self.vals[b.0];
            for i in 0..rows {
                let row = &wv[i * cols..(i + 1) * cols];
                let mut acc = bv[i];
                for j in 0..cols {
                    acc += row[j] * xv[j];
                }
                value[i] = acc;
            }
        }
        self.push(
            Op::Affine {
                w: w.0,
                b: b.0,
                x: x.0,
                rows,
                cols,
            },
            value,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let value = vec![self.vals[a.0].iter().sum()];
        self.push(Op::Sum(a.0), value)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, GradError> {
        if i >= self.vals[a.0].len() {
            return Err(GradError::ShapeMismatch {
                op: "index",
                detail: format!("index {i} into length {}", self.vals[a.0].len()),
            });
        }
        let value = vec![self.vals[a.0][i]];
        self.push(Op::Index(a.0, i), value)
    }

    pub fn slice(&mut self, a: Var, range: Range<usize>) -> Result<Var, GradError> {
        if range.end > self.vals[a.0].len() || range.start > range.end {
            return Err(GradError::ShapeMismatch {
                op: "slice",
                detail: format!("range {range:?} into length {}", self.vals[a.0].len()),
            });
        }
        let value = self.vals[a.0][range.clone()].to_vec();
        self.push(Op::Slice(a.0, range.start), value)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let mut value = self.vals[a.0].clone();
        value.extend_from_slice(&self.vals[b.0]);
        self.push(Op::Concat(a.0, b.0), value)
    }

    /// Numerically stable `log(sum(exp(x)))`, scalar output.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, GradError> {
        if self.vals[a.0].is_empty() {
            return Err(GradError::ShapeMismatch {
                op: "logsumexp",
                detail: "empty operand".to_string(),
            });
        }
        let xs = &self.vals[a.0];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value = vec![m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()];
        self.push(Op::LogSumExp(a.0), value)
    }

    /// Elementwise clamp to `[lo, hi]` with pass-through subgradient on
    /// the closed interval and zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        if lo > hi {
            return Err(GradError::ShapeMismatch {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let value = self.vals[a.0].iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(Op::Clamp(a.0, lo, hi), value)
    }

    /// Reverse sweep from a scalar root; returns d root / d params over
    /// the full parameter vector. Evaluation order is fixed, so repeated
    /// runs are bit-identical.
    pub fn backward(&self, root: Var) -> Result<Vec<f64>, GradError> {
        if self.vals[root.0].len() != 1 {
            return Err(GradError::NotScalar {
                len: self.vals[root.0].len(),
            });
        }
        let mut adj: Vec<Vec<f64>> = (0..=root.0).map(|i| vec![0.0; self.vals[i].len()]).collect();
        adj[root.0][0] = 1.0;
        let mut grad = vec![0.0; self.params.len()];
        for i in (0..=root.0).rev() {
            if adj[i].iter().all(|&a| a == 0.0) {
                continue;
            }
            let a_i = std::mem::take(&mut adj[i]);
            match &self.ops[i] {
                Op::Param { offset } => {
                    for (j, g) in a_i.iter().enumerate() {
                        grad[offset + j] += g;
                    }
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g;
                        adj[*b][j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g;
                        adj[*b][j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g * self.vals[*b][j];
                        adj[*b][j] += g * self.vals[*a][j];
                    }
                }
                Op::Div(a, b) => {
                    for (j, g) in a_i.iter().enumerate() {
                        let bv = self.vals[*b][j];
                        adj[*a][j] += g / bv;
                        adj[*b][j] -= g * self.vals[i][j] / bv;
                    }
                }
                Op::Neg(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] -= g;
                    }
                }
                Op::Exp(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g * self.vals[i][j];
                    }
                }
                Op::Ln(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g / self.vals[*a][j];
                    }
                }
                Op::Tanh(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        let y = self.vals[i][j];
                        adj[*a][j] += g * (1.0 - y * y);
                    }
                }
                Op::Abs(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        let x = self.vals[*a][j];
                        let s = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        adj[*a][j] += g * s;
                    }
                }
                Op::Scale(a, c) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g * c;
                    }
                }
                Op::AddScalar(a) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][j] += g;
                    }
                }
                Op::Affine { w, b, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    for r in 0..rows {
                        let g = a_i[r];
                        if g == 0.0 {
                            continue;
                        }
                        adj[*b][r] += g;
                        for c in 0..cols {
                            adj[*w][r * cols + c] += g * self.vals[*x][c];
                            adj[*x][c] += g * self.vals[*w][r * cols + c];
                        }
                    }
                }
                Op::Sum(a) => {
                    let g = a_i[0];
                    for slot in adj[*a].iter_mut() {
                        *slot += g;
                    }
                }
                Op::Index(a, k) => {
                    adj[*a][*k] += a_i[0];
                }
                Op::Slice(a, start) => {
                    for (j, g) in a_i.iter().enumerate() {
                        adj[*a][start + j] += g;
                    }
                }
                Op::Concat(a, b) => {
                    let split = self.vals[*a].len();
                    for (j, g) in a_i.iter().enumerate() {
                        if j < split {
                            adj[*a][j] += g;
                        } else {
                            adj[*b][j - split] += g;
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let g = a_i[0];
                    let lse = self.vals[i][0];
                    for (j, slot) in adj[*a].iter_mut().enumerate() {
                        *slot += g * (self.vals[*a][j] - lse).exp();
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for (j, g) in a_i.iter().enumerate() {
                        let x = self.vals[*a][j];
                        if x >= *lo && x <= *hi {
                            adj[*a][j] += g;
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Builds a tape over `p` with `f`, then returns the scalar value and
/// its gradient with respect to every parameter entry.
pub fn value_and_grad<F>(p: &ParamVector, f: F) -> Result<(f64, Vec<f64>), GradError>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var, GradError>,
{
    let mut tape = Tape::new(p);
    let root = f(&mut tape)?;
    if tape.len_of(root) != 1 {
        return Err(GradError::NotScalar {
            len: tape.len_of(root),
        });
    }
    let value = tape.value(root)[0];
    let grad = tape.backward(root)?;
    Ok((value, grad))
}

/// Forward evaluation only: the scalar value of `f` at `p`.
pub fn eval_scalar<F>(p: &ParamVector, f: F) -> Result<f64, GradError>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var, GradError>,
{
    let mut tape = Tape::new(p);
    let root = f(&mut tape)?;
    if tape.len_of(root) != 1 {
        return Err(GradError::NotScalar {
            len: tape.len_of(root),
        });
    }
    Ok(tape.value(root)[0])
}

/// Central finite differences `(f(p + step e_i) - f(p - step e_i)) / (2 step)`
/// per coordinate; the independent oracle every analytic gradient is
/// checked against.
pub fn finite_diff_grad<F>(p: &ParamVector, step: f64, mut f: F) -> Result<Vec<f64>, GradError>
where
    F: FnMut(&ParamVector) -> Result<f64, GradError>,
{
    if !(step > 0.0) {
        return Err(GradError::InvalidStep { step });
    }
    let mut work = p.clone();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + step;
        let hi = f(&work)?;
        work.values_mut()[i] = orig - step;
        let lo = f(&work)?;
        work.values_mut()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}
