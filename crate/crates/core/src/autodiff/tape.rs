//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node on the tape holds a dense `rows x cols` value. Parameters are
//! read from a borrowed flat slice, and [`Tape::gradient`] returns the
//! derivative of a scalar node with respect to that whole slice.
//!
//! Binary elementwise ops broadcast along any axis of extent 1, which covers
//! the usual "batch of rows plus a shared parameter row" pattern.
//!
//! Shape mistakes and non-finite intermediates do not panic. The tape
//! remembers the first offending node and [`Tape::gradient`] /
//! [`Tape::value`] report it.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param {
        offset: usize,
    },
    Affine {
        x: Var,
        offset: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Scale(Var, f64),
    Shift(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceCols { .. } => "slice_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Records a differentiable program over a borrowed parameter slice.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    fault: Option<Error>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Forward value of a node, or the first recorded fault.
    pub fn value(&self, v: Var) -> Result<&[f64]> {
        if let Some(e) = &self.fault {
            return Err(e.clone());
        }
        Ok(&self.nodes[v.0].value)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let (r, c) = self.shape(v);
        if (r, c) != (1, 1) {
            return Err(Error::Config(format!("node {} is {r}x{c}, not scalar", v.0)));
        }
        Ok(self.value(v)?[0])
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        if self.fault.is_none() {
            if let Some(k) = value.iter().position(|x| !x.is_finite()) {
                self.fault = Some(Error::numeric(
                    format!("tape node {id} ({})", op.name()),
                    format!("entry {k} is {}", value[k]),
                ));
            }
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(id)
    }

    fn fail(&mut self, msg: String) -> Var {
        if self.fault.is_none() {
            self.fault = Some(Error::Config(msg));
        }
        // Placeholder so callers can keep composing; gradient() reports the fault.
        self.nodes.push(Node {
            op: Op::Constant,
            rows: 1,
            cols: 1,
            value: vec![0.0],
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        if data.len() != rows * cols {
            return self.fail(format!(
                "constant of shape {rows}x{cols} given {} values",
                data.len()
            ));
        }
        self.push(Op::Constant, rows, cols, data)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(Op::Constant, 1, 1, vec![x])
    }

    /// A `1 x len` row read from `params[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> Var {
        if offset + len > self.params.len() {
            return self.fail(format!(
                "param range {offset}..{} exceeds {} parameters",
                offset + len,
                self.params.len()
            ));
        }
        let value = self.params[offset..offset + len].to_vec();
        self.push(Op::Param { offset }, 1, len, value)
    }

    /// `x W^T + b` with `W` (`fan_out x fan_in`, row-major) stored at `offset`
    /// and `b` (`fan_out`) directly after it.
    pub fn affine(&mut self, x: Var, offset: usize, fan_in: usize, fan_out: usize) -> Var {
        let (rows, cols) = self.shape(x);
        if cols != fan_in {
            return self.fail(format!("affine expects {fan_in} input columns, got {cols}"));
        }
        let needed = offset + fan_in * fan_out + fan_out;
        if needed > self.params.len() {
            return self.fail(format!(
                "affine needs parameters up to {needed}, have {}",
                self.params.len()
            ));
        }
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..needed];
        let value = affine_forward(&self.nodes[x.0].value, rows, w, b, fan_in, fan_out);
        self.push(
            Op::Affine {
                x,
                offset,
                fan_in,
                fan_out,
            },
            rows,
            fan_out,
            value,
        )
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[x.0];
        let (rows, cols) = (n.rows, n.cols);
        let value = n.value.iter().map(|&v| f(v)).collect();
        self.push(op, rows, cols, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let Some(rows) = broadcast_dim(ra, rb) else {
            return self.fail(format!("cannot broadcast {ra}x{ca} with {rb}x{cb}"));
        };
        let Some(cols) = broadcast_dim(ca, cb) else {
            return self.fail(format!("cannot broadcast {ra}x{ca} with {rb}x{cb}"));
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                value.push(f(
                    av[bidx(r, c, ra, ca)],
                    bv[bidx(r, c, rb, cb)],
                ));
            }
        }
        self.push(op, rows, cols, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(Op::Sum(x), 1, 1, vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(Op::Mean(x), 1, 1, vec![m])
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return self.fail(format!("slice {start}..{} of {cols} columns", start + len));
        }
        let v = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        self.push(Op::SliceCols { x, start }, rows, len, value)
    }

    /// Reverse sweep from a scalar node; returns d(loss)/d(params).
    pub fn gradient(&self, loss: Var) -> Result<Vec<f64>> {
        if let Some(e) = &self.fault {
            return Err(e.clone());
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Config(format!("loss node is {r}x{c}, not scalar")));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (k, gk) in g.iter().enumerate() {
                        grads[offset + k] += gk;
                    }
                }
                Op::Affine {
                    x,
                    offset,
                    fan_in,
                    fan_out,
                } => {
                    let rows = node.rows;
                    let xv = &self.nodes[x.0].value;
                    let (w_part, rest) = grads[offset..].split_at_mut(fan_in * fan_out);
                    // dW += dY^T X
                    gemm(
                        fan_out, rows, fan_in, &g, (1, fan_out as isize), xv,
                        (fan_in as isize, 1), w_part, (fan_in as isize, 1),
                    );
                    for r in 0..rows {
                        for o in 0..fan_out {
                            rest[o] += g[r * fan_out + o];
                        }
                    }
                    let w = &self.params[offset..offset + fan_in * fan_out];
                    let dx = accumulate(&mut adj, x, rows * fan_in);
                    // dX += dY W
                    gemm(
                        rows, fan_out, fan_in, &g, (fan_out as isize, 1), w,
                        (fan_in as isize, 1), dx, (fan_in as isize, 1),
                    );
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            dx[k] += g[k];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * y[k];
                    }
                }
                Op::Log(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] / xv[k];
                    }
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += 2.0 * g[k] * xv[k];
                    }
                }
                Op::Scale(x, c) => {
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += c * g[k];
                    }
                }
                Op::Shift(x) => {
                    let dx = accumulate(&mut adj, x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k];
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (rows, cols) = (node.rows, node.cols);
                    let (ra, ca) = self.shape(a);
                    let (rb, cb) = self.shape(b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (mut ga, mut gb) = (vec![0.0; ra * ca], vec![0.0; rb * cb]);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gk = g[r * cols + c];
                            let ia = bidx(r, c, ra, ca);
                            let ib = bidx(r, c, rb, cb);
                            match node.op {
                                Op::Add(..) => {
                                    ga[ia] += gk;
                                    gb[ib] += gk;
                                }
                                Op::Sub(..) => {
                                    ga[ia] += gk;
                                    gb[ib] -= gk;
                                }
                                _ => {
                                    ga[ia] += gk * bv[ib];
                                    gb[ib] += gk * av[ia];
                                }
                            }
                        }
                    }
                    add_into(accumulate(&mut adj, a, ga.len()), &ga);
                    add_into(accumulate(&mut adj, b, gb.len()), &gb);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let dx = accumulate(&mut adj, x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let dx = accumulate(&mut adj, x, n);
                    let share = g[0] / n.max(1) as f64;
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, len) = (node.rows, node.cols);
                    let cols = self.nodes[x.0].cols;
                    let dx = accumulate(&mut adj, x, rows * cols);
                    for r in 0..rows {
                        for c in 0..len {
                            dx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(
                "reverse sweep",
                format!("gradient entry {k} is {}", grads[k]),
            ));
        }
        Ok(grads)
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    let rr = if rows == 1 { 0 } else { r };
    let cc = if cols == 1 { 0 } else { c };
    rr * cols + cc
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `C += A B` with explicit (row, col) strides for every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Bounds: the last element touched in each operand must be in range.
    let last = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows - 1) as isize * rs + (cols - 1) as isize * cs
    };
    assert!((last(m, k, a_strides) as usize) < a.len());
    assert!((last(k, n, b_strides) as usize) < b.len());
    assert!((last(m, n, c_strides) as usize) < c.len());
    // SAFETY: strides and extents were bounds-checked above, and `c` is a
    // unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Batched `x W^T + b` for `rows` inputs of width `fan_in`.
pub(crate) fn affine_forward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    b: &[f64],
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * fan_out);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    gemm(
        rows,
        fan_in,
        fan_out,
        x,
        (fan_in as isize, 1),
        w,
        (1, fan_in as isize),
        &mut out,
        (fan_out as isize, 1),
    );
    out
}

/// Gradient of a scalar program with respect to `params`, plus its value.
pub fn grad_scalar<F>(params: &[f64], program: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>) -> Var,
{
    let mut tape = Tape::new(params);
    let loss = program(&mut tape);
    let value = tape.scalar(loss)?;
    let grad = tape.gradient(loss)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for k in 0..x.len() {
            xp[k] = x[k] + h;
            let fp = f(&xp);
            xp[k] = x[k] - h;
            let fm = f(&xp);
            xp[k] = x[k];
            out[k] = (fp - fm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = [1.0, -2.0, 3.0];
        let (v, g) = grad_scalar(&p, |t| t.scalar_constant(4.5)).unwrap();
        assert_eq!(v, 4.5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = [0.3, -1.7, 2.2, 0.0];
        let (v, g) = grad_scalar(&p, |t| {
            let x = t.param(0, 4);
            let sq = t.square(x);
            let s = t.sum(sq);
            t.scale(s, 0.5)
        })
        .unwrap();
        assert!((v - 0.5 * p.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-15);
        assert_eq!(g, p.to_vec());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // Touches affine, relu, tanh, exp, log, square, add/sub/mul with
        // broadcasting, slice, sum and mean in one program.
        let program = |t: &mut Tape<'_>| {
            let x = t.constant(3, 2, vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]);
            let h = t.affine(x, 0, 2, 3);
            let h = t.tanh(h);
            let row = t.param(9, 3);
            let h2 = t.mul(h, row);
            let r = t.relu(h2);
            let e = t.exp(h);
            let l = t.shift(e, 1.0);
            let l = t.log(l);
            let d = t.sub(l, r);
            let d = t.add(d, row);
            let s = t.slice_cols(d, 1, 2);
            let q = t.square(s);
            let m = t.mean(q);
            let tot = t.sum(d);
            t.add(m, tot)
        };
        let p: Vec<f64> = (0..12).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let (_, g) = grad_scalar(&p, program).unwrap();
        let fd = central_diff(
            |q| {
                let mut t = Tape::new(q);
                let v = program(&mut t);
                t.scalar(v).unwrap()
            },
            &p,
            1e-6,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = [0.0; 4];
        let err = grad_scalar(&p, |t| {
            let a = t.constant(2, 3, vec![0.0; 6]);
            let b = t.constant(3, 2, vec![0.0; 6]);
            let c = t.add(a, b);
            t.sum(c)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nan_intermediate_names_the_node() {
        let p = [-1.0];
        let err = grad_scalar(&p, |t| {
            let x = t.param(0, 1);
            let l = t.log(x);
            t.sum(l)
        })
        .unwrap_err();
        match err {
            Error::Numeric { location, .. } => assert!(location.contains("log"), "{location}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
