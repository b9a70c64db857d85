//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Row-major storage, no broadcasting beyond (matrix, vector) and scalar
//! ops. Every op result is checked for NaN/Inf at creation; a non-finite
//! value anywhere is a hard error. Graphs are built per forward pass and
//! freed when the output tensor is dropped; nothing is retained across
//! optimizer steps.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::XorShiftRng;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() == 0)
}

/// Run a closure with gradient tracking disabled (frozen upstream passes,
/// greedy generation).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    out
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// True when this node participates in the current autodiff graph.
    track: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn ensure_finite(data: &[f64], ctx: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {ctx}")))
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Naive row-major matmul on raw slices: (m×k)·(k×n) → (m×n).
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let track = if requires_grad {
            true
        } else {
            grad_enabled() && parents.iter().any(|p| p.inner.track)
        };
        let (parents, backward) = if track {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                track,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor. Panics on shape/data length mismatch (programmer error).
    pub fn new(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in leaf tensor"
        );
        Tensor::build(shape.to_vec(), data, requires_grad, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        Tensor::build(
            shape.to_vec(),
            vec![0.0; numel_of(shape)],
            requires_grad,
            Vec::new(),
            None,
        )
    }

    pub fn scalar(x: f64, requires_grad: bool) -> Tensor {
        Tensor::new(&[1], vec![x], requires_grad)
    }

    /// Trainable parameter with elementwise normal init at the given scale.
    pub fn param_normal(shape: &[usize], scale: f64, rng: &mut XorShiftRng) -> Tensor {
        let mut data = vec![0.0; numel_of(shape)];
        rng.fill_normal(&mut data, scale);
        Tensor::new(shape, data, true)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// In-place data replacement; optimizer use only.
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        *self.inner.data.borrow_mut() = data;
    }

    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.inner.data.borrow())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the data as a fresh constant leaf (gradient boundary).
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.to_vec(), false, Vec::new(), None)
    }

    pub fn norm2(&self) -> f64 {
        self.inner
            .data
            .borrow()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.inner.track {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar output. Seeds d(out)/d(out) = 1 and
    /// accumulates gradients into every tracked ancestor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Dimension(
                "backward() requires a scalar output".into(),
            ));
        }
        if !self.inner.track {
            return Ok(());
        }

        // Iterative postorder DFS: topo holds parents before children.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                topo.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.inner.track && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in topo.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(back) = &node.inner.backward {
                back(&grad);
            }
            // Intermediate grads are not part of the contract; free them.
            if !node.inner.requires_grad {
                *node.inner.grad.borrow_mut() = None;
            } else {
                ensure_finite(&grad, "gradient")?;
            }
        }
        Ok(())
    }

    // ── Differentiable ops ───────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::Dimension(format!(
                "matmul shapes {a_shape:?} x {b_shape:?}"
            )));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let a_data = self.to_vec();
        let b_data = other.to_vec();
        let out = mm(&a_data, &b_data, m, k, n);
        ensure_finite(&out, "matmul")?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::build(
            vec![m, n],
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let bt = transpose_raw(&b_data, k, n);
                pa.accumulate_grad(&mm(g, &bt, m, n, k));
                let at = transpose_raw(&a_data, m, k);
                pb.accumulate_grad(&mm(&at, g, k, m, n));
            })),
        ))
    }

    /// (m×n)·(n) → (m)
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let ws = self.shape();
        if ws.len() != 2 || v.shape().len() != 1 || ws[1] != v.shape()[0] {
            return Err(Error::Dimension(format!(
                "matvec shapes {:?} x {:?}",
                ws,
                v.shape()
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let w_data = self.to_vec();
        let v_data = v.to_vec();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = w_data[i * n..(i + 1) * n]
                .iter()
                .zip(&v_data)
                .map(|(a, b)| a * b)
                .sum();
        }
        ensure_finite(&out, "matvec")?;
        let (pw, pv) = (self.clone(), v.clone());
        Ok(Tensor::build(
            vec![m],
            out,
            false,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g| {
                let mut dw = vec![0.0; m * n];
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dw[i * n + j] = g[i] * v_data[j];
                        dv[j] += g[i] * w_data[i * n + j];
                    }
                }
                pw.accumulate_grad(&dw);
                pv.accumulate_grad(&dv);
            })),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .zip(other.inner.data.borrow().iter())
            .map(|(a, b)| a + b)
            .collect();
        ensure_finite(&out, "add")?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            })),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "sub shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .zip(other.inner.data.borrow().iter())
            .map(|(a, b)| a - b)
            .collect();
        ensure_finite(&out, "sub")?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                pb.accumulate_grad(&neg);
            })),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "mul shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a_data = self.to_vec();
        let b_data = other.to_vec();
        let out: Vec<f64> = a_data.iter().zip(&b_data).map(|(a, b)| a * b).collect();
        ensure_finite(&out, "mul")?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&b_data).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = g.iter().zip(&a_data).map(|(g, a)| g * a).collect();
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            })),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|v| v * c).collect();
        assert!(out.iter().all(|v| v.is_finite()), "non-finite in scale");
        let pa = self.clone();
        Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                pa.accumulate_grad(&da);
            })),
        )
    }

    /// Elementwise multiply by a scalar tensor (used for the σ(g) gate).
    pub fn mul_by_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Dimension("gate must be a scalar tensor".into()));
        }
        let sv = s.item();
        let a_data = self.to_vec();
        let out: Vec<f64> = a_data.iter().map(|v| v * sv).collect();
        ensure_finite(&out, "mul_by_scalar_tensor")?;
        let (pa, ps) = (self.clone(), s.clone());
        Ok(Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone(), s.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g.iter().map(|v| v * sv).collect();
                pa.accumulate_grad(&da);
                let ds: f64 = g.iter().zip(&a_data).map(|(g, a)| g * a).sum();
                ps.accumulate_grad(&[ds]);
            })),
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let y = out.clone();
        let pa = self.clone();
        Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                pa.accumulate_grad(&da);
            })),
        )
    }

    pub fn gelu(&self) -> Tensor {
        // tanh approximation; smooth everywhere so finite-difference
        // gradient checks behave.
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x_data = self.to_vec();
        let out: Vec<f64> = x_data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        assert!(out.iter().all(|v| v.is_finite()), "non-finite in gelu");
        let pa = self.clone();
        Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&x_data)
                    .map(|(g, &x)| {
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                pa.accumulate_grad(&da);
            })),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.data.borrow().iter().sum();
        let n = self.numel();
        let pa = self.clone();
        Tensor::build(
            vec![1],
            vec![s],
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(&vec![g[0]; n]);
            })),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// v / (‖v‖₂ + eps), differentiable. Applies to the flattened tensor.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        assert!(eps > 0.0, "l2_normalize eps must be > 0");
        let v = self.to_vec();
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = r + eps;
        let out: Vec<f64> = v.iter().map(|x| x / s).collect();
        let pa = self.clone();
        Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                // d/dv_j [v_i/(r+eps)] = δ_ij/s − v_i v_j / (r s²)
                let dot: f64 = g.iter().zip(&v).map(|(g, v)| g * v).sum();
                let da: Vec<f64> = v
                    .iter()
                    .zip(g)
                    .map(|(&vj, &gj)| {
                        let mut d = gj / s;
                        if r > 0.0 {
                            d -= vj * dot / (r * s * s);
                        }
                        d
                    })
                    .collect();
                pa.accumulate_grad(&da);
            })),
        )
    }

    /// Row-wise softmax over a 2-D tensor, numerically stabilized.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::Dimension(format!("softmax_rows on shape {sh:?}")));
        }
        let (r, c) = (sh[0], sh[1]);
        let x = self.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        ensure_finite(&out, "softmax_rows")?;
        let y = out.clone();
        let pa = self.clone();
        Ok(Tensor::build(
            vec![r, c],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                pa.accumulate_grad(&da);
            })),
        ))
    }

    /// (m×n) + row vector (n) broadcast over rows (bias add).
    pub fn add_row_broadcast(&self, v: &Tensor) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 || v.shape() != [sh[1]] {
            return Err(Error::Dimension(format!(
                "add_row_broadcast {:?} + {:?}",
                sh,
                v.shape()
            )));
        }
        let (m, n) = (sh[0], sh[1]);
        let vd = v.to_vec();
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, a)| a + vd[i % n])
            .collect();
        ensure_finite(&out, "add_row_broadcast")?;
        let (pa, pv) = (self.clone(), v.clone());
        Ok(Tensor::build(
            vec![m, n],
            out,
            false,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(g);
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += g[i * n + j];
                    }
                }
                pv.accumulate_grad(&dv);
            })),
        ))
    }

    /// Row gather from an (N×D) table; backward scatter-adds (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on shape {sh:?}")));
        }
        let (nrows, d) = (sh[0], sh[1]);
        for &ix in indices {
            if ix >= nrows {
                return Err(Error::Dimension(format!(
                    "gather_rows index {ix} out of range {nrows}"
                )));
            }
        }
        let data = self.inner.data.borrow();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            out.extend_from_slice(&data[ix * d..(ix + 1) * d]);
        }
        drop(data);
        let pa = self.clone();
        let idx = indices.to_vec();
        let l = indices.len();
        Ok(Tensor::build(
            vec![l, d],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut da = vec![0.0; nrows * d];
                for (pos, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        da[ix * d + j] += g[pos * d + j];
                    }
                }
                pa.accumulate_grad(&da);
            })),
        ))
    }

    /// Select one row of an (L×D) matrix as a (D) vector.
    pub fn select_row(&self, row: usize) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 || row >= sh[0] {
            return Err(Error::Dimension(format!(
                "select_row {row} from shape {sh:?}"
            )));
        }
        let (l, d) = (sh[0], sh[1]);
        let out = self.inner.data.borrow()[row * d..(row + 1) * d].to_vec();
        let pa = self.clone();
        Ok(Tensor::build(
            vec![d],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut da = vec![0.0; l * d];
                da[row * d..(row + 1) * d].copy_from_slice(g);
                pa.accumulate_grad(&da);
            })),
        ))
    }

    /// Add a (D) vector into one row of an (L×D) matrix; all other rows pass
    /// through bit-identically (single-position injection site).
    pub fn add_at_row(&self, row: usize, v: &Tensor) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 || row >= sh[0] || v.shape() != [sh[1]] {
            return Err(Error::Dimension(format!(
                "add_at_row {row} shape {:?} + {:?}",
                sh,
                v.shape()
            )));
        }
        let (l, d) = (sh[0], sh[1]);
        let mut out = self.to_vec();
        {
            let vd = v.inner.data.borrow();
            for j in 0..d {
                out[row * d + j] += vd[j];
            }
        }
        ensure_finite(&out[row * d..(row + 1) * d], "add_at_row")?;
        let (pa, pv) = (self.clone(), v.clone());
        Ok(Tensor::build(
            vec![l, d],
            out,
            false,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(g);
                pv.accumulate_grad(&g[row * d..(row + 1) * d]);
            })),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 || start + len > sh[1] {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {start}+{len}) from shape {sh:?}"
            )));
        }
        let (m, n) = (sh[0], sh[1]);
        let data = self.inner.data.borrow();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&data[i * n + start..i * n + start + len]);
        }
        drop(data);
        let pa = self.clone();
        Ok(Tensor::build(
            vec![m, len],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                pa.accumulate_grad(&da);
            })),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::Dimension(format!("transpose on shape {sh:?}")));
        }
        let (m, n) = (sh[0], sh[1]);
        let out = transpose_raw(&self.inner.data.borrow(), m, n);
        let pa = self.clone();
        Ok(Tensor::build(
            vec![n, m],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                pa.accumulate_grad(&transpose_raw(g, n, m));
            })),
        ))
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 2 || gamma.shape() != [sh[1]] || beta.shape() != [sh[1]] {
            return Err(Error::Dimension(format!(
                "layer_norm {:?} with gamma {:?} beta {:?}",
                sh,
                gamma.shape(),
                beta.shape()
            )));
        }
        let (l, d) = (sh[0], sh[1]);
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let mut out = vec![0.0; l * d];
        let mut xhat = vec![0.0; l * d];
        let mut inv_std = vec![0.0; l];
        for i in 0..l {
            let row = &x[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mu) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = gm[j] * xh + bt[j];
            }
        }
        ensure_finite(&out, "layer_norm")?;
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::build(
            vec![l, d],
            out,
            false,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; l * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..l {
                    let istd = inv_std[i];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    let nd = d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dx[i * d + j] =
                            istd * (dxh - sum_dxhat / nd - xh[j] * sum_dxhat_xhat / nd);
                    }
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            })),
        ))
    }

    /// Inverted dropout; sampled from the training RNG, identity at p = 0.
    pub fn dropout(&self, p: f64, rng: &mut XorShiftRng) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout p in [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let pa = self.clone();
        Tensor::build(
            self.inner.shape.clone(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let da: Vec<f64> = g.iter().zip(&mask).map(|(g, m)| g * m).collect();
                pa.accumulate_grad(&da);
            })),
        )
    }
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_cols of zero parts".into()));
    }
    let m = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let sh = p.shape();
            if sh.len() != 2 || sh[0] != m {
                return Err(Error::Dimension(format!(
                    "concat_cols incompatible shape {sh:?}"
                )));
            }
            Ok(sh[1])
        })
        .collect::<Result<_>>()?;
    let n: usize = widths.iter().sum();
    let mut out = vec![0.0; m * n];
    let mut col = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let d = p.to_vec();
        for i in 0..m {
            out[i * n + col..i * n + col + w].copy_from_slice(&d[i * w..(i + 1) * w]);
        }
        col += w;
    }
    let owned: Vec<Tensor> = parts.to_vec();
    let widths_c = widths.clone();
    let parents = owned.clone();
    Ok(Tensor::build(
        vec![m, n],
        out,
        false,
        parents,
        Some(Box::new(move |g| {
            let mut col = 0;
            for (p, &w) in owned.iter().zip(&widths_c) {
                let mut dp = vec![0.0; m * w];
                for i in 0..m {
                    dp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + col..i * n + col + w]);
                }
                p.accumulate_grad(&dp);
                col += w;
            }
        })),
    ))
}

/// Row-wise concatenation of 2-D tensors with equal column counts.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_rows of zero parts".into()));
    }
    let n = parts[0].shape().get(1).copied().unwrap_or(0);
    let mut m = 0;
    for p in parts {
        let sh = p.shape();
        if sh.len() != 2 || sh[1] != n {
            return Err(Error::Dimension(format!(
                "concat_rows incompatible shape {sh:?}"
            )));
        }
        m += sh[0];
    }
    let mut out = Vec::with_capacity(m * n);
    for p in parts {
        out.extend_from_slice(&p.inner.data.borrow());
    }
    let owned: Vec<Tensor> = parts.to_vec();
    let parents = owned.clone();
    Ok(Tensor::build(
        vec![m, n],
        out,
        false,
        parents,
        Some(Box::new(move |g| {
            let mut row = 0;
            for p in &owned {
                let rows = p.shape()[0];
                p.accumulate_grad(&g[row * n..(row + rows) * n]);
                row += rows;
            }
        })),
    ))
}

/// Mean next-token negative log-likelihood over non-ignored positions.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    ignore_index: u32,
) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy logits {:?} vs {} targets",
            sh,
            targets.len()
        )));
    }
    let (t, v) = (sh[0], sh[1]);
    let x = logits.to_vec();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; t * v];
    for i in 0..t {
        let row = &x[i * v..(i + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..v {
            let e = (row[j] - mx).exp();
            probs[i * v + j] = e;
            z += e;
        }
        for j in 0..v {
            probs[i * v + j] /= z;
        }
        if targets[i] == ignore_index {
            continue;
        }
        let tgt = targets[i] as usize;
        if tgt >= v {
            return Err(Error::Dimension(format!(
                "target {tgt} out of vocab {v}"
            )));
        }
        total += z.ln() + mx - row[tgt];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("cross_entropy: empty effective target set".into()));
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite cross-entropy loss".into()));
    }
    let pa = logits.clone();
    let tg = targets.to_vec();
    Ok(Tensor::build(
        vec![1],
        vec![loss],
        false,
        vec![logits.clone()],
        Some(Box::new(move |g| {
            let scale = g[0] / count as f64;
            let mut dx = vec![0.0; t * v];
            for i in 0..t {
                if tg[i] == ignore_index {
                    continue;
                }
                for j in 0..v {
                    dx[i * v + j] = probs[i * v + j] * scale;
                }
                dx[i * v + tg[i] as usize] -= scale;
            }
            pa.accumulate_grad(&dx);
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec(), true)
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(&[2, 1], &[1.0, 1.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3], false);
        let b = t2(&[3, 2], &[1.0; 6]);
        let out = z.matmul(&b).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = t2(&[2, 3], &[0.0; 6]);
        let b = t2(&[2, 3], &[0.0; 6]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_backward_grads() {
        let a = t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        // d(sum(AB))/dA = ones·Bᵀ
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn l2_normalize_cases() {
        let zero = t2(&[3], &[0.0, 0.0, 0.0]);
        assert_eq!(zero.l2_normalize(1e-6).to_vec(), vec![0.0, 0.0, 0.0]);

        let unit = t2(&[2], &[1.0, 0.0]);
        let n = unit.l2_normalize(1e-6);
        assert!((n.norm2() - 0.999999).abs() < 1e-5);

        let v = t2(&[2], &[3.0, 4.0]);
        let n = v.l2_normalize(1e-6).to_vec();
        assert!((n[0] - 0.6).abs() < 1e-5 && (n[1] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn l2_normalize_norm_bound() {
        let mut rng = XorShiftRng::new(9);
        for _ in 0..50 {
            let mut d = vec![0.0; 8];
            rng.fill_normal(&mut d, 3.0);
            let v = Tensor::new(&[8], d, false);
            if v.norm2() < 1.0 {
                continue;
            }
            let eps = 1e-6;
            let n = v.l2_normalize(eps).norm2();
            assert!(n <= 1.0 && n >= 1.0 - 2.0 * eps, "norm {n}");
        }
    }

    #[test]
    fn sigmoid_values() {
        assert!((Tensor::scalar(0.0, false).sigmoid().item() - 0.5).abs() < 1e-12);
        let s = Tensor::scalar(-3.5, false).sigmoid().item();
        assert!((s - 0.0293).abs() < 0.0005, "sigmoid(-3.5) = {s}");
        let big = Tensor::scalar(30.0, false).sigmoid().item();
        assert!(big > 0.999999 && big < 1.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let v = 7;
        let logits = Tensor::zeros(&[3, v], true);
        let loss = softmax_cross_entropy(&logits, &[0, 3, 6], u32::MAX).unwrap();
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_approaches_zero() {
        let mut data = vec![0.0; 4];
        data[1] = 50.0;
        let logits = Tensor::new(&[1, 4], data, false);
        let loss = softmax_cross_entropy(&logits, &[1], u32::MAX).unwrap();
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_class_hand_case() {
        let logits = Tensor::new(&[1, 2], vec![1.0, 0.0], false);
        let loss = softmax_cross_entropy(&logits, &[0], u32::MAX).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss.item() - expected).abs() < 1e-10);
        assert!((loss.item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let logits = Tensor::zeros(&[2, 3], false);
        assert!(softmax_cross_entropy(&logits, &[9, 9], 9).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = XorShiftRng::new(3);
        let mut d = vec![0.0; 12];
        rng.fill_normal(&mut d, 2.0);
        let sm = Tensor::new(&[3, 4], d, false).softmax_rows().unwrap();
        let v = sm.to_vec();
        for i in 0..3 {
            let s: f64 = v[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn add_at_row_touches_single_row() {
        let m = t2(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = t2(&[2], &[10.0, 20.0]);
        let out = m.add_at_row(1, &v).unwrap().to_vec();
        assert_eq!(out, vec![1.0, 2.0, 13.0, 24.0, 5.0, 6.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let a = t2(&[2], &[1.0, 2.0]);
        let out = no_grad(|| a.scale(2.0).sum());
        out.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn detach_is_gradient_boundary() {
        let a = t2(&[2], &[1.0, 2.0]);
        let loss = a.scale(3.0).detach().sum();
        loss.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let a = t2(&[1], &[2.0]);
        // loss = a*a (via mul of a with itself) → d/da = 2a = 4
        let loss = a.mul(&a).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0]);
    }
}
