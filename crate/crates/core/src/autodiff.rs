//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; a [`Var`] is a
//! handle to one recorded value. [`Tape::backward`] walks the records in
//! reverse from a scalar loss and accumulates `d loss / d value` for every
//! reachable node. Gradients accumulate across calls until
//! [`Tape::zero_grad`] is invoked.

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix, DEFAULT_CONDITION_CAP};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Contract(format!(
                "unknown activation {other:?} (expected tanh, relu or identity)"
            ))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Inverse(Var),
    Activate(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddColumn(Var, Var),
    SumSq(Var),
    WeightedColSumSq(Var, Vec<f64>),
    SelectCols(Var, Vec<usize>),
    HCat(Vec<Var>),
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Linear record of operations and their values.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseMatrix>>,
    condition_cap: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_condition_cap(DEFAULT_CONDITION_CAP)
    }

    /// Tape whose [`Tape::matinv`] rejects inputs above the given
    /// infinity-norm condition number.
    pub fn with_condition_cap(cap: f64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            condition_cap: cap,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    /// Accumulated gradient; zeros before any backward pass reaches `v`.
    pub fn grad(&self, v: Var) -> DenseMatrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Matrix inverse via LU with partial pivoting. Fails with
    /// [`Error::Singular`] above the tape's condition cap.
    pub fn matinv(&mut self, a: Var) -> Result<Var> {
        let (inv, _) = self.value(a).inverse_with_cap(self.condition_cap)?;
        Ok(self.push(inv, Op::Inverse(a)))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        self.push(value, Op::Activate(a, act))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds the column vector `b` (r x 1) to every column of `a` (r x c).
    pub fn add_column(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        if self.shape(b) != (ra, 1) {
            let (rb, cb) = self.shape(b);
            return Err(Error::dim(
                "add_column",
                format!("{ra}x{ca} plus column {rb}x{cb}"),
            ));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for i in 0..ra {
            let bi = bias[i];
            value.row_mut(i).iter_mut().for_each(|v| *v += bi);
        }
        Ok(self.push(value, Op::AddColumn(a, b)))
    }

    /// Squared Frobenius norm as a 1x1 value.
    pub fn sum_sq_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(DenseMatrix::from_raw(1, 1, vec![s]), Op::SumSq(a))
    }

    /// `sum_j w_j * ||column_j(a)||^2` as a 1x1 value.
    pub fn weighted_col_sum_sq(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if weights.len() != c {
            return Err(Error::dim(
                "weighted_col_sum_sq",
                format!("{} weights for {c} columns", weights.len()),
            ));
        }
        let m = self.value(a);
        let mut s = 0.0;
        for i in 0..r {
            for (v, w) in m.row(i).iter().zip(&weights) {
                s += w * v * v;
            }
        }
        Ok(self.push(
            DenseMatrix::from_raw(1, 1, vec![s]),
            Op::WeightedColSumSq(a, weights),
        ))
    }

    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let c = self.shape(a).1;
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::dim(
                "select_cols",
                format!("column {bad} out of range for {c} columns"),
            ));
        }
        let value = self.value(a).select_cols(&idx);
        Ok(self.push(value, Op::SelectCols(a, idx)))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&DenseMatrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = DenseMatrix::hcat(&refs)?;
        Ok(self.push(value, Op::HCat(parts.to_vec())))
    }

    /// Sum of 1x1 values.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut iter = parts.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::Contract("sum of zero terms".into()))?;
        let mut acc = first;
        for &p in iter {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar loss. Gradients are added to any already
    /// accumulated values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {r}x{c}"
            )));
        }
        let mut adj: Vec<Option<DenseMatrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(DenseMatrix::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g.clone()),
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = gemm(&g, false, bv, true);
                    let gb = gemm(av, true, &g, false);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Inverse(a) => {
                    // d(A^-1) = -A^-1 dA A^-1  =>  dL/dA = -A^-T G A^-T
                    let inv = &node.value;
                    let t = gemm(inv, true, &g, false);
                    let ga = gemm(&t, false, inv, true).scale(-1.0);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Activate(a, act) => {
                    let ga = match act {
                        Activation::Tanh => g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)),
                        Activation::Relu => {
                            g.zip_map(
                                &self.nodes[a.0].value,
                                |gi, x| if x > 0.0 { gi } else { 0.0 },
                            )
                        }
                        Activation::Identity => g,
                    };
                    accumulate(&mut adj, *a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut adj, *a, g.scale(*f)),
                Op::AddColumn(a, b) => {
                    let gb: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    accumulate(&mut adj, *b, DenseMatrix::column(&gb));
                    accumulate(&mut adj, *a, g);
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g.data()[0];
                    accumulate(&mut adj, *a, self.nodes[a.0].value.scale(s));
                }
                Op::WeightedColSumSq(a, w) => {
                    let s = 2.0 * g.data()[0];
                    let av = &self.nodes[a.0].value;
                    let mut ga = av.clone();
                    for i in 0..ga.rows() {
                        for (v, wj) in ga.row_mut(i).iter_mut().zip(w) {
                            *v *= s * wj;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SelectCols(a, idx_list) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for i in 0..r {
                        let src = g.row(i);
                        let dst = ga.row_mut(i);
                        for (k, &j) in idx_list.iter().enumerate() {
                            dst[j] += src[k];
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::HCat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        let idx_list: Vec<usize> = (off..off + c).collect();
                        accumulate(&mut adj, *p, g.select_cols(&idx_list));
                        off += c;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one matrix.
    pub(crate) fn finite_diff(
        f: &dyn Fn(&DenseMatrix) -> f64,
        x: &DenseMatrix,
        h: f64,
    ) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(x.rows(), x.cols());
        let mut xp = x.clone();
        for k in 0..x.data().len() {
            let orig = xp.data()[k];
            xp.data_mut()[k] = orig + h;
            let up = f(&xp);
            xp.data_mut()[k] = orig - h;
            let down = f(&xp);
            xp.data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        g
    }

    pub(crate) fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius().max(1e-8)
    }

    pub(crate) fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_raw(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        let mut m = random(rng, n, n).scale(0.3);
        for i in 0..n {
            let v = m.get(i, i) + 2.0;
            m.set(i, i, v);
        }
        m
    }

    /// Tape gradient of `build(leaf)` w.r.t. the leaf.
    fn tape_grad(build: &dyn Fn(&mut Tape, Var) -> Var, x: &DenseMatrix) -> DenseMatrix {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let loss = build(&mut t, v);
        t.backward(loss).unwrap();
        t.grad(v)
    }

    fn tape_value(build: &dyn Fn(&mut Tape, Var) -> Var, x: &DenseMatrix) -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let loss = build(&mut t, v);
        t.scalar(loss)
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: &DenseMatrix, tol: f64) {
        let g = tape_grad(build, x);
        let fd = finite_diff(&|m| tape_value(build, m), x, 1e-5);
        let e = rel_err(&g, &fd);
        assert!(e < tol, "relative error {e:e} above {tol:e}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 3);
        let i = t.leaf(DenseMatrix::identity(3));
        let mv = t.leaf(m.clone());
        let p = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(p), &m);

        let a = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = t.leaf(DenseMatrix::column(&[1.0, 1.0]));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[3.0, 7.0]);
        assert!(matches!(t.matmul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let b = random(&mut rng, 3, 2);
            let a = random(&mut rng, 4, 3);
            let build = |t: &mut Tape, x: Var| {
                let bv = t.leaf(b.clone());
                let p = t.matmul(x, bv).unwrap();
                // sum(a b) through a ones-vector contraction
                let ones_l = t.leaf(DenseMatrix::filled(1, 4, 1.0));
                let ones_r = t.leaf(DenseMatrix::filled(2, 1, 1.0));
                let s = t.matmul(ones_l, p).unwrap();
                t.matmul(s, ones_r).unwrap()
            };
            check(&build, &a, 1e-5);
            let build_b = |t: &mut Tape, x: Var| {
                let av = t.leaf(a.clone());
                let p = t.matmul(av, x).unwrap();
                t.sum_sq_norm(p)
            };
            check(&build_b, &b, 1e-5);
        }
    }

    #[test]
    fn matinv_values() {
        let mut t = Tape::new();
        let i = t.leaf(DenseMatrix::identity(3));
        let inv = t.matinv(i).unwrap();
        assert_eq!(t.value(inv), &DenseMatrix::identity(3));
        let d = t.leaf(DenseMatrix::diag(&[2.0, 4.0]));
        let inv = t.matinv(d).unwrap();
        assert_eq!(t.value(inv), &DenseMatrix::diag(&[0.5, 0.25]));
        let s = t.leaf(DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap());
        assert!(matches!(t.matinv(s), Err(Error::Singular { .. })));
        let r = t.leaf(DenseMatrix::zeros(2, 3));
        assert!(matches!(t.matinv(r), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matinv_condition_cap_is_configurable() {
        let mut t = Tape::with_condition_cap(10.0);
        let a = t.leaf(DenseMatrix::diag(&[1.0, 0.01]));
        match t.matinv(a) {
            Err(Error::Singular { condition }) => assert!((condition - 100.0).abs() < 1e-9),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matinv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = well_conditioned(&mut rng, 4);
            let w = random(&mut rng, 4, 4);
            let build = |t: &mut Tape, x: Var| {
                let inv = t.matinv(x).unwrap();
                // weighted sum of entries of the inverse
                let wv = t.leaf(w.clone());
                let p = t.add(inv, wv).unwrap();
                t.sum_sq_norm(p)
            };
            check(&build, &a, 1e-4);
        }
    }

    #[test]
    fn matinv_is_two_sided_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = well_conditioned(&mut rng, 5);
            let inv = a.inverse().unwrap();
            let eye = DenseMatrix::identity(5);
            assert!(inv.matmul(&a).unwrap().sub(&eye).unwrap().norm_inf() < 1e-8);
            assert!(a.matmul(&inv).unwrap().sub(&eye).unwrap().norm_inf() < 1e-8);
        }
    }

    #[test]
    fn activations() {
        let mut t = Tape::new();
        let z = t.leaf(DenseMatrix::zeros(2, 2));
        let y = t.activate(z, Activation::Tanh);
        assert_eq!(t.value(y), &DenseMatrix::zeros(2, 2));
        let x = t.leaf(DenseMatrix::from_rows(&[[-1.0, 2.0]]).unwrap());
        let y = t.activate(x, Activation::Relu);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert!("sigmoid".parse::<Activation>().is_err());
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            for _ in 0..20 {
                let mut x = random(&mut rng, 3, 4);
                // keep relu away from its kink
                x = x.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
                let w = random(&mut rng, 3, 4);
                let build = |t: &mut Tape, v: Var| {
                    let y = t.activate(v, act);
                    let wv = t.leaf(w.clone());
                    let d = t.sub(y, wv).unwrap();
                    t.sum_sq_norm(d)
                };
                check(&build, &x, 1e-5);
            }
        }
    }

    #[test]
    fn elementary_ops() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap());
        let s = t.sum_sq_norm(x);
        assert_eq!(t.scalar(s), 25.0);
        let d = t.sub(x, x).unwrap();
        assert_eq!(t.value(d), &DenseMatrix::zeros(1, 2));
        let y = t.leaf(DenseMatrix::zeros(2, 1));
        assert!(matches!(t.add(x, y), Err(Error::Dimension { .. })));
        assert!(matches!(t.sub(x, y), Err(Error::Dimension { .. })));
        let sc = t.scale(x, 2.0);
        assert_eq!(t.value(sc).data(), &[6.0, 8.0]);
    }

    #[test]
    fn sum_sq_gradient_is_twice_value() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let y = t.leaf(DenseMatrix::from_rows(&[[5.0]]).unwrap());
        let _unused = t.scale(y, 3.0);
        let loss = t.sum_sq_norm(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, 4.0]);
        assert_eq!(t.grad(y).data(), &[0.0]);
    }

    #[test]
    fn gradient_is_zero_before_backward() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::filled(2, 2, 1.0));
        let _ = t.sum_sq_norm(x);
        assert_eq!(t.grad(x), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = random(&mut rng, 3, 5);
            let bias = random(&mut rng, 3, 1);
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..2.0)).collect();
            let build = |t: &mut Tape, v: Var| {
                let b = t.leaf(bias.clone());
                let y = t.add_column(v, b).unwrap();
                let picked = t.select_cols(y, vec![4, 0, 0, 2]).unwrap();
                let cat = t.hcat(&[y, picked]).unwrap();
                let cat = t.hcat(&[cat]).unwrap();
                let sel = t.select_cols(cat, (0..8).collect()).unwrap();
                t.weighted_col_sum_sq(sel, w.clone()).unwrap()
            };
            check(&build, &x, 1e-5);
            let build_bias = |t: &mut Tape, v: Var| {
                let xv = t.leaf(x.clone());
                let y = t.add_column(xv, v).unwrap();
                let z = t.activate(y, Activation::Tanh);
                t.sum_sq_norm(z)
            };
            check(&build_bias, &bias, 1e-5);
        }
    }

    #[test]
    fn composite_inverse_product_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = well_conditioned(&mut rng, 4);
            let k = random(&mut rng, 4, 4);
            let psi = random(&mut rng, 4, 3);
            // L = ||S^-1 K S psi||^2 w.r.t. S and K
            let build_s = |t: &mut Tape, sv: Var| {
                let kv = t.leaf(k.clone());
                let pv = t.leaf(psi.clone());
                let inv = t.matinv(sv).unwrap();
                let a = t.matmul(inv, kv).unwrap();
                let a = t.matmul(a, sv).unwrap();
                let y = t.matmul(a, pv).unwrap();
                t.sum_sq_norm(y)
            };
            check(&build_s, &s, 1e-4);
            let build_k = |t: &mut Tape, kv: Var| {
                let sv = t.leaf(s.clone());
                let pv = t.leaf(psi.clone());
                let inv = t.matinv(sv).unwrap();
                let a = t.matmul(inv, kv).unwrap();
                let a = t.matmul(a, sv).unwrap();
                let y = t.matmul(a, pv).unwrap();
                t.sum_sq_norm(y)
            };
            check(&build_k, &k, 1e-4);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 3);
        let (alpha, beta) = (0.7, -1.3);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let y = t.activate(v, Activation::Tanh);
        let l1 = t.sum_sq_norm(y);
        let z = t.matmul(v, v).unwrap();
        let l2 = t.sum_sq_norm(z);
        let a1 = t.scale(l1, alpha);
        let b2 = t.scale(l2, beta);
        let combo = t.add(a1, b2).unwrap();

        t.backward(l1).unwrap();
        let g1 = t.grad(v);
        t.zero_grad();
        t.backward(l2).unwrap();
        let g2 = t.grad(v);
        t.zero_grad();
        t.backward(combo).unwrap();
        let g = t.grad(v);
        let expected = g1.scale(alpha).add(&g2.scale(beta)).unwrap();
        assert!(g.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(DenseMatrix::from_rows(&[[2.0]]).unwrap());
        let y = t.add(x, x).unwrap();
        let loss = t.sum_sq_norm(y);
        t.backward(loss).unwrap();
        // L = (2x)^2, dL/dx = 8x
        assert_eq!(t.grad(x).data(), &[16.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).data(), &[32.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = well_conditioned(&mut rng, 4);
            let mut t = Tape::new();
            let v = t.leaf(x);
            let inv = t.matinv(v).unwrap();
            let p = t.matmul(inv, v).unwrap();
            let a = t.activate(p, Activation::Tanh);
            let l = t.sum_sq_norm(a);
            t.backward(l).unwrap();
            (t.value(l).clone(), t.grad(v))
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        assert!(g1
            .data()
            .iter()
            .zip(g2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
