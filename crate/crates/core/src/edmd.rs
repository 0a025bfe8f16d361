//! Closed-form extended dynamic mode decomposition with a fixed dictionary.

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::KoopmanModel;

/// Relative singular-value cutoff for the pseudoinverse.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Lifted snapshots: column `k` of `psi_plus` is the lifted successor of
/// column `k` of `psi`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPair {
    pub psi: DenseMatrix,
    pub psi_plus: DenseMatrix,
}

impl SnapshotPair {
    pub fn new(psi: DenseMatrix, psi_plus: DenseMatrix) -> Result<Self> {
        if psi.shape() != psi_plus.shape() {
            return Err(Error::dim(
                "SnapshotPair::new",
                format!(
                    "{}x{} vs {}x{}",
                    psi.rows(),
                    psi.cols(),
                    psi_plus.rows(),
                    psi_plus.cols()
                ),
            ));
        }
        Ok(Self { psi, psi_plus })
    }
}

/// Moore-Penrose pseudoinverse via SVD, dropping singular values at or below
/// `SVD_CUTOFF * sigma_max`.
pub fn pseudo_inverse(m: &DenseMatrix) -> Result<DenseMatrix> {
    let svd = nalgebra::linalg::SVD::new(m.to_nalgebra(), true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return Err(Error::Data("all-zero snapshot matrix".into()));
    }
    let pinv = svd
        .pseudo_inverse(SVD_CUTOFF * sigma_max)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(DenseMatrix::from_nalgebra(&pinv))
}

/// `K* = Psi+ pinv(Psi)`, the least-squares minimizer of `||Psi+ - K Psi||_F`.
pub fn edmd_fit(pairs: &SnapshotPair) -> Result<DenseMatrix> {
    if pairs.psi.cols() == 0 {
        return Err(Error::Data("no snapshot pairs".into()));
    }
    let pinv = pseudo_inverse(&pairs.psi)?;
    pairs.psi_plus.matmul(&pinv)
}

/// Observable dictionaries.
#[derive(Clone, Copy, Debug)]
pub enum Dictionary<'a> {
    Identity,
    /// All monomials of degree 1 through `p`, graded lexicographic order.
    Monomials(u32),
    Encoder(&'a KoopmanModel),
}

impl Dictionary<'_> {
    /// Lifted dimension for `n`-dimensional states.
    pub fn lifted_dim(&self, n: usize) -> usize {
        match self {
            Dictionary::Identity => n,
            Dictionary::Monomials(p) => monomial_exponents(n, *p).len(),
            Dictionary::Encoder(m) => m.lifted_dim(),
        }
    }

    /// Lifts every column of `states` (`n x T`).
    pub fn lift(&self, states: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            Dictionary::Identity => Ok(states.clone()),
            Dictionary::Monomials(p) => {
                let exps = monomial_exponents(states.rows(), *p);
                let mut out = DenseMatrix::zeros(exps.len(), states.cols());
                for (r, e) in exps.iter().enumerate() {
                    for k in 0..states.cols() {
                        let v: f64 = e
                            .iter()
                            .enumerate()
                            .map(|(i, &pow)| states.get(i, k).powi(pow as i32))
                            .product();
                        out.set(r, k, v);
                    }
                }
                Ok(out)
            }
            Dictionary::Encoder(m) => m.encode_states(states),
        }
    }
}

/// Exponent vectors of all monomials in `n` variables with total degree
/// `1..=p`, degree by degree, each degree in descending lexicographic order
/// (so `x1^2, x1 x2, x2^2`).
pub fn monomial_exponents(n: usize, p: u32) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, n: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            fill(prefix, n, remaining - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    for degree in 1..=p {
        fill(&mut Vec::with_capacity(n), n, degree, &mut out);
    }
    out
}

/// Consecutive-pair snapshots from all trajectories.
pub fn lift_dataset(
    trajectories: &[&Trajectory],
    dictionary: Dictionary<'_>,
) -> Result<SnapshotPair> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (k, t) in trajectories.iter().enumerate() {
        if t.len() < 2 {
            return Err(Error::Data(format!(
                "trajectory {k} has fewer than 2 samples"
            )));
        }
        let lifted = dictionary.lift(t.states())?;
        let m = lifted.cols();
        before.push(lifted.select_cols(&(0..m - 1).collect::<Vec<_>>()));
        after.push(lifted.select_cols(&(1..m).collect::<Vec<_>>()));
    }
    if before.is_empty() {
        return Err(Error::Data("no trajectories to lift".into()));
    }
    let psi = DenseMatrix::hcat(&before.iter().collect::<Vec<_>>())?;
    let psi_plus = DenseMatrix::hcat(&after.iter().collect::<Vec<_>>())?;
    SnapshotPair::new(psi, psi_plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_stable_spiral, SpiralSpec};
    use crate::stability::certify_stable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn residual(pairs: &SnapshotPair, k: &DenseMatrix) -> f64 {
        pairs
            .psi_plus
            .sub(&k.matmul(&pairs.psi).unwrap())
            .unwrap()
            .frobenius()
    }

    #[test]
    fn identity_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let psi = DenseMatrix::new(
            3,
            10,
            (0..30).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let k = edmd_fit(&SnapshotPair::new(psi.clone(), psi).unwrap()).unwrap();
        assert!(k.sub(&DenseMatrix::identity(3)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn recovers_linear_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a =
            DenseMatrix::new(3, 3, (0..9).map(|_| rng.random_range(-0.6..0.6)).collect()).unwrap();
        let psi = DenseMatrix::new(
            3,
            40,
            (0..120).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pairs = SnapshotPair::new(psi.clone(), a.matmul(&psi).unwrap()).unwrap();
        let k = edmd_fit(&pairs).unwrap();
        assert!(k.sub(&a).unwrap().frobenius() < 1e-8);
    }

    #[test]
    fn is_locally_optimal_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let psi = DenseMatrix::new(
            4,
            25,
            (0..100).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let plus = DenseMatrix::new(
            4,
            25,
            (0..100).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pairs = SnapshotPair::new(psi, plus).unwrap();
        let k = edmd_fit(&pairs).unwrap();
        let best = residual(&pairs, &k);
        for _ in 0..100 {
            let delta = DenseMatrix::new(
                4,
                4,
                (0..16).map(|_| rng.random_range(-1e-3..1e-3)).collect(),
            )
            .unwrap();
            assert!(residual(&pairs, &k.add(&delta).unwrap()) >= best);
        }
        let mut perm: Vec<usize> = (0..25).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled = SnapshotPair::new(
            pairs.psi.select_cols(&perm),
            pairs.psi_plus.select_cols(&perm),
        )
        .unwrap();
        let k2 = edmd_fit(&shuffled).unwrap();
        assert!(k.sub(&k2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_data_is_degenerate() {
        let z = DenseMatrix::zeros(2, 5);
        assert!(matches!(
            edmd_fit(&SnapshotPair::new(z.clone(), z).unwrap()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn monomial_ordering() {
        assert_eq!(
            monomial_exponents(2, 2),
            vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        assert_eq!(monomial_exponents(3, 3).len(), 3 + 6 + 10);
        assert_eq!(Dictionary::Monomials(2).lifted_dim(2), 5);
        assert_eq!(Dictionary::Identity.lifted_dim(2), 2);
    }

    #[test]
    fn lifting_builds_consecutive_pairs() {
        let t = Trajectory::uniform(
            0.1,
            DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap(),
        )
        .unwrap();
        let pairs = lift_dataset(&[&t], Dictionary::Identity).unwrap();
        assert_eq!(
            pairs.psi,
            DenseMatrix::from_rows(&[[1.0, 2.0], [4.0, 5.0]]).unwrap()
        );
        assert_eq!(
            pairs.psi_plus,
            DenseMatrix::from_rows(&[[2.0, 3.0], [5.0, 6.0]]).unwrap()
        );
        let pairs = lift_dataset(&[&t], Dictionary::Monomials(2)).unwrap();
        assert_eq!(pairs.psi.rows(), 5);
        assert_eq!(pairs.psi.col(1), vec![2.0, 5.0, 4.0, 10.0, 25.0]);
    }

    #[test]
    fn spiral_generator_is_recovered() {
        let spec = SpiralSpec::default();
        let ds = synth_stable_spiral(&spec).unwrap();
        let trajs: Vec<&Trajectory> = ds.trajectories().iter().collect();
        let k = edmd_fit(&lift_dataset(&trajs, Dictionary::Identity).unwrap()).unwrap();
        assert!(k.sub(&spec.generator()).unwrap().frobenius() < 1e-8);
    }

    #[test]
    fn edmd_ignores_stability() {
        // growing oscillation: least squares reproduces an uncertified matrix
        let spec = SpiralSpec::default();
        let a = spec.generator().scale(1.04 / spec.decay);
        let mut cols = vec![vec![1.0, 0.0]];
        for _ in 0..20 {
            let next = a.mul_vec(cols.last().unwrap()).unwrap();
            cols.push(next);
        }
        let t = Trajectory::uniform(0.1, DenseMatrix::from_columns(&cols).unwrap()).unwrap();
        let k = edmd_fit(&lift_dataset(&[&t], Dictionary::Identity).unwrap()).unwrap();
        assert!(!certify_stable(&k, 0.0).unwrap().is_certified());
    }
}
