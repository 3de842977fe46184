//! Small dense complex linear algebra helpers on top of nalgebra.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type CMatrix = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

/// (A + Aᴴ)/2
pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

/// (A − Aᴴ)/(2i), Hermitian for any A.
pub fn skew_part(a: &CMatrix) -> CMatrix {
    (a - a.adjoint()) * C64::new(0.0, -0.5)
}

pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_off_diagonal(a: &CMatrix) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if i != j {
                m = m.max(a[(i, j)].norm());
            }
        }
    }
    m
}

pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    max_abs(&(a - a.adjoint()))
}

pub fn trace(a: &CMatrix) -> C64 {
    a.diagonal().iter().sum()
}

/// Spectral norm.
pub fn op_norm(a: &CMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
/// Only the Hermitian part of `a` is used.
pub fn eigh(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let h = hermitian_part(a);
    let n = h.nrows();
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn eigvalsh(a: &CMatrix) -> Vec<f64> {
    let mut v: Vec<f64> = hermitian_part(a).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Trace norm of a Hermitian matrix.
pub fn trace_norm_hermitian(a: &CMatrix) -> f64 {
    eigvalsh(a).iter().map(|x| x.abs()).sum()
}

/// Numerical rank with singular-value threshold `rel_tol · σ_max`.
pub fn rank(a: &CMatrix, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Unitary `U` with `Uᴴ A U` diagonal for every generator, assuming the
/// generators are Hermitian and pairwise commuting. The result is only a
/// candidate; callers verify the off-diagonal residue.
pub fn joint_diagonalizer(gens: &[CMatrix], tol: f64) -> CMatrix {
    let n = gens[0].nrows();
    if gens.iter().all(|g| max_off_diagonal(g) <= tol) {
        return CMatrix::identity(n, n);
    }
    // Generic combination first; ties in its spectrum are refined below.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_d1a6);
    let mut x = CMatrix::zeros(n, n);
    for g in gens {
        let c: f64 = rng.random_range(0.5..1.5);
        x += g * C64::new(c, 0.0);
    }
    let (vals, mut u) = eigh(&x);
    let mut blocks = cluster(&vals, tol);
    for g in gens {
        let mut next = Vec::new();
        for block in blocks {
            if block.len() == 1 {
                next.push(block);
                continue;
            }
            let d = block.len();
            let ub = CMatrix::from_fn(n, d, |r, c| u[(r, block[c])]);
            let gb = ub.adjoint() * g * &ub;
            let (bvals, w) = eigh(&gb);
            let rotated = ub * w;
            for (c, &col) in block.iter().enumerate() {
                u.set_column(col, &rotated.column(c));
            }
            for sub in cluster(&bvals, tol) {
                next.push(sub.iter().map(|&i| block[i]).collect());
            }
        }
        blocks = next;
    }
    u
}

/// Groups indices of ascending `vals` into runs separated by gaps > tol.
fn cluster(vals: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, v) in vals.iter().enumerate() {
        match out.last_mut() {
            Some(last) if (v - vals[*last.last().unwrap()]).abs() <= tol => last.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// In-place Cholesky test of `a + shift·I` for a Hermitian matrix stored
/// row-major in `a`. Only the lower triangle is read. `work` needs n² slots.
pub(crate) fn is_positive_definite(a: &[C64], n: usize, shift: f64, work: &mut [C64]) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j].re + shift;
        for k in 0..j {
            d -= work[j * n + k].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let ljj = d.sqrt();
        work[j * n + j] = C64::new(ljj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= work[i * n + k] * work[j * n + k].conj();
            }
            work[i * n + j] = s / ljj;
        }
    }
    true
}

/// Random Hermitian matrix with i.i.d. Gaussian entries.
pub fn random_hermitian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMatrix {
    let g = ginibre(n, n, rng);
    hermitian_part(&g)
}

pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
}

/// Random unitary: eigenvectors of a Gaussian Hermitian matrix.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMatrix {
    let (_, u) = eigh(&random_hermitian(n, rng));
    u
}
