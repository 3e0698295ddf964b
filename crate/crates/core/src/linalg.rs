use nalgebra::{DMatrix, SymmetricEigen};

/// Relative condition number beyond which a symmetric system is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Why a symmetric positive semidefinite matrix could not be inverted.
#[derive(Debug, Clone)]
pub(crate) struct Deficiency {
    pub condition: f64,
    /// Coordinates carrying most weight in the weakest eigendirection.
    pub columns: Vec<usize>,
}

/// Inverse of a symmetric positive definite matrix, refusing matrices whose
/// condition number exceeds [`CONDITION_LIMIT`].
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Deficiency> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (mut lo, mut hi) = (0usize, 0usize);
    for i in 0..n {
        if eig.eigenvalues[i] < eig.eigenvalues[lo] {
            lo = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[hi] {
            hi = i;
        }
    }
    let (min, max) = (eig.eigenvalues[lo], eig.eigenvalues[hi]);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= CONDITION_LIMIT) {
        let weak = eig.eigenvectors.column(lo);
        let peak = weak.amax();
        let mut columns: Vec<usize> = (0..n)
            .filter(|&i| peak > 0.0 && weak[i].abs() >= 0.1 * peak)
            .collect();
        columns.sort_by(|&x, &y| weak[y].abs().total_cmp(&weak[x].abs()));
        return Err(Deficiency { condition, columns });
    }
    let mut scaled = eig.eigenvectors.clone();
    for (mut col, &lam) in scaled.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col /= lam;
    }
    let inv = scaled * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Symmetrize in place: `(M + M') / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
