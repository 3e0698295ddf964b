//! Dense reference constructions of the instrumented design.

use dsar::design::build_instruments;
use dsar::model::{BasisBlock, DynamicBasis, ModelSpec, PanelData, WeightSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub data: PanelData,
    pub spec: ModelSpec,
}

pub fn random_case(seed: u64, d: usize, t_len: usize, r: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
    let w1 = DMatrix::from_fn(d, d, |i, k| if i == k { 0.0 } else { unif(&mut rng) / d as f64 });
    let w2 = DMatrix::from_fn(d, d, |i, k| if i == k || (i + k) % 2 == 0 { 0.0 } else { 0.3 });
    let weights = WeightSet::new(vec![w1, w2]).unwrap();
    let z1: Vec<f64> = (0..t_len).map(|_| unif(&mut rng)).collect();
    let z2: Vec<f64> = (0..t_len).map(|t| if t < t_len / 2 { 1.0 } else { 0.0 }).collect();
    let basis = DynamicBasis::new(
        t_len,
        vec![BasisBlock::with_constant(vec![z1]), BasisBlock::without_constant(vec![z2])],
    )
    .unwrap();
    let x: Vec<DMatrix<f64>> = (0..t_len).map(|_| DMatrix::from_fn(d, r, |_, _| unif(&mut rng))).collect();
    let y = DMatrix::from_fn(d, t_len, |_, _| unif(&mut rng) * 2.0);
    let data = PanelData::new(y, x.clone(), Some(x)).unwrap();
    Case { data, spec: ModelSpec::new(weights, basis) }
}

/// Unit-major stacking: entry `i*T + t` is unit `i` at period `t`.
pub fn unit_major(panel: &DMatrix<f64>) -> DVector<f64> {
    let (d, t_len) = panel.shape();
    DVector::from_fn(d * t_len, |n, _| panel[(n / t_len, n % t_len)])
}

pub struct Dense {
    pub b: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub xs: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub yw: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub fn dense(case: &Case) -> Dense {
    let data = &case.data;
    let (d, t_len, r) = (data.d(), data.t_len(), data.r());
    let inst = build_instruments(data, &case.spec.weights, 1).unwrap();
    let v_cols = inst.v();
    let gamma = DVector::from_element(v_cols, 1.0 / v_cols as f64);
    let mut mean = DMatrix::zeros(d, v_cols);
    for b in &inst.blocks {
        mean += b;
    }
    mean /= t_len as f64;
    let centered: Vec<DMatrix<f64>> = inst.blocks.iter().map(|b| b - &mean).collect();

    // M = (I_T (x) gamma')(C_1, .., C_T)', a T x d matrix.
    let mut stacked_c = DMatrix::zeros(t_len * v_cols, d);
    for t in 0..t_len {
        stacked_c
            .view_mut((t * v_cols, 0), (v_cols, d))
            .copy_from(&centered[t].transpose());
    }
    let i_t_gamma = DMatrix::identity(t_len, t_len).kronecker(&gamma.transpose());
    let m = i_t_gamma * stacked_c;
    let s = 1.0 / ((t_len * d) as f64).sqrt();
    let b = DMatrix::identity(d, d).kronecker(&m) * s;

    let basis = &case.spec.basis;
    let l = basis.len();
    let mut v = DMatrix::zeros(d * t_len, l);
    for i in 0..l {
        let c = basis.coef(i);
        let w = case.spec.weights.get(c.matrix);
        let mut gamma_jk = DMatrix::zeros(t_len, d);
        for t in 0..t_len {
            let row = data.y.column(t).transpose() * basis.value(i, t);
            gamma_jk.set_row(t, &row);
        }
        let big = DMatrix::identity(d, d).kronecker(&gamma_jk);
        let w_t = w.transpose();
        let vec_wt = DVector::from_column_slice(w_t.as_slice());
        v.set_column(i, &(big * vec_wt));
    }

    let mut xs = DMatrix::zeros(d * t_len, r);
    for i in 0..d {
        for t in 0..t_len {
            xs.set_row(i * t_len + t, &data.x[t].row(i));
        }
    }

    // Period-major blocks for the instrument products.
    let mut b_nu = DMatrix::zeros(t_len * d, v_cols);
    let mut x_nu = DMatrix::zeros(t_len * d, r);
    let mut yw = DMatrix::zeros(t_len * d, l);
    for t in 0..t_len {
        b_nu.view_mut((t * d, 0), (d, v_cols)).copy_from(&centered[t]);
        x_nu.view_mut((t * d, 0), (d, r)).copy_from(&data.x[t]);
        for i in 0..l {
            let c = basis.coef(i);
            let wy = case.spec.weights.get(c.matrix) * data.y.column(t) * basis.value(i, t);
            yw.view_mut((t * d, i), (d, 1)).copy_from(&wy);
        }
    }
    let xb = x_nu.transpose() * &b_nu;
    let gram = &xb * xb.transpose();
    let xi = b.transpose() * &xs * gram.try_inverse().unwrap() * &xb * b_nu.transpose();
    Dense { b, v, xs, xi, yw, y: unit_major(&data.y) }
}

pub fn period_major(panel: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(panel.as_slice())
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

