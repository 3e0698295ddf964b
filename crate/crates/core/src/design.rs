//! Instruments and the instrumented design of the profiled problem.
//!
//! With `C_t = B_t - mean(B)` and `c_t = C_t gamma`, the augmentation matrix
//! `B = T^{-1/2} d^{-1/2} I_d (x) {(I_T (x) gamma')(C_1, .., C_T)'}` acts on a
//! panel `Y = (y_1, .., y_T)` as `B' vec(Y') = s vec(C Y')`, where `C` holds
//! the `c_t` as columns and `s = (T d)^{-1/2}`. Nothing of size `dT` is ever
//! formed; every product below is an accumulation over periods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::model::{DynamicBasis, ModelSpec, PanelData, WeightSet};

/// Instruments `B_t`, their time mean and the equal column weights `gamma`.
#[derive(Debug, Clone)]
pub struct InstrumentPanel {
    pub blocks: Vec<DMatrix<f64>>,
    pub mean: DMatrix<f64>,
    pub gamma: DVector<f64>,
    /// `d x T`, column `t` is `(B_t - mean) gamma`.
    pub centered_gamma: DMatrix<f64>,
}

impl InstrumentPanel {
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let t_len = blocks.len();
        if t_len == 0 {
            return Err(Error::Dimension("no instrument blocks".into()));
        }
        let (d, v) = blocks[0].shape();
        if v == 0 {
            return Err(Error::Config("instruments have no columns".into()));
        }
        if blocks.iter().any(|b| b.shape() != (d, v)) {
            return Err(Error::Dimension("instrument blocks differ in shape".into()));
        }
        let mut mean = DMatrix::zeros(d, v);
        for b in &blocks {
            mean += b;
        }
        mean /= t_len as f64;
        let gamma = DVector::from_element(v, 1.0 / v as f64);
        let mut centered_gamma = DMatrix::zeros(d, t_len);
        for (t, b) in blocks.iter().enumerate() {
            centered_gamma.set_column(t, &((b - &mean) * &gamma));
        }
        Ok(Self { blocks, mean, gamma, centered_gamma })
    }

    pub fn v(&self) -> usize {
        self.gamma.len()
    }

    pub fn d(&self) -> usize {
        self.mean.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.blocks.len()
    }

    /// `B_t - mean(B)`.
    pub fn centered(&self, t: usize) -> DMatrix<f64> {
        &self.blocks[t] - &self.mean
    }
}

/// Instruments `[U_t, W_1 U_t, .., W_1^m U_t, .., W_p U_t, .., W_p^m U_t]`.
///
/// Powers are applied one multiplication at a time; cross terms between
/// different weight matrices are not formed.
pub fn build_instruments(
    data: &PanelData,
    weights: &WeightSet,
    depth: usize,
) -> Result<InstrumentPanel> {
    let u = data.u.as_ref().ok_or_else(|| {
        Error::Config("instrument sources U_t are absent; supply U (U_t = X_t when X is exogenous)".into())
    })?;
    if weights.d() != data.d() {
        return Err(Error::Dimension("weights and panel disagree on d".into()));
    }
    let (d, s) = u[0].shape();
    let v = s * (1 + weights.p() * depth);
    let blocks = u
        .iter()
        .map(|ut| {
            let mut b = DMatrix::zeros(d, v);
            b.columns_mut(0, s).copy_from(ut);
            let mut col = s;
            for w in weights.matrices() {
                let mut power = ut.clone();
                for _ in 0..depth {
                    power = w * &power;
                    b.columns_mut(col, s).copy_from(&power);
                    col += s;
                }
            }
            b
        })
        .collect();
    InstrumentPanel::from_blocks(blocks)
}

/// The augmentation matrix `B` kept in factored form.
#[derive(Debug, Clone)]
pub struct Augmentation {
    /// `d x T` matrix of `c_t = (B_t - mean) gamma`.
    pub centered_gamma: DMatrix<f64>,
    /// `T^{-1/2} d^{-1/2}` (the `a = 1` convention).
    pub scale: f64,
}

impl Augmentation {
    pub fn d(&self) -> usize {
        self.centered_gamma.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.centered_gamma.ncols()
    }

    /// `B' vec(Y')` for a `d x T` panel `Y`; the result has length `d^2`.
    pub fn apply_transpose(&self, panel: &DMatrix<f64>) -> DVector<f64> {
        let m = &self.centered_gamma * panel.transpose() * self.scale;
        DVector::from_column_slice(m.as_slice())
    }

    /// `B' v` for `v` in the `vec((y_1, .., y_T)')` layout (unit-major, period-minor).
    pub fn apply_transpose_stacked(&self, stacked: &DVector<f64>) -> DVector<f64> {
        let (d, t_len) = (self.d(), self.t_len());
        assert_eq!(stacked.len(), d * t_len, "stacked vector must have length dT");
        // stacked[i*T + t] is unit i at period t, i.e. a T x d column-major matrix
        let yt = DMatrix::from_column_slice(t_len, d, stacked.as_slice());
        self.apply_transpose(&yt.transpose())
    }
}

/// `B`, kept as its Kronecker factors.
pub fn build_b(inst: &InstrumentPanel) -> Augmentation {
    let (d, t_len) = inst.centered_gamma.shape();
    Augmentation {
        centered_gamma: inst.centered_gamma.clone(),
        scale: 1.0 / ((t_len as f64) * (d as f64)).sqrt(),
    }
}

/// Every matrix the profiled problem needs, built once per data set.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub d: usize,
    pub t_len: usize,
    /// `B'V`, `d^2 x L`.
    pub bt_v: DMatrix<f64>,
    /// `Xi Y_W`, `d^2 x L`.
    pub xi_yw: DMatrix<f64>,
    /// `B'y`, length `d^2`.
    pub bt_y: DVector<f64>,
    /// `Xi y^nu`, length `d^2`.
    pub xi_y: DVector<f64>,
    /// `X'B^nu = sum_t X_t'(B_t - mean)`, `r x v`.
    pub x_b: DMatrix<f64>,
    /// `X'B^nu (B^nu)'X`, `r x r`.
    pub gram: DMatrix<f64>,
    pub gram_inv: DMatrix<f64>,
    /// `X'B^nu (B^nu)' Y_W`, `r x L`.
    pub yw_proj: DMatrix<f64>,
    /// `X'B^nu (B^nu)' y^nu`, length `r`.
    pub yv_proj: DVector<f64>,
    /// `T^{-1/2} d^{-1/2} sum_t X_t (x) c_t`, `d^2 x r`.
    pub x_kron_c: DMatrix<f64>,
    /// `B'V - Xi Y_W`.
    pub design: DMatrix<f64>,
    /// `B'y - Xi y^nu`.
    pub target: DVector<f64>,
    /// `W_j y_t` for every matrix, each `d x T`.
    pub wy: Vec<DMatrix<f64>>,
    /// Coordinates whose design column vanishes identically.
    pub pinned: Vec<usize>,
}

impl DesignMatrices {
    pub fn l(&self) -> usize {
        self.bt_v.ncols()
    }

    pub fn r(&self) -> usize {
        self.gram.nrows()
    }

    /// Residual `B'y - Xi y^nu - (B'V - Xi Y_W) phi` of the simplified form.
    pub fn residual(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.target - &self.design * phi
    }

    /// Residual `B'y - B'V phi - B'X_{beta(phi)} vec(I_d)` with `beta` profiled out.
    pub fn profiled_residual(&self, phi: &DVector<f64>) -> DVector<f64> {
        let beta = self.profiled_beta(phi);
        &self.bt_y - &self.bt_v * phi - &self.x_kron_c * beta
    }

    /// `beta(phi)` in closed form.
    pub fn profiled_beta(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.gram_inv * (&self.yv_proj - &self.yw_proj * phi)
    }
}

/// Build [`DesignMatrices`] for `data` under `spec` and instruments `inst`.
pub fn build_design(
    data: &PanelData,
    spec: &ModelSpec,
    inst: &InstrumentPanel,
) -> Result<DesignMatrices> {
    spec.validate(data)?;
    build_design_parts(data, &spec.weights, &spec.basis, inst)
}

pub(crate) fn build_design_parts(
    data: &PanelData,
    weights: &WeightSet,
    basis: &DynamicBasis,
    inst: &InstrumentPanel,
) -> Result<DesignMatrices> {
    let (d, t_len) = (data.d(), data.t_len());
    if inst.d() != d || inst.t_len() != t_len {
        return Err(Error::Dimension("instruments do not match the panel".into()));
    }
    let (r, v, l) = (data.r(), inst.v(), basis.len());
    let aug = build_b(inst);
    let c = &aug.centered_gamma;
    let s = aug.scale;

    let wy: Vec<DMatrix<f64>> = weights.matrices().iter().map(|w| w * &data.y).collect();

    let bt_y = aug.apply_transpose(&data.y);
    let mut bt_v = DMatrix::zeros(d * d, l);
    let mut a_w = DMatrix::zeros(v, l);
    let mut a_y = DVector::zeros(v);
    let mut x_b = DMatrix::zeros(r, v);
    let centered: Vec<DMatrix<f64>> = (0..t_len).map(|t| inst.centered(t)).collect();
    for t in 0..t_len {
        a_y += centered[t].tr_mul(&data.y.column(t));
        x_b += data.x[t].tr_mul(&centered[t]);
    }
    for i in 0..l {
        let coef = basis.coef(i);
        let wy_j = &wy[coef.matrix];
        let mut scaled_c = c.clone();
        for t in 0..t_len {
            let z = basis.value(i, t);
            scaled_c.column_mut(t).scale_mut(z);
            if z != 0.0 {
                let contrib = centered[t].tr_mul(&wy_j.column(t)) * z;
                let mut col = a_w.column_mut(i);
                col += contrib;
            }
        }
        let m = scaled_c * wy_j.transpose() * s;
        bt_v.set_column(i, &DVector::from_column_slice(m.as_slice()));
    }

    let gram = &x_b * x_b.transpose();
    let gram_inv = spd_inverse(&gram).map_err(|e| Error::RankDeficient {
        condition: e.condition,
        columns: e.columns,
    })?;

    let mut x_kron_c = DMatrix::zeros(d * d, r);
    for a in 0..r {
        let mut xa = DMatrix::zeros(d, t_len);
        for t in 0..t_len {
            xa.set_column(t, &data.x[t].column(a));
        }
        let m = c * xa.transpose() * s;
        x_kron_c.set_column(a, &DVector::from_column_slice(m.as_slice()));
    }

    let yv_proj = &x_b * &a_y;
    let yw_proj = &x_b * &a_w;
    let projector = &x_kron_c * &gram_inv;
    let xi_y = &projector * &yv_proj;
    let xi_yw = &projector * &yw_proj;
    let design = &bt_v - &xi_yw;
    let target = &bt_y - &xi_y;
    let pinned = (0..l)
        .filter(|&i| design.column(i).iter().all(|&x| x == 0.0))
        .collect();

    Ok(DesignMatrices {
        d,
        t_len,
        bt_v,
        xi_yw,
        bt_y,
        xi_y,
        x_b,
        gram,
        gram_inv,
        yw_proj,
        yv_proj,
        x_kron_c,
        design,
        target,
        wy,
        pinned,
    })
}
