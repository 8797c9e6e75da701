//! Weighted closed-loop map `M(θ)` and the operator-norm certificates built on it.
//!
//! With loss `ℓ(θ, w) = ‖M(θ) w‖`:
//! - the Lipschitz constant in `w` is `L(θ) = ‖M(θ)‖_op`;
//! - for `w ~ N(μ_w, Σ_w)` the centered loss is sub-Gaussian with proxy `‖M(θ) Σ_w^{1/2}‖_op`;
//! - for `‖w‖ ≤ R` almost surely the proxy is `(R/2) ‖M(θ)‖_op`.
//!
//! Both proxies are `‖M(θ) S‖_op` for a scaling `S`, which is how they are evaluated here.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, shape, Error, Result};
use crate::linalg::{symmetric_sqrt, Definiteness};
use crate::lti::CostWeights;
use crate::sls::SlsBasis;

/// Singular gaps at or below this are reported as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-10;

/// Affine family `M(θ) = M₀ + Σ θᵢ Mᵢ` with `M = [Q_c^{1/2} Φ_x; R_c^{1/2} Φ_u]`.
#[derive(Debug, Clone)]
pub struct WeightedMapBasis {
    pub m0: DMatrix<f64>,
    /// Column `i` is `vec(Mᵢ)`.
    stack: DMatrix<f64>,
}

impl WeightedMapBasis {
    /// Family from an explicit baseline and components, all of the same shape.
    pub fn from_parts(m0: DMatrix<f64>, components: &[DMatrix<f64>]) -> Result<Self> {
        let mut stack = DMatrix::zeros(m0.len(), components.len());
        for (i, c) in components.iter().enumerate() {
            if c.shape() != m0.shape() {
                return Err(dim_err("component", shape(m0.nrows(), m0.ncols()), shape(c.nrows(), c.ncols())));
            }
            stack.column_mut(i).copy_from_slice(c.as_slice());
        }
        Ok(Self { m0, stack })
    }

    pub fn dim(&self) -> usize {
        self.stack.ncols()
    }

    pub fn rows(&self) -> usize {
        self.m0.nrows()
    }

    pub fn w_dim(&self) -> usize {
        self.m0.ncols()
    }

    pub fn component(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.m0.nrows(), self.m0.ncols(), self.stack.column(i).as_slice())
    }

    pub fn eval(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if theta.len() != self.dim() {
            return Err(dim_err("theta", self.dim(), theta.len()));
        }
        let mut v = DVector::from_column_slice(self.m0.as_slice());
        v.gemv(1.0, &self.stack, theta, 1.0);
        Ok(DMatrix::from_column_slice(self.m0.nrows(), self.m0.ncols(), v.as_slice()))
    }

    /// `(⟨M₁, G⟩_F, …, ⟨M_d, G⟩_F)`: the θ-gradient of any `f(M)` with `∂f/∂M = G`.
    pub fn contract(&self, g: &DMatrix<f64>) -> DVector<f64> {
        debug_assert_eq!(g.shape(), self.m0.shape());
        let flat = DVector::from_column_slice(g.as_slice());
        self.stack.tr_mul(&flat)
    }
}

pub fn build_weighted_basis(basis: &SlsBasis, weights: &CostWeights) -> Result<WeightedMapBasis> {
    let q_sqrt = weights.lifted_q_sqrt();
    let r_sqrt = weights.lifted_r_sqrt();
    if q_sqrt.ncols() != basis.phi0_x.nrows() || r_sqrt.ncols() != basis.phi0_u.nrows() {
        return Err(dim_err(
            "weights",
            format!("lifted sizes {} and {}", basis.phi0_x.nrows(), basis.phi0_u.nrows()),
            format!("{} and {}", q_sqrt.ncols(), r_sqrt.ncols()),
        ));
    }
    let stacked = |px: &DMatrix<f64>, pu: &DMatrix<f64>| {
        let mut m = DMatrix::zeros(px.nrows() + pu.nrows(), px.ncols());
        m.rows_mut(0, px.nrows()).copy_from(&(&q_sqrt * px));
        m.rows_mut(px.nrows(), pu.nrows()).copy_from(&(&r_sqrt * pu));
        m
    };
    let m0 = stacked(&basis.phi0_x, &basis.phi0_u);
    let mut stack = DMatrix::zeros(m0.len(), basis.dim());
    for i in 0..basis.dim() {
        let (dx, du) = basis.column(i);
        stack.column_mut(i).copy_from_slice(stacked(&dx, &du).as_slice());
    }
    Ok(WeightedMapBasis { m0, stack })
}

/// Largest singular value with its unit singular vectors and the gap to the next one.
#[derive(Debug, Clone)]
pub struct OperatorNorm {
    pub value: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub gap: f64,
}

impl OperatorNorm {
    pub fn is_degenerate(&self) -> bool {
        self.gap <= DEGENERATE_GAP
    }
}

/// `‖M‖_op` via a full SVD.
pub fn operator_norm(m: &DMatrix<f64>) -> OperatorNorm {
    if m.is_empty() {
        return OperatorNorm {
            value: 0.0,
            u: DVector::zeros(m.nrows()),
            v: DVector::zeros(m.ncols()),
            gap: 0.0,
        };
    }
    let svd = m.clone().svd(true, true);
    let values = &svd.singular_values;
    let top = values.imax();
    let second = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &s)| s)
        .fold(0.0_f64, f64::max);
    let u = svd.u.as_ref().expect("left vectors requested").column(top).into_owned();
    let v = svd.v_t.as_ref().expect("right vectors requested").row(top).transpose();
    let value = values[top];
    OperatorNorm { value, u, v, gap: value - second }
}

#[derive(Debug, Clone)]
pub enum DisturbanceModel {
    Gaussian(GaussianDisturbance),
    /// `‖w‖ ≤ radius` almost surely; sampled uniformly in the ball.
    Bounded { dim: usize, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct GaussianDisturbance {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sqrt_cov: DMatrix<f64>,
    /// `Some(c)` when `Σ_w^{1/2} = c I` exactly.
    pub isotropic_std: Option<f64>,
}

impl DisturbanceModel {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(dim_err("covariance", shape(mean.len(), mean.len()), shape(cov.nrows(), cov.ncols())));
        }
        let isotropic_std = isotropic_scale(&cov).map(f64::sqrt);
        let sqrt_cov = match isotropic_std {
            Some(c) => DMatrix::identity(mean.len(), mean.len()) * c,
            None => symmetric_sqrt(&cov, Definiteness::SemiDefinite)
                .map_err(|r| Error::InvalidModel(format!("covariance {r}")))?,
        };
        Ok(Self::Gaussian(GaussianDisturbance { mean, cov, sqrt_cov, isotropic_std }))
    }

    /// `N(0, std² I)` in dimension `dim`.
    pub fn isotropic(dim: usize, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::InvalidModel(format!("standard deviation must be finite and >= 0, got {std}")));
        }
        Self::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim) * (std * std))
    }

    pub fn bounded(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidModel(format!("radius must be finite and > 0, got {radius}")));
        }
        Ok(Self::Bounded { dim, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.mean.len(),
            Self::Bounded { dim, .. } => *dim,
        }
    }

    /// The scaling `S` in `σ(θ) = ‖M(θ) S‖_op`.
    pub fn proxy_scaling(&self) -> ProxyScaling<'_> {
        match self {
            Self::Gaussian(g) => match g.isotropic_std {
                Some(c) => ProxyScaling::Scalar(c),
                None => ProxyScaling::Matrix(&g.sqrt_cov),
            },
            Self::Bounded { radius, .. } => ProxyScaling::Scalar(radius / 2.0),
        }
    }
}

fn isotropic_scale(cov: &DMatrix<f64>) -> Option<f64> {
    let c = *cov.get((0, 0))?;
    let is_scaled_identity = cov
        .iter()
        .enumerate()
        .all(|(k, &v)| if k / cov.nrows() == k % cov.nrows() { v == c } else { v == 0.0 });
    (is_scaled_identity && c >= 0.0).then_some(c)
}

#[derive(Debug, Clone, Copy)]
pub enum ProxyScaling<'a> {
    Scalar(f64),
    Matrix(&'a DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certificate {
    Lipschitz,
    Sigma,
}

#[derive(Debug, Clone)]
pub struct CertificateValues {
    pub lipschitz: f64,
    pub sigma: f64,
    /// Top singular triplet of `M(θ)`.
    pub top_singular_triplet: OperatorNorm,
}

/// Value and θ-gradient of one certificate; `degenerate` marks a subgradient.
#[derive(Debug, Clone)]
pub struct CertificateGradient {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub degenerate: bool,
}

pub fn lipschitz_certificate(map: &WeightedMapBasis, theta: &DVector<f64>) -> Result<f64> {
    Ok(operator_norm(&map.eval(theta)?).value)
}

pub fn subgaussian_proxy(map: &WeightedMapBasis, theta: &DVector<f64>, model: &DisturbanceModel) -> Result<f64> {
    check_model(map, model)?;
    let m = map.eval(theta)?;
    Ok(match model.proxy_scaling() {
        ProxyScaling::Scalar(c) => c * operator_norm(&m).value,
        ProxyScaling::Matrix(s) => operator_norm(&(m * s)).value,
    })
}

pub fn evaluate_certificates(
    map: &WeightedMapBasis,
    theta: &DVector<f64>,
    model: &DisturbanceModel,
) -> Result<CertificateValues> {
    check_model(map, model)?;
    let m = map.eval(theta)?;
    let top = operator_norm(&m);
    let sigma = match model.proxy_scaling() {
        ProxyScaling::Scalar(c) => c * top.value,
        ProxyScaling::Matrix(s) => operator_norm(&(&m * s)).value,
    };
    Ok(CertificateValues { lipschitz: top.value, sigma, top_singular_triplet: top })
}

pub fn certificate_gradient(
    map: &WeightedMapBasis,
    theta: &DVector<f64>,
    which: Certificate,
    model: &DisturbanceModel,
) -> Result<CertificateGradient> {
    check_model(map, model)?;
    let m = map.eval(theta)?;
    let (lip, sigma) = certificate_gradients_at(map, &m, model);
    Ok(match which {
        Certificate::Lipschitz => lip,
        Certificate::Sigma => sigma,
    })
}

/// Both certificates and their gradients at an already evaluated `M(θ)`,
/// sharing one SVD when the proxy is a scalar multiple of `‖M‖_op`.
pub fn certificate_gradients_at(
    map: &WeightedMapBasis,
    m: &DMatrix<f64>,
    model: &DisturbanceModel,
) -> (CertificateGradient, CertificateGradient) {
    let top = operator_norm(m);
    // d σ_max(M) / dθᵢ = u₁ᵀ Mᵢ v₁
    let lip_grad = map.contract(&(&top.u * top.v.transpose()));
    let lip = CertificateGradient {
        value: top.value,
        gradient: lip_grad,
        degenerate: top.is_degenerate(),
    };
    let sigma = match model.proxy_scaling() {
        ProxyScaling::Scalar(c) => CertificateGradient {
            value: c * lip.value,
            gradient: &lip.gradient * c,
            degenerate: lip.degenerate,
        },
        ProxyScaling::Matrix(s) => {
            let scaled = operator_norm(&(m * s));
            let sv = s * &scaled.v;
            CertificateGradient {
                value: scaled.value,
                gradient: map.contract(&(&scaled.u * sv.transpose())),
                degenerate: scaled.is_degenerate(),
            }
        }
    };
    (lip, sigma)
}

fn check_model(map: &WeightedMapBasis, model: &DisturbanceModel) -> Result<()> {
    if model.dim() != map.w_dim() {
        return Err(dim_err("disturbance model", map.w_dim(), model.dim()));
    }
    Ok(())
}
