//! Problem datum of the LQ mean field social optimization model.
//!
//! Agent dynamics
//! `dX_i = (A X_i + B u_i + G X^(N)) dt + (B1 u_i + D) dW_i + (B0 u^(N) + D0) dW0`,
//! individual cost weights `Q`, `R`, `QF` with couplings `Gamma`, `GammaF`.

use crate::linalg::{asymmetry, sym};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Largest asymmetry of Q, R, QF accepted on intake.
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFiniteEntry(String),
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("{name} is not symmetric (max asymmetry {asym:e})")]
    Asymmetric { name: String, asym: f64 },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid initial law: {0}")]
    InvalidLaw(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub n1: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub gamma_f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub horizon: f64,
    /// Terminal linear weight `K` of an extra cost `2 Kᵀ X_i(T)`; zero by default.
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedWeights {
    pub q_gamma: DMatrix<f64>,
    pub qf_gamma: DMatrix<f64>,
    pub q3: DMatrix<f64>,
    pub q3f: DMatrix<f64>,
}

/// `Γᵀ W Γ − W Γ − Γᵀ W`.
pub fn coupled_weight(w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let wg = w * gamma;
    sym(&(gamma.transpose() * &wg - &wg - wg.transpose()))
}

impl ModelParams {
    /// Validate dimensions and finiteness, symmetrize the weights.
    pub fn build(mut self) -> Result<Self, ModelError> {
        let (n, n1) = (self.n, self.n1);
        if n == 0 || n1 == 0 {
            return Err(ModelError::DimensionMismatch("n and n1 must be positive".into()));
        }
        let shapes: [(&str, &DMatrix<f64>, usize, usize); 13] = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, n1),
            ("B0", &self.b0, n, n1),
            ("B1", &self.b1, n, n1),
            ("D", &self.d, n, 1),
            ("D0", &self.d0, n, 1),
            ("G", &self.g, n, n),
            ("Gamma", &self.gamma, n, n),
            ("GammaF", &self.gamma_f, n, n),
            ("Q", &self.q, n, n),
            ("R", &self.r, n1, n1),
            ("QF", &self.qf, n, n),
            ("K", &self.k, n, 1),
        ];
        for (name, m, r, c) in shapes {
            if (m.nrows(), m.ncols()) != (r, c) {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteEntry(name.into()));
            }
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(ModelError::NonPositiveHorizon(self.horizon));
        }
        for (name, m) in [("Q", &mut self.q), ("R", &mut self.r), ("QF", &mut self.qf)] {
            let asym = asymmetry(m);
            if asym > SYMMETRY_TOL {
                return Err(ModelError::Asymmetric {
                    name: name.into(),
                    asym,
                });
            }
            *m = sym(m);
        }
        Ok(self)
    }

    pub fn derived(&self) -> DerivedWeights {
        let q_gamma = coupled_weight(&self.q, &self.gamma);
        let qf_gamma = coupled_weight(&self.qf, &self.gamma_f);
        let i = DMatrix::<f64>::identity(self.n, self.n);
        let ig = &i - &self.gamma;
        let igf = &i - &self.gamma_f;
        DerivedWeights {
            q3: sym(&(ig.transpose() * &self.q * &ig)),
            q3f: sym(&(igf.transpose() * &self.qf * &igf)),
            q_gamma,
            qf_gamma,
        }
    }

    /// `R1(L1) = R + B1ᵀ L1 B1`.
    pub fn r1(&self, l1: &DMatrix<f64>) -> DMatrix<f64> {
        sym(&(&self.r + self.b1.transpose() * l1 * &self.b1))
    }

    /// `R2(L1, L2) = R + B1ᵀ L1 B1 + B0ᵀ (L1 + L2) B0`.
    pub fn r2(&self, l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> DMatrix<f64> {
        sym(&(self.r1(l1) + self.b0.transpose() * (l1 + l2) * &self.b0))
    }

    pub fn has_noise_offsets(&self) -> bool {
        self.d.iter().chain(self.d0.iter()).any(|x| *x != 0.0)
    }

    /// The scalar model with every coefficient given as a number.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        a: f64,
        b: f64,
        b0: f64,
        b1: f64,
        d: f64,
        d0: f64,
        g: f64,
        q: f64,
        qf: f64,
        r: f64,
        gamma: f64,
        gamma_f: f64,
        horizon: f64,
    ) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        ModelParams {
            n: 1,
            n1: 1,
            a: s(a),
            b: s(b),
            b0: s(b0),
            b1: s(b1),
            d: s(d),
            d0: s(d0),
            g: s(g),
            gamma: s(gamma),
            gamma_f: s(gamma_f),
            q: s(q),
            r: s(r),
            qf: s(qf),
            horizon,
            k: s(0.0),
        }
    }
}

pub const PRESETS: [&str; 5] = ["example1", "example2", "example3", "decoupled_m0", "portfolio_lq"];

/// Named scalar parameter sets.
pub fn preset(name: &str) -> Result<ModelParams, ModelError> {
    let m = match name {
        "example1" => ModelParams::scalar(1.0, 1.0, 0.2, 0.2, 0.0, 0.0, 2.0, 4.0, 2.0, 1.0, 0.1, 0.1, 2.0),
        "example2" => ModelParams::scalar(-4.0, 1.0, -2.0, 4.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 4.0, 2.0, 2.0),
        "example3" => ModelParams::scalar(30.0, 1.0, 0.2, 0.2, 0.0, 0.0, 2.0, -30.0, 3.0, 1.5, 0.1, 0.1, 2.0),
        "decoupled_m0" => ModelParams::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0),
        "portfolio_lq" => crate::portfolio::PortfolioParams::default().model(),
        _ => return Err(ModelError::UnknownPreset(name.to_string())),
    };
    m.build()
}

/// Initial distribution of every agent's state.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub per_agent_sigma: Option<Vec<DMatrix<f64>>>,
}

impl InitialLaw {
    pub fn deterministic(mu0: DVector<f64>) -> Self {
        let n = mu0.len();
        Self {
            mu0,
            sigma0: DMatrix::zeros(n, n),
            per_agent_sigma: None,
        }
    }

    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>) -> Result<Self, ModelError> {
        let law = Self {
            mu0,
            sigma0,
            per_agent_sigma: None,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.mu0.len();
        let mut all = vec![&self.sigma0];
        if let Some(v) = &self.per_agent_sigma {
            all.extend(v.iter());
        }
        for s in all {
            if (s.nrows(), s.ncols()) != (n, n) {
                return Err(ModelError::InvalidLaw("covariance shape".into()));
            }
            if asymmetry(s) > SYMMETRY_TOL || crate::linalg::min_eig(s) < -1e-10 {
                return Err(ModelError::InvalidLaw("covariance must be symmetric PSD".into()));
            }
        }
        Ok(())
    }

    /// Covariance of agent `i` (0-based).
    pub fn sigma(&self, i: usize) -> &DMatrix<f64> {
        match &self.per_agent_sigma {
            Some(v) => &v[i % v.len()],
            None => &self.sigma0,
        }
    }
}

/// A matrix given in JSON as a number, a flat list (column) or nested rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Scalar(f64),
    Column(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixInput {
    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>, ModelError> {
        match self {
            MatrixInput::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixInput::Column(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
            MatrixInput::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, |x| x.len());
                if rows.iter().any(|x| x.len() != c) {
                    return Err(ModelError::DimensionMismatch(format!("{name} has ragged rows")));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixInput::Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
    }
}

/// JSON model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ModelConfig {
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n1: Option<usize>,
    pub A: MatrixInput,
    pub B: MatrixInput,
    pub B0: MatrixInput,
    pub B1: MatrixInput,
    pub D: MatrixInput,
    pub D0: MatrixInput,
    pub G: MatrixInput,
    pub Gamma: MatrixInput,
    pub GammaF: MatrixInput,
    pub Q: MatrixInput,
    pub R: MatrixInput,
    pub QF: MatrixInput,
    pub T: f64,
    #[serde(default)]
    pub K: Option<MatrixInput>,
    #[serde(default)]
    pub mu0: Option<MatrixInput>,
    #[serde(default)]
    pub Sigma0: Option<MatrixInput>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Result<ModelParams, ModelError> {
        let a = self.A.to_matrix("A")?;
        let b = self.B.to_matrix("B")?;
        let n = self.n.unwrap_or(a.nrows());
        let n1 = self.n1.unwrap_or(b.ncols());
        let k = match &self.K {
            Some(k) => k.to_matrix("K")?,
            None => DMatrix::zeros(n, 1),
        };
        ModelParams {
            n,
            n1,
            a,
            b,
            b0: self.B0.to_matrix("B0")?,
            b1: self.B1.to_matrix("B1")?,
            d: self.D.to_matrix("D")?,
            d0: self.D0.to_matrix("D0")?,
            g: self.G.to_matrix("G")?,
            gamma: self.Gamma.to_matrix("Gamma")?,
            gamma_f: self.GammaF.to_matrix("GammaF")?,
            q: self.Q.to_matrix("Q")?,
            r: self.R.to_matrix("R")?,
            qf: self.QF.to_matrix("QF")?,
            horizon: self.T,
            k,
        }
        .build()
    }

    /// Initial law from `mu0` / `Sigma0` when present.
    pub fn law(&self, n: usize) -> Result<Option<InitialLaw>, ModelError> {
        let Some(mu) = &self.mu0 else { return Ok(None) };
        let mu = mu.to_matrix("mu0")?;
        if mu.len() != n {
            return Err(ModelError::InvalidLaw("mu0 length".into()));
        }
        let sigma = match &self.Sigma0 {
            Some(s) => s.to_matrix("Sigma0")?,
            None => DMatrix::zeros(n, n),
        };
        InitialLaw::new(DVector::from_column_slice(mu.as_slice()), sigma).map(Some)
    }

    pub fn from_model(m: &ModelParams) -> Self {
        let f = MatrixInput::from_matrix;
        ModelConfig {
            n: Some(m.n),
            n1: Some(m.n1),
            A: f(&m.a),
            B: f(&m.b),
            B0: f(&m.b0),
            B1: f(&m.b1),
            D: f(&m.d),
            D0: f(&m.d0),
            G: f(&m.g),
            Gamma: f(&m.gamma),
            GammaF: f(&m.gamma_f),
            Q: f(&m.q),
            R: f(&m.r),
            QF: f(&m.qf),
            T: m.horizon,
            K: Some(f(&m.k)),
            mu0: None,
            Sigma0: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn example1_weights() {
        let m = preset("example1").unwrap();
        let w = m.derived();
        assert!((w.q_gamma[(0, 0)] + 0.76).abs() < 1e-14);
        assert!((w.q3[(0, 0)] - 3.24).abs() < 1e-14);
        assert!((w.qf_gamma[(0, 0)] + 0.38).abs() < 1e-14);
    }

    #[test]
    fn gamma_identity_and_zero() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, -1.0]);
        let z = coupled_weight(&q, &DMatrix::zeros(2, 2));
        assert_eq!(z, DMatrix::zeros(2, 2));
        let i = coupled_weight(&q, &DMatrix::identity(2, 2));
        assert!((i + &q).abs().max() < 1e-15);
    }

    #[test]
    fn terminal_r_maps_example1() {
        let m = preset("example1").unwrap();
        let w = m.derived();
        assert!((m.r1(&m.qf)[(0, 0)] - 1.08).abs() < 1e-14);
        assert!((m.r2(&m.qf, &w.qf_gamma)[(0, 0)] - 1.1448).abs() < 1e-14);
    }

    #[test]
    fn presets_and_errors() {
        for p in PRESETS {
            preset(p).unwrap();
        }
        assert!(matches!(preset("nope"), Err(ModelError::UnknownPreset(_))));
        let mut m = preset("example1").unwrap();
        m.horizon = 0.0;
        assert!(matches!(m.clone().build(), Err(ModelError::NonPositiveHorizon(_))));
        m.horizon = 1.0;
        m.a = DMatrix::zeros(2, 2);
        assert!(matches!(m.clone().build(), Err(ModelError::DimensionMismatch(_))));
        m.a = s(f64::NAN);
        assert!(matches!(m.build(), Err(ModelError::NonFiniteEntry(_))));
    }

    #[test]
    fn asymmetric_weight_rejected_or_symmetrized() {
        let mut m = preset("example1").unwrap();
        m.n = 2;
        m.n1 = 1;
        for f in [&mut m.a, &mut m.g, &mut m.gamma, &mut m.gamma_f, &mut m.q, &mut m.qf] {
            *f = DMatrix::identity(2, 2);
        }
        for f in [&mut m.b, &mut m.b0, &mut m.b1, &mut m.d, &mut m.d0, &mut m.k] {
            *f = DMatrix::zeros(2, 1);
        }
        m.q[(0, 1)] = 1e-10;
        let built = m.clone().build().unwrap();
        assert_eq!(built.q[(0, 1)], built.q[(1, 0)]);
        m.q[(0, 1)] = 1e-6;
        assert!(matches!(m.build(), Err(ModelError::Asymmetric { .. })));
    }

    #[test]
    fn config_roundtrip() {
        let m = preset("example2").unwrap();
        let text = serde_json::to_string(&ModelConfig::from_model(&m)).unwrap();
        let back = ModelConfig::from_json(&text).unwrap().model().unwrap();
        assert_eq!(back, m);
        let scalar = r#"{"A":1,"B":1,"B0":0.2,"B1":0.2,"D":0,"D0":0,"G":2,"Gamma":0.1,
            "GammaF":0.1,"Q":4,"R":1,"QF":2,"T":2,"mu0":[1.0]}"#;
        let cfg = ModelConfig::from_json(scalar).unwrap();
        assert_eq!(cfg.model().unwrap(), preset("example1").unwrap());
        assert_eq!(cfg.law(1).unwrap().unwrap().mu0[0], 1.0);
    }

    fn mat3() -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 9).prop_map(|v| DMatrix::from_row_slice(3, 3, &v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn q3_identity(g in mat3(), q in mat3()) {
            let q = sym(&q);
            let mut m = ModelParams::scalar(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0);
            m.n = 3;
            m.a = DMatrix::zeros(3, 3);
            m.g = m.a.clone();
            m.gamma_f = m.a.clone();
            m.qf = m.a.clone();
            for f in [&mut m.b, &mut m.b0, &mut m.b1, &mut m.d, &mut m.d0, &mut m.k] {
                *f = DMatrix::zeros(3, 1);
            }
            m.gamma = g;
            m.q = q;
            let m = m.build().unwrap();
            let w = m.derived();
            prop_assert!((&w.q3 - &m.q - &w.q_gamma).abs().max() <= 1e-10);
            prop_assert!(crate::linalg::asymmetry(&w.q_gamma) <= 1e-12);
            let again = m.clone().build().unwrap();
            prop_assert!((&again.q - &m.q).abs().max() <= 1e-15);
        }
    }
}
