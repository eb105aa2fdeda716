//! Sparse polynomial specs over the aerodynamic regressor variables.
//!
//! Model config files describe base coefficients and per-effector
//! effectiveness slopes as sums of terms `c * prod(var^pow)`. Rotary
//! rates enter through the usual normalized forms phat = p b / 2V,
//! qhat = q cbar / 2V, rhat = r b / 2V so the coefficients stay
//! dimensionless.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeroVar {
    Alpha,
    Beta,
    Phat,
    Qhat,
    Rhat,
    Mach,
}

/// Evaluation point for the regressor variables.
#[derive(Debug, Clone, Copy, Default)]
pub struct AeroVars {
    pub alpha: f64,
    pub beta: f64,
    pub phat: f64,
    pub qhat: f64,
    pub rhat: f64,
    pub mach: f64,
}

impl AeroVars {
    fn get(&self, v: AeroVar) -> f64 {
        match v {
            AeroVar::Alpha => self.alpha,
            AeroVar::Beta => self.beta,
            AeroVar::Phat => self.phat,
            AeroVar::Qhat => self.qhat,
            AeroVar::Rhat => self.rhat,
            AeroVar::Mach => self.mach,
        }
    }
}

/// One monomial: coefficient times a product of integer powers.
/// `vars` may be empty for a constant term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyTerm {
    pub c: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub vars: BTreeMap<AeroVar, u8>,
}

/// Sum of monomials. An empty list evaluates to zero.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly(pub Vec<PolyTerm>);

impl Poly {
    pub fn constant(c: f64) -> Self {
        Poly(vec![PolyTerm { c, vars: BTreeMap::new() }])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|t| t.c == 0.0)
    }

    pub fn eval(&self, at: &AeroVars) -> f64 {
        let mut acc = 0.0;
        for term in &self.0 {
            let mut m = term.c;
            for (&v, &p) in &term.vars {
                m *= at.get(v).powi(p as i32);
            }
            acc += m;
        }
        acc
    }
}
