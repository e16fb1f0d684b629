//! Multivariate polynomials used by the built-in metrics.

use serde::{Deserialize, Serialize};

/// `Σ coef · Π xᵢ^{powᵢ}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial { terms: vec![(c, vec![])] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, pw)| c * pw.iter().enumerate().map(|(i, &p)| x[i].powi(p as i32)).product::<f64>())
            .sum()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (c, pw) in &self.terms {
            for (k, gk) in g.iter_mut().enumerate() {
                let pk = pw.get(k).copied().unwrap_or(0);
                if pk == 0 {
                    continue;
                }
                let mut t = c * pk as f64;
                for (i, &p) in pw.iter().enumerate() {
                    let e = if i == k { p - 1 } else { p };
                    t *= x[i].powi(e as i32);
                }
                *gk += t;
            }
        }
        g
    }
}
