//! Test functions `f` whose killed expectations are differentiated.

use crate::error::{Error, Result};
use crate::model::{halton_point, ModelSpec, ProbeBox};

pub trait ScalarField: Send + Sync {
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64], out: &mut [f64]);
}

/// `f(y) = y^1 - L`.
#[derive(Debug, Clone, Copy)]
pub struct Linear1 {
    pub level: f64,
}

impl ScalarField for Linear1 {
    fn value(&self, y: &[f64]) -> f64 {
        y[0] - self.level
    }
    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = 1.0;
    }
}

/// `f(y) = 1 - exp(-(y^1 - L))`.
#[derive(Debug, Clone, Copy)]
pub struct ExpSat {
    pub level: f64,
}

impl ScalarField for ExpSat {
    fn value(&self, y: &[f64]) -> f64 {
        -(-(y[0] - self.level)).exp_m1()
    }
    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = (-(y[0] - self.level)).exp();
    }
}

/// `f(y) = (1 - exp(-(y^1 - L))) cos(y^2)`.
#[derive(Debug, Clone, Copy)]
pub struct Product2d {
    pub level: f64,
}

impl ScalarField for Product2d {
    fn value(&self, y: &[f64]) -> f64 {
        -(-(y[0] - self.level)).exp_m1() * y[1].cos()
    }
    fn gradient(&self, y: &[f64], out: &mut [f64]) {
        let e = (-(y[0] - self.level)).exp();
        out[0] = e * y[1].cos();
        out[1] = -(1.0 - e) * y[1].sin();
        out[2..].fill(0.0);
    }
}

/// A constant function. Only the zero constant vanishes on the boundary.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl ScalarField for Constant {
    fn value(&self, _: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub const FUNCTION_NAMES: [&str; 3] = ["linear1", "expsat", "product2d"];

pub fn registry_function(name: &str, level: f64, dim: usize) -> Result<Box<dyn ScalarField>> {
    match name {
        "linear1" => Ok(Box::new(Linear1 { level })),
        "expsat" => Ok(Box::new(ExpSat { level })),
        "product2d" if dim >= 2 => Ok(Box::new(Product2d { level })),
        "product2d" => Err(Error::Config(
            "product2d needs a model of dimension at least 2".into(),
        )),
        other => Err(Error::Config(format!(
            "unknown function '{other}' (expected one of {})",
            FUNCTION_NAMES.join(", ")
        ))),
    }
}

/// Largest `|f|` tolerated on the boundary by the gradient estimators.
pub const BOUNDARY_VALUE_TOLERANCE: f64 = 1e-12;

/// Checks that `f` vanishes at deterministic probes of the boundary hyperplane.
pub fn check_boundary_contract(spec: &ModelSpec, f: &dyn ScalarField) -> Result<()> {
    let bx = ProbeBox::around_boundary(spec);
    for i in 0..32 {
        let mut y = halton_point(&bx, i);
        y[0] = spec.level();
        let v = f.value(&y);
        if !(v.abs() <= BOUNDARY_VALUE_TOLERANCE) {
            return Err(Error::Contract(format!(
                "f must vanish on the boundary, found f({y:?}) = {v}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_central_differences() {
        let fields: Vec<Box<dyn ScalarField>> = FUNCTION_NAMES
            .iter()
            .map(|n| registry_function(n, 0.25, 2).unwrap())
            .collect();
        let y = [0.9, -0.7];
        let h = 1e-6;
        for f in &fields {
            let mut g = [0.0; 2];
            f.gradient(&y, &mut g);
            for j in 0..2 {
                let mut up = y;
                let mut dn = y;
                up[j] += h;
                dn[j] -= h;
                let fd = (f.value(&up) - f.value(&dn)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn registry_functions_vanish_on_boundary() {
        for name in FUNCTION_NAMES {
            let f = registry_function(name, -0.5, 2).unwrap();
            for y2 in [-2.0, 0.0, 1.3] {
                assert_eq!(f.value(&[-0.5, y2]), 0.0);
            }
        }
    }

    #[test]
    fn boundary_contract() {
        let spec = crate::model::registry_model("intro2d", 1.0, 0.0).unwrap();
        for name in FUNCTION_NAMES {
            check_boundary_contract(&spec, registry_function(name, 0.0, 2).unwrap().as_ref())
                .unwrap();
        }
        assert!(matches!(
            check_boundary_contract(&spec, &Constant(1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn product2d_rejects_one_dimension() {
        assert!(registry_function("product2d", 0.0, 1).is_err());
    }
}
