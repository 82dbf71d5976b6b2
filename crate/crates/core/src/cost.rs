//! Physical constants, the geopotential and the transport cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{e3_cross, sub, GridDensity, PhysicalDomain, PointMap, Vec3};

/// Dimensional gas constants. Only needed when the user wants `K1` derived
/// from them or dimensional pressure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasConstants {
    pub r_gas: f64,
    pub c_p: f64,
    pub c_v: f64,
    pub p_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub kappa: f64,
    pub k1: f64,
    pub f_cor: f64,
    pub gas: Option<GasConstants>,
}

pub const KAPPA_AIR: f64 = 1.4;

impl Default for Constants {
    fn default() -> Self {
        Self {
            kappa: KAPPA_AIR,
            k1: 1.0,
            f_cor: 1.0,
            gas: None,
        }
    }
}

impl Constants {
    /// Builds and validates a constants block.
    ///
    /// With gas constants present, `K1 = c_v (R/p_ref)^(kappa-1)` is derived and
    /// an explicitly supplied `k1` must agree with it to 1e-9 relative.
    pub fn new(kappa: f64, k1: Option<f64>, gas: Option<GasConstants>) -> Result<Self> {
        let mut problems = Vec::new();
        if !(kappa > 1.0 && kappa.is_finite()) {
            problems.push(format!("kappa must exceed 1, got {kappa}"));
        }
        let mut derived = None;
        if let Some(g) = gas {
            if !(g.c_v > 0.0 && g.c_p > g.c_v && g.p_ref > 0.0 && g.r_gas > 0.0) {
                problems.push(format!(
                    "gas constants must satisfy c_p > c_v > 0, R > 0, p_ref > 0 (got c_p={}, c_v={}, R={}, p_ref={})",
                    g.c_p, g.c_v, g.r_gas, g.p_ref
                ));
            } else {
                let r = g.c_p - g.c_v;
                if (g.r_gas - r).abs() > 1e-9 * r.abs() {
                    problems.push(format!("R = {} does not equal c_p - c_v = {r}", g.r_gas));
                }
                derived = Some(g.c_v * (g.r_gas / g.p_ref).powf(kappa - 1.0));
            }
        }
        let k1 = match (k1, derived) {
            (Some(given), Some(d)) => {
                if (given - d).abs() > 1e-9 * d.abs() {
                    problems.push(format!(
                        "K1 = {given} is inconsistent with c_v (R/p_ref)^(kappa-1) = {d}"
                    ));
                }
                given
            }
            (Some(given), None) => given,
            (None, Some(d)) => d,
            (None, None) => 1.0,
        };
        if !(k1 > 0.0 && k1.is_finite()) {
            problems.push(format!("K1 must be positive, got {k1}"));
        }
        if !problems.is_empty() {
            return Err(Error::Parameter(problems.join("; ")));
        }
        Ok(Self {
            kappa,
            k1,
            f_cor: 1.0,
            gas,
        })
    }

    /// `(R, p_ref)` for the equation of state; `(1, 1)` in nondimensional mode.
    pub fn state_constants(&self) -> (f64, f64) {
        match self.gas {
            Some(g) => (g.r_gas, g.p_ref),
            None => (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Geopotential {
    /// `phi = g x3`
    Linear { g: f64 },
    /// `phi = g x3 + beta (x1^2 + x2^2) / 2`
    Quadratic { g: f64, beta: f64 },
}

impl Default for Geopotential {
    fn default() -> Self {
        Geopotential::Linear { g: 1.0 }
    }
}

impl Geopotential {
    #[inline]
    pub fn value(&self, x: Vec3) -> f64 {
        match *self {
            Geopotential::Linear { g } => g * x[2],
            Geopotential::Quadratic { g, beta } => g * x[2] + 0.5 * beta * (x[0] * x[0] + x[1] * x[1]),
        }
    }

    #[inline]
    pub fn gradient(&self, x: Vec3) -> Vec3 {
        match *self {
            Geopotential::Linear { g } => [0.0, 0.0, g],
            Geopotential::Quadratic { g, beta } => [beta * x[0], beta * x[1], g],
        }
    }

    /// The vertical derivative must not vanish on any cell center.
    pub fn validate_on(&self, domain: &PhysicalDomain) -> Result<()> {
        for (i, c) in domain.centers().iter().enumerate() {
            let d3 = self.gradient(*c)[2];
            if !(d3.is_finite() && d3 != 0.0) {
                return Err(Error::Parameter(format!(
                    "geopotential has vanishing vertical derivative at cell {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Cost without the `y3 > 0` check, for inner loops over validated data.
#[inline]
pub fn cost_unchecked(x: Vec3, y: Vec3, phi: &Geopotential) -> f64 {
    let d1 = x[0] - y[0];
    let d2 = x[1] - y[1];
    (0.5 * (d1 * d1 + d2 * d2) + phi.value(x)) / y[2]
}

fn check_y3(y: Vec3) -> Result<()> {
    if !(y[2] > 0.0) {
        return Err(Error::Domain(format!("y3 = {} must be positive", y[2])));
    }
    Ok(())
}

pub fn cost(x: Vec3, y: Vec3, phi: &Geopotential) -> Result<f64> {
    check_y3(y)?;
    Ok(cost_unchecked(x, y, phi))
}

pub fn grad_y_cost(x: Vec3, y: Vec3, phi: &Geopotential) -> Result<Vec3> {
    check_y3(y)?;
    let c = cost_unchecked(x, y, phi);
    Ok([-(x[0] - y[0]) / y[2], -(x[1] - y[1]) / y[2], -c / y[2]])
}

pub fn grad_x_cost(x: Vec3, y: Vec3, phi: &Geopotential) -> Result<Vec3> {
    check_y3(y)?;
    let gp = phi.gradient(x);
    Ok([(x[0] - y[0] + gp[0]) / y[2], (x[1] - y[1] + gp[1]) / y[2], gp[2] / y[2]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermoState {
    pub theta: f64,
    pub rho: f64,
    pub p: f64,
    pub ug: Vec3,
}

pub fn recover_thermodynamics(
    sigma: &GridDensity,
    t_map: &PointMap,
    constants: &Constants,
) -> Result<Vec<ThermoState>> {
    let domain = sigma.domain();
    let (r, p_ref) = constants.state_constants();
    let k = constants.kappa;
    let coef = r.powf(k) * p_ref.powf(1.0 - k);
    let mut out = Vec::with_capacity(domain.num_cells());
    for (i, (x, s)) in domain.centers().iter().zip(sigma.values()).enumerate() {
        let t = t_map.get(i)?;
        if !(t[2] > 0.0) {
            return Err(Error::Physicality(format!(
                "T3 = {} at cell {i}; potential temperature must be positive",
                t[2]
            )));
        }
        let theta = t[2];
        let rho = s / theta;
        let p = coef * (rho * theta).powf(k);
        let ug = e3_cross(sub(t, *x));
        out.push(ThermoState { theta, rho, p, ug });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PhysicalDomain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    const ZERO: Geopotential = Geopotential::Linear { g: 0.0 };
    const LIN: Geopotential = Geopotential::Linear { g: 1.0 };

    #[test]
    fn cost_examples() {
        assert_eq!(cost([0.0; 3], [0.0, 0.0, 1.0], &ZERO).unwrap(), 0.0);
        assert_eq!(cost([0.0, 0.0, 0.5], [0.0, 0.0, 1.0], &LIN).unwrap(), 0.5);
        assert_eq!(cost([1.0, 0.0, 0.0], [0.0, 0.0, 2.0], &LIN).unwrap(), 0.25);
        assert!(matches!(cost([0.0; 3], [0.0; 3], &LIN), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_examples() {
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 0.0, 2.0];
        // The horizontal y-derivative of (x1 - y1)^2 / (2 y3) is -(x1 - y1)/y3.
        assert_eq!(grad_y_cost(x, y, &LIN).unwrap(), [-0.5, 0.0, -0.125]);
        assert_eq!(grad_x_cost(x, y, &LIN).unwrap(), [0.5, 0.0, 0.5]);
        let same = [0.3, 0.7, 1.0];
        assert_eq!(grad_y_cost([0.3, 0.7, 0.2], same, &ZERO).unwrap(), [0.0, 0.0, 0.0]);
        assert_eq!(grad_x_cost([0.3, 0.7, 0.2], same, &ZERO).unwrap(), [0.0, 0.0, 0.0]);
    }

    fn fd_check(rng: &mut ChaCha8Rng, phi: &Geopotential) {
        let h = 1e-6;
        let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let y = [
            rng.random_range(-1.0..2.0),
            rng.random_range(-1.0..2.0),
            rng.random_range(0.5..2.0),
        ];
        let gy = grad_y_cost(x, y, phi).unwrap();
        let gx = grad_x_cost(x, y, phi).unwrap();
        let scale = 1.0 + gy.iter().chain(gx.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[a] += h;
            ym[a] -= h;
            let fd = (cost(x, yp, phi).unwrap() - cost(x, ym, phi).unwrap()) / (2.0 * h);
            assert!((fd - gy[a]).abs() <= 1e-7 * scale, "y axis {a}: {fd} vs {}", gy[a]);
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let fd = (cost(xp, y, phi).unwrap() - cost(xm, y, phi).unwrap()) / (2.0 * h);
            assert!((fd - gx[a]).abs() <= 1e-7 * scale, "x axis {a}: {fd} vs {}", gx[a]);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let quad = Geopotential::Quadratic { g: 1.0, beta: 0.7 };
        for _ in 0..1000 {
            fd_check(&mut rng, &LIN);
            fd_check(&mut rng, &quad);
        }
    }

    #[test]
    fn cost_is_locally_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let y = [rng.random::<f64>(), rng.random::<f64>(), rng.random_range(0.5..2.0)];
            let c0 = cost(x, y, &LIN).unwrap();
            // Lower bound from phi >= 0 on the unit box.
            assert!(c0 >= 0.0);
            let e = 1e-7;
            let c1 = cost([x[0] + e, x[1], x[2] - e], [y[0], y[1] + e, y[2] + e], &LIN).unwrap();
            assert!((c1 - c0).abs() <= 50.0 * e);
        }
    }

    #[test]
    fn constants_validation() {
        assert!(Constants::new(0.9, None, None).is_err());
        let c = Constants::new(1.4, None, None).unwrap();
        assert_eq!(c.k1, 1.0);
        assert_eq!(c.f_cor, 1.0);
        let gas = GasConstants {
            r_gas: 287.0,
            c_p: 1004.0,
            c_v: 717.0,
            p_ref: 1.0e5,
        };
        let derived = Constants::new(1.4, None, Some(gas)).unwrap();
        let expect = 717.0 * (287.0f64 / 1.0e5).powf(1.4 - 1.0);
        assert!((derived.k1 - expect).abs() <= 1e-12 * expect);
        assert!(Constants::new(1.4, Some(expect * (1.0 + 1e-12)), Some(gas)).is_ok());
        let err = Constants::new(1.4, Some(1.0), Some(gas)).unwrap_err().to_string();
        assert!(err.contains("K1 = 1") && err.contains(&format!("{expect}")));
        let bad_r = GasConstants { r_gas: 280.0, ..gas };
        assert!(Constants::new(1.4, None, Some(bad_r)).is_err());
    }

    #[test]
    fn thermodynamics_examples() {
        let d = Arc::new(PhysicalDomain::unit_cube(2).unwrap());
        let sigma = GridDensity::uniform(d.clone());
        let c = Constants::default();
        let flat = PointMap::new(d.centers().iter().map(|x| [x[0], x[1], 1.0]).collect());
        for s in recover_thermodynamics(&sigma, &flat, &c).unwrap() {
            assert_eq!(s.theta, 1.0);
            assert_eq!(s.rho, 1.0);
            assert_eq!(s.ug, [0.0, 0.0, 0.0]);
        }
        let shifted = PointMap::new(d.centers().iter().map(|x| [x[0] + 1.0, x[1], 1.0]).collect());
        for s in recover_thermodynamics(&sigma, &shifted, &c).unwrap() {
            assert_eq!(s.ug, [0.0, 1.0, 0.0]);
        }
        let bad = PointMap::new(vec![[0.0, 0.0, 0.0]; 8]);
        assert!(matches!(
            recover_thermodynamics(&sigma, &bad, &c),
            Err(Error::Physicality(_))
        ));
    }

    #[test]
    fn pressure_hand_value() {
        // R = 1, p_ref = 1, kappa = 2, rho theta = 2 gives p = 4.
        let d = Arc::new(PhysicalDomain::new([0.0; 3], [0.5, 1.0, 1.0], [1, 1, 1]).unwrap());
        let sigma = GridDensity::new(d.clone(), vec![2.0]).unwrap();
        let c = Constants::new(2.0, None, None).unwrap();
        let t = PointMap::new(vec![[0.0, 0.0, 4.0]]);
        let s = recover_thermodynamics(&sigma, &t, &c).unwrap()[0];
        assert!((s.p - 4.0).abs() < 1e-14);
    }

    #[test]
    fn equation_of_state_holds_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Arc::new(PhysicalDomain::unit_cube(3).unwrap());
        let raw: Vec<f64> = (0..27).map(|_| rng.random_range(0.1..2.0)).collect();
        let m: f64 = raw.iter().zip(d.volumes()).map(|(v, w)| v * w).sum();
        let sigma = GridDensity::new(d.clone(), raw.iter().map(|v| v / m).collect()).unwrap();
        let t = PointMap::new(
            (0..27)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random_range(0.5..2.0)])
                .collect(),
        );
        let gas = GasConstants {
            r_gas: 287.0,
            c_p: 1004.0,
            c_v: 717.0,
            p_ref: 1.0e5,
        };
        for consts in [Constants::default(), Constants::new(1.4, None, Some(gas)).unwrap()] {
            let (r, p_ref) = consts.state_constants();
            let k = consts.kappa;
            for s in recover_thermodynamics(&sigma, &t, &consts).unwrap() {
                let rhs = r * s.rho * s.theta * (s.p / p_ref).powf((k - 1.0) / k);
                assert!((s.p - rhs).abs() <= 1e-10 * s.p.abs());
            }
        }
    }
}
