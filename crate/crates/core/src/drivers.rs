//! Generators of the ergodic BSDEs: the three homothetic-utility drivers,
//! the two z-free benchmark drivers, convex-set projections, the market
//! price of risk, and the truncation/bound constants.

use crate::sde::FactorModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid driver: {0}")]
    Invalid(String),
    #[error("Z bound unavailable: C_v = {c_v} >= C_mu = {c_mu}")]
    BoundUnavailable { c_v: f64, c_mu: f64 },
}

/// Closed convex constraint set for the strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConvexSet {
    Full,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Coordinate subspace: all coordinates outside `free` are zeroed.
    AxisSubspace { free: Vec<usize> },
}

impl ConvexSet {
    pub fn validate(&self, dims: usize) -> Result<(), DriverError> {
        match self {
            ConvexSet::Full => Ok(()),
            ConvexSet::Box { lo, hi } => {
                if lo.len() != dims || hi.len() != dims {
                    return Err(DriverError::Invalid("box bounds must match dims".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(DriverError::Invalid("box requires lo <= hi".into()));
                }
                Ok(())
            }
            ConvexSet::AxisSubspace { free } => {
                if free.iter().any(|&i| i >= dims) {
                    return Err(DriverError::Invalid("free coordinate out of range".into()));
                }
                Ok(())
            }
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ConvexSet::Full => x.to_vec(),
            ConvexSet::Box { lo, hi } => {
                x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
            }
            ConvexSet::AxisSubspace { free } => {
                x.iter().enumerate().map(|(i, v)| if free.contains(&i) { *v } else { 0.0 }).collect()
            }
        }
    }

    /// Squared distance to the set.
    pub fn dist2(&self, x: &[f64]) -> f64 {
        let p = self.project(x);
        x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Distance of the origin to the set.
    fn origin_dist(&self, dims: usize) -> f64 {
        self.dist2(&vec![0.0; dims]).sqrt()
    }
}

/// Market price of risk map `theta(v)`.
///
/// The scalar truncated-linear map is embedded as the first coordinate of a
/// d-vector with zeros elsewhere; only the first Brownian coordinate prices
/// risk, as in the two-dimensional constrained setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RiskPremium {
    /// `clamp(slope * v, -bound, bound)` in coordinate 0.
    TruncatedLinear { slope: f64, bound: f64 },
    Constant(Vec<f64>),
}

impl RiskPremium {
    pub fn eval(&self, v: f64, dims: usize) -> Vec<f64> {
        let mut out = vec![0.0; dims];
        self.eval_into(v, &mut out);
        out
    }

    /// Allocation-free variant for hot loops.
    pub fn eval_into(&self, v: f64, out: &mut [f64]) {
        match self {
            RiskPremium::TruncatedLinear { slope, bound } => {
                out.fill(0.0);
                out[0] = (slope * v).clamp(-bound, *bound);
            }
            RiskPremium::Constant(c) => {
                debug_assert_eq!(c.len(), out.len());
                out.copy_from_slice(c);
            }
        }
    }

    /// `sup_v ||theta(v)||`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            RiskPremium::TruncatedLinear { bound, .. } => *bound,
            RiskPremium::Constant(c) => c.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Lipschitz constant of `v -> theta(v)` (the clamp is non-expansive).
    pub fn lipschitz(&self) -> f64 {
        match self {
            RiskPremium::TruncatedLinear { slope, .. } => slope.abs(),
            RiskPremium::Constant(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriverKind {
    Log,
    Exp { gamma: f64 },
    Power { delta: f64 },
    Example1 { c_v: f64 },
    Example2 { c_v: f64 },
}

/// A fully specified generator `F(v, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub kind: DriverKind,
    pub constraint: ConvexSet,
    pub theta: RiskPremium,
    pub dims: usize,
}

/// The growth/Lipschitz constants of a driver paired with a factor model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverBounds {
    /// `sup_v |F(v, 0)|`.
    pub k: f64,
    /// `||kappa|| C_v / (C_mu - C_v)`.
    pub z_max: f64,
    pub c_v: f64,
    pub c_z: f64,
}

impl Driver {
    pub fn new(
        kind: DriverKind,
        constraint: ConvexSet,
        theta: RiskPremium,
        dims: usize,
    ) -> Result<Self, DriverError> {
        match kind {
            DriverKind::Exp { gamma } if !(0.0 < gamma && gamma < 1.0) => {
                return Err(DriverError::Invalid(format!("gamma must be in (0,1), got {gamma}")))
            }
            DriverKind::Power { delta } if !(0.0 < delta && delta < 1.0) => {
                return Err(DriverError::Invalid(format!("delta must be in (0,1), got {delta}")))
            }
            _ => {}
        }
        constraint.validate(dims)?;
        if let RiskPremium::Constant(c) = &theta {
            if c.len() != dims {
                return Err(DriverError::Invalid("constant theta must match dims".into()));
            }
        }
        Ok(Driver { kind, constraint, theta, dims })
    }

    pub fn example1(c_v: f64) -> Self {
        Driver {
            kind: DriverKind::Example1 { c_v },
            constraint: ConvexSet::Full,
            theta: RiskPremium::Constant(vec![0.0]),
            dims: 1,
        }
    }

    pub fn example2(c_v: f64) -> Self {
        Driver {
            kind: DriverKind::Example2 { c_v },
            constraint: ConvexSet::Full,
            theta: RiskPremium::Constant(vec![0.0]),
            dims: 1,
        }
    }

    pub fn depends_on_z(&self) -> bool {
        matches!(self.kind, DriverKind::Exp { .. } | DriverKind::Power { .. })
    }

    pub fn theta_at(&self, v: f64) -> Vec<f64> {
        self.theta.eval(v, self.dims)
    }

    /// `F(v, z)`.
    pub fn eval(&self, v: f64, z: &[f64]) -> f64 {
        match self.kind {
            DriverKind::Log => {
                let th = self.theta_at(v);
                -0.5 * self.constraint.dist2(&th) + 0.5 * sq_norm(&th)
            }
            DriverKind::Exp { gamma } => {
                let th = self.theta_at(v);
                let zt: Vec<f64> = z.iter().zip(&th).map(|(a, b)| a + b).collect();
                let arg: Vec<f64> = zt.iter().map(|x| x / gamma).collect();
                0.5 * gamma * gamma * self.constraint.dist2(&arg) - 0.5 * sq_norm(&zt)
                    + 0.5 * sq_norm(z)
            }
            DriverKind::Power { delta } => {
                let th = self.theta_at(v);
                let tz: Vec<f64> = th.iter().zip(z).map(|(a, b)| a + b).collect();
                let arg: Vec<f64> = tz.iter().map(|x| x / (1.0 - delta)).collect();
                0.5 * delta * (delta - 1.0) * self.constraint.dist2(&arg)
                    + delta / (2.0 * (1.0 - delta)) * sq_norm(&tz)
                    + 0.5 * sq_norm(z)
            }
            DriverKind::Example1 { c_v } => c_v * v * (-0.5 * v * v).exp(),
            DriverKind::Example2 { c_v } => c_v * v.abs() * (-0.5 * v * v).exp(),
        }
    }

    /// Gradient of `F(v, .)` at `z`.
    pub fn grad_z(&self, v: f64, z: &[f64]) -> Vec<f64> {
        match self.kind {
            DriverKind::Log | DriverKind::Example1 { .. } | DriverKind::Example2 { .. } => {
                vec![0.0; self.dims]
            }
            DriverKind::Exp { gamma } => {
                // grad = z - gamma * Proj((z + theta)/gamma)
                let th = self.theta_at(v);
                let arg: Vec<f64> = z.iter().zip(&th).map(|(a, b)| (a + b) / gamma).collect();
                let p = self.constraint.project(&arg);
                z.iter().zip(&p).map(|(zi, pi)| zi - gamma * pi).collect()
            }
            DriverKind::Power { delta } => {
                // grad = -delta (x - Proj(x)) + delta/(1-delta) (theta + z) + z,
                // with x = (theta + z)/(1-delta).
                let th = self.theta_at(v);
                let tz: Vec<f64> = th.iter().zip(z).map(|(a, b)| a + b).collect();
                let x: Vec<f64> = tz.iter().map(|t| t / (1.0 - delta)).collect();
                let p = self.constraint.project(&x);
                (0..self.dims)
                    .map(|i| -delta * (x[i] - p[i]) + delta / (1.0 - delta) * tz[i] + z[i])
                    .collect()
            }
        }
    }

    /// `K = sup_v |F(v, 0)|`, maximized on a dense mesh for the utility
    /// drivers (`theta` is bounded, so `F(., 0)` is too); analytic for the
    /// benchmark drivers.
    pub fn sup_f0(&self) -> f64 {
        match self.kind {
            DriverKind::Example1 { c_v } | DriverKind::Example2 { c_v } => {
                // |v| e^{-v^2/2} peaks at |v| = 1.
                c_v.abs() * (-0.5f64).exp()
            }
            _ => {
                let zero = vec![0.0; self.dims];
                let n = 40_000usize;
                let (lo, hi) = (-20.0, 20.0);
                let mut k: f64 = 0.0;
                for i in 0..=n {
                    let v = lo + (hi - lo) * i as f64 / n as f64;
                    k = k.max(self.eval(v, &zero).abs());
                }
                k
            }
        }
    }

    /// Lipschitz constants `(C_v, C_z)` of the driver, from the gradient
    /// bounds of the quadratic forms and the boundedness of `theta`.
    pub fn lipschitz(&self) -> (f64, f64) {
        let b = self.theta.sup_norm();
        let l_th = self.theta.lipschitz();
        let d0 = self.constraint.origin_dist(self.dims);
        match self.kind {
            DriverKind::Log => (l_th * (2.0 * b + d0), 0.0),
            DriverKind::Exp { gamma } => {
                let c_v = l_th * (gamma * d0 + 2.0 * b).max(2.0);
                let c_z = (gamma * d0 + b).max(2.0);
                (c_v, c_z)
            }
            DriverKind::Power { delta } => {
                let r = delta / (1.0 - delta);
                let c_v = l_th * (delta * d0 + 2.0 * r * b).max(2.0 * r);
                let c_z = (delta * d0 + 2.0 * r * b).max((1.0 + delta) / (1.0 - delta));
                (c_v, c_z)
            }
            DriverKind::Example1 { c_v } | DriverKind::Example2 { c_v } => (c_v.abs(), 0.0),
        }
    }

    /// The four constants `(K, Z_max, C_v, C_z)` for this driver paired with
    /// `model`; fails when `C_v >= C_mu`.
    pub fn bounds(&self, model: &FactorModel) -> Result<DriverBounds, DriverError> {
        let (c_v, c_z) = self.lipschitz();
        if c_v >= model.c_mu {
            return Err(DriverError::BoundUnavailable { c_v, c_mu: model.c_mu });
        }
        let z_max = model.kappa_norm() * c_v / (model.c_mu - c_v);
        Ok(DriverBounds { k: self.sup_f0(), z_max, c_v, c_z })
    }
}

/// Projection of `z` onto the centered ball of radius `z_max`.
pub fn truncate_z(z: &[f64], z_max: f64) -> Vec<f64> {
    let r = sq_norm(z).sqrt();
    if r <= z_max {
        z.to_vec()
    } else {
        z.iter().map(|x| x * z_max / r).collect()
    }
}

/// Applies the (symmetric) Jacobian of the ball projection at `z` to `g`.
///
/// Identity inside the ball; `(z_max/r)(I - u u^T)` with `u = z/r` outside.
pub fn truncate_z_jacobian_apply(z: &[f64], z_max: f64, g: &[f64]) -> Vec<f64> {
    let r = sq_norm(z).sqrt();
    if r <= z_max {
        return g.to_vec();
    }
    let dot: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
    let scale = z_max / r;
    z.iter().zip(g).map(|(zi, gi)| scale * (gi - zi * dot / (r * r))).collect()
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}
