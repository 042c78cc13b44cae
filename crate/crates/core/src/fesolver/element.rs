//! Compressible neo-Hookean linear tetrahedron, total-Lagrangian form.
//!
//! Strain energy density with shear modulus G and bulk modulus K:
//!
//! `W(F) = (G/2) (J^(-2/3) I1 - 3) + (K/2) (J - 1)^2`
//!
//! where `F = I + sum_a u_a (grad N_a)^T`, `I1 = tr(F^T F)`, `J = det F`.
//! Shape-function gradients are constant per element, so energy, first
//! Piola-Kirchhoff stress and the tangent come from single-point evaluation
//! scaled by the reference volume. Nodal force on node a is
//! `V0 * P * grad N_a`; the 12x12 tangent is assembled from directional
//! derivatives of P, one per nodal degree of freedom.
//!
//! Any state with `J <= 0` (inverted element) is reported as a simulation
//! error so the solver's line search can back off.

use nalgebra::{Matrix3, Vector3};

use super::Material;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct TetElement {
    /// Global node indices.
    pub nodes: [usize; 4],
    /// Reference volume in m^3, positive.
    pub volume: f64,
    /// Shape-function gradients; `grads[0] = -(grads[1]+grads[2]+grads[3])`.
    grads: [Vector3<f64>; 4],
}

impl TetElement {
    /// Builds the element from reference coordinates. Fails on degenerate or
    /// negatively oriented tetrahedra.
    pub fn new(nodes: [usize; 4], x: [[f64; 3]; 4]) -> Result<TetElement> {
        let p = |i: usize| Vector3::new(x[i][0], x[i][1], x[i][2]);
        let dm = Matrix3::from_columns(&[p(1) - p(0), p(2) - p(0), p(3) - p(0)]);
        let det = dm.determinant();
        let scale = dm.norm();
        if !(det.is_finite() && det > 1e-12 * scale.powi(3).max(f64::MIN_POSITIVE)) {
            return Err(Error::simulation(format!(
                "degenerate or inverted reference tetrahedron (6V = {det:.3e})"
            )));
        }
        let b = dm.try_inverse().ok_or_else(|| {
            Error::simulation("reference edge matrix is numerically singular")
        })?;
        let g1 = Vector3::new(b[(0, 0)], b[(0, 1)], b[(0, 2)]);
        let g2 = Vector3::new(b[(1, 0)], b[(1, 1)], b[(1, 2)]);
        let g3 = Vector3::new(b[(2, 0)], b[(2, 1)], b[(2, 2)]);
        let g0 = -(g1 + g2 + g3);
        Ok(TetElement { nodes, volume: det / 6.0, grads: [g0, g1, g2, g3] })
    }

    pub fn deformation_gradient(&self, u: &[Vector3<f64>; 4]) -> Matrix3<f64> {
        let mut f = Matrix3::identity();
        for a in 0..4 {
            f += u[a] * self.grads[a].transpose();
        }
        f
    }

    /// Stored energy in joules.
    pub fn energy(&self, u: &[Vector3<f64>; 4], m: Material) -> Result<f64> {
        let f = self.deformation_gradient(u);
        Ok(self.volume * strain_energy_density(&f, m)?)
    }

    /// Internal nodal forces (dE/du_a) in newtons.
    pub fn forces(&self, u: &[Vector3<f64>; 4], m: Material) -> Result<[Vector3<f64>; 4]> {
        let f = self.deformation_gradient(u);
        let p = piola(&f, m)?;
        Ok(std::array::from_fn(|a| self.volume * (p * self.grads[a])))
    }

    /// Consistent tangent d f_a / d u_b as a 12x12 row-major block, dof
    /// ordering `(node, component)`.
    pub fn stiffness(&self, u: &[Vector3<f64>; 4], m: Material) -> Result<[[f64; 12]; 12]> {
        let f = self.deformation_gradient(u);
        let ctx = PiolaContext::new(&f, m)?;
        let mut k = [[0.0; 12]; 12];
        for b in 0..4 {
            for j in 0..3 {
                // dF for a unit change of component j of node b.
                let mut ej = Vector3::zeros();
                ej[j] = 1.0;
                let df = ej * self.grads[b].transpose();
                let dp = ctx.differential(&df);
                for a in 0..4 {
                    let dfa = self.volume * (dp * self.grads[a]);
                    for i in 0..3 {
                        k[3 * a + i][3 * b + j] = dfa[i];
                    }
                }
            }
        }
        Ok(k)
    }
}

pub fn strain_energy_density(f: &Matrix3<f64>, m: Material) -> Result<f64> {
    let j = f.determinant();
    if !(j.is_finite() && j > 0.0) {
        return Err(Error::simulation(format!("element inverted (J = {j:.3e})")));
    }
    let i1 = (f.transpose() * f).trace();
    let dev = 0.5 * m.shear_modulus * (j.powf(-2.0 / 3.0) * i1 - 3.0);
    let vol = 0.5 * m.bulk_modulus * (j - 1.0) * (j - 1.0);
    Ok(dev + vol)
}

/// First Piola-Kirchhoff stress `dW/dF`.
pub fn piola(f: &Matrix3<f64>, m: Material) -> Result<Matrix3<f64>> {
    let ctx = PiolaContext::new(f, m)?;
    Ok(ctx.p)
}

/// Cached kinematic quantities for stress and tangent evaluation at one F.
struct PiolaContext {
    m: Material,
    f: Matrix3<f64>,
    f_inv: Matrix3<f64>,
    f_inv_t: Matrix3<f64>,
    j: f64,
    jm23: f64,
    i1: f64,
    p: Matrix3<f64>,
}

impl PiolaContext {
    fn new(f: &Matrix3<f64>, m: Material) -> Result<PiolaContext> {
        let j = f.determinant();
        if !(j.is_finite() && j > 0.0) {
            return Err(Error::simulation(format!("element inverted (J = {j:.3e})")));
        }
        let f_inv = f
            .try_inverse()
            .ok_or_else(|| Error::simulation("deformation gradient numerically singular"))?;
        let f_inv_t = f_inv.transpose();
        let jm23 = j.powf(-2.0 / 3.0);
        let i1 = (f.transpose() * f).trace();
        let p = m.shear_modulus * jm23 * (f - (i1 / 3.0) * f_inv_t)
            + m.bulk_modulus * (j - 1.0) * j * f_inv_t;
        Ok(PiolaContext { m, f: *f, f_inv, f_inv_t, j, jm23, i1, p })
    }

    /// Directional derivative of P along dF.
    fn differential(&self, df: &Matrix3<f64>) -> Matrix3<f64> {
        let tr1 = (self.f_inv * df).trace();
        let fdf = (self.f.transpose() * df).trace(); // F : dF
        let dfinv_t = -self.f_inv_t * df.transpose() * self.f_inv_t;
        let dev = self.m.shear_modulus
            * (-(2.0 / 3.0) * self.jm23 * tr1 * (self.f - (self.i1 / 3.0) * self.f_inv_t)
                + self.jm23
                    * (df - (2.0 / 3.0) * fdf * self.f_inv_t - (self.i1 / 3.0) * dfinv_t));
        let vol = self.m.bulk_modulus
            * self.j
            * ((2.0 * self.j - 1.0) * tr1 * self.f_inv_t + (self.j - 1.0) * dfinv_t);
        dev + vol
    }
}
