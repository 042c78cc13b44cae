//! Independent correctness checks for the solver.
//!
//! Each check compares the finite-element route against a route that never
//! touches the assembly or Newton code:
//!
//! * patch test: a linear displacement field prescribed on the boundary must
//!   be reproduced exactly at interior nodes (constant-stress states are in
//!   the element space);
//! * uniaxial stretch: with the axial stretch prescribed on two faces and
//!   free lateral faces, the lateral contraction must match the root of the
//!   one-dimensional energy derivative, found here by bisection;
//! * rigid motion: finite rotation plus translation stores no energy and
//!   produces no internal force;
//! * finite differences: assembled forces against central differences of the
//!   energy, and the analytic tangent against central differences of the
//!   forces, on a two-element mesh.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use super::element::TetElement;
use super::{solve_with_dirichlet, Material, MaterialSet, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::structured_grid;
use crate::rng::rng_from_seed;
use rand::Rng;

/// Interior nodal error bound for the patch test, in metres.
pub const PATCH_TOLERANCE_M: f64 = 1e-9;
/// Relative nodal error bound for the uniaxial check.
pub const UNIAXIAL_REL_TOLERANCE: f64 = 1e-6;
/// Relative bound for assembled energy against the closed-form density at a
/// homogeneous deformation.
pub const ENERGY_REL_TOLERANCE: f64 = 1e-8;
/// Rigid-motion energy bound relative to `G * V`.
pub const RIGID_ENERGY_REL_TOLERANCE: f64 = 1e-12;
/// Rigid-motion force bound relative to `G * V^(2/3)`.
pub const RIGID_FORCE_REL_TOLERANCE: f64 = 1e-10;
/// Aggregate force-vs-energy finite-difference bound.
pub const FORCE_FD_REL_TOLERANCE: f64 = 1e-6;
/// Aggregate tangent-vs-force finite-difference bound.
pub const TANGENT_FD_REL_TOLERANCE: f64 = 1e-5;

const MAT: Material = Material { shear_modulus: 5_000.0, bulk_modulus: 50_000.0 };

fn uniform(m: Material) -> MaterialSet {
    MaterialSet { background: m, whole_gland: m, central_zone: m, bone: m }
}

/// Derivative of the uniaxial energy density with respect to the lateral
/// stretch at `F = diag(lat, lat, axial)`.
fn d_energy_d_lateral(axial: f64, lat: f64, m: Material) -> f64 {
    let j = lat * lat * axial;
    let i1 = 2.0 * lat * lat + axial * axial;
    let dj = 2.0 * lat * axial;
    let di1 = 4.0 * lat;
    0.5 * m.shear_modulus * (j.powf(-2.0 / 3.0) * di1 - (2.0 / 3.0) * j.powf(-5.0 / 3.0) * dj * i1)
        + m.bulk_modulus * (j - 1.0) * dj
}

/// Lateral stretch that equilibrates a uniaxial axial stretch: the root of
/// the one-dimensional energy derivative, by bisection. Independent of the
/// solver and of the stress implementation.
pub fn uniaxial_lateral_stretch(axial: f64, m: Material) -> Result<f64> {
    if !(axial.is_finite() && axial > 0.0) {
        return Err(Error::config(format!("axial stretch must be positive, got {axial}")));
    }
    let (mut lo, mut hi) = (1e-2, 10.0);
    let (flo, fhi) = (d_energy_d_lateral(axial, lo, m), d_energy_d_lateral(axial, hi, m));
    if flo.signum() == fhi.signum() {
        return Err(Error::internal("uniaxial bracket does not straddle the root"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = d_energy_d_lateral(axial, mid, m);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Patch test outcome: worst interior deviation from the linear field.
pub fn patch_test() -> Result<f64> {
    patch_test_with_resolution([4, 4, 4])
}

/// Patch test on a cube split `resolution` cells per axis; every axis needs
/// at least 2 cells so an interior node exists.
pub fn patch_test_with_resolution(resolution: [usize; 3]) -> Result<f64> {
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::config("patch test needs at least 2 cells per axis"));
    }
    let l = 0.05;
    let mesh = structured_grid([l; 3], resolution);
    // Fixed small displacement gradient; any constant gradient is exact.
    let a = Matrix3::new(0.03, 0.012, -0.008, 0.006, -0.02, 0.01, -0.004, 0.009, 0.025);
    let field = |p: [f64; 3]| a * Vector3::new(p[0], p[1], p[2]);

    let on_boundary = |p: [f64; 3]| p.iter().any(|&c| c <= 0.0 || c >= l - 1e-12);
    let dirichlet: Vec<Option<[f64; 3]>> = mesh
        .nodes
        .iter()
        .map(|&p| on_boundary(p).then(|| { let u = field(p); [u[0], u[1], u[2]] }))
        .collect();

    let sol = solve_with_dirichlet(&mesh, &uniform(MAT), &dirichlet, &SolverConfig::default())?;
    let mut worst = 0.0f64;
    for (n, d) in dirichlet.iter().enumerate() {
        if d.is_some() {
            continue;
        }
        let u = sol.displacements[n];
        let exact = field(mesh.nodes[n]);
        let e = (Vector3::new(u[0], u[1], u[2]) - exact).norm();
        worst = worst.max(e);
    }
    Ok(worst)
}

pub struct UniaxialOutcome {
    pub max_rel_error: f64,
    pub lateral_stretch: f64,
}

/// Uniaxial stretch check on a cube of edge `l`: axial stretch prescribed
/// through the z faces, lateral faces free. `lateral_override` substitutes a
/// deliberately wrong reference to show the check has teeth; `None` uses the
/// bisection oracle.
pub fn uniaxial_check(
    axial: f64,
    m: Material,
    l: f64,
    lateral_override: Option<f64>,
) -> Result<UniaxialOutcome> {
    let mesh = structured_grid([l; 3], [4, 4, 4]);
    let lat = match lateral_override {
        Some(v) => v,
        None => uniaxial_lateral_stretch(axial, m)?,
    };
    let exact = |p: [f64; 3]| [(lat - 1.0) * p[0], (lat - 1.0) * p[1], (axial - 1.0) * p[2]];

    let dirichlet: Vec<Option<[f64; 3]>> = mesh
        .nodes
        .iter()
        .map(|&p| (p[2] <= 0.0 || p[2] >= l * (1.0 - 1e-12)).then(|| exact(p)))
        .collect();

    let sol = solve_with_dirichlet(&mesh, &uniform(m), &dirichlet, &SolverConfig::default())?;
    let mut worst = 0.0f64;
    for (n, d) in dirichlet.iter().enumerate() {
        if d.is_some() {
            continue;
        }
        let u = sol.displacements[n];
        let e = exact(mesh.nodes[n]);
        let diff = ((u[0] - e[0]).powi(2) + (u[1] - e[1]).powi(2) + (u[2] - e[2]).powi(2)).sqrt();
        let mag = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        worst = worst.max(diff / mag);
    }
    Ok(UniaxialOutcome { max_rel_error: worst, lateral_stretch: lat })
}

/// Assembled strain energy of a unit cube under the homogeneous uniaxial
/// state `F = diag(lat, lat, axial)` against the closed-form density, as a
/// relative error. The element space contains homogeneous states exactly, so
/// any discrepancy is an assembly bug.
pub fn homogeneous_energy_error(axial: f64, m: Material) -> Result<f64> {
    let lat = uniaxial_lateral_stretch(axial, m)?;
    let mesh = structured_grid([1.0; 3], [1, 1, 1]);
    let mut total = 0.0;
    for t in &mesh.tets {
        let idx = [t[0] as usize, t[1] as usize, t[2] as usize, t[3] as usize];
        let el = TetElement::new(idx, std::array::from_fn(|a| mesh.nodes[idx[a]]))?;
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| {
            let p = mesh.nodes[idx[a]];
            Vector3::new((lat - 1.0) * p[0], (lat - 1.0) * p[1], (axial - 1.0) * p[2])
        });
        total += el.energy(&ue, m)?;
    }
    let j = lat * lat * axial;
    let i1 = 2.0 * lat * lat + axial * axial;
    let density = 0.5 * m.shear_modulus * (j.powf(-2.0 / 3.0) * i1 - 3.0)
        + 0.5 * m.bulk_modulus * (j - 1.0) * (j - 1.0);
    Ok((total - density).abs() / density.abs())
}

/// Two tetrahedra sharing a face, metre scale.
fn two_tet_mesh() -> Vec<TetElement> {
    let p = [
        [0.0, 0.0, 0.0],
        [0.02, 0.0, 0.0],
        [0.0, 0.02, 0.0],
        [0.0, 0.0, 0.02],
        [0.02, 0.02, 0.02],
    ];
    vec![
        TetElement::new([0, 1, 2, 3], [p[0], p[1], p[2], p[3]]).unwrap(),
        TetElement::new([1, 2, 3, 4], [p[1], p[2], p[3], p[4]]).unwrap(),
    ]
}

fn total_energy(els: &[TetElement], u: &[Vector3<f64>]) -> Result<f64> {
    let mut e = 0.0;
    for el in els {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        e += el.energy(&ue, MAT)?;
    }
    Ok(e)
}

fn total_forces(els: &[TetElement], u: &[Vector3<f64>], n: usize) -> Result<Vec<Vector3<f64>>> {
    let mut f = vec![Vector3::zeros(); n];
    for el in els {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        let fe = el.forces(&ue, MAT)?;
        for a in 0..4 {
            f[el.nodes[a]] += fe[a];
        }
    }
    Ok(f)
}

/// Aggregate relative error of assembled forces against central differences
/// of the total energy on the two-tet mesh.
pub fn force_fd_error() -> Result<f64> {
    let els = two_tet_mesh();
    let mut rng = rng_from_seed(31);
    let u: Vec<Vector3<f64>> = (0..5)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-8e-4..8e-4),
                rng.gen_range(-8e-4..8e-4),
                rng.gen_range(-8e-4..8e-4),
            )
        })
        .collect();
    let f = total_forces(&els, &u, 5)?;
    let h = 1e-8;
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..5 {
        for i in 0..3 {
            let mut up = u.clone();
            up[n][i] += h;
            let mut dn = u.clone();
            dn[n][i] -= h;
            let fd = (total_energy(&els, &up)? - total_energy(&els, &dn)?) / (2.0 * h);
            num += (f[n][i] - fd) * (f[n][i] - fd);
            den += fd * fd;
        }
    }
    Ok((num / den).sqrt())
}

/// Aggregate relative error of the analytic tangent against central
/// differences of the forces on the two-tet mesh.
pub fn tangent_fd_error() -> Result<f64> {
    let els = two_tet_mesh();
    let mut rng = rng_from_seed(47);
    let u: Vec<Vector3<f64>> = (0..5)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-8e-4..8e-4),
                rng.gen_range(-8e-4..8e-4),
                rng.gen_range(-8e-4..8e-4),
            )
        })
        .collect();

    // Dense assembled tangent.
    let mut k = vec![vec![0.0; 15]; 15];
    for el in &els {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        let ke = el.stiffness(&ue, MAT)?;
        for a in 0..4 {
            for b in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        k[3 * el.nodes[a] + i][3 * el.nodes[b] + j] += ke[3 * a + i][3 * b + j];
                    }
                }
            }
        }
    }

    let h = 1e-7;
    let (mut num, mut den) = (0.0, 0.0);
    for b in 0..5 {
        for j in 0..3 {
            let mut up = u.clone();
            up[b][j] += h;
            let mut dn = u.clone();
            dn[b][j] -= h;
            let fp = total_forces(&els, &up, 5)?;
            let fm = total_forces(&els, &dn, 5)?;
            for a in 0..5 {
                for i in 0..3 {
                    let fd = (fp[a][i] - fm[a][i]) / (2.0 * h);
                    let d = k[3 * a + i][3 * b + j] - fd;
                    num += d * d;
                    den += fd * fd;
                }
            }
        }
    }
    Ok((num / den).sqrt())
}

/// Energy and force residuals under a finite rigid rotation plus
/// translation, relative to `G * V` and `G * V^(2/3)`.
pub fn rigid_motion_errors() -> Result<(f64, f64)> {
    let els = two_tet_mesh();
    let x = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.02, 0.0, 0.0),
        Vector3::new(0.0, 0.02, 0.0),
        Vector3::new(0.0, 0.0, 0.02),
        Vector3::new(0.02, 0.02, 0.02),
    ];
    let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, -0.7));
    let r = nalgebra::Rotation3::from_axis_angle(&axis, 0.9);
    let t = Vector3::new(0.004, -0.002, 0.001);
    let u: Vec<Vector3<f64>> = x.iter().map(|&p| r * p + t - p).collect();

    let v: f64 = els.iter().map(|e| e.volume).sum();
    let e = total_energy(&els, &u)?;
    let f = total_forces(&els, &u, 5)?;
    let fmax = f.iter().map(|fi| fi.norm()).fold(0.0, f64::max);
    Ok((e.abs() / (MAT.shear_modulus * v), fmax / (MAT.shear_modulus * v.powf(2.0 / 3.0))))
}

/// Full verification battery with pass/fail against the pinned tolerances.
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub patch_max_interior_error_m: f64,
    pub uniaxial_max_rel_error: f64,
    pub uniaxial_lateral_stretch: f64,
    pub energy_rel_error: f64,
    pub rigid_energy_rel: f64,
    pub rigid_force_rel: f64,
    pub force_fd_rel_error: f64,
    pub tangent_fd_rel_error: f64,
    pub elapsed_seconds: f64,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.patch_max_interior_error_m < PATCH_TOLERANCE_M
            && self.uniaxial_max_rel_error < UNIAXIAL_REL_TOLERANCE
            && self.energy_rel_error < ENERGY_REL_TOLERANCE
            && self.rigid_energy_rel < RIGID_ENERGY_REL_TOLERANCE
            && self.rigid_force_rel < RIGID_FORCE_REL_TOLERANCE
            && self.force_fd_rel_error < FORCE_FD_REL_TOLERANCE
            && self.tangent_fd_rel_error < TANGENT_FD_REL_TOLERANCE
    }

    pub fn render(&self) -> String {
        let line = |name: &str, value: f64, tol: f64| {
            format!(
                "  {name:<34} {value:>12.3e}  (tolerance {tol:.0e})  {}\n",
                if value < tol { "ok" } else { "FAIL" }
            )
        };
        let mut s = String::from("solver verification\n");
        s += &line("patch interior error [m]", self.patch_max_interior_error_m, PATCH_TOLERANCE_M);
        s += &line("uniaxial relative error", self.uniaxial_max_rel_error, UNIAXIAL_REL_TOLERANCE);
        s += &format!(
            "  {:<34} {:>12.9}\n",
            "uniaxial lateral stretch", self.uniaxial_lateral_stretch
        );
        s += &line("homogeneous energy (rel)", self.energy_rel_error, ENERGY_REL_TOLERANCE);
        s += &line("rigid-motion energy (rel)", self.rigid_energy_rel, RIGID_ENERGY_REL_TOLERANCE);
        s += &line("rigid-motion force (rel)", self.rigid_force_rel, RIGID_FORCE_REL_TOLERANCE);
        s += &line("force vs finite diff", self.force_fd_rel_error, FORCE_FD_REL_TOLERANCE);
        s += &line("tangent vs finite diff", self.tangent_fd_rel_error, TANGENT_FD_REL_TOLERANCE);
        s += &format!(
            "  overall: {} ({:.2} s)\n",
            if self.passed() { "pass" } else { "FAIL" },
            self.elapsed_seconds
        );
        s
    }
}

pub fn run_verification() -> Result<VerificationReport> {
    let start = Instant::now();
    let soft = Material { shear_modulus: 1_000.0, bulk_modulus: 10_000.0 };
    let patch = patch_test()?;
    let uni = uniaxial_check(0.9, soft, 1.0, None)?;
    let energy = homogeneous_energy_error(1.1, soft)?;
    let (rigid_e, rigid_f) = rigid_motion_errors()?;
    let force_fd = force_fd_error()?;
    let tangent_fd = tangent_fd_error()?;
    Ok(VerificationReport {
        patch_max_interior_error_m: patch,
        uniaxial_max_rel_error: uni.max_rel_error,
        uniaxial_lateral_stretch: uni.lateral_stretch,
        energy_rel_error: energy,
        rigid_energy_rel: rigid_e,
        rigid_force_rel: rigid_f,
        force_fd_rel_error: force_fd,
        tangent_fd_rel_error: tangent_fd,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fesolver::element::piola;

    #[test]
    fn lateral_stretch_is_identity_at_unit_stretch() {
        let lat = uniaxial_lateral_stretch(1.0, MAT).unwrap();
        assert!((lat - 1.0).abs() < 1e-12, "{lat}");
    }

    #[test]
    fn lateral_stretch_approaches_incompressible_limit_for_stiff_bulk() {
        let stiff = Material { shear_modulus: 1_000.0, bulk_modulus: 1e9 };
        let lat = uniaxial_lateral_stretch(1.2, stiff).unwrap();
        let incompressible = 1.2f64.powf(-0.5);
        assert!((lat - incompressible).abs() < 1e-3, "{lat} vs {incompressible}");
    }

    #[test]
    fn root_zeroes_both_the_1d_derivative_and_the_lateral_stress() {
        // Dual route: the bisection solves dW/dlat = 0; independently, the
        // full stress tensor must show zero lateral components there.
        let axial = 1.15;
        let lat = uniaxial_lateral_stretch(axial, MAT).unwrap();
        assert!(d_energy_d_lateral(axial, lat, MAT).abs() < 1e-10 * MAT.shear_modulus);
        let f = Matrix3::from_diagonal(&Vector3::new(lat, lat, axial));
        let p = piola(&f, MAT).unwrap();
        assert!(p[(0, 0)].abs() < 1e-9 * MAT.shear_modulus, "P_xx = {}", p[(0, 0)]);
        assert!(p[(1, 1)].abs() < 1e-9 * MAT.shear_modulus, "P_yy = {}", p[(1, 1)]);
        assert!(p[(2, 2)].abs() > 1e-2 * MAT.shear_modulus, "axial stress should be nonzero");
    }

    #[test]
    fn patch_test_reproduces_linear_fields_at_interior_nodes() {
        let err = patch_test().unwrap();
        assert!(err < PATCH_TOLERANCE_M, "patch error {err:.3e}");
    }

    #[test]
    fn uniaxial_stretch_solution_matches_the_oracle() {
        let out = uniaxial_check(1.10, MAT, 0.05, None).unwrap();
        assert!(out.max_rel_error < UNIAXIAL_REL_TOLERANCE, "{:.3e}", out.max_rel_error);
    }

    #[test]
    fn uniaxial_compression_on_unit_cube_matches_the_oracle() {
        let soft = Material { shear_modulus: 1_000.0, bulk_modulus: 10_000.0 };
        let out = uniaxial_check(0.9, soft, 1.0, None).unwrap();
        assert!(out.max_rel_error < UNIAXIAL_REL_TOLERANCE, "{:.3e}", out.max_rel_error);
        assert!(out.lateral_stretch > 1.0, "compression should bulge laterally");
    }

    #[test]
    fn homogeneous_energy_matches_closed_form() {
        let soft = Material { shear_modulus: 1_000.0, bulk_modulus: 10_000.0 };
        let err = homogeneous_energy_error(1.1, soft).unwrap();
        assert!(err < ENERGY_REL_TOLERANCE, "{err:.3e}");
    }

    #[test]
    fn uniaxial_check_detects_a_wrong_lateral_stretch() {
        let good = uniaxial_lateral_stretch(1.10, MAT).unwrap();
        let out = uniaxial_check(1.10, MAT, 0.05, Some(good + 1e-3)).unwrap();
        assert!(
            out.max_rel_error > 100.0 * UNIAXIAL_REL_TOLERANCE,
            "check failed to flag a corrupted reference: {:.3e}",
            out.max_rel_error
        );
    }

    #[test]
    fn full_battery_passes() {
        let report = run_verification().unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.render().contains("overall: pass"));
    }
}
