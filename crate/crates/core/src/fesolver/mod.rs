//! Static total-Lagrangian finite-element solver for labelled tet meshes.
//!
//! The problem is displacement-driven: bone nodes are clamped to zero, probe
//! nodes carry a prescribed displacement, everything else is free. The
//! solution minimises the total neo-Hookean strain energy, found by Newton's
//! method on the free degrees of freedom with
//!
//! * uniform load stepping (the prescribed values are ramped in equal
//!   fractions; a single step when the prescription is zero),
//! * a backtracking line search that halves the step until the residual norm
//!   decreases and no element inverts,
//! * Jacobi-preconditioned conjugate gradients for the tangent systems.
//!
//! Convergence is declared when the free-dof residual infinity norm drops
//! below `residual_tolerance_scale * G_max * V_total^(1/3)`, a scale built
//! from the stiffest region and the mesh volume so the criterion does not
//! depend on mesh density or unit choices.

mod dataset;
mod element;
mod sparse;
pub mod verify;

pub use dataset::{
    generate_dataset, load_dataset, load_manifest, load_sample, write_dataset, DatasetManifest,
    GeneratedDataset, GenerationConfig, SampleMeta, SimulationRecord, SplitTag,
};
pub use element::TetElement;
pub use sparse::{solve_pcg, CsrMatrix, PcgOutcome};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LabelledMesh, Region, REGIONS};

/// Compressible neo-Hookean material, moduli in pascals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub shear_modulus: f64,
    pub bulk_modulus: f64,
}

/// One material per region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSet {
    pub background: Material,
    pub whole_gland: Material,
    pub central_zone: Material,
    pub bone: Material,
}

impl MaterialSet {
    pub fn for_region(&self, r: Region) -> Material {
        match r {
            Region::Background => self.background,
            Region::WholeGland => self.whole_gland,
            Region::CentralZone => self.central_zone,
            Region::Bone => self.bone,
        }
    }

    pub fn max_shear_modulus(&self) -> f64 {
        REGIONS.iter().map(|&r| self.for_region(r).shear_modulus).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for r in REGIONS {
            let m = self.for_region(r);
            if !(m.shear_modulus.is_finite() && m.shear_modulus > 0.0) {
                return Err(Error::config(format!("{r:?}: shear modulus must be positive")));
            }
            if !(m.bulk_modulus.is_finite() && m.bulk_modulus > 0.0) {
                return Err(Error::config(format!("{r:?}: bulk modulus must be positive")));
            }
        }
        Ok(())
    }
}

/// Uniform sampling interval `[min, max]` for one modulus.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModulusRange {
    pub min: f64,
    pub max: f64,
}

impl ModulusRange {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && 0.0 < self.min && self.min <= self.max)
        {
            return Err(Error::config(format!(
                "{what}: modulus range [{}, {}] must satisfy 0 < min <= max",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Per-region modulus ranges for randomised material draws.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MaterialRange {
    pub shear_modulus: ModulusRange,
    pub bulk_modulus: ModulusRange,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MaterialRanges {
    pub background: MaterialRange,
    pub whole_gland: MaterialRange,
    pub central_zone: MaterialRange,
    pub bone: MaterialRange,
}

impl Default for MaterialRanges {
    /// Soft-tissue scale: shear 1-10 kPa, bulk 10-100 kPa. Bone rigidity is
    /// represented by fixing its nodes, so the bone material only enters
    /// through interface elements and shares the soft range.
    fn default() -> Self {
        let r = MaterialRange {
            shear_modulus: ModulusRange { min: 1e3, max: 1e4 },
            bulk_modulus: ModulusRange { min: 1e4, max: 1e5 },
        };
        MaterialRanges { background: r, whole_gland: r, central_zone: r, bone: r }
    }
}

impl MaterialRanges {
    pub fn for_region(&self, r: Region) -> MaterialRange {
        match r {
            Region::Background => self.background,
            Region::WholeGland => self.whole_gland,
            Region::CentralZone => self.central_zone,
            Region::Bone => self.bone,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in REGIONS {
            let range = self.for_region(r);
            range.shear_modulus.validate(&format!("{r:?} shear"))?;
            range.bulk_modulus.validate(&format!("{r:?} bulk"))?;
        }
        Ok(())
    }

    /// Draws one material per region, in fixed region order.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> MaterialSet {
        let mut draw = |range: MaterialRange| Material {
            shear_modulus: range.shear_modulus.sample(rng),
            bulk_modulus: range.bulk_modulus.sample(rng),
        };
        MaterialSet {
            background: draw(self.background),
            whole_gland: draw(self.whole_gland),
            central_zone: draw(self.central_zone),
            bone: draw(self.bone),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Equal ramp fractions for the prescribed displacement.
    pub load_steps: usize,
    /// Newton iteration cap per load step.
    pub max_newton_iterations: usize,
    /// Residual tolerance as a fraction of `G_max * V_total^(1/3)`.
    pub residual_tolerance_scale: f64,
    /// Backtracking halvings before the step is declared stalled.
    pub max_line_search_halvings: u32,
    pub cg_relative_tolerance: f64,
    /// 0 selects an automatic cap of `max(500, 4 * free_dofs)`.
    pub cg_max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            load_steps: 4,
            max_newton_iterations: 30,
            residual_tolerance_scale: 1e-9,
            max_line_search_halvings: 8,
            cg_relative_tolerance: 1e-10,
            cg_max_iterations: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.load_steps == 0 {
            return Err(Error::config("load_steps must be at least 1"));
        }
        if self.max_newton_iterations == 0 {
            return Err(Error::config("max_newton_iterations must be at least 1"));
        }
        if !(self.residual_tolerance_scale > 0.0 && self.residual_tolerance_scale.is_finite()) {
            return Err(Error::config("residual_tolerance_scale must be positive"));
        }
        if !(self.cg_relative_tolerance > 0.0 && self.cg_relative_tolerance < 1.0) {
            return Err(Error::config("cg_relative_tolerance must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Converged solution plus solver diagnostics.
#[derive(Clone, Debug)]
pub struct FESolution {
    pub displacements: Vec<[f64; 3]>,
    /// Residual evaluations across all load steps (1 for a zero load).
    pub newton_iterations: usize,
    pub load_steps_used: usize,
    pub final_residual: f64,
    pub residual_tolerance: f64,
    pub strain_energy: f64,
}

/// Element material assignment: majority node label, ties resolved in favour
/// of tissue (inner zone, gland, background, bone) so interface elements
/// behave like the soft side.
pub fn element_regions(mesh: &LabelledMesh) -> Vec<Region> {
    const TIE_RANK: [u8; 4] = [1, 2, 3, 0]; // background, gland, inner zone, bone
    mesh.tets
        .iter()
        .map(|t| {
            let mut counts = [0u8; 4];
            for &n in t {
                counts[mesh.labels[n as usize].as_u8() as usize] += 1;
            }
            let best = (0u8..4)
                .max_by_key(|&l| (counts[l as usize], TIE_RANK[l as usize]))
                .unwrap();
            Region::from_u8(best).unwrap()
        })
        .collect()
}

/// Solves with the mesh's own boundary conditions: fixed nodes pinned to
/// zero, loaded nodes set to `prescribed`.
pub fn solve_static(
    mesh: &LabelledMesh,
    materials: &MaterialSet,
    prescribed: [f64; 3],
    config: &SolverConfig,
) -> Result<FESolution> {
    let dirichlet: Vec<Option<[f64; 3]>> = (0..mesh.node_count())
        .map(|n| {
            if mesh.is_fixed(n) {
                Some([0.0; 3])
            } else if mesh.is_loaded(n) {
                Some(prescribed)
            } else {
                None
            }
        })
        .collect();
    solve_with_dirichlet(mesh, materials, &dirichlet, config)
}

/// General Dirichlet interface: `dirichlet[n]` is the full prescribed
/// displacement of node n, or `None` for a free node. Prescribed values are
/// ramped uniformly over the configured load steps.
pub fn solve_with_dirichlet(
    mesh: &LabelledMesh,
    materials: &MaterialSet,
    dirichlet: &[Option<[f64; 3]>],
    config: &SolverConfig,
) -> Result<FESolution> {
    config.validate()?;
    materials.validate()?;
    if dirichlet.len() != mesh.node_count() {
        return Err(Error::internal("dirichlet table length differs from node count"));
    }

    let regions = element_regions(mesh);
    let mut elements = Vec::with_capacity(mesh.tets.len());
    let mut total_volume = 0.0;
    for (t, tet) in mesh.tets.iter().enumerate() {
        let x: [[f64; 3]; 4] = std::array::from_fn(|a| mesh.nodes[tet[a] as usize]);
        let el = TetElement::new(std::array::from_fn(|a| tet[a] as usize), x)?;
        total_volume += el.volume;
        elements.push((el, materials.for_region(regions[t])));
    }

    // Free-dof numbering.
    let mut dof_of_node = vec![usize::MAX; mesh.node_count()];
    let mut free_nodes = Vec::new();
    for (n, d) in dirichlet.iter().enumerate() {
        if d.is_none() {
            dof_of_node[n] = free_nodes.len();
            free_nodes.push(n);
        }
    }
    let n_free = free_nodes.len();
    if n_free == 0 {
        return Err(Error::simulation("no free degrees of freedom"));
    }

    // Tangent sparsity: 3x3 blocks for each free node pair sharing an element.
    let mut block_cols: Vec<Vec<usize>> = vec![Vec::new(); n_free];
    for (el, _) in &elements {
        for &a in &el.nodes {
            if dof_of_node[a] == usize::MAX {
                continue;
            }
            for &b in &el.nodes {
                if dof_of_node[b] != usize::MAX {
                    block_cols[dof_of_node[a]].push(dof_of_node[b]);
                }
            }
        }
    }
    let rows: Vec<Vec<usize>> = (0..3 * n_free)
        .map(|r| {
            let node_row = r / 3;
            let mut cols = Vec::with_capacity(3 * block_cols[node_row].len());
            for &bc in &block_cols[node_row] {
                cols.extend_from_slice(&[3 * bc, 3 * bc + 1, 3 * bc + 2]);
            }
            cols
        })
        .collect();
    let mut tangent = CsrMatrix::from_pattern(rows);

    let tolerance = config.residual_tolerance_scale
        * materials.max_shear_modulus()
        * total_volume.powf(1.0 / 3.0);

    let any_load = dirichlet
        .iter()
        .flatten()
        .any(|v| v.iter().any(|&c| c != 0.0));
    let steps = if any_load { config.load_steps } else { 1 };
    let cg_cap = if config.cg_max_iterations == 0 {
        (4 * 3 * n_free).max(500)
    } else {
        config.cg_max_iterations
    };

    let mut u = vec![Vector3::zeros(); mesh.node_count()];
    let mut total_iterations = 0usize;
    let mut final_residual = f64::INFINITY;

    for step in 1..=steps {
        let fraction = step as f64 / steps as f64;
        for (n, d) in dirichlet.iter().enumerate() {
            if let Some(v) = d {
                u[n] = fraction * Vector3::new(v[0], v[1], v[2]);
            }
        }

        let mut converged = false;
        for _ in 0..config.max_newton_iterations {
            total_iterations += 1;
            let residual = assemble_residual(&elements, &dof_of_node, &u, n_free)?;
            let rnorm = norm(&residual);
            final_residual = rnorm;
            if rnorm <= tolerance {
                converged = true;
                break;
            }

            tangent.reset_values();
            assemble_tangent(&elements, &dof_of_node, &u, &mut tangent)?;
            let rhs: Vec<f64> = residual.iter().map(|v| -v).collect();
            let lin = solve_pcg(&tangent, &rhs, config.cg_relative_tolerance, cg_cap);
            if !lin.converged && !lin.truncated {
                return Err(Error::simulation(format!(
                    "linear solver stalled at load step {step} ({} iterations, residual {rnorm:.3e})",
                    lin.iterations
                )));
            }

            // Backtracking on the residual norm; inverted trial states count
            // as failures and halve the step.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=config.max_line_search_halvings {
                let mut trial = u.clone();
                for (fi, &n) in free_nodes.iter().enumerate() {
                    trial[n] += alpha
                        * Vector3::new(lin.x[3 * fi], lin.x[3 * fi + 1], lin.x[3 * fi + 2]);
                }
                match assemble_residual(&elements, &dof_of_node, &trial, n_free) {
                    Ok(r_trial) if norm(&r_trial) < rnorm => {
                        u = trial;
                        accepted = true;
                        break;
                    }
                    _ => alpha *= 0.5,
                }
            }
            if !accepted {
                return Err(Error::simulation(format!(
                    "line search failed to reduce the residual at load step {step} \
                     (residual {rnorm:.3e}, tolerance {tolerance:.3e})"
                )));
            }
        }
        if !converged {
            return Err(Error::simulation(format!(
                "Newton did not converge within {} iterations at load step {step} \
                 (residual {final_residual:.3e}, tolerance {tolerance:.3e})",
                config.max_newton_iterations
            )));
        }
    }

    let mut strain_energy = 0.0;
    for (el, mat) in &elements {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        strain_energy += el.energy(&ue, *mat)?;
    }

    Ok(FESolution {
        displacements: u.iter().map(|v| [v[0], v[1], v[2]]).collect(),
        newton_iterations: total_iterations,
        load_steps_used: steps,
        final_residual,
        residual_tolerance: tolerance,
        strain_energy,
    })
}

fn assemble_residual(
    elements: &[(TetElement, Material)],
    dof_of_node: &[usize],
    u: &[Vector3<f64>],
    n_free: usize,
) -> Result<Vec<f64>> {
    let mut r = vec![0.0; 3 * n_free];
    for (el, mat) in elements {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        let f = el.forces(&ue, *mat)?;
        for a in 0..4 {
            let dof = dof_of_node[el.nodes[a]];
            if dof != usize::MAX {
                for i in 0..3 {
                    r[3 * dof + i] += f[a][i];
                }
            }
        }
    }
    Ok(r)
}

fn assemble_tangent(
    elements: &[(TetElement, Material)],
    dof_of_node: &[usize],
    u: &[Vector3<f64>],
    tangent: &mut CsrMatrix,
) -> Result<()> {
    for (el, mat) in elements {
        let ue: [Vector3<f64>; 4] = std::array::from_fn(|a| u[el.nodes[a]]);
        let k = el.stiffness(&ue, *mat)?;
        for a in 0..4 {
            let da = dof_of_node[el.nodes[a]];
            if da == usize::MAX {
                continue;
            }
            for b in 0..4 {
                let db = dof_of_node[el.nodes[b]];
                if db == usize::MAX {
                    continue;
                }
                for i in 0..3 {
                    for j in 0..3 {
                        tangent.add(3 * da + i, 3 * db + j, k[3 * a + i][3 * b + j]);
                    }
                }
            }
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, &x| m.max(x.abs()))
}
