//! Per-node input features and boundary-condition interpolation.
//!
//! Each node contributes an entry `[p, b, k]`: position (m), a 4-component
//! boundary vector (switch + assigned displacement, m), and the two material
//! moduli (Pa). The boundary switch is 1 exactly when a displacement is
//! assigned, so clamped nodes carry `[1, 0, 0, 0]` and free nodes all zeros.
//! Entries are an unordered set; order never carries meaning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fesolver::MaterialSet;
use crate::geometry::{
    build_tessellation, LabelledMesh, PhantomSpec, Region, TessellationConfig, BC_FIXED, BC_LOADED,
};

/// Neighbour count for inverse-distance interpolation.
pub const INTERPOLATION_NEIGHBOURS: usize = 5;
/// A query this close to a node copies the node's value outright.
pub const EXACT_HIT_DISTANCE_M: f64 = 1e-12;
/// Interpolated boundary switches at or above this become 1.
pub const DEFAULT_SWITCH_THRESHOLD: f64 = 0.5;

/// Which blocks each feature entry carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Position, boundary vector, and material moduli: 9 components.
    Pbk,
    /// Position and boundary vector only: 7 components.
    Pb,
}

impl FeatureMode {
    pub fn width(self) -> usize {
        match self {
            FeatureMode::Pbk => 9,
            FeatureMode::Pb => 7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Pbk => "pbk",
            FeatureMode::Pb => "pb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pbk" => Ok(FeatureMode::Pbk),
            "pb" => Ok(FeatureMode::Pb),
            other => Err(Error::config(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Unordered per-point feature entries with parallel labels and optional
/// ground-truth displacements.
#[derive(Clone, Debug)]
pub struct FeatureVectorSet {
    pub mode: FeatureMode,
    /// Row-major, `len() * mode.width()` values.
    pub features: Vec<f64>,
    pub labels: Vec<Region>,
    pub truth: Option<Vec<[f64; 3]>>,
}

impl FeatureVectorSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.mode.width();
        &self.features[i * w..(i + 1) * w]
    }

    /// Drops the material block, leaving `[p, b]` entries.
    pub fn strip_materials(self) -> Result<FeatureVectorSet> {
        if self.mode != FeatureMode::Pbk {
            return Err(Error::config("material block already absent"));
        }
        let n = self.len();
        let mut features = Vec::with_capacity(n * 7);
        for i in 0..n {
            features.extend_from_slice(&self.features[i * 9..i * 9 + 7]);
        }
        Ok(FeatureVectorSet { mode: FeatureMode::Pb, features, labels: self.labels, truth: self.truth })
    }

    /// Reorders entries and all parallel arrays by `perm` (entry `i` of the
    /// result is entry `perm[i]` of the input).
    pub fn permuted(&self, perm: &[usize]) -> FeatureVectorSet {
        assert_eq!(perm.len(), self.len());
        let w = self.mode.width();
        let mut features = Vec::with_capacity(self.features.len());
        for &src in perm {
            features.extend_from_slice(&self.features[src * w..(src + 1) * w]);
        }
        FeatureVectorSet {
            mode: self.mode,
            features,
            labels: perm.iter().map(|&s| self.labels[s]).collect(),
            truth: self.truth.as_ref().map(|t| perm.iter().map(|&s| t[s]).collect()),
        }
    }
}

/// Boundary vectors for every mesh node. `dirichlet` must be `Some` exactly
/// on the fixed/loaded nodes. `fixed_as_assigned` selects the encoding of
/// clamped nodes: switch on with zero displacement (default), or
/// indistinguishable from free nodes.
fn boundary_vectors(
    mesh: &LabelledMesh,
    dirichlet: &[Option<[f64; 3]>],
    fixed_as_assigned: bool,
) -> Result<Vec<[f64; 4]>> {
    if dirichlet.len() != mesh.node_count() {
        return Err(Error::config(format!(
            "dirichlet table covers {} nodes, mesh has {}",
            dirichlet.len(),
            mesh.node_count()
        )));
    }
    let mut out = Vec::with_capacity(mesh.node_count());
    for (n, d) in dirichlet.iter().enumerate() {
        let flagged = mesh.bc_flags[n] & (BC_FIXED | BC_LOADED) != 0;
        match (d, flagged) {
            (Some(v), true) => {
                if mesh.bc_flags[n] & BC_FIXED != 0 && !fixed_as_assigned {
                    out.push([0.0; 4]);
                } else {
                    out.push([1.0, v[0], v[1], v[2]]);
                }
            }
            (None, false) => out.push([0.0; 4]),
            (Some(_), false) => {
                return Err(Error::config(format!(
                    "displacement assigned to unconstrained node {n}"
                )))
            }
            (None, true) => {
                return Err(Error::config(format!(
                    "constrained node {n} is missing its assigned displacement"
                )))
            }
        }
    }
    Ok(out)
}

/// Builds the full 9-component entry set for the mesh nodes.
pub fn assemble_features(
    mesh: &LabelledMesh,
    materials: &MaterialSet,
    dirichlet: &[Option<[f64; 3]>],
) -> Result<FeatureVectorSet> {
    assemble_features_with_encoding(mesh, materials, dirichlet, true)
}

/// As [`assemble_features`], with the clamped-node encoding explicit.
pub fn assemble_features_with_encoding(
    mesh: &LabelledMesh,
    materials: &MaterialSet,
    dirichlet: &[Option<[f64; 3]>],
    fixed_as_assigned: bool,
) -> Result<FeatureVectorSet> {
    let b = boundary_vectors(mesh, dirichlet, fixed_as_assigned)?;
    let mut features = Vec::with_capacity(mesh.node_count() * 9);
    for n in 0..mesh.node_count() {
        let m = materials.for_region(mesh.labels[n]);
        features.extend_from_slice(&mesh.nodes[n]);
        features.extend_from_slice(&b[n]);
        features.extend_from_slice(&[m.shear_modulus, m.bulk_modulus]);
    }
    Ok(FeatureVectorSet {
        mode: FeatureMode::Pbk,
        features,
        labels: mesh.labels.clone(),
        truth: None,
    })
}

fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Uniform-grid accelerator for nearest-neighbour queries over a fixed point
/// cloud. Results are bit-identical to an exhaustive scan: both rank by
/// (squared distance, index) with the same arithmetic.
pub struct NeighbourGrid<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    buckets: Vec<Vec<u32>>,
}

impl<'a> NeighbourGrid<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "empty point cloud");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0f64, f64::max);
        let per_axis = ((points.len() as f64).cbrt().ceil() as i64).clamp(1, 48);
        let cell = if extent > 0.0 { extent / per_axis as f64 } else { 1.0 };
        let dims: [i64; 3] =
            std::array::from_fn(|i| (((hi[i] - lo[i]) / cell).floor() as i64 + 1).max(1));
        let mut buckets = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for (idx, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, lo, cell, dims);
            buckets[Self::bucket(c, dims)].push(idx as u32);
        }
        NeighbourGrid { points, origin: lo, cell, dims, buckets }
    }

    fn cell_of(p: &[f64; 3], origin: [f64; 3], cell: f64, dims: [i64; 3]) -> [i64; 3] {
        std::array::from_fn(|i| (((p[i] - origin[i]) / cell).floor() as i64).clamp(0, dims[i] - 1))
    }

    fn bucket(c: [i64; 3], dims: [i64; 3]) -> usize {
        ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize
    }

    /// The `k` nearest points to `q`, as (squared distance, index), ordered
    /// by (distance, index).
    pub fn nearest(&self, q: [f64; 3], k: usize) -> Vec<(f64, u32)> {
        assert!(k >= 1 && k <= self.points.len());
        // Virtual (unclamped) home cell so the ring lower bound stays valid
        // for queries outside the cloud's bounding box.
        let home: [i64; 3] =
            std::array::from_fn(|i| ((q[i] - self.origin[i]) / self.cell).floor() as i64);
        let max_ring = (0..3)
            .map(|i| (home[i] - 0).max(self.dims[i] - 1 - home[i]).max(0))
            .max()
            .unwrap();

        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 8);
        for ring in 0..=max_ring {
            // Stop once even the closest possible unseen point cannot beat
            // the current k-th candidate (strict: ties resolve by index and
            // may still arrive from the next ring).
            if best.len() >= k {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
            self.visit_ring(home, ring, |bucket| {
                for &idx in &self.buckets[bucket] {
                    let d2 = squared_distance(q, self.points[idx as usize]);
                    best.push((d2, idx));
                }
            });
            best.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            best.truncate(k + 8);
        }
        best.truncate(k);
        best
    }

    fn visit_ring(&self, home: [i64; 3], ring: i64, mut f: impl FnMut(usize)) {
        let clip = |i: usize, v: i64| v.clamp(0, self.dims[i] - 1);
        if ring == 0 {
            let c = [clip(0, home[0]), clip(1, home[1]), clip(2, home[2])];
            if home.iter().enumerate().all(|(i, &h)| h == c[i]) {
                f(Self::bucket(c, self.dims));
            }
            return;
        }
        for dx in -ring..=ring {
            let x = home[0] + dx;
            if x < 0 || x >= self.dims[0] {
                continue;
            }
            for dy in -ring..=ring {
                let y = home[1] + dy;
                if y < 0 || y >= self.dims[1] {
                    continue;
                }
                let on_face = dx.abs() == ring || dy.abs() == ring;
                let mut step = 1;
                if !on_face {
                    step = 2 * ring; // only the two z faces of the ring shell
                }
                let mut dz = -ring;
                while dz <= ring {
                    let z = home[2] + dz;
                    if z >= 0 && z < self.dims[2] {
                        f(Self::bucket([x, y, z], self.dims));
                    }
                    dz += step;
                }
            }
        }
    }
}

/// Inverse-distance weights over the `k` nearest nodes, or the index to copy
/// outright when the query sits on a node.
enum Blend {
    Copy(usize),
    Weighted(Vec<(usize, f64)>),
}

fn blend_for(grid: &NeighbourGrid, q: [f64; 3], k: usize) -> Blend {
    let near = grid.nearest(q, k);
    if near[0].0 <= EXACT_HIT_DISTANCE_M * EXACT_HIT_DISTANCE_M {
        return Blend::Copy(near[0].1 as usize);
    }
    let inv: Vec<f64> = near.iter().map(|&(d2, _)| 1.0 / d2.sqrt()).collect();
    let total: f64 = inv.iter().sum();
    Blend::Weighted(
        near.iter().zip(&inv).map(|(&(_, idx), &w)| (idx as usize, w / total)).collect(),
    )
}

/// Interpolates boundary vectors onto `queries` by inverse-distance weights
/// over the `knn` nearest nodes, then re-binarises the switch at `threshold`.
pub fn interpolate_bc_with_threshold(
    queries: &[[f64; 3]],
    nodes: &[[f64; 3]],
    b: &[[f64; 4]],
    knn: usize,
    threshold: f64,
) -> Result<Vec<[f64; 4]>> {
    if nodes.len() < knn {
        return Err(Error::config(format!(
            "{} nodes cannot support {knn}-nearest interpolation",
            nodes.len()
        )));
    }
    assert_eq!(nodes.len(), b.len());
    let grid = NeighbourGrid::new(nodes);
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        let mut v = match blend_for(&grid, q, knn) {
            Blend::Copy(i) => b[i],
            Blend::Weighted(w) => {
                let mut acc = [0.0; 4];
                for (i, wi) in w {
                    for c in 0..4 {
                        acc[c] += wi * b[i][c];
                    }
                }
                acc
            }
        };
        if v[0] >= threshold {
            v[0] = 1.0;
        } else {
            v = [0.0; 4];
        }
        out.push(v);
    }
    Ok(out)
}

pub fn interpolate_bc(
    queries: &[[f64; 3]],
    nodes: &[[f64; 3]],
    b: &[[f64; 4]],
    knn: usize,
) -> Result<Vec<[f64; 4]>> {
    interpolate_bc_with_threshold(queries, nodes, b, knn, DEFAULT_SWITCH_THRESHOLD)
}

/// Interpolates nodal 3-vectors (displacement fields) with the same
/// inverse-distance scheme, without any binarisation.
pub fn interpolate_vectors(
    queries: &[[f64; 3]],
    nodes: &[[f64; 3]],
    values: &[[f64; 3]],
    knn: usize,
) -> Result<Vec<[f64; 3]>> {
    if nodes.len() < knn {
        return Err(Error::config(format!(
            "{} nodes cannot support {knn}-nearest interpolation",
            nodes.len()
        )));
    }
    assert_eq!(nodes.len(), values.len());
    let grid = NeighbourGrid::new(nodes);
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        match blend_for(&grid, q, knn) {
            Blend::Copy(i) => out.push(values[i]),
            Blend::Weighted(w) => {
                let mut acc = [0.0; 3];
                for (i, wi) in w {
                    for c in 0..3 {
                        acc[c] += wi * values[i][c];
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(out)
}

/// Feature entries at freshly sampled tessellation points instead of mesh
/// nodes: materials follow the containing cuboid's region, boundary vectors
/// are interpolated from the nodes, and ground truth (when given per node)
/// is carried over by the same interpolation.
#[allow(clippy::too_many_arguments)]
pub fn resample_features(
    mesh: &LabelledMesh,
    spec: &PhantomSpec,
    materials: &MaterialSet,
    dirichlet: &[Option<[f64; 3]>],
    nodal_truth: Option<&[[f64; 3]]>,
    config: &TessellationConfig,
    seed: u64,
) -> Result<FeatureVectorSet> {
    if let Some(t) = nodal_truth {
        if t.len() != mesh.node_count() {
            return Err(Error::config(format!(
                "ground truth covers {} nodes, mesh has {}",
                t.len(),
                mesh.node_count()
            )));
        }
    }
    let tess = build_tessellation(mesh, spec, config, seed)?;
    let nodal_b = boundary_vectors(mesh, dirichlet, true)?;
    let b = interpolate_bc(&tess.points, &mesh.nodes, &nodal_b, INTERPOLATION_NEIGHBOURS)?;
    let truth = match nodal_truth {
        Some(t) => Some(interpolate_vectors(
            &tess.points,
            &mesh.nodes,
            t,
            INTERPOLATION_NEIGHBOURS,
        )?),
        None => None,
    };

    let mut features = Vec::with_capacity(tess.points.len() * 9);
    for (i, p) in tess.points.iter().enumerate() {
        let m = materials.for_region(tess.labels[i]);
        features.extend_from_slice(p);
        features.extend_from_slice(&b[i]);
        features.extend_from_slice(&[m.shear_modulus, m.bulk_modulus]);
    }
    Ok(FeatureVectorSet { mode: FeatureMode::Pbk, features, labels: tess.labels, truth })
}
