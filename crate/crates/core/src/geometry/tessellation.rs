//! Cuboid resampling of a labelled mesh.
//!
//! For each region present in the mesh, the region's nodes are boxed, the box
//! is cut into up to `cuboid_count` slabs along its longest axis, each slab
//! is shrunk to the bounding box of its member nodes (empty slabs are
//! dropped), and `points_per_cuboid` fresh points are drawn uniformly inside
//! each surviving cuboid, rejection-sampled until they classify into the
//! generating region. The result is a point cloud with known region labels
//! whose size is `regions x cuboids x points`, generally different from the
//! mesh node count.

use serde::{Deserialize, Serialize};

use super::{LabelledMesh, PhantomSpec, Region, REGIONS};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use rand::Rng;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TessellationConfig {
    /// Maximum cuboids per region.
    pub cuboid_count: usize,
    /// Points drawn in each surviving cuboid.
    pub points_per_cuboid: usize,
}

impl Default for TessellationConfig {
    fn default() -> Self {
        TessellationConfig { cuboid_count: 4, points_per_cuboid: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub region: Region,
}

impl Cuboid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Resampled point cloud with provenance of every point.
#[derive(Clone, Debug, PartialEq)]
pub struct Tessellation {
    pub cuboids: Vec<Cuboid>,
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<Region>,
    pub cuboid_of_point: Vec<usize>,
}

impl Tessellation {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Builds the tessellation of `mesh` under `spec`'s implicit region shapes.
/// Deterministic in `seed`.
pub fn build_tessellation(
    mesh: &LabelledMesh,
    spec: &PhantomSpec,
    config: &TessellationConfig,
    seed: u64,
) -> Result<Tessellation> {
    if config.cuboid_count == 0 || config.points_per_cuboid == 0 {
        return Err(Error::config("tessellation needs at least one cuboid and one point"));
    }

    let mut cuboids = Vec::new();
    for &region in &REGIONS {
        let members: Vec<[f64; 3]> = mesh
            .nodes
            .iter()
            .zip(&mesh.labels)
            .filter(|(_, &l)| l == region)
            .map(|(&p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let (lo, hi) = points_bbox(&members);
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let width = hi[axis] - lo[axis];
        let slabs = config.cuboid_count;

        // Assign each member to a slab index; the last slab is closed above.
        let mut slab_members: Vec<Vec<[f64; 3]>> = vec![Vec::new(); slabs];
        for p in members {
            let t = if width > 0.0 { (p[axis] - lo[axis]) / width } else { 0.0 };
            let idx = ((t * slabs as f64) as usize).min(slabs - 1);
            slab_members[idx].push(p);
        }
        for slab in slab_members.into_iter().filter(|s| !s.is_empty()) {
            let (mut smin, mut smax) = points_bbox(&slab);
            // Degenerate axes (single node plane) get a small extent so the
            // cuboid has volume to sample.
            for i in 0..3 {
                if smax[i] - smin[i] <= 0.0 {
                    let pad = 1e-6 * spec.domain_size[i].max(1e-9);
                    smin[i] -= pad;
                    smax[i] += pad;
                }
            }
            cuboids.push(Cuboid { min: smin, max: smax, region });
        }
    }
    if cuboids.is_empty() {
        return Err(Error::simulation("tessellation produced no cuboids"));
    }

    let mut points = Vec::with_capacity(cuboids.len() * config.points_per_cuboid);
    let mut labels = Vec::with_capacity(points.capacity());
    let mut cuboid_of_point = Vec::with_capacity(points.capacity());
    for (ci, cuboid) in cuboids.iter().enumerate() {
        let mut r = rng::rng_for(seed, &[stream::TESSELLATION, ci as u64]);
        for _ in 0..config.points_per_cuboid {
            let mut accepted = None;
            for _ in 0..100_000 {
                let p = [
                    r.gen_range(cuboid.min[0]..=cuboid.max[0]),
                    r.gen_range(cuboid.min[1]..=cuboid.max[1]),
                    r.gen_range(cuboid.min[2]..=cuboid.max[2]),
                ];
                if spec.classify(p) == cuboid.region {
                    accepted = Some(p);
                    break;
                }
            }
            let p = accepted.ok_or_else(|| {
                Error::simulation(format!(
                    "rejection sampling stalled in cuboid {ci} ({:?})",
                    cuboid.region
                ))
            })?;
            points.push(p);
            labels.push(cuboid.region);
            cuboid_of_point.push(ci);
        }
    }

    Ok(Tessellation { cuboids, points, labels, cuboid_of_point })
}

fn points_bbox(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (lo, hi)
}
