//! Synthetic phantom geometry.
//!
//! A phantom is an axis-aligned box of soft tissue containing an ellipsoidal
//! gland with an inner zone, a rigid bone region bounded by a half-space, and
//! a spherical probe footprint on the boundary. [`generate_phantom`] meshes
//! the box with a structured grid split into tetrahedra, labels every node by
//! region, and marks boundary conditions: bone nodes are fixed, nodes inside
//! the probe sphere carry the prescribed displacement.
//!
//! Region precedence at a point is inner zone, then gland, then bone, then
//! background, so an ellipsoid overlapping the bone half-space stays tissue.

mod bmsh;
mod tessellation;

pub use bmsh::{read_mesh, write_mesh};
pub use tessellation::{build_tessellation, Cuboid, Tessellation, TessellationConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tissue region of a node or sampled point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    WholeGland,
    CentralZone,
    Bone,
}

pub const REGIONS: [Region; 4] =
    [Region::Background, Region::WholeGland, Region::CentralZone, Region::Bone];

impl Region {
    pub fn as_u8(self) -> u8 {
        match self {
            Region::Background => 0,
            Region::WholeGland => 1,
            Region::CentralZone => 2,
            Region::Bone => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Region> {
        Ok(match v {
            0 => Region::Background,
            1 => Region::WholeGland,
            2 => Region::CentralZone,
            3 => Region::Bone,
            _ => return Err(Error::compatibility(format!("unknown region label {v}"))),
        })
    }
}

/// Axis-aligned ellipsoid: inside iff `sum(((x-c)/r)^2) <= 1`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.radii[i];
            s += d * d;
        }
        s <= 1.0
    }
}

/// Half-space: inside iff `unit(normal) . x >= offset`, with `offset` given
/// for the unit normal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl HalfSpace {
    fn unit_normal(&self) -> Result<[f64; 3]> {
        let n = self.normal;
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len <= 0.0 || !len.is_finite() {
            return Err(Error::config("half-space normal must be a nonzero finite vector"));
        }
        Ok([n[0] / len, n[1] / len, n[2] / len])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.unit_normal() {
            Ok(n) => n[0] * p[0] + n[1] * p[1] + n[2] * p[2] >= self.offset,
            Err(_) => false,
        }
    }
}

/// Spherical probe footprint centred on (or near) the domain boundary.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Probe {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Complete description of one synthetic phantom. Meshing is deterministic:
/// the spec alone reproduces the mesh bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Box side lengths in metres; the domain is `[0, L] x [0, W] x [0, H]`.
    pub domain_size: [f64; 3],
    /// Grid cells per axis; the mesh has `prod(res_i + 1)` nodes and
    /// `6 * prod(res_i)` tetrahedra.
    pub grid_resolution: [usize; 3],
    pub gland: Ellipsoid,
    pub central_zone: Ellipsoid,
    pub bone: HalfSpace,
    pub probe: Probe,
}

impl PhantomSpec {
    /// A 10 cm cube with a centred gland, bottom bone slab and a probe
    /// touching the top face. Useful as a starting point for configs.
    pub fn example() -> PhantomSpec {
        PhantomSpec {
            domain_size: [0.1, 0.1, 0.1],
            grid_resolution: [8, 8, 8],
            gland: Ellipsoid { center: [0.05, 0.05, 0.06], radii: [0.03, 0.025, 0.025] },
            central_zone: Ellipsoid { center: [0.05, 0.05, 0.06], radii: [0.015, 0.012, 0.012] },
            bone: HalfSpace { normal: [0.0, 0.0, -1.0], offset: -0.015 },
            probe: Probe { center: [0.05, 0.05, 0.1], radius: 0.022 },
        }
    }

    /// Region of a point under the precedence inner zone > gland > bone >
    /// background.
    pub fn classify(&self, p: [f64; 3]) -> Region {
        if self.central_zone.contains(p) {
            Region::CentralZone
        } else if self.gland.contains(p) {
            Region::WholeGland
        } else if self.bone.contains(p) {
            Region::Bone
        } else {
            Region::Background
        }
    }

    /// Checks geometric feasibility; every failure names the offending field.
    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.domain_size.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config(format!("domain_size[{i}] must be positive, got {l}")));
            }
        }
        for (i, &r) in self.grid_resolution.iter().enumerate() {
            if r < 2 {
                return Err(Error::config(format!(
                    "grid_resolution[{i}] must be at least 2, got {r}"
                )));
            }
        }
        for (name, e) in [("gland", &self.gland), ("central_zone", &self.central_zone)] {
            for i in 0..3 {
                if !(e.radii[i].is_finite() && e.radii[i] > 0.0) {
                    return Err(Error::config(format!("{name}.radii[{i}] must be positive")));
                }
            }
        }
        // Gland inside the domain box (its bounding box suffices exactly).
        for i in 0..3 {
            let lo = self.gland.center[i] - self.gland.radii[i];
            let hi = self.gland.center[i] + self.gland.radii[i];
            if lo < 0.0 || hi > self.domain_size[i] {
                return Err(Error::config(format!(
                    "gland leaves the domain on axis {i}: [{lo:.4}, {hi:.4}]"
                )));
            }
        }
        // Inner zone inside the gland: sufficient containment bound for
        // axis-aligned ellipsoids.
        let mut s = 0.0;
        for i in 0..3 {
            let d = (self.central_zone.center[i] - self.gland.center[i]).abs()
                + self.central_zone.radii[i];
            s += (d / self.gland.radii[i]) * (d / self.gland.radii[i]);
        }
        if s > 1.0 {
            return Err(Error::config(format!(
                "central_zone is not contained in the gland (containment bound {s:.3} > 1)"
            )));
        }
        let n = self.bone.unit_normal()?;
        if !self.bone.offset.is_finite() {
            return Err(Error::config("bone.offset must be finite"));
        }
        // Bone must claim some of the box but not all of it.
        let corners = box_corners(self.domain_size);
        let claimed = corners.iter().filter(|c| self.bone.contains(**c)).count();
        if claimed == 0 {
            return Err(Error::config("bone half-space misses the domain entirely"));
        }
        if claimed == 8 {
            return Err(Error::config("bone half-space swallows the whole domain"));
        }
        if !(self.probe.radius.is_finite() && self.probe.radius > 0.0) {
            return Err(Error::config("probe.radius must be positive"));
        }
        // The probe sphere must reach the domain boundary.
        let d = distance_to_box_surface(self.probe.center, self.domain_size);
        if d > self.probe.radius {
            return Err(Error::config(format!(
                "probe sphere (radius {:.4}) does not reach the domain boundary (distance {d:.4})",
                self.probe.radius
            )));
        }
        // ... and must stay clear of the bone half-space, otherwise a node
        // could be both fixed and loaded.
        let reach = n[0] * self.probe.center[0]
            + n[1] * self.probe.center[1]
            + n[2] * self.probe.center[2]
            + self.probe.radius;
        if reach >= self.bone.offset {
            return Err(Error::config("probe sphere intersects the bone half-space"));
        }
        Ok(())
    }

    /// Deterministically jitters centres, radii and the probe while keeping
    /// the spec feasible. Used to spawn families of related phantoms.
    pub fn randomize(&self, seed: u64) -> Result<PhantomSpec> {
        let mut r = rng::rng_for(seed, &[rng::stream::PHANTOM]);
        for _ in 0..200 {
            let mut s = self.clone();
            let jc = |r: &mut rand_chacha::ChaCha8Rng, c: f64, amp: f64| {
                c + r.gen_range(-amp..amp)
            };
            let js = |r: &mut rand_chacha::ChaCha8Rng, v: f64| v * r.gen_range(0.85..1.15);
            for i in 0..3 {
                s.gland.center[i] = jc(&mut r, self.gland.center[i], 0.2 * self.gland.radii[i]);
                s.gland.radii[i] = js(&mut r, self.gland.radii[i]);
                s.central_zone.radii[i] = js(&mut r, self.central_zone.radii[i]);
            }
            s.central_zone.center = s.gland.center;
            // Slide the probe along the face plane it touches.
            for i in 0..2 {
                s.probe.center[i] = jc(&mut r, self.probe.center[i], 0.1 * self.domain_size[i]);
            }
            s.probe.radius = js(&mut r, self.probe.radius);
            if s.validate().is_ok() {
                return Ok(s);
            }
        }
        Err(Error::config("could not find a feasible jittered phantom in 200 attempts"))
    }
}

fn box_corners(l: [f64; 3]) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (c, corner) in out.iter_mut().enumerate() {
        for i in 0..3 {
            corner[i] = if c >> i & 1 == 1 { l[i] } else { 0.0 };
        }
    }
    out
}

fn distance_to_box_surface(p: [f64; 3], l: [f64; 3]) -> f64 {
    let inside = (0..3).all(|i| p[i] >= 0.0 && p[i] <= l[i]);
    if inside {
        (0..3).map(|i| p[i].min(l[i] - p[i])).fold(f64::INFINITY, f64::min)
    } else {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (0.0f64 - p[i]).max(p[i] - l[i]).max(0.0);
            s += d * d;
        }
        s.sqrt()
    }
}

/// Boundary-condition flag bits per node.
pub const BC_FIXED: u8 = 1;
pub const BC_LOADED: u8 = 2;

/// Tetrahedral mesh with region labels and boundary-condition flags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledMesh {
    pub nodes: Vec<[f64; 3]>,
    pub tets: Vec<[u32; 4]>,
    pub labels: Vec<Region>,
    pub bc_flags: Vec<u8>,
}

impl LabelledMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_fixed(&self, n: usize) -> bool {
        self.bc_flags[n] & BC_FIXED != 0
    }

    pub fn is_loaded(&self, n: usize) -> bool {
        self.bc_flags[n] & BC_LOADED != 0
    }

    pub fn fixed_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.is_fixed(n)).collect()
    }

    pub fn loaded_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&n| self.is_loaded(n)).collect()
    }

    pub fn nodes_with_label(&self, r: Region) -> usize {
        self.labels.iter().filter(|&&l| l == r).count()
    }

    /// Axis-aligned bounding box of the nodes as (min, max).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }
}

/// Signed volume of a tetrahedron; positive for the orientation used by the
/// structured split below.
pub fn tet_signed_volume(p0: [f64; 3], p1: [f64; 3], p2: [f64; 3], p3: [f64; 3]) -> f64 {
    let a = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
    let b = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
    let c = [p3[0] - p0[0], p3[1] - p0[1], p3[2] - p0[2]];
    let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]);
    det / 6.0
}

/// Six positively oriented tetrahedra per grid cell, all sharing the cell's
/// main diagonal. Corner order: bit 0 = +x, bit 1 = +y, bit 2 = +z.
const CELL_TETS: [[usize; 4]; 6] = [
    [0b000, 0b001, 0b011, 0b111],
    [0b000, 0b011, 0b010, 0b111],
    [0b000, 0b010, 0b110, 0b111],
    [0b000, 0b110, 0b100, 0b111],
    [0b000, 0b100, 0b101, 0b111],
    [0b000, 0b101, 0b001, 0b111],
];

/// Structured grid mesh of a box: all nodes background, no boundary
/// conditions. The labelled phantom builder and the solver verification
/// meshes both start from this.
pub fn structured_grid(domain_size: [f64; 3], resolution: [usize; 3]) -> LabelledMesh {
    let [nx, ny, nz] = resolution;
    let [lx, ly, lz] = domain_size;
    assert!(nx > 0 && ny > 0 && nz > 0, "resolution must be positive");
    let (sx, sy, sz) = (lx / nx as f64, ly / ny as f64, lz / nz as f64);

    let node_index = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([i as f64 * sx, j as f64 * sy, k as f64 * sz]);
            }
        }
    }

    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |bits: usize| {
                    node_index(i + (bits & 1), j + (bits >> 1 & 1), k + (bits >> 2 & 1)) as u32
                };
                for tet in &CELL_TETS {
                    tets.push([corner(tet[0]), corner(tet[1]), corner(tet[2]), corner(tet[3])]);
                }
            }
        }
    }

    let labels = vec![Region::Background; nodes.len()];
    let bc_flags = vec![0u8; nodes.len()];
    LabelledMesh { nodes, tets, labels, bc_flags }
}

/// Meshes and labels a phantom. Fails if any required region ends up with no
/// nodes, if no node falls in the probe sphere, or if a node would be both
/// fixed and loaded.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabelledMesh> {
    spec.validate()?;
    let LabelledMesh { nodes, tets, .. } = structured_grid(spec.domain_size, spec.grid_resolution);

    let labels: Vec<Region> = nodes.iter().map(|&p| spec.classify(p)).collect();

    let mut bc_flags = vec![0u8; nodes.len()];
    for (n, &p) in nodes.iter().enumerate() {
        if labels[n] == Region::Bone {
            bc_flags[n] |= BC_FIXED;
        }
        let d = [
            p[0] - spec.probe.center[0],
            p[1] - spec.probe.center[1],
            p[2] - spec.probe.center[2],
        ];
        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= spec.probe.radius * spec.probe.radius {
            bc_flags[n] |= BC_LOADED;
        }
    }

    for (n, &f) in bc_flags.iter().enumerate() {
        if f & BC_FIXED != 0 && f & BC_LOADED != 0 {
            return Err(Error::simulation(format!("node {n} is both fixed and loaded")));
        }
    }
    for region in [Region::WholeGland, Region::CentralZone, Region::Bone] {
        if !labels.contains(&region) {
            return Err(Error::simulation(format!(
                "phantom grid resolves no {region:?} nodes; refine the grid or grow the region"
            )));
        }
    }
    if !bc_flags.iter().any(|f| f & BC_LOADED != 0) {
        return Err(Error::simulation("no node falls inside the probe sphere"));
    }
    if bc_flags.iter().all(|f| *f != 0) {
        return Err(Error::simulation("no free nodes remain"));
    }

    let mesh = LabelledMesh { nodes, tets, labels, bc_flags };
    debug_assert!(mesh.tets.iter().all(|t| {
        tet_signed_volume(
            mesh.nodes[t[0] as usize],
            mesh.nodes[t[1] as usize],
            mesh.nodes[t[2] as usize],
            mesh.nodes[t[3] as usize],
        ) > 0.0
    }));
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_spec_is_feasible_and_meshes() {
        let spec = PhantomSpec::example();
        spec.validate().unwrap();
        let mesh = generate_phantom(&spec).unwrap();
        assert_eq!(mesh.node_count(), 9 * 9 * 9);
        assert_eq!(mesh.tets.len(), 6 * 8 * 8 * 8);
        assert!(mesh.nodes_with_label(Region::WholeGland) > 0);
        assert!(mesh.nodes_with_label(Region::CentralZone) > 0);
        assert!(mesh.nodes_with_label(Region::Bone) > 0);
        assert!(!mesh.loaded_nodes().is_empty());
    }

    #[test]
    fn all_tets_positively_oriented_with_full_volume() {
        let spec = PhantomSpec::example();
        let mesh = generate_phantom(&spec).unwrap();
        let mut total = 0.0;
        for t in &mesh.tets {
            let v = tet_signed_volume(
                mesh.nodes[t[0] as usize],
                mesh.nodes[t[1] as usize],
                mesh.nodes[t[2] as usize],
                mesh.nodes[t[3] as usize],
            );
            assert!(v > 0.0, "non-positive tet volume {v}");
            total += v;
        }
        let box_vol: f64 = spec.domain_size.iter().product();
        assert!((total - box_vol).abs() < 1e-12 * box_vol, "tet volumes tile the box");
    }

    #[test]
    fn classification_precedence_inner_zone_over_gland_over_bone() {
        let spec = PhantomSpec::example();
        assert_eq!(spec.classify([0.05, 0.05, 0.06]), Region::CentralZone);
        assert_eq!(spec.classify([0.05, 0.05, 0.082]), Region::WholeGland);
        assert_eq!(spec.classify([0.01, 0.01, 0.005]), Region::Bone);
        assert_eq!(spec.classify([0.01, 0.01, 0.09]), Region::Background);
        // A gland point inside the bone half-space stays gland.
        let mut overlapping = spec.clone();
        overlapping.gland.center = [0.05, 0.05, 0.04];
        overlapping.central_zone.center = [0.05, 0.05, 0.04];
        assert_eq!(overlapping.classify([0.05, 0.05, 0.016]), Region::WholeGland);
    }

    #[test]
    fn fixed_and_loaded_sets_are_disjoint_and_nonempty() {
        let mesh = generate_phantom(&PhantomSpec::example()).unwrap();
        let fixed = mesh.fixed_nodes();
        let loaded = mesh.loaded_nodes();
        assert!(!fixed.is_empty() && !loaded.is_empty());
        for n in &loaded {
            assert!(!mesh.is_fixed(*n));
        }
        // Bone nodes are exactly the fixed nodes.
        for n in 0..mesh.node_count() {
            assert_eq!(mesh.is_fixed(n), mesh.labels[n] == Region::Bone);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected_with_field_hints() {
        let mut s = PhantomSpec::example();
        s.gland.center = [0.01, 0.05, 0.06];
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("gland"), "{err}");

        let mut s = PhantomSpec::example();
        s.central_zone.radii = [0.03, 0.025, 0.025];
        assert!(s.validate().unwrap_err().to_string().contains("central_zone"));

        let mut s = PhantomSpec::example();
        s.probe.center = [0.05, 0.05, 0.05];
        s.probe.radius = 0.01;
        assert!(s.validate().unwrap_err().to_string().contains("probe"));

        let mut s = PhantomSpec::example();
        s.probe.center = [0.05, 0.05, 0.02];
        s.probe.radius = 0.03;
        assert!(s.validate().unwrap_err().to_string().contains("bone"));

        let mut s = PhantomSpec::example();
        s.bone.normal = [0.0, 0.0, 0.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn too_coarse_grid_cannot_resolve_inner_zone() {
        let mut s = PhantomSpec::example();
        s.grid_resolution = [2, 2, 2];
        match generate_phantom(&s) {
            Err(Error::Simulation(msg)) => assert!(msg.contains("resolves no"), "{msg}"),
            other => panic!("expected simulation failure, got {other:?}"),
        }
    }

    #[test]
    fn meshing_is_deterministic() {
        let spec = PhantomSpec::example();
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    }

    #[test]
    fn randomize_yields_distinct_feasible_specs() {
        let base = PhantomSpec::example();
        let a = base.randomize(1).unwrap();
        let b = base.randomize(2).unwrap();
        a.validate().unwrap();
        b.validate().unwrap();
        assert_ne!(a.gland.center, b.gland.center);
        // Same seed reproduces the same spec.
        let a2 = base.randomize(1).unwrap();
        assert_eq!(a.gland.center, a2.gland.center);
        assert_eq!(a.probe.radius, a2.probe.radius);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = PhantomSpec::example();
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec.gland.center, back.gland.center);
        assert_eq!(spec.grid_resolution, back.grid_resolution);
    }
}
