//! Simulation dataset generation and on-disk layout.
//!
//! A dataset is a directory: `manifest.json` describing how the samples were
//! produced (phantom, material ranges, seeds, solver settings, failure
//! count) plus one binary file per sample. Each sample holds the per-node
//! input features, the solved displacements as ground truth, and the region
//! labels. Failed solves are skipped and counted; a majority of failures
//! aborts generation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{solve_static, MaterialRanges, MaterialSet, SolverConfig};
use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureMode, FeatureVectorSet};
use crate::geometry::{LabelledMesh, PhantomSpec, Region, BC_FIXED, BC_LOADED};
use crate::io::{
    atomic_write, expect_magic, open_input, read_f64_vec, read_u32, read_u64, read_u8,
    write_f64_slice, write_u32, write_u64, write_u8,
};
use crate::rng::{derive, rng_for, stream, unit_vector};

const SAMPLE_MAGIC: &[u8; 4] = b"BMSD";
const SAMPLE_VERSION: u32 = 1;

/// Which phase of the pipeline a dataset feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Holdout,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "holdout" => Ok(SplitTag::Holdout),
            other => Err(Error::config(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Simulations to attempt.
    pub simulations: usize,
    pub material_ranges: MaterialRanges,
    /// Upper bound on the probe displacement magnitude, metres.
    pub displacement_scale: f64,
    pub solver: SolverConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            simulations: 100,
            material_ranges: MaterialRanges::default(),
            displacement_scale: 0.005,
            solver: SolverConfig::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations == 0 {
            return Err(Error::config("simulations must be at least 1"));
        }
        if !(self.displacement_scale >= 0.0 && self.displacement_scale.is_finite()) {
            return Err(Error::config("displacement_scale must be finite and non-negative"));
        }
        self.material_ranges.validate()?;
        self.solver.validate()
    }
}

/// One successfully solved simulation, ready to serialize.
#[derive(Clone, Debug)]
pub struct SimulationRecord {
    /// Derived seed that produced this sample's draws.
    pub seed: u64,
    pub load: [f64; 3],
    pub materials: MaterialSet,
    pub newton_iterations: usize,
    pub mean_displacement_m: f64,
    pub max_displacement_m: f64,
    /// Features with ground truth attached.
    pub features: FeatureVectorSet,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub records: Vec<SimulationRecord>,
    pub failed: usize,
}

/// Uniform probe displacement: random direction biased into the domain
/// (flipped towards the mesh interior when it points away), magnitude
/// uniform in (0, scale].
fn sample_probe_load<R: rand::Rng>(rng: &mut R, mesh: &LabelledMesh, scale: f64) -> [f64; 3] {
    let dir = unit_vector(rng);
    let magnitude = scale * (1.0 - rng.gen::<f64>());
    if scale == 0.0 {
        return [0.0; 3];
    }

    let mut probe = [0.0f64; 3];
    let mut count = 0.0f64;
    for (n, &f) in mesh.bc_flags.iter().enumerate() {
        if f & BC_LOADED != 0 {
            for i in 0..3 {
                probe[i] += mesh.nodes[n][i];
            }
            count += 1.0;
        }
    }
    let mut lo = mesh.nodes[0];
    let mut hi = mesh.nodes[0];
    for p in &mesh.nodes {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let inward: [f64; 3] =
        std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]) - probe[i] / count.max(1.0));
    let dot: f64 = (0..3).map(|i| dir[i] * inward[i]).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    std::array::from_fn(|i| sign * magnitude * dir[i])
}

/// Runs `config.simulations` independent draws on one mesh. Per simulation:
/// region materials and a probe load are drawn from a seed derived for that
/// index, the static problem is solved, and features plus ground truth are
/// packaged. Solver failures are counted and skipped unless they exceed half
/// the requested count.
pub fn generate_dataset(
    mesh: &LabelledMesh,
    config: &GenerationConfig,
    seed: u64,
) -> Result<GeneratedDataset> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.simulations);
    let mut failed = 0usize;
    let mut last_failure = String::new();

    for sim in 0..config.simulations {
        let sim_seed = derive(seed, &[stream::SIMULATION, sim as u64]);
        let mut rng = rng_for(seed, &[stream::SIMULATION, sim as u64]);
        let materials = config.material_ranges.sample(&mut rng);
        let load = sample_probe_load(&mut rng, mesh, config.displacement_scale);

        let solution = match solve_static(mesh, &materials, load, &config.solver) {
            Ok(s) => s,
            Err(Error::Simulation(msg)) => {
                failed += 1;
                last_failure = format!("simulation {sim}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };

        let dirichlet: Vec<Option<[f64; 3]>> = mesh
            .bc_flags
            .iter()
            .map(|&f| {
                if f & BC_FIXED != 0 {
                    Some([0.0; 3])
                } else if f & BC_LOADED != 0 {
                    Some(load)
                } else {
                    None
                }
            })
            .collect();
        let mut features = assemble_features(mesh, &materials, &dirichlet)?;
        let magnitudes: Vec<f64> = solution
            .displacements
            .iter()
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .collect();
        let mean = magnitudes.iter().sum::<f64>() / magnitudes.len() as f64;
        let max = magnitudes.iter().fold(0.0f64, |m, &v| m.max(v));
        features.truth = Some(solution.displacements);

        records.push(SimulationRecord {
            seed: sim_seed,
            load,
            materials,
            newton_iterations: solution.newton_iterations,
            mean_displacement_m: mean,
            max_displacement_m: max,
            features,
        });
    }

    if 2 * failed > config.simulations {
        return Err(Error::simulation(format!(
            "{failed} of {} simulations failed; last failure: {last_failure}",
            config.simulations
        )));
    }
    Ok(GeneratedDataset { records, failed })
}

/// Per-sample entry in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub file: String,
    pub seed: u64,
    pub load: [f64; 3],
    pub materials: MaterialSet,
    pub newton_iterations: usize,
    pub mean_displacement_m: f64,
    pub max_displacement_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Stable identifier derived from the generation seed; training records
    /// the ids it consumed so evaluation can reject contaminated splits.
    pub dataset_id: u64,
    pub split: SplitTag,
    pub features: FeatureMode,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub node_count: usize,
    pub requested_simulations: usize,
    pub failed_simulations: usize,
    pub generation: GenerationConfig,
    /// Mean over samples of the per-sample mean displacement magnitude.
    pub mean_displacement_m: f64,
    pub max_displacement_m: f64,
    pub samples: Vec<SampleMeta>,
}

fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.bmsd")
}

fn write_sample(path: &Path, set: &FeatureVectorSet) -> Result<()> {
    let truth = set
        .truth
        .as_ref()
        .ok_or_else(|| Error::internal("sample without ground truth"))?;
    atomic_write(path, |w| {
        w.write_all(SAMPLE_MAGIC).map_err(Error::from)?;
        write_u32(w, SAMPLE_VERSION)?;
        write_u64(w, set.len() as u64)?;
        write_f64_slice(w, &set.features)?;
        for y in truth {
            write_f64_slice(w, y)?;
        }
        for &l in &set.labels {
            write_u8(w, l.as_u8())?;
        }
        Ok(())
    })
}

/// Reads one sample file. The feature mode comes from the manifest, not the
/// file, so the expected entry width must be supplied.
pub fn load_sample(path: &Path, mode: FeatureMode) -> Result<FeatureVectorSet> {
    let mut r = open_input(path)?;
    expect_magic(&mut r, SAMPLE_MAGIC, "sample")?;
    let version = read_u32(&mut r)?;
    if version != SAMPLE_VERSION {
        return Err(Error::compatibility(format!(
            "sample version {version}, expected {SAMPLE_VERSION}"
        )));
    }
    let n = read_u64(&mut r)? as usize;
    if n == 0 {
        return Err(Error::compatibility("sample with zero entries"));
    }
    let features = read_f64_vec(&mut r, n * mode.width())?;
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let v = read_f64_vec(&mut r, 3)?;
        truth.push([v[0], v[1], v[2]]);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(Region::from_u8(read_u8(&mut r)?)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::compatibility(format!(
            "trailing bytes in sample {}",
            path.display()
        )));
    }
    Ok(FeatureVectorSet { mode, features, labels, truth: Some(truth) })
}

/// Writes a generated dataset as a directory, optionally stripping the
/// material block (`FeatureMode::Pb`) from every sample on the way out.
pub fn write_dataset(
    dir: &Path,
    phantom: &PhantomSpec,
    mesh: &LabelledMesh,
    config: &GenerationConfig,
    seed: u64,
    split: SplitTag,
    mode: FeatureMode,
    data: &GeneratedDataset,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(data.records.len());
    for (i, rec) in data.records.iter().enumerate() {
        let file = sample_file_name(i);
        let set = match mode {
            FeatureMode::Pbk => rec.features.clone(),
            FeatureMode::Pb => rec.features.clone().strip_materials()?,
        };
        write_sample(&dir.join(&file), &set)?;
        samples.push(SampleMeta {
            file,
            seed: rec.seed,
            load: rec.load,
            materials: rec.materials,
            newton_iterations: rec.newton_iterations,
            mean_displacement_m: rec.mean_displacement_m,
            max_displacement_m: rec.max_displacement_m,
        });
    }

    let mean = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.mean_displacement_m).sum::<f64>() / samples.len() as f64
    };
    let max = samples.iter().map(|s| s.max_displacement_m).fold(0.0f64, f64::max);

    let manifest = DatasetManifest {
        dataset_id: derive(seed, &[stream::DATASET_ID]),
        split,
        features: mode,
        seed,
        phantom: phantom.clone(),
        node_count: mesh.node_count(),
        requested_simulations: config.simulations,
        failed_simulations: data.failed,
        generation: *config,
        mean_displacement_m: mean,
        max_displacement_m: max,
        samples,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::internal(format!("manifest encoding: {e}")))?;
    atomic_write(&dir.join("manifest.json"), |w| w.write_all(&json).map_err(Error::from))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let mut r = open_input(&path)?;
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::compatibility(format!("manifest {}: {e}", path.display())))
}

/// Loads a dataset directory: the manifest plus every sample, each checked
/// against the manifest's node count and feature mode.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<FeatureVectorSet>)> {
    let manifest = load_manifest(dir)?;
    let mut sets = Vec::with_capacity(manifest.samples.len());
    for meta in &manifest.samples {
        let set = load_sample(&dir.join(&meta.file), manifest.features)?;
        if set.len() != manifest.node_count {
            return Err(Error::compatibility(format!(
                "sample {} has {} entries, manifest says {}",
                meta.file,
                set.len(),
                manifest.node_count
            )));
        }
        sets.push(set);
    }
    Ok((manifest, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_phantom;

    fn small_mesh() -> (LabelledMesh, PhantomSpec) {
        let mut spec = PhantomSpec::example();
        spec.grid_resolution = [6, 6, 6];
        let mesh = generate_phantom(&spec).unwrap();
        (mesh, spec)
    }

    fn quick_config(simulations: usize, scale: f64) -> GenerationConfig {
        GenerationConfig {
            simulations,
            displacement_scale: scale,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn zero_scale_produces_zero_ground_truth() {
        let (mesh, _) = small_mesh();
        let out = generate_dataset(&mesh, &quick_config(1, 0.0), 5).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.failed, 0);
        let rec = &out.records[0];
        assert_eq!(rec.load, [0.0; 3]);
        assert_eq!(rec.mean_displacement_m, 0.0);
        for y in rec.features.truth.as_ref().unwrap() {
            assert_eq!(*y, [0.0; 3]);
        }
    }

    #[test]
    fn generation_is_deterministic_and_loads_point_inward() {
        let (mesh, _) = small_mesh();
        let config = quick_config(3, 0.004);
        let a = generate_dataset(&mesh, &config, 42).unwrap();
        let b = generate_dataset(&mesh, &config, 42).unwrap();
        assert_eq!(a.records.len(), 3);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.load, rb.load);
            assert_eq!(ra.features.features, rb.features.features);
            assert_eq!(ra.features.truth, rb.features.truth);
        }

        // The probe sits on the top face, so inward loads push down.
        for rec in &a.records {
            assert!(rec.load[2] < 0.0, "load {:?}", rec.load);
            let m = (rec.load.iter().map(|v| v * v).sum::<f64>()).sqrt();
            assert!(m > 0.0 && m <= 0.004 + 1e-12);
            assert!(rec.mean_displacement_m > 0.0);
            assert!(rec.max_displacement_m >= rec.mean_displacement_m);
        }

        let c = generate_dataset(&mesh, &config, 43).unwrap();
        assert_ne!(a.records[0].load, c.records[0].load);
    }

    #[test]
    fn majority_failures_abort_with_diagnostics() {
        let (mesh, _) = small_mesh();
        let mut config = quick_config(2, 0.12);
        config.solver.load_steps = 1;
        config.solver.max_newton_iterations = 4;
        let err = generate_dataset(&mesh, &config, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 of 2"), "{msg}");
    }

    #[test]
    fn roundtrip_through_directory_preserves_samples() {
        let (mesh, spec) = small_mesh();
        let config = quick_config(2, 0.003);
        let data = generate_dataset(&mesh, &config, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let manifest = write_dataset(
            &root,
            &spec,
            &mesh,
            &config,
            9,
            SplitTag::Train,
            FeatureMode::Pbk,
            &data,
        )
        .unwrap();
        assert_eq!(manifest.samples.len(), 2);
        assert_eq!(manifest.failed_simulations, 0);
        assert_eq!(manifest.node_count, mesh.node_count());
        assert!(manifest.mean_displacement_m > 0.0);

        let (loaded_manifest, sets) = load_dataset(&root).unwrap();
        assert_eq!(loaded_manifest.dataset_id, manifest.dataset_id);
        assert_eq!(loaded_manifest.split, SplitTag::Train);
        assert_eq!(sets.len(), 2);
        for (set, rec) in sets.iter().zip(&data.records) {
            assert_eq!(set.features, rec.features.features);
            assert_eq!(set.labels, rec.features.labels);
            assert_eq!(set.truth, rec.features.truth);
        }
    }

    #[test]
    fn stripped_datasets_roundtrip_with_seven_wide_rows() {
        let (mesh, spec) = small_mesh();
        let config = quick_config(1, 0.003);
        let data = generate_dataset(&mesh, &config, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds_pb");
        write_dataset(
            &root,
            &spec,
            &mesh,
            &config,
            13,
            SplitTag::Holdout,
            FeatureMode::Pb,
            &data,
        )
        .unwrap();
        let (manifest, sets) = load_dataset(&root).unwrap();
        assert_eq!(manifest.features, FeatureMode::Pb);
        assert_eq!(sets[0].mode, FeatureMode::Pb);
        assert_eq!(sets[0].row(0).len(), 7);
        // Positions and boundary blocks must survive the strip.
        let full = &data.records[0].features;
        assert_eq!(sets[0].row(3), &full.row(3)[0..7]);
    }

    #[test]
    fn corrupted_sample_is_rejected() {
        let (mesh, spec) = small_mesh();
        let config = quick_config(1, 0.003);
        let data = generate_dataset(&mesh, &config, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds_bad");
        let manifest = write_dataset(
            &root,
            &spec,
            &mesh,
            &config,
            21,
            SplitTag::Train,
            FeatureMode::Pbk,
            &data,
        )
        .unwrap();

        let sample_path = root.join(&manifest.samples[0].file);
        let mut bytes = std::fs::read(&sample_path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&sample_path, &bytes).unwrap();
        match load_dataset(&root) {
            Err(Error::Compatibility(_)) => {}
            other => panic!("expected compatibility error, got {other:?}"),
        }

        // Trailing garbage is caught too.
        let mut bytes = std::fs::read(&sample_path).unwrap();
        bytes[0] = b'B';
        bytes.push(0);
        std::fs::write(&sample_path, &bytes).unwrap();
        match load_dataset(&root) {
            Err(Error::Compatibility(_)) => {}
            other => panic!("expected compatibility error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (mesh, _) = small_mesh();
        assert!(generate_dataset(&mesh, &quick_config(0, 0.001), 1).is_err());
        assert!(generate_dataset(&mesh, &quick_config(1, -0.001), 1).is_err());
    }
}
