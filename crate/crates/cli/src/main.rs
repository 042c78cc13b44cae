//! `bms`: phantom generation, simulation, training, prediction, and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 simulation failure,
//! 4 incompatible artifacts, 5 i/o or internal errors. `BMS_THREADS`
//! caps the worker threads used during training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bms_core::error::{Error, Result};
use bms_core::evaluation::{evaluate_holdout, EvalConfig};
use bms_core::features::FeatureMode;
use bms_core::fesolver::{
    generate_dataset, load_dataset, load_manifest, load_sample, verify, write_dataset,
    DatasetManifest, GenerationConfig, SplitTag,
};
use bms_core::geometry::{generate_phantom, read_mesh, write_mesh, LabelledMesh, PhantomSpec};
use bms_core::inference::{minimum_passes, predict, write_predictions};
use bms_core::io::atomic_write;
use bms_core::network::{load_checkpoint, save_checkpoint};
use bms_core::tensorcore::Tensor;
use bms_core::training::{
    ablation_csv, ablation_run, clouds_from_sets, render_ablation, train, AblationSpec,
    CloudSample, TrainConfig,
};

#[derive(Parser)]
#[command(name = "bms", version, about = "Soft-tissue deformation surrogate pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled phantom mesh (mesh.bmsh + phantom.json).
    Phantom {
        /// Phantom geometry as JSON; omitted means the built-in example.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Jitter the geometry deterministically from this seed.
        #[arg(long)]
        randomize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve probe-load simulations on a phantom and write a dataset.
    Simulate {
        /// Directory produced by `bms phantom`.
        #[arg(long)]
        phantom: PathBuf,
        /// Generation settings as JSON; omitted means defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the simulation count from the config.
        #[arg(long)]
        simulations: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split tag stamped on the dataset: train, validation, or holdout.
        #[arg(long, default_value = "train")]
        split: String,
        /// Feature encoding: pbk (with materials) or pb.
        #[arg(long, default_value = "pbk")]
        features: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on simulated datasets (model.bmck + train_log.csv).
    Train {
        /// Training dataset directories.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        data: Vec<PathBuf>,
        /// Validation dataset directories.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        val: Vec<PathBuf>,
        /// Training settings as JSON; omitted means defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature encoding override; pb drops the material columns from
        /// full datasets.
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict displacements for one dataset sample (.bmpr).
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory holding the sample.
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Points per network block.
        #[arg(long, default_value_t = 512)]
        block: usize,
        /// Pass budget; 0 means the minimum that covers every node.
        #[arg(long, default_value_t = 0)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on holdout datasets (report.txt + report.csv).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        holdout: Vec<PathBuf>,
        /// Evaluation settings as JSON; omitted means defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one training knob and tabulate holdout metrics.
    Ablate {
        /// Knob to sweep: gfv or materials.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; gfv sizes, or feature encodings.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        val: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        holdout: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-element verification battery.
    VerifyFe {
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Parses a JSON config file, or falls back to the default value.
fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("malformed config {}: {e}", p.display())))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| w.write_all(text.as_bytes()).map_err(Error::from))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::internal(format!("encoding {}: {e}", path.display())))?;
    atomic_write(path, |w| {
        w.write_all(&json)?;
        w.write_all(b"\n").map_err(Error::from)
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PhantomManifest {
    seed: u64,
    randomized: bool,
    spec: PhantomSpec,
    nodes: usize,
    tets: usize,
    region_nodes: BTreeMap<String, usize>,
}

fn load_phantom(dir: &Path) -> Result<(PhantomManifest, LabelledMesh)> {
    let text = std::fs::read_to_string(dir.join("phantom.json")).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", dir.join("phantom.json").display()))
    })?;
    let manifest: PhantomManifest = serde_json::from_str(&text)
        .map_err(|e| Error::compatibility(format!("malformed phantom manifest: {e}")))?;
    let mesh = read_mesh(&dir.join("mesh.bmsh"))?;
    Ok((manifest, mesh))
}

fn cmd_phantom(config: Option<&Path>, randomize: bool, seed: u64, out: &Path) -> Result<()> {
    let base: PhantomSpec = match config {
        None => PhantomSpec::example(),
        Some(p) => load_config::<PhantomSpecWrapper>(Some(p))?.0,
    };
    let spec = if randomize { base.randomize(seed)? } else { base };
    let mesh = generate_phantom(&spec)?;

    let mut region_nodes = BTreeMap::new();
    for &l in &mesh.labels {
        *region_nodes.entry(format!("{l:?}")).or_insert(0usize) += 1;
    }
    std::fs::create_dir_all(out)?;
    write_mesh(&out.join("mesh.bmsh"), &mesh)?;
    write_json(
        &out.join("phantom.json"),
        &PhantomManifest {
            seed,
            randomized: randomize,
            spec,
            nodes: mesh.node_count(),
            tets: mesh.tets.len(),
            region_nodes,
        },
    )?;
    println!(
        "phantom: {} nodes, {} tetrahedra -> {}",
        mesh.node_count(),
        mesh.tets.len(),
        out.display()
    );
    Ok(())
}

/// Newtype so `load_config` can default to the example geometry.
struct PhantomSpecWrapper(PhantomSpec);

impl Default for PhantomSpecWrapper {
    fn default() -> Self {
        PhantomSpecWrapper(PhantomSpec::example())
    }
}

impl<'de> serde::Deserialize<'de> for PhantomSpecWrapper {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        PhantomSpec::deserialize(d).map(PhantomSpecWrapper)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    phantom: &Path,
    config: Option<&Path>,
    simulations: Option<usize>,
    seed: u64,
    split: &str,
    features: &str,
    out: &Path,
) -> Result<()> {
    let split = SplitTag::parse(split)?;
    let mode = FeatureMode::parse(features)?;
    let (manifest, mesh) = load_phantom(phantom)?;
    let mut config: GenerationConfig = load_config(config)?;
    if let Some(n) = simulations {
        config.simulations = n;
    }
    let data = generate_dataset(&mesh, &config, seed)?;
    let written = write_dataset(out, &manifest.spec, &mesh, &config, seed, split, mode, &data)?;
    println!(
        "dataset {:#018x}: {} samples ({} failed) tagged '{}' -> {}",
        written.dataset_id,
        written.samples.len(),
        written.failed_simulations,
        written.split.as_str(),
        out.display()
    );
    Ok(())
}

/// Loads dataset directories, enforcing a split tag and a feature mode.
/// Full datasets can feed a material-free run (the material columns are
/// dropped); the reverse cannot be satisfied.
fn load_split(
    dirs: &[PathBuf],
    expect: SplitTag,
    mode: FeatureMode,
) -> Result<(Vec<CloudSample>, Vec<u64>, Vec<DatasetManifest>)> {
    let mut clouds = Vec::new();
    let mut ids = Vec::new();
    let mut manifests = Vec::new();
    for dir in dirs {
        let (manifest, mut sets) = load_dataset(dir)?;
        if manifest.split != expect {
            return Err(Error::compatibility(format!(
                "{} is tagged '{}', expected '{}'",
                dir.display(),
                manifest.split.as_str(),
                expect.as_str()
            )));
        }
        if manifest.features != mode {
            if mode == FeatureMode::Pb && manifest.features == FeatureMode::Pbk {
                sets = sets
                    .into_iter()
                    .map(|s| s.strip_materials())
                    .collect::<Result<Vec<_>>>()?;
            } else {
                return Err(Error::compatibility(format!(
                    "{} carries '{}' features, expected '{}'",
                    dir.display(),
                    manifest.features.as_str(),
                    mode.as_str()
                )));
            }
        }
        clouds.extend(clouds_from_sets(&sets)?);
        ids.push(manifest.dataset_id);
        manifests.push(manifest);
    }
    Ok((clouds, ids, manifests))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &[PathBuf],
    val: &[PathBuf],
    config: Option<&Path>,
    features: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut config: TrainConfig = load_config(config)?;
    if let Some(f) = features {
        config.feature_mode = FeatureMode::parse(f)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    let (train_clouds, mut ids, _) = load_split(data, SplitTag::Train, config.feature_mode)?;
    let (val_clouds, val_ids, _) = load_split(val, SplitTag::Validation, config.feature_mode)?;
    ids.extend(val_ids);

    let outcome = train(&config, &train_clouds, &val_clouds, &ids)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&outcome.params, &out.join("model.bmck"))?;
    write_text(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    println!(
        "trained {} epochs on {} cases; best validation {:.3} mm at epoch {} -> {}",
        outcome.log.rows.len(),
        train_clouds.len(),
        outcome.best_val_mae_mm,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    model: &Path,
    data: &Path,
    sample: usize,
    block: usize,
    passes: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let params = load_checkpoint(model)?;
    let manifest = load_manifest(data)?;
    if manifest.features != params.feature_mode {
        return Err(Error::compatibility(format!(
            "model expects '{}' features, dataset {} carries '{}'",
            params.feature_mode.as_str(),
            data.display(),
            manifest.features.as_str()
        )));
    }
    let meta = manifest.samples.get(sample).ok_or_else(|| {
        Error::config(format!(
            "sample {sample} out of range; dataset has {}",
            manifest.samples.len()
        ))
    })?;
    let set = load_sample(&data.join(&meta.file), manifest.features)?;
    let features = Tensor::new(set.len(), set.mode.width(), set.features.clone());
    let passes = if passes == 0 { minimum_passes(set.len(), block) } else { passes };

    let start = std::time::Instant::now();
    let prediction = predict(&params, &features, block, passes, seed)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    write_predictions(out, &prediction, latency_ms)?;
    println!(
        "predicted {} nodes in {passes} passes ({latency_ms:.1} ms) -> {}",
        set.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    model: &Path,
    holdout: &[PathBuf],
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let params = load_checkpoint(model)?;
    let mut config: EvalConfig = load_config(config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let mut sets = Vec::new();
    for dir in holdout {
        sets.push(load_dataset(dir)?);
    }
    let report = evaluate_holdout(&params, &sets, &config)?;
    std::fs::create_dir_all(out)?;
    report.write(out)?;
    print!("{}", report.render());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    axis: &str,
    values: Option<&str>,
    data: &[PathBuf],
    val: &[PathBuf],
    holdout: &[PathBuf],
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut config: TrainConfig = load_config(config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let spec = match axis {
        "gfv" => {
            let values = values.ok_or_else(|| Error::config("--values required for gfv axis"))?;
            let sizes = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::config(format!("bad gfv size '{v}': {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            AblationSpec::GfvSizes(sizes)
        }
        "materials" => {
            let modes = match values {
                None => vec![FeatureMode::Pbk, FeatureMode::Pb],
                Some(v) => v
                    .split(',')
                    .map(|m| FeatureMode::parse(m.trim()))
                    .collect::<Result<Vec<_>>>()?,
            };
            AblationSpec::FeatureModes(modes)
        }
        other => {
            return Err(Error::config(format!(
                "unknown ablation axis '{other}' (expected gfv or materials)"
            )))
        }
    };

    // Ablation always consumes the full encoding and strips per variant.
    let (train_clouds, mut ids, _) = load_split(data, SplitTag::Train, config.feature_mode)?;
    let (val_clouds, val_ids, _) = load_split(val, SplitTag::Validation, config.feature_mode)?;
    let (holdout_clouds, holdout_ids, _) =
        load_split(holdout, SplitTag::Holdout, config.feature_mode)?;
    ids.extend(val_ids);
    for h in &holdout_ids {
        if ids.contains(h) {
            return Err(Error::compatibility(format!(
                "holdout dataset {h:#018x} also appears in the training inputs"
            )));
        }
    }

    let rows = ablation_run(&config, &spec, &train_clouds, &val_clouds, &holdout_clouds, &ids)?;
    std::fs::create_dir_all(out)?;
    write_text(&out.join("ablation.txt"), &render_ablation(&rows))?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    print!("{}", render_ablation(&rows));
    Ok(())
}

fn cmd_verify_fe(out: Option<&Path>) -> Result<()> {
    let report = verify::run_verification()?;
    let text = report.render();
    print!("{text}");
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    if !report.passed() {
        return Err(Error::simulation("finite-element verification failed"));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { config, randomize, seed, out } => {
            cmd_phantom(config.as_deref(), randomize, seed, &out)
        }
        Command::Simulate { phantom, config, simulations, seed, split, features, out } => {
            cmd_simulate(&phantom, config.as_deref(), simulations, seed, &split, &features, &out)
        }
        Command::Train { data, val, config, features, seed, epochs, out } => {
            cmd_train(&data, &val, config.as_deref(), features.as_deref(), seed, epochs, &out)
        }
        Command::Predict { model, data, sample, block, passes, seed, out } => {
            cmd_predict(&model, &data, sample, block, passes, seed, &out)
        }
        Command::Evaluate { model, holdout, config, seed, out } => {
            cmd_evaluate(&model, &holdout, config.as_deref(), seed, &out)
        }
        Command::Ablate { axis, values, data, val, holdout, config, seed, out } => cmd_ablate(
            &axis,
            values.as_deref(),
            &data,
            &val,
            &holdout,
            config.as_deref(),
            seed,
            &out,
        ),
        Command::VerifyFe { out } => cmd_verify_fe(out.as_deref()),
    }
}
