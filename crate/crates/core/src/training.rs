//! Bootstrap-aggregated training.
//!
//! Each simulation is one training case: a cloud of per-node feature
//! vectors with the solved displacement field as the target. Every epoch
//! shuffles the cases, walks them in minibatches, and draws one fixed-size
//! bootstrap (uniform sampling with replacement) from each case in the
//! minibatch, so the network always sees blocks of the same size
//! regardless of mesh resolution. Gradients are averaged over the
//! minibatch and applied with Adam; batch-norm running statistics follow
//! the minibatch mean of the per-member batch statistics. After every
//! epoch the model is scored on the validation cases with the bagged
//! inference path, and the best-validation parameter set is retained.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{nodal_errors, summarize, MetricSummary};
use crate::features::{FeatureMode, FeatureVectorSet};
use crate::geometry::Region;
use crate::inference::{minimum_passes, predict};
use crate::network::{
    forward, insert_parameters, is_trainable, NetworkConfig, NetworkParameters,
};
use crate::rng::{derive, rng_for, stream};
use crate::tensorcore::{BatchStats, Tape, Tensor};

/// Momentum of the batch-norm running statistics.
const BN_MOMENTUM: f64 = 0.9;

/// One training or evaluation case: per-node features with the reference
/// displacement field and region labels.
#[derive(Clone, Debug)]
pub struct CloudSample {
    /// `n x d` feature matrix.
    pub features: Tensor,
    /// `n x 3` reference displacements (metres).
    pub truth: Tensor,
    pub labels: Vec<Region>,
}

impl CloudSample {
    pub fn from_set(set: &FeatureVectorSet) -> Result<CloudSample> {
        let truth = set
            .truth
            .as_ref()
            .ok_or_else(|| Error::compatibility("sample lacks reference displacements"))?;
        let n = set.len();
        let mut t = Tensor::zeros(n, 3);
        for (i, u) in truth.iter().enumerate() {
            for j in 0..3 {
                t.set(i, j, u[j]);
            }
        }
        Ok(CloudSample {
            features: Tensor::new(n, set.mode.width(), set.features.clone()),
            truth: t,
            labels: set.labels.clone(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn mode(&self) -> FeatureMode {
        match self.features.cols() {
            9 => FeatureMode::Pbk,
            7 => FeatureMode::Pb,
            w => panic!("cloud has unsupported feature width {w}"),
        }
    }

    /// The same cloud restricted to `mode`'s feature columns (position and
    /// boundary components come first, material moduli last).
    pub fn with_mode(&self, mode: FeatureMode) -> Result<CloudSample> {
        let have = self.features.cols();
        let want = mode.width();
        if want == have {
            return Ok(self.clone());
        }
        if want > have {
            return Err(Error::config("cannot add material features to a cloud lacking them"));
        }
        let n = self.node_count();
        let mut f = Tensor::zeros(n, want);
        for i in 0..n {
            for j in 0..want {
                f.set(i, j, self.features.get(i, j));
            }
        }
        Ok(CloudSample { features: f, truth: self.truth.clone(), labels: self.labels.clone() })
    }

    pub fn truth_rows(&self) -> Vec<[f64; 3]> {
        (0..self.node_count())
            .map(|i| [self.truth.get(i, 0), self.truth.get(i, 1), self.truth.get(i, 2)])
            .collect()
    }
}

pub fn clouds_from_sets(sets: &[FeatureVectorSet]) -> Result<Vec<CloudSample>> {
    sets.iter().map(CloudSample::from_set).collect()
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub feature_mode: FeatureMode,
    pub gfv_size: usize,
    /// Bootstrap size: points drawn (with replacement) per case.
    pub points_per_cloud: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub orthogonality_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            feature_mode: FeatureMode::Pbk,
            gfv_size: 256,
            points_per_cloud: 512,
            minibatch: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 40,
            dropout_rate: 0.25,
            orthogonality_weight: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_cloud < 2 {
            return Err(Error::config("points_per_cloud must be at least 2"));
        }
        if self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::config("minibatch and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        self.network_config().validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: self.feature_mode.width(),
            gfv_size: self.gfv_size,
            dropout_rate: self.dropout_rate,
            orthogonality_weight: self.orthogonality_weight,
        }
    }
}

/// `count` uniform with-replacement draws from `0..n`.
pub fn bootstrap_sample<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<u32> {
    assert!(n > 0 && n <= u32::MAX as usize);
    (0..count).map(|_| rng.gen_range(0..n as u32)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over the trainable tensors named in `grads`.
pub fn adam_step(
    tensors: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        if !is_trainable(name) {
            continue;
        }
        let Some(p) = tensors.get_mut(name) else { continue };
        assert_eq!((p.rows(), p.cols()), (g.rows(), g.cols()), "{name}");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let (ps, ms, vs, gs) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), g.as_slice());
        for i in 0..gs.len() {
            ms[i] = beta1 * ms[i] + (1.0 - beta1) * gs[i];
            vs[i] = beta2 * vs[i] + (1.0 - beta2) * gs[i] * gs[i];
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            ps[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae_mm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mae_mm,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.3}\n",
                r.epoch, r.train_loss, r.val_mae_mm, r.seconds
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrainLog> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::compatibility(format!("malformed log line {}", i + 1)));
            }
            let field = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::compatibility(format!("log line {}: {e}", i + 1)))
            };
            rows.push(EpochRow {
                epoch: parts[0]
                    .parse()
                    .map_err(|e| Error::compatibility(format!("log line {}: {e}", i + 1)))?,
                train_loss: field(parts[1])?,
                val_mae_mm: field(parts[2])?,
                seconds: field(parts[3])?,
            });
        }
        Ok(TrainLog { rows })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation error.
    pub params: NetworkParameters,
    pub best_epoch: usize,
    pub best_val_mae_mm: f64,
    pub log: TrainLog,
}

/// Worker count `avail` capped by a `BMS_THREADS`-style value.
fn workers_from(env: Option<&str>, avail: usize) -> usize {
    let avail = avail.max(1);
    match env.and_then(|s| s.trim().parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => avail.min(cap),
        _ => avail,
    }
}

/// Parallel width for minibatch member evaluation: the machine's available
/// parallelism, capped by the `BMS_THREADS` environment variable.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    workers_from(std::env::var("BMS_THREADS").ok().as_deref(), avail)
}

struct MemberResult {
    loss: f64,
    grads: Vec<Tensor>,
    stats: Vec<(String, BatchStats)>,
}

fn member_pass(
    params: &NetworkParameters,
    names: &[String],
    cloud: &CloudSample,
    boot: &[u32],
    mut dropout_rng: ChaCha8Rng,
) -> Result<MemberResult> {
    let d = cloud.features.cols();
    let s = boot.len();
    let mut x = Tensor::zeros(s, d);
    let mut y = Tensor::zeros(s, 3);
    for (row, &idx) in boot.iter().enumerate() {
        let i = idx as usize;
        for j in 0..d {
            x.set(row, j, cloud.features.get(i, j));
        }
        for j in 0..3 {
            y.set(row, j, cloud.truth.get(i, j));
        }
    }

    let mut tape = Tape::new();
    let ids = insert_parameters(&mut tape, params, true);
    let xid = tape.constant(x);
    let arts = forward(&mut tape, params, &ids, xid, true, Some(&mut dropout_rng))?;
    let tid = tape.constant(y);
    let mse = tape.mse(arts.prediction, tid);
    let loss = match arts.transform_penalty {
        Some(p) => {
            let weighted = tape.scale(p, params.config.orthogonality_weight);
            tape.add(mse, weighted)
        }
        None => mse,
    };
    let loss_value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let gvec = names
        .iter()
        .map(|n| {
            let t = params.tensor(n);
            grads.get_or_zeros(ids[n], t.rows(), t.cols())
        })
        .collect();
    Ok(MemberResult { loss: loss_value, grads: gvec, stats: arts.batch_stats })
}

/// Per-channel mean and standard deviation over every node of every cloud;
/// constant channels get unit scale so standardisation stays finite.
fn feature_statistics(clouds: &[CloudSample]) -> (Vec<f64>, Vec<f64>) {
    let d = clouds[0].features.cols();
    let mut mean = vec![0.0f64; d];
    let mut count = 0.0f64;
    for c in clouds {
        for i in 0..c.node_count() {
            for j in 0..d {
                mean[j] += c.features.get(i, j);
            }
        }
        count += c.node_count() as f64;
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0f64; d];
    for c in clouds {
        for i in 0..c.node_count() {
            for j in 0..d {
                let dv = c.features.get(i, j) - mean[j];
                var[j] += dv * dv;
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| {
            let s = (v / count).sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

/// Mean per-case error (mm) of the bagged prediction over `clouds`.
fn validation_mae_mm(
    params: &NetworkParameters,
    clouds: &[CloudSample],
    points_per_block: usize,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (ci, cloud) in clouds.iter().enumerate() {
        let n = cloud.node_count();
        let passes = minimum_passes(n, points_per_block);
        let pred_seed = derive(seed, &[stream::INFERENCE, epoch, ci as u64]);
        let prediction = predict(params, &cloud.features, points_per_block, passes, pred_seed)?;
        let errors = nodal_errors(&prediction.mean, &cloud.truth_rows());
        total += errors.iter().sum::<f64>() / errors.len() as f64;
    }
    Ok(total / clouds.len() as f64)
}

/// Trains a fresh network. `dataset_ids` names every dataset the training
/// and validation clouds came from; they are recorded on the checkpoint so
/// holdout evaluation can reject contaminated inputs.
pub fn train(
    config: &TrainConfig,
    train_clouds: &[CloudSample],
    val_clouds: &[CloudSample],
    dataset_ids: &[u64],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_clouds.is_empty() || val_clouds.is_empty() {
        return Err(Error::config("training needs non-empty train and validation sets"));
    }
    let d = config.feature_mode.width();
    for c in train_clouds.iter().chain(val_clouds) {
        if c.features.cols() != d {
            return Err(Error::compatibility(format!(
                "cloud carries {} feature components, configuration expects {d}",
                c.features.cols()
            )));
        }
        if c.node_count() == 0 {
            return Err(Error::config("empty cloud in training data"));
        }
    }

    let mut params =
        NetworkParameters::init(config.network_config(), config.feature_mode, config.seed)?;
    let (mean, std) = feature_statistics(train_clouds);
    params.set_normalisation(mean, std);
    let mut ids: Vec<u64> = dataset_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    params.trained_dataset_ids = ids;

    let names = params.trainable_names();
    let mut adam = AdamState::new();
    let workers = worker_count();
    let s = config.points_per_cloud;

    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, NetworkParameters)> = None;

    for epoch in 0..config.epochs {
        let ep = epoch as u64;
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_clouds.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(config.seed, &[stream::BOOTSTRAP, ep, 0]));
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (iter, chunk) in order.chunks(config.minibatch).enumerate() {
            // Draw every member's bootstrap and dropout stream up front so
            // results do not depend on the worker count.
            let members: Vec<(usize, Vec<u32>, ChaCha8Rng)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &ci)| {
                    let pos = (iter * config.minibatch + k) as u64;
                    let n = train_clouds[ci].node_count();
                    let mut boot_rng = rng_for(config.seed, &[stream::BOOTSTRAP, ep, 1 + pos]);
                    let boot = bootstrap_sample(&mut boot_rng, n, s);
                    let drop_rng = rng_for(config.seed, &[stream::DROPOUT, ep, pos]);
                    (ci, boot, drop_rng)
                })
                .collect();

            let mut grad_acc: Vec<Tensor> = names
                .iter()
                .map(|n| {
                    let t = params.tensor(n);
                    Tensor::zeros(t.rows(), t.cols())
                })
                .collect();
            let mut stats_acc: Vec<(String, BatchStats)> = Vec::new();

            for group in members.chunks(workers.max(1)) {
                let results: Vec<Result<MemberResult>> = if workers <= 1 || group.len() == 1 {
                    group
                        .iter()
                        .map(|(ci, boot, rng)| {
                            member_pass(&params, &names, &train_clouds[*ci], boot, rng.clone())
                        })
                        .collect()
                } else {
                    std::thread::scope(|scope| {
                        let handles: Vec<_> = group
                            .iter()
                            .map(|(ci, boot, rng)| {
                                let params = &params;
                                let names = &names;
                                let cloud = &train_clouds[*ci];
                                scope.spawn(move || {
                                    member_pass(params, names, cloud, boot, rng.clone())
                                })
                            })
                            .collect();
                        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                    })
                };
                for r in results {
                    let r = r?;
                    if !r.loss.is_finite() {
                        return Err(Error::internal(format!(
                            "training diverged: non-finite loss at epoch {epoch}, iteration {iter} \
                             (running epoch loss {:.6e} over {} members)",
                            loss_sum, loss_count
                        )));
                    }
                    loss_sum += r.loss;
                    loss_count += 1;
                    for (acc, g) in grad_acc.iter_mut().zip(&r.grads) {
                        acc.add_assign(g);
                    }
                    if stats_acc.is_empty() {
                        stats_acc = r.stats;
                    } else {
                        for (a, b) in stats_acc.iter_mut().zip(&r.stats) {
                            debug_assert_eq!(a.0, b.0);
                            for (x, y) in a.1.mean.iter_mut().zip(&b.1.mean) {
                                *x += y;
                            }
                            for (x, y) in a.1.var.iter_mut().zip(&b.1.var) {
                                *x += y;
                            }
                        }
                    }
                }
            }

            let inv = 1.0 / chunk.len() as f64;
            let mut grads = BTreeMap::new();
            for (name, mut g) in names.iter().cloned().zip(grad_acc) {
                g.scale_assign(inv);
                grads.insert(name, g);
            }
            adam_step(
                &mut params.tensors,
                &grads,
                &mut adam,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.epsilon,
            );

            for (layer, stats) in &stats_acc {
                for (suffix, batch) in [("_mean", &stats.mean), ("_var", &stats.var)] {
                    let running = params
                        .tensors
                        .get_mut(&format!("{layer}{suffix}"))
                        .expect("running statistic tensor");
                    for (r, &b) in running.as_mut_slice().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (b * inv);
                    }
                }
            }
        }

        let val_mae_mm =
            validation_mae_mm(&params, val_clouds, config.points_per_cloud, config.seed, ep)?;
        if !val_mae_mm.is_finite() {
            return Err(Error::internal(format!(
                "training diverged: non-finite validation error at epoch {epoch}"
            )));
        }
        let train_loss = loss_sum / loss_count as f64;
        log.rows.push(EpochRow {
            epoch,
            train_loss,
            val_mae_mm,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_mae_mm < *b) {
            best = Some((epoch, val_mae_mm, params.clone()));
        }
    }

    let (best_epoch, best_val_mae_mm, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, best_epoch, best_val_mae_mm, log })
}

/// Which knob an ablation sweeps.
#[derive(Clone, Debug)]
pub enum AblationSpec {
    /// Global feature vector widths.
    GfvSizes(Vec<usize>),
    /// Feature encodings (with and without material moduli).
    FeatureModes(Vec<FeatureMode>),
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub best_val_mae_mm: f64,
    pub summary: MetricSummary,
    pub per_case_mae_mm: Vec<f64>,
}

/// Scores `params` on plain clouds (no manifests): aggregate error summary
/// plus per-case means.
pub fn score_clouds(
    params: &NetworkParameters,
    clouds: &[CloudSample],
    points_per_block: usize,
    seed: u64,
) -> Result<(MetricSummary, Vec<f64>)> {
    let mut errors = Vec::new();
    let mut labels = Vec::new();
    let mut per_case = Vec::with_capacity(clouds.len());
    for (ci, cloud) in clouds.iter().enumerate() {
        let passes = minimum_passes(cloud.node_count(), points_per_block);
        let pred_seed = derive(seed, &[stream::INFERENCE, ci as u64]);
        let p = predict(params, &cloud.features, points_per_block, passes, pred_seed)?;
        let e = nodal_errors(&p.mean, &cloud.truth_rows());
        per_case.push(e.iter().sum::<f64>() / e.len() as f64);
        errors.extend(e);
        labels.extend_from_slice(&cloud.labels);
    }
    Ok((summarize(&errors, &labels), per_case))
}

/// Trains one model per swept value (identical seed and data otherwise) and
/// scores each on the same holdout clouds.
pub fn ablation_run(
    base: &TrainConfig,
    spec: &AblationSpec,
    train_clouds: &[CloudSample],
    val_clouds: &[CloudSample],
    holdout_clouds: &[CloudSample],
    dataset_ids: &[u64],
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, TrainConfig)> = match spec {
        AblationSpec::GfvSizes(sizes) => sizes
            .iter()
            .map(|&g| (format!("gfv={g}"), TrainConfig { gfv_size: g, ..*base }))
            .collect(),
        AblationSpec::FeatureModes(modes) => modes
            .iter()
            .map(|&m| (format!("features={}", m.as_str()), TrainConfig { feature_mode: m, ..*base }))
            .collect(),
    };
    if variants.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (label, config) in variants {
        let restrict = |clouds: &[CloudSample]| -> Result<Vec<CloudSample>> {
            clouds.iter().map(|c| c.with_mode(config.feature_mode)).collect()
        };
        let tr = restrict(train_clouds)?;
        let va = restrict(val_clouds)?;
        let ho = restrict(holdout_clouds)?;
        let outcome = train(&config, &tr, &va, dataset_ids)?;
        let (summary, per_case) =
            score_clouds(&outcome.params, &ho, config.points_per_cloud, config.seed)?;
        rows.push(AblationRow {
            label,
            best_val_mae_mm: outcome.best_val_mae_mm,
            summary,
            per_case_mae_mm: per_case,
        });
    }
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "variant (mm)", "MAE", "St.D.", "Q1", "Median", "Q3", "CZ", "WG", "val"
    );
    let opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:8.3}"),
        None => format!("{:>8}", "-"),
    };
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:8.3} {:8.3} {:8.3} {:8.3} {:8.3} {} {} {:8.3}\n",
            r.label,
            r.summary.mae_mm,
            r.summary.std_mm,
            r.summary.q1_mm,
            r.summary.median_mm,
            r.summary.q3_mm,
            opt(r.summary.cz_mae_mm),
            opt(r.summary.wg_mae_mm),
            r.best_val_mae_mm,
        ));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,mae_mm,std_mm,q1_mm,median_mm,q3_mm,cz_mae_mm,wg_mae_mm,best_val_mae_mm\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{:.9e}\n",
            r.label,
            r.summary.mae_mm,
            r.summary.std_mm,
            r.summary.q1_mm,
            r.summary.median_mm,
            r.summary.q3_mm,
            opt(r.summary.cz_mae_mm),
            opt(r.summary.wg_mae_mm),
            r.best_val_mae_mm,
        ));
    }
    out
}
