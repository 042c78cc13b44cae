//! Displacement-error metrics and holdout evaluation.
//!
//! Errors are Euclidean distances between predicted and reference nodal
//! displacement, reported in millimetres. A holdout run scores two
//! prediction strategies side by side: directly on the simulation mesh
//! nodes, and on a cuboid-tessellation resampling of the same fields, with
//! paired t-tests between the strategies' per-case mean errors and against
//! a zero-displacement baseline.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::features::{resample_features, FeatureMode, FeatureVectorSet};
use crate::fesolver::{DatasetManifest, SplitTag};
use crate::geometry::{generate_phantom, Region, TessellationConfig, BC_FIXED, BC_LOADED};
use crate::inference::{minimum_passes, predict};
use crate::network::NetworkParameters;
use crate::rng::derive;
use crate::tensorcore::Tensor;

/// Previously reported clinical-scale figures (mm), shown alongside results
/// for orientation only; nothing gates on them.
pub const CONTEXT_MESH_MAE_MM: f64 = 0.010;
pub const CONTEXT_MESH_STD_MM: f64 = 0.012;
pub const CONTEXT_TESS_MAE_MM: f64 = 0.017;
pub const CONTEXT_TESS_STD_MM: f64 = 0.015;

/// Per-node Euclidean error in millimetres.
pub fn nodal_errors(predicted: &[[f64; 3]], reference: &[[f64; 3]]) -> Vec<f64> {
    assert_eq!(predicted.len(), reference.len());
    predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            let d = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
            1e3 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect()
}

/// Linear-interpolation quartiles (the common spreadsheet definition):
/// rank `h = (n-1) q` interpolated between the enclosing order statistics.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    assert!(!values.is_empty(), "quartiles of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let at = |q: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = sorted.len() - 1;
        if lo >= hi {
            sorted[hi]
        } else {
            sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
        }
    };
    (at(0.25), at(0.5), at(0.75))
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mae_mm: f64,
    /// Population standard deviation of the per-node errors.
    pub std_mm: f64,
    pub q1_mm: f64,
    pub median_mm: f64,
    pub q3_mm: f64,
    /// Mean error over nodes labelled as the whole gland (central zone
    /// included); absent when no such nodes exist.
    pub wg_mae_mm: Option<f64>,
    /// Population standard deviation over the whole-gland nodes.
    pub wg_std_mm: Option<f64>,
    /// Mean error over central-zone nodes only.
    pub cz_mae_mm: Option<f64>,
    /// Population standard deviation over the central-zone nodes.
    pub cz_std_mm: Option<f64>,
}

/// Aggregates per-node errors, with region breakdowns taken from `labels`.
pub fn summarize(errors_mm: &[f64], labels: &[Region]) -> MetricSummary {
    assert_eq!(errors_mm.len(), labels.len());
    assert!(!errors_mm.is_empty());
    let n = errors_mm.len() as f64;
    let mae = errors_mm.iter().sum::<f64>() / n;
    let var = errors_mm.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n;
    let (q1, median, q3) = quartiles(errors_mm);

    // Region stats use the population deviation like the whole-cloud column.
    let stats_over = |keep: &dyn Fn(Region) -> bool| -> Option<(f64, f64)> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (e, &l) in errors_mm.iter().zip(labels) {
            if keep(l) {
                sum += e;
                count += 1;
            }
        }
        (count > 0).then(|| {
            let mean = sum / count as f64;
            let var = errors_mm
                .iter()
                .zip(labels)
                .filter(|(_, &l)| keep(l))
                .map(|(e, _)| (e - mean) * (e - mean))
                .sum::<f64>()
                / count as f64;
            (mean, var.sqrt())
        })
    };
    let wg = stats_over(&|l| l == Region::WholeGland || l == Region::CentralZone);
    let cz = stats_over(&|l| l == Region::CentralZone);
    MetricSummary {
        count: errors_mm.len(),
        mae_mm: mae,
        std_mm: var.sqrt(),
        q1_mm: q1,
        median_mm: median,
        q3_mm: q3,
        wg_mae_mm: wg.map(|(m, _)| m),
        wg_std_mm: wg.map(|(_, s)| s),
        cz_mae_mm: cz.map(|(m, _)| m),
        cz_std_mm: cz.map(|(_, s)| s),
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TTestOutcome {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
}

/// Two-sided paired t-test. Fails when fewer than two pairs exist or the
/// differences have zero variance (the statistic is then degenerate).
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestOutcome> {
    if a.len() != b.len() {
        return Err(Error::config("paired test needs equally sized samples"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::config("paired test needs at least 2 pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::config(
            "paired differences have zero variance; the t statistic is degenerate",
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let dof = n - 1;
    Ok(TTestOutcome { t, p: student_t_two_sided_p(t, dof), dof })
}

/// Two-sided tail probability of Student's t with `dof` degrees of freedom,
/// via the regularized incomplete beta function: for x = v/(v+t^2),
/// P(|T| >= |t|) = I_x(v/2, 1/2).
pub fn student_t_two_sided_p(t: f64, dof: usize) -> f64 {
    assert!(dof >= 1);
    let v = dof as f64;
    let x = v / (v + t * t);
    regularized_incomplete_beta(0.5 * v, 0.5, x)
}

/// Regularized incomplete beta I_x(a, b) by modified Lentz continued
/// fractions, with the symmetry flip for fast convergence; absolute
/// accuracy around 1e-12 for moderate arguments.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp()) * beta_cf(a, b, x) / a
    } else {
        1.0 - (ln_front.exp()) * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            return h;
        }
    }
    h
}

/// Lanczos log-gamma (g = 7, 9 coefficients), |rel err| < 1e-13 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    assert!(x > 0.0);
    if x < 0.5 {
        // Reflection keeps accuracy near zero.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Points per network block (the training cloud size).
    pub points_per_block: usize,
    /// Pass budget per case; 0 means the minimum that covers every node.
    pub passes: usize,
    pub seed: u64,
    pub tessellation: TessellationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            points_per_block: 512,
            passes: 0,
            seed: 0,
            tessellation: TessellationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StrategyOutcome {
    pub summary: MetricSummary,
    /// Mean error per evaluated case, in case order.
    pub per_case_mae_mm: Vec<f64>,
    /// Unweighted mean of `per_case_mae_mm`; differs from `summary.mae_mm`
    /// when cases have unequal node counts.
    pub mean_case_mae_mm: f64,
    pub mean_predict_ms: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct HoldoutReport {
    pub cases: usize,
    pub mesh: StrategyOutcome,
    pub tessellation: StrategyOutcome,
    /// Mesh-node vs tessellation per-case means.
    pub strategy_ttest: TTestOutcome,
    /// Mesh-node prediction vs predicting zero displacement everywhere.
    pub baseline_ttest: TTestOutcome,
    /// Per-case mean error of the zero-displacement baseline.
    pub zero_baseline_mae_mm: Vec<f64>,
}

fn features_tensor(set: &FeatureVectorSet) -> Tensor {
    Tensor::new(set.len(), set.mode.width(), set.features.clone())
}

struct CaseScore {
    errors_mm: Vec<f64>,
    labels: Vec<Region>,
    mae_mm: f64,
    predict_ms: f64,
}

fn score_case(
    params: &NetworkParameters,
    set: &FeatureVectorSet,
    config: &EvalConfig,
    seed: u64,
) -> Result<CaseScore> {
    let truth = set
        .truth
        .as_ref()
        .ok_or_else(|| Error::compatibility("evaluation sample lacks reference displacements"))?;
    let features = features_tensor(set);
    let passes = if config.passes == 0 {
        minimum_passes(set.len(), config.points_per_block)
    } else {
        config.passes
    };
    let start = Instant::now();
    let prediction = predict(params, &features, config.points_per_block, passes, seed)?;
    let predict_ms = start.elapsed().as_secs_f64() * 1e3;
    let errors_mm = nodal_errors(&prediction.mean, truth);
    let mae_mm = errors_mm.iter().sum::<f64>() / errors_mm.len() as f64;
    Ok(CaseScore { errors_mm, labels: set.labels.clone(), mae_mm, predict_ms })
}

fn finish_strategy(cases: Vec<CaseScore>) -> StrategyOutcome {
    let mut errors = Vec::new();
    let mut labels = Vec::new();
    let mut per_case = Vec::with_capacity(cases.len());
    let mut ms = 0.0;
    for c in &cases {
        errors.extend_from_slice(&c.errors_mm);
        labels.extend_from_slice(&c.labels);
        per_case.push(c.mae_mm);
        ms += c.predict_ms;
    }
    StrategyOutcome {
        summary: summarize(&errors, &labels),
        per_case_mae_mm: per_case,
        mean_predict_ms: ms / cases.len() as f64,
    }
}

/// Scores a trained model on holdout datasets with both prediction
/// strategies. Every dataset must carry the holdout split tag, must not
/// appear among the model's training datasets, and must match the model's
/// feature mode.
pub fn evaluate_holdout(
    params: &NetworkParameters,
    sets: &[(DatasetManifest, Vec<FeatureVectorSet>)],
    config: &EvalConfig,
) -> Result<HoldoutReport> {
    if sets.is_empty() {
        return Err(Error::config("holdout evaluation needs at least one dataset"));
    }
    let mut mesh_cases = Vec::new();
    let mut tess_cases = Vec::new();
    let mut zero_baseline = Vec::new();

    for (set_idx, (manifest, clouds)) in sets.iter().enumerate() {
        if manifest.split != SplitTag::Holdout {
            return Err(Error::compatibility(format!(
                "dataset {:#x} is tagged '{}', not 'holdout'; refusing to evaluate on it",
                manifest.dataset_id,
                manifest.split.as_str()
            )));
        }
        if params.trained_dataset_ids.contains(&manifest.dataset_id) {
            return Err(Error::compatibility(format!(
                "dataset {:#x} was consumed during training; holdout is contaminated",
                manifest.dataset_id
            )));
        }
        if manifest.features != params.feature_mode {
            return Err(Error::compatibility(format!(
                "dataset features '{}' do not match model features '{}'",
                manifest.features.as_str(),
                params.feature_mode.as_str()
            )));
        }
        if clouds.len() != manifest.samples.len() {
            return Err(Error::compatibility("sample count does not match manifest"));
        }

        let mesh = generate_phantom(&manifest.phantom)?;
        for (case_idx, (meta, cloud)) in manifest.samples.iter().zip(clouds).enumerate() {
            let tags = [set_idx as u64, case_idx as u64];
            let mesh_seed = derive(config.seed, &[1, tags[0], tags[1]]);
            mesh_cases.push(score_case(params, cloud, config, mesh_seed)?);

            let truth = cloud
                .truth
                .as_ref()
                .ok_or_else(|| Error::compatibility("holdout sample lacks reference"))?;
            zero_baseline
                .push(truth.iter().map(|u| 1e3 * norm3(u)).sum::<f64>() / truth.len() as f64);

            // Rebuild the boundary map the simulation used, then resample
            // features and reference on the tessellation points.
            let dirichlet: Vec<Option<[f64; 3]>> = mesh
                .bc_flags
                .iter()
                .map(|&f| {
                    if f & BC_FIXED != 0 {
                        Some([0.0; 3])
                    } else if f & BC_LOADED != 0 {
                        Some(meta.load)
                    } else {
                        None
                    }
                })
                .collect();
            let tess_seed = derive(manifest.seed, &[2, tags[1]]);
            let mut resampled = resample_features(
                &mesh,
                &manifest.phantom,
                &meta.materials,
                &dirichlet,
                Some(truth),
                &config.tessellation,
                tess_seed,
            )?;
            if params.feature_mode == FeatureMode::Pb {
                resampled = resampled.strip_materials()?;
            }
            let pred_seed = derive(config.seed, &[3, tags[0], tags[1]]);
            tess_cases.push(score_case(params, &resampled, config, pred_seed)?);
        }
    }

    let mesh = finish_strategy(mesh_cases);
    let tessellation = finish_strategy(tess_cases);
    let strategy_ttest = paired_ttest(&mesh.per_case_mae_mm, &tessellation.per_case_mae_mm)?;
    let baseline_ttest = paired_ttest(&mesh.per_case_mae_mm, &zero_baseline)?;
    Ok(HoldoutReport {
        cases: mesh.per_case_mae_mm.len(),
        mesh,
        tessellation,
        strategy_ttest,
        baseline_ttest,
        zero_baseline_mae_mm: zero_baseline,
    })
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn row(label: &str, s: &MetricSummary, ms: f64) -> String {
    let region = |mae: Option<f64>, std: Option<f64>| match (mae, std) {
        (Some(m), Some(d)) => format!("{:>15}", format!("{m:.3}+-{d:.3}")),
        _ => format!("{:>15}", "-"),
    };
    format!(
        "{label:<18} {:8.3} {:8.3} {:8.3} {:8.3} {:8.3} {} {} {ms:9.1}",
        s.mae_mm,
        s.std_mm,
        s.q1_mm,
        s.median_mm,
        s.q3_mm,
        region(s.cz_mae_mm, s.cz_std_mm),
        region(s.wg_mae_mm, s.wg_std_mm),
    )
}

impl HoldoutReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "holdout evaluation: {} cases, {} nodes scored per strategy\n",
            self.cases, self.mesh.summary.count
        ));
        out.push_str(&format!(
            "clinical-scale reference (context only): mesh {CONTEXT_MESH_MAE_MM:.3}+-{CONTEXT_MESH_STD_MM:.3} mm, \
             tessellation {CONTEXT_TESS_MAE_MM:.3}+-{CONTEXT_TESS_STD_MM:.3} mm, \
             {:.0} ms per prediction at ~{} nodes\n",
            crate::inference::CONTEXT_LATENCY_MS,
            crate::inference::CONTEXT_LATENCY_NODES,
        ));
        out.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>15} {:>15} {:>9}\n",
            "strategy (mm)", "MAE", "St.D.", "Q1", "Median", "Q3", "CZ", "WG", "ms/case"
        ));
        out.push_str(&row("tetrahedral mesh", &self.mesh.summary, self.mesh.mean_predict_ms));
        out.push('\n');
        out.push_str(&row(
            "tessellation",
            &self.tessellation.summary,
            self.tessellation.mean_predict_ms,
        ));
        out.push('\n');
        out.push_str(&format!(
            "mesh vs tessellation: t = {:+.4}, p = {:.6}, dof = {}\n",
            self.strategy_ttest.t, self.strategy_ttest.p, self.strategy_ttest.dof
        ));
        out.push_str(&format!(
            "mesh vs zero baseline (per-case MAE of the mesh strategy paired against \
             the all-zero predictor on the same nodes): t = {:+.4}, p = {:.6}, dof = {}\n",
            self.baseline_ttest.t, self.baseline_ttest.p, self.baseline_ttest.dof
        ));
        out
    }

    /// CSV with one row per strategy. Lengths are millimetres with three
    /// decimal places. The trailing latency column is a timing measurement
    /// and varies between reruns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,cases,nodes,mae_mm,std_mm,q1_mm,median_mm,q3_mm,\
             cz_mae_mm,cz_std_mm,wg_mae_mm,wg_std_mm,mean_predict_ms\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        for (label, s, ms) in [
            ("mesh", &self.mesh.summary, self.mesh.mean_predict_ms),
            ("tessellation", &self.tessellation.summary, self.tessellation.mean_predict_ms),
        ] {
            out.push_str(&format!(
                "{label},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{},{},{ms:.3}\n",
                self.cases,
                s.count,
                s.mae_mm,
                s.std_mm,
                s.q1_mm,
                s.median_mm,
                s.q3_mm,
                opt(s.cz_mae_mm),
                opt(s.cz_std_mm),
                opt(s.wg_mae_mm),
                opt(s.wg_std_mm),
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::io::atomic_write(&dir.join("report.txt"), |w| {
            use std::io::Write;
            w.write_all(self.render().as_bytes()).map_err(Error::from)
        })?;
        crate::io::atomic_write(&dir.join("report.csv"), |w| {
            use std::io::Write;
            w.write_all(self.to_csv().as_bytes()).map_err(Error::from)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMode;
    use crate::fesolver::{generate_dataset, GenerationConfig};
    use crate::geometry::PhantomSpec;
    use crate::network::{NetworkConfig, NetworkParameters};
    use crate::rng::{rng_for, standard_normal};
    use rand::Rng;

    #[test]
    fn euclidean_error_is_reported_in_millimetres() {
        let pred = [[3e-3, 4e-3, 0.0]];
        let truth = [[0.0, 0.0, 0.0]];
        let e = nodal_errors(&pred, &truth);
        assert!((e[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn summary_matches_a_naive_reimplementation() {
        let mut rng = rng_for(5, &[1]);
        let n = 1000;
        let pred: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)]).collect();
        let truth: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)]).collect();
        let errors = nodal_errors(&pred, &truth);
        let labels = vec![Region::Background; n];
        let s = summarize(&errors, &labels);

        // Independent route: accumulate with explicit loops and hypot.
        let mut naive = Vec::with_capacity(n);
        for i in 0..n {
            let dx = pred[i][0] - truth[i][0];
            let dy = pred[i][1] - truth[i][1];
            let dz = pred[i][2] - truth[i][2];
            naive.push(1000.0 * dx.hypot(dy).hypot(dz));
        }
        let mut mean = 0.0;
        for e in &naive {
            mean += e;
        }
        mean /= n as f64;
        let mut var = 0.0;
        for e in &naive {
            var += (e - mean) * (e - mean);
        }
        var /= n as f64;
        assert!((s.mae_mm - mean).abs() < 1e-12, "{} vs {}", s.mae_mm, mean);
        assert!((s.std_mm - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn region_means_follow_a_hand_worked_example() {
        let errors = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let labels = vec![
            Region::Background,  // 1
            Region::WholeGland,  // 2
            Region::CentralZone, // 3
            Region::Bone,        // 4
            Region::WholeGland,  // 5
            Region::CentralZone, // 6
            Region::Background,  // 7
            Region::WholeGland,  // 8
            Region::Background,  // 9
            Region::Bone,        // 10
        ];
        let s = summarize(&errors, &labels);
        // Whole gland includes the central zone: (2+3+5+6+8)/5 = 4.8.
        assert!((s.wg_mae_mm.unwrap() - 4.8).abs() < 1e-12);
        // Population variance: (2.8^2 + 1.8^2 + 0.2^2 + 1.2^2 + 3.2^2)/5 = 4.56.
        assert!((s.wg_std_mm.unwrap() - 4.56f64.sqrt()).abs() < 1e-12);
        // Central zone alone: (3+6)/2 = 4.5, deviations +-1.5.
        assert!((s.cz_mae_mm.unwrap() - 4.5).abs() < 1e-12);
        assert!((s.cz_std_mm.unwrap() - 1.5).abs() < 1e-12);
        assert!((s.mae_mm - 5.5).abs() < 1e-12);

        let none = summarize(&errors[..2], &[Region::Background, Region::Bone]);
        assert!(none.wg_mae_mm.is_none() && none.cz_mae_mm.is_none());
        assert!(none.wg_std_mm.is_none() && none.cz_std_mm.is_none());
    }

    #[test]
    fn quartiles_interpolate_linearly() {
        assert_eq!(quartiles(&[0.0, 1.0, 2.0, 3.0, 4.0]), (1.0, 2.0, 3.0));
        assert_eq!(quartiles(&[7.5]), (7.5, 7.5, 7.5));
        assert_eq!(quartiles(&[3.0, 1.0]), (1.5, 2.0, 2.5));

        let mut rng = rng_for(9, &[4]);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (q1, q2, q3) = quartiles(&xs);
        assert!((q1 - 0.25).abs() < 0.02, "{q1}");
        assert!((q2 - 0.50).abs() < 0.02, "{q2}");
        assert!((q3 - 0.75).abs() < 0.02, "{q3}");
    }

    #[test]
    fn paired_test_reproduces_the_sleep_study() {
        // Classic two-drug sleep-gain pairs (n = 10).
        let drug1 = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0];
        let drug2 = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4];
        let r = paired_ttest(&drug2, &drug1).unwrap();
        assert_eq!(r.dof, 9);
        assert!((r.t - 4.062127683382037).abs() < 1e-6, "t = {}", r.t);
        assert!((r.p - 0.00283289019738427).abs() < 1e-6, "p = {}", r.p);
    }

    #[test]
    fn tail_probabilities_match_reference_values() {
        // Reference values computed independently by numerical integration
        // of the t density (cross-checked against a second implementation).
        let table = [
            (0.3, 3, 0.783763292039919),
            (1.0, 5, 0.36321746764912255),
            (2.5, 12, 0.027915399571325213),
            (4.062127683382037, 9, 0.00283289019738427),
            (6.0, 2, 0.02667147321542477),
            (0.05, 30, 0.9604538086499531),
        ];
        for (t, dof, p) in table {
            let got = student_t_two_sided_p(t, dof);
            assert!((got - p).abs() < 1e-9, "t={t} dof={dof}: {got} vs {p}");
            let neg = student_t_two_sided_p(-t, dof);
            assert_eq!(got, neg, "two-sided p must be symmetric");
        }
    }

    #[test]
    fn consistent_positive_differences_give_small_p() {
        let a = [1.0, 1.1, 0.9, 1.05, 0.95, 1.0, 1.02, 0.98, 1.03, 0.97];
        let b = [0.0; 10];
        let r = paired_ttest(&a, &b).unwrap();
        assert!(r.t > 0.0);
        assert!(r.p < 1e-3, "p = {}", r.p);
    }

    #[test]
    fn zero_variance_differences_are_rejected() {
        let a = [2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 3.0];
        assert!(matches!(paired_ttest(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn overall_mae_is_the_mean_of_per_case_maes_for_equal_sizes() {
        let mut rng = rng_for(11, &[6]);
        let cases: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..50).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let all: Vec<f64> = cases.iter().flatten().copied().collect();
        let overall = all.iter().sum::<f64>() / all.len() as f64;
        let per_case: Vec<f64> =
            cases.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let mean_of_means = per_case.iter().sum::<f64>() / per_case.len() as f64;
        assert!((overall - mean_of_means).abs() < 1e-12);
    }

    fn tiny_holdout(seed: u64, split: SplitTag) -> (DatasetManifest, Vec<FeatureVectorSet>) {
        let mut spec = PhantomSpec::example();
        spec.grid_resolution = [4, 4, 4];
        let mesh = generate_phantom(&spec).unwrap();
        let config = GenerationConfig { simulations: 3, ..GenerationConfig::default() };
        let data = generate_dataset(&mesh, &config, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::fesolver::write_dataset(
            dir.path(),
            &spec,
            &mesh,
            &config,
            seed,
            split,
            FeatureMode::Pbk,
            &data,
        )
        .unwrap();
        crate::fesolver::load_dataset(dir.path()).unwrap()
    }

    fn scoring_params(seed: u64) -> NetworkParameters {
        let config = NetworkConfig { gfv_size: 8, ..NetworkConfig::default() };
        let mut params = NetworkParameters::init(config, FeatureMode::Pbk, seed).unwrap();
        let mut rng = rng_for(seed, &[88]);
        for name in ["out_w", "out_b"] {
            let t = params.tensors.get_mut(name).unwrap();
            for v in t.as_mut_slice() {
                *v = 1e-4 * standard_normal(&mut rng);
            }
        }
        params
    }

    #[test]
    fn holdout_evaluation_produces_a_full_report() {
        let (manifest, clouds) = tiny_holdout(41, SplitTag::Holdout);
        let params = scoring_params(1);
        let config = EvalConfig { points_per_block: 32, seed: 5, ..EvalConfig::default() };
        let report = evaluate_holdout(&params, &[(manifest, clouds)], &config).unwrap();

        assert_eq!(report.cases, 3);
        assert_eq!(report.mesh.per_case_mae_mm.len(), 3);
        assert_eq!(report.tessellation.per_case_mae_mm.len(), 3);
        assert!(report.mesh.summary.mae_mm.is_finite());
        assert!(report.tessellation.summary.mae_mm.is_finite());
        assert!(report.baseline_ttest.p.is_finite());
        let text = report.render();
        assert!(text.contains("tetrahedral mesh") && text.contains("tessellation"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn non_holdout_tags_and_contamination_are_refused() {
        let (manifest, clouds) = tiny_holdout(43, SplitTag::Train);
        let params = scoring_params(2);
        let config = EvalConfig { points_per_block: 32, ..EvalConfig::default() };
        match evaluate_holdout(&params, &[(manifest, clouds)], &config) {
            Err(Error::Compatibility(msg)) => assert!(msg.contains("holdout"), "{msg}"),
            other => panic!("expected compatibility error, got {other:?}"),
        }

        let (manifest, clouds) = tiny_holdout(44, SplitTag::Holdout);
        let mut params = scoring_params(3);
        params.trained_dataset_ids.push(manifest.dataset_id);
        match evaluate_holdout(&params, &[(manifest, clouds)], &config) {
            Err(Error::Compatibility(msg)) => assert!(msg.contains("contaminated"), "{msg}"),
            other => panic!("expected compatibility error, got {other:?}"),
        }
    }
}
