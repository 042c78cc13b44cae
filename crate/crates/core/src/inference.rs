//! Bagged whole-mesh prediction.
//!
//! The network consumes fixed-size point blocks, so a mesh with `N` nodes is
//! predicted in sweeps: each sweep shuffles the node order, partitions it
//! into `ceil(N / S)` blocks, and pads the last block with uniform
//! with-replacement draws from the full node set. One block evaluation is
//! one pass; sweeps repeat until the requested pass budget is spent. A
//! node's prediction is the mean over every occurrence of that node across
//! all evaluated blocks (a node drawn twice into a padded block contributes
//! twice), which keeps the estimate an unweighted average of network
//! evaluations.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{atomic_write, open_input, read_f64_vec, read_u32, read_u64, write_f64_slice, write_u32, write_u64};
use crate::network::{predict_block, NetworkParameters};
use crate::rng::{rng_for, stream};
use crate::tensorcore::Tensor;

const PREDICTION_MAGIC: &[u8; 4] = b"BMPR";

/// Previously reported clinical-scale inference latency, shown alongside
/// evaluation results for orientation only; nothing gates on it.
pub const CONTEXT_LATENCY_MS: f64 = 520.0;
/// Node count at which that latency was observed.
pub const CONTEXT_LATENCY_NODES: u64 = 14_500;

/// Smallest pass budget that still covers every node: one full sweep.
pub fn minimum_passes(node_count: usize, points_per_block: usize) -> usize {
    assert!(node_count > 0 && points_per_block > 0);
    node_count.div_ceil(points_per_block)
}

/// One evaluated block: which node each row held, and the network output
/// for that row. Kept so callers can re-derive the aggregate exactly.
#[derive(Clone, Debug)]
pub struct PassRecord {
    pub indices: Vec<u32>,
    /// `S x 3` network output for this block.
    pub outputs: Tensor,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Per-node mean displacement over all occurrences.
    pub mean: Vec<[f64; 3]>,
    /// Number of distinct passes in which each node appeared.
    pub pass_counts: Vec<u32>,
    pub passes: Vec<PassRecord>,
}

impl Prediction {
    pub fn node_count(&self) -> usize {
        self.mean.len()
    }
}

/// Runs `passes` block evaluations over the `node_count x d` feature matrix
/// and averages per node. Fails when the budget cannot cover every node.
pub fn predict(
    params: &NetworkParameters,
    features: &Tensor,
    points_per_block: usize,
    passes: usize,
    seed: u64,
) -> Result<Prediction> {
    let n = features.rows();
    let d = features.cols();
    if n == 0 {
        return Err(Error::config("prediction needs at least one point"));
    }
    if d != params.config.input_dim {
        return Err(Error::compatibility(format!(
            "model expects {} feature components, input carries {}",
            params.config.input_dim, d
        )));
    }
    let s = points_per_block;
    // Batch statistics degenerate on a single point, so two is the floor.
    if s < 2 {
        return Err(Error::config("points_per_block must be at least 2"));
    }
    let min_passes = minimum_passes(n, s);
    if passes < min_passes {
        return Err(Error::config(format!(
            "{passes} passes cannot cover {n} points with blocks of {s}; at least {min_passes} needed"
        )));
    }

    let mut sums = vec![[0.0f64; 3]; n];
    let mut occurrences = vec![0u64; n];
    let mut pass_counts = vec![0u32; n];
    let mut pass_records = Vec::with_capacity(passes);

    let mut done = 0usize;
    let mut sweep = 0u64;
    let mut seen = vec![false; n];
    while done < passes {
        let mut rng = rng_for(seed, &[stream::INFERENCE, sweep]);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);
        let blocks = minimum_passes(n, s);
        for b in 0..blocks {
            if done == passes {
                break;
            }
            let start = b * s;
            let end = ((b + 1) * s).min(n);
            let mut indices: Vec<u32> = order[start..end].to_vec();
            while indices.len() < s {
                indices.push(rng.gen_range(0..n as u32));
            }

            let mut block = Tensor::zeros(s, d);
            for (row, &idx) in indices.iter().enumerate() {
                for j in 0..d {
                    block.set(row, j, features.get(idx as usize, j));
                }
            }
            let out = predict_block(params, &block)?;

            for v in seen.iter_mut() {
                *v = false;
            }
            for (row, &idx) in indices.iter().enumerate() {
                let i = idx as usize;
                for j in 0..3 {
                    sums[i][j] += out.get(row, j);
                }
                occurrences[i] += 1;
                if !seen[i] {
                    seen[i] = true;
                    pass_counts[i] += 1;
                }
            }
            pass_records.push(PassRecord { indices, outputs: out });
            done += 1;
        }
        sweep += 1;
    }

    let mean = sums
        .iter()
        .zip(&occurrences)
        .map(|(s3, &c)| {
            debug_assert!(c > 0);
            [s3[0] / c as f64, s3[1] / c as f64, s3[2] / c as f64]
        })
        .collect();
    Ok(Prediction { mean, pass_counts, passes: pass_records })
}

/// [`predict`] in a canonical per-point order: rows are processed as if
/// sorted by `tags` (which must be unique), so two calls whose rows are
/// permutations of each other produce identical results per tag.
pub fn predict_tagged(
    params: &NetworkParameters,
    features: &Tensor,
    tags: &[u64],
    points_per_block: usize,
    passes: usize,
    seed: u64,
) -> Result<Prediction> {
    let n = features.rows();
    if tags.len() != n {
        return Err(Error::config("one tag per feature row required"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| tags[i]);
    for w in order.windows(2) {
        if tags[w[0]] == tags[w[1]] {
            return Err(Error::config(format!("duplicate point tag {}", tags[w[0]])));
        }
    }
    let d = features.cols();
    let mut sorted = Tensor::zeros(n, d);
    for (row, &src) in order.iter().enumerate() {
        for j in 0..d {
            sorted.set(row, j, features.get(src, j));
        }
    }
    let canonical = predict(params, &sorted, points_per_block, passes, seed)?;

    let mut mean = vec![[0.0; 3]; n];
    let mut pass_counts = vec![0u32; n];
    for (row, &src) in order.iter().enumerate() {
        mean[src] = canonical.mean[row];
        pass_counts[src] = canonical.pass_counts[row];
    }
    // Pass records keep canonical (sorted-order) indices; map them back.
    let passes_mapped = canonical
        .passes
        .into_iter()
        .map(|p| PassRecord {
            indices: p.indices.iter().map(|&i| order[i as usize] as u32).collect(),
            outputs: p.outputs,
        })
        .collect();
    Ok(Prediction { mean, pass_counts, passes: passes_mapped })
}

#[derive(Clone, Debug)]
pub struct LatencyReport {
    pub runs_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Times repeated full predictions. The first (warm-up) run is excluded.
pub fn benchmark_latency(
    params: &NetworkParameters,
    features: &Tensor,
    points_per_block: usize,
    passes: usize,
    seed: u64,
    repeats: usize,
) -> Result<LatencyReport> {
    if repeats < 3 {
        return Err(Error::config("latency benchmark needs at least 3 repeats"));
    }
    predict(params, features, points_per_block, passes, seed)?;
    let mut runs_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        predict(params, features, points_per_block, passes, seed)?;
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = runs_ms.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median_ms = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let p95_idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Ok(LatencyReport { runs_ms, median_ms, p95_ms: sorted[p95_idx] })
}

/// Binary prediction export: node count, per-node mean triplets, per-node
/// pass counts, and the wall-clock latency of the producing run.
pub fn write_predictions(path: &Path, prediction: &Prediction, latency_ms: f64) -> Result<()> {
    atomic_write(path, |w| {
        use std::io::Write;
        w.write_all(PREDICTION_MAGIC).map_err(Error::from)?;
        write_u64(w, prediction.mean.len() as u64)?;
        for m in &prediction.mean {
            write_f64_slice(w, m)?;
        }
        for &c in &prediction.pass_counts {
            write_u32(w, c)?;
        }
        write_f64_slice(w, &[latency_ms])?;
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<u32>, f64)> {
    let mut r = open_input(path)?;
    crate::io::expect_magic(&mut r, PREDICTION_MAGIC, "prediction file")?;
    let n = read_u64(&mut r)? as usize;
    if n == 0 || n > 1_000_000_000 {
        return Err(Error::compatibility(format!("implausible prediction count {n}")));
    }
    let mut mean = Vec::with_capacity(n);
    for _ in 0..n {
        let v = read_f64_vec(&mut r, 3)?;
        mean.push([v[0], v[1], v[2]]);
    }
    let mut pass_counts = Vec::with_capacity(n);
    for _ in 0..n {
        pass_counts.push(read_u32(&mut r)?);
    }
    let latency = read_f64_vec(&mut r, 1)?[0];
    let mut rest = Vec::new();
    std::io::Read::read_to_end(&mut r, &mut rest)?;
    if !rest.is_empty() {
        return Err(Error::compatibility("trailing bytes after prediction payload"));
    }
    Ok((mean, pass_counts, latency))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMode;
    use crate::network::{NetworkConfig, NetworkParameters};
    use crate::rng::standard_normal;

    fn test_params(seed: u64) -> NetworkParameters {
        let config = NetworkConfig { gfv_size: 8, ..NetworkConfig::default() };
        let mut params = NetworkParameters::init(config, FeatureMode::Pbk, seed).unwrap();
        let mut rng = rng_for(seed, &[77]);
        for name in ["t1/out_w", "t2/out_w", "out_w", "out_b"] {
            let t = params.tensors.get_mut(name).unwrap();
            for v in t.as_mut_slice() {
                *v = 0.05 * standard_normal(&mut rng);
            }
        }
        params
    }

    fn cloud(seed: u64, n: usize) -> Tensor {
        let mut rng = rng_for(seed, &[3]);
        Tensor::new(n, 9, (0..n * 9).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_block_single_pass_equals_raw_forward() {
        let params = test_params(1);
        let x = cloud(4, 17);
        let pred = predict(&params, &x, 32, 1, 9).unwrap();
        assert!(pred.pass_counts.iter().all(|&c| c == 1));

        // Reconstruct the block the pass evaluated and compare outputs.
        let rec = &pred.passes[0];
        assert_eq!(rec.indices.len(), 32);
        let mut block = Tensor::zeros(32, 9);
        for (row, &idx) in rec.indices.iter().enumerate() {
            for j in 0..9 {
                block.set(row, j, x.get(idx as usize, j));
            }
        }
        let direct = predict_block(&params, &block).unwrap();
        assert_eq!(&direct, &rec.outputs);

        // Un-padded nodes appear exactly once; their mean is that output.
        let mut occurrences = vec![0usize; 17];
        for &i in &rec.indices {
            occurrences[i as usize] += 1;
        }
        for i in 0..17 {
            assert!(occurrences[i] >= 1, "pass must cover node {i}");
            if occurrences[i] == 1 {
                let row = rec.indices.iter().position(|&v| v as usize == i).unwrap();
                for j in 0..3 {
                    assert_eq!(pred.mean[i][j], direct.get(row, j));
                }
            }
        }
    }

    #[test]
    fn insufficient_pass_budget_names_the_minimum() {
        let params = test_params(2);
        let x = cloud(5, 2500);
        match predict(&params, &x, 512, 4, 1) {
            Err(Error::Config(msg)) => assert!(msg.contains("at least 5"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert_eq!(minimum_passes(2500, 512), 5);
    }

    #[test]
    fn every_pass_budget_covers_all_nodes() {
        let params = test_params(3);
        for (n, s, extra) in [(100usize, 16usize, 0usize), (37, 8, 3), (64, 64, 1), (9, 4, 2)] {
            let x = cloud(n as u64, n);
            let p = minimum_passes(n, s) + extra;
            let pred = predict(&params, &x, s, p, 11).unwrap();
            assert!(pred.pass_counts.iter().all(|&c| c >= 1), "n={n} s={s} p={p}");
            assert_eq!(pred.passes.len(), p);
        }
    }

    #[test]
    fn mean_is_recomputable_from_pass_records() {
        let params = test_params(4);
        let n = 53;
        let x = cloud(6, n);
        let pred = predict(&params, &x, 16, 7, 21).unwrap();

        let mut sums = vec![[0.0f64; 3]; n];
        let mut counts = vec![0u64; n];
        for rec in &pred.passes {
            for (row, &idx) in rec.indices.iter().enumerate() {
                for j in 0..3 {
                    sums[idx as usize][j] += rec.outputs.get(row, j);
                }
                counts[idx as usize] += 1;
            }
        }
        for i in 0..n {
            for j in 0..3 {
                assert_eq!(pred.mean[i][j], sums[i][j] / counts[i] as f64, "node {i}");
            }
        }
    }

    #[test]
    fn duplicate_occurrences_in_one_pass_each_contribute() {
        // Tiny point set with a large block: padding necessarily repeats
        // nodes inside the single pass, and the mean must weight by
        // occurrence, not by pass membership.
        let params = test_params(5);
        let n = 3;
        let x = cloud(8, n);
        let pred = predict(&params, &x, 16, 1, 5).unwrap();
        let rec = &pred.passes[0];
        let mut occ = vec![0usize; n];
        for &i in &rec.indices {
            occ[i as usize] += 1;
        }
        assert!(occ.iter().any(|&c| c > 1), "padding should duplicate at least one node");
        assert!(pred.pass_counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn tagged_prediction_is_permutation_invariant() {
        let params = test_params(6);
        let n = 41;
        let x = cloud(10, n);
        let tags: Vec<u64> = (0..n as u64).map(|i| i * 17 + 3).collect();
        let base = predict_tagged(&params, &x, &tags, 8, 9, 33).unwrap();

        let mut rng = rng_for(19, &[2]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut xp = Tensor::zeros(n, 9);
        let mut tp = vec![0u64; n];
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..9 {
                xp.set(i, j, x.get(src, j));
            }
            tp[i] = tags[src];
        }
        let permuted = predict_tagged(&params, &xp, &tp, 8, 9, 33).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.mean[i], base.mean[src]);
            assert_eq!(permuted.pass_counts[i], base.pass_counts[src]);
        }
    }

    #[test]
    fn prediction_is_deterministic_in_the_seed() {
        let params = test_params(7);
        let x = cloud(12, 29);
        let a = predict(&params, &x, 8, 6, 5).unwrap();
        let b = predict(&params, &x, 8, 6, 5).unwrap();
        let c = predict(&params, &x, 8, 6, 6).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn prediction_file_roundtrip() {
        let params = test_params(8);
        let x = cloud(14, 21);
        let pred = predict(&params, &x, 8, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.bmpr");
        write_predictions(&path, &pred, 12.5).unwrap();
        let (mean, counts, latency) = read_predictions(&path).unwrap();
        assert_eq!(mean, pred.mean);
        assert_eq!(counts, pred.pass_counts);
        assert_eq!(latency, 12.5);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_predictions(&path), Err(Error::Compatibility(_))));
    }

    #[test]
    fn latency_doubles_with_the_pass_budget() {
        // Timing is noisy on a shared core; a systematic deviation from
        // linear cost in the pass budget fails all three attempts.
        let params = test_params(9);
        let x = cloud(16, 600);
        let mut last_ratio = 0.0;
        for _ in 0..3 {
            let base = benchmark_latency(&params, &x, 128, 10, 1, 5).unwrap();
            let double = benchmark_latency(&params, &x, 128, 20, 1, 5).unwrap();
            last_ratio = double.median_ms / base.median_ms;
            if (1.8..=2.2).contains(&last_ratio) {
                return;
            }
        }
        panic!("doubling passes changed latency by {last_ratio:.2}x in all attempts");
    }
}
