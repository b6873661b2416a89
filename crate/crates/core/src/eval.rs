//! Frozen-feature evaluation: k-means clustering (direct and overclustered)
//! with Hungarian-matched mIoU, and dense nearest-neighbor retrieval against
//! a labeled memory bank.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{patch_labels, SyntheticScene};
use crate::model::{encode, patchify, ModelParams};
use crate::seed::{derive_seed, stage_rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Result of one k-means run. `history` holds the inertia measured after
/// every assignment pass; it never increases.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ seeding. Assignment distance ties break
/// toward the lower cluster id; empty clusters are re-seeded to the point
/// farthest from its current centroid, so every cluster ends non-empty.
pub fn kmeans(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<ClusterAssignment> {
    if features.rank() != 2 {
        return Err(Error::invalid("kmeans", "features must be n×d"));
    }
    let (n, d) = (features.rows(), features.cols());
    if k == 0 || n < k {
        return Err(Error::invalid(
            "kmeans",
            format!("{n} points cannot form {k} clusters"),
        ));
    }
    let point = |i: usize| &features.data()[i * d..(i + 1) * d];
    let mut rng = stage_rng(seed, "kmeans", 0);

    // k-means++: next centroid drawn proportionally to squared distance
    // from the chosen set; all-zero weights (duplicate points) fall back to
    // a uniform draw.
    let mut centroids: Vec<Vec<f64>> = vec![point(rng.gen_range(0..n)).to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| nearest_centroid(point(i), &centroids).1)
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            Err(_) => rng.gen_range(0..n),
        };
        centroids.push(point(next).to_vec());
    }

    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let assignment: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(point(i), &centroids))
            .collect();
        let new_labels: Vec<usize> = assignment.iter().map(|&(c, _)| c).collect();
        history.push(assignment.iter().map(|&(_, dsq)| dsq).sum());
        let converged = new_labels == labels && history.len() > 1;
        labels = new_labels;
        if converged {
            break;
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &x) in sums[labels[i]].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            } else {
                // Farthest point from its own centroid, skipping points
                // already donated to another empty cluster this round.
                let far = (0..n)
                    .filter(|i| !reseeded.contains(i))
                    .max_by(|&a, &b| {
                        let da = sq_dist(point(a), &centroids[labels[a]]);
                        let db = sq_dist(point(b), &centroids[labels[b]]);
                        da.partial_cmp(&db).expect("distances are finite")
                    })
                    .expect("n >= k leaves a donor point");
                reseeded.push(far);
                centroids[c] = point(far).to_vec();
            }
        }
    }

    let inertia = *history.last().expect("at least one iteration ran");
    let centroid_data: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(ClusterAssignment {
        labels,
        centroids: Tensor::new(vec![k, d], centroid_data)?,
        inertia,
        history,
    })
}

/// Minimal-cost perfect matching on a square cost grid by shortest
/// augmenting paths over potentials. Returns (total cost, row → column).
fn lap_min(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|r| cost[r][row_to_col[r]]).sum();
    (total, row_to_col)
}

/// Optimal injective cluster→class assignment minimizing total cost.
/// Rectangular inputs are padded with zero-cost dummies; a row assigned to
/// a dummy column comes back as `None`. Among equal-cost optima the
/// lexicographically smallest assignment wins: rows are fixed in order,
/// each to the smallest column that still permits an optimal completion.
pub fn hungarian(cost: &Tensor) -> Result<Vec<Option<usize>>> {
    if cost.rank() != 2 {
        return Err(Error::invalid("hungarian", "cost must be K×C"));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hungarian", "costs must be finite"));
    }
    let (k, c) = (cost.rows(), cost.cols());
    let n = k.max(c);
    let grid: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|j| if r < k && j < c { cost.at(r, j) } else { 0.0 })
                .collect()
        })
        .collect();

    let (best, _) = lap_min(&grid);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut taken = vec![false; n];
    let mut fixed = 0.0;
    let mut result = vec![None; k];
    for r in 0..k {
        let mut chosen = None;
        for col in 0..n {
            if taken[col] {
                continue;
            }
            // Cost of the best completion with rows r+1.. on the free
            // columns, given row r takes `col`.
            let free_cols: Vec<usize> = (0..n).filter(|&j| !taken[j] && j != col).collect();
            let sub: Vec<Vec<f64>> = (r + 1..n)
                .map(|rr| free_cols.iter().map(|&j| grid[rr][j]).collect())
                .collect();
            let (sub_cost, _) = lap_min(&sub);
            if fixed + grid[r][col] + sub_cost <= best + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("an optimal completion always exists");
        taken[col] = true;
        fixed += grid[r][col];
        if col < c {
            result[r] = Some(col);
        }
    }
    Ok(result)
}

/// Per-class intersection over union. `None` marks classes absent from the
/// ground truth, which the mean skips.
pub fn per_class_iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("miou", "prediction and ground truth differ in length"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("miou", "empty label maps"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(
                "miou",
                format!("label out of range for {num_classes} classes"),
            ));
        }
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|cls| {
            if gt_count[cls] == 0 {
                None
            } else {
                let union = pred_count[cls] + gt_count[cls] - inter[cls];
                Some(inter[cls] as f64 / union as f64)
            }
        })
        .collect())
}

/// Mean IoU over the classes present in the ground truth.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    let per_class = per_class_iou(pred, gt, num_classes)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::invalid("miou", "ground truth has no in-range classes"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Overclustering protocol: every cluster is first greedily absorbed by the
/// class dominating it (precision argmax, ties to the lower class), then
/// the merged super-clusters are matched 1:1 to classes by Hungarian
/// assignment on 1 − IoU. Returns the final cluster→class map.
pub fn overcluster_match(
    clusters: &[usize],
    gt: &[usize],
    k_over: usize,
    num_classes: usize,
) -> Result<Vec<usize>> {
    if clusters.len() != gt.len() || clusters.is_empty() {
        return Err(Error::invalid("overcluster", "label maps empty or mismatched"));
    }
    if k_over < num_classes {
        return Err(Error::invalid(
            "overcluster",
            format!("{k_over} clusters cannot cover {num_classes} classes"),
        ));
    }
    let mut counts = vec![vec![0usize; num_classes]; k_over];
    for (&cl, &g) in clusters.iter().zip(gt) {
        if cl >= k_over || g >= num_classes {
            return Err(Error::invalid("overcluster", "label out of range"));
        }
        counts[cl][g] += 1;
    }
    let greedy: Vec<usize> = counts
        .iter()
        .map(|row| {
            let mut best = 0;
            for cls in 1..num_classes {
                if row[cls] > row[best] {
                    best = cls;
                }
            }
            best
        })
        .collect();

    // IoU of each merged super-cluster (indexed by the class it merged
    // into) against each ground-truth class.
    let merged: Vec<usize> = clusters.iter().map(|&cl| greedy[cl]).collect();
    let mut inter = vec![vec![0usize; num_classes]; num_classes];
    let mut merged_count = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for (&m, &g) in merged.iter().zip(gt) {
        inter[m][g] += 1;
        merged_count[m] += 1;
        gt_count[g] += 1;
    }
    let mut cost = Vec::with_capacity(num_classes * num_classes);
    for m in 0..num_classes {
        for g in 0..num_classes {
            let union = merged_count[m] + gt_count[g] - inter[m][g];
            let iou = if union == 0 {
                0.0
            } else {
                inter[m][g] as f64 / union as f64
            };
            cost.push(1.0 - iou);
        }
    }
    let assignment = hungarian(&Tensor::new(vec![num_classes, num_classes], cost)?)?;
    let remap: Vec<usize> = assignment
        .into_iter()
        .map(|a| a.expect("square assignment is total"))
        .collect();
    Ok(greedy.into_iter().map(|m| remap[m]).collect())
}

/// Labeled patch features for retrieval, rows unit-normalized.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl MemoryBank {
    pub fn new(features: Tensor, labels: Vec<u8>) -> Result<Self> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::invalid("memory_bank", "features must be non-empty M×d"));
        }
        if features.rows() != labels.len() {
            return Err(Error::invalid("memory_bank", "feature/label count mismatch"));
        }
        let d = features.cols();
        for row in 0..features.rows() {
            let norm: f64 = (0..d).map(|c| features.at(row, c).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "memory_bank",
                    format!("row {row} has norm {norm}, not unit"),
                ));
            }
        }
        Ok(MemoryBank { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

fn normalize_rows(features: &Tensor, op: &'static str) -> Result<Tensor> {
    let (n, d) = (features.rows(), features.cols());
    let mut out = features.clone();
    for row in 0..n {
        let slice = &mut out.data_mut()[row * d..(row + 1) * d];
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(op, format!("feature row {row} is zero")));
        }
        for v in slice.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Backbone patch tokens of one scene's image, raw (the projection head
/// plays no part in evaluation).
pub fn encode_patch_features(params: &ModelParams, scene: &SyntheticScene) -> Result<Tensor> {
    let patch = params.config.patch_size;
    let patches = patchify(&scene.image, patch)?;
    let grid = (scene.image.height() / patch, scene.image.width() / patch);
    Ok(encode(params, &patches, grid)?.tokens)
}

/// Unit-normalized patch features plus majority patch labels for a set of
/// scenes, uniformly subsampled down to `cap` rows when they exceed it.
pub fn build_memory_bank<F>(
    featurize: &F,
    scenes: &[SyntheticScene],
    patch: usize,
    cap: usize,
    seed: u64,
) -> Result<MemoryBank>
where
    F: Fn(&SyntheticScene) -> Result<Tensor> + Sync,
{
    if scenes.is_empty() || cap == 0 {
        return Err(Error::invalid("memory_bank", "no scenes or zero capacity"));
    }
    let encoded: Vec<(Tensor, Vec<u8>)> = scenes
        .par_iter()
        .map(|scene| {
            let feats = featurize(scene)?;
            let labels = patch_labels(
                &scene.mask,
                scene.image.height(),
                scene.image.width(),
                patch,
            )?;
            if feats.rows() != labels.len() {
                return Err(Error::invalid(
                    "memory_bank",
                    "feature rows do not match patch label count",
                ));
            }
            Ok((feats, labels))
        })
        .collect::<Result<_>>()?;

    let d = encoded[0].0.cols();
    let total: usize = encoded.iter().map(|(f, _)| f.rows()).sum();
    let keep: Vec<usize> = if total > cap {
        let mut rng = stage_rng(seed, "bank-subsample", 0);
        let mut picked = rand::seq::index::sample(&mut rng, total, cap).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total).collect()
    };

    let mut data = Vec::with_capacity(keep.len() * d);
    let mut labels = Vec::with_capacity(keep.len());
    let mut flat = Vec::with_capacity(total);
    for (img, (feats, labs)) in encoded.iter().enumerate() {
        for row in 0..feats.rows() {
            flat.push((img, row, labs[row]));
        }
    }
    for &idx in &keep {
        let (img, row, label) = flat[idx];
        let feats = &encoded[img].0;
        data.extend((0..d).map(|c| feats.at(row, c)));
        labels.push(label);
    }
    let features = normalize_rows(&Tensor::new(vec![keep.len(), d], data)?, "memory_bank")?;
    MemoryBank::new(features, labels)
}

/// Per-patch labels by temperature-softmax voting over the top-k cosine
/// neighbors in the bank. Similarity ties prefer the lower bank index;
/// score ties prefer the lower class id.
pub fn incontext_predict(
    query: &Tensor,
    bank: &MemoryBank,
    k: usize,
    temperature: f64,
) -> Result<Vec<usize>> {
    if query.rank() != 2 || query.cols() != bank.features.cols() {
        return Err(Error::invalid(
            "incontext",
            "query must be N×d with the bank's feature width",
        ));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::invalid(
            "incontext",
            format!("k = {k} outside bank of {}", bank.len()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("incontext", "temperature must be positive"));
    }
    let normalized = normalize_rows(query, "incontext")?;
    let num_classes = bank.labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let d = bank.features.cols();

    let predictions: Vec<usize> = (0..normalized.rows())
        .into_par_iter()
        .map(|qi| {
            let q = &normalized.data()[qi * d..(qi + 1) * d];
            let mut sims: Vec<(f64, usize)> = (0..bank.len())
                .map(|bi| {
                    let b = &bank.features.data()[bi * d..(bi + 1) * d];
                    let sim: f64 = q.iter().zip(b).map(|(x, y)| x * y).sum();
                    (sim, bi)
                })
                .collect();
            sims.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("similarities are finite")
                    .then(a.1.cmp(&b.1))
            });
            let top = &sims[..k];
            // The shared softmax denominator cancels in the argmax, so
            // only the shifted exponentials accumulate.
            let max_sim = top[0].0;
            let mut scores = vec![0.0; num_classes];
            for &(sim, bi) in top {
                scores[bank.labels[bi] as usize] += ((sim - max_sim) / temperature).exp();
            }
            let mut best = 0;
            for cls in 1..num_classes {
                if scores[cls] > scores[best] {
                    best = cls;
                }
            }
            best
        })
        .collect();
    Ok(predictions)
}

/// One protocol's scores, shaped for JSON reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub k: usize,
    pub fraction: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(rename = "mIoU_mean")]
    pub miou_mean: f64,
    #[serde(rename = "mIoU_std")]
    pub miou_std: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Class-balanced scene subsample: round-robin over foreground classes,
/// drawing shuffled unseen scenes that contain each class.
fn balanced_subsample(
    scenes: &[SyntheticScene],
    target: usize,
    num_classes: usize,
    seed: u64,
) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, scene) in scenes.iter().enumerate() {
        let mut present = vec![false; num_classes];
        for &label in &scene.mask {
            if (label as usize) < num_classes {
                present[label as usize] = true;
            }
        }
        for (cls, hit) in present.iter().enumerate().skip(1) {
            if *hit {
                per_class[cls].push(i);
            }
        }
    }
    let mut rng = stage_rng(seed, "balanced-subsample", 0);
    for list in per_class.iter_mut().skip(1) {
        list.shuffle(&mut rng);
    }
    let mut chosen = Vec::with_capacity(target);
    let mut used = vec![false; scenes.len()];
    let mut cursors = vec![0usize; num_classes];
    'outer: loop {
        let mut progressed = false;
        for cls in 1..num_classes {
            while cursors[cls] < per_class[cls].len() {
                let candidate = per_class[cls][cursors[cls]];
                cursors[cls] += 1;
                if !used[candidate] {
                    used[candidate] = true;
                    chosen.push(candidate);
                    progressed = true;
                    if chosen.len() == target {
                        break 'outer;
                    }
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    chosen
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Dense retrieval protocol: build a bank from a fraction of the training
/// scenes, predict every validation patch by neighbor voting, and score
/// patch-level mIoU directly against the class ids (no matching step).
/// Fractions below one average over five derived seeds.
pub fn eval_incontext_with<F>(
    featurize: &F,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    num_classes: usize,
    patch: usize,
    cap: usize,
    k: usize,
    temperature: f64,
    fraction: f64,
    trials: usize,
    seed: u64,
) -> Result<EvalReport>
where
    F: Fn(&SyntheticScene) -> Result<Tensor> + Sync,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("eval", "fraction outside (0, 1]"));
    }
    if trials == 0 {
        return Err(Error::invalid("eval", "trials must be positive"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("eval", "empty split"));
    }
    // The full-population bank is deterministic, so one trial covers it.
    let full = (1.0 - fraction).abs() < 1e-12;
    let trials = if full { 1 } else { trials };
    let trial_seeds: Vec<u64> = (0..trials)
        .map(|t| derive_seed(seed, "incontext-trial", t as u64))
        .collect();

    let gt: Vec<usize> = val
        .iter()
        .map(|scene| {
            patch_labels(&scene.mask, scene.image.height(), scene.image.width(), patch)
                .map(|ls| ls.into_iter().map(usize::from).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut scores = Vec::with_capacity(trials);
    let mut class_sums = vec![(0.0, 0usize); num_classes];
    for &tseed in &trial_seeds {
        let subset: Vec<SyntheticScene> = if full {
            train.to_vec()
        } else {
            let target = ((train.len() as f64 * fraction).round() as usize).max(1);
            balanced_subsample(train, target, num_classes, tseed)
                .into_iter()
                .map(|i| train[i].clone())
                .collect()
        };
        let bank = build_memory_bank(featurize, &subset, patch, cap, tseed)?;
        let preds: Vec<usize> = val
            .par_iter()
            .map(|scene| {
                let feats = featurize(scene)?;
                incontext_predict(&feats, &bank, k, temperature)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        scores.push(miou(&preds, &gt, num_classes)?);
        for (cls, iou) in per_class_iou(&preds, &gt, num_classes)?.into_iter().enumerate() {
            if let Some(iou) = iou {
                class_sums[cls].0 += iou;
                class_sums[cls].1 += 1;
            }
        }
    }
    let (mean, std) = mean_and_std(&scores);
    Ok(EvalReport {
        protocol: "incontext".to_string(),
        k,
        fraction: Some(fraction),
        seeds: trial_seeds,
        miou_mean: mean,
        miou_std: std,
        per_class_iou: class_sums
            .into_iter()
            .map(|(sum, n)| if n > 0 { Some(sum / n as f64) } else { None })
            .collect(),
    })
}

/// `eval_incontext_with` over a frozen encoder's backbone tokens.
#[allow(clippy::too_many_arguments)]
pub fn eval_incontext(
    encoder: &ModelParams,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    num_classes: usize,
    cap: usize,
    k: usize,
    temperature: f64,
    fraction: f64,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let patch = encoder.config.patch_size;
    eval_incontext_with(
        &|scene| encode_patch_features(encoder, scene),
        train,
        val,
        num_classes,
        patch,
        cap,
        k,
        temperature,
        fraction,
        trials,
        seed,
    )
}

/// Clustering protocol: k-means over every validation patch feature, then
/// clusters matched to classes — directly by Hungarian assignment on
/// 1 − IoU when k equals the class count, through the greedy overcluster
/// merge when k exceeds it.
pub fn eval_clustering_with<F>(
    featurize: &F,
    val: &[SyntheticScene],
    num_classes: usize,
    k: usize,
    patch: usize,
    max_iters: usize,
    seed: u64,
    unit_norm: bool,
) -> Result<EvalReport>
where
    F: Fn(&SyntheticScene) -> Result<Tensor> + Sync,
{
    if val.is_empty() {
        return Err(Error::invalid("eval", "empty split"));
    }
    if k < num_classes {
        return Err(Error::invalid(
            "eval",
            format!("{k} clusters cannot cover {num_classes} classes"),
        ));
    }
    let encoded: Vec<(Tensor, Vec<u8>)> = val
        .par_iter()
        .map(|scene| {
            let feats = featurize(scene)?;
            let labels = patch_labels(
                &scene.mask,
                scene.image.height(),
                scene.image.width(),
                patch,
            )?;
            Ok((feats, labels))
        })
        .collect::<Result<_>>()?;
    let d = encoded[0].0.cols();
    let mut data = Vec::new();
    let mut gt = Vec::new();
    for (feats, labels) in &encoded {
        data.extend_from_slice(feats.data());
        gt.extend(labels.iter().map(|&l| l as usize));
    }
    let mut features = Tensor::new(vec![gt.len(), d], data)?;
    if unit_norm {
        features = normalize_rows(&features, "eval")?;
    }

    let assignment = kmeans(&features, k, max_iters, seed)?;
    let map: Vec<usize> = if k == num_classes {
        let mut inter = vec![vec![0usize; num_classes]; k];
        let mut cluster_count = vec![0usize; k];
        let mut gt_count = vec![0usize; num_classes];
        for (&cl, &g) in assignment.labels.iter().zip(&gt) {
            inter[cl][g] += 1;
            cluster_count[cl] += 1;
            gt_count[g] += 1;
        }
        let mut cost = Vec::with_capacity(k * num_classes);
        for cl in 0..k {
            for g in 0..num_classes {
                let union = cluster_count[cl] + gt_count[g] - inter[cl][g];
                let iou = if union == 0 {
                    0.0
                } else {
                    inter[cl][g] as f64 / union as f64
                };
                cost.push(1.0 - iou);
            }
        }
        hungarian(&Tensor::new(vec![k, num_classes], cost)?)?
            .into_iter()
            .map(|a| a.expect("square assignment is total"))
            .collect()
    } else {
        overcluster_match(&assignment.labels, &gt, k, num_classes)?
    };
    let preds: Vec<usize> = assignment.labels.iter().map(|&cl| map[cl]).collect();

    Ok(EvalReport {
        protocol: if k == num_classes {
            "kmeans".to_string()
        } else {
            "overcluster".to_string()
        },
        k,
        fraction: None,
        seeds: vec![seed],
        miou_mean: miou(&preds, &gt, num_classes)?,
        miou_std: 0.0,
        per_class_iou: per_class_iou(&preds, &gt, num_classes)?,
    })
}

/// `eval_clustering_with` over a frozen encoder's backbone tokens.
pub fn eval_clustering(
    encoder: &ModelParams,
    val: &[SyntheticScene],
    num_classes: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
    unit_norm: bool,
) -> Result<EvalReport> {
    let patch = encoder.config.patch_size;
    eval_clustering_with(
        &|scene| encode_patch_features(encoder, scene),
        val,
        num_classes,
        k,
        patch,
        max_iters,
        seed,
        unit_norm,
    )
}
