//! Finite-difference audit of every differentiable component, printed as a
//! pass/fail table. Each check rebuilds its graph per perturbed coordinate
//! through `finite_difference_check`, so a pass means the reverse-mode
//! gradients agree with central differences at the probed points.

use anyhow::{bail, Result};
use neco_core::loss::{
    cross_entropy_perm, neco_loss, sample_references, LossConfig, RefSource, SortKind,
};
use neco_core::seed::stage_rng;
use neco_core::sortnet::{build_network, soft_sort, swap_layer, NetworkKind, RelaxFamily};
use neco_core::tensor::{finite_difference_check, Tape, Tensor, Var};
use neco_core::views::roi_align;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
const INSTANCES: usize = 10;

struct Row {
    component: String,
    instances: usize,
    max_rel_err: f64,
}

impl Row {
    fn pass(&self) -> bool {
        self.max_rel_err <= TOL
    }
}

/// Distinct values with a floor on pairwise gaps, shuffled. Keeps the probe
/// away from comparator crossings, where the true objective has a kink.
fn gapped_values(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    let mut vals = Vec::with_capacity(n);
    let mut acc = rng.gen_range(-1.0..0.0);
    for _ in 0..n {
        acc += 0.05 + rng.gen_range(0.0..0.3);
        vals.push(acc);
    }
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    vals
}

fn weights(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Scalar probe: random projection of a (matrix, vector) pair of outputs.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var, neco_core::Error> {
    let w = tape.constant(w.clone())?;
    let prod = tape.mul(out, w)?;
    tape.mean(prod)
}

fn check_relax(seed: u64) -> Result<Row> {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(seed, "relax", inst as u64);
        let beta = rng.gen_range(2.0..30.0);
        let family = if inst % 2 == 0 {
            RelaxFamily::arctan(beta)?
        } else {
            RelaxFamily::logistic(beta, rng.gen_range(0.1..0.5))?
        };
        for _ in 0..16 {
            let x = rng.gen_range(-0.5..0.5);
            let numeric = (family.relax(x + EPS) - family.relax(x - EPS)) / (2.0 * EPS);
            let analytic = family.relax_deriv(x);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(Row {
        component: "relax_fn".into(),
        instances: INSTANCES,
        max_rel_err: worst,
    })
}

fn check_swap_layer(seed: u64) -> Result<Row> {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(seed, "swap-layer", inst as u64);
        let n = 4 + 2 * (inst % 3);
        let family = RelaxFamily::default_logistic(rng.gen_range(2.0..20.0))?;
        let pairs: Vec<(usize, usize)> = (0..n / 2).map(|p| (2 * p, 2 * p + 1)).collect();
        let point = Tensor::vector(gapped_values(&mut rng, n));
        let wv = weights(&mut rng, &[n]);
        let wp = weights(&mut rng, &[n, n]);
        let err = finite_difference_check(
            |tape, values| {
                let (out, p) = swap_layer(tape, values, &pairs, &family)?;
                let a = project(tape, out, &wv)?;
                let b = project(tape, p, &wp)?;
                tape.add(a, b)
            },
            &point,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(Row {
        component: "swap_layer".into(),
        instances: INSTANCES,
        max_rel_err: worst,
    })
}

fn check_soft_sort(seed: u64, kind: NetworkKind, sizes: &[usize]) -> Result<Row> {
    let name = match kind {
        NetworkKind::OddEven => "soft_sort/odd_even",
        NetworkKind::Bitonic => "soft_sort/bitonic",
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    for &n in sizes {
        let net = build_network(kind, n)?;
        for inst in 0..INSTANCES {
            let mut rng = stage_rng(seed, name, (n * 1000 + inst) as u64);
            let family = RelaxFamily::default_logistic(rng.gen_range(2.0..15.0))?;
            let point = Tensor::vector(gapped_values(&mut rng, n));
            let wq = weights(&mut rng, &[n, n]);
            let ws = weights(&mut rng, &[n]);
            let err = finite_difference_check(
                |tape, values| {
                    let sort = soft_sort(tape, values, &net, &family)?;
                    let a = project(tape, sort.perm, &wq)?;
                    let b = project(tape, sort.sorted, &ws)?;
                    tape.add(a, b)
                },
                &point,
                EPS,
            )?;
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(Row {
        component: name.into(),
        instances: count,
        max_rel_err: worst,
    })
}

fn check_roi_align(seed: u64) -> Result<Row> {
    let mut worst = 0.0f64;
    let (grid, dim, g) = ((4usize, 4usize), 6usize, 3usize);
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(seed, "roi-align", inst as u64);
        let point = weights(&mut rng, &[grid.0 * grid.1, dim]);
        let x0 = rng.gen_range(0.0..0.4);
        let y0 = rng.gen_range(0.0..0.4);
        let rect = (
            x0,
            y0,
            x0 + rng.gen_range(0.3..0.6),
            y0 + rng.gen_range(0.3..0.6),
        );
        let mirror = inst % 2 == 1;
        let w = weights(&mut rng, &[g * g, dim]);
        let err = finite_difference_check(
            |tape, tokens| {
                let aligned = roi_align(tape, tokens, grid, rect, g, mirror)?;
                project(tape, aligned, &w)
            },
            &point,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(Row {
        component: "roi_align".into(),
        instances: INSTANCES,
        max_rel_err: worst,
    })
}

/// Positive quasi-permutation rows bounded away from the guarded-log floor.
fn positive_rows(rng: &mut ChaCha12Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / sum));
    }
    Tensor::new(vec![n, n], data).expect("square matrix")
}

fn check_cross_entropy(seed: u64) -> Result<Row> {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(seed, "cross-entropy", inst as u64);
        let n = 3 + inst % 4;
        let qt = positive_rows(&mut rng, n);
        let qs = positive_rows(&mut rng, n);
        // The target side is detached by contract, so only the student side
        // carries gradients worth checking.
        let err = finite_difference_check(
            |tape, qs| {
                let qt = tape.constant(qt.clone())?;
                cross_entropy_perm(tape, qt, qs)
            },
            &qs,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(Row {
        component: "cross_entropy_perm".into(),
        instances: INSTANCES,
        max_rel_err: worst,
    })
}

fn check_neco_loss(seed: u64) -> Result<Row> {
    let mut worst = 0.0f64;
    let (patches, dim, ref_count) = (4usize, 6usize, 8usize);
    let cfg = LossConfig {
        steepness_student: 5.0,
        steepness_teacher: 5.0,
        network_kind: SortKind::Bitonic,
        ..LossConfig::default()
    };
    for inst in 0..INSTANCES {
        let mut rng = stage_rng(seed, "neco-loss", inst as u64);
        let pool_a = weights(&mut rng, &[16, dim]);
        let pool_b = weights(&mut rng, &[16, dim]);
        let sources = [
            RefSource {
                tokens: &pool_a,
                attention: None,
            },
            RefSource {
                tokens: &pool_b,
                attention: None,
            },
        ];
        let refs = sample_references(&sources, 0, &cfg, ref_count, &mut rng)?;
        let f_t = weights(&mut rng, &[patches, dim]);
        let point = weights(&mut rng, &[patches, dim]);
        let err = finite_difference_check(
            |tape, f_s| neco_loss(tape, f_s, &f_t, &refs, &cfg),
            &point,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(Row {
        component: "neco_loss".into(),
        instances: INSTANCES,
        max_rel_err: worst,
    })
}

/// Runs every check and prints the table. Returns an error listing the
/// failed components if any row exceeds the tolerance.
pub fn run(seed: u64, sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        bail!("--sizes must list at least one length");
    }
    for &n in sizes {
        if n < 2 {
            bail!("sort length {n} is below the 2-element minimum");
        }
    }
    let rows = vec![
        check_relax(seed)?,
        check_swap_layer(seed)?,
        check_soft_sort(seed, NetworkKind::OddEven, sizes)?,
        check_soft_sort(seed, NetworkKind::Bitonic, sizes)?,
        check_roi_align(seed)?,
        check_cross_entropy(seed)?,
        check_neco_loss(seed)?,
    ];

    crate::emit(format!(
        "{:<22} {:>9} {:>13}  {}",
        "component", "instances", "max_rel_err", "status"
    ));
    let mut failed = Vec::new();
    for row in &rows {
        let status = if row.pass() { "PASS" } else { "FAIL" };
        crate::emit(format!(
            "{:<22} {:>9} {:>13.3e}  {}",
            row.component, row.instances, row.max_rel_err, status
        ));
        if !row.pass() {
            failed.push(row.component.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient checks failed: {}", failed.join(", "));
    }
    crate::emit(format!("all gradient checks passed (eps {EPS:.0e}, tol {TOL:.0e})"));
    Ok(())
}
