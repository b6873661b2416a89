//! Differentiable sorting networks. A fixed schedule of compare-exchange
//! layers is relaxed by replacing each hard min/max with a convex mix whose
//! coefficient comes from a smooth monotone step function of the pair's
//! difference. Composing the per-layer mixing matrices yields a relaxed,
//! doubly-stochastic permutation matrix that converges to the hard
//! permutation as the step function sharpens.
//!
//! Conventions: sorting is ascending; `perm[rank][source]` is the weight of
//! input `source` at output `rank`, so `sorted = perm · values`. Every
//! compare-exchange pair `(i, j)` has `i < j` and routes the smaller value
//! to `i`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PointwiseFn, Tape, Tensor, Var};

/// Smooth monotone step used to relax compare-exchange decisions.
/// Both families satisfy f(0) = 1/2, f(x) + f(-x) = 1, and strict
/// monotonicity, and approach the hard step as `beta` grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaxFamily {
    /// f(x) = atan(beta·x)/pi + 1/2.
    Arctan { beta: f64 },
    /// f(x) = sigmoid(beta · x/(|x|^lambda + eps)); lambda = 0 is the plain
    /// logistic, lambda > 0 steepens the response near zero so gradients
    /// survive sharpening.
    Logistic { beta: f64, lambda: f64 },
}

/// Default sharpening exponent for the logistic family.
pub const DEFAULT_LAMBDA: f64 = 0.25;

impl RelaxFamily {
    pub fn arctan(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid("relax_family", "steepness must be positive"));
        }
        Ok(RelaxFamily::Arctan { beta })
    }

    pub fn logistic(beta: f64, lambda: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid("relax_family", "steepness must be positive"));
        }
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::invalid(
                "relax_family",
                format!("lambda {lambda} outside [0, 1)"),
            ));
        }
        Ok(RelaxFamily::Logistic { beta, lambda })
    }

    /// The default family at a given steepness.
    pub fn default_logistic(beta: f64) -> Result<Self> {
        Self::logistic(beta, DEFAULT_LAMBDA)
    }

    pub fn steepness(&self) -> f64 {
        match *self {
            RelaxFamily::Arctan { beta } => beta,
            RelaxFamily::Logistic { beta, .. } => beta,
        }
    }

    pub fn with_steepness(&self, beta: f64) -> Result<Self> {
        match *self {
            RelaxFamily::Arctan { .. } => Self::arctan(beta),
            RelaxFamily::Logistic { lambda, .. } => Self::logistic(beta, lambda),
        }
    }

    pub(crate) fn pointwise(&self) -> PointwiseFn {
        match *self {
            RelaxFamily::Arctan { beta } => PointwiseFn::RelaxArctan { beta },
            RelaxFamily::Logistic { beta, lambda } => {
                PointwiseFn::RelaxLogistic { beta, lambda }
            }
        }
    }

    /// Scalar evaluation of the relaxed step.
    pub fn relax(&self, x: f64) -> f64 {
        self.pointwise().eval(x)
    }

    /// Derivative of the relaxed step.
    pub fn relax_deriv(&self, x: f64) -> f64 {
        self.pointwise().deriv(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    OddEven,
    Bitonic,
}

/// A compare-exchange schedule: layers of disjoint (i, j) pairs with i < j.
#[derive(Debug, Clone)]
pub struct SortingNetwork {
    pub kind: NetworkKind,
    /// Number of real inputs.
    pub length: usize,
    /// Schedule width: `length` for odd-even, next power of two for bitonic.
    pub padded: usize,
    pub layers: Vec<Arc<Vec<(usize, usize)>>>,
}

fn odd_even_layers(n: usize) -> Vec<Arc<Vec<(usize, usize)>>> {
    (0..n)
        .map(|t| {
            let start = t % 2;
            let pairs = (start..n.saturating_sub(1))
                .step_by(2)
                .map(|i| (i, i + 1))
                .collect();
            Arc::new(pairs)
        })
        .collect()
}

/// Bitonic schedule in the normalized form where every comparator routes the
/// minimum to the lower index: each block-size doubling starts with a
/// mirrored layer (i paired with its reflection in the block) followed by
/// halving straight layers (i paired with i + j).
fn bitonic_layers(p: usize) -> Vec<Arc<Vec<(usize, usize)>>> {
    debug_assert!(p.is_power_of_two());
    let mut layers = Vec::new();
    let mut k = 2;
    while k <= p {
        let mut mirror = Vec::with_capacity(p / 2);
        for base in (0..p).step_by(k) {
            for i in 0..k / 2 {
                mirror.push((base + i, base + k - 1 - i));
            }
        }
        layers.push(Arc::new(mirror));
        let mut j = k / 4;
        while j >= 1 {
            let mut straight = Vec::with_capacity(p / 2);
            for i in 0..p {
                if i & j == 0 {
                    straight.push((i, i + j));
                }
            }
            layers.push(Arc::new(straight));
            j /= 2;
        }
        k *= 2;
    }
    layers
}

/// Builds the compare-exchange schedule for `length` inputs.
///
/// Odd-even has exactly `length` layers alternating between the two brick
/// patterns. Bitonic runs over the next power of two with missing slots
/// filled by above-maximum sentinels at the top positions; its layer count
/// is `log2(p)·(log2(p)+1)/2`.
pub fn build_network(kind: NetworkKind, length: usize) -> Result<SortingNetwork> {
    if length == 0 {
        return Err(Error::invalid("build_network", "length must be >= 1"));
    }
    let (padded, layers) = match kind {
        NetworkKind::OddEven => (length, odd_even_layers(length)),
        NetworkKind::Bitonic => {
            let p = length.next_power_of_two();
            let layers = if p == 1 { Vec::new() } else { bitonic_layers(p) };
            (p, layers)
        }
    };
    let net = SortingNetwork {
        kind,
        length,
        padded,
        layers,
    };
    net.validate()?;
    Ok(net)
}

impl SortingNetwork {
    /// Checks the schedule invariants: in-bounds ordered pairs, disjoint
    /// within each layer.
    pub fn validate(&self) -> Result<()> {
        for (t, layer) in self.layers.iter().enumerate() {
            let mut seen = vec![false; self.padded];
            for &(i, j) in layer.iter() {
                if i >= j || j >= self.padded {
                    return Err(Error::invalid(
                        "sorting_network",
                        format!("layer {t}: pair ({i},{j}) out of range"),
                    ));
                }
                if seen[i] || seen[j] {
                    return Err(Error::invalid(
                        "sorting_network",
                        format!("layer {t}: pair ({i},{j}) overlaps"),
                    ));
                }
                seen[i] = true;
                seen[j] = true;
            }
        }
        Ok(())
    }

    /// Discrete execution: applies every compare-exchange with hard swaps.
    /// Used as the schedule-correctness oracle.
    pub fn hard_apply(&self, values: &[f64]) -> Vec<f64> {
        let mut v = values.to_vec();
        v.resize(self.padded, f64::INFINITY);
        for layer in &self.layers {
            for &(i, j) in layer.iter() {
                if v[i] > v[j] {
                    v.swap(i, j);
                }
            }
        }
        v.truncate(values.len());
        v
    }
}

/// Relaxed sort of a vector on the tape.
pub struct SoftSort {
    /// Relaxed permutation, shape (n, n): row = output rank, column = input.
    pub perm: Var,
    /// `perm · values`.
    pub sorted: Var,
}

/// Mixing coefficients for one layer: a_q = f(d_j - d_i) per pair, evaluated
/// on the current working values.
fn layer_coeffs(
    tape: &mut Tape,
    values: Var,
    pairs: &Arc<Vec<(usize, usize)>>,
    family: &RelaxFamily,
) -> Result<Var> {
    let is: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let js: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let di = tape.gather_rows(values, &is)?;
    let dj = tape.gather_rows(values, &js)?;
    let diff = tape.sub(dj, di)?;
    tape.pointwise(diff, family.pointwise())
}

/// Applies one compare-exchange layer to `values` and returns the updated
/// values together with the layer's doubly-stochastic matrix P (identity
/// outside the pairs; P_ii = P_jj = f(d_j - d_i), P_ij = P_ji = f(d_i - d_j)).
pub fn swap_layer(
    tape: &mut Tape,
    values: Var,
    pairs: &[(usize, usize)],
    family: &RelaxFamily,
) -> Result<(Var, Var)> {
    let n = tape.value(values).rows();
    let pairs = Arc::new(pairs.to_vec());
    if pairs.is_empty() {
        let eye = tape.constant(Tensor::eye(n))?;
        return Ok((values, eye));
    }
    let a = layer_coeffs(tape, values, &pairs, family)?;
    let eye = tape.constant(Tensor::eye(n))?;
    let p = tape.pair_row_mix(eye, a, pairs.clone())?;
    let out = tape.pair_row_mix(values, a, pairs)?;
    Ok((out, p))
}

/// Runs the full relaxed network over a vector. Gradients flow to `values`
/// through both the mixing coefficients and the value updates.
///
/// For a bitonic schedule on a non-power-of-two length the input is padded
/// with constant sentinels (one above the maximum value) at the top
/// positions; the returned `perm` is the principal submatrix over real
/// inputs and ranks, re-normalized columnwise.
pub fn soft_sort(
    tape: &mut Tape,
    values: Var,
    net: &SortingNetwork,
    family: &RelaxFamily,
) -> Result<SoftSort> {
    let v = tape.value(values);
    if v.rank() != 1 {
        return Err(Error::invalid("soft_sort", "values must be rank-1"));
    }
    let n = v.rows();
    if n != net.length {
        return Err(Error::invalid(
            "soft_sort",
            format!("values length {n} != network length {}", net.length),
        ));
    }
    if !v.iter_finite() {
        return Err(Error::invalid("soft_sort", "values must be finite"));
    }

    let mut work = values;
    if net.padded > n {
        let maxv = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sentinel = Tensor::full(&[net.padded - n], maxv + 1.0);
        let s = tape.constant(sentinel)?;
        work = tape.concat_rows(&[values, s])?;
    }

    let mut q = tape.constant(Tensor::eye(net.padded))?;
    for layer in &net.layers {
        if layer.is_empty() {
            continue;
        }
        let a = layer_coeffs(tape, work, layer, family)?;
        work = tape.pair_row_mix(work, a, layer.clone())?;
        q = tape.pair_row_mix(q, a, layer.clone())?;
    }

    let perm = if net.padded > n {
        let keep: Vec<usize> = (0..n).collect();
        let rows = tape.gather_rows(q, &keep)?;
        let sub = tape.slice_cols(rows, 0, n)?;
        tape.normalize_cols(sub)?
    } else {
        q
    };
    let sorted = tape.matmul(perm, values)?;
    Ok(SoftSort { perm, sorted })
}

/// Plain-value convenience wrapper: sorts `values` on a private tape and
/// returns the relaxed permutation and sorted vector as tensors.
pub fn soft_sort_values(
    values: &[f64],
    net: &SortingNetwork,
    family: &RelaxFamily,
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(values.to_vec()))?;
    let out = soft_sort(&mut tape, v, net, family)?;
    Ok((
        tape.value(out.perm).clone(),
        tape.value(out.sorted).data().to_vec(),
    ))
}

/// Exact comparison-sort reference: returns the ascending values and the
/// hard permutation matrix (ties broken toward the lower original index).
pub fn hard_sort_oracle(values: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hard_sort_oracle", "values must be finite"));
    }
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values compare")
            .then(a.cmp(&b))
    });
    let mut perm = Tensor::zeros(&[n, n]);
    let mut sorted = Vec::with_capacity(n);
    for (rank, &src) in idx.iter().enumerate() {
        perm.data_mut()[rank * n + src] = 1.0;
        sorted.push(values[src]);
    }
    Ok((sorted, perm))
}
