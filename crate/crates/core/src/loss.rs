//! Neighbor-order consistency loss. Each aligned patch's distances to a
//! shared set of reference features are sorted by a relaxed sorting network
//! for the student and the teacher separately; the loss is the cross-entropy
//! between the two relaxed permutation matrices, summed over patches.
//! Gradients reach only the student features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sortnet::{build_network, soft_sort, NetworkKind, RelaxFamily, DEFAULT_LAMBDA};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Euclidean,
}

/// Which relaxation shape both sides use; steepness is configured per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxKind {
    Arctan,
    Logistic,
}

/// Sorting choice; `None` is the sorting-free baseline where each distance
/// row is compared through a softmax over negated distances instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKind {
    OddEven,
    Bitonic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// References drawn from the anchor image only.
    Intra,
    /// References drawn from every image in the batch.
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    Fg,
    Bg,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub steepness_student: f64,
    pub steepness_teacher: f64,
    pub relax: RelaxKind,
    /// Sharpening exponent of the logistic relaxation; ignored by arctan.
    pub lambda: f64,
    pub network_kind: SortKind,
    /// Sort only the k nearest references (chosen on the teacher row);
    /// `None` sorts all of them.
    pub top_k: Option<usize>,
    pub similarity: Similarity,
    pub reference_mode: ReferenceMode,
    pub patch_policy: PatchPolicy,
    /// Cumulative attention mass that defines the foreground prefix.
    pub attention_mass: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            steepness_student: 100.0,
            steepness_teacher: 100.0,
            relax: RelaxKind::Logistic,
            lambda: DEFAULT_LAMBDA,
            network_kind: SortKind::Bitonic,
            top_k: None,
            similarity: Similarity::Cosine,
            reference_mode: ReferenceMode::Inter,
            patch_policy: PatchPolicy::Both,
            attention_mass: 0.7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steepness_student > 0.0) || !(self.steepness_teacher > 0.0) {
            return Err(Error::invalid("loss_config", "steepness must be positive"));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid("loss_config", "lambda outside [0, 1)"));
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("loss_config", "top_k must be >= 1"));
        }
        if !(self.attention_mass > 0.0 && self.attention_mass <= 1.0) {
            return Err(Error::invalid(
                "loss_config",
                "attention_mass outside (0, 1]",
            ));
        }
        Ok(())
    }

    fn family(&self, beta: f64) -> Result<RelaxFamily> {
        match self.relax {
            RelaxKind::Arctan => RelaxFamily::arctan(beta),
            RelaxKind::Logistic => RelaxFamily::logistic(beta, self.lambda),
        }
    }

    pub fn student_family(&self) -> Result<RelaxFamily> {
        self.family(self.steepness_student)
    }

    pub fn teacher_family(&self) -> Result<RelaxFamily> {
        self.family(self.steepness_teacher)
    }
}

/// Detached reference features with per-row provenance.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// R×d, never connected to gradients.
    pub features: Tensor,
    /// (image, patch) origin of each row.
    pub source_index: Vec<(usize, usize)>,
    pub mode: ReferenceMode,
}

impl ReferenceSet {
    pub fn new(
        features: Tensor,
        source_index: Vec<(usize, usize)>,
        mode: ReferenceMode,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::invalid("reference_set", "features must be R×d"));
        }
        let r = features.rows();
        if r < 2 {
            return Err(Error::invalid("reference_set", "need at least 2 references"));
        }
        if source_index.len() != r {
            return Err(Error::invalid(
                "reference_set",
                "source_index length != feature rows",
            ));
        }
        let d = features.cols();
        for row in 0..r {
            let norm2: f64 = (0..d).map(|c| features.at(row, c).powi(2)).sum();
            if norm2 == 0.0 {
                return Err(Error::invalid(
                    "reference_set",
                    format!("reference row {row} is a zero vector"),
                ));
            }
        }
        Ok(ReferenceSet {
            features,
            source_index,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One image's candidate reference patches: teacher tokens plus, when patch
/// filtering needs it, the attention weights over those patches.
pub struct RefSource<'a> {
    pub tokens: &'a Tensor,
    pub attention: Option<&'a [f64]>,
}

/// Patch indices admitted by the selection policy: `Fg` keeps the smallest
/// prefix of patches by descending attention whose cumulative mass reaches
/// `mass`, `Bg` keeps the complement, `Both` keeps every patch. Attention
/// ties break toward the lower patch index.
pub fn select_patches(
    count: usize,
    attention: Option<&[f64]>,
    policy: PatchPolicy,
    mass: f64,
) -> Result<Vec<usize>> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::invalid("select_patches", "mass outside (0, 1]"));
    }
    if policy == PatchPolicy::Both {
        return Ok((0..count).collect());
    }
    let att = attention.ok_or_else(|| {
        Error::invalid("select_patches", "attention map required for fg/bg policy")
    })?;
    if att.len() != count {
        return Err(Error::invalid(
            "select_patches",
            format!("attention length {} != patch count {count}", att.len()),
        ));
    }
    let mut order: Vec<usize> = (0..count).collect();
    // Stable sort keeps lower indices first on ties.
    order.sort_by(|&a, &b| att[b].partial_cmp(&att[a]).expect("finite attention"));
    let mut cum = 0.0;
    let mut cut = 0;
    for (pos, &idx) in order.iter().enumerate() {
        cum += att[idx];
        cut = pos + 1;
        if cum >= mass {
            break;
        }
    }
    let mut fg: Vec<usize> = order[..cut].to_vec();
    fg.sort_unstable();
    match policy {
        PatchPolicy::Fg => Ok(fg),
        PatchPolicy::Bg => {
            let mut in_fg = vec![false; count];
            for &i in &fg {
                in_fg[i] = true;
            }
            Ok((0..count).filter(|&i| !in_fg[i]).collect())
        }
        PatchPolicy::Both => unreachable!(),
    }
}

/// Draws `count` reference rows without replacement from the policy-filtered
/// patch pool: the anchor image's patches in intra mode, every batch image's
/// in inter mode. Row order is the draw order.
pub fn sample_references(
    images: &[RefSource],
    anchor: usize,
    cfg: &LossConfig,
    count: usize,
    rng: &mut impl Rng,
) -> Result<ReferenceSet> {
    if anchor >= images.len() {
        return Err(Error::invalid(
            "sample_references",
            format!("anchor image {anchor} out of range"),
        ));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (img, src) in images.iter().enumerate() {
        if cfg.reference_mode == ReferenceMode::Intra && img != anchor {
            continue;
        }
        if src.tokens.rank() != 2 {
            return Err(Error::invalid("sample_references", "tokens must be N×d"));
        }
        let picked = select_patches(
            src.tokens.rows(),
            src.attention,
            cfg.patch_policy,
            cfg.attention_mass,
        )?;
        pool.extend(picked.into_iter().map(|p| (img, p)));
    }
    if pool.len() < count {
        return Err(Error::invalid(
            "sample_references",
            format!("reference pool has {} patches, need {count}", pool.len()),
        ));
    }
    let d = images[anchor].tokens.cols();
    let chosen = rand::seq::index::sample(rng, pool.len(), count);
    let mut data = Vec::with_capacity(count * d);
    let mut source_index = Vec::with_capacity(count);
    for pick in chosen.iter() {
        let (img, patch) = pool[pick];
        let tokens = images[img].tokens;
        if tokens.cols() != d {
            return Err(Error::invalid(
                "sample_references",
                "inconsistent feature width across images",
            ));
        }
        for c in 0..d {
            data.push(tokens.at(patch, c));
        }
        source_index.push((img, patch));
    }
    ReferenceSet::new(Tensor::new(vec![count, d], data)?, source_index, cfg.reference_mode)
}

/// 1 − cosine similarity between all row pairs of `a` (n×d) and `b` (m×d).
pub fn cosine_distance_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.row_normalize(a)?;
    let bn = tape.row_normalize(b)?;
    let bt = tape.transpose(bn)?;
    let sim = tape.matmul(an, bt)?;
    let neg = tape.neg(sim)?;
    tape.add_const(neg, 1.0)
}

/// Distance matrix under the configured similarity.
pub fn distance_matrix(tape: &mut Tape, a: Var, b: Var, sim: Similarity) -> Result<Var> {
    match sim {
        Similarity::Cosine => cosine_distance_matrix(tape, a, b),
        Similarity::Euclidean => tape.pairwise_sqdist(a, b),
    }
}

/// Indices and values of the `k` smallest entries (ties toward the lower
/// index), indices returned in ascending order.
pub fn restrict_top_k(row: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > row.len() {
        return Err(Error::invalid(
            "restrict_top_k",
            format!("k={k} out of range for row of length {}", row.len()),
        ));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite distances"));
    let mut idx: Vec<usize> = order[..k].to_vec();
    idx.sort_unstable();
    let vals = idx.iter().map(|&i| row[i]).collect();
    Ok((idx, vals))
}

/// −Σ qt ⊙ log(qs), with qt detached so the target carries no gradient.
pub fn cross_entropy_perm(tape: &mut Tape, qt: Var, qs: Var) -> Result<Var> {
    let st = tape.shape(qt).to_vec();
    let ss = tape.shape(qs).to_vec();
    if st != ss {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_perm",
            lhs: st,
            rhs: ss,
        });
    }
    let qt = tape.detach(qt)?;
    let lg = tape.log_guarded(qs)?;
    let prod = tape.mul(qt, lg)?;
    let s = tape.sum(prod)?;
    tape.neg(s)
}

/// Value-only evaluation of the permutation cross-entropy.
pub fn cross_entropy_perm_value(qt: &Tensor, qs: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(qt.clone())?;
    let s = tape.constant(qs.clone())?;
    let ce = cross_entropy_perm(&mut tape, t, s)?;
    Ok(tape.value(ce).data()[0])
}

fn row_vector(tape: &mut Tape, mat: Var, row: usize, width: usize) -> Result<Var> {
    let picked = tape.gather_rows(mat, &[row])?;
    tape.reshape(picked, &[width])
}

/// Per-row softmax over negated distances, the sorting-free comparison.
fn softmax_row(tape: &mut Tape, row: Var, beta: f64, width: usize) -> Result<Var> {
    let scaled = tape.scale(row, -beta)?;
    let mat = tape.reshape(scaled, &[1, width])?;
    tape.softmax_rows(mat)
}

/// The neighbor-consistency loss over aligned patches.
///
/// `f_s` are the student's aligned features (N'×d, on-tape); `f_t` the
/// teacher's (same shape, plain values). For each row, distances to the
/// reference set are computed, optionally restricted to the teacher's top-k
/// nearest, sorted by the relaxed network at each side's steepness, and the
/// two relaxed permutations are compared with cross-entropy. Rows are summed.
pub fn neco_loss(
    tape: &mut Tape,
    f_s: Var,
    f_t: &Tensor,
    refs: &ReferenceSet,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape_s = tape.shape(f_s).to_vec();
    if shape_s.len() != 2 {
        return Err(Error::invalid("neco_loss", "student features must be N'×d"));
    }
    if shape_s != f_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "neco_loss",
            lhs: shape_s,
            rhs: f_t.shape().to_vec(),
        });
    }
    let (n_rows, d) = (shape_s[0], shape_s[1]);
    if refs.features.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "neco_loss",
            lhs: vec![n_rows, d],
            rhs: refs.features.shape().to_vec(),
        });
    }
    let r = refs.len();
    let sort_len = match cfg.top_k {
        Some(k) => {
            if k > r {
                return Err(Error::invalid(
                    "neco_loss",
                    format!("top_k {k} exceeds reference count {r}"),
                ));
            }
            k
        }
        None => r,
    };

    let refs_var = tape.constant(refs.features.clone())?;
    let teacher_var = tape.constant(f_t.clone())?;
    let d_s = distance_matrix(tape, f_s, refs_var, cfg.similarity)?;
    let d_t = distance_matrix(tape, teacher_var, refs_var, cfg.similarity)?;
    let d_t_val = tape.value(d_t).clone();

    let net = match cfg.network_kind {
        SortKind::OddEven => Some(build_network(NetworkKind::OddEven, sort_len)?),
        SortKind::Bitonic => Some(build_network(NetworkKind::Bitonic, sort_len)?),
        SortKind::None => None,
    };
    let fam_s = cfg.student_family()?;
    let fam_t = cfg.teacher_family()?;

    let mut terms = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let mut row_s = row_vector(tape, d_s, i, r)?;
        let mut row_t = row_vector(tape, d_t, i, r)?;
        if sort_len < r {
            let teacher_row = &d_t_val.data()[i * r..(i + 1) * r];
            let (idx, _) = restrict_top_k(teacher_row, sort_len)?;
            row_s = tape.gather_rows(row_s, &idx)?;
            row_t = tape.gather_rows(row_t, &idx)?;
        }
        let ce = match &net {
            Some(net) => {
                let qs = soft_sort(tape, row_s, net, &fam_s)?.perm;
                let qt = soft_sort(tape, row_t, net, &fam_t)?.perm;
                cross_entropy_perm(tape, qt, qs)?
            }
            None => {
                let ps = softmax_row(tape, row_s, cfg.steepness_student, sort_len)?;
                let pt = softmax_row(tape, row_t, cfg.steepness_teacher, sort_len)?;
                cross_entropy_perm(tape, pt, ps)?
            }
        };
        terms.push(ce);
    }
    tape.add_n(&terms)
}

/// Value-only evaluation of the loss on plain tensors.
pub fn neco_loss_value(
    f_s: &Tensor,
    f_t: &Tensor,
    refs: &ReferenceSet,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(f_s.clone())?;
    let loss = neco_loss(&mut tape, s, f_t, refs, cfg)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distances_hit_the_three_anchors() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![-1.0, 0.0]]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let d = cosine_distance_matrix(&mut tape, a, b).unwrap();
        let d = tape.value(d);
        assert!((d.at(0, 0) - 0.0).abs() < 1e-12);
        assert!((d.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((d.at(2, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let err = cosine_distance_matrix(&mut tape, a, b).unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
    }

    #[test]
    fn top_k_selection_matches_examples() {
        let (idx, vals) = restrict_top_k(&[0.9, 0.1, 0.5], 1).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(vals, vec![0.1]);

        let (idx, _) = restrict_top_k(&[0.3, 0.3, 0.8], 2).unwrap();
        assert_eq!(idx, vec![0, 1]);

        let (idx, _) = restrict_top_k(&[0.5, 0.2, 0.9], 3).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);

        assert!(restrict_top_k(&[0.5], 0).is_err());
        assert!(restrict_top_k(&[0.5], 2).is_err());
    }

    #[test]
    fn patch_selection_follows_attention_mass() {
        let n = 10;
        assert_eq!(
            select_patches(n, None, PatchPolicy::Both, 0.7).unwrap(),
            (0..10).collect::<Vec<_>>()
        );

        let mut one_hot = vec![0.0; n];
        one_hot[5] = 1.0;
        assert_eq!(
            select_patches(n, Some(&one_hot), PatchPolicy::Fg, 0.7).unwrap(),
            vec![5]
        );

        let uniform = vec![0.1; n];
        assert_eq!(
            select_patches(n, Some(&uniform), PatchPolicy::Fg, 0.7).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(
            select_patches(n, Some(&uniform), PatchPolicy::Bg, 0.7).unwrap(),
            vec![7, 8, 9]
        );

        assert!(select_patches(n, None, PatchPolicy::Fg, 0.7).is_err());
        assert!(select_patches(n, Some(&uniform), PatchPolicy::Fg, 0.0).is_err());
        assert!(select_patches(n, Some(&uniform), PatchPolicy::Fg, 1.5).is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = LossConfig::default();
        cfg.validate().unwrap();
        cfg.steepness_student = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::default();
        cfg.top_k = Some(0);
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::default();
        cfg.attention_mass = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = LossConfig::default();
        cfg.lambda = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reference_set_enforces_invariants() {
        let feats = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let refs =
            ReferenceSet::new(feats.clone(), vec![(0, 0), (0, 1)], ReferenceMode::Intra).unwrap();
        assert_eq!(refs.len(), 2);

        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(ReferenceSet::new(one, vec![(0, 0)], ReferenceMode::Intra).is_err());

        let zero_row = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err =
            ReferenceSet::new(zero_row, vec![(0, 0), (0, 1)], ReferenceMode::Inter).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }
}
