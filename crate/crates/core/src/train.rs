//! Self-distillation training loop: two-view batches, an EMA teacher,
//! the patch-neighborhood sorting loss, and Adam with cosine schedules.
//!
//! Every random draw in a step is derived from `(config.seed, step index)`,
//! so a resumed run continues bitwise identically and worker threads never
//! change results.

use std::fs::{self, File};
use std::io::{BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::read_dataset;
use crate::image::Image;
use crate::loss::{neco_loss, sample_references, LossConfig, RefSource, ReferenceSet};
use crate::model::{
    bind, encode, encode_graph, ema_update, momentum_schedule, patchify, project, project_graph,
    ModelConfig, ModelParams, ParamSet,
};
use crate::seed::{derive_seed, fingerprint, stage_rng};
use crate::tensor::{Tape, Tensor};
use crate::views::{intersection_boxes, roi_align, roi_align_tokens, sample_views, View, ViewConfig};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &str = "neco-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// References drawn per (image, student view) pair; this is the length
    /// of every sorted neighborhood.
    pub ref_count: usize,
    /// Side of the grid both feature streams are ROI-aligned to.
    pub aligned_grid: usize,
    /// Teacher momentum at step 0; the schedule anneals it to 1.
    pub ema_momentum: f64,
    /// When false the teacher is overwritten with the student after every
    /// step instead of tracking an exponential moving average.
    pub use_ema: bool,
    /// Epochs of patch mean-color regression that warm the encoder up
    /// before the main objective.
    pub warm_start_epochs: usize,
    pub model: ModelConfig,
    pub views: ViewConfig,
    /// Directory holding `train.bin` / `val.bin`.
    pub dataset_root: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    /// Line-delimited JSON step records get appended here when set.
    pub log_path: Option<PathBuf>,
    /// Continue from `checkpoint_path` instead of initializing fresh.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 16,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            ref_count: 16,
            aligned_grid: 7,
            ema_momentum: 0.9995,
            use_ema: true,
            warm_start_epochs: 3,
            model: ModelConfig::default(),
            views: ViewConfig::default(),
            dataset_root: PathBuf::from("data"),
            checkpoint_path: None,
            log_path: None,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch_size must be at least 1"));
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_head > 0.0) {
            return Err(Error::invalid("train", "learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("train", "weight_decay must be nonnegative"));
        }
        if self.ref_count < 2 {
            return Err(Error::invalid("train", "ref_count must be at least 2"));
        }
        if self.aligned_grid == 0 {
            return Err(Error::invalid("train", "aligned_grid must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid("train", "ema_momentum outside [0, 1]"));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.views.validate()?;
        Ok(())
    }

    /// Digest of every field that affects the trajectory. Storage paths and
    /// the resume flag are excluded so a moved working directory can still
    /// resume its own checkpoint.
    /// Copy with machine-local fields (paths, resume flag) reset to their
    /// defaults, so runs that differ only in where they read and write count
    /// as the same configuration.
    pub fn portable(&self) -> TrainConfig {
        TrainConfig {
            dataset_root: PathBuf::from("data"),
            checkpoint_path: None,
            log_path: None,
            resume: false,
            ..self.clone()
        }
    }

    pub fn digest(&self) -> Result<u64> {
        let value = serde_json::to_value(self.portable())
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        Ok(fingerprint(value.to_string().as_bytes()))
    }
}

/// lr₀ · (cos(π·step/total) + 1) / 2: full rate at step 0, half at the
/// midpoint, zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine_lr", "total must be positive"));
    }
    if step > total {
        return Err(Error::invalid(
            "cosine_lr",
            format!("step {step} past total {total}"),
        ));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr0 * (phase.cos() + 1.0) / 2.0)
}

/// First and second moment estimates for one parameter set, plus the shared
/// step counter the bias correction uses.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
    pub t: usize,
}

impl AdamMoments {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<(String, Tensor)> = params
            .iter()
            .map(|(name, value)| (name.to_string(), Tensor::zeros(value.shape())))
            .collect();
        AdamMoments {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Parameters
/// whose names start with `head.` form their own learning-rate group.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(String, Tensor)],
    moments: &mut AdamMoments,
    lr_backbone: f64,
    lr_head: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr_backbone >= 0.0) || !(lr_head >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::invalid("adam_step", "negative rate or decay"));
    }
    if grads.len() != params.len() || moments.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            "gradient or moment count does not match parameters",
        ));
    }
    moments.t += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(moments.t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(moments.t as i32);
    for (((name, theta), (gname, grad)), ((mname, m), (_, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        if name != gname || name != mname {
            return Err(Error::invalid(
                "adam_step",
                format!("parameter order mismatch at {name}"),
            ));
        }
        if theta.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: theta.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let lr = if name.starts_with("head.") {
            lr_head
        } else {
            lr_backbone
        };
        let theta_data = theta.data_mut();
        let m_data = m.data_mut();
        let v_data = v.data_mut();
        for i in 0..theta_data.len() {
            let g = grad.data()[i];
            m_data[i] = ADAM_BETA1 * m_data[i] + (1.0 - ADAM_BETA1) * g;
            v_data[i] = ADAM_BETA2 * v_data[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m_data[i] / bias1;
            let v_hat = v_data[i] / bias2;
            theta_data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * theta_data[i]);
        }
    }
    Ok(())
}

/// Everything that evolves over a run. `teacher` only ever changes through
/// `ema_update` (or a verbatim copy when EMA is off); gradients flow to the
/// student alone.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub moments: AdamMoments,
    pub step: usize,
    pub total_steps: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("train", "total_steps must be positive"));
        }
        let mut rng = stage_rng(config.seed, "init", 0);
        let student = ModelParams::init(config.model, &mut rng)?;
        let teacher = student.clone();
        let moments = AdamMoments::new(&student.set);
        Ok(TrainState {
            config,
            student,
            teacher,
            moments,
            step: 0,
            total_steps,
        })
    }
}

/// Seed all of step `step`'s draws derive from.
pub fn step_seed(config_seed: u64, step: usize) -> u64 {
    derive_seed(config_seed, "train-step", step as u64)
}

/// The sampled inputs of one step, before any gradient work: augmented view
/// pairs, the teacher's aligned target features per (image, student view)
/// pair, and the reference set each pair sorts against. Exposed so a step's
/// sampling can be reproduced exactly for inspection.
pub struct StepSampling {
    pub views: Vec<(View, View)>,
    /// Indexed `2·image + view`; rows are the teacher's projected features
    /// ROI-aligned to the pair's intersection.
    pub targets: Vec<Tensor>,
    pub references: Vec<ReferenceSet>,
}

fn teacher_grid(view: &View, patch: usize) -> (usize, usize) {
    (view.image.height() / patch, view.image.width() / patch)
}

/// Phases 1–3 of a step: sample views, run the teacher over view 1, align
/// targets, and draw references from the teacher's patch pool.
pub fn sample_step(state: &TrainState, batch: &[Image]) -> Result<StepSampling> {
    let cfg = &state.config;
    if batch.is_empty() {
        return Err(Error::invalid("train", "empty batch"));
    }
    let sseed = step_seed(cfg.seed, state.step);
    let patch = cfg.model.patch_size;

    let views: Vec<(View, View)> = batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = stage_rng(sseed, "views", i as u64);
            sample_views(img, &cfg.views, &mut rng)
        })
        .collect::<Result<_>>()?;

    // Teacher pass over view 1 of every image, through its own projection
    // head, without any tape.
    let teacher_feats: Vec<(Tensor, Vec<f64>)> = views
        .par_iter()
        .map(|(v1, _)| {
            let patches = patchify(&v1.image, patch)?;
            let grid = teacher_grid(v1, patch);
            let enc = encode(&state.teacher, &patches, grid)?;
            let proj = project(&state.teacher, &enc.tokens)?;
            Ok((proj, enc.attention))
        })
        .collect::<Result<_>>()?;

    let g = cfg.aligned_grid;
    let mut targets = Vec::with_capacity(batch.len() * 2);
    for (i, (v1, v2)) in views.iter().enumerate() {
        for sv in [v1, v2] {
            let (_, box_t) = intersection_boxes(&sv.crop, &v1.crop)?;
            let grid = teacher_grid(v1, patch);
            targets.push(roi_align_tokens(
                &teacher_feats[i].0,
                grid,
                box_t,
                g,
                v1.crop.flip,
            )?);
        }
    }

    let sources: Vec<RefSource> = teacher_feats
        .iter()
        .map(|(tokens, attention)| RefSource {
            tokens,
            attention: Some(attention.as_slice()),
        })
        .collect();
    let references: Vec<ReferenceSet> = (0..batch.len() * 2)
        .map(|p| {
            let mut rng = stage_rng(sseed, "refs", p as u64);
            sample_references(&sources, p / 2, &cfg.loss, cfg.ref_count, &mut rng)
        })
        .collect::<Result<_>>()?;

    Ok(StepSampling {
        views,
        targets,
        references,
    })
}

/// Loss value and parameter gradient of one (image, student view) pair.
fn pair_backward(
    state: &TrainState,
    sampling: &StepSampling,
    pair: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let cfg = &state.config;
    let patch = cfg.model.patch_size;
    let (v1, v2) = &sampling.views[pair / 2];
    let sv = if pair % 2 == 0 { v1 } else { v2 };
    let (box_s, _) = intersection_boxes(&sv.crop, &v1.crop)?;
    let grid = teacher_grid(sv, patch);
    let patches = patchify(&sv.image, patch)?;

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &state.student, true)?;
    let enc = encode_graph(&mut tape, &bound, &cfg.model, &patches, grid)?;
    let proj = project_graph(&mut tape, &bound, enc.tokens)?;
    let f_s = roi_align(&mut tape, proj, grid, box_s, cfg.aligned_grid, sv.crop.flip)?;
    let loss = neco_loss(
        &mut tape,
        f_s,
        &sampling.targets[pair],
        &sampling.references[pair],
        &cfg.loss,
    )?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let collected = bound
        .iter()
        .map(|(_, var)| match grads.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.shape(var)),
        })
        .collect();
    Ok((value, collected))
}

/// One optimization step over a batch: the seven phases are view sampling,
/// the no-gradient teacher pass, reference sampling, the student pass over
/// both views with ROI alignment, the summed sorting loss normalized by
/// (batch × views), one Adam update of the student, and the EMA teacher
/// update. Returns the normalized loss.
pub fn train_step(state: &mut TrainState, batch: &[Image]) -> Result<f64> {
    if state.step >= state.total_steps {
        return Err(Error::invalid(
            "train",
            format!("step {} past schedule end {}", state.step, state.total_steps),
        ));
    }
    let sampling = sample_step(state, batch)?;
    let n_pairs = batch.len() * 2;

    let results: Vec<(f64, Vec<Tensor>)> = (0..n_pairs)
        .into_par_iter()
        .map(|p| pair_backward(state, &sampling, p))
        .collect::<Result<_>>()?;

    // Ordered fold keeps the reduction independent of thread scheduling.
    let scale = 1.0 / n_pairs as f64;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = results[0]
        .1
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for (value, grads) in &results {
        total += value;
        for (slot, grad) in acc.iter_mut().zip(grads) {
            let slot_data = slot.data_mut();
            for (s, g) in slot_data.iter_mut().zip(grad.data()) {
                *s += scale * g;
            }
        }
    }
    total *= scale;
    if !total.is_finite() {
        return Err(Error::invalid(
            "train",
            format!(
                "non-finite loss {total} at step {} (batch of {})",
                state.step,
                batch.len()
            ),
        ));
    }

    let named: Vec<(String, Tensor)> = state
        .student
        .set
        .iter()
        .map(|(name, _)| name.to_string())
        .zip(acc)
        .collect();
    let lr_b = cosine_lr(state.step, state.total_steps, state.config.lr_backbone)?;
    let lr_h = cosine_lr(state.step, state.total_steps, state.config.lr_head)?;
    let wd = state.config.weight_decay;
    adam_step(&mut state.student.set, &named, &mut state.moments, lr_b, lr_h, wd)?;

    let m = momentum_schedule(state.step, state.total_steps, state.config.ema_momentum)?;
    if state.config.use_ema {
        ema_update(&mut state.teacher, &state.student, m)?;
    } else {
        state.teacher = state.student.clone();
    }
    state.step += 1;
    Ok(total)
}

/// Mean color of each patch row, channel by channel.
fn patch_mean_colors(patches: &Tensor, channels: usize) -> Tensor {
    let n = patches.rows();
    let area = patches.cols() / channels;
    let mut data = Vec::with_capacity(n * channels);
    for row in 0..n {
        for c in 0..channels {
            let sum: f64 = (0..area).map(|k| patches.at(row, c * area + k)).sum();
            data.push(sum / area as f64);
        }
    }
    Tensor::new(vec![n, channels], data).expect("shape matches data")
}

/// Warm-up objective: regress each patch's jittered mean color through the
/// encoder and a throwaway linear decoder. Leaves the teacher equal to the
/// warmed student.
pub fn warm_start(state: &mut TrainState, images: &[Image]) -> Result<()> {
    let cfg = state.config.clone();
    if cfg.warm_start_epochs == 0 {
        state.teacher = state.student.clone();
        return Ok(());
    }
    if images.is_empty() {
        return Err(Error::invalid("train", "empty warm-start dataset"));
    }
    let patch = cfg.model.patch_size;
    let channels = cfg.model.channels;
    let dim = cfg.model.dim;

    let mut decoder = ParamSet::new();
    {
        let mut rng = stage_rng(cfg.seed, "warm-decoder", 0);
        let w: Vec<f64> = (0..dim * channels)
            .map(|_| rand::Rng::gen_range(&mut rng, -0.02..0.02))
            .collect();
        decoder.push("warm.w", Tensor::new(vec![dim, channels], w)?)?;
        decoder.push("warm.b", Tensor::zeros(&[channels]))?;
    }
    let mut enc_moments = AdamMoments::new(&state.student.set);
    let mut dec_moments = AdamMoments::new(&decoder);
    let warm_lr = 1e-3;

    let mut warm_step = 0usize;
    for epoch in 0..cfg.warm_start_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stage_rng(cfg.seed, "warm-order", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let wseed = derive_seed(cfg.seed, "warm-step", warm_step as u64);
            let student = &state.student;
            let results: Vec<(Vec<Tensor>, Vec<Tensor>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| -> Result<_> {
                    let image = &images[idx];
                    let patches = patchify(image, patch)?;
                    let grid = (image.height() / patch, image.width() / patch);
                    let mut target = patch_mean_colors(&patches, channels);
                    let mut jitter = stage_rng(wseed, "jitter", slot as u64);
                    for v in target.data_mut() {
                        *v += rand::Rng::gen_range(&mut jitter, -0.05..0.05);
                    }
                    let mut tape = Tape::new();
                    let bound = bind(&mut tape, student, true)?;
                    let enc = encode_graph(&mut tape, &bound, &cfg.model, &patches, grid)?;
                    let w = tape.leaf(decoder.get("warm.w").unwrap().clone(), true)?;
                    let b = tape.leaf(decoder.get("warm.b").unwrap().clone(), true)?;
                    let pred = tape.matmul(enc.tokens, w)?;
                    let pred = tape.add_row_bias(pred, b)?;
                    let target = tape.constant(target)?;
                    let diff = tape.sub(pred, target)?;
                    let sq = tape.mul(diff, diff)?;
                    let loss = tape.mean(sq)?;
                    let grads = tape.backward(loss)?;
                    let enc_grads = bound
                        .iter()
                        .map(|(_, var)| match grads.get(var) {
                            Some(t) => t.clone(),
                            None => Tensor::zeros(tape.shape(var)),
                        })
                        .collect();
                    let dec_grads = [w, b]
                        .iter()
                        .map(|&var| match grads.get(var) {
                            Some(t) => t.clone(),
                            None => Tensor::zeros(tape.shape(var)),
                        })
                        .collect();
                    Ok((enc_grads, dec_grads))
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / chunk.len() as f64;
            let mut enc_acc: Vec<Tensor> = state
                .student
                .set
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            let mut dec_acc: Vec<Tensor> =
                decoder.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            for (enc_grads, dec_grads) in &results {
                for (slot, grad) in enc_acc.iter_mut().zip(enc_grads) {
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s += scale * g;
                    }
                }
                for (slot, grad) in dec_acc.iter_mut().zip(dec_grads) {
                    for (s, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *s += scale * g;
                    }
                }
            }
            let enc_named: Vec<(String, Tensor)> = state
                .student
                .set
                .iter()
                .map(|(name, _)| name.to_string())
                .zip(enc_acc)
                .collect();
            adam_step(&mut state.student.set, &enc_named, &mut enc_moments, warm_lr, warm_lr, 0.0)?;
            let dec_named: Vec<(String, Tensor)> = decoder
                .iter()
                .map(|(name, _)| name.to_string())
                .zip(dec_acc)
                .collect();
            adam_step(&mut decoder, &dec_named, &mut dec_moments, warm_lr, warm_lr, 0.0)?;
            warm_step += 1;
        }
    }
    state.teacher = state.student.clone();
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSection {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    config_hash: u64,
    /// Portable copy of the run configuration, so a checkpoint alone is
    /// enough to rebuild the model for evaluation.
    config: TrainConfig,
    step: usize,
    total_steps: usize,
    adam_t: usize,
    dtype: String,
    sections: Vec<CheckpointSection>,
}

fn push_sections(
    sections: &mut Vec<CheckpointSection>,
    blob: &mut Vec<f64>,
    prefix: &str,
    entries: impl Iterator<Item = (String, Tensor)>,
) {
    for (name, tensor) in entries {
        sections.push(CheckpointSection {
            name: format!("{prefix}{name}"),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
            len: tensor.data().len(),
        });
        blob.extend_from_slice(tensor.data());
    }
}

/// Writes a JSON manifest line naming every tensor section, followed by the
/// sections as little-endian 64-bit reals in manifest order. 64-bit blobs
/// keep reload-resume bitwise.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut sections = Vec::new();
    let mut blob = Vec::new();
    let own = |pairs: Vec<(&str, &Tensor)>| {
        pairs
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect::<Vec<_>>()
    };
    push_sections(&mut sections, &mut blob, "student.", own(state.student.set.iter().collect()).into_iter());
    push_sections(&mut sections, &mut blob, "teacher.", own(state.teacher.set.iter().collect()).into_iter());
    push_sections(&mut sections, &mut blob, "adam_m.", state.moments.m.iter().cloned());
    push_sections(&mut sections, &mut blob, "adam_v.", state.moments.v.iter().cloned());

    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.to_string(),
        config_hash: state.config.digest()?,
        config: state.config.portable(),
        step: state.step,
        total_steps: state.total_steps,
        adam_t: state.moments.t,
        dtype: "f64".to_string(),
        sections,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    // Stage then rename so an interrupted save never leaves a truncated file
    // at the checkpoint path.
    let staging = path.with_extension("ckpt.tmp");
    {
        let mut out = BufWriter::new(File::create(&staging)?);
        serde_json::to_writer(&mut out, &header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        out.write_all(b"\n")?;
        for v in &blob {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
    }
    fs::rename(&staging, path)?;
    Ok(())
}

fn read_section(
    blob: &[f64],
    section: &CheckpointSection,
    prefix: &str,
) -> Result<(String, Tensor)> {
    let name = section
        .name
        .strip_prefix(prefix)
        .ok_or_else(|| Error::Format(format!("section {} outside group {prefix}", section.name)))?;
    let end = section.offset + section.len;
    if end > blob.len() {
        return Err(Error::Format(format!(
            "section {} overruns checkpoint blob",
            section.name
        )));
    }
    let tensor = Tensor::new(section.shape.clone(), blob[section.offset..end].to_vec())?;
    Ok((name.to_string(), tensor))
}

fn read_checkpoint_file(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            header.magic
        )));
    }
    if header.dtype != "f64" {
        return Err(Error::Format(format!(
            "checkpoint dtype {:?} is not resumable",
            header.dtype
        )));
    }
    if header.config.digest()? != header.config_hash {
        return Err(Error::Format(
            "checkpoint config does not match its own hash".into(),
        ));
    }
    let body = &raw[newline + 1..];
    if body.len() % 8 != 0 {
        return Err(Error::Format("checkpoint blob is not 8-byte aligned".into()));
    }
    let blob: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    Ok((header, blob))
}

/// Restores a state saved by `save_checkpoint`. The stored config hash must
/// match `config`, so a checkpoint can never silently continue under
/// different hyperparameters.
pub fn load_checkpoint(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let (header, blob) = read_checkpoint_file(path)?;
    let expected = config.digest()?;
    if header.config_hash != expected {
        return Err(Error::invalid(
            "train",
            format!(
                "config hash mismatch: checkpoint {:#x}, current config {:#x}",
                header.config_hash, expected
            ),
        ));
    }
    assemble_state(config.clone(), header, &blob)
}

/// Restores a checkpoint using the configuration embedded in its header.
/// Machine-local fields (paths) come back at their defaults, so callers that
/// need data must point the result at a dataset themselves.
pub fn load_checkpoint_auto(path: &Path) -> Result<TrainState> {
    let (header, blob) = read_checkpoint_file(path)?;
    let config = header.config.clone();
    config.validate()?;
    assemble_state(config, header, &blob)
}

fn assemble_state(config: TrainConfig, header: CheckpointHeader, blob: &[f64]) -> Result<TrainState> {
    let mut student_set = ParamSet::new();
    let mut teacher_set = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for section in &header.sections {
        if section.name.starts_with("student.") {
            let (name, tensor) = read_section(&blob, section, "student.")?;
            student_set.push(&name, tensor)?;
        } else if section.name.starts_with("teacher.") {
            let (name, tensor) = read_section(&blob, section, "teacher.")?;
            teacher_set.push(&name, tensor)?;
        } else if section.name.starts_with("adam_m.") {
            m.push(read_section(&blob, section, "adam_m.")?);
        } else if section.name.starts_with("adam_v.") {
            v.push(read_section(&blob, section, "adam_v.")?);
        } else {
            return Err(Error::Format(format!(
                "unknown checkpoint section {}",
                section.name
            )));
        }
    }
    if student_set.len() != teacher_set.len()
        || student_set.len() != m.len()
        || student_set.len() != v.len()
    {
        return Err(Error::Format("checkpoint section groups disagree".into()));
    }
    Ok(TrainState {
        config: config.clone(),
        student: ModelParams {
            config: config.model,
            set: student_set,
        },
        teacher: ModelParams {
            config: config.model,
            set: teacher_set,
        },
        moments: AdamMoments {
            m,
            v,
            t: header.adam_t,
        },
        step: header.step,
        total_steps: header.total_steps,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Backbone group learning rate after the cosine schedule.
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f64>,
    pub steps_run: usize,
    pub records: Vec<StepRecord>,
}

/// Runs the epoch sweep on an already-initialized state: per-epoch
/// shuffling, JSONL logging (fresh logs get a `{"config": ...}` header
/// line), and a checkpoint at the end of every epoch. The state's step
/// budget must equal `epochs * ceil(images / batch_size)`.
pub fn train_loop(state: &mut TrainState, images: &[Image]) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::invalid("train", "train split is empty"));
    }
    let config = state.config.clone();
    let steps_per_epoch = images.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    if state.total_steps != total_steps {
        return Err(Error::invalid(
            "train",
            format!(
                "state schedule has {} steps, {} epochs over {} images need {total_steps}",
                state.total_steps,
                config.epochs,
                images.len()
            ),
        ));
    }

    let mut log = match &config.log_path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
            let fresh = file.metadata()?.len() == 0;
            let mut writer = BufWriter::new(file);
            if fresh {
                let header = serde_json::json!({ "config": &config });
                writeln!(writer, "{header}")?;
            }
            Some(writer)
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut epoch_sums: Vec<(f64, usize)> = vec![(0.0, 0); config.epochs];
    let start_step = state.step;
    while state.step < total_steps {
        let epoch = state.step / steps_per_epoch;
        let within = state.step % steps_per_epoch;
        let mut order: Vec<usize> = (0..images.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stage_rng(config.seed, "epoch-order", epoch as u64));
        let lo = within * config.batch_size;
        let hi = (lo + config.batch_size).min(images.len());
        let batch: Vec<Image> = order[lo..hi].iter().map(|&i| images[i].clone()).collect();

        let record = StepRecord {
            step: state.step,
            epoch,
            loss: 0.0,
            lr: cosine_lr(state.step, total_steps, config.lr_backbone)?,
            momentum: momentum_schedule(state.step, total_steps, config.ema_momentum)?,
        };
        let loss = train_step(state, &batch)?;
        let record = StepRecord { loss, ..record };
        if let Some(log) = log.as_mut() {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Format(format!("log record: {e}")))?;
            writeln!(log, "{line}")?;
        }
        epoch_sums[epoch].0 += loss;
        epoch_sums[epoch].1 += 1;
        records.push(record);

        let end_of_epoch = state.step % steps_per_epoch == 0;
        if end_of_epoch {
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(path, &state)?;
            }
            if let Some(log) = log.as_mut() {
                log.flush()?;
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }

    let epoch_mean_loss = epoch_sums
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(sum, n)| sum / *n as f64)
        .collect();
    Ok(TrainReport {
        epoch_mean_loss,
        steps_run: state.step - start_step,
        records,
    })
}

/// Full run: load the train split, resume from a checkpoint or warm-start a
/// fresh state, then sweep the two-view objective with `train_loop`.
pub fn train(config: &TrainConfig) -> Result<(TrainState, TrainReport)> {
    config.validate()?;
    let (_, scenes) = read_dataset(&config.dataset_root.join("train.bin"))?;
    if scenes.is_empty() {
        return Err(Error::invalid("train", "train split is empty"));
    }
    let images: Vec<Image> = scenes.into_iter().map(|s| s.image).collect();
    let steps_per_epoch = images.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;

    let mut state = if config.resume {
        let path = config.checkpoint_path.as_deref().ok_or_else(|| {
            Error::invalid("train", "resume requested without checkpoint_path")
        })?;
        let state = load_checkpoint(path, config)?;
        if state.total_steps != total_steps {
            return Err(Error::invalid(
                "train",
                format!(
                    "checkpoint schedule has {} steps, current run has {total_steps}",
                    state.total_steps
                ),
            ));
        }
        state
    } else {
        let mut fresh = TrainState::new(config.clone(), total_steps)?;
        warm_start(&mut fresh, &images)?;
        fresh
    };
    let report = train_loop(&mut state, &images)?;
    Ok((state, report))
}
