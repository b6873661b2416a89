//! Student/teacher patch encoder at desk scale.
//!
//! A small pre-norm vision transformer: linear patch embedding, a class
//! token, learned positional embeddings (bilinearly resized for off-base
//! grids), transformer blocks whose last block exposes CLS-to-patch
//! attention, a final layer norm, and a three-layer projection head used
//! only during training. Teacher copies track the student through
//! exponential-moving-average updates on a half-cosine momentum schedule.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Grid the stored positional embeddings are laid out for.
    pub base_grid: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            patch_size: 8,
            dim: 64,
            blocks: 2,
            heads: 4,
            mlp_hidden: 256,
            proj_hidden: 256,
            proj_out: 32,
            base_grid: (8, 8),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.patch_size == 0
            || self.dim == 0
            || self.blocks == 0
            || self.heads == 0
            || self.mlp_hidden == 0
            || self.proj_hidden == 0
            || self.base_grid.0 == 0
            || self.base_grid.1 == 0
        {
            return Err(Error::invalid("model", "config dimensions must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid("model", format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.proj_out < 2 {
            return Err(Error::invalid("model", "projection output width must be >= 2"));
        }
        Ok(())
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid("model", format!("duplicate parameter name {name}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Encoder plus projection head owned as one named set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
}

fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl ModelParams {
    /// Truncated-normal weights (std 0.02, clipped at two sigma), zero
    /// biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let std = 0.02;
        let mut set = ParamSet::new();
        let base_tokens = 1 + config.base_grid.0 * config.base_grid.1;
        set.push("patch_embed.w", trunc_normal(rng, &[config.patch_width(), d], std))?;
        set.push("patch_embed.b", Tensor::zeros(&[d]))?;
        set.push("cls_token", trunc_normal(rng, &[1, d], std))?;
        set.push("pos_embed", trunc_normal(rng, &[base_tokens, d], std))?;
        for b in 0..config.blocks {
            let p = |s: &str| format!("block{b}.{s}");
            set.push(&p("ln1.gamma"), Tensor::full(&[d], 1.0))?;
            set.push(&p("ln1.beta"), Tensor::zeros(&[d]))?;
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                set.push(&p(w), trunc_normal(rng, &[d, d], std))?;
            }
            for bias in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                set.push(&p(bias), Tensor::zeros(&[d]))?;
            }
            set.push(&p("ln2.gamma"), Tensor::full(&[d], 1.0))?;
            set.push(&p("ln2.beta"), Tensor::zeros(&[d]))?;
            set.push(&p("mlp.w1"), trunc_normal(rng, &[d, config.mlp_hidden], std))?;
            set.push(&p("mlp.b1"), Tensor::zeros(&[config.mlp_hidden]))?;
            set.push(&p("mlp.w2"), trunc_normal(rng, &[config.mlp_hidden, d], std))?;
            set.push(&p("mlp.b2"), Tensor::zeros(&[d]))?;
        }
        set.push("final_ln.gamma", Tensor::full(&[d], 1.0))?;
        set.push("final_ln.beta", Tensor::zeros(&[d]))?;
        set.push("head.w1", trunc_normal(rng, &[d, config.proj_hidden], std))?;
        set.push("head.b1", Tensor::zeros(&[config.proj_hidden]))?;
        set.push("head.w2", trunc_normal(rng, &[config.proj_hidden, config.proj_hidden], std))?;
        set.push("head.b2", Tensor::zeros(&[config.proj_hidden]))?;
        set.push("head.w3", trunc_normal(rng, &[config.proj_hidden, config.proj_out], std))?;
        set.push("head.b3", Tensor::zeros(&[config.proj_out]))?;
        Ok(ModelParams { config, set })
    }
}

/// Parameters registered on a tape, looked up by name during graph building.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid("model", format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Registers every parameter on `tape`, as gradient leaves when `trainable`
/// and as constants otherwise.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<BoundParams> {
    let mut vars = Vec::with_capacity(params.set.len());
    for (name, value) in params.set.iter() {
        let v = if trainable {
            tape.leaf(value.clone(), true)?
        } else {
            tape.constant(value.clone())?
        };
        vars.push((name.to_string(), v));
    }
    Ok(BoundParams { vars })
}

/// Spatial tokens with the attention the class token paid to each of them.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub tokens: Tensor,
    pub attention: Vec<f64>,
    pub grid_shape: (usize, usize),
}

impl FeatureGrid {
    pub fn new(tokens: Tensor, attention: Vec<f64>, grid_shape: (usize, usize)) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::invalid("model", "feature tokens must be a matrix"));
        }
        let n = grid_shape.0 * grid_shape.1;
        if tokens.rows() != n {
            return Err(Error::invalid("model", format!(
                "grid {}x{} does not cover {} tokens",
                grid_shape.0,
                grid_shape.1,
                tokens.rows()
            )));
        }
        if attention.len() != n {
            return Err(Error::invalid("model", format!(
                "attention length {} for {} tokens",
                attention.len(),
                n
            )));
        }
        let sum: f64 = attention.iter().sum();
        if attention.iter().any(|a| !a.is_finite() || *a < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("model", format!(
                "attention must be a distribution, sums to {sum}"
            )));
        }
        Ok(FeatureGrid {
            tokens,
            attention,
            grid_shape,
        })
    }
}

/// Cuts an image into a row-major sequence of flattened patches; trailing
/// pixels that do not fill a whole patch are dropped. Patch rows are laid
/// out channel-major, then pixel row, then pixel column.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims();
    if patch == 0 || h < patch || w < patch {
        return Err(Error::invalid(
            "model",
            format!("image {h}x{w} cannot host {patch}-pixel patches"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let width = c * patch * patch;
    let mut out = vec![0.0; gr * gc * width];
    for gy in 0..gr {
        for gx in 0..gc {
            let row = &mut out[(gy * gc + gx) * width..][..width];
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[ch * patch * patch + py * patch + px] =
                            image.at(ch, gy * patch + py, gx * patch + px);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, width], out)
}

/// Bilinear interpolation matrix taking base-grid positional rows (class
/// row first) to a target grid. Row 0 passes the class position through.
fn pos_resize_matrix(base: (usize, usize), target: (usize, usize)) -> Tensor {
    let (br, bc) = base;
    let (tr, tc) = target;
    let src_n = 1 + br * bc;
    let dst_n = 1 + tr * tc;
    let mut m = Tensor::zeros(&[dst_n, src_n]);
    m.data_mut()[0] = 1.0;
    for ty in 0..tr {
        let sy = ((ty as f64 + 0.5) * br as f64 / tr as f64 - 0.5).clamp(0.0, (br - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(br - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tc {
            let sx =
                ((tx as f64 + 0.5) * bc as f64 / tc as f64 - 0.5).clamp(0.0, (bc - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(bc - 1);
            let fx = sx - x0 as f64;
            let row = 1 + ty * tc + tx;
            let mut add = |y: usize, x: usize, wgt: f64| {
                let col = 1 + y * bc + x;
                let idx = row * src_n + col;
                m.data_mut()[idx] += wgt;
            };
            add(y0, x0, (1.0 - fy) * (1.0 - fx));
            add(y0, x1, (1.0 - fy) * fx);
            add(y1, x0, fy * (1.0 - fx));
            add(y1, x1, fy * fx);
        }
    }
    m
}

/// Differentiable encoder output: spatial tokens still on the tape, plus
/// the detached class-attention distribution over them.
pub struct EncodedView {
    pub tokens: Var,
    pub attention: Vec<f64>,
    pub grid_shape: (usize, usize),
}

/// Runs the encoder over one patch sequence. `grid` gives the patch grid
/// the rows of `patches` were cut from; positional embeddings are resized
/// to it when it differs from the stored base grid.
pub fn encode_graph(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    patches: &Tensor,
    grid: (usize, usize),
) -> Result<EncodedView> {
    config.validate()?;
    let n = grid.0 * grid.1;
    if patches.rank() != 2 || patches.rows() != n {
        return Err(Error::invalid("model", format!(
            "patch rows {} do not tile a {}x{} grid",
            patches.rows(),
            grid.0,
            grid.1
        )));
    }
    if patches.cols() != config.patch_width() {
        return Err(Error::invalid("model", format!(
            "patch width {} does not match embedding input {}",
            patches.cols(),
            config.patch_width()
        )));
    }
    let p = tape.constant(patches.clone())?;
    let embedded = tape.matmul(p, bound.var("patch_embed.w")?)?;
    let embedded = tape.add_row_bias(embedded, bound.var("patch_embed.b")?)?;
    let mut x = tape.concat_rows(&[bound.var("cls_token")?, embedded])?;

    let pos = bound.var("pos_embed")?;
    let pos = if grid == config.base_grid {
        pos
    } else {
        let m = tape.constant(pos_resize_matrix(config.base_grid, grid))?;
        tape.matmul(m, pos)?
    };
    x = tape.add(x, pos)?;

    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut last_attn: Vec<Var> = Vec::new();
    for b in 0..config.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let normed = tape.layer_norm_rows(
            x,
            bound.var(&p("ln1.gamma"))?,
            bound.var(&p("ln1.beta"))?,
            1e-6,
        )?;
        let q = tape.matmul(normed, bound.var(&p("attn.wq"))?)?;
        let q = tape.add_row_bias(q, bound.var(&p("attn.bq"))?)?;
        let k = tape.matmul(normed, bound.var(&p("attn.wk"))?)?;
        let k = tape.add_row_bias(k, bound.var(&p("attn.bk"))?)?;
        let v = tape.matmul(normed, bound.var(&p("attn.wv"))?)?;
        let v = tape.add_row_bias(v, bound.var(&p("attn.bv"))?)?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut attn_vars = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            attn_vars.push(weights);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let merged = tape.matmul(merged, bound.var(&p("attn.wo"))?)?;
        let merged = tape.add_row_bias(merged, bound.var(&p("attn.bo"))?)?;
        x = tape.add(x, merged)?;

        let normed = tape.layer_norm_rows(
            x,
            bound.var(&p("ln2.gamma"))?,
            bound.var(&p("ln2.beta"))?,
            1e-6,
        )?;
        let hidden = tape.matmul(normed, bound.var(&p("mlp.w1"))?)?;
        let hidden = tape.add_row_bias(hidden, bound.var(&p("mlp.b1"))?)?;
        let hidden = tape.gelu(hidden)?;
        let out = tape.matmul(hidden, bound.var(&p("mlp.w2"))?)?;
        let out = tape.add_row_bias(out, bound.var(&p("mlp.b2"))?)?;
        x = tape.add(x, out)?;
        if b + 1 == config.blocks {
            last_attn = attn_vars;
        }
    }
    x = tape.layer_norm_rows(
        x,
        bound.var("final_ln.gamma")?,
        bound.var("final_ln.beta")?,
        1e-6,
    )?;
    let spatial: Vec<usize> = (1..=n).collect();
    let tokens = tape.gather_rows(x, &spatial)?;

    // Class-query attention over patches, averaged across heads and
    // renormalized after dropping the class column.
    let mut attention = vec![0.0; n];
    for weights in &last_attn {
        let w = tape.value(*weights);
        for (j, slot) in attention.iter_mut().enumerate() {
            *slot += w.at(0, j + 1);
        }
    }
    let total: f64 = attention.iter().sum();
    for a in attention.iter_mut() {
        *a /= total;
    }
    Ok(EncodedView {
        tokens,
        attention,
        grid_shape: grid,
    })
}

/// Encoder forward pass without gradients.
pub fn encode(params: &ModelParams, patches: &Tensor, grid: (usize, usize)) -> Result<FeatureGrid> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let view = encode_graph(&mut tape, &bound, &params.config, patches, grid)?;
    FeatureGrid::new(
        tape.value(view.tokens).clone(),
        view.attention,
        view.grid_shape,
    )
}

/// Three linear layers with a nonlinearity between consecutive ones.
pub fn project_graph(tape: &mut Tape, bound: &BoundParams, tokens: Var) -> Result<Var> {
    let h = tape.matmul(tokens, bound.var("head.w1")?)?;
    let h = tape.add_row_bias(h, bound.var("head.b1")?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bound.var("head.w2")?)?;
    let h = tape.add_row_bias(h, bound.var("head.b2")?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bound.var("head.w3")?)?;
    tape.add_row_bias(h, bound.var("head.b3")?)
}

/// Projection head forward pass without gradients.
pub fn project(params: &ModelParams, tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let t = tape.constant(tokens.clone())?;
    let out = project_graph(&mut tape, &bound, t)?;
    Ok(tape.value(out).clone())
}

/// Moves every teacher parameter toward the student:
/// theta_t <- m * theta_t + (1 - m) * theta_s.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("model", format!("momentum {m} outside [0, 1]")));
    }
    if teacher.set.len() != student.set.len() {
        return Err(Error::invalid("model", "parameter sets differ in size"));
    }
    for ((tn, tv), (sn, sv)) in teacher.set.iter_mut().zip(student.set.iter()) {
        if tn != sn || tv.shape() != sv.shape() {
            return Err(Error::invalid("model", format!(
                "parameter mismatch between {tn} and {sn}"
            )));
        }
        for (t, s) in tv.data_mut().iter_mut().zip(sv.data()) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Half-cosine momentum ramp from `m0` at step 0 to 1 at step `total`.
pub fn momentum_schedule(step: usize, total: usize, m0: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::invalid("model", format!(
            "step {step} outside schedule of {total}"
        )));
    }
    if !(0.0..=1.0).contains(&m0) {
        return Err(Error::invalid("model", format!("base momentum {m0} outside [0, 1]")));
    }
    let phase = PI * step as f64 / total as f64;
    Ok(1.0 - (1.0 - m0) * (phase.cos() + 1.0) / 2.0)
}
