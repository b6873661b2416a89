//! Deterministic synthetic scenes: colored geometric shapes over a textured
//! background, with per-pixel class masks. Class identity shows up in local
//! appearance three ways at once (base color range, texture pattern, shape
//! outline), with the two warm classes overlapping in color so clustering
//! rewards texture-sensitive features rather than raw color alone.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{derive_seed, stage_rng};

pub const FORMAT_MAGIC: &str = "neco-synth-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn scene_tag(self) -> &'static str {
        match self {
            Split::Train => "scene-train",
            Split::Val => "scene-val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_scenes: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    pub master_seed: u64,
    pub max_shapes: usize,
}

impl DatasetManifest {
    pub fn new(split: Split, num_scenes: usize, master_seed: u64) -> Self {
        DatasetManifest {
            num_scenes,
            num_classes: 4,
            height: 64,
            width: 64,
            split,
            master_seed,
            max_shapes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("data", "empty dataset dimensions"));
        }
        if self.num_classes < 2 || self.num_classes > 4 {
            return Err(Error::invalid(
                "data",
                "supported class counts are 2..=4 (background plus shapes)",
            ));
        }
        Ok(())
    }

    /// Seed feeding scene `index`; split tags keep the streams disjoint.
    pub fn scene_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, self.split.scene_tag(), index as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    /// Row-major height x width class labels; 0 is background.
    pub mask: Vec<u8>,
    pub seed: u64,
}

fn quantize(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

struct Shape {
    class: u8,
    kind: u8,
    cx: f64,
    cy: f64,
    size: f64,
    aspect: f64,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            0 => dx * dx + dy * dy <= self.size * self.size,
            1 => dx.abs() <= self.size * self.aspect && dy.abs() <= self.size / self.aspect,
            _ => {
                // Upward isoceles triangle: apex at cy - size, base at cy + size.
                let s = self.size;
                dy >= -s && dy <= s && dx.abs() <= (dy + s) * 0.5
            }
        }
    }
}

/// Per-class base color ranges. Classes 1 and 3 share the warm range and
/// are told apart mainly by texture and outline.
fn class_color(class: u8, rng: &mut impl Rng) -> [f64; 3] {
    match class {
        1 => [
            rng.gen_range(0.60..0.90),
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.15..0.35),
        ],
        2 => [
            rng.gen_range(0.15..0.35),
            rng.gen_range(0.50..0.75),
            rng.gen_range(0.50..0.80),
        ],
        3 => [
            rng.gen_range(0.55..0.85),
            rng.gen_range(0.30..0.50),
            rng.gen_range(0.20..0.40),
        ],
        _ => [
            rng.gen_range(0.38..0.52),
            rng.gen_range(0.38..0.52),
            rng.gen_range(0.38..0.52),
        ],
    }
}

/// Signed texture modulation in [-1, 1] at pixel (x, y).
fn class_texture(class: u8, x: f64, y: f64, phase: f64) -> f64 {
    use std::f64::consts::TAU;
    match class {
        // Horizontal stripes, period 4 px.
        1 => (TAU * (y + phase) / 4.0).sin().signum(),
        // Checkerboard, cell 4 px.
        2 => {
            let cx = ((x + phase) / 4.0).floor() as i64;
            let cy = ((y + phase) / 4.0).floor() as i64;
            if (cx + cy) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        // Diagonal stripes, period 6 px.
        3 => (TAU * (x + y + phase) / 6.0).sin().signum(),
        _ => 0.0,
    }
}

/// Renders scene `index`: a textured background overlaid by one to
/// `max_shapes` shapes, later shapes occluding earlier ones. Pixel values
/// are quantized to 32-bit precision so disk round-trips are bitwise.
pub fn generate_scene(manifest: &DatasetManifest, index: usize) -> Result<SyntheticScene> {
    manifest.validate()?;
    if index >= manifest.num_scenes {
        return Err(Error::invalid(
            "data",
            format!("scene {index} outside dataset of {}", manifest.num_scenes),
        ));
    }
    let seed = manifest.scene_seed(index);
    let mut rng = stage_rng(seed, "render", 0);
    let (h, w) = (manifest.height, manifest.width);

    let bg_color = class_color(0, &mut rng);
    let bg_grad: [f64; 2] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let noise_amp = rng.gen_range(0.01..0.04);

    let shape_classes = (manifest.num_classes - 1) as u8;
    let count = if manifest.max_shapes == 0 {
        0
    } else {
        rng.gen_range(1..=manifest.max_shapes)
    };
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(1..=shape_classes);
        // Kind follows class so outline correlates with appearance.
        let kind = class - 1;
        shapes.push((
            Shape {
                class,
                kind,
                cx: rng.gen_range(8.0..w as f64 - 8.0),
                cy: rng.gen_range(8.0..h as f64 - 8.0),
                size: rng.gen_range(7.0..16.0),
                aspect: rng.gen_range(0.7..1.4),
            },
            class_color(class, &mut rng),
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.08..0.16),
        ));
    }
    let bg_phase: f64 = rng.gen_range(0.0..8.0);

    let mut image = Image::zeros(3, h, w);
    let mut mask = vec![0u8; h * w];
    let mut noise_rng = stage_rng(seed, "noise", 0);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let mut color = [0.0; 3];
            let mut label = 0u8;
            for (shape, shade, phase, amp) in shapes.iter() {
                if shape.covers(fx, fy) {
                    let t = class_texture(shape.class, fx, fy, *phase) * amp;
                    for (c, s) in color.iter_mut().zip(shade) {
                        *c = s + t;
                    }
                    label = shape.class;
                }
            }
            let pixel_noise: f64 = noise_rng.gen_range(-1.0..1.0) * noise_amp;
            if label == 0 {
                let g = bg_grad[0] * (fx / w as f64 - 0.5) + bg_grad[1] * (fy / h as f64 - 0.5);
                let t = class_texture(0, fx, fy, bg_phase);
                for (c, s) in color.iter_mut().zip(&bg_color) {
                    *c = s + g + t;
                }
            }
            for (ch, c) in color.iter().enumerate() {
                image.set(ch, y, x, quantize(c + pixel_noise));
            }
            mask[y * w + x] = label;
        }
    }
    Ok(SyntheticScene { image, mask, seed })
}

/// Majority pixel label per patch cell, ties resolved to the lower id.
/// The grid follows the floor rule; trailing pixels are ignored.
pub fn patch_labels(mask: &[u8], height: usize, width: usize, patch: usize) -> Result<Vec<u8>> {
    if mask.len() != height * width {
        return Err(Error::invalid(
            "data",
            format!("mask of {} pixels is not {height}x{width}", mask.len()),
        ));
    }
    if patch == 0 || height < patch || width < patch {
        return Err(Error::invalid("data", "patch larger than the mask"));
    }
    let (gr, gc) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(gr * gc);
    for gy in 0..gr {
        for gx in 0..gc {
            let mut counts = [0usize; 256];
            for py in 0..patch {
                for px in 0..patch {
                    counts[mask[(gy * patch + py) * width + gx * patch + px] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (label, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = label;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

fn split_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.bin", split.as_str()))
}

/// Generates every scene of the manifest and writes `<root>/<split>.bin`:
/// a JSON header line, then per scene the image as little-endian 32-bit
/// reals followed by the mask bytes.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    manifest.validate()?;
    fs::create_dir_all(root)?;
    let path = split_path(root, manifest.split);
    let file = fs::File::create(&path)?;
    let mut out = BufWriter::new(file);
    let header = serde_json::json!({ "magic": FORMAT_MAGIC, "manifest": manifest });
    let mut line = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    line.push('\n');
    out.write_all(line.as_bytes())?;
    for index in 0..manifest.num_scenes {
        let scene = generate_scene(manifest, index)?;
        let mut buf = Vec::with_capacity(scene.image.data().len() * 4);
        for &v in scene.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        out.write_all(&scene.mask)?;
    }
    out.flush()?;
    Ok(path)
}

/// Reads a split file back into scenes, verifying magic and sizes.
pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SyntheticScene>)> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("header parse: {e}")))?;
    if header.get("magic").and_then(|m| m.as_str()) != Some(FORMAT_MAGIC) {
        return Err(Error::Format("bad magic".into()));
    }
    let manifest: DatasetManifest = serde_json::from_value(
        header
            .get("manifest")
            .cloned()
            .ok_or_else(|| Error::Format("missing manifest".into()))?,
    )
    .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    manifest.validate()?;

    let pixels = 3 * manifest.height * manifest.width;
    let scene_bytes = pixels * 4 + manifest.height * manifest.width;
    let body = &bytes[newline + 1..];
    if body.len() != scene_bytes * manifest.num_scenes {
        return Err(Error::Format(format!(
            "body holds {} bytes, expected {} scenes of {scene_bytes}",
            body.len(),
            manifest.num_scenes
        )));
    }
    let mut scenes = Vec::with_capacity(manifest.num_scenes);
    for index in 0..manifest.num_scenes {
        let chunk = &body[index * scene_bytes..][..scene_bytes];
        let mut data = Vec::with_capacity(pixels);
        for i in 0..pixels {
            let raw: [u8; 4] = chunk[i * 4..i * 4 + 4].try_into().expect("4-byte slice");
            data.push(f32::from_le_bytes(raw) as f64);
        }
        let image = Image::new(3, manifest.height, manifest.width, data)?;
        let mask = chunk[pixels * 4..].to_vec();
        if mask.iter().any(|&l| l as usize >= manifest.num_classes) {
            return Err(Error::Format(format!("scene {index} has out-of-range labels")));
        }
        scenes.push(SyntheticScene {
            image,
            mask,
            seed: manifest.scene_seed(index),
        });
    }
    Ok((manifest, scenes))
}
