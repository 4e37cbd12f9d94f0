//! Synthetic video: textured background with rigid colored rectangles at
//! constant integer velocity. Every frame carries exact labels and every
//! frame pair carries exact flow.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::imagery::{
    write_flow, write_image, write_labels, write_manifest, DatasetManifest, FlowField, Frame,
    LabelMap, ManifestEntry, Palette, Tier,
};
use crate::par::Exec;

const BASE_COLORS: [[u8; 3]; 8] = [
    [96, 112, 88],
    [200, 56, 48],
    [48, 88, 200],
    [216, 200, 64],
    [160, 64, 184],
    [56, 180, 176],
    [232, 136, 40],
    [120, 200, 80],
];

/// Base color of a synthetic class; class 0 is the background.
pub fn class_color(class: usize) -> [u8; 3] {
    match BASE_COLORS.get(class) {
        Some(&c) => c,
        None => {
            let c = class as u32;
            [
                ((c * 67 + 13) % 256) as u8,
                ((c * 151 + 40) % 256) as u8,
                ((c * 211 + 90) % 256) as u8,
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Including the background class 0.
    pub num_classes: usize,
    pub num_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Per-axis velocity bound in pixels per frame.
    pub max_speed: u32,
    /// Standard deviation of the static texture, in 8-bit units.
    pub noise_sigma: f64,
    /// Per-frame brightness change as a fraction of full scale; the sign is
    /// drawn per sequence.
    pub brightness_drift: f64,
    pub num_frames: usize,
    pub num_sequences: usize,
    pub val_sequences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            num_classes: 4,
            num_objects: 3,
            min_object_size: 8,
            max_object_size: 14,
            max_speed: 2,
            noise_sigma: 8.0,
            brightness_drift: 0.02,
            num_frames: 6,
            num_sequences: 20,
            val_sequences: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A fast configuration for tests.
    pub fn small() -> Self {
        Self {
            width: 32,
            height: 32,
            min_object_size: 6,
            max_object_size: 10,
            num_sequences: 4,
            val_sequences: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSynthConfig(m));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return bad("width, height and num_frames must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside 1..=255", self.num_classes));
        }
        if self.num_objects > 0 && self.num_classes < 2 {
            return bad("objects need at least one non-background class".into());
        }
        if self.min_object_size == 0 || self.min_object_size > self.max_object_size {
            return bad(format!(
                "object size range [{}, {}] is empty",
                self.min_object_size, self.max_object_size
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.brightness_drift.is_finite() && self.brightness_drift >= 0.0) {
            return bad(format!("brightness_drift {} must be finite and >= 0", self.brightness_drift));
        }
        let travel = self.max_speed as usize * (self.num_frames - 1);
        if self.num_objects > 0 && travel + self.max_object_size > self.width.min(self.height) {
            return bad(format!(
                "objects of size {} moving up to {} px would leave a {}x{} frame",
                self.max_object_size, travel, self.width, self.height
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub frames: Vec<Frame>,
    pub labels: Vec<LabelMap>,
    /// `flows[t]` carries frame `t` to frame `t + 1`.
    pub flows: Vec<FlowField>,
}

struct Object {
    class: u8,
    w: usize,
    h: usize,
    x: i64,
    y: i64,
    vx: i64,
    vy: i64,
    texture: Vec<[f64; 3]>,
}

fn texture(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<[f64; 3]> {
    match Normal::new(0.0, sigma) {
        Ok(d) if sigma > 0.0 => (0..n).map(|_| [d.sample(rng), d.sample(rng), d.sample(rng)]).collect(),
        _ => vec![[0.0; 3]; n],
    }
}

/// Renders sequence `index` of the corpus described by `cfg`.
pub fn render_sequence(cfg: &SynthConfig, index: u64) -> Result<SynthSequence, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h, t_max) = (cfg.width, cfg.height, cfg.num_frames);
    let background = texture(&mut rng, w * h, cfg.noise_sigma);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let travel = (t_max - 1) as i64;
    let s = cfg.max_speed as i64;

    let objects: Vec<Object> = (0..cfg.num_objects)
        .map(|_| {
            let class = rng.random_range(1..cfg.num_classes) as u8;
            let ow = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
            let oh = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
            let vx = rng.random_range(-s..=s);
            let vy = rng.random_range(-s..=s);
            let place = |rng: &mut ChaCha8Rng, size: usize, extent: usize, v: i64| {
                let lo = (-v * travel).max(0);
                let hi = extent as i64 - size as i64 - (v * travel).max(0);
                rng.random_range(lo..=hi)
            };
            let x = place(&mut rng, ow, w, vx);
            let y = place(&mut rng, oh, h, vy);
            let texture = texture(&mut rng, ow * oh, cfg.noise_sigma);
            Object { class, w: ow, h: oh, x, y, vx, vy, texture }
        })
        .collect();

    let mut frames = Vec::with_capacity(t_max);
    let mut labels = Vec::with_capacity(t_max);
    let mut flows = Vec::with_capacity(t_max.saturating_sub(1));
    for t in 0..t_max {
        let offset = sign * cfg.brightness_drift * 255.0 * t as f64;
        let base = class_color(0);
        let mut color: Vec<[f64; 3]> = background
            .iter()
            .map(|n| [0, 1, 2].map(|k| base[k] as f64 + n[k]))
            .collect();
        let mut lab = vec![0u8; w * h];
        let mut vel = vec![[0f32; 2]; w * h];
        for o in &objects {
            let (ox, oy) = ((o.x + o.vx * t as i64) as usize, (o.y + o.vy * t as i64) as usize);
            let c = class_color(o.class as usize);
            for yy in 0..o.h {
                for xx in 0..o.w {
                    let i = (oy + yy) * w + ox + xx;
                    let n = o.texture[yy * o.w + xx];
                    color[i] = [0, 1, 2].map(|k| c[k] as f64 + n[k]);
                    lab[i] = o.class;
                    vel[i] = [o.vx as f32, o.vy as f32];
                }
            }
        }
        let data = color
            .iter()
            .flat_map(|px| px.map(|v| (v + offset).round().clamp(0.0, 255.0) as u8))
            .collect();
        frames.push(Frame::new(w, h, data)?);
        labels.push(LabelMap::new(w, h, lab, cfg.num_classes)?);
        if t + 1 < t_max {
            flows.push(FlowField::new(w, h, vel)?);
        }
    }
    Ok(SynthSequence { frames, labels, flows })
}

/// What [`synth_corpus`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub root: PathBuf,
    pub sequences: Vec<String>,
    pub val_sequences: Vec<String>,
    /// `manifest.csv`: one GT row per training sequence (frame 0).
    pub manifest: PathBuf,
    /// `val.csv`: every frame of every validation sequence.
    pub val_manifest: PathBuf,
    pub palette: PathBuf,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:02}.png")
}

pub fn labels_name(t: usize) -> String {
    format!("labels_{t:02}.png")
}

pub fn flow_name(t: usize) -> String {
    format!("flow_{t:02}.flo")
}

fn write_sequence(dir: &Path, seq: &SynthSequence) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    for (t, (f, l)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        write_image(&dir.join(frame_name(t)), f)?;
        write_labels(&dir.join(labels_name(t)), l)?;
    }
    for (t, fl) in seq.flows.iter().enumerate() {
        write_flow(&dir.join(flow_name(t)), fl)?;
    }
    Ok(())
}

fn gt_row(seq: &str, id: String, t: usize) -> ManifestEntry {
    ManifestEntry {
        image: PathBuf::from(seq).join(frame_name(t)),
        labels: PathBuf::from(seq).join(labels_name(t)),
        tier: Tier::Gt,
        seq: id,
        offset: 0,
        rating: None,
        trust: None,
    }
}

/// Writes `<root>/<seq>/{frame,labels}_NN.png` and `flow_NN.flo` for
/// `num_sequences` training and `val_sequences` validation sequences, plus
/// `manifest.csv`, `val.csv` and `palette.csv`.
pub fn synth_corpus(cfg: &SynthConfig, root: &Path, exec: Exec) -> Result<SynthCorpus, DatasetError> {
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    let train: Vec<String> = (0..cfg.num_sequences).map(|i| format!("seq{i:03}")).collect();
    let val: Vec<String> = (0..cfg.val_sequences).map(|i| format!("val{i:03}")).collect();
    let jobs: Vec<(u64, &String)> = train
        .iter()
        .chain(&val)
        .enumerate()
        .map(|(i, s)| (i as u64, s))
        .collect();
    exec.map_slice(&jobs, |&(i, name)| {
        let seq = render_sequence(cfg, i)?;
        write_sequence(&root.join(name), &seq)
    })
    .into_iter()
    .collect::<Result<Vec<()>, _>>()?;

    let manifest = root.join("manifest.csv");
    let rows = train.iter().map(|s| gt_row(s, s.clone(), 0)).collect();
    write_manifest(&manifest, &DatasetManifest::new(rows)?, false)?;

    let val_manifest = root.join("val.csv");
    let rows = val
        .iter()
        .flat_map(|s| (0..cfg.num_frames).map(move |t| gt_row(s, format!("{s}@{t}"), t)))
        .collect();
    write_manifest(&val_manifest, &DatasetManifest::new(rows)?, false)?;

    let palette = root.join("palette.csv");
    Palette::synthetic(cfg.num_classes).save(&palette)?;

    Ok(SynthCorpus {
        root: root.to_path_buf(),
        sequences: train,
        val_sequences: val,
        manifest,
        val_manifest,
        palette,
    })
}
