//! Procedural video domain-generalization benchmark.
//!
//! Each category is an ordered sequence of sub-actions (short motion programs
//! of a bar-with-knob sprite). Every category owns signature sub-actions that
//! no other category uses, and shares filler sub-actions with others. A
//! domain changes appearance (palette, background texture, sprite scale and
//! offset) and timing (filler dropout, slot reordering, per-slot duration
//! scaling) while keeping every signature sub-action present.

pub mod augment;
pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApnError, Result};
use crate::pyramid::VideoClip;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{DType, Tensor};

/// A motion program over normalised time `u ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubAction {
    pub id: usize,
    /// Start centre in frame-relative units (`0..1`).
    pub start: (f64, f64),
    /// Displacement over the sub-action, frame-relative.
    pub travel: (f64, f64),
    pub angle: f64,
    /// Rotation over the sub-action, radians.
    pub spin: f64,
    /// Length multiplier at `u = 0` and `u = 1`.
    pub size: (f64, f64),
}

impl SubAction {
    /// `(cx, cy, angle, size)` at normalised time `u`, frame-relative.
    pub fn pose(&self, u: f64) -> (f64, f64, f64, f64) {
        (
            self.start.0 + self.travel.0 * u,
            self.start.1 + self.travel.1 * u,
            self.angle + self.spin * u,
            self.size.0 + (self.size.1 - self.size.0) * u,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    /// Source-order sub-action ids; one entry per slot.
    pub sequence: Vec<usize>,
    pub signatures: Vec<usize>,
    pub fillers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [f64; 3],
    pub sprite: [f64; 3],
    /// Amplitude of the sinusoidal background texture.
    pub texture_amp: f64,
    /// Spatial frequency of the texture, cycles per frame.
    pub texture_freq: f64,
    pub texture_angle: f64,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub palette: Palette,
    pub sprite_scale: f64,
    /// Frame-relative sprite offset.
    pub offset: (f64, f64),
    /// Probability of dropping each filler slot.
    pub filler_dropout: f64,
    /// `order[i]` is the source slot shown at position `i`.
    pub order: Vec<usize>,
    /// Relative duration of each source slot.
    pub duration_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub source_domain: usize,
    pub clips_per_pair: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub num_fillers: usize,
    /// Minimum frames any rendered sub-action occupies.
    pub min_subaction_frames: usize,
    /// Per-clip jitter of sub-action positions, frame-relative.
    pub position_jitter: f64,
    pub angle_jitter: f64,
    /// Interpolation from the source appearance (0) to each target preset
    /// (1): palette, texture, noise, sprite scale and offset.
    pub appearance_shift: f64,
    /// Scales target filler dropout and duration distortion; slot
    /// reordering applies whenever this is positive.
    pub temporal_shift: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            num_classes: 6,
            num_domains: 3,
            source_domain: 0,
            clips_per_pair: 120,
            frames: 12,
            height: 24,
            width: 24,
            channels: 3,
            seed: 2021,
            train_fraction: 0.7,
            val_fraction: 0.3,
            num_fillers: 3,
            min_subaction_frames: 2,
            position_jitter: 0.06,
            angle_jitter: 0.25,
            appearance_shift: 1.0,
            temporal_shift: 1.0,
        }
    }
}

/// Generator bookkeeping for one rendered clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: usize,
    /// Sub-action ids in display order.
    pub realized: Vec<usize>,
    /// Frames given to each realized sub-action.
    pub durations: Vec<usize>,
}

/// A generated benchmark: source training/validation splits and one whole
/// set per target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub source_train: Vec<VideoClip>,
    pub source_val: Vec<VideoClip>,
    /// `(domain id, clips)` for every non-source domain.
    pub targets: Vec<(usize, Vec<VideoClip>)>,
    pub meta: Vec<ClipMeta>,
}

impl Benchmark {
    pub fn target(&self, domain: usize) -> Option<&[VideoClip]> {
        self.targets.iter().find(|(d, _)| *d == domain).map(|(_, c)| c.as_slice())
    }

    pub fn all_clips(&self) -> impl Iterator<Item = &VideoClip> {
        self.source_train.iter().chain(&self.source_val).chain(self.targets.iter().flat_map(|(_, c)| c))
    }
}

const BASE_PALETTES: [([f64; 3], [f64; 3]); 4] = [
    ([0.12, 0.16, 0.32], [0.95, 0.85, 0.30]),
    ([0.30, 0.42, 0.18], [0.92, 0.40, 0.45]),
    ([0.52, 0.40, 0.34], [0.35, 0.90, 0.95]),
    ([0.40, 0.20, 0.40], [0.80, 0.95, 0.60]),
];

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ApnError::Config(m));
        if self.num_classes < 2 || self.num_domains < 2 {
            return err("need at least 2 categories and 2 domains".into());
        }
        if self.source_domain >= self.num_domains {
            return err(format!("source domain {} out of range", self.source_domain));
        }
        if self.num_fillers < 2 {
            return err("need at least 2 filler sub-actions".into());
        }
        if self.clips_per_pair == 0 || self.frames == 0 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return err("clip counts and frame dims must be positive".into());
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.frames > u16::MAX as usize {
            return err("frame dims must fit in u16".into());
        }
        if !(0.0..=1.0).contains(&self.appearance_shift) || !(0.0..=1.0).contains(&self.temporal_shift) {
            return err("appearance_shift and temporal_shift must lie in [0, 1]".into());
        }
        if (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9 || self.train_fraction <= 0.0 {
            return err(format!(
                "split fractions {} + {} must sum to 1",
                self.train_fraction, self.val_fraction
            ));
        }
        Ok(())
    }

    pub fn vocabulary_size(&self) -> usize {
        2 * self.num_classes + self.num_fillers
    }

    /// Sub-action vocabulary: two signatures per category followed by the
    /// shared fillers. Parameters are drawn from the master seed.
    pub fn subactions(&self) -> Vec<SubAction> {
        let mut rng = rng_from_seed(derive_seed(self.seed, &[0x5AB]));
        let n_sig = 2 * self.num_classes;
        let mut out = Vec::with_capacity(self.vocabulary_size());
        for id in 0..n_sig {
            // Spread signature orientations evenly so single frames are
            // distinguishable, then randomise the motion around them.
            let angle = std::f64::consts::PI * 2.0 * id as f64 / n_sig as f64;
            let start = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.1..0.2);
            out.push(SubAction {
                id,
                start,
                travel: (dist * dir.cos(), dist * dir.sin()),
                angle,
                spin: rng.random_range(-0.6..0.6),
                size: (rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)),
            });
        }
        for f in 0..self.num_fillers {
            // Fillers: sweeping motions with fast spin, so no fixed pose.
            let y = 0.3 + 0.4 * f as f64 / (self.num_fillers - 1).max(1) as f64;
            out.push(SubAction {
                id: n_sig + f,
                start: (0.25, y),
                travel: (0.5, 0.0),
                angle: 0.0,
                spin: std::f64::consts::TAU * (1.0 + f as f64 * 0.5),
                size: (0.7, 0.7),
            });
        }
        out
    }

    pub fn categories(&self) -> Vec<CategorySpec> {
        let n_sig = 2 * self.num_classes;
        (0..self.num_classes)
            .map(|c| {
                let (a, b) = (2 * c, 2 * c + 1);
                let filler = n_sig + c % self.num_fillers;
                CategorySpec { id: c, sequence: vec![a, filler, b], signatures: vec![a, b], fillers: vec![filler] }
            })
            .collect()
    }

    pub fn domains(&self) -> Vec<DomainSpec> {
        let orders = [[0, 1, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]];
        let durations = [[1.0, 1.0, 1.0], [1.6, 0.6, 0.8], [0.7, 0.9, 1.6], [1.2, 1.2, 0.6]];
        let textures = [(0.0, 0.0, 0.0, 0.01), (0.10, 3.0, 0.7, 0.03), (0.14, 5.0, -0.4, 0.03), (0.12, 2.0, 1.5, 0.04)];
        let scales = [1.0, 0.85, 1.15, 0.95];
        let offsets = [(0.0, 0.0), (0.06, -0.04), (-0.05, 0.06), (0.04, 0.05)];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let lerp3 = |a: [f64; 3], b: [f64; 3], t: f64| [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)];
        (0..self.num_domains)
            .map(|d| {
                // Source domain takes preset 0; targets cycle the rest.
                let rel = (d + self.num_domains - self.source_domain) % self.num_domains;
                let p = if rel == 0 { 0 } else { 1 + (rel - 1) % 3 };
                let (a, t) = if rel == 0 { (0.0, 0.0) } else { (self.appearance_shift, self.temporal_shift) };
                let (bg, sp) = BASE_PALETTES[p];
                let (src_bg, src_sp) = BASE_PALETTES[0];
                let (amp, freq, ang, noise) = textures[p];
                DomainSpec {
                    id: d,
                    palette: Palette {
                        background: lerp3(src_bg, bg, a),
                        sprite: lerp3(src_sp, sp, a),
                        texture_amp: amp * a,
                        texture_freq: freq,
                        texture_angle: ang,
                        noise: lerp(textures[0].3, noise, a),
                    },
                    sprite_scale: lerp(1.0, scales[p], a),
                    offset: (offsets[p].0 * a, offsets[p].1 * a),
                    filler_dropout: 0.5 * t,
                    order: if t > 0.0 { orders[p].to_vec() } else { orders[0].to_vec() },
                    duration_scale: durations[p].iter().map(|&w| lerp(1.0, w, t)).collect(),
                }
            })
            .collect()
    }

    fn clips_index(&self, domain: usize, category: usize, i: usize) -> usize {
        (domain * self.num_classes + category) * self.clips_per_pair + i
    }
}

/// Display-order sub-actions and frame counts after the domain's timing
/// transform. Signatures are never dropped.
pub fn realize_timeline<R: Rng + ?Sized>(
    cat: &CategorySpec,
    dom: &DomainSpec,
    frames: usize,
    min_frames: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if dom.order.len() != cat.sequence.len() || dom.duration_scale.len() != cat.sequence.len() {
        return Err(ApnError::Generation(format!(
            "domain {} timing covers {} slots, category has {}",
            dom.id,
            dom.order.len(),
            cat.sequence.len()
        )));
    }
    let mut slots: Vec<usize> = Vec::new();
    for &slot in &dom.order {
        let sub = cat.sequence[slot];
        let is_filler = cat.fillers.contains(&sub);
        if is_filler && rng.random::<f64>() < dom.filler_dropout {
            continue;
        }
        slots.push(slot);
    }
    let need = slots.len() * min_frames.max(1);
    if need > frames {
        return Err(ApnError::Generation(format!(
            "{} sub-actions need {need} frames, clip has {frames}",
            slots.len()
        )));
    }
    let weights: Vec<f64> = slots.iter().map(|&s| dom.duration_scale[s].max(1e-6)).collect();
    let total: f64 = weights.iter().sum();
    // Largest-remainder apportionment with a per-slot floor.
    let floor = min_frames.max(1);
    let spare = frames - floor * slots.len();
    let ideal: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total).collect();
    let mut durations: Vec<usize> = ideal.iter().map(|v| floor + v.floor() as usize).collect();
    let mut left = frames - durations.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        durations[i] += 1;
        left -= 1;
    }
    Ok((slots.iter().map(|&s| cat.sequence[s]).collect(), durations))
}

fn smooth_step(edge: f64, x: f64) -> f64 {
    // 1 inside, 0 outside, linear over one pixel.
    (edge - x + 0.5).clamp(0.0, 1.0)
}

/// Render one clip. Deterministic in `(cat, dom, spec, seed)`.
#[allow(clippy::too_many_arguments)]
pub fn render_clip(
    cat: &CategorySpec,
    dom: &DomainSpec,
    vocab: &[SubAction],
    spec: &BenchmarkSpec,
    seed: u64,
    clip_id: usize,
) -> Result<(VideoClip, ClipMeta)> {
    let (t, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let mut rng = rng_from_seed(seed);
    let (realized, durations) = realize_timeline(cat, dom, t, spec.min_subaction_frames, &mut rng)?;

    let jitter: Vec<(f64, f64, f64)> = realized
        .iter()
        .map(|_| {
            (
                rng.random_range(-spec.position_jitter..=spec.position_jitter),
                rng.random_range(-spec.position_jitter..=spec.position_jitter),
                rng.random_range(-spec.angle_jitter..=spec.angle_jitter),
            )
        })
        .collect();
    let colour_shift: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let pal = &dom.palette;
    let (ca, sa) = (pal.texture_angle.cos(), pal.texture_angle.sin());
    let mut background = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let tex = pal.texture_amp * (std::f64::consts::TAU * pal.texture_freq * (u * ca + v * sa) + phase).sin();
            for ch in 0..c {
                background[(y * w + x) * c + ch] = pal.background[ch % 3] + tex;
            }
        }
    }

    let size = h.min(w) as f64;
    let half_len = 0.22 * size * dom.sprite_scale;
    let half_wid = 0.06 * size * dom.sprite_scale + 0.5;
    let knob = 0.09 * size * dom.sprite_scale;
    let sprite: Vec<f64> = (0..c).map(|ch| pal.sprite[ch % 3] + colour_shift[ch % 3]).collect();

    let mut data = Vec::with_capacity(t * h * w * c);
    let mut frame_owner = Vec::with_capacity(t);
    for (k, &d) in durations.iter().enumerate() {
        for f in 0..d {
            frame_owner.push((k, if d > 1 { f as f64 / (d - 1) as f64 } else { 0.5 }));
        }
    }
    for &(k, u) in &frame_owner {
        let sub = &vocab[realized[k]];
        let (jx, jy, ja) = jitter[k];
        let (cx, cy, ang, len) = sub.pose(u);
        let cx = (cx + jx + dom.offset.0) * w as f64;
        let cy = (cy + jy + dom.offset.1) * h as f64;
        let ang = ang + ja;
        let (dx, dy) = (ang.cos(), ang.sin());
        let hl = half_len * len;
        let (kx, ky) = (cx + dx * hl, cy + dy * hl);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                let bar = smooth_step(hl, along.abs()).min(smooth_step(half_wid, across.abs()));
                let kd = ((x as f64 + 0.5 - kx).powi(2) + (y as f64 + 0.5 - ky).powi(2)).sqrt();
                let alpha = bar.max(smooth_step(knob, kd));
                for ch in 0..c {
                    let bg = background[(y * w + x) * c + ch];
                    let noise = if pal.noise > 0.0 {
                        pal.noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        0.0
                    };
                    let v = bg * (1.0 - alpha) + sprite[ch] * alpha + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let clip = VideoClip {
        frames: Tensor::new(&[t, h, w, c], data, DType::F32)?,
        category: cat.id,
        domain_id: dom.id,
        clip_id,
    };
    Ok((clip, ClipMeta { clip_id, realized, durations }))
}

/// Render every (category, domain) pair and split the source domain.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let vocab = spec.subactions();
    let cats = spec.categories();
    let doms = spec.domains();
    let mut source_train = Vec::new();
    let mut source_val = Vec::new();
    let mut targets = Vec::new();
    let mut meta = Vec::new();
    for dom in &doms {
        let mut per_domain = Vec::new();
        for cat in &cats {
            let mut clips = Vec::with_capacity(spec.clips_per_pair);
            for i in 0..spec.clips_per_pair {
                let id = spec.clips_index(dom.id, cat.id, i);
                let seed = derive_seed(spec.seed, &[dom.id as u64, cat.id as u64, i as u64]);
                let (clip, m) = render_clip(cat, dom, &vocab, spec, seed, id)?;
                clips.push(clip);
                meta.push(m);
            }
            if dom.id == spec.source_domain {
                // Stratified split keeps per-class counts within one clip.
                let mut rng = rng_from_seed(derive_seed(spec.seed, &[0x5EED, cat.id as u64]));
                clips.shuffle(&mut rng);
                let n_train = (spec.train_fraction * spec.clips_per_pair as f64).round() as usize;
                let val = clips.split_off(n_train.min(clips.len()));
                source_train.extend(clips);
                source_val.extend(val);
            } else {
                per_domain.extend(clips);
            }
        }
        if dom.id != spec.source_domain {
            targets.push((dom.id, per_domain));
        }
    }
    Ok(Benchmark { spec: spec.clone(), source_train, source_val, targets, meta })
}
