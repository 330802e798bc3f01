//! The APN forward path: segment sampling, the toy frame encoder, the three
//! pyramid levels and the classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_block, AttentionBlockParams, BlockMode};
use crate::error::{shape_err, ApnError, Result};
use crate::params::{Bound, ParamSet};
use crate::synthdg::augment::{augment_clip, CropPlan};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// A labeled clip of `[T, H, W, C]` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub category: usize,
    pub domain_id: usize,
    pub clip_id: usize,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    /// `(H, W, C)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let d = self.frames.dims();
        (d[1], d[2], d[3])
    }
}

/// `M` frames drawn one per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub frames: Tensor,
    pub source_indices: Vec<usize>,
    pub category: usize,
    pub domain_id: usize,
    pub clip_id: usize,
}

/// Inclusive `(lo, hi)` frame range of each of `m` near-equal segments.
pub fn segment_bounds(t: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * t / m, (i + 1) * t / m - 1)).collect()
}

/// Split the clip into `m` segments and pick one frame from each: uniformly
/// at random in training, the centre `⌊(lo + hi) / 2⌋` in evaluation.
pub fn sample_segments<R: Rng + ?Sized>(clip: &VideoClip, m: usize, mode: Mode, rng: &mut R) -> Result<SampledClip> {
    let d = clip.frames.dims();
    if d.len() != 4 {
        return Err(shape_err!("clip frames must be [T, H, W, C], got {d:?}"));
    }
    let t = d[0];
    if m == 0 || t < m {
        return Err(ApnError::Input(format!("clip has {t} frames, fewer than {m} segments")));
    }
    let indices: Vec<usize> = segment_bounds(t, m)
        .into_iter()
        .map(|(lo, hi)| match mode {
            Mode::Train => rng.random_range(lo..=hi),
            Mode::Eval => (lo + hi) / 2,
        })
        .collect();
    let frame_len = d[1] * d[2] * d[3];
    let mut data = Vec::with_capacity(m * frame_len);
    for &i in &indices {
        data.extend_from_slice(&clip.frames.data()[i * frame_len..(i + 1) * frame_len]);
    }
    Ok(SampledClip {
        frames: Tensor::new(&[m, d[1], d[2], d[3]], data, clip.frames.dtype())?,
        source_indices: indices,
        category: clip.category,
        domain_id: clip.domain_id,
        clip_id: clip.clip_id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    /// Segments per clip (`M`).
    pub segments: usize,
    /// Frame feature width (`D`).
    pub feature_dim: usize,
    pub head_count: usize,
    pub ff_mult: usize,
    pub num_classes: usize,
    /// Encoder input frame size after cropping.
    pub crop_height: usize,
    pub crop_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub patch_channels: usize,
    pub encoder_hidden: usize,
    /// Dropout probability after the frame fully-connected layer.
    pub feature_dropout: f64,
    /// Residual dropout inside attention blocks.
    pub attention_dropout: f64,
    pub positional_embedding: bool,
    pub dtype: DType,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            segments: 3,
            feature_dim: 32,
            head_count: 4,
            ff_mult: 2,
            num_classes: 6,
            crop_height: 20,
            crop_width: 20,
            channels: 3,
            patch_size: 4,
            patch_channels: 8,
            encoder_hidden: 64,
            feature_dropout: 0.8,
            attention_dropout: 0.0,
            positional_embedding: true,
            dtype: DType::F32,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ApnError::Config(m));
        if self.segments < 3 {
            return err(format!("segments must be >= 3, got {}", self.segments));
        }
        if self.head_count == 0 || self.feature_dim % self.head_count != 0 {
            return err(format!("feature_dim {} not divisible by head_count {}", self.feature_dim, self.head_count));
        }
        if self.num_classes == 0 || self.channels == 0 || self.patch_size == 0 {
            return err("num_classes, channels and patch_size must be >= 1".into());
        }
        if self.crop_height % self.patch_size != 0 || self.crop_width % self.patch_size != 0 {
            return err(format!(
                "crop {}x{} is not a multiple of patch size {}",
                self.crop_height, self.crop_width, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.feature_dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return err("dropout probabilities must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.crop_height / self.patch_size) * (self.crop_width / self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncoderSlots {
    patch_w: usize,
    patch_b: usize,
    hidden_w: usize,
    hidden_b: usize,
    fc_w: usize,
    fc_b: usize,
    pos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ClassifierSlots {
    w: usize,
    b: usize,
}

/// Parameters and layout of one APN model.
#[derive(Debug, Clone)]
pub struct ApnModel {
    pub config: PyramidConfig,
    pub params: ParamSet,
    encoder: EncoderSlots,
    global: AttentionBlockParams,
    /// Within-relation blocks for snippet lengths `2..M`.
    local: Vec<AttentionBlockParams>,
    /// Cross-relation blocks for snippet lengths `2..M`.
    cross: Vec<AttentionBlockParams>,
    head: ClassifierSlots,
    patch_index: Vec<usize>,
}

/// Forward-pass handles on a tape.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub frames: Var,
    pub encoded: Var,
    pub r1_global: Var,
    pub r1_locals: Vec<Var>,
    pub local_starts: Vec<usize>,
    pub r2: Var,
    pub r3: Var,
    pub logits: Var,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub r1_global: Tensor,
    pub r1_locals: Vec<Tensor>,
    pub r2: Tensor,
    pub r3: Tensor,
    pub logits: Tensor,
}

impl PyramidVars {
    pub fn features(&self, tape: &Tape) -> PyramidFeatures {
        PyramidFeatures {
            r1_global: tape.value(self.r1_global).clone(),
            r1_locals: self.r1_locals.iter().map(|&v| tape.value(v).clone()).collect(),
            r2: tape.value(self.r2).clone(),
            r3: tape.value(self.r3).clone(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Start of the `m`-item snippet in level I: uniform in `0..=M−m` in
/// training, `⌊(M − m) / 2⌋` in evaluation.
pub fn snippet_start<R: Rng + ?Sized>(big_m: usize, m: usize, mode: Mode, rng: &mut R) -> usize {
    match mode {
        Mode::Train => rng.random_range(0..=big_m - m),
        Mode::Eval => (big_m - m) / 2,
    }
}

fn patch_index(cfg: &PyramidConfig) -> Vec<usize> {
    let (h, w, c, ps) = (cfg.crop_height, cfg.crop_width, cfg.channels, cfg.patch_size);
    let mut idx = Vec::with_capacity(cfg.segments * h * w * c);
    for t in 0..cfg.segments {
        for py in 0..h / ps {
            for px in 0..w / ps {
                for dy in 0..ps {
                    for dx in 0..ps {
                        let (y, x) = (py * ps + dy, px * ps + dx);
                        for ch in 0..c {
                            idx.push(((t * h + y) * w + x) * c + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

impl ApnModel {
    pub fn new<R: Rng + ?Sized>(config: PyramidConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dt = config.dtype;
        let d = config.feature_dim;
        let mut p = ParamSet::new();
        let flat = config.num_patches() * config.patch_channels;
        let encoder = EncoderSlots {
            patch_w: p.weight("enc.patch.w", config.patch_len(), config.patch_channels, dt, rng)?,
            patch_b: p.filled("enc.patch.b", &[config.patch_channels], 0.0, dt)?,
            hidden_w: p.weight("enc.hidden.w", flat, config.encoder_hidden, dt, rng)?,
            hidden_b: p.filled("enc.hidden.b", &[config.encoder_hidden], 0.0, dt)?,
            fc_w: p.weight("enc.fc.w", config.encoder_hidden, d, dt, rng)?,
            fc_b: p.filled("enc.fc.b", &[d], 0.0, dt)?,
            pos: if config.positional_embedding {
                Some(p.insert("enc.pos", Tensor::randn(&[config.segments, d], 0.1, dt, rng)?)?)
            } else {
                None
            },
        };
        let blk = |p: &mut ParamSet, name: &str, rng: &mut R| {
            AttentionBlockParams::init(p, name, d, config.head_count, config.ff_mult, dt, rng)
        };
        let global = blk(&mut p, "l1.global", rng)?;
        let mut local = Vec::new();
        let mut cross = Vec::new();
        for m in 2..config.segments {
            local.push(blk(&mut p, &format!("l1.local{m}"), rng)?);
        }
        for m in 2..config.segments {
            cross.push(blk(&mut p, &format!("l2.cross{m}"), rng)?);
        }
        let head = ClassifierSlots {
            w: p.filled("head.w", &[d, config.num_classes], 0.0, dt)?,
            b: p.filled("head.b", &[config.num_classes], 0.0, dt)?,
        };
        let patch_index = patch_index(&config);
        Ok(ApnModel { config, params: p, encoder, global, local, cross, head, patch_index })
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype
    }

    fn block_mode(&self, mode: Mode) -> BlockMode {
        BlockMode { train: mode.is_train(), dropout: self.config.attention_dropout }
    }

    /// Sample, crop/flip and convert a clip to the encoder's input tensor.
    pub fn prepare<R: Rng + ?Sized>(&self, clip: &VideoClip, mode: Mode, rng: &mut R) -> Result<SampledClip> {
        let mut s = sample_segments(clip, self.config.segments, mode, rng)?;
        let dims = s.frames.dims();
        let plan = CropPlan::draw(dims[1], dims[2], self.config.crop_height, self.config.crop_width, mode, rng)?;
        s.frames = augment_clip(&s.frames, &plan)?.to_dtype(self.dtype());
        Ok(s)
    }

    /// `F_M = dropout(fc(relu(hidden(relu(patch(x)))))) + pos`, shape `[M, D]`.
    pub fn encode_frames<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        frames: Var,
        bound: &Bound,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let expect = [c.segments, c.crop_height, c.crop_width, c.channels];
        if tape.dims(frames) != expect {
            return Err(shape_err!("encoder expects frames {expect:?}, got {:?}", tape.dims(frames)));
        }
        let e = &self.encoder;
        let patches = tape.gather(frames, self.patch_index.clone(), &[c.segments * c.num_patches(), c.patch_len()])?;
        let centre = tape.constant(Tensor::full(&[c.patch_len()], -0.5, tape.dtype())?)?;
        let patches = tape.add_bias(patches, centre)?;
        let h = tape.add_bias(tape.matmul(patches, bound.var(e.patch_w))?, bound.var(e.patch_b))?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[c.segments, c.num_patches() * c.patch_channels])?;
        let h = tape.add_bias(tape.matmul(h, bound.var(e.hidden_w))?, bound.var(e.hidden_b))?;
        let h = tape.relu(h)?;
        let f = tape.add_bias(tape.matmul(h, bound.var(e.fc_w))?, bound.var(e.fc_b))?;
        let f = tape.dropout(f, c.feature_dropout, mode.is_train(), rng)?;
        match e.pos {
            Some(slot) => {
                let rows: Vec<usize> = (0..c.segments).collect();
                let pos = tape.embedding(bound.var(slot), &rows)?;
                tape.add(f, pos)
            }
            None => Ok(f),
        }
    }

    /// Within-relation features: the global block over all of `F_M`, and one
    /// local block per snippet length `m ∈ {2, …, M−1}`.
    pub fn level1<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        encoded: Var,
        bound: &Bound,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>, Vec<usize>)> {
        let big_m = self.config.segments;
        let bm = self.block_mode(mode);
        let global = attention_block(tape, encoded, encoded, &self.global, bound, bm, rng)?;
        let mut locals = Vec::with_capacity(big_m - 2);
        let mut starts = Vec::with_capacity(big_m - 2);
        for (i, m) in (2..big_m).enumerate() {
            let s = snippet_start(big_m, m, mode, rng);
            let snippet = tape.slice(encoded, 0, s, m)?;
            locals.push(attention_block(tape, snippet, snippet, &self.local[i], bound, bm, rng)?);
            starts.push(s);
        }
        Ok((global, locals, starts))
    }

    /// Cross-relation feature `Σ_m Attention-Block(R_global, R_m)`.
    pub fn level2<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        r1_global: Var,
        r1_locals: &[Var],
        bound: &Bound,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if r1_locals.len() != self.cross.len() {
            return Err(shape_err!("expected {} local features, got {}", self.cross.len(), r1_locals.len()));
        }
        let bm = self.block_mode(mode);
        let mut sum: Option<Var> = None;
        for (local, blk) in r1_locals.iter().zip(&self.cross) {
            let c = attention_block(tape, r1_global, *local, blk, bound, bm, rng)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, c)?,
                None => c,
            });
        }
        Ok(sum.expect("at least one local feature"))
    }

    /// Temporal mean followed by one affine map to `K` logits.
    pub fn classify(&self, tape: &Tape, r: Var, bound: &Bound) -> Result<Var> {
        let d = self.config.feature_dim;
        let pooled = tape.mean_axis(r, 0)?;
        let pooled = tape.reshape(pooled, &[1, d])?;
        let z = tape.add_bias(tape.matmul(pooled, bound.var(self.head.w))?, bound.var(self.head.b))?;
        tape.reshape(z, &[self.config.num_classes])
    }

    /// Full pyramid over an already-prepared `[M, h, w, C]` frames leaf.
    pub fn forward_frames<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        frames: Var,
        bound: &Bound,
        mode: Mode,
        rng: &mut R,
    ) -> Result<PyramidVars> {
        let encoded = self.encode_frames(tape, frames, bound, mode, rng)?;
        let (r1_global, r1_locals, local_starts) = self.level1(tape, encoded, bound, mode, rng)?;
        let r2 = self.level2(tape, r1_global, &r1_locals, bound, mode, rng)?;
        let r3 = level3(tape, r2, r1_global)?;
        let logits = self.classify(tape, r3, bound)?;
        Ok(PyramidVars { frames, encoded, r1_global, r1_locals, local_starts, r2, r3, logits })
    }

    /// Sample, augment and run the pyramid on a raw clip.
    pub fn forward_clip<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        clip: &VideoClip,
        bound: &Bound,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(SampledClip, PyramidVars)> {
        let sampled = self.prepare(clip, mode, rng)?;
        let frames = tape.input(sampled.frames.clone())?;
        let vars = self.forward_frames(tape, frames, bound, mode, rng)?;
        Ok((sampled, vars))
    }

    /// Eval-mode class probabilities for a clip (centre sampling, centre crop).
    pub fn predict_proba(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let tape = Tape::new(self.dtype());
        let bound = self.params.bind(&tape, false)?;
        let mut rng = crate::rng::rng_from_seed(0);
        let (_, vars) = self.forward_clip(&tape, clip, &bound, Mode::Eval, &mut rng)?;
        let p = tape.softmax_lastdim(vars.logits)?;
        let out = tape.value(p).data().to_vec();
        Ok(out)
    }
}

/// Cross-relation sum `R_III = R_II + R_global`.
pub fn level3(tape: &Tape, r2: Var, r1_global: Var) -> Result<Var> {
    tape.add(r2, r1_global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small_cfg(m: usize, d: usize) -> PyramidConfig {
        PyramidConfig {
            segments: m,
            feature_dim: d,
            head_count: 2,
            num_classes: 4,
            crop_height: 8,
            crop_width: 8,
            patch_size: 4,
            patch_channels: 4,
            encoder_hidden: 8,
            dtype: DType::F64,
            ..PyramidConfig::default()
        }
    }

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = rng_from_seed(seed);
        VideoClip {
            frames: Tensor::uniform(&[t, h, w, 3], 0.0, 1.0, DType::F64, &mut rng).unwrap(),
            category: 1,
            domain_id: 0,
            clip_id: 0,
        }
    }

    #[test]
    fn segment_sampling_examples() {
        let mut rng = rng_from_seed(0);
        let c = clip(5, 2, 2, 1);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(sample_segments(&c, 5, mode, &mut rng).unwrap().source_indices, vec![0, 1, 2, 3, 4]);
        }
        let c = clip(10, 2, 2, 1);
        assert_eq!(sample_segments(&c, 5, Mode::Eval, &mut rng).unwrap().source_indices, vec![0, 2, 4, 6, 8]);
        assert!(matches!(sample_segments(&c, 11, Mode::Eval, &mut rng), Err(ApnError::Input(_))));
    }

    #[test]
    fn train_sampling_stays_in_segments() {
        let mut rng = rng_from_seed(4);
        let c = clip(13, 1, 1, 2);
        let bounds = segment_bounds(13, 4);
        for _ in 0..200 {
            let s = sample_segments(&c, 4, Mode::Train, &mut rng).unwrap();
            assert!(s.source_indices.windows(2).all(|w| w[0] < w[1]));
            for (i, (lo, hi)) in s.source_indices.iter().zip(&bounds) {
                assert!(lo <= i && i <= hi);
            }
        }
    }

    #[test]
    fn snippet_start_centred_in_eval() {
        let mut rng = rng_from_seed(0);
        assert_eq!(snippet_start(5, 3, Mode::Eval, &mut rng), 1);
        assert_eq!(snippet_start(5, 2, Mode::Eval, &mut rng), 1);
        assert_eq!(snippet_start(5, 4, Mode::Eval, &mut rng), 0);
    }

    #[test]
    fn pyramid_shapes_and_level3_identity() {
        for m in [3, 4, 5] {
            let mut rng = rng_from_seed(m as u64);
            let model = ApnModel::new(small_cfg(m, 8), &mut rng).unwrap();
            let tape = Tape::new(DType::F64);
            let b = model.params.bind(&tape, true).unwrap();
            let (_, v) = model.forward_clip(&tape, &clip(12, 10, 10, 3), &b, Mode::Train, &mut rng).unwrap();
            let f = v.features(&tape);
            assert_eq!(f.r1_global.dims(), &[m, 8]);
            assert_eq!(f.r2.dims(), &[m, 8]);
            assert_eq!(f.r3.dims(), &[m, 8]);
            assert_eq!(f.r1_locals.len(), m - 2);
            for (i, l) in f.r1_locals.iter().enumerate() {
                assert_eq!(l.dims(), &[i + 2, 8]);
            }
            let sum = f.r2.add(&f.r1_global).unwrap();
            assert!(sum.bitwise_eq(&f.r3));
            assert_eq!(f.logits.dims(), &[4]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = rng_from_seed(1);
        let model = ApnModel::new(small_cfg(3, 8), &mut rng).unwrap();
        let c = clip(9, 10, 10, 5);
        let run = || {
            let tape = Tape::new(DType::F64);
            let b = model.params.bind(&tape, false).unwrap();
            let (_, v) = model.forward_clip(&tape, &c, &b, Mode::Eval, &mut rng_from_seed(77)).unwrap();
            v.features(&tape)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn classify_examples() {
        let mut rng = rng_from_seed(2);
        let model = ApnModel::new(small_cfg(3, 8), &mut rng).unwrap();
        let tape = Tape::new(DType::F64);
        let b = model.params.bind(&tape, false).unwrap();
        let row = Tensor::randn(&[1, 8], 1.0, DType::F64, &mut rng).unwrap();
        let rep = Tensor::from_f64(&[3, 8], row.data().repeat(3)).unwrap();
        let l1 = model.classify(&tape, tape.input(row.clone()).unwrap(), &b).unwrap();
        let l3 = model.classify(&tape, tape.input(rep).unwrap(), &b).unwrap();
        for (a, c) in tape.value(l1).data().iter().zip(tape.value(l3).data()) {
            assert!((a - c).abs() < 1e-12);
        }

        // Direct mean + affine arithmetic.
        let r = Tensor::randn(&[3, 8], 1.0, DType::F64, &mut rng).unwrap();
        let lr = model.classify(&tape, tape.input(r.clone()).unwrap(), &b).unwrap();
        let w = model.params.by_name("head.w").unwrap();
        let hb = model.params.by_name("head.b").unwrap();
        for k in 0..4 {
            let mut z = hb.data()[k];
            for j in 0..8 {
                let mean = (0..3).map(|t| r.data()[t * 8 + j]).sum::<f64>() / 3.0;
                z += mean * w.data()[j * 4 + k];
            }
            assert!((tape.value(lr).data()[k] - z).abs() < 1e-6);
        }

        // Zero weights leave only the bias.
        let mut zeroed = model.clone();
        let ws = zeroed.params.slot("head.w").unwrap();
        *zeroed.params.get_mut(ws) = Tensor::zeros(&[8, 4], DType::F64).unwrap();
        let bs = zeroed.params.slot("head.b").unwrap();
        *zeroed.params.get_mut(bs) = Tensor::from_f64(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let tape = Tape::new(DType::F64);
        let b = zeroed.params.bind(&tape, false).unwrap();
        let l = zeroed.classify(&tape, tape.input(r).unwrap(), &b).unwrap();
        assert_eq!(tape.value(l).data(), &[0.1, -0.2, 0.3, 0.0]);
    }

    #[test]
    fn level3_is_a_commutative_sum() {
        let tape = Tape::new(DType::F64);
        let mut rng = rng_from_seed(8);
        let a = tape.input(Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng).unwrap()).unwrap();
        let z = tape.input(Tensor::zeros(&[3, 4], DType::F64).unwrap()).unwrap();
        let b = tape.input(Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng).unwrap()).unwrap();
        assert!(tape.value(level3(&tape, z, a).unwrap()).bitwise_eq(&tape.value(a)));
        assert!(tape.value(level3(&tape, a, z).unwrap()).bitwise_eq(&tape.value(a)));
        let ab = level3(&tape, a, b).unwrap();
        let ba = level3(&tape, b, a).unwrap();
        assert!(tape.value(ab).bitwise_eq(&tape.value(ba)));
        let bad = tape.input(Tensor::zeros(&[2, 4], DType::F64).unwrap()).unwrap();
        assert!(level3(&tape, a, bad).is_err());
    }

    #[test]
    fn global_path_is_permutation_invariant_without_positions() {
        let mut rng = rng_from_seed(12);
        let cfg = PyramidConfig { positional_embedding: false, ..small_cfg(5, 8) };
        let model = ApnModel::new(cfg, &mut rng).unwrap();
        let f = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut rng).unwrap();
        let mut permuted = Vec::new();
        for &r in &[3usize, 0, 4, 1, 2] {
            permuted.extend_from_slice(f.row(r));
        }
        let tape = Tape::new(DType::F64);
        let b = model.params.bind(&tape, false).unwrap();
        let run = |t: Tensor| {
            let fv = tape.input(t).unwrap();
            let (g, _, _) = model.level1(&tape, fv, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap();
            model.classify(&tape, g, &b).unwrap()
        };
        let a = run(f.clone());
        let c = run(Tensor::from_f64(&[5, 8], permuted).unwrap());
        for (x, y) in tape.value(a).data().iter().zip(tape.value(c).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_break_frame_permutation_invariance() {
        let mut rng = rng_from_seed(13);
        let model = ApnModel::new(small_cfg(3, 8), &mut rng).unwrap();
        let frames = Tensor::uniform(&[3, 8, 8, 3], 0.0, 1.0, DType::F64, &mut rng).unwrap();
        let fl = 8 * 8 * 3;
        let mut rev = Vec::new();
        for t in [2usize, 1, 0] {
            rev.extend_from_slice(&frames.data()[t * fl..(t + 1) * fl]);
        }
        let tape = Tape::new(DType::F64);
        let b = model.params.bind(&tape, false).unwrap();
        let run = |t: Tensor| {
            let x = tape.input(t).unwrap();
            model.forward_frames(&tape, x, &b, Mode::Eval, &mut rng_from_seed(0)).unwrap().r3
        };
        let a = run(frames.clone());
        let c = run(Tensor::from_f64(&[3, 8, 8, 3], rev).unwrap());
        let pooled = |v| tape.value(tape.mean_axis(v, 0).unwrap()).clone();
        let diff: f64 = pooled(a).data().iter().zip(pooled(c).data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
    }
}
