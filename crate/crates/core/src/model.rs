//! CRNN with ACCDOA output, target construction and inference decoding.
//!
//! Pipeline: four conv blocks (each two 3×3 conv + batch norm + ReLU, then
//! average pooling over time × frequency), mean over frequency, a one-layer
//! bidirectional GRU whose two directions are concatenated, a linear layer to
//! `3 · n_classes` and `tanh`. Output per segment is `[T_out, n_classes, 3]`.
//!
//! Label alignment: model frame `m` summarizes STFT frames
//! `P·m .. P·m + P - 1` (`P` = product of time pooling factors), so its
//! center lies at `((P·m + (P-1)/2) · hop + window/2) / fs` seconds. Targets
//! read the 100 ms label frame containing that time; decoding fills each
//! label frame from the model frame with the nearest center.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, ParamSet, Tape, Var};
use crate::dsp::{FeatureTensor, FEATURE_CHANNELS, HOP_LEN, N_MELS, SAMPLE_RATE, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::{doa_vector, vector_to_doa, Annotation, AnnotationRow, LABEL_HOP_S, N_CLASSES};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ACT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub frames: usize,
    pub mels: usize,
    pub channels: Vec<usize>,
    /// Per block `(time, freq)` pooling.
    pub pools: Vec<(usize, usize)>,
    pub gru_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: FEATURE_CHANNELS,
            frames: 372,
            mels: N_MELS,
            channels: vec![32, 64, 128, 256],
            pools: vec![(2, 2), (2, 2), (2, 2), (1, 2)],
            gru_hidden: 128,
            n_classes: N_CLASSES,
        }
    }
}

impl ModelConfig {
    /// Narrow variant that fits single-core training budgets.
    pub fn desk() -> Self {
        ModelConfig {
            channels: vec![8, 16, 24, 32],
            gru_hidden: 16,
            ..Default::default()
        }
    }

    /// Minimal shapes for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: FEATURE_CHANNELS,
            frames: 8,
            mels: 2,
            channels: vec![2, 2, 2, 2],
            pools: vec![(2, 1), (1, 1), (2, 1), (1, 2)],
            gru_hidden: 2,
            n_classes: N_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.pools.len() || self.channels.is_empty() {
            return Err(Error::Config("model channels and pools must have equal nonzero length".into()));
        }
        if self.pools.iter().any(|&(a, b)| a == 0 || b == 0) || self.gru_hidden == 0 {
            return Err(Error::Config("pool sizes and GRU width must be positive".into()));
        }
        if self.out_frames() == 0 || self.pooled_mels() == 0 {
            return Err(Error::Config("pooling leaves no time or frequency bins".into()));
        }
        Ok(())
    }

    pub fn time_pool(&self) -> usize {
        self.pools.iter().map(|p| p.0).product()
    }

    pub fn out_frames(&self) -> usize {
        self.pools.iter().fold(self.frames, |t, p| t / p.0)
    }

    fn pooled_mels(&self) -> usize {
        self.pools.iter().fold(self.mels, |f, p| f / p.1)
    }

    pub fn n_bn(&self) -> usize {
        2 * self.channels.len()
    }

    pub fn out_dim(&self) -> usize {
        3 * self.n_classes
    }

    /// Center time (s, relative to segment start) of model frame `m`.
    pub fn frame_center(&self, m: usize) -> f64 {
        let p = self.time_pool() as f64;
        ((p * m as f64 + (p - 1.0) / 2.0) * HOP_LEN as f64 + WINDOW_LEN as f64 / 2.0) / f64::from(SAMPLE_RATE)
    }

    /// Label frame (100 ms grid) read by model frame `m`.
    pub fn label_frame_of(&self, m: usize, label_frames: usize) -> usize {
        ((self.frame_center(m) / LABEL_HOP_S + 1e-9).floor() as usize).min(label_frames - 1)
    }

    /// Model frame whose center is nearest to the middle of label frame `l`.
    pub fn model_frame_of(&self, l: usize) -> usize {
        let mid = (l as f64 + 0.5) * LABEL_HOP_S;
        (0..self.out_frames())
            .min_by(|&a, &b| (self.frame_center(a) - mid).abs().total_cmp(&(self.frame_center(b) - mid).abs()))
            .unwrap_or(0)
    }

    fn conv_name(b: usize, j: usize) -> String {
        format!("block{b}.conv{j}.w")
    }

    fn bn_name(b: usize, j: usize) -> String {
        format!("block{b}.bn{j}")
    }
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

/// Random `n × n` orthogonal matrix (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q.into_iter().flatten().collect()
}

/// Fresh parameters: Xavier-uniform conv/linear/GRU-input weights,
/// orthogonal GRU recurrent blocks, zero biases, unit BN scale.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let mut cin = cfg.in_channels;
    for (b, &cout) in cfg.channels.iter().enumerate() {
        for j in 0..2 {
            let c_in = if j == 0 { cin } else { cout };
            entries.push((
                ModelConfig::conv_name(b, j),
                xavier(&[cout, c_in, 3, 3], c_in * 9, cout * 9, rng),
            ));
            let bn = ModelConfig::bn_name(b, j);
            entries.push((format!("{bn}.gamma"), Tensor::full(&[cout], 1.0)));
            entries.push((format!("{bn}.beta"), Tensor::zeros(&[cout])));
        }
        cin = cout;
    }
    let (d, h) = (cin, cfg.gru_hidden);
    for dir in ["fwd", "bwd"] {
        entries.push((format!("gru.{dir}.w_ih"), xavier(&[d, 3 * h], d, 3 * h, rng)));
        let mut w_hh = vec![0.0f64; h * 3 * h];
        for g in 0..3 {
            let q = orthogonal(h, rng);
            for i in 0..h {
                for k in 0..h {
                    w_hh[i * 3 * h + g * h + k] = q[i * h + k];
                }
            }
        }
        entries.push((format!("gru.{dir}.w_hh"), Tensor::<f64>::from_f64(&[h, 3 * h], &w_hh)?.cast()));
        entries.push((format!("gru.{dir}.b_ih"), Tensor::zeros(&[3 * h])));
        entries.push((format!("gru.{dir}.b_hh"), Tensor::zeros(&[3 * h])));
    }
    entries.push(("fc.w".into(), xavier(&[2 * h, cfg.out_dim()], 2 * h, cfg.out_dim(), rng)));
    entries.push(("fc.b".into(), Tensor::zeros(&[cfg.out_dim()])));
    ParamSet::new(entries)
}

/// Running batch-norm statistics, one entry per BN layer in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub layers: Vec<BatchStats<f32>>,
}

impl BnState {
    pub fn new(cfg: &ModelConfig) -> Self {
        BnState {
            layers: cfg
                .channels
                .iter()
                .flat_map(|&c| {
                    [0, 1].map(|_| BatchStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    })
                })
                .collect(),
        }
    }

    /// Exponential moving average toward `batch` (momentum 0.1).
    pub fn updated(&self, batch: &[BatchStats<f32>]) -> Result<BnState> {
        if batch.len() != self.layers.len() {
            return Err(Error::Misaligned(format!("{} BN layers vs {} batch stats", self.layers.len(), batch.len())));
        }
        let m = BN_MOMENTUM as f32;
        let mix = |r: &[f32], b: &[f32]| r.iter().zip(b).map(|(&r, &b)| (1.0 - m) * r + m * b).collect();
        Ok(BnState {
            layers: self
                .layers
                .iter()
                .zip(batch)
                .map(|(r, b)| BatchStats {
                    mean: mix(&r.mean, &b.mean),
                    var: mix(&r.var, &b.var),
                })
                .collect(),
        })
    }

    pub fn cast<T: Float>(&self) -> Vec<BatchStats<T>> {
        let c = |v: &[f32]| v.iter().map(|&x| T::from_f32(x).unwrap_or(T::nan())).collect();
        self.layers
            .iter()
            .map(|s| BatchStats {
                mean: c(&s.mean),
                var: c(&s.var),
            })
            .collect()
    }

    /// Encode as named tensors (for checkpoints).
    pub fn to_params(&self, cfg: &ModelConfig) -> Result<ParamSet<f32>> {
        let mut entries = Vec::new();
        let mut k = 0;
        for b in 0..cfg.channels.len() {
            for j in 0..2 {
                let s = &self.layers[k];
                let bn = ModelConfig::bn_name(b, j);
                entries.push((format!("{bn}.running_mean"), Tensor::new(vec![s.mean.len()], s.mean.clone())?));
                entries.push((format!("{bn}.running_var"), Tensor::new(vec![s.var.len()], s.var.clone())?));
                k += 1;
            }
        }
        ParamSet::new(entries)
    }

    pub fn from_params(cfg: &ModelConfig, p: &ParamSet<f32>) -> Result<Self> {
        let mut layers = Vec::new();
        for b in 0..cfg.channels.len() {
            for j in 0..2 {
                let bn = ModelConfig::bn_name(b, j);
                let get = |suffix: &str| {
                    p.get(&format!("{bn}.{suffix}"))
                        .map(|t| t.to_vec())
                        .ok_or_else(|| Error::Misaligned(format!("checkpoint lacks {bn}.{suffix}")))
                };
                layers.push(BatchStats {
                    mean: get("running_mean")?,
                    var: get("running_var")?,
                });
            }
        }
        Ok(BnState { layers })
    }
}

/// Trainable parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamSet<f32>,
    pub bn: BnState,
}

impl ModelState {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(ModelState {
            params: init_params(cfg, rng)?,
            bn: BnState::new(cfg),
        })
    }

    pub fn save(&self, cfg: &ModelConfig, path: &std::path::Path) -> Result<()> {
        self.params.merged(&self.bn.to_params(cfg)?)?.save(path)
    }

    pub fn load(cfg: &ModelConfig, path: &std::path::Path) -> Result<Self> {
        let all = ParamSet::<f32>::load(path)?;
        let (stats, params) = all.partition(|n| n.ends_with(".running_mean") || n.ends_with(".running_var"));
        let expected = init_params(cfg, &mut <Rng as rand::SeedableRng>::seed_from_u64(0))?;
        expected.check_aligned(&params)?;
        Ok(ModelState {
            bn: BnState::from_params(cfg, &stats)?,
            params,
        })
    }
}

/// Batch-norm behavior of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a, T> {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the given running statistics.
    Eval(&'a [BatchStats<T>]),
}

/// Tape-recorded forward pass. `x`: `[B, C_in, frames, mels]`; `vars` are
/// aligned with `params`. Returns `[B, T_out, 3·n_classes]` and, in train
/// mode, the per-layer batch statistics.
pub fn forward<'t, T: Float>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    vars: &[Var<'t, T>],
    x: Var<'t, T>,
    mode: Mode<'_, T>,
) -> Result<(Var<'t, T>, Vec<BatchStats<T>>)> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != [cfg.in_channels, cfg.frames, cfg.mels] {
        return Err(Error::Shape {
            op: "crnn_forward",
            lhs: shape,
            rhs: vec![0, cfg.in_channels, cfg.frames, cfg.mels],
        });
    }
    if vars.len() != params.len() {
        return Err(Error::Misaligned(format!("{} vars for {} parameters", vars.len(), params.len())));
    }
    let tape = x.tape();
    let p = |name: &str| -> Result<Var<'t, T>> {
        params
            .index_of(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Misaligned(format!("missing parameter `{name}`")))
    };
    let eps = T::lit(BN_EPS);
    let mut stats = Vec::new();
    let mut h = x;
    let mut k = 0;
    for (b, &cout) in cfg.channels.iter().enumerate() {
        for j in 0..2 {
            let zero_bias = tape.constant(Tensor::zeros(&[cout]));
            h = h.conv2d(p(&ModelConfig::conv_name(b, j))?, zero_bias)?;
            let bn = ModelConfig::bn_name(b, j);
            let (gamma, beta) = (p(&format!("{bn}.gamma"))?, p(&format!("{bn}.beta"))?);
            h = match mode {
                Mode::Train => {
                    let (y, s) = h.batch_norm_train(gamma, beta, eps)?;
                    stats.push(s);
                    y
                }
                Mode::Eval(running) => h.batch_norm_eval(gamma, beta, &running[k], eps)?,
            };
            h = h.relu();
            k += 1;
        }
        let (kt, kf) = cfg.pools[b];
        if (kt, kf) != (1, 1) {
            h = h.avg_pool(kt, kf)?;
        }
    }
    // [B, C, T', F'] -> [B, C, T'] -> [B, T', C]
    let seq = h.mean_last()?.swap12()?;
    let gru = |dir: &str| -> Result<GruWeights<'t, T>> {
        Ok(GruWeights {
            w_ih: p(&format!("gru.{dir}.w_ih"))?,
            w_hh: p(&format!("gru.{dir}.w_hh"))?,
            b_ih: p(&format!("gru.{dir}.b_ih"))?,
            b_hh: p(&format!("gru.{dir}.b_hh"))?,
        })
    };
    let rnn = bigru(seq, &gru("fwd")?, &gru("bwd")?)?;
    let (bsz, t_out, width) = (rnn.shape()[0], rnn.shape()[1], rnn.shape()[2]);
    let out = rnn
        .reshape(&[bsz * t_out, width])?
        .matmul(p("fc.w")?)?
        .add_row(p("fc.b")?)?
        .tanh()
        .reshape(&[bsz, t_out, cfg.out_dim()])?;
    Ok((out, stats))
}

#[derive(Clone, Copy)]
pub struct GruWeights<'t, T: Float> {
    /// `[D, 3H]`, gate order (r, z, n).
    pub w_ih: Var<'t, T>,
    /// `[H, 3H]`.
    pub w_hh: Var<'t, T>,
    pub b_ih: Var<'t, T>,
    pub b_hh: Var<'t, T>,
}

/// One GRU direction over `[B, T, D]`, returning `[B, T, H]` in input time
/// order. Built from primitive ops so it can be differentiated twice.
pub fn gru<'t, T: Float>(x: Var<'t, T>, w: &GruWeights<'t, T>, reverse: bool) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let h3 = w.w_hh.shape()[1];
    let hd = h3 / 3;
    let gi_all = x.reshape(&[b * t, d])?.matmul(w.w_ih)?.add_row(w.b_ih)?.reshape(&[b, t, h3])?;
    let mut h = x.tape().constant(Tensor::zeros(&[b, hd]));
    let mut outs = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for ti in order {
        let gi = gi_all.select_axis1(ti)?;
        let gh = h.matmul(w.w_hh)?.add_row(w.b_hh)?;
        let r = gi.slice_last(0, hd)?.add(gh.slice_last(0, hd)?)?.sigmoid();
        let z = gi.slice_last(hd, hd)?.add(gh.slice_last(hd, hd)?)?.sigmoid();
        let n = gi.slice_last(2 * hd, hd)?.add(r.mul(gh.slice_last(2 * hd, hd)?)?)?.tanh();
        // h' = (1 - z)·n + z·h
        h = n.add(z.mul(h.sub(n)?)?)?;
        outs[ti] = h;
    }
    Var::stack_axis1(&outs)
}

/// Bidirectional GRU; directions concatenated along the feature axis.
pub fn bigru<'t, T: Float>(x: Var<'t, T>, fwd: &GruWeights<'t, T>, bwd: &GruWeights<'t, T>) -> Result<Var<'t, T>> {
    let a = gru(x, fwd, false)?;
    let b = gru(x, bwd, true)?;
    Var::concat_last(&[a, b])
}

/// Batch feature tensors into `[B, 7, T, F]`.
pub fn batch_features<T: Float>(feats: &[&FeatureTensor]) -> Result<Tensor<T>> {
    let first = feats.first().ok_or_else(|| Error::Invalid("empty feature batch".into()))?;
    let per = first.values.len();
    let mut data = Vec::with_capacity(per * feats.len());
    for f in feats {
        if f.frames != first.frames || f.mels != first.mels {
            return Err(Error::Shape {
                op: "batch_features",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        data.extend(f.values.iter().map(|&v| T::from_f32(v).unwrap_or(T::nan())));
    }
    Tensor::new(vec![feats.len(), FEATURE_CHANNELS, first.frames, first.mels], data)
}

/// Stack targets `[T_out, C, 3]` into `[B, T_out, 3C]`.
pub fn batch_targets<T: Float>(targets: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = targets.first().ok_or_else(|| Error::Invalid("empty target batch".into()))?;
    let (t, c) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(first.len() * targets.len());
    for tg in targets {
        first.same_shape(tg, "batch_targets")?;
        data.extend(tg.data().iter().map(|&v| T::from_f32(v).unwrap_or(T::nan())));
    }
    Tensor::new(vec![targets.len(), t, 3 * c], data)
}

/// Mean squared error over every element.
pub fn seld_loss<'t, T: Float>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "seld_loss",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    pred.mse(target)
}

/// ACCDOA targets for one segment: `[T_out, n_classes, 3]`. `ann` must be
/// re-based to the segment (frame 0 = segment start) on the 100 ms grid.
pub fn make_targets(cfg: &ModelConfig, ann: &Annotation, label_frames: usize) -> Result<Tensor<f32>> {
    let (t_out, nc) = (cfg.out_frames(), cfg.n_classes);
    let mut data = vec![0.0f32; t_out * nc * 3];
    for m in 0..t_out {
        let l = cfg.label_frame_of(m, label_frames);
        for c in 0..nc {
            let earliest = ann
                .rows
                .iter()
                .filter(|r| r.frame == l && r.class == c)
                .min_by_key(|r| r.track);
            if let Some(r) = earliest {
                let v = doa_vector(r.azimuth, r.elevation);
                for (k, &x) in v.iter().enumerate() {
                    data[(m * nc + c) * 3 + k] = x as f32;
                }
            }
        }
    }
    Tensor::new(vec![t_out, nc, 3], data)
}

/// Threshold vector lengths and map back to the label grid. `pred` is
/// `[T_out, n_classes, 3]` (or flattened `[T_out, 3·n_classes]`).
pub fn decode(cfg: &ModelConfig, pred: &Tensor<f32>, label_frames: usize, threshold: f64) -> Result<Annotation> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::OutOfRange(format!("activity threshold {threshold} not in (0, 1)")));
    }
    let nc = cfg.n_classes;
    if pred.len() != cfg.out_frames() * nc * 3 {
        return Err(Error::Shape {
            op: "decode",
            lhs: pred.shape().to_vec(),
            rhs: vec![cfg.out_frames(), nc, 3],
        });
    }
    let d = pred.data();
    let mut rows = Vec::new();
    for l in 0..label_frames {
        let m = cfg.model_frame_of(l);
        for c in 0..nc {
            let o = (m * nc + c) * 3;
            let v = [f64::from(d[o]), f64::from(d[o + 1]), f64::from(d[o + 2])];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > threshold {
                let (azimuth, elevation) = vector_to_doa(v);
                rows.push(AnnotationRow {
                    frame: l,
                    class: c,
                    track: 0,
                    azimuth,
                    elevation,
                });
            }
        }
    }
    Ok(Annotation::new(rows))
}

/// Eval-mode predictions for many segments, processed in chunks.
pub fn predict(cfg: &ModelConfig, state: &ModelState, feats: &[&FeatureTensor], chunk: usize) -> Result<Vec<Tensor<f32>>> {
    let running = state.bn.cast::<f32>();
    let mut out = Vec::with_capacity(feats.len());
    for part in feats.chunks(chunk.max(1)) {
        let tape = Tape::<f32>::new();
        let vars: Vec<_> = state.params.tensors().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(batch_features(part)?);
        let (y, _) = forward(cfg, &state.params, &vars, x, Mode::Eval(&running))?;
        let y = y.value();
        let per = cfg.out_frames() * cfg.out_dim();
        for i in 0..part.len() {
            out.push(Tensor::new(
                vec![cfg.out_frames(), cfg.n_classes, 3],
                y.data()[i * per..(i + 1) * per].to_vec(),
            )?);
        }
    }
    Ok(out)
}

/// Uniformly random weights in a small range (tests and benches).
pub fn random_features(cfg: &ModelConfig, rng: &mut Rng) -> FeatureTensor {
    FeatureTensor {
        frames: cfg.frames,
        mels: cfg.mels,
        values: (0..cfg.in_channels * cfg.frames * cfg.mels).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_size_parameter_count() {
        let p = init_params(&ModelConfig::default(), &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.numel(), 1_480_839);
    }

    #[test]
    fn time_path_and_frame_map() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.out_frames(), 46);
        assert_eq!(cfg.pooled_mels(), 4);
        assert!((cfg.frame_center(0) - 0.068).abs() < 1e-12);
        assert_eq!(cfg.label_frame_of(0, 50), 0);
        assert_eq!(cfg.label_frame_of(45, 50), 48);
        assert_eq!(cfg.model_frame_of(49), 45);
    }

    #[test]
    fn empty_annotation_gives_zero_target() {
        let t = make_targets(&ModelConfig::default(), &Annotation::default(), 50).unwrap();
        assert_eq!(t.shape(), &[46, 13, 3]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_segment_event_fills_class_row() {
        let rows = (0..50)
            .map(|f| AnnotationRow {
                frame: f,
                class: 4,
                track: 0,
                azimuth: 90.0,
                elevation: 0.0,
            })
            .collect();
        let t = make_targets(&ModelConfig::default(), &Annotation::new(rows), 50).unwrap();
        for m in 0..46 {
            let o = (m * 13 + 4) * 3;
            assert!(t.data()[o].abs() < 1e-7 && (t.data()[o + 1] - 1.0).abs() < 1e-7 && t.data()[o + 2] == 0.0);
        }
    }

    #[test]
    fn homogeneous_overlap_keeps_earlier_track() {
        let row = |track, az| AnnotationRow {
            frame: 0,
            class: 1,
            track,
            azimuth: az,
            elevation: 0.0,
        };
        let ann = Annotation::new(vec![row(5, 90.0), row(2, 0.0)]);
        let t = make_targets(&ModelConfig::default(), &ann, 50).unwrap();
        assert!((t.data()[3] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn decode_threshold_cases() {
        let cfg = ModelConfig::default();
        let mut d = vec![0.0f32; 46 * 13 * 3];
        d[2] = 0.9; // class 0, frame 0: straight up
        d[3 * 1] = 0.4; // class 1 below threshold
        let ann = decode(&cfg, &Tensor::new(vec![46, 13, 3], d).unwrap(), 50, 0.5).unwrap();
        let first: Vec<_> = ann.rows.iter().filter(|r| r.frame == 0).collect();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].class, 0);
        assert!((first[0].elevation - 90.0).abs() < 1e-9);
        assert!(decode(&cfg, &Tensor::zeros(&[46, 13, 3]), 50, 1.0).is_err());
    }

    #[test]
    fn bn_state_checkpoint_roundtrip() {
        let cfg = ModelConfig::tiny();
        let mut st = ModelState::init(&cfg, &mut Rng::seed_from_u64(2)).unwrap();
        st.bn.layers[3].mean[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        st.save(&cfg, &path).unwrap();
        assert_eq!(ModelState::load(&cfg, &path).unwrap(), st);
    }

    #[test]
    fn orthogonal_columns() {
        let q = orthogonal(5, &mut Rng::seed_from_u64(9));
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = (0..5).map(|k| q[i * 5 + k] * q[j * 5 + k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
