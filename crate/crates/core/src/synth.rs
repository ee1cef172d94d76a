//! Synthetic FOA scenes grouped into parametric rooms.
//!
//! A room is a reverberation time, a diffuse-to-direct gain and a noise
//! level. An event is a parametric class template, panned to its direction
//! with first-order ambisonics, plus an exponentially decaying isotropic tail.
//! Labels live on a 100 ms grid: a frame is active for an event when the event
//! covers at least half of it.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{FoaClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{clip_stream, substream, Rng};

pub const N_CLASSES: usize = 13;
pub const LABEL_HOP_S: f64 = 0.1;
pub const MAX_POLYPHONY: usize = 3;
/// Reference RMS for event levels (0 dB) and for the noise floor.
pub const REF_RMS: f64 = 0.05;
/// ln(10^6): amplitude decay exponent so that energy falls 60 dB in `t60`.
const DECAY_60DB: f64 = 6.907_755_278_982_137;
const FADE_S: f64 = 0.01;

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomPreset {
    pub room_id: String,
    pub t60: f64,
    pub snr_db: f64,
    pub diffuse_gain: f64,
    pub rng_seed: u64,
}

impl RoomPreset {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.2).contains(&self.t60) {
            return Err(Error::OutOfRange(format!("room {}: t60 {} outside [0, 1.2]", self.room_id, self.t60)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::OutOfRange(format!("room {}: snr_db is not finite", self.room_id)));
        }
        if !(0.0..=0.5).contains(&self.diffuse_gain) {
            return Err(Error::OutOfRange(format!(
                "room {}: diffuse_gain {} outside [0, 0.5]",
                self.room_id, self.diffuse_gain
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class_id: usize,
    pub onset: f64,
    pub duration: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub level_db: f64,
}

/// One label row: `(frame, class, track, azimuth, elevation)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub frame: usize,
    pub class: usize,
    pub track: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub rows: Vec<AnnotationRow>,
}

impl Annotation {
    pub fn new(mut rows: Vec<AnnotationRow>) -> Self {
        rows.sort_by_key(|r| (r.frame, r.class, r.track));
        Annotation { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with `start <= frame < end`, re-based so `start` becomes frame 0.
    pub fn window(&self, start: usize, end: usize) -> Annotation {
        Annotation {
            rows: self
                .rows
                .iter()
                .filter(|r| r.frame >= start && r.frame < end)
                .map(|r| AnnotationRow {
                    frame: r.frame - start,
                    ..*r
                })
                .collect(),
        }
    }

    /// Frames whose active row count exceeds the polyphony cap.
    pub fn polyphony_violations(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        let mut i = 0;
        while i < self.rows.len() {
            let f = self.rows[i].frame;
            let j = self.rows[i..].iter().position(|r| r.frame != f).map_or(self.rows.len(), |p| i + p);
            if j - i > MAX_POLYPHONY {
                bad.push(f);
            }
            i = j;
        }
        bad
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for r in &self.rows {
            wr.write_record([
                r.frame.to_string(),
                r.class.to_string(),
                r.track.to_string(),
                format!("{:.2}", r.azimuth),
                format!("{:.2}", r.elevation),
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv(r: impl std::io::Read, origin: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::format(origin, e.to_string()))?;
            if rec.len() != 5 {
                return Err(Error::format(origin, format!("expected 5 fields, found {}", rec.len())));
            }
            let int = |i: usize| {
                rec[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(origin, format!("bad integer `{}`", &rec[i])))
            };
            let real = |i: usize| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(origin, format!("bad number `{}`", &rec[i])))
            };
            rows.push(AnnotationRow {
                frame: int(0)?,
                class: int(1)?,
                track: int(2)?,
                azimuth: real(3)?,
                elevation: real(4)?,
            });
        }
        Ok(Annotation::new(rows))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path)
    }
}

/// ACN/SN3D panning gains `(W, Y, Z, X)`.
pub fn foa_gains(azimuth_deg: f64, elevation_deg: f64) -> Result<[f64; 4]> {
    if !(elevation_deg.abs() <= 90.0) {
        return Err(Error::OutOfRange(format!("elevation {elevation_deg}° outside [-90, 90]")));
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Ok([1.0, el.cos() * az.sin(), el.sin(), el.cos() * az.cos()])
}

pub fn foa_encode(mono: &[f64], azimuth_deg: f64, elevation_deg: f64) -> Result<[Vec<f64>; 4]> {
    let g = foa_gains(azimuth_deg, elevation_deg)?;
    Ok(std::array::from_fn(|c| mono.iter().map(|v| v * g[c]).collect()))
}

/// Unit direction `(x, y, z)` for azimuth/elevation in degrees.
pub fn doa_vector(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Inverse of [`doa_vector`] for any nonzero vector.
pub fn vector_to_doa(v: [f64; 3]) -> (f64, f64) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let az = v[1].atan2(v[0]).to_degrees();
    let el = (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    (if az <= -180.0 { az + 360.0 } else { az }, el)
}

fn gaussian(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Zero every FFT bin outside `[lo, hi]` Hz.
fn band_limit(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * FS / n as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn band_noise(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    band_limit(&gaussian(n, rng), lo, hi)
}

/// Decaying sinusoidal bursts at `rate` Hz.
fn burst_train(n: usize, rate: f64, freq: f64, tau: f64, phase0: f64) -> Vec<f64> {
    let period = FS / rate;
    (0..n)
        .map(|i| {
            let tl = ((i as f64 + phase0 * period) % period) / FS;
            (-tl / tau).exp() * (2.0 * std::f64::consts::PI * freq * tl).sin()
        })
        .collect()
}

fn tone(n: usize, phase: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| phase(i as f64 / FS).sin()).collect()
}

/// Class template, unit RMS, with 10 ms raised-cosine fades.
pub fn synth_event(class_id: usize, duration: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    use std::f64::consts::PI;
    if class_id >= N_CLASSES {
        return Err(Error::UnknownClass(class_id));
    }
    if !(duration > 0.0) {
        return Err(Error::OutOfRange(format!("event duration {duration}")));
    }
    let n = (duration * FS).round() as usize;
    let jitter = 1.0 + 0.04 * (rng.random::<f64>() - 0.5);
    let ph: f64 = rng.random::<f64>() * 2.0 * PI;
    let mut x = match class_id {
        0 | 1 => {
            let (f0, harmonics) = if class_id == 0 { (220.0, 5) } else { (880.0, 3) };
            let f0 = f0 * jitter;
            (0..n)
                .map(|i| {
                    let t = i as f64 / FS;
                    (1..=harmonics).map(|h| (2.0 * PI * f0 * h as f64 * t + ph * h as f64).sin() / h as f64).sum()
                })
                .collect()
        }
        2 | 3 => {
            let (fa, fb) = if class_id == 2 { (300.0, 3000.0) } else { (4000.0, 500.0) };
            let (fa, fb) = (fa * jitter, fb * jitter);
            tone(n, |t| 2.0 * PI * (fa * t + (fb - fa) * t * t / (2.0 * duration)) + ph)
        }
        4 => {
            let noise = band_noise(n, 200.0, 8000.0, rng);
            noise
                .iter()
                .enumerate()
                .map(|(i, v)| v * (0.5 + 0.5 * (2.0 * PI * 8.0 * jitter * i as f64 / FS + ph).sin()))
                .collect()
        }
        5 => burst_train(n, 25.0 * jitter, 1500.0, 0.008, rng.random()),
        6 => band_noise(n, 800.0, 1200.0, rng),
        7 => band_noise(n, 5000.0, 9000.0, rng),
        8 => band_noise(n, 80.0, 300.0, rng),
        9 => {
            let fc = 1500.0 * jitter;
            tone(n, |t| 2.0 * PI * fc * t + 60.0 * (2.0 * PI * 5.0 * t).sin() + ph)
        }
        10 => {
            let fc = 3000.0 * jitter;
            (0..n)
                .map(|i| {
                    let t = i as f64 / FS;
                    (0.6 + 0.4 * (2.0 * PI * 4.0 * t).sin()) * (2.0 * PI * fc * t + ph).sin()
                })
                .collect()
        }
        11 => burst_train(n, 40.0 * jitter, 2500.0, 0.003, rng.random()),
        _ => {
            let seg = (0.125 * FS) as usize;
            (0..n)
                .map(|i| {
                    let f = if (i / seg) % 2 == 0 { 600.0 } else { 1200.0 } * jitter;
                    (2.0 * PI * f * i as f64 / FS + ph).sin()
                })
                .collect()
        }
    };
    let fade = ((FADE_S * FS) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(x)
}

/// Linear convolution via FFT, truncated to `out_len`.
fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    fa.iter_mut().zip(&fb).for_each(|(x, y)| *x *= y);
    planner.plan_fft_inverse(n).process(&mut fa);
    fa.iter().take(out_len).map(|c| c.re / n as f64).collect()
}

/// Four independent exponentially decaying noise responses. W carries energy
/// `diffuse_gain²`, each dipole a third of that (isotropic field, SN3D).
pub fn diffuse_tail(room: &RoomPreset, rng: &mut Rng) -> Option<[Vec<f64>; 4]> {
    if room.t60 <= 0.0 || room.diffuse_gain <= 0.0 {
        return None;
    }
    let len = ((room.t60 * FS).ceil() as usize).max(1);
    Some(std::array::from_fn(|c| {
        let mut h: Vec<f64> = gaussian(len, rng)
            .into_iter()
            .enumerate()
            .map(|(i, g)| g * (-DECAY_60DB * i as f64 / (room.t60 * FS)).exp())
            .collect();
        let target = room.diffuse_gain.powi(2) / if c == 0 { 1.0 } else { 3.0 };
        let energy: f64 = h.iter().map(|v| v * v).sum();
        let s = (target / energy).sqrt();
        h.iter_mut().for_each(|v| *v *= s);
        h
    }))
}

fn label_frames(ev: &EventSpec, n_frames: usize) -> impl Iterator<Item = usize> + '_ {
    (0..n_frames).filter(move |&f| {
        let (a, b) = (f as f64 * LABEL_HOP_S, (f + 1) as f64 * LABEL_HOP_S);
        let overlap = (ev.onset + ev.duration).min(b) - ev.onset.max(a);
        overlap >= 0.5 * LABEL_HOP_S - 1e-9
    })
}

/// Label rows for `events`, with `track` = position in onset order.
pub fn annotate(events: &[EventSpec], clip_seconds: f64) -> Annotation {
    let n_frames = (clip_seconds / LABEL_HOP_S).round() as usize;
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| events[a].onset.total_cmp(&events[b].onset).then(a.cmp(&b)));
    let mut rows = Vec::new();
    for (track, &i) in order.iter().enumerate() {
        let ev = &events[i];
        rows.extend(label_frames(ev, n_frames).map(|frame| AnnotationRow {
            frame,
            class: ev.class_id,
            track,
            azimuth: ev.azimuth,
            elevation: ev.elevation,
        }));
    }
    Annotation::new(rows)
}

/// Render one clip: events (direct path + diffuse tail) plus isotropic noise.
pub fn render_scene(
    room: &RoomPreset,
    events: &[EventSpec],
    clip_seconds: f64,
    clip_id: &str,
    rng: &mut Rng,
) -> Result<(FoaClip, Annotation)> {
    room.validate()?;
    let n = (clip_seconds * FS).round() as usize;
    for ev in events {
        if ev.class_id >= N_CLASSES {
            return Err(Error::UnknownClass(ev.class_id));
        }
        if ev.onset < 0.0 || ev.duration <= 0.0 || ev.onset + ev.duration > clip_seconds + 1e-9 {
            return Err(Error::OutOfRange(format!(
                "event [{}, {}] s outside a {clip_seconds} s clip",
                ev.onset,
                ev.onset + ev.duration
            )));
        }
    }
    let ann = annotate(events, clip_seconds);
    let bad = ann.polyphony_violations();
    if !bad.is_empty() {
        return Err(Error::Polyphony { frames: bad });
    }

    let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for ev in events {
        let amp = REF_RMS * 10f64.powf(ev.level_db / 20.0);
        let mono: Vec<f64> = synth_event(ev.class_id, ev.duration, rng)?.into_iter().map(|v| v * amp).collect();
        let start = (ev.onset * FS).round() as usize;
        let gains = foa_gains(ev.azimuth, ev.elevation)?;
        for (c, ch) in out.iter_mut().enumerate() {
            for (o, v) in ch[start..].iter_mut().zip(&mono) {
                *o += gains[c] * v;
            }
        }
        if let Some(tail) = diffuse_tail(room, rng) {
            let room_left = n.saturating_sub(start + 1);
            for (c, h) in tail.iter().enumerate() {
                let wet = fft_convolve(&mono, h, room_left.min(mono.len() + h.len() - 1));
                for (o, v) in out[c][start + 1..].iter_mut().zip(&wet) {
                    *o += v;
                }
            }
        }
    }
    let sigma = REF_RMS * 10f64.powf(-room.snr_db / 20.0);
    for (c, ch) in out.iter_mut().enumerate() {
        let s = if c == 0 { sigma } else { sigma / 3f64.sqrt() };
        for v in ch.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v += s * g;
        }
    }
    let channels = std::array::from_fn(|c| out[c].iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect());
    Ok((FoaClip::new(channels, SAMPLE_RATE, room.room_id.clone(), clip_id)?, ann))
}

/// Knobs for random scene layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub clip_seconds: f64,
    pub events_min: usize,
    pub events_max: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub level_db_min: f64,
    pub level_db_max: f64,
    pub elevation_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            clip_seconds: 60.0,
            events_min: 15,
            events_max: 25,
            duration_min: 0.5,
            duration_max: 3.0,
            level_db_min: -6.0,
            level_db_max: 0.0,
            elevation_max: 60.0,
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Random polyphony-legal event layout, sorted by onset.
pub fn random_events(cfg: &SceneConfig, rng: &mut Rng) -> Vec<EventSpec> {
    let count = rng.random_range(cfg.events_min..=cfg.events_max.max(cfg.events_min));
    let mut events: Vec<EventSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let duration = round2(rng.random_range(cfg.duration_min..=cfg.duration_max)).min(cfg.clip_seconds);
            let onset = round2(rng.random_range(0.0..=(cfg.clip_seconds - duration))).max(0.0);
            let cand = EventSpec {
                class_id: rng.random_range(0..N_CLASSES),
                onset,
                duration,
                azimuth: round2(180.0 - 360.0 * rng.random::<f64>()),
                elevation: round2(rng.random_range(-cfg.elevation_max..=cfg.elevation_max)),
                level_db: round2(rng.random_range(cfg.level_db_min..=cfg.level_db_max)),
            };
            if cand.onset + cand.duration > cfg.clip_seconds {
                continue;
            }
            events.push(cand);
            if annotate(&events, cfg.clip_seconds).polyphony_violations().is_empty() {
                break;
            }
            events.pop();
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    events
}

/// Room entry in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomEntry {
    #[serde(flatten)]
    pub preset: RoomPreset,
    pub split: Split,
}

/// Default layout: 9 training and 7 held-out rooms with parameters drawn from
/// the dataset seed.
pub fn default_rooms(dataset_seed: u64, n_train: usize, n_test: usize) -> Vec<RoomEntry> {
    let mut rng = substream(dataset_seed, "rooms");
    let mut make = |id: String, split| RoomEntry {
        preset: RoomPreset {
            room_id: id,
            t60: round2(rng.random_range(0.2..=1.2)),
            snr_db: round2(rng.random_range(6.0..=30.0)),
            diffuse_gain: round2(rng.random_range(0.1..=0.5)),
            rng_seed: rng.random(),
        },
        split,
    };
    let mut rooms: Vec<RoomEntry> = (1..=n_train).map(|i| make(format!("train_room{i:02}"), Split::Train)).collect();
    rooms.extend((1..=n_test).map(|i| make(format!("test_room{i:02}"), Split::Test)));
    rooms
}

pub fn clip_id(room_id: &str, idx: usize) -> String {
    format!("{room_id}_clip{idx:03}")
}

/// Render clip `idx` of `room`; output depends only on (seed, room, idx).
pub fn render_clip(room: &RoomPreset, idx: usize, cfg: &SceneConfig, dataset_seed: u64) -> Result<(FoaClip, Annotation)> {
    let mut rng = clip_stream(dataset_seed ^ room.rng_seed, &room.room_id, idx);
    let events = random_events(cfg, &mut rng);
    render_scene(room, &events, cfg.clip_seconds, &clip_id(&room.room_id, idx), &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub room_id: String,
    pub split: Split,
}

/// On-disk dataset: `wav/`, `annotations/`, `rooms.csv`, `manifest.csv`.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }
    pub fn wav(&self, clip_id: &str) -> PathBuf {
        self.root.join("wav").join(format!("{clip_id}.wav"))
    }
    pub fn annotation(&self, clip_id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{clip_id}.csv"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }
    pub fn rooms(&self) -> PathBuf {
        self.root.join("rooms.csv")
    }

    pub fn read_manifest(&self) -> Result<Vec<ManifestRow>> {
        read_csv_rows(&self.manifest())
    }

    pub fn read_rooms(&self) -> Result<Vec<RoomEntry>> {
        let path = self.rooms();
        let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        // flattened structs do not deserialize through csv; read columns by hand
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
            let get = |i: usize| rec.get(i).ok_or_else(|| Error::format(&path, "missing column"));
            let num = |i: usize| -> Result<f64> {
                get(i)?.parse().map_err(|_| Error::format(&path, format!("bad number in column {i}")))
            };
            out.push(RoomEntry {
                preset: RoomPreset {
                    room_id: get(0)?.to_string(),
                    t60: num(1)?,
                    snr_db: num(2)?,
                    diffuse_gain: num(3)?,
                    rng_seed: get(4)?.parse().map_err(|_| Error::format(&path, "bad seed"))?,
                },
                split: match get(5)? {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    s => return Err(Error::format(&path, format!("unknown split `{s}`"))),
                },
            });
        }
        Ok(out)
    }
}

fn read_csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rd.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Write `contents` to `path` via a temporary file and rename, so readers
/// never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn manifest_bytes(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    wr.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

fn rooms_bytes(rooms: &[RoomEntry]) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["room_id", "t60", "snr_db", "diffuse_gain", "rng_seed", "split"])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for r in rooms {
        let p = &r.preset;
        wr.write_record([
            p.room_id.clone(),
            p.t60.to_string(),
            p.snr_db.to_string(),
            p.diffuse_gain.to_string(),
            p.rng_seed.to_string(),
            r.split.as_str().to_string(),
        ])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    wr.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

/// Render every clip of every room to `root`. The manifest is written last.
pub fn build_dataset(
    root: &Path,
    rooms: &[RoomEntry],
    clips_per_room: usize,
    cfg: &SceneConfig,
    dataset_seed: u64,
) -> Result<Vec<ManifestRow>> {
    if clips_per_room == 0 {
        return Err(Error::Config("clips_per_room must be positive".into()));
    }
    let mut ids = std::collections::HashSet::new();
    for r in rooms {
        r.preset.validate()?;
        if !ids.insert(r.preset.room_id.as_str()) {
            return Err(Error::Config(format!("duplicate room id `{}`", r.preset.room_id)));
        }
    }
    let layout = DatasetLayout::new(root);
    for sub in ["wav", "annotations"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Vec::with_capacity(rooms.len() * clips_per_room);
    for r in rooms {
        for idx in 0..clips_per_room {
            let (clip, ann) = render_clip(&r.preset, idx, cfg, dataset_seed)?;
            crate::dsp::write_wav(&layout.wav(&clip.clip_id), &clip)?;
            ann.save(&layout.annotation(&clip.clip_id))?;
            manifest.push(ManifestRow {
                clip_id: clip.clip_id,
                room_id: r.preset.room_id.clone(),
                split: r.split,
            });
        }
    }
    write_atomic(&layout.rooms(), &rooms_bytes(rooms)?)?;
    write_atomic(&layout.manifest(), &manifest_bytes(&manifest)?)?;
    Ok(manifest)
}
