//! Shared oracles for the integration tests.

#![allow(dead_code)]

pub mod grads;

use rand::SeedableRng;
use seldlab::autodiff::{Tape, Var};
use seldlab::rng::Rng;
use seldlab::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Fixed, non-symmetric weights used to reduce a tensor output to a scalar.
pub fn probe(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| (0.7 * k as f64 + 0.3).cos() + 0.1).collect();
    Tensor::from_f64(shape, &w).unwrap()
}

/// `Σ y ⊙ probe`.
pub fn contract<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(probe(&y.shape()));
    Ok(y.mul(w)?.sum())
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Scalar function of several tensor inputs recorded on a fresh tape.
pub trait ScalarFn: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}
impl<F> ScalarFn for F where F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

pub fn value_at(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars).unwrap().value().item()
}

/// Central-difference gradient of `f` at `inputs`.
pub fn numeric_grad(inputs: &[Tensor<f64>], f: &impl ScalarFn) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let shifted = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut v = xs[i].to_vec();
                v[j] += d;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), v).unwrap();
                value_at(&xs, f)
            };
            g.push((shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// Largest relative error between the tape gradient and central differences.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl ScalarFn) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let analytic = tape.grad(loss, &vars).unwrap();
    let numeric = numeric_grad(inputs, &f);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        assert_eq!(a.len(), n.len());
        for (&x, &y) in a.data().iter().zip(n) {
            worst = worst.max(rel_err(x, y));
        }
    }
    worst
}

/// Checks the double-backward rules: differentiates `⟨∇f, v⟩` on the tape
/// and compares with central differences of the first-order tape gradient.
pub fn hvp_check(inputs: &[Tensor<f64>], f: impl ScalarFn) -> f64 {
    let directional = |tape: &Tape<f64>, xs: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(tape, &vars).unwrap();
        tape.grad(loss, &vars).unwrap()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.grad_graph(loss, &vars).unwrap();
    let mut s = None;
    for g in &grads {
        let term = contract(*g).unwrap();
        s = Some(match s {
            None => term,
            Some(acc) => term.add(acc).unwrap(),
        });
    }
    let hv = tape.grad(s.unwrap(), &vars).unwrap();

    // numeric: d/dx_j Σ_i ⟨∇_i f(x), probe_i⟩
    let probes: Vec<Tensor<f64>> = inputs.iter().map(|t| probe(t.shape())).collect();
    let dot = |xs: &[Tensor<f64>]| -> f64 {
        let t = Tape::new();
        directional(&t, xs)
            .iter()
            .zip(&probes)
            .map(|(g, p)| g.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let at = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut v = xs[i].to_vec();
                v[j] += d;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), v).unwrap();
                dot(&xs)
            };
            let n = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(hv[i].data()[j], n));
        }
    }
    worst
}

/// Random tensor with entries bounded away from zero (keeps ReLU kinks and
/// divisions out of the finite-difference stencil).
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

// ---------------------------------------------------------------------------
// Metric oracles: exhaustive matching and a from-scratch recount.

use seldlab::metrics::Instance;

pub fn angle(u: [f64; 3], v: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|i| u[i] * v[i]).sum();
    let nu = (0..3).map(|i| u[i] * u[i]).sum::<f64>().sqrt();
    let nv = (0..3).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// All injective maps from `0..k` into `0..n`.
fn injections(k: usize, n: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for prefix in injections(k - 1, n) {
        for j in 0..n {
            if !prefix.contains(&j) {
                let mut p = prefix.clone();
                p.push(j);
                out.push(p);
            }
        }
    }
    out
}

/// Minimum-cost assignment by enumeration. Pairs are `(row, col)` sorted by
/// row and the cost is summed in that order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (0.0, vec![]);
    }
    let mut best = (f64::INFINITY, vec![]);
    if rows <= cols {
        for m in injections(rows, cols) {
            let pairs: Vec<(usize, usize)> = m.iter().enumerate().map(|(r, &c)| (r, c)).collect();
            let s = pairs.iter().map(|&(r, c)| cost[r][c]).sum::<f64>();
            if s < best.0 {
                best = (s, pairs);
            }
        }
    } else {
        for m in injections(cols, rows) {
            let mut pairs: Vec<(usize, usize)> = m.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            pairs.sort_unstable();
            let s = pairs.iter().map(|&(r, c)| cost[r][c]).sum::<f64>();
            if s < best.0 {
                best = (s, pairs);
            }
        }
    }
    best
}

pub fn pair_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut p = pairs.to_vec();
    p.sort_unstable();
    p.iter().map(|&(r, c)| cost[r][c]).sum()
}

/// ER, F, LE, LR recomputed from scratch with exhaustive matching.
pub fn naive_metrics(frames: &[(Vec<Instance>, Vec<Instance>)], n_classes: usize) -> (f64, f64, f64, f64) {
    let (mut s, mut d, mut ins, mut n) = (0u64, 0u64, 0u64, 0u64);
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    let mut nref = vec![0u64; n_classes];
    let mut matched = vec![0u64; n_classes];
    let mut le = vec![0.0f64; n_classes];
    for (refs, preds) in frames {
        let (mut frame_fn, mut frame_fp) = (0u64, 0u64);
        for c in 0..n_classes {
            let r: Vec<&Instance> = refs.iter().filter(|i| i.class == c).collect();
            let p: Vec<&Instance> = preds.iter().filter(|i| i.class == c).collect();
            let cost: Vec<Vec<f64>> = r.iter().map(|a| p.iter().map(|b| angle(a.doa, b.doa)).collect()).collect();
            let (_, pairs) = brute_assignment(&cost);
            let hits = pairs.iter().filter(|&&(i, j)| cost[i][j] <= 20.0).count() as u64;
            tp[c] += hits;
            fn_[c] += r.len() as u64 - hits;
            fp[c] += p.len() as u64 - hits;
            frame_fn += r.len() as u64 - hits;
            frame_fp += p.len() as u64 - hits;
            nref[c] += r.len() as u64;
            matched[c] += pairs.len() as u64;
            le[c] += pairs.iter().map(|&(i, j)| cost[i][j]).sum::<f64>();
        }
        let sub = frame_fn.min(frame_fp);
        s += sub;
        d += frame_fn - sub;
        ins += frame_fp - sub;
        n += refs.len() as u64;
    }
    let er = (s + d + ins) as f64 / n as f64;
    let classes: Vec<usize> = (0..n_classes).filter(|&c| nref[c] > 0).collect();
    let k = classes.len() as f64;
    let f = classes
        .iter()
        .map(|&c| {
            let den = 2 * tp[c] + fp[c] + fn_[c];
            if den == 0 { 0.0 } else { 2.0 * tp[c] as f64 / den as f64 }
        })
        .sum::<f64>()
        / k;
    let l = classes
        .iter()
        .map(|&c| if matched[c] == 0 { 180.0 } else { le[c] / matched[c] as f64 })
        .sum::<f64>()
        / k;
    let lr = classes.iter().map(|&c| matched[c] as f64 / nref[c] as f64).sum::<f64>() / k;
    (er, f, l, lr)
}

pub fn random_direction(r: &mut Rng) -> [f64; 3] {
    use rand::Rng as _;
    let az: f64 = r.random_range(-180.0..180.0);
    let el: f64 = r.random_range(-80.0..80.0);
    seldlab::synth::doa_vector(az, el)
}

/// Random frames with at most `max_per_class` events per class; some
/// predictions are small perturbations of references so every outcome occurs.
pub fn random_frames(n: usize, n_classes: usize, max_per_class: usize, seed: u64) -> Vec<(Vec<Instance>, Vec<Instance>)> {
    use rand::Rng as _;
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut refs = Vec::new();
            let mut preds = Vec::new();
            for _ in 0..r.random_range(1..=3) {
                let class = r.random_range(0..n_classes);
                for _ in 0..r.random_range(0..=max_per_class) {
                    let doa = random_direction(&mut r);
                    refs.push(Instance { class, doa });
                    if r.random::<f64>() < 0.6 {
                        let jitter = [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)];
                        preds.push(Instance {
                            class,
                            doa: [doa[0] + jitter[0], doa[1] + jitter[1], doa[2] + jitter[2]],
                        });
                    }
                }
                for _ in 0..r.random_range(0..=1usize) {
                    preds.push(Instance {
                        class,
                        doa: random_direction(&mut r),
                    });
                }
            }
            // cap predictions per class
            let mut kept = Vec::new();
            for c in 0..n_classes {
                kept.extend(preds.iter().filter(|p| p.class == c).take(max_per_class).copied());
            }
            (refs, kept)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// DOA recovery from intensity features.

use seldlab::dsp::{FeatureTensor, HOP_LEN, SAMPLE_RATE, WINDOW_LEN};
use seldlab::synth::{render_scene, EventSpec, RoomPreset};

pub fn anechoic_room() -> RoomPreset {
    RoomPreset {
        room_id: "anechoic".into(),
        t60: 0.0,
        snr_db: 60.0,
        diffuse_gain: 0.0,
        rng_seed: 0,
    }
}

/// Direction of one feature frame: band intensity vectors weighted by the
/// omni band energy.
pub fn frame_doa(f: &FeatureTensor, t: usize) -> [f64; 3] {
    let (tf, nm) = (f.frames, f.mels);
    let mut v = [0.0; 3];
    for b in 0..nm {
        let w = 10f64.powf(f64::from(f.values[t * nm + b]) / 10.0);
        for (k, acc) in v.iter_mut().enumerate() {
            *acc += w * f64::from(f.values[((4 + k) * tf + t) * nm + b]);
        }
    }
    v
}

/// Feature frames whose analysis window lies inside `[a, b]` seconds.
pub fn frames_inside(a: f64, b: f64, n_frames: usize) -> Vec<usize> {
    let fs = f64::from(SAMPLE_RATE);
    (0..n_frames)
        .filter(|&t| {
            let s = (t * HOP_LEN) as f64 / fs;
            let e = (t * HOP_LEN + WINDOW_LEN) as f64 / fs;
            s >= a && e <= b
        })
        .collect()
}

/// Render `trials` anechoic one-event scenes and return, for every active
/// frame, the angle between the intensity DOA and the annotated DOA.
pub fn doa_errors(trials: usize, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    let mut r = rng(seed);
    let room = anechoic_room();
    let mut errs = Vec::new();
    for i in 0..trials {
        let ev = EventSpec {
            class_id: i % seldlab::synth::N_CLASSES,
            onset: 0.5,
            duration: 3.0,
            azimuth: (r.random_range(-180.0..180.0f64) * 100.0).round() / 100.0,
            elevation: (r.random_range(-60.0..60.0f64) * 100.0).round() / 100.0,
            level_db: 0.0,
        };
        let (clip, ann) = render_scene(&room, std::slice::from_ref(&ev), 5.0, "doa", &mut r).unwrap();
        let feats = seldlab::dsp::extract_features(&clip).unwrap();
        let truth = seldlab::synth::doa_vector(ann.rows[0].azimuth, ann.rows[0].elevation);
        // skip the 10 ms fades at both ends
        for t in frames_inside(ev.onset + 0.02, ev.onset + ev.duration - 0.02, feats.frames) {
            errs.push(angle(frame_doa(&feats, t), truth));
        }
    }
    errs
}
