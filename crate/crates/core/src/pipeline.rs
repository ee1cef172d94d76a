//! On-disk pipeline: dataset synthesis, feature cache, runs, evaluation and
//! reports.
//!
//! Run directory layout:
//! - `config.toml`: full configuration, written before any compute;
//! - `dataset_hash.txt`: SHA-256 of the dataset the run consumed;
//! - `log.csv`: `epoch,lr,loss,task_losses` (task losses `;`-separated);
//! - `checkpoints/epoch_NNN.bin` every `checkpoint_every` epochs, `final.bin`;
//! - `predictions/<segment>.csv`: decoded query predictions, label format;
//! - `adaptation.csv`: per-room query MSE before and after adaptation;
//! - `metrics.csv`: one row per held-out room plus `Overall`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{Condition, RunConfig};
use crate::dsp::{extract_features, read_wav, FeatureTensor, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::experiment::{
    evaluate_room, meta_train, pretrain, CrnnLearner, EpochLog, FeatureSource, RoomData, Segment,
    SEGMENT_LABEL_FRAMES,
};
use crate::metrics::{read_metrics_csv, room_table, write_metrics_csv, Accumulator, MetricsRow};
use crate::model::{make_targets, ModelState};
use crate::rng::substream;
use crate::synth::{build_dataset, default_rooms, Annotation, DatasetLayout, ManifestRow, Split};

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Render the configured rooms into `out`.
pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<Vec<ManifestRow>> {
    let d = &cfg.dataset;
    create_dir(out)?;
    let rooms = default_rooms(d.dataset_seed, d.n_train_rooms, d.n_test_rooms);
    build_dataset(out, &rooms, d.clips_per_room, &d.scene, d.dataset_seed)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of manifest, room table, annotations and audio (manifest order).
pub fn dataset_hash(dataset: &Path) -> Result<String> {
    let layout = DatasetLayout::new(dataset);
    let mut h = Sha256::new();
    for p in [layout.manifest(), layout.rooms()] {
        h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    for row in layout.read_manifest()? {
        for p in [layout.annotation(&row.clip_id), layout.wav(&row.clip_id)] {
            h.update(sha256_file(&p)?.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn segment_file(cache: &Path, clip_id: &str, seg: usize) -> PathBuf {
    cache.join(format!("{clip_id}_seg{seg:02}.msld"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractSummary {
    pub clips: usize,
    pub written: usize,
    pub skipped: usize,
}

/// One feature file per 5 s segment. A clip is skipped when its recorded
/// audio hash matches and all of its segment files exist.
pub fn extract_features_dir(dataset: &Path, cache: &Path) -> Result<ExtractSummary> {
    let layout = DatasetLayout::new(dataset);
    let manifest = layout.read_manifest()?;
    create_dir(cache)?;
    let mut summary = ExtractSummary::default();
    for row in &manifest {
        summary.clips += 1;
        let wav = layout.wav(&row.clip_id);
        let hash = sha256_file(&wav)?;
        let stamp = cache.join(format!("{}.hash", row.clip_id));
        let clip = read_wav(&wav, &row.room_id, &row.clip_id)?;
        let n_seg = clip.len() / SEGMENT_SAMPLES;
        let fresh = std::fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == hash)
            && (0..n_seg).all(|s| segment_file(cache, &row.clip_id, s).exists());
        if fresh {
            summary.skipped += n_seg;
            continue;
        }
        for (s, piece) in clip.segments(SEGMENT_SAMPLES).iter().enumerate() {
            extract_features(piece)?.save(&segment_file(cache, &row.clip_id, s))?;
            summary.written += 1;
        }
        std::fs::write(&stamp, &hash).map_err(|e| Error::io(&stamp, e))?;
    }
    Ok(summary)
}

/// Room data backed by the feature cache.
pub fn load_rooms(dataset: &Path, cache: &Path, cfg: &RunConfig) -> Result<Vec<RoomData>> {
    let layout = DatasetLayout::new(dataset);
    let manifest = layout.read_manifest()?;
    let rooms = layout.read_rooms()?;
    let mut out: Vec<RoomData> = rooms
        .iter()
        .map(|r| RoomData {
            room_id: r.preset.room_id.clone(),
            split: r.split,
            segments: Vec::new(),
        })
        .collect();
    let mut sorted = manifest.clone();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    for row in &sorted {
        let room = out
            .iter_mut()
            .find(|r| r.room_id == row.room_id)
            .ok_or_else(|| Error::format(layout.manifest(), format!("unknown room `{}`", row.room_id)))?;
        let ann = Annotation::load(&layout.annotation(&row.clip_id))?;
        let mut s = 0;
        loop {
            let path = segment_file(cache, &row.clip_id, s);
            if !path.exists() {
                break;
            }
            let lab = ann.window(s * SEGMENT_LABEL_FRAMES, (s + 1) * SEGMENT_LABEL_FRAMES);
            room.segments.push(Segment {
                clip_id: row.clip_id.clone(),
                index: s,
                features: FeatureSource::Disk(path),
                target: make_targets(&cfg.model, &lab, SEGMENT_LABEL_FRAMES)?,
                labels: lab,
            });
            s += 1;
        }
        if s == 0 {
            return Err(Error::format(cache, format!("no cached features for clip `{}`", row.clip_id)));
        }
    }
    Ok(out)
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,lr,loss,task_losses\n");
    for l in logs {
        let tasks: Vec<String> = l.task_losses.iter().map(|v| format!("{v:.8}")).collect();
        text.push_str(&format!("{},{},{:.8},{}\n", l.epoch, l.lr, l.loss, tasks.join(";")));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Train (or load) the model for `cfg.condition`, adapt to every held-out
/// room and write the run directory.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let hash = dataset_hash(&cfg.dataset_dir)?;
    let hash_path = out.join("dataset_hash.txt");
    std::fs::write(&hash_path, &hash).map_err(|e| Error::io(&hash_path, e))?;

    let rooms = load_rooms(&cfg.dataset_dir, &cfg.features_dir, cfg)?;
    let (train, test): (Vec<RoomData>, Vec<RoomData>) = rooms.into_iter().partition(|r| r.split == Split::Train);
    let learner = CrnnLearner { cfg: cfg.model.clone() };
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut init_rng = substream(cfg.seed, "init");
    let init = ModelState::init(&cfg.model, &mut init_rng)?;
    let mut logs = Vec::new();
    let every = cfg.checkpoint_every;
    let mut on_epoch = |log: &EpochLog, state: &ModelState| -> Result<()> {
        logs.push(log.clone());
        if (log.epoch + 1) % every == 0 {
            state.save(&cfg.model, &ckpt_dir.join(format!("epoch_{:03}.bin", log.epoch + 1)))?;
        }
        Ok(())
    };
    let (state, steps) = match (cfg.condition, &cfg.pretrained) {
        (Condition::Finetune, Some(path)) => (ModelState::load(&cfg.model, path)?, cfg.meta.inner_steps),
        (Condition::Pretrain | Condition::Finetune, _) => {
            let mut rng = substream(cfg.seed, "pretrain-shuffle");
            let st = pretrain(&learner, &init, &train, &cfg.pretrain, &mut rng, &mut on_epoch)?;
            let steps = if cfg.condition == Condition::Pretrain { 0 } else { cfg.meta.inner_steps };
            (st, steps)
        }
        (Condition::Meta, _) => {
            let mut rng = substream(cfg.seed, "task-sampling");
            let st = meta_train(&learner, &init, &train, &cfg.meta, cfg.workers, &mut rng, &mut on_epoch)?;
            (st, cfg.meta.inner_steps)
        }
    };
    write_log(&out.join("log.csv"), &logs)?;
    state.save(&cfg.model, &out.join("final.bin"))?;

    let pred_dir = out.join("predictions");
    create_dir(&pred_dir)?;
    let mut accs = Vec::new();
    let mut adapt_csv = String::from("room,query_loss_before,query_loss_after\n");
    for room in &test {
        let ev = evaluate_room(&learner, &state, room, cfg.meta.k_support, cfg.meta.inner_lr, steps)?;
        for (id, ann) in &ev.predictions {
            ann.save(&pred_dir.join(format!("{id}.csv")))?;
        }
        adapt_csv.push_str(&format!("{},{:.8},{:.8}\n", ev.room_id, ev.query_loss_before, ev.query_loss_after));
        accs.push((ev.room_id.clone(), ev.accumulator));
    }
    let p = out.join("adaptation.csv");
    std::fs::write(&p, adapt_csv).map_err(|e| Error::io(&p, e))?;
    let rows = room_table(&accs)?;
    save_metrics(&out.join("metrics.csv"), &rows)?;
    Ok(RunSummary { out_dir: out, rows })
}

pub fn save_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(rows, std::io::BufWriter::new(f))
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics_csv(f, path)
}

/// Score per-segment prediction files (`<clip>_segNN.csv`, frames relative
/// to the segment) against clip annotations; one row per room plus Overall.
pub fn evaluate_dirs(refs: &Path, preds: &Path, manifest: &Path) -> Result<Vec<MetricsRow>> {
    let rows: Vec<ManifestRow> = csv::Reader::from_path(manifest)
        .map_err(|e| Error::format(manifest, e.to_string()))?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(manifest, e.to_string()))?;
    let room_of: BTreeMap<&str, &str> = rows.iter().map(|r| (r.clip_id.as_str(), r.room_id.as_str())).collect();
    let mut files: Vec<PathBuf> = std::fs::read_dir(preds)
        .map_err(|e| Error::io(preds, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut accs: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut ref_cache: BTreeMap<String, Annotation> = BTreeMap::new();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (clip, seg) = stem
            .rsplit_once("_seg")
            .and_then(|(c, s)| s.parse::<usize>().ok().map(|s| (c.to_string(), s)))
            .ok_or_else(|| Error::format(f, "prediction file name must be <clip>_segNN.csv"))?;
        let room = *room_of
            .get(clip.as_str())
            .ok_or_else(|| Error::format(f, format!("clip `{clip}` not in manifest")))?;
        if !ref_cache.contains_key(&clip) {
            ref_cache.insert(clip.clone(), Annotation::load(&refs.join(format!("{clip}.csv")))?);
        }
        let reference = ref_cache[&clip].window(seg * SEGMENT_LABEL_FRAMES, (seg + 1) * SEGMENT_LABEL_FRAMES);
        let pred = Annotation::load(f)?;
        accs.entry(room.to_string())
            .or_insert_with(|| Accumulator::new(crate::synth::N_CLASSES))
            .push_annotations(&reference, &pred)?;
    }
    let list: Vec<(String, Accumulator)> = accs.into_iter().collect();
    room_table(&list)
}

/// Metadata and metrics of one finished run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub condition: Condition,
    pub dataset_hash: String,
    pub rows: Vec<MetricsRow>,
    pub curve: Vec<(usize, f64)>,
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let hp = dir.join("dataset_hash.txt");
    let dataset_hash = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?.trim().to_string();
    let rows = load_metrics(&dir.join("metrics.csv"))?;
    let log = dir.join("log.csv");
    let mut curve = Vec::new();
    if let Ok(text) = std::fs::read_to_string(&log) {
        for line in text.lines().skip(1) {
            let mut it = line.split(',');
            if let (Some(e), Some(_), Some(l)) = (it.next(), it.next(), it.next()) {
                if let (Ok(e), Ok(l)) = (e.parse(), l.parse()) {
                    curve.push((e, l));
                }
            }
        }
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        condition: cfg.condition,
        dataset_hash,
        rows,
        curve,
    })
}

pub const METRIC_COLUMNS: [&str; 5] = ["er20", "f20", "le_cd", "lr_cd", "e_seld"];

/// Per-room × per-condition table; refuses runs over different datasets.
pub fn merge_runs(runs: &[RunRecord]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let first = runs.first().ok_or_else(|| Error::Invalid("report needs at least one run".into()))?;
    for r in runs {
        if r.dataset_hash != first.dataset_hash {
            return Err(Error::DatasetMismatch(format!(
                "{} was run on dataset {}, {} on {}",
                first.dir.display(),
                first.dataset_hash,
                r.dir.display(),
                r.dataset_hash
            )));
        }
    }
    let mut header = vec!["room".to_string()];
    for r in runs {
        for c in METRIC_COLUMNS {
            header.push(format!("{}_{c}", r.condition.as_str()));
        }
    }
    let mut rooms: Vec<String> = Vec::new();
    for r in runs {
        for row in &r.rows {
            if !rooms.contains(&row.room) {
                rooms.push(row.room.clone());
            }
        }
    }
    // keep Overall last
    rooms.sort_by_key(|r| (r == "Overall", r.clone()));
    let mut table = Vec::new();
    for room in &rooms {
        let mut line = vec![room.clone()];
        for r in runs {
            match r.rows.iter().find(|x| &x.room == room) {
                Some(m) => line.extend([m.er20, m.f20, m.le_cd, m.lr_cd, m.e_seld].map(|v| format!("{v:.6}"))),
                None => line.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        table.push(line);
    }
    Ok((header, table))
}

/// Write `table.csv` and `curves.svg` for the given runs into `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let runs: Vec<RunRecord> = run_dirs.iter().map(|d| read_run(d)).collect::<Result<_>>()?;
    let (header, table) = merge_runs(&runs)?;
    create_dir(out)?;
    let path = out.join("table.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    for line in &table {
        w.write_record(line).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let curves: Vec<(String, Vec<(usize, f64)>)> =
        runs.iter().map(|r| (r.condition.label().to_string(), r.curve.clone())).collect();
    let svg = out.join("curves.svg");
    plot_curves(&svg, "training loss", &curves)?;
    Ok(path)
}

/// Line plot of loss curves as a standalone SVG.
pub fn plot_curves(path: &Path, title: &str, curves: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    use plotters::prelude::*;
    let pts: Vec<&(usize, f64)> = curves.iter().flat_map(|c| c.1.iter()).collect();
    let xmax = pts.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let ymax = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max).max(1e-12);
    let ymin = pts.iter().map(|p| p.1).fold(f64::MAX, f64::min).min(ymax);
    let err = |e: &dyn std::fmt::Display| Error::format(path, e.to_string());
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..xmax, ymin..ymax * 1.05)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| err(&e))?;
    let palette = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = palette[i % palette.len()];
        chart
            .draw_series(LineSeries::new(c.iter().map(|&(e, l)| (e as f64, l)), color))
            .map_err(|e| err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}

/// Write a report table to any writer (used by the CLI for stdout).
pub fn print_table(header: &[String], table: &[Vec<String>], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for line in table {
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Cached feature tensors of one clip (in segment order).
pub fn load_clip_features(cache: &Path, clip_id: &str) -> Result<Vec<FeatureTensor>> {
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        let p = segment_file(cache, clip_id, s);
        if !p.exists() {
            break;
        }
        out.push(FeatureTensor::load(&p)?);
        s += 1;
    }
    Ok(out)
}
