//! Desk-scale comparison of the three conditions over a seed grid.
//!
//! Everything stays in memory. The dataset is drawn once from
//! `dataset.dataset_seed`; each grid seed drives initialization, pre-training
//! shuffles and meta-task sampling. Pre-training and meta-training get the
//! same number of optimizer updates and the same number of loss segments per
//! update (`pretrain.batch_size == rooms_per_batch * q_query`).

use serde::{Deserialize, Serialize};

use crate::config::{Condition, DatasetConfig};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_room, meta_train, pretrain, synth_room, CrnnLearner, RoomData};
use crate::meta::{MetaConfig, PretrainConfig};
use crate::metrics::{room_table, MetricsRow};
use crate::model::{ModelConfig, ModelState};
use crate::rng::substream;
use crate::synth::{default_rooms, SceneConfig, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
    /// Support segments per held-out room at test time.
    pub k_test: usize,
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seeds: vec![0, 1, 2],
            dataset: DatasetConfig {
                n_train_rooms: 9,
                n_test_rooms: 7,
                clips_per_room: 20,
                dataset_seed: 2024,
                scene: SceneConfig {
                    clip_seconds: 20.0,
                    events_min: 10,
                    events_max: 16,
                    ..Default::default()
                },
            },
            model: ModelConfig {
                channels: vec![4, 8, 8, 16],
                gru_hidden: 16,
                ..Default::default()
            },
            meta: MetaConfig {
                rooms_per_batch: 4,
                samples_per_room: 12,
                k_support: 4,
                q_query: 8,
                meta_lr: 3e-3,
                epochs: 33,
                steps_per_epoch: 16,
                lr_decay_start: 22,
                lr_decay_every: 4,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 23,
                switch_epoch: 18,
                lr: 3e-3,
                lr_after: 3e-4,
                batch_size: 32,
                ..Default::default()
            },
            k_test: 30,
            workers: 1,
        }
    }
}

/// Per-seed outcome: metrics rows (rooms + Overall) for each condition.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub tables: Vec<(Condition, Vec<MetricsRow>)>,
}

impl SeedResult {
    pub fn rows(&self, cond: Condition) -> &[MetricsRow] {
        self.tables.iter().find(|t| t.0 == cond).map(|t| t.1.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub seeds: Vec<SeedResult>,
    /// Seed-mean Overall E_SELD per condition.
    pub overall: Vec<(Condition, f64)>,
    /// Seed-mean E_SELD per held-out room: `(room, pretrain, finetune, meta)`.
    pub rooms: Vec<(String, f64, f64, f64)>,
}

impl StudySummary {
    pub fn overall_of(&self, cond: Condition) -> f64 {
        self.overall.iter().find(|o| o.0 == cond).map_or(f64::NAN, |o| o.1)
    }

    /// Held-out rooms where Meta has strictly lower mean E_SELD than Fine-tune.
    pub fn meta_wins(&self) -> usize {
        self.rooms.iter().filter(|r| r.3 < r.2).count()
    }

    /// `Meta ≤ Fine-tune ≤ Pre-train` on mean Overall E_SELD.
    pub fn ordering_holds(&self) -> bool {
        let (p, f, m) = (
            self.overall_of(Condition::Pretrain),
            self.overall_of(Condition::Finetune),
            self.overall_of(Condition::Meta),
        );
        m <= f && f <= p
    }
}

/// Build the in-memory dataset shared by every seed.
pub fn build_rooms(cfg: &StudyConfig) -> Result<Vec<RoomData>> {
    let d = &cfg.dataset;
    default_rooms(d.dataset_seed, d.n_train_rooms, d.n_test_rooms)
        .iter()
        .map(|e| synth_room(e, d.clips_per_room, &d.scene, d.dataset_seed, &cfg.model))
        .collect()
}

pub fn run_seed(cfg: &StudyConfig, rooms: &[RoomData], seed: u64, log: &mut dyn FnMut(&str)) -> Result<SeedResult> {
    let train: Vec<RoomData> = rooms.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let test: Vec<&RoomData> = rooms.iter().filter(|r| r.split == Split::Test).collect();
    let learner = CrnnLearner { cfg: cfg.model.clone() };
    let init = ModelState::init(&cfg.model, &mut substream(seed, "init"))?;

    let mut quiet = |l: &crate::experiment::EpochLog, _: &ModelState| -> Result<()> {
        log(&format!("seed {seed} epoch {} lr {:.2e} loss {:.5}", l.epoch, l.lr, l.loss));
        Ok(())
    };
    let pre = pretrain(&learner, &init, &train, &cfg.pretrain, &mut substream(seed, "pretrain-shuffle"), &mut quiet)?;
    let meta = meta_train(
        &learner,
        &init,
        &train,
        &cfg.meta,
        cfg.workers,
        &mut substream(seed, "task-sampling"),
        &mut quiet,
    )?;

    let mut tables = Vec::new();
    for cond in Condition::ALL {
        let (state, steps) = match cond {
            Condition::Pretrain => (&pre, 0),
            Condition::Finetune => (&pre, cfg.meta.inner_steps),
            Condition::Meta => (&meta, cfg.meta.inner_steps),
        };
        let mut accs = Vec::new();
        for room in &test {
            let ev = evaluate_room(&learner, state, room, cfg.k_test, cfg.meta.inner_lr, steps)?;
            accs.push((ev.room_id, ev.accumulator));
        }
        let rows = room_table(&accs)?;
        if let Some(o) = rows.last() {
            log(&format!("seed {seed} {} overall E_SELD {:.4}", cond.label(), o.e_seld));
        }
        tables.push((cond, rows));
    }
    Ok(SeedResult { seed, tables })
}

pub fn summarize(seeds: Vec<SeedResult>) -> Result<StudySummary> {
    let first = seeds.first().ok_or_else(|| Error::Config("empty seed grid".into()))?;
    let n = seeds.len() as f64;
    let mean = |cond: Condition, room: &str| -> f64 {
        seeds
            .iter()
            .map(|s| s.rows(cond).iter().find(|r| r.room == room).map_or(f64::NAN, |r| r.e_seld))
            .sum::<f64>()
            / n
    };
    let overall = Condition::ALL.iter().map(|&c| (c, mean(c, "Overall"))).collect();
    let rooms = first
        .rows(Condition::Meta)
        .iter()
        .filter(|r| r.room != "Overall")
        .map(|r| {
            let id = r.room.as_str();
            (
                r.room.clone(),
                mean(Condition::Pretrain, id),
                mean(Condition::Finetune, id),
                mean(Condition::Meta, id),
            )
        })
        .collect();
    Ok(StudySummary { seeds, overall, rooms })
}

pub fn run(cfg: &StudyConfig, log: &mut dyn FnMut(&str)) -> Result<StudySummary> {
    cfg.meta.validate()?;
    cfg.model.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("empty seed grid".into()));
    }
    let rooms = build_rooms(cfg)?;
    log(&format!(
        "dataset: {} rooms, {} segments",
        rooms.len(),
        rooms.iter().map(|r| r.segments.len()).sum::<usize>()
    ));
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, &rooms, seed, log)?);
    }
    summarize(seeds)
}

/// Summary as CSV: one line per room plus `Overall`, seed-mean E_SELD.
pub fn summary_csv(s: &StudySummary) -> String {
    let mut out = String::from("room,pretrain,finetune,meta\n");
    for (room, p, f, m) in &s.rooms {
        out.push_str(&format!("{room},{p:.6},{f:.6},{m:.6}\n"));
    }
    out.push_str(&format!(
        "Overall,{:.6},{:.6},{:.6}\n",
        s.overall_of(Condition::Pretrain),
        s.overall_of(Condition::Finetune),
        s.overall_of(Condition::Meta)
    ));
    out
}
