//! Ablation arms: each is a full train + eval run at desk scale.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use irag_index::AnnIndex;
use serde::{Deserialize, Serialize};

use crate::compress::{KvCodec, KvCompression};
use crate::config::{EncodingStrategy, FrozenMode, ModelConfig};
use crate::data::{Corpus, SynthData, Task};
use crate::error::{CoreError, Result};
use crate::eval::evaluate;
use crate::model::Model;
use crate::trainer::{build_flat_index, train, TrainConfig, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Boundaries,
    Objectives,
    Encoding,
    Frozen,
    Compression,
}

impl Grid {
    pub const ALL: [Grid; 5] = [Grid::Boundaries, Grid::Objectives, Grid::Encoding, Grid::Frozen, Grid::Compression];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Boundaries => "boundaries",
            Grid::Objectives => "objectives",
            Grid::Encoding => "encoding",
            Grid::Frozen => "frozen",
            Grid::Compression => "compression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| CoreError::Config(format!("unknown grid {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionArm {
    None,
    HeavyHitter,
    Pq,
}

/// Overrides applied to the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub boundary_b: Option<usize>,
    pub boundary_t: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub encoding: Option<EncodingStrategy>,
    pub frozen: Option<FrozenMode>,
    pub compression: CompressionArm,
}

impl Arm {
    fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            boundary_b: None,
            boundary_t: None,
            warmup_epochs: None,
            encoding: None,
            frozen: None,
            compression: CompressionArm::None,
        }
    }
}

pub fn arms(grid: Grid, base: &ModelConfig, tc: &TrainConfig) -> Vec<Arm> {
    let total = tc.schedule.total_epochs;
    match grid {
        Grid::Boundaries => {
            let mut out = Vec::new();
            for b in 0..base.boundary_t {
                out.push(Arm { boundary_b: Some(b), ..Arm::named(format!("b={b},t={}", base.boundary_t)) });
            }
            for t in base.boundary_b + 1..base.n_layers - 1 {
                if t != base.boundary_t {
                    out.push(Arm { boundary_t: Some(t), ..Arm::named(format!("b={},t={t}", base.boundary_b)) });
                }
            }
            out
        }
        Grid::Objectives => vec![
            Arm { warmup_epochs: Some(tc.schedule.warmup_epochs), ..Arm::named("warmup+self-distillation") },
            Arm { warmup_epochs: Some(total), ..Arm::named("warmup only") },
            Arm { warmup_epochs: Some(0), ..Arm::named("self-distillation only") },
        ],
        Grid::Encoding => EncodingStrategy::ALL
            .into_iter()
            .map(|e| Arm { encoding: Some(e), ..Arm::named(e.name()) })
            .collect(),
        Grid::Frozen => FrozenMode::ALL.into_iter().map(|f| Arm { frozen: Some(f), ..Arm::named(f.name()) }).collect(),
        Grid::Compression => [
            (CompressionArm::None, "no compression"),
            (CompressionArm::HeavyHitter, "heavy hitter"),
            (CompressionArm::Pq, "product quantization"),
        ]
        .into_iter()
        .map(|(c, n)| Arm { compression: c, ..Arm::named(n) })
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    /// Per task: (exact match, recall@k).
    pub tasks: BTreeMap<String, (f64, f64)>,
    pub dev_em: f64,
    pub compression_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: Grid,
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub runs: Vec<ArmRun>,
}

impl AblationReport {
    /// Mean (exact match, recall@k) of one arm and task over seeds.
    pub fn mean(&self, arm: &str, task: &str) -> Option<(f64, f64)> {
        let vals: Vec<(f64, f64)> =
            self.runs.iter().filter(|r| r.arm == arm).filter_map(|r| r.tasks.get(task).copied()).collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        Some((vals.iter().map(|v| v.0).sum::<f64>() / n, vals.iter().map(|v| v.1).sum::<f64>() / n))
    }

    pub fn mean_dev_em(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.arm == arm).map(|r| r.dev_em).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn arm_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    /// Aligned plain-text table of seed-averaged scores.
    pub fn table(&self) -> String {
        let tasks: Vec<String> = {
            let mut t: Vec<String> = self.runs.iter().flat_map(|r| r.tasks.keys().cloned()).collect();
            t.sort();
            t.dedup();
            t
        };
        let mut header = vec!["arm".to_string(), "dev_em".to_string()];
        for t in &tasks {
            header.push(format!("{t}_em"));
            header.push(format!("{t}_recall@{}", self.k));
        }
        let mut rows = vec![header];
        for arm in self.arm_names() {
            let mut row = vec![arm.clone(), format!("{:.3}", self.mean_dev_em(&arm).unwrap_or(0.0))];
            for t in &tasks {
                let (em, rec) = self.mean(&arm, t).unwrap_or((f64::NAN, f64::NAN));
                row.push(format!("{em:.3}"));
                row.push(format!("{rec:.3}"));
            }
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Number of eval examples per task scored for each arm.
pub fn eval_subset(data: &SynthData, task: Task, n: usize) -> Vec<crate::data::QaRecord> {
    data.eval.iter().filter(|e| e.task == task.name()).take(n).cloned().collect()
}

pub struct AblationInput<'a> {
    pub data: &'a SynthData,
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Eval examples per task (all when `None`).
    pub n_eval: Option<usize>,
}

pub fn run_grid(input: &AblationInput, grid: Grid, mut progress: impl FnMut(&ArmRun)) -> Result<AblationReport> {
    let tok = input.data.tokenizer();
    let corpus = Corpus::new(input.data.corpus.clone(), &tok, input.base.max_passage_len)?;
    let tasks = [Task::Lookup, Task::Shifted];
    let n_eval = input.n_eval.unwrap_or(usize::MAX);
    let evals: Vec<(Task, Vec<crate::data::QaRecord>)> =
        tasks.iter().map(|&t| (t, eval_subset(input.data, t, n_eval))).filter(|(_, e)| !e.is_empty()).collect();
    let k = input.base.retrieval_fanin;
    let arm_list = arms(grid, &input.base, &input.train);
    let mut runs = Vec::new();

    for &seed in &input.seeds {
        // Compression arms share one trained model per seed.
        let mut shared: Option<Model> = None;
        for arm in &arm_list {
            let mut cfg = input.base.clone();
            cfg.boundary_b = arm.boundary_b.unwrap_or(cfg.boundary_b);
            cfg.boundary_t = arm.boundary_t.unwrap_or(cfg.boundary_t);
            cfg.encoding = arm.encoding.unwrap_or(cfg.encoding);
            cfg.frozen = arm.frozen.unwrap_or(cfg.frozen);
            let mut tc = input.train.clone();
            tc.schedule.seed = seed;
            tc.schedule.warmup_epochs = arm.warmup_epochs.unwrap_or(tc.schedule.warmup_epochs);
            tc.dev_size = 0;

            let model = match (&shared, grid) {
                (Some(m), Grid::Compression) => m.clone(),
                _ => {
                    let mut m = Model::new(cfg, tok.clone(), seed)?;
                    let td = TrainData { corpus: &corpus, train: &input.data.train, dev: &[], filler: &input.data.filler };
                    train(&mut m, &td, &tc, None, |_| {})?;
                    if grid == Grid::Compression {
                        shared = Some(m.clone());
                    }
                    m
                }
            };
            let (compression, ratio) = match arm.compression {
                CompressionArm::None => (KvCompression::None, None),
                CompressionArm::HeavyHitter => (KvCompression::HeavyHitter { keep_ratio: 0.5 }, Some(2.0)),
                CompressionArm::Pq => {
                    let codec = train_kv_codec(&model, &corpus, seed)?;
                    let r = codec.ratio();
                    (KvCompression::Pq(codec), Some(r))
                }
            };
            let index = AnnIndex::Flat(build_flat_index(&model, &corpus)?);
            let mut task_scores = BTreeMap::new();
            for (t, ex) in &evals {
                let r = evaluate(&model, &corpus, ex, &index, k, &compression)?;
                task_scores.insert(t.name().to_string(), (r.exact_match, r.recall_at_k));
            }
            let dev_em = task_scores.get(Task::Lookup.name()).map_or(0.0, |s| s.0);
            let run = ArmRun { arm: arm.name.clone(), seed, tasks: task_scores, dev_em, compression_ratio: ratio };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport {
        grid,
        base: input.base.clone(),
        train: input.train.clone(),
        seeds: input.seeds.clone(),
        k,
        runs,
    })
}

/// KV codec trained on the corpus passages encoded one at a time
/// (per-head vectors, 2 sub-quantizers of 8 bits).
pub fn train_kv_codec(model: &Model, corpus: &Corpus, seed: u64) -> Result<KvCodec> {
    let cfg = &model.config;
    let samples = corpus
        .passages()
        .into_iter()
        .map(|p| model.encode_passages(&[p], cfg.encoding, cfg.frozen))
        .collect::<Result<Vec<_>>>()?;
    KvCodec::train(cfg, &samples, 2, 8, seed)
}
