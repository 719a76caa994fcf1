// SPDX-License-Identifier: MIT OR Apache-2.0

//! The default desk run end to end: corpus, baseline pretraining,
//! calibration, the fence curriculum, and every measurement.
//!
//! Each stage is a separate function so the CLI can run them one at a time
//! against files on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    clamp_outcome, control_shift, default_probe_layer, erosion_experiment, fence_width_sweep, flag_accuracy,
    perplexity, ControlShiftReport, FlagReport, ProbeConfig, ProbeReport, SteeringConfig, SweepReport, SweepSetup,
};
use crate::checkpoint::{self, CheckpointHeader};
use crate::corpus::{generate_corpus, load_jsonl, save_jsonl, CorpusConfig, LabeledExample, Lexicon, Vocab, SLOT};
use crate::error::{Error, Result};
use crate::fence::{calibrate_targets, ClampMode, ClampSpec, FenceConfig, DEFAULT_CONTROL, DEFAULT_FEATURES};
use crate::model::{Model, ModelConfig};
use crate::training::{encode_corpus, MetricsRecord, Mode, Stage, TrainSchedule, Trainer};

/// Every knob of the desk run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    /// `vocab_size` is overwritten with the built vocabulary's size.
    pub model: ModelConfig,
    pub lexicon: Lexicon,
    pub corpus: CorpusConfig,
    /// Size of the held-out corpus (corpus seed + 1).
    pub heldout_examples: usize,
    /// Size of the probe corpus (corpus seed + 2).
    pub probe_examples: usize,
    /// Fenced features and their widths, in fence order.
    pub fence_features: Vec<(String, usize)>,
    pub control_features: Vec<String>,
    pub alpha: f32,
    /// Training sequences used for target calibration.
    pub calibration_size: usize,
    /// Held-out sequences scored at every evaluation step.
    pub eval_batch: usize,
    /// Plain training that produces the baseline.
    pub pretrain: TrainSchedule,
    /// The fence curriculum, started from the baseline.
    pub curriculum: TrainSchedule,
    /// 0-based; defaults to the middle layer.
    pub probe_layer: Option<usize>,
    pub probe: ProbeConfig,
    pub steering: SteeringConfig,
    /// Clamp `absent` off and `present` on for the forced-absence test.
    pub absence_pair: (String, String),
    /// Prompt asks for the first feature; clamps turn it off and the
    /// second on.
    pub override_pair: (String, String),
    pub sweep_widths: Vec<usize>,
    /// Per-width schedule of the perplexity sweep.
    pub sweep: TrainSchedule,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lexicon: Lexicon::default(),
            corpus: CorpusConfig::default(),
            heldout_examples: 2000,
            probe_examples: 2000,
            fence_features: DEFAULT_FEATURES.iter().map(|(n, w)| ((*n).to_string(), *w)).collect(),
            control_features: vec![DEFAULT_CONTROL.to_string()],
            alpha: 1.0,
            calibration_size: 256,
            eval_batch: 64,
            pretrain: TrainSchedule {
                stage1_steps: 0,
                ramp_steps: 0,
                lr: 1e-3,
                warmup_steps: 100,
                total_steps: 2500,
                seed: 1,
                ..TrainSchedule::default()
            },
            curriculum: TrainSchedule::default(),
            probe_layer: None,
            probe: ProbeConfig::default(),
            steering: SteeringConfig::default(),
            absence_pair: ("dogs".into(), "animals".into()),
            override_pair: ("animals".into(), "food".into()),
            sweep_widths: vec![0, 8, 32, 64],
            sweep: TrainSchedule {
                stage1_steps: 300,
                ramp_steps: 600,
                total_steps: 3000,
                checkpoint_every: 0,
                eval_every: 0,
                ..TrainSchedule::default()
            },
        }
    }
}

impl DeskConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn probe_layer(&self) -> usize {
        self.probe_layer.unwrap_or_else(|| default_probe_layer(self.model.n_layers))
    }

    /// Uncalibrated fence layout.
    pub fn fence_layout(&self) -> Result<FenceConfig> {
        let widths: Vec<(&str, usize)> = self.fence_features.iter().map(|(n, w)| (n.as_str(), *w)).collect();
        let control: Vec<&str> = self.control_features.iter().map(String::as_str).collect();
        let mut f = FenceConfig::top_aligned(self.model.hidden_dim, &widths, &control)?;
        f.alpha = self.alpha;
        f.validate()?;
        Ok(f)
    }

    /// Dialogue prompt naming the first feature of `override_pair`.
    pub fn override_prompt(&self) -> Result<String> {
        let name = &self.override_pair.0;
        let f = self
            .lexicon
            .feature(name)
            .ok_or_else(|| Error::Config(format!("override feature `{name}` is not in the lexicon")))?;
        let template = self
            .lexicon
            .topic_prompts
            .iter()
            .find(|t| t.contains("favorite"))
            .or(self.lexicon.topic_prompts.first())
            .ok_or_else(|| Error::Config("lexicon has no topic prompts".into()))?;
        Ok(template.replacen(SLOT, &f.markers[0], 1))
    }
}

/// Corpora and vocabulary of one run.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub train: Vec<LabeledExample>,
    pub heldout: Vec<LabeledExample>,
    pub probe: Vec<LabeledExample>,
    pub vocab: Vocab,
}

impl DeskData {
    /// Held-out prose passages, the perplexity split.
    pub fn heldout_prose(&self) -> Result<Vec<Vec<usize>>> {
        self.heldout
            .iter()
            .filter(|ex| ex.is_prose())
            .map(|ex| self.vocab.encode(ex).map(|e| e.ids))
            .collect()
    }
}

pub const TRAIN_FILE: &str = "corpus.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const PROBE_FILE: &str = "probe.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

impl DeskData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        save_jsonl(&dir.join(HELDOUT_FILE), &self.heldout)?;
        save_jsonl(&dir.join(PROBE_FILE), &self.probe)?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    /// Reads what [`DeskData::save`] wrote.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_jsonl(&dir.join(TRAIN_FILE))?,
            heldout: load_jsonl(&dir.join(HELDOUT_FILE))?,
            probe: load_jsonl(&dir.join(PROBE_FILE))?,
            vocab: Vocab::load(&dir.join(VOCAB_FILE))?,
        })
    }
}

/// Generates the three corpora and builds the vocabulary on the training
/// split.
pub fn build_data(cfg: &DeskConfig) -> Result<DeskData> {
    let train = generate_corpus(&cfg.lexicon, &cfg.corpus)?;
    let split = |n: usize, offset: u64| {
        generate_corpus(
            &cfg.lexicon,
            &CorpusConfig {
                n_examples: n,
                seed: cfg.corpus.seed.wrapping_add(offset),
                ..cfg.corpus.clone()
            },
        )
    };
    let heldout = split(cfg.heldout_examples, 1)?;
    let probe = split(cfg.probe_examples, 2)?;
    let vocab = Vocab::from_corpus(&train);
    Ok(DeskData {
        train,
        heldout,
        probe,
        vocab,
    })
}

fn model_config(cfg: &DeskConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

/// Plain cross-entropy training from random init.
pub fn pretrain(cfg: &DeskConfig, data: &DeskData, dir: Option<&Path>) -> Result<Model> {
    let model = Model::new(model_config(cfg, &data.vocab))?;
    let max_len = model.config().max_context;
    let train = encode_corpus(&data.train, &data.vocab, None, max_len)?;
    let eval = encode_corpus(eval_slice(cfg, data), &data.vocab, None, max_len)?;
    let mut trainer = Trainer::new(model, None, cfg.pretrain.clone(), &train, &eval, data.vocab.words().to_vec())?;
    if let Some(d) = dir {
        trainer = trainer
            .with_checkpoint_dir(d.join("baseline"))
            .with_metrics_file(&d.join("baseline_metrics.jsonl"))?;
    }
    trainer.run()?;
    Ok(trainer.into_parts().0)
}

fn eval_slice<'a>(cfg: &DeskConfig, data: &'a DeskData) -> &'a [LabeledExample] {
    &data.heldout[..cfg.eval_batch.min(data.heldout.len())]
}

/// Sequences the targets are calibrated on.
pub fn calibration_batch(cfg: &DeskConfig, data: &DeskData) -> Result<Vec<Vec<usize>>> {
    data.train
        .iter()
        .take(cfg.calibration_size)
        .map(|ex| data.vocab.encode(ex).map(|e| e.ids))
        .collect()
}

/// Fence layout with targets calibrated on `baseline`.
pub fn calibrated_fence(cfg: &DeskConfig, baseline: &Model, data: &DeskData) -> Result<FenceConfig> {
    let mut fence = cfg.fence_layout()?;
    fence.targets = calibrate_targets(baseline, &calibration_batch(cfg, data)?, fence.alpha)?;
    Ok(fence)
}

/// Runs the curriculum from `baseline`. Returns the fenced model and its
/// metrics records.
pub fn train_fenced(
    cfg: &DeskConfig,
    baseline: &Model,
    fence: &FenceConfig,
    data: &DeskData,
    dir: Option<&Path>,
) -> Result<(Model, Vec<MetricsRecord>)> {
    let max_len = baseline.config().max_context;
    let train = encode_corpus(&data.train, &data.vocab, Some(fence), max_len)?;
    let eval = encode_corpus(eval_slice(cfg, data), &data.vocab, Some(fence), max_len)?;
    let mut trainer = Trainer::new(
        baseline.clone(),
        Some(fence.clone()),
        cfg.curriculum.clone(),
        &train,
        &eval,
        data.vocab.words().to_vec(),
    )?;
    if let Some(d) = dir {
        trainer = trainer
            .with_checkpoint_dir(d.join("fenced"))
            .with_metrics_file(&d.join("metrics.jsonl"))?;
    }
    trainer.run()?;
    let (model, log) = trainer.into_parts();
    Ok((model, log.records().to_vec()))
}

/// Shape of the evaluation-mode position-loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSummary {
    /// Largest eval position loss before stage 2.
    pub stage1_max: f32,
    /// First eval position loss of stage 2.
    pub stage2_start: f32,
    pub stage2_end: f32,
    pub ce_stage2_start: f32,
    pub ce_end: f32,
    /// Per-layer eval position loss averaged over the last `converged_window`
    /// eval records.
    pub converged_per_layer: Vec<f32>,
    pub converged_window: usize,
}

impl CurriculumSummary {
    pub fn drop_factor(&self) -> f32 {
        self.stage2_start / self.stage2_end.max(f32::MIN_POSITIVE)
    }

    /// Mean converged loss over the first and last ⌈K/4⌉ layers.
    pub fn quarter_means(&self) -> (f32, f32) {
        let k = self.converged_per_layer.len();
        let q = k.div_ceil(4).max(1);
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
        (mean(&self.converged_per_layer[..q]), mean(&self.converged_per_layer[k - q..]))
    }
}

pub fn summarize_curriculum(records: &[MetricsRecord], window: usize) -> Result<CurriculumSummary> {
    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.mode == Mode::Eval).collect();
    let pos = |r: &MetricsRecord| r.position_loss.unwrap_or(f32::NAN);
    let stage1_max = evals
        .iter()
        .filter(|r| r.stage == Stage::Injection)
        .map(|r| pos(r))
        .fold(0.0f32, f32::max);
    let start = evals
        .iter()
        .find(|r| r.stage == Stage::Transfer)
        .ok_or_else(|| Error::Evaluation("no stage-2 evaluation records".into()))?;
    let end = evals.last().expect("nonempty: stage-2 record found");
    let tail = &evals[evals.len().saturating_sub(window.max(1))..];
    let k = end.per_layer.len();
    let converged_per_layer = (0..k)
        .map(|l| tail.iter().map(|r| r.per_layer[l]).sum::<f32>() / tail.len() as f32)
        .collect();
    Ok(CurriculumSummary {
        stage1_max,
        stage2_start: pos(start),
        stage2_end: pos(end),
        ce_stage2_start: start.ce_loss,
        ce_end: end.ce_loss,
        converged_per_layer,
        converged_window: tail.len(),
    })
}

/// Word rates from one clamp test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampTest {
    pub prompt: String,
    pub spec: ClampSpec,
    /// Marker-or-associate rate of the feature that is forced off.
    pub off_rate: f64,
    /// Marker-or-associate rate of the feature that is forced on.
    pub on_rate: f64,
    /// Marker-only rates of the same two features.
    pub off_marker_rate: f64,
    pub on_marker_rate: f64,
    /// A few completions for inspection.
    pub examples: Vec<String>,
}

impl ClampTest {
    /// One line: the clamps, then marker and marker-or-associate rates.
    pub fn render(&self) -> String {
        let name = |m: ClampMode| {
            self.spec
                .modes
                .iter()
                .find(|(_, v)| **v == m)
                .map_or("?", |(k, _)| k.as_str())
        };
        format!(
            "off {}: markers {:.2}, words {:.2}; on {}: markers {:.2}, words {:.2}",
            name(ClampMode::ForceOff),
            self.off_marker_rate,
            self.off_rate,
            name(ClampMode::ForceOn),
            self.on_marker_rate,
            self.on_rate
        )
    }
}

/// Everything measured on a finished desk run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub flags: FlagReport,
    pub curriculum: CurriculumSummary,
    pub steering: ControlShiftReport,
    pub absence: ClampTest,
    pub semantic_override: ClampTest,
    pub erosion: ProbeReport,
    pub baseline_perplexity: f64,
    pub fenced_perplexity: f64,
    pub sweep: Option<SweepReport>,
}

/// Measurements that need only the trained models.
pub fn analyze(
    cfg: &DeskConfig,
    data: &DeskData,
    baseline: &Model,
    fenced: &Model,
    fence: &FenceConfig,
    records: &[MetricsRecord],
) -> Result<DeskReport> {
    let layer = cfg.probe_layer();
    log::info!("analysis: flag readout at layer {layer}");
    let flags = flag_accuracy(fenced, fence, &data.heldout, &data.vocab, layer)?;
    let curriculum = summarize_curriculum(records, 5)?;

    log::info!("analysis: steering");
    let prompts = cfg.lexicon.neutral_prompts.clone();
    let steering = control_shift(fenced, fence, &data.vocab, &cfg.lexicon, &prompts, &cfg.steering)?;
    let pair_test = |prompts: &[String], off: &str, on: &str| -> Result<ClampTest> {
        let spec = ClampSpec::default().force_off(off).force_on(on);
        let out = clamp_outcome(fenced, fence, &data.vocab, &cfg.lexicon, prompts, &spec, &cfg.steering)?;
        Ok(ClampTest {
            prompt: prompts.join(" | "),
            off_rate: out.rate(off),
            on_rate: out.rate(on),
            off_marker_rate: out.marker_rate(off),
            on_marker_rate: out.marker_rate(on),
            examples: out.samples.iter().take(3).cloned().collect(),
            spec,
        })
    };
    let absence = pair_test(&prompts, &cfg.absence_pair.0, &cfg.absence_pair.1)?;
    let semantic_override = pair_test(&[cfg.override_prompt()?], &cfg.override_pair.0, &cfg.override_pair.1)?;

    log::info!("analysis: probes");
    let erosion = erosion_experiment(
        baseline,
        fenced,
        fence,
        &data.probe,
        &data.vocab,
        layer,
        &cfg.probe,
        cfg.corpus.seed,
    )?;
    let prose = data.heldout_prose()?;
    Ok(DeskReport {
        flags,
        curriculum,
        steering,
        absence,
        semantic_override,
        erosion,
        baseline_perplexity: perplexity(baseline, &prose)?,
        fenced_perplexity: perplexity(fenced, &prose)?,
        sweep: None,
    })
}

/// Fence-width sweep from `baseline` with the sweep schedule.
pub fn run_sweep(cfg: &DeskConfig, data: &DeskData, baseline: &Model) -> Result<SweepReport> {
    let names: Vec<&str> = cfg.fence_features.iter().map(|(n, _)| n.as_str()).collect();
    let control: Vec<&str> = cfg.control_features.iter().map(String::as_str).collect();
    let calibration = calibration_batch(cfg, data)?;
    let prose: Vec<LabeledExample> = data.heldout.iter().filter(|ex| ex.is_prose()).cloned().collect();
    let setup = SweepSetup {
        baseline,
        vocab: &data.vocab,
        train: &data.train,
        heldout: &prose,
        features: &names,
        control: &control,
        schedule: cfg.sweep.clone(),
        alpha: cfg.alpha,
        normalization: cfg.fence_layout()?.normalization,
        calibration: &calibration,
        eval_batch: cfg.eval_batch,
    };
    fence_width_sweep(&setup, &cfg.sweep_widths)
}

/// Writes a checkpoint with no optimizer state.
pub fn save_model(path: &Path, model: &Model, fence: Option<&FenceConfig>, vocab: &Vocab, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config().clone(),
        fence: fence.cloned(),
        vocab: vocab.words().to_vec(),
        schedule_fingerprint: None,
        seed: model.config().seed,
        step,
    };
    checkpoint::save(path, &header, model, None)
}

/// The whole desk run. With `dir`, corpora, checkpoints, metrics and the
/// report are written there.
pub fn run_desk(cfg: &DeskConfig, dir: Option<&Path>, with_sweep: bool) -> Result<DeskReport> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        cfg.save(&d.join("desk_config.json"))?;
    }
    let data = build_data(cfg)?;
    if let Some(d) = dir {
        data.save(d)?;
    }
    log::info!("pretraining baseline ({} steps)", cfg.pretrain.total_steps);
    let baseline = pretrain(cfg, &data, dir)?;
    let fence = calibrated_fence(cfg, &baseline, &data)?;
    log::info!("targets {:?}", fence.targets);
    if let Some(d) = dir {
        fence.save(&d.join("fence.json"))?;
    }
    log::info!("fence curriculum ({} steps)", cfg.curriculum.total_steps);
    let (fenced, records) = train_fenced(cfg, &baseline, &fence, &data, dir)?;
    let mut report = analyze(cfg, &data, &baseline, &fenced, &fence, &records)?;
    let save = |r: &DeskReport| -> Result<()> {
        if let Some(d) = dir {
            std::fs::write(d.join("report.json"), serde_json::to_string_pretty(r)?)?;
        }
        Ok(())
    };
    // saved before the sweep too, so a failed sweep keeps the analysis
    save(&report)?;
    if with_sweep {
        report.sweep = Some(run_sweep(cfg, &data, &baseline)?);
        save(&report)?;
    }
    Ok(report)
}
