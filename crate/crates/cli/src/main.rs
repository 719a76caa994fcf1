// SPDX-License-Identifier: MIT OR Apache-2.0

//! `fencebench`: every pipeline stage as a subcommand.
//!
//! Settings resolve as flag > `FENCEBENCH_*` environment variable > config
//! file (`--config`, a desk config JSON) > built-in default.

mod args;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use fencebench_client::{Clamp, Client, GenerateRequest, GenerateResponse, TraceRequest, TraceResponse};
use fencebench_core::analysis::{erosion_experiment, SweepReport};
use fencebench_core::checkpoint;
use fencebench_core::corpus::llm::{llm_generate_corpus, LlmClient, LlmConfig};
use fencebench_core::corpus::{load_jsonl, save_jsonl, Vocab};
use fencebench_core::fence::{calibrate_targets, FenceConfig};
use fencebench_core::pipeline::{self, DeskConfig, DeskData};
use fencebench_core::training::{encode_corpus, MetricsLog, TrainSchedule, Trainer, CHECKPOINT_NAME};
use fencebench_service::Engine;

use args::{Cli, Cmd, ScheduleArgs, Target};

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(if cli.quiet { "warn" } else { "info" })),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fencebench: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DeskConfig> {
    match path {
        Some(p) => DeskConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(DeskConfig::default()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::InitConfig { out } => write_json(&out, &cfg),
        Cmd::GenCorpus { seed, out, llm, llm_examples } => gen_corpus(cfg, seed, &out, llm, llm_examples),
        Cmd::Calibrate { ckpt, corpus, fence, out } => calibrate(&cfg, &ckpt, &corpus, fence.as_deref(), &out),
        Cmd::Train {
            data,
            baseline,
            fence,
            out,
            resume,
            schedule,
        } => train(cfg, data.as_deref(), baseline.as_deref(), fence.as_deref(), &out, resume, &schedule),
        Cmd::Trace { target, text, clamp } => {
            let req = TraceRequest {
                text,
                clamps: parse_clamps(&clamp)?,
            };
            let resp: TraceResponse = match target.resolve()? {
                Backend::Remote(c) => c.trace(&req)?,
                Backend::Local(e) => e.trace(&req)?,
            };
            print_json(&resp)
        }
        Cmd::Generate {
            target,
            prompt,
            clamp,
            max_tokens,
            temperature,
            seed,
            json,
        } => {
            let req = GenerateRequest {
                prompt,
                clamps: parse_clamps(&clamp)?,
                max_tokens,
                temperature,
                seed,
                include_trace: false,
            };
            let resp: GenerateResponse = match target.resolve()? {
                Backend::Remote(c) => c.generate(&req)?,
                Backend::Local(e) => e.generate(&req)?,
            };
            if json {
                print_json(&resp)
            } else {
                println!("{}", resp.text);
                Ok(())
            }
        }
        Cmd::Probe {
            baseline,
            fenced,
            corpus,
            fence,
            layer,
            seed,
        } => probe(&cfg, &baseline, &fenced, &corpus, fence.as_deref(), layer, seed),
        Cmd::PplSweep {
            widths,
            data,
            baseline,
            steps,
            out,
        } => ppl_sweep(cfg, widths, data.as_deref(), baseline.as_deref(), steps, out.as_deref()),
        Cmd::Serve { ckpt, addr, cors_origin } => serve(&ckpt, addr, cors_origin.as_deref()),
        Cmd::Report {
            data,
            baseline,
            fenced,
            out,
        } => report(&cfg, &data, &baseline, &fenced, out.as_deref()),
        Cmd::Pipeline { out, sweep, schedule } => {
            let mut cfg = cfg;
            schedule.apply(&mut cfg.curriculum);
            let report = pipeline::run_desk(&cfg, Some(&out), sweep)?;
            eprintln!("{}", report.steering.render());
            eprintln!("absence:  {}", report.absence.render());
            eprintln!("override: {}", report.semantic_override.render());
            eprintln!("{}", report.erosion.render());
            if let Some(s) = &report.sweep {
                eprintln!("{}", s.render());
            }
            print_json(&report)
        }
    }
}

fn gen_corpus(mut cfg: DeskConfig, seed: Option<u64>, out: &Path, llm: bool, llm_examples: usize) -> Result<()> {
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let data = pipeline::build_data(&cfg)?;
    data.save(out)?;
    if llm {
        let client = LlmClient::new(LlmConfig::from_env()?)?;
        let extra = llm_generate_corpus(&client, &cfg.lexicon, &cfg.corpus, llm_examples)?;
        save_jsonl(&out.join("llm.jsonl"), &extra)?;
        eprintln!("wrote {} llm examples", extra.len());
    }
    eprintln!(
        "wrote {} train, {} held-out, {} probe examples and {} vocabulary words to {}",
        data.train.len(),
        data.heldout.len(),
        data.probe.len(),
        data.vocab.len(),
        out.display()
    );
    Ok(())
}

fn load_fence(path: Option<&Path>, cfg: &DeskConfig) -> Result<FenceConfig> {
    match path {
        Some(p) => FenceConfig::load(p).with_context(|| format!("reading fence config {}", p.display())),
        None => Ok(cfg.fence_layout()?),
    }
}

fn calibrate(cfg: &DeskConfig, ckpt: &Path, corpus: &Path, fence: Option<&Path>, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let vocab = Vocab::from_words(ck.header.vocab)?;
    let examples = load_jsonl(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let batch = examples
        .iter()
        .take(cfg.calibration_size)
        .map(|ex| vocab.encode(ex).map(|e| e.ids))
        .collect::<fencebench_core::Result<Vec<_>>>()?;
    let mut fence = load_fence(fence, cfg)?;
    fence.targets = calibrate_targets(&ck.model, &batch, fence.alpha)?;
    fence.save(out)?;
    eprintln!("targets {:?} written to {}", fence.targets, out.display());
    Ok(())
}

fn data_or_generate(cfg: &DeskConfig, dir: Option<&Path>) -> Result<DeskData> {
    match dir {
        Some(d) => DeskData::load(d).with_context(|| format!("reading corpus files in {}", d.display())),
        None => Ok(pipeline::build_data(cfg)?),
    }
}

fn train(
    mut cfg: DeskConfig,
    data: Option<&Path>,
    baseline: Option<&Path>,
    fence: Option<&Path>,
    out: &Path,
    resume: bool,
    schedule: &ScheduleArgs,
) -> Result<()> {
    schedule.apply(&mut cfg.curriculum);
    cfg.curriculum.validate()?;
    let data = data_or_generate(&cfg, data)?;
    std::fs::create_dir_all(out)?;
    let max_len = cfg.model.max_context;
    if resume {
        let path = out.join("fenced").join(CHECKPOINT_NAME);
        let ck = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let f = ck.header.fence.clone();
        let train = encode_corpus(&data.train, &data.vocab, f.as_ref(), max_len)?;
        let eval = encode_corpus(&data.heldout[..cfg.eval_batch.min(data.heldout.len())], &data.vocab, f.as_ref(), max_len)?;
        let mut t = Trainer::resume(ck, cfg.curriculum.clone(), &train, &eval)?
            .with_checkpoint_dir(out.join("fenced"))
            .with_metrics_file(&out.join("metrics.jsonl"))?;
        t.run()?;
        eprintln!("resumed run finished at step {}", t.step());
        return Ok(());
    }
    let base = match baseline {
        Some(p) => {
            let ck = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.header.vocab != data.vocab.words() {
                bail!("baseline {} was trained with a different vocabulary", p.display());
            }
            ck.model
        }
        None => {
            pipeline::pretrain(&cfg, &data, Some(out))?
        }
    };
    let mut f = load_fence(fence, &cfg)?;
    if !f.is_calibrated() {
        f.targets = calibrate_targets(&base, &pipeline::calibration_batch(&cfg, &data)?, f.alpha)?;
    }
    f.save(&out.join("fence.json"))?;
    let (_, records) = pipeline::train_fenced(&cfg, &base, &f, &data, Some(out))?;
    let summary = pipeline::summarize_curriculum(&records, 5)?;
    print_json(&summary)
}

fn load_ckpt(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn report(cfg: &DeskConfig, data: &Path, baseline: &Path, fenced: &Path, out: Option<&Path>) -> Result<()> {
    let data = DeskData::load(data).with_context(|| format!("reading corpus files in {}", data.display()))?;
    let base = load_ckpt(baseline)?;
    let fenced_ck = load_ckpt(fenced)?;
    let fence = fenced_ck
        .header
        .fence
        .clone()
        .with_context(|| format!("{} carries no fence", fenced.display()))?;
    let metrics = fenced.parent().and_then(Path::parent).map(|d| d.join("metrics.jsonl"));
    let records = match metrics {
        Some(m) if m.exists() => MetricsLog::load(&m)?,
        _ => bail!("no metrics.jsonl next to the fenced checkpoint's run directory"),
    };
    let report = pipeline::analyze(cfg, &data, &base.model, &fenced_ck.model, &fence, &records)?;
    if let Some(o) = out {
        write_json(o, &report)?;
    }
    eprintln!("{}", report.steering.render());
    eprintln!("absence:  {}", report.absence.render());
    eprintln!("override: {}", report.semantic_override.render());
    eprintln!("{}", report.erosion.render());
    print_json(&report)
}

fn probe(
    cfg: &DeskConfig,
    baseline: &Path,
    fenced: &Path,
    corpus: &Path,
    fence: Option<&Path>,
    layer: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let b = checkpoint::load(baseline).with_context(|| format!("loading {}", baseline.display()))?;
    let f = checkpoint::load(fenced).with_context(|| format!("loading {}", fenced.display()))?;
    let ckpt_fence = f
        .header
        .fence
        .clone()
        .ok_or_else(|| anyhow!("{} carries no fence config", fenced.display()))?;
    let fence_cfg = match fence {
        Some(p) => {
            let given = FenceConfig::load(p).with_context(|| format!("reading fence config {}", p.display()))?;
            if given.features != ckpt_fence.features || given.control_features != ckpt_fence.control_features {
                bail!(
                    "fence config {} ({}) does not match the fence in {} ({})",
                    p.display(),
                    describe(&given),
                    fenced.display(),
                    describe(&ckpt_fence)
                );
            }
            given
        }
        None => ckpt_fence,
    };
    if let Some(bf) = &b.header.fence {
        if bf.features != fence_cfg.features {
            bail!(
                "baseline {} carries fence ({}) but {} carries ({})",
                baseline.display(),
                describe(bf),
                fenced.display(),
                describe(&fence_cfg)
            );
        }
    }
    if b.header.vocab != f.header.vocab {
        bail!("{} and {} use different vocabularies", baseline.display(), fenced.display());
    }
    let vocab = Vocab::from_words(f.header.vocab)?;
    let examples = load_jsonl(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let report = erosion_experiment(
        &b.model,
        &f.model,
        &fence_cfg,
        &examples,
        &vocab,
        layer.unwrap_or_else(|| cfg.probe_layer()),
        &cfg.probe,
        seed.unwrap_or(cfg.corpus.seed),
    )?;
    eprintln!("{}", report.render());
    print_json(&report)
}

fn describe(f: &FenceConfig) -> String {
    f.features
        .iter()
        .map(|x| format!("{}[{}..{}]", x.name, x.start, x.end))
        .collect::<Vec<_>>()
        .join(", ")
}

fn ppl_sweep(
    mut cfg: DeskConfig,
    widths: Option<Vec<usize>>,
    data: Option<&Path>,
    baseline: Option<&Path>,
    steps: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(w) = widths {
        cfg.sweep_widths = w;
    }
    if let Some(s) = steps {
        cfg.sweep.total_steps = s;
    }
    let data = data_or_generate(&cfg, data)?;
    let base = match baseline {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.model,
        None => pipeline::pretrain(&cfg, &data, None)?,
    };
    let report: SweepReport = pipeline::run_sweep(&cfg, &data, &base)?;
    eprintln!("{}", report.render());
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    print_json(&report)
}

fn serve(ckpt: &Path, addr: SocketAddr, cors_origin: Option<&str>) -> Result<()> {
    let engine = Engine::from_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(fencebench_service::serve(engine, addr, cors_origin))?;
    Ok(())
}

enum Backend {
    Remote(Client),
    Local(Box<Engine>),
}

impl Target {
    fn resolve(&self) -> Result<Backend> {
        match (&self.server, &self.ckpt) {
            (Some(url), _) => Ok(Backend::Remote(Client::new(url.clone())?)),
            (None, Some(p)) => Ok(Backend::Local(Box::new(
                Engine::from_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
            ))),
            (None, None) => bail!("pass --ckpt or --server (FENCEBENCH_SERVER)"),
        }
    }
}

/// Parses `feature=on|off|auto` pairs.
fn parse_clamps(pairs: &[String]) -> Result<BTreeMap<String, Clamp>> {
    pairs
        .iter()
        .map(|p| {
            let (name, mode) = p
                .split_once('=')
                .ok_or_else(|| anyhow!("clamp `{p}` must look like feature=on|off|auto"))?;
            let mode = match mode {
                "on" => Clamp::On,
                "off" => Clamp::Off,
                "auto" => Clamp::Auto,
                other => bail!("clamp mode `{other}` must be on, off or auto"),
            };
            Ok((name.to_string(), mode))
        })
        .collect()
}

impl ScheduleArgs {
    fn apply(&self, s: &mut TrainSchedule) {
        if let Some(v) = self.steps {
            s.total_steps = v;
        }
        if let Some(v) = self.stage1_steps {
            s.stage1_steps = v;
        }
        if let Some(v) = self.ramp_steps {
            s.ramp_steps = v;
        }
        if let Some(v) = self.lambda_max {
            s.lambda_max = v;
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.warmup_steps {
            s.warmup_steps = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.checkpoint_every {
            s.checkpoint_every = v;
        }
        if let Some(v) = self.eval_every {
            s.eval_every = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_pairs() {
        let c = parse_clamps(&["dogs=on".into(), "food=off".into()]).unwrap();
        assert_eq!(c["dogs"], Clamp::On);
        assert_eq!(c["food"], Clamp::Off);
        assert!(parse_clamps(&["dogs".into()]).is_err());
        assert!(parse_clamps(&["dogs=maybe".into()]).is_err());
    }
}
