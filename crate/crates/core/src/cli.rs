//! Command-line entry points tying generation, training, inference,
//! evaluation, and reporting into reproducible experiment runs.
//!
//! Exit codes (stable contract): 0 success, 1 usage error, 2 data error,
//! 3 missing artifact.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::nli::backend_from_spec;
use crate::eval::report::{aggregate_report, write_report_files};
use crate::manifest::ExperimentManifest;
use crate::pipeline::{
    pretrain_backbone, save_transcripts, stage_questions, train_adapter_flat, train_phase,
    ChainMode, ChainTranscript, Pipeline, TrainPhaseConfig,
};
use crate::projector::{read_telemetry, TelemetryLog};
use crate::scene::{generate_dataset, load_jsonl, save_jsonl, SceneRecord};
use crate::stage::StageId;

pub const ENV_OUT_DIR: &str = "GVQA_OUT_DIR";
pub const ENV_NLI_URL: &str = "GVQA_NLI_URL";

const BACKBONE_DIR: &str = "backbone";
const PROJECTORS_DIR: &str = "projectors";

#[derive(Parser)]
#[command(
    name = "gvqa",
    version,
    about = "Three-stage driving-scene QA: synthetic data, chained training/inference, consistency evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic scene dataset (train/val JSONL files)
    GenData(GenDataArgs),
    /// Language-model warm-up of the base weights on the task corpus
    Pretrain(PretrainArgs),
    /// Train one stage's flat-baseline adapter
    Baseline(BaselineArgs),
    /// Two-phase sequential training (adapter + gated projector)
    Train(TrainArgs),
    /// Run chained inference in one mode over the validation split
    Infer(InferArgs),
    /// Run every requested mode over the same validation scenes
    RunMatrix(RunMatrixArgs),
    /// Score transcripts and emit the consistency report
    Eval(EvalArgs),
    /// Convert training telemetry JSONL to a plot-ready CSV
    Telemetry(TelemetryArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of scenes (>= 10)
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Dataset directory from gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory receiving checkpoints
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct BaselineArgs {
    /// Stage to train: perception|prediction|planning (perc/pred/plan ok)
    #[arg(long)]
    pub stage: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training phase: 1 (Prediction + W1,g1) or 2 (Planning + W2,g2)
    #[arg(long)]
    pub phase: u8,
    /// Phase 2: also train the perception-to-planning skip projector
    #[arg(long)]
    pub skip: bool,
    /// Phase 2: initialize the projector from the phase-1 weights
    #[arg(long)]
    pub transfer: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// TOML config file; flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args)]
pub struct InferArgs {
    /// flat | history | injection | latent | latent_skip
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output transcript JSONL file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to the adversarial validation slice
    #[arg(long)]
    pub adversarial_only: bool,
}

#[derive(Args)]
pub struct RunMatrixArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated mode list
    #[arg(long, default_value = "flat,history,injection,latent")]
    pub modes: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub adversarial_only: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Transcript JSONL files, or directories scanned for *.jsonl
    #[arg(long, required = true, num_args = 1..)]
    pub transcripts: Vec<PathBuf>,
    /// "heuristic" or an http(s) base URL
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub bootstrap_seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TelemetryArgs {
    /// Telemetry JSONL file written during training
    #[arg(long)]
    pub log: PathBuf,
    /// Output CSV path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// TOML training config; every field optional, flags take precedence.
#[derive(Debug, Default, Deserialize)]
pub struct FileConfig {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub projector_lr_mult: Option<f64>,
    pub gate_lr_mult: Option<f64>,
}

fn load_file_config(path: &Path) -> Result<FileConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "config file {}",
            path.display()
        )));
    }
    toml::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn apply_file_config(cfg: &mut TrainPhaseConfig, f: &FileConfig) {
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = f.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = f.warmup_frac {
        cfg.warmup_frac = v;
    }
    if let Some(v) = f.projector_lr_mult {
        cfg.projector_lr_mult = v;
    }
    if let Some(v) = f.gate_lr_mult {
        cfg.gate_lr_mult = v;
    }
}

fn resolve_out(flag: Option<PathBuf>, purpose: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var(ENV_OUT_DIR) {
        return Ok(PathBuf::from(env));
    }
    Err(Error::Usage(format!(
        "no output path for {purpose}: pass --out or set {ENV_OUT_DIR}"
    )))
}

fn load_split(data_dir: &Path, split: &str) -> Result<Vec<SceneRecord>> {
    load_jsonl(&data_dir.join(format!("{split}.jsonl")))
}

fn adapter_dir(stage: StageId) -> String {
    format!("adapter_{}", stage.name())
}

/// Persist one named component of the pipeline into the run directory and
/// record its payload hash on the pipeline.
fn save_component(
    pl: &mut Pipeline,
    run_dir: &Path,
    name: &str,
    entries: &[(String, crate::tensor::Tensor)],
    meta: serde_json::Value,
) -> Result<String> {
    let hash = checkpoint::save(&run_dir.join(name), entries, meta)?;
    pl.checkpoint_hashes.insert(name.to_string(), hash.clone());
    Ok(hash)
}

/// Rebuild a pipeline from a master seed, overlaying whatever trained
/// components exist in the run directory. Returns the set of component
/// names that were actually loaded.
pub fn load_run(run_dir: &Path, seed: u64) -> Result<(Pipeline, BTreeSet<String>)> {
    let mut pl = Pipeline::new(seed)?;
    let mut loaded = BTreeSet::new();

    let overlay = |name: &str, pl: &mut Pipeline| -> Result<bool> {
        let dir = run_dir.join(name);
        if !dir.join(checkpoint::MANIFEST_FILE).exists() {
            return Ok(false);
        }
        let (map, manifest) = checkpoint::load(&dir)?;
        match name {
            BACKBONE_DIR => pl.backbone.load_state(&map)?,
            PROJECTORS_DIR => {
                pl.projectors.perc_to_pred.load_state(&map)?;
                pl.projectors.pred_to_plan.load_state(&map)?;
                if let Some(skip) = &pl.projectors.perc_to_plan_skip {
                    // tolerate checkpoints written before the skip path existed
                    let _ = skip.load_state(&map);
                }
            }
            other => {
                let stage = StageId::parse(other.trim_start_matches("adapter_"))
                    .ok_or_else(|| Error::Data(format!("unknown component {other}")))?;
                pl.adapters
                    .get(stage)
                    .ok_or_else(|| Error::Data(format!("no adapter for {stage}")))?
                    .load_state(&map)?;
            }
        }
        pl.checkpoint_hashes
            .insert(name.to_string(), manifest.payload_sha256);
        Ok(true)
    };

    let mut names = vec![BACKBONE_DIR.to_string(), PROJECTORS_DIR.to_string()];
    names.extend(StageId::ALL.iter().map(|s| adapter_dir(*s)));
    for name in names {
        if overlay(&name, &mut pl)? {
            loaded.insert(name);
        }
    }
    pl.seeds.insert("run".to_string(), seed);
    Ok((pl, loaded))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::RunMatrix(a) => cmd_run_matrix(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Telemetry(a) => cmd_telemetry(a),
    }
}

pub fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let out = resolve_out(a.out, "gen-data")?;
    let ds = generate_dataset(a.seed, a.n, a.split)?;
    save_jsonl(&ds.train, &out.join("train.jsonl"))?;
    save_jsonl(&ds.val, &out.join("val.jsonl"))?;
    let manifest = ExperimentManifest::new(
        a.seed,
        vec![],
        serde_json::json!({"cmd": "gen-data", "seed": a.seed, "n": a.n, "split": a.split}),
    );
    manifest.save(&out)?;
    println!(
        "wrote {} train / {} val scenes to {}",
        ds.train.len(),
        ds.val.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let train = load_split(&a.data, "train")?;
    let (mut pl, _) = load_run(&a.run, a.seed)?;
    let mut cfg = TrainPhaseConfig::desk_default(1);
    cfg.epochs = a.epochs;
    cfg.base_lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    let stats = pretrain_backbone(&mut pl, &cfg, &train)?;
    let state = pl.backbone.state();
    let hash = save_component(
        &mut pl,
        &a.run,
        BACKBONE_DIR,
        &state,
        serde_json::json!({"kind": "backbone", "seed": a.seed, "epochs": a.epochs}),
    )?;
    println!(
        "pretrained backbone: {} steps, final loss {:.4}, checkpoint {}",
        stats.steps,
        stats.step_losses.last().copied().unwrap_or(f64::NAN),
        &hash[..12]
    );
    Ok(())
}

fn baseline_config(a: &BaselineArgs) -> Result<TrainPhaseConfig> {
    let mut cfg = TrainPhaseConfig::desk_default(1);
    if let Some(path) = &a.config {
        apply_file_config(&mut cfg, &load_file_config(path)?);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    cfg.seed = a.seed;
    Ok(cfg)
}

pub fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let stage = StageId::parse(&a.stage)
        .ok_or_else(|| Error::Usage(format!("unknown stage '{}'", a.stage)))?;
    let train = load_split(&a.data, "train")?;
    let (mut pl, _) = load_run(&a.run, a.seed)?;
    let cfg = baseline_config(&a)?;
    let stats = train_adapter_flat(&mut pl, stage, &cfg, &train)?;
    let state = pl.adapters.get(stage).unwrap().state();
    save_component(
        &mut pl,
        &a.run,
        &adapter_dir(stage),
        &state,
        serde_json::json!({"kind": "adapter", "stage": stage.name(), "seed": a.seed,
                           "flat_baseline": true}),
    )?;
    println!(
        "baseline {}: {} steps, final loss {:.4}",
        stage.name(),
        stats.steps,
        stats.step_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let train = load_split(&a.data, "train")?;
    let (mut pl, loaded) = load_run(&a.run, a.seed)?;

    let mut cfg = TrainPhaseConfig::desk_default(a.phase);
    if let Some(path) = &a.config {
        apply_file_config(&mut cfg, &load_file_config(path)?);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.seed = a.seed;
    cfg.use_skip = a.skip;
    cfg.use_transfer = a.transfer;
    cfg.validate()?;

    // phase ordering: never silently retrain phase 1
    if a.phase == 2 {
        for need in [PROJECTORS_DIR.to_string(), adapter_dir(StageId::Prediction)] {
            if !loaded.contains(&need) {
                return Err(Error::MissingArtifact(format!(
                    "phase 2 requires phase-1 artifact '{need}' in {}",
                    a.run.display()
                )));
            }
        }
    }

    let telemetry_path = a.run.join(format!("telemetry_phase{}.jsonl", a.phase));
    let mut log = TelemetryLog::to_file(&telemetry_path)?;
    let stats = train_phase(&mut pl, &cfg, &train, Some(&mut log))?;
    drop(log);

    let target = if a.phase == 1 {
        StageId::Prediction
    } else {
        StageId::Planning
    };
    let state = pl.adapters.get(target).unwrap().state();
    save_component(
        &mut pl,
        &a.run,
        &adapter_dir(target),
        &state,
        serde_json::json!({"kind": "adapter", "stage": target.name(), "phase": a.phase,
                           "seed": a.seed}),
    )?;
    let proj_state = pl.projectors.state();
    save_component(
        &mut pl,
        &a.run,
        PROJECTORS_DIR,
        &proj_state,
        serde_json::json!({"kind": "projectors", "phase": a.phase, "seed": a.seed,
                           "use_skip": a.skip, "use_transfer": a.transfer}),
    )?;
    let mut manifest = ExperimentManifest::new(
        a.seed,
        vec![],
        serde_json::to_value(&cfg)?,
    );
    manifest.checkpoint_hashes = pl.checkpoint_hashes.clone();
    manifest.save(&a.run)?;
    println!(
        "phase {}: {} steps, final loss {:.4}, telemetry {}",
        a.phase,
        stats.steps,
        stats.step_losses.last().copied().unwrap_or(f64::NAN),
        telemetry_path.display()
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<ChainMode> {
    ChainMode::parse(s).ok_or_else(|| {
        Error::Usage(format!(
            "unknown mode '{s}' (expected flat|history|injection|latent|latent_skip)"
        ))
    })
}

fn require_mode_artifacts(mode: ChainMode, loaded: &BTreeSet<String>, run: &Path) -> Result<()> {
    if let ChainMode::Latent { .. } = mode {
        if !loaded.contains(PROJECTORS_DIR) {
            return Err(Error::MissingArtifact(format!(
                "latent mode needs trained projectors in {}",
                run.display()
            )));
        }
    }
    Ok(())
}

fn infer_mode(
    pl: &Pipeline,
    mode: ChainMode,
    scenes: &[SceneRecord],
) -> Result<Vec<ChainTranscript>> {
    scenes
        .iter()
        .map(|rec| pl.run_mode(&rec.scene, &stage_questions(&rec.qa), mode))
        .collect()
}

fn val_scenes(data: &Path, adversarial_only: bool) -> Result<Vec<SceneRecord>> {
    let mut val = load_split(data, "val")?;
    if adversarial_only {
        val.retain(|r| r.adversarial);
        if val.is_empty() {
            return Err(Error::Data("no adversarial scenes in validation split".into()));
        }
    }
    Ok(val)
}

pub fn cmd_infer(a: InferArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let out = resolve_out(a.out, "infer")?;
    let val = val_scenes(&a.data, a.adversarial_only)?;
    let (pl, loaded) = load_run(&a.run, a.seed)?;
    require_mode_artifacts(mode, &loaded, &a.run)?;
    let transcripts = infer_mode(&pl, mode, &val)?;
    save_transcripts(&transcripts, &out)?;
    println!("{} transcripts ({}) -> {}", transcripts.len(), mode.name(), out.display());
    Ok(())
}

pub fn cmd_run_matrix(a: RunMatrixArgs) -> Result<()> {
    let out = resolve_out(a.out, "run-matrix")?;
    let modes: Vec<ChainMode> = a
        .modes
        .split(',')
        .map(|m| parse_mode(m.trim()))
        .collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::Usage("empty mode list".into()));
    }
    let val = val_scenes(&a.data, a.adversarial_only)?;
    let (pl, loaded) = load_run(&a.run, a.seed)?;
    std::fs::create_dir_all(&out)?;
    let mut mode_names = Vec::new();
    for mode in &modes {
        require_mode_artifacts(*mode, &loaded, &a.run)?;
        let transcripts = infer_mode(&pl, *mode, &val)?;
        let path = out.join(format!("transcripts_{}.jsonl", mode.name()));
        save_transcripts(&transcripts, &path)?;
        println!("{} -> {}", mode.name(), path.display());
        mode_names.push(mode.name());
    }
    let mut manifest = ExperimentManifest::new(
        a.seed,
        mode_names,
        serde_json::json!({"cmd": "run-matrix", "modes": a.modes, "seed": a.seed,
                           "adversarial_only": a.adversarial_only}),
    );
    manifest.checkpoint_hashes = pl.checkpoint_hashes.clone();
    manifest.save(&out)?;
    Ok(())
}

fn collect_transcripts(paths: &[PathBuf]) -> Result<Vec<ChainTranscript>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            for f in files {
                out.extend(crate::pipeline::load_transcripts(&f)?);
            }
        } else {
            out.extend(crate::pipeline::load_transcripts(p)?);
        }
    }
    Ok(out)
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let out = resolve_out(a.out, "eval")?;
    let spec = a
        .backend
        .or_else(|| std::env::var(ENV_NLI_URL).ok())
        .unwrap_or_else(|| "heuristic".to_string());
    let backend = backend_from_spec(&spec)?;
    let transcripts = collect_transcripts(&a.transcripts)?;
    let report = aggregate_report(&transcripts, backend.as_ref(), a.bootstrap_seed)?;
    write_report_files(&report, &out)?;
    let modes = report.conditions.iter().map(|c| c.mode.clone()).collect();
    ExperimentManifest::new(
        a.bootstrap_seed,
        modes,
        serde_json::json!({"cmd": "eval", "backend": spec, "bootstrap_seed": a.bootstrap_seed}),
    )
    .save(&out)?;
    println!("report for {} transcripts -> {}", transcripts.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_config_overrides_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "epochs = 7\nbase_lr = 0.5\n").unwrap();
        let mut cfg = TrainPhaseConfig::desk_default(1);
        apply_file_config(&mut cfg, &load_file_config(&path).unwrap());
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.base_lr, 0.5);
        // a flag override applied after the file wins
        cfg.epochs = 2;
        assert_eq!(cfg.epochs, 2);
    }

    #[test]
    fn bad_toml_is_usage_error_and_missing_file_is_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "epochs = [not toml").unwrap();
        assert!(matches!(load_file_config(&path), Err(Error::Usage(_))));
        assert!(matches!(
            load_file_config(&dir.path().join("absent.toml")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn parse_mode_rejects_unknown_names() {
        assert!(parse_mode("flat").is_ok());
        assert!(parse_mode("latent_skip").is_ok());
        assert!(matches!(parse_mode("telepathy"), Err(Error::Usage(_))));
    }

    #[test]
    fn gen_data_writes_splits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(GenDataArgs {
            seed: 9,
            n: 20,
            split: 0.8,
            out: Some(dir.path().to_path_buf()),
        })
        .unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        let val = load_split(dir.path(), "val").unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(val.len(), 4);
        let m = ExperimentManifest::load(dir.path()).unwrap();
        assert_eq!(m.dataset_seed, 9);
    }

    #[test]
    fn latent_inference_without_projector_checkpoint_is_missing_artifact() {
        let data = tempfile::tempdir().unwrap();
        let run = tempfile::tempdir().unwrap();
        cmd_gen_data(GenDataArgs {
            seed: 3,
            n: 10,
            split: 0.5,
            out: Some(data.path().to_path_buf()),
        })
        .unwrap();
        let err = cmd_infer(InferArgs {
            mode: "latent".into(),
            data: data.path().to_path_buf(),
            run: run.path().to_path_buf(),
            seed: 3,
            out: Some(run.path().join("t.jsonl")),
            adversarial_only: false,
        })
        .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn load_run_roundtrips_saved_components() {
        let run = tempfile::tempdir().unwrap();
        let mut pl = Pipeline::new(5).unwrap();
        let state = pl.projectors.state();
        save_component(
            &mut pl,
            run.path(),
            PROJECTORS_DIR,
            &state,
            serde_json::json!({"kind": "projectors"}),
        )
        .unwrap();
        let (pl2, loaded) = load_run(run.path(), 5).unwrap();
        assert!(loaded.contains(PROJECTORS_DIR));
        assert!(pl2.checkpoint_hashes.contains_key(PROJECTORS_DIR));
        for ((n1, t1), (n2, t2)) in pl.projectors.state().iter().zip(pl2.projectors.state()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "{n1} not bit-identical");
        }
    }

    #[test]
    fn telemetry_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("tel.jsonl");
        let mut log = TelemetryLog::to_file(&log_path).unwrap();
        log.record(&crate::projector::TelemetryRecord {
            step: 1,
            transition: "perc_to_pred".into(),
            gate_opening: 0.03,
            injection_ratio: 0.5,
        })
        .unwrap();
        log.flush().unwrap();
        let out = dir.path().join("tel.csv");
        cmd_telemetry(TelemetryArgs {
            log: log_path,
            out: Some(out.clone()),
        })
        .unwrap();
        let csv = std::fs::read_to_string(out).unwrap();
        assert!(csv.starts_with("step,transition,gate,ratio\n"));
        assert!(csv.contains("1,perc_to_pred,0.03,0.5"));
    }
}

pub fn cmd_telemetry(a: TelemetryArgs) -> Result<()> {
    let out = resolve_out(a.out, "telemetry")?;
    let (records, skipped) = read_telemetry(&a.log)?;
    let mut csv = String::from("step,transition,gate,ratio\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.transition, r.gate_opening, r.injection_ratio
        ));
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, csv)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} malformed telemetry line(s)");
    }
    if records.is_empty() {
        eprintln!("warning: telemetry log {} is empty", a.log.display());
    }
    println!("{} telemetry rows -> {}", records.len(), out.display());
    Ok(())
}
