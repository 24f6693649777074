use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use boxseg_core::dataio::{list_cases, load_checkpoint, read_case_npz, save_checkpoint, CaseRecord, ImageLayout, NpyArray};
use boxseg_core::harness::teacher::read_teacher_dir;
use boxseg_core::harness::train::{split_val, Stage, TrainOutcome};
use boxseg_core::harness::{
    build_teacher_store, distill_stage, evaluate_dataset, finetune_stage, label_map, synthetic_dataset, ModelSegmenter,
    RandomTeacher, Segmenter, TrainConfig,
};
use boxseg_core::model::{describe, Model, ModelConfig};
use boxseg_core::prompts::PromptKinds;
use boxseg_core::{dataio::Npz, CoreError};
use clap::{Parser, Subcommand};
use serde_json::Value;

/// Box-prompted segmentation: training, distillation, inference and evaluation.
#[derive(Parser)]
#[command(name = "boxseg", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment every case archive in a directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "box+points+scribble", value_parser = parse_mode)]
        mode: PromptKinds,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Surface tolerance for the metrics printed when cases carry labels.
        #[arg(long, default_value_t = 2.0)]
        nsd_tol: f64,
    },
    /// Fine-tune the whole model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// A directory of case archives or `synthetic:COUNT`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Start from these weights (typically a distilled checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Write the per-step loss curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train the image encoder against stored teacher embeddings.
    Distill {
        /// Directory of embedding archives or `random:SEED` for a frozen random teacher.
        #[arg(long)]
        teacher: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "synthetic:100")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score a checkpoint on labelled cases.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "box+points+scribble", value_parser = parse_mode)]
        mode: PromptKinds,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        nsd_tol: f64,
    },
    /// Print parameter and FLOP counts for a model config.
    Profile {
        /// JSON model config; `{"preset": "toy"}` selects the small network.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic labelled cases.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<PromptKinds, String> {
    PromptKinds::parse(s).ok_or_else(|| format!("unknown mode '{s}'; use box, box+points or box+points+scribble"))
}

/// Reference budgets the profile output is compared against.
const BUDGET: [(&str, f64); 4] =
    [("encoder params", 10.51e6), ("model params", 36.77e6), ("encoder FLOPs", 47.70e9), ("model FLOPs", 55.20e9)];

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 2 for anything the input is to blame for.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CoreError>()) {
        Some(CoreError::Numeric(_)) => 3,
        _ => 2,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Infer { model, input, output, mode, seed, nsd_tol } => infer(&model, &input, &output, mode, seed, nsd_tol),
        Cmd::Train { config, data, out, init, curve } => train(&config, &data, &out, init.as_deref(), curve.as_deref()),
        Cmd::Distill { teacher, config, data, out, curve } => distill(&teacher, &config, &data, &out, curve.as_deref()),
        Cmd::Eval { model, data, report, mode, seed, nsd_tol } => eval(&model, &data, &report, mode, seed, nsd_tol),
        Cmd::Profile { config } => profile(config.as_deref()),
        Cmd::Synth { count, out, seed } => synth(count, &out, seed),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some((name, _)) = ck.params.iter().find(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(CoreError::Numeric(format!("checkpoint parameter '{name}' is not finite")).into());
    }
    Ok(Model::from_params(ck.config, ck.params)?)
}

fn read_dir_cases(dir: &Path) -> Result<Vec<CaseRecord>> {
    let paths = list_cases(dir)?;
    if paths.is_empty() {
        return Err(CoreError::Validation(format!("no .npz cases in {}", dir.display())).into());
    }
    paths.iter().map(|p| read_case_npz(p).with_context(|| format!("reading {}", p.display()))).collect()
}

/// `synthetic:COUNT` draws from `seed`; anything else is a directory.
fn load_data(src: &str, seed: u64) -> Result<Vec<CaseRecord>> {
    match src.strip_prefix("synthetic:") {
        Some(n) => {
            let n: usize = n.parse().map_err(|_| CoreError::Validation(format!("bad synthetic count '{n}'")))?;
            if n == 0 {
                return Err(CoreError::Validation("synthetic count must be positive".into()).into());
            }
            Ok(synthetic_dataset(n, seed))
        }
        None => read_dir_cases(Path::new(src)),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a JSON object and overlays it on a preset chosen by its optional
/// `"preset"` key.
fn read_json_config(path: &Path) -> Result<(String, Value)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::Validation(format!("{}: {e}", path.display())))?;
    let Some(obj) = v.as_object_mut() else {
        return Err(CoreError::Validation(format!("{}: expected a JSON object", path.display())).into());
    };
    let preset = match obj.remove("preset") {
        None => "full".to_string(),
        Some(Value::String(s)) if s == "full" || s == "toy" => s,
        Some(other) => return Err(CoreError::Validation(format!("unknown preset {other}; use \"full\" or \"toy\"")).into()),
    };
    Ok((preset, v))
}

fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, over: Value, what: &str) -> Result<T> {
    let mut b = serde_json::to_value(base)?;
    merge(&mut b, over);
    serde_json::from_value(b).map_err(|e| CoreError::Validation(format!("{what}: {e}")).into())
}

fn train_config(path: &Path, stage: Stage) -> Result<TrainConfig> {
    let (preset, over) = read_json_config(path)?;
    let base = match (stage, preset.as_str()) {
        (Stage::Distill, "toy") => TrainConfig::distill_toy(),
        (Stage::Distill, _) => TrainConfig::distill_full(),
        (Stage::Finetune, "toy") => TrainConfig::finetune_toy(),
        (Stage::Finetune, _) => TrainConfig::finetune_full(),
    };
    let cfg: TrainConfig = overlay(&base, over, &path.display().to_string())?;
    if cfg.stage != stage {
        return Err(CoreError::Validation(format!("{}: stage must be {stage:?}", path.display())).into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(e: &boxseg_core::harness::train::EpochLog) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  step {:>6}  train {:.4}  val {}  val_dsc {}  lr {:.2e}",
        e.epoch,
        e.step,
        e.train_loss,
        fmt(e.val_loss),
        fmt(e.val_dsc),
        e.lr
    );
}

fn write_outcome(out: &TrainOutcome, path: &Path, curve: Option<&Path>) -> Result<()> {
    save_checkpoint(path, &out.best).with_context(|| format!("writing {}", path.display()))?;
    if let Some(c) = curve {
        let mut s = String::from("step,lr,total,dice,bce,iou_mse\n");
        for l in &out.steps {
            s.push_str(&format!("{},{},{},{},{},{}\n", l.step, l.lr, l.loss.total, l.loss.dice, l.loss.bce, l.loss.iou_mse));
        }
        std::fs::write(c, s).with_context(|| format!("writing {}", c.display()))?;
    }
    eprintln!("wrote {} after {} steps", path.display(), out.steps.len());
    Ok(())
}

fn train(config: &Path, data: &str, out: &Path, init: Option<&Path>, curve: Option<&Path>) -> Result<()> {
    let cfg = train_config(config, Stage::Finetune)?;
    let cases = load_data(data, cfg.seed)?;
    let model = match init {
        Some(p) => {
            let m = load_model(p)?;
            if m.cfg != cfg.model {
                return Err(CoreError::Validation(format!("{} was trained with a different model config", p.display())).into());
            }
            m
        }
        None => Model::init(cfg.model.clone(), cfg.seed)?,
    };
    let (tr, val) = split_val(&cases, cfg.val_cases);
    let outcome = finetune_stage(model, tr, val, &cfg, print_epoch)?;
    write_outcome(&outcome, out, curve)
}

fn distill(teacher: &str, config: &Path, data: &str, out: &Path, curve: Option<&Path>) -> Result<()> {
    let cfg = train_config(config, Stage::Distill)?;
    let cases = load_data(data, cfg.seed)?;
    let store = match teacher.strip_prefix("random:") {
        Some(s) => {
            let seed: u64 = s.parse().map_err(|_| CoreError::Validation(format!("bad teacher seed '{s}'")))?;
            build_teacher_store(&RandomTeacher::new(cfg.model.embed_dim_out, seed), &cases, cfg.model.img_size)?
        }
        None => read_teacher_dir(Path::new(teacher))?,
    };
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let (tr, val) = split_val(&cases, cfg.val_cases);
    let outcome = distill_stage(&store, model, tr, val, &cfg, print_epoch)?;
    write_outcome(&outcome, out, curve)
}

fn eval(model: &Path, data: &str, report: &Path, mode: PromptKinds, seed: u64, tol: f64) -> Result<()> {
    let model = load_model(model)?;
    let cases = load_data(data, seed)?;
    let seg = ModelSegmenter::new(&model, mode, seed);
    let rep = evaluate_dataset(&seg, &cases, tol)?;
    std::fs::write(report, rep.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    println!("{}", serde_json::to_string_pretty(&rep.summary_json())?);
    Ok(())
}

fn infer(model: &Path, input: &Path, output: &Path, mode: PromptKinds, seed: u64, tol: f64) -> Result<()> {
    let model = load_model(model)?;
    let cases = read_dir_cases(input)?;
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    let seg = ModelSegmenter::new(&model, mode, seed);
    for case in &cases {
        let t0 = std::time::Instant::now();
        let masks = seg.segment(case)?;
        let spatial = match case.layout {
            ImageLayout::Volume => vec![case.depth(), case.height(), case.width()],
            _ => vec![case.height(), case.width()],
        };
        let segs = if masks.is_empty() { vec![0u8; spatial.iter().product()] } else { label_map(&masks) };
        let mut npz = Npz::new();
        npz.insert("segs", NpyArray::u8(spatial, segs));
        let path = output.join(format!("{}.npz", case.id));
        npz.write(&path).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("{}: {} boxes in {:.2}s", case.id, masks.len(), t0.elapsed().as_secs_f64());
    }
    if cases.iter().all(|c| c.gts.is_some()) {
        let rep = evaluate_dataset(&seg, &cases, tol)?;
        println!("{}", serde_json::to_string_pretty(&rep.summary_json())?);
    }
    Ok(())
}

fn profile(config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        None => ModelConfig::full(),
        Some(p) => {
            let (preset, over) = read_json_config(p)?;
            let base = if preset == "toy" { ModelConfig::toy() } else { ModelConfig::full() };
            overlay(&base, over, &p.display().to_string())?
        }
    };
    cfg.validate()?;
    let plan = describe(&cfg);
    let values = [
        plan.params_with_prefix("encoder.") as f64,
        plan.total_params() as f64,
        2.0 * plan.encoder_macs as f64,
        2.0 * plan.total_macs() as f64,
    ];
    println!("{:<16} {:>14} {:>14} {:>8}", "", "measured", "reference", "ratio");
    for ((name, reference), v) in BUDGET.iter().zip(values) {
        let (scale, unit) = if name.ends_with("FLOPs") { (1e9, "G") } else { (1e6, "M") };
        println!("{name:<16} {:>13.2}{unit} {:>13.2}{unit} {:>8.3}", v / scale, reference / scale, v / reference);
    }
    println!("promptenc params {:>13.2}M", plan.params_with_prefix("promptenc.") as f64 / 1e6);
    println!("decoder params   {:>13.2}M", plan.params_with_prefix("decoder.") as f64 / 1e6);
    Ok(())
}

fn synth(count: usize, out: &Path, seed: u64) -> Result<()> {
    if count == 0 {
        bail!(CoreError::Validation("count must be positive".into()));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for case in synthetic_dataset(count, seed) {
        let path = out.join(format!("{}.npz", case.id));
        case.to_npz().write(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {count} cases to {}", out.display());
    Ok(())
}
