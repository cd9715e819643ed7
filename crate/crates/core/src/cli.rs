//! Command-line front end. Every command writes only under its `--out`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 stage
//! ordering error, 4 non-finite loss.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::io::{load_image, save_image, save_pfm};
use crate::data::{load_dataset, make_dataset, write_dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::networks::NetworkBundle;
use crate::pipeline::{
    check_order, checkpoint_name, evaluate, load_model, predict_disparity, run_schedule, save_bundle,
    DisparityPredictor, LoadedModel, OraclePredictor, StageName, StepRecord, Which,
};
use crate::tensor::{Shape, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ORDER: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cycledepth", version, about = "Self-supervised monocular depth with cycle refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stereo dataset.
    GenData(GenDataArgs),
    /// Train one stage or the whole schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Predict disparity and a depth visualization for one right-view image.
    Infer(InferArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run only this stage; its predecessor's checkpoint must be in `--out`.
    #[arg(long)]
    pub stage: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WhichArg {
    Student,
    Teacher,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "student")]
    pub which: WhichArg,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "student")]
    pub which: ModelArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::StageOrder { .. } => EXIT_ORDER,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, S>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn data_dir(arg: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.or_else(|| cfg.data.root.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset directory: pass --data or set data.root".into()))
}

pub fn run(command: Command, stdout: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a).map(|_| EXIT_OK),
        Command::Train(a) => train(a).map(|_| EXIT_OK),
        Command::Eval(a) => eval(a, stdout).map(|_| EXIT_OK),
        Command::Infer(a) => infer(a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => gradcheck_cmd(a, stdout),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let d = &cfg.data;
    let (train, held) = make_dataset(d.count, d.width, d.height, d.seed, d.fb())?;
    let m = write_dataset(&a.out, &train, &held, d.seed)?;
    eprintln!(
        "wrote {} train and {} held-out pairs to {}",
        m.split.train.len(),
        m.split.heldout.len(),
        a.out.display()
    );
    Ok(())
}

fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let stage = a.stage.as_deref().map(str::parse::<StageName>).transpose()?;
    let root = data_dir(a.data, &cfg)?;
    let (manifest, samples) = load_dataset(&root, Split::Train)?;

    let (mut bundle, mut completed) = match stage.and_then(StageName::predecessor) {
        None => (NetworkBundle::<f32>::new(cfg.network, manifest.height, manifest.width)?, Vec::new()),
        Some(prev) => {
            let path = a.out.join(checkpoint_name(prev));
            if !crate::checkpoint::manifest_path(&path).exists() {
                return Err(Error::StageOrder {
                    stage: stage.expect("has predecessor").as_str(),
                    missing: prev.as_str(),
                });
            }
            match load_model(&path)? {
                LoadedModel::Bundle { bundle, completed } => (bundle, completed),
                LoadedModel::Oracle => return Err(Error::Checkpoint("cannot train an oracle checkpoint".into())),
            }
        }
    };
    if let Some(s) = stage {
        check_order(s, &completed)?;
        completed.retain(|c| c.index() < s.index());
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let out = a.out.clone();
    let mut after = |name: StageName, _: &NetworkBundle<f32>| -> Result<()> {
        eprintln!("finished {name}");
        Ok(())
    };
    let logs = run_schedule(
        &cfg,
        &samples,
        &mut bundle,
        &mut completed,
        stage,
        Some(&out),
        &mut |_| {},
        &mut after,
    );
    let logs = logs?;
    for log in &logs {
        let name = checkpoint_name(log.stage);
        let path = out.join(format!("{}.jsonl", name.trim_end_matches(".ckpt")));
        write_log(&path, &log.records)?;
    }
    if logs.is_empty() {
        save_bundle(&bundle, &completed, &out.join("init.ckpt"))?;
    }
    Ok(())
}

fn which_list(w: WhichArg) -> Vec<Which> {
    match w {
        WhichArg::Student => vec![Which::Student],
        WhichArg::Teacher => vec![Which::Teacher],
        WhichArg::Both => vec![Which::Student, Which::Teacher],
    }
}

fn eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let root = data_dir(a.data, &cfg)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
        SplitArg::All => Split::All,
    };
    let (_, samples) = load_dataset(&root, split)?;
    let model = load_model(&a.checkpoint)?;
    let predictor: Box<dyn DisparityPredictor> = match model {
        LoadedModel::Oracle => Box::new(OraclePredictor),
        LoadedModel::Bundle { bundle, .. } => Box::new(bundle),
    };
    for which in which_list(a.which) {
        let report = evaluate(predictor.as_ref(), &samples, which, cfg.eval.cap_meters)?;
        let mut obj = serde_json::Map::new();
        obj.insert(which.as_str().into(), serde_json::to_value(report)?);
        writeln!(stdout, "{}", serde_json::Value::Object(obj)).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

/// Maps normalized inverse depth `t ∈ [0,1]` to RGB: red rises and blue
/// falls monotonically with `t`, green peaks mid-range. Near is red.
pub fn inverse_depth_color(t: f32) -> [f32; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    [t, 3.2 * t * (1.0 - t), 1.0 - t]
}

fn infer(a: InferArgs) -> Result<()> {
    let image = load_image(&a.image)?;
    let bundle = match load_model(&a.checkpoint)? {
        LoadedModel::Bundle { bundle, .. } => bundle,
        LoadedModel::Oracle => return Err(Error::Checkpoint("oracle checkpoints need ground truth".into())),
    };
    let s = image.shape();
    if (s.h, s.w) != (bundle.height, bundle.width) {
        return Err(Error::invalid(
            "infer",
            format!("image is {}x{}, model expects {}x{}", s.w, s.h, bundle.width, bundle.height),
        ));
    }
    let which = match a.which {
        ModelArg::Student => Which::Student,
        ModelArg::Teacher => Which::Teacher,
    };
    let disp = predict_disparity(&bundle, &image, which)?;
    let d_max = bundle.d_max() as f32;
    let mut color = Tensor::<f32>::zeros(Shape::new(1, 3, s.h, s.w));
    for y in 0..s.h {
        for x in 0..s.w {
            let rgb = inverse_depth_color(disp.at(0, 0, y, x) / d_max);
            for (c, v) in rgb.into_iter().enumerate() {
                color.set(0, c, y, x, v);
            }
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    save_pfm(&a.out.join(format!("{stem}_disp.pfm")), &disp)?;
    save_image(&a.out.join(format!("{stem}_depth.ppm")), &color)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, stdout: &mut dyn Write) -> Result<i32> {
    let results = gradcheck::run_all(a.seed, a.corrupt_op.as_deref())?;
    write!(stdout, "{}", gradcheck::format_table(&results)).map_err(|e| Error::io("<stdout>", e))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_NUMERIC)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_map_is_monotone_in_red() {
        let reds: Vec<f32> = (0..=10).map(|i| inverse_depth_color(i as f32 / 10.0)[0]).collect();
        assert!(reds.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(inverse_depth_color(1.0)[2], 0.0);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::StageOrder {
                stage: "joint_cycle",
                missing: "half_cycle"
            }),
            EXIT_ORDER
        );
        assert_eq!(exit_code(&Error::NonFinite { what: "loss".into(), step: 0 }), EXIT_NUMERIC);
    }
}
