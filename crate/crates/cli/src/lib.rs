//! Command-line front end: data generation, training, lifting, diffusion
//! sampling, evaluation, gradient checks and attention export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use pgformer::data::{read_records, synth_generate, write_records};
use pgformer::diffusion::ddim_steps;
use pgformer::eval::MetricReport;
use pgformer::gradcheck::{run_gradchecks, worst, GradcheckModule, GRADCHECK_TOLERANCE};
use pgformer::model::complexity_estimate;
use pgformer::training::{predict_mm, train_diffusion, train_pgformer};
use pgformer::{
    Dataset, DiffusionConfig, DiffusionModel, Error, PgFormer, PgFormerConfig, Result, SynthConfig, Tensor, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pgformer", version, about = "Lift 2D human keypoints to 3D with pyramid graph attention")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 2D/3D pose dataset.
    Synth(SynthArgs),
    /// Train the lifter, or the denoiser with --diffusion.
    Train(TrainArgs),
    /// Predict 3D poses for every record of a pose file.
    Lift(LiftArgs),
    /// Sample 3D poses with the denoiser, seeded by an encoder.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Export per-head attention maps of one sample as CSV.
    Attn(AttnArgs),
    /// Print the parameter count and complexity estimate of a model config.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config; defaults: 5000 samples, 1 px jitter, camera 4-6 m away.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output pose file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the sample count.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON with optional "model", "diffusion" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training pose file.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation pose file; without it a deterministic share of --data is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Weights manifest to write; tensors go to <path>.bin.
    #[arg(long)]
    pub out_weights: PathBuf,
    /// Per-epoch JSON-lines metric log.
    #[arg(long)]
    pub log: PathBuf,
    /// Train the denoiser instead of the lifter.
    #[arg(long)]
    pub diffusion: bool,
    /// Lifter weights seeding validation samples of the denoiser.
    #[arg(long)]
    pub encoder_weights: Option<PathBuf>,
    /// Epoch count (default 20, the published schedule).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size (published settings: 64 with ground-truth keypoints, 256 with detections, 2048 for the denoiser).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate (default 1e-3, Adam; decays 4% every 4 epochs, 0.9x per 50k steps with detections, 0.9x per 10 epochs for the denoiser).
    #[arg(long)]
    pub lr: Option<f64>,
    /// L1 share of the pose loss (published settings: 0.025 with ground-truth keypoints, 0.1 with detections, 0 for the denoiser).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Disable horizontal-flip augmentation (on by default).
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Pose file whose 2D joints are lifted.
    #[arg(long)]
    pub input: PathBuf,
    /// Pose file with predicted root-relative 3D joints in millimeters.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Denoiser weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Lifter weights whose predictions center the initial distribution.
    #[arg(long)]
    pub encoder_weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// DDIM steps, evenly spaced over the 50-step schedule (published setting: 5).
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Parallel chains averaged into the final pose (published setting: 5).
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted pose file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth pose file with matching record ids.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON metric report to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional CSV of the 5 mm error histogram.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, tensor, gcn, pga, model or diffusion.
    #[arg(long, default_value = "all")]
    pub module: GradcheckModule,
    /// Optional JSON report of every case.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Record index inside the input file.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model config JSON (bare, or under a "model" key).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in setting: gt (96 channels, 5 pairs) or cpn (256 channels, 4 pairs).
    #[arg(long)]
    pub preset: Option<String>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Param(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` and runs the command, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Lift(a) => lift(a, seed),
        Command::Sample(a) => sample(a, seed),
        Command::Eval(a) => evaluate(a, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Attn(a) => attn(a, seed),
        Command::Params(a) => params(a),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Recursively overlays `top` onto `base`; objects merge, other values replace.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Typed config from serializable defaults with a JSON overlay.
fn layered<T>(defaults: &T, overlay: Option<&Value>, what: &str) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(defaults)?;
    if let Some(o) = overlay {
        merge(&mut v, o);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut cfg: SynthConfig = layered(&SynthConfig::default(), file.as_ref(), "synth config")?;
    cfg.seed = seed;
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    let mut ds = synth_generate(&cfg)?;
    ds.provenance = Some(json!({ "command": "synth", "config": cfg }));
    write_records(&a.out, &ds)?;
    println!("wrote {} poses to {}", ds.len(), a.out.display());
    Ok(())
}

fn open_log(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let section = |k: &str| file.as_ref().and_then(|f| f.get(k));
    let preset = if a.diffusion { TrainConfig::diffusion() } else { TrainConfig::gt() };
    let mut tc: TrainConfig = layered(&preset, section("train"), "train config")?;
    tc.seed = seed;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr0 = v;
    }
    if let Some(v) = a.lambda {
        tc.lambda = v;
    }
    if a.no_flip {
        tc.flip_augment = false;
    }
    tc.validate()?;

    let data = read_records(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(p) => (data, read_records(p)?),
        None => data.split(seed, 1.0 - tc.val_fraction),
    };
    let mut log = open_log(&a.log)?;
    if a.diffusion {
        let dc: DiffusionConfig = layered(&DiffusionConfig::default(), section("diffusion"), "diffusion config")?;
        let encoder = a.encoder_weights.as_deref().map(PgFormer::load).transpose()?;
        let mut model = DiffusionModel::build(&dc, seed)?;
        let hist = train_diffusion(&mut model, &train_set, Some(&val_set), encoder.as_ref(), &tc, Some(&mut log))?;
        let prov =
            json!({ "command": "train", "diffusion": dc, "train": tc, "data": a.data, "samples": train_set.len() });
        model.save_with(&a.out_weights, Some(&prov))?;
        report_training(&hist);
    } else {
        let mc: PgFormerConfig = layered(&PgFormerConfig::default(), section("model"), "model config")?;
        let mut model = PgFormer::build(&mc, seed)?;
        let hist = train_pgformer(&mut model, &train_set, Some(&val_set), &tc, Some(&mut log))?;
        let prov = json!({ "command": "train", "model": mc, "train": tc, "data": a.data, "samples": train_set.len() });
        model.save_with(&a.out_weights, Some(&prov))?;
        report_training(&hist);
    }
    log.flush()?;
    println!("weights written to {}", a.out_weights.display());
    Ok(())
}

fn report_training(hist: &[pgformer::training::EpochLog]) {
    if let Some(last) = hist.last() {
        match last.val_mpjpe_mm {
            Some(v) => println!("epoch {}: train loss {:.6}, val MPJPE {:.2} mm", last.epoch, last.train_loss, v),
            None => println!("epoch {}: train loss {:.6}", last.epoch, last.train_loss),
        }
    }
}

fn check_joints(ds: &Dataset, n: usize, what: &Path) -> Result<()> {
    if ds.n_joints != n {
        return Err(Error::Data(format!(
            "{} has {} joints per pose, the weights expect {n}",
            what.display(),
            ds.n_joints
        )));
    }
    Ok(())
}

/// Copy of `input` with `joints3d` replaced by `pred` (millimeters).
fn with_predictions(input: &Dataset, pred: &Tensor, provenance: Value) -> Dataset {
    let n = input.n_joints;
    let mut out = input.clone();
    out.provenance = Some(provenance);
    for (b, r) in out.records.iter_mut().enumerate() {
        r.joints3d = (0..n)
            .map(|j| {
                let i = (b * n + j) * 3;
                [pred.data()[i], pred.data()[i + 1], pred.data()[i + 2]]
            })
            .collect();
    }
    out
}

fn lift(a: &LiftArgs, seed: u64) -> Result<()> {
    let model = PgFormer::load(&a.weights)?;
    let input = read_records(&a.input)?;
    check_joints(&input, model.n_joints(), &a.input)?;
    let pred = predict_mm(&model, &input.inputs(), 256)?;
    let prov = json!({ "command": "lift", "weights": a.weights, "model": model.config, "seed": seed });
    write_records(&a.output, &with_predictions(&input, &pred, prov))?;
    println!("lifted {} poses to {}", input.len(), a.output.display());
    Ok(())
}

fn sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let mut model = DiffusionModel::load(&a.weights)?;
    let encoder = PgFormer::load(&a.encoder_weights)?;
    if a.samples == 0 {
        return Err(Error::Param("--samples must be at least 1".into()));
    }
    model.config.ddim_steps = ddim_steps(model.schedule.steps(), a.steps)?;
    model.config.samples = a.samples;
    let input = read_records(&a.input)?;
    check_joints(&input, model.n_joints(), &a.input)?;
    check_joints(&input, encoder.n_joints(), &a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = model.sample(&encoder, &input.inputs(), &mut rng)?;
    let pred = Tensor::from_fn(pred.shape(), |i| pred.data()[i] * 1000.0);
    if !pred.all_finite() {
        return Err(Error::Numeric("sampled poses are not finite".into()));
    }
    let prov = json!({
        "command": "sample",
        "weights": a.weights,
        "encoder_weights": a.encoder_weights,
        "diffusion": model.config,
        "seed": seed,
    });
    write_records(&a.output, &with_predictions(&input, &pred, prov))?;
    println!(
        "sampled {} poses with {} chains x {} steps ({} batched backbone passes)",
        input.len(),
        a.samples,
        a.steps,
        model.evaluations()
    );
    Ok(())
}

fn evaluate(a: &EvalArgs, seed: u64) -> Result<()> {
    let pred = read_records(&a.pred)?;
    let gt = read_records(&a.gt)?;
    if pred.n_joints != gt.n_joints || pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} holds {} poses of {} joints, {} holds {} of {}",
            a.pred.display(),
            pred.len(),
            pred.n_joints,
            a.gt.display(),
            gt.len(),
            gt.n_joints
        )));
    }
    if let Some((p, g)) = pred.records.iter().zip(&gt.records).find(|(p, g)| p.id != g.id) {
        return Err(Error::Data(format!("record ids differ: {} vs {}", p.id, g.id)));
    }
    let root = pgformer::Skeleton::by_name(&gt.skeleton)?.graph.root();
    let tags = gt.action_tags();
    let report = MetricReport::compute(&pred.joints3d_mm(), &gt.joints3d_mm(), root, Some(&tags))?;
    let out = json!({
        "metrics": report,
        "provenance": { "command": "eval", "pred": a.pred, "gt": a.gt, "seed": seed, "pred_provenance": pred.provenance },
    });
    fs::write(&a.report, serde_json::to_string_pretty(&out)?)?;
    if let Some(h) = &a.histogram {
        fs::write(h, report.histogram.to_csv())?;
    }
    println!(
        "MPJPE {:.2} mm, 3DPCK {:.2} %, AUC {:.4} over {} poses",
        report.mpjpe_mm,
        report.pck_percent,
        report.auc,
        gt.len()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let cases = run_gradchecks(a.module, seed)?;
    for c in &cases {
        println!(
            "{:<10} {:<32} max rel error {:.3e} ({} coords, {} at kinks) {}",
            c.module.to_string(),
            c.name,
            c.max_rel_error,
            c.checked,
            c.kinks,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let w = worst(&cases);
    println!("max relative error {w:.3e} over {} cases (tolerance {GRADCHECK_TOLERANCE:e})", cases.len());
    if let Some(p) = &a.report {
        let out = json!({ "module": a.module, "seed": seed, "tolerance": GRADCHECK_TOLERANCE, "cases": cases });
        fs::write(p, serde_json::to_string_pretty(&out)?)?;
    }
    if cases.iter().all(|c| c.passed()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {w:.3e} >= {GRADCHECK_TOLERANCE:e}")))
    }
}

fn attn(a: &AttnArgs, seed: u64) -> Result<()> {
    let model = PgFormer::load(&a.weights)?;
    let input = read_records(&a.input)?;
    check_joints(&input, model.n_joints(), &a.input)?;
    if a.sample >= input.len() {
        return Err(Error::Data(format!(
            "sample {} outside the {} records of {}",
            a.sample,
            input.len(),
            a.input.display()
        )));
    }
    let one = input.subset(&[a.sample]);
    let maps = model.attention_maps(&one.inputs(), 0)?;
    if maps.is_empty() {
        return Err(Error::Data("model has no attention blocks".into()));
    }
    let mut out = String::from("layer,head,");
    out.push_str(maps[0].to_csv().lines().next().unwrap_or("query"));
    out.push('\n');
    for m in &maps {
        for line in m.to_csv().lines().skip(1) {
            out.push_str(&format!("{},{},{line}\n", m.layer, m.head));
        }
    }
    fs::write(&a.out_csv, out)?;
    let meta = json!({
        "command": "attn",
        "weights": a.weights,
        "input": a.input,
        "record": one.records[0].id,
        "model": model.config,
        "seed": seed,
        "rows": maps[0].row_labels,
        "cols": maps[0].col_labels,
    });
    let mut meta_path = a.out_csv.clone().into_os_string();
    meta_path.push(".json");
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    println!(
        "wrote {} maps of {}x{} to {}",
        maps.len(),
        maps[0].row_labels.len(),
        maps[0].col_labels.len(),
        a.out_csv.display()
    );
    Ok(())
}

fn params(a: &ParamsArgs) -> Result<()> {
    let cfg = match (&a.config, a.preset.as_deref()) {
        (Some(p), _) => {
            let v = read_json(p)?;
            let body = v.get("model").cloned().unwrap_or(v);
            layered(&PgFormerConfig::default(), Some(&body), "model config")?
        }
        (None, None | Some("gt")) => PgFormerConfig::gt(),
        (None, Some("cpn")) => PgFormerConfig::cpn(),
        (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other}; use gt or cpn"))),
    };
    let model = PgFormer::build(&cfg, 0)?;
    let c = complexity_estimate(&cfg)?;
    println!("parameters: {}", model.param_count());
    println!(
        "complexity per sample: {:.4e} (graph-hourglass reference {:.4e}, ratio {:.4})",
        c.pgformer,
        c.graphsh,
        c.ratio_to_graphsh()
    );
    println!("{}", serde_json::to_string(&json!({ "config": cfg, "param_count": model.param_count() }))?);
    Ok(())
}
