use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vrel_core::config::RunConfig;
use vrel_core::data::{generate_synthetic, load_dataset, render_dataset, save_dataset, Dataset, Mode, Split};
use vrel_core::eval::{evaluate_binary, evaluate_masks, evaluate_vrd, rank_image, MetricsReport};
use vrel_core::gradcheck::{run_suite, CheckOptions, SuiteDims};
use vrel_core::mask_attention::{ground_truth_mask, write_pgm, MaskLossKind};
use vrel_core::model::{Architecture, Model, Query, Scene};
use vrel_core::sequence::Vocabulary;
use vrel_core::spatial::Fusion;
use vrel_core::train::{fit, load_model, FitOutput};
use vrel_core::Error;

/// Usage or validation failure (exit status 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "vrel",
    version,
    about = "Visual relationship classification on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a step log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (Recall@K or binary accuracy).
    Eval(EvalArgs),
    /// Print predictions for one image as JSON lines.
    Predict(PredictArgs),
    /// Export predicted and ground-truth attention masks as PGM files.
    DumpAttention(DumpArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "vrd")]
    mode: Mode,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    no_mask_att: bool,
    #[arg(long)]
    mask_loss: Option<MaskLossKind>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "50,100")]
    k: Vec<usize>,
    /// Metrics file to append to (default: <ckpt>/metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "small")]
    dims: SuiteDims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries sampled per parameter in module checks.
    #[arg(long, default_value_t = 6)]
    max_entries: usize,
    /// Skew the analytic gradient of the named check (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::DumpAttention(a) => dump_attention(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<std::io::Error>(), Some(io) if io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Usage>()
            || matches!(
                c.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Dataset(_) | Error::UnknownWord(_))
            )
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let mut data = cfg.data;
    if let Some(n) = a.images {
        data.images = n;
    }
    if let Some(s) = a.seed {
        data.seed = s;
    }
    if data.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    let dataset = generate_synthetic(&data.synth(a.mode))?;
    save_dataset(&a.out, &dataset)?;
    let n_rel: usize = dataset.records.iter().map(|r| r.relations.len()).sum();
    out!(
        "wrote {} images ({} train / {} test, {n_rel} relations) to {}",
        dataset.records.len(),
        dataset.manifest.splits.train.len(),
        dataset.manifest.splits.test.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    t.freeze_backbone |= a.freeze_backbone;
    t.spatial &= !a.no_spatial;
    t.mask_attention &= !a.no_mask_att;
    if let Some(k) = a.mask_loss {
        t.mask_loss = k;
    }
    if let Some(f) = a.fusion {
        t.fusion = f;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    cfg.train.validate()?;
    let dataset = load_dataset(&a.data, None)?;
    let vocab = Vocabulary::from_labels(dataset.labels())?;
    let arch = Architecture::for_dataset(cfg.model, cfg.train.variant(), &dataset, vocab.len());
    let mut model = Model::<f32>::new(arch, vocab, cfg.train.seed)?;
    if cfg.train.freeze_backbone {
        model.freeze_backbone();
    }
    let total = model.store.total_count();
    let trainable = model.store.trainable_count();
    out!(
        "parameters: {total} total, {trainable} trainable ({:.2}%)",
        100.0 * trainable as f64 / total as f64
    );
    let canvases = render_dataset(&dataset)?;
    let started = Instant::now();
    let report = fit(
        &mut model,
        &dataset,
        &canvases,
        &cfg.train,
        &FitOutput {
            dir: Some(a.out.clone()),
            config_echo: cfg.to_json(),
        },
    )
    .context("training aborted")?;
    let last = report.log.last();
    out!(
        "trained {} steps in {:.1}s; final loss {:.4}; checkpoint in {}",
        report.log.len(),
        started.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |r| r.loss_total),
        a.out.join(vrel_core::train::trainer::CHECKPOINT_DIR).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("unknown split '{other}' (expected train or test)"))),
    }
}

fn load_pair(data: &Path, ckpt: &Path) -> Result<(Dataset, Model<f32>)> {
    let (model, _) = load_model(ckpt)?;
    let dataset = load_dataset(data, None)?;
    if dataset.mode() != model.mode() {
        return Err(usage(format!(
            "checkpoint is {} but the dataset is {}",
            model.mode(),
            dataset.mode()
        )));
    }
    Ok((dataset, model))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let split = parse_split(&a.split)?;
    if a.k.contains(&0) {
        return Err(usage("--k values must be positive"));
    }
    let (dataset, model) = load_pair(&a.data, &a.ckpt)?;
    let canvases = render_dataset(&dataset)?;
    let report: MetricsReport = match model.mode() {
        Mode::DoubletVrd => {
            let (results, report) = evaluate_vrd(&model, &dataset, &canvases, split, &a.k)?;
            for r in &results {
                out!("recall@{}: {:.4} ({}/{})", r.k, r.recall, r.recalled, r.total);
            }
            report
        }
        Mode::TripletBinary => {
            let (acc, report) = evaluate_binary(&model, &dataset, &canvases, split)?;
            out!("overall accuracy: {:.4} ({}/{})", acc.overall, acc.correct, acc.total);
            for (p, (v, n)) in &acc.per_predicate {
                out!("  {p:<16} {v:.4} (n={n})");
            }
            report
        }
    };
    if model.arch.variant.mask_attention {
        let iou = evaluate_masks(&model, &dataset, &canvases, split)?;
        out!("mask IoU@0.5: {:.4} ({} masks)", iou.mean_iou, iou.masks);
    }
    let path = a.metrics.unwrap_or_else(|| a.ckpt.join("metrics.jsonl"));
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(&report)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn find_image(dataset: &Dataset, id: u64) -> Result<&vrel_core::data::ImageRecord> {
    dataset
        .record(id)
        .ok_or_else(|| usage(format!("image {id} does not exist in the dataset")))
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let (dataset, model) = load_pair(&a.data, &a.ckpt)?;
    let record = find_image(&dataset, a.image)?;
    let canvas = vrel_core::data::rasterize(record, &dataset.manifest.classes, dataset.manifest.seed.unwrap_or(0))?;
    let obj = |i: usize| &record.objects[i].cls;
    match model.mode() {
        Mode::DoubletVrd => {
            for p in rank_image(&model, record, &canvas)? {
                let line = serde_json::json!({
                    "image_id": p.image_id,
                    "subject": p.subject,
                    "subject_class": obj(p.subject),
                    "predicate": dataset.manifest.predicates[p.predicate],
                    "object": p.object,
                    "object_class": obj(p.object),
                    "score": p.score,
                });
                out!("{line}");
            }
        }
        Mode::TripletBinary => {
            if record.relations.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            let scenes = [Scene {
                record,
                canvas: &canvas,
            }];
            let queries: Vec<Query> = record
                .relations
                .iter()
                .map(|r| Query {
                    scene: 0,
                    subject: r.s,
                    object: r.o,
                    predicate: Some(r.p.as_str()),
                })
                .collect();
            for (r, l) in record.relations.iter().zip(model.predict(&scenes, &queries)?) {
                let line = serde_json::json!({
                    "image_id": record.image_id,
                    "subject": r.s,
                    "predicate": r.p,
                    "object": r.o,
                    "predicted": l[1] > l[0],
                    "truth": r.truth,
                    "logits": l,
                });
                out!("{line}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_attention(a: DumpArgs) -> Result<ExitCode> {
    let (dataset, model) = load_pair(&a.data, &a.ckpt)?;
    if !model.arch.variant.mask_attention {
        return Err(usage("the checkpoint was trained without mask attention"));
    }
    let record = find_image(&dataset, a.image)?;
    let canvas = vrel_core::data::rasterize(record, &dataset.manifest.classes, dataset.manifest.seed.unwrap_or(0))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let dims = model.arch.dims;
    let scenes = [Scene {
        record,
        canvas: &canvas,
    }];
    let mut written = 0;
    for (i, rel) in record.relations.iter().enumerate() {
        let query = Query {
            scene: 0,
            subject: rel.s,
            object: rel.o,
            predicate: (model.mode() == Mode::TripletBinary).then_some(rel.p.as_str()),
        };
        let mut tape = vrel_core::autodiff::Tape::<f32>::inference();
        let fwd = model.forward(&mut tape, &scenes, std::slice::from_ref(&query))?;
        let masks = fwd.masks.context("model produced no masks")?;
        let values = tape.value(masks).to_f64_vec();
        let cells = dims.d_h * dims.d_w;
        for (term, &row) in fwd.sequences[0].terms.iter().zip(&fwd.term_rows[0]) {
            let stem = format!("{}_{}_{}", record.image_id, i, term.role.name());
            let pred = &values[row * cells..(row + 1) * cells];
            write_pgm(&a.out.join(format!("{stem}_pred.pgm")), pred, dims.d_w, dims.d_h)?;
            let gt = ground_truth_mask(
                &term.bbox,
                record.width as f64,
                record.height as f64,
                dims.d_w,
                dims.d_h,
            )?;
            write_pgm(&a.out.join(format!("{stem}_gt.pgm")), &gt, dims.d_w, dims.d_h)?;
            written += 2;
        }
    }
    out!("wrote {written} mask files to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        max_entries: Some(a.max_entries),
        seed: a.seed,
        ..CheckOptions::default()
    };
    let started = Instant::now();
    let reports = run_suite(a.dims, &opts, a.inject_fault.as_deref())?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let checked: usize = r.inputs.iter().map(|i| i.checked).sum();
        out!(
            "{status:<4} {:<24} max_rel_err={:.3e} entries={checked}",
            r.name,
            r.max_rel_error()
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    out!(
        "{} checks, {} failed, tolerance {:.0e}, {:.1}s",
        reports.len(),
        failed.len(),
        opts.tolerance,
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}
