use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use hfn_core::click_sim::{self, noisy_replacement_clicks, ClickBudget};
use hfn_core::data::{self, load_manifest, make_synthetic_dataset, write_atomic, DatasetManifest, LesionSample};
use hfn_core::evaluation::{self, confusion, metrics};
use hfn_core::hintmaps::ClickFile;
use hfn_core::training::{self, preprocessed_dims, resize_image_nearest, resize_mask_nearest, TrainConfig};
use hfn_core::{checkpoint, ClickSet, Coord, Hfn, HfnError, Mask, NetworkConfig};
use serde::Serialize;
use serde_json::json;

use crate::{
    AblateArgs, EndToEndArgs, EvalArgs, MakeSyntheticArgs, ModelConfigArgs, NoisyEvalArgs, PredictArgs, ServeArgs,
    SimulateClicksArgs, TrainArgs,
};

/// A failed command: usage/validation problems exit with 1, everything else with 2.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        // Validation errors keep their usage exit code through added context.
        match e.downcast_ref::<HfnError>() {
            Some(inner) if is_validation(inner) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<HfnError> for Failure {
    fn from(e: HfnError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn is_validation(e: &HfnError) -> bool {
    matches!(
        e,
        HfnError::EmptyClicks
            | HfnError::ClickOutOfBounds { .. }
            | HfnError::DuplicateClick { .. }
            | HfnError::ConflictingClick { .. }
            | HfnError::MissingClicks { .. }
            | HfnError::InvalidBudget(_)
            | HfnError::InvalidConfig(_)
            | HfnError::InvalidTrainConfig(_)
            | HfnError::InvalidFraction(_)
    )
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_mask(path: &Path) -> anyhow::Result<Mask> {
    let img = image::open(path).with_context(|| format!("reading mask {}", path.display()))?;
    Ok(Mask::from_gray_image(&img.to_luma8()))
}

fn load_json_config<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(anyhow!("reading {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} {}: {e}", path.display())))
}

fn model_configs(args: &ModelConfigArgs, seed: Option<u64>) -> Result<(NetworkConfig, TrainConfig), Failure> {
    let net = match &args.net_config {
        Some(p) => load_json_config(p, "net config")?,
        None => NetworkConfig::tiny(),
    };
    let mut train = match &args.train_config {
        Some(p) => load_json_config(p, "train config")?,
        None => TrainConfig::desk_scale(),
    };
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(s) = seed {
        train.seed = s;
    }
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}

fn load_dataset(manifest: &Path) -> anyhow::Result<Vec<LesionSample>> {
    let m = load_manifest(manifest)?;
    Ok(m.entries.iter().map(data::load_sample).collect::<hfn_core::Result<Vec<_>>>()?)
}

fn load_model(path: &Path) -> anyhow::Result<(Hfn, hfn_core::ModelParameters<f32>)> {
    let ck = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Hfn::new(ck.config)?, ck.params))
}

pub fn simulate_clicks(a: SimulateClicksArgs) -> CmdResult {
    let budget = ClickBudget::new(a.n)?;
    if a.noisy_fg > a.n || a.noisy_bg > a.n {
        return Err(usage(format!("at most --n {} clicks per region can be noisy", a.n)));
    }
    let mask = read_mask(&a.mask)?;
    let clicks = if a.noisy_fg + a.noisy_bg > 0 {
        noisy_replacement_clicks(&mask, budget, a.noisy_fg, a.noisy_bg, a.seed)?
    } else {
        click_sim::simulate_clicks(&mask, budget, a.seed)?
    };
    let file = ClickFile {
        image: a.image.as_ref().unwrap_or(&a.mask).display().to_string(),
        foreground: clicks.foreground.clone(),
        background: clicks.background.clone(),
        seed: Some(a.seed),
    };
    write_atomic(&a.out, file.to_json().as_bytes())?;
    println!("{} foreground, {} background clicks -> {}", clicks.foreground.len(), clicks.background.len(), a.out.display());
    Ok(())
}

pub fn make_synthetic(a: MakeSyntheticArgs) -> CmdResult {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if a.size < 32 {
        return Err(usage("--size must be at least 32"));
    }
    let manifest = make_synthetic_dataset(a.count, a.size, a.seed, &a.out)?;
    let s = manifest.summary();
    println!(
        "{} images ({} train, {} test; {} melanoma) -> {}",
        manifest.entries.len(),
        s.train,
        s.test,
        s.melanoma,
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn run_training(
    dataset: &[LesionSample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    verbose: bool,
) -> anyhow::Result<(hfn_core::ModelParameters<f32>, training::TrainHistory)> {
    Ok(training::train_with_progress(dataset, net, cfg, |r| {
        if verbose {
            let val = r.val_jaccard.map_or(String::new(), |v| format!("  val_jaccard {v:.4}"));
            println!("epoch {:>3}  loss {:.5}  lr {:.2e}/{:.2e}{val}", r.epoch, r.loss, r.lr_enc, r.lr_dec);
        }
    })?)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let (net, cfg) = model_configs(&a.config, a.seed)?;
    let dataset = load_dataset(&a.manifest)?;
    let (params, history) = run_training(&dataset, &net, &cfg, true)?;
    let meta = json!({ "train_config": cfg, "epochs": history.epochs.len() });
    checkpoint::save(&a.out, &net, &params, &meta)?;
    let hist_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.jsonl");
        PathBuf::from(p)
    });
    write_atomic(&hist_path, history.to_jsonl().as_bytes())?;
    println!("checkpoint -> {}\nhistory -> {}", a.out.display(), hist_path.display());
    Ok(())
}

fn print_metrics(label: &str, m: &evaluation::MetricsRecord) {
    println!(
        "{label}: jaccard {:.4}  sensitivity {:.4}  specificity {:.4}  accuracy {:.4}",
        m.jaccard, m.sensitivity, m.specificity, m.accuracy
    );
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let (net, params) = load_model(&a.checkpoint)?;
    let test = evaluation::test_samples(&load_dataset(&a.manifest)?);
    let report = evaluation::evaluate(&net, &params, &test, a.seed)?;
    write_json(&a.report, &report)?;
    print_metrics(&format!("{} images, (3, 3) clicks, mean", report.report.rows.len()), &report.report.mean);
    print_metrics("pooled", &report.report.pooled);
    Ok(())
}

pub fn sweep_clicks(a: EvalArgs) -> CmdResult {
    let (net, params) = load_model(&a.checkpoint)?;
    let test = evaluation::test_samples(&load_dataset(&a.manifest)?);
    let report = evaluation::click_sweep(&net, &params, &test, a.seed)?;
    write_json(&a.report, &report)?;
    for r in &report.rows {
        print_metrics(&format!("n={}", r.n_clicks), &r.mean);
    }
    println!("spearman(n, jaccard) {:.4}", report.spearman_jaccard);
    Ok(())
}

pub fn noisy_eval(a: NoisyEvalArgs) -> CmdResult {
    if a.noisy_fg > 3 || a.noisy_bg > 3 {
        return Err(usage("at most 3 clicks per region can be noisy"));
    }
    let (net, params) = load_model(&a.eval.checkpoint)?;
    let test = evaluation::test_samples(&load_dataset(&a.eval.manifest)?);
    let report = evaluation::noisy_eval(&net, &params, &test, a.noisy_fg, a.noisy_bg, a.eval.seed)?;
    write_json(&a.eval.report, &report)?;
    print_metrics("clean (3, 3)", &report.clean);
    print_metrics(&format!("noisy ({}, {})", a.noisy_fg, a.noisy_bg), &report.noisy);
    Ok(())
}

pub fn ablate_him(a: AblateArgs) -> CmdResult {
    let (net, cfg) = model_configs(&a.config, a.seed)?;
    let dataset = load_dataset(&a.manifest)?;
    let report = evaluation::ablation_him(&dataset, &net, &cfg)?;
    write_json(&a.report, &report)?;
    print_metrics("with integration modules", &report.with_him.mean);
    print_metrics("fusion skips only", &report.without_him.mean);
    Ok(())
}

/// Nearest-pixel mapping of input coordinates onto the resized grid.
fn scale_coord(c: Coord, from: (usize, usize), to: (usize, usize)) -> Coord {
    let s = |v: usize, a: usize, b: usize| ((v as f64 + 0.5) * b as f64 / a as f64).floor().min((b - 1) as f64) as usize;
    Coord(s(c.0, from.0, to.0), s(c.1, from.1, to.1))
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let file = ClickFile::load(&a.clicks).with_context(|| format!("reading click file {}", a.clicks.display()))?;
    let clicks = file.clicks();
    clicks.require_both_sides()?;
    let image = image::open(&a.image).with_context(|| format!("reading image {}", a.image.display()))?.to_rgb8();
    let dims = (image.height() as usize, image.width() as usize);
    clicks.validate(dims.0, dims.1)?;
    let gt = a.gt.as_deref().map(read_mask).transpose()?;
    if let Some(g) = &gt {
        if g.dims() != dims {
            return Err(usage(format!("ground truth is {}x{} but the image is {}x{}", g.height(), g.width(), dims.0, dims.1)));
        }
    }
    let (net, params) = load_model(&a.checkpoint)?;
    let work = preprocessed_dims(dims.0, dims.1, TrainConfig::default().resize_max_long_axis);
    let mask = if work == dims {
        net.forward(&image, &clicks, &params)?.mask
    } else {
        let small = resize_image_nearest(&image, work.0, work.1);
        let map = |v: &[Coord]| v.iter().map(|&c| scale_coord(c, dims, work)).collect();
        let scaled = ClickSet::new(map(&clicks.foreground), map(&clicks.background));
        let pred = net.forward(&small, &scaled, &params)?;
        resize_mask_nearest(&pred.mask, dims.0, dims.1)
    };
    write_atomic(&a.out, &mask.to_png_bytes())?;
    println!("{}x{} mask, {} foreground pixels -> {}", dims.0, dims.1, mask.count_foreground(), a.out.display());
    if let Some(g) = gt {
        let m = metrics(&confusion(&mask, &g)?);
        println!("jaccard {}", m.jaccard);
        println!("sensitivity {}", m.sensitivity);
        println!("specificity {}", m.specificity);
        println!("accuracy {}", m.accuracy);
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .try_init();
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let state = hfn_service::AppState::from_checkpoint(&a.checkpoint, Duration::from_secs(a.ttl_minutes * 60))
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(hfn_service::serve(addr, state)).with_context(|| format!("serving on {addr}"))?;
    Ok(())
}

#[derive(Serialize)]
struct EndToEndReport {
    seed: u64,
    settings: serde_json::Value,
    make_synthetic: serde_json::Value,
    train: serde_json::Value,
    eval: evaluation::FullEvalReport,
    sweep_clicks: evaluation::SweepReport,
    noisy_eval: evaluation::NoisyReport,
    ablate_him: evaluation::AblationReport,
}

fn stage<T>(name: &str, f: impl FnOnce() -> anyhow::Result<T>) -> Result<T, Failure> {
    println!("== {name}");
    f().map_err(|e| Failure::Runtime(e.context(format!("stage {name} failed"))))
}

pub fn end_to_end(a: EndToEndArgs) -> CmdResult {
    let (count, size, epochs) = if a.quickstart { (40, 64, 25) } else { (200, 128, TrainConfig::desk_scale().epochs) };
    let count = a.count.unwrap_or(count);
    let size = a.size.unwrap_or(size);
    let epochs = a.epochs.unwrap_or(epochs);
    if count < 5 || size < 32 || epochs == 0 {
        return Err(usage("need --count >= 5, --size >= 32 and --epochs >= 1"));
    }
    let net_config = NetworkConfig::tiny();
    let cfg = TrainConfig { epochs, seed: a.seed, ..TrainConfig::desk_scale() };
    let data_dir = a.out.join("data");

    let manifest: DatasetManifest = stage("make-synthetic", || Ok(make_synthetic_dataset(count, size, a.seed, &data_dir)?))?;
    let dataset = stage("load", || load_dataset(&data_dir.join("manifest.jsonl")))?;
    let ckpt = a.out.join("model.ckpt");
    let (params, history) = stage("train", || {
        let (params, history) = run_training(&dataset, &net_config, &cfg, true)?;
        checkpoint::save(&ckpt, &net_config, &params, &json!({ "train_config": cfg }))?;
        Ok((params, history))
    })?;
    let net = Hfn::new(net_config.clone())?;
    let test = evaluation::test_samples(&dataset);
    let eval = stage("eval", || Ok(evaluation::evaluate(&net, &params, &test, a.seed)?))?;
    print_metrics("(3, 3) mean", &eval.report.mean);
    let sweep = stage("sweep-clicks", || Ok(evaluation::click_sweep(&net, &params, &test, a.seed)?))?;
    let noisy = stage("noisy-eval", || Ok(evaluation::noisy_eval(&net, &params, &test, 2, 2, a.seed)?))?;
    print_metrics("noisy (2, 2) mean", &noisy.noisy);
    let ablation = stage("ablate-him", || Ok(evaluation::ablation_him(&dataset, &net_config, &cfg)?))?;
    print_metrics("without modules mean", &ablation.without_him.mean);

    let summary = manifest.summary();
    let report = EndToEndReport {
        seed: a.seed,
        settings: json!({ "count": count, "size": size, "network": net_config, "train_config": cfg }),
        make_synthetic: json!({ "manifest": "data/manifest.jsonl", "summary": summary }),
        train: json!({ "checkpoint": "model.ckpt", "history": history.epochs }),
        eval,
        sweep_clicks: sweep,
        noisy_eval: noisy,
        ablate_him: ablation,
    };
    let path = a.out.join("report.json");
    stage("report", || write_json(&path, &report))?;
    println!("report -> {}", path.display());
    Ok(())
}
