use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use shapewarp::config::RunConfig;
use shapewarp::contour::contour_cached;
use shapewarp::dataset::synthetic::{generate_synthetic_corpus, SyntheticCorpus};
use shapewarp::dataset::{load_manifest, split_records, GarmentType, Manifest, PairData};
use shapewarp::evaluation::{evaluate_run, write_reports_csv, EvalReport, GroundTruth, RandomConvExtractor};
use shapewarp::inpaint::{load_mtn, MtnTrainer};
use shapewarp::multiwarp::pixel_loss;
use shapewarp::retrieval::{
    build_random_pairs, match_with_index, model_codes, product_codes, EmbeddingIndex, PairMode, TestPairSet,
};
use shapewarp::shape_matching::{load_smn, ShapeMatchingNet, SmnItem, SmnTrainer};
use shapewarp::training::{ensure_parent, CODE_VERSION};

#[derive(Parser, Debug)]
#[command(name = "shapewarp", version, about = "Shape-matched multi-warp virtual try-on")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural product/model/mask corpus and its manifest.
    GenSynthetic(GenArgs),
    /// Train the shape matching net on the train split.
    TrainSmn(TrainArgs),
    /// Jointly train warper and inpainter on the train split.
    TrainMtn(TrainMtnArgs),
    /// Encode model images into a shape-code index.
    BuildIndex(IndexArgs),
    /// Build matched and/or random product-model test pairs.
    Match(MatchArgs),
    /// Put products on models with a trained MTN.
    Synthesize(SynthArgs),
    /// Score test pairs: FID∞, FID, L1, perceptual error.
    Evaluate(EvalArgs),
    /// Merge evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    two_component: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory (config.snapshot, checkpoints/, reports/, samples/).
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the run's checkpoint if present.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
}

#[derive(Args, Debug)]
struct TrainMtnArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Number of affine warps.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    smn: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum ModeArg {
    Random,
    MatchedColor,
    MatchedGrayscale,
    All,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    smn: Option<PathBuf>,
    /// Prebuilt model index; computed from the split when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    mode: ModeArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    mtn: PathBuf,
    #[arg(long, requires = "model")]
    product: Option<String>,
    #[arg(long, requires = "product")]
    model: Option<String>,
    /// Synthesize every pair of a pair CSV instead.
    #[arg(long, conflicts_with_all = ["product", "model"])]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    mtn: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Output directory for eval.json and eval.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "run")]
    label: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// eval.json files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(cfg, a),
        Command::TrainSmn(a) => train_smn(cfg, a),
        Command::TrainMtn(a) => train_mtn(cfg, a),
        Command::BuildIndex(a) => build_index(cfg, a),
        Command::Match(a) => match_pairs(cfg, a),
        Command::Synthesize(a) => synthesize(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Report(a) => report(a),
    }
}

fn snapshot(cfg: &RunConfig) -> serde_json::Value {
    json!({"code_version": CODE_VERSION, "config": cfg})
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

/// Sidecar `<file>.meta.json` carrying the config snapshot.
fn write_meta(path: &Path, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let mut v = snapshot(cfg);
    v["artifact"] = json!(path.file_name().map(|s| s.to_string_lossy().into_owned()));
    v["details"] = extra;
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    write_json(Path::new(&name), &v)
}

fn write_run_snapshot(run: &Path, cfg: &RunConfig) -> Result<()> {
    for d in ["checkpoints", "reports", "samples"] {
        fs::create_dir_all(run.join(d)).with_context(|| format!("creating {}", run.join(d).display()))?;
    }
    let text = format!("# shapewarp {CODE_VERSION}\n{}", cfg.to_toml());
    fs::write(run.join("config.snapshot"), text).context("writing config.snapshot")
}

fn split(cfg: &RunConfig, manifest: &Manifest, which: Split) -> Result<Manifest> {
    if matches!(which, Split::All) {
        return Ok(manifest.clone());
    }
    let (train, test) = split_records(manifest, cfg.data.train_ratio, cfg.data.split_seed)?;
    Ok(match which {
        Split::Train => train,
        _ => test,
    })
}

fn square_size(m: &Manifest) -> Result<usize> {
    let (h, w) = m.image_size;
    if h != w || h == 0 {
        bail!("manifest images must be square and nonempty, got {h}×{w}");
    }
    Ok(h)
}

fn gen_synthetic(mut cfg: RunConfig, a: GenArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.synthetic.n = n;
    }
    if let Some(s) = a.image_size {
        cfg.synthetic.image_size = s;
    }
    cfg.synthetic.two_component |= a.two_component;
    let m = generate_synthetic_corpus(&cfg.synthetic, &a.out)?;
    write_json(&a.out.join("config.snapshot.json"), &snapshot(&cfg))?;
    log::info!("wrote {} records to {}", m.len(), a.out.display());
    Ok(())
}

fn train_smn(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.smn.steps = s;
    }
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let size = square_size(&manifest)?;
    let train = split(&cfg, &manifest, Split::Train)?;
    write_run_snapshot(&a.run, &cfg)?;
    let ckpt = a.run.join("checkpoints/smn.ckpt");
    let mut trainer = if a.resume && ckpt.is_file() {
        let t = SmnTrainer::<f32>::load(&ckpt)?;
        log::info!("resuming SMN at step {}", t.step);
        t
    } else {
        SmnTrainer::new(cfg.smn.clone(), size)?
    };
    let mut items = Vec::with_capacity(train.len());
    for rec in &train.records {
        let d = PairData::load(rec)?;
        items.push(SmnItem {
            contour: contour_cached(&rec.product_path, &cfg.contour, false)?,
            product: d.product,
            model: d.model,
            garment_type: rec.garment_type,
        });
    }
    log::info!("training SMN on {} items to step {}", items.len(), cfg.smn.steps);
    while trainer.step < cfg.smn.steps {
        let next = (trainer.step + a.checkpoint_every.max(1)).min(cfg.smn.steps);
        trainer.train(&items, next)?;
        trainer.save(&ckpt)?;
        trainer.history.write_csv(&a.run.join("smn_history.csv"))?;
    }
    trainer.save(&ckpt)?;
    let hist = a.run.join("smn_history.csv");
    trainer.history.write_csv(&hist)?;
    write_meta(&hist, &cfg, json!({"step": trainer.step}))?;
    log::info!("SMN checkpoint {}", ckpt.display());
    Ok(())
}

fn train_mtn(mut cfg: RunConfig, a: TrainMtnArgs) -> Result<()> {
    let t = a.train;
    if let Some(s) = t.steps {
        cfg.mtn.steps = s;
    }
    if let Some(k) = a.k {
        cfg.mtn.mtn.warper.k = k;
    }
    cfg.validate()?;
    let manifest = load_manifest(&t.manifest)?;
    let size = square_size(&manifest)?;
    let train = split(&cfg, &manifest, Split::Train)?.load_images()?;
    write_run_snapshot(&t.run, &cfg)?;
    let ckpt = t.run.join("checkpoints/mtn.ckpt");
    let mut trainer = if t.resume && ckpt.is_file() {
        let tr = MtnTrainer::<f32>::load(&ckpt)?;
        log::info!("resuming MTN at step {}", tr.step);
        tr
    } else {
        MtnTrainer::new(cfg.mtn.clone(), size)?
    };
    log::info!("training MTN (k = {}) on {} pairs to step {}", trainer.mtn.k(), train.len(), cfg.mtn.steps);
    let hist = t.run.join("mtn_history.csv");
    while trainer.step < cfg.mtn.steps {
        let next = (trainer.step + t.checkpoint_every.max(1)).min(cfg.mtn.steps);
        trainer.train(&train, next)?;
        trainer.save(&ckpt)?;
        trainer.history.write_csv(&hist)?;
    }
    trainer.save(&ckpt)?;
    trainer.history.write_csv(&hist)?;
    write_meta(&hist, &cfg, json!({"step": trainer.step}))?;
    log::info!("MTN checkpoint {}", ckpt.display());
    Ok(())
}

fn load_smn_f32(path: &Path) -> Result<ShapeMatchingNet<f32>> {
    Ok(load_smn::<f32>(path)?.0)
}

fn build_index(cfg: RunConfig, a: IndexArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let data = split(&cfg, &manifest, a.split)?.load_images()?;
    let smn = load_smn_f32(&a.smn)?;
    let index = EmbeddingIndex::build(model_codes(&smn, &data)?)?;
    index.save(&a.out)?;
    write_meta(&a.out, &cfg, json!({"count": index.len(), "dimension": index.dim()}))?;
    log::info!("indexed {} models into {}", index.len(), a.out.display());
    Ok(())
}

fn match_pairs(cfg: RunConfig, a: MatchArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let pool = split(&cfg, &manifest, a.split)?;
    let n = a.n.unwrap_or(cfg.retrieval.pairs);
    let k = a.k.unwrap_or(cfg.retrieval.top_k);
    let allow = cfg.retrieval.allow_ground_truth;
    let modes: Vec<PairMode> = match a.mode {
        ModeArg::All => PairMode::ALL.to_vec(),
        ModeArg::Random => vec![PairMode::Random],
        ModeArg::MatchedColor => vec![PairMode::MatchedColor],
        ModeArg::MatchedGrayscale => vec![PairMode::MatchedGrayscale],
    };
    let mut set = TestPairSet::default();
    let needs_smn = modes.iter().any(|&m| m != PairMode::Random);
    let data = if needs_smn { pool.load_images()? } else { Vec::new() };
    let smn = match (&a.smn, needs_smn) {
        (Some(p), true) => Some(load_smn_f32(p)?),
        (None, true) => bail!("matched modes need --smn"),
        _ => None,
    };
    let index = match (&a.index, &smn) {
        (Some(p), Some(_)) => Some(EmbeddingIndex::<f32>::load(p)?),
        (None, Some(s)) => Some(EmbeddingIndex::build(model_codes(s, &data)?)?),
        _ => None,
    };
    let types: HashMap<String, GarmentType> = manifest.records.iter().map(|r| (r.id.clone(), r.garment_type)).collect();
    for mode in modes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.retrieval.seed);
        let part = match mode {
            PairMode::Random => build_random_pairs(&pool.records, &pool.records, n, allow, &mut rng)?,
            PairMode::MatchedColor | PairMode::MatchedGrayscale => {
                let (smn, index) = (smn.as_ref().expect("loaded"), index.as_ref().expect("built"));
                let grayscale = mode == PairMode::MatchedGrayscale;
                let prods = product_codes(smn, &data, grayscale)?
                    .into_iter()
                    .zip(&data)
                    .map(|((id, c), d)| (id, d.record.garment_type, c))
                    .collect::<Vec<_>>();
                match_with_index(index, &types, &prods, k, n, mode, allow, &mut rng)?
            }
        };
        log::info!("{mode}: {} pairs", part.len());
        set.extend(part);
    }
    set.save(&a.out)?;
    write_meta(&a.out, &cfg, json!({"pairs": set.len(), "top_k": k}))?;
    Ok(())
}

fn load_mtn_f32(path: &Path) -> Result<shapewarp::inpaint::Mtn<f32>> {
    Ok(load_mtn::<f32>(path)?.0)
}

fn synthesize(cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mtn = load_mtn_f32(&a.mtn)?;
    let pairs: Vec<(String, String)> = match (&a.pairs, &a.product, &a.model) {
        (Some(p), _, _) => TestPairSet::load(p)?
            .pairs
            .into_iter()
            .map(|p| (p.product_id, p.model_id))
            .collect(),
        (None, Some(p), Some(m)) => vec![(p.clone(), m.clone())],
        _ => bail!("give --product and --model, or --pairs"),
    };
    let missing: Vec<String> = pairs
        .iter()
        .flat_map(|(p, m)| [p, m])
        .filter(|id| manifest.get(id).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(shapewarp::Error::Unresolved(missing).into());
    }
    let mut cache: HashMap<String, PairData> = HashMap::new();
    for (pid, mid) in &pairs {
        for id in [pid, mid] {
            if !cache.contains_key(id) {
                cache.insert(id.clone(), PairData::load(manifest.get(id).expect("checked"))?);
            }
        }
        let (prod, model) = (&cache[pid], &cache[mid]);
        let out = mtn.synthesize(&prod.product, &model.model, &model.mask)?;
        let stem = format!("{pid}__{mid}");
        let dir = &a.out;
        fs::create_dir_all(dir)?;
        out.image.save(&dir.join(format!("{stem}.png")))?;
        out.raw.save(&dir.join(format!("{stem}.raw.png")))?;
        let mut warps = Vec::new();
        for (i, (w, th)) in out.warps.warps.iter().zip(&out.warps.thetas).enumerate() {
            w.save(&dir.join(format!("{stem}.warp{i}.png")))?;
            let map = pixel_loss(w, &model.model, &model.mask, cfg.mtn.mtn.warper.beta as f32)?;
            warps.push(json!({"theta": th.m, "warp_loss": map.mean()}));
        }
        let mut meta = snapshot(&cfg);
        meta["product_id"] = json!(pid);
        meta["model_id"] = json!(mid);
        meta["warps"] = json!(warps);
        write_json(&dir.join(format!("{stem}.json")), &meta)?;
    }
    log::info!("synthesized {} pairs into {}", pairs.len(), a.out.display());
    Ok(())
}

fn evaluate(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let pairs = TestPairSet::load(&a.pairs)?;
    let mtn = load_mtn_f32(&a.mtn)?;
    let data = manifest.load_images()?;
    let corpus = SyntheticCorpus::for_manifest(&a.manifest);
    let gt = match &corpus {
        Some(c) => GroundTruth::Synthetic(c),
        None => GroundTruth::Records,
    };
    let extractor = RandomConvExtractor::<f32>::new(&cfg.mtn.mtn.extractor);
    let mut report = evaluate_run(&a.label, &pairs, &mtn, &data, &data, &extractor, gt, &cfg.eval)?;
    report.config["run"] = serde_json::to_value(&cfg)?;
    report.save_json(&a.out.join("eval.json"))?;
    write_reports_csv(std::slice::from_ref(&report), &a.out.join("eval.csv"))?;
    for s in &report.modes {
        log::info!(
            "{}: {} pairs, FID∞ {:.4}, FID {:.4}, masked L1 {}",
            s.mode,
            s.pairs,
            s.fid_inf,
            s.fid_n,
            s.masked_l1.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| EvalReport::load_json(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    write_reports_csv(&reports, &a.out)?;
    let mut footer = a.out.as_os_str().to_owned();
    footer.push(".notes.txt");
    fs::write(
        Path::new(&footer),
        "Scores come from a seeded random-weight feature extractor at desk scale. \
         They are comparable across rows of this table only, not with published \
         FID or perceptual numbers, which need pretrained features and full-scale training.\n",
    )?;
    log::info!("merged {} reports into {}", reports.len(), a.out.display());
    Ok(())
}
