use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use psoctseg::config;
use psoctseg::critic::{make_pairs, roc_auc, train_critic, CriticConfig, CriticTrainConfig, FrozenCritic};
use psoctseg::data::{Dataset, LabelMap, PolarImage, Record};
use psoctseg::losses::SigmaKind;
use psoctseg::metrics::{interface_csv, mean_report, EvalReport};
use psoctseg::nn::Checkpoint;
use psoctseg::par::Exec;
use psoctseg::phantom::{perturb_labels, write_dataset, PhantomConfig};
use psoctseg::segnet::SegModel;
use psoctseg::trainer::{
    ablation, ablation_csv, ablation_subsets, evaluate_model, grid_search_lambda, log_grid, split_by_patient, step_log_csv, train, GridSpec,
    Partition, SplitAssignment, TrainConfig,
};

#[derive(Parser)]
#[command(name = "psoctseg", version, about = "Multi-term loss segmentation of polar PS-OCT cross-sections")]
struct Cli {
    /// Training config (JSON, or flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file path for `train-critic`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Generate(GenerateArgs),
    /// Train the label-quality critic.
    TrainCritic(CriticArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Greedy search over the loss weights.
    GridSearch(GridArgs),
    /// Score a trained network on one partition.
    Evaluate(EvalArgs),
    /// Loss-term ablation table.
    Ablate(AblateArgs),
    /// Summarise JSON outputs of evaluate/ablate as a markdown table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    r: usize,
    #[arg(long, default_value_t = 128)]
    a: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 5)]
    frames_per_patient: usize,
}

#[derive(Args)]
struct CriticArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    severity: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Take the degraded map from a different frame than the clean one.
    #[arg(long)]
    unpaired: bool,
}

#[derive(Args, Clone, Default)]
struct LossArgs {
    #[arg(long)]
    lambda_wce: Option<f64>,
    #[arg(long)]
    lambda_dice: Option<f64>,
    #[arg(long)]
    lambda_bp: Option<f64>,
    #[arg(long)]
    lambda_ap: Option<f64>,
    #[arg(long)]
    lambda_bc: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, value_enum)]
    sigma: Option<Sigma>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sigma {
    Norm1,
    Norm2,
    Max,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frozen critic checkpoint, required when the ap weight is non-zero.
    #[arg(long)]
    critic: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Log-spaced candidates per weight.
    #[arg(long, default_value_t = 7)]
    points: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    postprocess: OnOff,
    #[arg(long, value_enum, default_value = "test")]
    partition: PartArg,
    /// Also report with A-lines whose wall exceeds this many pixels excluded.
    #[arg(long)]
    exclude_thick: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories or JSON files written by `evaluate` or `ablate`.
    inputs: Vec<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.command {
        Command::Generate(a) => generate(&cli, a, exec),
        Command::TrainCritic(a) => critic_cmd(&cli, a, exec),
        Command::Train(a) => train_cmd(&cli, &a.run, exec),
        Command::GridSearch(a) => grid_cmd(&cli, a, exec),
        Command::Evaluate(a) => eval_cmd(&cli, a, exec),
        Command::Ablate(a) => ablate_cmd(&cli, a, exec),
        Command::Report(a) => report_cmd(&cli, a),
    }
}

fn out_dir(cli: &Cli, fallback: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_train_config(cli: &Cli, run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let l = &run.loss;
    let loss = &mut cfg.loss;
    for (slot, v) in [
        (&mut loss.lambda_wce, l.lambda_wce),
        (&mut loss.lambda_dice, l.lambda_dice),
        (&mut loss.lambda_bp, l.lambda_bp),
        (&mut loss.lambda_ap, l.lambda_ap),
        (&mut loss.lambda_bc, l.lambda_bc),
        (&mut loss.epsilon, l.epsilon),
        (&mut loss.m, l.m),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(b) = l.b {
        loss.b = b;
    }
    if let Some(s) = l.sigma {
        loss.sigma_kind = match s {
            Sigma::Norm1 => SigmaKind::Norm1,
            Sigma::Norm2 => SigmaKind::Norm2,
            Sigma::Max => SigmaKind::Max,
        };
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = run.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = run.lr {
        cfg.optimizer.lr = lr;
    }
    if run.no_augment {
        cfg.augment_enabled = false;
    }
    if run.data.is_some() {
        cfg.data = run.data.clone();
    }
    if run.critic.is_some() {
        cfg.critic_ckpt = run.critic.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_records(data: Option<&Path>) -> Result<Vec<Record>> {
    let data = data.context("no dataset given (--data or `data` in the config)")?;
    let ds = Dataset::open(data).with_context(|| format!("opening dataset {}", data.display()))?;
    let records = ds.load_all()?;
    if records.is_empty() {
        bail!("dataset {} is empty", data.display());
    }
    Ok(records)
}

fn load_critic(cfg: &TrainConfig) -> Result<Option<FrozenCritic>> {
    match &cfg.critic_ckpt {
        Some(p) => Ok(Some(FrozenCritic::from_checkpoint(&Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?)?)),
        None => Ok(None),
    }
}

fn split_for(records: &[Record], cfg: &TrainConfig) -> Result<SplitAssignment> {
    let ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    Ok(split_by_patient(&ids, &cfg.split, cfg.split_seed)?)
}

fn generate(cli: &Cli, a: &GenerateArgs, exec: Exec) -> Result<()> {
    let mut base = PhantomConfig { seed: cli.seed.unwrap_or(0), ..PhantomConfig::for_grid(a.r, a.a) };
    if let Some(n) = a.noise {
        base.noise_level = n;
    }
    base.validate()?;
    let dir = out_dir(cli, "data")?;
    let ds = write_dataset(&dir, &base, a.count, a.frames_per_patient, exec)?;
    log::info!("wrote {} records to {}", ds.entries.len(), dir.display());
    Ok(())
}

fn labelled_pairs(records: &[Record]) -> Result<Vec<(PolarImage, LabelMap)>> {
    records
        .iter()
        .map(|r| Ok((r.image.clone(), r.labels.clone().context("record without labels")?)))
        .collect()
}

fn critic_cmd(cli: &Cli, a: &CriticArgs, exec: Exec) -> Result<()> {
    let records = load_records(Some(&a.data))?;
    let seed = cli.seed.unwrap_or(0);
    let all = labelled_pairs(&records)?;
    let cut = (all.len() * 4 / 5).max(1).min(all.len());
    let (fit, held) = all.split_at(cut);
    let mut tc = CriticTrainConfig { seed, ..CriticTrainConfig::default() };
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.optimizer.lr = lr;
    }
    let (r, w) = (fit[0].0.r, fit[0].0.a);
    let training = train_critic(CriticConfig::new(r, w), &make_pairs(fit, a.severity, !a.unpaired, seed), &tc, exec)?;
    if !held.is_empty() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (k, (img, lab)) in held.iter().enumerate() {
            pos.push(training.frozen.score_labels(img, lab)?);
            neg.push(training.frozen.score_labels(img, &perturb_labels(lab, a.severity, seed ^ (k as u64 + 1)))?);
        }
        log::info!("held-out AUC (clean vs severity {}): {:.4}", a.severity, roc_auc(&pos, &neg));
    }
    let path = match &cli.out {
        Some(p) if p.is_dir() => p.join("critic.ckpt"),
        Some(p) => p.clone(),
        None => PathBuf::from("critic.ckpt"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    training.frozen.to_checkpoint()?.save(&path)?;
    let curve = path.with_extension("csv");
    let mut csv = String::from("step,wasserstein,penalty\n");
    for s in &training.curve {
        csv.push_str(&format!("{},{},{}\n", s.step, s.wasserstein, s.penalty));
    }
    fs::write(&curve, csv)?;
    log::info!("critic saved to {}", path.display());
    Ok(())
}

fn train_cmd(cli: &Cli, run: &RunArgs, exec: Exec) -> Result<()> {
    let cfg = load_train_config(cli, run)?;
    let records = load_records(cfg.data.as_deref())?;
    let critic = load_critic(&cfg)?;
    let split = split_for(&records, &cfg)?;
    let dir = out_dir(cli, "run")?;
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(&dir.join("split.json"), &split)?;
    let out = train(&records, &split, &cfg, critic.as_ref(), exec)?;
    out.model.to_checkpoint()?.save(&dir.join("segnet.ckpt"))?;
    fs::write(dir.join("train_log.csv"), step_log_csv(&out.steps))?;
    let mut csv = String::from("epoch,mean_loss,val_dice,val_mhd_px\n");
    for e in &out.epochs {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.val_dice, e.val_mhd_px.map_or(String::new(), |v| v.to_string())));
    }
    fs::write(dir.join("epochs.csv"), csv)?;
    log::info!("best validation dice {:.4} at epoch {}; outputs in {}", out.best_val_dice, out.best_epoch, dir.display());
    Ok(())
}

fn grid_cmd(cli: &Cli, a: &GridArgs, exec: Exec) -> Result<()> {
    let cfg = load_train_config(cli, &a.run)?;
    let records = load_records(cfg.data.as_deref())?;
    let critic = load_critic(&cfg)?;
    let split = split_for(&records, &cfg)?;
    let grid = GridSpec { candidates: vec![log_grid(a.points); 4], ..GridSpec::default() };
    let res = grid_search_lambda(&records, &split, &cfg, &grid, critic.as_ref(), exec)?;
    let dir = out_dir(cli, "grid")?;
    write_json(&dir.join("grid.json"), &res)?;
    write_json(&dir.join("best_config.json"), &TrainConfig { loss: res.best.clone(), ..cfg })?;
    let mut csv = String::from("term,lambda_wce,lambda_dice,lambda_bp,lambda_ap,lambda_bc,val_dice,val_mhd_px\n");
    for t in &res.trials {
        let l = t.lambdas;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.term,
            l[0],
            l[1],
            l[2],
            l[3],
            l[4],
            t.val_dice,
            t.val_mhd_px.map_or(String::new(), |v| v.to_string())
        ));
    }
    fs::write(dir.join("grid.csv"), csv)?;
    log::info!("best weights {:?}", res.best.lambdas());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    postprocess: bool,
    partition: String,
    summary: Option<EvalReport>,
    summary_excluding_thick: Option<EvalReport>,
    frames: Vec<(String, EvalReport)>,
}

fn eval_cmd(cli: &Cli, a: &EvalArgs, exec: Exec) -> Result<()> {
    let cfg: TrainConfig = match &cli.config {
        Some(p) => config::load(p)?,
        None => TrainConfig::default(),
    };
    let data = a.data.clone().or(cfg.data.clone());
    let records = load_records(data.as_deref())?;
    let model = SegModel::from_checkpoint(&Checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?)?;
    let (chosen, partition): (Vec<usize>, &str) = match a.partition {
        PartArg::All => ((0..records.len()).collect(), "all"),
        p => {
            let split = split_for(&records, &cfg)?;
            let (part, name) = match p {
                PartArg::Train => (Partition::Train, "train"),
                PartArg::Val => (Partition::Val, "val"),
                _ => (Partition::Test, "test"),
            };
            (split.indices(&records, part), name)
        }
    };
    let subset: Vec<&Record> = chosen.iter().map(|&i| &records[i]).collect();
    let pp = a.postprocess == OnOff::On;
    let reports = evaluate_model(&model, &subset, pp, None, exec)?;
    let thick = match a.exclude_thick {
        Some(m) => mean_report(&evaluate_model(&model, &subset, pp, Some(m), exec)?),
        None => None,
    };
    let frames: Vec<(String, EvalReport)> =
        chosen.iter().zip(reports).map(|(&i, r)| (format!("{}#{i}", records[i].patient_id), r)).collect();
    let summary = mean_report(&frames.iter().map(|f| f.1.clone()).collect::<Vec<_>>());
    if let Some(s) = &summary {
        log::info!("{} frames: accuracy {:.4} dice {:.4} mhd {:?} px", s.frames, s.accuracy, s.dice, s.mhd_px);
    }
    let dir = out_dir(cli, "eval")?;
    fs::write(dir.join("frames.csv"), interface_csv(&frames))?;
    write_json(
        &dir.join("report.json"),
        &EvalOutput { postprocess: pp, partition: partition.into(), summary, summary_excluding_thick: thick, frames },
    )?;
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs, exec: Exec) -> Result<()> {
    let cfg = load_train_config(cli, &a.run)?;
    let records = load_records(cfg.data.as_deref())?;
    let critic = load_critic(&cfg)?;
    let split = split_for(&records, &cfg)?;
    let rows = ablation(&records, &split, &cfg, &ablation_subsets(), &a.seeds, critic.as_ref(), exec)?;
    let dir = out_dir(cli, "ablation")?;
    write_json(&dir.join("ablation.json"), &rows)?;
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(())
}

fn report_cmd(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut md = String::new();
    for input in &a.inputs {
        let files: Vec<PathBuf> = if input.is_dir() {
            ["report.json", "ablation.json"].iter().map(|f| input.join(f)).filter(|p| p.exists()).collect()
        } else {
            vec![input.clone()]
        };
        if files.is_empty() {
            bail!("no report.json or ablation.json in {}", input.display());
        }
        for f in files {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f)?)?;
            md.push_str(&format!("## {}\n\n", f.display()));
            md.push_str(&render(&v));
            md.push('\n');
        }
    }
    print!("{md}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.md"), &md)?;
    }
    Ok(())
}

fn num(v: &serde_json::Value) -> String {
    v.as_f64().map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn render(v: &serde_json::Value) -> String {
    let mut s = String::new();
    if let Some(rows) = v.as_array() {
        s.push_str("| terms | accuracy | dice | MHD (px) |\n|---|---|---|---|\n");
        for r in rows {
            s.push_str(&format!("| {} | {} | {} | {} |\n", r["label"].as_str().unwrap_or("?"), num(&r["accuracy"]), num(&r["dice"]), num(&r["mhd_px"])));
        }
        return s;
    }
    let sum = &v["summary"];
    s.push_str(&format!(
        "frames {}, postprocess {}: accuracy {}, dice {}, MHD {} px\n\n",
        sum["frames"],
        v["postprocess"],
        num(&sum["accuracy"]),
        num(&sum["dice"]),
        num(&sum["mhd_px"])
    ));
    s.push_str("| class | sensitivity | specificity | accuracy | dice |\n|---|---|---|---|---|\n");
    for c in sum["classes"].as_array().into_iter().flatten() {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c["class"].as_str().unwrap_or("?"),
            num(&c["sensitivity"]),
            num(&c["specificity"]),
            num(&c["accuracy"]),
            num(&c["dice"])
        ));
    }
    s.push_str("\n| interface | ADE (um) | MHD (um) |\n|---|---|---|\n");
    for i in sum["interfaces"].as_array().into_iter().flatten() {
        s.push_str(&format!("| {} | {} | {} |\n", i["interface"].as_str().unwrap_or("?"), num(&i["ade_um"]), num(&i["mhd_um"])));
    }
    s
}
