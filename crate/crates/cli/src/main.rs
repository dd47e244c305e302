use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use survpath::checkpoint::Checkpoint;
use survpath::config::Config;
use survpath::data::{read_risks, write_risks, Dataset};
use survpath::error::ErrorKind;
use survpath::fusion::{
    dense_reference, dense_score_entries, fuse, masked_score_entries, DenseMask, FusionConfig,
    FusionWeights, DENSE_GUARD,
};
use survpath::interpret::{AttributionReport, CaseInputs, NamedScore};
use survpath::manifest::{unix_now, RunManifest};
use survpath::matrix::Matrix;
use survpath::metrics::{c_index, km_estimate, logrank_test, median_split, RiskedCohort};
use survpath::param::ParamStore;
use survpath::pathway::{parse_gene_sets, tokens_for_granularity, PathwayDefinition};
use survpath::rng::seeded;
use survpath::synth::generate;
use survpath::trainer::{
    make_folds, metrics_log_csv, read_splits, train_fold, write_splits, FoldSplit, ModelSetup,
};

#[derive(Parser)]
#[command(
    name = "survpath",
    version,
    about = "Pathway/histology survival modelling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice of the command.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(match &self.config {
            Some(p) => Config::load(p, &overrides)?,
            None => Config::parse("", &overrides, Path::new("."))?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted pathway.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory (defaults to `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Pooled validation metrics for a run, or for a risk file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long, conflicts_with = "risks")]
        run: Option<PathBuf>,
        /// `case_id,risk` file to score instead of a run.
        #[arg(long)]
        risks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribution reports for one fold's validation cases or chosen cases.
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, requires = "run")]
        fold: Option<usize>,
        #[arg(long, conflicts_with = "run")]
        checkpoint: Option<PathBuf>,
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score-entry counts and timings of masked vs dense attention.
    BenchAttn {
        #[arg(long, default_value_t = 331)]
        np: u64,
        /// One or more patch counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "15000")]
        nh: Vec<u64>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<survpath::Error>() {
            return match err.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    3
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Train { common, out, jobs } => cmd_train(&common, out, jobs),
        Command::Eval {
            common,
            run,
            risks,
            out,
        } => cmd_eval(&common, run, risks, &out),
        Command::Interpret {
            common,
            run,
            fold,
            checkpoint,
            cases,
            out,
        } => cmd_interpret(&common, run, fold, checkpoint, cases, &out),
        Command::BenchAttn {
            np,
            nh,
            dim,
            repeats,
            seed,
            out,
        } => cmd_bench(np, &nh, dim, repeats, seed, out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| survpath::Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| survpath::Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn cmd_synth(common: &Common, out: &Path) -> Result<()> {
    let started = unix_now();
    let cfg = common.load()?;
    create_dir(out)?;
    let cohort = generate(&cfg.synth_config())?;
    cohort.write(out)?;

    let mut run_cfg = cfg.clone();
    run_cfg.data = Default::default();
    run_cfg.data.dir = Some(PathBuf::from("."));
    run_cfg.output.dir = PathBuf::from("runs");
    let text = relative_toml(&run_cfg)?;
    write(&out.join("config.toml"), &text)?;

    let mut m = RunManifest::new("synth", cfg.seed, cfg.to_toml()?, started);
    for name in [
        "labels.csv",
        "expression.tsv",
        "pathways.gmt",
        "splits.csv",
        "true_risk.csv",
        "ground_truth.json",
        "config.toml",
        "patches",
    ] {
        m.add_outputs(&out.join(name))?;
    }
    m.finished_unix = unix_now();
    m.save(&out.join("synth_manifest.json"))?;
    eprintln!(
        "wrote {} cases to {} (planted pathway {})",
        cohort.labels.len(),
        out.display(),
        cohort.truth.planted_pathway
    );
    Ok(())
}

/// Config snapshot with the data directory kept relative.
fn relative_toml(cfg: &Config) -> Result<String> {
    let mut c = cfg.clone();
    c.data.dir = Some(PathBuf::from("."));
    Ok(c.to_toml()?)
}

fn load_pathways(cfg: &Config, data: &Dataset) -> Result<Vec<PathwayDefinition>> {
    let paths = cfg.data_paths()?;
    let sets = paths
        .gene_sets
        .iter()
        .map(|p| parse_gene_sets(p))
        .collect::<survpath::Result<Vec<_>>>()?;
    Ok(tokens_for_granularity(
        cfg.model.granularity,
        &sets,
        &data.genes,
        cfg.model.coverage,
    )?)
}

fn load_folds(cfg: &Config, data: &Dataset) -> Result<Vec<FoldSplit>> {
    let strata: Vec<(String, String)> = data
        .cases
        .iter()
        .map(|c| (c.label.case_id.clone(), c.label.site.clone()))
        .collect();
    match cfg.splits_path() {
        Some(p) => {
            let splits = read_splits(&p, &strata.into_iter().collect())?;
            if splits.len() != cfg.train.folds {
                bail!(survpath::Error::Data(format!(
                    "{} has {} folds but train.folds is {}",
                    p.display(),
                    splits.len(),
                    cfg.train.folds
                )));
            }
            Ok(splits)
        }
        None => Ok(make_folds(&strata, cfg.train.folds, cfg.seed)?),
    }
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: Option<usize>,
    val_cindex: Option<f64>,
    n_train: usize,
    n_val: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    folds: Vec<FoldSummary>,
    mean_val_cindex: Option<f64>,
}

fn cmd_train(common: &Common, out: Option<PathBuf>, jobs: usize) -> Result<()> {
    let started = unix_now();
    let cfg = common.load()?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    let paths = cfg.data_paths()?;
    let data = Dataset::load(&paths)?;
    let pathways = load_pathways(&cfg, &data)?;
    let folds = load_folds(&cfg, &data)?;
    let setup = ModelSetup {
        config: cfg.model.model_config(),
        granularity: cfg.model.granularity,
        pathways,
    };
    let train_cfg = cfg.train_config();
    create_dir(&out)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building the worker pool")?;
    let results = pool.install(|| {
        folds
            .par_iter()
            .map(|f| train_fold(&train_cfg, &setup, f, &data))
            .collect::<Vec<_>>()
    });

    let mut summary = Vec::new();
    for (split, r) in folds.iter().zip(results) {
        let r = r.with_context(|| format!("training fold {}", split.fold))?;
        let dir = out.join(format!("fold{}", r.fold));
        create_dir(&dir)?;
        r.checkpoint().save(&dir.join("checkpoint.spck"))?;
        write(&dir.join("metrics.csv"), metrics_log_csv(&r.log))?;
        write_risks(&dir.join("val_risks.csv"), &r.val_risks)?;
        summary.push(FoldSummary {
            fold: r.fold,
            best_epoch: r.meta.best_epoch,
            val_cindex: r.best_cindex().filter(|c| c.is_finite()),
            n_train: split.train.len(),
            n_val: split.val.len(),
        });
        eprintln!(
            "fold {}: best epoch {:?}, validation c-index {:?}",
            r.fold,
            r.meta.best_epoch,
            r.best_cindex()
        );
    }
    write_splits(&out.join("splits.csv"), &folds)?;
    let scored: Vec<f64> = summary.iter().filter_map(|s| s.val_cindex).collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            folds: summary,
            mean_val_cindex: mean,
        },
    )?;

    let mut m = RunManifest::new("train", cfg.seed, cfg.to_toml()?, started);
    m.add_inputs(&paths.labels)?;
    m.add_inputs(&paths.expression)?;
    m.add_inputs(&paths.patches)?;
    for g in &paths.gene_sets {
        m.add_inputs(g)?;
    }
    if let Some(p) = cfg.splits_path() {
        m.add_inputs(&p)?;
    }
    for f in &folds {
        m.add_outputs(&out.join(format!("fold{}", f.fold)))?;
    }
    m.add_outputs(&out.join("splits.csv"))?;
    m.add_outputs(&out.join("summary.json"))?;
    m.finished_unix = unix_now();
    m.save(&out.join("manifest.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    events: usize,
    c_index: f64,
    /// Mean of per-fold validation c-indices, when scoring a run.
    mean_fold_cindex: Option<f64>,
    median_risk: f64,
    n_high: usize,
    n_low: usize,
    logrank_statistic: Option<f64>,
    logrank_p: Option<f64>,
}

fn cmd_eval(
    common: &Common,
    run: Option<PathBuf>,
    risks: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let started = unix_now();
    let cfg = common.load()?;
    let paths = cfg.data_paths()?;
    let labels = survpath::data::read_labels(&paths.labels)?;
    let by_id: BTreeMap<&str, &survpath::data::Label> =
        labels.iter().map(|l| (l.case_id.as_str(), l)).collect();

    let mut fold_cindex = Vec::new();
    let mut inputs = vec![paths.labels.clone()];
    let pooled: Vec<(String, f64)> = match (&run, &risks) {
        (Some(dir), None) => {
            let mut all = Vec::new();
            let mut k = 0;
            while dir.join(format!("fold{k}")).is_dir() {
                let f = dir.join(format!("fold{k}/val_risks.csv"));
                let fold: Vec<(String, f64)> = read_risks(&f)?.into_iter().collect();
                if let Ok(c) = cohort_for(&fold, &by_id).and_then(|c| Ok(c_index(&c)?)) {
                    fold_cindex.push(c);
                }
                inputs.push(f);
                all.extend(fold);
                k += 1;
            }
            if all.is_empty() {
                bail!(survpath::Error::Data(format!(
                    "{} holds no fold results",
                    dir.display()
                )));
            }
            all
        }
        (None, Some(f)) => {
            inputs.push(f.clone());
            read_risks(f)?.into_iter().collect()
        }
        _ => bail!(survpath::Error::Config(
            "eval needs exactly one of --run or --risks".into()
        )),
    };
    let cohort = cohort_for(&pooled, &by_id)?;
    let c = c_index(&cohort)?;
    let (high, low) = median_split(&cohort)?;
    let (hi, lo) = (cohort.subset(&high), cohort.subset(&low));
    let logrank = if high.is_empty() || low.is_empty() {
        None
    } else {
        logrank_test(&hi, &lo).ok()
    };
    let mut sorted = cohort.risks.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };

    create_dir(out)?;
    let report = EvalReport {
        n,
        events: cohort.censored.iter().filter(|c| !**c).count(),
        c_index: c,
        mean_fold_cindex: (!fold_cindex.is_empty())
            .then(|| fold_cindex.iter().sum::<f64>() / fold_cindex.len() as f64),
        median_risk: median,
        n_high: high.len(),
        n_low: low.len(),
        logrank_statistic: logrank.map(|l| l.statistic),
        logrank_p: logrank.map(|l| l.p_value),
    };
    write_json(&out.join("metrics.json"), &report)?;
    write(&out.join("km.csv"), km_csv(&hi, &lo)?)?;
    if let Some(l) = logrank {
        eprintln!("c-index {c:.4}, logrank p = {:.3e}", l.p_value);
    } else {
        eprintln!("c-index {c:.4}, logrank undefined");
    }

    let mut m = RunManifest::new("eval", cfg.seed, cfg.to_toml()?, started);
    for i in &inputs {
        m.add_inputs(i)?;
    }
    m.add_outputs(&out.join("metrics.json"))?;
    m.add_outputs(&out.join("km.csv"))?;
    m.finished_unix = unix_now();
    m.save(&out.join("manifest.json"))?;
    Ok(())
}

fn cohort_for(
    risks: &[(String, f64)],
    labels: &BTreeMap<&str, &survpath::data::Label>,
) -> Result<RiskedCohort> {
    let mut r = Vec::with_capacity(risks.len());
    let mut t = Vec::with_capacity(risks.len());
    let mut c = Vec::with_capacity(risks.len());
    for (id, risk) in risks {
        let l = labels
            .get(id.as_str())
            .ok_or_else(|| survpath::Error::Data(format!("case `{id}` has no label")))?;
        r.push(*risk);
        t.push(l.time_months);
        c.push(l.censored());
    }
    Ok(RiskedCohort::new(r, t, c)?)
}

/// `t,S_high,S_low,n_high,n_low` on the union of both groups' time grids.
fn km_csv(high: &RiskedCohort, low: &RiskedCohort) -> Result<String> {
    let curve = |c: &RiskedCohort| -> Result<Option<survpath::metrics::KMCurve>> {
        if c.is_empty() {
            Ok(None)
        } else {
            Ok(Some(km_estimate(&c.times, &c.censored)?))
        }
    };
    let (kh, kl) = (curve(high)?, curve(low)?);
    let mut grid: Vec<f64> = kh
        .iter()
        .chain(kl.iter())
        .flat_map(|k| k.times.iter().copied())
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut out = String::from("t,S_high,S_low,n_high,n_low\n");
    let fmt = |k: &Option<survpath::metrics::KMCurve>, t: f64| match k {
        Some(k) => (k.survival_at(t).to_string(), k.at_risk_at(t).to_string()),
        None => (String::new(), "0".to_string()),
    };
    for t in grid {
        let (sh, nh) = fmt(&kh, t);
        let (sl, nl) = fmt(&kl, t);
        let _ = writeln!(out, "{t},{sh},{sl},{nh},{nl}");
    }
    Ok(out)
}

#[derive(Serialize)]
struct InterpretOutput {
    checkpoint: PathBuf,
    fold: usize,
    /// Pathways by mean `|IG|` over the reported cases.
    pathway_ranking: Vec<NamedScore>,
    max_completeness_error: f64,
    cases: Vec<AttributionReport>,
}

fn cmd_interpret(
    common: &Common,
    run: Option<PathBuf>,
    fold: Option<usize>,
    checkpoint: Option<PathBuf>,
    mut cases: Vec<String>,
    out: &Path,
) -> Result<()> {
    let started = unix_now();
    let cfg = common.load()?;
    let ck_path = match (&run, checkpoint) {
        (Some(dir), None) => {
            let f = fold.ok_or_else(|| survpath::Error::Config("--run needs --fold".into()))?;
            dir.join(format!("fold{f}/checkpoint.spck"))
        }
        (None, Some(p)) => p,
        _ => bail!(survpath::Error::Config(
            "interpret needs --run with --fold, or --checkpoint".into()
        )),
    };
    let ck = Checkpoint::load(&ck_path)?;
    let meta = ck.meta.clone();
    if cases.is_empty() {
        let dir = run.as_ref().ok_or_else(|| {
            survpath::Error::Config("name cases with --case when using --checkpoint".into())
        })?;
        let splits = read_splits(&dir.join("splits.csv"), &BTreeMap::new())?;
        let split = splits
            .into_iter()
            .find(|s| s.fold == meta.fold)
            .ok_or_else(|| {
                survpath::Error::Data(format!("fold {} missing from splits", meta.fold))
            })?;
        cases = split.val;
    }
    let paths = cfg.data_paths()?;
    let data = Dataset::load(&paths)?;
    if data.genes.names() != meta.genes.as_slice() {
        bail!(survpath::Error::Data(
            "expression genes differ from the checkpoint's genes".into()
        ));
    }
    let model = ck.into_model()?;
    let opts = cfg.report_options();
    let mut reports = Vec::with_capacity(cases.len());
    for id in &cases {
        let i = data
            .position(id)
            .ok_or_else(|| survpath::Error::Data(format!("case `{id}` is not in the dataset")))?;
        let case = &data.cases[i];
        let genes = meta.norm.apply(&case.expression)?;
        reports.push(AttributionReport::build(
            &model,
            CaseInputs {
                case_id: id,
                gene_names: &meta.genes,
                genes: &genes,
                embeddings: &case.patches.embeddings,
                coords: case.patches.coords.as_deref(),
            },
            opts,
        )?);
    }
    let mut mean_abs: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &reports {
        for p in &r.pathways {
            *mean_abs.entry(&p.name).or_default() += p.score.abs() / reports.len() as f64;
        }
    }
    let mut ranking: Vec<NamedScore> = mean_abs
        .into_iter()
        .map(|(name, score)| NamedScore {
            name: name.to_string(),
            score,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.name.cmp(&b.name))
    });
    let output = InterpretOutput {
        checkpoint: ck_path.clone(),
        fold: meta.fold,
        pathway_ranking: ranking,
        max_completeness_error: reports
            .iter()
            .map(|r| r.completeness_error)
            .fold(0.0, f64::max),
        cases: reports,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &output)?;
    if let Some(top) = output.pathway_ranking.first() {
        eprintln!("top pathway by mean |IG|: {} ({:.4})", top.name, top.score);
    }

    let mut m = RunManifest::new("interpret", cfg.seed, cfg.to_toml()?, started);
    m.add_inputs(&ck_path)?;
    m.add_inputs(&paths.expression)?;
    m.add_outputs(out)?;
    m.finished_unix = unix_now();
    let name = out
        .file_stem()
        .map(|s| format!("{}.manifest.json", s.to_string_lossy()))
        .unwrap_or_else(|| "interpret.manifest.json".into());
    m.save(&out.with_file_name(name))?;
    Ok(())
}

fn cmd_bench(
    np: u64,
    nh: &[u64],
    dim: usize,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if dim == 0 || repeats == 0 {
        bail!(survpath::Error::Config(
            "--dim and --repeats must be positive".into()
        ));
    }
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    let w = FusionWeights::new(&mut store, dim, &mut rng)?;
    let cfg = FusionConfig::full(dim);
    let mut csv = String::from("n_p,n_h,d,masked_entries,dense_entries,ratio,masked_ms,dense_ms\n");
    for &h in nh {
        let masked = masked_score_entries(np, h, &cfg);
        let dense = dense_score_entries(np, h);
        let p_tok = random_tokens(np as usize, dim, &mut rng);
        let h_tok = random_tokens(h as usize, dim, &mut rng);
        let t = Instant::now();
        for _ in 0..repeats {
            fuse(&cfg, &w, &store, &p_tok, &h_tok)?;
        }
        let masked_ms = t.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        let dense_ms = if (np + h) as usize <= DENSE_GUARD {
            let t = Instant::now();
            for _ in 0..repeats {
                dense_reference(&cfg, &w, &store, &p_tok, &h_tok, DenseMask::Blocks)?;
            }
            format!("{:.3}", t.elapsed().as_secs_f64() * 1e3 / repeats as f64)
        } else {
            "refused".to_string()
        };
        let _ = writeln!(
            csv,
            "{np},{h},{dim},{masked},{dense},{:.6},{masked_ms:.3},{dense_ms}",
            masked as f64 / dense as f64
        );
    }
    match out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn random_tokens(n: usize, d: usize, rng: &mut survpath::rng::SeededRng) -> Matrix {
    use rand::Rng;
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(n, d, data).expect("sized buffer")
}
