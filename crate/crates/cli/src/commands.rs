use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coreselect::baselines::{forgetting_ranking, kcenters_ranking, random_subset, ForgettingTable};
use coreselect::config::{LoadedData, RunConfig};
use coreselect::data::Dataset;
use coreselect::eval::{
    consistency, cossim_stats, cross_test, imbalance, stride_experiment, subset_report, train_classifier,
    train_classifier_observed, write_report_csv, EvalReport,
};
use coreselect::scoring::{
    append_cossim_log, fraction_to_size, load_scores, read_ranking_csv, read_subset, truncate_cossim_log,
    write_atomic, write_ranking_csv, write_subset, CoresetRanking,
};
use coreselect::train::{ContrastiveTrainer, TrainSettings, SCORES_FILE};
use coreselect::{Error, Result};
use log::info;
use serde_json::{json, Value};

use crate::{ArtifactArgs, BaselineMethod, EvalCommand, Globals, SelectArgs};

pub const CONFIG_ECHO: &str = "config_echo.conf";
pub const METADATA: &str = "run_metadata.json";
pub const COSSIM_LOG: &str = "cossim_log.csv";
pub const RANKING: &str = "ranking.csv";
pub const SUBSET: &str = "subset.txt";

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!("missing artifact: {}", path.display())))
    }
}

fn load_config(g: &Globals) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            require(path)?;
            RunConfig::from_file(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_output(dir: &Path, echo: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(CONFIG_ECHO), echo.as_bytes())
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Timestamps live here so every other artifact stays byte-reproducible.
fn write_metadata(dir: &Path, command: &str, started: SystemTime) -> Result<()> {
    let finished = SystemTime::now();
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "started_unix": unix_seconds(started),
        "finished_unix": unix_seconds(finished),
        "elapsed_seconds": unix_seconds(finished) - unix_seconds(started),
    });
    write_json(&dir.join(METADATA), &meta)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn train_score(g: &Globals) -> Result<()> {
    let started = SystemTime::now();
    let cfg = load_config(g)?;
    let data = cfg.dataset.load()?;
    let dir = cfg.output_dir.clone();
    prepare_output(&dir, &cfg.echo_text())?;
    let settings = TrainSettings::from_config(&cfg);
    let hash = cfg.hash();
    let log_path = dir.join(COSSIM_LOG);
    let mut trainer = if g.resume && dir.join(SCORES_FILE).exists() {
        let t = ContrastiveTrainer::resume(&data.train, settings, hash, &dir)?;
        truncate_cossim_log(&log_path, t.epochs_done() as u32)?;
        info!("resuming after epoch {}", t.epochs_done());
        t
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        let t = ContrastiveTrainer::new(&data.train, settings, hash)?;
        t.save_checkpoint(&dir)?;
        t
    };
    while !trainer.is_finished() {
        let summary = trainer.run_epoch(&data.train)?;
        append_cossim_log(&log_path, summary.epoch as u32, &summary.pair_cossims)?;
        trainer.save_checkpoint(&dir)?;
        info!(
            "epoch {} loss {:.6} mean_cossim {:.6}",
            summary.epoch, summary.mean_loss, summary.mean_cossim
        );
    }
    let table = trainer.table();
    let ranking = table.rank()?;
    let mean = table.mean_cossim()?;
    write_ranking_csv(&dir.join(RANKING), &ranking, Some(&mean), None)?;
    if let Some(truth) = &data.truth {
        let top = ranking.select(fraction_to_size(0.2, ranking.len())?, 0)?;
        let hits = truth.hard_indices.iter().filter(|k| top.contains(k)).count();
        info!(
            "planted hard examples in the top 20%: {hits} of {}",
            truth.hard_indices.len()
        );
    }
    println!(
        "train-score: {} examples, {} epochs, ranking written to {}",
        ranking.len(),
        table.epochs_seen(),
        dir.join(RANKING).display()
    );
    write_metadata(&dir, "train-score", started)
}

pub fn select(g: &Globals, args: &SelectArgs) -> Result<()> {
    let started = SystemTime::now();
    require(&args.ranking)?;
    let ranking = read_ranking_csv(&args.ranking)?;
    let size = match (args.size, args.fraction) {
        (Some(size), _) => size,
        (None, Some(f)) => fraction_to_size(f, ranking.len())?,
        (None, None) => return Err(Error::config("select needs --size or --fraction")),
    };
    if size == 0 {
        return Err(Error::config("subset size must be positive"));
    }
    let subset = ranking.select(size, args.stride)?;
    match &g.out {
        Some(dir) => {
            let cfg = load_config(g)?;
            let echo = format!(
                "{}select.ranking = {}\nselect.size = {size}\nselect.stride = {}\n",
                cfg.echo_text(),
                args.ranking.display(),
                args.stride
            );
            prepare_output(dir, &echo)?;
            write_subset(&dir.join(SUBSET), subset)?;
            println!("select: {} indices written to {}", subset.len(), dir.join(SUBSET).display());
            write_metadata(dir, "select", started)
        }
        None => {
            let text: String = subset.iter().map(|k| format!("{k}\n")).collect();
            print!("{text}");
            Ok(())
        }
    }
}

struct EvalContext {
    cfg: RunConfig,
    dir: PathBuf,
}

impl EvalContext {
    fn data(&self) -> Result<LoadedData> {
        self.cfg.dataset.load()
    }

    fn rankings(&self, args: &ArtifactArgs) -> Result<Vec<CoresetRanking>> {
        let paths = if args.rankings.is_empty() {
            &self.cfg.eval.rankings
        } else {
            &args.rankings
        };
        if paths.is_empty() {
            return Err(Error::config("no ranking given (use --ranking or eval.rankings)"));
        }
        paths
            .iter()
            .map(|p| {
                require(p)?;
                read_ranking_csv(p)
            })
            .collect()
    }

    fn ranking_for(&self, args: &ArtifactArgs, train: &Dataset) -> Result<CoresetRanking> {
        let ranking = self.rankings(args)?.swap_remove(0);
        if ranking.len() != train.len() {
            return Err(Error::config(format!(
                "ranking covers {} examples, training set has {}",
                ranking.len(),
                train.len()
            )));
        }
        Ok(ranking)
    }

    fn summary(&self, experiment: &str, body: Value) -> Result<()> {
        let doc = json!({
            "experiment": experiment,
            "config": self.cfg.echo_text(),
            "results": body,
        });
        write_json(&self.dir.join(format!("{experiment}_summary.json")), &doc)
    }

    fn report(&self, experiment: &str, reports: &[&EvalReport]) -> Result<()> {
        write_report_csv(&self.dir.join(format!("{experiment}_report.csv")), reports)
    }
}

fn aggregate(report: &EvalReport) -> Value {
    json!({
        "method": report.method,
        "L": report.size,
        "stride": report.stride,
        "seeds": report.seeds,
        "test_accuracy_mean": report.test_accuracy_mean,
        "test_accuracy_std": report.test_accuracy_std,
    })
}

fn test_split(data: &LoadedData) -> Result<&Dataset> {
    data.test
        .as_ref()
        .ok_or_else(|| Error::config("this evaluation needs a test split (dataset test paths or synthetic.test_n)"))
}

pub fn eval(g: &Globals, which: EvalCommand) -> Result<()> {
    let started = SystemTime::now();
    let cfg = load_config(g)?;
    let dir = cfg.output_dir.clone();
    prepare_output(&dir, &cfg.echo_text())?;
    let ctx = EvalContext { cfg, dir };
    let name = match &which {
        EvalCommand::Stride(_) => "stride",
        EvalCommand::Cross(_) => "cross",
        EvalCommand::Consistency(_) => "consistency",
        EvalCommand::Imbalance(_) => "imbalance",
        EvalCommand::CossimStats(_) => "cossim-stats",
        EvalCommand::Baseline { .. } => "baseline",
    };
    match which {
        EvalCommand::Stride(args) => eval_stride(&ctx, &args)?,
        EvalCommand::Cross(args) => eval_cross(&ctx, &args)?,
        EvalCommand::Consistency(args) => eval_consistency(&ctx, &args)?,
        EvalCommand::Imbalance(args) => eval_imbalance(&ctx, &args)?,
        EvalCommand::CossimStats(args) => eval_cossim_stats(&ctx, &args)?,
        EvalCommand::Baseline { method } => eval_baseline(&ctx, method)?,
    }
    write_metadata(&ctx.dir, &format!("eval {name}"), started)
}

fn eval_stride(ctx: &EvalContext, args: &ArtifactArgs) -> Result<()> {
    let data = ctx.data()?;
    let ranking = ctx.ranking_for(args, &data.train)?;
    let test = test_split(&data)?;
    let e = &ctx.cfg.eval;
    let n = data.train.len();
    let size = fraction_to_size(e.subset_fraction, n)?;
    let strides: Vec<usize> = e.strides.iter().map(|f| (f * n as f64).round() as usize).collect();
    let res = stride_experiment(&ranking, &data.train, test, size, &strides, e.runs, &ctx.cfg.classifier, ctx.cfg.seed)?;
    let mut all: Vec<&EvalReport> = res.coreset.iter().collect();
    all.push(&res.random);
    ctx.report("stride", &all)?;
    ctx.summary(
        "stride",
        json!({
            "coreset": res.coreset.iter().map(aggregate).collect::<Vec<_>>(),
            "random": aggregate(&res.random),
        }),
    )?;
    let arms: Vec<String> = res
        .coreset
        .iter()
        .map(|r| format!("s={} {:.4}", r.stride, r.test_accuracy_mean))
        .collect();
    println!(
        "stride: L={size} {} | random {:.4}",
        arms.join(" "),
        res.random.test_accuracy_mean
    );
    Ok(())
}

fn eval_cross(ctx: &EvalContext, args: &ArtifactArgs) -> Result<()> {
    let data = ctx.data()?;
    let ranking = ctx.ranking_for(args, &data.train)?;
    let e = &ctx.cfg.eval;
    let n = data.train.len();
    let test_size = fraction_to_size(e.test_frac, n)?;
    let mut reports = Vec::new();
    let mut settings = Vec::new();
    let mut line = Vec::new();
    for &frac in &e.train_fracs {
        let train_size = fraction_to_size(frac, n)?;
        let (c2n, n2c) = cross_test(&ranking, &data.train, train_size, test_size, e.runs, &ctx.cfg.classifier, ctx.cfg.seed)?;
        line.push(format!(
            "{frac}: C->N {:.4} N->C {:.4}",
            c2n.test_accuracy_mean, n2c.test_accuracy_mean
        ));
        settings.push(json!({
            "train_frac": frac,
            "test_frac": e.test_frac,
            "c_to_n": aggregate(&c2n),
            "n_to_c": aggregate(&n2c),
            "difference": c2n.test_accuracy_mean - n2c.test_accuracy_mean,
        }));
        reports.push(c2n);
        reports.push(n2c);
    }
    ctx.report("cross", &reports.iter().collect::<Vec<_>>())?;
    ctx.summary("cross", Value::Array(settings))?;
    println!("cross: {}", line.join("; "));
    Ok(())
}

fn eval_consistency(ctx: &EvalContext, args: &ArtifactArgs) -> Result<()> {
    let rankings = ctx.rankings(args)?;
    let n = rankings[0].len();
    let size = fraction_to_size(ctx.cfg.eval.subset_fraction, n)?;
    let ratio = consistency(&rankings, size)?;
    let f = size as f64 / n as f64;
    let random = f.powi(rankings.len() as i32 - 1);
    let csv = format!("L,rankings,ratio,random_expectation\n{size},{},{ratio},{random}\n", rankings.len());
    write_atomic(&ctx.dir.join("consistency_report.csv"), csv.as_bytes())?;
    ctx.summary(
        "consistency",
        json!({"L": size, "rankings": rankings.len(), "ratio": ratio, "random_expectation": random}),
    )?;
    println!(
        "consistency: {} rankings, L={size}, ratio {ratio:.4} (random expectation {random:.4})",
        rankings.len()
    );
    Ok(())
}

fn eval_imbalance(ctx: &EvalContext, args: &ArtifactArgs) -> Result<()> {
    let data = ctx.data()?;
    let train = &data.train;
    let subset_path = args.subset.as_ref().or(ctx.cfg.eval.subset.as_ref());
    let subset = match subset_path {
        Some(p) => {
            require(p)?;
            read_subset(p)?
        }
        None => {
            let ranking = ctx.ranking_for(args, train)?;
            let size = fraction_to_size(ctx.cfg.eval.subset_fraction, ranking.len())?;
            ranking.select(size, 0)?.to_vec()
        }
    };
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("imbalance needs a labelled training set"))?;
    let hist = imbalance(&subset, labels, train.num_classes)?;
    let mut csv = String::from("class,count,fraction\n");
    for (c, (count, frac)) in hist.counts.iter().zip(&hist.fraction).enumerate() {
        csv.push_str(&format!("{c},{count},{frac}\n"));
    }
    write_atomic(&ctx.dir.join("imbalance_report.csv"), csv.as_bytes())?;
    ctx.summary("imbalance", json!({"subset_size": subset.len(), "histogram": hist}))?;
    let shares: Vec<String> = hist.fraction.iter().map(|f| format!("{f:.4}")).collect();
    println!("imbalance: {} examples, class fractions [{}]", subset.len(), shares.join(", "));
    Ok(())
}

fn eval_cossim_stats(ctx: &EvalContext, args: &ArtifactArgs) -> Result<()> {
    let path = args
        .scores
        .as_ref()
        .or(ctx.cfg.eval.scores.as_ref())
        .ok_or_else(|| Error::config("no score checkpoint given (use --scores or eval.scores)"))?;
    require(path)?;
    let table = load_scores(path)?;
    let stats = cossim_stats(&table.mean_cossim()?)?;
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in stats.counts.iter().enumerate() {
        csv.push_str(&format!("{},{},{count}\n", stats.bin_edges[i], stats.bin_edges[i + 1]));
    }
    write_atomic(&ctx.dir.join("cossim_histogram.csv"), csv.as_bytes())?;
    ctx.summary("cossim-stats", json!(stats))?;
    println!("cossim-stats: mean {:.4} median {:.4}", stats.mean, stats.median);
    Ok(())
}

fn parse_method(raw: &str) -> Result<BaselineMethod> {
    match raw {
        "random" => Ok(BaselineMethod::Random),
        "forgetting" => Ok(BaselineMethod::Forgetting),
        "kcenters" => Ok(BaselineMethod::Kcenters),
        other => Err(Error::config(format!(
            "eval.method: unknown baseline {other:?} (random, forgetting, kcenters)"
        ))),
    }
}

fn eval_baseline(ctx: &EvalContext, method: Option<BaselineMethod>) -> Result<()> {
    let method = match method {
        Some(m) => m,
        None => parse_method(&ctx.cfg.eval.method)?,
    };
    let name = match method {
        BaselineMethod::Random => "random",
        BaselineMethod::Forgetting => "forgetting",
        BaselineMethod::Kcenters => "kcenters",
    };
    let data = ctx.data()?;
    let train = &data.train;
    let (cfg, seed) = (&ctx.cfg.classifier, ctx.cfg.seed);
    let n = train.len();
    let size = fraction_to_size(ctx.cfg.eval.subset_fraction, n)?;
    let all: Vec<usize> = (0..n).collect();
    let ranking = match method {
        BaselineMethod::Random => None,
        BaselineMethod::Forgetting => {
            let mut table = ForgettingTable::new(n);
            train_classifier_observed(train, &all, cfg, seed, |_, clf| table.update(&clf.correctness(train, &all)?))?;
            Some(forgetting_ranking(&table))
        }
        BaselineMethod::Kcenters => {
            let clf = train_classifier(train, &all, cfg, seed)?;
            Some(kcenters_ranking(clf.features(train, &all)?.view(), seed)?)
        }
    };
    let subset = match &ranking {
        None => random_subset(n, size, seed)?,
        Some(r) => {
            write_ranking_csv(&ctx.dir.join(format!("{name}_ranking.csv")), r, None, Some(name))?;
            r.select(size, 0)?.to_vec()
        }
    };
    write_subset(&ctx.dir.join(format!("{name}_subset.txt")), &subset)?;
    let Some(test) = data.test.as_ref() else {
        log::warn!("no test split: skipping the accuracy report");
        println!("baseline {name}: L={size} subset written");
        return Ok(());
    };
    let report = subset_report(name, train, &subset, test, ctx.cfg.eval.runs, cfg, seed)?;
    ctx.report(&format!("baseline_{name}"), &[&report])?;
    ctx.summary(&format!("baseline_{name}"), aggregate(&report))?;
    println!(
        "baseline {name}: L={size} accuracy {:.4} +- {:.4} over {} runs",
        report.test_accuracy_mean,
        report.test_accuracy_std,
        report.runs.len()
    );
    Ok(())
}
