use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use metaikg::checkpoint;
use metaikg::dataset::{load_inductive_dataset, DatasetLayout, InductiveDataset};
use metaikg::evaluator::{evaluate, write_query_tsv, EvalConfig, EvalData, EvalReport, SliceSpec};
use metaikg::subgraph::ExtractOptions;
use metaikg::synthkg::{generate, SynthSpec};
use metaikg::trainer::{TrainConfig, TrainLogRow, Trainer};
use serde::Serialize;

use crate::config::{EvalSettings, RunArgs, RunConfig};
use crate::failure::{config_error, runtime_error, Context, Failure};
use crate::output::{write_json, write_text, OutputLock};

pub fn load_dataset(
    dir: &Path,
    layout: &DatasetLayout,
    extract: &ExtractOptions,
) -> Result<InductiveDataset, Failure> {
    let start = std::time::Instant::now();
    let d = load_inductive_dataset(dir, layout, extract)
        .context(format!("loading dataset {}", dir.display()))?;
    info!(
        "loaded {} ({} train triplets, {} test triplets) in {:.1?}",
        dir.display(),
        d.train_triplets.len(),
        d.test_triplets.len(),
        start.elapsed()
    );
    Ok(d)
}

pub fn slice_specs(slices: &[Option<usize>], threshold: f64) -> Vec<SliceSpec> {
    slices
        .iter()
        .map(|s| match s {
            Some(k) => SliceSpec::at_most(*k),
            None => SliceSpec::few_shot(threshold),
        })
        .collect()
}

pub fn eval_config(settings: &EvalSettings, extract: ExtractOptions, seed: u64) -> EvalConfig {
    EvalConfig {
        negatives_per_side: settings.negatives_per_side,
        hits_k: settings.hits_k,
        filtered: settings.filtered,
        seed,
        extract,
    }
}

// ------------------------------------------------------------------ stats

pub fn stats(dataset: &Path, gamma: f64, hops: u32, out: Option<&Path>) -> Result<(), Failure> {
    let extract = ExtractOptions {
        hops,
        ..ExtractOptions::default()
    };
    let d = load_dataset(dataset, &DatasetLayout::default(), &extract)?;
    let stats = d.stats(gamma)?;
    let text = serde_json::to_string_pretty(&stats)?;
    println!("{text}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_text(&out.join("stats.json"), &(text + "\n"))?;
    }
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Debug, Serialize)]
struct MetricPair {
    auc_pr: f64,
    hits_at_10: f64,
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    n_test_used: usize,
    n_test_skipped: usize,
    auc_pr: f64,
    hits_at_10: f64,
    slices: BTreeMap<String, MetricPair>,
}

#[derive(Debug, Serialize)]
struct Summary {
    mode: String,
    hits_k: usize,
    seeds: Vec<u64>,
    mean: MetricPair,
    /// Means over the seeds whose report contains the slice.
    mean_slices: BTreeMap<String, MetricPair>,
    runs: Vec<SeedSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn summarize(config: &RunConfig, reports: &[(u64, EvalReport)]) -> Summary {
    let runs: Vec<SeedSummary> = reports
        .iter()
        .map(|(seed, r)| SeedSummary {
            seed: *seed,
            n_test_used: r.n_test_used,
            n_test_skipped: r.n_test_skipped,
            auc_pr: r.auc_pr,
            hits_at_10: r.hits_at_10,
            slices: r
                .slices
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        MetricPair {
                            auc_pr: s.metrics.auc_pr,
                            hits_at_10: s.metrics.hits_at_10,
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let mut mean_slices = BTreeMap::new();
    let labels: std::collections::BTreeSet<&String> =
        runs.iter().flat_map(|r| r.slices.keys()).collect();
    for label in labels {
        let present: Vec<&MetricPair> = runs.iter().filter_map(|r| r.slices.get(label)).collect();
        mean_slices.insert(
            label.clone(),
            MetricPair {
                auc_pr: mean(present.iter().map(|m| m.auc_pr)),
                hits_at_10: mean(present.iter().map(|m| m.hits_at_10)),
            },
        );
    }
    Summary {
        mode: config.train.mode.to_string(),
        hits_k: config.eval.hits_k,
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean: MetricPair {
            auc_pr: mean(runs.iter().map(|r| r.auc_pr)),
            hits_at_10: mean(runs.iter().map(|r| r.hits_at_10)),
        },
        mean_slices,
        runs,
    }
}

fn summary_csv(s: &Summary) -> String {
    let mut out = String::from("scope,seed,auc_pr,hits_at_k\n");
    for r in &s.runs {
        out += &format!("all,{},{},{}\n", r.seed, r.auc_pr, r.hits_at_10);
        for (label, m) in &r.slices {
            out += &format!("slice:{label},{},{},{}\n", r.seed, m.auc_pr, m.hits_at_10);
        }
    }
    out += &format!("all,mean,{},{}\n", s.mean.auc_pr, s.mean.hits_at_10);
    for (label, m) in &s.mean_slices {
        out += &format!("slice:{label},mean,{},{}\n", m.auc_pr, m.hits_at_10);
    }
    out
}

/// Keeps the header and the first `rows` data lines of an existing log.
fn truncate_log(path: &Path, rows: usize) -> Result<(), Failure> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept: Vec<&str> = text.lines().take(rows + 1).collect();
    if kept.first() != Some(&TrainLogRow::CSV_HEADER) {
        return Err(runtime_error(format!(
            "{} is not a training log",
            path.display()
        )));
    }
    if kept.len() != rows + 1 {
        warn!(
            "{} has fewer rows than the checkpoint's iteration count",
            path.display()
        );
    }
    kept.push("");
    write_text(path, &kept.join("\n"))
}

fn append_log(path: &Path, rows: &[TrainLogRow]) -> Result<(), Failure> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Trains one seed with per-epoch checkpoints in `dir`, then evaluates on the
/// test split.
pub fn train_seed(
    d: &InductiveDataset,
    train: &TrainConfig,
    eval: &EvalSettings,
    dir: &Path,
    resume: bool,
    dump_queries: bool,
) -> Result<EvalReport, Failure> {
    fs::create_dir_all(dir)?;
    let split = d.relation_split(train.gamma)?;
    let threshold = split.threshold;
    let trainer = Trainer::new(train.clone(), &d.train_graph, &d.train_triplets, split)?;
    let ckpt = dir.join("checkpoint.ckpt");
    let log_path = dir.join("train_log.csv");

    let mut state = if resume && ckpt.is_file() {
        let ck = checkpoint::load(&ckpt).context(format!("reading {}", ckpt.display()))?;
        ck.validate(train, &d.relations)?;
        if ck.header.config != *train {
            return Err(config_error(format!(
                "{} was written with a different training configuration",
                ckpt.display()
            )));
        }
        info!(
            "seed {}: resuming at iteration {}",
            train.seed, ck.state.iteration
        );
        truncate_log(&log_path, ck.state.iteration)?;
        ck.state
    } else {
        write_text(&log_path, &format!("{}\n", TrainLogRow::CSV_HEADER))?;
        trainer.initial_state()
    };

    let total = train.total_iterations();
    while state.iteration < total {
        let next = ((state.iteration / train.meta_updates) + 1) * train.meta_updates;
        let rows = trainer.run(&mut state, next.min(total), |_| Ok(()))?;
        append_log(&log_path, &rows)?;
        checkpoint::save(&ckpt, &state, train, &d.relations)?;
        let support = mean(rows.iter().map(|r| r.support_loss));
        let query = mean(rows.iter().filter_map(|r| r.query_loss));
        info!(
            "seed {} epoch {}/{}: support loss {support:.4}, query loss {query:.4}",
            train.seed,
            state.iteration.div_ceil(train.meta_updates),
            train.epochs
        );
    }
    if !ckpt.is_file() {
        checkpoint::save(&ckpt, &state, train, &d.relations)?;
    }

    let counts = d.train_relation_counts();
    let data = EvalData {
        test_graph: &d.test_graph,
        test_triplets: &d.test_triplets,
        relations: &d.relations,
        train_counts: &counts,
        slices: slice_specs(&eval.slices, threshold),
        relation_filter: None,
    };
    let outcome = evaluate(
        &state.params,
        &data,
        &eval_config(eval, train.extract, train.seed),
    )?;
    outcome.report.write(dir)?;
    if dump_queries {
        write_query_tsv(
            &dir.join("queries.tsv"),
            &outcome.queries,
            &d.test_entities,
            &d.relations,
        )?;
    }
    info!(
        "seed {}: auc_pr {:.4}, hits@{} {:.4} on {} test triplets",
        train.seed,
        outcome.report.auc_pr,
        eval.hits_k,
        outcome.report.hits_at_10,
        outcome.report.n_test_used
    );
    Ok(outcome.report)
}

pub fn warn_all(warnings: &[String]) {
    for w in warnings {
        warn!("{w}");
    }
}

pub fn train(args: &RunArgs, resume: bool, dump_queries: bool) -> Result<(), Failure> {
    let (cfg, warnings) = args.resolve()?;
    warn_all(&warnings);
    let dataset = cfg.dataset()?.to_path_buf();
    let out = cfg.out()?.to_path_buf();
    let _lock = OutputLock::acquire(&out)?;
    let d = load_dataset(&dataset, &cfg.layout, &cfg.train.extract)?;
    write_json(&out.join("config.json"), &cfg)?;
    d.relations.write_to(&out.join("relations.txt"))?;

    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let run = train_seed(
            &d,
            &cfg.for_seed(seed),
            &cfg.eval,
            &out.join(format!("seed-{seed}")),
            resume,
            dump_queries,
        )?;
        reports.push((seed, run));
    }
    let summary = summarize(&cfg, &reports);
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("summary.csv"), &summary_csv(&summary))?;
    println!(
        "mean over {} seeds: auc_pr {:.4}, hits@{} {:.4}",
        summary.seeds.len(),
        summary.mean.auc_pr,
        summary.hits_k,
        summary.mean.hits_at_10
    );
    Ok(())
}

// ------------------------------------------------------------------ eval

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub settings: EvalSettings,
    pub seed: Option<u64>,
    pub dump_queries: bool,
}

pub fn eval(req: &EvalRequest) -> Result<(), Failure> {
    let ck = checkpoint::load(&req.checkpoint)
        .context(format!("reading {}", req.checkpoint.display()))?;
    let train = ck.header.config.clone();
    let _lock = OutputLock::acquire(&req.out)?;
    let d = load_dataset(&req.dataset, &DatasetLayout::default(), &train.extract)?;
    ck.validate(&train, &d.relations).context(format!(
        "{} does not fit {}",
        req.checkpoint.display(),
        req.dataset.display()
    ))?;
    let threshold = d.relation_split(train.gamma)?.threshold;
    let counts = d.train_relation_counts();
    let data = EvalData {
        test_graph: &d.test_graph,
        test_triplets: &d.test_triplets,
        relations: &d.relations,
        train_counts: &counts,
        slices: slice_specs(&req.settings.slices, threshold),
        relation_filter: None,
    };
    let config = eval_config(&req.settings, train.extract, req.seed.unwrap_or(train.seed));
    let outcome = evaluate(&ck.state.params, &data, &config)?;
    outcome.report.write(&req.out)?;
    write_json(&req.out.join("eval_config.json"), &config)?;
    if req.dump_queries {
        write_query_tsv(
            &req.out.join("queries.tsv"),
            &outcome.queries,
            &d.test_entities,
            &d.relations,
        )?;
    }
    for note in &outcome.report.notes {
        warn!("{note}");
    }
    let r = &outcome.report;
    println!(
        "auc_pr {:.4}, hits@{} {:.4} on {} test triplets ({} skipped)",
        r.auc_pr, r.hits_k, r.hits_at_10, r.n_test_used, r.n_test_skipped
    );
    for (label, s) in &r.slices {
        println!(
            "  {label}: auc_pr {:.4}, hits@{} {:.4} on {} triplets over {} relations",
            s.metrics.auc_pr, r.hits_k, s.metrics.hits_at_10, s.metrics.triplets, s.relations
        );
    }
    Ok(())
}

// ------------------------------------------------------------------ synth

pub fn synth(out: &Path, spec_path: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = match spec_path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let _lock = OutputLock::acquire(out)?;
    let kg = generate(&spec)?;
    kg.write(out, &spec)?;
    let d = &kg.dataset;
    let split = d.relation_split(TrainConfig::default().gamma)?;
    println!(
        "wrote {}: {} train-graph facts, {} train triplets, {} test-graph facts, {} test triplets, K_T {:.2}",
        out.display(),
        d.train_graph.edges().len(),
        d.train_triplets.len(),
        d.test_graph.edges().len(),
        d.test_triplets.len(),
        split.threshold
    );
    Ok(())
}
