use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use choppy_core::baselines::{BICUT_F1_BM25, BICUT_F1_DRMM};
use choppy_core::data::{load_dataset, load_qrels, load_run, save_dataset, trec};
use choppy_core::metrics::oracle_cutoff;
use choppy_core::model::checkpoint;
use choppy_core::train::train_with_callback;
use choppy_core::{
    build_dataset, fixed_k_eval, forward, greedy_eval, model_eval, oracle_eval, render_table,
    split_train_test, synth_generate, BuildOptions, Dataset, Error, EvalReport, MetricKind,
    ModelConfig, ModelParams, TrainConfig,
};

use crate::config::{model_mismatches, resolve_model, resolve_train, FileConfig};
use crate::{
    AblateArgs, Baseline, Cli, Command, EvalArgs, ExplainArgs, Failure, IngestArgs, SplitArgs,
    SynthArgs, TrainArgs,
};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(args) => ingest(&file, args),
        Command::Synth(args) => synth(&file, args),
        Command::Split(args) => split(&file, args),
        Command::Train(args) => train(&file, args),
        Command::Eval(args) => eval(&file, args),
        Command::Ablate(args) => ablate(&file, args),
        Command::Explain(args) => explain(&file, args),
    }
}

fn require_input(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "input file {} does not exist",
            path.display()
        )))
    }
}

fn output_dir(dir: &Path) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("creating {}: {e}", dir.display()),
        )))
    })?;
    Ok(dir.to_path_buf())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Failure::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    }
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), std::io::Error> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(std::io::Error::from)
        .and_then(|()| w.write_all(b"\n"))
        .and_then(|()| w.flush())
        .map_err(io_err(path))
}

fn open_dataset(path: &Path) -> Result<Dataset, Failure> {
    require_input(path)?;
    Ok(load_dataset(path)?)
}

#[derive(Serialize)]
struct DatasetSummary {
    queries: usize,
    max_list_len: usize,
    mean_relevant_in_list: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_relevant_judged: Option<f64>,
}

fn ingest(file: &FileConfig, args: IngestArgs) -> Outcome {
    require_input(&args.run)?;
    require_input(&args.qrels)?;
    let options = BuildOptions {
        top_n: args.top_n.unwrap_or(file.data.top_n),
        recall_from_qrels: args.recall_from_qrels || file.data.recall_from_qrels,
    };
    let run = load_run(&args.run)?;
    let qrels = load_qrels(&args.qrels)?;
    let dataset = build_dataset(&run, &qrels, options)?;
    let dir = output_dir(&args.out)?;
    save_dataset(&dir.join("dataset.jsonl"), &dataset)?;
    let judged: usize = dataset
        .examples
        .iter()
        .map(|e| qrels.relevant_total(e.query_id()))
        .sum();
    let summary = DatasetSummary {
        queries: dataset.len(),
        max_list_len: dataset.max_len(),
        mean_relevant_in_list: dataset.mean_relevant(),
        mean_relevant_judged: (!dataset.is_empty()).then(|| judged as f64 / dataset.len() as f64),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "ingested {} queries (top {}); mean relevant per query: {:.2} judged, {:.2} in list",
        summary.queries,
        options.top_n,
        summary.mean_relevant_judged.unwrap_or(0.0),
        summary.mean_relevant_in_list
    );
    Ok(())
}

fn synth(file: &FileConfig, args: SynthArgs) -> Outcome {
    let mut cfg = file.synth.clone();
    if let Some(v) = args.queries {
        cfg.queries = v;
    }
    if let Some(v) = args.list_len {
        cfg.list_len = v;
    }
    if let Some(v) = args.relevant_location {
        cfg.relevant_location = v;
    }
    if let Some(v) = args.nonrelevant_location {
        cfg.nonrelevant_location = v;
    }
    if let Some(v) = args.spread {
        cfg = cfg.with_spread(v);
    }
    if let Some(v) = args.min_relevant {
        cfg.min_relevant = v;
    }
    if let Some(v) = args.max_relevant {
        cfg.max_relevant = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let dataset = synth_generate(&cfg)?;
    let dir = output_dir(&args.out)?;
    save_dataset(&dir.join("dataset.jsonl"), &dataset)?;

    let run_path = dir.join("run.txt");
    let mut w = create(&run_path)?;
    trec::write_trec_run(&mut w, &dataset.to_run(), "synth")?;
    w.flush().map_err(io_err(&run_path))?;
    let qrels_path = dir.join("qrels.txt");
    let mut w = create(&qrels_path)?;
    dataset.write_qrels(&mut w)?;
    w.flush().map_err(io_err(&qrels_path))?;

    let summary = DatasetSummary {
        queries: dataset.len(),
        max_list_len: dataset.max_len(),
        mean_relevant_in_list: dataset.mean_relevant(),
        mean_relevant_judged: None,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "generated {} queries of {} results; mean relevant per query {:.2}",
        summary.queries, summary.max_list_len, summary.mean_relevant_in_list
    );
    Ok(())
}

fn split(file: &FileConfig, args: SplitArgs) -> Outcome {
    let dataset = open_dataset(&args.dataset)?;
    let fraction = args.fraction.unwrap_or(file.data.train_fraction);
    let seed = args.seed.unwrap_or(file.train.seed);
    let (train, test) = split_train_test(&dataset, fraction, seed)?;
    let dir = output_dir(&args.out)?;
    save_dataset(&dir.join("train.jsonl"), &train)?;
    save_dataset(&dir.join("test.jsonl"), &test)?;
    println!(
        "split {} queries: {} train, {} test",
        dataset.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Trains with progress logging, appending each epoch record to `log`.
fn fit(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log_path: &Path,
) -> Result<ModelParams, Failure> {
    let mut log = create(log_path)?;
    let mut write_error = None;
    let outcome = train_with_callback(dataset, model, cfg, |r| {
        match r.validation_metric {
            Some(v) => info!(
                "epoch {}/{}: loss {:.5}, train {} {:.4}, validation {:.4}",
                r.epoch, cfg.epochs, r.loss, cfg.metric, r.train_metric, v
            ),
            None => info!(
                "epoch {}/{}: loss {:.5}, train {} {:.4}",
                r.epoch, cfg.epochs, r.loss, cfg.metric, r.train_metric
            ),
        }
        if write_error.is_none() {
            write_error = write_json_line(&mut log, r)
                .and_then(|()| log.flush())
                .err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(io_err(log_path)(e));
    }
    Ok(outcome.params)
}

fn train(file: &FileConfig, args: TrainArgs) -> Outcome {
    let dataset = open_dataset(&args.dataset)?;
    let model = resolve_model(file, &args.model, args.seed);
    let cfg = resolve_train(file, &args.train, args.metric, args.seed);
    model.validate()?;
    cfg.validate()?;
    let dir = output_dir(&args.out)?;
    let resolved = toml::to_string(&ResolvedConfig {
        model: &model,
        train: &cfg,
    })
    .map_err(|e| Failure::Usage(format!("cannot serialize configuration: {e}")))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, resolved).map_err(io_err(&config_path))?;

    info!(
        "training on {} queries: n={} d={} heads={} layers={}, {} epochs of batch {}",
        dataset.len(),
        model.n,
        model.d,
        model.heads,
        model.layers,
        cfg.epochs,
        cfg.batch_size
    );
    let started = Instant::now();
    let params = fit(&dataset, &model, &cfg, &dir.join("train_log.jsonl"))?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&ckpt, &model, &params)?;
    println!(
        "trained {} parameters in {:.1}s; checkpoint written to {}",
        params.parameter_count(),
        started.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), Failure> {
    require_input(path)?;
    Ok(checkpoint::load(path)?)
}

fn write_reports(dir: Option<&PathBuf>, name: &str, reports: &[EvalReport]) -> Outcome {
    let Some(dir) = dir else {
        return Ok(());
    };
    let path = output_dir(dir)?.join(name);
    let mut w = create(&path)?;
    for r in reports {
        r.write_records(&mut w)?;
    }
    w.flush().map_err(io_err(&path))
}

fn eval(file: &FileConfig, args: EvalArgs) -> Outcome {
    if args.checkpoint.is_none() && args.baseline.is_empty() {
        return Err(Failure::Usage(
            "nothing to evaluate: pass --checkpoint and/or --baseline".into(),
        ));
    }
    let metric = args.metric.unwrap_or(file.train.metric);
    let dataset = open_dataset(&args.dataset)?;
    let train_set = match &args.train_dataset {
        Some(p) => Some(open_dataset(p)?),
        None => None,
    };

    let mut baselines = args.baseline.clone();
    baselines.sort_by_key(|b| match b {
        Baseline::Fixed(k) => (0, *k),
        Baseline::Greedy => (1, 0),
        Baseline::Oracle => (3, 0),
    });
    baselines.dedup();
    let mut reports = Vec::new();
    for b in &baselines {
        match b {
            Baseline::Fixed(k) => reports.push(fixed_k_eval(*k, &dataset, metric)?),
            Baseline::Greedy => {
                let train = train_set.as_ref().ok_or_else(|| {
                    Failure::Usage("greedy baseline needs --train-dataset to choose k".into())
                })?;
                reports.push(greedy_eval(train, &dataset, metric)?);
            }
            Baseline::Oracle => {}
        }
    }
    if let Some(path) = &args.checkpoint {
        let (model, params) = load_checkpoint(path)?;
        let mismatches = model_mismatches(file, &args.model, &model);
        if !mismatches.is_empty() {
            return Err(Failure::Usage(format!(
                "checkpoint {} does not match the requested model: {}",
                path.display(),
                mismatches.join("; ")
            )));
        }
        if let Some(e) = dataset.examples.iter().find(|e| e.list.len() > model.n) {
            return Err(Failure::Core(Error::Dataset(format!(
                "query {} has {} results but the checkpoint has {} positions",
                e.query_id(),
                e.list.len(),
                model.n
            ))));
        }
        reports.push(model_eval(&dataset, &model, &params, metric)?);
    }
    if baselines.contains(&Baseline::Oracle) {
        reports.push(oracle_eval(&dataset, metric)?);
    }

    print!("{}", render_table(&reports));
    if metric == MetricKind::F1 {
        println!(
            "reference: published BiCut F1 on Robust04 is {BICUT_F1_BM25} (BM25) and {BICUT_F1_DRMM} (DRMM)"
        );
    }
    write_reports(args.out.as_ref(), "eval.jsonl", &reports)
}

#[derive(Serialize)]
struct CellRecord {
    record: &'static str,
    d: usize,
    heads: usize,
    metric: MetricKind,
    value: f64,
    oracle: f64,
    greedy: f64,
    fraction_of_oracle: f64,
}

fn ablate(file: &FileConfig, args: AblateArgs) -> Outcome {
    let train_set = open_dataset(&args.dataset)?;
    let test_set = open_dataset(&args.test_dataset)?;
    let base = resolve_model(file, &args.model, args.seed);
    let cfg = resolve_train(file, &args.train, args.metric, args.seed);
    cfg.validate()?;
    let cells: Vec<ModelConfig> = args
        .grid_d
        .iter()
        .flat_map(|&d| {
            let base = &base;
            args.grid_heads.iter().map(move |&heads| ModelConfig {
                d,
                heads,
                ..base.clone()
            })
        })
        .collect();
    for cell in &cells {
        cell.validate()?;
    }
    let dir = output_dir(&args.out)?;
    let cell_dir = output_dir(&dir.join("cells"))?;
    let oracle = oracle_eval(&test_set, cfg.metric)?.mean;
    let greedy = greedy_eval(&train_set, &test_set, cfg.metric)?.mean;

    let records_path = dir.join("ablation.jsonl");
    let mut records = create(&records_path)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let name = format!("d{}_h{}", cell.d, cell.heads);
        info!("cell {name}: training");
        let params = fit(
            &train_set,
            cell,
            &cfg,
            &cell_dir.join(format!("{name}.log.jsonl")),
        )?;
        checkpoint::save(&cell_dir.join(format!("{name}.ckpt")), cell, &params)?;
        let value = model_eval(&test_set, cell, &params, cfg.metric)?.mean;
        let record = CellRecord {
            record: "cell",
            d: cell.d,
            heads: cell.heads,
            metric: cfg.metric,
            value,
            oracle,
            greedy,
            fraction_of_oracle: value / oracle,
        };
        write_json_line(&mut records, &record)
            .and_then(|()| records.flush())
            .map_err(io_err(&records_path))?;
        info!("cell {name}: test {} {value:.4}", cfg.metric);
        rows.push(record);
    }

    let min = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let max = rows
        .iter()
        .map(|r| r.value)
        .fold(f64::NEG_INFINITY, f64::max);
    #[derive(Serialize)]
    struct Summary {
        record: &'static str,
        cells: usize,
        min: f64,
        max: f64,
        min_over_max: f64,
        oracle: f64,
        greedy: f64,
    }
    let summary = Summary {
        record: "summary",
        cells: rows.len(),
        min,
        max,
        min_over_max: min / max,
        oracle,
        greedy,
    };
    write_json_line(&mut records, &summary)
        .and_then(|()| records.flush())
        .map_err(io_err(&records_path))?;

    print!("{:>6}", "d \\ h");
    for h in &args.grid_heads {
        print!(" {h:>8}");
    }
    println!();
    for d in &args.grid_d {
        print!("{d:>6}");
        for h in &args.grid_heads {
            let r = rows.iter().find(|r| r.d == *d && r.heads == *h);
            print!(" {:>8.4}", r.map_or(f64::NAN, |r| r.value));
        }
        println!();
    }
    println!(
        "test {}: oracle {oracle:.4}, greedy-k {greedy:.4}, cells {min:.4}..{max:.4} (min/max {:.3})",
        cfg.metric,
        min / max
    );
    Ok(())
}

#[derive(Serialize)]
struct PositionRecord<'a> {
    record: &'static str,
    query_id: &'a str,
    position: usize,
    metric_value: f64,
    probability: f64,
}

#[derive(Serialize)]
struct QueryRecord<'a> {
    record: &'static str,
    query_id: &'a str,
    metric: MetricKind,
    predicted_k: usize,
    predicted_value: f64,
    oracle_k: usize,
    oracle_value: f64,
    probability_sum: f64,
}

fn explain(file: &FileConfig, args: ExplainArgs) -> Outcome {
    let dataset = open_dataset(&args.dataset)?;
    let (model, params) = load_checkpoint(&args.checkpoint)?;
    let metric = args.metric.unwrap_or(file.train.metric);
    let ids: Vec<String> = if args.query_ids.is_empty() {
        dataset
            .query_ids()
            .into_iter()
            .take(3)
            .map(str::to_string)
            .collect()
    } else {
        args.query_ids.clone()
    };
    let unknown: Vec<&str> = ids
        .iter()
        .filter(|q| dataset.get(q).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        const SHOWN: usize = 20;
        let available = dataset.query_ids();
        let mut listing = available
            .iter()
            .take(SHOWN)
            .copied()
            .collect::<Vec<_>>()
            .join(", ");
        if available.len() > SHOWN {
            listing.push_str(&format!(", ... ({} in total)", available.len()));
        }
        return Err(Failure::Usage(format!(
            "unknown query id(s) {}; available: {listing}",
            unknown.join(", ")
        )));
    }

    let mut out = match &args.out {
        Some(dir) => {
            let path = output_dir(dir)?.join("explain.jsonl");
            Some((create(&path)?, path))
        }
        None => None,
    };
    println!(
        "{:<16} {:>6} {:>10} {:>6} {:>10}",
        "query",
        "k",
        metric.name(),
        "oracle",
        "best"
    );
    for id in &ids {
        let e = dataset.get(id).expect("checked above");
        let c = e.metric(metric);
        let dist = forward(&e.list.scores, &model, &params)?;
        let probs = dist.valid();
        let k = dist.argmax();
        let (oracle_k, oracle_value) = oracle_cutoff(c)?;
        let query = QueryRecord {
            record: "query",
            query_id: id,
            metric,
            predicted_k: k,
            predicted_value: c.at(k),
            oracle_k,
            oracle_value,
            probability_sum: probs.iter().sum(),
        };
        println!(
            "{:<16} {:>6} {:>10.4} {:>6} {:>10.4}",
            id, k, query.predicted_value, oracle_k, oracle_value
        );
        if let Some((w, path)) = &mut out {
            let mut emit = || -> std::io::Result<()> {
                write_json_line(w, &query)?;
                for (i, (&value, &p)) in c.values.iter().zip(probs).enumerate() {
                    let rec = PositionRecord {
                        record: "position",
                        query_id: id,
                        position: i + 1,
                        metric_value: value,
                        probability: p,
                    };
                    write_json_line(w, &rec)?;
                }
                w.flush()
            };
            emit().map_err(io_err(path))?;
        }
    }
    Ok(())
}
