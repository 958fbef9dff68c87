use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use awae::baselines::{train_mult_dae, train_mult_vae};
use awae::checkpoint::{self, Checkpoint, ModelKind};
use awae::data::{
    ingest, read_interactions, split, summary, synthesize, write_interactions, ClickMatrix,
    HeldoutPair, Split,
};
use awae::metrics::{evaluate, MetricKind, MetricTable};
use awae::trainer::{train, TrainLog};
use log::info;

use crate::config::{RunConfig, Scope};
use crate::{CliError, CompareArgs, EvalArgs, Format, PrepareArgs, SplitName, SweepArgs, SynthesizeArgs, TrainArgs};

/// Name of the resolved configuration written next to prepared data and runs.
pub const CONFIG_FILE: &str = "config";
pub const SUMMARY_FILE: &str = "summary";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes to `out` if given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_split(dir: &Path) -> Result<Split, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!("data directory {} does not exist", dir.display())));
    }
    Ok(Split::read_dir(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

fn heldout(split: &Split, which: SplitName) -> &HeldoutPair {
    match which {
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn render(table: &MetricTable, format: Format) -> String {
    match format {
        Format::Csv => table.to_csv(),
        Format::Json => table.to_json() + "\n",
    }
}

pub fn prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(Scope::Data, args.config.as_deref(), &args.set)?;
    let (matrix, ids) = match &args.input {
        Some(path) => {
            let file = File::open(path).map_err(io_err(path))?;
            let records = read_interactions(BufReader::new(file))?;
            let ing = ingest(records, &cfg.ingest()?)?;
            (ing.matrix, Some((ing.user_ids, ing.item_ids)))
        }
        None => (synthesize(&cfg.synth()?)?.matrix, None),
    };
    let parts = split(&matrix, &cfg.split()?)?;
    parts.write_dir(&args.out)?;

    let heldout_users = parts.val.n_users() + parts.test.n_users();
    let stats: String = summary(&matrix, heldout_users)
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    write_file(&args.out.join(SUMMARY_FILE), &stats)?;
    write_file(&args.out.join(CONFIG_FILE), &cfg.to_text())?;
    if let Some((users, items)) = ids {
        write_file(&args.out.join("user_ids"), &(users.join("\n") + "\n"))?;
        write_file(&args.out.join("item_ids"), &(items.join("\n") + "\n"))?;
    }
    print!("{stats}");
    Ok(())
}

pub fn synthesize_cmd(args: &SynthesizeArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(Scope::Data, args.config.as_deref(), &args.set)?;
    let syn = synthesize(&cfg.synth()?)?;
    let file = File::create(&args.out).map_err(io_err(&args.out))?;
    write_interactions(&syn.matrix, BufWriter::new(file))?;
    info!(
        "wrote {} users x {} items ({} clicks) to {}",
        syn.matrix.n_users(),
        syn.matrix.n_items(),
        syn.matrix.nnz(),
        args.out.display()
    );
    Ok(())
}

fn check_values(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.model()? {
        ModelKind::Vae => cfg.vae().map(|_| ()),
        _ => cfg.train().map(|_| ()),
    }
}

/// Trains the configured model. Returns the best-validation model as a
/// checkpoint value together with the training log.
pub fn fit(
    cfg: &RunConfig,
    train_data: &ClickMatrix,
    val: &HeldoutPair,
    run_dir: Option<&Path>,
) -> Result<(Checkpoint, TrainLog), CliError> {
    Ok(match cfg.model()? {
        ModelKind::Awae => {
            let tc = cfg.train()?;
            let (params, sparse, log) = train(train_data, val, &tc, run_dir)?;
            let dictionary = (tc.objective.delta > 0.0).then_some(sparse.a);
            (
                Checkpoint::Mlp {
                    kind: ModelKind::Awae,
                    params,
                    dictionary,
                },
                log,
            )
        }
        ModelKind::Dae => {
            let (params, log) = train_mult_dae(train_data, val, &cfg.train()?, run_dir)?;
            (
                Checkpoint::Mlp {
                    kind: ModelKind::Dae,
                    params,
                    dictionary: None,
                },
                log,
            )
        }
        ModelKind::Vae => {
            let (params, log) = train_mult_vae(train_data, val, &cfg.vae()?, run_dir)?;
            (Checkpoint::Vae(params), log)
        }
    })
}

pub fn train_cmd(args: &TrainArgs, run_root: &Path) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(Scope::Train, args.config.as_deref(), &args.set)?;
    if let Some(model) = &args.model {
        cfg.set("model", model)?;
    }
    // fail on bad values before touching the filesystem
    check_values(&cfg)?;
    let run_dir = match (&args.run_dir, &args.name) {
        (Some(dir), _) => dir.clone(),
        (None, Some(name)) => run_root.join(name),
        (None, None) => run_root.join(format!("{}-seed{}", cfg.raw("model"), cfg.raw("seed"))),
    };
    let split = load_split(&args.data)?;
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    write_file(&run_dir.join(CONFIG_FILE), &cfg.to_text())?;

    let (_, log) = fit(&cfg, &split.train, &split.val, Some(&run_dir))?;
    let metric = cfg.raw("early_stop");
    match (log.best_epoch, log.best_value()) {
        (Some(epoch), Some(value)) => {
            println!("run_dir={}", run_dir.display());
            println!("best_epoch={epoch}");
            println!("best_{metric}={value}");
        }
        _ => println!("run_dir={}\nno improving epoch", run_dir.display()),
    }
    Ok(())
}

pub fn evaluate_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let split = load_split(&args.data)?;
    let table = evaluate(&model, heldout(&split, args.split), &args.r)?;
    emit(args.out.as_deref(), &render(&table, args.format))
}

pub fn compare_cmd(args: &CompareArgs) -> Result<(), CliError> {
    let split = load_split(&args.data)?;
    let target = heldout(&split, args.split);
    let mut out = String::from("model,checkpoint,metric");
    for r in &args.r {
        let _ = write!(out, ",{r}");
    }
    out.push('\n');
    for path in &args.checkpoints {
        let model = load_checkpoint(path)?;
        let table = evaluate(&model, target, &args.r)?;
        for metric in [MetricKind::Recall, MetricKind::Ndcg] {
            let _ = write!(out, "{},{},{}", model.kind(), path.display(), metric.name());
            for &r in &args.r {
                let v = table.get(metric, r).expect("table covers every cutoff");
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    emit(args.out.as_deref(), &out)
}

pub fn sweep_cmd(args: &SweepArgs, run_root: &Path) -> Result<(), CliError> {
    let base = RunConfig::load(Scope::Train, args.config.as_deref(), &args.set)?;
    if args.values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let configs = args
        .values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(&args.param, v)?;
            check_values(&c)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let split = load_split(&args.data)?;
    let sweep_dir = args.name.as_ref().map(|n| run_root.join(n));

    let run_one = |i: usize| -> Result<MetricTable, CliError> {
        let run_dir = sweep_dir
            .as_ref()
            .map(|d| d.join(format!("{}={}", args.param, args.values[i])));
        if let Some(dir) = &run_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            write_file(&dir.join(CONFIG_FILE), &configs[i].to_text())?;
        }
        let (model, _) = fit(&configs[i], &split.train, &split.val, run_dir.as_deref())?;
        info!("{}={} done", args.param, args.values[i]);
        Ok(evaluate(&model, heldout(&split, args.split), &args.r)?)
    };

    let jobs = args.jobs.clamp(1, configs.len());
    let results: Vec<Result<MetricTable, CliError>> = if jobs == 1 {
        (0..configs.len()).map(run_one).collect()
    } else {
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<MetricTable, CliError>>> = (0..configs.len()).map(|_| None).collect();
        let finished: Vec<(usize, Result<MetricTable, CliError>)> = thread::scope(|s| {
            let workers: Vec<_> = (0..jobs)
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= configs.len() {
                                break done;
                            }
                            done.push((i, run_one(i)));
                        }
                    })
                })
                .collect();
            workers
                .into_iter()
                .flat_map(|w| w.join().expect("sweep worker panicked"))
                .collect()
        });
        for (i, r) in finished {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every value ran")).collect()
    };

    let mut out = String::from("param_value,metric,R,mean\n");
    for (value, result) in args.values.iter().zip(results) {
        for row in result?.rows {
            let _ = writeln!(out, "{value},{},{},{}", row.metric.name(), row.r, row.mean);
        }
    }
    emit(args.out.as_deref(), &out)
}
