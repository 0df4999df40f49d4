//! Command-line entry points. [`cli_main`] returns the process exit code:
//! 0 on success, 1 on runtime failures, 2 on usage and configuration errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::checkpoint;
use crate::config::{ConfigMap, Kind, KEYS};
use crate::data::{cifar_paths, idx_paths, load_cifar10_binary, load_idx, synthetic_clusters, Dataset, Split};
use crate::error::{Error, Result};
use crate::kernels::{hsic_estimate, phsic_estimate, KernelFamily};
use crate::numerics::{init_weights, Matrix, Rng};
use crate::online::{simulate_stream, write_trace, CircuitConfig, StreamSimulation};
use crate::rules::gradient_oracle_suite;
use crate::trainer::{evaluate, run_experiment, RunOutput};

/// Stream used to draw the synthetic dataset, apart from the trainer's.
const STREAM_SYNTHETIC: u64 = 3;

const GRADCHECK_REL_TOL: f64 = 1e-5;
const GRADCHECK_ABS_TOL: f64 = 1e-8;

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

fn train_command() -> Command {
    let mut cmd = Command::new("train")
        .about("Train a network and write metrics, a summary and checkpoints")
        .arg(Arg::new("config").long("config").value_name("FILE").help("flat key = value configuration file"))
        .arg(Arg::new("resume").long("resume").value_name("CHECKPOINT").help("continue from a checkpoint"))
        .arg(Arg::new("stop-after").long("stop-after").value_name("EPOCHS").value_parser(clap::value_parser!(usize)).help("stop once this many epochs are done"))
        .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("no per-epoch progress"));
    for k in KEYS {
        let mut arg = Arg::new(k.name).long(flag(k.name)).value_name(kind_placeholder(k.kind)).help(format!("{} [default: {}]", k.help, k.default));
        if k.name == "seed" {
            arg = arg.required(true);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn kind_placeholder(kind: Kind) -> &'static str {
    match kind {
        Kind::Int => "N",
        Kind::Float => "X",
        Kind::Bool => "BOOL",
        Kind::Text => "TEXT",
        Kind::IntList => "N,N,...",
    }
}

fn dataset_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("dataset").long("dataset").default_value("mnist").value_parser(["mnist", "cifar10"]))
        .arg(Arg::new("data-dir").long("data-dir").required(true).value_name("DIR").help("directory with the dataset files"))
        .arg(Arg::new("split").long("split").default_value("test").value_parser(["train", "test"]).help("which split to score"))
}

fn kernel_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("kernel").long("kernel").default_value("gaussian").value_parser(["gaussian", "cossim", "linear"]))
        .arg(Arg::new("sigma").long("sigma").default_value("5.0").value_parser(clap::value_parser!(f64)))
}

pub fn command() -> Command {
    Command::new("phsic")
        .about("Layer-wise pHSIC training, gradient checks, estimators and online-circuit traces")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(train_command())
        .subcommand(dataset_args(
            Command::new("eval")
                .about("Accuracy of a checkpoint on a dataset split")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE").help("checkpoint written by train")),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic layer gradients with finite differences; exits 1 on failure")
                .arg(Arg::new("seeds").long("seeds").default_value("20").value_parser(clap::value_parser!(u64).range(1..)).help("random networks per kernel configuration"))
                .arg(Arg::new("first-seed").long("first-seed").default_value("0").value_parser(clap::value_parser!(u64))),
        )
        .subcommand(kernel_args(
            Command::new("estimate")
                .about("pHSIC and HSIC between two CSV datasets with one row per sample")
                .arg(Arg::new("a").long("a").required(true).value_name("CSV").help("first sample set, one row per sample"))
                .arg(Arg::new("b").long("b").required(true).value_name("CSV").help("second sample set, same number of rows"))
                .arg(Arg::new("kernel-b").long("kernel-b").value_parser(["gaussian", "cossim", "linear"]).help("kernel for --b [default: --kernel]")),
        ))
        .subcommand(
            Command::new("stream-demo")
                .about("Simulate one layer on a stream of held samples and dump the circuit trace as CSV")
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64)))
                .arg(Arg::new("samples").long("samples").default_value("20").value_parser(clap::value_parser!(usize)).help("samples in the stream"))
                .arg(Arg::new("hold").long("hold").default_value("20").value_parser(clap::value_parser!(usize)).help("time steps each sample is presented"))
                .arg(Arg::new("gap").long("gap").default_value("0").value_parser(clap::value_parser!(usize)).help("blank steps between samples"))
                .arg(Arg::new("memory").long("memory").action(ArgAction::SetTrue).help("filter the memory variable instead of raw activity"))
                .arg(Arg::new("lr").long("lr").default_value("0").value_parser(clap::value_parser!(f64)).help("learning rate; 0 keeps the weights fixed"))
                .arg(Arg::new("sigma").long("sigma").default_value("5.0").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("gamma").long("gamma").default_value("2.0").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("out").long("out").value_name("CSV").help("output file [default: stdout]")),
        )
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::UnknownKey(_) | Error::TypeMismatch { .. } | Error::Config(_))
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => train(m),
        Some(("eval", m)) => eval(m),
        Some(("gradcheck", m)) => gradcheck(m),
        Some(("estimate", m)) => estimate(m),
        Some(("stream-demo", m)) => stream_demo(m),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

/// Defaults, then `--config`, then explicit flags.
pub fn resolve_config(m: &ArgMatches) -> Result<ConfigMap> {
    let mut cfg = ConfigMap::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Training and test sets for a resolved configuration.
pub fn load_datasets(cfg: &ConfigMap) -> Result<(Dataset, Option<Dataset>)> {
    match cfg.data_dir()? {
        None => {
            let seed: u64 = cfg.get("seed").parse().expect("validated on set");
            let per_class: usize = cfg.get("synthetic_per_class").parse().expect("validated on set");
            let classes: usize = cfg.get("synthetic_classes").parse().expect("validated on set");
            let dim: usize = cfg.get("synthetic_dim").parse().expect("validated on set");
            let mut rng = Rng::with_stream(seed, STREAM_SYNTHETIC);
            let all = synthetic_clusters(2 * per_class, classes, dim, 0.7, &mut rng)?;
            // rows cycle through the classes, so halves stay balanced
            let half = per_class * classes;
            let train: Vec<usize> = (0..half).collect();
            let test: Vec<usize> = (half..2 * half).collect();
            Ok((all.subset(&train, Split::Train), Some(all.subset(&test, Split::Test))))
        }
        Some(dir) => Ok((load_split(cfg.get("dataset"), &dir, Split::Train)?, Some(load_split(cfg.get("dataset"), &dir, Split::Test)?))),
    }
}

fn load_split(dataset: &str, dir: &Path, split: Split) -> Result<Dataset> {
    match dataset {
        "mnist" => {
            let (i, l) = idx_paths(dir, split);
            load_idx(i, l, split)
        }
        "cifar10" => load_cifar10_binary(&cifar_paths(dir, split), split),
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

fn train(m: &ArgMatches) -> Result<i32> {
    let cfg = resolve_config(m)?;
    let out_dir = cfg.out_dir();
    let (train_set, test_set) = load_datasets(&cfg)?;
    let spec = cfg.run_spec(train_set.width(), train_set.n_classes)?;
    let resume = m.get_one::<String>("resume").map(|p| checkpoint::load(Path::new(p))).transpose()?;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let output = RunOutput {
        dir: out_dir,
        echo: Some(cfg.to_json()),
        progress: !m.get_flag("quiet"),
        stop_after: m.get_one::<usize>("stop-after").copied(),
    };
    let result = run_experiment(&spec, &train_set, test_set.as_ref(), &output, resume)?;
    if let Some(r) = result.records.last() {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("epochs {}  train {:.4}  val {}  test {}", result.state.epochs_done, r.train_acc, fmt(r.val_acc), fmt(r.test_acc));
    }
    Ok(0)
}

fn eval(m: &ArgMatches) -> Result<i32> {
    let state = checkpoint::load(Path::new(m.get_one::<String>("checkpoint").unwrap()))?;
    let split = match m.get_one::<String>("split").unwrap().as_str() {
        "train" => Split::Train,
        _ => Split::Test,
    };
    let data = load_split(m.get_one::<String>("dataset").unwrap(), Path::new(m.get_one::<String>("data-dir").unwrap()), split)?;
    let acc = evaluate(&state.net, &data)?;
    println!("accuracy {acc:.6}  samples {}  epochs {}", data.len(), state.epochs_done);
    Ok(0)
}

fn gradcheck(m: &ArgMatches) -> Result<i32> {
    let first = *m.get_one::<u64>("first-seed").unwrap();
    let n = *m.get_one::<u64>("seeds").unwrap();
    let reports = gradient_oracle_suite(first..first + n)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(GRADCHECK_REL_TOL, GRADCHECK_ABS_TOL);
        failed += usize::from(!ok);
        println!(
            "{:<4} {:<18} instances {:>3}  max rel {:.3e}  max abs (small) {:.3e}",
            if ok { "ok" } else { "FAIL" },
            r.case.name,
            r.instances,
            r.worst.max_relative,
            r.worst.max_absolute_small
        );
    }
    if failed > 0 {
        eprintln!("{failed} configuration(s) above tolerance (rel {GRADCHECK_REL_TOL:e}, abs {GRADCHECK_ABS_TOL:e})");
        return Ok(1);
    }
    Ok(0)
}

fn parse_kernel(name: &str, sigma: f64) -> Result<KernelFamily> {
    match name {
        "gaussian" => KernelFamily::gaussian(sigma),
        "cossim" => Ok(KernelFamily::CosineSimilarity),
        _ => Ok(KernelFamily::Linear),
    }
}

/// Numeric CSV with one sample per row; a non-numeric first row is taken as
/// a header.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Csv(format!("{}: row {}: {e}", path.display(), i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::Csv(format!("{}: no numeric rows", path.display())));
    }
    Matrix::from_rows(&rows)
}

fn estimate(m: &ArgMatches) -> Result<i32> {
    let sigma = *m.get_one::<f64>("sigma").unwrap();
    let ka_name = m.get_one::<String>("kernel").unwrap();
    let kb_name = m.get_one::<String>("kernel-b").unwrap_or(ka_name);
    let a = read_csv_matrix(Path::new(m.get_one::<String>("a").unwrap()))?;
    let b = read_csv_matrix(Path::new(m.get_one::<String>("b").unwrap()))?;
    if a.rows() != b.rows() {
        return Err(Error::dim("estimate", format!("{} samples in --a, {} in --b", a.rows(), b.rows())));
    }
    let ka = parse_kernel(ka_name, sigma)?.matrix(&a)?;
    let kb = parse_kernel(kb_name, sigma)?.matrix(&b)?;
    println!("samples {}", a.rows());
    println!("phsic {:.12e}", phsic_estimate(&ka, &kb)?);
    println!("hsic {:.12e}", hsic_estimate(&ka, &kb)?);
    Ok(0)
}

fn stream_demo(m: &ArgMatches) -> Result<i32> {
    let seed = *m.get_one::<u64>("seed").unwrap();
    let mut rng = Rng::new(seed);
    let n = *m.get_one::<usize>("samples").unwrap();
    let pool = synthetic_clusters(n.div_ceil(2), 2, 10, 0.5, &mut rng)?;
    let order: Vec<usize> = rng.permutation(pool.len()).into_iter().take(n).collect();
    let data = pool.subset(&order, Split::Train);
    let w = init_weights(10, 8, 0.01, &mut rng)?;
    let config = CircuitConfig::new(*m.get_one::<f64>("sigma").unwrap(), *m.get_one::<f64>("gamma").unwrap());
    let sim = StreamSimulation {
        hold_steps: *m.get_one::<usize>("hold").unwrap(),
        gap_steps: *m.get_one::<usize>("gap").unwrap(),
        use_memory: m.get_flag("memory"),
        learning_rate: *m.get_one::<f64>("lr").unwrap(),
    };
    let (rows, _) = simulate_stream(&w, &data.images, &data.labels, 2, &config, 0.01, &sim)?;
    match m.get_one::<String>("out") {
        Some(p) => {
            let path = PathBuf::from(p);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_trace(&rows, std::io::BufWriter::new(f))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_trace(&rows, &mut lock)?;
            lock.flush().map_err(|e| Error::io("stdout", e))?;
        }
    }
    Ok(0)
}
