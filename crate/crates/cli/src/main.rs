//! `msmatch`: generate data, train, evaluate, ablate, benchmark and trace.
//!
//! Every `RunConfig` key is also a flag (`--k 96`, `--batch_size 4`); flags
//! override values read from `--config`, and a repeated flag keeps its last
//! value.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use msmatch_core::ablation::{run_ablation, table_csv};
use msmatch_core::checkpoint;
use msmatch_core::config::KEYS;
use msmatch_core::corpus::{generate_synthetic, load_dataset, save_dataset};
use msmatch_core::cost::{measure_counts, solve_crossover, CostReport, Timing, Workload};
use msmatch_core::encoder::load_embedding_file;
use msmatch_core::eval::evaluate;
use msmatch_core::matching::trace_lines;
use msmatch_core::train::{eval_seed, train_with};
use msmatch_core::{Dataset, Model, RunConfig};

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|&(key, help)| {
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(help)
                .overrides_with(key)
                .global(true)
        })
        .collect()
}

fn cli() -> Command {
    let checkpoint = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("model checkpoint; a freshly seeded model when omitted")
    };
    Command::new("msmatch")
        .about("Multimodal review helpfulness ranking with top-K matching scores")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("key=value configuration file"),
        )
        .args(key_args())
        .subcommand(Command::new("generate").about("Write synthetic train/dev/test splits to out_dir"))
        .subcommand(Command::new("train").about("Train on train_path, early-stopping on dev_path"))
        .subcommand(
            Command::new("eval")
                .about("Score test_path and write metrics")
                .arg(checkpoint()),
        )
        .subcommand(Command::new("ablate").about("Train and evaluate the full model and seven masked variants"))
        .subcommand(
            Command::new("bench")
                .about("Analytic and measured cost sweep")
                .arg(
                    Arg::new("lengths")
                        .long("lengths")
                        .value_name("LIST")
                        .default_value("10,50,100,200")
                        .help("comma-separated sequence lengths (l1 = l2)"),
                )
                .arg(
                    Arg::new("iterations")
                        .long("iterations")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("5")
                        .help("timed passes per interval"),
                ),
        )
        .subcommand(
            Command::new("trace")
                .about("Dump every matching score of one product/review pair from test_path")
                .arg(checkpoint())
                .arg(Arg::new("product").long("product").required(true).value_name("ID"))
                .arg(Arg::new("review").long("review").required(true).value_name("ID"))
                .arg(
                    Arg::new("selected-only")
                        .long("selected-only")
                        .action(ArgAction::SetTrue)
                        .help("only print scores kept by top-K"),
                ),
        )
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("invalid configuration: {key}: required by this command"))
}

fn load(p: &Option<PathBuf>, key: &str) -> Result<Dataset> {
    let path = required(p, key)?;
    load_dataset(path).with_context(|| format!("loading {key} {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if let Some(t) = data.max_token() {
        if t >= cfg.model.vocab_size {
            bail!(
                "invalid configuration: vocab_size: {} is too small for token id {t}",
                cfg.model.vocab_size
            );
        }
    }
    if let Some(dv) = data.region_dim() {
        if dv != cfg.model.d_v {
            bail!(
                "invalid configuration: d_v: {} does not match region width {dv}",
                cfg.model.d_v
            );
        }
    }
    Ok(())
}

fn fresh_model(cfg: &RunConfig) -> Result<Model> {
    let model = match &cfg.embedding_path {
        Some(p) => {
            let table = load_embedding_file(p).with_context(|| format!("loading embedding_path {}", p.display()))?;
            Model::with_embedding(cfg.model.clone(), table, cfg.train.seed)?
        }
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    Ok(model)
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&PathBuf>) -> Result<Model> {
    match checkpoint {
        Some(p) => Ok(checkpoint::load(p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?
            .1),
        None => fresh_model(cfg),
    }
}

fn log_effective_centers(cfg: &RunConfig) {
    let m = &cfg.model;
    if m.refine {
        eprintln!("K={} r={} effective C={}", m.k, m.r, m.effective_centers());
    } else {
        eprintln!("K={} refinement off", m.k);
    }
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.generator, cfg.train.seed)?;
    let (train, dev, test) = data.partition(cfg.train_frac, cfg.dev_frac)?;
    let dir = out_dir(cfg)?;
    for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let path = dir.join(format!("{name}.jsonl"));
        save_dataset(split, &path).with_context(|| format!("writing {}", path.display()))?;
        println!(
            "{name}: {} products, {} reviews -> {}",
            split.products().len(),
            split.num_reviews(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_set = load(&cfg.train_path, "train_path")?;
    let dev = cfg
        .dev_path
        .as_ref()
        .map(|_| load(&cfg.dev_path, "dev_path"))
        .transpose()?;
    check_compatible(cfg, &train_set)?;
    log_effective_centers(cfg);
    let mut model = fresh_model(cfg)?;
    let outcome = train_with(&mut model, &train_set, dev.as_ref(), &cfg.train, |rec| {
        eprintln!("{}", rec.csv_line());
    })?;
    let dir = out_dir(cfg)?;
    write(&dir.join("epochs.csv"), &outcome.log_text())?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&ckpt, cfg, &model)?;
    println!("best epoch {} -> {}", outcome.best_epoch, ckpt.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let test = load(&cfg.test_path, "test_path")?;
    check_compatible(cfg, &test)?;
    let model = model_for(cfg, m.get_one("checkpoint"))?;
    let report = evaluate(&model, &test, &cfg.metrics(), eval_seed(cfg.train.seed))?;
    let dir = out_dir(cfg)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("metrics.json"), &report.to_json())?;
    println!(
        "MAP {:.4} NDCG@3 {:.4} NDCG@5 {:.4}",
        report.map, report.ndcg3, report.ndcg5
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let train_set = load(&cfg.train_path, "train_path")?;
    let dev = cfg
        .dev_path
        .as_ref()
        .map(|_| load(&cfg.dev_path, "dev_path"))
        .transpose()?;
    let test = load(&cfg.test_path, "test_path")?;
    check_compatible(cfg, &train_set)?;
    log_effective_centers(cfg);
    let rows = run_ablation(&cfg.model, &cfg.train, &train_set, dev.as_ref(), &test, |row| {
        eprintln!("{}: MAP {:.4}", row.variant.name, row.metrics.map);
    })?;
    let table = table_csv(&rows);
    write(&out_dir(cfg)?.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let lengths: Vec<usize> = m
        .get_one::<String>("lengths")
        .expect("defaulted")
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .with_context(|| format!("--lengths: cannot parse {s:?}"))
        })
        .collect::<Result<_>>()?;
    let timing = Timing {
        intervals: 5,
        iterations: *m.get_one::<usize>("iterations").expect("defaulted"),
    };
    let model = fresh_model(cfg)?;
    let k = cfg.model.effective_centers() as f64;
    let n_layers = cfg.model.n_layers as u32;
    let mut csv = format!("{}\n", CostReport::CSV_HEADER);
    for &l in &lengths {
        let w = Workload::new(l as f64, l as f64, cfg.model.d as f64, n_layers, k, k)?;
        let report = measure_counts(&model, &w, timing, cfg.train.seed)?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    let base = Workload::new(1.0, 100.0, cfg.model.d as f64, n_layers, k, k)?;
    match solve_crossover(&base, 100.0) {
        Some(x) => eprintln!("C_m = C_f at l1/l2 = {x:.4}"),
        None => eprintln!("C_m < C_f for every l1/l2 in (0, 100]: no crossover"),
    }
    write(&out_dir(cfg)?.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_trace(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let test = load(&cfg.test_path, "test_path")?;
    let model = model_for(cfg, m.get_one("checkpoint"))?;
    let pid = m.get_one::<String>("product").expect("required");
    let rid = m.get_one::<String>("review").expect("required");
    let product = test
        .products()
        .iter()
        .find(|p| &p.id == pid)
        .with_context(|| format!("product {pid} is not in test_path"))?;
    let review = test
        .reviews(pid)
        .iter()
        .find(|r| &r.id == rid)
        .with_context(|| format!("review {rid} of product {pid} is not in test_path"))?;
    let pair = model.score_pair(product, review, eval_seed(cfg.train.seed))?;
    let text = trace_lines(&pair.scores, &pair.shape, &pair.feature);
    let selected_only = m.get_flag("selected-only");
    for (i, line) in text.lines().enumerate() {
        if i == 0 || !selected_only || !line.ends_with(",0") {
            println!("{line}");
        }
    }
    eprintln!("f = {:.6}", pair.f);
    Ok(())
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = run_config(sub)?;
    match name {
        "generate" => cmd_generate(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg, sub),
        "ablate" => cmd_ablate(&cfg),
        "bench" => cmd_bench(&cfg, sub),
        "trace" => cmd_trace(&cfg, sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
