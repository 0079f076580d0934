use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgMatches, Command};
use decaps_core::config::{RunConfig, SEED_ENV};
use decaps_core::data::{dataset_digest, generate, save_manifest, MANIFEST_FILE};
use decaps_core::experiment::{
    ablate, ablation_table, evaluate_run, load_checkpoint, load_dataset, new_trainer, resume_trainer, train, Split,
    ABLATION_GRID, CHECKPOINT_FILE, REPORT_FILE,
};
use decaps_core::metrics::dump_heatmaps;
use decaps_core::{Error, Result};

/// `model.n_iter` becomes `--model.n-iter`.
fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .global(true)
        .help("flat `key = value` config file")];
    for key in RunConfig::keys() {
        let mut arg = Arg::new(key)
            .long(flag_name(key))
            .value_name("VALUE")
            .global(true)
            .hide(true);
        if key.contains('_') {
            arg = arg.alias(key);
        }
        args.push(arg);
    }
    args.push(
        Arg::new("routing-alias")
            .long("routing")
            .value_name("idr|baseline")
            .global(true)
            .help("shorthand for --model.routing"),
    );
    args
}

fn cli() -> Command {
    let checkpoint = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .help("checkpoint to evaluate [default: <output>/checkpoint.bin]")
    };
    Command::new("decaps")
        .about("Capsule-head classifier with activation-guided training and weak localization")
        .after_help("Every config key is also a flag: --model.n-iter 3, --optim.lr 1e-3, --data.num-samples 500 ...\nRun `decaps keys` for the full list. DECAPS_SEED overrides `seed` unless --seed is given.")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(config_args())
        .subcommand(
            Command::new("gen")
                .about("Write the train and test datasets as PPM images plus JSONL manifests")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
        )
        .subcommand(
            Command::new("train")
                .about("Train, writing per-epoch checkpoints and a loss log under <output>")
                .arg(Arg::new("resume").long("resume").value_name("FILE").help("continue from a checkpoint")),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint on the test split and write report.json")
                .arg(checkpoint())
                .arg(Arg::new("report").long("report").value_name("FILE"))
                .arg(
                    Arg::new("dump-hams")
                        .long("dump-hams")
                        .value_name("DIR")
                        .num_args(0..=1)
                        .default_missing_value("")
                        .help("write PGM heatmaps and box sidecars [default dir: <output>/hams]"),
                ),
        )
        .subcommand(
            Command::new("localize")
                .about("Same as eval --dump-hams")
                .arg(checkpoint())
                .arg(Arg::new("report").long("report").value_name("FILE"))
                .arg(Arg::new("dir").long("dir").value_name("DIR").help("heatmap directory [default: <output>/hams]")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate the component grid over several seeds")
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("1,2,3,4,5")
                        .help("comma-separated training seeds"),
                ),
        )
        .subcommand(Command::new("keys").about("Print every config key with its default value"))
        .subcommand(Command::new("config").about("Print the resolved config"))
}

/// Layers config file, environment seed and flags over `base`.
fn resolve(base: RunConfig, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
        cfg.apply_text(&text)?;
    }
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed_override(env.as_deref())?;
    for key in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(v) = m.get_one::<String>("routing-alias") {
        cfg.set("model.routing", v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(m: &ArgMatches, sub: &ArgMatches) -> Result<()> {
    let cfg = resolve(RunConfig::default(), m)?;
    let out = PathBuf::from(sub.get_one::<String>("out").expect("required"));
    for (name, spec) in [("train", cfg.train_spec()), ("test", cfg.test_spec())] {
        let samples = generate(&spec)?;
        let path = out.join(name).join(MANIFEST_FILE);
        save_manifest(&path, &samples)?;
        println!("{name}: {} samples -> {} (sha256 {})", samples.len(), path.display(), dataset_digest(&samples));
    }
    Ok(())
}

fn cmd_train(m: &ArgMatches, sub: &ArgMatches) -> Result<()> {
    let (cfg, mut trainer) = match sub.get_one::<String>("resume") {
        Some(path) => {
            let (saved, ckpt) = load_checkpoint(Path::new(path))?;
            let cfg = resolve(saved, m)?;
            let t = resume_trainer(&cfg, ckpt)?;
            eprintln!("resuming at epoch {} step {}", t.epoch, t.step);
            (cfg, t)
        }
        None => {
            let cfg = resolve(RunConfig::default(), m)?;
            let t = new_trainer(&cfg)?;
            (cfg, t)
        }
    };
    let data = load_dataset(&cfg, Split::Train)?;
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join("config.txt"), &cfg.echo())?;
    eprintln!(
        "training {} parameters on {} samples for {} epochs",
        trainer.model.num_parameters(),
        data.len(),
        cfg.optim.epochs
    );
    let start = Instant::now();
    let (mut epoch, mut sum, mut count) = (trainer.epoch, 0.0, 0usize);
    let report = |epoch: u64, sum: f64, count: usize| {
        if count > 0 {
            eprintln!(
                "epoch {}/{} mean loss {:.5} ({:.0}s)",
                epoch + 1,
                cfg.optim.epochs,
                sum / count as f64,
                start.elapsed().as_secs_f64()
            );
        }
    };
    train(&cfg, &mut trainer, &data, Some(&cfg.output), |rec| {
        if rec.epoch != epoch {
            report(epoch, sum, count);
            (epoch, sum, count) = (rec.epoch, 0.0, 0);
        }
        sum += rec.loss.total;
        count += 1;
    })?;
    report(epoch, sum, count);
    println!("{}", cfg.output.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches, sub: &ArgMatches, dump: Option<Option<&str>>) -> Result<()> {
    let ckpt_path = match sub.get_one::<String>("checkpoint") {
        Some(p) => PathBuf::from(p),
        None => resolve(RunConfig::default(), m)?.output.join(CHECKPOINT_FILE),
    };
    let (saved, ckpt) = load_checkpoint(&ckpt_path)?;
    let cfg = resolve(saved, m)?;
    let trainer = resume_trainer(&cfg, ckpt)?;
    let test = load_dataset(&cfg, Split::Test)?;
    let (report, preds) = evaluate_run(&cfg, &trainer, &test)?;
    let report_path = sub
        .get_one::<String>("report")
        .map_or_else(|| cfg.output.join(REPORT_FILE), PathBuf::from);
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let json = report.to_json();
    write_file(&report_path, &json)?;
    if let Some(dir) = dump {
        let dir = match dir {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => cfg.output.join("hams"),
        };
        let mut maps = 0;
        for (s, p) in test.iter().zip(&preds) {
            maps += dump_heatmaps(&dir, s, p)?;
        }
        eprintln!("wrote {maps} heatmaps to {}", dir.display());
    }
    println!("{json}");
    Ok(())
}

fn cmd_ablate(m: &ArgMatches, sub: &ArgMatches) -> Result<()> {
    let cfg = resolve(RunConfig::default(), m)?;
    let seeds = sub
        .get_one::<String>("seeds")
        .expect("defaulted")
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {s:?} in --seeds"))))
        .collect::<Result<Vec<_>>>()?;
    let train_data = load_dataset(&cfg, Split::Train)?;
    let test = load_dataset(&cfg, Split::Test)?;
    let start = Instant::now();
    let rows = ablate(&cfg, &train_data, &test, &seeds, &ABLATION_GRID, |name, seed| {
        eprintln!("[{:.0}s] training {name} seed {seed}", start.elapsed().as_secs_f64());
    })?;
    create_dir(&cfg.output)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&cfg.output.join("ablation.json"), &json)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("gen", sub)) => cmd_gen(m, sub),
        Some(("train", sub)) => cmd_train(m, sub),
        Some(("eval", sub)) => {
            let dump = sub.get_one::<String>("dump-hams").map(|d| Some(d.as_str()));
            cmd_eval(m, sub, dump)
        }
        Some(("localize", sub)) => cmd_eval(m, sub, Some(sub.get_one::<String>("dir").map(String::as_str))),
        Some(("ablate", sub)) => cmd_ablate(m, sub),
        Some(("keys", _)) => {
            for (k, v) in RunConfig::default().entries() {
                println!("--{} {v}", flag_name(k));
            }
            Ok(())
        }
        Some(("config", _)) => {
            print!("{}", resolve(RunConfig::default(), m)?.echo());
            Ok(())
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
