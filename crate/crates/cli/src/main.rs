//! `adarts`: cell search with attention-guided partial channel connections.

use std::path::PathBuf;
use std::process::ExitCode;

use adarts_core::commands::{
    cmd_ablate_k, cmd_ablate_mode, cmd_derive, cmd_eval, cmd_gradcheck, cmd_search, cmd_skip_trace, read_genotype,
    GENOTYPE_FILE,
};
use adarts_core::config::{RunConfig, KEYS};
use adarts_core::gradcheck::GRAD_TOLERANCE;
use adarts_core::gradcheck_suite::DEFAULT_SEED;
use adarts_core::supernet::SearchMode;
use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};

/// Exit code for a gradient check with at least one failing case.
const GRADCHECK_FAILED: u8 = 2;

fn config_args(cmd: Command) -> Command {
    let defaults = RunConfig::default();
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value config file; flags below override it"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        let default = defaults.get(key).expect("listed keys are known");
        let shown = if default.is_empty() { "unset".to_string() } else { default };
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(format!("{help} [default: {shown}]"))
                .help_heading("Config keys"),
        )
    })
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("flag --{key}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text.split(',').map(|s| f(s.trim())).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(anyhow!("empty {what} list"));
    }
    Ok(items)
}

fn parse_modes(text: &str) -> Result<Vec<SearchMode>> {
    parse_list(text, "mode", |s| s.parse::<SearchMode>().map_err(Into::into))
}

fn cli() -> Command {
    let modes = Arg::new("modes").long("modes").value_name("LIST");
    Command::new("adarts")
        .about("Differentiable cell search with attention-guided partial channel connections")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("search").about("Search a cell; writes genotype.json, metrics.csv and alpha.json"),
        ))
        .subcommand(
            Command::new("derive")
                .about("Derive genotype.json from an alpha.json snapshot")
                .arg(Arg::new("alpha").long("alpha").value_name("FILE").required(true))
                .arg(Arg::new("out").long("out").value_name("FILE").help("default: genotype.json beside the snapshot")),
        )
        .subcommand(config_args(
            Command::new("eval")
                .about("Train the discrete network of a genotype; writes eval_metrics.csv")
                .arg(Arg::new("genotype").long("genotype").value_name("FILE").required(true)),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference gradient suite; exits 2 if any case fails")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .help(format!("first seed [default: {DEFAULT_SEED}]")),
                )
                .arg(Arg::new("out_dir").long("out_dir").value_name("DIR").default_value("out"))
                .arg(Arg::new("verbose").long("verbose").action(ArgAction::SetTrue).help("print every case")),
        )
        .subcommand(config_args(
            Command::new("ablate-k")
                .about("One search per K; writes ablation.csv")
                .arg(Arg::new("ks").long("ks").value_name("LIST").default_value("1,2,4,8,16")),
        ))
        .subcommand(config_args(
            Command::new("ablate-mode")
                .about("One search per mode; writes ablation_mode.csv and skip_trace.csv")
                .arg(modes.clone().default_value("attention,random,full")),
        ))
        .subcommand(config_args(
            Command::new("skip-trace")
                .about("Per-epoch skip-connection counts per mode; writes skip_trace.csv")
                .arg(modes.default_value("full,attention")),
        ))
}

fn run(m: &ArgMatches) -> Result<ExitCode> {
    match m.subcommand() {
        Some(("search", m)) => {
            let cfg = run_config(m)?;
            println!("epoch,train_loss,val_loss,val_acc,skip_normal,skip_reduction,seconds");
            let out = cmd_search(&cfg, |e| {
                println!(
                    "{},{:.4},{:.4},{:.4},{},{},{:.1}",
                    e.epoch, e.train_loss, e.val_loss, e.val_acc, e.skip_normal, e.skip_reduction, e.seconds
                )
            })?;
            println!("final val_acc {:.4}; artifacts in {}", out.final_eval.accuracy, cfg.out_dir.display());
        }
        Some(("derive", m)) => {
            let alpha = PathBuf::from(m.get_one::<String>("alpha").expect("required"));
            let out = match m.get_one::<String>("out") {
                Some(p) => PathBuf::from(p),
                None => alpha.with_file_name(GENOTYPE_FILE),
            };
            let g = cmd_derive(&alpha, &out)?;
            println!("{}", g.to_json()?);
        }
        Some(("eval", m)) => {
            let cfg = run_config(m)?;
            let genotype = read_genotype(m.get_one::<String>("genotype").expect("required"))?;
            println!("epoch,train_loss,val_loss,val_acc,seconds");
            cmd_eval(&genotype, &cfg, |e| {
                println!("{},{:.4},{:.4},{:.4},{:.1}", e.epoch, e.train_loss, e.val_loss, e.val_acc, e.seconds)
            })?;
        }
        Some(("gradcheck", m)) => {
            let seed = m.get_one::<u64>("seed").copied().unwrap_or(DEFAULT_SEED);
            let results = cmd_gradcheck(seed, m.get_one::<String>("out_dir").expect("defaulted"))?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
            for r in results.iter().filter(|r| m.get_flag("verbose") || !r.passed) {
                println!("{} {} seed {} rel_error {:.3e}", if r.passed { "ok  " } else { "FAIL" }, r.case, r.seed, r.rel_error);
            }
            let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
            println!(
                "{} of {} cases within {GRAD_TOLERANCE:e}; worst {worst:.3e}",
                results.len() - failed.len(),
                results.len()
            );
            if !failed.is_empty() {
                return Ok(ExitCode::from(GRADCHECK_FAILED));
            }
        }
        Some(("ablate-k", m)) => {
            let cfg = run_config(m)?;
            let ks = parse_list(m.get_one::<String>("ks").expect("defaulted"), "K", |s| {
                s.parse::<usize>().map_err(|_| anyhow!("K expects a positive integer, got `{s}`"))
            })?;
            println!("K,opspace_floats,final_val_acc,seconds");
            cmd_ablate_k(&cfg, &ks, |r| println!("{},{},{:.4},{:.1}", r.k, r.opspace_floats, r.final_val_acc, r.seconds))?;
        }
        Some(("ablate-mode", m)) => {
            let cfg = run_config(m)?;
            let modes = parse_modes(m.get_one::<String>("modes").expect("defaulted"))?;
            println!("mode,K,opspace_floats,final_val_acc,seconds");
            cmd_ablate_mode(&cfg, &modes, |r| {
                println!("{},{},{},{:.4},{:.1}", r.mode, r.k, r.opspace_floats, r.final_val_acc, r.seconds)
            })?;
        }
        Some(("skip-trace", m)) => {
            let cfg = run_config(m)?;
            let modes = parse_modes(m.get_one::<String>("modes").expect("defaulted"))?;
            println!("epoch,mode,skip_normal,skip_reduction");
            cmd_skip_trace(&cfg, &modes, |mode, e| println!("{},{mode},{},{}", e.epoch, e.skip_normal, e.skip_reduction))?;
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::FAILURE;
        }
        Err(e) => {
            // Keep usage errors to one line and off exit code 2.
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::FAILURE;
        }
    };
    match run(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
