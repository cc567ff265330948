//! Command-line front end. Every configuration key is also a `--flag`;
//! flags override values from `--config FILE`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use legp::pipeline::{self, config::{ALIASES, KEYS}, RunConfig};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("partition", "build the region hierarchy and write the region file"),
    ("fit", "fit local models and the sparse combiner; write a model bundle"),
    ("predict", "predict genotypic values of new lines from a bundle"),
    ("assoc", "hierarchical variance-component tests"),
    ("cv", "repeated train/test accuracy comparison"),
    ("simulate", "write a simulated dataset"),
    ("config", "print the resolved configuration"),
];

fn cli() -> Command {
    let mut common = vec![
        Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"),
        Arg::new("verbose").short('v').long("verbose").action(ArgAction::SetTrue).help("log progress"),
    ];
    for (key, default, doc) in KEYS {
        let help = if default.is_empty() {
            doc.to_string()
        } else {
            format!("{doc} [default: {default}]")
        };
        // clap wants 'static flag names; the table is fixed for the process lifetime
        let long: &'static str = key.replace('_', "-").leak();
        let mut arg = Arg::new(*key).long(long).value_name("VALUE").help(help);
        for (alias, _) in ALIASES.iter().filter(|(_, full)| full == key) {
            arg = arg.visible_alias(*alias);
        }
        common.push(arg);
    }
    let mut cmd = Command::new("legp")
        .about("Locally epistatic genomic prediction")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).args(common.clone());
        if *name == "config" {
            sub = sub.arg(
                Arg::new("dump-defaults")
                    .long("dump-defaults")
                    .action(ArgAction::SetTrue)
                    .help("print every key with its default and description"),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn resolve(m: &ArgMatches) -> legp::Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(p.as_ref())?,
        None => RunConfig::default(),
    };
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches, out: &mut String) -> legp::Result<()> {
    if name == "config" && m.get_flag("dump-defaults") {
        out.push_str(&RunConfig::dump_defaults());
        return Ok(());
    }
    let cfg = resolve(m)?;
    let threads: usize = cfg.parse("threads")?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| legp::Error::Config(format!("thread pool: {e}")))?;
    match name {
        "partition" => {
            let h = pipeline::cmd_partition(&cfg)?;
            if !cfg.is_set("out") {
                for r in h.regions() {
                    let _ = writeln!(out, "{}\t{}\t{}", r.id, r.level, r.n_markers());
                }
            }
        }
        "fit" => {
            let b = pipeline::cmd_fit(&cfg)?;
            out.push_str(&pipeline::commands::importance_text(&b));
        }
        "predict" => {
            let preds = pipeline::cmd_predict(&cfg)?;
            if !cfg.is_set("out") {
                for p in preds {
                    let full = p.full_prediction.map_or("NA".into(), |v| v.to_string());
                    let _ = writeln!(out, "{}\t{}\t{full}", p.line_id, p.genotypic_value);
                }
            }
        }
        "assoc" => {
            let tests = pipeline::cmd_assoc(&cfg)?;
            for t in tests.iter().filter(|t| t.rejected) {
                let _ = writeln!(out, "{}\trejected\tp = {}", t.region_id, t.p_value.unwrap_or(f64::NAN));
            }
        }
        "cv" => {
            let report = pipeline::cmd_cv(&cfg)?;
            let mut models = Vec::new();
            for r in &report.records {
                if !models.contains(&r.model) {
                    models.push(r.model);
                }
            }
            for m in models {
                let (mean, sd) = report.summary(m);
                let _ = writeln!(out, "{}\tmean accuracy {mean:.4}\tsd {sd:.4}", m.name());
            }
        }
        "simulate" => {
            let d = pipeline::cmd_simulate(&cfg)?;
            let _ = writeln!(out, "realized h2 {:.4}", d.truth.realized_h2);
        }
        "config" => out.push_str(&cfg.dump()),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let level = if sub.get_flag("verbose") { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut out = String::new();
    let res = run(name, sub, &mut out);
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
