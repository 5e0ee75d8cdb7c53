use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};
use ipr_core::experiment::config::KEYS;
use ipr_core::experiment::{
    cmd_ablate, cmd_corrupt_recover, cmd_eval, cmd_generate, cmd_refine, cmd_report, cmd_train, ExperimentConfig,
    ResultTable,
};
use ipr_core::tasks::Task;

const CONFIG_COMMANDS: &[(&str, &str)] = &[
    ("train", "Train a denoiser and write the checkpoint and loss curve"),
    ("generate", "Sequential generation only (iteration 0)"),
    ("refine", "Generate, then refine with iterative partial resampling"),
    ("corrupt-recover", "Refine swap-corrupted Sudoku grids with no fixed cells"),
    ("ablate", "Resampling ratio x noise mode x region mode sweep"),
];

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value config file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        let long = key.replace('_', "-");
        let mut arg = Arg::new(*key).long(long.clone()).value_name("VALUE");
        if long != *key {
            arg = arg.alias(*key);
        }
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    let mut cmd = Command::new("ipr")
        .about("Sequential region-wise diffusion with iterative partial refinement")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in CONFIG_COMMANDS {
        cmd = cmd.subcommand(with_config_flags(Command::new(*name).about(*about)));
    }
    cmd.subcommand(
        Command::new("report")
            .about("Aggregate result tables across seeds into per-metric curves")
            .arg(Arg::new("out").long("out").value_name("DIR").default_value("report"))
            .arg(Arg::new("tables").required(true).action(ArgAction::Append).value_name("CSV")),
    )
    .subcommand(
        Command::new("eval")
            .about("Evaluate saved Sudoku grid files or .hsv images")
            .arg(Arg::new("out").long("out").value_name("CSV"))
            .arg(Arg::new("files").required(true).action(ArgAction::Append).value_name("FILE")),
    )
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::load(path.as_ref(), &overrides, Task::Sudoku4)?,
        None => ExperimentConfig::from_pairs(&overrides, Task::Sudoku4)?,
    };
    Ok(cfg)
}

fn print_final(table: &ResultTable) {
    let Some(last) = table.rows.iter().map(|r| r.r).max() else {
        return;
    };
    for row in table.rows.iter().filter(|r| r.r == last) {
        println!("seed {} r={} {} = {:.4}", row.seed, row.r, row.metric, row.value);
    }
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", sub)) => {
            let cfg = load_config(sub)?;
            let out = cmd_train(&cfg)?;
            println!(
                "trained {} for {} steps, final loss {:.5}; checkpoint {}",
                cfg.task.as_str(),
                out.losses.len(),
                out.losses.last().copied().unwrap_or(f64::NAN),
                cfg.checkpoint.display()
            );
        }
        Some(("generate", sub)) => print_final(&cmd_generate(&load_config(sub)?)?),
        Some(("refine", sub)) => print_final(&cmd_refine(&load_config(sub)?)?),
        Some(("corrupt-recover", sub)) => print_final(&cmd_corrupt_recover(&load_config(sub)?)?),
        Some(("ablate", sub)) => print_final(&cmd_ablate(&load_config(sub)?)?),
        Some(("report", sub)) => {
            let tables: Vec<PathBuf> = sub.get_many::<String>("tables").unwrap().map(PathBuf::from).collect();
            let out = PathBuf::from(sub.get_one::<String>("out").unwrap());
            let curves = cmd_report(&tables, &out)?;
            for (metric, points) in &curves {
                if let Some(p) = points.last() {
                    println!("{metric}: r={} {:.4} ± {:.4} ({} seeds)", p.r, p.mean, p.stderr, p.seeds);
                }
            }
        }
        Some(("eval", sub)) => {
            let files: Vec<PathBuf> = sub.get_many::<String>("files").unwrap().map(PathBuf::from).collect();
            let table = cmd_eval(&files)?;
            for row in &table.rows {
                println!("{} = {:.4} (n={})", row.metric, row.value, row.n);
            }
            if let Some(out) = sub.get_one::<String>("out") {
                table.save(out.as_ref())?;
            }
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(&cli().get_matches()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
