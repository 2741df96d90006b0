use std::process::ExitCode;

use clap::Parser;
use graphfed_cli::args::Cli;
use graphfed_cli::{run, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli
        .resolve()
        .map_err(CliError::from)
        .and_then(|(cmd, cfg)| run(&cmd, &cfg, &cli.out));
    match result {
        Ok(report) => {
            for n in &report.notes {
                println!("{n}");
            }
            for r in &report.summaries {
                println!(
                    "{} {} {} [{}]: {:.4} +- {:.4} over {} runs",
                    r.dataset, r.task, r.metric_name, r.ablation_flags, r.mean, r.std, r.runs
                );
            }
            println!("{} done; report in {}", report.command, cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
