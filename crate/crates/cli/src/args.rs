use std::path::PathBuf;

use clap::{Parser, Subcommand};
use graphfed_core::Error;

use crate::commands::Command;
use crate::config::{ExperimentConfig, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "graphfed", version, about = "Federated graph foundation model experiments")]
pub struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Train clients sequentially in id order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Split each dataset across its clients and write the client containers.
    Partition,
    /// Federated pre-training; writes a checkpoint and the round log.
    Pretrain {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune task heads on the pre-trained model and score them.
    Finetune,
    /// Re-score saved heads on their test splits.
    Evaluate,
    /// Inter-domain similarity matrices and degree histograms.
    Diagnose {
        /// Keep only degrees up to this value in the histogram table.
        #[arg(long)]
        max_degree: Option<usize>,
    },
    /// Pretrain and fine-tune once per grid value.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: Option<SweepAxis>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    match s {
        "codebook_tokens" => Ok(SweepAxis::CodebookTokens),
        "prompt_count" => Ok(SweepAxis::PromptCount),
        "sigma" => Ok(SweepAxis::Sigma),
        "ablation" => Ok(SweepAxis::Ablation),
        other => Err(format!("unknown axis `{other}`")),
    }
}

impl Cli {
    /// The configuration after file loading and command-line overrides.
    pub fn resolve(&self) -> Result<(Command, ExperimentConfig), Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.deterministic {
            cfg.federation.deterministic = true;
        }
        let command = match &self.command {
            Sub::Partition => Command::Partition,
            Sub::Pretrain { resume } => Command::Pretrain { resume: *resume },
            Sub::Finetune => Command::Finetune,
            Sub::Evaluate => Command::Evaluate,
            Sub::Diagnose { max_degree } => Command::Diagnose { max_degree: *max_degree },
            Sub::Sweep { axis, values } => {
                if let Some(a) = axis {
                    if *a != cfg.sweep.axis && values.is_none() {
                        cfg.sweep.values = a.default_values();
                    }
                    cfg.sweep.axis = *a;
                }
                if let Some(v) = values {
                    cfg.sweep.values = v.clone();
                }
                Command::Sweep
            }
        };
        Ok((command, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["graphfed", "--seed", "7", "--deterministic", "pretrain", "--resume"]).unwrap();
        let (cmd, cfg) = cli.resolve().unwrap();
        assert_eq!(cmd, Command::Pretrain { resume: true });
        assert_eq!(cfg.seed, 7);
        assert!(cfg.federation.deterministic);
    }

    #[test]
    fn sweep_grid_from_flags() {
        let cli = Cli::try_parse_from(["graphfed", "sweep", "--axis", "codebook_tokens", "--values", "32,64,128"]).unwrap();
        let (_, cfg) = cli.resolve().unwrap();
        assert_eq!(cfg.sweep.axis, SweepAxis::CodebookTokens);
        assert_eq!(cfg.sweep.values, vec!["32", "64", "128"]);
    }

    #[test]
    fn axis_alone_brings_its_own_grid() {
        let cli = Cli::try_parse_from(["graphfed", "sweep", "--axis", "codebook_tokens"]).unwrap();
        let (_, cfg) = cli.resolve().unwrap();
        assert!(cfg.sweep.values.iter().any(|v| v == "128"));
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let cli = Cli::try_parse_from(["graphfed", "--config", "/no/such.toml", "partition"]).unwrap();
        assert!(matches!(cli.resolve(), Err(Error::Config(m)) if m.contains("/no/such.toml")));
    }
}
