use std::path::PathBuf;
use std::process::ExitCode;
use tmdlab_cli::config::{global_help, kind_help, CliError, ExperimentConfig, ExperimentKind};

fn parse_args(args: &[String]) -> Result<Option<ExperimentConfig>, CliError> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        print!("{}", global_help());
        return Ok(None);
    }
    let kind = ExperimentKind::from_name(&args[0]).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown command `{}`; run `tmdlab --help` for the list",
            args[0]
        ))
    })?;
    let mut config = ExperimentConfig::defaults(kind);

    // First pass: help and config file, so flags override file values.
    let rest = &args[1..];
    let mut i = 0;
    while i < rest.len() {
        match rest[i].as_str() {
            "--help" | "-h" => {
                print!("{}", kind_help(kind));
                return Ok(None);
            }
            "--config" => {
                let path = rest.get(i + 1).ok_or_else(|| {
                    CliError::Usage("--config needs a path".to_string())
                })?;
                let text = std::fs::read_to_string(path)?;
                config.apply_file(&text)?;
                i += 2;
            }
            _ => i += 1,
        }
    }

    let mut i = 0;
    while i < rest.len() {
        let flag = rest[i].as_str();
        match flag {
            "--config" => i += 2,
            "--seed" => {
                let value = rest
                    .get(i + 1)
                    .ok_or_else(|| CliError::Usage("--seed needs a value".to_string()))?;
                config.set("seeds", value)?;
                i += 2;
            }
            "--out" => {
                let value = rest
                    .get(i + 1)
                    .ok_or_else(|| CliError::Usage("--out needs a path".to_string()))?;
                config.out_dir = PathBuf::from(value);
                i += 2;
            }
            _ if flag.starts_with("--") => {
                let key = &flag[2..];
                let value = rest.get(i + 1).ok_or_else(|| {
                    CliError::Usage(format!("{flag} needs a value"))
                })?;
                config.set(key, value)?;
                i += 2;
            }
            other => {
                return Err(CliError::Usage(format!("unexpected argument `{other}`")));
            }
        }
    }
    Ok(Some(config))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match parse_args(&args) {
        Ok(Some(config)) => config,
        Ok(None) => return ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.record());
            return ExitCode::FAILURE;
        }
    };
    match tmdlab_cli::run(&config) {
        Ok(outcome) => {
            for name in &outcome.outputs {
                println!("wrote {}", config.out_dir.join(name).display());
            }
            if outcome.failed_checks {
                eprintln!("error kind=check-failed message=\"verification reported failures\"");
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::FAILURE
        }
    }
}
