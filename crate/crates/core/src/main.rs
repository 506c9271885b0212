//! `baire` command line: build a run from a graph-of-groups file, verify its
//! certificates against the commitment log, or export a Schreier fragment.
//!
//! Exit codes: 0 success, 2 validation error, 3 certificate failure,
//! 4 budget diagnostic.

use baire::composer::build_run;
use baire::manifest::write_run;
use baire::verify::{schreier, verify, VerifyMode};
use baire::Error;
use std::path::PathBuf;
use std::process::ExitCode;

fn usage() -> String {
    "usage:\n\
     \x20 baire build <input.gg> [--budget N] [--out DIR]\n\
     \x20 baire verify <run-dir|manifest.txt> [--mode all|folner|transitive|faithful|equivariance] [--depth L]\n\
     \x20 baire schreier <run-dir|manifest.txt> [--points K] [--gens name,name,...]\n"
        .to_string()
}

fn flag_value(args: &[String], name: &str) -> Result<Option<String>, Error> {
    for (i, a) in args.iter().enumerate() {
        if a == name {
            return match args.get(i + 1) {
                Some(v) => Ok(Some(v.clone())),
                None => Err(Error::validation(format!("{name} needs a value"))),
            };
        }
        if let Some(v) = a.strip_prefix(&format!("{name}=")) {
            return Ok(Some(v.to_string()));
        }
    }
    Ok(None)
}

fn run() -> Result<(), Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cmd = args.first().map(|s| s.as_str()).unwrap_or("");
    match cmd {
        "build" => {
            let input_path = args
                .get(1)
                .filter(|a| !a.starts_with("--"))
                .ok_or_else(|| Error::validation(usage()))?;
            let budget = flag_value(&args, "--budget")?
                .map(|v| v.parse::<u64>().map_err(|_| Error::validation("bad --budget value")))
                .transpose()?;
            let out = PathBuf::from(flag_value(&args, "--out")?.unwrap_or_else(|| "out".into()));
            let text = std::fs::read_to_string(input_path)?;
            let run = build_run(&text, budget)?;
            write_run(&run, &out)?;
            {
                let outer = run.result.engines.last().unwrap().borrow();
                println!(
                    "built {} step(s), budget {}: {} transitive, {} folner, {} faithful certificates",
                    run.result.engines.len(),
                    run.budget,
                    outer.certs.transitive.len(),
                    outer.certs.folner.len(),
                    outer.certs.faithful.len()
                );
            }
            println!("manifest {}", out.join("manifest.txt").display());
            match run.diagnostic {
                // a budget diagnostic aborts the schedule but the partial
                // certificate list above was still written
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        "verify" => {
            let target = args
                .get(1)
                .filter(|a| !a.starts_with("--"))
                .ok_or_else(|| Error::validation(usage()))?;
            let mode = VerifyMode::parse(
                &flag_value(&args, "--mode")?.unwrap_or_else(|| "all".into()),
            )?;
            let depth = flag_value(&args, "--depth")?
                .map(|v| v.parse::<u64>().map_err(|_| Error::validation("bad --depth value")))
                .transpose()?
                .unwrap_or(0);
            let report = verify(&PathBuf::from(target), mode, depth)?;
            for line in report.lines {
                println!("{line}");
            }
            println!("verify: all checks passed");
            Ok(())
        }
        "schreier" => {
            let target = args
                .get(1)
                .filter(|a| !a.starts_with("--"))
                .ok_or_else(|| Error::validation(usage()))?;
            let points = flag_value(&args, "--points")?
                .map(|v| v.parse::<u64>().map_err(|_| Error::validation("bad --points value")))
                .transpose()?
                .unwrap_or(10);
            let gens: Vec<String> = flag_value(&args, "--gens")?
                .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_else(|| vec!["id".to_string()]);
            let dot = schreier(&PathBuf::from(target), points, &gens)?;
            print!("{dot}");
            Ok(())
        }
        "--help" | "-h" | "help" => {
            print!("{}", usage());
            Ok(())
        }
        _ => Err(Error::validation(usage())),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
