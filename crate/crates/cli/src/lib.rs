//! Command-line scenario runner.
//!
//! Exit statuses: 0 all checks pass, 1 a check failed, 2 the configuration
//! or arguments are invalid, 3 a numerical fault occurred during a run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use logderiv::scenario::{
    builtin_scenario, catalog, run_scenario, CatalogKind, ConfigFile, RunError, RunOptions, ScenarioConfig,
    ScenarioReport, VariantSelection,
};
use rayon::prelude::*;
use serde::Serialize;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "logderiv", version, about = "Run logarithmic-derivative verification scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a TOML scenario file or a named builtin scenario.
    Run {
        /// Path to a config file, or the name of a builtin scenario.
        config: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the engine seed of every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// paper, corrected or both.
        #[arg(long)]
        variant: Option<String>,
        /// Scenarios run concurrently on this many threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Suppress the per-scenario summary on stdout.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print the catalog of builtin measures, fields, families and scenarios.
    ListBuiltins {
        #[arg(long)]
        kind: Option<String>,
    },
}

/// Parse `args` (program name first) and execute; returns the exit status.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match cli.command {
        Command::ListBuiltins { kind } => list_builtins(kind.as_deref()),
        Command::Run {
            config,
            out,
            seed,
            variant,
            jobs,
            quiet,
        } => run(&config, &out, seed, variant.as_deref(), jobs, quiet),
    }
}

fn list_builtins(kind: Option<&str>) -> u8 {
    let filter = match kind {
        None => None,
        Some(k) => match CatalogKind::parse(k) {
            Some(k) => Some(k),
            None => {
                let known: Vec<_> = CatalogKind::ALL.iter().map(|k| k.name()).collect();
                eprintln!("error: unknown kind `{k}`; expected one of: {}", known.join(", "));
                return EXIT_INVALID;
            }
        },
    };
    // write errors (e.g. a closed pipe) are not worth a panic
    let mut out = std::io::stdout().lock();
    for e in catalog(filter) {
        let _ = writeln!(out, "{:<14} {:<28} {}", e.kind.name(), e.name, e.description);
        if !e.parameters.is_empty() {
            let _ = writeln!(out, "{:<14} {:<28}   params: {}", "", "", e.parameters);
        }
    }
    0
}

fn load(config: &str) -> Result<Vec<ScenarioConfig>, String> {
    let path = Path::new(config);
    if !path.exists() {
        return builtin_scenario(config)
            .map(|s| vec![s])
            .ok_or_else(|| format!("`{config}` is neither a readable file nor a builtin scenario (see `list-builtins --kind scenario`)"));
    }
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Either a list of `[[scenario]]` tables or a single scenario at top level.
fn parse_config(text: &str) -> Result<Vec<ScenarioConfig>, String> {
    let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let scenarios = if table.contains_key("scenario") {
        toml::from_str::<ConfigFile>(text).map_err(|e| e.to_string())?.scenario
    } else {
        vec![toml::from_str::<ScenarioConfig>(text).map_err(|e| e.to_string())?]
    };
    if scenarios.is_empty() {
        return Err("config contains no scenarios".into());
    }
    Ok(scenarios)
}

#[derive(Serialize)]
struct Timing {
    started_unix_s: f64,
    total_ms: f64,
    scenario_ms: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct BatchReport<'a> {
    pass: bool,
    scenarios: &'a [ScenarioReport],
    /// Wall-clock data; the only field that varies between identical runs.
    timestamp: Timing,
}

fn run(config: &str, out: &Path, seed: Option<u64>, variant: Option<&str>, jobs: Option<usize>, quiet: bool) -> u8 {
    let started = Instant::now();
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let variant = match variant.map(|v| VariantSelection::parse(v).ok_or(v)) {
        None => None,
        Some(Ok(v)) => Some(v),
        Some(Err(v)) => {
            eprintln!("error: --variant must be paper, corrected or both, got `{v}`");
            return EXIT_INVALID;
        }
    };
    if jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_INVALID;
    }
    let scenarios = match load(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };

    // validate everything before running anything
    let mut problems = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let mut checked = s.clone();
        if variant.is_some() {
            checked.variant = variant;
        }
        if let Err(errs) = logderiv::scenario::validate(&checked) {
            problems.extend(errs.into_iter().map(|e| format!("scenario[{i}] `{}`: {e}", s.name)));
        }
    }
    let mut names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    for w in names.windows(2).filter(|w| w[0] == w[1]) {
        problems.push(format!("duplicate scenario name `{}`", w[0]));
    }
    if !problems.is_empty() {
        eprintln!("error: {} validation problem(s):", problems.len());
        for p in &problems {
            eprintln!("  - {p}");
        }
        return EXIT_INVALID;
    }

    let opts = RunOptions { seed, variant };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let results: Vec<(Result<ScenarioReport, RunError>, f64)> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|s| {
                let t = Instant::now();
                let r = run_scenario(s, &opts);
                (r, t.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    });

    let mut reports = Vec::new();
    let mut scenario_ms = Vec::new();
    let mut fault = false;
    for (s, (r, ms)) in scenarios.iter().zip(results) {
        match r {
            Ok(rep) => {
                scenario_ms.push((s.name.clone(), ms));
                reports.push(rep);
            }
            Err(RunError::Validation(errs)) => {
                eprintln!("error: scenario `{}` failed validation: {}", s.name, errs.join("; "));
                return EXIT_INVALID;
            }
            Err(RunError::Numeric(e)) => {
                fault = true;
                eprintln!("numeric fault in scenario `{}`: {e}", s.name);
                match e.probe_point() {
                    Some(p) => eprintln!("  probe point: {p:?}"),
                    None => eprintln!("  probe point: unavailable"),
                }
            }
        }
    }
    if fault {
        return EXIT_NUMERIC;
    }

    let pass = reports.iter().all(|r| r.pass);
    let batch = BatchReport {
        pass,
        scenarios: &reports,
        timestamp: Timing {
            started_unix_s,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            scenario_ms,
        },
    };
    if let Err(e) = write_outputs(out, &batch) {
        eprintln!("error: writing reports to {}: {e}", out.display());
        return EXIT_NUMERIC;
    }
    let mut stdout = std::io::stdout().lock();
    for r in reports.iter().filter(|_| !quiet) {
        let failed = r.checks.iter().filter(|c| !c.pass).count();
        let _ = writeln!(
            stdout,
            "{:<28} {} ({} checks, {} failed)",
            r.scenario.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.checks.len(),
            failed
        );
        for c in r.checks.iter().filter(|c| !c.pass) {
            let _ = writeln!(stdout, "    {}: rel_err {:.3e} > tol {:.1e}", c.check, c.rel_err, c.tol);
        }
        for n in &r.notes {
            let _ = writeln!(stdout, "    note: {n}");
        }
    }
    if pass {
        0
    } else {
        EXIT_CHECK_FAILED
    }
}

fn write_outputs(out: &Path, batch: &BatchReport) -> Result<(), Box<dyn std::error::Error>> {
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(batch)?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["scenario", "check", "analytic", "oracle", "abs_err", "rel_err", "tol", "pass"])?;
    for r in batch.scenarios {
        for c in &r.checks {
            w.write_record([
                r.scenario.name.clone(),
                c.check.clone(),
                c.analytic.to_string(),
                c.oracle.to_string(),
                c.abs_err.to_string(),
                c.rel_err.to_string(),
                c.tol.to_string(),
                c.pass.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let curves: Vec<_> = batch.scenarios.iter().flat_map(|r| r.curves.iter().map(move |c| (r, c))).collect();
    if !curves.is_empty() {
        let dir = out.join("curves");
        fs::create_dir_all(&dir)?;
        for (r, c) in curves {
            let mut w = csv::Writer::from_path(dir.join(format!("{}__{}.csv", r.scenario.name, c.name)))?;
            w.write_record(&c.columns)?;
            for [x, y] in &c.points {
                w.write_record([x.to_string(), y.to_string()])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_batch_configs_parse() {
        let single = "name = \"a\"\nkind = \"logderiv_check\"\nmeasure = { builtin = \"gaussian\", mean = [0.0] }\nfield = { builtin = \"constant-field\", value = [1.0] }\n";
        assert_eq!(parse_config(single).unwrap().len(), 1);
        let batch = format!("[[scenario]]\n{single}\n[[scenario]]\n{}", single.replace("\"a\"", "\"b\""));
        assert_eq!(parse_config(&batch).unwrap().len(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "name = \"a\"\nkind = \"logderiv_check\"\nbogus = 3\n";
        let e = parse_config(bad).unwrap_err();
        assert!(e.contains("line 3"), "{e}");
    }
}
