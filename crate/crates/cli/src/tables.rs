//! `stats` subcommands on wide CSV tables: one column per method or group,
//! header row with the names, one row per trial or observation.

use std::path::{Path, PathBuf};

use clap::Subcommand;
use tclab_core::stats::{
    cd_diagram_svg, cd_groups, friedman, nemenyi_cd, rank_methods, t_confidence_interval, tukey_csv, tukey_hsd,
};

use crate::{usage, write_text, CliResult};

#[derive(Subcommand)]
pub enum StatsCommand {
    /// Average ranks, Friedman test, Nemenyi critical distance and groups.
    /// Higher values are better; every row must be complete.
    Cd {
        csv: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Write a critical-distance diagram (SVG).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Tukey HSD pairwise comparisons between columns; empty cells are skipped.
    Tukey {
        csv: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Mean and Student t confidence interval per column.
    Ci {
        csv: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
}

/// Column names and per-column values (`None` for empty cells).
fn read_columns(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(usage(format!("{}: no columns", path.display())));
    }
    let mut cols = vec![Vec::new(); names.len()];
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (c, cell) in row.iter().enumerate() {
            let v = if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse::<f64>()
                        .map_err(|_| usage(format!("{}: row {}: {cell:?} is not a number", path.display(), i + 2)))?,
                )
            };
            cols[c].push(v);
        }
    }
    Ok((names, cols))
}

fn present(col: &[Option<f64>]) -> Vec<f64> {
    col.iter().flatten().copied().collect()
}

pub fn stats(c: StatsCommand) -> CliResult {
    match c {
        StatsCommand::Cd { csv, alpha, svg } => {
            let (names, cols) = read_columns(&csv)?;
            if cols.iter().flatten().any(Option::is_none) {
                return Err(usage("cd needs a value in every cell"));
            }
            let obs: Vec<Vec<f64>> = cols.iter().map(|c| present(c)).collect();
            let table = rank_methods(names.clone(), obs).map_err(usage)?;
            let (chi2, p) = friedman(&table);
            let cd = nemenyi_cd(names.len(), table.num_trials(), alpha).map_err(usage)?;
            println!("method,average_rank");
            for i in table.order() {
                println!("{},{:.4}", names[i], table.average_ranks[i]);
            }
            println!();
            println!("trials: {}", table.num_trials());
            println!("friedman chi2: {chi2:.4} (p = {p:.4e})");
            println!("critical distance (alpha {alpha}): {cd:.4}");
            for g in cd_groups(&table, cd) {
                let members: Vec<&str> = g.iter().map(|&i| names[i].as_str()).collect();
                println!("group: {}", members.join(", "));
            }
            if let Some(path) = svg {
                write_text(&path, &cd_diagram_svg(&table, cd))?;
            }
            Ok(())
        }
        StatsCommand::Tukey { csv, alpha } => {
            let (names, cols) = read_columns(&csv)?;
            let groups: Vec<Vec<f64>> = cols.iter().map(|c| present(c)).collect();
            let results = tukey_hsd(&groups, alpha).map_err(usage)?;
            print!("{}", tukey_csv(&names, &results));
            Ok(())
        }
        StatsCommand::Ci { csv, level } => {
            let (names, cols) = read_columns(&csv)?;
            println!("column,n,mean,half_width,lower,upper");
            for (name, col) in names.iter().zip(&cols) {
                let v = present(col);
                let (m, h) = t_confidence_interval(&v, level).map_err(|e| usage(format!("{name}: {e}")))?;
                println!("{name},{},{m:.6},{h:.6},{:.6},{:.6}", v.len(), m - h, m + h);
            }
            Ok(())
        }
    }
}
