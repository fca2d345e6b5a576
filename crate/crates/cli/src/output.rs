//! CSV and text emission. Every CSV starts with `# schema=1` and a header
//! row; floats carry 17 significant digits so they parse back exactly.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use homotopy_da::ensemble::{Ensemble, EnsembleStats};
use homotopy_da::experiments::{Method, MomentRecord, SweepCell, SweepResult};
use homotopy_da::DMatrix;

use crate::error::{CliError, Result};

pub const SCHEMA_LINE: &str = "# schema=1";

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV writer positioned after the schema line.
pub fn csv_writer<W: Write>(mut w: W) -> io::Result<csv::Writer<W>> {
    writeln!(w, "{SCHEMA_LINE}")?;
    Ok(csv::Writer::from_writer(w))
}

/// Creates `dir/name` and hands a buffered writer to `body`.
pub fn write_file<F>(dir: &Path, name: &str, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Upper-triangle entries `(i, j)`, `i ≤ j`, row by row.
fn upper_triangle(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(move |i| (i..d).map(move |j| (i, j)))
}

pub fn cov_entries(cov: &DMatrix<f64>) -> Vec<f64> {
    upper_triangle(cov.nrows()).map(|(i, j)| cov[(i, j)]).collect()
}

/// Columns `t, mean_1..mean_d, cov_i_j (i ≤ j)` with 1-based components.
pub fn write_moments<W: Write>(w: W, records: &[MomentRecord]) -> io::Result<()> {
    let d = records.first().map_or(0, |r| r.mean.len());
    let mut out = csv_writer(w)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("mean_{i}")));
    header.extend(upper_triangle(d).map(|(i, j)| format!("cov_{}_{}", i + 1, j + 1)));
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![fmt_float(r.t)];
        row.extend(r.mean.iter().map(|v| fmt_float(*v)));
        row.extend(cov_entries(&r.cov).into_iter().map(fmt_float));
        out.write_record(&row)?;
    }
    out.flush()
}

/// Columns `t, particle, x_1..x_d`, one row per particle per snapshot.
pub fn write_particles<W: Write>(w: W, snapshots: &[(f64, Ensemble)]) -> io::Result<()> {
    let d = snapshots.first().map_or(0, |(_, e)| e.dim());
    let mut out = csv_writer(w)?;
    let mut header = vec!["t".to_string(), "particle".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    out.write_record(&header)?;
    for (t, ens) in snapshots {
        for (k, x) in ens.iter().enumerate() {
            let mut row = vec![fmt_float(*t), k.to_string()];
            row.extend(x.iter().map(|v| fmt_float(*v)));
            out.write_record(&row)?;
        }
    }
    out.flush()
}

pub const RMSE_HEADER: [&str; 5] = ["method", "M", "dtobs", "inflation", "rmse"];

/// One `rmse.csv` row; failed cells carry `NaN`.
pub fn rmse_row(cell: &SweepCell) -> [String; 5] {
    [
        cell.method.to_string(),
        cell.particles.to_string(),
        fmt_float(cell.dt_obs),
        fmt_float(cell.inflation),
        fmt_float(*cell.rmse.as_ref().unwrap_or(&f64::NAN)),
    ]
}

pub fn write_rmse<W: Write>(w: W, cells: &[SweepCell]) -> io::Result<()> {
    let mut out = csv_writer(w)?;
    out.write_record(RMSE_HEADER)?;
    for cell in cells {
        out.write_record(rmse_row(cell))?;
    }
    out.flush()
}

/// Best-over-inflation RMSE per `(Δt_obs, M)`: rows are observation
/// intervals, columns ensemble sizes, cells `esrf/homotopy` (or a single
/// value when only one method ran). A second block lists the minimizing
/// inflation rates.
pub fn table1_text(result: &SweepResult) -> String {
    let grid = &result.grid;
    let methods: Vec<Method> = [Method::Esrf, Method::Homotopy]
        .into_iter()
        .filter(|m| grid.methods.contains(m))
        .collect();
    let names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    let cell = |dt_obs: f64, particles: usize, pick: &dyn Fn((f64, f64)) -> f64| -> String {
        methods
            .iter()
            .map(|&m| match result.best(m, particles, dt_obs) {
                Some(b) => format!("{:.4}", pick(b)),
                None => "-".to_string(),
            })
            .collect::<Vec<_>>()
            .join("/")
    };
    let block = |title: &str, pick: &dyn Fn((f64, f64)) -> f64| -> String {
        let mut text = format!("# {title} ({})\n", names.join("/"));
        let mut header = format!("{:<10}", "dtobs\\M");
        for m in &grid.particles {
            header.push_str(&format!("{m:>18}"));
        }
        text.push_str(header.trim_end());
        text.push('\n');
        for &dt_obs in &grid.dt_obs {
            let mut row = format!("{dt_obs:<10}");
            for &m in &grid.particles {
                row.push_str(&format!("{:>18}", cell(dt_obs, m, pick)));
            }
            text.push_str(&row);
            text.push('\n');
        }
        text
    };
    let mut text = block("best-over-inflation RMSE", &|(rmse, _)| rmse);
    text.push('\n');
    text.push_str(&block("minimizing inflation", &|(_, inflation)| inflation));
    text
}

/// `mean_1 = ..` style lines for a summary.
pub fn stats_lines(prefix: &str, stats: &EnsembleStats) -> String {
    format!(
        "{prefix}_mean = {}\n{prefix}_cov = {}\n",
        join_floats(stats.mean.iter().copied()),
        join_floats(cov_entries(&stats.cov))
    )
}

pub fn join_floats(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// A gnuplot script for the moments of a scenario run.
pub fn moments_plot_script(dim: usize) -> String {
    let mut s = String::from(
        "# gnuplot script: plots ensemble means and variances from moments.csv\n\
         set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 't'\n\
         set multiplot layout 2,1\n",
    );
    let means: Vec<String> = (0..dim)
        .map(|i| format!("'moments.csv' using 1:{} with lines", i + 2))
        .collect();
    s.push_str(&format!("plot {}\n", means.join(", ")));
    let mut col = 2 + dim;
    let mut vars = Vec::new();
    for i in 0..dim {
        vars.push(format!("'moments.csv' using 1:{col} with lines"));
        col += dim - i;
    }
    s.push_str(&format!("plot {}\n", vars.join(", ")));
    s.push_str("unset multiplot\npause mouse close\n");
    s
}

/// A gnuplot script plotting RMSE against inflation for every `(method, M,
/// Δt_obs)` line of a sweep.
pub fn sweep_plot_script(result: &SweepResult) -> String {
    let grid = &result.grid;
    let mut s = String::from(
        "# gnuplot script: RMSE against inflation from rmse.csv\n\
         set datafile separator ','\n\
         set xlabel 'inflation'\n\
         set ylabel 'RMSE'\n",
    );
    let mut lines = Vec::new();
    for method in &grid.methods {
        for m in &grid.particles {
            for dt_obs in &grid.dt_obs {
                lines.push(format!(
                    "'rmse.csv' using (strcol(1) eq '{method}' && $2 == {m} && abs($3 - {dt_obs:?}) < 1e-12 ? $4 : 1/0):5 \
                     with linespoints title '{method} M={m} dtobs={dt_obs}'"
                ));
            }
        }
    }
    s.push_str(&format!("plot {}\n", lines.join(", \\\n     ")));
    s.push_str("pause mouse close\n");
    s
}
