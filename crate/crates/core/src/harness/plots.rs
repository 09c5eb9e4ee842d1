//! Plain-text plot series. Every file starts with a `#` header naming its
//! columns, followed by whitespace-separated rows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{MetricsRecord, SampleMetrics};
use crate::{Error, Result};

fn write(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut text = format!("# {header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "nan".into())
}

/// Training curve of one run: one row per record.
pub fn training_curve(dir: &Path, name: &str, records: &[MetricsRecord]) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to plot".into()));
    }
    let rows: Vec<String> = records
        .iter()
        .map(|r| format!("{} {} {} {}", r.step, r.fidelity, r.reward, opt(r.reg)))
        .collect();
    write(dir, name, "step fidelity reward reg", &rows)
}

/// Method comparison bars and the overhead-versus-fidelity scatter, one
/// row per labelled evaluation record.
pub fn method_plots(dir: &Path, methods: &[(String, MetricsRecord)]) -> Result<Vec<PathBuf>> {
    if methods.is_empty() {
        return Err(Error::Invalid("no records to plot".into()));
    }
    if let Some((l, _)) = methods.iter().find(|(l, _)| l.is_empty() || l.contains(char::is_whitespace)) {
        return Err(Error::Invalid(format!("plot label {l:?} must be one non-empty word")));
    }
    let bars: Vec<String> = methods
        .iter()
        .map(|(l, r)| format!("{l} {} {} {} {}", r.fidelity, r.reward, opt(r.diversity), opt(r.dynamic_degree)))
        .collect();
    let scatter: Vec<String> = methods
        .iter()
        .map(|(l, r)| format!("{l} {} {} {}", r.nfe, r.verify_count, r.fidelity))
        .collect();
    Ok(vec![
        write(dir, "methods.dat", "method loglik reward diversity dynamic_degree", &bars)?,
        write(dir, "overhead.dat", "method nfe verify_count loglik", &scatter)?,
    ])
}

/// Oracle fidelity of the same base under both samplers.
pub fn sampler_comparison(dir: &Path, stochastic: &SampleMetrics, ode: &SampleMetrics) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for (name, m) in [("stochastic", stochastic), ("ode", ode)] {
        let mut s = String::new();
        write!(s, "{name} {} {} {} {}", m.loglik, m.reward, m.diversity, m.dynamic_degree).expect("string write");
        rows.push(s);
    }
    write(dir, "ode_vs_stochastic.dat", "sampler loglik reward diversity dynamic_degree", &rows)
}

/// Reads a plot file back as `(header, rows of fields)`.
pub fn read_series(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("# "))
        .ok_or_else(|| Error::Invalid(format!("{}: missing header", path.display())))?
        .to_string();
    let rows = lines.map(|l| l.split_whitespace().map(str::to_string).collect()).collect();
    Ok((header, rows))
}
