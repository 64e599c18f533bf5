//! Market CSV files and their sidecars.
//!
//! The market table is the interchange format: one row per market, header
//! `market_id,chi,x_level,share_1..share_J,d_1..d_K`. Floats are written in
//! Rust's shortest round-trip notation, so reading a file back reproduces
//! every bit. Levels are one-based in files and zero-based in memory.

use std::path::Path;

use ridc::model::{ChoiceSpec, Market};
use ridc::persuasion::PersuasionStrategy;
use ridc::simulate::MarketTruth;

use crate::CliError;

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn open_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn market_header(spec: &ChoiceSpec) -> Vec<String> {
    let mut h = vec!["market_id".into(), "chi".into(), "x_level".into()];
    h.extend((1..=spec.j_count()).map(|j| format!("share_{j}")));
    h.extend((1..=spec.k_count()).map(|k| format!("d_{k}")));
    h
}

fn market_fields(m: &Market) -> Vec<String> {
    let mut row = vec![m.id.clone(), if m.chi { "1" } else { "0" }.into(), (m.x_level + 1).to_string()];
    row.extend(m.shares.iter().map(|&s| fmt(s)));
    row.extend(m.demo.iter().map(|&d| fmt(d)));
    row
}

pub fn write_markets(path: &Path, markets: &[Market], spec: &ChoiceSpec) -> Result<(), CliError> {
    let mut w = open_writer(path)?;
    w.write_record(market_header(spec)).map_err(write_err(path))?;
    for m in markets {
        w.write_record(market_fields(m)).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// The simulation's answer key: the market row again, plus the realized
/// shock vector and, per group, the realized signal label (empty when the
/// market was not exposed).
pub fn write_truth(
    path: &Path,
    markets: &[Market],
    truth: &[MarketTruth],
    spec: &ChoiceSpec,
    strategy: Option<&PersuasionStrategy>,
) -> Result<(), CliError> {
    let labels: Vec<Vec<String>> = match strategy {
        Some(s) => (0..spec.k_count())
            .map(|k| s.signal_labels(k))
            .collect::<ridc::Result<_>>()
            .map_err(CliError::from)?,
        None => Vec::new(),
    };
    let mut header = market_header(spec);
    header.extend((1..=spec.j_count()).map(|j| format!("eps_{j}")));
    header.extend((1..=spec.k_count()).map(|k| format!("signal_group_{k}")));

    let mut w = open_writer(path)?;
    w.write_record(&header).map_err(write_err(path))?;
    for (m, t) in markets.iter().zip(truth) {
        let mut row = market_fields(m);
        row.extend(t.eps.iter().map(|&e| fmt(e)));
        match &t.signals {
            Some(sig) => row.extend(sig.iter().enumerate().map(|(k, &s)| labels[k][s].clone())),
            None => row.extend(std::iter::repeat_n(String::new(), spec.k_count())),
        }
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

/// Reads and validates a market table. Structural problems (bad header,
/// wrong field counts) fail immediately; per-market validation failures are
/// collected so the error names every offending market at once.
pub fn read_markets(path: &Path, spec: &ChoiceSpec) -> Result<Vec<Market>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

    let expected = market_header(spec);
    let got = r
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let got: Vec<String> = got.iter().map(str::to_string).collect();
    if got != expected {
        return Err(CliError::Data(format!(
            "{}: header mismatch\n  expected: {}\n  found:    {}",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }

    let (j, k) = (spec.j_count(), spec.k_count());
    let mut markets = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), idx + 2)))?;
        if rec.len() != expected.len() {
            return Err(CliError::Data(format!(
                "{}: row {}: {} fields, expected {}",
                path.display(),
                idx + 2,
                rec.len(),
                expected.len()
            )));
        }
        let id = rec[0].to_string();
        match parse_market(&rec, &id, j, k, spec) {
            Ok(m) => markets.push(m),
            Err(msg) => bad.push(format!("{id}: {msg}")),
        }
    }
    if !bad.is_empty() {
        let shown = bad.iter().take(20).cloned().collect::<Vec<_>>().join("\n  ");
        let more = if bad.len() > 20 { format!("\n  ... and {} more", bad.len() - 20) } else { String::new() };
        return Err(CliError::Data(format!(
            "{}: {} invalid market(s)\n  {shown}{more}",
            path.display(),
            bad.len()
        )));
    }
    if markets.is_empty() {
        return Err(CliError::Data(format!("{}: no market rows", path.display())));
    }
    Ok(markets)
}

fn parse_market(
    rec: &csv::StringRecord,
    id: &str,
    j: usize,
    k: usize,
    spec: &ChoiceSpec,
) -> Result<Market, String> {
    let chi = match &rec[1] {
        "0" => false,
        "1" => true,
        other => return Err(format!("chi must be 0 or 1, got {other:?}")),
    };
    let level: usize = rec[2]
        .parse()
        .map_err(|_| format!("x_level must be a positive integer, got {:?}", &rec[2]))?;
    if level == 0 {
        return Err("x_level is one-based; 0 is out of range".into());
    }
    let mut nums = Vec::with_capacity(j + k);
    for i in 0..j + k {
        let field = &rec[3 + i];
        let x: f64 = field
            .parse()
            .map_err(|_| format!("column {:?}: not a number: {field:?}", market_header(spec)[3 + i]))?;
        nums.push(x);
    }
    Market::new(id, chi, nums[..j].to_vec(), nums[j..].to_vec(), level - 1, spec)
        .map_err(|e| e.to_string())
}

/// Pseudo-shock sample: `market_id,x_level,eps_1..eps_J`.
pub fn write_shocks(
    path: &Path,
    ids: &[String],
    levels: &[usize],
    shocks: &[Vec<f64>],
    j: usize,
) -> Result<(), CliError> {
    let mut header = vec!["market_id".to_string(), "x_level".to_string()];
    header.extend((1..=j).map(|i| format!("eps_{i}")));
    let mut w = open_writer(path)?;
    w.write_record(&header).map_err(write_err(path))?;
    for ((id, &level), eps) in ids.iter().zip(levels).zip(shocks) {
        let mut row = vec![id.clone(), (level + 1).to_string()];
        row.extend(eps.iter().map(|&e| fmt(e)));
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub struct ShockSample {
    pub ids: Vec<String>,
    pub levels: Vec<usize>,
    pub shocks: Vec<Vec<f64>>,
}

pub fn read_shocks(path: &Path, j: usize) -> Result<ShockSample, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = ShockSample { ids: Vec::new(), levels: Vec::new(), shocks: Vec::new() };
    for (idx, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), idx + 2)))?;
        if rec.len() != 2 + j {
            return Err(CliError::Data(format!(
                "{}: row {}: {} fields, expected {}",
                path.display(),
                idx + 2,
                rec.len(),
                2 + j
            )));
        }
        out.ids.push(rec[0].to_string());
        let level: usize = rec[1]
            .parse()
            .map_err(|_| CliError::Data(format!("{}: row {}: bad x_level", path.display(), idx + 2)))?;
        if level == 0 {
            return Err(CliError::Data(format!("{}: row {}: x_level is one-based", path.display(), idx + 2)));
        }
        out.levels.push(level - 1);
        let eps: Result<Vec<f64>, _> = (0..j).map(|i| rec[2 + i].parse::<f64>()).collect();
        out.shocks.push(eps.map_err(|_| {
            CliError::Data(format!("{}: row {}: bad shock entry", path.display(), idx + 2))
        })?);
    }
    if out.shocks.is_empty() {
        return Err(CliError::Data(format!("{}: no shock rows", path.display())));
    }
    Ok(out)
}
