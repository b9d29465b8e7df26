//! Cross-product ablation grids over config overrides.
//!
//! One axis per line. A plain axis varies one key:
//!
//! ```text
//! mask.ratio = 0.05 | 0.5 | 0.95
//! ```
//!
//! A named axis lists labelled variants, each a `;`-separated set of
//! overrides (possibly empty):
//!
//! ```text
//! @variant = MLR: | MLR-S: mask.strategy=spatial | MLR-Pixel: mlr.target=pixel; mlr.loss=mse
//! ```

use std::path::Path;

use crate::config::{parse_override, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::runner::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |m: String| CliError::Parse { line: i + 1, message: m };
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| perr(format!("expected `axis = values`, got `{line}`")))?;
            let lhs = lhs.trim();
            let variants = if let Some(name) = lhs.strip_prefix('@') {
                let vs = rhs
                    .split('|')
                    .map(|cell| {
                        let (label, body) =
                            cell.split_once(':').ok_or_else(|| perr(format!("variant `{}` needs `label:`", cell.trim())))?;
                        let overrides = body
                            .split(';')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(parse_override)
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Variant { label: label.trim().to_string(), overrides })
                    })
                    .collect::<Result<Vec<_>>>()?;
                axes.push(Axis { name: name.to_string(), variants: vs });
                continue;
            } else {
                rhs.split('|')
                    .map(|v| Variant {
                        label: format!("{lhs}={}", v.trim()),
                        overrides: vec![(lhs.to_string(), v.trim().to_string())],
                    })
                    .collect()
            };
            axes.push(Axis { name: lhs.to_string(), variants });
        }
        Ok(Self { axes })
    }

    /// Every combination, one variant per axis, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<&Variant>> {
        let mut out: Vec<Vec<&Variant>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.variants.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub labels: Vec<String>,
    pub overrides: Vec<(String, String)>,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub regression_accuracy: Option<f64>,
    /// Transformer-block parameters of the latent decoder.
    pub decoder_params: Option<usize>,
    /// `None` on success.
    pub error: Option<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

fn run_cell(base: &[(String, String)], overrides: &[(String, String)], out: Option<&Path>) -> Result<(Vec<f64>, Vec<f64>, Option<usize>)> {
    let mut pairs = base.to_vec();
    pairs.extend_from_slice(overrides);
    let cfg = ExperimentConfig::resolve(&pairs)?;
    let decoder_params = cfg.mlr_config()?.map(|m| m.decoder_layers * m.decoder_config(cfg.encoder.latent_dim).block_params());
    let mut returns = Vec::new();
    let mut regression = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.map(|o| o.join(format!("seed-{seed}")));
        let s = Trainer::new(&cfg, seed, dir.as_deref())?.run()?;
        returns.push(s.final_return.unwrap_or(f64::NAN));
        regression.extend(s.regression_accuracy);
    }
    Ok((returns, regression, decoder_params))
}

/// Run every cell of `grid` on top of `base` overrides. A failing cell is
/// reported in its row and does not stop the others.
pub fn run_ablation(base: &[(String, String)], grid: &Grid, out: Option<&Path>) -> Vec<AblationRow> {
    grid.cells()
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            let labels: Vec<String> = cell.iter().map(|v| v.label.clone()).collect();
            let overrides: Vec<(String, String)> = cell.iter().flat_map(|v| v.overrides.clone()).collect();
            let dir = out.map(|o| o.join(format!("cell-{i:03}")));
            let mut row = AblationRow {
                labels,
                overrides: overrides.clone(),
                seeds: 0,
                mean: f64::NAN,
                std: f64::NAN,
                regression_accuracy: None,
                decoder_params: None,
                error: None,
            };
            match run_cell(base, &overrides, dir.as_deref()) {
                Ok((returns, regression, params)) => {
                    (row.mean, row.std) = mean_std(&returns);
                    row.seeds = returns.len();
                    row.regression_accuracy = (!regression.is_empty()).then(|| mean_std(&regression).0);
                    row.decoder_params = params;
                }
                Err(e) => {
                    log::warn!("ablation cell {:?} failed: {e}", row.labels);
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}

fn fmt_params(p: Option<usize>) -> String {
    p.map_or_else(|| "-".into(), |p| format!("{:.1}K", p as f64 / 1000.0))
}

/// Plain-text table: one row per cell, variant labels first.
pub fn render_table(grid: &Grid, rows: &[AblationRow]) -> String {
    let mut header: Vec<String> = grid.axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["return".to_string(), "regression".into(), "decoder params".into(), "status".into()]);
    let mut lines = vec![header];
    for r in rows {
        let mut l = r.labels.clone();
        l.push(format!("{:.3} ± {:.3}", r.mean, r.std));
        l.push(r.regression_accuracy.map_or_else(|| "-".into(), |x| format!("{x:.3}")));
        l.push(fmt_params(r.decoder_params));
        l.push(r.error.clone().map_or_else(|| "ok".into(), |e| format!("failed: {e}")));
        lines.push(l);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    lines
        .iter()
        .map(|l| {
            l.iter()
                .zip(&widths)
                .map(|(x, w)| format!("{x:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn write_csv<W: std::io::Write>(grid: &Grid, rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = grid.axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["mean", "std", "seeds", "regression", "decoder_params", "error"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = r.labels.clone();
        rec.push(r.mean.to_string());
        rec.push(r.std.to_string());
        rec.push(r.seeds.to_string());
        rec.push(r.regression_accuracy.map(|x| x.to_string()).unwrap_or_default());
        rec.push(r.decoder_params.map(|x| x.to_string()).unwrap_or_default());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
