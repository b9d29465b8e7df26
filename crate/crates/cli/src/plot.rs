//! Training curves (mean line with a standard-deviation band over seeds) and
//! performance-profile curves as SVG files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use mlr::eval::performance_profile;

use crate::error::{CliError, Result};
use crate::log::{read_log, MetricRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub seeds: usize,
}

/// Mean and standard deviation across seeds of one metric at every step.
pub fn training_curve(records: &[MetricRecord], split: &str, name: &str, label: &str) -> Result<Curve> {
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut seeds = std::collections::BTreeSet::new();
    for r in records.iter().filter(|r| r.split == split && r.name == name) {
        by_step.entry(r.step).or_default().push(r.value);
        seeds.insert(r.seed);
    }
    if by_step.is_empty() {
        return Err(CliError::EmptyLog);
    }
    let mut c = Curve { label: label.into(), steps: Vec::new(), mean: Vec::new(), std: Vec::new(), seeds: seeds.len() };
    for (step, xs) in by_step {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        c.steps.push(step);
        c.mean.push(m);
        c.std.push(v.sqrt());
    }
    Ok(c)
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Mean lines with a shaded band; single-seed curves get no band.
pub fn plot_curves(curves: &[Curve], title: &str, path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(CliError::EmptyLog);
    }
    let x_max = curves.iter().flat_map(|c| c.steps.iter().copied()).max().unwrap_or(1).max(1);
    let (y_lo, y_hi) = bounds(curves.iter().flat_map(|c| {
        c.mean.iter().zip(&c.std).flat_map(|(m, s)| [m - s, m + s]).collect::<Vec<_>>()
    }));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..x_max as f64, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("return")
        .draw()
        .map_err(plot_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i);
        if c.seeds > 1 {
            let mut band: Vec<(f64, f64)> = c.steps.iter().zip(c.mean.iter().zip(&c.std)).map(|(&s, (m, d))| (s as f64, m + d)).collect();
            band.extend(c.steps.iter().zip(c.mean.iter().zip(&c.std)).rev().map(|(&s, (m, d))| (s as f64, m - d)));
            chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled()))).map_err(plot_err)?;
        }
        let line: Vec<(f64, f64)> = c.steps.iter().zip(&c.mean).map(|(&s, &m)| (s as f64, m)).collect();
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(c.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Profile points `(tau, fraction)` for each named score matrix.
pub fn profile_curves(sets: &[(String, Vec<Vec<f64>>)], taus: &[f64]) -> Vec<(String, Vec<(f64, f64)>)> {
    sets.iter()
        .map(|(name, scores)| (name.clone(), taus.iter().copied().zip(performance_profile(scores, taus)).collect()))
        .collect()
}

pub fn plot_profiles(curves: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(CliError::EmptyLog);
    }
    let (x_lo, x_hi) = bounds(curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("performance profile", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x_lo..x_hi, 0f64..1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("normalised score threshold")
        .y_desc("fraction of runs above")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Evaluation-return curves from metric logs, one curve per config hash.
/// Returns the written file and the plotted curves.
pub fn emit_plots(logs: &[PathBuf], out_dir: &Path) -> Result<(PathBuf, Vec<Curve>)> {
    let mut groups: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for p in logs {
        for r in read_log(p)? {
            groups.entry(r.config_hash.clone()).or_default().push(r);
        }
    }
    let curves = groups
        .iter()
        .filter_map(|(hash, recs)| training_curve(recs, "eval", "return", hash).ok())
        .collect::<Vec<_>>();
    if curves.is_empty() {
        return Err(CliError::EmptyLog);
    }
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("training_curves.svg");
    plot_curves(&curves, "evaluation return", &path)?;
    Ok((path, curves))
}
