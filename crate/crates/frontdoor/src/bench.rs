//! Class-count sweep: pairwise operation counts and matching time per k.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use semcolor_core::correspondence::{
    count_pairwise_ops, global_correspondence, spc_correspondence,
};
use semcolor_core::pipeline::{label_pair, Prepared};
use semcolor_core::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub k: usize,
    /// Classes actually used (k capped by the number of fitted centers).
    pub classes: usize,
    pub global_ops: u64,
    pub spc_ops: u64,
    pub spc_fraction: f64,
    pub median_ms: f64,
    pub related_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Monotonicity {
    /// spc_ops <= global_ops on every row.
    pub spc_within_global: bool,
    /// spc_ops never increases from one row to the next (rows sorted by k).
    pub non_increasing: bool,
    /// Consecutive (k, next k) pairs where spc_ops increased.
    pub increases: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub target_grid: [usize; 2],
    pub reference_grid: [usize; 2],
    pub initial_classes: usize,
    pub repeats: usize,
    pub global_median_ms: f64,
    pub rows: Vec<BenchRow>,
    pub monotonicity: Monotonicity,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        last = Some(f()?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(samples), last.expect("at least one repeat")))
}

pub fn monotonicity(rows: &[BenchRow]) -> Monotonicity {
    let increases: Vec<[usize; 2]> = rows
        .windows(2)
        .filter(|w| w[1].spc_ops > w[0].spc_ops)
        .map(|w| [w[0].k, w[1].k])
        .collect();
    Monotonicity {
        spc_within_global: rows.iter().all(|r| r.spc_ops <= r.global_ops),
        non_increasing: increases.is_empty(),
        increases,
    }
}

/// Runs the sweep on already prepared inputs. Every k must lie in
/// [1, configured initial class count].
pub fn run_bench(prepared: &Prepared, k_list: &[usize], repeats: usize) -> Result<BenchReport> {
    let seg = prepared.segmentation.as_ref().ok_or_else(|| {
        Error::Parameter("bench needs built-in segmentation, not external class maps".into())
    })?;
    let config = prepared.config();
    if repeats == 0 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    if let Some(k) = k_list
        .iter()
        .find(|&&k| k == 0 || k > config.initial_classes)
    {
        return Err(Error::Parameter(format!(
            "k = {k} outside [1, {}]",
            config.initial_classes
        )));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let (ft, fr) = (&prepared.target_features, &prepared.reference_features);
    let (global_median_ms, _) = time_ms(repeats, || global_correspondence(ft, fr, config.tau))?;

    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let classes = k.min(seg.initial_classes());
        let labels = label_pair(ft, fr, &seg.centers, classes, config.seed)?;
        let (ct, cr) = (&labels.target.0, &labels.reference.0);
        let ops = count_pairwise_ops(ct, cr);
        let (median_ms, corr) =
            time_ms(repeats, || spc_correspondence(ft, fr, ct, cr, config.tau))?;
        log::info!(
            "k = {k}: spc ops {} of {}, {median_ms:.3} ms",
            ops.spc,
            ops.global
        );
        rows.push(BenchRow {
            k,
            classes,
            global_ops: ops.global,
            spc_ops: ops.spc,
            spc_fraction: ops.spc as f64 / ops.global as f64,
            median_ms,
            related_fraction: corr.related_cells() as f64 / corr.target_cells() as f64,
        });
    }
    Ok(BenchReport {
        target_grid: [ft.grid_h(), ft.grid_w()],
        reference_grid: [fr.grid_h(), fr.grid_w()],
        initial_classes: seg.initial_classes(),
        repeats,
        global_median_ms,
        monotonicity: monotonicity(&rows),
        rows,
    })
}

/// Plain-text rendering of a report.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "target grid {}x{}, reference grid {}x{}, {} initial classes, median of {} runs",
        report.target_grid[0],
        report.target_grid[1],
        report.reference_grid[0],
        report.reference_grid[1],
        report.initial_classes,
        report.repeats
    );
    let _ = writeln!(out, "global matching: {:.3} ms\n", report.global_median_ms);
    let _ = writeln!(
        out,
        "{:>4} {:>7} {:>12} {:>12} {:>8} {:>10} {:>8}",
        "k", "classes", "global_ops", "spc_ops", "spc/glb", "median_ms", "related"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:>4} {:>7} {:>12} {:>12} {:>8.4} {:>10.3} {:>8.4}",
            r.k,
            r.classes,
            r.global_ops,
            r.spc_ops,
            r.spc_fraction,
            r.median_ms,
            r.related_fraction
        );
    }
    let m = &report.monotonicity;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "spc ops within global on every row: {}",
        if m.spc_within_global { "yes" } else { "NO" }
    );
    if m.non_increasing {
        let _ = writeln!(out, "spc ops non-increasing in k: yes");
    } else {
        let pairs: Vec<String> = m
            .increases
            .iter()
            .map(|[a, b]| format!("{a}->{b}"))
            .collect();
        let _ = writeln!(
            out,
            "spc ops non-increasing in k: no (increases at {})",
            pairs.join(", ")
        );
    }
    out
}
