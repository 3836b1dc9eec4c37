use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use super::{ArchMetrics, SearchOutcome};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "objective",
    "L_train",
    "L_val",
    "gap",
    "latency",
    "penalty",
    "temperature",
    "lambda_lat",
];

/// One line of `metrics.csv`; columns are written in field order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub objective: f64,
    #[serde(rename = "L_train")]
    pub l_train: Option<f64>,
    #[serde(rename = "L_val")]
    pub l_val: Option<f64>,
    pub gap: Option<f64>,
    pub latency: Option<f64>,
    pub penalty: f64,
    pub temperature: f64,
    pub lambda_lat: f64,
}

impl MetricsRow {
    pub(super) fn new(step: usize, m: &ArchMetrics, temperature: f64, lambda_lat: f64) -> Self {
        Self {
            step,
            objective: m.objective,
            l_train: m.l_train,
            l_val: m.l_val,
            gap: m.gap,
            latency: m.latency,
            penalty: m.penalty,
            temperature,
            lambda_lat,
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(METRICS_HEADER)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl SearchOutcome {
    /// Plain-text run summary: config, seed, final architecture and its
    /// metrics, tie resolutions and estimator statistics.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let cfg = &self.config;
        let m = &self.final_metrics;
        let _ = writeln!(s, "# search report\n");
        let _ = writeln!(s, "seed: {}", cfg.seed);
        let _ = writeln!(s, "objective: {}", cfg.objective);
        let _ = writeln!(s, "estimator: {}", self.estimator_summary.estimator);
        let mode = if cfg.w_steps_per_phi_step > 1 {
            " (ENAS-like)"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "schedule: {} steps, {} warmup, {} weight steps per distribution step{mode}",
            cfg.total_steps, cfg.warmup_steps, cfg.w_steps_per_phi_step
        );
        let _ = writeln!(s, "\n## final architecture\n");
        for (site, c) in self.space.to_map(&self.extraction.arch) {
            let label = match site.contains("input") {
                true => format!("input {c}"),
                false => self.space.op_names().get(c).cloned().unwrap_or_default(),
            };
            let _ = writeln!(s, "{site} = {c} ({label})");
        }
        if self.extraction.ties.is_empty() {
            let _ = writeln!(s, "ties: none");
        } else {
            let _ = writeln!(
                s,
                "ties (lowest index kept): {}",
                self.extraction.ties.join(", ")
            );
        }
        let _ = writeln!(s, "\n## final metrics\n");
        let _ = writeln!(s, "objective: {:.6}", m.objective);
        let _ = writeln!(s, "L_train: {}", opt(m.l_train));
        let _ = writeln!(s, "L_val: {}", opt(m.l_val));
        let _ = writeln!(s, "gap: {}", opt(m.gap));
        let _ = writeln!(s, "val_error: {}", opt(m.val_error));
        let _ = writeln!(s, "penalty: {:.6}", m.penalty);
        let _ = writeln!(s, "latency: {}", opt(m.latency));
        if let Some(t) = self.latency_target {
            let _ = writeln!(s, "latency_target: {t:.6}");
        }
        if let Some(f) = &self.surrogate_fit {
            let _ = writeln!(
                s,
                "surrogate fit: r2_train {:.4}, r2_test {:.4}, rmse_test {:.4} ({} / {} samples)",
                f.r2_train, f.r2_test, f.rmse_test, f.n_train, f.n_test
            );
        }
        if let Some(p) = &self.planted {
            let (_, best) = p.optimum();
            let _ = writeln!(s, "planted optimum value: {best:.6}");
        }
        let e = &self.estimator_summary;
        let _ = writeln!(s, "\n## estimator\n");
        let _ = writeln!(s, "distribution steps: {}", e.phi_steps);
        let _ = writeln!(
            s,
            "mean summed gradient variance: {:.6e}",
            e.mean_total_variance
        );
        let _ = writeln!(s, "mean gradient norm: {:.6e}", e.mean_grad_norm);
        let _ = writeln!(s, "\n## config\n");
        s.push_str(&cfg.to_toml());
        s
    }
}
