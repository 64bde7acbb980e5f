use serde::{Deserialize, Serialize};

use super::{evaluate, fit, Checkpoint, FitOptions};
use crate::config::RunConfig;
use crate::datagen::BiTemporalSample;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use autograd::Scalar;

/// One configuration of the module ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_cfe: bool,
    pub use_cdh: bool,
    pub use_dwa: bool,
}

pub const ABLATION_GRID: [AblationRow; 4] = [
    AblationRow { name: "baseline", use_cfe: false, use_cdh: false, use_dwa: false },
    AblationRow { name: "+CFE", use_cfe: true, use_cdh: false, use_dwa: false },
    AblationRow { name: "+CFE+CDH", use_cfe: true, use_cdh: true, use_dwa: false },
    AblationRow { name: "+CFE+CDH+DWA", use_cfe: true, use_cdh: true, use_dwa: true },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub use_cfe: bool,
    pub use_cdh: bool,
    pub use_dwa: bool,
    pub seeds: Vec<u64>,
    pub s_star_m: Vec<f64>,
    pub median_s_star_m: f64,
    pub reports: Vec<MetricsReport>,
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Trains every grid row once per seed and scores it on `eval`.
pub fn run_ablation<T: Scalar>(
    train: &[BiTemporalSample],
    eval: &[BiTemporalSample],
    config: &RunConfig,
    lm: &Checkpoint<T>,
    seeds: &[u64],
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(ABLATION_GRID.len());
    for row in ABLATION_GRID {
        let mut cfg = config.clone();
        cfg.train.use_cfe = row.use_cfe;
        cfg.train.use_cdh = row.use_cdh;
        cfg.train.use_dwa = row.use_dwa;
        let mut scores = Vec::with_capacity(seeds.len());
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.train.seed = seed;
            log::info!("ablation {} seed {seed}", row.name);
            let trained = fit(train, &cfg, Some(lm), None, FitOptions::default())?.trained;
            let report = evaluate(&trained, eval)?.report;
            scores.push(report.s_star_m);
            reports.push(report);
        }
        out.push(AblationResult {
            name: row.name.to_string(),
            use_cfe: row.use_cfe,
            use_cdh: row.use_cdh,
            use_dwa: row.use_dwa,
            seeds: seeds.to_vec(),
            median_s_star_m: median(&scores).expect("seeds nonempty"),
            s_star_m: scores,
            reports,
        });
    }
    Ok(out)
}

pub fn ablation_markdown(rows: &[AblationResult]) -> String {
    let mark = |on: bool| if on { "✓" } else { "" };
    let mut s = String::from("| model | CFE | CDH | DWA | S*_m per seed | median S*_m |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let per: Vec<String> = r.s_star_m.iter().map(|v| format!("{v:.2}")).collect();
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} |\n",
            r.name,
            mark(r.use_cfe),
            mark(r.use_cdh),
            mark(r.use_dwa),
            per.join(", "),
            r.median_s_star_m
        ));
    }
    s
}
