//! Multi-seed ablation runs and their summary table.

use gres_core::config::AblationVariant;
use gres_core::metrics::MetricsReport;
use gres_core::synth::SampleRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, Predictor};
use crate::train::{train, LogEvent};

/// One row of an ablation: an architecture variant, optionally with an
/// overridden no-target supervision depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub variant: AblationVariant,
    pub nt_depth: Option<usize>,
}

impl Arm {
    /// `naive`, `rsh`, `rsh_mmd`, `full`, or `nt<X>` (full model, depth X).
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(x) = s.strip_prefix("nt") {
            let depth = x.parse().map_err(|_| Error::Config(format!("bad arm {s:?}")))?;
            return Ok(Arm { variant: AblationVariant::Full, nt_depth: Some(depth) });
        }
        Ok(Arm { variant: AblationVariant::parse(s)?, nt_depth: None })
    }

    pub fn name(&self) -> String {
        match self.nt_depth {
            Some(x) => format!("nt{x}"),
            None => self.variant.name().to_string(),
        }
    }

    pub fn apply(&self, cfg: &RunConfig, seed: u64) -> RunConfig {
        let mut out = cfg.clone().with_seed(seed);
        out.model = out.model.with_variant(self.variant);
        if let Some(x) = self.nt_depth {
            out.model.nt_depth = x;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub runs: Vec<SeedResult>,
    pub median: Medians,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub ciou: f64,
    pub giou: f64,
    pub pr07: Option<f64>,
    pub pr08: Option<f64>,
    pub pr09: Option<f64>,
    pub n_acc: Option<f64>,
    pub t_acc: Option<f64>,
}

/// Median of the present values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn medians(reports: &[MetricsReport]) -> Medians {
    let m = |f: fn(&MetricsReport) -> Option<f64>| median(reports.iter().map(f));
    Medians {
        ciou: m(|r| Some(r.ciou)).unwrap_or(f64::NAN),
        giou: m(|r| Some(r.giou)).unwrap_or(f64::NAN),
        pr07: m(|r| r.pr07),
        pr08: m(|r| r.pr08),
        pr09: m(|r| r.pr09),
        n_acc: m(|r| r.n_acc),
        t_acc: m(|r| r.t_acc),
    }
}

/// Trains and evaluates one arm at one seed.
pub fn run_one(
    cfg: &RunConfig,
    arm: Arm,
    seed: u64,
    train_set: &[SampleRecord],
    val: &[SampleRecord],
    sink: &mut dyn FnMut(&LogEvent),
) -> Result<MetricsReport> {
    let run_cfg = arm.apply(cfg, seed);
    let state = train(&run_cfg, train_set, None, sink)?;
    evaluate(Predictor::Model(&state.model), val)
}

pub fn ablate(
    cfg: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    train_set: &[SampleRecord],
    val: &[SampleRecord],
    sink: &mut dyn FnMut(&str, u64, &LogEvent),
) -> Result<Vec<ArmResult>> {
    if arms.len() < 2 {
        return Err(Error::Invalid(format!("an ablation needs at least 2 arms, got {}", arms.len())));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("an ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(arms.len());
    for arm in arms {
        let name = arm.name();
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let metrics = run_one(cfg, *arm, seed, train_set, val, &mut |e| sink(&name, seed, e))?;
            runs.push(SeedResult { seed, metrics });
        }
        let reports: Vec<_> = runs.iter().map(|r| r.metrics).collect();
        out.push(ArmResult { arm: name, median: medians(&reports), runs });
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Markdown table of the medians, in percent.
pub fn table(results: &[ArmResult]) -> String {
    let mut s = String::from("| arm | seeds | cIoU | gIoU | Pr@0.7 | Pr@0.8 | Pr@0.9 | N-acc | T-acc |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let m = &r.median;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.arm,
            r.runs.len(),
            cell(Some(m.ciou)),
            cell(Some(m.giou)),
            cell(m.pr07),
            cell(m.pr08),
            cell(m.pr09),
            cell(m.n_acc),
            cell(m.t_acc)
        ));
    }
    s
}
