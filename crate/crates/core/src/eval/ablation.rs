use std::path::Path;

use serde::{Deserialize, Serialize};

use super::latency::{measure_latency, LatencyReport, LatencyTiming};
use super::plot::bar_chart_svg;
use super::{evaluate, CotMode, DecodeMode, EvalConfig, Result};
use crate::env::SuiteConfig;
use crate::model::PolicySnapshot;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_conditions: usize,
    /// Evaluation seeds; success rates are averaged over them.
    pub seeds: Vec<u64>,
    pub latency_chunks: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_conditions: 20,
            seeds: vec![0, 1, 2],
            latency_chunks: 50,
        }
    }
}

/// One success-rate row: a checkpoint under one trace mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: String,
    pub cot_mode: CotMode,
    pub sr_per_seed: Vec<f64>,
    pub sr_mean: f64,
    pub forward_passes: u64,
    /// Inner trace length used by random traces.
    pub random_cot_len: Option<usize>,
}

/// Latency row: forward passes per decision step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub decode_mode: DecodeMode,
    pub action_passes_per_chunk: u64,
    pub passes_per_chunk: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub latency_rows: Vec<LatencyRow>,
    pub latency: LatencyReport,
}

impl AblationReport {
    pub fn row(&self, policy: &str, mode: CotMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.policy == policy && r.cot_mode == mode)
    }

    pub fn row_count(&self) -> usize {
        self.rows.len() + self.latency_rows.len()
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("| policy | cot | sr_mean | sr_per_seed | forward_passes |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.sr_per_seed.iter().map(|s| format!("{s:.3}")).collect();
            out.push_str(&format!(
                "| {} | {:?} | {:.3} | {} | {} |\n",
                r.policy,
                r.cot_mode,
                r.sr_mean,
                seeds.join(" "),
                r.forward_passes
            ));
        }
        out.push_str("\n| decode | action_passes_per_chunk | passes_per_chunk |\n|---|---|---|\n");
        for l in &self.latency_rows {
            out.push_str(&format!(
                "| {:?} | {} | {} |\n",
                l.decode_mode, l.action_passes_per_chunk, l.passes_per_chunk
            ));
        }
        out
    }
}

fn sr_rows(
    name: &str,
    snap: &PolicySnapshot,
    suite: &SuiteConfig,
    cfg: &AblationConfig,
    random_lengths: Option<&[usize]>,
) -> Result<(Vec<AblationRow>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut full_lengths = Vec::new();
    for mode in [CotMode::Full, CotMode::Mask, CotMode::Random] {
        let mut srs = Vec::new();
        let mut passes = 0;
        let mut k = None;
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            let random_cot_len =
                (mode == CotMode::Random).then(|| random_lengths.map_or(full_lengths[i], |l| l[i]));
            k = random_cot_len;
            let ec = EvalConfig {
                n_conditions: cfg.n_conditions,
                seed,
                cot_mode: mode,
                decode_mode: DecodeMode::Hybrid,
                intervention_seed: seed,
                random_cot_len,
            };
            let run = evaluate(snap, suite, &ec)?;
            if mode == CotMode::Full {
                full_lengths.push(run.report.median_cot_len);
            }
            passes += run.report.forward_passes;
            srs.push(run.report.average_sr);
        }
        rows.push(AblationRow {
            policy: name.to_string(),
            cot_mode: mode,
            sr_mean: srs.iter().sum::<f64>() / srs.len() as f64,
            sr_per_seed: srs,
            forward_passes: passes,
            random_cot_len: k,
        });
    }
    Ok((rows, full_lengths))
}

/// {full, mask, random} × {sft, rl} success rates plus the two decoding
/// latency rows. Random traces of both checkpoints take the median length
/// of the SFT checkpoint's generated traces on the same seed.
pub fn run_ablation_suite(
    sft: &PolicySnapshot,
    rl: &PolicySnapshot,
    suite: &SuiteConfig,
    cfg: &AblationConfig,
) -> Result<(AblationReport, LatencyTiming)> {
    let (mut rows, sft_lengths) = sr_rows("sft", sft, suite, cfg, None)?;
    rows.extend(sr_rows("rl", rl, suite, cfg, Some(&sft_lengths))?.0);
    let (latency, timing) = measure_latency(rl, suite, cfg.latency_chunks)?;
    let per_chunk = |m: &super::ModeLatency| m.total_passes / m.chunks as u64;
    let latency_rows = vec![
        LatencyRow {
            decode_mode: DecodeMode::Hybrid,
            action_passes_per_chunk: latency.hybrid.action_passes_per_chunk,
            passes_per_chunk: per_chunk(&latency.hybrid),
        },
        LatencyRow {
            decode_mode: DecodeMode::ArEmulation,
            action_passes_per_chunk: latency.ar_emulation.action_passes_per_chunk,
            passes_per_chunk: per_chunk(&latency.ar_emulation),
        },
    ];
    Ok((
        AblationReport {
            rows,
            latency_rows,
            latency,
        },
        timing,
    ))
}

/// Writes `ablation.json`, `ablation.md`, `sr.svg` and `passes.svg`.
pub fn write_ablation(dir: &Path, report: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(report)?)?;
    std::fs::write(dir.join("ablation.md"), report.to_table())?;
    let labels: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:?}", r.policy, r.cot_mode).to_lowercase())
        .collect();
    let srs: Vec<f64> = report.rows.iter().map(|r| r.sr_mean).collect();
    std::fs::write(dir.join("sr.svg"), bar_chart_svg("success rate", &labels, &srs))?;
    let l_labels: Vec<String> = report
        .latency_rows
        .iter()
        .map(|l| format!("{:?}", l.decode_mode).to_lowercase())
        .collect();
    let passes: Vec<f64> = report.latency_rows.iter().map(|l| l.action_passes_per_chunk as f64).collect();
    std::fs::write(
        dir.join("passes.svg"),
        bar_chart_svg("action-block forward passes per chunk", &l_labels, &passes),
    )?;
    Ok(())
}
