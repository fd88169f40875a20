//! The `theory` workflow: tabulated round predictions over shuffle fractions
//! and target accuracies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shufflefl::hetero::HeterogeneityReport;
use shufflefl::theory::{
    corollary1_t, fit_round_predictor, predicted_speedup_ratio, speedup_ratio_closed_form, ConvergenceParams,
    ConvexityMode, RoundPredictorFit, SmoothnessChoice,
};

use crate::config::{parse_json, ReportSource, TheoryConfig};
use crate::error::{CliError, CliResult};
use crate::output::{read_file, write_file, Stamp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub p: f64,
    pub epsilon: f64,
    pub sigma2_p: f64,
    pub zeta2_p: f64,
    pub l_p: f64,
    pub iterations: f64,
    pub rounds: f64,
    pub noise_term: f64,
    pub drift_term: f64,
    pub deterministic_term: f64,
    pub predicted_ratio: Option<f64>,
    pub closed_form_ratio: Option<f64>,
}

pub const THEORY_CSV_HEADER: &str = "p,epsilon,sigma2_p,zeta2_p,l_p,iterations,rounds,noise_term,drift_term,deterministic_term,predicted_ratio,closed_form_ratio";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryOutput {
    pub mode: ConvexityMode,
    pub smoothness: SmoothnessChoice,
    pub params: ConvergenceParams<f64>,
    pub rows: Vec<TheoryRow>,
    pub fit: Option<RoundPredictorFit<f64>>,
}

impl TheoryOutput {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = format!("{THEORY_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.p,
                r.epsilon,
                r.sigma2_p,
                r.zeta2_p,
                r.l_p,
                r.iterations,
                r.rounds,
                r.noise_term,
                r.drift_term,
                r.deterministic_term,
                opt(r.predicted_ratio),
                opt(r.closed_form_ratio)
            );
        }
        out
    }
}

/// Unshuffled parameters from a heterogeneity report written by `run` or `quantify`.
pub fn params_from_report(src: &ReportSource) -> CliResult<ConvergenceParams<f64>> {
    let report: HeterogeneityReport<f64> = parse_json(&read_file(&src.path)?)?;
    let Some(sm) = report.smoothness else {
        return Err(CliError::Config(format!("report.path: {} has no smoothness estimates", src.path.display())));
    };
    Ok(ConvergenceParams {
        p: 0.0,
        sigma2: report.sigma2_hat,
        sigma2_avg_tilde: report.sigma2_avg_hat,
        zeta2: report.zeta2_hat,
        delta2: report.delta2_hat.unwrap_or(0.0),
        l_max: sm.l_max,
        l_avg_tilde: sm.l_avg_tilde,
        l: sm.l_avg,
        mu: src.mu,
        tau: src.tau,
        n_clients: src.n_clients,
    })
}

pub fn theory_table(tc: &TheoryConfig) -> CliResult<TheoryOutput> {
    let params = match (&tc.params, &tc.report) {
        (Some(p), None) => *p,
        (None, Some(src)) => params_from_report(src)?,
        _ => return Err(CliError::Config("exactly one of params and report is required".into())),
    };
    params.validate().map_err(|e| CliError::Config(format!("params: {e}")))?;
    if tc.epsilons.is_empty() {
        return Err(CliError::Config("epsilons: need at least one target".into()));
    }
    let p_grid = tc.p_grid.clone().unwrap_or_else(|| vec![params.p]);
    let base = params.at_p(0.0);
    let mut rows = Vec::new();
    for &p in &p_grid {
        let at = params.at_p(p);
        at.validate().map_err(|e| CliError::Config(format!("p_grid: {e}")))?;
        let predicted_ratio = predicted_speedup_ratio(&at, &base).ok();
        let closed_form_ratio =
            (params.l_max > 0.0).then(|| speedup_ratio_closed_form(p, params.l_avg_tilde / params.l_max));
        for &eps in &tc.epsilons {
            let t = corollary1_t(&at, eps, tc.mode, tc.smoothness).map_err(|e| CliError::Config(e.to_string()))?;
            rows.push(TheoryRow {
                p,
                epsilon: eps,
                sigma2_p: t.bounds.sigma2_p,
                zeta2_p: t.bounds.zeta2_p,
                l_p: t.bounds.l_p,
                iterations: t.iterations,
                rounds: t.rounds,
                noise_term: t.noise_term,
                drift_term: t.drift_term,
                deterministic_term: t.deterministic_term,
                predicted_ratio,
                closed_form_ratio,
            });
        }
    }
    let fit = match &tc.observed_rounds {
        Some(samples) => Some(fit_round_predictor(samples).map_err(|e| CliError::Config(format!("observed_rounds: {e}")))?),
        None => None,
    };
    Ok(TheoryOutput { mode: tc.mode, smoothness: tc.smoothness, params, rows, fit })
}

pub fn cmd_theory(tc: &TheoryConfig, seed: u64, out: &Path) -> CliResult<(TheoryOutput, PathBuf)> {
    let table = theory_table(tc)?;
    let json = serde_json::to_string(tc).expect("config serializes");
    let stamp = Stamp { config_hash: hex::encode(Sha256::digest(json.as_bytes())), seed };
    let path = write_file(out, "theory.csv", &stamp.csv(&table.to_csv()))?;
    write_file(out, "theory.json", &stamp.json(&table)?)?;
    Ok((table, path))
}

pub fn load_theory(path: &Path) -> CliResult<TheoryConfig> {
    parse_json(&read_file(path)?)
}
