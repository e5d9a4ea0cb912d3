use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pipeline::{percent_change, DominanceRow, ProtocolRow, SweepTable};
use crate::coffee::Method;
use crate::eval::EvalReport;

/// Signed percentage with two decimals, e.g. `-50.00%` or `+74.58%`.
pub fn format_pct(x: f64) -> String {
    format!("{x:+.2}%")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Per-method means over every (pair, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub mcs_analog: f64,
    pub presence_rate: f64,
    pub is_analog: f64,
    pub ffd: Option<f64>,
    pub drift: f64,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<MethodSummary> {
    Method::ALL
        .into_iter()
        .filter_map(|m| {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let ffd: Option<Vec<f64>> = rs.iter().map(|r| r.ffd).collect();
            Some(MethodSummary {
                method: m,
                runs: rs.len(),
                mcs_analog: mean(&|r| r.mcs_analog),
                presence_rate: mean(&|r| r.presence_rate),
                is_analog: mean(&|r| r.is_analog),
                ffd: ffd.map(|v| v.iter().sum::<f64>() / n),
                drift: mean(&|r| r.drift.iter().map(|&d| d as f64).sum::<f64>() / r.drift.len().max(1) as f64),
            })
        })
        .collect()
}

/// Method means followed by a "Difference with Direct Fine-tuning" block.
pub fn summary_csv(summaries: &[MethodSummary]) -> String {
    let mut out = String::from("method,runs,mcs_analog,presence_rate,is_analog,ffd,drift\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{:.6}",
            s.method,
            s.runs,
            s.mcs_analog,
            s.presence_rate,
            s.is_analog,
            opt(s.ffd),
            s.drift
        );
    }
    if let Some(direct) = summaries.iter().find(|s| s.method == Method::Direct) {
        out.push_str("\nDifference with Direct Fine-tuning\n");
        out.push_str("method,mcs_analog,presence_rate,is_analog,ffd\n");
        for s in summaries.iter().filter(|s| s.method != Method::Direct) {
            let ffd = s
                .ffd
                .zip(direct.ffd)
                .map_or_else(|| "NA".to_string(), |(v, b)| format_pct(percent_change(v, b)));
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.method,
                format_pct(percent_change(s.mcs_analog, direct.mcs_analog)),
                format_pct(percent_change(s.presence_rate, direct.presence_rate)),
                format_pct(percent_change(s.is_analog, direct.is_analog)),
                ffd
            );
        }
    }
    out
}

/// One row per run.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "method,concept,attribute,seed,lambda,guidance_scale,mcs_analog,presence_rate,is_analog,ffd,drift,n_samples,fingerprint\n",
    );
    for r in reports {
        let drift: Vec<String> = r.drift.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{}",
            r.method,
            r.concept,
            r.attribute,
            r.seed,
            r.lambda,
            r.guidance_scale,
            r.mcs_analog,
            r.presence_rate,
            r.is_analog,
            opt(r.ffd),
            drift.join(";"),
            r.n_samples,
            r.fingerprint
        );
    }
    out
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("lambda,mcs_analog,mcs_se,ffd,ffd_se,presence_rate,is_analog,drift,highlighted\n");
    for s in &table.summary {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{}",
            s.lambda,
            s.mcs_mean,
            s.mcs_se,
            opt(s.ffd_mean),
            opt(s.ffd_se),
            s.presence_mean,
            s.is_mean,
            s.drift_mean,
            s.highlighted
        );
    }
    out
}

pub fn protocol_csv(rows: &[ProtocolRow]) -> String {
    let mut out = String::from(
        "groups,trainable_params,param_fraction,is_analog,ffd,mcs_analog,presence_rate,delta_is,delta_ffd\n",
    );
    for r in rows {
        let groups: Vec<String> = r
            .groups
            .iter()
            .map(|g| serde_json::to_value(g).expect("group").as_str().unwrap_or_default().to_string())
            .collect();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:.6},{:.6},{},{}",
            groups.join("+"),
            r.trainable_params,
            r.param_fraction,
            r.is_analog,
            opt(r.ffd),
            r.mcs_analog,
            r.presence_rate,
            format_pct(r.delta_is_pct),
            r.delta_ffd_pct.map_or_else(|| "NA".to_string(), format_pct)
        );
    }
    out
}

pub fn dominance_csv(rows: &[DominanceRow]) -> String {
    let mut out = String::from(
        "concept,attribute,coverage_standard,coverage_dominant,presence_direct_standard,presence_coffee_standard,presence_direct_dominant,presence_coffee_dominant\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.concept,
            r.attribute,
            r.coverage_standard,
            r.coverage_dominant,
            r.presence_direct_standard,
            r.presence_coffee_standard,
            r.presence_direct_dominant,
            r.presence_coffee_dominant
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: Method, mcs: f64, presence: f64) -> EvalReport {
        EvalReport {
            method,
            concept: "circle".into(),
            attribute: "frame".into(),
            seed: 0,
            lambda: 1.0,
            guidance_scale: 3.0,
            mcs_analog: mcs,
            presence_rate: presence,
            is_analog: 2.0,
            ffd: Some(1.0),
            drift: vec![0.01],
            n_samples: 16,
            fingerprint: "f".into(),
        }
    }

    #[test]
    fn percentages_are_signed_with_two_decimals() {
        assert_eq!(format_pct(-50.0), "-50.00%");
        assert_eq!(format_pct(74.5812), "+74.58%");
        assert_eq!(format_pct(0.0), "+0.00%");
    }

    #[test]
    fn summary_has_difference_block() {
        let rs = [
            report(Method::Direct, 0.2, 0.8),
            report(Method::Coffee, 0.1, 0.2),
            report(Method::Coffee, 0.1, 0.2),
        ];
        let s = summarize(&rs);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].runs, 2);
        let csv = summary_csv(&s);
        assert!(csv.contains("Difference with Direct Fine-tuning"));
        assert!(csv.contains("coffee,-50.00%,-75.00%,+0.00%,+0.00%"), "{csv}");
    }
}
