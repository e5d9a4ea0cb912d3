//! The end-to-end acceptance suite: one result line per criterion.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelState;
use super::config::ExperimentConfig;
use super::gradcheck::gradient_check_suite;
use super::pipeline::{
    dominance_from_outcomes, dominance_specs, evaluate_model, experiment_specs, finetune_run, protocol_specs,
    protocols_from_outcomes, run_specs, sweep_specs, sweep_from_outcomes, Artifacts, DominanceRow, ProtocolRow, RunOutcome,
    RunSpec, SweepTable,
};
use super::report::{reports_csv, summarize, MethodSummary};
use crate::coffee::{Method, TrainableGroup};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::Result;
use crate::eval::EvalReport;
use crate::rng::{derive_seed, stream};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_TRIALS: usize = 100;
pub const MOMENT_DRAWS: usize = 10_000;
pub const MOMENT_TIMESTEPS: usize = 10;
pub const SWEEP_LAMBDAS: [f32; 4] = [0.0, 0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: String,
    pub name: String,
    /// `None` for report-only diagnostics.
    pub passed: Option<bool>,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: &str, name: &str, passed: Option<bool>, detail: String) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        };
        format!("[{tag}] criterion {} ({}): {}", self.id, self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub criteria: Vec<CriterionResult>,
    pub summaries: Vec<MethodSummary>,
    pub sweep: SweepTable,
    pub protocols: Vec<ProtocolRow>,
    pub dominance: Vec<DominanceRow>,
}

impl AcceptanceReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed != Some(false))
    }

    pub fn lines(&self) -> Vec<String> {
        self.criteria.iter().map(CriterionResult::line).collect()
    }
}

pub fn check_gradients() -> Result<CriterionResult> {
    let stats = gradient_check_suite(GRAD_TRIALS, 2024)?;
    let worst = stats
        .iter()
        .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
        .expect("ops");
    let passed = stats.iter().all(|s| s.worst_rel_err <= GRAD_TOLERANCE);
    Ok(CriterionResult::new(
        "1",
        "gradient correctness",
        Some(passed),
        format!(
            "{} ops x {} trials, worst relative error {:.2e} ({}), tolerance {:.0e}",
            stats.len(),
            GRAD_TRIALS,
            worst.worst_rel_err,
            worst.op,
            GRAD_TOLERANCE
        ),
    ))
}

/// Empirical mean and variance of `z_t` over fresh noise draws against
/// `sqrt(ᾱ)·z_y` and `1 − ᾱ`, within three Monte-Carlo standard errors.
///
/// One random coordinate is tested per timestep, so the suite makes twenty
/// comparisons in total.
pub fn check_forward_moments(schedule: &NoiseSchedule) -> Result<CriterionResult> {
    let mut rng = stream(derive_seed(7, "forward-moments"));
    let px = crate::datagen::PIXELS;
    let z_y: Vec<f32> = (0..px).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut checks = 0;
    let mut failures = Vec::new();
    let mut worst = 0f64;
    for _ in 0..MOMENT_TIMESTEPS {
        let t = rng.random_range(0..schedule.steps());
        let c = rng.random_range(0..px);
        let (mut sum, mut sq) = (0f64, 0f64);
        for _ in 0..MOMENT_DRAWS {
            let eps: Vec<f32> = (0..px).map(|_| rng.sample(StandardNormal)).collect();
            let z = forward_noise(&z_y, t, &eps, schedule)?[c] as f64;
            sum += z;
            sq += z * z;
        }
        let ab = schedule.alpha_bar()[t];
        let n = MOMENT_DRAWS as f64;
        let mean = sum / n;
        let var = (sq - n * mean * mean) / (n - 1.0);
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n).sqrt();
        let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
        let zm = (mean - ab.sqrt() * z_y[c] as f64).abs() / se_mean;
        let zv = (var - want_var).abs() / se_var;
        worst = worst.max(zm).max(zv);
        checks += 2;
        if zm > 3.0 || zv > 3.0 {
            failures.push(format!("t={t} coord={c} (z_mean {zm:.2}, z_var {zv:.2})"));
        }
    }
    Ok(CriterionResult::new(
        "2",
        "forward-process moments",
        Some(failures.is_empty()),
        format!(
            "{checks} moment checks over {MOMENT_TIMESTEPS} timesteps x {MOMENT_DRAWS} draws, worst {worst:.2} SE{}",
            if failures.is_empty() { String::new() } else { format!("; outside 3 SE: {}", failures.join(", ")) }
        ),
    ))
}

fn mean_by(reports: &[&EvalReport], f: impl Fn(&EvalReport) -> f64) -> f64 {
    reports.iter().map(|r| f(r)).sum::<f64>() / reports.len().max(1) as f64
}

fn mean_drift(r: &EvalReport) -> f64 {
    r.drift.iter().map(|&d| d as f64).sum::<f64>() / r.drift.len().max(1) as f64
}

fn of_method(outcomes: &[RunOutcome], m: Method) -> Vec<&EvalReport> {
    outcomes
        .iter()
        .filter(|o| o.spec.method == m)
        .map(|o| &o.report)
        .collect()
}

pub fn check_fixed_point(outcomes: &[RunOutcome]) -> CriterionResult {
    let bad: Vec<String> = outcomes
        .iter()
        .filter(|o| o.trace.first().is_some_and(|b| b.l_reg != 0.0))
        .map(|o| format!("{} {} seed {}", o.spec.pair.label(), o.spec.method, o.spec.seed))
        .collect();
    let checked = outcomes.iter().filter(|o| !o.trace.is_empty()).count();
    CriterionResult::new(
        "3",
        "regularizer fixed point",
        Some(bad.is_empty()),
        format!(
            "first-step L_reg == 0 exactly on {}/{} runs{}",
            checked - bad.len(),
            checked,
            if bad.is_empty() { String::new() } else { format!("; nonzero: {}", bad.join(", ")) }
        ),
    )
}

pub fn check_degeneracy(sweep: &SweepTable) -> CriterionResult {
    CriterionResult::new(
        "4",
        "lambda degeneracy",
        Some(sweep.zero_matches_direct == Some(true)),
        match sweep.zero_matches_direct {
            Some(true) => "coffee with lambda=0 reproduces the direct checkpoint and metrics bit for bit on every run".into(),
            Some(false) => "a lambda=0 run differs from direct fine-tuning".into(),
            None => "sweep does not include lambda=0".into(),
        },
    )
}

pub fn check_table1(outcomes: &[RunOutcome]) -> CriterionResult {
    let (d, c) = (of_method(outcomes, Method::Direct), of_method(outcomes, Method::Coffee));
    let (pd, pc) = (mean_by(&d, |r| r.presence_rate), mean_by(&c, |r| r.presence_rate));
    let (md, mc) = (mean_by(&d, |r| r.mcs_analog), mean_by(&c, |r| r.mcs_analog));
    let (id, ic) = (mean_by(&d, |r| r.is_analog), mean_by(&c, |r| r.is_analog));
    let parts = [
        (pc <= 0.5 * pd, format!("presence coffee {pc:.4} <= 0.5 x direct {pd:.4}")),
        (mc < md, format!("mcs coffee {mc:.4} < direct {md:.4}")),
        (pd >= 0.5, format!("direct presence {pd:.4} >= 0.5")),
        (ic >= 0.8 * id, format!("IS coffee {ic:.4} >= 0.8 x direct {id:.4}")),
    ];
    verdict("5", "main comparison direction", &parts)
}

fn verdict(id: &str, name: &str, parts: &[(bool, String)]) -> CriterionResult {
    let detail: Vec<String> = parts
        .iter()
        .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "NOT " }))
        .collect();
    CriterionResult::new(id, name, Some(parts.iter().all(|p| p.0)), detail.join("; "))
}

pub fn check_table2(outcomes: &[RunOutcome]) -> CriterionResult {
    let mc = mean_by(&of_method(outcomes, Method::Coffee), |r| r.mcs_analog);
    let parts: Vec<(bool, String)> = [Method::ConceptRemoval, Method::NegPromptInfer, Method::NegPromptBoth]
        .into_iter()
        .map(|m| {
            let v = mean_by(&of_method(outcomes, m), |r| r.mcs_analog);
            (v >= 1.3 * mc, format!("mcs {m} {v:.4} >= 1.3 x coffee {mc:.4}"))
        })
        .collect();
    verdict("6", "baseline comparison direction", &parts)
}

/// Counts adjacent inversions of a sequence that should be non-increasing
/// (`sign = 1`) or non-decreasing (`sign = -1`), and whether each inversion
/// is within one pooled standard error.
fn trend(values: &[(f64, f64)], sign: f64) -> (usize, bool) {
    let mut inversions = 0;
    let mut within = true;
    for w in values.windows(2) {
        let (a, sa) = w[0];
        let (b, sb) = w[1];
        let rise = sign * (b - a);
        if rise > 0.0 {
            inversions += 1;
            if rise > (sa * sa + sb * sb).sqrt() {
                within = false;
            }
        }
    }
    (inversions, within)
}

pub fn check_lambda_trend(sweep: &SweepTable, outcomes: &[RunOutcome]) -> CriterionResult {
    let s = &sweep.summary;
    let mcs: Vec<(f64, f64)> = s.iter().map(|r| (r.mcs_mean, r.mcs_se)).collect();
    let (mcs_inv, mcs_within) = trend(&mcs, 1.0);
    let mcs_ok = mcs_inv == 0 || (mcs_inv == 1 && mcs_within);
    let ffd: Option<Vec<(f64, f64)>> = s.iter().map(|r| r.ffd_mean.zip(r.ffd_se)).collect();
    let (ffd_ok, ffd_text) = match ffd {
        Some(f) => {
            let (inv, within) = trend(&f, -1.0);
            let vals: Vec<String> = f.iter().map(|x| format!("{:.3}", x.0)).collect();
            (
                inv == 0 || (inv == 1 && within),
                format!("ffd non-decreasing [{}] with {inv} inversion(s)", vals.join(", ")),
            )
        }
        None => (false, "ffd unavailable (needs >= 33 samples)".into()),
    };
    let id = mean_by(&of_method(outcomes, Method::Direct), |r| r.is_analog);
    let guard = s.iter().find(|r| r.lambda == 1.0).map(|r| r.is_mean);
    let guard_ok = guard.is_some_and(|g| g >= 0.8 * id);
    let vals: Vec<String> = mcs.iter().map(|x| format!("{:.4}", x.0)).collect();
    let parts = [
        (mcs_ok, format!("mcs non-increasing [{}] with {mcs_inv} inversion(s)", vals.join(", "))),
        (ffd_ok, ffd_text),
        (
            guard_ok,
            format!("lambda=1 IS {:.4} >= 0.8 x direct {id:.4}", guard.unwrap_or(f64::NAN)),
        ),
    ];
    verdict("7", "lambda trend", &parts)
}

pub fn check_drift(outcomes: &[RunOutcome], cfg: &ExperimentConfig) -> CriterionResult {
    let mut worst_mean = 0f64;
    let mut paired_ok = true;
    let mut pairs = 0;
    for pair in &cfg.concept_pairs {
        let of = |m: Method| -> Vec<&RunOutcome> {
            outcomes
                .iter()
                .filter(|o| o.spec.pair == *pair && o.spec.method == m)
                .collect()
        };
        let coffee = of(Method::Coffee);
        let direct = of(Method::Direct);
        let n_concepts = coffee.first().map_or(0, |o| o.report.drift.len());
        for k in 0..n_concepts {
            let m = coffee.iter().map(|o| o.report.drift[k] as f64).sum::<f64>() / coffee.len() as f64;
            worst_mean = worst_mean.max(m);
        }
        for c in &coffee {
            if let Some(d) = direct.iter().find(|d| d.spec.seed == c.spec.seed) {
                pairs += 1;
                paired_ok &= mean_drift(&c.report) < mean_drift(&d.report);
            }
        }
    }
    let parts = [
        (worst_mean <= 0.05, format!("max per-concept mean drift(coffee) {worst_mean:.5} <= 0.05")),
        (paired_ok && pairs > 0, format!("drift(coffee) < drift(direct) on all {pairs} paired runs")),
    ];
    verdict("8", "drift bound", &parts)
}

pub fn check_protocols(rows: &[ProtocolRow]) -> CriterionResult {
    let text = rows
        .iter()
        .find(|r| r.groups == [TrainableGroup::TextEncoder])
        .expect("text row");
    let full = &rows[2];
    let is_rel = (text.is_analog - full.is_analog).abs() / full.is_analog;
    let ffd_rel = text.ffd.zip(full.ffd).map(|(t, f)| (t - f).abs() / f);
    let denoiser_frozen_table = rows
        .iter()
        .find(|r| r.groups == [TrainableGroup::Denoiser])
        .is_some_and(|r| r.table_unchanged);
    let parts = [
        (is_rel <= 0.15, format!("IS text-only {:.4} within 15% of full {:.4} ({:.1}%)", text.is_analog, full.is_analog, is_rel * 100.0)),
        (
            ffd_rel.is_some_and(|x| x <= 0.15),
            format!(
                "ffd text-only {} within 15% of full {} ({})",
                text.ffd.map_or("NA".into(), |x| format!("{x:.3}")),
                full.ffd.map_or("NA".into(), |x| format!("{x:.3}")),
                ffd_rel.map_or("NA".into(), |x| format!("{:.1}%", x * 100.0))
            ),
        ),
        (
            text.param_fraction < 0.01,
            format!("text-only trains {} params = {:.4}% of full", text.trainable_params, text.param_fraction * 100.0),
        ),
        (denoiser_frozen_table, "denoiser-only runs leave the embedding table bit-unchanged".into()),
    ];
    verdict("9", "training protocol comparison", &parts)
}

pub fn check_determinism(first: &[RunOutcome], second: &[RunOutcome], roundtrip_equal: bool) -> CriterionResult {
    let a = reports_csv(&first.iter().map(|o| o.report.clone()).collect::<Vec<_>>());
    let b = reports_csv(&second.iter().map(|o| o.report.clone()).collect::<Vec<_>>());
    let json_a = serde_json::to_vec(first).expect("outcomes serialize");
    let json_b = serde_json::to_vec(second).expect("outcomes serialize");
    let parts = [
        (
            a == b && json_a == json_b,
            format!("{} repeated runs produce byte-identical reports", first.len()),
        ),
        (roundtrip_equal, "checkpoint round trip preserves every metric bit for bit".into()),
    ];
    verdict("10", "determinism and persistence", &parts)
}

pub fn dominance_info(rows: &[DominanceRow]) -> CriterionResult {
    let parts: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}/{}: coffee presence {:.3} (coverage {:.3}) vs {:.3} (dominant, coverage {:.3})",
                r.concept,
                r.attribute,
                r.presence_coffee_standard,
                r.coverage_standard,
                r.presence_coffee_dominant,
                r.coverage_dominant
            )
        })
        .collect();
    CriterionResult::new("11", "dominant-attribute diagnostic", None, parts.join("; "))
}

/// Method ranking by mean mcs_analog must equal the ranking by mean
/// presence_rate; ties are broken by the canonical method order.
pub fn check_ranking(summaries: &[MethodSummary]) -> CriterionResult {
    let rank = |key: &dyn Fn(&MethodSummary) -> f64| -> Vec<Method> {
        let mut v: Vec<&MethodSummary> = summaries.iter().collect();
        v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.method.cmp(&b.method)));
        v.into_iter().map(|s| s.method).collect()
    };
    let by_mcs = rank(&|s| s.mcs_analog);
    let by_presence = rank(&|s| s.presence_rate);
    let fmt = |v: &[Method]| v.iter().map(|m| m.name()).collect::<Vec<_>>().join(" > ");
    CriterionResult::new(
        "R",
        "metric ranking agreement",
        Some(by_mcs == by_presence),
        format!("by mcs: {}; by presence: {}", fmt(&by_mcs), fmt(&by_presence)),
    )
}

/// Config used by the acceptance suite: the defaults with enough evaluation
/// samples for the Fréchet distance.
pub fn acceptance_config() -> ExperimentConfig {
    ExperimentConfig {
        n_eval_samples: 48,
        ..ExperimentConfig::default()
    }
}

/// Runs every criterion. `progress` receives each criterion line as soon as it is known.
pub fn run_acceptance(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    mut progress: impl FnMut(&CriterionResult),
) -> Result<AcceptanceReport> {
    let mut criteria = Vec::new();
    let mut push = |c: CriterionResult, criteria: &mut Vec<CriterionResult>| {
        progress(&c);
        criteria.push(c);
    };
    push(check_gradients()?, &mut criteria);
    let schedule = NoiseSchedule::from_params(&art.model.schedule)?;
    push(check_forward_moments(&schedule)?, &mut criteria);

    let main_specs = experiment_specs(cfg);
    let extra_lambdas: Vec<f32> = SWEEP_LAMBDAS.iter().copied().filter(|&l| l != cfg.lambda).collect();
    let sweep_extra = sweep_specs(cfg, &extra_lambdas);
    let proto_specs: Vec<RunSpec> = protocol_specs(cfg)
        .into_iter()
        .filter(|s| s.groups != cfg.trainable_groups)
        .collect();
    let dom_specs = dominance_specs(cfg, true);

    let mut all = main_specs.clone();
    all.extend(sweep_extra.iter().cloned());
    all.extend(proto_specs.iter().cloned());
    all.extend(dom_specs.iter().cloned());
    let outcomes = run_specs(art, cfg, &all)?;
    let (main, rest) = outcomes.split_at(main_specs.len());
    let (sweep_out, rest) = rest.split_at(sweep_extra.len());
    let (proto_out, dom_out) = rest.split_at(proto_specs.len());

    let mut coffee_sweep: Vec<RunOutcome> = sweep_out.to_vec();
    coffee_sweep.extend(main.iter().filter(|o| o.spec.method == Method::Coffee).cloned());
    coffee_sweep.sort_by(|a, b| a.spec.lambda.total_cmp(&b.spec.lambda));
    let direct: Vec<RunOutcome> = main.iter().filter(|o| o.spec.method == Method::Direct).cloned().collect();
    let sweep = sweep_from_outcomes(cfg, &SWEEP_LAMBDAS, &coffee_sweep, &direct)?;

    let mut proto_all: Vec<RunOutcome> = proto_out.to_vec();
    proto_all.extend(direct.iter().cloned());
    let protocols = protocols_from_outcomes(art, &proto_all);

    let mut dom_all: Vec<RunOutcome> = dom_out.to_vec();
    dom_all.extend(main.iter().filter(|o| matches!(o.spec.method, Method::Direct | Method::Coffee)).cloned());
    let dominance = dominance_from_outcomes(cfg, &dom_all)?;

    let mut with_refs: Vec<RunOutcome> = outcomes.clone();
    with_refs.retain(|o| !o.trace.is_empty());
    push(check_fixed_point(&with_refs), &mut criteria);
    push(check_degeneracy(&sweep), &mut criteria);
    push(check_table1(main), &mut criteria);
    push(check_table2(main), &mut criteria);
    push(check_lambda_trend(&sweep, main), &mut criteria);
    push(check_drift(main, cfg), &mut criteria);
    push(check_protocols(&protocols), &mut criteria);

    // Determinism: repeat the first pair and seed for every method.
    let repeat_specs: Vec<RunSpec> = main_specs
        .iter()
        .filter(|s| s.pair == cfg.concept_pairs[0] && s.seed == cfg.seeds[0])
        .cloned()
        .collect();
    let again = run_specs(art, cfg, &repeat_specs)?;
    let first: Vec<RunOutcome> = main
        .iter()
        .filter(|o| repeat_specs.contains(&o.spec))
        .cloned()
        .collect();
    let roundtrip_equal = checkpoint_roundtrip_preserves_metrics(art, cfg, &repeat_specs[0], &first[0].report)?;
    push(check_determinism(&first, &again, roundtrip_equal), &mut criteria);
    push(dominance_info(&dominance), &mut criteria);

    let summaries = summarize(&main.iter().map(|o| o.report.clone()).collect::<Vec<_>>());
    push(check_ranking(&summaries), &mut criteria);
    Ok(AcceptanceReport {
        criteria,
        summaries,
        sweep,
        protocols,
        dominance,
    })
}

/// Saves the fine-tuned state, reloads it, and re-evaluates.
fn checkpoint_roundtrip_preserves_metrics(
    art: &Artifacts,
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    before: &EvalReport,
) -> Result<bool> {
    let out = finetune_run(art, cfg, spec)?;
    let bytes = out.state.to_bytes();
    let loaded = ModelState::from_bytes(&bytes, Some(&out.state.fingerprint))?;
    let after = evaluate_model(art, cfg, spec, &loaded, &out.refs)?;
    Ok(loaded.to_bytes() == bytes && serde_json::to_vec(&after)? == serde_json::to_vec(before)?)
}
