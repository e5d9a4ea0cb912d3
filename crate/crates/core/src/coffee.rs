//! Cosine-drift regularized fine-tuning and the baseline fine-tuning methods.
//!
//! The regularizer keeps the cosine similarity between the current user-prompt
//! embedding `v` and each frozen undesired-concept embedding `v_m` at its
//! pre-fine-tuning value:
//!
//! `L_reg = mean_k |cos(v_i, v_m_k) − cos(v, v_m_k)|`, `L = L_diffusion + λ·L_reg`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, kernels, AdamWConfig, AdamWState, Graph, Tensor, Var};
use crate::diffusion::{diffusion_loss, neg_prompt_train_loss, DenoiserNet, DiffusionBatch, NetVars, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textenc::{encode_batch, ConceptRefs, EmbeddingTable, EMBED_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Coffee,
    ConceptRemoval,
    NegPromptTrain,
    NegPromptInfer,
    NegPromptBoth,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Direct,
        Method::Coffee,
        Method::ConceptRemoval,
        Method::NegPromptTrain,
        Method::NegPromptInfer,
        Method::NegPromptBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Coffee => "coffee",
            Method::ConceptRemoval => "concept_removal",
            Method::NegPromptTrain => "neg_prompt_train",
            Method::NegPromptInfer => "neg_prompt_infer",
            Method::NegPromptBoth => "neg_prompt_both",
        }
    }

    /// Whether fine-tuning uses the guided negative-prompt objective.
    pub fn trains_with_negative(self) -> bool {
        matches!(self, Method::NegPromptTrain | Method::NegPromptBoth)
    }

    /// Whether sampling uses the undesired concept as the negative prompt.
    pub fn samples_with_negative(self) -> bool {
        matches!(self, Method::NegPromptInfer | Method::NegPromptBoth)
    }

    /// Prompt used at inference time.
    pub fn inference_prompt(self, user_prompt: &str, undesired: &[String]) -> String {
        match self {
            Method::ConceptRemoval => format!("{user_prompt} without {}", undesired.join(" ")),
            _ => user_prompt.to_string(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableGroup {
    TextEncoder,
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoffeeConfig {
    pub lambda: f32,
    pub trainable_groups: Vec<TrainableGroup>,
    pub steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Guidance scale of the negative-prompt training objective.
    pub guidance_scale: f32,
    /// Re-encode the undesired concepts from the current table every step
    /// instead of using the frozen snapshot.
    pub live_concept_embeddings: bool,
}

impl Default for CoffeeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            trainable_groups: vec![TrainableGroup::TextEncoder],
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 1,
            guidance_scale: 3.0,
            live_concept_embeddings: false,
        }
    }
}

impl CoffeeConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if !(self.lambda >= 0.0) || self.trainable_groups.is_empty() || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "fine-tuning needs lambda >= 0, a trainable group and batch >= 1 (got {}, {:?}, {})",
                self.lambda, self.trainable_groups, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn trains(&self, group: TrainableGroup) -> bool {
        self.trainable_groups.contains(&group)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diffusion: f32,
    pub l_reg: f32,
    pub l_total: f32,
    pub per_concept_drift: Vec<f32>,
}

/// Graph nodes of the regularizer.
#[derive(Clone, Debug)]
pub struct RegTerm {
    pub loss: Var,
    pub per_concept: Vec<Var>,
}

/// `mean_k |ref_cosines[k] − cos(v, v_m[k])|` on the graph.
pub fn reg_loss(g: &mut Graph, v: Var, refs: &ConceptRefs) -> Result<RegTerm> {
    reg_loss_against(g, v, refs.v_m(), refs.ref_cosines())
}

fn reg_loss_against(g: &mut Graph, v: Var, v_m: &[Vec<f32>], ref_cosines: &[f32]) -> Result<RegTerm> {
    let width = g.value(v).len();
    if v_m.is_empty() {
        return Err(Error::NoUndesiredConcepts);
    }
    let mut per_concept = Vec::with_capacity(v_m.len());
    for (m, &r) in v_m.iter().zip(ref_cosines) {
        if m.len() != width {
            return Err(Error::Shape {
                op: "reg_loss",
                detail: format!("prompt embedding of {width} values, concept embedding of {}", m.len()),
            });
        }
        let vm = g.constant(vec![m.len()], m.clone())?;
        let cos = g.cosine_similarity(v, vm)?;
        let neg_ref = g.constant(vec![1], vec![-r])?;
        let diff = g.add(cos, neg_ref)?;
        per_concept.push(g.abs(diff)?);
    }
    let stacked = g.concat(&per_concept, 0)?;
    let loss = g.mean(stacked)?;
    Ok(RegTerm { loss, per_concept })
}

/// `l_diff + λ·l_reg`.
pub fn total_loss(g: &mut Graph, l_diff: Var, l_reg: Var, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(l_reg, lambda)?;
    g.add(l_diff, weighted)
}

/// `|cos(v, v_m[k]) − ref_cosines[k]|` for each concept, evaluated without a graph.
pub fn drift_of(v: &[f32], v_m: &[Vec<f32>], ref_cosines: &[f32]) -> Vec<f32> {
    v_m.iter()
        .zip(ref_cosines)
        .map(|(m, &r)| (kernels::cosine(v, m) + -r).abs())
        .collect()
}

fn mean_f32(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        0.0
    } else {
        (kernels::sum(xs) / xs.len() as f64) as f32
    }
}

/// AdamW moments for the trainable parameter groups.
#[derive(Clone, Debug)]
pub struct FineTuneOptimizer {
    text_encoder: Option<AdamWState>,
    denoiser: Option<Vec<AdamWState>>,
}

impl FineTuneOptimizer {
    pub fn new(net: &DenoiserNet, table: &EmbeddingTable, cfg: &CoffeeConfig) -> Self {
        let opt = cfg.optimizer();
        Self {
            text_encoder: cfg
                .trains(TrainableGroup::TextEncoder)
                .then(|| AdamWState::new(table.matrix().numel(), &opt)),
            denoiser: cfg
                .trains(TrainableGroup::Denoiser)
                .then(|| AdamWState::for_params(&net.tensors(), &opt)),
        }
    }

    /// Number of scalar parameters this optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.text_encoder.as_ref().map_or(0, |s| s.m.len())
            + self.denoiser.as_ref().map_or(0, |s| s.iter().map(|x| x.m.len()).sum())
    }

    fn apply(
        &mut self,
        g: &Graph,
        net_vars: &NetVars,
        table_var: Var,
        net: &mut DenoiserNet,
        table: &mut EmbeddingTable,
    ) -> Result<()> {
        if let Some(states) = &mut self.denoiser {
            let mut params = net.tensors_mut();
            for (var, t) in net_vars.vars().into_iter().zip(params.iter_mut()) {
                g.export_grad(var, t)?;
            }
            adamw_step(&mut params, states)?;
            params.iter_mut().for_each(|t| t.zero_grad());
        }
        if let Some(state) = &mut self.text_encoder {
            let m = table.matrix_mut();
            g.export_grad(table_var, m)?;
            adamw_step(&mut [m], std::slice::from_mut(state))?;
            m.zero_grad();
        }
        Ok(())
    }
}

/// Marks tensors outside `cfg.trainable_groups` as frozen.
pub fn apply_trainable_groups(net: &mut DenoiserNet, table: &mut EmbeddingTable, cfg: &CoffeeConfig) {
    net.set_trainable(cfg.trains(TrainableGroup::Denoiser));
    table
        .matrix_mut()
        .set_requires_grad(cfg.trains(TrainableGroup::TextEncoder));
}

/// Inputs shared by every fine-tuning step of one run.
pub struct StepContext<'a> {
    pub method: Method,
    pub refs: Option<&'a ConceptRefs>,
    pub user_prompt: &'a str,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a CoffeeConfig,
}

/// One optimizer step of `ctx.method` on `images`.
///
/// `l_reg` is measured before the update; `per_concept_drift` after it.
///
/// Timesteps and noise are drawn from `rng` identically for every method, so
/// runs that share a seed see the same noise sequence.
pub fn train_step(
    ctx: &StepContext<'_>,
    net: &mut DenoiserNet,
    table: &mut EmbeddingTable,
    opt: &mut FineTuneOptimizer,
    images: &[&[f32]],
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let cfg = ctx.config;
    let batch = DiffusionBatch::draw(images, ctx.schedule, rng)?;
    let prompts = vec![ctx.user_prompt; images.len()];

    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let tv = g.leaf(table.matrix());
    let v = encode_batch(&mut g, tv, table, &prompts)?;

    let l_diff = if ctx.method.trains_with_negative() {
        let refs = ctx.refs.ok_or(Error::MissingRefs)?;
        let negative = refs.undesired().join(" ");
        let v_neg = encode_batch(&mut g, tv, table, &vec![negative.as_str(); images.len()])?;
        neg_prompt_train_loss(&mut g, net, &vars, &batch, v, v_neg, cfg.guidance_scale)?
    } else {
        diffusion_loss(&mut g, net, &vars, &batch, v)?
    };

    let mut breakdown = if ctx.method == Method::Coffee {
        let refs = ctx.refs.ok_or(Error::MissingRefs)?;
        let v_reg = if images.len() == 1 {
            v
        } else {
            encode_batch(&mut g, tv, table, &[ctx.user_prompt])?
        };
        let live;
        let v_m = if cfg.live_concept_embeddings {
            live = refs
                .undesired()
                .iter()
                .map(|c| table.encode_value(c))
                .collect::<Result<Vec<_>>>()?;
            live.as_slice()
        } else {
            refs.v_m()
        };
        let reg = reg_loss_against(&mut g, v_reg, v_m, refs.ref_cosines())?;
        let total = total_loss(&mut g, l_diff, reg.loss, cfg.lambda)?;
        g.backward(total)?;
        LossBreakdown {
            l_diffusion: g.scalar(l_diff),
            l_reg: g.scalar(reg.loss),
            l_total: g.scalar(total),
            per_concept_drift: Vec::new(),
        }
    } else {
        g.backward(l_diff)?;
        let drift = ctx
            .refs
            .map(|r| drift_of(&g.value(v)[..EMBED_DIM], r.v_m(), r.ref_cosines()))
            .unwrap_or_default();
        LossBreakdown {
            l_diffusion: g.scalar(l_diff),
            l_reg: mean_f32(&drift),
            l_total: g.scalar(l_diff),
            per_concept_drift: Vec::new(),
        }
    };
    opt.apply(&g, &vars, tv, net, table)?;
    if let Some(refs) = ctx.refs {
        let v_after = table.encode_value(ctx.user_prompt)?;
        breakdown.per_concept_drift = drift_of(&v_after, refs.v_m(), refs.ref_cosines());
    }
    Ok(breakdown)
}

/// One regularized step; requires snapshotted references.
#[allow(clippy::too_many_arguments)]
pub fn coffee_step(
    net: &mut DenoiserNet,
    table: &mut EmbeddingTable,
    refs: Option<&ConceptRefs>,
    image: &[f32],
    schedule: &NoiseSchedule,
    config: &CoffeeConfig,
    opt: &mut FineTuneOptimizer,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let refs = refs.ok_or(Error::MissingRefs)?;
    let ctx = StepContext {
        method: Method::Coffee,
        refs: Some(refs),
        user_prompt: refs.user_prompt(),
        schedule,
        config,
    };
    train_step(&ctx, net, table, opt, &[image], rng)
}

/// Runs `config.steps` steps of `method`, cycling over `data` in order.
///
/// `concept_removal` and `neg_prompt_infer` train exactly like `direct`; their
/// intervention happens at sampling time.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    method: Method,
    net: &mut DenoiserNet,
    table: &mut EmbeddingTable,
    data: &[&[f32]],
    refs: Option<&ConceptRefs>,
    user_prompt: &str,
    schedule: &NoiseSchedule,
    config: &CoffeeConfig,
    rng: &mut Rng,
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning data is empty".into()));
    }
    if method == Method::Coffee && refs.is_none() {
        return Err(Error::MissingRefs);
    }
    apply_trainable_groups(net, table, config);
    let mut opt = FineTuneOptimizer::new(net, table, config);
    let ctx = StepContext {
        method,
        refs,
        user_prompt,
        schedule,
        config,
    };
    let b = config.batch_size;
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let images: Vec<&[f32]> = (0..b).map(|j| data[(step * b + j) % data.len()]).collect();
        trace.push(train_step(&ctx, net, table, &mut opt, &images, rng)?);
    }
    if !net.is_finite() || !table.matrix().is_finite() {
        return Err(Error::NonFinite { op: "finetune" });
    }
    Ok(trace)
}

/// `step,l_diffusion,l_reg,l_total,drift_0,..` rows.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let k = trace.first().map_or(0, |b| b.per_concept_drift.len());
    let mut out = String::from("step,l_diffusion,l_reg,l_total");
    for i in 0..k {
        out.push_str(&format!(",drift_{i}"));
    }
    out.push('\n');
    for (s, b) in trace.iter().enumerate() {
        out.push_str(&format!("{s},{},{},{}", b.l_diffusion, b.l_reg, b.l_total));
        for d in &b.per_concept_drift {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
    }
    out
}

/// Bitwise parameter equality, used by freeze and degeneracy checks.
pub fn same_bits(a: &[&Tensor], b: &[&Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape()
                && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_finetune_set, AttributeSpec};
    use crate::diffusion::ScheduleParams;
    use crate::rng::stream;
    use crate::textenc::{snapshot_refs, Vocabulary};

    fn reg_value(v: &[f32], v_m: &[Vec<f32>], refs: &[f32]) -> f32 {
        let mut g = Graph::new();
        let v = g.leaf(&Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        let reg = reg_loss_against(&mut g, v, v_m, refs).unwrap();
        g.scalar(reg.loss)
    }

    #[test]
    fn reg_loss_closed_form() {
        let l = reg_value(&[1.0, 0.0], &[vec![1.0, 1.0]], &[0.0]);
        assert!((l - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let two = reg_value(&[1.0, 0.0], &[vec![1.0, 1.0], vec![0.0, 1.0]], &[1.0, 0.5]);
        let want = ((1.0 - std::f32::consts::FRAC_1_SQRT_2) + 0.5) / 2.0;
        assert!((two - want).abs() < 1e-6);
    }

    #[test]
    fn reg_loss_ignores_prompt_norm() {
        let vm = vec![vec![0.3, -0.2, 0.9]];
        let a = reg_value(&[0.5, 0.1, -0.4], &vm, &[0.2]);
        let b = reg_value(&[2.5, 0.5, -2.0], &vm, &[0.2]);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn reg_loss_gradient_matches_finite_differences() {
        let v0 = [0.4f32, -0.7, 0.2, 0.9];
        let vm = vec![vec![0.1, 0.5, -0.3, 0.2], vec![-0.6, 0.1, 0.4, 0.3]];
        let refs = [0.9f32, -0.8];
        let mut g = Graph::new();
        let v = g.leaf(&Tensor::parameter(vec![4], v0.to_vec()).unwrap());
        let reg = reg_loss_against(&mut g, v, &vm, &refs).unwrap();
        g.backward(reg.loss).unwrap();
        let grad = g.grad(v).unwrap().to_vec();
        let h = 1e-3f32;
        for i in 0..4 {
            let mut p = v0;
            p[i] += h;
            let mut m = v0;
            m[i] -= h;
            let fd = (reg_value(&p, &vm, &refs) - reg_value(&m, &vm, &refs)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 2e-3, "component {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(vec![1], vec![1.0]).unwrap();
        let b = g.constant(vec![1], vec![2.0]).unwrap();
        assert!(total_loss(&mut g, a, b, -0.5).is_err());
        let t = total_loss(&mut g, a, b, 0.5).unwrap();
        assert_eq!(g.scalar(t), 2.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(matches!("dreambooth".parse::<Method>(), Err(Error::UnknownMethod(_))));
        let undesired = vec!["frame".to_string()];
        assert_eq!(Method::ConceptRemoval.inference_prompt("circle", &undesired), "circle without frame");
        assert_eq!(Method::NegPromptInfer.inference_prompt("circle", &undesired), "circle");
    }

    struct Fixture {
        net: DenoiserNet,
        table: EmbeddingTable,
        schedule: NoiseSchedule,
        data: Vec<Vec<f32>>,
        refs: ConceptRefs,
    }

    fn fixture() -> Fixture {
        let table = EmbeddingTable::init(Vocabulary::toy(), 3);
        let refs = snapshot_refs("circle", &["frame"], &table).unwrap();
        let schedule = NoiseSchedule::from_params(&ScheduleParams {
            steps: 20,
            ..ScheduleParams::default()
        })
        .unwrap();
        let attr = AttributeSpec::by_name("frame").unwrap();
        let data = build_finetune_set("circle", &attr, 4, 1)
            .unwrap()
            .into_iter()
            .map(|im| im.pixels)
            .collect();
        Fixture {
            net: DenoiserNet::init(1),
            table,
            schedule,
            data,
            refs,
        }
    }

    fn run(f: &mut Fixture, method: Method, cfg: &CoffeeConfig) -> Vec<LossBreakdown> {
        let data: Vec<&[f32]> = f.data.iter().map(Vec::as_slice).collect();
        let mut rng = stream(11);
        finetune(
            method,
            &mut f.net,
            &mut f.table,
            &data,
            Some(&f.refs),
            "circle",
            &f.schedule,
            cfg,
            &mut rng,
        )
        .unwrap()
    }

    fn small(lambda: f32) -> CoffeeConfig {
        CoffeeConfig {
            lambda,
            steps: 6,
            lr: 1e-2,
            ..CoffeeConfig::default()
        }
    }

    #[test]
    fn zero_lambda_matches_direct_bit_for_bit() {
        let mut a = fixture();
        let mut b = fixture();
        let ta = run(&mut a, Method::Coffee, &small(0.0));
        let tb = run(&mut b, Method::Direct, &small(0.0));
        assert!(same_bits(&[a.table.matrix()], &[b.table.matrix()]));
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.l_diffusion.to_bits(), y.l_diffusion.to_bits());
            assert_eq!(x.per_concept_drift, y.per_concept_drift);
        }
    }

    #[test]
    fn regularizer_changes_the_update() {
        let mut a = fixture();
        let mut b = fixture();
        run(&mut a, Method::Coffee, &small(1.0));
        run(&mut b, Method::Direct, &small(1.0));
        assert!(!same_bits(&[a.table.matrix()], &[b.table.matrix()]));
    }

    #[test]
    fn frozen_groups_stay_bitwise_identical() {
        let mut f = fixture();
        let net0 = f.net.clone();
        let table0 = f.table.clone();
        run(&mut f, Method::Coffee, &small(1.0));
        assert!(same_bits(&f.net.tensors(), &net0.tensors()));
        assert!(!same_bits(&[f.table.matrix()], &[table0.matrix()]));

        let mut f = fixture();
        let cfg = CoffeeConfig {
            trainable_groups: vec![TrainableGroup::Denoiser],
            ..small(1.0)
        };
        run(&mut f, Method::Coffee, &cfg);
        assert!(same_bits(&[f.table.matrix()], &[table0.matrix()]));
        assert!(!same_bits(&f.net.tensors(), &net0.tensors()));
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut f = fixture();
        let net0 = f.net.clone();
        let table0 = f.table.clone();
        let trace = run(&mut f, Method::Coffee, &CoffeeConfig { steps: 0, ..small(1.0) });
        assert!(trace.is_empty());
        assert!(same_bits(&f.net.tensors(), &net0.tensors()));
        assert!(same_bits(&[f.table.matrix()], &[table0.matrix()]));
    }

    #[test]
    fn drift_starts_at_zero_and_trace_is_consistent() {
        let mut f = fixture();
        let trace = run(&mut f, Method::Coffee, &small(0.5));
        assert_eq!(trace[0].l_reg, 0.0);
        for b in &trace {
            let want = b.l_diffusion + 0.5 * b.l_reg;
            assert!((b.l_total - want).abs() < 1e-5);
        }
        let csv = trace_csv(&trace);
        assert!(csv.starts_with("step,l_diffusion,l_reg,l_total,drift_0\n"));
        assert_eq!(csv.lines().count(), trace.len() + 1);
    }

    #[test]
    fn coffee_needs_refs() {
        let mut f = fixture();
        let cfg = small(1.0);
        let mut opt = FineTuneOptimizer::new(&f.net, &f.table, &cfg);
        let mut rng = stream(0);
        let image = f.data[0].clone();
        let err = coffee_step(&mut f.net, &mut f.table, None, &image, &f.schedule, &cfg, &mut opt, &mut rng);
        assert!(matches!(err, Err(Error::MissingRefs)));
    }

    #[test]
    fn negative_prompt_training_runs_and_moves_the_table() {
        let mut f = fixture();
        let table0 = f.table.clone();
        let trace = run(&mut f, Method::NegPromptTrain, &small(1.0));
        assert_eq!(trace.len(), 6);
        assert!(!same_bits(&[f.table.matrix()], &[table0.matrix()]));
    }
}
