//! Population Based Training: a generation-synchronous scheduler that trains
//! a population of models concurrently, then replaces the worst truncation
//! fraction with perturbed copies of the best. Fitness is the standard
//! validation loss, trustworthy because coordinated dropout stays on.

use crate::error::{CoreError, Result};
use crate::lfads::{Architecture, HyperParams, LfadsModel};
use crate::rng::{derive_seed, substream};
use crate::trainer::{train_from, Checkpoint, MetricRecord, TrainConfig, TrainData};
use rand::RngExt;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpScale {
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HpInit {
    LogUniform,
    Uniform,
    Fixed(f64),
}

/// The seven searched hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpName {
    L2GenScale,
    L2ConScale,
    KlIcScale,
    KlCoScale,
    DropoutProb,
    KeepRatio,
    LearningRate,
}

impl HpName {
    pub fn as_str(&self) -> &'static str {
        match self {
            HpName::L2GenScale => "l2_gen_scale",
            HpName::L2ConScale => "l2_con_scale",
            HpName::KlIcScale => "kl_ic_scale",
            HpName::KlCoScale => "kl_co_scale",
            HpName::DropoutProb => "dropout_prob",
            HpName::KeepRatio => "keep_ratio",
            HpName::LearningRate => "learning_rate",
        }
    }

    fn get(&self, hps: &HyperParams) -> f64 {
        match self {
            HpName::L2GenScale => hps.l2_gen_scale,
            HpName::L2ConScale => hps.l2_con_scale,
            HpName::KlIcScale => hps.kl_ic_scale,
            HpName::KlCoScale => hps.kl_co_scale,
            HpName::DropoutProb => hps.dropout_prob,
            HpName::KeepRatio => hps.keep_ratio,
            HpName::LearningRate => hps.learning_rate,
        }
    }

    fn set(&self, hps: &mut HyperParams, v: f64) {
        match self {
            HpName::L2GenScale => hps.l2_gen_scale = v,
            HpName::L2ConScale => hps.l2_con_scale = v,
            HpName::KlIcScale => hps.kl_ic_scale = v,
            HpName::KlCoScale => hps.kl_co_scale = v,
            HpName::DropoutProb => hps.dropout_prob = v,
            HpName::KeepRatio => hps.keep_ratio = v,
            HpName::LearningRate => hps.learning_rate = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpDef {
    pub name: HpName,
    pub lower: f64,
    pub upper: f64,
    pub scale: HpScale,
    pub init: HpInit,
}

/// Bounds, scales, and initialization for every searched hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpSpace {
    pub hps: Vec<HpDef>,
}

impl Default for HpSpace {
    fn default() -> Self {
        Self::standard()
    }
}

impl HpSpace {
    /// The standard seven-hyperparameter search space.
    pub fn standard() -> Self {
        use HpInit::*;
        use HpName::*;
        use HpScale::*;
        HpSpace {
            hps: vec![
                HpDef { name: L2GenScale, lower: 5.0, upper: 5e4, scale: Log, init: LogUniform },
                HpDef { name: L2ConScale, lower: 5.0, upper: 5e4, scale: Log, init: LogUniform },
                HpDef { name: KlIcScale, lower: 0.05, upper: 5.0, scale: Log, init: LogUniform },
                HpDef { name: KlCoScale, lower: 0.05, upper: 5.0, scale: Log, init: LogUniform },
                HpDef { name: DropoutProb, lower: 0.0, upper: 0.7, scale: Linear, init: Uniform },
                HpDef { name: KeepRatio, lower: 0.3, upper: 0.99, scale: Linear, init: Fixed(0.5) },
                HpDef { name: LearningRate, lower: 1e-5, upper: 0.02, scale: Log, init: Fixed(0.01) },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for def in &self.hps {
            if !(def.lower < def.upper) {
                return Err(CoreError::InvalidArgument(format!(
                    "{}: lower {} must be < upper {}",
                    def.name.as_str(),
                    def.lower,
                    def.upper
                )));
            }
            if let HpInit::Fixed(v) = def.init {
                if v < def.lower || v > def.upper {
                    return Err(CoreError::InvalidArgument(format!(
                        "{}: initial {} outside [{}, {}]",
                        def.name.as_str(),
                        v,
                        def.lower,
                        def.upper
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draw initial hyperparameters (unsearched fields keep `base` values).
    pub fn draw_init<R: RngExt>(&self, base: &HyperParams, rng: &mut R) -> HyperParams {
        let mut hps = *base;
        for def in &self.hps {
            let v = match def.init {
                HpInit::Fixed(v) => v,
                HpInit::Uniform => def.lower + rng.random::<f64>() * (def.upper - def.lower),
                HpInit::LogUniform => {
                    let u: f64 = rng.random();
                    (def.lower.ln() + u * (def.upper.ln() - def.lower.ln())).exp()
                }
            };
            def.name.set(&mut hps, v);
        }
        hps
    }
}

/// Scheduler policy constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtConfig {
    pub population_size: usize,
    pub steps_per_generation: u64,
    pub n_generations: usize,
    /// Truncation fraction: this share of the population is replaced by
    /// copies of the same-sized top share each generation.
    pub exploit_frac: f64,
    /// Multiplicative perturbation factors for log-scale hyperparameters.
    pub perturb_factors: (f64, f64),
    /// Per-hyperparameter probability of resampling from the init
    /// distribution instead of perturbing.
    pub resample_prob: f64,
    pub max_workers: usize,
    pub seed: u64,
}

impl PbtConfig {
    pub fn new(population_size: usize, steps_per_generation: u64, n_generations: usize, seed: u64) -> Self {
        PbtConfig {
            population_size,
            steps_per_generation,
            n_generations,
            exploit_frac: 0.25,
            perturb_factors: (0.8, 1.25),
            resample_prob: 0.1,
            max_workers: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(CoreError::InvalidArgument("population_size must be >= 4".into()));
        }
        if !(self.exploit_frac > 0.0 && self.exploit_frac <= 0.5) {
            return Err(CoreError::InvalidArgument("exploit_frac must be in (0, 0.5]".into()));
        }
        if !(self.resample_prob >= 0.0 && self.resample_prob <= 1.0) {
            return Err(CoreError::InvalidArgument("resample_prob must be in [0,1]".into()));
        }
        Ok(())
    }

    fn n_exploit(&self) -> usize {
        ((self.population_size as f64 * self.exploit_frac).floor() as usize).max(1)
    }
}

/// One perturbation applied during explore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub hp: String,
    pub old: f64,
    pub new: f64,
    pub resampled: bool,
}

/// One generation's lineage record for a member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub generation: usize,
    /// Who the weights came from this generation (self when it survived).
    pub parent_id: usize,
    pub perturbations: Vec<Perturbation>,
}

#[derive(Debug, Clone)]
pub struct PopulationMember {
    pub member_id: usize,
    pub hps: HyperParams,
    pub checkpoint: Checkpoint,
    /// Standard validation loss at the last evaluation; +inf if diverged.
    pub fitness: f64,
    pub rate_r2: Option<f64>,
    pub generation: usize,
    pub lineage: Vec<LineageEvent>,
}

/// Scheduler decision for one member at a generation boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberPlan {
    Keep,
    Replace { parent_id: usize, new_hps: HyperParams, perturbations: Vec<Perturbation> },
}

/// Decide copy/perturb for every member given the recorded fitnesses.
/// Pure in (fitnesses, hps, seed, generation): replaying a generation with
/// the same inputs yields identical decisions.
pub fn plan_generation(
    members: &[(usize, f64, HyperParams)],
    space: &HpSpace,
    cfg: &PbtConfig,
    generation: usize,
) -> Vec<MemberPlan> {
    let n = members.len();
    let n_exploit = cfg.n_exploit().min(n / 2);
    // Rank by fitness, ties broken by member id so ordering is total.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        members[a]
            .1
            .partial_cmp(&members[b].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(members[a].0.cmp(&members[b].0))
    });
    let top: Vec<usize> = order[..n_exploit].to_vec();
    let bottom: Vec<usize> = order[n - n_exploit..].to_vec();

    let mut rng = substream(cfg.seed, "pbt-sched", generation as u64);
    let mut plans: Vec<MemberPlan> = (0..n).map(|_| MemberPlan::Keep).collect();
    // Deterministic consumption order: ascending member id within the bottom set.
    let mut bottom_sorted = bottom.clone();
    bottom_sorted.sort_by_key(|&i| members[i].0);
    for &loser in &bottom_sorted {
        let source = top[rng.random_range(0..top.len())];
        let parent_hps = members[source].2;
        let mut new_hps = parent_hps;
        let mut perturbations = Vec::new();
        for def in &space.hps {
            let old = def.name.get(&new_hps);
            let resample = rng.random::<f64>() < cfg.resample_prob;
            let new = if resample {
                match def.init {
                    HpInit::Fixed(v) => v,
                    HpInit::Uniform => def.lower + rng.random::<f64>() * (def.upper - def.lower),
                    HpInit::LogUniform => {
                        let u: f64 = rng.random();
                        (def.lower.ln() + u * (def.upper.ln() - def.lower.ln())).exp()
                    }
                }
            } else {
                let up: bool = rng.random();
                match def.scale {
                    HpScale::Log => {
                        let f = if up { cfg.perturb_factors.1 } else { cfg.perturb_factors.0 };
                        old * f
                    }
                    HpScale::Linear => {
                        let delta = 0.1 * (def.upper - def.lower);
                        if up {
                            old + delta
                        } else {
                            old - delta
                        }
                    }
                }
            };
            let clipped = new.clamp(def.lower, def.upper);
            def.name.set(&mut new_hps, clipped);
            perturbations.push(Perturbation {
                hp: def.name.as_str().into(),
                old,
                new: clipped,
                resampled: resample,
            });
        }
        plans[loser] = MemberPlan::Replace { parent_id: members[source].0, new_hps, perturbations };
    }
    plans
}

/// One row of the run history, written once per member per generation.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub generation: usize,
    pub member_id: usize,
    pub parent_id: usize,
    pub hps: HyperParams,
    pub fitness: f64,
    pub rate_r2: Option<f64>,
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(
        "generation,member_id,parent_id,l2_gen_scale,l2_con_scale,kl_ic_scale,kl_co_scale,dropout_prob,keep_ratio,learning_rate,fitness,rate_r2\n",
    );
    for r in rows {
        let h = &r.hps;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.generation,
            r.member_id,
            r.parent_id,
            h.l2_gen_scale,
            h.l2_con_scale,
            h.kl_ic_scale,
            h.kl_co_scale,
            h.dropout_prob,
            h.keep_ratio,
            h.learning_rate,
            r.fitness,
            r.rate_r2.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    out
}

#[derive(Debug)]
pub struct PbtResult {
    /// Snapshot of the best member ever evaluated (elite archive).
    pub best: PopulationMember,
    pub history: Vec<HistoryRow>,
    pub population: Vec<PopulationMember>,
}

/// Fresh members with hyperparameters drawn per the init column and
/// independent model-parameter seeds.
pub fn init_population(
    space: &HpSpace,
    cfg: &PbtConfig,
    base: &TrainConfig,
    arch: &Architecture,
) -> Result<Vec<PopulationMember>> {
    space.validate()?;
    cfg.validate()?;
    let mut members = Vec::with_capacity(cfg.population_size);
    for m in 0..cfg.population_size {
        let mut rng = substream(cfg.seed, "pbt-init-hp", m as u64);
        let hps = space.draw_init(&base.hps, &mut rng);
        let member_seed = derive_seed(cfg.seed, "pbt-member", m as u64);
        let model = LfadsModel::new(*arch, derive_seed(member_seed, "model-init", 0))?;
        let checkpoint = Checkpoint::new(model, hps, member_seed);
        members.push(PopulationMember {
            member_id: m,
            hps,
            checkpoint,
            fitness: f64::INFINITY,
            rate_r2: None,
            generation: 0,
            lineage: Vec::new(),
        });
    }
    Ok(members)
}

fn member_config(base: &TrainConfig, member: &PopulationMember) -> TrainConfig {
    TrainConfig { hps: member.hps, seed: member.checkpoint.seed, ..base.clone() }
}

fn record_eval(member: &mut PopulationMember, metrics: &[MetricRecord], diverged: bool) {
    match (diverged, metrics.last()) {
        (false, Some(m)) => {
            member.fitness = m.valid_loss;
            member.rate_r2 = m.rate_r2;
        }
        _ => {
            member.fitness = f64::INFINITY;
            member.rate_r2 = None;
        }
    }
}

/// Train every member one generation, evaluate, then exploit/explore.
/// Members train concurrently up to `cfg.max_workers`; the generation
/// boundary is a barrier.
pub fn step_generation(
    population: &mut Vec<PopulationMember>,
    base: &TrainConfig,
    data: &TrainData,
    space: &HpSpace,
    cfg: &PbtConfig,
    generation: usize,
) -> Result<()> {
    // Train all members for one generation.
    let jobs: Vec<(TrainConfig, Checkpoint)> = population
        .iter()
        .map(|m| (member_config(base, m), m.checkpoint.clone()))
        .collect();
    let steps = cfg.steps_per_generation;
    let results = crate::worker::run_parallel(jobs, cfg.max_workers, |_, (config, ckpt)| {
        train_from(ckpt, &config, data, steps)
    });
    let mut any_ok = false;
    for (member, result) in population.iter_mut().zip(results) {
        let result = result?;
        let diverged = matches!(result.status, crate::trainer::RunStatus::Diverged { .. });
        record_eval(member, &result.metrics, diverged);
        member.checkpoint = result.checkpoint;
        member.hps = member.checkpoint.hps;
        any_ok = any_ok || !diverged;
    }
    if !any_ok {
        return Err(CoreError::Diverged { step: population[0].checkpoint.step });
    }

    // Exploit + explore.
    let snapshot: Vec<(usize, f64, HyperParams)> =
        population.iter().map(|m| (m.member_id, m.fitness, m.hps)).collect();
    let plans = plan_generation(&snapshot, space, cfg, generation);
    let checkpoints: Vec<Checkpoint> = population.iter().map(|m| m.checkpoint.clone()).collect();
    let id_to_idx: std::collections::HashMap<usize, usize> =
        population.iter().enumerate().map(|(i, m)| (m.member_id, i)).collect();
    for (idx, plan) in plans.iter().enumerate() {
        let member = &mut population[idx];
        match plan {
            MemberPlan::Keep => {
                member.lineage.push(LineageEvent {
                    generation,
                    parent_id: member.member_id,
                    perturbations: Vec::new(),
                });
            }
            MemberPlan::Replace { parent_id, new_hps, perturbations } => {
                let own_seed = member.checkpoint.seed;
                let parent_ckpt = &checkpoints[id_to_idx[parent_id]];
                member.checkpoint = parent_ckpt.clone();
                // The member keeps its own stream seed so future batches and
                // masks stay decorrelated from its parent.
                member.checkpoint.seed = own_seed;
                member.checkpoint.hps = *new_hps;
                member.hps = *new_hps;
                member.lineage.push(LineageEvent {
                    generation,
                    parent_id: *parent_id,
                    perturbations: perturbations.clone(),
                });
            }
        }
        member.generation = generation;
    }
    Ok(())
}

/// Run the full schedule. The returned `best` is the highest-fitness snapshot
/// observed at any generation boundary (the incumbent best is never lost,
/// even if later training degrades it).
pub fn run_pbt(
    base: &TrainConfig,
    data: &TrainData,
    space: &HpSpace,
    cfg: &PbtConfig,
    arch: &Architecture,
) -> Result<PbtResult> {
    cfg.validate()?;
    let mut population = init_population(space, cfg, base, arch)?;
    let mut history = Vec::new();

    // Initial evaluation (generation 0, no training yet).
    {
        let jobs: Vec<(TrainConfig, Checkpoint)> = population
            .iter()
            .map(|m| (member_config(base, m), m.checkpoint.clone()))
            .collect();
        let results =
            crate::worker::run_parallel(jobs, cfg.max_workers, |_, (config, ckpt)| {
                train_from(ckpt, &config, data, 0)
            });
        for (member, result) in population.iter_mut().zip(results) {
            let result = result?;
            record_eval(member, &result.metrics, false);
        }
        for m in &population {
            history.push(HistoryRow {
                generation: 0,
                member_id: m.member_id,
                parent_id: m.member_id,
                hps: m.hps,
                fitness: m.fitness,
                rate_r2: m.rate_r2,
            });
        }
    }

    let mut best: Option<PopulationMember> = None;
    let update_best = |pop: &[PopulationMember], best: &mut Option<PopulationMember>| {
        for m in pop {
            let better = match best {
                Some(b) => m.fitness < b.fitness,
                None => m.fitness.is_finite(),
            };
            if better {
                *best = Some(m.clone());
            }
        }
    };
    update_best(&population, &mut best);

    for generation in 1..=cfg.n_generations {
        step_generation(&mut population, base, data, space, cfg, generation)?;
        for m in &population {
            let event = m.lineage.last().expect("lineage written every generation");
            history.push(HistoryRow {
                generation,
                member_id: m.member_id,
                parent_id: event.parent_id,
                hps: m.hps,
                fitness: m.fitness,
                rate_r2: m.rate_r2,
            });
        }
        update_best(&population, &mut best);
    }

    let best = best.ok_or_else(|| CoreError::InvalidArgument("no member ever evaluated finite".into()))?;
    Ok(PbtResult { best, history, population })
}
