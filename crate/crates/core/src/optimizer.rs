//! Particle swarm search over level vectors for the cost `-f_Q + γ r̄`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dct::{SpectrumSet, FREQUENCIES};
use crate::discriminant::{criterion, quantized_scatters, solve_subspace, ScatterPair, Subspace};
use crate::error::{QfdaError, Result};
use crate::quantizer::{project_levels, quantize, BoundVector, LevelVector, QuantizerSpec};
use crate::rate::{rate, FrequencyDensity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 5,
            iterations: 10,
            inertia: 0.7298,
            cognitive: 1.49618,
            social: 1.49618,
            seed: 0,
            gamma: 1.0,
            lambda: 0.5,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.iterations == 0 {
            return Err(QfdaError::Config("PSO needs at least one particle and one iteration".into()));
        }
        for (name, v) in [("inertia", self.inertia), ("cognitive", self.cognitive), ("social", self.social)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(QfdaError::Config(format!("PSO {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(QfdaError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Quantized Fisher criterion `f_Q`.
    pub criterion: f64,
    /// Average rate `r̄` in bits.
    pub rate: f64,
    /// `-criterion + γ rate`.
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(criterion: f64, rate: f64, gamma: f64) -> Self {
        Self {
            criterion,
            rate,
            total: -criterion + gamma * rate,
        }
    }
}

/// Anything the swarm can minimize over level vectors.
pub trait LevelObjective: Sync {
    fn bounds(&self) -> &BoundVector;
    fn evaluate(&self, m: &LevelVector) -> Result<CostBreakdown>;
}

/// Dimensions of the subspace solved inside each cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceSettings {
    pub epsilon: f64,
    /// Directions solved for.
    pub p: usize,
    /// Leading directions entering the criterion, at most `p`.
    pub p_eval: usize,
}

impl SubspaceSettings {
    pub fn for_dim(d_prime: usize, epsilon: f64) -> Self {
        let p = d_prime.min(20);
        Self { epsilon, p, p_eval: p }
    }
}

/// The QFDA cost on one training set, with a per-level-vector cache.
pub struct CostContext {
    pub train: SpectrumSet,
    pub bounds: BoundVector,
    pub density: FrequencyDensity,
    pub settings: SubspaceSettings,
    pub gamma: f64,
    pub lambda: f64,
    cache: Mutex<HashMap<LevelVector, Result<CostBreakdown, String>>>,
    evaluations: AtomicUsize,
}

impl CostContext {
    pub fn new(
        train: SpectrumSet,
        bounds: BoundVector,
        density: FrequencyDensity,
        settings: SubspaceSettings,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self> {
        if settings.p == 0 || settings.p > train.d_prime() || settings.p_eval == 0 || settings.p_eval > settings.p {
            return Err(QfdaError::Config(format!(
                "need 1 <= p_eval <= p <= d' (p_eval = {}, p = {}, d' = {})",
                settings.p_eval,
                settings.p,
                train.d_prime()
            )));
        }
        Ok(Self {
            train,
            bounds,
            density,
            settings,
            gamma,
            lambda,
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Full (uncached) cost evaluations so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn spec(&self, m: &LevelVector) -> Result<QuantizerSpec> {
        QuantizerSpec::new(self.bounds.clone(), *m)
    }

    /// Quantized scatters and the solved subspace for `m`.
    pub fn subspace_for(&self, m: &LevelVector) -> Result<(ScatterPair, Subspace)> {
        let quantized = quantize(&self.train, &self.spec(m)?);
        let pair = quantized_scatters(&self.train, &quantized, self.lambda)?;
        let subspace = solve_subspace(&pair, self.settings.p, self.settings.epsilon)?;
        Ok((pair, subspace))
    }

    fn compute(&self, m: &LevelVector) -> Result<CostBreakdown> {
        let (pair, subspace) = self.subspace_for(m)?;
        let f = criterion(&pair, &subspace, self.settings.p_eval)?;
        let r = rate(&self.density, &self.spec(m)?).average;
        Ok(CostBreakdown::new(f, r, self.gamma))
    }
}

impl LevelObjective for CostContext {
    fn bounds(&self) -> &BoundVector {
        &self.bounds
    }

    fn evaluate(&self, m: &LevelVector) -> Result<CostBreakdown> {
        evaluate_cost(m, self)
    }
}

/// Cost of `m`, computed once per distinct level vector.
pub fn evaluate_cost(m: &LevelVector, ctx: &CostContext) -> Result<CostBreakdown> {
    m.check(&ctx.bounds)?;
    if let Some(hit) = ctx.cache.lock().unwrap().get(m) {
        return hit.clone().map_err(QfdaError::Optimization);
    }
    ctx.evaluations.fetch_add(1, Ordering::Relaxed);
    let result = ctx.compute(m);
    let stored = result.as_ref().map(|c| *c).map_err(|e| e.to_string());
    ctx.cache.lock().unwrap().insert(*m, stored);
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub best: CostBreakdown,
    pub best_m: LevelVector,
}

#[derive(Debug, Clone)]
pub struct SwarmState {
    pub positions: Vec<[f64; FREQUENCIES]>,
    pub velocities: Vec<[f64; FREQUENCIES]>,
    pub personal_best: Vec<([f64; FREQUENCIES], f64)>,
    pub global_best: Option<(LevelVector, CostBreakdown)>,
    pub history: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
pub struct PsoResult {
    pub best: LevelVector,
    pub breakdown: CostBreakdown,
    pub trace: Vec<TraceEntry>,
    pub state: SwarmState,
}

/// Trace as CSV: iteration, best cost parts, then the 64 best levels.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("iteration,best_total,best_criterion,best_rate");
    for k in 0..FREQUENCIES {
        let _ = write!(out, ",m_{k}");
    }
    out.push('\n');
    for e in trace {
        let _ = write!(out, "{},{},{},{}", e.iteration, e.best.total, e.best.criterion, e.best.rate);
        for m in e.best_m.m {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
    }
    out
}

/// Global-best PSO over continuous positions, projected onto the level
/// lattice before every evaluation. Failed evaluations count as `+inf`.
pub fn run_pso(objective: &impl LevelObjective, config: &PsoConfig) -> Result<PsoResult> {
    config.validate()?;
    let bounds = objective.bounds().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let positions: Vec<[f64; FREQUENCIES]> = (0..config.particles)
        .map(|_| {
            let mut x = [0.0; FREQUENCIES];
            for (k, v) in x.iter_mut().enumerate() {
                let hi = bounds.ell[k] as f64;
                *v = if hi > 2.0 { rng.random_range(2.0..=hi) } else { 2.0 };
            }
            x
        })
        .collect();
    let mut state = SwarmState {
        velocities: vec![[0.0; FREQUENCIES]; config.particles],
        personal_best: positions.iter().map(|x| (*x, f64::INFINITY)).collect(),
        positions,
        global_best: None,
        history: Vec::with_capacity(config.iterations),
    };
    let mut global_position = state.positions[0];
    let mut failures: Vec<String> = Vec::new();

    for iteration in 0..config.iterations {
        let projected = state
            .positions
            .iter()
            .map(|x| project_levels(x, &bounds))
            .collect::<Result<Vec<_>>>()?;
        let mut unique: Vec<LevelVector> = Vec::new();
        for m in &projected {
            if !unique.contains(m) {
                unique.push(*m);
            }
        }
        let costs: Vec<Result<CostBreakdown>> = unique.par_iter().map(|m| objective.evaluate(m)).collect();
        let cost_of = |m: &LevelVector| -> Option<CostBreakdown> {
            let i = unique.iter().position(|u| u == m).unwrap();
            costs[i].as_ref().ok().copied()
        };
        for c in costs.iter().filter_map(|c| c.as_ref().err()) {
            if failures.len() < 8 {
                failures.push(c.to_string());
            }
            log::debug!("cost evaluation failed: {c}");
        }

        // particle order with strict improvement: ties keep the lower index
        for (i, m) in projected.iter().enumerate() {
            let Some(cost) = cost_of(m) else { continue };
            if cost.total < state.personal_best[i].1 {
                state.personal_best[i] = (state.positions[i], cost.total);
            }
            let better = match &state.global_best {
                None => true,
                Some((_, best)) => cost.total < best.total,
            };
            if better {
                state.global_best = Some((*m, cost));
                global_position = state.positions[i];
            }
        }
        match &state.global_best {
            Some((m, cost)) => {
                log::info!("PSO iteration {}: best cost {}", iteration + 1, cost.total);
                state.history.push(TraceEntry {
                    iteration: iteration + 1,
                    best: *cost,
                    best_m: *m,
                });
            }
            None => {
                state.history.push(TraceEntry {
                    iteration: iteration + 1,
                    best: CostBreakdown {
                        criterion: f64::NAN,
                        rate: f64::NAN,
                        total: f64::INFINITY,
                    },
                    best_m: projected[0],
                });
            }
        }

        if iteration + 1 == config.iterations {
            break;
        }
        for i in 0..config.particles {
            let pbest = state.personal_best[i].0;
            for k in 0..FREQUENCIES {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let x = state.positions[i][k];
                let v = config.inertia * state.velocities[i][k]
                    + config.cognitive * r1 * (pbest[k] - x)
                    + config.social * r2 * (global_position[k] - x);
                state.velocities[i][k] = v;
                state.positions[i][k] = x + v;
            }
        }
    }

    let Some((best, breakdown)) = state.global_best else {
        return Err(QfdaError::Optimization(format!(
            "every cost evaluation failed: {}",
            failures.join("; ")
        )));
    };
    Ok(PsoResult {
        best,
        breakdown,
        trace: state.history.clone(),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Sphere {
        bounds: BoundVector,
        target: [f64; FREQUENCIES],
        calls: AtomicUsize,
    }

    impl LevelObjective for Sphere {
        fn bounds(&self) -> &BoundVector {
            &self.bounds
        }

        fn evaluate(&self, m: &LevelVector) -> Result<CostBreakdown> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            for k in 0..FREQUENCIES {
                assert!(m.m[k] >= 2 && m.m[k] <= self.bounds.ell[k]);
            }
            let d: f64 = (0..FREQUENCIES).map(|k| (m.m[k] as f64 - self.target[k]).powi(2)).sum();
            Ok(CostBreakdown::new(-d, 0.0, 0.0))
        }
    }

    fn sphere() -> Sphere {
        let mut ell = [0u32; FREQUENCIES];
        let mut target = [0.0; FREQUENCIES];
        for k in 0..FREQUENCIES {
            ell[k] = 4 + (k as u32 % 20);
            target[k] = 2.0 + (k % 5) as f64 * 0.5;
        }
        Sphere {
            bounds: BoundVector::from_ell(ell).unwrap(),
            target,
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn single_particle_single_iteration() {
        let s = sphere();
        let config = PsoConfig {
            particles: 1,
            iterations: 1,
            seed: 3,
            ..PsoConfig::default()
        };
        let result = run_pso(&s, &config).unwrap();
        let x0 = result.state.positions[0];
        let m0 = project_levels(&x0, &s.bounds).unwrap();
        assert_eq!(result.best, m0);
        assert_eq!(result.breakdown, s.evaluate(&m0).unwrap());
        assert_eq!(result.trace.len(), 1);
    }

    #[test]
    fn sphere_surrogate_improves() {
        let s = sphere();
        let config = PsoConfig {
            iterations: 30,
            seed: 1,
            ..PsoConfig::default()
        };
        let result = run_pso(&s, &config).unwrap();
        let trace: Vec<f64> = result.trace.iter().map(|e| e.best.total).collect();
        assert_eq!(trace.len(), 30);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace[29] < trace[0]);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let config = PsoConfig {
            seed: 9,
            ..PsoConfig::default()
        };
        let a = run_pso(&sphere(), &config).unwrap();
        let b = run_pso(&sphere(), &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best, b.best);
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
    }

    struct Failing(BoundVector);

    impl LevelObjective for Failing {
        fn bounds(&self) -> &BoundVector {
            &self.0
        }

        fn evaluate(&self, _: &LevelVector) -> Result<CostBreakdown> {
            Err(QfdaError::Numeric("nope".into()))
        }
    }

    #[test]
    fn all_failures_is_optimization_error() {
        let f = Failing(BoundVector::from_ell([5; 64]).unwrap());
        assert!(matches!(run_pso(&f, &PsoConfig::default()), Err(QfdaError::Optimization(_))));
    }

    #[test]
    fn failures_count_as_infinite_cost() {
        struct Half(BoundVector);
        impl LevelObjective for Half {
            fn bounds(&self) -> &BoundVector {
                &self.0
            }
            fn evaluate(&self, m: &LevelVector) -> Result<CostBreakdown> {
                if m.m[0] % 2 == 0 {
                    Err(QfdaError::Numeric("even".into()))
                } else {
                    Ok(CostBreakdown::new(m.m[1] as f64, 0.0, 0.0))
                }
            }
        }
        let h = Half(BoundVector::from_ell([9; 64]).unwrap());
        let r = run_pso(&h, &PsoConfig { iterations: 20, ..PsoConfig::default() }).unwrap();
        assert_eq!(r.best.m[0] % 2, 1);
    }

    #[test]
    fn bad_config_is_rejected() {
        let s = sphere();
        for bad in [
            PsoConfig { particles: 0, ..PsoConfig::default() },
            PsoConfig { iterations: 0, ..PsoConfig::default() },
            PsoConfig { inertia: 0.0, ..PsoConfig::default() },
            PsoConfig { gamma: -1.0, ..PsoConfig::default() },
        ] {
            assert!(matches!(run_pso(&s, &bad), Err(QfdaError::Config(_))));
        }
    }

    #[test]
    fn trace_csv_layout() {
        let r = run_pso(&sphere(), &PsoConfig { iterations: 3, ..PsoConfig::default() }).unwrap();
        let csv = trace_csv(&r.trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("iteration,best_total,best_criterion,best_rate,m_0,"));
        assert_eq!(lines[1].split(',').count(), 4 + 64);
    }

    #[test]
    fn breakdown_total_recomputes() {
        let c = CostBreakdown::new(3.5, 1.25, 0.4);
        assert!((c.total - (-c.criterion + 0.4 * c.rate)).abs() < 1e-12);
        assert_eq!(CostBreakdown::new(3.5, 1.25, 0.0).total, -3.5);
    }
}
