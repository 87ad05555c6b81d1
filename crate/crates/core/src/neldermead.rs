//! Single-run threshold search: a Nelder–Mead simplex over constraint
//! threshold vectors, where evaluating a candidate means continuing an
//! equality-constrained training session at those thresholds until the
//! measured channel values converge (or a per-evaluation step cap is hit) and
//! then probing the gold objective wherever the policy ended up.
//!
//! The simplex machinery is a propose/observe state machine so the expensive
//! evaluation stays outside: callers receive one candidate at a time, score
//! it however they like, and feed the score back. Internally scores are
//! negated gold values — lower is better — which keeps the branch conditions
//! in their textbook minimization form. Evaluations are cached under an
//! elementwise relative tolerance, and a collapsed simplex is re-perturbed
//! around its best vertex.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;
use core::mem;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::envs::GoodhartSpec;
use crate::trainer::{
    MethodKind, MethodSpec, RunLog, RunRecord, TrainConfig, TrainError, TrainState,
};

/// Simplex move coefficients: reflection α, expansion γ, contraction ρ,
/// shrink σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmCoefficients {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
}

impl Default for NmCoefficients {
    fn default() -> Self {
        NmCoefficients { reflection: 1.0, expansion: 2.0, contraction: 0.5, shrink: 0.5 }
    }
}

/// Which simplex move produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    /// Initial-simplex vertex evaluation.
    Init,
    Reflect,
    Expand,
    Contract,
    Shrink,
    /// Vertex evaluation after a degeneracy re-perturbation.
    Reperturb,
}

impl PhaseTag {
    pub fn name(self) -> &'static str {
        match self {
            PhaseTag::Init => "init",
            PhaseTag::Reflect => "reflect",
            PhaseTag::Expand => "expand",
            PhaseTag::Contract => "contract",
            PhaseTag::Shrink => "shrink",
            PhaseTag::Reperturb => "reperturb",
        }
    }
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Pending {
    /// Scoring initial (or re-perturbed) vertex `index`.
    InitVertex(usize),
    Reflect,
    /// Reflection beat the best vertex; trying the expanded point. Keeps the
    /// evaluated reflected point to fall back on.
    Expand { reflected: Vec<f64>, reflected_score: f64 },
    Contract,
    /// Re-scoring shrunk vertex `index` (1-based; vertex 0 never moves).
    Shrink(usize),
}

/// Nelder–Mead state machine over a simplex of `dim + 1` points in `dim`
/// dimensions, minimizing the observed score. Drive it by alternating
/// [`propose`](NelderMead::propose) and [`observe`](NelderMead::observe);
/// `observe` takes the point actually evaluated, so callers may clamp or
/// otherwise project the proposal before scoring it.
pub struct NelderMead {
    coefficients: NmCoefficients,
    /// Sorted best-to-worst once initialized.
    vertices: Vec<Vec<f64>>,
    scores: Vec<f64>,
    pending: Pending,
    awaiting: Option<PhaseTag>,
}

impl NelderMead {
    /// Starts from explicit vertices (`dim + 1` points of equal dimension),
    /// which the first `dim + 1` propose/observe cycles will score.
    pub fn new(vertices: Vec<Vec<f64>>, coefficients: NmCoefficients) -> Self {
        let dim = vertices.first().map_or(0, Vec::len);
        assert!(dim >= 1, "simplex needs at least one dimension");
        assert_eq!(vertices.len(), dim + 1, "simplex needs dim + 1 vertices");
        assert!(vertices.iter().all(|v| v.len() == dim), "vertex dimensions disagree");
        let n = vertices.len();
        NelderMead {
            coefficients,
            vertices,
            scores: vec![f64::INFINITY; n],
            pending: Pending::InitVertex(0),
            awaiting: None,
        }
    }

    /// True once every vertex has a score (simplex moves are meaningful).
    pub fn is_initialized(&self) -> bool {
        !matches!(self.pending, Pending::InitVertex(_))
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    /// Internal scores (negated objective; `INFINITY` for not-yet-scored
    /// vertices during initialization).
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Best vertex and its score. Meaningful once initialized.
    pub fn best(&self) -> (&[f64], f64) {
        (&self.vertices[0], self.scores[0])
    }

    /// Largest pairwise Euclidean distance between vertices.
    pub fn diameter(&self) -> f64 {
        let mut max = 0.0f64;
        for i in 0..self.vertices.len() {
            for j in i + 1..self.vertices.len() {
                let d2: f64 = self.vertices[i]
                    .iter()
                    .zip(&self.vertices[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                max = max.max(d2.sqrt());
            }
        }
        max
    }

    /// Simplex volume `|det(vⱼ − v₀)| / dim!` — zero when the vertices are
    /// affinely dependent.
    pub fn volume(&self) -> f64 {
        let dim = self.vertices[0].len();
        let mut m = vec![0.0; dim * dim];
        for j in 1..=dim {
            for k in 0..dim {
                m[(j - 1) * dim + k] = self.vertices[j][k] - self.vertices[0][k];
            }
        }
        let mut det = 1.0;
        for col in 0..dim {
            let pivot = (col..dim)
                .max_by(|&a, &b| m[a * dim + col].abs().total_cmp(&m[b * dim + col].abs()))
                .unwrap();
            if m[pivot * dim + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for k in 0..dim {
                    m.swap(col * dim + k, pivot * dim + k);
                }
                det = -det;
            }
            det *= m[col * dim + col];
            for r in col + 1..dim {
                let factor = m[r * dim + col] / m[col * dim + col];
                for k in col..dim {
                    m[r * dim + k] -= factor * m[col * dim + k];
                }
            }
        }
        let mut factorial = 1.0;
        for k in 2..=dim {
            factorial *= k as f64;
        }
        det.abs() / factorial
    }

    /// Replaces the whole simplex (e.g. re-perturbed around the best vertex)
    /// and restarts vertex scoring.
    pub fn reset_around(&mut self, vertices: Vec<Vec<f64>>) {
        assert!(self.awaiting.is_none(), "reset during an outstanding proposal");
        let dim = self.vertices[0].len();
        assert_eq!(vertices.len(), dim + 1, "simplex needs dim + 1 vertices");
        assert!(vertices.iter().all(|v| v.len() == dim), "vertex dimensions disagree");
        self.vertices = vertices;
        self.scores = vec![f64::INFINITY; dim + 1];
        self.pending = Pending::InitVertex(0);
    }

    fn centroid(&self) -> Vec<f64> {
        let dim = self.vertices[0].len();
        let n = self.vertices.len() - 1;
        let mut c = vec![0.0; dim];
        for vertex in &self.vertices[..n] {
            for (ci, &vi) in c.iter_mut().zip(vertex) {
                *ci += vi;
            }
        }
        for ci in c.iter_mut() {
            *ci /= n as f64;
        }
        c
    }

    /// Next candidate to evaluate and the move that produced it. Panics if
    /// the previous proposal has not been observed yet.
    pub fn propose(&mut self) -> (Vec<f64>, PhaseTag) {
        assert!(self.awaiting.is_none(), "propose called with an observation outstanding");
        let (candidate, tag) = match &self.pending {
            Pending::InitVertex(i) => (self.vertices[*i].clone(), PhaseTag::Init),
            Pending::Reflect => {
                let centroid = self.centroid();
                let worst = self.vertices.last().expect("non-empty simplex");
                let alpha = self.coefficients.reflection;
                let candidate = centroid
                    .iter()
                    .zip(worst)
                    .map(|(&c, &w)| c + alpha * (c - w))
                    .collect();
                (candidate, PhaseTag::Reflect)
            }
            Pending::Expand { reflected, .. } => {
                let centroid = self.centroid();
                let gamma = self.coefficients.expansion;
                let candidate = centroid
                    .iter()
                    .zip(reflected)
                    .map(|(&c, &r)| c + gamma * (r - c))
                    .collect();
                (candidate, PhaseTag::Expand)
            }
            Pending::Contract => {
                let centroid = self.centroid();
                let worst = self.vertices.last().expect("non-empty simplex");
                let rho = self.coefficients.contraction;
                let candidate = centroid
                    .iter()
                    .zip(worst)
                    .map(|(&c, &w)| c + rho * (w - c))
                    .collect();
                (candidate, PhaseTag::Contract)
            }
            Pending::Shrink(j) => {
                let sigma = self.coefficients.shrink;
                let best = &self.vertices[0];
                let candidate = best
                    .iter()
                    .zip(&self.vertices[*j])
                    .map(|(&b, &v)| b + sigma * (v - b))
                    .collect();
                (candidate, PhaseTag::Shrink)
            }
        };
        self.awaiting = Some(tag);
        (candidate, tag)
    }

    /// Feeds back the evaluated point (possibly a projected version of the
    /// proposal) and its score, and advances the state machine:
    /// reflections between best and second-worst replace the worst vertex;
    /// reflections beating the best trigger an expansion that is kept only if
    /// it beats the best too; failed reflections try an inner contraction
    /// toward the worst vertex, and a failed contraction shrinks every vertex
    /// toward the best.
    pub fn observe(&mut self, point: Vec<f64>, score: f64) {
        self.awaiting.take().expect("observe called without a proposal");
        let worst_index = self.vertices.len() - 1;
        match mem::replace(&mut self.pending, Pending::Reflect) {
            Pending::InitVertex(i) => {
                self.vertices[i] = point;
                self.scores[i] = score;
                if i + 1 < self.vertices.len() {
                    self.pending = Pending::InitVertex(i + 1);
                } else {
                    self.sort();
                }
            }
            Pending::Reflect => {
                if score < self.scores[0] {
                    self.pending = Pending::Expand { reflected: point, reflected_score: score };
                } else if score < self.scores[worst_index - 1] {
                    self.replace_worst(point, score);
                } else {
                    self.pending = Pending::Contract;
                }
            }
            Pending::Expand { reflected, reflected_score } => {
                if score < self.scores[0] {
                    self.replace_worst(point, score);
                } else {
                    self.replace_worst(reflected, reflected_score);
                }
            }
            Pending::Contract => {
                if score < self.scores[worst_index] {
                    self.replace_worst(point, score);
                } else {
                    self.pending = Pending::Shrink(1);
                }
            }
            Pending::Shrink(j) => {
                self.vertices[j] = point;
                self.scores[j] = score;
                if j < worst_index {
                    self.pending = Pending::Shrink(j + 1);
                } else {
                    self.sort();
                }
            }
        }
    }

    fn replace_worst(&mut self, point: Vec<f64>, score: f64) {
        let worst = self.vertices.len() - 1;
        self.vertices[worst] = point;
        self.scores[worst] = score;
        self.sort();
        self.pending = Pending::Reflect;
    }

    fn sort(&mut self) {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        // Stable by construction: ties keep their current relative order.
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let vertices = mem::take(&mut self.vertices);
        let scores = mem::take(&mut self.scores);
        let mut sorted_vertices = Vec::with_capacity(vertices.len());
        let mut sorted_scores = Vec::with_capacity(scores.len());
        let mut leftovers: Vec<Option<Vec<f64>>> = vertices.into_iter().map(Some).collect();
        for &i in &order {
            sorted_vertices.push(leftovers[i].take().expect("each index moved once"));
            sorted_scores.push(scores[i]);
        }
        self.vertices = sorted_vertices;
        self.scores = sorted_scores;
        self.pending = Pending::Reflect;
    }
}

/// Score cache keyed by threshold vectors under an elementwise relative
/// tolerance: a lookup hits when every coordinate is within
/// `rel_tol·|stored coordinate|` of a stored entry (insertion order decides
/// between multiple matches).
pub struct EvalCache {
    entries: Vec<(Vec<f64>, f64)>,
    rel_tol: f64,
}

impl EvalCache {
    pub fn new(rel_tol: f64) -> Self {
        EvalCache { entries: Vec::new(), rel_tol }
    }

    pub fn lookup(&self, point: &[f64]) -> Option<f64> {
        self.entries
            .iter()
            .find(|(stored, _)| {
                stored.len() == point.len()
                    && stored
                        .iter()
                        .zip(point)
                        .all(|(&s, &p)| (p - s).abs() <= self.rel_tol * s.abs())
            })
            .map(|&(_, score)| score)
    }

    pub fn insert(&mut self, point: Vec<f64>, score: f64) {
        self.entries.push((point, score));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Threshold-search configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NmConfig {
    /// Environment-step budget for the whole search. Each evaluation may
    /// spend at most an eighth of it.
    pub total_budget: usize,
    /// Relative half-width of the initial simplex perturbations: each
    /// coordinate of the starting point is scaled by a uniform factor in
    /// `1 ± perturb_scale`.
    pub perturb_scale: f64,
    /// An evaluation counts as converged when every probed channel value is
    /// within this distance of its threshold. Keep it below the simplex's
    /// step scale, or proposals near the current policy values converge
    /// instantly without moving anything and the local landscape reads flat.
    pub converge_tol: f64,
    /// Stop when the simplex diameter falls below this. Must sit well under
    /// the initial simplex diameter or the search exits before moving.
    pub diameter_tol: f64,
    /// Elementwise relative tolerance of the evaluation cache.
    pub cache_rel_tol: f64,
    pub coefficients: NmCoefficients,
    /// Seeds the training session and the simplex perturbations.
    pub seed: u64,
}

impl Default for NmConfig {
    fn default() -> Self {
        NmConfig {
            total_budget: 204_800,
            perturb_scale: 0.2,
            converge_tol: 0.03,
            diameter_tol: 0.01,
            cache_rel_tol: 0.05,
            coefficients: NmCoefficients::default(),
            seed: 0,
        }
    }
}

/// One evaluated proposal in the search trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NmTraceRecord {
    /// 1-based evaluation counter.
    pub proposal_index: usize,
    pub phase: PhaseTag,
    /// The point actually evaluated (clamped into [0, 1] in training mode).
    pub point: Vec<f64>,
    /// Gold objective measured for the point (higher is better).
    pub gold: f64,
    /// Whether the evaluation stopped on a step cap instead of converging.
    pub capped: bool,
    /// Whether the score came from the cache (zero training steps).
    pub cache_hit: bool,
    /// Cumulative environment steps spent after this evaluation.
    pub budget_used: usize,
    /// Simplex vertices after folding in this observation, best first.
    pub simplex: Vec<Vec<f64>>,
    /// Gold-scale vertex scores aligned with `simplex` (`NaN` for vertices
    /// not yet scored during initialization).
    pub simplex_gold: Vec<f64>,
}

/// Search result: the best threshold vector found, its gold score, the full
/// evaluation trace, and (in training mode) the concatenated run log of the
/// underlying session.
#[derive(Debug, Clone, PartialEq)]
pub struct NmOutcome {
    pub best_point: Vec<f64>,
    pub best_gold: f64,
    pub trace: Vec<NmTraceRecord>,
    pub run_log: Option<RunLog>,
    /// True when the initial simplex had zero volume (e.g. zero perturbation
    /// scale), which leaves the search nothing to move.
    pub degenerate_init: bool,
}

/// Initial simplex: `base.len() + 1` vertices, each the base point with
/// every coordinate perturbed by a uniform relative factor in
/// `[−scale, +scale]` and clipped into [0, 1]. Perturbing the measured
/// starting values (rather than sampling thresholds across the whole box)
/// keeps early proposals in territory the policy can actually reach.
pub fn init_simplex(base: &[f64], perturb_scale: f64, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    (0..=base.len())
        .map(|_| {
            base.iter()
                .map(|&b| {
                    let factor = 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * perturb_scale;
                    (b * factor).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

fn snapshot(machine: &NelderMead) -> (Vec<Vec<f64>>, Vec<f64>) {
    let simplex = machine.vertices().to_vec();
    let gold = machine
        .scores()
        .iter()
        .map(|&s| if s.is_finite() { -s } else { f64::NAN })
        .collect();
    (simplex, gold)
}

/// Pure-function search mode: drives the same simplex machinery on a closed
/// -form objective (higher is better), without clamping, caching, or
/// re-perturbation. Stops when the simplex diameter drops below
/// `diameter_tol` or after `max_proposals` evaluations.
pub fn nm_search_direct(
    objective: impl Fn(&[f64]) -> f64,
    initial_vertices: Vec<Vec<f64>>,
    coefficients: NmCoefficients,
    diameter_tol: f64,
    max_proposals: usize,
) -> NmOutcome {
    let mut machine = NelderMead::new(initial_vertices, coefficients);
    let degenerate_init = machine.volume() == 0.0;
    let mut trace = Vec::new();
    while trace.len() < max_proposals {
        if machine.is_initialized() && machine.diameter() <= diameter_tol {
            break;
        }
        let (candidate, phase) = machine.propose();
        let gold = objective(&candidate);
        machine.observe(candidate.clone(), -gold);
        let (simplex, simplex_gold) = snapshot(&machine);
        trace.push(NmTraceRecord {
            proposal_index: trace.len() + 1,
            phase,
            point: candidate,
            gold,
            capped: false,
            cache_hit: false,
            budget_used: 0,
            simplex,
            simplex_gold,
        });
    }
    let (best_point, best_score) = machine.best();
    NmOutcome {
        best_point: best_point.to_vec(),
        best_gold: -best_score,
        trace,
        run_log: None,
        degenerate_init,
    }
}

/// Full threshold search over a warm-started equality-constrained training
/// session.
///
/// The initial simplex perturbs the reference policy's measured channel
/// values. Each candidate is clamped into [0, 1] and evaluated by continuing
/// the session at those thresholds until the measured values converge to
/// them (or the per-evaluation cap of an eighth of the budget runs out),
/// then probing the gold objective. Policy, value heads, multipliers, and
/// random stream all persist across evaluations; cache hits within the
/// elementwise tolerance spend no training steps. The search stops when the
/// budget is exhausted or the simplex diameter falls below the tolerance,
/// re-perturbing around the best vertex if the simplex collapses first.
pub fn nm_search(
    env: &GoodhartSpec,
    train_config: &TrainConfig,
    nm_config: &NmConfig,
) -> Result<NmOutcome, TrainError> {
    let n = env.num_channels();
    let mut session =
        TrainState::new(env, &MethodSpec::xi_ppo(vec![0.5; n]), train_config, nm_config.seed)?;
    // Separate perturbation stream so simplex noise never interacts with the
    // training session's sampling.
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(nm_config.seed ^ 0x517c_c1b7_2722_0a95);
    let base = env.channel_values(
        session.reference().policy(),
        train_config.probe_episodes,
        train_config.probe_seed,
    );
    let mut machine =
        NelderMead::new(init_simplex(&base, nm_config.perturb_scale, &mut perturb_rng), nm_config.coefficients);
    let degenerate_init = machine.volume() == 0.0;
    let mut reference_volume = None;
    let mut reperturbed = false;

    let mut cache = EvalCache::new(nm_config.cache_rel_tol);
    let cap_per_eval = nm_config.total_budget / 8;
    let mut budget_used = 0usize;
    let mut records: Vec<RunRecord> = Vec::new();
    let mut trace: Vec<NmTraceRecord> = Vec::new();
    let mut aborted = None;

    'search: loop {
        if machine.is_initialized() {
            if machine.diameter() <= nm_config.diameter_tol {
                break;
            }
            match reference_volume {
                None => reference_volume = Some(machine.volume()),
                Some(initial) if initial > 0.0 && machine.volume() < 1e-12 * initial => {
                    // Collapsed simplex: re-perturb around the best vertex
                    // (kept exactly as vertex 0, so its cached score is free
                    // to re-observe).
                    let best = machine.best().0.to_vec();
                    let mut vertices =
                        init_simplex(&best, nm_config.perturb_scale, &mut perturb_rng);
                    vertices[0] = best;
                    machine.reset_around(vertices);
                    reference_volume = None;
                    reperturbed = true;
                    continue;
                }
                Some(_) => {}
            }
            if budget_used >= nm_config.total_budget {
                break;
            }
        }

        let (candidate, phase) = machine.propose();
        let phase = if reperturbed && phase == PhaseTag::Init { PhaseTag::Reperturb } else { phase };
        let point: Vec<f64> = candidate.iter().map(|&c| c.clamp(0.0, 1.0)).collect();

        let (gold, capped, cache_hit) = match cache.lookup(&point) {
            Some(score) => (score, false, true),
            None => {
                let method = MethodSpec::xi_ppo(point.clone());
                let mut spent = 0usize;
                let mut capped = false;
                loop {
                    let round_steps = train_config.steps_per_update;
                    if spent + round_steps > cap_per_eval
                        || budget_used + round_steps > nm_config.total_budget
                    {
                        capped = true;
                        break;
                    }
                    let record = match session.run_round(env, &method, train_config, false) {
                        Ok(record) => record,
                        Err(TrainError::NumericalAbort(reason)) => {
                            aborted = Some(reason);
                            break 'search;
                        }
                        Err(e) => return Err(e),
                    };
                    spent += round_steps;
                    budget_used += round_steps;
                    records.push(record);
                    // Convergence is judged on a fixed-seed probe rather than
                    // the round's own sample means: the probe's common random
                    // numbers remove the round-to-round jitter that would
                    // otherwise end evaluations on a lucky draw before the
                    // policy has actually moved.
                    let probed = env.channel_values(
                        session.policy(),
                        train_config.probe_episodes,
                        train_config.probe_seed,
                    );
                    let converged = probed
                        .iter()
                        .zip(&point)
                        .all(|(&v, &t)| (v - t).abs() <= nm_config.converge_tol);
                    if converged {
                        break;
                    }
                }
                let probe =
                    env.probe(session.policy(), train_config.probe_episodes, train_config.probe_seed);
                cache.insert(point.clone(), probe.gold);
                (probe.gold, capped, false)
            }
        };

        machine.observe(point.clone(), -gold);
        let (simplex, simplex_gold) = snapshot(&machine);
        trace.push(NmTraceRecord {
            proposal_index: trace.len() + 1,
            phase,
            point,
            gold,
            capped,
            cache_hit,
            budget_used,
            simplex,
            simplex_gold,
        });
    }

    // The machine may be mid-initialization only if training aborted; fall
    // back to the best scored trace entry in that case.
    let (best_point, best_gold) = if machine.is_initialized() {
        let (point, score) = machine.best();
        (point.to_vec(), -score)
    } else {
        let best = trace
            .iter()
            .max_by(|a, b| a.gold.total_cmp(&b.gold))
            .map(|r| (r.point.clone(), r.gold));
        match best {
            Some((point, gold)) => (point, gold),
            None => (base, f64::NAN),
        }
    };

    Ok(NmOutcome {
        best_point,
        best_gold,
        trace,
        run_log: Some(RunLog { method: MethodKind::XiPpo, records, aborted }),
        degenerate_init,
    })
}
