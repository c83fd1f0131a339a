//! Per-run simulation loop and Monte-Carlo aggregation.
//!
//! One time step executes the sense -> estimate -> control -> actuate cycle
//! entered at the actuation edge: the truth first advances under the
//! control chosen at the previous step, measurements are acquired at the
//! new true states, the estimation layer corrects, and the control layer
//! picks the next displacement. Errors are recorded against the weighted
//! post-correction beliefs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::agent::{AgentId, AgentKind, ControlVec, MeasurementBundle, StateVec, Topology};
use crate::control::{
    conditional_log_tensor, consensus_log_tensors, control_exchange, control_update,
    grad_di_from_tensor, grad_g, sample_future_global, BankSpec, FutureSampleBank, Scheme,
};
use crate::error::Result;
use crate::estimation::{
    censored as is_censored, predict_ca, predict_target, run_spawn, SpawnInputs,
};
use crate::models::{evolve, MeasModel, MotionModel};
use crate::netsim::{CostLedger, Graph, Layer, Primitive, ALL_LAYERS, ALL_PRIMITIVES};
use crate::particles::{
    cov_trace, draw_uniform_prior, kernel_resample, mmse_estimate, resample_schedule,
    systematic_resample, ParticleSet, ResampleKind,
};
use crate::rng::{stream, Purpose, StreamId};

use super::{AgentSpec, ControllerKind, Mode, ScenarioConfig};

/// Immutable per-scenario context shared by all runs.
struct Ctx {
    cfg: ScenarioConfig,
    mobile: Vec<AgentId>,
    targets: Vec<AgentId>,
    anchors: BTreeMap<AgentId, [f64; 2]>,
    specs: BTreeMap<AgentId, AgentSpec>,
    meas: BTreeMap<AgentId, MeasModel>,
    ca_motion: MotionModel,
    target_motion: MotionModel,
    topology: Topology,
    /// Communication graph over `mobile` indices.
    graph: Graph,
}

impl Ctx {
    fn new(cfg: &ScenarioConfig) -> Self {
        let specs: BTreeMap<AgentId, AgentSpec> = cfg
            .agents
            .iter()
            .map(|a| (AgentId(a.id), a.clone()))
            .collect();
        let mobile: Vec<AgentId> = specs
            .values()
            .filter(|a| a.kind == AgentKind::MobileCa)
            .map(|a| AgentId(a.id))
            .collect();
        let targets: Vec<AgentId> = specs
            .values()
            .filter(|a| a.kind == AgentKind::Target)
            .map(|a| AgentId(a.id))
            .collect();
        let anchors: BTreeMap<AgentId, [f64; 2]> = specs
            .values()
            .filter(|a| a.kind == AgentKind::AnchorCa)
            .map(|a| (AgentId(a.id), [a.start[0], a.start[1]]))
            .collect();
        let meas: BTreeMap<AgentId, MeasModel> = mobile
            .iter()
            .map(|&l| {
                let spec = &specs[&l];
                (l, MeasModel::new(cfg.sigma0_2, spec.d0, cfg.kappa))
            })
            .collect();

        // Measurement topology is mode-resolved: cooperative estimation
        // links every CA pair; the noncooperative reference keeps only
        // anchor edges. Targets are measured by all mobile CAs either way.
        let all_cas: Vec<AgentId> = anchors.keys().copied().chain(mobile.iter().copied()).collect();
        let topology = match cfg.mode {
            Mode::Cc | Mode::Cn => Topology::fully_connected(&all_cas, &mobile, &targets),
            Mode::Nc => {
                let mut neigh: BTreeMap<AgentId, BTreeSet<AgentId>> = BTreeMap::new();
                for &a in anchors.keys() {
                    neigh.insert(a, mobile.iter().copied().collect());
                }
                for &l in &mobile {
                    neigh.insert(l, anchors.keys().copied().collect());
                }
                let tsets: BTreeMap<AgentId, BTreeSet<AgentId>> = all_cas
                    .iter()
                    .map(|&l| {
                        let set = if mobile.contains(&l) {
                            targets.iter().copied().collect()
                        } else {
                            BTreeSet::new()
                        };
                        (l, set)
                    })
                    .collect();
                Topology::new(neigh, tsets).expect("anchor star is symmetric")
            }
        };
        let graph = match cfg.mode {
            Mode::Cc | Mode::Cn => Graph::complete(mobile.len()),
            Mode::Nc => Graph::edgeless(mobile.len()),
        };
        Self {
            cfg: cfg.clone(),
            mobile,
            targets,
            anchors,
            specs,
            meas,
            ca_motion: MotionModel::ca_linear(cfg.sigma_q2),
            target_motion: MotionModel::target_cv(cfg.target_sigma_q2),
            topology,
            graph,
        }
    }

    fn mobile_index(&self, l: AgentId) -> usize {
        self.mobile.binary_search(&l).expect("mobile CA id")
    }

    /// Shared-stream key for per-target draws: common across CAs under
    /// cooperative estimation, per-CA in the noncooperative reference.
    fn target_aux(&self, owner: AgentId) -> u32 {
        match self.cfg.mode {
            Mode::Cc | Mode::Cn => 0,
            Mode::Nc => owner.0,
        }
    }
}

struct RunState {
    run: u32,
    time: u32,
    truth: BTreeMap<AgentId, StateVec>,
    /// Post-resampling own beliefs (equal weights).
    own: BTreeMap<AgentId, ParticleSet>,
    /// Post-resampling target beliefs per CA.
    tgt: BTreeMap<AgentId, BTreeMap<AgentId, ParticleSet>>,
    /// Control applied at the next actuation.
    next_u: BTreeMap<AgentId, ControlVec>,
    headings: BTreeMap<AgentId, ControlVec>,
    /// Resample phase counters keyed by (owner, subject), started at the
    /// belief's first informative update.
    phases: BTreeMap<(AgentId, AgentId), u32>,
    ledger: CostLedger,
    last_snapshot: Vec<u64>,
    clamped: u64,
    grad_invocations: u64,
}

/// Everything one run contributes to the aggregate metrics.
struct RunOutput {
    self_err: Vec<Vec<f64>>,
    target_err: Vec<Vec<f64>>,
    traj: Vec<(u32, AgentId, StateVec)>,
    cost: Vec<(u32, usize, Layer, Primitive, u64)>,
    clamped: u64,
    grad_invocations: u64,
}

fn init_run(ctx: &Ctx, run: u32) -> Result<RunState> {
    let cfg = &ctx.cfg;
    let truth: BTreeMap<AgentId, StateVec> = ctx
        .specs
        .values()
        .map(|a| (AgentId(a.id), StateVec::new(&a.start).unwrap()))
        .collect();

    let mut own = BTreeMap::new();
    for &l in &ctx.mobile {
        let mut rng = stream(cfg.seed, StreamId::new(run, l.0, Purpose::Init, 0));
        own.insert(
            l,
            draw_uniform_prior(cfg.j_est, cfg.prior_min, cfg.prior_max, &mut rng)?,
        );
    }

    let mut tgt: BTreeMap<AgentId, BTreeMap<AgentId, ParticleSet>> =
        ctx.mobile.iter().map(|&l| (l, BTreeMap::new())).collect();
    for &l in &ctx.mobile {
        for &m in &ctx.targets {
            let mut rng = stream(
                cfg.seed,
                StreamId::new(run, m.0, Purpose::Init, 0).with_aux(ctx.target_aux(l)),
            );
            let sd = cfg.target_vel_prior_var.sqrt();
            let samples: Vec<StateVec> = (0..cfg.j_est)
                .map(|_| {
                    let x = rng.random_range(cfg.prior_min[0]..cfg.prior_max[0]);
                    let y = rng.random_range(cfg.prior_min[1]..cfg.prior_max[1]);
                    let vx = cfg.target_vel_prior_mean[0]
                        + sd * rng.sample::<f64, _>(StandardNormal);
                    let vy = cfg.target_vel_prior_mean[1]
                        + sd * rng.sample::<f64, _>(StandardNormal);
                    StateVec::from([x, y, vx, vy])
                })
                .collect();
            tgt.get_mut(&l)
                .unwrap()
                .insert(m, ParticleSet::equal_weights(samples)?);
        }
    }

    let mut next_u = BTreeMap::new();
    let mut headings = BTreeMap::new();
    for &l in &ctx.mobile {
        let spec = &ctx.specs[&l];
        let mut rng = stream(cfg.seed, StreamId::new(run, l.0, Purpose::Heading, 0));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let heading = ControlVec([spec.u_max * theta.cos(), spec.u_max * theta.sin()]);
        headings.insert(l, heading);
        let fixed = cfg.mode == Mode::Cn || spec.controller == ControllerKind::FixedHeading;
        next_u.insert(l, if fixed { heading } else { ControlVec::ZERO });
    }

    let n_mobile = ctx.mobile.len();
    Ok(RunState {
        run,
        time: 0,
        truth,
        own,
        tgt,
        next_u,
        headings,
        phases: BTreeMap::new(),
        ledger: CostLedger::new(n_mobile),
        last_snapshot: vec![0; n_mobile * 6],
        clamped: 0,
        grad_invocations: 0,
    })
}

fn gaussian2<R: rand::Rng>(rng: &mut R, sd: f64) -> [f64; 2] {
    [
        sd * rng.sample::<f64, _>(StandardNormal),
        sd * rng.sample::<f64, _>(StandardNormal),
    ]
}

fn resample_belief(
    ctx: &Ctx,
    belief: &ParticleSet,
    phase: u32,
    sid: StreamId,
) -> ParticleSet {
    let t = cov_trace(belief);
    let mut rng = stream(ctx.cfg.seed, sid);
    match resample_schedule(t, phase) {
        ResampleKind::Kernel => kernel_resample(belief, ctx.cfg.sigma0_2, &mut rng),
        ResampleKind::Systematic => systematic_resample(belief, &mut rng),
    }
}

/// Selects `j_ctl` samples without replacement via a partial shuffle.
fn subsample_indices<R: rand::Rng>(n: usize, take: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take.min(n) {
        let k = i + rng.random_range(0..n - i);
        idx.swap(i, k);
    }
    idx.truncate(take.min(n));
    idx
}

/// Builds the anchor-only objective bank for one CA: the own state against
/// the nearest-listed anchor measurement. Used for censored CAs and for the
/// noncooperative controller.
fn anchor_only_bank(ctx: &Ctx, state: &RunState, l: AgentId, n: u32) -> Result<FutureSampleBank> {
    let cfg = &ctx.cfg;
    let mut rng = stream(
        cfg.seed,
        StreamId::new(state.run, l.0, Purpose::ControlSubsample, n),
    );
    let own = &state.own[&l];
    let idx = subsample_indices(own.len(), cfg.j_ctl, &mut rng);
    let samples: Vec<[f64; 2]> = idx.iter().map(|&i| own.sample(i).pos()).collect();
    let anchor = *ctx.anchors.keys().next().expect("scenario has an anchor");
    let anchors: BTreeMap<_, _> = [(anchor, ctx.anchors[&anchor])].into_iter().collect();
    let ca_samples: BTreeMap<_, _> = [(l, samples)].into_iter().collect();
    let u_ref: BTreeMap<_, _> = [(l, ControlVec::ZERO)].into_iter().collect();
    let motion: BTreeMap<_, _> = [(l, ctx.ca_motion.clone())].into_iter().collect();
    let meas: BTreeMap<_, _> = [(l, ctx.meas[&l])].into_iter().collect();
    let targets = BTreeMap::new();
    sample_future_global(&BankSpec {
        cas: std::slice::from_ref(&l),
        anchors: &anchors,
        pairs: &[(l, anchor)],
        ca_samples: &ca_samples,
        target_plus: &targets,
        u_ref: &u_ref,
        motion: &motion,
        meas: &meas,
        j_prime: cfg.j_prime,
        seed: cfg.seed,
        run: state.run,
        time: n,
    })
}

/// Builds the shared cooperative bank over the non-censored info-seeking
/// CAs, with target samples predicted one step ahead on common streams.
fn cooperative_bank(
    ctx: &Ctx,
    state: &RunState,
    group: &[AgentId],
    n: u32,
) -> Result<FutureSampleBank> {
    let cfg = &ctx.cfg;
    let mut ca_samples = BTreeMap::new();
    for &l in group {
        let mut rng = stream(
            cfg.seed,
            StreamId::new(state.run, l.0, Purpose::ControlSubsample, n),
        );
        let own = &state.own[&l];
        let idx = subsample_indices(own.len(), cfg.j_ctl, &mut rng);
        ca_samples.insert(l, idx.iter().map(|&i| own.sample(i).pos()).collect::<Vec<_>>());
    }
    let mut target_plus = BTreeMap::new();
    let lead = group[0];
    for &m in &ctx.targets {
        let mut rng = stream(
            cfg.seed,
            StreamId::new(state.run, m.0, Purpose::ControlSubsample, n)
                .with_aux(ctx.target_aux(lead)),
        );
        let belief = &state.tgt[&lead][&m];
        let idx = subsample_indices(belief.len(), cfg.j_ctl, &mut rng);
        let mut prng = stream(
            cfg.seed,
            StreamId::new(state.run, m.0, Purpose::ControlTargetPredict, n)
                .with_aux(ctx.target_aux(lead)),
        );
        let plus: Vec<StateVec> = idx
            .iter()
            .map(|&i| {
                evolve(
                    &ctx.target_motion,
                    belief.sample(i),
                    ControlVec::ZERO,
                    &ctx.target_motion.draw_noise(&mut prng),
                )
            })
            .collect::<Result<_>>()?;
        target_plus.insert(m, plus);
    }
    let mut pairs = Vec::new();
    for &l in group {
        let (neigh, tset) = ctx.topology.neighbors_of(l)?;
        for &k in neigh {
            if ctx.anchors.contains_key(&k) || group.contains(&k) {
                pairs.push((l, k));
            }
        }
        for &m in tset {
            pairs.push((l, m));
        }
    }
    pairs.sort_unstable();
    let u_ref: BTreeMap<_, _> = group.iter().map(|&l| (l, ControlVec::ZERO)).collect();
    let motion: BTreeMap<_, _> = group.iter().map(|&l| (l, ctx.ca_motion.clone())).collect();
    let meas: BTreeMap<_, _> = group.iter().map(|&l| (l, ctx.meas[&l])).collect();
    sample_future_global(&BankSpec {
        cas: group,
        anchors: &ctx.anchors,
        pairs: &pairs,
        ca_samples: &ca_samples,
        target_plus: &target_plus,
        u_ref: &u_ref,
        motion: &motion,
        meas: &meas,
        j_prime: cfg.j_prime,
        seed: cfg.seed,
        run: state.run,
        time: n,
    })
}

/// Advances the run by one time step; returns per-step errors.
fn step(ctx: &Ctx, state: &mut RunState) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = &ctx.cfg;
    let n = state.time + 1;

    // Actuate: anchors never move; mobiles apply the pending control with
    // fresh process noise; targets drift.
    for &l in &ctx.mobile {
        let mut rng = stream(cfg.seed, StreamId::new(state.run, l.0, Purpose::TrueProcessNoise, n));
        let q = gaussian2(&mut rng, cfg.sigma_q2.sqrt());
        let x = evolve(&ctx.ca_motion, &state.truth[&l], state.next_u[&l], &q)?;
        state.truth.insert(l, x);
    }
    for &m in &ctx.targets {
        let mut rng = stream(cfg.seed, StreamId::new(state.run, m.0, Purpose::TrueTargetNoise, n));
        let q = gaussian2(&mut rng, cfg.target_sigma_q2.sqrt());
        let x = evolve(&ctx.target_motion, &state.truth[&m], ControlVec::ZERO, &q)?;
        state.truth.insert(m, x);
    }

    // Sense at the new true states.
    let mut bundle = MeasurementBundle::new();
    for &l in &ctx.mobile {
        let (neigh, tset) = ctx.topology.neighbors_of(l)?;
        for &k in neigh.iter().chain(tset.iter()) {
            let mut rng = stream(
                cfg.seed,
                StreamId::new(state.run, l.0, Purpose::MeasNoise, n).with_aux(k.0),
            );
            bundle.insert(l, k, ctx.meas[&l].measure(&state.truth[&l], &state.truth[&k], &mut rng));
        }
    }

    // Censor set from the step-start beliefs; it gates partner selection,
    // target observation, and the control objective for this whole step.
    let censored: BTreeSet<AgentId> = ctx
        .mobile
        .iter()
        .copied()
        .filter(|l| is_censored(&state.own[l]))
        .collect();

    // Estimation: prediction.
    let mut predicted_ca: BTreeMap<AgentId, ParticleSet> = BTreeMap::new();
    for (&a, &pos) in &ctx.anchors {
        predicted_ca.insert(a, ParticleSet::point_mass(StateVec::from(pos)));
    }
    for &l in &ctx.mobile {
        let mut rng = stream(cfg.seed, StreamId::new(state.run, l.0, Purpose::PredictCa, n));
        predicted_ca.insert(l, predict_ca(&ctx.ca_motion, &state.own[&l], state.next_u[&l], &mut rng)?);
    }

    // Correction, grouped by consensus membership.
    let groups: Vec<Vec<AgentId>> = match cfg.mode {
        Mode::Cc | Mode::Cn => vec![ctx.mobile.clone()],
        Mode::Nc => ctx.mobile.iter().map(|&l| vec![l]).collect(),
    };
    let mut corrected_own: BTreeMap<AgentId, ParticleSet> = BTreeMap::new();
    let mut corrected_tgt: BTreeMap<AgentId, BTreeMap<AgentId, ParticleSet>> = BTreeMap::new();
    for group in &groups {
        let mut predicted_targets = BTreeMap::new();
        for &m in &ctx.targets {
            let mut rng = stream(
                cfg.seed,
                StreamId::new(state.run, m.0, Purpose::PredictTarget, n)
                    .with_aux(ctx.target_aux(group[0])),
            );
            predicted_targets.insert(
                m,
                predict_target(&ctx.target_motion, &state.tgt[&group[0]][&m], &mut rng)?,
            );
        }
        let graph = match cfg.mode {
            Mode::Cc | Mode::Cn => ctx.graph.clone(),
            Mode::Nc => Graph::edgeless(1),
        };
        let mut group_ledger = CostLedger::new(group.len());
        let out = run_spawn(
            &SpawnInputs {
                topology: &ctx.topology,
                meas: &ctx.meas,
                measurements: &bundle,
                predicted_ca: &predicted_ca,
                predicted_targets: &predicted_targets,
                censored: &censored,
                mobile: group,
                graph: &graph,
                consensus_iters: cfg.consensus_iters,
                bp_iters: cfg.bp_iters,
            },
            &mut group_ledger,
        )?;
        let index_map: Vec<usize> = group.iter().map(|&l| ctx.mobile_index(l)).collect();
        state.ledger.absorb(&group_ledger, &index_map);
        corrected_own.extend(out.ca_beliefs);
        corrected_tgt.extend(out.target_beliefs);
    }

    // Errors against the weighted post-correction beliefs.
    let self_err: Vec<f64> = ctx
        .mobile
        .iter()
        .map(|l| {
            let est = mmse_estimate(&corrected_own[l]).pos();
            let t = state.truth[l].pos();
            (est[0] - t[0]).hypot(est[1] - t[1])
        })
        .collect();
    let mut target_err = Vec::new();
    for &l in &ctx.mobile {
        for &m in &ctx.targets {
            let est = mmse_estimate(&corrected_tgt[&l][&m]).pos();
            let t = state.truth[&m].pos();
            target_err.push((est[0] - t[0]).hypot(est[1] - t[1]));
        }
    }

    // Resampling on the per-belief phase schedule.
    for &l in &ctx.mobile {
        let phase = state.phases.entry((l, l)).and_modify(|p| *p += 1).or_insert(1);
        let sid = StreamId::new(state.run, l.0, Purpose::Resample, n);
        state
            .own
            .insert(l, resample_belief(ctx, &corrected_own[&l], *phase, sid));
    }
    for &m in &ctx.targets {
        let any_observer = ctx
            .topology
            .observers_of(m)?
            .iter()
            .any(|l| !censored.contains(l));
        for &l in &ctx.mobile {
            let informative = match cfg.mode {
                Mode::Cc | Mode::Cn => any_observer,
                Mode::Nc => !censored.contains(&l),
            };
            if !informative && !state.phases.contains_key(&(l, m)) {
                state.tgt.get_mut(&l).unwrap().insert(m, corrected_tgt[&l][&m].clone());
                continue;
            }
            let phase = state.phases.entry((l, m)).and_modify(|p| *p += 1).or_insert(1);
            let sid = StreamId::new(state.run, m.0, Purpose::Resample, n)
                .with_aux(ctx.target_aux(l));
            let resampled = resample_belief(ctx, &corrected_tgt[&l][&m], *phase, sid);
            state.tgt.get_mut(&l).unwrap().insert(m, resampled);
        }
    }

    // Control: pick u for the next actuation.
    let mut next_u = BTreeMap::new();
    let coop_group: Vec<AgentId> = ctx
        .mobile
        .iter()
        .copied()
        .filter(|l| {
            cfg.mode == Mode::Cc
                && ctx.specs[l].controller == ControllerKind::InfoSeeking
                && !censored.contains(l)
        })
        .collect();
    let coop_tensors = if coop_group.is_empty() {
        None
    } else {
        let bank = cooperative_bank(ctx, state, &coop_group, n)?;
        let sub = Graph::complete(coop_group.len());
        let mut group_ledger = CostLedger::new(coop_group.len());
        control_exchange(&bank, cfg.scheme, &sub, &mut group_ledger)?;
        let tensors = match cfg.scheme {
            Scheme::Flooding => {
                let shared = conditional_log_tensor(&bank);
                coop_group.iter().map(|_| shared.clone()).collect()
            }
            Scheme::Consensus => {
                consensus_log_tensors(&bank, &sub, cfg.consensus_iters, &mut group_ledger)
            }
        };
        let index_map: Vec<usize> = coop_group.iter().map(|&l| ctx.mobile_index(l)).collect();
        state.ledger.absorb(&group_ledger, &index_map);
        Some((bank, tensors))
    };
    for &l in &ctx.mobile {
        let spec = &ctx.specs[&l];
        let fixed = cfg.mode == Mode::Cn || spec.controller == ControllerKind::FixedHeading;
        if fixed {
            next_u.insert(l, state.headings[&l]);
            continue;
        }
        let grad_di = if let Some(pos) = coop_group.iter().position(|&g| g == l) {
            let (bank, tensors) = coop_tensors.as_ref().unwrap();
            state.grad_invocations += 1;
            let g = grad_di_from_tensor(bank, &ctx.ca_motion, l, &tensors[pos])?;
            state.clamped += g.clamped;
            g.grad
        } else {
            // Not yet localized, or the noncooperative reference: the
            // objective reduces to the own state against the own anchor
            // measurement.
            let bank = anchor_only_bank(ctx, state, l, n)?;
            state.grad_invocations += 1;
            let g = grad_di_from_tensor(&bank, &ctx.ca_motion, l, &conditional_log_tensor(&bank))?;
            state.clamped += g.clamped;
            g.grad
        };
        let gg = grad_g(&ctx.ca_motion, &state.own[&l], ControlVec::ZERO)?;
        next_u.insert(l, control_update(grad_di, gg, ControlVec::ZERO, spec.u_max));
    }

    state.next_u = next_u;
    state.time = n;
    Ok((self_err, target_err))
}

fn ledger_snapshot(ledger: &CostLedger, n_mobile: usize) -> Vec<u64> {
    let mut snap = Vec::with_capacity(n_mobile * 6);
    for ca in 0..n_mobile {
        for &layer in &ALL_LAYERS {
            for &prim in &ALL_PRIMITIVES {
                snap.push(ledger.get(ca, layer, prim));
            }
        }
    }
    snap
}

fn run_one(ctx: &Ctx, run: u32) -> Result<RunOutput> {
    let mut state = init_run(ctx, run)?;
    let n_mobile = ctx.mobile.len();
    let mut out = RunOutput {
        self_err: Vec::with_capacity(ctx.cfg.n_steps as usize),
        target_err: Vec::with_capacity(ctx.cfg.n_steps as usize),
        traj: Vec::new(),
        cost: Vec::new(),
        clamped: 0,
        grad_invocations: 0,
    };
    for (&a, x) in &state.truth {
        out.traj.push((0, a, *x));
    }
    for _ in 0..ctx.cfg.n_steps {
        let (se, te) = step(ctx, &mut state)?;
        out.self_err.push(se);
        out.target_err.push(te);
        for (&a, x) in &state.truth {
            out.traj.push((state.time, a, *x));
        }
        let snap = ledger_snapshot(&state.ledger, n_mobile);
        for ca in 0..n_mobile {
            for (li, &layer) in ALL_LAYERS.iter().enumerate() {
                for (pi, &prim) in ALL_PRIMITIVES.iter().enumerate() {
                    let idx = ca * 6 + li * 3 + pi;
                    let delta = snap[idx] - state.last_snapshot[idx];
                    out.cost.push((state.time, ca, layer, prim, delta));
                }
            }
        }
        state.last_snapshot = snap;
    }
    out.clamped = state.clamped;
    out.grad_invocations = state.grad_invocations;
    Ok(out)
}

/// Aggregated result of `n_runs` independent seeded runs.
pub struct RunMetrics {
    pub n_steps: u32,
    pub n_runs: u32,
    pub mobile: Vec<AgentId>,
    pub targets: Vec<AgentId>,
    /// Sum over runs of squared self-localization errors, `[step][mobile]`.
    pub self_sq_sum: Vec<Vec<f64>>,
    /// Sum over runs, CAs, and targets of squared target errors, `[step]`.
    pub target_sq_sum: Vec<f64>,
    /// Per-run squared self errors, `[run][step][mobile]`.
    pub per_run_self_sq: Vec<Vec<Vec<f64>>>,
    /// True trajectories: `(run, n, agent, state)`.
    pub trajectories: Vec<(u32, u32, AgentId, StateVec)>,
    /// Reals transmitted, summed over runs, keyed `(n, mobile index,
    /// layer, primitive)`.
    pub cost_sum: BTreeMap<(u32, usize, Layer, Primitive), u64>,
    /// Gradient terms skipped for non-finite log ratios, summed over runs.
    pub clamped: u64,
    /// Information-seeking gradient evaluations, summed over runs.
    pub grad_invocations: u64,
}

impl RunMetrics {
    /// Self-localization RMSE over mobile CAs and runs at time `n` (1-based).
    pub fn self_rmse(&self, n: u32) -> f64 {
        let row = &self.self_sq_sum[(n - 1) as usize];
        let total: f64 = row.iter().sum();
        (total / (self.n_runs as f64 * self.mobile.len() as f64)).sqrt()
    }

    /// Per-CA self-localization RMSE at time `n`.
    pub fn self_rmse_ca(&self, n: u32, l: AgentId) -> f64 {
        let idx = self.mobile.binary_search(&l).expect("mobile CA id");
        (self.self_sq_sum[(n - 1) as usize][idx] / self.n_runs as f64).sqrt()
    }

    /// Target-localization RMSE over CAs' estimates and runs at time `n`.
    pub fn target_rmse(&self, n: u32) -> Option<f64> {
        if self.targets.is_empty() {
            return None;
        }
        let count = self.n_runs as f64 * self.mobile.len() as f64 * self.targets.len() as f64;
        Some((self.target_sq_sum[(n - 1) as usize] / count).sqrt())
    }
}

/// Runs `n_runs` independent seeded runs and aggregates their metrics.
/// Deterministic for a fixed `(config, seed)`: runs draw from disjoint
/// streams and the reduction happens in run order whether or not the runs
/// execute in parallel.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let ctx = Ctx::new(cfg);
    let outputs: Vec<Result<RunOutput>> = if cfg.parallel {
        (0..cfg.n_runs)
            .into_par_iter()
            .map(|run| run_one(&ctx, run))
            .collect()
    } else {
        (0..cfg.n_runs).map(|run| run_one(&ctx, run)).collect()
    };

    let steps = cfg.n_steps as usize;
    let mut metrics = RunMetrics {
        n_steps: cfg.n_steps,
        n_runs: cfg.n_runs,
        mobile: ctx.mobile.clone(),
        targets: ctx.targets.clone(),
        self_sq_sum: vec![vec![0.0; ctx.mobile.len()]; steps],
        target_sq_sum: vec![0.0; steps],
        per_run_self_sq: Vec::with_capacity(cfg.n_runs as usize),
        trajectories: Vec::new(),
        cost_sum: BTreeMap::new(),
        clamped: 0,
        grad_invocations: 0,
    };
    for (run, out) in outputs.into_iter().enumerate() {
        let out = out?;
        let mut run_self = Vec::with_capacity(steps);
        for (s, row) in out.self_err.iter().enumerate() {
            let sq: Vec<f64> = row.iter().map(|e| e * e).collect();
            for (acc, v) in metrics.self_sq_sum[s].iter_mut().zip(&sq) {
                *acc += v;
            }
            run_self.push(sq);
            for e in &out.target_err[s] {
                metrics.target_sq_sum[s] += e * e;
            }
        }
        metrics.per_run_self_sq.push(run_self);
        for (n, a, x) in out.traj {
            metrics.trajectories.push((run as u32, n, a, x));
        }
        for (n, ca, layer, prim, delta) in out.cost {
            *metrics.cost_sum.entry((n, ca, layer, prim)).or_insert(0) += delta;
        }
        metrics.clamped += out.clamped;
        metrics.grad_invocations += out.grad_invocations;
    }
    Ok(metrics)
}
