//! Estimation layer: per-CA prediction, SPAWN belief-propagation correction
//! with consensus-aggregated target updates, censoring, and the two
//! degenerate estimators (local states only, global states only).
//!
//! Within one time step the layer runs as synchronous rounds: every CA reads
//! iteration-`p-1` beliefs, then every CA writes its iteration-`p` result.
//! All belief products are taken in the log domain.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::agent::{AgentId, ControlVec, MeasurementBundle, StateVec, Topology};
use crate::error::{Error, Result};
use crate::models::{evolve, MeasModel, MotionModel};
use crate::netsim::{average_consensus, CostLedger, Graph, Layer, Primitive};
use crate::particles::{cov_trace, ParticleSet};

/// Covariance-trace threshold above which a CA counts as not localized.
/// The boundary itself is censored.
pub const CENSOR_TRACE: f64 = 10.0;

/// True iff the CA is excluded as a localization partner and from target
/// localization.
pub fn censored(own_belief: &ParticleSet) -> bool {
    cov_trace(own_belief) >= CENSOR_TRACE
}

/// Propagates every sample through the state evolution with a fresh noise
/// draw; weights are preserved.
pub fn predict_ca<R: Rng>(
    model: &MotionModel,
    p: &ParticleSet,
    u: ControlVec,
    rng: &mut R,
) -> Result<ParticleSet> {
    let samples = p
        .samples()
        .iter()
        .map(|x| evolve(model, x, u, &model.draw_noise(rng)))
        .collect::<Result<Vec<_>>>()?;
    ParticleSet::from_normalized(samples, p.weights().to_vec())
}

/// Target-state prediction: [`predict_ca`] with zero control.
pub fn predict_target<R: Rng>(
    model: &MotionModel,
    p: &ParticleSet,
    rng: &mut R,
) -> Result<ParticleSet> {
    predict_ca(model, p, ControlVec::ZERO, rng)
}

/// Monte-Carlo BP message value at one receiver point:
/// `Σ_j w_j f(y | x_l, sender_j)`.
pub fn bp_message_from_belief(
    meas: &MeasModel,
    y: f64,
    sender: &ParticleSet,
    x_l: &StateVec,
) -> f64 {
    sender
        .samples()
        .iter()
        .zip(sender.weights())
        .map(|(s, &w)| w * meas.likelihood(y, x_l, s))
        .sum()
}

/// Message values over a whole receiver sample set, with explicit sender
/// weights (a belief or an extrinsic-information vector).
fn message_values(
    meas: &MeasModel,
    y: f64,
    sender_samples: &[StateVec],
    sender_weights: &[f64],
    receivers: &[StateVec],
    evals: &mut u64,
) -> Vec<f64> {
    *evals += (sender_samples.len() * receivers.len()) as u64;
    receivers
        .iter()
        .map(|r| {
            let [rx, ry] = r.pos();
            let mut acc = 0.0;
            for (s, &w) in sender_samples.iter().zip(sender_weights) {
                let [sx, sy] = s.pos();
                let d = ((rx - sx).powi(2) + (ry - sy).powi(2)).sqrt();
                acc += w * meas.log_pdf_at(y, d).exp();
            }
            acc
        })
        .collect()
}

/// One CA belief correction: reweights the predicted samples by the product
/// of the given per-sample message vectors, in the log domain.
pub fn bp_update_ca(predicted: &ParticleSet, messages: &[Vec<f64>]) -> Result<ParticleSet> {
    let mut lw: Vec<f64> = predicted.weights().iter().map(|w| w.ln()).collect();
    for msg in messages {
        if msg.len() != lw.len() {
            return Err(Error::MismatchedSampleCounts(lw.len(), msg.len()));
        }
        for (l, &m) in lw.iter_mut().zip(msg) {
            *l += m.ln();
        }
    }
    let weights = normalize_log_weights(&lw)?;
    predicted.reweighted(weights)
}

fn normalize_log_weights(lw: &[f64]) -> Result<Vec<f64>> {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::BeliefDiverged);
    }
    Ok(lw.iter().map(|&l| (l - max).exp()).collect())
}

/// Distributed target-belief correction.
///
/// Every participant supplies per-sample log message values on the same
/// sample set (zeros for participants that do not observe the target). An
/// average consensus over the communication graph reconstructs the
/// network-wide sum as `participants x average`, which each participant
/// exponentiates onto the predicted weights. Returns one corrected belief
/// per participant; they coincide when the consensus is exact.
pub fn bp_update_target(
    predicted: &ParticleSet,
    participant_logs: &[Vec<f64>],
    graph: &Graph,
    consensus_iters: usize,
    ledger: &mut CostLedger,
) -> Result<Vec<ParticleSet>> {
    let j = predicted.len();
    for logs in participant_logs {
        if logs.len() != j {
            return Err(Error::MismatchedSampleCounts(j, logs.len()));
        }
    }
    let scale = participant_logs.len() as f64;
    let means = average_consensus(
        graph,
        participant_logs,
        consensus_iters,
        Layer::Estimation,
        ledger,
    );
    means
        .into_iter()
        .map(|mean| {
            let lw: Vec<f64> = predicted
                .weights()
                .iter()
                .zip(&mean)
                .map(|(w, &m)| w.ln() + scale * m)
                .collect();
            predicted.reweighted(normalize_log_weights(&lw)?)
        })
        .collect()
}

/// Extrinsic information: `ψ_j = belief_j / max(incoming_j, eps)`,
/// renormalized. The floor is relative to the largest incoming value and
/// only guards against exact zeros from underflow.
pub fn extrinsic_info(belief_w: &[f64], incoming: &[f64]) -> Vec<f64> {
    assert_eq!(belief_w.len(), incoming.len());
    let max_inc = incoming.iter().copied().fold(0.0, f64::max);
    if max_inc <= 0.0 {
        let sum: f64 = belief_w.iter().sum();
        return belief_w.iter().map(|w| w / sum).collect();
    }
    let ln_floor = max_inc.ln() + 1e-300f64.ln();
    let lw: Vec<f64> = belief_w
        .iter()
        .zip(incoming)
        .map(|(&b, &m)| b.ln() - m.ln().max(ln_floor))
        .collect();
    let w = normalize_log_weights(&lw).expect("finite belief weights");
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Inputs to one time step of the SPAWN correction.
pub struct SpawnInputs<'a> {
    pub topology: &'a Topology,
    /// Measurement model of each measuring CA.
    pub meas: &'a BTreeMap<AgentId, MeasModel>,
    pub measurements: &'a MeasurementBundle,
    /// Predicted belief of every CA; anchors as point masses.
    pub predicted_ca: &'a BTreeMap<AgentId, ParticleSet>,
    /// Predicted target beliefs on the common sample sets.
    pub predicted_targets: &'a BTreeMap<AgentId, ParticleSet>,
    /// CAs excluded as partners and from target localization this step.
    pub censored: &'a BTreeSet<AgentId>,
    /// Mobile CAs in ascending id order; consensus participants.
    pub mobile: &'a [AgentId],
    /// Communication graph over `mobile` indices.
    pub graph: &'a Graph,
    pub consensus_iters: usize,
    /// Number of message passing iterations `P`.
    pub bp_iters: usize,
}

/// Output beliefs (still weighted; resampling is the caller's move) and
/// complexity counters.
pub struct SpawnOutput {
    pub ca_beliefs: BTreeMap<AgentId, ParticleSet>,
    /// Per participant, per target.
    pub target_beliefs: BTreeMap<AgentId, BTreeMap<AgentId, ParticleSet>>,
    pub stats: SpawnStats,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SpawnStats {
    /// Pairwise likelihood evaluations performed.
    pub likelihood_evals: u64,
}

/// Runs `P` synchronous SPAWN iterations of the correction step.
///
/// CA-CA edges exchange full beliefs; CA-target edges exchange extrinsic
/// information, with the per-sample target-weight products fused across
/// observers by average consensus.
pub fn run_spawn(inp: &SpawnInputs, ledger: &mut CostLedger) -> Result<SpawnOutput> {
    assert!(inp.bp_iters >= 1);
    assert!(inp.mobile.windows(2).all(|w| w[0] < w[1]));
    let mut stats = SpawnStats::default();

    let usable = |l: AgentId| !inp.censored.contains(&l);

    // Iteration state, all on the fixed predicted sample supports.
    let mut b_ca: BTreeMap<AgentId, ParticleSet> = inp.predicted_ca.clone();
    let mut b_tgt: BTreeMap<AgentId, BTreeMap<AgentId, ParticleSet>> = inp
        .mobile
        .iter()
        .map(|&l| (l, inp.predicted_targets.clone()))
        .collect();
    // Extrinsic information per (CA, target) edge, initialized to the
    // respective predicted weights.
    let mut psi_t2c: BTreeMap<(AgentId, AgentId), Vec<f64>> = BTreeMap::new();
    let mut psi_c2t: BTreeMap<(AgentId, AgentId), Vec<f64>> = BTreeMap::new();
    for &l in inp.mobile {
        let (_, targets) = inp.topology.neighbors_of(l)?;
        for &m in targets {
            let tp = inp
                .predicted_targets
                .get(&m)
                .ok_or(Error::UnknownAgent(m))?;
            psi_t2c.insert((l, m), tp.weights().to_vec());
            psi_c2t.insert(
                (l, m),
                inp.predicted_ca
                    .get(&l)
                    .ok_or(Error::UnknownAgent(l))?
                    .weights()
                    .to_vec(),
            );
        }
    }

    for _p in 1..=inp.bp_iters {
        // Belief broadcast to neighbors: (dim + 1) * J reals per mobile CA
        // with at least one communication partner.
        for (idx, &l) in inp.mobile.iter().enumerate() {
            if inp.graph.degree(idx) > 0 {
                let b = &b_ca[&l];
                ledger.charge(
                    idx,
                    Layer::Estimation,
                    Primitive::Neighbor,
                    ((b.dim() + 1) * b.len()) as u64,
                );
            }
        }

        // CA updates read iteration p-1 beliefs.
        let mut new_b_ca = BTreeMap::new();
        let mut t2c_msgs: BTreeMap<(AgentId, AgentId), Vec<f64>> = BTreeMap::new();
        for &l in inp.mobile {
            let (neigh, targets) = inp.topology.neighbors_of(l)?;
            let meas = inp.meas.get(&l).ok_or(Error::UnknownAgent(l))?;
            let predicted = &inp.predicted_ca[&l];
            let mut messages = Vec::new();
            for &lp in neigh {
                if !usable(lp) {
                    continue;
                }
                let y = inp.measurements.get(l, lp)?;
                let sender = b_ca.get(&lp).ok_or(Error::UnknownAgent(lp))?;
                messages.push(message_values(
                    meas,
                    y,
                    sender.samples(),
                    sender.weights(),
                    predicted.samples(),
                    &mut stats.likelihood_evals,
                ));
            }
            if usable(l) {
                for &m in targets {
                    let y = inp.measurements.get(l, m)?;
                    let tp = &inp.predicted_targets[&m];
                    let msg = message_values(
                        meas,
                        y,
                        tp.samples(),
                        &psi_t2c[&(l, m)],
                        predicted.samples(),
                        &mut stats.likelihood_evals,
                    );
                    t2c_msgs.insert((l, m), msg.clone());
                    messages.push(msg);
                }
            }
            new_b_ca.insert(l, bp_update_ca(predicted, &messages)?);
        }

        // Target updates: per-sample log products fused across observers.
        let mut c2t_msgs: BTreeMap<(AgentId, AgentId), Vec<f64>> = BTreeMap::new();
        for m in inp.topology.targets().collect::<Vec<_>>() {
            let tp = &inp.predicted_targets[&m];
            let observers = inp.topology.observers_of(m)?;
            let logs: Vec<Vec<f64>> = inp
                .mobile
                .iter()
                .map(|&l| {
                    if !observers.contains(&l) || !usable(l) {
                        return Ok(vec![0.0; tp.len()]);
                    }
                    let y = inp.measurements.get(l, m)?;
                    let sender = &inp.predicted_ca[&l];
                    let msg = message_values(
                        inp.meas.get(&l).ok_or(Error::UnknownAgent(l))?,
                        y,
                        sender.samples(),
                        &psi_c2t[&(l, m)],
                        tp.samples(),
                        &mut stats.likelihood_evals,
                    );
                    let logs = msg.iter().map(|v| v.ln()).collect();
                    c2t_msgs.insert((l, m), msg);
                    Ok(logs)
                })
                .collect::<Result<_>>()?;
            let updated = bp_update_target(tp, &logs, inp.graph, inp.consensus_iters, ledger)?;
            for (&l, belief) in inp.mobile.iter().zip(updated) {
                b_tgt.get_mut(&l).unwrap().insert(m, belief);
            }
        }

        // Extrinsic-information recursion on the active CA-target edges.
        for &l in inp.mobile {
            if !usable(l) {
                continue;
            }
            let (_, targets) = inp.topology.neighbors_of(l)?;
            for &m in targets {
                let phi = &c2t_msgs[&(l, m)];
                psi_t2c.insert((l, m), extrinsic_info(b_tgt[&l][&m].weights(), phi));
                let incoming = &t2c_msgs[&(l, m)];
                psi_c2t.insert((l, m), extrinsic_info(new_b_ca[&l].weights(), incoming));
            }
        }

        for (l, belief) in new_b_ca {
            b_ca.insert(l, belief);
        }
    }

    let ca_beliefs = inp
        .mobile
        .iter()
        .map(|l| (*l, b_ca.remove(l).unwrap()))
        .collect();
    Ok(SpawnOutput {
        ca_beliefs,
        target_beliefs: b_tgt,
        stats,
    })
}

/// [`run_spawn`] for networks without targets; the target machinery is a
/// no-op on an empty target set, so this is the same code path.
pub fn spawn_local_only(inp: &SpawnInputs, ledger: &mut CostLedger) -> Result<SpawnOutput> {
    debug_assert!(inp.predicted_targets.is_empty());
    run_spawn(inp, ledger)
}

/// Bootstrap-filter target correction for exactly known CA states: per-sample
/// log-likelihood sums over the observers, fused by consensus. The returned
/// beliefs are weighted; resampling stays with the caller, as in
/// [`run_spawn`].
pub fn target_only_filter(
    predicted: &ParticleSet,
    observer_states: &BTreeMap<AgentId, StateVec>,
    meas: &BTreeMap<AgentId, MeasModel>,
    ys: &BTreeMap<AgentId, f64>,
    participants: &[AgentId],
    graph: &Graph,
    consensus_iters: usize,
    ledger: &mut CostLedger,
) -> Result<Vec<ParticleSet>> {
    let logs: Vec<Vec<f64>> = participants
        .iter()
        .map(|l| {
            let Some(x_l) = observer_states.get(l) else {
                return Ok(vec![0.0; predicted.len()]);
            };
            let y = *ys.get(l).ok_or(Error::UnknownAgent(*l))?;
            let model = meas.get(l).ok_or(Error::UnknownAgent(*l))?;
            Ok(predicted
                .samples()
                .iter()
                .map(|x_m| model.log_likelihood(y, x_l, x_m))
                .collect())
        })
        .collect::<Result<_>>()?;
    bp_update_target(predicted, &logs, graph, consensus_iters, ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::dist;
    use crate::particles::{draw_uniform_prior, mmse_estimate};
    use crate::rng::{stream, Purpose, StreamId};
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn test_rng(tag: u32) -> rand_chacha::ChaCha12Rng {
        stream(21, StreamId::new(0, tag, Purpose::Test, 0))
    }

    fn paper_meas() -> MeasModel {
        MeasModel::new(50.0, 50.0, 2.0)
    }

    fn id(i: u32) -> AgentId {
        AgentId(i)
    }

    #[test]
    fn predict_ca_zero_noise_shifts_by_control() {
        let model = MotionModel::ca_linear(0.0);
        let p = draw_uniform_prior(32, [-1.0, -1.0], [1.0, 1.0], &mut test_rng(0)).unwrap();
        let out = predict_ca(&model, &p, ControlVec([1.0, 0.0]), &mut test_rng(1)).unwrap();
        for (a, b) in p.samples().iter().zip(out.samples()) {
            assert_eq!(b[0], a[0] + 1.0);
            assert_eq!(b[1], a[1]);
        }
        assert_eq!(p.weights(), out.weights());
    }

    #[test]
    fn predict_ca_mean_shift_clt() {
        let sigma_q2 = 1e-3;
        let model = MotionModel::ca_linear(sigma_q2);
        let j = 10_000;
        let p = draw_uniform_prior(j, [-1.0, -1.0], [1.0, 1.0], &mut test_rng(2)).unwrap();
        let u = ControlVec([0.5, -0.25]);
        let out = predict_ca(&model, &p, u, &mut test_rng(3)).unwrap();
        let before = mmse_estimate(&p);
        let after = mmse_estimate(&out);
        let tol = 3.0 * sigma_q2.sqrt() / (j as f64).sqrt();
        assert!((after[0] - before[0] - 0.5).abs() < tol);
        assert!((after[1] - before[1] + 0.25).abs() < tol);
    }

    #[test]
    fn predict_target_moves_by_velocity_and_grows_velocity_variance() {
        let sigma_q2 = 1e-5;
        let model = MotionModel::target_cv(sigma_q2);
        let j = 20_000;
        let mut rng = test_rng(4);
        let samples: Vec<StateVec> = (0..j)
            .map(|_| {
                StateVec::from([
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    0.05 + 0.01 * rng.sample::<f64, _>(StandardNormal),
                    0.05 + 0.01 * rng.sample::<f64, _>(StandardNormal),
                ])
            })
            .collect();
        let p = ParticleSet::equal_weights(samples).unwrap();

        let zero_noise = MotionModel::target_cv(0.0);
        let out = predict_target(&zero_noise, &p, &mut test_rng(5)).unwrap();
        for (a, b) in p.samples().iter().zip(out.samples()) {
            assert_eq!(b[0], a[0] + a[2]);
            assert_eq!(b[1], a[1] + a[3]);
            assert_eq!(b[2], a[2]);
        }

        let out = predict_target(&model, &p, &mut test_rng(6)).unwrap();
        assert_eq!(out.weights(), p.weights());
        let vel_var = |set: &ParticleSet, c: usize| {
            let mu: f64 = set.samples().iter().map(|s| s[c]).sum::<f64>() / j as f64;
            set.samples()
                .iter()
                .map(|s| (s[c] - mu).powi(2))
                .sum::<f64>()
                / j as f64
        };
        // W injects the driving noise into the velocity identically.
        for c in [2usize, 3] {
            let grew = vel_var(&out, c) - vel_var(&p, c);
            assert!(
                grew > 0.0 && (grew - sigma_q2).abs() < 5.0 * sigma_q2,
                "component {c} grew {grew}"
            );
        }
    }

    #[test]
    fn message_from_point_mass_is_plain_likelihood() {
        let meas = paper_meas();
        let sender = ParticleSet::point_mass(StateVec::from([10.0, -4.0]));
        let x = StateVec::from([0.0, 0.0]);
        let y = 12.0;
        assert_eq!(
            bp_message_from_belief(&meas, y, &sender, &x),
            meas.likelihood(y, &x, sender.sample(0))
        );
    }

    #[test]
    fn message_invariant_to_sender_permutation() {
        let meas = paper_meas();
        let samples = vec![
            StateVec::from([1.0, 2.0]),
            StateVec::from([-3.0, 0.5]),
            StateVec::from([7.0, 7.0]),
        ];
        let w = vec![0.5, 0.25, 0.25];
        let a = ParticleSet::new(samples.clone(), w.clone()).unwrap();
        let b = ParticleSet::new(
            vec![samples[2], samples[0], samples[1]],
            vec![w[2], w[0], w[1]],
        )
        .unwrap();
        let x = StateVec::from([0.0, 0.0]);
        assert_abs_diff_eq!(
            bp_message_from_belief(&meas, 5.0, &a, &x),
            bp_message_from_belief(&meas, 5.0, &b, &x),
            epsilon = 1e-15
        );
    }

    #[test]
    fn message_matches_quadrature_on_smooth_sender() {
        // Sender belief: isotropic Gaussian blob, integrated on a dense grid.
        let meas = paper_meas();
        let (mx, my, sd) = (30.0, 10.0, 4.0);
        let x_l = StateVec::from([0.0, 0.0]);
        let y = 33.0;

        let n = 220;
        let half = 5.0 * sd;
        let h = 2.0 * half / n as f64;
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                let px = mx - half + (i as f64 + 0.5) * h;
                let py = my - half + (j as f64 + 0.5) * h;
                let g = (-((px - mx).powi(2) + (py - my).powi(2)) / (2.0 * sd * sd)).exp()
                    / (2.0 * std::f64::consts::PI * sd * sd);
                quad += g * meas.likelihood(y, &x_l, &StateVec::from([px, py])) * h * h;
            }
        }

        let mut rng = test_rng(7);
        let samples: Vec<StateVec> = (0..40_000)
            .map(|_| {
                StateVec::from([
                    mx + sd * rng.sample::<f64, _>(StandardNormal),
                    my + sd * rng.sample::<f64, _>(StandardNormal),
                ])
            })
            .collect();
        let sender = ParticleSet::equal_weights(samples).unwrap();
        let mc = bp_message_from_belief(&meas, y, &sender, &x_l);
        assert!((mc - quad).abs() / quad < 0.02, "mc {mc} quad {quad}");
    }

    #[test]
    fn ca_update_empty_product_is_identity() {
        let p = draw_uniform_prior(64, [-1.0, -1.0], [1.0, 1.0], &mut test_rng(8)).unwrap();
        let out = bp_update_ca(&p, &[]).unwrap();
        assert_eq!(out.samples(), p.samples());
        for (a, b) in out.weights().iter().zip(p.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn ca_update_anchor_annulus_concentrates() {
        let meas = paper_meas();
        let prior =
            draw_uniform_prior(4000, [-200.0, -200.0], [200.0, 200.0], &mut test_rng(9)).unwrap();
        let anchor = ParticleSet::point_mass(StateVec::from([0.0, 0.0]));
        let y = 100.0;
        let msg: Vec<f64> = prior
            .samples()
            .iter()
            .map(|x| bp_message_from_belief(&meas, y, &anchor, x))
            .collect();
        let post = bp_update_ca(&prior, &[msg]).unwrap();
        let annulus_chi2 = |set: &ParticleSet| {
            set.samples()
                .iter()
                .zip(set.weights())
                .map(|(x, &w)| {
                    let r = (x[0].powi(2) + x[1].powi(2)).sqrt();
                    w * (r - y).powi(2) / 50.0
                })
                .sum::<f64>()
        };
        assert!(
            annulus_chi2(&post) < 0.05 * annulus_chi2(&prior),
            "posterior not concentrated on the annulus"
        );
    }

    #[test]
    fn ca_update_two_messages_multiply() {
        let p = draw_uniform_prior(128, [-50.0, -50.0], [50.0, 50.0], &mut test_rng(10)).unwrap();
        let meas = paper_meas();
        let a1 = ParticleSet::point_mass(StateVec::from([0.0, 0.0]));
        let a2 = ParticleSet::point_mass(StateVec::from([30.0, 0.0]));
        let m1: Vec<f64> = p
            .samples()
            .iter()
            .map(|x| bp_message_from_belief(&meas, 20.0, &a1, x))
            .collect();
        let m2: Vec<f64> = p
            .samples()
            .iter()
            .map(|x| bp_message_from_belief(&meas, 25.0, &a2, x))
            .collect();
        let both = bp_update_ca(&p, &[m1.clone(), m2.clone()]).unwrap();
        let w1 = bp_update_ca(&p, &[m1]).unwrap();
        let prod: Vec<f64> = w1.weights().iter().zip(&m2).map(|(w, m)| w * m).collect();
        let sum: f64 = prod.iter().sum();
        for (a, b) in both.weights().iter().zip(&prod) {
            assert_abs_diff_eq!(*a, b / sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn ca_update_total_underflow_flags_divergence() {
        let p = ParticleSet::equal_weights(vec![StateVec::from([0.0, 0.0]); 4]).unwrap();
        let msg = vec![0.0; 4];
        assert!(matches!(
            bp_update_ca(&p, &[msg]),
            Err(Error::BeliefDiverged)
        ));
    }

    #[test]
    fn target_update_single_observer_is_local_reweighting() {
        let tp =
            draw_uniform_prior(256, [-100.0, -100.0], [100.0, 100.0], &mut test_rng(11)).unwrap();
        let meas = paper_meas();
        let obs = StateVec::from([10.0, 0.0]);
        let logs: Vec<f64> = tp
            .samples()
            .iter()
            .map(|x| meas.log_likelihood(60.0, &obs, x))
            .collect();
        let mut ledger = CostLedger::new(1);
        let out =
            bp_update_target(&tp, &[logs.clone()], &Graph::complete(1), 1, &mut ledger).unwrap();
        let direct: Vec<f64> = tp
            .weights()
            .iter()
            .zip(&logs)
            .map(|(w, l)| w * l.exp())
            .collect();
        let sum: f64 = direct.iter().sum();
        for (a, b) in out[0].weights().iter().zip(&direct) {
            assert_abs_diff_eq!(*a, b / sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn target_update_two_observers_match_centralized_product() {
        let tp =
            draw_uniform_prior(256, [-100.0, -100.0], [100.0, 100.0], &mut test_rng(12)).unwrap();
        let meas = paper_meas();
        let obs = [StateVec::from([10.0, 0.0]), StateVec::from([-20.0, 5.0])];
        let ys = [60.0, 45.0];
        let logs: Vec<Vec<f64>> = obs
            .iter()
            .zip(ys)
            .map(|(o, y)| {
                tp.samples()
                    .iter()
                    .map(|x| meas.log_likelihood(y, o, x))
                    .collect()
            })
            .collect();
        let mut ledger = CostLedger::new(2);
        let out = bp_update_target(&tp, &logs, &Graph::complete(2), 1, &mut ledger).unwrap();
        let direct: Vec<f64> = tp
            .weights()
            .iter()
            .enumerate()
            .map(|(j, w)| w * (logs[0][j] + logs[1][j]).exp())
            .collect();
        let sum: f64 = direct.iter().sum();
        for ca in &out {
            for (a, b) in ca.weights().iter().zip(&direct) {
                assert_abs_diff_eq!(*a, b / sum, epsilon = 1e-9);
            }
        }

        // Negative control: with zero consensus iterations each observer
        // keeps only its own factor, which differs from the product.
        let out0 = bp_update_target(&tp, &logs, &Graph::complete(2), 0, &mut ledger).unwrap();
        let diff: f64 = out0[0]
            .weights()
            .iter()
            .zip(out[0].weights())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "R=0 should not reproduce the product");
    }

    #[test]
    fn extrinsic_uniform_incoming_is_proportional_to_belief() {
        let belief = [0.4, 0.1, 0.3, 0.2];
        let incoming = [2.5; 4];
        let psi = extrinsic_info(&belief, &incoming);
        for (p, b) in psi.iter().zip(&belief) {
            assert_abs_diff_eq!(p, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn extrinsic_recovers_prior_from_product() {
        let prior = [0.1, 0.2, 0.3, 0.4];
        let msg = [3.0, 1.0, 0.5, 2.0];
        let belief: Vec<f64> = {
            let raw: Vec<f64> = prior.iter().zip(&msg).map(|(p, m)| p * m).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        };
        let psi = extrinsic_info(&belief, &msg);
        for (p, b) in psi.iter().zip(&prior) {
            assert_abs_diff_eq!(p, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn extrinsic_floor_cases() {
        let belief = [0.25, 0.75];
        let psi = extrinsic_info(&belief, &[0.0, 0.0]);
        assert_eq!(psi, vec![0.25, 0.75]);
        // One exact zero gets floored and dominates after renormalization.
        let psi = extrinsic_info(&belief, &[0.0, 1.0]);
        assert!(psi[0] > 0.999);
        assert!(psi.iter().all(|&p| p > 0.0));
    }

    struct SpawnFixture {
        topo: Topology,
        meas: BTreeMap<AgentId, MeasModel>,
        bundle: MeasurementBundle,
        predicted: BTreeMap<AgentId, ParticleSet>,
        targets: BTreeMap<AgentId, ParticleSet>,
        censored: BTreeSet<AgentId>,
        mobile: Vec<AgentId>,
        graph: Graph,
        bp_iters: usize,
    }

    impl SpawnFixture {
        fn inputs(&self) -> SpawnInputs<'_> {
            SpawnInputs {
                topology: &self.topo,
                meas: &self.meas,
                measurements: &self.bundle,
                predicted_ca: &self.predicted,
                predicted_targets: &self.targets,
                censored: &self.censored,
                mobile: &self.mobile,
                graph: &self.graph,
                consensus_iters: 1,
                bp_iters: self.bp_iters,
            }
        }
    }

    #[test]
    fn spawn_single_ca_anchor_equals_direct_reweighting() {
        let prior =
            draw_uniform_prior(512, [-200.0, -200.0], [200.0, 200.0], &mut test_rng(13)).unwrap();
        let anchor = ParticleSet::point_mass(StateVec::from([0.0, 0.0]));
        let mut bundle = MeasurementBundle::new();
        bundle.insert(id(2), id(1), 80.0);
        let fix = SpawnFixture {
            topo: Topology::fully_connected(&[id(1), id(2)], &[], &[]),
            meas: [(id(2), paper_meas())].into_iter().collect(),
            bundle,
            predicted: [(id(1), anchor.clone()), (id(2), prior.clone())]
                .into_iter()
                .collect(),
            targets: BTreeMap::new(),
            censored: BTreeSet::new(),
            mobile: vec![id(2)],
            graph: Graph::complete(1),
            bp_iters: 1,
        };
        let mut ledger = CostLedger::new(1);
        let out = run_spawn(&fix.inputs(), &mut ledger).unwrap();

        let direct: Vec<f64> = prior
            .samples()
            .iter()
            .zip(prior.weights())
            .map(|(x, w)| w * paper_meas().likelihood(80.0, x, anchor.sample(0)))
            .collect();
        let sum: f64 = direct.iter().sum();
        for (a, b) in out.ca_beliefs[&id(2)].weights().iter().zip(&direct) {
            assert_abs_diff_eq!(*a, b / sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn spawn_round_is_synchronous() {
        // With P = 1 each CA must correct against the other's *predicted*
        // belief, not its already-corrected one.
        let p2 = draw_uniform_prior(128, [-30.0, -30.0], [30.0, 30.0], &mut test_rng(14)).unwrap();
        let p3 = draw_uniform_prior(128, [20.0, -30.0], [80.0, 30.0], &mut test_rng(15)).unwrap();
        let mut bundle = MeasurementBundle::new();
        bundle.insert(id(2), id(3), 42.0);
        bundle.insert(id(3), id(2), 40.0);
        let fix = SpawnFixture {
            topo: Topology::fully_connected(&[id(2), id(3)], &[], &[]),
            meas: [(id(2), paper_meas()), (id(3), paper_meas())]
                .into_iter()
                .collect(),
            bundle,
            predicted: [(id(2), p2.clone()), (id(3), p3.clone())]
                .into_iter()
                .collect(),
            targets: BTreeMap::new(),
            censored: BTreeSet::new(),
            mobile: vec![id(2), id(3)],
            graph: Graph::complete(2),
            bp_iters: 1,
        };
        let mut ledger = CostLedger::new(2);
        let out = run_spawn(&fix.inputs(), &mut ledger).unwrap();

        for (l, own, other, y) in [(id(2), &p2, &p3, 42.0), (id(3), &p3, &p2, 40.0)] {
            let direct: Vec<f64> = own
                .samples()
                .iter()
                .zip(own.weights())
                .map(|(x, w)| w * bp_message_from_belief(&paper_meas(), y, other, x))
                .collect();
            let sum: f64 = direct.iter().sum();
            for (a, b) in out.ca_beliefs[&l].weights().iter().zip(&direct) {
                assert_abs_diff_eq!(*a, b / sum, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spawn_complexity_affine_in_network_size_on_chains() {
        // Bounded-degree chain: total likelihood evaluations are affine in
        // the number of CAs at fixed P and J.
        let j = 32;
        let count = |n_cas: usize| {
            let ids: Vec<AgentId> = (1..=n_cas as u32).map(id).collect();
            let mut neigh: BTreeMap<AgentId, BTreeSet<AgentId>> = BTreeMap::new();
            for (i, &l) in ids.iter().enumerate() {
                let mut set = BTreeSet::new();
                if i > 0 {
                    set.insert(ids[i - 1]);
                }
                if i + 1 < n_cas {
                    set.insert(ids[i + 1]);
                }
                neigh.insert(l, set);
            }
            let tsets: BTreeMap<_, _> = ids.iter().map(|&l| (l, BTreeSet::new())).collect();
            let topo = Topology::new(neigh, tsets).unwrap();
            let mut rng = test_rng(16);
            let predicted: BTreeMap<_, _> = ids
                .iter()
                .map(|&l| {
                    (
                        l,
                        draw_uniform_prior(j, [-5.0, -5.0], [5.0, 5.0], &mut rng).unwrap(),
                    )
                })
                .collect();
            let mut bundle = MeasurementBundle::new();
            for &l in &ids {
                let (neigh, _) = topo.neighbors_of(l).unwrap();
                for &k in neigh {
                    bundle.insert(l, k, 1.0);
                }
            }
            let fix = SpawnFixture {
                topo,
                meas: ids.iter().map(|&l| (l, paper_meas())).collect(),
                bundle,
                predicted,
                targets: BTreeMap::new(),
                censored: BTreeSet::new(),
                mobile: ids,
                graph: Graph::line(n_cas),
                bp_iters: 2,
            };
            let mut ledger = CostLedger::new(n_cas);
            run_spawn(&fix.inputs(), &mut ledger)
                .unwrap()
                .stats
                .likelihood_evals
        };
        let (c4, c6, c8) = (count(4), count(6), count(8));
        assert_eq!(c8 - c6, c6 - c4, "evals not affine: {c4} {c6} {c8}");
    }

    #[test]
    fn censoring_thresholds() {
        let point = ParticleSet::point_mass(StateVec::from([1.0, 1.0]));
        assert!(!censored(&point));

        let uniform =
            draw_uniform_prior(5000, [-200.0, -200.0], [200.0, 200.0], &mut test_rng(17)).unwrap();
        let t = cov_trace(&uniform);
        assert!((t - 26_667.0).abs() / 26_667.0 < 0.05, "trace {t}");
        assert!(censored(&uniform));

        // Trace exactly at the threshold: censored by convention.
        let boundary = ParticleSet::equal_weights(vec![
            StateVec::from([3.0, 1.0]),
            StateVec::from([-3.0, -1.0]),
        ])
        .unwrap();
        assert_eq!(cov_trace(&boundary), 10.0);
        assert!(censored(&boundary));
    }

    #[test]
    fn spawn_empty_neighborhood_keeps_prior() {
        let prior = draw_uniform_prior(64, [-1.0, -1.0], [1.0, 1.0], &mut test_rng(18)).unwrap();
        let fix = SpawnFixture {
            topo: Topology::fully_connected(&[id(2)], &[], &[]),
            meas: [(id(2), paper_meas())].into_iter().collect(),
            bundle: MeasurementBundle::new(),
            predicted: [(id(2), prior.clone())].into_iter().collect(),
            targets: BTreeMap::new(),
            censored: BTreeSet::new(),
            mobile: vec![id(2)],
            graph: Graph::complete(1),
            bp_iters: 1,
        };
        let mut ledger = CostLedger::new(1);
        let out = spawn_local_only(&fix.inputs(), &mut ledger).unwrap();
        assert_eq!(out.ca_beliefs[&id(2)].samples(), prior.samples());
        for (a, b) in out.ca_beliefs[&id(2)].weights().iter().zip(prior.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn target_filter_matches_spawn_with_point_mass_cas() {
        let tprior =
            draw_uniform_prior(512, [-100.0, -100.0], [100.0, 100.0], &mut test_rng(19)).unwrap();
        let ca_pos = [StateVec::from([10.0, 0.0]), StateVec::from([-15.0, 20.0])];
        let true_target = StateVec::from([40.0, -10.0]);
        let meas_model = paper_meas();
        let ys: Vec<f64> = ca_pos.iter().map(|c| dist(c, &true_target) + 3.0).collect();

        // Bootstrap-filter route.
        let observer_states: BTreeMap<_, _> = [(id(2), ca_pos[0]), (id(3), ca_pos[1])]
            .into_iter()
            .collect();
        let meas: BTreeMap<_, _> = [(id(2), meas_model), (id(3), meas_model)]
            .into_iter()
            .collect();
        let y_map: BTreeMap<_, _> = [(id(2), ys[0]), (id(3), ys[1])].into_iter().collect();
        let participants = [id(2), id(3)];
        let graph = Graph::complete(2);
        let mut ledger = CostLedger::new(2);
        let filt = target_only_filter(
            &tprior,
            &observer_states,
            &meas,
            &y_map,
            &participants,
            &graph,
            1,
            &mut ledger,
        )
        .unwrap();

        // Full SPAWN route with point-mass CA beliefs at the true states.
        let mut bundle = MeasurementBundle::new();
        bundle.insert(id(2), id(3), dist(&ca_pos[0], &ca_pos[1]));
        bundle.insert(id(3), id(2), dist(&ca_pos[0], &ca_pos[1]));
        bundle.insert(id(2), id(9), ys[0]);
        bundle.insert(id(3), id(9), ys[1]);
        let fix = SpawnFixture {
            topo: Topology::fully_connected(&[id(2), id(3)], &[id(2), id(3)], &[id(9)]),
            meas,
            bundle,
            predicted: [
                (id(2), ParticleSet::point_mass(ca_pos[0])),
                (id(3), ParticleSet::point_mass(ca_pos[1])),
            ]
            .into_iter()
            .collect(),
            targets: [(id(9), tprior.clone())].into_iter().collect(),
            censored: BTreeSet::new(),
            mobile: vec![id(2), id(3)],
            graph: Graph::complete(2),
            bp_iters: 2,
        };
        let mut ledger = CostLedger::new(2);
        let out = run_spawn(&fix.inputs(), &mut ledger).unwrap();
        for (a, b) in out.target_beliefs[&id(2)][&id(9)]
            .weights()
            .iter()
            .zip(filt[0].weights())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn target_filter_no_observers_is_pure_prediction() {
        let tprior =
            draw_uniform_prior(64, [-10.0, -10.0], [10.0, 10.0], &mut test_rng(20)).unwrap();
        let graph = Graph::complete(2);
        let mut ledger = CostLedger::new(2);
        let out = target_only_filter(
            &tprior,
            &BTreeMap::new(),
            &BTreeMap::new(),
            &BTreeMap::new(),
            &[id(2), id(3)],
            &graph,
            1,
            &mut ledger,
        )
        .unwrap();
        for (a, b) in out[0].weights().iter().zip(tprior.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }
}
