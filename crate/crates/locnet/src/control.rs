//! Control layer: sampling future measurements, Monte-Carlo gradients of the
//! mutual-information term and the Jacobian term, the two distributed
//! processing schemes, and the constrained gradient-ascent update.
//!
//! The gradient of the information objective at reference control `u_r` is
//! assembled per CA from three ingredients sharing one future-sample bank:
//! the score of the CA's control-dependent measurement subvector, the
//! network-wide conditional log likelihood of each sampled future
//! measurement vector, and its sample-estimated marginal. Log ratios are
//! computed with log-sum-exp throughout.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::agent::{AgentId, ControlVec, StateVec};
use crate::error::{Error, Result};
use crate::models::{
    jacobian_det, jacobian_det_grad_u, mean_evolve, mean_evolve_grad_u, MeasModel, MotionModel,
    SmallMat,
};
use crate::netsim::{
    average_consensus, flood, neighbor_exchange, CostLedger, Graph, Layer, Primitive,
};
use crate::particles::ParticleSet;
use crate::rng::{stream, Purpose, StreamId};

/// Distributed processing scheme for the gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Flooding,
    Consensus,
}

/// Joint state and future-measurement samples shared by one consensus group.
///
/// All CAs in the group hold identical banks for shared indices: every draw
/// comes from a stream keyed by the measuring pair, so the bank is the same
/// no matter which CA materializes it.
#[derive(Debug, Clone)]
pub struct FutureSampleBank {
    pub j: usize,
    pub j_prime: usize,
    /// Mobile CAs in ascending id order; the joint-sample stacking order.
    pub cas: Vec<AgentId>,
    pub anchors: BTreeMap<AgentId, [f64; 2]>,
    /// Current-state samples `x_l^{(j)}`.
    pub ca_now: BTreeMap<AgentId, Vec<[f64; 2]>>,
    /// Mean-propagated samples `x_l^{+(j)} = g̃_l(x_l^{(j)}, u_r)`.
    pub ca_plus: BTreeMap<AgentId, Vec<[f64; 2]>>,
    /// Predicted target samples `x_m^{+(j)}`.
    pub target_plus: BTreeMap<AgentId, Vec<StateVec>>,
    pub u_ref: BTreeMap<AgentId, ControlVec>,
    /// Measurement model per measuring CA.
    pub meas: BTreeMap<AgentId, MeasModel>,
    /// Directed measuring pairs `(l, k)`, ascending.
    pub pairs: Vec<(AgentId, AgentId)>,
    /// Future measurement samples per pair, `j`-major: `y[j * j_prime + j']`.
    pub y_future: BTreeMap<(AgentId, AgentId), Vec<f64>>,
}

/// Everything needed to materialize a [`FutureSampleBank`].
pub struct BankSpec<'a> {
    /// Mobile CAs of the consensus group, ascending.
    pub cas: &'a [AgentId],
    pub anchors: &'a BTreeMap<AgentId, [f64; 2]>,
    /// Directed measuring pairs `(measuring mobile CA, measured agent)`.
    pub pairs: &'a [(AgentId, AgentId)],
    /// `J` current-state samples per mobile CA.
    pub ca_samples: &'a BTreeMap<AgentId, Vec<[f64; 2]>>,
    /// `J` predicted samples per target.
    pub target_plus: &'a BTreeMap<AgentId, Vec<StateVec>>,
    pub u_ref: &'a BTreeMap<AgentId, ControlVec>,
    pub motion: &'a BTreeMap<AgentId, MotionModel>,
    pub meas: &'a BTreeMap<AgentId, MeasModel>,
    pub j_prime: usize,
    pub seed: u64,
    pub run: u32,
    pub time: u32,
}

impl FutureSampleBank {
    /// Propagated position of agent `k` at joint-sample index `j`.
    pub fn plus_pos(&self, k: AgentId, j: usize) -> [f64; 2] {
        if let Some(p) = self.ca_plus.get(&k) {
            p[j]
        } else if let Some(p) = self.anchors.get(&k) {
            *p
        } else {
            self.target_plus[&k][j].pos()
        }
    }
}

/// Draws the full future-measurement bank: CA samples mean-propagated at the
/// reference controls, then `J'` measurement vectors per joint sample with
/// fresh pair-keyed noise.
pub fn sample_future_global(spec: &BankSpec) -> Result<FutureSampleBank> {
    let mut ca_now = BTreeMap::new();
    let mut ca_plus = BTreeMap::new();
    let mut j = None;
    for &l in spec.cas {
        let samples = spec.ca_samples.get(&l).ok_or(Error::UnknownAgent(l))?;
        match j {
            None => j = Some(samples.len()),
            Some(n) if n != samples.len() => {
                return Err(Error::MismatchedSampleCounts(n, samples.len()))
            }
            _ => {}
        }
        let model = spec.motion.get(&l).ok_or(Error::UnknownAgent(l))?;
        let u = *spec.u_ref.get(&l).ok_or(Error::UnknownAgent(l))?;
        let plus = samples
            .iter()
            .map(|&p| {
                let x = StateVec::from(p);
                mean_evolve(model, &x, u).map(|s| s.pos())
            })
            .collect::<Result<Vec<_>>>()?;
        ca_now.insert(l, samples.clone());
        ca_plus.insert(l, plus);
    }
    let j = j.ok_or(Error::EmptyParticleSet)?;
    for t in spec.target_plus.values() {
        if t.len() != j {
            return Err(Error::MismatchedSampleCounts(j, t.len()));
        }
    }

    let mut bank = FutureSampleBank {
        j,
        j_prime: spec.j_prime,
        cas: spec.cas.to_vec(),
        anchors: spec.anchors.clone(),
        ca_now,
        ca_plus,
        target_plus: spec.target_plus.clone(),
        u_ref: spec.u_ref.clone(),
        meas: spec.meas.clone(),
        pairs: spec.pairs.to_vec(),
        y_future: BTreeMap::new(),
    };

    for &(l, k) in spec.pairs {
        let meas = spec.meas.get(&l).ok_or(Error::UnknownAgent(l))?;
        let mut rng = stream(
            spec.seed,
            StreamId::new(spec.run, l.0, Purpose::FutureNoise, spec.time).with_aux(k.0),
        );
        let mut ys = Vec::with_capacity(j * spec.j_prime);
        for jj in 0..j {
            let from = bank.ca_plus[&l][jj];
            let to = bank.plus_pos(k, jj);
            let d = hypot(from, to);
            let sd = meas.noise_var(d).sqrt();
            for _ in 0..spec.j_prime {
                let z: f64 = rng.sample(StandardNormal);
                ys.push(d + sd * z);
            }
        }
        bank.y_future.insert((l, k), ys);
    }
    Ok(bank)
}

/// The slice of the bank CA `l` holds under neighbor-local processing: its
/// own measurement samples plus the reverse pair measurements received from
/// measuring neighbors.
#[derive(Debug)]
pub struct LocalBankSlice<'a> {
    pub own: Vec<((AgentId, AgentId), &'a [f64])>,
    pub reverse: Vec<((AgentId, AgentId), &'a [f64])>,
}

/// Collects CA `l`'s slice of `ỹ_l⁺` from a materialized bank. The reverse
/// samples are exactly the values the measuring neighbor computed;
/// transport is lossless.
pub fn sample_future_local<'a>(
    bank: &'a FutureSampleBank,
    l: AgentId,
) -> Result<LocalBankSlice<'a>> {
    if !bank.cas.contains(&l) {
        return Err(Error::UnknownAgent(l));
    }
    let mut own = Vec::new();
    let mut reverse = Vec::new();
    for (&(a, b), ys) in &bank.y_future {
        if a == l {
            own.push(((a, b), ys.as_slice()));
        } else if b == l {
            reverse.push(((a, b), ys.as_slice()));
        }
    }
    Ok(LocalBankSlice { own, reverse })
}

fn hypot(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One factor of the `ỹ_l⁺` likelihood, evaluated at mean-propagated states.
#[derive(Debug, Clone, Copy)]
pub struct PairFactor {
    pub y: f64,
    /// Propagated position of the measuring CA.
    pub from: [f64; 2],
    /// Propagated position of the measured agent.
    pub to: [f64; 2],
    pub meas: MeasModel,
    /// Which side, if any, is the controlled CA's propagated state.
    pub wrt: Wrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    None,
    From,
    To,
}

/// `log f(ỹ_l⁺ | ...)`: sum of the factor log densities.
pub fn tilde_log_likelihood(factors: &[PairFactor]) -> f64 {
    factors
        .iter()
        .map(|f| f.meas.log_pdf_at(f.y, hypot(f.from, f.to)))
        .sum()
}

/// `f(ỹ_l⁺ | ...)`: product over both-direction pair factors and target
/// factors.
pub fn tilde_likelihood(factors: &[PairFactor]) -> f64 {
    tilde_log_likelihood(factors).exp()
}

/// `∇_u log f(ỹ_l⁺ | ...)`: the position score of every factor involving
/// `x_l⁺`, mapped through `∂g̃_l/∂u`.
pub fn tilde_score_u(factors: &[PairFactor], dgdu: &SmallMat) -> Result<[f64; 2]> {
    let mut score = [0.0; 2];
    for f in factors {
        if f.wrt == Wrt::None {
            continue;
        }
        let d = hypot(f.from, f.to);
        if d == 0.0 {
            return Err(Error::CoincidentPositions);
        }
        let sc = f.meas.score_vs_distance(f.y, d);
        let sign = if f.wrt == Wrt::From { 1.0 } else { -1.0 };
        score[0] += sign * sc * (f.from[0] - f.to[0]) / d;
        score[1] += sign * sc * (f.from[1] - f.to[1]) / d;
    }
    let mut out = [0.0; 2];
    for c in 0..2 {
        for (r, &s) in score.iter().enumerate().take(dgdu.rows().min(2)) {
            out[c] += dgdu.at(r, c) * s;
        }
    }
    Ok(out)
}

/// `∂f(ỹ_l⁺ | ...)/∂u_l`: the density gradient, i.e. the score scaled by
/// the likelihood value.
pub fn tilde_likelihood_grad_u(factors: &[PairFactor], dgdu: &SmallMat) -> Result<[f64; 2]> {
    let f = tilde_likelihood(factors);
    let s = tilde_score_u(factors, dgdu)?;
    Ok([f * s[0], f * s[1]])
}

/// Conditional log-likelihood tensor `log f(y^{+(j,j')} | x^{(j'')}; u_r)`,
/// flattened with `j''` fastest: index `(j·J' + j')·J + j''`.
#[derive(Debug, Clone)]
pub struct CondTensor {
    pub j: usize,
    pub j_prime: usize,
    pub log: Vec<f64>,
}

impl CondTensor {
    fn zeros(j: usize, j_prime: usize) -> Self {
        Self {
            j,
            j_prime,
            log: vec![0.0; j * j_prime * j],
        }
    }

    pub fn at(&self, j: usize, jp: usize, jpp: usize) -> f64 {
        self.log[(j * self.j_prime + jp) * self.j + jpp]
    }
}

/// Accumulates the log factors of the given pairs into `tensor`.
fn accumulate_pairs(
    bank: &FutureSampleBank,
    pairs: &[(AgentId, AgentId)],
    tensor: &mut CondTensor,
) {
    let (j, jp) = (bank.j, bank.j_prime);
    for &(l, k) in pairs {
        let meas = &bank.meas[&l];
        // Per hypothesis j'': distance and Gaussian constants.
        let mut c_norm = Vec::with_capacity(j);
        let mut c_half = Vec::with_capacity(j);
        let mut d_arr = Vec::with_capacity(j);
        for jj in 0..j {
            let d = hypot(bank.ca_plus[&l][jj], bank.plus_pos(k, jj));
            let s = meas.noise_var(d);
            d_arr.push(d);
            c_norm.push(-0.5 * (2.0 * std::f64::consts::PI * s).ln());
            c_half.push(0.5 / s);
        }
        let ys = &bank.y_future[&(l, k)];
        for row in 0..j * jp {
            let y = ys[row];
            let out = &mut tensor.log[row * j..(row + 1) * j];
            for jj in 0..j {
                let r = y - d_arr[jj];
                out[jj] += c_norm[jj] - r * r * c_half[jj];
            }
        }
    }
}

/// Exact network-wide conditional tensor, as computed locally by each CA
/// under the flooding scheme.
pub fn conditional_log_tensor(bank: &FutureSampleBank) -> CondTensor {
    let mut t = CondTensor::zeros(bank.j, bank.j_prime);
    accumulate_pairs(bank, &bank.pairs, &mut t);
    t
}

/// Consensus-scheme tensor reconstruction: each CA initializes `J²J'`
/// parallel consensus instances with the log likelihood of its own
/// measurement slice, and scales the converged average by the group size.
/// Returns one tensor per participant.
pub fn consensus_log_tensors(
    bank: &FutureSampleBank,
    graph: &Graph,
    consensus_iters: usize,
    ledger: &mut CostLedger,
) -> Vec<CondTensor> {
    let n = bank.cas.len();
    let locals: Vec<Vec<f64>> = bank
        .cas
        .iter()
        .map(|&l| {
            let own: Vec<_> = bank
                .pairs
                .iter()
                .copied()
                .filter(|&(a, _)| a == l)
                .collect();
            let mut t = CondTensor::zeros(bank.j, bank.j_prime);
            accumulate_pairs(bank, &own, &mut t);
            t.log
        })
        .collect();
    let averaged = average_consensus(graph, &locals, consensus_iters, Layer::Control, ledger);
    averaged
        .into_iter()
        .map(|mut log| {
            for v in &mut log {
                *v *= n as f64;
            }
            CondTensor {
                j: bank.j,
                j_prime: bank.j_prime,
                log,
            }
        })
        .collect()
}

/// Sample-based marginal estimates `f(y^{+(j,j')}; u_r)`, one per `(j, j')`
/// row: the mean of the conditional values over the `J` hypotheses.
pub fn f_y_marginal(tensor: &CondTensor) -> Vec<f64> {
    log_marginals(tensor).into_iter().map(f64::exp).collect()
}

fn log_marginals(tensor: &CondTensor) -> Vec<f64> {
    let (j, jp) = (tensor.j, tensor.j_prime);
    let ln_j = (j as f64).ln();
    (0..j * jp)
        .map(|row| {
            let slice = &tensor.log[row * j..(row + 1) * j];
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return f64::NEG_INFINITY;
            }
            let sum: f64 = slice.iter().map(|&v| (v - max).exp()).sum();
            max + sum.ln() - ln_j
        })
        .collect()
}

/// Gradient estimate plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradDi {
    pub grad: [f64; 2],
    /// `(j, j')` terms skipped because a log ratio or score was not finite.
    pub clamped: u64,
}

/// The directed pairs whose factors involve `x_l⁺`, with the side `l`
/// occupies.
fn factor_pairs_for(bank: &FutureSampleBank, l: AgentId) -> Vec<((AgentId, AgentId), Wrt)> {
    bank.pairs
        .iter()
        .filter_map(|&(a, b)| {
            if a == l {
                Some(((a, b), Wrt::From))
            } else if b == l {
                Some(((a, b), Wrt::To))
            } else {
                None
            }
        })
        .collect()
}

/// Assembles the gradient for CA `l` from a conditional tensor: the
/// per-sample score of `ỹ_l⁺` times the log ratio of conditional to
/// marginal, averaged over all future-measurement samples.
pub fn grad_di_from_tensor(
    bank: &FutureSampleBank,
    motion: &MotionModel,
    l: AgentId,
    tensor: &CondTensor,
) -> Result<GradDi> {
    let (j, jp) = (bank.j, bank.j_prime);
    let marg = log_marginals(tensor);
    let factors = factor_pairs_for(bank, l);
    let u_l = bank.u_ref[&l];

    // Per-factor geometry at the factor's own joint sample index.
    struct FactorGeom<'a> {
        ys: &'a [f64],
        meas: &'a MeasModel,
        d: Vec<f64>,
        ex: Vec<f64>,
        ey: Vec<f64>,
    }
    let mut geoms = Vec::with_capacity(factors.len());
    for &((a, b), wrt) in &factors {
        let meas = &bank.meas[&a];
        let mut d = Vec::with_capacity(j);
        let mut ex = Vec::with_capacity(j);
        let mut ey = Vec::with_capacity(j);
        for jj in 0..j {
            let from = bank.ca_plus[&a][jj];
            let to = bank.plus_pos(b, jj);
            let dist = hypot(from, to);
            if dist == 0.0 {
                return Err(Error::CoincidentPositions);
            }
            // Unit vector oriented toward the controlled CA's side.
            let sign = if wrt == Wrt::From { 1.0 } else { -1.0 };
            d.push(dist);
            ex.push(sign * (from[0] - to[0]) / dist);
            ey.push(sign * (from[1] - to[1]) / dist);
        }
        geoms.push(FactorGeom {
            ys: &bank.y_future[&(a, b)],
            meas,
            d,
            ex,
            ey,
        });
    }

    let mut acc = [0.0; 2];
    let mut clamped = 0u64;
    for jj in 0..j {
        let x_l = StateVec::from(bank.ca_now[&l][jj]);
        let dgdu = mean_evolve_grad_u(motion, &x_l, u_l)?;
        for jjp in 0..jp {
            let row = jj * jp + jjp;
            let mut score = [0.0; 2];
            for g in &geoms {
                let sc = g.meas.score_vs_distance(g.ys[row], g.d[jj]);
                score[0] += sc * g.ex[jj];
                score[1] += sc * g.ey[jj];
            }
            let ratio = tensor.at(jj, jjp, jj) - marg[row];
            if !ratio.is_finite() || !score[0].is_finite() || !score[1].is_finite() {
                clamped += 1;
                continue;
            }
            for c in 0..2 {
                let mapped = dgdu.at(0, c) * score[0] + dgdu.at(1, c) * score[1];
                acc[c] += mapped * ratio;
            }
        }
    }
    let scale = 1.0 / (j * jp) as f64;
    Ok(GradDi {
        grad: [acc[0] * scale, acc[1] * scale],
        clamped,
    })
}

/// Flooding-scheme gradient at CA `l`: exact local evaluation over the full
/// bank. Restricting the bank to the CA's own anchor measurement implements
/// the censored-mode objective (own-state entropy only).
pub fn grad_di_flooding(
    bank: &FutureSampleBank,
    motion: &MotionModel,
    l: AgentId,
) -> Result<GradDi> {
    let tensor = conditional_log_tensor(bank);
    grad_di_from_tensor(bank, motion, l, &tensor)
}

/// Consensus-scheme gradient at CA `l`: the conditional values are
/// reconstructed from `J²J'` average-consensus instances over the group.
/// A consensus that has not converged is an approximation, not an error.
pub fn grad_di_consensus(
    bank: &FutureSampleBank,
    motion: &MotionModel,
    l: AgentId,
    graph: &Graph,
    consensus_iters: usize,
    ledger: &mut CostLedger,
) -> Result<GradDi> {
    let idx = bank
        .cas
        .iter()
        .position(|&c| c == l)
        .ok_or(Error::UnknownAgent(l))?;
    let tensors = consensus_log_tensors(bank, graph, consensus_iters, ledger);
    grad_di_from_tensor(bank, motion, l, &tensors[idx])
}

/// Charges the ledger for the sample dissemination phase of the given
/// scheme and returns the flooding round count when applicable.
///
/// Flooding: each CA floods its `J` state samples and reference control,
/// `(J·M + M_u)·W` reals. Consensus preparation: one neighbor broadcast of
/// the same payload (`J·M + M_u`) plus the pairwise exchange of reverse
/// measurement samples (`J·J'·M_y` reals to each measuring mobile
/// neighbor); the consensus instances themselves are charged by
/// [`consensus_log_tensors`].
pub fn control_exchange(
    bank: &FutureSampleBank,
    scheme: Scheme,
    graph: &Graph,
    ledger: &mut CostLedger,
) -> Result<Option<usize>> {
    let n = bank.cas.len();
    if n <= 1 {
        return Ok(None);
    }
    let m = 2u64; // CA state dimension
    let m_u = 2u64; // control dimension
    let m_y = 1u64; // distance measurements are scalar
    let payload: Vec<u64> = bank.cas.iter().map(|_| bank.j as u64 * m + m_u).collect();
    let dummies = vec![(); n];
    match scheme {
        Scheme::Flooding => {
            let (_, w) = flood(graph, &dummies, &payload, Layer::Control, ledger)?;
            Ok(Some(w))
        }
        Scheme::Consensus => {
            neighbor_exchange(graph, &dummies, &payload, Layer::Control, ledger);
            for (i, &l) in bank.cas.iter().enumerate() {
                let mut mobile_neighbors = 0u64;
                for &nb in graph.neighbors(i) {
                    let k = bank.cas[nb];
                    if bank.y_future.contains_key(&(l, k)) || bank.y_future.contains_key(&(k, l)) {
                        mobile_neighbors += 1;
                    }
                }
                ledger.charge(
                    i,
                    Layer::Control,
                    Primitive::Neighbor,
                    (bank.j * bank.j_prime) as u64 * m_y * mobile_neighbors,
                );
            }
            Ok(None)
        }
    }
}

/// Monte-Carlo gradient of the Jacobian-determinant term; closed-form zero
/// whenever the determinant does not depend on the control.
pub fn grad_g(model: &MotionModel, p: &ParticleSet, u_ref: ControlVec) -> Result<[f64; 2]> {
    match model {
        MotionModel::LinearAdditive { .. } | MotionModel::Odometry => Ok([0.0, 0.0]),
        _ => {
            let mut acc = [0.0; 2];
            for x in p.samples() {
                let det = jacobian_det(model, x, u_ref).abs();
                if det == 0.0 {
                    return Err(Error::Config(
                        "Jacobian determinant vanishes at the reference control".into(),
                    ));
                }
                let dd = jacobian_det_grad_u(model, x, u_ref);
                acc[0] += dd[0] / det;
                acc[1] += dd[1] / det;
            }
            let scale = 1.0 / p.len() as f64;
            Ok([acc[0] * scale, acc[1] * scale])
        }
    }
}

/// Constrained gradient-ascent step: `d = ∇D_I − ∇G`, scaled so the result
/// sits on the control-norm boundary. A zero ascent direction holds the
/// reference control.
pub fn control_update(
    grad_di: [f64; 2],
    grad_g: [f64; 2],
    u_ref: ControlVec,
    u_max: f64,
) -> ControlVec {
    assert!(u_max > 0.0);
    let d = [grad_di[0] - grad_g[0], grad_di[1] - grad_g[1]];
    let dn = d[0].hypot(d[1]);
    if dn == 0.0 {
        return u_ref;
    }
    // Largest c >= 0 with ||u_ref + c d|| = u_max; reduces to u_max d/||d||
    // at u_ref = 0.
    let ud = u_ref.0[0] * d[0] + u_ref.0[1] * d[1];
    let un2 = u_ref.norm().powi(2);
    let disc = (ud * ud + dn * dn * (u_max * u_max - un2)).max(0.0);
    let c = (-ud + disc.sqrt()) / (dn * dn);
    ControlVec([u_ref.0[0] + c * d[0], u_ref.0[1] + c * d[1]])
}
