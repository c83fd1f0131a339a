//! Agent identities, state vectors, network topology, and measurement bundles.
//!
//! All types here are immutable values after construction and are shared
//! read-only across parallel Monte-Carlo runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particles::ParticleSet;

/// Identifies one agent. Anchors, mobile CAs, and targets occupy disjoint
/// index sets within a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Role of an agent in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    /// Static CA that broadcasts its true position and never measures.
    AnchorCa,
    /// Controlled CA that measures, communicates, and moves.
    MobileCa,
    /// Noncooperative agent: measured by CAs, never communicates.
    Target,
}

impl AgentKind {
    pub fn is_ca(self) -> bool {
        matches!(self, AgentKind::AnchorCa | AgentKind::MobileCa)
    }

    pub fn is_mobile_ca(self) -> bool {
        matches!(self, AgentKind::MobileCa)
    }
}

/// Small fixed-capacity state vector.
///
/// Dimension is fixed per agent for a whole run: 2 for CA positions,
/// 3 for odometry poses, 4 for target position+velocity.
#[derive(Clone, Copy, PartialEq)]
pub struct StateVec {
    dim: u8,
    v: [f64; Self::MAX_DIM],
}

impl StateVec {
    pub const MAX_DIM: usize = 4;

    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() > Self::MAX_DIM {
            return Err(Error::DimensionMismatch {
                expected: Self::MAX_DIM,
                got: values.len(),
            });
        }
        let mut v = [0.0; Self::MAX_DIM];
        v[..values.len()].copy_from_slice(values);
        Ok(Self {
            dim: values.len() as u8,
            v,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1 && dim <= Self::MAX_DIM);
        Self {
            dim: dim as u8,
            v: [0.0; Self::MAX_DIM],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.dim as usize]
    }

    /// First two components, which hold the agent position by convention.
    pub fn pos(&self) -> [f64; 2] {
        [self.v[0], self.v[1]]
    }
}

impl fmt::Debug for StateVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateVec{:?}", self.as_slice())
    }
}

impl Index<usize> for StateVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

impl IndexMut<usize> for StateVec {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        assert!(i < self.dim as usize);
        &mut self.v[i]
    }
}

impl From<[f64; 2]> for StateVec {
    fn from(p: [f64; 2]) -> Self {
        Self::new(&p).unwrap()
    }
}

impl From<[f64; 4]> for StateVec {
    fn from(p: [f64; 4]) -> Self {
        Self::new(&p).unwrap()
    }
}

/// Per-step displacement command for a mobile CA. The control layer keeps
/// `‖u‖ ≤ u_max` for the owning CA after every update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlVec(pub [f64; 2]);

impl ControlVec {
    pub const ZERO: Self = Self([0.0, 0.0]);

    pub fn norm(&self) -> f64 {
        self.0[0].hypot(self.0[1])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self([self.0[0] * c, self.0[1] * c])
    }
}

/// Measurement and communication neighborhoods of the network.
///
/// Holds the per-CA neighbor sets `C_l`, per-CA target sets `T_l`, and the
/// derived per-target observer sets `C_m`. The CA-CA relation is symmetric:
/// construction fails otherwise.
#[derive(Debug, Clone)]
pub struct Topology {
    ca_neighbors: BTreeMap<AgentId, BTreeSet<AgentId>>,
    ca_targets: BTreeMap<AgentId, BTreeSet<AgentId>>,
    target_observers: BTreeMap<AgentId, BTreeSet<AgentId>>,
}

impl Topology {
    pub fn new(
        ca_neighbors: BTreeMap<AgentId, BTreeSet<AgentId>>,
        ca_targets: BTreeMap<AgentId, BTreeSet<AgentId>>,
    ) -> Result<Self> {
        for (&l, neigh) in &ca_neighbors {
            for &n in neigh {
                let back = ca_neighbors
                    .get(&n)
                    .ok_or(Error::UnknownAgent(n))?
                    .contains(&l);
                if !back {
                    return Err(Error::AsymmetricTopology(l, n));
                }
            }
        }
        let mut target_observers: BTreeMap<AgentId, BTreeSet<AgentId>> = BTreeMap::new();
        for (&l, targets) in &ca_targets {
            if !ca_neighbors.contains_key(&l) {
                return Err(Error::UnknownAgent(l));
            }
            for &m in targets {
                target_observers.entry(m).or_default().insert(l);
            }
        }
        Ok(Self {
            ca_neighbors,
            ca_targets,
            target_observers,
        })
    }

    /// Fully connected CA graph over `cas`, with every CA in `observers`
    /// measuring every target in `targets`.
    pub fn fully_connected(cas: &[AgentId], observers: &[AgentId], targets: &[AgentId]) -> Self {
        let mut neigh = BTreeMap::new();
        for &l in cas {
            let set: BTreeSet<_> = cas.iter().copied().filter(|&n| n != l).collect();
            neigh.insert(l, set);
        }
        let mut tsets: BTreeMap<AgentId, BTreeSet<AgentId>> =
            cas.iter().map(|&l| (l, BTreeSet::new())).collect();
        for &l in observers {
            tsets.insert(l, targets.iter().copied().collect());
        }
        Self::new(neigh, tsets).expect("complete graph is symmetric")
    }

    /// Neighborhood sets `(C_l, T_l)` of CA `l`; `A_l` is their union.
    pub fn neighbors_of(&self, l: AgentId) -> Result<(&BTreeSet<AgentId>, &BTreeSet<AgentId>)> {
        match (self.ca_neighbors.get(&l), self.ca_targets.get(&l)) {
            (Some(c), Some(t)) => Ok((c, t)),
            _ if self.target_observers.contains_key(&l) => Err(Error::NotACa(l)),
            _ => Err(Error::UnknownAgent(l)),
        }
    }

    /// The set `C_m` of CAs that measure target `m`.
    pub fn observers_of(&self, m: AgentId) -> Result<&BTreeSet<AgentId>> {
        self.target_observers.get(&m).ok_or(Error::UnknownAgent(m))
    }

    pub fn cas(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.ca_neighbors.keys().copied()
    }

    pub fn targets(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.target_observers.keys().copied()
    }
}

/// All pairwise measurements `y_{l,k}` acquired at one time step, keyed by
/// (measuring CA, measured agent).
#[derive(Debug, Clone, Default)]
pub struct MeasurementBundle {
    entries: BTreeMap<(AgentId, AgentId), f64>,
}

impl MeasurementBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, l: AgentId, k: AgentId, y: f64) {
        self.entries.insert((l, k), y);
    }

    pub fn get(&self, l: AgentId, k: AgentId) -> Result<f64> {
        self.entries
            .get(&(l, k))
            .copied()
            .ok_or(Error::MissingMeasurement(l, k))
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentId, AgentId, f64)> + '_ {
        self.entries.iter().map(|(&(l, k), &y)| (l, k, y))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that the key set equals `{(l,k) : l measuring CA, k ∈ A_l}`.
    /// Anchors never acquire measurements, so they contribute no keys.
    pub fn validate(
        &self,
        topology: &Topology,
        kinds: &BTreeMap<AgentId, AgentKind>,
    ) -> Result<()> {
        let mut expected = BTreeSet::new();
        for l in topology.cas() {
            if kinds.get(&l).copied() != Some(AgentKind::MobileCa) {
                continue;
            }
            let (neigh, targets) = topology.neighbors_of(l)?;
            for &k in neigh.iter().chain(targets.iter()) {
                expected.insert((l, k));
            }
        }
        let got: BTreeSet<_> = self.entries.keys().copied().collect();
        if let Some(&(l, k)) = expected.symmetric_difference(&got).next() {
            return Err(Error::MissingMeasurement(l, k));
        }
        Ok(())
    }
}

/// Concatenates the `j`-th sample of each particle set, in the given agent
/// order. All modules use ascending `AgentId` order for stacking, so
/// consensus participants agree on the joint-sample layout.
pub fn stack_joint_sample(parts: &[&ParticleSet], j: usize) -> Result<Vec<f64>> {
    let Some(first) = parts.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    for p in parts {
        if p.len() != n {
            return Err(Error::MismatchedSampleCounts(n, p.len()));
        }
    }
    if j >= n {
        return Err(Error::IndexOutOfRange { index: j, len: n });
    }
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.dim()).sum());
    for p in parts {
        out.extend_from_slice(p.sample(j).as_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particles::ParticleSet;

    fn id(i: u32) -> AgentId {
        AgentId(i)
    }

    #[test]
    fn fully_connected_three_cas_has_pairwise_neighbors() {
        let cas = [id(1), id(2), id(3)];
        let topo = Topology::fully_connected(&cas, &[], &[]);
        let (c2, t2) = topo.neighbors_of(id(2)).unwrap();
        assert_eq!(c2.iter().copied().collect::<Vec<_>>(), vec![id(1), id(3)]);
        assert!(t2.is_empty());
    }

    #[test]
    fn coslat_neighborhoods() {
        // Anchor 1, mobile CAs 2..3, target 4; CA graph fully connected.
        let cas = [id(1), id(2), id(3)];
        let topo = Topology::fully_connected(&cas, &[id(2), id(3)], &[id(4)]);
        let (c2, t2) = topo.neighbors_of(id(2)).unwrap();
        assert_eq!(c2.iter().copied().collect::<Vec<_>>(), vec![id(1), id(3)]);
        assert_eq!(t2.iter().copied().collect::<Vec<_>>(), vec![id(4)]);
        assert_eq!(
            topo.observers_of(id(4))
                .unwrap()
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![id(2), id(3)]
        );
    }

    #[test]
    fn target_id_has_no_neighbor_sets() {
        let cas = [id(1), id(2)];
        let topo = Topology::fully_connected(&cas, &[id(2)], &[id(4)]);
        assert!(matches!(topo.neighbors_of(id(4)), Err(Error::NotACa(_))));
        assert!(matches!(
            topo.neighbors_of(id(9)),
            Err(Error::UnknownAgent(_))
        ));
    }

    #[test]
    fn asymmetric_topology_rejected() {
        let mut neigh = BTreeMap::new();
        neigh.insert(id(1), BTreeSet::from([id(2)]));
        neigh.insert(id(2), BTreeSet::new());
        let tsets: BTreeMap<_, _> = neigh.keys().map(|&l| (l, BTreeSet::new())).collect();
        assert!(matches!(
            Topology::new(neigh, tsets),
            Err(Error::AsymmetricTopology(_, _))
        ));
    }

    #[test]
    fn stack_concatenates_in_order() {
        let a = ParticleSet::equal_weights(vec![StateVec::from([1.0, 2.0])]).unwrap();
        let b = ParticleSet::equal_weights(vec![StateVec::from([3.0, 4.0])]).unwrap();
        let joint = stack_joint_sample(&[&a, &b], 0).unwrap();
        assert_eq!(joint, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn stack_single_set_is_identity() {
        let a = ParticleSet::equal_weights(vec![
            StateVec::from([5.0, 6.0]),
            StateVec::from([7.0, 8.0]),
        ])
        .unwrap();
        assert_eq!(stack_joint_sample(&[&a], 1).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn stack_rejects_mismatched_counts_and_bad_index() {
        let a = ParticleSet::equal_weights(vec![StateVec::from([0.0, 0.0]); 5]).unwrap();
        let b = ParticleSet::equal_weights(vec![StateVec::from([0.0, 0.0]); 6]).unwrap();
        assert!(matches!(
            stack_joint_sample(&[&a, &b], 0),
            Err(Error::MismatchedSampleCounts(5, 6))
        ));
        assert!(matches!(
            stack_joint_sample(&[&a], 5),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn measurement_bundle_key_set_validates() {
        let cas = [id(1), id(2), id(3)];
        let topo = Topology::fully_connected(&cas, &[id(2), id(3)], &[id(4)]);
        let kinds: BTreeMap<_, _> = [
            (id(1), AgentKind::AnchorCa),
            (id(2), AgentKind::MobileCa),
            (id(3), AgentKind::MobileCa),
            (id(4), AgentKind::Target),
        ]
        .into_iter()
        .collect();
        let mut bundle = MeasurementBundle::new();
        for l in [id(2), id(3)] {
            let (neigh, targets) = topo.neighbors_of(l).unwrap();
            for &k in neigh.iter().chain(targets.iter()) {
                bundle.insert(l, k, 1.0);
            }
        }
        bundle.validate(&topo, &kinds).unwrap();
        bundle.insert(id(1), id(2), 1.0); // anchors never measure
        assert!(bundle.validate(&topo, &kinds).is_err());
    }
}
