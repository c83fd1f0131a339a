//! Simulated synchronous-round communication fabric: neighbor broadcast,
//! flooding, average consensus, max consensus, and communication-cost
//! accounting.
//!
//! The fabric enforces a barrier per round: all sends complete before any
//! receive is visible. Rounds are lossless and deterministic.

use crate::error::{Error, Result};

/// Undirected communication graph over participant indices `0..n`.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            assert!(a < n && b < n && a != b);
            if !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        Self { n, adj }
    }

    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push((a, b));
            }
        }
        Self::new(n, &edges)
    }

    pub fn line(n: usize) -> Self {
        let edges: Vec<_> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Self::new(n, &edges)
    }

    pub fn edgeless(n: usize) -> Self {
        Self::new(n, &[])
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn is_complete(&self) -> bool {
        self.adj.iter().all(|l| l.len() == self.n - 1)
    }

    /// Nodes unreachable from node 0 (empty iff connected).
    pub fn unreachable(&self) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let mut seen = vec![false; self.n];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(i) = queue.pop() {
            for &j in &self.adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
        (0..self.n).filter(|&i| !seen[i]).collect()
    }
}

/// Which processing layer a transmission belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Layer {
    Estimation,
    Control,
}

/// Which communication primitive carried a transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Primitive {
    Neighbor,
    Flood,
    Consensus,
}

pub const ALL_LAYERS: [Layer; 2] = [Layer::Estimation, Layer::Control];
pub const ALL_PRIMITIVES: [Primitive; 3] =
    [Primitive::Neighbor, Primitive::Flood, Primitive::Consensus];

/// Per-CA counters of real values transmitted, by layer and primitive.
/// Counters only ever increase within a run.
#[derive(Debug, Clone)]
pub struct CostLedger {
    n: usize,
    counts: Vec<[[u64; 3]; 2]>,
}

impl CostLedger {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![[[0; 3]; 2]; n],
        }
    }

    fn slot(layer: Layer, prim: Primitive) -> (usize, usize) {
        let l = match layer {
            Layer::Estimation => 0,
            Layer::Control => 1,
        };
        let p = match prim {
            Primitive::Neighbor => 0,
            Primitive::Flood => 1,
            Primitive::Consensus => 2,
        };
        (l, p)
    }

    pub fn charge(&mut self, ca: usize, layer: Layer, prim: Primitive, reals: u64) {
        let (l, p) = Self::slot(layer, prim);
        self.counts[ca][l][p] += reals;
    }

    pub fn get(&self, ca: usize, layer: Layer, prim: Primitive) -> u64 {
        let (l, p) = Self::slot(layer, prim);
        self.counts[ca][l][p]
    }

    pub fn layer_total(&self, ca: usize, layer: Layer) -> u64 {
        ALL_PRIMITIVES
            .iter()
            .map(|&p| self.get(ca, layer, p))
            .sum()
    }

    pub fn participants(&self) -> usize {
        self.n
    }

    /// Folds another ledger in, mapping its participant `i` onto
    /// `index_map[i]` of this ledger.
    pub fn absorb(&mut self, other: &CostLedger, index_map: &[usize]) {
        assert_eq!(other.n, index_map.len());
        for (i, &target) in index_map.iter().enumerate() {
            for l in 0..2 {
                for p in 0..3 {
                    self.counts[target][l][p] += other.counts[i][l][p];
                }
            }
        }
    }
}

/// Each CA broadcasts its payload once; every graph neighbor receives it.
/// Returns, per CA, the `(sender, payload)` pairs received in ascending
/// sender order.
pub fn neighbor_exchange<'a, T>(
    graph: &Graph,
    payloads: &'a [T],
    reals_per_payload: &[u64],
    layer: Layer,
    ledger: &mut CostLedger,
) -> Vec<Vec<(usize, &'a T)>> {
    assert_eq!(payloads.len(), graph.len());
    for i in 0..graph.len() {
        ledger.charge(i, layer, Primitive::Neighbor, reals_per_payload[i]);
    }
    (0..graph.len())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&j| (j, &payloads[j]))
                .collect()
        })
        .collect()
}

/// Relays every CA's payload network-wide. Returns per-CA views of all
/// payloads in origin order, plus the number of rounds `W` the flood took
/// (1 on a complete graph, the diameter in general). Each CA is charged its
/// own payload size once per round.
pub fn flood<'a, T>(
    graph: &Graph,
    payloads: &'a [T],
    reals_per_payload: &[u64],
    layer: Layer,
    ledger: &mut CostLedger,
) -> Result<(Vec<Vec<&'a T>>, usize)> {
    assert_eq!(payloads.len(), graph.len());
    let unreachable = graph.unreachable();
    if !unreachable.is_empty() {
        return Err(Error::Disconnected(unreachable));
    }
    let n = graph.len();
    // known[i][origin]: sequence-numbered payload `origin` seen at CA i.
    let mut known: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|o| o == i).collect())
        .collect();
    let mut rounds = 0usize;
    while known.iter().any(|k| k.iter().any(|&b| !b)) {
        rounds += 1;
        let snapshot = known.clone();
        for i in 0..n {
            for &j in graph.neighbors(i) {
                for o in 0..n {
                    if snapshot[j][o] {
                        known[i][o] = true;
                    }
                }
            }
        }
    }
    let w = rounds.max(1);
    for i in 0..n {
        ledger.charge(i, layer, Primitive::Flood, reals_per_payload[i] * w as u64);
    }
    let delivered = (0..n)
        .map(|_| payloads.iter().collect())
        .collect();
    Ok((delivered, w))
}

/// Doubly stochastic weight matrix for one consensus iteration: uniform
/// `1/n` on a complete graph (exact average in one iteration), Metropolis
/// weights otherwise.
fn consensus_weights(graph: &Graph) -> Vec<Vec<f64>> {
    let n = graph.len();
    let mut w = vec![vec![0.0; n]; n];
    if graph.is_complete() && n > 1 {
        for row in &mut w {
            for v in row.iter_mut() {
                *v = 1.0 / n as f64;
            }
        }
        return w;
    }
    for i in 0..n {
        let mut self_weight = 1.0;
        for &j in graph.neighbors(i) {
            let wij = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
            w[i][j] = wij;
            self_weight -= wij;
        }
        w[i][i] = self_weight;
    }
    w
}

/// `R` synchronous iterations of average consensus over per-CA vectors of
/// scalars. Each CA is charged `scalars x neighbors x R` reals.
pub fn average_consensus(
    graph: &Graph,
    x0: &[Vec<f64>],
    r: usize,
    layer: Layer,
    ledger: &mut CostLedger,
) -> Vec<Vec<f64>> {
    assert_eq!(x0.len(), graph.len());
    let n = graph.len();
    let scalars = x0.first().map_or(0, Vec::len);
    for x in x0 {
        assert_eq!(x.len(), scalars);
    }
    let w = consensus_weights(graph);
    let mut cur: Vec<Vec<f64>> = x0.to_vec();
    for _ in 0..r {
        let mut next = vec![vec![0.0; scalars]; n];
        for i in 0..n {
            for j in 0..n {
                let wij = w[i][j];
                if wij != 0.0 {
                    for (nv, &cv) in next[i].iter_mut().zip(&cur[j]) {
                        *nv += wij * cv;
                    }
                }
            }
        }
        cur = next;
    }
    for i in 0..n {
        ledger.charge(
            i,
            layer,
            Primitive::Consensus,
            (scalars * graph.degree(i) * r) as u64,
        );
    }
    cur
}

/// `R` rounds of running-neighborhood max; exact global max everywhere once
/// `R` reaches the graph diameter.
pub fn max_consensus(
    graph: &Graph,
    x0: &[Vec<f64>],
    r: usize,
    layer: Layer,
    ledger: &mut CostLedger,
) -> Vec<Vec<f64>> {
    assert_eq!(x0.len(), graph.len());
    let n = graph.len();
    let scalars = x0.first().map_or(0, Vec::len);
    let mut cur: Vec<Vec<f64>> = x0.to_vec();
    for _ in 0..r {
        let snapshot = cur.clone();
        for i in 0..n {
            for &j in graph.neighbors(i) {
                for (cv, &sv) in cur[i].iter_mut().zip(&snapshot[j]) {
                    if sv > *cv {
                        *cv = sv;
                    }
                }
            }
        }
    }
    for i in 0..n {
        ledger.charge(
            i,
            layer,
            Primitive::Consensus,
            (scalars * graph.degree(i) * r) as u64,
        );
    }
    cur
}
