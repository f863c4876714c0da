//! Almost-everywhere Byzantine agreement with unreliable global coins.
//!
//! Every slot of a node runs many binary instances in lockstep over the
//! node's intra-node graph. Each round: send the current vote to all
//! neighbours, take the majority of what arrived, keep it if its share
//! reaches the commit threshold and otherwise adopt the round's coin.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Message, Network, Payload, Phase, Pid, StateSource, Strategy};
use crate::rng::{self, Rng};
use crate::topology::Graph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoinBaError {
    #[error("epsilon0 = {epsilon0} must lie in (0, epsilon/4) with epsilon = {epsilon}")]
    Slack { epsilon: f64, epsilon0: f64 },
    #[error("{members} members but the graph has {graph} vertices")]
    Shape { members: usize, graph: usize },
    #[error("expected {expected} input bits per slot, got {got}")]
    Inputs { expected: usize, got: usize },
}

/// `(1 - ε₀)(2/3 + ε/2)`.
pub fn commit_threshold(epsilon: f64, epsilon0: f64) -> f64 {
    (1.0 - epsilon0) * (2.0 / 3.0 + epsilon / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoinBaConfig {
    pub epsilon: f64,
    pub epsilon0: f64,
    pub rounds: usize,
}

impl CoinBaConfig {
    pub fn new(epsilon: f64, epsilon0: f64, rounds: usize) -> Result<Self, CoinBaError> {
        if !(epsilon0 > 0.0 && epsilon0 < epsilon / 4.0) {
            return Err(CoinBaError::Slack { epsilon, epsilon0 });
        }
        Ok(CoinBaConfig {
            epsilon,
            epsilon0,
            rounds,
        })
    }

    pub fn threshold(&self) -> f64 {
        commit_threshold(self.epsilon, self.epsilon0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoterState {
    pub vote: bool,
    pub maj: bool,
    pub fraction: f64,
    /// Whether the last update kept `maj` because the threshold was met.
    pub passed: bool,
}

impl VoterState {
    pub fn new(vote: bool) -> Self {
        VoterState {
            vote,
            maj: vote,
            fraction: 0.0,
            passed: false,
        }
    }
}

/// One update from `ones` and `zeros` received votes.
pub fn step(state: VoterState, ones: usize, zeros: usize, coin: bool, threshold: f64) -> VoterState {
    let total = ones + zeros;
    let maj = if ones != zeros { ones > zeros } else { state.vote };
    let fraction = if total == 0 {
        0.0
    } else {
        ones.max(zeros) as f64 / total as f64
    };
    let passed = total > 0 && fraction >= threshold;
    VoterState {
        vote: if passed { maj } else { coin },
        maj,
        fraction,
        passed,
    }
}

/// Per-round, per-instance statistics over good slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub instance: usize,
    pub good: usize,
    /// Good slots voting 1 when the round started.
    pub ones_before: usize,
    pub ones_after: usize,
    /// Good slots that passed the threshold for 0 and for 1.
    pub passes: [usize; 2],
    /// Good slots meeting the informed inequalities.
    pub informed: usize,
    pub coin_reliable: bool,
    pub coin_bit: Option<bool>,
}

impl RoundRecord {
    pub fn unified_before(&self) -> bool {
        self.ones_before == 0 || self.ones_before == self.good
    }

    pub fn unified_after(&self) -> bool {
        self.ones_after == 0 || self.ones_after == self.good
    }

    /// Fraction of good slots on the majority side afterwards.
    pub fn agreement_after(&self) -> f64 {
        if self.good == 0 {
            return 1.0;
        }
        self.ones_after.max(self.good - self.ones_after) as f64 / self.good as f64
    }

    pub fn opposite_passes(&self) -> bool {
        self.passes[0] > 0 && self.passes[1] > 0
    }
}

/// Coins handed to each slot in one round, plus a diagnostic flag per
/// instance telling whether the round's coin was a successful global coin.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCoins {
    /// `bits[slot][instance]`.
    pub bits: Vec<Vec<bool>>,
    pub reliable: Vec<bool>,
    pub global_bit: Vec<Option<bool>>,
}

/// Standalone coin source for runs outside the full protocol.
pub trait CoinSource {
    /// `votes[slot][instance]` are the current votes, `good[slot]` marks
    /// uncorrupted slots.
    fn coins(&mut self, round: usize, votes: &[Vec<bool>], good: &[bool]) -> RoundCoins;
}

/// One fresh uniform bit per instance, delivered to everyone.
pub struct ReliableCoins {
    rng: Rng,
}

impl ReliableCoins {
    pub fn new(seed: u64) -> Self {
        ReliableCoins {
            rng: rng::stream(seed, &[rng::tags::COINS]),
        }
    }
}

impl CoinSource for ReliableCoins {
    fn coins(&mut self, _round: usize, votes: &[Vec<bool>], _good: &[bool]) -> RoundCoins {
        let instances = votes.first().map_or(0, Vec::len);
        let bits: Vec<bool> = (0..instances).map(|_| self.rng.gen()).collect();
        RoundCoins {
            bits: vec![bits.clone(); votes.len()],
            reliable: vec![true; instances],
            global_bit: bits.into_iter().map(Some).collect(),
        }
    }
}

/// Coins chosen by the adversary after seeing the votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialCoins {
    /// Each slot gets the opposite of its own vote.
    Contrary,
    /// Everyone gets the bit held by the minority of good slots.
    Minority,
    /// Even slots get 0, odd slots get 1.
    Split,
}

impl CoinSource for AdversarialCoins {
    fn coins(&mut self, _round: usize, votes: &[Vec<bool>], good: &[bool]) -> RoundCoins {
        let instances = votes.first().map_or(0, Vec::len);
        let bits = match self {
            AdversarialCoins::Contrary => votes.iter().map(|v| v.iter().map(|b| !b).collect()).collect(),
            AdversarialCoins::Minority => {
                let minority: Vec<bool> = (0..instances)
                    .map(|i| {
                        let total = good.iter().filter(|&&g| g).count();
                        let ones = (0..votes.len()).filter(|&s| good[s] && votes[s][i]).count();
                        2 * ones < total
                    })
                    .collect();
                vec![minority; votes.len()]
            }
            AdversarialCoins::Split => (0..votes.len()).map(|s| vec![s % 2 == 1; instances]).collect(),
        };
        RoundCoins {
            bits,
            reliable: vec![false; instances],
            global_bit: vec![None; instances],
        }
    }
}

/// Reliable with probability `p` per round, otherwise `fallback`.
pub struct MixedCoins {
    pub p: f64,
    pub fallback: AdversarialCoins,
    reliable: ReliableCoins,
    rng: Rng,
}

impl MixedCoins {
    pub fn new(p: f64, fallback: AdversarialCoins, seed: u64) -> Self {
        MixedCoins {
            p,
            fallback,
            reliable: ReliableCoins::new(seed),
            rng: rng::stream(seed, &[rng::tags::COINS, 1]),
        }
    }
}

impl CoinSource for MixedCoins {
    fn coins(&mut self, round: usize, votes: &[Vec<bool>], good: &[bool]) -> RoundCoins {
        if self.rng.gen_bool(self.p) {
            self.reliable.coins(round, votes, good)
        } else {
            self.fallback.coins(round, votes, good)
        }
    }
}

/// Lockstep state of every slot in one node.
pub struct CoinBa<'g> {
    graph: &'g Graph,
    members: Vec<Pid>,
    slots_of: HashMap<Pid, Vec<usize>>,
    sorted_adj: Option<Vec<Vec<usize>>>,
    instances: usize,
    threshold: f64,
    epsilon: f64,
    epsilon0: f64,
    /// Slots that take part; others neither send nor count.
    active: Vec<bool>,
    states: Vec<Vec<VoterState>>,
    ones: Vec<Vec<u32>>,
    zeros: Vec<Vec<u32>>,
    round: usize,
    pub dropped_votes: u64,
    pub record: bool,
    pub transcript: Vec<RoundRecord>,
}

impl<'g> CoinBa<'g> {
    pub fn new(
        graph: &'g Graph,
        members: &[Pid],
        inputs: &[Vec<bool>],
        epsilon: f64,
        epsilon0: f64,
    ) -> Result<Self, CoinBaError> {
        if members.len() != graph.size() {
            return Err(CoinBaError::Shape {
                members: members.len(),
                graph: graph.size(),
            });
        }
        if inputs.len() != members.len() {
            return Err(CoinBaError::Shape {
                members: inputs.len(),
                graph: graph.size(),
            });
        }
        let instances = inputs.first().map_or(0, Vec::len);
        if let Some(bad) = inputs.iter().find(|v| v.len() != instances) {
            return Err(CoinBaError::Inputs {
                expected: instances,
                got: bad.len(),
            });
        }
        let mut slots_of: HashMap<Pid, Vec<usize>> = HashMap::new();
        for (s, &p) in members.iter().enumerate() {
            slots_of.entry(p).or_default().push(s);
        }
        let sorted_adj = match graph {
            Graph::Complete(_) => None,
            Graph::Adjacency(a) => Some(
                a.iter()
                    .map(|nb| {
                        let mut v = nb.clone();
                        v.sort_unstable();
                        v
                    })
                    .collect(),
            ),
        };
        let k = members.len();
        Ok(CoinBa {
            graph,
            members: members.to_vec(),
            slots_of,
            sorted_adj,
            instances,
            threshold: commit_threshold(epsilon, epsilon0),
            epsilon,
            epsilon0,
            active: vec![true; k],
            states: inputs
                .iter()
                .map(|v| v.iter().map(|&b| VoterState::new(b)).collect())
                .collect(),
            ones: vec![vec![0; instances]; k],
            zeros: vec![vec![0; instances]; k],
            round: 0,
            dropped_votes: 0,
            record: true,
            transcript: Vec::new(),
        })
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn members(&self) -> &[Pid] {
        &self.members
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Excludes a slot (for example one that cannot index the instances).
    pub fn deactivate(&mut self, slot: usize) {
        self.active[slot] = false;
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.active[slot]
    }

    pub fn votes(&self) -> Vec<Vec<bool>> {
        self.states.iter().map(|v| v.iter().map(|s| s.vote).collect()).collect()
    }

    pub fn states(&self, slot: usize) -> &[VoterState] {
        &self.states[slot]
    }

    /// Vote messages for this round, one per directed edge.
    pub fn outbox(&self) -> Vec<Message> {
        let mut out = Vec::new();
        for s in 0..self.members.len() {
            if !self.active[s] {
                continue;
            }
            let votes: Vec<bool> = self.states[s].iter().map(|st| st.vote).collect();
            for u in self.graph.neighbors(s) {
                if self.active[u] {
                    out.push(Message::new(self.members[s], self.members[u], Payload::Votes(votes.clone())));
                }
            }
        }
        out
    }

    fn is_edge(&self, a: usize, b: usize) -> bool {
        match &self.sorted_adj {
            None => a != b,
            Some(adj) => adj[b].binary_search(&a).is_ok(),
        }
    }

    /// Counts the first vote per edge; extra or malformed votes are dropped.
    pub fn tally(&mut self, delivered: &[Message]) {
        let k = self.members.len();
        for row in self.ones.iter_mut().chain(self.zeros.iter_mut()) {
            row.iter_mut().for_each(|x| *x = 0);
        }
        let mut seen = vec![false; k * k];
        for m in delivered {
            let votes = match &m.payload {
                Payload::Votes(v) if v.len() == self.instances => v,
                _ => {
                    self.dropped_votes += 1;
                    continue;
                }
            };
            let (Some(from), Some(to)) = (self.slots_of.get(&m.from), self.slots_of.get(&m.to)) else {
                self.dropped_votes += 1;
                continue;
            };
            let mut edge = None;
            'find: for &b in to {
                if !self.active[b] {
                    continue;
                }
                for &a in from {
                    if self.is_edge(a, b) && !seen[b * k + a] {
                        edge = Some((a, b));
                        break 'find;
                    }
                }
            }
            let Some((a, b)) = edge else {
                self.dropped_votes += 1;
                continue;
            };
            seen[b * k + a] = true;
            for (i, &v) in votes.iter().enumerate() {
                if v {
                    self.ones[b][i] += 1;
                } else {
                    self.zeros[b][i] += 1;
                }
            }
        }
    }

    /// Applies the update with this round's coins; `good[slot]` feeds the
    /// diagnostics only.
    pub fn apply(&mut self, coins: &RoundCoins, good: &[bool]) {
        let k = self.members.len();
        let good_active: Vec<bool> = (0..k).map(|s| good[s] && self.active[s]).collect();
        let n_good = good_active.iter().filter(|&&g| g).count();
        let mut before = vec![0usize; self.instances];
        if self.record {
            for (s, g) in good_active.iter().enumerate() {
                if *g {
                    for (i, st) in self.states[s].iter().enumerate() {
                        before[i] += st.vote as usize;
                    }
                }
            }
        }
        let mut next = self.states.clone();
        for s in 0..k {
            if !self.active[s] {
                continue;
            }
            for i in 0..self.instances {
                next[s][i] = step(
                    self.states[s][i],
                    self.ones[s][i] as usize,
                    self.zeros[s][i] as usize,
                    coins.bits[s][i],
                    self.threshold,
                );
            }
        }
        if self.record {
            for i in 0..self.instances {
                let ones_b = before[i];
                let b_prime = 2 * ones_b > n_good;
                let f_prime = if b_prime { ones_b } else { n_good - ones_b } as f64 / k as f64;
                let lo = (1.0 - self.epsilon0) * f_prime;
                let hi = (1.0 + self.epsilon0) * (f_prime + 1.0 / 3.0 - self.epsilon);
                let mut rec = RoundRecord {
                    round: self.round,
                    instance: i,
                    good: n_good,
                    ones_before: ones_b,
                    ones_after: 0,
                    passes: [0, 0],
                    informed: 0,
                    coin_reliable: coins.reliable.get(i).copied().unwrap_or(false),
                    coin_bit: coins.global_bit.get(i).copied().flatten(),
                };
                for s in 0..k {
                    if !good_active[s] {
                        continue;
                    }
                    let st = next[s][i];
                    rec.ones_after += st.vote as usize;
                    if st.passed {
                        rec.passes[st.maj as usize] += 1;
                    }
                    let total = self.ones[s][i] + self.zeros[s][i];
                    if total > 0 {
                        let toward = if b_prime { self.ones[s][i] } else { self.zeros[s][i] };
                        let frac = toward as f64 / total as f64;
                        if frac >= lo - 1e-12 && frac <= hi + 1e-12 {
                            rec.informed += 1;
                        }
                    }
                }
                self.transcript.push(rec);
            }
        }
        self.states = next;
        self.round += 1;
    }

    /// Final votes, `committed[slot][instance]`.
    pub fn committed(&self) -> Vec<Vec<bool>> {
        self.votes()
    }
}

/// Network plus coins: what a standalone run needs per round.
pub struct StandaloneEnv<'a> {
    pub net: &'a mut Network,
    pub adversary: &'a mut dyn Strategy,
    pub state: &'a mut dyn StateSource,
    pub coins: &'a mut dyn CoinSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoinBaOutcome {
    pub committed: Vec<Vec<bool>>,
    pub transcript: Vec<RoundRecord>,
    pub good: Vec<bool>,
    pub dropped_votes: u64,
}

impl CoinBaOutcome {
    /// Fraction of good slots holding the most common final bit of `instance`.
    pub fn agreement(&self, instance: usize) -> (f64, bool) {
        let good: Vec<usize> = (0..self.good.len()).filter(|&s| self.good[s]).collect();
        if good.is_empty() {
            return (1.0, false);
        }
        let ones = good.iter().filter(|&&s| self.committed[s][instance]).count();
        let bit = 2 * ones > good.len();
        let count = if bit { ones } else { good.len() - ones };
        (count as f64 / good.len() as f64, bit)
    }
}

/// Runs `cfg.rounds` rounds over `graph`, whose vertex `s` is processor
/// `members[s]`.
pub fn run(
    graph: &Graph,
    members: &[Pid],
    inputs: &[Vec<bool>],
    cfg: &CoinBaConfig,
    env: StandaloneEnv<'_>,
) -> Result<CoinBaOutcome, CoinBaError> {
    let mut ba = CoinBa::new(graph, members, inputs, cfg.epsilon, cfg.epsilon0)?;
    for round in 0..cfg.rounds {
        let delivered = env
            .net
            .run_round(Phase::Vote, ba.outbox(), &mut *env.adversary, &mut *env.state);
        ba.tally(&delivered);
        let good: Vec<bool> = members.iter().map(|&p| !env.net.is_corrupted(p)).collect();
        let coins = env.coins.coins(round, &ba.votes(), &good);
        ba.apply(&coins, &good);
    }
    let good: Vec<bool> = members.iter().map(|&p| !env.net.is_corrupted(p)).collect();
    Ok(CoinBaOutcome {
        committed: ba.committed(),
        dropped_votes: ba.dropped_votes,
        transcript: std::mem::take(&mut ba.transcript),
        good,
    })
}

/// Whether, once every good slot votes the same bit, it never changes
/// again, for every instance of the transcript.
pub fn persistence_holds(transcript: &[RoundRecord]) -> bool {
    let mut locked: HashMap<usize, bool> = HashMap::new();
    for rec in transcript {
        if let Some(&bit) = locked.get(&rec.instance) {
            let ok = if bit { rec.ones_after == rec.good } else { rec.ones_after == 0 };
            if !ok {
                return false;
            }
        } else if rec.unified_after() && rec.good > 0 {
            locked.insert(rec.instance, rec.ones_after == rec.good);
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{strategies, AdversaryConfig, AdversaryKind, BitWidths, Stateless};
    use crate::topology::random_regular_graph;
    use proptest::prelude::*;

    fn widths() -> BitWidths {
        BitWidths {
            field_bits: 9,
            word_bits: 8,
            label_bits: 4,
            modulus: 257,
        }
    }

    #[test]
    fn threshold_arithmetic() {
        let t = commit_threshold(0.1, 0.05);
        assert!((t - 0.95 * (2.0 / 3.0 + 0.05)).abs() < 1e-12);
        assert!((t - 0.680833).abs() < 1e-6);
        let s = step(VoterState::new(false), 8, 2, false, t);
        assert!(s.vote && s.passed);
        let s = step(VoterState::new(true), 5, 5, false, t);
        assert!(!s.vote && !s.passed);
        let s = step(VoterState::new(true), 5, 5, true, t);
        assert!(s.vote);
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = step(VoterState::new(false), 3, 1, false, 0.75);
        assert!(s.passed && s.vote);
        let s = step(VoterState::new(false), 3, 2, false, 0.6);
        assert!(s.passed && s.vote);
    }

    #[test]
    fn config_rejects_loose_slack() {
        assert!(CoinBaConfig::new(0.1, 0.05, 4).is_err());
        assert!(CoinBaConfig::new(0.1, 0.02, 4).is_ok());
    }

    #[test]
    fn unanimous_without_adversary_commits_after_one_round() {
        let mut r = rng::stream(1, &[0]);
        let g = random_regular_graph(64, 8, &mut r).unwrap();
        let members: Vec<Pid> = (0..64).collect();
        let inputs = vec![vec![true, false]; 64];
        let mut net = Network::new(64, 0, widths());
        let mut coins = AdversarialCoins::Contrary;
        let out = run(
            &g,
            &members,
            &inputs,
            &CoinBaConfig::new(0.1, 0.02, 1).unwrap(),
            StandaloneEnv {
                net: &mut net,
                adversary: &mut strategies::Null,
                state: &mut Stateless,
                coins: &mut coins,
            },
        )
        .unwrap();
        assert!(out.committed.iter().all(|v| v == &vec![true, false]));
    }

    #[test]
    fn reliable_coins_unify_split_inputs_on_a_complete_graph() {
        let k = 30;
        let g = Graph::Complete(k);
        let members: Vec<Pid> = (0..k).collect();
        let inputs: Vec<Vec<bool>> = (0..k).map(|s| vec![s % 2 == 0]).collect();
        let mut net = Network::new(k, 0, widths());
        let mut coins = ReliableCoins::new(4);
        let out = run(
            &g,
            &members,
            &inputs,
            &CoinBaConfig::new(0.1, 0.02, 10).unwrap(),
            StandaloneEnv {
                net: &mut net,
                adversary: &mut strategies::Null,
                state: &mut Stateless,
                coins: &mut coins,
            },
        )
        .unwrap();
        assert_eq!(out.agreement(0).0, 1.0);
        assert!(persistence_holds(&out.transcript));
    }

    #[test]
    fn extra_votes_on_an_edge_are_dropped() {
        let g = Graph::Complete(3);
        let members = [0, 1, 2];
        let mut ba = CoinBa::new(&g, &members, &vec![vec![false]; 3], 0.1, 0.02).unwrap();
        let mut d = ba.outbox();
        d.push(Message::new(0, 1, Payload::Votes(vec![true])));
        d.push(Message::new(0, 1, Payload::Votes(vec![true, true])));
        ba.tally(&d);
        assert_eq!(ba.dropped_votes, 2);
        assert_eq!(ba.ones[1][0], 0);
        assert_eq!(ba.zeros[1][0], 2);
    }

    #[test]
    fn byzantine_flippers_are_recorded() {
        let k = 40;
        let g = Graph::Complete(k);
        let members: Vec<Pid> = (0..k).collect();
        let inputs = vec![vec![true]; k];
        let mut net = Network::new(k, 10, widths());
        let mut adv = strategies::build(&AdversaryConfig::new(AdversaryKind::StaticByzantine, k, 8, 3));
        let mut coins = AdversarialCoins::Contrary;
        let out = run(
            &g,
            &members,
            &inputs,
            &CoinBaConfig::new(0.1, 0.02, 5).unwrap(),
            StandaloneEnv {
                net: &mut net,
                adversary: adv.as_mut(),
                state: &mut Stateless,
                coins: &mut coins,
            },
        )
        .unwrap();
        assert_eq!(out.good.iter().filter(|&&g| !g).count(), 8);
        assert_eq!(out.agreement(0), (1.0, true));
        assert_eq!(out.transcript.len(), 5);
        assert!(out.transcript.iter().all(|r| r.good == 32));
    }

    proptest! {
        #[test]
        fn step_follows_the_rule(ones in 0usize..30, zeros in 0usize..30, coin: bool, vote: bool, t in 0.5f64..1.0) {
            let s = step(VoterState::new(vote), ones, zeros, coin, t);
            let total = ones + zeros;
            if total > 0 && (ones.max(zeros) as f64 / total as f64) >= t {
                prop_assert!(s.passed);
                if ones != zeros {
                    prop_assert_eq!(s.vote, ones > zeros);
                }
            } else {
                prop_assert_eq!(s.vote, coin);
            }
        }
    }
}
