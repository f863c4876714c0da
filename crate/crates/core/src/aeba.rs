//! Almost-everywhere Byzantine agreement over the tournament tree.
//!
//! Every processor deals an array of secret blocks into its leaf. Arrays
//! climb the tree as iterated shares; at each electing level the node
//! exposes the candidates' bin choices, agrees on them with coins revealed
//! one candidate block per round, and lifts only the winners' remaining
//! blocks. The root runs one agreement on the processors' inputs, with
//! coins taken from the surviving contestants' root blocks, and may reveal
//! one extra block per contestant as a global coin subsequence.
//!
//! A word held at level `L` is stored as `L`-shares indexed by position:
//! level-1 positions are leaf slots, and position `p` at level `j` splits
//! into positions `p·d .. p·d + d` at level `j + 1`, one per uplink of the
//! slot holding it.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coinba::{CoinBa, CoinBaConfig, CoinBaError, RoundCoins, RoundRecord};
use crate::election::{run_elections, Block, ElectionEnv, NodeElection};
use crate::netsim::{Message, Metrics, Network, Payload, Phase, Pid, PublicEvent, ShareItem, Snapshot, StateSource, Strategy};
use crate::params::ProtocolParams;
use crate::rng::{self, tags, Rng};
use crate::secrets::{robust_decode, share_values, Field, SharingSpec};
use crate::topology::{Classification, NodeId, TreeTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Consumed by the election at this level.
    Level(usize),
    /// Coin source for the root agreement.
    Root,
    /// Global coin subsequence words.
    Gcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
    pub width: u32,
}

/// Where each block sits inside an array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<BlockSpan>,
}

impl Layout {
    pub fn new(p: &ProtocolParams, gcs_words: usize) -> Self {
        let mut blocks = Vec::new();
        let mut start = 0;
        for level in 2..p.root_level() {
            if p.elects_at(level) {
                let len = 1 + p.candidates_at(level);
                blocks.push(BlockSpan {
                    kind: BlockKind::Level(level),
                    start,
                    len,
                    width: p.word_width_at(level),
                });
                start += len;
            }
        }
        blocks.push(BlockSpan {
            kind: BlockKind::Root,
            start,
            len: 1,
            width: 1,
        });
        start += 1;
        if gcs_words > 0 {
            blocks.push(BlockSpan {
                kind: BlockKind::Gcs,
                start,
                len: gcs_words,
                width: p.label_bits(),
            });
        }
        Layout { blocks }
    }

    pub fn span(&self, kind: BlockKind) -> Option<BlockSpan> {
        self.blocks.iter().copied().find(|b| b.kind == kind)
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// A fresh uniformly random array.
    pub fn generate(&self, p: &ProtocolParams, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total());
        for b in &self.blocks {
            match b.kind {
                BlockKind::Level(level) => {
                    let block = Block::random(p.num_bins_at(level), b.len - 1, b.width, rng);
                    out.extend(block.words());
                }
                BlockKind::Root => out.push(rng.gen_range(0..2)),
                BlockKind::Gcs => out.extend((0..b.len).map(|_| rng.gen_range(0..p.label_range() as u32))),
            }
        }
        out
    }
}

fn share_id(array: usize, level: usize, pos: usize) -> u64 {
    ((array as u64) << 40) | ((level as u64) << 32) | pos as u64
}

fn split_id(id: u64) -> (usize, usize, usize) {
    ((id >> 40) as usize, ((id >> 32) & 0xff) as usize, (id & 0xffff_ffff) as usize)
}

#[derive(Debug, Clone)]
struct ArrayState {
    owner: Pid,
    truth: Vec<u32>,
    /// Word indices still travelling in `shares`.
    live: Vec<usize>,
    level: usize,
    /// Ancestor node index per level, leaf first.
    path: Vec<usize>,
    shares: Vec<Option<Vec<u32>>>,
    /// `slots[j-1][pos]`: slot of the level-`j` ancestor holding `pos`.
    slots: Vec<Vec<usize>>,
    /// Positions the adversary has seen, per level.
    known: Vec<Vec<bool>>,
    plain_known: bool,
    owner_holds: bool,
    alive: bool,
    /// Owner was corrupted before dealing the array.
    tainted: bool,
}

/// All share state of one trial; doubles as the corruption snapshot source.
struct Arena<'t> {
    topo: &'t TreeTopology,
    arrays: Vec<ArrayState>,
    inputs: Vec<bool>,
    d: usize,
    t_leaf: usize,
    t_up: usize,
}

impl<'t> Arena<'t> {
    fn held_by(&self, pid: Pid) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, st) in self.arrays.iter().enumerate() {
            if !st.alive || st.level == 0 {
                continue;
            }
            let level = st.level;
            let node = st.path[level - 1];
            let mine: Vec<usize> = self
                .topo
                .slots_of(pid, level)
                .iter()
                .filter(|(i, _)| *i == node)
                .map(|(_, s)| *s)
                .collect();
            if mine.is_empty() {
                continue;
            }
            for (pos, v) in st.shares.iter().enumerate() {
                if v.is_some() && mine.contains(&st.slots[level - 1][pos]) {
                    out.push((a, pos));
                }
            }
        }
        out
    }

    fn mark(&mut self, a: usize, level: usize, pos: usize) {
        let st = &mut self.arrays[a];
        if level == 0 {
            st.plain_known = true;
        } else if level <= st.known.len() && pos < st.known[level - 1].len() {
            st.known[level - 1][pos] = true;
        }
    }

    /// Whether the known positions determine the array's remaining words.
    fn secret_known(&self, a: usize) -> bool {
        let st = &self.arrays[a];
        if st.plain_known {
            return true;
        }
        if st.level == 0 {
            return false;
        }
        let mut eff = st.known[st.level - 1].clone();
        for j in (1..st.level).rev() {
            let mut up = st.known[j - 1].clone();
            for (p, flag) in up.iter_mut().enumerate() {
                if !*flag {
                    let seen = eff[p * self.d..(p + 1) * self.d].iter().filter(|&&k| k).count();
                    *flag = seen > self.t_up;
                }
            }
            eff = up;
        }
        eff.iter().filter(|&&k| k).count() > self.t_leaf
    }
}

impl StateSource for Arena<'_> {
    fn snapshot(&self, pid: Pid) -> Snapshot {
        let mut shares: Vec<(u64, Vec<u32>)> = self
            .held_by(pid)
            .into_iter()
            .map(|(a, pos)| {
                let st = &self.arrays[a];
                (
                    share_id(a, st.level, pos),
                    st.shares[pos].clone().expect("held shares exist"),
                )
            })
            .collect();
        let st = &self.arrays[pid];
        if st.owner_holds {
            shares.push((share_id(pid, 0, 0), st.live.iter().map(|&w| st.truth[w]).collect()));
        }
        Snapshot {
            pid,
            round: 0,
            input: Some(self.inputs[pid]),
            shares,
            notes: Vec::new(),
        }
    }

    fn on_corrupt(&mut self, pid: Pid, _round: u64) {
        for (a, pos) in self.held_by(pid) {
            let level = self.arrays[a].level;
            self.mark(a, level, pos);
        }
        if self.arrays[pid].owner_holds {
            self.arrays[pid].plain_known = true;
            self.arrays[pid].tainted = true;
        }
    }
}

/// Exposure checks made whenever a block is about to be revealed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SecrecyLedger {
    pub checks: u64,
    /// Reveals whose words the adversary could already reconstruct.
    pub exposures: u64,
    /// Exposures with a bad node on the array's path.
    pub excused: u64,
    /// Exposures on all-good paths: `(owner, level, round)`.
    pub violations: Vec<(Pid, usize, u64)>,
}

/// A request to reveal some words of one array to the node holding it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealReq {
    pub array: usize,
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub elections: usize,
    /// Elections whose good members did not all compute the same winners.
    pub split_elections: usize,
    pub candidates: usize,
    pub good_candidates: usize,
    pub winners: usize,
    pub good_winners: usize,
    /// Good members whose bin reveal failed, over all good members and candidates.
    pub bottom_views: f64,
}

impl LevelReport {
    pub fn good_candidate_fraction(&self) -> f64 {
        ratio(self.good_candidates, self.candidates)
    }

    pub fn good_winner_fraction(&self) -> f64 {
        ratio(self.good_winners, self.winners)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcsWord {
    pub owner: Pid,
    pub value: u32,
    /// Owner honest when it dealt its array.
    pub random: bool,
    /// Fraction of good processors that learned `value`.
    pub known_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcsOutcome {
    pub words: Vec<GcsWord>,
    /// `views[i][pid]`: what processor `pid` learned for word `i`.
    pub views: Vec<Vec<Option<u32>>>,
}

impl GcsOutcome {
    /// Words that are random and known to at least `1 - slack` of good processors.
    pub fn good_words(&self, slack: f64) -> usize {
        self.words
            .iter()
            .filter(|w| w.random && w.known_fraction >= 1.0 - slack)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AebaConfig {
    /// Words of the global coin subsequence (0 disables it).
    pub gcs_words: usize,
    pub record_transcripts: bool,
    pub trace: bool,
    pub show_metadata: bool,
}

impl Default for AebaConfig {
    fn default() -> Self {
        AebaConfig {
            gcs_words: 0,
            record_transcripts: false,
            trace: false,
            show_metadata: true,
        }
    }
}

pub struct AebaOutcome {
    /// Decided bit per processor; `None` for confused processors.
    pub outputs: Vec<Option<bool>>,
    pub inputs: Vec<bool>,
    pub corrupted: Vec<bool>,
    pub levels: Vec<LevelReport>,
    pub secrecy: SecrecyLedger,
    /// Owners of the root contestants, in contest order.
    pub contestants: Vec<Pid>,
    pub good_contestants: usize,
    pub root_transcript: Vec<RoundRecord>,
    pub gcs: Option<GcsOutcome>,
    /// Network after the run, for protocols that continue on it.
    pub network: Network,
}

impl AebaOutcome {
    pub fn metrics(&self) -> &Metrics {
        &self.network.metrics
    }

    /// Most common decided bit among good processors and the fraction of
    /// good processors holding it.
    pub fn agreement(&self) -> (Option<bool>, f64) {
        let good: Vec<usize> = (0..self.outputs.len()).filter(|&p| !self.corrupted[p]).collect();
        let ones = good.iter().filter(|&&p| self.outputs[p] == Some(true)).count();
        let zeros = good.iter().filter(|&&p| self.outputs[p] == Some(false)).count();
        if good.is_empty() || ones + zeros == 0 {
            return (None, 0.0);
        }
        let bit = ones > zeros;
        (Some(bit), ones.max(zeros) as f64 / good.len() as f64)
    }

    /// The agreed bit is the input of some good processor.
    pub fn valid(&self) -> bool {
        match self.agreement().0 {
            Some(b) => (0..self.inputs.len()).any(|p| !self.corrupted[p] && self.inputs[p] == b),
            None => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum AebaError {
    #[error("expected {expected} inputs, got {got}")]
    Inputs { expected: usize, got: usize },
    #[error(transparent)]
    CoinBa(#[from] CoinBaError),
}

/// Strict majority of `vals`, if any.
pub fn strict_majority(vals: &[u32]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in vals {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|&(_, c)| 2 * c > vals.len())
        .map(|(v, _)| v)
}

fn word_tag(array: usize, word: usize) -> u32 {
    ((array as u32) << 12) | word as u32
}

type Held = BTreeMap<(usize, usize), Vec<(usize, usize, Vec<u32>)>>;

/// Drives one execution over a topology.
struct Engine<'t, 'a> {
    topo: &'t TreeTopology,
    p: &'t ProtocolParams,
    layout: Layout,
    net: Network,
    arena: Arena<'t>,
    adv: &'a mut dyn Strategy,
    rng: Rng,
    field: Field,
    secrecy: SecrecyLedger,
    record: bool,
    /// Candidate arrays per node of the level being processed.
    candidates: Vec<Vec<usize>>,
    /// Arrays each slot of the previous level's nodes lifts.
    slot_winners: Vec<Vec<Vec<usize>>>,
}

impl<'t, 'a> Engine<'t, 'a> {
    fn new(topo: &'t TreeTopology, inputs: &[bool], adv: &'a mut dyn Strategy, seed: u64, cfg: &AebaConfig) -> Self {
        let p = &topo.params;
        let contestants = p.root_contestants().max(1);
        let layout = Layout::new(p, cfg.gcs_words.div_ceil(contestants));
        let mut net = Network::for_params(p).with_exposure_tracking();
        net.show_metadata = cfg.show_metadata;
        if cfg.trace {
            net = net.with_trace();
        }
        let arrays = (0..p.n)
            .map(|owner| {
                let mut r = rng::stream(seed, &[tags::ARRAYS, owner as u64]);
                let truth = layout.generate(p, &mut r);
                let path = topo
                    .path_to_root(NodeId::new(1, topo.leaf_of(owner)))
                    .into_iter()
                    .map(|n| n.index)
                    .collect();
                ArrayState {
                    owner,
                    live: (0..truth.len()).collect(),
                    truth,
                    level: 0,
                    path,
                    shares: Vec::new(),
                    slots: Vec::new(),
                    known: Vec::new(),
                    plain_known: false,
                    owner_holds: true,
                    alive: true,
                    tainted: false,
                }
            })
            .collect();
        Engine {
            topo,
            p,
            layout,
            net,
            arena: Arena {
                topo,
                arrays,
                inputs: inputs.to_vec(),
                d: p.uplink_degree,
                t_leaf: p.sharing_threshold(p.k1),
                t_up: p.sharing_threshold(p.uplink_degree),
            },
            adv,
            rng: rng::stream(seed, &[tags::SHARING]),
            field: Field::new(p.field_modulus).expect("validated prime"),
            secrecy: SecrecyLedger::default(),
            record: cfg.record_transcripts,
            candidates: Vec::new(),
            slot_winners: Vec::new(),
        }
    }

    fn bottom(&self) -> u32 {
        self.field.modulus()
    }

    fn round(&mut self, phase: Phase, outbox: Vec<Message>) -> Vec<Message> {
        let delivered = self.net.run_round(phase, outbox, &mut *self.adv, &mut self.arena);
        let exposed = self.net.take_exposed();
        if matches!(phase, Phase::Share | Phase::Lift) {
            for m in exposed {
                if let Payload::Shares(items) = &m.payload {
                    for it in items {
                        let (a, level, pos) = split_id(it.id);
                        if a < self.arena.arrays.len() {
                            self.arena.mark(a, level, pos);
                        }
                    }
                }
            }
        }
        delivered
    }

    fn batched_shares(batches: BTreeMap<(Pid, Pid), Vec<ShareItem>>) -> Vec<Message> {
        batches
            .into_iter()
            .map(|((from, to), items)| Message::new(from, to, Payload::Shares(items)))
            .collect()
    }

    /// Owners share their arrays among their leaf and erase them.
    fn deal(&mut self) {
        let k1 = self.p.k1;
        let spec = SharingSpec::new(k1, self.arena.t_leaf, self.p.field_modulus).expect("valid leaf sharing");
        let mut batches: BTreeMap<(Pid, Pid), Vec<ShareItem>> = BTreeMap::new();
        for a in 0..self.arena.arrays.len() {
            let st = &mut self.arena.arrays[a];
            st.slots.push((0..k1).collect());
            st.known.push(vec![false; k1]);
            let members = self.topo.members(NodeId::new(1, st.path[0]));
            let mut per_slot = vec![Vec::with_capacity(st.live.len()); k1];
            for &w in &st.live {
                for (x, v) in share_values(st.truth[w], &spec, &mut self.rng).into_iter().enumerate() {
                    per_slot[x].push(v);
                }
            }
            for (x, values) in per_slot.into_iter().enumerate() {
                batches.entry((st.owner, members[x])).or_default().push(ShareItem {
                    id: share_id(a, 1, x),
                    values,
                });
            }
        }
        let delivered = self.round(Phase::Share, Self::batched_shares(batches));
        for st in &mut self.arena.arrays {
            st.shares = vec![None; k1];
        }
        for m in delivered {
            let Payload::Shares(items) = m.payload else { continue };
            for it in items {
                let (a, level, x) = split_id(it.id);
                let Some(st) = self.arena.arrays.get_mut(a) else { continue };
                if level != 1 || x >= k1 || m.from != st.owner || it.values.len() != st.live.len() {
                    continue;
                }
                if self.topo.members(NodeId::new(1, st.path[0]))[x] == m.to && st.shares[x].is_none() {
                    st.shares[x] = Some(it.values);
                }
            }
        }
        for st in &mut self.arena.arrays {
            st.owner_holds = false;
            st.level = 1;
        }
    }

    fn lifts(&self, level: usize, node: usize, slot: usize, array: usize) -> bool {
        level == 1 || self.slot_winners[node][slot].contains(&array)
    }

    /// Every holder reshares what its slot forwards to its uplinks and erases.
    fn lift(&mut self, to_level: usize) {
        let j = to_level - 1;
        let d = self.p.uplink_degree;
        let spec = SharingSpec::new(d, self.arena.t_up, self.p.field_modulus).expect("valid uplink sharing");
        let mut batches: BTreeMap<(Pid, Pid), Vec<ShareItem>> = BTreeMap::new();
        for a in 0..self.arena.arrays.len() {
            if !self.arena.arrays[a].alive || self.arena.arrays[a].level != j {
                continue;
            }
            let (node, parent) = {
                let st = &self.arena.arrays[a];
                (NodeId::new(j, st.path[j - 1]), NodeId::new(to_level, st.path[to_level - 1]))
            };
            let len = self.arena.arrays[a].shares.len();
            let new_slots: Vec<usize> = (0..len * d)
                .map(|p2| self.topo.uplinks(node, self.arena.arrays[a].slots[j - 1][p2 / d])[p2 % d])
                .collect();
            {
                let st = &mut self.arena.arrays[a];
                st.slots.push(new_slots);
                st.known.push(vec![false; len * d]);
            }
            let st = &self.arena.arrays[a];
            let from_members = self.topo.members(node);
            let to_members = self.topo.members(parent);
            for pos in 0..len {
                let slot = st.slots[j - 1][pos];
                let Some(vals) = &st.shares[pos] else { continue };
                if !self.lifts(j, node.index, slot, a) {
                    continue;
                }
                let mut per_u = vec![Vec::with_capacity(vals.len()); d];
                for &v in vals {
                    for (u, s) in share_values(v, &spec, &mut self.rng).into_iter().enumerate() {
                        per_u[u].push(s);
                    }
                }
                for (u, values) in per_u.into_iter().enumerate() {
                    let p2 = pos * d + u;
                    batches
                        .entry((from_members[slot], to_members[st.slots[j][p2]]))
                        .or_default()
                        .push(ShareItem {
                            id: share_id(a, to_level, p2),
                            values,
                        });
                }
            }
        }
        let delivered = self.round(Phase::Lift, Self::batched_shares(batches));
        let mut fresh: HashMap<usize, Vec<Option<Vec<u32>>>> = HashMap::new();
        for m in delivered {
            let Payload::Shares(items) = m.payload else { continue };
            for it in items {
                let (a, level, p2) = split_id(it.id);
                let Some(st) = self.arena.arrays.get(a) else { continue };
                if level != to_level || !st.alive || st.level != j || p2 >= st.slots[j].len() {
                    continue;
                }
                if it.values.len() != st.live.len() {
                    continue;
                }
                let node = NodeId::new(j, st.path[j - 1]);
                let parent = NodeId::new(to_level, st.path[to_level - 1]);
                if self.topo.members(node)[st.slots[j - 1][p2 / d]] != m.from
                    || self.topo.members(parent)[st.slots[j][p2]] != m.to
                {
                    continue;
                }
                let row = fresh.entry(a).or_insert_with(|| vec![None; st.slots[j].len()]);
                if row[p2].is_none() {
                    row[p2] = Some(it.values);
                }
            }
        }
        for (a, st) in self.arena.arrays.iter_mut().enumerate() {
            if st.alive && st.level == j {
                st.shares = fresh.remove(&a).unwrap_or_else(|| vec![None; st.slots[j].len()]);
                st.level = to_level;
            }
        }
    }

    /// Keeps only `keep` alive among the arrays now at `level`.
    fn retain(&mut self, level: usize, keep: &[usize]) {
        let mut flag = vec![false; self.arena.arrays.len()];
        for &a in keep {
            flag[a] = true;
        }
        for (a, st) in self.arena.arrays.iter_mut().enumerate() {
            if st.level == level && !flag[a] {
                st.alive = false;
                st.shares.clear();
            }
        }
    }

    /// Drops a consumed block from every live array.
    fn drop_block(&mut self, kind: BlockKind) {
        let Some(span) = self.layout.span(kind) else { return };
        let range = span.start..span.start + span.len;
        for st in &mut self.arena.arrays {
            let keep: Vec<bool> = st.live.iter().map(|w| !range.contains(w)).collect();
            let mut k = keep.iter();
            st.live.retain(|_| *k.next().expect("same length"));
            for v in st.shares.iter_mut().flatten() {
                let mut k = keep.iter();
                v.retain(|_| *k.next().expect("same length"));
            }
        }
    }

    fn check_secrecy(&mut self, level: usize, reqs: &[RevealReq]) {
        let cls: Classification = self.topo.classify_nodes(self.net.corrupted());
        for r in reqs {
            let st = &self.arena.arrays[r.array];
            if !st.alive || st.level != level {
                continue;
            }
            self.secrecy.checks += 1;
            if !self.arena.secret_known(r.array) {
                continue;
            }
            self.secrecy.exposures += 1;
            let bad_path = st.path[..level]
                .iter()
                .enumerate()
                .any(|(j, &i)| !cls.is_good(NodeId::new(j + 1, i)));
            if st.tainted || bad_path {
                self.secrecy.excused += 1;
            } else {
                self.secrecy.violations.push((st.owner, level, self.net.round()));
            }
        }
    }

    /// Reveals words of arrays held at `level` to the nodes holding them:
    /// shares descend to the leaves, leaves reconstruct, and every member of
    /// each linked leaf reports to the holding node. Returns
    /// `[request][slot][word]`.
    fn reveal(&mut self, level: usize, reqs: &[RevealReq]) -> Vec<Vec<Vec<Option<u32>>>> {
        self.check_secrecy(level, reqs);
        let bottom = self.bottom();
        let by_array: HashMap<usize, usize> = reqs.iter().enumerate().map(|(i, r)| (r.array, i)).collect();
        let mut held: Held = BTreeMap::new();
        for r in reqs {
            let st = &self.arena.arrays[r.array];
            if !st.alive || st.level != level {
                continue;
            }
            let idx: Vec<Option<usize>> = r.words.iter().map(|w| st.live.iter().position(|x| x == w)).collect();
            for (pos, v) in st.shares.iter().enumerate() {
                let Some(v) = v else { continue };
                let vals = idx.iter().map(|i| i.map_or(bottom, |i| v[i])).collect();
                held.entry((st.path[level - 1], st.slots[level - 1][pos]))
                    .or_default()
                    .push((r.array, pos, vals));
            }
        }
        for j in (2..=level).rev() {
            held = self.descend(j, level, held, reqs, &by_array);
        }
        let versions = self.exchange_at_leaves(held, reqs, &by_array);
        self.open(level, reqs, &by_array, &versions)
    }

    fn descend(
        &mut self,
        j: usize,
        level: usize,
        held: Held,
        reqs: &[RevealReq],
        by_array: &HashMap<usize, usize>,
    ) -> Held {
        let d = self.p.uplink_degree;
        let topo = self.topo;
        let mut batches: BTreeMap<(Pid, Pid), Vec<ShareItem>> = BTreeMap::new();
        for ((node, slot), items) in &held {
            let x = NodeId::new(j, *node);
            let from = topo.members(x)[*slot];
            for child in topo.children(x) {
                let cm = topo.members(child);
                for (a, pos, vals) in items {
                    let target = self.arena.arrays[*a].slots[j - 2][pos / d];
                    batches.entry((from, cm[target])).or_default().push(ShareItem {
                        id: share_id(*a, j, *pos),
                        values: vals.clone(),
                    });
                }
            }
        }
        let delivered = self.round(Phase::Down, Self::batched_shares(batches));
        let mut recv: BTreeMap<(usize, usize, usize, usize), Vec<Option<Vec<u32>>>> = BTreeMap::new();
        for m in delivered {
            let Payload::Shares(items) = m.payload else { continue };
            for it in items {
                let (a, lvl, pos) = split_id(it.id);
                let Some(&r) = by_array.get(&a) else { continue };
                let st = &self.arena.arrays[a];
                if lvl != j || st.level != level || pos >= st.slots[j - 1].len() || it.values.len() != reqs[r].words.len() {
                    continue;
                }
                let origin = topo.leaf_range(NodeId::new(level, st.path[level - 1]));
                let (p, u) = (pos / d, pos % d);
                let target = st.slots[j - 2][p];
                for &(ni, s) in topo.slots_of(m.to, j - 1) {
                    if s != target {
                        continue;
                    }
                    let parent = topo.parent(NodeId::new(j - 1, ni)).expect("below the root");
                    let range = topo.leaf_range(parent);
                    if range.start < origin.start || range.end > origin.end {
                        continue;
                    }
                    if topo.members(parent)[st.slots[j - 1][pos]] != m.from {
                        continue;
                    }
                    let entry = recv.entry((ni, s, a, p)).or_insert_with(|| vec![None; d]);
                    if entry[u].is_none() {
                        entry[u] = Some(it.values.clone());
                    }
                }
            }
        }
        let t = self.arena.t_up;
        let mut out: Held = BTreeMap::new();
        for ((ni, s, a, p), pts) in recv {
            let words = reqs[by_array[&a]].words.len();
            let vals = (0..words).map(|w| self.decode(t, &pts, w)).collect();
            out.entry((ni, s)).or_default().push((a, p, vals));
        }
        out
    }

    /// Robustly decodes word `w` from points at `x = index + 1`.
    fn decode(&self, t: usize, pts: &[Option<Vec<u32>>], w: usize) -> u32 {
        let bottom = self.bottom();
        let (xs, ys): (Vec<u32>, Vec<u32>) = pts
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().filter(|v| v[w] < bottom).map(|v| (i as u32 + 1, v[w])))
            .unzip();
        robust_decode(self.field, t, &xs, &ys).unwrap_or(bottom)
    }

    /// Leaf members swap their 1-shares; returns each member's version per array.
    fn exchange_at_leaves(
        &mut self,
        held: Held,
        reqs: &[RevealReq],
        by_array: &HashMap<usize, usize>,
    ) -> HashMap<(usize, usize), HashMap<usize, Vec<Option<u32>>>> {
        let k1 = self.p.k1;
        let topo = self.topo;
        let mut points: BTreeMap<(usize, usize, usize), Vec<Option<Vec<u32>>>> = BTreeMap::new();
        let mut batches: BTreeMap<(Pid, Pid), Vec<ShareItem>> = BTreeMap::new();
        for ((leaf, slot), items) in &held {
            let mem = topo.members(NodeId::new(1, *leaf));
            for (a, x, vals) in items {
                points.entry((*leaf, *slot, *a)).or_insert_with(|| vec![None; k1])[*x] = Some(vals.clone());
                for (s2, &to) in mem.iter().enumerate() {
                    if s2 != *slot {
                        batches.entry((mem[*slot], to)).or_default().push(ShareItem {
                            id: share_id(*a, 1, *x),
                            values: vals.clone(),
                        });
                    }
                }
            }
        }
        let delivered = self.round(Phase::Exchange, Self::batched_shares(batches));
        for m in delivered {
            let Payload::Shares(items) = m.payload else { continue };
            for it in items {
                let (a, lvl, x) = split_id(it.id);
                let Some(&r) = by_array.get(&a) else { continue };
                if lvl != 1 || x >= k1 || it.values.len() != reqs[r].words.len() {
                    continue;
                }
                for &(leaf, s) in topo.slots_of(m.to, 1) {
                    if s == x || topo.members(NodeId::new(1, leaf))[x] != m.from {
                        continue;
                    }
                    let entry = points.entry((leaf, s, a)).or_insert_with(|| vec![None; k1]);
                    if entry[x].is_none() {
                        entry[x] = Some(it.values.clone());
                    }
                }
            }
        }
        let t = self.arena.t_leaf;
        let bottom = self.bottom();
        let mut versions: HashMap<(usize, usize), HashMap<usize, Vec<Option<u32>>>> = HashMap::new();
        for ((leaf, s, a), pts) in points {
            let words = reqs[by_array[&a]].words.len();
            let vals = (0..words)
                .map(|w| Some(self.decode(t, &pts, w)).filter(|&v| v < bottom))
                .collect();
            versions.entry((leaf, s)).or_default().insert(a, vals);
        }
        versions
    }

    fn open(
        &mut self,
        level: usize,
        reqs: &[RevealReq],
        by_array: &HashMap<usize, usize>,
        versions: &HashMap<(usize, usize), HashMap<usize, Vec<Option<u32>>>>,
    ) -> Vec<Vec<Vec<Option<u32>>>> {
        let topo = self.topo;
        let mut at_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in reqs.iter().enumerate() {
            at_node.entry(self.arena.arrays[r.array].path[level - 1]).or_default().push(i);
        }
        let linked = |node: NodeId, y: usize| {
            let mut v = topo.elllinks(node, y).to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut batches: BTreeMap<(Pid, Pid), Vec<(u32, u32)>> = BTreeMap::new();
        for (&ni, idx) in &at_node {
            let node = NodeId::new(level, ni);
            for (y, &to) in topo.members(node).iter().enumerate() {
                for leaf in linked(node, y) {
                    for (s, &from) in topo.members(NodeId::new(1, leaf)).iter().enumerate() {
                        let Some(ver) = versions.get(&(leaf, s)) else { continue };
                        for &i in idx {
                            let a = reqs[i].array;
                            let Some(vals) = ver.get(&a) else { continue };
                            for (w, v) in vals.iter().enumerate() {
                                if let Some(v) = v {
                                    batches.entry((from, to)).or_default().push((word_tag(a, w), *v));
                                }
                            }
                        }
                    }
                }
            }
        }
        let outbox = batches
            .into_iter()
            .map(|((from, to), words)| Message::new(from, to, Payload::Words(words)))
            .collect();
        let delivered = self.round(Phase::Open, outbox);
        // reports[(node, slot, tag)][leaf] -> values
        let mut reports: HashMap<(usize, usize, u32), BTreeMap<usize, Vec<u32>>> = HashMap::new();
        let mut seen: std::collections::HashSet<(usize, usize, Pid, usize, u32)> = Default::default();
        let mut links: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for m in delivered {
            let Payload::Words(words) = &m.payload else { continue };
            for &(tag, v) in words {
                let a = (tag >> 12) as usize;
                let Some(&r) = by_array.get(&a) else { continue };
                if (tag & 0xfff) as usize >= reqs[r].words.len() {
                    continue;
                }
                let ni = self.arena.arrays[a].path[level - 1];
                for &(n2, y) in topo.slots_of(m.to, level) {
                    if n2 != ni {
                        continue;
                    }
                    let leaves = links.entry((ni, y)).or_insert_with(|| linked(NodeId::new(level, ni), y));
                    for &(leaf, _) in topo.slots_of(m.from, 1) {
                        if leaves.binary_search(&leaf).is_ok() && seen.insert((ni, y, m.from, leaf, tag)) {
                            reports.entry((ni, y, tag)).or_default().entry(leaf).or_default().push(v);
                        }
                    }
                }
            }
        }
        reqs.iter()
            .map(|r| {
                let ni = self.arena.arrays[r.array].path[level - 1];
                let k = topo.members(NodeId::new(level, ni)).len();
                (0..k)
                    .map(|y| {
                        (0..r.words.len())
                            .map(|w| {
                                let per_leaf = reports.get(&(ni, y, word_tag(r.array, w)))?;
                                let leaf_versions: Vec<u32> =
                                    per_leaf.values().filter_map(|vals| strict_majority(vals)).collect();
                                strict_majority(&leaf_versions)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Candidate lists of every node at `level`, from the children's forwarded arrays.
    fn gather(&mut self, level: usize, forwarded: &[Vec<usize>]) {
        let topo = self.topo;
        self.candidates = topo
            .nodes(level)
            .map(|node| {
                topo.children(node)
                    .into_iter()
                    .flat_map(|c| forwarded[c.index].iter().copied())
                    .collect()
            })
            .collect();
    }

    fn elect(&mut self, level: usize) -> Result<(LevelReport, Vec<Vec<usize>>), AebaError> {
        let topo = self.topo;
        let span = self.layout.span(BlockKind::Level(level)).expect("electing level has a block");
        let num_bins = self.p.num_bins_at(level);
        let width = span.width;
        let mask = (1u32 << width) - 1;
        let cands = self.candidates.clone();
        let reqs: Vec<RevealReq> = cands
            .iter()
            .flatten()
            .map(|&a| RevealReq {
                array: a,
                words: vec![span.start],
            })
            .collect();
        let revealed = self.reveal(level, &reqs);
        let mut report = LevelReport {
            level,
            ..LevelReport::default()
        };
        let mut bottoms = 0usize;
        let mut good_views = 0usize;
        let mut next = 0;
        let mut elections = Vec::new();
        for (ni, list) in cands.iter().enumerate() {
            let node = NodeId::new(level, ni);
            let members = topo.members(node);
            let mut views = vec![Vec::with_capacity(list.len()); members.len()];
            for _ in list {
                for (y, row) in revealed[next].iter().enumerate() {
                    views[y].push(row[0].map(|b| b & mask));
                    if !self.net.is_corrupted(members[y]) {
                        good_views += 1;
                        bottoms += usize::from(row[0].is_none());
                    }
                }
                next += 1;
            }
            elections.push(NodeElection {
                graph: topo.intra(node),
                members: members.to_vec(),
                views,
                num_bins,
                width,
            });
        }
        let (eps, eps0, record) = (self.p.epsilon, self.p.epsilon0, self.record);
        let mut env = LevelEnv {
            engine: self,
            level,
            cands: &cands,
            coin_start: span.start + 1,
            coin_len: span.len - 1,
            mask,
        };
        let results = run_elections(&elections, eps, eps0, record, &mut env)?;
        let mut forwarded = Vec::with_capacity(cands.len());
        let mut slot_winners = Vec::with_capacity(cands.len());
        for (ni, res) in results.iter().enumerate() {
            let list = &cands[ni];
            let per_slot: Vec<Vec<usize>> = res
                .outcomes
                .iter()
                .map(|o| o.winners.iter().map(|&i| list[i]).collect())
                .collect();
            let chosen = plurality(&per_slot);
            report.elections += 1;
            report.split_elections += usize::from(!res.consensus().1);
            report.candidates += list.len();
            report.good_candidates += list.iter().filter(|&&a| !self.arena.arrays[a].tainted).count();
            report.winners += chosen.len();
            report.good_winners += chosen.iter().filter(|&&a| !self.arena.arrays[a].tainted).count();
            self.net.publish(PublicEvent::Election {
                node: NodeId::new(level, ni),
                winners: chosen.iter().map(|&a| self.arena.arrays[a].owner).collect(),
                holders: topo.members(NodeId::new(level, ni)).to_vec(),
            });
            forwarded.push(chosen);
            slot_winners.push(per_slot);
        }
        report.bottom_views = ratio(bottoms, good_views).min(1.0);
        if good_views == 0 {
            report.bottom_views = 0.0;
        }
        self.slot_winners = slot_winners;
        Ok((report, forwarded))
    }

    /// Non-electing level: everything is forwarded.
    fn pass_through(&mut self, level: usize) -> Vec<Vec<usize>> {
        let topo = self.topo;
        self.slot_winners = self
            .candidates
            .iter()
            .enumerate()
            .map(|(ni, list)| vec![list.clone(); topo.members(NodeId::new(level, ni)).len()])
            .collect();
        self.candidates.clone()
    }

    /// One agreement instance over the root with a coin per contestant.
    fn root_agreement(&mut self, contestants: &[usize]) -> Result<(Vec<Option<bool>>, Vec<RoundRecord>), AebaError> {
        let topo = self.topo;
        let root = topo.root();
        let members = topo.members(root);
        let k = members.len();
        let span = self.layout.span(BlockKind::Root).expect("root block");
        let inputs: Vec<Vec<bool>> = members.iter().map(|&p| vec![self.arena.inputs[p]]).collect();
        let mut ba = CoinBa::new(topo.intra(root), members, &inputs, self.p.epsilon, self.p.epsilon0)?;
        ba.record = self.record;
        let mut bottoms = vec![0usize; k];
        for &a in contestants {
            let delivered = self.round(Phase::Vote, ba.outbox());
            ba.tally(&delivered);
            let revealed = self.reveal(
                root.level,
                &[RevealReq {
                    array: a,
                    words: vec![span.start],
                }],
            );
            let good: Vec<bool> = members.iter().map(|&p| !self.net.is_corrupted(p)).collect();
            let words = &revealed[0];
            let bits: Vec<Vec<bool>> = (0..k)
                .map(|y| {
                    vec![match words[y][0] {
                        Some(w) => w & 1 == 1,
                        None => {
                            bottoms[y] += 1;
                            false
                        }
                    }]
                })
                .collect();
            let global = agreed(&good, words.iter().map(|row| row[0]));
            ba.apply(
                &RoundCoins {
                    bits,
                    reliable: vec![global.is_some()],
                    global_bit: vec![global.map(|w| w & 1 == 1)],
                },
                &good,
            );
        }
        let committed = ba.committed();
        let mut outputs = vec![None; self.p.n];
        for (y, &p) in members.iter().enumerate().rev() {
            outputs[p] = (2 * bottoms[y] <= contestants.len()).then_some(committed[y][0]);
        }
        Ok((outputs, std::mem::take(&mut ba.transcript)))
    }

    fn gcs(&mut self, contestants: &[usize], words: usize) -> GcsOutcome {
        let topo = self.topo;
        let root = topo.root();
        let span = self.layout.span(BlockKind::Gcs).expect("gcs block");
        let reqs: Vec<RevealReq> = contestants
            .iter()
            .map(|&a| RevealReq {
                array: a,
                words: (span.start..span.start + span.len).collect(),
            })
            .collect();
        let revealed = self.reveal(root.level, &reqs);
        let members = topo.members(root);
        let c = contestants.len().max(1);
        let mut views = Vec::with_capacity(words);
        let mut list = Vec::with_capacity(words);
        for i in 0..words.min(c * span.len) {
            let (ci, wi) = (i % c, i / c);
            let mut row = vec![None; self.p.n];
            for (y, &p) in members.iter().enumerate().rev() {
                row[p] = revealed[ci][y][wi];
            }
            let st = &self.arena.arrays[contestants[ci]];
            let value = st.truth[span.start + wi];
            let good: Vec<Pid> = (0..self.p.n).filter(|&p| !self.net.is_corrupted(p)).collect();
            let known = good.iter().filter(|&&p| row[p] == Some(value)).count();
            list.push(GcsWord {
                owner: st.owner,
                value,
                random: !st.tainted,
                known_fraction: ratio(known, good.len()),
            });
            views.push(row);
        }
        GcsOutcome { words: list, views }
    }
}

/// Word seen by every good slot, if they all agree.
fn agreed(good: &[bool], words: impl Iterator<Item = Option<u32>>) -> Option<u32> {
    let mut seen: Option<Option<u32>> = None;
    for (g, w) in good.iter().zip(words) {
        if !*g {
            continue;
        }
        match seen {
            None => seen = Some(w),
            Some(prev) if prev != w => return None,
            _ => {}
        }
    }
    seen.flatten()
}

/// Most common list; ties go to the one seen first.
fn plurality(lists: &[Vec<usize>]) -> Vec<usize> {
    let mut counts: Vec<(&Vec<usize>, usize)> = Vec::new();
    for l in lists {
        match counts.iter_mut().find(|(x, _)| *x == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    let mut best: Option<(&Vec<usize>, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l.clone()).unwrap_or_default()
}

struct LevelEnv<'e, 't, 'a> {
    engine: &'e mut Engine<'t, 'a>,
    level: usize,
    cands: &'e [Vec<usize>],
    coin_start: usize,
    coin_len: usize,
    mask: u32,
}

impl ElectionEnv for LevelEnv<'_, '_, '_> {
    fn exchange(&mut self, outbox: Vec<Message>) -> Vec<Message> {
        self.engine.round(Phase::Vote, outbox)
    }

    fn coins(&mut self, round: usize) -> Vec<Vec<Vec<Option<u32>>>> {
        let words: Vec<usize> = (self.coin_start..self.coin_start + self.coin_len).collect();
        let mut reqs = Vec::new();
        let mut which = Vec::new();
        for (ni, list) in self.cands.iter().enumerate() {
            if let Some(&a) = list.get(round) {
                which.push((ni, reqs.len()));
                reqs.push(RevealReq {
                    array: a,
                    words: words.clone(),
                });
            }
        }
        let revealed = self.engine.reveal(self.level, &reqs);
        let topo = self.engine.topo;
        let mut out: Vec<Vec<Vec<Option<u32>>>> = self
            .cands
            .iter()
            .enumerate()
            .map(|(ni, _)| vec![Vec::new(); topo.members(NodeId::new(self.level, ni)).len()])
            .collect();
        for (ni, r) in which {
            out[ni] = revealed[r]
                .iter()
                .map(|row| row.iter().map(|w| w.map(|x| x & self.mask)).collect())
                .collect();
        }
        out
    }

    fn is_corrupted(&self, pid: Pid) -> bool {
        self.engine.net.is_corrupted(pid)
    }
}

/// Runs the full protocol. `inputs[pid]` is each processor's bit.
pub fn run_aeba(
    topo: &TreeTopology,
    inputs: &[bool],
    adversary: &mut dyn Strategy,
    seed: u64,
    cfg: &AebaConfig,
) -> Result<AebaOutcome, AebaError> {
    let p = &topo.params;
    if inputs.len() != p.n {
        return Err(AebaError::Inputs {
            expected: p.n,
            got: inputs.len(),
        });
    }
    CoinBaConfig::new(p.epsilon, p.epsilon0, 0)?;
    let root_level = p.root_level();
    let mut e = Engine::new(topo, inputs, adversary, seed, cfg);
    e.deal();
    let mut forwarded: Vec<Vec<usize>> = (0..topo.node_count(1)).map(|l| topo.owners_of_leaf(l)).collect();
    let mut levels = Vec::new();
    for level in 2..=root_level {
        e.gather(level, &forwarded);
        e.lift(level);
        let keep: Vec<usize> = e.candidates.iter().flatten().copied().collect();
        e.retain(level, &keep);
        if level == root_level {
            break;
        }
        forwarded = if p.elects_at(level) {
            let (report, fw) = e.elect(level)?;
            levels.push(report);
            fw
        } else {
            e.pass_through(level)
        };
        e.drop_block(BlockKind::Level(level));
    }
    let contestants = e.candidates.first().cloned().unwrap_or_default();
    let (outputs, root_transcript) = e.root_agreement(&contestants)?;
    let gcs = (cfg.gcs_words > 0).then(|| e.gcs(&contestants, cfg.gcs_words));
    let corrupted = e.net.corrupted().to_vec();
    let good_contestants = contestants.iter().filter(|&&a| !e.arena.arrays[a].tainted).count();
    Ok(AebaOutcome {
        outputs,
        inputs: inputs.to_vec(),
        corrupted,
        levels,
        secrecy: e.secrecy,
        contestants,
        good_contestants,
        root_transcript,
        gcs,
        network: e.net,
    })
}

/// Runs the protocol with a global coin subsequence of `s_len` words.
pub fn run_gcs(
    topo: &TreeTopology,
    s_len: usize,
    adversary: &mut dyn Strategy,
    seed: u64,
) -> Result<(GcsOutcome, AebaOutcome), AebaError> {
    let mut r = rng::stream(seed, &[tags::INPUTS]);
    let inputs: Vec<bool> = (0..topo.params.n).map(|_| r.gen()).collect();
    let cfg = AebaConfig {
        gcs_words: s_len,
        ..AebaConfig::default()
    };
    let mut out = run_aeba(topo, &inputs, adversary, seed, &cfg)?;
    let gcs = out.gcs.take().unwrap_or(GcsOutcome {
        words: Vec::new(),
        views: Vec::new(),
    });
    Ok((gcs, out))
}
