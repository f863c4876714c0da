//! Lightest-bin elections.
//!
//! Every candidate block starts with a bin choice followed by one coin word
//! per contestant. Members of the electing node agree on every bin choice
//! bit by bit, with the coins for round `i` taken from candidate `i`'s
//! block: word `j` drives contestant `j`'s instances, one bit per bit
//! position. The winners are the occupants of the least-occupied bin,
//! truncated or padded to exactly `w`.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coinba::{CoinBa, CoinBaError, RoundCoins, RoundRecord};
use crate::netsim::{Message, Pid};
use crate::rng::Rng;
use crate::topology::Graph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub bin_choice: u32,
    pub coin_words: Vec<u32>,
    pub width: u32,
}

impl Block {
    pub fn random(num_bins: usize, contestants: usize, width: u32, rng: &mut Rng) -> Self {
        Block {
            bin_choice: rng.gen_range(0..num_bins as u32),
            coin_words: (0..contestants).map(|_| rng.gen_range(0..1u32 << width)).collect(),
            width,
        }
    }

    pub fn words(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(1 + self.coin_words.len());
        v.push(self.bin_choice);
        v.extend_from_slice(&self.coin_words);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionOutcome {
    pub bins: Vec<u32>,
    pub min: u32,
    /// Winning candidate positions, increasing.
    pub winners: Vec<usize>,
    pub augmented: bool,
    pub truncated: bool,
}

/// Lightest bin (ties to the smaller value) and its occupants, cut or
/// padded with the smallest omitted positions to exactly `r / num_bins`.
pub fn decide_bins(bins: &[u32], num_bins: usize) -> ElectionOutcome {
    let r = bins.len();
    let w = r / num_bins.max(1);
    let mut occupancy = vec![0usize; num_bins];
    for &b in bins {
        occupancy[b as usize % num_bins] += 1;
    }
    let min = (0..num_bins).min_by_key(|&b| (occupancy[b], b)).unwrap_or(0) as u32;
    let mut winners: Vec<usize> = (0..r).filter(|&i| bins[i] as usize % num_bins == min as usize).collect();
    let truncated = winners.len() > w;
    let augmented = winners.len() < w;
    winners.truncate(w);
    if augmented {
        let chosen: Vec<bool> = (0..r).map(|i| winners.contains(&i)).collect();
        let extra: Vec<usize> = (0..r).filter(|&i| !chosen[i]).take(w - winners.len()).collect();
        winners.extend(extra);
        winners.sort_unstable();
    }
    ElectionOutcome {
        bins: bins.to_vec(),
        min,
        winners,
        augmented,
        truncated,
    }
}

/// Bits of `bins`, most significant first, `width` per word.
pub fn bins_to_bits(bins: &[u32], width: u32) -> Vec<bool> {
    bins.iter()
        .flat_map(|&b| (0..width).rev().map(move |k| (b >> k) & 1 == 1))
        .collect()
}

pub fn bits_to_bins(bits: &[bool], width: u32) -> Vec<u32> {
    bits.chunks(width as usize)
        .map(|c| c.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32))
        .collect()
}

/// Adversarial bins chosen after seeing every honest bin, minimising the
/// number of honest winners. `honest[i]` is `Some(bin)` for honest
/// positions and `None` for adversarial ones.
pub fn rushing_bins(honest: &[Option<u32>], num_bins: usize) -> Vec<u32> {
    let r = honest.len();
    let adv: Vec<usize> = (0..r).filter(|&i| honest[i].is_none()).collect();
    let a = adv.len();
    let mut h = vec![0usize; num_bins];
    for b in honest.iter().flatten() {
        h[*b as usize] += 1;
    }
    let mut best: Option<(usize, Vec<u32>)> = None;
    for target in 0..num_bins {
        for in_target in 0..=a {
            let level = h[target] + in_target;
            let mut need = vec![0usize; num_bins];
            let mut required = 0;
            for c in 0..num_bins {
                if c == target {
                    continue;
                }
                let floor = level + usize::from(c < target);
                need[c] = floor.saturating_sub(h[c]);
                required += need[c];
            }
            if required > a - in_target {
                continue;
            }
            for order in [false, true] {
                let mut pool = adv.clone();
                if order {
                    pool.reverse();
                }
                let mut bins: Vec<u32> = honest.iter().map(|b| b.unwrap_or(0)).collect();
                let (inside, outside) = pool.split_at(in_target);
                for &i in inside {
                    bins[i] = target as u32;
                }
                let mut rest = outside.iter();
                for c in 0..num_bins {
                    for _ in 0..need[c] {
                        bins[*rest.next().expect("counted")] = c as u32;
                    }
                }
                let spill = (0..num_bins).find(|&c| c != target).unwrap_or(0) as u32;
                for &i in rest {
                    bins[i] = spill;
                }
                let out = decide_bins(&bins, num_bins);
                let score = out.winners.iter().filter(|&&i| honest[i].is_some()).count();
                if best.as_ref().is_none_or(|(s, _)| score < *s) {
                    best = Some((score, bins));
                }
            }
        }
    }
    best.map(|(_, b)| b)
        .unwrap_or_else(|| honest.iter().map(|b| b.unwrap_or(0)).collect())
}

/// One lightest-bin election with `honest_count` uniformly placed honest
/// candidates and a rushing adversary; returns the honest-winner fraction.
pub fn feige_trial(r: usize, num_bins: usize, honest_count: usize, rng: &mut Rng) -> f64 {
    let honest_pos = sample(rng, r, honest_count).into_vec();
    let mut honest = vec![None; r];
    for i in honest_pos {
        honest[i] = Some(rng.gen_range(0..num_bins as u32));
    }
    let bins = rushing_bins(&honest, num_bins);
    let out = decide_bins(&bins, num_bins);
    out.winners.iter().filter(|&&i| honest[i].is_some()).count() as f64 / out.winners.len() as f64
}

/// One electing node: its graph, members and each member's view of the
/// candidates' bin choices (`None` when the reveal failed).
pub struct NodeElection<'g> {
    pub graph: &'g Graph,
    pub members: Vec<Pid>,
    pub views: Vec<Vec<Option<u32>>>,
    pub num_bins: usize,
    pub width: u32,
}

/// What an election needs from its surroundings each round.
pub trait ElectionEnv {
    /// Delivers one round of vote traffic.
    fn exchange(&mut self, outbox: Vec<Message>) -> Vec<Message>;
    /// Coin words of candidate `round`'s block as seen by every member:
    /// `[node][slot][contestant]`.
    fn coins(&mut self, round: usize) -> Vec<Vec<Vec<Option<u32>>>>;
    fn is_corrupted(&self, pid: Pid) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeResult {
    /// Outcome as computed by every slot.
    pub outcomes: Vec<ElectionOutcome>,
    pub good: Vec<bool>,
    pub transcript: Vec<RoundRecord>,
}

impl NodeResult {
    /// Outcome held by most good slots, and whether all good slots hold it.
    pub fn consensus(&self) -> (Option<&ElectionOutcome>, bool) {
        let mut counts: Vec<(&ElectionOutcome, usize)> = Vec::new();
        for (s, o) in self.outcomes.iter().enumerate() {
            if !self.good[s] {
                continue;
            }
            match counts.iter_mut().find(|(x, _)| *x == o) {
                Some((_, c)) => *c += 1,
                None => counts.push((o, 1)),
            }
        }
        let unanimous = counts.len() == 1;
        (counts.iter().max_by_key(|(_, c)| *c).map(|(o, _)| *o), unanimous)
    }
}

/// Runs the elections of several nodes in lockstep; round count equals the
/// largest candidate count.
pub fn run_elections(
    nodes: &[NodeElection<'_>],
    epsilon: f64,
    epsilon0: f64,
    record: bool,
    env: &mut dyn ElectionEnv,
) -> Result<Vec<NodeResult>, CoinBaError> {
    let mut bas = Vec::with_capacity(nodes.len());
    let mut owner: HashMap<Pid, Vec<usize>> = HashMap::new();
    for (x, node) in nodes.iter().enumerate() {
        let inputs: Vec<Vec<bool>> = node
            .views
            .iter()
            .map(|v| {
                let bins: Vec<u32> = v.iter().map(|b| b.unwrap_or(0)).collect();
                bins_to_bits(&bins, node.width)
            })
            .collect();
        let mut ba = CoinBa::new(node.graph, &node.members, &inputs, epsilon, epsilon0)?;
        ba.record = record;
        bas.push(ba);
        for &p in &node.members {
            let e = owner.entry(p).or_default();
            if e.last() != Some(&x) {
                e.push(x);
            }
        }
    }
    let rounds = nodes.iter().map(|n| n.views.first().map_or(0, Vec::len)).max().unwrap_or(0);
    for round in 0..rounds {
        let outbox: Vec<Message> = bas
            .iter()
            .enumerate()
            .filter(|(x, _)| round < nodes[*x].views[0].len())
            .flat_map(|(_, ba)| ba.outbox())
            .collect();
        let delivered = env.exchange(outbox);
        let mut per_node: Vec<Vec<Message>> = vec![Vec::new(); nodes.len()];
        for m in delivered {
            if let (Some(a), Some(b)) = (owner.get(&m.from), owner.get(&m.to)) {
                for &x in a {
                    if b.contains(&x) {
                        per_node[x].push(m.clone());
                    }
                }
            }
        }
        let coins = env.coins(round);
        for (x, ba) in bas.iter_mut().enumerate() {
            let node = &nodes[x];
            let r = node.views[0].len();
            if round >= r {
                continue;
            }
            ba.tally(&per_node[x]);
            let good: Vec<bool> = node.members.iter().map(|&p| !env.is_corrupted(p)).collect();
            let width = node.width as usize;
            let bits: Vec<Vec<bool>> = coins[x]
                .iter()
                .map(|words| {
                    let w: Vec<u32> = (0..r).map(|j| words.get(j).copied().flatten().unwrap_or(0)).collect();
                    bins_to_bits(&w, node.width)
                })
                .collect();
            let agreed: Vec<Option<u32>> = (0..r)
                .map(|j| {
                    let mut seen: Option<Option<u32>> = None;
                    for (s, words) in coins[x].iter().enumerate() {
                        if !good[s] {
                            continue;
                        }
                        let v = words.get(j).copied().flatten();
                        match seen {
                            None => seen = Some(v),
                            Some(prev) if prev != v => return None,
                            _ => {}
                        }
                    }
                    seen.flatten()
                })
                .collect();
            let global_bit: Vec<Option<bool>> = (0..r * width)
                .map(|i| agreed[i / width].map(|wd| (wd >> (width - 1 - i % width)) & 1 == 1))
                .collect();
            let rc = RoundCoins {
                bits,
                reliable: global_bit.iter().map(Option::is_some).collect(),
                global_bit,
            };
            ba.apply(&rc, &good);
        }
    }
    Ok(bas
        .into_iter()
        .zip(nodes)
        .map(|(mut ba, node)| {
            let good: Vec<bool> = node.members.iter().map(|&p| !env.is_corrupted(p)).collect();
            let outcomes = ba
                .committed()
                .iter()
                .map(|bits| {
                    let bins: Vec<u32> = bits_to_bins(bits, node.width)
                        .into_iter()
                        .map(|b| b % node.num_bins as u32)
                        .collect();
                    decide_bins(&bins, node.num_bins)
                })
                .collect();
            NodeResult {
                outcomes,
                good,
                transcript: std::mem::take(&mut ba.transcript),
            }
        })
        .collect())
}
