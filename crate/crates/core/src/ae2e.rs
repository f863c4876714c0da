//! Almost-everywhere to everywhere amplification and the composed
//! everywhere agreement.
//!
//! In one loop every processor sends `m` requests for each of `L` labels.
//! After a label `k` is revealed, each knowledgeable processor answers the
//! label-`k` requests it received unless that label overloaded it. A
//! processor looks at the label that drew the most answers and decides a
//! message only if enough of the processors it asked with that label
//! returned the same one. Decisions are sticky.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::aeba::{run_aeba, AebaConfig, AebaError, GcsOutcome};
use crate::netsim::{Message, Metrics, Network, Payload, Phase, Pid, Stateless, Strategy, Trace};
use crate::params::ProtocolParams;
use crate::rng::{self, tags, Rng};
use crate::topology::TreeTopology;

/// Per-loop sizes derived from the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ae2ePlan {
    pub n: usize,
    /// Requests per label per sender.
    pub requests_per_label: usize,
    pub labels: usize,
    /// Requests a receiver accepts from one sender.
    pub cap: usize,
    /// Accepted requests of one label above which a receiver stays silent.
    pub overload: usize,
    /// Identical answers needed to decide.
    pub decide_at: usize,
}

impl Ae2ePlan {
    pub fn new(p: &ProtocolParams) -> Self {
        let m = p.requests_per_label();
        let labels = p.label_range();
        let others = p.n.saturating_sub(1).max(1);
        Ae2ePlan {
            n: p.n,
            requests_per_label: m,
            labels,
            cap: (labels * m).div_ceil(others),
            overload: p.overload_threshold(),
            decide_at: decide_threshold(p.epsilon, m),
        }
    }

    /// Largest number of faulty answers that can never reach `decide_at`.
    pub fn faulty_capacity(&self, epsilon: f64) -> f64 {
        (0.5 - 3.0 * epsilon / 8.0) * self.requests_per_label as f64
    }
}

/// `ceil((1/2 + 3ε/8)·m)`.
pub fn decide_threshold(epsilon: f64, m: usize) -> usize {
    ((0.5 + 3.0 * epsilon / 8.0) * m as f64 - 1e-9).ceil() as usize
}

/// What each processor would answer with and what it has decided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ae2eState {
    pub knowledge: Vec<Option<Vec<bool>>>,
    pub decision: Vec<Option<Vec<bool>>>,
}

impl Ae2eState {
    pub fn new(knowledge: Vec<Option<Vec<bool>>>) -> Self {
        let n = knowledge.len();
        Ae2eState {
            knowledge,
            decision: vec![None; n],
        }
    }

    /// Decision if any, otherwise prior knowledge.
    pub fn output(&self, pid: Pid) -> Option<&Vec<bool>> {
        self.decision[pid].as_ref().or(self.knowledge[pid].as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub loop_id: u32,
    /// Good processors that decided in this loop.
    pub decided: usize,
    /// Good processors that decided something other than the target.
    pub wrong: usize,
    /// Good knowledgeable processors silenced by overload.
    pub overloaded: usize,
    /// Smallest identical-answer count behind any decision this loop.
    pub min_support: Option<usize>,
    /// Every good processor outputs the target after this loop.
    pub all_agree: bool,
}

/// Where sender `s` sent request `r`: a random ordering of the other
/// processors, walked round-robin so no target gets more than `cap` labels.
struct RequestPlan {
    order: Vec<Pid>,
    index_of: Vec<u32>,
}

impl RequestPlan {
    fn new(n: usize, sender: Pid, rng: &mut Rng) -> Self {
        let mut order: Vec<Pid> = (0..n).filter(|&p| p != sender).collect();
        order.shuffle(rng);
        let mut index_of = vec![u32::MAX; n];
        for (i, &p) in order.iter().enumerate() {
            index_of[p] = i as u32;
        }
        RequestPlan { order, index_of }
    }

    fn asked(&self, plan: &Ae2ePlan, target: Pid, label: usize) -> bool {
        let t = self.index_of[target];
        if t == u32::MAX || label >= plan.labels {
            return false;
        }
        let others = self.order.len();
        let m = plan.requests_per_label;
        let start = label * m;
        let r = start + (t as usize + others - start % others) % others;
        r < start + m
    }
}

/// Runs one loop. `labels[pid]` is each processor's view of the revealed
/// label; `target` is only used for the report.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    net: &mut Network,
    adversary: &mut dyn Strategy,
    state: &mut Ae2eState,
    labels: &[Option<u32>],
    loop_id: u32,
    plan: &Ae2ePlan,
    target: Option<&[bool]>,
    rng: &mut Rng,
) -> LoopReport {
    let n = plan.n;
    let m = plan.requests_per_label;
    let plans: Vec<RequestPlan> = (0..n).map(|s| RequestPlan::new(n, s, rng)).collect();
    let mut outbox = Vec::new();
    for (s, rp) in plans.iter().enumerate() {
        let others = rp.order.len();
        if others == 0 {
            continue;
        }
        let mut per_target: Vec<Vec<u32>> = vec![Vec::new(); others];
        for r in 0..plan.labels * m {
            per_target[r % others].push((r / m) as u32);
        }
        for (t, labels) in per_target.into_iter().enumerate() {
            if !labels.is_empty() {
                outbox.push(Message::new(s, rp.order[t], Payload::Request { labels }));
            }
        }
    }
    let delivered = net.run_round(Phase::Request, outbox, adversary, &mut Stateless);
    let mut load = vec![vec![0u32; plan.labels]; n];
    let mut taken: Vec<BTreeMap<Pid, usize>> = vec![BTreeMap::new(); n];
    let mut accepted: Vec<Vec<(Pid, u32)>> = vec![Vec::new(); n];
    for msg in &delivered {
        let Payload::Request { labels: ls } = &msg.payload else { continue };
        let used = taken[msg.to].entry(msg.from).or_default();
        for &l in ls {
            if *used >= plan.cap || l as usize >= plan.labels {
                break;
            }
            *used += 1;
            load[msg.to][l as usize] += 1;
            accepted[msg.to].push((msg.from, l));
        }
    }
    let mut outbox = Vec::new();
    let mut overloaded = 0;
    for p in 0..n {
        let (Some(msg), Some(k)) = (&state.knowledge[p], labels[p]) else { continue };
        if (k as usize) < plan.labels && load[p][k as usize] as usize > plan.overload {
            overloaded += usize::from(!net.is_corrupted(p));
            continue;
        }
        let mut answered: Vec<Pid> = accepted[p].iter().filter(|(_, l)| *l == k).map(|(q, _)| *q).collect();
        answered.sort_unstable();
        answered.dedup();
        for q in answered {
            outbox.push(Message::new(
                p,
                q,
                Payload::Response {
                    label: k,
                    msg: msg.clone(),
                    loop_id,
                },
            ));
        }
    }
    let delivered = net.run_round(Phase::Response, outbox, adversary, &mut Stateless);
    let mut inbox: Vec<Vec<(u32, Pid, &Vec<bool>)>> = vec![Vec::new(); n];
    for msg in &delivered {
        if let Payload::Response { label, msg: body, .. } = &msg.payload {
            if plans[msg.to].asked(plan, msg.from, *label as usize) {
                inbox[msg.to].push((*label, msg.from, body));
            }
        }
    }
    let mut report = LoopReport {
        loop_id,
        decided: 0,
        wrong: 0,
        overloaded,
        min_support: None,
        all_agree: false,
    };
    for (q, mut got) in inbox.into_iter().enumerate() {
        if state.decision[q].is_some() || net.is_corrupted(q) {
            continue;
        }
        got.sort_by_key(|a| (a.0, a.1));
        got.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let mut per_label = vec![0usize; plan.labels];
        for &(l, _, _) in &got {
            per_label[l as usize] += 1;
        }
        let best = per_label.iter().copied().max().unwrap_or(0);
        if best == 0 {
            continue;
        }
        let i_max = per_label.iter().position(|&c| c == best).expect("max exists") as u32;
        let mut tally: BTreeMap<&Vec<bool>, usize> = BTreeMap::new();
        for &(l, _, body) in &got {
            if l == i_max {
                *tally.entry(body).or_default() += 1;
            }
        }
        let Some((&body, &support)) = tally.iter().max_by_key(|(_, &c)| c) else { continue };
        if support >= plan.decide_at {
            state.decision[q] = Some(body.clone());
            state.knowledge[q] = Some(body.clone());
            report.decided += 1;
            report.min_support = Some(report.min_support.map_or(support, |s| s.min(support)));
            if target.is_some_and(|t| t != body.as_slice()) {
                report.wrong += 1;
            }
        }
    }
    report.all_agree = target.is_some_and(|t| {
        (0..n).all(|p| net.is_corrupted(p) || state.output(p).is_some_and(|o| o.as_slice() == t))
    });
    report
}

/// Runs `labels.len()` loops, loop `i` using `labels[i]` as every
/// processor's view of the revealed label.
#[allow(clippy::too_many_arguments)]
pub fn run_ae2e(
    net: &mut Network,
    adversary: &mut dyn Strategy,
    state: &mut Ae2eState,
    labels: &[Vec<Option<u32>>],
    plan: &Ae2ePlan,
    target: Option<&[bool]>,
    seed: u64,
) -> Vec<LoopReport> {
    let mut rng = rng::stream(seed, &[tags::AE2E]);
    labels
        .iter()
        .enumerate()
        .map(|(i, ls)| run_loop(net, adversary, state, ls, i as u32, plan, target, &mut rng))
        .collect()
}

/// Uniform labels known to every processor, one per loop.
pub fn ideal_labels(n: usize, labels: usize, loops: usize, seed: u64) -> Vec<Vec<Option<u32>>> {
    let mut rng = rng::stream(seed, &[tags::COINS]);
    (0..loops)
        .map(|_| vec![Some(rng.gen_range(0..labels as u32)); n])
        .collect()
}

#[derive(Debug)]
pub struct EverywhereOutcome {
    pub outputs: Vec<Option<bool>>,
    pub inputs: Vec<bool>,
    pub corrupted: Vec<bool>,
    /// Bit most good processors held after the almost-everywhere stage.
    pub ae_bit: Option<bool>,
    pub ae_fraction: f64,
    pub gcs: GcsOutcome,
    pub loops: Vec<LoopReport>,
    pub metrics: Metrics,
    pub trace: Option<Trace>,
    pub valid_network: bool,
}

impl EverywhereOutcome {
    /// Every good processor outputs the same bit.
    pub fn agreement(&self) -> Option<bool> {
        let mut bit = None;
        for p in 0..self.outputs.len() {
            if self.corrupted[p] {
                continue;
            }
            match (bit, self.outputs[p]) {
                (_, None) => return None,
                (None, Some(b)) => bit = Some(b),
                (Some(x), Some(b)) if x != b => return None,
                _ => {}
            }
        }
        bit
    }

    /// Agreement on a bit that some good processor had as input.
    pub fn valid(&self) -> bool {
        self.agreement()
            .is_some_and(|b| (0..self.inputs.len()).any(|p| !self.corrupted[p] && self.inputs[p] == b))
    }

    /// Fraction of good processors whose output is `bit`.
    pub fn fraction(&self, bit: bool) -> f64 {
        let good: Vec<usize> = (0..self.outputs.len()).filter(|&p| !self.corrupted[p]).collect();
        let hits = good.iter().filter(|&&p| self.outputs[p] == Some(bit)).count();
        if good.is_empty() {
            1.0
        } else {
            hits as f64 / good.len() as f64
        }
    }
}

/// Almost-everywhere agreement with a global coin subsequence of `w·q`
/// words, then one amplification loop per word on the same network.
pub fn run_everywhere_ba(
    topo: &TreeTopology,
    inputs: &[bool],
    adversary: &mut dyn Strategy,
    seed: u64,
    cfg: &AebaConfig,
) -> Result<EverywhereOutcome, AebaError> {
    let p = &topo.params;
    let cfg = AebaConfig {
        gcs_words: p.w * p.q,
        ..*cfg
    };
    let ae = run_aeba(topo, inputs, adversary, seed, &cfg)?;
    let (ae_bit, ae_fraction) = ae.agreement();
    let gcs = ae.gcs.expect("words requested");
    let mut net = ae.network;
    let mut state = Ae2eState::new(ae.outputs.iter().map(|o| o.map(|b| vec![b])).collect());
    let plan = Ae2ePlan::new(p);
    let target = ae_bit.map(|b| vec![b]);
    let loops = run_ae2e(
        &mut net,
        adversary,
        &mut state,
        &gcs.views,
        &plan,
        target.as_deref(),
        seed,
    );
    let outputs = (0..p.n).map(|q| state.output(q).and_then(|m| m.first().copied())).collect();
    Ok(EverywhereOutcome {
        outputs,
        inputs: inputs.to_vec(),
        corrupted: net.corrupted().to_vec(),
        ae_bit,
        ae_fraction,
        gcs,
        loops,
        metrics: net.metrics.clone(),
        trace: net.trace().cloned(),
        valid_network: net.is_valid(),
    })
}

#[cfg(test)]
mod tests;
