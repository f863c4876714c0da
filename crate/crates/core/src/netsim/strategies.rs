//! Built-in adversaries and a name-keyed registry.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AdversaryView, Message, Payload, Phase, Pid, PublicEvent, RewriteCtl, Snapshot, Strategy};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    Null,
    Crash,
    StaticByzantine,
    AdaptiveChaseWinners,
    Overloader,
    Equivocator,
}

impl AdversaryKind {
    pub fn name(self) -> &'static str {
        match self {
            AdversaryKind::Null => "null",
            AdversaryKind::Crash => "crash",
            AdversaryKind::StaticByzantine => "static_byzantine",
            AdversaryKind::AdaptiveChaseWinners => "adaptive_chase_winners",
            AdversaryKind::Overloader => "overloader",
            AdversaryKind::Equivocator => "equivocator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ALL.iter().copied().find(|k| k.name() == s)
    }
}

const ALL: [AdversaryKind; 6] = [
    AdversaryKind::Null,
    AdversaryKind::Crash,
    AdversaryKind::StaticByzantine,
    AdversaryKind::AdaptiveChaseWinners,
    AdversaryKind::Overloader,
    AdversaryKind::Equivocator,
];

pub fn builtin_names() -> Vec<&'static str> {
    ALL.iter().map(|k| k.name()).collect()
}

/// Everything a built-in strategy needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    /// Processors to corrupt (chase: maximum corruptions).
    pub count: usize,
    /// Explicit corruption set; overrides a random choice of `count`.
    pub set: Option<Vec<Pid>>,
    /// Round at which static corruptions happen.
    pub round: u64,
    pub seed: u64,
    pub n: usize,
    /// Number of AE→E labels.
    pub label_range: usize,
    /// Requests a receiver accepts from one sender per loop.
    pub request_cap: usize,
}

impl AdversaryConfig {
    pub fn new(kind: AdversaryKind, n: usize, count: usize, seed: u64) -> Self {
        AdversaryConfig {
            kind,
            count,
            set: None,
            round: 0,
            seed,
            n,
            label_range: 1,
            request_cap: 1,
        }
    }

    fn targets(&self) -> Vec<Pid> {
        if let Some(set) = &self.set {
            return set.clone();
        }
        let mut rng = rng::stream(self.seed, &[rng::tags::ADVERSARY, 0]);
        let mut v = sample(&mut rng, self.n, self.count.min(self.n)).into_vec();
        v.sort_unstable();
        v
    }
}

type Factory = Box<dyn Fn(&AdversaryConfig) -> Box<dyn Strategy> + Send + Sync>;

/// Name-keyed constructors, pre-filled with the built-ins.
pub struct StrategyRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry {
            factories: BTreeMap::new(),
        };
        for kind in ALL {
            r.register(kind.name(), move |cfg| {
                let mut cfg = cfg.clone();
                cfg.kind = kind;
                build(&cfg)
            });
        }
        r
    }
}

impl StrategyRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&AdversaryConfig) -> Box<dyn Strategy> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, cfg: &AdversaryConfig) -> Option<Box<dyn Strategy>> {
        self.factories.get(name).map(|f| f(cfg))
    }
}

/// Instantiates the built-in strategy selected by `cfg.kind`.
pub fn build(cfg: &AdversaryConfig) -> Box<dyn Strategy> {
    match cfg.kind {
        AdversaryKind::Null => Box::new(Null),
        AdversaryKind::Crash => Box::new(Crash::new(cfg.targets(), cfg.round)),
        AdversaryKind::StaticByzantine => Box::new(StaticByzantine::new(cfg.targets(), cfg.round, cfg.seed)),
        AdversaryKind::AdaptiveChaseWinners => Box::new(ChaseWinners::new(cfg.count, cfg.seed)),
        AdversaryKind::Overloader => Box::new(Overloader::new(cfg)),
        AdversaryKind::Equivocator => Box::new(Equivocator::new(cfg.targets(), cfg.round)),
    }
}

/// Never corrupts anyone.
pub struct Null;

impl Strategy for Null {
    fn name(&self) -> String {
        "null".into()
    }
}

/// Corrupts `set` at `round`; they send nothing from then on.
pub struct Crash {
    set: Vec<Pid>,
    round: u64,
    done: bool,
}

impl Crash {
    pub fn new(set: Vec<Pid>, round: u64) -> Self {
        Crash { set, round, done: false }
    }
}

impl Strategy for Crash {
    fn name(&self) -> String {
        format!("crash({}@{})", self.set.len(), self.round)
    }

    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if self.done || view.round < self.round {
            return Vec::new();
        }
        self.done = true;
        self.set.clone()
    }

    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        ctl.pending.clear();
    }
}

/// Lies in every message a corrupted processor sends.
pub fn lie(msg: &mut Message, modulus: u32, rng: &mut Rng) {
    match &mut msg.payload {
        Payload::Votes(v) => v.iter_mut().for_each(|b| *b = !*b),
        Payload::Shares(items) => {
            for it in items.iter_mut() {
                for x in it.values.iter_mut() {
                    *x = (*x + rng.gen_range(1..modulus)) % modulus;
                }
            }
        }
        Payload::Words(words) => words.iter_mut().for_each(|(_, w)| *w ^= 1),
        Payload::Response { msg, .. } => msg.iter_mut().for_each(|b| *b = !*b),
        Payload::Request { .. } | Payload::Junk { .. } => {}
    }
}

/// Corrupts a fixed set at `round` and lies from then on.
pub struct StaticByzantine {
    set: Vec<Pid>,
    round: u64,
    done: bool,
    rng: Rng,
}

impl StaticByzantine {
    pub fn new(set: Vec<Pid>, round: u64, seed: u64) -> Self {
        StaticByzantine {
            set,
            round,
            done: false,
            rng: rng::stream(seed, &[rng::tags::ADVERSARY, 1]),
        }
    }
}

impl Strategy for StaticByzantine {
    fn name(&self) -> String {
        format!("static_byzantine({})", self.set.len())
    }

    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if self.done || view.round < self.round {
            return Vec::new();
        }
        self.done = true;
        self.set.clone()
    }

    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        let m = ctl.widths.modulus;
        for msg in ctl.pending.iter_mut() {
            lie(msg, m, &mut self.rng);
        }
    }
}

/// Waits for election results, then corrupts winners' owners and the
/// current holders of their shares, up to `limit`, and lies thereafter.
pub struct ChaseWinners {
    limit: usize,
    used: usize,
    seen_events: usize,
    queue: Vec<Pid>,
    queued: BTreeSet<Pid>,
    snapshots: Vec<Snapshot>,
    rng: Rng,
}

impl ChaseWinners {
    pub fn new(limit: usize, seed: u64) -> Self {
        ChaseWinners {
            limit,
            used: 0,
            seen_events: 0,
            queue: Vec::new(),
            queued: BTreeSet::new(),
            snapshots: Vec::new(),
            rng: rng::stream(seed, &[rng::tags::ADVERSARY, 2]),
        }
    }

    /// States captured at corruption time.
    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }
}

impl Strategy for ChaseWinners {
    fn name(&self) -> String {
        format!("adaptive_chase_winners({})", self.limit)
    }

    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        for ev in &view.events[self.seen_events..] {
            if let PublicEvent::Election { winners, holders, .. } = ev {
                for &p in winners.iter().chain(holders.iter()) {
                    if !view.is_corrupted(p) && self.queued.insert(p) {
                        self.queue.push(p);
                    }
                }
            }
        }
        self.seen_events = view.events.len();
        let room = self.limit.saturating_sub(self.used).min(view.budget_left);
        let mut out = Vec::new();
        let mut rest = Vec::new();
        for p in self.queue.drain(..) {
            if view.is_corrupted(p) {
                continue;
            }
            if out.len() < room {
                out.push(p);
            } else {
                rest.push(p);
            }
        }
        self.queue = rest;
        self.used += out.len();
        out
    }

    fn on_snapshot(&mut self, snap: &Snapshot) {
        self.snapshots.push(snap.clone());
    }

    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        let m = ctl.widths.modulus;
        for msg in ctl.pending.iter_mut() {
            lie(msg, m, &mut self.rng);
        }
    }
}

/// Floods one AE→E label per loop so that receivers of that label become
/// overloaded, and answers every request with a wrong message.
pub struct Overloader {
    set: Vec<Pid>,
    round: u64,
    done: bool,
    label_range: usize,
    cap: usize,
    rng: Rng,
}

impl Overloader {
    pub fn new(cfg: &AdversaryConfig) -> Self {
        Overloader {
            set: cfg.targets(),
            round: cfg.round,
            done: false,
            label_range: cfg.label_range.max(1),
            cap: cfg.request_cap.max(1),
            rng: rng::stream(cfg.seed, &[rng::tags::ADVERSARY, 3]),
        }
    }
}

impl Strategy for Overloader {
    fn name(&self) -> String {
        format!("overloader({})", self.set.len())
    }

    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if self.done || view.round < self.round {
            return Vec::new();
        }
        self.done = true;
        self.set.clone()
    }

    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        match ctl.phase {
            Phase::Request => {
                ctl.pending.clear();
                let label = self.rng.gen_range(0..self.label_range) as u32;
                let senders: Vec<Pid> = ctl.corrupted().collect();
                for &from in &senders {
                    for to in 0..ctl.n {
                        if to != from && !ctl.is_corrupted(to) {
                            ctl.inject(Message::new(
                                from,
                                to,
                                Payload::Request {
                                    labels: vec![label; self.cap],
                                },
                            ));
                        }
                    }
                }
            }
            Phase::Response => {
                ctl.pending.clear();
                let requests: Vec<(Pid, Pid, Vec<u32>)> = ctl
                    .inbound()
                    .filter_map(|m| match &m.payload {
                        Payload::Request { labels } => Some((m.to, m.from, labels.clone())),
                        _ => None,
                    })
                    .collect();
                for (from, to, labels) in requests {
                    for label in labels {
                        ctl.inject(Message::new(
                            from,
                            to,
                            Payload::Response {
                                label,
                                msg: vec![true; 1],
                                loop_id: ctl.round as u32,
                            },
                        ));
                    }
                }
            }
            _ => {
                let m = ctl.widths.modulus;
                for msg in ctl.pending.iter_mut() {
                    lie(msg, m, &mut self.rng);
                }
            }
        }
    }
}

/// Sends different content to even and odd recipients.
pub struct Equivocator {
    set: Vec<Pid>,
    round: u64,
    done: bool,
}

impl Equivocator {
    pub fn new(set: Vec<Pid>, round: u64) -> Self {
        Equivocator { set, round, done: false }
    }
}

impl Strategy for Equivocator {
    fn name(&self) -> String {
        format!("equivocator({})", self.set.len())
    }

    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if self.done || view.round < self.round {
            return Vec::new();
        }
        self.done = true;
        self.set.clone()
    }

    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        let modulus = ctl.widths.modulus;
        for msg in ctl.pending.iter_mut() {
            let odd = msg.to % 2 == 1;
            match &mut msg.payload {
                Payload::Votes(v) => v.iter_mut().for_each(|b| *b = odd),
                Payload::Shares(items) => {
                    for it in items.iter_mut() {
                        for x in it.values.iter_mut() {
                            *x = (*x + odd as u32) % modulus;
                        }
                    }
                }
                Payload::Words(words) => words.iter_mut().for_each(|(_, w)| *w = (*w & !1) | odd as u32),
                Payload::Response { msg, .. } => msg.iter_mut().for_each(|b| *b = odd),
                Payload::Request { .. } | Payload::Junk { .. } => {}
            }
        }
    }
}
