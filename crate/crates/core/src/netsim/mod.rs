//! Synchronous round engine with private channels and a rushing, adaptive
//! adversary.
//!
//! Each call to [`Network::run_round`] applies, in order:
//! 1. the honest outbox is fixed;
//! 2. the adversary inspects its [`AdversaryView`] and may corrupt
//!    processors, receiving their state snapshots;
//! 3. the adversary rewrites the pending messages of corrupted senders and
//!    injects new ones;
//! 4. everything is delivered at once;
//! 5. metrics are updated.
//!
//! Payloads of honest↔honest messages never reach the adversary.

pub mod strategies;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ProtocolParams;
use crate::topology::NodeId;

pub use strategies::{builtin_names, AdversaryConfig, AdversaryKind, StrategyRegistry};

pub type Pid = usize;

/// Bits charged for the loop id carried by an AE→E response.
pub const LOOP_ID_BITS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Share,
    Lift,
    Down,
    Exchange,
    Open,
    Vote,
    Request,
    Response,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Share => "share",
            Phase::Lift => "lift",
            Phase::Down => "down",
            Phase::Exchange => "exchange",
            Phase::Open => "open",
            Phase::Vote => "vote",
            Phase::Request => "request",
            Phase::Response => "response",
        }
    }
}

/// One share value per word, tagged with the share-tree node it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareItem {
    pub id: u64,
    pub values: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Shares(Vec<ShareItem>),
    /// Opened words, one per tag; tags route the word and cost nothing.
    Words(Vec<(u32, u32)>),
    Votes(Vec<bool>),
    Request { labels: Vec<u32> },
    Response { label: u32, msg: Vec<bool>, loop_id: u32 },
    /// Adversarial filler.
    Junk { bits: u64 },
}

/// Bit widths used to price payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidths {
    pub field_bits: u32,
    pub word_bits: u32,
    pub label_bits: u32,
    /// Field modulus, so adversaries can forge well-formed shares.
    pub modulus: u32,
}

impl BitWidths {
    pub fn from_params(p: &ProtocolParams) -> Self {
        BitWidths {
            field_bits: p.field_bits(),
            word_bits: p.word_bits,
            label_bits: p.label_bits(),
            modulus: p.field_modulus,
        }
    }
}

impl Payload {
    pub fn bits(&self, w: &BitWidths) -> u64 {
        match self {
            Payload::Shares(items) => items
                .iter()
                .map(|it| it.values.len() as u64 * w.field_bits as u64)
                .sum(),
            Payload::Words(words) => words.len() as u64 * w.word_bits as u64,
            Payload::Votes(v) => v.len() as u64,
            Payload::Request { labels } => labels.len() as u64 * w.label_bits as u64,
            Payload::Response { msg, .. } => w.label_bits as u64 + msg.len() as u64 + LOOP_ID_BITS,
            Payload::Junk { bits } => *bits,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Shares(_) => "shares",
            Payload::Words(_) => "words",
            Payload::Votes(_) => "votes",
            Payload::Request { .. } => "request",
            Payload::Response { .. } => "response",
            Payload::Junk { .. } => "junk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: Pid,
    pub to: Pid,
    pub payload: Payload,
}

impl Message {
    pub fn new(from: Pid, to: Pid, payload: Payload) -> Self {
        Message { from, to, payload }
    }
}

/// Sender, recipient and size of a message whose payload is hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub from: Pid,
    pub to: Pid,
    pub bits: u64,
}

/// Facts every participant learns, such as election results.
#[derive(Debug, Clone, PartialEq)]
pub enum PublicEvent {
    Election {
        node: NodeId,
        /// Original owners of the winning arrays.
        winners: Vec<Pid>,
        /// Processors currently holding shares of the winning arrays.
        holders: Vec<Pid>,
    },
    Note(String),
}

/// State of a processor at the moment of corruption, without erased values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub pid: Pid,
    pub round: u64,
    pub input: Option<bool>,
    /// Share-tree node id and per-word values of every share still held.
    pub shares: Vec<(u64, Vec<u32>)>,
    pub notes: Vec<String>,
}

/// Anything that can report a processor's live state.
pub trait StateSource {
    fn snapshot(&self, pid: Pid) -> Snapshot;
    /// Called once per corruption, after the snapshot is taken.
    fn on_corrupt(&mut self, _pid: Pid, _round: u64) {}
}

/// A state source with nothing to reveal.
pub struct Stateless;

impl StateSource for Stateless {
    fn snapshot(&self, pid: Pid) -> Snapshot {
        Snapshot {
            pid,
            ..Snapshot::default()
        }
    }
}

/// What the adversary may see before choosing corruptions.
pub struct AdversaryView<'a> {
    pub round: u64,
    pub phase: Phase,
    pub n: usize,
    pub budget_left: usize,
    pub events: &'a [PublicEvent],
    outbox: &'a [Message],
    corrupted: &'a [bool],
    widths: BitWidths,
    show_metadata: bool,
}

impl<'a> AdversaryView<'a> {
    pub fn is_corrupted(&self, pid: Pid) -> bool {
        self.corrupted[pid]
    }

    pub fn corrupted(&self) -> impl Iterator<Item = Pid> + '_ {
        (0..self.n).filter(|&p| self.corrupted[p])
    }

    /// Full messages with a corrupted endpoint.
    pub fn visible(&self) -> impl Iterator<Item = &'a Message> + '_ {
        let c = self.corrupted;
        self.outbox.iter().filter(move |m| c[m.from] || c[m.to])
    }

    /// Metadata of honest↔honest messages, if the toggle is on.
    pub fn metadata(&self) -> impl Iterator<Item = Meta> + '_ {
        let c = self.corrupted;
        let w = self.widths;
        let show = self.show_metadata;
        self.outbox
            .iter()
            .filter(move |m| show && !c[m.from] && !c[m.to])
            .map(move |m| Meta {
                from: m.from,
                to: m.to,
                bits: m.payload.bits(&w),
            })
    }

    /// Everything observable, materialised for logging.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out: Vec<Observation> = self.visible().cloned().map(Observation::Full).collect();
        out.extend(self.metadata().map(Observation::Meta));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Full(Message),
    Meta(Meta),
    Snapshot(Snapshot),
}

/// The adversary's handle during rewriting.
pub struct RewriteCtl<'a> {
    pub round: u64,
    pub phase: Phase,
    pub n: usize,
    /// Protocol messages of corrupted senders; edit, drop or keep.
    pub pending: Vec<Message>,
    injected: Vec<Message>,
    honest: &'a [Message],
    corrupted: &'a [bool],
    pub widths: BitWidths,
}

impl<'a> RewriteCtl<'a> {
    pub fn is_corrupted(&self, pid: Pid) -> bool {
        self.corrupted[pid]
    }

    pub fn corrupted(&self) -> impl Iterator<Item = Pid> + '_ {
        (0..self.n).filter(|&p| self.corrupted[p])
    }

    /// Honest messages addressed to corrupted processors.
    pub fn inbound(&self) -> impl Iterator<Item = &'a Message> + '_ {
        let c = self.corrupted;
        self.honest.iter().filter(move |m| c[m.to])
    }

    /// Sends a message from a corrupted processor; others are dropped.
    pub fn inject(&mut self, msg: Message) {
        self.injected.push(msg);
    }

    pub fn injected_len(&self) -> usize {
        self.injected.len()
    }
}

/// A pluggable adversary.
pub trait Strategy: Send {
    fn name(&self) -> String;
    fn corrupt(&mut self, _view: &AdversaryView<'_>) -> Vec<Pid> {
        Vec::new()
    }
    fn on_snapshot(&mut self, _snap: &Snapshot) {}
    fn rewrite(&mut self, _ctl: &mut RewriteCtl<'_>) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryBudget {
    pub max_corruptions: usize,
    pub used: usize,
}

impl AdversaryBudget {
    pub fn remaining(&self) -> usize {
        self.max_corruptions - self.used
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("corruption of {pid} at round {round} exceeds the budget of {max}")]
    BudgetExceeded { pid: Pid, round: u64, max: usize },
    #[error("message from honest processor {0} injected by the adversary")]
    ForgedSender(Pid),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Bits each processor sent while honest.
    pub honest_bits: Vec<u64>,
    pub honest_msgs: Vec<u64>,
    /// Bits sent by processors while corrupted.
    pub flood_bits: Vec<u64>,
    pub flood_msgs: Vec<u64>,
    pub rounds: u64,
    /// Honest bits per phase.
    pub phase_bits: BTreeMap<Phase, u64>,
}

impl Metrics {
    pub fn new(n: usize) -> Self {
        Metrics {
            honest_bits: vec![0; n],
            honest_msgs: vec![0; n],
            flood_bits: vec![0; n],
            flood_msgs: vec![0; n],
            rounds: 0,
            phase_bits: BTreeMap::new(),
        }
    }

    pub fn max_honest_bits(&self) -> u64 {
        self.honest_bits.iter().copied().max().unwrap_or(0)
    }

    pub fn total_honest_bits(&self) -> u64 {
        self.honest_bits.iter().sum()
    }

    pub fn mean_honest_bits(&self) -> f64 {
        if self.honest_bits.is_empty() {
            0.0
        } else {
            self.total_honest_bits() as f64 / self.honest_bits.len() as f64
        }
    }

    pub fn absorb(&mut self, other: &Metrics) {
        for (a, b) in self.honest_bits.iter_mut().zip(&other.honest_bits) {
            *a += b;
        }
        for (a, b) in self.honest_msgs.iter_mut().zip(&other.honest_msgs) {
            *a += b;
        }
        for (a, b) in self.flood_bits.iter_mut().zip(&other.flood_bits) {
            *a += b;
        }
        for (a, b) in self.flood_msgs.iter_mut().zip(&other.flood_msgs) {
            *a += b;
        }
        self.rounds += other.rounds;
        for (k, v) in &other.phase_bits {
            *self.phase_bits.entry(*k).or_insert(0) += v;
        }
    }
}

/// Line-oriented event log: `round phase kind sender recipient bits`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub lines: Vec<String>,
}

impl Trace {
    pub fn text(&self) -> String {
        let mut s = String::with_capacity(self.lines.len() * 24);
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// Per-round delivery: all messages in send order.
pub type Delivery = Vec<Message>;

pub struct Network {
    pub n: usize,
    pub widths: BitWidths,
    pub budget: AdversaryBudget,
    corrupted: Vec<bool>,
    corrupted_round: Vec<Option<u64>>,
    round: u64,
    pub metrics: Metrics,
    pub show_metadata: bool,
    trace: Option<Trace>,
    observations: Option<Vec<Observation>>,
    events: Vec<PublicEvent>,
    violations: Vec<NetError>,
    track_exposure: bool,
    exposed: Vec<Message>,
}

impl Network {
    pub fn new(n: usize, max_corruptions: usize, widths: BitWidths) -> Self {
        Network {
            n,
            widths,
            budget: AdversaryBudget {
                max_corruptions,
                used: 0,
            },
            corrupted: vec![false; n],
            corrupted_round: vec![None; n],
            round: 0,
            metrics: Metrics::new(n),
            show_metadata: true,
            trace: None,
            observations: None,
            events: Vec::new(),
            violations: Vec::new(),
            track_exposure: false,
            exposed: Vec::new(),
        }
    }

    pub fn for_params(p: &ProtocolParams) -> Self {
        Network::new(p.n, p.corruption_budget(), BitWidths::from_params(p))
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    /// Keeps every honest message with a corrupted endpoint, as the
    /// adversary saw it before rewriting.
    pub fn with_exposure_tracking(mut self) -> Self {
        self.track_exposure = true;
        self
    }

    pub fn take_exposed(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.exposed)
    }

    pub fn with_observation_log(mut self) -> Self {
        self.observations = Some(Vec::new());
        self
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_corrupted(&self, pid: Pid) -> bool {
        self.corrupted[pid]
    }

    pub fn corrupted(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn corrupted_round(&self, pid: Pid) -> Option<u64> {
        self.corrupted_round[pid]
    }

    pub fn corrupted_count(&self) -> usize {
        self.budget.used
    }

    /// Set when the adversary tried to exceed its budget or forge a sender.
    pub fn violations(&self) -> &[NetError] {
        &self.violations
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn observations(&self) -> Option<&[Observation]> {
        self.observations.as_deref()
    }

    pub fn events(&self) -> &[PublicEvent] {
        &self.events
    }

    pub fn publish(&mut self, event: PublicEvent) {
        if let Some(t) = self.trace.as_mut() {
            let line = match &event {
                PublicEvent::Election { node, winners, .. } => format!(
                    "{} - election {}:{} {} -",
                    self.round,
                    node.level,
                    node.index,
                    winners.len()
                ),
                PublicEvent::Note(s) => format!("{} - note {} - -", self.round, s.replace(' ', "_")),
            };
            t.lines.push(line);
        }
        self.events.push(event);
    }

    fn corrupt_now(&mut self, pid: Pid, phase: Phase, state: &mut dyn StateSource) -> Option<Snapshot> {
        if pid >= self.n || self.corrupted[pid] {
            return None;
        }
        if self.budget.used >= self.budget.max_corruptions {
            self.violations.push(NetError::BudgetExceeded {
                pid,
                round: self.round,
                max: self.budget.max_corruptions,
            });
            return None;
        }
        self.budget.used += 1;
        self.corrupted[pid] = true;
        self.corrupted_round[pid] = Some(self.round);
        let mut snap = state.snapshot(pid);
        snap.round = self.round;
        state.on_corrupt(pid, self.round);
        if let Some(t) = self.trace.as_mut() {
            t.lines.push(format!("{} {} corrupt {} - 0", self.round, phase.name(), pid));
        }
        Some(snap)
    }

    /// Corrupts outside a round (before the protocol starts).
    pub fn corrupt_static(&mut self, pids: &[Pid], adversary: &mut dyn Strategy, state: &mut dyn StateSource) {
        for &pid in pids {
            if let Some(snap) = self.corrupt_now(pid, Phase::Share, state) {
                if let Some(o) = self.observations.as_mut() {
                    o.push(Observation::Snapshot(snap.clone()));
                }
                adversary.on_snapshot(&snap);
            }
        }
    }

    /// Runs one synchronous round and returns everything delivered.
    pub fn run_round(
        &mut self,
        phase: Phase,
        outbox: Vec<Message>,
        adversary: &mut dyn Strategy,
        state: &mut dyn StateSource,
    ) -> Delivery {
        // (2) observe and corrupt.
        let requested = {
            let view = AdversaryView {
                round: self.round,
                phase,
                n: self.n,
                budget_left: self.budget.remaining(),
                events: &self.events,
                outbox: &outbox,
                corrupted: &self.corrupted,
                widths: self.widths,
                show_metadata: self.show_metadata,
            };
            if let Some(o) = self.observations.as_mut() {
                o.extend(view.observations());
            }
            adversary.corrupt(&view)
        };
        for pid in requested {
            if let Some(snap) = self.corrupt_now(pid, phase, state) {
                if let Some(o) = self.observations.as_mut() {
                    o.push(Observation::Snapshot(snap.clone()));
                }
                adversary.on_snapshot(&snap);
            }
        }

        if self.track_exposure {
            let c = &self.corrupted;
            self.exposed
                .extend(outbox.iter().filter(|m| c[m.from] || c[m.to]).cloned());
        }

        // (3) rewrite corrupted senders' traffic.
        let (pending, honest): (Vec<Message>, Vec<Message>) =
            outbox.into_iter().partition(|m| self.corrupted[m.from]);
        let mut ctl = RewriteCtl {
            round: self.round,
            phase,
            n: self.n,
            pending,
            injected: Vec::new(),
            honest: &honest,
            corrupted: &self.corrupted,
            widths: self.widths,
        };
        if let Some(o) = self.observations.as_mut() {
            o.extend(ctl.inbound().cloned().map(Observation::Full));
        }
        adversary.rewrite(&mut ctl);
        let RewriteCtl { pending, injected, .. } = ctl;

        // (4) deliver and (5) account.
        let mut delivered = honest;
        let honest_len = delivered.len();
        for m in pending.into_iter().chain(injected) {
            if m.from >= self.n || m.to >= self.n {
                continue;
            }
            if !self.corrupted[m.from] {
                self.violations.push(NetError::ForgedSender(m.from));
                continue;
            }
            delivered.push(m);
        }
        let w = self.widths;
        for (i, m) in delivered.iter().enumerate() {
            let bits = m.payload.bits(&w);
            if i < honest_len {
                self.metrics.honest_bits[m.from] += bits;
                self.metrics.honest_msgs[m.from] += 1;
                *self.metrics.phase_bits.entry(phase).or_insert(0) += bits;
            } else {
                self.metrics.flood_bits[m.from] += bits;
                self.metrics.flood_msgs[m.from] += 1;
            }
            if let Some(t) = self.trace.as_mut() {
                let mut line = String::with_capacity(32);
                let _ = write!(
                    line,
                    "{} {} {} {} {} {}",
                    self.round,
                    phase.name(),
                    if i < honest_len { m.payload.kind() } else { "adv" },
                    m.from,
                    m.to,
                    bits
                );
                t.lines.push(line);
            }
        }
        self.round += 1;
        self.metrics.rounds = self.round;
        delivered
    }
}

#[cfg(test)]
mod tests;
