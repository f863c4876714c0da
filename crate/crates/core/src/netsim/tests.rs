use super::strategies::{build, ChaseWinners, Crash, Null, StaticByzantine};
use super::*;
use crate::rng;
use crate::secrets::{self, SharingSpec};
use crate::topology::NodeId;

fn widths() -> BitWidths {
    BitWidths {
        field_bits: 4,
        word_bits: 3,
        label_bits: 2,
        modulus: 13,
    }
}

fn broadcast(n: usize, bit: bool) -> Vec<Message> {
    let mut out = Vec::new();
    for from in 0..n {
        for to in 0..n {
            if from != to {
                out.push(Message::new(from, to, Payload::Votes(vec![bit])));
            }
        }
    }
    out
}

#[test]
fn null_adversary_is_plain_broadcast() {
    let mut net = Network::new(6, 1, widths());
    let out = broadcast(6, true);
    let delivered = net.run_round(Phase::Vote, out.clone(), &mut Null, &mut Stateless);
    assert_eq!(delivered, out);
    assert_eq!(net.corrupted_count(), 0);
    assert!(net.metrics.honest_bits.iter().all(|&b| b == 5));
    assert_eq!(net.metrics.phase_bits[&Phase::Vote], 30);
    assert_eq!(net.round(), 1);
}

#[test]
fn crash_silences_from_its_round() {
    let mut net = Network::new(6, 2, widths());
    let mut adv = Crash::new(vec![1, 4], 1);
    let d0 = net.run_round(Phase::Vote, broadcast(6, true), &mut adv, &mut Stateless);
    assert_eq!(d0.len(), 30);
    let d1 = net.run_round(Phase::Vote, broadcast(6, true), &mut adv, &mut Stateless);
    assert_eq!(d1.len(), 20);
    assert!(d1.iter().all(|m| m.from != 1 && m.from != 4));
    assert_eq!(net.corrupted_round(1), Some(1));
}

struct Flooder;

impl Strategy for Flooder {
    fn name(&self) -> String {
        "flooder".into()
    }
    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if view.round == 0 {
            vec![0]
        } else {
            vec![]
        }
    }
    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        for i in 0..1_000_000usize {
            ctl.inject(Message::new(0, 1 + i % 3, Payload::Junk { bits: 1 }));
        }
    }
}

#[test]
fn flooding_leaves_honest_cost_unchanged() {
    let mut quiet = Network::new(4, 1, widths());
    quiet.run_round(Phase::Vote, broadcast(4, false), &mut Null, &mut Stateless);
    let mut loud = Network::new(4, 1, widths());
    let delivered = loud.run_round(Phase::Vote, broadcast(4, false), &mut Flooder, &mut Stateless);
    assert_eq!(delivered.len(), 9 + 1_000_000 + 3);
    assert_eq!(loud.metrics.flood_msgs[0], 1_000_003);
    assert_eq!(loud.metrics.flood_bits[0], 1_000_003);
    for p in 1..4 {
        assert_eq!(loud.metrics.honest_bits[p], quiet.metrics.honest_bits[p]);
    }
    assert_eq!(loud.metrics.honest_bits[0], 0);
}

struct Greedy;

impl Strategy for Greedy {
    fn name(&self) -> String {
        "greedy".into()
    }
    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        (0..view.n).collect()
    }
}

#[test]
fn budget_overrun_is_rejected_and_flagged() {
    let mut net = Network::new(9, 2, widths());
    net.run_round(Phase::Vote, broadcast(9, true), &mut Greedy, &mut Stateless);
    assert_eq!(net.corrupted_count(), 2);
    assert!(!net.is_valid());
    assert!(matches!(net.violations()[0], NetError::BudgetExceeded { max: 2, .. }));
}

struct Forger;

impl Strategy for Forger {
    fn name(&self) -> String {
        "forger".into()
    }
    fn rewrite(&mut self, ctl: &mut RewriteCtl<'_>) {
        ctl.inject(Message::new(3, 0, Payload::Votes(vec![true])));
    }
}

#[test]
fn forged_sender_is_dropped() {
    let mut net = Network::new(4, 1, widths());
    let d = net.run_round(Phase::Vote, Vec::new(), &mut Forger, &mut Stateless);
    assert!(d.is_empty());
    assert_eq!(net.violations(), &[NetError::ForgedSender(3)]);
}

#[test]
fn observation_log_never_holds_honest_payloads() {
    let n = 12;
    let mut net = Network::new(n, 3, widths()).with_observation_log();
    let mut adv = StaticByzantine::new(vec![2, 5, 7], 1, 9);
    for _ in 0..3 {
        net.run_round(Phase::Vote, broadcast(n, true), &mut adv, &mut Stateless);
    }
    let obs = net.observations().unwrap();
    let mut full = 0;
    let mut meta = 0;
    for o in obs {
        match o {
            Observation::Full(m) => {
                full += 1;
                assert!(net.is_corrupted(m.from) || net.is_corrupted(m.to));
            }
            Observation::Meta(_) => meta += 1,
            Observation::Snapshot(_) => {}
        }
    }
    assert!(full > 0 && meta > 0);
}

#[test]
fn metadata_toggle_hides_honest_traffic_entirely() {
    let n = 8;
    let mut net = Network::new(n, 2, widths()).with_observation_log();
    net.show_metadata = false;
    let mut adv = StaticByzantine::new(vec![0], 0, 1);
    net.run_round(Phase::Vote, broadcast(n, true), &mut adv, &mut Stateless);
    assert!(net
        .observations()
        .unwrap()
        .iter()
        .all(|o| !matches!(o, Observation::Meta(_))));
}

/// One processor holds one share per party of a sharing over GF(13).
struct Holders {
    values: Vec<Option<u32>>,
}

impl StateSource for Holders {
    fn snapshot(&self, pid: Pid) -> Snapshot {
        Snapshot {
            pid,
            shares: self.values[pid].map(|v| vec![(0, vec![v])]).unwrap_or_default(),
            ..Snapshot::default()
        }
    }
}

struct LateGrab {
    victims: Vec<Pid>,
    at: u64,
    seen: Vec<Snapshot>,
}

impl Strategy for LateGrab {
    fn name(&self) -> String {
        "late_grab".into()
    }
    fn corrupt(&mut self, view: &AdversaryView<'_>) -> Vec<Pid> {
        if view.round == self.at {
            self.victims.clone()
        } else {
            vec![]
        }
    }
    fn on_snapshot(&mut self, snap: &Snapshot) {
        self.seen.push(snap.clone());
    }
}

#[test]
fn corruption_after_erase_reveals_nothing() {
    // Processor 0 shares a secret among 1..=5 (t = 2) and erases; processors
    // 1..=3 reshare upward and erase; one round later the adversary corrupts
    // all four. Nothing it sees lets it reconstruct.
    let spec = SharingSpec::new(5, 2, 13).unwrap();
    let mut r = rng::stream(5, &[0]);
    let mut secret = secrets::share(
        secrets::SecretWord::new(7, 3, 13).unwrap(),
        &spec,
        0,
        &mut r,
    )
    .unwrap();
    let mut state = Holders { values: vec![None; 6] };
    let mut out = Vec::new();
    for (i, sh) in secret.iter().enumerate() {
        out.push(Message::new(0, i + 1, Payload::Shares(vec![ShareItem { id: 0, values: vec![sh.value().unwrap()] }])));
    }
    let mut net = Network::new(6, 4, widths());
    let mut adv = LateGrab { victims: vec![0, 1, 2, 3], at: 2, seen: vec![] };
    let d = net.run_round(Phase::Share, out, &mut adv, &mut state);
    for m in &d {
        if let Payload::Shares(items) = &m.payload {
            state.values[m.to] = Some(items[0].values[0]);
        }
    }
    for sh in secret.iter_mut() {
        sh.erase();
    }
    // Holders 1..=3 hand their shares on and erase them.
    for p in 1..=3 {
        state.values[p] = None;
    }
    net.run_round(Phase::Lift, Vec::new(), &mut adv, &mut state);
    net.run_round(Phase::Lift, Vec::new(), &mut adv, &mut state);
    assert_eq!(adv.seen.len(), 4);
    let leaked: usize = adv.seen.iter().map(|s| s.shares.len()).sum();
    assert_eq!(leaked, 0);
    assert!(secret.iter().all(|s| s.value().is_err()));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let run = || {
        let n = 10;
        let mut net = Network::new(n, 3, widths()).with_trace();
        let cfg = AdversaryConfig::new(AdversaryKind::StaticByzantine, n, 3, 77);
        let mut adv = build(&cfg);
        for _ in 0..4 {
            net.run_round(Phase::Vote, broadcast(n, false), adv.as_mut(), &mut Stateless);
        }
        (net.trace().unwrap().text(), net.metrics.clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn chase_waits_for_elections_and_respects_its_limit() {
    let n = 20;
    let mut net = Network::new(n, 6, widths());
    let mut adv = ChaseWinners::new(4, 3);
    net.run_round(Phase::Vote, broadcast(n, true), &mut adv, &mut Stateless);
    assert_eq!(net.corrupted_count(), 0);
    net.publish(PublicEvent::Election {
        node: NodeId::new(2, 0),
        winners: vec![3, 9],
        holders: vec![1, 2, 3, 4, 5, 6],
    });
    net.run_round(Phase::Vote, broadcast(n, true), &mut adv, &mut Stateless);
    let hit: Vec<Pid> = (0..n).filter(|&p| net.is_corrupted(p)).collect();
    assert_eq!(hit, vec![1, 2, 3, 9]);
    net.run_round(Phase::Vote, broadcast(n, true), &mut adv, &mut Stateless);
    assert_eq!(net.corrupted_count(), 4);
}

#[test]
fn registry_lists_builtins_and_accepts_new_ones() {
    let mut reg = StrategyRegistry::default();
    for name in builtin_names() {
        assert!(reg.create(name, &AdversaryConfig::new(AdversaryKind::Null, 4, 1, 0)).is_some());
    }
    reg.register("quiet", |_| Box::new(Null));
    assert!(reg.names().contains(&"quiet"));
    let null = reg.create("null", &AdversaryConfig::new(AdversaryKind::Crash, 4, 1, 0)).unwrap();
    assert_eq!(null.name(), "null");
}
