use super::*;
use crate::netsim::strategies::{Equivocator, Null, Overloader, StaticByzantine};
use crate::netsim::{AdversaryConfig, AdversaryKind};
use crate::params::{desk_params, ParamOverrides};
use crate::topology::build_topology;
use proptest::prelude::{prop_assert, proptest};

fn params(n: usize) -> ProtocolParams {
    desk_params(n, &ParamOverrides::default()).unwrap()
}

fn knowledge(n: usize, knowing: &[Pid], msg: &[bool]) -> Ae2eState {
    let mut k = vec![None; n];
    for &p in knowing {
        k[p] = Some(msg.to_vec());
    }
    Ae2eState::new(k)
}

#[test]
fn decision_threshold_is_above_faulty_capacity() {
    let p = params(1024);
    let plan = Ae2ePlan::new(&p);
    assert_eq!(plan.requests_per_label, 100);
    assert_eq!(plan.labels, 32);
    // (1/2 + 3·0.05/8)·100 = 51.875
    assert_eq!(plan.decide_at, 52);
    assert!(plan.faulty_capacity(p.epsilon) < plan.decide_at as f64);
    assert_eq!(decide_threshold(0.05, 60), 32);
    assert_eq!(plan.cap, 4);
}

#[test]
fn request_plan_matches_generated_requests() {
    let p = params(64);
    let plan = Ae2ePlan::new(&p);
    let mut rng = rng::stream(1, &[0]);
    let rp = RequestPlan::new(64, 5, &mut rng);
    let others = rp.order.len();
    let mut sent = vec![vec![false; plan.labels]; 64];
    for r in 0..plan.labels * plan.requests_per_label {
        sent[rp.order[r % others]][r / plan.requests_per_label] = true;
    }
    let mut per_target = vec![0usize; 64];
    for t in 0..64 {
        for l in 0..plan.labels {
            assert_eq!(rp.asked(&plan, t, l), sent[t][l]);
            per_target[t] += usize::from(sent[t][l]);
        }
        assert!(per_target[t] <= plan.cap);
    }
    assert!(!rp.asked(&plan, 5, 0));
}

#[test]
fn everyone_knowledgeable_decides_in_one_loop() {
    let p = params(16);
    let plan = Ae2ePlan::new(&p);
    let mut net = Network::for_params(&p);
    let mut state = knowledge(16, &(0..16).collect::<Vec<_>>(), &[true, false]);
    let mut rng = rng::stream(2, &[0]);
    let r = run_loop(&mut net, &mut Null, &mut state, &[Some(1); 16], 0, &plan, Some(&[true, false]), &mut rng);
    assert_eq!(r.decided, 16);
    assert_eq!(r.wrong, 0);
    assert!(r.all_agree);
    assert_eq!(r.overloaded, 0);
}

#[test]
fn zero_repetitions_leave_everyone_undecided() {
    let p = params(64);
    let mut net = Network::for_params(&p);
    let mut state = knowledge(64, &(0..40).collect::<Vec<_>>(), &[true]);
    let loops = run_ae2e(&mut net, &mut Null, &mut state, &[], &Ae2ePlan::new(&p), Some(&[true]), 0);
    assert!(loops.is_empty());
    assert!(state.decision.iter().all(Option::is_none));
    assert_eq!(state.output(3), Some(&vec![true]));
    assert_eq!(state.output(50), None);
}

fn flooded(show_metadata: bool, seed: u64) -> (usize, usize, usize) {
    let n = 256;
    let p = params(n);
    let plan = Ae2ePlan::new(&p);
    let mut cfg = AdversaryConfig::new(AdversaryKind::Overloader, n, 64, seed);
    cfg.set = Some((0..64).collect());
    cfg.label_range = plan.labels;
    cfg.request_cap = plan.cap;
    let mut adv = Overloader::new(&cfg);
    let mut net = Network::for_params(&p);
    net.show_metadata = show_metadata;
    let mut state = knowledge(n, &(64..218).collect::<Vec<_>>(), &[false]);
    let labels = ideal_labels(n, plan.labels, 12, seed);
    let loops = run_ae2e(&mut net, &mut adv, &mut state, &labels, &plan, Some(&[false]), seed);
    let wrong = loops.iter().map(|l| l.wrong).sum();
    let overloaded = loops.iter().map(|l| l.overloaded).sum();
    let agree = loops.iter().filter(|l| l.all_agree).count();
    (wrong, overloaded, agree)
}

#[test]
fn overloading_never_produces_a_wrong_decision() {
    let mut overloaded = 0;
    for seed in 0..3 {
        let (wrong, o, _) = flooded(true, seed);
        assert_eq!(wrong, 0);
        overloaded += o;
        let (wrong_hidden, _, _) = flooded(false, seed);
        assert_eq!(wrong_hidden, 0);
    }
    assert!(overloaded > 0);
}

#[test]
fn equivocators_cannot_split_decisions() {
    let n = 256;
    let p = params(n);
    let plan = Ae2ePlan::new(&p);
    let bad: Vec<Pid> = (0..64).collect();
    let mut adv = Equivocator::new(bad, 0);
    let mut net = Network::for_params(&p);
    let mut state = knowledge(n, &(64..220).collect::<Vec<_>>(), &[true]);
    let labels = ideal_labels(n, plan.labels, 10, 3);
    let loops = run_ae2e(&mut net, &mut adv, &mut state, &labels, &plan, Some(&[true]), 3);
    assert!(loops.iter().all(|l| l.wrong == 0));
    assert!(loops.last().unwrap().all_agree);
    for l in &loops {
        if let Some(s) = l.min_support {
            assert!(s >= plan.decide_at);
        }
    }
}

proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
    #[test]
    fn decisions_never_change(seed in 0u64..1000) {
        let n = 64;
        let p = params(n);
        let plan = Ae2ePlan::new(&p);
        let mut adv = StaticByzantine::new((0..12).collect(), 0, seed);
        let mut net = Network::for_params(&p);
        let mut state = knowledge(n, &(12..52).collect::<Vec<_>>(), &[true]);
        let mut rng = rng::stream(seed, &[1]);
        let mut seen: Vec<Option<Vec<bool>>> = vec![None; n];
        for (i, ls) in ideal_labels(n, plan.labels, 6, seed).iter().enumerate() {
            run_loop(&mut net, &mut adv, &mut state, ls, i as u32, &plan, Some(&[true]), &mut rng);
            for q in 0..n {
                if let Some(prev) = &seen[q] {
                    prop_assert!(state.decision[q].as_ref() == Some(prev));
                }
                seen[q] = state.decision[q].clone();
            }
        }
    }
}

#[test]
fn ideal_components_give_everyone_the_agreed_bit() {
    let n = 64;
    let p = params(n);
    let mut net = Network::for_params(&p);
    let mut state = knowledge(n, &(0..n).collect::<Vec<_>>(), &[true]);
    let loops = run_ae2e(&mut net, &mut Null, &mut state, &ideal_labels(n, 8, 3, 0), &Ae2ePlan::new(&p), Some(&[true]), 0);
    assert!(loops.iter().all(|l| l.all_agree));
    assert!((0..n).all(|q| state.output(q) == Some(&vec![true])));
}

#[test]
fn everywhere_agreement_without_adversary() {
    let p = params(64);
    let topo = build_topology(&p, 4).unwrap();
    let inputs: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let out = run_everywhere_ba(&topo, &inputs, &mut Null, 4, &AebaConfig::default()).unwrap();
    assert!(out.valid());
    assert_eq!(out.loops.len(), p.w * p.q);
    assert_eq!(out.gcs.words.len(), p.w * p.q);
    assert!(out.loops.iter().all(|l| l.wrong == 0));
    assert!(out.valid_network);
}
