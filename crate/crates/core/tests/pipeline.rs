use ba_core::ae2e::run_everywhere_ba;
use ba_core::aeba::{run_aeba, AebaConfig};
use ba_core::netsim::{strategies, AdversaryConfig, AdversaryKind};
use ba_core::params::{desk_params, ParamOverrides};
use ba_core::topology::build_topology;

fn inputs(n: usize) -> Vec<bool> {
    (0..n).map(|p| p % 3 == 0).collect()
}

#[test]
fn everywhere_agreement_survives_a_chasing_adversary() {
    let p = desk_params(64, &ParamOverrides::default()).unwrap();
    let topo = build_topology(&p, 41).unwrap();
    let count = p.n / 4;
    let mut adv = strategies::build(&AdversaryConfig::new(AdversaryKind::AdaptiveChaseWinners, p.n, count, 41));
    let out = run_everywhere_ba(&topo, &inputs(p.n), adv.as_mut(), 41, &AebaConfig::default()).unwrap();
    assert!(out.corrupted.iter().filter(|&&c| c).count() <= count);
    assert!(out.valid(), "ae fraction {}", out.ae_fraction);
    assert_eq!(out.fraction(out.agreement().unwrap()), 1.0);
    assert!(!out.loops.is_empty());
    assert!(out.metrics.honest_bits.iter().any(|&b| b > 0));
}

#[test]
fn unanimous_inputs_are_kept_under_static_corruption() {
    let p = desk_params(64, &ParamOverrides::default()).unwrap();
    let topo = build_topology(&p, 7).unwrap();
    for bit in [false, true] {
        let mut adv = strategies::build(&AdversaryConfig::new(AdversaryKind::StaticByzantine, p.n, p.n / 5, 7));
        let out = run_aeba(&topo, &vec![bit; p.n], adv.as_mut(), 7, &AebaConfig::default()).unwrap();
        let good: Vec<usize> = (0..p.n).filter(|&q| !out.corrupted[q]).collect();
        assert!(good.iter().all(|&q| out.outputs[q] != Some(!bit)));
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let p = desk_params(64, &ParamOverrides::default()).unwrap();
    let go = || {
        let topo = build_topology(&p, 3).unwrap();
        let mut adv = strategies::build(&AdversaryConfig::new(AdversaryKind::Equivocator, p.n, p.n / 5, 3));
        let out = run_everywhere_ba(&topo, &inputs(p.n), adv.as_mut(), 3, &AebaConfig::default()).unwrap();
        (out.outputs, out.metrics.honest_bits, out.metrics.rounds)
    };
    assert_eq!(go(), go());
}
