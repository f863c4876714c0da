//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use ba_core::election::feige_trial;
use ba_core::harness::{self, Report, Scenario};
use ba_core::params::{desk_params, ParamOverrides};
use ba_core::rng;
use ba_core::sampler::{build_random_sampler, is_feasible, Sampler};
use ba_core::secrets::hiding::{view_distribution, view_hides, Path};
use ba_core::secrets::{robust_decode, Field};
use rand::seq::SliceRandom;
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: String) -> bool {
    let line = format!("criterion {id:>2} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn scenario(text: &str) -> Scenario {
    Scenario::from_toml_str(text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

fn run(text: &str) -> Report {
    harness::run(&scenario(text), None).unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

const P: u32 = 13;
const PARTIES: usize = 5;
const T: usize = 2;

/// Adversary view below one node: children observed directly, plus views
/// inside child subtrees.
#[derive(Clone, Debug)]
struct View {
    observed: Vec<usize>,
    below: Vec<Option<View>>,
}

/// Multiset of the observed children's values when the node holds `v`,
/// over every coefficient vector of the degree-`T` sharing polynomial.
fn local_distribution(f: Field, observed: &[usize], v: u32) -> BTreeMap<Vec<u32>, u32> {
    let mut out = BTreeMap::new();
    for code in 0..P.pow(T as u32) {
        let mut coeffs = vec![v];
        let mut c = code;
        for _ in 0..T {
            coeffs.push(c % P);
            c /= P;
        }
        let vals: Vec<u32> = observed.iter().map(|&j| f.eval(&coeffs, j as u32 + 1)).collect();
        *out.entry(vals).or_insert(0) += 1;
    }
    out
}

/// Exact by enumeration: children's subtree views are independent of their
/// values (inductively), so the joint view factorises and is secret-independent
/// exactly when the local distribution is.
fn hides(f: Field, view: &View, memo: &mut BTreeMap<Vec<usize>, bool>) -> bool {
    let local = *memo.entry(view.observed.clone()).or_insert_with(|| {
        let base = local_distribution(f, &view.observed, 0);
        (1..P).all(|v| local_distribution(f, &view.observed, v) == base)
    });
    local && view.below.iter().flatten().all(|c| hides(f, c, memo))
}

fn paths(view: &View, prefix: &[usize], out: &mut Vec<Path>) {
    for &j in &view.observed {
        let mut p = prefix.to_vec();
        p.push(j);
        out.push(p);
    }
    for (j, c) in view.below.iter().enumerate() {
        if let Some(c) = c {
            let mut p = prefix.to_vec();
            p.push(j);
            paths(c, &p, out);
        }
    }
}

fn small_subsets() -> Vec<Vec<usize>> {
    (0u32..1 << PARTIES)
        .filter(|m| m.count_ones() as usize <= T)
        .map(|m| (0..PARTIES).filter(|j| m >> j & 1 == 1).collect())
        .collect()
}

fn uniform(depth: usize, pattern: &[Vec<usize>]) -> View {
    View {
        observed: pattern[0].clone(),
        below: (0..PARTIES)
            .map(|_| (depth > 1).then(|| uniform(depth - 1, &pattern[1..])))
            .collect(),
    }
}

fn random_view(depth: usize, subsets: &[Vec<usize>], r: &mut rng::Rng) -> View {
    View {
        observed: subsets.choose(r).unwrap().clone(),
        below: (0..PARTIES)
            .map(|_| (depth > 1).then(|| random_view(depth - 1, subsets, r)))
            .collect(),
    }
}

#[test]
fn criterion_01_hiding() {
    let start = Instant::now();
    let f = Field::new(P).unwrap();
    let subsets = small_subsets();
    let mut memo = BTreeMap::new();
    let mut checked = 0usize;
    let mut leaks = 0usize;
    let mut disagreements = 0usize;
    let mut check = |view: &View, memo: &mut BTreeMap<Vec<usize>, bool>| {
        let ok = hides(f, view, memo);
        let mut ps = Vec::new();
        paths(view, &[], &mut ps);
        if view_hides(f, T, &ps) != ok {
            disagreements += 1;
        }
        checked += 1;
        if !ok {
            leaks += 1;
        }
    };
    for depth in 1..=3 {
        let mut patterns: Vec<Vec<Vec<usize>>> = vec![vec![]];
        for _ in 0..depth {
            patterns = patterns
                .into_iter()
                .flat_map(|p| {
                    subsets.iter().map(move |s| {
                        let mut q = p.clone();
                        q.push(s.clone());
                        q
                    })
                })
                .collect();
        }
        for pat in &patterns {
            check(&uniform(depth, pat), &mut memo);
        }
    }
    let mut r = rng::stream(1, &[0xacc, 1]);
    for depth in 2..=3 {
        for _ in 0..1000 {
            let v = random_view(depth, &subsets, &mut r);
            check(&v, &mut memo);
        }
    }
    // Depth one, full joint distribution for every secret.
    let mut joint_equal = true;
    for s in &subsets {
        let view: Vec<Path> = s.iter().map(|&j| vec![j]).collect();
        let base = view_distribution(f, PARTIES, T, 1, &view, 0);
        joint_equal &= (1..P).all(|v| view_distribution(f, PARTIES, T, 1, &view, v) == base);
    }
    // Control: t + 1 observed children leak.
    let control = View {
        observed: (0..=T).collect(),
        below: vec![None; PARTIES],
    };
    let control_leaks = !hides(f, &control, &mut memo);
    let elapsed = start.elapsed();
    let pass = leaks == 0
        && disagreements == 0
        && joint_equal
        && control_leaks
        && elapsed < Duration::from_secs(60);
    assert!(verdict(
        1,
        "secret-sharing hiding, p=13 n=5 t=2 depth 1-3",
        pass,
        format!(
            "{checked} views, {leaks} secret-dependent, {disagreements} disagreements with the rank test, \
             depth-1 joint equal {joint_equal}, t+1 control leaks {control_leaks}, {}",
            secs(elapsed)
        ),
    ));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_reconstruction() {
    let f = Field::new(P).unwrap();
    let mut r = rng::stream(2, &[0xacc]);
    let (mut cases, mut ties, mut wrong) = (0u64, 0u64, 0u64);
    let mut first_failure = None;
    for n in 2..=6usize {
        for t in (1..).take_while(|&t| 2 * t < n) {
            for secret in 0..P {
                let mut coeffs = vec![secret];
                coeffs.extend((0..t).map(|_| r.gen_range(0..P)));
                let shares: Vec<u32> = (1..=n as u32).map(|x| f.eval(&coeffs, x)).collect();
                for hmask in 0u32..1 << n {
                    if hmask.count_ones() as usize != t + 1 {
                        continue;
                    }
                    for cmask in 0u32..1 << n {
                        if cmask.count_ones() as usize != t || cmask & hmask != 0 {
                            continue;
                        }
                        let hs: Vec<usize> = (0..n).filter(|j| hmask >> j & 1 == 1).collect();
                        let cs: Vec<usize> = (0..n).filter(|j| cmask >> j & 1 == 1).collect();
                        for code in 0..P.pow(t as u32) {
                            let mut xs = Vec::new();
                            let mut ys = Vec::new();
                            for &j in &hs {
                                xs.push(j as u32 + 1);
                                ys.push(shares[j]);
                            }
                            let mut c = code;
                            for &j in &cs {
                                xs.push(j as u32 + 1);
                                ys.push(c % P);
                                c /= P;
                            }
                            cases += 1;
                            match robust_decode(f, t, &xs, &ys) {
                                Ok(v) if v == secret => {}
                                Ok(_) => {
                                    wrong += 1;
                                    first_failure.get_or_insert((n, t, secret, xs.clone(), ys.clone()));
                                }
                                Err(_) => {
                                    ties += 1;
                                    first_failure.get_or_insert((n, t, secret, xs.clone(), ys.clone()));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let pass = ties + wrong == 0;
    assert!(verdict(
        2,
        "reconstruction robustness, n<=6, t<n/2, p=13",
        pass,
        format!(
            "{cases} cases, {ties} undecidable ties, {wrong} wrong secrets; first failure {first_failure:?}"
        ),
    ));
}

// ---------------------------------------------------------------- 3

/// θ = 1/2 and δ = 3/5 as exact fractions.
const THETA: (usize, usize) = (1, 2);
const DELTA: (usize, usize) = (3, 5);

fn brute_force_passes(smp: &Sampler, r: usize, s: usize, d: usize) -> bool {
    for mask in 0u32..1 << s {
        let size = mask.count_ones() as usize;
        let bad = (0..r)
            .filter(|&x| {
                let hits = smp.image(x).iter().filter(|&&y| mask >> y & 1 == 1).count();
                // hits/d > size/s + θ
                hits * s * THETA.1 > size * d * THETA.1 + THETA.0 * d * s
            })
            .count();
        if bad * DELTA.1 > DELTA.0 * r {
            return false;
        }
    }
    true
}

#[test]
fn criterion_03_samplers() {
    let start = Instant::now();
    let theta = THETA.0 as f64 / THETA.1 as f64;
    let delta = DELTA.0 as f64 / DELTA.1 as f64;
    let d = 4;
    let mut mismatches = 0;
    let mut rates = Vec::new();
    let mut all_feasible = true;
    for size in 8..=12 {
        all_feasible &= is_feasible(size, size, d, theta, delta);
        let mut passed = 0;
        for seed in 0..100u64 {
            let smp = build_random_sampler(size, size, d, theta, delta, seed, false).unwrap();
            let v = smp.verify_exhaustive().unwrap().passed();
            if v != brute_force_passes(&smp, size, size, d) {
                mismatches += 1;
            }
            passed += usize::from(v);
        }
        rates.push((size, passed));
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0
        && all_feasible
        && rates.iter().all(|&(_, p)| p >= 80)
        && elapsed < Duration::from_secs(300);
    assert!(verdict(
        3,
        "sampler verification, r=s=8..12, d=4, theta=1/2, delta=3/5",
        pass,
        format!("{mismatches} verdict mismatches, passes per 100 seeds {rates:?}, {}", secs(elapsed)),
    ));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_lightest_bin() {
    let start = Instant::now();
    let (r, bins) = (64usize, 4usize);
    let honest = (2 * r).div_ceil(3);
    let bound = honest as f64 / r as f64 - 0.1;
    let trials = 10_000;
    let mut ok = 0;
    let mut sum = 0.0;
    for i in 0..trials {
        let mut g = rng::stream(4, &[0xacc, i]);
        let frac = feige_trial(r, bins, honest, &mut g);
        sum += frac;
        ok += usize::from(frac >= bound - 1e-12);
    }
    let elapsed = start.elapsed();
    let rate = ok as f64 / trials as f64;
    let pass = rate >= 0.95 && elapsed < Duration::from_secs(120);
    assert!(verdict(
        4,
        "lightest-bin honest winners, r=64, 4 bins, rushing adversary",
        pass,
        format!(
            "bound {bound:.4}, met in {:.2}% of {trials} trials, mean honest-winner fraction {:.4}, {}",
            100.0 * rate,
            sum / trials as f64,
            secs(elapsed)
        ),
    ));
}

// ---------------------------------------------------------------- 5-7

fn coinba_text(name: &str, adversary: &str, count: usize, coin: &str, inputs: &str, trials: usize, seed: u64) -> String {
    format!(
        r#"
name = "{name}"
protocol = "coinba"
n = 256
trials = {trials}
seed = {seed}
inputs = "{inputs}"
success_threshold = 0.95
[adversary]
kind = "{adversary}"
count = {count}
[coinba]
degree = 24
rounds = 40
coin = "{coin}"
"#
    )
}

#[test]
fn criterion_05_validity() {
    let budget = desk_params(256, &ParamOverrides::default()).unwrap().corruption_budget();
    let adversaries = [
        "null",
        "crash",
        "static_byzantine",
        "adaptive_chase_winners",
        "overloader",
        "equivocator",
    ];
    let coins = ["reliable", "contrary", "minority", "split", "mixed"];
    let mut trials = 0;
    let mut violations = 0;
    let mut worst: BTreeMap<String, u64> = BTreeMap::new();
    let mut seed = 5000;
    for adv in adversaries {
        for coin in coins {
            for inputs in ["zeros", "ones"] {
                let rep = run(&coinba_text("validity", adv, budget, coin, inputs, 9, seed));
                seed += 100;
                trials += rep.trials.len();
                violations += rep.aggregate.validity_violations;
                if rep.aggregate.validity_violations > 0 {
                    *worst.entry(format!("{adv}/{coin}")).or_insert(0) += rep.aggregate.validity_violations;
                }
            }
        }
    }
    let pass = violations == 0 && trials >= 500;
    assert!(verdict(
        5,
        "coin-driven BA validity, n=256, degree 24",
        pass,
        format!("{trials} trials, corruption budget {budget}, {violations} good processors left the common input; by adversary/coin {worst:?}"),
    ));
}

fn criterion_6_runs() -> Report {
    let count = (0.3f64 * 256.0).floor() as usize;
    run(&coinba_text("agreement", "static_byzantine", count, "reliable", "split", 200, 6000))
}

#[test]
fn criterion_06_agreement() {
    let rep = criterion_6_runs();
    let good = rep.trials.iter().filter(|t| t.agreement >= 0.95).count();
    let opposite: f64 = rep.trials.iter().map(|t| t.extra("opposite_pass_rounds")).sum();
    let rate = good as f64 / rep.trials.len() as f64;
    let pass = rate >= 0.95 && opposite == 0.0;
    assert!(verdict(
        6,
        "coin-driven BA agreement, reliable coins, 30% byzantine",
        pass,
        format!(
            ">=95% agreement in {good}/{} trials ({:.1}%), mean agreement {:.4}, rounds with opposite-bit passes {opposite}",
            rep.trials.len(),
            100.0 * rate,
            rep.aggregate.mean_agreement
        ),
    ));
}

#[test]
fn criterion_07_unification() {
    let mut reports = vec![criterion_6_runs()];
    let mut dense = coinba_text("unify-dense", "crash", 25, "mixed", "split", 200, 7000);
    dense = dense.replace("degree = 24", "degree = 128");
    reports.push(run(&dense));
    reports.push(run(&coinba_text("unify-clean", "null", 0, "mixed", "split", 200, 7500)));
    let sum = |key: &str| -> f64 { reports.iter().flat_map(|r| &r.trials).map(|t| t.extra(key)).sum() };
    let (eligible, hits) = (sum("unify_eligible"), sum("unify_hits"));
    let (one_eligible, one_hits) = (sum("one_sided_eligible"), sum("one_sided_hits"));
    let freq = if eligible > 0.0 { hits / eligible } else { 0.0 };
    let one_freq = if one_eligible > 0.0 { one_hits / one_eligible } else { 0.0 };
    let pass = eligible > 0.0 && freq >= 0.45 && one_eligible > 0.0 && one_freq >= 0.45;
    assert!(verdict(
        7,
        "coin-round unification frequency",
        pass,
        format!(
            "{hits} of {eligible} pooled reliable-coin rounds without threshold passes unified ({freq:.4}); \
             with passes on at most one side {one_hits} of {one_eligible} ({one_freq:.4})"
        ),
    ));
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_almost_everywhere() {
    let start = Instant::now();
    let rep = run(
        r#"
name = "aeba-512"
protocol = "aeba"
n = 512
trials = 50
seed = 8000
success_threshold = 0.9
[adversary]
kind = "adaptive_chase_winners"
fraction = 0.25
"#,
    );
    let elapsed = start.elapsed();
    let agreeing = rep.trials.iter().filter(|t| t.agreement >= 0.9 && t.valid).count();
    let violations: f64 = rep.trials.iter().map(|t| t.extra("secrecy_violations")).sum();
    let exposures: f64 = rep.trials.iter().map(|t| t.extra("secrecy_exposures")).sum();
    let rate = agreeing as f64 / rep.trials.len() as f64;
    let pass = rate >= 0.9 && violations == 0.0 && elapsed < Duration::from_secs(1800);
    assert!(verdict(
        8,
        "almost-everywhere BA, n=512, adaptive chase at 25%",
        pass,
        format!(
            ">=90% agreement on a good input in {agreeing}/50 trials, mean agreement {:.4}, \
             secrecy exposures {exposures} (excused on corrupted paths), violations on all-good paths {violations}, {}",
            rep.aggregate.mean_agreement,
            secs(elapsed)
        ),
    ));
}

// ---------------------------------------------------------------- 9-11

fn ae2e_text(name: &str, n: usize, adversary: &str, metadata: bool, trials: usize, loops: usize, seed: u64) -> String {
    format!(
        r#"
name = "{name}"
protocol = "ae2e"
n = {n}
trials = {trials}
seed = {seed}
[adversary]
kind = "{adversary}"
fraction = 0.25
[output]
show_metadata = {metadata}
[ae2e]
knowledgeable = 0.6
loops = {loops}
"#
    )
}

#[test]
fn criterion_09_ae2e_safety() {
    let cases = [
        ("overloader", true),
        ("overloader", false),
        ("equivocator", true),
        ("static_byzantine", true),
        ("crash", true),
    ];
    let mut loops = 0.0;
    let mut wrong = 0.0;
    let mut detail = Vec::new();
    for (i, (adv, meta)) in cases.iter().enumerate() {
        let rep = run(&ae2e_text("safety", 256, adv, *meta, 20, 10, 9000 + 100 * i as u64));
        let l: f64 = rep.trials.iter().map(|t| t.extra("loops")).sum();
        let w: f64 = rep.trials.iter().map(|t| t.extra("wrong_decisions")).sum();
        let o: f64 = rep.trials.iter().map(|t| t.extra("overloaded")).sum();
        loops += l;
        wrong += w;
        detail.push(format!("{adv}(metadata {meta}): {l} loops, {w} wrong, {o} overloaded"));
    }
    let pass = wrong == 0.0 && loops >= 1000.0;
    assert!(verdict(
        9,
        "AE-to-everywhere safety",
        pass,
        format!("{loops} loops, {wrong} wrong decisions; {}", detail.join("; ")),
    ));
}

#[test]
fn criterion_10_ae2e_liveness() {
    let p = desk_params(1024, &ParamOverrides::default()).unwrap();
    let x = p.ae2e_repetitions();
    let expected = (3.0 * (1024f64).ln()).ceil() as usize;
    let rep = run(&ae2e_text("liveness", 1024, "overloader", true, 100, x, 10_000));
    let agreed = rep.trials.iter().filter(|t| t.agreement == 1.0).count();
    let wrong: f64 = rep.trials.iter().map(|t| t.extra("wrong_decisions")).sum();
    let pass = x == expected && agreed >= 99;
    assert!(verdict(
        10,
        "AE-to-everywhere liveness, n=1024, 60% knowledgeable",
        pass,
        format!("X = {x} loops, global agreement in {agreed}/100 trials, wrong decisions {wrong}, 25% overloader"),
    ));
}

fn everywhere_text(n: usize, trials: usize, seed: u64) -> String {
    format!(
        r#"
name = "everywhere-{n}"
protocol = "everywhere"
n = {n}
trials = {trials}
seed = {seed}
[adversary]
kind = "adaptive_chase_winners"
fraction = 0.25
"#
    )
}

#[test]
fn criterion_11_everywhere() {
    let big = run(&everywhere_text(256, 50, 11_000));
    let small = run(&everywhere_text(64, 50, 11_000));
    let ok = big.trials.iter().filter(|t| t.success).count();
    let ratio = big.aggregate.mean_max_honest_bits / small.aggregate.mean_max_honest_bits;
    let growth = harness::compare_scaling(&harness::merge_scaling(&[small.clone(), big.clone()])).unwrap();
    let pass = ok >= 45 && ratio < 3.0;
    assert!(verdict(
        11,
        "everywhere BA, n=256, adaptive chase at 25%",
        pass,
        format!(
            "agreement+validity in {ok}/50 trials; mean max honest bits {:.0} (n=256) / {:.0} (n=64) = {ratio:.3} \
             vs 4.0 linear; fitted exponent {:.3}",
            big.aggregate.mean_max_honest_bits, small.aggregate.mean_max_honest_bits, growth.exponent
        ),
    ));
}

// ---------------------------------------------------------------- 12

const DETERMINISM: [&str; 8] = [
    "name = \"d-secrets\"\nprotocol = \"secrets-test\"\ntrials = 20\nseed = 3\n[secrets]\ndepth = 3\ncorrupt = 1\n",
    "name = \"d-sampler\"\nprotocol = \"sampler-test\"\ntrials = 10\n[sampler]\nr = 10\ns = 10\n",
    "name = \"d-coinba\"\nprotocol = \"coinba\"\nn = 64\ntrials = 4\ninputs = \"split\"\n[adversary]\nkind = \"static_byzantine\"\ncount = 12\n[coinba]\ndegree = 8\nrounds = 10\ncoin = \"mixed\"\n[output]\ntrace = true\n",
    "name = \"d-aeba\"\nprotocol = \"aeba\"\nn = 64\ntrials = 3\n[adversary]\nkind = \"adaptive_chase_winners\"\nfraction = 0.25\n[output]\ntrace = true\n",
    "name = \"d-gcs\"\nprotocol = \"gcs\"\nn = 64\ntrials = 3\n[adversary]\nkind = \"crash\"\nfraction = 0.2\n[output]\ntrace = true\n",
    "name = \"d-ae2e\"\nprotocol = \"ae2e\"\nn = 64\ntrials = 3\n[adversary]\nkind = \"overloader\"\nfraction = 0.25\n[ae2e]\nknowledgeable = 0.6\n[output]\ntrace = true\nshow_metadata = false\n",
    "name = \"d-equiv\"\nprotocol = \"ae2e\"\nn = 64\ntrials = 3\n[adversary]\nkind = \"equivocator\"\nfraction = 0.25\n[output]\ntrace = true\n",
    "name = \"d-everywhere\"\nprotocol = \"everywhere\"\nsweep = [16, 64]\ntrials = 2\n[adversary]\nkind = \"adaptive_chase_winners\"\nfraction = 0.2\n[output]\ntrace = true\n",
];

fn snapshot(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_12_determinism() {
    let mut files = 0;
    let mut differing = Vec::new();
    let mut traces_verified = true;
    for text in DETERMINISM {
        let sc = scenario(text);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            harness::run(&sc, Some(dir)).unwrap().write(dir).unwrap();
        }
        let (x, y) = (snapshot(a.path()), snapshot(b.path()));
        files += x.len();
        if x != y {
            differing.push(sc.name.clone());
        }
        traces_verified &= harness::verify_traces(a.path()).unwrap().ok();
    }
    let pass = differing.is_empty() && traces_verified;
    assert!(verdict(
        12,
        "determinism of reports and traces",
        pass,
        format!(
            "{} scenarios, {files} files compared byte for byte, differing {differing:?}, traces reproduce reports {traces_verified}",
            DETERMINISM.len()
        ),
    ));
}
