//! Experiment runner.
//!
//! A [`Scenario`] is a TOML document naming a protocol, its parameters, an
//! adversary and a number of seeded trials. [`run`] executes the trials
//! (concurrently, each with its own streams) and folds them, in trial order,
//! into a [`Report`]. Reports are written as `report.json` plus
//! `trials.csv`; traces, when requested, go to `traces/` with one file per
//! trial, and [`verify_traces`] recomputes every bit count from them.
//!
//! Trial `i` of size `n` uses seed `seed + i`, so a single trial can be
//! replayed by running one trial with that seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ae2e::{ideal_labels, run_ae2e, run_everywhere_ba, Ae2ePlan, Ae2eState};
use crate::aeba::{run_aeba, AebaConfig};
use crate::coinba::{self, AdversarialCoins, CoinBaConfig, CoinSource, MixedCoins, ReliableCoins, StandaloneEnv};
use crate::netsim::{strategies, AdversaryConfig, AdversaryKind, BitWidths, Metrics, Network, Pid, Stateless};
use crate::params::{desk_params, ParamOverrides, ProtocolParams};
use crate::rng::{self, tags};
use crate::sampler::{build_random_sampler, is_feasible};
use crate::secrets::{robust_decode, share_values, Field, SharingSpec};
use crate::topology::{build_topology, random_regular_graph};

pub const REPORT_FILE: &str = "report.json";
pub const TRIALS_FILE: &str = "trials.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("line {line}: field `{field}`: {msg}")]
    Field { line: usize, field: String, msg: String },
    #[error("trial {trial} (n = {n}): {msg}")]
    Trial { trial: usize, n: usize, msg: String },
    #[error("{path}: {msg}")]
    Report { path: PathBuf, msg: String },
    #[error("scaling fit needs at least two distinct sizes, got {0}")]
    Scaling(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SecretsTest,
    SamplerTest,
    Coinba,
    Aeba,
    Gcs,
    Ae2e,
    Everywhere,
}

impl Protocol {
    fn uses_network(self) -> bool {
        !matches!(self, Protocol::SecretsTest | Protocol::SamplerTest)
    }

    fn uses_params(self) -> bool {
        !matches!(self, Protocol::SecretsTest | Protocol::SamplerTest | Protocol::Coinba)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Random,
    Zeros,
    Ones,
    /// Even processors 0, odd processors 1.
    Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoinMode {
    #[default]
    Reliable,
    Contrary,
    Minority,
    Split,
    /// Reliable with probability `reliability`, otherwise contrary.
    Mixed,
}

/// A scalar parameter override as written in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    fn text(&self) -> String {
        match self {
            ParamValue::Bool(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(f) => f.to_string(),
            ParamValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    #[serde(default = "null_kind")]
    pub kind: AdversaryKind,
    /// Processors to corrupt; exclusive with `fraction`.
    pub count: Option<usize>,
    /// Fraction of `n` to corrupt, rounded down.
    pub fraction: Option<f64>,
    /// Round of static corruptions.
    #[serde(default)]
    pub round: u64,
}

fn null_kind() -> AdversaryKind {
    AdversaryKind::Null
}

impl Default for AdversarySpec {
    fn default() -> Self {
        AdversarySpec {
            kind: AdversaryKind::Null,
            count: None,
            fraction: None,
            round: 0,
        }
    }
}

impl AdversarySpec {
    pub fn count_for(&self, n: usize) -> usize {
        match (self.kind, self.count, self.fraction) {
            (AdversaryKind::Null, _, _) => 0,
            (_, Some(c), _) => c,
            (_, None, Some(f)) => (f * n as f64 + 1e-9).floor() as usize,
            (_, None, None) => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Write one trace file per trial.
    #[serde(default)]
    pub trace: bool,
    /// Whether the adversary sees sender and recipient of honest traffic.
    #[serde(default = "yes")]
    pub show_metadata: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            trace: false,
            show_metadata: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoinbaSpec {
    pub degree: usize,
    pub rounds: usize,
    pub coin: CoinMode,
    pub reliability: f64,
    pub epsilon: f64,
    /// Defaults to `epsilon / 5`.
    pub epsilon0: Option<f64>,
}

impl Default for CoinbaSpec {
    fn default() -> Self {
        CoinbaSpec {
            degree: 24,
            rounds: 40,
            coin: CoinMode::Reliable,
            reliability: 0.5,
            epsilon: 0.05,
            epsilon0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecretsSpec {
    pub modulus: u32,
    pub parties: usize,
    pub threshold: usize,
    pub depth: usize,
    /// Shares per sharing replaced by random values.
    pub corrupt: usize,
}

impl Default for SecretsSpec {
    fn default() -> Self {
        SecretsSpec {
            modulus: 13,
            parties: 5,
            threshold: 2,
            depth: 1,
            corrupt: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub r: usize,
    pub s: usize,
    pub d: usize,
    pub theta: f64,
    pub delta: f64,
    /// Build even when the parameters are infeasible.
    pub waive: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            r: 8,
            s: 8,
            d: 4,
            theta: 0.5,
            delta: 0.6,
            waive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ae2eSpec {
    /// Fraction of `n` (drawn from good processors) that knows the message.
    pub knowledgeable: f64,
    /// Loops to run; defaults to the parameter record's repetition count.
    pub loops: Option<usize>,
    pub message_bits: usize,
}

impl Default for Ae2eSpec {
    fn default() -> Self {
        Ae2eSpec {
            knowledgeable: 1.0,
            loops: None,
            message_bits: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcsSpec {
    /// Sequence length; defaults to `w·q`.
    pub words: Option<usize>,
    /// A word counts as known when at least `1 - slack` of good processors learned it.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Network size; ignored by the secret-sharing and sampler tests.
    pub n: Option<usize>,
    /// Several sizes; overrides `n` and adds a scaling table.
    #[serde(default)]
    pub sweep: Vec<usize>,
    /// Agreement fraction a trial needs to count as a success.
    #[serde(default = "default_success")]
    pub success_threshold: f64,
    #[serde(default)]
    pub inputs: InputMode,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub coinba: CoinbaSpec,
    #[serde(default)]
    pub secrets: SecretsSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub ae2e: Ae2eSpec,
    #[serde(default)]
    pub gcs: GcsSpec,
}

fn one() -> usize {
    1
}

fn default_success() -> f64 {
    0.9
}

/// Line of `key` inside `[table]` (or at top level when `table` is empty).
fn line_of(text: &str, table: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        let k = k.trim();
        let dotted = format!("{table}.{key}");
        if (current == table && k == key) || (current.is_empty() && k == dotted) {
            return i + 1;
        }
    }
    0
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            HarnessError::Syntax {
                line,
                column,
                msg: e.message().trim().to_string(),
            }
        })?;
        sc.validate().map_err(|(table, key, msg)| HarnessError::Field {
            line: line_of(text, table, &key),
            field: if table.is_empty() { key } else { format!("{table}.{key}") },
            msg,
        })?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    /// Network sizes, one per scaling row.
    pub fn sizes(&self) -> Vec<usize> {
        if !self.sweep.is_empty() {
            self.sweep.clone()
        } else {
            vec![self.n.unwrap_or(0)]
        }
    }

    pub fn overrides(&self) -> ParamOverrides {
        let mut ov = ParamOverrides::default();
        for (k, v) in &self.params {
            ov.set(0, k, &v.text()).expect("validated");
        }
        ov
    }

    /// Parameter record for size `n`.
    pub fn params_for(&self, n: usize) -> Result<ProtocolParams, crate::params::ParamsError> {
        desk_params(n, &self.overrides())
    }

    fn validate(&self) -> Result<(), (&'static str, String, String)> {
        let top = |k: &str, m: String| ("", k.to_string(), m);
        let mut ov = ParamOverrides::default();
        for (k, v) in &self.params {
            ov.set(0, k, &v.text()).map_err(|e| {
                let msg = match e {
                    crate::params::ParamsError::Parse { msg, .. } => {
                        msg.split_once(": ").map_or(msg.clone(), |(_, m)| m.to_string())
                    }
                    other => other.to_string(),
                };
                ("params", k.clone(), msg)
            })?;
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return Err(top("success_threshold", "must lie in [0, 1]".into()));
        }
        let a = &self.adversary;
        if a.count.is_some() && a.fraction.is_some() {
            return Err(("adversary", "fraction".into(), "give either `count` or `fraction`".into()));
        }
        if let Some(f) = a.fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(("adversary", "fraction".into(), "must lie in [0, 1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.ae2e.knowledgeable) {
            return Err(("ae2e", "knowledgeable".into(), "must lie in [0, 1]".into()));
        }
        if self.ae2e.message_bits == 0 {
            return Err(("ae2e", "message_bits".into(), "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coinba.reliability) {
            return Err(("coinba", "reliability".into(), "must lie in [0, 1]".into()));
        }
        let eps0 = self.coinba.epsilon0.unwrap_or(self.coinba.epsilon / 5.0);
        if self.protocol == Protocol::Coinba {
            CoinBaConfig::new(self.coinba.epsilon, eps0, self.coinba.rounds)
                .map_err(|e| ("coinba", "epsilon0".into(), e.to_string()))?;
        }
        if self.protocol == Protocol::SecretsTest {
            let s = &self.secrets;
            SharingSpec::new(s.parties, s.threshold, s.modulus)
                .map_err(|e| ("secrets", "threshold".into(), e.to_string()))?;
            if s.depth == 0 {
                return Err(("secrets", "depth".into(), "must be at least 1".into()));
            }
            if s.corrupt > s.parties {
                return Err(("secrets", "corrupt".into(), "exceeds the number of parties".into()));
            }
        }
        if !self.protocol.uses_network() {
            return Ok(());
        }
        let key = if self.sweep.is_empty() { "n" } else { "sweep" };
        let sizes = self.sizes();
        if sizes.iter().any(|&n| n < 2) {
            return Err(top(key, "a network needs at least 2 processors".into()));
        }
        for n in sizes {
            if a.count_for(n) > n {
                return Err(("adversary", "count".into(), format!("more corruptions than n = {n}")));
            }
            if self.protocol.uses_params() {
                desk_params(n, &ov).map_err(|e| top(key, e.to_string()))?;
            } else if self.coinba.degree >= n {
                return Err(("coinba", "degree".into(), format!("must be below n = {n}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub n: usize,
    pub seed: u64,
    pub success: bool,
    /// Fraction of good processors holding the majority output.
    pub agreement: f64,
    pub agreed_bit: Option<bool>,
    pub valid: bool,
    /// Good processors whose output no good processor had as input.
    pub validity_violations: u64,
    pub corrupted: usize,
    pub rounds: u64,
    pub max_honest_bits: u64,
    pub mean_honest_bits: f64,
    pub total_honest_bits: u64,
    pub phase_bits: BTreeMap<String, u64>,
    /// Protocol-specific counters.
    pub extra: BTreeMap<String, f64>,
    pub trace_file: Option<String>,
}

impl TrialRecord {
    fn blank(trial: usize, n: usize, seed: u64) -> Self {
        TrialRecord {
            trial,
            n,
            seed,
            success: false,
            agreement: 0.0,
            agreed_bit: None,
            valid: false,
            validity_violations: 0,
            corrupted: 0,
            rounds: 0,
            max_honest_bits: 0,
            mean_honest_bits: 0.0,
            total_honest_bits: 0,
            phase_bits: BTreeMap::new(),
            extra: BTreeMap::new(),
            trace_file: None,
        }
    }

    fn absorb_metrics(&mut self, m: &Metrics) {
        self.rounds = m.rounds;
        self.max_honest_bits = m.max_honest_bits();
        self.mean_honest_bits = m.mean_honest_bits();
        self.total_honest_bits = m.total_honest_bits();
        self.phase_bits = m.phase_bits.iter().map(|(k, v)| (k.name().to_string(), *v)).collect();
    }

    pub fn extra(&self, key: &str) -> f64 {
        self.extra.get(key).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_agreement: f64,
    pub invalid_trials: usize,
    pub validity_violations: u64,
    pub mean_max_honest_bits: f64,
    pub max_max_honest_bits: u64,
    pub mean_honest_bits: f64,
    pub mean_rounds: f64,
}

impl Aggregate {
    fn of(trials: &[&TrialRecord]) -> Self {
        let k = trials.len();
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
            if k == 0 {
                0.0
            } else {
                trials.iter().map(|t| f(t)).sum::<f64>() / k as f64
            }
        };
        let successes = trials.iter().filter(|t| t.success).count();
        Aggregate {
            trials: k,
            successes,
            success_rate: if k == 0 { 0.0 } else { successes as f64 / k as f64 },
            mean_agreement: mean(&|t| t.agreement),
            invalid_trials: trials.iter().filter(|t| !t.valid).count(),
            validity_violations: trials.iter().map(|t| t.validity_violations).sum(),
            mean_max_honest_bits: mean(&|t| t.max_honest_bits as f64),
            max_max_honest_bits: trials.iter().map(|t| t.max_honest_bits).max().unwrap_or(0),
            mean_honest_bits: mean(&|t| t.mean_honest_bits),
            mean_rounds: mean(&|t| t.rounds as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub trials: usize,
    pub mean_max_honest_bits: f64,
    pub max_max_honest_bits: u64,
    pub mean_honest_bits: f64,
}

/// Least-squares fit of `ln(bits) = exponent · ln(n) + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub exponent: f64,
    pub intercept: f64,
    pub points: Vec<(usize, f64)>,
    pub caveat: String,
}

pub const POLYLOG_CAVEAT: &str = "exponent fitted over small n; polylogarithmic factors inflate it \
     relative to the asymptotic rate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub scenario: Scenario,
    /// Parameter record per size, for protocols that use one.
    pub params: Vec<ProtocolParams>,
    pub trials: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    pub scaling: Vec<ScalingRow>,
    pub growth: Option<Growth>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Extra-counter keys used by any trial, sorted.
    fn extra_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.trials.iter().flat_map(|t| t.extra.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// One row per trial; the header is always present.
    pub fn trials_csv(&self) -> String {
        let extra = self.extra_keys();
        let mut s = String::from(
            "trial,n,seed,success,agreement,agreed_bit,valid,validity_violations,corrupted,rounds,\
             max_honest_bits,mean_honest_bits,total_honest_bits",
        );
        for k in &extra {
            s.push(',');
            s.push_str(k);
        }
        s.push('\n');
        for t in &self.trials {
            let bit = t.agreed_bit.map_or(String::new(), |b| u8::from(b).to_string());
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                t.trial,
                t.n,
                t.seed,
                t.success,
                t.agreement,
                bit,
                t.valid,
                t.validity_violations,
                t.corrupted,
                t.rounds,
                t.max_honest_bits,
                t.mean_honest_bits,
                t.total_honest_bits
            );
            for k in &extra {
                let _ = write!(s, ",{}", t.extra(k));
            }
            s.push('\n');
        }
        s
    }

    pub fn scaling_csv(&self) -> String {
        let mut s = String::from("n,trials,mean_max_honest_bits,max_max_honest_bits,mean_honest_bits\n");
        for r in &self.scaling {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.n, r.trials, r.mean_max_honest_bits, r.max_max_honest_bits, r.mean_honest_bits
            );
        }
        s
    }

    /// Writes the report and its tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let put = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))
        };
        put(REPORT_FILE, self.to_json())?;
        put(TRIALS_FILE, self.trials_csv())?;
        if self.scaling.len() > 1 {
            put(SCALING_FILE, self.scaling_csv())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Report::from_json(&text).map_err(|e| HarnessError::Report {
            path,
            msg: e.to_string(),
        })
    }
}

/// Runs every trial of `sc`. Traces are written under `out` when the
/// scenario asks for them and `out` is given.
pub fn run(sc: &Scenario, out: Option<&Path>) -> Result<Report, HarnessError> {
    let sizes = sc.sizes();
    let params = if sc.protocol.uses_params() {
        sizes
            .iter()
            .map(|&n| sc.params_for(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Field {
                line: 0,
                field: "params".into(),
                msg: e.to_string(),
            })?
    } else {
        Vec::new()
    };
    let trace_dir = match (sc.output.trace && sc.protocol.uses_network(), out) {
        (true, Some(dir)) => {
            let d = dir.join(TRACE_DIR);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            Some(d)
        }
        _ => None,
    };
    let jobs: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(si, _)| (0..sc.trials).map(move |i| (si, i)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(si, i)| {
            let n = sizes[si];
            let seed = sc.seed.wrapping_add(i as u64);
            let p = params.get(si);
            let (mut rec, trace) = run_trial(sc, n, p, i, seed).map_err(|msg| HarnessError::Trial { trial: i, n, msg })?;
            if let (Some(dir), Some(text)) = (&trace_dir, trace) {
                let name = format!("n{n}-trial{i:05}.trace");
                let path = dir.join(&name);
                fs::write(&path, text).map_err(io_err(&path))?;
                rec.trace_file = Some(format!("{TRACE_DIR}/{name}"));
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let all: Vec<&TrialRecord> = trials.iter().collect();
    let aggregate = Aggregate::of(&all);
    let scaling: Vec<ScalingRow> = if sc.protocol.uses_network() {
        sizes
            .iter()
            .map(|&n| {
                let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.n == n).collect();
                let a = Aggregate::of(&rows);
                ScalingRow {
                    n,
                    trials: a.trials,
                    mean_max_honest_bits: a.mean_max_honest_bits,
                    max_max_honest_bits: a.max_max_honest_bits,
                    mean_honest_bits: a.mean_honest_bits,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let growth = compare_scaling(&scaling).ok();
    Ok(Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: sc.clone(),
        params,
        trials,
        aggregate,
        scaling,
        growth,
    })
}

/// Loads a scenario, runs it and writes the report into `out`.
pub fn run_scenario(path: &Path, out: &Path) -> Result<Report, HarnessError> {
    let sc = Scenario::load(path)?;
    let report = run(&sc, Some(out))?;
    report.write(out)?;
    Ok(report)
}

/// Growth exponent of the mean max honest bits across scaling rows.
pub fn compare_scaling(rows: &[ScalingRow]) -> Result<Growth, HarnessError> {
    let points: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.trials > 0 && r.mean_max_honest_bits > 0.0)
        .map(|r| (r.n, r.mean_max_honest_bits))
        .collect();
    fit_growth(&points)
}

/// Scaling rows of several reports, merged and sorted by `n`.
pub fn merge_scaling(reports: &[Report]) -> Vec<ScalingRow> {
    let mut rows: Vec<ScalingRow> = reports.iter().flat_map(|r| r.scaling.iter().cloned()).collect();
    rows.sort_by_key(|r| r.n);
    rows
}

/// Least-squares slope of `ln y` against `ln n`.
pub fn fit_growth(points: &[(usize, f64)]) -> Result<Growth, HarnessError> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(HarnessError::Scaling(distinct.len()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    Ok(Growth {
        exponent,
        intercept: my - exponent * mx,
        points: points.to_vec(),
        caveat: POLYLOG_CAVEAT.to_string(),
    })
}

fn make_inputs(mode: InputMode, n: usize, seed: u64) -> Vec<bool> {
    match mode {
        InputMode::Random => {
            let mut r = rng::stream(seed, &[tags::INPUTS]);
            (0..n).map(|_| r.gen()).collect()
        }
        InputMode::Zeros => vec![false; n],
        InputMode::Ones => vec![true; n],
        InputMode::Split => (0..n).map(|p| p % 2 == 1).collect(),
    }
}

fn adversary_config(sc: &Scenario, n: usize, seed: u64) -> AdversaryConfig {
    let count = sc.adversary.count_for(n);
    let mut cfg = AdversaryConfig::new(sc.adversary.kind, n, count, seed);
    cfg.round = sc.adversary.round;
    if sc.adversary.kind != AdversaryKind::AdaptiveChaseWinners && count > 0 {
        let mut r = rng::stream(seed, &[tags::ADVERSARY, 2]);
        let mut set = sample(&mut r, n, count.min(n)).into_vec();
        set.sort_unstable();
        cfg.set = Some(set);
    }
    cfg
}

/// Good processors whose bit is one no good processor had as input.
fn invalid_outputs(inputs: &[bool], corrupted: &[bool], outputs: &[Option<bool>]) -> u64 {
    let good = |p: &usize| !corrupted[*p];
    let has = |b: bool| (0..inputs.len()).filter(good).any(|p| inputs[p] == b);
    (0..outputs.len())
        .filter(good)
        .filter(|&p| outputs[p].is_some_and(|b| !has(b)))
        .count() as u64
}

fn with_output(mut net: Network, out: &OutputSpec) -> Network {
    if out.trace {
        net = net.with_trace();
    }
    net.show_metadata = out.show_metadata;
    net
}

type TrialResult = Result<(TrialRecord, Option<String>), String>;

fn run_trial(sc: &Scenario, n: usize, p: Option<&ProtocolParams>, i: usize, seed: u64) -> TrialResult {
    let rec = TrialRecord::blank(i, n, seed);
    match sc.protocol {
        Protocol::SecretsTest => Ok((secrets_trial(&sc.secrets, rec, seed), None)),
        Protocol::SamplerTest => sampler_trial(&sc.sampler, rec, seed).map(|r| (r, None)),
        Protocol::Coinba => coinba_trial(sc, rec, seed),
        Protocol::Aeba | Protocol::Gcs => aeba_trial(sc, p.expect("params"), rec, seed),
        Protocol::Ae2e => ae2e_trial(sc, p.expect("params"), rec, seed),
        Protocol::Everywhere => everywhere_trial(sc, p.expect("params"), rec, seed),
    }
}

/// Shares a random secret through `depth` levels, replaces `corrupt`
/// shares of every sharing with random values and decodes bottom-up.
fn secrets_trial(s: &SecretsSpec, mut rec: TrialRecord, seed: u64) -> TrialRecord {
    let spec = SharingSpec::new(s.parties, s.threshold, s.modulus).expect("validated");
    let f = Field::new(s.modulus).expect("validated");
    let mut r = rng::stream(seed, &[tags::SHARING]);
    let secret = r.gen_range(0..s.modulus);
    let xs: Vec<u32> = (1..=s.parties as u32).collect();
    let mut failures = 0u64;
    #[allow(clippy::too_many_arguments)]
    fn down(
        value: u32,
        depth: usize,
        s: &SecretsSpec,
        spec: &SharingSpec,
        f: Field,
        xs: &[u32],
        r: &mut rng::Rng,
        failures: &mut u64,
    ) -> Option<u32> {
        if depth == 0 {
            return Some(value);
        }
        let shares = share_values(value, spec, r);
        let mut ys: Vec<Option<u32>> = shares
            .iter()
            .map(|&v| down(v, depth - 1, s, spec, f, xs, r, failures))
            .collect();
        let mut order: Vec<usize> = (0..s.parties).collect();
        order.shuffle(r);
        for &j in &order[..s.corrupt] {
            ys[j] = Some(r.gen_range(0..s.modulus));
        }
        let (px, py): (Vec<u32>, Vec<u32>) = xs.iter().zip(&ys).filter_map(|(&x, y)| y.map(|y| (x, y))).unzip();
        match robust_decode(f, s.threshold, &px, &py) {
            Ok(v) => Some(v),
            Err(_) => {
                *failures += 1;
                None
            }
        }
    }
    let got = down(secret, s.depth, s, &spec, f, &xs, &mut r, &mut failures);
    rec.success = got == Some(secret);
    rec.valid = got.is_none_or(|g| g == secret);
    rec.agreement = f64::from(u8::from(rec.success));
    rec.extra.insert("decode_failures".into(), failures as f64);
    rec.extra.insert("wrong_secret".into(), f64::from(u8::from(!rec.valid)));
    rec
}

fn sampler_trial(s: &SamplerSpec, mut rec: TrialRecord, seed: u64) -> Result<TrialRecord, String> {
    let sampler = build_random_sampler(s.r, s.s, s.d, s.theta, s.delta, seed, s.waive).map_err(|e| e.to_string())?;
    let verdict = sampler.verify_exhaustive().map_err(|e| e.to_string())?;
    rec.success = verdict.passed();
    rec.valid = true;
    rec.agreement = f64::from(u8::from(rec.success));
    rec.extra.insert(
        "feasible".into(),
        f64::from(u8::from(is_feasible(s.r, s.s, s.d, s.theta, s.delta))),
    );
    rec.extra.insert("max_out_degree".into(), sampler.max_out_degree() as f64);
    Ok(rec)
}

fn coinba_trial(sc: &Scenario, mut rec: TrialRecord, seed: u64) -> TrialResult {
    let n = rec.n;
    let c = &sc.coinba;
    let eps0 = c.epsilon0.unwrap_or(c.epsilon / 5.0);
    let cfg = CoinBaConfig::new(c.epsilon, eps0, c.rounds).map_err(|e| e.to_string())?;
    let mut r = rng::stream(seed, &[tags::TOPOLOGY]);
    let graph = random_regular_graph(n, c.degree, &mut r).map_err(|e| e.to_string())?;
    let members: Vec<Pid> = (0..n).collect();
    let bits = make_inputs(sc.inputs, n, seed);
    let inputs: Vec<Vec<bool>> = bits.iter().map(|&b| vec![b]).collect();
    let acfg = adversary_config(sc, n, seed);
    let widths = BitWidths {
        field_bits: 1,
        word_bits: 1,
        label_bits: 1,
        modulus: 2,
    };
    let mut net = with_output(Network::new(n, acfg.count, widths), &sc.output);
    let mut adv = strategies::build(&acfg);
    let mut coins: Box<dyn CoinSource> = match c.coin {
        CoinMode::Reliable => Box::new(ReliableCoins::new(seed)),
        CoinMode::Contrary => Box::new(AdversarialCoins::Contrary),
        CoinMode::Minority => Box::new(AdversarialCoins::Minority),
        CoinMode::Split => Box::new(AdversarialCoins::Split),
        CoinMode::Mixed => Box::new(MixedCoins::new(c.reliability, AdversarialCoins::Contrary, seed)),
    };
    let out = coinba::run(
        &graph,
        &members,
        &inputs,
        &cfg,
        StandaloneEnv {
            net: &mut net,
            adversary: adv.as_mut(),
            state: &mut Stateless,
            coins: coins.as_mut(),
        },
    )
    .map_err(|e| e.to_string())?;
    let corrupted: Vec<bool> = out.good.iter().map(|g| !g).collect();
    let outputs: Vec<Option<bool>> = out.committed.iter().map(|v| Some(v[0])).collect();
    let (frac, bit) = out.agreement(0);
    rec.agreement = frac;
    rec.agreed_bit = Some(bit);
    rec.validity_violations = invalid_outputs(&bits, &corrupted, &outputs);
    rec.valid = rec.validity_violations == 0 && net.is_valid();
    rec.success = rec.valid && frac >= sc.success_threshold;
    rec.corrupted = net.corrupted_count();
    rec.absorb_metrics(&net.metrics);
    let opposite = out.transcript.iter().filter(|t| t.opposite_passes()).count();
    let eligible: Vec<_> = out
        .transcript
        .iter()
        .filter(|t| t.coin_reliable && t.passes == [0, 0] && !t.unified_before())
        .collect();
    let unified = eligible.iter().filter(|t| t.unified_after()).count();
    let one_sided: Vec<_> = out
        .transcript
        .iter()
        .filter(|t| t.coin_reliable && !t.opposite_passes() && !t.unified_before())
        .collect();
    let one_sided_unified = one_sided.iter().filter(|t| t.unified_after()).count();
    let first_unified = out.transcript.iter().position(|t| t.unified_after());
    rec.extra.insert("opposite_pass_rounds".into(), opposite as f64);
    rec.extra.insert("unify_eligible".into(), eligible.len() as f64);
    rec.extra.insert("unify_hits".into(), unified as f64);
    rec.extra.insert("one_sided_eligible".into(), one_sided.len() as f64);
    rec.extra.insert("one_sided_hits".into(), one_sided_unified as f64);
    rec.extra.insert(
        "first_unified_round".into(),
        first_unified.map_or(-1.0, |r| r as f64),
    );
    rec.extra.insert("dropped_votes".into(), out.dropped_votes as f64);
    Ok((rec, net.trace().map(|t| t.text())))
}

fn aeba_trial(sc: &Scenario, p: &ProtocolParams, mut rec: TrialRecord, seed: u64) -> TrialResult {
    let topo = build_topology(p, seed).map_err(|e| e.to_string())?;
    let inputs = make_inputs(sc.inputs, p.n, seed);
    let acfg = adversary_config(sc, p.n, seed);
    let mut adv = strategies::build(&acfg);
    let gcs_words = match sc.protocol {
        Protocol::Gcs => sc.gcs.words.unwrap_or(p.w * p.q),
        _ => 0,
    };
    let cfg = AebaConfig {
        gcs_words,
        record_transcripts: false,
        trace: sc.output.trace,
        show_metadata: sc.output.show_metadata,
    };
    let out = run_aeba(&topo, &inputs, adv.as_mut(), seed, &cfg).map_err(|e| e.to_string())?;
    let (bit, frac) = out.agreement();
    rec.agreement = frac;
    rec.agreed_bit = bit;
    rec.validity_violations = invalid_outputs(&inputs, &out.corrupted, &out.outputs);
    rec.valid = out.valid() && out.network.is_valid();
    rec.corrupted = out.network.corrupted_count();
    rec.absorb_metrics(out.metrics());
    let good: Vec<usize> = (0..p.n).filter(|&q| !out.corrupted[q]).collect();
    let undecided = good.iter().filter(|&&q| out.outputs[q].is_none()).count();
    rec.extra.insert("undecided".into(), undecided as f64);
    rec.extra.insert("secrecy_checks".into(), out.secrecy.checks as f64);
    rec.extra.insert("secrecy_exposures".into(), out.secrecy.exposures as f64);
    rec.extra.insert("secrecy_excused".into(), out.secrecy.excused as f64);
    rec.extra.insert("secrecy_violations".into(), out.secrecy.violations.len() as f64);
    rec.extra.insert("contestants".into(), out.contestants.len() as f64);
    rec.extra.insert("good_contestants".into(), out.good_contestants as f64);
    for l in &out.levels {
        rec.extra.insert(format!("level{}_good_winner_fraction", l.level), l.good_winner_fraction());
        rec.extra.insert(format!("level{}_split_elections", l.level), l.split_elections as f64);
    }
    rec.success = rec.valid && frac >= sc.success_threshold && out.secrecy.violations.is_empty();
    if let Some(g) = &out.gcs {
        let words = g.words.len();
        let good_words = g.good_words(sc.gcs.slack);
        let random = g.words.iter().filter(|w| w.random).count();
        let known = if words == 0 {
            0.0
        } else {
            g.words.iter().map(|w| w.known_fraction).sum::<f64>() / words as f64
        };
        rec.extra.insert("gcs_words".into(), words as f64);
        rec.extra.insert("gcs_good_words".into(), good_words as f64);
        rec.extra.insert("gcs_random_words".into(), random as f64);
        rec.extra.insert("gcs_mean_known_fraction".into(), known);
        rec.success = out.network.is_valid() && 2 * good_words > words;
    }
    Ok((rec, out.network.trace().map(|t| t.text())))
}

fn ae2e_trial(sc: &Scenario, p: &ProtocolParams, mut rec: TrialRecord, seed: u64) -> TrialResult {
    let n = p.n;
    let plan = Ae2ePlan::new(p);
    let mut acfg = adversary_config(sc, n, seed);
    acfg.label_range = plan.labels;
    acfg.request_cap = plan.cap;
    let mut adv = strategies::build(&acfg);
    let bad = acfg.set.clone().unwrap_or_default();
    let mut r = rng::stream(seed, &[tags::INPUTS]);
    let msg: Vec<bool> = (0..sc.ae2e.message_bits).map(|_| r.gen()).collect();
    let mut good: Vec<Pid> = (0..n).filter(|q| !bad.contains(q)).collect();
    good.shuffle(&mut r);
    let k = ((sc.ae2e.knowledgeable * n as f64).round() as usize).min(good.len());
    let mut knowledge = vec![None; n];
    for &q in &good[..k] {
        knowledge[q] = Some(msg.clone());
    }
    let mut state = Ae2eState::new(knowledge);
    let loops = sc.ae2e.loops.unwrap_or_else(|| p.ae2e_repetitions());
    let labels = ideal_labels(n, plan.labels, loops, seed);
    let mut net = with_output(Network::for_params(p), &sc.output);
    let reports = run_ae2e(&mut net, adv.as_mut(), &mut state, &labels, &plan, Some(&msg), seed);
    let corrupted = net.corrupted().to_vec();
    let good_now: Vec<Pid> = (0..n).filter(|&q| !corrupted[q]).collect();
    let right = good_now.iter().filter(|&&q| state.output(q) == Some(&msg)).count();
    let wrong: usize = reports.iter().map(|l| l.wrong).sum();
    rec.agreement = if good_now.is_empty() { 1.0 } else { right as f64 / good_now.len() as f64 };
    rec.agreed_bit = msg.first().copied();
    rec.validity_violations = wrong as u64;
    rec.valid = wrong == 0 && net.is_valid();
    rec.success = rec.valid && right == good_now.len();
    rec.corrupted = net.corrupted_count();
    rec.absorb_metrics(&net.metrics);
    let loop_of_last = reports.iter().rposition(|l| l.decided > 0).map_or(-1.0, |x| x as f64);
    rec.extra.insert("loops".into(), reports.len() as f64);
    rec.extra.insert("knowledgeable".into(), k as f64);
    rec.extra.insert("wrong_decisions".into(), wrong as f64);
    rec.extra.insert(
        "overloaded".into(),
        reports.iter().map(|l| l.overloaded).sum::<usize>() as f64,
    );
    rec.extra.insert(
        "decided".into(),
        reports.iter().map(|l| l.decided).sum::<usize>() as f64,
    );
    rec.extra.insert("last_deciding_loop".into(), loop_of_last);
    Ok((rec, net.trace().map(|t| t.text())))
}

fn everywhere_trial(sc: &Scenario, p: &ProtocolParams, mut rec: TrialRecord, seed: u64) -> TrialResult {
    let topo = build_topology(p, seed).map_err(|e| e.to_string())?;
    let inputs = make_inputs(sc.inputs, p.n, seed);
    let acfg = adversary_config(sc, p.n, seed);
    let plan = Ae2ePlan::new(p);
    let acfg = AdversaryConfig {
        label_range: plan.labels,
        request_cap: plan.cap,
        ..acfg
    };
    let mut adv = strategies::build(&acfg);
    let cfg = AebaConfig {
        gcs_words: 0,
        record_transcripts: false,
        trace: sc.output.trace,
        show_metadata: sc.output.show_metadata,
    };
    let out = run_everywhere_ba(&topo, &inputs, adv.as_mut(), seed, &cfg).map_err(|e| e.to_string())?;
    let agreed = out.agreement();
    rec.agreed_bit = agreed.or(out.ae_bit);
    rec.agreement = rec.agreed_bit.map_or(0.0, |b| out.fraction(b));
    rec.validity_violations = invalid_outputs(&inputs, &out.corrupted, &out.outputs);
    rec.valid = out.valid() && out.valid_network;
    rec.success = rec.valid;
    rec.corrupted = out.corrupted.iter().filter(|&&c| c).count();
    rec.absorb_metrics(&out.metrics);
    let good_words = out.gcs.good_words(sc.gcs.slack);
    rec.extra.insert("ae_fraction".into(), out.ae_fraction);
    rec.extra.insert("gcs_good_words".into(), good_words as f64);
    rec.extra.insert("gcs_words".into(), out.gcs.words.len() as f64);
    rec.extra.insert(
        "wrong_decisions".into(),
        out.loops.iter().map(|l| l.wrong).sum::<usize>() as f64,
    );
    let undecided = (0..p.n).filter(|&q| !out.corrupted[q] && out.outputs[q].is_none()).count();
    rec.extra.insert("undecided".into(), undecided as f64);
    Ok((rec, out.trace.map(|t| t.text())))
}

/// Honest bit counts recomputed from one trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceTotals {
    pub lines: usize,
    pub honest_bits: BTreeMap<Pid, u64>,
    pub phase_bits: BTreeMap<String, u64>,
}

impl TraceTotals {
    pub fn max(&self) -> u64 {
        self.honest_bits.values().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.honest_bits.values().sum()
    }
}

/// Trace kinds that are not honest messages: adversarial traffic and events.
const EVENT_KINDS: [&str; 4] = ["adv", "corrupt", "election", "note"];

/// Parses `round phase kind sender recipient bits` lines, counting honest
/// messages only.
pub fn trace_totals(text: &str) -> Result<TraceTotals, String> {
    let mut t = TraceTotals::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("line {}: expected 6 fields, got {}", i + 1, f.len()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| format!("line {}: bad number `{s}`", i + 1));
        num(f[0])?;
        t.lines += 1;
        if EVENT_KINDS.contains(&f[2]) {
            continue;
        }
        let from = num(f[3])? as Pid;
        num(f[4])?;
        let bits = num(f[5])?;
        *t.honest_bits.entry(from).or_insert(0) += bits;
        *t.phase_bits.entry(f[1].to_string()).or_insert(0) += bits;
    }
    Ok(t)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifySummary {
    pub trials_checked: usize,
    pub lines: usize,
    pub mismatches: Vec<String>,
}

impl VerifySummary {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes every per-trial bit count and the scaling table of the
/// report in `dir` from its trace files.
pub fn verify_traces(dir: &Path) -> Result<VerifySummary, HarnessError> {
    let report = Report::read(dir)?;
    let mut sum = VerifySummary::default();
    let mut maxima: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for t in &report.trials {
        let Some(rel) = &t.trace_file else {
            continue;
        };
        let path = dir.join(rel);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let tot = trace_totals(&text).map_err(|msg| HarnessError::Report { path: path.clone(), msg })?;
        sum.trials_checked += 1;
        sum.lines += tot.lines;
        let tag = format!("trial {} (n = {})", t.trial, t.n);
        let mean = tot.total() as f64 / t.n as f64;
        if tot.max() != t.max_honest_bits {
            sum.mismatches
                .push(format!("{tag}: max bits {} in trace, {} in report", tot.max(), t.max_honest_bits));
        }
        if tot.total() != t.total_honest_bits {
            sum.mismatches
                .push(format!("{tag}: total bits {} in trace, {} in report", tot.total(), t.total_honest_bits));
        }
        if (mean - t.mean_honest_bits).abs() > 1e-9 * mean.max(1.0) {
            sum.mismatches
                .push(format!("{tag}: mean bits {mean} in trace, {} in report", t.mean_honest_bits));
        }
        if tot.phase_bits != t.phase_bits {
            sum.mismatches.push(format!("{tag}: per-phase bits differ"));
        }
        maxima.entry(t.n).or_default().push(tot.max());
    }
    for row in &report.scaling {
        let Some(ms) = maxima.get(&row.n) else {
            continue;
        };
        if ms.len() != row.trials {
            continue;
        }
        let mean = ms.iter().sum::<u64>() as f64 / ms.len() as f64;
        let max = ms.iter().copied().max().unwrap_or(0);
        if (mean - row.mean_max_honest_bits).abs() > 1e-9 * mean.max(1.0) || max != row.max_max_honest_bits {
            sum.mismatches.push(format!("scaling row n = {}: max-bits column differs", row.n));
        }
    }
    Ok(sum)
}
