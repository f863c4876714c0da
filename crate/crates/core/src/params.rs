//! Validated protocol parameters.
//!
//! One immutable record carries every tunable of the stack: tree shape,
//! election sizes, link degrees, the share field and the adversary slack.
//! [`desk_params`] builds runnable desk-scale records; [`derive_paper_params`]
//! evaluates the asymptotic formulas for documentation and sanity printing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("invariant `{equation}` violated: {detail}")]
    Invariant {
        equation: &'static str,
        detail: String,
    },
    #[error("tree too shallow: ell_star = {ell_star} < 2 (q = {q}, k1 = {k1}, n = {n})")]
    TreeTooShallow {
        n: u128,
        q: u128,
        k1: u128,
        ell_star: u32,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown parameter key `{0}`")]
    UnknownKey(String),
    #[error("asymptotic shape with n = {} does not fit in a machine word", .0.n)]
    Unrepresentable(Box<PaperShape>),
}

fn violated(equation: &'static str, detail: impl Into<String>) -> ParamsError {
    ParamsError::Invariant {
        equation,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub n: usize,
    pub epsilon: f64,
    pub q: usize,
    pub k1: usize,
    pub ell_star: usize,
    pub w: usize,
    pub r: usize,
    pub num_bins: usize,
    pub c: f64,
    pub uplink_degree: usize,
    pub elllink_degree: usize,
    /// Requested intra-node degree; a node of size k uses `min(intra_degree, k - 1)`.
    pub intra_degree: usize,
    pub membership_factor: usize,
    pub field_modulus: u32,
    pub word_bits: u32,
    pub seed: u64,
    /// Sharing threshold as a fraction of the number of parties.
    pub threshold_fraction: f64,
    pub epsilon0: f64,
    /// Request multiplier: each processor sends `a * log2 n` requests per label.
    pub ae2e_a: f64,
    pub overload_factor: f64,
    pub sampler_constant: f64,
    pub paper_mode: bool,
}

/// Partial record used by [`desk_params`] and the config loader.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamOverrides {
    pub epsilon: Option<f64>,
    pub q: Option<usize>,
    pub k1: Option<usize>,
    pub ell_star: Option<usize>,
    pub w: Option<usize>,
    pub r: Option<usize>,
    pub num_bins: Option<usize>,
    pub c: Option<f64>,
    pub uplink_degree: Option<usize>,
    pub elllink_degree: Option<usize>,
    pub intra_degree: Option<usize>,
    pub membership_factor: Option<usize>,
    pub field_modulus: Option<u32>,
    pub word_bits: Option<u32>,
    pub seed: Option<u64>,
    pub threshold_fraction: Option<f64>,
    pub epsilon0: Option<f64>,
    pub ae2e_a: Option<f64>,
    pub overload_factor: Option<f64>,
    pub sampler_constant: Option<f64>,
    pub paper_mode: Option<bool>,
}

impl From<&ProtocolParams> for ParamOverrides {
    fn from(p: &ProtocolParams) -> Self {
        ParamOverrides {
            epsilon: Some(p.epsilon),
            q: Some(p.q),
            k1: Some(p.k1),
            ell_star: Some(p.ell_star),
            w: Some(p.w),
            r: Some(p.r),
            num_bins: Some(p.num_bins),
            c: Some(p.c),
            uplink_degree: Some(p.uplink_degree),
            elllink_degree: Some(p.elllink_degree),
            intra_degree: Some(p.intra_degree),
            membership_factor: Some(p.membership_factor),
            field_modulus: Some(p.field_modulus),
            word_bits: Some(p.word_bits),
            seed: Some(p.seed),
            threshold_fraction: Some(p.threshold_fraction),
            epsilon0: Some(p.epsilon0),
            ae2e_a: Some(p.ae2e_a),
            overload_factor: Some(p.overload_factor),
            sampler_constant: Some(p.sampler_constant),
            paper_mode: Some(p.paper_mode),
        }
    }
}

/// Default intra-node degree: large enough that every node is a complete graph.
pub const COMPLETE_INTRA: usize = 1 << 20;

pub fn is_prime(x: u64) -> bool {
    if x < 2 {
        return false;
    }
    if x.is_multiple_of(2) {
        return x == 2;
    }
    let mut d = 3;
    while d * d <= x {
        if x.is_multiple_of(d) {
            return false;
        }
        d += 2;
    }
    true
}

/// Smallest prime strictly greater than `2^bits`.
pub fn prime_above_pow2(bits: u32) -> u32 {
    let mut x = (1u64 << bits) + 1;
    while !is_prime(x) {
        x += 1;
    }
    x as u32
}

fn ceil_log2(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        usize::BITS - (x - 1).leading_zeros()
    }
}

fn int_pow(base: usize, exp: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base)?;
    }
    Some(acc)
}

/// Finds `ell` with `k1 * q^ell == n`, if any.
fn exact_height(n: usize, k1: usize, q: usize) -> Option<usize> {
    if k1 == 0 || q < 2 || !n.is_multiple_of(k1) {
        return None;
    }
    let mut rest = n / k1;
    let mut ell = 0;
    while rest > 1 {
        if !rest.is_multiple_of(q) {
            return None;
        }
        rest /= q;
        ell += 1;
    }
    Some(ell)
}

/// Smallest height with `k1 * q^ell >= n`, and the adjusted processor count.
pub fn adjust_n(n: u128, k1: u128, q: u128) -> (u32, u128) {
    let mut size = k1;
    let mut ell = 0u32;
    while size < n {
        size = size.saturating_mul(q);
        ell += 1;
    }
    (ell, size)
}

impl ProtocolParams {
    pub fn root_level(&self) -> usize {
        self.ell_star + 1
    }

    /// Processors per node at `level` (1 = leaves).
    pub fn node_size(&self, level: usize) -> usize {
        self.k1 * self.q.pow((level - 1) as u32)
    }

    pub fn node_count(&self, level: usize) -> usize {
        if level >= self.root_level() {
            1
        } else {
            self.membership_factor * self.n / self.node_size(level)
        }
    }

    pub fn arrays_per_leaf(&self) -> usize {
        self.n / self.node_count(1)
    }

    /// Number of children of a node at `level`.
    pub fn fan_in(&self, level: usize) -> usize {
        if level >= self.root_level() {
            self.node_count(level - 1)
        } else {
            self.q
        }
    }

    /// Candidate arrays arriving at a node of `level`.
    pub fn candidates_at(&self, level: usize) -> usize {
        if level <= 1 {
            return self.arrays_per_leaf();
        }
        self.fan_in(level) * self.forwarded_from(level - 1)
    }

    /// Arrays a node of `level` sends to its parent.
    pub fn forwarded_from(&self, level: usize) -> usize {
        if level <= 1 {
            self.arrays_per_leaf()
        } else {
            self.candidates_at(level).min(self.w)
        }
    }

    pub fn elects_at(&self, level: usize) -> bool {
        level >= 2 && level < self.root_level() && self.candidates_at(level) > self.w
    }

    pub fn num_bins_at(&self, level: usize) -> usize {
        self.candidates_at(level) / self.w
    }

    /// Bits per bin/coin word of the block consumed at `level`.
    pub fn word_width_at(&self, level: usize) -> u32 {
        ceil_log2(self.num_bins_at(level)).max(1)
    }

    /// Number of root contestants (the root agreement has this many rounds).
    pub fn root_contestants(&self) -> usize {
        self.candidates_at(self.root_level())
    }

    pub fn corruption_budget(&self) -> usize {
        ((1.0 / 3.0 - self.epsilon) * self.n as f64 + 1e-9).floor() as usize
    }

    pub fn good_node_threshold(&self) -> f64 {
        2.0 / 3.0 + self.epsilon / 2.0
    }

    /// Reconstruction threshold `t` for a sharing among `parties` holders.
    pub fn sharing_threshold(&self, parties: usize) -> usize {
        let t = (parties as f64 * self.threshold_fraction + 1e-9).floor() as usize;
        t.clamp(1, parties.saturating_sub(1).max(1))
    }

    pub fn field_bits(&self) -> u32 {
        32 - (self.field_modulus - 1).leading_zeros()
    }

    /// Range of AE2E labels and global-coin words: `[0, ceil(sqrt n))`.
    pub fn label_range(&self) -> usize {
        (self.n as f64).sqrt().ceil() as usize
    }

    pub fn label_bits(&self) -> u32 {
        ceil_log2(self.label_range()).max(1)
    }

    pub fn log2_n(&self) -> f64 {
        (self.n as f64).log2()
    }

    /// `a log n`, floored at 5 and capped at `n - 1`.
    pub fn requests_per_label(&self) -> usize {
        let raw = (self.ae2e_a * self.log2_n()).round() as usize;
        raw.clamp(5, self.n.saturating_sub(1).max(5))
    }

    pub fn overload_threshold(&self) -> usize {
        (self.overload_factor * (self.n as f64).sqrt() * self.log2_n()).ceil() as usize
    }

    pub fn ae2e_repetitions(&self) -> usize {
        (3.0 * (self.n as f64).ln()).ceil() as usize
    }

    pub fn commit_threshold(&self) -> f64 {
        (1.0 - self.epsilon0) * (2.0 / 3.0 + self.epsilon / 2.0)
    }

    pub fn intra_degree_for(&self, size: usize) -> usize {
        self.intra_degree.min(size.saturating_sub(1))
    }

    /// Checks every invariant; the error names the failing equation.
    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0 / 3.0) {
            return Err(violated(
                "epsilon in (0, 1/3)",
                format!("epsilon = {}", self.epsilon),
            ));
        }
        if self.q < 2 || self.k1 < 2 || self.ell_star < 1 {
            return Err(violated(
                "q >= 2, k1 >= 2, ell_star >= 1",
                format!("q = {}, k1 = {}, ell_star = {}", self.q, self.k1, self.ell_star),
            ));
        }
        match self.k1.checked_mul(int_pow(self.q, self.ell_star).unwrap_or(usize::MAX)) {
            Some(total) if total == self.n => {}
            _ => {
                return Err(violated(
                    "n = k1·q^ℓ*",
                    format!(
                        "n = {}, k1 = {}, q = {}, ell_star = {}",
                        self.n, self.k1, self.q, self.ell_star
                    ),
                ))
            }
        }
        if self.num_bins < 2 {
            return Err(violated("num_bins >= 2", format!("num_bins = {}", self.num_bins)));
        }
        if self.w == 0 || self.r != self.q * self.w {
            return Err(violated(
                "r = q·w",
                format!("r = {}, q = {}, w = {}", self.r, self.q, self.w),
            ));
        }
        if self.w * self.num_bins != self.r {
            return Err(violated(
                "w·num_bins = r",
                format!("w = {}, num_bins = {}, r = {}", self.w, self.num_bins, self.r),
            ));
        }
        if !is_prime(self.field_modulus as u64) {
            return Err(violated(
                "field_modulus prime",
                format!("field_modulus = {}", self.field_modulus),
            ));
        }
        if self.word_bits >= 31 || (self.field_modulus as u64) <= (1u64 << self.word_bits) {
            return Err(violated(
                "field_modulus > 2^word_bits",
                format!(
                    "field_modulus = {}, word_bits = {}",
                    self.field_modulus, self.word_bits
                ),
            ));
        }
        if self.membership_factor == 0 || !self.k1.is_multiple_of(self.membership_factor) {
            return Err(violated(
                "membership_factor divides k1",
                format!("membership_factor = {}, k1 = {}", self.membership_factor, self.k1),
            ));
        }
        if self.uplink_degree == 0 || self.elllink_degree == 0 || self.intra_degree < 2 {
            return Err(violated(
                "uplink_degree >= 1, elllink_degree >= 1, intra_degree >= 2",
                format!(
                    "uplink = {}, elllink = {}, intra = {}",
                    self.uplink_degree, self.elllink_degree, self.intra_degree
                ),
            ));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(violated(
                "threshold_fraction in (0, 1)",
                format!("threshold_fraction = {}", self.threshold_fraction),
            ));
        }
        if !(self.epsilon0 > 0.0 && self.epsilon0 < self.epsilon / 4.0) {
            return Err(violated(
                "0 < epsilon0 < epsilon/4",
                format!("epsilon0 = {}, epsilon = {}", self.epsilon0, self.epsilon),
            ));
        }
        if self.c <= 0.0 || self.ae2e_a <= 0.0 || self.overload_factor <= 0.0 || self.sampler_constant <= 0.0
        {
            return Err(violated(
                "c, ae2e_a, overload_factor, sampler_constant > 0",
                format!(
                    "c = {}, ae2e_a = {}, overload_factor = {}, sampler_constant = {}",
                    self.c, self.ae2e_a, self.overload_factor, self.sampler_constant
                ),
            ));
        }
        if self.paper_mode {
            // Asymptotic records are never simulated; only the shape is checked.
            return Ok(());
        }
        for level in 2..self.root_level() {
            if self.elects_at(level) {
                let cands = self.candidates_at(level);
                if !cands.is_multiple_of(self.w) || cands / self.w < 2 {
                    return Err(violated(
                        "candidates(level) = num_bins(level)·w",
                        format!("level {level}: {cands} candidates, w = {}", self.w),
                    ));
                }
            }
            let size = self.node_size(level);
            if (size * self.intra_degree_for(size)) % 2 == 1 {
                return Err(violated(
                    "node_size·intra_degree even",
                    format!("level {level}: size {size}, degree {}", self.intra_degree_for(size)),
                ));
            }
        }
        let widest = (2..self.root_level())
            .filter(|&l| self.elects_at(l))
            .map(|l| self.word_width_at(l))
            .chain([self.label_bits(), 2])
            .max()
            .unwrap_or(2);
        if widest > self.word_bits {
            return Err(violated(
                "word width <= word_bits",
                format!("widest word needs {widest} bits, word_bits = {}", self.word_bits),
            ));
        }
        Ok(())
    }

    /// Flat `key = value` rendering; keys match field names.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("q", self.q.to_string()),
            ("k1", self.k1.to_string()),
            ("ell_star", self.ell_star.to_string()),
            ("w", self.w.to_string()),
            ("r", self.r.to_string()),
            ("num_bins", self.num_bins.to_string()),
            ("c", self.c.to_string()),
            ("uplink_degree", self.uplink_degree.to_string()),
            ("elllink_degree", self.elllink_degree.to_string()),
            ("intra_degree", self.intra_degree.to_string()),
            ("membership_factor", self.membership_factor.to_string()),
            ("field_modulus", self.field_modulus.to_string()),
            ("word_bits", self.word_bits.to_string()),
            ("seed", self.seed.to_string()),
            ("threshold_fraction", self.threshold_fraction.to_string()),
            ("epsilon0", self.epsilon0.to_string()),
            ("ae2e_a", self.ae2e_a.to_string()),
            ("overload_factor", self.overload_factor.to_string()),
            ("sampler_constant", self.sampler_constant.to_string()),
            ("paper_mode", self.paper_mode.to_string()),
        ]
    }

    /// Parses a flat config. `n` is required; everything else overrides desk defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ParamsError> {
        let mut n = None;
        let mut ov = ParamOverrides::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ParamsError::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "n" {
                n = Some(parse_field::<usize>(line_no, key, value)?);
            } else {
                ov.set(line_no, key, value)?;
            }
        }
        let n = n.ok_or(ParamsError::Parse {
            line: 0,
            msg: "missing required key `n`".into(),
        })?;
        desk_params(n, &ov)
    }
}

fn parse_field<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ParamsError> {
    value.parse::<T>().map_err(|_| ParamsError::Parse {
        line,
        msg: format!("field `{key}`: cannot parse `{value}`"),
    })
}

impl ParamOverrides {
    /// Sets one field from its textual form.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ParamsError> {
        match key {
            "epsilon" => self.epsilon = Some(parse_field(line, key, value)?),
            "q" => self.q = Some(parse_field(line, key, value)?),
            "k1" => self.k1 = Some(parse_field(line, key, value)?),
            "ell_star" => self.ell_star = Some(parse_field(line, key, value)?),
            "w" => self.w = Some(parse_field(line, key, value)?),
            "r" => self.r = Some(parse_field(line, key, value)?),
            "num_bins" => self.num_bins = Some(parse_field(line, key, value)?),
            "c" => self.c = Some(parse_field(line, key, value)?),
            "uplink_degree" => self.uplink_degree = Some(parse_field(line, key, value)?),
            "elllink_degree" => self.elllink_degree = Some(parse_field(line, key, value)?),
            "intra_degree" => self.intra_degree = Some(parse_field(line, key, value)?),
            "membership_factor" => self.membership_factor = Some(parse_field(line, key, value)?),
            "field_modulus" => self.field_modulus = Some(parse_field(line, key, value)?),
            "word_bits" => self.word_bits = Some(parse_field(line, key, value)?),
            "seed" => self.seed = Some(parse_field(line, key, value)?),
            "threshold_fraction" => self.threshold_fraction = Some(parse_field(line, key, value)?),
            "epsilon0" => self.epsilon0 = Some(parse_field(line, key, value)?),
            "ae2e_a" => self.ae2e_a = Some(parse_field(line, key, value)?),
            "overload_factor" => self.overload_factor = Some(parse_field(line, key, value)?),
            "sampler_constant" => self.sampler_constant = Some(parse_field(line, key, value)?),
            "paper_mode" => self.paper_mode = Some(parse_field(line, key, value)?),
            other => return Err(ParamsError::UnknownKey(other.to_string())),
        }
        Ok(())
    }
}

impl fmt::Display for ProtocolParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}

/// Picks the default leaf size for `n` under arity `q`.
fn default_k1(n: usize, q: usize) -> Option<usize> {
    let prefer = [4usize, 8, 16, 2, 32, 64, 3, 6, 12];
    prefer
        .iter()
        .copied()
        .filter_map(|k1| exact_height(n, k1, q).map(|h| (k1, h)))
        .find(|&(_, h)| h >= 2)
        .or_else(|| {
            prefer
                .iter()
                .copied()
                .filter_map(|k1| exact_height(n, k1, q).map(|h| (k1, h)))
                .find(|&(_, h)| h >= 1)
        })
        .map(|(k1, _)| k1)
}

/// Builds a validated desk-scale record for `n` processors.
pub fn desk_params(n: usize, ov: &ParamOverrides) -> Result<ProtocolParams, ParamsError> {
    let q = ov.q.unwrap_or(4);
    let k1 = match ov.k1 {
        Some(k1) => k1,
        None => default_k1(n, q).ok_or_else(|| {
            violated("n = k1·q^ℓ*", format!("no default k1 for n = {n}, q = {q}"))
        })?,
    };
    let ell_star = match exact_height(n, k1, q) {
        Some(h) => h,
        None => {
            return Err(violated(
                "n = k1·q^ℓ*",
                format!("n = {n} is not k1·q^ℓ* for k1 = {k1}, q = {q}"),
            ))
        }
    };
    if let Some(given) = ov.ell_star {
        if given != ell_star {
            return Err(violated(
                "n = k1·q^ℓ*",
                format!("ell_star = {given} but n = {n}, k1 = {k1}, q = {q} give {ell_star}"),
            ));
        }
    }
    let w = ov.w.unwrap_or(4);
    let r = ov.r.unwrap_or(q * w);
    let num_bins = ov.num_bins.unwrap_or(if w > 0 { r / w } else { 0 });
    let epsilon = ov.epsilon.unwrap_or(0.05);
    let word_bits = ov.word_bits.unwrap_or(8);
    let field_modulus = ov.field_modulus.unwrap_or_else(|| prime_above_pow2(word_bits.min(30)));
    let p = ProtocolParams {
        n,
        epsilon,
        q,
        k1,
        ell_star,
        w,
        r,
        num_bins,
        c: ov.c.unwrap_or(1.0),
        uplink_degree: ov.uplink_degree.unwrap_or(5),
        elllink_degree: ov.elllink_degree.unwrap_or(4),
        intra_degree: ov.intra_degree.unwrap_or(COMPLETE_INTRA),
        membership_factor: ov.membership_factor.unwrap_or(1),
        field_modulus,
        word_bits,
        seed: ov.seed.unwrap_or(0),
        threshold_fraction: ov.threshold_fraction.unwrap_or(0.4),
        epsilon0: ov.epsilon0.unwrap_or(epsilon / 5.0),
        ae2e_a: ov.ae2e_a.unwrap_or(10.0),
        overload_factor: ov.overload_factor.unwrap_or(1.0),
        sampler_constant: ov.sampler_constant.unwrap_or(1.0),
        paper_mode: ov.paper_mode.unwrap_or(false),
    };
    p.validate()?;
    Ok(p)
}

/// The asymptotic tree shape in wide integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperShape {
    pub n_requested: u128,
    pub n: u128,
    pub k1: u128,
    pub q: u128,
    pub ell_star: u32,
    pub w: u128,
    pub r: u128,
    pub num_bins: u128,
}

impl PaperShape {
    /// The same shape equations [`ProtocolParams::validate`] enforces.
    pub fn check(&self) -> Result<(), ParamsError> {
        let total = (0..self.ell_star).try_fold(self.k1, |acc, _| acc.checked_mul(self.q));
        if total != Some(self.n) {
            return Err(violated("n = k1·q^ℓ*", format!("{self:?}")));
        }
        if self.r != self.q * self.w {
            return Err(violated("r = q·w", format!("{self:?}")));
        }
        if self.w * self.num_bins != self.r || self.num_bins < 2 {
            return Err(violated("w·num_bins = r", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Evaluates the asymptotic formulas (log base 2 throughout):
/// `k1 = log³n`, `w = 5c·log³n`, `q = (log n)^delta`, `ℓ* = ceil(log_q(n/k1))`,
/// with `n` raised to `k1·q^ℓ*`.
pub fn paper_shape(n: u128, c: f64, delta: f64) -> Result<PaperShape, ParamsError> {
    if n < 16 {
        return Err(violated("n >= 16", format!("n = {n}")));
    }
    if delta <= 4.0 {
        return Err(violated("delta > 4", format!("delta = {delta}")));
    }
    let log_n = (n as f64).log2();
    let k1 = (log_n.powi(3)).round().max(2.0) as u128;
    let q = (log_n.powf(delta)).round().max(2.0) as u128;
    let w = (5.0 * c * log_n.powi(3)).round().max(1.0) as u128;
    let (ell_star, adjusted) = adjust_n(n, k1, q);
    if ell_star < 2 {
        return Err(ParamsError::TreeTooShallow {
            n,
            q,
            k1,
            ell_star,
        });
    }
    let shape = PaperShape {
        n_requested: n,
        n: adjusted,
        k1,
        q,
        ell_star,
        w,
        r: q * w,
        num_bins: q,
    };
    shape.check()?;
    Ok(shape)
}

/// Asymptotic-formula record for `n` processors.
///
/// Rejects shallow trees, and shapes whose adjusted processor count does not
/// fit in a machine word (every deep enough shape at 64-bit `n`).
pub fn derive_paper_params(
    n: u64,
    epsilon: f64,
    c: f64,
    delta: f64,
) -> Result<ProtocolParams, ParamsError> {
    if !(epsilon > 0.0 && epsilon < 1.0 / 3.0) {
        return Err(violated("epsilon in (0, 1/3)", format!("epsilon = {epsilon}")));
    }
    let shape = paper_shape(n as u128, c, delta)?;
    let fit = |v: u128| usize::try_from(v).map_err(|_| ParamsError::Unrepresentable(Box::new(shape.clone())));
    let n_adj = fit(shape.n)?;
    let q = fit(shape.q)?;
    let k1 = fit(shape.k1)?;
    let w = fit(shape.w)?;
    let log_n = (n as f64).log2();
    let label_bits = ceil_log2((n_adj as f64).sqrt().ceil() as usize);
    let word_bits = label_bits.max(ceil_log2(q)).clamp(2, 30);
    let p = ProtocolParams {
        n: n_adj,
        epsilon,
        q,
        k1,
        ell_star: shape.ell_star as usize,
        w,
        r: q * w,
        num_bins: q,
        c,
        uplink_degree: ((q as f64) * log_n.powi(3)).round().max(1.0) as usize,
        elllink_degree: (log_n.powi(3)).round().max(1.0) as usize,
        intra_degree: (log_n.ceil() as usize * 8).max(2),
        membership_factor: 1,
        field_modulus: prime_above_pow2(word_bits),
        word_bits,
        seed: 0,
        threshold_fraction: 0.5,
        epsilon0: epsilon / 5.0,
        ae2e_a: 32.0 * c / (epsilon * epsilon),
        overload_factor: 1.0,
        sampler_constant: 1.0,
        paper_mode: true,
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ov() -> ParamOverrides {
        ParamOverrides::default()
    }

    #[test]
    fn n16_q2_k4_gives_height_two() {
        let p = desk_params(
            16,
            &ParamOverrides {
                q: Some(2),
                k1: Some(4),
                w: Some(2),
                ..ov()
            },
        )
        .unwrap();
        assert_eq!(p.ell_star, 2);
        assert_eq!(p.node_size(2), 8);
        assert_eq!(p.node_size(p.root_level()), 16);
    }

    #[test]
    fn n512_steady_state_candidates() {
        let p = desk_params(
            512,
            &ParamOverrides {
                q: Some(4),
                k1: Some(8),
                w: Some(4),
                ..ov()
            },
        )
        .unwrap();
        assert_eq!(p.ell_star, 3);
        assert_eq!(p.r, 16);
        assert_eq!(p.num_bins, 4);
        assert_eq!(p.candidates_at(3), 16);
        assert_eq!(p.candidates_at(2), 32);
        assert_eq!(p.num_bins_at(2), 8);
        assert_eq!(p.root_contestants(), 16);
    }

    #[test]
    fn n512_with_two_bins_is_rejected() {
        let err = desk_params(
            512,
            &ParamOverrides {
                q: Some(4),
                k1: Some(8),
                w: Some(4),
                num_bins: Some(2),
                ..ov()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("w·num_bins = r"), "{err}");
    }

    #[test]
    fn k1_seven_rejected_naming_equation() {
        let err = desk_params(
            512,
            &ParamOverrides {
                k1: Some(7),
                ..ov()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("n = k1·q^ℓ*"), "{err}");
    }

    #[test]
    fn adjust_forces_height_two() {
        assert_eq!(adjust_n(13, 4, 2), (2, 16));
        assert_eq!(adjust_n(16, 4, 2), (2, 16));
    }

    #[test]
    fn paper_formulas_at_2_pow_20() {
        // log n = 20: k1 = 8000, q = 20^5 = 3_200_000, n/k1 = 131.072 < q,
        // so the tree has a single level above the leaves and is rejected.
        match derive_paper_params(1 << 20, 0.1, 1.0, 5.0) {
            Err(ParamsError::TreeTooShallow { q, k1, ell_star, .. }) => {
                assert_eq!(k1, 8000);
                assert_eq!(q, 3_200_000);
                let hand = ((1u64 << 20) as f64 / 8000.0).ln() / (3_200_000f64).ln();
                assert_eq!(ell_star as f64, hand.ceil());
                assert_eq!(ell_star, 1);
            }
            other => panic!("expected shallow-tree rejection, got {other:?}"),
        }
    }

    #[test]
    fn paper_shape_at_large_n() {
        for bits in [61u32, 80, 100] {
            let shape = paper_shape(1u128 << bits, 1.0, 4.5).unwrap();
            assert!(shape.ell_star >= 2);
            shape.check().unwrap();
            assert!(shape.n >= shape.n_requested);
        }
        assert!(matches!(
            derive_paper_params(1 << 62, 0.1, 1.0, 4.5),
            Err(ParamsError::Unrepresentable(_))
        ));
    }

    #[test]
    fn delta_must_exceed_four() {
        assert!(derive_paper_params(1 << 40, 0.1, 1.0, 4.0).is_err());
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let p = desk_params(256, &ov()).unwrap();
        let back = ProtocolParams::from_kv_str(&p.to_kv()).unwrap();
        assert_eq!(back, p);
        let err = ProtocolParams::from_kv_str("n = 256\nq = four\n").unwrap_err();
        assert_eq!(
            err,
            ParamsError::Parse {
                line: 2,
                msg: "field `q`: cannot parse `four`".into()
            }
        );
        assert!(matches!(
            ProtocolParams::from_kv_str("n = 256\nbogus = 1\n"),
            Err(ParamsError::UnknownKey(_))
        ));
    }

    #[test]
    fn budget_and_thresholds() {
        let p = desk_params(512, &ov()).unwrap();
        assert_eq!(p.corruption_budget(), 145);
        assert!((p.good_node_threshold() - (2.0 / 3.0 + 0.025)).abs() < 1e-12);
        assert_eq!(p.sharing_threshold(8), 3);
        assert_eq!(p.sharing_threshold(2), 1);
        assert_eq!(p.sharing_threshold(5), 2);
        assert_eq!(p.sharing_threshold(12), 4);
    }

    fn arb_params() -> impl Strategy<Value = ProtocolParams> {
        (
            prop::sample::select(vec![2usize, 3, 4]),
            prop::sample::select(vec![2usize, 4, 8]),
            1usize..4,
            prop::sample::select(vec![1usize, 2]),
            0.01f64..0.3,
        )
            .prop_filter_map("valid", |(q, k1, ell, w, eps)| {
                let n = k1 * q.pow(ell as u32);
                desk_params(
                    n,
                    &ParamOverrides {
                        q: Some(q),
                        k1: Some(k1),
                        w: Some(w),
                        epsilon: Some(eps),
                        ..ParamOverrides::default()
                    },
                )
                .ok()
            })
    }

    proptest! {
        #[test]
        fn desk_round_trip(p in arb_params()) {
            prop_assert_eq!(desk_params(p.n, &ParamOverrides::from(&p)).unwrap(), p.clone());
            prop_assert_eq!(p.w * p.num_bins, p.r);
        }
    }
}
