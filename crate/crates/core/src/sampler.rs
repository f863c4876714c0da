//! Averaging samplers.
//!
//! A sampler maps each input `x ∈ [r]` to a multiset `H(x)` of `d` points in
//! `[s]`. It is a `(θ, δ)` sampler when, for every `S ⊆ [s]`, at most a `δ`
//! fraction of inputs see `|H(x) ∩ S| / d > |S| / s + θ`. Intersections count
//! multiplicity.

use std::fmt::Write as _;

use rand::Rng as _;
use thiserror::Error;

use crate::rng;

/// Largest output universe [`Sampler::verify_exhaustive`] will enumerate.
pub const EXHAUSTIVE_LIMIT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(
        "infeasible sampler: 2·log2(e)·d·θ²·δ = {lhs:.4} must exceed s/r + 1 − δ = {rhs:.4}"
    )]
    Infeasible { lhs: f64, rhs: f64 },
    #[error("s = {0} is too large to enumerate all subsets; use verify_statistical")]
    TooLarge(usize),
    #[error("invalid sampler shape: {0}")]
    Shape(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    /// A subset on which more than a `δ` fraction of inputs are bad.
    Fail { witness: Vec<usize>, bad_fraction: f64 },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub r_size: usize,
    pub s_size: usize,
    pub d: usize,
    pub theta: f64,
    pub delta: f64,
    assignment: Vec<Vec<usize>>,
    verified: bool,
}

/// Left and right side of the existence inequality.
pub fn feasibility(r: usize, s: usize, d: usize, theta: f64, delta: f64) -> (f64, f64) {
    let lhs = 2.0 * std::f64::consts::LOG2_E * d as f64 * theta * theta * delta;
    let rhs = s as f64 / r as f64 + 1.0 - delta;
    (lhs, rhs)
}

pub fn is_feasible(r: usize, s: usize, d: usize, theta: f64, delta: f64) -> bool {
    let (lhs, rhs) = feasibility(r, s, d, theta, delta);
    lhs > rhs
}

/// Draws every image point independently and uniformly from `[s]`.
///
/// Infeasible parameters are rejected unless `waive` is set.
pub fn build_random_sampler(
    r_size: usize,
    s_size: usize,
    d: usize,
    theta: f64,
    delta: f64,
    seed: u64,
    waive: bool,
) -> Result<Sampler, SamplerError> {
    if r_size == 0 || s_size == 0 || d == 0 {
        return Err(SamplerError::Shape(format!(
            "r = {r_size}, s = {s_size}, d = {d} must be positive"
        )));
    }
    if !waive {
        let (lhs, rhs) = feasibility(r_size, s_size, d, theta, delta);
        if lhs <= rhs {
            return Err(SamplerError::Infeasible { lhs, rhs });
        }
    }
    let mut g = rng::stream(seed, &[r_size as u64, s_size as u64, d as u64]);
    let assignment = (0..r_size)
        .map(|_| (0..d).map(|_| g.gen_range(0..s_size)).collect())
        .collect();
    Ok(Sampler {
        r_size,
        s_size,
        d,
        theta,
        delta,
        assignment,
        verified: false,
    })
}

impl Sampler {
    /// Wraps an explicit assignment.
    pub fn from_assignment(
        s_size: usize,
        assignment: Vec<Vec<usize>>,
        theta: f64,
        delta: f64,
    ) -> Result<Self, SamplerError> {
        let d = assignment.first().map_or(0, Vec::len);
        if assignment.is_empty() || d == 0 {
            return Err(SamplerError::Shape("empty assignment".into()));
        }
        for (x, img) in assignment.iter().enumerate() {
            if img.len() != d {
                return Err(SamplerError::Shape(format!(
                    "input {x} has {} elements, expected {d}",
                    img.len()
                )));
            }
            if let Some(&bad) = img.iter().find(|&&y| y >= s_size) {
                return Err(SamplerError::Shape(format!(
                    "input {x} maps to {bad} outside [0, {s_size})"
                )));
            }
        }
        Ok(Sampler {
            r_size: assignment.len(),
            s_size,
            d,
            theta,
            delta,
            assignment,
            verified: false,
        })
    }

    /// Every input sees the whole universe once.
    pub fn full_multiset(r_size: usize, s_size: usize, theta: f64) -> Self {
        Sampler {
            r_size,
            s_size,
            d: s_size,
            theta,
            delta: 0.0,
            assignment: vec![(0..s_size).collect(); r_size],
            verified: false,
        }
    }

    pub fn image(&self, x: usize) -> &[usize] {
        &self.assignment[x]
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn is_verified(&self) -> bool {
        self.verified
    }

    /// `|H(x) ∩ S|` with multiplicity, for `S` given as a membership mask.
    pub fn intersection(&self, x: usize, in_s: impl Fn(usize) -> bool) -> usize {
        self.assignment[x].iter().filter(|&&y| in_s(y)).count()
    }

    fn is_bad(&self, hits: usize, s_len: usize) -> bool {
        // hits/d > |S|/s + θ, compared without dividing by d.
        let lhs = hits as f64 * self.s_size as f64;
        let rhs = (s_len as f64 + self.theta * self.s_size as f64) * self.d as f64;
        lhs > rhs + 1e-9 * rhs.abs().max(1.0)
    }

    /// Fraction of inputs that are bad for the subset `S`.
    pub fn bad_fraction(&self, subset: &[usize]) -> f64 {
        let mut mask = vec![false; self.s_size];
        for &y in subset {
            mask[y] = true;
        }
        let s_len = mask.iter().filter(|&&b| b).count();
        let bad = (0..self.r_size)
            .filter(|&x| self.is_bad(self.intersection(x, |y| mask[y]), s_len))
            .count();
        bad as f64 / self.r_size as f64
    }

    fn exceeds_delta(&self, bad: usize) -> bool {
        bad as f64 > self.delta * self.r_size as f64 + 1e-9
    }

    /// Checks every subset of `[s]`; returns the first failing subset in
    /// increasing bitmask order.
    pub fn verify_exhaustive(&self) -> Result<Verdict, SamplerError> {
        if self.s_size > EXHAUSTIVE_LIMIT {
            return Err(SamplerError::TooLarge(self.s_size));
        }
        let images: Vec<u32> = self
            .assignment
            .iter()
            .map(|img| img.iter().fold(0u32, |m, &y| m | (1 << y)))
            .collect();
        let counts: Vec<Vec<(usize, usize)>> = self
            .assignment
            .iter()
            .map(|img| {
                let mut c: Vec<(usize, usize)> = Vec::new();
                for &y in img {
                    match c.iter_mut().find(|(v, _)| *v == y) {
                        Some(e) => e.1 += 1,
                        None => c.push((y, 1)),
                    }
                }
                c
            })
            .collect();
        for mask in 0u32..(1u32 << self.s_size) {
            let s_len = mask.count_ones() as usize;
            let mut bad = 0;
            for x in 0..self.r_size {
                let hits = if images[x] & mask == 0 {
                    0
                } else {
                    counts[x]
                        .iter()
                        .filter(|(y, _)| mask & (1 << y) != 0)
                        .map(|(_, c)| c)
                        .sum()
                };
                if self.is_bad(hits, s_len) {
                    bad += 1;
                }
            }
            if self.exceeds_delta(bad) {
                let witness = (0..self.s_size).filter(|y| mask & (1 << y) != 0).collect();
                return Ok(Verdict::Fail {
                    witness,
                    bad_fraction: bad as f64 / self.r_size as f64,
                });
            }
        }
        Ok(Verdict::Pass)
    }

    /// Runs [`Self::verify_exhaustive`] and records a pass.
    pub fn verify_and_mark(&mut self) -> Result<Verdict, SamplerError> {
        let v = self.verify_exhaustive()?;
        self.verified = v.passed();
        Ok(v)
    }

    /// Worst bad-input fraction over `trials` random subsets of random sizes.
    pub fn verify_statistical(&self, trials: usize, seed: u64) -> f64 {
        let mut g = rng::stream(seed, &[self.r_size as u64, self.s_size as u64, 0x5747]);
        let mut worst: f64 = 0.0;
        let mut pool: Vec<usize> = (0..self.s_size).collect();
        for _ in 0..trials {
            let size = g.gen_range(0..=self.s_size);
            for i in 0..size {
                let j = g.gen_range(i..self.s_size);
                pool.swap(i, j);
            }
            worst = worst.max(self.bad_fraction(&pool[..size]));
        }
        worst
    }

    /// Largest in-degree over output points, with multiplicity.
    pub fn max_out_degree(&self) -> usize {
        self.out_degrees().into_iter().max().unwrap_or(0)
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.s_size];
        for img in &self.assignment {
            for &y in img {
                deg[y] += 1;
            }
        }
        deg
    }

    /// Header `r s d theta delta`, then one line of `d` integers per input.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {} {} {}\n",
            self.r_size, self.s_size, self.d, self.theta, self.delta
        );
        for img in &self.assignment {
            let line: Vec<String> = img.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SamplerError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(SamplerError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || SamplerError::Parse {
            line: 1,
            msg: format!("expected `r s d theta delta`, got `{header}`"),
        };
        if h.len() != 5 {
            return Err(bad_header());
        }
        let r: usize = h[0].parse().map_err(|_| bad_header())?;
        let s: usize = h[1].parse().map_err(|_| bad_header())?;
        let d: usize = h[2].parse().map_err(|_| bad_header())?;
        let theta: f64 = h[3].parse().map_err(|_| bad_header())?;
        let delta: f64 = h[4].parse().map_err(|_| bad_header())?;
        let mut assignment = Vec::with_capacity(r);
        for (idx, line) in lines {
            let img: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
            let img = img.map_err(|_| SamplerError::Parse {
                line: idx + 1,
                msg: format!("bad image line `{line}`"),
            })?;
            if img.len() != d {
                return Err(SamplerError::Parse {
                    line: idx + 1,
                    msg: format!("expected {d} entries, got {}", img.len()),
                });
            }
            assignment.push(img);
        }
        if assignment.len() != r {
            return Err(SamplerError::Parse {
                line: 0,
                msg: format!("expected {r} image lines, got {}", assignment.len()),
            });
        }
        Sampler::from_assignment(s, assignment, theta, delta)
    }
}
