//! Threshold secret sharing over a prime field, with iterated re-sharing.
//!
//! A secret is the constant term of a uniformly random polynomial of degree
//! `t`; share `j` is its value at `x = j`. An *i-share* is a share of an
//! (i−1)-share. Any `t + 1` shares reconstruct, any `t` reveal nothing.

use rand::Rng as _;
use thiserror::Error;

use crate::params::is_prime;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SecretsError {
    #[error("modulus {0} is not prime")]
    NotPrime(u32),
    #[error("threshold t = {t} must satisfy 1 <= t < n = {n}")]
    BadThreshold { n: usize, t: usize },
    #[error("value {value} does not fit in {width} bits below modulus {modulus}")]
    OutOfRange { value: u32, width: u32, modulus: u32 },
    #[error("share was erased")]
    Erased,
    #[error("need {needed} shares, got {got}")]
    Insufficient { needed: usize, got: usize },
    #[error("shares come from different sharings or repeat an index")]
    Mismatched,
    #[error("no {needed} shares are consistent with one polynomial")]
    NoConsistentSubset { needed: usize },
    #[error("two different polynomials tie for the largest consistent subset ({size} shares)")]
    Ambiguous { size: usize },
}

/// Arithmetic modulo a prime below `2^31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Field {
    p: u32,
}

impl Field {
    pub fn new(p: u32) -> Result<Self, SecretsError> {
        if !is_prime(p as u64) || p >= 1 << 31 {
            return Err(SecretsError::NotPrime(p));
        }
        Ok(Field { p })
    }

    pub fn modulus(self) -> u32 {
        self.p
    }

    #[inline]
    pub fn add(self, a: u32, b: u32) -> u32 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(self, a: u32, b: u32) -> u32 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    #[inline]
    pub fn mul(self, a: u32, b: u32) -> u32 {
        ((a as u64 * b as u64) % self.p as u64) as u32
    }

    pub fn pow(self, mut a: u32, mut e: u64) -> u32 {
        let mut acc = 1;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, a);
            }
            a = self.mul(a, a);
            e >>= 1;
        }
        acc
    }

    pub fn inv(self, a: u32) -> u32 {
        debug_assert!(!a.is_multiple_of(self.p));
        self.pow(a, self.p as u64 - 2)
    }

    pub fn reduce(self, x: u64) -> u32 {
        (x % self.p as u64) as u32
    }

    /// Horner evaluation; `coeffs[0]` is the constant term.
    pub fn eval(self, coeffs: &[u32], x: u32) -> u32 {
        coeffs
            .iter()
            .rev()
            .fold(0, |acc, &c| self.add(self.mul(acc, x), c))
    }

    /// Lagrange interpolation of the unique degree < len polynomial at `at`.
    pub fn interpolate_at(self, xs: &[u32], ys: &[u32], at: u32) -> u32 {
        let mut acc = 0;
        for (i, (&xi, &yi)) in xs.iter().zip(ys).enumerate() {
            let mut num = 1;
            let mut den = 1;
            for (j, &xj) in xs.iter().enumerate() {
                if i != j {
                    num = self.mul(num, self.sub(at, xj));
                    den = self.mul(den, self.sub(xi, xj));
                }
            }
            acc = self.add(acc, self.mul(yi, self.mul(num, self.inv(den))));
        }
        acc
    }

    /// Coefficients of the interpolating polynomial, constant term first.
    pub fn interpolate_coeffs(self, xs: &[u32], ys: &[u32]) -> Vec<u32> {
        let k = xs.len();
        let mut out = vec![0; k];
        for i in 0..k {
            // basis = prod_{j != i} (x - xj) / (xi - xj)
            let mut basis = vec![1u32];
            let mut den = 1;
            for j in 0..k {
                if i == j {
                    continue;
                }
                let mut next = vec![0; basis.len() + 1];
                for (d, &c) in basis.iter().enumerate() {
                    next[d + 1] = self.add(next[d + 1], c);
                    next[d] = self.sub(next[d], self.mul(c, xs[j]));
                }
                basis = next;
                den = self.mul(den, self.sub(xs[i], xs[j]));
            }
            let scale = self.mul(ys[i], self.inv(den));
            for (d, c) in basis.into_iter().enumerate() {
                out[d] = self.add(out[d], self.mul(c, scale));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharingSpec {
    pub n_parties: usize,
    /// `t`: any `t + 1` shares reconstruct.
    pub threshold_t: usize,
    pub field_modulus: u32,
}

impl SharingSpec {
    pub fn new(n_parties: usize, threshold_t: usize, field_modulus: u32) -> Result<Self, SecretsError> {
        Field::new(field_modulus)?;
        if threshold_t < 1 || threshold_t >= n_parties {
            return Err(SecretsError::BadThreshold {
                n: n_parties,
                t: threshold_t,
            });
        }
        if n_parties as u64 >= field_modulus as u64 {
            return Err(SecretsError::BadThreshold {
                n: n_parties,
                t: threshold_t,
            });
        }
        Ok(SharingSpec {
            n_parties,
            threshold_t,
            field_modulus,
        })
    }

    /// `t = n/2`, kept inside `[1, n−1]`.
    pub fn half(n_parties: usize, field_modulus: u32) -> Result<Self, SecretsError> {
        let t = (n_parties / 2).clamp(1, n_parties.saturating_sub(1).max(1));
        Self::new(n_parties, t, field_modulus)
    }

    pub fn field(&self) -> Field {
        Field {
            p: self.field_modulus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretWord {
    pub value: u32,
    pub width: u32,
}

impl SecretWord {
    pub fn new(value: u32, width: u32, field_modulus: u32) -> Result<Self, SecretsError> {
        let fits = width < 32 && (value as u64) < (1u64 << width);
        if !fits || (1u64 << width) > field_modulus as u64 {
            return Err(SecretsError::OutOfRange {
                value,
                width,
                modulus: field_modulus,
            });
        }
        Ok(SecretWord { value, width })
    }
}

/// One i-share with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    value: Option<u32>,
    /// Evaluation point, `1..=n_parties`.
    pub index: usize,
    /// `(node id, index)` from the original secret down to this share.
    pub lineage: Vec<(u64, usize)>,
}

impl Share {
    pub fn level(&self) -> usize {
        self.lineage.len()
    }

    pub fn value(&self) -> Result<u32, SecretsError> {
        self.value.ok_or(SecretsError::Erased)
    }

    pub fn is_erased(&self) -> bool {
        self.value.is_none()
    }

    /// Idempotent; the value is unreachable afterwards.
    pub fn erase(&mut self) {
        self.value = None;
    }
}

pub fn erase(sh: &mut Share) {
    sh.erase();
}

/// Raw share values of `value` at `x = 1..=n`.
pub fn share_values(value: u32, spec: &SharingSpec, rng: &mut Rng) -> Vec<u32> {
    let f = spec.field();
    let mut coeffs = Vec::with_capacity(spec.threshold_t + 1);
    coeffs.push(value % spec.field_modulus);
    for _ in 0..spec.threshold_t {
        coeffs.push(rng.gen_range(0..spec.field_modulus));
    }
    (1..=spec.n_parties as u32).map(|x| f.eval(&coeffs, x)).collect()
}

/// Shares a word among `spec.n_parties` holders of node `origin`.
pub fn share(
    secret: SecretWord,
    spec: &SharingSpec,
    origin: u64,
    rng: &mut Rng,
) -> Result<Vec<Share>, SecretsError> {
    if (secret.value as u64) >= spec.field_modulus as u64 {
        return Err(SecretsError::OutOfRange {
            value: secret.value,
            width: secret.width,
            modulus: spec.field_modulus,
        });
    }
    Ok(share_values(secret.value, spec, rng)
        .into_iter()
        .enumerate()
        .map(|(j, v)| Share {
            value: Some(v),
            index: j + 1,
            lineage: vec![(origin, j + 1)],
        })
        .collect())
}

/// Shares a share among the holders of `node`, then erases the input.
pub fn reshare(
    sh: &mut Share,
    spec: &SharingSpec,
    node: u64,
    rng: &mut Rng,
) -> Result<Vec<Share>, SecretsError> {
    let v = sh.value()?;
    let out = share_values(v, spec, rng)
        .into_iter()
        .enumerate()
        .map(|(j, value)| {
            let mut lineage = sh.lineage.clone();
            lineage.push((node, j + 1));
            Share {
                value: Some(value),
                index: j + 1,
                lineage,
            }
        })
        .collect();
    sh.erase();
    Ok(out)
}

/// Rebuilds the shared value one level up.
///
/// Extra shares are decoded with the largest-consistent-subset rule.
pub fn reconstruct(shares: &[Share], spec: &SharingSpec) -> Result<u32, SecretsError> {
    let first = shares.first().ok_or(SecretsError::Insufficient {
        needed: spec.threshold_t + 1,
        got: 0,
    })?;
    let prefix = &first.lineage[..first.lineage.len().saturating_sub(1)];
    let mut xs = Vec::with_capacity(shares.len());
    let mut ys = Vec::with_capacity(shares.len());
    for sh in shares {
        if sh.lineage.len() != first.lineage.len()
            || &sh.lineage[..sh.lineage.len() - 1] != prefix
            || xs.contains(&(sh.index as u32))
            || sh.index == 0
        {
            return Err(SecretsError::Mismatched);
        }
        xs.push(sh.index as u32);
        ys.push(sh.value()?);
    }
    robust_decode(spec.field(), spec.threshold_t, &xs, &ys)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Subsets above this count switch from enumeration to algebraic decoding.
const ENUMERATION_LIMIT: u128 = 4096;

/// Value at zero of the degree-`t` polynomial agreeing with the most points.
///
/// Fails when fewer than `t + 1` points agree on any polynomial or when two
/// different polynomials tie for the most agreement.
pub fn robust_decode(f: Field, t: usize, xs: &[u32], ys: &[u32]) -> Result<u32, SecretsError> {
    let m = xs.len();
    if m < t + 1 {
        return Err(SecretsError::Insufficient {
            needed: t + 1,
            got: m,
        });
    }
    if m == t + 1 {
        return Ok(f.interpolate_at(xs, ys, 0));
    }
    // Fast path: all points on one polynomial.
    let head = f.interpolate_coeffs(&xs[..=t], &ys[..=t]);
    if xs.iter().zip(ys).all(|(&x, &y)| f.eval(&head, x) == y) {
        return Ok(head[0]);
    }
    if binomial(m, t + 1) <= ENUMERATION_LIMIT {
        return decode_by_enumeration(f, t, xs, ys);
    }
    match berlekamp_welch(f, t, xs, ys) {
        Some(poly) => {
            let agree = count_agree(f, &poly, xs, ys);
            // Unique whenever agreement beats t plus the disagreeing points.
            if agree > t + (m - agree) {
                return Ok(poly[0]);
            }
            Err(SecretsError::Ambiguous { size: agree })
        }
        None => Err(SecretsError::NoConsistentSubset { needed: t + 1 }),
    }
}

fn count_agree(f: Field, poly: &[u32], xs: &[u32], ys: &[u32]) -> usize {
    xs.iter()
        .zip(ys)
        .filter(|(&x, &y)| f.eval(poly, x) == y)
        .count()
}

fn decode_by_enumeration(f: Field, t: usize, xs: &[u32], ys: &[u32]) -> Result<u32, SecretsError> {
    let m = xs.len();
    let mut idx: Vec<usize> = (0..=t).collect();
    let mut best: Option<(usize, Vec<u32>)> = None;
    let mut tied = false;
    let mut sx = vec![0; t + 1];
    let mut sy = vec![0; t + 1];
    loop {
        for (k, &i) in idx.iter().enumerate() {
            sx[k] = xs[i];
            sy[k] = ys[i];
        }
        let poly = f.interpolate_coeffs(&sx, &sy);
        let agree = count_agree(f, &poly, xs, ys);
        match &best {
            None => best = Some((agree, poly)),
            Some((b, bp)) => {
                if agree > *b {
                    best = Some((agree, poly));
                    tied = false;
                } else if agree == *b && &poly != bp {
                    tied = true;
                }
            }
        }
        // Next combination in lexicographic order.
        let mut k = t + 1;
        loop {
            if k == 0 {
                let (size, poly) = best.expect("at least one subset");
                return if tied {
                    Err(SecretsError::Ambiguous { size })
                } else {
                    Ok(poly[0])
                };
            }
            k -= 1;
            if idx[k] < m - (t + 1 - k) {
                idx[k] += 1;
                for j in k + 1..=t {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Solves `A·z = b` over the field; returns one solution if consistent.
fn solve(f: Field, mut a: Vec<Vec<u32>>, mut b: Vec<u32>) -> Option<Vec<u32>> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut pivot_cols = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows).find(|&i| a[i][c] != 0) else {
            continue;
        };
        a.swap(r, p);
        b.swap(r, p);
        let inv = f.inv(a[r][c]);
        for v in a[r].iter_mut() {
            *v = f.mul(*v, inv);
        }
        b[r] = f.mul(b[r], inv);
        for i in 0..rows {
            if i != r && a[i][c] != 0 {
                let factor = a[i][c];
                for j in 0..cols {
                    let sub = f.mul(factor, a[r][j]);
                    a[i][j] = f.sub(a[i][j], sub);
                }
                b[i] = f.sub(b[i], f.mul(factor, b[r]));
            }
        }
        pivot_cols.push(c);
        r += 1;
        if r == rows {
            break;
        }
    }
    if b[r..].iter().any(|&v| v != 0) {
        return None;
    }
    let mut z = vec![0; cols];
    for (i, &c) in pivot_cols.iter().enumerate() {
        z[c] = b[i];
    }
    Some(z)
}

/// Decodes up to `(m − t − 1)/2` wrong points.
fn berlekamp_welch(f: Field, t: usize, xs: &[u32], ys: &[u32]) -> Option<Vec<u32>> {
    let m = xs.len();
    let e = (m - t - 1) / 2;
    // Unknowns: Q (degree e + t, e + t + 1 coefficients), E (monic, degree e).
    let nq = e + t + 1;
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for (&x, &y) in xs.iter().zip(ys) {
        let mut row = vec![0; nq + e];
        let mut xp = 1;
        for c in row.iter_mut().take(nq) {
            *c = xp;
            xp = f.mul(xp, x);
        }
        let mut xp = 1;
        for j in 0..e {
            row[nq + j] = f.sub(0, f.mul(y, xp));
            xp = f.mul(xp, x);
        }
        a.push(row);
        b.push(f.mul(y, f.pow(x, e as u64)));
    }
    let z = solve(f, a, b)?;
    let q = &z[..nq];
    let mut ev: Vec<u32> = z[nq..].to_vec();
    ev.push(1);
    // Polynomial division Q / E.
    let mut rem = q.to_vec();
    let mut quot = vec![0; t + 1];
    for d in (0..=t).rev() {
        let coef = rem[d + e];
        quot[d] = coef;
        if coef != 0 {
            for (j, &ec) in ev.iter().enumerate() {
                rem[d + j] = f.sub(rem[d + j], f.mul(coef, ec));
            }
        }
    }
    if rem.iter().any(|&v| v != 0) {
        return None;
    }
    Some(quot)
}

/// Exact hiding checks for iterated sharings.
///
/// A view is a list of tree positions; position `[a, b]` is the `b`-th share
/// of the `a`-th 1-share (0-based). Each node's value is a linear form in the
/// secret and the sharing coefficients, so the view's conditional
/// distribution is the same for every secret exactly when the secret's column
/// lies in the span of the coefficient columns.
pub mod hiding {
    use std::collections::{BTreeMap, HashMap};

    use super::Field;

    pub type Path = Vec<usize>;

    struct Forms {
        vars: usize,
        coef_index: HashMap<(Path, usize), usize>,
    }

    impl Forms {
        fn var(&mut self, node: &[usize], k: usize) -> usize {
            if let Some(&v) = self.coef_index.get(&(node.to_vec(), k)) {
                return v;
            }
            let v = self.vars;
            self.vars += 1;
            self.coef_index.insert((node.to_vec(), k), v);
            v
        }
    }

    fn linear_forms(f: Field, t: usize, view: &[Path]) -> Vec<Vec<(usize, u32)>> {
        let mut forms = Forms {
            vars: 1,
            coef_index: HashMap::new(),
        };
        let mut out = Vec::with_capacity(view.len());
        for path in view {
            // value(child j of u) = value(u) + sum_k c_{u,k} (j+1)^k
            let mut form: BTreeMap<usize, u32> = BTreeMap::new();
            form.insert(0, 1);
            for depth in 0..path.len() {
                let parent = &path[..depth];
                let x = path[depth] as u32 + 1;
                let mut xp = 1;
                for k in 1..=t {
                    xp = f.mul(xp, x);
                    let v = forms.var(parent, k);
                    let e = form.entry(v).or_insert(0);
                    *e = f.add(*e, xp);
                }
            }
            out.push(form.into_iter().collect());
        }
        out
    }

    fn rank(f: Field, mut rows: Vec<Vec<u32>>) -> usize {
        let cols = rows.first().map_or(0, Vec::len);
        let mut r = 0;
        for c in 0..cols {
            let Some(p) = (r..rows.len()).find(|&i| rows[i][c] != 0) else {
                continue;
            };
            rows.swap(r, p);
            let inv = f.inv(rows[r][c]);
            for v in rows[r].iter_mut() {
                *v = f.mul(*v, inv);
            }
            for i in r + 1..rows.len() {
                if rows[i][c] != 0 {
                    let factor = rows[i][c];
                    for j in c..cols {
                        let s = f.mul(factor, rows[r][j]);
                        rows[i][j] = f.sub(rows[i][j], s);
                    }
                }
            }
            r += 1;
        }
        r
    }

    /// True when the view's distribution does not depend on the secret.
    pub fn view_hides(f: Field, t: usize, view: &[Path]) -> bool {
        let forms = linear_forms(f, t, view);
        let vars = forms
            .iter()
            .flat_map(|fm| fm.iter().map(|&(v, _)| v + 1))
            .max()
            .unwrap_or(1);
        let dense = |with_secret: bool| -> Vec<Vec<u32>> {
            forms
                .iter()
                .map(|fm| {
                    let mut row = vec![0; vars];
                    for &(v, c) in fm {
                        if v != 0 || with_secret {
                            row[v] = c;
                        }
                    }
                    row
                })
                .collect()
        };
        // Column 0 is the secret; the rest are coefficients.
        rank(f, dense(true)) == rank(f, dense(false))
    }

    /// Distribution of the view for one secret, by enumerating every
    /// coefficient assignment. Only for tiny fields.
    pub fn view_distribution(
        f: Field,
        n: usize,
        t: usize,
        depth: usize,
        view: &[Path],
        secret: u32,
    ) -> BTreeMap<Vec<u32>, u64> {
        let internal: Vec<Path> = internal_nodes(n, depth);
        let vars = internal.len() * t;
        let p = f.modulus() as u64;
        let total = p.pow(vars as u32);
        let mut out = BTreeMap::new();
        let pos: HashMap<Path, usize> = internal
            .iter()
            .enumerate()
            .map(|(i, path)| (path.clone(), i))
            .collect();
        let mut coeffs = vec![0u32; vars];
        for code in 0..total {
            let mut c = code;
            for v in coeffs.iter_mut() {
                *v = (c % p) as u32;
                c /= p;
            }
            let obs: Vec<u32> = view
                .iter()
                .map(|path| {
                    let mut val = secret;
                    for d in 0..path.len() {
                        let node = pos[&path[..d].to_vec()];
                        let mut poly = vec![val];
                        poly.extend_from_slice(&coeffs[node * t..node * t + t]);
                        val = f.eval(&poly, path[d] as u32 + 1);
                    }
                    val
                })
                .collect();
            *out.entry(obs).or_insert(0) += 1;
        }
        out
    }

    fn internal_nodes(n: usize, depth: usize) -> Vec<Path> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 1..depth {
            let mut next = Vec::new();
            for p in &frontier {
                for j in 0..n {
                    let mut c: Path = p.clone();
                    c.push(j);
                    next.push(c);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Whether the secret can be read off the view by reconstructing upward:
    /// a node is known if observed or if more than `t` children are known.
    pub fn root_reachable(n: usize, t: usize, view: &[Path]) -> bool {
        fn known(n: usize, t: usize, node: &[usize], view: &[Path]) -> bool {
            if view.iter().any(|p| p.as_slice() == node) {
                return true;
            }
            if !view.iter().any(|p| p.len() > node.len() && p.starts_with(node)) {
                return false;
            }
            let mut child = node.to_vec();
            child.push(0);
            let mut count = 0;
            for j in 0..n {
                *child.last_mut().expect("non-empty") = j;
                if known(n, t, &child, view) {
                    count += 1;
                }
            }
            count > t
        }
        known(n, t, &[], view)
    }

    /// Maximal admissible views below `node` that keep `node` unknown: pick
    /// `t` directly observed children, and recurse into the others.
    pub fn maximal_views(n: usize, t: usize, depth: usize) -> Vec<Vec<Path>> {
        below(n, t, depth, &[])
    }

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                go(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        go(0, n, k, &mut cur, &mut out);
        out
    }

    fn below(n: usize, t: usize, levels: usize, node: &[usize]) -> Vec<Vec<Path>> {
        let mut out = Vec::new();
        for known in subsets(n, t) {
            let direct: Vec<Path> = known
                .iter()
                .map(|&j| {
                    let mut p = node.to_vec();
                    p.push(j);
                    p
                })
                .collect();
            if levels == 1 {
                out.push(direct);
                continue;
            }
            let mut partial = vec![direct];
            for j in (0..n).filter(|j| !known.contains(j)) {
                let mut child = node.to_vec();
                child.push(j);
                let subs = below(n, t, levels - 1, &child);
                let mut next = Vec::with_capacity(partial.len() * subs.len());
                for p in &partial {
                    for s in &subs {
                        let mut v = p.clone();
                        v.extend(s.iter().cloned());
                        next.push(v);
                    }
                }
                partial = next;
            }
            out.extend(partial);
        }
        out
    }

    /// Maximal views where every unknown node at the same depth uses the same
    /// local choice of observed children; `pattern[d]` lists them at depth `d`.
    pub fn uniform_view(n: usize, depth: usize, pattern: &[Vec<usize>]) -> Vec<Path> {
        let mut out = Vec::new();
        let mut frontier: Vec<Path> = vec![vec![]];
        for (d, observed) in pattern.iter().enumerate().take(depth) {
            let mut next = Vec::new();
            for node in &frontier {
                for j in 0..n {
                    let mut c = node.clone();
                    c.push(j);
                    if observed.contains(&j) {
                        out.push(c);
                    } else if d + 1 < depth {
                        next.push(c);
                    }
                }
            }
            frontier = next;
        }
        out
    }

    /// All `k`-subsets of `0..n`, in lexicographic order.
    pub fn choose(n: usize, k: usize) -> Vec<Vec<usize>> {
        subsets(n, k)
    }
}
