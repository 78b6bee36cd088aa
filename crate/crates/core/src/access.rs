//! Minimum-total-power uplink allocation under RSMA, FDMA and TDMA.
//!
//! Every user `k` has a linear channel gain `g_k` and a required rate `R_k`.
//! The noise power over the band is `N0 = n0 * W`.
//!
//! * RSMA: the rate vector must lie in the multiple-access region, i.e. for
//!   every user subset `S`, `R(S) <= W log2(1 + sum_S g_k P_k / N0)`. In the
//!   received powers `q_k = g_k P_k` this is a contra-polymatroid and the
//!   weighted minimum of `sum q_k / g_k` sits at the greedy vertex that puts
//!   the weakest users first in the chain.
//! * FDMA / TDMA: a share `b_k` of the band or of the frame, summing to one.
//!   Each per-user power is convex and decreasing in its share, so the
//!   optimum equalizes the marginal power reductions; the common marginal is
//!   found by bisection.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use crate::channel::exp2_m1;
use crate::error::{Error, Result};

/// Relative slack used by [`brute_force_region_check`].
pub const REGION_SLACK: f64 = 1e-9;

/// Largest user count for the subset-enumerating checks.
pub const MAX_ENUMERATED_USERS: usize = 12;

const MAX_EXHAUSTIVE_USERS: usize = 6;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Rsma,
    Fdma,
    Tdma,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Rsma, Scheme::Fdma, Scheme::Tdma];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Rsma => "rsma",
            Scheme::Fdma => "fdma",
            Scheme::Tdma => "tdma",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rsma" => Ok(Scheme::Rsma),
            "fdma" => Ok(Scheme::Fdma),
            "tdma" => Ok(Scheme::Tdma),
            other => Err(Error::validation(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserDemand {
    /// Linear channel gain.
    pub gain: f64,
    /// Required rate, bit/s.
    pub rate: f64,
}

impl UserDemand {
    pub fn new(gain: f64, rate: f64) -> Self {
        UserDemand { gain, rate }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessSolution {
    pub scheme: Scheme,
    /// Transmit power per user, W.
    pub powers: Vec<f64>,
    /// Band / frame share per user. All ones for RSMA.
    pub shares: Vec<f64>,
    /// SIC decoding order, first decoded first. Empty for FDMA / TDMA.
    pub decode_order: Vec<usize>,
    pub total_power: f64,
}

impl AccessSolution {
    fn new(scheme: Scheme, powers: Vec<f64>, shares: Vec<f64>, decode_order: Vec<usize>) -> Self {
        let total_power = powers.iter().sum();
        AccessSolution {
            scheme,
            powers,
            shares,
            decode_order,
            total_power,
        }
    }
}

fn validate(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<()> {
    if users.is_empty() {
        return Err(Error::domain("user list is empty"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    if !(n0 > 0.0) || !n0.is_finite() {
        return Err(Error::domain(format!("noise density must be > 0, got {n0}")));
    }
    for (k, u) in users.iter().enumerate() {
        if !(u.gain > 0.0) || !u.gain.is_finite() {
            return Err(Error::domain(format!("user {k}: gain must be > 0, got {}", u.gain)));
        }
        if !(u.rate >= 0.0) || !u.rate.is_finite() {
            return Err(Error::domain(format!("user {k}: rate must be >= 0, got {}", u.rate)));
        }
    }
    Ok(())
}

pub fn solve(scheme: Scheme, users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    match scheme {
        Scheme::Rsma => solve_rsma(users, bandwidth, n0),
        Scheme::Fdma => solve_fdma(users, bandwidth, n0),
        Scheme::Tdma => solve_tdma(users, bandwidth, n0),
    }
}

/// Powers at the region vertex where users join the SIC chain in `chain`
/// order; the first user in the chain is decoded last and sees no
/// interference.
pub fn rsma_vertex(users: &[UserDemand], chain: &[usize], bandwidth: f64, n0: f64) -> Vec<f64> {
    let noise = n0 * bandwidth;
    let mut powers = vec![0.0; users.len()];
    let mut prefix_rate = 0.0;
    for &k in chain {
        let u = users[k];
        // f(S + k) - f(S) = N0 2^{R(S)/W} (2^{R_k/W} - 1)
        let received = noise * (prefix_rate / bandwidth).exp2() * exp2_m1(u.rate / bandwidth);
        powers[k] = received / u.gain;
        prefix_rate += u.rate;
    }
    powers
}

fn rsma_decode_order(users: &[UserDemand]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..users.len()).collect();
    // Strongest first; stable sort keeps ascending index on ties.
    order.sort_by(|&a, &b| users[b].gain.total_cmp(&users[a].gain));
    order
}

/// Minimum total RSMA power. Runs in `O(K log K)`, so unlike the enumerating
/// checks it has no user-count limit.
pub fn solve_rsma(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    validate(users, bandwidth, n0)?;
    let decode_order = rsma_decode_order(users);
    let chain: Vec<usize> = decode_order.iter().rev().copied().collect();
    let powers = rsma_vertex(users, &chain, bandwidth, n0);
    let solution = AccessSolution::new(Scheme::Rsma, powers, vec![1.0; users.len()], decode_order);

    if users.len() <= MAX_EXHAUSTIVE_USERS
        && !brute_force_region_check(&solution, users, bandwidth, n0).unwrap_or(false)
    {
        log::warn!("greedy RSMA vertex failed the region check, enumerating decoding orders");
        return solve_rsma_exhaustive(users, bandwidth, n0);
    }
    Ok(solution)
}

/// Minimum over all `K!` decoding-order vertices.
pub fn solve_rsma_exhaustive(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    validate(users, bandwidth, n0)?;
    if users.len() > MAX_ENUMERATED_USERS {
        return Err(Error::domain(format!(
            "exhaustive RSMA search supports at most {MAX_ENUMERATED_USERS} users, got {}",
            users.len()
        )));
    }
    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    for_each_permutation(users.len(), |chain| {
        let powers = rsma_vertex(users, chain, bandwidth, n0);
        let total: f64 = powers.iter().sum();
        if best.as_ref().map_or(true, |(t, _, _)| total < *t) {
            best = Some((total, powers, chain.to_vec()));
        }
    });
    let (_, powers, chain) = best.expect("at least one permutation");
    let decode_order = chain.into_iter().rev().collect();
    Ok(AccessSolution::new(Scheme::Rsma, powers, vec![1.0; users.len()], decode_order))
}

/// Heap's algorithm.
fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

pub fn solve_fdma(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    solve_orthogonal(Scheme::Fdma, users, bandwidth, n0)
}

pub fn solve_tdma(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    solve_orthogonal(Scheme::Tdma, users, bandwidth, n0)
}

/// Per-user power for a given share, W.
pub fn orthogonal_power(scheme: Scheme, user: UserDemand, share: f64, bandwidth: f64, n0: f64) -> f64 {
    if user.rate == 0.0 {
        return 0.0;
    }
    if share <= 0.0 {
        return f64::INFINITY;
    }
    let noise = n0 * bandwidth;
    let bump = exp2_m1(user.rate / (bandwidth * share));
    match scheme {
        Scheme::Fdma => noise * share * bump / user.gain,
        Scheme::Tdma => noise * bump / user.gain,
        Scheme::Rsma => panic!("orthogonal_power is defined for FDMA and TDMA only"),
    }
}

/// `e^u (u - 1) + 1`, the negated FDMA marginal in units of `N0 / g`.
fn fdma_marginal(u: f64) -> f64 {
    if u < 0.5 {
        // sum_{n>=2} u^n (n - 1) / n!
        let mut term = u; // u^n / n! at n = 1
        let mut sum = 0.0;
        for n in 2..30 {
            term *= u / n as f64;
            sum += term * (n - 1) as f64;
            if term < 1e-18 * sum {
                break;
            }
        }
        sum
    } else {
        u * u.exp() - u.exp_m1()
    }
}

/// Solves `fdma_marginal(u) = t` for `u > 0`. The function is convex and
/// increasing, so Newton from an upper bound descends monotonically.
fn fdma_marginal_inverse(t: f64) -> f64 {
    // marginal(u) >= u^2 / 2, and marginal(u) >= e^u once u >= 2.
    let mut u = (2.0 * t).sqrt().min(t.ln().max(2.0));
    for _ in 0..200 {
        let step = (fdma_marginal(u) - t) / (u * u.exp());
        let next = u - step;
        if !(next > 0.0) {
            u *= 0.5;
            continue;
        }
        if (u - next).abs() <= 1e-15 * u {
            return next;
        }
        u = next;
    }
    u
}

/// Solves `u^2 e^u = e^log_t` through `v = ln u`, where `2v + e^v` is convex
/// and increasing.
fn tdma_marginal_inverse(log_t: f64) -> f64 {
    let mut v = (log_t / 2.0).min(log_t.max(1.0).ln() + 1.0);
    for _ in 0..200 {
        let ev = v.exp();
        let next = v - (2.0 * v + ev - log_t) / (2.0 + ev);
        if (next - v).abs() <= 1e-15 * v.abs().max(1.0) {
            return next.exp();
        }
        v = next;
    }
    v.exp()
}

fn solve_orthogonal(scheme: Scheme, users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<AccessSolution> {
    validate(users, bandwidth, n0)?;
    let k = users.len();
    let active: Vec<usize> = (0..k).filter(|&i| users[i].rate > 0.0).collect();
    let mut shares = vec![0.0; k];

    match active.len() {
        0 => shares.iter_mut().for_each(|b| *b = 1.0 / k as f64),
        1 => shares[active[0]] = 1.0,
        _ => {
            let noise = n0 * bandwidth;
            // Share of user i when the common marginal power reduction is e^s.
            let share_at = |i: usize, s: f64| -> f64 {
                let u = users[i];
                let c_ln2 = u.rate / bandwidth * LN_2;
                let x = match scheme {
                    Scheme::Fdma => fdma_marginal_inverse((s + (u.gain / noise).ln()).exp()),
                    _ => tdma_marginal_inverse(s + (u.gain * c_ln2 / noise).ln()),
                };
                c_ln2 / x
            };
            let excess = |s: f64| active.iter().map(|&i| share_at(i, s)).sum::<f64>() - 1.0;

            // Total share decreases in s; bracket the root then bisect.
            let (mut lo, mut hi) = (-1.0, 1.0);
            let mut guard = 0;
            while excess(lo) < 0.0 {
                lo = 2.0 * lo - 1.0;
                guard += 1;
                if guard > 64 {
                    return Err(Error::domain("share bisection failed to bracket (lower end)"));
                }
            }
            while excess(hi) > 0.0 {
                hi = 2.0 * hi + 1.0;
                guard += 1;
                if guard > 128 {
                    return Err(Error::domain("share bisection failed to bracket (upper end)"));
                }
            }
            let mut mid = 0.5 * (lo + hi);
            for _ in 0..MAX_ITERATIONS {
                mid = 0.5 * (lo + hi);
                let e = excess(mid);
                if e.abs() <= 1e-13 || hi - lo <= 1e-15 * mid.abs().max(1.0) {
                    break;
                }
                if e > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            for &i in &active {
                shares[i] = share_at(i, mid);
            }
            let total: f64 = shares.iter().sum();
            shares.iter_mut().for_each(|b| *b /= total);
        }
    }

    let powers = users
        .iter()
        .zip(&shares)
        .map(|(&u, &b)| orthogonal_power(scheme, u, b, bandwidth, n0))
        .collect();
    Ok(AccessSolution::new(scheme, powers, shares, Vec::new()))
}

fn within(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + REGION_SLACK * lhs.abs().max(rhs.abs())
}

/// Re-evaluates every constraint of the scheme's rate region directly from
/// the powers and shares, independent of how the solution was produced.
/// RSMA enumerates all `2^K - 1` subsets and so rejects `K > 12`.
pub fn brute_force_region_check(
    solution: &AccessSolution,
    users: &[UserDemand],
    bandwidth: f64,
    n0: f64,
) -> Result<bool> {
    let k = users.len();
    if solution.powers.len() != k || solution.shares.len() != k {
        return Ok(false);
    }
    if solution.powers.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Ok(false);
    }
    let total: f64 = solution.powers.iter().sum();
    if (total - solution.total_power).abs() > REGION_SLACK * total.abs().max(1e-300) {
        return Ok(false);
    }
    let noise = n0 * bandwidth;
    let capacity = |snr: f64| bandwidth * snr.ln_1p() / LN_2;

    match solution.scheme {
        Scheme::Rsma => {
            if k > MAX_ENUMERATED_USERS {
                return Err(Error::domain(format!(
                    "region check enumerates subsets of at most {MAX_ENUMERATED_USERS} users, got {k}"
                )));
            }
            for mask in 1u32..(1u32 << k) {
                let (mut rate, mut received) = (0.0, 0.0);
                for i in 0..k {
                    if mask & (1 << i) != 0 {
                        rate += users[i].rate;
                        received += users[i].gain * solution.powers[i];
                    }
                }
                if !within(rate, capacity(received / noise)) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        scheme => {
            if solution.shares.iter().any(|b| !(*b >= 0.0)) {
                return Ok(false);
            }
            if (solution.shares.iter().sum::<f64>() - 1.0).abs() > REGION_SLACK {
                return Ok(false);
            }
            for i in 0..k {
                let b = solution.shares[i];
                let u = users[i];
                let cap = if b == 0.0 {
                    0.0
                } else {
                    let snr = match scheme {
                        Scheme::Fdma => u.gain * solution.powers[i] / (noise * b),
                        _ => u.gain * solution.powers[i] / noise,
                    };
                    b * capacity(snr)
                };
                if !within(u.rate, cap) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// Totals of the three schemes on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeComparison {
    pub totals: Vec<(Scheme, f64)>,
}

impl SchemeComparison {
    pub fn total(&self, scheme: Scheme) -> f64 {
        self.totals
            .iter()
            .find(|(s, _)| *s == scheme)
            .map(|(_, p)| *p)
            .expect("all schemes present")
    }

    /// Percentage of `other`'s power that `better` saves: `100 (P_o - P_b) / P_o`.
    pub fn reduction_pct(&self, better: Scheme, other: Scheme) -> f64 {
        percent_saving(self.total(better), self.total(other))
    }

    /// `(scheme, total_power_watts, pct_vs_rsma)` rows.
    pub fn csv_rows(&self) -> Vec<(Scheme, f64, f64)> {
        self.totals
            .iter()
            .map(|&(s, p)| (s, p, self.reduction_pct(Scheme::Rsma, s)))
            .collect()
    }
}

pub fn percent_saving(better: f64, other: f64) -> f64 {
    if other > 0.0 {
        100.0 * (other - better) / other
    } else {
        0.0
    }
}

pub fn compare_schemes(users: &[UserDemand], bandwidth: f64, n0: f64) -> Result<SchemeComparison> {
    let totals = Scheme::ALL
        .iter()
        .map(|&s| solve(s, users, bandwidth, n0).map(|sol| (s, sol.total_power)))
        .collect::<Result<_>>()?;
    Ok(SchemeComparison { totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn users(pairs: &[(f64, f64)]) -> Vec<UserDemand> {
        pairs.iter().map(|&(g, r)| UserDemand::new(g, r)).collect()
    }

    // W = 1, n0 = 1 so N0 = 1 and rates are in units of W.
    const W: f64 = 1.0;
    const N0: f64 = 1.0;

    #[test]
    fn rsma_single_user_closed_form() {
        let sol = solve_rsma(&users(&[(1.0, 1.0)]), W, N0).unwrap();
        assert_relative_eq!(sol.total_power, 1.0, max_relative = 1e-15);
        assert_eq!(sol.decode_order, vec![0]);
    }

    #[test]
    fn rsma_two_user_sum_constraint_binds() {
        let u = users(&[(1.0, 1.0), (1.0, 1.0)]);
        let sol = solve_rsma(&u, W, N0).unwrap();
        assert_relative_eq!(sol.total_power, 3.0, max_relative = 1e-15);
        assert!(brute_force_region_check(&sol, &u, W, N0).unwrap());
        // tie in gains: ascending index decoded first
        assert_eq!(sol.decode_order, vec![0, 1]);

        let mut halved = sol.clone();
        halved.powers[0] *= 0.5;
        halved.total_power = halved.powers.iter().sum();
        assert!(!brute_force_region_check(&halved, &u, W, N0).unwrap());
    }

    #[test]
    fn rsma_decodes_strongest_first() {
        let u = users(&[(0.5, 1.0), (4.0, 1.0), (2.0, 0.5)]);
        let sol = solve_rsma(&u, W, N0).unwrap();
        assert_eq!(sol.decode_order, vec![1, 2, 0]);
        // weakest user is decoded last, interference free
        assert_relative_eq!(sol.powers[0], 1.0 / 0.5, max_relative = 1e-14);
    }

    #[test]
    fn zero_rate_users_get_nothing() {
        let u = users(&[(1.0, 0.0), (2.0, 1.0), (3.0, 0.0)]);
        for scheme in Scheme::ALL {
            let sol = solve(scheme, &u, W, N0).unwrap();
            assert_eq!(sol.powers[0], 0.0);
            assert_eq!(sol.powers[2], 0.0);
            assert!(brute_force_region_check(&sol, &u, W, N0).unwrap(), "{scheme}");
            if scheme != Scheme::Rsma {
                assert_eq!(sol.shares, vec![0.0, 1.0, 0.0]);
            }
        }
        let idle = users(&[(1.0, 0.0), (2.0, 0.0)]);
        for scheme in Scheme::ALL {
            let sol = solve(scheme, &idle, W, N0).unwrap();
            assert_eq!(sol.total_power, 0.0);
            assert!(brute_force_region_check(&sol, &idle, W, N0).unwrap());
        }
    }

    #[test]
    fn empty_and_invalid_inputs() {
        for scheme in Scheme::ALL {
            assert!(solve(scheme, &[], W, N0).is_err());
            assert!(solve(scheme, &users(&[(0.0, 1.0)]), W, N0).is_err());
            assert!(solve(scheme, &users(&[(1.0, -1.0)]), W, N0).is_err());
            assert!(solve(scheme, &users(&[(1.0, 1.0)]), 0.0, N0).is_err());
        }
    }

    #[test]
    fn fdma_examples() {
        let sol = solve_fdma(&users(&[(2.0, 1.5)]), W, N0).unwrap();
        assert_eq!(sol.shares, vec![1.0]);
        assert_relative_eq!(sol.total_power, (2f64.powf(1.5) - 1.0) / 2.0, max_relative = 1e-14);

        let sym = solve_fdma(&users(&[(3.0, 0.7), (3.0, 0.7)]), W, N0).unwrap();
        assert_relative_eq!(sym.shares[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sym.shares[1], 0.5, epsilon = 1e-9);

        // frozen from a 1e-4 grid search over b1 (and a bounded scalar refine)
        let sol = solve_fdma(&users(&[(1.0, 1.0), (4.0, 1.0)]), W, N0).unwrap();
        assert_relative_eq!(sol.shares[0], 0.611363541163368, epsilon = 1e-6);
        assert_relative_eq!(sol.total_power, 1.769382638775457, max_relative = 1e-9);
    }

    #[test]
    fn tdma_examples() {
        let one = users(&[(2.0, 1.5)]);
        assert_relative_eq!(
            solve_tdma(&one, W, N0).unwrap().total_power,
            solve_fdma(&one, W, N0).unwrap().total_power,
            max_relative = 1e-15
        );

        let sym = solve_tdma(&users(&[(3.0, 0.7), (3.0, 0.7)]), W, N0).unwrap();
        assert_relative_eq!(sym.shares[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sym.powers[0], (2f64.powf(1.4) - 1.0) / 3.0, max_relative = 1e-9);

        let sol = solve_tdma(&users(&[(1.0, 1.0), (4.0, 1.0)]), W, N0).unwrap();
        assert_relative_eq!(sol.shares[0], 0.5998451932516015, epsilon = 1e-6);
        assert_relative_eq!(sol.total_power, 3.3390145966429103, max_relative = 1e-9);
    }

    #[test]
    fn tdma_power_is_fdma_power_over_share() {
        let u = UserDemand::new(0.7, 2.3e5);
        for b in [0.05, 0.3, 0.9, 1.0] {
            let f = orthogonal_power(Scheme::Fdma, u, b, 1e6, 1e-17);
            let t = orthogonal_power(Scheme::Tdma, u, b, 1e6, 1e-17);
            assert_relative_eq!(t, f / b, max_relative = 1e-14);
            assert!(t >= f);
        }
    }

    #[test]
    fn compare_examples() {
        let one = compare_schemes(&users(&[(2.0, 0.8)]), W, N0).unwrap();
        assert_relative_eq!(one.total(Scheme::Rsma), one.total(Scheme::Fdma), max_relative = 1e-14);
        assert_relative_eq!(one.total(Scheme::Fdma), one.total(Scheme::Tdma), max_relative = 1e-14);

        let pair = compare_schemes(&users(&[(1.0, 1.0), (1.0, 1.0)]), W, N0).unwrap();
        // RSMA 3, FDMA 2 * 0.5 (2^2 - 1) = 3, TDMA 2 (2^2 - 1) = 6
        assert_relative_eq!(pair.total(Scheme::Rsma), 3.0, max_relative = 1e-12);
        assert_relative_eq!(pair.total(Scheme::Fdma), 3.0, max_relative = 1e-9);
        assert_relative_eq!(pair.total(Scheme::Tdma), 6.0, max_relative = 1e-9);
        assert_relative_eq!(pair.reduction_pct(Scheme::Rsma, Scheme::Tdma), 50.0, max_relative = 1e-8);
        let rows = pair.csv_rows();
        assert_eq!(rows[0].0, Scheme::Rsma);
        assert_eq!(rows[0].2, 0.0);
    }

    #[test]
    fn power_nonincreasing_in_bandwidth() {
        let u = users(&[(1e-9, 3e5), (4e-10, 1.2e5), (2e-9, 6e5)]);
        let n0 = 1e-17;
        let mut prev = [f64::INFINITY; 3];
        for step in 0..20 {
            let w = 2e5 * 1.25f64.powi(step);
            let cmp = compare_schemes(&u, w, n0).unwrap();
            for (i, s) in Scheme::ALL.iter().enumerate() {
                let p = cmp.total(*s);
                assert!(p <= prev[i] * (1.0 + 1e-9), "{s} at W = {w}");
                prev[i] = p;
            }
        }
    }

    #[test]
    fn permutations_cover_factorial() {
        let mut seen = std::collections::BTreeSet::new();
        for_each_permutation(4, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn marginal_inverses() {
        for t in [1e-20, 1e-6, 0.3, 1.0, 17.0, 1e5, 1e30] {
            let u = fdma_marginal_inverse(t);
            assert_relative_eq!(fdma_marginal(u), t, max_relative = 1e-10);
        }
        for log_t in [-40.0, -3.0, 0.0, 2.0, 50.0] {
            let u = tdma_marginal_inverse(log_t);
            assert_relative_eq!(2.0 * u.ln() + u, log_t, epsilon = 1e-10);
        }
    }

    fn instance() -> impl Strategy<Value = Vec<UserDemand>> {
        prop::collection::vec((0.05f64..20.0, 0.0f64..2.0), 1..6)
            .prop_map(|v| v.into_iter().map(|(g, r)| UserDemand::new(g, r)).collect())
    }

    proptest! {
        #[test]
        fn ordering_and_feasibility(u in instance()) {
            let sols: Vec<_> = Scheme::ALL.iter().map(|&s| solve(s, &u, W, N0).unwrap()).collect();
            for s in &sols {
                prop_assert!(brute_force_region_check(s, &u, W, N0).unwrap());
            }
            let (r, f, t) = (sols[0].total_power, sols[1].total_power, sols[2].total_power);
            prop_assert!(r <= f * (1.0 + 1e-9));
            prop_assert!(f <= t * (1.0 + 1e-9));
        }

        #[test]
        fn gain_scaling_scales_powers(u in instance(), c in 0.01f64..100.0) {
            let scaled: Vec<_> = u.iter().map(|d| UserDemand::new(d.gain * c, d.rate)).collect();
            for scheme in Scheme::ALL {
                let a = solve(scheme, &u, W, N0).unwrap();
                let b = solve(scheme, &scaled, W, N0).unwrap();
                prop_assert_eq!(&a.decode_order, &b.decode_order);
                for i in 0..u.len() {
                    prop_assert!((a.shares[i] - b.shares[i]).abs() <= 1e-7);
                    prop_assert!((a.powers[i] / c - b.powers[i]).abs() <= 1e-6 * a.powers[i] / c + 1e-300);
                }
            }
        }

        #[test]
        fn power_nondecreasing_in_rate(u in instance(), idx in 0usize..6, bump in 0.0f64..0.5) {
            let idx = idx % u.len();
            let mut more = u.clone();
            more[idx].rate += bump;
            for scheme in Scheme::ALL {
                let a = solve(scheme, &u, W, N0).unwrap().total_power;
                let b = solve(scheme, &more, W, N0).unwrap().total_power;
                prop_assert!(b >= a * (1.0 - 1e-9));
            }
        }
    }
}
