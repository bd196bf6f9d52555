//! Finite-alphabet check of the spectral identification argument.
//!
//! A discrete hierarchical chain is enumerated exactly; from the joint law
//! of a window `x_{t-W..t+W}` the operators `A(x) = M(x) M^+` (reduced by an
//! SVD of `M = P(future, past)`) are built and jointly diagonalised. Their
//! eigenvalue tuples are the emission distributions `P(x_t | z_t)` up to a
//! permutation of states.

use nalgebra::{DMatrix, DVector, Schur, SVD};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::rng;

/// Upper bound on latent trajectories and on observation windows enumerated.
pub const ENUMERATION_LIMIT: usize = 10_000_000;
/// Singular-value ratio `sigma_K / sigma_1` required for injectivity.
pub const RANK_THRESHOLD: f64 = 1e-8;
const PROB_TOL: f64 = 1e-12;
const CLUSTER_TOL: f64 = 1e-6;

/// Discrete hierarchical hidden Markov chain. Layers are listed top first;
/// only the bottom layer emits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteHierChain {
    /// `[k_L, ..., k_1]`.
    pub state_sizes: Vec<usize>,
    pub alphabet: usize,
    /// `top_transition[prev][next]`.
    pub top_transition: Vec<Vec<f64>>,
    /// One entry per lower layer, top-most first:
    /// `transitions[j][prev][parent][next] = P(z_t = next | z_{t-1} = prev, parent_t = parent)`.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `emission[z][x] = P(x_t = x | z^1_t = z)`.
    pub emission: Vec<Vec<f64>>,
    /// Distribution of the joint state at the first step of a window,
    /// mixed radix with the top layer most significant.
    pub initial: Vec<f64>,
}

fn check_simplex(v: &[f64], len: usize, what: &str) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!("{what}: expected {len} entries, got {}", v.len())));
    }
    let sum: f64 = v.iter().sum();
    if v.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

impl DiscreteHierChain {
    pub fn num_layers(&self) -> usize {
        self.state_sizes.len()
    }

    /// Number of joint latent states `prod k_l`.
    pub fn joint_size(&self) -> usize {
        self.state_sizes.iter().product()
    }

    pub fn bottom_size(&self) -> usize {
        *self.state_sizes.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.state_sizes.len();
        if l == 0 || self.state_sizes.contains(&0) || self.alphabet == 0 {
            return Err(Error::Config("chain needs at least one layer and nonempty state spaces".into()));
        }
        let top = self.state_sizes[0];
        if self.top_transition.len() != top {
            return Err(Error::Shape("top transition must be k_L x k_L".into()));
        }
        for (i, row) in self.top_transition.iter().enumerate() {
            check_simplex(row, top, &format!("top transition row {i}"))?;
        }
        if self.transitions.len() != l - 1 {
            return Err(Error::Shape(format!("expected {} lower-layer transition arrays", l - 1)));
        }
        for (j, t) in self.transitions.iter().enumerate() {
            let (k, kp) = (self.state_sizes[j + 1], self.state_sizes[j]);
            if t.len() != k || t.iter().any(|p| p.len() != kp) {
                return Err(Error::Shape(format!("transition array {j} must be {k} x {kp} x {k}")));
            }
            for (a, by_parent) in t.iter().enumerate() {
                for (b, row) in by_parent.iter().enumerate() {
                    check_simplex(row, k, &format!("transition {j} [{a}][{b}]"))?;
                }
            }
        }
        if self.emission.len() != self.bottom_size() {
            return Err(Error::Shape("emission must have one row per bottom state".into()));
        }
        for (z, row) in self.emission.iter().enumerate() {
            check_simplex(row, self.alphabet, &format!("emission row {z}"))?;
        }
        check_simplex(&self.initial, self.joint_size(), "initial distribution")
    }

    /// Layer states (top first) of a joint index.
    pub fn decode_state(&self, mut s: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_layers()];
        for (l, &k) in self.state_sizes.iter().enumerate().rev() {
            out[l] = s % k;
            s /= k;
        }
        out
    }

    /// Joint transition matrix `T[prev][next]`.
    pub fn joint_transition(&self) -> DMatrix<f64> {
        let k = self.joint_size();
        let states: Vec<Vec<usize>> = (0..k).map(|s| self.decode_state(s)).collect();
        DMatrix::from_fn(k, k, |a, b| {
            let (prev, next) = (&states[a], &states[b]);
            let mut p = self.top_transition[prev[0]][next[0]];
            for (j, t) in self.transitions.iter().enumerate() {
                p *= t[prev[j + 1]][next[j]][next[j + 1]];
            }
            p
        })
    }

    /// Stationary law of the joint transition (unique when every entry is
    /// positive).
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let k = self.joint_size();
        let mut a = self.joint_transition().transpose() - DMatrix::identity(k, k);
        a.row_mut(k - 1).fill(1.0);
        let mut b = DVector::zeros(k);
        b[k - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("joint transition has no unique stationary law".into()))?;
        let pi: Vec<f64> = pi.iter().map(|p| p.max(0.0)).collect();
        let s: f64 = pi.iter().sum();
        Ok(pi.into_iter().map(|p| p / s).collect())
    }

    /// Bottom-layer state of a joint index.
    pub fn bottom_of(&self, s: usize) -> usize {
        s % self.bottom_size()
    }
}

fn dirichlet_one(n: usize, r: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| Exp1.sample(r)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Chain with every conditional row drawn from a flat Dirichlet, started
/// from its stationary law so that window laws do not depend on position.
pub fn random_chain(state_sizes: &[usize], alphabet: usize, seed: u64) -> Result<DiscreteHierChain> {
    let mut r = rng::chacha(seed);
    let top = state_sizes[0];
    let top_transition = (0..top).map(|_| dirichlet_one(top, &mut r)).collect();
    let transitions = (1..state_sizes.len())
        .map(|l| {
            let (k, kp) = (state_sizes[l], state_sizes[l - 1]);
            (0..k).map(|_| (0..kp).map(|_| dirichlet_one(k, &mut r)).collect()).collect()
        })
        .collect();
    let bottom = *state_sizes.last().ok_or_else(|| Error::Config("no layers".into()))?;
    let emission = (0..bottom).map(|_| dirichlet_one(alphabet, &mut r)).collect();
    let k: usize = state_sizes.iter().product();
    let mut chain = DiscreteHierChain {
        state_sizes: state_sizes.to_vec(),
        alphabet,
        top_transition,
        transitions,
        emission,
        initial: vec![1.0 / k as f64; k],
    };
    chain.initial = chain.stationary_distribution()?;
    chain.validate()?;
    Ok(chain)
}

/// Smallest max-norm distance between two emission rows.
pub fn emission_separation(chain: &DiscreteHierChain) -> f64 {
    let e = &chain.emission;
    let mut best = f64::INFINITY;
    for a in 0..e.len() {
        for b in a + 1..e.len() {
            let d = e[a].iter().zip(&e[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            best = best.min(d);
        }
    }
    best
}

/// Random chain that satisfies the identification assumptions with margin
/// at half-width `window`: emission rows differ by at least `1e-2` and
/// `sigma_K / sigma_1 >= 1e-3` for the window operator. Candidates are
/// drawn from the stream `(seed, attempt)` until one passes.
pub fn random_valid_chain(state_sizes: &[usize], alphabet: usize, window: usize, seed: u64) -> Result<DiscreteHierChain> {
    for attempt in 0..1000u64 {
        let chain = random_chain(state_sizes, alphabet, rng::substream(seed, &format!("instance-{attempt}")))?;
        if emission_separation(&chain) < 1e-2 {
            continue;
        }
        let bundle = OperatorBundle::build(&chain, window)?;
        if bundle.rank_ratio() >= 1e-3 {
            return Ok(chain);
        }
    }
    Err(Error::Numerical("no well-conditioned instance found in 1000 draws".into()))
}

/// The fixed instance used by the command line: two binary layers, eight
/// symbols, minimal window half-width 2.
pub fn two_layer_min_window() -> DiscreteHierChain {
    random_valid_chain(&[2, 2], 8, 2, 0).expect("a valid instance exists for this seed")
}

/// Exact law of `x_{t-W..t+W}`; index with `x_{t-W}` most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowJoint {
    pub half_window: usize,
    pub alphabet: usize,
    pub probs: Vec<f64>,
}

impl WindowJoint {
    pub fn length(&self) -> usize {
        2 * self.half_window + 1
    }

    /// Probability of one observation window.
    pub fn prob(&self, xs: &[usize]) -> f64 {
        self.probs[xs.iter().fold(0, |acc, &x| acc * self.alphabet + x)]
    }

    /// Law of the central `2w + 1` symbols (`w <= W`).
    pub fn marginal(&self, w: usize) -> WindowJoint {
        assert!(w <= self.half_window);
        let cut = self.half_window - w;
        let inner = 2 * w + 1;
        let m = self.alphabet;
        let mut probs = vec![0.0; m.pow(inner as u32)];
        let tail = m.pow(cut as u32);
        for (idx, p) in self.probs.iter().enumerate() {
            let middle = (idx / tail) % m.pow(inner as u32);
            probs[middle] += p;
        }
        WindowJoint { half_window: w, alphabet: m, probs }
    }
}

fn checked_pow(base: usize, exp: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base).filter(|&v| v <= ENUMERATION_LIMIT).ok_or_else(|| {
            Error::Overflow(format!("{base}^{exp} exceeds the enumeration limit of {ENUMERATION_LIMIT}"))
        })?;
    }
    Ok(acc)
}

/// Sums over every latent trajectory of the window. Trajectories are first
/// aggregated by their bottom-layer path, which is all the emissions see.
pub fn enumerate_joint(chain: &DiscreteHierChain, half_window: usize) -> Result<WindowJoint> {
    chain.validate()?;
    let n = 2 * half_window + 1;
    let k = chain.joint_size();
    let m = chain.alphabet;
    let trajectories = checked_pow(k, n)?;
    let windows = checked_pow(m, n)?;
    let k1 = chain.bottom_size();
    let t = chain.joint_transition();
    let mut by_bottom = vec![0.0; k1.pow(n as u32)];
    let mut states = vec![0usize; n];
    for code in 0..trajectories {
        let mut c = code;
        for s in states.iter_mut().rev() {
            *s = c % k;
            c /= k;
        }
        let mut p = chain.initial[states[0]];
        for w in states.windows(2) {
            p *= t[(w[0], w[1])];
        }
        if p == 0.0 {
            continue;
        }
        let b = states.iter().fold(0, |acc, &s| acc * k1 + chain.bottom_of(s));
        by_bottom[b] += p;
    }
    let mut probs = vec![0.0; windows];
    let mut path = vec![0usize; n];
    for (b, &weight) in by_bottom.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let mut c = b;
        for z in path.iter_mut().rev() {
            *z = c % k1;
            c /= k1;
        }
        // Outer product of the emission rows along the path.
        let mut acc = vec![weight];
        for &z in &path {
            let row = &chain.emission[z];
            acc = acc.iter().flat_map(|a| row.iter().map(move |e| a * e)).collect();
        }
        for (p, a) in probs.iter_mut().zip(acc) {
            *p += a;
        }
    }
    Ok(WindowJoint { half_window, alphabet: m, probs })
}

/// Window operators and their rank diagnostics.
#[derive(Clone, Debug)]
pub struct OperatorBundle {
    pub half_window: usize,
    pub alphabet: usize,
    /// Number of joint latent states the operators must resolve.
    pub latent_cardinality: usize,
    /// `P(future, past)`: rows index `x_{t+1..t+W}`, columns `x_{t-W..t-1}`.
    pub pair: DMatrix<f64>,
    /// `P(future, x_t = x, past)` for every symbol.
    pub triple: Vec<DMatrix<f64>>,
    /// Singular values of `pair`, descending.
    pub singular_values: Vec<f64>,
    pub rank_ok: bool,
    /// `A(x)` in the coordinates of the leading singular vectors; empty when
    /// the rank check fails.
    pub reduced: Vec<DMatrix<f64>>,
    /// Leading left singular vectors (`m^W x K`).
    pub basis: DMatrix<f64>,
}

impl OperatorBundle {
    pub fn build(chain: &DiscreteHierChain, half_window: usize) -> Result<Self> {
        if half_window == 0 {
            return Err(Error::Config("half window must be at least 1".into()));
        }
        let joint = enumerate_joint(chain, half_window)?;
        let m = chain.alphabet;
        let side = m.pow(half_window as u32);
        let k = chain.joint_size();
        // Index of (past, x, future) = (past * m + x) * side + future.
        let mut triple = vec![DMatrix::zeros(side, side); m];
        for (idx, &p) in joint.probs.iter().enumerate() {
            let future = idx % side;
            let x = (idx / side) % m;
            let past = idx / (side * m);
            triple[x][(future, past)] = p;
        }
        let pair = triple.iter().fold(DMatrix::zeros(side, side), |acc, t| acc + t);
        let svd = SVD::new(pair.clone(), true, true);
        let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
        let rank_ok = k <= side && singular_values[k - 1] > RANK_THRESHOLD * singular_values[0];
        let (mut reduced, mut basis) = (Vec::new(), DMatrix::zeros(side, 0));
        if rank_ok {
            let u = svd.u.as_ref().expect("computed").columns(0, k).into_owned();
            let v = svd.v_t.as_ref().expect("computed").rows(0, k).transpose();
            let inv_sigma = DMatrix::from_diagonal(&DVector::from_iterator(k, singular_values[..k].iter().map(|s| 1.0 / s)));
            reduced = triple.iter().map(|t| u.transpose() * t * &v * &inv_sigma).collect();
            basis = u;
        }
        Ok(OperatorBundle {
            half_window,
            alphabet: m,
            latent_cardinality: k,
            pair,
            triple,
            singular_values,
            rank_ok,
            reduced,
            basis,
        })
    }

    /// `sigma_K / sigma_1` (0 when `K` exceeds the matrix size).
    pub fn rank_ratio(&self) -> f64 {
        let k = self.latent_cardinality;
        match self.singular_values.get(k - 1) {
            Some(s) if self.singular_values[0] > 0.0 => s / self.singular_values[0],
            _ => 0.0,
        }
    }

    /// Max-norm distance of `sum_x A(x)` from the identity.
    pub fn identity_residual(&self) -> Option<f64> {
        let k = self.latent_cardinality;
        let sum = self.reduced.iter().fold(DMatrix::zeros(k, k), |acc, a| acc + a);
        (!self.reduced.is_empty()).then(|| (sum - DMatrix::identity(k, k)).abs().max())
    }
}

/// Result of the joint diagonalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Distinct eigenvalue tuples, each a distribution over symbols.
    pub emissions: Vec<Vec<f64>>,
    /// How many joint latent states share each tuple.
    pub multiplicities: Vec<usize>,
    /// For each tuple, an orthonormal basis (columns, length `m^W`) of the
    /// span of `P(x_{t+1..t+W} | z_t)` over the states sharing it.
    pub future_subspaces: Vec<Vec<Vec<f64>>>,
    pub warnings: Vec<String>,
}

/// Jointly diagonalises `{A(x)}` through the real Schur form of a random
/// convex combination, then groups the per-state eigenvalue tuples.
pub fn recover_emissions(bundle: &OperatorBundle, expected_states: usize, seed: u64) -> Result<Recovery> {
    if !bundle.rank_ok {
        return Err(Error::Numerical(format!(
            "window half-width {} is not injective (sigma_K / sigma_1 = {:.3e}); recovery refused",
            bundle.half_window,
            bundle.rank_ratio()
        )));
    }
    let k = bundle.latent_cardinality;
    let weights = dirichlet_one(bundle.alphabet, &mut rng::chacha(seed));
    let combo = bundle.reduced.iter().zip(&weights).fold(DMatrix::zeros(k, k), |acc, (a, w)| acc + a * *w);
    let (q, _) = Schur::new(combo.clone()).unpack();
    let tuples: Vec<Vec<f64>> = {
        let diag: Vec<DMatrix<f64>> = bundle.reduced.iter().map(|a| q.transpose() * a * &q).collect();
        (0..k).map(|j| diag.iter().map(|d| d[(j, j)]).collect()).collect()
    };
    let mut emissions: Vec<Vec<f64>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (j, t) in tuples.iter().enumerate() {
        let found = emissions
            .iter()
            .position(|e| e.iter().zip(t).all(|(a, b)| (a - b).abs() < CLUSTER_TOL));
        match found {
            Some(c) => members[c].push(j),
            None => {
                emissions.push(t.clone());
                members.push(vec![j]);
            }
        }
    }
    // Average within clusters and renormalise.
    for (e, idx) in emissions.iter_mut().zip(&members) {
        for (x, v) in e.iter_mut().enumerate() {
            *v = idx.iter().map(|&j| tuples[j][x]).sum::<f64>() / idx.len() as f64;
        }
        let s: f64 = e.iter().sum();
        e.iter_mut().for_each(|v| *v /= s);
    }
    let mut warnings = Vec::new();
    if emissions.len() < expected_states {
        warnings.push(format!(
            "eigenvalue collision: {} distinct emission tuples for {expected_states} emitting states",
            emissions.len()
        ));
    }
    // Eigenspace of the combination for each cluster, lifted to the
    // observation space.
    let mut future_subspaces = Vec::with_capacity(emissions.len());
    for idx in &members {
        let lambda = idx.iter().map(|&j| tuples[j].iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()).sum::<f64>()
            / idx.len() as f64;
        let shifted = &combo - DMatrix::identity(k, k) * lambda;
        let svd = SVD::new(shifted, false, true);
        let v_t = svd.v_t.expect("computed");
        let dim = idx.len();
        let mut cols = Vec::with_capacity(dim);
        for r in (k - dim)..k {
            let lifted = &bundle.basis * v_t.row(r).transpose();
            cols.push(lifted.iter().copied().collect());
        }
        future_subspaces.push(cols);
    }
    Ok(Recovery { emissions, multiplicities: members.iter().map(Vec::len).collect(), future_subspaces, warnings })
}

/// Comparison of recovered and true emission columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `permutation[i]` is the recovered tuple matched to true state `i`.
    pub permutation: Vec<usize>,
    pub max_abs_error: f64,
    pub hausdorff: f64,
    /// Largest distance from a true future-law column to the recovered
    /// subspace of its matched tuple.
    pub subspace_residual: f64,
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `P(x_{t+1..t+W} | joint state)` as columns of an `m^W x K` matrix.
pub fn future_law(chain: &DiscreteHierChain, half_window: usize) -> DMatrix<f64> {
    let k = chain.joint_size();
    let m = chain.alphabet;
    let t = chain.joint_transition();
    let side = m.pow(half_window as u32);
    let e = DMatrix::from_fn(k, m, |s, x| chain.emission[chain.bottom_of(s)][x]);
    let mut out = DMatrix::zeros(side, k);
    for s in 0..k {
        // Forward filter over the future symbols, starting from state s.
        for idx in 0..side {
            let mut alpha = DVector::from_fn(k, |j, _| if j == s { 1.0 } else { 0.0 });
            let mut rest = idx;
            let mut xs = vec![0; half_window];
            for x in xs.iter_mut().rev() {
                *x = rest % m;
                rest /= m;
            }
            for &x in &xs {
                alpha = t.transpose() * alpha;
                alpha.component_mul_assign(&e.column(x));
            }
            out[(idx, s)] = alpha.sum();
        }
    }
    out
}

/// Matches recovered tuples to the true emission rows.
pub fn compare_recovery(chain: &DiscreteHierChain, bundle: &OperatorBundle, rec: &Recovery) -> Result<RecoveryReport> {
    let truth = &chain.emission;
    if rec.emissions.len() != truth.len() {
        return Err(Error::Numerical(format!(
            "recovered {} distinct emission tuples, chain has {} emitting states",
            rec.emissions.len(),
            truth.len()
        )));
    }
    let cost: Vec<Vec<f64>> = truth.iter().map(|t| rec.emissions.iter().map(|e| max_abs(t, e)).collect()).collect();
    let permutation = min_cost_assignment(&cost);
    let max_abs_error = permutation.iter().enumerate().map(|(i, &j)| cost[i][j]).fold(0.0, f64::max);
    let directed = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter().map(|x| b.iter().map(|y| max_abs(x, y)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    let hausdorff = directed(truth, &rec.emissions).max(directed(&rec.emissions, truth));
    let f = future_law(chain, bundle.half_window);
    let mut subspace_residual: f64 = 0.0;
    for s in 0..chain.joint_size() {
        let basis = &rec.future_subspaces[permutation[chain.bottom_of(s)]];
        let col = f.column(s).into_owned();
        let mut resid = col.clone();
        for b in basis {
            let b = DVector::from_column_slice(b);
            resid -= &b * b.dot(&col);
        }
        subspace_residual = subspace_residual.max(resid.norm() / col.norm().max(f64::MIN_POSITIVE));
    }
    Ok(RecoveryReport { permutation, max_abs_error, hausdorff, subspace_residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub half_window: usize,
    pub rank_ok: bool,
    pub rank_ratio: f64,
    /// Emission recovery error when the rank check passes.
    pub error: Option<f64>,
    pub warnings: Vec<String>,
}

/// Rank diagnostics and recovery error for each half-width in `windows`.
pub fn minimal_window_sweep(chain: &DiscreteHierChain, windows: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Vec<SweepRow>> {
    windows
        .map(|w| {
            let bundle = OperatorBundle::build(chain, w)?;
            let (error, warnings) = if bundle.rank_ok {
                let rec = recover_emissions(&bundle, chain.bottom_size(), seed)?;
                let err = compare_recovery(chain, &bundle, &rec).map(|r| r.max_abs_error).ok();
                (err, rec.warnings)
            } else {
                (None, Vec::new())
            };
            Ok(SweepRow { half_window: w, rank_ok: bundle.rank_ok, rank_ratio: bundle.rank_ratio(), error, warnings })
        })
        .collect()
}

/// Smallest half-width whose rank check passes.
pub fn transition_point(rows: &[SweepRow]) -> Option<usize> {
    rows.iter().find(|r| r.rank_ok).map(|r| r.half_window)
}

/// CSV with header `W,rank_ok,error`; the error is empty when not computed.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("W,rank_ok,error\n");
    for r in rows {
        let e = r.error.map(|e| format!("{e:.3e}")).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.half_window, r.rank_ok, e));
    }
    s
}

/// Outcome of recovering one random instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub seed: u64,
    pub report: RecoveryReport,
    pub identity_residual: f64,
    pub warnings: Vec<String>,
}

/// Draws `count` valid instances and recovers each at `half_window`,
/// in parallel.
pub fn verify_random_instances(
    state_sizes: &[usize],
    alphabet: usize,
    half_window: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<InstanceResult>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = rng::substream(seed, &format!("spectral-{i}"));
            let chain = random_valid_chain(state_sizes, alphabet, half_window, s)?;
            let bundle = OperatorBundle::build(&chain, half_window)?;
            let rec = recover_emissions(&bundle, chain.bottom_size(), s)?;
            let report = compare_recovery(&chain, &bundle, &rec)?;
            Ok(InstanceResult {
                seed: s,
                report,
                identity_residual: bundle.identity_residual().unwrap_or(f64::NAN),
                warnings: rec.warnings,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
