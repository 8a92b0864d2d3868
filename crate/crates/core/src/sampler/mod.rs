//! Adaptive Metropolis-within-Gibbs engine.
//!
//! Parameters live on an unconstrained scale: positive parameters are moved
//! on the log scale and interval-bounded parameters on the logit-of-interval
//! scale, with the Jacobian folded into the acceptance ratio. Each sweep
//! visits every block once in order. Blocks are one of
//!
//! * a joint Gaussian random walk on a set of coordinates, whose proposal
//!   covariance is learned from the burn-in draws,
//! * the same walk projected so the coordinates' sum is unchanged, which
//!   keeps sum-to-zero constraints exact,
//! * a one-dimensional walk along a fixed direction, for moves along ridges
//!   of the target that single-block updates traverse slowly.
//!
//! Step sizes adapt by Robbins-Monro toward the target acceptance rate during
//! burn-in and are frozen afterwards, so retained draws come from a fixed
//! kernel. Chains run in parallel on independent random streams derived from
//! the master seed.

pub mod diagnostics;
pub mod io;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diagnostics::{ess, rhat, summarize, Diagnostic, ParamDiagnostics, ParamSummary};

/// Log density of the target on the constrained scale, up to a constant.
///
/// A target may also expose itself as a sum of terms. The sampler then keeps
/// the current value of every term and re-evaluates only the terms a block
/// can change. The terms must add up to `log_density`.
pub trait LogDensity: Sync {
    fn log_density(&self, x: &[f64]) -> f64;

    /// Number of additive terms, or 0 when the density is only evaluated whole.
    fn n_terms(&self) -> usize {
        0
    }

    fn term(&self, _k: usize, _x: &[f64]) -> f64 {
        f64::NAN
    }

    /// Terms that depend on any of `coords`.
    fn terms_touching(&self, _coords: &[usize]) -> Vec<usize> {
        Vec::new()
    }
}

impl<F> LogDensity for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn log_density(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Positive parameter, sampled as `ln x`.
    Log,
    /// Parameter on `[lo, hi]`, sampled as `logit((x - lo) / (hi - lo))`.
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl Transform {
    #[inline]
    pub fn constrain(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => z,
            Transform::Log => z.exp(),
            Transform::Interval { lo, hi } => lo + (hi - lo) * logistic(z),
        }
    }

    #[inline]
    pub fn unconstrain(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Interval { lo, hi } => {
                let p = (x - lo) / (hi - lo);
                (p / (1.0 - p)).ln()
            }
        }
    }

    /// `ln |dx/dz|`.
    #[inline]
    pub fn ln_jacobian(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Log => z,
            Transform::Interval { lo, hi } => {
                // ln p + ln(1-p) computed stably from z
                (hi - lo).ln() - softplus(-z) - softplus(z)
            }
        }
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Names and transforms of every coordinate of the parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSpace {
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
}

impl ParamSpace {
    pub fn push(&mut self, name: impl Into<String>, transform: Transform) -> usize {
        self.names.push(name.into());
        self.transforms.push(transform);
        self.names.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionTerm {
    pub coord: usize,
    pub weight: f64,
    /// Move `x *= exp(eps * weight)` instead of `x += eps * weight`.
    pub multiplicative: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind {
    Joint(Vec<usize>),
    SumPreserving(Vec<usize>),
    /// Symmetric walk `eps ~ N(0, step^2)` along a fixed direction on the
    /// constrained scale, multiplicative terms acting on the log scale.
    Direction(Vec<DirectionTerm>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub initial_step: Option<f64>,
    /// Learn a proposal covariance from burn-in draws. Only useful when the
    /// block is close to independent of the rest of the vector, since the
    /// empirical covariance is marginal rather than conditional.
    pub adapt_shape: bool,
    /// Terms of a split target that the block can change, when fewer than
    /// its coordinates suggest, as for moves that leave the likelihood
    /// unchanged.
    pub terms: Option<Vec<usize>>,
}

impl Block {
    pub fn joint(name: impl Into<String>, coords: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            kind: BlockKind::Joint(coords),
            initial_step: None,
            adapt_shape: false,
            terms: None,
        }
    }

    pub fn scalar(name: impl Into<String>, coord: usize) -> Self {
        Self::joint(name, vec![coord])
    }

    pub fn sum_preserving(name: impl Into<String>, coords: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            kind: BlockKind::SumPreserving(coords),
            initial_step: None,
            adapt_shape: false,
            terms: None,
        }
    }

    /// Additive direction `x_i += eps * w_i`.
    pub fn direction(name: impl Into<String>, weights: Vec<(usize, f64)>) -> Self {
        Self::direction_mixed(name, weights, Vec::new())
    }

    /// Direction with additive terms and multiplicative (log-scale) terms.
    pub fn direction_mixed(
        name: impl Into<String>,
        additive: Vec<(usize, f64)>,
        multiplicative: Vec<(usize, f64)>,
    ) -> Self {
        let terms = additive
            .into_iter()
            .map(|(coord, weight)| DirectionTerm {
                coord,
                weight,
                multiplicative: false,
            })
            .chain(multiplicative.into_iter().map(|(coord, weight)| DirectionTerm {
                coord,
                weight,
                multiplicative: true,
            }))
            .collect();
        Self {
            name: name.into(),
            kind: BlockKind::Direction(terms),
            initial_step: None,
            adapt_shape: false,
            terms: None,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.initial_step = Some(step);
        self
    }

    pub fn with_terms(mut self, terms: Vec<usize>) -> Self {
        self.terms = Some(terms);
        self
    }

    pub fn with_adaptive_shape(mut self) -> Self {
        self.adapt_shape = true;
        self
    }

    /// Coordinates touched by the block.
    pub fn coords(&self) -> Vec<usize> {
        match &self.kind {
            BlockKind::Joint(c) | BlockKind::SumPreserving(c) => c.clone(),
            BlockKind::Direction(w) => w.iter().map(|t| t.coord).collect(),
        }
    }

    fn proposal_dim(&self) -> usize {
        match &self.kind {
            BlockKind::Joint(c) => c.len(),
            BlockKind::SumPreserving(c) => c.len().saturating_sub(1).max(1),
            BlockKind::Direction(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
    /// Target acceptance for multi-dimensional blocks.
    pub target_accept: f64,
    /// Target acceptance for one-dimensional blocks.
    pub target_accept_scalar: f64,
    pub initial_step: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 20_000,
            burn_in: 10_000,
            thin: 10,
            seed: 20_250_101,
            adapt_window: 100,
            target_accept: 0.3,
            target_accept_scalar: 0.44,
            initial_step: 0.1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.chains == 0 {
            problems.push("chains must be positive".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be positive".to_string());
        }
        if self.burn_in >= self.iterations {
            problems.push(format!(
                "burn_in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            ));
        }
        if self.thin == 0 {
            problems.push("thin must be at least 1".to_string());
        }
        if self.adapt_window == 0 {
            problems.push("adapt_window must be positive".to_string());
        }
        for (name, v) in [
            ("target_accept", self.target_accept),
            ("target_accept_scalar", self.target_accept_scalar),
        ] {
            if !(v > 0.0 && v < 1.0) {
                problems.push(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.initial_step > 0.0) {
            problems.push("initial_step must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Independent random stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// Retained draws, row-major `draw * dim + param`, constrained scale.
    pub values: Vec<f64>,
    /// Iteration number of each retained draw.
    pub iterations: Vec<usize>,
    /// Post-burn-in acceptance rate per block.
    pub accept_rate: Vec<f64>,
    pub steps_at_burn_in_end: Vec<f64>,
    pub steps_final: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub block_names: Vec<String>,
    /// Index of the first block that updates each parameter, if any.
    pub param_block: Vec<Option<usize>>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.iterations.len())
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of one parameter, per chain.
    pub fn param(&self, p: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.chains
            .iter()
            .map(|c| c.values.iter().skip(p).step_by(d).copied().collect())
            .collect()
    }

    /// Draws of one parameter pooled over chains.
    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.param(p).concat()
    }

    /// Applies `f` to every retained draw vector, per chain.
    pub fn map_draws<T>(&self, mut f: impl FnMut(&[f64]) -> T) -> Vec<Vec<T>> {
        let d = self.dim();
        self.chains
            .iter()
            .map(|c| c.values.chunks_exact(d).map(&mut f).collect())
            .collect()
    }

    pub fn accept_rate(&self, p: usize) -> Option<f64> {
        let b = self.param_block.get(p).copied().flatten()?;
        let n = self.chains.len() as f64;
        Some(self.chains.iter().map(|c| c.accept_rate[b]).sum::<f64>() / n)
    }
}

/// Runs `config.chains` chains, each started from its own initial vector.
pub fn run_chains<T: LogDensity + ?Sized>(
    target: &T,
    space: &ParamSpace,
    init: &[Vec<f64>],
    blocks: &[Block],
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if init.len() != config.chains {
        return Err(Error::Config(format!(
            "{} initial vectors for {} chains",
            init.len(),
            config.chains
        )));
    }
    let dim = space.dim();
    for (i, x) in init.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Config(format!(
                "initial vector {i} has length {}, expected {dim}",
                x.len()
            )));
        }
    }
    for b in blocks {
        if b.coords().iter().any(|&c| c >= dim) {
            return Err(Error::Config(format!(
                "block `{}` references a coordinate outside the parameter space",
                b.name
            )));
        }
        if b.terms.iter().flatten().any(|&k| k >= target.n_terms()) {
            return Err(Error::Config(format!(
                "block `{}` references a term the target does not have",
                b.name
            )));
        }
    }

    let chains = (0..config.chains)
        .into_par_iter()
        .map(|chain| run_one(target, space, &init[chain], blocks, config, chain))
        .collect::<Result<Vec<_>>>()?;

    let mut param_block = vec![None; dim];
    for (bi, b) in blocks.iter().enumerate() {
        for c in b.coords() {
            param_block[c].get_or_insert(bi);
        }
    }
    Ok(PosteriorDraws {
        names: space.names.clone(),
        block_names: blocks.iter().map(|b| b.name.clone()).collect(),
        param_block,
        chains,
    })
}

struct BlockState {
    log_step: f64,
    target: f64,
    /// Lower Cholesky factor of the proposal shape; `None` means identity.
    chol: Option<DMatrix<f64>>,
    accepted: u64,
    proposed: u64,
    // running moments of the block coordinates for covariance adaptation
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

struct ChainState<'a, T: ?Sized> {
    target: &'a T,
    transforms: &'a [Transform],
    z: Vec<f64>,
    x: Vec<f64>,
    lp_target: f64,
    ljac: f64,
    /// Current value of every term, for targets that split.
    terms: Vec<f64>,
    chain: usize,
}

impl<T: LogDensity + ?Sized> ChainState<'_, T> {
    fn current(&self) -> f64 {
        self.lp_target + self.ljac
    }

    fn dump(&self, names: &[String]) -> String {
        names
            .iter()
            .zip(&self.x)
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Metropolis step. `Move::Unconstrained` increments act on `z` and the
    /// ratio uses the `z`-scale density; `Move::Constrained` proposals act on
    /// `x` and the ratio uses the `x`-scale density times the Jacobian of
    /// any multiplicative terms.
    fn try_move(
        &mut self,
        moves: &[Move],
        touched: Option<&[usize]>,
        rng: &mut ChaCha8Rng,
        scratch: &mut Vec<(usize, f64, f64)>,
        old_terms: &mut Vec<f64>,
    ) -> std::result::Result<bool, ()> {
        scratch.clear();
        let mut ljac_new = self.ljac;
        // extra log factor for constrained-scale proposals
        let mut correction = 0.0;
        let mut outside = false;
        for mv in moves {
            let (i, x_new, z_new) = match *mv {
                Move::Unconstrained(i, dz) => {
                    let z_new = self.z[i] + dz;
                    (i, self.transforms[i].constrain(z_new), z_new)
                }
                Move::Additive(i, dx) => {
                    let x_new = self.x[i] + dx;
                    (i, x_new, self.transforms[i].unconstrain(x_new))
                }
                Move::Multiplicative(i, dlog) => {
                    let x_new = self.x[i] * dlog.exp();
                    correction += dlog;
                    (i, x_new, self.transforms[i].unconstrain(x_new))
                }
            };
            let tr = self.transforms[i];
            if !z_new.is_finite() {
                outside = true;
            }
            if !matches!(mv, Move::Unconstrained(..)) {
                correction += tr.ln_jacobian(self.z[i]) - tr.ln_jacobian(z_new);
            }
            ljac_new += tr.ln_jacobian(z_new) - tr.ln_jacobian(self.z[i]);
            scratch.push((i, self.x[i], self.z[i]));
            self.z[i] = z_new;
            self.x[i] = x_new;
        }
        old_terms.clear();
        let lp_new = if outside {
            f64::NEG_INFINITY
        } else if let Some(touched) = touched {
            for &k in touched {
                old_terms.push(self.terms[k]);
                self.terms[k] = self.target.term(k, &self.x);
            }
            self.terms.iter().sum()
        } else {
            self.target.log_density(&self.x)
        };
        if lp_new.is_nan() || (!outside && ljac_new.is_nan()) {
            return Err(());
        }
        let log_ratio = lp_new + ljac_new + correction - self.current();
        let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
        if accept && lp_new.is_finite() && ljac_new.is_finite() {
            self.lp_target = lp_new;
            self.ljac = ljac_new;
            Ok(true)
        } else {
            for &(i, x_old, z_old) in scratch.iter().rev() {
                self.x[i] = x_old;
                self.z[i] = z_old;
            }
            if let Some(touched) = touched {
                for (&k, &old) in touched.iter().zip(old_terms.iter()) {
                    self.terms[k] = old;
                }
            }
            Ok(false)
        }
    }
}

fn run_one<T: LogDensity + ?Sized>(
    target: &T,
    space: &ParamSpace,
    init: &[f64],
    blocks: &[Block],
    config: &McmcConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let dim = space.dim();
    let mut rng = stream_rng(config.seed, chain as u64);
    let z: Vec<f64> = init
        .iter()
        .zip(&space.transforms)
        .map(|(&x, t)| t.unconstrain(x))
        .collect();
    let x: Vec<f64> = z.iter().zip(&space.transforms).map(|(&z, t)| t.constrain(z)).collect();
    let terms: Vec<f64> = (0..target.n_terms()).map(|k| target.term(k, &x)).collect();
    let lp_target = if terms.is_empty() {
        target.log_density(&x)
    } else {
        terms.iter().sum()
    };
    let ljac: f64 = z.iter().zip(&space.transforms).map(|(&z, t)| t.ln_jacobian(z)).sum();
    if !lp_target.is_finite() || !ljac.is_finite() {
        return Err(Error::Initialization {
            chain,
            value: lp_target,
        });
    }
    let mut state = ChainState {
        target,
        transforms: &space.transforms,
        z,
        x,
        lp_target,
        ljac,
        terms,
        chain,
    };
    let touched: Vec<Option<Vec<usize>>> = blocks
        .iter()
        .map(|b| (target.n_terms() > 0).then(|| b.terms.clone().unwrap_or_else(|| target.terms_touching(&b.coords()))))
        .collect();

    let mut bstates: Vec<BlockState> = blocks
        .iter()
        .map(|b| {
            let k = b.coords().len();
            let target = if b.proposal_dim() > 1 {
                config.target_accept
            } else {
                config.target_accept_scalar
            };
            BlockState {
                log_step: b.initial_step.unwrap_or(config.initial_step).ln(),
                target,
                chol: None,
                accepted: 0,
                proposed: 0,
                n: 0.0,
                mean: DVector::zeros(k),
                m2: DMatrix::zeros(k, k),
            }
        })
        .collect();

    let retained = config.retained_per_chain();
    let mut values = Vec::with_capacity(retained * dim);
    let mut iterations = Vec::with_capacity(retained);
    let mut steps_at_burn_in_end = Vec::new();
    let mut moves: Vec<Move> = Vec::new();
    let mut scratch = Vec::new();
    let mut old_terms = Vec::new();
    let moment_start = config.burn_in / 4;

    for it in 0..config.iterations {
        let adapting = it < config.burn_in;
        if it == config.burn_in {
            steps_at_burn_in_end = bstates.iter().map(|b| b.log_step.exp()).collect();
            for b in &mut bstates {
                b.accepted = 0;
                b.proposed = 0;
            }
        }
        for ((block, bs), touched) in blocks.iter().zip(bstates.iter_mut()).zip(&touched) {
            propose(block, bs, &mut rng, &mut moves);
            let accepted = state
                .try_move(&moves, touched.as_deref(), &mut rng, &mut scratch, &mut old_terms)
                .map_err(|_| Error::NanTarget {
                    chain: state.chain,
                    iteration: it,
                    block: block.name.clone(),
                    state: state.dump(&space.names),
                })?;
            bs.proposed += 1;
            if accepted {
                bs.accepted += 1;
            }
            if adapting {
                let gain = (1.0 + it as f64 / config.adapt_window as f64).powf(-0.6);
                let a = if accepted { 1.0 } else { 0.0 };
                bs.log_step = (bs.log_step + gain * (a - bs.target)).clamp(-30.0, 10.0);
            }
        }

        if adapting && it >= moment_start {
            for (block, bs) in blocks.iter().zip(bstates.iter_mut()) {
                if block.adapt_shape && block.proposal_dim() > 1 {
                    accumulate_moments(bs, &block.coords(), &state.z);
                    if (it + 1) % config.adapt_window == 0 {
                        refresh_proposal_shape(bs, block);
                    }
                }
            }
        }

        if !adapting && (it - config.burn_in).is_multiple_of(config.thin) {
            values.extend_from_slice(&state.x);
            iterations.push(it);
        }
    }

    Ok(ChainDraws {
        values,
        iterations,
        accept_rate: bstates
            .iter()
            .map(|b| {
                if b.proposed == 0 {
                    0.0
                } else {
                    b.accepted as f64 / b.proposed as f64
                }
            })
            .collect(),
        steps_at_burn_in_end,
        steps_final: bstates.iter().map(|b| b.log_step.exp()).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
enum Move {
    Unconstrained(usize, f64),
    Additive(usize, f64),
    Multiplicative(usize, f64),
}

fn propose(block: &Block, bs: &BlockState, rng: &mut ChaCha8Rng, moves: &mut Vec<Move>) {
    moves.clear();
    let step = bs.log_step.exp();
    match &block.kind {
        BlockKind::Direction(terms) => {
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * step;
            moves.extend(terms.iter().map(|t| {
                if t.multiplicative {
                    Move::Multiplicative(t.coord, e * t.weight)
                } else {
                    Move::Additive(t.coord, e * t.weight)
                }
            }));
        }
        BlockKind::Joint(coords) | BlockKind::SumPreserving(coords) => {
            let k = coords.len();
            let xi: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let mut inc: Vec<f64> = match &bs.chol {
                None => xi.iter().map(|v| v * step).collect(),
                Some(l) => (0..k)
                    .map(|r| step * (0..=r).map(|c| l[(r, c)] * xi[c]).sum::<f64>())
                    .collect(),
            };
            if matches!(block.kind, BlockKind::SumPreserving(_)) {
                let m = inc.iter().sum::<f64>() / k as f64;
                inc.iter_mut().for_each(|v| *v -= m);
            }
            moves.extend(coords.iter().zip(inc).map(|(&c, dz)| Move::Unconstrained(c, dz)));
        }
    }
}

fn accumulate_moments(bs: &mut BlockState, coords: &[usize], z: &[f64]) {
    let v = DVector::from_iterator(coords.len(), coords.iter().map(|&c| z[c]));
    bs.n += 1.0;
    let delta = &v - &bs.mean;
    bs.mean += &delta / bs.n;
    let delta2 = &v - &bs.mean;
    bs.m2 += &delta * delta2.transpose();
}

/// Replaces the proposal shape by the Cholesky factor of the empirical
/// covariance, scaled by `2.38^2 / d`. The first switch from the identity
/// shape resets the step multiplier to one.
fn refresh_proposal_shape(bs: &mut BlockState, block: &Block) {
    let k = bs.mean.len();
    if bs.n < (20 * k).max(50) as f64 {
        return;
    }
    let d = block.proposal_dim() as f64;
    let mut cov = &bs.m2 / (bs.n - 1.0);
    let jitter = 1e-8 * (cov.trace() / k as f64).max(1e-300);
    for i in 0..k {
        cov[(i, i)] += jitter;
    }
    cov *= 2.38 * 2.38 / d;
    if let Some(ch) = nalgebra::Cholesky::new(cov) {
        if bs.chol.is_none() {
            bs.log_step = 0.0;
        }
        bs.chol = Some(ch.l());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(chains: usize, iterations: usize, burn_in: usize, thin: usize) -> McmcConfig {
        McmcConfig {
            chains,
            iterations,
            burn_in,
            thin,
            seed: 7,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn interval_transform_round_trip_and_jacobian() {
        let t = Transform::Interval { lo: 0.4, hi: 1.0 };
        let x = 0.73;
        let z = t.unconstrain(x);
        assert!((t.constrain(z) - x).abs() < 1e-14);
        // finite-difference Jacobian
        let h = 1e-6;
        let fd = (t.constrain(z + h) - t.constrain(z - h)) / (2.0 * h);
        assert!((t.ln_jacobian(z) - fd.ln()).abs() < 1e-8);
        let l = Transform::Log;
        assert!((l.ln_jacobian(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sum_preserving_block_keeps_sum() {
        let target = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let mut space = ParamSpace::default();
        for i in 0..4 {
            space.push(format!("x{i}"), Transform::Identity);
        }
        let init = vec![vec![0.5, -0.25, -0.25, 0.0]];
        let blocks = vec![Block::sum_preserving("x", vec![0, 1, 2, 3])];
        let out = run_chains(&target, &space, &init, &blocks, &quick_config(1, 2000, 500, 1)).unwrap();
        for row in out.chains[0].values.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn steps_frozen_after_burn_in() {
        let target = |x: &[f64]| -0.5 * x[0] * x[0] - 0.5 * (x[1] - x[0]).powi(2);
        let mut space = ParamSpace::default();
        space.push("a", Transform::Identity);
        space.push("b", Transform::Identity);
        let blocks = vec![Block::joint("ab", vec![0, 1]), Block::scalar("a", 0)];
        let out = run_chains(
            &target,
            &space,
            &[vec![0.0, 0.0], vec![0.1, 0.1]],
            &blocks,
            &quick_config(2, 3000, 1000, 2),
        )
        .unwrap();
        for c in &out.chains {
            assert_eq!(c.steps_at_burn_in_end, c.steps_final);
            assert_eq!(c.iterations.len(), 1000);
            assert_eq!(c.iterations[0], 1000);
        }
    }

    #[test]
    fn init_at_impossible_point_fails() {
        let target = |x: &[f64]| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY };
        let mut space = ParamSpace::default();
        space.push("x", Transform::Identity);
        let err = run_chains(
            &target,
            &space,
            &[vec![-1.0]],
            &[Block::scalar("x", 0)],
            &quick_config(1, 10, 5, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Initialization { chain: 0, .. }));
    }

    #[test]
    fn nan_target_aborts_with_dump() {
        let target = |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { -x[0] * x[0] };
        let mut space = ParamSpace::default();
        space.push("theta", Transform::Identity);
        let err = run_chains(
            &target,
            &space,
            &[vec![0.0]],
            &[Block::scalar("x", 0).with_step(2.0)],
            &quick_config(1, 1000, 10, 1),
        )
        .unwrap_err();
        match err {
            Error::NanTarget { state, .. } => assert!(state.contains("theta=")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = quick_config(1, 100, 100, 1);
        assert!(cfg.validate().is_err());
        let cfg = McmcConfig {
            thin: 0,
            ..McmcConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
