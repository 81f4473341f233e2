use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MrfoError;

/// Source of uniform draws in [0, 1).
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl UniformSource for ChaCha8Rng {
    fn next_uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrfoConfig {
    pub pop_size: usize,
    pub iters: usize,
    pub bounds: Vec<(f64, f64)>,
    /// Somersault factor S.
    pub somersault: f64,
    pub seed: u64,
}

impl MrfoConfig {
    /// Same `(lo, hi)` box in every dimension.
    pub fn uniform(dim: usize, lo: f64, hi: f64, pop_size: usize, iters: usize, seed: u64) -> Self {
        Self { pop_size, iters, bounds: vec![(lo, hi); dim], somersault: 2.0, seed }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<(), MrfoError> {
        if self.pop_size < 2 {
            return Err(MrfoError::InvalidConfig(format!("population {}", self.pop_size)));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(MrfoError::InvalidConfig("bounds must be finite with lo < hi".into()));
        }
        if !(self.somersault > 0.0) {
            return Err(MrfoError::InvalidConfig(format!("somersault factor {}", self.somersault)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub positions: Vec<Vec<f64>>,
    pub fitness: Vec<f64>,
    pub best: Vec<f64>,
    pub best_fitness: f64,
}

impl Population {
    /// Evaluates `positions` and records the best (first on ties).
    pub fn evaluate<F>(positions: Vec<Vec<f64>>, fitness: &mut F) -> Result<Self, MrfoError>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let fit = positions.iter().map(|p| checked(fitness, p)).collect::<Result<Vec<_>, _>>()?;
        let mut b = 0;
        for (i, f) in fit.iter().enumerate() {
            if *f < fit[b] {
                b = i;
            }
        }
        Ok(Self { best: positions[b].clone(), best_fitness: fit[b], positions, fitness: fit })
    }

    fn absorb_best(&mut self) {
        for (p, &f) in self.positions.iter().zip(&self.fitness) {
            if f < self.best_fitness {
                self.best_fitness = f;
                self.best = p.clone();
            }
        }
    }
}

fn checked<F: FnMut(&[f64]) -> f64>(fitness: &mut F, x: &[f64]) -> Result<f64, MrfoError> {
    let f = fitness(x);
    if f.is_finite() {
        Ok(f)
    } else {
        Err(MrfoError::NonFiniteFitness(x.to_vec()))
    }
}

fn clamp(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// One MRFO iteration `t` of `total` (1-based).
///
/// Draw order per individual `i`, which pinned test streams rely on:
/// the phase coin; for cyclone foraging `r1`, the reference coin, the random
/// reference point (one draw per dimension, only when exploring), then `r`
/// per dimension; for chain foraging `r` per dimension. The somersault pass
/// then draws `r2`, `r3` once per individual.
///
/// Each phase evaluates the moved individuals and keeps a move only when it
/// improves that individual's fitness; the best is refreshed after each phase.
pub fn mrfo_step<F>(
    pop: &mut Population,
    t: usize,
    total: usize,
    bounds: &[(f64, f64)],
    somersault: f64,
    fitness: &mut F,
    rng: &mut dyn UniformSource,
) -> Result<(), MrfoError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(1 <= t && t <= total, "iteration {t} outside 1..={total}");
    let n = pop.positions.len();
    let dim = bounds.len();
    let old = &pop.positions;
    let best = &pop.best;
    let mut moved = Vec::with_capacity(n);
    for i in 0..n {
        let x = &old[i];
        let mut y = vec![0.0; dim];
        if rng.next_uniform() < 0.5 {
            let r1 = rng.next_uniform();
            let beta = 2.0 * (r1 * (total - t + 1) as f64 / total as f64).exp() * (2.0 * PI * r1).sin();
            let reference: Vec<f64> = if t as f64 / total as f64 > rng.next_uniform() {
                best.clone()
            } else {
                bounds.iter().map(|(lo, hi)| lo + rng.next_uniform() * (hi - lo)).collect()
            };
            let prev = if i == 0 { &reference } else { &old[i - 1] };
            for d in 0..dim {
                let r = rng.next_uniform();
                y[d] = reference[d] + r * (prev[d] - x[d]) + beta * (reference[d] - x[d]);
            }
        } else {
            let prev = if i == 0 { best } else { &old[i - 1] };
            for d in 0..dim {
                let r = rng.next_uniform();
                // r·sqrt|ln r| tends to 0 as r -> 0
                let alpha = if r > 0.0 { 2.0 * r * r.ln().abs().sqrt() } else { 0.0 };
                y[d] = x[d] + r * (prev[d] - x[d]) + alpha * (best[d] - x[d]);
            }
        }
        clamp(&mut y, bounds);
        moved.push(y);
    }
    greedy_replace(pop, moved, fitness)?;
    pop.absorb_best();

    let best = pop.best.clone();
    let mut moved = Vec::with_capacity(n);
    for x in &pop.positions {
        let r2 = rng.next_uniform();
        let r3 = rng.next_uniform();
        let mut y: Vec<f64> = (0..dim).map(|d| x[d] + somersault * (r2 * best[d] - r3 * x[d])).collect();
        clamp(&mut y, bounds);
        moved.push(y);
    }
    greedy_replace(pop, moved, fitness)?;
    pop.absorb_best();
    Ok(())
}

fn greedy_replace<F>(pop: &mut Population, moved: Vec<Vec<f64>>, fitness: &mut F) -> Result<(), MrfoError>
where
    F: FnMut(&[f64]) -> f64,
{
    for (i, y) in moved.into_iter().enumerate() {
        let f = checked(fitness, &y)?;
        if f < pop.fitness[i] {
            pop.fitness[i] = f;
            pop.positions[i] = y;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrfoResult {
    pub best: Vec<f64>,
    pub best_fitness: f64,
    /// Best fitness after initialization, then after each iteration.
    pub history: Vec<f64>,
}

/// Minimizes `fitness` over the configured box.
pub fn mrfo_optimize<F>(mut fitness: F, config: &MrfoConfig) -> Result<MrfoResult, MrfoError>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<Vec<f64>> = (0..config.pop_size)
        .map(|_| config.bounds.iter().map(|(lo, hi)| lo + rng.next_uniform() * (hi - lo)).collect())
        .collect();
    let mut pop = Population::evaluate(init, &mut fitness)?;
    let mut history = vec![pop.best_fitness];
    for t in 1..=config.iters {
        mrfo_step(&mut pop, t, config.iters, &config.bounds, config.somersault, &mut fitness, &mut rng)?;
        history.push(pop.best_fitness);
    }
    Ok(MrfoResult { best: pop.best, best_fitness: pop.best_fitness, history })
}
