//! Shapley values of cooperative games over at most 63 players, with
//! coalitions encoded as bit masks.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default largest player count for exact evaluation.
pub const EXACT_CAP: usize = 12;

pub trait Game: Sync {
    fn players(&self) -> usize;

    /// Characteristic value of the coalition whose members are the set bits.
    fn value(&self, coalition: u64) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub permutations: usize,
}

fn check_player<G: Game + ?Sized>(game: &G, player: usize) -> Result<usize> {
    let n = game.players();
    if n > 63 {
        return Err(Error::Config(format!(
            "{n} players exceed the 63-player limit"
        )));
    }
    if player >= n {
        return Err(Error::Config(format!(
            "player {player} out of range for {n} players"
        )));
    }
    Ok(n)
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

/// v over all 2ⁿ coalitions, evaluated in parallel.
pub fn value_table<G: Game + ?Sized>(game: &G, cap: usize) -> Result<Vec<f64>> {
    let n = game.players();
    if n > cap {
        return Err(Error::Config(format!(
            "{n} players exceed the exact-mode cap of {cap}; use Monte-Carlo mode"
        )));
    }
    (0..1u64 << n)
        .into_par_iter()
        .map(|m| game.value(m))
        .collect()
}

/// Shapley value of `player` from a full value table.
pub fn shapley_from_table(table: &[f64], n: usize, player: usize) -> f64 {
    let f = factorials(n);
    let bit = 1u64 << player;
    let mut total = 0.0;
    for s in 0..1u64 << n {
        if s & bit != 0 {
            continue;
        }
        let k = s.count_ones() as usize;
        let w = f[k] * f[n - k - 1] / f[n];
        total += w * (table[(s | bit) as usize] - table[s as usize]);
    }
    total
}

/// Exact Shapley value by the subset-weight formula.
pub fn exact<G: Game + ?Sized>(game: &G, player: usize, cap: usize) -> Result<f64> {
    let n = check_player(game, player)?;
    let table = value_table(game, cap)?;
    Ok(shapley_from_table(&table, n, player))
}

/// Exact Shapley values of every player from one value table.
pub fn exact_all<G: Game + ?Sized>(game: &G, cap: usize) -> Result<Vec<f64>> {
    let n = game.players();
    let table = value_table(game, cap)?;
    Ok((0..n).map(|i| shapley_from_table(&table, n, i)).collect())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn predecessors(perm: &[usize], player: usize) -> u64 {
    perm.iter()
        .take_while(|&&p| p != player)
        .fold(0u64, |m, &p| m | 1 << p)
}

/// Evaluates marginal contributions for the given predecessor masks,
/// calling `value` once per distinct coalition.
fn contributions<G: Game + ?Sized>(game: &G, player: usize, masks: &[u64]) -> Result<Vec<f64>> {
    let bit = 1u64 << player;
    let needed: BTreeSet<u64> = masks.iter().flat_map(|&m| [m, m | bit]).collect();
    let needed: Vec<u64> = needed.into_iter().collect();
    let values: Vec<f64> = needed
        .par_iter()
        .map(|&m| game.value(m))
        .collect::<Result<_>>()?;
    let memo: HashMap<u64, f64> = needed.into_iter().zip(values).collect();
    Ok(masks.iter().map(|&m| memo[&(m | bit)] - memo[&m]).collect())
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Average marginal contribution over all n! orderings.
pub fn enumerate<G: Game + ?Sized>(game: &G, player: usize, cap: usize) -> Result<McEstimate> {
    let n = check_player(game, player)?;
    if n > cap.min(10) {
        return Err(Error::Config(format!(
            "{n} players are too many to enumerate orderings"
        )));
    }
    let masks: Vec<u64> = permutations(n)
        .iter()
        .map(|p| predecessors(p, player))
        .collect();
    let c = contributions(game, player, &masks)?;
    let (value, stderr) = mean_stderr(&c);
    Ok(McEstimate {
        value,
        stderr,
        permutations: masks.len(),
    })
}

/// Monte-Carlo estimate from uniformly sampled orderings.
pub fn monte_carlo<G: Game + ?Sized>(
    game: &G,
    player: usize,
    permutations: usize,
    seed: u64,
) -> Result<McEstimate> {
    let n = check_player(game, player)?;
    if permutations == 0 {
        return Err(Error::Config("permutations must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let masks: Vec<u64> = (0..permutations)
        .map(|_| {
            perm.shuffle(&mut rng);
            predecessors(&perm, player)
        })
        .collect();
    let c = contributions(game, player, &masks)?;
    let (value, stderr) = mean_stderr(&c);
    Ok(McEstimate {
        value,
        stderr,
        permutations,
    })
}
