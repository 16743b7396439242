//! Probing-combination selection by exhaustive scan or by a binary-coded
//! genetic algorithm over the combination index.

use std::io::{self, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};

/// Sampled and augmented sum-rates per probing combination (0-based).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CombinationPool {
    sampled: Vec<Vec<f64>>,
    augmented: Vec<Vec<f64>>,
}

impl CombinationPool {
    pub fn new(sampled: Vec<Vec<f64>>, augmented: Vec<Vec<f64>>) -> Result<Self> {
        if sampled.len() != augmented.len() {
            return Err(Error::Shape {
                context: "pool augmented lists",
                expected: sampled.len(),
                got: augmented.len(),
            });
        }
        if sampled.is_empty() {
            return Err(Error::Config("pool has no combinations".into()));
        }
        if sampled.iter().chain(&augmented).flatten().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("pool rates must be finite and non-negative".into()));
        }
        Ok(CombinationPool { sampled, augmented })
    }

    pub fn len(&self) -> usize {
        self.sampled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sampled.is_empty()
    }

    pub fn sampled(&self, l: usize) -> &[f64] {
        &self.sampled[l]
    }

    pub fn augmented(&self, l: usize) -> &[f64] {
        &self.augmented[l]
    }

    /// Combinations with no rates at all.
    pub fn empty_combinations(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&l| self.sampled[l].is_empty() && self.augmented[l].is_empty())
            .collect()
    }
}

/// Mean of the sampled and augmented rates of combination `l`.
pub fn fitness(pool: &CombinationPool, l: usize) -> Result<f64> {
    let n = pool.sampled(l).len() + pool.augmented(l).len();
    if n == 0 {
        return Err(Error::UndefinedFitness { combo: l });
    }
    let sum: f64 = pool.sampled(l).iter().chain(pool.augmented(l)).sum();
    Ok(sum / n as f64)
}

fn all_fitness(pool: &CombinationPool) -> Result<Vec<f64>> {
    let empty = pool.empty_combinations();
    if !empty.is_empty() {
        return Err(Error::EmptyCombinations(empty));
    }
    (0..pool.len()).map(|l| fitness(pool, l)).collect()
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the highest fitness; ties go to the lowest index.
pub fn exhaustive_select(pool: &CombinationPool) -> Result<usize> {
    Ok(argmax_lowest(&all_fitness(pool)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    /// Independent restarts `N_it`.
    pub iterations: usize,
    /// Generations per restart `N_ev`.
    pub generations: usize,
    pub crossover: f64,
    pub mutation: f64,
    pub elitism: usize,
    pub seed: u64,
    /// Seeds the initial population with every code before random fill.
    pub cover_all_codes: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 6,
            iterations: 3,
            generations: 5,
            crossover: 0.9,
            mutation: 0.1,
            elitism: 1,
            seed: 0,
            cover_all_codes: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("GA population must be at least 2".into()));
        }
        for (name, p) in [("crossover", self.crossover), ("mutation", self.mutation)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.elitism > self.population {
            return Err(Error::Config("elitism exceeds population".into()));
        }
        Ok(())
    }
}

/// Best and mean fitness of one evaluated generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaTraceRow {
    pub restart: usize,
    pub generation: usize,
    pub best_combo: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaResult {
    pub best: usize,
    pub fitness: f64,
    /// Best fitness among the first initial population.
    pub initial_best_fitness: f64,
    pub trace: Vec<GaTraceRow>,
}

fn code_bits(l_total: usize) -> u32 {
    (usize::BITS - (l_total.max(2) - 1).leading_zeros()).max(1)
}

fn roulette(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Genetic search over binary-coded combination indices with roulette
/// selection, single-point crossover and mutation, and elitism. Codes at or
/// above `L_total` are repaired by modulo.
pub fn ga_optimize(pool: &CombinationPool, ga: &GaConfig) -> Result<GaResult> {
    ga.validate()?;
    let fit = all_fitness(pool)?;
    let l_total = pool.len();
    let bits = code_bits(l_total);
    let codes = 1u64 << bits;
    let decode = |c: u64| (c as usize) % l_total;

    let mut best: Option<(usize, f64)> = None;
    let mut initial_best = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    for restart in 0..ga.iterations.max(1) {
        let mut rng = rng_from_seed(derive_seed(ga.seed, stream::GA, restart as u64));
        let mut pop: Vec<u64> = (0..ga.population)
            .map(|i| {
                if ga.cover_all_codes && (i as u64) < codes {
                    i as u64
                } else {
                    rng.random_range(0..codes)
                }
            })
            .collect();
        for generation in 0..=ga.generations {
            let scores: Vec<f64> = pop.iter().map(|&c| fit[decode(c)]).collect();
            let gen_best = pop
                .iter()
                .map(|&c| decode(c))
                .fold(None::<usize>, |acc, l| match acc {
                    Some(b) if fit[b] > fit[l] || (fit[b] == fit[l] && b < l) => Some(b),
                    _ => Some(l),
                })
                .expect("non-empty population");
            if restart == 0 && generation == 0 {
                initial_best = fit[gen_best];
            }
            trace.push(GaTraceRow {
                restart,
                generation,
                best_combo: gen_best,
                best_fitness: fit[gen_best],
                mean_fitness: scores.iter().sum::<f64>() / scores.len() as f64,
            });
            best = match best {
                Some((b, f)) if f > fit[gen_best] || (f == fit[gen_best] && b < gen_best) => Some((b, f)),
                _ => Some((gen_best, fit[gen_best])),
            };
            if generation == ga.generations {
                break;
            }

            let mut ranked: Vec<usize> = (0..pop.len()).collect();
            ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut next: Vec<u64> = ranked[..ga.elitism].iter().map(|&i| pop[i]).collect();
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let weights: Vec<f64> = scores.iter().map(|s| s - min + 1e-9).collect();
            while next.len() < ga.population {
                let mut a = pop[roulette(&mut rng, &weights)];
                let mut b = pop[roulette(&mut rng, &weights)];
                if bits > 1 && rng.random::<f64>() < ga.crossover {
                    let point = rng.random_range(1..bits);
                    let low = (1u64 << point) - 1;
                    let (na, nb) = ((a & !low) | (b & low), (b & !low) | (a & low));
                    a = na;
                    b = nb;
                }
                for child in [a, b] {
                    if next.len() == ga.population {
                        break;
                    }
                    let mut c = child;
                    if rng.random::<f64>() < ga.mutation {
                        c ^= 1 << rng.random_range(0..bits);
                    }
                    next.push(c);
                }
            }
            pop = next;
        }
    }
    let (best, fitness) = best.expect("at least one generation");
    Ok(GaResult {
        best,
        fitness,
        initial_best_fitness: initial_best,
        trace,
    })
}

/// Trace as CSV with 1-based combination indices.
pub fn write_trace_csv(w: &mut impl Write, trace: &[GaTraceRow]) -> io::Result<()> {
    writeln!(w, "restart,generation,best_combo,best_fitness,mean_fitness")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.restart,
            r.generation,
            r.best_combo + 1,
            r.best_fitness,
            r.mean_fitness
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_of(fit: &[f64]) -> CombinationPool {
        CombinationPool::new(fit.iter().map(|f| vec![*f]).collect(), vec![vec![]; fit.len()]).unwrap()
    }

    #[test]
    fn fitness_examples() {
        let pool = CombinationPool::new(vec![vec![2.0, 4.0], vec![]], vec![vec![], vec![5.0]]).unwrap();
        assert_eq!(fitness(&pool, 0).unwrap(), 3.0);
        assert_eq!(fitness(&pool, 1).unwrap(), 5.0);
        let empty = CombinationPool::new(vec![vec![1.0], vec![]], vec![vec![], vec![]]).unwrap();
        assert!(matches!(fitness(&empty, 1), Err(Error::UndefinedFitness { combo: 1 })));
        assert!(matches!(exhaustive_select(&empty), Err(Error::EmptyCombinations(v)) if v == vec![1]));
        assert!(CombinationPool::new(vec![vec![-1.0]], vec![vec![]]).is_err());
    }

    #[test]
    fn exhaustive_examples() {
        assert_eq!(exhaustive_select(&pool_of(&[7.0])).unwrap(), 0);
        assert_eq!(exhaustive_select(&pool_of(&[1.0, 3.0, 2.0])).unwrap(), 1);
        assert_eq!(exhaustive_select(&pool_of(&[3.0, 1.0, 3.0])).unwrap(), 0);
    }

    #[test]
    fn single_combination_ga() {
        let r = ga_optimize(&pool_of(&[2.5]), &GaConfig::default()).unwrap();
        assert_eq!(r.best, 0);
    }

    #[test]
    fn full_coverage_with_elitism_is_exhaustive() {
        let pool = pool_of(&[1.0, 5.0, 2.0, 9.0, 3.0, 8.5, 0.5, 4.0]);
        let ga = GaConfig {
            population: 8,
            generations: 1,
            iterations: 1,
            cover_all_codes: true,
            ..Default::default()
        };
        assert_eq!(ga_optimize(&pool, &ga).unwrap().best, 3);
    }

    #[test]
    fn code_width() {
        assert_eq!(code_bits(1), 1);
        assert_eq!(code_bits(2), 1);
        assert_eq!(code_bits(5), 3);
        assert_eq!(code_bits(8), 3);
        assert_eq!(code_bits(9), 4);
    }

    #[test]
    fn trace_csv_header() {
        let r = ga_optimize(&pool_of(&[1.0, 2.0, 3.0]), &GaConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &r.trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("restart,generation,best_combo,best_fitness,mean_fitness\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 6);
    }
}
