//! Survivor sampling, ancestral lines and coalescence times.
//!
//! A coalescence (split) time of two lines is the time at which their most
//! recent common ancestor dies and the lines separate, i.e. the common birth
//! time of the two distinct children of that ancestor. With `k` sampled
//! survivors the ordered split times `τ₁ ≤ … ≤ τ_{k−1}` are the times at
//! which the number of distinct ancestors increases.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{GenealogyArena, RunRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenealogyError {
    #[error("requested {k} survivors but only {alive} are alive")]
    NotEnoughSurvivors { k: usize, alive: usize },
    #[error("particle {0} is not alive at the horizon")]
    NotAlive(usize),
    #[error("particle {0} listed twice")]
    DuplicateIds(usize),
}

/// Uniform `k`-subset of the survivors by a partial Fisher–Yates shuffle.
pub fn sample_survivors<R: Rng + ?Sized>(run: &RunRecord, k: usize, rng: &mut R) -> Result<Vec<usize>, GenealogyError> {
    let mut alive: Vec<usize> = run.snapshot.entries.iter().map(|e| e.id).collect();
    if k > alive.len() {
        return Err(GenealogyError::NotEnoughSurvivors { k, alive: alive.len() });
    }
    for i in 0..k {
        let j = rng.random_range(i..alive.len());
        alive.swap(i, j);
    }
    alive.truncate(k);
    Ok(alive)
}

/// Lifetimes and displacements of a survivor's ancestors, root first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncestralLine {
    pub generation_count: usize,
    pub lifetimes: Vec<f64>,
    pub displacements: Vec<f64>,
    pub residual_age: f64,
    pub residual_displacement: f64,
}

impl AncestralLine {
    /// `(1/M) Σ h(L_i)`; `None` when the survivor is the root.
    pub fn lifetime_average(&self, h: impl Fn(f64) -> f64) -> Option<f64> {
        if self.generation_count == 0 {
            return None;
        }
        Some(self.lifetimes.iter().map(|l| h(*l)).sum::<f64>() / self.generation_count as f64)
    }

    /// `Σ η_i(L_i) / √M`, the normalised ancestral displacement.
    pub fn normalised_displacement(&self) -> Option<f64> {
        if self.generation_count == 0 {
            return None;
        }
        Some(self.displacements.iter().sum::<f64>() / (self.generation_count as f64).sqrt())
    }

    /// Position reconstructed from the root position.
    pub fn position(&self, initial_position: f64) -> f64 {
        initial_position + self.displacements.iter().sum::<f64>() + self.residual_displacement
    }
}

fn require_alive(arena: &GenealogyArena, id: usize) -> Result<(), GenealogyError> {
    match arena.get(id) {
        Some(r) if r.alive_at_horizon => Ok(()),
        _ => Err(GenealogyError::NotAlive(id)),
    }
}

/// Walks parent links from `id` back to the root.
pub fn ancestral_line(arena: &GenealogyArena, id: usize) -> Result<AncestralLine, GenealogyError> {
    require_alive(arena, id)?;
    let me = arena.get(id).expect("checked");
    let mut lifetimes = Vec::new();
    let mut displacements = Vec::new();
    let mut cur = me.parent;
    while let Some(p) = cur {
        let r = arena.get(p).expect("parent exists");
        lifetimes.push(r.lifetime);
        displacements.push(r.displacement);
        cur = r.parent;
    }
    lifetimes.reverse();
    displacements.reverse();
    Ok(AncestralLine {
        generation_count: lifetimes.len(),
        lifetimes,
        displacements,
        residual_age: arena.horizon() - me.birth_time,
        residual_displacement: me.displacement,
    })
}

/// Most recent common ancestor of two particles. Ids strictly decrease
/// along parent links, so the larger id is always the one to move up.
pub fn mrca(arena: &GenealogyArena, a: usize, b: usize) -> usize {
    let (mut a, mut b) = (a, b);
    while a != b {
        if a > b {
            a = arena.get(a).and_then(|r| r.parent).expect("single-rooted arena");
        } else {
            b = arena.get(b).and_then(|r| r.parent).expect("single-rooted arena");
        }
    }
    a
}

/// Split time of the lines of two distinct survivors.
pub fn split_time(arena: &GenealogyArena, a: usize, b: usize) -> f64 {
    arena.get(mrca(arena, a, b)).expect("ancestor exists").death_time()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescentSample {
    pub ids: Vec<usize>,
    /// Ordered split times, `k − 1` entries.
    pub tau: Vec<f64>,
    /// Pairwise split times; the diagonal is unused and set to the horizon.
    pub pairwise: Vec<Vec<f64>>,
}

impl CoalescentSample {
    pub fn max_pairwise(&self) -> Option<f64> {
        let k = self.ids.len();
        (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).map(|(i, j)| self.pairwise[i][j]).reduce(f64::max)
    }
}

/// Split times of the subtree spanned by `ids`.
pub fn coalescence_times(arena: &GenealogyArena, ids: &[usize]) -> Result<CoalescentSample, GenealogyError> {
    let mut seen = HashSet::new();
    for &id in ids {
        require_alive(arena, id)?;
        if !seen.insert(id) {
            return Err(GenealogyError::DuplicateIds(id));
        }
    }
    let k = ids.len();
    let mut pairwise = vec![vec![arena.horizon(); k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let s = split_time(arena, ids[i], ids[j]);
            pairwise[i][j] = s;
            pairwise[j][i] = s;
        }
    }

    // Distinct child branches below each ancestor of the sample; an ancestor
    // with c sampled branches contributes c − 1 splits at its death time.
    let mut branches: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &id in ids {
        let mut child = id;
        while let Some(parent) = arena.get(child).and_then(|r| r.parent) {
            let fresh = !branches.contains_key(&parent);
            branches.entry(parent).or_default().insert(child);
            if !fresh {
                break;
            }
            child = parent;
        }
    }
    let mut tau: Vec<f64> = Vec::with_capacity(k.saturating_sub(1));
    for (node, kids) in &branches {
        let t = arena.get(*node).expect("ancestor exists").death_time();
        tau.extend(std::iter::repeat_n(t, kids.len().saturating_sub(1)));
    }
    tau.sort_by(f64::total_cmp);
    debug_assert_eq!(tau.len(), k.saturating_sub(1));
    Ok(CoalescentSample { ids: ids.to_vec(), tau, pairwise })
}

/// CSV header for coalescent rows with `k` sampled survivors.
pub fn coalescent_csv_header(k: usize) -> String {
    let mut cols = vec!["t".to_string(), "k".to_string()];
    cols.extend((1..k).map(|j| format!("tau{j}_over_t")));
    cols.push("n_t".into());
    cols.join(",")
}

/// `t,k,τ₁/t,…,τ_{k−1}/t,N_t`.
pub fn coalescent_csv_row(t: f64, sample: &CoalescentSample, n_alive: usize) -> String {
    let mut cols = vec![t.to_string(), sample.ids.len().to_string()];
    cols.extend(sample.tau.iter().map(|x| (x / t).to_string()));
    cols.push(n_alive.to_string());
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_conditioned, DEFAULT_PARTICLE_CAP};
    use crate::model::{LifetimeLaw, ModelSpec, MotionLaw, OffspringLaw, ValidatedModel};
    use crate::rng::{RandomStream, SeedPath};

    fn reference() -> ValidatedModel {
        ModelSpec::binary_exponential(1.0).validate().unwrap()
    }

    fn conditioned(m: &ValidatedModel, t: f64, seed: u64, rep: u64) -> RunRecord {
        run_conditioned(m, t, SeedPath::new(seed, rep), DEFAULT_PARTICLE_CAP, 1_000_000).unwrap()
    }

    #[test]
    fn full_sample_is_the_alive_set() {
        let run = conditioned(&reference(), 10.0, 1, 0);
        let mut rng = RandomStream::seed_from_u64(0);
        let mut got = sample_survivors(&run, run.alive_count(), &mut rng).unwrap();
        got.sort_unstable();
        let want: Vec<usize> = run.arena.alive_ids().collect();
        assert_eq!(got, want);
        assert_eq!(
            sample_survivors(&run, run.alive_count() + 1, &mut rng),
            Err(GenealogyError::NotEnoughSurvivors { k: run.alive_count() + 1, alive: run.alive_count() })
        );
    }

    #[test]
    fn single_draws_are_uniform() {
        let m = reference();
        let run = (0..)
            .map(|rep| conditioned(&m, 6.0, 2, rep))
            .find(|r| r.alive_count() == 5)
            .unwrap();
        let ids: Vec<usize> = run.arena.alive_ids().collect();
        let mut rng = RandomStream::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let id = sample_survivors(&run, 1, &mut rng).unwrap()[0];
            counts[ids.iter().position(|x| *x == id).unwrap()] += 1;
        }
        for c in counts {
            // binomial sd √(0.16/n) ≈ 0.0013
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.005);
        }
    }

    #[test]
    fn ancestral_line_bookkeeping() {
        let m = ModelSpec::binary_exponential(1.0).with_initial(0.4, 1.5).validate().unwrap();
        for rep in 0..200 {
            let run = conditioned(&m, 12.0, 3, rep);
            let pos = run.snapshot.entries.iter().map(|e| (e.id, e.position)).collect::<BTreeMap<_, _>>();
            for id in run.arena.alive_ids() {
                let line = ancestral_line(&run.arena, id).unwrap();
                let total: f64 = line.lifetimes.iter().sum::<f64>() + line.residual_age;
                assert!((total - 12.4).abs() < 1e-9 * 12.0);
                assert!((line.position(1.5) - pos[&id]).abs() < 1e-9);
                assert_eq!(line.generation_count, line.lifetimes.len());
            }
        }
    }

    #[test]
    fn surviving_root_has_empty_line() {
        let mut spec = ModelSpec::binary_exponential(1.0).with_initial(0.5, 0.0);
        spec.lifetime = LifetimeLaw::Deterministic { value: 10.0 };
        let m = spec.validate().unwrap();
        let run = conditioned(&m, 3.0, 4, 0);
        let line = ancestral_line(&run.arena, 0).unwrap();
        assert_eq!(line.generation_count, 0);
        assert_eq!(line.residual_age, 3.5);
        assert!(matches!(ancestral_line(&run.arena, 99), Err(GenealogyError::NotAlive(99))));
    }

    #[test]
    fn siblings_split_at_their_birth() {
        // Deterministic unit lifetimes with offspring 0 or 2: every alive pair
        // of siblings split when they were born.
        let mut spec = ModelSpec::binary_exponential(1.0);
        spec.lifetime = LifetimeLaw::Deterministic { value: 1.0 };
        let m = spec.validate().unwrap();
        let run = conditioned(&m, 1.5, 5, 0);
        let ids: Vec<usize> = run.arena.alive_ids().collect();
        assert_eq!(ids.len(), 2);
        let cs = coalescence_times(&run.arena, &ids).unwrap();
        assert_eq!(cs.tau, vec![1.0]);
        assert_eq!(cs.pairwise[0][1], 1.0);
    }

    #[test]
    fn star_gives_constant_tau() {
        let spec = ModelSpec::new(
            LifetimeLaw::Deterministic { value: 1.0 },
            OffspringLaw::new(vec![0.75, 0.0, 0.0, 0.0, 0.25]).unwrap(),
            MotionLaw::Brownian { diffusion: 1.0 },
        );
        let m = spec.validate().unwrap();
        let run = conditioned(&m, 1.5, 6, 0);
        let ids: Vec<usize> = run.arena.alive_ids().collect();
        assert_eq!(ids.len(), 4);
        let cs = coalescence_times(&run.arena, &ids).unwrap();
        assert_eq!(cs.tau, vec![1.0; 3]);
        assert!(cs.pairwise.iter().enumerate().all(|(i, row)| row.iter().enumerate().all(|(j, v)| i == j || *v == 1.0)));
    }

    #[test]
    fn errors() {
        let run = conditioned(&reference(), 8.0, 7, 0);
        let id = run.arena.alive_ids().next().unwrap();
        assert_eq!(coalescence_times(&run.arena, &[id, id]), Err(GenealogyError::DuplicateIds(id)));
        assert_eq!(coalescence_times(&run.arena, &[0, id]), Err(GenealogyError::NotAlive(0)));
    }

    /// Number of distinct ancestors of `ids` alive just after time `s`.
    fn ancestors_after(arena: &GenealogyArena, ids: &[usize], s: f64) -> usize {
        let mut set = BTreeSet::new();
        for &id in ids {
            let mut cur = id;
            // climb while the current particle was born after s
            while arena.get(cur).unwrap().birth_time > s {
                cur = arena.get(cur).unwrap().parent.unwrap();
            }
            set.insert(cur);
        }
        set.len()
    }

    #[test]
    fn tau_agrees_with_brute_force_recount() {
        let m = reference();
        let mut rng = RandomStream::seed_from_u64(8);
        let mut checked = 0;
        for rep in 0..1000 {
            let run = conditioned(&m, 6.0, 9, rep);
            let k = run.alive_count().min(5);
            if k < 2 {
                continue;
            }
            let ids = sample_survivors(&run, k, &mut rng).unwrap();
            let cs = coalescence_times(&run.arena, &ids).unwrap();
            assert_eq!(cs.tau.len(), k - 1);
            assert_eq!(cs.max_pairwise().unwrap(), *cs.tau.last().unwrap());
            // τ_j is the first split time after which there are j + 1 ancestors.
            let mut candidates: Vec<f64> = run.arena.records().iter().map(|r| r.death_time()).filter(|t| *t <= 6.0).collect();
            candidates.sort_by(f64::total_cmp);
            for (j, tau) in cs.tau.iter().enumerate() {
                let first = candidates.iter().find(|s| ancestors_after(&run.arena, &ids, **s) >= j + 2).unwrap();
                assert_eq!(first, tau);
            }
            checked += 1;
        }
        assert!(checked > 500);
    }

    #[test]
    fn csv_row_layout() {
        let cs = CoalescentSample { ids: vec![1, 2, 3], tau: vec![5.0, 10.0], pairwise: vec![] };
        assert_eq!(coalescent_csv_header(3), "t,k,tau1_over_t,tau2_over_t,n_t");
        assert_eq!(coalescent_csv_row(20.0, &cs, 7), "20,3,0.25,0.5,7");
    }
}
