//! Exact forward simulation of the branching Markov process with full
//! genealogy.
//!
//! Each particle draws everything it needs (lifetime, displacement over its
//! life, offspring count) from its own stream, keyed by the run key and its
//! id. Ids are assigned at creation, so parents always precede children.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ValidatedModel;
use crate::rng::{RandomStream, SeedPath, StreamKey};

pub const DEFAULT_PARTICLE_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("particle cap of {cap} records exceeded")]
    CapExceeded { cap: usize },
    #[error("no survivor after {attempts} attempts")]
    MaxAttemptsExceeded { attempts: u64 },
    #[error("requested time {t} lies beyond the simulated horizon {horizon}")]
    HorizonExceeded { t: f64, horizon: f64 },
    #[error("invalid horizon {0}")]
    InvalidHorizon(f64),
}

/// One particle of a simulated genealogy.
///
/// The root of a run started at age `a` has `birth_time = −a`; every other
/// particle is born at its parent's death time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub birth_time: f64,
    /// Full sampled lifetime; may extend past the horizon.
    pub lifetime: f64,
    /// Net motion over the completed life, or up to the horizon if alive.
    pub displacement: f64,
    pub alive_at_horizon: bool,
}

impl ParticleRecord {
    pub fn death_time(&self) -> f64 {
        self.birth_time + self.lifetime
    }
}

/// Starting state of a tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub age: f64,
    pub position: f64,
}

struct PendingBirths {
    parent: usize,
    time: f64,
    position: f64,
    count: usize,
}

/// Simulates one tree up to `horizon`, handing every particle (with its
/// birth position) to `emit` in id order. Returns the number of particles.
pub(crate) fn grow<F>(
    model: &ValidatedModel,
    root: Root,
    horizon: f64,
    key: StreamKey,
    cap: usize,
    mut emit: F,
) -> Result<usize, EngineError>
where
    F: FnMut(&ParticleRecord, f64),
{
    let lifetime_law = model.lifetime();
    let motion = model.motion();
    let offspring = model.offspring();

    let mut next_id = 0usize;
    let mut stack: Vec<PendingBirths> = Vec::new();

    let mut create = |parent: Option<usize>, birth_time: f64, birth_position: f64, start_age: f64| {
        let id = next_id;
        next_id += 1;
        let mut rng = key.child(id as u64).stream();
        let lifetime = if parent.is_none() {
            lifetime_law.sample_beyond(start_age, &mut rng)
        } else {
            lifetime_law.sample(&mut rng)
        };
        let alive = birth_time + lifetime > horizon;
        let end_age = if alive { horizon - birth_time } else { lifetime };
        let displacement = motion.sample_increment(start_age, end_age, &mut rng);
        let children = if alive { 0 } else { offspring.sample(&mut rng) };
        let record = ParticleRecord { id, parent, birth_time, lifetime, displacement, alive_at_horizon: alive };
        emit(&record, birth_position);
        (record, children)
    };

    let (root_record, k) = create(None, -root.age, root.position, root.age);
    if k > 0 {
        stack.push(PendingBirths {
            parent: 0,
            time: root_record.death_time(),
            position: root.position + root_record.displacement,
            count: k,
        });
    }
    let mut created = 1usize;
    while let Some(b) = stack.pop() {
        created += b.count;
        if created > cap {
            return Err(EngineError::CapExceeded { cap });
        }
        for _ in 0..b.count {
            let (rec, k) = create(Some(b.parent), b.time, b.position, 0.0);
            if k > 0 {
                stack.push(PendingBirths {
                    parent: rec.id,
                    time: rec.death_time(),
                    position: b.position + rec.displacement,
                    count: k,
                });
            }
        }
    }
    Ok(created)
}

/// Ages and positions of the particles alive at `horizon` for a tree started
/// from `root`, without keeping the genealogy.
pub fn alive_configuration(
    model: &ValidatedModel,
    root: Root,
    horizon: f64,
    key: StreamKey,
    cap: usize,
    out: &mut Vec<(f64, f64)>,
) -> Result<usize, EngineError> {
    grow(model, root, horizon, key, cap, |rec, birth_position| {
        if rec.alive_at_horizon {
            out.push((horizon - rec.birth_time, birth_position + rec.displacement));
        }
    })
}

/// Append-only store of the particles of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenealogyArena {
    records: Vec<ParticleRecord>,
    horizon: f64,
    initial_age: f64,
    initial_position: f64,
}

impl GenealogyArena {
    pub fn records(&self) -> &[ParticleRecord] {
        &self.records
    }

    pub fn get(&self, id: usize) -> Option<&ParticleRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_age(&self) -> f64 {
        self.initial_age
    }

    pub fn initial_position(&self) -> f64 {
        self.initial_position
    }

    pub fn alive_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.iter().filter(|r| r.alive_at_horizon).map(|r| r.id)
    }

    /// Birth position of every particle, by prefix sums along parent links.
    pub fn birth_positions(&self) -> Vec<f64> {
        let mut pos = vec![0.0; self.records.len()];
        for r in &self.records {
            pos[r.id] = match r.parent {
                None => self.initial_position,
                Some(p) => pos[p] + self.records[p].displacement,
            };
        }
        pos
    }

    /// Age at which a particle's recorded displacement starts (initial age
    /// for the root, zero otherwise).
    pub fn start_age(&self, id: usize) -> f64 {
        if self.records[id].parent.is_none() {
            self.initial_age
        } else {
            0.0
        }
    }

    /// Configuration at the horizon.
    pub fn snapshot(&self) -> Snapshot {
        let pos = self.birth_positions();
        let entries = self
            .records
            .iter()
            .filter(|r| r.alive_at_horizon)
            .map(|r| SnapshotEntry { age: self.horizon - r.birth_time, position: pos[r.id] + r.displacement, id: r.id })
            .collect();
        Snapshot { entries, horizon: self.horizon }
    }

    /// Exact structural checks: topological order, a single root, children
    /// born at their parent's death, alive flags consistent with the horizon.
    pub fn check_structure(&self) -> Result<(), String> {
        for (i, r) in self.records.iter().enumerate() {
            if r.id != i {
                return Err(format!("record {i} carries id {}", r.id));
            }
            if !(r.lifetime > 0.0) {
                return Err(format!("particle {i} has lifetime {}", r.lifetime));
            }
            match r.parent {
                None if i != 0 => return Err(format!("particle {i} has no parent")),
                None => {
                    if r.birth_time != -self.initial_age {
                        return Err("root birth time does not match initial age".into());
                    }
                }
                Some(p) => {
                    if p >= i {
                        return Err(format!("parent {p} does not precede child {i}"));
                    }
                    let parent = &self.records[p];
                    if parent.alive_at_horizon {
                        return Err(format!("particle {i} has a parent alive at the horizon"));
                    }
                    if parent.death_time() != r.birth_time {
                        return Err(format!("particle {i} not born at its parent's death"));
                    }
                }
            }
            let alive = r.birth_time <= self.horizon && self.horizon < r.death_time();
            if alive != r.alive_at_horizon {
                return Err(format!("alive flag of particle {i} inconsistent with horizon"));
            }
            if r.birth_time > self.horizon {
                return Err(format!("particle {i} born after the horizon"));
            }
        }
        Ok(())
    }

    /// Columnar CSV dump: `id,parent,birth,lifetime,displacement,alive`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "id,parent,birth,lifetime,displacement,alive")?;
        for r in &self.records {
            let parent = r.parent.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.id, parent, r.birth_time, r.lifetime, r.displacement, r.alive_at_horizon as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub age: f64,
    pub position: f64,
    pub id: usize,
}

/// Age and position configuration at a fixed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub entries: Vec<SnapshotEntry>,
    pub horizon: f64,
}

impl Snapshot {
    pub fn count(&self) -> usize {
        self.entries.len()
    }
}

/// Outcome of one (possibly conditioned) replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub arena: GenealogyArena,
    pub snapshot: Snapshot,
    pub attempts: u64,
    pub seed_path: SeedPath,
}

impl RunRecord {
    pub fn alive_count(&self) -> usize {
        self.snapshot.count()
    }

    pub fn horizon(&self) -> f64 {
        self.arena.horizon
    }

    pub fn to_row(&self) -> RunRow {
        RunRow {
            seed: self.seed_path.base,
            replicate: self.seed_path.replicate,
            attempts: self.attempts,
            horizon: self.arena.horizon,
            n_alive: self.snapshot.count(),
            snapshot: self.snapshot.entries.iter().map(|e| (e.age, e.position, e.id)).collect(),
        }
    }
}

/// JSONL line describing one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub replicate: u64,
    pub attempts: u64,
    pub horizon: f64,
    pub n_alive: usize,
    /// `(age, position, id)` of every particle alive at the horizon.
    pub snapshot: Vec<(f64, f64, usize)>,
}

fn check_horizon(horizon: f64) -> Result<(), EngineError> {
    if horizon.is_finite() && horizon >= 0.0 {
        Ok(())
    } else {
        Err(EngineError::InvalidHorizon(horizon))
    }
}

fn simulate_into(
    model: &ValidatedModel,
    horizon: f64,
    key: StreamKey,
    cap: usize,
    records: &mut Vec<ParticleRecord>,
) -> Result<usize, EngineError> {
    records.clear();
    let root = Root { age: model.initial_age(), position: model.initial_position() };
    let mut alive = 0;
    grow(model, root, horizon, key, cap, |rec, _| {
        alive += rec.alive_at_horizon as usize;
        records.push(*rec);
    })?;
    Ok(alive)
}

fn finish(model: &ValidatedModel, horizon: f64, records: Vec<ParticleRecord>, attempts: u64, seed_path: SeedPath) -> RunRecord {
    let arena = GenealogyArena {
        records,
        horizon,
        initial_age: model.initial_age(),
        initial_position: model.initial_position(),
    };
    let snapshot = arena.snapshot();
    RunRecord { arena, snapshot, attempts, seed_path }
}

/// Key of attempt `attempt` of replicate `seed_path`.
pub fn attempt_key(seed_path: SeedPath, attempt: u64) -> StreamKey {
    seed_path.key().child(attempt)
}

/// One unconditioned run from a single root.
pub fn run_once(model: &ValidatedModel, horizon: f64, seed_path: SeedPath, particle_cap: usize) -> Result<RunRecord, EngineError> {
    check_horizon(horizon)?;
    let mut records = Vec::new();
    simulate_into(model, horizon, attempt_key(seed_path, 0), particle_cap, &mut records)?;
    Ok(finish(model, horizon, records, 1, seed_path))
}

/// Number of particles alive at `horizon` for an unconditioned run; same
/// random draws as [`run_once`].
pub fn alive_count_once(model: &ValidatedModel, horizon: f64, seed_path: SeedPath, particle_cap: usize) -> Result<usize, EngineError> {
    check_horizon(horizon)?;
    let root = Root { age: model.initial_age(), position: model.initial_position() };
    let mut alive = 0;
    grow(model, root, horizon, attempt_key(seed_path, 0), particle_cap, |rec, _| {
        alive += rec.alive_at_horizon as usize;
    })?;
    Ok(alive)
}

/// Rejection sampling of a run that survives to `horizon`. Attempt `j` uses
/// the sub-stream `j` of the replicate, so the attempt count is an honest
/// geometric sample.
pub fn run_conditioned(
    model: &ValidatedModel,
    horizon: f64,
    seed_path: SeedPath,
    particle_cap: usize,
    max_attempts: u64,
) -> Result<RunRecord, EngineError> {
    run_conditioned_on(model, horizon, seed_path, particle_cap, max_attempts, 1)
}

/// Rejection sampling conditioned on at least `min_alive` survivors.
pub fn run_conditioned_on(
    model: &ValidatedModel,
    horizon: f64,
    seed_path: SeedPath,
    particle_cap: usize,
    max_attempts: u64,
    min_alive: usize,
) -> Result<RunRecord, EngineError> {
    check_horizon(horizon)?;
    let mut records = Vec::new();
    for attempt in 0..max_attempts {
        let alive = simulate_into(model, horizon, attempt_key(seed_path, attempt), particle_cap, &mut records)?;
        if alive >= min_alive.max(1) {
            return Ok(finish(model, horizon, records, attempt + 1, seed_path));
        }
    }
    Err(EngineError::MaxAttemptsExceeded { attempts: max_attempts })
}

/// Configuration at an intermediate time `t ≤ horizon`.
///
/// Lives that straddle `t` get their partial displacement from a Gaussian
/// bridge pinned to the recorded displacement: with cumulative variance `v₁`
/// up to `t` and `v` over the recorded span, the draw is
/// `N((v₁/v)·D, v₁(1 − v₁/v))`. Exact for independent Gaussian increments.
pub fn snapshot_at<R: Rng + ?Sized>(
    model: &ValidatedModel,
    arena: &GenealogyArena,
    t: f64,
    rng: &mut R,
) -> Result<Snapshot, EngineError> {
    if !(t >= 0.0) || t > arena.horizon {
        return Err(EngineError::HorizonExceeded { t, horizon: arena.horizon });
    }
    if t == arena.horizon {
        return Ok(arena.snapshot());
    }
    let pos = arena.birth_positions();
    let motion = model.motion();
    let mut entries = Vec::new();
    for r in &arena.records {
        if !(r.birth_time <= t && t < r.death_time()) {
            continue;
        }
        let start = arena.start_age(r.id);
        let age = t - r.birth_time;
        let recorded_end = if r.alive_at_horizon { arena.horizon - r.birth_time } else { r.lifetime };
        let v_total = motion.variance_between(start, recorded_end);
        let v_part = motion.variance_between(start, age);
        let partial = if v_total <= 0.0 || v_part <= 0.0 {
            0.0
        } else {
            let frac = (v_part / v_total).min(1.0);
            let z: f64 = StandardNormal.sample(rng);
            frac * r.displacement + (v_part * (1.0 - frac)).max(0.0).sqrt() * z
        };
        entries.push(SnapshotEntry { age, position: pos[r.id] + partial, id: r.id });
    }
    Ok(Snapshot { entries, horizon: t })
}

/// Maps `f` over replicate indices `0..reps` in parallel; results come back
/// in replicate order whatever the thread count.
pub fn par_replicates<T, F>(reps: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..reps).into_par_iter().map(f).collect()
}

/// Convenience: a fresh stream for auxiliary sampling tied to a replicate.
pub fn auxiliary_stream(seed_path: SeedPath, tag: &str) -> RandomStream {
    seed_path.key().tagged(tag).stream()
}
