//! Particle systems coupled by ideal springs, finite springs and repulsive
//! charges inside an elastic square box.
//!
//! Integration is kick-drift-kick leapfrog; walls are applied after each
//! full step by mirroring positions and flipping the crossed velocity
//! component.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Features recorded per particle: x, y, vx, vy.
pub const STATE_DIM: usize = 4;

/// Separation below which an interacting pair counts as coincident.
pub const SINGULAR_DISTANCE: f64 = 1e-6;

const MAX_RETRIES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "i+c")]
    SpringsCharges,
    #[serde(rename = "i+c+f")]
    SpringsChargesFinite,
}

impl System {
    pub fn layers(self) -> &'static [Interaction] {
        match self {
            System::SpringsCharges => &[Interaction::IdealSpring, Interaction::Charge],
            System::SpringsChargesFinite => &[
                Interaction::IdealSpring,
                Interaction::Charge,
                Interaction::FiniteSpring,
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::SpringsCharges => "i+c",
            System::SpringsChargesFinite => "i+c+f",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i+c" => Ok(System::SpringsCharges),
            "i+c+f" => Ok(System::SpringsChargesFinite),
            other => Err(Error::Config(format!("unknown system {other:?} (expected i+c or i+c+f)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    IdealSpring,
    Charge,
    FiniteSpring,
}

impl Interaction {
    pub fn name(self) -> &'static str {
        match self {
            Interaction::IdealSpring => "i-spring",
            Interaction::Charge => "charge",
            Interaction::FiniteSpring => "f-spring",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    /// Ideal spring constant (N/m).
    pub k_ideal: f64,
    /// Finite spring constant (N/m).
    pub k_finite: f64,
    /// Finite spring rest length (m).
    pub rest_length: f64,
    /// Coulomb constant (N m²).
    pub coulomb: f64,
    /// Integrator step (s).
    pub dt: f64,
    /// Integrator steps per recorded sample.
    pub subsample: usize,
    pub box_half: f64,
    pub mass: f64,
    pub init_pos_std: f64,
    pub init_speed: f64,
    pub system: System,
    pub t_record: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_particles: 5,
            k_ideal: 0.1,
            k_finite: 0.1,
            rest_length: 1.0,
            coulomb: 0.2,
            dt: 0.001,
            subsample: 100,
            box_half: 2.5,
            mass: 1.0,
            init_pos_std: 0.5,
            init_speed: 0.5,
            system: System::SpringsCharges,
            t_record: 100,
        }
    }
}

impl SimConfig {
    pub fn with_system(system: System) -> Self {
        Self {
            system,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_ideal", self.k_ideal),
            ("k_finite", self.k_finite),
            ("rest_length", self.rest_length),
            ("coulomb", self.coulomb),
            ("dt", self.dt),
            ("box_half", self.box_half),
            ("mass", self.mass),
            ("init_pos_std", self.init_pos_std),
            ("init_speed", self.init_speed),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.subsample == 0 || self.t_record == 0 {
            return Err(Error::Config("subsample and t_record must be at least 1".into()));
        }
        if self.n_particles < 2 {
            return Err(Error::Config("need at least two particles".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleState {
    pub r: [f64; 2],
    pub v: [f64; 2],
}

/// Ground-truth multiplex graph: one N×N 0/1 matrix per interaction layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub n: usize,
    pub layers: Vec<(Interaction, Vec<u8>)>,
    /// Per-particle charge, 0 or 1.
    pub charges: Vec<u8>,
}

impl InteractionGraph {
    pub fn empty(n: usize, system: System) -> Self {
        Self {
            n,
            layers: system.layers().iter().map(|k| (*k, vec![0; n * n])).collect(),
            charges: vec![0; n],
        }
    }

    pub fn layer(&self, kind: Interaction) -> Option<&[u8]> {
        self.layers.iter().find(|(k, _)| *k == kind).map(|(_, m)| m.as_slice())
    }

    fn layer_mut(&mut self, kind: Interaction) -> Option<&mut Vec<u8>> {
        self.layers.iter_mut().find(|(k, _)| *k == kind).map(|(_, m)| m)
    }

    pub fn set_spring(&mut self, kind: Interaction, i: usize, j: usize, on: bool) {
        let n = self.n;
        if let Some(m) = self.layer_mut(kind) {
            m[i * n + j] = on as u8;
            m[j * n + i] = on as u8;
        }
    }

    /// Sets per-particle charges and rebuilds the charge layer as q qᵀ
    /// without its diagonal.
    pub fn set_charges(&mut self, charges: Vec<u8>) {
        let n = self.n;
        if let Some(m) = self.layer_mut(Interaction::Charge) {
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = if i == j { 0 } else { charges[i] * charges[j] };
                }
            }
        }
        self.charges = charges;
    }

    fn coupling(&self, i: usize, j: usize) -> Coupling {
        let at = |kind| self.layer(kind).is_some_and(|m| m[i * self.n + j] != 0);
        Coupling {
            ideal: at(Interaction::IdealSpring),
            finite: at(Interaction::FiniteSpring),
            charge: f64::from(self.charges[i]) * f64::from(self.charges[j]),
        }
    }
}

/// Which interactions act between one ordered pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coupling {
    pub ideal: bool,
    pub finite: bool,
    /// Product of the two charges.
    pub charge: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    /// `[t_record, n, 4]`: x, y, vx, vy.
    pub trajectory: Tensor,
    pub graph: InteractionGraph,
    pub seed: u64,
}

/// Unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn unordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Draws the number of springs per spring layer uniformly from
/// `0..=N(N−1)/2` and places them on a uniform random subset of pairs;
/// draws the number of charges uniformly from `1..=N`.
pub fn sample_interaction_graph<R: Rng + ?Sized>(rng: &mut R, system: System, n: usize) -> Result<InteractionGraph> {
    if n < 2 {
        return Err(Error::Config("need at least two particles".into()));
    }
    let pairs = unordered_pairs(n);
    let mut graph = InteractionGraph::empty(n, system);
    for &kind in system.layers() {
        if kind == Interaction::Charge {
            continue;
        }
        let count = rng.random_range(0..=pairs.len());
        for p in index::sample(rng, pairs.len(), count) {
            let (i, j) = pairs[p];
            graph.set_spring(kind, i, j, true);
        }
    }
    let n_charged = rng.random_range(1..=n);
    let mut charges = vec![0u8; n];
    for i in index::sample(rng, n, n_charged) {
        charges[i] = 1;
    }
    graph.set_charges(charges);
    Ok(graph)
}

/// Force on a particle at `ri` exerted by one at `rj`.
pub fn pair_force(ri: [f64; 2], rj: [f64; 2], coupling: Coupling, cfg: &SimConfig) -> std::result::Result<[f64; 2], f64> {
    let d = [ri[0] - rj[0], ri[1] - rj[1]];
    let mut f = [0.0; 2];
    if coupling.ideal {
        f[0] -= cfg.k_ideal * d[0];
        f[1] -= cfg.k_ideal * d[1];
    }
    if coupling.finite || coupling.charge != 0.0 {
        let dist = d[0].hypot(d[1]);
        if dist < SINGULAR_DISTANCE {
            return Err(dist);
        }
        let u = [d[0] / dist, d[1] / dist];
        if coupling.finite {
            f[0] -= cfg.k_finite * (d[0] - cfg.rest_length * u[0]);
            f[1] -= cfg.k_finite * (d[1] - cfg.rest_length * u[1]);
        }
        if coupling.charge != 0.0 {
            let mag = coupling.charge * cfg.coulomb / (dist * dist);
            f[0] += mag * u[0];
            f[1] += mag * u[1];
        }
    }
    Ok(f)
}

/// Total force on every particle.
pub fn net_force(states: &[ParticleState], graph: &InteractionGraph, cfg: &SimConfig) -> Result<Vec<[f64; 2]>> {
    let n = states.len();
    let mut forces = vec![[0.0; 2]; n];
    for (i, j) in unordered_pairs(n) {
        let f = pair_force(states[i].r, states[j].r, graph.coupling(i, j), cfg)
            .map_err(|distance| Error::Singularity { i, j, distance })?;
        forces[i][0] += f[0];
        forces[i][1] += f[1];
        forces[j][0] -= f[0];
        forces[j][1] -= f[1];
    }
    Ok(forces)
}

/// Mirrors any coordinate outside `[-box_half, box_half]` back inside and
/// flips the matching velocity component.
pub fn reflect_walls(state: &mut ParticleState, box_half: f64) {
    for axis in 0..2 {
        while state.r[axis].abs() > box_half {
            state.r[axis] = 2.0 * state.r[axis].signum() * box_half - state.r[axis];
            state.v[axis] = -state.v[axis];
        }
    }
}

/// One kick-drift-kick step. `forces` must hold the forces at the current
/// positions and is replaced by the forces at the new positions.
pub fn leapfrog_step_cached(
    states: &mut [ParticleState],
    forces: &mut Vec<[f64; 2]>,
    graph: &InteractionGraph,
    cfg: &SimConfig,
) -> Result<()> {
    let half = 0.5 * cfg.dt / cfg.mass;
    for (s, f) in states.iter_mut().zip(forces.iter()) {
        for a in 0..2 {
            s.v[a] += half * f[a];
            s.r[a] += cfg.dt * s.v[a];
        }
    }
    *forces = net_force(states, graph, cfg)?;
    let mut bounced = false;
    for (s, f) in states.iter_mut().zip(forces.iter()) {
        for a in 0..2 {
            s.v[a] += half * f[a];
        }
        let before = s.r;
        reflect_walls(s, cfg.box_half);
        bounced |= before != s.r;
    }
    if bounced {
        *forces = net_force(states, graph, cfg)?;
    }
    Ok(())
}

pub fn leapfrog_step(states: &[ParticleState], graph: &InteractionGraph, cfg: &SimConfig) -> Result<Vec<ParticleState>> {
    let mut next = states.to_vec();
    let mut forces = net_force(states, graph, cfg)?;
    leapfrog_step_cached(&mut next, &mut forces, graph, cfg)?;
    Ok(next)
}

pub fn kinetic_energy(states: &[ParticleState], cfg: &SimConfig) -> f64 {
    states
        .iter()
        .map(|s| 0.5 * cfg.mass * (s.v[0] * s.v[0] + s.v[1] * s.v[1]))
        .sum()
}

/// Kinetic energy plus spring and Coulomb potentials.
pub fn total_energy(states: &[ParticleState], graph: &InteractionGraph, cfg: &SimConfig) -> f64 {
    let mut e = kinetic_energy(states, cfg);
    for (i, j) in unordered_pairs(states.len()) {
        let c = graph.coupling(i, j);
        let d = [states[i].r[0] - states[j].r[0], states[i].r[1] - states[j].r[1]];
        let dist = d[0].hypot(d[1]);
        if c.ideal {
            e += 0.5 * cfg.k_ideal * dist * dist;
        }
        if c.finite {
            e += 0.5 * cfg.k_finite * (dist - cfg.rest_length).powi(2);
        }
        if c.charge != 0.0 {
            e += cfg.coulomb * c.charge / dist;
        }
    }
    e
}

pub fn initial_states<R: Rng + ?Sized>(rng: &mut R, cfg: &SimConfig) -> Vec<ParticleState> {
    let normal = Normal::new(0.0, cfg.init_pos_std).expect("positive std");
    (0..cfg.n_particles)
        .map(|_| {
            let r = [normal.sample(rng), normal.sample(rng)];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let v = [cfg.init_speed * angle.cos(), cfg.init_speed * angle.sin()];
            ParticleState { r, v }
        })
        .collect()
}

/// Runs `subsample * t_record` steps from the given start, recording the
/// state after every `subsample`-th step.
pub fn integrate(
    mut states: Vec<ParticleState>,
    graph: &InteractionGraph,
    cfg: &SimConfig,
) -> Result<Tensor> {
    let n = states.len();
    let mut out = Vec::with_capacity(cfg.t_record * n * STATE_DIM);
    let mut forces = net_force(&states, graph, cfg)?;
    for _ in 0..cfg.t_record {
        for _ in 0..cfg.subsample {
            leapfrog_step_cached(&mut states, &mut forces, graph, cfg)?;
        }
        for s in &states {
            out.extend_from_slice(&[s.r[0], s.r[1], s.v[0], s.v[1]]);
        }
    }
    Tensor::new(&[cfg.t_record, n, STATE_DIM], out)
}

/// Simulates one example. A singular configuration is discarded and the
/// example redrawn from a derived seed, a bounded number of times.
pub fn simulate_example(seed: u64, cfg: &SimConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut current = seed;
    let mut last_err = None;
    for attempt in 0..=MAX_RETRIES {
        if attempt > 0 {
            current = derive_seed(seed, attempt);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(current);
        let graph = sample_interaction_graph(&mut rng, cfg.system, cfg.n_particles)?;
        let states = initial_states(&mut rng, cfg);
        match integrate(states, &graph, cfg) {
            Ok(trajectory) => {
                return Ok(TrajectoryRecord {
                    trajectory,
                    graph,
                    seed: current,
                })
            }
            Err(e @ Error::Singularity { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Simulates `count` examples; example `k` uses a seed derived from
/// `(dataset_seed, k)`, so the result does not depend on scheduling.
pub fn simulate_dataset(cfg: &SimConfig, count: usize, dataset_seed: u64) -> Result<Vec<TrajectoryRecord>> {
    (0..count)
        .into_par_iter()
        .map(|k| simulate_example(derive_seed(dataset_seed, k as u64), cfg))
        .collect()
}

/// SplitMix64-style mixing of a base seed with a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(stream))
}
