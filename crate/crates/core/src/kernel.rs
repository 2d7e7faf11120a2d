//! Time grid, Brownian increments and the exponential randomization.
//!
//! Every path owns two independent counter-based random streams keyed by
//! `(master_seed, path index, purpose)`: one for its Brownian increments and
//! one for its exponential jump time. Paths can therefore be generated in any
//! order, on any number of threads, and still reproduce bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `0 = t_0 < t_1 < ... < t_M = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node time `t_i`; the last node is the horizon exactly.
    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Smallest node index `i` with `t_i >= t`, or `None` when `t > T`.
    pub fn first_node_at_or_after(&self, t: f64) -> Option<usize> {
        if t > self.horizon {
            return None;
        }
        let mut i = ((t / self.dt).ceil().max(0.0) as usize).min(self.steps);
        // Correct for rounding in the division.
        while i > 0 && self.time(i - 1) >= t {
            i -= 1;
        }
        while self.time(i) < t {
            i += 1;
        }
        Some(i)
    }
}

/// Purpose tag mixed into a path's stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamPurpose {
    Brownian,
    Eta,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Brownian => 0x6272_6f77_6e69_616e,
            StreamPurpose::Eta => 0x6574_615f_6a75_6d70,
        }
    }
}

/// The random stream of one path for one purpose.
pub fn path_stream(master_seed: u64, path: usize, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.tag().to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path as u64);
    rng
}

/// Brownian increments `ΔW[p][i][d]` over the intervals `(t_i, t_{i+1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    master_seed: u64,
    increments: Vec<f64>,
}

impl PathBundle {
    pub fn sample(grid: &TimeGrid, paths: usize, dim: usize, master_seed: u64) -> Result<Self> {
        if paths == 0 {
            return Err(Error::Config("path count must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::Config(
                "Brownian dimension must be at least 1".into(),
            ));
        }
        let per_path = grid.steps() * dim;
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; paths * per_path];
        increments
            .par_chunks_mut(per_path)
            .enumerate()
            .for_each(|(p, out)| {
                let mut rng = path_stream(master_seed, p, StreamPurpose::Brownian);
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z * sd;
                }
            });
        Ok(Self {
            grid: *grid,
            paths,
            dim,
            master_seed,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// `ΔW` of path `p` over `(t_i, t_{i+1}]`, one entry per Brownian dimension.
    pub fn increment(&self, p: usize, i: usize) -> &[f64] {
        let at = (p * self.grid.steps() + i) * self.dim;
        &self.increments[at..at + self.dim]
    }

    /// `W_T - W_0` for path `p`.
    pub fn terminal_value(&self, p: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for i in 0..self.grid.steps() {
            for (acc, dw) in w.iter_mut().zip(self.increment(p, i)) {
                *acc += dw;
            }
        }
        w
    }
}

/// The exponential jump time η of every path with its grid bookkeeping.
///
/// `N_t = 1{η <= t}` and `A_t = t ∧ η` are evaluated on demand from `eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRandomization {
    grid: TimeGrid,
    master_seed: u64,
    eta: Vec<f64>,
    jump_index: Vec<Option<usize>>,
}

impl JumpRandomization {
    pub fn sample(grid: &TimeGrid, paths: usize, master_seed: u64) -> Result<Self> {
        if paths == 0 {
            return Err(Error::Config("path count must be at least 1".into()));
        }
        let eta: Vec<f64> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = path_stream(master_seed, p, StreamPurpose::Eta);
                rng.sample(Exp1)
            })
            .collect();
        Ok(Self::from_eta(grid, eta, master_seed))
    }

    /// Builds the bookkeeping for given jump times.
    pub fn from_eta(grid: &TimeGrid, eta: Vec<f64>, master_seed: u64) -> Self {
        let jump_index = eta
            .iter()
            .map(|&e| grid.first_node_at_or_after(e))
            .collect();
        Self {
            grid: *grid,
            master_seed,
            eta,
            jump_index,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.eta.len()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn eta(&self, p: usize) -> f64 {
        self.eta[p]
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    /// First node with `t_i >= η`, `None` when the jump falls after the horizon.
    pub fn jump_index(&self, p: usize) -> Option<usize> {
        self.jump_index[p]
    }

    /// Left node of the grid interval `(t_{j-1}, t_j]` holding the jump.
    pub fn jump_left_node(&self, p: usize) -> Option<usize> {
        self.jump_index[p].map(|j| j.saturating_sub(1))
    }

    /// `N_{t_i}` for path `p`.
    pub fn counting(&self, p: usize, i: usize) -> f64 {
        match self.jump_index[p] {
            Some(j) if i >= j => 1.0,
            _ => 0.0,
        }
    }

    /// `A_{t_i} = t_i ∧ η`.
    pub fn compensator(&self, p: usize, i: usize) -> f64 {
        self.grid.time(i).min(self.eta[p])
    }

    /// `A_{t_{i+1}} - A_{t_i}` for `i < M`.
    pub fn compensator_increment(&self, p: usize, i: usize) -> f64 {
        let e = self.eta[p];
        let a = self.grid.time(i).min(e);
        let b = self.grid.time(i + 1).min(e);
        b - a
    }

    /// `t_i < η`: the path has not jumped by node `i`.
    pub fn alive(&self, p: usize, i: usize) -> bool {
        self.grid.time(i) < self.eta[p]
    }

    /// `η <= T`.
    pub fn jumps_before_horizon(&self, p: usize) -> bool {
        self.jump_index[p].is_some()
    }
}

/// Parameters identifying a dumped scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpKey {
    pub seed: u64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub dim: usize,
}

const DUMP_MAGIC: &[u8; 8] = b"STOPLAB1";

/// Writes increments and jump times as little-endian `f64` after a header
/// `magic, seed: u64, T: f64, M: u64, P: u64, m: u64`.
pub fn write_dump<W: Write>(mut w: W, paths: &PathBundle, jumps: &JumpRandomization) -> Result<()> {
    if paths.grid != jumps.grid || paths.paths != jumps.paths() {
        return Err(Error::GridMismatch(
            "path bundle and jump randomization disagree".into(),
        ));
    }
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&paths.master_seed.to_le_bytes())?;
    w.write_all(&paths.grid.horizon().to_le_bytes())?;
    w.write_all(&(paths.grid.steps() as u64).to_le_bytes())?;
    w.write_all(&(paths.paths as u64).to_le_bytes())?;
    w.write_all(&(paths.dim as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity((paths.increments.len() + jumps.eta.len()) * 8);
    for v in paths.increments.iter().chain(&jumps.eta) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dump<R: Read>(mut r: R) -> Result<(DumpKey, PathBundle, JumpRandomization)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let seed = u64::from_le_bytes(next(&mut r)?);
    let horizon = f64::from_le_bytes(next(&mut r)?);
    let steps = u64::from_le_bytes(next(&mut r)?) as usize;
    let paths = u64::from_le_bytes(next(&mut r)?) as usize;
    let dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let grid = TimeGrid::new(horizon, steps)?;
    if paths == 0 || dim == 0 {
        return Err(Error::Dump("zero path count or dimension".into()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let n_inc = paths * steps * dim;
    if body.len() != (n_inc + paths) * 8 {
        return Err(Error::Dump(format!(
            "expected {} payload bytes, found {}",
            (n_inc + paths) * 8,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let increments: Vec<f64> = values.by_ref().take(n_inc).collect();
    let eta: Vec<f64> = values.collect();
    let key = DumpKey {
        seed,
        horizon,
        steps,
        paths,
        dim,
    };
    let bundle = PathBundle {
        grid,
        paths,
        dim,
        master_seed: seed,
        increments,
    };
    let jumps = JumpRandomization::from_eta(&grid, eta, seed);
    Ok((key, bundle, jumps))
}

pub fn save_dump(path: &Path, paths: &PathBundle, jumps: &JumpRandomization) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dump(f, paths, jumps)
}

/// Reloads a dump and checks it was produced for `expected`.
pub fn load_dump(path: &Path, expected: &DumpKey) -> Result<(PathBundle, JumpRandomization)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (key, bundle, jumps) = read_dump(f)?;
    if &key != expected {
        return Err(Error::Dump(format!(
            "dump key {key:?} does not match {expected:?}"
        )));
    }
    Ok((bundle, jumps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    #[test]
    fn grid_examples() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 1.0]);
        assert_eq!(g.dt(), 1.0);

        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let g = TimeGrid::new(2.0, 50).unwrap();
        assert!((g.dt() - 0.04).abs() < 1e-16);
        assert_eq!(g.time(50), 2.0);
        let nodes = g.nodes();
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(matches!(TimeGrid::new(0.0, 4), Err(Error::Config(_))));
        assert!(matches!(TimeGrid::new(-1.0, 4), Err(Error::Config(_))));
        assert!(matches!(TimeGrid::new(1.0, 0), Err(Error::Config(_))));
        assert!(TimeGrid::new(f64::NAN, 3).is_err());
    }

    #[test]
    fn first_node_lookup() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.first_node_at_or_after(0.3), Some(2));
        assert_eq!(g.first_node_at_or_after(0.25), Some(1));
        assert_eq!(g.first_node_at_or_after(0.0), Some(0));
        assert_eq!(g.first_node_at_or_after(1.0), Some(4));
        assert_eq!(g.first_node_at_or_after(1.0 + 1e-12), None);
        let g = TimeGrid::new(1.0, 10).unwrap();
        // 0.3 / 0.1 rounds above 3 in floating point; t_3 = 0.30000000000000004 > 0.3
        assert_eq!(g.first_node_at_or_after(0.3), Some(3));
        assert_eq!(g.first_node_at_or_after(g.time(3)), Some(3));
    }

    #[test]
    fn brownian_moments_and_determinism() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = 100_000;
        let b = PathBundle::sample(&g, p, 1, 11).unwrap();
        let col: Vec<f64> = (0..p).map(|k| b.increment(k, 0)[0]).collect();
        let e = Estimate::from_samples(&col);
        assert!(e.mean.abs() <= 4.0 * (g.dt() / p as f64).sqrt());
        let var = e.se * e.se * p as f64;
        assert!((var - g.dt()).abs() <= 0.05 * g.dt());

        let again = PathBundle::sample(&g, p, 1, 11).unwrap();
        assert_eq!(b, again);
        let other = PathBundle::sample(&g, p, 1, 12).unwrap();
        assert_ne!(b, other);
    }

    #[test]
    fn sampling_is_thread_count_independent() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = PathBundle::sample(&g, 3000, 2, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let b = pool.install(|| PathBundle::sample(&g, 3000, 2, 5).unwrap());
        assert_eq!(a, b);
        let ja = JumpRandomization::sample(&g, 3000, 5).unwrap();
        let jb = pool.install(|| JumpRandomization::sample(&g, 3000, 5).unwrap());
        assert_eq!(ja, jb);
    }

    #[test]
    fn eta_tail_fraction() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let p = 100_000;
        let j = JumpRandomization::sample(&g, p, 3).unwrap();
        let beyond: Vec<f64> = (0..p)
            .map(|k| if j.eta(k) > 1.0 { 1.0 } else { 0.0 })
            .collect();
        let e = Estimate::from_samples(&beyond);
        assert!(e.within((-1.0f64).exp(), 3.0, 0.0), "{e:?}");
    }

    #[test]
    fn jump_bookkeeping_inside_horizon() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let j = JumpRandomization::from_eta(&g, vec![0.3], 0);
        assert_eq!(j.jump_index(0), Some(2));
        let n: Vec<f64> = (0..=4).map(|i| j.counting(0, i)).collect();
        assert_eq!(n, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        let a: Vec<f64> = (0..=4).map(|i| j.compensator(0, i)).collect();
        assert_eq!(a, vec![0.0, 0.25, 0.3, 0.3, 0.3]);
        assert_eq!(j.jump_left_node(0), Some(1));
    }

    #[test]
    fn jump_after_horizon() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let j = JumpRandomization::from_eta(&g, vec![5.0], 0);
        assert_eq!(j.jump_index(0), None);
        for i in 0..=4 {
            assert_eq!(j.counting(0, i), 0.0);
            assert_eq!(j.compensator(0, i), g.time(i));
        }
    }

    #[test]
    fn jump_on_a_node_counts_at_that_node() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let j = JumpRandomization::from_eta(&g, vec![0.5], 0);
        assert_eq!(j.jump_index(0), Some(2));
        assert_eq!(j.counting(0, 2), 1.0);
        assert!(!j.alive(0, 2));
    }

    #[test]
    fn eta_is_independent_of_brownian_terminal() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let p = 50_000;
        let b = PathBundle::sample(&g, p, 1, 99).unwrap();
        let j = JumpRandomization::sample(&g, p, 99).unwrap();
        let prod: Vec<f64> = (0..p)
            .map(|k| {
                let ind = if j.jumps_before_horizon(k) { 1.0 } else { 0.0 };
                ind * b.terminal_value(k)[0]
            })
            .collect();
        let w: Vec<f64> = (0..p).map(|k| b.terminal_value(k)[0]).collect();
        let ind: Vec<f64> = (0..p)
            .map(|k| if j.jumps_before_horizon(k) { 1.0 } else { 0.0 })
            .collect();
        let cov = Estimate::from_samples(&prod).mean
            - Estimate::from_samples(&w).mean * Estimate::from_samples(&ind).mean;
        let cov_se = Estimate::from_samples(&prod).se;
        assert!(cov.abs() <= 3.0 * cov_se, "cov {cov} se {cov_se}");
    }

    #[test]
    fn dump_round_trip() {
        let g = TimeGrid::new(1.5, 6).unwrap();
        let b = PathBundle::sample(&g, 37, 2, 8).unwrap();
        let j = JumpRandomization::sample(&g, 37, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("scene.bin");
        save_dump(&file, &b, &j).unwrap();
        let key = DumpKey {
            seed: 8,
            horizon: 1.5,
            steps: 6,
            paths: 37,
            dim: 2,
        };
        let (b2, j2) = load_dump(&file, &key).unwrap();
        assert_eq!(b, b2);
        assert_eq!(j, j2);
        let wrong = DumpKey { seed: 9, ..key };
        assert!(matches!(load_dump(&file, &wrong), Err(Error::Dump(_))));
        let bytes = std::fs::read(&file).unwrap();
        assert_eq!(bytes.len(), 48 + (37 * 6 * 2 + 37) * 8);
        assert!(read_dump(&bytes[..bytes.len() - 3]).is_err());
    }
}
