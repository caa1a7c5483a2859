//! Scalar Brownian motions `β_i` driving the noise modes.
//!
//! Every standard normal is addressed by `(seed, replication, mode lineage,
//! stream tag, index)`. Indices are grouped in blocks of [`BLOCK`]; a block
//! is produced by a ChaCha8 generator keyed by the whole tuple, so any value
//! can be regenerated on its own while sequential access stays cheap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::spectral::{splitmix64, MultiIndex};
use crate::timegrid::MergedTimeGrid;

/// Normals per generator block.
pub const BLOCK: usize = 1024;

/// Stream tag for draws on a mode's own grid.
const OWN_STREAM: u64 = 0x6f77_6e00;
/// Stream tag for draws on a shared coupling grid.
const PATH_STREAM: u64 = 0x7061_7468;
/// Stream tags `BRIDGE_STREAM + level` are used for bridge refinements.
const BRIDGE_STREAM: u64 = 0x6272_0000;

/// Master seed and replication number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub replication: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, replication: u64) -> Self {
        Self { seed, replication }
    }
}

fn block_rng(key: NoiseKey, lineage: u64, tag: u64, block: u64) -> ChaCha8Rng {
    let words = [
        key.seed,
        splitmix64(key.replication ^ 0x5eed),
        splitmix64(lineage ^ tag.rotate_left(32)),
        block,
    ];
    let mut bytes = [0u8; 32];
    for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// The standard normal at one address. Regenerates its whole block; use a
/// [`NormalStream`] for sequential access.
pub fn standard_normal(key: NoiseKey, lineage: u64, tag: u64, index: u64) -> f64 {
    let block = index / BLOCK as u64;
    let mut rng = block_rng(key, lineage, tag, block);
    let offset = (index % BLOCK as u64) as usize;
    let mut z = 0.0;
    for _ in 0..=offset {
        z = rng.sample(StandardNormal);
    }
    z
}

/// Block-cached access to the normals of one `(key, lineage, tag)` stream.
#[derive(Debug, Clone)]
pub struct NormalStream {
    key: NoiseKey,
    lineage: u64,
    tag: u64,
    block: Option<u64>,
    values: Vec<f64>,
}

impl NormalStream {
    pub fn new(key: NoiseKey, lineage: u64, tag: u64) -> Self {
        Self {
            key,
            lineage,
            tag,
            block: None,
            values: vec![0.0; BLOCK],
        }
    }

    pub fn get(&mut self, index: u64) -> f64 {
        let block = index / BLOCK as u64;
        if self.block != Some(block) {
            let mut rng = block_rng(self.key, self.lineage, self.tag, block);
            for v in self.values.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            self.block = Some(block);
        }
        self.values[(index % BLOCK as u64) as usize]
    }
}

/// Increments of each mode's Brownian motion over its own grid intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements {
    /// `increments[i][ℓ−1] = β_i(t_{ℓ,i}) − β_i(t_{ℓ−1,i})`
    pub increments: Vec<Vec<f64>>,
    /// Interval lengths, aligned with `increments`.
    pub lengths: Vec<Vec<f64>>,
    pub lineages: Vec<u64>,
    pub key: NoiseKey,
}

impl BrownianIncrements {
    pub fn mode_count(&self) -> usize {
        self.increments.len()
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        &self.increments[i]
    }

    /// `β_i` at the end of the first `intervals` own intervals.
    pub fn path_value(&self, i: usize, intervals: usize) -> f64 {
        self.increments[i][..intervals].iter().sum()
    }
}

/// Independent `N(0, Δt)` increments for every mode on its own grid.
///
/// `modes` supplies the lineage keys and must align with the grid's modes.
pub fn sample_increments(grid: &MergedTimeGrid, modes: &[MultiIndex], key: NoiseKey) -> BrownianIncrements {
    let mut increments = Vec::with_capacity(modes.len());
    let mut lengths = Vec::with_capacity(modes.len());
    let mut lineages = Vec::with_capacity(modes.len());
    for (i, mode) in modes.iter().enumerate() {
        let n = grid.own_steps(i);
        let lineage = mode.lineage_key();
        let mut stream = NormalStream::new(key, lineage, OWN_STREAM);
        let lens: Vec<f64> = if grid.is_common() {
            (1..=n as usize).map(|m| grid.dt(m)).collect()
        } else {
            vec![1.0 / n as f64; n as usize]
        };
        let incs = lens
            .iter()
            .enumerate()
            .map(|(l, len)| stream.get(l as u64) * len.sqrt())
            .collect();
        increments.push(incs);
        lengths.push(lens);
        lineages.push(lineage);
    }
    BrownianIncrements {
        increments,
        lengths,
        lineages,
        key,
    }
}

/// Splits `total`, the increment over an interval of length `length`, into
/// `factor` equal-length sub-increments drawn from the Brownian bridge.
///
/// Sub-increments are generated sequentially from their conditional laws and
/// the last one takes what remains, so they sum to `total`.
pub fn bridge_split(total: f64, length: f64, factor: usize, mut normal: impl FnMut() -> f64, out: &mut Vec<f64>) {
    let delta = length / factor as f64;
    let mut remaining_sum = total;
    let mut remaining_len = length;
    for k in 0..factor {
        if k + 1 == factor {
            out.push(remaining_sum);
            break;
        }
        let mean = remaining_sum * delta / remaining_len;
        let var = delta * (remaining_len - delta) / remaining_len;
        let piece = mean + var.max(0.0).sqrt() * normal();
        out.push(piece);
        remaining_sum -= piece;
        remaining_len -= delta;
    }
}

/// Refines every own-grid increment into `factor` bridge sub-increments.
/// `extension` separates independent refinements of the same parent.
pub fn refine(parent: &BrownianIncrements, factor: usize, extension: u64) -> BrownianIncrements {
    assert!(factor >= 2, "refinement factor must be at least 2");
    let mut increments = Vec::with_capacity(parent.mode_count());
    let mut lengths = Vec::with_capacity(parent.mode_count());
    for i in 0..parent.mode_count() {
        let mut stream = NormalStream::new(parent.key, parent.lineages[i], BRIDGE_STREAM ^ splitmix64(extension));
        let mut counter = 0u64;
        let mut incs = Vec::with_capacity(parent.increments[i].len() * factor);
        let mut lens = Vec::with_capacity(incs.capacity());
        for (&total, &len) in parent.increments[i].iter().zip(&parent.lengths[i]) {
            bridge_split(
                total,
                len,
                factor,
                || {
                    let z = stream.get(counter);
                    counter += 1;
                    z
                },
                &mut incs,
            );
            lens.extend(std::iter::repeat_n(len / factor as f64, factor));
        }
        increments.push(incs);
        lengths.push(lens);
    }
    BrownianIncrements {
        increments,
        lengths,
        lineages: parent.lineages.clone(),
        key: parent.key,
    }
}

/// Streaming generator of increments on a shared coupling grid.
///
/// Each base interval `q` of length `base_dt[q]` gets one draw per mode,
/// which is then halved `levels` times by bridge splits. A split at level
/// `l` of sub-interval `p` uses normal `p` of that level's stream, so paths
/// generated with fewer levels are exact coarsenings of those with more.
#[derive(Debug, Clone)]
pub struct PathSource {
    base_dt: Vec<f64>,
    levels: u32,
    base: Vec<NormalStream>,
    bridges: Vec<Vec<NormalStream>>,
    scratch: Vec<f64>,
}

impl PathSource {
    pub fn new(key: NoiseKey, lineages: &[u64], base_dt: Vec<f64>, levels: u32) -> Self {
        let base = lineages
            .iter()
            .map(|&l| NormalStream::new(key, l, PATH_STREAM))
            .collect();
        let bridges = lineages
            .iter()
            .map(|&l| {
                (1..=levels)
                    .map(|lv| NormalStream::new(key, l, BRIDGE_STREAM + u64::from(lv)))
                    .collect()
            })
            .collect();
        Self {
            base_dt,
            levels,
            base,
            bridges,
            scratch: Vec::new(),
        }
    }

    pub fn mode_count(&self) -> usize {
        self.base.len()
    }

    pub fn base_intervals(&self) -> usize {
        self.base_dt.len()
    }

    /// Sub-intervals per base interval.
    pub fn pieces(&self) -> usize {
        1 << self.levels
    }

    /// Writes the `pieces()` sub-increments of mode `i` over base interval
    /// `q` into `out`.
    pub fn fill(&mut self, i: usize, q: usize, out: &mut [f64]) {
        let len = self.base_dt[q];
        out[0] = self.base[i].get(q as u64) * len.sqrt();
        let mut width = 1usize;
        let mut piece_len = len;
        for level in 0..self.levels as usize {
            self.scratch.clear();
            let stream = &mut self.bridges[i][level];
            for (p, &total) in out[..width].iter().enumerate() {
                let index = (q * width + p) as u64;
                let half = 0.5 * total + 0.5 * piece_len.sqrt() * stream.get(index);
                self.scratch.push(half);
                self.scratch.push(total - half);
            }
            width *= 2;
            piece_len *= 0.5;
            out[..width].copy_from_slice(&self.scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{enumerate_modes, CovarianceProfile};
    use rayon::prelude::*;

    fn modes(k: usize) -> Vec<MultiIndex> {
        let p = CovarianceProfile::power(3.0).unwrap();
        enumerate_modes(1, k as f64, &p).unwrap()
    }

    #[test]
    fn deterministic_and_addressable() {
        let m = modes(3);
        let grid = MergedTimeGrid::build(&[5, 3, 2]).unwrap();
        let key = NoiseKey::new(42, 7);
        let a = sample_increments(&grid, &m, key);
        let b = sample_increments(&grid, &m, key);
        assert_eq!(a, b);
        let lineage = m[1].lineage_key();
        let z = standard_normal(key, lineage, OWN_STREAM, 2);
        assert_eq!(a.mode(1)[2], z * (1.0f64 / 3.0).sqrt());
        let other = sample_increments(&grid, &m, NoiseKey::new(42, 8));
        assert_ne!(a, other);
    }

    #[test]
    fn stream_matches_direct_addressing_across_blocks() {
        let key = NoiseKey::new(1, 2);
        let mut s = NormalStream::new(key, 99, 5);
        for &idx in &[0u64, 1, 1023, 1024, 5000, 3] {
            assert_eq!(s.get(idx), standard_normal(key, 99, 5, idx));
        }
    }

    #[test]
    fn terminal_value_has_unit_variance() {
        let m = modes(2);
        let grid = MergedTimeGrid::build(&[4, 3]).unwrap();
        let reps = 100_000u64;
        let (sum, sum_sq, cross) = (0..reps)
            .map(|r| {
                let inc = sample_increments(&grid, &m, NoiseKey::new(3, r));
                let b0 = inc.path_value(0, 4);
                let b1 = inc.path_value(1, 3);
                (b0, b0 * b0, b0 * b1)
            })
            .fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
        let n = reps as f64;
        let var = sum_sq / n - (sum / n).powi(2);
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{var}");
        assert!((cross / n).abs() < 3.0 / n.sqrt(), "{}", cross / n);
    }

    #[test]
    fn refinement_sums_to_parent() {
        let m = modes(3);
        let grid = MergedTimeGrid::build(&[6, 4, 1]).unwrap();
        let parent = sample_increments(&grid, &m, NoiseKey::new(5, 0));
        for factor in [2usize, 3, 7] {
            let fine = refine(&parent, factor, 1);
            for i in 0..3 {
                for (l, &p) in parent.mode(i).iter().enumerate() {
                    let s: f64 = fine.mode(i)[l * factor..(l + 1) * factor].iter().sum();
                    assert!((s - p).abs() < 1e-12);
                }
                let total: f64 = fine.lengths[i].iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bridge() {
        let mut out = Vec::new();
        bridge_split(0.0, 0.5, 4, || 0.0, &mut out);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn refined_marginal_variance() {
        let m = modes(1);
        let grid = MergedTimeGrid::build(&[1]).unwrap();
        let reps = 100_000u64;
        let mut sum_sq = [0.0; 2];
        for r in 0..reps {
            let parent = sample_increments(&grid, &m, NoiseKey::new(11, r));
            let fine = refine(&parent, 2, 0);
            for (acc, v) in sum_sq.iter_mut().zip(fine.mode(0)) {
                *acc += v * v;
            }
        }
        let n = reps as f64;
        for acc in sum_sq {
            let var = acc / n;
            // variance 1/2, sd of the estimator 1/2·(2/n)^{1/2}
            assert!((var - 0.5).abs() < 3.0 * 0.5 * (2.0 / n).sqrt(), "{var}");
        }
    }

    #[test]
    fn path_source_levels_are_nested() {
        let key = NoiseKey::new(9, 4);
        let lineages = [11u64, 12];
        let dt = vec![0.25, 0.125, 0.625];
        let mut coarse = PathSource::new(key, &lineages, dt.clone(), 1);
        let mut fine = PathSource::new(key, &lineages, dt.clone(), 3);
        let mut c = vec![0.0; 2];
        let mut f = vec![0.0; 8];
        for i in 0..2 {
            for q in 0..3 {
                coarse.fill(i, q, &mut c);
                fine.fill(i, q, &mut f);
                assert!((f[..4].iter().sum::<f64>() - c[0]).abs() < 1e-14);
                assert!((f[4..].iter().sum::<f64>() - c[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn path_source_variance() {
        let reps = 40_000u64;
        let mut acc = vec![0.0; 4];
        for r in 0..reps {
            let mut src = PathSource::new(NoiseKey::new(21, r), &[5], vec![0.5], 2);
            let mut out = vec![0.0; 4];
            src.fill(0, 0, &mut out);
            for (a, v) in acc.iter_mut().zip(&out) {
                *a += v * v;
            }
        }
        for a in acc {
            let var = a / reps as f64;
            assert!((var - 0.125).abs() < 3.0 * 0.125 * (2.0 / reps as f64).sqrt(), "{var}");
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let m = modes(4);
        let grid = MergedTimeGrid::build(&[9, 5, 3, 2]).unwrap();
        let serial: Vec<BrownianIncrements> =
            (0..16).map(|r| sample_increments(&grid, &m, NoiseKey::new(77, r))).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let parallel: Vec<BrownianIncrements> = pool.install(|| {
            (0..16u64)
                .into_par_iter()
                .map(|r| sample_increments(&grid, &m, NoiseKey::new(77, r)))
                .collect()
        });
        assert_eq!(serial, parallel);
    }
}
