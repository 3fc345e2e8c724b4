//! Critical Galton-Watson trees conditioned on total size, and their
//! conversion into measured metric trees.
//!
//! The offspring law has generating function `f(s) = s + (1-s)^alpha / alpha`,
//! which is critical and has a regularly-varying tail of index `-1-alpha`;
//! at `alpha = 2` it degenerates to the binary law `p_0 = p_2 = 1/2`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("conditioned sampling failed after {attempts} attempts (n = {n})")]
    SamplingFailure { n: usize, attempts: usize },
    #[error("size-{n} trees have probability zero under this offspring law")]
    ImpossibleSize { n: usize },
    #[error("malformed tree file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rooted tree with edge resistances and vertex masses.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricTree {
    /// Parent of each vertex; `parent[root] == root`.
    pub parent: Vec<u32>,
    /// Length (resistance) of the edge to the parent; unused at the root.
    pub edge_length: Vec<f64>,
    /// Vertex masses.
    pub mass: Vec<f64>,
    pub root: u32,
    /// Distinguished second vertex, when chosen.
    pub marked: Option<u32>,
}

impl MetricTree {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Children lists in CSR form: `(offsets, children)`.
    pub fn children_csr(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.len();
        let mut offsets = vec![0u32; n + 1];
        for v in 0..n {
            if v as u32 != self.root {
                offsets[self.parent[v] as usize + 1] += 1;
            }
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut children = vec![0u32; n - 1];
        for v in 0..n {
            if v as u32 != self.root {
                let p = self.parent[v] as usize;
                children[cursor[p] as usize] = v as u32;
                cursor[p] += 1;
            }
        }
        (offsets, children)
    }

    /// Distances from `start` in the resistance metric.
    pub fn distances_from(&self, start: u32) -> Vec<f64> {
        let n = self.len();
        let (offsets, children) = self.children_csr();
        let mut dist = vec![f64::INFINITY; n];
        dist[start as usize] = 0.0;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            let dv = dist[v as usize];
            let vi = v as usize;
            if v != self.root {
                let p = self.parent[vi];
                if dist[p as usize].is_infinite() {
                    dist[p as usize] = dv + self.edge_length[vi];
                    stack.push(p);
                }
            }
            for &c in &children[offsets[vi] as usize..offsets[vi + 1] as usize] {
                if dist[c as usize].is_infinite() {
                    dist[c as usize] = dv + self.edge_length[c as usize];
                    stack.push(c);
                }
            }
        }
        dist
    }

    /// Resistance-metric diameter via the two-sweep farthest-point method.
    pub fn diameter(&self) -> f64 {
        if self.len() <= 1 {
            return 0.0;
        }
        let d0 = self.distances_from(self.root);
        let far = (0..self.len())
            .max_by(|&a, &b| d0[a].partial_cmp(&d0[b]).unwrap())
            .unwrap() as u32;
        let d1 = self.distances_from(far);
        d1.iter().cloned().fold(0.0, f64::max)
    }

    /// Maximum distance from the root.
    pub fn height(&self) -> f64 {
        self.distances_from(self.root)
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Sample a vertex with probability proportional to its mass and record
    /// it as the marked vertex.
    pub fn pick_mass_vertex<R: Rng>(&mut self, rng: &mut R) -> u32 {
        let total = self.total_mass();
        assert!(total > 0.0, "pick_mass_vertex requires positive total mass");
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = self.len() - 1;
        for (v, &m) in self.mass.iter().enumerate() {
            if u < m {
                chosen = v;
                break;
            }
            u -= m;
        }
        self.marked = Some(chosen as u32);
        chosen as u32
    }

    /// Newline-delimited text serialisation: header `n root`, then one
    /// `index parent edge_length mass` line per vertex.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.root)?;
        for v in 0..self.len() {
            writeln!(
                w,
                "{} {} {} {}",
                v, self.parent[v], self.edge_length[v], self.mass[v]
            )?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, TreeError> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut it = header.split_whitespace();
        let n: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TreeError::Parse("missing vertex count".into()))?;
        let root: u32 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TreeError::Parse("missing root index".into()))?;
        let mut parent = vec![0u32; n];
        let mut edge_length = vec![0.0; n];
        let mut mass = vec![0.0; n];
        let mut line = String::new();
        for _ in 0..n {
            line.clear();
            r.read_line(&mut line)?;
            let mut f = line.split_whitespace();
            let idx: usize = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TreeError::Parse(format!("bad vertex line: {line}")))?;
            if idx >= n {
                return Err(TreeError::Parse(format!("vertex index {idx} out of range")));
            }
            parent[idx] = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TreeError::Parse("missing parent".into()))?;
            edge_length[idx] = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TreeError::Parse("missing edge length".into()))?;
            mass[idx] = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TreeError::Parse("missing mass".into()))?;
        }
        Ok(MetricTree {
            parent,
            edge_length,
            mass,
            root,
            marked: None,
        })
    }
}

/// Critical offspring law with generating function `s + (1-s)^alpha / alpha`.
#[derive(Debug, Clone, Copy)]
pub struct OffspringLaw {
    pub alpha: f64,
}

pub fn stable_offspring_law(alpha: f64) -> Result<OffspringLaw, TreeError> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(TreeError::InvalidParams(format!("alpha = {alpha} not in (1,2]")));
    }
    Ok(OffspringLaw { alpha })
}

impl OffspringLaw {
    /// pmf values `p_0 .. p_{len-1}`, computed by the tail recurrence
    /// `T_k = T_{k-1} (k - alpha)/k`, `p_k = T_{k-1} alpha / k`.
    pub fn pmf_table(&self, len: usize) -> Vec<f64> {
        let a = self.alpha;
        let mut p = Vec::with_capacity(len);
        if len == 0 {
            return p;
        }
        p.push(1.0 / a);
        if len > 1 {
            p.push(0.0);
        }
        let mut tail = (a - 1.0) / a; // T_1
        for k in 2..len {
            let kf = k as f64;
            p.push(tail * a / kf);
            tail *= (kf - a) / kf;
        }
        p
    }

    /// Exact tail mass `P(offspring > k)` for `k >= 1`:
    /// `-Gamma(k+1-alpha) / (alpha Gamma(k+1) Gamma(1-alpha))`.
    pub fn tail(&self, k: usize) -> f64 {
        let a = self.alpha;
        if k == 0 {
            return 1.0 - 1.0 / a;
        }
        if a == 2.0 {
            return if k < 2 { 0.5 } else { 0.0 };
        }
        let kf = k as f64;
        // Gamma(1-alpha) < 0 for alpha in (1,2); use
        // |Gamma(1-alpha)| = Gamma(2-alpha)/(alpha-1) and cancel signs.
        let ln_gamma_1ma_abs = ln_gamma(2.0 - a) - (a - 1.0).ln();
        (ln_gamma(kf + 1.0 - a) - ln_gamma(kf + 1.0) - ln_gamma_1ma_abs).exp() / a
    }
}

enum SamplerMode {
    /// Table-inversion rejection: draw n i.i.d. counts, retry until the sum
    /// is n-1.
    Rejection { cumulative: Vec<f64> },
    /// Divide-and-conquer conditioned-sum sampling on exact partial-sum
    /// pmfs (computed once by FFT self-convolution).
    Split { pmfs: HashMap<usize, Arc<Vec<f64>>> },
}

/// Sampler for offspring-count vectors of length `n` conditioned to sum to
/// `n - 1`, reusable across replicates of the same size.
pub struct ConditionedSampler {
    law: OffspringLaw,
    n: usize,
    mode: SamplerMode,
}

/// Sizes at or below this use plain rejection; larger sizes use the
/// divide-and-conquer sampler whose per-tree cost is O(n log n).
pub const REJECTION_MAX_N: usize = 512;

const MAX_ATTEMPTS: usize = 200_000_000;

impl ConditionedSampler {
    pub fn new(law: OffspringLaw, n: usize) -> Result<Self, TreeError> {
        Self::with_mode(law, n, n <= REJECTION_MAX_N)
    }

    pub fn with_mode(law: OffspringLaw, n: usize, rejection: bool) -> Result<Self, TreeError> {
        if n == 0 {
            return Err(TreeError::InvalidParams("n must be >= 1".into()));
        }
        let pmf = law.pmf_table(n.max(2));
        let mode = if rejection {
            let mut cumulative = pmf.clone();
            let mut acc = 0.0;
            for c in cumulative.iter_mut() {
                acc += *c;
                *c = acc;
            }
            SamplerMode::Rejection { cumulative }
        } else {
            SamplerMode::Split {
                pmfs: build_split_pmfs(&pmf, n),
            }
        };
        Ok(Self { law, n, mode })
    }

    /// Offspring counts (preorder, pre-rotation) summing to `n - 1`.
    pub fn sample_counts<R: Rng>(&self, rng: &mut R) -> Result<Vec<u32>, TreeError> {
        let n = self.n;
        if n == 1 {
            return Ok(vec![0]);
        }
        match &self.mode {
            SamplerMode::Rejection { cumulative } => {
                let target = (n - 1) as u64;
                let mut counts = vec![0u32; n];
                'attempt: for _ in 0..MAX_ATTEMPTS {
                    let mut sum = 0u64;
                    for slot in counts.iter_mut() {
                        let u = rng.gen::<f64>();
                        // Values >= n would force the sum past the target.
                        let k = cumulative.partition_point(|&c| c < u);
                        if k >= cumulative.len() {
                            continue 'attempt;
                        }
                        sum += k as u64;
                        if sum > target {
                            continue 'attempt;
                        }
                        *slot = k as u32;
                    }
                    if sum == target {
                        return Ok(counts);
                    }
                }
                Err(TreeError::SamplingFailure {
                    n,
                    attempts: MAX_ATTEMPTS,
                })
            }
            SamplerMode::Split { pmfs } => {
                let mut counts = Vec::with_capacity(n);
                // Explicit work stack of (block size, required sum).
                let mut work = vec![(n, n - 1)];
                while let Some((k, m)) = work.pop() {
                    if k == 1 {
                        counts.push(m as u32);
                        continue;
                    }
                    let kl = k / 2;
                    let kr = k - kl;
                    let pl = &pmfs[&kl];
                    let pr = &pmfs[&kr];
                    let lo = m.saturating_sub(pr.len() - 1);
                    let hi = m.min(pl.len() - 1);
                    let mut total = 0.0;
                    for j in lo..=hi {
                        total += pl[j] * pr[m - j];
                    }
                    if !(total > 0.0) {
                        return Err(TreeError::ImpossibleSize { n });
                    }
                    let u = rng.gen::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = hi;
                    for j in lo..=hi {
                        acc += pl[j] * pr[m - j];
                        if acc >= u {
                            pick = j;
                            break;
                        }
                    }
                    // Right block first so that counts come out in order.
                    work.push((kr, m - pick));
                    work.push((kl, pick));
                }
                Ok(counts)
            }
        }
    }

    pub fn law(&self) -> OffspringLaw {
        self.law
    }
}

fn build_split_pmfs(pmf: &[f64], n: usize) -> HashMap<usize, Arc<Vec<f64>>> {
    let mut sizes = vec![n];
    let mut queue = vec![n];
    while let Some(k) = queue.pop() {
        if k <= 1 {
            continue;
        }
        for half in [k / 2, k - k / 2] {
            if !sizes.contains(&half) {
                sizes.push(half);
                queue.push(half);
            }
        }
    }
    sizes.sort_unstable();
    let mut planner = FftPlanner::<f64>::new();
    let mut pmfs: HashMap<usize, Arc<Vec<f64>>> = HashMap::new();
    let cap = n; // support truncated to sums <= n - 1
    for &k in &sizes {
        if k == 1 {
            pmfs.insert(1, Arc::new(pmf[..cap.min(pmf.len())].to_vec()));
            continue;
        }
        let a = pmfs[&(k / 2)].clone();
        let b = pmfs[&(k - k / 2)].clone();
        let conv = fft_convolve(&a, &b, cap, &mut planner);
        pmfs.insert(k, Arc::new(conv));
    }
    pmfs
}

fn fft_convolve(a: &[f64], b: &[f64], cap: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let out_len = (a.len() + b.len() - 1).min(cap);
    let size = (a.len() + b.len() - 1).next_power_of_two();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut fa: Vec<Complex64> = a
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut fb: Vec<Complex64> = b
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..out_len]
        .iter()
        .map(|c| (c.re * scale).max(0.0))
        .collect()
}

/// Rotate an offspring-count vector with sum `n - 1` so that its Lukasiewicz
/// path stays non-negative until the final step (cycle lemma: rotate to just
/// after the first position attaining the minimal prefix sum).
pub fn rotate_to_excursion(counts: &mut Vec<u32>) {
    let n = counts.len();
    let mut sum = 0i64;
    let mut min = i64::MAX;
    let mut argmin = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        sum += c as i64 - 1;
        if sum < min {
            min = sum;
            argmin = i;
        }
    }
    debug_assert_eq!(sum, -1);
    counts.rotate_left((argmin + 1) % n);
}

/// Preorder parent array from an excursion-ordered offspring sequence.
fn tree_from_offspring(counts: &[u32]) -> MetricTree {
    let n = counts.len();
    let mut parent = vec![0u32; n];
    let mut stack: Vec<(u32, u32)> = vec![(0, counts[0])];
    for v in 1..n {
        while stack.last().map(|&(_, r)| r == 0).unwrap_or(false) {
            stack.pop();
        }
        let top = stack.last_mut().expect("excursion property");
        parent[v] = top.0;
        top.1 -= 1;
        stack.push((v as u32, counts[v]));
    }
    MetricTree {
        parent,
        edge_length: vec![1.0; n],
        mass: vec![1.0; n],
        root: 0,
        marked: None,
    }
}

/// A Galton-Watson tree conditioned on n vertices, with unit edge lengths and
/// unit vertex masses.
pub fn sample_conditioned_tree(
    law: OffspringLaw,
    n: usize,
    seed: u64,
) -> Result<MetricTree, TreeError> {
    let sampler = ConditionedSampler::new(law, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_tree_with(&sampler, &mut rng)
}

/// As [`sample_conditioned_tree`] but reusing a prepared sampler and RNG.
pub fn sample_tree_with<R: Rng>(
    sampler: &ConditionedSampler,
    rng: &mut R,
) -> Result<MetricTree, TreeError> {
    let mut counts = sampler.sample_counts(rng)?;
    if counts.len() > 1 {
        rotate_to_excursion(&mut counts);
    }
    Ok(tree_from_offspring(&counts))
}

/// Rescale a unit tree of n vertices to the metric/measure normalisation:
/// every edge gets length `n^{-(alpha-1)/alpha}` and every vertex mass `1/n`.
pub fn rescale_to_metric(tree: &MetricTree, alpha: f64) -> MetricTree {
    let n = tree.len() as f64;
    let ell = n.powf(-(alpha - 1.0) / alpha);
    let mut out = tree.clone();
    for v in 0..tree.len() {
        out.edge_length[v] = if v as u32 == tree.root { 0.0 } else { ell };
        out.mass[v] = 1.0 / n;
    }
    out
}
