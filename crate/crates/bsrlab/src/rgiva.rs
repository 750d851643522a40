//! Two-step cluster construction: Poisson births with Markov growth, then
//! kernel-probability linking.
//!
//! Step 1 samples, per type `i`, a Poisson number of clusters with mean
//! `n * int_0^v a_i`, birth times i.i.d. with density proportional to `a_i`;
//! each cluster starts at its seed size and jumps by `j` at rate
//! `w * c_j(u)`, sampled exactly by thinning against the dominating rate
//! `w * max_u sum_j c_j`.  Step 2 links clusters `x, y` independently with
//! probability `1 - exp(-I/n)` where `I = int w_x w_y b` over their common
//! lifetime, evaluated exactly on the merged jump partition.
//!
//! The component of a distinguished cluster born at time 0 is sampled without
//! materializing the full O(m^2) linking: a breadth-first reveal draws each
//! pair's link indicator at most once, which leaves the component's
//! distribution unchanged while costing O(|component| * m).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graphsim::DisjointForest;
use crate::hydro::RateProfile;
use crate::{gridfn, Error, Result};

/// Full pairwise linking refuses clouds larger than this.
pub const LINK_GUARD: usize = 30_000;

/// Cloud sampling refuses expected sizes larger than this.
const CLOUD_GUARD: f64 = 1e8;

/// One cluster: birth time, type, and its piecewise-constant size path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterTrajectory {
    pub birth: f64,
    /// Type index (0-based); seed size is `K + type_idx + 1`.
    pub type_idx: usize,
    pub seed: u32,
    /// Strictly increasing jump times with their size increments.
    pub jumps: Vec<(f64, u32)>,
}

impl ClusterTrajectory {
    /// Size at time `u` (right-continuous; 0 before birth).
    pub fn size_at(&self, u: f64) -> u32 {
        if u < self.birth {
            return 0;
        }
        let mut w = self.seed;
        for &(tau, j) in &self.jumps {
            if tau <= u {
                w += j;
            } else {
                break;
            }
        }
        w
    }
}

/// Grows one cluster of the given type from `birth` to `v` by exact thinning.
pub fn grow_cluster<R: Rng + ?Sized>(
    profile: &RateProfile,
    type_idx: usize,
    birth: f64,
    v: f64,
    rng: &mut R,
) -> Result<ClusterTrajectory> {
    if type_idx >= usize::from(profile.k) {
        return Err(Error::Validation(format!(
            "type index {type_idx} out of range for K = {}",
            profile.k
        )));
    }
    if !(birth >= 0.0 && birth <= v) {
        return Err(Error::Validation(format!(
            "birth {birth} outside [0, {v}]"
        )));
    }
    if v > profile.horizon() + 1e-12 {
        return Err(Error::Validation(format!(
            "growth horizon {v} beyond profile horizon {}",
            profile.horizon()
        )));
    }
    let k = usize::from(profile.k);
    let total_c = profile.total_c();
    let c_max = gridfn::max_on(profile.h, &total_c, v);
    let seed = profile.seed_size(type_idx);
    let mut cluster = ClusterTrajectory {
        birth,
        type_idx,
        seed,
        jumps: Vec::new(),
    };
    if c_max <= 0.0 {
        return Ok(cluster);
    }
    let mut w = f64::from(seed);
    let mut tau = birth;
    loop {
        // Dominating exponential clock at rate w * c_max.
        tau += -rng.gen::<f64>().ln() / (w * c_max);
        if tau > v {
            break;
        }
        // One uniform handles accept/reject and the jump-size choice.
        let r = rng.gen::<f64>() * c_max;
        let mut cum = 0.0;
        let mut jump = 0u32;
        for j in 0..k {
            cum += profile.c_at(j, tau);
            if r < cum {
                jump = (j + 1) as u32;
                break;
            }
        }
        if jump > 0 {
            cluster.jumps.push((tau, jump));
            w += f64::from(jump);
        }
    }
    Ok(cluster)
}

/// A sampled cloud of clusters on `[0, v]` at scale `n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterCloud {
    pub clusters: Vec<ClusterTrajectory>,
    pub n: f64,
    pub v: f64,
}

/// Samples the Poisson cluster cloud under a (possibly inflated) profile.
pub fn sample_cloud<R: Rng + ?Sized>(
    profile: &RateProfile,
    n: f64,
    v: f64,
    rng: &mut R,
) -> Result<ClusterCloud> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Validation(format!("scale must be positive, got {n}")));
    }
    if v > profile.horizon() + 1e-12 {
        return Err(Error::Validation(format!(
            "cloud horizon {v} beyond profile horizon {}",
            profile.horizon()
        )));
    }
    let k = usize::from(profile.k);
    let h = profile.h;
    let mut expected_total = 0.0;
    let mut prefixes = Vec::with_capacity(k);
    for row in &profile.a {
        let prefix = gridfn::prefix_trapezoid(h, row);
        expected_total += n * gridfn::integral_between(h, &prefix, 0.0, v);
        prefixes.push(prefix);
    }
    if expected_total > CLOUD_GUARD {
        return Err(Error::SizeGuard(format!(
            "expected cloud size {expected_total:.3e} exceeds {CLOUD_GUARD:.0e}; lower n or v"
        )));
    }
    let mut clusters = Vec::new();
    for (i, prefix) in prefixes.iter().enumerate() {
        let mean = n * gridfn::integral_between(h, prefix, 0.0, v);
        if mean <= 0.0 {
            continue;
        }
        let count = Poisson::new(mean)
            .map_err(|e| Error::Validation(format!("bad birth intensity: {e}")))?
            .sample(rng) as u64;
        for _ in 0..count {
            let birth = gridfn::sample_by_density(h, prefix, v, rng.gen::<f64>())
                .expect("positive birth mass");
            clusters.push(grow_cluster(profile, i, birth, v, rng)?);
        }
    }
    Ok(ClusterCloud { clusters, n, v })
}

/// Exact pairing exponent `int w_x w_y b` over the common lifetime, using the
/// merged jump partition of the two size paths.
pub(crate) fn pair_interaction(
    x: &ClusterTrajectory,
    y: &ClusterTrajectory,
    h: f64,
    b_prefix: &[f64],
    v: f64,
) -> f64 {
    let start = x.birth.max(y.birth);
    if start >= v {
        return 0.0;
    }
    let mut wx = f64::from(x.size_at(start));
    let mut wy = f64::from(y.size_at(start));
    let mut ix = x.jumps.iter().skip_while(|(tau, _)| *tau <= start).peekable();
    let mut iy = y.jumps.iter().skip_while(|(tau, _)| *tau <= start).peekable();
    let mut lo = start;
    let mut total = 0.0;
    loop {
        let next_x = ix.peek().map(|(tau, _)| *tau).unwrap_or(f64::INFINITY);
        let next_y = iy.peek().map(|(tau, _)| *tau).unwrap_or(f64::INFINITY);
        let hi = next_x.min(next_y).min(v);
        if hi > lo {
            total += wx * wy * gridfn::integral_between(h, b_prefix, lo, hi);
        }
        if hi >= v {
            break;
        }
        if next_x <= next_y {
            let (_, j) = ix.next().unwrap();
            wx += f64::from(*j);
        } else {
            let (_, j) = iy.next().unwrap();
            wy += f64::from(*j);
        }
        lo = hi;
    }
    total
}

/// Probability that two given clusters are linked at scale `n` by time `v`.
pub fn pair_link_probability(
    x: &ClusterTrajectory,
    y: &ClusterTrajectory,
    profile: &RateProfile,
    n: f64,
    v: f64,
) -> f64 {
    let b_prefix = gridfn::prefix_trapezoid(profile.h, &profile.b);
    let i = pair_interaction(x, y, profile.h, &b_prefix, v);
    1.0 - (-i / n).exp()
}

/// Partition of a linked cloud with per-part volumes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkedComponents {
    /// Cluster indices per component.
    pub parts: Vec<Vec<usize>>,
    /// Volume (sum of sizes at `v`) per component, aligned with `parts`.
    pub volumes: Vec<f64>,
    pub largest_volume: f64,
}

/// Links every unordered cluster pair independently and returns the
/// component partition.  O(m^2); refuses clouds above [`LINK_GUARD`].
pub fn link_clusters<R: Rng + ?Sized>(
    cloud: &ClusterCloud,
    profile: &RateProfile,
    rng: &mut R,
) -> Result<LinkedComponents> {
    let m = cloud.clusters.len();
    if m > LINK_GUARD {
        return Err(Error::SizeGuard(format!(
            "cloud of {m} clusters exceeds the pairwise guard {LINK_GUARD}; lower n"
        )));
    }
    let h = profile.h;
    let b_prefix = gridfn::prefix_trapezoid(h, &profile.b);
    let v = cloud.v;
    let n = cloud.n;
    // Rows draw from independent deterministic streams so the pair loop can
    // parallelize while staying reproducible.
    let master: u64 = rng.gen();
    let links: Vec<(usize, usize)> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut row_rng = ChaCha8Rng::seed_from_u64(master);
            row_rng.set_stream(i as u64);
            let mut out = Vec::new();
            for j in (i + 1)..m {
                let inter =
                    pair_interaction(&cloud.clusters[i], &cloud.clusters[j], h, &b_prefix, v);
                let p = 1.0 - (-inter / n).exp();
                if row_rng.gen::<f64>() < p {
                    out.push((i, j));
                }
            }
            out
        })
        .collect();
    let mut forest = DisjointForest::new(m as u32);
    for (i, j) in links {
        let (a, b) = (forest.find(i as u32), forest.find(j as u32));
        if a != b {
            forest.union_roots(a, b);
        }
    }
    let mut part_of_root: std::collections::HashMap<u32, usize> = Default::default();
    let mut parts: Vec<Vec<usize>> = Vec::new();
    let mut volumes: Vec<f64> = Vec::new();
    for idx in 0..m {
        let root = forest.find(idx as u32);
        let slot = *part_of_root.entry(root).or_insert_with(|| {
            parts.push(Vec::new());
            volumes.push(0.0);
            parts.len() - 1
        });
        parts[slot].push(idx);
        volumes[slot] += f64::from(cloud.clusters[idx].size_at(v));
    }
    let largest_volume = volumes.iter().cloned().fold(0.0, f64::max);
    Ok(LinkedComponents {
        parts,
        volumes,
        largest_volume,
    })
}

/// Component of a distinguished root cluster, sampled by lazy reveal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RootComponentSample {
    /// Volume of the root's component at the horizon.
    pub volume: f64,
    /// Clusters in the root's component (root included).
    pub component_size: usize,
    /// Cloud size including the root.
    pub cloud_size: usize,
    /// Pair indicators actually drawn.
    pub pairs_examined: u64,
}

/// Samples the component of an extra cluster conditioned to be born at time 0
/// with the top type (seed `2K`), without materializing the full linking.
pub fn conditioned_root_component<R: Rng + ?Sized>(
    profile: &RateProfile,
    n: f64,
    t: f64,
    rng: &mut R,
) -> Result<RootComponentSample> {
    let mut cloud = sample_cloud(profile, n, t, rng)?;
    let root_type = usize::from(profile.k) - 1;
    let root = grow_cluster(profile, root_type, 0.0, t, rng)?;
    cloud.clusters.push(root);
    let root_idx = cloud.clusters.len() - 1;
    reveal_component(&cloud, profile, root_idx, rng)
}

/// Breadth-first reveal of one component: each pair's indicator is drawn at
/// most once, so the revealed component has the same law as under full
/// linking.
pub fn reveal_component<R: Rng + ?Sized>(
    cloud: &ClusterCloud,
    profile: &RateProfile,
    root_idx: usize,
    rng: &mut R,
) -> Result<RootComponentSample> {
    let m = cloud.clusters.len();
    if root_idx >= m {
        return Err(Error::Validation(format!(
            "root index {root_idx} out of range for cloud of {m}"
        )));
    }
    let h = profile.h;
    let b_prefix = gridfn::prefix_trapezoid(h, &profile.b);
    let v = cloud.v;
    let n = cloud.n;
    let mut unvisited: Vec<usize> = (0..m).filter(|i| *i != root_idx).collect();
    let mut queue = std::collections::VecDeque::from([root_idx]);
    let mut volume = f64::from(cloud.clusters[root_idx].size_at(v));
    let mut component_size = 1usize;
    let mut pairs_examined = 0u64;
    while let Some(x) = queue.pop_front() {
        let mut still_unvisited = Vec::with_capacity(unvisited.len());
        for &y in &unvisited {
            pairs_examined += 1;
            let inter = pair_interaction(&cloud.clusters[x], &cloud.clusters[y], h, &b_prefix, v);
            let p = 1.0 - (-inter / n).exp();
            if rng.gen::<f64>() < p {
                queue.push_back(y);
                volume += f64::from(cloud.clusters[y].size_at(v));
                component_size += 1;
            } else {
                still_unvisited.push(y);
            }
        }
        unvisited = still_unvisited;
    }
    Ok(RootComponentSample {
        volume,
        component_size,
        cloud_size: m,
        pairs_examined,
    })
}
