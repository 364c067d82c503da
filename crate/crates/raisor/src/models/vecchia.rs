//! Nearest-neighbor Vecchia structure: a random ordering, per-point neighbor
//! sets among previously-ordered points, and the sparse triangular factor of
//! the implied precision for a given set of correlation parameters.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::models::matern::matern32;

/// Distance between spatial locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Straight-line distance in the coordinate plane.
    Euclidean,
    /// Great-circle (haversine) distance in kilometers on a spherical Earth
    /// of radius 6371.0088 km; coordinates are (lon, lat) degrees.
    Geodesic,
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

impl DistanceMetric {
    pub fn distance(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        match self {
            DistanceMetric::Euclidean => {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                (dx * dx + dy * dy).sqrt()
            }
            DistanceMetric::Geodesic => {
                let to_rad = std::f64::consts::PI / 180.0;
                let (lon1, lat1) = (a[0] * to_rad, a[1] * to_rad);
                let (lon2, lat2) = (b[0] * to_rad, b[1] * to_rad);
                let s1 = ((lat2 - lat1) / 2.0).sin();
                let s2 = ((lon2 - lon1) / 2.0).sin();
                let h = s1 * s1 + lat1.cos() * lat2.cos() * s2 * s2;
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        }
    }
}

/// Default neighbor count `ceil(1.2 log10(n)^2)`.
pub fn default_k(n: usize) -> usize {
    let l = (n as f64).log10();
    (1.2 * l * l).ceil() as usize
}

/// Ordering, neighbor sets, and cached neighbor geometry. Built once per
/// dataset; independent of the correlation parameters.
#[derive(Debug, Clone)]
pub struct VecchiaStructure {
    /// Position in Vecchia order -> index in the caller's original order.
    ordering: Vec<usize>,
    /// For each ordered position, the ordered positions of its neighbors
    /// (all strictly earlier), ascending.
    neighbor_sets: Vec<Vec<usize>>,
    /// Distance from point i to each of its neighbors.
    dist_to: Vec<Vec<f64>>,
    /// Pairwise distances among the neighbors of point i.
    dist_among: Vec<DMatrix<f64>>,
    k: usize,
}

/// Build the structure with `k` nearest previously-ordered neighbors under a
/// seeded random ordering. Duplicate coordinates are rejected.
pub fn build_vecchia(
    coords: &[[f64; 2]],
    k: usize,
    ordering_seed: u64,
    metric: DistanceMetric,
) -> Result<VecchiaStructure> {
    let n = coords.len();
    let mut ordering: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(ordering_seed);
    ordering.shuffle(&mut rng);
    build_vecchia_with_ordering(coords, k, ordering, metric)
}

/// As [`build_vecchia`] with an explicit ordering (a permutation of `0..n`).
pub fn build_vecchia_with_ordering(
    coords: &[[f64; 2]],
    k: usize,
    ordering: Vec<usize>,
    metric: DistanceMetric,
) -> Result<VecchiaStructure> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no coordinates".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ordering.len() != n {
        return Err(Error::InvalidArgument("ordering length mismatch".into()));
    }
    {
        let mut seen = vec![false; n];
        for &i in &ordering {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument("ordering is not a permutation".into()));
            }
            seen[i] = true;
        }
    }

    let ordered: Vec<[f64; 2]> = ordering.iter().map(|&i| coords[i]).collect();

    let mut neighbor_sets = Vec::with_capacity(n);
    let mut dist_to = Vec::with_capacity(n);
    let mut dist_among = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        // Every earlier point is scanned, so duplicate pairs cannot slip past.
        scratch.clear();
        for j in 0..i {
            let d = metric.distance(&ordered[i], &ordered[j]);
            if d == 0.0 {
                return Err(Error::DuplicateLocation(ordering[j], ordering[i]));
            }
            scratch.push((d, j));
        }
        let take = k.min(scratch.len());
        if take > 0 && take < scratch.len() {
            // Ties break toward the earlier position for determinism.
            scratch.select_nth_unstable_by(take - 1, |a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            });
        }
        let mut positions: Vec<usize> = scratch[..take].iter().map(|&(_, j)| j).collect();
        positions.sort_unstable();
        let dists: Vec<f64> = positions
            .iter()
            .map(|&j| metric.distance(&ordered[i], &ordered[j]))
            .collect();
        let m = positions.len();
        let mut among = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                among[(a, b)] = metric.distance(&ordered[positions[a]], &ordered[positions[b]]);
            }
        }
        neighbor_sets.push(positions);
        dist_to.push(dists);
        dist_among.push(among);
    }

    Ok(VecchiaStructure {
        ordering,
        neighbor_sets,
        dist_to,
        dist_among,
        k,
    })
}

impl VecchiaStructure {
    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn neighbor_sets(&self) -> &[Vec<usize>] {
        &self.neighbor_sets
    }

    /// Coefficients and conditional variance of one ordered position at the
    /// given nugget fraction and range, in correlation scale.
    pub fn factor_row(&self, i: usize, tau_sq: f64, phi: f64) -> Result<FactorRow> {
        let nbrs = &self.neighbor_sets[i];
        let m = nbrs.len();
        if m == 0 {
            return Ok(FactorRow {
                coeffs: Vec::new(),
                cond_var: 1.0,
            });
        }
        let s = 1.0 - tau_sq;
        let mut c_n = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                c_n[(a, b)] = if a == b {
                    // Tiny jitter keeps near-singular neighbor sets factorable.
                    1.0 + 1e-10
                } else {
                    s * matern32(self.dist_among[i][(a, b)], phi)
                };
            }
        }
        let c = DVector::from_iterator(m, self.dist_to[i].iter().map(|&d| s * matern32(d, phi)));
        let chol = Cholesky::new(c_n)
            .ok_or_else(|| Error::Numerical(format!("neighbor matrix of row {i} not PD")))?;
        let coeffs = chol.solve(&c);
        let cond_var = (1.0 - c.dot(&coeffs)).max(1e-12);
        Ok(FactorRow {
            coeffs: coeffs.iter().cloned().collect(),
            cond_var,
        })
    }

    /// All factor rows for fixed correlation parameters.
    pub fn factor(&self, tau_sq: f64, phi: f64) -> Result<VecchiaFactor> {
        self.factor_prefix(tau_sq, phi, self.len())
    }

    /// Factor rows restricted to the first `upto` ordered positions; enough
    /// for any prefix likelihood since neighbors only look backwards.
    pub fn factor_prefix(&self, tau_sq: f64, phi: f64, upto: usize) -> Result<VecchiaFactor> {
        let upto = upto.min(self.len());
        let rows = (0..upto)
            .map(|i| self.factor_row(i, tau_sq, phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(VecchiaFactor {
            rows,
            structure_len: upto,
        })
    }
}

/// One row of the sparse triangular factor: kriging coefficients onto the
/// neighbor set and the conditional variance (correlation scale).
#[derive(Debug, Clone)]
pub struct FactorRow {
    pub coeffs: Vec<f64>,
    pub cond_var: f64,
}

/// The sparse lower-triangular factor `L` with `C^{-1} = L' L`, where `C` is
/// the approximated correlation matrix. Row `i` has `L_ii = d_i^{-1/2}` and
/// `L_{i,N(i)} = -b_i d_i^{-1/2}`.
#[derive(Debug, Clone)]
pub struct VecchiaFactor {
    rows: Vec<FactorRow>,
    structure_len: usize,
}

impl VecchiaFactor {
    pub fn len(&self) -> usize {
        self.structure_len
    }

    pub fn is_empty(&self) -> bool {
        self.structure_len == 0
    }

    pub fn rows(&self) -> &[FactorRow] {
        &self.rows
    }

    /// `L v` for a full-length vector in Vecchia order.
    pub fn apply(&self, structure: &VecchiaStructure, v: &DVector<f64>) -> DVector<f64> {
        let n = self.structure_len;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let row = &self.rows[i];
            let mut e = v[i];
            for (c, &j) in row.coeffs.iter().zip(structure.neighbor_sets[i].iter()) {
                e -= c * v[j];
            }
            out[i] = e / row.cond_var.sqrt();
        }
        out
    }

    /// `sum_i ln d_i`, the log determinant of the approximated correlation.
    pub fn log_det(&self) -> f64 {
        self.rows.iter().map(|r| r.cond_var.ln()).sum()
    }

    /// Forward-solve `L u = z`: simulate `u ~ Normal(0, C)` from white noise.
    pub fn solve_lower(&self, structure: &VecchiaStructure, z: &DVector<f64>) -> DVector<f64> {
        let n = self.structure_len;
        let mut u = DVector::zeros(n);
        for i in 0..n {
            let row = &self.rows[i];
            let mut mean = 0.0;
            for (c, &j) in row.coeffs.iter().zip(structure.neighbor_sets[i].iter()) {
                mean += c * u[j];
            }
            u[i] = mean + row.cond_var.sqrt() * z[i];
        }
        u
    }
}
