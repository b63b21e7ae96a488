//! Preference vectors on the probability simplex and the geometry used to
//! route them: grids, nearest-expert selection, and convex reconstruction
//! coordinates with a least-squares fallback for out-of-hull targets.

use crate::error::{Error, Result};

/// A point on the N-objective probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceVector {
    weights: Vec<f64>,
}

impl PreferenceVector {
    /// Validates and normalizes a preference vector.
    ///
    /// Entries must be non-negative and finite, and the sum must already be
    /// within 1e-6 of one; the stored vector is renormalized to sum exactly
    /// to one (signed zeros become plain zeros).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::NotOnSimplex("empty preference".into()));
        }
        for &w in &weights {
            if !w.is_finite() {
                return Err(Error::NotOnSimplex(format!("non-finite weight {w}")));
            }
            if w < 0.0 {
                return Err(Error::NotOnSimplex(format!("negative weight {w}")));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotOnSimplex(format!("weights sum to {sum}")));
        }
        Ok(Self { weights: weights.iter().map(|w| (w + 0.0) / sum).collect() })
    }

    /// Builds a preference from unnormalized non-negative weights by scaling
    /// them to sum to one. Used for inputs quoted at low precision.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::NotOnSimplex(format!("weights sum to {sum}")));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    /// One-hot preference on objective `index` out of `n`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::InvalidInput(format!("one-hot index {index} out of {n}")));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Self::new(w)
    }

    /// Number of objectives.
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Euclidean distance to another preference of the same dimension.
    pub fn distance(&self, other: &PreferenceVector) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Exact-hit comparison used by routing fast paths.
    pub fn coincides_with(&self, other: &PreferenceVector) -> bool {
        self.dim() == other.dim() && self.distance(other) < 1e-12
    }

    /// Zero-pads to `n` objectives (routing geometry is preserved for users
    /// that carry zero mass on the new coordinates).
    pub fn zero_pad(&self, n: usize) -> Result<Self> {
        if n < self.dim() {
            return Err(Error::InvalidInput(format!(
                "cannot pad {}-dim preference to {n}",
                self.dim()
            )));
        }
        let mut w = self.weights.clone();
        w.resize(n, 0.0);
        Self::new(w)
    }
}

/// All simplex lattice points with the given spacing, sorted lexicographically
/// by their weight vectors (ascending).
pub fn grid(n_objectives: usize, step: f64) -> Result<Vec<PreferenceVector>> {
    if n_objectives == 0 {
        return Err(Error::InvalidInput("grid needs at least one objective".into()));
    }
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidStep(step));
    }
    let k = (1.0 / step).round();
    if ((k * step) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidStep(step));
    }
    let k = k as u64;
    let mut points = Vec::new();
    let mut parts = vec![0u64; n_objectives];
    fill_compositions(&mut points, &mut parts, 0, k, k)?;
    Ok(points)
}

fn fill_compositions(
    out: &mut Vec<PreferenceVector>,
    parts: &mut Vec<u64>,
    pos: usize,
    remaining: u64,
    k: u64,
) -> Result<()> {
    if pos + 1 == parts.len() {
        parts[pos] = remaining;
        let weights = parts.iter().map(|&c| c as f64 / k as f64).collect();
        out.push(PreferenceVector::new(weights)?);
        return Ok(());
    }
    for c in 0..=remaining {
        parts[pos] = c;
        fill_compositions(out, parts, pos + 1, remaining - c, k)?;
    }
    Ok(())
}

/// The fixed 13-point evaluation set for three objectives.
///
/// Members quoted at two decimals (the 0.33 triple) are renormalized to exact
/// simplex membership.
pub fn eval_set_3obj() -> Vec<PreferenceVector> {
    const RAW: [[f64; 3]; 13] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.1, 0.1, 0.8],
        [0.1, 0.8, 0.1],
        [0.2, 0.2, 0.6],
        [0.2, 0.4, 0.4],
        [0.2, 0.6, 0.2],
        [0.33, 0.33, 0.33],
        [0.4, 0.4, 0.2],
        [0.4, 0.2, 0.4],
        [0.6, 0.2, 0.2],
        [0.8, 0.1, 0.1],
        [1.0, 0.0, 0.0],
    ];
    RAW.iter()
        .map(|w| PreferenceVector::normalized(w.to_vec()).expect("static eval set is valid"))
        .collect()
}

/// Indices of the `k` registry entries closest to `user` in Euclidean
/// distance, closest first; exact ties break toward the lower index.
pub fn nearest_experts(
    user: &PreferenceVector,
    registry: &[PreferenceVector],
    k: usize,
) -> Result<Vec<usize>> {
    if registry.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    if k == 0 || k > registry.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} out of range for registry of {}",
            registry.len()
        )));
    }
    for (i, p) in registry.iter().enumerate() {
        if p.dim() != user.dim() {
            return Err(Error::IncompatibleModels(format!(
                "registry entry {i} has dimension {} but user has {}",
                p.dim(),
                user.dim()
            )));
        }
    }
    let mut order: Vec<usize> = (0..registry.len()).collect();
    let dist: Vec<f64> = registry.iter().map(|p| user.distance(p)).collect();
    order.sort_by(|&i, &j| dist[i].partial_cmp(&dist[j]).unwrap().then(i.cmp(&j)));
    order.truncate(k);
    Ok(order)
}

/// Convex combination coefficients over a set of selected preferences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexCoords {
    /// Non-negative coefficients aligned with the selected preferences, sum 1.
    pub omega: Vec<f64>,
    /// True when the target lay outside the selected hull and the returned
    /// coefficients minimize Euclidean reconstruction error instead.
    pub projected: bool,
}

impl SimplexCoords {
    /// Reconstruction `sum omega_i * selected_i` as a raw weight vector.
    pub fn reconstruct(&self, selected: &[PreferenceVector]) -> Vec<f64> {
        let dim = selected.first().map_or(0, PreferenceVector::dim);
        let mut out = vec![0.0; dim];
        for (w, p) in self.omega.iter().zip(selected) {
            for (o, v) in out.iter_mut().zip(p.weights()) {
                *o += w * v;
            }
        }
        out
    }
}

/// Solves `sum omega_i * selected_i = user` with `omega` on the simplex.
///
/// The exact linear solve is used when the target lies in the selected hull;
/// a negative coordinate triggers a non-negative least-squares projection
/// onto the hull, flagged via `projected`. Affinely dependent selections are
/// rejected as degenerate unless the target exactly coincides with one of
/// them.
pub fn convex_coords(
    user: &PreferenceVector,
    selected: &[PreferenceVector],
) -> Result<SimplexCoords> {
    if selected.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    for p in selected {
        if p.dim() != user.dim() {
            return Err(Error::IncompatibleModels(format!(
                "selected preference has dimension {} but user has {}",
                p.dim(),
                user.dim()
            )));
        }
    }
    // Exact hit: one-hot at the first coinciding entry.
    if let Some(j) = selected.iter().position(|p| user.coincides_with(p)) {
        let mut omega = vec![0.0; selected.len()];
        omega[j] = 1.0;
        return Ok(SimplexCoords { omega, projected: false });
    }
    if selected.len() != user.dim() {
        return Err(Error::InvalidInput(format!(
            "need {} selected preferences for an exact solve, got {}",
            user.dim(),
            selected.len()
        )));
    }

    let n = user.dim();
    let mut omega = solve_square(selected, user.weights(), n)?;
    if omega.iter().all(|&w| w >= -1e-9) {
        for w in omega.iter_mut() {
            *w = w.max(0.0);
        }
        let sum: f64 = omega.iter().sum();
        for w in omega.iter_mut() {
            *w /= sum;
        }
        return Ok(SimplexCoords { omega, projected: false });
    }
    let omega = project_onto_hull(user, selected);
    Ok(SimplexCoords { omega, projected: true })
}

/// Gaussian elimination with partial pivoting on the square system
/// `[selected as columns] * omega = user`.
fn solve_square(selected: &[PreferenceVector], target: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = vec![vec![0.0f64; n + 1]; n];
    for (col, p) in selected.iter().enumerate() {
        for (row, &v) in p.weights().iter().enumerate() {
            a[row][col] = v;
        }
    }
    for (row, &v) in target.iter().enumerate() {
        a[row][n] = v;
    }
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot_abs < 1e-12 {
            return Err(Error::DegenerateSimplex(
                "selected preferences are affinely dependent".into(),
            ));
        }
        a.swap(col, pivot_row);
        for r in (col + 1)..n {
            let factor = a[r][col] / a[col][col];
            for c in col..=n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut omega = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = a[row][n];
        for c in (row + 1)..n {
            acc -= a[row][c] * omega[c];
        }
        omega[row] = acc / a[row][row];
    }
    Ok(omega)
}

/// Exact non-negative least squares on the simplex by active-set enumeration:
/// every support set is solved as an equality-constrained least-squares
/// problem and the feasible solution with the smallest reconstruction error
/// wins. Selected sets are tiny (the objective count), so enumeration is
/// cheap and deterministic.
fn project_onto_hull(user: &PreferenceVector, selected: &[PreferenceVector]) -> Vec<f64> {
    let m = selected.len();
    let dim = user.dim();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let Some(omega_s) = solve_support(user.weights(), selected, &support) else {
            continue;
        };
        if omega_s.iter().any(|&w| w < -1e-12) {
            continue;
        }
        let mut omega = vec![0.0; m];
        for (&idx, &w) in support.iter().zip(&omega_s) {
            omega[idx] = w.max(0.0);
        }
        let sum: f64 = omega.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        for w in omega.iter_mut() {
            *w /= sum;
        }
        let mut err = 0.0;
        for d in 0..dim {
            let recon: f64 = omega.iter().zip(selected).map(|(w, p)| w * p.weights()[d]).sum();
            err += (recon - user.weights()[d]).powi(2);
        }
        match &best {
            Some((best_err, _)) if *best_err <= err + 1e-15 => {}
            _ => best = Some((err, omega)),
        }
    }
    // The full-support singleton masks always include at least one feasible
    // solution (a vertex), so `best` is set.
    best.expect("at least one vertex projection is feasible").1
}

/// Least squares of `||sum_{i in support} omega_i sel_i - user||` subject to
/// `sum omega = 1`, by eliminating the first support coordinate.
fn solve_support(
    target: &[f64],
    selected: &[PreferenceVector],
    support: &[usize],
) -> Option<Vec<f64>> {
    let dim = target.len();
    let s0 = support[0];
    let free = &support[1..];
    if free.is_empty() {
        return Some(vec![1.0]);
    }
    // Residual system: for omega = e_{s0} + sum t_i (e_i - e_{s0}),
    // minimize ||A t - b|| with columns (sel_i - sel_{s0}).
    let k = free.len();
    let mut ata = vec![vec![0.0f64; k]; k];
    let mut atb = vec![0.0f64; k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for d in 0..dim {
                let ai = selected[free[i]].weights()[d] - selected[s0].weights()[d];
                let aj = selected[free[j]].weights()[d] - selected[s0].weights()[d];
                acc += ai * aj;
            }
            ata[i][j] = acc;
        }
        let mut acc = 0.0;
        for d in 0..dim {
            let ai = selected[free[i]].weights()[d] - selected[s0].weights()[d];
            acc += ai * (target[d] - selected[s0].weights()[d]);
        }
        atb[i] = acc;
    }
    let t = solve_symmetric(&mut ata, &mut atb)?;
    let mut omega = Vec::with_capacity(support.len());
    omega.push(1.0 - t.iter().sum::<f64>());
    omega.extend(t);
    Some(omega)
}

/// In-place Gaussian elimination for small symmetric systems; returns None on
/// singular input (the caller just skips that support set).
fn solve_symmetric(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())?;
        if pivot_abs < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in (col + 1)..n {
            let factor = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// A routing decision over a full expert registry: which experts were
/// selected and how much convex mass each carries.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingAssignment {
    /// Indices of the selected experts, closest first.
    pub selected: Vec<usize>,
    /// Convex mass per registry entry; nonzero only at `selected`, sums to 1.
    pub omega_r: Vec<f64>,
    /// True when the user preference lay outside the selected hull.
    pub projected: bool,
}

impl RoutingAssignment {
    /// Scatters positional coordinates into a dense registry-length vector.
    pub fn scatter(selected: Vec<usize>, coords: SimplexCoords, registry_len: usize) -> Self {
        let mut omega_r = vec![0.0; registry_len];
        for (&idx, &w) in selected.iter().zip(&coords.omega) {
            omega_r[idx] = w;
        }
        Self { selected, omega_r, projected: coords.projected }
    }
}

/// Composes nearest-expert selection and convex coordinates into a routing
/// assignment over the registry, selecting `k` experts.
pub fn assign(
    user: &PreferenceVector,
    registry: &[PreferenceVector],
    k: usize,
) -> Result<RoutingAssignment> {
    let selected = nearest_experts(user, registry, k)?;
    let picked: Vec<PreferenceVector> =
        selected.iter().map(|&i| registry[i].clone()).collect();
    let coords = convex_coords(user, &picked)?;
    Ok(RoutingAssignment::scatter(selected, coords, registry.len()))
}
