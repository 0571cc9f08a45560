//! Orientation reconstruction from stroboscopic ODMR maps.
//!
//! Two stages: Gaussian line centres are extracted column by column, then a
//! single-axis rotation is fitted to the centres of one or two maps taken
//! with different field directions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Unit, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::nvspin::{class_transitions, NvModel, RotationModel, StroboMap};
use crate::rotor3d::Orientation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReconstructError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fields are {angle_deg:.2}° apart; a second field at least 10° from the first is required")]
    DegenerateGeometry { angle_deg: f64 },
    #[error("no start converged within {iterations} iterations")]
    NonConvergence { iterations: usize },
}

/// One fitted dip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonanceLine {
    /// Hz.
    pub center: f64,
    /// 1σ uncertainty of `center` (Hz).
    pub sigma: f64,
    /// Gaussian standard deviation of the dip (Hz).
    pub width: f64,
    pub depth: f64,
    /// Set when the dip is broader than a single line, i.e. two or more
    /// transitions closer than the linewidth.
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceColumn {
    pub delay: f64,
    /// Ascending in frequency.
    pub lines: Vec<ResonanceLine>,
    /// Fewer than the requested number of dips were found.
    pub too_few: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceTraces {
    pub columns: Vec<ResonanceColumn>,
    /// Frequency span of the source map (Hz).
    pub f_range: (f64, f64),
    /// Nominal line standard deviation (Hz).
    pub linewidth_sigma: f64,
    pub n_lines: usize,
}

impl ResonanceTraces {
    pub fn empty() -> Self {
        Self { columns: Vec::new(), f_range: (0.0, 0.0), linewidth_sigma: 1.0, n_lines: 0 }
    }

    pub fn line_count(&self) -> usize {
        self.columns.iter().map(|c| c.lines.len()).sum()
    }

    /// Adds seeded Gaussian noise of standard deviation `sigma` (Hz) to every
    /// centre and widens the reported uncertainties accordingly.
    pub fn with_center_noise(mut self, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        for col in &mut self.columns {
            for line in &mut col.lines {
                line.center += normal.sample(&mut rng);
                line.sigma = line.sigma.hypot(sigma);
            }
            col.lines.sort_by(|a, b| a.center.total_cmp(&b.center));
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    /// Minimum depth of a smoothed dip, as a fraction of unit PL.
    pub prominence: f64,
    /// A fitted width above this multiple of the nominal width marks a
    /// merged dip.
    pub merge_ratio: f64,
    /// So does a depth above this multiple of the largest class contrast.
    pub merge_depth_ratio: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { prominence: 0.004, merge_ratio: 1.1, merge_depth_ratio: 1.4 }
    }
}

pub fn extract_resonances(map: &StroboMap, n_lines: usize) -> Result<ResonanceTraces, ReconstructError> {
    extract_resonances_with(map, n_lines, &ExtractOptions::default())
}

/// Per column: dips of the PL smoothed by the nominal line shape are
/// located, then refined by a joint multi-Gaussian least-squares fit of each
/// cluster of nearby dips on the raw data.
pub fn extract_resonances_with(
    map: &StroboMap,
    n_lines: usize,
    opts: &ExtractOptions,
) -> Result<ResonanceTraces, ReconstructError> {
    let sigma = map.model.linewidth_sigma;
    let contrast = map.model.contrast.iter().fold(0.0f64, |a, &b| a.max(b));
    if n_lines == 0 {
        return Err(ReconstructError::InvalidArgument("n_lines must be at least 1".into()));
    }
    if map.freqs.len() < 3 {
        return Err(ReconstructError::InvalidArgument("map needs at least three frequencies".into()));
    }
    let step = (map.freqs[map.freqs.len() - 1] - map.freqs[0]) / (map.freqs.len() - 1) as f64;
    if !(step > 0.0) || step >= 2.355 * sigma {
        return Err(ReconstructError::InvalidArgument(format!(
            "frequency step {step:e} Hz must be positive and finer than the linewidth"
        )));
    }
    let columns = map
        .delays
        .par_iter()
        .zip(&map.pl)
        .map(|(&delay, pl)| extract_column(&map.freqs, pl, delay, sigma, contrast, step, n_lines, opts))
        .collect();
    Ok(ResonanceTraces {
        columns,
        f_range: (map.freqs[0], map.freqs[map.freqs.len() - 1]),
        linewidth_sigma: sigma,
        n_lines,
    })
}

/// Per-column data shared by the dip fits.
struct Column<'a> {
    freqs: &'a [f64],
    depth: Vec<f64>,
    smooth: Vec<f64>,
    sigma: f64,
    contrast: f64,
    step: f64,
    /// Estimated white-noise level of `depth`.
    noise: f64,
    opts: &'a ExtractOptions,
}

struct ClusterFit {
    lines: Vec<ResonanceLine>,
    ssr: f64,
}

#[allow(clippy::too_many_arguments)]
fn extract_column(
    freqs: &[f64],
    pl: &[f64],
    delay: f64,
    sigma: f64,
    contrast: f64,
    step: f64,
    n_lines: usize,
    opts: &ExtractOptions,
) -> ResonanceColumn {
    // Depth below the median level, which stands in for the off-resonance
    // baseline.
    let mut sorted = pl.to_vec();
    sorted.sort_by(f64::total_cmp);
    let baseline = sorted[sorted.len() / 2];
    let depth: Vec<f64> = pl.iter().map(|v| baseline - v).collect();
    // Matched filter, normalised so an isolated line keeps its depth.
    let half = (4.0 * sigma / step).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 * step / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().map(|k| k * k).sum();
    let n = depth.len() as isize;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, k) in (-half..=half).zip(&kernel) {
                acc += k * depth[(i + j).clamp(0, n - 1) as usize];
            }
            acc / norm
        })
        .collect();
    // Median absolute first difference, scaled to a Gaussian σ.
    let mut diffs: Vec<f64> = depth.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    diffs.sort_by(f64::total_cmp);
    let noise = 1.4826 * diffs[diffs.len() / 2] / 2f64.sqrt();
    let threshold = opts.prominence.max(5.0 * noise / norm.sqrt());
    let col = Column { freqs, depth, smooth, sigma, contrast, step, noise, opts };

    let mut peaks: Vec<usize> = (1..col.smooth.len() - 1)
        .filter(|&i| col.smooth[i] > col.smooth[i - 1] && col.smooth[i] >= col.smooth[i + 1] && col.smooth[i] > threshold)
        .collect();
    peaks.sort_by(|&a, &b| col.smooth[b].total_cmp(&col.smooth[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::new();
    for p in peaks {
        if chosen.len() == n_lines {
            break;
        }
        if chosen.iter().all(|&c| (freqs[c] - freqs[p]).abs() > sigma) {
            chosen.push(p);
        }
    }
    chosen.sort_unstable();

    // Dips close enough to share wings are fitted together.
    let mut clusters: Vec<ClusterFit> = Vec::new();
    let mut start = 0;
    while start < chosen.len() {
        let mut end = start + 1;
        while end < chosen.len() && freqs[chosen[end]] - freqs[chosen[end - 1]] < 6.0 * sigma {
            end += 1;
        }
        let centers: Vec<f64> = chosen[start..end].iter().map(|&i| freqs[i]).collect();
        clusters.push(fit_cluster(&col, &centers).unwrap_or_else(|| ClusterFit {
            lines: chosen[start..end].iter().map(|&i| col.interpolated(i)).collect(),
            ssr: f64::INFINITY,
        }));
        start = end;
    }

    // While lines are missing, try to resolve the broadest merged dip into
    // two lines at least one linewidth apart.
    let mut found: usize = clusters.iter().map(|c| c.lines.len()).sum();
    let mut tried: Vec<(usize, usize)> = Vec::new();
    while found < n_lines {
        let pick = clusters
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| c.lines.iter().enumerate().map(move |(li, l)| (ci, li, l)))
            .filter(|(ci, li, l)| l.merged && !tried.contains(&(*ci, *li)))
            .max_by(|a, b| a.2.width.total_cmp(&b.2.width));
        let Some((ci, li, line)) = pick else { break };
        tried.push((ci, li));
        let d = 2.0 * (line.width.powi(2) - sigma * sigma).max(0.25 * sigma * sigma).sqrt();
        let mut centers: Vec<f64> = clusters[ci].lines.iter().map(|l| l.center).collect();
        centers[li] = line.center - 0.5 * d;
        centers.insert(li + 1, line.center + 0.5 * d);
        let Some(split) = fit_cluster(&col, &centers) else { continue };
        let resolved = split.lines.windows(2).all(|w| w[1].center - w[0].center >= 2.355 * sigma);
        let better = clusters[ci].ssr - split.ssr > 16.0 * noise * noise + 1e-14;
        if resolved && better && split.lines.iter().all(|l| !l.merged) {
            clusters[ci] = split;
            tried.retain(|&(c, _)| c != ci);
            found += 1;
        }
    }

    let mut lines: Vec<ResonanceLine> = clusters.into_iter().flat_map(|c| c.lines).collect();
    lines.sort_by(|a, b| a.center.total_cmp(&b.center));
    ResonanceColumn { delay, too_few: lines.len() < n_lines, lines }
}

impl Column<'_> {
    /// Parabolic peak of the smoothed dip at grid index `i`.
    fn interpolated(&self, i: usize) -> ResonanceLine {
        let i = i.clamp(1, self.smooth.len() - 2);
        let (a, b, c) = (self.smooth[i - 1], self.smooth[i], self.smooth[i + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
        ResonanceLine {
            center: self.freqs[i] + shift * self.step,
            sigma: self.sigma,
            width: self.sigma,
            depth: self.depth[i],
            merged: false,
        }
    }
}

/// Joint least-squares fit of `offset + Σ A_k G(f; c_k, s_k)` to the depth
/// around `centers`. A weak prior ties each width to the nominal one in
/// proportion to the noise level.
fn fit_cluster(col: &Column, centers: &[f64]) -> Option<ClusterFit> {
    let sigma = col.sigma;
    let f_ref = centers[0];
    let lo = centers[0] - 4.0 * sigma;
    let hi = centers[centers.len() - 1] + 4.0 * sigma;
    let window: Vec<usize> = (0..col.freqs.len()).filter(|&i| col.freqs[i] >= lo && col.freqs[i] <= hi).collect();
    let m = centers.len();
    if window.len() <= 3 * m + 1 {
        return None;
    }
    let x: Vec<f64> = window.iter().map(|&i| (col.freqs[i] - f_ref) / sigma).collect();
    let y: Vec<f64> = window.iter().map(|&i| col.depth[i]).collect();
    let nearest = |f: f64| (((f - col.freqs[0]) / col.step).round().max(0.0) as usize).min(col.freqs.len() - 1);
    let width_prior = col.noise / 0.15;

    // Parameters: offset, then (amplitude, centre, ln width) per line, with
    // frequencies in units of the nominal σ.
    let mut p0 = DVector::zeros(1 + 3 * m);
    for (k, &c) in centers.iter().enumerate() {
        p0[1 + 3 * k] = col.smooth[nearest(c)].max(1e-6);
        p0[2 + 3 * k] = (c - f_ref) / sigma;
    }
    let residual = |p: &DVector<f64>| -> Option<DVector<f64>> {
        let data = x.iter().zip(&y).map(|(&xi, &yi)| {
            let mut model = p[0];
            for k in 0..m {
                let u = (xi - p[2 + 3 * k]) / p[3 + 3 * k].exp();
                model += p[1 + 3 * k] * (-0.5 * u * u).exp();
            }
            model - yi
        });
        let prior = (0..m).map(|k| width_prior * p[3 + 3 * k]);
        Some(DVector::from_iterator(x.len() + m, data.chain(prior)))
    };
    let lm = levenberg_marquardt(
        p0,
        1 + 3 * m,
        residual,
        |p, d| p + d,
        &LmOptions { max_iterations: 200, fd_step: 1e-7, ..LmOptions::default() },
    )?;
    let p = &lm.params;
    let dof = (x.len() as f64 - p.len() as f64).max(1.0);
    let s2 = 2.0 * lm.cost / dof;
    let cov = pseudo_inverse(&(lm.jacobian.transpose() * &lm.jacobian));
    let window_x = ((lo - f_ref) / sigma, (hi - f_ref) / sigma);
    let mut lines = Vec::with_capacity(m);
    for k in 0..m {
        let (a, c, s) = (p[1 + 3 * k], p[2 + 3 * k], p[3 + 3 * k].exp());
        if !(c > window_x.0 && c < window_x.1 && s > 0.2 && s < 6.0 && a > 0.0) {
            return None;
        }
        let var = (s2 * cov[(2 + 3 * k, 2 + 3 * k)]).max(0.0);
        let merged = s > col.opts.merge_ratio || a > col.opts.merge_depth_ratio * col.contrast;
        // The centre of an unresolved pair is only known to within the
        // linewidth.
        let floor = if merged { sigma } else { 1e-3 * col.step };
        lines.push(ResonanceLine {
            center: f_ref + c * sigma,
            sigma: (var.sqrt() * sigma).max(floor),
            width: s * sigma,
            depth: a,
            merged,
        });
    }
    Some(ClusterFit { lines, ssr: 2.0 * lm.cost })
}

fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut inv = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-12 * max {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LmOptions {
    max_iterations: usize,
    fd_step: f64,
    /// Converged when the step norm falls below this.
    step_tol: f64,
    /// Converged when an accepted step lowers the cost by less than this
    /// fraction.
    cost_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 100, fd_step: 1e-6, step_tol: 1e-12, cost_tol: 1e-15 }
    }
}

struct LmOutcome<S> {
    params: S,
    cost: f64,
    jacobian: DMatrix<f64>,
    costs: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn fd_jacobian<S>(
    x: &S,
    dim: usize,
    h: f64,
    residual: &impl Fn(&S) -> Option<DVector<f64>>,
    apply: &impl Fn(&S, &DVector<f64>) -> S,
) -> Option<DMatrix<f64>> {
    let mut cols = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut d = DVector::zeros(dim);
        d[k] = h;
        let plus = residual(&apply(x, &d))?;
        d[k] = -h;
        let minus = residual(&apply(x, &d))?;
        cols.push((plus - minus) / (2.0 * h));
    }
    Some(DMatrix::from_columns(&cols))
}

/// Damped Gauss–Newton with Marquardt scaling. `apply` maps a step in the
/// local coordinates onto a new state, so manifolds are handled by
/// re-centring at every accepted step. Only cost-lowering steps are
/// accepted.
fn levenberg_marquardt<S: Clone>(
    start: S,
    dim: usize,
    residual: impl Fn(&S) -> Option<DVector<f64>>,
    apply: impl Fn(&S, &DVector<f64>) -> S,
    opts: &LmOptions,
) -> Option<LmOutcome<S>> {
    let mut x = start;
    let mut r = residual(&x)?;
    let mut cost = 0.5 * r.norm_squared();
    let mut costs = vec![cost];
    let mut jac = fd_jacobian(&x, dim, opts.fd_step, &residual, &apply)?;
    let mut mu = -1.0;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let diag_max = a.diagonal().max();
        if mu < 0.0 {
            mu = 1e-3 * diag_max;
        }
        if g.amax() <= 1e-14 * (diag_max.sqrt() * r.norm()).max(f64::MIN_POSITIVE) || cost == 0.0 {
            converged = true;
            break;
        }
        let mut damped = a.clone();
        for k in 0..dim {
            damped[(k, k)] += mu * a[(k, k)].max(1e-9 * diag_max);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        let candidate = apply(&x, &step);
        let new_r = residual(&candidate);
        let new_cost = new_r.as_ref().map(|v| 0.5 * v.norm_squared()).unwrap_or(f64::INFINITY);
        let predicted = -(step.dot(&g) + 0.5 * step.dot(&(&a * &step)));
        if new_cost < cost {
            let rho = (cost - new_cost) / predicted.max(f64::MIN_POSITIVE);
            let small = step.norm() < opts.step_tol || cost - new_cost <= opts.cost_tol * cost;
            x = candidate;
            r = new_r.unwrap();
            cost = new_cost;
            costs.push(cost);
            jac = fd_jacobian(&x, dim, opts.fd_step, &residual, &apply)?;
            mu *= (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            if small {
                converged = true;
                break;
            }
        } else {
            if step.norm() < opts.step_tol {
                converged = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
            if mu > 1e30 {
                break;
            }
        }
    }
    Some(LmOutcome { params: x, cost, jacobian: jac, costs, iterations, converged })
}

/// Which transition out of `m_s = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Minus,
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineLabel {
    pub class: usize,
    pub branch: Branch,
}

/// Two tracks whose predicted positions came within one linewidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crossing {
    pub column: usize,
    pub tracks: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `tracks[k][c]`: index into column `c`'s lines followed by track `k`.
    pub tracks: Vec<Vec<Option<usize>>>,
    pub crossings: Vec<Crossing>,
    /// Each hypothesis labels every line: `[h][column][line]`. The first
    /// entry is the straight-through tracking.
    pub hypotheses: Vec<Vec<Vec<Option<LineLabel>>>>,
}

impl Assignment {
    pub fn is_ambiguous(&self) -> bool {
        !self.crossings.is_empty()
    }
}

/// Most crossings expanded into alternative hypotheses.
const MAX_CROSSINGS: usize = 6;

/// Minimum-cost assignment of `rows` to distinct `cols` (rows ≤ 8 or cols
/// ≤ 16), where a row may stay unassigned at cost `skip`.
fn assign(cost: &[Vec<f64>], n_cols: usize, skip: f64) -> Vec<Option<usize>> {
    let n_rows = cost.len();
    let states = 1usize << n_cols;
    let mut best = vec![vec![f64::INFINITY; states]; n_rows + 1];
    let mut choice = vec![vec![None; states]; n_rows + 1];
    best[0][0] = 0.0;
    for i in 0..n_rows {
        for mask in 0..states {
            let b = best[i][mask];
            if !b.is_finite() {
                continue;
            }
            if b + skip < best[i + 1][mask] {
                best[i + 1][mask] = b + skip;
                choice[i + 1][mask] = Some((mask, None));
            }
            for j in 0..n_cols {
                if mask & (1 << j) == 0 {
                    let next = mask | (1 << j);
                    let v = b + cost[i][j];
                    if v < best[i + 1][next] {
                        best[i + 1][next] = v;
                        choice[i + 1][next] = Some((mask, Some(j)));
                    }
                }
            }
        }
    }
    let mut mask = (0..states).min_by(|&a, &b| best[n_rows][a].total_cmp(&best[n_rows][b])).unwrap();
    let mut out = vec![None; n_rows];
    for i in (1..=n_rows).rev() {
        let (prev, j) = choice[i][mask].unwrap();
        out[i - 1] = j;
        mask = prev;
    }
    out
}

/// Tracks lines across delays by nearest neighbour with linear
/// extrapolation, then labels each track with the class and branch of the
/// candidate model whose predicted line it follows most closely.
pub fn class_assignment(
    traces: &ResonanceTraces,
    candidate: &RotationModel,
    b_lab: &Vector3<f64>,
    model: &NvModel,
) -> Result<Assignment, ReconstructError> {
    let cols = &traces.columns;
    let Some(first) = cols.iter().position(|c| !c.lines.is_empty()) else {
        return Err(ReconstructError::InvalidArgument("traces contain no lines".into()));
    };
    let n_tracks = cols[first].lines.len().min(8);
    let mut tracks: Vec<Vec<Option<usize>>> = vec![vec![None; cols.len()]; n_tracks];
    let mut last: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_tracks];
    for (k, line) in cols[first].lines.iter().take(n_tracks).enumerate() {
        tracks[k][first] = Some(k);
        last[k].push((first, line.center));
    }
    let fwhm = 2.355 * traces.linewidth_sigma;
    let mut crossings: Vec<Crossing> = Vec::new();
    for (c, col) in cols.iter().enumerate().skip(first + 1) {
        let pred: Vec<f64> = last
            .iter()
            .map(|h| match h.as_slice() {
                [.., (c0, f0), (c1, f1)] => f1 + (f1 - f0) * (c - c1) as f64 / (c1 - c0) as f64,
                [.., (_, f1)] => *f1,
                [] => f64::NAN,
            })
            .collect();
        for a in 0..n_tracks {
            for b in a + 1..n_tracks {
                if (pred[a] - pred[b]).abs() < fwhm
                    && !crossings.iter().any(|x| x.tracks == (a, b) && x.column + 1 >= c.saturating_sub(2))
                {
                    crossings.push(Crossing { column: c, tracks: (a, b) });
                }
            }
        }
        let n_lines = col.lines.len().min(16);
        let cost: Vec<Vec<f64>> = pred
            .iter()
            .map(|&p| col.lines[..n_lines].iter().map(|l| ((l.center - p) / fwhm).powi(2)).collect())
            .collect();
        for (k, j) in assign(&cost, n_lines, 25.0).into_iter().enumerate() {
            if let Some(j) = j {
                tracks[k][c] = Some(j);
                last[k].push((c, col.lines[j].center));
                if last[k].len() > 2 {
                    last[k].remove(0);
                }
            }
        }
    }
    crossings.truncate(MAX_CROSSINGS);

    let labels: Vec<LineLabel> =
        (0..4).flat_map(|class| [Branch::Minus, Branch::Plus].map(|branch| LineLabel { class, branch })).collect();
    let predictions: Vec<[f64; 8]> = cols
        .iter()
        .map(|col| {
            let t = class_transitions(&candidate.orientation(col.delay), b_lab, model);
            [t[0].0, t[0].1, t[1].0, t[1].1, t[2].0, t[2].1, t[3].0, t[3].1]
        })
        .collect();
    let mut hypotheses = Vec::new();
    for combo in 0..(1usize << crossings.len()) {
        let mut tr = tracks.clone();
        for (bit, x) in crossings.iter().enumerate() {
            if combo & (1 << bit) != 0 {
                let (a, b) = x.tracks;
                for c in x.column..cols.len() {
                    let tmp = tr[a][c];
                    tr[a][c] = tr[b][c];
                    tr[b][c] = tmp;
                }
            }
        }
        let cost: Vec<Vec<f64>> = tr
            .iter()
            .map(|track| {
                (0..8)
                    .map(|l| {
                        track
                            .iter()
                            .enumerate()
                            .filter_map(|(c, j)| j.map(|j| ((cols[c].lines[j].center - predictions[c][l]) / fwhm).powi(2)))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let which = assign(&cost, 8, f64::INFINITY);
        let mut per_col: Vec<Vec<Option<LineLabel>>> = cols.iter().map(|c| vec![None; c.lines.len()]).collect();
        for (k, l) in which.iter().enumerate() {
            if let Some(l) = l {
                for (c, j) in tr[k].iter().enumerate() {
                    if let Some(j) = j {
                        per_col[c][*j] = Some(labels[*l]);
                    }
                }
            }
        }
        hypotheses.push(per_col);
    }
    Ok(Assignment { tracks, crossings, hypotheses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iterations: usize,
    /// Finite-difference step of the Jacobian (rad).
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { starts: 32, max_iterations: 100, fd_step: 1e-6 }
    }
}

/// Fitted rotation. Local coordinates used for the covariance are
/// `(u1, u2)`, small rotations of the axis about `axis_basis[0]` and
/// `axis_basis[1]`, followed by a small left rotation vector `r` of the
/// orientation at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub rotation: RotationModel,
    pub axis: Vector3<f64>,
    /// Polar angle of the axis from lab z (rad).
    pub axis_polar: f64,
    /// Azimuth of the axis from lab x (rad).
    pub axis_azimuth: f64,
    pub orientation0: Orientation,
    pub phase: f64,
    /// The motion mirrored through the plane of the two fields. It produces
    /// the same line frequencies in both maps, so the data cannot choose
    /// between it and `rotation`. `None` for a single-field fit.
    pub mirror: Option<RotationModel>,
    /// Unweighted RMS of measured minus fitted line centres (Hz).
    pub residual_rms: f64,
    /// Weighted sum of squared residuals.
    pub chi2: f64,
    pub n_residuals: usize,
    pub axis_basis: [Vector3<f64>; 2],
    /// Pseudo-inverse of the information matrix, scaled by the reduced χ².
    pub covariance: DMatrix<f64>,
    /// Ascending eigenvalues of the information matrix `JᵀJ`.
    pub information_eigenvalues: DVector<f64>,
    /// Directions along which the data carry no information; their variance
    /// is unbounded.
    pub unconstrained_modes: Vec<DVector<f64>>,
    pub start_index: usize,
    pub iterations: usize,
    pub converged_starts: usize,
    /// Cost after each accepted step of the winning start.
    pub cost_history: Vec<f64>,
}

/// Information eigenvalues below this fraction of the largest count as
/// unconstrained.
pub const UNCONSTRAINED_RATIO: f64 = 1e-8;

struct Dataset<'a> {
    traces: &'a ResonanceTraces,
    b: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    axis: Unit<Vector3<f64>>,
    start: UnitQuaternion<f64>,
}

fn tangent_basis(k: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let helper = if k.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = k.cross(&helper).normalize();
    [e1, k.cross(&e1)]
}

fn apply_step(p: &Pose, d: &DVector<f64>) -> Pose {
    let [e1, e2] = tangent_basis(&p.axis);
    let turn = UnitQuaternion::from_scaled_axis(e1 * d[0] + e2 * d[1]);
    Pose {
        axis: Unit::new_normalize(turn * p.axis.into_inner()),
        start: UnitQuaternion::from_scaled_axis(Vector3::new(d[2], d[3], d[4])) * p.start,
    }
}

fn predictions(pose: &Pose, omega: f64, t: f64, b: &Vector3<f64>, model: &NvModel) -> [f64; 8] {
    let o = Orientation(UnitQuaternion::from_axis_angle(&pose.axis, omega * t) * pose.start);
    let tr = class_transitions(&o, b, model);
    let mut f = [tr[0].0, tr[0].1, tr[1].0, tr[1].1, tr[2].0, tr[2].1, tr[3].0, tr[3].1];
    f.sort_by(f64::total_cmp);
    f
}

/// Order-preserving match of sorted `measured` onto sorted `predicted`
/// (`measured.len() ≤ predicted.len()`), minimising the weighted squared
/// misfit. Returns the index of the matched prediction for each measured line.
fn monotone_match(measured: &[ResonanceLine], predicted: &[f64; 8]) -> Vec<usize> {
    let m = measured.len().min(8);
    let n = 8;
    let mut dp = vec![vec![f64::INFINITY; n + 1]; m + 1];
    dp[0].iter_mut().for_each(|v| *v = 0.0);
    for i in 1..=m {
        for j in i..=n {
            let r = (measured[i - 1].center - predicted[j - 1]) / measured[i - 1].sigma;
            dp[i][j] = dp[i][j - 1].min(dp[i - 1][j - 1] + r * r);
        }
    }
    let mut out = vec![0; m];
    let (mut i, mut j) = (m, n);
    while i > 0 {
        if j > i && dp[i][j] == dp[i][j - 1] {
            j -= 1;
        } else {
            out[i - 1] = j - 1;
            i -= 1;
            j -= 1;
        }
    }
    out
}

/// Matching of every column, in the order `weighted_residuals` visits them.
type LineMatching = Vec<Vec<usize>>;

fn current_assignment(pose: &Pose, data: &[Dataset], omega: f64, model: &NvModel) -> LineMatching {
    let mut out = Vec::new();
    for d in data {
        for col in &d.traces.columns {
            let lines = &col.lines[..col.lines.len().min(8)];
            out.push(monotone_match(lines, &predictions(pose, omega, col.delay, &d.b, model)));
        }
    }
    out
}

/// Residuals with the line-to-prediction matching held fixed.
fn frozen_residuals(pose: &Pose, data: &[Dataset], omega: f64, model: &NvModel, assignment: &LineMatching) -> DVector<f64> {
    let mut out = Vec::new();
    let mut k = 0;
    for d in data {
        for col in &d.traces.columns {
            let lines = &col.lines[..col.lines.len().min(8)];
            let p = predictions(pose, omega, col.delay, &d.b, model);
            out.extend(lines.iter().zip(&assignment[k]).map(|(l, &j)| (l.center - p[j]) / l.sigma));
            k += 1;
        }
    }
    DVector::from_vec(out)
}

fn weighted_residuals(pose: &Pose, data: &[Dataset], omega: f64, model: &NvModel) -> DVector<f64> {
    frozen_residuals(pose, data, omega, model, &current_assignment(pose, data, omega, model))
}

/// `(delay, measured, sigma, fitted)` for every line of `traces` under `rot`.
pub fn matched_lines(
    rot: &RotationModel,
    traces: &ResonanceTraces,
    b_lab: &Vector3<f64>,
    model: &NvModel,
) -> Vec<(f64, f64, f64, f64)> {
    let pose = Pose { axis: rot.axis, start: rot.orientation(0.0).0 };
    let mut out = Vec::new();
    for col in &traces.columns {
        let lines = &col.lines[..col.lines.len().min(8)];
        let p = predictions(&pose, rot.omega_rot, col.delay, b_lab, model);
        let fitted = monotone_match(lines, &p);
        out.extend(lines.iter().zip(fitted).map(|(l, j)| (col.delay, l.center, l.sigma, p[j])));
    }
    out
}

fn radical_inverse(base: u64, mut i: u64) -> f64 {
    let (mut inv, mut f) = (0.0, 1.0 / base as f64);
    while i > 0 {
        inv += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    inv
}

/// Start `k` of `n`: a Fibonacci-sphere axis paired with a Halton-sampled
/// uniform rotation.
fn start_pose(k: usize, n: usize) -> Pose {
    let golden = PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = golden * k as f64;
    let axis = Unit::new_normalize(Vector3::new(r * phi.cos(), r * phi.sin(), z));
    let i = k as u64 + 1;
    let (u1, u2, u3) = (radical_inverse(2, i), radical_inverse(3, i), radical_inverse(5, i));
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    );
    Pose { axis, start: UnitQuaternion::from_quaternion(q) }
}

/// Splits the orientation at `t = 0` into `(orientation0, phase)` so that
/// class 0 makes its largest angle with `b1` at rotation angle zero.
fn fix_gauge(axis: &Unit<Vector3<f64>>, start: &UnitQuaternion<f64>, b1: &Vector3<f64>, model: &NvModel) -> (Orientation, f64) {
    let k = axis.into_inner();
    let b = b1.normalize();
    let n0 = start * model.axes0[0];
    let x = (n0 - k * n0.dot(&k)).dot(&b);
    let y = k.cross(&n0).dot(&b);
    // cos θ(s) = const + x cos s + y sin s is smallest at s = atan2(y, x) + π.
    let s_star = if x.hypot(y) > 1e-12 { y.atan2(x) + PI } else { 0.0 };
    let orientation0 = Orientation(UnitQuaternion::from_axis_angle(axis, s_star) * start);
    let phase = -s_star;
    let phase = phase - 2.0 * PI * ((phase + PI) / (2.0 * PI)).floor();
    (orientation0, phase)
}

/// Reflection `P` through the plane of `b1`, `b2` composed with inversion:
/// `k → −P k`, `R0 → −P R0`. Both maps are unchanged because every class
/// keeps its angles to both fields up to `n → −n`.
fn mirror_pose(p: &Pose, b1: &Vector3<f64>, b2: &Vector3<f64>) -> Pose {
    let n = b1.cross(b2).normalize();
    let minus_p = nalgebra::Matrix3::identity() * -1.0 + n * n.transpose() * 2.0;
    let r0 = minus_p * p.start.to_rotation_matrix().into_inner();
    Pose {
        axis: Unit::new_normalize(minus_p * p.axis.into_inner()),
        start: UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r0)),
    }
}

/// Fits a constant-rate rotation to one or two sets of line centres.
/// Pass an empty `traces2` for a single-field fit.
pub fn fit_rotation(
    traces1: &ResonanceTraces,
    b1: &Vector3<f64>,
    traces2: &ResonanceTraces,
    b2: &Vector3<f64>,
    model: &NvModel,
    omega_rot: f64,
    opts: &FitOptions,
) -> Result<FitResult, ReconstructError> {
    if traces1.line_count() == 0 {
        return Err(ReconstructError::InvalidArgument("first field has no lines".into()));
    }
    if !(omega_rot.is_finite() && omega_rot != 0.0) || opts.starts == 0 {
        return Err(ReconstructError::InvalidArgument("omega_rot must be nonzero and starts ≥ 1".into()));
    }
    let mut data = vec![Dataset { traces: traces1, b: *b1 }];
    if traces2.line_count() > 0 {
        let angle = b1.angle(b2);
        let angle = angle.min(PI - angle);
        if !(angle.to_degrees() > 10.0) {
            return Err(ReconstructError::DegenerateGeometry { angle_deg: angle.to_degrees() });
        }
        data.push(Dataset { traces: traces2, b: *b2 });
    }

    let lm_opts = LmOptions { max_iterations: opts.max_iterations, fd_step: opts.fd_step, ..LmOptions::default() };
    let runs: Vec<Option<LmOutcome<Pose>>> = (0..opts.starts)
        .into_par_iter()
        .map(|k| {
            levenberg_marquardt(
                start_pose(k, opts.starts),
                5,
                |p| Some(weighted_residuals(p, &data, omega_rot, model)),
                apply_step,
                &lm_opts,
            )
        })
        .collect();
    let converged_starts = runs.iter().flatten().filter(|r| r.converged).count();
    let (start_index, best) = runs
        .into_iter()
        .enumerate()
        .filter_map(|(k, r)| r.filter(|r| r.converged).map(|r| (k, r)))
        .reduce(|a, b| if b.1.cost < a.1.cost { b } else { a })
        .ok_or(ReconstructError::NonConvergence { iterations: opts.max_iterations })?;

    let pose = best.params;
    let (orientation0, phase) = fix_gauge(&pose.axis, &pose.start, b1, model);
    let rotation = RotationModel { axis: pose.axis, omega_rot, orientation0, phase };
    let mirror = (data.len() == 2).then(|| {
        let m = mirror_pose(&pose, b1, b2);
        let (o, ph) = fix_gauge(&m.axis, &m.start, b1, model);
        RotationModel { axis: m.axis, omega_rot, orientation0: o, phase: ph }
    });
    // The information matrix is taken with the matching frozen at the
    // solution: a matching switch inside the difference stencil would
    // otherwise masquerade as a steep gradient.
    let assignment = current_assignment(&pose, &data, omega_rot, model);
    let frozen = |p: &Pose| Some(frozen_residuals(p, &data, omega_rot, model, &assignment));
    let jacobian = fd_jacobian(&pose, 5, opts.fd_step, &frozen, &apply_step).unwrap_or_else(|| best.jacobian.clone());
    let n = jacobian.nrows();
    let chi2 = 2.0 * best.cost;
    let info = jacobian.transpose() * &jacobian;
    let eig = info.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let max = eig.eigenvalues.amax();
    let unconstrained_modes = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] < UNCONSTRAINED_RATIO * max)
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();
    let reduced = if n > 5 { chi2 / (n - 5) as f64 } else { 1.0 };
    let mut residual_sq = 0.0;
    for d in &data {
        for (_, meas, _, fit) in matched_lines(&rotation, d.traces, &d.b, model) {
            residual_sq += (meas - fit).powi(2);
        }
    }
    let k = pose.axis.into_inner();
    Ok(FitResult {
        rotation,
        axis: k,
        axis_polar: k.z.clamp(-1.0, 1.0).acos(),
        axis_azimuth: k.y.atan2(k.x),
        orientation0,
        phase,
        mirror,
        residual_rms: (residual_sq / n.max(1) as f64).sqrt(),
        chi2,
        n_residuals: n,
        axis_basis: tangent_basis(&k),
        covariance: pseudo_inverse(&info) * reduced,
        information_eigenvalues: DVector::from_iterator(5, order.iter().map(|&k| eig.eigenvalues[k])),
        unconstrained_modes,
        start_index,
        iterations: best.iterations,
        converged_starts,
        cost_history: best.costs,
    })
}

impl FitResult {
    /// Local-coordinate direction that spins the whole motion about `b`.
    pub fn rotation_about(&self, b: &Vector3<f64>) -> DVector<f64> {
        let b = b.normalize();
        let [e1, e2] = self.axis_basis;
        let v = DVector::from_vec(vec![b.dot(&e1), b.dot(&e2), b.x, b.y, b.z]);
        v.normalize()
    }
}

/// Angle between two axes (rad).
pub fn axis_error(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.angle(b)
}

/// Proper rotations mapping the class-axis lines onto themselves.
pub fn axis_symmetries(model: &NvModel) -> Vec<UnitQuaternion<f64>> {
    let mut out: Vec<UnitQuaternion<f64>> = Vec::new();
    let a = &model.axes0;
    for i in 0..4 {
        for j in 0..4 {
            if i == j {
                continue;
            }
            for si in [1.0, -1.0] {
                for sj in [1.0, -1.0] {
                    let (u, v) = (a[i] * si, a[j] * sj);
                    let Some(r) = frame_rotation(&a[0], &a[1], &u, &v) else { continue };
                    let maps = a.iter().all(|x| a.iter().any(|y| (r * x).dot(y).abs() > 1.0 - 1e-9));
                    if maps && !out.iter().any(|q| q.angle_to(&r) < 1e-9) {
                        out.push(r);
                    }
                }
            }
        }
    }
    out
}

fn frame_rotation(
    a0: &Vector3<f64>,
    a1: &Vector3<f64>,
    b0: &Vector3<f64>,
    b1: &Vector3<f64>,
) -> Option<UnitQuaternion<f64>> {
    if (a0.dot(a1) - b0.dot(b1)).abs() > 1e-9 {
        return None;
    }
    let frame = |x: &Vector3<f64>, y: &Vector3<f64>| {
        let e1 = x.normalize();
        let e3 = x.cross(y).normalize();
        nalgebra::Matrix3::from_columns(&[e1, e3.cross(&e1), e3])
    };
    let m = frame(b0, b1) * frame(a0, a1).transpose();
    Some(UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m)))
}

/// Angle between two diamond orientations, minimised over the symmetries of
/// the class-axis set (which the line positions cannot distinguish).
pub fn orientation_error(a: &Orientation, b: &Orientation, model: &NvModel) -> f64 {
    axis_symmetries(model)
        .iter()
        .map(|s| a.0.angle_to(&(b.0 * s)))
        .fold(f64::INFINITY, f64::min)
}
