//! Least-squares estimators of conditional expectations given the state at
//! a grid node.
//!
//! Features are monomials (total degree `1..=degree`) of the per-coordinate
//! standardized state, optionally followed by the obstacle value. The
//! constant feature is always present as an unpenalized intercept; the other
//! columns are centered and scaled before the normal equations are formed,
//! and columns with no sample variance are dropped.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::stats::CHUNK;

/// Pivot threshold (relative to the unit diagonal) below which a ridge is added.
const SINGULAR_PIVOT: f64 = 1e-10;
/// Ridge weight relative to the largest normal-matrix diagonal.
pub const RIDGE: f64 = 1e-8;
/// Cells used by `RegressionBasis::for_problem`.
pub const DEFAULT_CELLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub obstacle_feature: bool,
    /// Equal-mass cells along the first state coordinate; 1 gives a global fit.
    pub cells: usize,
}

impl RegressionBasis {
    pub fn new(degree: usize, obstacle_feature: bool) -> Self {
        Self {
            degree,
            obstacle_feature,
            cells: 1,
        }
    }

    pub fn with_cells(mut self, cells: usize) -> Self {
        self.cells = cells.max(1);
        self
    }

    pub fn for_problem(spec: &ProblemSpec, degree: usize) -> Self {
        Self::new(degree, spec.obstacle_feature).with_cells(DEFAULT_CELLS)
    }

    pub fn describe(&self) -> String {
        let mut s = format!("poly{}", self.degree);
        if self.obstacle_feature {
            s.push_str("+obstacle");
        }
        if self.cells > 1 {
            s.push_str(&format!("x{}cells", self.cells));
        }
        s
    }
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::new(3, false)
    }
}

/// Equal-mass partition of a node's sample along the first state coordinate.
#[derive(Clone, Debug)]
pub struct Partition {
    edges: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(states: &[f64], k: usize, cells: usize) -> Self {
        let rows = states.len() / k.max(1);
        let cells = cells.max(1);
        if cells == 1 || rows == 0 {
            return Self {
                edges: Vec::new(),
                members: vec![(0..rows).collect()],
            };
        }
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| states[a * k].total_cmp(&states[b * k]).then(a.cmp(&b)));
        let edges: Vec<f64> = (1..cells)
            .map(|c| states[order[c * rows / cells] * k])
            .collect();
        let mut members = vec![Vec::with_capacity(rows / cells + 1); cells];
        for r in 0..rows {
            members[edges.partition_point(|&e| e <= states[r * k])].push(r);
        }
        members.retain(|m| !m.is_empty());
        // Rebuild edges so cell `c` of `cell_of` matches `members[c]`.
        let edges = members[1..]
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&r| states[r * k])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        Self { edges, members }
    }

    pub fn cells(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, cell: usize) -> &[usize] {
        &self.members[cell]
    }

    pub fn cell_of(&self, x: &[f64]) -> usize {
        self.edges.partition_point(|&e| e <= x[0])
    }
}

/// Non-fatal regression event recorded by the solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionWarning {
    pub step: usize,
    pub message: String,
}

/// Feature map fitted to the state sample of one node.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<(usize, u32)>>,
    obstacle: bool,
}

fn is_constant(scale: f64, center: f64) -> bool {
    scale.is_nan() || scale <= 1e-12 * center.abs().max(1.0)
}

fn monomials(active: &[usize], degree: usize) -> Vec<Vec<(usize, u32)>> {
    fn rec(
        active: &[usize],
        from: usize,
        left: usize,
        cur: &mut Vec<(usize, u32)>,
        out: &mut Vec<Vec<(usize, u32)>>,
    ) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if left == 0 {
            return;
        }
        for a in from..active.len() {
            let c = active[a];
            match cur.last_mut() {
                Some(last) if last.0 == c => last.1 += 1,
                _ => cur.push((c, 1)),
            }
            rec(active, a, left - 1, cur, out);
            let last = cur.last_mut().expect("pushed above");
            if last.1 > 1 {
                last.1 -= 1;
            } else {
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(active, 0, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|m| m.iter().map(|e| e.1).sum::<u32>());
    out
}

fn affine_in_state(states: &[f64], k: usize, obstacle: &[f64]) -> bool {
    let Ok(ls) = LeastSquares::new(states, obstacle.len(), k, 0) else {
        return false;
    };
    let coef = ls.solve(obstacle);
    let tol = 1e-9 * (1.0 + obstacle.iter().fold(0.0_f64, |m, h| m.max(h.abs())));
    obstacle
        .iter()
        .enumerate()
        .all(|(r, h)| (coef.apply(&states[r * k..(r + 1) * k]) - h).abs() <= tol)
}

impl FeatureMap {
    /// Fits the state standardization to `states` (`rows × k`, row-major).
    /// The obstacle column is kept only where it is not an affine function
    /// of the state on this sample.
    pub fn fit(basis: &RegressionBasis, states: &[f64], k: usize, obstacle: &[f64]) -> Self {
        let rows = states.len() / k.max(1);
        let mut center = vec![0.0; k];
        let mut scale = vec![0.0; k];
        for c in 0..k {
            if rows == 0 {
                continue;
            }
            let mean = crate::stats::ordered_sum_by(rows, |r| states[r * k + c]) / rows as f64;
            let var = crate::stats::ordered_sum_by(rows, |r| {
                let d = states[r * k + c] - mean;
                d * d
            }) / rows as f64;
            center[c] = mean;
            scale[c] = var.sqrt();
        }
        let active: Vec<usize> = (0..k)
            .filter(|&c| !is_constant(scale[c], center[c]))
            .collect();
        Self {
            exponents: monomials(&active, basis.degree),
            center,
            scale,
            obstacle: basis.obstacle_feature && !affine_in_state(states, k, obstacle),
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len() + usize::from(self.obstacle)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends the features of `(x, h)` to `out`.
    pub fn push_features(&self, x: &[f64], h: f64, out: &mut Vec<f64>) {
        for mono in &self.exponents {
            let v = mono
                .iter()
                .map(|&(c, e)| ((x[c] - self.center[c]) / self.scale[c]).powi(e as i32))
                .product();
            out.push(v);
        }
        if self.obstacle {
            out.push(h);
        }
    }

    /// Feature matrix for `rows` samples, row-major.
    pub fn matrix(&self, states: &[f64], k: usize, obstacle: &[f64]) -> Vec<f64> {
        let rows = obstacle.len();
        let mut out = Vec::with_capacity(rows * self.len());
        for r in 0..rows {
            self.push_features(&states[r * k..(r + 1) * k], obstacle[r], &mut out);
        }
        out
    }
}

/// Ordinary least squares with intercept on standardized columns.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    rows: usize,
    raw_cols: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    kept: Vec<usize>,
    /// Standardized kept columns, `rows × kept` row-major.
    design: Vec<f64>,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    ridge: Option<f64>,
}

/// Coefficients on the raw (unstandardized) columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl Coefficients {
    pub fn apply(&self, raw_row: &[f64]) -> f64 {
        self.intercept
            + self
                .slopes
                .iter()
                .zip(raw_row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }
}

impl LeastSquares {
    /// Prepares the normal equations for `raw` (`rows × cols`, row-major).
    /// `step` only labels errors.
    pub fn new(raw: &[f64], rows: usize, cols: usize, step: usize) -> Result<Self> {
        if rows * cols != raw.len() {
            return Err(Error::Regression {
                step,
                reason: "ragged design matrix".into(),
            });
        }
        let mut mean = vec![0.0; cols];
        let mut scale = vec![0.0; cols];
        for c in 0..cols {
            if rows == 0 {
                break;
            }
            mean[c] = crate::stats::ordered_sum_by(rows, |r| raw[r * cols + c]) / rows as f64;
            let m = mean[c];
            scale[c] = (crate::stats::ordered_sum_by(rows, |r| {
                let d = raw[r * cols + c] - m;
                d * d
            }) / rows as f64)
                .sqrt();
        }
        let kept: Vec<usize> = (0..cols)
            .filter(|&c| !is_constant(scale[c], mean[c]))
            .collect();
        let q = kept.len();
        let mut design = Vec::with_capacity(rows * q);
        for r in 0..rows {
            for &c in &kept {
                design.push((raw[r * cols + c] - mean[c]) / scale[c]);
            }
        }

        let mut ls = Self {
            rows,
            raw_cols: cols,
            mean,
            scale,
            kept,
            design,
            chol: None,
            ridge: None,
        };
        if q == 0 {
            return Ok(ls);
        }

        let gram = ls.gram();
        let max_diag = (0..q).map(|j| gram[(j, j)]).fold(0.0, f64::max);
        let plain = Cholesky::new(gram.clone()).filter(|c| {
            let l = c.l_dirty();
            (0..q).all(|j| l[(j, j)] * l[(j, j)] > SINGULAR_PIVOT * max_diag)
        });
        ls.chol = match plain {
            Some(c) => Some(c),
            None => {
                let lambda = RIDGE * max_diag;
                ls.ridge = Some(lambda);
                let mut g = gram;
                for j in 0..q {
                    g[(j, j)] += lambda;
                }
                Some(Cholesky::new(g).ok_or_else(|| Error::Regression {
                    step,
                    reason: "normal matrix not positive definite after ridge".into(),
                })?)
            }
        };
        Ok(ls)
    }

    fn gram(&self) -> DMatrix<f64> {
        let q = self.kept.len();
        let partials: Vec<Vec<f64>> = self
            .design
            .par_chunks(CHUNK * q)
            .map(|chunk| {
                let mut acc = vec![0.0; q * q];
                for row in chunk.chunks_exact(q) {
                    for a in 0..q {
                        let ra = row[a];
                        for b in a..q {
                            acc[a * q + b] += ra * row[b];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut g = DMatrix::zeros(q, q);
        for part in partials {
            for a in 0..q {
                for b in a..q {
                    g[(a, b)] += part[a * q + b];
                }
            }
        }
        let n = self.rows as f64;
        for a in 0..q {
            for b in a..q {
                let v = g[(a, b)] / n;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Ridge weight used, if the normal matrix was near singular.
    pub fn ridge(&self) -> Option<f64> {
        self.ridge
    }

    pub fn solve(&self, target: &[f64]) -> Coefficients {
        assert_eq!(target.len(), self.rows, "target length");
        let q = self.kept.len();
        let intercept_std = crate::stats::ordered_sum(target) / self.rows.max(1) as f64;
        let mut slopes = vec![0.0; self.raw_cols];
        let mut intercept = intercept_std;
        if let Some(chol) = &self.chol {
            let partials: Vec<Vec<f64>> = self
                .design
                .par_chunks(CHUNK * q)
                .zip(target.par_chunks(CHUNK))
                .map(|(rows, t)| {
                    let mut acc = vec![0.0; q];
                    for (row, &y) in rows.chunks_exact(q).zip(t) {
                        for a in 0..q {
                            acc[a] += row[a] * y;
                        }
                    }
                    acc
                })
                .collect();
            let mut rhs = DVector::zeros(q);
            for part in partials {
                for a in 0..q {
                    rhs[a] += part[a];
                }
            }
            rhs /= self.rows as f64;
            let beta = chol.solve(&rhs);
            for (j, &c) in self.kept.iter().enumerate() {
                let b = beta[j] / self.scale[c];
                slopes[c] = b;
                intercept -= b * self.mean[c];
            }
        }
        Coefficients { intercept, slopes }
    }

    /// `sᵀ G⁻¹ s` for the standardized version `s` of a raw row.
    pub fn leverage(&self, raw_row: &[f64]) -> f64 {
        let Some(chol) = &self.chol else { return 0.0 };
        let s = DVector::from_iterator(
            self.kept.len(),
            self.kept
                .iter()
                .map(|&c| (raw_row[c] - self.mean[c]) / self.scale[c]),
        );
        let w = chol.solve(&s);
        s.dot(&w)
    }

    /// Standard error of the fitted value at `raw_row`, given the residual variance.
    pub fn prediction_se(&self, raw_row: &[f64], residual_var: f64) -> f64 {
        (residual_var * (1.0 + self.leverage(raw_row)) / self.rows as f64).sqrt()
    }
}

/// Regression of one or more targets on the features of a node, fitted
/// separately on each cell of the node's partition.
pub struct NodeRegression {
    k: usize,
    partition: Partition,
    cells: Vec<CellFit>,
}

struct CellFit {
    features: FeatureMap,
    raw: Vec<f64>,
    ls: LeastSquares,
}

impl NodeRegression {
    pub fn fit(
        basis: &RegressionBasis,
        states: &[f64],
        k: usize,
        obstacle: &[f64],
        step: usize,
    ) -> Result<Self> {
        let partition = Partition::new(states, k, basis.cells);
        let mut cells = Vec::with_capacity(partition.cells());
        for c in 0..partition.cells() {
            let rows = partition.members(c);
            let xs: Vec<f64> = rows
                .iter()
                .flat_map(|&r| &states[r * k..(r + 1) * k])
                .copied()
                .collect();
            let hs: Vec<f64> = rows.iter().map(|&r| obstacle[r]).collect();
            let features = FeatureMap::fit(basis, &xs, k, &hs);
            let raw = features.matrix(&xs, k, &hs);
            let ls = LeastSquares::new(&raw, rows.len(), features.len(), step)?;
            cells.push(CellFit { features, raw, ls });
        }
        Ok(Self {
            k,
            partition,
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.cells.iter().map(|c| c.ls.rows()).sum()
    }

    /// Ridge weights applied in any cell.
    pub fn ridges(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.ls.ridge()).collect()
    }

    /// One coefficient set per cell.
    pub fn solve(&self, target: &[f64]) -> Vec<Coefficients> {
        (0..self.cells.len())
            .map(|c| {
                let t: Vec<f64> = self
                    .partition
                    .members(c)
                    .iter()
                    .map(|&r| target[r])
                    .collect();
                self.cells[c].ls.solve(&t)
            })
            .collect()
    }

    /// Fitted values in the original row order.
    pub fn fitted(&self, coefs: &[Coefficients]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (c, cell) in self.cells.iter().enumerate() {
            let w = cell.features.len();
            for (j, &r) in self.partition.members(c).iter().enumerate() {
                out[r] = coefs[c].apply(&cell.raw[j * w..(j + 1) * w]);
            }
        }
        out
    }

    /// Mean squared residual per cell.
    pub fn residual_variances(&self, coefs: &[Coefficients], target: &[f64]) -> Vec<f64> {
        let fit = self.fitted(coefs);
        (0..self.cells.len())
            .map(|c| {
                let rows = self.partition.members(c);
                crate::stats::ordered_sum_by(rows.len(), |j| {
                    let r = rows[j];
                    (target[r] - fit[r]).powi(2)
                }) / rows.len() as f64
            })
            .collect()
    }

    fn row(&self, x: &[f64], h: f64) -> (usize, Vec<f64>) {
        let c = self.partition.cell_of(&x[..self.k]);
        let mut row = Vec::with_capacity(self.cells[c].features.len());
        self.cells[c].features.push_features(x, h, &mut row);
        (c, row)
    }

    pub fn predict(&self, coefs: &[Coefficients], x: &[f64], h: f64) -> f64 {
        let (c, row) = self.row(x, h);
        coefs[c].apply(&row)
    }

    /// Standard error of the fitted mean at `(x, h)`.
    pub fn prediction_se(&self, x: &[f64], h: f64, residual_var: &[f64]) -> f64 {
        let (c, row) = self.row(x, h);
        let ls = &self.cells[c].ls;
        (residual_var[c] * (1.0 + ls.leverage(&row)) / ls.rows() as f64).sqrt()
    }
}
