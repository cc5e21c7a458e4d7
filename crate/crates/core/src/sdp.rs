//! Conic solver for lifted programs.
//!
//! The program is put in the form `min cᵀx  s.t.  Ax + s = b, s ∈ K` with
//! `K = {0}^z × R₊^l × S₊^{n1} × ...` and solved by operator splitting on the
//! homogeneous self-dual embedding, so an infeasible instance produces a
//! dual ray directly.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::compiler::{BlockKind, LiftedSdp, LinearForm};
use crate::model::{Monomial, Term};

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Relative tolerance on primal/dual residuals and the duality gap.
    pub eps: f64,
    pub max_iters: usize,
    /// A dual ray certifies infeasibility when its normalized constant term
    /// is at most `-infeasibility_tol`.
    pub infeasibility_tol: f64,
    pub seed: u64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    /// Initial dual step scale; adapted during the solve.
    pub scale: f64,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eps: 1e-7,
            max_iters: 100_000,
            infeasibility_tol: 1e-6,
            seed: 0,
            alpha: 1.5,
            scale: 0.1,
            verbose: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("assignment has no value for e({0})")]
    MissingVariable(String),
}

/// Values of the moment variables, keyed by each variable's representative.
/// The constant moment is implicitly 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentAssignment {
    pub values: BTreeMap<Monomial, f64>,
}

impl MomentAssignment {
    pub fn from_vector(sdp: &LiftedSdp, x: &[f64]) -> Self {
        MomentAssignment { values: sdp.vars.iter().cloned().zip(x.iter().copied()).collect() }
    }

    /// Moments of a finite mixture of worlds, each valuing ground terms.
    pub fn from_distribution<F: Fn(&Term) -> f64>(sdp: &LiftedSdp, worlds: &[(f64, F)]) -> Self {
        let value = |m: &Monomial| -> f64 {
            worlds.iter().map(|(w, world)| w * m.factors().map(|(t, e)| world(t).powi(e as i32)).product::<f64>()).sum()
        };
        MomentAssignment { values: sdp.vars.iter().map(|m| (m.clone(), value(m))).collect() }
    }

    pub fn get(&self, m: &Monomial) -> Option<f64> {
        if m.is_one() {
            Some(1.0)
        } else {
            self.values.get(m).copied()
        }
    }

    pub fn to_vector(&self, sdp: &LiftedSdp) -> Result<Vec<f64>, SdpError> {
        sdp.vars.iter().map(|m| self.get(m).ok_or_else(|| SdpError::MissingVariable(m.to_string()))).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.values.iter().map(|(m, v)| (m.to_string(), (*v).into())).collect();
        serde_json::Value::Object(map)
    }
}

/// Dual multipliers for one block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockDual {
    Psd(DMatrix<f64>),
    Zero(Vec<f64>),
}

/// Dual multipliers whose aggregation is (approximately) the constant `-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualWitness {
    /// Aligned with `sdp.blocks`.
    pub blocks: Vec<BlockDual>,
    /// Aligned with `sdp.scalars`; nonnegative.
    pub scalars: Vec<f64>,
    /// `-bᵀy` of the ray before normalization to unit norm.
    pub gamma: f64,
}

impl DualWitness {
    /// `Σ ⟨Y_b, M_b⟩ + Σ y_r L_r`, a linear form over moment variables.
    pub fn aggregate(&self, sdp: &LiftedSdp) -> LinearForm {
        let mut constant = 0.0;
        let mut coeffs = vec![0.0; sdp.vars.len()];
        let mut add = |w: f64, f: &LinearForm| {
            constant += w * f.constant;
            for &(v, c) in &f.coeffs {
                coeffs[v] += w * c;
            }
        };
        for (b, dual) in sdp.blocks.iter().zip(&self.blocks) {
            match dual {
                BlockDual::Psd(y) => {
                    for j in 0..b.size() {
                        for i in 0..=j {
                            let w = if i == j { y[(i, i)] } else { 2.0 * y[(i, j)] };
                            add(w, b.entry(i, j));
                        }
                    }
                }
                BlockDual::Zero(y) => {
                    for (w, f) in y.iter().zip(&b.entries) {
                        add(*w, f);
                    }
                }
            }
        }
        for (w, s) in self.scalars.iter().zip(&sdp.scalars) {
            add(*w, &s.form);
        }
        LinearForm { constant, coeffs: coeffs.into_iter().enumerate().filter(|(_, c)| *c != 0.0).collect() }
    }

    /// Largest deviation of the aggregate from `-1`, together with the most
    /// negative eigenvalue or scalar multiplier.
    pub fn residual(&self, sdp: &LiftedSdp) -> (f64, f64) {
        let agg = self.aggregate(sdp);
        let coeff = agg.coeffs.iter().map(|(_, c)| c.abs()).fold((agg.constant + 1.0).abs(), f64::max);
        let mut neg = 0.0f64;
        for d in &self.blocks {
            if let BlockDual::Psd(y) = d {
                neg = neg.min(min_eigenvalue(y));
            }
        }
        for &r in &self.scalars {
            neg = neg.min(r);
        }
        (coeff, -neg)
    }

    pub fn verify(&self, sdp: &LiftedSdp, tol: f64) -> bool {
        let (res, neg) = self.residual(sdp);
        res <= tol && neg <= tol
    }
}

#[derive(Clone, Debug)]
pub enum SolveStatus {
    Feasible(MomentAssignment),
    Infeasible(DualWitness),
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

#[derive(Clone, Debug)]
pub enum OptimizeResult {
    Optimal { value: f64, assignment: MomentAssignment },
    Infeasible(DualWitness),
    Unbounded,
    Unknown(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub origin: String,
    pub kind: &'static str,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.violations.iter().map(|v| v.magnitude).fold(0.0, f64::max)
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{} {}: {:.3e}", v.kind, v.origin, v.magnitude)?;
        }
        Ok(())
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Magnitude of the largest term in `f` at `x`, for relative tolerances.
fn form_scale(f: &LinearForm, x: &[f64]) -> f64 {
    f.coeffs.iter().map(|&(v, c)| (c * x[v]).abs()).fold(f.constant.abs(), f64::max)
}

/// Every block, equation and scalar row violated by more than `eps`
/// (relative to the magnitude of the quantities involved, floored at 1).
pub fn check_assignment(sdp: &LiftedSdp, m: &MomentAssignment, eps: f64) -> Result<ViolationReport, SdpError> {
    let x = m.to_vector(sdp)?;
    let mut out = ViolationReport::default();
    for b in &sdp.blocks {
        match b.kind {
            BlockKind::Psd => {
                let s = b.size();
                let mut mat = DMatrix::zeros(s, s);
                let mut scale = 1.0f64;
                for j in 0..s {
                    for i in 0..=j {
                        let f = b.entry(i, j);
                        let v = f.eval(&x);
                        scale = scale.max(form_scale(f, &x));
                        mat[(i, j)] = v;
                        mat[(j, i)] = v;
                    }
                }
                let lam = min_eigenvalue(&mat);
                if lam < -eps * scale {
                    out.violations.push(Violation { origin: b.origin.clone(), kind: "psd", magnitude: -lam });
                }
            }
            BlockKind::Zero => {
                for f in &b.entries {
                    let v = f.eval(&x);
                    if v.abs() > eps * form_scale(f, &x).max(1.0) {
                        out.violations.push(Violation { origin: b.origin.clone(), kind: "zero", magnitude: v.abs() });
                    }
                }
            }
        }
    }
    for s in &sdp.scalars {
        let v = s.form.eval(&x);
        if v < -eps * form_scale(&s.form, &x).max(1.0) {
            out.violations.push(Violation { origin: s.origin.clone(), kind: "scalar", magnitude: -v });
        }
    }
    Ok(out)
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
struct Csr {
    nrows: usize,
    ncols: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_rows(ncols: usize, rows: &[Vec<(usize, f64)>]) -> Csr {
        let mut ptr = Vec::with_capacity(rows.len() + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        ptr.push(0);
        for r in rows {
            for &(j, v) in r {
                idx.push(j);
                val.push(v);
            }
            ptr.push(idx.len());
        }
        Csr { nrows: rows.len(), ncols, ptr, idx, val }
    }

    fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut idx = vec![0; self.idx.len()];
        let mut val = vec![0.0; self.val.len()];
        for i in 0..self.nrows {
            for k in self.ptr[i]..self.ptr[i + 1] {
                let j = self.idx[k];
                idx[next[j]] = i;
                val[next[j]] = self.val[k];
                next[j] += 1;
            }
        }
        Csr { nrows: self.ncols, ncols: self.nrows, ptr: counts, idx, val }
    }

    /// `out = self · x`
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.ptr[i]..self.ptr[i + 1] {
                s += self.val[k] * x[self.idx[k]];
            }
            *o = s;
        }
    }

    fn row_norm_inf(&self, i: usize) -> f64 {
        self.val[self.ptr[i]..self.ptr[i + 1]].iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
struct Cones {
    zero: usize,
    nonneg: usize,
    psd: Vec<usize>,
}

impl Cones {
    /// Row ranges of the PSD blocks.
    fn psd_ranges(&self) -> Vec<(usize, usize, usize)> {
        let mut start = self.zero + self.nonneg;
        self.psd
            .iter()
            .map(|&s| {
                let len = s * (s + 1) / 2;
                let r = (start, start + len, s);
                start += len;
                r
            })
            .collect()
    }
}

/// Projection of a packed, √2-scaled symmetric matrix onto the PSD cone.
fn project_psd(v: &mut [f64], s: usize) {
    if s == 1 {
        v[0] = v[0].max(0.0);
        return;
    }
    let mut m = DMatrix::zeros(s, s);
    for j in 0..s {
        for i in 0..=j {
            let k = j * (j + 1) / 2 + i;
            let x = if i == j { v[k] } else { v[k] / SQRT2 };
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return;
    }
    let mut out = DMatrix::zeros(s, s);
    for (l, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > 1e-12 {
            let col = eig.eigenvectors.column(l);
            out += *lam * col * col.transpose();
        }
    }
    for j in 0..s {
        for i in 0..=j {
            let k = j * (j + 1) / 2 + i;
            v[k] = if i == j { out[(i, i)] } else { out[(i, j)] * SQRT2 };
        }
    }
}

/// Projection onto the dual cone `K*`: free on the zero rows.
fn project_dual_cone(y: &mut [f64], cones: &Cones, ranges: &[(usize, usize, usize)]) {
    for v in &mut y[cones.zero..cones.zero + cones.nonneg] {
        *v = v.max(0.0);
    }
    for &(a, b, s) in ranges {
        project_psd(&mut y[a..b], s);
    }
}

/// `min cᵀx + c0  s.t.  Ax + s = b,  s ∈ K`.
struct ConicProblem {
    a: Csr,
    b: Vec<f64>,
    c: Vec<f64>,
    cones: Cones,
    /// Columns are expressed in units of these model bounds on `|x|`, so
    /// every variable is O(1) in any model.
    mag: Vec<f64>,
    /// Row `i` is the original row times `row_scale[i]`.
    row_scale: Vec<f64>,
}

/// Rows: equations, then scalar rows, then PSD blocks (packed, √2-scaled).
///
/// Variables are measured in units of their model bounds, and each PSD block
/// is scaled by the congruence `D M D` with `D = diag(1 / bound(row))`, which
/// keeps the cone and makes a moment matrix entry exactly its variable.
fn assemble(sdp: &LiftedSdp, objective: &[f64]) -> ConicProblem {
    let mag = &sdp.magnitudes;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b = Vec::new();
    let mut row_scale = Vec::new();
    let mut push = |f: &LinearForm, w: f64| {
        rows.push(f.coeffs.iter().map(|&(v, c)| (v, -w * c * mag[v])).collect());
        b.push(w * f.constant);
        row_scale.push(w);
    };
    let mut zero = 0;
    for blk in sdp.zero_blocks() {
        for f in &blk.entries {
            push(f, 1.0);
            zero += 1;
        }
    }
    for s in &sdp.scalars {
        push(&s.form, 1.0);
    }
    let mut psd = Vec::new();
    for blk in sdp.psd_blocks() {
        let dr: Vec<f64> = blk.rows.iter().map(|r| 1.0 / sdp.magnitude(r)).collect();
        for j in 0..blk.size() {
            for i in 0..=j {
                push(blk.entry(i, j), if i == j { dr[i] * dr[i] } else { SQRT2 * dr[i] * dr[j] });
            }
        }
        psd.push(blk.size());
    }
    let cones = Cones { zero, nonneg: sdp.scalars.len(), psd };
    let c = objective.iter().zip(mag).map(|(c, m)| c * m).collect();
    ConicProblem { a: Csr::from_rows(sdp.vars.len(), &rows), b, c, cones, mag: mag.clone(), row_scale }
}

/// Solves `(ρₓI + Aᵀ diag(r) A) w = rhs`, where `r` is the inverse dual metric.
enum LinSolver {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Cg { diag_inv: Vec<f64>, warm: Vec<f64> },
}

const DENSE_LIMIT: usize = 1500;

impl LinSolver {
    fn new(a: &Csr, at: &Csr, rho_x: f64, r: &[f64]) -> LinSolver {
        let n = a.ncols;
        if n <= DENSE_LIMIT {
            let mut k = DMatrix::<f64>::identity(n, n) * rho_x;
            for i in 0..a.nrows {
                let row = a.ptr[i]..a.ptr[i + 1];
                for p in row.clone() {
                    for q in row.clone() {
                        k[(a.idx[p], a.idx[q])] += r[i] * a.val[p] * a.val[q];
                    }
                }
            }
            LinSolver::Dense(nalgebra::Cholesky::new(k).expect("normal matrix is positive definite"))
        } else {
            let diag_inv = (0..n)
                .map(|j| {
                    let s: f64 = (at.ptr[j]..at.ptr[j + 1]).map(|k| r[at.idx[k]] * at.val[k] * at.val[k]).sum();
                    1.0 / (rho_x + s)
                })
                .collect();
            LinSolver::Cg { diag_inv, warm: vec![0.0; n] }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn solve(&mut self, a: &Csr, at: &Csr, rho_x: f64, r: &[f64], rhs: &[f64], tol: f64, scratch: &mut Vec<f64>) -> Vec<f64> {
        match self {
            LinSolver::Dense(ch) => ch.solve(&nalgebra::DVector::from_column_slice(rhs)).as_slice().to_vec(),
            LinSolver::Cg { diag_inv, warm } => {
                let n = rhs.len();
                scratch.resize(a.nrows, 0.0);
                let apply = |v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>| {
                    a.mul(v, scratch);
                    scratch.iter_mut().zip(r).for_each(|(s, ri)| *s *= ri);
                    at.mul(scratch, out);
                    for (o, vi) in out.iter_mut().zip(v) {
                        *o += rho_x * vi;
                    }
                };
                let mut x = warm.clone();
                let mut res = vec![0.0; n];
                apply(&x, &mut res, scratch);
                for i in 0..n {
                    res[i] = rhs[i] - res[i];
                }
                let rhs_norm = norm2(rhs).max(1e-300);
                let mut z: Vec<f64> = res.iter().zip(diag_inv.iter()).map(|(a, b)| a * b).collect();
                let mut p = z.clone();
                let mut rz = dot(&res, &z);
                let mut ap = vec![0.0; n];
                for _ in 0..(10 * n).max(50) {
                    if norm2(&res) <= tol * rhs_norm {
                        break;
                    }
                    apply(&p, &mut ap, scratch);
                    let step = rz / dot(&p, &ap);
                    for i in 0..n {
                        x[i] += step * p[i];
                        res[i] -= step * ap[i];
                    }
                    for i in 0..n {
                        z[i] = res[i] * diag_inv[i];
                    }
                    let rz_new = dot(&res, &z);
                    let beta = rz_new / rz;
                    rz = rz_new;
                    for i in 0..n {
                        p[i] = z[i] + beta * p[i];
                    }
                }
                warm.clone_from(&x);
                x
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Outcome of the embedding iterations, in the original (unscaled) space.
enum Raw {
    Solved { x: Vec<f64>, iters: usize },
    Infeasible { y: Vec<f64>, gamma: f64 },
    Unbounded,
    Exhausted(String),
}

struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
    rho_b: f64,
    rho_c: f64,
}

/// Ruiz equilibration; PSD blocks receive a single row factor each so the
/// scaled cone is unchanged.
fn equilibrate(p: &ConicProblem) -> (Csr, Vec<f64>, Vec<f64>, Scaling) {
    let (m, n) = (p.a.nrows, p.a.ncols);
    let mut a = p.a.clone();
    let mut d = vec![1.0; m];
    let mut e = vec![1.0; n];
    let ranges = p.cones.psd_ranges();
    for _ in 0..25 {
        let mut rn: Vec<f64> = (0..m).map(|i| a.row_norm_inf(i)).collect();
        for &(lo, hi, _) in &ranges {
            let mean = rn[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            rn[lo..hi].iter_mut().for_each(|v| *v = mean);
        }
        let mut cn = vec![0.0f64; n];
        for k in 0..a.idx.len() {
            cn[a.idx[k]] = cn[a.idx[k]].max(a.val[k].abs());
        }
        let fr: Vec<f64> = rn.iter().map(|&v| if v < 1e-8 { 1.0 } else { 1.0 / v.sqrt() }).collect();
        let fc: Vec<f64> = cn.iter().map(|&v| if v < 1e-8 { 1.0 } else { 1.0 / v.sqrt() }).collect();
        for i in 0..m {
            for k in a.ptr[i]..a.ptr[i + 1] {
                a.val[k] *= fr[i] * fc[a.idx[k]];
            }
            d[i] = (d[i] * fr[i]).clamp(1e-4, 1e4);
        }
        for j in 0..n {
            e[j] = (e[j] * fc[j]).clamp(1e-4, 1e4);
        }
    }
    // rebuild from the clamped factors so scaling is exact
    let mut a = p.a.clone();
    for i in 0..m {
        for k in a.ptr[i]..a.ptr[i + 1] {
            a.val[k] *= d[i] * e[a.idx[k]];
        }
    }
    let mut b: Vec<f64> = p.b.iter().zip(&d).map(|(v, s)| v * s).collect();
    let mut c: Vec<f64> = p.c.iter().zip(&e).map(|(v, s)| v * s).collect();
    let rho_b = 1.0 / norm_inf(&b).max(1.0);
    let rho_c = 1.0 / norm_inf(&c).max(1.0);
    b.iter_mut().for_each(|v| *v *= rho_b);
    c.iter_mut().for_each(|v| *v *= rho_c);
    (a, b, c, Scaling { d, e, rho_b, rho_c })
}

const RHO_X: f64 = 1e-6;
const AA_MEMORY: usize = 10;
const AA_SAFEGUARD: f64 = 1.0;
/// Largest weighted residual of an accepted infeasibility ray, relative to
/// its constant term.
const RAY_LEAK: f64 = 1e-2;
const ZERO_CONE_FACTOR: f64 = 1e3;
const MIN_SCALE: f64 = 1e-6;
const MAX_SCALE: f64 = 1e6;

/// Type-II Anderson acceleration of a fixed-point iteration `w ↦ w + f(w)`.
struct Anderson {
    mem: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dw: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(mem: usize) -> Anderson {
        Anderson { mem, prev: None, dw: Vec::new(), df: Vec::new() }
    }

    fn reset(&mut self) {
        self.prev = None;
        self.dw.clear();
        self.df.clear();
    }

    /// Records `(w, f)` and proposes the next iterate, if any history exists.
    fn step(&mut self, w: &[f64], f: &[f64]) -> Option<Vec<f64>> {
        if self.mem == 0 {
            return None;
        }
        if let Some((pw, pf)) = self.prev.take() {
            self.dw.push(w.iter().zip(&pw).map(|(a, b)| a - b).collect());
            self.df.push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dw.len() > self.mem {
                self.dw.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((w.to_vec(), f.to_vec()));
        let k = self.df.len();
        if k == 0 {
            return None;
        }
        let mut g = DMatrix::<f64>::zeros(k, k);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k);
        for i in 0..k {
            for j in 0..=i {
                let v = dot(&self.df[i], &self.df[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
            rhs[i] = dot(&self.df[i], f);
        }
        let reg = 1e-10 * (0..k).map(|i| g[(i, i)]).fold(0.0, f64::max).max(1e-300);
        for i in 0..k {
            g[(i, i)] += reg;
        }
        let gamma = nalgebra::Cholesky::new(g)?.solve(&rhs);
        if gamma.iter().any(|v| !v.is_finite()) {
            self.reset();
            return None;
        }
        let mut next: Vec<f64> = w.iter().zip(f).map(|(a, b)| a + b).collect();
        for (i, gi) in gamma.iter().enumerate() {
            for (t, nx) in next.iter_mut().enumerate() {
                *nx -= gi * (self.dw[i][t] + self.df[i][t]);
            }
        }
        Some(next)
    }
}

/// Douglas-Rachford splitting on the homogeneous self-dual embedding
/// `v = Q u`, `u ∈ Rⁿ × K* × R₊`, `v ∈ {0}ⁿ × K × R₊`, in the diagonal metric
/// `R = diag(ρₓ, 1/σ, 1)` where the dual scale `σ` adapts to balance the
/// primal and dual residuals.
fn run_embedding(p: &ConicProblem, cfg: &SolverConfig) -> Raw {
    let started = Instant::now();
    let (n, m) = (p.a.ncols, p.a.nrows);
    let (a, b, c, sc) = equilibrate(p);
    let at = a.transpose();
    let ranges = p.cones.psd_ranges();
    let zero = p.cones.zero;
    let l = n + m + 1;
    let mut scale = cfg.scale;
    // metric on the y block (per row) and its inverse
    let metric = |scale: f64| -> Vec<f64> {
        (0..m).map(|i| if i < zero { 1.0 / (ZERO_CONE_FACTOR * scale) } else { 1.0 / scale }).collect()
    };
    let mut ry = metric(scale);
    let mut ry_inv: Vec<f64> = ry.iter().map(|v| 1.0 / v).collect();
    let mut lin = LinSolver::new(&a, &at, RHO_X, &ry_inv);
    let mut scratch = Vec::new();

    // (a, b) = M⁻¹ (r1, r2) for M = [[ρₓI, Aᵀ], [-A, R_y]]
    let solve_m = |r1: &[f64], r2: &[f64], tol: f64, lin: &mut LinSolver, ry_inv: &[f64], scratch: &mut Vec<f64>| {
        let t: Vec<f64> = r2.iter().zip(ry_inv).map(|(v, w)| v * w).collect();
        let mut at_t = vec![0.0; n];
        at.mul(&t, &mut at_t);
        let rhs: Vec<f64> = r1.iter().zip(&at_t).map(|(a, b)| a - b).collect();
        let wx = lin.solve(&a, &at, RHO_X, ry_inv, &rhs, tol, scratch);
        let mut wy = vec![0.0; m];
        a.mul(&wx, &mut wy);
        for i in 0..m {
            wy[i] = (wy[i] + r2[i]) * ry_inv[i];
        }
        (wx, wy)
    };
    let h_solve = |lin: &mut LinSolver, ry_inv: &[f64], scratch: &mut Vec<f64>| {
        let (gx, gy) = solve_m(&c, &b, 1e-14, lin, ry_inv, scratch);
        if let LinSolver::Cg { warm, .. } = lin {
            warm.iter_mut().for_each(|v| *v = 0.0);
        }
        let hg = dot(&c, &gx) + dot(&b, &gy);
        (gx, gy, hg)
    };
    let (mut gx, mut gy, mut hg) = h_solve(&mut lin, &ry_inv, &mut scratch);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = vec![0.0; l];
    w[l - 1] = 1.0;
    for wx in w.iter_mut().take(n) {
        *wx = rng.random_range(-1e-6..1e-6);
    }
    let mut u = vec![0.0; l];
    let mut ut = vec![0.0; l];
    let alpha = cfg.alpha;
    let unscale_x = |ux: &[f64]| -> Vec<f64> { ux.iter().zip(&sc.e).map(|(x, e)| x * e / sc.rho_b).collect() };
    let unscale_y = |uy: &[f64]| -> Vec<f64> { uy.iter().zip(&sc.d).map(|(y, d)| y * d / sc.rho_c).collect() };
    let unscale_s = |vs: &[f64]| -> Vec<f64> { vs.iter().zip(&sc.d).map(|(s, d)| s / d / sc.rho_b).collect() };
    let b0 = &p.b;
    let c0 = &p.c;
    let at0 = p.a.transpose();
    let (nb, nc) = (norm_inf(b0), norm_inf(c0));
    let mut last_log = Instant::now();
    let mut aa = Anderson::new(AA_MEMORY);
    let mut accelerated = false;
    let mut prev_fnorm = f64::INFINITY;
    let mut fallback = w.clone();
    let mut last_rescale = 0usize;
    let mut log_ratio = 0.0;
    let mut ratio_count = 0usize;

    for it in 0..cfg.max_iters {
        // ũ = (R + Q)⁻¹ R w
        let rx: Vec<f64> = w[..n].iter().map(|v| RHO_X * v).collect();
        let ryw: Vec<f64> = w[n..n + m].iter().zip(&ry).map(|(v, r)| v * r).collect();
        let tol = (1e-4 * 0.97f64.powi(it.min(1000) as i32)).max(1e-12);
        let (px, py) = solve_m(&rx, &ryw, tol, &mut lin, &ry_inv, &mut scratch);
        let tau = (w[l - 1] + dot(&c, &px) + dot(&b, &py)) / (1.0 + hg);
        for i in 0..n {
            ut[i] = px[i] - tau * gx[i];
        }
        for i in 0..m {
            ut[n + i] = py[i] - tau * gy[i];
        }
        ut[l - 1] = tau;
        // u = Π_C(2ũ - w)
        for i in 0..l {
            u[i] = 2.0 * ut[i] - w[i];
        }
        project_dual_cone(&mut u[n..n + m], &p.cones, &ranges);
        u[l - 1] = u[l - 1].max(0.0);
        // v = R(w + ũ - 2u) is recovered below; w⁺ = w + α(u - ũ)
        let check = it % 10 == 9 || it + 1 == cfg.max_iters;
        let mut v_s = Vec::new();
        let mut kappa = 0.0;
        if check {
            v_s = (0..m).map(|i| ry[i] * (w[n + i] + ut[n + i] - 2.0 * u[n + i])).collect();
            kappa = w[l - 1] + ut[l - 1] - 2.0 * u[l - 1];
        }
        let plain: Vec<f64> = (0..l).map(|i| w[i] + alpha * (u[i] - ut[i])).collect();
        let f: Vec<f64> = plain.iter().zip(&w).map(|(a, b)| a - b).collect();
        let fnorm = norm2(&f);
        if accelerated && fnorm > AA_SAFEGUARD * prev_fnorm {
            // the extrapolated point made things worse; fall back
            w.clone_from(&fallback);
            aa.reset();
            accelerated = false;
            continue;
        }
        prev_fnorm = fnorm;
        fallback.clone_from(&plain);
        match aa.step(&w, &f) {
            Some(next) => {
                w = next;
                accelerated = true;
            }
            None => {
                w = plain;
                accelerated = false;
            }
        }
        if !check {
            continue;
        }

        let tau = u[l - 1];
        let x = unscale_x(&u[..n]);
        let y = unscale_y(&u[n..n + m]);
        let s = unscale_s(&v_s);
        let mut ax = vec![0.0; m];
        p.a.mul(&x, &mut ax);
        let mut aty = vec![0.0; n];
        at0.mul(&y, &mut aty);
        let bty = dot(b0, &y);
        let ctx = dot(c0, &x);

        // infeasibility: y ∈ K*, Aᵀy ≈ 0, bᵀy < 0. Columns are in model
        // units, so the leftover Aᵀy must stay far below |bᵀy| in total or a
        // genuine model could still fit.
        let ynorm = norm2(&y);
        if ynorm > 0.0 && bty < 0.0 {
            let cst = bty / ynorm;
            let res = norm_inf(&aty) / ynorm;
            let leak = aty.iter().map(|a| a.abs()).sum::<f64>() / bty.abs();
            if cst <= -cfg.infeasibility_tol && res <= cfg.eps * cst.abs() && leak <= RAY_LEAK {
                log::debug!("infeasible after {} iterations", it + 1);
                return Raw::Infeasible { y: y.iter().zip(&p.row_scale).map(|(v, r)| v * r / ynorm).collect(), gamma: -cst };
            }
        }
        let xnorm = norm2(&x);
        if xnorm > 0.0 && ctx < 0.0 {
            let cst = ctx / xnorm;
            let res: f64 = ax.iter().zip(&s).map(|(a, s)| (a + s).abs()).fold(0.0, f64::max) / xnorm;
            if cst <= -cfg.infeasibility_tol && res <= cfg.eps * cst.abs() {
                return Raw::Unbounded;
            }
        }
        if tau > 1e-12 * (1.0 + kappa.abs()) {
            let pres = ax.iter().zip(&s).zip(b0).map(|((a, s), b)| (a + s - b * tau).abs()).fold(0.0, f64::max) / tau;
            let dres = aty.iter().zip(c0).map(|(a, c)| (a + c * tau).abs()).fold(0.0, f64::max) / tau;
            let (pobj, dobj) = (ctx / tau, bty / tau);
            let gap = (pobj + dobj).abs();
            let p_scale = 1.0 + nb.max(norm_inf(&ax) / tau).max(norm_inf(&s) / tau);
            let d_scale = 1.0 + nc.max(norm_inf(&aty) / tau);
            let p_ok = pres <= cfg.eps * p_scale;
            let d_ok = dres <= cfg.eps * d_scale;
            let g_ok = gap <= cfg.eps * (1.0 + pobj.abs() + dobj.abs());
            if cfg.verbose && (last_log.elapsed().as_secs_f64() > 1.0 || it + 1 == cfg.max_iters) {
                log::info!(
                    "iter {:>6}  pres {:.2e}  dres {:.2e}  gap {:.2e}  obj {:.8}  scale {:.2e}  t {:.1}s",
                    it + 1,
                    pres,
                    dres,
                    gap,
                    pobj,
                    scale,
                    started.elapsed().as_secs_f64()
                );
                last_log = Instant::now();
            }
            if p_ok && d_ok && g_ok {
                return Raw::Solved { x: x.iter().zip(&p.mag).map(|(v, m)| v / tau * m).collect(), iters: it + 1 };
            }
            // accumulate the residual balance and adapt the dual scale
            let rel_p = pres / p_scale;
            let rel_d = dres / d_scale;
            if rel_p > 0.0 && rel_d > 0.0 {
                log_ratio += (rel_p / rel_d).ln();
                ratio_count += 1;
            }
            let interval = 100usize.max(it / 10);
            if it - last_rescale >= interval && ratio_count > 0 {
                let factor = (0.5 * log_ratio / ratio_count as f64).exp();
                if !(1.0 / 3.0..=3.0).contains(&factor) {
                    let new_scale = (scale * factor).clamp(MIN_SCALE, MAX_SCALE);
                    // keep (u, v) fixed: w = u + R⁻¹ v
                    let v_y: Vec<f64> = (0..m).map(|i| ry[i] * (w[n + i] - u[n + i])).collect();
                    scale = new_scale;
                    ry = metric(scale);
                    ry_inv = ry.iter().map(|v| 1.0 / v).collect();
                    for i in 0..m {
                        w[n + i] = u[n + i] + v_y[i] * ry_inv[i];
                    }
                    lin = LinSolver::new(&a, &at, RHO_X, &ry_inv);
                    aa.reset();
                    accelerated = false;
                    (gx, gy, hg) = h_solve(&mut lin, &ry_inv, &mut scratch);
                }
                last_rescale = it;
                log_ratio = 0.0;
                ratio_count = 0;
            }
        }
    }
    Raw::Exhausted(format!("no convergence within {} iterations", cfg.max_iters))
}

fn witness_from_ray(sdp: &LiftedSdp, y: &[f64], gamma: f64) -> DualWitness {
    // rescale so that bᵀy = -1
    let y: Vec<f64> = y.iter().map(|v| v / gamma).collect();
    let mut zero = 0;
    let nz: usize = sdp.zero_blocks().map(|b| b.entries.len()).sum();
    let mut psd = nz + sdp.scalars.len();
    let mut blocks = Vec::with_capacity(sdp.blocks.len());
    for b in &sdp.blocks {
        match b.kind {
            BlockKind::Zero => {
                blocks.push(BlockDual::Zero(y[zero..zero + b.entries.len()].to_vec()));
                zero += b.entries.len();
            }
            BlockKind::Psd => {
                let s = b.size();
                let mut mat = DMatrix::zeros(s, s);
                for j in 0..s {
                    for i in 0..=j {
                        // rows carry their assembly weight; off-diagonal
                        // entries appear twice in the inner product
                        let v = y[psd + j * (j + 1) / 2 + i];
                        let v = if i == j { v } else { v / 2.0 };
                        mat[(i, j)] = v;
                        mat[(j, i)] = v;
                    }
                }
                psd += s * (s + 1) / 2;
                blocks.push(BlockDual::Psd(mat));
            }
        }
    }
    let scalars = y[nz..nz + sdp.scalars.len()].iter().map(|v| v.max(0.0)).collect();
    DualWitness { blocks, scalars, gamma }
}

/// Minimizes or maximizes `e(objective)` over the relaxation.
pub fn optimize(sdp: &LiftedSdp, objective: &LinearForm, direction: Direction, cfg: &SolverConfig) -> OptimizeResult {
    let sign = match direction {
        Direction::Min => 1.0,
        Direction::Max => -1.0,
    };
    let mut c = vec![0.0; sdp.vars.len()];
    for &(v, w) in &objective.coeffs {
        c[v] = sign * w;
    }
    let problem = assemble(sdp, &c);
    let mut cfg = cfg.clone();
    loop {
        match run_embedding(&problem, &cfg) {
            Raw::Solved { x, iters } => {
                let assignment = MomentAssignment::from_vector(sdp, &x);
                let report = check_assignment(sdp, &assignment, (10.0 * cfg.eps).max(1e-9)).expect("complete assignment");
                if report.is_empty() || cfg.eps <= 1e-12 {
                    let value = objective.eval(&x);
                    log::debug!("optimal {value} after {iters} iterations");
                    return OptimizeResult::Optimal { value, assignment };
                }
                // tighten and retry from scratch
                log::debug!("assignment violates {} rows by up to {:.2e}; tightening", report.violations.len(), report.worst());
                cfg.eps /= 10.0;
            }
            Raw::Infeasible { y, gamma } => return OptimizeResult::Infeasible(witness_from_ray(sdp, &y, gamma)),
            Raw::Unbounded => return OptimizeResult::Unbounded,
            Raw::Exhausted(why) => return OptimizeResult::Unknown(why),
        }
    }
}

/// Feasibility as optimization with a zero objective.
pub fn solve_feasibility(sdp: &LiftedSdp, cfg: &SolverConfig) -> SolveStatus {
    match optimize(sdp, &LinearForm::default(), Direction::Min, cfg) {
        OptimizeResult::Optimal { assignment, .. } => SolveStatus::Feasible(assignment),
        OptimizeResult::Infeasible(w) => SolveStatus::Infeasible(w),
        OptimizeResult::Unbounded => SolveStatus::Unknown("zero objective reported unbounded".into()),
        OptimizeResult::Unknown(why) => SolveStatus::Unknown(why),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, CompileOptions};
    use crate::grounder::{ground, Universe};
    use crate::parser::parse_kb;

    fn program(text: &str, d: u32) -> LiftedSdp {
        let kb = parse_kb(text).unwrap().kb;
        let g = ground(&kb, Universe::OpenUniverse).unwrap();
        compile(&g, &CompileOptions::new(d)).unwrap()
    }

    #[test]
    fn packed_projection_matches_clipping() {
        // [[1, 2], [2, 1]] has eigenvalues 3 and -1
        let mut v = vec![1.0, 2.0 * SQRT2, 1.0];
        project_psd(&mut v, 2);
        assert!((v[0] - 1.5).abs() < 1e-12);
        assert!((v[1] / SQRT2 - 1.5).abs() < 1e-12);
        assert!((v[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Csr::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![(1, 3.0)]]);
        let t = a.transpose();
        let mut out = vec![0.0; 3];
        t.mul(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn contradictory_scalars_infeasible() {
        let sdp = program("relation P/1 boolean; constant a; e(P(a)) >= 1; e(P(a)) <= 0;", 2);
        match solve_feasibility(&sdp, &SolverConfig::default()) {
            SolveStatus::Infeasible(w) => assert!(w.verify(&sdp, 1e-6), "{:?}", w.residual(&sdp)),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn boolean_pinned_to_one() {
        let sdp = program("relation P/1 boolean; constant james; e(P(james)) - 1 >= 0;", 2);
        let p = Monomial::from_term(crate::model::Term::ground("P", &["james"]));
        let f = sdp.form(&crate::model::Polynomial::from_monomial(p)).unwrap();
        for dir in [Direction::Min, Direction::Max] {
            match optimize(&sdp, &f, dir, &SolverConfig::default()) {
                OptimizeResult::Optimal { value, .. } => assert!((value - 1.0).abs() < 1e-5, "{value}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn zero_assignment_violation() {
        let sdp = program("relation P/1 boolean; constant a; e(P(a)) >= 1;", 2);
        let zeros = MomentAssignment { values: sdp.vars.iter().map(|m| (m.clone(), 0.0)).collect() };
        let rep = check_assignment(&sdp, &zeros, 1e-7).unwrap();
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].kind, "scalar");
        assert!((rep.violations[0].magnitude - 1.0).abs() < 1e-12);
        assert!(check_assignment(&sdp, &MomentAssignment::default(), 1e-7).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let sdp = program("relation P/1 boolean; relation Q/1 boolean; constant a; e(P(a)*Q(a)) >= 0.3; e(P(a)) <= 0.6;", 4);
        let q = Monomial::from_term(crate::model::Term::ground("Q", &["a"]));
        let f = sdp.form(&crate::model::Polynomial::from_monomial(q)).unwrap();
        let run = || match optimize(&sdp, &f, Direction::Min, &SolverConfig::default()) {
            OptimizeResult::Optimal { value, .. } => value,
            other => panic!("{other:?}"),
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!((a - 0.3).abs() < 1e-5, "{a}");
    }

    #[test]
    fn large_moments_are_not_refuted() {
        // moments reach 1e8 at degree 4; a loose ray must not pass as a proof
        let text = "relation HR/1 bounded 40000; relation H/1 boolean; \
            forall x : H(x)*(HR(x) - 100) >= 0; forall x : (1 - H(x))*(HR(x) - 60) >= 0; forall x : e(H(x)) - 0.2 = 0;";
        let sdp = program(text, 4);
        let hr = sdp.form(&crate::model::Polynomial::from_monomial(crate::parser::parse_monomial("HR(g1)").unwrap())).unwrap();
        match optimize(&sdp, &hr, Direction::Min, &SolverConfig::default()) {
            OptimizeResult::Optimal { value, .. } => assert!((value - 68.0).abs() < 1e-4, "{value}"),
            other => panic!("{other:?}"),
        }
    }
}
