//! Storage function, supply rate, dissipativity conditions, CFL limits,
//! energy ledgers and a dense spectral-radius oracle.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sprs::CsMat;

use crate::error::{Error, Result};
use crate::kernels::{FieldState, YeeGrid};
use crate::mesh::Axis;
use crate::operators::{spmv, to_triplets, SystemMatrices};

/// Default upper bound on unknowns for dense eigen and factorization work.
pub const DENSE_SIZE_GUARD: usize = 5000;

/// Tolerance on the spectral radius for marginally stable schemes.
pub const RHO_TOLERANCE: f64 = 1e-10;

/// Stored energy `(Δt/2) x^T R x` from the assembled matrix.
pub fn storage(sys: &SystemMatrices, x: &[f64]) -> f64 {
    sys.storage(x)
}

/// Stored energy evaluated directly on the field arrays, using E^n,
/// H^{n-1/2} and the H^{n+1/2} that the next half step would produce.
pub fn storage_explicit(grid: &YeeGrid, st: &FieldState) -> f64 {
    let sp = grid.layout.spec.spacing;
    let mut electric = 0.0;
    for a in Axis::ALL {
        let i = a.index();
        let area = grid.e_area(a);
        let eps = &grid.materials.eps[i];
        let mut s = 0.0;
        for l in 0..area.len() {
            s += area[l] * eps[l] * st.e[i][l] * st.e[i][l];
        }
        electric += 0.5 * sp[i] * s;
    }
    let mut magnetic = 0.0;
    for a in Axis::ALL {
        let i = a.index();
        let len = grid.h_length(a);
        let mu = &grid.materials.mu[i];
        let area = sp[a.next().index()] * sp[a.prev().index()];
        let mut s = 0.0;
        for l in 0..len.len() {
            if len[l] > 0.0 {
                let w = len[l] * area * mu[l];
                let h_next = st.h[i][l] - grid.dt / (mu[l] * area) * grid.curl_e(st, a, l);
                s += w * st.h[i][l] * h_next;
            }
        }
        magnetic += 0.5 * s;
    }
    electric + magnetic
}

/// Supply `Δt ((y^n + y^{n+1})/2)^T S u`.
pub fn supply(sys: &SystemMatrices, y0: &[f64], y1: &[f64], u: &[f64]) -> Result<f64> {
    let n = sys.input_count();
    for (what, v) in [
        ("boundary trace", y0),
        ("boundary trace", y1),
        ("hanging input", u),
    ] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                found: v.len(),
            });
        }
    }
    Ok(sys.supply(y0, y1, u))
}

/// Verdicts on the three dissipativity conditions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub r_symmetric: bool,
    pub r_positive: bool,
    pub f_psd: bool,
    pub ls_equals_b: bool,
    /// Smallest eigenvalue of the diagonally scaled R, `1 - (Δt/2) s_max`.
    pub scaled_min_eigenvalue: f64,
    /// Smallest diagonal entry of `F + F^T`.
    pub min_conductivity_term: f64,
}

impl Theorem1Report {
    pub fn all_pass(&self) -> bool {
        self.r_symmetric && self.r_positive && self.f_psd && self.ls_equals_b
    }
}

fn dense(m: &CsMat<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.rows(), m.cols());
    for (v, (r, c)) in m.iter() {
        d[(r, c)] += *v;
    }
    d
}

/// Check `R = R^T > 0`, `F + F^T >= 0` and `LS = B`.
///
/// Positivity of R uses a dense Cholesky factorization when the system fits
/// under `guard`, and otherwise the equivalent singular-value bound.
pub fn check_theorem1(sys: &SystemMatrices, guard: usize) -> Result<Theorem1Report> {
    let rt = sys.r.transpose_view().to_csr();
    let r_symmetric = to_triplets(&sys.r) == to_triplets(&rt);

    let cfl = generalized_cfl(sys)?;
    let scaled_min_eigenvalue = 1.0 - 0.5 * sys.dt * cfl.max_singular_value;
    let r_positive = if sys.len() <= guard {
        dense(&sys.r).cholesky().is_some()
    } else {
        scaled_min_eigenvalue > 0.0
    };

    let ft = sys.f.transpose_view().to_csr();
    let sym: CsMat<f64> = &sys.f + &ft;
    let mut diagonal_only = true;
    let mut min_diag = f64::INFINITY;
    for (v, (r, c)) in sym.iter() {
        if r == c {
            min_diag = min_diag.min(*v);
        } else if *v != 0.0 {
            diagonal_only = false;
        }
    }
    if sym.nnz() == 0 || min_diag == f64::INFINITY {
        min_diag = 0.0;
    }
    let f_psd = if diagonal_only {
        min_diag >= 0.0
    } else if sys.len() <= guard {
        let e = nalgebra::SymmetricEigen::new(dense(&sym));
        let scale = e.eigenvalues.amax().max(f64::MIN_POSITIVE);
        e.eigenvalues.min() >= -1e-12 * scale
    } else {
        return Err(Error::SizeGuard {
            unknowns: sys.len(),
            limit: guard,
        });
    };

    let l = sys.lt.transpose_view().to_csr();
    let mut ls_equals_b = l.rows() == sys.b.rows() && l.cols() == sys.b.cols();
    if ls_equals_b {
        let mut t = sprs::TriMat::new((sys.input_count(), sys.input_count()));
        for (i, &s) in sys.s.iter().enumerate() {
            t.add_triplet(i, i, s);
        }
        let s: CsMat<f64> = t.to_csr();
        let ls: CsMat<f64> = &l * &s;
        ls_equals_b = to_triplets(&ls) == to_triplets(&sys.b);
    }

    Ok(Theorem1Report {
        r_symmetric,
        r_positive,
        f_psd,
        ls_equals_b,
        scaled_min_eigenvalue,
        min_conductivity_term: min_diag,
    })
}

/// Classical and generalized time-step limits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CflResult {
    pub classical_limit: f64,
    pub generalized_limit: f64,
    pub max_singular_value: f64,
    /// All singular values when computed densely, largest first; empty when
    /// only the largest was estimated iteratively.
    pub singular_values: Vec<f64>,
}

/// Classical limit `sqrt(μ ε) / sqrt(1/Δx² + 1/Δy² + 1/Δz²)`.
pub fn classical_cfl(spacing: [f64; 3], eps_min: f64, mu_min: f64) -> f64 {
    let s: f64 = spacing.iter().map(|d| 1.0 / (d * d)).sum();
    (eps_min * mu_min).sqrt() / s.sqrt()
}

/// Largest dense problem handled by full SVD; bigger ones use Lanczos.
const DENSE_SVD_LIMIT: usize = 2000;

/// Generalized limit `min_k 2/s_k` from the singular values of the scaled curl.
pub fn generalized_cfl(sys: &SystemMatrices) -> Result<CflResult> {
    let d = &sys.diag;
    let eps_min = d.eps.iter().copied().fold(f64::INFINITY, f64::min);
    let mu_min = d.mu.iter().copied().fold(f64::INFINITY, f64::min);
    if !(eps_min > 0.0 && mu_min > 0.0) {
        return Err(Error::InvalidRange {
            what: "material",
            detail: "permittivity and permeability must be positive".into(),
        });
    }
    let spacing = {
        // Edge lengths along each axis; the region is uniformly gridded.
        let mut s = [0.0; 3];
        for (k, &(a, _)) in sys.index.e_list.iter().enumerate() {
            s[a.index()] = d.l[k];
        }
        s
    };
    let classical = if spacing.iter().all(|&x| x > 0.0) {
        classical_cfl(spacing, eps_min, mu_min)
    } else {
        f64::INFINITY
    };
    let sigma = sys.scaled_curl();
    let (smax, svals) = if sigma.rows().min(sigma.cols()) == 0 {
        (0.0, Vec::new())
    } else if sigma.rows().max(sigma.cols()) <= DENSE_SVD_LIMIT {
        let mut sv: Vec<f64> = dense(&sigma).singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (sv[0], sv)
    } else {
        (max_singular_lanczos(&sigma, 300), Vec::new())
    };
    Ok(CflResult {
        classical_limit: classical,
        generalized_limit: if smax > 0.0 {
            2.0 / smax
        } else {
            f64::INFINITY
        },
        max_singular_value: smax,
        singular_values: svals,
    })
}

/// Largest singular value of a sparse matrix by Lanczos on `M^T M` with full
/// reorthogonalization.
pub fn max_singular_lanczos(m: &CsMat<f64>, max_iter: usize) -> f64 {
    let n = m.cols();
    let mt = m.transpose_view().to_csr();
    let apply = |v: &[f64]| spmv(&mt, &spmv(m, v));
    let k = max_iter.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    // Deterministic start vector with components along every direction.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut last = 0.0;
    for j in 0..k {
        basis.push(v.clone());
        let mut w = apply(&v);
        let a: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        alpha.push(a);
        for b in &basis {
            let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        for b in &basis {
            let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let bn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let t = tridiagonal_max(&alpha, &beta);
        if j > 10 && ((t - last).abs() <= 1e-14 * t || bn <= 1e-14 * t) {
            return t.max(0.0).sqrt();
        }
        last = t;
        if bn <= 1e-300 {
            break;
        }
        beta.push(bn);
        v = w.iter().map(|x| x / bn).collect();
    }
    tridiagonal_max(&alpha, &beta).max(0.0).sqrt()
}

fn tridiagonal_max(alpha: &[f64], beta: &[f64]) -> f64 {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    nalgebra::SymmetricEigen::new(t).eigenvalues.max()
}

/// Dense one-step iteration matrix of a linear map on `n` unknowns.
pub fn iteration_matrix_from_map<F>(n: usize, guard: usize, mut step: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n > guard {
        return Err(Error::SizeGuard {
            unknowns: n,
            limit: guard,
        });
    }
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = step(&e)?;
        e[j] = 0.0;
        m.set_column(j, &DVector::from_vec(col));
    }
    Ok(m)
}

/// Iteration matrix `(R+F)^{-1}(R-F)` of a region with zero inputs.
pub fn iteration_matrix(sys: &SystemMatrices, guard: usize) -> Result<DMatrix<f64>> {
    let u = vec![0.0; sys.input_count()];
    iteration_matrix_from_map(sys.len(), guard, |x| sys.apply_matrix_recursion(x, &u))
}

/// Largest eigenvalue modulus of a dense matrix.
///
/// The matrix is balanced first: E and H blocks differ by orders of
/// magnitude, and faer's QR can cycle forever on the raw form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let n = m.nrows();
    let m = balance(m);
    let f = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    f.eigenvalues::<faer::complex_native::c64>()
        .iter()
        .map(|z| z.re.hypot(z.im))
        .fold(0.0, f64::max)
}

/// Diagonal similarity by powers of two that evens out row and column norms.
/// The scaling is exact, so the eigenvalues are unchanged.
fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut b = m.clone();
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let c: f64 = (0..n).filter(|&k| k != i).map(|k| b[(k, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&k| k != i).map(|k| b[(i, k)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let mut f = 1.0;
            let (mut c2, mut r2) = (c, r);
            while c2 < r2 / 2.0 {
                c2 *= 2.0;
                r2 /= 2.0;
                f *= 2.0;
            }
            while c2 >= r2 * 2.0 {
                c2 /= 2.0;
                r2 *= 2.0;
                f /= 2.0;
            }
            if c2 + r2 < 0.95 * (c + r) {
                changed = true;
                b.column_mut(i).scale_mut(f);
                b.row_mut(i).scale_mut(1.0 / f);
            }
        }
        if !changed {
            break;
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub rho: f64,
    pub stable: bool,
}

impl OracleResult {
    pub fn from_rho(rho: f64) -> Self {
        OracleResult {
            rho,
            stable: rho <= 1.0 + RHO_TOLERANCE,
        }
    }
}

/// Spectral radius of a closed region's iteration matrix.
pub fn spectral_radius_oracle(sys: &SystemMatrices, guard: usize) -> Result<OracleResult> {
    Ok(OracleResult::from_rho(spectral_radius(&iteration_matrix(
        sys, guard,
    )?)))
}

/// One row of an energy ledger.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyEntry {
    pub step: usize,
    /// Storage after the step.
    pub storage: f64,
    /// Energy supplied during the step.
    pub supply: f64,
    /// Storage change minus supply.
    pub residual: f64,
}

/// Per-step energy balance with a flag on steps that create energy.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyLedger {
    pub initial_storage: f64,
    pub entries: Vec<EnergyEntry>,
    /// Relative tolerance on positive residuals.
    pub tolerance: f64,
    /// Steps whose residual exceeded the tolerance.
    pub flagged: Vec<usize>,
    scale: f64,
}

impl EnergyLedger {
    pub fn new(initial_storage: f64, tolerance: f64) -> Self {
        EnergyLedger {
            initial_storage,
            entries: Vec::new(),
            tolerance,
            flagged: Vec::new(),
            scale: initial_storage.abs(),
        }
    }

    /// Record one step going from `before` to `after` with supply `s`.
    pub fn record(&mut self, step: usize, before: f64, after: f64, s: f64) {
        let residual = after - before - s;
        self.scale = self.scale.max(before.abs()).max(after.abs()).max(s.abs());
        if residual > self.tolerance * self.scale.max(f64::MIN_POSITIVE) {
            self.flagged.push(step);
        }
        self.entries.push(EnergyEntry {
            step,
            storage: after,
            supply: s,
            residual,
        });
    }

    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.residual.abs())
            .fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.residual)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,storage,supply,residual")?;
        writeln!(f, "0,{:e},0,0", self.initial_storage)?;
        for e in &self.entries {
            writeln!(
                f,
                "{},{:e},{:e},{:e}",
                e.step, e.storage, e.supply, e.residual
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::FaceBc;
    use crate::mesh::{assign_random_materials, Layout, MaterialGrid, Range, RegionSpec};
    use crate::{EPS0, MU0};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balancing_keeps_eigenvalues() {
        // Oracle: a rotation by θ with a pair of decaying modes, hidden
        // behind a badly scaled similarity.
        let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                c, -sn, 0.0, 0.0, sn, c, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.25,
            ],
        );
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1e-6, 1e3, 7.0, 1e8]));
        let di = d.map(|x| if x != 0.0 { 1.0 / x } else { 0.0 });
        let m = &d * a * &di;
        assert!((spectral_radius(&m) - 1.0).abs() < 1e-12);
        let b = balance(&m);
        let norm = |i: usize| -> (f64, f64) {
            let off = |x: f64| x.abs();
            (
                (0..4).filter(|&k| k != i).map(|k| off(b[(k, i)])).sum(),
                (0..4).filter(|&k| k != i).map(|k| off(b[(i, k)])).sum(),
            )
        };
        let (c0, r0) = norm(0);
        assert!(c0 / r0 < 4.0 && r0 / c0 < 4.0);
    }

    fn vacuum(n: [usize; 3], d: [f64; 3], faces: FaceBc, frac: f64) -> YeeGrid {
        let layout = Layout::new(RegionSpec::new(n, d).unwrap());
        let m = MaterialGrid::uniform(&layout, EPS0, 0.0, MU0).unwrap();
        let dt = frac * classical_cfl(d, EPS0, MU0);
        YeeGrid::new(layout, m, [faces; 6], dt).unwrap()
    }

    fn random_grid(n: [usize; 3], seed: u64, sigma: f64, faces: FaceBc) -> YeeGrid {
        let d = [0.01, 0.007, 0.012];
        let layout = Layout::new(RegionSpec::new(n, d).unwrap());
        let m = assign_random_materials(
            &layout,
            Range::new(EPS0, 3.0 * EPS0),
            Range::new(0.0, sigma),
            MU0,
            seed,
        )
        .unwrap();
        YeeGrid::new(layout, m, [faces; 6], 0.99 * classical_cfl(d, EPS0, MU0)).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_edge_storage() {
        let g = vacuum([3, 3, 3], [0.01; 3], FaceBc::Open, 0.99);
        let mut st = FieldState::zeros(&g.layout);
        let d = g.e_dims(Axis::X);
        st.e[0][d.index([1, 1, 1])] = 1.0;
        let e = storage_explicit(&g, &st);
        assert!((e - 0.5 * EPS0 * 1e-6).abs() < 1e-30);
        assert!((e - 4.427e-18).abs() < 1e-21);
    }

    #[test]
    fn vacuum_classical_limit() {
        let c = classical_cfl([0.01; 3], EPS0, MU0);
        assert!((c - 19.26e-12).abs() < 0.01e-12, "{c}");
    }

    #[test]
    fn metascreen_time_steps() {
        for (d, expect) in [
            ([1e-4, 50.8e-6, 1e-4], 0.1362e-12),
            ([0.7e-3, 0.1524e-3, 0.7e-3], 0.4810e-12),
        ] {
            let g = vacuum([6, 6, 6], d, FaceBc::Pmc, 0.5);
            let sys = SystemMatrices::assemble(&g).unwrap();
            let cfl = generalized_cfl(&sys).unwrap();
            let dt = 0.99 * cfl.generalized_limit;
            assert!((dt / expect - 1.0).abs() < 5e-3, "{dt}");
            assert!((cfl.generalized_limit / cfl.classical_limit - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn lanczos_matches_dense_svd() {
        let g = random_grid([3, 4, 3], 11, 0.0, FaceBc::Open);
        let sys = SystemMatrices::assemble(&g).unwrap();
        let sigma = sys.scaled_curl();
        let dense_max = dense(&sigma).singular_values().max();
        let l = max_singular_lanczos(&sigma, 300);
        assert!((l / dense_max - 1.0).abs() < 1e-10);
    }

    #[test]
    fn theorem1_checks() {
        let g = vacuum([2, 2, 2], [0.01; 3], FaceBc::Pec, 0.99);
        let sys = SystemMatrices::assemble(&g).unwrap();
        assert!(check_theorem1(&sys, DENSE_SIZE_GUARD).unwrap().all_pass());

        let mut m = g.materials.clone();
        let d = g.e_dims(Axis::X);
        m.sigma[0][d.index([0, 1, 1])] = -0.5;
        let bad = YeeGrid::new(g.layout.clone(), m, g.faces, g.dt).unwrap();
        let sys_bad = SystemMatrices::assemble(&bad).unwrap();
        let rep = check_theorem1(&sys_bad, DENSE_SIZE_GUARD).unwrap();
        assert!(!rep.f_psd && rep.r_positive && rep.ls_equals_b);

        let cfl = generalized_cfl(&sys).unwrap();
        let over = YeeGrid::new(
            g.layout.clone(),
            g.materials.clone(),
            g.faces,
            1.01 * cfl.generalized_limit,
        )
        .unwrap();
        let rep =
            check_theorem1(&SystemMatrices::assemble(&over).unwrap(), DENSE_SIZE_GUARD).unwrap();
        assert!(!rep.r_positive);
        assert!(rep.scaled_min_eigenvalue < 0.0);
    }

    #[test]
    fn oracle_brackets_the_limit() {
        let g = vacuum([2, 2, 2], [0.01; 3], FaceBc::Pec, 0.99);
        let o = spectral_radius_oracle(&SystemMatrices::assemble(&g).unwrap(), DENSE_SIZE_GUARD)
            .unwrap();
        assert!(o.stable, "{}", o.rho);
        // With zero hanging inputs the largest mode reaches the classical bound.
        let g = vacuum([2, 2, 2], [0.01; 3], FaceBc::Pmc, 1.05);
        let o = spectral_radius_oracle(&SystemMatrices::assemble(&g).unwrap(), DENSE_SIZE_GUARD)
            .unwrap();
        assert!(!o.stable && o.rho > 1.0);
    }

    #[test]
    fn supply_sign_is_positive_for_inward_flux() {
        let g = vacuum([1, 1, 1], [0.01; 3], FaceBc::Open, 0.9);
        let sys = SystemMatrices::assemble(&g).unwrap();
        // Ez on the west face with Hy < 0 outside gives Sx = -Ez Hy > 0.
        let k = sys
            .inputs
            .iter()
            .position(|h| {
                h.component == Axis::Z && h.slot.normal == Axis::X && h.slot.active_positive
            })
            .unwrap();
        let mut y = vec![0.0; sys.input_count()];
        let mut u = vec![0.0; sys.input_count()];
        y[k] = 1.0;
        u[k] = -1.0;
        assert!(supply(&sys, &y, &y, &u).unwrap() > 0.0);
        let zero = vec![0.0; sys.input_count()];
        assert_eq!(supply(&sys, &zero, &zero, &u).unwrap(), 0.0);
    }

    #[test]
    fn ledger_flags_energy_creation() {
        let mut l = EnergyLedger::new(1.0, 1e-12);
        l.record(1, 1.0, 1.0, 0.0);
        l.record(2, 1.0, 0.9, 0.0);
        assert!(l.passed());
        l.record(3, 0.9, 1.0, 0.0);
        assert_eq!(l.flagged, vec![3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn storage_paths_agree(seed in any::<u64>(), nx in 1usize..4, ny in 1usize..4, nz in 1usize..4) {
            let g = random_grid([nx, ny, nz], seed, 5e-5, FaceBc::Open);
            let sys = SystemMatrices::assemble(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_vec(sys.len(), &mut rng);
            let mut st = FieldState::zeros(&g.layout);
            sys.index.scatter(&x, &mut st);
            let a = storage(&sys, &x);
            let b = storage_explicit(&g, &st);
            prop_assert!((a - b).abs() <= 1e-13 * a.abs());
            prop_assert!(a > 0.0);
        }

        #[test]
        fn energy_identity_for_open_region(seed in any::<u64>()) {
            let g = random_grid([2, 3, 2], seed, 0.02, FaceBc::Open);
            let sys = SystemMatrices::assemble(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x0 = rand_vec(sys.len(), &mut rng);
            let u = rand_vec(sys.input_count(), &mut rng);
            let x1 = sys.apply_matrix_recursion(&x0, &u).unwrap();
            let ds = storage(&sys, &x1) - storage(&sys, &x0);
            let s = supply(&sys, &sys.trace(&x0), &sys.trace(&x1), &u).unwrap();
            // Exact balance: storage change = supply - conductive loss.
            let d = &sys.diag;
            let loss: f64 = (0..sys.index.ne())
                .map(|k| {
                    let eb = x0[k] + x1[k];
                    0.25 * sys.dt * d.l[k] * d.a_dual[k] * d.sigma[k] * eb * eb
                })
                .sum();
            let scale = storage(&sys, &x0).abs() + s.abs();
            prop_assert!((ds - s + loss).abs() <= 1e-11 * scale);
            prop_assert!(ds - s <= 1e-12 * scale);
        }

        #[test]
        fn classical_bounds_generalized(seed in any::<u64>()) {
            let g = random_grid([2, 2, 3], seed, 0.0, FaceBc::Pec);
            let sys = SystemMatrices::assemble(&g).unwrap();
            let c = generalized_cfl(&sys).unwrap();
            prop_assert!(c.classical_limit <= c.generalized_limit * (1.0 + 1e-12));
        }
    }
}
