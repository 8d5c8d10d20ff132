//! Sparse system matrices of a grid region.
//!
//! With state `x^n = [E^n; H^{n-1/2}]`, hanging inputs `u^n` and boundary
//! trace `y^n = L^T x^n`, one leapfrog step reads
//! `(R + F) x^{n+1} = (R - F) x^n + B u^n`.

use std::io::Write;
use std::path::Path;

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::kernels::{FaceBc, FieldState, SampleRole, YeeGrid};
use crate::mesh::{Axis, HangingEntry, SlotKind};

/// Mapping between field arrays and the state vector.
///
/// E samples come first (x, y, z components), then H samples. Inactive and
/// clamped E samples and inactive H samples are left out.
#[derive(Clone, Debug)]
pub struct StateIndex {
    pub e_index: [Vec<Option<usize>>; 3],
    pub h_index: [Vec<Option<usize>>; 3],
    pub e_list: Vec<(Axis, usize)>,
    pub h_list: Vec<(Axis, usize)>,
}

impl StateIndex {
    pub fn new(grid: &YeeGrid) -> Self {
        let mut e_list = Vec::new();
        let mut h_list = Vec::new();
        let mut e_index: [Vec<Option<usize>>; 3] = Default::default();
        let mut h_index: [Vec<Option<usize>>; 3] = Default::default();
        for a in Axis::ALL {
            let roles = grid.e_role(a);
            e_index[a.index()] = roles
                .iter()
                .enumerate()
                .map(|(l, r)| match r {
                    SampleRole::Regular | SampleRole::Interface => {
                        e_list.push((a, l));
                        Some(e_list.len() - 1)
                    }
                    _ => None,
                })
                .collect();
        }
        let ne = e_list.len();
        for a in Axis::ALL {
            h_index[a.index()] = grid
                .h_length(a)
                .iter()
                .enumerate()
                .map(|(l, &len)| {
                    if len > 0.0 {
                        h_list.push((a, l));
                        Some(ne + h_list.len() - 1)
                    } else {
                        None
                    }
                })
                .collect();
        }
        StateIndex {
            e_index,
            h_index,
            e_list,
            h_list,
        }
    }

    pub fn ne(&self) -> usize {
        self.e_list.len()
    }

    pub fn nh(&self) -> usize {
        self.h_list.len()
    }

    pub fn len(&self) -> usize {
        self.ne() + self.nh()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, st: &FieldState) -> Vec<f64> {
        self.e_list
            .iter()
            .map(|&(a, l)| st.e[a.index()][l])
            .chain(self.h_list.iter().map(|&(a, l)| st.h[a.index()][l]))
            .collect()
    }

    /// Write a state vector into field arrays; samples outside the state are zeroed.
    pub fn scatter(&self, x: &[f64], st: &mut FieldState) {
        for v in st.e.iter_mut().chain(st.h.iter_mut()) {
            v.iter_mut().for_each(|s| *s = 0.0);
        }
        for (k, &(a, l)) in self.e_list.iter().enumerate() {
            st.e[a.index()][l] = x[k];
        }
        let ne = self.ne();
        for (k, &(a, l)) in self.h_list.iter().enumerate() {
            st.h[a.index()][l] = x[ne + k];
        }
    }
}

/// Diagonal geometry and material factors on the state samples.
#[derive(Clone, Debug)]
pub struct GeometryDiagonals {
    /// Primal edge length of each E sample.
    pub l: Vec<f64>,
    /// Dual face area of each E sample.
    pub a_dual: Vec<f64>,
    pub eps: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Dual edge length of each H sample.
    pub l_dual: Vec<f64>,
    /// Primal face area of each H sample.
    pub a: Vec<f64>,
    pub mu: Vec<f64>,
}

impl GeometryDiagonals {
    pub fn new(grid: &YeeGrid, idx: &StateIndex) -> Self {
        let sp = grid.layout.spec.spacing;
        let m = &grid.materials;
        GeometryDiagonals {
            l: idx.e_list.iter().map(|&(a, _)| sp[a.index()]).collect(),
            a_dual: idx.e_list.iter().map(|&(a, l)| grid.e_area(a)[l]).collect(),
            eps: idx
                .e_list
                .iter()
                .map(|&(a, l)| m.eps[a.index()][l])
                .collect(),
            sigma: idx
                .e_list
                .iter()
                .map(|&(a, l)| m.sigma[a.index()][l])
                .collect(),
            l_dual: idx
                .h_list
                .iter()
                .map(|&(a, l)| grid.h_length(a)[l])
                .collect(),
            a: idx
                .h_list
                .iter()
                .map(|&(a, _)| sp[a.next().index()] * sp[a.prev().index()])
                .collect(),
            mu: idx
                .h_list
                .iter()
                .map(|&(a, l)| m.mu[a.index()][l])
                .collect(),
        }
    }
}

/// Signed incidence matrix C (rows: H samples, columns: E samples).
pub fn curl_operator(grid: &YeeGrid, idx: &StateIndex) -> CsMat<f64> {
    let ne = idx.ne();
    let mut t = TriMat::new((idx.nh(), ne));
    for (row, &(a, l)) in idx.h_list.iter().enumerate() {
        let p = grid.h_dims(a).coords(l);
        let b = a.next();
        let c = a.prev();
        let mut q = p;
        q[b.index()] += 1;
        let mut qc = p;
        qc[c.index()] += 1;
        let terms = [(c, q, 1.0), (c, p, -1.0), (b, qc, -1.0), (b, p, 1.0)];
        for (comp, pos, sign) in terms {
            let el = grid.e_dims(comp).index(pos);
            if let Some(col) = idx.e_index[comp.index()][el] {
                t.add_triplet(row, col, sign);
            }
        }
    }
    t.to_csr()
}

/// Assembled system of one region.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    pub index: StateIndex,
    pub diag: GeometryDiagonals,
    /// Hanging inputs, in input-vector order.
    pub inputs: Vec<HangingEntry>,
    pub dt: f64,
    /// `D_l' C D_l`.
    pub weighted_curl: CsMat<f64>,
    pub r: CsMat<f64>,
    pub f: CsMat<f64>,
    pub b: CsMat<f64>,
    pub lt: CsMat<f64>,
    /// Diagonal of S, one entry per input.
    pub s: Vec<f64>,
}

fn diag_mat(v: &[f64]) -> CsMat<f64> {
    let mut t = TriMat::new((v.len(), v.len()));
    for (i, &x) in v.iter().enumerate() {
        t.add_triplet(i, i, x);
    }
    t.to_csr()
}

impl SystemMatrices {
    /// Assemble R, F, B, L^T and S. Hanging slots on open and interface
    /// faces (and on the hole surface) are inputs; PMC slots are dropped and
    /// PEC samples are removed from the state.
    pub fn assemble(grid: &YeeGrid) -> Result<Self> {
        let idx = StateIndex::new(grid);
        let diag = GeometryDiagonals::new(grid, &idx);
        let dt = grid.dt;
        let ne = idx.ne();
        let n = idx.len();
        let c = curl_operator(grid, &idx);
        let dl = diag_mat(&diag.l);
        let dld = diag_mat(&diag.l_dual);
        let wc: CsMat<f64> = &(&dld * &c) * &dl;
        let mut r = TriMat::new((n, n));
        let mut f = TriMat::new((n, n));
        for k in 0..ne {
            let base = diag.l[k] * diag.a_dual[k];
            r.add_triplet(k, k, base * diag.eps[k] / dt);
            if diag.sigma[k] != 0.0 {
                f.add_triplet(k, k, 0.5 * base * diag.sigma[k]);
            }
        }
        for k in 0..idx.nh() {
            r.add_triplet(ne + k, ne + k, diag.l_dual[k] * diag.a[k] * diag.mu[k] / dt);
        }
        for (row, vec) in wc.outer_iterator().enumerate() {
            for (col, &v) in vec.iter() {
                // Upper block: -1/2 D_l C^T D_l'; lower block: -1/2 D_l' C D_l.
                r.add_triplet(col, ne + row, -0.5 * v);
                r.add_triplet(ne + row, col, -0.5 * v);
                f.add_triplet(col, ne + row, -0.5 * v);
                f.add_triplet(ne + row, col, 0.5 * v);
            }
        }
        let inputs: Vec<HangingEntry> = grid
            .hanging_entries()
            .iter()
            .filter(|h| {
                idx.e_index[h.component.index()][h.sample].is_some()
                    && match h.slot.kind {
                        SlotKind::Hole => true,
                        SlotKind::Outer => matches!(
                            grid.face_bc(h.slot.outer_face().unwrap()),
                            FaceBc::Open | FaceBc::Interface
                        ),
                    }
            })
            .copied()
            .collect();
        let nu = inputs.len();
        let sp = grid.layout.spec.spacing;
        let mut b = TriMat::new((n, nu));
        let mut lt = TriMat::new((nu, n));
        let mut s = Vec::with_capacity(nu);
        for (k, h) in inputs.iter().enumerate() {
            let col = idx.e_index[h.component.index()][h.sample].unwrap();
            let l = sp[h.component.index()];
            b.add_triplet(col, k, l * h.slot.sign * h.slot.length);
            lt.add_triplet(k, col, 1.0);
            s.push(l * h.slot.length * h.slot.sign);
        }
        Ok(SystemMatrices {
            index: idx,
            diag,
            inputs,
            dt,
            weighted_curl: wc,
            r: r.to_csr(),
            f: f.to_csr(),
            b: b.to_csr(),
            lt: lt.to_csr(),
            s,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    /// Solve `(R + F) x^{n+1} = (R - F) x^n + B u` using the block
    /// triangular structure of `R + F`.
    pub fn apply_matrix_recursion(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "state vector",
                expected: n,
                found: x.len(),
            });
        }
        if u.len() != self.input_count() {
            return Err(Error::DimensionMismatch {
                what: "hanging input",
                expected: self.input_count(),
                found: u.len(),
            });
        }
        let ne = self.index.ne();
        let dt = self.dt;
        let d = &self.diag;
        let (e, h) = x.split_at(ne);
        let mut out = vec![0.0; n];
        let ce = spmv(&self.weighted_curl, e);
        for k in 0..self.index.nh() {
            let m = d.l_dual[k] * d.a[k] * d.mu[k] / dt;
            out[ne + k] = (m * h[k] - ce[k]) / m;
        }
        let cth = spmv(&self.weighted_curl.transpose_view().to_owned(), &out[ne..]);
        let bu = spmv(&self.b, u);
        for k in 0..ne {
            let base = d.l[k] * d.a_dual[k];
            let p = base * (d.eps[k] / dt + 0.5 * d.sigma[k]);
            let m = base * (d.eps[k] / dt - 0.5 * d.sigma[k]);
            out[k] = (m * e[k] + cth[k] + bu[k]) / p;
        }
        Ok(out)
    }

    /// Quadratic form `(Δt/2) x^T R x`.
    pub fn storage(&self, x: &[f64]) -> f64 {
        let rx = spmv(&self.r, x);
        0.5 * self.dt * x.iter().zip(rx.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Supply `Δt ((y^n + y^{n+1})/2)^T S u`.
    pub fn supply(&self, y0: &[f64], y1: &[f64], u: &[f64]) -> f64 {
        self.dt
            * y0.iter()
                .zip(y1)
                .zip(u.iter().zip(&self.s))
                .map(|((a, b), (u, s))| 0.5 * (a + b) * s * u)
                .sum::<f64>()
    }

    pub fn trace(&self, x: &[f64]) -> Vec<f64> {
        spmv(&self.lt, x)
    }

    /// Scaled curl `D_l^{1/2} D_ε^{-1/2} D_A'^{-1/2} C^T D_l'^{1/2} D_μ^{-1/2} D_A^{-1/2}`
    /// whose largest singular value bounds the stable time step.
    pub fn scaled_curl(&self) -> CsMat<f64> {
        let d = &self.diag;
        let ne = self.index.ne();
        let nh = self.index.nh();
        let mut t = TriMat::new((ne, nh));
        for (row, vec) in self.weighted_curl.outer_iterator().enumerate() {
            for (col, &v) in vec.iter() {
                // v = l'_h C_he l_e
                let c = v / (d.l_dual[row] * d.l[col]);
                let se = (d.l[col] / (d.eps[col] * d.a_dual[col])).sqrt();
                let sh = (d.l_dual[row] / (d.mu[row] * d.a[row])).sqrt();
                t.add_triplet(col, row, se * c * sh);
            }
        }
        t.to_csr()
    }
}

/// Sparse matrix times dense vector.
pub fn spmv(m: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    if m.is_csr() {
        for (r, row) in m.outer_iterator().enumerate() {
            out[r] = row.iter().map(|(c, v)| v * x[c]).sum();
        }
    } else {
        for (c, col) in m.outer_iterator().enumerate() {
            for (r, v) in col.iter() {
                out[r] += v * x[c];
            }
        }
    }
    out
}

/// All nonzero entries of a sparse matrix as `(row, col, value)`.
pub fn to_triplets(m: &CsMat<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(m.nnz());
    for (v, (r, c)) in m.iter() {
        out.push((r, c, *v));
    }
    out
}

/// Write a sparse matrix as CSV triplets.
pub fn write_triplets(path: &Path, m: &CsMat<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "row,col,value")?;
    for (r, c, v) in to_triplets(m) {
        writeln!(f, "{r},{c},{v:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assign_random_materials, Layout, Range, RegionSpec};
    use crate::{EPS0, MU0};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn open_grid(n: [usize; 3], seed: u64) -> YeeGrid {
        let spec = RegionSpec::new(n, [0.01, 0.008, 0.012]).unwrap();
        let layout = Layout::new(spec);
        let m = assign_random_materials(
            &layout,
            Range::new(EPS0, 3.0 * EPS0),
            Range::new(0.0, 0.05),
            MU0,
            seed,
        )
        .unwrap();
        YeeGrid::new(layout, m, [FaceBc::Open; 6], 1.5e-11).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matrix_recursion_matches_kernel_step() {
        let g = open_grid([3, 2, 4], 5);
        let sys = SystemMatrices::assemble(&g).unwrap();
        assert_eq!(sys.input_count(), g.open_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_vec(sys.len(), &mut rng);
        let u = rand_vec(sys.input_count(), &mut rng);
        let x1 = sys.apply_matrix_recursion(&x0, &u).unwrap();
        let mut st = FieldState::zeros(&g.layout);
        sys.index.scatter(&x0, &mut st);
        g.step(&mut st, Some(&u)).unwrap();
        let k1 = sys.index.gather(&st);
        for (a, b) in x1.iter().zip(&k1) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn recursion_satisfies_matrix_equation() {
        // Independent check: multiply back with the assembled R and F.
        let g = open_grid([2, 2, 2], 6);
        let sys = SystemMatrices::assemble(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_vec(sys.len(), &mut rng);
        let u = rand_vec(sys.input_count(), &mut rng);
        let x1 = sys.apply_matrix_recursion(&x0, &u).unwrap();
        let rpf = &sys.r + &sys.f;
        let rmf = &sys.r - &sys.f;
        let lhs = spmv(&rpf, &x1);
        let rhs: Vec<f64> = spmv(&rmf, &x0)
            .iter()
            .zip(spmv(&sys.b, &u))
            .map(|(a, b)| a + b)
            .collect();
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn r_is_symmetric_and_ls_equals_b() {
        let g = open_grid([2, 3, 2], 7);
        let sys = SystemMatrices::assemble(&g).unwrap();
        let rt = sys.r.transpose_view().to_csr();
        assert_eq!(to_triplets(&sys.r), to_triplets(&rt));
        let l = sys.lt.transpose_view().to_csr();
        let mut t = TriMat::new((sys.input_count(), sys.input_count()));
        for (i, &s) in sys.s.iter().enumerate() {
            t.add_triplet(i, i, s);
        }
        let s: CsMat<f64> = t.to_csr();
        let ls: CsMat<f64> = &l * &s;
        assert_eq!(to_triplets(&ls), to_triplets(&sys.b));
    }

    #[test]
    fn single_cell_counts() {
        let g = open_grid([1, 1, 1], 1);
        let sys = SystemMatrices::assemble(&g).unwrap();
        assert_eq!(sys.index.ne(), 12);
        assert_eq!(sys.index.nh(), 6);
        assert_eq!(sys.input_count(), 24);
        let c = curl_operator(&g, &sys.index);
        // Each face has four edges.
        assert_eq!(c.nnz(), 24);
    }
}
