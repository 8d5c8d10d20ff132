//! Coarse/fine coupling through lossless interface patches.
//!
//! Every coarse E sample on the subgrid surface owns a patch: the fine E
//! samples it covers, grouped into columns that share one value along the
//! coarse edge direction, plus one hanging variable per interface face the
//! sample touches. Each patch is closed by three rule sets:
//!
//! - fine E samples in a column are equal;
//! - the coarse E sample is the length-weighted mean of the fine columns;
//! - fine hanging variables average to the coarse hanging variable.
//!
//! With these rules the power leaving the coarse grid through a patch equals
//! the power entering the fine grid, so the coupling neither creates nor
//! destroys energy. The patch unknowns at n+1 follow from a small dense
//! system whose inverse is computed once.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::kernels::{FaceBc, FieldState, SampleRole, YeeGrid};
use crate::mesh::{
    Axis, CellMaterials, CellState, Face, Layout, MaterialGrid, RegionSpec, SlotKind,
    SubgridPlacement,
};

/// One interface face touched by a coarse patch sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSlot {
    pub normal: Axis,
    /// Contour sign of the coarse hanging variable.
    pub sign: f64,
    /// Dual-edge length of the coarse hanging variable.
    pub length: f64,
}

/// Membership of a fine column in one patch slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupSlot {
    pub slot: usize,
    /// Fine hanging-variable length.
    pub length: f64,
    /// Fine contour sign (opposite of the coarse one).
    pub sign: f64,
}

/// A column of fine E samples that share one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    /// Fine linear indices, ordered along the coarse edge direction.
    pub members: Vec<usize>,
    /// Sum of `A'(ε/Δt + σ/2)` over members.
    pub a_plus: f64,
    /// Sum of `A'(ε/Δt - σ/2)` over members.
    pub a_minus: f64,
    pub slots: SmallVec<[GroupSlot; 2]>,
}

/// Planar-face patch solved in reduced form.
///
/// With `w_g = l̂'_g / l'_c` and `κ_g = r_a l̂'_g / l'_c`, the fine column
/// values obey `K g^{n+1} = rhs_g + κ_g rhs_c` with
/// `K = diag(a_g^+) + a_c^+ κ w^T`; the coarse value is `w^T g^{n+1}`.
#[derive(Clone, Debug)]
pub struct InterfaceFaceSystem {
    pub lhs: DMatrix<f64>,
    pub lhs_inv: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub coupling: DVector<f64>,
    /// Permittivity mix `(d_c + d_f)^{-1}(d_c ε_c (1/r_t) 1 + d_f D̂_ε)`.
    pub m_eps: DMatrix<f64>,
    /// Conductivity mix, same structure as `m_eps`.
    pub m_sigma: DMatrix<f64>,
    /// Fine edge length `l̂'` times the combined normal depth `d_c + d_f`.
    pub prefactor: f64,
    /// Number of fine samples per column.
    pub r_a: usize,
}

impl InterfaceFaceSystem {
    /// Left-hand matrix in per-fine-sample normalization:
    /// `l̂' (d_c + d_f)(M_ε/Δt + M_σ/2)`.
    pub fn normalized_lhs(&self, dt: f64) -> DMatrix<f64> {
        (&self.m_eps / dt + &self.m_sigma * 0.5) * self.prefactor
    }
}

/// Patch solved as the full constrained system `A z = b`.
///
/// Unknowns: coarse E (absent when clamped), one value per fine column, one
/// hanging variable per slot. Rows: coarse update, fine column updates
/// summed over members, and one mean-value constraint per slot.
#[derive(Clone, Debug)]
pub struct InterfaceEdgeSystem {
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub enum PatchSolver {
    Face(InterfaceFaceSystem),
    General(InterfaceEdgeSystem),
}

/// Interface patch of one coarse E sample.
#[derive(Clone, Debug)]
pub struct Patch {
    pub component: Axis,
    pub coarse_sample: usize,
    /// Coarse sample lies on a PEC wall and is held at zero.
    pub clamped: bool,
    pub a_plus: f64,
    pub a_minus: f64,
    pub slots: SmallVec<[PatchSlot; 2]>,
    pub groups: Vec<Group>,
    pub r_a: usize,
    pub solver: PatchSolver,
}

impl Patch {
    fn coarse_offset(&self) -> usize {
        usize::from(!self.clamped)
    }

    /// Dimension of the constrained system.
    pub fn dimension(&self) -> usize {
        self.coarse_offset() + self.groups.len() + self.slots.len()
    }

    /// Assemble the constrained system matrix.
    pub fn assemble(&self) -> DMatrix<f64> {
        let off = self.coarse_offset();
        let ng = self.groups.len();
        let n = self.dimension();
        let u0 = off + ng;
        let cons0 = off + ng;
        let mut a = DMatrix::zeros(n, n);
        if !self.clamped {
            a[(0, 0)] = self.a_plus;
            for (f, s) in self.slots.iter().enumerate() {
                a[(0, u0 + f)] = -s.sign * s.length;
                a[(cons0 + f, 0)] = s.length;
            }
        }
        for (k, g) in self.groups.iter().enumerate() {
            let row = off + k;
            a[(row, row)] = g.a_plus;
            for gs in &g.slots {
                a[(row, u0 + gs.slot)] = -gs.sign * gs.length * self.r_a as f64;
                a[(cons0 + gs.slot, off + k)] = -gs.length;
            }
        }
        a
    }

    fn build_face_system(
        &self,
        coarse_depth: f64,
        fine_depth: f64,
        coarse_eps_sigma: (f64, f64),
        fine_mean: &[(f64, f64)],
    ) -> InterfaceFaceSystem {
        let s = self.slots[0];
        let m = self.groups.len();
        let w = DVector::from_iterator(m, self.groups.iter().map(|g| g.slots[0].length / s.length));
        let kappa = &w * self.r_a as f64;
        let mut lhs = &kappa * w.transpose() * self.a_plus;
        for (k, g) in self.groups.iter().enumerate() {
            lhs[(k, k)] += g.a_plus;
        }
        let lhs_inv = lhs
            .clone()
            .try_inverse()
            .expect("face system is positive definite");
        let dsum = coarse_depth + fine_depth;
        let ones = DMatrix::from_element(m, m, 1.0 / m as f64);
        let (ec, sc) = coarse_eps_sigma;
        let de = DMatrix::from_diagonal(&DVector::from_iterator(m, fine_mean.iter().map(|x| x.0)));
        let ds = DMatrix::from_diagonal(&DVector::from_iterator(m, fine_mean.iter().map(|x| x.1)));
        let m_eps = (&ones * (coarse_depth * ec) + de * fine_depth) / dsum;
        let m_sigma = (&ones * (coarse_depth * sc) + ds * fine_depth) / dsum;
        InterfaceFaceSystem {
            lhs,
            lhs_inv,
            weights: w,
            coupling: kappa,
            m_eps,
            m_sigma,
            prefactor: self.groups[0].slots[0].length * dsum,
            r_a: self.r_a,
        }
    }

    /// Right-hand side of the constrained system.
    fn rhs(
        &self,
        coarse: &YeeGrid,
        fine: &YeeGrid,
        c: &FieldState,
        f: &FieldState,
    ) -> DVector<f64> {
        let off = self.coarse_offset();
        let ai = self.component.index();
        let mut b = DVector::zeros(self.dimension());
        if !self.clamped {
            b[0] = self.a_minus * c.e[ai][self.coarse_sample]
                + coarse.circulation(c, self.component, self.coarse_sample);
        }
        for (k, g) in self.groups.iter().enumerate() {
            let circ: f64 = g
                .members
                .iter()
                .map(|&m| fine.circulation(f, self.component, m))
                .sum();
            b[off + k] = g.a_minus * f.e[ai][g.members[0]] + circ;
        }
        b
    }

    /// Solve the patch for step n+1 and write coarse and fine E.
    pub fn update(&self, coarse: &YeeGrid, fine: &YeeGrid, c: &mut FieldState, f: &mut FieldState) {
        let ai = self.component.index();
        let b = self.rhs(coarse, fine, c, f);
        let off = self.coarse_offset();
        match &self.solver {
            PatchSolver::Face(fs) => {
                let ng = self.groups.len();
                let rhs = b.rows(off, ng) + &fs.coupling * b[0];
                let g = &fs.lhs_inv * rhs;
                c.e[ai][self.coarse_sample] = fs.weights.dot(&g);
                for (k, grp) in self.groups.iter().enumerate() {
                    for &m in &grp.members {
                        f.e[ai][m] = g[k];
                    }
                }
            }
            PatchSolver::General(es) => {
                let z = &es.a_inv * b;
                if !self.clamped {
                    c.e[ai][self.coarse_sample] = z[0];
                }
                for (k, grp) in self.groups.iter().enumerate() {
                    for &m in &grp.members {
                        f.e[ai][m] = z[off + k];
                    }
                }
            }
        }
    }

    /// Solve with the full constrained system regardless of the stored
    /// solver; returns `z`.
    pub fn solve_general(
        &self,
        coarse: &YeeGrid,
        fine: &YeeGrid,
        c: &FieldState,
        f: &FieldState,
    ) -> Result<DVector<f64>> {
        let b = self.rhs(coarse, fine, c, f);
        self.assemble()
            .full_piv_lu()
            .solve(&b)
            .ok_or_else(|| Error::SingularSystem("interface patch".into()))
    }

    /// Net energy entering the coarse and fine grids through this patch
    /// during one step, and the magnitude of the largest single term.
    pub fn supply_rate(
        &self,
        v: &PatchValues,
        dt: f64,
        coarse_len: f64,
        fine_len: f64,
    ) -> (f64, f64) {
        let ec = 0.5 * (v.coarse_e[0] + v.coarse_e[1]);
        let mut net = 0.0;
        let mut mag: f64 = 0.0;
        for (fi, s) in self.slots.iter().enumerate() {
            let t = dt * ec * coarse_len * s.sign * s.length * v.coarse_u[fi];
            net += t;
            mag = mag.max(t.abs());
        }
        for (k, g) in self.groups.iter().enumerate() {
            for (row, _) in g.members.iter().enumerate() {
                let e = 0.5 * (v.fine_e[k][row][0] + v.fine_e[k][row][1]);
                for gs in &g.slots {
                    let t = dt * e * fine_len * gs.sign * gs.length * v.fine_u[gs.slot][row];
                    net += t;
                    mag = mag.max(t.abs());
                }
            }
        }
        (net, mag)
    }

    /// Shift the columns owned by a single slot so that every slot from
    /// `first` on satisfies `l'_c E_c = Σ l̂' g`.
    pub fn project_groups(&self, ec: f64, g: &mut [f64], first: usize) {
        for (fi, s) in self.slots.iter().enumerate().skip(first) {
            let mut sum = 0.0;
            let mut own_len = 0.0;
            for (k, gr) in self.groups.iter().enumerate() {
                if let Some(x) = gr.slots.iter().find(|x| x.slot == fi) {
                    sum += x.length * g[k];
                    if gr.slots.len() == 1 {
                        own_len += x.length;
                    }
                }
            }
            if own_len > 0.0 {
                let delta = (s.length * ec - sum) / own_len;
                for (k, gr) in self.groups.iter().enumerate() {
                    if gr.slots.len() == 1 && gr.slots[0].slot == fi {
                        g[k] += delta;
                    }
                }
            }
        }
    }

    /// Random boundary values satisfying all interpolation rules.
    pub fn random_values<R: Rng>(&self, rng: &mut R) -> PatchValues {
        let mut v = PatchValues {
            coarse_e: [0.0; 2],
            coarse_u: vec![0.0; self.slots.len()],
            fine_e: vec![vec![[0.0; 2]; self.r_a]; self.groups.len()],
            fine_u: vec![vec![0.0; self.r_a]; self.slots.len()],
        };
        for t in 0..2 {
            let ec = if self.clamped {
                0.0
            } else {
                rng.gen_range(-1.0..1.0)
            };
            v.coarse_e[t] = ec;
            let mut g: Vec<f64> = (0..self.groups.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            self.project_groups(ec, &mut g, 0);
            for (k, gv) in g.iter().enumerate() {
                for row in 0..self.r_a {
                    v.fine_e[k][row][t] = *gv;
                }
            }
        }
        for fi in 0..self.slots.len() {
            let u = rng.gen_range(-1.0..1.0);
            v.coarse_u[fi] = u;
            let mut rows: Vec<f64> = (0..self.r_a).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = rows.iter().sum::<f64>() / self.r_a as f64;
            rows.iter_mut().for_each(|x| *x += u - mean);
            v.fine_u[fi] = rows;
        }
        v
    }
}

/// Boundary values of one patch over one step.
///
/// `fine_e[group][row] = [E^n, E^{n+1}]`; `fine_u[slot][row]` is the fine
/// hanging variable shared by all columns of the slot at that row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchValues {
    pub coarse_e: [f64; 2],
    pub coarse_u: Vec<f64>,
    pub fine_e: Vec<Vec<[f64; 2]>>,
    pub fine_u: Vec<Vec<f64>>,
}

/// Coarse and fine grids coupled by interface patches.
#[derive(Clone, Debug)]
pub struct Composite {
    pub coarse: YeeGrid,
    pub fine: YeeGrid,
    pub placement: SubgridPlacement,
    pub patches: Vec<Patch>,
}

/// Face conditions of the fine grid: flush faces inherit the coarse wall,
/// the rest couple to the coarse grid.
pub fn fine_faces(
    coarse: &RegionSpec,
    placement: &SubgridPlacement,
    faces: [FaceBc; 6],
) -> [FaceBc; 6] {
    let hole = placement.hole();
    let mut out = [FaceBc::Interface; 6];
    for f in Face::ALL {
        let d = f.axis.index();
        let flush = if f.positive {
            hole.hi[d] == coarse.cells[d]
        } else {
            hole.lo[d] == 0
        };
        if flush {
            out[f.index()] = faces[f.index()];
        }
    }
    out
}

impl Composite {
    /// Build both grids and all interface patches.
    pub fn new(
        coarse_spec: RegionSpec,
        placement: SubgridPlacement,
        coarse_cells: &CellMaterials,
        fine_cells: &CellMaterials,
        faces: [FaceBc; 6],
        dt: f64,
    ) -> Result<Self> {
        if faces
            .iter()
            .any(|f| matches!(f, FaceBc::Open | FaceBc::Interface))
        {
            return Err(Error::InvalidRegion(
                "outer faces of a composite must be PEC or PMC".into(),
            ));
        }
        let hole = placement.hole();
        let clayout = Layout::with_hole(coarse_spec, hole)?;
        let fspec = placement.fine_spec(&coarse_spec)?;
        let flayout = Layout::new(fspec);
        let ffaces = fine_faces(&coarse_spec, &placement, faces);
        if ffaces.iter().all(|f| *f != FaceBc::Interface) {
            return Err(Error::InvalidRegion(
                "subgrid fills the whole domain".into(),
            ));
        }
        let cm = MaterialGrid::from_cells(&clayout, coarse_cells)?;
        let fm = MaterialGrid::from_cells(&flayout, fine_cells)?;
        let coarse = YeeGrid::new(clayout, cm, faces, dt)?;
        let fine = YeeGrid::new(flayout, fm, ffaces, dt)?;
        let patches = build_patches(&coarse, &fine, &placement)?;
        Ok(Composite {
            coarse,
            fine,
            placement,
            patches,
        })
    }

    pub fn zero_states(&self) -> (FieldState, FieldState) {
        (
            FieldState::zeros(&self.coarse.layout),
            FieldState::zeros(&self.fine.layout),
        )
    }

    pub fn set_parallel(&mut self, on: bool) {
        self.coarse.parallel = on;
        self.fine.parallel = on;
    }

    /// Solve every interface patch; call after the regular E updates.
    pub fn update_interface(&self, c: &mut FieldState, f: &mut FieldState) {
        for p in &self.patches {
            p.update(&self.coarse, &self.fine, c, f);
        }
    }

    /// One full step of the coupled system without sources.
    pub fn step(&self, c: &mut FieldState, f: &mut FieldState) {
        self.coarse.step_h(c);
        self.fine.step_h(f);
        self.coarse.step_e(c);
        self.fine.step_e(f);
        self.update_interface(c, f);
    }

    /// Total stored energy of both grids.
    pub fn storage(&self, c: &FieldState, f: &FieldState) -> f64 {
        crate::dissipation::storage_explicit(&self.coarse, c)
            + crate::dissipation::storage_explicit(&self.fine, f)
    }

    /// Independent degrees of freedom of the coupled state.
    pub fn dofs(&self) -> CompositeDofs {
        CompositeDofs::new(self)
    }
}

/// Where a reduced degree of freedom lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dof {
    CoarseE(Axis, usize),
    CoarseH(Axis, usize),
    FineE(Axis, usize),
    FineH(Axis, usize),
    /// One fine column of a patch: `(patch, group)`.
    Group(usize, usize),
}

/// Reduced coordinates of the coupled state: free samples of both grids plus
/// one value per fine column. Coarse patch samples follow from their
/// constraints and are not independent; `scatter` projects onto the
/// constraint set, so redundant column values map to zero eigenvalues.
#[derive(Clone, Debug)]
pub struct CompositeDofs {
    pub list: Vec<Dof>,
}

impl CompositeDofs {
    fn new(cmp: &Composite) -> Self {
        let mut list = Vec::new();
        for (grid, is_coarse) in [(&cmp.coarse, true), (&cmp.fine, false)] {
            for a in Axis::ALL {
                for (l, r) in grid.e_role(a).iter().enumerate() {
                    if *r == SampleRole::Regular {
                        list.push(if is_coarse {
                            Dof::CoarseE(a, l)
                        } else {
                            Dof::FineE(a, l)
                        });
                    }
                }
            }
            for a in Axis::ALL {
                for (l, len) in grid.h_length(a).iter().enumerate() {
                    if *len > 0.0 {
                        list.push(if is_coarse {
                            Dof::CoarseH(a, l)
                        } else {
                            Dof::FineH(a, l)
                        });
                    }
                }
            }
        }
        for (pi, p) in cmp.patches.iter().enumerate() {
            for gi in 0..p.groups.len() {
                list.push(Dof::Group(pi, gi));
            }
        }
        CompositeDofs { list }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn scatter(&self, cmp: &Composite, z: &[f64]) -> (FieldState, FieldState) {
        let (mut c, mut f) = cmp.zero_states();
        for (k, d) in self.list.iter().enumerate() {
            match *d {
                Dof::CoarseE(a, l) => c.e[a.index()][l] = z[k],
                Dof::CoarseH(a, l) => c.h[a.index()][l] = z[k],
                Dof::FineE(a, l) => f.e[a.index()][l] = z[k],
                Dof::FineH(a, l) => f.h[a.index()][l] = z[k],
                Dof::Group(pi, gi) => {
                    let p = &cmp.patches[pi];
                    for &m in &p.groups[gi].members {
                        f.e[p.component.index()][m] = z[k];
                    }
                }
            }
        }
        // Coarse patch samples follow from the first slot; remaining
        // constraints are met by shifting columns owned by one slot.
        for p in &cmp.patches {
            let ai = p.component.index();
            let mut g: Vec<f64> = p.groups.iter().map(|gr| f.e[ai][gr.members[0]]).collect();
            let ec = if p.clamped {
                0.0
            } else {
                let sum: f64 = p
                    .groups
                    .iter()
                    .zip(&g)
                    .filter_map(|(gr, v)| {
                        gr.slots.iter().find(|x| x.slot == 0).map(|x| x.length * v)
                    })
                    .sum();
                sum / p.slots[0].length
            };
            p.project_groups(ec, &mut g, usize::from(!p.clamped));
            if !p.clamped {
                c.e[ai][p.coarse_sample] = ec;
            }
            for (gr, v) in p.groups.iter().zip(&g) {
                for &m in &gr.members {
                    f.e[ai][m] = *v;
                }
            }
        }
        (c, f)
    }

    pub fn gather(&self, cmp: &Composite, c: &FieldState, f: &FieldState) -> Vec<f64> {
        self.list
            .iter()
            .map(|d| match *d {
                Dof::CoarseE(a, l) => c.e[a.index()][l],
                Dof::CoarseH(a, l) => c.h[a.index()][l],
                Dof::FineE(a, l) => f.e[a.index()][l],
                Dof::FineH(a, l) => f.h[a.index()][l],
                Dof::Group(pi, gi) => {
                    let p = &cmp.patches[pi];
                    f.e[p.component.index()][p.groups[gi].members[0]]
                }
            })
            .collect()
    }

    /// One coupled step in reduced coordinates.
    pub fn step(&self, cmp: &Composite, z: &[f64]) -> Vec<f64> {
        let (mut c, mut f) = self.scatter(cmp, z);
        cmp.step(&mut c, &mut f);
        self.gather(cmp, &c, &f)
    }
}

/// Quadrant depth of a sample normal to a face: half a cell.
fn half_depth(spec: &RegionSpec, normal: Axis) -> f64 {
    0.5 * spec.spacing[normal.index()]
}

fn build_patches(coarse: &YeeGrid, fine: &YeeGrid, pl: &SubgridPlacement) -> Result<Vec<Patch>> {
    let cl = &coarse.layout;
    let hole = pl.hole();
    let r = pl.ratio;
    let mut patches = Vec::new();
    let mut covered: [Vec<bool>; 3] = Axis::ALL.map(|a| vec![false; fine.e_dims(a).len()]);
    for a in Axis::ALL {
        let ai = a.index();
        let cd = coarse.e_dims(a);
        let fd = fine.e_dims(a);
        for l in 0..cd.len() {
            let role = coarse.e_role(a)[l];
            if role == SampleRole::Inactive {
                continue;
            }
            let p = cd.coords(l);
            let geo = cl.e_geometry(a, p);
            let hole_slots: Vec<_> = geo
                .slots
                .iter()
                .filter(|s| s.kind == SlotKind::Hole)
                .copied()
                .collect();
            if hole_slots.is_empty() {
                continue;
            }
            let clamped = role == SampleRole::Clamped;
            let mut slots: SmallVec<[PatchSlot; 2]> = SmallVec::new();
            let mut groups: Vec<Group> = Vec::new();
            let mut keys: Vec<[usize; 3]> = Vec::new();
            for hs in &hole_slots {
                let n = hs.normal;
                let t = a.third(n);
                let (ni, ti) = (n.index(), t.index());
                let fi = slots.len();
                slots.push(PatchSlot {
                    normal: n,
                    sign: hs.sign,
                    length: hs.length,
                });
                let plane = (p[ni] - hole.lo[ni]) * r[ni];
                let center = (p[ti] - hole.lo[ti]) * r[ti];
                let half = (r[ti] - 1) / 2;
                // Which halves along t border the hole.
                let mut sides = [false; 2];
                for (side, flag) in sides.iter_mut().enumerate() {
                    let mut act = [0isize; 3];
                    act[ai] = p[ai] as isize;
                    act[ti] = p[ti] as isize - 1 + side as isize;
                    let mut ina = act;
                    if hs.active_positive {
                        act[ni] = p[ni] as isize;
                        ina[ni] = p[ni] as isize - 1;
                    } else {
                        act[ni] = p[ni] as isize - 1;
                        ina[ni] = p[ni] as isize;
                    }
                    *flag = cl.cell_state(act) == CellState::Active
                        && cl.cell_state(ina) == CellState::Hole;
                }
                let mut tnodes = vec![center];
                if sides[0] {
                    tnodes.extend((1..=half).map(|k| center - k));
                }
                if sides[1] {
                    tnodes.extend((1..=half).map(|k| center + k));
                }
                tnodes.sort_unstable();
                for tn in tnodes {
                    let mut key = [0usize; 3];
                    key[ni] = plane;
                    key[ti] = tn;
                    let a0 = (p[ai] - hole.lo[ai]) * r[ai];
                    let members: Vec<usize> = (0..r[ai])
                        .map(|k| {
                            let mut q = key;
                            q[ai] = a0 + k;
                            fd.index(q)
                        })
                        .collect();
                    let frole = fine.e_role(a)[members[0]];
                    if frole == SampleRole::Clamped {
                        continue;
                    }
                    if frole != SampleRole::Interface {
                        return Err(Error::InvalidRegion(format!(
                            "fine sample {:?} under a coarse patch is not an interface sample",
                            fd.coords(members[0])
                        )));
                    }
                    let fgeo = fine.layout.e_geometry(a, fd.coords(members[0]));
                    let fslot = fgeo
                        .slots
                        .iter()
                        .find(|s| {
                            s.normal == n
                                && s.active_positive != hs.active_positive
                                && s.kind == SlotKind::Outer
                        })
                        .ok_or_else(|| {
                            Error::InvalidRegion("fine interface slot missing".into())
                        })?;
                    if fslot.sign != -hs.sign {
                        return Err(Error::InvalidRegion(
                            "fine/coarse slot orientation mismatch".into(),
                        ));
                    }
                    let gs = GroupSlot {
                        slot: fi,
                        length: fslot.length,
                        sign: fslot.sign,
                    };
                    let mut kk = key;
                    kk[ai] = a0;
                    if let Some(pos) = keys.iter().position(|k| *k == kk) {
                        groups[pos].slots.push(gs);
                    } else {
                        let (mut ap, mut am) = (0.0, 0.0);
                        for &m in &members {
                            let (x, y) = fine.e_weights(a, m);
                            ap += x;
                            am += y;
                        }
                        for &m in &members {
                            covered[ai][m] = true;
                        }
                        keys.push(kk);
                        groups.push(Group {
                            members,
                            a_plus: ap,
                            a_minus: am,
                            slots: SmallVec::from_slice(&[gs]),
                        });
                    }
                }
            }
            let (ap, am) = if clamped {
                (0.0, 0.0)
            } else {
                coarse.e_weights(a, l)
            };
            let mut patch = Patch {
                component: a,
                coarse_sample: l,
                clamped,
                a_plus: ap,
                a_minus: am,
                slots,
                groups,
                r_a: r[ai],
                solver: PatchSolver::General(InterfaceEdgeSystem {
                    a: DMatrix::zeros(0, 0),
                    a_inv: DMatrix::zeros(0, 0),
                }),
            };
            let full_face = !clamped
                && patch.slots.len() == 1
                && patch.groups.len() == r[a.third(patch.slots[0].normal).index()]
                && patch.groups.iter().all(|g| {
                    g.slots.len() == 1 && g.slots[0].length == patch.groups[0].slots[0].length
                });
            if full_face {
                let n = patch.slots[0].normal;
                let ci = coarse.materials.eps[ai][l];
                let cs = coarse.materials.sigma[ai][l];
                let fine_mean: Vec<(f64, f64)> = patch
                    .groups
                    .iter()
                    .map(|g| {
                        let k = g.members.len() as f64;
                        (
                            g.members
                                .iter()
                                .map(|&m| fine.materials.eps[ai][m])
                                .sum::<f64>()
                                / k,
                            g.members
                                .iter()
                                .map(|&m| fine.materials.sigma[ai][m])
                                .sum::<f64>()
                                / k,
                        )
                    })
                    .collect();
                let fs = patch.build_face_system(
                    half_depth(&coarse.layout.spec, n),
                    half_depth(&fine.layout.spec, n),
                    (ci, cs),
                    &fine_mean,
                );
                patch.solver = PatchSolver::Face(fs);
            } else {
                let a_mat = patch.assemble();
                let a_inv = a_mat
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::SingularSystem(format!("interface patch at {:?}", p)))?;
                patch.solver = PatchSolver::General(InterfaceEdgeSystem { a: a_mat, a_inv });
            }
            patches.push(patch);
        }
    }
    for a in Axis::ALL {
        for (l, role) in fine.e_role(a).iter().enumerate() {
            if *role == SampleRole::Interface && !covered[a.index()][l] {
                return Err(Error::InvalidRegion(format!(
                    "fine interface sample {:?} is not covered by any patch",
                    fine.e_dims(a).coords(l)
                )));
            }
        }
    }
    Ok(patches)
}

/// Replicate the first row of a fine face patch along the coarse edge
/// direction. `e` is stored row by row with `r_t` values per row.
pub fn apply_face_constraints(e: &mut [f64], r_t: usize) {
    let (first, rest) = e.split_at_mut(r_t);
    for row in rest.chunks_mut(r_t) {
        row.copy_from_slice(first);
    }
}

/// Make fine hanging variables equal across each row of a face patch.
pub fn apply_face_u_constraints(u: &mut [f64], r_t: usize) {
    for row in u.chunks_mut(r_t) {
        let v = row[0];
        row.iter_mut().for_each(|x| *x = v);
    }
}

/// Coarse E of a full face patch: the mean of the distinct fine values.
pub fn coarse_from_fine_e(fine: &[f64]) -> f64 {
    fine.iter().sum::<f64>() / fine.len() as f64
}

/// Coarse E of an edge patch from the corner column and the columns along
/// one half face: `Ê_c / r + (2/r) Σ Ê_half`.
pub fn edge_coarse_from_fine(corner: f64, half: &[f64], r: usize) -> f64 {
    let r = r as f64;
    corner / r + 2.0 / r * half.iter().sum::<f64>()
}

/// Fine hanging variables of one column: `r_a` copies of the coarse value.
pub fn fine_from_coarse_u(u: f64, r_a: usize) -> Vec<f64> {
    vec![u; r_a]
}

/// Coarse hanging variable from the fine values of one column: their mean.
pub fn coarse_from_fine_u(fine: &[f64]) -> f64 {
    coarse_from_fine_e(fine)
}

/// Fine fields of an edge patch: `e` rows hold `[corner, first half face,
/// second half face]`, `u_first`/`u_second` rows hold `[corner, half face]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePatch {
    pub r_a: usize,
    pub e: Vec<Vec<f64>>,
    pub u_first: Vec<Vec<f64>>,
    pub u_second: Vec<Vec<f64>>,
}

/// Replicate E along the edge direction and equalize each family of fine
/// hanging variables across its half face.
pub fn apply_edge_constraints(p: &mut EdgePatch) {
    let first = p.e[0].clone();
    for row in p.e.iter_mut().skip(1) {
        row.copy_from_slice(&first);
    }
    for fam in [&mut p.u_first, &mut p.u_second] {
        for row in fam.iter_mut() {
            let v = row[0];
            row.iter_mut().for_each(|x| *x = v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipation::{classical_cfl, iteration_matrix_from_map, spectral_radius};
    use crate::mesh::{random_cell_materials, Range};
    use crate::{EPS0, MU0};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn composite(
        cells: [usize; 3],
        origin: [usize; 3],
        extent: [usize; 3],
        r: [usize; 3],
        sigma: f64,
        faces: [FaceBc; 6],
        seed: u64,
    ) -> Composite {
        let d = [0.01, 0.012, 0.009];
        let spec = RegionSpec::new(cells, d).unwrap();
        let pl = SubgridPlacement::new(origin, extent, r).unwrap();
        let fspec = pl.fine_spec(&spec).unwrap();
        let eps = Range::new(EPS0, 3.0 * EPS0);
        let sig = Range::new(0.0, sigma);
        let cc = random_cell_materials(cells, eps, sig, MU0, seed, 0).unwrap();
        let fc = random_cell_materials(fspec.cells, eps, sig, MU0, seed, 1).unwrap();
        let dt = 0.99 * classical_cfl(fspec.spacing, EPS0, MU0);
        Composite::new(spec, pl, &cc, &fc, faces, dt).unwrap()
    }

    fn random_state(cmp: &Composite, seed: u64) -> (FieldState, FieldState) {
        let dofs = cmp.dofs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..dofs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        dofs.scatter(cmp, &z)
    }

    #[test]
    fn face_constraint_replicates_first_row() {
        let mut e = vec![5.0, 1.0, 2.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0];
        apply_face_constraints(&mut e, 3);
        assert_eq!(e[3], 5.0);
        assert_eq!(e[6], 5.0);
        let before = e.clone();
        apply_face_constraints(&mut e, 3);
        assert_eq!(e, before);
        assert_eq!(coarse_from_fine_e(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(coarse_from_fine_u(&fine_from_coarse_u(0.7, 5)), 0.7);
    }

    #[test]
    fn edge_constraints_and_weights() {
        let mut p = EdgePatch {
            r_a: 3,
            e: vec![
                vec![1.0, 2.0, 3.0],
                vec![4.0, 5.0, 6.0],
                vec![7.0, 8.0, 9.0],
            ],
            u_first: vec![vec![1.0, 2.0]; 3],
            u_second: vec![vec![3.0, 4.0]; 3],
        };
        apply_edge_constraints(&mut p);
        assert!(p.e.iter().all(|r| r == &vec![1.0, 2.0, 3.0]));
        assert!(p.u_first.iter().all(|r| r == &vec![1.0, 1.0]));
        // Half-edge weights: the corner column covers half a fine cell.
        assert!((edge_coarse_from_fine(1.0, &[1.0], 3) - 1.0).abs() < 1e-15);
        assert!((edge_coarse_from_fine(3.0, &[0.0], 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn edge_system_dimension() {
        let cmp = composite(
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
            [3, 3, 3],
            0.0,
            [FaceBc::Pec; 6],
            1,
        );
        let edge = cmp.patches.iter().find(|p| p.slots.len() == 2).unwrap();
        assert_eq!(edge.dimension(), 6);
        let cmp = composite(
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
            [5, 7, 3],
            0.0,
            [FaceBc::Pec; 6],
            1,
        );
        for p in cmp.patches.iter().filter(|p| p.slots.len() == 2) {
            let rt0 = cmp.placement.ratio[p.component.third(p.slots[0].normal).index()];
            let rt1 = cmp.placement.ratio[p.component.third(p.slots[1].normal).index()];
            assert_eq!(p.dimension(), (rt0 - 1) / 2 + (rt1 - 1) / 2 + 4);
        }
    }

    #[test]
    fn face_path_matches_general_solve() {
        let cmp = composite(
            [4, 4, 4],
            [1, 1, 1],
            [2, 2, 2],
            [3, 5, 3],
            5e-5,
            [FaceBc::Pec; 6],
            2,
        );
        let (mut c, mut f) = random_state(&cmp, 3);
        cmp.coarse.step_h(&mut c);
        cmp.fine.step_h(&mut f);
        cmp.coarse.step_e(&mut c);
        cmp.fine.step_e(&mut f);
        let mut faces = 0;
        for p in &cmp.patches {
            if let PatchSolver::Face(_) = p.solver {
                faces += 1;
                let z = p.solve_general(&cmp.coarse, &cmp.fine, &c, &f).unwrap();
                let (mut c2, mut f2) = (c.clone(), f.clone());
                p.update(&cmp.coarse, &cmp.fine, &mut c2, &mut f2);
                let ai = p.component.index();
                assert!((c2.e[ai][p.coarse_sample] - z[0]).abs() <= 1e-12 * z[0].abs().max(1e-3));
                for (k, g) in p.groups.iter().enumerate() {
                    for &m in &g.members {
                        assert!((f2.e[ai][m] - z[1 + k]).abs() <= 1e-12 * z[1 + k].abs().max(1e-3));
                    }
                }
            }
        }
        assert!(faces > 0);
    }

    #[test]
    fn uniform_face_matrix_eigenvalues() {
        // Uniform vacuum: the normalized left-hand matrix has eigenvalue
        // c (ε/Δt) on the constant vector and c (ε/Δt) (1/r_n)/(1 + 1/r_n)
        // on its complement, with c = l̂' (d_c + d_f).
        let spec = RegionSpec::new([3, 3, 3], [0.01, 0.012, 0.009]).unwrap();
        let pl = SubgridPlacement::new([1, 1, 1], [1, 1, 1], [3, 3, 3]).unwrap();
        let fspec = pl.fine_spec(&spec).unwrap();
        let cc = CellMaterials::uniform(spec.cells, EPS0, 0.0, MU0);
        let fc = CellMaterials::uniform(fspec.cells, EPS0, 0.0, MU0);
        let dt = 1e-12;
        let cmp = Composite::new(spec, pl, &cc, &fc, [FaceBc::Pec; 6], dt).unwrap();
        let p = cmp
            .patches
            .iter()
            .find(|p| matches!(p.solver, PatchSolver::Face(_)));
        // A one-cell hole has only edge patches; use a larger one.
        assert!(p.is_none());
        let pl = SubgridPlacement::new([0, 0, 0], [3, 2, 3], [3, 3, 3]).unwrap();
        let fspec = pl.fine_spec(&spec).unwrap();
        let fc = CellMaterials::uniform(fspec.cells, EPS0, 0.0, MU0);
        let cmp = Composite::new(spec, pl, &cc, &fc, [FaceBc::Pmc; 6], dt).unwrap();
        let p = cmp
            .patches
            .iter()
            .find(|p| matches!(p.solver, PatchSolver::Face(_)))
            .unwrap();
        let PatchSolver::Face(fs) = &p.solver else {
            unreachable!()
        };
        let n = p.slots[0].normal;
        let rn = 3.0;
        let dfine = 0.5 * spec.spacing[n.index()] / rn;
        let dcoarse = 0.5 * spec.spacing[n.index()];
        let lhat = p.groups[0].slots[0].length;
        let c = lhat * (dcoarse + dfine);
        let lhs = fs.normalized_lhs(dt);
        let mut ev: Vec<f64> = lhs.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = c * EPS0 / dt * (1.0 / rn) / (1.0 + 1.0 / rn);
        let hi = c * EPS0 / dt;
        assert!((ev[0] / lo - 1.0).abs() < 1e-12);
        assert!((ev[1] / lo - 1.0).abs() < 1e-12);
        assert!((ev[2] / hi - 1.0).abs() < 1e-12);
        // The stored reduced matrix is r_a times the normalized one.
        let scaled = &fs.lhs / p.r_a as f64;
        assert!((scaled - lhs).amax() < 1e-12 * hi);
        // M_ε is symmetric positive definite.
        assert!(fs.m_eps.clone().cholesky().is_some());
    }

    #[test]
    fn random_values_are_lossless_and_perturbation_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in [3, 5, 7] {
            let cmp = composite(
                [3, 3, 3],
                [1, 1, 0],
                [1, 1, 2],
                [r, r, r],
                0.0,
                [FaceBc::Pec; 6],
                4,
            );
            let dt = cmp.coarse.dt;
            for p in &cmp.patches {
                let cl = cmp.coarse.layout.spec.spacing[p.component.index()];
                let fl = cmp.fine.layout.spec.spacing[p.component.index()];
                let v = p.random_values(&mut rng);
                let (net, mag) = p.supply_rate(&v, dt, cl, fl);
                assert!(net.abs() <= 1e-13 * mag, "{net} {mag}");
                let mut bad = v.clone();
                bad.fine_e[0][0][1] += 0.5;
                let (net, mag) = p.supply_rate(&bad, dt, cl, fl);
                assert!(net.abs() > 1e-6 * mag);
            }
        }
    }

    #[test]
    fn lossless_composite_conserves_storage() {
        let cmp = composite(
            [4, 3, 4],
            [1, 1, 1],
            [2, 1, 2],
            [3, 3, 3],
            0.0,
            [FaceBc::Pec; 6],
            6,
        );
        let (mut c, mut f) = random_state(&cmp, 7);
        let e0 = cmp.storage(&c, &f);
        for _ in 0..200 {
            cmp.step(&mut c, &mut f);
            let e = cmp.storage(&c, &f);
            assert!((e - e0).abs() <= 1e-12 * e0, "{e} vs {e0}");
        }
    }

    #[test]
    fn lossy_composite_never_gains_energy() {
        let cmp = composite(
            [4, 4, 3],
            [1, 1, 1],
            [2, 2, 1],
            [3, 3, 3],
            0.05,
            [FaceBc::Pmc; 6],
            8,
        );
        let (mut c, mut f) = random_state(&cmp, 9);
        let mut prev = cmp.storage(&c, &f);
        for _ in 0..100 {
            cmp.step(&mut c, &mut f);
            let e = cmp.storage(&c, &f);
            assert!(e <= prev * (1.0 + 1e-13));
            prev = e;
        }
    }

    #[test]
    fn flush_subgrid_is_lossless() {
        for wall in [FaceBc::Pec, FaceBc::Pmc] {
            let cmp = composite(
                [4, 3, 3],
                [1, 0, 1],
                [2, 3, 1],
                [3, 3, 3],
                0.0,
                [wall; 6],
                10,
            );
            let (mut c, mut f) = random_state(&cmp, 11);
            let e0 = cmp.storage(&c, &f);
            for _ in 0..100 {
                cmp.step(&mut c, &mut f);
            }
            let e = cmp.storage(&c, &f);
            assert!((e - e0).abs() <= 1e-11 * e0);
        }
    }

    #[test]
    fn composite_spectral_radius_at_most_one() {
        let cmp = composite(
            [2, 2, 2],
            [0, 0, 0],
            [1, 1, 1],
            [3, 3, 3],
            5e-5,
            [FaceBc::Pec; 6],
            12,
        );
        let dofs = cmp.dofs();
        let m = iteration_matrix_from_map(dofs.len(), 5000, |z| Ok(dofs.step(&cmp, z))).unwrap();
        let rho = spectral_radius(&m);
        assert!(rho <= 1.0 + 1e-10, "{rho}");
    }

    #[test]
    fn rejects_open_outer_faces() {
        let spec = RegionSpec::new([3, 3, 3], [0.01; 3]).unwrap();
        let pl = SubgridPlacement::new([1, 1, 1], [1, 1, 1], [3, 3, 3]).unwrap();
        let cc = CellMaterials::uniform([3, 3, 3], EPS0, 0.0, MU0);
        let fc = CellMaterials::uniform([3, 3, 3], EPS0, 0.0, MU0);
        assert!(Composite::new(spec, pl, &cc, &fc, [FaceBc::Open; 6], 1e-12).is_err());
    }
}
