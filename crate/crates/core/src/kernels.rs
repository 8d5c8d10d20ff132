//! Leapfrog update kernels for one grid region.
//!
//! The state after a full step is `(E^{n+1}, H^{n+1/2})`: a step first
//! advances H from E^n, then advances E with the new H and, on open faces,
//! the hanging inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Axis, Dims3, Face, HangingEntry, Layout, MaterialGrid, SlotKind};

/// Treatment of an outer face of a grid region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceBc {
    /// Tangential E clamped to zero.
    Pec,
    /// Hanging H held at zero.
    Pmc,
    /// Hanging H supplied as an external input each step.
    Open,
    /// Face coupled to another grid by interface patches.
    Interface,
}

/// How the E kernel treats a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleRole {
    Inactive,
    Regular,
    Clamped,
    /// Left untouched by the kernel and updated by an interface solve.
    Interface,
}

/// Electric and magnetic field arrays of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub e: [Vec<f64>; 3],
    pub h: [Vec<f64>; 3],
}

impl FieldState {
    pub fn zeros(layout: &Layout) -> Self {
        let s = &layout.spec;
        FieldState {
            e: Axis::ALL.map(|a| vec![0.0; s.e_dims(a).len()]),
            h: Axis::ALL.map(|a| vec![0.0; s.h_dims(a).len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.e
            .iter()
            .chain(self.h.iter())
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// One term of a finite-difference stencil along x-rows.
#[derive(Clone, Copy)]
struct Term {
    comp: usize,
    shift: [isize; 3],
    sign: f64,
}

/// Stencil of the H circulation around the dual face of E along `a`.
fn e_terms(a: Axis) -> [Term; 4] {
    let b = a.next();
    let c = a.prev();
    let sh = |d: Axis, v: isize| {
        let mut s = [0isize; 3];
        s[d.index()] = v;
        s
    };
    [
        Term {
            comp: c.index(),
            shift: [0; 3],
            sign: 1.0,
        },
        Term {
            comp: c.index(),
            shift: sh(b, -1),
            sign: -1.0,
        },
        Term {
            comp: b.index(),
            shift: [0; 3],
            sign: -1.0,
        },
        Term {
            comp: b.index(),
            shift: sh(c, -1),
            sign: 1.0,
        },
    ]
}

/// Stencil of the E circulation around the primal face of H along `a`,
/// without the primal edge lengths.
fn h_terms(a: Axis) -> [Term; 4] {
    let b = a.next();
    let c = a.prev();
    let sh = |d: Axis| {
        let mut s = [0isize; 3];
        s[d.index()] = 1;
        s
    };
    [
        Term {
            comp: c.index(),
            shift: sh(b),
            sign: 1.0,
        },
        Term {
            comp: c.index(),
            shift: [0; 3],
            sign: -1.0,
        },
        Term {
            comp: b.index(),
            shift: sh(c),
            sign: -1.0,
        },
        Term {
            comp: b.index(),
            shift: [0; 3],
            sign: 1.0,
        },
    ]
}

/// Coefficients and sample roles of one grid region.
#[derive(Clone, Debug)]
pub struct YeeGrid {
    pub layout: Layout,
    pub materials: MaterialGrid,
    pub faces: [FaceBc; 6],
    pub dt: f64,
    e_dims: [Dims3; 3],
    h_dims: [Dims3; 3],
    e_area: [Vec<f64>; 3],
    e_ca: [Vec<f64>; 3],
    e_cb: [Vec<f64>; 3],
    e_role: [Vec<SampleRole>; 3],
    h_len: [Vec<f64>; 3],
    h_db: [Vec<f64>; 3],
    hanging: Vec<HangingEntry>,
    open: Vec<usize>,
    /// Run the kernels on the rayon thread pool.
    pub parallel: bool,
}

impl YeeGrid {
    pub fn new(
        layout: Layout,
        materials: MaterialGrid,
        faces: [FaceBc; 6],
        dt: f64,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidRegion(format!(
                "time step must be positive (got {dt})"
            )));
        }
        let spec = layout.spec;
        for a in Axis::ALL {
            let i = a.index();
            if materials.eps[i].len() != spec.e_dims(a).len()
                || materials.sigma[i].len() != spec.e_dims(a).len()
                || materials.mu[i].len() != spec.h_dims(a).len()
            {
                return Err(Error::DimensionMismatch {
                    what: "material grid",
                    expected: spec.e_dims(a).len(),
                    found: materials.eps[i].len(),
                });
            }
        }
        let e_dims = Axis::ALL.map(|a| spec.e_dims(a));
        let h_dims = Axis::ALL.map(|a| spec.h_dims(a));
        let mut e_area: [Vec<f64>; 3] = Default::default();
        let mut e_ca: [Vec<f64>; 3] = Default::default();
        let mut e_cb: [Vec<f64>; 3] = Default::default();
        let mut e_role: [Vec<SampleRole>; 3] = Default::default();
        let mut h_len: [Vec<f64>; 3] = Default::default();
        let mut h_db: [Vec<f64>; 3] = Default::default();
        for a in Axis::ALL {
            let i = a.index();
            let d = e_dims[i];
            let n = d.len();
            let (mut area, mut ca, mut cb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut role = vec![SampleRole::Inactive; n];
            let quarter = 0.25 * spec.spacing[a.next().index()] * spec.spacing[a.prev().index()];
            for l in 0..n {
                let g = layout.e_geometry(a, d.coords(l));
                if g.quadrants == 0 {
                    continue;
                }
                area[l] = quarter * g.quadrants as f64;
                let mut r = SampleRole::Regular;
                for s in &g.slots {
                    let bc = match s.kind {
                        SlotKind::Hole => FaceBc::Interface,
                        SlotKind::Outer => faces[s.outer_face().unwrap().index()],
                    };
                    match bc {
                        FaceBc::Pec => r = SampleRole::Clamped,
                        FaceBc::Interface if r != SampleRole::Clamped => r = SampleRole::Interface,
                        _ => {}
                    }
                }
                role[l] = r;
                let eps = materials.eps[i][l];
                let sig = materials.sigma[i][l];
                if !(eps > 0.0 && sig.is_finite() && eps / dt + 0.5 * sig > 0.0) {
                    return Err(Error::InvalidRange {
                        what: "material",
                        detail: format!("eps = {eps}, sigma = {sig} on an active sample"),
                    });
                }
                let plus = eps / dt + 0.5 * sig;
                match r {
                    SampleRole::Regular => {
                        ca[l] = (eps / dt - 0.5 * sig) / plus;
                        cb[l] = 1.0 / (area[l] * plus);
                    }
                    SampleRole::Interface => ca[l] = 1.0,
                    _ => {}
                }
            }
            e_area[i] = area;
            e_ca[i] = ca;
            e_cb[i] = cb;
            e_role[i] = role;

            let hd = h_dims[i];
            let face_area = spec.spacing[a.next().index()] * spec.spacing[a.prev().index()];
            let mut len = vec![0.0; hd.len()];
            let mut db = vec![0.0; hd.len()];
            for l in 0..hd.len() {
                len[l] = layout.h_length(a, hd.coords(l));
                if len[l] > 0.0 {
                    let mu = materials.mu[i][l];
                    if !(mu > 0.0) {
                        return Err(Error::InvalidRange {
                            what: "permeability",
                            detail: format!("{mu} on an active sample"),
                        });
                    }
                    db[l] = dt / (mu * face_area);
                }
            }
            h_len[i] = len;
            h_db[i] = db;
        }
        let hanging = layout.hanging_entries();
        let open = hanging
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.slot.outer_face().map(|f| faces[f.index()]) == Some(FaceBc::Open)
                    && e_role[h.component.index()][h.sample] == SampleRole::Regular
            })
            .map(|(k, _)| k)
            .collect();
        Ok(YeeGrid {
            layout,
            materials,
            faces,
            dt,
            e_dims,
            h_dims,
            e_area,
            e_ca,
            e_cb,
            e_role,
            h_len,
            h_db,
            hanging,
            open,
            parallel: false,
        })
    }

    pub fn face_bc(&self, f: Face) -> FaceBc {
        self.faces[f.index()]
    }

    pub fn e_dims(&self, a: Axis) -> Dims3 {
        self.e_dims[a.index()]
    }

    pub fn h_dims(&self, a: Axis) -> Dims3 {
        self.h_dims[a.index()]
    }

    /// Dual-face areas of the E samples along `a`.
    pub fn e_area(&self, a: Axis) -> &[f64] {
        &self.e_area[a.index()]
    }

    /// Dual-edge lengths of the H samples along `a`.
    pub fn h_length(&self, a: Axis) -> &[f64] {
        &self.h_len[a.index()]
    }

    pub fn e_role(&self, a: Axis) -> &[SampleRole] {
        &self.e_role[a.index()]
    }

    pub fn e_cb(&self, a: Axis) -> &[f64] {
        &self.e_cb[a.index()]
    }

    /// Every hanging slot of the layout in input-vector order.
    pub fn hanging_entries(&self) -> &[HangingEntry] {
        &self.hanging
    }

    /// Hanging slots on open faces, in input-vector order.
    pub fn open_entries(&self) -> impl Iterator<Item = &HangingEntry> + '_ {
        self.open.iter().map(move |&k| &self.hanging[k])
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    /// `A'(ε/Δt ± σ/2)` of an E sample.
    pub fn e_weights(&self, a: Axis, l: usize) -> (f64, f64) {
        let i = a.index();
        let (eps, sig, area) = (
            self.materials.eps[i][l],
            self.materials.sigma[i][l],
            self.e_area[i][l],
        );
        (
            area * (eps / self.dt + 0.5 * sig),
            area * (eps / self.dt - 0.5 * sig),
        )
    }

    /// Advance H by one step from the current E.
    pub fn step_h(&self, st: &mut FieldState) {
        let sp = self.layout.spec.spacing;
        for a in Axis::ALL {
            let i = a.index();
            let hd = self.h_dims[i];
            let terms = h_terms(a);
            let weights = terms.map(|t| {
                // Primal edge length of the E component in the term.
                t.sign * sp[t.comp]
            });
            let e = &st.e;
            let db = &self.h_db[i];
            let plane = hd.n[0] * hd.n[1];
            let update = |k: usize, out: &mut [f64]| {
                for j in 0..hd.n[1] {
                    let row = &mut out[j * hd.n[0]..(j + 1) * hd.n[0]];
                    let base = hd.index([0, j, k]);
                    let dbr = &db[base..base + hd.n[0]];
                    for (t, w) in terms.iter().zip(weights) {
                        let ed = self.e_dims[t.comp];
                        let q = [
                            t.shift[0] as usize,
                            j + t.shift[1] as usize,
                            k + t.shift[2] as usize,
                        ];
                        let eb = ed.index(q);
                        let er = &e[t.comp][eb..eb + hd.n[0]];
                        for x in 0..hd.n[0] {
                            row[x] -= dbr[x] * w * er[x];
                        }
                    }
                }
            };
            let h = &mut st.h[i];
            if self.parallel {
                h.par_chunks_mut(plane)
                    .enumerate()
                    .for_each(|(k, c)| update(k, c));
            } else {
                h.chunks_mut(plane)
                    .enumerate()
                    .for_each(|(k, c)| update(k, c));
            }
        }
    }

    /// Advance E by one step from the current H, skipping interface samples
    /// and clamping PEC samples. Hanging inputs are applied separately.
    pub fn step_e(&self, st: &mut FieldState) {
        for a in Axis::ALL {
            let i = a.index();
            let ed = self.e_dims[i];
            let terms = e_terms(a);
            let h = &st.h;
            let (ca, cb) = (&self.e_ca[i], &self.e_cb[i]);
            let plane = ed.n[0] * ed.n[1];
            let nx = ed.n[0] as isize;
            let update = |k: usize, out: &mut [f64]| {
                let mut acc = vec![0.0; ed.n[0]];
                for j in 0..ed.n[1] {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for t in &terms {
                        let hd = self.h_dims[t.comp];
                        let qj = j as isize + t.shift[1];
                        let qk = k as isize + t.shift[2];
                        if qj < 0 || qk < 0 || qj as usize >= hd.n[1] || qk as usize >= hd.n[2] {
                            continue;
                        }
                        let dx = t.shift[0];
                        let lo = (-dx).max(0);
                        let hi = nx.min(hd.n[0] as isize - dx);
                        if hi <= lo {
                            continue;
                        }
                        let hb = hd.index([0, qj as usize, qk as usize]);
                        let hrow = &h[t.comp][hb..hb + hd.n[0]];
                        let lrow = &self.h_len[t.comp][hb..hb + hd.n[0]];
                        for x in lo..hi {
                            let q = (x + dx) as usize;
                            acc[x as usize] += t.sign * lrow[q] * hrow[q];
                        }
                    }
                    let base = ed.index([0, j, k]);
                    let row = &mut out[j * ed.n[0]..(j + 1) * ed.n[0]];
                    for x in 0..ed.n[0] {
                        row[x] = ca[base + x] * row[x] + cb[base + x] * acc[x];
                    }
                }
            };
            let e = &mut st.e[i];
            if self.parallel {
                e.par_chunks_mut(plane)
                    .enumerate()
                    .for_each(|(k, c)| update(k, c));
            } else {
                e.chunks_mut(plane)
                    .enumerate()
                    .for_each(|(k, c)| update(k, c));
            }
        }
    }

    /// Add hanging-variable contributions of the open faces to E.
    ///
    /// `u` holds one value per open slot, in input-vector order.
    pub fn apply_open_inputs(&self, st: &mut FieldState, u: &[f64]) -> Result<()> {
        if u.len() != self.open.len() {
            return Err(Error::DimensionMismatch {
                what: "hanging input",
                expected: self.open.len(),
                found: u.len(),
            });
        }
        for (e, &v) in self.open_entries().zip(u) {
            let i = e.component.index();
            st.e[i][e.sample] += self.e_cb[i][e.sample] * e.slot.sign * e.slot.length * v;
        }
        Ok(())
    }

    /// Boundary trace: E on every open slot, in input-vector order.
    pub fn open_trace(&self, st: &FieldState) -> Vec<f64> {
        self.open_entries()
            .map(|e| st.e[e.component.index()][e.sample])
            .collect()
    }

    /// One full step of a region with optional hanging inputs on open faces.
    pub fn step(&self, st: &mut FieldState, u: Option<&[f64]>) -> Result<()> {
        self.step_h(st);
        self.step_e(st);
        match u {
            Some(u) => self.apply_open_inputs(st, u),
            None if self.open.is_empty() => Ok(()),
            None => Err(Error::MissingHangingVariable(format!(
                "{} open slots need input",
                self.open.len()
            ))),
        }
    }

    /// Inject an electric current density `j` (A/m²) at a regular E sample.
    pub fn add_current(&self, st: &mut FieldState, a: Axis, l: usize, j: f64) {
        let i = a.index();
        st.e[i][l] -= self.e_cb[i][l] * self.e_area[i][l] * j;
    }

    /// H circulation around the dual face of one E sample, excluding
    /// hanging slots.
    pub fn circulation(&self, st: &FieldState, a: Axis, l: usize) -> f64 {
        let p = self.e_dims[a.index()].coords(l);
        let mut acc = 0.0;
        for t in e_terms(a) {
            let hd = self.h_dims[t.comp];
            let q = [
                p[0] as isize + t.shift[0],
                p[1] as isize + t.shift[1],
                p[2] as isize + t.shift[2],
            ];
            if hd.contains(q) {
                let hl = hd.index([q[0] as usize, q[1] as usize, q[2] as usize]);
                acc += t.sign * self.h_len[t.comp][hl] * st.h[t.comp][hl];
            }
        }
        acc
    }

    /// Primal E circulation `(C D_l E)` around the face of one H sample.
    pub fn curl_e(&self, st: &FieldState, a: Axis, l: usize) -> f64 {
        let sp = self.layout.spec.spacing;
        let p = self.h_dims[a.index()].coords(l);
        h_terms(a)
            .iter()
            .map(|t| {
                let q = [
                    p[0] + t.shift[0] as usize,
                    p[1] + t.shift[1] as usize,
                    p[2] + t.shift[2] as usize,
                ];
                t.sign * sp[t.comp] * st.e[t.comp][self.e_dims[t.comp].index(q)]
            })
            .sum()
    }

    /// Number of active E and H samples.
    pub fn active_counts(&self) -> (usize, usize) {
        let ne = self
            .e_role
            .iter()
            .flatten()
            .filter(|r| **r != SampleRole::Inactive)
            .count();
        let nh = self.h_len.iter().flatten().filter(|l| **l > 0.0).count();
        (ne, nh)
    }
}
