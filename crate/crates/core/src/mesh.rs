//! Region geometry, node classification, materials and cell accounting.
//!
//! A region is a box of Yee cells, optionally with a box-shaped hole where a
//! subgrid is embedded. Every E sample carries a dual face made of up to four
//! quadrants and every H sample a dual edge made of up to two halves. Dual
//! contour segments that border an inactive quadrant are hanging slots: the
//! H values there are not part of the region state and enter as inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Axis {
        Axis::ALL[i % 3]
    }

    /// Next axis in cyclic order.
    pub fn next(self) -> Axis {
        Axis::from_index(self.index() + 1)
    }

    /// Previous axis in cyclic order.
    pub fn prev(self) -> Axis {
        Axis::from_index(self.index() + 2)
    }

    /// The axis that is neither `self` nor `other`.
    pub fn third(self, other: Axis) -> Axis {
        debug_assert_ne!(self, other);
        Axis::from_index(3 - self.index() - other.index())
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Shape of a 3-D array stored with x varying fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims3 {
    pub n: [usize; 3],
}

impl Dims3 {
    pub fn new(n: [usize; 3]) -> Self {
        Dims3 { n }
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.n[0] * (p[1] + self.n[1] * p[2])
    }

    #[inline]
    pub fn coords(&self, l: usize) -> [usize; 3] {
        let i = l % self.n[0];
        let r = l / self.n[0];
        [i, r % self.n[1], r / self.n[1]]
    }

    pub fn contains(&self, p: [isize; 3]) -> bool {
        (0..3).all(|d| p[d] >= 0 && (p[d] as usize) < self.n[d])
    }
}

/// Uniformly gridded box of cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub cells: [usize; 3],
    pub spacing: [f64; 3],
}

impl RegionSpec {
    pub fn new(cells: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        for d in 0..3 {
            if cells[d] == 0 {
                return Err(Error::InvalidRegion(format!(
                    "cell count along {} must be positive",
                    Axis::from_index(d).name()
                )));
            }
            if !(spacing[d].is_finite() && spacing[d] > 0.0) {
                return Err(Error::InvalidRegion(format!(
                    "spacing along {} must be positive and finite (got {})",
                    Axis::from_index(d).name(),
                    spacing[d]
                )));
            }
        }
        Ok(RegionSpec { cells, spacing })
    }

    pub fn cell_dims(&self) -> Dims3 {
        Dims3::new(self.cells)
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Array shape of the E component along `a`.
    pub fn e_dims(&self, a: Axis) -> Dims3 {
        let mut n = [self.cells[0] + 1, self.cells[1] + 1, self.cells[2] + 1];
        n[a.index()] = self.cells[a.index()];
        Dims3::new(n)
    }

    /// Array shape of the H component along `a`.
    pub fn h_dims(&self, a: Axis) -> Dims3 {
        let mut n = self.cells;
        n[a.index()] += 1;
        Dims3::new(n)
    }

    /// Physical position of an E sample.
    pub fn e_position(&self, a: Axis, p: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for d in 0..3 {
            let off = if d == a.index() { 0.5 } else { 0.0 };
            x[d] = (p[d] as f64 + off) * self.spacing[d];
        }
        x
    }

    /// Physical position of an H sample.
    pub fn h_position(&self, a: Axis, p: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for d in 0..3 {
            let off = if d == a.index() { 0.0 } else { 0.5 };
            x[d] = (p[d] as f64 + off) * self.spacing[d];
        }
        x
    }
}

/// Half-open box of cell indices `lo..hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CellBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|d| hi[d] <= lo[d]) {
            return Err(Error::InvalidRegion(format!(
                "empty cell box {lo:?}..{hi:?}"
            )));
        }
        Ok(CellBox { lo, hi })
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn contains(&self, c: [isize; 3]) -> bool {
        (0..3).all(|d| c[d] >= self.lo[d] as isize && c[d] < self.hi[d] as isize)
    }

    pub fn cell_count(&self) -> usize {
        self.extent().iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellState {
    Active,
    Outside,
    Hole,
}

/// What lies across a hanging slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    /// The outer boundary of the region box.
    Outer,
    /// The surface of the hole.
    Hole,
}

/// One hanging-variable slot of an E sample.
///
/// The hanging H lies in the plane normal to `normal` and points along the
/// axis that is neither the E direction nor `normal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HangingSlot {
    pub normal: Axis,
    /// True when the active quadrants lie on the positive side of the plane.
    pub active_positive: bool,
    pub kind: SlotKind,
    /// Number of half-segments (1 or 2) making up the slot.
    pub halves: u8,
    /// Orientation of the slot in the dual contour, +1 or -1.
    pub sign: f64,
    /// Dual-edge length of the hanging variable.
    pub length: f64,
}

/// Dual-grid geometry of one E sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EGeometry {
    /// Active quadrants of the dual face (0..=4).
    pub quadrants: u8,
    pub slots: SmallVec<[HangingSlot; 4]>,
}

/// Node types of a box region, by the number of boundary faces an E sample lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeType {
    /// Inside the region (Type 1).
    Interior,
    /// On one boundary face (Type 2).
    Face,
    /// On a boundary edge (Type 3).
    Edge,
}

/// One face of a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Face {
    pub axis: Axis,
    /// True for the maximum-coordinate face.
    pub positive: bool,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face {
            axis: Axis::X,
            positive: false,
        },
        Face {
            axis: Axis::X,
            positive: true,
        },
        Face {
            axis: Axis::Y,
            positive: false,
        },
        Face {
            axis: Axis::Y,
            positive: true,
        },
        Face {
            axis: Axis::Z,
            positive: false,
        },
        Face {
            axis: Axis::Z,
            positive: true,
        },
    ];

    pub fn index(self) -> usize {
        2 * self.axis.index() + self.positive as usize
    }

    pub fn name(self) -> &'static str {
        match (self.axis, self.positive) {
            (Axis::X, false) => "x_min",
            (Axis::X, true) => "x_max",
            (Axis::Y, false) => "y_min",
            (Axis::Y, true) => "y_max",
            (Axis::Z, false) => "z_min",
            (Axis::Z, true) => "z_max",
        }
    }
}

impl HangingSlot {
    /// Outer face the slot sits on, if it is an outer slot.
    pub fn outer_face(&self) -> Option<Face> {
        match self.kind {
            SlotKind::Outer => Some(Face {
                axis: self.normal,
                positive: !self.active_positive,
            }),
            SlotKind::Hole => None,
        }
    }
}

/// Contour sign of a hanging slot for an E sample along `a`.
pub fn slot_sign(a: Axis, normal: Axis, active_positive: bool) -> f64 {
    let flip = normal == a.next();
    if active_positive != flip {
        1.0
    } else {
        -1.0
    }
}

/// Order of hanging-slot face classes for each E component, as
/// `(normal, active_positive)` pairs.
fn face_class_order(a: Axis) -> [(Axis, bool); 4] {
    match a {
        // bottom, north, top, south
        Axis::X => [
            (Axis::Z, true),
            (Axis::Y, false),
            (Axis::Z, false),
            (Axis::Y, true),
        ],
        // west, top, east, bottom
        Axis::Y => [
            (Axis::X, true),
            (Axis::Z, false),
            (Axis::X, false),
            (Axis::Z, true),
        ],
        // south, east, north, west
        Axis::Z => [
            (Axis::Y, true),
            (Axis::X, false),
            (Axis::Y, false),
            (Axis::X, true),
        ],
    }
}

/// Hanging slot together with the E sample that owns it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HangingEntry {
    pub component: Axis,
    /// Linear index into the E component array.
    pub sample: usize,
    pub slot: HangingSlot,
}

/// A region box, optionally with a hole of removed cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub spec: RegionSpec,
    pub hole: Option<CellBox>,
}

impl Layout {
    pub fn new(spec: RegionSpec) -> Self {
        Layout { spec, hole: None }
    }

    pub fn with_hole(spec: RegionSpec, hole: CellBox) -> Result<Self> {
        if (0..3).any(|d| hole.hi[d] > spec.cells[d]) {
            return Err(Error::InvalidRegion(format!(
                "hole {:?}..{:?} exceeds region of {:?} cells",
                hole.lo, hole.hi, spec.cells
            )));
        }
        if hole.lo == [0, 0, 0] && hole.hi == spec.cells {
            return Err(Error::InvalidRegion("hole covers the whole region".into()));
        }
        Ok(Layout {
            spec,
            hole: Some(hole),
        })
    }

    pub fn cell_state(&self, c: [isize; 3]) -> CellState {
        if !self.spec.cell_dims().contains(c) {
            CellState::Outside
        } else if self.hole.is_some_and(|h| h.contains(c)) {
            CellState::Hole
        } else {
            CellState::Active
        }
    }

    pub fn active_cell_count(&self) -> usize {
        self.spec.cell_count() - self.hole.map_or(0, |h| h.cell_count())
    }

    /// Dual geometry of the E sample along `a` at array coordinates `p`.
    pub fn e_geometry(&self, a: Axis, p: [usize; 3]) -> EGeometry {
        let b = a.next();
        let c = a.prev();
        let (ai, bi, ci) = (a.index(), b.index(), c.index());
        let mut states = [[CellState::Outside; 2]; 2];
        let mut quadrants = 0u8;
        for sb in 0..2 {
            for sc in 0..2 {
                let mut cell = [0isize; 3];
                cell[ai] = p[ai] as isize;
                cell[bi] = p[bi] as isize - 1 + sb as isize;
                cell[ci] = p[ci] as isize - 1 + sc as isize;
                let s = self.cell_state(cell);
                if s == CellState::Active {
                    quadrants += 1;
                }
                states[sb][sc] = s;
            }
        }
        let mut slots: SmallVec<[HangingSlot; 4]> = SmallVec::new();
        if quadrants == 0 {
            return EGeometry { quadrants, slots };
        }
        let kind_of = |s: CellState| match s {
            CellState::Hole => SlotKind::Hole,
            _ => SlotKind::Outer,
        };
        let mut push = |normal: Axis, active_positive: bool, kind: SlotKind| {
            let t = a.third(normal);
            let half = 0.5 * self.spec.spacing[t.index()];
            if let Some(s) = slots.iter_mut().find(|s| {
                s.normal == normal && s.active_positive == active_positive && s.kind == kind
            }) {
                s.halves += 1;
                s.length += half;
            } else {
                slots.push(HangingSlot {
                    normal,
                    active_positive,
                    kind,
                    halves: 1,
                    sign: slot_sign(a, normal, active_positive),
                    length: half,
                });
            }
        };
        // Segments in the plane normal to b, one per side along c.
        for sc in 0..2 {
            let (m, pl) = (states[0][sc], states[1][sc]);
            match (m == CellState::Active, pl == CellState::Active) {
                (true, false) => push(b, false, kind_of(pl)),
                (false, true) => push(b, true, kind_of(m)),
                _ => {}
            }
        }
        // Segments in the plane normal to c, one per side along b.
        for sb in 0..2 {
            let (m, pl) = (states[sb][0], states[sb][1]);
            match (m == CellState::Active, pl == CellState::Active) {
                (true, false) => push(c, false, kind_of(pl)),
                (false, true) => push(c, true, kind_of(m)),
                _ => {}
            }
        }
        EGeometry { quadrants, slots }
    }

    /// Dual-face area of the E sample along `a`.
    pub fn e_area(&self, a: Axis, p: [usize; 3]) -> f64 {
        let q = self.e_geometry(a, p).quadrants as f64;
        let s = self.spec.spacing;
        0.25 * q * s[a.next().index()] * s[a.prev().index()]
    }

    /// Active halves (0..=2) of the dual edge of the H sample along `a`.
    pub fn h_halves(&self, a: Axis, p: [usize; 3]) -> u8 {
        let ai = a.index();
        let mut n = 0;
        for s in 0..2isize {
            let mut cell = [p[0] as isize, p[1] as isize, p[2] as isize];
            cell[ai] += s - 1;
            if self.cell_state(cell) == CellState::Active {
                n += 1;
            }
        }
        n
    }

    /// Dual-edge length of the H sample along `a`.
    pub fn h_length(&self, a: Axis, p: [usize; 3]) -> f64 {
        0.5 * self.h_halves(a, p) as f64 * self.spec.spacing[a.index()]
    }

    /// All hanging slots in input-vector order: by E component, then face
    /// class, then sample index, with outer slots before hole slots.
    pub fn hanging_entries(&self) -> Vec<HangingEntry> {
        let mut out = Vec::new();
        for a in Axis::ALL {
            let dims = self.spec.e_dims(a);
            let geo: Vec<EGeometry> = (0..dims.len())
                .map(|l| self.e_geometry(a, dims.coords(l)))
                .collect();
            for (normal, active_positive) in face_class_order(a) {
                for kind in [SlotKind::Outer, SlotKind::Hole] {
                    for (l, g) in geo.iter().enumerate() {
                        for s in &g.slots {
                            if s.normal == normal
                                && s.active_positive == active_positive
                                && s.kind == kind
                            {
                                out.push(HangingEntry {
                                    component: a,
                                    sample: l,
                                    slot: *s,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Classify every E sample of a box region by node type.
///
/// Returns one vector per component in x, y, z order, indexed like the
/// component array.
pub fn classify_nodes(spec: &RegionSpec) -> [Vec<NodeType>; 3] {
    Axis::ALL.map(|a| {
        let dims = spec.e_dims(a);
        (0..dims.len())
            .map(|l| {
                let p = dims.coords(l);
                let on = [a.next(), a.prev()]
                    .iter()
                    .filter(|t| {
                        let i = t.index();
                        p[i] == 0 || p[i] == spec.cells[i]
                    })
                    .count();
                match on {
                    0 => NodeType::Interior,
                    1 => NodeType::Face,
                    _ => NodeType::Edge,
                }
            })
            .collect()
    })
}

/// Per-cell material values in absolute units.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMaterials {
    pub dims: Dims3,
    pub eps: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu: Vec<f64>,
}

impl CellMaterials {
    pub fn uniform(cells: [usize; 3], eps: f64, sigma: f64, mu: f64) -> Self {
        let dims = Dims3::new(cells);
        let n = dims.len();
        CellMaterials {
            dims,
            eps: vec![eps; n],
            sigma: vec![sigma; n],
            mu: vec![mu; n],
        }
    }

    pub fn min_eps(&self) -> f64 {
        self.eps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_mu(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Material values on E and H samples, indexed like the component arrays.
///
/// Samples outside the active region hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGrid {
    pub eps: [Vec<f64>; 3],
    pub sigma: [Vec<f64>; 3],
    pub mu: [Vec<f64>; 3],
}

impl MaterialGrid {
    /// Sample values taken from the active cell with the lowest linear index
    /// among those touching the sample.
    pub fn from_cells(layout: &Layout, cells: &CellMaterials) -> Result<Self> {
        let spec = &layout.spec;
        if cells.dims.n != spec.cells {
            return Err(Error::DimensionMismatch {
                what: "cell materials",
                expected: spec.cell_count(),
                found: cells.dims.len(),
            });
        }
        let cd = spec.cell_dims();
        let owner = |cands: &mut SmallVec<[[isize; 3]; 4]>| -> Option<usize> {
            cands
                .iter()
                .filter(|c| layout.cell_state(**c) == CellState::Active)
                .map(|c| cd.index([c[0] as usize, c[1] as usize, c[2] as usize]))
                .min()
        };
        let mut eps: [Vec<f64>; 3] = Default::default();
        let mut sigma: [Vec<f64>; 3] = Default::default();
        let mut mu: [Vec<f64>; 3] = Default::default();
        for a in Axis::ALL {
            let ai = a.index();
            let (bi, ci) = (a.next().index(), a.prev().index());
            let ed = spec.e_dims(a);
            let mut e_eps = vec![0.0; ed.len()];
            let mut e_sig = vec![0.0; ed.len()];
            for l in 0..ed.len() {
                let p = ed.coords(l);
                let mut cands: SmallVec<[[isize; 3]; 4]> = SmallVec::new();
                for sb in 0..2isize {
                    for sc in 0..2isize {
                        let mut c = [0isize; 3];
                        c[ai] = p[ai] as isize;
                        c[bi] = p[bi] as isize - 1 + sb;
                        c[ci] = p[ci] as isize - 1 + sc;
                        cands.push(c);
                    }
                }
                if let Some(o) = owner(&mut cands) {
                    e_eps[l] = cells.eps[o];
                    e_sig[l] = cells.sigma[o];
                }
            }
            eps[ai] = e_eps;
            sigma[ai] = e_sig;
            let hd = spec.h_dims(a);
            let mut h_mu = vec![0.0; hd.len()];
            for l in 0..hd.len() {
                let p = hd.coords(l);
                let mut cands: SmallVec<[[isize; 3]; 4]> = SmallVec::new();
                for s in 0..2isize {
                    let mut c = [p[0] as isize, p[1] as isize, p[2] as isize];
                    c[ai] += s - 1;
                    cands.push(c);
                }
                if let Some(o) = owner(&mut cands) {
                    h_mu[l] = cells.mu[o];
                }
            }
            mu[ai] = h_mu;
        }
        Ok(MaterialGrid { eps, sigma, mu })
    }

    pub fn uniform(layout: &Layout, eps: f64, sigma: f64, mu: f64) -> Result<Self> {
        MaterialGrid::from_cells(
            layout,
            &CellMaterials::uniform(layout.spec.cells, eps, sigma, mu),
        )
    }
}

/// Inclusive range of a material parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn validate(&self, what: &'static str, min: f64, strict: bool) -> Result<()> {
        let ok_min = if strict {
            self.lo > min
        } else {
            self.lo >= min
        };
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.hi < self.lo || !ok_min {
            return Err(Error::InvalidRange {
                what,
                detail: format!("[{}, {}]", self.lo, self.hi),
            });
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Draw per-cell ε and σ uniformly from the given ranges (absolute units).
///
/// `stream` selects an independent random stream for the same seed, so a
/// subgrid can be filled without disturbing the coarse draw.
pub fn random_cell_materials(
    cells: [usize; 3],
    eps: Range,
    sigma: Range,
    mu: f64,
    seed: u64,
    stream: u64,
) -> Result<CellMaterials> {
    eps.validate("permittivity", 0.0, true)?;
    sigma.validate("conductivity", 0.0, false)?;
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidRange {
            what: "permeability",
            detail: format!("{mu}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let dims = Dims3::new(cells);
    let n = dims.len();
    let mut out = CellMaterials::uniform(cells, 0.0, 0.0, mu);
    for l in 0..n {
        out.eps[l] = eps.draw(&mut rng);
        out.sigma[l] = sigma.draw(&mut rng);
    }
    Ok(out)
}

/// Random per-cell materials mapped onto the sample grid of `layout`.
pub fn assign_random_materials(
    layout: &Layout,
    eps: Range,
    sigma: Range,
    mu: f64,
    seed: u64,
) -> Result<MaterialGrid> {
    let cells = random_cell_materials(layout.spec.cells, eps, sigma, mu, seed, 0)?;
    MaterialGrid::from_cells(layout, &cells)
}

/// Placement of a refined subgrid inside a coarse region, in coarse cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgridPlacement {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
    pub ratio: [usize; 3],
}

impl SubgridPlacement {
    pub fn new(origin: [usize; 3], extent: [usize; 3], ratio: [usize; 3]) -> Result<Self> {
        for r in ratio {
            if r < 3 || r % 2 == 0 {
                return Err(Error::InvalidRatio(r));
            }
        }
        if extent.contains(&0) {
            return Err(Error::InvalidRegion(
                "subgrid extent must be positive".into(),
            ));
        }
        Ok(SubgridPlacement {
            origin,
            extent,
            ratio,
        })
    }

    pub fn hole(&self) -> CellBox {
        CellBox {
            lo: self.origin,
            hi: [
                self.origin[0] + self.extent[0],
                self.origin[1] + self.extent[1],
                self.origin[2] + self.extent[2],
            ],
        }
    }

    /// Region spec of the refined grid.
    pub fn fine_spec(&self, coarse: &RegionSpec) -> Result<RegionSpec> {
        RegionSpec::new(
            [
                self.extent[0] * self.ratio[0],
                self.extent[1] * self.ratio[1],
                self.extent[2] * self.ratio[2],
            ],
            [
                coarse.spacing[0] / self.ratio[0] as f64,
                coarse.spacing[1] / self.ratio[1] as f64,
                coarse.spacing[2] / self.ratio[2] as f64,
            ],
        )
    }

    pub fn fine_cell_count(&self) -> usize {
        (0..3).map(|d| self.extent[d] * self.ratio[d]).product()
    }
}

/// Convert a physical length into a whole number of cells.
pub fn align_to_cells(what: &str, length: f64, spacing: f64) -> Result<usize> {
    let n = length / spacing;
    let r = n.round();
    if !n.is_finite() || r < 0.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
        return Err(Error::Misaligned {
            what: what.to_string(),
            value: length,
            spacing,
        });
    }
    Ok(r as usize)
}

/// Cell totals of the different discretization strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CellCounts {
    pub coarse: usize,
    pub fine_everywhere: Option<usize>,
    pub nonuniform: Option<usize>,
    pub subgridded: Option<usize>,
}

/// Refined block for nonuniform gridding: every cell line crossing the block
/// is refined along its own axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedBlock {
    pub extent: [usize; 3],
    pub ratio: [usize; 3],
}

/// Count cells for uniform coarse, uniform fine, nonuniform and subgridded
/// discretizations of the same domain.
pub fn cell_count(
    coarse: [usize; 3],
    subgrid: Option<&SubgridPlacement>,
    nonuniform: Option<&RefinedBlock>,
) -> Result<CellCounts> {
    let n_coarse: usize = coarse.iter().product();
    if n_coarse == 0 {
        return Err(Error::InvalidRegion("empty domain".into()));
    }
    let fine_ratio = subgrid
        .map(|s| s.ratio)
        .or_else(|| nonuniform.map(|b| b.ratio));
    let fine_everywhere = fine_ratio.map(|r| (0..3).map(|d| coarse[d] * r[d]).product());
    let nonuniform_count = match nonuniform {
        Some(b) => {
            for d in 0..3 {
                if b.extent[d] > coarse[d] {
                    return Err(Error::InvalidRegion(
                        "refined block is larger than the domain".into(),
                    ));
                }
            }
            Some(
                (0..3)
                    .map(|d| coarse[d] - b.extent[d] + b.extent[d] * b.ratio[d])
                    .product(),
            )
        }
        None => None,
    };
    let subgridded = match subgrid {
        Some(s) => {
            let hole = s.hole();
            if (0..3).any(|d| hole.hi[d] > coarse[d]) {
                return Err(Error::InvalidRegion(
                    "subgrid extends past the domain".into(),
                ));
            }
            Some(n_coarse - hole.cell_count() + s.fine_cell_count())
        }
        None => None,
    };
    Ok(CellCounts {
        coarse: n_coarse,
        fine_everywhere,
        nonuniform: nonuniform_count,
        subgridded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: [usize; 3]) -> RegionSpec {
        RegionSpec::new(n, [0.01, 0.02, 0.03]).unwrap()
    }

    #[test]
    fn node_classification_counts() {
        let s = spec([4, 5, 6]);
        let types = classify_nodes(&s);
        let count = |t: NodeType| types.iter().flatten().filter(|&&x| x == t).count();
        // Interior: n_a (n_b - 1)(n_c - 1) per component.
        let interior = 4 * 4 * 5 + 5 * 5 * 3 + 6 * 3 * 4;
        // Edge: 4 boundary edges per component, each n_a long.
        let edge = 4 * (4 + 5 + 6);
        let total: usize = Axis::ALL.iter().map(|&a| s.e_dims(a).len()).sum();
        assert_eq!(count(NodeType::Interior), interior);
        assert_eq!(count(NodeType::Edge), edge);
        assert_eq!(count(NodeType::Face), total - interior - edge);
    }

    #[test]
    fn quadrants_match_node_type_in_box() {
        let s = spec([3, 2, 4]);
        let layout = Layout::new(s);
        let types = classify_nodes(&s);
        for a in Axis::ALL {
            let d = s.e_dims(a);
            for l in 0..d.len() {
                let g = layout.e_geometry(a, d.coords(l));
                let expect = match types[a.index()][l] {
                    NodeType::Interior => (4, 0),
                    NodeType::Face => (2, 1),
                    NodeType::Edge => (1, 2),
                };
                assert_eq!((g.quadrants, g.slots.len()), expect);
            }
        }
    }

    #[test]
    fn hanging_slot_signs_follow_contour() {
        // Ez on the west face: the missing Hy is on the -x side of the
        // counter-clockwise xy contour, so it enters with a minus sign.
        let layout = Layout::new(spec([2, 2, 2]));
        let g = layout.e_geometry(Axis::Z, [0, 1, 0]);
        assert_eq!(g.slots.len(), 1);
        let s = g.slots[0];
        assert_eq!((s.normal, s.active_positive, s.sign), (Axis::X, true, -1.0));
        assert_eq!(s.halves, 2);
        assert!((s.length - 0.02).abs() < 1e-15);
        // Ex on the bottom face: missing Hy below, contour sign plus.
        let g = layout.e_geometry(Axis::X, [0, 1, 0]);
        assert_eq!((g.slots[0].normal, g.slots[0].sign), (Axis::Z, 1.0));
    }

    #[test]
    fn hanging_entry_face_order() {
        let layout = Layout::new(spec([1, 1, 1]));
        let entries = layout.hanging_entries();
        // A single cell: every E sample is a Type-3 sample with two slots.
        assert_eq!(entries.len(), 24);
        let ex: Vec<_> = entries
            .iter()
            .filter(|e| e.component == Axis::X)
            .map(|e| e.slot.sign)
            .collect();
        assert_eq!(ex, vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn hole_slots_have_hole_kind() {
        let s = spec([3, 3, 3]);
        let hole = CellBox::new([1, 1, 1], [2, 2, 2]).unwrap();
        let layout = Layout::with_hole(s, hole).unwrap();
        // Ez at the hole's south-west vertical edge: three active quadrants.
        let g = layout.e_geometry(Axis::Z, [1, 1, 1]);
        assert_eq!(g.quadrants, 3);
        assert_eq!(g.slots.len(), 2);
        assert!(g
            .slots
            .iter()
            .all(|s| s.kind == SlotKind::Hole && s.halves == 1));
        // Ez on the hole's west face interior would need a bigger hole; the
        // cell column inside the hole is empty.
        let g = layout.e_geometry(Axis::Z, [1, 1, 0]);
        assert_eq!(g.quadrants, 4);
    }

    #[test]
    fn table_cell_counts() {
        let sub = SubgridPlacement::new([10, 40, 20], [14, 17, 30], [7, 3, 7]).unwrap();
        let block = RefinedBlock {
            extent: [14, 7, 30],
            ratio: [7, 3, 7],
        };
        let c = cell_count([36, 126, 62], Some(&sub), Some(&block)).unwrap();
        assert_eq!(c.coarse, 281_232);
        assert_eq!(c.fine_everywhere, Some(41_341_104));
        assert_eq!(c.nonuniform, Some(4_065_600));
        assert_eq!(c.subgridded, Some(1_323_672));
    }

    #[test]
    fn ratio_validation() {
        assert!(matches!(
            SubgridPlacement::new([0; 3], [1; 3], [4, 3, 3]),
            Err(Error::InvalidRatio(4))
        ));
        assert!(matches!(
            SubgridPlacement::new([0; 3], [1; 3], [1, 3, 3]),
            Err(Error::InvalidRatio(1))
        ));
    }

    #[test]
    fn alignment() {
        assert_eq!(align_to_cells("x", 0.0014, 0.0001).unwrap(), 14);
        assert!(matches!(
            align_to_cells("x", 0.00145, 0.0001),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn random_materials_are_reproducible_and_in_range() {
        let layout = Layout::new(spec([3, 4, 5]));
        let eps = Range::new(crate::EPS0, 3.0 * crate::EPS0);
        let sig = Range::new(0.0, 5e-5);
        let a = assign_random_materials(&layout, eps, sig, crate::MU0, 7).unwrap();
        let b = assign_random_materials(&layout, eps, sig, crate::MU0, 7).unwrap();
        let c = assign_random_materials(&layout, eps, sig, crate::MU0, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for v in a.eps.iter().flatten() {
            assert!(*v >= eps.lo && *v <= eps.hi);
        }
        for v in a.sigma.iter().flatten() {
            assert!(*v >= 0.0 && *v <= 5e-5);
        }
    }

    #[test]
    fn invalid_material_range() {
        let layout = Layout::new(spec([1, 1, 1]));
        let r = assign_random_materials(&layout, Range::new(2.0, 1.0), Range::fixed(0.0), 1.0, 0);
        assert!(matches!(r, Err(Error::InvalidRange { .. })));
        let r = assign_random_materials(&layout, Range::fixed(1.0), Range::new(-1.0, 0.0), 1.0, 0);
        assert!(matches!(r, Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn edge_material_uses_lowest_index_cell() {
        let s = spec([2, 2, 1]);
        let layout = Layout::new(s);
        let mut cells = CellMaterials::uniform(s.cells, 0.0, 0.0, 1.0);
        for (l, e) in cells.eps.iter_mut().enumerate() {
            *e = 10.0 + l as f64;
        }
        let m = MaterialGrid::from_cells(&layout, &cells).unwrap();
        // Ez at the central node touches all four cells; the lowest index is 0.
        let d = s.e_dims(Axis::Z);
        assert_eq!(m.eps[2][d.index([1, 1, 0])], 10.0);
        // Ez at (2, 2) touches only cell 3.
        assert_eq!(m.eps[2][d.index([2, 2, 0])], 13.0);
    }

    fn layouts() -> impl Strategy<Value = Layout> {
        (1usize..5, 1usize..5, 1usize..5, any::<bool>(), any::<u64>()).prop_map(
            |(nx, ny, nz, holed, seed)| {
                let s = RegionSpec::new([nx + 1, ny + 1, nz + 1], [0.01, 0.013, 0.007]).unwrap();
                if holed {
                    let mut lo = [0; 3];
                    let mut hi = [0; 3];
                    let mut x = seed;
                    for d in 0..3 {
                        let n = s.cells[d];
                        let a = (x % n as u64) as usize;
                        x /= 7;
                        let b = a + 1 + (x % (n - a) as u64) as usize;
                        x /= 7;
                        lo[d] = a;
                        hi[d] = b.min(n);
                    }
                    let hole = CellBox::new(lo, hi).unwrap();
                    Layout::with_hole(s, hole).unwrap_or(Layout::new(s))
                } else {
                    Layout::new(s)
                }
            },
        )
    }

    proptest! {
        #[test]
        fn dual_volumes_tile_active_region(layout in layouts()) {
            let s = layout.spec;
            let vol = layout.active_cell_count() as f64 * s.cell_volume();
            for a in Axis::ALL {
                let ed = s.e_dims(a);
                let ve: f64 = (0..ed.len())
                    .map(|l| layout.e_area(a, ed.coords(l)) * s.spacing[a.index()])
                    .sum();
                prop_assert!((ve - vol).abs() < 1e-12 * vol);
                let hd = s.h_dims(a);
                let area = s.spacing[a.next().index()] * s.spacing[a.prev().index()];
                let vh: f64 = (0..hd.len())
                    .map(|l| layout.h_length(a, hd.coords(l)) * area)
                    .sum();
                prop_assert!((vh - vol).abs() < 1e-12 * vol);
            }
        }

        #[test]
        fn slot_lengths_match_missing_contour(layout in layouts()) {
            // Every E sample with a partial dual face has hanging slots whose
            // half counts equal the number of active/inactive segment pairs.
            let s = layout.spec;
            for a in Axis::ALL {
                let ed = s.e_dims(a);
                for l in 0..ed.len() {
                    let g = layout.e_geometry(a, ed.coords(l));
                    let halves: u8 = g.slots.iter().map(|x| x.halves).sum();
                    match g.quadrants {
                        0 | 4 => prop_assert_eq!(halves, 0),
                        _ => prop_assert!(halves == 2),
                    }
                }
            }
        }

        #[test]
        fn node_types_partition_samples(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
            let s = RegionSpec::new([nx, ny, nz], [1.0; 3]).unwrap();
            let t = classify_nodes(&s);
            for a in Axis::ALL {
                prop_assert_eq!(t[a.index()].len(), s.e_dims(a).len());
            }
        }
    }
}
