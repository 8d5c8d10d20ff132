//! Time stepping of a scenario, result files, checks and waveform comparison.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cpml::Cpml;
use super::waveform::{dft_extract, Pulse};
use super::{BoundaryKind, FieldComponent, ProbeLineSpec, Scenario, SourceLocation};
use crate::dissipation::{
    check_theorem1, classical_cfl, generalized_cfl, iteration_matrix_from_map, spectral_radius,
    spectral_radius_oracle, storage_explicit, EnergyLedger, Theorem1Report, DENSE_SIZE_GUARD,
    RHO_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::kernels::{FaceBc, FieldState, SampleRole, YeeGrid};
use crate::mesh::{
    random_cell_materials, Axis, CellCounts, CellMaterials, Layout, MaterialGrid, Range,
};
use crate::operators::SystemMatrices;
use crate::subgrid::Composite;
use crate::{EPS0, MU0};

/// Grids smaller than this run their kernels serially.
const PARALLEL_MIN_CELLS: usize = 20_000;
/// Full-state finiteness check interval, in steps.
const FINITE_CHECK_INTERVAL: usize = 64;

/// Overrides applied on top of the scenario file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub steps: Option<usize>,
    /// Fraction of the governing CFL limit; values at or above one are
    /// accepted here for negative-control runs.
    pub dt_fraction: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub enum Engine {
    Single(YeeGrid),
    Composite(Box<Composite>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridId {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Target {
    grid: GridId,
    field: FieldComponent,
    index: usize,
    coords: [usize; 3],
}

#[derive(Clone, Debug)]
struct BoundSource {
    pulse: Pulse,
    /// `(grid, axis, sample, l A', J per unit amplitude)`
    samples: Vec<(GridId, Axis, usize, f64, f64)>,
}

#[derive(Clone, Debug)]
struct BoundProbe {
    name: String,
    target: Target,
    average: bool,
}

#[derive(Clone, Debug)]
struct BoundLine {
    spec: ProbeLineSpec,
    targets: Vec<Target>,
    positions: Vec<[f64; 3]>,
}

/// Recorded probe time series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub name: String,
    pub field: String,
    pub grid: GridId,
    /// Sample indices within its grid.
    pub location: [usize; 3],
    pub time: Vec<f64>,
    pub values: Vec<f64>,
}

/// Spectrum of a probe line at one frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct LineRecord {
    pub name: String,
    pub field: String,
    pub frequency: f64,
    pub positions: Vec<[f64; 3]>,
    /// Distance from the line start.
    pub distance: Vec<f64>,
    /// `Δt` times the single-bin sum, so runs with different steps compare.
    pub values: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergySummary {
    pub passed: bool,
    pub tolerance: f64,
    pub initial_storage: f64,
    pub final_storage: f64,
    pub max_residual: f64,
    pub max_abs_residual: f64,
    pub flagged_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub name: String,
    pub file: String,
    pub max_abs: f64,
}

/// Machine-readable run summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub dt_fraction: f64,
    pub classical_cfl_coarse: f64,
    pub classical_cfl_fine: Option<f64>,
    pub cells: CellCounts,
    pub unknowns: usize,
    pub patches: usize,
    pub wall_time_s: f64,
    pub energy: Option<EnergySummary>,
    pub probes: Vec<ProbeSummary>,
    pub lines: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub probes: Vec<ProbeRecord>,
    pub lines: Vec<LineRecord>,
    pub ledger: Option<EnergyLedger>,
    pub summary: Summary,
}

/// A scenario bound to grids and ready to step.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub scenario: Scenario,
    pub engine: Engine,
    pub dt: f64,
    pub dt_fraction: f64,
    pub seed: u64,
    pub steps: usize,
    pub classical_coarse: f64,
    pub classical_fine: Option<f64>,
    pub coarse: FieldState,
    pub fine: Option<FieldState>,
    cpml: Option<Cpml>,
    sources: Vec<BoundSource>,
    probes: Vec<BoundProbe>,
    lines: Vec<BoundLine>,
}

fn to_face_bc(k: BoundaryKind) -> FaceBc {
    match k {
        BoundaryKind::Pmc => FaceBc::Pmc,
        BoundaryKind::Pec | BoundaryKind::Cpml => FaceBc::Pec,
    }
}

/// Per-cell materials of a grid whose corner sits at `origin` (meters).
fn cell_materials(
    sc: &Scenario,
    cells: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    seed: u64,
    stream: u64,
) -> Result<CellMaterials> {
    let bg = sc.materials.background;
    let mut cm = CellMaterials::uniform(cells, bg.eps_r * EPS0, bg.sigma, bg.mu_r * MU0);
    if let Some(r) = sc.materials.random {
        let rm = random_cell_materials(
            cells,
            Range::new(r.eps_r[0] * EPS0, r.eps_r[1] * EPS0),
            Range::new(r.sigma[0], r.sigma[1]),
            bg.mu_r * MU0,
            seed,
            stream,
        )?;
        cm.eps = rm.eps;
        cm.sigma = rm.sigma;
    }
    if !sc.materials.boxes.is_empty() {
        for l in 0..cm.dims.len() {
            let p = cm.dims.coords(l);
            let c = [0, 1, 2].map(|k| origin[k] + (p[k] as f64 + 0.5) * spacing[k]);
            for b in &sc.materials.boxes {
                if (0..3).all(|k| c[k] >= b.lo[k] && c[k] < b.hi[k]) {
                    cm.eps[l] = b.medium.eps_r * EPS0;
                    cm.sigma[l] = b.medium.sigma;
                    cm.mu[l] = b.medium.mu_r * MU0;
                }
            }
        }
    }
    Ok(cm)
}

fn random_grid_state(g: &YeeGrid, amp: f64, rng: &mut ChaCha8Rng) -> FieldState {
    let mut st = FieldState::zeros(&g.layout);
    for a in Axis::ALL {
        for (l, r) in g.e_role(a).iter().enumerate() {
            if *r == SampleRole::Regular {
                st.e[a.index()][l] = amp * rng.gen_range(-1.0..1.0);
            }
        }
        for (l, len) in g.h_length(a).iter().enumerate() {
            if *len > 0.0 {
                st.h[a.index()][l] = amp * rng.gen_range(-1.0..1.0);
            }
        }
    }
    st
}

impl Simulation {
    pub fn new(sc: &Scenario, opts: &RunOptions) -> Result<Self> {
        let seed = opts.seed.unwrap_or(sc.seed);
        let steps = opts.steps.unwrap_or(sc.steps);
        let frac = opts.dt_fraction.unwrap_or(sc.dt_fraction);
        if !(frac.is_finite() && frac > 0.0) {
            return Err(Error::Config {
                field: "dt_fraction".into(),
                message: format!("must be positive (got {frac})"),
            });
        }
        let spec = sc.spec;
        let faces = sc.faces.map(to_face_bc);
        let cm = cell_materials(sc, spec.cells, spec.spacing, [0.0; 3], seed, 0)?;
        let classical_coarse = classical_cfl(spec.spacing, cm.min_eps(), cm.min_mu());
        let (engine, classical_fine, dt) = match sc.subgrid {
            None => {
                let dt = frac * classical_coarse;
                let layout = Layout::new(spec);
                let m = MaterialGrid::from_cells(&layout, &cm)?;
                (
                    Engine::Single(YeeGrid::new(layout, m, faces, dt)?),
                    None,
                    dt,
                )
            }
            Some(pl) => {
                let fspec = pl.fine_spec(&spec)?;
                let origin = [0, 1, 2].map(|k| pl.origin[k] as f64 * spec.spacing[k]);
                let fm = cell_materials(sc, fspec.cells, fspec.spacing, origin, seed, 1)?;
                let cf = classical_cfl(fspec.spacing, fm.min_eps(), fm.min_mu());
                let dt = frac * cf.min(classical_coarse);
                let cmp = Composite::new(spec, pl, &cm, &fm, faces, dt)?;
                (Engine::Composite(Box::new(cmp)), Some(cf), dt)
            }
        };
        let mut sim = Simulation {
            scenario: sc.clone(),
            coarse: FieldState::zeros(&spec_layout(&engine, GridId::Coarse)),
            fine: match &engine {
                Engine::Composite(c) => Some(FieldState::zeros(&c.fine.layout)),
                Engine::Single(_) => None,
            },
            engine,
            dt,
            dt_fraction: frac,
            seed,
            steps,
            classical_coarse,
            classical_fine,
            cpml: None,
            sources: Vec::new(),
            probes: Vec::new(),
            lines: Vec::new(),
        };
        match &mut sim.engine {
            Engine::Single(g) => g.parallel = spec.cell_count() >= PARALLEL_MIN_CELLS,
            Engine::Composite(c) => {
                c.coarse.parallel = c.coarse.layout.spec.cell_count() >= PARALLEL_MIN_CELLS;
                c.fine.parallel = c.fine.layout.spec.cell_count() >= PARALLEL_MIN_CELLS;
            }
        }
        let pml_faces = sc.faces.map(|k| k == BoundaryKind::Cpml);
        if pml_faces.iter().any(|&b| b) {
            sim.cpml = Some(Cpml::new(sim.grid(GridId::Coarse), pml_faces, &sc.cpml));
        }
        sim.bind_sources()?;
        for p in &sc.probes {
            let target = sim.locate(p.field, p.position, "probe")?;
            sim.probes.push(BoundProbe {
                name: p.name.clone(),
                target,
                average: p.average && p.field.magnetic,
            });
        }
        for ls in &sc.lines {
            let mut targets = Vec::new();
            let mut positions = Vec::new();
            for i in 0..ls.count {
                let s = i as f64 / (ls.count - 1) as f64;
                let pos = [0, 1, 2].map(|k| ls.start[k] + s * (ls.end[k] - ls.start[k]));
                targets.push(sim.locate(ls.field, pos, "probe_line")?);
                positions.push(pos);
            }
            sim.lines.push(BoundLine {
                spec: ls.clone(),
                targets,
                positions,
            });
        }
        if sc.initial_random > 0.0 {
            sim.randomize(sc.initial_random);
        }
        Ok(sim)
    }

    pub fn grid(&self, id: GridId) -> &YeeGrid {
        match (&self.engine, id) {
            (Engine::Single(g), _) => g,
            (Engine::Composite(c), GridId::Coarse) => &c.coarse,
            (Engine::Composite(c), GridId::Fine) => &c.fine,
        }
    }

    fn state(&self, id: GridId) -> &FieldState {
        match id {
            GridId::Fine => self.fine.as_ref().unwrap_or(&self.coarse),
            GridId::Coarse => &self.coarse,
        }
    }

    /// Random state that satisfies every interface constraint.
    pub fn randomize(&mut self, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        match &self.engine {
            Engine::Single(g) => self.coarse = random_grid_state(g, amp, &mut rng),
            Engine::Composite(c) => {
                let dofs = c.dofs();
                let z: Vec<f64> = (0..dofs.len())
                    .map(|_| amp * rng.gen_range(-1.0..1.0))
                    .collect();
                let (cs, fs) = dofs.scatter(c, &z);
                self.coarse = cs;
                self.fine = Some(fs);
            }
        }
    }

    fn fine_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let pl = self.scenario.subgrid?;
        let d = self.scenario.spec.spacing;
        let h = pl.hole();
        Some((
            [0, 1, 2].map(|k| h.lo[k] as f64 * d[k]),
            [0, 1, 2].map(|k| h.hi[k] as f64 * d[k]),
        ))
    }

    /// Nearest sample of `field` to `pos` on one grid.
    fn nearest(&self, id: GridId, field: FieldComponent, pos: [f64; 3]) -> Target {
        let g = self.grid(id);
        let spec = g.layout.spec;
        let origin = match id {
            GridId::Fine => self.fine_box().map(|b| b.0).unwrap_or([0.0; 3]),
            GridId::Coarse => [0.0; 3],
        };
        let a = field.axis.index();
        let mut p = [0usize; 3];
        for k in 0..3 {
            let x = (pos[k] - origin[k]) / spec.spacing[k];
            let n = spec.cells[k];
            let along = (k == a) != field.magnetic;
            p[k] = if along {
                (x.floor().max(0.0) as usize).min(n - 1)
            } else {
                (x.round().max(0.0) as usize).min(n)
            };
        }
        let dims = if field.magnetic {
            g.h_dims(field.axis)
        } else {
            g.e_dims(field.axis)
        };
        Target {
            grid: id,
            field,
            index: dims.index(p),
            coords: p,
        }
    }

    fn usable(&self, t: &Target) -> bool {
        let g = self.grid(t.grid);
        if t.field.magnetic {
            g.h_length(t.field.axis)[t.index] > 0.0
        } else {
            g.e_role(t.field.axis)[t.index] != SampleRole::Inactive
        }
    }

    fn strictly_inside_fine(&self, pos: [f64; 3]) -> bool {
        match self.fine_box() {
            Some((lo, hi)) => (0..3).all(|k| {
                let tol = 1e-9 * self.scenario.spec.spacing[k];
                pos[k] > lo[k] + tol && pos[k] < hi[k] - tol
            }),
            None => false,
        }
    }

    fn locate(&self, field: FieldComponent, pos: [f64; 3], what: &str) -> Result<Target> {
        let first = if self.strictly_inside_fine(pos) {
            GridId::Fine
        } else {
            GridId::Coarse
        };
        let t = self.nearest(first, field, pos);
        if self.usable(&t) {
            return Ok(t);
        }
        if self.fine.is_some() {
            let other = if first == GridId::Fine {
                GridId::Coarse
            } else {
                GridId::Fine
            };
            let t = self.nearest(other, field, pos);
            if self.usable(&t) {
                return Ok(t);
            }
        }
        Err(Error::Config {
            field: what.into(),
            message: format!("no active {} sample near {:?}", field.name(), pos),
        })
    }

    fn bind_sources(&mut self) -> Result<()> {
        let mut bound = Vec::new();
        for (i, s) in self.scenario.sources.iter().enumerate() {
            let mut samples = Vec::new();
            match s.location {
                SourceLocation::Point {
                    component,
                    position,
                } => {
                    let fc = FieldComponent {
                        magnetic: false,
                        axis: component,
                    };
                    let t = self.locate(fc, position, "source")?;
                    let g = self.grid(t.grid);
                    if g.e_role(component)[t.index] != SampleRole::Regular {
                        return Err(Error::Config {
                            field: format!("source[{i}].position"),
                            message: "nearest sample lies on a wall or the subgrid interface"
                                .into(),
                        });
                    }
                    samples.push((
                        t.grid,
                        component,
                        t.index,
                        self.sample_weight(t.grid, component, t.index),
                        1.0,
                    ));
                }
                SourceLocation::Sheet {
                    normal,
                    at,
                    direction,
                } => {
                    let mut grids = vec![(GridId::Coarse, 0.0)];
                    if let Some((lo, hi)) = self.fine_box() {
                        let k = normal.index();
                        if at > lo[k] && at < hi[k] {
                            grids.push((GridId::Fine, lo[k]));
                        }
                    }
                    for (id, off) in grids {
                        let g = self.grid(id);
                        let spec = g.layout.spec;
                        let k = normal.index();
                        let plane = (((at - off) / spec.spacing[k]).round().max(0.0) as usize)
                            .min(spec.cells[k]);
                        let dims = g.e_dims(direction);
                        for l in 0..dims.len() {
                            if dims.coords(l)[k] == plane
                                && g.e_role(direction)[l] == SampleRole::Regular
                            {
                                samples.push((
                                    id,
                                    direction,
                                    l,
                                    self.sample_weight(id, direction, l),
                                    1.0 / spec.spacing[k],
                                ));
                            }
                        }
                    }
                    if samples.is_empty() {
                        return Err(Error::Config {
                            field: format!("source[{i}]"),
                            message: "current sheet covers no active samples".into(),
                        });
                    }
                }
            }
            bound.push(BoundSource {
                pulse: s.pulse,
                samples,
            });
        }
        self.sources = bound;
        Ok(())
    }

    fn sample_weight(&self, id: GridId, a: Axis, l: usize) -> f64 {
        let g = self.grid(id);
        g.layout.spec.spacing[a.index()] * g.e_area(a)[l]
    }

    /// Stored energy of the whole state.
    pub fn storage(&self) -> f64 {
        match &self.engine {
            Engine::Single(g) => storage_explicit(g, &self.coarse),
            Engine::Composite(c) => {
                c.storage(&self.coarse, self.fine.as_ref().expect("fine state"))
            }
        }
    }

    pub fn unknowns(&self) -> usize {
        match &self.engine {
            Engine::Single(g) => {
                let (e, h) = g.active_counts();
                e + h
            }
            Engine::Composite(c) => {
                let (e0, h0) = c.coarse.active_counts();
                let (e1, h1) = c.fine.active_counts();
                e0 + h0 + e1 + h1
            }
        }
    }

    /// Advance from step `n` to `n + 1`; returns the energy delivered by
    /// the sources.
    pub fn step(&mut self, n: usize) -> f64 {
        let dt = self.dt;
        let mut before = Vec::new();
        for s in &self.sources {
            for &(id, a, l, _, _) in &s.samples {
                before.push(self.state(id).e[a.index()][l]);
            }
        }
        let fine = &mut self.fine;
        match &self.engine {
            Engine::Single(g) => {
                g.step_h(&mut self.coarse);
                if let Some(p) = &mut self.cpml {
                    p.correct_h(&mut self.coarse);
                }
                g.step_e(&mut self.coarse);
                if let Some(p) = &mut self.cpml {
                    p.correct_e(&mut self.coarse);
                }
            }
            Engine::Composite(c) => {
                let f = fine.as_mut().expect("fine state");
                c.coarse.step_h(&mut self.coarse);
                c.fine.step_h(f);
                if let Some(p) = &mut self.cpml {
                    p.correct_h(&mut self.coarse);
                }
                c.coarse.step_e(&mut self.coarse);
                c.fine.step_e(f);
                if let Some(p) = &mut self.cpml {
                    p.correct_e(&mut self.coarse);
                }
            }
        }
        let t = (n as f64 + 0.5) * dt;
        let mut supply = 0.0;
        let mut k = 0;
        for s in &self.sources {
            let j = s.pulse.value(t);
            for &(id, a, l, w, scale) in &s.samples {
                let (g, st) = match (&self.engine, id) {
                    (Engine::Single(g), _) => (g, &mut self.coarse),
                    (Engine::Composite(c), GridId::Coarse) => (&c.coarse, &mut self.coarse),
                    (Engine::Composite(c), GridId::Fine) => {
                        (&c.fine, self.fine.as_mut().expect("fine state"))
                    }
                };
                let j = j * scale;
                g.add_current(st, a, l, j);
                supply -= dt * w * j * 0.5 * (before[k] + st.e[a.index()][l]);
                k += 1;
            }
        }
        if let Engine::Composite(c) = &self.engine {
            c.update_interface(&mut self.coarse, self.fine.as_mut().expect("fine state"));
        }
        supply
    }

    fn value(&self, t: &Target) -> f64 {
        let st = self.state(t.grid);
        if t.field.magnetic {
            st.h[t.field.axis.index()][t.index]
        } else {
            st.e[t.field.axis.index()][t.index]
        }
    }

    fn is_finite(&self) -> bool {
        self.coarse.is_finite() && self.fine.as_ref().is_none_or(|f| f.is_finite())
    }

    /// Step the configured number of times, sampling probes after each step.
    pub fn run(&mut self) -> Result<RunOutput> {
        let start = Instant::now();
        let steps = self.steps;
        let dt = self.dt;
        let mut series: Vec<Vec<f64>> = vec![Vec::with_capacity(steps); self.probes.len()];
        let mut prev_h: Vec<f64> = self.probes.iter().map(|p| self.value(&p.target)).collect();
        let mut line_series: Vec<Vec<Vec<f64>>> = self
            .lines
            .iter()
            .map(|l| vec![Vec::with_capacity(steps); l.targets.len()])
            .collect();
        let audit = self.scenario.audit;
        let mut ledger = audit
            .energy
            .then(|| EnergyLedger::new(self.storage(), audit.tolerance));
        let mut stored = ledger.as_ref().map_or(0.0, |l| l.initial_storage);
        let mut env_max = vec![0.0f64; self.probes.len()];

        for n in 0..steps {
            let s = self.step(n);
            let step = n + 1;
            if let Some(l) = &mut ledger {
                let after = self.storage();
                l.record(step, stored, after, s);
                stored = after;
            }
            for (i, p) in self.probes.iter().enumerate() {
                let v = self.value(&p.target);
                if !v.is_finite() {
                    return Err(Error::Instability {
                        step,
                        reason: format!("probe `{}` is not finite", p.name),
                    });
                }
                if let Some((factor, window)) = audit.envelope {
                    if step <= window {
                        env_max[i] = env_max[i].max(v.abs());
                    } else if v.abs() > factor * env_max[i] && env_max[i] > 0.0 {
                        return Err(Error::Instability {
                            step,
                            reason: format!("probe `{}` left the {factor}x envelope", p.name),
                        });
                    }
                }
                let rec = if p.average { 0.5 * (prev_h[i] + v) } else { v };
                prev_h[i] = v;
                series[i].push(rec);
            }
            for (li, l) in self.lines.iter().enumerate() {
                for (ti, t) in l.targets.iter().enumerate() {
                    line_series[li][ti].push(self.value(t));
                }
            }
            if (step % FINITE_CHECK_INTERVAL == 0 || step == steps) && !self.is_finite() {
                return Err(Error::Instability {
                    step,
                    reason: "non-finite field value".into(),
                });
            }
        }

        let probes: Vec<ProbeRecord> = self
            .probes
            .iter()
            .zip(series)
            .map(|(p, values)| {
                let shift = if !p.target.field.magnetic {
                    0.0
                } else if p.average {
                    1.0
                } else {
                    0.5
                };
                ProbeRecord {
                    name: p.name.clone(),
                    field: p.target.field.name(),
                    grid: p.target.grid,
                    location: p.target.coords,
                    time: (1..=steps).map(|s| (s as f64 - shift) * dt).collect(),
                    values,
                }
            })
            .collect();
        let lines: Vec<LineRecord> = self
            .lines
            .iter()
            .zip(line_series)
            .map(|(l, ser)| LineRecord {
                name: l.spec.name.clone(),
                field: l.spec.field.name(),
                frequency: l.spec.frequency,
                distance: l
                    .positions
                    .iter()
                    .map(|p| {
                        (0..3)
                            .map(|k| (p[k] - l.positions[0][k]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect(),
                positions: l.positions.clone(),
                values: ser
                    .iter()
                    .map(|s| dft_extract(s, dt, l.spec.frequency) * dt)
                    .collect(),
            })
            .collect();
        let energy = ledger.as_ref().map(|l| EnergySummary {
            passed: l.passed(),
            tolerance: l.tolerance,
            initial_storage: l.initial_storage,
            final_storage: l.entries.last().map_or(l.initial_storage, |e| e.storage),
            max_residual: l.max_residual(),
            max_abs_residual: l.max_abs_residual(),
            flagged_steps: l.flagged.len(),
        });
        let summary = Summary {
            name: self.scenario.name.clone(),
            seed: self.seed,
            steps,
            dt,
            dt_fraction: self.dt_fraction,
            classical_cfl_coarse: self.classical_coarse,
            classical_cfl_fine: self.classical_fine,
            cells: self.scenario.cell_counts()?,
            unknowns: self.unknowns(),
            patches: match &self.engine {
                Engine::Composite(c) => c.patches.len(),
                Engine::Single(_) => 0,
            },
            wall_time_s: start.elapsed().as_secs_f64(),
            energy,
            probes: probes
                .iter()
                .map(|p| ProbeSummary {
                    name: p.name.clone(),
                    file: probe_file(&p.name),
                    max_abs: p.values.iter().fold(0.0, |m, v| m.max(v.abs())),
                })
                .collect(),
            lines: lines.iter().map(|l| line_file(&l.name)).collect(),
        };
        Ok(RunOutput {
            probes,
            lines,
            ledger,
            summary,
        })
    }
}

fn spec_layout(engine: &Engine, id: GridId) -> Layout {
    match (engine, id) {
        (Engine::Single(g), _) => g.layout.clone(),
        (Engine::Composite(c), GridId::Coarse) => c.coarse.layout.clone(),
        (Engine::Composite(c), GridId::Fine) => c.fine.layout.clone(),
    }
}

pub fn probe_file(name: &str) -> String {
    format!("probe_{name}.csv")
}

pub fn line_file(name: &str) -> String {
    format!("line_{name}.csv")
}

/// Build and run a scenario.
pub fn run(sc: &Scenario, opts: &RunOptions) -> Result<RunOutput> {
    Simulation::new(sc, opts)?.run()
}

impl RunOutput {
    /// Write probe and line CSVs, the energy ledger and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &self.probes {
            let mut w = csv::Writer::from_path(dir.join(probe_file(&p.name)))?;
            w.write_record(["step", "t", "value"])?;
            for (i, (t, v)) in p.time.iter().zip(&p.values).enumerate() {
                w.write_record([(i + 1).to_string(), format!("{t:e}"), format!("{v:e}")])?;
            }
            w.flush()?;
        }
        for l in &self.lines {
            let mut w = csv::Writer::from_path(dir.join(line_file(&l.name)))?;
            w.write_record(["index", "position", "x", "y", "z", "value", "re", "im"])?;
            for (i, (p, z)) in l.positions.iter().zip(&l.values).enumerate() {
                w.write_record([
                    i.to_string(),
                    format!("{:e}", l.distance[i]),
                    format!("{:e}", p[0]),
                    format!("{:e}", p[1]),
                    format!("{:e}", p[2]),
                    format!("{:e}", z.norm()),
                    format!("{:e}", z.re),
                    format!("{:e}", z.im),
                ])?;
            }
            w.flush()?;
        }
        if let Some(l) = &self.ledger {
            l.write_csv(&dir.join("energy.csv"))?;
        }
        let mut f = std::fs::File::create(dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.summary)?;
        writeln!(f)?;
        Ok(())
    }
}

/// Difference between two waveform or profile files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// `‖a - b‖ / ‖b‖`, with `b` as the reference.
    pub rel_l2: f64,
    pub max_abs: f64,
    pub points: usize,
}

fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let xi = find("t").or_else(|| find("position")).unwrap_or(0);
    let yi = find("value")
        .ok_or_else(|| Error::Parse(format!("{}: no `value` column", path.display())))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| {
                    Error::Parse(format!("{}: bad number in row {:?}", path.display(), rec))
                })
        };
        xs.push(num(xi)?);
        ys.push(num(yi)?);
    }
    if xs.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    Ok((xs, ys))
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    let i = xs.partition_point(|&v| v <= x);
    if i == 0 {
        return Some(ys[0]);
    }
    if i >= xs.len() {
        return Some(ys[xs.len() - 1]);
    }
    let (x0, x1) = (xs[i - 1], xs[i]);
    if x1 == x0 {
        return Some(ys[i - 1]);
    }
    Some(ys[i - 1] + (ys[i] - ys[i - 1]) * (x - x0) / (x1 - x0))
}

/// Compare two series; `b` is resampled onto `a`'s abscissa when they differ.
pub fn compare_series(xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64]) -> Comparison {
    let same = xa.len() == xb.len()
        && xa
            .iter()
            .zip(xb)
            .all(|(p, q)| (p - q).abs() <= 1e-9 * p.abs().max(q.abs()).max(f64::MIN_POSITIVE));
    let pairs: Vec<(f64, f64)> = if same {
        ya.iter().copied().zip(yb.iter().copied()).collect()
    } else {
        xa.iter()
            .zip(ya)
            .filter_map(|(&x, &y)| interpolate(xb, yb, x).map(|v| (y, v)))
            .collect()
    };
    let diff: f64 = pairs
        .iter()
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = pairs.iter().map(|(_, b)| b * b).sum::<f64>().sqrt();
    let rel_l2 = if norm > 0.0 {
        diff / norm
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Comparison {
        rel_l2,
        max_abs: pairs.iter().fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        points: pairs.len(),
    }
}

/// Compare two CSV files written by a run.
pub fn compare_csv(a: &Path, b: &Path) -> Result<Comparison> {
    let (xa, ya) = read_series(a)?;
    let (xb, yb) = read_series(b)?;
    Ok(compare_series(&xa, &ya, &xb, &yb))
}

/// Options of the dissipativity check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub classical_only: bool,
    pub size_guard: usize,
    pub dt_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            classical_only: false,
            size_guard: DENSE_SIZE_GUARD,
            dt_fraction: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsystemCheck {
    pub name: String,
    pub unknowns: usize,
    pub classical_limit: f64,
    pub generalized_limit: Option<f64>,
    pub theorem1: Option<Theorem1Report>,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub dt: f64,
    pub subsystems: Vec<SubsystemCheck>,
    /// Largest relative interface supply over random constraint-consistent
    /// boundary values.
    pub interface_supply: Option<f64>,
    pub oracle_rho: Option<f64>,
    pub passed: bool,
    pub notes: Vec<String>,
}

/// Relative interface supply above which the interface check fails.
const INTERFACE_TOLERANCE: f64 = 1e-13;

fn check_grid(name: &str, g: &YeeGrid, opts: &CheckOptions) -> Result<SubsystemCheck> {
    let spec = g.layout.spec;
    let eps_min = g
        .materials
        .eps
        .iter()
        .flatten()
        .filter(|v| **v > 0.0)
        .fold(f64::INFINITY, |m, &v| m.min(v));
    let mu_min = g
        .materials
        .mu
        .iter()
        .flatten()
        .filter(|v| **v > 0.0)
        .fold(f64::INFINITY, |m, &v| m.min(v));
    let classical = classical_cfl(spec.spacing, eps_min, mu_min);
    let (ne, nh) = g.active_counts();
    let mut out = SubsystemCheck {
        name: name.into(),
        unknowns: ne + nh,
        classical_limit: classical,
        generalized_limit: None,
        theorem1: None,
        passed: g.dt <= classical,
        note: None,
    };
    if opts.classical_only {
        return Ok(out);
    }
    let sys = SystemMatrices::assemble(g)?;
    out.generalized_limit = Some(generalized_cfl(&sys)?.generalized_limit);
    match check_theorem1(&sys, opts.size_guard) {
        Ok(rep) => {
            out.passed = rep.all_pass();
            out.theorem1 = Some(rep);
        }
        Err(Error::SizeGuard { unknowns, limit }) => {
            out.note = Some(format!(
                "{unknowns} unknowns exceed the size guard {limit}; classical bound only"
            ));
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Check the dissipativity conditions of every subsystem at the configured
/// time step.
pub fn check(sc: &Scenario, opts: &CheckOptions) -> Result<CheckReport> {
    let ro = RunOptions {
        steps: Some(1),
        dt_fraction: opts.dt_fraction,
        seed: opts.seed,
    };
    let sim = Simulation::new(sc, &ro)?;
    let mut subsystems = Vec::new();
    let mut notes = Vec::new();
    let mut interface_supply = None;
    let mut oracle_rho = None;
    if sc.faces.contains(&BoundaryKind::Cpml) {
        notes.push("absorbing layers are checked as their PEC-backed grid".into());
    }
    match &sim.engine {
        Engine::Single(g) => {
            subsystems.push(check_grid("grid", g, opts)?);
            if !opts.classical_only {
                let sys = SystemMatrices::assemble(g)?;
                match spectral_radius_oracle(&sys, opts.size_guard) {
                    Ok(o) => oracle_rho = Some(o.rho),
                    Err(Error::SizeGuard { .. }) => notes.push("oracle skipped: size guard".into()),
                    Err(e) => return Err(e),
                }
            }
        }
        Engine::Composite(c) => {
            subsystems.push(check_grid("coarse", &c.coarse, opts)?);
            subsystems.push(check_grid("fine", &c.fine, opts)?);
            let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
            let mut worst: f64 = 0.0;
            for p in &c.patches {
                let cl = c.coarse.layout.spec.spacing[p.component.index()];
                let fl = c.fine.layout.spec.spacing[p.component.index()];
                for _ in 0..4 {
                    let v = p.random_values(&mut rng);
                    let (net, mag) = p.supply_rate(&v, sim.dt, cl, fl);
                    // Clamped patches carry only round-off; floor the scale
                    // at one term with unit field values.
                    worst = worst.max(net.abs() / mag.max(sim.dt * cl * cl));
                }
            }
            interface_supply = Some(worst);
            if !opts.classical_only {
                let dofs = c.dofs();
                match iteration_matrix_from_map(
                    dofs.len(),
                    opts.size_guard,
                    |z| Ok(dofs.step(c, z)),
                ) {
                    Ok(m) => oracle_rho = Some(spectral_radius(&m)),
                    Err(Error::SizeGuard { .. }) => notes.push("oracle skipped: size guard".into()),
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let passed = subsystems.iter().all(|s| s.passed)
        && interface_supply.is_none_or(|v| v <= INTERFACE_TOLERANCE)
        && oracle_rho.is_none_or(|r| r <= 1.0 + RHO_TOLERANCE);
    Ok(CheckReport {
        dt: sim.dt,
        subsystems,
        interface_supply,
        oracle_rho,
        passed,
        notes,
    })
}
