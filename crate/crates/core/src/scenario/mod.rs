//! Scenario configuration, sources, probes, runs and result files.
//!
//! A scenario is a TOML document. Lengths are in meters, frequencies in Hz
//! and conductivities in S/m; positions are measured from the domain corner.
//!
//! ```toml
//! name = "cavity"
//! seed = 1
//!
//! [domain]
//! size = [0.06, 0.06, 0.06]
//! spacing = [0.01, 0.01, 0.01]
//!
//! [boundary]
//! default = "pec"          # pec | pmc | cpml, per face: x_min ... z_max
//!
//! [subgrid]
//! origin = [0.02, 0.02, 0.02]
//! size = [0.02, 0.02, 0.02]
//! ratio = [3, 3, 3]
//!
//! [materials]
//! eps_r = 1.0
//! [materials.random]
//! eps_r = [1.0, 3.0]
//! sigma = [0.0, 5e-5]
//!
//! [time]
//! steps = 1000
//! dt_fraction = 0.99
//!
//! [[source]]
//! kind = "gaussian"
//! hwhm = 3.53e9
//! component = "z"
//! position = [0.015, 0.015, 0.015]
//!
//! [[probe]]
//! name = "center"
//! field = "ez"
//! position = [0.045, 0.045, 0.045]
//! ```

pub mod cpml;
mod run;
pub mod waveform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{
    align_to_cells, cell_count, Axis, CellCounts, Face, RefinedBlock, RegionSpec, SubgridPlacement,
};

pub use cpml::{Cpml, CpmlParams};
pub use run::{
    check, compare_csv, compare_series, line_file, probe_file, run, CheckOptions, CheckReport,
    Comparison, EnergySummary, Engine, GridId, LineRecord, ProbeRecord, RunOptions, RunOutput,
    Simulation, SubsystemCheck, Summary,
};
pub use waveform::{dft_extract, waveform, Pulse, Waveform};

/// Boundary treatment of one outer face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Pec,
    Pmc,
    /// PEC-backed absorbing layer.
    Cpml,
}

/// Field component selector such as `ex` or `hz`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldComponent {
    pub magnetic: bool,
    pub axis: Axis,
}

impl FieldComponent {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        let mut ch = s.chars();
        let magnetic = match ch.next()? {
            'e' => false,
            'h' => true,
            _ => return None,
        };
        let axis = parse_axis(ch.as_str())?;
        Some(FieldComponent { magnetic, axis })
    }

    pub fn name(&self) -> String {
        format!(
            "{}{}",
            if self.magnetic { 'h' } else { 'e' },
            self.axis.name()
        )
    }
}

fn parse_axis(s: &str) -> Option<Axis> {
    match s {
        "x" => Some(Axis::X),
        "y" => Some(Axis::Y),
        "z" => Some(Axis::Z),
        _ => None,
    }
}

/// Where a source injects current.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceLocation {
    /// Nearest E sample of `component` to `position`.
    Point { component: Axis, position: [f64; 3] },
    /// Every E sample of `direction` on the plane `normal = at`. The
    /// amplitude is a surface current density in A/m, spread over one cell.
    Sheet {
        normal: Axis,
        at: f64,
        direction: Axis,
    },
}

/// Soft current-density source, A/m² (A/m for sheets).
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub pulse: Pulse,
    pub location: SourceLocation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    pub name: String,
    pub field: FieldComponent,
    pub position: [f64; 3],
    /// Average H over the two adjacent half steps.
    pub average: bool,
}

/// Evenly spaced probes whose spectra are evaluated at one frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeLineSpec {
    pub name: String,
    pub field: FieldComponent,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub count: usize,
    pub frequency: f64,
}

/// Relative material parameters of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    pub eps_r: f64,
    pub sigma: f64,
    pub mu_r: f64,
}

/// Axis-aligned block of material, corners in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaterialBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub medium: Medium,
}

/// Per-cell random ε_r and σ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomMedium {
    pub eps_r: [f64; 2],
    pub sigma: [f64; 2],
}

/// Material layering: background, then random draws, then boxes in order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialSpec {
    pub background: Medium,
    pub random: Option<RandomMedium>,
    pub boxes: Vec<MaterialBox>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditSpec {
    /// Record the per-step energy balance.
    pub energy: bool,
    pub tolerance: f64,
    /// Abort when a probe exceeds `factor` times its maximum over the first
    /// `window` steps.
    pub envelope: Option<(f64, usize)>,
}

/// Validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub spec: RegionSpec,
    pub faces: [BoundaryKind; 6],
    pub cpml: CpmlParams,
    pub subgrid: Option<SubgridPlacement>,
    pub nonuniform: Option<RefinedBlock>,
    pub materials: MaterialSpec,
    pub steps: usize,
    pub dt_fraction: f64,
    /// Amplitude of a random constraint-consistent initial state; zero
    /// starts from rest.
    pub initial_random: f64,
    pub sources: Vec<SourceSpec>,
    pub probes: Vec<ProbeSpec>,
    pub lines: Vec<ProbeLineSpec>,
    pub audit: AuditSpec,
}

mod raw {
    use super::*;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Config {
        pub name: Option<String>,
        #[serde(default)]
        pub seed: u64,
        pub domain: Domain,
        #[serde(default)]
        pub boundary: Boundary,
        pub subgrid: Option<Block>,
        pub nonuniform: Option<Block>,
        #[serde(default)]
        pub materials: Materials,
        pub time: Time,
        #[serde(default)]
        pub initial: Initial,
        #[serde(default)]
        pub source: Vec<Source>,
        #[serde(default)]
        pub probe: Vec<Probe>,
        #[serde(default)]
        pub probe_line: Vec<ProbeLine>,
        #[serde(default)]
        pub audit: Audit,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Domain {
        pub size: [f64; 3],
        pub spacing: [f64; 3],
    }

    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct Boundary {
        pub default: Option<BoundaryKind>,
        pub x_min: Option<BoundaryKind>,
        pub x_max: Option<BoundaryKind>,
        pub y_min: Option<BoundaryKind>,
        pub y_max: Option<BoundaryKind>,
        pub z_min: Option<BoundaryKind>,
        pub z_max: Option<BoundaryKind>,
        #[serde(default)]
        pub cpml: CpmlParams,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Block {
        #[serde(default)]
        pub origin: [f64; 3],
        pub size: [f64; 3],
        pub ratio: [usize; 3],
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Materials {
        #[serde(default = "one")]
        pub eps_r: f64,
        #[serde(default)]
        pub sigma: f64,
        #[serde(default = "one")]
        pub mu_r: f64,
        pub random: Option<Random>,
        #[serde(default, rename = "box")]
        pub boxes: Vec<MatBox>,
    }

    impl Default for Materials {
        fn default() -> Self {
            Materials {
                eps_r: 1.0,
                sigma: 0.0,
                mu_r: 1.0,
                random: None,
                boxes: Vec::new(),
            }
        }
    }

    fn one() -> f64 {
        1.0
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Random {
        pub eps_r: [f64; 2],
        #[serde(default)]
        pub sigma: [f64; 2],
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct MatBox {
        pub lo: [f64; 3],
        pub hi: [f64; 3],
        #[serde(default = "one")]
        pub eps_r: f64,
        #[serde(default)]
        pub sigma: f64,
        #[serde(default = "one")]
        pub mu_r: f64,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Time {
        pub steps: usize,
        #[serde(default = "default_fraction")]
        pub dt_fraction: f64,
    }

    fn default_fraction() -> f64 {
        0.99
    }

    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct Initial {
        #[serde(default)]
        pub random_amplitude: f64,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Source {
        pub kind: String,
        pub waveform: Option<String>,
        pub hwhm: f64,
        pub f0: Option<f64>,
        #[serde(default = "one")]
        pub amplitude: f64,
        pub delay: Option<f64>,
        pub component: Option<String>,
        pub position: Option<[f64; 3]>,
        pub plane: Option<String>,
        pub at: Option<f64>,
        pub direction: Option<String>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Probe {
        pub name: String,
        pub field: String,
        pub position: [f64; 3],
        #[serde(default)]
        pub average: bool,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ProbeLine {
        pub name: String,
        pub field: String,
        pub start: [f64; 3],
        pub end: [f64; 3],
        pub count: usize,
        pub frequency: f64,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Audit {
        #[serde(default)]
        pub energy: bool,
        #[serde(default = "default_tol")]
        pub tolerance: f64,
        pub envelope_factor: Option<f64>,
        pub envelope_window: Option<usize>,
    }

    impl Default for Audit {
        fn default() -> Self {
            Audit {
                energy: false,
                tolerance: default_tol(),
                envelope_factor: None,
                envelope_window: None,
            }
        }
    }

    fn default_tol() -> f64 {
        1e-12
    }
}

fn cfg(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn wrap<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => cfg(field, other.to_string()),
    })
}

fn finite3(field: &str, v: [f64; 3]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(cfg(field, "values must be finite"))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(cfg(field, format!("must be positive (got {v})")))
    }
}

/// Parse and validate a scenario.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let raw: raw::Config = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let d = &raw.domain;
    for k in 0..3 {
        positive("domain.spacing", d.spacing[k])?;
        positive("domain.size", d.size[k])?;
    }
    let mut cells = [0usize; 3];
    for k in 0..3 {
        cells[k] = wrap(
            "domain.size",
            align_to_cells("domain.size", d.size[k], d.spacing[k]),
        )?;
    }
    let spec = wrap("domain", RegionSpec::new(cells, d.spacing))?;

    let b = &raw.boundary;
    let def = b.default.unwrap_or(BoundaryKind::Pec);
    let faces = [b.x_min, b.x_max, b.y_min, b.y_max, b.z_min, b.z_max].map(|f| f.unwrap_or(def));
    let has_cpml = faces.contains(&BoundaryKind::Cpml);
    if has_cpml {
        let p = &b.cpml;
        if p.layers == 0 {
            return Err(cfg("boundary.cpml.layers", "must be at least 1"));
        }
        positive("boundary.cpml.order", p.order)?;
        if !(p.sigma_factor.is_finite() && p.sigma_factor >= 0.0) {
            return Err(cfg("boundary.cpml.sigma_factor", "must be non-negative"));
        }
        if !(p.kappa_max.is_finite() && p.kappa_max >= 1.0) {
            return Err(cfg("boundary.cpml.kappa_max", "must be at least 1"));
        }
        if !(p.alpha_max.is_finite() && p.alpha_max >= 0.0) {
            return Err(cfg("boundary.cpml.alpha_max", "must be non-negative"));
        }
        for f in Face::ALL {
            if faces[f.index()] == BoundaryKind::Cpml && 2 * p.layers > cells[f.axis.index()] {
                return Err(cfg(
                    format!("boundary.{}", f.name()),
                    format!(
                        "{} layers do not fit in {} cells",
                        p.layers,
                        cells[f.axis.index()]
                    ),
                ));
            }
        }
    }

    let to_cells = |field: &str, v: [f64; 3]| -> Result<[usize; 3]> {
        finite3(field, v)?;
        let mut out = [0usize; 3];
        for k in 0..3 {
            out[k] = wrap(field, align_to_cells(field, v[k], d.spacing[k]))?;
        }
        Ok(out)
    };

    let subgrid = match &raw.subgrid {
        None => None,
        Some(s) => {
            let origin = to_cells("subgrid.origin", s.origin)?;
            let extent = to_cells("subgrid.size", s.size)?;
            let pl = wrap(
                "subgrid.ratio",
                SubgridPlacement::new(origin, extent, s.ratio),
            )?;
            let hole = pl.hole();
            for k in 0..3 {
                if hole.hi[k] > cells[k] {
                    return Err(cfg("subgrid", "subgrid extends beyond the domain"));
                }
            }
            if (0..3).all(|k| hole.lo[k] == 0 && hole.hi[k] == cells[k]) {
                return Err(cfg("subgrid", "subgrid fills the whole domain"));
            }
            if has_cpml {
                let l = b.cpml.layers;
                for f in Face::ALL {
                    if faces[f.index()] != BoundaryKind::Cpml {
                        continue;
                    }
                    let k = f.axis.index();
                    let clear = if f.positive {
                        hole.hi[k] + l <= cells[k]
                    } else {
                        hole.lo[k] >= l
                    };
                    if !clear {
                        return Err(cfg(
                            "subgrid",
                            format!("subgrid overlaps the absorbing layer on {}", f.name()),
                        ));
                    }
                }
            }
            Some(pl)
        }
    };

    let nonuniform = match &raw.nonuniform {
        None => None,
        Some(s) => {
            let extent = to_cells("nonuniform.size", s.size)?;
            for r in s.ratio {
                if r < 3 || r % 2 == 0 {
                    return Err(cfg("nonuniform.ratio", Error::InvalidRatio(r).to_string()));
                }
            }
            Some(RefinedBlock {
                extent,
                ratio: s.ratio,
            })
        }
    };

    let m = &raw.materials;
    let medium = |field: &str, eps_r: f64, sigma: f64, mu_r: f64| -> Result<Medium> {
        positive(&format!("{field}.eps_r"), eps_r)?;
        positive(&format!("{field}.mu_r"), mu_r)?;
        if !sigma.is_finite() {
            return Err(cfg(format!("{field}.sigma"), "must be finite"));
        }
        Ok(Medium { eps_r, sigma, mu_r })
    };
    let background = medium("materials", m.eps_r, m.sigma, m.mu_r)?;
    let random = match &m.random {
        None => None,
        Some(r) => {
            if !(r.eps_r[0] > 0.0 && r.eps_r[1] >= r.eps_r[0] && r.eps_r[1].is_finite()) {
                return Err(cfg("materials.random.eps_r", "need 0 < lo <= hi"));
            }
            if !(r.sigma[0] >= 0.0 && r.sigma[1] >= r.sigma[0] && r.sigma[1].is_finite()) {
                return Err(cfg("materials.random.sigma", "need 0 <= lo <= hi"));
            }
            Some(RandomMedium {
                eps_r: r.eps_r,
                sigma: r.sigma,
            })
        }
    };
    let mut boxes = Vec::new();
    for (i, bx) in m.boxes.iter().enumerate() {
        let field = format!("materials.box[{i}]");
        finite3(&field, bx.lo)?;
        finite3(&field, bx.hi)?;
        if (0..3).any(|k| bx.hi[k] <= bx.lo[k]) {
            return Err(cfg(field, "hi must exceed lo"));
        }
        boxes.push(MaterialBox {
            lo: bx.lo,
            hi: bx.hi,
            medium: medium(&field, bx.eps_r, bx.sigma, bx.mu_r)?,
        });
    }

    let t = &raw.time;
    if t.steps == 0 {
        return Err(cfg("time.steps", "must be at least 1"));
    }
    if !(t.dt_fraction > 0.0 && t.dt_fraction < 1.0) {
        return Err(cfg(
            "time.dt_fraction",
            format!("must lie in (0, 1) (got {})", t.dt_fraction),
        ));
    }
    let ia = raw.initial.random_amplitude;
    if !(ia.is_finite() && ia >= 0.0) {
        return Err(cfg("initial.random_amplitude", "must be non-negative"));
    }

    let size = [
        cells[0] as f64 * d.spacing[0],
        cells[1] as f64 * d.spacing[1],
        cells[2] as f64 * d.spacing[2],
    ];
    let inside = |p: [f64; 3]| (0..3).all(|k| p[k] >= 0.0 && p[k] <= size[k]);

    let mut sources = Vec::new();
    for (i, s) in raw.source.iter().enumerate() {
        let field = format!("source[{i}]");
        sources.push(parse_source(&field, s, size, &inside)?);
    }

    let mut probes = Vec::new();
    for (i, p) in raw.probe.iter().enumerate() {
        let field = format!("probe[{i}]");
        let fc = FieldComponent::parse(&p.field).ok_or_else(|| {
            cfg(
                format!("{field}.field"),
                "expected ex, ey, ez, hx, hy or hz",
            )
        })?;
        finite3(&field, p.position)?;
        if !inside(p.position) {
            return Err(cfg(format!("{field}.position"), "outside the domain"));
        }
        if p.name.is_empty() || probes.iter().any(|q: &ProbeSpec| q.name == p.name) {
            return Err(cfg(
                format!("{field}.name"),
                "names must be unique and non-empty",
            ));
        }
        probes.push(ProbeSpec {
            name: p.name.clone(),
            field: fc,
            position: p.position,
            average: p.average,
        });
    }

    let mut lines = Vec::new();
    for (i, p) in raw.probe_line.iter().enumerate() {
        let field = format!("probe_line[{i}]");
        let fc = FieldComponent::parse(&p.field).ok_or_else(|| {
            cfg(
                format!("{field}.field"),
                "expected ex, ey, ez, hx, hy or hz",
            )
        })?;
        if !(inside(p.start) && inside(p.end)) {
            return Err(cfg(field, "line leaves the domain"));
        }
        if p.count < 2 {
            return Err(cfg(format!("{field}.count"), "need at least 2 points"));
        }
        positive(&format!("{field}.frequency"), p.frequency)?;
        lines.push(ProbeLineSpec {
            name: p.name.clone(),
            field: fc,
            start: p.start,
            end: p.end,
            count: p.count,
            frequency: p.frequency,
        });
    }

    let a = &raw.audit;
    positive("audit.tolerance", a.tolerance)?;
    let envelope = match (a.envelope_factor, a.envelope_window) {
        (None, None) => None,
        (Some(f), Some(w)) if f > 1.0 && w > 0 => Some((f, w)),
        _ => {
            return Err(cfg(
                "audit.envelope_factor",
                "set both envelope_factor > 1 and envelope_window > 0",
            ));
        }
    };
    if a.energy && has_cpml {
        return Err(cfg(
            "audit.energy",
            "energy audit needs a closed PEC/PMC domain",
        ));
    }

    Ok(Scenario {
        name: raw.name.clone().unwrap_or_else(|| "scenario".into()),
        seed: raw.seed,
        spec,
        faces,
        cpml: b.cpml,
        subgrid,
        nonuniform,
        materials: MaterialSpec {
            background,
            random,
            boxes,
        },
        steps: t.steps,
        dt_fraction: t.dt_fraction,
        initial_random: ia,
        sources,
        probes,
        lines,
        audit: AuditSpec {
            energy: a.energy,
            tolerance: a.tolerance,
            envelope,
        },
    })
}

fn parse_source(
    field: &str,
    s: &raw::Source,
    size: [f64; 3],
    inside: &dyn Fn([f64; 3]) -> bool,
) -> Result<SourceSpec> {
    let shape = match s.kind.as_str() {
        "current_sheet" => s.waveform.as_deref().ok_or_else(|| {
            cfg(
                format!("{field}.waveform"),
                "current sheets need a waveform",
            )
        })?,
        k => {
            if s.waveform.is_some() {
                return Err(cfg(
                    format!("{field}.waveform"),
                    "only current sheets take a waveform",
                ));
            }
            k
        }
    };
    positive(&format!("{field}.hwhm"), s.hwhm)?;
    let wf = match shape {
        "gaussian" => Waveform::Gaussian { hwhm: s.hwhm },
        "modulated_gaussian" => {
            let f0 =
                s.f0.ok_or_else(|| cfg(format!("{field}.f0"), "modulated pulses need f0"))?;
            positive(&format!("{field}.f0"), f0)?;
            Waveform::ModulatedGaussian { f0, hwhm: s.hwhm }
        }
        other => {
            return Err(cfg(
                format!("{field}.kind"),
                format!("unknown waveform `{other}` (gaussian, modulated_gaussian, current_sheet)"),
            ))
        }
    };
    if !s.amplitude.is_finite() {
        return Err(cfg(format!("{field}.amplitude"), "must be finite"));
    }
    let mut pulse = Pulse::new(wf, s.amplitude);
    if let Some(dl) = s.delay {
        let min = waveform::min_delay_sigmas() * wf.sigma_t();
        if !(dl.is_finite() && dl >= min) {
            return Err(cfg(
                format!("{field}.delay"),
                format!("must be at least {min:e} s so the pulse starts below 1e-6 of its peak"),
            ));
        }
        pulse.delay = dl;
    }
    let location = if s.kind == "current_sheet" {
        let normal = s
            .plane
            .as_deref()
            .and_then(parse_axis)
            .ok_or_else(|| cfg(format!("{field}.plane"), "expected x, y or z"))?;
        let direction = s
            .direction
            .as_deref()
            .and_then(parse_axis)
            .ok_or_else(|| cfg(format!("{field}.direction"), "expected x, y or z"))?;
        if direction == normal {
            return Err(cfg(
                format!("{field}.direction"),
                "must be tangential to the sheet",
            ));
        }
        let at =
            s.at.ok_or_else(|| cfg(format!("{field}.at"), "missing sheet position"))?;
        if !(at >= 0.0 && at <= size[normal.index()]) {
            return Err(cfg(format!("{field}.at"), "outside the domain"));
        }
        SourceLocation::Sheet {
            normal,
            at,
            direction,
        }
    } else {
        let component = s
            .component
            .as_deref()
            .and_then(parse_axis)
            .ok_or_else(|| cfg(format!("{field}.component"), "expected x, y or z"))?;
        let position = s
            .position
            .ok_or_else(|| cfg(format!("{field}.position"), "missing"))?;
        finite3(field, position)?;
        if !inside(position) {
            return Err(cfg(format!("{field}.position"), "outside the domain"));
        }
        SourceLocation::Point {
            component,
            position,
        }
    };
    Ok(SourceSpec { pulse, location })
}

impl Scenario {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        load_scenario(&std::fs::read_to_string(path)?)
    }

    /// Cell totals of the coarse, fine-everywhere, nonuniform and subgridded
    /// variants of this geometry.
    pub fn cell_counts(&self) -> Result<CellCounts> {
        cell_count(
            self.spec.cells,
            self.subgrid.as_ref(),
            self.nonuniform.as_ref(),
        )
    }

    pub fn face_kind(&self, f: Face) -> BoundaryKind {
        self.faces[f.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[domain]
size = [0.01, 0.01, 0.01]
spacing = [0.01, 0.01, 0.01]
[time]
steps = 10
"#;

    #[test]
    fn minimal_config_is_valid() {
        let s = load_scenario(MINIMAL).unwrap();
        assert_eq!(s.spec.cells, [1, 1, 1]);
        assert_eq!(s.faces, [BoundaryKind::Pec; 6]);
        assert_eq!(s.dt_fraction, 0.99);
        assert!(s.subgrid.is_none());
    }

    fn cavity(extra: &str) -> String {
        format!(
            r#"
name = "cavity"
[domain]
size = [0.12, 0.12, 0.12]
spacing = [0.01, 0.01, 0.01]
[subgrid]
origin = [0.04, 0.04, 0.04]
size = [0.04, 0.04, 0.04]
{extra}
[time]
steps = 100
"#
        )
    }

    #[test]
    fn cavity_config_parses() {
        let s = load_scenario(&cavity("ratio = [5, 5, 5]")).unwrap();
        assert_eq!(s.spec.cells, [12, 12, 12]);
        let pl = s.subgrid.unwrap();
        assert_eq!(pl.origin, [4, 4, 4]);
        assert_eq!(pl.extent, [4, 4, 4]);
        assert_eq!(pl.ratio, [5, 5, 5]);
    }

    #[test]
    fn even_ratio_rejected() {
        let e = load_scenario(&cavity("ratio = [4, 4, 4]")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("subgrid.ratio"), "{msg}");
        assert!(msg.contains("refinement ratio must be odd"), "{msg}");
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("steps = 10", "steps = 10\ndt_fraction = 1.2");
        assert!(load_scenario(&bad)
            .unwrap_err()
            .to_string()
            .contains("time.dt_fraction"));
        let bad = MINIMAL.replace("size = [0.01, 0.01, 0.01]", "size = [0.015, 0.01, 0.01]");
        assert!(load_scenario(&bad)
            .unwrap_err()
            .to_string()
            .contains("domain.size"));
        let bad =
            format!("{MINIMAL}\n[[probe]]\nname = \"p\"\nfield = \"ez\"\nposition = [0.5, 0, 0]\n");
        assert!(load_scenario(&bad)
            .unwrap_err()
            .to_string()
            .contains("probe[0].position"));
        let bad = format!("{MINIMAL}\n[[source]]\nkind = \"gaussian\"\nhwhm = 1e9\ncomponent = \"q\"\nposition = [0, 0, 0]\n");
        assert!(load_scenario(&bad)
            .unwrap_err()
            .to_string()
            .contains("source[0].component"));
        assert!(matches!(load_scenario("not toml ["), Err(Error::Parse(_))));
        assert!(matches!(
            load_scenario(&format!("{MINIMAL}\nbogus = 1\n")),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn short_delay_rejected() {
        let s = format!("{MINIMAL}\n[[source]]\nkind = \"gaussian\"\nhwhm = 1e9\ncomponent = \"z\"\nposition = [0, 0, 0.005]\ndelay = 1e-12\n");
        assert!(load_scenario(&s)
            .unwrap_err()
            .to_string()
            .contains("source[0].delay"));
    }

    #[test]
    fn sheet_source_parses() {
        let s = format!(
            "{MINIMAL}\n[[source]]\nkind = \"current_sheet\"\nwaveform = \"modulated_gaussian\"\nf0 = 1e10\nhwhm = 8.24e9\nplane = \"y\"\nat = 0.005\ndirection = \"x\"\n"
        );
        let sc = load_scenario(&s).unwrap();
        assert_eq!(
            sc.sources[0].location,
            SourceLocation::Sheet {
                normal: Axis::Y,
                at: 0.005,
                direction: Axis::X
            }
        );
    }

    #[test]
    fn subgrid_may_not_touch_absorber() {
        let s = cavity("ratio = [3, 3, 3]").replace(
            "[time]",
            "[boundary]\ndefault = \"cpml\"\ncpml = { layers = 5 }\n[time]",
        );
        assert!(load_scenario(&s)
            .unwrap_err()
            .to_string()
            .contains("absorbing layer"));
    }

    #[test]
    fn component_names_round_trip() {
        for n in ["ex", "ey", "ez", "hx", "hy", "hz"] {
            assert_eq!(FieldComponent::parse(n).unwrap().name(), n);
        }
        assert!(FieldComponent::parse("bx").is_none());
    }
}
