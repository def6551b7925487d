//! Channelized high-contrast permeability fields.
//!
//! The background is `exp(η·sin(7πx)sin(8πy) + sin(10πx)sin(12πy))` with `η`
//! drawn from a discrete uniform distribution on `[0, 1]`; cells covered by an
//! active channel take a fixed high value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{FineGrid, Neighborhood};
use crate::{Error, Result};

/// A stochastic channel shape. Positions and lengths are fractions of the
/// unit square; widths and jitter are in fine cells.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelShape {
    /// Strip of constant `x` spanning `y ∈ [y_start, y_end]`; the start is
    /// drawn uniformly from `y_start`.
    Vertical { x: f64, y_start: (f64, f64), y_end: f64 },
    /// Strip of constant `y` spanning `x ∈ [x_start, x_end]`; the end is drawn
    /// uniformly from `x_end`.
    Horizontal { y: f64, x_start: f64, x_end: (f64, f64) },
    /// Segment from `from` in direction `(1, 1)` with a random length.
    Diagonal { from: (f64, f64), length: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTemplate {
    pub shape: ChannelShape,
    pub p_active: f64,
    pub width: (usize, usize),
    pub jitter: usize,
}

/// Random draws for one template in one realization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelInstance {
    pub template: usize,
    pub active: bool,
    pub width: usize,
    pub offset: i64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub nx: usize,
    pub ny: usize,
    pub eta_levels: usize,
    pub channel_value: f64,
    pub templates: Vec<ChannelTemplate>,
}

impl FieldConfig {
    /// Three strips: a vertical one near `x = 0.3` that may reach down across
    /// a horizontal one near `y = 0.4`, and a short strip near `(0.75, 0.25)`
    /// that appears and disappears.
    pub fn channelized(nx: usize, ny: usize) -> Self {
        let strip = |shape| ChannelTemplate {
            shape,
            p_active: 0.7,
            width: (1, 2),
            jitter: 2,
        };
        Self {
            nx,
            ny,
            eta_levels: 11,
            channel_value: 1000.0,
            templates: vec![
                strip(ChannelShape::Vertical {
                    x: 0.3,
                    y_start: (0.3, 0.5),
                    y_end: 0.95,
                }),
                strip(ChannelShape::Horizontal {
                    y: 0.4,
                    x_start: 0.05,
                    x_end: (0.5, 0.7),
                }),
                strip(ChannelShape::Horizontal {
                    y: 0.25,
                    x_start: 0.65,
                    x_end: (0.8, 0.9),
                }),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta_levels < 2 {
            return Err(Error::InvalidArgument("need at least two eta levels".into()));
        }
        if !(self.channel_value > 0.0) {
            return Err(Error::InvalidArgument("channel value must be positive".into()));
        }
        for t in &self.templates {
            if t.width.0 < 1 || t.width.1 < t.width.0 {
                return Err(Error::InvalidArgument(format!("bad channel width {:?}", t.width)));
            }
            if !(0.0..=1.0).contains(&t.p_active) {
                return Err(Error::InvalidArgument("activation probability outside [0,1]".into()));
            }
        }
        FineGrid::new(self.nx, self.ny).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermeabilityField {
    pub nx: usize,
    pub ny: usize,
    /// Per-cell values, row-major.
    pub values: Vec<f64>,
    pub eta: f64,
    pub channels: Vec<ChannelInstance>,
    pub seed: u64,
}

/// Background coefficient at `(x, y)`.
pub fn background(eta: f64, x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    (eta * (7.0 * PI * x).sin() * (8.0 * PI * y).sin() + (10.0 * PI * x).sin() * (12.0 * PI * y).sin())
        .exp()
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

pub fn sample_field(config: &FieldConfig, seed: u64) -> Result<PermeabilityField> {
    config.validate()?;
    let (nx, ny) = (config.nx, config.ny);
    let grid = FineGrid::new(nx, ny)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = rng.gen_range(0..config.eta_levels);
    let eta = level as f64 / (config.eta_levels - 1) as f64;

    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = grid.cell_center(i, j);
            values.push(background(eta, x, y));
        }
    }

    let mut channels = Vec::with_capacity(config.templates.len());
    for (t, template) in config.templates.iter().enumerate() {
        // Always draw every random quantity so templates stay independent.
        let active = rng.gen_bool(template.p_active);
        let width = rng.gen_range(template.width.0..=template.width.1);
        let j = template.jitter as i64;
        let offset = rng.gen_range(-j..=j);
        let length = match &template.shape {
            ChannelShape::Vertical { y_start, .. } => uniform(&mut rng, *y_start),
            ChannelShape::Horizontal { x_end, .. } => uniform(&mut rng, *x_end),
            ChannelShape::Diagonal { length, .. } => uniform(&mut rng, *length),
        };
        let inst = ChannelInstance {
            template: t,
            active,
            width,
            offset,
            length,
        };
        if active {
            for cell in channel_cells(&grid, template, &inst) {
                values[cell] = config.channel_value;
            }
        }
        channels.push(inst);
    }

    Ok(PermeabilityField {
        nx,
        ny,
        values,
        eta,
        channels,
        seed,
    })
}

fn to_cell(frac: f64, n: usize) -> i64 {
    (frac * n as f64).round() as i64
}

/// Cells covered by one channel instance.
pub fn channel_cells(grid: &FineGrid, template: &ChannelTemplate, inst: &ChannelInstance) -> Vec<usize> {
    let (nx, ny) = (grid.nx as i64, grid.ny as i64);
    let w = inst.width as i64;
    let mut out = Vec::new();
    let mut push = |i: i64, j: i64| {
        if (0..nx).contains(&i) && (0..ny).contains(&j) {
            out.push(grid.cell(i as usize, j as usize));
        }
    };
    match &template.shape {
        ChannelShape::Vertical { x, y_end, .. } => {
            let c0 = to_cell(*x, grid.nx) + inst.offset;
            let (r0, r1) = (to_cell(inst.length, grid.ny), to_cell(*y_end, grid.ny));
            for j in r0..r1 {
                for i in c0..c0 + w {
                    push(i, j);
                }
            }
        }
        ChannelShape::Horizontal { y, x_start, .. } => {
            let r0 = to_cell(*y, grid.ny) + inst.offset;
            let (c0, c1) = (to_cell(*x_start, grid.nx), to_cell(inst.length, grid.nx));
            for j in r0..r0 + w {
                for i in c0..c1 {
                    push(i, j);
                }
            }
        }
        ChannelShape::Diagonal { from, .. } => {
            let i0 = to_cell(from.0, grid.nx) + inst.offset;
            let j0 = to_cell(from.1, grid.ny);
            let steps = to_cell(inst.length / std::f64::consts::SQRT_2, grid.nx);
            for s in 0..steps {
                for k in 0..w {
                    // a staircase keeps the channel edge-connected
                    push(i0 + s + k, j0 + s);
                    push(i0 + s + k + 1, j0 + s);
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

impl PermeabilityField {
    pub fn uniform(nx: usize, ny: usize, value: f64) -> Self {
        Self {
            nx,
            ny,
            values: vec![value; nx * ny],
            eta: 0.0,
            channels: Vec::new(),
            seed: 0,
        }
    }

    pub fn check_positive(&self) -> Result<()> {
        match self.values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            Some(c) => Err(Error::InvalidArgument(format!(
                "coefficient must be positive and finite, cell {c} has {}",
                self.values[c]
            ))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("FIELD {} {}\n", self.nx, self.ny);
        write_rows(&mut s, &self.values, self.nx);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (nx, ny, values) = parse_grid_values(text, "FIELD", |nx, ny| nx * ny)?;
        Ok(Self {
            nx,
            ny,
            values,
            eta: f64::NAN,
            channels: Vec::new(),
            seed: 0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn write_rows(s: &mut String, values: &[f64], row: usize) {
    for chunk in values.chunks(row.max(1)) {
        let mut first = true;
        for v in chunk {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v:.16e}");
        }
        s.push('\n');
    }
}

pub(crate) fn parse_grid_values(
    text: &str,
    tag: &str,
    count: impl Fn(usize, usize) -> usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some(tag) {
        return Err(Error::Parse(format!("expected `{tag}` header")));
    }
    let mut dim = || -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse("truncated header".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad dimension: {e}")))
    };
    let (nx, ny) = (dim()?, dim()?);
    let values = tokens
        .map(|t| f64::from_str(t).map_err(|e| Error::Parse(format!("bad value `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count(nx, ny) {
        return Err(Error::Parse(format!(
            "expected {} values, found {}",
            count(nx, ny),
            values.len()
        )));
    }
    Ok((nx, ny, values))
}

/// Local coefficient values of one neighborhood, in its local cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub ncx: usize,
    pub ncy: usize,
}

impl Patch {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn restrict(field: &PermeabilityField, nbhd: &Neighborhood) -> Result<Patch> {
    let b = &nbhd.block;
    if b.x0 + b.ncx > field.nx || b.y0 + b.ncy > field.ny {
        return Err(Error::DimensionMismatch(format!(
            "neighborhood {} does not fit a {}x{} field",
            nbhd.coarse_node, field.nx, field.ny
        )));
    }
    let mut values = Vec::with_capacity(b.cell_count());
    for j in 0..b.ncy {
        let row = (b.y0 + j) * field.nx + b.x0;
        values.extend_from_slice(&field.values[row..row + b.ncx]);
    }
    Ok(Patch {
        values,
        ncx: b.ncx,
        ncy: b.ncy,
    })
}

/// Pointwise arithmetic mean of equally-shaped patches.
pub fn mean_field(patches: &[&Patch]) -> Result<Patch> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty cluster".into()))?;
    let mut sum = vec![0.0; first.dim()];
    for p in patches {
        if (p.ncx, p.ncy) != (first.ncx, first.ncy) {
            return Err(Error::DimensionMismatch("patches differ in shape".into()));
        }
        for (s, v) in sum.iter_mut().zip(&p.values) {
            *s += v;
        }
    }
    let n = patches.len() as f64;
    Ok(Patch {
        values: sum.into_iter().map(|s| s / n).collect(),
        ncx: first.ncx,
        ncy: first.ncy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grids, neighborhood};

    fn no_channels(nx: usize) -> FieldConfig {
        FieldConfig {
            templates: Vec::new(),
            ..FieldConfig::channelized(nx, nx)
        }
    }

    #[test]
    fn background_only_with_eta_zero() {
        let cfg = no_channels(20);
        let grid = FineGrid::new(20, 20).unwrap();
        for seed in 0..50 {
            let f = sample_field(&cfg, seed).unwrap();
            if f.eta != 0.0 {
                continue;
            }
            for j in 0..20 {
                for i in 0..20 {
                    let (x, y) = grid.cell_center(i, j);
                    let expect = ((10.0 * std::f64::consts::PI * x).sin()
                        * (12.0 * std::f64::consts::PI * y).sin())
                    .exp();
                    assert_eq!(f.values[grid.cell(i, j)], expect);
                    assert!(expect >= (-1.0f64).exp() && expect <= 1.0f64.exp());
                }
            }
            return;
        }
        panic!("no eta = 0 draw in 50 seeds");
    }

    #[test]
    fn active_channel_cells_take_channel_value() {
        let cfg = FieldConfig::channelized(40, 40);
        let grid = FineGrid::new(40, 40).unwrap();
        let mut seen = 0;
        for seed in 0..20 {
            let f = sample_field(&cfg, seed).unwrap();
            for inst in f.channels.iter().filter(|c| c.active) {
                for c in channel_cells(&grid, &cfg.templates[inst.template], inst) {
                    assert_eq!(f.values[c], 1000.0);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = FieldConfig::channelized(40, 40);
        let a = sample_field(&cfg, 7).unwrap();
        let b = sample_field(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn positivity_and_contrast() {
        let cfg = FieldConfig::channelized(40, 40);
        for seed in 0..30 {
            let f = sample_field(&cfg, seed).unwrap();
            assert!(f.values.iter().all(|&v| v > 0.0));
            let bg_bound = (-2.0f64).exp();
            for (c, &v) in f.values.iter().enumerate() {
                if v != 1000.0 {
                    assert!(v >= bg_bound && v <= 2.0f64.exp(), "cell {c}");
                }
            }
            if f.channels.iter().any(|c| c.active) {
                let max = f.values.iter().cloned().fold(f64::MIN, f64::max);
                let min = f.values.iter().cloned().fold(f64::MAX, f64::min);
                assert!(max / min >= 1000.0 / 2.0f64.exp());
            }
        }
    }

    #[test]
    fn eta_levels_are_uniform() {
        let cfg = no_channels(4);
        let n = 10_000;
        let mut counts = vec![0usize; cfg.eta_levels];
        for seed in 0..n {
            let f = sample_field(&cfg, seed as u64).unwrap();
            let level = (f.eta * (cfg.eta_levels - 1) as f64).round() as usize;
            assert!((f.eta - level as f64 / 10.0).abs() < 1e-15);
            counts[level] += 1;
        }
        // chi-square with 10 degrees of freedom; 29.59 is the 0.999 quantile
        let mean = n as f64 / cfg.eta_levels as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 29.59, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn channels_intersect_and_vanish_across_seeds() {
        let cfg = FieldConfig::channelized(100, 100);
        let grid = FineGrid::new(100, 100).unwrap();
        let (mut crossing, mut separate, mut third_off, mut third_on) = (0, 0, 0, 0);
        for seed in 0..200 {
            let f = sample_field(&cfg, seed).unwrap();
            let cells = |t: usize| {
                let inst = &f.channels[t];
                if inst.active {
                    channel_cells(&grid, &cfg.templates[t], inst)
                } else {
                    Vec::new()
                }
            };
            let (v, h) = (cells(0), cells(1));
            if !v.is_empty() && !h.is_empty() {
                if v.iter().any(|c| h.contains(c)) {
                    crossing += 1;
                } else {
                    separate += 1;
                }
            }
            if f.channels[2].active {
                third_on += 1;
            } else {
                third_off += 1;
            }
        }
        assert!(crossing > 0 && separate > 0 && third_on > 0 && third_off > 0);
    }

    #[test]
    fn diagonal_channel_is_edge_connected() {
        let grid = FineGrid::new(30, 30).unwrap();
        let t = ChannelTemplate {
            shape: ChannelShape::Diagonal {
                from: (0.2, 0.2),
                length: (0.4, 0.4),
            },
            p_active: 1.0,
            width: (1, 1),
            jitter: 0,
        };
        let inst = ChannelInstance {
            template: 0,
            active: true,
            width: 1,
            offset: 0,
            length: 0.4,
        };
        let cells = channel_cells(&grid, &t, &inst);
        assert!(cells.len() >= 16);
        for &c in &cells {
            let (i, j) = (c % 30, c / 30);
            let neighbours = [(i + 1, j), (i.wrapping_sub(1), j), (i, j + 1), (i, j.wrapping_sub(1))];
            assert!(neighbours.iter().any(|&(a, b)| a < 30 && b < 30 && cells.contains(&(b * 30 + a))));
        }
    }

    #[test]
    fn restrict_shapes_and_indexing() {
        let g = build_grids(40, 5).unwrap();
        let f = sample_field(&FieldConfig::channelized(40, 40), 3).unwrap();
        let nb = neighborhood(&g, g.node(4, 4)).unwrap();
        let p = restrict(&f, &nb).unwrap();
        assert_eq!(p.dim(), 100);
        for k in [0usize, 9, 10, 33, 47, 50, 71, 88, 95, 99] {
            let (i, j) = (k % 10, k / 10);
            let direct = f.values[(nb.block.y0 + j) * 40 + nb.block.x0 + i];
            assert_eq!(p.values[k], direct);
            assert_eq!(p.values[k], f.values[nb.fine_cells[k]]);
        }
        let c = PermeabilityField::uniform(40, 40, 2.5);
        assert!(restrict(&c, &nb).unwrap().values.iter().all(|&v| v == 2.5));
        let small = PermeabilityField::uniform(20, 20, 1.0);
        assert!(restrict(&small, &nb).is_err());
    }

    #[test]
    fn mean_of_patches() {
        let p = Patch { values: vec![1.0, 2.0, 3.0, 4.0], ncx: 2, ncy: 2 };
        assert_eq!(mean_field(&[&p, &p]).unwrap(), p);
        let ones = Patch { values: vec![1.0; 4], ncx: 2, ncy: 2 };
        let threes = Patch { values: vec![3.0; 4], ncx: 2, ncy: 2 };
        assert_eq!(mean_field(&[&ones, &threes]).unwrap().values, vec![2.0; 4]);
        assert!(mean_field(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches: Vec<Patch> = (0..5)
            .map(|_| Patch {
                values: (0..12).map(|_| rng.gen_range(0.1..1000.0)).collect(),
                ncx: 4,
                ncy: 3,
            })
            .collect();
        let refs: Vec<&Patch> = patches.iter().collect();
        let mean = mean_field(&refs).unwrap();
        for k in 0..12 {
            let mut naive = 0.0;
            for p in &patches {
                naive += p.values[k];
            }
            assert!((mean.values[k] - naive / 5.0).abs() < 1e-12 * naive);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let f = sample_field(&FieldConfig::channelized(12, 12), 9).unwrap();
        let back = PermeabilityField::from_text(&f.to_text()).unwrap();
        assert_eq!(back.values, f.values);
        assert!(f.to_text().starts_with("FIELD 12 12\n"));
        assert!(PermeabilityField::from_text("FIELD 2 2\n1 2 3").is_err());
    }
}
