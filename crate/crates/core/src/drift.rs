//! Space-time grids and the drift fields the Picard map acts on.

use std::io::{BufRead, Write};

use serde_json::Value;

use crate::error::invalid;
use crate::io::{fmt_num, json_array};
use crate::{check_dim, Error, Point, Result, MAX_DIM, ZERO};

/// Uniform nodes `-R + i h`, `i = 0..n`, in each of `d` coordinates.
/// Flat node indices run with the first coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    pub d: usize,
    pub radius: f64,
    pub h: f64,
    pub n: usize,
}

impl SpaceGrid {
    /// Box `[-R, R]^d` with spacing `h`; `2R/h` must be (close to) an integer.
    pub fn new(d: usize, radius: f64, h: f64) -> Result<Self> {
        check_dim(d)?;
        if !(radius > 0.0 && h > 0.0 && radius.is_finite() && h.is_finite()) {
            return invalid(format!("grid needs radius > 0 and h > 0, got R = {radius}, h = {h}"));
        }
        let cells = 2.0 * radius / h;
        let rounded = cells.round();
        if rounded < 2.0 || (cells - rounded).abs() > 1e-9 * cells.max(1.0) {
            return invalid(format!("grid spacing {h} does not divide [-{radius}, {radius}] into >= 2 cells"));
        }
        Ok(SpaceGrid { d, radius, h, n: rounded as usize + 1 })
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-coordinate node index of a flat index.
    pub fn multi_index(&self, flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        let mut r = flat;
        for i in idx.iter_mut().take(self.d) {
            *i = r % self.n;
            r /= self.n;
        }
        idx
    }

    pub fn flat(&self, idx: &[usize; MAX_DIM]) -> usize {
        let mut f = 0;
        for i in (0..self.d).rev() {
            f = f * self.n + idx[i];
        }
        f
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.radius + i as f64 * self.h
    }

    pub fn node(&self, flat: usize) -> Point {
        let idx = self.multi_index(flat);
        let mut p = ZERO;
        for i in 0..self.d {
            p[i] = self.coord(idx[i]);
        }
        p
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|f| self.node(f)).collect()
    }

    /// Whether a node lies at least `margin` nodes away from every face.
    pub fn is_interior(&self, flat: usize, margin: usize) -> bool {
        let idx = self.multi_index(flat);
        idx[..self.d].iter().all(|&i| i >= margin && i + margin < self.n)
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    /// Lower cell corner and in-cell fractions, or `None` outside the box.
    #[inline]
    fn locate(&self, x: &Point) -> Option<([usize; MAX_DIM], [f64; MAX_DIM])> {
        let mut base = [0; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for i in 0..self.d {
            let s = (x[i] + self.radius) / self.h;
            if !(s >= 0.0 && s <= (self.n - 1) as f64) {
                return None;
            }
            let c = (s.floor() as usize).min(self.n - 2);
            base[i] = c;
            frac[i] = s - c as f64;
        }
        Some((base, frac))
    }

    /// Multilinear interpolation of `ncomp`-vectors stored node-major in
    /// `values`; zero outside the box.
    #[inline]
    pub fn interpolate(&self, values: &[f64], ncomp: usize, x: &Point) -> Point {
        let mut out = ZERO;
        let Some((base, frac)) = self.locate(x) else {
            return out;
        };
        for corner in 0..(1usize << self.d) {
            let mut w = 1.0;
            let mut idx = base;
            for i in 0..self.d {
                if corner >> i & 1 == 1 {
                    idx[i] += 1;
                    w *= frac[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let off = self.flat(&idx) * ncomp;
            for c in 0..ncomp {
                out[c] += w * values[off + c];
            }
        }
        out
    }

    fn header(&self) -> String {
        format!(
            "\"d\":{},\"radius\":{},\"h\":{},\"n\":{}",
            self.d,
            fmt_num(self.radius),
            fmt_num(self.h),
            self.n
        )
    }

    fn from_header(v: &Value) -> Result<Self> {
        let d = get_u(v, "d")?;
        let g = SpaceGrid::new(d, get_f(v, "radius")?, get_f(v, "h")?)?;
        if g.n != get_u(v, "n")? {
            return Err(Error::Format("node count does not match radius and spacing".into()));
        }
        Ok(g)
    }
}

/// Time nodes `j dt`, `j = 0..=n_slices`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_slices: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_slices: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || n_slices == 0 {
            return invalid(format!("time grid needs dt > 0 and >= 1 slice, got dt = {dt}, {n_slices} slices"));
        }
        Ok(TimeGrid { dt, n_slices })
    }

    /// Grid with about `slices` steps covering `[0, horizon]`.
    pub fn covering(horizon: f64, slices: usize) -> Result<Self> {
        Self::new(horizon / slices.max(1) as f64, slices.max(1))
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_slices as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_slices).map(|j| self.time(j)).collect()
    }

    /// Slice in force at time `t` (left-constant), clamped to the last node.
    #[inline]
    pub fn slice_at(&self, t: f64) -> usize {
        let s = (t / self.dt * (1.0 + 1e-12) + 1e-12).floor();
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.n_slices)
        }
    }
}

/// A vector field `b(x, t)` sampled on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    /// `values[(slice * nodes + node) * d + c]`.
    pub values: Vec<f64>,
    sup_norm: f64,
}

impl DriftField {
    pub fn new(space: SpaceGrid, time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let expected = (time.n_slices + 1) * space.len() * space.d;
        if values.len() != expected {
            return invalid(format!("drift field needs {expected} values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("drift field values must be finite");
        }
        let sup_norm = sup_of(&values, space.d);
        Ok(DriftField { space, time, values, sup_norm })
    }

    pub fn zero(space: SpaceGrid, time: TimeGrid) -> Self {
        let n = (time.n_slices + 1) * space.len() * space.d;
        DriftField { space, time, values: vec![0.0; n], sup_norm: 0.0 }
    }

    pub fn from_fn<F: Fn(&Point, f64) -> Point>(space: SpaceGrid, time: TimeGrid, f: F) -> Result<Self> {
        let d = space.d;
        let mut values = Vec::with_capacity((time.n_slices + 1) * space.len() * d);
        for j in 0..=time.n_slices {
            let t = time.time(j);
            for node in 0..space.len() {
                let v = f(&space.node(node), t);
                values.extend_from_slice(&v[..d]);
            }
        }
        Self::new(space, time, values)
    }

    pub fn dim(&self) -> usize {
        self.space.d
    }

    /// Recorded `sup |b|` over stored nodes.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let m = self.space.len() * self.space.d;
        &self.values[j * m..(j + 1) * m]
    }

    pub fn node_value(&self, j: usize, node: usize) -> Point {
        let d = self.space.d;
        let off = (j * self.space.len() + node) * d;
        crate::point(&self.values[off..off + d])
    }

    /// Multilinear in space on slice `j`; zero outside the box.
    #[inline]
    pub fn eval_slice(&self, j: usize, x: &Point) -> Point {
        self.space.interpolate(self.slice(j), self.space.d, x)
    }

    /// `b(x, t)`: left-constant in time, multilinear in space.
    #[inline]
    pub fn eval(&self, x: &Point, t: f64) -> Point {
        self.eval_slice(self.time.slice_at(t), x)
    }

    fn same_grid(&self, other: &DriftField) -> Result<()> {
        if self.space != other.space || self.time != other.time {
            return invalid("drift fields live on different grids");
        }
        Ok(())
    }

    /// Grid-sup of `|self - other|`.
    pub fn sup_distance(&self, other: &DriftField) -> Result<f64> {
        self.same_grid(other)?;
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(sup_of(&diff, self.space.d))
    }

    /// Grid-sup of `|self - other|` restricted to time slice `j`.
    pub fn slice_sup_distance(&self, other: &DriftField, j: usize) -> Result<f64> {
        self.same_grid(other)?;
        let diff: Vec<f64> = self.slice(j).iter().zip(other.slice(j)).map(|(a, b)| a - b).collect();
        Ok(sup_of(&diff, self.space.d))
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{{\"kind\":\"drift_field\",{},\"dt\":{},\"n_slices\":{},\"sup_norm\":{}}}",
            self.space.header(),
            fmt_num(self.time.dt),
            self.time.n_slices,
            fmt_num(self.sup_norm)
        )?;
        for j in 0..=self.time.n_slices {
            writeln!(
                w,
                "{{\"slice\":{},\"t\":{},\"values\":{}}}",
                j,
                fmt_num(self.time.time(j)),
                json_array(self.slice(j))
            )?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: Value = parse_line(lines.next())?;
        if header.get("kind").and_then(Value::as_str) != Some("drift_field") {
            return Err(Error::Format("first record is not a drift_field header".into()));
        }
        let space = SpaceGrid::from_header(&header)?;
        let time = TimeGrid::new(get_f(&header, "dt")?, get_u(&header, "n_slices")?)?;
        let per = space.len() * space.d;
        let mut values = Vec::with_capacity(per * (time.n_slices + 1));
        for j in 0..=time.n_slices {
            let rec: Value = parse_line(lines.next())?;
            if get_u(&rec, "slice")? != j {
                return Err(Error::Format(format!("expected slice {j}")));
            }
            let arr = rec
                .get("values")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format("slice record without values".into()))?;
            if arr.len() != per {
                return Err(Error::Format(format!("slice {j} has {} values, expected {per}", arr.len())));
            }
            for v in arr {
                values.push(v.as_f64().ok_or_else(|| Error::Format("non-numeric value".into()))?);
            }
        }
        DriftField::new(space, time, values)
    }
}

/// A scalar or vector field on a space grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: SpaceGrid,
    pub t: f64,
    pub ncomp: usize,
    /// `values[node * ncomp + c]`.
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: SpaceGrid, t: f64, ncomp: usize) -> Self {
        let n = grid.len() * ncomp;
        GridField { grid, t, ncomp, values: vec![0.0; n] }
    }

    pub fn from_fn<F: Fn(&Point) -> Point>(grid: SpaceGrid, t: f64, ncomp: usize, f: F) -> Self {
        let mut values = Vec::with_capacity(grid.len() * ncomp);
        for node in 0..grid.len() {
            let v = f(&grid.node(node));
            values.extend_from_slice(&v[..ncomp]);
        }
        GridField { grid, t, ncomp, values }
    }

    pub fn at(&self, node: usize) -> Point {
        crate::point(&self.values[node * self.ncomp..(node + 1) * self.ncomp])
    }

    pub fn interpolate(&self, x: &Point) -> Point {
        self.grid.interpolate(&self.values, self.ncomp, x)
    }

    /// `sum_nodes value * h^d`, per component.
    pub fn integral(&self) -> Point {
        let mut s = ZERO;
        for vals in self.values.chunks(self.ncomp) {
            for (a, v) in s.iter_mut().zip(vals) {
                *a += v;
            }
        }
        crate::scale(&s, self.grid.cell_volume())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut f = self.clone();
        f.values.iter_mut().for_each(|v| *v *= s);
        f
    }

    pub fn check_compatible(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid || self.ncomp != other.ncomp {
            return invalid("fields live on different grids");
        }
        Ok(())
    }

    /// `(sum_nodes |a - b|^2 h^d)^{1/2}`.
    pub fn l2_distance(&self, other: &GridField) -> Result<f64> {
        self.check_compatible(other)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s * self.grid.cell_volume()).sqrt())
    }

    /// One NDJSON record `{"t","x","p"}` per node; `p` is a number for scalar
    /// fields and an array otherwise.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.grid.d;
        for node in 0..self.grid.len() {
            let x = self.grid.node(node);
            let vals = &self.values[node * self.ncomp..(node + 1) * self.ncomp];
            let p = if self.ncomp == 1 { fmt_num(vals[0]) } else { json_array(vals) };
            writeln!(w, "{{\"t\":{},\"x\":{},\"p\":{}}}", fmt_num(self.t), json_array(&x[..d]), p)?;
        }
        Ok(())
    }

    /// Reads records written by [`GridField::write_ndjson`] on a known grid.
    pub fn read_ndjson<R: BufRead>(r: R, grid: SpaceGrid) -> Result<Self> {
        let mut values = Vec::new();
        let mut t = 0.0;
        let mut ncomp = 0;
        let mut count = 0;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
            t = get_f(&v, "t")?;
            let x = v.get("x").and_then(Value::as_array).ok_or_else(|| Error::Format("record without x".into()))?;
            if x.len() != grid.d {
                return Err(Error::DimensionMismatch { expected: grid.d, got: x.len() });
            }
            let expect = grid.node(count);
            for (i, xi) in x.iter().enumerate() {
                let xi = xi.as_f64().ok_or_else(|| Error::Format("non-numeric x".into()))?;
                if (xi - expect[i]).abs() > 1e-9 * (1.0 + grid.radius) {
                    return Err(Error::Format(format!("record {count} is not at grid node {expect:?}")));
                }
            }
            let p = v.get("p").ok_or_else(|| Error::Format("record without p".into()))?;
            let comps: Vec<f64> = match p {
                Value::Array(a) => a.iter().filter_map(Value::as_f64).collect(),
                other => vec![other.as_f64().ok_or_else(|| Error::Format("non-numeric p".into()))?],
            };
            if count == 0 {
                ncomp = comps.len();
            } else if comps.len() != ncomp {
                return Err(Error::Format("inconsistent component count".into()));
            }
            values.extend(comps);
            count += 1;
        }
        if count != grid.len() {
            return Err(Error::Format(format!("{count} records for a grid of {} nodes", grid.len())));
        }
        Ok(GridField { grid, t, ncomp, values })
    }
}

fn sup_of(values: &[f64], d: usize) -> f64 {
    values
        .chunks(d)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn parse_line(line: Option<std::io::Result<String>>) -> Result<Value> {
    let line = line.ok_or_else(|| Error::Format("unexpected end of file".into()))??;
    serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))
}

fn get_f(v: &Value, key: &str) -> Result<f64> {
    v.get(key).and_then(Value::as_f64).ok_or_else(|| Error::Format(format!("missing number `{key}`")))
}

fn get_u(v: &Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|u| u as usize)
        .ok_or_else(|| Error::Format(format!("missing integer `{key}`")))
}
