//! Truncated rectangular lattice and grid-sampled value functions.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic header of the binary value-field container.
pub const VALUE_FIELD_MAGIC: &[u8; 16] = b"DIFFROBUST-VF-01";

/// Uniform tensor grid on the box `[lower, upper]`.
///
/// Nodes are ordered row-major with axis 0 fastest. The anchor is the node of
/// smallest Euclidean norm (lowest index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    node_count: usize,
    anchor: usize,
}

impl Grid {
    pub fn new(lower: &[f64], upper: &[f64], shape: &[usize]) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || shape.len() != d {
            return Err(Error::config("/grid", "lower, upper and shape must share a nonzero dimension"));
        }
        for i in 0..d {
            if !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::config(format!("/grid/lower/{i}"), "bounds must be finite"));
            }
            if lower[i] >= upper[i] {
                return Err(Error::config(
                    format!("/grid/upper/{i}"),
                    format!("inverted bounds: lower {} >= upper {}", lower[i], upper[i]),
                ));
            }
            if shape[i] < 3 {
                return Err(Error::config(format!("/grid/shape/{i}"), "need at least 3 nodes per axis"));
            }
        }
        let spacing: Vec<f64> = (0..d)
            .map(|i| (upper[i] - lower[i]) / (shape[i] - 1) as f64)
            .collect();
        let mut strides = vec![1usize; d];
        for i in 1..d {
            strides[i] = strides[i - 1] * shape[i - 1];
        }
        let node_count = strides[d - 1] * shape[d - 1];
        let mut grid = Self {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            shape: shape.to_vec(),
            spacing,
            strides,
            node_count,
            anchor: 0,
        };
        // the anchor search only needs the per-axis node closest to zero
        let mut anchor_multi = vec![0usize; d];
        for i in 0..d {
            let mut best = f64::INFINITY;
            for k in 0..shape[i] {
                let v = grid.axis_coord(i, k).abs();
                if v < best {
                    best = v;
                    anchor_multi[i] = k;
                }
            }
        }
        grid.anchor = grid.flat_index(&anchor_multi);
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn node_count(&self) -> usize {
        self.node_count
    }
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Coordinate of node `k` on `axis`; exact at both box faces.
    #[inline]
    pub fn axis_coord(&self, axis: usize, k: usize) -> f64 {
        let n = self.shape[axis] - 1;
        if k == n {
            return self.upper[axis];
        }
        self.lower[axis] + (self.upper[axis] - self.lower[axis]) * (k as f64) / (n as f64)
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        self.multi_index_into(idx, &mut m);
        m
    }

    pub fn multi_index_into(&self, mut idx: usize, out: &mut [usize]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = idx % self.shape[i];
            idx /= self.shape[i];
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(m, s)| m * s).sum()
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_into(idx, &mut x);
        x
    }

    pub fn node_into(&self, mut idx: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let k = idx % self.shape[i];
            idx /= self.shape[i];
            *o = self.axis_coord(i, k);
        }
    }

    /// True for nodes on any face of the box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        let mut rem = idx;
        for &n in &self.shape {
            let k = rem % n;
            rem /= n;
            if k == 0 || k == n - 1 {
                return true;
            }
        }
        false
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }

    /// Node nearest to `x` (per-axis rounding after clamping to the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for i in 0..self.dim() {
            let p = ((x[i] - self.lower[i]) / self.spacing[i]).round();
            let k = p.clamp(0.0, (self.shape[i] - 1) as f64) as usize;
            idx += k * self.strides[i];
        }
        idx
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.node_count).map(move |i| self.node(i))
    }
}

/// Scalar field sampled at grid nodes, interpolated multilinearly.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::config(
                "/values",
                format!("expected {} values, got {}", grid.node_count(), values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Solve(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.nodes().map(|x| f(&x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation; returns the value and whether `x` had to
    /// be clamped into the box.
    pub fn interpolate(&self, x: &[f64]) -> (f64, bool) {
        let g = &self.grid;
        let d = g.dim();
        let mut clamped = false;
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for i in 0..d {
            let mut xi = x[i];
            if xi < g.lower[i] || xi > g.upper[i] || !xi.is_finite() {
                clamped = true;
                xi = xi.clamp(g.lower[i], g.upper[i]);
            }
            let n = g.shape[i] - 1;
            let mut p = (xi - g.lower[i]) / g.spacing[i];
            let r = p.round();
            if (p - r).abs() < 1e-9 {
                p = r;
            }
            let k = (p.floor() as usize).min(n - 1);
            base[i] = k;
            frac[i] = p - k as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..d {
                let up = (corner >> i) & 1 == 1;
                w *= if up { frac[i] } else { 1.0 - frac[i] };
                idx += (base[i] + up as usize) * g.strides[i];
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        (acc, clamped)
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.interpolate(x).0
    }

    /// CSV with columns `x1..xd,value`, one row per node in grid order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.grid.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain(["value".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut x = vec![0.0; d];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.node_into(i, &mut x);
            for xi in &x {
                write!(w, "{xi},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VALUE_FIELD_MAGIC)?;
        w.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        for i in 0..self.grid.dim() {
            w.write_all(&self.grid.lower[i].to_le_bytes())?;
            w.write_all(&self.grid.upper[i].to_le_bytes())?;
            w.write_all(&(self.grid.shape[i] as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != VALUE_FIELD_MAGIC {
            return Err(Error::config("/magic", "not a value-field container"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        let (mut lo, mut hi, mut shape) = (vec![], vec![], vec![]);
        for _ in 0..d {
            r.read_exact(&mut b8)?;
            lo.push(f64::from_le_bytes(b8));
            r.read_exact(&mut b8)?;
            hi.push(f64::from_le_bytes(b8));
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let grid = Grid::new(&lo, &hi, &shape)?;
        let mut values = Vec::with_capacity(grid.node_count());
        for _ in 0..grid.node_count() {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Self::new(grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_grid() {
        let g = Grid::new(&[-1.0], &[1.0], &[3]).unwrap();
        assert_eq!(g.nodes().collect::<Vec<_>>(), vec![vec![-1.0], vec![0.0], vec![1.0]]);
        assert_eq!(g.anchor(), 1);
        assert_eq!(g.spacing(), &[1.0]);
    }

    #[test]
    fn unit_square_anchor_is_corner() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.node(g.anchor()), vec![0.0, 0.0]);
        // axis 0 fastest
        assert_eq!(g.node(1), vec![0.5, 0.0]);
        assert_eq!(g.node(3), vec![0.0, 0.5]);
    }

    #[test]
    fn fine_spacing() {
        let g = Grid::new(&[-5.0], &[5.0], &[201]).unwrap();
        assert!((g.spacing()[0] - 0.05).abs() < 1e-15);
        assert_eq!(g.node(g.anchor()), vec![0.0]);
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert!(matches!(Grid::new(&[1.0], &[-1.0], &[5]), Err(Error::Config { .. })));
        assert!(matches!(Grid::new(&[0.0], &[1.0], &[2]), Err(Error::Config { .. })));
    }

    #[test]
    fn interpolation_examples() {
        let g = Grid::new(&[0.0], &[1.0], &[3]).unwrap();
        let f = ValueField::from_fn(g, |x| x[0]).unwrap();
        assert_eq!(f.value_at(&[0.25]), 0.25);
        assert_eq!(f.value_at(&[0.5]), 0.5);
        let (v, clamped) = f.interpolate(&[2.0]);
        assert!(clamped);
        assert_eq!(v, 1.0);

        let g2 = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        // bilinear x + y takes corner values {0,1,1,2}
        let f2 = ValueField::from_fn(g2, |x| x[0] + x[1]).unwrap();
        assert!((f2.value_at(&[0.5, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let g = Grid::new(&[-3.0, -1.0], &[2.0, 4.0], &[7, 9]).unwrap();
        let f = ValueField::from_fn(g.clone(), |x| (x[0] * 1.3).sin() + x[1].powi(3)).unwrap();
        for i in 0..g.node_count() {
            assert_eq!(f.value_at(&g.node(i)), f.values()[i]);
        }
    }

    #[test]
    fn csv_layout() {
        let g = Grid::new(&[0.0], &[1.0], &[3]).unwrap();
        let f = ValueField::from_fn(g, |x| 2.0 * x[0]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x1,value\n0,0\n0.5,1\n1,2\n");
    }

    #[test]
    fn binary_round_trip_and_magic() {
        let g = Grid::new(&[-1.0, 0.0], &[1.0, 2.0], &[4, 3]).unwrap();
        let f = ValueField::from_fn(g, |x| x[0] * x[1] - 0.1).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..16], b"DIFFROBUST-VF-01");
        let back = ValueField::read_binary(&buf[..]).unwrap();
        assert_eq!(back, f);
        buf[0] = b'X';
        assert!(ValueField::read_binary(&buf[..]).is_err());
    }
}
