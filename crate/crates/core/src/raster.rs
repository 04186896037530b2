//! Regular node grids over axis-aligned boxes and their image/CSV encodings.
//!
//! Node `(i, j)` sits at `x = x₀ + i·(x₁−x₀)/(n−1)`, `y = y₀ + j·(y₁−y₀)/(n−1)`
//! and is stored at index `j·n + i`. Images put `y₁` on the top row.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("degenerate bounds {x0}:{x1}:{y0}:{y1}")));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn square(half_width: f64) -> Self {
        Self {
            x0: -half_width,
            x1: half_width,
            y0: -half_width,
            y1: half_width,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::square(2.0)
    }
}

impl fmt::Display for Bounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x0, self.x1, self.y0, self.y1)
    }
}

impl FromStr for Bounds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad bounds '{s}'")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [x0, x1, y0, y1] => Bounds::new(*x0, *x1, *y0, *y1),
            _ => Err(invalid(format!("bounds need four values x0:x1:y0:y1, got '{s}'"))),
        }
    }
}

/// `resolution × resolution` nodes spanning `bounds`, corners included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub bounds: Bounds,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(bounds: Bounds, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(invalid("grid resolution must be at least 2"));
        }
        Ok(Self { bounds, resolution })
    }

    pub fn len(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> (f64, f64) {
        let n = (self.resolution - 1) as f64;
        (
            (self.bounds.x1 - self.bounds.x0) / n,
            (self.bounds.y1 - self.bounds.y0) / n,
        )
    }

    pub fn cell_area(&self) -> f64 {
        let (dx, dy) = self.spacing();
        dx * dy
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.resolution + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.resolution, idx / self.resolution)
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let (dx, dy) = self.spacing();
        [self.bounds.x0 + i as f64 * dx, self.bounds.y0 + j as f64 * dy]
    }

    pub fn node_at(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.coords(idx);
        self.node(i, j)
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|k| self.node_at(k)).collect()
    }

    /// Nearest node to `p`, if `p` lies inside the bounds (half a cell slack).
    pub fn nearest(&self, p: &[f64]) -> Option<(usize, usize)> {
        let (dx, dy) = self.spacing();
        let fi = ((p[0] - self.bounds.x0) / dx).round();
        let fj = ((p[1] - self.bounds.y0) / dy).round();
        let n = self.resolution as f64;
        if !(fi >= 0.0 && fj >= 0.0 && fi < n && fj < n) {
            return None;
        }
        Some((fi as usize, fj as usize))
    }
}

/// One scalar per grid node. Non-finite entries mark failed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(invalid(format!(
                "grid needs {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = (0..spec.len()).map(|k| f(spec.node_at(k))).collect();
        Self { spec, values }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    pub fn finite_range(&self) -> Option<(f64, f64)> {
        let mut it = self.values.iter().copied().filter(|v| v.is_finite());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn finite_mean(&self) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .filter(|v| v.is_finite())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// `# <header>` comment, then `x,y,<column>` rows.
    pub fn to_csv(&self, header: &str, column: &str) -> String {
        let mut out = String::with_capacity(self.values.len() * 40);
        if !header.is_empty() {
            let _ = writeln!(out, "# {header}");
        }
        let _ = writeln!(out, "x,y,{column}");
        for (k, v) in self.values.iter().enumerate() {
            let [x, y] = self.spec.node_at(k);
            let _ = writeln!(out, "{x},{y},{v}");
        }
        out
    }

    /// 8-bit grayscale with linear min–max scaling; failed nodes are black.
    pub fn to_gray(&self) -> (Vec<u8>, f64, f64) {
        let (lo, hi) = self.finite_range().unwrap_or((0.0, 0.0));
        let n = self.spec.resolution;
        let mut px = Vec::with_capacity(n * n);
        for row in 0..n {
            let j = n - 1 - row;
            for i in 0..n {
                px.push(scale_u8(self.get(i, j), lo, hi));
            }
        }
        (px, lo, hi)
    }

    /// Binary PGM (P5). Returns the `(vmin, vmax)` used for scaling.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(f64, f64)> {
        let (px, lo, hi) = self.to_gray();
        write_pgm_bytes(path, self.spec.resolution, self.spec.resolution, &px)?;
        Ok((lo, hi))
    }

    /// PGM plus a sidecar `<path>.meta` holding `vmin=… vmax=…`.
    pub fn write_pgm_with_meta(&self, path: impl AsRef<Path>) -> Result<(f64, f64)> {
        let path = path.as_ref();
        let (lo, hi) = self.write_pgm(path)?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".meta");
        std::fs::write(meta, format!("vmin={lo} vmax={hi}\n"))?;
        Ok((lo, hi))
    }

    /// Binary PPM (P6) through the [`VIRIDIS`] table.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<(f64, f64)> {
        let (gray, lo, hi) = self.to_gray();
        let table = viridis_table();
        let mut rgb = Vec::with_capacity(gray.len() * 3);
        for g in gray {
            rgb.extend_from_slice(&table[g as usize]);
        }
        let n = self.spec.resolution;
        let mut bytes = format!("P6\n{n} {n}\n255\n").into_bytes();
        bytes.extend_from_slice(&rgb);
        std::fs::write(path, bytes)?;
        Ok((lo, hi))
    }
}

fn scale_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    if hi <= lo {
        return 128;
    }
    (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_pgm_bytes(path: impl AsRef<Path>, width: usize, height: usize, px: &[u8]) -> Result<()> {
    assert_eq!(px.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(px);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Boolean node mask as a black/white PGM (set nodes white).
pub fn write_mask_pgm(path: impl AsRef<Path>, spec: &GridSpec, mask: &[bool]) -> Result<()> {
    let n = spec.resolution;
    let mut px = Vec::with_capacity(n * n);
    for row in 0..n {
        let j = n - 1 - row;
        for i in 0..n {
            px.push(if mask[spec.index(i, j)] { 255 } else { 0 });
        }
    }
    write_pgm_bytes(path, n, n, &px)
}

/// Colormap anchors at `0, 1/8, …, 1`; the 256-entry table interpolates
/// linearly between them.
pub const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub fn viridis_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (k, entry) in table.iter_mut().enumerate() {
        let s = k as f64 / 255.0 * 8.0;
        let lo = (s.floor() as usize).min(7);
        let frac = s - lo as f64;
        for c in 0..3 {
            let a = VIRIDIS[lo][c] as f64;
            let b = VIRIDIS[lo + 1][c] as f64;
            entry[c] = (a + (b - a) * frac).round() as u8;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_layout() {
        let g = GridSpec::new(Bounds::default(), 5).unwrap();
        assert_eq!(g.node(0, 0), [-2.0, -2.0]);
        assert_eq!(g.node(4, 4), [2.0, 2.0]);
        assert_eq!(g.node(2, 1), [0.0, -1.0]);
        assert_eq!(g.coords(g.index(3, 2)), (3, 2));
        assert_eq!(g.nearest(&[0.1, -0.9]), Some((2, 1)));
        assert_eq!(g.nearest(&[3.0, 0.0]), None);
        assert!(GridSpec::new(Bounds::default(), 1).is_err());
    }

    #[test]
    fn bounds_parse() {
        let b: Bounds = "-2:2:-1:3".parse().unwrap();
        assert_eq!(b, Bounds::new(-2.0, 2.0, -1.0, 3.0).unwrap());
        assert_eq!(b.to_string(), "-2:2:-1:3");
        assert!("1:0:0:1".parse::<Bounds>().is_err());
        assert!("1:2:3".parse::<Bounds>().is_err());
    }

    #[test]
    fn gray_top_row_is_max_y() {
        let g = GridSpec::new(Bounds::default(), 3).unwrap();
        let s = ScalarGrid::from_fn(g, |p| p[1]);
        let (px, lo, hi) = s.to_gray();
        assert_eq!((lo, hi), (-2.0, 2.0));
        assert_eq!(&px[0..3], &[255, 255, 255]);
        assert_eq!(&px[6..9], &[0, 0, 0]);
    }

    #[test]
    fn viridis_endpoints() {
        let t = viridis_table();
        assert_eq!(t[0], VIRIDIS[0]);
        assert_eq!(t[255], VIRIDIS[8]);
    }
}
