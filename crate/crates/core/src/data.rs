//! Two-moons data.
//!
//! Upper moon (blue): `(cos φ, sin φ)`. Lower moon (orange):
//! `(1 − cos φ, 0.5 − sin φ)`. `φ ~ U[0, π]`, isotropic Gaussian jitter, then
//! the whole cloud is shifted by `−(0.5, 0.25)`.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::rng::{streams, Rng};

pub const CENTER: [f64; 2] = [0.5, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Blue,
    Orange,
}

impl Class {
    pub fn label(self) -> [f64; 2] {
        match self {
            Class::Blue => [0.0, 1.0],
            Class::Orange => [0.0, -1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Blue => "blue",
            Class::Orange => "orange",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blue" => Ok(Class::Blue),
            "orange" => Ok(Class::Orange),
            other => Err(invalid(format!("unknown class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<[f64; 2]>,
    pub classes: Vec<Class>,
    pub seed: u64,
    /// Set when an odd sample count was rounded down.
    pub odd_count: bool,
}

impl Dataset {
    pub fn new(inputs: Vec<[f64; 2]>, classes: Vec<Class>, seed: u64) -> Result<Self> {
        if inputs.len() != classes.len() {
            return Err(invalid("inputs and classes differ in length"));
        }
        Ok(Self {
            inputs,
            classes,
            seed,
            odd_count: false,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn label(&self, i: usize) -> [f64; 2] {
        self.classes[i].label()
    }

    pub fn count(&self, class: Class) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i]).collect(),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            seed: self.seed,
            odd_count: false,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,class\n");
        for (p, c) in self.inputs.iter().zip(&self.classes) {
            let _ = writeln!(out, "{},{},{c}", p[0], p[1]);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next().map(str::trim) {
            Some("x1,x2,class") => {}
            _ => return Err(invalid("dataset CSV must start with 'x1,x2,class'")),
        }
        let mut inputs = Vec::new();
        let mut classes = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.trim().split(',').collect();
            let bad = || invalid(format!("dataset row {}: '{line}'", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let x1 = cols[0].parse().map_err(|_| bad())?;
            let x2 = cols[1].parse().map_err(|_| bad())?;
            inputs.push([x1, x2]);
            classes.push(cols[2].parse()?);
        }
        Dataset::new(inputs, classes, 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Noise-free, centered point of `class`'s moon at angle `phi`.
pub fn moon_point(class: Class, phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    let raw = match class {
        Class::Blue => [c, s],
        Class::Orange => [1.0 - c, 0.5 - s],
    };
    [raw[0] - CENTER[0], raw[1] - CENTER[1]]
}

/// `n/2` points per class: all blue first, then all orange.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("moons need at least 2 samples"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(invalid(format!("noise must be a nonnegative number, got {noise}")));
    }
    let per_class = n / 2;
    let odd_count = n % 2 == 1;
    if odd_count {
        log::warn!("make_moons: odd n={n}, generating {} points", 2 * per_class);
    }
    let mut rng = Rng::new(seed, streams::DATA);
    let mut inputs = Vec::with_capacity(2 * per_class);
    let mut classes = Vec::with_capacity(2 * per_class);
    for class in [Class::Blue, Class::Orange] {
        for _ in 0..per_class {
            let phi = std::f64::consts::PI * rng.uniform();
            let [x, y] = moon_point(class, phi);
            inputs.push([x + noise * rng.normal(), y + noise * rng.normal()]);
            classes.push(class);
        }
    }
    Ok(Dataset {
        inputs,
        classes,
        seed,
        odd_count,
    })
}

/// Class-stratified split. Each class contributes `round(n_c · test_fraction)`
/// test points, drawn after a seeded shuffle.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = Rng::new(seed, streams::SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [Class::Blue, Class::Orange] {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.classes[i] == class).collect();
        rng.shuffle(&mut idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn parametrization_examples() {
        assert_eq!(moon_point(Class::Blue, 0.0), [0.5, -0.25]);
        let p = moon_point(Class::Orange, FRAC_PI_2);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn noiseless_upper_moon_on_circle() {
        let ds = make_moons(200, 0.0, 4).unwrap();
        for (p, c) in ds.inputs.iter().zip(&ds.classes) {
            if *c == Class::Blue {
                let (x, y) = (p[0] + CENTER[0], p[1] + CENTER[1]);
                assert!((x.hypot(y) - 1.0).abs() < 1e-12);
                assert!(y >= -1e-15);
            }
        }
    }

    #[test]
    fn balance_and_determinism() {
        let a = make_moons(4000, 0.1, 9).unwrap();
        assert_eq!(a.count(Class::Blue), 2000);
        assert_eq!(a.count(Class::Orange), 2000);
        assert_eq!(a, make_moons(4000, 0.1, 9).unwrap());
        assert_ne!(a.inputs, make_moons(4000, 0.1, 10).unwrap().inputs);
        let odd = make_moons(5, 0.1, 1).unwrap();
        assert!(odd.odd_count);
        assert_eq!(odd.len(), 4);
    }

    #[test]
    fn jitter_std() {
        // Replay the generator to recover each point's exact jitter.
        let noise = 0.1;
        let ds = make_moons(100_000, noise, 2).unwrap();
        let mut rng = Rng::new(2, streams::DATA);
        let mut sum_sq = 0.0;
        for (p, &class) in ds.inputs.iter().zip(&ds.classes) {
            let base = moon_point(class, PI * rng.uniform());
            let (dx, dy) = (p[0] - base[0], p[1] - base[1]);
            let (z0, z1) = (rng.normal(), rng.normal());
            assert!((dx - noise * z0).abs() < 1e-14 && (dy - noise * z1).abs() < 1e-14);
            sum_sq += dx * dx + dy * dy;
        }
        let sd = (sum_sq / (2 * ds.len()) as f64).sqrt();
        assert!((sd - noise).abs() < 0.03 * noise, "{sd}");
    }

    #[test]
    fn split_stratified() {
        let ds = make_moons(4000, 0.1, 1).unwrap();
        let (tr, te) = split(&ds, 0.25, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (3000, 1000));
        assert_eq!(te.count(Class::Blue), 500);
        assert_eq!(tr.count(Class::Orange), 1500);
        let mut all: Vec<_> = tr
            .inputs
            .iter()
            .chain(&te.inputs)
            .map(|p| (p[0].to_bits(), p[1].to_bits()))
            .collect();
        let mut orig: Vec<_> = ds.inputs.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        assert_eq!(split(&ds, 0.25, 5).unwrap(), (tr, te));
        assert!(split(&ds, 1.0, 5).is_err());
        assert!(split(&ds, 0.0, 5).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let ds = make_moons(10, 0.1, 3).unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.classes, ds.classes);
    }
}
