//! Post-training diagnostics on the input plane: prediction level sets,
//! decision margins, FTLE ridges, ridge/boundary overlap, almost-invariance
//! of class regions and adversarial probing.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::integrator::{flow_endpoint, tangent_flow, FlowConfig};
use crate::model::NodeModel;
use crate::raster::{Bounds, GridSpec, ScalarGrid};
use crate::rng::Rng;
use crate::training::{pred_from_output, predict};

/// `pred(x₀)` at every node; NaN where the flow diverged.
pub fn pred_grid(model: &NodeModel, spec: GridSpec, cfg: &FlowConfig) -> ScalarGrid {
    let values = (0..spec.len())
        .into_par_iter()
        .map(|k| predict(model, &spec.node_at(k), cfg).unwrap_or(f64::NAN))
        .collect();
    ScalarGrid { spec, values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    pub epsilon: f64,
    pub mask: Vec<bool>,
    pub count: usize,
    /// `count · cell area`.
    pub area: f64,
}

/// Nodes of `D_ε = {|pred − 0.5| < ε}`.
pub fn decision_margin(grid: &ScalarGrid, epsilon: f64) -> Result<Margin> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("margin epsilon must be nonnegative, got {epsilon}")));
    }
    let mask: Vec<bool> = grid.values.iter().map(|p| (p - 0.5).abs() < epsilon).collect();
    let count = mask.iter().filter(|&&m| m).count();
    Ok(Margin {
        epsilon,
        mask,
        count,
        area: count as f64 * grid.spec.cell_area(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeNode {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    /// Central-difference gradient in grid-index units.
    pub gradient: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSet {
    pub spec: GridSpec,
    pub nodes: Vec<RidgeNode>,
}

impl RidgeSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.spec.len()];
        for n in &self.nodes {
            m[self.spec.index(n.i, n.j)] = true;
        }
        m
    }

    /// `x,y,lambda` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,lambda\n");
        for n in &self.nodes {
            let [x, y] = self.spec.node(n.i, n.j);
            out.push_str(&format!("{x},{y},{}\n", n.value));
        }
        out
    }
}

fn bilinear(grid: &ScalarGrid, fi: f64, fj: f64) -> f64 {
    let n = grid.spec.resolution;
    let i0 = (fi.floor() as usize).min(n - 2);
    let j0 = (fj.floor() as usize).min(n - 2);
    let (a, b) = (fi - i0 as f64, fj - j0 as f64);
    let v00 = grid.get(i0, j0);
    let v10 = grid.get(i0 + 1, j0);
    let v01 = grid.get(i0, j0 + 1);
    let v11 = grid.get(i0 + 1, j0 + 1);
    (1.0 - a) * (1.0 - b) * v00 + a * (1.0 - b) * v10 + (1.0 - a) * b * v01 + a * b * v11
}

/// Value at quantile `q ∈ [0, 1]` of the finite entries.
pub fn quantile(grid: &ScalarGrid, q: f64) -> Option<f64> {
    let mut v: Vec<f64> = grid.values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    Some(v[idx])
}

/// Raster non-maximum suppression.
///
/// An interior node with `λ ≥ min_value` is kept when it is strictly larger
/// than `λ` one cell forward and one cell backward along its central-difference
/// gradient (bilinear lookup). Where that gradient vanishes, a strict maximum
/// along any of the four axis/diagonal stencils is enough, so an isolated peak
/// counts as a (degenerate) ridge.
pub fn extract_ridges(grid: &ScalarGrid, min_value: f64) -> RidgeSet {
    let spec = grid.spec;
    let n = spec.resolution;
    let mut nodes = Vec::new();
    if n < 3 {
        return RidgeSet { spec, nodes };
    }
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let v = grid.get(i, j);
            if !(v >= min_value) {
                continue;
            }
            let gx = 0.5 * (grid.get(i + 1, j) - grid.get(i - 1, j));
            let gy = 0.5 * (grid.get(i, j + 1) - grid.get(i, j - 1));
            if !(gx.is_finite() && gy.is_finite()) {
                continue;
            }
            let norm = gx.hypot(gy);
            let keep = if norm > 0.0 {
                let (dx, dy) = (gx / norm, gy / norm);
                let fwd = bilinear(grid, i as f64 + dx, j as f64 + dy);
                let bwd = bilinear(grid, i as f64 - dx, j as f64 - dy);
                v > fwd && v > bwd
            } else {
                const AXES: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
                AXES.iter().any(|&(di, dj)| {
                    let a = grid.get((i as isize + di) as usize, (j as isize + dj) as usize);
                    let b = grid.get((i as isize - di) as usize, (j as isize - dj) as usize);
                    v > a && v > b
                })
            };
            if keep {
                nodes.push(RidgeNode {
                    i,
                    j,
                    value: v,
                    gradient: [gx, gy],
                });
            }
        }
    }
    RidgeSet { spec, nodes }
}

/// `mask` grown by `radius` cells in the Chebyshev metric.
pub fn dilate(spec: &GridSpec, mask: &[bool], radius: usize) -> Vec<bool> {
    let n = spec.resolution;
    let r = radius as isize;
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for j in 0..n {
            for i in 0..n {
                let hit = (-r..=r).any(|o| {
                    let (ii, jj) = if horizontal {
                        (i as isize + o, j as isize)
                    } else {
                        (i as isize, j as isize + o)
                    };
                    ii >= 0 && jj >= 0 && (ii as usize) < n && (jj as usize) < n && src[jj as usize * n + ii as usize]
                });
                out[j * n + i] = hit;
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}

/// Fraction of ridge nodes within `tolerance` cells (Chebyshev) of a margin node.
pub fn ridge_boundary_overlap(ridges: &RidgeSet, margin_mask: &[bool], tolerance: usize) -> Result<f64> {
    if ridges.is_empty() {
        return Err(Error::EmptyRidgeSet);
    }
    if margin_mask.len() != ridges.spec.len() {
        return Err(invalid("margin mask and ridge set live on different rasters"));
    }
    let near = dilate(&ridges.spec, margin_mask, tolerance);
    let hits = ridges
        .nodes
        .iter()
        .filter(|n| near[ridges.spec.index(n.i, n.j)])
        .count();
    Ok(hits as f64 / ridges.len() as f64)
}

/// A set of raster cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub spec: GridSpec,
    pub mask: Vec<bool>,
}

impl Region {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Whether the cell containing `p` is in the region; points outside the
    /// raster are not.
    pub fn contains(&self, p: &[f64]) -> bool {
        self.spec
            .nearest(p)
            .is_some_and(|(i, j)| self.mask[self.spec.index(i, j)])
    }
}

/// Nodes whose state at time `t` is eventually classified as `blue`
/// (`pred > 0.5` after flowing from `t` to `T`; at `t = T` the readout alone).
pub fn class_region(model: &NodeModel, t: f64, spec: GridSpec, blue: bool, cfg: &FlowConfig) -> Region {
    let n_t = cfg.grid_index(t).ok();
    let mask = (0..spec.len())
        .into_par_iter()
        .map(|k| {
            let z = spec.node_at(k);
            let end = match n_t {
                Some(n) if n < cfg.steps() => flow_endpoint(model, &z, (t, cfg.t_end), cfg),
                _ => Ok(z.to_vec()),
            };
            match end {
                Ok(xt) => (pred_from_output(&model.output.apply(&xt)) > 0.5) == blue,
                Err(_) => false,
            }
        })
        .collect();
    Region { spec, mask }
}

/// Axis-aligned box around the time-`t` images of `region`'s nodes, padded
/// by `pad` (relative) on each side.
pub fn image_bounds(model: &NodeModel, region: &Region, t: f64, pad: f64, cfg: &FlowConfig) -> Result<Bounds> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for k in (0..region.spec.len()).filter(|&k| region.mask[k]) {
        let p = region.spec.node_at(k);
        let Ok(z) = (if t > 0.0 {
            flow_endpoint(model, &p, (0.0, t), cfg)
        } else {
            Ok(p.to_vec())
        }) else {
            continue;
        };
        for c in 0..2 {
            lo[c] = lo[c].min(z[c]);
            hi[c] = hi[c].max(z[c]);
        }
    }
    if !lo[0].is_finite() {
        return Err(invalid("region has no finite image"));
    }
    let w = [(hi[0] - lo[0]).max(1e-6), (hi[1] - lo[1]).max(1e-6)];
    Bounds::new(
        lo[0] - pad * w[0],
        hi[0] + pad * w[0],
        lo[1] - pad * w[1],
        hi[1] + pad * w[1],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceReport {
    /// `μ(S_{t0} ∩ Φ⁻¹(S_{t1}))/μ(S_{t0})`, estimated.
    pub ratio: f64,
    /// `1 − ratio`.
    pub epsilon_out: f64,
    pub sample_count: usize,
    pub diverged: usize,
}

const COHERENCE_CHUNK: usize = 1024;

/// Monte Carlo almost-invariance: sample uniformly in the cells of
/// `region_t0`, flow over `interval` and count landings in `region_t1`.
/// Chunk `c` of 1024 samples draws from stream `c` of `seed`.
pub fn coherence_ratio(
    model: &NodeModel,
    region_t0: &Region,
    region_t1: &Region,
    interval: (f64, f64),
    samples: usize,
    seed: u64,
    cfg: &FlowConfig,
) -> Result<CoherenceReport> {
    let cells: Vec<usize> = (0..region_t0.spec.len()).filter(|&k| region_t0.mask[k]).collect();
    if cells.is_empty() {
        return Err(invalid("source region is empty"));
    }
    if samples == 0 {
        return Err(invalid("coherence needs at least one sample"));
    }
    let same_time = interval.1 <= interval.0;
    if !same_time {
        cfg.step_range(interval.0, interval.1)?;
    }
    let (hx, hy) = {
        let (dx, dy) = region_t0.spec.spacing();
        (0.5 * dx, 0.5 * dy)
    };
    let chunks = samples.div_ceil(COHERENCE_CHUNK);
    let counts: Vec<(usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = Rng::new(seed, 1_000 + c as u64);
            let n = COHERENCE_CHUNK.min(samples - c * COHERENCE_CHUNK);
            let (mut hit, mut bad) = (0, 0);
            for _ in 0..n {
                let [x, y] = region_t0.spec.node_at(cells[rng.below(cells.len())]);
                let p = [x + rng.uniform_in(-hx, hx), y + rng.uniform_in(-hy, hy)];
                let end = if same_time {
                    Ok(p.to_vec())
                } else {
                    flow_endpoint(model, &p, interval, cfg)
                };
                match end {
                    Ok(z) if region_t1.contains(&z) => hit += 1,
                    Ok(_) => {}
                    Err(_) => bad += 1,
                }
            }
            (hit, bad)
        })
        .collect();
    let hit: usize = counts.iter().map(|c| c.0).sum();
    let diverged: usize = counts.iter().map(|c| c.1).sum();
    if diverged == samples {
        return Err(Error::Divergence { step: 0 });
    }
    let ratio = hit as f64 / samples as f64;
    Ok(CoherenceReport {
        ratio,
        epsilon_out: 1.0 - ratio,
        sample_count: samples,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub success: bool,
    pub witness: Option<[f64; 2]>,
}

pub const SWEEP_DIRECTIONS: usize = 16;

/// `pred(x)` and `∇ₓ pred(x)` through the tangent map.
pub fn pred_and_gradient(model: &NodeModel, x: &[f64], cfg: &FlowConfig) -> Result<(f64, [f64; 2])> {
    let tf = tangent_flow(model, x, (0.0, cfg.t_end), cfg, false)?;
    let out = model.output.apply(tf.trajectory.last());
    let db_v = [out[0], out[1] - 1.0];
    let do_v = [out[0], out[1] + 1.0];
    let db = db_v[0].hypot(db_v[1]);
    let dor = do_v[0].hypot(do_v[1]);
    let s = db + dor;
    let pred = if s == 0.0 { 0.5 } else { dor / s };
    // ∂pred/∂out = (db ∇dor − dor ∇db)/s²
    let mut g_out = [0.0; 2];
    if s > 0.0 && db > 0.0 && dor > 0.0 {
        for c in 0..2 {
            g_out[c] = (db * do_v[c] / dor - dor * db_v[c] / db) / (s * s);
        }
    }
    let g_state = model.output.a.matvec_t(&g_out);
    let g = tf.final_jacobian.matvec_t(&g_state);
    Ok((pred, [g[0], g[1]]))
}

/// Searches the Euclidean `ε`-ball around `x0` for a point of the other class:
/// projected normalized-gradient steps (size `2.5ε/steps`) pushing `pred`
/// across 0.5, then a sweep over 16 equally spaced points on the sphere.
pub fn adversarial_probe(
    model: &NodeModel,
    x0: &[f64; 2],
    epsilon: f64,
    steps: usize,
    cfg: &FlowConfig,
) -> ProbeResult {
    let fail = ProbeResult {
        success: false,
        witness: None,
    };
    if !(epsilon > 0.0) {
        return fail;
    }
    let Ok(p0) = predict(model, x0, cfg) else {
        return fail;
    };
    let blue = p0 > 0.5;
    let flipped = |p: f64| (p > 0.5) != blue;
    let sign = if blue { -1.0 } else { 1.0 };
    let alpha = 2.5 * epsilon / steps.max(1) as f64;

    let mut x = *x0;
    for _ in 0..steps {
        let Ok((_, g)) = pred_and_gradient(model, &x, cfg) else {
            break;
        };
        let gn = g[0].hypot(g[1]);
        if !(gn > 0.0) {
            break;
        }
        let mut next = [x[0] + alpha * sign * g[0] / gn, x[1] + alpha * sign * g[1] / gn];
        let off = [next[0] - x0[0], next[1] - x0[1]];
        let r = off[0].hypot(off[1]);
        if r > epsilon {
            next = [x0[0] + off[0] * epsilon / r, x0[1] + off[1] * epsilon / r];
        }
        x = next;
        if predict(model, &x, cfg).is_ok_and(flipped) {
            return ProbeResult {
                success: true,
                witness: Some(x),
            };
        }
    }
    for k in 0..SWEEP_DIRECTIONS {
        let a = std::f64::consts::TAU * k as f64 / SWEEP_DIRECTIONS as f64;
        let p = [x0[0] + epsilon * a.cos(), x0[1] + epsilon * a.sin()];
        if predict(model, &p, cfg).is_ok_and(flipped) {
            return ProbeResult {
                success: true,
                witness: Some(p),
            };
        }
    }
    fail
}

/// Fraction of `points` for which [`adversarial_probe`] succeeds.
pub fn probe_success_rate(model: &NodeModel, points: &[[f64; 2]], epsilon: f64, steps: usize, cfg: &FlowConfig) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let wins = points
        .par_iter()
        .map(|p| usize::from(adversarial_probe(model, p, epsilon, steps, cfg).success))
        .sum::<usize>();
    wins as f64 / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::model::{zero_model, OutputLayer};

    fn grid(n: usize, f: impl FnMut([f64; 2]) -> f64) -> ScalarGrid {
        ScalarGrid::from_fn(GridSpec::new(Bounds::default(), n).unwrap(), f)
    }

    /// Zero field; readout `(0, s·x₁)` so that `pred > 0.5 ⇔ x₁ > 0`.
    fn half_plane(s: f64) -> NodeModel {
        let out = OutputLayer {
            a: Mat::from_rows(&[&[0.0, 0.0], &[s, 0.0]]),
            c: vec![0.0, 0.0],
        };
        zero_model(2, 1.0, out)
    }

    #[test]
    fn constant_pred_grid() {
        let out = OutputLayer {
            a: Mat::zeros(2, 2),
            c: vec![0.0, 0.5],
        };
        let m = zero_model(2, 1.0, out);
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let g = pred_grid(&m, GridSpec::new(Bounds::default(), 5).unwrap(), &cfg);
        assert!(g.values.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn margin_extremes() {
        let g = grid(11, |p| 0.5 + 0.2 * (p[0] + 0.05));
        assert_eq!(decision_margin(&g, 0.0).unwrap().count, 0);
        let g = grid(11, |p| 0.5 + 0.25 * p[0]);
        let all = decision_margin(&g, 0.5 + 1e-12).unwrap();
        assert_eq!(all.count, 121);
        assert!(decision_margin(&g, -0.1).is_err());
    }

    #[test]
    fn logistic_band_area() {
        let g = grid(400, |p| 1.0 / (1.0 + (-10.0 * p[0]).exp()));
        let m = decision_margin(&g, 0.1).unwrap();
        let width = 0.2 * 1.5f64.ln();
        let exact = width * 4.0;
        assert!((width - 0.0811).abs() < 1e-4);
        assert!((m.area - exact).abs() < 0.05 * exact, "{} vs {exact}", m.area);
    }

    #[test]
    fn ridge_examples() {
        assert!(extract_ridges(&grid(21, |_| 1.0), 0.0).is_empty());
        let r = extract_ridges(&grid(21, |p| (-p[1] * p[1]).exp()), 0.5);
        assert!(!r.is_empty());
        assert!(r.nodes.iter().all(|n| n.j == 10));
        assert_eq!(r.len(), 19);
        let peak = extract_ridges(&grid(21, |p| if p == [0.0, 0.0] { 1.0 } else { 0.0 }), 0.5);
        assert_eq!(peak.len(), 1);
    }

    #[test]
    fn overlap_examples() {
        let spec = GridSpec::new(Bounds::default(), 21).unwrap();
        let ridges = RidgeSet {
            spec,
            nodes: vec![RidgeNode {
                i: 3,
                j: 3,
                value: 1.0,
                gradient: [0.0, 0.0],
            }],
        };
        let mut mask = vec![false; spec.len()];
        mask[spec.index(3, 3)] = true;
        assert_eq!(ridge_boundary_overlap(&ridges, &mask, 0).unwrap(), 1.0);
        let mut far = vec![false; spec.len()];
        far[spec.index(10, 10)] = true;
        assert_eq!(ridge_boundary_overlap(&ridges, &far, 3).unwrap(), 0.0);
        assert_eq!(ridge_boundary_overlap(&ridges, &far, 7).unwrap(), 1.0);
        let empty = RidgeSet { spec, nodes: vec![] };
        assert_eq!(ridge_boundary_overlap(&empty, &mask, 3), Err(Error::EmptyRidgeSet));
    }

    #[test]
    fn coherence_identity_and_translation() {
        let cfg = FlowConfig::new(0.1, 1.0).unwrap();
        let spec = GridSpec::new(Bounds::default(), 41).unwrap();
        let region = Region {
            spec,
            mask: (0..spec.len()).map(|k| spec.node_at(k)[0] < -0.5).collect(),
        };
        let id = zero_model(2, 1.0, OutputLayer::identity(2));
        let r = coherence_ratio(&id, &region, &region, (0.0, 1.0), 3000, 1, &cfg).unwrap();
        assert_eq!(r.ratio, 1.0);
        // Constant drift (3, 0) pushes the left strip past x = 1.
        let drift = {
            let mut m = crate::model::linear_model(Mat::zeros(2, 2), 1.0);
            m.schedule.block_mut(0)[0].a = vec![3.0, 0.0];
            m
        };
        let r = coherence_ratio(&drift, &region, &region, (0.0, 1.0), 3000, 1, &cfg).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert_eq!(r.epsilon_out, 1.0);
    }

    #[test]
    fn probe_examples() {
        let m = half_plane(1.0);
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        assert!(!adversarial_probe(&m, &[0.05, 0.3], 0.0, 10, &cfg).success);
        let hit = adversarial_probe(&m, &[0.05, 0.3], 0.1, 10, &cfg);
        assert!(hit.success);
        let w = hit.witness.unwrap();
        assert!(w[0] <= 0.0 && (w[0] - 0.05).hypot(w[1] - 0.3) <= 0.1 + 1e-12);
        assert!(!adversarial_probe(&m, &[0.5, 0.3], 0.1, 10, &cfg).success);
        // Flat prediction: nothing to climb.
        let flat = zero_model(
            2,
            1.0,
            OutputLayer {
                a: Mat::zeros(2, 2),
                c: vec![0.0, 0.8],
            },
        );
        assert!(!adversarial_probe(&flat, &[0.0, 0.0], 1e-3, 10, &cfg).success);
    }

    #[test]
    fn gradient_matches_differences() {
        let m = half_plane(0.7);
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let x = [0.3, -0.4];
        let (p, g) = pred_and_gradient(&m, &x, &cfg).unwrap();
        let h = 1e-6;
        for c in 0..2 {
            let mut a = x;
            let mut b = x;
            a[c] += h;
            b[c] -= h;
            let fd = (predict(&m, &a, &cfg).unwrap() - predict(&m, &b, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-7, "{c}: {fd} vs {}", g[c]);
        }
        assert!((p - predict(&m, &x, &cfg).unwrap()).abs() < 1e-15);
    }
}
