//! Samplers for encoder positions and distillation parameters, all working
//! on the normalized parameter cube `[0,1]^dim`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Candidate attempts per active point in Bridson's algorithm.
pub const BRIDSON_ATTEMPTS: usize = 30;

/// Default isotropic standard deviation for Gaussian kernel sampling.
pub const DEFAULT_SIGMA: f64 = 0.05;

/// Points closer than this are treated as duplicates when composing plans.
const DUPLICATE_EPS: f64 = 1e-9;

/// Background grid used to reject candidates closer than the radius.
struct DiskGrid {
    dim: usize,
    cell: f64,
    cells: usize,
    slots: Vec<Vec<usize>>,
    points: Vec<Vec<f64>>,
    r2: f64,
}

impl DiskGrid {
    fn new(dim: usize, radius: f64) -> Self {
        let cell = radius / (dim as f64).sqrt();
        let cells = ((1.0 / cell).ceil() as usize).max(1);
        Self {
            dim,
            cell,
            cells,
            slots: vec![Vec::new(); cells.pow(dim as u32)],
            points: Vec::new(),
            r2: radius * radius,
        }
    }

    fn coord(&self, v: f64) -> usize {
        ((v / self.cell) as usize).min(self.cells - 1)
    }

    fn slot(&self, p: &[f64]) -> usize {
        p.iter().fold(0, |acc, &v| acc * self.cells + self.coord(v))
    }

    fn fits(&self, p: &[f64]) -> bool {
        // a cell's diagonal is the radius, so conflicts lie within 2 cells
        let reach = 2isize;
        let base: Vec<isize> = p.iter().map(|&v| self.coord(v) as isize).collect();
        let span = (2 * reach + 1) as usize;
        let total = span.pow(self.dim as u32);
        'outer: for k in 0..total {
            let mut rem = k;
            let mut slot = 0usize;
            for axis in 0..self.dim {
                let off = (rem % span) as isize - reach;
                rem /= span;
                let c = base[axis] + off;
                if c < 0 || c >= self.cells as isize {
                    continue 'outer;
                }
                slot = slot * self.cells + c as usize;
            }
            for &i in &self.slots[slot] {
                let q = &self.points[i];
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < self.r2 {
                    return false;
                }
            }
        }
        true
    }

    fn insert(&mut self, p: Vec<f64>) -> usize {
        let s = self.slot(&p);
        let i = self.points.len();
        self.slots[s].push(i);
        self.points.push(p);
        i
    }
}

fn annulus_candidate(center: &[f64], radius: f64, rng: &mut Rng) -> Vec<f64> {
    let dim = center.len();
    let dir: Vec<f64> = match dim {
        1 => vec![if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 }],
        _ => loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        },
    };
    // uniform by volume within the shell [r, 2r]
    let d = dim as i32;
    let u = rng.uniform(1.0, 2f64.powi(d));
    let dist = radius * u.powf(1.0 / d as f64);
    center.iter().zip(dir).map(|(c, v)| c + dist * v).collect()
}

/// Bridson's Poisson-disk sampling on the unit cube, followed by a lattice
/// sweep that inserts any remaining admissible point so the result is
/// maximal. All pairwise distances are at least `radius`.
pub fn poisson_disk(dim: usize, radius: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if !(1..=3).contains(&dim) {
        return Err(Error::Config(format!("Poisson-disk sampling supports dims 1..=3, got {dim}")));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("Poisson-disk radius must be positive, got {radius}")));
    }
    let mut grid = DiskGrid::new(dim, radius);
    let first: Vec<f64> = (0..dim).map(|_| rng.uniform(0.0, 1.0)).collect();
    let mut active = vec![grid.insert(first)];
    while !active.is_empty() {
        let pick = rng.index(active.len());
        let center = grid.points[active[pick]].clone();
        let mut placed = false;
        for _ in 0..BRIDSON_ATTEMPTS {
            let c = annulus_candidate(&center, radius, rng);
            if c.iter().all(|v| (0.0..=1.0).contains(v)) && grid.fits(&c) {
                active.push(grid.insert(c));
                placed = true;
                break;
            }
        }
        if !placed {
            active.swap_remove(pick);
        }
    }
    let steps = (4.0 * (dim as f64).sqrt() / radius).ceil() as usize;
    let total = (steps + 1).pow(dim as u32);
    for k in 0..total {
        let mut rem = k;
        let p: Vec<f64> = (0..dim)
            .map(|_| {
                let i = rem % (steps + 1);
                rem /= steps + 1;
                i as f64 / steps as f64
            })
            .collect();
        if grid.fits(&p) {
            grid.insert(p);
        }
    }
    Ok(grid.points)
}

/// `count` draws: uniform anchor choice plus isotropic Gaussian noise,
/// clamped to the unit cube.
pub fn gaussian_samples(anchors: &[Vec<f64>], sigma: f64, count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if anchors.is_empty() {
        return Err(Error::Config("Gaussian sampling needs at least one anchor".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("Gaussian sigma must be positive, got {sigma}")));
    }
    Ok((0..count)
        .map(|_| {
            let a = &anchors[rng.index(anchors.len())];
            a.iter().map(|&c| (c + sigma * rng.normal()).clamp(0.0, 1.0)).collect()
        })
        .collect())
}

/// `i / (count - 1)` for `i in 0..count`.
pub fn even_1d(count: usize) -> Result<Vec<Vec<f64>>> {
    if count < 2 {
        return Err(Error::Config(format!("even_1d needs count >= 2, got {count}")));
    }
    Ok((0..count).map(|i| vec![i as f64 / (count - 1) as f64]).collect())
}

pub fn uniform(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.uniform(0.0, 1.0)).collect()).collect()
}

/// Regular lattice including both ends of every axis.
pub fn grid(counts: &[usize]) -> Result<Vec<Vec<f64>>> {
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Config(format!("grid needs >= 2 points per axis, got {counts:?}")));
    }
    let total: usize = counts.iter().product();
    Ok((0..total)
        .map(|k| {
            let mut rem = k;
            let mut p = vec![0.0; counts.len()];
            for (axis, &c) in counts.iter().enumerate().rev() {
                p[axis] = (rem % c) as f64 / (c - 1) as f64;
                rem /= c;
            }
            p
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Poisson {
        radius: f64,
    },
    Gaussian {
        /// Defaults to the training-set parameters.
        #[serde(default)]
        anchors: Option<Vec<Vec<f64>>>,
        #[serde(default = "default_sigma")]
        sigma: f64,
        count: usize,
    },
    #[serde(rename = "even_1d")]
    Even1d {
        count: usize,
    },
    Uniform {
        count: usize,
    },
    Grid {
        counts: Vec<usize>,
    },
    /// Normalized points given verbatim.
    Explicit {
        points: Vec<Vec<f64>>,
    },
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingPlan {
    pub fn single(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategies: vec![strategy],
            seed,
        }
    }
}

/// Runs every strategy (each on its own RNG stream) and concatenates the
/// results, dropping points that duplicate an earlier one.
pub fn compose_plan(plan: &SamplingPlan, dim: usize, default_anchors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let base = Rng::new(plan.seed);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, s) in plan.strategies.iter().enumerate() {
        let mut rng = base.fork(i as u64 + 1);
        let pts = match s {
            Strategy::Poisson { radius } => poisson_disk(dim, *radius, &mut rng)?,
            Strategy::Gaussian { anchors, sigma, count } => {
                let a = anchors.as_deref().unwrap_or(default_anchors);
                gaussian_samples(a, *sigma, *count, &mut rng)?
            }
            Strategy::Even1d { count } => {
                if dim != 1 {
                    return Err(Error::Config("even_1d only applies to one-dimensional spaces".into()));
                }
                even_1d(*count)?
            }
            Strategy::Uniform { count } => uniform(dim, *count, &mut rng),
            Strategy::Grid { counts } => {
                if counts.len() != dim {
                    return Err(Error::Config(format!("grid needs {dim} axis counts, got {counts:?}")));
                }
                grid(counts)?
            }
            Strategy::Explicit { points } => points.clone(),
        };
        for p in pts {
            if p.len() != dim || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("sample {p:?} outside [0,1]^{dim}")));
            }
            let dup = out.iter().any(|q| {
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 < DUPLICATE_EPS * DUPLICATE_EPS
            });
            if !dup {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("sampling plan produced no points".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn min_pairwise(points: &[Vec<f64>]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                m = m.min(d);
            }
        }
        m
    }

    #[test]
    fn huge_radius_gives_one_point() {
        for dim in 1..=3 {
            let pts = poisson_disk(dim, 2.0, &mut Rng::new(1)).unwrap();
            assert_eq!(pts.len(), 1);
        }
    }

    #[test]
    fn poisson_respects_radius_and_is_seeded() {
        let a = poisson_disk(2, 0.1, &mut Rng::new(5)).unwrap();
        assert!(min_pairwise(&a) >= 0.1);
        let b = poisson_disk(2, 0.1, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let c = poisson_disk(2, 0.1, &mut Rng::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_rejects_bad_arguments() {
        assert!(poisson_disk(4, 0.1, &mut Rng::new(1)).is_err());
        assert!(poisson_disk(2, 0.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let mut rng = Rng::new(3);
        let anchors = vec![vec![0.3, 0.7]];
        for p in gaussian_samples(&anchors, 1e-9, 50, &mut rng).unwrap() {
            assert!((p[0] - 0.3).abs() < 1e-6 && (p[1] - 0.7).abs() < 1e-6);
        }
        let corner = vec![vec![0.0, 1.0, 1.0]];
        for p in gaussian_samples(&corner, 0.3, 500, &mut rng).unwrap() {
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(gaussian_samples(&[], 0.1, 3, &mut rng).is_err());
        assert!(gaussian_samples(&anchors, 0.0, 3, &mut rng).is_err());
    }

    #[test]
    fn gaussian_spread_matches_sigma() {
        let mut rng = Rng::new(12);
        let pts = gaussian_samples(&[vec![0.5, 0.5]], 0.02, 10_000, &mut rng).unwrap();
        for axis in 0..2 {
            let n = pts.len() as f64;
            let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / n;
            let var = pts.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var.sqrt() - 0.02).abs() < 0.05 * 0.02, "std {}", var.sqrt());
        }
    }

    #[test]
    fn even_1d_examples() {
        assert_eq!(even_1d(2).unwrap(), vec![vec![0.0], vec![1.0]]);
        let five: Vec<f64> = even_1d(5).unwrap().into_iter().map(|p| p[0]).collect();
        assert_eq!(five, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let pts = even_1d(24).unwrap();
        for w in pts.windows(2) {
            assert!((w[1][0] - w[0][0] - 1.0 / 23.0).abs() < 1e-12);
        }
        assert!(even_1d(1).is_err());
    }

    #[test]
    fn grid_covers_corners() {
        let g = grid(&[3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.contains(&vec![0.0, 0.0]) && g.contains(&vec![1.0, 1.0]) && g.contains(&vec![0.5, 1.0]));
    }

    #[test]
    fn compose_examples() {
        let single = SamplingPlan::single(Strategy::Even1d { count: 7 }, 0);
        assert_eq!(compose_plan(&single, 1, &[]).unwrap(), even_1d(7).unwrap());

        let twice = SamplingPlan {
            strategies: vec![Strategy::Even1d { count: 4 }, Strategy::Even1d { count: 4 }],
            seed: 0,
        };
        assert_eq!(compose_plan(&twice, 1, &[]).unwrap(), even_1d(4).unwrap());

        // Poisson everywhere plus a tight Gaussian cluster that cannot collide exactly
        let plan = SamplingPlan {
            strategies: vec![
                Strategy::Poisson { radius: 0.2 },
                Strategy::Gaussian {
                    anchors: Some(vec![vec![0.5, 0.5]]),
                    sigma: 0.01,
                    count: 20,
                },
            ],
            seed: 9,
        };
        let base = Rng::new(9);
        let poisson = poisson_disk(2, 0.2, &mut base.fork(1)).unwrap();
        let composed = compose_plan(&plan, 2, &[]).unwrap();
        assert_eq!(composed.len(), poisson.len() + 20);

        assert!(compose_plan(&single, 2, &[]).is_err());
    }

    #[test]
    fn plan_parses_from_toml() {
        let plan: SamplingPlan = toml::from_str(
            r#"
            seed = 3
            strategies = [
                { kind = "poisson", radius = 0.1 },
                { kind = "gaussian", count = 40 },
                { kind = "even_1d", count = 5 },
            ]
            "#,
        )
        .unwrap();
        assert_eq!(plan.strategies.len(), 3);
        assert!(matches!(plan.strategies[1], Strategy::Gaussian { sigma, .. } if sigma == DEFAULT_SIGMA));
        let bad: std::result::Result<SamplingPlan, _> = toml::from_str("strategies = [{ kind = \"poisson\", radius = 0.1, extra = 1 }]");
        assert!(bad.is_err());
    }
}
