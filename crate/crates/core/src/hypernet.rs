//! Encoder atlas, neighbor search and weight interpolation.
//!
//! Given a scene parameter vector, the model gathers the nearest encoders
//! of the atlas, blends their hash tables (inverse distance weighting, or
//! plain linear interpolation on a sorted array when the parameter space is
//! one-dimensional) and pairs the result with the shared synthesis MLP.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_encoding::{encode_batch, HashEncoder, HashEncoderConfig};
use crate::networks::{mlp_forward_batch, MlpCache, MlpConfig, SynthesisMlp};

/// Normalized distances at or below this count as an exact hit.
pub const EXACT_HIT: f64 = 1e-12;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Scene parameter space; everything internal works on `[0,1]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpace {
    pub dims: Vec<ParamDim>,
}

impl ParamSpace {
    pub fn new(dims: Vec<ParamDim>) -> Result<Self> {
        let s = Self { dims };
        s.validate()?;
        Ok(s)
    }

    pub fn unit(names: &[&str]) -> Self {
        Self {
            dims: names
                .iter()
                .map(|n| ParamDim {
                    name: n.to_string(),
                    lower: 0.0,
                    upper: 1.0,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("parameter space needs at least one dimension".into()));
        }
        for d in &self.dims {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(Error::Config(format!(
                    "parameter {:?} needs finite lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn contains(&self, raw: &[f64]) -> bool {
        raw.len() == self.dim() && raw.iter().zip(&self.dims).all(|(v, d)| *v >= d.lower && *v <= d.upper)
    }

    /// Maps native units to `[0,1]^dim`, clamping. The flag reports whether
    /// any component had to be clamped.
    pub fn normalize(&self, raw: &[f64]) -> Result<(Vec<f64>, bool)> {
        if raw.len() != self.dim() {
            return Err(Error::shape(format!("{} scene parameters", self.dim()), raw.len()));
        }
        let mut clamped = false;
        let v = raw
            .iter()
            .zip(&self.dims)
            .map(|(&r, d)| {
                let t = (r - d.lower) / (d.upper - d.lower);
                if !(0.0..=1.0).contains(&t) {
                    clamped = true;
                }
                t.clamp(0.0, 1.0)
            })
            .collect();
        Ok((v, clamped))
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.dims)
            .map(|(&t, d)| d.lower + t * (d.upper - d.lower))
            .collect()
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Orders by squared distance, then by index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Median-split KD-tree, exhaustive within leaves of at most 8 points.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<Vec<f64>>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn build(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::shape(format!("points of dimension {dim}"), "mixed dimensions"));
        }
        let mut tree = Self {
            dim,
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build_node(0, tree.points.len());
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let axis = (0..self.dim)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = self.order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        let v = self.points[i][ax];
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
            })
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points as `(index, distance)`, ascending by distance
    /// with ties going to the lower index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k > self.len() {
            return Err(Error::OutOfRange {
                what: "neighborhood size",
                detail: format!("K = {k} exceeds {} points", self.len()),
            });
        }
        if query.len() != self.dim {
            return Err(Error::shape(format!("query of dimension {}", self.dim), query.len()));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        Ok(found.into_iter().map(|c| (c.index, c.d2.sqrt())).collect())
    }

    fn search(&self, node: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: squared_distance(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // equal bound still visited: a tie may carry a lower index
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Linear scan with the same ordering rule as [`KdTree::nearest`].
pub fn brute_force_knn(points: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate {
            d2: squared_distance(query, p),
            index,
        })
        .collect();
    all.sort();
    all.truncate(k);
    all.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
}

/// Bracketing encoders on the sorted 1-D array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub left: usize,
    pub right: usize,
    /// Weight of `right`; `left` gets `1 - weight`.
    pub weight: f64,
}

impl Bracket {
    pub fn weights(&self) -> Vec<(usize, f64)> {
        if self.left == self.right {
            vec![(self.left, 1.0)]
        } else {
            vec![(self.left, 1.0 - self.weight), (self.right, self.weight)]
        }
    }
}

/// Inverse distance weights, normalized. An exact hit returns a one-hot
/// weight on the first neighbor at distance zero.
pub fn idw_weights(neighbors: &[(usize, f64)], power: f64) -> Vec<(usize, f64)> {
    if let Some(&(hit, _)) = neighbors.iter().find(|(_, d)| *d <= EXACT_HIT) {
        return neighbors.iter().map(|&(i, _)| (i, if i == hit { 1.0 } else { 0.0 })).collect();
    }
    let raw: Vec<f64> = neighbors.iter().map(|&(_, d)| d.powf(-power)).collect();
    let total: f64 = raw.iter().sum();
    neighbors.iter().zip(raw).map(|(&(i, _), w)| (i, w / total)).collect()
}

/// Positions in parameter space with one hash encoder each.
#[derive(Debug, Clone)]
pub struct EncoderAtlas {
    space: ParamSpace,
    positions: Vec<Vec<f64>>,
    encoders: Vec<HashEncoder>,
    tree: KdTree,
    /// `(position, encoder index)` sorted by position; only for 1-D spaces.
    sorted: Vec<(f64, usize)>,
}

impl EncoderAtlas {
    /// `positions` are normalized to `[0,1]^dim`.
    pub fn new(space: ParamSpace, positions: Vec<Vec<f64>>, encoders: Vec<HashEncoder>) -> Result<Self> {
        space.validate()?;
        if positions.is_empty() {
            return Err(Error::Config("encoder atlas is empty".into()));
        }
        if positions.len() != encoders.len() {
            return Err(Error::shape(format!("{} encoders", positions.len()), encoders.len()));
        }
        let config = *encoders[0].config();
        if encoders.iter().any(|e| *e.config() != config) {
            return Err(Error::Config("all atlas encoders must share one configuration".into()));
        }
        for p in &positions {
            if p.len() != space.dim() || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("encoder position {p:?} outside [0,1]^{}", space.dim())));
            }
        }
        let tree = KdTree::build(positions.clone())?;
        for (i, p) in positions.iter().enumerate() {
            let nn = tree.nearest(p, 2.min(positions.len()))?;
            if let Some(&(j, d)) = nn.iter().find(|(j, _)| *j != i) {
                if d <= EXACT_HIT {
                    return Err(Error::Config(format!("encoder positions {i} and {j} coincide")));
                }
            }
        }
        let mut sorted = Vec::new();
        if space.dim() == 1 {
            sorted = positions.iter().enumerate().map(|(i, p)| (p[0], i)).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(Self {
            space,
            positions,
            encoders,
            tree,
            sorted,
        })
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn encoders(&self) -> &[HashEncoder] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [HashEncoder] {
        &mut self.encoders
    }

    pub fn encoder_config(&self) -> &HashEncoderConfig {
        self.encoders[0].config()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn knn_query(&self, theta: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        self.tree.nearest(theta, k)
    }

    /// Linear-interpolation bracket for a 1-D atlas; outside the hull the
    /// nearest endpoint takes weight 1.
    pub fn fast_path_1d(&self, t: f64) -> Result<Bracket> {
        if self.space.dim() != 1 {
            return Err(Error::Config("the 1-D fast path needs a one-dimensional space".into()));
        }
        let s = &self.sorted;
        let above = s.partition_point(|&(p, _)| p <= t);
        let one = |i: usize| Bracket {
            left: s[i].1,
            right: s[i].1,
            weight: 1.0,
        };
        Ok(if above == 0 {
            one(0)
        } else if s[above - 1].0 == t {
            one(above - 1)
        } else if above == s.len() {
            one(s.len() - 1)
        } else {
            let (pl, il) = s[above - 1];
            let (pr, ir) = s[above];
            Bracket {
                left: il,
                right: ir,
                weight: (t - pl) / (pr - pl),
            }
        })
    }

    /// Element-wise convex combination of encoder tables. A one-hot weight
    /// copies the encoder verbatim.
    pub fn interpolate_encoders(&self, weights: &[(usize, f64)]) -> Result<Vec<f32>> {
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if weights.is_empty() || (total - 1.0).abs() > 1e-6 {
            return Err(Error::OutOfRange {
                what: "interpolation weights",
                detail: format!("sum {total} is not 1"),
            });
        }
        let config = self.encoder_config();
        for &(i, _) in weights {
            let e = self.encoders.get(i).ok_or_else(|| Error::OutOfRange {
                what: "encoder index",
                detail: format!("{i} >= {}", self.len()),
            })?;
            if e.config() != config {
                return Err(Error::Config("encoder configuration mismatch".into()));
            }
        }
        let active: Vec<(usize, f32)> = weights
            .iter()
            .filter(|w| w.1 != 0.0)
            .map(|&(i, w)| (i, w as f32))
            .collect();
        if let [(i, _)] = active.as_slice() {
            if weights.iter().any(|&(j, w)| j == *i && w == 1.0) {
                return Ok(self.encoders[*i].params().to_vec());
            }
        }
        let mut out = vec![0.0f32; config.param_count()];
        for &(i, w) in &active {
            for (o, &p) in out.iter_mut().zip(self.encoders[i].params()) {
                *o += w * p;
            }
        }
        Ok(out)
    }
}

/// Atlas plus the shared synthesis MLP.
#[derive(Debug, Clone)]
pub struct HyperInrModel {
    pub atlas: EncoderAtlas,
    pub mlp: SynthesisMlp,
    /// Neighborhood size for spaces of dimension two or more.
    pub k: usize,
    pub power: f64,
}

impl HyperInrModel {
    pub fn new(atlas: EncoderAtlas, mlp: SynthesisMlp, k: Option<usize>) -> Result<Self> {
        let k = k.unwrap_or(if atlas.space().dim() == 1 { 2 } else { 4 });
        if k == 0 || k > atlas.len() {
            return Err(Error::Config(format!("K = {k} must be in 1..={}", atlas.len())));
        }
        if mlp.config.input_dim != atlas.encoder_config().output_dim() {
            return Err(Error::Config(format!(
                "MLP input {} does not match encoder output {}",
                mlp.config.input_dim,
                atlas.encoder_config().output_dim()
            )));
        }
        Ok(Self {
            atlas,
            mlp,
            k,
            power: 1.0,
        })
    }

    /// Interpolation weights over atlas encoders for a normalized θ.
    pub fn neighbor_weights(&self, theta: &[f64]) -> Result<Vec<(usize, f64)>> {
        if self.atlas.space().dim() == 1 {
            Ok(self.atlas.fast_path_1d(theta[0])?.weights())
        } else {
            let nn = self.atlas.knn_query(theta, self.k)?;
            Ok(idw_weights(&nn, self.power))
        }
    }

    /// Builds a self-contained INR for native-unit parameters.
    pub fn assemble_inr(&self, theta_raw: &[f64]) -> Result<InrInstance> {
        if self.atlas.is_empty() {
            return Err(Error::Config("encoder atlas is empty".into()));
        }
        let (theta, clamped) = self.atlas.space().normalize(theta_raw)?;
        if clamped {
            log::warn!("scene parameters {theta_raw:?} clamped into the parameter space");
        }
        let start = Instant::now();
        let weights = self.neighbor_weights(&theta)?;
        let params = self.atlas.interpolate_encoders(&weights)?;
        let elapsed = start.elapsed();
        Ok(InrInstance {
            encoder: HashEncoder::from_params(*self.atlas.encoder_config(), params)?,
            mlp_config: self.mlp.config,
            mlp_weights: self.mlp.params.as_slice().to_vec(),
            provenance: Provenance {
                theta_raw: theta_raw.to_vec(),
                theta,
                weights,
                assemble_time: elapsed,
            },
        })
    }

    /// The INR made of encoder `j` alone with the shared MLP.
    pub fn standalone_inr(&self, j: usize) -> Result<InrInstance> {
        let enc = self.atlas.encoders().get(j).ok_or_else(|| Error::OutOfRange {
            what: "encoder index",
            detail: format!("{j} >= {}", self.atlas.len()),
        })?;
        let theta = self.atlas.positions()[j].clone();
        Ok(InrInstance {
            encoder: enc.clone(),
            mlp_config: self.mlp.config,
            mlp_weights: self.mlp.params.as_slice().to_vec(),
            provenance: Provenance {
                theta_raw: self.atlas.space().denormalize(&theta),
                theta,
                weights: vec![(j, 1.0)],
                assemble_time: Duration::ZERO,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub theta_raw: Vec<f64>,
    pub theta: Vec<f64>,
    pub weights: Vec<(usize, f64)>,
    /// Wall-clock of neighbor search plus table interpolation.
    pub assemble_time: Duration,
}

/// An assembled INR: interpolated encoder plus shared MLP weights.
#[derive(Debug, Clone)]
pub struct InrInstance {
    pub encoder: HashEncoder,
    pub mlp_config: MlpConfig,
    pub mlp_weights: Vec<f32>,
    pub provenance: Provenance,
}

impl InrInstance {
    pub fn coord_dim(&self) -> usize {
        self.encoder.config().dim
    }

    pub fn output_dim(&self) -> usize {
        self.mlp_config.output_dim
    }

    pub fn eval(&self, x: &[f32]) -> Vec<f32> {
        self.eval_batch(x)
    }

    /// Evaluates `coords` (`n × dim`, row-major) to `n × output_dim`.
    pub fn eval_batch(&self, coords: &[f32]) -> Vec<f32> {
        evaluate_batch(
            self.encoder.config(),
            self.encoder.params(),
            &self.mlp_config,
            &self.mlp_weights,
            coords,
        )
    }
}

pub fn eval_inr(instance: &InrInstance, x: &[f32]) -> Vec<f32> {
    instance.eval(x)
}

/// Encode-then-synthesize from raw buffers. Shared by every evaluation path
/// so they agree bit for bit.
pub fn evaluate_batch(
    enc_config: &HashEncoderConfig,
    enc_params: &[f32],
    mlp_config: &MlpConfig,
    mlp_weights: &[f32],
    coords: &[f32],
) -> Vec<f32> {
    let rows = coords.len() / enc_config.dim;
    let mut features = vec![0.0; rows * enc_config.output_dim()];
    encode_batch(enc_config, enc_params, coords, &mut features);
    let mut cache = MlpCache::default();
    mlp_forward_batch(mlp_config, mlp_weights, &features, rows, &mut cache).to_vec()
}
