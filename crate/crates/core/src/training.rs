//! Losses, the stateless evaluator, teacher training, distillation-set
//! construction, the HyperINR distillation loop and the LERP baseline.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::io::{load_field, read_json, save_field, write_json};
use crate::fields::metrics::psnr_values;
use crate::fields::{Field, FieldShape};
use crate::hash_encoding::{encode_backward_batch, encode_batch, HashEncoderConfig};
use crate::hypernet::{brute_force_knn, idw_weights, HyperInrModel, ParamSpace};
use crate::networks::{mlp_backward_batch, mlp_forward_batch, CoordNet, CoordNetCache, MlpCache, MlpConfig};
use crate::numerics::{adam_step, AdamState, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

fn check_lengths(pred: &[f32], truth: &[f32]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions", truth.len()), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::shape("non-empty batch", 0));
    }
    Ok(())
}

/// Mean absolute error.
pub fn loss_l1(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean squared error.
pub fn loss_l2(pred: &[f32], truth: &[f32]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum::<f64>() / pred.len() as f64)
}

impl LossKind {
    pub fn value(self, pred: &[f32], truth: &[f32]) -> Result<f64> {
        match self {
            LossKind::L1 => loss_l1(pred, truth),
            LossKind::L2 => loss_l2(pred, truth),
        }
    }

    /// Loss plus its gradient with respect to `pred`, written to `grad`.
    pub fn value_and_grad(self, pred: &[f32], truth: &[f32], grad: &mut Vec<f32>) -> Result<f64> {
        let loss = self.value(pred, truth)?;
        let n = pred.len() as f32;
        grad.clear();
        grad.extend(pred.iter().zip(truth).map(|(&p, &t)| match self {
            LossKind::L1 => {
                if p > t {
                    1.0 / n
                } else if p < t {
                    -1.0 / n
                } else {
                    0.0
                }
            }
            LossKind::L2 => 2.0 * (p - t) / n,
        }));
        Ok(loss)
    }
}

/// Evaluates an INR from raw encoder and MLP buffers and backpropagates
/// into both.
#[derive(Debug, Clone)]
pub struct StatelessEvaluator {
    enc: HashEncoderConfig,
    mlp: MlpConfig,
    coords: Vec<f32>,
    features: Vec<f32>,
    feature_grad: Vec<f32>,
    cache: MlpCache,
}

impl StatelessEvaluator {
    pub fn new(enc: HashEncoderConfig, mlp: MlpConfig) -> Result<Self> {
        enc.validate()?;
        mlp.validate()?;
        if mlp.input_dim != enc.output_dim() {
            return Err(Error::Config(format!(
                "MLP input {} does not match encoder output {}",
                mlp.input_dim,
                enc.output_dim()
            )));
        }
        Ok(Self {
            enc,
            mlp,
            coords: Vec::new(),
            features: Vec::new(),
            feature_grad: Vec::new(),
            cache: MlpCache::default(),
        })
    }

    pub fn forward(&mut self, coords: &[f32], enc_params: &[f32], mlp_weights: &[f32]) -> Result<Vec<f32>> {
        if enc_params.len() != self.enc.param_count() || mlp_weights.len() != self.mlp.param_count() {
            return Err(Error::shape(
                format!("{} encoder / {} MLP values", self.enc.param_count(), self.mlp.param_count()),
                format!("{} / {}", enc_params.len(), mlp_weights.len()),
            ));
        }
        if coords.len() % self.enc.dim != 0 {
            return Err(Error::shape(format!("multiple of {} coordinates", self.enc.dim), coords.len()));
        }
        let rows = coords.len() / self.enc.dim;
        self.coords.clear();
        self.coords.extend_from_slice(coords);
        self.features.resize(rows * self.enc.output_dim(), 0.0);
        encode_batch(&self.enc, enc_params, coords, &mut self.features);
        Ok(mlp_forward_batch(&self.mlp, mlp_weights, &self.features, rows, &mut self.cache).to_vec())
    }

    /// Gradients of `Σ upstream · output` from the last forward, accumulated
    /// into `enc_grad` and `mlp_grad`.
    pub fn backward_into(
        &mut self,
        mlp_weights: &[f32],
        upstream: &[f32],
        enc_grad: &mut [f32],
        mlp_grad: &mut [f32],
    ) -> Result<()> {
        let rows = self.coords.len() / self.enc.dim;
        if upstream.len() != rows * self.mlp.output_dim {
            return Err(Error::shape(rows * self.mlp.output_dim, upstream.len()));
        }
        if enc_grad.len() != self.enc.param_count() || mlp_grad.len() != self.mlp.param_count() {
            return Err(Error::shape("gradient buffers sized like the parameters", enc_grad.len()));
        }
        self.feature_grad.resize(rows * self.enc.output_dim(), 0.0);
        mlp_backward_batch(&self.mlp, mlp_weights, &mut self.cache, upstream, mlp_grad, Some(&mut self.feature_grad));
        encode_backward_batch(&self.enc, &self.coords, &self.feature_grad, enc_grad);
        Ok(())
    }

    /// Fresh `(encoder gradient, MLP gradient)` for the last forward.
    pub fn backward(&mut self, mlp_weights: &[f32], upstream: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut ge = vec![0.0; self.enc.param_count()];
        let mut gm = vec![0.0; self.mlp.param_count()];
        self.backward_into(mlp_weights, upstream, &mut ge, &mut gm)?;
        Ok((ge, gm))
    }
}

/// Splits an interpolated-table gradient over the encoders that produced it.
pub fn route_gradients_to_atlas(enc_grad: &[f32], weights: &[(usize, f64)]) -> Vec<(usize, Vec<f32>)> {
    weights
        .iter()
        .map(|&(j, w)| (j, enc_grad.iter().map(|&g| w as f32 * g).collect()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Native units.
    pub theta: Vec<f64>,
    pub field: Field,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<Sample>,
}

impl TrainingSet {
    pub fn new(items: Vec<Sample>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Config("training set is empty".into()))?.field.shape();
        if let Some(bad) = items.iter().find(|s| s.field.shape() != first) {
            return Err(Error::shape(format!("{first:?}"), format!("{:?}", bad.field.shape())));
        }
        Ok(Self { items })
    }

    pub fn shape(&self) -> FieldShape {
        self.items[0].field.shape()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_psnr: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// FNV-1a over the bytes, as 16 hex digits.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct EpochLog {
    file: Option<File>,
}

impl EpochLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec).map_err(|e| Error::format("<log>", e))?;
            writeln!(f, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }
}

/// Aborts when the loss is non-finite or stays above 10× its first value
/// for 100 consecutive steps.
#[derive(Debug, Default)]
struct DivergenceGuard {
    initial: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    const FACTOR: f64 = 10.0;
    const PATIENCE: usize = 100;

    fn check(&mut self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let init = *self.initial.get_or_insert(loss);
        if loss > Self::FACTOR * init {
            self.over += 1;
            if self.over >= Self::PATIENCE {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss {loss:.3e} above 10x initial {init:.3e} for {} steps", self.over),
                });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Minibatches per epoch; `None` means one per training field.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    pub lr: f32,
    pub weight_decay: f32,
    pub loss: LossKind,
    /// Probe PSNR every this many epochs (the last epoch is always probed).
    #[serde(default)]
    pub probe_every: usize,
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
    #[serde(skip)]
    pub config_hash: String,
}

impl TeacherOptions {
    pub fn new(epochs: usize, batch_size: usize, loss: LossKind) -> Self {
        Self {
            epochs,
            batch_size,
            steps_per_epoch: None,
            lr: 1e-5,
            weight_decay: 1e-6,
            loss,
            probe_every: 0,
            log_path: None,
            config_hash: String::new(),
        }
    }
}

/// Teacher input rows: cell-center coordinates followed by normalized θ.
fn teacher_rows(shape: &FieldShape, theta: &[f64], points: impl Iterator<Item = usize>, out: &mut Vec<f32>) {
    let d = shape.coord_dim();
    let mut c = vec![0.0; d];
    out.clear();
    for p in points {
        shape.point_coord(p, &mut c);
        out.extend_from_slice(&c);
        out.extend(theta.iter().map(|&t| t as f32));
    }
}

/// Teacher prediction for one normalized θ over the whole lattice.
pub fn teacher_field_values(net: &CoordNet, shape: &FieldShape, theta: &[f64]) -> Result<Vec<f32>> {
    let expected = shape.coord_dim() + theta.len();
    if net.config.input_dim != expected || net.config.output_dim != shape.channels() {
        return Err(Error::shape(
            format!("CoordNet {expected} → {}", shape.channels()),
            format!("{} → {}", net.config.input_dim, net.config.output_dim),
        ));
    }
    const CHUNK: usize = 4096;
    let n = shape.num_points();
    let mut out = Vec::with_capacity(n * shape.channels());
    let mut cache = CoordNetCache::default();
    let mut rows = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        teacher_rows(shape, theta, start..end, &mut rows);
        out.extend(net.forward_batch(&rows, end - start, &mut cache));
        start = end;
    }
    Ok(out)
}

pub fn train_teacher(
    net: &mut CoordNet,
    data: &TrainingSet,
    space: &ParamSpace,
    opts: &TeacherOptions,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let shape = data.shape();
    let thetas: Vec<Vec<f64>> = data
        .items
        .iter()
        .map(|s| space.normalize(&s.theta).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    if net.config.input_dim != shape.coord_dim() + space.dim() || net.config.output_dim != shape.channels() {
        return Err(Error::shape(
            format!("CoordNet {} → {}", shape.coord_dim() + space.dim(), shape.channels()),
            format!("{} → {}", net.config.input_dim, net.config.output_dim),
        ));
    }
    let steps_per_epoch = opts.steps_per_epoch.unwrap_or(data.len()).max(1);
    let channels = shape.channels();
    let npts = shape.num_points();
    let d = shape.coord_dim();
    let mut adam = AdamState::new(net.params.len(), opts.lr, 0.9, 0.999, 1e-8);
    let mut grad = vec![0.0; net.params.len()];
    let mut cache = CoordNetCache::default();
    let mut input = Vec::with_capacity(opts.batch_size * net.config.input_dim);
    let mut target = Vec::with_capacity(opts.batch_size * channels);
    let mut upstream = Vec::new();
    let mut coord = vec![0.0; d];
    let mut log = EpochLog::open(opts.log_path.as_deref())?;
    let mut report = TrainReport {
        seed: rng.seed(),
        config_hash: opts.config_hash.clone(),
        steps: 0,
        epochs: Vec::new(),
    };
    let start = Instant::now();
    for epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            input.clear();
            target.clear();
            for _ in 0..opts.batch_size {
                let f = rng.index(data.len());
                let p = rng.index(npts);
                shape.point_coord(p, &mut coord);
                input.extend_from_slice(&coord);
                input.extend(thetas[f].iter().map(|&t| t as f32));
                target.extend_from_slice(&data.items[f].field.values()[p * channels..(p + 1) * channels]);
            }
            let pred = net.forward_batch(&input, opts.batch_size, &mut cache);
            let loss = opts.loss.value_and_grad(&pred, &target, &mut upstream)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: report.steps,
                    reason: format!("teacher loss is {loss}"),
                });
            }
            grad.fill(0.0);
            net.backward_batch(&cache, &upstream, &mut grad);
            adam_step(net.params.as_mut_slice(), &grad, &mut adam, opts.weight_decay)?;
            epoch_loss += loss;
            report.steps += 1;
        }
        let last = epoch + 1 == opts.epochs;
        let probe = if last || (opts.probe_every > 0 && (epoch + 1) % opts.probe_every == 0) {
            let values = teacher_field_values(net, &shape, &thetas[0])?;
            Some(psnr_values(&clamp01(values), data.items[0].field.values())?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / steps_per_epoch as f64,
            probe_psnr: probe,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log.write(&rec)?;
        report.epochs.push(rec);
    }
    Ok(report)
}

fn clamp01(mut v: Vec<f32>) -> Vec<f32> {
    for x in &mut v {
        *x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    }
    v
}

#[derive(Debug, Clone)]
enum Storage {
    Memory(Vec<Field>),
    Disk { dir: PathBuf, files: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    shape: FieldShape,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    theta: Vec<f64>,
    file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Teacher outputs at the distillation parameters, held in memory or as one
/// raw field per θ plus a manifest.
#[derive(Debug, Clone)]
pub struct DistillationSet {
    /// Native units.
    thetas: Vec<Vec<f64>>,
    shape: FieldShape,
    storage: Storage,
}

impl DistillationSet {
    pub fn in_memory(thetas: Vec<Vec<f64>>, fields: Vec<Field>) -> Result<Self> {
        if thetas.len() != fields.len() || fields.is_empty() {
            return Err(Error::shape(format!("{} fields", thetas.len()), fields.len()));
        }
        let shape = fields[0].shape();
        if fields.iter().any(|f| f.shape() != shape) {
            return Err(Error::Config("distillation fields differ in shape".into()));
        }
        Ok(Self {
            thetas,
            shape,
            storage: Storage::Memory(fields),
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn shape(&self) -> &FieldShape {
        &self.shape
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn is_on_disk(&self) -> bool {
        matches!(self.storage, Storage::Disk { .. })
    }

    pub fn field(&self, i: usize) -> Result<Cow<'_, Field>> {
        match &self.storage {
            Storage::Memory(fields) => Ok(Cow::Borrowed(&fields[i])),
            Storage::Disk { dir, files } => Ok(Cow::Owned(load_field(&dir.join(&files[i]))?.0)),
        }
    }

    /// Writes every field plus a manifest into `dir` and returns the
    /// disk-backed set.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, theta) in self.thetas.iter().enumerate() {
            let file = format!("frame_{i:05}.raw");
            save_field(&dir.join(&file), self.field(i)?.as_ref(), Some(theta))?;
            entries.push(ManifestEntry {
                theta: theta.clone(),
                file,
            });
        }
        let manifest = Manifest {
            shape: self.shape.clone(),
            entries,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Self::open_dir(dir)
    }

    /// Opens a set written by [`Self::write_to_dir`] without loading fields.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.entries.is_empty() {
            return Err(Error::format(dir.join(MANIFEST_FILE), "no entries"));
        }
        Ok(Self {
            thetas: manifest.entries.iter().map(|e| e.theta.clone()).collect(),
            shape: manifest.shape,
            storage: Storage::Disk {
                dir: dir.to_path_buf(),
                files: manifest.entries.into_iter().map(|e| e.file).collect(),
            },
        })
    }

    pub fn load_all(&self) -> Result<Self> {
        let fields = (0..self.len()).map(|i| self.field(i).map(Cow::into_owned)).collect::<Result<_>>()?;
        Self::in_memory(self.thetas.clone(), fields)
    }
}

/// Evaluates the teacher on the full lattice at every θ (native units).
pub fn build_distillation_set(
    teacher: &CoordNet,
    space: &ParamSpace,
    params: &[Vec<f64>],
    shape: &FieldShape,
) -> Result<DistillationSet> {
    let mut fields = Vec::with_capacity(params.len());
    for theta in params {
        if !space.contains(theta) {
            return Err(Error::OutOfRange {
                what: "distillation parameter",
                detail: format!("{theta:?}"),
            });
        }
        let (t, _) = space.normalize(theta)?;
        fields.push(shape.field_from_values(teacher_field_values(teacher, shape, &t)?)?);
    }
    DistillationSet::in_memory(params.to_vec(), fields)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub loss: LossKind,
    #[serde(default)]
    pub freeze_mlp: bool,
    #[serde(default)]
    pub probe_every: usize,
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
    #[serde(skip)]
    pub config_hash: String,
}

impl DistillOptions {
    pub fn new(epochs: usize, loss: LossKind) -> Self {
        Self {
            epochs,
            batch_size: 4096,
            lr: 1e-3,
            loss,
            freeze_mlp: false,
            probe_every: 0,
            log_path: None,
            config_hash: String::new(),
        }
    }
}

/// Gradients of one minibatch through interpolation, evaluation and loss.
#[derive(Debug, Clone)]
pub struct HyperGradients {
    pub loss: f64,
    /// Per neighbor encoder: `(atlas index, gradient)`.
    pub encoders: Vec<(usize, Vec<f32>)>,
    pub mlp: Vec<f32>,
}

/// Loss and exact gradients for normalized `theta` on a coordinate batch.
pub fn hyper_loss_and_grads(
    model: &HyperInrModel,
    theta: &[f64],
    coords: &[f32],
    targets: &[f32],
    loss: LossKind,
) -> Result<HyperGradients> {
    let weights = model.neighbor_weights(theta)?;
    let table = model.atlas.interpolate_encoders(&weights)?;
    let mut eval = StatelessEvaluator::new(*model.atlas.encoder_config(), model.mlp.config)?;
    let pred = eval.forward(coords, &table, model.mlp.params.as_slice())?;
    let mut upstream = Vec::new();
    let value = loss.value_and_grad(&pred, targets, &mut upstream)?;
    let (enc_grad, mlp_grad) = eval.backward(model.mlp.params.as_slice(), &upstream)?;
    Ok(HyperGradients {
        loss: value,
        encoders: route_gradients_to_atlas(&enc_grad, &weights),
        mlp: mlp_grad,
    })
}

/// Optimizes atlas encoders and the shared MLP against teacher fields.
/// Only encoders that receive gradients get (lazily created) Adam state.
pub fn distill_hyperinr(
    model: &mut HyperInrModel,
    dset: &DistillationSet,
    opts: &DistillOptions,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if dset.is_empty() {
        return Err(Error::Config("distillation set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let shape = dset.shape().clone();
    let enc_cfg = *model.atlas.encoder_config();
    if shape.coord_dim() != enc_cfg.dim || shape.channels() != model.mlp.config.output_dim {
        return Err(Error::shape(
            format!("{}-D coords → {} channels", enc_cfg.dim, model.mlp.config.output_dim),
            format!("{:?}", shape),
        ));
    }
    let thetas: Vec<Vec<f64>> = dset
        .thetas()
        .iter()
        .map(|t| model.atlas.space().normalize(t).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    let channels = shape.channels();
    let npts = shape.num_points();
    let d = shape.coord_dim();
    let mut eval = StatelessEvaluator::new(enc_cfg, model.mlp.config)?;
    let mut enc_adam: Vec<Option<AdamState>> = vec![None; model.atlas.len()];
    let mut mlp_adam = AdamState::new(model.mlp.params.len(), opts.lr, 0.9, 0.999, 1e-10);
    let mut enc_grad = vec![0.0; enc_cfg.param_count()];
    let mut routed = vec![0.0; enc_cfg.param_count()];
    let mut mlp_grad = vec![0.0; model.mlp.params.len()];
    let mut coords = Vec::with_capacity(opts.batch_size * d);
    let mut targets = Vec::with_capacity(opts.batch_size * channels);
    let mut upstream = Vec::new();
    let mut c = vec![0.0; d];
    let mut guard = DivergenceGuard::default();
    let mut log = EpochLog::open(opts.log_path.as_deref())?;
    let mut report = TrainReport {
        seed: rng.seed(),
        config_hash: opts.config_hash.clone(),
        steps: 0,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..dset.len()).collect();
    let start = Instant::now();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let field = dset.field(i)?;
            let values = field.values();
            coords.clear();
            targets.clear();
            for _ in 0..opts.batch_size {
                let p = rng.index(npts);
                shape.point_coord(p, &mut c);
                coords.extend_from_slice(&c);
                targets.extend_from_slice(&values[p * channels..(p + 1) * channels]);
            }
            let weights = model.neighbor_weights(&thetas[i])?;
            let table = model.atlas.interpolate_encoders(&weights)?;
            let pred = eval.forward(&coords, &table, model.mlp.params.as_slice())?;
            let loss = opts.loss.value_and_grad(&pred, &targets, &mut upstream)?;
            guard.check(report.steps, loss)?;
            enc_grad.fill(0.0);
            mlp_grad.fill(0.0);
            eval.backward_into(model.mlp.params.as_slice(), &upstream, &mut enc_grad, &mut mlp_grad)?;
            for &(j, w) in &weights {
                if w == 0.0 {
                    continue;
                }
                let wf = w as f32;
                for (r, &g) in routed.iter_mut().zip(&enc_grad) {
                    *r = wf * g;
                }
                let state = enc_adam[j].get_or_insert_with(|| AdamState::new(routed.len(), opts.lr, 0.9, 0.999, 1e-10));
                adam_step(model.atlas.encoders_mut()[j].params_mut(), &routed, state, 0.0)?;
            }
            if !opts.freeze_mlp {
                adam_step(model.mlp.params.as_mut_slice(), &mlp_grad, &mut mlp_adam, 0.0)?;
            }
            epoch_loss += loss;
            report.steps += 1;
        }
        let last = epoch + 1 == opts.epochs;
        let probe = if last || (opts.probe_every > 0 && (epoch + 1) % opts.probe_every == 0) {
            let inst = model.assemble_inr(&dset.thetas()[0])?;
            let pred = clamp01(inst.eval_batch(&shape.lattice()));
            Some(psnr_values(&pred, dset.field(0)?.values())?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / order.len() as f64,
            probe_psnr: probe,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log.write(&rec)?;
        report.epochs.push(rec);
    }
    Ok(report)
}

/// Evaluates an assembled HyperINR on the full lattice and clamps to `[0,1]`.
pub fn hyper_field(model: &HyperInrModel, theta_raw: &[f64], shape: &FieldShape) -> Result<Field> {
    let inst = model.assemble_inr(theta_raw)?;
    shape.field_from_values(inst.eval_batch(&shape.lattice()))
}

/// Voxel-wise interpolation of stored fields: IDW over the 4 nearest in
/// two or more dimensions, bracketing linear interpolation in one.
#[derive(Debug, Clone)]
pub struct LerpBaseline {
    space: ParamSpace,
    /// Normalized.
    thetas: Vec<Vec<f64>>,
    fields: Vec<Field>,
}

pub const LERP_K: usize = 4;

impl LerpBaseline {
    pub fn new(space: ParamSpace, items: &[Sample]) -> Result<Self> {
        let data = TrainingSet::new(items.to_vec())?;
        let thetas = data
            .items
            .iter()
            .map(|s| space.normalize(&s.theta).map(|(t, _)| t))
            .collect::<Result<_>>()?;
        Ok(Self {
            space,
            thetas,
            fields: data.items.into_iter().map(|s| s.field).collect(),
        })
    }

    pub fn from_distillation(space: ParamSpace, dset: &DistillationSet) -> Result<Self> {
        let items = (0..dset.len())
            .map(|i| {
                Ok(Sample {
                    theta: dset.thetas()[i].clone(),
                    field: dset.field(i)?.into_owned(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(space, &items)
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    /// Blend weights for a normalized θ.
    pub fn weights(&self, theta: &[f64]) -> Vec<(usize, f64)> {
        if self.space.dim() == 1 {
            let t = theta[0];
            let mut order: Vec<usize> = (0..self.thetas.len()).collect();
            order.sort_by(|&a, &b| self.thetas[a][0].total_cmp(&self.thetas[b][0]).then(a.cmp(&b)));
            let first = order[0];
            let last = *order.last().unwrap();
            if t <= self.thetas[first][0] {
                return vec![(first, 1.0)];
            }
            if t >= self.thetas[last][0] {
                return vec![(last, 1.0)];
            }
            let hi = order.partition_point(|&i| self.thetas[i][0] <= t);
            let (a, b) = (order[hi - 1], order[hi]);
            let (ta, tb) = (self.thetas[a][0], self.thetas[b][0]);
            let w = (t - ta) / (tb - ta);
            if w == 0.0 {
                return vec![(a, 1.0)];
            }
            vec![(a, 1.0 - w), (b, w)]
        } else {
            let k = LERP_K.min(self.thetas.len());
            idw_weights(&brute_force_knn(&self.thetas, theta, k), 1.0)
        }
    }

    pub fn query_normalized(&self, theta: &[f64]) -> Result<Field> {
        if theta.len() != self.space.dim() {
            return Err(Error::shape(self.space.dim(), theta.len()));
        }
        let weights = self.weights(theta);
        let n = self.fields[0].values().len();
        let mut acc = vec![0.0f64; n];
        for &(i, w) in &weights {
            for (a, &v) in acc.iter_mut().zip(self.fields[i].values()) {
                *a += w * v as f64;
            }
        }
        self.fields[0].shape().field_from_values(acc.into_iter().map(|v| v as f32).collect())
    }

    /// Interpolated field at native-unit `theta`.
    pub fn query(&self, theta_raw: &[f64]) -> Result<Field> {
        let (t, _) = self.space.normalize(theta_raw)?;
        self.query_normalized(&t)
    }
}

/// Native-unit θ → interpolated stored field.
pub fn lerp_baseline(space: &ParamSpace, data: &[Sample], theta_raw: &[f64]) -> Result<Field> {
    LerpBaseline::new(space.clone(), data)?.query(theta_raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldKind, ScalarField};
    use crate::hash_encoding::HashEncoder;
    use crate::hypernet::EncoderAtlas;
    use crate::networks::{init_hash_encoder, init_siren, Activation, CoordNetConfig, SynthesisMlp};
    use crate::numerics::{finite_diff_grad, relative_error};

    #[test]
    fn loss_examples() {
        assert_eq!(loss_l1(&[0.5, 0.2], &[0.5, 0.2]).unwrap(), 0.0);
        assert_eq!(loss_l1(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(loss_l2(&[0.0], &[2.0]).unwrap(), 4.0);
        assert!(loss_l1(&[0.0], &[1.0, 2.0]).is_err());
        assert!(loss_l2(&[0.0, 1.0], &[1.0]).is_err());
        let a = [0.1f32, -0.4, 0.9];
        let b = [0.3f32, 0.2, -0.5];
        assert_eq!(loss_l2(&a, &b).unwrap(), loss_l2(&b, &a).unwrap());
        let scaled = |c: f32| {
            let sa: Vec<f32> = a.iter().map(|v| v * c).collect();
            let sb: Vec<f32> = b.iter().map(|v| v * c).collect();
            loss_l1(&sa, &sb).unwrap()
        };
        assert!((scaled(-2.0) - 2.0 * loss_l1(&a, &b).unwrap()).abs() < 1e-6);
    }

    fn toy_configs() -> (HashEncoderConfig, MlpConfig) {
        let enc = HashEncoderConfig {
            dim: 2,
            levels: 2,
            table_size: 1 << 4,
            features: 2,
            base_resolution: 2,
        };
        let mlp = MlpConfig {
            input_dim: enc.output_dim(),
            hidden_width: 4,
            hidden_layers: 1,
            output_dim: 1,
            activation: Activation::Relu,
        };
        (enc, mlp)
    }

    #[test]
    fn stateless_evaluator_gradients_match_finite_differences() {
        let (enc, mlp) = toy_configs();
        let mut rng = Rng::new(5);
        let ep: Vec<f32> = (0..enc.param_count()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut m = SynthesisMlp::zeros(mlp).unwrap();
        m.init_he(&mut rng);
        let mw = m.params.as_slice().to_vec();
        let coords: Vec<f32> = (0..6 * 2).map(|_| rng.uniform(0.05, 0.95) as f32).collect();
        let up: Vec<f32> = (0..6).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut eval = StatelessEvaluator::new(enc, mlp).unwrap();
        eval.forward(&coords, &ep, &mw).unwrap();
        let (ge, gm) = eval.backward(&mw, &up).unwrap();

        let objective = |e: &[f32], w: &[f32]| -> f64 {
            let mut ev = StatelessEvaluator::new(enc, mlp).unwrap();
            let out = ev.forward(&coords, e, w).unwrap();
            out.iter().zip(&up).map(|(&o, &u)| o as f64 * u as f64).sum()
        };
        let x: Vec<f64> = ep.iter().chain(&mw).map(|&v| v as f64).collect();
        let fd = finite_diff_grad(
            |p| {
                let e: Vec<f32> = p[..ep.len()].iter().map(|&v| v as f32).collect();
                let w: Vec<f32> = p[ep.len()..].iter().map(|&v| v as f32).collect();
                objective(&e, &w)
            },
            &x,
            1e-2,
        );
        let analytic: Vec<f32> = ge.iter().chain(&gm).cloned().collect();
        for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            assert!(relative_error(a as f64, f) < 1e-2 || (a as f64 - f).abs() < 1e-3, "param {i}: {a} vs {f}");
        }

        let zero = vec![0.0; 6];
        let (ge0, gm0) = eval.backward(&mw, &zero).unwrap();
        assert!(ge0.iter().chain(&gm0).all(|&g| g == 0.0));
    }

    #[test]
    fn routing_is_linear_and_conservative() {
        let g = vec![1.0f32, -2.0, 0.5];
        let one = route_gradients_to_atlas(&g, &[(3, 1.0)]);
        assert_eq!(one, vec![(3, g.clone())]);
        let half = route_gradients_to_atlas(&g, &[(0, 0.5), (1, 0.5)]);
        assert_eq!(half[0].1, vec![0.5, -1.0, 0.25]);
        let parts = route_gradients_to_atlas(&g, &[(0, 0.2), (1, 0.3), (2, 0.5)]);
        for k in 0..3 {
            let sum: f32 = parts.iter().map(|(_, v)| v[k]).sum();
            assert!((sum - g[k]).abs() < 1e-6);
        }
    }

    fn scalar(dims: Vec<usize>, f: impl Fn([f32; 3]) -> f32) -> Field {
        Field::Scalar(ScalarField::from_fn(dims, f).unwrap())
    }

    #[test]
    fn lerp_baseline_examples() {
        let space = ParamSpace::unit(&["t"]);
        let a = scalar(vec![4, 4, 4], |p| p[0]);
        let b = scalar(vec![4, 4, 4], |p| p[1]);
        let items = vec![
            Sample { theta: vec![0.0], field: a.clone() },
            Sample { theta: vec![1.0], field: b.clone() },
        ];
        assert_eq!(lerp_baseline(&space, &items, &[0.0]).unwrap(), a);
        let mid = lerp_baseline(&space, &items, &[0.5]).unwrap();
        for ((m, x), y) in mid.values().iter().zip(a.values()).zip(b.values()) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-7);
        }

        // two-dimensional: brute-force IDW oracle per voxel
        let space2 = ParamSpace::unit(&["u", "v"]);
        let mut rng = Rng::new(4);
        let items2: Vec<Sample> = (0..7)
            .map(|i| Sample {
                theta: vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)],
                field: scalar(vec![3, 3, 2], move |p| (p[0] * (i as f32 + 1.0)).sin().abs()),
            })
            .collect();
        let q = [0.4, 0.6];
        let got = lerp_baseline(&space2, &items2, &q).unwrap();
        let mut d: Vec<(usize, f64)> = items2
            .iter()
            .enumerate()
            .map(|(i, s)| (i, ((s.theta[0] - q[0]).powi(2) + (s.theta[1] - q[1]).powi(2)).sqrt()))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1));
        let inv: Vec<f64> = d[..4].iter().map(|x| 1.0 / x.1).collect();
        let total: f64 = inv.iter().sum();
        for v in 0..got.values().len() {
            let expect: f64 = d[..4]
                .iter()
                .zip(&inv)
                .map(|(&(i, _), w)| w / total * items2[i].field.values()[v] as f64)
                .sum();
            assert!((got.values()[v] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn distillation_storage_is_transparent() {
        let (enc, _) = toy_configs();
        let _ = enc;
        let cfg = CoordNetConfig {
            width: 16,
            encoder_blocks: 1,
            trunk_blocks: 0,
            decoder_blocks: 0,
            ..CoordNetConfig::full(3, 1)
        };
        let mut net = CoordNet::zeros(cfg).unwrap();
        init_siren(&mut net, &mut Rng::new(1));
        let space = ParamSpace::unit(&["t"]);
        let shape = FieldShape {
            kind: FieldKind::Scalar,
            dims: vec![5, 4],
        };
        let params = vec![vec![0.0], vec![0.3], vec![1.0]];
        let mem = build_distillation_set(&net, &space, &params, &shape).unwrap();
        assert_eq!(mem.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let disk = mem.write_to_dir(dir.path()).unwrap();
        assert!(disk.is_on_disk());
        let reopened = DistillationSet::open_dir(dir.path()).unwrap();
        for i in 0..3 {
            let a: Vec<u32> = mem.field(i).unwrap().values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = reopened.field(i).unwrap().values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(reopened.thetas(), mem.thetas());
    }

    #[test]
    fn divergence_guard_rules() {
        let mut g = DivergenceGuard::default();
        g.check(0, 1.0).unwrap();
        for s in 1..100 {
            g.check(s, 11.0).unwrap();
        }
        assert!(g.check(100, 11.0).is_err());
        let mut g = DivergenceGuard::default();
        assert!(g.check(0, f64::NAN).is_err());
    }

    #[test]
    fn teacher_zero_epochs_keeps_weights() {
        let cfg = CoordNetConfig {
            width: 8,
            encoder_blocks: 1,
            trunk_blocks: 0,
            decoder_blocks: 0,
            ..CoordNetConfig::full(3, 1)
        };
        let mut net = CoordNet::zeros(cfg).unwrap();
        init_siren(&mut net, &mut Rng::new(2));
        let before = net.clone();
        let data = TrainingSet::new(vec![Sample {
            theta: vec![0.5],
            field: scalar(vec![4, 4], |p| p[0]),
        }])
        .unwrap();
        let rep = train_teacher(&mut net, &data, &ParamSpace::unit(&["t"]), &TeacherOptions::new(0, 8, LossKind::L1), &mut Rng::new(3)).unwrap();
        assert!(rep.epochs.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn distillation_reduces_loss_with_frozen_mlp() {
        let (enc, mlp) = toy_configs();
        let mut rng = Rng::new(9);
        let positions = vec![vec![0.0], vec![1.0]];
        let encoders = positions
            .iter()
            .map(|_| {
                let mut e = HashEncoder::zeros(enc).unwrap();
                init_hash_encoder(&mut e, &mut rng);
                e
            })
            .collect();
        let atlas = EncoderAtlas::new(ParamSpace::unit(&["t"]), positions, encoders).unwrap();
        let mut m = SynthesisMlp::zeros(mlp).unwrap();
        m.init_he(&mut rng);
        let mut model = HyperInrModel::new(atlas, m, None).unwrap();
        let frozen = model.mlp.clone();
        let fields = vec![scalar(vec![8, 8], |p| p[0]), scalar(vec![8, 8], |p| p[1])];
        let dset = DistillationSet::in_memory(vec![vec![0.0], vec![1.0]], fields).unwrap();
        let mut opts = DistillOptions::new(100, LossKind::L2);
        opts.batch_size = 64;
        opts.freeze_mlp = true;
        let rep = distill_hyperinr(&mut model, &dset, &opts, &mut rng).unwrap();
        assert_eq!(model.mlp, frozen);
        let l = rep.losses();
        let head: f64 = l[..10].iter().sum();
        let tail: f64 = l[l.len() - 10..].iter().sum();
        assert!(tail < 0.7 * head, "{l:?}");
    }
}
