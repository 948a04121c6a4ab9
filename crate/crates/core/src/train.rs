//! Triplet fine-tuning: per-epoch mining from current descriptors, batch-hard
//! triplet loss and Adam over the trainable parameters.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{head_backward, head_forward, Descriptor};
use crate::io::checkpoint::Checkpoint;
use crate::io::ppm::load_image;
use crate::io::sha256_hex;
use crate::manifest::{Manifest, Record, Split};
use crate::model::{is_backbone, Lgcn, Stem};
use crate::params::{accumulate, zeros_like, Parameters};
use crate::retrieval::{evaluate, geodistance, RecallResult, DEFAULT_MATCH_THRESHOLD_M};
use crate::synth::World;
use crate::tensor::Tensor;

/// Views closer than this (or sharing a place id) may serve as positives.
pub const POSITIVE_RADIUS_M: f64 = 10.0;
/// Views farther than this (or from another place) may serve as negatives.
pub const NEGATIVE_RADIUS_M: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    /// Hard negatives mined per anchor; the loss uses the hardest of them.
    pub negatives: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub recall_n: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 5,
            margin: 0.1,
            negatives: 2,
            seed: 0,
            freeze_backbone: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            recall_n: vec![1, 5, 10],
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::Config("batch size and negatives must be positive".into()));
        }
        if self.recall_n.is_empty() || self.recall_n.contains(&0) {
            return Err(Error::Config("recall N values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: u64,
    pub positive: u64,
    pub negatives: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Mining {
    pub triplets: Vec<Triplet>,
    /// Anchors without any valid positive.
    pub skipped: usize,
}

pub fn is_positive(a: &Record, b: &Record) -> Result<bool> {
    if let (Some(x), Some(y)) = (a.place_id, b.place_id) {
        if x == y {
            return Ok(true);
        }
    }
    Ok(geodistance(a.coord(), b.coord())? <= POSITIVE_RADIUS_M)
}

pub fn is_negative(a: &Record, b: &Record) -> Result<bool> {
    if is_positive(a, b)? {
        return Ok(false);
    }
    if let (Some(x), Some(y)) = (a.place_id, b.place_id) {
        if x != y {
            return Ok(true);
        }
    }
    Ok(geodistance(a.coord(), b.coord())? > NEGATIVE_RADIUS_M)
}

/// For every anchor: the most similar valid positive and the `k` most
/// similar valid negatives (ties to the lower id). An unordered
/// anchor/positive pair is emitted at most once.
pub fn mine_triplets(records: &[Record], descriptors: &[Descriptor], k: usize) -> Result<Mining> {
    if records.len() != descriptors.len() {
        return Err(Error::InvalidShape(format!(
            "{} records but {} descriptors",
            records.len(),
            descriptors.len()
        )));
    }
    let per_anchor: Vec<Result<Option<Triplet>>> = (0..records.len())
        .into_par_iter()
        .map(|i| {
            let a = &records[i];
            let mut best_pos: Option<(f64, u64)> = None;
            let mut negs: Vec<(f64, u64)> = Vec::new();
            for (j, r) in records.iter().enumerate() {
                if j == i {
                    continue;
                }
                let s = descriptors[i].dot(&descriptors[j]);
                if is_positive(a, r)? {
                    let better = match best_pos {
                        None => true,
                        Some((bs, bid)) => s > bs || (s == bs && r.id < bid),
                    };
                    if better {
                        best_pos = Some((s, r.id));
                    }
                } else if is_negative(a, r)? {
                    negs.push((s, r.id));
                }
            }
            let Some((_, pos)) = best_pos else {
                return Ok(None);
            };
            negs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            negs.truncate(k);
            if negs.is_empty() {
                return Ok(None);
            }
            Ok(Some(Triplet {
                anchor: a.id,
                positive: pos,
                negatives: negs.into_iter().map(|(_, id)| id).collect(),
            }))
        })
        .collect();
    let mut out = Mining::default();
    let mut pairs = HashSet::new();
    for t in per_anchor {
        match t? {
            None => out.skipped += 1,
            Some(t) => {
                let key = (t.anchor.min(t.positive), t.anchor.max(t.positive));
                if pairs.insert(key) {
                    out.triplets.push(t);
                }
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + m)`.
pub fn triplet_loss(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> f64 {
    (sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0)
}

/// Batch-hard triplet loss against the closest of `negs`; returns the loss
/// and gradients `(∂a, ∂p, ∂negs)`.
pub fn hardest_triplet(a: &Tensor, p: &Tensor, negs: &[&Tensor], margin: f64) -> (f64, Tensor, Tensor, Vec<Tensor>) {
    let dp = sq_dist(a, p);
    let (hard, dn) = negs
        .iter()
        .enumerate()
        .map(|(i, n)| (i, sq_dist(a, n)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("at least one negative");
    let loss = (dp - dn + margin).max(0.0);
    let mut gn: Vec<Tensor> = negs.iter().map(|n| n.zeros_like()).collect();
    if loss <= 0.0 {
        return (0.0, a.zeros_like(), p.zeros_like(), gn);
    }
    let n = negs[hard];
    let ga = n.sub(p).expect("same dim").scale(2.0);
    let gp = p.sub(a).expect("same dim").scale(2.0);
    gn[hard] = a.sub(n).expect("same dim").scale(2.0);
    (loss, ga, gp, gn)
}

/// Adam with bias correction over a fixed list of parameter names.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params[i]` from `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| p.zeros_like()).collect();
            self.v = params.iter().map(|p| p.zeros_like()).collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// SHA-256 over `(name, shape, little-endian values)` of the selected tensors.
pub fn params_sha256(model: &Lgcn, select: impl Fn(&str) -> bool) -> String {
    let mut buf = Vec::new();
    model.visit("", &mut |name, t| {
        if select(&name) {
            buf.extend((name.len() as u64).to_le_bytes());
            buf.extend(name.as_bytes());
            for &d in t.shape() {
                buf.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend(v.to_le_bytes());
            }
        }
    });
    sha256_hex(&buf)
}

/// Manifest plus decoded images keyed by record id.
pub struct Dataset {
    pub manifest: Manifest,
    pub images: HashMap<u64, Tensor>,
}

impl Dataset {
    /// Loads every image named in the manifest, relative to its directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let images = manifest
            .records
            .par_iter()
            .map(|r| Ok((r.id, load_image(&root.join(&r.path))?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { manifest, images })
    }

    /// In-memory dataset from a generated world, skipping the disk round trip.
    pub fn from_world(world: &World, name: &str) -> Self {
        let manifest = world.manifest(name);
        let images = world.views.iter().map(|v| (v.record.id, v.image.clone())).collect();
        Self { manifest, images }
    }

    pub fn image(&self, id: u64) -> Result<&Tensor> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no image for id {id}")))
    }

    pub fn describe(&self, model: &Lgcn) -> Result<HashMap<u64, Descriptor>> {
        let ids: Vec<u64> = self.manifest.records.iter().map(|r| r.id).collect();
        let images = ids.iter().map(|&id| self.image(id).cloned()).collect::<Result<Vec<_>>>()?;
        Ok(ids.into_iter().zip(model.describe_all(&images)?).collect())
    }

    pub fn evaluate(&self, model: &Lgcn, n_values: &[usize]) -> Result<(RecallResult, HashMap<u64, Descriptor>)> {
        let d = self.describe(model)?;
        let r = evaluate(&self.manifest, &d, n_values, DEFAULT_MATCH_THRESHOLD_M, false)?;
        Ok((r, d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean batch loss; absent for the untrained evaluation at epoch 0.
    pub loss: Option<f64>,
    pub steps: usize,
    pub triplets: usize,
    pub skipped_anchors: usize,
    pub recall_n: Vec<usize>,
    pub recall: Vec<f64>,
    pub backbone_sha256: String,
    pub trainable_sha256: String,
}

impl EpochReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.recall_n.iter().position(|&v| v == n).map(|i| self.recall[i])
    }
}

#[derive(Clone, Debug, Serialize)]
struct Timing {
    epoch: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    epoch: usize,
    step: usize,
    loss: f64,
    batch: &'a [Triplet],
    non_finite_params: Vec<String>,
}

pub struct TrainOutcome {
    pub model: Lgcn,
    pub reports: Vec<EpochReport>,
}

fn trainable(name: &str, freeze: bool) -> bool {
    !(freeze && is_backbone(name))
}

fn write_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// One optimisation step over a batch of triplets. Returns the mean loss.
fn train_step(
    model: &mut Lgcn,
    adam: &mut Adam,
    batch: &[Triplet],
    stems: &HashMap<u64, Stem>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ids: Vec<u64> = batch
        .iter()
        .flat_map(|t| [t.anchor, t.positive].into_iter().chain(t.negatives.iter().copied()))
        .collect();
    let m: &Lgcn = model;
    let forwards = ids
        .par_iter()
        .map(|id| m.forward_stem(&stems[id]))
        .collect::<Result<Vec<_>>>()?;
    let (maps, caches): (Vec<Tensor>, Vec<_>) = forwards.into_iter().unzip();
    // diverged weights show up as non-finite maps or all-zero descriptors
    if !maps.iter().all(Tensor::all_finite) {
        return Ok(f64::NAN);
    }
    let (desc, head_cache) = match head_forward(&maps, &m.head, &m.cfg) {
        Err(Error::DegenerateDescriptor) => return Ok(f64::NAN),
        r => r?,
    };
    let mut grad_desc: Vec<Tensor> = desc.iter().map(Tensor::zeros_like).collect();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let mut at = 0;
    for t in batch {
        let per = 2 + t.negatives.len();
        let negs: Vec<&Tensor> = desc[at + 2..at + per].iter().collect();
        let (l, ga, gp, gn) = hardest_triplet(&desc[at], &desc[at + 1], &negs, cfg.margin);
        loss += l * scale;
        grad_desc[at].axpy(scale, &ga);
        grad_desc[at + 1].axpy(scale, &gp);
        for (k, g) in gn.iter().enumerate() {
            grad_desc[at + 2 + k].axpy(scale, g);
        }
        at += per;
    }
    if !loss.is_finite() {
        return Ok(loss);
    }
    let mut grads = zeros_like(m);
    let g_maps = head_backward(&m.head, &head_cache, &grad_desc, Some(&mut grads.head))?;
    let per_image = caches
        .par_iter()
        .zip(g_maps.par_iter())
        .map(|(c, g)| {
            let mut gi = zeros_like(m);
            m.backward_stem(c, g, &mut gi)?;
            Ok(gi)
        })
        .collect::<Result<Vec<_>>>()?;
    for gi in &per_image {
        accumulate(&mut grads, gi);
    }
    let mut grad_list = Vec::new();
    grads.visit("", &mut |name, t| {
        if trainable(&name, cfg.freeze_backbone) {
            grad_list.push(t);
        }
    });
    let mut params = Vec::new();
    model.visit_mut("", &mut |name, t| {
        if trainable(&name, cfg.freeze_backbone) {
            params.push(t);
        }
    });
    adam.step(&mut params, &grad_list);
    Ok(loss)
}

/// Trains on the database split and reports Recall@N of the query split
/// against the database after every epoch (epoch 0 is the untrained model).
/// With `out` set, writes `report.jsonl`, `timing.jsonl` and one checkpoint
/// per epoch.
pub fn train(mut model: Lgcn, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for f in ["report.jsonl", "timing.jsonl"] {
            let p = dir.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    let train_records: Vec<Record> = data.manifest.split(Split::Database).cloned().collect();
    let started = Instant::now();
    let stems: HashMap<u64, Stem> = train_records
        .par_iter()
        .map(|r| Ok((r.id, model.stem(data.image(r.id)?, cfg.freeze_backbone)?)))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut reports = Vec::with_capacity(cfg.epochs + 1);

    let (recall, mut descriptors) = data.evaluate(&model, &cfg.recall_n)?;
    let report = |epoch, loss, steps, mining: &Mining, recall: &RecallResult, model: &Lgcn| EpochReport {
        epoch,
        loss,
        steps,
        triplets: mining.triplets.len(),
        skipped_anchors: mining.skipped,
        recall_n: recall.n_values.clone(),
        recall: recall.recalls.clone(),
        backbone_sha256: params_sha256(model, is_backbone),
        trainable_sha256: params_sha256(model, |n| !is_backbone(n)),
    };
    let first = report(0, None, 0, &Mining::default(), &recall, &model);
    log::info!("epoch 0: recall@{:?} = {:?}", first.recall_n, first.recall);
    if let Some(dir) = out {
        write_line(&dir.join("report.jsonl"), &first)?;
        write_line(&dir.join("timing.jsonl"), &Timing { epoch: 0, seconds: started.elapsed().as_secs_f64() })?;
        Checkpoint::from_model(&model, "epoch 0").write(&dir.join("epoch_000.ckpt"))?;
    }
    reports.push(first);

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let current: Vec<Descriptor> = train_records
            .iter()
            .map(|r| descriptors.remove(&r.id).expect("every record described"))
            .collect();
        let mut mining = mine_triplets(&train_records, &current, cfg.negatives)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        mining.triplets.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in mining.triplets.chunks(cfg.batch_size).enumerate() {
            let loss = train_step(&mut model, &mut adam, batch, &stems, cfg)?;
            if !loss.is_finite() {
                if let Some(dir) = out {
                    let mut bad = Vec::new();
                    model.visit("", &mut |n, t| {
                        if !t.all_finite() {
                            bad.push(n);
                        }
                    });
                    let diag = Diagnostic {
                        epoch,
                        step,
                        loss,
                        batch,
                        non_finite_params: bad,
                    };
                    std::fs::write(dir.join("nan_diagnostic.json"), serde_json::to_vec_pretty(&diag)?)?;
                }
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            total += loss;
            steps += 1;
        }
        let (recall, d) = data.evaluate(&model, &cfg.recall_n)?;
        descriptors = d;
        // no mined triplets means no loss to report, not a zero loss
        let mean = (steps > 0).then(|| total / steps as f64);
        if mean.is_none() {
            log::warn!("epoch {epoch}: no triplets could be mined, parameters unchanged");
        }
        let r = report(epoch, mean, steps, &mining, &recall, &model);
        log::info!(
            "epoch {epoch}: loss {mean:?}, {} triplets, recall@{:?} = {:?}",
            r.triplets,
            r.recall_n,
            r.recall
        );
        if let Some(dir) = out {
            write_line(&dir.join("report.jsonl"), &r)?;
            write_line(&dir.join("timing.jsonl"), &Timing { epoch, seconds: t0.elapsed().as_secs_f64() })?;
            Checkpoint::from_model(&model, format!("epoch {epoch}")).write(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
        reports.push(r);
    }
    Ok(TrainOutcome { model, reports })
}
