//! Mini-batch training on the weighted total loss.
//!
//! Each pair gets its own tape holding both encoders, the pooled descriptors
//! and the decoder. The batch-coupled terms (retrieval and re-ranking) live on
//! a second, small tape whose leaves are copies of the per-pair outputs; its
//! adjoints are fed back into the per-pair tapes as seeds.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, PipelineConfig, TrainConfig};
use crate::decoder;
use crate::encoder::Branch;
use crate::error::{Error, Result};
use crate::fixtures::{Dataset, Split};
use crate::losses::{self, LossBreakdown};
use crate::model::Model;
use crate::param::{Gradients, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ByteCursor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GUCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_NAME: &str = "train_log.jsonl";

/// Which loss terms a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Every term of the weighted total.
    Unified,
    /// Retrieval term only.
    DescriptorOnly,
    /// Localisation, matching and re-ranking terms.
    DetailOnly,
}

impl Objective {
    fn descriptor(self) -> bool {
        self != Objective::DetailOnly
    }

    fn detail(self) -> bool {
        self != Objective::DescriptorOnly
    }
}

/// One training pair: a panorama, its positive tile and the GT pixel.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub ground: &'a Tensor,
    pub aerial: &'a Tensor,
    pub gt: (usize, usize),
    /// Identifies the aerial tile so a batch never holds two copies of it.
    pub tile: usize,
}

/// Training pairs borrowed from a dataset split.
pub struct TrainData<'a> {
    pub samples: Vec<Sample<'a>>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a Dataset, split: Split) -> Result<Self> {
        let mut samples = Vec::new();
        for q in ds.split(split) {
            let tile = ds
                .tile_position(&q.label.positive_id)
                .ok_or_else(|| Error::arg(format!("query {} has unknown positive", q.id())))?;
            samples.push(Sample { ground: &q.image, aerial: &ds.tiles[tile].image, gt: q.label.gt_pixel, tile });
        }
        if samples.len() < 2 {
            return Err(Error::arg("training needs at least two pairs"));
        }
        Ok(TrainData { samples })
    }
}

struct PairPass {
    tape: Tape,
    /// `L_D + beta L_M` of this pair.
    detail_loss: Option<Var>,
    l_d: f32,
    l_m: f32,
    v_a: Option<Var>,
    v_g: Option<Var>,
    f0: Option<Var>,
    cells0: Option<Var>,
}

fn pair_pass(model: &Model, cfg: &PipelineConfig, s: &Sample, obj: Objective) -> Result<PairPass> {
    let mut tape = Tape::new();
    let a = tape.constant(s.aerial.clone())?;
    let g = tape.constant(s.ground.clone())?;
    let av = model.encode_aerial_vars(&mut tape, a)?;
    let gv = model.encode_ground_vars(&mut tape, g)?;
    let mut out = PairPass {
        tape: Tape::new(),
        detail_loss: None,
        l_d: 0.0,
        l_m: 0.0,
        v_a: None,
        v_g: None,
        f0: None,
        cells0: None,
    };
    if obj.descriptor() {
        out.v_a = Some(model.descriptor_var(&mut tape, Branch::Aerial, av.g)?);
        out.v_g = Some(model.descriptor_var(&mut tape, Branch::Ground, gv.g)?);
    }
    if obj.detail() {
        let ground = model.project_vars(&mut tape, gv.f0)?;
        let trace = decoder::decode(&mut tape, &model.store, &model.decoder, &ground, &av.pyramid(), None)?;
        let sched = model.schedule();
        let d_gt = losses::gaussian_target(sched.tile, s.gt, cfg.loss.sigma)?;
        let l_d = losses::localization_loss_logits(&mut tape, trace.logits, &d_gt)?;
        let weights = (0..sched.levels())
            .map(|l| losses::level_weights(&d_gt, sched.side(l)))
            .collect::<Result<Vec<_>>>()?;
        let inv = model.tau.matching.inverse(&mut tape, &model.store)?;
        let l_m = losses::matching_loss(&mut tape, &trace.scores, &weights, inv)?;
        out.l_d = tape.value(l_d).item();
        out.l_m = tape.value(l_m).item();
        let scaled = tape.scale(l_m, cfg.loss.weights.beta)?;
        out.detail_loss = Some(tape.add(l_d, scaled)?);
        out.f0 = Some(ground[0]);
        out.cells0 = Some(trace.cells0);
    }
    out.tape = tape;
    Ok(out)
}

/// Losses and parameter gradients of one mini-batch.
pub struct BatchResult {
    pub losses: LossBreakdown,
    pub grads: Gradients,
}

fn leaf_rows(bt: &mut Tape, passes: &[PairPass], pick: impl Fn(&PairPass) -> Var) -> Result<(Vec<Var>, Var)> {
    let mut leaves = Vec::with_capacity(passes.len());
    for p in passes {
        let v = p.tape.value(pick(p)).clone();
        let n = v.len();
        leaves.push(bt.input(v.reshaped(&[1, n])?, true)?);
    }
    let stacked = bt.concat(&leaves, 0)?;
    Ok((leaves, stacked))
}

/// Forward and backward over `batch`, gradients summed in batch order.
pub fn batch_gradients(
    model: &Model,
    cfg: &PipelineConfig,
    batch: &[Sample],
    obj: Objective,
) -> Result<BatchResult> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::arg("a batch needs at least two pairs"));
    }
    let passes: Vec<PairPass> =
        batch.par_iter().map(|s| pair_pass(model, cfg, s, obj)).collect::<Result<Vec<_>>>()?;
    let w = cfg.loss.weights;
    let mut bt = Tape::new();
    let mut l_g = None;
    let mut desc_leaves = None;
    if obj.descriptor() {
        let (ga, g) = leaf_rows(&mut bt, &passes, |p| p.v_g.expect("descriptor pass"))?;
        let (aa, a) = leaf_rows(&mut bt, &passes, |p| p.v_a.expect("descriptor pass"))?;
        let inv = model.tau.retrieval.inverse(&mut bt, &model.store)?;
        l_g = Some(losses::retrieval_loss(&mut bt, g, a, inv, cfg.loss.label_smoothing)?);
        desc_leaves = Some((ga, aa));
    }
    let mut l_r = None;
    let mut rerank_leaves = None;
    if obj.detail() && w.gamma > 0.0 {
        let (fl, f) = leaf_rows(&mut bt, &passes, |p| p.f0.expect("detail pass"))?;
        let mut cl = Vec::with_capacity(b);
        for p in &passes {
            let c = p.cells0.expect("detail pass");
            cl.push(bt.input(p.tape.value(c).clone(), true)?);
        }
        let sched = model.schedule();
        let positives: Vec<usize> =
            batch.iter().map(|s| losses::positive_cell(s.gt, sched.tile, sched.base)).collect();
        let inv = model.tau.rerank.inverse(&mut bt, &model.store)?;
        l_r = Some(losses::rerank_loss(&mut bt, f, &cl, &positives, inv)?);
        rerank_leaves = Some((fl, cl));
    }
    let mut grads = Gradients::with_capacity(model.store.len());
    let mut seeds: Vec<Vec<(Var, Tensor)>> = vec![Vec::new(); b];
    if l_g.is_some() || l_r.is_some() {
        let total = losses::total_loss(&mut bt, None, l_g, None, l_r, &w)?;
        let adj = bt.gradients(total)?;
        grads.merge(adj.params());
        let mut push = |i: usize, pair_var: Option<Var>, leaf: Var, passes: &[PairPass]| -> Result<()> {
            let pv = pair_var.expect("leaf has a pair var");
            if let Some(g) = adj.wrt(leaf) {
                let shape = passes[i].tape.shape(pv).to_vec();
                seeds[i].push((pv, g.clone().reshaped(&shape)?));
            }
            Ok(())
        };
        if let Some((ga, aa)) = &desc_leaves {
            for i in 0..b {
                push(i, passes[i].v_g, ga[i], &passes)?;
                push(i, passes[i].v_a, aa[i], &passes)?;
            }
        }
        if let Some((fl, cl)) = &rerank_leaves {
            for i in 0..b {
                push(i, passes[i].f0, fl[i], &passes)?;
                push(i, passes[i].cells0, cl[i], &passes)?;
            }
        }
    }
    let inv_b = 1.0 / b as f32;
    for (i, p) in passes.iter().enumerate() {
        if let Some(l) = p.detail_loss {
            seeds[i].push((l, Tensor::full(p.tape.shape(l), inv_b)));
        }
    }
    let pair_grads: Vec<Gradients> = passes
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(p, s)| p.tape.backward_seeded(s).map(|a| a.into_params()))
        .collect::<Result<Vec<_>>>()?;
    for g in &pair_grads {
        grads.merge(g);
    }
    let mean = |f: fn(&PairPass) -> f32| passes.iter().map(f).sum::<f32>() * inv_b;
    let losses = LossBreakdown {
        l_d: mean(|p| p.l_d),
        l_g: l_g.map_or(0.0, |v| bt.value(v).item()),
        l_m: mean(|p| p.l_m),
        l_r: l_r.map_or(0.0, |v| bt.value(v).item()),
    };
    Ok(BatchResult { losses, grads })
}

/// SGD with momentum or Adam, with optional global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<Tensor>,
    /// Second moments; empty for SGD.
    pub v: Vec<Tensor>,
}

const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Optimizer { kind, t: 0, m: zeros, v }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32, cfg: &TrainConfig) -> f32 {
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| (v * v) as f64).sum::<f64>()).sum::<f64>();
        let norm = norm.sqrt() as f32;
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(id) else { continue };
            let w = store.value_mut(id);
            let wd = cfg.weight_decay;
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = self.m[i].data_mut();
                    for ((wv, mv), &gv) in w.data_mut().iter_mut().zip(m).zip(g.data()) {
                        *mv = cfg.momentum * *mv + gv * clip + wd * *wv;
                        *wv -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((wv, mv), vv), &gv) in w.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                        let gc = gv * clip;
                        *mv = b1 * *mv + (1.0 - b1) * gc;
                        *vv = b2 * *vv + (1.0 - b2) * gc * gc;
                        let upd = (*mv / bc1) / ((*vv / bc2).sqrt() + ADAM_EPS);
                        *wv -= lr * (upd + wd * *wv);
                    }
                }
            }
        }
        norm
    }
}

/// Linear warm-up followed by cosine decay to zero over `total` steps.
pub fn learning_rate(cfg: &TrainConfig, step: u64, total: u64) -> f32 {
    let warm = if cfg.warmup_steps > 0 { ((step + 1) as f32 / cfg.warmup_steps as f32).min(1.0) } else { 1.0 };
    let progress = (step as f64 / total.max(1) as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * warm * cosine as f32
}

/// Group a permutation into batches of distinct tiles, each slot filled by
/// the first open batch that can take it.
pub fn make_batches(order: &[u32], tiles: &[usize], batch_size: usize) -> Vec<Vec<u32>> {
    let mut batches: Vec<Vec<u32>> = Vec::new();
    for &i in order {
        let t = tiles[i as usize];
        let slot = batches
            .iter()
            .position(|b| b.len() < batch_size && b.iter().all(|&j| tiles[j as usize] != t));
        match slot {
            Some(s) => batches[s].push(i),
            None => batches.push(vec![i]),
        }
    }
    batches
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub objective: Objective,
    pub step: u64,
    pub epoch: usize,
    /// Position within the current epoch's batch list.
    pub cursor: usize,
    pub batches: Vec<Vec<u32>>,
    pub rng: ChaCha8Rng,
    pub optimizer: Optimizer,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    objective: Objective,
    step: u64,
    epoch: usize,
    cursor: usize,
    batches: Vec<Vec<u32>>,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    optimizer: OptimizerKind,
    optimizer_t: u64,
    params: Vec<String>,
}

impl TrainState {
    pub fn new(cfg: &PipelineConfig, objective: Objective) -> Result<Self> {
        let model = Model::new(cfg)?;
        let optimizer = Optimizer::new(cfg.train.optimizer, &model.store);
        let salt = match objective {
            Objective::Unified => 0,
            Objective::DescriptorOnly => 1,
            Objective::DetailOnly => 2,
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x7472_6169_6e00 + salt));
        Ok(TrainState { objective, step: 0, epoch: 0, cursor: 0, batches: Vec::new(), rng, optimizer, model })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            objective: self.objective,
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            batches: self.batches.clone(),
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            optimizer: self.optimizer.kind,
            optimizer_t: self.optimizer.t,
            params: self.model.store.iter().map(|(_, p)| p.name.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            out.extend(p.value.to_bytes());
            out.extend(self.optimizer.m[i].to_bytes());
            if let Some(v) = self.optimizer.v.get(i) {
                out.extend(v.to_bytes());
            }
        }
        out
    }

    /// Restore a state; `cfg` must describe the same model structure.
    pub fn from_bytes(bytes: &[u8], origin: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes, origin);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt(origin, "not a checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let len = cur.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(cur.take(len)?).map_err(|e| Error::corrupt(origin, e.to_string()))?;
        let mut state = TrainState::new(cfg, header.objective)?;
        if header.optimizer != cfg.train.optimizer {
            return Err(Error::Config(format!(
                "checkpoint optimizer {:?} differs from config {:?}",
                header.optimizer, cfg.train.optimizer
            )));
        }
        let names: Vec<String> = state.model.store.iter().map(|(_, p)| p.name.clone()).collect();
        if names != header.params {
            return Err(Error::Config("checkpoint parameters do not match the configured model".into()));
        }
        let read = |cur: &mut ByteCursor| -> Result<Tensor> {
            let (t, used) = Tensor::from_bytes(cur.remaining(), origin)?;
            cur.take(used)?;
            Ok(t)
        };
        let mut values = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            values.push((name.clone(), read(&mut cur)?));
            let m = read(&mut cur)?;
            if m.shape() != state.optimizer.m[i].shape() {
                return Err(Error::corrupt(origin, format!("moment shape mismatch for {name}")));
            }
            state.optimizer.m[i] = m;
            if header.optimizer == OptimizerKind::Adam {
                state.optimizer.v[i] = read(&mut cur)?;
            }
        }
        if !cur.is_empty() {
            return Err(Error::corrupt(origin, "trailing bytes after checkpoint"));
        }
        state.model.store.load_values(values)?;
        let seed: [u8; 32] = hex::decode(&header.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::corrupt(origin, "bad rng seed"))?;
        let word_pos: u128 =
            header.rng_word_pos.parse().map_err(|_| Error::corrupt(origin, "bad rng position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(word_pos);
        state.rng = rng;
        state.optimizer.t = header.optimizer_t;
        state.step = header.step;
        state.epoch = header.epoch;
        state.cursor = header.cursor;
        state.batches = header.batches;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path, cfg)
    }

    pub fn finished(&self, cfg: &PipelineConfig) -> bool {
        self.epoch >= cfg.train.epochs
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_d: f32,
    pub l_g: f32,
    pub l_m: f32,
    pub l_r: f32,
    pub total: f32,
    pub tau: f32,
    pub p: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and the JSON-lines log go here.
    pub out_dir: Option<PathBuf>,
    /// Stop (and checkpoint) once this many total steps have run.
    pub stop_after: Option<u64>,
    /// Continue from the last checkpoint under `out_dir` when one exists.
    pub resume: bool,
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

fn planned_steps(cfg: &PipelineConfig, n: usize) -> u64 {
    (cfg.train.epochs * n.div_ceil(cfg.train.batch_size)) as u64
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Where [`train`] leaves the final (or interrupted) state of a run in `out`.
pub fn last_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join("last.guck")
}

/// A fresh state, or the last checkpoint under `opts.out_dir` when resuming.
pub fn initial_state(cfg: &PipelineConfig, objective: Objective, opts: &TrainOptions) -> Result<TrainState> {
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        let path = last_checkpoint(dir);
        if path.exists() {
            let state = TrainState::load(&path, cfg)?;
            if state.objective != objective {
                return Err(Error::Config(format!(
                    "{} holds a {:?} run, expected {objective:?}",
                    path.display(),
                    state.objective
                )));
            }
            return Ok(state);
        }
    }
    TrainState::new(cfg, objective)
}

/// Run (or continue) training until the configured epochs are done.
pub fn train(
    cfg: &PipelineConfig,
    data: &TrainData,
    mut state: TrainState,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tiles: Vec<usize> = data.samples.iter().map(|s| s.tile).collect();
    let total = planned_steps(cfg, data.samples.len());
    let mut log = Vec::new();
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_NAME);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    while !state.finished(cfg) {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            break;
        }
        if state.cursor == 0 && state.batches.is_empty() {
            let mut order: Vec<u32> = (0..data.samples.len() as u32).collect();
            order.shuffle(&mut state.rng);
            state.batches = make_batches(&order, &tiles, cfg.train.batch_size);
        }
        let idx = &state.batches[state.cursor];
        let batch: Vec<Sample> = idx.iter().map(|&i| data.samples[i as usize]).collect();
        // Singleton leftovers cannot form a contrastive batch; skip them.
        if batch.len() >= 2 {
            let result = match batch_gradients(&state.model, cfg, &batch, state.objective) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => return Err(diverged(&state, opts, what)),
                Err(e) => return Err(e),
            };
            let total_loss = match result.losses.total(&cfg.loss.weights) {
                Ok(t) => t,
                Err(Error::NonFinite(what)) => return Err(diverged(&state, opts, what)),
                Err(e) => return Err(e),
            };
            let lr = learning_rate(&cfg.train, state.step, total);
            let grad_norm = state.optimizer.step(&mut state.model.store, &result.grads, lr, &cfg.train);
            if !grad_norm.is_finite() {
                return Err(diverged(&state, opts, "gradient norm".into()));
            }
            state.model.clamp_gem();
            let rec = LogRecord {
                step: state.step,
                epoch: state.epoch,
                l_d: result.losses.l_d,
                l_g: result.losses.l_g,
                l_m: result.losses.l_m,
                l_r: result.losses.l_r,
                total: total_loss,
                tau: state.model.tau.retrieval.value(&state.model.store),
                p: state.model.store.value(state.model.agg_aerial.p).item(),
                lr,
                grad_norm,
            };
            if opts.verbose && state.step.is_multiple_of(10) {
                eprintln!(
                    "step {:>5} epoch {} total {:.4} L_D {:.4} L_G {:.4} L_M {:.4} L_R {:.4} tau {:.4}",
                    rec.step, rec.epoch, rec.total, rec.l_d, rec.l_g, rec.l_m, rec.l_r, rec.tau
                );
            }
            if let Some((path, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            log.push(rec);
            state.step += 1;
        }
        state.cursor += 1;
        if state.cursor == state.batches.len() {
            state.cursor = 0;
            state.batches.clear();
            state.epoch += 1;
            if let Some(dir) = &opts.out_dir {
                let cd = checkpoint_dir(dir);
                state.save(cd.join(format!("epoch_{:03}.guck", state.epoch)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.save(last_checkpoint(dir))?;
    }
    Ok(TrainOutcome { state, log })
}

fn diverged(state: &TrainState, opts: &TrainOptions, reason: String) -> Error {
    let mut reason = reason;
    if let Some(dir) = &opts.out_dir {
        let path = checkpoint_dir(dir).join("last_good.guck");
        match state.save(&path) {
            Ok(()) => reason.push_str(&format!("; last good state saved to {}", path.display())),
            Err(e) => reason.push_str(&format!("; saving last good state failed: {e}")),
        }
    }
    Error::Diverged { step: state.step, reason }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_hold_distinct_tiles() {
        let tiles = [0, 0, 1, 1, 2, 0, 3, 3];
        let order: Vec<u32> = (0..8).collect();
        let b = make_batches(&order, &tiles, 3);
        for batch in &b {
            let mut t: Vec<_> = batch.iter().map(|&i| tiles[i as usize]).collect();
            t.sort();
            t.dedup();
            assert_eq!(t.len(), batch.len());
            assert!(batch.len() <= 3);
        }
        assert_eq!(b.iter().map(|b| b.len()).sum::<usize>(), 8);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig { warmup_steps: 10, learning_rate: 1.0, ..TrainConfig::default() };
        assert!((learning_rate(&cfg, 0, 100) - 0.1).abs() < 1e-3);
        assert!(learning_rate(&cfg, 9, 100) > learning_rate(&cfg, 0, 100));
        assert!(learning_rate(&cfg, 99, 100) < 0.01);
        assert_eq!(learning_rate(&cfg, 100, 100), 0.0);
    }
}
