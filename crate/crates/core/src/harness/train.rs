//! Teacher pre-training and joint fine-tuning of backbone and predictors.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Dataset;
use super::optim::{cosine_lr, Adam};
use crate::backbone::{forward, vit_forward, DynamicParams, Mode, ViTParams};
use crate::error::{Error, Result};
use crate::losses::{cls_loss, distill_loss, kl_loss, ratio_loss, total_loss, LossParts};
use crate::params::{bind, bind_frozen, collect_grads, ParamTree};
use crate::tensorcore::{Graph, Tensor};

/// One pre-training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

/// One fine-tuning epoch; losses are means over steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub total: f64,
    /// Mean achieved cumulative keep fraction per stage.
    pub ratios: Vec<f64>,
    pub predictor_lr: f64,
    pub backbone_frozen: bool,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

pub struct TrainOutput {
    pub params: DynamicParams,
    pub history: TrainHistory,
}

fn shuffled_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Apply one optimizer step over `tree`, with a rate chosen per parameter name.
fn apply<P: ParamTree<Tensor>>(
    opt: &mut Adam,
    tree: &mut P,
    grads: &[(String, Tensor)],
    rate: impl Fn(&str) -> f64,
) -> Result<()> {
    opt.begin_step();
    let mut i = 0;
    let mut err = None;
    tree.visit_named_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let (gname, grad) = &grads[i];
        debug_assert_eq!(gname, name);
        if let Err(e) = opt.update(i, t, grad, rate(name)) {
            err = Some(e);
        }
        i += 1;
    });
    err.map_or(Ok(()), Err)
}

fn tensors<P: ParamTree<Tensor>>(tree: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    tree.visit_named("", &mut |_, t| out.push(t.clone()));
    out
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

/// Train a plain ViT on `data` with cross-entropy. With zero epochs the
/// seeded initialisation is returned as is.
pub fn pretrain_teacher(cfg: &TrainConfig, data: &Dataset) -> Result<(ViTParams, Vec<PretrainEpoch>)> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let model = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain_seed);
    let mut params = ViTParams::init(&mut rng, model)?;
    let mut opt = Adam::new(cfg.optimizer, &tensors(&params).iter().collect::<Vec<_>>());
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.pretrain_epochs;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let (mut loss_sum, mut hits, mut lr) = (0.0, 0, 0.0);
        let batches = shuffled_batches(&mut rng, data.len(), cfg.batch_size);
        for (bi, idx) in batches.iter().enumerate() {
            let (images, labels) = data.batch(idx);
            let mut g = Graph::new();
            let pv = bind(&mut g, &params);
            let out = vit_forward(&mut g, &images, &pv, model)?;
            let probs = g.softmax(out.logits)?;
            let loss = cls_loss(&mut g, probs, &labels)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(diverged(epoch, bi, value));
            }
            hits += correct(g.value(probs), &labels);
            loss_sum += value;
            let mut grads = g.backward(loss)?;
            let grads = collect_grads(&g, &pv, &mut grads);
            lr = cosine_lr(cfg.pretrain_lr, step, total_steps, &cfg.optimizer);
            apply(&mut opt, &mut params, &grads, |_| lr)?;
            step += 1;
        }
        let rec = PretrainEpoch {
            epoch,
            loss: loss_sum / batches.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            lr,
        };
        info!(
            "pretrain epoch {epoch}: loss {:.4} train acc {:.3}",
            rec.loss, rec.train_accuracy
        );
        history.push(rec);
    }
    Ok((params, history))
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.channels != m.channels_in || data.height != m.image_size || data.width != m.image_size {
        return Err(Error::Config(format!(
            "data is {}×{}×{}, model expects {}×{}×{}",
            data.channels, data.height, data.width, m.channels_in, m.image_size, m.image_size
        )));
    }
    if data.num_classes() > m.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, model head has {}",
            data.num_classes(),
            m.num_classes
        )));
    }
    Ok(())
}

/// Teacher class probabilities `[K]` and final tokens `[(N+1)·C]` per image.
struct TeacherCache {
    probs: Vec<Vec<f64>>,
    tokens: Vec<Vec<f64>>,
}

impl TeacherCache {
    fn build(teacher: &ViTParams, cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        let (mut probs, mut tokens) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(64) {
            let (images, _) = data.batch(chunk);
            let mut g = Graph::new();
            let pv = bind_frozen(&mut g, teacher);
            let out = vit_forward(&mut g, &images, &pv, &cfg.model)?;
            let p = g.softmax(out.logits)?;
            let k = g.shape(p)[1];
            probs.extend(g.value(p).data().chunks(k).map(<[f64]>::to_vec));
            let t = g.value(out.final_tokens);
            let per = t.numel() / chunk.len();
            tokens.extend(t.data().chunks(per).map(<[f64]>::to_vec));
        }
        Ok(TeacherCache { probs, tokens })
    }

    fn batch(&self, idx: &[usize], k: usize, token_shape: [usize; 3]) -> Result<(Tensor, Tensor)> {
        let p = idx.iter().flat_map(|&i| self.probs[i].iter().copied()).collect();
        let t = idx.iter().flat_map(|&i| self.tokens[i].iter().copied()).collect();
        Ok((Tensor::new([idx.len(), k], p)?, Tensor::new(token_shape, t)?))
    }
}

/// Jointly fine-tune a student initialised from `teacher` together with the
/// prediction modules, distilling from the frozen teacher.
pub fn train_dynamic(teacher: &ViTParams, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let model = &cfg.model;
    let schedule = cfg.schedule()?;
    let targets = schedule.targets();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DynamicParams::from_backbone(&mut rng, teacher.clone(), model, schedule.stages());
    let cache = TeacherCache::build(teacher, cfg, data)?;
    let mut opt = Adam::new(cfg.optimizer, &tensors(&params).iter().collect::<Vec<_>>());
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let (n, c, k) = (model.num_patches(), model.embed_dim, model.num_classes);
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let frozen = epoch < cfg.freeze_backbone_epochs;
        let mut sums = LossParts::<f64>::default();
        let mut ratio_sums = vec![0.0; schedule.stages()];
        let (mut hits, mut lr) = (0, 0.0);
        let batches = shuffled_batches(&mut rng, data.len(), cfg.batch_size);
        for (bi, idx) in batches.iter().enumerate() {
            let (images, labels) = data.batch(idx);
            let b = idx.len();
            let (t_probs, t_tokens) = cache.batch(idx, k, [b, n + 1, c])?;
            let mut g = Graph::new();
            let pv = bind(&mut g, &params);
            let out = forward(
                &mut g,
                &images,
                &pv,
                model,
                &schedule,
                Mode::Train {
                    rng: &mut rng,
                    tau: cfg.tau,
                },
            )?;
            let probs = g.softmax(out.logits)?;
            let mask = match out.final_mask {
                Some(m) => g.value(m).clone(),
                None => Tensor::ones([b, n + 1]),
            };
            let parts = LossParts {
                cls: cls_loss(&mut g, probs, &labels)?,
                kl: kl_loss(&mut g, probs, &t_probs, cfg.kl_direction)?,
                distill: distill_loss(&mut g, out.final_tokens, &t_tokens, &mask)?,
                ratio: if out.masks.is_empty() {
                    g.constant(Tensor::scalar(0.0))
                } else {
                    ratio_loss(&mut g, &out.masks, &targets)?
                },
            };
            let total = total_loss(&mut g, &parts, &cfg.loss)?;
            let value = g.value(total).item()?;
            if !value.is_finite() {
                return Err(diverged(epoch, bi, value));
            }
            let vals = LossParts {
                cls: g.value(parts.cls).item()?,
                kl: g.value(parts.kl).item()?,
                distill: g.value(parts.distill).item()?,
                ratio: g.value(parts.ratio).item()?,
            };
            sums.cls += vals.cls;
            sums.kl += vals.kl;
            sums.distill += vals.distill;
            sums.ratio += vals.ratio;
            for (acc, &m) in ratio_sums.iter_mut().zip(&out.masks) {
                *acc += g.value(m).data().iter().sum::<f64>() / n as f64;
            }
            hits += correct(g.value(probs), &labels);

            let mut grads = g.backward(total)?;
            let mut grads = collect_grads(&g, &pv, &mut grads);
            if frozen {
                for (name, t) in grads.iter_mut() {
                    if name.starts_with("vit.") {
                        t.data_mut().fill(0.0);
                    }
                }
            }
            lr = cosine_lr(cfg.predictor_lr(), step, total_steps, &cfg.optimizer);
            let backbone_lr = if frozen { 0.0 } else { lr * cfg.backbone_lr_scale };
            apply(&mut opt, &mut params, &grads, |name| {
                if name.starts_with("vit.") {
                    backbone_lr
                } else {
                    lr
                }
            })?;
            if cfg.log_every > 0 && bi % cfg.log_every == 0 {
                debug!("epoch {epoch} step {bi}: total {value:.4} {vals:?}");
            }
            step += 1;
        }
        let steps = batches.len() as f64;
        let loss = LossParts {
            cls: sums.cls / steps,
            kl: sums.kl / steps,
            distill: sums.distill / steps,
            ratio: sums.ratio / steps,
        };
        let rec = EpochRecord {
            epoch,
            total: loss.total(&cfg.loss),
            loss,
            ratios: ratio_sums.iter().map(|r| r / data.len() as f64).collect(),
            predictor_lr: lr,
            backbone_frozen: frozen,
            train_accuracy: hits as f64 / data.len() as f64,
        };
        info!(
            "epoch {epoch}: total {:.4} cls {:.4} kl {:.4} distill {:.4} ratio {:.5} keep {:?} acc {:.3}",
            rec.total,
            rec.loss.cls,
            rec.loss.kl,
            rec.loss.distill,
            rec.loss.ratio,
            rec.ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            rec.train_accuracy
        );
        history.epochs.push(rec);
        if epoch + 1 == cfg.epochs.div_ceil(2) && stagnant(&history, &targets) {
            let msg = format!(
                "keep ratios still at 1.0 after {} of {} epochs; the ratio loss is not taking effect",
                epoch + 1,
                cfg.epochs
            );
            warn!("{msg}");
            history.warnings.push(msg);
        }
    }
    Ok(TrainOutput { params, history })
}

fn stagnant(history: &TrainHistory, targets: &[f64]) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    targets.iter().any(|&t| t < 0.99) && last.ratios.iter().all(|&r| r > 0.99)
}
