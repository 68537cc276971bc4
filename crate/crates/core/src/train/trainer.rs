use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::autograd::{adam_step, Graph, OptimizerState, Var};
use crate::data::ImageTriplet;
use crate::error::{shape_err, Error, Result};
use crate::losses::{total_loss, CodeVars};
use crate::model::HarmonizationModel;
use crate::nn::{Mode, RegionMask};
use crate::tensor::Tensor;

pub const LOSS_LOG_HEADER: &str = "step,l_rec,l_ffhat,l_fhatb,total";

/// Loss values of one optimizer step. `step` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub reconstruction: f32,
    pub real_harmonized: f32,
    pub harmonized_background: f32,
    pub total: f32,
}

pub fn write_loss_header(out: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    Ok(())
}

/// Floats use the shortest representation that round-trips.
pub fn write_loss_row(out: &mut (impl Write + ?Sized), l: &StepLosses) -> Result<()> {
    writeln!(out, "{},{},{},{},{}", l.step, l.reconstruction, l.real_harmonized, l.harmonized_background, l.total)?;
    Ok(())
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop after this many further steps even if epochs remain.
    pub max_steps: Option<u64>,
    /// Written atomically every `checkpoint_every` epochs and at the end.
    pub checkpoint_path: Option<PathBuf>,
    pub loss_log: Option<&'a mut dyn Write>,
}

/// Model, optimizer state and position in the data schedule.
pub struct Trainer {
    cfg: TrainConfig,
    model: HarmonizationModel<f32>,
    opt: OptimizerState<f32>,
    step: u64,
}

fn stack_batch(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(parts)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = HarmonizationModel::new(&cfg.model(), cfg.seed, cfg.init_std)?;
        model.check_resolution(cfg.resolution, cfg.resolution)?;
        let opt = OptimizerState::new(&model.store);
        Ok(Self { cfg, model, opt, step: 0 })
    }

    /// Restores model, optimizer moments and step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone())?;
        let ids: Vec<_> = t.model.store.ids().collect();
        for &id in &ids {
            let name = t.model.store.name(id).to_string();
            let src = ckpt.array(&name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))?;
            let dst = t.model.store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "array `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        let trainable: Vec<_> = t.model.store.trainable().collect();
        for (slot, &id) in trainable.iter().enumerate() {
            let name = t.model.store.name(id);
            for (prefix, moments) in [("adam.m.", &mut t.opt.first_moment), ("adam.v.", &mut t.opt.second_moment)] {
                let key = format!("{prefix}{name}");
                let src = ckpt.array(&key).ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{key}`")))?;
                if src.numel() != moments[slot].len() {
                    return Err(Error::CorruptCheckpoint(format!("array `{key}` has the wrong size")));
                }
                moments[slot].copy_from_slice(src.data());
            }
        }
        t.step = ckpt.step;
        t.opt.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let mut arrays: Vec<(String, Tensor<f32>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (slot, id) in store.trainable().enumerate() {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            for (prefix, moments) in [("adam.m.", &self.opt.first_moment), ("adam.v.", &self.opt.second_moment)] {
                let t = Tensor::new(shape.clone(), moments[slot].clone()).expect("moment matches parameter shape");
                arrays.push((format!("{prefix}{name}"), t));
            }
        }
        Checkpoint { config: self.cfg.clone(), step: self.step, arrays }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &HarmonizationModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> HarmonizationModel<f32> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn batch_size(&self, dataset_len: usize) -> usize {
        self.cfg.batch_size.min(dataset_len)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        if dataset_len == 0 {
            0
        } else {
            dataset_len / self.batch_size(dataset_len)
        }
    }

    /// Item order of one epoch; depends only on the seed and the epoch index.
    pub fn epoch_order(&self, epoch: u64, dataset_len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut rng);
        order
    }

    fn split_codes(g: &mut Graph<f32>, codes: Var, parts: usize, n: usize, dim: usize) -> Result<Vec<Var>> {
        let wide = g.reshape(codes, &[1, parts * n, dim])?;
        (0..parts)
            .map(|k| {
                let s = g.slice_channels(wide, k * n, n)?;
                g.reshape(s, &[n, dim])
            })
            .collect()
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&ImageTriplet]) -> Result<StepLosses> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let r = self.cfg.resolution;
        for t in batch {
            if t.composite.shape() != [3, r, r] || t.real.shape() != [3, r, r] || (t.mask.height(), t.mask.width()) != (r, r) {
                return Err(shape_err("train_step", format!("item `{}` is not {r}x{r}", t.id)));
            }
            if t.mask.is_empty() || t.mask.complement().is_empty() {
                return Err(Error::Data { id: t.id.clone(), reason: "foreground or background region is empty".into() });
            }
        }
        let step = self.step + 1;
        let dim = self.cfg.code_dim;
        let composites: Vec<&Tensor<f32>> = batch.iter().map(|t| &t.composite).collect();
        let reals: Vec<&Tensor<f32>> = batch.iter().map(|t| &t.real).collect();
        let fg: Vec<&RegionMask> = batch.iter().map(|t| &t.mask).collect();
        let bg_owned: Vec<RegionMask> = batch.iter().map(|t| t.mask.complement()).collect();
        let bg: Vec<&RegionMask> = bg_owned.iter().collect();

        let triple_images = stack_batch(&[composites.as_slice(), composites.as_slice(), reals.as_slice()].concat())?;
        let quad_masks = RegionMask::stack::<f32>(&[bg.as_slice(), fg.as_slice(), fg.as_slice(), fg.as_slice()].concat())?;
        let bg_masks = RegionMask::stack::<f32>(&bg)?;
        let fg_masks = RegionMask::stack::<f32>(&fg)?;

        let model = &self.model;
        let mut g = Graph::new();
        let comp = g.constant(stack_batch(&composites)?);
        let real = g.constant(stack_batch(&reals)?);
        let mask = g.constant(fg_masks);

        // The conditioning code is computed exactly as at inference time.
        let conditioning = model.extractor.forward(&mut g, &model.store, comp, &bg_masks, Mode::Eval)?;
        let code_map = g.replicate(conditioning, r, r)?;
        let input = g.concat(&[comp, mask, code_map])?;
        let output = model.generator.forward(&mut g, &model.store, input, Mode::Train)?;

        // All four codes compared by the triplet losses share one batch.
        let flat = |g: &mut Graph<f32>, v: Var, items: usize| g.reshape(v, &[1, items * 3, r, r]);
        let fixed = g.constant(triple_images);
        let fixed = flat(&mut g, fixed, 3 * n)?;
        let produced = flat(&mut g, output, n)?;
        let all = g.concat(&[fixed, produced])?;
        let all = g.reshape(all, &[4 * n, 3, r, r])?;
        let codes = model.extractor.forward(&mut g, &model.store, all, &quad_masks, Mode::Train)?;
        let split = Self::split_codes(&mut g, codes, 4, n, dim)?;
        let (background, composite_fg, real_fg, harmonized_fg) = (split[0], split[1], split[2], split[3]);

        let codes = if self.cfg.detach_code_targets {
            CodeVars {
                composite_fg: g.detach(composite_fg),
                background: g.detach(background),
                real_fg: g.detach(real_fg),
                harmonized_fg,
            }
        } else {
            CodeVars { composite_fg, background, real_fg, harmonized_fg }
        };
        let terms = total_loss(&mut g, output, real, &codes, &self.cfg.loss())?;
        let losses = StepLosses {
            step,
            reconstruction: g.data(terms.reconstruction)[0],
            real_harmonized: g.data(terms.real_harmonized)[0],
            harmonized_background: g.data(terms.harmonized_background)[0],
            total: g.data(terms.total)[0],
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(terms.total)?;
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate_grads(&g)?;
        store.apply_buffer_updates(&mut g)?;
        adam_step(store, &mut self.opt, &self.cfg.adam())?;
        store.zero_grad();
        self.step = step;
        Ok(losses)
    }

    /// Continues the epoch schedule from the current step.
    pub fn run(&mut self, data: &[ImageTriplet], mut opts: RunOptions<'_>) -> Result<Vec<StepLosses>> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let per_epoch = self.steps_per_epoch(data.len()) as u64;
        let bs = self.batch_size(data.len());
        let end = per_epoch * self.cfg.epochs as u64;
        let stop = opts.max_steps.map_or(end, |m| end.min(self.step + m));
        let mut log = Vec::new();
        while self.step < stop {
            let epoch = self.step / per_epoch;
            let offset = (self.step % per_epoch) as usize;
            let order = self.epoch_order(epoch, data.len());
            let batch: Vec<&ImageTriplet> = order[offset * bs..(offset + 1) * bs].iter().map(|&i| &data[i]).collect();
            let losses = self.train_step(&batch)?;
            if let Some(out) = opts.loss_log.as_deref_mut() {
                write_loss_row(out, &losses)?;
            }
            log.push(losses);
            let epoch_done = self.step % per_epoch == 0;
            let due = epoch_done && (self.step / per_epoch) % self.cfg.checkpoint_every as u64 == 0;
            if let Some(path) = &opts.checkpoint_path {
                if due || self.step == stop {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(log)
    }
}
