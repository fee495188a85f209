use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backward::{
    map_gradients, parameter_vector, reduce_trace, set_parameter_vector, Gradients,
};
use super::config::{LossReport, TrainingConfig};
use super::ema::EmaHook;
use super::kmeans::{kmeanspp_extend, lloyd, nearest};
use super::losses::{ortho_loss, ortho_loss_gradient};
use super::optim::Adam;
use crate::codec::{quantize, quantize_with_hook, CodecModel};
use crate::error::{config_err, Error, Result};
use crate::tensor::FeatureMap;

/// Lloyd iterations applied to the k-means++ seeds of each stage.
const INIT_LLOYD_ITERS: usize = 10;
/// Ridge term of the decoder warm start, relative to the mean feature energy.
const WARM_START_RIDGE: f64 = 1e-3;

// Independent random streams derived from the seed, per epoch.
const STREAM_SHUFFLE: u64 = 0;
const STREAM_RESERVOIR: u64 = 1;
const STREAM_RESEED: u64 = 2;
const STREAM_INIT: u64 = 3;

/// Random-access training maps.
pub trait Corpus: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Cow<'_, FeatureMap>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Corpus for [FeatureMap] {
    fn len(&self) -> usize {
        <[FeatureMap]>::len(self)
    }

    fn get(&self, i: usize) -> Result<Cow<'_, FeatureMap>> {
        self.get(i)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::Config(format!("corpus index {i} out of range")))
    }
}

impl Corpus for Vec<FeatureMap> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<Cow<'_, FeatureMap>> {
        Corpus::get(self.as_slice(), i)
    }
}

fn stream(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 * 4 + purpose);
    rng
}

/// Mini-batch trainer. Progress is kept between calls to
/// [`Trainer::run_epoch`] so training can be checkpointed and resumed.
pub struct Trainer<'a> {
    model: CodecModel,
    corpus: &'a dyn Corpus,
    cfg: TrainingConfig,
    adam: Adam,
    epochs_done: usize,
    step: u64,
    history: Vec<LossReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &CodecModel, corpus: &'a dyn Corpus, cfg: &TrainingConfig) -> Result<Self> {
        if model.is_frozen() {
            return Err(Error::State("cannot train a frozen model".into()));
        }
        let n = parameter_vector(model).len();
        Self::resume(model.clone(), corpus, cfg, Adam::new(n), 0, 0)
    }

    /// Continues from saved progress; see [`super::Checkpoint`].
    pub fn resume(
        model: CodecModel,
        corpus: &'a dyn Corpus,
        cfg: &TrainingConfig,
        adam: Adam,
        epochs_done: usize,
        step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return config_err("training corpus is empty");
        }
        if model.is_frozen() {
            return Err(Error::State("cannot train a frozen model".into()));
        }
        if adam.m.len() != parameter_vector(&model).len() {
            return config_err("optimizer state does not match the model");
        }
        let mut model = model;
        model.set_ema_alpha(cfg.ema_alpha);
        Ok(Self {
            model,
            corpus,
            cfg: cfg.clone(),
            adam,
            epochs_done,
            step,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    fn steps_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.cfg.batch_size)
    }

    /// Runs the remaining epochs, then freezes.
    pub fn run(mut self) -> Result<(CodecModel, Vec<LossReport>)> {
        while self.epochs_done < self.cfg.epochs {
            self.run_epoch()?;
        }
        self.finish()
    }

    /// Rounds to `f32`, separates any entries that became identical, and
    /// freezes the model.
    pub fn finish(self) -> Result<(CodecModel, Vec<LossReport>)> {
        let mut model = self.model;
        for cb in model.codebooks_mut()?.stages_mut() {
            let dim = cb.dim();
            separate_duplicates(cb.entries_mut(), dim);
        }
        model.freeze();
        Ok((model, self.history))
    }

    pub fn run_epoch(&mut self) -> Result<LossReport> {
        let epoch = self.epochs_done;
        let (seed, n) = (self.cfg.seed, self.corpus.len());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, epoch, STREAM_SHUFFLE));
        if epoch == 0 && self.step == 0 {
            let first = &order[..self.cfg.batch_size.min(n)];
            self.initialize(first)?;
        }
        let cfg_model = *self.model.config();
        let (n_q, k, c_r) = (
            cfg_model.stages,
            cfg_model.codebook_size,
            cfg_model.reduced_channels(),
        );
        let mut hook = EmaHook::new(
            self.cfg.ema_alpha,
            n_q,
            k,
            c_r,
            self.cfg.residual_pool,
            stream(seed, epoch, STREAM_RESERVOIR),
        );
        let total_steps = self.cfg.epochs * self.steps_per_epoch();
        let mut sums = LossReport {
            epoch,
            recon_mse: 0.0,
            commit_loss: 0.0,
            ortho_loss: 0.0,
            total: 0.0,
            per_stage_residual: vec![0.0; n_q],
        };
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            hook.reset_pools();
            let mut grads = Gradients::zeros_like(&self.model);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let f = self.corpus.get(i)?;
                let trace = reduce_trace(&self.model, &f)?;
                let q = quantize_with_hook(self.model.codebooks_mut()?, &trace.reduced, &mut hook)?;
                let (terms, g) =
                    map_gradients(&self.model, &f, &trace, &q.quantized, self.cfg.beta_commit)?;
                grads.add_scaled(&g, weight);
                sums.recon_mse += terms.recon;
                sums.commit_loss += terms.commit;
                for (s, e) in sums.per_stage_residual.iter_mut().zip(&q.residual_energy) {
                    *s += e;
                }
            }
            hook.flush(self.model.codebooks_mut()?)?;
            let w_r = self.model.reduce_proj();
            sums.ortho_loss += ortho_loss(w_r, self.cfg.lambda_ortho);
            for (g, o) in grads
                .reduce_w
                .iter_mut()
                .zip(ortho_loss_gradient(w_r, self.cfg.lambda_ortho))
            {
                *g += o;
            }
            if !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {}",
                    self.step
                )));
            }
            let lr = self.cfg.learning_rate_at(self.step as usize, total_steps);
            let mut params = parameter_vector(&self.model);
            self.adam.step(&mut params, &grads.flatten(), lr)?;
            set_parameter_vector(&mut self.model, &params)?;
            self.step += 1;
            batches += 1;
        }
        if self.cfg.reseed_dead_codes {
            self.reseed_dead_codes(&hook, epoch)?;
        }
        let maps = n as f64;
        sums.recon_mse /= maps;
        sums.commit_loss /= maps;
        sums.ortho_loss /= batches as f64;
        sums.per_stage_residual.iter_mut().for_each(|s| *s /= maps);
        sums.total = sums.recon_mse + sums.commit_loss + sums.ortho_loss;
        if !sums.total.is_finite() {
            return Err(Error::Numerical(format!("loss diverged in epoch {epoch}")));
        }
        log::debug!(
            "epoch {epoch}: recon {:.6} commit {:.6} ortho {:.6}",
            sums.recon_mse,
            sums.commit_loss,
            sums.ortho_loss
        );
        self.epochs_done += 1;
        self.history.push(sums.clone());
        Ok(sums)
    }

    /// k-means++ seeding of every stage from residuals of the first batch,
    /// followed by an optional least-squares fit of the expand projection.
    fn initialize(&mut self, batch: &[usize]) -> Result<()> {
        let c_r = self.model.config().reduced_channels();
        let mut rng = stream(self.cfg.seed, 0, STREAM_INIT);
        let mut reduced = Vec::new();
        let mut originals = Vec::new();
        for &i in batch {
            let f = self.corpus.get(i)?.into_owned();
            reduced.push(self.model.reduce(&f)?);
            originals.push(f);
        }
        let pixels: usize = reduced.iter().map(FeatureMap::num_pixels).sum();
        let take = self.cfg.init_sample_points.min(pixels);
        let mut picks = index::sample(&mut rng, pixels, take).into_vec();
        picks.sort_unstable();
        let locate = |flat: usize| -> (usize, usize) {
            let mut rest = flat;
            for (m, map) in reduced.iter().enumerate() {
                if rest < map.num_pixels() {
                    return (m, rest);
                }
                rest -= map.num_pixels();
            }
            unreachable!("sample index within total pixel count")
        };
        let mut residuals: Vec<f64> = Vec::with_capacity(take * c_r);
        for &flat in &picks {
            let (m, p) = locate(flat);
            residuals.extend_from_slice(reduced[m].pixel(p));
        }
        let k = self.model.config().codebook_size;
        for cb in self.model.codebooks_mut()?.stages_mut() {
            // Stage 0 keeps a zero entry for background pixels.
            let mut centers = if cb.stage() == 0 {
                vec![0.0; c_r]
            } else {
                Vec::new()
            };
            kmeanspp_extend(&residuals, c_r, &mut centers, k, &mut rng);
            lloyd(&residuals, c_r, &mut centers, INIT_LLOYD_ITERS);
            for r in residuals.chunks_exact_mut(c_r) {
                let (j, _) = nearest(&centers, c_r, r);
                for (v, e) in r.iter_mut().zip(&centers[j * c_r..(j + 1) * c_r]) {
                    *v -= e;
                }
            }
            cb.entries_mut().copy_from_slice(&centers);
        }
        if self.cfg.decoder_warm_start {
            self.warm_start_decoder(&originals, &reduced, &picks, &locate)?;
        }
        Ok(())
    }

    /// Ridge regression of the expand projection from the decoder's
    /// normalized features to the original features.
    fn warm_start_decoder(
        &mut self,
        originals: &[FeatureMap],
        reduced: &[FeatureMap],
        picks: &[usize],
        locate: &dyn Fn(usize) -> (usize, usize),
    ) -> Result<()> {
        let c = self.model.config().channels;
        let c_r = self.model.config().reduced_channels();
        let d = c_r + 1;
        let normalized = reduced
            .iter()
            .map(|fr| {
                let q = quantize(self.model.codebooks(), fr)?;
                Ok(self.model.decode_trace(&q.quantized)?.normalized)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut cross = DMatrix::<f64>::zeros(d, c);
        let mut phi = DVector::<f64>::zeros(d);
        for &flat in picks {
            let (m, p) = locate(flat);
            phi.rows_mut(0, c_r).copy_from_slice(normalized[m].pixel(p));
            phi[c_r] = 1.0;
            gram.ger(1.0, &phi, &phi, 1.0);
            let target = originals[m].pixel(p);
            for (j, &t) in target.iter().enumerate() {
                if t != 0.0 {
                    cross.column_mut(j).axpy(t, &phi, 1.0);
                }
            }
        }
        let ridge = WARM_START_RIDGE * (gram.trace() / d as f64).max(f64::MIN_POSITIVE);
        for i in 0..c_r {
            gram[(i, i)] += ridge;
        }
        let Some(chol) = gram.cholesky() else {
            log::warn!("decoder warm start skipped: singular normal equations");
            return Ok(());
        };
        let sol = chol.solve(&cross);
        let (_, _, expand) = self.model.projections_mut()?;
        let w = expand.weights_mut();
        for o in 0..c {
            for i in 0..c_r {
                w[o * c_r + i] = sol[(i, o)];
            }
        }
        for (o, bias) in expand.bias_mut().iter_mut().enumerate() {
            *bias = sol[(c_r, o)];
        }
        if !parameter_vector(&self.model).iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(
                "decoder warm start produced non-finite weights".into(),
            ));
        }
        Ok(())
    }

    /// Replaces codes unused for a whole epoch with residuals from the last
    /// batch, drawn with probability proportional to their squared distance
    /// from the live codes.
    fn reseed_dead_codes(&mut self, hook: &EmaHook, epoch: usize) -> Result<()> {
        let mut rng = stream(self.cfg.seed, epoch, STREAM_RESEED);
        let stack = self.model.codebooks_mut()?;
        for (stage, cb) in stack.stages_mut().iter_mut().enumerate() {
            let usage = &hook.epoch_usage[stage];
            let dead: Vec<usize> = (0..cb.size()).filter(|&k| usage[k] == 0).collect();
            let pool = &hook.pools[stage];
            if dead.is_empty() || pool.is_empty() {
                continue;
            }
            let dim = cb.dim();
            let mut centers: Vec<f64> = (0..cb.size())
                .filter(|&k| usage[k] > 0)
                .flat_map(|k| cb.entry(k).to_vec())
                .collect();
            let live = centers.len() / dim;
            kmeanspp_extend(pool, dim, &mut centers, live + dead.len(), &mut rng);
            for (j, &k) in dead.iter().enumerate() {
                let at = (live + j) * dim;
                cb.entry_mut(k).copy_from_slice(&centers[at..at + dim]);
            }
            log::debug!(
                "epoch {epoch}: re-seeded {} codes in stage {stage}",
                dead.len()
            );
        }
        Ok(())
    }
}

/// Trains a copy of `model` on `corpus` and returns it frozen, along with
/// the per-epoch losses. Codebooks follow `cfg.ema_alpha`, which the
/// returned model's config records.
pub fn fit(
    model: &CodecModel,
    corpus: &dyn Corpus,
    cfg: &TrainingConfig,
) -> Result<(CodecModel, Vec<LossReport>)> {
    Trainer::new(model, corpus, cfg)?.run()
}

/// Rounds entries to `f32` and nudges any row identical to an earlier one by
/// one `f32` step in its first component, so every index stays decodable to
/// a distinct vector.
fn separate_duplicates(entries: &mut [f64], dim: usize) {
    entries.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let k = entries.len() / dim;
    for i in 1..k {
        loop {
            let row = &entries[i * dim..(i + 1) * dim];
            let clash = (0..i).any(|j| &entries[j * dim..(j + 1) * dim] == row);
            if !clash {
                break;
            }
            let v = entries[i * dim] as f32;
            entries[i * dim] = f32::from_bits(if v >= 0.0 {
                v.to_bits() + 1
            } else {
                v.to_bits() - 1
            }) as f64;
        }
    }
}
