//! From-scratch stacked LSTM next-key classifier.
//!
//! Standard LSTM cells (input/forget/output gates plus candidate) feed a
//! linear projection and softmax over the alphabet; training minimizes
//! categorical cross-entropy by mini-batch SGD with a per-epoch decaying
//! learning rate. Forward and backward passes run over whole sample chunks
//! as matrix ops; chunks are mapped in parallel and reduced in index order,
//! so results are bit-identical for any thread count.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::LogKey;
use crate::par::par_chunk_map;
use crate::predictor::{check_context_keys, EpochStats, Hyperparams, NextKeyModel};
use crate::sequencer::Window;

/// Samples per parallel work unit. Fixed so chunk boundaries (and thus the
/// reduction order) do not depend on thread count.
const CHUNK: usize = 256;

const INIT_RANGE: f64 = 0.08;
const CKPT_MAGIC: &[u8; 8] = b"TTCKPT01";

/// Gate weights of one layer. Rows are the four gate blocks in order
/// input, forget, candidate, output; each block has `alpha` rows.
#[derive(Debug, Clone, PartialEq)]
struct LstmLayer {
    w_ih: Array2<f64>,
    w_hh: Array2<f64>,
    b: Array1<f64>,
}

/// Trained two-layer (in general `hp.layers`-layer) LSTM classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub hp: Hyperparams,
    layers: Vec<LstmLayer>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    pub training_log: Vec<EpochStats>,
}

/// Parameter-shaped gradient set.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<LstmLayer>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

impl Gradients {
    fn zeros_like(model: &LstmModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayer {
                    w_ih: Array2::zeros(l.w_ih.dim()),
                    w_hh: Array2::zeros(l.w_hh.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
            w_out: Array2::zeros(model.w_out.dim()),
            b_out: Array1::zeros(model.b_out.len()),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_ih += &b.w_ih;
            a.w_hh += &b.w_hh;
            a.b += &b.b;
        }
        self.w_out += &other.w_out;
        self.b_out += &other.b_out;
    }

    fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w_ih *= factor;
            l.w_hh *= factor;
            l.b *= factor;
        }
        self.w_out *= factor;
        self.b_out *= factor;
    }

    /// All gradient entries in the same order as [`LstmModel::params_vec`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w_ih.iter());
            out.extend(l.w_hh.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }
}

/// Per-timestep, per-layer activations cached for backpropagation.
struct StepCache {
    gate_i: Array2<f64>,
    gate_f: Array2<f64>,
    gate_g: Array2<f64>,
    gate_o: Array2<f64>,
    tanh_c: Array2<f64>,
    c_prev: Array2<f64>,
    h: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmModel {
    fn init(hp: &Hyperparams, rng: &mut ChaCha8Rng) -> Self {
        let h = hp.alpha;
        let g = hp.g as usize;
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        let mut layers = Vec::with_capacity(hp.layers);
        for layer in 0..hp.layers {
            let input = if layer == 0 { g } else { h };
            layers.push(LstmLayer {
                w_ih: draw(4 * h, input),
                w_hh: draw(4 * h, h),
                b: Array1::zeros(4 * h),
            });
        }
        let w_out = draw(g, h);
        let b_out = Array1::zeros(g);
        LstmModel { hp: hp.clone(), layers, w_out, b_out, training_log: Vec::new() }
    }

    /// Forward pass over a chunk of contexts. Returns the top hidden state
    /// (alpha x batch) and, when requested, the activation cache indexed
    /// `[t][layer]`.
    fn forward(
        &self,
        contexts: &[&[LogKey]],
        keep_cache: bool,
    ) -> (Array2<f64>, Vec<Vec<StepCache>>) {
        let h_dim = self.hp.alpha;
        let batch = contexts.len();
        let w = self.hp.w;
        let mut h: Vec<Array2<f64>> =
            (0..self.hp.layers).map(|_| Array2::zeros((h_dim, batch))).collect();
        let mut c = h.clone();
        let mut cache: Vec<Vec<StepCache>> = Vec::with_capacity(if keep_cache { w } else { 0 });
        for t in 0..w {
            let mut step: Vec<StepCache> = Vec::with_capacity(if keep_cache { self.hp.layers } else { 0 });
            for (layer_idx, layer) in self.layers.iter().enumerate() {
                let mut z = layer.w_hh.dot(&h[layer_idx]);
                if layer_idx == 0 {
                    // one-hot input: adding w_ih * x reduces to a column gather
                    for (b_idx, ctx) in contexts.iter().enumerate() {
                        let col = layer.w_ih.column(ctx[t] as usize);
                        let mut zc = z.column_mut(b_idx);
                        zc += &col;
                    }
                } else {
                    let below = h[layer_idx - 1].clone();
                    z += &layer.w_ih.dot(&below);
                }
                z += &layer.b.view().insert_axis(Axis(1));

                let gate_i = z.slice(s![0..h_dim, ..]).mapv(sigmoid);
                let gate_f = z.slice(s![h_dim..2 * h_dim, ..]).mapv(sigmoid);
                let gate_g = z.slice(s![2 * h_dim..3 * h_dim, ..]).mapv(f64::tanh);
                let gate_o = z.slice(s![3 * h_dim..4 * h_dim, ..]).mapv(sigmoid);

                let c_prev = c[layer_idx].clone();
                let mut c_new = &gate_f * &c_prev;
                c_new += &(&gate_i * &gate_g);
                let tanh_c = c_new.mapv(f64::tanh);
                let h_new = &gate_o * &tanh_c;

                c[layer_idx] = c_new;
                h[layer_idx] = h_new.clone();
                if keep_cache {
                    step.push(StepCache {
                        gate_i,
                        gate_f,
                        gate_g,
                        gate_o,
                        tanh_c,
                        c_prev,
                        h: h_new,
                    });
                }
            }
            if keep_cache {
                cache.push(step);
            }
        }
        (h.pop().unwrap(), cache)
    }

    /// Column-wise softmax of `w_out * h_top + b_out`.
    fn output_probs(&self, h_top: &Array2<f64>) -> Array2<f64> {
        let mut logits = self.w_out.dot(h_top);
        logits += &self.b_out.view().insert_axis(Axis(1));
        for mut col in logits.columns_mut() {
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            col.mapv_inplace(|v| (v - max).exp());
            let sum = col.sum();
            col.mapv_inplace(|v| v / sum);
        }
        logits
    }

    /// Summed cross-entropy loss and summed gradients over one chunk.
    fn chunk_backward(&self, chunk: &[&Window]) -> (f64, Gradients) {
        let contexts: Vec<&[LogKey]> = chunk.iter().map(|w| w.context.as_slice()).collect();
        let (h_top, cache) = self.forward(&contexts, true);
        let probs = self.output_probs(&h_top);

        let mut loss_sum = 0.0;
        let mut d_logits = probs;
        for (b_idx, win) in chunk.iter().enumerate() {
            let p = d_logits[(win.label as usize, b_idx)];
            loss_sum -= p.max(1e-300).ln();
            d_logits[(win.label as usize, b_idx)] -= 1.0;
        }

        let h_dim = self.hp.alpha;
        let batch = chunk.len();
        let w = self.hp.w;
        let mut grads = Gradients::zeros_like(self);
        grads.w_out = d_logits.dot(&h_top.t());
        grads.b_out = d_logits.sum_axis(Axis(1));

        let mut dh: Vec<Array2<f64>> =
            (0..self.hp.layers).map(|_| Array2::zeros((h_dim, batch))).collect();
        let mut dc = dh.clone();
        let top = self.hp.layers - 1;
        dh[top] = self.w_out.t().dot(&d_logits);

        for t in (0..w).rev() {
            for layer_idx in (0..self.hp.layers).rev() {
                let sc = &cache[t][layer_idx];
                // total cell gradient: output path plus carry from t+1
                Zip::from(&mut dc[layer_idx])
                    .and(&dh[layer_idx])
                    .and(&sc.gate_o)
                    .and(&sc.tanh_c)
                    .for_each(|dc_v, &dh_v, &o, &tc| *dc_v += dh_v * o * (1.0 - tc * tc));

                let mut dz = Array2::<f64>::zeros((4 * h_dim, batch));
                {
                    let (mut dz_i, mut dz_rest) = dz.view_mut().split_at(Axis(0), h_dim);
                    let (mut dz_f, mut dz_tail) = dz_rest.view_mut().split_at(Axis(0), h_dim);
                    let (mut dz_g, mut dz_o) = dz_tail.view_mut().split_at(Axis(0), h_dim);
                    Zip::from(&mut dz_o)
                        .and(&dh[layer_idx])
                        .and(&sc.tanh_c)
                        .and(&sc.gate_o)
                        .for_each(|d, &dh_v, &tc, &o| *d = dh_v * tc * o * (1.0 - o));
                    Zip::from(&mut dz_i)
                        .and(&dc[layer_idx])
                        .and(&sc.gate_g)
                        .and(&sc.gate_i)
                        .for_each(|d, &dc_v, &g, &i| *d = dc_v * g * i * (1.0 - i));
                    Zip::from(&mut dz_f)
                        .and(&dc[layer_idx])
                        .and(&sc.c_prev)
                        .and(&sc.gate_f)
                        .for_each(|d, &dc_v, &cp, &f| *d = dc_v * cp * f * (1.0 - f));
                    Zip::from(&mut dz_g)
                        .and(&dc[layer_idx])
                        .and(&sc.gate_i)
                        .and(&sc.gate_g)
                        .for_each(|d, &dc_v, &i, &g| *d = dc_v * i * (1.0 - g * g));
                }

                let layer_grads = &mut grads.layers[layer_idx];
                // recurrent input at t is the layer's own output at t-1
                if t > 0 {
                    layer_grads.w_hh += &dz.dot(&cache[t - 1][layer_idx].h.t());
                }
                layer_grads.b += &dz.sum_axis(Axis(1));
                if layer_idx == 0 {
                    for (b_idx, ctx) in contexts.iter().enumerate() {
                        let dzc = dz.column(b_idx);
                        let mut wcol = layer_grads.w_ih.column_mut(ctx[t] as usize);
                        wcol += &dzc;
                    }
                } else {
                    layer_grads.w_ih += &dz.dot(&cache[t][layer_idx - 1].h.t());
                    let below = self.layers[layer_idx].w_ih.t().dot(&dz);
                    dh[layer_idx - 1] += &below;
                }

                dh[layer_idx] = self.layers[layer_idx].w_hh.t().dot(&dz);
                dc[layer_idx] *= &sc.gate_f;
            }
        }
        (loss_sum, grads)
    }

    fn check_windows(&self, windows: &[Window]) -> Result<()> {
        for win in windows {
            if win.context.len() != self.hp.w {
                return Err(Error::DimensionMismatch(format!(
                    "window context length {} != w {}",
                    win.context.len(),
                    self.hp.w
                )));
            }
            check_context_keys(&win.context, self.hp.g)?;
            if win.label >= self.hp.g {
                return Err(Error::KeyOutOfRange { key: win.label, limit: self.hp.g });
            }
        }
        Ok(())
    }

    /// Mean cross-entropy loss and mean analytic gradients over `batch`.
    pub fn batch_gradients(&self, batch: &[Window]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        self.check_windows(batch)?;
        let refs: Vec<&Window> = batch.iter().collect();
        let parts = par_chunk_map(&refs, CHUNK, |chunk| self.chunk_backward(chunk));
        let mut loss_sum = 0.0;
        let mut grads = Gradients::zeros_like(self);
        for (part_loss, part_grads) in &parts {
            loss_sum += part_loss;
            grads.add_assign(part_grads);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((loss_sum * inv, grads))
    }

    /// Mean cross-entropy loss over `batch`, no gradients.
    pub fn mean_loss(&self, batch: &[Window]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        self.check_windows(batch)?;
        let refs: Vec<&Window> = batch.iter().collect();
        let losses = par_chunk_map(&refs, CHUNK, |chunk| {
            let contexts: Vec<&[LogKey]> = chunk.iter().map(|w| w.context.as_slice()).collect();
            let (h_top, _) = self.forward(&contexts, false);
            let probs = self.output_probs(&h_top);
            chunk
                .iter()
                .enumerate()
                .map(|(b_idx, win)| -probs[(win.label as usize, b_idx)].max(1e-300).ln())
                .sum::<f64>()
        });
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w_ih.scaled_add(-lr, &g.w_ih);
            layer.w_hh.scaled_add(-lr, &g.w_hh);
            layer.b.scaled_add(-lr, &g.b);
        }
        self.w_out.scaled_add(-lr, &grads.w_out);
        self.b_out.scaled_add(-lr, &grads.b_out);
    }

    fn params_finite(&self) -> bool {
        self.params_iter().all(|v| v.is_finite())
    }

    fn params_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.w_ih.iter().chain(l.w_hh.iter()).chain(l.b.iter()))
            .chain(self.w_out.iter())
            .chain(self.b_out.iter())
            .copied()
    }

    /// All parameters flattened; the layout matches [`Gradients::flatten`].
    pub fn params_vec(&self) -> Vec<f64> {
        self.params_iter().collect()
    }

    /// Overwrite all parameters from a flat vector (test support for
    /// finite-difference checks).
    pub fn set_params_vec(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        let mut fill = |arr: &mut [f64]| {
            for v in arr {
                *v = it.next().expect("enough values");
            }
        };
        for l in &mut self.layers {
            fill(l.w_ih.as_slice_mut().unwrap());
            fill(l.w_hh.as_slice_mut().unwrap());
            fill(l.b.as_slice_mut().unwrap());
        }
        fill(self.w_out.as_slice_mut().unwrap());
        fill(self.b_out.as_slice_mut().unwrap());
        assert!(it.next().is_none(), "value count mismatch");
    }

    /// Continue gradient descent from the existing parameters on new data.
    /// Dimensions of `hp` must match the model; zero windows is a no-op.
    pub fn fine_tune(&mut self, windows: &[Window], hp: &Hyperparams) -> Result<()> {
        hp.validate()?;
        if hp.g != self.hp.g
            || hp.alpha != self.hp.alpha
            || hp.layers != self.hp.layers
            || hp.w != self.hp.w
        {
            return Err(Error::DimensionMismatch(format!(
                "model is (g={}, alpha={}, layers={}, w={}), update asks (g={}, alpha={}, layers={}, w={})",
                self.hp.g, self.hp.alpha, self.hp.layers, self.hp.w,
                hp.g, hp.alpha, hp.layers, hp.w
            )));
        }
        if windows.is_empty() {
            return Ok(());
        }
        let base_epoch = self.training_log.len();
        run_epochs(self, windows, hp, base_epoch)
    }

    /// Serialize to the versioned little-endian f32 checkpoint format.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        for dim in [self.hp.layers as u32, self.hp.alpha as u32, self.hp.g, self.hp.w as u32] {
            w.write_all(&dim.to_le_bytes())?;
        }
        let write_arr = |w: &mut W, values: &mut dyn Iterator<Item = f64>| -> Result<()> {
            let vals: Vec<f64> = values.collect();
            w.write_all(&(vals.len() as u64).to_le_bytes())?;
            for v in vals {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        };
        for l in &self.layers {
            write_arr(&mut w, &mut l.w_ih.iter().copied())?;
            write_arr(&mut w, &mut l.w_hh.iter().copied())?;
            write_arr(&mut w, &mut l.b.iter().copied())?;
        }
        write_arr(&mut w, &mut self.w_out.iter().copied())?;
        write_arr(&mut w, &mut self.b_out.iter().copied())?;
        Ok(())
    }

    /// Load a checkpoint written by [`LstmModel::save`]. Training-schedule
    /// fields of `hp` are filled with reference defaults.
    pub fn load<R: Read>(mut r: R) -> Result<LstmModel> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::BadCheckpoint("bad magic/version tag".into()));
        }
        let read_u32 = |r: &mut R| -> Result<u32> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        };
        let layers = read_u32(&mut r)? as usize;
        let alpha = read_u32(&mut r)? as usize;
        let g = read_u32(&mut r)?;
        let w = read_u32(&mut r)? as usize;
        if layers == 0 || alpha == 0 || g == 0 || w == 0 {
            return Err(Error::BadCheckpoint("zero dimension".into()));
        }
        let read_arr = |r: &mut R, expected: usize| -> Result<Vec<f64>> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            let len = u64::from_le_bytes(buf) as usize;
            if len != expected {
                return Err(Error::BadCheckpoint(format!(
                    "array length {len}, expected {expected}"
                )));
            }
            let mut out = Vec::with_capacity(len);
            let mut fbuf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut fbuf)?;
                out.push(f32::from_le_bytes(fbuf) as f64);
            }
            Ok(out)
        };
        let mut hp = Hyperparams::reference(g, 0);
        hp.layers = layers;
        hp.alpha = alpha;
        hp.w = w;
        let mut model_layers = Vec::with_capacity(layers);
        for layer_idx in 0..layers {
            let input = if layer_idx == 0 { g as usize } else { alpha };
            let w_ih = read_arr(&mut r, 4 * alpha * input)?;
            let w_hh = read_arr(&mut r, 4 * alpha * alpha)?;
            let b = read_arr(&mut r, 4 * alpha)?;
            model_layers.push(LstmLayer {
                w_ih: Array2::from_shape_vec((4 * alpha, input), w_ih).unwrap(),
                w_hh: Array2::from_shape_vec((4 * alpha, alpha), w_hh).unwrap(),
                b: Array1::from_vec(b),
            });
        }
        let w_out = read_arr(&mut r, g as usize * alpha)?;
        let b_out = read_arr(&mut r, g as usize)?;
        Ok(LstmModel {
            hp,
            layers: model_layers,
            w_out: Array2::from_shape_vec((g as usize, alpha), w_out).unwrap(),
            b_out: Array1::from_vec(b_out),
            training_log: Vec::new(),
        })
    }
}

impl NextKeyModel for LstmModel {
    fn predict(&self, context: &[LogKey]) -> Result<Vec<f64>> {
        if context.len() != self.hp.w {
            return Err(Error::DimensionMismatch(format!(
                "context length {} != w {}",
                context.len(),
                self.hp.w
            )));
        }
        check_context_keys(context, self.hp.g)?;
        let (h_top, _) = self.forward(&[context], false);
        let probs = self.output_probs(&h_top);
        Ok(probs.column(0).to_vec())
    }

    fn alphabet_size(&self) -> u32 {
        self.hp.g
    }
}

fn run_epochs(
    model: &mut LstmModel,
    windows: &[Window],
    hp: &Hyperparams,
    base_epoch: usize,
) -> Result<()> {
    model.check_windows(windows)?;
    // validation split: last 5% of windows, in given order
    let n_val = windows.len() / 20;
    let (train, val) = windows.split_at(windows.len() - n_val);
    let train = if train.is_empty() { windows } else { train };

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ base_epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hp.epochs {
        let lr = hp.lr0 * hp.decay.powi((base_epoch + epoch) as i32);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch_ids in order.chunks(hp.batch) {
            // the final incomplete batch is processed, not dropped
            let batch: Vec<Window> = batch_ids.iter().map(|&i| train[i].clone()).collect();
            let (mean_loss, grads) = model.batch_gradients(&batch)?;
            if !mean_loss.is_finite() {
                return Err(Error::DivergedLoss { epoch: base_epoch + epoch });
            }
            model.sgd_step(&grads, lr);
            if !model.params_finite() {
                return Err(Error::DivergedLoss { epoch: base_epoch + epoch });
            }
            loss_sum += mean_loss * batch.len() as f64;
            seen += batch.len();
        }
        let validation_loss = if val.is_empty() { None } else { Some(model.mean_loss(val)?) };
        model.training_log.push(EpochStats {
            epoch: base_epoch + epoch,
            mean_loss: loss_sum / seen as f64,
            validation_loss,
            lr,
        });
    }
    Ok(())
}

/// Train a fresh model. Deterministic given `hp.seed`.
pub fn train_lstm(windows: &[Window], hp: &Hyperparams) -> Result<LstmModel> {
    hp.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut model = LstmModel::init(hp, &mut rng);
    run_epochs(&mut model, windows, hp, 0)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{train_ngram, NextKeyModel};
    use crate::tasktree::NodeKey;

    fn windows_from(keys: &[LogKey], w: usize) -> Vec<Window> {
        (0..keys.len().saturating_sub(w))
            .map(|j| Window {
                context: keys[j..j + w].to_vec(),
                label: keys[j + w],
                origin: (NodeKey::new(0, "t"), j),
            })
            .collect()
    }

    fn tiny_hp() -> Hyperparams {
        Hyperparams {
            w: 3,
            layers: 2,
            alpha: 8,
            batch: 32,
            epochs: 120,
            lr0: 2.0,
            decay: 0.995,
            seed: 11,
            g: 4,
        }
    }

    fn cycle_corpus(len: usize) -> Vec<LogKey> {
        (0..len).map(|i| (i % 4) as u32).collect()
    }

    #[test]
    fn learns_deterministic_cycle() {
        let hp = tiny_hp();
        let windows = windows_from(&cycle_corpus(200), hp.w);
        let model = train_lstm(&windows, &hp).unwrap();
        let ngram = train_ngram(&windows, hp.w, 0.0, hp.g);
        for win in &windows {
            let dist = model.predict(&win.context).unwrap();
            let top = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            assert_eq!(top, win.label, "context {:?}", win.context);
            assert_eq!(top, ngram.top1(&win.context).unwrap());
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut hp = tiny_hp();
        hp.epochs = 0;
        let windows = windows_from(&cycle_corpus(40), 3);
        assert!(train_lstm(&windows, &hp).is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(matches!(train_lstm(&[], &tiny_hp()), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut hp = tiny_hp();
        hp.epochs = 5;
        let windows = windows_from(&cycle_corpus(120), hp.w);
        let a = train_lstm(&windows, &hp).unwrap();
        let b = train_lstm(&windows, &hp).unwrap();
        assert_eq!(a.params_vec(), b.params_vec());
        assert_eq!(a.training_log.len(), b.training_log.len());
    }

    #[test]
    fn predictions_are_normalized() {
        let mut hp = tiny_hp();
        hp.epochs = 2;
        let windows = windows_from(&cycle_corpus(60), hp.w);
        let model = train_lstm(&windows, &hp).unwrap();
        let dist = model.predict(&[0, 1, 2]).unwrap();
        assert_eq!(dist.len(), hp.g as usize);
        assert!(dist.iter().all(|&p| p >= 0.0));
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_target_pushes_output_bias() {
        // every label is key 2: the bias gradient for key 2 must be
        // negative (logit pushed up) and positive for the others
        let mut hp = tiny_hp();
        hp.epochs = 1;
        let windows: Vec<Window> = (0..16)
            .map(|j| Window {
                context: vec![0, 1, 0],
                label: 2,
                origin: (NodeKey::new(0, "t"), j),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LstmModel::init(&hp, &mut rng);
        let (_, grads) = model.batch_gradients(&windows).unwrap();
        assert!(grads.b_out[2] < 0.0);
        for k in [0usize, 1, 3] {
            assert!(grads.b_out[k] > 0.0);
        }
    }

    #[test]
    fn fine_tune_checks_and_noop() {
        let mut hp = tiny_hp();
        hp.epochs = 2;
        let windows = windows_from(&cycle_corpus(60), hp.w);
        let mut model = train_lstm(&windows, &hp).unwrap();
        let before = model.params_vec();
        model.fine_tune(&[], &hp).unwrap();
        assert_eq!(model.params_vec(), before);
        let mut bad = hp.clone();
        bad.g = 9;
        assert!(matches!(model.fine_tune(&windows, &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn fine_tune_lowers_loss_on_new_windows() {
        let mut hp = tiny_hp();
        hp.epochs = 3;
        let windows = windows_from(&cycle_corpus(60), hp.w);
        let mut model = train_lstm(&windows, &hp).unwrap();
        // a pattern the cycle model has not seen: 3 follows [1,1,1]
        let extra: Vec<Window> = (0..8)
            .map(|j| Window {
                context: vec![1, 1, 1],
                label: 3,
                origin: (NodeKey::new(1, "x"), j),
            })
            .collect();
        let before = model.mean_loss(&extra).unwrap();
        let mut tune_hp = hp.clone();
        tune_hp.epochs = 5;
        model.fine_tune(&extra, &tune_hp).unwrap();
        let after = model.mean_loss(&extra).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut hp = tiny_hp();
        hp.epochs = 2;
        let windows = windows_from(&cycle_corpus(60), hp.w);
        let model = train_lstm(&windows, &hp).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = LstmModel::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.hp.g, hp.g);
        assert_eq!(loaded.hp.alpha, hp.alpha);
        // f32 storage: parameters agree to f32 precision
        for (a, b) in model.params_vec().iter().zip(loaded.params_vec()) {
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-7);
        }
        let ctx = [0u32, 1, 2];
        let pa = model.predict(&ctx).unwrap();
        let pb = loaded.predict(&ctx).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bad_checkpoint_rejected() {
        assert!(matches!(
            LstmModel::load(&b"NOTACKPT........"[..]),
            Err(Error::BadCheckpoint(_))
        ));
    }

    #[test]
    fn validation_loss_does_not_explode() {
        let mut hp = tiny_hp();
        hp.epochs = 30;
        let windows = windows_from(&cycle_corpus(400), hp.w);
        let model = train_lstm(&windows, &hp).unwrap();
        let first = model.training_log.first().unwrap().validation_loss.unwrap();
        let last = model.training_log.last().unwrap().validation_loss.unwrap();
        assert!(last <= first + 1e-6, "validation loss {first} -> {last}");
    }

    /// Finite-difference check on a tiny random instance.
    fn gradient_check(seed: u64) -> f64 {
        use rand::Rng;
        let hp = Hyperparams {
            w: 4,
            layers: 2,
            alpha: 8,
            batch: 8,
            epochs: 1,
            lr0: 0.05,
            decay: 0.97,
            seed,
            g: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = LstmModel::init(&hp, &mut rng);
        let batch: Vec<Window> = (0..6)
            .map(|j| Window {
                context: (0..hp.w).map(|_| rng.gen_range(0..hp.g)).collect(),
                label: rng.gen_range(0..hp.g),
                origin: (NodeKey::new(0, "t"), j),
            })
            .collect();
        let (_, grads) = model.batch_gradients(&batch).unwrap();
        let analytic = grads.flatten();
        let params = model.params_vec();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut probe = model.clone();
        for idx in 0..params.len() {
            let mut plus = params.clone();
            plus[idx] += h;
            probe.set_params_vec(&plus);
            let lp = probe.mean_loss(&batch).unwrap();
            let mut minus = params.clone();
            minus[idx] -= h;
            probe.set_params_vec(&minus);
            let lm = probe.mean_loss(&batch).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic[idx] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let err = gradient_check(seed);
            assert!(err < 1e-3, "seed {seed}: max relative error {err}");
        }
    }
}
