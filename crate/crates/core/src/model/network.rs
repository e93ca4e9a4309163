//! The convolutional-recurrent VAE network.
//!
//! Encoder: three conv(3×3)+ReLU+maxpool(2×2) stages on the frame and a
//! stacked (bi)directional recurrent encoder on the caption embeddings. Both
//! feature blocks are batch-normalized, concatenated and pushed through two
//! dense layers to `[mu | log_sigma]`. The decoder mirrors this: two dense
//! layers back to the fused width, the image slice upsampled by three
//! transposed-conv + conv blocks, and the text slice seeding the initial
//! states of a unidirectional recurrent decoder that emits one embedding per
//! step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, CONV_STAGES};
use super::loss::{self, LossBreakdown};
use super::ModelError;
use super::data::Batch;
use crate::nn::activation::{relu_backward_inplace, relu_inplace, sigmoid_backward_inplace, sigmoid_inplace};
use crate::nn::conv::{max_pool2, max_pool2_backward, Conv2d, ConvTranspose2d, Hw};
use crate::nn::dense::Dense;
use crate::nn::norm::{BatchNorm1d, BatchNormCache};
use crate::nn::recurrent::{RecurrentLayer, SequenceRun, State, StepCache};
use crate::nn::{Buffer, Module, Param};

/// Latent mean and log standard deviation, each `batch × latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub batch: usize,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

/// Whether batch norm uses batch statistics or its running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where the text decoder takes its step inputs from.
#[derive(Debug, Clone, Copy)]
pub enum TextInput<'a> {
    /// Ground-truth previous embedding (`batch × len × embed`), zero vector at
    /// the first step.
    TeacherForced(&'a [f64]),
    /// Previous prediction, zero vector at the first step.
    FreeRunning,
}

#[derive(Debug, Clone)]
pub struct Crvae {
    cfg: ModelConfig,
    enc_convs: Vec<Conv2d>,
    /// Indexed `layer * directions + direction`.
    enc_rnn: Vec<RecurrentLayer>,
    bn_image: BatchNorm1d,
    bn_text: BatchNorm1d,
    enc_fc1: Dense,
    enc_fc2: Dense,
    dec_fc1: Dense,
    dec_fc2: Dense,
    dec_up: Vec<ConvTranspose2d>,
    dec_convs: Vec<Conv2d>,
    dec_out: Conv2d,
    dec_h0: Dense,
    dec_c0: Option<Dense>,
    dec_rnn: Vec<RecurrentLayer>,
    dec_proj: Dense,
}

struct ImageEncCache {
    stage_inputs: Vec<Vec<f64>>,
    stage_acts: Vec<Vec<f64>>,
    pool_args: Vec<Vec<usize>>,
    hws: Vec<Hw>,
}

struct TextEncCache {
    runs: Vec<SequenceRun>,
}

struct ImageDecCache {
    up_inputs: Vec<Vec<f64>>,
    up_acts: Vec<Vec<f64>>,
    conv_acts: Vec<Vec<f64>>,
    hws: Vec<Hw>,
    out: Vec<f64>,
}

struct TextDecCache {
    init_input: Vec<f64>,
    steps: Vec<Vec<StepCache>>,
    tops: Vec<Vec<f64>>,
    free_running: bool,
}

/// Everything one forward pass produced, kept for the backward pass.
pub struct ForwardPass {
    pub stats: LatentStats,
    pub z: Vec<f64>,
    noise: Option<Vec<f64>>,
    pub image_recon: Vec<f64>,
    pub text_recon: Vec<f64>,
    batch: usize,
    seq_len: usize,
    img_enc: ImageEncCache,
    txt_enc: TextEncCache,
    bn_image: Option<BatchNormCache>,
    bn_text: Option<BatchNormCache>,
    fused: Vec<f64>,
    enc_h1: Vec<f64>,
    dec_h1: Vec<f64>,
    dec_h2: Vec<f64>,
    img_dec: ImageDecCache,
    txt_dec: TextDecCache,
}

impl Crvae {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let k = cfg.conv_kernel;
        let hd = cfg.lstm_hidden;
        let dirs = cfg.directions();

        let enc_convs = (0..CONV_STAGES)
            .map(|i| Conv2d::new(&format!("enc.conv{i}"), if i == 0 { 3 } else { c }, c, k, &mut rng))
            .collect();
        let mut enc_rnn = Vec::new();
        for l in 0..cfg.lstm_layers {
            let input = if l == 0 { cfg.embed_dim } else { dirs * hd };
            for d in 0..dirs {
                enc_rnn.push(RecurrentLayer::new(&format!("enc.rnn{l}.{d}"), cfg.cell, input, hd, &mut rng));
            }
        }
        let bn_image = BatchNorm1d::new("enc.bn_image", cfg.image_feature_dim());
        let bn_text = BatchNorm1d::new("enc.bn_text", cfg.text_feature_dim());
        let enc_fc1 = Dense::new("enc.fc1", cfg.fused_dim(), cfg.mid_dim, &mut rng);
        let enc_fc2 = Dense::new("enc.fc2", cfg.mid_dim, cfg.latent_layer_dim(), &mut rng);
        let dec_fc1 = Dense::new("dec.fc1", cfg.latent_dim, cfg.mid_dim, &mut rng);
        let dec_fc2 = Dense::new("dec.fc2", cfg.mid_dim, cfg.fused_dim(), &mut rng);
        let dec_up = (0..CONV_STAGES).map(|i| ConvTranspose2d::new(&format!("dec.up{i}"), c, c, &mut rng)).collect();
        let dec_convs = (0..CONV_STAGES).map(|i| Conv2d::new(&format!("dec.conv{i}"), c, c, k, &mut rng)).collect();
        let dec_out = Conv2d::new("dec.out", c, 3, k, &mut rng);
        let tf = cfg.text_feature_dim();
        let dec_h0 = Dense::new("dec.h0", tf, cfg.lstm_layers * hd, &mut rng);
        let dec_c0 = cfg
            .cell
            .has_cell_state()
            .then(|| Dense::new("dec.c0", tf, cfg.lstm_layers * hd, &mut rng));
        let dec_rnn = (0..cfg.lstm_layers)
            .map(|l| {
                let input = if l == 0 { cfg.embed_dim } else { hd };
                RecurrentLayer::new(&format!("dec.rnn{l}"), cfg.cell, input, hd, &mut rng)
            })
            .collect();
        let dec_proj = Dense::new("dec.proj", hd, cfg.embed_dim, &mut rng);
        Ok(Self {
            cfg,
            enc_convs,
            enc_rnn,
            bn_image,
            bn_text,
            enc_fc1,
            enc_fc2,
            dec_fc1,
            dec_fc2,
            dec_up,
            dec_convs,
            dec_out,
            dec_h0,
            dec_c0,
            dec_rnn,
            dec_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let want_img = batch.size * self.cfg.image_len();
        let want_txt = batch.size * batch.seq_len * self.cfg.embed_dim;
        if batch.images.len() != want_img
            || batch.captions.len() != want_txt
            || batch.mask.len() != batch.size * batch.seq_len
        {
            return Err(ModelError::Shape(format!(
                "batch of {} expects {} image values, {} caption values and {} mask entries; got {}, {}, {}",
                batch.size,
                want_img,
                want_txt,
                batch.size * batch.seq_len,
                batch.images.len(),
                batch.captions.len(),
                batch.mask.len()
            )));
        }
        if batch.size == 0 || batch.seq_len == 0 {
            return Err(ModelError::Shape("empty batch or zero-length captions".into()));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- encoder

    fn encode_image(&self, images: &[f64], batch: usize) -> (Vec<f64>, ImageEncCache) {
        let (h, w) = self.cfg.image_hw;
        let mut hw = Hw::new(h, w);
        let mut x = images.to_vec();
        let mut cache = ImageEncCache { stage_inputs: Vec::new(), stage_acts: Vec::new(), pool_args: Vec::new(), hws: Vec::new() };
        for conv in &self.enc_convs {
            let mut a = conv.forward(&x, batch, hw);
            relu_inplace(&mut a);
            let (pooled, arg) = max_pool2(&a, batch, conv.out_ch, hw);
            cache.stage_inputs.push(std::mem::replace(&mut x, pooled));
            cache.stage_acts.push(a);
            cache.pool_args.push(arg);
            cache.hws.push(hw);
            hw = Hw::new(hw.h / 2, hw.w / 2);
        }
        (x, cache)
    }

    fn backward_image_encoder(&mut self, cache: &ImageEncCache, d_feat: Vec<f64>, batch: usize) {
        let mut d = d_feat;
        for i in (0..CONV_STAGES).rev() {
            let act = &cache.stage_acts[i];
            let mut da = max_pool2_backward(&d, &cache.pool_args[i], act.len());
            relu_backward_inplace(act, &mut da);
            let need = i > 0;
            if let Some(dx) = self.enc_convs[i].backward(&cache.stage_inputs[i], &da, batch, cache.hws[i], need) {
                d = dx;
            }
        }
    }

    /// Splits `batch × len × dim` into per-step `batch × dim` matrices.
    fn time_major(x: &[f64], batch: usize, len: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..len)
            .map(|t| {
                let mut step = Vec::with_capacity(batch * dim);
                for b in 0..batch {
                    let at = (b * len + t) * dim;
                    step.extend_from_slice(&x[at..at + dim]);
                }
                step
            })
            .collect()
    }

    fn encode_text(&self, captions: &[f64], batch: usize, len: usize) -> (Vec<f64>, TextEncCache) {
        let hd = self.cfg.lstm_hidden;
        let dirs = self.cfg.directions();
        let mut xs = Self::time_major(captions, batch, len, self.cfg.embed_dim);
        let mut runs = Vec::new();
        for l in 0..self.cfg.lstm_layers {
            let layer_runs: Vec<SequenceRun> = (0..dirs)
                .map(|d| {
                    let cell = &self.enc_rnn[l * dirs + d];
                    cell.run(&xs, State::zeros(cell.kind, batch, hd), batch, d == 1)
                })
                .collect();
            xs = (0..len)
                .map(|t| {
                    let mut step = Vec::with_capacity(batch * dirs * hd);
                    for b in 0..batch {
                        for r in &layer_runs {
                            step.extend_from_slice(&r.outputs[t][b * hd..(b + 1) * hd]);
                        }
                    }
                    step
                })
                .collect();
            runs.extend(layer_runs);
        }
        let tf = self.cfg.text_feature_dim();
        let mut feat = vec![0.0; batch * tf];
        for b in 0..batch {
            for (i, r) in runs.iter().enumerate() {
                feat[b * tf + i * hd..b * tf + (i + 1) * hd].copy_from_slice(&r.final_state.h[b * hd..(b + 1) * hd]);
            }
        }
        (feat, TextEncCache { runs })
    }

    fn backward_text_encoder(&mut self, cache: &TextEncCache, d_feat: &[f64], batch: usize) {
        let hd = self.cfg.lstm_hidden;
        let dirs = self.cfg.directions();
        let tf = self.cfg.text_feature_dim();
        let len = cache.runs[0].outputs.len();
        // Gradient on the outputs of the layer above, split per direction.
        let mut d_above: Option<Vec<Vec<f64>>> = None;
        for l in (0..self.cfg.lstm_layers).rev() {
            let mut d_inputs: Option<Vec<Vec<f64>>> = None;
            for d in 0..dirs {
                let idx = l * dirs + d;
                let mut d_final = vec![0.0; batch * hd];
                for b in 0..batch {
                    d_final[b * hd..(b + 1) * hd].copy_from_slice(&d_feat[b * tf + idx * hd..b * tf + (idx + 1) * hd]);
                }
                let d_out: Option<Vec<Vec<f64>>> = d_above.as_ref().map(|above| {
                    above
                        .iter()
                        .map(|step| {
                            let mut o = vec![0.0; batch * hd];
                            for b in 0..batch {
                                let at = b * dirs * hd + d * hd;
                                o[b * hd..(b + 1) * hd].copy_from_slice(&step[at..at + hd]);
                            }
                            o
                        })
                        .collect()
                });
                let need_dx = l > 0;
                let (dxs, _) = self.enc_rnn[idx].run_backward(
                    &cache.runs[idx],
                    d_out.as_deref(),
                    State { h: d_final, c: Vec::new() },
                    batch,
                    need_dx,
                );
                if need_dx {
                    match d_inputs.as_mut() {
                        None => d_inputs = Some(dxs),
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&dxs) {
                                for (u, v) in a.iter_mut().zip(x) {
                                    *u += v;
                                }
                            }
                        }
                    }
                }
            }
            debug_assert!(l == 0 || d_inputs.as_ref().map_or(0, Vec::len) == len);
            d_above = d_inputs;
        }
    }

    fn encode_internal(&self, batch: &Batch, mode: Mode) -> EncoderOut {
        let (img_feat, img_enc) = self.encode_image(&batch.images, batch.size);
        let (txt_feat, txt_enc) = self.encode_text(&batch.captions, batch.size, batch.seq_len);
        let (img_n, bn_image) = match mode {
            Mode::Train => {
                let (y, c) = self.bn_image.forward_train(&img_feat, batch.size);
                (y, Some(c))
            }
            Mode::Eval => (self.bn_image.forward_eval(&img_feat, batch.size), None),
        };
        let (txt_n, bn_text) = match mode {
            Mode::Train => {
                let (y, c) = self.bn_text.forward_train(&txt_feat, batch.size);
                (y, Some(c))
            }
            Mode::Eval => (self.bn_text.forward_eval(&txt_feat, batch.size), None),
        };
        let (fi, ft) = (self.cfg.image_feature_dim(), self.cfg.text_feature_dim());
        let fd = fi + ft;
        let mut fused = vec![0.0; batch.size * fd];
        for b in 0..batch.size {
            fused[b * fd..b * fd + fi].copy_from_slice(&img_n[b * fi..(b + 1) * fi]);
            fused[b * fd + fi..(b + 1) * fd].copy_from_slice(&txt_n[b * ft..(b + 1) * ft]);
        }
        let mut enc_h1 = self.enc_fc1.forward(&fused, batch.size);
        relu_inplace(&mut enc_h1);
        let out = self.enc_fc2.forward(&enc_h1, batch.size);
        let z = self.cfg.latent_dim;
        let mut mu = Vec::with_capacity(batch.size * z);
        let mut ls = Vec::with_capacity(batch.size * z);
        for b in 0..batch.size {
            mu.extend_from_slice(&out[b * 2 * z..b * 2 * z + z]);
            ls.extend_from_slice(&out[b * 2 * z + z..(b + 1) * 2 * z]);
        }
        EncoderOut {
            stats: LatentStats { batch: batch.size, dim: z, mu, log_sigma: ls },
            img_enc,
            txt_enc,
            bn_image,
            bn_text,
            fused,
            enc_h1,
            img_feat_n: img_n,
            txt_feat_n: txt_n,
        }
    }

    /// Latent statistics for a batch. Eval mode uses batch-norm running
    /// averages, so rows do not depend on their batch mates.
    pub fn encode(&self, batch: &Batch, mode: Mode) -> Result<LatentStats, ModelError> {
        self.check_batch(batch)?;
        Ok(self.encode_internal(batch, mode).stats)
    }

    /// Feature blocks right after batch normalization, `(image, text)`.
    pub fn normalized_features(&self, batch: &Batch, mode: Mode) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_batch(batch)?;
        let e = self.encode_internal(batch, mode);
        Ok((e.img_feat_n, e.txt_feat_n))
    }

    // ---------------------------------------------------------------- decoder

    fn decode_image(&self, slice: &[f64], batch: usize) -> ImageDecCache {
        let (bh, bw) = self.cfg.bottleneck_hw();
        let mut hw = Hw::new(bh, bw);
        let mut x = slice.to_vec();
        let mut cache = ImageDecCache { up_inputs: Vec::new(), up_acts: Vec::new(), conv_acts: Vec::new(), hws: Vec::new(), out: Vec::new() };
        for i in 0..CONV_STAGES {
            let mut u = self.dec_up[i].forward(&x, batch, hw);
            relu_inplace(&mut u);
            let ohw = ConvTranspose2d::output_hw(hw);
            let mut v = self.dec_convs[i].forward(&u, batch, ohw);
            relu_inplace(&mut v);
            cache.up_inputs.push(std::mem::replace(&mut x, v.clone()));
            cache.up_acts.push(u);
            cache.conv_acts.push(v);
            cache.hws.push(hw);
            hw = ohw;
        }
        let mut out = self.dec_out.forward(&x, batch, hw);
        sigmoid_inplace(&mut out);
        cache.hws.push(hw);
        cache.out = out;
        cache
    }

    fn backward_image_decoder(&mut self, cache: &ImageDecCache, d_out: &[f64], batch: usize) -> Vec<f64> {
        let mut d = d_out.to_vec();
        sigmoid_backward_inplace(&cache.out, &mut d);
        let last = &cache.conv_acts[CONV_STAGES - 1];
        let mut d = self.dec_out.backward(last, &d, batch, cache.hws[CONV_STAGES], true).expect("input grad");
        for i in (0..CONV_STAGES).rev() {
            relu_backward_inplace(&cache.conv_acts[i], &mut d);
            let ohw = ConvTranspose2d::output_hw(cache.hws[i]);
            let mut du = self.dec_convs[i].backward(&cache.up_acts[i], &d, batch, ohw, true).expect("input grad");
            relu_backward_inplace(&cache.up_acts[i], &mut du);
            d = self.dec_up[i].backward(&cache.up_inputs[i], &du, batch, cache.hws[i]);
        }
        d
    }

    fn layer_slice(all: &[f64], batch: usize, layers: usize, hd: usize, l: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * hd);
        for b in 0..batch {
            let at = b * layers * hd + l * hd;
            out.extend_from_slice(&all[at..at + hd]);
        }
        out
    }

    fn decode_text(&self, slice: &[f64], batch: usize, len: usize, input: TextInput<'_>) -> (Vec<f64>, TextDecCache) {
        let hd = self.cfg.lstm_hidden;
        let layers = self.cfg.lstm_layers;
        let e = self.cfg.embed_dim;
        let tf = self.cfg.text_feature_dim();
        let h0 = self.dec_h0.forward(slice, batch);
        let c0 = self.dec_c0.as_ref().map(|d| d.forward(slice, batch));
        let mut states: Vec<State> = (0..layers)
            .map(|l| State {
                h: Self::layer_slice(&h0, batch, layers, hd, l),
                c: c0.as_ref().map_or_else(Vec::new, |c| Self::layer_slice(c, batch, layers, hd, l)),
            })
            .collect();
        let teacher = match input {
            TextInput::TeacherForced(t) => Some(Self::time_major(t, batch, len, e)),
            TextInput::FreeRunning => None,
        };
        let mut preds: Vec<Vec<f64>> = Vec::with_capacity(len);
        let mut steps = Vec::with_capacity(len);
        let mut tops = Vec::with_capacity(len);
        for t in 0..len {
            let mut x = if t == 0 {
                vec![0.0; batch * e]
            } else {
                match &teacher {
                    Some(tm) => tm[t - 1].clone(),
                    None => preds[t - 1].clone(),
                }
            };
            let mut step_caches = Vec::with_capacity(layers);
            for (l, cell) in self.dec_rnn.iter().enumerate() {
                let (next, cache) = cell.step(&x, &states[l], batch);
                x = next.h.clone();
                states[l] = next;
                step_caches.push(cache);
            }
            preds.push(self.dec_proj.forward(&x, batch));
            tops.push(x);
            steps.push(step_caches);
        }
        let mut recon = vec![0.0; batch * len * e];
        for (t, p) in preds.iter().enumerate() {
            for b in 0..batch {
                recon[(b * len + t) * e..(b * len + t + 1) * e].copy_from_slice(&p[b * e..(b + 1) * e]);
            }
        }
        debug_assert_eq!(slice.len(), batch * tf);
        (recon, TextDecCache { init_input: slice.to_vec(), steps, tops, free_running: teacher.is_none() })
    }

    fn backward_text_decoder(&mut self, cache: &TextDecCache, d_recon: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let hd = self.cfg.lstm_hidden;
        let layers = self.cfg.lstm_layers;
        let e = self.cfg.embed_dim;
        let lstm = self.cfg.cell.has_cell_state();
        let mut d_pred = Self::time_major(d_recon, batch, len, e);
        let mut carry: Vec<State> = (0..layers)
            .map(|_| State { h: vec![0.0; batch * hd], c: if lstm { vec![0.0; batch * hd] } else { Vec::new() } })
            .collect();
        for t in (0..len).rev() {
            let mut d_x = self.dec_proj.backward(&cache.tops[t], &d_pred[t], batch);
            for l in (0..layers).rev() {
                for (a, b) in d_x.iter_mut().zip(&carry[l].h) {
                    *a += b;
                }
                let need_dx = l > 0 || (cache.free_running && t > 0);
                let (dx, prev) = self.dec_rnn[l].step_backward(&cache.steps[t][l], &d_x, &carry[l].c, batch, need_dx);
                carry[l] = prev;
                d_x = dx.unwrap_or_default();
            }
            if cache.free_running && t > 0 {
                for (a, b) in d_pred[t - 1].iter_mut().zip(&d_x) {
                    *a += b;
                }
            }
        }
        let mut d_h0 = vec![0.0; batch * layers * hd];
        let mut d_c0 = vec![0.0; batch * layers * hd];
        for (l, st) in carry.iter().enumerate() {
            for b in 0..batch {
                let at = b * layers * hd + l * hd;
                d_h0[at..at + hd].copy_from_slice(&st.h[b * hd..(b + 1) * hd]);
                if lstm {
                    d_c0[at..at + hd].copy_from_slice(&st.c[b * hd..(b + 1) * hd]);
                }
            }
        }
        let mut d_slice = self.dec_h0.backward(&cache.init_input, &d_h0, batch);
        if let Some(dc) = self.dec_c0.as_mut() {
            let extra = dc.backward(&cache.init_input, &d_c0, batch);
            for (a, b) in d_slice.iter_mut().zip(&extra) {
                *a += b;
            }
        }
        d_slice
    }

    /// Decoder trunk: `z` → mid → fused, both ReLU.
    fn decode_trunk(&self, z: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let mut h1 = self.dec_fc1.forward(z, batch);
        relu_inplace(&mut h1);
        let mut h2 = self.dec_fc2.forward(&h1, batch);
        relu_inplace(&mut h2);
        (h1, h2)
    }

    fn split_fused(&self, h2: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let (fi, ft) = (self.cfg.image_feature_dim(), self.cfg.text_feature_dim());
        let fd = fi + ft;
        let mut img = Vec::with_capacity(batch * fi);
        let mut txt = Vec::with_capacity(batch * ft);
        for b in 0..batch {
            img.extend_from_slice(&h2[b * fd..b * fd + fi]);
            txt.extend_from_slice(&h2[b * fd + fi..(b + 1) * fd]);
        }
        (img, txt)
    }

    /// Reconstructs images (`batch×3×H×W`) and caption embeddings
    /// (`batch×len×embed`) from latent codes.
    pub fn decode(&self, z: &[f64], batch: usize, len: usize, input: TextInput<'_>) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if z.len() != batch * self.cfg.latent_dim {
            return Err(ModelError::Shape(format!("z has {} values, expected {}", z.len(), batch * self.cfg.latent_dim)));
        }
        if let TextInput::TeacherForced(t) = input {
            if t.len() != batch * len * self.cfg.embed_dim {
                return Err(ModelError::Shape("teacher embeddings do not match batch × len × embed".into()));
            }
        }
        let (_, h2) = self.decode_trunk(z, batch);
        let (img, txt) = self.split_fused(&h2, batch);
        let img_cache = self.decode_image(&img, batch);
        let (text, _) = self.decode_text(&txt, batch, len, input);
        Ok((img_cache.out, text))
    }

    // ---------------------------------------------------------- full passes

    /// Full forward pass. `noise` is the standard-normal draw for the
    /// reparameterization; `None` decodes from the mean.
    pub fn forward(&self, batch: &Batch, noise: Option<&[f64]>, mode: Mode) -> Result<ForwardPass, ModelError> {
        self.check_batch(batch)?;
        let zdim = self.cfg.latent_dim;
        if let Some(n) = noise {
            if n.len() != batch.size * zdim {
                return Err(ModelError::Shape("noise must be batch × latent_dim".into()));
            }
        }
        let enc = self.encode_internal(batch, mode);
        let z = match noise {
            Some(eps) => super::reparameterize_with(&enc.stats, eps),
            None => enc.stats.mu.clone(),
        };
        let (dec_h1, dec_h2) = self.decode_trunk(&z, batch.size);
        let (img, txt) = self.split_fused(&dec_h2, batch.size);
        let img_dec = self.decode_image(&img, batch.size);
        let input = if self.cfg.teacher_forcing { TextInput::TeacherForced(&batch.captions) } else { TextInput::FreeRunning };
        let (text_recon, txt_dec) = self.decode_text(&txt, batch.size, batch.seq_len, input);
        Ok(ForwardPass {
            stats: enc.stats,
            z,
            noise: noise.map(<[f64]>::to_vec),
            image_recon: img_dec.out.clone(),
            text_recon,
            batch: batch.size,
            seq_len: batch.seq_len,
            img_enc: enc.img_enc,
            txt_enc: enc.txt_enc,
            bn_image: enc.bn_image,
            bn_text: enc.bn_text,
            fused: enc.fused,
            enc_h1: enc.enc_h1,
            dec_h1,
            dec_h2,
            img_dec,
            txt_dec,
        })
    }

    /// Loss of a training-mode forward pass with fixed noise, without
    /// touching gradients or running statistics.
    pub fn loss(&self, batch: &Batch, noise: Option<&[f64]>) -> Result<LossBreakdown, ModelError> {
        let pass = self.forward(batch, noise, Mode::Train)?;
        Ok(self.loss_of(batch, &pass))
    }

    fn loss_of(&self, batch: &Batch, pass: &ForwardPass) -> LossBreakdown {
        let mut l = loss::compute_loss(
            &batch.images,
            &pass.image_recon,
            &batch.captions,
            &pass.text_recon,
            &batch.mask,
            self.cfg.embed_dim,
            self.cfg.lambda_text,
        );
        if self.cfg.kl_weight > 0.0 {
            l = l.with_kl(loss::kl_divergence(&pass.stats), self.cfg.kl_weight);
        }
        l
    }

    /// Forward, loss and backward. Gradients are accumulated into the
    /// parameters; batch-norm running statistics are updated.
    pub fn loss_and_grad(&mut self, batch: &Batch, noise: Option<&[f64]>) -> Result<LossBreakdown, ModelError> {
        let pass = self.forward(batch, noise, Mode::Train)?;
        let l = self.loss_of(batch, &pass);
        self.backward(batch, &pass);
        if let Some(c) = &pass.bn_image {
            self.bn_image.update_running_stats(c);
        }
        if let Some(c) = &pass.bn_text {
            self.bn_text.update_running_stats(c);
        }
        Ok(l)
    }

    fn backward(&mut self, batch: &Batch, pass: &ForwardPass) {
        let n = pass.batch;
        let (d_img, d_txt) = loss::loss_gradients(
            &batch.images,
            &pass.image_recon,
            &batch.captions,
            &pass.text_recon,
            &batch.mask,
            self.cfg.embed_dim,
            self.cfg.lambda_text,
        );
        // decoder
        let d_img_slice = self.backward_image_decoder(&pass.img_dec, &d_img, n);
        let d_txt_slice = self.backward_text_decoder(&pass.txt_dec, &d_txt, n, pass.seq_len);
        let (fi, ft) = (self.cfg.image_feature_dim(), self.cfg.text_feature_dim());
        let fd = fi + ft;
        let mut d_h2 = vec![0.0; n * fd];
        for b in 0..n {
            d_h2[b * fd..b * fd + fi].copy_from_slice(&d_img_slice[b * fi..(b + 1) * fi]);
            d_h2[b * fd + fi..(b + 1) * fd].copy_from_slice(&d_txt_slice[b * ft..(b + 1) * ft]);
        }
        relu_backward_inplace(&pass.dec_h2, &mut d_h2);
        let mut d_h1 = self.dec_fc2.backward(&pass.dec_h1, &d_h2, n);
        relu_backward_inplace(&pass.dec_h1, &mut d_h1);
        let d_z = self.dec_fc1.backward(&pass.z, &d_h1, n);

        // reparameterization
        let zd = self.cfg.latent_dim;
        let mut d_mu = d_z.clone();
        let mut d_ls = vec![0.0; n * zd];
        if let Some(eps) = &pass.noise {
            for i in 0..n * zd {
                d_ls[i] = d_z[i] * pass.stats.log_sigma[i].exp() * eps[i];
            }
        }
        if self.cfg.kl_weight > 0.0 {
            loss::kl_gradients(&pass.stats, self.cfg.kl_weight, &mut d_mu, &mut d_ls);
        }
        let mut d_out = vec![0.0; n * 2 * zd];
        for b in 0..n {
            d_out[b * 2 * zd..b * 2 * zd + zd].copy_from_slice(&d_mu[b * zd..(b + 1) * zd]);
            d_out[b * 2 * zd + zd..(b + 1) * 2 * zd].copy_from_slice(&d_ls[b * zd..(b + 1) * zd]);
        }

        // encoder
        let mut d_h = self.enc_fc2.backward(&pass.enc_h1, &d_out, n);
        relu_backward_inplace(&pass.enc_h1, &mut d_h);
        let d_fused = self.enc_fc1.backward(&pass.fused, &d_h, n);
        let mut d_img_n = Vec::with_capacity(n * fi);
        let mut d_txt_n = Vec::with_capacity(n * ft);
        for b in 0..n {
            d_img_n.extend_from_slice(&d_fused[b * fd..b * fd + fi]);
            d_txt_n.extend_from_slice(&d_fused[b * fd + fi..(b + 1) * fd]);
        }
        let bn_i = pass.bn_image.as_ref().expect("training pass");
        let bn_t = pass.bn_text.as_ref().expect("training pass");
        let d_img_feat = self.bn_image.backward(bn_i, &d_img_n);
        let d_txt_feat = self.bn_text.backward(bn_t, &d_txt_n);
        self.backward_image_encoder(&pass.img_enc, d_img_feat, n);
        self.backward_text_encoder(&pass.txt_enc, &d_txt_feat, n);
    }

    /// Sign pattern of every ReLU and the argmax of every pooling window for a
    /// training-mode pass. Two parameter settings with equal signatures lie
    /// in the same smooth region of the loss.
    pub fn activation_signature(&self, batch: &Batch, noise: Option<&[f64]>) -> Result<Vec<u64>, ModelError> {
        let pass = self.forward(batch, noise, Mode::Train)?;
        let mut sig = Vec::new();
        let mut push_bits = |xs: &[f64]| {
            let mut word = 0u64;
            for (i, v) in xs.iter().enumerate() {
                if *v > 0.0 {
                    word |= 1 << (i % 64);
                }
                if i % 64 == 63 {
                    sig.push(word);
                    word = 0;
                }
            }
            sig.push(word);
        };
        for a in &pass.img_enc.stage_acts {
            push_bits(a);
        }
        push_bits(&pass.enc_h1);
        push_bits(&pass.dec_h1);
        push_bits(&pass.dec_h2);
        for i in 0..CONV_STAGES {
            push_bits(&pass.img_dec.up_acts[i]);
            push_bits(&pass.img_dec.conv_acts[i]);
        }
        for args in &pass.img_enc.pool_args {
            sig.extend(args.iter().map(|&a| a as u64));
        }
        Ok(sig)
    }
}

struct EncoderOut {
    stats: LatentStats,
    img_enc: ImageEncCache,
    txt_enc: TextEncCache,
    bn_image: Option<BatchNormCache>,
    bn_text: Option<BatchNormCache>,
    fused: Vec<f64>,
    enc_h1: Vec<f64>,
    img_feat_n: Vec<f64>,
    txt_feat_n: Vec<f64>,
}

impl Module for Crvae {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.enc_convs.iter().for_each(|m| m.visit_params(f));
        self.enc_rnn.iter().for_each(|m| m.visit_params(f));
        self.bn_image.visit_params(f);
        self.bn_text.visit_params(f);
        self.enc_fc1.visit_params(f);
        self.enc_fc2.visit_params(f);
        self.dec_fc1.visit_params(f);
        self.dec_fc2.visit_params(f);
        self.dec_up.iter().for_each(|m| m.visit_params(f));
        self.dec_convs.iter().for_each(|m| m.visit_params(f));
        self.dec_out.visit_params(f);
        self.dec_h0.visit_params(f);
        if let Some(m) = &self.dec_c0 {
            m.visit_params(f);
        }
        self.dec_rnn.iter().for_each(|m| m.visit_params(f));
        self.dec_proj.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc_convs.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.enc_rnn.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.bn_image.visit_params_mut(f);
        self.bn_text.visit_params_mut(f);
        self.enc_fc1.visit_params_mut(f);
        self.enc_fc2.visit_params_mut(f);
        self.dec_fc1.visit_params_mut(f);
        self.dec_fc2.visit_params_mut(f);
        self.dec_up.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.dec_convs.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.dec_out.visit_params_mut(f);
        self.dec_h0.visit_params_mut(f);
        if let Some(m) = &mut self.dec_c0 {
            m.visit_params_mut(f);
        }
        self.dec_rnn.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.dec_proj.visit_params_mut(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn_image.visit_buffers_mut(f);
        self.bn_text.visit_buffers_mut(f);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Buffer)) {
        self.bn_image.visit_buffers(f);
        self.bn_text.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::gradient_check;
    use crate::model::standard_normal;
    use crate::nn::recurrent::CellKind;
    use crate::synth::random_pairs;

    fn batch(cfg: &ModelConfig, n: usize, len: usize) -> Batch {
        Batch::from_pairs(&random_pairs(cfg, n, len, 5))
    }

    fn check(cfg: ModelConfig, h: f64) {
        let model = Crvae::new(cfg.clone()).unwrap();
        let b = batch(&cfg, 4, 4);
        let noise = standard_normal(4 * cfg.latent_dim, &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let report = gradient_check(&model, &b, Some(&noise), 40, h, &mut rng).unwrap();
        let worst = report.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{cfg:?}: worst probe {worst:?}");
    }

    #[test]
    fn shapes_round_trip() {
        let cfg = ModelConfig::tiny();
        let model = Crvae::new(cfg.clone()).unwrap();
        let b = batch(&cfg, 2, 3);
        let pass = model.forward(&b, None, Mode::Train).unwrap();
        assert_eq!(pass.image_recon.len(), b.images.len());
        assert_eq!(pass.text_recon.len(), b.captions.len());
        assert_eq!(pass.stats.mu.len(), 2 * cfg.latent_dim);
    }

    #[test]
    fn zero_inputs_give_finite_stats() {
        let cfg = ModelConfig::tiny();
        let model = Crvae::new(cfg.clone()).unwrap();
        let mut b = batch(&cfg, 1, 3);
        b.images.iter_mut().for_each(|v| *v = 0.0);
        b.captions.iter_mut().for_each(|v| *v = 0.0);
        let s = model.encode(&b, Mode::Eval).unwrap();
        assert!(s.mu.iter().chain(&s.log_sigma).all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = ModelConfig::tiny();
        let model = Crvae::new(cfg.clone()).unwrap();
        let mut b = batch(&cfg, 2, 3);
        b.images.pop();
        assert!(matches!(model.encode(&b, Mode::Train), Err(ModelError::Shape(_))));
        let e = model.decode(&[0.0; 5], 1, 2, TextInput::FreeRunning);
        assert!(matches!(e, Err(ModelError::Shape(_))));
    }

    #[test]
    fn zero_latent_decodes_deterministically() {
        let cfg = ModelConfig::tiny();
        let model = Crvae::new(cfg.clone()).unwrap();
        let z = vec![0.0; 2 * cfg.latent_dim];
        let a = model.decode(&z, 2, 3, TextInput::FreeRunning).unwrap();
        let b = model.decode(&z, 2, 3, TextInput::FreeRunning).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().chain(&a.1).all(|v| v.is_finite()));
    }

    #[test]
    fn batch_norm_blocks_are_standardized_in_training() {
        let cfg = ModelConfig { image_hw: (16, 16), ..ModelConfig::tiny() };
        let model = Crvae::new(cfg.clone()).unwrap();
        let b = batch(&cfg, 6, 3);
        let (img, txt) = model.normalized_features(&b, Mode::Train).unwrap();
        let (raw_img, _) = model.encode_image(&b.images, 6);
        let (raw_txt, _) = model.encode_text(&b.captions, 6, 3);
        let moments = |block: &[f64], f: usize, j: usize| {
            let col: Vec<f64> = (0..6).map(|r| block[r * f + j]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            (mean, col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0)
        };
        for (block, raw, f) in [(img, raw_img, cfg.image_feature_dim()), (txt, raw_txt, cfg.text_feature_dim())] {
            for j in 0..f {
                let (mean, var) = moments(&block, f, j);
                let (_, raw_var) = moments(&raw, f, j);
                assert!(mean.abs() < 1e-9);
                // Unit variance up to the epsilon inside the square root.
                let expected = raw_var / (raw_var + crate::nn::norm::BN_EPS);
                assert!((var - expected).abs() < 1e-9, "feature {j}: {var} vs {expected}");
                assert!(var <= 1.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(ModelConfig::tiny(), 1e-3);
    }

    // A smaller step keeps the O(h²) truncation error low where batch norm
    // sees features with little spread across the batch and the loss curves
    // sharply.
    #[test]
    fn gradients_match_for_variants() {
        check(ModelConfig { cell: CellKind::Rnn, ..ModelConfig::tiny() }, 1e-4);
        check(ModelConfig { teacher_forcing: false, kl_weight: 0.5, ..ModelConfig::tiny() }, 1e-4);
        check(ModelConfig { bidirectional: false, lstm_layers: 1, image_hw: (16, 8), ..ModelConfig::tiny() }, 1e-4);
    }

    #[test]
    fn param_count_matches_config_arithmetic() {
        for cfg in [
            ModelConfig::tiny(),
            ModelConfig { cell: CellKind::Rnn, ..ModelConfig::tiny() },
            ModelConfig { bidirectional: false, lstm_layers: 3, ..ModelConfig::tiny() },
        ] {
            assert_eq!(Crvae::new(cfg.clone()).unwrap().param_count(), cfg.param_count());
        }
    }
}
