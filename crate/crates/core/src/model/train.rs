use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    standard_normal, AlignedPair, Batch, Checkpoint, Crvae, LatentMatrix, LossBreakdown, Mode, ModelConfig,
    ModelError, TextInput,
};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::Module;

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn check_pairs(cfg: &ModelConfig, pairs: &[AlignedPair]) -> Result<(), ModelError> {
    let seq = pairs.first().map(|p| p.caption.max_len());
    for p in pairs {
        if p.image.len() != cfg.image_len() {
            return Err(ModelError::Config(format!(
                "pair {} has {} image values but the model expects {}",
                p.pair_id,
                p.image.len(),
                cfg.image_len()
            )));
        }
        if p.caption.dim != cfg.embed_dim {
            return Err(ModelError::Config(format!(
                "pair {} has {}-dim embeddings but the model expects {}",
                p.pair_id, p.caption.dim, cfg.embed_dim
            )));
        }
        if Some(p.caption.max_len()) != seq {
            return Err(ModelError::Config("captions must share one padded length".into()));
        }
    }
    Ok(())
}

/// Splits shuffled indices into batches, folding a trailing single-item batch
/// into its predecessor so batch normalization always sees two or more rows
/// when the data allows it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains a fresh model on `pairs` with AdamW and element-wise gradient
/// clipping, teacher forcing on the text decoder as configured.
pub fn train(pairs: &[AlignedPair], cfg: &ModelConfig) -> Result<Checkpoint, ModelError> {
    train_with_observer(pairs, cfg, &mut |_, _| {})
}

/// [`train`] with a callback invoked after each epoch with the 1-based epoch
/// number and that epoch's mean loss.
pub fn train_with_observer(
    pairs: &[AlignedPair],
    cfg: &ModelConfig,
    observer: &mut dyn FnMut(usize, &LossBreakdown),
) -> Result<Checkpoint, ModelError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ModelError::Config("training needs at least one aligned pair".into()));
    }
    check_pairs(cfg, pairs)?;
    let mut model = Crvae::new(cfg.clone())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        clip_value: Some(cfg.grad_clip),
        ..AdamWConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for idx in batches(&order, cfg.batch_size) {
            let batch = Batch::from_pairs(idx.iter().map(|&i| &pairs[i]));
            let noise = standard_normal(batch.size * cfg.latent_dim, &mut noise_rng);
            model.zero_grad();
            let l = model.loss_and_grad(&batch, Some(&noise))?;
            if !l.is_finite() {
                return Err(ModelError::NonFinite {
                    epoch,
                    last_good: Box::new(Checkpoint { model: last_good, epoch: epoch - 1, loss_curve: curve }),
                });
            }
            opt.begin_step();
            let mut i = 0;
            model.visit_params_mut(&mut |p| {
                opt.update(i, p);
                i += 1;
            });
            let w = batch.size as f64;
            sum.image_loss += w * l.image_loss;
            sum.text_loss += w * l.text_loss;
            sum.kl_loss += w * l.kl_loss;
            sum.total += w * l.total;
        }
        let n = pairs.len() as f64;
        let mean = LossBreakdown {
            image_loss: sum.image_loss / n,
            text_loss: sum.text_loss / n,
            kl_loss: sum.kl_loss / n,
            total: sum.total / n,
        };
        observer(epoch, &mean);
        curve.push(mean);
    }
    Ok(Checkpoint { model, epoch: cfg.epochs, loss_curve: curve })
}

/// Writes the loss curve as `epoch,image_loss,text_loss,total`.
pub fn write_loss_curve<W: Write>(out: W, curve: &[LossBreakdown]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "image_loss", "text_loss", "total"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.image_loss.to_string(), l.text_loss.to_string(), l.total.to_string()])?;
    }
    w.flush()
}

fn eval_batches(pairs: &[AlignedPair], size: usize) -> impl Iterator<Item = &[AlignedPair]> {
    pairs.chunks(size.max(1))
}

/// Latent means of every pair in dataset order, computed with batch-norm
/// running statistics and no sampling.
pub fn extract_latents(pairs: &[AlignedPair], checkpoint: &Checkpoint) -> Result<LatentMatrix, ModelError> {
    let cfg = checkpoint.config();
    check_pairs(cfg, pairs)?;
    let mut out = LatentMatrix::empty(cfg.latent_dim);
    for chunk in eval_batches(pairs, cfg.batch_size) {
        let stats = checkpoint.model.encode(&Batch::from_pairs(chunk), Mode::Eval)?;
        out.values.extend_from_slice(&stats.mu);
        out.pair_ids.extend(chunk.iter().map(|p| p.pair_id));
        out.rows += chunk.len();
    }
    Ok(out)
}

/// Decoded outputs for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub pair_id: usize,
    /// `3 × H × W`
    pub image: Vec<f64>,
    /// `len × embed_dim`
    pub text: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Encodes to the latent mean and decodes again. With `teacher_forcing` the
/// text decoder is fed the true previous embedding, otherwise its own
/// previous prediction.
pub fn reconstruct(
    pairs: &[AlignedPair],
    checkpoint: &Checkpoint,
    teacher_forcing: bool,
) -> Result<Vec<Reconstruction>, ModelError> {
    let cfg = checkpoint.config();
    check_pairs(cfg, pairs)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in eval_batches(pairs, cfg.batch_size) {
        let batch = Batch::from_pairs(chunk);
        let stats = checkpoint.model.encode(&batch, Mode::Eval)?;
        let input = if teacher_forcing { TextInput::TeacherForced(&batch.captions) } else { TextInput::FreeRunning };
        let (img, txt) = checkpoint.model.decode(&stats.mu, batch.size, batch.seq_len, input)?;
        let il = cfg.image_len();
        let tl = batch.seq_len * cfg.embed_dim;
        for (b, p) in chunk.iter().enumerate() {
            out.push(Reconstruction {
                pair_id: p.pair_id,
                image: img[b * il..(b + 1) * il].to_vec(),
                text: txt[b * tl..(b + 1) * tl].to_vec(),
                mask: p.caption.mask.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order = [0, 1, 2, 3, 4];
        let b = batches(&order, 2);
        assert_eq!(b, vec![&[0, 1][..], &[2, 3, 4][..]]);
        let b = batches(&order[..1], 4);
        assert_eq!(b, vec![&[0][..]]);
    }
}
