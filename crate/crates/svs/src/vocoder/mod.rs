//! Waveform decoder (generator) and adversarial losses.
//!
//! Desk-scale GAN vocoder: the generator upsamples the frame-level latent
//! by the hop factor through nearest-neighbor expansion + convolution
//! stages with residual blocks; discriminators cover two scales and two
//! periods. Losses are least-squares adversarial, L1 feature matching, and
//! L1 between log-mels computed by a differentiable conv-based STFT that
//! matches the analysis front end.

pub mod disc;
pub mod mel;

pub use disc::{Discriminator, SubDiscOutput};
pub use mel::MelTransform;

use crate::config::{Config, ModelConfig};
use crate::error::{Result, SvsError};
use crate::nn::layers::{conv1d, linear};
use crate::nn::{leaky_relu, ParamStore};
use candle_core::Tensor;
use candle_nn::Module;

const LRELU_SLOPE: f64 = 0.1;

struct ResBlock {
    convs: Vec<(candle_nn::Conv1d, candle_nn::Conv1d)>,
}

impl ResBlock {
    fn new(ps: &ParamStore, ch: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let convs = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Ok((
                    conv1d(&ps.pp(&format!("c{i}")), "a", ch, ch, kernel, d)?,
                    conv1d(&ps.pp(&format!("c{i}")), "b", ch, ch, kernel, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (a, b) in &self.convs {
            let y = a.forward(&leaky_relu(&h, LRELU_SLOPE)?)?;
            let y = b.forward(&leaky_relu(&y, LRELU_SLOPE)?)?;
            h = (h + y)?;
        }
        Ok(h)
    }
}

struct UpStage {
    factor: usize,
    conv: candle_nn::Conv1d,
    res: ResBlock,
}

/// Latent-to-waveform generator. Output length is exactly
/// `frames * hop_length`.
pub struct Decoder {
    conv_pre: candle_nn::Conv1d,
    spk_proj: candle_nn::Linear,
    stages: Vec<UpStage>,
    conv_post: candle_nn::Conv1d,
    pub hop: usize,
}

impl Decoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, hop: usize) -> Result<Self> {
        let product: usize = cfg.decoder_upsample.iter().product();
        if product != hop {
            return Err(SvsError::Config(format!(
                "decoder upsample product {product} != hop {hop}"
            )));
        }
        let c0 = cfg.decoder_channels;
        let conv_pre = conv1d(ps, "conv_pre", cfg.hidden_dim, c0, 7, 1)?;
        let spk_proj = linear(ps, "spk_proj", cfg.hidden_dim, c0)?;
        let mut stages = Vec::new();
        let mut ch = c0;
        for (i, &r) in cfg.decoder_upsample.iter().enumerate() {
            let out_ch = (ch / 2).max(8);
            let kernel = if r >= 8 { 9 } else { 5 };
            let scope = ps.pp(&format!("up{i}"));
            stages.push(UpStage {
                factor: r,
                conv: conv1d(&scope, "conv", ch, out_ch, kernel, 1)?,
                res: ResBlock::new(
                    &scope.pp("res"),
                    out_ch,
                    cfg.decoder_resblock_kernel,
                    &cfg.decoder_resblock_dilations,
                )?,
            });
            ch = out_ch;
        }
        let conv_post = conv1d(ps, "conv_post", ch, 1, 7, 1)?;
        Ok(Self {
            conv_pre,
            spk_proj,
            stages,
            conv_post,
            hop,
        })
    }

    /// `z: [B, t, C]` latent slice, `speaker: [B, t, C]` frame-aligned
    /// condition. Returns `[B, t * hop]` in (-1, 1).
    pub fn decode(&self, z: &Tensor, speaker: &Tensor) -> Result<Tensor> {
        let (b, t, _c) = z.dims3()?;
        if t == 0 {
            return Err(SvsError::shape("cannot decode an empty latent slice".into()));
        }
        if speaker.dims() != z.dims() {
            return Err(SvsError::shape(format!(
                "speaker condition {:?} vs latent {:?}",
                speaker.dims(),
                z.dims()
            )));
        }
        let cond = self.spk_proj.forward(speaker)?.transpose(1, 2)?; // [B, C0, t]
        let mut h = (self.conv_pre.forward(&z.transpose(1, 2)?.contiguous()?)? + cond)?;
        for stage in &self.stages {
            let (bb, cc, tt) = h.dims3()?;
            h = h
                .unsqueeze(3)?
                .broadcast_as((bb, cc, tt, stage.factor))?
                .reshape((bb, cc, tt * stage.factor))?;
            h = stage.conv.forward(&leaky_relu(&h, LRELU_SLOPE)?)?;
            h = stage.res.forward(&h)?;
        }
        let wave = self.conv_post.forward(&leaky_relu(&h, LRELU_SLOPE)?)?.tanh()?;
        Ok(wave.reshape((b, t * self.hop))?)
    }
}

/// The four adversarial-training loss terms, unweighted.
pub struct GanLosses {
    pub gen_adv: Tensor,
    pub disc: Tensor,
    pub feat_match: Tensor,
    pub mel: Tensor,
}

/// Least-squares discriminator loss: real toward 1, fake toward 0.
pub fn adv_disc_loss(real: &[SubDiscOutput], fake: &[SubDiscOutput]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let lr = (r.score.affine(1.0, -1.0)?).sqr()?.mean_all()?;
        let lf = f.score.sqr()?.mean_all()?;
        let term = (lr + lf)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| SvsError::other("no discriminator outputs"))
}

/// Least-squares generator loss: fake scores toward 1.
pub fn adv_gen_loss(fake: &[SubDiscOutput]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in fake {
        let term = (f.score.affine(1.0, -1.0)?).sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| SvsError::other("no discriminator outputs"))
}

/// L1 between intermediate discriminator features; real features are
/// detached so only the generator is pushed.
pub fn feature_matching_loss(real: &[SubDiscOutput], fake: &[SubDiscOutput]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        for (rf, ff) in r.features.iter().zip(&f.features) {
            let term = (ff - rf.detach())?.abs()?.mean_all()?;
            total = Some(match total {
                None => term,
                Some(t) => (t + term)?,
            });
        }
    }
    total.ok_or_else(|| SvsError::other("no features to match"))
}

/// All four losses for a (real, fake) waveform pair of equal length.
/// The discriminator term sees the fake detached; the generator terms see
/// it attached.
pub fn gan_losses(
    disc: &Discriminator,
    mel: &MelTransform,
    real_wave: &Tensor,
    fake_wave: &Tensor,
) -> Result<GanLosses> {
    if real_wave.dims() != fake_wave.dims() {
        return Err(SvsError::shape(format!(
            "real {:?} vs fake {:?}",
            real_wave.dims(),
            fake_wave.dims()
        )));
    }
    let real_outs = disc.forward(real_wave)?;
    let fake_detached = disc.forward(&fake_wave.detach())?;
    let fake_outs = disc.forward(fake_wave)?;
    Ok(GanLosses {
        gen_adv: adv_gen_loss(&fake_outs)?,
        disc: adv_disc_loss(&real_outs, &fake_detached)?,
        feat_match: feature_matching_loss(&real_outs, &fake_outs)?,
        mel: mel.l1(real_wave, fake_wave)?,
    })
}

/// Builds the mel transform matching a toolkit config.
pub fn mel_transform(cfg: &Config, device: &candle_core::Device) -> Result<MelTransform> {
    MelTransform::new(&cfg.features, device)
}
