//! The two-module network: variational gated fusion (A) feeding a maxout
//! classifier (C), plus its deterministic variants.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    build_optimizers, fit, train_step, EpochLog, FitOutcome, Optimizers, TrainConfig, TrainRngs,
};

use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset, Modality, IMAGE_DIM, N_CLASSES, TEXT_DIM};
use crate::error::{Error, Result};
use crate::layers::{
    dropout_forward, max_norm_project, BatchNorm, BayesLinearLayer, KlSite,
    LinearLayer, Maxout, Mode, NamedParam, Parameterized, SampleMode,
};
use crate::metrics::{MetricsReport, PredictionSet};
use crate::objectives::{ElboVariant, NormPenalty};
use crate::random::{LaplaceParams, Rng, Stream};
use crate::tensor::{no_grad, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Variational fusion module, two optimizers.
    PmMo,
    /// Deterministic fusion module, two optimizers, penalised likelihood.
    MMo,
    /// Deterministic, one optimizer, plain BCE.
    GmuBaseline,
}

impl Variant {
    pub fn is_variational(self) -> bool {
        self == Variant::PmMo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub image_dim: usize,
    pub hidden_width: usize,
    pub classifier_width: usize,
    pub maxout_pieces: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub elbo: ElboVariant,
    pub norm_penalty: NormPenalty,
    pub lambda_norm: f64,
    pub use_batchnorm: bool,
    pub use_maxnorm: bool,
    pub maxnorm_c: f64,
    pub modality: Modality,
    pub loc_init: f64,
    pub scale_init: f64,
    pub prior_loc: f64,
    pub prior_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_dim: TEXT_DIM,
            image_dim: IMAGE_DIM,
            hidden_width: 3000,
            classifier_width: 512,
            maxout_pieces: 2,
            n_classes: N_CLASSES,
            dropout: 0.9,
            variant: Variant::PmMo,
            elbo: ElboVariant::lambda_kl_over_run(),
            norm_penalty: NormPenalty::L2,
            lambda_norm: 0.1,
            use_batchnorm: true,
            use_maxnorm: true,
            maxnorm_c: 3.0,
            modality: Modality::Both,
            loc_init: 0.1,
            scale_init: 0.01,
            prior_loc: 0.0,
            prior_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
            ("hidden_width", self.hidden_width),
            ("classifier_width", self.classifier_width),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.maxout_pieces < 2 {
            return Err(Error::config("maxout_pieces must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lambda_norm >= 0.0) || !(self.maxnorm_c > 0.0) {
            return Err(Error::config("lambda_norm must be ≥ 0 and maxnorm_c > 0"));
        }
        if !(self.scale_init > 0.0) || !self.loc_init.is_finite() {
            return Err(Error::config("posterior init needs finite loc and scale > 0"));
        }
        LaplaceParams::new(self.prior_loc, self.prior_scale)
            .map_err(|e| Error::config(format!("prior: {e}")))?;
        self.elbo.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let want = (self.text_dim, self.image_dim, self.n_classes);
        let got = (ds.text_dim, ds.image_dim, ds.n_classes);
        if want != got {
            return Err(Error::Schema(format!("model expects dims {want:?}, dataset has {got:?}")));
        }
        Ok(())
    }
}

/// A hidden layer that is variational or deterministic depending on the
/// model variant.
#[derive(Clone, Debug)]
pub enum Dense<T: Scalar> {
    Bayes(BayesLinearLayer<T>),
    Plain(LinearLayer<T>),
}

impl<T: Scalar> Dense<T> {
    fn build(cfg: &ModelConfig, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        if cfg.variant.is_variational() {
            let prior = LaplaceParams::new(cfg.prior_loc, cfg.prior_scale)?;
            Ok(Dense::Bayes(BayesLinearLayer::new(
                input,
                output,
                cfg.loc_init,
                cfg.scale_init,
                prior,
            )?))
        } else {
            Ok(Dense::Plain(LinearLayer::new(input, output, rng)?))
        }
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        rng: Option<&mut Rng>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<KlSite<T>>)> {
        match self {
            Dense::Plain(l) => Ok((l.forward(x)?, Vec::new())),
            Dense::Bayes(l) => {
                let sample = if mode == Mode::Train {
                    SampleMode::Sample
                } else {
                    SampleMode::Mean
                };
                let f = l.forward(x, rng, sample)?;
                Ok((f.output, f.sites))
            }
        }
    }

    /// Locations of a variational layer, or weight and bias of a plain one.
    pub fn penalised(&self) -> Vec<Tensor<T>> {
        match self {
            Dense::Bayes(l) => vec![l.weight.loc.clone(), l.bias.loc.clone()],
            Dense::Plain(l) => vec![l.weight.clone(), l.bias.clone()],
        }
    }

    pub fn kl_contribution(&self) -> Result<Tensor<T>> {
        match self {
            Dense::Bayes(l) => l.kl_contribution(),
            Dense::Plain(_) => Ok(Tensor::scalar(T::zero())),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            Dense::Bayes(l) => l.out_width(),
            Dense::Plain(l) => l.out_width(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        match self {
            Dense::Bayes(l) => l.visit_params(prefix, out),
            Dense::Plain(l) => l.visit_params(prefix, out),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionModuleA<T: Scalar> {
    pub text: Dense<T>,
    pub text_bn: Option<BatchNorm<T>>,
    pub image: Dense<T>,
    pub image_bn: Option<BatchNorm<T>>,
    pub gate: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct FusionOutput<T: Scalar> {
    pub z: Tensor<T>,
    pub h_text: Tensor<T>,
    pub h_image: Tensor<T>,
    pub gate: Tensor<T>,
    pub sites: Vec<KlSite<T>>,
}

impl<T: Scalar> FusionModuleA<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let h = cfg.hidden_width;
        let bn = || {
            cfg.use_batchnorm
                .then(|| BatchNorm::new(h, BatchNorm::<T>::DEFAULT_MOMENTUM, BatchNorm::<T>::DEFAULT_EPSILON))
                .transpose()
        };
        Ok(FusionModuleA {
            text: Dense::build(cfg, cfg.text_dim, h, rng)?,
            text_bn: bn()?,
            image: Dense::build(cfg, cfg.image_dim, h, rng)?,
            image_bn: bn()?,
            gate: Dense::build(cfg, 2 * h, h, rng)?,
        })
    }

    fn branch(
        layer: &Dense<T>,
        bn: &mut Option<BatchNorm<T>>,
        x: &Tensor<T>,
        rng: Option<&mut Rng>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<KlSite<T>>)> {
        let (mut a, sites) = layer.forward(x, rng, mode)?;
        if let Some(bn) = bn {
            a = bn.forward(&a, mode)?;
        }
        Ok((a.tanh(), sites))
    }

    /// `h_t`, `h_i` from the branches, `g = σ(gate([h_t, h_i]))` and
    /// `z = g ⊙ h_i + (1 − g) ⊙ h_t`.
    pub fn forward(
        &mut self,
        text: &Tensor<T>,
        image: &Tensor<T>,
        mut rng: Option<&mut Rng>,
        mode: Mode,
    ) -> Result<FusionOutput<T>> {
        if text.rank() != 2 || image.rank() != 2 || text.shape()[0] != image.shape()[0] {
            return Err(Error::dim("fuse_forward", text.shape(), image.shape()));
        }
        let (h_text, mut sites) =
            Self::branch(&self.text, &mut self.text_bn, text, rng.as_deref_mut(), mode)?;
        let (h_image, s) =
            Self::branch(&self.image, &mut self.image_bn, image, rng.as_deref_mut(), mode)?;
        sites.extend(s);
        let v_cat = h_text.concat_last(&h_image)?;
        let (g, s) = self.gate.forward(&v_cat, rng, mode)?;
        sites.extend(s);
        let gate = g.sigmoid();
        let z = gate.mul(&h_image.sub(&h_text)?)?.add(&h_text)?;
        Ok(FusionOutput {
            z,
            h_text,
            h_image,
            gate,
            sites,
        })
    }

    pub fn kl_total(&self) -> Result<Tensor<T>> {
        self.text
            .kl_contribution()?
            .add(&self.image.kl_contribution()?)?
            .add(&self.gate.kl_contribution()?)
    }

    pub fn penalised(&self) -> Vec<Tensor<T>> {
        [&self.text, &self.image, &self.gate]
            .iter()
            .flat_map(|d| d.penalised())
            .collect()
    }
}

impl<T: Scalar> Parameterized<T> for FusionModuleA<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        self.text.visit_params(&format!("{prefix}.text"), out);
        if let Some(bn) = &self.text_bn {
            bn.visit_params(&format!("{prefix}.text_bn"), out);
        }
        self.image.visit_params(&format!("{prefix}.image"), out);
        if let Some(bn) = &self.image_bn {
            bn.visit_params(&format!("{prefix}.image_bn"), out);
        }
        self.gate.visit_params(&format!("{prefix}.gate"), out);
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModuleC<T: Scalar> {
    pub dropout: f64,
    pub maxout: Maxout<T>,
    pub output: LinearLayer<T>,
}

impl<T: Scalar> ClassifierModuleC<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(ClassifierModuleC {
            dropout: cfg.dropout,
            maxout: Maxout::new(cfg.hidden_width, cfg.classifier_width, cfg.maxout_pieces, rng)?,
            output: LinearLayer::new(cfg.classifier_width, cfg.n_classes, rng)?,
        })
    }

    /// `linear(maxout(dropout(z)))`.
    pub fn forward(&self, z: &Tensor<T>, rng: Option<&mut Rng>, mode: Mode) -> Result<Tensor<T>> {
        let dropped = match (mode, rng) {
            (Mode::Eval, _) => z.clone(),
            (Mode::Train, Some(rng)) => dropout_forward(self.dropout, z, rng, mode)?,
            (Mode::Train, None) if self.dropout == 0.0 => z.clone(),
            (Mode::Train, None) => return Err(Error::contract("train-mode dropout needs an rng")),
        };
        self.output.forward(&self.maxout.forward(&dropped)?)
    }
}

impl<T: Scalar> Parameterized<T> for ClassifierModuleC<T> {
    fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<T>>) {
        self.maxout.visit_params(&format!("{prefix}.maxout"), out);
        self.output.visit_params(&format!("{prefix}.output"), out);
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T: Scalar> {
    pub logits: Tensor<T>,
    pub fusion: FusionOutput<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub a: FusionModuleA<T>,
    pub c: ClassifierModuleC<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::for_stream(seed, Stream::Init);
        let a = FusionModuleA::new(&config, &mut rng)?;
        let c = ClassifierModuleC::new(&config, &mut rng)?;
        Ok(Model { config, a, c })
    }

    fn mask_inputs(&self, text: &Tensor<T>, image: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        match self.config.modality {
            Modality::Both => (text.clone(), image.clone()),
            Modality::TextOnly => (text.clone(), Tensor::zeros(image.shape())),
            Modality::ImageOnly => (Tensor::zeros(text.shape()), image.clone()),
        }
    }

    pub fn forward(
        &mut self,
        text: &Tensor<T>,
        image: &Tensor<T>,
        rngs: Option<&mut TrainRngs>,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        let (text, image) = self.mask_inputs(text, image);
        let (sampling, dropout) = match rngs {
            Some(r) => (Some(&mut r.sampling), Some(&mut r.dropout)),
            None => (None, None),
        };
        let fusion = self.a.forward(&text, &image, sampling, mode)?;
        let logits = self.c.forward(&fusion.z, dropout, mode)?;
        Ok(ForwardPass { logits, fusion })
    }

    /// Evaluation-mode logits: posterior means, no dropout, running
    /// batchnorm statistics. Records nothing.
    pub fn forward_eval(&self, text: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut view = self.clone();
        no_grad(|| Ok(view.forward(text, image, None, Mode::Eval)?.logits))
    }

    pub fn params(&self) -> Vec<NamedParam<T>> {
        let mut out = self.a.params("a");
        self.c.visit_params("c", &mut out);
        out
    }

    pub fn a_params(&self) -> Vec<NamedParam<T>> {
        self.a.params("a")
    }

    pub fn c_params(&self) -> Vec<NamedParam<T>> {
        self.c.params("c")
    }

    pub fn kl_total(&self) -> Result<f64> {
        Ok(no_grad(|| self.a.kl_total())?.item().to_f64().unwrap_or(f64::NAN))
    }

    /// Rescales every over-long row of the deterministic weights and
    /// posterior locations.
    pub fn project_max_norm(&self) -> Result<()> {
        for p in self.params() {
            if p.role.max_norm_applies() {
                max_norm_project(&p.tensor, self.config.maxnorm_c)?;
            }
        }
        Ok(())
    }

    pub fn predict_logits(&self, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<f64>> {
        self.config.check_dataset(ds)?;
        let mut out = Vec::with_capacity(indices.len() * self.config.n_classes);
        for batch in batches::<T>(ds, indices, batch_size, None)? {
            let b: Batch<T> = batch?;
            let logits = self.forward_eval(&b.text, &b.image)?;
            out.extend(logits.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(out)
    }

    /// Metrics of thresholded `σ(logit)` on the given records.
    pub fn evaluate(&self, ds: &Dataset, indices: &[usize], threshold: f64) -> Result<MetricsReport> {
        if indices.is_empty() {
            return Err(Error::contract("cannot evaluate on an empty set"));
        }
        let logits = self.predict_logits(ds, indices, 512)?;
        let truth: Vec<u8> = indices
            .iter()
            .flat_map(|&i| ds.records[i].labels.iter().copied())
            .collect();
        let p = PredictionSet::from_logits(&logits, truth, self.config.n_classes, threshold)?;
        MetricsReport::from_predictions(&p)
    }

    /// Copies of every parameter and buffer, in [`Model::params`] order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| p.tensor.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<T>]) -> Result<()> {
        let params = self.params();
        if params.len() != snapshot.len() {
            return Err(Error::contract("snapshot does not match the model"));
        }
        for (p, s) in params.iter().zip(snapshot) {
            p.tensor.set_data(s)?;
        }
        Ok(())
    }
}

/// The gated single-objective baseline: deterministic layers, dropout 0.7.
pub fn build_gmu_baseline<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(
        ModelConfig {
            variant: Variant::GmuBaseline,
            dropout: 0.7,
            norm_penalty: NormPenalty::None,
            ..config.clone()
        },
        seed,
    )
}

#[cfg(test)]
mod tests;
