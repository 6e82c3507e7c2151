//! Finite-difference checks over every differentiable op, the layers, the
//! objectives and the composed network, all in f64 at miniature shapes.

use crate::data::Batch;
use crate::error::Result;
use crate::layers::{dropout_forward, BatchNorm, BayesLinearLayer, LinearLayer, Maxout, Mode, SampleMode};
use crate::models::{Model, ModelConfig, TrainRngs, Variant};
use crate::objectives::{
    bce_with_logits, bernoulli_nll, elbo_v1_loss, elbo_v2_loss, lambda_kl_loss, vi_norm_penalties,
    ElboVariant, SampledPass,
};
use crate::random::{laplace_kl_tensor, laplace_log_prob_tensor, LaplaceParams, Rng};
use crate::tensor::{grad_check_leaves, BinaryOp, Tensor, UnaryOp, DEFAULT_STEP};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Fixture {
    rng: Rng,
}

impl Fixture {
    fn values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| lo + (hi - lo) * self.rng.uniform()).collect()
    }

    fn leaf(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param(self.values(n, lo, hi), shape).unwrap()
    }

    fn constant(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(self.values(n, lo, hi), shape).unwrap()
    }

    /// Values kept at least 0.1 away from zero, for ops with a kink there.
    fn leaf_off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = 0.1 + 0.9 * self.rng.uniform();
                if self.rng.uniform() < 0.5 { -m } else { m }
            })
            .collect();
        Tensor::param(v, shape).unwrap()
    }
}

/// `Σ w ⊙ out` with fixed random `w`, so every output coordinate matters.
fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(out.mul(w)?.sum())
}

fn check(
    name: impl Into<String>,
    leaves: &[Tensor<f64>],
    f: impl FnMut() -> Result<Tensor<f64>>,
) -> Result<CheckResult> {
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: grad_check_leaves(f, leaves, DEFAULT_STEP)?,
    })
}

/// Runs the whole suite. With `inject_fault` a tanh with a wrong backward
/// rule is added, which must fail.
pub fn run_suite(seed: u64, inject_fault: bool) -> Result<Vec<CheckResult>> {
    let mut fx = Fixture { rng: Rng::new(seed) };
    let mut out = Vec::new();
    let (r, c) = (3, 4);
    let w = fx.constant(&[r, c], -1.0, 1.0);

    for op in UnaryOp::ALL {
        let x = match op {
            UnaryOp::Log | UnaryOp::Sqrt | UnaryOp::Recip => fx.leaf(&[r, c], 0.5, 2.0),
            UnaryOp::Abs => fx.leaf_off_zero(&[r, c]),
            _ => fx.leaf(&[r, c], -2.0, 2.0),
        };
        let probe = x.clone();
        out.push(check(op.name(), &[x], || weighted(&probe.unary(op)?, &w))?);
    }

    for op in BinaryOp::ALL {
        let a = fx.leaf(&[r, c], -2.0, 2.0);
        let b = fx.leaf(&[r, c], -2.0, 2.0);
        let row = fx.leaf(&[c], -2.0, 2.0);
        let (pa, pb, prow) = (a.clone(), b.clone(), row.clone());
        out.push(check(op.name(), &[a.clone(), b], || weighted(&pa.binary(op, &pb)?, &w))?);
        out.push(check(format!("{}_row_broadcast", op.name()), &[a, row], || {
            weighted(&pa.binary(op, &prow)?, &w)
        })?);
    }

    let a = fx.leaf(&[r, 5], -1.0, 1.0);
    let b = fx.leaf(&[5, c], -1.0, 1.0);
    let bt = fx.leaf(&[c, 5], -1.0, 1.0);
    let (pa, pb, pbt) = (a.clone(), b.clone(), bt.clone());
    out.push(check("matmul", &[a.clone(), b], || weighted(&pa.matmul(&pb)?, &w))?);
    out.push(check("matmul_nt", &[a, bt], || weighted(&pa.matmul_nt(&pbt)?, &w))?);

    let x = fx.leaf(&[r, 2], -1.0, 1.0);
    let y = fx.leaf(&[r, 2], -1.0, 1.0);
    let (px, py) = (x.clone(), y.clone());
    out.push(check("concat_last", &[x, y], || weighted(&px.concat_last(&py)?, &w))?);

    let x = fx.leaf(&[r, c], -2.0, 2.0);
    let px = x.clone();
    let wc = fx.constant(&[c], -1.0, 1.0);
    let wr = fx.constant(&[r], -1.0, 1.0);
    out.push(check("sum", std::slice::from_ref(&x), || Ok(px.sum().scale(1.7)))?);
    out.push(check("mean", std::slice::from_ref(&x), || Ok(px.mean().scale(1.7)))?);
    out.push(check("sum_axis0", std::slice::from_ref(&x), || weighted(&px.sum_axis(0)?, &wc))?);
    out.push(check("sum_axis1", std::slice::from_ref(&x), || weighted(&px.sum_axis(1)?, &wr))?);
    out.push(check("mean_axis0", std::slice::from_ref(&x), || weighted(&px.mean_axis(0)?, &wc))?);
    out.push(check("mean_axis1", std::slice::from_ref(&x), || weighted(&px.mean_axis(1)?, &wr))?);
    out.push(check("scale", std::slice::from_ref(&x), || weighted(&px.scale(-2.5), &w))?);
    out.push(check("add_scalar", std::slice::from_ref(&x), || weighted(&px.add_scalar(0.3), &w))?);
    out.push(check("rsub_scalar", std::slice::from_ref(&x), || weighted(&px.rsub_scalar(1.0), &w))?);
    out.push(check("map_elementwise", std::slice::from_ref(&x), || {
        weighted(&px.map_elementwise(|v| v * v * v, |v| 3.0 * v * v), &w)
    })?);

    let logits = fx.leaf(&[r, c], -4.0, 4.0);
    let targets = Tensor::new(
        (0..r * c).map(|i| (i % 3 == 0) as u8 as f64).collect(),
        &[r, c],
    )?;
    let pl = logits.clone();
    out.push(check("bce_with_logits", std::slice::from_ref(&logits), || {
        weighted(&pl.bce_with_logits_elementwise(&targets)?, &w)
    })?);
    out.push(check("bce_batch_mean", std::slice::from_ref(&logits), || bce_with_logits(&pl, &targets))?);
    out.push(check("bernoulli_nll", &[logits], || bernoulli_nll(&pl, &targets))?);

    let prior = LaplaceParams::new(0.0, 1.0)?;
    let loc = fx.leaf_off_zero(&[r, c]);
    let scale = fx.leaf(&[r, c], 0.2, 2.0);
    let (ploc, pscale) = (loc.clone(), scale.clone());
    out.push(check("laplace_kl", &[loc.clone(), scale.clone()], || {
        laplace_kl_tensor(&ploc, &pscale, &prior)
    })?);
    let xs = fx.leaf(&[r, c], -2.0, 2.0);
    let pxs = xs.clone();
    out.push(check("laplace_log_prob", &[xs, loc, scale], || {
        laplace_log_prob_tensor(&pxs, &ploc, &pscale)
    })?);

    let mut init = Rng::new(seed ^ 0x5eed);
    let lin = LinearLayer::<f64>::new(5, c, &mut init)?;
    let xin = fx.leaf(&[r, 5], -1.0, 1.0);
    let px = xin.clone();
    let mut leaves = vec![xin.clone(), lin.weight.clone(), lin.bias.clone()];
    out.push(check("linear", &leaves, || weighted(&lin.forward(&px)?, &w))?);

    let maxout = Maxout::<f64>::new(5, c, 3, &mut init)?;
    leaves.truncate(1);
    leaves.extend(maxout.pieces.iter().flat_map(|p| [p.weight.clone(), p.bias.clone()]));
    out.push(check("maxout", &leaves, || weighted(&maxout.forward(&px)?, &w))?);

    let mut bn = BatchNorm::<f64>::new(c, BatchNorm::<f64>::DEFAULT_MOMENTUM, BatchNorm::<f64>::DEFAULT_EPSILON)?;
    bn.gamma.set_data(&fx.values(c, 0.5, 1.5))?;
    bn.beta.set_data(&fx.values(c, -0.5, 0.5))?;
    let xb = fx.leaf(&[r, c], -2.0, 2.0);
    let pxb = xb.clone();
    let bn_leaves = [xb, bn.gamma.clone(), bn.beta.clone()];
    out.push(check("batchnorm_train", &bn_leaves, || weighted(&bn.forward_train(&pxb)?, &w))?);

    let drop_rng = Rng::new(seed ^ 0xd0);
    out.push(check("dropout", std::slice::from_ref(&bn_leaves[0]), || {
        weighted(&dropout_forward(0.5, &pxb, &mut drop_rng.clone(), Mode::Train)?, &w)
    })?);

    let bayes = BayesLinearLayer::<f64>::new(5, c, 0.1, 0.05, prior)?;
    bayes.weight.loc.set_data(&fx.values(5 * c, -0.5, 0.5))?;
    let sample_rng = Rng::new(seed ^ 0xba);
    let vi_leaves = [
        xin.clone(),
        bayes.weight.loc.clone(),
        bayes.weight.rho.clone(),
        bayes.bias.loc.clone(),
        bayes.bias.rho.clone(),
    ];
    out.push(check("bayes_linear_sampled", &vi_leaves, || {
        let f = bayes.forward(&px, Some(&mut sample_rng.clone()), SampleMode::Sample)?;
        weighted(&f.output, &w)
    })?);

    let elbo = |kind: &str| -> Result<Tensor<f64>> {
        let f = bayes.forward(&px, Some(&mut sample_rng.clone()), SampleMode::Sample)?;
        let pass = SampledPass {
            nll: bernoulli_nll(&f.output, &targets)?,
            sites: f.sites,
        };
        let passes = [pass];
        Ok(match kind {
            "v1" => elbo_v1_loss(&passes, 0.25)?,
            "v2" => elbo_v2_loss(&passes, 0.25)?,
            _ => lambda_kl_loss(&passes, 0.25, 3, &ElboVariant::lambda_kl(10))?,
        }
        .loss)
    };
    for kind in ["v1", "v2", "lambda_kl"] {
        out.push(check(format!("elbo_{kind}"), &vi_leaves, || elbo(kind))?);
    }

    let locs = [bayes.weight.loc.clone(), bayes.bias.loc.clone()];
    out.push(check("l1_penalty", &locs, || Ok(vi_norm_penalties(&locs, 0.1)?.0))?);
    out.push(check("l2_penalty", &locs, || Ok(vi_norm_penalties(&locs, 0.1)?.1))?);

    out.push(composed_model(seed)?);

    if inject_fault {
        let x = fx.leaf(&[r, c], -2.0, 2.0);
        let px = x.clone();
        out.push(check("tanh_corrupted_backward", &[x], || {
            weighted(&px.map_elementwise(f64::tanh, |v| 1.0 - v.tanh()), &w)
        })?);
    }
    Ok(out)
}

/// Fusion module, maxout classifier and ELBO with the L2 penalty, end to end.
fn composed_model(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        text_dim: 4,
        image_dim: 3,
        hidden_width: 4,
        classifier_width: 3,
        n_classes: 3,
        dropout: 0.5,
        variant: Variant::PmMo,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0xc0);
    let n = 5;
    let data = |k: usize, rng: &mut Rng| -> Vec<f64> { (0..k).map(|_| rng.normal(0.0, 1.0)).collect() };
    let batch = Batch::<f64> {
        indices: (0..n).collect(),
        text: Tensor::new(data(n * 4, &mut rng), &[n, 4])?,
        image: Tensor::new(data(n * 3, &mut rng), &[n, 3])?,
        labels: Tensor::new((0..n * 3).map(|i| (i % 2) as f64).collect(), &[n, 3])?,
    };
    let leaves: Vec<Tensor<f64>> = model
        .params()
        .into_iter()
        .filter(|p| p.role.trainable())
        .map(|p| p.tensor)
        .collect();
    let rngs = TrainRngs::new(seed);
    let penalised = model.a.penalised();
    check("composed_model", &leaves, || {
        let mut r = rngs.clone();
        let f = model.forward(&batch.text, &batch.image, Some(&mut r), Mode::Train)?;
        let pass = SampledPass {
            nll: bernoulli_nll(&f.logits, &batch.labels)?,
            sites: f.fusion.sites,
        };
        let obj = lambda_kl_loss(&[pass], 0.5, 2, &ElboVariant::lambda_kl(20))?;
        obj.loss.add(&vi_norm_penalties(&penalised, 0.1)?.1)
    })
}
