//! Training losses, the identity feature extractor interface, and the
//! adversarial/identity weight schedules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{clamp_prob, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, Mode, ParamStore};
use crate::tensor::Tensor;

pub const DECAY_RATE: f64 = 0.995;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub eta0: f64,
    pub decay_rate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 1e-2,
            eta0: 1e-3,
            decay_rate: DECAY_RATE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.eta0 >= 0.0 && self.lambda0.is_finite() && self.eta0.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, epoch: u64) -> f64 {
        decay_schedule(self.lambda0, epoch, self.decay_rate)
    }

    pub fn eta(&self, epoch: u64) -> f64 {
        decay_schedule(self.eta0, epoch, self.decay_rate)
    }
}

/// `max(base * rate^n, base / 2)`.
pub fn decay_schedule(base: f64, n: u64, rate: f64) -> f64 {
    let n = i32::try_from(n).unwrap_or(i32::MAX);
    (base * rate.powi(n)).max(base / 2.0)
}

/// A fixed map from image batches to feature batches. Implementations must
/// be deterministic and must not expose trainable parameters.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Differentiable features of `x` (`N x 3 x S x S`).
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    /// Features of a detached batch.
    fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let f = self.features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }

    /// Intermediate activations used for Gram statistics; by default just
    /// the output features.
    fn taps(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![self.extract(batch)?])
    }
}

/// `psi(x) = x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn name(&self) -> &str {
        "pixel"
    }

    fn features(&self, _tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomConvSpec {
    pub seed: u64,
    pub channels: usize,
    /// Number of stride-2 conv layers after the first stride-1 layer.
    pub downsamples: usize,
}

impl Default for RandomConvSpec {
    fn default() -> Self {
        RandomConvSpec {
            seed: 7,
            channels: 8,
            downsamples: 2,
        }
    }
}

/// A frozen, randomly initialized conv net: a 3x3 conv followed by
/// `downsamples` 4x4/s2 convs, each followed by leaky ReLU. Weights use
/// He-normal scaling so feature magnitudes stay near the input scale.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    spec: RandomConvSpec,
    store: ParamStore,
    convs: Vec<Conv>,
}

impl RandomConvExtractor {
    pub fn new(spec: RandomConvSpec) -> Result<Self> {
        if spec.channels == 0 {
            return Err(Error::Config("extractor channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..=spec.downsamples {
            let (k, s, p) = if i == 0 { (3, 1, 1) } else { (4, 2, 1) };
            let conv = Conv::new(&mut store, &format!("psi{i}"), cin, spec.channels, k, s, p, true, &mut rng);
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let w = store.get_mut(conv.weight);
            *w = w.map(|v| v / crate::nn::INIT_STD * std);
            convs.push(conv);
            cin = spec.channels;
        }
        Ok(RandomConvExtractor { spec, store, convs })
    }

    pub fn spec(&self) -> &RandomConvSpec {
        &self.spec
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.run(tape, x, None)
    }

    fn taps(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut out = Vec::new();
        self.run(&mut tape, x, Some(&mut out))?;
        Ok(out)
    }
}

impl RandomConvExtractor {
    fn run(&self, tape: &mut Tape, x: Var, mut taps: Option<&mut Vec<Tensor>>) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("extractor expects N x 3 x H x W, got {s:?}")));
        }
        let factor = 1usize << self.spec.downsamples;
        if s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::Shape(format!(
                "extractor needs sides divisible by {factor}, got {}x{}",
                s[2], s[3]
            )));
        }
        let empty = ParamStore::new();
        let mut b = Binding::new(&self.store, &empty, false, Mode::Eval);
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, &mut b, h);
            h = tape.leaky_relu(h, 0.2);
            if let Some(t) = taps.as_deref_mut() {
                t.push(tape.value(h).clone());
            }
        }
        Ok(h)
    }
}

/// Which extractor the trainer should build.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Pixel,
    RandomConv(RandomConvSpec),
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::RandomConv(RandomConvSpec::default())
    }
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorSpec::Pixel => Box::new(PixelExtractor),
            ExtractorSpec::RandomConv(spec) => Box::new(RandomConvExtractor::new(*spec)?),
        })
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared difference over every element of the batch.
pub fn pixel_loss(tape: &mut Tape, gen: Var, gt: Var) -> Result<Var> {
    same_shape(tape, gen, gt, "pixel loss")?;
    Ok(tape.mean_squared_diff(gen, gt))
}

/// Mean squared difference of extractor features; the ground-truth branch
/// is evaluated off the tape and enters as a constant.
pub fn identity_loss(tape: &mut Tape, psi: &dyn FeatureExtractor, gen: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(gen) != gt.shape() {
        return Err(Error::Shape(format!(
            "identity loss: {:?} vs {:?}",
            tape.shape(gen),
            gt.shape()
        )));
    }
    let f_gen = psi.features(tape, gen)?;
    let f_gt = psi.extract(gt)?;
    let f_gt = tape.constant(f_gt);
    same_shape(tape, f_gen, f_gt, "identity features")?;
    Ok(tape.mean_squared_diff(f_gen, f_gt))
}

/// `mean(-ln d_real) + mean(-ln(1 - d_fake))`.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Var {
    let real = tape.mean_neg_log(d_real, false);
    let fake = tape.mean_neg_log(d_fake, true);
    tape.add(real, fake)
}

/// Non-saturating generator term `mean(-ln d_fake)`.
pub fn generator_adversarial_loss(tape: &mut Tape, d_fake: Var) -> Var {
    tape.mean_neg_log(d_fake, false)
}

pub fn srn_total_loss(tape: &mut Tape, pix: Var, adv: Var, id: Var, lambda: f64, eta: f64) -> Var {
    tape.lin_comb(&[(pix, 1.0), (adv, lambda), (id, eta)])
}

/// Plain-number forms of the losses.
pub mod value {
    use super::*;

    pub fn pixel_loss(gen: &Tensor, gt: &Tensor) -> Result<f64> {
        if gen.shape() != gt.shape() {
            return Err(Error::Shape(format!("pixel loss: {:?} vs {:?}", gen.shape(), gt.shape())));
        }
        Ok(gen.zip_map(gt, |a, b| (a - b) * (a - b)).mean())
    }

    fn mean_neg_log(p: &[f64], complement: bool) -> f64 {
        let s: f64 = p
            .iter()
            .map(|&v| {
                let v = clamp_prob(v);
                if complement {
                    -(1.0 - v).ln()
                } else {
                    -v.ln()
                }
            })
            .sum();
        s / p.len() as f64
    }

    pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
        mean_neg_log(d_real, false) + mean_neg_log(d_fake, true)
    }

    pub fn generator_adversarial_loss(d_fake: &[f64]) -> f64 {
        mean_neg_log(d_fake, false)
    }

    pub fn srn_total_loss(pix: f64, adv: f64, id: f64, lambda: f64, eta: f64) -> f64 {
        pix + lambda * adv + eta * id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{numeric_gradient, relative_error, DEFAULT_STEP};
    use std::f64::consts::LN_2;

    #[test]
    fn pixel_loss_cases() {
        let a = Tensor::ones(&[2, 3, 4, 4]);
        let z = Tensor::zeros(&[2, 3, 4, 4]);
        assert_eq!(value::pixel_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(value::pixel_loss(&a, &z).unwrap(), 1.0);
        assert!(value::pixel_loss(&a, &Tensor::zeros(&[2, 3, 4, 2])).is_err());
    }

    #[test]
    fn pixel_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g0 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let t0 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let g = tape.param(g0.clone());
        let t = tape.constant(t0.clone());
        let l = pixel_loss(&mut tape, g, t).unwrap();
        let grad = tape.backward(l);
        let analytic = g0.zip_map(&t0, |a, b| 2.0 * (a - b) / g0.len() as f64);
        assert!(relative_error(grad.get(g).unwrap(), &analytic) < 1e-14);
        let numeric = numeric_gradient(&g0, DEFAULT_STEP, |x| value::pixel_loss(x, &t0).unwrap());
        assert!(relative_error(&numeric, &analytic) < 1e-8);
    }

    #[test]
    fn identity_loss_with_pixel_extractor_is_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g0 = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut rng);
        let t0 = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let g = tape.param(g0.clone());
        let t = tape.constant(t0.clone());
        let id = identity_loss(&mut tape, &PixelExtractor, g, &t0).unwrap();
        let pix = pixel_loss(&mut tape, g, t).unwrap();
        assert_eq!(tape.value(id).item(), tape.value(pix).item());
        let same = identity_loss(&mut tape, &PixelExtractor, t, &t0).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn identity_loss_gradient_through_random_extractor() {
        let psi = RandomConvExtractor::new(RandomConvSpec {
            seed: 3,
            channels: 4,
            downsamples: 1,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g0 = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let t0 = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let g = tape.param(g0.clone());
        let l = identity_loss(&mut tape, &psi, g, &t0).unwrap();
        assert!(tape.value(l).item() > 0.0);
        let grad = tape.backward(l);
        let ft = psi.extract(&t0).unwrap();
        let numeric = numeric_gradient(&g0, DEFAULT_STEP, |x| {
            value::pixel_loss(&psi.extract(x).unwrap(), &ft).unwrap()
        });
        assert!(relative_error(grad.get(g).unwrap(), &numeric) < 1e-3);
    }

    #[test]
    fn extractor_rejects_bad_shapes() {
        let psi = RandomConvExtractor::new(RandomConvSpec::default()).unwrap();
        assert!(psi.extract(&Tensor::zeros(&[1, 3, 6, 6])).is_err());
        assert!(psi.extract(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn discriminator_loss_cases() {
        assert!((value::discriminator_loss(&[0.5; 4], &[0.5; 4]) - 2.0 * LN_2).abs() < 1e-12);
        assert!(value::discriminator_loss(&[1.0], &[0.0]) < 1e-6);
        let v = value::discriminator_loss(&[0.9], &[0.1]);
        assert!((v - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((v - 0.21072).abs() < 1e-5);

        let mut tape = Tape::new();
        let r = tape.constant(Tensor::full(&[3, 1], 0.5));
        let f = tape.constant(Tensor::full(&[3, 1], 0.5));
        let l = discriminator_loss(&mut tape, r, f);
        assert!((tape.value(l).item() - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn generator_adversarial_cases() {
        assert!(value::generator_adversarial_loss(&[1.0]) < 1e-6);
        assert!((value::generator_adversarial_loss(&[0.5]) - LN_2).abs() < 1e-12);
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in grid.windows(2) {
            assert!(value::generator_adversarial_loss(&[w[1]]) < value::generator_adversarial_loss(&[w[0]]));
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((value::srn_total_loss(1.0, 0.7, 2.0, 1e-2, 1e-3) - 1.009).abs() < 1e-12);
        assert_eq!(value::srn_total_loss(0.3, 5.0, 7.0, 0.0, 0.0), 0.3);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(1.0));
        let a = tape.constant(Tensor::scalar(0.7));
        let i = tape.constant(Tensor::scalar(2.0));
        let t = srn_total_loss(&mut tape, p, a, i, 1e-2, 1e-3);
        assert!((tape.value(t).item() - 1.009).abs() < 1e-12);
    }

    #[test]
    fn schedule_cases() {
        let w = LossWeights::default();
        assert_eq!(w.lambda(0), 1e-2);
        assert_eq!(w.eta(0), 1e-3);
        assert_eq!(w.lambda(139), 5e-3);
        assert_eq!(w.lambda(u64::MAX), 5e-3);
        assert!(0.995f64.powi(138) > 0.5 && 0.995f64.powi(139) < 0.5);
        assert!(decay_schedule(1.0, 138, DECAY_RATE) > 0.5);
        assert_eq!(decay_schedule(1.0, 139, DECAY_RATE), 0.5);
    }

    #[test]
    fn extractor_spec_round_trip() {
        let spec = ExtractorSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExtractorSpec>(&json).unwrap(), spec);
        let pixel: ExtractorSpec = serde_json::from_str(r#"{"kind":"pixel"}"#).unwrap();
        assert_eq!(pixel.build().unwrap().name(), "pixel");
    }

    proptest::proptest! {
        #[test]
        fn schedule_bounded_and_monotone(base in 1e-6f64..10.0, n in 0u64..2000) {
            let a = decay_schedule(base, n, DECAY_RATE);
            let b = decay_schedule(base, n + 1, DECAY_RATE);
            proptest::prop_assert!(b <= a);
            proptest::prop_assert!(a <= base && a >= base / 2.0);
        }

        #[test]
        fn losses_finite_and_nonnegative(p in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
            let d = value::discriminator_loss(&p, &p);
            let g = value::generator_adversarial_loss(&p);
            proptest::prop_assert!(d.is_finite() && d >= 0.0);
            proptest::prop_assert!(g.is_finite() && g >= 0.0);
        }
    }
}
