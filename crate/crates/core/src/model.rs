//! The full parameter set shared by all three training stages, plus the
//! optimizer loop they have in common.

use rand::{Rng, SeedableRng};

use crate::autodiff::{adamw_step, AdamWConfig, AdamWState, Graph, Scalar, Tensor, Var};
use crate::corpus::Priority;
use crate::encoder::{EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = Priority::ALL.len();

/// Encoder, MLM output bias (the MLM head reuses the token embedding), and
/// the `5 × d_model` classification matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: EncoderConfig,
    pub encoder: EncoderParams<T>,
    pub mlm_bias: Tensor<T>,
    pub classifier: Tensor<T>,
}

/// Which tensors a stage updates. Tensors outside the group receive no
/// update at all, not even weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Mlm,
    Contrastive,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub mlm_bias: Var,
    pub classifier: Var,
}

impl ModelVars {
    pub fn group(&self, group: ParamGroup) -> Vec<Var> {
        let mut out = self.encoder.vars();
        match group {
            ParamGroup::Mlm => out.push(self.mlm_bias),
            ParamGroup::Contrastive => {}
            ParamGroup::Finetune => out.push(self.classifier),
        }
        out
    }
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::init(&config, rng)?;
        let classifier = Tensor::randn(
            &[NUM_CLASSES, config.d_model],
            crate::encoder::INIT_STD,
            rng,
        );
        Ok(Self {
            mlm_bias: Tensor::zeros(&[config.vocab_size]),
            classifier,
            config,
            encoder,
        })
    }

    /// Checkpoint order: encoder tensors, then `mlm.bias`, then
    /// `classifier.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named_tensors();
        out.push(("mlm.bias".into(), &self.mlm_bias));
        out.push(("classifier.weight".into(), &self.classifier));
        out
    }

    /// Same order as [`Model::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.mlm_bias);
        out.push(&mut self.classifier);
        out
    }

    /// Expected shape of every tensor for this config, in checkpoint order.
    pub fn expected_shapes(config: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
        // A zero-std model draws nothing and keeps the naming logic in one place.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m: Model<f32> = Model::init_with_std(*config, 0.0, &mut rng)?;
        Ok(m.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect())
    }

    fn init_with_std<R: Rng + ?Sized>(
        config: EncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = EncoderParams::init_with_std(&config, std, rng)?;
        Ok(Self {
            mlm_bias: Tensor::zeros(&[config.vocab_size]),
            classifier: Tensor::randn(&[NUM_CLASSES, config.d_model], std, rng),
            config,
            encoder,
        })
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        match group {
            ParamGroup::Mlm => out.push(&mut self.mlm_bias),
            ParamGroup::Contrastive => {}
            ParamGroup::Finetune => out.push(&mut self.classifier),
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        let encoder = self.encoder.bind(g);
        ModelVars {
            encoder,
            mlm_bias: g.param(self.mlm_bias.clone()),
            classifier: g.param(self.classifier.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            encoder: self.encoder.cast(),
            mlm_bias: self.mlm_bias.cast(),
            classifier: self.classifier.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// AdamW over one parameter group.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub group: ParamGroup,
    pub adamw: AdamWConfig,
    state: AdamWState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &mut Model<T>, group: ParamGroup, adamw: AdamWConfig) -> Self {
        let tensors = model.group_tensors_mut(group);
        let state = AdamWState::new(tensors.into_iter().map(|t| &*t));
        Self {
            group,
            adamw,
            state,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.step()
    }

    /// Builds a fresh graph, lets `forward` produce a scalar loss (and any
    /// side value), backpropagates, and applies one AdamW update at `lr`.
    pub fn step<X>(
        &mut self,
        model: &mut Model<T>,
        lr: f64,
        forward: impl FnOnce(&mut Graph<T>, &ModelVars) -> Result<(Var, X)>,
    ) -> Result<(f64, X)> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let (loss, extra) = forward(&mut g, &vars)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::invalid(format!("non-finite loss {loss_value}")));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor<T>> = vars
            .group(self.group)
            .into_iter()
            .map(|v| g.grad(v))
            .collect();
        let mut params = model.group_tensors_mut(self.group);
        adamw_step(&mut params, &grads, &mut self.state, lr, &self.adamw)?;
        Ok((loss_value, extra))
    }
}

/// Shuffled mini-batches of `0..n` for one epoch; the last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Optimizer steps for a stage: `epochs · ⌈n / batch⌉`, capped by `max_steps`.
pub fn total_steps(n: usize, batch: usize, epochs: usize, max_steps: Option<u64>) -> u64 {
    let per_epoch = n.div_ceil(batch.max(1)) as u64;
    let full = per_epoch * epochs as u64;
    max_steps.map_or(full, |m| m.min(full))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn named_and_mutable_orders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m: Model = Model::init(EncoderConfig::desk(300), &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = m
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut_shapes: Vec<Vec<usize>> =
            m.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let expected: Vec<Vec<usize>> = Model::<f32>::expected_shapes(&m.config)
            .unwrap()
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        assert_eq!(shapes, expected);
        let names: std::collections::BTreeSet<String> =
            m.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn zero_learning_rate_step_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m: Model = Model::init(EncoderConfig::desk(300), &mut rng).unwrap();
        let before = m.clone();
        let mut t = Trainer::new(&mut m, ParamGroup::Finetune, AdamWConfig::default());
        t.step(&mut m, 0.0, |g, v| {
            let s = g.sum(v.classifier);
            let s2 = g.mul(s, s)?;
            Ok((s2, ()))
        })
        .unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn only_the_selected_group_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m: Model = Model::init(EncoderConfig::desk(300), &mut rng).unwrap();
        let before = m.clone();
        let mut t = Trainer::new(&mut m, ParamGroup::Contrastive, AdamWConfig::default());
        t.step(&mut m, 1e-2, |g, v| {
            let e = g.sum(v.encoder.token_embedding);
            let c = g.sum(v.classifier);
            let total = g.add(e, c)?;
            Ok((total, ()))
        })
        .unwrap();
        assert_eq!(m.classifier, before.classifier);
        assert_eq!(m.mlm_bias, before.mlm_bias);
        assert_ne!(m.encoder.token_embedding, before.encoder.token_embedding);
    }

    #[test]
    fn step_counting() {
        assert_eq!(total_steps(50, 16, 3, None), 12);
        assert_eq!(total_steps(50, 16, 3, Some(5)), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
