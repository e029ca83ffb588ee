//! Feature extractor, classifier head and domain discriminator.
//!
//! All parameters of a model live in one [`ParamStore`]. A forward pass reads
//! them through a [`Bindings`] table mapping each [`ParamId`] to a variable on
//! the current tape, so the meta step can swap the extractor's parameters for
//! their virtually updated counterparts without touching the layers.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Parameter id → tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    /// Binds every parameter of `store` as a leaf on `tape`.
    pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> Self {
        Bindings {
            vars: tape.bind_all(store).into_iter().map(Some).collect(),
        }
    }

    /// Binds only `ids`; the rest stay unbound.
    pub fn bind_some(tape: &mut Tape, store: &ParamStore, ids: &[ParamId]) -> Self {
        let mut vars = vec![None; store.len()];
        for &id in ids {
            vars[id.0] = Some(tape.param(id, store.get(id)));
        }
        Bindings { vars }
    }

    pub fn get(&self, id: ParamId) -> Result<Var> {
        self.vars
            .get(id.0)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("parameter {} is not bound", id.0)))
    }

    pub fn set(&mut self, id: ParamId, var: Var) {
        if id.0 >= self.vars.len() {
            self.vars.resize(id.0 + 1, None);
        }
        self.vars[id.0] = Some(var);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    fn register(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` for an `n x in_dim` input.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.get(self.weight)?)?;
        tape.add_bias(y, bound.get(self.bias)?)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

fn check_width(op: &'static str, tape: &Tape, x: Var, expected: usize) -> Result<()> {
    let shape = tape.value(x)?.shape();
    match shape {
        [_, w] if *w == expected => Ok(()),
        s => Err(Error::shape(op, format!("expected n x {expected} input, got {s:?}"))),
    }
}

/// Splits `layers` into `groups` contiguous, balanced runs; earlier groups
/// take the remainder.
pub fn group_ranges(layers: usize, groups: usize) -> Result<Vec<Range<usize>>> {
    if groups == 0 || groups > layers {
        return Err(Error::invalid(
            "groups",
            format!("{groups} groups for {layers} layers; need 1 <= M <= layers"),
        ));
    }
    let base = layers / groups;
    let extra = layers % groups;
    let mut start = 0;
    Ok((0..groups)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// The shared extractor `G`: linear layers, each followed by the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub in_dim: usize,
    groups: Vec<Range<usize>>,
}

impl FeatureExtractor {
    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, |l| l.out_dim)
    }

    /// Forward pass; with no layers the input is returned unchanged.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, x: Var) -> Result<Var> {
        check_width("extract_features", tape, x, self.in_dim)?;
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(tape, bound, h)?;
            h = self.activation.apply(tape, z)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LinearLayer::param_ids).collect()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn layer_groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Repartitions the layers into `m` groups.
    pub fn regroup(&mut self, m: usize) -> Result<()> {
        self.groups = group_ranges(self.layers.len(), m)?;
        Ok(())
    }

    /// Parameter ids of each group, in layer order (weight before bias).
    pub fn group_params(&self) -> Vec<Vec<ParamId>> {
        self.groups
            .iter()
            .map(|r| self.layers[r.clone()].iter().flat_map(LinearLayer::param_ids).collect())
            .collect()
    }
}

/// Classifier `C`: optional hidden layers, then a linear map to `K` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, f: Var) -> Result<Var> {
        check_width("classify", tape, f, self.layers[0].in_dim)?;
        let mut h = f;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < last {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LinearLayer::param_ids).collect()
    }
}

/// Discriminator `D`: three linear layers with ReLU between, sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDiscriminator {
    pub layers: [LinearLayer; 3],
    /// Drop probability after each hidden ReLU; 0 disables dropout.
    pub dropout: f64,
}

impl DomainDiscriminator {
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Returns `n x 1` probabilities of the source domain. When `dropout > 0`
    /// and `rng` is given, hidden units are dropped with seeded masks.
    pub fn forward(&self, tape: &mut Tape, bound: &Bindings, z: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        check_width("discriminate", tape, z, self.in_dim())?;
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i < 2 {
                h = tape.relu(h)?;
                if self.dropout > 0.0 {
                    if let Some(rng) = rng.as_deref_mut() {
                        let keep = 1.0 - self.dropout;
                        let shape = tape.value(h)?.shape().to_vec();
                        let n: usize = shape.iter().product();
                        let mask = (0..n)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let m = tape.constant(Tensor::new(shape, mask)?);
                        h = tape.mul(h, m)?;
                    }
                }
            }
        }
        tape.sigmoid(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LinearLayer::param_ids).collect()
    }
}

/// Learnable per-group scales of the virtual update, with their budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub ids: Vec<ParamId>,
    pub budget: f64,
}

impl GroupWeights {
    pub fn values(&self, store: &ParamStore) -> Vec<f64> {
        self.ids.iter().map(|&id| store.get(id).data()[0]).collect()
    }
}

/// Architecture of a model bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the extractor's layers; empty means the identity extractor.
    pub hidden: Vec<usize>,
    /// Number of layer groups `M`.
    pub groups: usize,
    pub classes: usize,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// Budget `B` of the group weights; defaults to `M`.
    pub budget: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 2,
            hidden: vec![64, 64],
            groups: 2,
            classes: 2,
            classifier_hidden: Vec::new(),
            discriminator_hidden: 64,
            activation: Activation::Relu,
            dropout: 0.0,
            budget: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        if self.hidden.contains(&0) || self.classifier_hidden.contains(&0) || self.discriminator_hidden == 0 {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        if !self.hidden.is_empty() && (self.groups == 0 || self.groups > self.hidden.len()) {
            return Err(Error::config(
                "model.groups",
                format!("{} groups for {} extractor layers", self.groups, self.hidden.len()),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if let Some(b) = self.budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config("model.budget", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> f64 {
        self.budget.unwrap_or(self.groups.max(1) as f64)
    }
}

/// Extractor, classifier, optional discriminator and group weights, with
/// every parameter in one store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub extractor: FeatureExtractor,
    pub classifier: ClassifierHead,
    pub discriminator: Option<DomainDiscriminator>,
    pub beta: GroupWeights,
}

impl ModelBundle {
    /// Registers all parameters and initializes them with seed 0; reseed with
    /// [`ModelBundle::init_params`]. `discriminator_input` is the discriminator's input width, or `None`
    /// for alignment objectives without a discriminator.
    pub fn new(spec: &ModelSpec, discriminator_input: Option<usize>) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut width = spec.input_dim;
        let mut layers = Vec::new();
        for (i, &w) in spec.hidden.iter().enumerate() {
            layers.push(LinearLayer::register(&mut store, &format!("extractor.{i}"), width, w));
            width = w;
        }
        let groups = if layers.is_empty() {
            Vec::new()
        } else {
            group_ranges(layers.len(), spec.groups)?
        };
        let extractor = FeatureExtractor {
            layers,
            activation: spec.activation,
            in_dim: spec.input_dim,
            groups,
        };

        let mut cls_layers = Vec::new();
        let mut w_in = extractor.out_dim();
        for (i, &w) in spec.classifier_hidden.iter().chain(std::iter::once(&spec.classes)).enumerate() {
            cls_layers.push(LinearLayer::register(&mut store, &format!("classifier.{i}"), w_in, w));
            w_in = w;
        }
        let classifier = ClassifierHead {
            layers: cls_layers,
            activation: spec.activation,
        };

        let discriminator = discriminator_input.map(|input| {
            let h = spec.discriminator_hidden;
            DomainDiscriminator {
                layers: [
                    LinearLayer::register(&mut store, "discriminator.0", input, h),
                    LinearLayer::register(&mut store, "discriminator.1", h, h),
                    LinearLayer::register(&mut store, "discriminator.2", h, 1),
                ],
                dropout: spec.dropout,
            }
        });

        let m = extractor.num_groups();
        let budget = spec.budget();
        let ids = (0..m)
            .map(|g| store.register(format!("beta.{g}"), Tensor::scalar(0.0)))
            .collect();
        let mut bundle = ModelBundle {
            spec: spec.clone(),
            store,
            extractor,
            classifier,
            discriminator,
            beta: GroupWeights { ids, budget },
        };
        bundle.init_params(0);
        Ok(bundle)
    }

    /// Glorot-uniform weights, zero biases, `beta_m = B / M`; a pure function
    /// of `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear: Vec<LinearLayer> = self
            .extractor
            .layers
            .iter()
            .chain(&self.classifier.layers)
            .chain(self.discriminator.iter().flat_map(|d| d.layers.iter()))
            .cloned()
            .collect();
        for layer in linear {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for v in self.store.get_mut(layer.weight).data_mut() {
                *v = rng.random_range(-limit..limit);
            }
            self.store.get_mut(layer.bias).data_mut().fill(0.0);
        }
        let m = self.beta.ids.len();
        for &id in &self.beta.ids {
            self.store.get_mut(id).data_mut()[0] = self.beta.budget / m as f64;
        }
    }

    /// Shared extractor parameters `theta`.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.extractor.param_ids()
    }

    pub fn classifier_ids(&self) -> Vec<ParamId> {
        self.classifier.param_ids()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.discriminator.as_ref().map(DomainDiscriminator::param_ids).unwrap_or_default()
    }

    /// Every parameter except the group weights.
    pub fn network_ids(&self) -> Vec<ParamId> {
        let mut ids = self.theta_ids();
        ids.extend(self.classifier_ids());
        ids.extend(self.discriminator_ids());
        ids
    }

    pub fn beta_values(&self) -> Vec<f64> {
        self.beta.values(&self.store)
    }

    /// `C(G(x))` on a fresh tape, as plain logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids: Vec<ParamId> = self.theta_ids().into_iter().chain(self.classifier_ids()).collect();
        let bound = Bindings::bind_some(&mut tape, &self.store, &ids);
        let xv = tape.constant(x.clone());
        let f = self.extractor.forward(&mut tape, &bound, xv)?;
        let out = self.classifier.forward(&mut tape, &bound, f)?;
        Ok(tape.value(out)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn spec(hidden: Vec<usize>, groups: usize) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden,
            groups,
            classes: 4,
            discriminator_hidden: 5,
            ..ModelSpec::default()
        }
    }

    fn input(n: usize, d: usize) -> Tensor {
        let data = (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let mut a = ModelBundle::new(&spec(vec![6, 5], 2), Some(5)).unwrap();
        let mut b = a.clone();
        a.init_params(11);
        b.init_params(11);
        assert_eq!(a.store, b.store);
        for layer in a.extractor.layers.iter().chain(&a.classifier.layers) {
            assert!(a.store.get(layer.bias).data().iter().all(|&v| v == 0.0));
        }
        b.init_params(12);
        assert_ne!(a.store, b.store);
    }

    #[test]
    fn beta_starts_at_budget_over_groups() {
        let mut s = spec(vec![4, 4, 4, 4], 4);
        s.budget = Some(4.0);
        let m = ModelBundle::new(&s, None).unwrap();
        assert_eq!(m.beta_values(), vec![1.0; 4]);
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let m = ModelBundle::new(&spec(vec![], 1), None).unwrap();
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &m.store);
        let x = input(4, 3);
        let xv = tape.constant(x.clone());
        let f = m.extractor.forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(f).unwrap(), &x);
    }

    #[test]
    fn shapes_of_forward_passes() {
        let mut m = ModelBundle::new(&spec(vec![6, 5], 2), Some(5)).unwrap();
        m.init_params(3);
        for n in [1, 7] {
            let mut tape = Tape::new();
            let bound = Bindings::bind_all(&mut tape, &m.store);
            let xv = tape.constant(input(n, 3));
            let f = m.extractor.forward(&mut tape, &bound, xv).unwrap();
            assert_eq!(tape.value(f).unwrap().shape(), &[n, 5]);
            let logits = m.classifier.forward(&mut tape, &bound, f).unwrap();
            assert_eq!(tape.value(logits).unwrap().shape(), &[n, 4]);
            let p = tape.softmax(logits).unwrap();
            for row in tape.value(p).unwrap().data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let d = m.discriminator.as_ref().unwrap().forward(&mut tape, &bound, f, None).unwrap();
            assert_eq!(tape.value(d).unwrap().shape(), &[n, 1]);
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &m.store);
        let bad = tape.constant(input(2, 4));
        assert!(matches!(m.extractor.forward(&mut tape, &bound, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_discriminator_outputs_one_half() {
        let m = ModelBundle::new(&spec(vec![6], 1), Some(6)).unwrap();
        let mut zeroed = m.clone();
        for id in zeroed.discriminator_ids() {
            zeroed.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &zeroed.store);
        let z = tape.constant(input(3, 6));
        let d = zeroed.discriminator.as_ref().unwrap().forward(&mut tape, &bound, z, None).unwrap();
        assert!(tape.value(d).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn grl_forward_identity_and_scaled_flip() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let pv = tape.param(p, store.get(p));
        let r = tape.grl(pv, 1.0).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[1.0, 2.0]);
        let up = tape.constant(Tensor::vector(vec![3.0, -4.0]));
        let prod = tape.mul(r, up).unwrap();
        let s = tape.sum(prod).unwrap();
        assert_eq!(tape.backward(s, &[p]).unwrap().get(p).unwrap().data(), &[-3.0, 4.0]);

        let mut tape = Tape::new();
        let pv = tape.param(p, store.get(p));
        let r = tape.grl(pv, 0.0).unwrap();
        let s = tape.sum(r).unwrap();
        assert!(tape.backward(s, &[p]).unwrap().get(p).unwrap().data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let pv = tape.param(p, store.get(p));
        assert!(tape.grl(pv, -1.0).is_err());
    }

    #[test]
    fn group_ranges_balanced_with_leading_remainder() {
        let sizes = |l, m| -> Vec<usize> { group_ranges(l, m).unwrap().iter().map(|r| r.len()).collect() };
        assert_eq!(sizes(4, 4), vec![1, 1, 1, 1]);
        assert_eq!(sizes(4, 1), vec![4]);
        assert_eq!(sizes(5, 4), vec![2, 1, 1, 1]);
        assert!(group_ranges(3, 4).is_err());
        assert!(group_ranges(3, 0).is_err());
    }

    #[test]
    fn group_params_partition_theta() {
        let m = ModelBundle::new(&spec(vec![4, 4, 4, 4, 4], 4), None).unwrap();
        let groups = m.extractor.group_params();
        let flat: Vec<ParamId> = groups.concat();
        assert_eq!(flat, m.theta_ids());
        assert_eq!(groups[0].len(), 4);
        assert_eq!(m.extractor.group_params(), groups);
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        let mut m = ModelBundle::new(&spec(vec![6, 5], 2), Some(5)).unwrap();
        m.init_params(5);
        let x = input(4, 3);
        let target = m.extractor.layers[0].weight;
        let loss = |store: &ParamStore, tape: &mut Tape| -> Result<(Var, Bindings)> {
            let bound = Bindings::bind_all(tape, store);
            let xv = tape.constant(x.clone());
            let f = m.extractor.forward(tape, &bound, xv)?;
            let logits = m.classifier.forward(tape, &bound, f)?;
            let d = m.discriminator.as_ref().unwrap().forward(tape, &bound, f, None)?;
            let a = tape.sum(logits)?;
            let b = tape.sum(d)?;
            Ok((tape.add(a, b)?, bound))
        };
        let mut tape = Tape::new();
        let (l, _) = loss(&m.store, &mut tape).unwrap();
        let analytic = tape.backward(l, &[target]).unwrap();
        let mut store = m.store.clone();
        let numeric = finite_diff_grad(
            |s| {
                let mut tape = Tape::new();
                let (l, _) = loss(s, &mut tape)?;
                tape.value(l)?.item()
            },
            &mut store,
            &[target],
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.get(target).unwrap().data().iter().zip(numeric.get(target).unwrap().data()) {
            assert!(relative_error(*a, *n, 1e-2) < 1e-4, "{a} vs {n}");
        }
    }
}
