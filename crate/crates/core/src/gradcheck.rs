//! Finite-difference verification of every analytic gradient.
//!
//! Each check compares the tape's gradient with central differences
//! (`h = 1e-5`) using [`relative_error`] with a `1e-2` floor, so the
//! `1e-4` threshold means `1e-4` relative or `1e-6` absolute. Gradients that
//! pass through a reversal layer are compared against `-lambda` times the
//! numerical derivative of the forward value.
//!
//! The Taylor test checks that
//! `R(a) = L_cls(theta - a g) - L_cls(theta) + a <grad L_cls, g>` shrinks
//! quadratically: `|R(a/2)| <= 0.6 |R(a)|` for `a = 1e-2 / 2^k`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::PairedBatch;
use crate::error::{Error, Result};
use crate::losses::{domain_cls_loss, entropy_weights, AlignmentVariant};
use crate::nn::{Activation, Bindings, ModelBundle, ModelSpec};
use crate::optim::{alignment_task, classification_task, meta_gradients, meta_objective, Role, TaskInfo};
use crate::tensor::{finite_diff_grad, relative_error, GradientMap, ParamId, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_THRESHOLD: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;
pub const TAYLOR_RATIO: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorRow {
    pub config: usize,
    pub alpha: f64,
    pub residual: f64,
    /// `|R(alpha / 2)| / |R(alpha)|`.
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub taylor: Vec<TaylorRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.taylor.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        out.extend(
            self.taylor
                .iter()
                .filter(|t| !t.passed)
                .map(|t| format!("taylor[{}] alpha={:e}", t.config, t.alpha)),
        );
        out
    }

    /// Fixed-width text table, one line per check and per Taylor step.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>12} {:>10}  result", "check", "max_rel_err", "threshold");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>12.3e} {:>10.0e}  {}",
                c.name,
                c.max_rel_err,
                c.threshold,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "\n{:<6} {:>10} {:>12} {:>8}  result", "config", "alpha", "|R(alpha)|", "ratio");
        for t in &self.taylor {
            let _ = writeln!(
                s,
                "{:<6} {:>10.3e} {:>12.3e} {:>8.4}  {}",
                t.config,
                t.alpha,
                t.residual,
                t.ratio,
                if t.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// Names accepted by [`GradcheckOptions::corrupt`].
pub const CHECK_NAMES: &[&str] = &[
    "op:matmul",
    "op:add_bias",
    "op:add_sub",
    "op:mul",
    "op:scale_by",
    "op:relu",
    "op:tanh",
    "op:sigmoid",
    "op:exp_log",
    "op:abs",
    "op:clamp",
    "op:log_softmax",
    "op:softmax",
    "op:mean",
    "op:pick_per_row",
    "op:grl",
    "op:pairwise_sq_dist",
    "op:concat_slice",
    "op:stack",
    "op:virtual_step",
    "loss:cross_entropy",
    "loss:cross_entropy_relu",
    "loss:dann",
    "loss:dannpe",
    "loss:mmd",
    "meta:alignment_role",
    "meta:classification_role",
    "meta:beta_at_budget",
];

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Perturbs the analytic gradient of the named check by 1% before
    /// comparison; the check must then fail.
    pub corrupt: Option<String>,
    /// Number of random smooth configurations in the Taylor test.
    pub taylor_configs: usize,
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: Option<String>,
    checks: Vec<CheckResult>,
}

fn upstream_weight(i: usize) -> f64 {
    (1.7 * i as f64 + 0.3).cos()
}

/// `sum(out * w)` with fixed, non-uniform weights.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out)?.shape().to_vec();
    let n: usize = shape.iter().product::<usize>().max(1);
    let w = tape.constant(Tensor::new(shape, (0..n).map(upstream_weight).collect())?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product::<usize>().max(1);
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.random_range(lo..hi)).collect()).expect("shape")
    }

    /// Uniform in `[lo, hi]` with random sign: magnitudes stay away from 0.
    fn signed(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = self.uniform(shape, lo, hi);
        for v in t.data_mut() {
            if self.rng.random_bool(0.5) {
                *v = -*v;
            }
        }
        t
    }

    fn record(&mut self, name: &str, analytic: &GradientMap, numeric: &GradientMap, reversed: &[(ParamId, f64)]) {
        let corrupt = self.corrupt.as_deref() == Some(name);
        let mut worst = 0.0_f64;
        for (id, fd) in numeric.iter() {
            let scale = reversed.iter().find(|(r, _)| *r == id).map_or(1.0, |(_, s)| *s);
            let a = analytic.get(id).map(Tensor::data).unwrap_or(&[]);
            if a.len() != fd.len() {
                worst = f64::INFINITY;
                continue;
            }
            for (k, (x, y)) in a.iter().zip(fd.data()).enumerate() {
                let x = if corrupt && k == 0 { x * 1.01 + 1e-3 } else { *x };
                let err = relative_error(x, scale * y, FD_FLOOR);
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
        }
        self.checks.push(CheckResult {
            name: name.to_string(),
            max_rel_err: worst,
            threshold: FD_THRESHOLD,
            passed: worst <= FD_THRESHOLD,
        });
    }

    /// Checks `build` applied to parameter inputs, reduced by
    /// [`weighted_sum`].
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, build: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        self.op_reversed(name, inputs, 1.0, build)
    }

    fn op_reversed<F>(&mut self, name: &str, inputs: Vec<Tensor>, scale: f64, build: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.register(format!("x{i}"), t))
            .collect();
        let eval = |s: &ParamStore| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let vars = tape.bind_all(s);
            let out = build(&mut tape, &vars)?;
            let loss = weighted_sum(&mut tape, out)?;
            Ok((tape, loss))
        };
        let (tape, loss) = eval(&store)?;
        let analytic = tape.backward(loss, &ids)?;
        let numeric = finite_diff_grad(
            |s| {
                let (tape, loss) = eval(s)?;
                tape.value(loss)?.item()
            },
            &mut store,
            &ids,
            FD_STEP,
        )?;
        let reversed: Vec<(ParamId, f64)> = ids.iter().map(|&id| (id, scale)).collect();
        self.record(name, &analytic, &numeric, &reversed);
        Ok(())
    }

    fn ops(&mut self) -> Result<()> {
        let (n, k, m) = (self.rng.random_range(2..=6), self.rng.random_range(2..=8), self.rng.random_range(2..=5));
        let a = self.uniform(&[n, k], -2.0, 2.0);
        let b = self.uniform(&[k, m], -2.0, 2.0);
        self.op("op:matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]))?;
        let bias = self.uniform(&[k], -1.0, 1.0);
        self.op("op:add_bias", vec![a.clone(), bias], |t, v| t.add_bias(v[0], v[1]))?;
        let a2 = self.uniform(&[n, k], -2.0, 2.0);
        self.op("op:add_sub", vec![a.clone(), a2.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let d = t.sub(d, v[1])?;
            let d = t.scale(d, 1.5)?;
            let d = t.add_scalar(d, 0.25)?;
            t.neg(d)
        })?;
        self.op("op:mul", vec![a.clone(), a2.clone()], |t, v| t.mul(v[0], v[1]))?;
        let s = Tensor::scalar(self.rng.random_range(-2.0..2.0));
        self.op("op:scale_by", vec![a.clone(), s], |t, v| t.scale_by(v[0], v[1]))?;
        let away = self.signed(&[n, k], 0.1, 2.0);
        self.op("op:relu", vec![away.clone()], |t, v| t.relu(v[0]))?;
        self.op("op:tanh", vec![a.clone()], |t, v| t.tanh(v[0]))?;
        let wide = self.uniform(&[n, k], -6.0, 6.0);
        self.op("op:sigmoid", vec![wide], |t, v| t.sigmoid(v[0]))?;
        let positive = self.uniform(&[n, k], 0.2, 3.0);
        self.op("op:exp_log", vec![positive], |t, v| {
            let l = t.log(v[0])?;
            let e = t.exp(v[0])?;
            t.add(l, e)
        })?;
        self.op("op:abs", vec![away], |t, v| t.abs(v[0]))?;
        // entries at least 0.05 away from the clamp bounds on either side
        let mut c = self.uniform(&[n, k], 0.05, 0.45);
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            *v = match i % 3 {
                0 => -*v - 0.5,
                1 => *v,
                _ => *v + 0.5 + 0.05,
            };
        }
        self.op("op:clamp", vec![c], |t, v| t.clamp(v[0], -0.5, 0.5))?;
        self.op("op:log_softmax", vec![a.clone()], |t, v| t.log_softmax(v[0]))?;
        self.op("op:softmax", vec![a.clone()], |t, v| t.softmax(v[0]))?;
        self.op("op:mean", vec![a.clone()], |t, v| {
            let r = t.mean(v[0], Some(0))?;
            let c = t.mean(v[0], Some(1))?;
            let all = t.mean(v[0], None)?;
            let rs = t.sum(r)?;
            let cs = weighted_sum(t, c)?;
            let x = t.add(rs, cs)?;
            t.add(x, all)
        })?;
        let labels: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..k)).collect();
        self.op("op:pick_per_row", vec![a.clone()], move |t, v| t.pick_per_row(v[0], &labels))?;
        let lambda = self.rng.random_range(0.1..2.0);
        self.op_reversed("op:grl", vec![a.clone()], -lambda, move |t, v| t.grl(v[0], lambda))?;
        let n2 = self.rng.random_range(2..=6);
        let other = self.uniform(&[n2, k], -2.0, 2.0);
        self.op(
            "op:pairwise_sq_dist",
            vec![a.clone(), other],
            |t, v| t.pairwise_sq_dist(v[0], v[1]),
        )?;
        let shapes = [a.shape().to_vec(), vec![m]];
        let tail = self.uniform(&[m], -1.0, 1.0);
        self.op("op:concat_slice", vec![a.clone(), tail], move |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let head = t.slice(c, 1, &[shapes[0].iter().product::<usize>()])?;
            let tail = t.slice(c, 0, &shapes[1])?;
            let h = weighted_sum(t, head)?;
            let tl = t.tanh(tail)?;
            let tl = t.sum(tl)?;
            t.add(h, tl)
        })?;
        self.op(
            "op:stack",
            vec![Tensor::scalar(0.3), Tensor::scalar(-1.2), Tensor::scalar(2.0)],
            |t, v| t.stack(v),
        )?;
        let dir: Vec<f64> = (0..n * k).map(|i| upstream_weight(i + 7)).collect();
        let alpha = self.rng.random_range(0.05..1.0);
        let flat = Tensor::vector(a.data().to_vec());
        let weight = Tensor::scalar(self.rng.random_range(0.2..2.0));
        self.op(
            "op:virtual_step",
            vec![flat, weight],
            move |t, v| {
                let s = t.virtual_step(v[0], v[1], &dir, alpha)?;
                t.tanh(s)
            },
        )?;
        Ok(())
    }

    fn random_model(&mut self, variant: &AlignmentVariant, activation: Activation, groups: usize) -> Result<ModelBundle> {
        let d = self.rng.random_range(2..=8);
        let layers = groups.max(self.rng.random_range(1..=3));
        let hidden: Vec<usize> = (0..layers).map(|_| self.rng.random_range(3..=32)).collect();
        let classes = self.rng.random_range(2..=5);
        let spec = ModelSpec {
            input_dim: d,
            hidden: hidden.clone(),
            groups,
            classes,
            classifier_hidden: if self.rng.random_bool(0.5) {
                vec![self.rng.random_range(3..=16)]
            } else {
                Vec::new()
            },
            discriminator_hidden: self.rng.random_range(3..=16),
            activation,
            dropout: 0.0,
            budget: None,
        };
        let mut model = ModelBundle::new(&spec, variant.discriminator_input(*hidden.last().unwrap(), classes))?;
        model.init_params(self.rng.random());
        // nonzero biases so every parameter's gradient is exercised
        for id in model.network_ids() {
            if model.store.name(id).ends_with(".bias") {
                let n = model.store.get(id).len();
                let b = self.uniform(&[n], -0.3, 0.3);
                model.store.set(id, b)?;
            }
        }
        Ok(model)
    }

    fn random_batch(&mut self, model: &ModelBundle) -> Result<PairedBatch> {
        let (n, d, k) = (6, model.spec.input_dim, model.spec.classes);
        let normal = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> {
            (0..n * d).map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
        };
        let src = normal(&mut self.rng, 0.0);
        let tgt = normal(&mut self.rng, 0.7);
        let labels = (0..n).map(|_| self.rng.random_range(0..k)).collect();
        PairedBatch::new(Tensor::matrix(n, d, src)?, labels, Tensor::matrix(n, d, tgt)?)
    }

    fn task_check<F>(&mut self, name: &str, model: &ModelBundle, mut task: F, reversed: &[(ParamId, f64)]) -> Result<()>
    where
        F: FnMut(&mut Tape, &Bindings) -> Result<(Var, TaskInfo)>,
    {
        let ids = model.network_ids();
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &model.store);
        let (loss, _) = task(&mut tape, &bound)?;
        let analytic = tape.backward(loss, &ids)?;
        let mut store = model.store.clone();
        let numeric = finite_diff_grad(
            |s| {
                let mut tape = Tape::new();
                let bound = Bindings::bind_all(&mut tape, s);
                let (loss, _) = task(&mut tape, &bound)?;
                tape.value(loss)?.item()
            },
            &mut store,
            &ids,
            FD_STEP,
        )?;
        self.record(name, &analytic, &numeric, reversed);
        Ok(())
    }

    fn losses(&mut self) -> Result<()> {
        let plain = AlignmentVariant::Mmd {
            lambda: 1.0,
            sigma: Some(1.0),
        };
        let model = self.random_model(&plain, Activation::Tanh, 1)?;
        let batch = self.random_batch(&model)?;
        self.task_check("loss:cross_entropy", &model, classification_task(&model, &batch), &[])?;
        let model = self.random_model(&plain, Activation::Relu, 1)?;
        let batch = self.random_batch(&model)?;
        self.task_check("loss:cross_entropy_relu", &model, classification_task(&model, &batch), &[])?;

        let lambda = self.rng.random_range(0.2..1.5);
        let dann = AlignmentVariant::Dann { lambda };
        let model = self.random_model(&dann, Activation::Tanh, 1)?;
        let batch = self.random_batch(&model)?;
        let rev: Vec<(ParamId, f64)> = model.theta_ids().into_iter().map(|id| (id, -lambda)).collect();
        self.task_check("loss:dann", &model, alignment_task(&model, &dann, &batch, None), &rev)?;

        let dannpe = AlignmentVariant::Dannpe { lambda };
        let model = self.random_model(&dannpe, Activation::Tanh, 1)?;
        let batch = self.random_batch(&model)?;
        self.dannpe_check(&model, &batch, lambda)?;

        let sigma = self.rng.random_range(0.5..4.0);
        let mmd = AlignmentVariant::Mmd {
            lambda,
            sigma: Some(sigma),
        };
        let model = self.random_model(&mmd, Activation::Tanh, 1)?;
        let batch = self.random_batch(&model)?;
        self.task_check("loss:mmd", &model, alignment_task(&model, &mmd, &batch, None), &[])
    }

    /// The entropy weights are constants of the backward pass, so the
    /// numerical side holds them at their value at the base point.
    fn dannpe_check(&mut self, model: &ModelBundle, batch: &PairedBatch, lambda: f64) -> Result<()> {
        let variant = AlignmentVariant::Dannpe { lambda };
        let disc = model.discriminator.as_ref().expect("discriminator");
        let probs = |tape: &mut Tape, bound: &Bindings, x: &Tensor| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let f = model.extractor.forward(tape, bound, xv)?;
            let l = model.classifier.forward(tape, bound, f)?;
            tape.softmax(l)
        };
        let (ws, wt) = {
            let mut tape = Tape::new();
            let bound = Bindings::bind_all(&mut tape, &model.store);
            let ps = probs(&mut tape, &bound, &batch.src_x)?;
            let pt = probs(&mut tape, &bound, &batch.tgt_x)?;
            (entropy_weights(tape.value(ps)?)?, entropy_weights(tape.value(pt)?)?)
        };
        let frozen = |tape: &mut Tape, bound: &Bindings| -> Result<(Var, TaskInfo)> {
            let ps = probs(tape, bound, &batch.src_x)?;
            let pt = probs(tape, bound, &batch.tgt_x)?;
            let ds = disc.forward(tape, bound, ps, None)?;
            let dt = disc.forward(tape, bound, pt, None)?;
            let dl = domain_cls_loss(tape, ds, dt, Some(&ws), Some(&wt))?;
            Ok((dl.loss, TaskInfo::default()))
        };
        let ids = model.network_ids();
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &model.store);
        let (loss, _) = alignment_task(model, &variant, batch, None)(&mut tape, &bound)?;
        let value = tape.value(loss)?.item()?;
        let analytic = tape.backward(loss, &ids)?;
        let mut store = model.store.clone();
        let frozen_task = frozen;
        let numeric = finite_diff_grad(
            |s| {
                let mut tape = Tape::new();
                let bound = Bindings::bind_all(&mut tape, s);
                let (loss, _) = frozen_task(&mut tape, &bound)?;
                tape.value(loss)?.item()
            },
            &mut store,
            &ids,
            FD_STEP,
        )?;
        {
            let mut tape = Tape::new();
            let bound = Bindings::bind_all(&mut tape, &model.store);
            let (l, _) = frozen_task(&mut tape, &bound)?;
            if (tape.value(l)?.item()? - value).abs() > 1e-12 * value.abs().max(1.0) {
                return Err(Error::Contract("frozen-weight reference disagrees with the domain loss".into()));
            }
        }
        let rev: Vec<(ParamId, f64)> = model
            .theta_ids()
            .into_iter()
            .chain(model.classifier_ids())
            .map(|id| (id, -lambda))
            .collect();
        self.record("loss:dannpe", &analytic, &numeric, &rev);
        Ok(())
    }

    fn meta_check(&mut self, name: &str, role: Role, at_budget: bool) -> Result<()> {
        let variant = AlignmentVariant::Mmd {
            lambda: self.rng.random_range(0.5..2.0),
            sigma: Some(self.rng.random_range(0.5..4.0)),
        };
        let groups = self.rng.random_range(1..=3);
        let mut model = self.random_model(&variant, Activation::Tanh, groups)?;
        if !at_budget {
            for id in model.beta.ids.clone() {
                let b = self.rng.random_range(0.2..2.0);
                model.store.set(id, Tensor::scalar(b))?;
            }
        }
        let batch = self.random_batch(&model)?;
        let alpha = self.rng.random_range(0.05..0.5);
        let (mg, _) = meta_gradients(&model, &batch, &variant, alpha, role, None)?;
        let group_ids = model.extractor.group_params();
        let dirs: Vec<Vec<f64>> = group_ids.iter().map(|g| mg.train_grads.flatten(g, &model.store)).collect();
        let mut ids = model.network_ids();
        ids.extend(&model.beta.ids);
        let mut store = model.store.clone();
        let numeric = finite_diff_grad(
            |s| {
                let align = alignment_task(&model, &variant, &batch, None);
                let cls = classification_task(&model, &batch);
                match role {
                    Role::Alignment => meta_objective(s, &group_ids, &model.beta, alpha, &dirs, align, cls),
                    Role::Classification => meta_objective(s, &group_ids, &model.beta, alpha, &dirs, cls, align),
                }
            },
            &mut store,
            &ids,
            FD_STEP,
        )?;
        self.record(name, &mg.grads, &numeric, &[]);
        Ok(())
    }
}

/// One smooth configuration of the Taylor test: returns `|R(alpha)|` for
/// each `alpha`.
pub fn taylor_residuals(seed: u64, alphas: &[f64]) -> Result<Vec<f64>> {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        corrupt: None,
        checks: Vec::new(),
    };
    let lambda = 1.0;
    let variant = AlignmentVariant::Dann { lambda };
    let model = suite.random_model(&variant, Activation::Tanh, 1)?;
    let batch = suite.random_batch(&model)?;
    let theta = model.theta_ids();

    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, &model.store);
    let (align, _) = alignment_task(&model, &variant, &batch, None)(&mut tape, &bound)?;
    let g_dom = tape.backward(align, &theta)?;

    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, &model.store);
    let (cls, _) = classification_task(&model, &batch)(&mut tape, &bound)?;
    let base = tape.value(cls)?.item()?;
    let g_cls = tape.backward(cls, &theta)?;
    let slope = crate::tensor::dot(&g_cls.flatten(&theta, &model.store), &g_dom.flatten(&theta, &model.store));

    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut store = model.store.clone();
        for &id in &theta {
            let g = g_dom.get(id).expect("extractor gradient");
            for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= alpha * d;
            }
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &store);
        let (cls, _) = classification_task(&model, &batch)(&mut tape, &bound)?;
        let moved = tape.value(cls)?.item()?;
        out.push((moved - base + alpha * slope).abs());
    }
    Ok(out)
}

/// Runs every finite-difference check and the Taylor test.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(name) = &options.corrupt {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::invalid("corrupt", format!("unknown check `{name}`")));
        }
    }
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(options.seed),
        corrupt: options.corrupt.clone(),
        checks: Vec::new(),
    };
    suite.ops()?;
    suite.losses()?;
    suite.meta_check("meta:alignment_role", Role::Alignment, false)?;
    suite.meta_check("meta:classification_role", Role::Classification, false)?;
    suite.meta_check("meta:beta_at_budget", Role::Alignment, true)?;

    let alphas: Vec<f64> = (0..=10).map(|k| 1e-2 / f64::powi(2.0, k)).collect();
    let mut taylor = Vec::new();
    for config in 0..options.taylor_configs.max(1) {
        let r = taylor_residuals(options.seed.wrapping_add(1000 + config as u64), &alphas)?;
        for k in 0..alphas.len() - 1 {
            let ratio = r[k + 1] / r[k];
            taylor.push(TaylorRow {
                config,
                alpha: alphas[k],
                residual: r[k],
                ratio,
                passed: ratio <= TAYLOR_RATIO,
            });
        }
    }
    Ok(GradcheckReport {
        checks: suite.checks,
        taylor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_named_check() {
        let report = run_gradcheck(&GradcheckOptions {
            seed: 1,
            corrupt: None,
            taylor_configs: 1,
        })
        .unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, CHECK_NAMES);
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn corruption_is_detected() {
        let report = run_gradcheck(&GradcheckOptions {
            seed: 1,
            corrupt: Some("loss:dann".into()),
            taylor_configs: 1,
        })
        .unwrap();
        assert_eq!(report.failures(), vec!["loss:dann".to_string()]);
        assert!(run_gradcheck(&GradcheckOptions {
            corrupt: Some("nope".into()),
            ..GradcheckOptions::default()
        })
        .is_err());
    }

    #[test]
    fn residual_of_a_quadratic_is_exactly_quadratic() {
        let r = taylor_residuals(3, &[1e-2, 5e-3]).unwrap();
        assert!(r[1] / r[0] < 0.3, "{r:?}");
    }
}
