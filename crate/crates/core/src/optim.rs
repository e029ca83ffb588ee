//! SGD with momentum, the joint baseline step and the first-order meta step.
//!
//! Both steps build every gradient from two backward passes, one per task,
//! and add them with the alignment-side map as the left operand. With a zero
//! virtual step size the meta step therefore reproduces the joint step
//! bitwise.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{grad_dot, GradDot};
use crate::data::PairedBatch;
use crate::error::{Error, Result};
use crate::losses::{alignment_loss, beta_penalty, cross_entropy, AlignmentInputs, AlignmentVariant};
use crate::nn::{Bindings, GroupWeights, ModelBundle};
use crate::tensor::{GradientMap, ParamId, ParamStore, Tape, Var};

/// Optimizer hyperparameters plus momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Outer learning rate `eta`.
    pub lr: f64,
    /// Virtual step size `alpha`.
    pub meta_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
    no_decay: BTreeSet<ParamId>,
}

impl OptimState {
    pub fn new(lr: f64, meta_lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{lr} must be positive")));
        }
        if !(meta_lr >= 0.0 && meta_lr.is_finite()) {
            return Err(Error::invalid("meta_lr", format!("{meta_lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} must lie in [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", format!("{weight_decay} must be >= 0")));
        }
        Ok(OptimState {
            lr,
            meta_lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            no_decay: BTreeSet::new(),
        })
    }

    /// Excludes `ids` from weight decay.
    pub fn exempt_from_decay(&mut self, ids: &[ParamId]) {
        self.no_decay.extend(ids.iter().copied());
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v` for every parameter in
/// `grads`. Parameters without a gradient are left alone.
pub fn sgd_update(store: &mut ParamStore, grads: &GradientMap, state: &mut OptimState) -> Result<()> {
    for (id, g) in grads.iter() {
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("gradient for unknown parameter {}", id.0)));
        }
        if store.get(id).shape() != g.shape() {
            return Err(Error::shape("sgd_update", format!("gradient shape mismatch for `{}`", store.name(id))));
        }
    }
    for (id, g) in grads.iter() {
        let decay = if state.no_decay.contains(&id) { 0.0 } else { state.weight_decay };
        let (mu, lr) = (state.momentum, state.lr);
        let v = state.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        let p = store.get_mut(id).data_mut();
        for ((pk, vk), gk) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            let step = if decay > 0.0 { gk + decay * *pk } else { *gk };
            *vk = mu * *vk + step;
            *pk -= lr * *vk;
        }
    }
    Ok(())
}

/// Which task plays meta-train (the one whose gradient drives the virtual
/// update).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Alignment,
    Classification,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolePolicy {
    AlignTrain,
    ClsTrain,
    #[default]
    Alternate,
}

/// Alternation puts alignment on even iterations.
pub fn role_schedule(policy: RolePolicy, iteration: usize) -> Role {
    match policy {
        RolePolicy::AlignTrain => Role::Alignment,
        RolePolicy::ClsTrain => Role::Classification,
        RolePolicy::Alternate if iteration % 2 == 0 => Role::Alignment,
        RolePolicy::Alternate => Role::Classification,
    }
}

/// Replaces the bindings of every group's parameters with
/// `theta_m - alpha * beta_m * direction_m`.
///
/// Each group is flattened in the order of `groups[m]`, stepped, and sliced
/// back, so the gradient reaching `beta_m` is `-alpha` times the dot product
/// of `direction_m` with the flattened upstream gradient. `direction_m`
/// carries no gradient.
pub fn virtual_update(
    tape: &mut Tape,
    bound: &mut Bindings,
    store: &ParamStore,
    groups: &[Vec<ParamId>],
    beta: &GroupWeights,
    directions: &[Vec<f64>],
    alpha: f64,
) -> Result<()> {
    if groups.len() != beta.ids.len() || groups.len() != directions.len() {
        return Err(Error::Contract(format!(
            "{} groups, {} group weights, {} directions",
            groups.len(),
            beta.ids.len(),
            directions.len()
        )));
    }
    for ((group, &beta_id), direction) in groups.iter().zip(&beta.ids).zip(directions) {
        if group.is_empty() {
            continue;
        }
        let vars = group.iter().map(|&id| bound.get(id)).collect::<Result<Vec<Var>>>()?;
        let flat = tape.concat(&vars)?;
        let stepped = tape.virtual_step(flat, bound.get(beta_id)?, direction, alpha)?;
        let mut offset = 0;
        for &id in group {
            let shape = store.get(id).shape().to_vec();
            let part = tape.slice(stepped, offset, &shape)?;
            offset += store.get(id).len();
            bound.set(id, part);
        }
    }
    Ok(())
}

/// Everything the first-order meta step computes before updating.
#[derive(Clone, Debug)]
pub struct MetaGradients<A, B> {
    /// Gradient of the full objective for every wanted parameter and every
    /// group weight.
    pub grads: GradientMap,
    /// Meta-train gradient at the current parameters.
    pub train_grads: GradientMap,
    /// Gradient of meta-test loss plus budget penalty, taken through the
    /// virtually updated parameters.
    pub test_grads: GradientMap,
    pub train_loss: f64,
    pub test_loss: f64,
    pub penalty: f64,
    pub train_extra: A,
    pub test_extra: B,
}

struct TestPass<B> {
    tape: Tape,
    total: Var,
    loss: f64,
    penalty: f64,
    extra: B,
}

fn meta_test_pass<B, FE>(
    store: &ParamStore,
    groups: &[Vec<ParamId>],
    beta: &GroupWeights,
    directions: &[Vec<f64>],
    alpha: f64,
    meta_test: &mut FE,
) -> Result<TestPass<B>>
where
    FE: FnMut(&mut Tape, &Bindings) -> Result<(Var, B)>,
{
    let mut tape = Tape::new();
    let mut bound = Bindings::bind_all(&mut tape, store);
    let betas = beta.ids.iter().map(|&id| bound.get(id)).collect::<Result<Vec<Var>>>()?;
    virtual_update(&mut tape, &mut bound, store, groups, beta, directions, alpha)?;
    let (loss, extra) = meta_test(&mut tape, &bound)?;
    let (total, penalty) = if betas.is_empty() {
        (loss, 0.0)
    } else {
        let p = beta_penalty(&mut tape, &betas, beta.budget)?;
        (tape.add(loss, p)?, tape.value(p)?.item()?)
    };
    Ok(TestPass {
        loss: tape.value(loss)?.item()?,
        penalty,
        tape,
        total,
        extra,
    })
}

/// First-order meta gradients of
/// `L_train(theta) + L_test(theta - alpha * beta * g_train) + |sum(beta) - B|`
/// with `g_train` treated as a constant.
///
/// `groups` lists the parameter ids of each group and must match
/// `beta.ids`. `wanted` are the parameters to differentiate besides the group
/// weights; it must include every grouped id. The task closures build their
/// scalar loss on the tape they are given, reading parameters from the
/// bindings.
pub fn first_order_meta_gradients<A, B, FT, FE>(
    store: &ParamStore,
    groups: &[Vec<ParamId>],
    beta: &GroupWeights,
    alpha: f64,
    wanted: &[ParamId],
    mut meta_train: FT,
    mut meta_test: FE,
) -> Result<MetaGradients<A, B>>
where
    FT: FnMut(&mut Tape, &Bindings) -> Result<(Var, A)>,
    FE: FnMut(&mut Tape, &Bindings) -> Result<(Var, B)>,
{
    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, store);
    let (train, train_extra) = meta_train(&mut tape, &bound)?;
    let train_loss = tape.value(train)?.item()?;
    let train_grads = tape.backward(train, wanted)?;
    let directions: Vec<Vec<f64>> = groups.iter().map(|g| train_grads.flatten(g, store)).collect();

    let pass = meta_test_pass(store, groups, beta, &directions, alpha, &mut meta_test)?;
    let mut wanted_test = wanted.to_vec();
    wanted_test.extend(&beta.ids);
    let test_grads = pass.tape.backward(pass.total, &wanted_test)?;
    let grads = GradientMap::sum(&train_grads, &test_grads)?;
    Ok(MetaGradients {
        grads,
        train_grads,
        test_grads,
        train_loss,
        test_loss: pass.loss,
        penalty: pass.penalty,
        train_extra,
        test_extra: pass.extra,
    })
}

/// Value of the meta objective with the virtual-step directions frozen at
/// `directions`; its exact gradient is what
/// [`first_order_meta_gradients`] returns.
pub fn meta_objective<FT, FE, A, B>(
    store: &ParamStore,
    groups: &[Vec<ParamId>],
    beta: &GroupWeights,
    alpha: f64,
    directions: &[Vec<f64>],
    mut meta_train: FT,
    mut meta_test: FE,
) -> Result<f64>
where
    FT: FnMut(&mut Tape, &Bindings) -> Result<(Var, A)>,
    FE: FnMut(&mut Tape, &Bindings) -> Result<(Var, B)>,
{
    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, store);
    let (train, _) = meta_train(&mut tape, &bound)?;
    let train = tape.value(train)?.item()?;
    let pass = meta_test_pass(store, groups, beta, directions, alpha, &mut meta_test)?;
    Ok(train + pass.tape.value(pass.total)?.item()?)
}

/// Reported value and side information of one task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskInfo {
    /// Cross-entropy for the classification task; the alignment loss
    /// (negated domain loss, or MMD²) for the alignment task.
    pub value: f64,
    pub dom_cls: Option<f64>,
    pub clamped: bool,
}

/// Source cross-entropy as a task closure.
pub fn classification_task<'a>(
    model: &'a ModelBundle,
    batch: &'a PairedBatch,
) -> impl FnMut(&mut Tape, &Bindings) -> Result<(Var, TaskInfo)> + 'a {
    move |tape, bound| {
        let x = tape.constant(batch.src_x.clone());
        let f = model.extractor.forward(tape, bound, x)?;
        let logits = model.classifier.forward(tape, bound, f)?;
        let ce = cross_entropy(tape, logits, &batch.src_y)?;
        let value = tape.value(ce)?.item()?;
        Ok((
            ce,
            TaskInfo {
                value,
                ..TaskInfo::default()
            },
        ))
    }
}

/// Alignment objective of `variant` as a task closure. Only the target
/// features of the batch are read.
pub fn alignment_task<'a>(
    model: &'a ModelBundle,
    variant: &'a AlignmentVariant,
    batch: &'a PairedBatch,
    mut rng: Option<&'a mut ChaCha8Rng>,
) -> impl FnMut(&mut Tape, &Bindings) -> Result<(Var, TaskInfo)> + 'a {
    move |tape, bound| {
        let xs = tape.constant(batch.src_x.clone());
        let xt = tape.constant(batch.tgt_x.clone());
        let fs = model.extractor.forward(tape, bound, xs)?;
        let ft = model.extractor.forward(tape, bound, xt)?;
        let (logits_src, logits_tgt) = if matches!(variant, AlignmentVariant::Dannpe { .. }) {
            (
                Some(model.classifier.forward(tape, bound, fs)?),
                Some(model.classifier.forward(tape, bound, ft)?),
            )
        } else {
            (None, None)
        };
        let inputs = AlignmentInputs {
            features_src: fs,
            features_tgt: ft,
            logits_src,
            logits_tgt,
        };
        let out = alignment_loss(tape, bound, model, variant, inputs, rng.as_deref_mut())?;
        Ok((
            out.objective,
            TaskInfo {
                value: out.dom,
                dom_cls: out.dom_cls,
                clamped: out.clamped,
            },
        ))
    }
}

/// Losses and diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Meta-train task, or `None` for the joint step.
    pub role: Option<Role>,
    pub l_cls: f64,
    pub l_dom_cls: Option<f64>,
    pub l_dom: f64,
    pub l_beta: f64,
    /// `l_cls + lambda * l_dom + l_beta`.
    pub l_total: f64,
    /// Agreement of the alignment and classification gradients over the
    /// extractor's groups.
    pub agreement: GradDot,
    /// Group weights after the update.
    pub beta: Vec<f64>,
    pub clamped: bool,
}

fn check_finite(report: &StepReport, grads: &GradientMap) -> Result<()> {
    let losses = [report.l_cls, report.l_dom, report.l_beta, report.l_total];
    if losses.iter().any(|v| !v.is_finite()) || report.l_dom_cls.is_some_and(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!(
                "loss: cls {} dom {} beta {} total {}",
                report.l_cls, report.l_dom, report.l_beta, report.l_total
            ),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: "gradient".into(),
        });
    }
    Ok(())
}

/// Gradients of `L_cls + L_align` at the current parameters and the step
/// report (with `beta` holding the current group weights).
pub fn joint_gradients(
    model: &ModelBundle,
    batch: &PairedBatch,
    variant: &AlignmentVariant,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(GradientMap, StepReport)> {
    let wanted = model.network_ids();
    let groups = model.extractor.group_params();

    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, &model.store);
    let (align, info_dom) = alignment_task(model, variant, batch, rng)(&mut tape, &bound)?;
    let g_dom = tape.backward(align, &wanted)?;

    let mut tape = Tape::new();
    let bound = Bindings::bind_all(&mut tape, &model.store);
    let (cls, info_cls) = classification_task(model, batch)(&mut tape, &bound)?;
    let g_cls = tape.backward(cls, &wanted)?;

    let grads = GradientMap::sum(&g_dom, &g_cls)?;
    let report = StepReport {
        role: None,
        l_cls: info_cls.value,
        l_dom_cls: info_dom.dom_cls,
        l_dom: info_dom.value,
        l_beta: 0.0,
        l_total: info_cls.value + variant.lambda() * info_dom.value,
        agreement: grad_dot(&g_dom, &g_cls, &groups, &model.store)?,
        beta: model.beta_values(),
        clamped: info_dom.clamped,
    };
    Ok((grads, report))
}

/// Baseline step: one SGD update on `L_cls + L_align`. Group weights do not
/// move.
pub fn joint_step(
    model: &mut ModelBundle,
    batch: &PairedBatch,
    variant: &AlignmentVariant,
    state: &mut OptimState,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepReport> {
    let (grads, report) = joint_gradients(model, batch, variant, rng)?;
    check_finite(&report, &grads)?;
    sgd_update(&mut model.store, &grads, state)?;
    Ok(report)
}

/// First-order meta gradients for one batch with `role` as meta-train.
pub fn meta_gradients(
    model: &ModelBundle,
    batch: &PairedBatch,
    variant: &AlignmentVariant,
    alpha: f64,
    role: Role,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(MetaGradients<TaskInfo, TaskInfo>, StepReport)> {
    let wanted = model.network_ids();
    let groups = model.extractor.group_params();
    let store = &model.store;
    let cls = classification_task(model, batch);
    let align = alignment_task(model, variant, batch, rng);
    let mg = match role {
        Role::Alignment => first_order_meta_gradients(store, &groups, &model.beta, alpha, &wanted, align, cls)?,
        Role::Classification => first_order_meta_gradients(store, &groups, &model.beta, alpha, &wanted, cls, align)?,
    };
    let (dom, cls_info, g_dom, g_cls) = match role {
        Role::Alignment => (mg.train_extra, mg.test_extra, &mg.train_grads, &mg.test_grads),
        Role::Classification => (mg.test_extra, mg.train_extra, &mg.test_grads, &mg.train_grads),
    };
    let agreement = match role {
        Role::Alignment => grad_dot(g_dom, g_cls, &groups, store)?,
        Role::Classification => grad_dot(g_cls, g_dom, &groups, store)?,
    };
    let report = StepReport {
        role: Some(role),
        l_cls: cls_info.value,
        l_dom_cls: dom.dom_cls,
        l_dom: dom.value,
        l_beta: mg.penalty,
        l_total: cls_info.value + variant.lambda() * dom.value + mg.penalty,
        agreement,
        beta: model.beta_values(),
        clamped: dom.clamped,
    };
    Ok((mg, report))
}

/// One meta-optimization step: virtual update along the meta-train
/// gradient, meta-test loss at the updated parameters, then an SGD update of
/// every parameter including the group weights.
pub fn metaalign_step(
    model: &mut ModelBundle,
    batch: &PairedBatch,
    variant: &AlignmentVariant,
    state: &mut OptimState,
    role: Role,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepReport> {
    let (mg, mut report) = meta_gradients(model, batch, variant, state.meta_lr, role, rng)?;
    check_finite(&report, &mg.grads)?;
    sgd_update(&mut model.store, &mg.grads, state)?;
    report.beta = model.beta_values();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch_iter, gen_two_moons};
    use crate::nn::ModelSpec;
    use crate::tensor::{finite_diff_grad, relative_error, Tensor};
    use rand::SeedableRng;

    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    #[test]
    fn plain_sgd_and_momentum() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(1.0));
        let mut g = GradientMap::new();
        g.insert(p, Tensor::scalar(2.0));
        let mut st = OptimState::new(0.1, 0.0, 0.0, 0.0).unwrap();
        sgd_update(&mut store, &g, &mut st).unwrap();
        assert!((store.get(p).item().unwrap() - 0.8).abs() < 1e-15);

        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(1.0));
        let mut st = OptimState::new(0.1, 0.0, 0.9, 0.0).unwrap();
        let (mut v, mut x) = (0.0f64, 1.0f64);
        for k in 0..5 {
            let gk = 1.0 + k as f64;
            let mut g = GradientMap::new();
            g.insert(p, Tensor::scalar(gk));
            sgd_update(&mut store, &g, &mut st).unwrap();
            v = 0.9 * v + gk;
            x -= 0.1 * v;
        }
        assert_eq!(store.get(p).item().unwrap(), x);
    }

    #[test]
    fn decay_skips_exempt_params() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(2.0));
        let b = store.register("b", Tensor::scalar(2.0));
        let mut st = OptimState::new(0.5, 0.0, 0.0, 0.1).unwrap();
        st.exempt_from_decay(&[b]);
        let mut g = GradientMap::new();
        g.insert(a, Tensor::scalar(0.0));
        g.insert(b, Tensor::scalar(0.0));
        sgd_update(&mut store, &g, &mut st).unwrap();
        assert!((store.get(a).item().unwrap() - 1.9).abs() < 1e-15);
        assert_eq!(store.get(b).item().unwrap(), 2.0);
        assert!(OptimState::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(OptimState::new(0.1, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn alternation_starts_with_alignment() {
        let roles: Vec<Role> = (0..4).map(|i| role_schedule(RolePolicy::Alternate, i)).collect();
        assert_eq!(roles, [Role::Alignment, Role::Classification, Role::Alignment, Role::Classification]);
        assert_eq!(role_schedule(RolePolicy::ClsTrain, 0), Role::Classification);
    }

    struct Toy {
        store: ParamStore,
        theta: ParamId,
        beta: GroupWeights,
    }

    fn toy(theta: f64, beta: f64) -> Toy {
        let mut store = ParamStore::new();
        let t = store.register("theta", Tensor::scalar(theta));
        let b = store.register("beta.0", Tensor::scalar(beta));
        Toy {
            store,
            theta: t,
            beta: GroupWeights { ids: vec![b], budget: 1.0 },
        }
    }

    // L_dom = theta^2 / 2, L_cls = (theta - 1)^2 / 2
    fn half_square(shift: f64, id: ParamId) -> impl FnMut(&mut Tape, &Bindings) -> Result<(Var, ())> {
        move |tape, bound| {
            let t = bound.get(id)?;
            let d = tape.add_scalar(t, -shift)?;
            let sq = tape.mul(d, d)?;
            let h = tape.scale(sq, 0.5)?;
            Ok((tape.sum(h)?, ()))
        }
    }

    #[test]
    fn quadratic_toy_matches_hand_derivation() {
        let alpha = 0.1;
        let t = toy(1.0, 1.0);
        let mg = first_order_meta_gradients(
            &t.store,
            &[vec![t.theta]],
            &t.beta,
            alpha,
            &[t.theta],
            half_square(0.0, t.theta),
            half_square(1.0, t.theta),
        )
        .unwrap();
        let g_theta = mg.grads.get(t.theta).unwrap().item().unwrap();
        let g_beta = mg.grads.get(t.beta.ids[0]).unwrap().item().unwrap();
        assert!((g_theta - (1.0 - alpha)).abs() < 1e-12);
        assert!((g_beta - alpha * alpha).abs() < 1e-12);
        assert_eq!(mg.penalty, 0.0);
    }

    #[test]
    fn virtual_update_edge_cases() {
        let t = toy(1.0, 1.0);
        for (alpha, beta, want) in [(0.1, 1.0, 0.9), (0.0, 1.0, 1.0), (0.1, 0.0, 1.0)] {
            let mut tt = toy(1.0, beta);
            tt.store.set(tt.beta.ids[0], Tensor::scalar(beta)).unwrap();
            let mut tape = Tape::new();
            let mut bound = Bindings::bind_all(&mut tape, &tt.store);
            virtual_update(&mut tape, &mut bound, &tt.store, &[vec![t.theta]], &tt.beta, &[vec![1.0]], alpha).unwrap();
            let v = tape.value(bound.get(t.theta).unwrap()).unwrap().item().unwrap();
            assert!((v - want).abs() < 1e-15, "alpha {alpha} beta {beta}: {v}");
        }
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let alpha = 0.3;
        let mut t = toy(0.7, 1.4);
        let groups = vec![vec![t.theta]];
        let mg = first_order_meta_gradients(
            &t.store,
            &groups,
            &t.beta,
            alpha,
            &[t.theta],
            half_square(0.0, t.theta),
            half_square(1.0, t.theta),
        )
        .unwrap();
        let dirs: Vec<Vec<f64>> = groups.iter().map(|g| mg.train_grads.flatten(g, &t.store)).collect();
        let (theta, beta) = (t.theta, t.beta.clone());
        let ids = [theta, beta.ids[0]];
        let fd = finite_diff_grad(
            |s| meta_objective(s, &groups, &beta, alpha, &dirs, half_square(0.0, theta), half_square(1.0, theta)),
            &mut t.store,
            &ids,
            1e-6,
        )
        .unwrap();
        for id in ids {
            let a = mg.grads.get(id).unwrap().item().unwrap();
            let b = fd.get(id).unwrap().item().unwrap();
            assert!(relative_error(a, b, 1e-2) < 1e-6, "{a} vs {b}");
        }
    }

    fn setup(variant: &AlignmentVariant, groups: usize) -> (ModelBundle, PairedBatch) {
        let (src, tgt) = gen_two_moons(40, 0.1, 40.0, [0.0, 0.0], 3).unwrap();
        let batch = batch_iter(&src, &tgt, 16, 1, None).unwrap().next().unwrap();
        let spec = ModelSpec {
            hidden: vec![8, 8, 6],
            groups,
            discriminator_hidden: 6,
            ..ModelSpec::default()
        };
        let mut model = ModelBundle::new(&spec, variant.discriminator_input(6, 2)).unwrap();
        model.init_params(11);
        (model, batch)
    }

    fn variants() -> Vec<AlignmentVariant> {
        vec![
            AlignmentVariant::Dann { lambda: 1.0 },
            AlignmentVariant::Dannpe { lambda: 0.5 },
            AlignmentVariant::Mmd {
                lambda: 1.0,
                sigma: Some(2.0),
            },
        ]
    }

    #[test]
    fn zero_alpha_meta_step_equals_joint_step_for_both_roles() {
        for variant in variants() {
            let (model, batch) = setup(&variant, 2);
            let mut joint = model.clone();
            let mut st = OptimState::new(0.05, 0.0, 0.9, 5e-4).unwrap();
            st.exempt_from_decay(&model.beta.ids);
            let mut st_joint = st.clone();
            joint_step(&mut joint, &batch, &variant, &mut st_joint, None).unwrap();
            for role in [Role::Alignment, Role::Classification] {
                let mut meta = model.clone();
                let mut st_meta = st.clone();
                metaalign_step(&mut meta, &batch, &variant, &mut st_meta, role, None).unwrap();
                for id in model.network_ids().into_iter().chain(model.beta.ids.iter().copied()) {
                    assert_eq!(meta.store.get(id), joint.store.get(id), "{} {role:?}", meta.store.name(id));
                }
            }
        }
    }

    #[test]
    fn zero_lambda_joint_step_is_supervised_training() {
        let variant = AlignmentVariant::Dann { lambda: 0.0 };
        let (model, batch) = setup(&variant, 2);
        let mut a = model.clone();
        let mut st = OptimState::new(0.05, 0.0, 0.9, 0.0).unwrap();
        joint_step(&mut a, &batch, &variant, &mut st.clone(), None).unwrap();

        let mut b = model.clone();
        let ids: Vec<ParamId> = model.theta_ids().into_iter().chain(model.classifier_ids()).collect();
        let mut tape = Tape::new();
        let bound = Bindings::bind_all(&mut tape, &b.store);
        let (ce, _) = classification_task(&model, &batch)(&mut tape, &bound).unwrap();
        let g = tape.backward(ce, &ids).unwrap();
        sgd_update(&mut b.store, &g, &mut st).unwrap();
        for id in ids {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
    }

    #[test]
    fn beta_gradient_closed_form() {
        let alpha = 0.05;
        for variant in variants() {
            let (mut model, batch) = setup(&variant, 3);
            model.store.set(model.beta.ids[0], Tensor::scalar(1.3)).unwrap();
            for role in [Role::Alignment, Role::Classification] {
                let (mg, report) = meta_gradients(&model, &batch, &variant, alpha, role, None).unwrap();
                let betas = model.beta_values();
                let s = sign(betas.iter().sum::<f64>() + -model.beta.budget);
                // per-group dots are always <meta-train gradient, meta-test gradient>
                let dots = &report.agreement.per_group;
                for (m, &id) in model.beta.ids.iter().enumerate() {
                    let g = mg.grads.get(id).unwrap().item().unwrap();
                    assert_eq!(g, -alpha * dots[m] + s, "group {m} {role:?}");
                }
            }
        }
    }

    #[test]
    fn meta_gradients_match_finite_differences() {
        let alpha = 0.5;
        let variant = AlignmentVariant::Mmd {
            lambda: 1.0,
            sigma: Some(2.0),
        };
        let (mut model, batch) = setup(&variant, 2);
        model.spec.activation = crate::nn::Activation::Tanh;
        model.extractor.activation = crate::nn::Activation::Tanh;
        model.classifier.activation = crate::nn::Activation::Tanh;
        model.store.set(model.beta.ids[1], Tensor::scalar(0.6)).unwrap();
        let groups = model.extractor.group_params();
        let (mg, _) = meta_gradients(&model, &batch, &variant, alpha, Role::Alignment, None).unwrap();
        let dirs: Vec<Vec<f64>> = groups.iter().map(|g| mg.train_grads.flatten(g, &model.store)).collect();
        let mut ids = model.network_ids();
        ids.extend(&model.beta.ids);
        let frozen = model.clone();
        let fd = finite_diff_grad(
            |s| {
                let mut m = frozen.clone();
                m.store = s.clone();
                meta_objective(
                    s,
                    &groups,
                    &m.beta,
                    alpha,
                    &dirs,
                    alignment_task(&m, &variant, &batch, None),
                    classification_task(&m, &batch),
                )
            },
            &mut model.store,
            &ids,
            1e-6,
        )
        .unwrap();
        for id in ids {
            for (a, b) in mg.grads.get(id).unwrap().data().iter().zip(fd.get(id).unwrap().data()) {
                assert!(relative_error(*a, *b, 1e-2) < 1e-6, "{}: {a} vs {b}", model.store.name(id));
            }
        }
    }

    #[test]
    fn meta_step_moves_group_weights_and_reports_penalty() {
        let variant = AlignmentVariant::Dann { lambda: 1.0 };
        let (mut model, batch) = setup(&variant, 2);
        let mut st = OptimState::new(0.1, 0.5, 0.0, 0.0).unwrap();
        let before = model.beta_values();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = metaalign_step(&mut model, &batch, &variant, &mut st, Role::Alignment, Some(&mut rng)).unwrap();
        assert_eq!(r.l_beta, 0.0);
        assert_ne!(r.beta, before);
        assert_eq!(r.agreement.per_group.len(), 2);
        assert!((r.l_total - (r.l_cls + r.l_dom)).abs() < 1e-15);
    }
}
