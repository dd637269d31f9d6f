//! End-to-end gradient verification over seeded random small instances.
//!
//! Every learnable group is compared against central differences of the
//! classification loss. The finite-difference side never touches the
//! production forward pass: it evaluates an independent reference
//! implementation of the same model in double-double arithmetic, so the
//! numeric derivative is not limited by `f64` rounding of the loss.

use std::fmt;

use crate::classifier::{full_backward, ClassifierConfig, Model};
use crate::conditioners::{meta_transform, Method, PatchAggregation, PromptDims, PromptParams, GROUP_NAMES};
use crate::encoders::{ClassEmbeddingTable, FrozenEncoders};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, sample_gaussian, DoubleDouble, Real, Rng, Tensor};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

const PARAM_SCALE: f64 = 0.5;
const RELU_MARGIN: f64 = 0.1;
const GAMMA_RANGE: (f64, f64) = (0.25, 1.0);

/// One labelled image with a small randomly drawn model.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: Model,
    pub classes: ClassEmbeddingTable,
    pub cfg: ClassifierConfig,
    pub patches: Tensor,
    pub label: usize,
}

impl Instance {
    /// Loss through the production forward pass.
    pub fn loss_at(&self, groups: &[Tensor]) -> f64 {
        let mut model = self.model.clone();
        model.params = PromptParams::from_groups(groups).expect("group shapes preserved");
        model
            .loss(&self.patches, self.label, &self.classes, &self.cfg)
            .unwrap_or(f64::NAN)
    }

    /// Loss through the reference forward pass, in any scalar type.
    pub fn reference_loss<R: Real>(&self, groups: &[Tensor]) -> R {
        reference::loss(self, groups)
    }

    pub fn analytic(&self) -> Result<PromptParams> {
        let pass = self.model.forward(&self.patches, &self.classes, &self.cfg)?;
        let target = self.cfg.position(self.label).expect("label in label space");
        full_backward(&self.model, &pass, target)
    }
}

/// Draws a small instance: K ≤ 3, M ≤ 4, P ≤ 6, d ≤ 8.
///
/// Patch entries are bounded away from zero and parameters are redrawn until
/// every meta-net pre-activation clears the ReLU kink by a fixed margin, so
/// the loss is smooth within `±h` of the drawn point.
pub fn random_instance(method: Method, seed: u64) -> Instance {
    let mut rng = Rng::derived(seed, 0x6763_6b00 + method as u64);
    let k = 2 + rng.below(2);
    let m = 1 + rng.below(4);
    let p = 1 + rng.below(6);
    let d = 2 + rng.below(7);
    let d_img = 2 + rng.below(4);
    let d_joint = 2 + rng.below(4);
    let h_text = 2 + rng.below(6);
    let h_meta = 2 + rng.below(3);
    let gamma = GAMMA_RANGE.0 + (GAMMA_RANGE.1 - GAMMA_RANGE.0) * rng.next_f64();
    let aggregation = if rng.below(2) == 0 {
        PatchAggregation::Sum
    } else {
        PatchAggregation::Mean
    };
    let dims = PromptDims {
        prompt_len: m,
        token_dim: d,
        image_dim: d_img,
        meta_hidden: h_meta,
    };
    let patches = away_from_zero(&mut rng, p, d_img);
    let meta_inputs = match method {
        Method::Copl => patches.clone(),
        _ => Tensor::from_rows(&[patches.mean_rows()]).expect("finite"),
    };
    let mut params = PromptParams::zeros(dims);
    loop {
        for t in params.groups_mut() {
            *t = sample_gaussian(&mut rng, t.shape(), 0.0, PARAM_SCALE).expect("finite");
        }
        let fwd = meta_transform(&params.meta, &meta_inputs).expect("consistent dims");
        if fwd.pre.data().iter().all(|z| z.abs() >= RELU_MARGIN) {
            break;
        }
    }
    let encoders = FrozenEncoders::new(rng.next_u64(), m, d, d_img, d_joint, h_text);
    let protos = sample_gaussian(&mut rng, &[k, d_img], 0.0, 1.0).expect("finite");
    let classes = encoders.class_table(&protos).expect("non-empty");
    let label = rng.below(k);
    Instance {
        model: Model {
            method,
            params,
            encoders,
            aggregation,
        },
        classes,
        cfg: ClassifierConfig::new(gamma, (0..k).collect()).expect("valid"),
        patches,
        label,
    }
}

/// Entries uniform in `±[0.5, 1.5]`.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = 0.5 + rng.next_f64();
            if rng.below(2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("finite")
}

/// Deliberate corruption of an analytic gradient, for exercising the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipSign(usize),
}

impl Fault {
    pub fn flip_sign(group: &str) -> Result<Self> {
        GROUP_NAMES
            .iter()
            .position(|g| *g == group)
            .map(Fault::FlipSign)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group {group:?}")))
    }

    fn apply(self, grads: &mut PromptParams) {
        let Fault::FlipSign(g) = self;
        grads.groups_mut()[g].scale(-1.0);
    }
}

/// Worst observed error for one named check across all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub path: String,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
    pub instances: usize,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&CheckLine> {
        self.lines
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: {} instances per method, h = {:e}, tolerance {:e}",
            self.instances, GRADCHECK_STEP, self.tolerance
        )?;
        for line in &self.lines {
            let status = if line.max_rel_error < self.tolerance {
                "ok  "
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "  {status} {:<22} max rel err {:.3e} (seed {}, entry {})",
                line.path, line.max_rel_error, line.worst_seed, line.worst_index
            )?;
        }
        Ok(())
    }
}

fn record(lines: &mut Vec<CheckLine>, path: String, err: f64, seed: u64, index: usize) {
    match lines.iter_mut().find(|l| l.path == path) {
        Some(l) if err > l.max_rel_error => {
            l.max_rel_error = err;
            l.worst_seed = seed;
            l.worst_index = index;
        }
        Some(_) => {}
        None => lines.push(CheckLine {
            path,
            max_rel_error: err,
            worst_seed: seed,
            worst_index: index,
        }),
    }
}

/// Which groups each method actually uses.
fn live_groups(method: Method) -> &'static [usize] {
    match method {
        Method::Coop => &[0],
        Method::Cocoop => &[0, 2, 3, 4, 5],
        Method::Copl | Method::CoplGlobal => &[0, 1, 2, 3, 4, 5],
    }
}

/// Runs the suite on `instances` seeds per method.
pub fn run_suite(instances: usize, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut lines = Vec::new();
    for method in [Method::Copl, Method::Cocoop, Method::Coop, Method::CoplGlobal] {
        for seed in 0..instances as u64 {
            let inst = random_instance(method, seed);
            let mut grads = inst.analytic()?;
            if let Some(fault) = fault {
                fault.apply(&mut grads);
            }
            let report = grad_check(
                |g| inst.reference_loss::<DoubleDouble>(g),
                &inst.model.params.to_groups(),
                &grads.to_groups(),
                GRADCHECK_STEP,
                GRADCHECK_TOLERANCE,
            )?;
            for &g in live_groups(method) {
                let e = &report.per_param[g];
                record(
                    &mut lines,
                    format!("{method}/{}", GROUP_NAMES[g]),
                    e.max_rel_error,
                    seed,
                    e.worst_index,
                );
            }
        }
    }

    // Component checks: text encoder wrt tokens, meta-net wrt its inputs.
    for seed in 0..instances as u64 {
        let inst = random_instance(Method::Copl, seed);
        let text = &inst.model.encoders.text;
        let mut rng = Rng::derived(seed, 0x636f_6d70);
        let tokens = sample_gaussian(&mut rng, &[text.prompt_len() + 1, text.token_dim()], 0.0, 1.0)?;
        let upstream = sample_gaussian(&mut rng, &[text.joint_dim()], 0.0, 1.0)?.into_data();
        let enc = text.encode(&tokens)?;
        let g = text.backward(&enc, &upstream);
        let r = grad_check(
            |t| {
                let out = reference::text_encode::<DoubleDouble>(text, &reference::lift(t[0].data()));
                reference::dot(&out, &reference::lift(&upstream))
            },
            &[tokens],
            &[g],
            GRADCHECK_STEP,
            GRADCHECK_TOLERANCE,
        )?;
        record(
            &mut lines,
            "text_encoder/tokens".into(),
            r.max_rel_error,
            seed,
            r.per_param[0].worst_index,
        );

        let net = &inst.model.params.meta;
        let groups = inst.model.params.to_groups();
        let fwd = meta_transform(net, &inst.patches)?;
        let up = sample_gaussian(&mut rng, fwd.output.shape(), 0.0, 1.0)?;
        let mut scratch = inst.model.params.zeros_like();
        let d_patches = net.backward(&fwd, &up, &mut scratch.meta);
        let r = grad_check(
            |t| {
                let mut total = DoubleDouble::zero();
                for (row, u) in t[0].iter_rows().zip(up.iter_rows()) {
                    let out = reference::meta::<DoubleDouble>(&groups, &reference::lift(row));
                    total += reference::dot(&out, &reference::lift(u));
                }
                total
            },
            std::slice::from_ref(&inst.patches),
            &[d_patches],
            GRADCHECK_STEP,
            GRADCHECK_TOLERANCE,
        )?;
        record(
            &mut lines,
            "meta_net/patches".into(),
            r.max_rel_error,
            seed,
            r.per_param[0].worst_index,
        );
    }

    Ok(SuiteReport {
        lines,
        instances,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

/// Straight-line restatement of the model written against raw weights.
pub(crate) mod reference {
    use super::Instance;
    use crate::conditioners::{Method, PatchAggregation};
    use crate::encoders::TextEncoderStub;
    use crate::numerics::{Real, Tensor};

    pub fn lift<R: Real>(v: &[f64]) -> Vec<R> {
        v.iter().map(|&x| R::from_f64(x)).collect()
    }

    pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
        let mut s = R::zero();
        for (x, y) in a.iter().zip(b) {
            s += *x * *y;
        }
        s
    }

    /// `W x + b` for row-major `W`.
    fn affine<R: Real>(w: &Tensor, x: &[R], b: Option<&Tensor>) -> Vec<R> {
        (0..w.rows())
            .map(|r| {
                let mut s = dot(&lift::<R>(w.row(r)), x);
                if let Some(b) = b {
                    s += R::from_f64(b.data()[r]);
                }
                s
            })
            .collect()
    }

    pub fn text_encode<R: Real>(enc: &TextEncoderStub, flat_tokens: &[R]) -> Vec<R> {
        let [w1, b1, w2, b2] = enc.weights();
        let hidden: Vec<R> = affine(w1, flat_tokens, Some(b1)).into_iter().map(R::tanh).collect();
        affine(w2, &hidden, Some(b2))
    }

    /// Meta-net on one input row; groups in checkpoint order.
    pub fn meta<R: Real>(groups: &[Tensor], x: &[R]) -> Vec<R> {
        let [_, _, u1, c1, u2, c2] = groups else {
            unreachable!("six parameter groups")
        };
        let h: Vec<R> = affine(u1, x, Some(c1)).into_iter().map(R::relu).collect();
        affine(u2, &h, Some(c2))
    }

    fn softmax<R: Real>(z: &[R]) -> Vec<R> {
        let m = z.iter().copied().fold(z[0], R::max);
        let e: Vec<R> = z.iter().map(|&v| (v - m).exp()).collect();
        let mut total = R::zero();
        for &v in &e {
            total += v;
        }
        e.into_iter().map(|v| v / total).collect()
    }

    fn cosine<R: Real>(a: &[R], b: &[R]) -> R {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    fn mean_row<R: Real>(patches: &Tensor) -> Vec<R> {
        let mut mean = vec![R::zero(); patches.cols()];
        for row in patches.iter_rows() {
            for (acc, &x) in mean.iter_mut().zip(row) {
                *acc += R::from_f64(x);
            }
        }
        let p = R::from_f64(patches.rows() as f64);
        mean.into_iter().map(|s| s / p).collect()
    }

    /// Conditioned prompt rows; groups in checkpoint order.
    pub fn conditioned<R: Real>(
        method: Method,
        aggregation: PatchAggregation,
        groups: &[Tensor],
        patches: &Tensor,
    ) -> Vec<Vec<R>> {
        let [v, w_a, ..] = groups else {
            unreachable!("six parameter groups")
        };
        let (m, d) = (v.rows(), v.cols());
        let prompts: Vec<Vec<R>> = (0..m).map(|i| lift(v.row(i))).collect();
        let p = patches.rows();
        let offset: Vec<R> = match method {
            Method::Coop => vec![R::zero(); d],
            Method::Cocoop => meta(groups, &mean_row(patches)),
            Method::Copl | Method::CoplGlobal => {
                let (wa_s, wa_v) = w_a.data().split_at(d);
                let (wa_s, wa_v) = (lift::<R>(wa_s), lift::<R>(wa_v));
                let rows: Vec<Vec<R>> = if method == Method::Copl {
                    patches.iter_rows().map(lift).collect()
                } else {
                    vec![mean_row(patches); p]
                };
                let mut total = vec![R::zero(); d];
                for row in &rows {
                    let s = meta(groups, row);
                    let scores: Vec<R> = prompts
                        .iter()
                        .map(|v_i| (dot(&wa_s, &s) + dot(&wa_v, v_i)).tanh())
                        .collect();
                    for (a, v_i) in softmax(&scores).into_iter().zip(&prompts) {
                        for (t, &x) in total.iter_mut().zip(v_i) {
                            *t += a * x;
                        }
                    }
                }
                if aggregation == PatchAggregation::Mean {
                    total = total.into_iter().map(|t| t / R::from_f64(p as f64)).collect();
                }
                total
            }
        };
        prompts
            .into_iter()
            .map(|v_i| v_i.iter().zip(&offset).map(|(&a, &b)| a + b).collect())
            .collect()
    }

    /// Cross-entropy as `logsumexp(z) - z_y`.
    pub fn loss<R: Real>(inst: &Instance, groups: &[Tensor]) -> R {
        let model = &inst.model;
        let prompts = conditioned::<R>(model.method, model.aggregation, groups, &inst.patches);
        let mean_patch = mean_row::<R>(&inst.patches);
        let image = affine(inst.model.encoders.image.matrix(), &mean_patch, None);
        let inv_gamma = R::one() / R::from_f64(inst.cfg.gamma());
        let logits: Vec<R> = inst
            .cfg
            .class_ids()
            .iter()
            .map(|&c| {
                let mut flat: Vec<R> = prompts.concat();
                flat.extend(lift::<R>(inst.classes.embedding(c).expect("class in table")));
                cosine(&image, &text_encode(&inst.model.encoders.text, &flat)) * inv_gamma
            })
            .collect();
        let target = inst.cfg.position(inst.label).expect("label in label space");
        let top = logits.iter().copied().fold(logits[0], R::max);
        let mut sum = R::zero();
        for &z in &logits {
            sum += (z - top).exp();
        }
        top + sum.ln() - logits[target]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let report = run_suite(DEFAULT_INSTANCES, None).unwrap();
        assert!(report.pass(), "{report}");
        let copl_groups = report.lines.iter().filter(|l| l.path.starts_with("copl/")).count();
        assert_eq!(copl_groups, 6);
    }

    #[test]
    fn sign_flip_is_detected() {
        let report = run_suite(3, Some(Fault::flip_sign("W_a").unwrap())).unwrap();
        assert!(!report.pass());
        assert!(report.worst().unwrap().path.ends_with("/W_a"));
    }

    #[test]
    fn reference_forward_agrees_with_model() {
        for method in Method::ALL {
            for seed in 0..10 {
                let inst = random_instance(method, seed);
                let groups = inst.model.params.to_groups();
                let model = inst.loss_at(&groups);
                let plain: f64 = inst.reference_loss(&groups);
                let wide = inst.reference_loss::<DoubleDouble>(&groups).to_f64();
                let scale = model.abs().max(1.0);
                assert!(
                    (model - plain).abs() <= 1e-12 * scale,
                    "{method} seed {seed}: {model} vs {plain}"
                );
                assert!(
                    (model - wide).abs() <= 1e-12 * scale,
                    "{method} seed {seed}: {model} vs {wide}"
                );
            }
        }
    }

    #[test]
    fn instances_respect_size_limits() {
        for seed in 0..50 {
            let inst = random_instance(Method::Copl, seed);
            let dims = inst.model.params.dims();
            assert!(inst.cfg.class_ids().len() <= 3);
            assert!(dims.prompt_len <= 4 && dims.token_dim <= 8);
            assert!(inst.patches.rows() <= 6);
        }
    }
}
