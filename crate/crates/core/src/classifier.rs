//! Prompt assembly, the temperature-scaled cosine posterior and the
//! cross-entropy head, chained back into the conditioner parameters.

use crate::conditioners::{condition, Conditioned, Method, PatchAggregation, PromptParams};
use crate::encoders::{encode_image_global, ClassEmbeddingTable, FrozenEncoders, TextEncoding};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_sim, dot, norm, softmax, Tensor};

/// Temperature used when a config does not set one (logit scale 100).
pub const DEFAULT_GAMMA: f64 = 0.01;
/// Floor applied to the target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    gamma: f64,
    class_ids: Vec<usize>,
}

impl ClassifierConfig {
    pub fn new(gamma: f64, class_ids: Vec<usize>) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {gamma}")));
        }
        if class_ids.is_empty() {
            return Err(Error::invalid("label space is empty"));
        }
        let mut seen = class_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != class_ids.len() {
            return Err(Error::invalid("label space has duplicate class ids"));
        }
        Ok(Self { gamma, class_ids })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Position of `class_id` inside the active label space.
    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Posterior {
    /// Predicted position in the label space; ties go to the lowest position.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Stacks the conditioned prompts above the class token.
pub fn assemble_prompt(conditioned: &Tensor, class_token: &[f64]) -> Result<Tensor> {
    if conditioned.cols() != class_token.len() {
        return Err(Error::shape(format!(
            "prompt width {} but class token width {}",
            conditioned.cols(),
            class_token.len()
        )));
    }
    let mut data = Vec::with_capacity(conditioned.len() + class_token.len());
    data.extend_from_slice(conditioned.data());
    data.extend_from_slice(class_token);
    Tensor::matrix(conditioned.rows() + 1, class_token.len(), data)
}

/// `softmax_i(cos(x, text_i) / γ)` over the rows of `per_class_text`.
pub fn predict(x: &[f64], per_class_text: &Tensor, cfg: &ClassifierConfig) -> Result<Posterior> {
    if per_class_text.rows() != cfg.class_ids.len() {
        return Err(Error::shape(format!(
            "{} text features for {} classes",
            per_class_text.rows(),
            cfg.class_ids.len()
        )));
    }
    let logits = per_class_text
        .iter_rows()
        .map(|t| {
            cosine_sim(x, t).map(|c| c / cfg.gamma).map_err(|e| match e {
                Error::DegenerateVector => Error::DegenerateFeature,
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = softmax(&logits)?;
    Ok(Posterior { probs, logits })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Set when the target probability underflowed and was floored.
    pub clamped: bool,
}

/// `−log p_target`, floored so the loss stays finite.
pub fn cross_entropy(post: &Posterior, target: usize) -> Result<CrossEntropy> {
    let p = *post.probs.get(target).ok_or(Error::ClassOutOfRange {
        id: target,
        count: post.probs.len(),
    })?;
    let clamped = p < PROB_FLOOR;
    Ok(CrossEntropy {
        loss: -p.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Gradient of the cross-entropy with respect to the logits: `p − onehot`.
pub fn cross_entropy_backward(post: &Posterior, target: usize) -> Result<Vec<f64>> {
    if target >= post.probs.len() {
        return Err(Error::ClassOutOfRange {
            id: target,
            count: post.probs.len(),
        });
    }
    let mut g = post.probs.clone();
    g[target] -= 1.0;
    Ok(g)
}

/// Learnable parameters plus everything frozen that a forward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub method: Method,
    pub params: PromptParams,
    pub encoders: FrozenEncoders,
    pub aggregation: PatchAggregation,
}

/// Activations kept for [`full_backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    conditioned: Conditioned,
    encodings: Vec<TextEncoding>,
    image: Vec<f64>,
    text: Tensor,
}

/// Result of classifying one image.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub posterior: Posterior,
    gamma: f64,
    cache: Option<ForwardCache>,
}

impl ForwardPass {
    /// Drops the activations; the pass can no longer be backpropagated.
    pub fn into_inference(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn conditioned(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| c.conditioned.prompts())
    }
}

impl Model {
    /// Runs the full image → prompts → text features → posterior chain.
    pub fn forward(
        &self,
        patches: &Tensor,
        classes: &ClassEmbeddingTable,
        cfg: &ClassifierConfig,
    ) -> Result<ForwardPass> {
        let conditioned = condition(self.method, &self.params, patches, self.aggregation)?;
        let mut encodings = Vec::with_capacity(cfg.class_ids.len());
        let mut text = Vec::with_capacity(cfg.class_ids.len() * self.encoders.text.joint_dim());
        for &class_id in &cfg.class_ids {
            let tokens = assemble_prompt(conditioned.prompts(), classes.embedding(class_id)?)?;
            let enc = self.encoders.text.encode(&tokens)?;
            text.extend_from_slice(&enc.output);
            encodings.push(enc);
        }
        let text = Tensor::matrix(cfg.class_ids.len(), self.encoders.text.joint_dim(), text)?;
        let image = encode_image_global(patches, &self.encoders.image)?;
        let posterior = predict(&image, &text, cfg)?;
        Ok(ForwardPass {
            posterior,
            gamma: cfg.gamma,
            cache: Some(ForwardCache {
                conditioned,
                encodings,
                image,
                text,
            }),
        })
    }

    /// Predicted class id (not position) for one image.
    pub fn classify(&self, patches: &Tensor, classes: &ClassEmbeddingTable, cfg: &ClassifierConfig) -> Result<usize> {
        let pass = self.forward(patches, classes, cfg)?;
        Ok(cfg.class_ids[pass.posterior.argmax()])
    }

    /// Cross-entropy loss of one labelled image.
    pub fn loss(
        &self,
        patches: &Tensor,
        label: usize,
        classes: &ClassEmbeddingTable,
        cfg: &ClassifierConfig,
    ) -> Result<f64> {
        let target = cfg
            .position(label)
            .ok_or_else(|| Error::invalid(format!("label {label} outside the active label space")))?;
        let pass = self.forward(patches, classes, cfg)?;
        Ok(cross_entropy(&pass.posterior, target)?.loss)
    }
}

/// Gradient of `cos(x, g) ` with respect to `g`.
fn cosine_grad_wrt_second(x: &[f64], g: &[f64]) -> Vec<f64> {
    let nx = norm(x);
    let ng = norm(g);
    let c = dot(x, g) / (nx * ng);
    x.iter()
        .zip(g)
        .map(|(xi, gi)| xi / (nx * ng) - c * gi / (ng * ng))
        .collect()
}

/// Gradients of the cross-entropy at `target` for every learnable tensor.
///
/// Chains the loss through the cosine posterior, each class's text encoder,
/// the prompt/class-token split and the conditioner. The per-class prompt
/// gradients are summed because every class shares the conditioned prompts.
pub fn full_backward(model: &Model, pass: &ForwardPass, target: usize) -> Result<PromptParams> {
    let cache = pass.cache.as_ref().ok_or(Error::ForwardNotRun)?;
    let d_logits = cross_entropy_backward(&pass.posterior, target)?;
    let m = model.params.prompts.len();
    let d = model.params.prompts.token_dim();
    let mut d_prompts = Tensor::zeros(&[m, d]);
    for (k, enc) in cache.encodings.iter().enumerate() {
        let d_cos = d_logits[k] / pass.gamma;
        if d_cos == 0.0 {
            continue;
        }
        let mut d_text = cosine_grad_wrt_second(&cache.image, cache.text.row(k));
        d_text.iter_mut().for_each(|v| *v *= d_cos);
        let d_tokens = model.encoders.text.backward(enc, &d_text);
        for i in 0..m {
            crate::numerics::axpy(d_prompts.row_mut(i), 1.0, d_tokens.row(i));
        }
    }
    let mut grads = model.params.zeros_like();
    cache.conditioned.backward(&model.params, &d_prompts, &mut grads)?;
    Ok(grads)
}
