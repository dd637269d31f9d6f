//! Frozen stand-ins for the pretrained text and image towers.
//!
//! Every weight here is a pure function of a seed and the layer sizes. Nothing
//! in this module is ever updated by training; gradients only pass through.

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, Rng, Tensor};

const SALT_TEXT: u64 = 0x7465_7874;
const SALT_CLASS_PROJ: u64 = 0x636c_7072;
const SALT_CLASS_NOISE: u64 = 0x636c_6e7a;
const SALT_GLOBAL: u64 = 0x676c_6f62;

/// Standard deviation of the per-class noise added to projected prototypes.
pub const CLASS_NOISE_SIGMA: f64 = 0.1;

fn fan_in_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    sample_gaussian(rng, &[rows, cols], 0.0, 1.0 / (cols as f64).sqrt()).expect("finite init")
}

fn bias_init(rng: &mut Rng, len: usize, fan_in: usize) -> Tensor {
    sample_gaussian(rng, &[len], 0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite init")
}

/// Two-layer tanh map from an `(M+1) × d` token matrix to the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderStub {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    prompt_len: usize,
    token_dim: usize,
    seed: u64,
}

/// Forward activations of one `encode_text` call.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub output: Vec<f64>,
    hidden: Vec<f64>,
}

impl TextEncoderStub {
    pub fn new(seed: u64, prompt_len: usize, token_dim: usize, hidden: usize, joint_dim: usize) -> Self {
        let mut rng = Rng::derived(seed, SALT_TEXT);
        let input = (prompt_len + 1) * token_dim;
        let w1 = fan_in_init(&mut rng, hidden, input);
        let b1 = bias_init(&mut rng, hidden, input);
        let w2 = fan_in_init(&mut rng, joint_dim, hidden);
        let b2 = bias_init(&mut rng, joint_dim, hidden);
        Self {
            w1,
            b1,
            w2,
            b2,
            prompt_len,
            token_dim,
            seed,
        }
    }

    /// Builds a stub from explicit weights.
    pub fn from_weights(
        prompt_len: usize,
        token_dim: usize,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Result<Self> {
        let input = (prompt_len + 1) * token_dim;
        let hidden = b1.len();
        if w1.shape() != [hidden, input] || w2.shape() != [b2.len(), hidden] {
            return Err(Error::shape("text encoder weights inconsistent"));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            prompt_len,
            token_dim,
            seed: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn joint_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// `g(t) = W2 · tanh(W1 · vec(t) + b1) + b2`.
    pub fn encode(&self, tokens: &Tensor) -> Result<TextEncoding> {
        if tokens.rows() != self.prompt_len + 1 {
            return Err(Error::PromptLengthMismatch {
                expected: self.prompt_len + 1,
                actual: tokens.rows(),
            });
        }
        if tokens.cols() != self.token_dim {
            return Err(Error::shape(format!(
                "token width {} != {}",
                tokens.cols(),
                self.token_dim
            )));
        }
        let mut hidden = self.w1.matvec(tokens.data());
        for (h, b) in hidden.iter_mut().zip(self.b1.data()) {
            *h = (*h + b).tanh();
        }
        let mut output = self.w2.matvec(&hidden);
        for (o, b) in output.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        Ok(TextEncoding { output, hidden })
    }

    /// Gradient of `upstream · g(t)` with respect to the token matrix.
    pub fn backward(&self, enc: &TextEncoding, upstream: &[f64]) -> Tensor {
        let mut dz = self.w2.matvec_t(upstream);
        for (d, h) in dz.iter_mut().zip(&enc.hidden) {
            *d *= 1.0 - h * h;
        }
        let flat = self.w1.matvec_t(&dz);
        Tensor::matrix(self.prompt_len + 1, self.token_dim, flat).expect("finite gradient")
    }
}

/// Frozen class-name tokens, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    embeddings: Tensor,
}

fn prototype_hash(prototype: &[f64]) -> u64 {
    prototype.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl ClassEmbeddingTable {
    /// Projects each prototype with a seeded frozen matrix and adds seeded
    /// noise whose stream depends only on `(seed, prototype)`.
    pub fn from_prototypes(seed: u64, prototypes: &Tensor, token_dim: usize) -> Result<Self> {
        let mut rng = Rng::derived(seed, SALT_CLASS_PROJ);
        let projection = fan_in_init(&mut rng, token_dim, prototypes.cols());
        Self::project(seed, &projection, prototypes)
    }

    /// `projection · μ_c` plus noise seeded by `(seed, μ_c)`.
    pub fn project(seed: u64, projection: &Tensor, prototypes: &Tensor) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(Error::invalid("no class prototypes"));
        }
        if projection.cols() != prototypes.cols() {
            return Err(Error::shape("projection width differs from prototype width"));
        }
        let token_dim = projection.rows();
        let mut data = Vec::with_capacity(prototypes.rows() * token_dim);
        for proto in prototypes.iter_rows() {
            let mut row = projection.matvec(proto);
            let mut noise = Rng::derived(seed ^ prototype_hash(proto), SALT_CLASS_NOISE);
            for v in row.iter_mut() {
                *v += CLASS_NOISE_SIGMA * noise.gaussian();
            }
            data.extend(row);
        }
        Ok(Self {
            embeddings: Tensor::matrix(prototypes.rows(), token_dim, data)?,
        })
    }

    pub fn from_embeddings(embeddings: Tensor) -> Self {
        Self { embeddings }
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embedding(&self, class_id: usize) -> Result<&[f64]> {
        if class_id >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                id: class_id,
                count: self.num_classes(),
            });
        }
        Ok(self.embeddings.row(class_id))
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}

/// Linear map from the mean patch feature to the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalProjector {
    wg: Tensor,
}

impl GlobalProjector {
    pub fn new(seed: u64, image_dim: usize, joint_dim: usize) -> Self {
        let mut rng = Rng::derived(seed, SALT_GLOBAL);
        Self {
            wg: fan_in_init(&mut rng, joint_dim, image_dim),
        }
    }

    pub fn from_matrix(wg: Tensor) -> Self {
        Self { wg }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.wg
    }

    pub fn image_dim(&self) -> usize {
        self.wg.cols()
    }
}

/// `x = Wg · mean_p(patches_p)`.
pub fn encode_image_global(patches: &Tensor, proj: &GlobalProjector) -> Result<Vec<f64>> {
    if patches.rows() == 0 {
        return Err(Error::NoPatches);
    }
    if patches.cols() != proj.image_dim() {
        return Err(Error::shape(format!(
            "patch width {} != projector input {}",
            patches.cols(),
            proj.image_dim()
        )));
    }
    Ok(proj.wg.matvec(&patches.mean_rows()))
}

/// The frozen towers shared by every method.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders {
    pub text: TextEncoderStub,
    pub image: GlobalProjector,
    pub seed: u64,
}

impl FrozenEncoders {
    pub fn new(
        seed: u64,
        prompt_len: usize,
        token_dim: usize,
        image_dim: usize,
        joint_dim: usize,
        text_hidden: usize,
    ) -> Self {
        Self {
            text: TextEncoderStub::new(seed, prompt_len, token_dim, text_hidden, joint_dim),
            image: GlobalProjector::new(seed, image_dim, joint_dim),
            seed,
        }
    }

    /// Class tokens under which the two towers agree to first order: the
    /// text feature of an all-zero prompt plus class token `P μ_c` moves by
    /// approximately `Wg μ_c`, the image feature of the prototype itself.
    /// This stands in for the image/text alignment a pretrained pair has.
    pub fn class_table(&self, prototypes: &Tensor) -> Result<ClassEmbeddingTable> {
        ClassEmbeddingTable::project(self.seed, &self.aligned_projection(), prototypes)
    }

    /// Least-squares `P` with `J · P ≈ Wg`, where `J` is the Jacobian of the
    /// text tower with respect to the class token at the all-zero input.
    pub fn aligned_projection(&self) -> Tensor {
        let text = &self.text;
        let (m, d, h) = (text.prompt_len(), text.token_dim(), text.hidden_dim());
        let [w1, b1, w2, _] = text.weights();
        let j = nalgebra::DMatrix::from_fn(text.joint_dim(), d, |r, c| {
            (0..h)
                .map(|k| w2.row(r)[k] * (1.0 - b1.data()[k].tanh().powi(2)) * w1.row(k)[m * d + c])
                .sum()
        });
        let wg = self.image.matrix();
        let wg = nalgebra::DMatrix::from_row_slice(wg.rows(), wg.cols(), wg.data());
        let p = j.svd(true, true).solve(&wg, 1e-12).expect("svd has both factors");
        let data = (0..p.nrows())
            .flat_map(|r| (0..p.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| p[(r, c)])
            .collect();
        Tensor::matrix(p.nrows(), p.ncols(), data).expect("finite projection")
    }
}
