//! Accuracy metrics, the evaluation protocols and the results files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, Model, DEFAULT_GAMMA};
use crate::conditioners::{
    default_meta_hidden, Method, PatchAggregation, PromptDims, PromptParams, DEFAULT_PROMPT_LEN,
};
use crate::encoders::{ClassEmbeddingTable, FrozenEncoders};
use crate::error::{Error, Result};
use crate::synthdata::{sample_kshot, Dataset, Sample, Split};
use crate::trainer::{train, SgdConfig, TrainHistory};

/// Percentage of positions where `predictions` and `truth` agree.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyVector);
    }
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::invalid(format!("harmonic mean of {a} and {b}")));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    BaseToNew,
    CrossDataset,
    Incremental,
    AblationGlobalVsLocal,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::BaseToNew,
        Protocol::CrossDataset,
        Protocol::Incremental,
        Protocol::AblationGlobalVsLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::BaseToNew => "base_to_new",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::Incremental => "incremental",
            Protocol::AblationGlobalVsLocal => "ablation_global_vs_local",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Protocol::ALL.iter().map(|p| p.name()).collect();
            Error::invalid(format!("unknown protocol {s:?}; valid: {}", names.join(", ")))
        })
    }
}

/// One protocol run. Incremental rows carry the joint accuracy in
/// `seen_acc`; cross-dataset rows carry source accuracy in `seen_acc` and
/// target accuracy in `unseen_acc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub protocol: Protocol,
    pub method: Method,
    pub seed: u64,
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    pub hm: Option<f64>,
}

impl MetricRow {
    pub fn new(protocol: Protocol, method: Method, seed: u64, seen: Option<f64>, unseen: Option<f64>) -> Result<Self> {
        let hm = match (seen, unseen) {
            (Some(a), Some(b)) => Some(harmonic_mean(a, b)?),
            _ => None,
        };
        Ok(Self {
            protocol,
            method,
            seed,
            seen_acc: seen,
            unseen_acc: unseen,
            hm,
        })
    }

    pub fn key(&self) -> (Protocol, Method, u64) {
        (self.protocol, self.method, self.seed)
    }

    /// True when `hm` agrees with the harmonic mean of the other two fields.
    pub fn is_consistent(&self) -> bool {
        let in_range = |v: Option<f64>| v.is_none_or(|x| (0.0..=100.0).contains(&x));
        let hm_ok = match (self.seen_acc, self.unseen_acc, self.hm) {
            (Some(a), Some(b), Some(h)) => harmonic_mean(a, b).is_ok_and(|e| (e - h).abs() <= 1e-9),
            (Some(_), Some(_), None) => false,
            (_, _, h) => h.is_none(),
        };
        in_range(self.seen_acc) && in_range(self.unseen_acc) && hm_ok
    }
}

/// Model sizes and head settings shared by every run of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prompt_len: usize,
    pub token_dim: usize,
    pub joint_dim: usize,
    /// Defaults to `4 * joint_dim`.
    pub text_hidden: Option<usize>,
    /// Defaults to `max(token_dim / 16, 4)`.
    pub meta_hidden: Option<usize>,
    pub gamma: f64,
    pub patch_aggregation: PatchAggregation,
    pub shots: usize,
    pub sgd: SgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt_len: DEFAULT_PROMPT_LEN,
            token_dim: 16,
            joint_dim: 16,
            text_hidden: None,
            meta_hidden: None,
            gamma: DEFAULT_GAMMA,
            patch_aggregation: PatchAggregation::Sum,
            shots: 16,
            sgd: SgdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn text_hidden(&self) -> usize {
        self.text_hidden.unwrap_or(4 * self.joint_dim)
    }

    pub fn meta_hidden(&self) -> usize {
        self.meta_hidden.unwrap_or_else(|| default_meta_hidden(self.token_dim))
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.token_dim == 0 || self.joint_dim == 0 {
            return Err(Error::invalid("prompt_len, token_dim and joint_dim must be positive"));
        }
        if self.text_hidden() == 0 || self.meta_hidden() == 0 {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be positive"));
        }
        self.sgd.validate()
    }

    pub fn encoders(&self, image_dim: usize, seed: u64) -> FrozenEncoders {
        FrozenEncoders::new(
            seed,
            self.prompt_len,
            self.token_dim,
            image_dim,
            self.joint_dim,
            self.text_hidden(),
        )
    }

    /// Freshly initialized model; every method starts from the same tensors
    /// for a given seed.
    pub fn model(&self, method: Method, image_dim: usize, seed: u64) -> Model {
        let dims = PromptDims {
            prompt_len: self.prompt_len,
            token_dim: self.token_dim,
            image_dim,
            meta_hidden: self.meta_hidden(),
        };
        Model {
            method,
            params: PromptParams::init(dims, seed),
            encoders: self.encoders(image_dim, seed),
            aggregation: self.patch_aggregation,
        }
    }
}

/// A model trained on the base classes of a dataset.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub classes: ClassEmbeddingTable,
    pub train_indices: Vec<usize>,
    pub history: TrainHistory,
}

/// Trains `method` on `cfg.shots` samples per base class.
///
/// The run seed drives encoder weights, initialization, shot selection and
/// sample order.
pub fn train_base(method: Method, dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Trained> {
    cfg.validate()?;
    let mut model = cfg.model(method, dataset.image_dim, seed);
    let classes = model.encoders.class_table(&dataset.prototypes())?;
    let train_indices = sample_kshot(dataset, cfg.shots, seed)?;
    let samples: Vec<&Sample> = train_indices.iter().map(|&i| &dataset.samples[i]).collect();
    let clf = ClassifierConfig::new(cfg.gamma, dataset.ids_in(Split::Base))?;
    let sgd = SgdConfig {
        seed,
        ..cfg.sgd.clone()
    };
    let history = train(&mut model, &samples, &classes, &clf, &sgd)?;
    Ok(Trained {
        model,
        classes,
        train_indices,
        history,
    })
}

/// Accuracy of `model` on the samples at `indices`, predicting among
/// `class_ids` only.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    classes: &ClassEmbeddingTable,
    indices: &[usize],
    class_ids: Vec<usize>,
    gamma: f64,
) -> Result<f64> {
    let clf = ClassifierConfig::new(gamma, class_ids)?;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut truth = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        let predicted = model.classify(&s.patches, classes, &clf)?;
        if clf.position(predicted).is_none() {
            return Err(Error::invalid(format!(
                "prediction {predicted} outside the active label space"
            )));
        }
        predictions.push(predicted);
        truth.push(s.label);
    }
    accuracy(&predictions, &truth)
}

/// Test indices of `split` classes, excluding anything used for training.
fn test_indices(dataset: &Dataset, split: Split, exclude: &[usize]) -> Vec<usize> {
    let ids = dataset.ids_in(split);
    (0..dataset.samples.len())
        .filter(|i| ids.contains(&dataset.samples[*i].label) && exclude.binary_search(i).is_err())
        .collect()
}

fn seen_accuracy(trained: &Trained, dataset: &Dataset, gamma: f64) -> Result<f64> {
    let idx = test_indices(dataset, Split::Base, &trained.train_indices);
    evaluate(
        &trained.model,
        dataset,
        &trained.classes,
        &idx,
        dataset.ids_in(Split::Base),
        gamma,
    )
}

fn unseen_accuracy(trained: &Trained, dataset: &Dataset, gamma: f64) -> Result<f64> {
    let idx = test_indices(dataset, Split::New, &[]);
    evaluate(
        &trained.model,
        dataset,
        &trained.classes,
        &idx,
        dataset.ids_in(Split::New),
        gamma,
    )
}

fn require_both_splits(dataset: &Dataset) -> Result<()> {
    if dataset.ids_in(Split::Base).is_empty() || dataset.ids_in(Split::New).is_empty() {
        return Err(Error::invalid("dataset needs both base and new classes"));
    }
    Ok(())
}

/// Seen accuracy on held-out base samples (base label space) and unseen
/// accuracy on new-class samples (new label space).
pub fn run_base_to_new(method: Method, dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<MetricRow> {
    require_both_splits(dataset)?;
    let trained = train_base(method, dataset, cfg, seed)?;
    let seen = seen_accuracy(&trained, dataset, cfg.gamma)?;
    let unseen = unseen_accuracy(&trained, dataset, cfg.gamma)?;
    MetricRow::new(Protocol::BaseToNew, method, seed, Some(seen), Some(unseen))
}

/// Trains on the source base classes and classifies target base-class
/// samples among the target base classes, with target class embeddings from
/// the same frozen encoders. Target samples that `cfg.shots`-shot selection
/// would pick under the same seed are held out, so a target identical to the
/// source reproduces the seen evaluation.
pub fn run_cross_dataset(
    method: Method,
    source: &Dataset,
    target: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<MetricRow> {
    if source.image_dim != target.image_dim {
        return Err(Error::shape(format!(
            "source d_img {} but target d_img {}",
            source.image_dim, target.image_dim
        )));
    }
    let trained = train_base(method, source, cfg, seed)?;
    let seen = seen_accuracy(&trained, source, cfg.gamma)?;
    let target_classes = trained.model.encoders.class_table(&target.prototypes())?;
    let held_out = sample_kshot(target, cfg.shots, seed)?;
    let idx = test_indices(target, Split::Base, &held_out);
    let transfer = evaluate(
        &trained.model,
        target,
        &target_classes,
        &idx,
        target.ids_in(Split::Base),
        cfg.gamma,
    )?;
    MetricRow::new(Protocol::CrossDataset, method, seed, Some(seen), Some(transfer))
}

/// Joint accuracy over every held-out sample against all classes.
pub fn run_incremental(method: Method, dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<MetricRow> {
    let trained = train_base(method, dataset, cfg, seed)?;
    let idx: Vec<usize> = (0..dataset.samples.len())
        .filter(|i| trained.train_indices.binary_search(i).is_err())
        .collect();
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    let joint = evaluate(&trained.model, dataset, &trained.classes, &idx, all, cfg.gamma)?;
    MetricRow::new(Protocol::Incremental, method, seed, Some(joint), None)
}

/// CoPL on per-patch features against CoPL on copies of the mean patch.
pub fn run_ablation_global_vs_local(dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<[MetricRow; 2]> {
    let run = |method| -> Result<MetricRow> {
        let row = run_base_to_new(method, dataset, cfg, seed)?;
        Ok(MetricRow {
            protocol: Protocol::AblationGlobalVsLocal,
            ..row
        })
    };
    Ok([run(Method::Copl)?, run(Method::CoplGlobal)?])
}

pub const RESULTS_HEADER: [&str; 6] = ["protocol", "method", "seed", "seen_acc", "unseen_acc", "hm"];

fn fmt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Results keyed by `(protocol, method, seed)`; later rows replace earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultSet {
    rows: BTreeMap<(Protocol, Method, u64), MetricRow>,
}

impl ResultSet {
    pub fn insert(&mut self, row: MetricRow) {
        self.rows.insert(row.key(), row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RESULTS_HEADER).map_err(csv_err)?;
        for r in self.rows() {
            w.write_record([
                r.protocol.name().to_string(),
                r.method.name().to_string(),
                r.seed.to_string(),
                fmt2(r.seen_acc),
                fmt2(r.unseen_acc),
                fmt2(r.hm),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(RESULTS_HEADER) {
            return Err(Error::invalid("results file has an unexpected header"));
        }
        let mut set = Self::default();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let opt = |i: usize| -> Result<Option<f64>> {
                let s = rec.get(i).unwrap_or("");
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("bad number {s:?} in results")))
            };
            let seed = rec
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::invalid("bad seed in results"))?;
            set.insert(MetricRow {
                protocol: rec.get(0).unwrap_or("").parse()?,
                method: rec.get(1).unwrap_or("").parse()?,
                seed,
                seen_acc: opt(3)?,
                unseen_acc: opt(4)?,
                hm: opt(5)?,
            });
        }
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<&MetricRow> = self.rows().collect();
        serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<MetricRow> =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("results json: {e}")))?;
        let mut set = Self::default();
        rows.into_iter().for_each(|r| set.insert(r));
        Ok(set)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Path of the full-precision mirror next to a results CSV.
pub fn json_mirror(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Merges `rows` into the results at `csv_path` and its JSON mirror.
///
/// Existing rows are read from the mirror when present (full precision),
/// otherwise from the CSV. Rows with a matching key are replaced.
pub fn merge_results(csv_path: &Path, rows: impl IntoIterator<Item = MetricRow>) -> Result<ResultSet> {
    let json_path = json_mirror(csv_path);
    let mut set = if json_path.exists() {
        ResultSet::from_json(&std::fs::read_to_string(&json_path)?)?
    } else if csv_path.exists() {
        ResultSet::from_csv(&std::fs::read_to_string(csv_path)?)?
    } else {
        ResultSet::default()
    };
    rows.into_iter().for_each(|r| set.insert(r));
    std::fs::write(csv_path, set.to_csv()?)?;
    std::fs::write(&json_path, set.to_json())?;
    Ok(set)
}
