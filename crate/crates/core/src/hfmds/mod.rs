//! Hard-feature-matching data synthesis.
//!
//! Synthetic inputs are optimised so that their features match CAM-masked
//! targets derived from paired real samples. With a class prototype
//! available, the target is the real feature pushed away from the prototype
//! ("hard feature"); with `mu = 0` the target is the real feature itself.

mod dump;
mod mixup;
mod synth;

pub use dump::{inspect_dump, parse_dump_csv, write_dump, DumpMeta, DumpRow, InspectReport, SampleReport};
pub use mixup::mixup_generate;
pub use synth::{synthesize, SynthesisConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_input, BoundModel, Graph, Labels, Model, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticLabel {
    Hard(usize),
    /// Probability over classes.
    Soft(Vec<f64>),
}

impl SyntheticLabel {
    /// Dominant class, lowest index on ties.
    pub fn class(&self) -> usize {
        match self {
            SyntheticLabel::Hard(c) => *c,
            SyntheticLabel::Soft(p) => p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub input: Vec<f64>,
    pub label: SyntheticLabel,
    pub client: usize,
    pub round: usize,
    /// Row of the paired real sample in the client's shard.
    pub paired_index: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<SyntheticSample>,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Producing client; `None` for a server-side union.
    pub client: Option<usize>,
    pub round: usize,
    pub model_fingerprint: String,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Server-side concatenation in the given (client) order.
    pub fn concat(parts: &[SyntheticDataset]) -> SyntheticDataset {
        let first = parts.first();
        SyntheticDataset {
            samples: parts.iter().flat_map(|p| p.samples.iter().cloned()).collect(),
            input_dim: first.map_or(0, |p| p.input_dim),
            feature_dim: first.map_or(0, |p| p.feature_dim),
            classes: first.map_or(0, |p| p.classes),
            client: None,
            round: first.map_or(0, |p| p.round),
            model_fingerprint: first.map(|p| p.model_fingerprint.clone()).unwrap_or_default(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].input);
        }
        Tensor::new(vec![idx.len(), self.input_dim], data)
    }

    /// Hard labels when every selected sample is hard, otherwise dense soft rows.
    pub fn labels(&self, idx: &[usize]) -> Labels {
        if idx.iter().all(|&i| matches!(self.samples[i].label, SyntheticLabel::Hard(_))) {
            return Labels::Hard(idx.iter().map(|&i| self.samples[i].label.class()).collect());
        }
        let mut probs = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            match &self.samples[i].label {
                SyntheticLabel::Hard(c) => {
                    probs.extend((0..self.classes).map(|k| if k == *c { 1.0 } else { 0.0 }))
                }
                SyntheticLabel::Soft(p) => probs.extend_from_slice(p),
            }
        }
        Labels::Soft {
            classes: self.classes,
            probs,
        }
    }
}

/// Per-class momentum-smoothed feature means; `None` until a class is seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    slots: Vec<Option<Vec<f64>>>,
}

impl Prototypes {
    pub fn empty(classes: usize) -> Self {
        Prototypes {
            slots: vec![None; classes],
        }
    }

    pub fn from_slots(slots: Vec<Option<Vec<f64>>>) -> Self {
        Prototypes { slots }
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.slots.get(class).and_then(|s| s.as_deref())
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn present(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Running per-class feature sums for one round of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAccumulator {
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl FeatureAccumulator {
    pub fn new(classes: usize, feature_dim: usize) -> Self {
        FeatureAccumulator {
            sums: vec![vec![0.0; feature_dim]; classes],
            counts: vec![0; classes],
        }
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| s.fill(0.0));
        self.counts.fill(0);
    }

    /// Adds each feature row to its label's running sum.
    pub fn add(&mut self, features: &[f64], labels: &[usize]) {
        let width = self.sums.first().map_or(0, Vec::len);
        for (row, &y) in features.chunks(width.max(1)).zip(labels) {
            for (s, v) in self.sums[y].iter_mut().zip(row) {
                *s += v;
            }
            self.counts[y] += 1;
        }
    }

    pub fn mean(&self, class: usize) -> Option<Vec<f64>> {
        let n = self.counts[class];
        (n > 0).then(|| self.sums[class].iter().map(|s| s / n as f64).collect())
    }
}

/// Epoch-momentum prototype update: `(1 - lambda) * mean + lambda * previous`,
/// or the plain mean the first time a class is observed. Unobserved classes
/// keep their previous prototype.
pub fn update_prototypes(acc: &FeatureAccumulator, previous: &Prototypes, lambda: f64) -> Prototypes {
    let slots = (0..acc.counts.len())
        .map(|c| match (acc.mean(c), previous.get(c)) {
            (Some(mean), Some(prev)) => Some(
                mean.iter()
                    .zip(prev)
                    .map(|(m, p)| (1.0 - lambda) * m + lambda * p)
                    .collect(),
            ),
            (Some(mean), None) => Some(mean),
            (None, prev) => prev.map(<[f64]>::to_vec),
        })
        .collect();
    Prototypes { slots }
}

/// `(1 + mu) * z - mu * prototype`.
pub fn hard_feature(z: &[f64], prototype: &[f64], mu: f64) -> Result<Vec<f64>> {
    if z.len() != prototype.len() {
        return Err(Error::dim("hard_feature", format!("{} vs {}", z.len(), prototype.len())));
    }
    Ok(z.iter()
        .zip(prototype)
        .map(|(&zi, &pi)| (1.0 + mu) * zi - mu * pi)
        .collect())
}

/// Row-wise `d logit[y_i] / d z_i` through the classifier head, for a
/// detached `(rows, feature_dim)` feature matrix.
pub fn cam_rows(model: &Model, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, width) = z.dims2()?;
    if labels.len() != rows {
        return Err(Error::dim("compute_cam", format!("{} labels for {rows} rows", labels.len())));
    }
    let classes = model.classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("class {y} out of range for {classes} classes")));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let zv = g.variable(&Tensor::new(vec![rows, width], z.data().to_vec())?);
    let q = model.classify(&mut g, &bound, zv)?;
    let mut pick = vec![0.0; rows * classes];
    for (i, &y) in labels.iter().enumerate() {
        pick[i * classes + y] = 1.0;
    }
    let picked = g.mul_const(q, &pick)?;
    let total = g.sum(picked);
    backward_input(&g, total, zv)
}

/// Class activation gradient `d logit[y] / d z` for one feature vector.
pub fn compute_cam(model: &Model, z: &[f64], y: usize) -> Result<Vec<f64>> {
    let t = Tensor::row_vector(z.to_vec())?;
    Ok(cam_rows(model, &t, &[y])?.into_data())
}

fn relu_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Fixed per-row targets of the feature-matching term.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTargets {
    /// ReLU of the CAM at the target feature, `(rows, width)`.
    pub mask: Vec<f64>,
    /// Softmax of the masked target feature, `(rows, width)`.
    pub target_probs: Vec<f64>,
    /// `sum_i b_i ln(b_i + eps)` per row.
    pub entropy_terms: Vec<f64>,
    pub width: usize,
    pub eps: f64,
}

impl MatchTargets {
    /// `target` and `cam` are `(rows, width)` row-major buffers.
    pub fn new(target: &[f64], cam: &[f64], width: usize, eps: f64) -> Result<Self> {
        if target.len() != cam.len() || width == 0 || !target.len().is_multiple_of(width) {
            return Err(Error::dim("masked_kl", format!("{} target vs {} cam values", target.len(), cam.len())));
        }
        if !(eps > 0.0) {
            return Err(Error::config("kl_eps", "must be positive"));
        }
        let mask = relu_vec(cam);
        let mut target_probs = Vec::with_capacity(target.len());
        let mut entropy_terms = Vec::new();
        for (row, (t, m)) in target.chunks(width).zip(mask.chunks(width)).enumerate() {
            if m.iter().all(|&v| v == 0.0) {
                log::warn!("row {row}: CAM mask is all zero, no class-relevant features to match");
            }
            let masked: Vec<f64> = t.iter().zip(m).map(|(a, b)| a * b).collect();
            let b = softmax(&masked);
            entropy_terms.push(b.iter().map(|&bi| bi * (bi + eps).ln()).sum());
            target_probs.extend(b);
        }
        Ok(MatchTargets {
            mask,
            target_probs,
            entropy_terms,
            width,
            eps,
        })
    }

    pub fn rows(&self) -> usize {
        self.entropy_terms.len()
    }

    /// Per-row `KL(softmax(target*mask) || softmax(zhat*mask))`, a `(rows,)` node.
    pub fn kl_rows(&self, g: &mut Graph, zhat: Var) -> Result<Var> {
        if g.shape(zhat) != [self.rows(), self.width] {
            return Err(Error::dim(
                "masked_kl",
                format!("features {:?} vs targets ({}, {})", g.shape(zhat), self.rows(), self.width),
            ));
        }
        let masked = g.mul_const(zhat, &self.mask)?;
        let probs = g.softmax_rows(masked)?;
        let logp = g.ln_eps(probs, self.eps);
        let weighted = g.mul_const(logp, &self.target_probs)?;
        let cross = g.row_sum(weighted)?;
        let neg = g.scale(cross, -1.0);
        g.add_const(neg, &self.entropy_terms)
    }
}

/// Masked softmax-KL between one synthetic feature row and its target,
/// as a scalar node. The mask is `ReLU(cam)`.
pub fn masked_kl(g: &mut Graph, zhat: Var, target: &[f64], cam: &[f64], eps: f64) -> Result<Var> {
    let t = MatchTargets::new(target, cam, target.len(), eps)?;
    let rows = t.kl_rows(g, zhat)?;
    Ok(g.sum(rows))
}

/// Everything the synthesis objective needs from the real side of each pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisTargets {
    pub labels: Vec<usize>,
    /// Feature-matching targets (hard features where a prototype exists).
    pub features: Vec<f64>,
    pub matching: MatchTargets,
}

impl SynthesisTargets {
    /// Real features are computed without gradient tracking; rows whose class
    /// has no prototype match the plain real feature.
    pub fn new(
        model: &Model,
        real: &Tensor,
        labels: &[usize],
        prototypes: &Prototypes,
        mu: f64,
        eps: f64,
    ) -> Result<Self> {
        let z = model.features(real)?;
        let width = model.feature_dim();
        let mut features = Vec::with_capacity(z.numel());
        for (row, &y) in z.rows().zip(labels) {
            match prototypes.get(y) {
                Some(p) => features.extend(hard_feature(row, p, mu)?),
                None => features.extend_from_slice(row),
            }
        }
        let target = Tensor::new(vec![labels.len(), width], features)?;
        let cam = cam_rows(model, &target, labels)?;
        let matching = MatchTargets::new(target.data(), cam.data(), width, eps)?;
        Ok(SynthesisTargets {
            labels: labels.to_vec(),
            features: target.into_data(),
            matching,
        })
    }

    /// Per-row `L_HFM + L_C` for the synthetic batch `xhat`.
    pub fn loss_rows(&self, g: &mut Graph, model: &Model, bound: &BoundModel, xhat: Var) -> Result<Var> {
        let (zhat, logits) = model.forward_graph(g, bound, xhat)?;
        let kl = self.matching.kl_rows(g, zhat)?;
        let ce = g.cross_entropy_rows(logits, &Labels::Hard(self.labels.clone()))?;
        g.add(kl, ce)
    }
}

/// Scalar synthesis objective for one synthetic/real pair.
#[allow(clippy::too_many_arguments)]
pub fn hfmds_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    xhat: Var,
    real: &[f64],
    label: usize,
    prototype: Option<&[f64]>,
    mu: f64,
    eps: f64,
) -> Result<Var> {
    if g.shape(xhat) != [1, real.len()] {
        return Err(Error::dim("hfmds_loss", format!("synthetic {:?} vs real width {}", g.shape(xhat), real.len())));
    }
    let mut protos = Prototypes::empty(model.classes());
    if let Some(p) = prototype {
        if label < protos.classes() {
            protos.slots[label] = Some(p.to_vec());
        }
    }
    let targets = SynthesisTargets::new(model, &Tensor::row_vector(real.to_vec())?, &[label], &protos, mu, eps)?;
    let rows = targets.loss_rows(g, model, bound, xhat)?;
    Ok(g.sum(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Architecture, Layer};
    use crate::seed::stream;

    fn linear_head(w_rows: &[[f64; 3]; 2]) -> Model {
        // classifier weight is (in=3, out=2): column y is logit y's row
        let arch = Architecture {
            extractor: vec![Layer::Dense { input: 3, output: 3 }],
            classifier: vec![Layer::Dense { input: 3, output: 2 }],
        };
        let mut ident = vec![0.0; 9];
        for i in 0..3 {
            ident[i * 4] = 1.0;
        }
        let mut w = vec![0.0; 6];
        for (y, row) in w_rows.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                w[i * 2 + y] = v;
            }
        }
        Model::from_tensors(
            arch,
            vec![Tensor::new(vec![3, 3], ident).unwrap(), Tensor::zeros(vec![3])],
            vec![Tensor::new(vec![3, 2], w).unwrap(), Tensor::new(vec![2], vec![0.3, -0.1]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn cam_of_linear_head_is_weight_row() {
        let m = linear_head(&[[1.0, -2.0, 0.0], [0.0, 3.0, 1.0]]);
        assert_eq!(compute_cam(&m, &[0.4, -1.0, 2.0], 1).unwrap(), vec![0.0, 3.0, 1.0]);
        let g0 = compute_cam(&m, &[0.4, -1.0, 2.0], 0).unwrap();
        assert_eq!(g0, vec![1.0, -2.0, 0.0]);
        assert_eq!(relu_vec(&g0), vec![1.0, 0.0, 0.0]);
        assert!(matches!(compute_cam(&m, &[0.0; 3], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn prototype_momentum() {
        let mut acc = FeatureAccumulator::new(2, 2);
        acc.add(&[2.0, 2.0], &[0]);
        let prev = Prototypes::from_slots(vec![Some(vec![0.0, 0.0]), Some(vec![5.0, 5.0])]);
        let next = update_prototypes(&acc, &prev, 0.5);
        assert_eq!(next.get(0), Some(&[1.0, 1.0][..]));
        // class 1 unobserved keeps its prototype
        assert_eq!(next.get(1), Some(&[5.0, 5.0][..]));
        assert_eq!(update_prototypes(&acc, &prev, 1.0).get(0), Some(&[0.0, 0.0][..]));
        assert_eq!(update_prototypes(&acc, &prev, 0.0).get(0), Some(&[2.0, 2.0][..]));
        // first observation takes the mean regardless of lambda
        let fresh = update_prototypes(&acc, &Prototypes::empty(2), 0.5);
        assert_eq!(fresh.get(0), Some(&[2.0, 2.0][..]));
        assert_eq!(fresh.get(1), None);
    }

    #[test]
    fn accumulator_mean_and_clear() {
        let mut acc = FeatureAccumulator::new(2, 2);
        acc.add(&[1.0, 2.0, 3.0, 4.0, 10.0, 10.0], &[0, 0, 1]);
        assert_eq!(acc.mean(0), Some(vec![2.0, 3.0]));
        assert_eq!(acc.counts, vec![2, 1]);
        acc.clear();
        assert_eq!(acc.mean(0), None);
    }

    #[test]
    fn hard_feature_cases() {
        assert_eq!(hard_feature(&[1.0, 0.0], &[0.0, 0.0], 0.5).unwrap(), vec![1.5, 0.0]);
        assert_eq!(hard_feature(&[0.3, -7.0], &[9.0, 1.0], 0.0).unwrap(), vec![0.3, -7.0]);
        assert_eq!(hard_feature(&[2.0, 2.0], &[1.0, 1.0], 1.0).unwrap(), vec![3.0, 3.0]);
        assert!(hard_feature(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn masked_kl_hand_value() {
        let mut g = Graph::new();
        let zhat = g.variable(&Tensor::row_vector(vec![0.0, 0.0]).unwrap());
        let loss = masked_kl(&mut g, zhat, &[3f64.ln(), 0.0], &[1.0, 1.0], 1e-8).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((g.value(loss)[0] - expected).abs() < 1e-7);
        assert!((g.value(loss)[0] - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn masked_kl_zero_mask_is_zero() {
        let mut g = Graph::new();
        let zhat = g.variable(&Tensor::row_vector(vec![0.4, -2.0, 1.0]).unwrap());
        let loss = masked_kl(&mut g, zhat, &[5.0, 1.0, -1.0], &[-1.0, 0.0, -3.0], 1e-8).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
        let grad = backward_input(&g, loss, zhat).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hfmds_mu_zero_matches_fm_path() {
        let arch = Architecture::mlp(4, &[5], 3, 3);
        let model = Model::init(arch, &mut stream(3)).unwrap();
        let real = [0.2, 0.9, 0.4, 0.1];
        let proto = [0.7, 0.1, 0.3];
        let xhat_t = Tensor::row_vector(vec![0.5, 0.5, 0.1, 0.8]).unwrap();
        let eval = |p: Option<&[f64]>| {
            let mut g = Graph::new();
            let b = model.bind(&mut g, false);
            let x = g.variable(&xhat_t);
            let l = hfmds_loss(&mut g, &model, &b, x, &real, 1, p, 0.0, 1e-8).unwrap();
            g.value(l)[0]
        };
        assert_eq!(eval(Some(&proto)).to_bits(), eval(None).to_bits());
    }

    #[test]
    fn hfmds_identical_input_reduces_to_classification() {
        let arch = Architecture::mlp(4, &[5], 3, 3);
        let model = Model::init(arch, &mut stream(4)).unwrap();
        let real = vec![0.2, 0.9, 0.4, 0.1];
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let x = g.variable(&Tensor::row_vector(real.clone()).unwrap());
        let l = hfmds_loss(&mut g, &model, &b, x, &real, 2, None, 0.0, 1e-8).unwrap();
        let mut g2 = Graph::new();
        let b2 = model.bind(&mut g2, false);
        let x2 = g2.constant(&Tensor::row_vector(real).unwrap());
        let (_, q) = model.forward_graph(&mut g2, &b2, x2).unwrap();
        let ce = g2.softmax_cross_entropy(q, &Labels::Hard(vec![2])).unwrap();
        assert!((g.value(l)[0] - g2.value(ce)[0]).abs() < 1e-15);
    }

    #[test]
    fn soft_label_class_is_argmax() {
        assert_eq!(SyntheticLabel::Soft(vec![0.5, 0.5, 0.0]).class(), 0);
        assert_eq!(SyntheticLabel::Soft(vec![0.0, 0.5, 0.5]).class(), 1);
        assert_eq!(SyntheticLabel::Hard(4).class(), 4);
    }
}
