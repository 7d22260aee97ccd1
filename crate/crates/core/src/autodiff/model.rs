use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{matmul, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Dense { input: usize, output: usize },
    Relu,
}

/// Layer stacks for the feature extractor and the classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub extractor: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

fn stack_widths(layers: &[Layer], what: &str) -> Result<Option<(usize, usize)>> {
    let mut io: Option<(usize, usize)> = None;
    for layer in layers {
        if let Layer::Dense { input, output } = *layer {
            if input == 0 || output == 0 {
                return Err(Error::config("model", format!("{what} has a zero-width dense layer")));
            }
            io = match io {
                None => Some((input, output)),
                Some((first, prev)) if prev == input => Some((first, output)),
                Some((_, prev)) => {
                    return Err(Error::config(
                        "model",
                        format!("{what}: dense({input}, {output}) follows a layer of width {prev}"),
                    ))
                }
            };
        }
    }
    Ok(io)
}

impl Architecture {
    /// `input -> hidden.. -> feature_dim` dense+relu extractor and a single
    /// dense classifier on top of the features.
    pub fn mlp(input: usize, hidden: &[usize], feature_dim: usize, classes: usize) -> Self {
        let mut extractor = Vec::new();
        let mut prev = input;
        for &w in hidden.iter().chain(std::iter::once(&feature_dim)) {
            extractor.push(Layer::Dense { input: prev, output: w });
            extractor.push(Layer::Relu);
            prev = w;
        }
        Architecture {
            extractor,
            classifier: vec![Layer::Dense {
                input: feature_dim,
                output: classes,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ext = stack_widths(&self.extractor, "extractor")?
            .ok_or_else(|| Error::config("model", "extractor has no dense layer"))?;
        let cls = stack_widths(&self.classifier, "classifier")?
            .ok_or_else(|| Error::config("model", "classifier has no dense layer"))?;
        if ext.1 != cls.0 {
            return Err(Error::config(
                "model",
                format!("extractor emits width {} but classifier expects {}", ext.1, cls.0),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        stack_widths(&self.extractor, "").ok().flatten().map_or(0, |w| w.0)
    }

    pub fn feature_dim(&self) -> usize {
        stack_widths(&self.extractor, "").ok().flatten().map_or(0, |w| w.1)
    }

    pub fn classes(&self) -> usize {
        stack_widths(&self.classifier, "").ok().flatten().map_or(0, |w| w.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Value-semantic parameter set split into extractor and classifier halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    pub extractor_params: Vec<Param>,
    pub classifier_params: Vec<Param>,
}

/// Parameter nodes of a model inserted into a particular graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub extractor: Vec<Var>,
    pub classifier: Vec<Var>,
}

fn init_stack<R: Rng + ?Sized>(layers: &[Layer], prefix: &str, rng: &mut R) -> Vec<Param> {
    let mut params = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        if let Layer::Dense { input, output } = *layer {
            let bound = (1.0 / input as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
            let w = draw(input * output);
            let b = draw(output);
            params.push(Param {
                name: format!("{prefix}.{i}.weight"),
                tensor: Tensor::new(vec![input, output], w).expect("dense weight shape").with_grad(),
            });
            params.push(Param {
                name: format!("{prefix}.{i}.bias"),
                tensor: Tensor::new(vec![output], b).expect("dense bias shape").with_grad(),
            });
        }
    }
    params
}

fn plain_stack(layers: &[Layer], params: &[Param], x: Vec<f64>, rows: usize) -> Vec<f64> {
    let mut h = x;
    let mut p = params.iter();
    for layer in layers {
        match *layer {
            Layer::Dense { input, output } => {
                let w = p.next().expect("weight").tensor.data();
                let b = p.next().expect("bias").tensor.data();
                let mut out = matmul(&h, w, rows, input, output);
                for row in out.chunks_mut(output) {
                    for (o, &bv) in row.iter_mut().zip(b) {
                        *o += bv;
                    }
                }
                h = out;
            }
            Layer::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }
    h
}

fn graph_stack(g: &mut Graph, layers: &[Layer], params: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    let mut p = params.iter();
    for layer in layers {
        match layer {
            Layer::Dense { .. } => {
                let w = *p.next().expect("weight");
                let b = *p.next().expect("bias");
                let z = g.matmul(h, w)?;
                h = g.add_bias(z, b)?;
            }
            Layer::Relu => h = g.relu(h),
        }
    }
    Ok(h)
}

impl Model {
    /// Uniform `±sqrt(1/fan_in)` initialisation of every dense layer.
    pub fn init<R: Rng + ?Sized>(architecture: Architecture, rng: &mut R) -> Result<Self> {
        architecture.validate()?;
        let extractor_params = init_stack(&architecture.extractor, "extractor", rng);
        let classifier_params = init_stack(&architecture.classifier, "classifier", rng);
        Ok(Model {
            architecture,
            extractor_params,
            classifier_params,
        })
    }

    /// Builds a model from explicit parameter tensors, in layer order
    /// (weight `(in, out)` then bias `(out)` for each dense layer).
    pub fn from_tensors(
        architecture: Architecture,
        extractor: Vec<Tensor>,
        classifier: Vec<Tensor>,
    ) -> Result<Self> {
        architecture.validate()?;
        let name = |layers: &[Layer], prefix: &str, tensors: Vec<Tensor>| -> Result<Vec<Param>> {
            let mut out = Vec::new();
            let mut it = tensors.into_iter();
            for (i, layer) in layers.iter().enumerate() {
                if let Layer::Dense { input, output } = *layer {
                    for (suffix, shape) in [("weight", vec![input, output]), ("bias", vec![output])] {
                        let t = it
                            .next()
                            .ok_or_else(|| Error::contract(format!("missing {prefix}.{i}.{suffix}")))?;
                        if t.shape() != shape.as_slice() {
                            return Err(Error::dim(
                                "from_tensors",
                                format!("{prefix}.{i}.{suffix}: {:?} != {shape:?}", t.shape()),
                            ));
                        }
                        out.push(Param {
                            name: format!("{prefix}.{i}.{suffix}"),
                            tensor: t.with_grad(),
                        });
                    }
                }
            }
            if it.next().is_some() {
                return Err(Error::contract(format!("too many {prefix} tensors")));
            }
            Ok(out)
        };
        Ok(Model {
            extractor_params: name(&architecture.extractor, "extractor", extractor)?,
            classifier_params: name(&architecture.classifier, "classifier", classifier)?,
            architecture,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture.feature_dim()
    }

    pub fn classes(&self) -> usize {
        self.architecture.classes()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.extractor_params.iter().chain(&self.classifier_params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.extractor_params.iter_mut().chain(&mut self.classifier_params)
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.grad = None;
        }
    }

    /// Inserts every parameter into `g`; `track` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph, track: bool) -> BoundModel {
        let mut put = |ps: &[Param]| {
            ps.iter()
                .map(|p| {
                    if track && p.tensor.requires_grad {
                        g.variable(&p.tensor)
                    } else {
                        g.constant(&p.tensor)
                    }
                })
                .collect()
        };
        let extractor = put(&self.extractor_params);
        let classifier = put(&self.classifier_params);
        BoundModel { extractor, classifier }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [rows, cols] if cols == self.input_dim() => Ok(rows),
            _ => Err(Error::dim(
                "forward",
                format!("batch of shape {shape:?} for input width {}", self.input_dim()),
            )),
        }
    }

    /// Graph-free forward pass: `(features, logits)`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let rows = self.check_batch(batch.shape())?;
        let z = plain_stack(&self.architecture.extractor, &self.extractor_params, batch.data().to_vec(), rows);
        let q = plain_stack(&self.architecture.classifier, &self.classifier_params, z.clone(), rows);
        Ok((
            Tensor::new(vec![rows, self.feature_dim()], z)?,
            Tensor::new(vec![rows, self.classes()], q)?,
        ))
    }

    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let rows = self.check_batch(batch.shape())?;
        let z = plain_stack(&self.architecture.extractor, &self.extractor_params, batch.data().to_vec(), rows);
        Tensor::new(vec![rows, self.feature_dim()], z)
    }

    pub fn extract(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_batch(g.shape(x))?;
        graph_stack(g, &self.architecture.extractor, &bound.extractor, x)
    }

    pub fn classify(&self, g: &mut Graph, bound: &BoundModel, z: Var) -> Result<Var> {
        match *g.shape(z) {
            [_, w] if w == self.feature_dim() => {}
            ref s => {
                return Err(Error::dim(
                    "classify",
                    format!("features of shape {s:?} for classifier width {}", self.feature_dim()),
                ))
            }
        }
        graph_stack(g, &self.architecture.classifier, &bound.classifier, z)
    }

    /// Graph forward pass returning `(features, logits)` nodes.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<(Var, Var)> {
        let z = self.extract(g, bound, x)?;
        let q = self.classify(g, bound, z)?;
        Ok((z, q))
    }

    /// Flat copy of all parameter values in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }
}
