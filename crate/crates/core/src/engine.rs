//! FedAvg orchestration with synthetic-data-regularised local training.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{backward_params, Graph, Labels, Model, SgdConfig, SgdState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hfmds::{
    mixup_generate, synthesize, update_prototypes, FeatureAccumulator, Prototypes, SynthesisConfig,
    SyntheticDataset,
};
use crate::metrics::{accuracy, alignment_score, client_centroids, psnr, MetricsRow};
use crate::seed::{derive_seed, stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    FmdsFl,
    HfmdsFl,
}

impl Algorithm {
    pub fn synthesizes(self) -> bool {
        !matches!(self, Algorithm::FedAvg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FmdsFl => "fmds_fl",
            Algorithm::HfmdsFl => "hfmds_fl",
        }
    }
}

/// Short hex digest of a model's parameter bytes.
pub fn fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    for p in model.params() {
        h.update(p.name.as_bytes());
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    /// Weight of the real-data loss; `1 - alpha` goes to synthetic data.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Prototype momentum.
    pub lambda: f64,
}

pub struct ClientState {
    pub id: usize,
    shard: Dataset,
    pub prototypes: Prototypes,
    pub accumulator: FeatureAccumulator,
    pub rng: StreamRng,
}

impl ClientState {
    pub fn new(id: usize, shard: Dataset, feature_dim: usize, rng: StreamRng) -> Self {
        let classes = shard.classes();
        ClientState {
            id,
            shard,
            prototypes: Prototypes::empty(classes),
            accumulator: FeatureAccumulator::new(classes, feature_dim),
            rng,
        }
    }

    /// Read-only: training never mutates a client's data.
    pub fn shard(&self) -> &Dataset {
        &self.shard
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub model: Model,
    pub mean_loss: f64,
    pub steps: usize,
}

fn sample_synthetic<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if len >= count {
        index::sample(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Local SGD on `alpha * CE(real) + (1 - alpha) * CE(synthetic)`, accumulating
/// real features per class and updating the client's prototypes at the end.
pub fn local_update(
    global: &Model,
    client: &mut ClientState,
    syn: &SyntheticDataset,
    cfg: &LocalConfig,
) -> Result<LocalOutcome> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::config("alpha", "must lie in [0, 1]"));
    }
    if cfg.alpha < 1.0 && syn.is_empty() {
        return Err(Error::contract("alpha < 1 needs a nonempty synthetic dataset"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("batch_size", "batch size and epochs must be positive"));
    }
    let n = client.shard.len();
    if n == 0 {
        return Err(Error::contract(format!("client {} has no data", client.id)));
    }
    let mut model = global.clone();
    let mut sgd = SgdState::new(cfg.sgd);
    client.accumulator.clear();
    let mut loss_sum = 0.0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut client.rng);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| client.shard.labels()[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(&client.shard.batch(idx)?);
            let (z, q) = model.forward_graph(&mut g, &bound, x)?;
            client.accumulator.add(g.value(z), &labels);
            let real = g.softmax_cross_entropy(q, &Labels::Hard(labels))?;
            let loss = if cfg.alpha < 1.0 {
                let pick = sample_synthetic(syn.len(), cfg.batch_size, &mut client.rng);
                let xs = g.constant(&syn.batch(&pick)?);
                let (_, qs) = model.forward_graph(&mut g, &bound, xs)?;
                let synthetic = g.softmax_cross_entropy(qs, &syn.labels(&pick))?;
                let a = g.scale(real, cfg.alpha);
                let b = g.scale(synthetic, 1.0 - cfg.alpha);
                g.add(a, b)?
            } else {
                real
            };
            loss_sum += g.value(loss)[0];
            steps += 1;
            backward_params(&g, loss, &mut model, &bound)?;
            sgd.step(model.params_mut())?;
        }
    }
    client.prototypes = update_prototypes(&client.accumulator, &client.prototypes, cfg.lambda);
    Ok(LocalOutcome {
        model,
        mean_loss: loss_sum / steps as f64,
        steps,
    })
}

/// Uniform sample of `active` client ids without replacement, ascending.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, active: usize, rng: &mut R) -> Result<Vec<usize>> {
    if active == 0 || active > clients {
        return Err(Error::config("active_clients", format!("must lie in 1..={clients}")));
    }
    if active == clients {
        return Ok((0..clients).collect());
    }
    let mut ids = index::sample(rng, clients, active).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Unweighted parameter mean, accumulated in the given order as
/// `w_0 + sum_k (w_k - w_0) / n` so identical inputs come back bit for bit.
pub fn aggregate(models: &[Model]) -> Result<Model> {
    let first = models.first().ok_or_else(|| Error::contract("aggregate of zero models"))?;
    for m in &models[1..] {
        let same = m.architecture() == first.architecture()
            && m.params().zip(first.params()).all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !same {
            return Err(Error::contract("aggregate over models with different architectures"));
        }
    }
    let n = models.len() as f64;
    let mut out = first.clone();
    out.zero_grads();
    for (pi, p) in out.params_mut().enumerate() {
        let anchor = first.params().nth(pi).expect("same layout").tensor.data();
        let mut delta = vec![0.0; anchor.len()];
        for m in &models[1..] {
            let w = m.params().nth(pi).expect("same layout").tensor.data();
            for ((d, &wk), &w0) in delta.iter_mut().zip(w).zip(anchor) {
                *d += wk - w0;
            }
        }
        for (v, d) in p.tensor.data_mut().iter_mut().zip(delta) {
            *v += d / n;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub active_clients: usize,
    pub local: LocalConfig,
    pub synthesis: SynthesisConfig,
    /// Synthesis fires at rounds that are positive multiples of this.
    pub syn_interval: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: usize,
    pub active: Vec<usize>,
    pub synthesis_due: bool,
}

/// Summary of one synthesis event across all clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisEvent {
    pub round: usize,
    pub size: usize,
    pub mean_psnr: f64,
    /// Two-parent mixup baseline of the same size and pairing rule.
    pub mixup_psnr: f64,
    pub mean_loss_drop: f64,
    /// Fraction of samples whose synthesis loss decreased.
    pub improved_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSeeds {
    pub server: u64,
    pub clients: Vec<u64>,
    pub synthesis: u64,
    pub mixup: u64,
}

impl EngineSeeds {
    pub fn derive(master: u64, clients: usize) -> Self {
        EngineSeeds {
            server: derive_seed(master, "server", 0),
            clients: (0..clients as u64).map(|k| derive_seed(master, "client", k)).collect(),
            synthesis: derive_seed(master, "synthesis", 0),
            mixup: derive_seed(master, "mixup", 0),
        }
    }

    fn event_seed(root: u64, round: usize, client: usize) -> u64 {
        derive_seed(root, &format!("round/{round}"), client as u64)
    }
}

pub struct GlobalState {
    pub model: Model,
    /// Next round to execute (rounds are numbered from 1).
    pub round: usize,
    pub synthetic: SyntheticDataset,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<SynthesisEvent>,
    /// Per-client synthetic sets from the most recent synthesis event.
    pub last_synthesis: Vec<SyntheticDataset>,
    seeds: EngineSeeds,
    server_rng: StreamRng,
}

impl GlobalState {
    pub fn new(model: Model, shards: Vec<Dataset>, test: Dataset, seeds: EngineSeeds) -> Result<Self> {
        if shards.len() != seeds.clients.len() {
            return Err(Error::contract("one seed per client required"));
        }
        let feature_dim = model.feature_dim();
        let clients = shards
            .into_iter()
            .zip(&seeds.clients)
            .enumerate()
            .map(|(k, (shard, &s))| ClientState::new(k, shard, feature_dim, stream(s)))
            .collect();
        Ok(GlobalState {
            model,
            round: 1,
            synthetic: SyntheticDataset::default(),
            clients,
            test,
            metrics: Vec::new(),
            events: Vec::new(),
            last_synthesis: Vec::new(),
            server_rng: stream(seeds.server),
            seeds,
        })
    }

    pub fn shards(&self) -> Vec<Dataset> {
        self.clients.iter().map(|c| c.shard.clone()).collect()
    }

    /// Cross-client centroid distance under the current global model.
    pub fn alignment(&self) -> Result<Option<f64>> {
        let shards = self.shards();
        Ok(alignment_score(&client_centroids(&self.model, &shards)?))
    }

    pub fn plan(&mut self, cfg: &EngineConfig) -> Result<RoundPlan> {
        let t = self.round;
        let synthesis_due = cfg.algorithm.synthesizes() && t != 0 && t.is_multiple_of(cfg.syn_interval);
        let active = sample_clients(self.clients.len(), cfg.active_clients, &mut self.server_rng)?;
        Ok(RoundPlan {
            round: t,
            active,
            synthesis_due,
        })
    }

    fn synthesize_all(&mut self, cfg: &EngineConfig) -> Result<SynthesisEvent> {
        let t = self.round;
        let model = &self.model;
        let seeds = &self.seeds;
        let mut scfg = cfg.synthesis.clone();
        if cfg.algorithm == Algorithm::FmdsFl {
            scfg.mu = 0.0;
        }
        let parts: Vec<SyntheticDataset> = self
            .clients
            .par_iter()
            .map(|c| {
                let mut rng = stream(EngineSeeds::event_seed(seeds.synthesis, t, c.id));
                synthesize(model, &c.shard, &c.prototypes, &scfg, &mut rng, c.id, t)
            })
            .collect::<Result<_>>()?;

        let mut psnr_sum = 0.0;
        let mut mix_sum = 0.0;
        let mut drop_sum = 0.0;
        let mut improved = 0usize;
        let mut count = 0usize;
        for (c, part) in self.clients.iter().zip(&parts) {
            for s in &part.samples {
                psnr_sum += psnr(&s.input, c.shard.input(s.paired_index))?;
                let (a, b) = (s.initial_loss.unwrap_or(0.0), s.final_loss.unwrap_or(0.0));
                drop_sum += a - b;
                improved += usize::from(b < a);
                count += 1;
            }
            if c.shard.len() >= 2 {
                let mut rng = stream(EngineSeeds::event_seed(seeds.mixup, t, c.id));
                let mix = mixup_generate(&c.shard, part.len(), &mut rng, c.id, t)?;
                for s in &mix.samples {
                    mix_sum += psnr(&s.input, c.shard.input(s.paired_index))?;
                }
            }
        }
        let count_f = count.max(1) as f64;
        self.synthetic = SyntheticDataset::concat(&parts);
        self.last_synthesis = parts;
        Ok(SynthesisEvent {
            round: t,
            size: count,
            mean_psnr: psnr_sum / count_f,
            mixup_psnr: mix_sum / count_f,
            mean_loss_drop: drop_sum / count_f,
            improved_fraction: improved as f64 / count_f,
        })
    }
}

/// Executes one communication round and appends its metrics row.
pub fn run_round(state: &mut GlobalState, cfg: &EngineConfig) -> Result<RoundPlan> {
    let started = Instant::now();
    let plan = state.plan(cfg)?;
    if plan.synthesis_due {
        let event = state.synthesize_all(cfg)?;
        log::info!(
            "round {}: synthesized {} samples, psnr {:.2} dB (mixup {:.2}), {:.1}% improved",
            event.round,
            event.size,
            event.mean_psnr,
            event.mixup_psnr,
            100.0 * event.improved_fraction
        );
        state.events.push(event);
    } else {
        state.last_synthesis.clear();
    }

    let mut local = cfg.local.clone();
    if state.synthetic.is_empty() {
        local.alpha = 1.0;
    }
    let global = &state.model;
    let syn = &state.synthetic;
    let active = &plan.active;
    let outcomes: Vec<LocalOutcome> = state
        .clients
        .par_iter_mut()
        .filter(|c| active.binary_search(&c.id).is_ok())
        .map(|c| local_update(global, c, syn, &local))
        .collect::<Result<_>>()?;
    let train_loss = outcomes.iter().map(|o| o.mean_loss).sum::<f64>() / outcomes.len() as f64;
    let models: Vec<Model> = outcomes.into_iter().map(|o| o.model).collect();
    state.model = aggregate(&models)?;

    let synthesizes = cfg.algorithm.synthesizes();
    let last = state.events.last().filter(|_| !state.synthetic.is_empty());
    let row = MetricsRow {
        round: plan.round,
        accuracy: accuracy(&state.model, &state.test)?,
        train_loss,
        syn_size: state.synthetic.len(),
        psnr: last.map(|e| e.mean_psnr),
        loss_drop: last.map(|e| e.mean_loss_drop),
        alignment: if synthesizes { state.alignment()? } else { None },
        ms: started.elapsed().as_millis() as u64,
    };
    state.metrics.push(row);
    state.round += 1;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Architecture, Param};
    use crate::data::{make_blobs, partition_label_skew, BlobsSpec};
    use crate::tensor::Tensor;

    fn scalar_model(v: f64) -> Model {
        let arch = Architecture::mlp(1, &[], 1, 1);
        Model::from_tensors(
            arch,
            vec![Tensor::new(vec![1, 1], vec![v]).unwrap(), Tensor::new(vec![1], vec![v]).unwrap()],
            vec![Tensor::new(vec![1, 1], vec![v]).unwrap(), Tensor::new(vec![1], vec![v]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn aggregate_scalars() {
        let m = aggregate(&[scalar_model(2.0), scalar_model(4.0)]).unwrap();
        assert!(m.flat_params().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn aggregate_identical_is_identity() {
        let m = Model::init(Architecture::mlp(4, &[7], 5, 3), &mut stream(0)).unwrap();
        for n in 1..8 {
            let copies = vec![m.clone(); n];
            let out = aggregate(&copies).unwrap();
            let bits = |m: &Model| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out), bits(&m), "n = {n}");
        }
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let a = Model::init(Architecture::mlp(4, &[7], 5, 3), &mut stream(0)).unwrap();
        let b = Model::init(Architecture::mlp(4, &[6], 5, 3), &mut stream(0)).unwrap();
        assert!(matches!(aggregate(&[a, b]), Err(Error::Contract(_))));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn sample_clients_cases() {
        assert_eq!(sample_clients(5, 5, &mut stream(0)).unwrap(), vec![0, 1, 2, 3, 4]);
        let one = sample_clients(20, 1, &mut stream(42)).unwrap();
        assert_eq!(one, sample_clients(20, 1, &mut stream(42)).unwrap());
        assert_eq!(one.len(), 1);
        assert!(sample_clients(3, 4, &mut stream(0)).is_err());
        assert!(sample_clients(3, 0, &mut stream(0)).is_err());
        let s = sample_clients(10, 5, &mut stream(7)).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sample_clients_is_uniform() {
        // Binomial(1000, 0.5): sd ~ 15.8, so +-60 is a ~3.8 sigma band.
        let mut rng = stream(3);
        let mut hits = [0usize; 10];
        for _ in 0..1000 {
            for k in sample_clients(10, 5, &mut rng).unwrap() {
                hits[k] += 1;
            }
        }
        for h in hits {
            assert!(h.abs_diff(500) <= 60, "{hits:?}");
        }
    }

    fn small_client() -> (Model, ClientState) {
        let blobs = make_blobs(&BlobsSpec { classes: 3, dim: 4, per_class: 12, spread: 0.2 }, 1).unwrap();
        let shards = partition_label_skew(&blobs.train, 2, 2, 0).unwrap();
        let model = Model::init(Architecture::mlp(4, &[6], 3, 3), &mut stream(2)).unwrap();
        let client = ClientState::new(0, shards[0].clone(), 3, stream(5));
        (model, client)
    }

    fn cfg(alpha: f64) -> LocalConfig {
        LocalConfig {
            alpha,
            epochs: 1,
            batch_size: 5,
            sgd: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 },
            lambda: 0.5,
        }
    }

    #[test]
    fn local_update_counts_steps_and_sets_prototypes() {
        let (model, mut client) = small_client();
        let n = client.shard().len();
        let out = local_update(&model, &mut client, &SyntheticDataset::default(), &cfg(1.0)).unwrap();
        assert_eq!(out.steps, n.div_ceil(5));
        let held: Vec<usize> = client.shard().class_counts().iter().enumerate().filter(|c| *c.1 > 0).map(|c| c.0).collect();
        for c in 0..3 {
            assert_eq!(client.prototypes.get(c).is_some(), held.contains(&c));
        }
        assert_eq!(client.accumulator.counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn alpha_below_one_needs_synthetic_data() {
        let (model, mut client) = small_client();
        let r = local_update(&model, &mut client, &SyntheticDataset::default(), &cfg(0.5));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn shard_is_untouched_by_training() {
        let (model, mut client) = small_client();
        let before = client.shard().clone();
        local_update(&model, &mut client, &SyntheticDataset::default(), &cfg(1.0)).unwrap();
        assert_eq!(client.shard(), &before);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let mut m = scalar_model(1.0);
        let a = fingerprint(&m);
        assert_eq!(a.len(), 16);
        let p: &mut Param = m.params_mut().next().unwrap();
        p.tensor.data_mut()[0] = 2.0;
        assert_ne!(a, fingerprint(&m));
    }
}
