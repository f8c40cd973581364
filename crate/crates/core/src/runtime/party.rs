//! Party state: passive feature holders and the label-owning active party.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::PartyId;
use super::store::{layout_from_widths, PartySlice};
use super::train::{StepSettings, UpdateRule, VflConfig};
use crate::data::{align_samples, Dataset, SampleId, VerticalSplit, TRAIN_FRACTION};
use crate::nn::{newton_step, sgd_step, DenseMatrix, ForwardCache, MlpModel};
use crate::{Error, Result};

/// `[input, hidden, output]`, or `[input, output]` when `hidden` is zero.
pub fn mlp_dims(input: usize, hidden: usize, output: usize) -> Vec<usize> {
    if hidden == 0 {
        vec![input, output]
    } else {
        vec![input, hidden, output]
    }
}

/// What to leave out when building a federation, used by the retrain
/// benchmark.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Exclusion {
    pub parties: BTreeSet<PartyId>,
    /// Global feature indices.
    pub features: BTreeSet<usize>,
    pub samples: BTreeSet<SampleId>,
}

impl Exclusion {
    pub fn none() -> Self {
        Self::default()
    }
}

/// A feature holder. Holds no labels.
#[derive(Debug, Clone)]
pub struct PassiveParty {
    id: PartyId,
    pub model: MlpModel,
    owned_features: Vec<usize>,
    train: Dataset,
    test: Dataset,
}

impl PassiveParty {
    pub fn new(
        id: PartyId,
        model: MlpModel,
        owned_features: Vec<usize>,
        train: Dataset,
        test: Dataset,
    ) -> Result<Self> {
        if train.labels().is_some() || test.labels().is_some() {
            return Err(Error::Protocol(format!(
                "passive party {id} must not hold labels"
            )));
        }
        for ds in [&train, &test] {
            if ds.num_features() != owned_features.len() {
                return Err(Error::Shape(format!(
                    "party {id} owns {} features but its data has {} columns",
                    owned_features.len(),
                    ds.num_features()
                )));
            }
        }
        if model.input_dim() != owned_features.len() {
            return Err(Error::Shape(format!(
                "party {id} model expects {} inputs for {} features",
                model.input_dim(),
                owned_features.len()
            )));
        }
        Ok(Self {
            id,
            model,
            owned_features,
            train,
            test,
        })
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn owned_features(&self) -> &[usize] {
        &self.owned_features
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn embedding_width(&self) -> usize {
        self.model.output_dim()
    }

    /// Local column positions of the given global features.
    pub fn local_columns(&self, global: &BTreeSet<usize>) -> Result<Vec<usize>> {
        global
            .iter()
            .map(|g| {
                self.owned_features
                    .iter()
                    .position(|f| f == g)
                    .ok_or_else(|| {
                        Error::Request(format!("party {} does not own feature {g}", self.id))
                    })
            })
            .collect()
    }

    /// Drops the given global features from local data and installs `model`,
    /// which must take the remaining columns.
    pub fn replace_features(&mut self, removed: &BTreeSet<usize>, model: MlpModel) -> Result<()> {
        let drop = self.local_columns(removed)?;
        let keep: Vec<usize> = (0..self.owned_features.len())
            .filter(|c| !drop.contains(c))
            .collect();
        if model.input_dim() != keep.len() || model.output_dim() != self.embedding_width() {
            return Err(Error::Shape(format!(
                "replacement model for party {} has shape {:?}",
                self.id,
                model.dims()
            )));
        }
        self.train = self.train.select_columns(&keep)?;
        self.test = self.test.select_columns(&keep)?;
        self.owned_features = keep.iter().map(|&c| self.owned_features[c]).collect();
        self.model = model;
        Ok(())
    }

    /// Backpropagates the received embedding gradient and updates the local
    /// model. The Newton variant minimises the local surrogate
    /// `<G, H(v)> + |H(v) - H_t|^2 / (2n)`, whose gradient at the current
    /// parameters equals the backpropagated gradient.
    pub fn apply_gradient(
        &mut self,
        batch: &DenseMatrix,
        cache: &ForwardCache,
        grad: &DenseMatrix,
        settings: &StepSettings,
    ) -> Result<()> {
        match settings.rule {
            UpdateRule::Sgd => {
                let grads = self.model.backward(cache, grad)?;
                sgd_step(&mut self.model, &grads, settings.lr_passive)
            }
            UpdateRule::Newton => {
                let anchor = self.model.predict(batch)?;
                let n = batch.rows() as f64;
                let surrogate = |m: &MlpModel| {
                    let (h, c) = m.forward(batch)?;
                    let mut upstream = grad.clone();
                    let mut loss = 0.0;
                    for ((u, &hv), &av) in upstream
                        .data_mut()
                        .iter_mut()
                        .zip(h.data())
                        .zip(anchor.data())
                    {
                        let g = *u;
                        loss += g * hv + (hv - av).powi(2) / (2.0 * n);
                        *u = g + (hv - av) / n;
                    }
                    Ok((loss, m.backward(&c, &upstream)?))
                };
                newton_step(&mut self.model, surrogate, settings.damping).map(|_| ())
            }
        }
    }
}

/// The label owner. Concatenates embeddings, computes the loss and sends
/// gradient slices back.
#[derive(Debug, Clone)]
pub struct ActiveParty {
    id: PartyId,
    pub model: MlpModel,
    train_ids: Vec<SampleId>,
    labels: HashMap<SampleId, usize>,
    test_labels: Vec<usize>,
    num_classes: usize,
    registry: Vec<(PartyId, usize)>,
    excluded: BTreeSet<SampleId>,
}

impl ActiveParty {
    /// `train` and `test` carry the labels; `registry` lists every passive
    /// party and its declared embedding width.
    pub fn new(
        id: PartyId,
        model: MlpModel,
        train: &Dataset,
        test: &Dataset,
        mut registry: Vec<(PartyId, usize)>,
    ) -> Result<Self> {
        let (Some(train_labels), Some(test_labels)) = (train.labels(), test.labels()) else {
            return Err(Error::Validation(
                "the active party needs labelled train and test data".into(),
            ));
        };
        registry.sort_by_key(|&(p, _)| p);
        if registry.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Protocol("duplicate party in registry".into()));
        }
        let width: usize = registry.iter().map(|&(_, w)| w).sum();
        if model.input_dim() != width {
            return Err(Error::Shape(format!(
                "active model expects {} inputs but registered embeddings total {width}",
                model.input_dim()
            )));
        }
        let labels = train
            .sample_ids()
            .iter()
            .copied()
            .zip(train_labels.iter().copied())
            .collect();
        Ok(Self {
            id,
            model,
            train_ids: train.sample_ids().to_vec(),
            labels,
            test_labels: test_labels.to_vec(),
            num_classes: train.num_classes(),
            registry,
            excluded: BTreeSet::new(),
        })
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn train_ids(&self) -> &[SampleId] {
        &self.train_ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }

    pub fn label_of(&self, id: SampleId) -> Result<usize> {
        self.labels
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("no label for sample {id}")))
    }

    pub fn labels_of(&self, ids: &[SampleId]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.label_of(id)).collect()
    }

    pub fn registry(&self) -> &[(PartyId, usize)] {
        &self.registry
    }

    pub fn layout(&self) -> Vec<PartySlice> {
        layout_from_widths(&self.registry)
    }

    /// Forgotten samples; their rows are masked out of every later loss.
    pub fn excluded(&self) -> &BTreeSet<SampleId> {
        &self.excluded
    }

    pub fn exclude_samples(&mut self, ids: impl IntoIterator<Item = SampleId>) {
        self.excluded.extend(ids);
    }

    /// Drops `party` from the registry and installs the model trained on the
    /// remaining slices.
    pub fn deregister(&mut self, party: PartyId, model: MlpModel) -> Result<()> {
        let before = self.registry.len();
        self.registry.retain(|&(p, _)| p != party);
        if self.registry.len() == before {
            return Err(Error::Request(format!("party {party} is not registered")));
        }
        let width: usize = self.registry.iter().map(|&(_, w)| w).sum();
        if model.input_dim() != width {
            return Err(Error::Shape(format!(
                "replacement active model expects {} inputs, remaining width is {width}",
                model.input_dim()
            )));
        }
        self.model = model;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Federation {
    /// Sorted by party id.
    pub passives: Vec<PassiveParty>,
    pub active: ActiveParty,
}

impl Federation {
    pub fn new(mut passives: Vec<PassiveParty>, active: ActiveParty) -> Result<Self> {
        if passives.is_empty() {
            return Err(Error::Validation("at least one passive party is required".into()));
        }
        passives.sort_by_key(|p| p.id());
        let declared: Vec<(PartyId, usize)> = passives
            .iter()
            .map(|p| (p.id(), p.embedding_width()))
            .collect();
        if declared != active.registry() {
            return Err(Error::Protocol(
                "active registry does not match the passive parties".into(),
            ));
        }
        let ids: Vec<Vec<SampleId>> = passives
            .iter()
            .map(|p| p.train().sample_ids().to_vec())
            .chain(std::iter::once(active.train_ids().to_vec()))
            .collect();
        let aligned = align_samples(&ids)?;
        if ids.iter().any(|l| l != &aligned) {
            return Err(Error::Alignment(
                "parties do not share one aligned sample order".into(),
            ));
        }
        Ok(Self { passives, active })
    }

    /// Splits the dataset 80/20, partitions columns and initialises every
    /// model from `config.seed`. Party `k` owns `split.assignments()[k]`; the
    /// active party is the last of them unless `config.label_only_active`.
    pub fn build(
        dataset: &Dataset,
        split: &VerticalSplit,
        config: &VflConfig,
        exclusion: &Exclusion,
    ) -> Result<Self> {
        split.validate(dataset.num_features())?;
        let (train, test) = dataset.train_test_split(TRAIN_FRACTION, config.data_seed)?;
        let train = if exclusion.samples.is_empty() {
            train
        } else {
            train.without_samples(&exclusion.samples)?
        };
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = split.parties();
        let active_id = if config.label_only_active {
            PartyId(k as u32)
        } else {
            PartyId(k as u32 - 1)
        };
        if exclusion.parties.contains(&active_id) {
            return Err(Error::Request(format!(
                "party {active_id} holds the labels and cannot be excluded"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut passives = Vec::new();
        for (k, cols) in split.assignments().iter().enumerate() {
            let id = PartyId(k as u32);
            if exclusion.parties.contains(&id) {
                continue;
            }
            let keep: Vec<usize> = cols
                .iter()
                .copied()
                .filter(|c| !exclusion.features.contains(c))
                .collect();
            if keep.is_empty() {
                return Err(Error::Request(format!(
                    "excluding features leaves party {id} with none"
                )));
            }
            let model = MlpModel::random(
                &mlp_dims(keep.len(), config.passive_hidden, config.embedding_width),
                &mut rng,
            )?;
            passives.push(PassiveParty::new(
                id,
                model,
                keep.clone(),
                train.select_columns(&keep)?.without_labels(),
                test.select_columns(&keep)?.without_labels(),
            )?);
        }
        let registry: Vec<(PartyId, usize)> = passives
            .iter()
            .map(|p| (p.id(), p.embedding_width()))
            .collect();
        let width = registry.iter().map(|&(_, w)| w).sum();
        let classes = dataset.num_classes();
        let model = MlpModel::random(&mlp_dims(width, config.active_hidden, classes), &mut rng)?;
        let active = ActiveParty::new(active_id, model, &train, &test, registry)?;
        Self::new(passives, active)
    }

    pub fn passive(&self, id: PartyId) -> Option<&PassiveParty> {
        self.passives.iter().find(|p| p.id() == id)
    }

    pub fn passive_mut(&mut self, id: PartyId) -> Option<&mut PassiveParty> {
        self.passives.iter_mut().find(|p| p.id() == id)
    }

    /// Test-split embeddings from every passive party's current model.
    pub fn test_embeddings(&self) -> Result<Vec<(PartyId, DenseMatrix)>> {
        self.passives
            .iter()
            .map(|p| Ok((p.id(), p.model.predict(p.test().features())?)))
            .collect()
    }

    /// Active-model logits for rows given in global feature columns. Each
    /// passive party embeds its own columns; nothing goes through the bus.
    pub fn predict_global(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        let mut embeddings = Vec::with_capacity(self.passives.len());
        for p in &self.passives {
            let local = features.select_columns(p.owned_features())?;
            embeddings.push((p.id(), p.model.predict(&local)?));
        }
        let concat = super::train::concat_embeddings(&self.active, embeddings)?;
        self.active.model.predict(&concat)
    }

    /// Removes a passive party after the active party has deregistered it.
    pub fn drop_passive(&mut self, id: PartyId) -> Result<PassiveParty> {
        let pos = self
            .passives
            .iter()
            .position(|p| p.id() == id)
            .ok_or_else(|| Error::Request(format!("unknown party {id}")))?;
        if self.passives.len() == 1 {
            return Err(Error::Request(format!(
                "party {id} is the last passive party"
            )));
        }
        Ok(self.passives.remove(pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn config() -> VflConfig {
        VflConfig {
            batch_size: 16,
            ..VflConfig::default()
        }
    }

    #[test]
    fn build_assigns_labels_only_to_the_active_party() {
        let ds = generate_synthetic(60, 6, 2, 1).unwrap();
        let split = VerticalSplit::equal(6, 3).unwrap();
        let fed = Federation::build(&ds, &split, &config(), &Exclusion::none()).unwrap();
        assert_eq!(fed.passives.len(), 3);
        assert_eq!(fed.active.id(), PartyId(2));
        assert!(fed.passives.iter().all(|p| p.train().labels().is_none()));
        assert_eq!(fed.active.model.input_dim(), 24);
        assert_eq!(fed.active.train_ids().len(), 48);
    }

    #[test]
    fn label_only_active_party_owns_no_features() {
        let ds = generate_synthetic(40, 4, 2, 1).unwrap();
        let split = VerticalSplit::equal(4, 2).unwrap();
        let cfg = VflConfig {
            label_only_active: true,
            ..config()
        };
        let fed = Federation::build(&ds, &split, &cfg, &Exclusion::none()).unwrap();
        assert_eq!(fed.active.id(), PartyId(2));
        assert!(fed.passive(PartyId(2)).is_none());
    }

    #[test]
    fn exclusion_shrinks_the_active_input() {
        let ds = generate_synthetic(60, 6, 2, 1).unwrap();
        let split = VerticalSplit::equal(6, 3).unwrap();
        let mut ex = Exclusion::none();
        ex.parties.insert(PartyId(0));
        let fed = Federation::build(&ds, &split, &config(), &ex).unwrap();
        assert_eq!(fed.active.model.input_dim(), 16);

        let mut ex = Exclusion::none();
        ex.parties.insert(PartyId(2));
        assert!(Federation::build(&ds, &split, &config(), &ex).is_err());
    }

    #[test]
    fn labelled_passive_is_rejected() {
        let ds = generate_synthetic(10, 2, 2, 1).unwrap();
        let model = MlpModel::identity(2);
        let err = PassiveParty::new(PartyId(0), model, vec![0, 1], ds.clone(), ds);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn replace_features_keeps_output_width() {
        let ds = generate_synthetic(60, 6, 2, 1).unwrap();
        let split = VerticalSplit::equal(6, 3).unwrap();
        let mut fed = Federation::build(&ds, &split, &config(), &Exclusion::none()).unwrap();
        let p = fed.passive_mut(PartyId(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = MlpModel::random(&[1, 8, 8], &mut rng).unwrap();
        p.replace_features(&BTreeSet::from([2]), student).unwrap();
        assert_eq!(p.owned_features(), &[3]);
        assert_eq!(p.train().num_features(), 1);
        assert!(p.local_columns(&BTreeSet::from([2])).is_err());
    }
}
