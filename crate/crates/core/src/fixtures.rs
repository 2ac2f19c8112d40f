//! Small deterministic instances shared by tests and the gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_synthetic, split_interactions, FeatureMatrix, InteractionSet, Modality, SplitBundle, SplitRatios, SyntheticData,
    SyntheticSpec,
};
use crate::error::Result;
use crate::graph::{build_neighbor_index, expand_candidates, InducedEdges};
use crate::model::{Dropout, ModelConfig, ModelInputs};
use crate::scalar::Scalar;
use crate::train::{StepPlan, TrainData};

/// Three users, four items, one induced-edge pass with `k = 1`, `r = 2`.
#[derive(Clone, Debug)]
pub struct MicroInstance {
    pub train: InteractionSet,
    pub features_a: FeatureMatrix,
    pub features_s: FeatureMatrix,
    pub induced: InducedEdges,
}

pub fn micro_instance() -> Result<MicroInstance> {
    let train = InteractionSet::new(3, 4, vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)])?;
    let features_a = FeatureMatrix::new(Modality::A, 4, 3, (0..12).map(|k| (0.9 * k as f32 + 0.3).sin()).collect())?;
    let features_s = FeatureMatrix::new(Modality::S, 4, 2, (0..8).map(|k| (1.3 * k as f32 + 0.1).cos()).collect())?;
    let idx_a = build_neighbor_index(&features_a, 1)?;
    let idx_s = build_neighbor_index(&features_s, 1)?;
    let induced = expand_candidates(&train, &idx_a, &idx_s, 2)?;
    Ok(MicroInstance {
        train,
        features_a,
        features_s,
        induced,
    })
}

/// `d = 4`, nine experts, `K = 2`.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        top_k: 2,
        ..ModelConfig::default()
    }
}

impl MicroInstance {
    pub fn inputs(&self, dual_view: bool) -> Result<ModelInputs<f64>> {
        ModelInputs::new(&self.train, Some(&self.induced), dual_view, &self.features_a, &self.features_s)
    }

    /// Every training edge as one batch with one seeded negative each.
    pub fn plan(&self, inputs: &ModelInputs<f64>, dropout: f64, seed: u64) -> Result<StepPlan<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = crate::train::TrainerConfig {
            model: ModelConfig {
                dropout,
                ..micro_model_config()
            },
            ..Default::default()
        };
        let mut plan = StepPlan::sample(self.train.edges(), &self.train, inputs, &config, &mut rng)?;
        if let Some(d) = plan.dropout.as_mut() {
            *d = Dropout { rate: dropout, seed };
        }
        Ok(plan)
    }
}

/// The planted dataset after splitting and induced-edge construction.
#[derive(Clone, Debug)]
pub struct PlantedSplit {
    pub data: SyntheticData,
    pub split: SplitBundle,
    pub induced: InducedEdges,
}

pub fn planted_split(spec: &SyntheticSpec, knn_k: usize, expand_r: usize) -> Result<PlantedSplit> {
    let data = generate_synthetic(spec)?;
    let split = split_interactions(&data.interactions, SplitRatios::default(), spec.seed)?;
    let idx_a = build_neighbor_index(&data.features_a, knn_k)?;
    let idx_s = build_neighbor_index(&data.features_s, knn_k)?;
    let induced = expand_candidates(&split.train, &idx_a, &idx_s, expand_r)?;
    Ok(PlantedSplit { data, split, induced })
}

impl PlantedSplit {
    pub fn train_data<T: Scalar>(&self, dual_view: bool) -> Result<TrainData<T>> {
        Ok(TrainData {
            train: self.split.train.clone(),
            valid: self.split.valid.clone(),
            inputs: ModelInputs::new(
                &self.split.train,
                Some(&self.induced),
                dual_view,
                &self.data.features_a,
                &self.data.features_s,
            )?,
        })
    }
}
