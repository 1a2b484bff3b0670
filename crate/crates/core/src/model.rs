//! The assembled network: backbone, temporal neck, query bank, object
//! encoder and decoder sharing one parameter store.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput};
use crate::error::{bail, Result};
use crate::neck::{FeaturePyramid, Neck, NeckConfig};
use crate::nn::ParamStore;
use crate::queries::{ObjectCueInput, ObjectEncoder, ObjectEncoderConfig, QueryBank, QueryBankConfig, TargetQuerySet};
use crate::types::{Task, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub neck: NeckConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub queries: QueryBankConfig,
    #[serde(default)]
    pub objects: ObjectEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck.validate()?;
        self.objects.validate()?;
        if self.decoder.num_layers == 0 || self.neck.dim % self.decoder.num_heads != 0 {
            bail!(Config, "decoder needs at least one layer and num_heads dividing {}", self.neck.dim);
        }
        if self.queries.datasets.is_empty() {
            bail!(Config, "at least one dataset class table is required");
        }
        Ok(())
    }

    /// The overfit-scale model: `D = 64`, two neck layers, three decoder layers.
    pub fn small() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [16, 32, 48, 64],
                blocks_per_stage: [1, 1, 1, 1],
                norm_groups: 8,
            },
            neck: NeckConfig {
                dim: 64,
                num_layers: 2,
                ..NeckConfig::default()
            },
            decoder: DecoderConfig {
                num_layers: 3,
                ..DecoderConfig::default()
            },
            queries: QueryBankConfig::default(),
            objects: ObjectEncoderConfig {
                num_layers: 2,
                ..ObjectEncoderConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamStore,
    pub backbone: Backbone,
    pub neck: Neck,
    pub bank: QueryBank,
    pub encoder: ObjectEncoder,
    pub decoder: Decoder,
    config: ModelConfig,
}

impl Model {
    /// Builds and randomly initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = config.neck.dim;
        let mut pb = params.builder(&mut rng);
        let backbone = Backbone::new(&mut pb.pp("backbone"), &config.backbone)?;
        let neck = Neck::new(&mut pb.pp("neck"), config.backbone.stage_channels, &config.neck)?;
        let bank = QueryBank::new(&mut pb.pp("queries"), dim, &config.queries)?;
        let encoder = ObjectEncoder::new(&mut pb.pp("objects"), dim, &config.objects)?;
        let decoder = Decoder::new(&mut pb.pp("decoder"), dim, &config.decoder)?;
        Ok(Self {
            params,
            backbone,
            neck,
            bank,
            encoder,
            decoder,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.neck.dim
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Name of the first dataset class table.
    pub fn default_dataset(&self) -> &str {
        &self.config.queries.datasets[0].name
    }

    pub fn features(&self, clip: &VideoClip) -> Result<FeaturePyramid> {
        let (t, h, w) = (clip.num_frames(), clip.height, clip.width);
        if t == 0 {
            bail!(InvalidInput, "empty clip");
        }
        let frames = Tensor::from_vec(clip.to_normalized(), (t, 3, h, w), &Device::Cpu)?.to_dtype(self.dtype())?;
        self.neck.forward(&self.backbone.forward(&frames)?)
    }

    /// Learned queries for a class-driven task.
    pub fn class_queries(&self, task: Task, dataset: &str) -> Result<TargetQuerySet> {
        match task {
            Task::Vis => self.bank.build_vis_queries(dataset),
            Task::Vps => self.bank.build_vps_queries(dataset),
            _ => bail!(TaskMismatch, "{task} is driven by object cues, not a class list"),
        }
    }

    pub fn mask_cue_queries<R: Rng>(
        &self,
        pyr: &FeaturePyramid,
        cues: &[ObjectCueInput],
        rng: &mut R,
    ) -> Result<TargetQuerySet> {
        self.encoder.encode_masks(pyr.level(4), cues, rng)
    }

    /// Point cues `(frame, y, x)` in full-resolution pixels.
    pub fn point_cue_queries<R: Rng>(
        &self,
        pyr: &FeaturePyramid,
        points: &[(usize, usize, usize)],
        rng: &mut R,
    ) -> Result<TargetQuerySet> {
        self.encoder.encode_points(pyr.level(4), points, rng)
    }

    pub fn decode(&self, queries: &TargetQuerySet, pyr: &FeaturePyramid) -> Result<DecoderOutput> {
        self.decoder.forward(queries, pyr)
    }

    /// Class id of every classification column except the trailing
    /// background column.
    pub fn class_columns(queries: &TargetQuerySet) -> Vec<u32> {
        match &queries.classifier {
            Some(c) => c.class_ids.clone(),
            None => queries.semantic_classes(),
        }
    }
}
