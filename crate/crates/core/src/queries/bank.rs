use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{QueryRole, TargetQuerySet};
use crate::error::{bail, Error, Result};
use crate::nn::{index_tensor, Init, Linear, ParamBuilder};

/// Class table of one dataset. Semantic queries are stored things first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetClasses {
    pub name: String,
    pub things: Vec<u32>,
    pub stuff: Vec<u32>,
}

impl DatasetClasses {
    pub fn all(&self) -> Vec<u32> {
        self.things.iter().chain(&self.stuff).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Classes are represented by semantic queries.
    #[default]
    Queries,
    /// Instance queries classified by a per-dataset linear layer; semantic
    /// logits from a per-dataset linear map of the stride-4 features.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBankConfig {
    pub num_instances: usize,
    pub datasets: Vec<DatasetClasses>,
    #[serde(default)]
    pub classifier: ClassifierMode,
}

impl Default for QueryBankConfig {
    fn default() -> Self {
        Self {
            num_instances: 8,
            datasets: vec![DatasetClasses {
                name: "synth".into(),
                things: vec![0, 1, 2],
                stuff: vec![3, 4, 5],
            }],
            classifier: ClassifierMode::Queries,
        }
    }
}

/// Linear classification heads of one dataset.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    /// `D → C + 1`, last column background.
    pub cls: Linear,
    /// `D → C`, applied per pixel; absent for VIS.
    pub semantic: Option<Linear>,
    pub class_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
struct DatasetEntry {
    classes: DatasetClasses,
    sem: Option<Tensor>,
    sem_embed: Option<Tensor>,
    cls: Option<Linear>,
    sem_linear: Option<Linear>,
}

/// Learned queries for class-driven tasks.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub inst: Tensor,
    pub inst_embed: Tensor,
    pub bg: Tensor,
    pub bg_embed: Tensor,
    datasets: Vec<DatasetEntry>,
    mode: ClassifierMode,
}

impl QueryBank {
    pub fn new(pb: &mut ParamBuilder, dim: usize, config: &QueryBankConfig) -> Result<Self> {
        if config.num_instances == 0 {
            bail!(Config, "num_instances must be positive");
        }
        let init = Init::Uniform(1.0);
        let i = config.num_instances;
        let inst = pb.param("inst", &[i, dim], init)?;
        let inst_embed = pb.param("inst_embed", &[i, dim], init)?;
        let bg = pb.param("bg", &[1, dim], init)?;
        let bg_embed = pb.param("bg_embed", &[1, dim], init)?;
        let mut datasets = Vec::new();
        for d in &config.datasets {
            let c = d.things.len() + d.stuff.len();
            if c == 0 {
                bail!(Config, "dataset {} has no classes", d.name);
            }
            if datasets.iter().any(|e: &DatasetEntry| e.classes.name == d.name) {
                bail!(Config, "dataset {} listed twice", d.name);
            }
            let mut dp = pb.pp(format!("sem.{}", d.name));
            let entry = match config.classifier {
                ClassifierMode::Queries => DatasetEntry {
                    classes: d.clone(),
                    sem: Some(dp.param("queries", &[c, dim], init)?),
                    sem_embed: Some(dp.param("embed", &[c, dim], init)?),
                    cls: None,
                    sem_linear: None,
                },
                ClassifierMode::Linear => DatasetEntry {
                    classes: d.clone(),
                    sem: None,
                    sem_embed: None,
                    cls: Some(Linear::new(&mut dp.pp("cls"), dim, c + 1, true)?),
                    sem_linear: Some(Linear::new(&mut dp.pp("semantic"), dim, c, true)?),
                },
            };
            datasets.push(entry);
        }
        Ok(Self {
            inst,
            inst_embed,
            bg,
            bg_embed,
            datasets,
            mode: config.classifier,
        })
    }

    pub fn mode(&self) -> ClassifierMode {
        self.mode
    }

    pub fn num_instances(&self) -> usize {
        self.inst.dims()[0]
    }

    pub fn classes(&self, dataset: &str) -> Result<&DatasetClasses> {
        Ok(&self.entry(dataset)?.classes)
    }

    pub fn dataset_names(&self) -> Vec<&str> {
        self.datasets.iter().map(|d| d.classes.name.as_str()).collect()
    }

    fn entry(&self, dataset: &str) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|d| d.classes.name == dataset)
            .ok_or_else(|| Error::UnknownDataset(dataset.to_string()))
    }

    /// Semantic query rows of a dataset `(C, D)`, things first.
    pub fn semantic(&self, dataset: &str) -> Result<Option<&Tensor>> {
        Ok(self.entry(dataset)?.sem.as_ref())
    }

    /// `[semantic(things), instance(I), background]`. In linear-classifier
    /// mode only the instance queries are emitted.
    pub fn build_vis_queries(&self, dataset: &str) -> Result<TargetQuerySet> {
        self.build(dataset, false)
    }

    /// `[semantic(things + stuff), instance(I), background]`.
    pub fn build_vps_queries(&self, dataset: &str) -> Result<TargetQuerySet> {
        self.build(dataset, true)
    }

    fn build(&self, dataset: &str, with_stuff: bool) -> Result<TargetQuerySet> {
        let e = self.entry(dataset)?;
        let class_ids: Vec<u32> = if with_stuff {
            e.classes.all()
        } else {
            e.classes.things.clone()
        };
        let mut roles = Vec::new();
        let mut q = Vec::new();
        let mut emb = Vec::new();
        if let (Some(sem), Some(sem_embed)) = (&e.sem, &e.sem_embed) {
            if !class_ids.is_empty() {
                q.push(sem.narrow(0, 0, class_ids.len())?);
                emb.push(sem_embed.narrow(0, 0, class_ids.len())?);
                roles.extend(class_ids.iter().map(|&c| QueryRole::Semantic { class_id: c }));
            }
        }
        q.push(self.inst.clone());
        emb.push(self.inst_embed.clone());
        roles.extend((0..self.num_instances()).map(|slot| QueryRole::Instance { slot }));
        if self.mode == ClassifierMode::Queries {
            q.push(self.bg.clone());
            emb.push(self.bg_embed.clone());
            roles.push(QueryRole::Background);
        }

        let classifier = match (&e.cls, &e.sem_linear) {
            (Some(cls), Some(sem)) => {
                let c_all = e.classes.things.len() + e.classes.stuff.len();
                let cls = if with_stuff {
                    cls.clone()
                } else {
                    let mut rows: Vec<u32> = (0..class_ids.len() as u32).collect();
                    rows.push(c_all as u32);
                    let idx = index_tensor(rows)?;
                    Linear {
                        weight: cls.weight.index_select(&idx, 0)?,
                        bias: cls.bias.as_ref().map(|b| b.index_select(&idx, 0)).transpose()?,
                    }
                };
                Some(LinearClassifier {
                    cls,
                    semantic: with_stuff.then(|| sem.clone()),
                    class_ids: class_ids.clone(),
                })
            }
            _ => None,
        };
        Ok(TargetQuerySet {
            queries: Tensor::cat(&q, 0)?,
            embeddings: Tensor::cat(&emb, 0)?,
            roles,
            classifier,
        })
    }
}
