//! Evolutionary compression: encode a trained network as per-synapse
//! existence probabilities, sample a sparser offspring, retrain, repeat.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::{count_params, save_network, NetworkDescriptor, WeightStore};
use crate::nn::{train_sgd, TrainConfig};
use crate::tensor::Tensor;

/// Existence probabilities of one conv layer's synapses.
#[derive(Debug, Clone, PartialEq)]
pub struct GenomeLayer {
    /// Kernel shape `[F, C, kh, kw]`.
    pub shape: [usize; 4],
    pub probs: Vec<f32>,
}

/// Per-layer synapse probabilities, aligned with the descriptor's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapticGenome {
    pub ancestor: String,
    pub layers: Vec<Option<GenomeLayer>>,
}

impl SynapticGenome {
    pub fn synapses(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.probs.len()).sum()
    }

    pub fn biases(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.shape[0]).sum()
    }

    fn conv_count(&self) -> usize {
        self.layers.iter().flatten().count()
    }
}

/// `p = |w| / max|w|` per layer. Masked synapses hold zero weights and so get
/// `p = 0`.
pub fn encode_genome(net: &NetworkDescriptor, weights: &WeightStore) -> Result<SynapticGenome> {
    weights.validate(net)?;
    let layers = weights
        .layers()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let Some(w) = w else { return Ok(None) };
            let k = w.kernel().data();
            let max = k.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if max == 0.0 {
                return Err(Error::layer(i, "all synapses are zero; existence probabilities are undefined"));
            }
            let s = w.kernel().shape();
            Ok(Some(GenomeLayer {
                shape: [s[0], s[1], s[2], s[3]],
                probs: k.iter().map(|v| v.abs() / max).collect(),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(SynapticGenome {
        ancestor: net.name().to_string(),
        layers,
    })
}

/// The environmental factor γ, either one value for every conv layer or one
/// per conv layer in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentalFactor {
    Uniform(f32),
    PerLayer(Vec<f32>),
}

impl EnvironmentalFactor {
    /// Parses `0.7` or `0.9,0.8,0.8`.
    pub fn parse(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Config(format!("environmental factor {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        let env = if values.len() == 1 {
            Self::Uniform(values[0])
        } else {
            Self::PerLayer(values)
        };
        env.check_values()?;
        Ok(env)
    }

    fn check_values(&self) -> Result<()> {
        let values: &[f32] = match self {
            Self::Uniform(g) => std::slice::from_ref(g),
            Self::PerLayer(v) => v,
        };
        if let Some(g) = values.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::InvalidArgument(format!("environmental factor must lie in (0, 1], got {g}")));
        }
        Ok(())
    }

    pub fn validate(&self, conv_layers: usize) -> Result<()> {
        self.check_values()?;
        if let Self::PerLayer(v) = self {
            if v.len() != conv_layers {
                return Err(Error::InvalidArgument(format!(
                    "{} per-layer environmental factors for {conv_layers} conv layers",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// γ of the `k`-th conv layer.
    pub fn gamma(&self, k: usize) -> f32 {
        match self {
            Self::Uniform(g) => *g,
            Self::PerLayer(v) => v[k],
        }
    }

    pub fn any_below_one(&self) -> bool {
        match self {
            Self::Uniform(g) => *g < 1.0,
            Self::PerLayer(v) => v.iter().any(|&g| g < 1.0),
        }
    }
}

impl std::fmt::Display for EnvironmentalFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Uniform(g) => write!(f, "{g}"),
            Self::PerLayer(v) => {
                let parts: Vec<String> = v.iter().map(f32::to_string).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

/// Masks aligned with the genome's layers.
pub type MaskSet = Vec<Option<Vec<bool>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Offspring {
    pub masks: MaskSet,
    /// `Σ γ·p` over all synapses plus the bias count.
    pub expected_params: f64,
}

impl Offspring {
    pub fn retained(&self) -> usize {
        self.masks.iter().flatten().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// Independent Bernoulli(γ·p) draws, one uniform per synapse in layer then
/// kernel order.
pub fn sample_masks(genome: &SynapticGenome, env: &EnvironmentalFactor, seed: u64) -> Result<Offspring> {
    env.validate(genome.conv_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expected = genome.biases() as f64;
    let mut k = 0;
    let masks = genome
        .layers
        .iter()
        .map(|layer| {
            let layer = layer.as_ref()?;
            let g = env.gamma(k);
            k += 1;
            Some(
                layer
                    .probs
                    .iter()
                    .map(|&p| {
                        let keep_p = g * p;
                        expected += keep_p as f64;
                        rng.random::<f32>() < keep_p
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(Offspring {
        masks,
        expected_params: expected,
    })
}

/// Removes every synapse leaving a unit whose incoming synapses are all
/// gone, repeated until nothing changes. Returns the number of synapses
/// removed. A unit is an output channel of a conv layer; its consumers are
/// the input channels of the next conv layer.
pub fn prune_dead_units(genome: &SynapticGenome, masks: &mut MaskSet) -> usize {
    let convs: Vec<usize> = genome
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.as_ref().map(|_| i))
        .collect();
    let mut removed = 0;
    loop {
        let mut changed = false;
        for pair in convs.windows(2) {
            let (src, dst) = (pair[0], pair[1]);
            let [f_out, c_in, kh, kw] = genome.layers[src].as_ref().expect("conv").shape;
            let [d_out, d_in, dkh, dkw] = genome.layers[dst].as_ref().expect("conv").shape;
            if d_in != f_out {
                // channel counts disagree, so the layers are not directly wired
                continue;
            }
            let fan = c_in * kh * kw;
            let dead: Vec<usize> = {
                let m = masks[src].as_ref().expect("conv mask");
                (0..f_out).filter(|&f| !m[f * fan..(f + 1) * fan].iter().any(|&b| b)).collect()
            };
            let m = masks[dst].as_mut().expect("conv mask");
            let taps = dkh * dkw;
            for f in dead {
                for o in 0..d_out {
                    let base = (o * d_in + f) * taps;
                    for b in &mut m[base..base + taps] {
                        if *b {
                            *b = false;
                            removed += 1;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return removed;
        }
    }
}

/// Stochastic offspring: sampled masks closed under dead-unit removal.
pub fn synthesize_offspring(genome: &SynapticGenome, env: &EnvironmentalFactor, seed: u64) -> Result<Offspring> {
    let mut offspring = sample_masks(genome, env, seed)?;
    prune_dead_units(genome, &mut offspring.masks);
    Ok(offspring)
}

/// `parent` with the offspring masks installed; removed synapses become zero.
pub fn apply_masks(parent: &WeightStore, masks: &MaskSet) -> Result<WeightStore> {
    let mut store = parent.clone();
    for (i, m) in masks.iter().enumerate() {
        if let Some(m) = m {
            let layer = store
                .layer_mut(i)
                .ok_or_else(|| Error::layer(i, "mask given for a layer without weights"))?;
            layer.set_mask(m.clone())?;
        }
    }
    Ok(store)
}

/// Drops the retained synapse with the lowest probability (first in layer
/// then kernel order on ties). Returns false if nothing is retained.
fn drop_weakest(genome: &SynapticGenome, masks: &mut MaskSet) -> bool {
    let mut best: Option<(f32, usize, usize)> = None;
    for (i, (layer, mask)) in genome.layers.iter().zip(masks.iter()).enumerate() {
        let (Some(layer), Some(mask)) = (layer, mask) else { continue };
        for (n, (&p, &keep)) in layer.probs.iter().zip(mask).enumerate() {
            if keep && best.is_none_or(|(bp, _, _)| p < bp) {
                best = Some((p, i, n));
            }
        }
    }
    match best {
        Some((_, i, n)) => {
            masks[i].as_mut().expect("conv mask")[n] = false;
            true
        }
        None => false,
    }
}

/// A training set plus the metric recorded for each generation.
pub struct Task<'a> {
    pub train: &'a [(Tensor, Tensor)],
    pub metric: &'a dyn Fn(&WeightStore) -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub generation: usize,
    pub weights: WeightStore,
    pub params: u64,
    /// `None` for the ancestor.
    pub expected_params: Option<f64>,
    pub metric: f64,
    /// Sampling seed (the ancestor records the run seed).
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lineage {
    pub net: NetworkDescriptor,
    /// Generation 0 is the ancestor.
    pub generations: Vec<Generation>,
    /// Set when retraining failed; the lineage stops at the last good generation.
    pub aborted: Option<String>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenerationJson {
    generation: usize,
    param_count: u64,
    expected_param_count: Option<f64>,
    metric: f64,
    seed: u64,
    file: String,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct LineageJson {
    network: String,
    generations: Vec<GenerationJson>,
    aborted: Option<String>,
}

impl Lineage {
    pub fn last(&self) -> &Generation {
        self.generations.last().expect("lineage always holds the ancestor")
    }

    pub fn to_json(&self) -> String {
        let doc = LineageJson {
            network: self.net.name().to_string(),
            generations: self
                .generations
                .iter()
                .map(|g| GenerationJson {
                    generation: g.generation,
                    param_count: g.params,
                    expected_param_count: g.expected_params,
                    metric: g.metric,
                    seed: g.seed,
                    file: format!("gen_{}.fnet", g.generation),
                })
                .collect(),
            aborted: self.aborted.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("lineage serializes")
    }

    /// Writes `gen_<k>.fnet` per generation and `lineage.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for g in &self.generations {
            save_network(&self.net, Some(&g.weights), dir.join(format!("gen_{}.fnet", g.generation)))?;
        }
        let path = dir.join("lineage.json");
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn generation_seed(seed: u64, g: usize) -> u64 {
    seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `generations` rounds of encode, synthesize and retrain from a trained
/// ancestor. When any γ is below one every offspring has strictly fewer
/// synapses than its parent. A retraining failure ends the lineage early with
/// `aborted` set.
pub fn evolve_generations(
    net: &NetworkDescriptor,
    ancestor: &WeightStore,
    task: &Task<'_>,
    generations: usize,
    env: &EnvironmentalFactor,
    retrain: &TrainConfig,
    seed: u64,
    mut on_generation: impl FnMut(&Generation),
) -> Result<Lineage> {
    if generations == 0 {
        return Err(Error::InvalidArgument("evolution needs at least one generation".into()));
    }
    ancestor.validate(net)?;
    env.validate(net.conv_layers().count())?;
    retrain.validate()?;

    let first = Generation {
        generation: 0,
        weights: ancestor.clone(),
        params: count_params(net, Some(ancestor)),
        expected_params: None,
        metric: (task.metric)(ancestor)?,
        seed,
    };
    on_generation(&first);
    let mut lineage = Lineage {
        net: net.clone(),
        generations: vec![first],
        aborted: None,
    };

    for g in 1..=generations {
        let parent = &lineage.last().weights;
        let genome = encode_genome(net, parent)?;
        let gseed = generation_seed(seed, g);
        let mut offspring = synthesize_offspring(&genome, env, gseed)?;
        if env.any_below_one() && offspring.retained() >= parent.live_synapses() && drop_weakest(&genome, &mut offspring.masks) {
            prune_dead_units(&genome, &mut offspring.masks);
        }
        let child = apply_masks(parent, &offspring.masks)?;
        let cfg = TrainConfig {
            seed: generation_seed(retrain.seed, g),
            ..retrain.clone()
        };
        let trained = match train_sgd(net, &child, task.train, &cfg) {
            Ok(w) => w,
            Err(e @ Error::Diverged { .. }) => {
                lineage.aborted = Some(format!("generation {g}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let record = Generation {
            generation: g,
            params: count_params(net, Some(&trained)),
            expected_params: Some(offspring.expected_params),
            metric: (task.metric)(&trained)?,
            weights: trained,
            seed: gseed,
        };
        on_generation(&record);
        lineage.generations.push(record);
    }
    Ok(lineage)
}
