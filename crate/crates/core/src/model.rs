//! The full network: embeddings, per-level encoder/decoder pairs and the
//! transformer, trained end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{encode_level, LevelEncoder};
use crate::decoder::{decode_level, LevelDecoder, OutputHead};
use crate::embedding::{embed_class_row, embed_keys, embed_positions, sequence_keys, EmbeddingTables, TokenKey};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scheme::{plan_groups, CompressionScheme, Group, GroupLayout};
use crate::sequence::{TokenSequence, MAX_SEQUENCE_DEPTH};
use crate::tensor::Tensor;
use crate::transformer::{Dropout, Transformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    /// Transformer input positions (class token plus latents).
    pub max_positions: usize,
    /// Class labels; the last one doubles as the unconditional label.
    pub classes: usize,
    pub scheme: String,
    pub max_depth: u32,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ff_width: 256,
            max_positions: 1024,
            classes: 4,
            scheme: "0/1".into(),
            max_depth: 5,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<CompressionScheme> {
        let bad = |m: String| Err::<CompressionScheme, _>(Error::InvalidArgument(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.ff_width == 0 || self.max_positions < 2 || self.classes == 0 {
            return bad("ff_width, classes must be positive and max_positions at least 2".into());
        }
        if self.max_depth == 0 || self.max_depth as usize > MAX_SEQUENCE_DEPTH {
            return bad(format!("max_depth {} outside 1..={MAX_SEQUENCE_DEPTH}", self.max_depth));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        CompressionScheme::parse(&self.scheme)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelModules {
    pub encoder: LevelEncoder,
    pub decoder: LevelDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub scheme: CompressionScheme,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    /// Index 0 = depth 1.
    pub levels: Vec<LevelModules>,
    pub head: OutputHead,
    pub transformer: Transformer,
}

/// Static per-sequence inputs of a forward pass.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub keys: Vec<TokenKey>,
    pub mixed: Vec<bool>,
    pub layout: GroupLayout,
    pub label: usize,
    pub targets: Vec<usize>,
    pub depths: Vec<u32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let scheme = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let tables = EmbeddingTables::init(&mut store, d, config.max_depth, config.classes, &mut rng);
        let levels = (1..=config.max_depth)
            .map(|depth| {
                let ls = scheme.level(depth);
                LevelModules {
                    encoder: LevelEncoder::init(&mut store, depth, ls, d, &mut rng),
                    decoder: LevelDecoder::init(&mut store, depth, ls, d, &mut rng),
                }
            })
            .collect();
        let head = OutputHead::init(&mut store, d, &mut rng);
        let transformer = Transformer::init(
            &mut store,
            config.layers,
            config.heads,
            d,
            config.ff_width,
            config.max_positions,
            &mut rng,
        );
        Ok(Self {
            config,
            scheme,
            store,
            tables,
            levels,
            head,
            transformer,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Class row used for `label`, falling back to the unconditional row.
    pub fn resolve_label(&self, label: Option<u32>) -> Result<usize> {
        match label {
            None => Ok(self.config.classes - 1),
            Some(c) if (c as usize) < self.config.classes => Ok(c as usize),
            Some(c) => Err(Error::InvalidArgument(format!(
                "class {c} outside [0, {})",
                self.config.classes
            ))),
        }
    }

    /// Latents a sequence compresses to, checked against the position budget.
    pub fn check_length(&self, latents: usize) -> Result<()> {
        let max = self.config.max_positions - 1;
        if latents > max {
            return Err(Error::TooLong { latents, max });
        }
        Ok(())
    }

    pub fn prepare(&self, seq: &TokenSequence) -> Result<Prepared> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if seq.max_depth() > self.config.max_depth {
            return Err(Error::Shape(format!(
                "sequence depth {} exceeds model depth {}",
                seq.max_depth(),
                self.config.max_depth
            )));
        }
        let keys = sequence_keys(&seq.tokens, &self.tables)?;
        let layout = plan_groups(seq, &self.scheme);
        self.check_length(layout.len())?;
        Ok(Prepared {
            keys,
            mixed: seq.tokens.iter().map(|t| t.value.is_mixed()).collect(),
            label: self.resolve_label(seq.class_label)?,
            targets: seq.tokens.iter().map(|t| t.value.class_index()).collect(),
            depths: seq.tokens.iter().map(|t| t.depth).collect(),
            layout,
        })
    }

    /// Teacher-forced logits, one row per token in sequence order.
    pub fn forward(&self, g: &mut Graph, prep: &Prepared, dropout: Option<&mut Dropout>) -> Result<Var> {
        let emb = embed_keys(g, &self.tables, &prep.keys);
        let pos = embed_positions(g, &self.tables, &prep.keys);
        let levels: Vec<_> = prep
            .layout
            .level_groups
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(d, r)| (d, r.clone()))
            .collect();

        let mut encoded = Vec::with_capacity(levels.len());
        for (d, range) in &levels {
            let groups = &prep.layout.groups[range.clone()];
            encoded.push(encode_level(g, &self.levels[*d].encoder, groups, emb, &prep.mixed));
        }
        let latents = g.concat_rows(encoded.iter().map(|e| e.latents).collect());
        let n = prep.layout.len();
        let class = embed_class_row(g, &self.tables, prep.label)?;
        let mut parts = vec![class];
        if n > 1 {
            parts.push(g.gather_rows(latents, &(0..n - 1).collect::<Vec<_>>()));
        }
        let input = g.concat_rows(parts);
        let ctx = self.transformer.forward(g, input, dropout)?;

        let mut logits = Vec::with_capacity(levels.len());
        let mut slot_of = vec![None; prep.keys.len()];
        let mut slot = 0;
        for ((d, range), enc) in levels.iter().zip(&encoded) {
            let rows: Vec<usize> = range.clone().collect();
            let level_ctx = g.gather_rows(ctx, &rows);
            let dec = &self.levels[*d].decoder;
            logits.push(decode_level(g, dec, &self.head, level_ctx, enc, pos, &prep.mixed));
            for node in &enc.tiers[0] {
                if let Some(i) = node {
                    slot_of[*i] = Some(slot);
                }
                slot += 1;
            }
        }
        let all = g.concat_rows(logits);
        debug_assert!(slot_of.iter().all(Option::is_some));
        Ok(g.gather(all, slot_of))
    }

    pub fn forward_values(&self, seq: &TokenSequence) -> Result<Tensor> {
        let prep = self.prepare(seq)?;
        let mut g = Graph::new(&self.store);
        let v = self.forward(&mut g, &prep, None)?;
        Ok(g.value(v).clone())
    }

    /// Context rows for the class token followed by `latents`.
    pub fn context(&self, label: usize, latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let class = embed_class_row(&mut g, &self.tables, label)?;
        let mut parts = vec![class];
        if latents.rows() > 0 {
            parts.push(g.input(latents.clone()));
        }
        let input = g.concat_rows(parts);
        let ctx = self.transformer.forward(&mut g, input, None)?;
        Ok(g.value(ctx).clone())
    }

    /// Tier-0 slot logits of one group, given the context row for it.
    /// Tokens not yet known may carry any key; they only reach later slots.
    pub fn group_logits(&self, keys: &[TokenKey], mixed: &[bool], group: &Group, ctx_row: &[f64]) -> Tensor {
        let (local, lkeys, lmixed) = localize(group, keys, mixed);
        let mut g = Graph::new(&self.store);
        let emb = embed_keys(&mut g, &self.tables, &lkeys);
        let pos = embed_positions(&mut g, &self.tables, &lkeys);
        let level = &self.levels[group.depth as usize - 1];
        let enc = encode_level(&mut g, &level.encoder, std::slice::from_ref(&local), emb, &lmixed);
        let ctx = g.input(Tensor::from_vec(1, ctx_row.len(), ctx_row.to_vec()));
        let logits = decode_level(&mut g, &level.decoder, &self.head, ctx, &enc, pos, &lmixed);
        g.value(logits).clone()
    }

    /// Latent vector of one completed group.
    pub fn group_latent(&self, keys: &[TokenKey], mixed: &[bool], group: &Group) -> Vec<f64> {
        let (local, lkeys, lmixed) = localize(group, keys, mixed);
        let mut g = Graph::new(&self.store);
        let emb = embed_keys(&mut g, &self.tables, &lkeys);
        let level = &self.levels[group.depth as usize - 1];
        let enc = encode_level(&mut g, &level.encoder, std::slice::from_ref(&local), emb, &lmixed);
        g.value(enc.latents).data().to_vec()
    }
}

/// Renumbers a group's token indices into a compact local range.
fn localize(group: &Group, keys: &[TokenKey], mixed: &[bool]) -> (Group, Vec<TokenKey>, Vec<bool>) {
    let mut used: Vec<usize> = group.tiers.iter().flatten().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let local = |i: usize| used.binary_search(&i).expect("index in group");
    let tiers = group
        .tiers
        .iter()
        .map(|tier| tier.iter().map(|n| n.map(local)).collect())
        .collect();
    (
        Group {
            depth: group.depth,
            scheme: group.scheme,
            tiers,
        },
        used.iter().map(|&i| keys[i]).collect(),
        used.iter().map(|&i| mixed[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;
    use crate::octree::build_octree;
    use crate::sequence::linearize;

    fn small_config(scheme: &str) -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            width: 8,
            ff_width: 16,
            max_positions: 512,
            classes: 2,
            scheme: scheme.into(),
            max_depth: 3,
            dropout: 0.0,
        }
    }

    fn ball(res: u32) -> TokenSequence {
        let c = res as f64 / 2.0;
        let grid = VoxelGrid::from_fn(res, |x, y, z| {
            let d = |v: u32| v as f64 + 0.5 - c;
            d(x) * d(x) + d(y) * d(y) + d(z) * d(z) < c * c * 0.6
        })
        .unwrap();
        linearize(&build_octree(&grid).unwrap())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small_config("0/1");
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config("0/1");
        c.scheme = "2/4".into();
        assert!(c.validate().is_err());
        let c: ModelConfig = toml::from_str("width = 32\nheads = 2").unwrap();
        assert_eq!((c.width, c.layers), (32, 2));
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }

    #[test]
    fn forward_shapes() {
        for scheme in ["0/1", "0/2,0/4", "0/1,1/4", "0/8,1/8"] {
            let model = Model::new(small_config(scheme), 1).unwrap();
            let seq = ball(8);
            let logits = model.forward_values(&seq).unwrap();
            assert_eq!(logits.shape(), (seq.len(), 3), "{scheme}");
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(small_config("0/2"), 7).unwrap();
        let b = Model::new(small_config("0/2"), 7).unwrap();
        let c = Model::new(small_config("0/2"), 8).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn group_path_matches_full_forward() {
        let model = Model::new(small_config("0/1,0/2,1/4"), 2).unwrap();
        let seq = ball(8);
        let full = model.forward_values(&seq).unwrap();
        let prep = model.prepare(&seq).unwrap();
        let mut latents = Vec::new();
        for group in &prep.layout.groups {
            let k = latents.len() / model.config.width;
            let lat = Tensor::from_vec(k, model.config.width, latents.clone());
            let ctx = model.context(prep.label, &lat).unwrap();
            let logits = model.group_logits(&prep.keys, &prep.mixed, group, ctx.row(k));
            for (slot, node) in group.tiers[0].iter().enumerate() {
                if let Some(i) = node {
                    assert_eq!(logits.row(slot), full.row(*i));
                }
            }
            latents.extend(model.group_latent(&prep.keys, &prep.mixed, group));
        }
    }

    #[test]
    fn length_budget() {
        let mut c = small_config("0/1");
        c.max_positions = 10;
        let model = Model::new(c, 0).unwrap();
        assert!(matches!(model.prepare(&ball(8)), Err(Error::TooLong { .. })));
    }

    #[test]
    fn labels() {
        let model = Model::new(small_config("0/1"), 0).unwrap();
        assert_eq!(model.resolve_label(None).unwrap(), 1);
        assert_eq!(model.resolve_label(Some(0)).unwrap(), 0);
        assert!(model.resolve_label(Some(2)).is_err());
    }
}
