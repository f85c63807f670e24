//! Autoregressive shape generation and superresolution.
//!
//! Generation runs level by level and group by group. Each group's context
//! vector comes from the transformer over the latents of all finished groups;
//! its tokens are then drawn one at a time through the decoder, and once the
//! group is complete it is encoded and its latent appended. Logits computed
//! here are bit-identical to the teacher-forced logits of the final sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{TokenKey, PAD_VALUE};
use crate::error::{Error, Result};
use crate::graph::softmax;
use crate::grid::VoxelGrid;
use crate::model::Model;
use crate::octree::{child_coords, octree_to_voxels, CellValue};
use crate::scheme::plan_level;
use crate::sequence::{delinearize, delinearize_prefix, spatial_ids, Token, TokenSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    /// Softmax temperature; 0 selects the most likely value (argmax).
    pub temperature: f64,
    /// Deepest level generated; the output grid has resolution `2^max_depth`.
    pub max_depth: u32,
    pub class: Option<u32>,
    pub seed: u64,
}

impl SampleConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_depth == 0 || self.max_depth > model.config.max_depth {
            return Err(Error::InvalidArgument(format!(
                "max depth {} outside 1..={}",
                self.max_depth, model.config.max_depth
            )));
        }
        model.resolve_label(self.class)?;
        Ok(())
    }
}

/// `softmax(logits / tau)`.
pub fn temperature_scale(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    Ok(softmax(&logits.iter().map(|l| l / tau).collect::<Vec<_>>()))
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub sequence: TokenSequence,
    pub grid: VoxelGrid,
    /// Raw decoder logits of every sampled token, keyed by token index.
    pub logits: Vec<(usize, [f64; 3])>,
    /// Set when generation stopped at the model's position limit; the
    /// unfinished level is dropped and open MIXED cells are filled.
    pub stopped: Option<String>,
}

/// Draws one value from `logits`; MIXED is excluded when `final_level`.
fn draw(logits: &[f64], final_level: bool, tau: f64, rng: &mut impl Rng) -> CellValue {
    let mut l = logits.to_vec();
    if final_level {
        l[CellValue::Mixed.class_index()] = f64::NEG_INFINITY;
    }
    let k = if tau == 0.0 {
        // first maximum wins
        (0..3).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    } else {
        let p = softmax(&l.iter().map(|v| v / tau).collect::<Vec<_>>());
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = 2;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc && *pk > 0.0 {
                pick = k;
                break;
            }
        }
        if final_level && pick == CellValue::Mixed.class_index() {
            pick = if p[0] >= p[2] { 0 } else { 2 };
        }
        pick
    };
    CellValue::from_class_index(k)
}

struct State<'m> {
    model: &'m Model,
    tokens: Vec<Token>,
    known: Vec<bool>,
    keys: Vec<TokenKey>,
    latents: Vec<f64>,
}

impl<'m> State<'m> {
    fn key(&self, i: usize) -> Result<TokenKey> {
        let mut k = TokenKey::new(&self.tokens[i], self.tokens.get(i + 1), &self.model.tables)?;
        if !self.known[i] {
            k.value = PAD_VALUE;
        }
        Ok(k)
    }

    /// Appends placeholders for the children of MIXED cells at `depth - 1`
    /// (the eight depth-1 cells when `depth == 1`). Returns how many were added.
    fn open_level(&mut self, depth: u32) -> Result<usize> {
        let parents: Vec<[u32; 3]> = if depth == 1 {
            vec![[0; 3]]
        } else {
            self.tokens
                .iter()
                .filter(|t| t.depth == depth - 1 && t.value.is_mixed())
                .map(Token::coords)
                .collect()
        };
        let start = self.tokens.len();
        for p in parents {
            for c in 0..8 {
                let coords = child_coords(p, c);
                self.tokens.push(Token {
                    value: CellValue::Empty,
                    depth,
                    pos: spatial_ids(depth, coords)?,
                });
                self.known.push(false);
            }
        }
        let added = self.tokens.len() - start;
        if start > 0 && added > 0 {
            // previous last token now has a real successor
            self.keys[start - 1] = self.key(start - 1)?;
        }
        for i in start..self.tokens.len() {
            let k = self.key(i)?;
            self.keys.push(k);
        }
        Ok(added)
    }

    fn set(&mut self, i: usize, value: CellValue) -> Result<()> {
        self.tokens[i].value = value;
        self.known[i] = true;
        self.keys[i] = self.key(i)?;
        Ok(())
    }

    fn sequence(&self) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens.clone(),
            class_label: None,
        }
    }
}

/// Generates (or continues) a sequence. Levels covered by `prefix` are force-fed.
fn generate(model: &Model, prefix: &[CellValue], cfg: &SampleConfig) -> Result<SampleOutput> {
    cfg.validate(model)?;
    let label = model.resolve_label(cfg.class)?;
    let width = model.config.width;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = State {
        model,
        tokens: Vec::new(),
        known: Vec::new(),
        keys: Vec::new(),
        latents: Vec::new(),
    };
    let mut logits_log = Vec::new();
    let mut stopped = None;
    let mut pending = prefix.iter().copied();
    let mut complete_depth = 0;

    let mut depth = 1;
    let mut added = st.open_level(1)?;
    'levels: while added > 0 {
        let level_start = st.tokens.len() - added;
        for i in level_start..st.tokens.len() {
            if let Some(v) = pending.next() {
                st.set(i, v)?;
            }
        }
        let seq = st.sequence();
        let links = seq.links();
        let ranges = seq.level_ranges();
        let groups = plan_level(&seq, &links, &ranges, &model.scheme, depth);
        let final_level = depth == cfg.max_depth;
        for (gi, group) in groups.iter().enumerate() {
            let mixed: Vec<bool> = st.tokens.iter().map(|t| t.value.is_mixed()).collect();
            let open: Vec<(usize, usize)> = group.tiers[0]
                .iter()
                .enumerate()
                .filter_map(|(slot, n)| n.filter(|&i| !st.known[i]).map(|i| (slot, i)))
                .collect();
            let k = st.latents.len() / width;
            if !open.is_empty() {
                if k + 1 > model.config.max_positions {
                    stopped = Some(format!(
                        "latent sequence reached the model limit of {} positions",
                        model.config.max_positions
                    ));
                    break 'levels;
                }
                let lat = Tensor::from_vec(k, width, st.latents.clone());
                let ctx = model.context(label, &lat)?;
                let row = ctx.row(k).to_vec();
                for (slot, i) in open {
                    let logits = model.group_logits(&st.keys, &mixed, group, &row);
                    let l: [f64; 3] = logits.row(slot).try_into().expect("three logits");
                    let v = draw(&l, final_level, cfg.temperature, &mut rng);
                    logits_log.push((i, l));
                    st.set(i, v)?;
                }
            }
            if gi + 1 == groups.len() {
                // the successor of the level's last token is the next level's first cell
                added = if final_level { 0 } else { st.open_level(depth + 1)? };
            }
            let mixed: Vec<bool> = st.tokens.iter().map(|t| t.value.is_mixed()).collect();
            st.latents.extend(model.group_latent(&st.keys, &mixed, group));
        }
        complete_depth = depth;
        depth += 1;
    }

    if stopped.is_some() {
        // keep complete levels only; open MIXED cells become FULL
        let keep = complete_depth.max(1);
        st.tokens.retain(|t| t.depth <= keep);
        for t in &mut st.tokens {
            if t.depth == keep && t.value.is_mixed() {
                t.value = CellValue::Full;
            }
        }
        logits_log.retain(|(i, _)| *i < st.tokens.len());
    }
    let mut sequence = st.sequence();
    sequence.class_label = cfg.class;
    let values = sequence.values();
    let tree = delinearize(&values)?;
    let grid = octree_to_voxels(&tree, 1 << cfg.max_depth)?;
    Ok(SampleOutput {
        sequence,
        grid,
        logits: logits_log,
        stopped,
    })
}

/// Samples one shape from scratch.
pub fn sample_shape(model: &Model, cfg: &SampleConfig) -> Result<SampleOutput> {
    generate(model, &[], cfg)
}

/// `count` shapes with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn sample_many(model: &Model, cfg: &SampleConfig, count: usize) -> Result<Vec<SampleOutput>> {
    (0..count)
        .map(|i| {
            let c = SampleConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            sample_shape(model, &c)
        })
        .collect()
}

/// Continues a level-aligned prefix up to `cfg.max_depth`. The output begins
/// with the prefix tokens unchanged.
pub fn superresolve(model: &Model, prefix: &TokenSequence, cfg: &SampleConfig) -> Result<SampleOutput> {
    let values = prefix.values();
    let tree = delinearize_prefix(&values)?;
    let depth = tree.depth() as u32;
    if depth > cfg.max_depth {
        return Err(Error::InvalidArgument(format!(
            "prefix depth {depth} exceeds target depth {}",
            cfg.max_depth
        )));
    }
    if depth == cfg.max_depth && !tree.is_complete() {
        return Err(Error::InvalidArgument(format!(
            "prefix has MIXED cells at the target depth {depth}"
        )));
    }
    let cfg = SampleConfig {
        class: cfg.class.or(prefix.class_label),
        ..cfg.clone()
    };
    generate(model, &values, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::octree::build_octree;
    use crate::sequence::linearize;

    fn model(scheme: &str, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                layers: 1,
                heads: 2,
                width: 8,
                ff_width: 16,
                max_positions: 600,
                classes: 3,
                scheme: scheme.into(),
                max_depth: 3,
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn cfg(t: f64, seed: u64) -> SampleConfig {
        SampleConfig {
            temperature: t,
            max_depth: 3,
            class: Some(1),
            seed,
        }
    }

    #[test]
    fn temperature_examples() {
        let p = temperature_scale(&[2.0, 1.0, 0.0], 0.5).unwrap();
        for (a, b) in p.iter().zip([0.8668, 0.1173, 0.0159]) {
            assert!((a - b).abs() < 5e-5);
        }
        assert_eq!(temperature_scale(&[0.3, -1.0, 2.0], 1.0).unwrap(), softmax(&[0.3, -1.0, 2.0]));
        let flat = temperature_scale(&[2.0, 1.0, 0.0], 1e12).unwrap();
        assert!(flat.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-9));
        assert!(temperature_scale(&[0.0; 3], 0.0).is_err());
        assert!(temperature_scale(&[0.0; 3], -1.0).is_err());
    }

    #[test]
    fn samples_are_valid_and_reproducible() {
        for scheme in ["0/1", "0/2,0/4,1/4", "0/8,1/8"] {
            let m = model(scheme, 1);
            for seed in 0..5 {
                let a = sample_shape(&m, &cfg(1.0, seed)).unwrap();
                let b = sample_shape(&m, &cfg(1.0, seed)).unwrap();
                assert_eq!(a.sequence, b.sequence);
                assert_eq!(a.grid.resolution(), 8);
                assert!(delinearize(&a.sequence.values()).is_ok());
                assert!(a.sequence.tokens.iter().all(|t| t.depth < 3 || !t.value.is_mixed()));
            }
        }
    }

    #[test]
    fn argmax_is_deterministic_across_seeds() {
        let m = model("0/2", 4);
        let a = sample_shape(&m, &cfg(0.0, 1)).unwrap();
        let b = sample_shape(&m, &cfg(0.0, 99)).unwrap();
        assert_eq!(a.sequence, b.sequence);
    }

    #[test]
    fn sampled_logits_match_teacher_forcing() {
        for scheme in ["0/1,0/2,1/4", "0/4,1/8"] {
            let m = model(scheme, 2);
            let out = sample_shape(&m, &cfg(1.0, 3)).unwrap();
            let forced = m.forward_values(&out.sequence).unwrap();
            assert_eq!(out.logits.len(), out.sequence.len());
            for (i, l) in &out.logits {
                assert_eq!(forced.row(*i), l.as_slice(), "token {i}");
            }
        }
    }

    #[test]
    fn superresolve_keeps_prefix() {
        let m = model("0/1,0/2", 5);
        let grid = VoxelGrid::from_fn(8, |x, y, z| x + y + z < 9).unwrap();
        let seq = linearize(&build_octree(&grid).unwrap());
        for d in 1..=3 {
            let prefix = seq.truncated(d);
            let out = superresolve(&m, &prefix, &cfg(1.0, 7)).unwrap();
            assert_eq!(&out.sequence.tokens[..prefix.len()], prefix.tokens.as_slice());
            if d == 3 {
                assert_eq!(out.grid, grid);
                assert!(out.logits.is_empty());
            }
        }
    }

    #[test]
    fn rejects_bad_prefixes() {
        let m = model("0/1", 5);
        let bad = TokenSequence::from_values(&[CellValue::Mixed; 8], None).unwrap();
        let mut c = cfg(1.0, 0);
        c.max_depth = 1;
        assert!(superresolve(&m, &bad, &c).is_err());
        let mut short = bad.clone();
        short.tokens.truncate(5);
        assert!(superresolve(&m, &short, &cfg(1.0, 0)).is_err());
        c.max_depth = 4;
        assert!(sample_shape(&m, &c).is_err());
    }

    #[test]
    fn position_limit_stops_with_decodable_tree() {
        let mut m = model("0/1", 6);
        m.config.max_positions = 12;
        let out = sample_shape(&m, &cfg(1.0, 0)).unwrap();
        assert!(out.stopped.is_some());
        assert!(delinearize(&out.sequence.values()).is_ok());
    }
}
