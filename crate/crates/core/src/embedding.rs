//! Learned value, position and class embeddings.
//!
//! A token's input vector is the sum of seven table rows: its value, its three
//! axis IDs, and the three axis IDs of the token that follows it. The last
//! token of a sequence uses the reserved END row of each axis table as its
//! successor position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::sequence::{axis_id_count, Token};
use crate::tensor::Tensor;

/// Value row 0 is reserved for padding / not-yet-sampled tokens.
pub const PAD_VALUE: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub value: ParamId,
    pub pos: [ParamId; 3],
    pub class: ParamId,
    /// Row index of the END position in each axis table.
    pub end: usize,
    pub classes: usize,
}

impl EmbeddingTables {
    pub fn init(
        store: &mut ParamStore,
        width: usize,
        max_depth: u32,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let end = axis_id_count(max_depth);
        let std = 0.3;
        let value = store.add_normal("embed.value", 4, width, std, rng);
        let pos = ["x", "y", "z"].map(|a| store.add_normal(format!("embed.pos_{a}"), end + 1, width, std, rng));
        let class = store.add_normal("embed.class", classes, width, std, rng);
        Self {
            value,
            pos,
            class,
            end,
            classes,
        }
    }
}

/// Table indices feeding one token embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenKey {
    /// 1..=3, or `PAD_VALUE` for an unknown value.
    pub value: usize,
    pub pos: [usize; 3],
    pub succ: [usize; 3],
}

impl TokenKey {
    pub fn new(token: &Token, successor: Option<&Token>, tables: &EmbeddingTables) -> Result<Self> {
        let pos = token.pos.0.map(|p| p as usize);
        let succ = successor.map_or([tables.end; 3], |s| s.pos.0.map(|p| p as usize));
        if pos.iter().any(|&p| p >= tables.end) || succ.iter().any(|&p| p > tables.end) {
            return Err(Error::Shape(format!(
                "token at depth {} is deeper than the embedding tables allow",
                token.depth
            )));
        }
        Ok(Self {
            value: token.value.code() as usize,
            pos,
            succ,
        })
    }
}

/// Keys for every token; token `i` takes token `i + 1` as successor.
pub fn sequence_keys(tokens: &[Token], tables: &EmbeddingTables) -> Result<Vec<TokenKey>> {
    (0..tokens.len())
        .map(|i| TokenKey::new(&tokens[i], tokens.get(i + 1), tables))
        .collect()
}

fn gather_table(g: &mut Graph, table: ParamId, idx: impl Iterator<Item = usize>) -> Var {
    let t = g.param(table);
    g.gather(t, idx.map(Some).collect())
}

/// `v + p_x + p_y + p_z + p_x(succ) + p_y(succ) + p_z(succ)` per key, summed in that order.
pub fn embed_keys(g: &mut Graph, tables: &EmbeddingTables, keys: &[TokenKey]) -> Var {
    let mut acc = gather_table(g, tables.value, keys.iter().map(|k| k.value));
    for a in 0..3 {
        let p = gather_table(g, tables.pos[a], keys.iter().map(|k| k.pos[a]));
        acc = g.add(acc, p);
    }
    for a in 0..3 {
        let p = gather_table(g, tables.pos[a], keys.iter().map(|k| k.succ[a]));
        acc = g.add(acc, p);
    }
    acc
}

/// `p_x + p_y + p_z` of each key's own position.
pub fn embed_positions(g: &mut Graph, tables: &EmbeddingTables, keys: &[TokenKey]) -> Var {
    let mut acc = gather_table(g, tables.pos[0], keys.iter().map(|k| k.pos[0]));
    for a in 1..3 {
        let p = gather_table(g, tables.pos[a], keys.iter().map(|k| k.pos[a]));
        acc = g.add(acc, p);
    }
    acc
}

pub fn embed_class_row(g: &mut Graph, tables: &EmbeddingTables, label: usize) -> Result<Var> {
    if label >= tables.classes {
        return Err(Error::InvalidArgument(format!(
            "class label {label} outside [0, {})",
            tables.classes
        )));
    }
    let t = g.param(tables.class);
    Ok(g.gather(t, vec![Some(label)]))
}

/// Embedding of a single token outside any graph.
pub fn embed_token(
    store: &ParamStore,
    tables: &EmbeddingTables,
    token: &Token,
    successor: Option<&Token>,
) -> Result<Vec<f64>> {
    let key = TokenKey::new(token, successor, tables)?;
    let mut g = Graph::new(store);
    let v = embed_keys(&mut g, tables, &[key]);
    Ok(g.value(v).data().to_vec())
}

pub fn embed_sequence(store: &ParamStore, tables: &EmbeddingTables, tokens: &[Token]) -> Result<Tensor> {
    let keys = sequence_keys(tokens, tables)?;
    if keys.is_empty() {
        return Ok(Tensor::zeros(0, store.get(tables.value).cols()));
    }
    let mut g = Graph::new(store);
    let v = embed_keys(&mut g, tables, &keys);
    Ok(g.value(v).clone())
}

pub fn embed_class(store: &ParamStore, tables: &EmbeddingTables, label: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let v = embed_class_row(&mut g, tables, label)?;
    Ok(g.value(v).data().to_vec())
}

/// Label used for every shape when training without class conditioning.
pub fn unconditional_label(classes: usize) -> usize {
    classes - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::CellValue;
    use crate::sequence::SpatialId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tok(value: CellValue, depth: u32, pos: [u32; 3]) -> Token {
        Token {
            value,
            depth,
            pos: SpatialId(pos),
        }
    }

    fn tables(width: usize) -> (ParamStore, EmbeddingTables) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTables::init(&mut store, width, 3, 4, &mut rng);
        (store, t)
    }

    #[test]
    fn zero_tables_give_zero_vectors() {
        let (mut store, t) = tables(5);
        for id in [t.value, t.pos[0], t.pos[1], t.pos[2], t.class] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let e = embed_token(&store, &t, &tok(CellValue::Full, 1, [0, 1, 0]), None).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        assert!(embed_class(&store, &t, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_tables_count_contributions() {
        // each table one-hot into its own index range: value [0,4), x [4,4+E), ...
        let (_, probe) = tables(1);
        let rows = probe.end + 1;
        let width = 4 + 3 * rows;
        let mut store = ParamStore::new();
        let mut onehot = |name: &str, n: usize, offset: usize| {
            let mut t = Tensor::zeros(n, width);
            for r in 0..n {
                t.row_mut(r)[offset + r] = 1.0;
            }
            store.add(name, t)
        };
        let value = onehot("v", 4, 0);
        let pos = [onehot("x", rows, 4), onehot("y", rows, 4 + rows), onehot("z", rows, 4 + 2 * rows)];
        let class = store.add_zeros("c", 2, width);
        let t = EmbeddingTables {
            value,
            pos,
            class,
            end: probe.end,
            classes: 2,
        };
        let e = embed_token(
            &store,
            &t,
            &tok(CellValue::Full, 1, [0, 0, 0]),
            Some(&tok(CellValue::Empty, 1, [1, 0, 0])),
        )
        .unwrap();
        let mut expected = vec![0.0; width];
        expected[3] = 1.0; // value 3
        expected[4] = 1.0; // own x 0
        expected[4 + 1] = 1.0; // successor x 1
        expected[4 + rows] = 2.0; // y 0 twice
        expected[4 + 2 * rows] = 2.0; // z 0 twice
        assert_eq!(e, expected);
        assert_eq!(e.iter().sum::<f64>(), 7.0);
    }

    #[test]
    fn successor_difference_is_linear() {
        let (store, t) = tables(6);
        let a = tok(CellValue::Empty, 2, [2, 3, 4]);
        let s1 = tok(CellValue::Full, 2, [3, 3, 4]);
        let s2 = tok(CellValue::Full, 2, [2, 4, 5]);
        let e1 = embed_token(&store, &t, &a, Some(&s1)).unwrap();
        let e2 = embed_token(&store, &t, &a, Some(&s2)).unwrap();
        let p = |s: &Token| -> Vec<f64> {
            (0..6)
                .map(|i| (0..3).map(|ax| store.get(t.pos[ax]).get(s.pos.0[ax] as usize, i)).sum())
                .collect()
        };
        let (p1, p2) = (p(&s1), p(&s2));
        for i in 0..6 {
            assert!(((e1[i] - e2[i]) - (p1[i] - p2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn last_token_uses_end_row() {
        let (store, t) = tables(4);
        let toks: Vec<Token> = (0..8u32)
            .map(|i| tok(CellValue::Empty, 1, [i & 1, (i >> 1) & 1, i >> 2]))
            .collect();
        let e = embed_sequence(&store, &t, &toks).unwrap();
        assert_eq!(e.rows(), 8);
        let last = embed_token(&store, &t, &toks[7], None).unwrap();
        assert_eq!(e.row(7), last.as_slice());
        let keys = sequence_keys(&toks, &t).unwrap();
        assert_eq!(keys[7].succ, [t.end; 3]);
        assert_eq!(keys[6].succ, [1, 1, 1]);
        assert_eq!(embed_sequence(&store, &t, &[]).unwrap().rows(), 0);
    }

    #[test]
    fn class_rows() {
        let (store, t) = tables(4);
        let a = embed_class(&store, &t, 0).unwrap();
        let b = embed_class(&store, &t, 1).unwrap();
        assert_ne!(a, b);
        assert!(embed_class(&store, &t, 4).is_err());
        assert_eq!(unconditional_label(4), 3);
    }

    #[test]
    fn too_deep_tokens_are_rejected() {
        let (store, t) = tables(4);
        assert!(embed_token(&store, &t, &tok(CellValue::Empty, 4, [14, 0, 0]), None).is_err());
    }
}
