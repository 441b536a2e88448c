//! Causal self-attention over a user's fused item vectors with learned
//! absolute positions. The user representation is the last hidden state.

use rand::Rng;

use crate::autograd::{Graph, Groups, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{add_and_norm, normal_init, Dropout, FeedForward, LayerNorm, MultiHeadAttention, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    /// `max_len × d` position table.
    pub positions: ParamId,
    pub blocks: Vec<BackboneBlock>,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Hidden states of every position of every sequence, stacked.
    pub states: Var,
    pub groups: Groups,
}

impl BackboneOutput {
    /// The last state of each sequence.
    pub fn last<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.gather(self.states, self.groups.last_rows())
    }
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        let positions = store.add("backbone.positions", normal_init(max_len, d, INIT_STD, rng));
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("backbone.{i}");
                BackboneBlock {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, heads, rng),
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_hidden, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                }
            })
            .collect();
        Self {
            positions,
            blocks,
            max_len,
        }
    }

    /// Runs every sequence in `sequences` (lists of row indices into `reps`)
    /// through the causal stack. Sequences are packed without padding and
    /// attention never crosses sequence boundaries.
    pub fn forward<T: Scalar, S: AsRef<[usize]>>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        reps: Var,
        sequences: &[S],
        dropout: &mut Dropout<'_>,
    ) -> Result<BackboneOutput> {
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(sequences.len());
        for s in sequences {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::EmptySequence);
            }
            if s.len() > self.max_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of length {} exceeds the position table ({})",
                    s.len(),
                    self.max_len
                )));
            }
            rows.extend_from_slice(s);
            positions.extend(0..s.len());
            lengths.push(s.len());
        }
        if sequences.is_empty() {
            return Err(Error::EmptySequence);
        }
        let groups = Groups::from_lengths(lengths);
        let items = g.gather(reps, rows);
        let table = g.param(store, self.positions);
        let pos = g.gather(table, positions);
        let x = g.add(items, pos);
        let mut h = dropout.apply(g, x);
        for block in &self.blocks {
            let a = block
                .attn
                .forward(g, store, h, h, groups.clone(), groups.clone(), true);
            h = add_and_norm(g, store, &block.norm_attn, h, a, dropout);
            let f = block.ffn.forward(g, store, h);
            h = add_and_norm(g, store, &block.norm_ffn, h, f, dropout);
        }
        Ok(BackboneOutput { states: h, groups })
    }
}

/// Eval-mode pass over one sequence of fused vectors (`n × d`): all states
/// and the user vector `r` (the last state).
pub fn backbone_forward<T: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<T>,
    reps: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>)> {
    if reps.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new();
    let r = g.constant(reps.clone());
    let seq: Vec<usize> = (0..reps.rows()).collect();
    let out = backbone.forward(&mut g, store, r, &[seq], &mut Dropout::eval())?;
    let states = g.value(out.states).clone();
    let last = states.row(states.rows() - 1).to_vec();
    Ok((states, last))
}

/// Adds each item's row of the ID table to its fused vector.
pub fn add_id_embeddings<T: Scalar>(reps: &Matrix<T>, id_table: &Matrix<T>, items: &[usize]) -> Result<Matrix<T>> {
    if items.len() != reps.rows() {
        return Err(Error::Shape(format!(
            "{} items for {} representations",
            items.len(),
            reps.rows()
        )));
    }
    let mut out = reps.clone();
    for (r, &item) in items.iter().enumerate() {
        if item >= id_table.rows() {
            return Err(Error::UnknownItem(item.to_string()));
        }
        for (o, &x) in out.row_mut(r).iter_mut().zip(id_table.row(item)) {
            *o += x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(layers: usize) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Backbone::new(&mut store, 8, 2, 16, layers, 6, &mut rng);
        (store, b)
    }

    fn reps(n: usize, salt: f64) -> Matrix<f64> {
        Matrix::from_fn(n, 8, |r, c| ((r * 8 + c) as f64 * 0.71 + salt).cos())
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (store, b) = toy(1);
        assert!(matches!(
            backbone_forward(&b, &store, &Matrix::zeros(0, 8)),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn zero_layers_is_item_plus_position() {
        let (store, b) = toy(0);
        let x = reps(3, 0.0);
        let (_, r) = backbone_forward(&b, &store, &x).unwrap();
        let pos = store.get(b.positions);
        for c in 0..8 {
            assert_eq!(r[c], x.get(2, c) + pos.get(2, c));
        }
    }

    #[test]
    fn later_items_do_not_change_earlier_states() {
        let (store, b) = toy(2);
        let x = reps(5, 0.0);
        let mut y = x.clone();
        y.row_mut(4).copy_from_slice(reps(1, 9.0).row(0));
        let (sx, _) = backbone_forward(&b, &store, &x).unwrap();
        let (sy, _) = backbone_forward(&b, &store, &y).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((sx.get(r, c) - sy.get(r, c)).abs() < 1e-12);
            }
        }
        assert!(sx.row(4) != sy.row(4));
    }

    #[test]
    fn prefix_states_match_full_states() {
        let (store, b) = toy(1);
        let x = reps(6, 0.3);
        let (full, _) = backbone_forward(&b, &store, &x).unwrap();
        for p in 1..=6 {
            let (part, _) = backbone_forward(&b, &store, &x.select_rows(&(0..p).collect::<Vec<_>>())).unwrap();
            for r in 0..p {
                for c in 0..8 {
                    assert!((part.get(r, c) - full.get(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn swapping_items_changes_the_user_vector() {
        let (store, b) = toy(1);
        let x = reps(4, 0.0);
        let y = x.select_rows(&[1, 0, 2, 3]);
        let (_, rx) = backbone_forward(&b, &store, &x).unwrap();
        let (_, ry) = backbone_forward(&b, &store, &y).unwrap();
        assert!(rx.iter().zip(&ry).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn id_embeddings_touch_only_their_items() {
        let x = reps(4, 0.0);
        let mut table = Matrix::zeros(3, 8);
        assert_eq!(add_id_embeddings(&x, &table, &[0, 1, 2, 1]).unwrap(), x);
        table.set(1, 0, 1.0);
        let y = add_id_embeddings(&x, &table, &[0, 1, 2, 1]).unwrap();
        for r in 0..4 {
            let expect = if r % 2 == 1 { 1.0 } else { 0.0 };
            assert_eq!(y.get(r, 0) - x.get(r, 0), expect);
        }
        assert!(matches!(
            add_id_embeddings(&x, &table, &[0, 1, 3, 1]),
            Err(Error::UnknownItem(_))
        ));
    }
}
